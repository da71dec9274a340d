import math

import numpy as np
import pytest

from querybench.corpus import Passage, render_metadata_header
from querybench.providers import EmbeddingBundle, MockEmbeddingClient, ProviderError
from querybench.retrieval import (
    DEFAULT_FUSION_CONFIGS,
    BenchmarkQuery,
    Bm25Index,
    Bm25Params,
    FusionWeights,
    RankedList,
    RetrievalError,
    Retriever,
    maxsim,
    minmax_normalize,
    run_benchmark,
    tokenize_char_bigrams,
    write_qrels_file,
    write_run_file,
)


def mk_passage(pid: str, text: str, doc_id: str = "d1", product: str = "prodalpha",
               category: str = "deposit", index: int = 1, total: int = 1) -> Passage:
    return Passage(
        passage_id=pid, doc_id=doc_id, product_id=product, category=category,
        chunk_index=index, chunk_total=total, text=text,
        metadata_header=render_metadata_header(product, doc_id, "2024-01-01", index, total))


class PresetEmbedder:
    """Maps exact texts to fixed bundles; fails on anything unknown."""

    def __init__(self, table: dict[str, EmbeddingBundle]):
        self.table = table
        self.calls = 0

    def embed(self, texts, modes):
        self.calls += 1
        return [self.table[t] for t in texts]


# -- BM25 --------------------------------------------------------------------


def test_bm25_hand_computed_okapi():
    docs = [("d1", "apple banana apple"),
            ("d2", "banana cherry"),
            ("d3", "cherry durian cherry cherry")]
    index = Bm25Index(docs, Bm25Params(k1=1.5, b=0.75))

    # independent recomputation of the documented formula
    n, avgdl = 3, (3 + 2 + 4) / 3
    idf_apple = math.log(1 + (n - 1 + 0.5) / (1 + 0.5))
    idf_cherry = math.log(1 + (n - 2 + 0.5) / (2 + 0.5))

    def tf_part(tf, dl, k1=1.5, b=0.75):
        return tf * (k1 + 1) / (tf + k1 * (1 - b + b * dl / avgdl))

    assert abs(index.score(["apple", "cherry"], "d1") - idf_apple * tf_part(2, 3)) <= 1e-9
    assert abs(index.score(["apple", "cherry"], "d2") - idf_cherry * tf_part(1, 2)) <= 1e-9
    assert abs(index.score(["apple", "cherry"], "d3") - idf_cherry * tf_part(3, 4)) <= 1e-9


def test_bm25_zero_overlap_scores_zero_and_is_excluded():
    index = Bm25Index([("d1", "red apple"), ("d2", "blue sky")])
    assert index.score(["apple"], "d2") == 0.0
    ranked = index.rank("q", "apple", 10)
    assert ranked.passage_ids == ["d1"]
    assert index.rank("q", "quartz", 10).entries == []


def test_bm25_empty_query_warns_and_returns_empty(caplog):
    index = Bm25Index([("d1", "red apple")])
    with caplog.at_level("WARNING"):
        ranked = index.rank("q", "!!! ???", 5)
    assert ranked.entries == []
    assert any("tokenized to nothing" in m for m in caplog.messages)


def test_bm25_duplicate_query_terms_count_once():
    index = Bm25Index([("d1", "apple pie"), ("d2", "apple apple tart")])
    once = index.rank("q", "apple", 5)
    twice = index.rank("q", "apple apple", 5)
    assert once.entries == twice.entries


def test_bm25_adding_query_term_occurrence_never_decreases_score():
    rng = np.random.default_rng(2024)
    vocab = [f"w{i}" for i in range(10)]
    for _ in range(60):
        n_docs = int(rng.integers(2, 8))
        texts = [" ".join(rng.choice(vocab, size=rng.integers(3, 30)).tolist())
                 for _ in range(n_docs)]
        target = int(rng.integers(n_docs))
        query = sorted(set(rng.choice(vocab, size=rng.integers(1, 5)).tolist()))
        term = str(rng.choice(query))
        before = Bm25Index(list(zip([f"d{i}" for i in range(n_docs)], texts)))
        grown = list(texts)
        grown[target] = grown[target] + " " + term
        after = Bm25Index(list(zip([f"d{i}" for i in range(n_docs)], grown)))
        assert after.score(query, f"d{target}") >= before.score(query, f"d{target}") - 1e-12


def test_bm25_params_validation():
    with pytest.raises(ValueError):
        Bm25Params(k1=0.0)
    with pytest.raises(ValueError):
        Bm25Params(b=1.2)
    with pytest.raises(ValueError):
        Bm25Params(tokenizer_id="whitespace")


def test_char_bigram_tokenizer():
    assert tokenize_char_bigrams("abc de f") == ["ab", "bc", "de", "f"]
    index = Bm25Index([("d1", "예금상품"), ("d2", "대출상품")],
                      Bm25Params(tokenizer_id="char_bigram"))
    ranked = index.rank("q", "예금", 5)
    assert ranked.passage_ids[0] == "d1"


# -- RankedList / normalization ----------------------------------------------


def test_ranked_list_tie_break_and_validation():
    ranked = RankedList.from_scores("q", {"b": 1.0, "a": 1.0, "c": 2.0}, k=3)
    assert ranked.passage_ids == ["c", "a", "b"]
    with pytest.raises(ValueError, match="duplicate"):
        RankedList("q", [("a", 1.0), ("a", 0.5)])
    with pytest.raises(ValueError, match="order"):
        RankedList("q", [("a", 0.5), ("b", 1.0)])
    with pytest.raises(ValueError, match="order"):
        RankedList("q", [("b", 1.0), ("a", 1.0)])


def test_minmax_normalize():
    scores = {"a": 2.0, "b": 4.0, "c": 3.0}
    normalized = minmax_normalize(scores)
    assert normalized == {"a": 0.0, "b": 1.0, "c": 0.5}
    assert minmax_normalize({"a": 7.0, "b": 7.0}) == {"a": 0.5, "b": 0.5}
    assert minmax_normalize({}) == {}


# -- MaxSim -------------------------------------------------------------------


def brute_force_maxsim(q, d):
    total = 0.0
    for i in range(q.shape[0]):
        best = -np.inf
        for j in range(d.shape[0]):
            best = max(best, float(np.dot(q[i], d[j])))
        total += best
    return total


def unit_rows(rng, n, dim):
    rows = rng.normal(size=(n, dim))
    return rows / np.linalg.norm(rows, axis=1, keepdims=True)


def test_maxsim_identical_matrices():
    rng = np.random.default_rng(5)
    q = unit_rows(rng, 4, 8)
    assert abs(maxsim(q, q) - 4.0) <= 1e-9


def test_maxsim_matches_brute_force():
    rng = np.random.default_rng(6)
    for _ in range(100):
        q = unit_rows(rng, int(rng.integers(1, 7)), 8)
        d = unit_rows(rng, int(rng.integers(1, 7)), 8)
        assert abs(maxsim(q, d) - brute_force_maxsim(q, d)) <= 1e-9


def test_maxsim_orthogonal_and_empty(caplog):
    q = np.array([[1.0, 0.0]])
    d = np.array([[0.0, 1.0]])
    assert maxsim(q, d) == 0.0
    with caplog.at_level("WARNING"):
        assert maxsim(q, np.zeros((0, 2))) == 0.0
    assert any("empty token matrix" in m for m in caplog.messages)


# -- Retriever ----------------------------------------------------------------


def dense_bundle(vec):
    return EmbeddingBundle(dense=np.asarray(vec, dtype=float))


def test_rank_dense_self_similarity():
    passages = [mk_passage("p1", "alpha"), mk_passage("p2", "beta")]
    table = {
        "alpha": dense_bundle([1.0, 0.0]),
        "beta": dense_bundle([0.0, 1.0]),
    }
    retriever = Retriever(passages, {"dense"}, embedder=PresetEmbedder(table))
    ranked = retriever.rank_dense("q", "alpha", 5)
    assert ranked.passage_ids[0] == "p1"
    assert abs(ranked.entries[0][1] - 1.0) <= 1e-9
    assert abs(dict(ranked.entries)["p2"]) <= 1e-9


def test_rank_sparse_dot_product():
    passages = [mk_passage("p1", "t1"), mk_passage("p2", "t2")]
    table = {
        "t1": EmbeddingBundle(sparse={"a": 3.0, "c": 4.0}),
        "t2": EmbeddingBundle(sparse={"b": 5.0}),
        "q-text": EmbeddingBundle(sparse={"a": 2.0, "b": 1.0}),
    }
    retriever = Retriever(passages, {"sparse"}, embedder=PresetEmbedder(table))
    ranked = retriever.rank_sparse("q", "q-text", 5)
    assert dict(ranked.entries) == {"p1": 6.0, "p2": 5.0}

    scores = retriever.component_scores("sparse", "q-text")
    assert scores == {"p1": 6.0, "p2": 5.0}


def test_rank_multivec_uses_maxsim():
    rng = np.random.default_rng(11)
    q_rows = unit_rows(rng, 3, 4)
    d1_rows = q_rows.copy()
    d2_rows = unit_rows(rng, 2, 4)
    passages = [mk_passage("p1", "t1"), mk_passage("p2", "t2")]
    table = {
        "t1": EmbeddingBundle(multivec=d1_rows),
        "t2": EmbeddingBundle(multivec=d2_rows),
        "q-text": EmbeddingBundle(multivec=q_rows),
    }
    retriever = Retriever(passages, {"multivec"}, embedder=PresetEmbedder(table))
    ranked = retriever.rank_multivec("q", "q-text", 5)
    assert ranked.passage_ids[0] == "p1"
    assert abs(ranked.entries[0][1] - 3.0) <= 1e-9
    expected_p2 = brute_force_maxsim(q_rows, d2_rows)
    assert abs(dict(ranked.entries)["p2"] - expected_p2) <= 1e-9


def test_fusion_weights_validation():
    for config in DEFAULT_FUSION_CONFIGS:
        total = config.w_dense + config.w_sparse + config.w_multi
        assert abs(total - 1.0) <= 1e-9
    with pytest.raises(ValueError, match="sum to 1"):
        FusionWeights(0.7, 0.4, 0.0)
    with pytest.raises(ValueError, match="in \\[0,1\\]"):
        FusionWeights(1.2, -0.2, 0.0)
    assert FusionWeights(0.7, 0.3, 0.0).label() == "hybrid(0.7,0.3,0)"


def hybrid_fixture():
    passages = [mk_passage("p1", "t1"), mk_passage("p2", "t2"), mk_passage("p3", "t3")]
    table = {
        "t1": EmbeddingBundle(dense=np.array([1.0, 0.0]), sparse={"b": 1.0}),
        "t2": EmbeddingBundle(dense=np.array([0.0, 1.0]), sparse={"a": 2.0}),
        "t3": EmbeddingBundle(dense=np.array([1.0, 1.0]) / math.sqrt(2), sparse={"a": 1.0}),
        "q-text": EmbeddingBundle(dense=np.array([1.0, 0.0]), sparse={"a": 1.0}),
    }
    return Retriever(passages, {"dense", "sparse"}, embedder=PresetEmbedder(table))


def test_hybrid_hand_computed_two_components():
    retriever = hybrid_fixture()
    ranked = retriever.rank_hybrid("q", "q-text", FusionWeights(0.5, 0.5, 0.0), k=3)
    scores = dict(ranked.entries)
    # dense cosines: p1=1, p2=0, p3=1/sqrt(2) -> minmax: 1, 0, 0.70710678
    # sparse dots:   p1=0, p2=2, p3=1        -> minmax: 0, 1, 0.5
    assert abs(scores["p1"] - 0.5) <= 1e-9
    assert abs(scores["p2"] - 0.5) <= 1e-9
    assert abs(scores["p3"] - (0.5 / math.sqrt(2) + 0.25)) <= 1e-9
    assert ranked.passage_ids == ["p3", "p1", "p2"]  # tie at 0.5 broken by id


def test_hybrid_unit_weight_reproduces_component_order():
    retriever = hybrid_fixture()
    dense_order = retriever.rank_dense("q", "q-text", 3).passage_ids
    hybrid_order = retriever.rank_hybrid("q", "q-text", FusionWeights(1.0, 0.0, 0.0), 3).passage_ids
    assert hybrid_order == dense_order


def test_hybrid_weight_on_unbuilt_mode_rejected():
    retriever = hybrid_fixture()
    with pytest.raises(RetrievalError, match="multivec"):
        retriever.rank_hybrid("q", "q-text", FusionWeights(0.4, 0.3, 0.3), 3)


def test_embedding_cache_round_trip(tmp_path):
    passages = [mk_passage(f"p{i}", f"text number {i} with token zz{i}") for i in range(5)]
    cache = tmp_path / "embeddings.jsonl"
    first = MockEmbeddingClient(seed=1)
    r1 = Retriever(passages, {"dense", "sparse", "multivec"}, embedder=first,
                   cache_path=cache)
    assert first.calls > 0
    second = MockEmbeddingClient(seed=1)
    r2 = Retriever(passages, {"dense", "sparse", "multivec"}, embedder=second,
                   cache_path=cache)
    assert second.calls == 0  # warm cache: no provider calls
    q = "text number 3 with token zz3"
    assert r1.rank_dense("q", q, 5).entries == r2.rank_dense("q", q, 5).entries


def test_missing_cache_and_no_embedder_is_an_error(tmp_path):
    passages = [mk_passage("p1", "alpha")]
    with pytest.raises(RetrievalError, match="p1"):
        Retriever(passages, {"dense"}, embedder=None, cache_path=tmp_path / "none.jsonl")


def test_provider_failure_names_missing_passages():
    class FailingEmbedder:
        def embed(self, texts, modes):
            raise ProviderError.rate_limited("quota")

    passages = [mk_passage("p1", "alpha"), mk_passage("p2", "beta")]
    with pytest.raises(RetrievalError, match="partial index"):
        Retriever(passages, {"dense"}, embedder=FailingEmbedder())


def test_bm25_only_retriever_makes_no_embedding_calls():
    passages = [mk_passage(f"p{i}", f"tok{i} filler") for i in range(24)]
    embedder = MockEmbeddingClient()
    retriever = Retriever(passages, {"bm25"}, embedder=embedder)
    assert embedder.calls == 0
    assert retriever.rank_bm25("q", "tok3", 5).passage_ids == ["p3"]
    with pytest.raises(RetrievalError, match="not built"):
        retriever.rank_dense("q", "tok3", 5)


def test_run_benchmark_end_to_end(tmp_path):
    passages = [
        mk_passage("p1", "alpha fee schedule zzone"),
        mk_passage("p2", "beta rate table zztwo"),
        mk_passage("p3", "gamma limits zzthree"),
    ]
    retriever = Retriever(passages, {"bm25", "dense", "sparse", "multivec"},
                          embedder=MockEmbeddingClient(seed=2))
    queries = [
        BenchmarkQuery("q1", "zzone fee", "single", ("p1",)),
        BenchmarkQuery("q2", "zztwo and zzthree", "comparing", ("p2", "p3")),
    ]
    strategies = ["bm25", "dense", "sparse", "multivec", *DEFAULT_FUSION_CONFIGS]
    report, runs = run_benchmark(retriever, queries, strategies, cutoffs=(5, 10))
    assert set(report.strategies) == {
        "bm25", "dense", "sparse", "multivec",
        "hybrid(0.4,0.3,0.3)", "hybrid(0.7,0.3,0)", "hybrid(0.5,0,0.5)"}
    bm25 = report.strategies["bm25"]
    assert bm25.means["recall@5"] == 1.0  # distinctive tokens make bm25 exact
    assert bm25.means["ndcg@5"] == 1.0
    assert set(bm25.by_doc_count) == {"single", "2-docs", "3-docs", "4-docs"}

    run_path = tmp_path / "run.txt"
    write_run_file(run_path, runs["bm25"], tag="bm25")
    lines = run_path.read_text().splitlines()
    assert lines[0].split() == ["q1", "Q0", "p1", "1", lines[0].split()[4], "bm25"]
    qrels_path = tmp_path / "qrels.txt"
    write_qrels_file(qrels_path, {"q1": {"p1"}, "q2": {"p2", "p3"}})
    assert qrels_path.read_text().splitlines() == [
        "q1 0 p1 1", "q2 0 p2 1", "q2 0 p3 1"]


def test_run_benchmark_rejects_unknown_passage():
    passages = [mk_passage("p1", "alpha")]
    retriever = Retriever(passages, {"bm25"})
    queries = [BenchmarkQuery("q1", "alpha", "single", ("p9",))]
    with pytest.raises(RetrievalError, match="p9"):
        run_benchmark(retriever, queries, ["bm25"])


def test_rankings_are_pure():
    retriever = hybrid_fixture()
    first = retriever.rank_hybrid("q", "q-text", FusionWeights(0.5, 0.5, 0.0), 3)
    second = retriever.rank_hybrid("q", "q-text", FusionWeights(0.5, 0.5, 0.0), 3)
    assert first.entries == second.entries
