"""Retrieval strategies over the passage set: Okapi BM25, dense cosine,
learned-sparse dot product, multi-vector MaxSim, and weighted hybrid fusion.

BM25 uses the non-negative idf variant ln(1 + (N - df + 0.5)/(df + 0.5)) and
deduplicated query terms, so adding a query-term occurrence to a document
never lowers its score. Hybrid fusion min-max normalizes each component over
the candidate union (constant components map to 0.5) before the weighted sum.
"""

from __future__ import annotations

import json
import logging
import math
import re
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

from .corpus import Passage
from .metrics import MetricsReport, QueryMeta, build_report
from .providers import EmbeddingBundle, ProviderError

logger = logging.getLogger(__name__)

MODES = ("bm25", "dense", "sparse", "multivec")


class RetrievalError(Exception):
    """Index construction or ranking cannot proceed."""


_WORD = re.compile(r"\w+")


def tokenize_words(text: str) -> list[str]:
    return _WORD.findall(text.lower())


def tokenize_char_bigrams(text: str) -> list[str]:
    """Overlapping character bigrams per word run; single chars kept as-is."""
    tokens = []
    for run in _WORD.findall(text.lower()):
        if len(run) == 1:
            tokens.append(run)
        else:
            tokens.extend(run[i:i + 2] for i in range(len(run) - 1))
    return tokens


TOKENIZERS: dict[str, Callable[[str], list[str]]] = {
    "unicode_word": tokenize_words,
    "char_bigram": tokenize_char_bigrams,
}


@dataclass(frozen=True)
class Bm25Params:
    k1: float = 1.5
    b: float = 0.75
    tokenizer_id: str = "unicode_word"

    def __post_init__(self):
        if self.k1 <= 0:
            raise ValueError("k1 must be > 0")
        if not 0.0 <= self.b <= 1.0:
            raise ValueError("b must be in [0,1]")
        if self.tokenizer_id not in TOKENIZERS:
            raise ValueError(f"unknown tokenizer {self.tokenizer_id!r}")


@dataclass
class RankedList:
    query_id: str
    entries: list[tuple[str, float]]

    def __post_init__(self):
        ids = [pid for pid, _ in self.entries]
        if len(set(ids)) != len(ids):
            raise ValueError(f"ranking for {self.query_id} has duplicate passage ids")
        for (pid_a, score_a), (pid_b, score_b) in zip(self.entries, self.entries[1:]):
            if score_a < score_b or (score_a == score_b and pid_a >= pid_b):
                raise ValueError(
                    f"ranking for {self.query_id} violates (score desc, id asc) order")

    @classmethod
    def from_scores(cls, query_id: str, scores: Mapping[str, float],
                    k: int | None = None) -> "RankedList":
        ordered = sorted(scores.items(), key=lambda item: (-item[1], item[0]))
        if k is not None:
            ordered = ordered[:k]
        return cls(query_id=query_id, entries=[(pid, float(s)) for pid, s in ordered])

    @property
    def passage_ids(self) -> list[str]:
        return [pid for pid, _ in self.entries]


@dataclass(frozen=True)
class FusionWeights:
    w_dense: float
    w_sparse: float
    w_multi: float

    def __post_init__(self):
        for name, w in self.as_dict().items():
            if not 0.0 <= w <= 1.0:
                raise ValueError(f"{name} must be in [0,1], got {w}")
        total = self.w_dense + self.w_sparse + self.w_multi
        if abs(total - 1.0) > 1e-9:
            raise ValueError(f"fusion weights must sum to 1, got {total}")

    def as_dict(self) -> dict[str, float]:
        return {"dense": self.w_dense, "sparse": self.w_sparse, "multi": self.w_multi}

    def label(self) -> str:
        return f"hybrid({self.w_dense:g},{self.w_sparse:g},{self.w_multi:g})"


DEFAULT_FUSION_CONFIGS = (
    FusionWeights(0.4, 0.3, 0.3),
    FusionWeights(0.7, 0.3, 0.0),
    FusionWeights(0.5, 0.0, 0.5),
)


def maxsim(query_rows: np.ndarray, doc_rows: np.ndarray) -> float:
    """Sum over query token rows of the best dot product against doc rows."""
    if query_rows.size == 0 or doc_rows.size == 0:
        logger.warning("maxsim over an empty token matrix; score 0")
        return 0.0
    return float((query_rows @ doc_rows.T).max(axis=1).sum())


def minmax_normalize(scores: Mapping[str, float]) -> dict[str, float]:
    """Map scores to [0,1]; a constant component carries no signal -> all 0.5."""
    if not scores:
        return {}
    values = list(scores.values())
    lo, hi = min(values), max(values)
    if hi - lo <= 0.0:
        return {pid: 0.5 for pid in scores}
    return {pid: (s - lo) / (hi - lo) for pid, s in scores.items()}


class Bm25Index:
    def __init__(self, docs: Iterable[tuple[str, str]], params: Bm25Params = Bm25Params()):
        self.params = params
        tokenizer = TOKENIZERS[params.tokenizer_id]
        self._tokenizer = tokenizer
        self.postings: dict[str, dict[str, int]] = {}
        self.doc_len: dict[str, int] = {}
        for doc_id, text in docs:
            if doc_id in self.doc_len:
                raise ValueError(f"duplicate doc id {doc_id!r}")
            tokens = tokenizer(text)
            self.doc_len[doc_id] = len(tokens)
            for token in tokens:
                self.postings.setdefault(token, {})
                self.postings[token][doc_id] = self.postings[token].get(doc_id, 0) + 1
        if not self.doc_len:
            raise ValueError("BM25 index needs at least one document")
        self.n_docs = len(self.doc_len)
        self.avgdl = sum(self.doc_len.values()) / self.n_docs

    def idf(self, term: str) -> float:
        df = len(self.postings.get(term, {}))
        return math.log(1.0 + (self.n_docs - df + 0.5) / (df + 0.5))

    def score(self, query_terms: Iterable[str], doc_id: str) -> float:
        k1, b = self.params.k1, self.params.b
        dl = self.doc_len[doc_id]
        norm = k1 * (1.0 - b + b * dl / self.avgdl)
        total = 0.0
        for term in set(query_terms):
            tf = self.postings.get(term, {}).get(doc_id, 0)
            if tf:
                total += self.idf(term) * tf * (k1 + 1.0) / (tf + norm)
        return total

    def rank(self, query_id: str, query_text: str, k: int) -> RankedList:
        terms = sorted(set(self._tokenizer(query_text)))
        if not terms:
            logger.warning("query %s tokenized to nothing; empty BM25 ranking", query_id)
            return RankedList(query_id=query_id, entries=[])
        candidates: set[str] = set()
        for term in terms:
            candidates.update(self.postings.get(term, {}))
        scores = {doc_id: self.score(terms, doc_id) for doc_id in candidates}
        return RankedList.from_scores(query_id, scores, k)


def _bundle_to_json(bundle: EmbeddingBundle) -> dict:
    return {
        "dense": None if bundle.dense is None else bundle.dense.tolist(),
        "sparse": bundle.sparse,
        "multivec": None if bundle.multivec is None else bundle.multivec.tolist(),
    }


def _bundle_from_json(entry: dict) -> EmbeddingBundle:
    return EmbeddingBundle(
        dense=None if entry.get("dense") is None else np.asarray(entry["dense"], dtype=float),
        sparse=entry.get("sparse"),
        multivec=None if entry.get("multivec") is None
        else np.asarray(entry["multivec"], dtype=float),
    )


class Retriever:
    """Index handle over a fixed passage set.

    Embedding bundles are cached to JSONL keyed by passage_id; a build over a
    warm cache makes no provider calls. Only passage text is indexed; the
    metadata header is prompt-side context, not retrieval content.
    """

    EMBED_BATCH = 64

    def __init__(self, passages: Sequence[Passage], modes: Iterable[str],
                 embedder=None, cache_path: Path | str | None = None,
                 bm25_params: Bm25Params = Bm25Params()):
        self.modes = set(modes)
        unknown = self.modes - set(MODES)
        if unknown:
            raise RetrievalError(f"unknown retrieval modes: {sorted(unknown)}")
        if not self.modes:
            raise RetrievalError("at least one retrieval mode required")
        self.passages = {p.passage_id: p for p in passages}
        if not self.passages:
            raise RetrievalError("retriever needs at least one passage")
        self._bm25 = Bm25Index(
            [(p.passage_id, p.text) for p in passages], bm25_params) \
            if "bm25" in self.modes else None
        self._embed_modes = self.modes - {"bm25"}
        self._bundles: dict[str, EmbeddingBundle] = {}
        self._embedder = embedder
        self._query_cache: dict[str, EmbeddingBundle] = {}
        if self._embed_modes:
            self._load_or_build_embeddings(cache_path)

    # -- embedding cache ----------------------------------------------------

    def _cache_complete(self, cached: dict[str, EmbeddingBundle]) -> list[str]:
        missing = []
        for pid in self.passages:
            bundle = cached.get(pid)
            if bundle is None or any(getattr(bundle, _attr(mode)) is None
                                     for mode in self._embed_modes):
                missing.append(pid)
        return sorted(missing)

    def _load_or_build_embeddings(self, cache_path: Path | str | None) -> None:
        cache_path = Path(cache_path) if cache_path is not None else None
        cached: dict[str, EmbeddingBundle] = {}
        if cache_path is not None and cache_path.exists():
            with open(cache_path, encoding="utf-8") as fh:
                for line in fh:
                    if line.strip():
                        entry = json.loads(line)
                        cached[entry["passage_id"]] = _bundle_from_json(entry)
        missing = self._cache_complete(cached)
        if missing:
            if self._embedder is None:
                raise RetrievalError(
                    f"no embedder and no cached embeddings for passages: {missing[:5]}"
                    f"{'...' if len(missing) > 5 else ''}")
            ordered = sorted(self.passages)
            texts = {pid: self.passages[pid].text for pid in ordered}
            for start in range(0, len(missing), self.EMBED_BATCH):
                batch = missing[start:start + self.EMBED_BATCH]
                try:
                    bundles = self._embedder.embed([texts[pid] for pid in batch],
                                                   modes=self._embed_modes)
                except ProviderError as exc:
                    still_missing = self._cache_complete(cached)
                    raise RetrievalError(
                        f"partial index: embeddings missing for "
                        f"{len(still_missing)} passages ({still_missing[:5]}...): {exc}"
                    ) from exc
                for pid, bundle in zip(batch, bundles):
                    merged = cached.get(pid, EmbeddingBundle())
                    for mode in self._embed_modes:
                        setattr(merged, _attr(mode), getattr(bundle, _attr(mode)))
                    cached[pid] = merged
            if cache_path is not None:
                cache_path.parent.mkdir(parents=True, exist_ok=True)
                with open(cache_path, "w", encoding="utf-8") as fh:
                    for pid in sorted(cached):
                        entry = {"passage_id": pid, **_bundle_to_json(cached[pid])}
                        fh.write(json.dumps(entry, sort_keys=True) + "\n")
        self._bundles = cached

    def _query_bundle(self, query_text: str) -> EmbeddingBundle:
        if query_text not in self._query_cache:
            if self._embedder is None:
                raise RetrievalError("no embedder configured for query embedding")
            self._query_cache[query_text] = self._embedder.embed(
                [query_text], modes=self._embed_modes)[0]
        return self._query_cache[query_text]

    def _require_mode(self, mode: str) -> None:
        if mode not in self.modes:
            raise RetrievalError(f"mode {mode!r} was not built for this retriever")

    # -- component scores ---------------------------------------------------

    def _dense_scores(self, query_text: str, candidates: Iterable[str]) -> dict[str, float]:
        q = self._query_bundle(query_text).dense
        qn = np.linalg.norm(q)
        scores = {}
        for pid in candidates:
            d = self._bundles[pid].dense
            dn = np.linalg.norm(d)
            scores[pid] = float(q @ d / (qn * dn)) if qn > 0 and dn > 0 else 0.0
        return scores

    def _sparse_scores(self, query_text: str, candidates: Iterable[str]) -> dict[str, float]:
        q = self._query_bundle(query_text).sparse
        scores = {}
        for pid in candidates:
            d = self._bundles[pid].sparse
            scores[pid] = float(sum(w * d[t] for t, w in q.items() if t in d))
        return scores

    def _multivec_scores(self, query_text: str, candidates: Iterable[str]) -> dict[str, float]:
        q = self._query_bundle(query_text).multivec
        return {pid: maxsim(q, self._bundles[pid].multivec) for pid in candidates}

    _SCORERS = {"dense": "_dense_scores", "sparse": "_sparse_scores",
                "multivec": "_multivec_scores"}

    def component_scores(self, mode: str, query_text: str,
                         candidates: Iterable[str] | None = None) -> dict[str, float]:
        self._require_mode(mode)
        if candidates is None:
            candidates = sorted(self.passages)
        return getattr(self, self._SCORERS[mode])(query_text, candidates)

    # -- rankings -----------------------------------------------------------

    def rank_bm25(self, query_id: str, query_text: str, k: int) -> RankedList:
        self._require_mode("bm25")
        return self._bm25.rank(query_id, query_text, k)

    def rank_dense(self, query_id: str, query_text: str, k: int) -> RankedList:
        scores = self.component_scores("dense", query_text)
        return RankedList.from_scores(query_id, scores, k)

    def rank_sparse(self, query_id: str, query_text: str, k: int) -> RankedList:
        scores = self.component_scores("sparse", query_text)
        positive = {pid: s for pid, s in scores.items() if s > 0.0}
        return RankedList.from_scores(query_id, positive, k)

    def rank_multivec(self, query_id: str, query_text: str, k: int) -> RankedList:
        scores = self.component_scores("multivec", query_text)
        return RankedList.from_scores(query_id, scores, k)

    def rank_hybrid(self, query_id: str, query_text: str, weights: FusionWeights,
                    k: int, pool_size: int = 200) -> RankedList:
        component_weights = {
            "dense": weights.w_dense,
            "sparse": weights.w_sparse,
            "multivec": weights.w_multi,
        }
        active = [mode for mode, w in component_weights.items() if w > 0.0]
        for mode in active:
            if mode not in self.modes:
                raise RetrievalError(
                    f"fusion weight on {mode!r} but that mode was not built")
        rank_by_mode = {"dense": self.rank_dense, "sparse": self.rank_sparse,
                        "multivec": self.rank_multivec}
        candidates: set[str] = set()
        for mode in active:
            candidates.update(rank_by_mode[mode](query_id, query_text, pool_size).passage_ids)
        if not candidates:
            return RankedList(query_id=query_id, entries=[])
        fused = {pid: 0.0 for pid in candidates}
        for mode in active:
            normalized = minmax_normalize(
                self.component_scores(mode, query_text, sorted(candidates)))
            for pid, s in normalized.items():
                fused[pid] += component_weights[mode] * s
        return RankedList.from_scores(query_id, fused, k)

    def rank(self, strategy: str | FusionWeights, query_id: str, query_text: str,
             k: int, pool_size: int = 200) -> RankedList:
        if isinstance(strategy, FusionWeights):
            return self.rank_hybrid(query_id, query_text, strategy, k, pool_size)
        methods = {"bm25": self.rank_bm25, "dense": self.rank_dense,
                   "sparse": self.rank_sparse, "multivec": self.rank_multivec}
        if strategy not in methods:
            raise RetrievalError(f"unknown strategy {strategy!r}")
        return methods[strategy](query_id, query_text, k)


def _attr(mode: str) -> str:
    return {"dense": "dense", "sparse": "sparse", "multivec": "multivec"}[mode]


# -- benchmark driver -------------------------------------------------------


@dataclass(frozen=True)
class BenchmarkQuery:
    query_id: str
    text: str
    query_type: str
    source_passage_ids: tuple[str, ...]


def strategy_label(strategy: str | FusionWeights) -> str:
    return strategy.label() if isinstance(strategy, FusionWeights) else strategy


def run_benchmark(retriever: Retriever, queries: Sequence[BenchmarkQuery],
                  strategies: Sequence[str | FusionWeights],
                  cutoffs: Sequence[int] = (5, 10),
                  pool_size: int = 200) -> tuple[MetricsReport, dict[str, dict[str, RankedList]]]:
    """Rank every query under every strategy and score against the qrels
    implied by source passages. Returns (report, runs) for file output."""
    qrels = {}
    meta = {}
    for q in queries:
        missing = [pid for pid in q.source_passage_ids if pid not in retriever.passages]
        if missing:
            raise RetrievalError(
                f"query {q.query_id} references passages outside the corpus: {missing}")
        qrels[q.query_id] = set(q.source_passage_ids)
        meta[q.query_id] = QueryMeta(q.query_id, q.query_type, len(q.source_passage_ids))
    depth = max(cutoffs) if cutoffs else 10
    runs: dict[str, dict[str, RankedList]] = {}
    rankings: dict[str, dict[str, list[str]]] = {}
    for strategy in strategies:
        label = strategy_label(strategy)
        runs[label] = {}
        rankings[label] = {}
        for q in queries:
            ranked = retriever.rank(strategy, q.query_id, q.text, depth, pool_size)
            runs[label][q.query_id] = ranked
            rankings[label][q.query_id] = ranked.passage_ids
    report = build_report(rankings, qrels, meta, cutoffs)
    return report, runs


def write_run_file(path: Path | str, run: Mapping[str, RankedList], tag: str) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        for qid in sorted(run):
            for rank, (pid, score) in enumerate(run[qid].entries, start=1):
                fh.write(f"{qid} Q0 {pid} {rank} {score:.6f} {tag}\n")


def write_qrels_file(path: Path | str, qrels: Mapping[str, Iterable[str]]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        for qid in sorted(qrels):
            for pid in sorted(qrels[qid]):
                fh.write(f"{qid} 0 {pid} 1\n")
