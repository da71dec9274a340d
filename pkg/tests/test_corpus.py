import json
from pathlib import Path

import pytest

from querybench.corpus import (
    ChunkingConfig,
    IngestError,
    Section,
    SourceDocument,
    build_corpus,
    chunk_document,
    document_body_text,
    ingest_corpus,
    load_manifest,
    load_passages,
    render_metadata_header,
    write_passages,
)
from helpers import build_toy_manifest, toy_document, write_manifest


def norm_ws(s: str) -> str:
    return " ".join(s.split())


def make_doc(body: list[Section], doc_id: str = "d1") -> SourceDocument:
    return SourceDocument(
        doc_id=doc_id, product_id="prodalpha", category="deposit",
        title="alpha guide", last_modified="2024-06-01", body=body)


def test_single_section_single_passage():
    doc = make_doc([Section(1, "Overview", "One. Two. Three.")])
    passages = chunk_document(doc, ChunkingConfig(max_chunk_length=1000))
    assert len(passages) == 1
    assert passages[0].chunk_index == 1
    assert passages[0].chunk_total == 1


def test_four_sections_four_passages():
    doc = make_doc([Section(1, f"Part {i}", f"Text of part {i}.") for i in range(1, 5)])
    passages = chunk_document(doc, ChunkingConfig(max_chunk_length=1000))
    assert [p.chunk_index for p in passages] == [1, 2, 3, 4]
    assert all(p.chunk_total == 4 for p in passages)


def test_toy_corpus_counts(tmp_path: Path):
    manifest = build_toy_manifest(tmp_path)
    stats = ingest_corpus(manifest, output_path=tmp_path / "passages.jsonl")
    assert stats.n_documents == 6
    assert stats.n_products == 3
    assert stats.n_categories == 2
    assert stats.n_passages == 24
    assert stats.passages_per_document.min == 4
    assert stats.passages_per_document.max == 4


def test_oversized_leaf_splits_at_sentence_boundaries():
    sentences = [f"Sentence number {i} fills some room in the section body." for i in range(12)]
    doc = make_doc([Section(1, "Long part", " ".join(sentences))])
    config = ChunkingConfig(max_chunk_length=120)
    passages = chunk_document(doc, config)
    assert len(passages) > 1
    for p in passages:
        assert len(p.text) <= 120
    # no mid-sentence cut: every chunk ends where a sentence ends
    for p in passages:
        assert p.text.rstrip().endswith(".")
    assert norm_ws("".join(" " + p.text for p in passages)) == norm_ws(document_body_text(doc))


def test_split_descends_into_subsections():
    body = [
        Section(1, "Chapter", "Chapter intro."),
        Section(2, "Sub A", "Alpha detail. " * 6),
        Section(2, "Sub B", "Beta detail. " * 6),
    ]
    doc = make_doc(body)
    passages = chunk_document(doc, ChunkingConfig(max_chunk_length=120))
    texts = [p.text for p in passages]
    assert any(t.startswith("Chapter") for t in texts)
    assert any(t.startswith("Sub A") for t in texts)
    assert any(t.startswith("Sub B") for t in texts)
    assert all(len(t) <= 120 for t in texts)


def test_small_subtree_stays_whole():
    body = [
        Section(1, "Chapter", "Intro."),
        Section(2, "Sub A", "Alpha."),
        Section(2, "Sub B", "Beta."),
    ]
    passages = chunk_document(make_doc(body), ChunkingConfig(max_chunk_length=1000))
    assert len(passages) == 1
    assert "Sub B" in passages[0].text


def test_merge_siblings_packs_small_sections():
    body = [Section(1, f"Part {i}", "Tiny.") for i in range(1, 5)]
    merged = chunk_document(make_doc(body), ChunkingConfig(max_chunk_length=1000, merge_siblings=True))
    assert len(merged) == 1
    plain = chunk_document(make_doc(body), ChunkingConfig(max_chunk_length=1000))
    assert len(plain) == 4


def test_reconstruction_up_to_whitespace(tmp_path: Path):
    for config in (ChunkingConfig(max_chunk_length=1000), ChunkingConfig(max_chunk_length=90)):
        doc = SourceDocument(**{**toy_document("prodalpha", 1).copy(),
                                "body": [Section(**s) for s in toy_document("prodalpha", 1)["body"]]})
        passages = chunk_document(doc, config)
        assert norm_ws(" ".join(p.text for p in passages)) == norm_ws(document_body_text(doc))


def test_reingest_is_byte_identical(tmp_path: Path):
    manifest = build_toy_manifest(tmp_path / "corpus")
    out1, out2 = tmp_path / "p1.jsonl", tmp_path / "p2.jsonl"
    ingest_corpus(manifest, output_path=out1)
    ingest_corpus(manifest, output_path=out2)
    assert out1.read_bytes() == out2.read_bytes()


def test_missing_document_file_names_path(tmp_path: Path):
    manifest = tmp_path / "manifest.jsonl"
    manifest.write_text(json.dumps({"doc_id": "d1", "path": "nowhere.json"}) + "\n")
    with pytest.raises(IngestError, match="nowhere.json"):
        load_manifest(manifest)


def test_missing_manifest_names_path(tmp_path: Path):
    with pytest.raises(IngestError, match="absent.jsonl"):
        load_manifest(tmp_path / "absent.jsonl")


def test_empty_body_rejected_with_doc_id(tmp_path: Path):
    doc = toy_document("prodalpha", 1)
    doc["body"] = []
    manifest = write_manifest(tmp_path, [doc])
    with pytest.raises(IngestError, match="prodalpha-doc1"):
        load_manifest(manifest)


def test_duplicate_doc_id_rejected(tmp_path: Path):
    doc = toy_document("prodalpha", 1)
    root = tmp_path
    root.mkdir(exist_ok=True)
    doc_path = root / "doc.json"
    doc_path.write_text(json.dumps(doc))
    manifest = root / "manifest.jsonl"
    manifest.write_text(
        json.dumps({"doc_id": "prodalpha-doc1", "path": "doc.json"}) + "\n"
        + json.dumps({"doc_id": "prodalpha-doc1", "path": "doc.json"}) + "\n")
    with pytest.raises(IngestError, match="duplicate doc_id"):
        load_manifest(manifest)


def test_bad_date_rejected(tmp_path: Path):
    doc = toy_document("prodalpha", 1)
    doc["last_modified"] = "June 2024"
    manifest = write_manifest(tmp_path, [doc])
    with pytest.raises(IngestError, match="ISO-8601"):
        load_manifest(manifest)


def test_groupings(tmp_path: Path):
    manifest = build_toy_manifest(tmp_path)
    corpus = build_corpus(load_manifest(manifest))
    by_product = corpus.passages_by_product("prodalpha")
    assert len(by_product) == 8
    assert [(p.doc_id, p.chunk_index) for p in by_product] == sorted(
        (p.doc_id, p.chunk_index) for p in by_product)
    assert corpus.passages_by_product("nosuch") == []
    assert corpus.passages_by_category("nosuch") == []
    by_doc = corpus.passages_by_document("prodbeta-doc2")
    assert [p.chunk_index for p in by_doc] == [1, 2, 3, 4]
    assert len(corpus.passages_by_category("deposit")) == 16
    assert len(corpus.passages_by_category("loan")) == 8


def test_parent_metadata_propagates(tmp_path: Path):
    manifest = build_toy_manifest(tmp_path)
    docs = {d.doc_id: d for d in load_manifest(manifest)}
    corpus = build_corpus(list(docs.values()))
    for p in corpus.passages:
        assert p.product_id == docs[p.doc_id].product_id
        assert p.category == docs[p.doc_id].category
        assert 1 <= p.chunk_index <= p.chunk_total
        assert p.text.strip()


def test_metadata_header_layout():
    header = render_metadata_header("prodalpha", "alpha guide 1", "2024-06-01", 2, 4)
    assert header == (
        "Product Name: prodalpha\n"
        "Document Name: alpha guide 1\n"
        "Last Updated: 2024-06-01\n"
        "Chunk: 2/4"
    )


def test_header_excluded_from_length_budget():
    long_title = "t" * 400
    doc = SourceDocument(
        doc_id="d1", product_id="p", category="c", title=long_title,
        last_modified="2024-01-01",
        body=[Section(1, "H", "Short body text here.")])
    passages = chunk_document(doc, ChunkingConfig(max_chunk_length=50))
    assert len(passages) == 1
    assert len(passages[0].text) <= 50
    assert long_title in passages[0].metadata_header


def test_passages_roundtrip(tmp_path: Path):
    manifest = build_toy_manifest(tmp_path)
    corpus = build_corpus(load_manifest(manifest))
    path = tmp_path / "passages.jsonl"
    write_passages(corpus.passages, path)
    reloaded = load_passages(path)
    assert reloaded.passages == corpus.passages
