"""Corpus ingestion: chunk source documents along their section hierarchy.

A corpus is described by a JSONL manifest; each line points at a per-document
JSON file carrying metadata and a flat list of sections ``{level, heading,
text}``. Documents are split into passages that respect the section tree:
a section subtree that fits ``max_chunk_length`` becomes one passage, bigger
subtrees are split one level down, and oversized leaf sections are split at
sentence boundaries with greedy fill.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass, field
from datetime import date
from pathlib import Path


class IngestError(Exception):
    """A corpus manifest or document file cannot be ingested."""


@dataclass(frozen=True)
class Section:
    level: int
    heading: str
    text: str


@dataclass
class SourceDocument:
    doc_id: str
    product_id: str
    category: str
    title: str
    last_modified: str  # ISO-8601 date
    body: list[Section]

    def validate(self) -> None:
        if not self.body:
            raise IngestError(f"document {self.doc_id!r} has an empty body")
        try:
            date.fromisoformat(self.last_modified)
        except ValueError as exc:
            raise IngestError(
                f"document {self.doc_id!r}: last_modified {self.last_modified!r} "
                "is not an ISO-8601 date"
            ) from exc


@dataclass(frozen=True)
class Passage:
    passage_id: str
    doc_id: str
    product_id: str
    category: str
    chunk_index: int  # 1-based
    chunk_total: int
    text: str
    metadata_header: str

    def to_dict(self) -> dict:
        return {
            "passage_id": self.passage_id,
            "doc_id": self.doc_id,
            "product_id": self.product_id,
            "category": self.category,
            "chunk_index": self.chunk_index,
            "chunk_total": self.chunk_total,
            "text": self.text,
            "metadata_header": self.metadata_header,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Passage":
        return cls(**{k: d[k] for k in (
            "passage_id", "doc_id", "product_id", "category",
            "chunk_index", "chunk_total", "text", "metadata_header",
        )})


@dataclass
class DistributionSummary:
    min: int
    max: int
    mean: float


@dataclass
class CorpusStats:
    n_documents: int
    n_products: int
    n_categories: int
    n_passages: int
    passages_per_document: DistributionSummary

    def to_dict(self) -> dict:
        return {
            "n_documents": self.n_documents,
            "n_products": self.n_products,
            "n_categories": self.n_categories,
            "n_passages": self.n_passages,
            "passages_per_document": {
                "min": self.passages_per_document.min,
                "max": self.passages_per_document.max,
                "mean": self.passages_per_document.mean,
            },
        }


@dataclass
class ChunkingConfig:
    max_chunk_length: int = 1000
    # Pack consecutive same-level siblings into one chunk while they fit.
    merge_siblings: bool = False


def render_metadata_header(product_id: str, title: str, last_modified: str,
                           chunk_index: int, chunk_total: int) -> str:
    return (
        f"Product Name: {product_id}\n"
        f"Document Name: {title}\n"
        f"Last Updated: {last_modified}\n"
        f"Chunk: {chunk_index}/{chunk_total}"
    )


_SENTENCE_END = re.compile(r"(?<=[.!?。])\s+")


def split_sentences(text: str) -> list[str]:
    parts = [p for p in _SENTENCE_END.split(text) if p.strip()]
    return parts or ([text] if text.strip() else [])


def _pack_sentences(text: str, max_len: int) -> list[str]:
    """Greedy-fill sentences into chunks of at most max_len characters.

    A single sentence longer than max_len is split at whitespace; only a
    single word longer than max_len is ever cut mid-word.
    """
    pieces: list[str] = []
    for sentence in split_sentences(text):
        if len(sentence) <= max_len:
            pieces.append(sentence)
            continue
        words = sentence.split()
        cur = ""
        for word in words:
            while len(word) > max_len:
                if cur:
                    pieces.append(cur)
                    cur = ""
                pieces.append(word[:max_len])
                word = word[max_len:]
            cand = f"{cur} {word}".strip()
            if len(cand) <= max_len:
                cur = cand
            else:
                pieces.append(cur)
                cur = word
        if cur:
            pieces.append(cur)

    chunks: list[str] = []
    cur = ""
    for piece in pieces:
        cand = f"{cur} {piece}".strip() if cur else piece
        if len(cand) <= max_len or not cur:
            cur = cand
        else:
            chunks.append(cur)
            cur = piece
    if cur:
        chunks.append(cur)
    return chunks


@dataclass
class _Node:
    section: Section
    children: list["_Node"] = field(default_factory=list)


def _build_tree(sections: list[Section]) -> list[_Node]:
    roots: list[_Node] = []
    stack: list[_Node] = []
    for section in sections:
        node = _Node(section)
        while stack and stack[-1].section.level >= section.level:
            stack.pop()
        if stack:
            stack[-1].children.append(node)
        else:
            roots.append(node)
        stack.append(node)
    return roots


def _render_own(node: _Node) -> str:
    parts = [p for p in (node.section.heading.strip(), node.section.text.strip()) if p]
    return "\n".join(parts)


def _render_subtree(node: _Node) -> str:
    parts = [_render_own(node)]
    parts.extend(_render_subtree(child) for child in node.children)
    return "\n".join(p for p in parts if p)


def _emit_chunks(nodes: list[_Node], config: ChunkingConfig, out: list[str]) -> None:
    max_len = config.max_chunk_length
    pending: list[str] = []  # sibling texts being merged

    def flush() -> None:
        if pending:
            out.append("\n".join(pending))
            pending.clear()

    for node in nodes:
        rendered = _render_subtree(node)
        if len(rendered) <= max_len:
            if config.merge_siblings:
                joined_len = len("\n".join(pending + [rendered]))
                if pending and joined_len > max_len:
                    flush()
                pending.append(rendered)
            else:
                out.append(rendered)
            continue
        flush()
        own = _render_own(node)
        if node.children:
            if own:
                if len(own) <= max_len:
                    out.append(own)
                else:
                    out.extend(_pack_sentences(own, max_len))
            _emit_chunks(node.children, config, out)
        else:
            out.extend(_pack_sentences(own, max_len))
    flush()


def chunk_document(doc: SourceDocument, config: ChunkingConfig) -> list[Passage]:
    """Split one document into passages; chunk texts exclude the metadata header."""
    doc.validate()
    texts: list[str] = []
    _emit_chunks(_build_tree(doc.body), config, texts)
    texts = [t for t in texts if t.strip()]
    if not texts:
        raise IngestError(f"document {doc.doc_id!r} produced no passages")
    total = len(texts)
    passages = []
    for i, text in enumerate(texts, start=1):
        passages.append(Passage(
            passage_id=f"{doc.doc_id}-{i:03d}",
            doc_id=doc.doc_id,
            product_id=doc.product_id,
            category=doc.category,
            chunk_index=i,
            chunk_total=total,
            text=text,
            metadata_header=render_metadata_header(
                doc.product_id, doc.title, doc.last_modified, i, total),
        ))
    return passages


def document_body_text(doc: SourceDocument) -> str:
    """Headings and texts in document order; the reconstruction reference."""
    parts = []
    for section in doc.body:
        if section.heading.strip():
            parts.append(section.heading.strip())
        if section.text.strip():
            parts.append(section.text.strip())
    return "\n".join(parts)


def load_manifest(manifest_path: Path | str) -> list[SourceDocument]:
    manifest_path = Path(manifest_path)
    if not manifest_path.exists():
        raise IngestError(f"manifest not found: {manifest_path}")
    docs: list[SourceDocument] = []
    seen: set[str] = set()
    base = manifest_path.parent
    with open(manifest_path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            entry = json.loads(line)
            doc_path = base / entry["path"]
            if not doc_path.exists():
                raise IngestError(f"document file not found: {doc_path}")
            raw = json.loads(doc_path.read_text(encoding="utf-8"))
            doc = SourceDocument(
                doc_id=raw["doc_id"],
                product_id=raw["product_id"],
                category=raw["category"],
                title=raw["title"],
                last_modified=raw["last_modified"],
                body=[Section(int(s["level"]), s.get("heading", ""), s.get("text", ""))
                      for s in raw["body"]],
            )
            if doc.doc_id in seen:
                raise IngestError(f"duplicate doc_id {doc.doc_id!r} (manifest line {lineno})")
            seen.add(doc.doc_id)
            doc.validate()
            docs.append(doc)
    if not docs:
        raise IngestError(f"manifest {manifest_path} lists no documents")
    return docs


class Corpus:
    """Immutable passage collection with grouped access.

    All grouped views are stable-ordered by (doc_id, chunk_index); unknown
    keys yield empty lists.
    """

    def __init__(self, passages: list[Passage]):
        self.passages = sorted(passages, key=lambda p: (p.doc_id, p.chunk_index))
        ids = [p.passage_id for p in self.passages]
        if len(set(ids)) != len(ids):
            raise IngestError("duplicate passage_id in corpus")
        self._by_id = {p.passage_id: p for p in self.passages}
        self._by_product: dict[str, list[Passage]] = {}
        self._by_document: dict[str, list[Passage]] = {}
        self._by_category: dict[str, list[Passage]] = {}
        for p in self.passages:
            self._by_product.setdefault(p.product_id, []).append(p)
            self._by_document.setdefault(p.doc_id, []).append(p)
            self._by_category.setdefault(p.category, []).append(p)

    def __len__(self) -> int:
        return len(self.passages)

    def get(self, passage_id: str) -> Passage:
        return self._by_id[passage_id]

    def passages_by_product(self, product_id: str) -> list[Passage]:
        return list(self._by_product.get(product_id, []))

    def passages_by_document(self, doc_id: str) -> list[Passage]:
        return list(self._by_document.get(doc_id, []))

    def passages_by_category(self, category: str) -> list[Passage]:
        return list(self._by_category.get(category, []))

    @property
    def product_ids(self) -> list[str]:
        return sorted(self._by_product)

    @property
    def doc_ids(self) -> list[str]:
        return sorted(self._by_document)

    @property
    def categories(self) -> list[str]:
        return sorted(self._by_category)

    def stats(self) -> CorpusStats:
        per_doc = [len(v) for _, v in sorted(self._by_document.items())]
        return CorpusStats(
            n_documents=len(self._by_document),
            n_products=len(self._by_product),
            n_categories=len(self._by_category),
            n_passages=len(self.passages),
            passages_per_document=DistributionSummary(
                min=min(per_doc), max=max(per_doc),
                mean=sum(per_doc) / len(per_doc)),
        )


def build_corpus(docs: list[SourceDocument], config: ChunkingConfig | None = None) -> Corpus:
    config = config or ChunkingConfig()
    passages: list[Passage] = []
    for doc in sorted(docs, key=lambda d: d.doc_id):
        passages.extend(chunk_document(doc, config))
    return Corpus(passages)


def write_passages(passages: list[Passage], path: Path | str) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        for p in passages:
            fh.write(json.dumps(p.to_dict(), ensure_ascii=False, sort_keys=True) + "\n")


def load_passages(path: Path | str) -> Corpus:
    path = Path(path)
    if not path.exists():
        raise IngestError(f"passages file not found: {path}")
    passages = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if line:
                passages.append(Passage.from_dict(json.loads(line)))
    return Corpus(passages)


def ingest_corpus(manifest_path: Path | str, config: ChunkingConfig | None = None,
                  output_path: Path | str | None = None) -> CorpusStats:
    """Chunk every manifest document and persist the passage set."""
    corpus = build_corpus(load_manifest(manifest_path), config)
    if output_path is not None:
        write_passages(corpus.passages, output_path)
    return corpus.stats()
