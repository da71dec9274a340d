"""Query generation: single-document queries plus three multi-document
strategies (topic merging, context deepening, comparing), driven by prompt
templates and a seeded sampler. Optional LLM vetting of sampled candidates.
"""

from __future__ import annotations

import hashlib
import logging
import re
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .corpus import Corpus, Passage
from .providers import ChatRequest, ProviderError

logger = logging.getLogger(__name__)

QUERY_TYPES = ("single", "merged", "deepened", "comparing")
STATUSES = ("generated", "scored", "accepted", "rejected_auto", "rejected_human")

TEMPLATE_FILES = {
    "T_single": "t_single.txt",
    "T_merge": "t_merge.txt",
    "T_deep": "t_deep.txt",
    "T_comp": "t_comp.txt",
    "V_merge": "v_merge.txt",
    "V_deep": "v_deep.txt",
    "V_comp": "v_comp.txt",
}


class TemplateError(Exception):
    """A template file or a render call is inconsistent."""


class GenerationError(Exception):
    """A provider call for one record failed or returned unusable output."""


class InsufficientPool(Exception):
    """A sampling pool is too small for the requested draw; skip the group."""


_SLOT = re.compile(r"\{\{(\w+)\}\}")


@dataclass(frozen=True)
class PromptTemplate:
    template_id: str
    text: str
    version: str

    @classmethod
    def from_text(cls, template_id: str, text: str) -> "PromptTemplate":
        if template_id not in TEMPLATE_FILES:
            raise TemplateError(f"unknown template_id {template_id!r}")
        version = hashlib.sha256(text.encode("utf-8")).hexdigest()[:12]
        return cls(template_id=template_id, text=text, version=version)

    def render(self, **slots: str) -> str:
        rendered = self.text
        for name, value in slots.items():
            placeholder = "{{" + name + "}}"
            if placeholder not in rendered:
                raise TemplateError(
                    f"template {self.template_id} has no slot {placeholder}")
            rendered = rendered.replace(placeholder, str(value))
        leftover = _SLOT.findall(rendered)
        if leftover:
            raise TemplateError(
                f"template {self.template_id} rendered with unfilled slots: {sorted(set(leftover))}")
        return rendered


class TemplateLibrary:
    def __init__(self, templates: Mapping[str, PromptTemplate]):
        missing = set(TEMPLATE_FILES) - set(templates)
        if missing:
            raise TemplateError(f"missing templates: {sorted(missing)}")
        self._templates = dict(templates)

    def get(self, template_id: str) -> PromptTemplate:
        try:
            return self._templates[template_id]
        except KeyError:
            raise TemplateError(f"unknown template_id {template_id!r}") from None

    @classmethod
    def load(cls, directory: Path | str | None = None) -> "TemplateLibrary":
        templates = {}
        for template_id, filename in TEMPLATE_FILES.items():
            if directory is None:
                source = resources.files("querybench").joinpath("templates", filename)
                if not source.is_file():
                    raise TemplateError(f"packaged template missing: {filename}")
                text = source.read_text(encoding="utf-8")
            else:
                path = Path(directory) / filename
                if not path.exists():
                    raise TemplateError(f"template file missing: {path}")
                text = path.read_text(encoding="utf-8")
            templates[template_id] = PromptTemplate.from_text(template_id, text)
        return cls(templates)


@dataclass
class QueryRecord:
    query_id: str
    text: str
    query_type: str
    source_passage_ids: list[str]
    held_product: str
    product_id: str | None = None
    category: str | None = None
    provenance: dict = field(default_factory=dict)
    status: str = "generated"

    def __post_init__(self):
        if self.query_type not in QUERY_TYPES:
            raise ValueError(f"bad query_type {self.query_type!r}")
        if self.status not in STATUSES:
            raise ValueError(f"bad status {self.status!r}")
        if not self.text.strip():
            raise ValueError(f"query {self.query_id} has empty text")
        n = len(self.source_passage_ids)
        if self.query_type == "single":
            if n != 1:
                raise ValueError(f"single query {self.query_id} must have exactly 1 source, got {n}")
        elif not 2 <= n <= 4:
            raise ValueError(f"{self.query_type} query {self.query_id} must have 2-4 sources, got {n}")
        if len(set(self.source_passage_ids)) != n:
            raise ValueError(f"query {self.query_id} has duplicate source passages")

    @property
    def is_multi(self) -> bool:
        return self.query_type != "single"

    def to_dict(self) -> dict:
        return {
            "query_id": self.query_id,
            "text": self.text,
            "query_type": self.query_type,
            "source_passage_ids": list(self.source_passage_ids),
            "held_product": self.held_product,
            "product_id": self.product_id,
            "category": self.category,
            "provenance": dict(self.provenance),
            "status": self.status,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "QueryRecord":
        return cls(**{k: d[k] for k in (
            "query_id", "text", "query_type", "source_passage_ids", "held_product",
            "product_id", "category", "provenance", "status")})


@dataclass
class SamplerState:
    """Seeded sampling streams: one independent stream per (seed, key, draw)."""

    seed: int
    draws: int = 0

    def rng(self, group_key: str) -> np.random.Generator:
        material = f"{self.seed}:{group_key}:{self.draws}".encode("utf-8")
        digest = hashlib.sha256(material).digest()[:8]
        self.draws += 1
        return np.random.default_rng(int.from_bytes(digest, "big"))


def choose_k(rng: np.random.Generator, distribution: Mapping[int, float],
             lo: int, hi: int, pool_size: int) -> int:
    """Draw a group size from `distribution` restricted to [lo, min(hi, pool_size)]."""
    upper = min(hi, pool_size)
    ks = sorted(k for k, p in distribution.items() if lo <= k <= upper and p > 0)
    if not ks:
        raise InsufficientPool(
            f"no feasible group size in [{lo},{upper}] for pool of {pool_size}")
    probs = np.array([distribution[k] for k in ks], dtype=float)
    probs /= probs.sum()
    return int(rng.choice(ks, p=probs))


def render_passage_block(passage: Passage) -> str:
    return f"{passage.metadata_header}\n{passage.text}"


def numbered(items: Sequence[str]) -> str:
    return "\n".join(f"[{i}] {item}" for i, item in enumerate(items, start=1))


def _id_digest(ids: Sequence[str]) -> str:
    material = ",".join(sorted(ids)).encode("utf-8")
    return hashlib.blake2b(material, digest_size=6).hexdigest()


def _accepted_singles(queries: Sequence[QueryRecord]) -> list[QueryRecord]:
    pool = [q for q in queries if q.query_type == "single" and q.status == "accepted"]
    return sorted(pool, key=lambda q: q.query_id)


def sample_for_merge(singles: Sequence[QueryRecord], product_id: str, k: int,
                     sampler: SamplerState) -> list[QueryRecord]:
    if not 2 <= k <= 3:
        raise ValueError(f"merge group size must be 2-3, got {k}")
    pool = [q for q in _accepted_singles(singles) if q.product_id == product_id]
    if len(pool) < k:
        raise InsufficientPool(
            f"product {product_id!r}: {len(pool)} accepted single queries < k={k}")
    rng = sampler.rng(f"merge:{product_id}")
    idx = sorted(rng.choice(len(pool), size=k, replace=False).tolist())
    return [pool[i] for i in idx]


def sample_for_deepen(singles: Sequence[QueryRecord], corpus: Corpus, doc_id: str,
                      k: int, sampler: SamplerState) -> list[tuple[QueryRecord, Passage]]:
    if not 2 <= k <= 4:
        raise ValueError(f"deepen group size must be 2-4, got {k}")
    pool = [q for q in _accepted_singles(singles)
            if corpus.get(q.source_passage_ids[0]).doc_id == doc_id]
    if len(pool) < k:
        raise InsufficientPool(
            f"document {doc_id!r}: {len(pool)} accepted single queries < k={k}")
    rng = sampler.rng(f"deepen:{doc_id}")
    idx = sorted(rng.choice(len(pool), size=k, replace=False).tolist())
    return [(pool[i], corpus.get(pool[i].source_passage_ids[0])) for i in idx]


def sample_for_compare(corpus: Corpus, category: str, k: int,
                       sampler: SamplerState) -> list[Passage]:
    if not 2 <= k <= 4:
        raise ValueError(f"compare group size must be 2-4, got {k}")
    by_product: dict[str, list[Passage]] = {}
    for p in corpus.passages_by_category(category):
        by_product.setdefault(p.product_id, []).append(p)
    products = sorted(by_product)
    if len(products) < k:
        raise InsufficientPool(
            f"category {category!r}: {len(products)} products < k={k}")
    rng = sampler.rng(f"compare:{category}")
    chosen = sorted(rng.choice(len(products), size=k, replace=False).tolist())
    picks = []
    for i in chosen:
        pool = sorted(by_product[products[i]], key=lambda p: p.passage_id)
        picks.append(pool[int(rng.integers(len(pool)))])
    return picks


@dataclass
class Generator:
    """Wraps a chat client with the prompt templates and record bookkeeping."""

    chat: object
    templates: TemplateLibrary
    model_id: str
    seed: int
    created_at: str
    temperature: float = 0.7

    def _provenance(self, template: PromptTemplate) -> dict:
        return {
            "model_id": self.model_id,
            "template_id": template.template_id,
            "template_version": template.version,
            "seed": self.seed,
            "created_at": self.created_at,
        }

    def _complete(self, prompt: str, what: str) -> str:
        request = ChatRequest.single_user(
            self.model_id, prompt, temperature=self.temperature, seed=self.seed)
        try:
            text = self.chat.chat_complete(request)
        except ProviderError as exc:
            raise GenerationError(f"provider failure while generating {what}: {exc}") from exc
        text = text.strip()
        if not text:
            raise GenerationError(f"empty completion while generating {what}")
        return text

    def generate_single(self, passage: Passage, profile: str) -> QueryRecord:
        template = self.templates.get("T_single")
        prompt = template.render(profile=profile, product=passage.product_id,
                                 passage=render_passage_block(passage))
        text = self._complete(prompt, f"single query for passage {passage.passage_id}")
        return QueryRecord(
            query_id=f"qs-{passage.passage_id}",
            text=text,
            query_type="single",
            source_passage_ids=[passage.passage_id],
            held_product=passage.product_id,
            product_id=passage.product_id,
            category=passage.category,
            provenance=self._provenance(template),
        )

    def generate_merged(self, queries: Sequence[QueryRecord]) -> QueryRecord:
        if not 2 <= len(queries) <= 3:
            raise ValueError(f"merged queries take 2-3 inputs, got {len(queries)}")
        products = {q.product_id for q in queries}
        if len(products) != 1 or None in products:
            raise ValueError("merged inputs must share one product")
        if any(q.query_type != "single" or q.status != "accepted" for q in queries):
            raise ValueError("merged inputs must be accepted single queries")
        product = queries[0].product_id
        sources: list[str] = []
        for q in queries:
            for pid in q.source_passage_ids:
                if pid not in sources:
                    sources.append(pid)
        template = self.templates.get("T_merge")
        prompt = template.render(product=product,
                                 queries=numbered([q.text for q in queries]))
        text = self._complete(prompt, f"merged query for product {product}")
        return QueryRecord(
            query_id=f"qm-{_id_digest(sources)}",
            text=text,
            query_type="merged",
            source_passage_ids=sources,
            held_product=product,
            product_id=product,
            category=queries[0].category,
            provenance=self._provenance(template),
        )

    def generate_deepened(self, pairs: Sequence[tuple[QueryRecord, Passage]]) -> QueryRecord:
        if not 2 <= len(pairs) <= 4:
            raise ValueError(f"deepened queries take 2-4 pairs, got {len(pairs)}")
        docs = {p.doc_id for _, p in pairs}
        if len(docs) != 1:
            raise ValueError("deepened inputs must share one document")
        for q, p in pairs:
            if q.source_passage_ids != [p.passage_id]:
                raise ValueError(
                    f"pair mismatch: query {q.query_id} does not source passage {p.passage_id}")
        product = pairs[0][1].product_id
        sources = [p.passage_id for _, p in pairs]
        template = self.templates.get("T_deep")
        items = [f"Q: {q.text}\n{render_passage_block(p)}" for q, p in pairs]
        prompt = template.render(product=product, pairs=numbered(items))
        text = self._complete(prompt, f"deepened query for document {docs.pop()}")
        return QueryRecord(
            query_id=f"qd-{_id_digest(sources)}",
            text=text,
            query_type="deepened",
            source_passage_ids=sources,
            held_product=product,
            product_id=product,
            category=pairs[0][1].category,
            provenance=self._provenance(template),
        )

    def generate_comparing(self, passages: Sequence[Passage]) -> QueryRecord:
        if not 2 <= len(passages) <= 4:
            raise ValueError(f"comparing queries take 2-4 passages, got {len(passages)}")
        products = [p.product_id for p in passages]
        if len(set(products)) != len(products):
            raise ValueError("comparing inputs must come from distinct products")
        categories = {p.category for p in passages}
        if len(categories) != 1:
            raise ValueError("comparing inputs must share one category")
        sources = [p.passage_id for p in passages]
        template = self.templates.get("T_comp")
        prompt = template.render(passage=numbered([render_passage_block(p) for p in passages]))
        text = self._complete(prompt, f"comparing query for category {passages[0].category}")
        return QueryRecord(
            query_id=f"qc-{_id_digest(sources)}",
            text=text,
            query_type="comparing",
            source_passage_ids=sources,
            # the persona holds the first sampled product and compares against the rest
            held_product=passages[0].product_id,
            product_id=None,
            category=passages[0].category,
            provenance=self._provenance(template),
        )

    def vet_candidates(self, template_id: str, candidates: Sequence[tuple[str, str]],
                       product: str = "") -> list[str]:
        """Ask the vetting prompt to keep/drop candidates; returns accepted ids."""
        slot_by_template = {"V_merge": "queries", "V_deep": "pairs", "V_comp": "passage"}
        if template_id not in slot_by_template:
            raise TemplateError(f"{template_id!r} is not a vetting template")
        template = self.templates.get(template_id)
        block = "\n".join(f"({cid}) {text.replace(chr(10), ' / ')}"
                          for cid, text in candidates)
        slots = {slot_by_template[template_id]: block}
        if "{{product}}" in template.text:
            slots["product"] = product
        prompt = template.render(**slots)
        completion = self._complete(prompt, f"vetting verdicts ({template_id})")
        verdicts: dict[str, str] = {}
        for line in completion.splitlines():
            match = re.match(r"\s*\(?([\w./-]+)\)?\s*:\s*(ACCEPT|REJECT)\b", line)
            if match:
                verdicts[match.group(1)] = match.group(2)
        accepted = []
        for cid, _ in candidates:
            verdict = verdicts.get(cid)
            if verdict is None:
                logger.warning("vetting verdict missing for candidate %s; rejecting", cid)
            elif verdict == "ACCEPT":
                accepted.append(cid)
        return accepted
