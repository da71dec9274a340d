"""Answerability evaluation: reasoning-augmented scoring on a 1-5 scale,
threshold filtering, the multi-document dependency condition (a combined
context must beat every single-passage context strictly), stratified
calibration sampling, and correlation against human ratings.
"""

from __future__ import annotations

import logging
import math
import re
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np

from .corpus import Passage
from .providers import ChatRequest, ProviderError
from .querygen import QueryRecord

logger = logging.getLogger(__name__)


class ScoringError(Exception):
    """A query could not be scored; treat as not accepted (fail closed)."""


@dataclass
class AnswerabilityScore:
    query_id: str
    context_passage_ids: list[str]
    score: float
    samples: list[dict]  # {"raw_text": str, "parsed_score": float | None}
    n_samples: int
    model_id: str

    def __post_init__(self):
        if self.n_samples != len(self.samples):
            raise ValueError("n_samples must equal the number of samples")
        parsed = [s["parsed_score"] for s in self.samples if s["parsed_score"] is not None]
        if not parsed:
            raise ValueError(f"score for {self.query_id} has no parsed samples")
        if any(not 1.0 <= p <= 5.0 for p in parsed):
            raise ValueError("parsed sample scores must lie in [1,5]")
        mean = sum(parsed) / len(parsed)
        if abs(mean - self.score) > 1e-9:
            raise ValueError(
                f"score {self.score} is not the mean of parsed samples ({mean})")
        if not self.context_passage_ids:
            raise ValueError("context_passage_ids must be non-empty")

    def to_dict(self) -> dict:
        return {
            "query_id": self.query_id,
            "context_passage_ids": list(self.context_passage_ids),
            "score": self.score,
            "samples": [dict(s) for s in self.samples],
            "n_samples": self.n_samples,
            "model_id": self.model_id,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "AnswerabilityScore":
        return cls(**{k: d[k] for k in (
            "query_id", "context_passage_ids", "score", "samples", "n_samples", "model_id")})


@dataclass
class DependencyVerdict:
    query_id: str
    combined_score: float
    individual_scores: list[tuple[str, float]]
    passes: bool

    def __post_init__(self):
        expected = self.combined_score > max(s for _, s in self.individual_scores)
        if self.passes != expected:
            raise ValueError("passes flag contradicts the strict-inequality rule")

    def to_dict(self) -> dict:
        return {
            "query_id": self.query_id,
            "combined_score": self.combined_score,
            "individual_scores": [[pid, s] for pid, s in self.individual_scores],
            "passes": self.passes,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "DependencyVerdict":
        return cls(query_id=d["query_id"], combined_score=d["combined_score"],
                   individual_scores=[(pid, s) for pid, s in d["individual_scores"]],
                   passes=d["passes"])


@dataclass
class HumanRating:
    query_id: str
    annotator_id: str
    answerability_1to3: int
    relevance: bool
    multihop_necessary: bool | None = None
    irrelevant_passage_ids: list[str] = field(default_factory=list)

    def __post_init__(self):
        if self.answerability_1to3 not in (1, 2, 3):
            raise ValueError("answerability rating must be 1, 2 or 3")
        if not self.annotator_id.strip():
            raise ValueError("annotator_id must be non-empty")

    def to_dict(self) -> dict:
        return {
            "query_id": self.query_id,
            "annotator_id": self.annotator_id,
            "answerability_1to3": self.answerability_1to3,
            "relevance": self.relevance,
            "multihop_necessary": self.multihop_necessary,
            "irrelevant_passage_ids": list(self.irrelevant_passage_ids),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "HumanRating":
        return cls(**{k: d[k] for k in (
            "query_id", "annotator_id", "answerability_1to3", "relevance",
            "multihop_necessary", "irrelevant_passage_ids")})


@dataclass(frozen=True)
class CorrelationResult:
    pearson_rho: float
    kendall_tau: float
    n: int


# -- score parsing and the evaluator -----------------------------------------

_THINK_CLOSE = "</think>"
_SCORE = re.compile(r"(?i)\bscore\s*[:=]\s*([-+]?\d+(?:\.\d+)?)")


def parse_score(raw: str) -> float:
    """Take the last "Score: x" after the final reasoning-close marker."""
    tail = raw.rsplit(_THINK_CLOSE, 1)[-1]
    matches = _SCORE.findall(tail)
    if not matches:
        raise ScoringError("completion contains no score verdict")
    value = float(matches[-1])
    if not 1.0 <= value <= 5.0:
        clamped = min(5.0, max(1.0, value))
        logger.warning("score %s outside [1,5]; clamping to %s", value, clamped)
        return clamped
    return value


EVAL_INSTRUCTIONS = """\
## task: score-answerability
You judge whether a customer question can be answered definitively using only
the context passages below. Reason through the evidence step by step inside
<think>...</think> tags, then end with one line of the form "Score: X" where
X is a number between 1 and 5."""

EVAL_CRITERIA = """\
Scoring criteria:
- 5: every fact the question needs is stated in the context; the answer is definitive.
- 4: the context answers the question with at most trivial gaps.
- 3: the context covers part of the question but a material piece is missing.
- 2: the context only touches the topic; the question is not answerable from it.
- 1: the context is unrelated to the question."""


def serialize_contexts(passages: Sequence[Passage]) -> str:
    ordered = sorted(passages, key=lambda p: (p.doc_id, p.chunk_index))
    return "\n\n".join(f"{p.metadata_header}\n{p.text}" for p in ordered)


def build_eval_prompt(query_text: str, passages: Sequence[Passage]) -> str:
    return (f"{EVAL_INSTRUCTIONS}\n\n{EVAL_CRITERIA}\n\n"
            f"### Contexts\n{serialize_contexts(passages)}\n\n"
            f"### Query\n{query_text}\n")


@dataclass
class Evaluator:
    chat: object
    model_id: str
    n_samples: int = 3
    temperature: float = 0.2

    def score_answerability(self, query: QueryRecord, passages: Sequence[Passage],
                            n_samples: int | None = None) -> AnswerabilityScore:
        if not passages:
            raise ValueError("passages must be non-empty")
        n = n_samples if n_samples is not None else self.n_samples
        if n < 1:
            raise ValueError("n_samples must be >= 1")
        prompt = build_eval_prompt(query.text, passages)
        samples = []
        for _ in range(n):
            try:
                raw = self.chat.chat_complete(ChatRequest.single_user(
                    self.model_id, prompt, temperature=self.temperature))
            except ProviderError as exc:
                raise ScoringError(
                    f"evaluator call failed for query {query.query_id}: {exc}") from exc
            try:
                parsed = parse_score(raw)
            except ScoringError:
                parsed = None
            samples.append({"raw_text": raw, "parsed_score": parsed})
        parsed_values = [s["parsed_score"] for s in samples if s["parsed_score"] is not None]
        if not parsed_values:
            raise ScoringError(
                f"no evaluator sample for query {query.query_id} produced a score")
        if len(parsed_values) * 2 < n:
            logger.warning("only %d of %d evaluator samples parsed for query %s",
                           len(parsed_values), n, query.query_id)
        ordered = sorted(passages, key=lambda p: (p.doc_id, p.chunk_index))
        return AnswerabilityScore(
            query_id=query.query_id,
            context_passage_ids=[p.passage_id for p in ordered],
            score=sum(parsed_values) / len(parsed_values),
            samples=samples,
            n_samples=n,
            model_id=self.model_id,
        )

    def check_multi_doc_dependency(self, query: QueryRecord,
                                   passages: Sequence[Passage]) -> DependencyVerdict:
        """Strict test that the union context beats every single passage."""
        if len(passages) < 2:
            raise ValueError("dependency check needs at least 2 passages")
        try:
            combined = self.score_answerability(query, passages)
            individuals = []
            for passage in sorted(passages, key=lambda p: (p.doc_id, p.chunk_index)):
                single = self.score_answerability(query, [passage])
                individuals.append((passage.passage_id, single.score))
        except ScoringError as exc:
            raise ScoringError(
                f"dependency check failed for query {query.query_id}: {exc}") from exc
        passes = combined.score > max(score for _, score in individuals)
        return DependencyVerdict(
            query_id=query.query_id,
            combined_score=combined.score,
            individual_scores=individuals,
            passes=passes,
        )


# -- filtering and calibration ------------------------------------------------


def filter_by_threshold(scores: Mapping[str, float], threshold: float = 4.0,
                        expected_query_ids: Iterable[str] | None = None
                        ) -> tuple[list[str], list[str]]:
    """Partition query ids into (accepted, rejected) by score >= threshold."""
    if expected_query_ids is not None:
        missing = sorted(set(expected_query_ids) - set(scores))
        if missing:
            raise ScoringError(f"queries missing scores: {missing}")
    accepted = sorted(qid for qid, s in scores.items() if s >= threshold)
    rejected = sorted(qid for qid, s in scores.items() if s < threshold)
    return accepted, rejected


@dataclass
class CalibrationBin:
    label: str
    lo: float | None
    hi: float | None
    available: int
    requested: int
    sampled_query_ids: list[str]

    @property
    def shortfall(self) -> int:
        return max(0, self.requested - len(self.sampled_query_ids))

    def to_dict(self) -> dict:
        return {
            "label": self.label, "lo": self.lo, "hi": self.hi,
            "available": self.available, "requested": self.requested,
            "shortfall": self.shortfall,
            "sampled_query_ids": list(self.sampled_query_ids),
        }


def stratified_sample(scores: Mapping[str, float], bin_edges: Sequence[float] = (2.0, 3.0, 4.0),
                      per_bin: int = 25, seed: int = 0) -> list[CalibrationBin]:
    """Sample up to per_bin queries from each score bin, without replacement.

    Bins are [-inf, e1), [e1, e2), ..., [e_last, +inf]; short bins are
    reported via `available`, not an error.
    """
    edges = sorted(bin_edges)
    if not edges:
        raise ValueError("bin_edges must be non-empty")
    bounds = [(None, edges[0])] + list(zip(edges, edges[1:])) + [(edges[-1], None)]
    rng = np.random.default_rng(seed)
    bins = []
    for lo, hi in bounds:
        members = sorted(
            qid for qid, s in scores.items()
            if (lo is None or s >= lo) and (hi is None or s < hi))
        take = min(per_bin, len(members))
        sampled = sorted(rng.choice(members, size=take, replace=False).tolist()) \
            if take else []
        if take < per_bin:
            logger.warning("calibration bin %s has only %d candidates (wanted %d)",
                           _bin_label(lo, hi), len(members), per_bin)
        bins.append(CalibrationBin(
            label=_bin_label(lo, hi), lo=lo, hi=hi, available=len(members),
            requested=per_bin, sampled_query_ids=sampled))
    return bins


def _bin_label(lo: float | None, hi: float | None) -> str:
    if lo is None:
        return f"<{hi:g}"
    if hi is None:
        return f">={lo:g}"
    return f"[{lo:g},{hi:g})"


# -- correlation meta-evaluation ----------------------------------------------


def _as_floats(series: Sequence[float], name: str) -> np.ndarray:
    arr = np.asarray(list(series), dtype=float)
    if arr.ndim != 1:
        raise ValueError(f"{name} must be one-dimensional")
    return arr


def pearson_corr(x: Sequence[float], y: Sequence[float]) -> float:
    xs, ys = _as_floats(x, "x"), _as_floats(y, "y")
    xd, yd = xs - xs.mean(), ys - ys.mean()
    denom = math.sqrt(float(xd @ xd) * float(yd @ yd))
    if denom == 0.0:
        raise ScoringError("pearson correlation undefined for a constant series")
    return float(xd @ yd) / denom


def kendall_tau_b(x: Sequence[float], y: Sequence[float]) -> float:
    """Tie-corrected Kendall tau via pairwise counting; O(n^2)."""
    xs, ys = _as_floats(x, "x"), _as_floats(y, "y")
    n = len(xs)
    concordant = discordant = ties_x = ties_y = 0
    for i in range(n):
        for j in range(i + 1, n):
            dx = xs[i] - xs[j]
            dy = ys[i] - ys[j]
            if dx == 0 and dy == 0:
                continue
            if dx == 0:
                ties_x += 1
            elif dy == 0:
                ties_y += 1
            elif (dx > 0) == (dy > 0):
                concordant += 1
            else:
                discordant += 1
    n0 = n * (n - 1) // 2
    pairs_x = concordant + discordant + ties_y  # pairs distinct in x
    pairs_y = concordant + discordant + ties_x  # pairs distinct in y
    if pairs_x == 0 or pairs_y == 0:
        raise ScoringError("kendall tau undefined for a constant series")
    return (concordant - discordant) / math.sqrt(pairs_x * pairs_y)


def correlate(auto_scores: Sequence[float], human_scores: Sequence[float]) -> CorrelationResult:
    xs, ys = _as_floats(auto_scores, "auto"), _as_floats(human_scores, "human")
    if len(xs) != len(ys):
        raise ValueError(f"series lengths differ: {len(xs)} vs {len(ys)}")
    if len(xs) < 2:
        raise ValueError("correlation needs at least 2 paired observations")
    return CorrelationResult(
        pearson_rho=pearson_corr(xs, ys),
        kendall_tau=kendall_tau_b(xs, ys),
        n=len(xs),
    )


@dataclass(frozen=True)
class FalsePositiveReport:
    rate: float
    numerator: int
    denominator: int
    offender_query_ids: tuple[str, ...]


def false_positive_rate(auto_scores: Mapping[str, float], human_ratings: Mapping[str, int],
                        auto_hi: float = 4.0, human_lo: int = 2) -> FalsePositiveReport:
    """Share of jointly rated queries the model scores high but humans rate low."""
    joined = sorted(set(auto_scores) & set(human_ratings))
    if not joined:
        raise ValueError("no queries present in both score sets")
    offenders = tuple(qid for qid in joined
                      if auto_scores[qid] >= auto_hi and human_ratings[qid] < human_lo)
    return FalsePositiveReport(
        rate=len(offenders) / len(joined),
        numerator=len(offenders),
        denominator=len(joined),
        offender_query_ids=offenders,
    )
