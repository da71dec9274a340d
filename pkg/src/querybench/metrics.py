"""Binary-relevance ranking metrics (NDCG@k, AP@k, Recall@k) and the
per-strategy report container with document-count and query-type breakdowns.

Variant choices: IDCG truncates the ideal gain at min(|relevant|, k); AP@k is
normalized by min(|relevant|, k) so it stays ≤ 1 when a query has more
relevant passages than the cutoff.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Collection, Mapping, Sequence

logger = logging.getLogger(__name__)

DOC_COUNT_BUCKETS = ("single", "2-docs", "3-docs", "4-docs")
QUERY_TYPE_LABELS = {"merged": "merging", "deepened": "deepening", "comparing": "comparing"}


def _top_k(ranked: Sequence[str], k: int) -> list[str]:
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    top = list(ranked[:k])
    if len(set(top)) != len(top):
        raise ValueError("ranking contains duplicate ids within the cutoff")
    return top


def ndcg_at_k(ranked: Sequence[str], relevant: Collection[str], k: int) -> float:
    top = _top_k(ranked, k)
    relevant = set(relevant)
    if not relevant:
        logger.warning("ndcg_at_k called with empty relevant set; returning 0")
        return 0.0
    dcg = sum(1.0 / math.log2(rank + 1)
              for rank, pid in enumerate(top, start=1) if pid in relevant)
    idcg = sum(1.0 / math.log2(rank + 1)
               for rank in range(1, min(len(relevant), k) + 1))
    return dcg / idcg


def map_at_k(ranked: Sequence[str], relevant: Collection[str], k: int) -> float:
    top = _top_k(ranked, k)
    relevant = set(relevant)
    if not relevant:
        logger.warning("map_at_k called with empty relevant set; returning 0")
        return 0.0
    hits = 0
    precision_sum = 0.0
    for rank, pid in enumerate(top, start=1):
        if pid in relevant:
            hits += 1
            precision_sum += hits / rank
    return precision_sum / min(len(relevant), k)


def recall_at_k(ranked: Sequence[str], relevant: Collection[str], k: int) -> float:
    top = _top_k(ranked, k)
    relevant = set(relevant)
    if not relevant:
        logger.warning("recall_at_k called with empty relevant set; returning 0")
        return 0.0
    return len(set(top) & relevant) / len(relevant)


METRIC_FUNCS = {"ndcg": ndcg_at_k, "map": map_at_k, "recall": recall_at_k}


def doc_count_bucket(n_docs: int) -> str:
    if n_docs < 1:
        raise ValueError("a query must have at least one source passage")
    return "single" if n_docs == 1 else f"{n_docs}-docs"


@dataclass(frozen=True)
class QueryMeta:
    query_id: str
    query_type: str
    n_docs: int


@dataclass
class BucketSummary:
    n_queries: int
    means: dict[str, float]

    def to_dict(self) -> dict:
        return {"n_queries": self.n_queries, "means": dict(self.means)}


@dataclass
class StrategyReport:
    strategy: str
    n_queries: int
    per_query: dict[str, dict[str, float]]  # metric@k -> query_id -> value
    means: dict[str, float]
    by_doc_count: dict[str, BucketSummary]
    by_query_type: dict[str, BucketSummary]

    def to_dict(self) -> dict:
        return {
            "strategy": self.strategy,
            "n_queries": self.n_queries,
            "means": dict(self.means),
            "per_query": {m: dict(v) for m, v in self.per_query.items()},
            "by_doc_count": {k: v.to_dict() for k, v in self.by_doc_count.items()},
            "by_query_type": {k: v.to_dict() for k, v in self.by_query_type.items()},
        }


@dataclass
class MetricsReport:
    cutoffs: tuple[int, ...]
    strategies: dict[str, StrategyReport]
    excluded_query_ids: list[str] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "cutoffs": list(self.cutoffs),
            "strategies": {k: v.to_dict() for k, v in self.strategies.items()},
            "excluded_query_ids": list(self.excluded_query_ids),
        }


def _mean(values: Sequence[float]) -> float:
    return sum(values) / len(values)


def _bucket_summary(qids: list[str], per_query: dict[str, dict[str, float]]) -> BucketSummary:
    means = {}
    if qids:
        for metric_name, values in per_query.items():
            means[metric_name] = _mean([values[qid] for qid in qids])
    return BucketSummary(n_queries=len(qids), means=means)


def build_report(rankings: Mapping[str, Mapping[str, Sequence[str]]],
                 qrels: Mapping[str, Collection[str]],
                 meta: Mapping[str, QueryMeta] | None = None,
                 cutoffs: Sequence[int] = (5, 10)) -> MetricsReport:
    """Score every strategy's rankings against binary qrels.

    Queries with empty qrels are excluded from all means and reported; every
    strategy must supply a ranking for every scored query.
    """
    cutoffs = tuple(sorted(set(cutoffs)))
    if not cutoffs:
        raise ValueError("at least one cutoff required")
    excluded = sorted(qid for qid, rel in qrels.items() if not rel)
    if excluded:
        logger.warning("excluding %d queries with empty qrels", len(excluded))
    scored_qids = sorted(qid for qid in qrels if qrels[qid])

    strategies: dict[str, StrategyReport] = {}
    for strategy in sorted(rankings):
        strategy_rankings = rankings[strategy]
        missing = [qid for qid in scored_qids if qid not in strategy_rankings]
        if missing:
            raise ValueError(
                f"strategy {strategy!r} has no ranking for queries: {missing[:5]}")
        per_query: dict[str, dict[str, float]] = {}
        for metric_name, func in METRIC_FUNCS.items():
            for k in cutoffs:
                per_query[f"{metric_name}@{k}"] = {
                    qid: func(strategy_rankings[qid], qrels[qid], k)
                    for qid in scored_qids
                }
        means = {name: _mean(list(values.values())) if scored_qids else 0.0
                 for name, values in per_query.items()}

        by_doc_count = {bucket: _bucket_summary([], per_query)
                        for bucket in DOC_COUNT_BUCKETS}
        by_query_type = {label: _bucket_summary([], per_query)
                         for label in QUERY_TYPE_LABELS.values()}
        if meta is not None:
            doc_groups: dict[str, list[str]] = {b: [] for b in DOC_COUNT_BUCKETS}
            type_groups: dict[str, list[str]] = {t: [] for t in QUERY_TYPE_LABELS.values()}
            for qid in scored_qids:
                info = meta[qid]
                doc_groups[doc_count_bucket(info.n_docs)].append(qid)
                label = QUERY_TYPE_LABELS.get(info.query_type)
                if label:
                    type_groups[label].append(qid)
            by_doc_count = {b: _bucket_summary(qids, per_query)
                            for b, qids in doc_groups.items()}
            by_query_type = {t: _bucket_summary(qids, per_query)
                             for t, qids in type_groups.items()}

        strategies[strategy] = StrategyReport(
            strategy=strategy,
            n_queries=len(scored_qids),
            per_query=per_query,
            means=means,
            by_doc_count=by_doc_count,
            by_query_type=by_query_type,
        )
    return MetricsReport(cutoffs=cutoffs, strategies=strategies,
                         excluded_query_ids=excluded)


def format_table(report: MetricsReport) -> str:
    """Plain-text means table: one row per strategy, one column per metric@k."""
    headers = [f"{name}@{k}" for name in ("ndcg", "map", "recall")
               for k in report.cutoffs]
    name_width = max([len("strategy")] + [len(s) for s in report.strategies])
    lines = ["  ".join(["strategy".ljust(name_width)] + [h.rjust(9) for h in headers])]
    for strategy in sorted(report.strategies):
        row = report.strategies[strategy]
        cells = [f"{row.means[h]:.4f}".rjust(9) for h in headers]
        lines.append("  ".join([strategy.ljust(name_width)] + cells))
    return "\n".join(lines)
