"""Workspace persistence: append-only JSONL logs for passages, queries,
scores, dependency verdicts and human ratings, replayed into memory with
latest-wins semantics per record id, plus dataset export and statistics.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping

from .answerability import AnswerabilityScore, DependencyVerdict, HumanRating
from .corpus import Corpus, Passage, load_passages, write_passages
from .querygen import QueryRecord

QUERY_TYPE_ROWS = {"single": "single", "merged": "merging",
                   "deepened": "deepening", "comparing": "comparing"}
STATS_ROWS = ("single", "merging", "deepening", "comparing")
STATS_COLUMNS = (1, 2, 3, 4)


class DatastoreError(Exception):
    """Workspace state is missing or inconsistent."""


def _append_jsonl(path: Path, record: dict) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "a", encoding="utf-8") as fh:
        fh.write(json.dumps(record, ensure_ascii=False, sort_keys=True) + "\n")


def _read_jsonl(path: Path) -> list[dict]:
    if not path.exists():
        return []
    records = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if line:
                records.append(json.loads(line))
    return records


class Workspace:
    """Filesystem layout for one benchmark build.

    corpus/passages.jsonl     ingested passages (written once)
    gen/queries.jsonl         QueryRecord log; later lines supersede earlier
    gen/scores.jsonl          AnswerabilityScore log
    gen/verdicts.jsonl        DependencyVerdict log
    gen/calibration.jsonl     stratified calibration bins
    human/ratings.jsonl       HumanRating log
    export/                   final dataset files
    eval/                     retrieval reports and run files
    """

    def __init__(self, root: Path | str):
        self.root = Path(root)
        self.passages_path = self.root / "corpus" / "passages.jsonl"
        self.queries_path = self.root / "gen" / "queries.jsonl"
        self.scores_path = self.root / "gen" / "scores.jsonl"
        self.verdicts_path = self.root / "gen" / "verdicts.jsonl"
        self.calibration_path = self.root / "gen" / "calibration.jsonl"
        self.ratings_path = self.root / "human" / "ratings.jsonl"
        self.export_dir = self.root / "export"
        self.eval_dir = self.root / "eval"
        self.lock_path = self.root / ".lock"

    # -- writes ---------------------------------------------------------------

    def write_corpus(self, passages: Iterable[Passage]) -> None:
        write_passages(list(passages), self.passages_path)

    def append_query(self, record: QueryRecord) -> None:
        _append_jsonl(self.queries_path, record.to_dict())

    def append_score(self, score: AnswerabilityScore) -> None:
        _append_jsonl(self.scores_path, score.to_dict())

    def append_verdict(self, verdict: DependencyVerdict) -> None:
        _append_jsonl(self.verdicts_path, verdict.to_dict())

    def append_rating(self, rating: HumanRating) -> None:
        _append_jsonl(self.ratings_path, rating.to_dict())

    def write_calibration(self, bins: Iterable) -> None:
        if self.calibration_path.exists():
            self.calibration_path.unlink()
        for bin_ in bins:
            _append_jsonl(self.calibration_path, bin_.to_dict())

    # -- reads ----------------------------------------------------------------

    def has_corpus(self) -> bool:
        return self.passages_path.exists()

    def load_corpus(self) -> Corpus:
        if not self.has_corpus():
            raise DatastoreError(
                f"no ingested corpus at {self.passages_path}; run the ingest stage first")
        return load_passages(self.passages_path)

    def load_queries(self) -> dict[str, QueryRecord]:
        """Replay the query log; the last line per query_id wins."""
        queries: dict[str, QueryRecord] = {}
        for entry in _read_jsonl(self.queries_path):
            record = QueryRecord.from_dict(entry)
            queries[record.query_id] = record
        return queries

    def load_scores(self) -> dict[str, AnswerabilityScore]:
        scores: dict[str, AnswerabilityScore] = {}
        for entry in _read_jsonl(self.scores_path):
            score = AnswerabilityScore.from_dict(entry)
            scores[score.query_id] = score
        return scores

    def load_verdicts(self) -> dict[str, DependencyVerdict]:
        verdicts: dict[str, DependencyVerdict] = {}
        for entry in _read_jsonl(self.verdicts_path):
            verdict = DependencyVerdict.from_dict(entry)
            verdicts[verdict.query_id] = verdict
        return verdicts

    def load_ratings(self) -> dict[str, HumanRating]:
        ratings: dict[str, HumanRating] = {}
        for entry in _read_jsonl(self.ratings_path):
            rating = HumanRating.from_dict(entry)
            ratings[rating.query_id] = rating
        return ratings

    def load_state(self) -> "WorkspaceState":
        corpus = self.load_corpus()
        queries = self.load_queries()
        scores = self.load_scores()
        verdicts = self.load_verdicts()
        ratings = self.load_ratings()
        state = WorkspaceState(corpus=corpus, queries=queries, scores=scores,
                               verdicts=verdicts, ratings=ratings)
        state.check_integrity()
        return state


@dataclass
class WorkspaceState:
    corpus: Corpus
    queries: dict[str, QueryRecord]
    scores: dict[str, AnswerabilityScore]
    verdicts: dict[str, DependencyVerdict]
    ratings: dict[str, HumanRating]

    def check_integrity(self) -> None:
        known_passages = {p.passage_id for p in self.corpus.passages}
        dangling_passages = sorted({
            pid for q in self.queries.values()
            for pid in q.source_passage_ids if pid not in known_passages})
        if dangling_passages:
            raise DatastoreError(
                f"queries reference unknown passages: {dangling_passages[:10]}")
        for label, keyed in (("scores", self.scores), ("verdicts", self.verdicts),
                             ("ratings", self.ratings)):
            dangling = sorted(qid for qid in keyed if qid not in self.queries)
            if dangling:
                raise DatastoreError(
                    f"{label} reference unknown queries: {dangling[:10]}")

    def queries_with_status(self, *statuses: str) -> list[QueryRecord]:
        return sorted((q for q in self.queries.values() if q.status in statuses),
                      key=lambda q: q.query_id)


# -- dataset and statistics ----------------------------------------------------


@dataclass
class BenchmarkDataset:
    dataset_id: str
    version: str
    passages: list[Passage]
    queries: list[QueryRecord]
    qrels: dict[str, set[str]]
    provenance: dict = field(default_factory=dict)

    def validate(self) -> None:
        known = {p.passage_id for p in self.passages}
        for query in self.queries:
            if query.status != "accepted":
                raise DatastoreError(
                    f"dataset contains non-accepted query {query.query_id} "
                    f"(status {query.status}); finalize before exporting")
            rel = self.qrels.get(query.query_id)
            if rel != set(query.source_passage_ids):
                raise DatastoreError(
                    f"qrels for {query.query_id} do not equal its source passages")
            missing = sorted(rel - known)
            if missing:
                raise DatastoreError(
                    f"qrels for {query.query_id} reference unknown passages: {missing}")
        if len({q.query_id for q in self.queries}) != len(self.queries):
            raise DatastoreError("duplicate query ids in dataset")


def build_dataset(state: WorkspaceState, dataset_id: str, version: str,
                  provenance: Mapping | None = None) -> BenchmarkDataset:
    accepted = state.queries_with_status("accepted")
    dataset = BenchmarkDataset(
        dataset_id=dataset_id,
        version=version,
        passages=list(state.corpus.passages),
        queries=accepted,
        qrels={q.query_id: set(q.source_passage_ids) for q in accepted},
        provenance=dict(provenance or {}),
    )
    dataset.validate()
    return dataset


@dataclass
class StatsBreakdown:
    """Accepted-query counts by generation type and source-document count."""

    cells: dict[str, dict[int, int]]

    @property
    def total(self) -> int:
        return sum(sum(row.values()) for row in self.cells.values())

    def row_total(self, row: str) -> int:
        return sum(self.cells[row].values())

    def column_total(self, n_docs: int) -> int:
        return sum(row.get(n_docs, 0) for row in self.cells.values())

    def to_dict(self) -> dict:
        return {
            "rows": {row: {str(n): self.cells[row][n] for n in STATS_COLUMNS}
                     for row in STATS_ROWS},
            "row_totals": {row: self.row_total(row) for row in STATS_ROWS},
            "column_totals": {str(n): self.column_total(n) for n in STATS_COLUMNS},
            "total": self.total,
        }


def dataset_stats(queries: Iterable[QueryRecord]) -> StatsBreakdown:
    cells = {row: {n: 0 for n in STATS_COLUMNS} for row in STATS_ROWS}
    for query in queries:
        row = QUERY_TYPE_ROWS[query.query_type]
        n_docs = len(query.source_passage_ids)
        if n_docs not in cells[row]:
            raise DatastoreError(
                f"query {query.query_id} has {n_docs} sources, outside the 1-4 range")
        cells[row][n_docs] += 1
    return StatsBreakdown(cells=cells)


def export_dataset(dataset: BenchmarkDataset, export_dir: Path | str) -> dict[str, str]:
    """Write queries/corpus JSONL, TREC qrels and a provenance manifest.

    Output is deterministic: records sorted by id, JSON keys sorted.
    """
    dataset.validate()
    export_dir = Path(export_dir)
    export_dir.mkdir(parents=True, exist_ok=True)

    queries_path = export_dir / "queries.jsonl"
    with open(queries_path, "w", encoding="utf-8") as fh:
        for query in sorted(dataset.queries, key=lambda q: q.query_id):
            fh.write(json.dumps(query.to_dict(), ensure_ascii=False, sort_keys=True) + "\n")

    corpus_path = export_dir / "corpus.jsonl"
    with open(corpus_path, "w", encoding="utf-8") as fh:
        for passage in sorted(dataset.passages, key=lambda p: p.passage_id):
            fh.write(json.dumps(passage.to_dict(), ensure_ascii=False, sort_keys=True) + "\n")

    qrels_path = export_dir / "qrels.txt"
    with open(qrels_path, "w", encoding="utf-8") as fh:
        for qid in sorted(dataset.qrels):
            for pid in sorted(dataset.qrels[qid]):
                fh.write(f"{qid} 0 {pid} 1\n")

    manifest_path = export_dir / "manifest.json"
    manifest = {
        "dataset_id": dataset.dataset_id,
        "version": dataset.version,
        "n_passages": len(dataset.passages),
        "n_queries": len(dataset.queries),
        "stats": dataset_stats(dataset.queries).to_dict(),
        "provenance": dataset.provenance,
    }
    manifest_path.write_text(
        json.dumps(manifest, ensure_ascii=False, sort_keys=True, indent=2) + "\n",
        encoding="utf-8")

    return {
        "queries": str(queries_path),
        "corpus": str(corpus_path),
        "qrels": str(qrels_path),
        "manifest": str(manifest_path),
    }
