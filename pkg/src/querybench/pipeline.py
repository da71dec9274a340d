"""Pipeline stages: each one reads the workspace, does its increment of
work, appends results and returns a machine-readable report.

Stages are idempotent (already-processed records are skipped) and pure
functions of (config, predecessor artifacts, provider behavior); provider
failures abort the stage after persisting partial progress so a rerun
resumes where the last run stopped.
"""

from __future__ import annotations

import json
import logging
import os
from dataclasses import dataclass, field
from pathlib import Path

from .answerability import (
    Evaluator,
    ScoringError,
    correlate,
    false_positive_rate,
    filter_by_threshold,
    stratified_sample,
)
from .config import PipelineConfig
from .corpus import Corpus, Passage, ingest_corpus, load_passages
from .datastore import (
    Workspace,
    WorkspaceState,
    build_dataset,
    dataset_stats,
    export_dataset,
)
from .providers import (
    AuditLog,
    HttpChatClient,
    HttpEmbeddingClient,
    MockChatClient,
    MockEmbeddingClient,
    ProviderError,
)
from .querygen import (
    GenerationError,
    Generator,
    InsufficientPool,
    QueryRecord,
    SamplerState,
    TemplateLibrary,
    choose_k,
    sample_for_compare,
    sample_for_deepen,
    sample_for_merge,
)
from .retrieval import (
    BenchmarkQuery,
    Retriever,
    run_benchmark,
    strategy_label,
    write_qrels_file,
    write_run_file,
)
from .metrics import format_table

logger = logging.getLogger(__name__)

STAGE_ORDER = ["ingest", "gen-single", "score", "filter", "gen-multi",
               "dep-check", "calibrate", "annotate-serve", "finalize",
               "eval", "stats", "correlate"]


class PipelineError(Exception):
    """A stage cannot run or had to abort; the message says what to do."""


@dataclass
class StageReport:
    stage: str
    counts: dict[str, int] = field(default_factory=dict)
    outputs: dict[str, str] = field(default_factory=dict)
    details: dict = field(default_factory=dict)
    notes: list[str] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {"stage": self.stage, "counts": self.counts, "outputs": self.outputs,
                "details": self.details, "notes": self.notes}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), ensure_ascii=False, sort_keys=True, indent=2)


# -- provider construction ----------------------------------------------------


def _api_key(config: PipelineConfig) -> str | None:
    return os.environ.get(config.providers.api_key_env)


def _audit_log(config: PipelineConfig, name: str) -> AuditLog | None:
    if not config.providers.audit:
        return None
    return AuditLog(Path(config.workspace) / "audit" / f"{name}.jsonl")


def build_chat_client(config: PipelineConfig, name: str = "chat"):
    p = config.providers
    if p.mode == "mock":
        return MockChatClient()
    return HttpChatClient(
        p.chat_base_url, _api_key(config), max_retries=p.max_retries,
        timeout=p.timeout, max_concurrency=p.max_concurrency,
        audit_log=_audit_log(config, name))


def build_embedder(config: PipelineConfig):
    p = config.providers
    if p.mode == "mock":
        return MockEmbeddingClient(seed=config.seed, dense_dim=p.dense_dim)
    return HttpEmbeddingClient(
        p.embed_base_url, p.embedding_model, p.dense_dim, _api_key(config),
        max_retries=p.max_retries, timeout=p.timeout,
        max_concurrency=p.max_concurrency,
        audit_log=_audit_log(config, "embeddings"))


def build_generator(config: PipelineConfig) -> Generator:
    return Generator(
        chat=build_chat_client(config, "generator"),
        templates=TemplateLibrary.load(config.templates_dir),
        model_id=config.providers.generator_model,
        seed=config.seed,
        created_at=config.run_timestamp,
        temperature=config.generation.temperature,
    )


def build_evaluator(config: PipelineConfig) -> Evaluator:
    return Evaluator(
        chat=build_chat_client(config, "evaluator"),
        model_id=config.providers.evaluator_model,
        n_samples=config.scoring.n_samples,
        temperature=config.scoring.temperature,
    )


def workspace_for(config: PipelineConfig) -> Workspace:
    return Workspace(config.workspace)


# -- stage helpers -------------------------------------------------------------


def _require(condition: bool, message: str) -> None:
    if not condition:
        raise PipelineError(message)


def _load_state(ws: Workspace, need_queries_from: str | None = None) -> WorkspaceState:
    _require(ws.has_corpus(),
             f"no ingested corpus in {ws.root}; run the ingest stage first")
    if need_queries_from is not None:
        _require(ws.queries_path.exists(),
                 f"no generated queries in {ws.root}; run the {need_queries_from} stage first")
    return ws.load_state()


def _provider_outage(exc: Exception) -> bool:
    cause = exc.__cause__
    return isinstance(cause, ProviderError)


def _context_passages(corpus: Corpus, query: QueryRecord) -> list[Passage]:
    return [corpus.get(pid) for pid in query.source_passage_ids]


def _with_status(query: QueryRecord, status: str,
                 source_passage_ids: list[str] | None = None) -> QueryRecord:
    return QueryRecord(
        query_id=query.query_id, text=query.text, query_type=query.query_type,
        source_passage_ids=list(source_passage_ids if source_passage_ids is not None
                                else query.source_passage_ids),
        held_product=query.held_product, product_id=query.product_id,
        category=query.category, provenance=dict(query.provenance), status=status)


# -- stages --------------------------------------------------------------------


def stage_ingest(config: PipelineConfig, manifest_path: Path | str) -> StageReport:
    ws = workspace_for(config)
    stats = ingest_corpus(manifest_path, config.chunking, ws.passages_path)
    return StageReport(
        stage="ingest",
        counts={"documents": stats.n_documents, "passages": stats.n_passages,
                "products": stats.n_products, "categories": stats.n_categories},
        outputs={"passages": str(ws.passages_path)},
        details={"corpus_stats": stats.to_dict()},
    )


def stage_gen_single(config: PipelineConfig) -> StageReport:
    ws = workspace_for(config)
    _require(ws.has_corpus(),
             f"no ingested corpus in {ws.root}; run the ingest stage first")
    if ws.queries_path.exists():
        state = ws.load_state()
        corpus, existing = state.corpus, set(state.queries)
    else:
        corpus, existing = ws.load_corpus(), set()
    generator = build_generator(config)
    profiles = config.generation.profiles

    generated = skipped = 0
    for index, passage in enumerate(corpus.passages):
        if f"qs-{passage.passage_id}" in existing:
            skipped += 1
            continue
        profile = profiles[index % len(profiles)]
        try:
            record = generator.generate_single(passage, profile)
        except GenerationError as exc:
            raise PipelineError(
                f"gen-single aborted after {generated} new queries "
                f"(rerun to resume): {exc}") from exc
        ws.append_query(record)
        generated += 1
    return StageReport(
        stage="gen-single",
        counts={"passages": len(corpus.passages), "generated": generated,
                "skipped_existing": skipped},
        outputs={"queries": str(ws.queries_path)},
    )


def stage_score(config: PipelineConfig) -> StageReport:
    ws = workspace_for(config)
    state = _load_state(ws, need_queries_from="gen-single")
    evaluator = build_evaluator(config)

    pending = state.queries_with_status("generated")
    scored = rejected = 0
    notes = []
    for query in pending:
        passages = _context_passages(state.corpus, query)
        try:
            score = evaluator.score_answerability(query, passages)
        except ScoringError as exc:
            if _provider_outage(exc):
                raise PipelineError(
                    f"score aborted after {scored} queries (rerun to resume): {exc}"
                ) from exc
            ws.append_query(_with_status(query, "rejected_auto"))
            notes.append(f"{query.query_id}: no parseable evaluator output; rejected")
            rejected += 1
            continue
        ws.append_score(score)
        ws.append_query(_with_status(query, "scored"))
        scored += 1
    return StageReport(
        stage="score",
        counts={"pending": len(pending), "scored": scored,
                "rejected_unparseable": rejected,
                "already_scored": len(state.queries) - len(pending)},
        outputs={"scores": str(ws.scores_path)},
        notes=notes,
    )


def stage_filter(config: PipelineConfig) -> StageReport:
    ws = workspace_for(config)
    state = _load_state(ws, need_queries_from="gen-single")
    pending = state.queries_with_status("scored")
    if not pending and state.queries_with_status("generated"):
        raise PipelineError("queries exist but none are scored; run the score stage first")

    scores = {}
    for query in pending:
        _require(query.query_id in state.scores,
                 f"query {query.query_id} is marked scored but has no score; "
                 f"run the score stage first")
        scores[query.query_id] = state.scores[query.query_id].score
    accepted_ids, rejected_ids = filter_by_threshold(scores, config.scoring.threshold)
    by_id = {q.query_id: q for q in pending}
    for qid in accepted_ids:
        ws.append_query(_with_status(by_id[qid], "accepted"))
    for qid in rejected_ids:
        ws.append_query(_with_status(by_id[qid], "rejected_auto"))
    return StageReport(
        stage="filter",
        counts={"input": len(pending), "accepted": len(accepted_ids),
                "rejected": len(rejected_ids)},
        details={"threshold": config.scoring.threshold},
    )


def _vet(generator: Generator, template_id: str, candidates: list[tuple[str, str]],
         product: str = "") -> list[str] | None:
    """Returns surviving candidate ids, or None when too few remain."""
    kept = generator.vet_candidates(template_id, candidates, product)
    return kept if len(kept) >= 2 else None


def stage_gen_multi(config: PipelineConfig) -> StageReport:
    ws = workspace_for(config)
    state = _load_state(ws, need_queries_from="gen-single")
    corpus = state.corpus
    singles = [q for q in state.queries.values()
               if q.query_type == "single" and q.status == "accepted"]
    _require(bool(singles),
             "no accepted single-document queries; run the score and filter stages first")
    generator = build_generator(config)
    sampler = SamplerState(seed=config.seed)
    gen_cfg = config.generation
    existing = set(state.queries)

    added = {"merged": 0, "deepened": 0, "comparing": 0}
    skipped_existing = 0
    notes = []

    def record_new(record: QueryRecord) -> None:
        nonlocal skipped_existing
        if record.query_id in existing:
            skipped_existing += 1
            return
        ws.append_query(record)
        existing.add(record.query_id)
        added[record.query_type] += 1

    # Topic merging: fuse single queries about one product.
    for product_id in corpus.product_ids:
        pool = [q for q in singles if q.product_id == product_id]
        for attempt in range(gen_cfg.merge_per_product):
            try:
                k = choose_k(sampler.rng(f"merge-k:{product_id}:{attempt}"),
                             gen_cfg.k_distribution, 2, 3, len(pool))
                group = sample_for_merge(singles, product_id, k, sampler)
                if gen_cfg.enable_vetting:
                    kept = _vet(generator, "V_merge",
                                [(q.query_id, q.text) for q in group], product_id)
                    if kept is None:
                        notes.append(f"merge {product_id}: vetting left <2 candidates")
                        continue
                    group = [q for q in group if q.query_id in kept]
                record_new(generator.generate_merged(group))
            except InsufficientPool as exc:
                notes.append(f"merge {product_id}: {exc}")
                break
            except GenerationError as exc:
                raise PipelineError(
                    f"gen-multi aborted (rerun to resume): {exc}") from exc

    # Context deepening: query-passage pairs within one document.
    for doc_id in corpus.doc_ids:
        for attempt in range(gen_cfg.deepen_per_document):
            try:
                pool_size = sum(1 for q in singles
                                if corpus.get(q.source_passage_ids[0]).doc_id == doc_id)
                k = choose_k(sampler.rng(f"deepen-k:{doc_id}:{attempt}"),
                             gen_cfg.k_distribution, 2, 4, pool_size)
                pairs = sample_for_deepen(singles, corpus, doc_id, k, sampler)
                if gen_cfg.enable_vetting:
                    kept = _vet(generator, "V_deep",
                                [(q.query_id, f"{q.text} || {p.text}") for q, p in pairs])
                    if kept is None:
                        notes.append(f"deepen {doc_id}: vetting left <2 candidates")
                        continue
                    pairs = [(q, p) for q, p in pairs if q.query_id in kept]
                record_new(generator.generate_deepened(pairs))
            except InsufficientPool as exc:
                notes.append(f"deepen {doc_id}: {exc}")
                break
            except GenerationError as exc:
                raise PipelineError(
                    f"gen-multi aborted (rerun to resume): {exc}") from exc

    # Comparing: passages from distinct products in one category.
    for category in corpus.categories:
        n_products = len({p.product_id for p in corpus.passages_by_category(category)})
        for attempt in range(gen_cfg.compare_per_category):
            try:
                k = choose_k(sampler.rng(f"compare-k:{category}:{attempt}"),
                             gen_cfg.k_distribution, 2, 4, n_products)
                picks = sample_for_compare(corpus, category, k, sampler)
                if gen_cfg.enable_vetting:
                    kept = _vet(generator, "V_comp",
                                [(p.passage_id, p.text) for p in picks])
                    if kept is None:
                        notes.append(f"compare {category}: vetting left <2 candidates")
                        continue
                    picks = [p for p in picks if p.passage_id in kept]
                record_new(generator.generate_comparing(picks))
            except InsufficientPool as exc:
                notes.append(f"compare {category}: {exc}")
                break
            except GenerationError as exc:
                raise PipelineError(
                    f"gen-multi aborted (rerun to resume): {exc}") from exc

    return StageReport(
        stage="gen-multi",
        counts={"accepted_singles": len(singles), **added,
                "skipped_existing": skipped_existing},
        outputs={"queries": str(ws.queries_path)},
        notes=notes,
    )


def stage_dep_check(config: PipelineConfig) -> StageReport:
    ws = workspace_for(config)
    state = _load_state(ws, need_queries_from="gen-single")
    multi = [q for q in state.queries.values() if q.is_multi]
    _require(bool(multi), "no multi-document queries; run the gen-multi stage first")
    unfiltered = [q for q in multi if q.status in ("generated", "scored")]
    if unfiltered:
        raise PipelineError(
            f"{len(unfiltered)} multi-document queries are not filtered yet; "
            f"run the score and filter stages first")

    evaluator = build_evaluator(config)
    pending = [q for q in state.queries_with_status("accepted")
               if q.is_multi and q.query_id not in state.verdicts]
    passed = failed = errored = 0
    notes = []
    for query in pending:
        passages = _context_passages(state.corpus, query)
        try:
            verdict = evaluator.check_multi_doc_dependency(query, passages)
        except ScoringError as exc:
            if _provider_outage(exc):
                raise PipelineError(
                    f"dep-check aborted after {passed + failed} queries "
                    f"(rerun to resume): {exc}") from exc
            ws.append_query(_with_status(query, "rejected_auto"))
            notes.append(f"{query.query_id}: scoring error, fail-closed rejection")
            errored += 1
            continue
        ws.append_verdict(verdict)
        if verdict.passes:
            passed += 1
        else:
            ws.append_query(_with_status(query, "rejected_auto"))
            failed += 1
    return StageReport(
        stage="dep-check",
        counts={"pending": len(pending), "passed": passed, "failed": failed,
                "errors_fail_closed": errored,
                "already_checked": len([q for q in multi if q.query_id in state.verdicts])},
        outputs={"verdicts": str(ws.verdicts_path)},
        notes=notes,
    )


def stage_calibrate(config: PipelineConfig) -> StageReport:
    ws = workspace_for(config)
    state = _load_state(ws, need_queries_from="gen-single")
    _require(bool(state.scores), "no answerability scores; run the score stage first")
    scores = {qid: s.score for qid, s in state.scores.items()}
    bins = stratified_sample(scores, config.calibration.bin_edges,
                             config.calibration.per_bin, seed=config.seed)
    ws.write_calibration(bins)
    notes = [f"bin {b.label}: only {b.available} of {b.requested} available"
             for b in bins if b.shortfall]
    return StageReport(
        stage="calibrate",
        counts={"scored": len(scores),
                "sampled": sum(len(b.sampled_query_ids) for b in bins),
                **{f"bin {b.label}": len(b.sampled_query_ids) for b in bins}},
        outputs={"calibration": str(ws.calibration_path)},
        notes=notes,
    )


def human_review_outcome(query: QueryRecord, rating, acceptance_min: int
                         ) -> tuple[bool, list[str]]:
    """Apply the conjunctive review rule; returns (accept, surviving sources).

    Flagged irrelevant passages are dropped first; a multi-document query
    that keeps fewer than 2 sources is rejected outright.
    """
    remaining = [pid for pid in query.source_passage_ids
                 if pid not in set(rating.irrelevant_passage_ids)]
    base = rating.relevance and rating.answerability_1to3 >= acceptance_min
    if not query.is_multi:
        return base and bool(remaining), remaining
    if len(remaining) < 2:
        return False, remaining
    return base and rating.multihop_necessary is True, remaining


def apply_human_ratings(ws: Workspace, state: WorkspaceState, acceptance_min: int
                        ) -> dict[str, int]:
    counts = {"rated": 0, "accepted": 0, "rejected_human": 0, "ignored": 0}
    for qid in sorted(state.ratings):
        query = state.queries[qid]
        if query.status not in ("accepted", "rejected_human"):
            counts["ignored"] += 1
            continue
        counts["rated"] += 1
        accept, remaining = human_review_outcome(query, state.ratings[qid], acceptance_min)
        if accept:
            counts["accepted"] += 1
            if query.status != "accepted" or remaining != query.source_passage_ids:
                ws.append_query(_with_status(query, "accepted", remaining))
        else:
            counts["rejected_human"] += 1
            if query.status != "rejected_human":
                ws.append_query(_with_status(query, "rejected_human"))
    return counts


def stage_finalize(config: PipelineConfig) -> StageReport:
    ws = workspace_for(config)
    state = _load_state(ws, need_queries_from="gen-single")
    _require(not state.queries_with_status("generated"),
             "unscored queries remain; run the score stage first")
    _require(not state.queries_with_status("scored"),
             "unfiltered queries remain; run the filter stage first")
    unchecked = [q for q in state.queries_with_status("accepted")
                 if q.is_multi and q.query_id not in state.verdicts]
    _require(not unchecked,
             f"{len(unchecked)} accepted multi-document queries lack a dependency "
             f"verdict; run the dep-check stage first")

    counts = apply_human_ratings(ws, state, config.annotation.acceptance_min)
    state = ws.load_state()
    dataset = build_dataset(state, config.dataset_id, config.dataset_version,
                            provenance={"config": config.to_manifest_dict()})
    paths = export_dataset(dataset, ws.export_dir)
    unrated = len([q for q in dataset.queries if q.query_id not in state.ratings])
    return StageReport(
        stage="finalize",
        counts={**counts, "exported": len(dataset.queries),
                "unrated_kept": unrated},
        outputs=paths,
        details={"stats": dataset_stats(dataset.queries).to_dict()},
    )


def _load_export(ws: Workspace) -> tuple[Corpus, list[QueryRecord]]:
    queries_path = ws.export_dir / "queries.jsonl"
    corpus_path = ws.export_dir / "corpus.jsonl"
    _require(queries_path.exists() and corpus_path.exists(),
             f"no exported dataset in {ws.export_dir}; run the finalize stage first")
    corpus = load_passages(corpus_path)
    queries = []
    with open(queries_path, encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                queries.append(QueryRecord.from_dict(json.loads(line)))
    return corpus, queries


def _run_filename(label: str) -> str:
    return "".join(c if c.isalnum() or c in "._-" else "_" for c in label) + ".run"


def stage_eval(config: PipelineConfig) -> StageReport:
    ws = workspace_for(config)
    corpus, queries = _load_export(ws)
    _require(bool(queries), "exported dataset has no queries; nothing to evaluate")
    eval_cfg = config.eval
    embed_modes = [m for m in eval_cfg.modes if m != "bm25"]
    retriever = Retriever(
        corpus.passages, eval_cfg.modes,
        embedder=build_embedder(config) if embed_modes else None,
        cache_path=ws.eval_dir / "embeddings.jsonl",
        bm25_params=eval_cfg.bm25_params())
    strategies = list(eval_cfg.modes) + [
        eval_cfg.weights_for(triple) for triple in eval_cfg.fusion_weights]
    bench = [BenchmarkQuery(q.query_id, q.text, q.query_type,
                            tuple(q.source_passage_ids)) for q in queries]
    report, runs = run_benchmark(retriever, bench, strategies,
                                 cutoffs=tuple(eval_cfg.cutoffs),
                                 pool_size=eval_cfg.pool_size)

    ws.eval_dir.mkdir(parents=True, exist_ok=True)
    report_json = ws.eval_dir / "report.json"
    report_json.write_text(
        json.dumps(report.to_dict(), ensure_ascii=False, sort_keys=True, indent=2) + "\n",
        encoding="utf-8")
    report_txt = ws.eval_dir / "report.txt"
    report_txt.write_text(format_table(report) + "\n", encoding="utf-8")
    qrels_path = ws.eval_dir / "qrels.txt"
    write_qrels_file(qrels_path, {q.query_id: set(q.source_passage_ids) for q in queries})
    outputs = {"report_json": str(report_json), "report_txt": str(report_txt),
               "qrels": str(qrels_path)}
    for strategy in strategies:
        label = strategy_label(strategy)
        run_path = ws.eval_dir / "runs" / _run_filename(label)
        write_run_file(run_path, runs[label], tag=label)
        outputs[f"run:{label}"] = str(run_path)

    return StageReport(
        stage="eval",
        counts={"queries": len(queries), "strategies": len(strategies),
                "passages": len(corpus.passages)},
        outputs=outputs,
        details={"report": report.to_dict()},
    )


def stage_stats(config: PipelineConfig) -> StageReport:
    ws = workspace_for(config)
    _, queries = _load_export(ws)
    stats = dataset_stats(queries)
    return StageReport(
        stage="stats",
        counts={"queries": stats.total},
        details={"stats": stats.to_dict()},
    )


def stage_correlate(config: PipelineConfig) -> StageReport:
    ws = workspace_for(config)
    state = _load_state(ws, need_queries_from="gen-single")
    _require(bool(state.ratings),
             "no human ratings; collect ratings via annotate-serve first")
    joined = sorted(set(state.scores) & set(state.ratings))
    _require(len(joined) >= 2,
             f"need at least 2 queries with both an automatic score and a human "
             f"rating, found {len(joined)}")
    auto = [state.scores[qid].score for qid in joined]
    human = [state.ratings[qid].answerability_1to3 for qid in joined]
    try:
        corr = correlate(auto, human)
    except ScoringError as exc:
        raise PipelineError(f"correlation undefined on this sample: {exc}") from exc
    fpr = false_positive_rate(
        {qid: state.scores[qid].score for qid in joined},
        {qid: state.ratings[qid].answerability_1to3 for qid in joined},
        auto_hi=config.scoring.threshold, human_lo=2)
    details = {
        "pearson_rho": corr.pearson_rho,
        "kendall_tau": corr.kendall_tau,
        "n": corr.n,
        "false_positive_rate": fpr.rate,
        "false_positives": fpr.numerator,
        "joined": fpr.denominator,
        "offender_query_ids": list(fpr.offender_query_ids),
    }
    ws.eval_dir.mkdir(parents=True, exist_ok=True)
    out_path = ws.eval_dir / "correlation.json"
    out_path.write_text(json.dumps(details, ensure_ascii=False, sort_keys=True, indent=2) + "\n",
                        encoding="utf-8")
    return StageReport(
        stage="correlate",
        counts={"joined": corr.n},
        outputs={"correlation": str(out_path)},
        details=details,
    )
