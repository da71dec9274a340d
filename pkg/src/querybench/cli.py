"""Command-line entry point: one subcommand per pipeline stage.

Each invocation loads the config, takes the workspace lock, runs the stage
and prints its report as JSON on stdout. Exit code 0 on success, 2 on a
configuration or pipeline error.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import filelock

from .answerability import ScoringError
from .config import ConfigError, PipelineConfig, load_config
from .corpus import IngestError
from .datastore import DatastoreError
from .pipeline import (
    PipelineError,
    StageReport,
    stage_calibrate,
    stage_correlate,
    stage_dep_check,
    stage_eval,
    stage_filter,
    stage_finalize,
    stage_gen_multi,
    stage_gen_single,
    stage_ingest,
    stage_score,
    stage_stats,
    workspace_for,
)
from .querygen import GenerationError, TemplateError
from .retrieval import RetrievalError

LOCK_TIMEOUT_SECONDS = 5.0

_STAGE_FUNCS = {
    "gen-single": stage_gen_single,
    "score": stage_score,
    "filter": stage_filter,
    "gen-multi": stage_gen_multi,
    "dep-check": stage_dep_check,
    "calibrate": stage_calibrate,
    "finalize": stage_finalize,
    "eval": stage_eval,
    "stats": stage_stats,
    "correlate": stage_correlate,
}

_USER_ERRORS = (ConfigError, PipelineError, DatastoreError, IngestError,
                GenerationError, TemplateError, ScoringError, RetrievalError)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="querybench",
        description="Build and evaluate a retrieval benchmark from a document corpus.")
    parser.add_argument("--config", required=True, help="path to the YAML config file")
    parser.add_argument("--workspace", help="override the workspace directory")
    parser.add_argument("--seed", type=int, help="override the master seed")
    parser.add_argument("-v", "--verbose", action="store_true",
                        help="log stage progress to stderr")

    sub = parser.add_subparsers(dest="command", required=True)
    ingest = sub.add_parser("ingest", help="chunk manifest documents into passages")
    ingest.add_argument("--manifest", required=True,
                        help="path to the corpus manifest (JSONL index of documents)")
    sub.add_parser("gen-single", help="generate one query per passage")
    sub.add_parser("score", help="score answerability of pending queries")
    sub.add_parser("filter", help="accept or reject scored queries by threshold")
    sub.add_parser("gen-multi", help="generate merged, deepened and comparing queries")
    sub.add_parser("dep-check", help="verify multi-document queries need all sources")
    sub.add_parser("calibrate", help="draw a stratified sample for human calibration")
    serve = sub.add_parser("annotate-serve", help="serve the human review API and UI")
    serve.add_argument("--host", help="bind address (default from config)")
    serve.add_argument("--port", type=int, help="bind port (default from config)")
    serve.add_argument("--ui-dist", help="directory with the built annotation UI")
    sub.add_parser("finalize", help="apply human ratings and export the dataset")
    sub.add_parser("eval", help="run retrieval strategies over the exported dataset")
    sub.add_parser("stats", help="print the dataset composition table")
    sub.add_parser("correlate", help="compare automatic scores with human ratings")
    return parser


def _load_effective_config(args: argparse.Namespace) -> PipelineConfig:
    config = load_config(args.config)
    if args.workspace:
        config.workspace = Path(args.workspace)
    if args.seed is not None:
        config.seed = args.seed
    config.validate()
    return config


def _serve(config: PipelineConfig, args: argparse.Namespace) -> StageReport:
    import uvicorn

    from .service import create_app

    host = args.host or config.annotation.host
    port = args.port if args.port is not None else config.annotation.port
    app = create_app(config, ui_dist=Path(args.ui_dist) if args.ui_dist else None)
    uvicorn.run(app, host=host, port=port, log_level="warning")
    return StageReport(stage="annotate-serve",
                       details={"host": host, "port": port})


def run_command(args: argparse.Namespace) -> StageReport:
    config = _load_effective_config(args)
    workspace = workspace_for(config)
    workspace.root.mkdir(parents=True, exist_ok=True)
    lock = filelock.FileLock(str(workspace.lock_path))
    try:
        with lock.acquire(timeout=LOCK_TIMEOUT_SECONDS):
            if args.command == "ingest":
                return stage_ingest(config, args.manifest)
            if args.command == "annotate-serve":
                return _serve(config, args)
            return _STAGE_FUNCS[args.command](config)
    except filelock.Timeout:
        raise PipelineError(
            f"workspace {workspace.root} is locked by another running stage "
            f"({workspace.lock_path})") from None


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        stream=sys.stderr, format="%(levelname)s %(name)s: %(message)s")
    try:
        report = run_command(args)
    except _USER_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    print(report.to_json())
    return 0


if __name__ == "__main__":
    sys.exit(main())
