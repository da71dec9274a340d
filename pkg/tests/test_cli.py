"""CLI tests: stage reports on stdout, exit codes, predecessor errors,
config overrides and the workspace lock."""

import json
import subprocess
import sys

import filelock
import pytest
import yaml

from querybench import cli

from helpers import build_toy_manifest


@pytest.fixture
def manifest(tmp_path):
    return build_toy_manifest(tmp_path / "corpus")


@pytest.fixture
def config_path(tmp_path):
    path = tmp_path / "config.yaml"
    path.write_text(yaml.safe_dump({"workspace": str(tmp_path / "ws")}),
                    encoding="utf-8")
    return path


def run_cli(capsys, *args) -> tuple[int, dict | None, str]:
    code = cli.main(list(args))
    captured = capsys.readouterr()
    report = json.loads(captured.out) if code == 0 and captured.out.strip() else None
    return code, report, captured.err


class TestStages:
    def test_ingest_reports_counts(self, capsys, config_path, manifest):
        code, report, _ = run_cli(capsys, "--config", str(config_path),
                                  "ingest", "--manifest", str(manifest))
        assert code == 0
        assert report["stage"] == "ingest"
        assert report["counts"]["passages"] == 24

    def test_full_flow_through_cli(self, capsys, config_path, manifest):
        base = ["--config", str(config_path)]
        steps = [["ingest", "--manifest", str(manifest)], ["gen-single"], ["score"],
                 ["filter"], ["gen-multi"], ["score"], ["filter"], ["dep-check"],
                 ["calibrate"], ["finalize"], ["eval"], ["stats"]]
        reports = {}
        for step in steps:
            code, report, err = run_cli(capsys, *base, *step)
            assert code == 0, f"{step} failed: {err}"
            reports[report["stage"]] = report
        assert reports["filter"]["counts"]["accepted"] + \
            reports["filter"]["counts"]["rejected"] == reports["filter"]["counts"]["input"]
        hybrids = [s for s in reports["eval"]["details"]["report"]["strategies"]
                   if s.startswith("hybrid(")]
        assert len(hybrids) == 3
        assert reports["stats"]["details"]["stats"]["total"] > 0

    def test_missing_predecessor_names_stage(self, capsys, config_path, manifest):
        code, _, err = run_cli(capsys, "--config", str(config_path),
                               "ingest", "--manifest", str(manifest))
        assert code == 0
        code, _, err = run_cli(capsys, "--config", str(config_path), "score")
        assert code == 2
        assert "gen-single" in err

    def test_eval_before_finalize_names_stage(self, capsys, config_path, manifest):
        run_cli(capsys, "--config", str(config_path),
                "ingest", "--manifest", str(manifest))
        code, _, err = run_cli(capsys, "--config", str(config_path), "eval")
        assert code == 2
        assert "finalize" in err


class TestArgs:
    def test_missing_config_file(self, capsys, tmp_path):
        code, _, err = run_cli(capsys, "--config", str(tmp_path / "nope.yaml"), "stats")
        assert code == 2
        assert "not found" in err

    def test_workspace_override(self, capsys, config_path, manifest, tmp_path):
        other = tmp_path / "elsewhere"
        code, report, _ = run_cli(capsys, "--config", str(config_path),
                                  "--workspace", str(other),
                                  "ingest", "--manifest", str(manifest))
        assert code == 0
        assert (other / "corpus" / "passages.jsonl").exists()

    def test_unknown_command_exits_with_usage(self, capsys, config_path):
        with pytest.raises(SystemExit):
            cli.main(["--config", str(config_path), "frobnicate"])

    def test_seed_override_recorded_in_manifest(self, capsys, config_path, manifest):
        base = ["--config", str(config_path), "--seed", "7"]
        for step in [["ingest", "--manifest", str(manifest)], ["gen-single"],
                     ["score"], ["filter"], ["gen-multi"], ["score"], ["filter"],
                     ["dep-check"], ["finalize"]]:
            code, _, err = run_cli(capsys, *base, *step)
            assert code == 0, f"{step} failed: {err}"
        config = yaml.safe_load(config_path.read_text())
        manifest_json = json.loads(
            (config_path.parent / "ws" / "export" / "manifest.json").read_text())
        assert manifest_json["provenance"]["config"]["seed"] == 7


class TestLock:
    def test_locked_workspace_is_an_error(self, capsys, config_path, manifest,
                                          tmp_path, monkeypatch):
        monkeypatch.setattr(cli, "LOCK_TIMEOUT_SECONDS", 0.1)
        ws = tmp_path / "ws"
        ws.mkdir(parents=True, exist_ok=True)
        held = filelock.FileLock(str(ws / ".lock"), thread_local=False)
        with held.acquire(timeout=1):
            code, _, err = run_cli(capsys, "--config", str(config_path),
                                   "ingest", "--manifest", str(manifest))
        assert code == 2
        assert "locked" in err


class TestConsoleScript:
    def test_entry_point_runs(self, tmp_path, manifest):
        config = tmp_path / "config.yaml"
        config.write_text(yaml.safe_dump({"workspace": str(tmp_path / "ws")}),
                          encoding="utf-8")
        proc = subprocess.run(
            [sys.executable, "-m", "querybench.cli", "--config", str(config),
             "ingest", "--manifest", str(manifest)],
            capture_output=True, text=True, timeout=120)
        assert proc.returncode == 0, proc.stderr
        assert json.loads(proc.stdout)["counts"]["passages"] == 24
