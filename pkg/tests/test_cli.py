import csv
import io
import json

import pytest

from blackmamba.cli import EXIT_INVALID, EXIT_OK, EXIT_RUNTIME, EXIT_SELFCHECK, main


def test_count_preset_json(tmp_path, capsys):
    assert main(["count", "--preset", "340M/1.5B", "--format", "json", "--out", str(tmp_path)]) == EXIT_OK
    report = json.loads(capsys.readouterr().out)
    assert 1.3e9 <= report["exact_params"] <= 1.7e9
    assert (tmp_path / "count.json").exists()


def test_count_table(tmp_path, capsys):
    assert main(["count", "--preset", "tiny-standard", "--out", str(tmp_path)]) == EXIT_OK
    assert "exact params" in capsys.readouterr().out


def test_selfcheck_detects_injected_fault(tmp_path, capsys):
    code = main(["selfcheck", "--inject-fault", "flip_dA_sign", "--out", str(tmp_path)])
    out = capsys.readouterr().out
    assert code == EXIT_SELFCHECK
    assert "scan equivalence           FAIL" in out
    assert json.loads((tmp_path / "selfcheck.json").read_text())[0]["passed"] is False


def test_sinkhorn_diag_csv(tmp_path, capsys):
    assert main(["sinkhorn-diag", "--trials", "3", "--samples", "32", "--experts", "4",
                 "--out", str(tmp_path)]) == EXIT_OK
    rows = list(csv.DictReader(io.StringIO((tmp_path / "sinkhorn_diag.csv").read_text())))
    assert len(rows) == 6 and set(rows[0]) == {"iters_used", "residual", "init", "S", "N", "temperature"}


def test_route_stats_and_generate(tmp_path, capsys):
    cfg = tmp_path / "run.yaml"
    cfg.write_text("model:\n  preset: tiny-mamba-moe\n  vocab_size: 32\nbench:\n  route_batches: 1\n"
                   "  route_batch_size: 2\n  route_seq_len: 8\n")
    assert main(["route-stats", "--config", str(cfg), "--out", str(tmp_path)]) == EXIT_OK
    rows = list(csv.DictReader(io.StringIO((tmp_path / "route_stats.csv").read_text())))
    assert sum(int(r["token_count"]) for r in rows if r["layer"] == "0") == 16
    assert main(["generate", "--config", str(cfg), "--prompt", "1,2", "--n-tokens", "3",
                 "--out", str(tmp_path)]) == EXIT_OK
    assert len(json.loads((tmp_path / "generation.json").read_text())["tokens"]) == 5


def test_train_then_generate_from_checkpoint(tmp_path, capsys):
    cfg = tmp_path / "run.yaml"
    cfg.write_text("seed: 1\nmodel:\n  preset: tiny-mamba-moe\n  vocab_size: 16\n"
                   "train:\n  steps: 3\n  seq_len: 8\n  batch_size: 2\n  checkpoint_every: 2\n")
    assert main(["train", "--config", str(cfg), "--out", str(tmp_path)]) == EXIT_OK
    summary = json.loads((tmp_path / "train_summary.json").read_text())
    assert summary["steps"] == 3
    assert (tmp_path / "metrics" / "metrics.jsonl").exists()
    assert (tmp_path / "checkpoints" / "ckpt_000002.bmc").exists()
    assert main(["generate", "--checkpoint", summary["checkpoint"], "--n-tokens", "2",
                 "--out", str(tmp_path)]) == EXIT_OK


def test_bench_latency_json(tmp_path, capsys):
    assert main(["bench-latency", "--preset", "tiny-mamba-moe", "--lengths", "2,4", "--variants", "mamba-moe",
                 "--format", "json", "--out", str(tmp_path)]) == EXIT_OK
    data = json.loads((tmp_path / "latency.json").read_text())
    assert [s["position"] for s in data["samples"]] == [2, 4]


@pytest.mark.parametrize("argv", [
    ["count", "--preset", "nope"],
    ["count", "--config", "/missing.yaml"],
    ["frobnicate"],
    ["generate", "--prompt", "a,b"],
])
def test_validation_errors_exit_1(argv, tmp_path):
    assert main(argv + ["--out", str(tmp_path)] if argv[0] != "frobnicate" else argv) == EXIT_INVALID


def test_bad_config_key_exit_1(tmp_path, capsys):
    cfg = tmp_path / "bad.yaml"
    cfg.write_text("model:\n  experts_count: 4\n")
    assert main(["count", "--config", str(cfg), "--out", str(tmp_path)]) == EXIT_INVALID
    assert "n_experts" in capsys.readouterr().err


def test_runtime_failure_exit_2(tmp_path):
    bad = tmp_path / "broken.bmc"
    bad.write_bytes(b"BMCKPT\x00\x01" + b"\x01\x00\x00\x00" + b"\xff" * 8)
    assert main(["generate", "--checkpoint", str(bad), "--out", str(tmp_path)]) == EXIT_RUNTIME
