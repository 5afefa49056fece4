"""End-to-end CLI behaviour: artifacts, exit codes, stdout summaries."""

import json
import shutil
import subprocess

import pytest

from streamkv.cli import main
from streamkv.codec import StreamingDecoder

RUN_ARTIFACTS = {"cache_trace.csv", "config.ini", "latents.bin",
                 "manifest.json", "selection_trace.csv"}


def write_config(tmp_path, blocks=4, extra=""):
    path = tmp_path / "run.ini"
    path.write_text(
        "[geometry]\n"
        "latent_height = 8\n"
        "latent_width = 8\n"
        "\n"
        "[cache]\n"
        "mid_capacity = 8\n"
        "top_k = 4\n"
        "\n"
        "[run]\n"
        f"blocks = {blocks}\n"
        "seed = 3\n"
        + extra)
    return str(path)


def read_artifacts(out_dir):
    return {p.name: p.read_bytes() for p in out_dir.iterdir()}


def test_generate_writes_the_run_artifacts(tmp_path, capsys):
    cfg = write_config(tmp_path)
    out = tmp_path / "run"
    assert main(["generate", "--config", cfg, "--out", str(out)]) == 0
    assert {p.name for p in out.iterdir()} == RUN_ARTIFACTS
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["format"] == "streamkv-run-v1"
    assert manifest["policy"] == "bounded"
    assert manifest["blocks"] == 4
    assert manifest["artifacts"] == sorted(RUN_ARTIFACTS - {"manifest.json"})
    assert manifest["latent_shape"] == [16, 4, 8, 8]
    captured = capsys.readouterr()
    assert "config_sha256=" in captured.out
    assert manifest["config_sha256"] in captured.out


def test_generate_artifacts_are_reproducible(tmp_path, capsys):
    cfg = write_config(tmp_path, blocks=6)
    out = tmp_path / "run"
    assert main(["generate", "--config", cfg, "--out", str(out)]) == 0
    first = read_artifacts(out)
    assert main(["generate", "--config", cfg, "--out", str(out)]) == 0
    assert read_artifacts(out) == first


def test_generate_flag_overrides(tmp_path, capsys):
    cfg = write_config(tmp_path)
    out = tmp_path / "run"
    assert main(["generate", "--config", cfg, "--out", str(out),
                 "--blocks", "2", "--steps", "2", "--seed", "9"]) == 0
    ini = (out / "config.ini").read_text()
    assert "steps = 2" in ini
    assert "seed = 9" in ini
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["blocks"] == 2
    assert manifest["seed"] == 9


def test_generate_no_latents_and_dump_frames(tmp_path, capsys):
    cfg = write_config(tmp_path, blocks=2)
    lean = tmp_path / "lean"
    main(["generate", "--config", cfg, "--out", str(lean), "--no-latents"])
    assert not (lean / "latents.bin").exists()
    manifest = json.loads((lean / "manifest.json").read_text())
    assert "latents.bin" not in manifest["artifacts"]

    full = tmp_path / "full"
    main(["generate", "--config", cfg, "--out", str(full), "--dump-frames"])
    assert (full / "frames.bin").exists()
    manifest = json.loads((full / "manifest.json").read_text())
    assert "frames.bin" in manifest["artifacts"]
    assert manifest["frame_shape"] == [13 + 16, 3, 64, 64]


def test_generate_unbounded_policy(tmp_path, capsys):
    cfg = write_config(tmp_path, blocks=3)
    out = tmp_path / "run"
    assert main(["generate", "--config", cfg, "--out", str(out),
                 "--policy", "unbounded"]) == 0
    assert not (out / "selection_trace.csv").exists()
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["policy"] == "unbounded"
    assert "policy=unbounded" in capsys.readouterr().out


def test_generate_rejects_unknown_key(tmp_path, capsys):
    cfg = write_config(tmp_path, extra="turbo = yes\n")
    assert main(["generate", "--config", cfg]) == 2
    assert "unknown config key run.turbo" in capsys.readouterr().err


def test_generate_rejects_invalid_geometry(tmp_path, capsys):
    path = tmp_path / "bad.ini"
    path.write_text("[geometry]\nlatent_height = 10\n")
    assert main(["generate", "--config", str(path)]) == 2
    assert "geometry.latent_height" in capsys.readouterr().err


def test_generate_rejects_missing_config(tmp_path, capsys):
    assert main(["generate", "--config", str(tmp_path / "nope.ini")]) == 2
    assert "cannot read config file" in capsys.readouterr().err


def test_generate_runtime_failure_exits_one(tmp_path, capsys, monkeypatch):
    def exploding(self, block):
        raise ValueError("injected decoder failure")

    monkeypatch.setattr(StreamingDecoder, "decode_block", exploding)
    cfg = write_config(tmp_path, blocks=2)
    assert main(["generate", "--config", cfg, "--out", str(tmp_path / "run")]) == 1
    assert "error: block 0: injected decoder failure" in capsys.readouterr().err


def test_memory_report_production_numbers(capsys):
    assert main(["memory-report", "--durations", "120", "--fps", "16"]) == 0
    out = capsys.readouterr().out
    assert "748800" in out
    assert "27872" in out
    assert "138.02" in out
    assert "5.14" in out


def test_memory_report_rejects_bad_durations(capsys):
    assert main(["memory-report", "--durations", "abc"]) == 2
    assert "--durations" in capsys.readouterr().err
    assert main(["memory-report", "--durations", ","]) == 2


def test_bench_strategies_ranks_policies(capsys):
    assert main(["bench-strategies", "--seed", "0"]) == 0
    out = capsys.readouterr().out
    lines = [l for l in out.splitlines() if l.strip().startswith(("dynamic", "fifo", "random"))]
    assert len(lines) == 3
    # sorted by mean mass, and the affinity-aware policy wins
    assert lines[0].strip().startswith("dynamic")


def test_bench_strategies_subset_and_validation(capsys):
    assert main(["bench-strategies", "--strategies", "fifo"]) == 0
    out = capsys.readouterr().out
    assert "fifo" in out and "dynamic" not in out
    assert main(["bench-strategies", "--strategies", "lru"]) == 2


def test_analyze_run_directory(tmp_path, capsys):
    cfg = write_config(tmp_path, blocks=10)
    out = tmp_path / "run"
    main(["generate", "--config", cfg, "--out", str(out)])
    capsys.readouterr()
    report = tmp_path / "report"
    assert main(["analyze", "--run", str(out), "--out", str(report)]) == 0
    captured = capsys.readouterr().out
    assert "blocks=10" in captured
    assert "mean_churn=" in captured
    assert {p.name for p in report.iterdir()} == \
        {"importance_profile.csv", "churn.csv", "diversity.csv"}


def test_analyze_trace_file(tmp_path, capsys):
    cfg = write_config(tmp_path, blocks=10)
    out = tmp_path / "run"
    main(["generate", "--config", cfg, "--out", str(out)])
    capsys.readouterr()
    assert main(["analyze", "--trace", str(out / "selection_trace.csv")]) == 0
    assert "scored_events=" in capsys.readouterr().out


def test_analyze_missing_trace(tmp_path, capsys):
    assert main(["analyze", "--run", str(tmp_path)]) == 2
    assert "selection trace not found" in capsys.readouterr().err


@pytest.mark.skipif(shutil.which("streamkv") is None,
                    reason="console script not on PATH")
def test_console_script_entry_point():
    proc = subprocess.run(["streamkv", "memory-report", "--durations", "120",
                           "--fps", "16"], capture_output=True, text=True)
    assert proc.returncode == 0
    assert "748800" in proc.stdout
