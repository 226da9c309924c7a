import json
import os
import subprocess
import sys
from pathlib import Path

import pytest

from bertram_lab.cli import OUT_ENV, build_parser, main
from bertram_lab.config import load_config, smoke_preset


def _run(*args, env=None):
    return subprocess.run([sys.executable, "-m", "bertram_lab", *args], capture_output=True,
                          text=True, env={**os.environ, **(env or {})})


@pytest.fixture(scope="module")
def smoke_runs(tmp_path_factory):
    a = tmp_path_factory.mktemp("run_a")
    b = tmp_path_factory.mktemp("run_b")
    ra = _run("pipeline", "--preset", "smoke", "--seed", "3", "--out", str(a))
    rb = _run("pipeline", "--preset", "smoke", "--seed", "3", env={OUT_ENV: str(b)})
    assert ra.returncode == 0, ra.stderr
    assert rb.returncode == 0, rb.stderr
    return a, b


def test_help_exits_zero(capsys):
    with pytest.raises(SystemExit) as exc:
        main(["probe", "--help"])
    assert exc.value.code == 0
    assert "usage" in capsys.readouterr().out


def test_every_step_accepts_config_and_seed():
    parser = build_parser()
    for cmd in ["make-toy", "ingest", "build-vocab", "pretrain", "probe", "eval", "pipeline"]:
        ns = parser.parse_args([cmd, "--config", "c.json", "--seed", "4"])
        assert ns.seed == 4 and ns.config == "c.json"
    ns = parser.parse_args(["train-bertram", "--stage", "3", "--variant", "replace"])
    assert (ns.stage, ns.variant) == (3, "replace")
    ns = parser.parse_args(["eval", "--strategy", "slash", "--indomain"])
    assert ns.strategy == "slash" and ns.indomain is True


def test_unknown_flag_fails():
    with pytest.raises(SystemExit) as exc:
        main(["probe", "--bogus"])
    assert exc.value.code != 0


def test_missing_inputs_fail_cleanly(tmp_path, capsys):
    assert main(["pretrain", "--out", str(tmp_path)]) == 1
    assert "not found" in capsys.readouterr().err
    assert main(["ingest", "--corpus", str(tmp_path / "nope.txt"), "--out", str(tmp_path)]) == 1
    assert main(["train-bertram", "--stage", "3", "--out", str(tmp_path)]) == 1
    assert not any(tmp_path.iterdir())


def test_flags_override_config(tmp_path):
    p = tmp_path / "c.json"
    p.write_text(json.dumps({"seed": 1, "eval": {"strategy": "replace"}}))
    ns = build_parser().parse_args(["eval", "--config", str(p), "--strategy", "slash", "--seed", "9"])
    from bertram_lab.cli import _overrides
    cfg = load_config(p, _overrides(ns))
    assert cfg.eval.strategy == "slash" and cfg.seed == 9 and cfg.bertram.seed == 9


def test_unknown_config_key_rejected(tmp_path):
    p = tmp_path / "c.json"
    p.write_text(json.dumps({"bertram": {"stage9": 1}}))
    assert main(["build-vocab", "--config", str(p), "--out", str(tmp_path)]) == 1


def test_pipeline_artifacts(smoke_runs):
    a, _ = smoke_runs
    for rel in ["toy/corpus.txt", "corpus.json", "vocab.json", "encoder.ckpt", "encoder.json",
                "bertram/stage1.ckpt", "bertram/stage2.ckpt", "bertram/stage3-add.ckpt",
                "rarify/train.jsonl", "rarify/test.jsonl", "rarify/classifier.ckpt",
                "reports/probe-plain.json", "reports/probe-add.csv", "reports/eval-baseline.json",
                "reports/eval-add-replace.csv", "reports/mimic-add.json", "reports/rarify.json"]:
        assert (a / rel).is_file(), rel
    manifest = json.loads((a / "encoder.json").read_text())
    vocab_tokens = json.loads((a / "vocab.json").read_text())["tokens"]
    assert manifest["encoder"]["vocab_size"] == len(vocab_tokens)
    assert len(manifest["vocab_sha256"]) == 64
    assert not list(a.rglob("*.tmp"))


def test_pipeline_reports_byte_identical(smoke_runs):
    a, b = smoke_runs
    files = sorted(p.relative_to(a) for p in (a / "reports").iterdir())
    assert files == sorted(p.relative_to(b) for p in (b / "reports").iterdir())
    for rel in files:
        assert (a / rel).read_bytes() == (b / rel).read_bytes(), rel
    for rel in ["encoder.ckpt", "bertram/stage3-add.ckpt", "rarify/test.jsonl"]:
        assert (a / rel).read_bytes() == (b / rel).read_bytes(), rel


def test_single_steps_rerun_identically(smoke_runs):
    a, _ = smoke_runs
    before = (a / "reports/eval-add-replace.json").read_bytes()
    assert main(["eval", "--preset", "smoke", "--seed", "3", "--out", str(a)]) == 0
    assert (a / "reports/eval-add-replace.json").read_bytes() == before
    assert main(["eval", "--preset", "smoke", "--seed", "3", "--strategy", "slash", "--indomain",
                 "--out", str(a)]) == 0
    assert (a / "reports/eval-add-slash-indomain.csv").is_file()
