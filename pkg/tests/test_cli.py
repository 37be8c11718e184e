import json
import os

import pytest

from hybrid_attn.cli import main

ROOT = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))
SMOKE = os.path.join(ROOT, "configs", "smoke.cfg")
FAST = ["--config", SMOKE, "--set", "train.total_steps=20", "--set", "train.warmup_steps=5",
        "--set", "run.eval_seqs=4"]


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    out = tmp_path_factory.mktemp("run")
    assert main(["train", *FAST, "--precision", "f64", "--out", str(out)]) == 0
    return out


def test_train_artifacts(trained):
    names = set(os.listdir(trained))
    assert {"config.txt", "metrics.jsonl", "checkpoint.npz", "routing_stats.json"} <= names
    lines = (trained / "metrics.jsonl").read_text().splitlines()
    assert len(lines) == 20 and json.loads(lines[0])["step"] == 0


def test_train_is_deterministic(trained, tmp_path):
    assert main(["train", *FAST, "--precision", "f64", "--out", str(tmp_path)]) == 0
    for name in ("metrics.jsonl", "config.txt", "checkpoint.npz"):
        assert (tmp_path / name).read_bytes() == (trained / name).read_bytes()


def test_eval_trace(trained, tmp_path):
    ck = str(trained / "checkpoint.npz")
    assert main(["eval", "--checkpoint", ck, "--out", str(tmp_path)]) == 0
    rows = (tmp_path / "routing_trace.tsv").read_text().splitlines()
    assert rows[0].split("\t")[:5] == ["seq", "layer", "group", "chunk", "choice"]
    assert len(rows) - 1 == 4 * 2 * 2 * 8          # seqs * layers * groups * chunks
    ev = json.loads((tmp_path / "eval.json").read_text())
    assert 0.0 <= ev["accuracy"] <= 1.0

    assert main(["eval", "--checkpoint", ck, "--routing", "all_softmax",
                 "--out", str(tmp_path)]) == 0
    rows = (tmp_path / "routing_trace.tsv").read_text().splitlines()[1:]
    assert {r.split("\t")[4] for r in rows} == {"0"}


def test_route_stats_and_generate(trained, tmp_path, capsys):
    ck = str(trained / "checkpoint.npz")
    assert main(["route-stats", "--checkpoint", ck, "--out", str(tmp_path)]) == 0
    assert main(["generate", "--checkpoint", ck, "--prompt", "2,3,4", "--tokens", "5",
                 "--out", str(tmp_path)]) == 0
    rec = json.loads((tmp_path / "generate.json").read_text())
    assert len(rec["generated"]) == 5


def test_bench_outputs(tmp_path):
    assert main(["bench", "--config", SMOKE, "--no-timing", "--out", str(tmp_path)]) == 0
    fit = json.loads((tmp_path / "fit.json").read_text())
    assert {"a", "b", "max_rel_err", "ratio_all_linear"} <= set(fit)
    assert len((tmp_path / "flops.jsonl").read_text().splitlines()) == 3 * 4
    assert main(["bench", "--config", SMOKE, "--length", "64", "--length", "128",
                 "--pin-threads", "--set", "run.bench_decode_steps=2",
                 "--out", str(tmp_path)]) == 0
    assert len((tmp_path / "timing.jsonl").read_text().splitlines()) == 2


@pytest.mark.parametrize("argv", [
    ["train", "--config", SMOKE, "--out", "/nonexistent/dir"],
    ["train", "--config", SMOKE, "--set", "block.bogus=1"],
    ["train", "--config", "/nonexistent.cfg"],
    ["bench", "--config", SMOKE, "--length", "65", "--no-timing", "--out", "."],
    ["eval", "--checkpoint", "/nonexistent.npz"],
    ["frobnicate"],
])
def test_config_errors_exit_2(argv):
    assert main(argv) == 2


def test_thread_env(monkeypatch, tmp_path):
    monkeypatch.setenv("HYBRID_ATTN_THREADS", "zero")
    assert main(["bench", "--config", SMOKE, "--no-timing", "--out", str(tmp_path)]) == 2
    monkeypatch.setenv("HYBRID_ATTN_THREADS", "1")
    assert main(["bench", "--config", SMOKE, "--no-timing", "--out", str(tmp_path)]) == 0
