from __future__ import annotations

import json
import os
import resource
import subprocess
import sys
import time
from pathlib import Path

import pytest

from test_cli import run_cli

pytestmark = pytest.mark.slow

ROOT = Path(__file__).resolve().parents[1]
STANDARD = ROOT / "config" / "scenarios" / "standard.json"
PLANTED_TRADES = 16_280
ARTEFACTS = ("report.json", "stats.csv", "series.csv", "audit.csv", "finding.json")


def scaled_corpus(tmp_path: Path, total: int) -> Path:
    scenario = json.loads(STANDARD.read_text(encoding="utf-8"))
    organic = total - PLANTED_TRADES
    scenario["organic"].update(n_trades=organic, n_traders=organic // 10, n_tokens=organic // 4)
    spec = tmp_path / "scenario.json"
    spec.write_text(json.dumps(scenario), encoding="utf-8")
    out_dir = tmp_path / "synth"
    exit_code, output = run_cli(["synth", "--spec", str(spec), "--out", str(out_dir)])
    assert exit_code == 0
    assert f"Generated {total} trades ({PLANTED_TRADES} wash)" in output
    return out_dir


def detect_in_child(corpus: Path, out_dir: Path, threads: int) -> float:
    env = dict(os.environ, WASHGRAPH_THREADS=str(threads), PYTHONPATH=str(ROOT))
    started = time.perf_counter()
    subprocess.run(
        [sys.executable, "-m", "washgraph.cli", "detect", "--input", str(corpus)]
        + ["--out", str(out_dir)],
        cwd=ROOT,
        env=env,
        check=True,
        capture_output=True,
    )
    return time.perf_counter() - started


def test_standard_suite_at_100k_trades(tmp_path: Path) -> None:
    corpus_dir = scaled_corpus(tmp_path, 100_000)
    started = time.perf_counter()
    exit_code, _ = run_cli(
        ["detect", "--input", str(corpus_dir / "corpus.csv"), "--out", str(tmp_path / "out")]
    )
    elapsed = time.perf_counter() - started
    assert exit_code == 0
    assert elapsed < 30

    exit_code, output = run_cli(
        [
            "eval",
            "--input",
            str(corpus_dir / "corpus.csv"),
            "--truth",
            str(corpus_dir / "truth.csv"),
        ]
    )
    assert exit_code == 0
    document = json.loads(output)
    assert document["trades"]["precision"] == 1.0
    assert document["trades"]["recall"] == 1.0


def test_million_trades_are_reproducible_within_budget(tmp_path: Path) -> None:
    corpus = scaled_corpus(tmp_path, 1_000_000) / "corpus.csv"
    first = tmp_path / "first"
    second = tmp_path / "second"

    elapsed = detect_in_child(corpus, first, threads=1)
    assert elapsed < 60
    detect_in_child(corpus, second, threads=4)

    # ru_maxrss is reported in kilobytes on Linux
    peak_mb = resource.getrusage(resource.RUSAGE_CHILDREN).ru_maxrss / 1024
    assert peak_mb < 2048
    for name in ARTEFACTS:
        assert (first / name).read_bytes() == (second / name).read_bytes(), name
