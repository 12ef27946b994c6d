from __future__ import annotations

from pathlib import Path

import pytest

from factories import addr, cycle, trade
from washgraph.detector import DetectionParams, classify
from washgraph.errors import CoverageGapError, MalformedRowError, SchemaMismatchError
from washgraph.evaluate import Confusion, evaluate, read_node_truth, read_trade_truth
from washgraph.graph import create_graph


def test_perfect_detection() -> None:
    wash = cycle("a", "b")
    organic = [trade("c", "d", token=1), trade("d", "e", token=1)]
    records = [*wash, *organic]
    finding = classify(create_graph(records), DetectionParams())
    truth = {r.trade_id: "wash" for r in wash} | {r.trade_id: "organic" for r in organic}
    nodes = {addr("a"): "wash_node", addr("b"): "wash_node", addr("c"): "clean"}
    result = evaluate(records, finding, truth, nodes)
    assert result.trades == Confusion(tp=2, fp=0, fn=0, tn=2)
    assert result.trades.f1 == 1.0
    assert result.nodes.precision == 1.0
    assert result.nodes.recall == 1.0
    assert result.in_nodes.recall is None


def test_empty_corpus_has_undefined_scores() -> None:
    finding = classify(create_graph([]), DetectionParams())
    result = evaluate([], finding, {})
    assert result.trades == Confusion()
    assert result.trades.precision is None
    assert result.trades.to_json()["f1"] is None


def test_missed_and_spurious_trades() -> None:
    confusion = Confusion.from_sets({"x", "y"}, {"y", "z"}, ["w", "x", "y", "z"])
    assert confusion == Confusion(tp=1, fp=1, fn=1, tn=1)
    assert confusion.precision == 0.5
    assert confusion.recall == 0.5
    assert Confusion(fp=3).f1 is None


def test_truth_must_cover_every_trade() -> None:
    records = cycle("a", "b")
    finding = classify(create_graph(records), DetectionParams())
    with pytest.raises(CoverageGapError):
        evaluate(records, finding, {records[0].trade_id: "wash"})


def test_truth_files(tmp_path: Path) -> None:
    trades = tmp_path / "truth.csv"
    trades.write_text("trade_id,label\nt1,wash\n\nt2,organic\n", encoding="utf-8")
    assert read_trade_truth(trades) == {"t1": "wash", "t2": "organic"}
    nodes = tmp_path / "nodes.csv"
    nodes.write_text("address,label\n0xaa,in_node\n", encoding="utf-8")
    assert read_node_truth(nodes) == {"0xaa": "in_node"}


def test_bad_truth_files(tmp_path: Path) -> None:
    path = tmp_path / "truth.csv"
    path.write_text("id,label\n", encoding="utf-8")
    with pytest.raises(SchemaMismatchError):
        read_trade_truth(path)
    path.write_text("trade_id,label\nt1,wash\nt2,maybe\n", encoding="utf-8")
    with pytest.raises(MalformedRowError) as excinfo:
        read_trade_truth(path)
    assert excinfo.value.line_no == 3
