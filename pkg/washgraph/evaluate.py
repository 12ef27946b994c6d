"""Score a WashFinding against synthetic ground truth."""
from __future__ import annotations

import csv
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Iterable, Mapping

from .detector import WASH_LABELS, NodeLabel, WashFinding
from .errors import CoverageGapError, InputNotFoundError, MalformedRowError, SchemaMismatchError
from .ingest import TradeRecord
from .synthgen import ORGANIC, WASH

logger = logging.getLogger(__name__)

_NODE_LABELS = frozenset(label.value for label in NodeLabel)
_WASH_LABEL_VALUES = frozenset(label.value for label in WASH_LABELS)


@dataclass(frozen=True, slots=True)
class Confusion:
    tp: int = 0
    fp: int = 0
    fn: int = 0
    tn: int = 0

    @classmethod
    def from_sets(cls, predicted: set[str], actual: set[str], universe: Iterable[str]) -> Confusion:
        tp = fp = fn = tn = 0
        for key in universe:
            hit, truth = key in predicted, key in actual
            if hit and truth:
                tp += 1
            elif hit:
                fp += 1
            elif truth:
                fn += 1
            else:
                tn += 1
        return cls(tp, fp, fn, tn)

    @property
    def precision(self) -> float | None:
        return self.tp / (self.tp + self.fp) if self.tp + self.fp else None

    @property
    def recall(self) -> float | None:
        return self.tp / (self.tp + self.fn) if self.tp + self.fn else None

    @property
    def f1(self) -> float | None:
        precision, recall = self.precision, self.recall
        if precision is None or recall is None or precision + recall == 0:
            return None
        return 2 * precision * recall / (precision + recall)

    def to_json(self) -> dict[str, Any]:
        return {
            "tp": self.tp,
            "fp": self.fp,
            "fn": self.fn,
            "tn": self.tn,
            "precision": self.precision,
            "recall": self.recall,
            "f1": self.f1,
        }


@dataclass(frozen=True, slots=True)
class EvaluationReport:
    trades: Confusion
    nodes: Confusion
    in_nodes: Confusion

    def to_json(self) -> dict[str, Any]:
        return {
            "trades": self.trades.to_json(),
            "nodes": self.nodes.to_json(),
            "in_nodes": self.in_nodes.to_json(),
        }


def _read_pairs(path: Path, header: tuple[str, str], allowed: frozenset[str]) -> dict[str, str]:
    path = Path(path)
    if not path.is_file():
        raise InputNotFoundError(path)
    pairs: dict[str, str] = {}
    with path.open("r", encoding="utf-8", newline="") as handle:
        reader = csv.reader(handle)
        first = next(reader, None)
        if first is None or tuple(first) != header:
            msg = f"{path}: header {first!r} does not match {','.join(header)}"
            raise SchemaMismatchError(msg)
        for row in reader:
            if not row:
                continue
            if len(row) != 2 or row[1] not in allowed:
                raise MalformedRowError(reader.line_num, "bad_label")
            pairs[row[0]] = row[1]
    return pairs


def read_trade_truth(path: Path) -> dict[str, str]:
    return _read_pairs(path, ("trade_id", "label"), frozenset({WASH, ORGANIC}))


def read_node_truth(path: Path) -> dict[str, str]:
    return _read_pairs(path, ("address", "label"), _NODE_LABELS)


def evaluate(
    records: Iterable[TradeRecord],
    finding: WashFinding,
    trade_truth: Mapping[str, str],
    node_truth: Mapping[str, str] | None = None,
) -> EvaluationReport:
    trade_ids = [record.trade_id for record in records]
    missing = [trade_id for trade_id in trade_ids if trade_id not in trade_truth]
    if missing:
        msg = f"Ground truth misses {len(missing)} trades, e.g. {missing[0]}"
        raise CoverageGapError(msg)
    trades = Confusion.from_sets(
        set(finding.flagged_trade_ids),
        {trade_id for trade_id in trade_ids if trade_truth[trade_id] == WASH},
        trade_ids,
    )
    nodes = in_nodes = Confusion()
    if node_truth is not None:
        addresses = sorted(node_truth)
        nodes = Confusion.from_sets(
            {a for a in addresses if finding.label_of(a) in WASH_LABELS},
            {a for a in addresses if node_truth[a] in _WASH_LABEL_VALUES},
            addresses,
        )
        in_nodes = Confusion.from_sets(
            {a for a in addresses if finding.label_of(a) is NodeLabel.IN_NODE},
            {a for a in addresses if node_truth[a] == NodeLabel.IN_NODE.value},
            addresses,
        )
    logger.info("Trade precision %s recall %s", trades.precision, trades.recall)
    return EvaluationReport(trades=trades, nodes=nodes, in_nodes=in_nodes)
