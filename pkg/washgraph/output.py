"""Persist detection artefacts."""
from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterable, Iterator, Sequence

from .atomic import atomic_writer, write_text_atomic
from .detector import WashFinding
from .errors import ConfigError, OutputError
from .graph import GraphParams
from .ingest import IngestStats, TradeRecord
from .report import (
    ALL_MARKETS,
    SERIES_HEADER,
    STATS_HEADER,
    MarketStats,
    MonthlySeries,
    aggregate_market_stats,
    grand_total,
    monthly_series,
)

FORMATS = ("report-json", "stats-csv", "series-csv", "finding-audit")
AUDIT_HEADER = ("address", "label", "trade_count", "flagged_trades", "next_neighbor", "services")


def parse_formats(text: str | None) -> tuple[str, ...]:
    if not text:
        return FORMATS
    requested = tuple(dict.fromkeys(part.strip() for part in text.split(",") if part.strip()))
    unknown = [name for name in requested if name not in FORMATS]
    if unknown or not requested:
        choices = ", ".join(FORMATS)
        msg = f"Unknown output format(s) {', '.join(unknown) or text!r}; choose from {choices}"
        raise ConfigError(msg)
    return requested


@dataclass(slots=True)
class RunReport:
    finding: WashFinding
    graph_params: GraphParams
    markets: list[MarketStats]
    series: list[MonthlySeries]
    ingest: IngestStats | None = None

    @classmethod
    def build(
        cls,
        records: Sequence[TradeRecord],
        finding: WashFinding,
        graph_params: GraphParams,
        ingest: IngestStats | None = None,
    ) -> RunReport:
        markets = aggregate_market_stats(records, finding)
        series = [monthly_series(records, finding)]
        if len(markets) > 1:
            markets.append(grand_total(markets))
            series.extend(monthly_series(records, finding, stats.market) for stats in markets[:-1])
        return cls(finding, graph_params, markets, series, ingest)

    @property
    def per_market(self) -> list[MarketStats]:
        return [stats for stats in self.markets if stats.market != ALL_MARKETS]

    def to_json(self) -> dict[str, Any]:
        payload: dict[str, Any] = {
            "params": {**self.finding.params.to_json(), "graph": self.graph_params.to_json()},
            "markets": [stats.to_json() for stats in self.markets],
            "series": [series.to_json() for series in self.series],
            "labels_summary": {
                "labels": self.finding.label_counts(),
                "flags": self.finding.reason_counts(),
                "removed": len(self.finding.removed),
            },
        }
        if self.ingest is not None:
            payload["ingest"] = self.ingest.to_json()
        return payload


@dataclass(slots=True)
class OutputBundle:
    paths: dict[str, list[Path]] = field(default_factory=dict)

    def all_paths(self) -> list[Path]:
        return [path for name in FORMATS for path in self.paths.get(name, [])]


class OutputWriter:
    def __init__(self, out_dir: Path, formats: Iterable[str] = FORMATS):
        self.out_dir = Path(out_dir)
        self.formats = tuple(formats)
        self.report_path = self.out_dir / "report.json"
        self.stats_path = self.out_dir / "stats.csv"
        self.series_path = self.out_dir / "series.csv"
        self.audit_path = self.out_dir / "audit.csv"
        self.finding_path = self.out_dir / "finding.json"

    def write(self, report: RunReport) -> OutputBundle:
        bundle = OutputBundle()
        try:
            self.out_dir.mkdir(parents=True, exist_ok=True)
            if "report-json" in self.formats:
                write_text_atomic(self.report_path, _dumps(report.to_json()))
                bundle.paths["report-json"] = [self.report_path]
            if "stats-csv" in self.formats:
                rows = (stats.to_row() for stats in report.markets)
                _write_csv(self.stats_path, STATS_HEADER, rows)
                bundle.paths["stats-csv"] = [self.stats_path]
            if "series-csv" in self.formats:
                bundle.paths["series-csv"] = self._write_series(report.series)
            if "finding-audit" in self.formats:
                _write_csv(self.audit_path, AUDIT_HEADER, _audit_rows(report.finding))
                write_text_atomic(self.finding_path, _dumps(report.finding.to_json(), compact=True))
                bundle.paths["finding-audit"] = [self.audit_path, self.finding_path]
        except OSError as exc:
            msg = f"Could not write artefacts to {self.out_dir}: {exc}"
            raise OutputError(msg) from exc
        return bundle

    def _write_series(self, series: Sequence[MonthlySeries]) -> list[Path]:
        paths: list[Path] = []
        for item in series:
            if item.market == ALL_MARKETS:
                path = self.series_path
            else:
                path = self.out_dir / f"series-{item.market}.csv"
            _write_csv(path, SERIES_HEADER, (point.to_row() for point in item.points))
            paths.append(path)
        return paths


def _dumps(payload: Any, *, compact: bool = False) -> str:
    if compact:
        # json only uses its C encoder when indent is None
        return json.dumps(payload, ensure_ascii=False, separators=(",", ":")) + "\n"
    return json.dumps(payload, ensure_ascii=False, indent=2) + "\n"


def _write_csv(path: Path, header: Sequence[str], rows: Iterable[Sequence[str]]) -> None:
    with atomic_writer(path, newline="") as handle:
        writer = csv.writer(handle, lineterminator="\n")
        writer.writerow(header)
        writer.writerows(rows)


def _audit_rows(finding: WashFinding) -> Iterator[list[str]]:
    entries = {entry.node: entry for entry in finding.audit}
    for address in sorted(finding.labels):
        label = finding.labels[address]
        entry = entries.get(address)
        if entry is None:
            yield [address, label.value, "", "", "", ""]
            continue
        yield [
            address,
            label.value,
            str(entry.trade_count),
            str(entry.flagged_trades),
            entry.next_neighbor or "",
            ";".join(entry.services),
        ]
