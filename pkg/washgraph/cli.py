"""Command line interface implemented with argparse."""
from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import re
import sys
from dataclasses import dataclass
from datetime import date, datetime, timezone
from pathlib import Path
from typing import Sequence

from .atomic import atomic_writer, write_text_atomic
from .detector import DetectionParams, WashFinding, classify, parse_rational
from .errors import ConfigError, InputNotFoundError, WashGraphError
from .evaluate import evaluate, read_node_truth, read_trade_truth
from .graph import GraphParams, create_graph, dump_edge_list
from .ingest import (
    IngestOptions,
    IngestStats,
    TradeRecord,
    format_eth,
    load_records,
    market_display,
)
from .output import OutputWriter, RunReport, parse_formats
from .paths import DEFAULT_DETECTION_PATH, DEFAULT_REWARDS_PATH, DEFAULT_SCENARIO_PATH
from .report import Crediting, EmissionSchedule, attribute_rewards
from .synthgen import NODE_TRUTH_FILENAME, ScenarioSpec, generate

logger = logging.getLogger(__name__)

THREADS_ENV = "WASHGRAPH_THREADS"
_ADDRESS_RE = re.compile(r"0x[0-9a-fA-F]{40}")
REWARDS_HEADER = (
    "day",
    "user",
    "user_volume_eth",
    "market_volume_eth",
    "daily_tokens",
    "reward_tokens",
)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(description="Detect wash trading in NFT marketplace sales")
    parser.add_argument(
        "--log-level",
        default="WARNING",
        choices=["DEBUG", "INFO", "WARNING", "ERROR"],
        help="Diagnostics written to stderr",
    )
    subparsers = parser.add_subparsers(dest="command")

    detect = subparsers.add_parser("detect", help="Label addresses and flag wash trades")
    _add_input_arguments(detect)
    _add_detection_arguments(detect)
    detect.add_argument("--out", type=Path, default=Path("out"), help="Directory for run artefacts")
    detect.add_argument("--format", dest="formats", help="Comma-separated subset of output formats")
    detect.add_argument(
        "--dump-graph", type=Path, help="Write the filtered trade edge list to this file"
    )

    stats = subparsers.add_parser("stats", help="Recompute report files from a saved finding")
    _add_input_arguments(stats)
    stats.add_argument(
        "--finding", type=Path, required=True, help="finding.json from a previous detect run"
    )
    stats.add_argument("--out", type=Path, default=Path("out"), help="Directory for report files")
    stats.add_argument("--format", dest="formats", help="Comma-separated subset of output formats")

    synth = subparsers.add_parser("synth", help="Generate a synthetic corpus with ground truth")
    synth.add_argument(
        "--spec", type=Path, default=DEFAULT_SCENARIO_PATH, help="Scenario JSON file"
    )
    synth.add_argument("--seed", type=int, help="Override the scenario seed")
    synth.add_argument(
        "--out", type=Path, default=Path("synth"), help="Directory for corpus and truth files"
    )

    evaluation = subparsers.add_parser("eval", help="Score detection against ground truth")
    _add_input_arguments(evaluation)
    _add_detection_arguments(evaluation)
    evaluation.add_argument("--truth", type=Path, required=True, help="trade_id,label sidecar")
    evaluation.add_argument(
        "--nodes", type=Path, help="address,label sidecar (default: next to --truth)"
    )
    evaluation.add_argument("--out", type=Path, help="Write the evaluation document here")

    rewards = subparsers.add_parser("rewards", help="Estimate daily trading rewards per address")
    _add_input_arguments(rewards)
    rewards.add_argument(
        "--schedule", type=Path, default=DEFAULT_REWARDS_PATH, help="Daily emission table"
    )
    rewards.add_argument(
        "--daily-tokens", type=str, help="Flat daily emission; overrides --schedule"
    )
    rewards.add_argument(
        "--crediting",
        choices=[item.value for item in Crediting],
        default=Crediting.BOTH.value,
        help="Which side of each trade earns volume credit",
    )
    rewards.add_argument(
        "--finding", type=Path, help="finding.json used to attribute rewards to wash labels"
    )
    rewards.add_argument("--out", type=Path, default=Path("out"), help="Directory for rewards.csv")

    return parser


def _add_input_arguments(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--input", type=Path, nargs="+", required=True, help="Trade CSV file(s)")
    parser.add_argument("--strict", action="store_true", help="Abort on the first malformed row")
    parser.add_argument("--market", action="append", help="Restrict to a market (repeatable)")
    parser.add_argument("--from", dest="start", type=str, help="Inclusive ISO date")
    parser.add_argument("--to", dest="end", type=str, help="Exclusive ISO date")
    parser.add_argument(
        "--min-price", type=str, default="0", help="Drop trades below this ETH price"
    )
    parser.add_argument(
        "--exclude-self-trades", action="store_true", help="Drop seller == buyer trades"
    )


def _add_detection_arguments(parser: argparse.ArgumentParser) -> None:
    parser.add_argument(
        "--config", type=Path, default=DEFAULT_DETECTION_PATH, help="Detection defaults JSON"
    )
    parser.add_argument("--beta", type=str, help="Suspicious-share threshold in [0, 1]")
    parser.add_argument("--psi", type=str, help="Balance-drift tolerance in [0, 1]")
    parser.add_argument("--omega", type=int, help="Transaction count above which a node is removed")
    parser.add_argument(
        "--known-contracts", type=Path, help="File with one service address per line"
    )


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=getattr(logging, args.log_level),
        stream=sys.stderr,
        format="%(levelname)s %(name)s: %(message)s",
    )
    handlers = {
        "detect": _run_detect,
        "stats": _run_stats,
        "synth": _run_synth,
        "eval": _run_eval,
        "rewards": _run_rewards,
    }
    if args.command is None:
        parser.print_help()
        return 0
    try:
        return handlers[args.command](args)
    except WashGraphError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 4


def _threads() -> int:
    raw = os.environ.get(THREADS_ENV, "1")
    try:
        threads = int(raw)
    except ValueError as exc:
        msg = f"{THREADS_ENV} must be an integer, got {raw!r}"
        raise ConfigError(msg) from exc
    return max(1, threads)


def _parse_day(raw: str | None, flag: str) -> datetime | None:
    if raw is None:
        return None
    try:
        moment = datetime.fromisoformat(raw)
    except ValueError as exc:
        msg = f"{flag} expects an ISO date, got {raw!r}"
        raise ConfigError(msg) from exc
    return moment if moment.tzinfo else moment.replace(tzinfo=timezone.utc)


def _graph_params(args: argparse.Namespace) -> GraphParams:
    return GraphParams(
        markets=frozenset(name.lower() for name in args.market) if args.market else None,
        start=_parse_day(args.start, "--from"),
        end=_parse_day(args.end, "--to"),
        min_price=parse_rational(args.min_price, "--min-price"),
        include_self_trades=not args.exclude_self_trades,
    )


def _detection_params(args: argparse.Namespace) -> DetectionParams:
    contracts = _read_known_contracts(args.known_contracts) if args.known_contracts else None
    params = DetectionParams.from_file(args.config)
    params = params.with_overrides(
        beta=parse_rational(args.beta, "--beta") if args.beta is not None else None,
        psi=parse_rational(args.psi, "--psi") if args.psi is not None else None,
        omega=args.omega,
        known_contracts=contracts,
    )
    if args.market and len(args.market) == 1 and args.omega is None:
        params = params.for_market(args.market[0].lower())
    return params


def _read_known_contracts(path: Path) -> list[str]:
    if not path.is_file():
        raise InputNotFoundError(path)
    addresses: list[str] = []
    for line_no, line in enumerate(path.read_text(encoding="utf-8").splitlines(), start=1):
        text = line.split("#", 1)[0].strip()
        if not text:
            continue
        if not _ADDRESS_RE.fullmatch(text):
            msg = f"{path}:{line_no}: not an address: {text!r}"
            raise ConfigError(msg)
        addresses.append(text.lower())
    return addresses


@dataclass(slots=True)
class RunInputs:
    loaded: int
    ingest: IngestStats


def _load(
    args: argparse.Namespace, graph_params: GraphParams
) -> tuple[list[TradeRecord], RunInputs]:
    options = IngestOptions(strict=args.strict)
    records, ingest = load_records(args.input, options, threads=_threads())
    selected = graph_params.select(records)
    return selected, RunInputs(len(records), ingest)


def _print_summary(report: RunReport) -> None:
    for stats in report.markets:
        name = "All markets" if stats.market == "all" else market_display(stats.market)
        print(
            f"{name}: {stats.wash_tx}/{stats.total_tx} wash trades ({stats.wash_tx_pct}%), "
            f"{format_eth(stats.wash_volume_eth)}/{format_eth(stats.total_volume_eth)} ETH "
            f"({stats.wash_volume_pct}%)"
        )


def _run_detect(args: argparse.Namespace) -> int:
    graph_params = _graph_params(args)
    params = _detection_params(args)
    formats = parse_formats(args.formats)
    records, inputs = _load(args, graph_params)
    print(
        f"Loaded {inputs.loaded} trades from {len(args.input)} file(s); "
        f"{len(records)} after filters"
    )
    graph = create_graph(records, graph_params)
    if args.dump_graph:
        dump_edge_list(graph, args.dump_graph)
        print(f"Edge list written to {args.dump_graph}")
    print(f"Parameters: beta={params.beta} psi={params.psi} omega={params.omega}")
    finding = classify(graph, params, threads=_threads())
    report = RunReport.build(records, finding, graph_params, inputs.ingest)
    bundle = OutputWriter(args.out, formats).write(report)
    _print_summary(report)
    for path in bundle.all_paths():
        print(f"Wrote {path}")
    return 0


def _load_finding(path: Path) -> WashFinding:
    if not path.is_file():
        raise InputNotFoundError(path)
    try:
        data = json.loads(path.read_text(encoding="utf-8"))
        return WashFinding.from_json(data, DetectionParams.from_json(data.get("params", {})))
    except (json.JSONDecodeError, KeyError, ValueError) as exc:
        msg = f"{path} is not a valid finding document: {exc}"
        raise ConfigError(msg) from exc


def _run_stats(args: argparse.Namespace) -> int:
    graph_params = _graph_params(args)
    formats = parse_formats(args.formats)
    finding = _load_finding(args.finding)
    records, inputs = _load(args, graph_params)
    report = RunReport.build(records, finding, graph_params, inputs.ingest)
    bundle = OutputWriter(args.out, formats).write(report)
    _print_summary(report)
    for path in bundle.all_paths():
        print(f"Wrote {path}")
    return 0


def _run_synth(args: argparse.Namespace) -> int:
    spec = ScenarioSpec.from_file(args.spec)
    if args.seed is not None:
        spec.seed = args.seed
    corpus = generate(spec)
    corpus_path, truth_path, nodes_path = corpus.write(args.out)
    print(
        f"Generated {len(corpus.records)} trades ({corpus.wash_trades} wash) "
        f"with seed {spec.seed}"
    )
    print(f"Corpus written to {corpus_path}")
    print(f"Ground truth written to {truth_path} and {nodes_path}")
    return 0


def _run_eval(args: argparse.Namespace) -> int:
    graph_params = _graph_params(args)
    params = _detection_params(args)
    trade_truth = read_trade_truth(args.truth)
    nodes_path = args.nodes or args.truth.with_name(NODE_TRUTH_FILENAME)
    node_truth = read_node_truth(nodes_path) if args.nodes or nodes_path.is_file() else None
    records, _ = _load(args, graph_params)
    finding = classify(create_graph(records, graph_params), params, threads=_threads())
    result = evaluate(records, finding, trade_truth, node_truth)
    document = {"params": params.to_json(), **result.to_json()}
    text = json.dumps(document, indent=2) + "\n"
    if args.out:
        write_text_atomic(args.out, text)
    print(text, end="")
    return 0


def _run_rewards(args: argparse.Namespace) -> int:
    graph_params = _graph_params(args)
    market = args.market[0].lower() if args.market else "looksrare"
    records, _ = _load(args, graph_params)
    if args.daily_tokens is not None:
        first = min((record.timestamp.date() for record in records), default=date(1970, 1, 1))
        tokens = parse_rational(args.daily_tokens, "--daily-tokens")
        schedule = EmissionSchedule(market, [(first, tokens)])
    else:
        schedule = EmissionSchedule.from_file(args.schedule, market)
    finding = _load_finding(args.finding) if args.finding else None
    crediting = Crediting(args.crediting)
    days = attribute_rewards(records, schedule, crediting=crediting, finding=finding)
    out_path = args.out / "rewards.csv"
    with atomic_writer(out_path, newline="") as handle:
        writer = csv.writer(handle, lineterminator="\n")
        writer.writerow(REWARDS_HEADER)
        for day in days:
            for estimate in day.estimates:
                writer.writerow(
                    [
                        day.day.isoformat(),
                        estimate.user,
                        format_eth(estimate.user_volume_eth),
                        format_eth(estimate.market_volume_eth),
                        format_eth(estimate.daily_tokens),
                        format_eth(estimate.reward_tokens),
                    ]
                )
    if not days:
        print(f"No {market_display(market)} emission covers the input days")
    for day in days:
        line = (
            f"{day.day.isoformat()}: {len(day.estimates)} users share "
            f"{format_eth(day.daily_tokens)} tokens"
        )
        if finding is not None:
            line += f"; {day.wash_reward_pct}% to wash-labeled addresses"
        print(line)
    print(f"Rewards written to {out_path}")
    return 0


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
