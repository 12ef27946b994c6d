"""Synthetic trade corpora with planted wash structures and ground-truth labels."""
from __future__ import annotations

import csv
import hashlib
import json
import logging
import math
from dataclasses import dataclass, field
from datetime import datetime, timezone
from decimal import Decimal, InvalidOperation
from pathlib import Path
from typing import Any, Mapping, Sequence

import numpy as np

from .atomic import atomic_writer
from .errors import InvalidSpecError
from .ingest import (
    GENESIS_TIMESTAMP,
    TradeRecord,
    normalize_price,
    normalize_timestamp,
    price_to_wei,
    to_epoch_seconds,
    write_records,
)
from .paths import DEFAULT_SCENARIO_PATH

logger = logging.getLogger(__name__)

PATTERNS = ("self_loop", "dyad", "triad", "k_cycle", "hub")
WASH = "wash"
ORGANIC = "organic"

CORPUS_FILENAME = "corpus.csv"
TRUTH_FILENAME = "truth.csv"
NODE_TRUTH_FILENAME = "truth_nodes.csv"

_DEFAULT_START = datetime(2022, 1, 1, tzinfo=timezone.utc)
_PRICE_QUANTUM = Decimal("0.000001")


def _fail(where: str, problem: str) -> InvalidSpecError:
    return InvalidSpecError(f"{where}: {problem}")


def _parse_moment(raw: object, where: str) -> datetime:
    try:
        moment = datetime.fromisoformat(str(raw))
    except ValueError as exc:
        raise _fail(where, f"not an ISO date/time: {raw!r}") from exc
    if moment.tzinfo is None:
        moment = moment.replace(tzinfo=timezone.utc)
    if to_epoch_seconds(moment) < GENESIS_TIMESTAMP:
        raise _fail(where, f"{raw!r} is before the chain genesis")
    return moment


def _count(raw: Mapping[str, Any], key: str, where: str, default: int = 0) -> int:
    value = raw.get(key, default)
    if isinstance(value, bool) or not isinstance(value, int) or value < 0:
        raise _fail(where, f"{key} must be a non-negative integer, got {value!r}")
    return value


@dataclass(frozen=True, slots=True)
class PriceSpec:
    distribution: str = "fixed"
    value: Decimal = Decimal("1")
    mean: float = 0.0
    sigma: float = 1.0

    @classmethod
    def parse(cls, raw: object, where: str) -> PriceSpec:
        if raw is None:
            return cls()
        if not isinstance(raw, Mapping):
            return cls(value=_parse_price(raw, where))
        distribution = raw.get("distribution", "fixed")
        if distribution == "fixed":
            return cls(value=_parse_price(raw.get("value", "1"), where))
        if distribution == "lognormal":
            try:
                mean, sigma = float(raw.get("mean", 0.0)), float(raw.get("sigma", 1.0))
            except (TypeError, ValueError) as exc:
                raise _fail(where, "lognormal mean/sigma must be numbers") from exc
            if not math.isfinite(mean) or not math.isfinite(sigma) or sigma < 0:
                raise _fail(where, f"invalid lognormal parameters mean={mean} sigma={sigma}")
            return cls(distribution="lognormal", mean=mean, sigma=sigma)
        raise _fail(where, f"unknown price distribution {distribution!r}")

    def draw(self, rng: np.random.Generator) -> Decimal:
        if self.distribution == "fixed":
            return self.value
        sample = float(rng.lognormal(self.mean, self.sigma))
        return Decimal(f"{sample:.6f}")


def _parse_price(raw: object, where: str) -> Decimal:
    try:
        price = Decimal(str(raw))
    except InvalidOperation as exc:
        raise _fail(where, f"price must be a decimal number, got {raw!r}") from exc
    if not price.is_finite() or price < 0:
        raise _fail(where, f"price must be finite and non-negative, got {raw!r}")
    if price != price.quantize(_PRICE_QUANTUM):
        raise _fail(where, f"price {raw!r} has more than six decimals")
    return price


@dataclass(frozen=True, slots=True)
class TimingSpec:
    start: int
    end: int

    @classmethod
    def parse(cls, raw: object, where: str) -> TimingSpec | None:
        if raw is None:
            return None
        if not isinstance(raw, Mapping) or "from" not in raw or "to" not in raw:
            raise _fail(where, "timing needs 'from' and 'to'")
        start = to_epoch_seconds(_parse_moment(raw["from"], where))
        end = to_epoch_seconds(_parse_moment(raw["to"], where))
        if end <= start:
            raise _fail(where, "timing window is empty")
        return cls(start, end)


@dataclass(frozen=True, slots=True)
class OrganicSpec:
    n_traders: int = 0
    n_tokens: int = 0
    n_trades: int = 0
    price: PriceSpec = field(default_factory=PriceSpec)
    timing: TimingSpec | None = None

    @classmethod
    def parse(cls, raw: object, where: str) -> OrganicSpec:
        if not isinstance(raw, Mapping):
            raise _fail(where, "organic block must be an object")
        spec = cls(
            n_traders=_count(raw, "n_traders", where),
            n_tokens=_count(raw, "n_tokens", where),
            n_trades=_count(raw, "n_trades", where),
            price=PriceSpec.parse(raw.get("price"), where),
            timing=TimingSpec.parse(raw.get("timing"), where),
        )
        if spec.n_trades and (spec.n_traders < 1 or spec.n_tokens < 1):
            raise _fail(where, "organic trades need at least one trader and one token")
        return spec


@dataclass(frozen=True, slots=True)
class PlantedSpec:
    pattern: str
    count: int = 1
    k: int = 0
    size: int = 0
    price: PriceSpec = field(default_factory=PriceSpec)
    timing: TimingSpec | None = None

    @classmethod
    def parse(cls, raw: object, where: str) -> PlantedSpec:
        if not isinstance(raw, Mapping):
            raise _fail(where, "planted entry must be an object")
        pattern = raw.get("pattern")
        if pattern not in PATTERNS:
            expected = ", ".join(PATTERNS)
            raise _fail(where, f"unknown pattern {pattern!r}; expected one of {expected}")
        k = _count(raw, "k", where)
        size = _count(raw, "size", where)
        if pattern == "k_cycle" and k < 2:
            raise _fail(where, f"k_cycle needs k >= 2, got {k}")
        if pattern == "hub" and size < 1:
            raise _fail(where, f"hub needs size >= 1, got {size}")
        return cls(
            pattern=pattern,
            count=_count(raw, "count", where, default=1),
            k=k,
            size=size,
            price=PriceSpec.parse(raw.get("price", raw.get("prices")), where),
            timing=TimingSpec.parse(raw.get("timing"), where),
        )


@dataclass(slots=True)
class ScenarioSpec:
    seed: int
    organic: list[OrganicSpec] = field(default_factory=list)
    planted: list[PlantedSpec] = field(default_factory=list)
    start: datetime = _DEFAULT_START
    block_interval_seconds: int = 12
    start_block: int = 14_000_000
    market: str = "looksrare"
    omega: int = 10_000
    hard_mode: bool = False

    @classmethod
    def from_file(cls, path: Path = DEFAULT_SCENARIO_PATH) -> ScenarioSpec:
        path = Path(path)
        try:
            data = json.loads(path.read_text())
        except FileNotFoundError as exc:
            raise _fail(str(path), "scenario file not found") from exc
        except json.JSONDecodeError as exc:
            raise _fail(str(path), f"not valid JSON ({exc})") from exc
        return cls.from_mapping(data, where=str(path))

    @classmethod
    def from_mapping(cls, data: object, where: str = "scenario") -> ScenarioSpec:
        if not isinstance(data, Mapping):
            raise _fail(where, "scenario must be an object")
        seed = data.get("seed")
        if isinstance(seed, bool) or not isinstance(seed, int) or not 0 <= seed < 2**64:
            raise _fail(where, f"seed must be a 64-bit unsigned integer, got {seed!r}")
        organic_value = data.get("organic") or []
        organic_raw = [organic_value] if isinstance(organic_value, Mapping) else organic_value
        planted_raw = data.get("planted") or []
        if not isinstance(planted_raw, list) or not isinstance(organic_raw, list):
            raise _fail(where, "organic and planted must be lists")
        interval = _count(data, "block_interval_seconds", where, default=12)
        omega = _count(data, "omega", where, default=10_000)
        if interval < 1 or omega < 1:
            raise _fail(where, "block_interval_seconds and omega must be positive")
        market = str(data.get("market", "looksrare")).lower()
        return cls(
            seed=seed,
            organic=[
                OrganicSpec.parse(item, f"{where}: organic[{i}]")
                for i, item in enumerate(organic_raw)
            ],
            planted=[
                PlantedSpec.parse(item, f"{where}: planted[{i}]")
                for i, item in enumerate(planted_raw)
            ],
            start=_parse_moment(data["start"], where) if "start" in data else _DEFAULT_START,
            block_interval_seconds=interval,
            start_block=_count(data, "start_block", where, default=14_000_000),
            market=market,
            omega=omega,
            hard_mode=bool(data.get("hard_mode", False)),
        )


@dataclass(slots=True)
class SyntheticCorpus:
    records: list[TradeRecord]
    trade_truth: dict[str, str]
    node_truth: dict[str, str]

    @property
    def wash_trades(self) -> int:
        return sum(1 for label in self.trade_truth.values() if label == WASH)

    def write(self, out_dir: Path) -> tuple[Path, Path, Path]:
        out_dir = Path(out_dir)
        corpus_path = out_dir / CORPUS_FILENAME
        truth_path = out_dir / TRUTH_FILENAME
        nodes_path = out_dir / NODE_TRUTH_FILENAME
        write_records(corpus_path, self.records)
        _write_pairs(truth_path, ("trade_id", "label"), self.trade_truth)
        _write_pairs(nodes_path, ("address", "label"), self.node_truth)
        return corpus_path, truth_path, nodes_path


def _write_pairs(path: Path, header: Sequence[str], values: Mapping[str, str]) -> None:
    with atomic_writer(path, newline="") as handle:
        writer = csv.writer(handle, lineterminator="\n")
        writer.writerow(header)
        for key in sorted(values):
            writer.writerow([key, values[key]])


@dataclass(slots=True)
class _Trade:
    seller: str
    buyer: str
    collection: str
    token_id: int
    price: Decimal
    wash: bool


@dataclass(slots=True)
class _Group:
    timing: TimingSpec | None
    instances: list[list[_Trade]] = field(default_factory=list)


class ScenarioGenerator:
    """Builds one corpus; output depends only on the ScenarioSpec."""

    def __init__(self, spec: ScenarioSpec):
        self.spec = spec
        self.rng = np.random.default_rng(spec.seed)
        self.node_truth: dict[str, str] = {}
        self._counters: dict[str, int] = {}

    def generate(self) -> SyntheticCorpus:
        groups = [self._organic(organic) for organic in self.spec.organic]
        groups.extend(self._planted(planted) for planted in self.spec.planted)
        timed = self._schedule(groups)
        timed.sort(key=lambda item: (item[0], item[1], item[2]))
        records: list[TradeRecord] = []
        trade_truth: dict[str, str] = {}
        for index, (timestamp, _group, _position, trade) in enumerate(timed):
            record = TradeRecord(
                block_number=self.spec.start_block + index,
                timestamp=normalize_timestamp(timestamp),
                tx_hash="0x" + self._digest("tx", index),
                seller=trade.seller,
                buyer=trade.buyer,
                collection=trade.collection,
                token_id=trade.token_id,
                price_eth=normalize_price(price_to_wei(trade.price)),
                market=self.spec.market,
            )
            records.append(record)
            trade_truth[record.trade_id] = WASH if trade.wash else ORGANIC
        corpus = SyntheticCorpus(records, trade_truth, dict(sorted(self.node_truth.items())))
        logger.info(
            "Generated %d trades (%d planted wash) over %d addresses",
            len(records),
            corpus.wash_trades,
            len(corpus.node_truth),
        )
        return corpus

    def _digest(self, kind: str, number: int) -> str:
        return hashlib.sha256(f"{self.spec.seed}:{kind}:{number}".encode()).hexdigest()

    def _address(self, kind: str) -> str:
        number = self._counters.get(kind, 0)
        self._counters[kind] = number + 1
        return "0x" + self._digest(kind, number)[:40]

    def _label(self, address: str, label: str) -> str:
        self.node_truth[address] = label
        return address

    def _organic(self, organic: OrganicSpec) -> _Group:
        group = _Group(organic.timing)
        if not organic.n_trades:
            return group
        collection = self._address("collection")
        pool = [self._label(self._address("trader"), "clean") for _ in range(organic.n_traders)]
        chains: list[list[_Trade]] = [[] for _ in range(organic.n_tokens)]
        owners = [pool[token % len(pool)] for token in range(organic.n_tokens)]
        for number in range(organic.n_trades):
            token = number % organic.n_tokens
            seller = owners[token]
            buyer = self._organic_buyer(seller, pool)
            price = organic.price.draw(self.rng)
            chains[token].append(_Trade(seller, buyer, collection, token, price, False))
            owners[token] = buyer
        group.instances = [chain for chain in chains if chain]
        return group

    def _organic_buyer(self, seller: str, pool: Sequence[str]) -> str:
        if self.spec.hard_mode and len(pool) > 1:
            candidate = pool[int(self.rng.integers(len(pool)))]
            if candidate != seller:
                return candidate
        return self._label(self._address("buyer"), "clean")

    def _planted(self, planted: PlantedSpec) -> _Group:
        group = _Group(planted.timing)
        for _ in range(planted.count):
            price = planted.price.draw(self.rng)
            if planted.pattern == "hub":
                group.instances.append(self._hub(planted.size, price))
            else:
                size = {"self_loop": 1, "dyad": 2, "triad": 3}.get(planted.pattern, planted.k)
                group.instances.append(self._cycle(size, price))
        return group

    def _cycle(self, size: int, price: Decimal) -> list[_Trade]:
        label = "wash_node" if size <= 3 else "scc_wash_node"
        members = [self._label(self._address("wash"), label) for _ in range(size)]
        collection = self._address("collection")
        return [
            _Trade(members[i], members[(i + 1) % size], collection, 0, price, True)
            for i in range(size)
        ]

    def _hub(self, size: int, price: Decimal) -> list[_Trade]:
        """Half self-trades on one token, half one-way sales of fresh tokens to fresh buyers."""

        excluded = size > self.spec.omega
        hub = self._label(self._address("hub"), "in_node" if excluded else "wash_node")
        collection = self._address("collection")
        loops = math.ceil(size / 2)
        trades = [_Trade(hub, hub, collection, 0, price, not excluded) for _ in range(loops)]
        for token in range(1, size - loops + 1):
            buyer = self._label(self._address("buyer"), "clean")
            trades.append(_Trade(hub, buyer, collection, token, price, False))
        return trades

    def _schedule(self, groups: Sequence[_Group]) -> list[tuple[int, int, int, _Trade]]:
        """Interleave instances (keeping each one's order) and attach timestamps."""

        start = to_epoch_seconds(self.spec.start)
        timed: list[tuple[int, int, int, _Trade]] = []
        flowing = [
            (index, instance)
            for index, group in enumerate(groups)
            if group.timing is None
            for instance in group.instances
        ]
        for position, (index, trade) in enumerate(self._interleave(flowing)):
            moment = start + position * self.spec.block_interval_seconds
            timed.append((moment, index, position, trade))
        for index, group in enumerate(groups):
            if group.timing is None or not group.instances:
                continue
            ordered = list(self._interleave([(index, instance) for instance in group.instances]))
            draws = self.rng.integers(group.timing.start, group.timing.end, size=len(ordered))
            stamps = np.sort(draws)
            for position, ((_, trade), stamp) in enumerate(zip(ordered, stamps, strict=True)):
                timed.append((int(stamp), index, position, trade))
        return timed

    def _interleave(
        self, instances: Sequence[tuple[int, list[_Trade]]]
    ) -> list[tuple[int, _Trade]]:
        if not instances:
            return []
        slots = np.repeat(np.arange(len(instances)), [len(instance) for _, instance in instances])
        order = self.rng.permutation(slots)
        cursors = [0] * len(instances)
        merged: list[tuple[int, _Trade]] = []
        for slot in order.tolist():
            index, instance = instances[slot]
            merged.append((index, instance[cursors[slot]]))
            cursors[slot] += 1
        return merged


def generate(spec: ScenarioSpec) -> SyntheticCorpus:
    return ScenarioGenerator(spec).generate()
