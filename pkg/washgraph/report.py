"""Market statistics, monthly wash-volume series and trading-reward attribution."""
from __future__ import annotations

import json
import logging
from collections import defaultdict
from dataclasses import dataclass, field
from datetime import date
from decimal import ROUND_DOWN, ROUND_HALF_UP, Decimal, localcontext
from enum import StrEnum
from fractions import Fraction
from pathlib import Path
from typing import Any, Iterable, Mapping, Sequence

from .detector import WASH_LABELS, WashFinding, parse_rational
from .errors import ConfigError, MismatchedInputsError, ZeroMarketVolumeError
from .ingest import ETH_CONTEXT, TradeRecord, eth_sum, market_display, market_order
from .paths import DEFAULT_REWARDS_PATH

logger = logging.getLogger(__name__)

PCT_QUANTUM = Decimal("0.1")
ETH_QUANTUM = Decimal("0.1")
TOKEN_QUANTUM = Decimal("0.000001")
ALL_MARKETS = "all"


def percentage(part: Decimal | int, whole: Decimal | int) -> Decimal:
    """100 * part / whole, half-up to one decimal; 0.0 when whole is zero."""

    if whole == 0:
        return Decimal("0.0")
    with localcontext(ETH_CONTEXT):
        ratio = Decimal(100) * Decimal(part) / Decimal(whole)
        return ratio.quantize(PCT_QUANTUM, rounding=ROUND_HALF_UP)


def round_eth(value: Decimal) -> Decimal:
    with localcontext(ETH_CONTEXT):
        return value.quantize(ETH_QUANTUM, rounding=ROUND_HALF_UP)


@dataclass(frozen=True, slots=True)
class MarketStats:
    market: str
    total_tx: int
    wash_tx: int
    total_volume_eth: Decimal
    wash_volume_eth: Decimal

    def __post_init__(self) -> None:
        if self.wash_tx > self.total_tx or self.wash_volume_eth > self.total_volume_eth:
            msg = f"Wash subset exceeds totals for market {self.market}"
            raise MismatchedInputsError(msg)

    @classmethod
    def from_totals(
        cls,
        market: str,
        total_tx: int,
        wash_tx: int,
        total_volume_eth: Decimal | str,
        wash_volume_eth: Decimal | str,
    ) -> MarketStats:
        return cls(market, total_tx, wash_tx, Decimal(total_volume_eth), Decimal(wash_volume_eth))

    @property
    def wash_tx_pct(self) -> Decimal:
        return percentage(self.wash_tx, self.total_tx)

    @property
    def wash_volume_pct(self) -> Decimal:
        return percentage(self.wash_volume_eth, self.total_volume_eth)

    def merge(self, other: MarketStats, market: str | None = None) -> MarketStats:
        return MarketStats(
            market=market or self.market,
            total_tx=self.total_tx + other.total_tx,
            wash_tx=self.wash_tx + other.wash_tx,
            total_volume_eth=eth_sum((self.total_volume_eth, other.total_volume_eth)),
            wash_volume_eth=eth_sum((self.wash_volume_eth, other.wash_volume_eth)),
        )

    def to_json(self) -> dict[str, Any]:
        return {
            "market": self.market,
            "total_tx": self.total_tx,
            "wash_tx": self.wash_tx,
            "wash_tx_pct": float(self.wash_tx_pct),
            "total_volume_eth": float(round_eth(self.total_volume_eth)),
            "wash_volume_eth": float(round_eth(self.wash_volume_eth)),
            "wash_volume_pct": float(self.wash_volume_pct),
        }

    def to_row(self) -> list[str]:
        return [
            self.market,
            str(self.total_tx),
            str(self.wash_tx),
            str(self.wash_tx_pct),
            str(round_eth(self.total_volume_eth)),
            str(round_eth(self.wash_volume_eth)),
            str(self.wash_volume_pct),
        ]


STATS_HEADER = (
    "market",
    "total_tx",
    "wash_tx",
    "wash_tx_pct",
    "total_volume_eth",
    "wash_volume_eth",
    "wash_volume_pct",
)


def aggregate_market_stats(
    records: Iterable[TradeRecord], finding: WashFinding
) -> list[MarketStats]:
    flagged = finding.flagged_trade_ids
    hits: set[str] = set()
    counts: dict[str, list[int]] = defaultdict(lambda: [0, 0])
    volumes: dict[str, list[Decimal]] = defaultdict(list)
    wash_volumes: dict[str, list[Decimal]] = defaultdict(list)
    for record in records:
        trade_id = record.trade_id
        counts[record.market][0] += 1
        volumes[record.market].append(record.price_eth)
        if trade_id in flagged:
            hits.add(trade_id)
            counts[record.market][1] += 1
            wash_volumes[record.market].append(record.price_eth)
    missing = flagged - hits
    if missing:
        msg = f"Finding flags {len(missing)} trades absent from the records, e.g. {min(missing)}"
        raise MismatchedInputsError(msg)
    return [
        MarketStats(
            market=market,
            total_tx=counts[market][0],
            wash_tx=counts[market][1],
            total_volume_eth=eth_sum(volumes[market]),
            wash_volume_eth=eth_sum(wash_volumes[market]),
        )
        for market in sorted(counts, key=market_order)
    ]


def grand_total(stats: Sequence[MarketStats]) -> MarketStats:
    total = MarketStats(ALL_MARKETS, 0, 0, Decimal(0), Decimal(0))
    for item in stats:
        total = total.merge(item, market=ALL_MARKETS)
    return total


@dataclass(frozen=True, slots=True)
class MonthPoint:
    month: date
    total_volume_eth: Decimal
    wash_volume_eth: Decimal

    @property
    def wash_pct(self) -> Decimal:
        return percentage(self.wash_volume_eth, self.total_volume_eth)

    def to_json(self) -> dict[str, Any]:
        return {
            "month": self.month.strftime("%Y-%m"),
            "total_volume_eth": float(round_eth(self.total_volume_eth)),
            "wash_volume_eth": float(round_eth(self.wash_volume_eth)),
            "wash_pct": float(self.wash_pct),
        }

    def to_row(self) -> list[str]:
        return [
            self.month.strftime("%Y-%m"),
            str(round_eth(self.total_volume_eth)),
            str(round_eth(self.wash_volume_eth)),
            str(self.wash_pct),
        ]


SERIES_HEADER = ("month", "total_volume_eth", "wash_volume_eth", "wash_pct")


@dataclass(slots=True)
class MonthlySeries:
    market: str
    points: list[MonthPoint] = field(default_factory=list)

    def peak(self) -> MonthPoint | None:
        return max(self.points, key=lambda p: (p.wash_pct, p.month), default=None)

    def trough(self) -> MonthPoint | None:
        return min(self.points, key=lambda p: (p.wash_pct, p.month), default=None)

    def to_json(self) -> dict[str, Any]:
        return {
            "market": self.market,
            "points": [point.to_json() for point in self.points],
        }


def monthly_series(
    records: Iterable[TradeRecord], finding: WashFinding, market: str | None = None
) -> MonthlySeries:
    flagged = finding.flagged_trade_ids
    totals: dict[date, list[Decimal]] = defaultdict(list)
    washes: dict[date, list[Decimal]] = defaultdict(list)
    for record in records:
        if market is not None and record.market != market:
            continue
        month = date(record.timestamp.year, record.timestamp.month, 1)
        totals[month].append(record.price_eth)
        if record.trade_id in flagged:
            washes[month].append(record.price_eth)
    series = MonthlySeries(market=market or ALL_MARKETS)
    if not totals:
        return series
    current, last = min(totals), max(totals)
    while current <= last:
        series.points.append(
            MonthPoint(
                month=current,
                total_volume_eth=eth_sum(totals.get(current, [])),
                wash_volume_eth=eth_sum(washes.get(current, [])),
            )
        )
        current = _next_month(current)
    return series


def _next_month(month: date) -> date:
    if month.month == 12:
        return date(month.year + 1, 1, 1)
    return date(month.year, month.month + 1, 1)


class Crediting(StrEnum):
    BOTH = "both"
    BUYER = "buyer"
    SELLER = "seller"


@dataclass(frozen=True, slots=True)
class RewardEstimate:
    user: str
    user_volume_eth: Decimal
    market_volume_eth: Decimal
    daily_tokens: Decimal
    reward_tokens: Decimal


def estimate_rewards(
    day_trades: Sequence[TradeRecord],
    daily_tokens: Decimal,
    crediting: Crediting = Crediting.BOTH,
) -> list[RewardEstimate]:
    """Split one day's emission pro rata to credited volume.

    ``market_volume_eth`` is the credited total, so under both-sides
    crediting it is twice the traded volume. Rewards are allocated in
    whole 10^-6 token units by largest remainder, which keeps the day's
    sum within one unit of ``daily_tokens``.
    """

    days = {record.timestamp.date() for record in day_trades}
    markets = {record.market for record in day_trades}
    if len(days) > 1 or len(markets) > 1:
        msg = (
            "Reward estimation needs one day and one market, "
            f"got {len(days)} days / {len(markets)} markets"
        )
        raise ValueError(msg)
    credits: dict[str, list[Decimal]] = defaultdict(list)
    for record in day_trades:
        if crediting in (Crediting.BOTH, Crediting.SELLER):
            credits[record.seller].append(record.price_eth)
        if crediting in (Crediting.BOTH, Crediting.BUYER):
            credits[record.buyer].append(record.price_eth)
    volumes = {user: eth_sum(values) for user, values in credits.items()}
    market_volume = eth_sum(volumes.values())
    if market_volume <= 0:
        msg = "Market volume for the day is zero; rewards are undefined"
        raise ZeroMarketVolumeError(msg)

    with localcontext(ETH_CONTEXT):
        total_units = int((daily_tokens / TOKEN_QUANTUM).to_integral_value(rounding=ROUND_DOWN))
    users = sorted(volumes)
    denominator = Fraction(market_volume)
    shares = {user: total_units * Fraction(volumes[user]) / denominator for user in users}
    units = {user: int(shares[user]) for user in users}
    leftover = total_units - sum(units.values())
    by_remainder = sorted(users, key=lambda user: (-(shares[user] - units[user]), user))
    for user in by_remainder[:leftover]:
        units[user] += 1
    return [
        RewardEstimate(
            user=user,
            user_volume_eth=volumes[user],
            market_volume_eth=market_volume,
            daily_tokens=daily_tokens,
            reward_tokens=Decimal(units[user]).scaleb(-6),
        )
        for user in users
    ]


@dataclass(slots=True)
class EmissionSchedule:
    """Daily token emission per market as dated phases; each phase runs until the next."""

    market: str
    phases: list[tuple[date, Decimal]] = field(default_factory=list)

    @classmethod
    def from_file(
        cls, path: Path = DEFAULT_REWARDS_PATH, market: str = "looksrare"
    ) -> EmissionSchedule:
        try:
            data = json.loads(Path(path).read_text())
        except FileNotFoundError as exc:
            msg = f"Emission table not found: {path}"
            raise ConfigError(msg) from exc
        except json.JSONDecodeError as exc:
            msg = f"Emission table {path} is not valid JSON: {exc}"
            raise ConfigError(msg) from exc
        return cls.from_mapping(data.get("markets", {}), market)

    @classmethod
    def from_mapping(cls, markets: Mapping[str, Any], market: str) -> EmissionSchedule:
        entry = markets.get(market) or {}
        phases: list[tuple[date, Decimal]] = []
        for phase in entry.get("phases", []):
            try:
                start = date.fromisoformat(phase["from"])
                tokens = parse_rational(phase["daily_tokens"], f"{market} daily_tokens")
                phases.append((start, tokens))
            except (KeyError, ValueError, ArithmeticError) as exc:
                msg = f"Invalid emission phase for {market}: {phase!r}"
                raise ConfigError(msg) from exc
        return cls(market=market, phases=sorted(phases))

    def daily_tokens(self, day: date) -> Decimal | None:
        current: Decimal | None = None
        for start, tokens in self.phases:
            if start > day:
                break
            current = tokens
        return current


@dataclass(slots=True)
class DailyRewards:
    day: date
    market: str
    daily_tokens: Decimal
    estimates: list[RewardEstimate]
    wash_reward_tokens: Decimal

    @property
    def wash_reward_pct(self) -> Decimal:
        return percentage(self.wash_reward_tokens, self.daily_tokens)


def attribute_rewards(
    records: Iterable[TradeRecord],
    schedule: EmissionSchedule,
    *,
    crediting: Crediting = Crediting.BOTH,
    finding: WashFinding | None = None,
) -> list[DailyRewards]:
    """Estimate rewards day by day and the share that went to wash-labeled users."""

    by_day: dict[date, list[TradeRecord]] = defaultdict(list)
    for record in records:
        if record.market == schedule.market:
            by_day[record.timestamp.date()].append(record)
    results: list[DailyRewards] = []
    for day in sorted(by_day):
        tokens = schedule.daily_tokens(day)
        if tokens is None or tokens == 0:
            logger.info("No %s emission on %s; skipping", market_display(schedule.market), day)
            continue
        try:
            estimates = estimate_rewards(by_day[day], tokens, crediting)
        except ZeroMarketVolumeError:
            logger.warning("Zero %s volume on %s; skipping", market_display(schedule.market), day)
            continue
        wash = Decimal(0)
        if finding is not None:
            wash = eth_sum(
                estimate.reward_tokens
                for estimate in estimates
                if finding.label_of(estimate.user) in WASH_LABELS
            )
        results.append(DailyRewards(day, schedule.market, tokens, estimates, wash))
    return results
