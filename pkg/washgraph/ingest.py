"""CSV ingestion and normalisation of marketplace sale records."""
from __future__ import annotations

import csv
import logging
import re
import sys
from collections import Counter
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from datetime import datetime, timedelta, timezone
from decimal import ROUND_HALF_EVEN, Context, Decimal, localcontext
from functools import partial
from pathlib import Path
from typing import Any, Iterable, Iterator, Sequence

from .atomic import atomic_writer
from .errors import (
    DuplicateTradeError,
    InputNotFoundError,
    MalformedRowError,
    OutOfRangeError,
    SchemaMismatchError,
)

logger = logging.getLogger(__name__)

CSV_HEADER = (
    "block_number",
    "timestamp",
    "tx_hash",
    "seller",
    "buyer",
    "collection",
    "token_id",
    "price_wei",
    "market",
)
WEI_DECIMALS = 18
GENESIS_TIMESTAMP = 1438214400  # 2015-07-30T00:00:00Z
MAX_TIMESTAMP = 2**63

# Wide enough for 256-bit wei amounts and sums of millions of them.
ETH_CONTEXT = Context(prec=96, rounding=ROUND_HALF_EVEN)

KNOWN_MARKETS = {
    "opensea": "OpenSea",
    "blur": "Blur",
    "looksrare": "LooksRare",
    "x2y2": "X2Y2",
}

_EPOCH = datetime(1970, 1, 1, tzinfo=timezone.utc)
_ADDRESS_RE = re.compile(r"0x[0-9a-fA-F]{40}")
_HASH_RE = re.compile(r"0x[0-9a-fA-F]{64}")
_MARKET_RE = re.compile(r"[a-z0-9][a-z0-9_.-]*")
_NEGATIVE_RE = re.compile(r"-[0-9]+")


@dataclass(frozen=True, slots=True)
class TradeRecord:
    """One normalised marketplace sale."""

    block_number: int
    timestamp: datetime
    tx_hash: str
    seller: str
    buyer: str
    collection: str
    token_id: int
    price_eth: Decimal
    market: str
    trade_id: str = field(init=False, repr=False, compare=False)

    def __post_init__(self) -> None:
        object.__setattr__(self, "trade_id", f"{self.tx_hash}:{self.collection}:{self.token_id}")

    @property
    def token_key(self) -> tuple[str, int]:
        return (self.collection, self.token_id)

    @property
    def is_self_trade(self) -> bool:
        return self.seller == self.buyer

    def sort_key(self) -> tuple[int, str, str, int]:
        return (self.block_number, self.tx_hash, self.collection, self.token_id)

    def to_row(self) -> list[str]:
        return [
            str(self.block_number),
            str(to_epoch_seconds(self.timestamp)),
            self.tx_hash,
            self.seller,
            self.buyer,
            self.collection,
            str(self.token_id),
            str(price_to_wei(self.price_eth)),
            self.market,
        ]


@dataclass(slots=True)
class IngestOptions:
    strict: bool = False
    encoding: str = "utf-8"


@dataclass(slots=True)
class IngestStats:
    rows_read: int = 0
    rows_accepted: int = 0
    rows_rejected: int = 0
    reject_reasons: Counter[str] = field(default_factory=Counter)

    def reject(self, reason: str) -> None:
        self.rows_rejected += 1
        self.reject_reasons[reason] += 1

    def merge(self, other: IngestStats) -> IngestStats:
        return IngestStats(
            rows_read=self.rows_read + other.rows_read,
            rows_accepted=self.rows_accepted + other.rows_accepted,
            rows_rejected=self.rows_rejected + other.rows_rejected,
            reject_reasons=self.reject_reasons + other.reject_reasons,
        )

    def to_json(self) -> dict[str, Any]:
        return {
            "rows_read": self.rows_read,
            "rows_accepted": self.rows_accepted,
            "rows_rejected": self.rows_rejected,
            "reject_reasons": dict(sorted(self.reject_reasons.items())),
        }


class _RowRejected(Exception):
    def __init__(self, reason: str):
        super().__init__(reason)
        self.reason = reason


def normalize_price(raw_wei: int) -> Decimal:
    """Convert an integer wei amount to ETH without leaving decimal arithmetic."""

    # string construction is exact under any context
    return Decimal(f"{raw_wei}E-{WEI_DECIMALS}")


def price_to_wei(price_eth: Decimal) -> int:
    with localcontext(ETH_CONTEXT):
        return int(price_eth.scaleb(WEI_DECIMALS))


def normalize_timestamp(unix_seconds: int) -> datetime:
    if not GENESIS_TIMESTAMP <= unix_seconds < MAX_TIMESTAMP:
        msg = f"Timestamp {unix_seconds} is outside [{GENESIS_TIMESTAMP}, 2^63)"
        raise OutOfRangeError(msg)
    try:
        return _EPOCH + timedelta(seconds=unix_seconds)
    except OverflowError as exc:
        msg = f"Timestamp {unix_seconds} cannot be represented as a calendar date"
        raise OutOfRangeError(msg) from exc


def to_epoch_seconds(moment: datetime) -> int:
    return (moment - _EPOCH) // timedelta(seconds=1)


def format_eth(value: Decimal) -> str:
    """Plain decimal text without exponent or trailing zeros."""

    if value == 0:
        return "0"
    text = format(value, "f")
    if "." in text:
        text = text.rstrip("0").rstrip(".")
    return text


def eth_sum(values: Iterable[Decimal]) -> Decimal:
    with localcontext(ETH_CONTEXT):
        return sum(values, Decimal(0))


def market_display(market: str) -> str:
    return KNOWN_MARKETS.get(market, market)


def market_order(market: str) -> tuple[int, str]:
    known = list(KNOWN_MARKETS)
    if market in KNOWN_MARKETS:
        return (known.index(market), market)
    return (len(known), market)


class RecordParser:
    """Streams validated TradeRecords out of one CSV file."""

    def __init__(self, options: IngestOptions | None = None):
        self.options = options or IngestOptions()

    def iter_file(self, path: Path, stats: IngestStats) -> Iterator[TradeRecord]:
        path = Path(path)
        if not path.is_file():
            raise InputNotFoundError(path)
        seen: dict[str, TradeRecord] = {}
        block_times: dict[int, datetime] = {}
        with path.open(
            "r", encoding=self.options.encoding, errors="surrogateescape", newline=""
        ) as handle:
            reader = csv.reader(handle)
            try:
                header = next(reader, None)
            except csv.Error as exc:
                msg = f"{path}: unreadable header ({exc})"
                raise SchemaMismatchError(msg) from exc
            if header is None or tuple(name.strip() for name in header) != CSV_HEADER:
                msg = f"{path}: header {header!r} does not match {','.join(CSV_HEADER)}"
                raise SchemaMismatchError(msg)
            while True:
                try:
                    row = next(reader)
                except StopIteration:
                    break
                except csv.Error:
                    stats.rows_read += 1
                    self._reject(stats, reader.line_num, "bad_csv")
                    continue
                if not row:
                    continue
                stats.rows_read += 1
                try:
                    record = self._parse_row(row, self.options.encoding)
                except _RowRejected as exc:
                    self._reject(stats, reader.line_num, exc.reason)
                    continue
                previous = seen.get(record.trade_id)
                if previous is not None:
                    if previous != record:
                        msg = f"{path}:{reader.line_num}: conflicting rows for {record.trade_id}"
                        raise DuplicateTradeError(msg)
                    stats.reject("duplicate")
                    continue
                known_time = block_times.setdefault(record.block_number, record.timestamp)
                if known_time != record.timestamp:
                    self._reject(stats, reader.line_num, "block_timestamp_mismatch")
                    continue
                seen[record.trade_id] = record
                stats.rows_accepted += 1
                yield record

    def _reject(self, stats: IngestStats, line_no: int, reason: str) -> None:
        stats.reject(reason)
        if self.options.strict:
            raise MalformedRowError(line_no, reason)

    @staticmethod
    def _parse_row(row: Sequence[str], encoding: str) -> TradeRecord:
        if len(row) != len(CSV_HEADER):
            raise _RowRejected("bad_field_count")
        try:
            "".join(row).encode(encoding)
        except UnicodeEncodeError as exc:
            # undecodable input bytes come back as lone surrogates
            raise _RowRejected("bad_encoding") from exc
        (
            block_raw,
            ts_raw,
            tx_raw,
            seller_raw,
            buyer_raw,
            coll_raw,
            token_raw,
            price_raw,
            market_raw,
        ) = (value.strip() for value in row)
        block_number = _parse_uint(block_raw, "bad_block_number")
        unix_seconds = _parse_uint(ts_raw, "bad_timestamp")
        try:
            timestamp = normalize_timestamp(unix_seconds)
        except OutOfRangeError as exc:
            raise _RowRejected("timestamp_out_of_range") from exc
        if not _HASH_RE.fullmatch(tx_raw):
            raise _RowRejected("bad_tx_hash")
        seller = _parse_address(seller_raw, "bad_seller")
        buyer = _parse_address(buyer_raw, "bad_buyer")
        collection = _parse_address(coll_raw, "bad_collection")
        token_id = _parse_uint(token_raw, "bad_token_id")
        if _NEGATIVE_RE.fullmatch(price_raw):
            raise _RowRejected("negative_price")
        price_wei = _parse_uint(price_raw, "bad_price")
        market = market_raw.lower()
        if not _MARKET_RE.fullmatch(market):
            raise _RowRejected("bad_market")
        return TradeRecord(
            block_number=block_number,
            timestamp=timestamp,
            tx_hash=tx_raw.lower(),
            seller=seller,
            buyer=buyer,
            collection=collection,
            token_id=token_id,
            price_eth=normalize_price(price_wei),
            market=sys.intern(market),
        )


def _parse_uint(raw: str, reason: str) -> int:
    if not (raw.isascii() and raw.isdigit()):
        raise _RowRejected(reason)
    return int(raw)


def _parse_address(raw: str, reason: str) -> str:
    if not _ADDRESS_RE.fullmatch(raw):
        raise _RowRejected(reason)
    return sys.intern(raw.lower())


def parse_record_file(
    path: Path, options: IngestOptions | None = None
) -> tuple[list[TradeRecord], IngestStats]:
    stats = IngestStats()
    records = list(RecordParser(options).iter_file(path, stats))
    logger.info(
        "%s: read %d rows, accepted %d, rejected %d",
        path,
        stats.rows_read,
        stats.rows_accepted,
        stats.rows_rejected,
    )
    return records, stats


def merge_records(
    parts: Iterable[tuple[list[TradeRecord], IngestStats]],
    options: IngestOptions | None = None,
) -> tuple[list[TradeRecord], IngestStats]:
    """Merge per-file results, drop cross-file duplicates and restore canonical order.

    Timestamps must not decrease with the block number; a row whose time is earlier
    than that of a lower block is rejected as ``timestamp_regression``.
    """

    strict = (options or IngestOptions()).strict
    pieces = list(parts)
    stats = IngestStats()
    for _, part_stats in pieces:
        stats = stats.merge(part_stats)
    if len(pieces) == 1:
        candidates = pieces[0][0]
    else:
        merged: dict[str, TradeRecord] = {}
        for records, _ in pieces:
            for record in records:
                previous = merged.get(record.trade_id)
                if previous is None:
                    merged[record.trade_id] = record
                    continue
                if previous != record:
                    msg = f"Conflicting rows across input files for {record.trade_id}"
                    raise DuplicateTradeError(msg)
                stats.rows_accepted -= 1
                stats.reject("duplicate")
        candidates = list(merged.values())
    ordered = sorted(candidates, key=TradeRecord.sort_key)
    ordered = _enforce_block_times(ordered, stats, strict)
    if stats.rows_rejected:
        logger.warning(
            "Skipped %d of %d rows: %s",
            stats.rows_rejected,
            stats.rows_read,
            dict(sorted(stats.reject_reasons.items())),
        )
    return ordered, stats


def _enforce_block_times(
    ordered: list[TradeRecord], stats: IngestStats, strict: bool
) -> list[TradeRecord]:
    kept: list[TradeRecord] = []
    block: int | None = None
    block_time: datetime | None = None
    for record in ordered:
        if record.block_number == block:
            reason = None if record.timestamp == block_time else "block_timestamp_mismatch"
        elif block_time is not None and record.timestamp < block_time:
            reason = "timestamp_regression"
        else:
            block, block_time = record.block_number, record.timestamp
            reason = None
        if reason is None:
            kept.append(record)
            continue
        if strict:
            msg = f"block {record.block_number} ({record.trade_id}): {reason}"
            raise MalformedRowError(None, msg)
        stats.rows_accepted -= 1
        stats.reject(reason)
    return kept


def load_records(
    paths: Sequence[Path],
    options: IngestOptions | None = None,
    *,
    threads: int = 1,
) -> tuple[list[TradeRecord], IngestStats]:
    paths = [Path(path) for path in paths]
    for path in paths:
        if not path.is_file():
            raise InputNotFoundError(path)
    parse = partial(parse_record_file, options=options)
    if threads > 1 and len(paths) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            parts = list(pool.map(parse, paths))
    else:
        parts = [parse(path) for path in paths]
    return merge_records(parts, options)


def write_records(path: Path, records: Iterable[TradeRecord]) -> None:
    """Write records in canonical form (sorted input stays byte-stable)."""

    with atomic_writer(Path(path), newline="") as handle:
        writer = csv.writer(handle, lineterminator="\n")
        writer.writerow(CSV_HEADER)
        for record in records:
            writer.writerow(record.to_row())
