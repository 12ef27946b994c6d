from __future__ import annotations

from decimal import Decimal
from pathlib import Path

import pytest
from hypothesis import given
from hypothesis import strategies as st

from washgraph.errors import (
    DuplicateTradeError,
    InputNotFoundError,
    MalformedRowError,
    OutOfRangeError,
    SchemaMismatchError,
)
from washgraph.ingest import (
    CSV_HEADER,
    GENESIS_TIMESTAMP,
    IngestOptions,
    load_records,
    normalize_price,
    normalize_timestamp,
    parse_record_file,
    price_to_wei,
    write_records,
)

SELLER = "0x" + "AB" * 20
BUYER = "0x" + "cd" * 20
COLLECTION = "0x" + "ef" * 20


def row(
    *,
    block: int = 14_000_000,
    ts: int = 1_650_000_000,
    tx: int = 1,
    seller: str = SELLER,
    buyer: str = BUYER,
    token: str = "7",
    price: str = "1500000000000000000",
    market: str = "LooksRare",
) -> str:
    return ",".join(
        [str(block), str(ts), "0x" + f"{tx:064x}", seller, buyer, COLLECTION, token, price, market]
    )


def write_csv(path: Path, *rows: str) -> Path:
    path.write_text("\n".join([",".join(CSV_HEADER), *rows]) + "\n", encoding="utf-8")
    return path


def test_parses_and_normalises_a_row(tmp_path: Path) -> None:
    records, stats = parse_record_file(write_csv(tmp_path / "t.csv", row()))
    assert stats.rows_accepted == 1
    (record,) = records
    assert record.seller == SELLER.lower()
    assert record.price_eth == Decimal("1.5")
    assert record.market == "looksrare"
    assert record.timestamp.tzinfo is not None
    assert record.trade_id == f"{record.tx_hash}:{COLLECTION}:7"


def test_largest_wei_amount_is_exact() -> None:
    wei = 2**256 - 1
    assert price_to_wei(normalize_price(wei)) == wei


@given(st.integers(min_value=0, max_value=2**256 - 1))
def test_price_conversion_is_lossless(wei: int) -> None:
    assert price_to_wei(normalize_price(wei)) == wei


def test_timestamp_before_genesis_is_out_of_range() -> None:
    with pytest.raises(OutOfRangeError):
        normalize_timestamp(GENESIS_TIMESTAMP - 1)
    assert normalize_timestamp(GENESIS_TIMESTAMP).year == 2015


@pytest.mark.parametrize(
    ("bad_row", "reason"),
    [
        (row() + ",extra", "bad_field_count"),
        (row(price="-5"), "negative_price"),
        (row(price="1.5"), "bad_price"),
        (row(seller="0x1234"), "bad_seller"),
        (row(ts=GENESIS_TIMESTAMP - 10), "timestamp_out_of_range"),
        (row(token="abc"), "bad_token_id"),
    ],
)
def test_lenient_mode_counts_rejections(tmp_path: Path, bad_row: str, reason: str) -> None:
    records, stats = parse_record_file(write_csv(tmp_path / "t.csv", bad_row, row(tx=2)))
    assert len(records) == 1
    assert stats.rows_rejected == 1
    assert stats.reject_reasons[reason] == 1


def test_strict_mode_raises_with_line_number(tmp_path: Path) -> None:
    path = write_csv(tmp_path / "t.csv", row(), row(tx=2, price="-1"))
    with pytest.raises(MalformedRowError) as excinfo:
        parse_record_file(path, IngestOptions(strict=True))
    assert excinfo.value.line_no == 3
    assert excinfo.value.exit_code == 3


def test_header_mismatch(tmp_path: Path) -> None:
    path = tmp_path / "t.csv"
    path.write_text("block,ts\n1,2\n", encoding="utf-8")
    with pytest.raises(SchemaMismatchError):
        parse_record_file(path)


def test_missing_file_names_the_path(tmp_path: Path) -> None:
    missing = tmp_path / "nope.csv"
    with pytest.raises(InputNotFoundError) as excinfo:
        load_records([missing])
    assert str(missing) in str(excinfo.value)
    assert excinfo.value.exit_code == 2


def test_identical_duplicates_are_dropped(tmp_path: Path) -> None:
    records, stats = parse_record_file(write_csv(tmp_path / "t.csv", row(), row()))
    assert len(records) == 1
    assert stats.reject_reasons["duplicate"] == 1


def test_conflicting_duplicates_raise(tmp_path: Path) -> None:
    with pytest.raises(DuplicateTradeError):
        parse_record_file(write_csv(tmp_path / "t.csv", row(), row(price="2")))


def test_block_with_two_timestamps_is_rejected(tmp_path: Path) -> None:
    path = write_csv(tmp_path / "t.csv", row(), row(tx=2, ts=1_650_000_001))
    records, stats = parse_record_file(path)
    assert len(records) == 1
    assert stats.reject_reasons["block_timestamp_mismatch"] == 1


def test_blank_lines_are_ignored(tmp_path: Path) -> None:
    path = write_csv(tmp_path / "t.csv", row(), "", row(tx=2))
    records, stats = parse_record_file(path)
    assert len(records) == 2
    assert stats.rows_read == 2


def write_bytes(path: Path, *rows: bytes) -> Path:
    path.write_bytes(b"\n".join([",".join(CSV_HEADER).encode(), *rows]) + b"\n")
    return path


def test_undecodable_bytes_are_rejected(tmp_path: Path) -> None:
    path = write_bytes(
        tmp_path / "t.csv",
        row().encode(),
        b"\xff\xfe,bad",
        row(tx=2).encode() + b"\xff",
        row(tx=3).encode(),
    )
    records, stats = parse_record_file(path)
    assert len(records) == 2
    assert stats.reject_reasons == {"bad_field_count": 1, "bad_encoding": 1}
    with pytest.raises(MalformedRowError) as excinfo:
        parse_record_file(path, IngestOptions(strict=True))
    assert excinfo.value.line_no == 3


def test_oversized_field_is_rejected(tmp_path: Path) -> None:
    path = write_csv(tmp_path / "t.csv", row(), row(tx=2, token="9" * 200_000), row(tx=3))
    records, stats = parse_record_file(path)
    assert [r.token_id for r in records] == [7, 7]
    assert stats.reject_reasons["bad_csv"] == 1
    assert stats.rows_read == 3
    with pytest.raises(MalformedRowError):
        parse_record_file(path, IngestOptions(strict=True))


def test_same_trade_with_another_timestamp_is_a_conflict(tmp_path: Path) -> None:
    path = write_csv(tmp_path / "t.csv", row(), row(ts=1_650_000_099))
    with pytest.raises(DuplicateTradeError):
        parse_record_file(path)


def test_timestamps_must_not_go_back_across_blocks(tmp_path: Path) -> None:
    path = write_csv(
        tmp_path / "t.csv",
        row(block=14_000_000, ts=1_682_000_000),
        row(block=14_000_001, ts=1_650_000_000, tx=2),
        row(block=14_000_002, ts=1_682_000_012, tx=3),
    )
    records, stats = load_records([path])
    assert [r.block_number for r in records] == [14_000_000, 14_000_002]
    assert stats.reject_reasons["timestamp_regression"] == 1
    assert stats.rows_accepted == 2
    with pytest.raises(MalformedRowError) as excinfo:
        load_records([path], IngestOptions(strict=True))
    assert excinfo.value.reason.endswith("timestamp_regression")


def test_block_times_are_checked_across_files(tmp_path: Path) -> None:
    first = write_csv(tmp_path / "a.csv", row())
    second = write_csv(tmp_path / "b.csv", row(tx=2, ts=1_650_000_001))
    records, stats = load_records([first, second])
    assert len(records) == 1
    assert stats.reject_reasons["block_timestamp_mismatch"] == 1


@pytest.mark.parametrize("threads", [1, 3])
def test_multi_file_merge_dedups_and_sorts(tmp_path: Path, threads: int) -> None:
    first = write_csv(tmp_path / "a.csv", row(block=14_000_002, ts=1_650_000_024, tx=3), row())
    second = write_csv(tmp_path / "b.csv", row(), row(block=14_000_001, ts=1_650_000_012, tx=2))
    records, stats = load_records([first, second], threads=threads)
    assert [r.block_number for r in records] == [14_000_000, 14_000_001, 14_000_002]
    assert stats.reject_reasons["duplicate"] == 1
    assert stats.rows_accepted == 3


def test_written_records_parse_back_identically(tmp_path: Path) -> None:
    source = write_csv(
        tmp_path / "in.csv",
        row(),
        row(block=14_000_001, ts=1_650_000_012, tx=2, price="0", market="x2y2"),
        row(block=14_000_002, ts=1_650_000_024, tx=3, price=str(2**200)),
    )
    records, _ = parse_record_file(source)
    out = tmp_path / "out.csv"
    write_records(out, records)
    again, _ = parse_record_file(out)
    assert again == records
    write_records(tmp_path / "out2.csv", again)
    assert (tmp_path / "out2.csv").read_bytes() == out.read_bytes()
