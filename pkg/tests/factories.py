"""Record builders shared by the test modules."""
from __future__ import annotations

import itertools
from datetime import datetime, timedelta, timezone
from decimal import Decimal

import numpy as np

from washgraph.ingest import TradeRecord

BASE_TIME = datetime(2022, 1, 10, tzinfo=timezone.utc)
COLLECTION = "0x" + "c0" * 20

_blocks = itertools.count(15_000_000)


def addr(name: str) -> str:
    return "0x" + name.encode().hex().rjust(40, "0")


def trade(
    seller: str,
    buyer: str,
    *,
    token: int = 0,
    price: str = "1",
    market: str = "looksrare",
    when: datetime | None = None,
    collection: str = COLLECTION,
) -> TradeRecord:
    block = next(_blocks)
    return TradeRecord(
        block_number=block,
        timestamp=when or BASE_TIME + timedelta(seconds=12 * (block - 15_000_000)),
        tx_hash="0x" + f"{block:064x}",
        seller=addr(seller),
        buyer=addr(buyer),
        collection=collection,
        token_id=token,
        price_eth=Decimal(price),
        market=market,
    )


def cycle(*names: str, token: int = 0, price: str = "1") -> list[TradeRecord]:
    """names[0] -> names[1] -> ... -> names[0] on one token."""

    return [
        trade(names[i], names[(i + 1) % len(names)], token=token, price=price)
        for i in range(len(names))
    ]


def random_trades(
    rng: np.random.Generator,
    *,
    n_nodes: int,
    n_trades: int,
    n_tokens: int = 3,
    prices: tuple[str, ...] = ("1", "1", "2", "0.5"),
) -> list[TradeRecord]:
    names = [f"n{i:02d}" for i in range(n_nodes)]
    return [
        trade(
            names[int(rng.integers(n_nodes))],
            names[int(rng.integers(n_nodes))],
            token=int(rng.integers(n_tokens)),
            price=prices[int(rng.integers(len(prices)))],
        )
        for _ in range(n_trades)
    ]
