from __future__ import annotations

from decimal import Decimal
from fractions import Fraction

import numpy as np
import pytest

from factories import addr, cycle, random_trades, trade
from washgraph.detector import (
    DetectionParams,
    NodeLabel,
    TradeReason,
    WashFinding,
    balance_drift,
    classify,
    filter_trans,
    get_trans_scc,
    get_trans_V,
    is_suspicious,
    returning_loops,
    scan_scc_loops,
    suspicious_nodes,
)
from washgraph.errors import ConfigError
from washgraph.graph import create_graph, motif_census
from washgraph.ingest import TradeRecord


def ids(records: list[TradeRecord]) -> set[str]:
    return {record.trade_id for record in records}


def test_drift_of_uneven_round_trip() -> None:
    graph = create_graph([trade("a", "b", price="1.0"), trade("b", "a", price="2.0")])
    assert balance_drift(list(graph.edges())) == Fraction(1, 3)
    assert get_trans_scc(graph, Decimal("0.05")) == set()
    assert get_trans_scc(graph, Decimal("0.34")) == {e.trade_id for e in graph.edges()}


def test_zero_volume_loop_has_no_drift() -> None:
    graph = create_graph(cycle("a", "b", price="0"))
    assert balance_drift(list(graph.edges())) == 0


@pytest.mark.parametrize("names", [("a", "b"), ("a", "b", "c"), ("a", "b", "c", "d", "e")])
def test_balanced_cycles_are_flagged(names: tuple[str, ...]) -> None:
    records = cycle(*names)
    assert get_trans_scc(create_graph(records), Decimal("0.05")) == ids(records)


def test_returning_loops_split_at_each_return() -> None:
    records = [trade("a", "b"), trade("b", "a"), trade("a", "c"), trade("c", "d"), trade("d", "c")]
    graph = create_graph(records)
    loops = returning_loops(graph.token_chain(records[0].token_key))
    assert [[e.trade_id for e in loop] for loop in loops] == [
        [records[0].trade_id, records[1].trade_id],
        [records[3].trade_id, records[4].trade_id],
    ]


def test_token_that_never_returns_is_not_a_loop() -> None:
    graph = create_graph([trade("a", "b", token=1), trade("b", "a", token=2)])
    assert get_trans_scc(graph, Decimal("1")) == set()


def test_back_and_forth_pair() -> None:
    records = cycle("a", "b")
    assert get_trans_V(create_graph(records), Decimal("0.05")) == ids(records)
    assert get_trans_V(create_graph([trade("a", "b")]), Decimal("0.05")) == set()


def test_back_and_forth_is_judged_per_token() -> None:
    alternating = [trade(s, b, price="2.0") for s, b in ["ab", "ba", "ab", "ba", "ab"]]
    single = trade("a", "b", token=1, price="0.1")
    flagged = get_trans_V(create_graph([*alternating, single]), Decimal("0.05"))
    assert flagged == ids(alternating)


def test_one_sided_volume_blocks_back_and_forth() -> None:
    # one return trade inside a long one-way run does not dominate the group volume
    records = [trade("a", "b", price="10"), trade("b", "a", price="0.1")]
    records += [trade("a", "b", price="0.1")]
    records += [trade("a", "b", price="10") for _ in range(3)]
    flagged = get_trans_V(create_graph(records), Decimal("0.05"))
    assert flagged == set()


def _motif_node() -> tuple[list[TradeRecord], str]:
    records = [*cycle("n", "p", token=1), *cycle("n", "q", token=2)]
    records += [trade("n", f"x{i}", token=10 + i) for i in range(6)]
    return records, addr("n")


@pytest.mark.parametrize(("beta", "expected"), [("0.5", False), ("0.4", True)])
def test_suspicion_boundary_is_inclusive(beta: str, expected: bool) -> None:
    records, node = _motif_node()
    graph = create_graph(records)
    node_trans = graph.get_transactions(node)
    assert len(node_trans) == 10
    assert is_suspicious(node_trans, motif_census(graph), Decimal(beta)) is expected


def test_suspicion_extremes() -> None:
    graph = create_graph([trade("a", "a"), *[trade("b", f"x{i}", token=i) for i in range(10)]])
    census = motif_census(graph)
    assert is_suspicious(graph.get_transactions(addr("a")), census, Decimal("0.5"))
    assert not is_suspicious(graph.get_transactions(addr("b")), census, Decimal("0.5"))
    assert not is_suspicious([], census, Decimal("0"))


def test_filter_trans_keeps_motif_trades() -> None:
    records = [trade("n", "p"), trade("p", "n"), trade("n", "x", token=1)]
    graph = create_graph(records)
    census = motif_census(graph)
    mine = [graph.edge_by_trade_id(records[i].trade_id) for i in (0, 2)]
    assert [e.trade_id for e in filter_trans(mine, census)] == [records[0].trade_id]
    one_offs = [e for e in graph.edges() if e.trade_id == records[2].trade_id]
    assert filter_trans(one_offs, census) == []


def test_single_self_loop() -> None:
    record = trade("a", "a")
    finding = classify(create_graph([record]), DetectionParams(omega=100))
    assert finding.labels == {addr("a"): NodeLabel.WASH_NODE}
    assert finding.flags == {record.trade_id: TradeReason.SUSPICIOUS_NODE}


def test_dyad_members_are_wash_nodes() -> None:
    records = cycle("a", "b")
    finding = classify(create_graph(records), DetectionParams())
    assert finding.label_of(addr("a")) is NodeLabel.WASH_NODE
    assert finding.label_of(addr("b")) is NodeLabel.WASH_NODE
    assert set(finding.flags) == ids(records)
    assert set(finding.flags.values()) == {TradeReason.SUSPICIOUS_NODE}


def test_cycle_members_with_outside_trading_are_scc_wash_nodes() -> None:
    ring = cycle("a", "b", "c")
    outside = [trade(name, f"x{name}", token=i + 1) for i, name in enumerate("abc")]
    finding = classify(create_graph([*ring, *outside]), DetectionParams(beta=Decimal("0.9")))
    for name in "abc":
        assert finding.label_of(addr(name)) is NodeLabel.SCC_WASH_NODE
        assert finding.label_of(addr(f"x{name}")) is NodeLabel.CLEAN
    assert finding.flags == {r.trade_id: TradeReason.SCC_CYCLE for r in ring}
    assert finding.suspicious == frozenset()


def test_bare_three_cycle_trips_the_triad_motif() -> None:
    finding = classify(create_graph(cycle("a", "b", "c")), DetectionParams(beta=Decimal("0.9")))
    assert {finding.label_of(addr(n)) for n in "abc"} == {NodeLabel.WASH_NODE}


def _hub_records() -> list[TradeRecord]:
    hub = [trade("h", "h") for _ in range(3)]
    hub += [trade("h", "x1", token=1), trade("h", "x2", token=2)]
    leaf = [trade("a", "h", token=9), trade("h", "a", token=9)]
    ring = cycle("p", "q", token=5)
    return [*hub, *leaf, *ring]


def test_busy_suspicious_hub_is_removed() -> None:
    records = _hub_records()
    finding = classify(create_graph(records), DetectionParams(omega=4))
    assert finding.label_of(addr("h")) is NodeLabel.IN_NODE
    assert finding.removed == (addr("h"),)
    assert finding.label_of(addr("x1")) is NodeLabel.CLEAN
    # the leaf only ever traded with the hub
    assert finding.label_of(addr("a")) is NodeLabel.CLEAN
    assert finding.label_of(addr("p")) is NodeLabel.WASH_NODE
    assert set(finding.flags) == ids(records[-2:])


def test_drift_after_removal_matches_a_fresh_scan() -> None:
    graph = create_graph(_hub_records())
    params = DetectionParams(omega=4)
    finding = classify(graph, params)
    assert finding.removed == (addr("h"),)
    assert finding.component_drift == scan_scc_loops(graph, params.psi).drift
    assert list(finding.component_drift.values()) == [Fraction(0)]


def test_known_contract_is_harvested_as_service() -> None:
    records = [trade("a", "s", token=1), trade("s", "a", token=2)]
    records += [trade("s", f"x{i}", token=3 + i) for i in range(4)]
    params = DetectionParams(known_contracts=frozenset({addr("s")}))
    finding = classify(create_graph(records), params)
    assert finding.label_of(addr("a")) is NodeLabel.WASH_NODE
    assert finding.label_of(addr("s")) is NodeLabel.SERVICE
    assert finding.flags == {}
    (entry,) = [e for e in finding.audit if e.node == addr("a")]
    assert entry.services == (addr("s"),)
    assert entry.flagged_trades == 0


def test_empty_graph_gives_empty_finding() -> None:
    finding = classify(create_graph([]), DetectionParams())
    assert finding.labels == {}
    assert finding.flags == {}


def _random_corpus(seed: int) -> list[TradeRecord]:
    rng = np.random.default_rng(seed)
    return random_trades(rng, n_nodes=14, n_trades=50, n_tokens=4)


@pytest.mark.parametrize("seed", range(50))
def test_thresholds_are_monotone(seed: int) -> None:
    graph = create_graph(_random_corpus(seed))
    scc = [get_trans_scc(graph, Decimal(psi)) for psi in ("0.0", "0.05", "0.2")]
    assert scc[0] <= scc[1] <= scc[2]
    census = motif_census(graph)
    nodes = [suspicious_nodes(graph, census, Decimal(beta)) for beta in ("0.3", "0.5", "0.8")]
    assert nodes[0] >= nodes[1] >= nodes[2]


@pytest.mark.parametrize("seed", range(20))
def test_finding_invariants(seed: int) -> None:
    records = _random_corpus(seed)
    original = create_graph(records)
    graph = create_graph(records)
    finding = classify(graph, DetectionParams(omega=8))
    assert set(finding.labels) == set(original.nodes())
    for node in finding.removed:
        assert finding.labels[node] is NodeLabel.IN_NODE
    for trade_id in finding.flags:
        edge = original.edge_by_trade_id(trade_id)
        assert graph.has_trade(trade_id)
        assert finding.labels[edge.seller] is not NodeLabel.CLEAN
        assert finding.labels[edge.buyer] is not NodeLabel.CLEAN
        assert finding.labels[edge.seller] is not NodeLabel.IN_NODE
        assert finding.labels[edge.buyer] is not NodeLabel.IN_NODE


@pytest.mark.parametrize("seed", range(10))
def test_classification_is_deterministic(seed: int) -> None:
    records = _random_corpus(seed)
    order = np.random.default_rng(seed).permutation(len(records))
    shuffled = [records[int(i)] for i in order]
    params = DetectionParams(omega=8)
    first = classify(create_graph(records), params).to_json()
    assert classify(create_graph(shuffled), params).to_json() == first
    assert classify(create_graph(records), params, threads=4).to_json() == first


def test_finding_document_round_trip() -> None:
    records = [*cycle("a", "b", "c", "d"), *cycle("e", "f", token=1), trade("g", "g", token=2)]
    params = DetectionParams()
    finding = classify(create_graph(records), params)
    restored = WashFinding.from_json(finding.to_json(), params)
    assert restored.labels == finding.labels
    assert restored.flags == finding.flags
    assert restored.component_drift == finding.component_drift
    assert restored.audit == finding.audit


@pytest.mark.parametrize(
    "kwargs",
    [
        {"beta": Decimal("1.5")},
        {"psi": Decimal("-0.1")},
        {"omega": 0},
        {"omega_by_market": {"blur": 0}},
    ],
)
def test_invalid_params(kwargs: dict[str, object]) -> None:
    with pytest.raises(ConfigError):
        DetectionParams(**kwargs)  # type: ignore[arg-type]


def test_per_market_omega() -> None:
    params = DetectionParams(omega_by_market={"blur": 50})
    assert params.for_market("blur").omega == 50
    assert params.for_market("x2y2").omega == 10_000
    assert params.with_overrides(known_contracts=["0xABC"]).known_contracts == frozenset({"0xabc"})
