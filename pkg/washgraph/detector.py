"""Wash-trade detection over a TradeGraph.

The pass order is fixed: loop-balance flags inside strongly connected
components and back-and-forth flags per trading pair are computed first,
then every node is visited in ascending address order and assigned the
first matching label of

1. suspicious and busier than ``omega``   -> ``in_node`` (node is removed)
2. suspicious                              -> ``wash_node``
3. touches an SCC loop flag                -> ``scc_wash_node``
4. touches a back-and-forth flag           -> ``V_wash_node``
5. otherwise                               -> ``clean``

If any node was removed, flags are recomputed for the weakly connected
components it belonged to and their surviving nodes are visited once more;
other components cannot change.
"""
from __future__ import annotations

import json
import logging
from collections import Counter, defaultdict
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from decimal import Decimal, InvalidOperation, localcontext
from enum import StrEnum
from fractions import Fraction
from pathlib import Path
from typing import Any, Callable, Iterable, Sequence, TypeVar

from .errors import ConfigError
from .graph import (
    MotifTopology,
    SCComponent,
    TradeEdge,
    TradeGraph,
    build_component,
    live_motifs,
    scc_groups,
    tarjan_scc,
    weakly_connected_components,
)
from .ingest import ETH_CONTEXT
from .paths import DEFAULT_DETECTION_PATH

logger = logging.getLogger(__name__)

_T = TypeVar("_T")
_R = TypeVar("_R")


class NodeLabel(StrEnum):
    IN_NODE = "in_node"
    WASH_NODE = "wash_node"
    SCC_WASH_NODE = "scc_wash_node"
    V_WASH_NODE = "V_wash_node"
    SERVICE = "service_n"
    CLEAN = "clean"


class TradeReason(StrEnum):
    SUSPICIOUS_NODE = "suspicious_node"
    SCC_CYCLE = "scc_cycle"
    V_PATTERN = "v_pattern"


WASH_LABELS = frozenset({NodeLabel.WASH_NODE, NodeLabel.SCC_WASH_NODE, NodeLabel.V_WASH_NODE})

_SERVICE_OVERRIDABLE = frozenset({NodeLabel.SCC_WASH_NODE, NodeLabel.V_WASH_NODE, NodeLabel.CLEAN})

_REASON_LABEL = {
    TradeReason.SUSPICIOUS_NODE: NodeLabel.WASH_NODE,
    TradeReason.SCC_CYCLE: NodeLabel.SCC_WASH_NODE,
    TradeReason.V_PATTERN: NodeLabel.V_WASH_NODE,
}


@dataclass(slots=True)
class DetectionParams:
    beta: Decimal = Decimal("0.5")
    psi: Decimal = Decimal("0.05")
    omega: int = 10_000
    omega_by_market: dict[str, int] = field(default_factory=dict)
    known_contracts: frozenset[str] = frozenset()

    def __post_init__(self) -> None:
        if not Decimal(0) <= self.beta <= Decimal(1):
            msg = f"beta must lie in [0, 1], got {self.beta}"
            raise ConfigError(msg)
        if not Decimal(0) <= self.psi <= Decimal(1):
            msg = f"psi must lie in [0, 1], got {self.psi}"
            raise ConfigError(msg)
        for name, value in [("omega", self.omega), *self.omega_by_market.items()]:
            if value < 1:
                msg = f"omega must be a positive integer, got {value} for {name}"
                raise ConfigError(msg)

    @classmethod
    def from_file(cls, path: Path = DEFAULT_DETECTION_PATH) -> DetectionParams:
        try:
            data = json.loads(Path(path).read_text())
        except FileNotFoundError as exc:
            msg = f"Detection config not found: {path}"
            raise ConfigError(msg) from exc
        except json.JSONDecodeError as exc:
            msg = f"Detection config {path} is not valid JSON: {exc}"
            raise ConfigError(msg) from exc
        if not isinstance(data, dict):
            msg = f"Detection config {path} must hold a JSON object"
            raise ConfigError(msg)
        return cls(
            beta=parse_rational(data.get("beta", "0.5"), "beta"),
            psi=parse_rational(data.get("psi", "0.05"), "psi"),
            omega=parse_count(data.get("omega", 10_000), "omega"),
            omega_by_market={
                str(k).lower(): parse_count(v, f"omega_by_market.{k}")
                for k, v in (data.get("omega_by_market") or {}).items()
            },
            known_contracts=frozenset(str(a).lower() for a in data.get("known_contracts") or []),
        )

    @classmethod
    def from_json(cls, data: dict[str, Any]) -> DetectionParams:
        # known_contracts is serialised as a count only
        return cls(
            beta=parse_rational(data.get("beta", "0.5"), "beta"),
            psi=parse_rational(data.get("psi", "0.05"), "psi"),
            omega=parse_count(data.get("omega", 10_000), "omega"),
            omega_by_market={
                str(k): parse_count(v, f"omega_by_market.{k}")
                for k, v in (data.get("omega_by_market") or {}).items()
            },
        )

    def with_overrides(
        self,
        *,
        beta: Decimal | None = None,
        psi: Decimal | None = None,
        omega: int | None = None,
        known_contracts: Iterable[str] | None = None,
    ) -> DetectionParams:
        return replace(
            self,
            beta=self.beta if beta is None else beta,
            psi=self.psi if psi is None else psi,
            omega=self.omega if omega is None else omega,
            known_contracts=(
                self.known_contracts
                if known_contracts is None
                else self.known_contracts | {a.lower() for a in known_contracts}
            ),
        )

    def for_market(self, market: str) -> DetectionParams:
        omega = self.omega_by_market.get(market)
        return self if omega is None else replace(self, omega=omega)

    def to_json(self) -> dict[str, Any]:
        return {
            "beta": float(self.beta),
            "psi": float(self.psi),
            "omega": self.omega,
            "omega_by_market": dict(sorted(self.omega_by_market.items())),
            "known_contracts": len(self.known_contracts),
        }


def parse_rational(value: object, name: str) -> Decimal:
    try:
        number = Decimal(str(value))
    except InvalidOperation as exc:
        msg = f"{name} must be a decimal number, got {value!r}"
        raise ConfigError(msg) from exc
    if not number.is_finite():
        msg = f"{name} must be a finite number, got {value!r}"
        raise ConfigError(msg)
    return number


def parse_count(value: object, name: str) -> int:
    if isinstance(value, int) and not isinstance(value, bool):
        return value
    if isinstance(value, float) and value.is_integer():
        return int(value)
    if isinstance(value, str) and value.strip().isdigit():
        return int(value)
    msg = f"{name} must be an integer, got {value!r}"
    raise ConfigError(msg)


AUDIT_COLUMNS = (
    "node",
    "label",
    "trade_count",
    "flagged_trades",
    "next_neighbor",
    "services",
)


@dataclass(frozen=True, slots=True)
class AuditEntry:
    node: str
    label: NodeLabel
    trade_count: int
    flagged_trades: int
    next_neighbor: str | None = None
    services: tuple[str, ...] = ()


@dataclass(slots=True)
class SccScan:
    flagged: set[str]
    drift: dict[int, Fraction]


@dataclass(slots=True)
class WashFinding:
    params: DetectionParams
    labels: dict[str, NodeLabel]
    flags: dict[str, TradeReason]
    component_drift: dict[int, Fraction] = field(default_factory=dict)
    suspicious: frozenset[str] = frozenset()
    service_addresses: frozenset[str] = frozenset()
    removed: tuple[str, ...] = ()
    audit: list[AuditEntry] = field(default_factory=list)

    @property
    def flagged_trade_ids(self) -> frozenset[str]:
        return frozenset(self.flags)

    def label_of(self, address: str) -> NodeLabel:
        return self.labels.get(address, NodeLabel.CLEAN)

    def label_counts(self) -> dict[str, int]:
        counts = Counter(self.labels.values())
        return {label.value: counts.get(label, 0) for label in NodeLabel}

    def reason_counts(self) -> dict[str, int]:
        counts = Counter(self.flags.values())
        return {reason.value: counts.get(reason, 0) for reason in TradeReason}

    def to_json(self) -> dict[str, Any]:
        return {
            "params": self.params.to_json(),
            "labels": {address: label.value for address, label in sorted(self.labels.items())},
            "flags": [
                {"trade_id": trade_id, "reason": reason.value}
                for trade_id, reason in sorted(self.flags.items())
            ],
            "components": [
                {"id": component_id, "drift": _fraction_text(drift)}
                for component_id, drift in sorted(self.component_drift.items())
            ],
            "suspicious": sorted(self.suspicious),
            "service_addresses": sorted(self.service_addresses),
            "removed": list(self.removed),
            "audit": {
                "columns": list(AUDIT_COLUMNS),
                "rows": [
                    [
                        entry.node,
                        entry.label.value,
                        entry.trade_count,
                        entry.flagged_trades,
                        entry.next_neighbor,
                        list(entry.services),
                    ]
                    for entry in self.audit
                ],
            },
        }

    @classmethod
    def from_json(cls, data: dict[str, Any], params: DetectionParams) -> WashFinding:
        return cls(
            params=params,
            labels={address: NodeLabel(label) for address, label in data.get("labels", {}).items()},
            flags={item["trade_id"]: TradeReason(item["reason"]) for item in data.get("flags", [])},
            component_drift={
                int(item["id"]): Fraction(item["drift"]) for item in data.get("components", [])
            },
            suspicious=frozenset(data.get("suspicious", [])),
            service_addresses=frozenset(data.get("service_addresses", [])),
            removed=tuple(data.get("removed", [])),
            audit=[
                AuditEntry(
                    node=node,
                    label=NodeLabel(label),
                    trade_count=int(trade_count),
                    flagged_trades=int(flagged),
                    next_neighbor=next_neighbor,
                    services=tuple(services),
                )
                for node, label, trade_count, flagged, next_neighbor, services in data.get(
                    "audit", {}
                ).get("rows", [])
            ],
        )


def _fraction_text(value: Fraction) -> str:
    if value.denominator == 1:
        return str(value.numerator)
    return f"{value.numerator}/{value.denominator}"


def _run(func: Callable[[_T], _R], items: Sequence[_T], threads: int) -> list[_R]:
    if threads > 1 and len(items) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            return list(pool.map(func, items))
    return [func(item) for item in items]


def balance_drift(loop: Sequence[TradeEdge]) -> Fraction:
    """Half the summed absolute net ETH positions over the loop, divided by loop volume."""

    with localcontext(ETH_CONTEXT):
        volume = sum((edge.price_eth for edge in loop), Decimal(0))
        if volume == 0:
            return Fraction(0)
        nets: dict[str, Decimal] = defaultdict(Decimal)
        for edge in loop:
            nets[edge.seller] += edge.price_eth
            nets[edge.buyer] -= edge.price_eth
        imbalance = sum((abs(net) for net in nets.values()), Decimal(0))
    return Fraction(imbalance) / 2 / Fraction(volume)


def returning_loops(chain: Sequence[TradeEdge]) -> list[list[TradeEdge]]:
    """Split one token's ownership chain into loops that hand it back to an earlier owner."""

    loops: list[list[TradeEdge]] = []
    path: list[TradeEdge] = []
    owners: list[str] = []
    position: dict[str, int] = {}
    for edge in chain:
        if not owners or owners[-1] != edge.seller:
            path, owners, position = [], [edge.seller], {edge.seller: 0}
        path.append(edge)
        start = position.get(edge.buyer)
        if start is None:
            position[edge.buyer] = len(owners)
            owners.append(edge.buyer)
            continue
        loops.append(path[start:])
        for owner in owners[start + 1 :]:
            del position[owner]
        del path[start:]
        del owners[start + 1 :]
    return loops


def _loop_scan(
    graph: TradeGraph, internal: Sequence[int], tolerance: Fraction
) -> tuple[set[str], Fraction | None]:
    chains: dict[tuple[str, int], list[TradeEdge]] = {}
    for seq in internal:
        edge = graph.edge(seq)
        chains.setdefault(edge.token_key, []).append(edge)
    flagged: set[str] = set()
    loop_edges: list[TradeEdge] = []
    for key in sorted(chains):
        for loop in returning_loops(chains[key]):
            loop_edges.extend(loop)
            if balance_drift(loop) <= tolerance:
                flagged.update(edge.trade_id for edge in loop)
    return flagged, balance_drift(loop_edges) if loop_edges else None


def _v_scan(edges: Iterable[TradeEdge], dominance: Fraction) -> set[str]:
    """Back-and-forth trades per (pair, token); ``edges`` must be in seq order."""

    groups: dict[tuple[str, str, str, int], list[TradeEdge]] = {}
    for edge in edges:
        if edge.is_self_loop:
            continue
        low, high = sorted((edge.seller, edge.buyer))
        groups.setdefault((low, high, *edge.token_key), []).append(edge)
    flagged: set[str] = set()
    for group in groups.values():
        directions = [edge.seller for edge in group]
        if len(set(directions)) < 2:
            continue
        back_and_forth = [
            edge
            for i, edge in enumerate(group)
            if (i > 0 and directions[i - 1] != directions[i])
            or (i + 1 < len(group) and directions[i + 1] != directions[i])
        ]
        with localcontext(ETH_CONTEXT):
            total = sum((edge.price_eth for edge in group), Decimal(0))
            matched = sum((edge.price_eth for edge in back_and_forth), Decimal(0))
        if total == 0 or Fraction(matched) / Fraction(total) >= dominance:
            flagged.update(edge.trade_id for edge in back_and_forth)
    return flagged


def scan_scc_loops(graph: TradeGraph, psi: Decimal, *, threads: int = 1) -> SccScan:
    tolerance = Fraction(psi)
    cyclic = [component for component in tarjan_scc(graph) if component.cyclic]

    def scan(component: SCComponent) -> tuple[int, set[str], Fraction | None]:
        flagged, drift = _loop_scan(graph, component.internal_edges, tolerance)
        return component.component_id, flagged, drift

    flagged: set[str] = set()
    drift: dict[int, Fraction] = {}
    for component_id, component_flags, component_drift in _run(scan, cyclic, threads):
        flagged |= component_flags
        if component_drift is not None:
            drift[component_id] = component_drift
            logger.debug("Component %d drift %s", component_id, component_drift)
    return SccScan(flagged=flagged, drift=drift)


def get_trans_scc(graph: TradeGraph, psi: Decimal, *, threads: int = 1) -> set[str]:
    """Trade ids on token-returning loops inside an SCC whose drift is at most ``psi``."""

    return scan_scc_loops(graph, psi, threads=threads).flagged


def get_trans_V(graph: TradeGraph, psi: Decimal, *, threads: int = 1) -> set[str]:  # noqa: N802
    """Trade ids of same-token back-and-forth trading between two addresses."""

    dominance = 1 - Fraction(psi)
    if threads == 1:
        return _v_scan(graph.edges(), dominance)
    buckets = [_component_edges(graph, members) for members in weakly_connected_components(graph)]
    flagged: set[str] = set()
    for part in _run(lambda edges: _v_scan(edges, dominance), buckets, threads):
        flagged |= part
    return flagged


def _component_edges(graph: TradeGraph, members: Iterable[str]) -> list[TradeEdge]:
    edges = [edge for node in members for edge in graph.out_edges(node)]
    edges.sort(key=_seq)
    return edges


def _seq(edge: TradeEdge) -> int:
    return edge.seq


@dataclass(slots=True)
class ComponentScan:
    """Loop and back-and-forth flags of one weakly connected component.

    ``roots`` holds the smallest member of every SCC inside the component and
    ``drift`` is keyed by those roots, so ids can be numbered over the whole graph.
    """

    roots: list[str]
    scc_flags: set[str]
    v_flags: set[str]
    drift: dict[str, Fraction]


def scan_component(graph: TradeGraph, members: tuple[str, ...], psi: Decimal) -> ComponentScan:
    tolerance = Fraction(psi)
    roots: list[str] = []
    scc_flags: set[str] = set()
    drift: dict[str, Fraction] = {}
    for group in scc_groups(graph, members):
        roots.append(group[0])
        component = build_component(graph, len(roots) - 1, group)
        if not component.cyclic:
            continue
        flagged, loop_drift = _loop_scan(graph, component.internal_edges, tolerance)
        scc_flags |= flagged
        if loop_drift is not None:
            drift[group[0]] = loop_drift
    v_flags = _v_scan(_component_edges(graph, members), 1 - tolerance)
    return ComponentScan(roots=roots, scc_flags=scc_flags, v_flags=v_flags, drift=drift)


def _merged_flags(scans: Iterable[ComponentScan]) -> tuple[set[str], set[str]]:
    scc_flags: set[str] = set()
    v_flags: set[str] = set()
    for scan in scans:
        scc_flags |= scan.scc_flags
        v_flags |= scan.v_flags
    return scc_flags, v_flags


def _numbered_drift(scans: Iterable[ComponentScan]) -> dict[int, Fraction]:
    parts = list(scans)
    ids = {root: i for i, root in enumerate(sorted(r for scan in parts for r in scan.roots))}
    return dict(sorted((ids[root], d) for scan in parts for root, d in scan.drift.items()))


def is_suspicious(node_trans: Sequence[TradeEdge], topo: MotifTopology, beta: Decimal) -> bool:
    """True when at least a ``beta`` share of the trades sit in a closed motif."""

    if not node_trans:
        return False
    closed = sum(1 for edge in node_trans if edge.seq in topo.closed_trades)
    return Fraction(closed, len(node_trans)) >= Fraction(beta)


def filter_trans(node_trans: Sequence[TradeEdge], topo: MotifTopology) -> list[TradeEdge]:
    return [edge for edge in node_trans if edge.seq in topo.closed_trades]


def suspicious_nodes(graph: TradeGraph, topo: MotifTopology, beta: Decimal) -> set[str]:
    return {
        node for node in graph.nodes() if is_suspicious(graph.get_transactions(node), topo, beta)
    }


class WashDetector:
    """Runs the labeling pass; mutates the graph it is given (hub removal)."""

    def __init__(self, params: DetectionParams, *, threads: int = 1):
        self.params = params
        self.threads = max(1, threads)

    def classify(self, graph: TradeGraph) -> WashFinding:
        original_nodes = graph.nodes()
        components = weakly_connected_components(graph)
        home = {node: members[0] for members in components for node in members}
        scans = self._scan(graph, components)
        scc_flags, v_flags = _merged_flags(scans.values())
        state = _LabelState()
        removed_before = len(graph.removed)
        for node in original_nodes:
            if graph.has_node(node):
                self._visit(graph, node, scc_flags, v_flags, state)
        hubs = graph.removed[removed_before:]
        if hubs:
            touched = sorted({home[node] for node in hubs})
            by_root = {members[0]: members for members in components}
            remaining = [node for root in touched for node in by_root[root] if graph.has_node(node)]
            logger.info(
                "Removed %d high-volume nodes; re-checking %d addresses in %d components",
                len(hubs),
                len(remaining),
                len(touched),
            )
            for root in touched:
                del scans[root]
            scans.update(self._scan(graph, weakly_connected_components(graph, remaining)))
            scc_flags, v_flags = _merged_flags(scans.values())
            for node in sorted(remaining):
                if graph.has_node(node):
                    self._visit(graph, node, scc_flags, v_flags, state)
        drift = _numbered_drift(scans.values())
        return self._finalize(graph, original_nodes, scc_flags, v_flags, drift, state)

    def _scan(
        self, graph: TradeGraph, components: list[tuple[str, ...]]
    ) -> dict[str, ComponentScan]:
        psi = self.params.psi

        def scan(members: tuple[str, ...]) -> ComponentScan:
            return scan_component(graph, members, psi)

        results = _run(scan, components, self.threads)
        return {members[0]: result for members, result in zip(components, results, strict=True)}

    def _visit(
        self,
        graph: TradeGraph,
        node: str,
        scc_flags: set[str],
        v_flags: set[str],
        state: _LabelState,
    ) -> None:
        node_trans = graph.get_transactions(node)
        topo = live_motifs(graph)
        state.suspect.pop(node, None)
        if is_suspicious(node_trans, topo, self.params.beta):
            state.suspicious.add(node)
            if len(node_trans) > self.params.omega:
                state.labels[node] = NodeLabel.IN_NODE
                state.audit[node] = AuditEntry(node, NodeLabel.IN_NODE, len(node_trans), 0)
                graph.remove_node(node)
                return
            kept = filter_trans(node_trans, topo)
            state.labels[node] = NodeLabel.WASH_NODE
            services = self._service_addresses(graph, node, kept, state)
            kept = [edge for edge in kept if edge.counterparty(node) not in services]
            state.suspect[node] = kept
            state.services.update(services)
            state.audit[node] = AuditEntry(
                node,
                NodeLabel.WASH_NODE,
                len(node_trans),
                len(kept),
                next_neighbor=_unmarked_neighbor(graph, node, state.labels),
                services=tuple(sorted(services)),
            )
            return
        if any(edge.trade_id in scc_flags for edge in node_trans):
            label = NodeLabel.SCC_WASH_NODE
        elif any(edge.trade_id in v_flags for edge in node_trans):
            label = NodeLabel.V_WASH_NODE
        else:
            label = NodeLabel.CLEAN
        state.labels[node] = label
        state.audit[node] = AuditEntry(node, label, len(node_trans), 0)

    def _service_addresses(
        self,
        graph: TradeGraph,
        node: str,
        kept: Sequence[TradeEdge],
        state: _LabelState,
    ) -> set[str]:
        services: set[str] = set()
        for edge in kept:
            other = edge.counterparty(node)
            if other == node:
                continue
            if (
                state.labels.get(other) is NodeLabel.IN_NODE
                or other in self.params.known_contracts
                or graph.transaction_count(other) > self.params.omega
            ):
                services.add(other)
        return services

    def _finalize(
        self,
        graph: TradeGraph,
        original_nodes: Sequence[str],
        scc_flags: set[str],
        v_flags: set[str],
        drift: dict[int, Fraction],
        state: _LabelState,
    ) -> WashFinding:
        flags: dict[str, TradeReason] = {}
        for node in sorted(state.suspect):
            if state.labels.get(node) is not NodeLabel.WASH_NODE or not graph.has_node(node):
                continue
            for edge in state.suspect[node]:
                if graph.has_trade(edge.trade_id):
                    flags.setdefault(edge.trade_id, TradeReason.SUSPICIOUS_NODE)
        structural = ((TradeReason.SCC_CYCLE, scc_flags), (TradeReason.V_PATTERN, v_flags))
        for reason, trade_ids in structural:
            for trade_id in sorted(trade_ids):
                if graph.has_trade(trade_id):
                    flags.setdefault(trade_id, reason)
        flags = dict(sorted(flags.items()))

        removed = set(graph.removed)
        labels: dict[str, NodeLabel] = {}
        for node in original_nodes:
            if node in removed:
                labels[node] = NodeLabel.IN_NODE
            elif not graph.has_node(node):
                labels[node] = NodeLabel.CLEAN
            else:
                labels[node] = state.labels.get(node, NodeLabel.CLEAN)
        for address in sorted(state.services):
            if labels.get(address) in _SERVICE_OVERRIDABLE:
                labels[address] = NodeLabel.SERVICE
        for trade_id, reason in flags.items():
            edge = graph.edge_by_trade_id(trade_id)
            for endpoint in (edge.seller, edge.buyer):
                if labels[endpoint] is NodeLabel.CLEAN:
                    labels[endpoint] = _REASON_LABEL[reason]

        finding = WashFinding(
            params=self.params,
            labels=labels,
            flags=flags,
            component_drift=drift,
            suspicious=frozenset(state.suspicious),
            service_addresses=frozenset(state.services),
            removed=tuple(graph.removed),
            audit=[state.audit[node] for node in sorted(state.audit)],
        )
        logger.info("Labels: %s", finding.label_counts())
        logger.info("Flagged trades: %s", finding.reason_counts())
        return finding


@dataclass(slots=True)
class _LabelState:
    labels: dict[str, NodeLabel] = field(default_factory=dict)
    suspect: dict[str, list[TradeEdge]] = field(default_factory=dict)
    suspicious: set[str] = field(default_factory=set)
    services: set[str] = field(default_factory=set)
    audit: dict[str, AuditEntry] = field(default_factory=dict)


def _unmarked_neighbor(graph: TradeGraph, node: str, labels: dict[str, NodeLabel]) -> str | None:
    for other in sorted(graph.neighbors(node)):
        if other not in labels:
            return other
    return None


def classify(graph: TradeGraph, params: DetectionParams, *, threads: int = 1) -> WashFinding:
    return WashDetector(params, threads=threads).classify(graph)
