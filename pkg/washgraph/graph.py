"""Directed trade multigraph and the structural queries the detector runs on it."""
from __future__ import annotations

import logging
from collections import Counter
from collections.abc import Container
from dataclasses import dataclass, field, fields
from datetime import datetime
from decimal import Decimal
from fractions import Fraction
from pathlib import Path
from typing import Any, Callable, Iterable, Iterator, Mapping, Protocol, Sequence, TypeVar

import networkx as nx

from .atomic import atomic_writer
from .errors import ConfigError, UnknownNodeError
from .ingest import TradeRecord, eth_sum, format_eth

logger = logging.getLogger(__name__)

EDGE_MODES = ("multigraph", "collapsed")

_T = TypeVar("_T")


@dataclass(slots=True)
class GraphParams:
    # pre_params
    markets: frozenset[str] | None = None
    start: datetime | None = None
    end: datetime | None = None
    min_price: Decimal = Decimal(0)
    include_self_trades: bool = True
    # g_params
    edge_mode: str = "multigraph"

    def __post_init__(self) -> None:
        if self.start is not None and self.end is not None and not self.start < self.end:
            msg = (
                f"Time window start {self.start.isoformat()} "
                f"must precede end {self.end.isoformat()}"
            )
            raise ConfigError(msg)
        if self.min_price < 0:
            msg = f"Minimum price must be non-negative, got {self.min_price}"
            raise ConfigError(msg)
        if self.edge_mode not in EDGE_MODES:
            msg = f"Unknown edge mode '{self.edge_mode}', expected one of {EDGE_MODES}"
            raise ConfigError(msg)

    def exclusion_reason(self, record: TradeRecord) -> str | None:
        if self.markets is not None and record.market not in self.markets:
            return "market"
        if self.start is not None and record.timestamp < self.start:
            return "before_window"
        if self.end is not None and record.timestamp >= self.end:
            return "after_window"
        if record.price_eth < self.min_price:
            return "below_min_price"
        if not self.include_self_trades and record.is_self_trade:
            return "self_trade"
        return None

    def select(self, records: Iterable[TradeRecord]) -> list[TradeRecord]:
        return [record for record in records if self.exclusion_reason(record) is None]

    def to_json(self) -> dict[str, Any]:
        return {
            "markets": sorted(self.markets) if self.markets is not None else None,
            "start": self.start.isoformat() if self.start else None,
            "end": self.end.isoformat() if self.end else None,
            "min_price": format_eth(self.min_price),
            "include_self_trades": self.include_self_trades,
            "edge_mode": self.edge_mode,
        }


@dataclass(frozen=True, slots=True)
class TradeEdge:
    """A seller -> buyer edge; ``seq`` is its position in canonical trade order."""

    seq: int
    record: TradeRecord

    @property
    def trade_id(self) -> str:
        return self.record.trade_id

    @property
    def seller(self) -> str:
        return self.record.seller

    @property
    def buyer(self) -> str:
        return self.record.buyer

    @property
    def price_eth(self) -> Decimal:
        return self.record.price_eth

    @property
    def timestamp(self) -> datetime:
        return self.record.timestamp

    @property
    def token_key(self) -> tuple[str, int]:
        return self.record.token_key

    @property
    def is_self_loop(self) -> bool:
        return self.record.seller == self.record.buyer

    def counterparty(self, node: str) -> str:
        return self.buyer if self.seller == node else self.seller


@dataclass(slots=True)
class GraphBuildStats:
    accepted: int = 0
    excluded: Counter[str] = field(default_factory=Counter)


class TradeGraph:
    """Directed multigraph keyed by wallet address.

    Each node keeps one list of incident trade seqs in canonical order, and
    ``_arcs`` counts non-self-loop trades per ``(seller, buyer)``, so motif
    membership of a single trade can be answered locally. Whole-graph results
    (SCCs, census) are cached against a version counter that every mutation bumps.
    """

    def __init__(self, edge_mode: str = "multigraph"):
        self.edge_mode = edge_mode
        self.build_stats = GraphBuildStats()
        self.removed: list[str] = []
        self.pruned: list[str] = []
        self._edges: dict[int, TradeEdge] = {}
        self._by_trade_id: dict[str, int] = {}
        self._incident: dict[str, list[int]] = {}
        self._arcs: dict[tuple[str, str], int] = {}
        self._tokens: dict[tuple[str, int], list[int]] = {}
        self._next_seq = 0
        self._version = 0
        self._cache: dict[str, tuple[int, Any]] = {}

    def add_trade(self, record: TradeRecord) -> TradeEdge:
        seq = self._next_seq
        self._next_seq += 1
        edge = TradeEdge(seq=seq, record=record)
        seller, buyer = record.seller, record.buyer
        self._edges[seq] = edge
        self._by_trade_id[record.trade_id] = seq
        self._incident.setdefault(seller, []).append(seq)
        if seller != buyer:
            self._incident.setdefault(buyer, []).append(seq)
            arc = (seller, buyer)
            self._arcs[arc] = self._arcs.get(arc, 0) + 1
        self._tokens.setdefault(record.token_key, []).append(seq)
        self._version += 1
        return edge

    @property
    def version(self) -> int:
        return self._version

    def cached(self, name: str, build: Callable[[], _T]) -> _T:
        entry = self._cache.get(name)
        if entry is not None and entry[0] == self._version:
            value: _T = entry[1]
            return value
        value = build()
        self._cache[name] = (self._version, value)
        return value

    def nodes(self) -> list[str]:
        return sorted(self._incident)

    def has_node(self, node: str) -> bool:
        return node in self._incident

    def has_trade(self, trade_id: str) -> bool:
        return trade_id in self._by_trade_id

    def number_of_nodes(self) -> int:
        return len(self._incident)

    def number_of_edges(self) -> int:
        return len(self._edges)

    def edges(self) -> Iterator[TradeEdge]:
        return iter(self._edges.values())

    def edge(self, seq: int) -> TradeEdge:
        return self._edges[seq]

    def has_seq(self, seq: int) -> bool:
        return seq in self._edges

    def edge_by_trade_id(self, trade_id: str) -> TradeEdge:
        return self._edges[self._by_trade_id[trade_id]]

    def out_edges(self, node: str) -> list[TradeEdge]:
        edges = (self._edges[seq] for seq in self._incident.get(node, ()))
        return [edge for edge in edges if edge.seller == node]

    def in_edges(self, node: str) -> list[TradeEdge]:
        edges = (self._edges[seq] for seq in self._incident.get(node, ()))
        return [edge for edge in edges if edge.buyer == node]

    def successors(self, node: str) -> list[str]:
        """Distinct buyers from ``node``, self-loops excluded."""

        return sorted({edge.buyer for edge in self.out_edges(node)} - {node})

    def predecessors(self, node: str) -> list[str]:
        return sorted({edge.seller for edge in self.in_edges(node)} - {node})

    def neighbors(self, node: str) -> set[str]:
        found = {self._edges[seq].counterparty(node) for seq in self._incident.get(node, ())}
        found.discard(node)
        return found

    def token_keys(self) -> list[tuple[str, int]]:
        return sorted(self._tokens)

    def token_chain(self, key: tuple[str, int]) -> list[TradeEdge]:
        return [self._edges[seq] for seq in self._tokens.get(key, ())]

    def out_degree(self, node: str) -> int:
        return len(self.out_edges(node))

    def in_degree(self, node: str) -> int:
        return len(self.in_edges(node))

    def transaction_count(self, node: str) -> int:
        return len(self._incident.get(node, ()))

    def closes_motif(self, edge: TradeEdge) -> bool:
        """True when the trade is a self-loop or sits in a dyad, triad or repeated pair."""

        seller, buyer = edge.seller, edge.buyer
        if seller == buyer:
            return True
        arcs = self._arcs
        if (buyer, seller) in arcs or arcs.get((seller, buyer), 0) >= 2:
            return True
        # a triad needs some third address with buyer -> middle -> seller
        if len(self._incident.get(buyer, ())) <= len(self._incident.get(seller, ())):
            return any((middle, seller) in arcs for middle in self.successors(buyer))
        return any((buyer, middle) in arcs for middle in self.predecessors(seller))

    def get_transactions(self, node: str) -> list[TradeEdge]:
        """Every trade touching ``node`` in (block_number, tx_hash) order."""

        seqs = self._incident.get(node)
        if seqs is None:
            raise UnknownNodeError(node)
        return [self._edges[seq] for seq in seqs]

    def remove_node(self, node: str) -> TradeGraph:
        """Drop ``node`` with its trades; counterparties left without trades are pruned."""

        seqs = self._incident.pop(node, None)
        if seqs is None:
            raise UnknownNodeError(node)
        gone = set(seqs)
        touched: set[str] = set()
        tokens: set[tuple[str, int]] = set()
        for seq in seqs:
            edge = self._edges.pop(seq)
            del self._by_trade_id[edge.trade_id]
            tokens.add(edge.token_key)
            if not edge.is_self_loop:
                touched.add(edge.counterparty(node))
                self._arcs.pop((edge.seller, edge.buyer), None)
        for key in tokens:
            remaining = [seq for seq in self._tokens[key] if seq not in gone]
            if remaining:
                self._tokens[key] = remaining
            else:
                del self._tokens[key]
        for other in sorted(touched):
            left = [seq for seq in self._incident[other] if seq not in gone]
            if left:
                self._incident[other] = left
            else:
                del self._incident[other]
                self.pruned.append(other)
        self.removed.append(node)
        self._version += 1
        return self


def create_graph(records: Iterable[TradeRecord], params: GraphParams | None = None) -> TradeGraph:
    params = params or GraphParams()
    graph = TradeGraph(edge_mode=params.edge_mode)
    for record in sorted(records, key=TradeRecord.sort_key):
        reason = params.exclusion_reason(record)
        if reason is not None:
            graph.build_stats.excluded[reason] += 1
            continue
        graph.add_trade(record)
        graph.build_stats.accepted += 1
    if graph.number_of_edges() == 0:
        logger.warning(
            "Graph is empty after filtering (%s)",
            dict(sorted(graph.build_stats.excluded.items())) or "no input records",
        )
    else:
        logger.info(
            "Built trade graph: %d nodes, %d edges",
            graph.number_of_nodes(),
            graph.number_of_edges(),
        )
    return graph


def get_transactions(graph: TradeGraph, node: str) -> list[TradeEdge]:
    return graph.get_transactions(node)


def remove_node(graph: TradeGraph, node: str) -> TradeGraph:
    return graph.remove_node(node)


def provenance_breaks(graph: TradeGraph) -> set[int]:
    """Seqs of edges whose seller is not the previous buyer of the same token."""

    breaks: set[int] = set()
    for key in graph.token_keys():
        chain = graph.token_chain(key)
        for previous, current in zip(chain, chain[1:]):
            if previous.buyer != current.seller:
                breaks.add(current.seq)
    return breaks


@dataclass(frozen=True, slots=True)
class SCComponent:
    component_id: int
    members: tuple[str, ...]
    internal_edges: tuple[int, ...]
    cyclic: bool

    @property
    def avg_internal_tx(self) -> Fraction:
        return Fraction(len(self.internal_edges), len(self.members))


def strongly_connected(adjacency: Mapping[str, Sequence[str]]) -> list[list[str]]:
    """Iterative Tarjan over ``{node: successors}``; components in completion order."""

    index: dict[str, int] = {}
    lowlink: dict[str, int] = {}
    stack: list[str] = []
    on_stack: set[str] = set()
    result: list[list[str]] = []
    for root in adjacency:
        if root in index:
            continue
        index[root] = lowlink[root] = len(index)
        stack.append(root)
        on_stack.add(root)
        work: list[tuple[str, Iterator[str]]] = [(root, iter(adjacency[root]))]
        while work:
            v, successors = work[-1]
            descended = False
            for w in successors:
                if w not in index:
                    index[w] = lowlink[w] = len(index)
                    stack.append(w)
                    on_stack.add(w)
                    work.append((w, iter(adjacency.get(w, ()))))
                    descended = True
                    break
                if w in on_stack:
                    lowlink[v] = min(lowlink[v], index[w])
            if descended:
                continue
            work.pop()
            if work:
                parent = work[-1][0]
                lowlink[parent] = min(lowlink[parent], lowlink[v])
            if lowlink[v] == index[v]:
                component: list[str] = []
                while True:
                    w = stack.pop()
                    on_stack.discard(w)
                    component.append(w)
                    if w == v:
                        break
                result.append(component)
    return result


def tarjan_scc(graph: TradeGraph) -> list[SCComponent]:
    """Strongly connected components ordered by their smallest member address."""

    return graph.cached("scc", lambda: _build_components(graph))


def scc_groups(graph: TradeGraph, members: Iterable[str]) -> list[tuple[str, ...]]:
    """SCC member tuples of the subgraph on ``members``, which must be closed under adjacency."""

    adjacency = {node: graph.successors(node) for node in members}
    return sorted((tuple(sorted(group)) for group in strongly_connected(adjacency)), key=_first)


def build_component(graph: TradeGraph, component_id: int, members: tuple[str, ...]) -> SCComponent:
    member_set = set(members)
    internal = sorted(
        edge.seq for node in members for edge in graph.out_edges(node) if edge.buyer in member_set
    )
    has_self_loop = any(graph.edge(seq).is_self_loop for seq in internal)
    return SCComponent(
        component_id=component_id,
        members=members,
        internal_edges=tuple(internal),
        cyclic=len(members) > 1 or has_self_loop,
    )


def _build_components(graph: TradeGraph) -> list[SCComponent]:
    groups = scc_groups(graph, graph.nodes())
    components = [build_component(graph, i, members) for i, members in enumerate(groups)]
    logger.info(
        "Found %d strongly connected components (%d cyclic)",
        len(components),
        sum(1 for c in components if c.cyclic),
    )
    return components


def _first(group: tuple[str, ...]) -> str:
    return group[0]


def weakly_connected_components(
    graph: TradeGraph, members: Iterable[str] | None = None
) -> list[tuple[str, ...]]:
    """Weak components as sorted tuples, ordered by smallest member.

    ``members`` restricts the search to a node set closed under adjacency.
    """

    nodes = graph.nodes() if members is None else sorted(members)
    seen: set[str] = set()
    groups: list[tuple[str, ...]] = []
    for root in nodes:
        if root in seen:
            continue
        seen.add(root)
        group = [root]
        frontier = [root]
        while frontier:
            for other in graph.neighbors(frontier.pop()):
                if other not in seen:
                    seen.add(other)
                    group.append(other)
                    frontier.append(other)
        groups.append(tuple(sorted(group)))
    return groups


class ClosedTradeView:
    """``seq in view`` asks the graph whether that trade closes a motif right now."""

    __slots__ = ("_graph",)

    def __init__(self, graph: TradeGraph):
        self._graph = graph

    def __contains__(self, seq: object) -> bool:
        if not isinstance(seq, int) or not self._graph.has_seq(seq):
            return False
        return self._graph.closes_motif(self._graph.edge(seq))


@dataclass(frozen=True, slots=True)
class LiveMotifs:
    """Closed-motif membership read off the current graph instead of a stored census."""

    closed_trades: ClosedTradeView


def live_motifs(graph: TradeGraph) -> LiveMotifs:
    return LiveMotifs(ClosedTradeView(graph))


class MotifTopology(Protocol):
    @property
    def closed_trades(self) -> Container[int]: ...


def to_networkx(graph: TradeGraph, collapsed: bool | None = None) -> nx.DiGraph:
    """Export as a networkx graph; collapsed mode keeps one weighted edge per pair."""

    if collapsed is None:
        collapsed = graph.edge_mode == "collapsed"
    if collapsed:
        view = nx.DiGraph()
        view.add_nodes_from(graph.nodes())
        for edge in graph.edges():
            if view.has_edge(edge.seller, edge.buyer):
                data = view[edge.seller][edge.buyer]
                data["trades"] += 1
                data["volume"] = eth_sum((data["volume"], edge.price_eth))
            else:
                view.add_edge(edge.seller, edge.buyer, trades=1, volume=edge.price_eth)
        return view
    multi = nx.MultiDiGraph()
    multi.add_nodes_from(graph.nodes())
    for edge in graph.edges():
        multi.add_edge(
            edge.seller,
            edge.buyer,
            key=edge.trade_id,
            price_eth=edge.price_eth,
            timestamp=edge.timestamp,
            token=edge.token_key,
        )
    return multi


@dataclass(slots=True)
class NodeMotifs:
    out_degree: int = 0
    in_degree: int = 0
    distinct_counterparties: int = 0
    repeat_counterparty_trade_count: int = 0
    self_loop_count: int = 0
    dyad_mutual_count: int = 0
    triad_cycle_count: int = 0

    def to_json(self) -> dict[str, int]:
        return {f.name: getattr(self, f.name) for f in fields(self)}


@dataclass(slots=True)
class MotifCensus:
    """Dyad/triad census plus the trade sets each motif covers (by edge seq)."""

    nodes: dict[str, NodeMotifs]
    mutual_pairs: int
    triad_cycles: int
    self_loop_trades: frozenset[int]
    dyad_trades: frozenset[int]
    triad_trades: frozenset[int]
    repeat_trades: frozenset[int]
    closed_trades: frozenset[int]

    def node(self, address: str) -> NodeMotifs:
        return self.nodes.get(address) or NodeMotifs()

    def totals(self) -> NodeMotifs:
        total = NodeMotifs()
        for motifs in self.nodes.values():
            for f in fields(total):
                setattr(total, f.name, getattr(total, f.name) + getattr(motifs, f.name))
        return total

    def to_json(self) -> dict[str, Any]:
        return {
            "mutual_pairs": self.mutual_pairs,
            "triad_cycles": self.triad_cycles,
            "totals": self.totals().to_json(),
        }


def motif_census(graph: TradeGraph) -> MotifCensus:
    return graph.cached("census", lambda: _build_census(graph))


def _build_census(graph: TradeGraph) -> MotifCensus:
    succ: dict[str, set[str]] = {}
    pred: dict[str, set[str]] = {}
    pair_trades: Counter[tuple[str, str]] = Counter()
    for edge in graph.edges():
        if edge.is_self_loop:
            continue
        succ.setdefault(edge.seller, set()).add(edge.buyer)
        pred.setdefault(edge.buyer, set()).add(edge.seller)
        pair_trades[_pair(edge.seller, edge.buyer)] += 1

    nodes: dict[str, NodeMotifs] = {}
    for node in graph.nodes():
        outs = succ.get(node, set())
        ins = pred.get(node, set())
        nodes[node] = NodeMotifs(
            out_degree=graph.out_degree(node),
            in_degree=graph.in_degree(node),
            distinct_counterparties=len(outs | ins),
            dyad_mutual_count=len(outs & ins),
        )

    triad_pairs: set[tuple[str, str]] = set()
    triad_cycles = 0
    for u in sorted(succ):
        for v in succ[u]:
            if v <= u:
                continue
            for w in succ.get(v, ()):
                if w <= u or w == v:
                    continue
                if u in succ.get(w, ()):
                    triad_cycles += 1
                    for member in (u, v, w):
                        nodes[member].triad_cycle_count += 1
                    triad_pairs.update(((u, v), (v, w), (w, u)))

    self_loops: set[int] = set()
    dyads: set[int] = set()
    triads: set[int] = set()
    repeats: set[int] = set()
    for edge in graph.edges():
        seller, buyer = edge.seller, edge.buyer
        if seller == buyer:
            self_loops.add(edge.seq)
            nodes[seller].self_loop_count += 1
            continue
        if seller in succ.get(buyer, ()):
            dyads.add(edge.seq)
        if (seller, buyer) in triad_pairs:
            triads.add(edge.seq)
        if pair_trades[_pair(seller, buyer)] >= 2:
            repeats.add(edge.seq)
            nodes[seller].repeat_counterparty_trade_count += 1
            nodes[buyer].repeat_counterparty_trade_count += 1

    mutual_pairs = sum(m.dyad_mutual_count for m in nodes.values()) // 2
    return MotifCensus(
        nodes=nodes,
        mutual_pairs=mutual_pairs,
        triad_cycles=triad_cycles,
        self_loop_trades=frozenset(self_loops),
        dyad_trades=frozenset(dyads),
        triad_trades=frozenset(triads),
        repeat_trades=frozenset(repeats),
        closed_trades=frozenset(self_loops | dyads | triads | repeats),
    )


def _pair(a: str, b: str) -> tuple[str, str]:
    return (a, b) if a <= b else (b, a)


def dump_edge_list(graph: TradeGraph, path: Path) -> None:
    """Write ``seller buyer trade_id price_eth timestamp`` lines in trade order."""

    with atomic_writer(Path(path), newline="") as handle:
        for edge in graph.edges():
            stamp = edge.timestamp.strftime("%Y-%m-%dT%H:%M:%SZ")
            handle.write(
                f"{edge.seller} {edge.buyer} {edge.trade_id} {format_eth(edge.price_eth)} {stamp}\n"
            )
