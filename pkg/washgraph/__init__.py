"""washgraph: detect wash trading in NFT marketplace trade graphs."""

from .detector import DetectionParams, NodeLabel, TradeReason, WashFinding, classify
from .graph import GraphParams, TradeGraph, create_graph
from .ingest import TradeRecord, load_records
from .synthgen import ScenarioSpec, generate

__all__ = [
    "DetectionParams",
    "GraphParams",
    "NodeLabel",
    "ScenarioSpec",
    "TradeGraph",
    "TradeReason",
    "TradeRecord",
    "WashFinding",
    "classify",
    "create_graph",
    "generate",
    "load_records",
]
