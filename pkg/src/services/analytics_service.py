"""
Analytics over the gaze event stream: pooled per-participant timelines,
the gaze attention network and per-participant attention summaries.
"""
import json
import logging
import math
import re
from collections import defaultdict
from dataclasses import dataclass
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import networkx as nx

from src.models.records import NONE_LABEL, GazeEvent
from src.utils.errors import DataError
from src.utils.format_utils import format_float, round_float

logger = logging.getLogger(__name__)

DEFAULT_INTERVAL_S = 5.0
DEFAULT_THRESHOLD_S = 2.0
DOT_DECIMALS = 3
TIMELINE_HEADER = ("participant_id", "start_s", "length_s", "label")


@dataclass(frozen=True)
class TimelineInterval:
    participant_id: str
    start: float
    length: float
    label: str


def _duration(e: GazeEvent) -> float:
    return e.duration_s if e.duration_s is not None else 0.0


def session_bounds(events: Sequence[GazeEvent]) -> Tuple[float, float]:
    start = min(e.timestamp for e in events)
    end = max(e.timestamp + _duration(e) for e in events)
    return start, end


def interval_count(start: float, end: float, interval_s: float) -> int:
    if end <= start:
        return 0
    return max(1, int(math.ceil((end - start) / interval_s - 1e-9)))


def interval_of(timestamp: float, start: float, interval_s: float, count: int) -> int:
    return min(count - 1, max(0, int(math.floor((timestamp - start) / interval_s))))


def dominant_label(totals: Dict[str, float], threshold_s: float) -> str:
    """Label with the largest total duration, if it reaches the threshold; ties go to the smaller label."""
    candidates = {label: s for label, s in totals.items() if label != NONE_LABEL}
    if not candidates:
        return NONE_LABEL
    label = min(candidates, key=lambda l: (-candidates[l], l))
    return label if candidates[label] >= threshold_s else NONE_LABEL


def median_label(bucket: Sequence[GazeEvent], totals: Dict[str, float], threshold_s: float) -> str:
    """Label of the sample covering the middle of the interval's accumulated event time."""
    total = math.fsum(_duration(e) for e in bucket)
    if total <= 0:
        return NONE_LABEL
    acc = 0.0
    label = bucket[-1].target
    for e in bucket:
        acc += _duration(e)
        if acc >= total / 2.0:
            label = e.target
            break
    if label == NONE_LABEL or totals.get(label, 0.0) < threshold_s:
        return NONE_LABEL
    return label


POOLING = {"dominant", "median"}


def pool_timeline(
    events: Sequence[GazeEvent],
    interval_s: float = DEFAULT_INTERVAL_S,
    threshold_s: float = DEFAULT_THRESHOLD_S,
    session_start: Optional[float] = None,
    session_end: Optional[float] = None,
    participant_id: Optional[str] = None,
    pooling: str = "dominant",
) -> List[TimelineInterval]:
    """
    Fixed-length intervals from the session start, each labeled by pooling
    the durations of the events whose timestamps fall inside it.

    The threshold is the same for every interval, including a last one cut
    short by the session end.
    """
    if pooling not in POOLING:
        raise ValueError(f"unknown pooling {pooling!r}")
    if session_start is None or session_end is None:
        if not events:
            return []
        lo, hi = session_bounds(events)
        session_start = lo if session_start is None else session_start
        session_end = hi if session_end is None else session_end
    if participant_id is None:
        observers = {e.observer for e in events}
        if len(observers) > 1:
            raise DataError(f"pool_timeline expects one participant, got {sorted(observers)}")
        if not observers:
            return []
        participant_id = observers.pop()

    count = interval_count(session_start, session_end, interval_s)
    buckets: List[List[GazeEvent]] = [[] for _ in range(count)]
    for e in sorted(events, key=lambda e: (e.timestamp, e.frame_index)):
        if session_start <= e.timestamp < session_start + count * interval_s:
            buckets[interval_of(e.timestamp, session_start, interval_s, count)].append(e)

    timeline = []
    for i, bucket in enumerate(buckets):
        start = session_start + i * interval_s
        per_label: Dict[str, List[float]] = defaultdict(list)
        for e in bucket:
            per_label[e.target].append(_duration(e))
        totals = {label: math.fsum(d) for label, d in per_label.items()}
        if pooling == "dominant":
            label = dominant_label(totals, threshold_s)
        else:
            label = median_label(bucket, totals, threshold_s)
        timeline.append(TimelineInterval(participant_id, start, interval_s, label))
    return timeline


def pool_timelines(
    events: Sequence[GazeEvent],
    participants: Optional[Iterable[str]] = None,
    interval_s: float = DEFAULT_INTERVAL_S,
    threshold_s: float = DEFAULT_THRESHOLD_S,
    session_start: Optional[float] = None,
    session_end: Optional[float] = None,
    pooling: str = "dominant",
) -> List[TimelineInterval]:
    """Timelines for every participant on one shared interval grid."""
    if session_start is None or session_end is None:
        if not events:
            return []
        session_start, session_end = session_bounds(events)
    by_observer: Dict[str, List[GazeEvent]] = defaultdict(list)
    for e in events:
        by_observer[e.observer].append(e)
    everyone = sorted(set(by_observer) | set(participants or []))
    timeline: List[TimelineInterval] = []
    for pid in everyone:
        timeline.extend(pool_timeline(
            by_observer.get(pid, []), interval_s, threshold_s,
            session_start, session_end, participant_id=pid, pooling=pooling,
        ))
    return timeline


def timeline_to_csv(timeline: Iterable[TimelineInterval]) -> str:
    lines = [",".join(TIMELINE_HEADER)]
    for iv in timeline:
        lines.append(f"{iv.participant_id},{format_float(iv.start)},{format_float(iv.length)},{iv.label}")
    return "\n".join(lines) + "\n"


class AttentionNetwork:
    """
    Directed graph of who looked at what. Edge weight is total fixation
    seconds from observer to target; node weight is total incoming seconds.
    """

    def __init__(self, graph: Optional[nx.DiGraph] = None):
        self.graph = graph if graph is not None else nx.DiGraph()

    def add_node(self, label: str, weight: float = 0.0) -> None:
        self.graph.add_node(label, weight=float(weight))

    def add_edge(self, observer: str, target: str, weight: float) -> None:
        for label in (observer, target):
            if label not in self.graph:
                self.add_node(label)
        self.graph.add_edge(observer, target, weight=float(weight))

    def nodes(self) -> List[Tuple[str, float]]:
        return sorted((n, d["weight"]) for n, d in self.graph.nodes(data=True))

    def edges(self) -> List[Tuple[str, str, float]]:
        return sorted((u, v, d["weight"]) for u, v, d in self.graph.edges(data=True))

    def node_weight(self, label: str) -> float:
        return self.graph.nodes[label]["weight"]

    def edge_weight(self, observer: str, target: str) -> float:
        return self.graph.edges[observer, target]["weight"]

    def total_node_weight(self) -> float:
        return math.fsum(w for _, w in self.nodes())

    def total_edge_weight(self) -> float:
        return math.fsum(w for _, _, w in self.edges())

    def ranked_nodes(self) -> List[Tuple[str, float]]:
        """Nodes by decreasing weight: the most-watched OOIs first."""
        return sorted(self.nodes(), key=lambda nw: (-nw[1], nw[0]))

    def __len__(self) -> int:
        return self.graph.number_of_nodes()


def build_network(events: Iterable[GazeEvent]) -> AttentionNetwork:
    durations: Dict[Tuple[str, str], List[float]] = defaultdict(list)
    observers = set()
    for e in events:
        observers.add(e.observer)
        if e.is_hit:
            durations[(e.observer, e.target)].append(_duration(e))

    net = AttentionNetwork()
    for label in sorted(observers):
        net.add_node(label)
    for (observer, target) in sorted(durations):
        net.add_edge(observer, target, math.fsum(durations[(observer, target)]))
    incoming: Dict[str, List[float]] = defaultdict(list)
    for observer, target, w in net.edges():
        incoming[target].append(w)
    for label, weights in incoming.items():
        net.graph.nodes[label]["weight"] = math.fsum(weights)
    return net


def _dot_quote(label: str) -> str:
    return '"' + label.replace("\\", "\\\\").replace('"', '\\"') + '"'


def _dot_unquote(text: str) -> str:
    return re.sub(r"\\(.)", r"\1", text)


def network_to_dot(net: AttentionNetwork) -> str:
    lines = ["digraph gaze {"]
    for label, weight in net.nodes():
        lines.append(f'  {_dot_quote(label)} [weight="{format_float(weight, DOT_DECIMALS)}"];')
    for observer, target, weight in net.edges():
        lines.append(
            f'  {_dot_quote(observer)} -> {_dot_quote(target)} [weight="{format_float(weight, DOT_DECIMALS)}"];'
        )
    lines.append("}")
    return "\n".join(lines) + "\n"


def network_to_json(net: AttentionNetwork) -> str:
    doc = {
        "nodes": [{"id": label, "weight": round_float(w)} for label, w in net.nodes()],
        "edges": [{"source": u, "target": v, "weight": round_float(w)} for u, v, w in net.edges()],
    }
    return json.dumps(doc, indent=2, sort_keys=True) + "\n"


def export_network(net: AttentionNetwork, format: str = "dot") -> str:
    if format == "dot":
        return network_to_dot(net)
    if format == "json":
        return network_to_json(net)
    raise ValueError(f"unknown network format {format!r}")


_QUOTED = r'"((?:[^"\\]|\\.)*)"'
_DOT_NODE = re.compile(rf'^\s*{_QUOTED}\s*\[weight="([^"]+)"\];\s*$')
_DOT_EDGE = re.compile(rf'^\s*{_QUOTED}\s*->\s*{_QUOTED}\s*\[weight="([^"]+)"\];\s*$')


def parse_dot(text: str) -> AttentionNetwork:
    """Read back a document written by network_to_dot."""
    lines = text.strip().splitlines()
    if not lines or lines[0].strip() != "digraph gaze {" or lines[-1].strip() != "}":
        raise DataError("not a gaze network DOT document")
    net = AttentionNetwork()
    for n, line in enumerate(lines[1:-1], start=2):
        edge = _DOT_EDGE.match(line)
        if edge:
            net.add_edge(_dot_unquote(edge.group(1)), _dot_unquote(edge.group(2)), float(edge.group(3)))
            continue
        node = _DOT_NODE.match(line)
        if node:
            net.add_node(_dot_unquote(node.group(1)), float(node.group(2)))
            continue
        raise DataError(f"line {n}: cannot parse DOT statement {line.strip()!r}")
    return net


def parse_network_json(text: str) -> AttentionNetwork:
    doc = json.loads(text)
    net = AttentionNetwork()
    for node in doc.get("nodes", []):
        net.add_node(node["id"], node["weight"])
    for edge in doc.get("edges", []):
        net.add_edge(edge["source"], edge["target"], edge["weight"])
    return net


def summarize_attention(events: Iterable[GazeEvent]) -> dict:
    """Seconds and share of observed time per target, for every observer."""
    per_observer: Dict[str, Dict[str, List[float]]] = defaultdict(lambda: defaultdict(list))
    for e in events:
        per_observer[e.observer][e.target].append(_duration(e))
    summary = {}
    for observer in sorted(per_observer):
        targets = {label: math.fsum(d) for label, d in per_observer[observer].items()}
        observed = math.fsum(targets.values())
        summary[observer] = {
            "observed_s": round_float(observed),
            "targets": {label: round_float(s) for label, s in sorted(targets.items())},
            "shares": {
                label: round_float(s / observed if observed > 0 else 0.0)
                for label, s in sorted(targets.items())
            },
        }
    return summary
