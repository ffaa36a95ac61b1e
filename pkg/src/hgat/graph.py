"""Heterogeneous plant graph: typed nodes, typed relations, spec-file IO.

Graph-spec grammar (one statement per line, ``#`` starts a comment)::

    option self_loops=on|off            # default on
    option bidirectional=on|off         # default on; emit reverse of every edge
    option cross_direction=both|hydro-elec|elec-hydro   # default both
    node <id> <elec|hydro> channels=<start>:<end> [controls=<start>:<end>]
    edge <src> <dst>

Channel ranges index the data columns of the CSV (0 = first column after the
timestamp), ``end`` exclusive.  ``controls`` names the control columns that
belong to a node (its dispatch command); sensor ranges must be disjoint from
each other and from every control range.  The relation of an edge is inferred from the
types of its endpoints.
"""
from __future__ import annotations

import enum
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Optional

import numpy as np

from .autodiff import SegmentIndex
from .errors import SpecError, UsageError


class NodeType(str, enum.Enum):
    ELEC = "elec"
    HYDRO = "hydro"


@dataclass(frozen=True)
class RelationType:
    source_type: NodeType
    name: str
    target_type: NodeType

    def __str__(self) -> str:
        return self.name


def _rel(s: NodeType, t: NodeType) -> RelationType:
    return RelationType(s, f"{s.value}-{t.value}", t)


ELEC_ELEC = _rel(NodeType.ELEC, NodeType.ELEC)
HYDRO_HYDRO = _rel(NodeType.HYDRO, NodeType.HYDRO)
ELEC_HYDRO = _rel(NodeType.ELEC, NodeType.HYDRO)
HYDRO_ELEC = _rel(NodeType.HYDRO, NodeType.ELEC)
RELATIONS: tuple[RelationType, ...] = (ELEC_ELEC, HYDRO_HYDRO, ELEC_HYDRO, HYDRO_ELEC)
CROSS_RELATIONS = (ELEC_HYDRO, HYDRO_ELEC)
RELATION_BY_NAME = {r.name: r for r in RELATIONS}


def relation_between(source: NodeType, target: NodeType) -> RelationType:
    return RELATION_BY_NAME[f"{source.value}-{target.value}"]


@dataclass(frozen=True)
class Node:
    id: str
    type: NodeType
    start: int
    end: int
    ordinal: int = 0
    controls: Optional[tuple[int, int]] = None

    @property
    def k(self) -> int:
        return self.end - self.start

    @property
    def channel_slice(self) -> slice:
        return slice(self.start, self.end)

    @property
    def n_controls(self) -> int:
        return 0 if self.controls is None else self.controls[1] - self.controls[0]


@dataclass(frozen=True)
class GraphOptions:
    self_loops: bool = True
    bidirectional: bool = True
    cross_direction: str = "both"


@dataclass(frozen=True)
class HeteroGraph:
    """Immutable heterogeneous graph.

    ``relations`` maps every relation type to its directed edge list of
    ``(source id, target id)`` pairs.  ``declared`` keeps the edges exactly as
    written in the spec so that serialization round-trips.
    """

    nodes: tuple[Node, ...]
    relations: dict
    options: GraphOptions = GraphOptions()
    declared: tuple[tuple[str, str], ...] = ()
    _by_id: dict = field(init=False, compare=False, repr=False)

    def __post_init__(self):
        object.__setattr__(self, "_by_id", {n.id: n for n in self.nodes})

    def node(self, node_id: str) -> Node:
        return self._by_id[node_id]

    def nodes_of(self, t: NodeType) -> list[Node]:
        return [n for n in self.nodes if n.type == t]

    def count(self, t: NodeType) -> int:
        return sum(1 for n in self.nodes if n.type == t)

    def edges(self, r: RelationType) -> list[tuple[str, str]]:
        return list(self.relations.get(r, ()))

    def relation_sizes(self) -> dict[str, int]:
        return {r.name: len(self.relations.get(r, ())) for r in RELATIONS}

    @property
    def n_edges(self) -> int:
        return sum(len(v) for v in self.relations.values())

    def sensor_columns(self) -> list[int]:
        cols: list[int] = []
        for n in self.nodes:
            cols.extend(range(n.start, n.end))
        return sorted(cols)

    def control_columns(self) -> list[int]:
        cols: set[int] = set()
        for n in self.nodes:
            if n.controls is not None:
                cols.update(range(*n.controls))
        return sorted(cols)

    def __eq__(self, other) -> bool:
        if not isinstance(other, HeteroGraph):
            return NotImplemented
        return (
            self.nodes == other.nodes
            and self.options == other.options
            and self.declared == other.declared
            and all(self.edges(r) == other.edges(r) for r in RELATIONS)
        )

    __hash__ = None


def build_graph(
    nodes: Iterable[tuple],
    edges: Iterable[tuple[str, str]],
    options: GraphOptions = GraphOptions(),
) -> HeteroGraph:
    """Validate declarations and expand them into typed relations.

    ``nodes`` holds ``(id, type, start, end)`` or ``(id, type, start, end,
    (control_start, control_end))`` tuples.
    """
    built: list[Node] = []
    counters = {t: 0 for t in NodeType}
    seen: dict[str, Node] = {}
    for spec in nodes:
        nid, ntype, start, end = spec[:4]
        ctrl = tuple(int(c) for c in spec[4]) if len(spec) > 4 and spec[4] is not None else None
        if nid in seen:
            raise SpecError(f"duplicate node id {nid!r}")
        try:
            t = NodeType(ntype)
        except ValueError:
            raise SpecError(f"unknown node type {ntype!r} for node {nid!r}") from None
        if end <= start or start < 0:
            raise SpecError(f"node {nid!r} needs k > 0 channels, got {start}:{end}")
        if ctrl is not None and (ctrl[1] <= ctrl[0] or ctrl[0] < 0):
            raise SpecError(f"node {nid!r} has an empty control range {ctrl[0]}:{ctrl[1]}")
        n = Node(nid, t, int(start), int(end), counters[t], ctrl)
        counters[t] += 1
        seen[nid] = n
        built.append(n)
    _check_overlaps(built)

    declared = tuple((str(s), str(d)) for s, d in edges)
    rel_edges: dict[RelationType, list[tuple[str, str]]] = {r: [] for r in RELATIONS}
    members: dict[RelationType, set] = {r: set() for r in RELATIONS}

    def put(s: str, d: str) -> None:
        r = relation_between(seen[s].type, seen[d].type)
        if r in CROSS_RELATIONS and options.cross_direction not in ("both", r.name):
            return
        if (s, d) not in members[r]:
            members[r].add((s, d))
            rel_edges[r].append((s, d))

    for s, d in declared:
        for x in (s, d):
            if x not in seen:
                raise SpecError(f"edge {s} -> {d} references undeclared node {x!r}")
        put(s, d)
        if options.bidirectional and s != d:
            put(d, s)
    if options.self_loops:
        for n in built:
            put(n.id, n.id)
    return HeteroGraph(tuple(built), rel_edges, options, declared)


def _check_overlaps(nodes: list[Node]) -> None:
    spans = sorted((n.start, n.end, n.id) for n in nodes)
    for (s0, e0, a), (s1, e1, b) in zip(spans, spans[1:]):
        if s1 < e0:
            raise SpecError(f"channel ranges of {a!r} and {b!r} overlap")
    sensor = set()
    for n in nodes:
        sensor.update(range(n.start, n.end))
    for n in nodes:
        if n.controls is not None and sensor.intersection(range(*n.controls)):
            raise SpecError(f"control range of {n.id!r} overlaps sensor channels")


def _parse_range(text: str, line_no: int, line: str, key: str = "channels") -> tuple[int, int]:
    if not text.startswith(key + "="):
        raise SpecError(f"expected {key}=<start>:<end>", line_no, line)
    try:
        a, b = text[len(key) + 1:].split(":")
        return int(a), int(b)
    except ValueError:
        raise SpecError("bad channel range", line_no, line) from None


_ON = {"on": True, "off": False, "true": True, "false": False}


def parse_graph_spec(text: str, **overrides) -> HeteroGraph:
    nodes: list[tuple] = []
    edges: list[tuple[str, str]] = []
    edge_lines: list[tuple[int, str]] = []
    opts: dict = {}
    for line_no, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split()
        kw = parts[0]
        if kw == "node":
            if len(parts) not in (4, 5):
                raise SpecError(
                    "expected: node <id> <elec|hydro> channels=a:b [controls=c:d]", line_no, raw
                )
            a, b = _parse_range(parts[3], line_no, raw)
            ctrl = _parse_range(parts[4], line_no, raw, "controls") if len(parts) == 5 else None
            if parts[2] not in ("elec", "hydro"):
                raise SpecError(f"unknown node type {parts[2]!r}", line_no, raw)
            if any(n[0] == parts[1] for n in nodes):
                raise SpecError(f"duplicate node id {parts[1]!r}", line_no, raw)
            nodes.append((parts[1], parts[2], a, b, ctrl))
        elif kw == "edge":
            if len(parts) != 3:
                raise SpecError("expected: edge <src> <dst>", line_no, raw)
            edges.append((parts[1], parts[2]))
            edge_lines.append((line_no, raw))
        elif kw == "option":
            if len(parts) != 2 or "=" not in parts[1]:
                raise SpecError("expected: option <key>=<value>", line_no, raw)
            key, val = parts[1].split("=", 1)
            if key in ("self_loops", "bidirectional"):
                if val not in _ON:
                    raise SpecError(f"option {key} takes on/off", line_no, raw)
                opts[key] = _ON[val]
            elif key == "cross_direction":
                if val not in ("both", "hydro-elec", "elec-hydro"):
                    raise SpecError("cross_direction must be both|hydro-elec|elec-hydro", line_no, raw)
                opts[key] = val
            else:
                raise SpecError(f"unknown option {key!r}", line_no, raw)
        else:
            raise SpecError(f"unknown statement {kw!r}", line_no, raw)

    ids = {n[0] for n in nodes}
    for (s, d), (line_no, raw) in zip(edges, edge_lines):
        for x in (s, d):
            if x not in ids:
                raise SpecError(f"edge references undeclared node {x!r}", line_no, raw)
    opts.update({k: v for k, v in overrides.items() if v is not None})
    for i, n in enumerate(nodes):
        for m in nodes[i + 1:]:
            if n[2] < m[3] and m[2] < n[3]:
                raise SpecError(f"channel ranges of {n[0]!r} and {m[0]!r} overlap")
    return build_graph(nodes, edges, GraphOptions(**opts))


def load_graph_spec(path, **overrides) -> HeteroGraph:
    """Read and validate a graph-spec file.

    Keyword overrides (``self_loops``, ``bidirectional``, ``cross_direction``)
    take precedence over ``option`` lines in the file.
    """
    text = Path(path).read_text(encoding="utf-8")
    return parse_graph_spec(text, **overrides)


def _onoff(b: bool) -> str:
    return "on" if b else "off"


def serialize_graph(g: HeteroGraph) -> str:
    lines = [
        f"option self_loops={_onoff(g.options.self_loops)}",
        f"option bidirectional={_onoff(g.options.bidirectional)}",
        f"option cross_direction={g.options.cross_direction}",
    ]
    for n in g.nodes:
        line = f"node {n.id} {n.type.value} channels={n.start}:{n.end}"
        if n.controls is not None:
            line += f" controls={n.controls[0]}:{n.controls[1]}"
        lines.append(line)
    for s, d in g.declared:
        lines.append(f"edge {s} {d}")
    return "\n".join(lines) + "\n"


def save_graph_spec(g: HeteroGraph, path) -> None:
    Path(path).write_text(serialize_graph(g), encoding="utf-8")


def drop_heterogeneous_edges(g: HeteroGraph) -> HeteroGraph:
    """Copy of ``g`` without elec-hydro / hydro-elec edges; nodes are kept."""
    rels = {r: ([] if r in CROSS_RELATIONS else list(g.relations.get(r, ()))) for r in RELATIONS}
    declared = tuple(
        (s, d) for s, d in g.declared if g.node(s).type == g.node(d).type
    )
    return replace(g, relations=rels, declared=declared)


def relation_segments(g: HeteroGraph, r: RelationType) -> tuple[np.ndarray, np.ndarray, SegmentIndex]:
    """Edge arrays of relation ``r`` sorted by target ordinal.

    Returns ``(source ordinals, target ordinals, SegmentIndex)``; ordinals are
    per node type.
    """
    if r not in RELATIONS:
        raise UsageError(f"unknown relation {r!r}")
    pairs = [(g.node(s).ordinal, g.node(d).ordinal) for s, d in g.relations.get(r, ())]
    if not pairs:
        empty = np.zeros(0, dtype=np.int64)
        return empty, empty, SegmentIndex(empty, g.count(r.target_type))
    arr = np.asarray(pairs, dtype=np.int64)
    order = np.argsort(arr[:, 1], kind="stable")
    arr = arr[order]
    return arr[:, 0].copy(), arr[:, 1].copy(), SegmentIndex(arr[:, 1], g.count(r.target_type))
