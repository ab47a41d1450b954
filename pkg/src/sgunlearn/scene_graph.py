"""Scene-graph data model: objects, relationship triples, padding, ROIs.

A scene graph is ``G = (O, E)`` where every object carries its own identity
token, so two objects of the same category with the same attributes are still
different objects.  Graphs are immutable; every mutating helper returns a
new graph.
"""

from __future__ import annotations

import json
import math
from collections import deque
from dataclasses import dataclass, field, replace
from typing import Iterable, Mapping, Sequence

from .errors import (
    BadBBox,
    DanglingEdge,
    DegenerateBox,
    DuplicateId,
    ParseError,
    TooManyObjects,
    UnknownId,
    UnknownLabel,
)

PAD_CATEGORY = "__pad__"
PAD_EPS = 1e-6
DEFAULT_PAD_SIZE = 10

# Pixel coordinates closer than this to an integer are snapped before
# floor/ceil, so 0.3 * 10 rounds to 3 and not 4.
_SNAP = 1e-6


@dataclass(frozen=True)
class ObjectNode:
    id: str
    category: str
    attributes: tuple[str, ...] = ()
    identity_key: int = 0
    bbox: tuple[float, float, float, float] = (0.0, 0.0, 1.0, 1.0)

    @property
    def is_pad(self) -> bool:
        return self.category == PAD_CATEGORY

    @property
    def center(self) -> tuple[float, float]:
        x0, y0, x1, y1 = self.bbox
        return (0.5 * (x0 + x1), 0.5 * (y0 + y1))


@dataclass(frozen=True)
class RelationshipTriple:
    subject_id: str
    predicate: str
    object_id: str


@dataclass(frozen=True)
class Vocabulary:
    categories: tuple[str, ...]
    attributes: tuple[str, ...]
    predicates: tuple[str, ...]
    generalization_map: Mapping[str, str] = field(default_factory=dict)

    def __post_init__(self):
        for name in ("categories", "attributes", "predicates"):
            labels = getattr(self, name)
            if len(set(labels)) != len(labels):
                raise ValueError(f"duplicate labels in vocabulary {name}")
        cats = set(self.categories)
        for k, v in self.generalization_map.items():
            if k not in cats or v not in cats:
                raise ValueError(f"generalization {k!r} -> {v!r} uses labels outside categories")

    def category_index(self, label: str) -> int:
        return self.categories.index(label)

    def to_dict(self) -> dict:
        return {
            "categories": list(self.categories),
            "attributes": list(self.attributes),
            "predicates": list(self.predicates),
            "generalization_map": dict(sorted(self.generalization_map.items())),
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "Vocabulary":
        return cls(
            categories=tuple(d["categories"]),
            attributes=tuple(d["attributes"]),
            predicates=tuple(d["predicates"]),
            generalization_map=dict(d.get("generalization_map", {})),
        )


@dataclass(frozen=True)
class SceneGraph:
    nodes: tuple[ObjectNode, ...]
    edges: tuple[RelationshipTriple, ...] = ()
    pad_count: int = 0

    def __post_init__(self):
        object.__setattr__(self, "nodes", tuple(self.nodes))
        object.__setattr__(self, "edges", tuple(self.edges))

    @property
    def objects(self) -> tuple[ObjectNode, ...]:
        """Non-padding nodes, in graph order."""
        return tuple(n for n in self.nodes if not n.is_pad)

    def node(self, node_id: str) -> ObjectNode:
        for n in self.nodes:
            if n.id == node_id and not n.is_pad:
                return n
        raise UnknownId(f"no addressable node with id {node_id!r}")

    def index_of(self, node_id: str) -> int:
        for i, n in enumerate(self.nodes):
            if n.id == node_id and not n.is_pad:
                return i
        raise UnknownId(f"no addressable node with id {node_id!r}")

    def neighbours(self) -> dict[str, set[str]]:
        adj: dict[str, set[str]] = {n.id: set() for n in self.objects}
        for e in self.edges:
            adj.setdefault(e.subject_id, set()).add(e.object_id)
            adj.setdefault(e.object_id, set()).add(e.subject_id)
        return adj

    def distances_from(self, node_id: str) -> dict[str, int]:
        """Undirected hop distance from ``node_id`` to every reachable node."""
        adj = self.neighbours()
        if node_id not in adj:
            raise UnknownId(f"no addressable node with id {node_id!r}")
        dist = {node_id: 0}
        queue = deque([node_id])
        while queue:
            cur = queue.popleft()
            for nxt in sorted(adj[cur]):
                if nxt not in dist:
                    dist[nxt] = dist[cur] + 1
                    queue.append(nxt)
        return dist


def validate_graph(g: SceneGraph, vocab: Vocabulary | None = None) -> None:
    """Raise on the first violated invariant; return ``None`` for valid graphs."""
    seen: set[str] = set()
    n_pad = 0
    for i, node in enumerate(g.nodes):
        if node.id in seen:
            raise DuplicateId(f"duplicate node id {node.id!r} at position {i}")
        seen.add(node.id)
        if node.is_pad:
            n_pad += 1
            continue
        if n_pad:
            raise BadBBox(f"real node {node.id!r} follows padding at position {i}")
        _check_bbox(node)
        if vocab is not None:
            if node.category not in vocab.categories:
                raise UnknownLabel(f"node {node.id!r}: unknown category {node.category!r}")
            for a in node.attributes:
                if a not in vocab.attributes:
                    raise UnknownLabel(f"node {node.id!r}: unknown attribute {a!r}")
    if n_pad != g.pad_count:
        raise BadBBox(f"pad_count {g.pad_count} disagrees with {n_pad} padding nodes")

    real = {n.id for n in g.objects}
    for k, e in enumerate(g.edges):
        for end in (e.subject_id, e.object_id):
            if end not in real:
                raise DanglingEdge(f"edge {k} ({e.subject_id}, {e.predicate}, {e.object_id}) references absent id {end!r}")
        if e.subject_id == e.object_id:
            raise DanglingEdge(f"edge {k} is a self-loop on {e.subject_id!r}")
        if vocab is not None and e.predicate not in vocab.predicates:
            raise UnknownLabel(f"edge {k}: unknown predicate {e.predicate!r}")


def _check_bbox(node: ObjectNode) -> None:
    bb = node.bbox
    if len(bb) != 4 or not all(math.isfinite(v) for v in bb):
        raise BadBBox(f"node {node.id!r}: malformed bbox {bb!r}")
    x0, y0, x1, y1 = bb
    if not (0.0 <= x0 < x1 <= 1.0 and 0.0 <= y0 < y1 <= 1.0):
        raise BadBBox(f"node {node.id!r}: bbox {bb!r} not an ordered rectangle inside [0,1]")


def pad_node(k: int) -> ObjectNode:
    return ObjectNode(id=f"{PAD_CATEGORY}{k}", category=PAD_CATEGORY, bbox=(0.0, 0.0, PAD_EPS, PAD_EPS))


def pad_graph(g: SceneGraph, target_size: int = DEFAULT_PAD_SIZE) -> SceneGraph:
    real = g.objects
    if len(real) > target_size:
        raise TooManyObjects(f"{len(real)} objects exceed the padded size {target_size}")
    n_pad = target_size - len(real)
    return SceneGraph(real + tuple(pad_node(k) for k in range(n_pad)), g.edges, n_pad)


def _snap(v: float) -> float:
    r = round(v)
    return float(r) if abs(v - r) < _SNAP else v


def roi_of(node: ObjectNode, width: int, height: int) -> tuple[int, int, int, int]:
    """Pixel rectangle ``(x0, y0, x1, y1)`` (half-open) covering the bbox."""
    if width < 1 or height < 1:
        raise ValueError("image dimensions must be positive")
    if not node.is_pad:
        _check_bbox(node)
    x0, y0, x1, y1 = node.bbox
    px0 = min(max(math.floor(_snap(x0 * width)), 0), width)
    py0 = min(max(math.floor(_snap(y0 * height)), 0), height)
    px1 = min(max(math.ceil(_snap(x1 * width)), 0), width)
    py1 = min(max(math.ceil(_snap(y1 * height)), 0), height)
    if px1 <= px0 or py1 <= py0:
        raise DegenerateBox(f"node {node.id!r}: bbox {node.bbox!r} has no pixel area at {width}x{height}")
    return (px0, py0, px1, py1)


def mutate_label(g: SceneGraph, node_id: str, new_category: str, vocab: Vocabulary | None = None) -> SceneGraph:
    idx = g.index_of(node_id)
    if new_category == PAD_CATEGORY or (vocab is not None and new_category not in vocab.categories):
        raise UnknownLabel(f"unknown category {new_category!r}")
    nodes = list(g.nodes)
    nodes[idx] = replace(nodes[idx], category=new_category)
    return SceneGraph(tuple(nodes), g.edges, g.pad_count)


def graph_diff(a: SceneGraph, b: SceneGraph) -> list[tuple[int, str]]:
    """(node index, field name) pairs that differ; edges reported as (-1, 'edges')."""
    out = []
    if len(a.nodes) != len(b.nodes):
        return [(-1, "nodes")]
    for i, (na, nb) in enumerate(zip(a.nodes, b.nodes)):
        for f in ("id", "category", "attributes", "identity_key", "bbox"):
            if getattr(na, f) != getattr(nb, f):
                out.append((i, f))
    if a.edges != b.edges:
        out.append((-1, "edges"))
    if a.pad_count != b.pad_count:
        out.append((-1, "pad_count"))
    return out


# serialization ----------------------------------------------------------


def graph_to_dict(g: SceneGraph) -> dict:
    return {
        "nodes": [
            {
                "id": n.id,
                "category": n.category,
                "attributes": list(n.attributes),
                "identity_key": int(n.identity_key),
                "bbox": [float(v) for v in n.bbox],
            }
            for n in g.nodes
        ],
        "edges": [{"s": e.subject_id, "p": e.predicate, "o": e.object_id} for e in g.edges],
        "pad_count": int(g.pad_count),
    }


def serialize(g: SceneGraph) -> str:
    return json.dumps(graph_to_dict(g), ensure_ascii=False, separators=(",", ":"))


def _require(obj, key: str, where: str, kind):
    if not isinstance(obj, dict) or key not in obj:
        raise ParseError(f"{where}: missing field {key!r}")
    val = obj[key]
    if kind is float:
        ok = isinstance(val, (int, float)) and not isinstance(val, bool)
    elif kind is int:
        ok = isinstance(val, int) and not isinstance(val, bool)
    else:
        ok = isinstance(val, kind)
    if not ok:
        raise ParseError(f"{where}.{key}: expected {getattr(kind, '__name__', kind)}, got {type(val).__name__}")
    return val


def graph_from_dict(d) -> SceneGraph:
    nodes_raw = _require(d, "nodes", "graph", list)
    edges_raw = _require(d, "edges", "graph", list)
    pad_count = _require(d, "pad_count", "graph", int)
    nodes = []
    for i, nd in enumerate(nodes_raw):
        where = f"nodes[{i}]"
        bbox = _require(nd, "bbox", where, list)
        if len(bbox) != 4 or not all(isinstance(v, (int, float)) and not isinstance(v, bool) for v in bbox):
            raise ParseError(f"{where}.bbox: expected 4 numbers")
        attrs = _require(nd, "attributes", where, list)
        if not all(isinstance(a, str) for a in attrs):
            raise ParseError(f"{where}.attributes: expected strings")
        nodes.append(
            ObjectNode(
                id=_require(nd, "id", where, str),
                category=_require(nd, "category", where, str),
                attributes=tuple(attrs),
                identity_key=_require(nd, "identity_key", where, int),
                bbox=tuple(float(v) for v in bbox),
            )
        )
    edges = []
    for k, ed in enumerate(edges_raw):
        where = f"edges[{k}]"
        edges.append(
            RelationshipTriple(_require(ed, "s", where, str), _require(ed, "p", where, str), _require(ed, "o", where, str))
        )
    return SceneGraph(tuple(nodes), tuple(edges), pad_count)


def deserialize(text: str) -> SceneGraph:
    try:
        d = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ParseError(f"line {exc.lineno} column {exc.colno}: {exc.msg}") from exc
    return graph_from_dict(d)


def objects_of(graphs: Iterable[SceneGraph]) -> Sequence[ObjectNode]:
    return [n for g in graphs for n in g.objects]
