import json

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sgunlearn.errors import (
    BadBBox,
    DanglingEdge,
    DegenerateBox,
    DuplicateId,
    ParseError,
    TooManyObjects,
    UnknownId,
    UnknownLabel,
)
from sgunlearn.scene_graph import (
    PAD_CATEGORY,
    ObjectNode,
    RelationshipTriple,
    SceneGraph,
    Vocabulary,
    deserialize,
    graph_diff,
    mutate_label,
    pad_graph,
    roi_of,
    serialize,
    validate_graph,
)

VOCAB = Vocabulary(
    categories=("man", "woman", "girl", "person", "tree", "café"),
    attributes=("red", "tall"),
    predicates=("left-of", "above"),
    generalization_map={"man": "person", "woman": "person", "girl": "person"},
)


def node(i, cat="girl", attrs=(), key=0, bbox=(0.1, 0.1, 0.4, 0.4)):
    return ObjectNode(f"o{i}", cat, tuple(attrs), key, bbox)


def test_duplicate_id_rejected():
    g = SceneGraph((node(1), node(1, "man")))
    with pytest.raises(DuplicateId, match="o1"):
        validate_graph(g, VOCAB)


def test_same_category_distinct_ids_are_distinct_objects():
    a, b = node(1, "girl", ("red",)), node(2, "girl", ("red",))
    validate_graph(SceneGraph((a, b)), VOCAB)
    assert a != b


def test_dangling_edge_names_missing_id():
    g = SceneGraph((node(1), node(2)), (RelationshipTriple("o1", "left-of", "o9"),))
    with pytest.raises(DanglingEdge, match="o9"):
        validate_graph(g, VOCAB)


def test_bad_bbox_and_unknown_label():
    with pytest.raises(BadBBox):
        validate_graph(SceneGraph((node(1, bbox=(0.5, 0.1, 0.2, 0.4)),)), VOCAB)
    with pytest.raises(UnknownLabel, match="dragon"):
        validate_graph(SceneGraph((node(1, "dragon"),)), VOCAB)
    with pytest.raises(UnknownLabel):
        validate_graph(SceneGraph((node(1), node(2)), (RelationshipTriple("o1", "under", "o2"),)), VOCAB)


def test_pad_graph_sizes():
    g = SceneGraph(tuple(node(i) for i in range(3)))
    p = pad_graph(g, 10)
    assert len(p.nodes) == 10 and p.pad_count == 7
    assert p.nodes[:3] == g.nodes
    assert all(n.category == PAD_CATEGORY for n in p.nodes[3:])
    validate_graph(p, VOCAB)
    full = pad_graph(SceneGraph(tuple(node(i) for i in range(10))), 10)
    assert full.pad_count == 0 and len(full.nodes) == 10
    with pytest.raises(TooManyObjects):
        pad_graph(SceneGraph(tuple(node(i) for i in range(11))), 10)


def test_pad_graph_idempotent():
    p = pad_graph(SceneGraph(tuple(node(i) for i in range(4))), 10)
    assert pad_graph(p, 10) == p


def test_roi_examples():
    assert roi_of(node(1, bbox=(0, 0, 1, 1)), 64, 64) == (0, 0, 64, 64)
    # floor(0.25*64) = 16, ceil(0.75*64) = 48
    assert roi_of(node(1, bbox=(0.25, 0.25, 0.75, 0.75)), 64, 64) == (16, 16, 48, 48)
    assert roi_of(node(1, bbox=(0.3, 0.3, 0.7, 0.7)), 10, 10) == (3, 3, 7, 7)
    with pytest.raises(DegenerateBox):
        roi_of(node(1, bbox=(0.5, 0.5, 0.5 + 1e-9, 0.5 + 1e-9)), 64, 64)


def _span():
    return st.tuples(st.floats(0, 1), st.floats(0, 1)).filter(lambda t: t[0] != t[1]).map(sorted)


boxes = st.tuples(_span(), _span()).map(lambda p: (p[0][0], p[1][0], p[0][1], p[1][1]))


@settings(max_examples=200, deadline=None)
@given(boxes, st.integers(1, 128), st.integers(1, 128))
def test_roi_inside_image(bb, w, h):
    try:
        x0, y0, x1, y1 = roi_of(node(1, bbox=bb), w, h)
    except DegenerateBox:
        return
    assert 0 <= x0 < x1 <= w and 0 <= y0 < y1 <= h
    # the rectangle covers the continuous box (up to the snapping tolerance)
    assert x0 <= bb[0] * w + 1e-6 and x1 >= bb[2] * w - 1e-6


def test_mutate_label_one_field():
    g = pad_graph(SceneGraph((node(1, "man"), node(2, "tree"))), 10)
    m = mutate_label(g, "o1", "person", VOCAB)
    assert graph_diff(g, m) == [(0, "category")]
    assert m.node("o1").category == "person"
    assert mutate_label(g, "o1", "man", VOCAB) == g
    with pytest.raises(UnknownId):
        mutate_label(g, g.nodes[-1].id, "man", VOCAB)
    with pytest.raises(UnknownLabel):
        mutate_label(g, "o1", "dragon", VOCAB)


def test_deserialize_missing_bbox_names_field():
    d = json.loads(serialize(SceneGraph((node(1),))))
    del d["nodes"][0]["bbox"]
    with pytest.raises(ParseError, match="bbox"):
        deserialize(json.dumps(d))


def test_deserialize_bad_json_reports_line():
    with pytest.raises(ParseError, match="line 1"):
        deserialize('{"nodes": [')


def test_unicode_label_round_trip_byte_exact():
    g = SceneGraph((node(1, "café"),))
    text = serialize(g)
    assert deserialize(text) == g
    assert serialize(deserialize(text)).encode() == text.encode()


def test_field_order_fixed():
    text = serialize(pad_graph(SceneGraph((node(1),), ()), 2))
    d = json.loads(text)
    assert list(d) == ["nodes", "edges", "pad_count"]
    assert list(d["nodes"][0]) == ["id", "category", "attributes", "identity_key", "bbox"]


@st.composite
def graphs(draw):
    n = draw(st.integers(0, 10))
    nodes = tuple(
        ObjectNode(
            f"o{i}",
            draw(st.sampled_from(VOCAB.categories)),
            tuple(draw(st.lists(st.sampled_from(VOCAB.attributes), max_size=2, unique=True))),
            draw(st.integers(0, 2**64 - 1)),
            draw(boxes),
        )
        for i in range(n)
    )
    edges = []
    if n >= 2:
        for _ in range(draw(st.integers(0, 5))):
            s, o = draw(st.lists(st.integers(0, n - 1), min_size=2, max_size=2, unique=True))
            edges.append(RelationshipTriple(f"o{s}", draw(st.sampled_from(VOCAB.predicates)), f"o{o}"))
    return pad_graph(SceneGraph(nodes, tuple(edges)), 10)


@settings(max_examples=100, deadline=None)
@given(graphs())
def test_round_trip_random_graphs(g):
    validate_graph(g, VOCAB)
    assert deserialize(serialize(g)) == g


def test_distances_from():
    g = SceneGraph(
        (node(1), node(2), node(3), node(4)),
        (RelationshipTriple("o1", "left-of", "o2"), RelationshipTriple("o3", "above", "o2")),
    )
    assert g.distances_from("o1") == {"o1": 0, "o2": 1, "o3": 2}
