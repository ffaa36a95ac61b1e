from pathlib import Path

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hgat.errors import GraphError, SpecError
from hgat.graph import (
    CROSS_RELATIONS,
    ELEC_ELEC,
    ELEC_HYDRO,
    HYDRO_ELEC,
    HYDRO_HYDRO,
    RELATIONS,
    GraphOptions,
    NodeType,
    build_graph,
    drop_heterogeneous_edges,
    load_graph_spec,
    parse_graph_spec,
    relation_segments,
    serialize_graph,
)

REPO = Path(__file__).resolve().parents[1]
BARE = GraphOptions(self_loops=False, bidirectional=False)


def small_graph(**opts):
    nodes = [("A", "elec", 0, 2), ("B", "elec", 2, 4), ("H", "hydro", 4, 5)]
    return build_graph(nodes, [("H", "A")], GraphOptions(**opts))


def test_direct_construction_sizes():
    g = small_graph(self_loops=False, bidirectional=False)
    assert len(g.nodes) == 3
    assert g.relation_sizes() == {"elec-elec": 0, "hydro-hydro": 0, "elec-hydro": 0, "hydro-elec": 1}


def test_default_options_add_reverse_edges_and_self_loops():
    g = small_graph()
    assert g.edges(HYDRO_ELEC) == [("H", "A")]
    assert g.edges(ELEC_HYDRO) == [("A", "H")]
    assert sorted(g.edges(ELEC_ELEC)) == [("A", "A"), ("B", "B")]
    assert g.edges(HYDRO_HYDRO) == [("H", "H")]


def test_cross_direction_option():
    g = small_graph(self_loops=False, cross_direction="hydro-elec")
    assert g.edges(ELEC_HYDRO) == [] and g.edges(HYDRO_ELEC) == [("H", "A")]


def test_relation_types_match_endpoint_types():
    g = small_graph()
    for r in RELATIONS:
        for s, d in g.edges(r):
            assert g.node(s).type is r.source_type and g.node(d).type is r.target_type


def test_each_node_has_one_type():
    g = small_graph()
    elec = {n.id for n in g.nodes_of(NodeType.ELEC)}
    hydro = {n.id for n in g.nodes_of(NodeType.HYDRO)}
    assert elec.isdisjoint(hydro) and elec | hydro == {n.id for n in g.nodes}


def test_undeclared_node_is_an_error():
    with pytest.raises(SpecError, match="undeclared"):
        parse_graph_spec("node A elec channels=0:1\nedge A Z\n")


@pytest.mark.parametrize(
    "text, fragment",
    [
        ("node A elec channels=0:1\nnode A hydro channels=1:2\n", "duplicate"),
        ("node A gas channels=0:1\n", "unknown node type"),
        ("node A elec channels=0:2\nnode B elec channels=1:3\n", "overlap"),
        ("node A elec channels=2:2\n", "k > 0"),
        ("node A elec chan=0:1\n", "channels="),
        ("option colour=red\n", "unknown option"),
        ("link A B\n", "unknown statement"),
        ("node A elec channels=0:2 controls=1:2\n", "overlaps sensor"),
    ],
)
def test_spec_errors(text, fragment):
    with pytest.raises(SpecError, match=fragment):
        parse_graph_spec(text)


def test_spec_error_reports_line_number():
    with pytest.raises(SpecError) as info:
        parse_graph_spec("# header\nnode A elec channels=0:1\nedge A\n")
    assert info.value.line_no == 3


def test_shipped_plant_spec():
    g = load_graph_spec(REPO / "configs" / "plant.graph")
    assert g.count(NodeType.ELEC) == 7 and g.count(NodeType.HYDRO) == 5
    # one drive coupling per generator, counted on the declared hydro -> elec direction
    assert len(g.edges(HYDRO_ELEC)) == 7


def test_spec_round_trip():
    g = load_graph_spec(REPO / "configs" / "plant.graph")
    assert parse_graph_spec(serialize_graph(g)) == g


def test_override_beats_file_option():
    g = load_graph_spec(REPO / "configs" / "plant.graph", self_loops=False)
    assert all(s != d for r in RELATIONS for s, d in g.edges(r))


def test_drop_heterogeneous_edges():
    g = load_graph_spec(REPO / "configs" / "plant.graph")
    h = drop_heterogeneous_edges(g)
    assert all(h.relation_sizes()[r.name] == 0 for r in CROSS_RELATIONS)
    for r in (ELEC_ELEC, HYDRO_HYDRO):
        assert h.edges(r) == g.edges(r)
    assert h.nodes == g.nodes


def test_drop_is_a_fixed_point_without_cross_edges():
    g = build_graph([("A", "elec", 0, 1), ("B", "elec", 1, 2)], [("A", "B")])
    assert drop_heterogeneous_edges(g) == g


def test_relation_segments_examples():
    nodes = [("a", "elec", 0, 1), ("b", "elec", 1, 2), ("c", "elec", 2, 3)]
    g = build_graph(nodes, [("a", "b"), ("c", "b"), ("a", "c")], BARE)
    src, tgt, idx = relation_segments(g, ELEC_ELEC)
    assert tgt.tolist() == [1, 1, 2] and src.tolist() == [0, 2, 0]
    assert idx.segments() == {1: [0, 1], 2: [2]}

    src, tgt, idx = relation_segments(g, ELEC_HYDRO)
    assert src.size == 0 and tgt.size == 0 and idx.n_edges == 0

    loop = build_graph([("a", "elec", 0, 1)], [("a", "a")], BARE)
    src, tgt, idx = relation_segments(loop, ELEC_ELEC)
    assert idx.segments() == {0: [0]}


def test_segment_index_rejects_out_of_range():
    from hgat.autodiff import SegmentIndex

    with pytest.raises(GraphError):
        SegmentIndex(np.array([0, 3]), 3)


@st.composite
def random_graphs(draw):
    n_el = draw(st.integers(1, 6))
    n_hy = draw(st.integers(0, 6))
    nodes, col = [], 0
    for i in range(n_el + n_hy):
        k = draw(st.integers(1, 3))
        nodes.append((f"n{i}", "elec" if i < n_el else "hydro", col, col + k))
        col += k
    ids = [n[0] for n in nodes]
    edges = draw(st.lists(st.tuples(st.sampled_from(ids), st.sampled_from(ids)), max_size=20))
    opts = GraphOptions(draw(st.booleans()), draw(st.booleans()))
    return build_graph(nodes, edges, opts)


@settings(max_examples=100, deadline=None)
@given(random_graphs())
def test_random_graph_invariants(g):
    assert parse_graph_spec(serialize_graph(g)) == g
    h = drop_heterogeneous_edges(g)
    assert len(h.nodes) == len(g.nodes)
    for r in RELATIONS:
        src, tgt, idx = relation_segments(g, r)
        assert np.all(np.diff(tgt) >= 0)
        for s, d in g.edges(r):
            assert g.node(s).type is r.source_type
        edges = set(g.edges(r))
        assert len(edges) == len(g.edges(r))  # no duplicates
        if g.options.self_loops and r in (ELEC_ELEC, HYDRO_HYDRO):
            for n in g.nodes_of(r.source_type):
                assert (n.id, n.id) in edges
