import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from netgen import brute_force_proximities, chain_graph, random_cyclic_graph
from reclogit import (
    InputError,
    Link,
    ParseError,
    build_proximities,
    load_network,
    make_graph,
    reachable_links,
    remove_link,
    save_network,
)

TOY_TRANSITIONS = {
    ("0-1", "1-2"), ("0-1", "1-5"),
    ("1-2", "2-3"), ("1-2", "2-4"),
    ("2-3", "3-5"),
    ("2-4", "4-3"), ("2-4", "4-5"),
    ("4-3", "3-5"),
    ("3-5", "5-6"), ("4-5", "5-6"), ("1-5", "5-6"),
}


class TestLoadNetwork:
    def test_toy_adjacency_matches_hand_enumeration(self, toy):
        g = toy.graph
        assert g.link_count == 9
        assert g.node_count == 7
        found = {
            (g.links[k].link_id, g.links[a].link_id)
            for k in range(9)
            for a in range(9)
            if g.adjacency[k, a] == 1
        }
        assert found == TOY_TRANSITIONS
        assert int(g.adjacency.sum()) == len(TOY_TRANSITIONS)

    def test_adjacency_head_tail_consistency(self, toy):
        g = toy.graph
        for k in range(9):
            for a in range(9):
                if g.adjacency[k, a]:
                    assert g.links[k].head == g.links[a].tail

    def test_single_link_has_empty_adjacency(self):
        g = make_graph([Link("od", "o", "d")])
        assert g.adjacency.shape == (1, 1)
        assert g.adjacency[0, 0] == 0

    def test_round_trip_through_csv(self, toy, tmp_path):
        path = tmp_path / "net.csv"
        save_network(path, toy.graph)
        loaded = load_network(path)
        assert np.array_equal(loaded.adjacency, toy.graph.adjacency)
        assert np.array_equal(loaded.link_features["travel_time"],
                              toy.graph.link_features["travel_time"])

    def test_undefined_node_reference_is_parse_error(self, tmp_path):
        path = tmp_path / "bad.csv"
        path.write_text("link_id,tail_node,head_node,travel_time\na,1,2,1.0\nb,2,,1.0\n")
        with pytest.raises(ParseError, match="undefined node"):
            load_network(path)

    def test_duplicate_link_id_names_line(self, tmp_path):
        path = tmp_path / "dup.csv"
        path.write_text("link_id,tail_node,head_node\na,1,2\na,2,3\n")
        with pytest.raises(ParseError, match="dup.csv:3"):
            load_network(path)

    def test_malformed_row_names_line(self, tmp_path):
        path = tmp_path / "mal.csv"
        path.write_text("link_id,tail_node,head_node,travel_time\na,1,2,1.0\nb,2,3\n")
        with pytest.raises(ParseError, match="mal.csv:3"):
            load_network(path)

    def test_non_numeric_feature_cell(self, tmp_path):
        path = tmp_path / "nan.csv"
        path.write_text("link_id,tail_node,head_node,travel_time\na,1,2,fast\n")
        with pytest.raises(ParseError, match="travel_time"):
            load_network(path)

    def test_loop_link_rejected_by_default(self, tmp_path):
        path = tmp_path / "loop.csv"
        path.write_text("link_id,tail_node,head_node\na,1,1\n")
        with pytest.raises(ParseError, match="loop"):
            load_network(path)


class TestRemoveLink:
    def test_removal_drops_exactly_two_transitions(self, toy):
        before = int(toy.graph.adjacency.sum())
        after = remove_link(toy.graph, toy.removed_link)
        assert int(after.adjacency.sum()) == before - 2
        assert after.adjacency[3, 6] == 0
        assert after.adjacency[6, 8] == 0

    def test_removal_is_idempotent(self, toy):
        once = remove_link(toy.graph, 6)
        twice = remove_link(once, 6)
        assert np.array_equal(once.adjacency, twice.adjacency)

    def test_dimensions_are_stable(self, toy):
        after = remove_link(toy.graph, 6)
        assert after.adjacency.shape == toy.graph.adjacency.shape
        assert len(after.links) == len(toy.graph.links)
        assert after.removed == {6}

    def test_invalid_index_rejected(self, toy):
        with pytest.raises(InputError):
            remove_link(toy.graph, 99)

    def test_removing_only_path_marks_origin_unreachable(self):
        graph, _ = chain_graph(3)
        cut = remove_link(graph, 1)
        reach = reachable_links(cut, 2)
        assert not reach[0]
        assert reach[2]


class TestProximities:
    def test_two_link_chain_first_order(self):
        graph, _ = chain_graph(2)
        prox = build_proximities(graph)
        assert np.allclose(prox.z_first, np.full((2, 2), 0.5))

    def test_no_transition_graph_normalizes_to_identity(self):
        g = make_graph([Link("a", "0", "1"), Link("b", "2", "3")])
        prox = build_proximities(g)
        for z in (prox.z_first, prox.z_second_in, prox.z_second_out):
            assert np.array_equal(z, np.eye(2))

    def test_toy_shared_predecessor_pair_is_positive(self, toy):
        prox = build_proximities(toy.graph)
        # links 2-3 and 2-4 both leave the head of 1-2
        assert prox.z_second_out[2, 3] > 0

    @pytest.mark.parametrize("seed", range(6))
    def test_matches_brute_force_on_random_graphs(self, seed):
        rng = np.random.default_rng(seed)
        graph, _ = random_cyclic_graph(rng, n_nodes=int(rng.integers(3, 7)))
        prox = build_proximities(graph)
        zf, zi, zo = brute_force_proximities(graph.adjacency)
        assert np.allclose(prox.z_first, zf, atol=1e-12, rtol=0)
        assert np.allclose(prox.z_second_in, zi, atol=1e-12, rtol=0)
        assert np.allclose(prox.z_second_out, zo, atol=1e-12, rtol=0)

    def test_brute_force_on_toy(self, toy):
        prox = build_proximities(toy.graph)
        zf, zi, zo = brute_force_proximities(toy.graph.adjacency)
        assert np.allclose(prox.z_first, zf, atol=1e-12, rtol=0)
        assert np.allclose(prox.z_second_in, zi, atol=1e-12, rtol=0)
        assert np.allclose(prox.z_second_out, zo, atol=1e-12, rtol=0)

    @settings(max_examples=40, deadline=None)
    @given(seed=st.integers(0, 10_000))
    def test_invariants_on_random_graphs(self, seed):
        rng = np.random.default_rng(seed)
        graph, _ = random_cyclic_graph(rng, n_nodes=int(rng.integers(3, 8)))
        prox = build_proximities(graph)
        for z in (prox.z_first, prox.z_second_in, prox.z_second_out):
            assert np.allclose(z, z.T, atol=1e-13)
            assert z.min() >= 0.0
            assert z.max() <= 1.0 + 1e-12
            assert np.diag(z).min() > 0.0

    def test_removal_rebuild_changes_proximities(self, toy):
        before = build_proximities(toy.graph)
        after = build_proximities(remove_link(toy.graph, 6))
        assert before.z_first.shape == after.z_first.shape
        assert not np.allclose(before.z_first, after.z_first)
