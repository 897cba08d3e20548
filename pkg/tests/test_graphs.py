"""Tests for spatial graph construction against dense numpy oracles."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from graphsurv import graphs
from graphsurv.common import DataError


def dense_normalized(edges, n):
    """Independent oracle: D^-1/2 (A + I) D^-1/2 on a dense matrix."""
    a = np.eye(n)
    for i, j in edges:
        a[i, j] = a[j, i] = 1.0
    dinv = 1.0 / np.sqrt(a.sum(axis=1))
    return a * dinv[:, None] * dinv[None, :]


class TestKnn:
    def test_three_collinear_points(self):
        coords = np.array([[0.0, 0.0], [1.0, 0.0], [3.0, 0.0]])
        assert graphs.knn_edges(coords, 1) == {(0, 1), (1, 2)}

    def test_k_max_gives_complete_graph(self):
        rng = np.random.default_rng(0)
        coords = rng.uniform(size=(6, 2))
        edges = graphs.knn_edges(coords, 5)
        assert edges == {(i, j) for i in range(6) for j in range(i + 1, 6)}

    def test_distance_tie_prefers_lower_index(self):
        coords = np.array([[0.0, 0.0], [1.0, 0.0], [-1.0, 0.0]])
        # node 0 is equidistant from 1 and 2; its single neighbour must be 1
        assert graphs.knn_edges(coords, 1) == {(0, 1), (0, 2)}

    def test_union_symmetrization(self):
        # asymmetric nearest-neighbour relation: 2's nn is 1, but 1's nn is 0
        coords = np.array([[0.0, 0.0], [1.0, 0.0], [2.5, 0.0]])
        assert graphs.knn_edges(coords, 1) == {(0, 1), (1, 2)}

    def test_matches_bruteforce_oracle(self):
        rng = np.random.default_rng(7)
        coords = rng.uniform(0, 100, size=(40, 2))
        k = 4
        expected = set()
        for i in range(40):
            d = np.linalg.norm(coords - coords[i], axis=1)
            d[i] = np.inf
            for j in np.argsort(d, kind="stable")[:k]:
                expected.add((min(i, int(j)), max(i, int(j))))
        assert graphs.knn_edges(coords, k) == expected

    def test_chunked_path_agrees_with_small_path(self, monkeypatch):
        rng = np.random.default_rng(8)
        coords = rng.uniform(size=(30, 2))
        full = graphs.knn_edges(coords, 3)
        monkeypatch.setattr(graphs, "_KNN_CHUNK", 7)
        assert graphs.knn_edges(coords, 3) == full

    def test_too_few_nodes(self):
        with pytest.raises(DataError):
            graphs.knn_edges(np.zeros((3, 2)) + np.arange(3)[:, None], 3)

    def test_rejects_nonfinite(self):
        with pytest.raises(DataError):
            graphs.knn_edges(np.array([[0.0, 0.0], [np.nan, 1.0]]), 1)


class TestNormalize:
    def test_single_edge_pair_is_half_everywhere(self):
        adj = graphs.normalize_adjacency({(0, 1)}, 2)
        np.testing.assert_allclose(adj.to_dense(), np.full((2, 2), 0.5))

    def test_isolated_node_keeps_unit_self_loop(self):
        adj = graphs.normalize_adjacency(set(), 1)
        np.testing.assert_allclose(adj.to_dense(), [[1.0]])

    def test_matches_dense_oracle(self):
        rng = np.random.default_rng(3)
        coords = rng.uniform(size=(12, 2))
        edges = graphs.knn_edges(coords, 3)
        adj = graphs.normalize_adjacency(edges, 12)
        np.testing.assert_allclose(adj.to_dense(), dense_normalized(edges, 12), atol=1e-12)

    def test_symmetric(self):
        edges = {(0, 1), (1, 2), (0, 3)}
        dense = graphs.normalize_adjacency(edges, 4).to_dense()
        np.testing.assert_allclose(dense, dense.T)

    def test_rejects_self_loop_input(self):
        with pytest.raises(DataError):
            graphs.normalize_adjacency({(1, 1)}, 3)

    def test_rejects_out_of_range(self):
        with pytest.raises(DataError):
            graphs.normalize_adjacency({(0, 5)}, 3)


@settings(max_examples=25, deadline=None)
@given(st.integers(2, 12), st.integers(0, 10_000))
def test_spectral_radius_at_most_one(n, seed):
    rng = np.random.default_rng(seed)
    coords = rng.uniform(0, 10, size=(n, 2))
    edges = graphs.knn_edges(coords, min(2, n - 1))
    dense = graphs.normalize_adjacency(edges, n).to_dense()
    eigs = np.linalg.eigvalsh(dense)
    assert np.max(np.abs(eigs)) <= 1.0 + 1e-9


@settings(max_examples=20, deadline=None)
@given(st.integers(4, 10), st.integers(0, 10_000))
def test_knn_permutation_invariance(n, seed):
    rng = np.random.default_rng(seed)
    coords = rng.normal(size=(n, 2))  # continuous, ties almost surely absent
    perm = rng.permutation(n)
    base = graphs.knn_edges(coords, 2)
    permuted = graphs.knn_edges(coords[perm], 2)
    inv = np.empty(n, dtype=int)
    inv[perm] = np.arange(n)
    mapped = {(min(inv[a], inv[b]), max(inv[a], inv[b])) for a, b in base}
    # mapped edges are expressed in the permuted labelling
    remapped = {(min(perm[a], perm[b]), max(perm[a], perm[b])) for a, b in permuted}
    assert base == remapped
    assert permuted == mapped


class TestCrossScale:
    def test_exact_containment(self):
        coords_low = np.array([[128.0, 128.0], [384.0, 128.0]])
        coords_high = np.array([[64.0, 64.0], [192.0, 190.0], [320.0, 64.0], [440.0, 190.0]])
        parent = graphs.cross_scale_edges(coords_low, 128.0, coords_high)
        np.testing.assert_array_equal(parent, [0, 0, 1, 1])

    def test_boundary_tie_takes_lower_index(self):
        coords_low = np.array([[128.0, 128.0], [384.0, 128.0]])
        # x = 256 is exactly on the shared footprint boundary
        parent = graphs.cross_scale_edges(coords_low, 128.0, np.array([[256.0, 128.0]]))
        assert parent[0] == 0

    def test_outside_raises(self):
        with pytest.raises(DataError):
            graphs.cross_scale_edges(np.array([[128.0, 128.0]]), 128.0,
                                     np.array([[1000.0, 1000.0]]))

    def test_children_inverts_parent(self):
        parent = np.array([0, 0, 2, 1, 2, 2])
        children = graphs.children_of(parent, 3)
        np.testing.assert_array_equal(children[0], [0, 1])
        np.testing.assert_array_equal(children[1], [3])
        np.testing.assert_array_equal(children[2], [2, 4, 5])
        rebuilt = np.empty(6, dtype=int)
        for v, ch in enumerate(children):
            rebuilt[ch] = v
        np.testing.assert_array_equal(rebuilt, parent)

    def test_childless_low_node(self):
        children = graphs.children_of(np.array([1, 1]), 3)
        assert children[0].size == 0 and children[2].size == 0
        np.testing.assert_array_equal(children[1], [0, 1])


class TestMultiScale:
    def _graph(self):
        from graphsurv.ingest import SynthConfig, synth_cohort
        cohort = synth_cohort(SynthConfig(n_slides=1, grid=3, d=4), seed=11)
        slide = cohort.slides[0]
        return slide, graphs.build_multiscale(slide, k_low=3, k_high=4)

    def test_grid_parents(self):
        slide, g = self._graph()
        gh = 6
        for h in range(g.n_high):
            a, b = divmod(h, gh)
            assert g.parent[h] == (a // 2) * 3 + (b // 2)

    def test_every_low_has_four_children(self):
        _, g = self._graph()
        assert all(ch.size == 4 for ch in g.children)

    def test_child_mean_rows_are_stochastic(self):
        _, g = self._graph()
        sums = np.asarray(g.child_mean.sum(axis=1)).ravel()
        np.testing.assert_allclose(sums, 1.0)

    def test_pool_op_averages_children(self):
        _, g = self._graph()
        x = np.random.default_rng(4).normal(size=(g.n_high, 3))
        pooled = g.pool_op.apply(x)
        for v, ch in enumerate(g.children):
            np.testing.assert_allclose(pooled[v], x[ch].mean(axis=0))

    def test_pool_op_transpose_is_adjoint(self):
        _, g = self._graph()
        rng = np.random.default_rng(5)
        x = rng.normal(size=(g.n_high, 2))
        y = rng.normal(size=(g.n_low, 2))
        lhs = np.sum(g.pool_op.apply(x) * y)
        rhs = np.sum(x * g.pool_op.apply_t(y))
        assert lhs == pytest.approx(rhs)

    def test_dump_csv_round_trips(self, tmp_path):
        slide, g = self._graph()
        graphs.dump_graph_csv(g, tmp_path, slide.slide_id)
        adj_file = tmp_path / f"{slide.slide_id}.adj_low.csv"
        lines = adj_file.read_text().strip().splitlines()
        assert lines[0] == "row,col,value"
        assert len(lines) - 1 == g.adj_low.nnz
        r, c, v = lines[1].split(",")
        assert g.adj_low.to_dense()[int(r), int(c)] == float(v)
        parents = (tmp_path / f"{slide.slide_id}.parents.csv").read_text().strip().splitlines()
        assert parents[0] == "high_id,low_id"
        assert len(parents) - 1 == g.n_high


class TestSparseAdjacency:
    def test_rejects_duplicates(self):
        with pytest.raises(DataError):
            graphs.SparseAdjacency(2, [0, 0], [1, 1], [0.5, 0.5])

    def test_rejects_negative(self):
        with pytest.raises(DataError):
            graphs.SparseAdjacency(2, [0], [1], [-1.0])

    def test_apply_matches_dense(self):
        rng = np.random.default_rng(9)
        adj = graphs.SparseAdjacency(3, [0, 1, 2], [1, 2, 0], [0.3, 0.6, 0.9])
        x = rng.normal(size=(3, 4))
        np.testing.assert_allclose(adj.apply(x), adj.to_dense() @ x)
        np.testing.assert_allclose(adj.apply_t(x), adj.to_dense().T @ x)
