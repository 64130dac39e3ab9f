import numpy as np
import pytest

from graphgames.graph import (
    DiGraph,
    GraphValidationError,
    coupling_matrix,
    coupling_row,
    is_strongly_connected,
    laplacian,
    ring_topology,
)


def test_laplacian_two_node_pair():
    g = DiGraph([[0, 1], [1, 0]], [0, 0])
    np.testing.assert_array_equal(laplacian(g), [[1, -1], [-1, 1]])


def test_laplacian_no_edges_is_zero():
    g = DiGraph(np.zeros((3, 3)), np.zeros(3))
    np.testing.assert_array_equal(laplacian(g), np.zeros((3, 3)))


def test_laplacian_default_ring():
    g = ring_topology(5)
    L = laplacian(g)
    for i in range(5):
        assert L[i, i] == 1.0
        assert L[i, (i - 1) % 5] == -1.0
        assert L[i].sum() == 0.0


def test_coupling_row_pinned_ring_node():
    g = ring_topology(5, pinned_agent=2, pinning_gain=1.0)
    np.testing.assert_array_equal(coupling_row(g, 2), [0, -1, 2, 0, 0])


def test_coupling_row_without_pinning_is_laplacian_row():
    g = ring_topology(4)
    for i in range(4):
        np.testing.assert_array_equal(coupling_row(g, i), laplacian(g)[i])


def test_coupling_row_isolated_unpinned_node_is_zero():
    g = DiGraph([[0, 0], [1, 0]], [0, 1])
    np.testing.assert_array_equal(coupling_row(g, 0), [0, 0])


def test_coupling_row_index_out_of_range():
    g = ring_topology(3)
    with pytest.raises(IndexError):
        coupling_row(g, 3)
    with pytest.raises(IndexError):
        coupling_row(g, -1)


def test_strong_connectivity_cases():
    assert is_strongly_connected(ring_topology(5))
    one_way = DiGraph([[0, 1], [0, 0]], [0, 0])
    assert not is_strongly_connected(one_way)
    complete = DiGraph(np.ones((4, 4)) - np.eye(4), np.zeros(4))
    assert is_strongly_connected(complete)


def test_row_sums_integer_weights_exact():
    rng = np.random.default_rng(0)
    for _ in range(50):
        n = int(rng.integers(2, 8))
        adj = rng.integers(0, 4, size=(n, n)).astype(float)
        np.fill_diagonal(adj, 0.0)
        g = DiGraph(adj, np.zeros(n))
        assert np.all(laplacian(g).sum(axis=1) == 0.0)


def test_row_sums_float_weights_tiny():
    rng = np.random.default_rng(1)
    for _ in range(50):
        n = int(rng.integers(2, 8))
        adj = rng.uniform(0, 3, size=(n, n)) * (rng.random((n, n)) < 0.6)
        np.fill_diagonal(adj, 0.0)
        g = DiGraph(adj, rng.uniform(0, 1, size=n))
        assert np.abs(laplacian(g).sum(axis=1)).max() < 1e-12


def test_coupling_row_vanishes_off_neighborhood():
    rng = np.random.default_rng(2)
    for _ in range(50):
        n = int(rng.integers(2, 8))
        adj = rng.uniform(0, 3, size=(n, n)) * (rng.random((n, n)) < 0.4)
        np.fill_diagonal(adj, 0.0)
        g = DiGraph(adj, rng.uniform(0, 1, size=n) * (rng.random(n) < 0.5))
        for i in range(n):
            row = coupling_row(g, i)
            allowed = set(g.neighbors(i)) | {i}
            for j in range(n):
                if j not in allowed:
                    assert row[j] == 0.0
            # pinning shifts only the diagonal entry
            np.testing.assert_array_equal(np.delete(row, i), np.delete(laplacian(g)[i], i))


def test_coupling_matrix_stacks_rows():
    g = ring_topology(5, pinned_agent=1, pinning_gain=0.7)
    M = coupling_matrix(g)
    for i in range(5):
        np.testing.assert_array_equal(M[i], coupling_row(g, i))


def test_construction_rejects_bad_graphs():
    with pytest.raises(GraphValidationError):
        DiGraph([[0, -1], [1, 0]], [0, 0])
    with pytest.raises(GraphValidationError):
        DiGraph([[1, 0], [0, 0]], [0, 0])
    with pytest.raises(GraphValidationError):
        DiGraph([[0, 1], [1, 0]], [-1, 0])
    with pytest.raises(GraphValidationError):
        DiGraph([[0, 1, 0], [1, 0, 0]], [0, 0])


def test_graph_is_immutable():
    g = ring_topology(3)
    with pytest.raises(ValueError):
        g.adjacency[0, 1] = 5.0
