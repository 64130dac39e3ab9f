import numpy as np
import pytest

from graphgames.graph import DiGraph, ring_topology
from graphgames.dynamics import (
    AgentModel,
    DynamicsError,
    VectorFieldSpec,
    builtin_agent,
    builtin_field,
    builtin_names,
    consensus_error,
    consensus_errors,
    error_rate,
    global_error,
    sample_input_norm,
)
from graphgames.simulator import rk4_step


def _random_setup(rng, n_agents=None):
    n_agents = n_agents or int(rng.integers(2, 6))
    adj = rng.uniform(0.2, 2.0, size=(n_agents, n_agents)) * (rng.random((n_agents, n_agents)) < 0.5)
    np.fill_diagonal(adj, 0.0)
    pin = rng.uniform(0, 1.5, size=n_agents) * (rng.random(n_agents) < 0.5)
    g = DiGraph(adj, pin)
    leader = builtin_field("paper_leader")
    agents = tuple(builtin_agent(f"paper_node_{1 + i % 5}") for i in range(n_agents))
    states = rng.uniform(-1, 1, size=(n_agents, 2))
    x0 = rng.uniform(-1, 1, size=2)
    controls = [rng.uniform(-2, 2, size=1) for _ in range(n_agents)]
    return g, agents, leader, states, x0, controls


class TestVectorFieldSpec:
    def test_polynomial_evaluation_by_hand(self):
        # f(x) = (2 x1 x2, x1^2 - 3)... constant via zero exponents
        f = VectorFieldSpec(2, (((2.0, (1, 1)),), ((1.0, (2, 0)), (-3.0, (0, 0)))))
        np.testing.assert_allclose(f([2.0, 5.0]), [20.0, 1.0])

    def test_batch_matches_single(self):
        # batched and single evaluations may differ in the last bit (BLAS
        # reduction order), never more
        f = builtin_field("paper_leader")
        rng = np.random.default_rng(3)
        X = rng.uniform(-1, 1, size=(7, 2))
        batch = f(X)
        for k in range(7):
            np.testing.assert_allclose(batch[k], f(X[k]), rtol=0, atol=1e-15)

    def test_empty_component_gives_zero(self):
        f = VectorFieldSpec(2, ((), ((1.0, (0, 2)),)))
        np.testing.assert_allclose(f([3.0, 2.0]), [0.0, 4.0])

    def test_rejects_bad_terms(self):
        with pytest.raises(DynamicsError):
            VectorFieldSpec(2, (((1.0, (0, 1, 0)),),))
        with pytest.raises(DynamicsError):
            VectorFieldSpec(2, (((1.0, (-1, 0)),),))

    def test_benchmark_drift_formula(self):
        f = builtin_field("paper_leader")
        x1, x2 = 0.37, -0.81
        expected = [x2 - x1**2 * x2, -(x1 + x2) * (1 - x1) ** 2]
        np.testing.assert_allclose(f([x1, x2]), expected, rtol=1e-15)


class TestBuiltins:
    def test_registry_names(self):
        assert set(builtin_names()) == {"paper_leader"} | {f"paper_node_{k}" for k in range(1, 6)}

    def test_drifts_vanish_at_origin(self):
        for name in builtin_names():
            assert builtin_field(name).vanishes_at_origin()

    def test_input_gains(self):
        gains = (1.0, 1.5, -0.2, 0.3, -0.9)
        x = np.array([0.3, 0.7])
        for k, c in enumerate(gains, start=1):
            agent = builtin_agent(f"paper_node_{k}")
            np.testing.assert_allclose(agent.input_matrix(x), [[0.0], [c * 0.49]])

    def test_unknown_names_rejected(self):
        with pytest.raises(DynamicsError):
            builtin_field("nope")
        with pytest.raises(DynamicsError):
            builtin_agent("paper_node_9")


class TestAgentModel:
    def test_drift_must_vanish_at_origin(self):
        bad = VectorFieldSpec(2, (((1.0, (0, 0)),), ()))
        col = VectorFieldSpec(2, ((), ((1.0, (0, 0)),)))
        with pytest.raises(DynamicsError):
            AgentModel(bad, (col,), g_norm_bound=1.0)

    def test_sampled_input_norm_within_declared_bound(self):
        rng = np.random.default_rng(4)
        for k in range(1, 6):
            agent = builtin_agent(f"paper_node_{k}")
            worst = sample_input_norm(agent, [-1.5, -1.5], [1.5, 1.5], rng)
            assert worst <= agent.g_norm_bound


class TestConsensusError:
    def test_zero_at_consensus(self):
        rng = np.random.default_rng(5)
        g, agents, leader, states, x0, controls = _random_setup(rng)
        states = np.tile(x0, (g.n_agents, 1))
        for i in range(g.n_agents):
            np.testing.assert_allclose(consensus_error(g, i, states, x0), np.zeros(2))

    def test_single_pinned_agent_reduces_to_pinning_term(self):
        g = DiGraph([[0.0]], [1.0])
        x = np.array([[0.4, -0.2]])
        x0 = np.array([0.1, 0.1])
        np.testing.assert_allclose(consensus_error(g, 0, x, x0), x[0] - x0)

    def test_ring_node_matches_direct_sum(self):
        g = ring_topology(5, pinned_agent=2, pinning_gain=1.0)
        rng = np.random.default_rng(6)
        states = rng.uniform(-1, 1, size=(5, 2))
        x0 = rng.uniform(-1, 1, size=2)
        # direct evaluation of the defining sum for node 3 (index 2)
        expected = 1.0 * (states[2] - states[1]) + 1.0 * (states[2] - x0)
        np.testing.assert_allclose(consensus_error(g, 2, states, x0), expected, rtol=1e-15)

    def test_dimension_mismatch(self):
        g = ring_topology(3)
        with pytest.raises(DynamicsError):
            consensus_error(g, 0, np.zeros((3, 2)), np.zeros(3))


class TestGlobalError:
    def test_zero_at_consensus(self):
        rng = np.random.default_rng(7)
        g, agents, leader, states, x0, controls = _random_setup(rng)
        states = np.tile(x0, (g.n_agents, 1))
        np.testing.assert_allclose(global_error(g, states, x0), np.zeros(g.n_agents * 2))

    def test_unpinned_uniform_shift_is_invisible(self):
        g = ring_topology(4)
        rng = np.random.default_rng(8)
        x0 = rng.uniform(-1, 1, size=2)
        v = rng.uniform(-1, 1, size=2)
        states = np.tile(x0 + v, (4, 1))
        np.testing.assert_allclose(global_error(g, states, x0), np.zeros(8), atol=1e-14)

    def test_matches_per_node_stack(self):
        rng = np.random.default_rng(9)
        for _ in range(25):
            g, agents, leader, states, x0, controls = _random_setup(rng)
            stacked = np.concatenate(
                [consensus_error(g, i, states, x0) for i in range(g.n_agents)]
            )
            np.testing.assert_allclose(global_error(g, states, x0), stacked, atol=1e-13)

    def test_consensus_errors_helper_matches_op(self):
        rng = np.random.default_rng(10)
        g, agents, leader, states, x0, controls = _random_setup(rng)
        E = consensus_errors(g, states, x0)
        for i in range(g.n_agents):
            np.testing.assert_allclose(E[i], consensus_error(g, i, states, x0), atol=1e-13)


class TestErrorRate:
    def test_zero_at_consensus_with_zero_controls(self):
        rng = np.random.default_rng(11)
        g, agents, leader, states, x0, _ = _random_setup(rng)
        states = np.tile(x0, (g.n_agents, 1))
        controls = [np.zeros(1)] * g.n_agents
        for i in range(g.n_agents):
            np.testing.assert_allclose(
                error_rate(g, agents, leader, i, states, x0, controls), np.zeros(2)
            )

    def test_single_pinned_agent_formula(self):
        g = DiGraph([[0.0]], [1.0])
        agent = builtin_agent("paper_node_1")
        leader = builtin_field("paper_leader")
        x = np.array([[0.4, -0.2]])
        x0 = np.array([0.1, 0.1])
        u = [np.array([0.6])]
        expected = (agent.drift(x[0]) - leader(x0)) + agent.input_matrix(x[0]) @ u[0]
        np.testing.assert_allclose(
            error_rate(g, (agent,), leader, 0, x, x0, u), expected, rtol=1e-14
        )

    def test_matches_full_graph_contraction(self):
        rng = np.random.default_rng(12)
        from graphgames.graph import coupling_row

        for _ in range(25):
            g, agents, leader, states, x0, controls = _random_setup(rng)
            f0 = leader(x0)
            stacked = np.concatenate(
                [
                    agents[j].drift(states[j]) - f0 + agents[j].input_matrix(states[j]) @ controls[j]
                    for j in range(g.n_agents)
                ]
            )
            for i in range(g.n_agents):
                full = np.kron(coupling_row(g, i), np.eye(2)) @ stacked
                local = error_rate(g, agents, leader, i, states, x0, controls)
                np.testing.assert_allclose(local, full, atol=1e-12)

    def test_missing_neighbor_control_raises(self):
        g = ring_topology(3, pinned_agent=0)
        agents = tuple(builtin_agent(f"paper_node_{k}") for k in (1, 2, 3))
        leader = builtin_field("paper_leader")
        states = np.zeros((3, 2))
        controls = [np.zeros(1), None, np.zeros(1)]
        with pytest.raises(DynamicsError, match="missing control"):
            error_rate(g, agents, leader, 2, states, np.zeros(2), controls)

    def test_tracks_numerical_derivative_of_consensus_error(self):
        # integrate the coupled pair of agents with fixed controls; the rate
        # operation must match the finite-differenced error to O(h)
        g = DiGraph([[0.0, 1.0], [1.0, 0.0]], [1.0, 0.0])
        agents = (builtin_agent("paper_node_1"), builtin_agent("paper_node_2"))
        leader = builtin_field("paper_leader")
        controls = [np.array([0.3]), np.array([-0.2])]
        h = 1e-3
        X = np.array([[0.4, -0.1], [-0.3, 0.2]])
        x0 = np.array([0.15, -0.05])

        def field(t, flat):
            Xc = flat[:4].reshape(2, 2)
            x0c = flat[4:]
            dx = np.vstack(
                [
                    agents[j].drift(Xc[j]) + agents[j].input_matrix(Xc[j]) @ controls[j]
                    for j in range(2)
                ]
            )
            return np.concatenate([dx.ravel(), leader(x0c)])

        flat = np.concatenate([X.ravel(), x0])
        nxt = rk4_step(field, 0.0, flat, h)
        e_now = consensus_error(g, 0, X, x0)
        e_next = consensus_error(g, 0, nxt[:4].reshape(2, 2), nxt[4:])
        fd = (e_next - e_now) / h
        rate = error_rate(g, agents, leader, 0, X, x0, controls)
        np.testing.assert_allclose(rate, fd, atol=5e-3)

    def test_drift_gap_zero_at_leader_state(self):
        leader = builtin_field("paper_leader")
        rng = np.random.default_rng(13)
        for name in builtin_names():
            spec = builtin_field(name)
            x = rng.uniform(-1, 1, size=2)
            np.testing.assert_array_equal(spec(x) - leader(x), np.zeros(2))
