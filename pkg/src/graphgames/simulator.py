"""Deterministic integration of the coupled agent-leader-weight system.

One fixed-step classical Runge-Kutta scheme advances the whole coupled
state (agent states, leader state, critic weights), so repeated runs of the
same scenario are bit-identical.  Per-agent derivative evaluations inside a
stage are pure reads of the stage snapshot; weight changes commit only
through the integrator.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .graph import DiGraph, coupling_matrix, is_strongly_connected
from .dynamics import AgentModel, VectorFieldSpec, consensus_errors, sample_input_norm
from .gfhm import GfhmCritic
from .controller import (
    CostSpec,
    GainConditionError,
    GainCheckReport,
    LearnerGains,
    PolicyIterationSettings,
    RunStats,
    UubBounds,
    gain_check,
    uub_bounds,
)

__all__ = [
    "ScenarioValidationError",
    "NumericalBlowupError",
    "BLOWUP_GUARD",
    "Scenario",
    "TrajectoryLog",
    "RunSummary",
    "rk4_step",
    "run_online",
    "simulate_policies",
    "detect_convergence",
    "cost_integral",
    "collect_run_stats",
    "write_trajectory_csv",
    "read_trajectory_csv",
    "write_summary",
]

BLOWUP_GUARD = 1e6


class ScenarioValidationError(ValueError):
    """A scenario member violates the cross-member consistency contract."""


class NumericalBlowupError(RuntimeError):
    """The integrated state left the finite guard region."""


@dataclass(frozen=True, eq=False)
class Scenario:
    """Full run configuration: topology, models, costs, learners, grid."""

    name: str
    graph: DiGraph
    agents: tuple
    leader: VectorFieldSpec
    costs: tuple
    critics: tuple
    gains: tuple
    step: float
    t_final: float
    initial_states: np.ndarray
    initial_leader_state: np.ndarray
    seed: int = 0
    mode: str = "online"
    cuub_bound: float = 0.5
    state_box: tuple | None = None
    pi: PolicyIterationSettings = field(default_factory=PolicyIterationSettings)

    def __post_init__(self) -> None:
        g = self.graph
        n_agents = g.n_agents
        agents = tuple(self.agents)
        costs = tuple(self.costs)
        critics = tuple(self.critics)
        gains = tuple(self.gains)
        if not (len(agents) == len(costs) == len(critics) == len(gains) == n_agents):
            raise ScenarioValidationError(
                f"graph has {n_agents} agents but got {len(agents)} models, "
                f"{len(costs)} cost specs, {len(critics)} critics, {len(gains)} gain sets"
            )
        n = agents[0].state_dim
        for i, agent in enumerate(agents):
            if agent.state_dim != n:
                raise ScenarioValidationError(f"agents[{i}] has state dimension {agent.state_dim}, expected {n}")
        if self.leader.state_dim != n or self.leader.output_dim != n:
            raise ScenarioValidationError("leader field must map the agent state space to itself")
        if not self.leader.vanishes_at_origin():
            raise ScenarioValidationError("leader drift must vanish at the origin")
        for i, (agent, cost, critic, gain) in enumerate(zip(agents, costs, critics, gains)):
            if cost.state_dim != n:
                raise ScenarioValidationError(f"costs[{i}].Q has dimension {cost.state_dim}, expected {n}")
            if cost.input_dim != agent.input_dim:
                raise ScenarioValidationError(
                    f"costs[{i}].R_self has dimension {cost.input_dim}, expected {agent.input_dim}"
                )
            neighbor_set = {int(j) for j in g.neighbors(i)}
            weighted = set(cost.R_neighbors)
            if weighted != neighbor_set:
                raise ScenarioValidationError(
                    f"costs[{i}].R_neighbors keys {sorted(weighted)} must equal the neighbor set {sorted(neighbor_set)}"
                )
            for j, R in cost.R_neighbors.items():
                if R.shape[0] != agents[j].input_dim:
                    raise ScenarioValidationError(
                        f"costs[{i}].R_neighbors[{j}] has dimension {R.shape[0]}, "
                        f"expected {agents[j].input_dim}"
                    )
            if critic.error_dim != n:
                raise ScenarioValidationError(f"critics[{i}] covers {critic.error_dim} error components, expected {n}")
            pe = gain.probing
            if any(a != 0.0 for a in pe.amplitudes) and pe.n_terms < -(-n // 2):
                raise ScenarioValidationError(
                    f"gains[{i}]: active probing needs at least {-(-n // 2)} distinct frequencies"
                )
        if not g.has_pinned_agent():
            raise ScenarioValidationError("pinning must be positive for at least one agent")
        step = float(self.step)
        t_final = float(self.t_final)
        if step <= 0:
            raise ScenarioValidationError("integration step must be positive")
        if t_final <= step:
            raise ScenarioValidationError("final time must exceed the integration step")
        X0 = np.array(self.initial_states, dtype=float)
        x00 = np.array(self.initial_leader_state, dtype=float).reshape(-1)
        if X0.shape != (n_agents, n):
            raise ScenarioValidationError(f"initial states have shape {X0.shape}, expected ({n_agents}, {n})")
        if x00.shape != (n,):
            raise ScenarioValidationError(f"initial leader state has shape {x00.shape}, expected ({n},)")
        if self.mode not in ("online", "policy_iteration"):
            raise ScenarioValidationError(f"unknown mode '{self.mode}'")
        if not float(self.cuub_bound) > 0:
            raise ScenarioValidationError("the synchronization bound must be positive")
        box = self.state_box
        if box is not None:
            lo = np.array(box[0], dtype=float).reshape(-1)
            hi = np.array(box[1], dtype=float).reshape(-1)
            if lo.shape != (n,) or hi.shape != (n,) or np.any(lo >= hi):
                raise ScenarioValidationError("state box must be a (lower, upper) pair of length-n vectors")
            rng = np.random.default_rng(2024)
            for i, agent in enumerate(agents):
                worst = sample_input_norm(agent, lo, hi, rng)
                if worst > agent.g_norm_bound:
                    raise ScenarioValidationError(
                        f"agents[{i}]: sampled input-map norm {worst:.4g} exceeds the declared bound "
                        f"{agent.g_norm_bound:.4g} on the state box"
                    )
            lo.setflags(write=False)
            hi.setflags(write=False)
            box = (lo, hi)
        if not is_strongly_connected(g):
            warnings.warn(
                f"scenario '{self.name}': the communication digraph is not strongly connected",
                stacklevel=2,
            )
        X0.setflags(write=False)
        x00.setflags(write=False)
        object.__setattr__(self, "agents", agents)
        object.__setattr__(self, "costs", costs)
        object.__setattr__(self, "critics", critics)
        object.__setattr__(self, "gains", gains)
        object.__setattr__(self, "step", step)
        object.__setattr__(self, "t_final", t_final)
        object.__setattr__(self, "initial_states", X0)
        object.__setattr__(self, "initial_leader_state", x00)
        object.__setattr__(self, "seed", int(self.seed))
        object.__setattr__(self, "cuub_bound", float(self.cuub_bound))
        object.__setattr__(self, "state_box", box)

    @property
    def n_agents(self) -> int:
        return self.graph.n_agents

    @property
    def state_dim(self) -> int:
        return self.agents[0].state_dim


@dataclass(frozen=True, eq=False)
class TrajectoryLog:
    """Time-indexed record of one run; all series share the time grid."""

    t: np.ndarray
    states: np.ndarray
    leader_states: np.ndarray
    errors: np.ndarray
    controls: tuple
    weights: tuple
    residuals: np.ndarray
    cost_rates: np.ndarray
    cost_integrals: np.ndarray

    def __post_init__(self) -> None:
        T = self.t.size
        series = [self.states, self.leader_states, self.errors, self.residuals, self.cost_rates, self.cost_integrals]
        series.extend(self.controls)
        series.extend(self.weights)
        if any(arr.shape[0] != T for arr in series):
            raise ValueError("all logged series must share the time grid length")
        if np.any(np.diff(self.cost_integrals, axis=0) < -1e-12):
            raise ValueError("accumulated costs must be nondecreasing")

    @property
    def n_agents(self) -> int:
        return self.states.shape[1]

    @property
    def state_dim(self) -> int:
        return self.states.shape[2]


def rk4_step(field, t: float, state: np.ndarray, h: float) -> np.ndarray:
    """Classical fourth-order Runge-Kutta advance of ``state`` by ``h``."""
    if h <= 0:
        raise ValueError("step size must be positive")
    state = np.asarray(state, dtype=float)
    k1 = np.asarray(field(t, state))
    k2 = np.asarray(field(t + 0.5 * h, state + (0.5 * h) * k1))
    k3 = np.asarray(field(t + 0.5 * h, state + (0.5 * h) * k2))
    k4 = np.asarray(field(t + h, state + h * k3))
    out = state + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
    if not np.all(np.isfinite(out)):
        raise NumericalBlowupError(f"numerical blow-up at t={t:.6g}")
    return out


class _Engine:
    """Scenario compiled into flat-array closures for the integrator.

    Homogeneous scenarios (scalar controls, structurally identical critics,
    input columns sharing one exponent pattern) run through a fully
    vectorized path; anything else falls back to the per-agent loop.  Both
    paths evaluate the same formulas.
    """

    def __init__(self, scenario: Scenario, adapt: bool, probing: str, control_offsets=None, policy_overrides=None):
        s = scenario
        self.scenario = s
        self.adapt = adapt
        self.policy_overrides = dict(policy_overrides or {})
        g = s.graph
        self.n_agents = N = g.n_agents
        self.state_dim = n = s.state_dim
        self.Lb = coupling_matrix(g)
        self.lb_diag = np.diag(self.Lb).copy()

        fields = [a.drift for a in s.agents] + [s.leader]
        groups: dict[int, tuple] = {}
        for idx, f in enumerate(fields):
            groups.setdefault(id(f), (f, []))[1].append(idx)
        self.drift_groups = [(f, np.asarray(rows)) for f, rows in groups.values()]

        self.agents = s.agents
        self.Q = [c.Q for c in s.costs]
        self.R_self = [c.R_self for c in s.costs]
        self.R_inv = [np.linalg.inv(c.R_self) for c in s.costs]
        self.neighbor_R = [tuple((int(j), R) for j, R in c.R_neighbors.items()) for c in s.costs]

        self.comp_index = [c._comp_index for c in s.critics]
        self.basis_offsets = [c._offsets for c in s.critics]
        self.phi = [c.phi for c in s.critics]
        self.m_critic = [c.gen_dim for c in s.critics]
        self.m_input = [a.input_dim for a in s.agents]
        self.a_gain = [gm.a for gm in s.gains]

        self.probes = []
        for gains, agent in zip(s.gains, s.agents):
            pe = gains.probing
            if probing == "off" or pe.n_terms == 0 or all(a == 0.0 for a in pe.amplitudes):
                self.probes.append(None)
                continue
            cutoff = np.inf if probing == "always" else pe.cutoff_time
            self.probes.append(
                (
                    np.asarray(pe.amplitudes),
                    np.asarray(pe.frequencies),
                    np.asarray(pe.phases),
                    cutoff,
                    agent.input_dim,
                )
            )
        offsets = control_offsets or {}
        self.control_offsets = {
            int(i): np.atleast_1d(np.asarray(v, dtype=float)) for i, v in offsets.items()
        }
        for i, v in self.control_offsets.items():
            if v.shape != (self.m_input[i],):
                raise ScenarioValidationError(
                    f"control offset for agent {i} has shape {v.shape}, expected ({self.m_input[i]},)"
                )

        self.n_flat_states = N * n
        self.weight_slices = []
        start = self.n_flat_states + n
        for m in self.m_critic:
            self.weight_slices.append(slice(start, start + m))
            start += m
        self.flat_size = start
        self._compile_fast()

    def initial_vector(self, weights) -> np.ndarray:
        y = np.empty(self.flat_size)
        y[: self.n_flat_states] = self.scenario.initial_states.ravel()
        y[self.n_flat_states : self.n_flat_states + self.state_dim] = self.scenario.initial_leader_state
        for sl, w in zip(self.weight_slices, weights):
            w = np.asarray(w, dtype=float).reshape(-1)
            if w.size != sl.stop - sl.start:
                raise ScenarioValidationError(
                    f"weight vector of length {w.size} does not fit the critic of size {sl.stop - sl.start}"
                )
            y[sl] = w
        return y

    # -- vectorized path -----------------------------------------------------

    def _compile_fast(self) -> None:
        self.fast = False
        s = self.scenario
        N, n = self.n_agents, self.state_dim
        if self.policy_overrides:
            return
        if any(m != 1 for m in self.m_input):
            return
        first = s.critics[0]
        for c in s.critics[1:]:
            if (
                c.gen_dim != first.gen_dim
                or not np.array_equal(c._comp_index, first._comp_index)
                or not np.array_equal(c._offsets, first._offsets)
                or not np.array_equal(c.phi, first.phi)
            ):
                return
        ref_expos = s.agents[0].input_columns[0]._expos
        for a in s.agents[1:]:
            expos = a.input_columns[0]._expos
            if len(expos) != len(ref_expos) or any(
                not np.array_equal(e1, e2) for e1, e2 in zip(expos, ref_expos)
            ):
                return

        m = first.gen_dim
        self.f_ci = first._comp_index
        self.f_d = first._offsets
        self.f_phi = first.phi
        scatter = np.zeros((m, n))
        scatter[np.arange(m), self.f_ci] = 1.0
        self.f_scatter = scatter
        self.f_a = np.asarray(self.a_gain)
        self.f_rinv = np.array([R[0, 0] for R in self.R_inv])
        self.f_rself = np.array([R[0, 0] for R in self.R_self])
        self.f_Q = np.stack(self.Q)
        W = np.zeros((N, N))
        for i, pairs in enumerate(self.neighbor_R):
            for j, R in pairs:
                W[i, j] = R[0, 0]
        self.f_W = W
        # stacked input-column coefficients: component c of g_i is
        # sum_k coeffs[i, c, k] * prod(x_i ** expos[c][k])
        self.f_gcol_expos = ref_expos
        self.f_gcol_coeffs = [
            np.stack([a.input_columns[0]._coeffs[c] for a in s.agents])
            for c in range(n)
        ]
        self.f_offsets = np.zeros(N)
        for i, v in self.control_offsets.items():
            self.f_offsets[i] = v[0]
        self.f_has_offsets = bool(self.control_offsets)
        if any(p is not None for p in self.probes):
            terms = max(p[0].size for p in self.probes if p is not None)
            A = np.zeros((N, terms))
            Wf = np.ones((N, terms))
            PH = np.zeros((N, terms))
            CUT = np.full(N, -np.inf)
            for i, p in enumerate(self.probes):
                if p is None:
                    continue
                amps, freqs, phases, cutoff, _ = p
                A[i, : amps.size] = amps
                Wf[i, : freqs.size] = freqs
                PH[i, : phases.size] = phases
                CUT[i] = cutoff
            self.f_probe = (A, Wf, PH, CUT)
        else:
            self.f_probe = None
        self.w_base = self.weight_slices[0].start
        self.fast = True

    def _input_columns_fast(self, X: np.ndarray) -> np.ndarray:
        N, n = self.n_agents, self.state_dim
        G = np.zeros((N, n))
        for c in range(n):
            expos = self.f_gcol_expos[c]
            if expos.size == 0:
                continue
            G[:, c] = ((X[:, None, :] ** expos).prod(axis=-1) * self.f_gcol_coeffs[c]).sum(axis=-1)
        return G

    def _core_fast(self, t: float, y: np.ndarray):
        N, n = self.n_agents, self.state_dim
        X = y[: self.n_flat_states].reshape(N, n)
        x0 = y[self.n_flat_states : self.n_flat_states + n]
        theta = y[self.w_base :].reshape(N, -1)
        E = self.Lb @ (X - x0)

        stacked = np.empty((N + 1, n))
        all_states = np.vstack([X, x0[None, :]])
        for spec, rows in self.drift_groups:
            stacked[rows] = spec(all_states[rows])
        F = stacked[:N]
        f0 = stacked[N]

        z = self.f_phi * (E[:, self.f_ci] - self.f_d)
        tz = np.tanh(z)
        slopes = self.f_phi * (1.0 - tz * tz)
        grad = (slopes * theta) @ self.f_scatter
        G = self._input_columns_fast(X)
        u = -0.5 * self.lb_diag * self.f_rinv * np.einsum("ij,ij->i", G, grad)
        if self.f_probe is not None:
            A, Wf, PH, CUT = self.f_probe
            probe = np.where(t < CUT, (A * np.sin(Wf * t + PH)).sum(axis=1), 0.0)
            u = u + probe
        if self.f_has_offsets:
            u = u + self.f_offsets
        gu = G * u[:, None]
        Edot = self.Lb @ ((F - f0) + gu)
        return X, x0, E, F, f0, gu, Edot, u, slopes, theta

    def _rates_fast(self, E, u):
        eq = np.einsum("ni,nij,nj->n", E, self.f_Q, E)
        usq = u * u
        return eq + self.f_rself * usq + self.f_W @ usq

    # -- shared interface ----------------------------------------------------

    def derivative(self, t: float, y: np.ndarray) -> np.ndarray:
        if self.fast:
            X, x0, E, F, f0, gu, Edot, u, slopes, theta = self._core_fast(t, y)
            ydot = np.zeros(self.flat_size)
            ydot[: self.n_flat_states] = (F + gu).ravel()
            ydot[self.n_flat_states : self.n_flat_states + self.state_dim] = f0
            if self.adapt:
                sigma = slopes * Edot[:, self.f_ci]
                proj = (sigma * theta).sum(axis=1) + self._rates_fast(E, u)
                ydot[self.w_base :] = (-self.f_a[:, None] * sigma * proj[:, None]).ravel()
            return ydot
        X, x0, E, F, f0, gu, Edot, controls, slopes = self._core(t, y)
        ydot = np.zeros(self.flat_size)
        ydot[: self.n_flat_states] = (F + gu).ravel()
        ydot[self.n_flat_states : self.n_flat_states + self.state_dim] = f0
        if self.adapt:
            rates = self._cost_rates(E, controls)
            for i in range(self.n_agents):
                theta = y[self.weight_slices[i]]
                sigma = slopes[i] * Edot[i][self.comp_index[i]]
                ydot[self.weight_slices[i]] = -self.a_gain[i] * sigma * (float(sigma @ theta) + rates[i])
        return ydot

    def instrument(self, t: float, y: np.ndarray):
        """Log snapshot plus the derivative at the same point (stage one)."""
        if self.fast:
            X, x0, E, F, f0, gu, Edot, u, slopes, theta = self._core_fast(t, y)
            sigma = slopes * Edot[:, self.f_ci]
            rates = self._rates_fast(E, u)
            residuals = rates + (sigma * theta).sum(axis=1)
            ydot = np.zeros(self.flat_size)
            ydot[: self.n_flat_states] = (F + gu).ravel()
            ydot[self.n_flat_states : self.n_flat_states + self.state_dim] = f0
            if self.adapt:
                proj = residuals
                ydot[self.w_base :] = (-self.f_a[:, None] * sigma * proj[:, None]).ravel()
            return X, x0, E, list(u[:, None]), rates, residuals, ydot
        X, x0, E, F, f0, gu, Edot, controls, slopes = self._core(t, y)
        rates = self._cost_rates(E, controls)
        residuals = np.empty(self.n_agents)
        sigmas = []
        for i in range(self.n_agents):
            theta = y[self.weight_slices[i]]
            sigma = slopes[i] * Edot[i][self.comp_index[i]]
            sigmas.append(sigma)
            residuals[i] = rates[i] + float(sigma @ theta)
        ydot = np.zeros(self.flat_size)
        ydot[: self.n_flat_states] = (F + gu).ravel()
        ydot[self.n_flat_states : self.n_flat_states + self.state_dim] = f0
        if self.adapt:
            for i in range(self.n_agents):
                ydot[self.weight_slices[i]] = -self.a_gain[i] * sigmas[i] * residuals[i]
        return X, x0, E, controls, rates, residuals, ydot

    # -- per-agent fallback ----------------------------------------------------

    def _probe_value(self, i: int, t: float):
        spec = self.probes[i]
        if spec is None:
            return None
        amps, freqs, phases, cutoff, m = spec
        if t >= cutoff:
            return None
        return np.full(m, float(amps @ np.sin(freqs * t + phases)))

    def _core(self, t: float, y: np.ndarray):
        N, n = self.n_agents, self.state_dim
        X = y[: self.n_flat_states].reshape(N, n)
        x0 = y[self.n_flat_states : self.n_flat_states + n]
        E = self.Lb @ (X - x0)

        stacked = np.empty((N + 1, n))
        all_states = np.vstack([X, x0[None, :]])
        for spec, rows in self.drift_groups:
            stacked[rows] = spec(all_states[rows])
        F = stacked[:N]
        f0 = stacked[N]

        controls = []
        slopes = []
        gu = np.empty((N, n))
        for i in range(N):
            theta = y[self.weight_slices[i]]
            z = self.phi[i] * (E[i][self.comp_index[i]] - self.basis_offsets[i])
            tz = np.tanh(z)
            slope = self.phi[i] * (1.0 - tz * tz)
            G = self.agents[i].input_matrix(X[i])
            policy = self.policy_overrides.get(i)
            if policy is not None:
                u = np.atleast_1d(np.asarray(policy(t, X[i], E[i]), dtype=float))
            else:
                grad = np.bincount(self.comp_index[i], weights=slope * theta, minlength=n)
                u = -0.5 * self.lb_diag[i] * (self.R_inv[i] @ (G.T @ grad))
            probe = self._probe_value(i, t)
            if probe is not None:
                u = u + probe
            off = self.control_offsets.get(i)
            if off is not None:
                u = u + off
            controls.append(u)
            slopes.append(slope)
            gu[i] = G @ u

        flow = (F - f0) + gu
        Edot = self.Lb @ flow
        return X, x0, E, F, f0, gu, Edot, controls, slopes

    def _cost_rates(self, E, controls):
        rates = np.empty(self.n_agents)
        for i in range(self.n_agents):
            r = float(E[i] @ self.Q[i] @ E[i]) + float(controls[i] @ self.R_self[i] @ controls[i])
            for j, R in self.neighbor_R[i]:
                r += float(controls[j] @ R @ controls[j])
            rates[i] = r
        return rates


def _integrate(
    scenario: Scenario,
    weights,
    adapt: bool,
    probing: str,
    control_offsets,
    t_final: float,
    step: float,
    policy_overrides=None,
) -> TrajectoryLog:
    engine = _Engine(
        scenario,
        adapt=adapt,
        probing=probing,
        control_offsets=control_offsets,
        policy_overrides=policy_overrides,
    )
    n_steps = int(round(t_final / step))
    if n_steps < 1:
        raise ScenarioValidationError("final time must cover at least one step")
    N, n = engine.n_agents, engine.state_dim
    t_grid = np.arange(n_steps + 1) * step

    states = np.empty((n_steps + 1, N, n))
    leader = np.empty((n_steps + 1, n))
    errors = np.empty((n_steps + 1, N, n))
    controls = [np.empty((n_steps + 1, m)) for m in engine.m_input]
    weights_log = [np.empty((n_steps + 1, m)) for m in engine.m_critic]
    residuals = np.empty((n_steps + 1, N))
    rates = np.empty((n_steps + 1, N))

    y = engine.initial_vector(weights)

    def record(k: int, t: float, y: np.ndarray) -> np.ndarray:
        X, x0, E, u, r, ham, ydot = engine.instrument(t, y)
        states[k] = X
        leader[k] = x0
        errors[k] = E
        for i in range(N):
            controls[i][k] = u[i]
            weights_log[i][k] = y[engine.weight_slices[i]]
        rates[k] = r
        residuals[k] = ham
        return ydot

    h = step
    deriv = engine.derivative
    for k in range(n_steps):
        t = k * h
        k1 = record(k, t, y)
        k2 = deriv(t + 0.5 * h, y + (0.5 * h) * k1)
        k3 = deriv(t + 0.5 * h, y + (0.5 * h) * k2)
        k4 = deriv(t + h, y + h * k3)
        y = y + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
        if not np.all(np.isfinite(y)) or np.max(np.abs(y)) > BLOWUP_GUARD:
            raise NumericalBlowupError(
                f"numerical blow-up at t={t + h:.6g}: state magnitude exceeded {BLOWUP_GUARD:g}"
            )
    record(n_steps, n_steps * h, y)

    increments = 0.5 * (rates[1:] + rates[:-1]) * step
    cost_integrals = np.vstack([np.zeros((1, N)), np.cumsum(increments, axis=0)])
    return TrajectoryLog(
        t=t_grid,
        states=states,
        leader_states=leader,
        errors=errors,
        controls=tuple(controls),
        weights=tuple(weights_log),
        residuals=residuals,
        cost_rates=rates,
        cost_integrals=cost_integrals,
    )


def simulate_policies(
    scenario: Scenario,
    weights=None,
    *,
    probing: str = "off",
    control_offsets: Mapping[int, object] | None = None,
    policy_overrides: Mapping[int, object] | None = None,
    t_final: float | None = None,
    step: float | None = None,
) -> TrajectoryLog:
    """Integrate the closed loop under frozen critic weights.

    ``probing`` is ``"off"``, ``"auto"`` (respect each cutoff) or
    ``"always"`` (ignore cutoffs); ``control_offsets`` adds a constant
    vector to the named agents' controls; ``policy_overrides`` maps agent
    indices to explicit feedback laws ``u(t, x_i, e_i)`` replacing the
    critic feedback.
    """
    if probing not in ("off", "auto", "always"):
        raise ValueError(f"unknown probing mode '{probing}'")
    if weights is None:
        weights = tuple(c.weights for c in scenario.critics)
    return _integrate(
        scenario,
        weights,
        adapt=False,
        probing=probing,
        control_offsets=control_offsets,
        t_final=scenario.t_final if t_final is None else float(t_final),
        step=scenario.step if step is None else float(step),
        policy_overrides=policy_overrides,
    )


def detect_convergence(times, series, window: float, tol: float):
    """First time after which the trailing-window drift rate stays below tol.

    The drift rate at time ``t`` is the largest per-component change between
    ``t - window`` and ``t`` divided by the window length.  Returns ``None``
    when the rate never settles below ``tol``.
    """
    t = np.asarray(times, dtype=float)
    S = np.asarray(series, dtype=float)
    if S.ndim == 1:
        S = S[:, None]
    if S.shape[0] != t.size:
        raise ValueError("series length must match the time grid")
    h = float(t[1] - t[0])
    steps = int(round(window / h))
    if steps < 1 or steps >= t.size:
        raise ValueError("window must cover at least one step and fit inside the series")
    drift = np.abs(S[steps:] - S[:-steps]).max(axis=1) / window
    bad = np.flatnonzero(drift >= tol)
    if bad.size == 0:
        return float(t[steps])
    last_bad = int(bad[-1])
    if last_bad == drift.size - 1:
        return None
    return float(t[steps + last_bad + 1])


def cost_integral(log: TrajectoryLog, i: int) -> float:
    """Trapezoidal accumulated cost of agent ``i`` over the logged grid."""
    return float(np.trapezoid(log.cost_rates[:, i], log.t))


def _drift_over_log(scenario: Scenario, log: TrajectoryLog):
    N, n = log.n_agents, log.state_dim
    T = log.t.size
    fields = [a.drift for a in scenario.agents] + [scenario.leader]
    groups: dict[int, tuple] = {}
    for idx, f in enumerate(fields):
        groups.setdefault(id(f), (f, []))[1].append(idx)
    stacked = np.empty((T, N + 1, n))
    all_states = np.concatenate([log.states, log.leader_states[:, None, :]], axis=1)
    for spec, rows in groups.values():
        rows = np.asarray(rows)
        stacked[:, rows, :] = spec(all_states[:, rows, :])
    return stacked[:, :N, :], stacked[:, N, :]


def _sigma_series(scenario: Scenario, log: TrajectoryLog):
    """Per-agent regressor series recomputed from the logged run."""
    g = scenario.graph
    Lb = coupling_matrix(g)
    F, f0 = _drift_over_log(scenario, log)
    flow = F - f0[:, None, :]
    for i, agent in enumerate(scenario.agents):
        G = agent.input_matrix(log.states[:, i, :])
        flow[:, i, :] += np.einsum("tnm,tm->tn", G, log.controls[i])
    Edot = np.einsum("ij,tjn->tin", Lb, flow)
    sigmas = []
    for i, critic in enumerate(scenario.critics):
        z = critic.phi * (log.errors[:, i, :][:, critic._comp_index] - critic._offsets)
        tz = np.tanh(z)
        slope = critic.phi * (1.0 - tz * tz)
        sigmas.append(slope * Edot[:, i, :][:, critic._comp_index])
    return sigmas, F, f0


def collect_run_stats(scenario: Scenario, log: TrajectoryLog):
    """Per-agent statistics feeding the gain checks and ultimate bounds.

    The Gram-matrix floor ``q`` is taken over every excited sample (the
    whole probing phase); the regressor bound over its settled second half,
    since the ultimate-bound constants describe the persistent regime, not
    the initial transient peak.  The residual percentile and drift-gap
    power are tail quantities.
    """
    g = scenario.graph
    t = log.t
    Lb = coupling_matrix(g)
    sigmas, F, f0 = _sigma_series(scenario, log)
    fe_norm_sq = np.sum((F - f0[:, None, :]) ** 2, axis=2)

    stats = []
    for i in range(g.n_agents):
        pe = scenario.gains[i].probing
        active = pe.n_terms > 0 and any(a != 0.0 for a in pe.amplitudes)
        horizon = min(pe.cutoff_time, t[-1]) if active else 0.5 * t[-1]
        excite = t <= horizon
        settled = (t >= 0.5 * horizon) & (t <= horizon)
        cutoff = pe.cutoff_time if active else 0.0
        tail_start = max(cutoff, 0.75 * t[-1])
        tail = t >= tail_start
        if tail.sum() < 2:
            tail = t >= 0.75 * t[-1]

        sig = sigmas[i][excite]
        gram = sig.T @ sig / max(len(sig), 1)
        gram_min = float(np.linalg.eigvalsh(gram)[0]) if sig.size else 0.0
        plateau = sigmas[i][settled]
        sigma_max = float(np.linalg.norm(plateau, axis=1).max()) if plateau.size else 0.0

        eps_bar = float(np.percentile(np.abs(log.residuals[tail, i]), 99))
        members = np.concatenate(([i], g.neighbors(i)))
        power = (Lb[i, members] ** 2) @ fe_norm_sq[:, members].T
        fe_sq = float(power[tail].max())
        beta = {int(j): scenario.agents[int(j)].g_norm_bound for j in members}
        stats.append(
            RunStats(
                agent=i,
                sigma_max=sigma_max,
                gram_min_eig=gram_min,
                eps_bar=eps_bar,
                fe_coupling_sq=fe_sq,
                beta=beta,
            )
        )
    return tuple(stats)


@dataclass(frozen=True, eq=False)
class RunSummary:
    """Self-describing outcome report for one online run."""

    scenario_name: str
    seed: int
    step: float
    t_final: float
    convergence_tol: float
    convergence_window: float
    convergence_time: float | None
    initial_error_norms: np.ndarray
    final_error_norms: np.ndarray
    tail_error_sup: np.ndarray
    tail_weight_drift: np.ndarray
    cuub_bound: float
    cuub_sup: np.ndarray
    value_min: np.ndarray
    final_weights: tuple
    gain_reports: tuple
    bounds: tuple
    settings: tuple

    @property
    def cuub_ok(self) -> bool:
        return bool(np.all(self.cuub_sup < self.cuub_bound))

    def to_lines(self):
        lines = [
            f"scenario = {self.scenario_name}",
            f"seed = {self.seed}",
            f"step = {self.step:.17g}",
            f"t_final = {self.t_final:.17g}",
        ]
        lines.extend(self.settings)
        conv = "none" if self.convergence_time is None else f"{self.convergence_time:.6g}"
        lines.append(f"convergence_time = {conv}")
        lines.append(f"convergence_tol = {self.convergence_tol:.6g}")
        lines.append(f"convergence_window = {self.convergence_window:.6g}")
        lines.append(f"cuub_bound = {self.cuub_bound:.6g}")
        lines.append(f"cuub_ok = {self.cuub_ok}")
        for i in range(len(self.final_weights)):
            w = " ".join(f"{v:.10g}" for v in self.final_weights[i])
            lines.append(f"agent{i + 1}.final_weights = {w}")
            lines.append(f"agent{i + 1}.initial_error_norm = {self.initial_error_norms[i]:.6g}")
            lines.append(f"agent{i + 1}.final_error_norm = {self.final_error_norms[i]:.6g}")
            lines.append(f"agent{i + 1}.tail_error_sup = {self.tail_error_sup[i]:.6g}")
            lines.append(f"agent{i + 1}.tail_weight_drift = {self.tail_weight_drift[i]:.6g}")
            lines.append(f"agent{i + 1}.sync_gap_sup = {self.cuub_sup[i]:.6g}")
            lines.append(f"agent{i + 1}.value_min = {self.value_min[i]:.6g}")
            rep = self.gain_reports[i]
            lines.append(
                f"agent{i + 1}.gain_check = {'pass' if rep.passed else 'fail'} "
                f"(a={rep.a:g} in (0,2): {rep.a_ok}; refined a-limit={rep.a_upper_estimate:.4g}; "
                f"gamma={rep.gamma:g} > {rep.gamma_threshold:.4g}: {rep.gamma_ok})"
            )
            b = self.bounds[i]
            if isinstance(b, UubBounds):
                lines.append(
                    f"agent{i + 1}.ultimate_bounds = weight {b.weight_bound:.6g}, error {b.error_bound:.6g}"
                )
            else:
                lines.append(f"agent{i + 1}.ultimate_bounds = {b}")
        return lines


def _scenario_setting_lines(s: Scenario):
    lines = [f"mode = {s.mode}", f"n_agents = {s.n_agents}", f"state_dim = {s.state_dim}"]
    for i in range(s.n_agents):
        gains = s.gains[i]
        pe = gains.probing
        lines.append(
            f"agent{i + 1}.gains = a={gains.a:g} gamma={gains.gamma:g} "
            f"probe_terms={pe.n_terms} probe_cutoff={pe.cutoff_time:g}"
        )
        cost = s.costs[i]
        nbr = " ".join(f"{j + 1}:{cost.R_neighbors[j][0, 0]:g}" for j in sorted(cost.R_neighbors))
        lines.append(
            f"agent{i + 1}.cost = Qdiag={np.diag(cost.Q).tolist()} "
            f"R_self={cost.R_self[0, 0]:g} R_neighbors=[{nbr}]"
        )
        critic = s.critics[i]
        lines.append(
            f"agent{i + 1}.critic = basis_dim={critic.gen_dim} "
            f"phi={critic.phi.tolist()} translations={list(critic.translations)}"
        )
        lines.append(f"agent{i + 1}.x0 = {s.initial_states[i].tolist()}")
    lines.append(f"leader.x0 = {s.initial_leader_state.tolist()}")
    return tuple(lines)


def run_online(
    scenario: Scenario,
    *,
    convergence_tol: float = 1e-3,
    convergence_window: float = 2.0,
):
    """Integrate agents, leader and weights together and summarize the run.

    Controls follow the critic feedback plus the configured probing; weights
    follow the gradient-descent law through the same integrator stages.
    """
    if scenario.mode != "online":
        raise ScenarioValidationError(f"run_online requires mode 'online', got '{scenario.mode}'")
    weights = tuple(c.weights for c in scenario.critics)
    log = _integrate(
        scenario,
        weights,
        adapt=True,
        probing="auto",
        control_offsets=None,
        t_final=scenario.t_final,
        step=scenario.step,
    )

    stacked = np.concatenate(log.weights, axis=1)
    conv_time = detect_convergence(log.t, stacked, convergence_window, convergence_tol)

    err_norms = np.linalg.norm(log.errors, axis=2)
    tail = log.t >= 0.75 * log.t[-1]
    sync_gap = np.linalg.norm(log.states - log.leader_states[:, None, :], axis=2)

    value_min = np.empty(scenario.n_agents)
    for i, critic in enumerate(scenario.critics):
        z = critic.phi * (log.errors[:, i, :][:, critic._comp_index] - critic._offsets)
        value_min[i] = float(np.min(np.sum(np.tanh(z) * log.weights[i], axis=1)))

    stats = collect_run_stats(scenario, log)
    gain_reports = []
    bounds = []
    for i in range(scenario.n_agents):
        gain_reports.append(gain_check(scenario.gains[i], scenario.costs[i], scenario.graph, i, stats[i]))
        try:
            bounds.append(uub_bounds(stats[i], scenario.gains[i], scenario.costs[i]))
        except GainConditionError as exc:
            bounds.append(str(exc))

    tail_drift = np.array(
        [float(np.max(np.abs(w[tail] - w[-1]))) for w in log.weights]
    )
    summary = RunSummary(
        scenario_name=scenario.name,
        seed=scenario.seed,
        step=scenario.step,
        t_final=scenario.t_final,
        convergence_tol=convergence_tol,
        convergence_window=convergence_window,
        convergence_time=conv_time,
        initial_error_norms=err_norms[0],
        final_error_norms=err_norms[-1],
        tail_error_sup=err_norms[tail].max(axis=0),
        tail_weight_drift=tail_drift,
        cuub_bound=scenario.cuub_bound,
        cuub_sup=sync_gap[tail].max(axis=0),
        value_min=value_min,
        final_weights=tuple(w[-1].copy() for w in log.weights),
        gain_reports=tuple(gain_reports),
        bounds=tuple(bounds),
        settings=_scenario_setting_lines(scenario),
    )
    return log, summary


# ---------------------------------------------------------------------------
# Delimited-text trajectory output
# ---------------------------------------------------------------------------

def _column_names(log: TrajectoryLog):
    names = ["t"]
    n = log.state_dim
    for i in range(log.n_agents):
        tag = i + 1
        names.extend(f"x{tag}_{d + 1}" for d in range(n))
        names.extend(f"e{tag}_{d + 1}" for d in range(n))
        names.extend(f"u{tag}_{k + 1}" for k in range(log.controls[i].shape[1]))
        names.append(f"r{tag}")
        names.append(f"J{tag}")
        names.extend(f"th{tag}_{k + 1}" for k in range(log.weights[i].shape[1]))
        names.append(f"ham{tag}")
    names.extend(f"x0_{d + 1}" for d in range(n))
    return names


def write_trajectory_csv(log: TrajectoryLog, path) -> None:
    """One delimited row per time point; the header names every column."""
    blocks = [log.t[:, None]]
    for i in range(log.n_agents):
        blocks.extend(
            [
                log.states[:, i, :],
                log.errors[:, i, :],
                log.controls[i],
                log.cost_rates[:, i : i + 1],
                log.cost_integrals[:, i : i + 1],
                log.weights[i],
                log.residuals[:, i : i + 1],
            ]
        )
    blocks.append(log.leader_states)
    table = np.hstack(blocks)
    header = ",".join(_column_names(log))
    np.savetxt(path, table, fmt="%.17g", delimiter=",", header=header, comments="")


def read_trajectory_csv(path) -> TrajectoryLog:
    """Rebuild a trajectory log from a file written by write_trajectory_csv."""
    with open(path, "r", encoding="utf-8") as fh:
        names = fh.readline().strip().split(",")
    data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    if data.shape[1] != len(names):
        raise ValueError(f"{path}: header names {len(names)} columns but rows carry {data.shape[1]}")

    n = sum(1 for name in names if name.startswith("x1_"))
    n_agents = sum(1 for name in names if name.startswith("x") and name.endswith("_1") and name != "x0_1")
    pos = 1
    t = data[:, 0]
    states = np.empty((data.shape[0], n_agents, n))
    errors = np.empty_like(states)
    controls = []
    weights = []
    rates = np.empty((data.shape[0], n_agents))
    integrals = np.empty_like(rates)
    residuals = np.empty_like(rates)
    for i in range(n_agents):
        tag = f"{i + 1}"
        m = sum(1 for name in names if name.startswith(f"u{tag}_"))
        mc = sum(1 for name in names if name.startswith(f"th{tag}_"))
        states[:, i, :] = data[:, pos : pos + n]
        pos += n
        errors[:, i, :] = data[:, pos : pos + n]
        pos += n
        controls.append(data[:, pos : pos + m])
        pos += m
        rates[:, i] = data[:, pos]
        pos += 1
        integrals[:, i] = data[:, pos]
        pos += 1
        weights.append(data[:, pos : pos + mc])
        pos += mc
        residuals[:, i] = data[:, pos]
        pos += 1
    leader = data[:, pos : pos + n]
    return TrajectoryLog(
        t=t,
        states=states,
        leader_states=leader,
        errors=errors,
        controls=tuple(controls),
        weights=tuple(weights),
        residuals=residuals,
        cost_rates=rates,
        cost_integrals=integrals,
    )


def write_summary(summary: RunSummary, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for line in summary.to_lines():
            fh.write(line + "\n")
