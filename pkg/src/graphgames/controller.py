"""Costs, control law, adaptive weight updates, probing and diagnostics.

The per-agent running cost is quadratic in the local consensus error, the
agent's own control and its neighbors' controls.  The control law feeds the
critic's value gradient back through the agent's input map; the weight law
is the gradient descent of the squared local Hamiltonian residual.  Batch
policy iteration reuses the same pieces offline: evaluate the weights by
least squares over trajectory samples, then improve the policies from the
fitted value gradient.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .graph import DiGraph, coupling_row
from .dynamics import AgentModel, VectorFieldSpec, consensus_error, consensus_errors, error_rate
from .gfhm import GfhmCritic, gradient_matrix, value, value_gradient

__all__ = [
    "CostValidationError",
    "GainValidationError",
    "ExcitationError",
    "AdmissibilityError",
    "GainConditionError",
    "CostSpec",
    "ProbingSpec",
    "LearnerGains",
    "RunStats",
    "GainCheckReport",
    "UubBounds",
    "PolicyIterationSettings",
    "PolicyIterationResult",
    "cost_rate",
    "sigma_vector",
    "hamiltonian_residual",
    "weight_update_rate",
    "control_law",
    "probing_signal",
    "gain_check",
    "uub_bounds",
    "policy_evaluation_lsq",
    "run_policy_iteration",
]


class CostValidationError(ValueError):
    """Cost matrices or supplied controls violate the cost contract."""


class GainValidationError(ValueError):
    """Learner gains or probing parameters violate their contract."""


class ExcitationError(RuntimeError):
    """The collected regressors do not span the weight space."""


class AdmissibilityError(RuntimeError):
    """A policy drove the closed loop outside the state guard."""


class GainConditionError(RuntimeError):
    """The adaptation-gain conditions exclude a finite ultimate bound."""


def _check_spd(M, what: str) -> np.ndarray:
    M = np.array(M, dtype=float)
    if M.ndim != 2 or M.shape[0] != M.shape[1]:
        raise CostValidationError(f"{what} must be a square matrix")
    if not np.allclose(M, M.T, rtol=0.0, atol=1e-12):
        raise CostValidationError(f"{what} must be symmetric")
    if np.linalg.eigvalsh(M)[0] <= 0.0:
        raise CostValidationError(f"{what} must be positive definite")
    M.setflags(write=False)
    return M


@dataclass(frozen=True, eq=False)
class CostSpec:
    """Quadratic running-cost weights for one agent.

    ``R_neighbors`` maps neighbor indices to the weight on that neighbor's
    control; it must carry exactly the agent's neighbor set (absent means
    zero weight, which is only allowed for non-neighbors).
    """

    Q: np.ndarray
    R_self: np.ndarray
    R_neighbors: Mapping[int, np.ndarray] = field(default_factory=dict)

    def __post_init__(self) -> None:
        object.__setattr__(self, "Q", _check_spd(self.Q, "state weight Q"))
        object.__setattr__(self, "R_self", _check_spd(self.R_self, "control weight R_self"))
        checked = {}
        for j, R in dict(self.R_neighbors).items():
            checked[int(j)] = _check_spd(R, f"neighbor control weight R[{j}]")
        object.__setattr__(self, "R_neighbors", checked)

    @property
    def state_dim(self) -> int:
        return self.Q.shape[0]

    @property
    def input_dim(self) -> int:
        return self.R_self.shape[0]


@dataclass(frozen=True, eq=False)
class ProbingSpec:
    """Sum-of-sinusoids excitation added to a control before the cutoff time.

    Frequencies must be distinct and nonzero; the signal is identically zero
    from the cutoff time on.
    """

    amplitudes: tuple = ()
    frequencies: tuple = ()
    phases: tuple | None = None
    cutoff_time: float = 10.0

    def __post_init__(self) -> None:
        amps = tuple(float(a) for a in self.amplitudes)
        freqs = tuple(float(w) for w in self.frequencies)
        phases = (0.0,) * len(amps) if self.phases is None else tuple(float(p) for p in self.phases)
        if not len(amps) == len(freqs) == len(phases):
            raise GainValidationError("amplitudes, frequencies and phases must have equal length")
        if any(not math.isfinite(v) for v in amps + freqs + phases):
            raise GainValidationError("probing parameters must be finite")
        if any(w == 0.0 for w in freqs):
            raise GainValidationError("probing frequencies must be nonzero")
        if len(set(freqs)) != len(freqs):
            raise GainValidationError("probing frequencies must be distinct")
        cutoff = float(self.cutoff_time)
        if cutoff < 0:
            raise GainValidationError("probing cutoff time must be nonnegative")
        object.__setattr__(self, "amplitudes", amps)
        object.__setattr__(self, "frequencies", freqs)
        object.__setattr__(self, "phases", phases)
        object.__setattr__(self, "cutoff_time", cutoff)

    @property
    def n_terms(self) -> int:
        return len(self.amplitudes)


@dataclass(frozen=True, eq=False)
class LearnerGains:
    """Adaptation gain, probing spec and the analysis constant gamma.

    ``gamma`` plays no role in the closed loop; it only enters the gain
    diagnostics and ultimate-bound reports.
    """

    a: float
    probing: ProbingSpec = field(default_factory=ProbingSpec)
    gamma: float = 0.0

    def __post_init__(self) -> None:
        a = float(self.a)
        # zero is the degenerate no-learning setting; gain_check enforces
        # the positive range required for convergence
        if not math.isfinite(a) or a < 0:
            raise GainValidationError("adaptation gain must be nonnegative")
        gamma = float(self.gamma)
        if not math.isfinite(gamma) or gamma < 0:
            raise GainValidationError("gamma must be a nonnegative number")
        object.__setattr__(self, "a", a)
        object.__setattr__(self, "gamma", gamma)


def cost_rate(spec: CostSpec, e, u, u_neighbors: Mapping[int, object]) -> float:
    """Instantaneous running cost; nonnegative, zero only at zero arguments."""
    e = np.asarray(e, dtype=float).reshape(-1)
    u = np.atleast_1d(np.asarray(u, dtype=float))
    if e.shape != (spec.state_dim,):
        raise CostValidationError(f"error has shape {e.shape}, expected ({spec.state_dim},)")
    if u.shape != (spec.input_dim,):
        raise CostValidationError(f"control has shape {u.shape}, expected ({spec.input_dim},)")
    total = float(e @ spec.Q @ e + u @ spec.R_self @ u)
    for j, R in spec.R_neighbors.items():
        u_j = u_neighbors.get(j) if hasattr(u_neighbors, "get") else None
        if u_j is None:
            raise CostValidationError(f"missing control for neighbor {j}")
        u_j = np.atleast_1d(np.asarray(u_j, dtype=float))
        total += float(u_j @ R @ u_j)
    return total


def sigma_vector(
    critic: GfhmCritic,
    g: DiGraph,
    agents: Sequence[AgentModel],
    leader: VectorFieldSpec,
    i: int,
    states,
    leader_state,
    controls,
) -> np.ndarray:
    """Regressor of the weight law: basis Jacobian applied to the error rate.

    Depends on the critic's structure only, never on its weights.
    """
    e_i = consensus_error(g, i, states, leader_state)
    rate = error_rate(g, agents, leader, i, states, leader_state, controls)
    return gradient_matrix(critic, e_i).T @ rate


def hamiltonian_residual(
    critic: GfhmCritic,
    spec: CostSpec,
    g: DiGraph,
    agents: Sequence[AgentModel],
    leader: VectorFieldSpec,
    i: int,
    states,
    leader_state,
    controls,
) -> float:
    """Local Hamiltonian residual: running cost plus weighted regressor."""
    if controls[i] is None:
        raise CostValidationError(f"missing control for agent {i}")
    u_neighbors = {int(j): controls[j] for j in g.neighbors(i)}
    e_i = consensus_error(g, i, states, leader_state)
    r = cost_rate(spec, e_i, controls[i], u_neighbors)
    sigma = sigma_vector(critic, g, agents, leader, i, states, leader_state, controls)
    return r + float(critic.weights @ sigma)


def weight_update_rate(gains: LearnerGains, theta, sigma, cost_rate_value: float) -> np.ndarray:
    """Gradient-descent weight velocity ``-a * sigma * (sigma @ theta + r)``."""
    r = float(cost_rate_value)
    if r < 0:
        raise ValueError("cost rate must be nonnegative")
    theta = np.asarray(theta, dtype=float)
    sigma = np.asarray(sigma, dtype=float)
    return -gains.a * sigma * (float(sigma @ theta) + r)


def control_law(
    critic: GfhmCritic,
    agent: AgentModel,
    g: DiGraph,
    i: int,
    x_i,
    e_i,
    spec: CostSpec,
) -> np.ndarray:
    """Value-gradient feedback through the agent's own coupling weight.

    ``-(1/2) R_self^-1 g(x_i)^T (l_ii + b_ii) grad V(e_i)``; linear in the
    critic weights.
    """
    lb_ii = coupling_row(g, i)[i]
    G = agent.input_matrix(np.asarray(x_i, dtype=float))
    return -0.5 * lb_ii * np.linalg.solve(spec.R_self, G.T @ value_gradient(critic, e_i))


def probing_signal(gains: LearnerGains, t: float, input_dim: int = 1) -> np.ndarray:
    """Excitation value at time ``t``; identically zero from the cutoff on."""
    if t < 0:
        raise ValueError("time must be nonnegative")
    pe = gains.probing
    if pe.n_terms == 0 or t >= pe.cutoff_time:
        return np.zeros(input_dim)
    amps = np.asarray(pe.amplitudes)
    freqs = np.asarray(pe.frequencies)
    phases = np.asarray(pe.phases)
    return np.full(input_dim, float(amps @ np.sin(freqs * t + phases)))


# ---------------------------------------------------------------------------
# Gain diagnostics and ultimate bounds
# ---------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class RunStats:
    """Per-agent statistics extracted from a finished run.

    ``sigma_max`` and ``gram_min_eig`` are estimated over the excited phase
    of the run; ``eps_bar`` is the 99th percentile of the absolute residual
    over the post-convergence window and ``fe_coupling_sq`` the tail maximum
    of the coupled drift-gap power ``sum_j (lb_ij |f_j - f0|)^2``.  ``beta``
    maps each member of the agent's closed neighborhood to its declared
    input-map bound.
    """

    agent: int
    sigma_max: float
    gram_min_eig: float
    eps_bar: float
    fe_coupling_sq: float
    beta: Mapping[int, float]


@dataclass(frozen=True)
class GainCheckReport:
    """Outcome of the adaptation-gain and gamma conditions for one agent."""

    agent: int
    a: float
    a_ok: bool
    a_upper_estimate: float
    gamma: float
    gamma_threshold: float
    gamma_ok: bool

    @property
    def passed(self) -> bool:
        return self.a_ok and self.gamma_ok


@dataclass(frozen=True)
class UubBounds:
    """Ultimate bounds on the weight estimation error and consensus error."""

    weight_bound: float
    error_bound: float


def gain_check(gains: LearnerGains, spec: CostSpec, g: DiGraph, i: int, run_stats: RunStats) -> GainCheckReport:
    """Check ``a`` against (0, 2) and gamma against its lower threshold.

    The threshold is the larger of ``(N_i + 1) / lambda_min(Q)`` and the
    worst ``(lb_ij * beta_j)^2 / (2 lambda_min(R_ij))`` over the agent's
    closed neighborhood.
    """
    a_ok = 0.0 < gains.a < 2.0
    if run_stats.sigma_max > 0 and run_stats.gram_min_eig > 0:
        a_upper = 2.0 * run_stats.gram_min_eig / run_stats.sigma_max**2
    else:
        a_upper = float("inf")
    row = coupling_row(g, i)
    neighbors = g.neighbors(i)
    lam_q = float(np.linalg.eigvalsh(spec.Q)[0])
    candidates = [(len(neighbors) + 1) / lam_q]
    for j in (i, *neighbors):
        j = int(j)
        try:
            beta_j = float(run_stats.beta[j])
        except KeyError:
            raise GainValidationError(f"missing input-map bound for agent {j}") from None
        R = spec.R_self if j == i else spec.R_neighbors.get(j)
        if R is None:
            raise GainValidationError(f"missing neighbor weight R[{j}] in the cost spec")
        lam_r = float(np.linalg.eigvalsh(R)[0])
        candidates.append((row[j] * beta_j) ** 2 / (2.0 * lam_r))
    threshold = max(candidates)
    return GainCheckReport(
        agent=i,
        a=gains.a,
        a_ok=a_ok,
        a_upper_estimate=a_upper,
        gamma=gains.gamma,
        gamma_threshold=threshold,
        gamma_ok=gains.gamma > threshold,
    )


def uub_bounds(run_stats: RunStats, gains: LearnerGains, spec: CostSpec) -> UubBounds:
    """Evaluate the two square-root ultimate-bound formulas.

    Raises :class:`GainConditionError` when a denominator is nonpositive,
    i.e. the gain conditions exclude a finite bound.
    """
    numerator = run_stats.fe_coupling_sq + run_stats.eps_bar**2 / (2.0 * gains.a)
    weight_denom = run_stats.gram_min_eig - 0.5 * gains.a * run_stats.sigma_max**2
    n_members = len(run_stats.beta)
    lam_q = float(np.linalg.eigvalsh(spec.Q)[0])
    error_denom = 2.0 * gains.gamma * lam_q - 2.0 * n_members
    if weight_denom <= 0 or error_denom <= 0:
        raise GainConditionError(
            "gain conditions unsatisfied: "
            f"weight denominator {weight_denom:.3e}, error denominator {error_denom:.3e}"
        )
    return UubBounds(
        weight_bound=math.sqrt(numerator / weight_denom),
        error_bound=math.sqrt(numerator / error_denom),
    )


# ---------------------------------------------------------------------------
# Batch policy evaluation and policy iteration
# ---------------------------------------------------------------------------

def _stack_samples(samples):
    if isinstance(samples, tuple) and len(samples) == 2 and hasattr(samples[0], "ndim"):
        S = np.asarray(samples[0], dtype=float)
        r = np.asarray(samples[1], dtype=float).reshape(-1)
    else:
        pairs = list(samples)
        if not pairs:
            raise ExcitationError("insufficient excitation: no samples")
        S = np.asarray([np.asarray(s, dtype=float).reshape(-1) for s, _ in pairs])
        r = np.asarray([float(rv) for _, rv in pairs])
    if S.ndim != 2 or S.shape[0] != r.shape[0]:
        raise ExcitationError("samples must pair one regressor with one cost rate")
    return S, r


def policy_evaluation_lsq(samples) -> np.ndarray:
    """Unique least-squares minimizer of the summed squared residual.

    Solves ``min_theta sum (sigma @ theta + r)^2`` in closed form from the
    normal equations.  Raises :class:`ExcitationError` when there are fewer
    samples than weights or the Gram matrix is numerically singular.
    """
    S, r = _stack_samples(samples)
    n_samples, m = S.shape
    if n_samples < m:
        raise ExcitationError(
            f"insufficient excitation: {n_samples} samples for {m} weights"
        )
    gram = S.T @ S
    cond = np.linalg.cond(gram)
    if not np.isfinite(cond) or cond > 1e10:
        raise ExcitationError("insufficient excitation: Gram matrix is numerically singular")
    return -np.linalg.solve(gram, S.T @ r)


@dataclass(frozen=True)
class PolicyIterationSettings:
    """Knobs of the offline iteration: horizon, sampling and stopping."""

    eval_horizon: float = 5.0
    sample_stride: int = 5
    tolerance: float = 1e-4
    max_iterations: int = 50
    probe_points: int = 8


@dataclass(frozen=True, eq=False)
class PolicyIterationResult:
    """Weight sequence (initial guess first) plus fixed probe-point values.

    ``probe_values[k, i, p]`` is agent ``i``'s value estimate at probe point
    ``p`` after its ``k``-th evaluation.
    """

    weight_sequence: tuple
    probe_points: np.ndarray
    probe_values: np.ndarray
    converged: bool

    @property
    def iterations(self) -> int:
        return len(self.weight_sequence) - 1

    @property
    def final_weights(self) -> tuple:
        return self.weight_sequence[-1]


def _policy_controls(scenario, weights, X, x0):
    E = consensus_errors(scenario.graph, X, x0)
    return [
        control_law(
            scenario.critics[j].with_weights(weights[j]),
            scenario.agents[j],
            scenario.graph,
            j,
            X[j],
            E[j],
            scenario.costs[j],
        )
        for j in range(scenario.graph.n_agents)
    ], E


def _collect_policy_samples(scenario, log, weights, stride: int):
    """Residual samples (sigma, r) along a logged run, probe excluded.

    Controls are recomputed from the policies so the samples evaluate the
    policies being played, not the excitation used to move the state.
    """
    g = scenario.graph
    n_agents = g.n_agents
    sigmas = [[] for _ in range(n_agents)]
    rates = [[] for _ in range(n_agents)]
    for idx in range(0, log.t.size, stride):
        X = log.states[idx]
        x0 = log.leader_states[idx]
        controls, E = _policy_controls(scenario, weights, X, x0)
        for i in range(n_agents):
            sig = sigma_vector(
                scenario.critics[i], g, scenario.agents, scenario.leader, i, X, x0, controls
            )
            u_neighbors = {int(j): controls[j] for j in g.neighbors(i)}
            r = cost_rate(scenario.costs[i], E[i], controls[i], u_neighbors)
            sigmas[i].append(sig)
            rates[i].append(r)
    return [(np.asarray(sigmas[i]), np.asarray(rates[i])) for i in range(n_agents)]


def run_policy_iteration(scenario, settings: PolicyIterationSettings | None = None) -> PolicyIterationResult:
    """Alternate sample collection, least-squares evaluation and improvement.

    Every agent's policy is re-evaluated and improved on every iteration;
    the loop stops when the largest per-agent weight change drops below the
    tolerance or the iteration cap is reached.  A trajectory that leaves the
    state guard aborts with :class:`AdmissibilityError`.
    """
    from .simulator import NumericalBlowupError, simulate_policies

    if settings is None:
        settings = scenario.pi
    g = scenario.graph
    rng = np.random.default_rng(scenario.seed)
    e0 = consensus_errors(g, scenario.initial_states, scenario.initial_leader_state)
    span = np.maximum(np.abs(e0).max(axis=0), 0.1)
    probe_points = rng.uniform(-1.0, 1.0, size=(settings.probe_points, e0.shape[1])) * span

    weights = tuple(c.weights.copy() for c in scenario.critics)
    sequence = [weights]
    probe_values = []
    converged = False
    for _ in range(settings.max_iterations):
        try:
            log = simulate_policies(
                scenario,
                weights=weights,
                probing="always",
                t_final=settings.eval_horizon,
            )
        except NumericalBlowupError as exc:
            raise AdmissibilityError(f"inadmissible policy: {exc}") from exc
        samples = _collect_policy_samples(scenario, log, weights, settings.sample_stride)
        new_weights = tuple(policy_evaluation_lsq(samples[i]) for i in range(g.n_agents))
        sequence.append(new_weights)
        probe_values.append(
            [
                [value(scenario.critics[i].with_weights(new_weights[i]), p) for p in probe_points]
                for i in range(g.n_agents)
            ]
        )
        delta = max(
            float(np.max(np.abs(new - old))) for new, old in zip(new_weights, weights)
        )
        weights = new_weights
        if delta < settings.tolerance:
            converged = True
            break
    return PolicyIterationResult(
        weight_sequence=tuple(sequence),
        probe_points=probe_points,
        probe_values=np.asarray(probe_values),
        converged=converged,
    )
