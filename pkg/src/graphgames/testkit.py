"""Independent verification oracles for the engine's checkable claims.

Every check compares two routes to the same quantity: a direct computation
against an independent reformulation (full-graph contraction vs neighbor
sum, gradient flow vs closed-form least squares, perturbed vs unperturbed
re-simulation, logged value decrease vs its residual-derived band).  Checks
are deterministic given a seed and own their scenario copies, so they can
run concurrently.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .graph import DiGraph, coupling_row
from .dynamics import AgentModel, VectorFieldSpec, builtin_field, error_rate
from .gfhm import GfhmCritic
from .controller import (
    ExcitationError,
    LearnerGains,
    ProbingSpec,
    policy_evaluation_lsq,
    _stack_samples,
)
from .simulator import (
    NumericalBlowupError,
    Scenario,
    TrajectoryLog,
    cost_integral,
    simulate_policies,
)

__all__ = [
    "CheckReport",
    "check_appendix_identity",
    "check_lsq_vs_gradient_flow",
    "check_nash_perturbation",
    "check_lyapunov_decrease",
    "random_coupling_case",
    "run_all_checks",
]


@dataclass(frozen=True)
class CheckReport:
    """One verification outcome: measured value against its tolerance."""

    name: str
    passed: bool
    measured: float
    tolerance: float
    context: str

    def __post_init__(self) -> None:
        if not (np.isfinite(self.measured) and np.isfinite(self.tolerance)):
            raise ValueError("measured value and tolerance must be finite")

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return f"{status} {self.name}: measured={self.measured:.3e} tol={self.tolerance:.3e} ({self.context})"


def check_appendix_identity(
    g: DiGraph,
    agents,
    leader: VectorFieldSpec,
    states,
    leader_state,
    controls,
    probe,
    *,
    tolerance: float = 1e-12,
    context: str = "",
) -> CheckReport:
    """Full-graph row contraction equals the neighbor-restricted sum.

    The left route stacks drift gaps and control effects over every node
    and contracts with the Kronecker-expanded coupling row; the right route
    is the neighbor-only sum.  Both are projected onto ``probe``.
    """
    X = np.asarray(states, dtype=float)
    x0 = np.asarray(leader_state, dtype=float).reshape(-1)
    probe = np.asarray(probe, dtype=float).reshape(-1)
    n = x0.size
    f0 = leader(x0)
    stacked = np.concatenate(
        [agents[j].drift(X[j]) - f0 + agents[j].input_matrix(X[j]) @ np.atleast_1d(controls[j]) for j in range(g.n_agents)]
    )
    worst = 0.0
    scale = 1.0
    for i in range(g.n_agents):
        row_full = np.kron(coupling_row(g, i), np.eye(n))
        full = float(probe @ (row_full @ stacked))
        local = float(probe @ error_rate(g, agents, leader, i, X, x0, controls))
        worst = max(worst, abs(full - local))
        scale = max(scale, abs(full), abs(local))
    measured = worst / scale
    return CheckReport(
        name="neighbor-sum-identity",
        passed=measured < tolerance,
        measured=measured,
        tolerance=tolerance,
        context=context or f"N={g.n_agents}",
    )


def check_lsq_vs_gradient_flow(
    samples,
    gains: LearnerGains,
    *,
    tolerance: float = 1e-3,
    context: str = "",
) -> CheckReport:
    """Gradient flow over frozen samples lands on the least-squares weights.

    The flow ``dtheta = -a * mean_k sigma_k (sigma_k @ theta + r_k)`` is a
    linear ODE; it is integrated with an unconditionally stable implicit
    scheme until stationary and compared against the closed-form normal
    equations.  Raises :class:`ExcitationError` when the sample Gram matrix
    is too ill-conditioned for either route to be trusted.
    """
    S, r = _stack_samples(samples)
    gram = S.T @ S / len(S)
    rhs = S.T @ r / len(S)
    eigs = np.linalg.eigvalsh(gram)
    if eigs[0] <= 0 or eigs[-1] / eigs[0] > 1e6:
        raise ExcitationError("insufficient excitation: Gram matrix is too ill-conditioned")

    theta_lsq = policy_evaluation_lsq((S, r))

    theta = np.zeros(S.shape[1])
    dt = 5.0 / (gains.a * eigs[0])
    system = np.eye(S.shape[1]) + dt * gains.a * gram
    for _ in range(60):
        new = np.linalg.solve(system, theta - dt * gains.a * rhs)
        if np.max(np.abs(new - theta)) < 1e-14 * max(1.0, np.max(np.abs(new))):
            theta = new
            break
        theta = new

    measured = float(np.linalg.norm(theta - theta_lsq) / max(np.linalg.norm(theta_lsq), 1e-30))
    return CheckReport(
        name="flow-matches-least-squares",
        passed=measured < tolerance,
        measured=measured,
        tolerance=tolerance,
        context=context or f"samples={len(S)} dim={S.shape[1]}",
    )


def _truncation_tail_estimate(log: TrajectoryLog) -> float:
    """Crude remainder of the cost integral past the horizon.

    Fits an exponential decay rate to the cost rate over the final quarter;
    when the rate does not decay, falls back to one quarter-length of the
    final rate.
    """
    quarter = log.t >= 0.75 * log.t[-1]
    t = log.t[quarter]
    worst = 0.0
    for i in range(log.n_agents):
        r = log.cost_rates[quarter, i]
        r_end = float(r[-1])
        if r_end <= 0:
            continue
        positive = r > 0
        if positive.sum() > 2:
            slope = np.polyfit(t[positive], np.log(r[positive]), 1)[0]
            if slope < 0:
                worst = max(worst, r_end / -slope)
                continue
        worst = max(worst, r_end * (t[-1] - t[0]))
    return worst


def check_nash_perturbation(
    scenario: Scenario,
    weights=None,
    offsets=(-0.1, -0.05, 0.05, 0.1),
    *,
    slack_fraction: float = 0.02,
    policy_overrides=None,
    context: str = "",
) -> CheckReport:
    """No unilateral constant control offset lowers the deviator's own cost.

    Re-simulates the frozen-weight closed loop once per (agent, offset) with
    that agent's control shifted by the constant; all other policies stay
    fixed.  The measured value is the worst relative cost change, which must
    not drop below ``-slack_fraction``.  Cost integrals are truncated at the
    scenario horizon; the estimated remainder is reported in the context.
    Perturbed runs that blow up are reported as inconclusive rather than
    failures.
    """
    base = simulate_policies(
        scenario, weights=weights, probing="off", policy_overrides=policy_overrides
    )
    base_costs = [cost_integral(base, i) for i in range(scenario.n_agents)]
    worst = np.inf
    inconclusive = []
    for i in range(scenario.n_agents):
        for delta in offsets:
            shift = np.full(scenario.agents[i].input_dim, float(delta))
            try:
                log = simulate_policies(
                    scenario,
                    weights=weights,
                    probing="off",
                    control_offsets={i: shift},
                    policy_overrides=policy_overrides,
                )
            except NumericalBlowupError:
                inconclusive.append((i, float(delta)))
                continue
            rel = (cost_integral(log, i) - base_costs[i]) / base_costs[i]
            worst = min(worst, rel)
    note = context or f"offsets={list(offsets)}"
    note += f"; truncation_tail<={_truncation_tail_estimate(base):.2e}"
    if inconclusive:
        note += f"; inconclusive={inconclusive}"
    if not np.isfinite(worst):
        worst = 0.0
        note += "; all cases inconclusive"
    return CheckReport(
        name="nash-constant-offsets",
        passed=worst >= -slack_fraction,
        measured=float(worst),
        tolerance=slack_fraction,
        context=note,
    )


def check_lyapunov_decrease(
    scenario: Scenario,
    log: TrajectoryLog,
    weights=None,
    *,
    start_time: float | None = None,
    context: str = "",
) -> CheckReport:
    """Post-excitation value estimates decrease up to the residual band.

    Along the tail of the run the value estimate may only increase where the
    Hamiltonian residual exceeds the running cost, so the cumulative
    increase is bounded by the integral of the absolute residual.  The
    measured value is the worst ratio of observed increase to that band.
    """
    if weights is None:
        weights = tuple(w[-1] for w in log.weights)
    if start_time is None:
        start_time = max(gm.probing.cutoff_time for gm in scenario.gains)
        if start_time >= log.t[-1]:
            start_time = 0.75 * log.t[-1]
    tail = log.t >= start_time
    if tail.sum() < 2:
        raise ValueError("tail window must contain at least two samples")

    worst = 0.0
    for i, critic in enumerate(scenario.critics):
        snap = critic.with_weights(weights[i])
        z = snap.phi * (log.errors[tail, i, :][:, snap._comp_index] - snap._offsets)
        values = np.tanh(z) @ snap.weights
        increase = float(np.sum(np.maximum(np.diff(values), 0.0)))
        band = float(np.trapezoid(np.abs(log.residuals[tail, i]), log.t[tail]))
        band += 1e-9 * max(1.0, float(np.max(np.abs(values))))
        worst = max(worst, increase / band)
    return CheckReport(
        name="value-decrease-band",
        passed=worst <= 1.0,
        measured=worst,
        tolerance=1.0,
        context=context or f"start={start_time:g}",
    )


def random_coupling_case(rng: np.random.Generator, n_agents: int | None = None):
    """Random graph, benchmark-family agents, states and controls for draws."""
    N = int(rng.integers(2, 7)) if n_agents is None else n_agents
    adjacency = rng.uniform(0.2, 2.0, size=(N, N)) * (rng.random((N, N)) < 0.5)
    np.fill_diagonal(adjacency, 0.0)
    pinning = rng.uniform(0.0, 1.5, size=N) * (rng.random(N) < 0.5)
    g = DiGraph(adjacency, pinning)

    leader = builtin_field("paper_leader")
    agents = []
    for _ in range(N):
        gain = float(rng.uniform(0.2, 2.0) * rng.choice([-1.0, 1.0]))
        column = VectorFieldSpec(2, ((), ((gain, (0, 2)),)))
        agents.append(AgentModel(leader, (column,), g_norm_bound=10.0 * abs(gain)))
    states = rng.uniform(-1.0, 1.0, size=(N, 2))
    leader_state = rng.uniform(-1.0, 1.0, size=2)
    controls = [rng.uniform(-2.0, 2.0, size=1) for _ in range(N)]
    probe = rng.uniform(-1.0, 1.0, size=2)
    return g, tuple(agents), leader, states, leader_state, controls, probe


def _random_flow_dataset(rng: np.random.Generator, dim: int = 4, count: int = 20):
    """Well-conditioned (sigma, r) samples; resampled until the Gram behaves."""
    while True:
        S = rng.normal(size=(count, dim))
        r = np.abs(rng.normal(size=count))
        gram = S.T @ S / count
        eigs = np.linalg.eigvalsh(gram)
        if eigs[0] > 0 and eigs[-1] / eigs[0] < 1e4:
            return S, r


def run_all_checks(
    scenario: Scenario | None = None,
    *,
    seed: int = 0,
    draws: int = 100,
    datasets: int = 20,
    offsets=(-0.1, -0.05, 0.05, 0.1),
):
    """Run the whole oracle suite and return one report per check."""
    from .cli import load_scenario
    from .simulator import run_online

    rng = np.random.default_rng(seed)
    reports = []

    worst = 0.0
    for _ in range(draws):
        case = random_coupling_case(rng)
        rep = check_appendix_identity(*case)
        worst = max(worst, rep.measured)
    reports.append(
        CheckReport(
            name="neighbor-sum-identity",
            passed=worst < 1e-12,
            measured=worst,
            tolerance=1e-12,
            context=f"seed={seed} draws={draws}",
        )
    )

    gains = LearnerGains(a=0.5, probing=ProbingSpec())
    worst = 0.0
    for _ in range(datasets):
        S, r = _random_flow_dataset(rng)
        rep = check_lsq_vs_gradient_flow((S, r), gains)
        worst = max(worst, rep.measured)
    reports.append(
        CheckReport(
            name="flow-matches-least-squares",
            passed=worst < 1e-3,
            measured=worst,
            tolerance=1e-3,
            context=f"seed={seed} datasets={datasets}",
        )
    )

    if scenario is None:
        scenario = load_scenario("paper-benchmark")
    log, summary = run_online(scenario)
    converged = tuple(w[-1] for w in log.weights)
    reports.append(
        check_nash_perturbation(
            scenario, converged, offsets, context=f"scenario={scenario.name}"
        )
    )
    reports.append(
        check_lyapunov_decrease(scenario, log, context=f"scenario={scenario.name}")
    )
    return reports
