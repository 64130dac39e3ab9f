"""Scenario loading, builtin benchmarks and the command-line front end.

Scenario files are single YAML documents; every run writes a delimited
trajectory file plus a key-value summary so it is self-describing.  Exit
codes: 0 success / all checks pass, 1 usage error, 2 validation error,
3 runtime blow-up, 4 verification failure.
"""
from __future__ import annotations

import argparse
import dataclasses
import sys
import time
from pathlib import Path

import numpy as np
import yaml

from .graph import DiGraph, GraphValidationError, ring_topology
from .dynamics import (
    AgentModel,
    DynamicsError,
    VectorFieldSpec,
    builtin_agent,
    builtin_field,
)
from .gfhm import CriticValidationError, GfhmCritic, default_critic
from .controller import (
    AdmissibilityError,
    CostSpec,
    CostValidationError,
    ExcitationError,
    GainValidationError,
    LearnerGains,
    PolicyIterationSettings,
    ProbingSpec,
    UubBounds,
    GainConditionError,
    gain_check,
    run_policy_iteration,
    uub_bounds,
)
from .simulator import (
    NumericalBlowupError,
    Scenario,
    ScenarioValidationError,
    collect_run_stats,
    read_trajectory_csv,
    run_online,
    write_summary,
    write_trajectory_csv,
)

__all__ = [
    "ScenarioError",
    "paper_benchmark",
    "two_node_loop",
    "builtin_scenarios",
    "load_scenario",
    "scenario_from_config",
    "scenario_to_config",
    "main",
    "entrypoint",
]

_VALIDATION_ERRORS = (
    GraphValidationError,
    DynamicsError,
    CriticValidationError,
    CostValidationError,
    GainValidationError,
    ScenarioValidationError,
)


class ScenarioError(ValueError):
    """Config file cannot be parsed or does not describe a valid scenario."""


# ---------------------------------------------------------------------------
# Builtin scenarios
# ---------------------------------------------------------------------------

def _benchmark_gains(node: int) -> LearnerGains:
    probing = ProbingSpec(
        amplitudes=(0.12, 0.1, 0.08),
        frequencies=(1.1 + 0.2 * node, 3.3 + 0.3 * node, 7.1 + 0.5 * node),
        phases=(0.0, 0.7, 1.9),
        cutoff_time=10.0,
    )
    return LearnerGains(a=0.1, probing=probing, gamma=70.0)


def paper_benchmark() -> Scenario:
    """Five-node benchmark: directed unit ring with the leader pinned to node 3.

    Node dynamics, cost weights (Q identity, own-control weight 8.5,
    neighbor-control weight 0.1) and adaptation gain 0.1 follow the
    published study this scenario reproduces numbers for; the exact ring
    orientation, initial states and probing signal are configuration
    choices documented here, not published values.
    """
    graph = ring_topology(5, pinned_agent=2, pinning_gain=1.0)
    agents = tuple(builtin_agent(f"paper_node_{k}") for k in range(1, 6))
    leader = builtin_field("paper_leader")
    costs = []
    for i in range(5):
        neighbor = (i - 1) % 5
        costs.append(
            CostSpec(Q=np.eye(2), R_self=[[8.5]], R_neighbors={neighbor: [[0.1]]})
        )
    critics = tuple(default_critic(2) for _ in range(5))
    gains = tuple(_benchmark_gains(k) for k in range(5))
    # Inside the basin of the drift's origin equilibrium: trajectories with
    # x1 + x2 large and positive get trapped on the x1 = 1 equilibrium line,
    # where the input map x2^2 loses authority.
    initial_states = np.array(
        [
            [0.6, -0.4],
            [-0.5, 0.5],
            [0.2, 0.3],
            [-0.2, -0.6],
            [0.5, 0.1],
        ]
    )
    return Scenario(
        name="paper-benchmark",
        graph=graph,
        agents=agents,
        leader=leader,
        costs=tuple(costs),
        critics=critics,
        gains=gains,
        step=1e-3,
        t_final=20.0,
        initial_states=initial_states,
        initial_leader_state=np.array([0.25, -0.25]),
        seed=0,
        mode="online",
        cuub_bound=0.5,
        state_box=(np.array([-1.5, -1.5]), np.array([1.5, 1.5])),
    )


def two_node_loop() -> Scenario:
    """Small strongly connected pair for quick experiments and smoke runs."""
    graph = DiGraph([[0.0, 1.0], [1.0, 0.0]], [1.0, 0.0])
    agents = (builtin_agent("paper_node_1"), builtin_agent("paper_node_2"))
    leader = builtin_field("paper_leader")
    costs = (
        CostSpec(Q=np.eye(2), R_self=[[8.5]], R_neighbors={1: [[0.1]]}),
        CostSpec(Q=np.eye(2), R_self=[[8.5]], R_neighbors={0: [[0.1]]}),
    )
    critics = (default_critic(2), default_critic(2))
    probing = ProbingSpec(
        amplitudes=(0.1, 0.08),
        frequencies=(1.3, 4.1),
        phases=(0.0, 1.1),
        cutoff_time=3.0,
    )
    gains = (
        LearnerGains(a=0.1, probing=probing, gamma=70.0),
        LearnerGains(a=0.1, probing=probing, gamma=70.0),
    )
    return Scenario(
        name="two-node-loop",
        graph=graph,
        agents=agents,
        leader=leader,
        costs=costs,
        critics=critics,
        gains=gains,
        step=1e-3,
        t_final=6.0,
        initial_states=np.array([[0.4, -0.3], [-0.3, 0.4]]),
        initial_leader_state=np.array([0.2, -0.2]),
        seed=0,
        mode="online",
        cuub_bound=0.5,
        state_box=(np.array([-1.5, -1.5]), np.array([1.5, 1.5])),
    )


def builtin_scenarios() -> dict:
    return {"paper-benchmark": paper_benchmark, "two-node-loop": two_node_loop}


# ---------------------------------------------------------------------------
# Config parsing
# ---------------------------------------------------------------------------

def _require(mapping, key, path):
    if not isinstance(mapping, dict) or key not in mapping:
        raise ScenarioError(f"{path}: missing required field '{key}'")
    return mapping[key]


def _as_matrix(raw, path):
    arr = np.asarray(raw, dtype=float)
    if arr.ndim == 0:
        arr = arr.reshape(1, 1)
    if arr.ndim != 2:
        raise ScenarioError(f"{path}: expected a matrix")
    return arr


def _field_from_config(raw, path) -> VectorFieldSpec:
    if isinstance(raw, dict) and "builtin" in raw:
        try:
            return builtin_field(str(raw["builtin"]))
        except DynamicsError as exc:
            raise ScenarioError(f"{path}: {exc}") from None
    if not isinstance(raw, dict):
        raise ScenarioError(f"{path}: expected a mapping with 'builtin' or 'components'")
    state_dim = int(_require(raw, "state_dim", path))
    components = _require(raw, "components", path)
    try:
        parsed = tuple(
            tuple((float(term[0]), tuple(int(e) for e in term[1])) for term in comp)
            for comp in components
        )
        return VectorFieldSpec(state_dim, parsed)
    except (TypeError, IndexError, ValueError, DynamicsError) as exc:
        raise ScenarioError(f"{path}.components: {exc}") from None


def _agent_from_config(raw, path) -> AgentModel:
    if isinstance(raw, dict) and "builtin" in raw:
        try:
            return builtin_agent(str(raw["builtin"]))
        except DynamicsError as exc:
            raise ScenarioError(f"{path}: {exc}") from None
    drift = _field_from_config(_require(raw, "drift", path), f"{path}.drift")
    columns_raw = _require(raw, "input_columns", path)
    columns = tuple(
        _field_from_config(col, f"{path}.input_columns[{k}]") for k, col in enumerate(columns_raw)
    )
    bound = float(_require(raw, "g_norm_bound", path))
    try:
        return AgentModel(drift, columns, bound)
    except DynamicsError as exc:
        raise ScenarioError(f"{path}: {exc}") from None


def scenario_from_config(cfg: dict, *, source: str = "<config>") -> Scenario:
    """Build and validate a scenario from a parsed config mapping.

    Agent and neighbor indices in the config are 1-based; edges are
    ``[from, to, weight]`` triples.
    """
    if not isinstance(cfg, dict):
        raise ScenarioError(f"{source}: top level must be a mapping")
    try:
        graph_cfg = _require(cfg, "graph", source)
        pinning = np.asarray(_require(graph_cfg, "pinning", f"{source}.graph"), dtype=float)
        n_agents = pinning.size
        adjacency = np.zeros((n_agents, n_agents))
        for k, edge in enumerate(_require(graph_cfg, "edges", f"{source}.graph")):
            if len(edge) != 3:
                raise ScenarioError(
                    f"{source}.graph.edges[{k}]: expected [from, to, weight]"
                )
            src, dst, w = int(edge[0]), int(edge[1]), float(edge[2])
            if not (1 <= src <= n_agents and 1 <= dst <= n_agents):
                raise ScenarioError(
                    f"{source}.graph.edges[{k}]: node index out of range 1..{n_agents}"
                )
            adjacency[dst - 1, src - 1] = w
        graph = DiGraph(adjacency, pinning)

        agents = tuple(
            _agent_from_config(raw, f"{source}.agents[{k}]")
            for k, raw in enumerate(_require(cfg, "agents", source))
        )
        leader = _field_from_config(_require(cfg, "leader", source), f"{source}.leader")

        costs = []
        for k, raw in enumerate(_require(cfg, "costs", source)):
            path = f"{source}.costs[{k}]"
            neighbors = {}
            for j, R in (raw.get("R_neighbors") or {}).items():
                neighbors[int(j) - 1] = _as_matrix(R, f"{path}.R_neighbors[{j}]")
            costs.append(
                CostSpec(
                    Q=_as_matrix(_require(raw, "Q", path), f"{path}.Q"),
                    R_self=_as_matrix(_require(raw, "R_self", path), f"{path}.R_self"),
                    R_neighbors=neighbors,
                )
            )

        critics = []
        for k, raw in enumerate(_require(cfg, "critics", source)):
            path = f"{source}.critics[{k}]"
            translations = tuple(tuple(row) for row in _require(raw, "translations", path))
            critics.append(
                GfhmCritic(
                    translations,
                    phi=raw.get("phi"),
                    weights=raw.get("initial_weights"),
                )
            )

        gains = []
        for k, raw in enumerate(_require(cfg, "gains", source)):
            path = f"{source}.gains[{k}]"
            probing_raw = raw.get("probing") or {}
            terms = probing_raw.get("terms")
            if terms is not None:
                amps = tuple(float(t[0]) for t in terms)
                freqs = tuple(float(t[1]) for t in terms)
                phases = tuple(float(t[2]) if len(t) > 2 else 0.0 for t in terms)
            else:
                amps = tuple(probing_raw.get("amplitudes") or ())
                freqs = tuple(probing_raw.get("frequencies") or ())
                phases = tuple(probing_raw.get("phases")) if probing_raw.get("phases") else None
            probing = ProbingSpec(
                amplitudes=amps,
                frequencies=freqs,
                phases=phases,
                cutoff_time=float(probing_raw.get("cutoff", 10.0)),
            )
            gains.append(
                LearnerGains(
                    a=float(_require(raw, "a", path)),
                    probing=probing,
                    gamma=float(raw.get("gamma", 0.0)),
                )
            )

        integration = _require(cfg, "integration", source)
        initial = _require(cfg, "initial_states", source)
        box = cfg.get("state_box")
        if box is not None:
            box = (np.asarray(box[0], dtype=float), np.asarray(box[1], dtype=float))
        pi_raw = cfg.get("pi") or {}
        pi = PolicyIterationSettings(
            eval_horizon=float(pi_raw.get("eval_horizon", 5.0)),
            sample_stride=int(pi_raw.get("sample_stride", 5)),
            tolerance=float(pi_raw.get("tolerance", 1e-4)),
            max_iterations=int(pi_raw.get("max_iterations", 50)),
            probe_points=int(pi_raw.get("probe_points", 8)),
        )
        return Scenario(
            name=str(cfg.get("name", "scenario")),
            graph=graph,
            agents=agents,
            leader=leader,
            costs=tuple(costs),
            critics=tuple(critics),
            gains=tuple(gains),
            step=float(_require(integration, "step", f"{source}.integration")),
            t_final=float(_require(integration, "t_final", f"{source}.integration")),
            initial_states=np.asarray(_require(initial, "agents", f"{source}.initial_states"), dtype=float),
            initial_leader_state=np.asarray(_require(initial, "leader", f"{source}.initial_states"), dtype=float),
            seed=int(cfg.get("seed", 0)),
            mode=str(cfg.get("mode", "online")),
            cuub_bound=float(cfg.get("cuub_bound", 0.5)),
            state_box=box,
            pi=pi,
        )
    except _VALIDATION_ERRORS as exc:
        raise ScenarioError(f"{source}: {exc}") from exc


def _field_to_config(spec: VectorFieldSpec) -> dict:
    return {
        "state_dim": spec.state_dim,
        "components": [
            [[coeff, list(expo)] for coeff, expo in comp] for comp in spec.components
        ],
    }


def scenario_to_config(s: Scenario) -> dict:
    """Declarative mirror of a scenario; reloading reproduces the same run."""
    edges = []
    for i in range(s.n_agents):
        for j in np.flatnonzero(s.graph.adjacency[i] > 0):
            edges.append([int(j) + 1, i + 1, float(s.graph.adjacency[i, j])])
    cfg = {
        "name": s.name,
        "seed": s.seed,
        "mode": s.mode,
        "graph": {"edges": edges, "pinning": s.graph.pinning.tolist()},
        "agents": [
            {
                "drift": _field_to_config(a.drift),
                "input_columns": [_field_to_config(col) for col in a.input_columns],
                "g_norm_bound": a.g_norm_bound,
            }
            for a in s.agents
        ],
        "leader": _field_to_config(s.leader),
        "costs": [
            {
                "Q": c.Q.tolist(),
                "R_self": c.R_self.tolist(),
                "R_neighbors": {int(j) + 1: R.tolist() for j, R in c.R_neighbors.items()},
            }
            for c in s.costs
        ],
        "critics": [
            {
                "translations": [list(row) for row in c.translations],
                "phi": c.phi.tolist(),
                "initial_weights": c.weights.tolist(),
            }
            for c in s.critics
        ],
        "gains": [
            {
                "a": gm.a,
                "gamma": gm.gamma,
                "probing": {
                    "terms": [
                        [a, f, p]
                        for a, f, p in zip(
                            gm.probing.amplitudes, gm.probing.frequencies, gm.probing.phases
                        )
                    ],
                    "cutoff": gm.probing.cutoff_time,
                },
            }
            for gm in s.gains
        ],
        "integration": {"step": s.step, "t_final": s.t_final},
        "initial_states": {
            "agents": s.initial_states.tolist(),
            "leader": s.initial_leader_state.tolist(),
        },
        "cuub_bound": s.cuub_bound,
        "pi": {
            "eval_horizon": s.pi.eval_horizon,
            "sample_stride": s.pi.sample_stride,
            "tolerance": s.pi.tolerance,
            "max_iterations": s.pi.max_iterations,
            "probe_points": s.pi.probe_points,
        },
    }
    if s.state_box is not None:
        cfg["state_box"] = [s.state_box[0].tolist(), s.state_box[1].tolist()]
    return cfg


def load_scenario(source) -> Scenario:
    """Load a scenario by builtin name or from a YAML file path."""
    name = str(source)
    factory = builtin_scenarios().get(name)
    if factory is not None:
        return factory()
    path = Path(name)
    if not path.exists():
        raise ScenarioError(
            f"'{name}' is neither a builtin scenario ({', '.join(sorted(builtin_scenarios()))}) "
            "nor an existing file"
        )
    try:
        with open(path, "r", encoding="utf-8") as fh:
            cfg = yaml.safe_load(fh)
    except yaml.YAMLError as exc:
        raise ScenarioError(f"{path}: cannot parse config: {exc}") from None
    return scenario_from_config(cfg, source=str(path))


# ---------------------------------------------------------------------------
# Command line
# ---------------------------------------------------------------------------

class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(1)


def _apply_overrides(scenario: Scenario, args) -> Scenario:
    updates = {}
    if args.dt is not None:
        updates["step"] = float(args.dt)
    if args.t_final is not None:
        updates["t_final"] = float(args.t_final)
    if args.seed is not None:
        updates["seed"] = int(args.seed)
    if args.pe_off_time is not None:
        updates["gains"] = tuple(
            dataclasses.replace(
                gm, probing=dataclasses.replace(gm.probing, cutoff_time=float(args.pe_off_time))
            )
            for gm in scenario.gains
        )
    if updates:
        scenario = dataclasses.replace(scenario, **updates)
    return scenario


def _out_dir(args, scenario: Scenario) -> Path:
    if args.out:
        out = Path(args.out)
    else:
        stamp = time.strftime("%Y%m%d-%H%M%S")
        out = Path(f"{scenario.name}-{stamp}")
    out.mkdir(parents=True, exist_ok=True)
    return out


def _add_common(parser):
    parser.add_argument("--scenario", default="paper-benchmark", help="builtin name or config file path")
    parser.add_argument("--out", default=None, help="output directory")
    parser.add_argument("--dt", type=float, default=None, help="integration step override (s)")
    parser.add_argument("--t-final", type=float, default=None, help="final time override (s)")
    parser.add_argument("--seed", type=int, default=None, help="seed override")
    parser.add_argument("--pe-off-time", type=float, default=None, help="probing cutoff override (s)")


def _cmd_run(args) -> int:
    scenario = _apply_overrides(load_scenario(args.scenario), args)
    log, summary = run_online(scenario)
    out = _out_dir(args, scenario)
    write_trajectory_csv(log, out / "trajectory.csv")
    write_summary(summary, out / "summary.txt")
    for line in summary.to_lines():
        print(line)
    print(f"wrote {out / 'trajectory.csv'} and {out / 'summary.txt'}")
    return 0


def _cmd_pi(args) -> int:
    scenario = _apply_overrides(load_scenario(args.scenario), args)
    result = run_policy_iteration(scenario)
    out = _out_dir(args, scenario)
    with open(out / "pi_weights.csv", "w", encoding="utf-8") as fh:
        n_agents = scenario.n_agents
        header = ["iteration"]
        for i in range(n_agents):
            header.extend(
                f"th{i + 1}_{k + 1}" for k in range(scenario.critics[i].gen_dim)
            )
        fh.write(",".join(header) + "\n")
        for k, weights in enumerate(result.weight_sequence):
            row = [str(k)] + [f"{v:.17g}" for w in weights for v in w]
            fh.write(",".join(row) + "\n")
    print(f"iterations = {result.iterations}")
    print(f"converged = {result.converged}")
    for i, w in enumerate(result.final_weights):
        print(f"agent{i + 1}.weights = " + " ".join(f"{v:.10g}" for v in w))
    print(f"wrote {out / 'pi_weights.csv'}")
    return 0


def _cmd_verify(args) -> int:
    from .testkit import run_all_checks

    scenario = None
    if args.scenario != "paper-benchmark" or args.t_final is not None or args.pe_off_time is not None:
        scenario = _apply_overrides(load_scenario(args.scenario), args)
    reports = run_all_checks(
        scenario,
        seed=args.seed if args.seed is not None else 0,
        draws=args.draws,
        datasets=args.datasets,
        offsets=tuple(float(v) for v in args.offsets.split(",")),
    )
    for report in reports:
        print(report.line())
    return 0 if all(r.passed for r in reports) else 4


def _cmd_bounds(args) -> int:
    scenario = _apply_overrides(load_scenario(args.scenario), args)
    log = read_trajectory_csv(args.log)
    stats = collect_run_stats(scenario, log)
    status = 0
    for i in range(scenario.n_agents):
        report = gain_check(scenario.gains[i], scenario.costs[i], scenario.graph, i, stats[i])
        print(
            f"agent{i + 1}: gain_check={'pass' if report.passed else 'fail'} "
            f"a={report.a:g} gamma={report.gamma:g} gamma_threshold={report.gamma_threshold:.4g}"
        )
        try:
            b = uub_bounds(stats[i], scenario.gains[i], scenario.costs[i])
            tail_sup = float(np.linalg.norm(log.errors[:, i, :], axis=1)[log.t >= 0.75 * log.t[-1]].max())
            print(
                f"agent{i + 1}: weight_bound={b.weight_bound:.6g} error_bound={b.error_bound:.6g} "
                f"observed_tail_error={tail_sup:.6g}"
            )
        except GainConditionError as exc:
            print(f"agent{i + 1}: {exc}")
    return status


def _cmd_list(_args) -> int:
    for name in sorted(builtin_scenarios()):
        print(name)
    return 0


def main(argv=None) -> int:
    parser = _Parser(prog="graphgames", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="integrate the online learning loop")
    _add_common(p_run)
    p_run.set_defaults(func=_cmd_run)

    p_pi = sub.add_parser("pi", help="run offline policy iteration")
    _add_common(p_pi)
    p_pi.set_defaults(func=_cmd_pi)

    p_verify = sub.add_parser("verify", help="run the verification suite")
    _add_common(p_verify)
    p_verify.add_argument("--draws", type=int, default=100, help="random identity draws")
    p_verify.add_argument("--datasets", type=int, default=20, help="random flow datasets")
    p_verify.add_argument("--offsets", default="-0.1,-0.05,0.05,0.1", help="comma-separated control offsets")
    p_verify.set_defaults(func=_cmd_verify)

    p_bounds = sub.add_parser("bounds", help="recompute gain checks and ultimate bounds from a log")
    _add_common(p_bounds)
    p_bounds.add_argument("--log", required=True, help="trajectory file written by 'run'")
    p_bounds.set_defaults(func=_cmd_bounds)

    p_list = sub.add_parser("list-scenarios", help="print builtin scenario names")
    p_list.set_defaults(func=_cmd_list)

    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ScenarioError, *_VALIDATION_ERRORS) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (NumericalBlowupError, AdmissibilityError, ExcitationError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3


def entrypoint() -> None:
    sys.exit(main())


if __name__ == "__main__":
    entrypoint()
