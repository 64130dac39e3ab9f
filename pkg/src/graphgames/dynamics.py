"""Agent and leader vector fields plus neighborhood consensus errors.

Vector fields are polynomial term lists, which keeps scenario files fully
declarative; the bundled five-node benchmark family is registered under
``paper_node_1`` .. ``paper_node_5`` and ``paper_leader``.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .graph import DiGraph, coupling_matrix, coupling_row

__all__ = [
    "DynamicsError",
    "VectorFieldSpec",
    "AgentModel",
    "builtin_field",
    "builtin_agent",
    "builtin_names",
    "consensus_error",
    "consensus_errors",
    "global_error",
    "error_rate",
    "sample_input_norm",
]


class DynamicsError(ValueError):
    """Inconsistent vector-field or consensus-error inputs."""


@dataclass(frozen=True, eq=False)
class VectorFieldSpec:
    """Polynomial vector field given as per-component term lists.

    ``components[c]`` is a sequence of ``(coefficient, exponents)`` pairs,
    with one integer exponent per state component; component ``c`` of the
    output is the sum of ``coefficient * prod(x ** exponents)`` over its
    terms.  Evaluation broadcasts over leading axes, so a single spec
    evaluates a whole stack of states in one call.
    """

    state_dim: int
    components: tuple
    name: str | None = None

    def __post_init__(self) -> None:
        if self.state_dim < 1:
            raise DynamicsError("state dimension must be positive")
        normalized = []
        coeff_arrays = []
        expo_arrays = []
        for terms in self.components:
            clean = []
            for coeff, exponents in terms:
                exponents = tuple(int(e) for e in exponents)
                if len(exponents) != self.state_dim:
                    raise DynamicsError(
                        f"exponent tuple {exponents} does not match state dimension {self.state_dim}"
                    )
                if any(e < 0 for e in exponents):
                    raise DynamicsError("exponents must be nonnegative integers")
                coeff = float(coeff)
                if not np.isfinite(coeff):
                    raise DynamicsError("term coefficients must be finite")
                clean.append((coeff, exponents))
            normalized.append(tuple(clean))
            coeff_arrays.append(np.array([c for c, _ in clean], dtype=float))
            expo_arrays.append(np.array([e for _, e in clean], dtype=np.int64).reshape(len(clean), self.state_dim))
        object.__setattr__(self, "components", tuple(normalized))
        object.__setattr__(self, "_coeffs", tuple(coeff_arrays))
        object.__setattr__(self, "_expos", tuple(expo_arrays))

    @property
    def output_dim(self) -> int:
        return len(self.components)

    def __call__(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        if x.shape[-1:] != (self.state_dim,):
            raise DynamicsError(
                f"state has dimension {x.shape[-1] if x.ndim else 0}, expected {self.state_dim}"
            )
        out = np.zeros(x.shape[:-1] + (self.output_dim,))
        for c, (coeffs, expos) in enumerate(zip(self._coeffs, self._expos)):
            if coeffs.size == 0:
                continue
            out[..., c] = (x[..., None, :] ** expos).prod(axis=-1) @ coeffs
        return out

    def vanishes_at_origin(self) -> bool:
        return bool(np.all(self(np.zeros(self.state_dim)) == 0.0))


@dataclass(frozen=True, eq=False)
class AgentModel:
    """Per-agent drift field and input map with a declared input-map bound.

    ``input_columns[k]`` maps the state to column ``k`` of the input matrix,
    so the control enters as ``input_matrix(x) @ u``.  ``g_norm_bound`` is
    the declared bound on the spectral norm of the input matrix over the
    operating region; it is spot-checked by sampling at scenario load.
    """

    drift: VectorFieldSpec
    input_columns: tuple
    g_norm_bound: float

    def __post_init__(self) -> None:
        n = self.drift.state_dim
        if self.drift.output_dim != n:
            raise DynamicsError("drift must map the state space to itself")
        if not self.drift.vanishes_at_origin():
            raise DynamicsError("drift must vanish at the origin")
        columns = tuple(self.input_columns)
        if not columns:
            raise DynamicsError("agent needs at least one input column")
        for col in columns:
            if col.state_dim != n or col.output_dim != n:
                raise DynamicsError("input columns must map the state space to itself")
        bound = float(self.g_norm_bound)
        if not np.isfinite(bound) or bound <= 0:
            raise DynamicsError("input-map norm bound must be a positive number")
        object.__setattr__(self, "input_columns", columns)
        object.__setattr__(self, "g_norm_bound", bound)

    @property
    def state_dim(self) -> int:
        return self.drift.state_dim

    @property
    def input_dim(self) -> int:
        return len(self.input_columns)

    def input_matrix(self, x) -> np.ndarray:
        """Input matrix ``g(x)``, shape ``(..., n, m)``."""
        return np.stack([col(x) for col in self.input_columns], axis=-1)


# Shared benchmark drift: dx1 = x2 - x1^2 x2, dx2 = -(x1 + x2)(1 - x1)^2.
_BENCHMARK_DRIFT = VectorFieldSpec(
    2,
    (
        ((1.0, (0, 1)), (-1.0, (2, 1))),
        (
            (-1.0, (1, 0)),
            (2.0, (2, 0)),
            (-1.0, (3, 0)),
            (-1.0, (0, 1)),
            (2.0, (1, 1)),
            (-1.0, (2, 1)),
        ),
    ),
    name="benchmark_drift",
)

# Per-node input coefficients of the five-node benchmark: u enters the second
# state component scaled by c * x2^2.
BUILTIN_INPUT_GAINS = (1.0, 1.5, -0.2, 0.3, -0.9)

_BUILTIN_FIELDS = {"paper_leader": _BENCHMARK_DRIFT}
for _k in range(1, 6):
    _BUILTIN_FIELDS[f"paper_node_{_k}"] = _BENCHMARK_DRIFT


def builtin_names() -> tuple:
    return tuple(sorted(_BUILTIN_FIELDS))


def builtin_field(name: str) -> VectorFieldSpec:
    """Drift field registered under ``name``."""
    try:
        return _BUILTIN_FIELDS[name]
    except KeyError:
        raise DynamicsError(f"unknown builtin vector field '{name}'") from None


def builtin_agent(name: str) -> AgentModel:
    """Full agent model (drift, input map, norm bound) for a builtin node."""
    if not name.startswith("paper_node_"):
        raise DynamicsError(f"unknown builtin agent '{name}'")
    try:
        k = int(name.rsplit("_", 1)[1])
        gain = BUILTIN_INPUT_GAINS[k - 1]
    except (ValueError, IndexError):
        raise DynamicsError(f"unknown builtin agent '{name}'") from None
    column = VectorFieldSpec(2, ((), ((gain, (0, 2)),)), name=f"{name}_input")
    # |g(x)| = |gain| * x2^2 <= 2.25 |gain| on the default [-1.5, 1.5] box.
    return AgentModel(_BENCHMARK_DRIFT, (column,), g_norm_bound=2.3 * abs(gain))


def _states_array(g: DiGraph, states, leader_state):
    x0 = np.asarray(leader_state, dtype=float).reshape(-1)
    X = np.asarray(states, dtype=float)
    if X.ndim != 2 or X.shape[0] != g.n_agents:
        raise DynamicsError(f"expected {g.n_agents} agent states, got array of shape {X.shape}")
    if X.shape[1] != x0.shape[0]:
        raise DynamicsError(
            f"agent states have dimension {X.shape[1]} but the leader state has {x0.shape[0]}"
        )
    return X, x0


def consensus_error(g: DiGraph, i: int, states, leader_state) -> np.ndarray:
    """Weighted disagreement of agent ``i`` with its neighbors and the leader.

    ``sum_j a_ij (x_i - x_j) + b_i (x_i - x_0)`` over the in-neighbors of
    ``i``; zero exactly when agent ``i`` agrees with everything it hears.
    """
    X, x0 = _states_array(g, states, leader_state)
    g.check_index(i)
    e = g.pinning[i] * (X[i] - x0)
    for j in g.neighbors(i):
        e = e + g.adjacency[i, j] * (X[i] - X[j])
    return e


def consensus_errors(g: DiGraph, states, leader_state) -> np.ndarray:
    """All local consensus errors at once, shape ``(N, n)``."""
    X, x0 = _states_array(g, states, leader_state)
    return coupling_matrix(g) @ (X - x0)


def global_error(g: DiGraph, states, leader_state) -> np.ndarray:
    """Stacked network error ``((L + B) kron I_n) (x - x0_rep)``, length ``N * n``."""
    X, x0 = _states_array(g, states, leader_state)
    n = x0.shape[0]
    big = np.kron(coupling_matrix(g), np.eye(n))
    return big @ (X.reshape(-1) - np.tile(x0, g.n_agents))


def error_rate(g: DiGraph, agents, leader: VectorFieldSpec, i: int, states, leader_state, controls) -> np.ndarray:
    """Time derivative of agent ``i``'s consensus error.

    Sums ``(l_ij + b_ij) (f_j(x_j) - f0(x_0) + g_j(x_j) u_j)`` over agent
    ``i`` and its neighbors only; controls of other agents are not needed.
    ``controls`` is a length-``N`` sequence whose entries may be ``None``
    for agents outside that set.
    """
    X, x0 = _states_array(g, states, leader_state)
    g.check_index(i)
    row = coupling_row(g, i)
    f0 = leader(x0)
    rate = np.zeros_like(x0)
    for j in (i, *g.neighbors(i)):
        u_j = controls[j]
        if u_j is None:
            raise DynamicsError(f"missing control for agent {j} (needed by agent {i})")
        u_j = np.atleast_1d(np.asarray(u_j, dtype=float))
        if u_j.shape != (agents[j].input_dim,):
            raise DynamicsError(
                f"control for agent {j} has shape {u_j.shape}, expected ({agents[j].input_dim},)"
            )
        drift_gap = agents[j].drift(X[j]) - f0
        rate = rate + row[j] * (drift_gap + agents[j].input_matrix(X[j]) @ u_j)
    return rate


def sample_input_norm(agent: AgentModel, lower, upper, rng: np.random.Generator, samples: int = 256) -> float:
    """Largest spectral norm of the input matrix over sampled box states."""
    lower = np.asarray(lower, dtype=float)
    upper = np.asarray(upper, dtype=float)
    points = rng.uniform(lower, upper, size=(samples, agent.state_dim))
    worst = 0.0
    for x in points:
        worst = max(worst, float(np.linalg.norm(agent.input_matrix(x), ord=2)))
    return worst
