"""Directed communication topology with leader pinning.

The adjacency convention is receiver-major: ``adjacency[i, j] > 0`` means
agent ``i`` receives the state of agent ``j``.  The leader is not a node of
the adjacency matrix; its one-way links into the network are the per-agent
pinning gains ``pinning[i]``.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

__all__ = [
    "GraphValidationError",
    "DiGraph",
    "laplacian",
    "coupling_matrix",
    "coupling_row",
    "is_strongly_connected",
    "ring_topology",
]


class GraphValidationError(ValueError):
    """Adjacency or pinning data violates the topology contract."""


@dataclass(frozen=True, eq=False)
class DiGraph:
    """Weighted digraph over ``N`` agents plus leader pinning gains.

    Invariants enforced at construction: nonnegative edge weights, zero
    diagonal (no self loops), nonnegative pinning gains.  Instances are
    immutable after construction and safe for concurrent reads.
    """

    adjacency: np.ndarray
    pinning: np.ndarray

    def __post_init__(self) -> None:
        adj = np.array(self.adjacency, dtype=float)
        pin = np.array(self.pinning, dtype=float).reshape(-1)
        if adj.ndim != 2 or adj.shape[0] != adj.shape[1] or adj.shape[0] < 1:
            raise GraphValidationError("adjacency must be a nonempty square matrix")
        if pin.shape[0] != adj.shape[0]:
            raise GraphValidationError(
                f"pinning vector has length {pin.shape[0]}, expected {adj.shape[0]}"
            )
        if not np.all(np.isfinite(adj)) or not np.all(np.isfinite(pin)):
            raise GraphValidationError("edge weights and pinning gains must be finite")
        if np.any(adj < 0):
            raise GraphValidationError("edge weights must be nonnegative")
        if np.any(np.diag(adj) != 0):
            raise GraphValidationError("self loops are not allowed")
        if np.any(pin < 0):
            raise GraphValidationError("pinning gains must be nonnegative")
        adj.setflags(write=False)
        pin.setflags(write=False)
        object.__setattr__(self, "adjacency", adj)
        object.__setattr__(self, "pinning", pin)

    @property
    def n_agents(self) -> int:
        return self.adjacency.shape[0]

    def neighbors(self, i: int) -> np.ndarray:
        """Indices of the agents whose state agent ``i`` receives."""
        self.check_index(i)
        return np.flatnonzero(self.adjacency[i] > 0)

    def in_degrees(self) -> np.ndarray:
        return self.adjacency.sum(axis=1)

    def has_pinned_agent(self) -> bool:
        return bool(np.any(self.pinning > 0))

    def check_index(self, i: int) -> None:
        if not 0 <= i < self.n_agents:
            raise IndexError(f"agent index {i} out of range for {self.n_agents} agents")


def laplacian(g: DiGraph) -> np.ndarray:
    """In-degree matrix minus adjacency; every row sums to zero."""
    return np.diag(g.in_degrees()) - g.adjacency


def coupling_matrix(g: DiGraph) -> np.ndarray:
    """Laplacian plus the diagonal pinning matrix."""
    return laplacian(g) + np.diag(g.pinning)


def coupling_row(g: DiGraph, i: int) -> np.ndarray:
    """Row ``i`` of the coupling matrix.

    Entry ``j`` is nonzero only for ``j == i`` or ``j`` a neighbor of ``i``,
    and the row differs from the Laplacian row only in component ``i``.
    """
    g.check_index(i)
    row = laplacian(g)[i].copy()
    row[i] += g.pinning[i]
    return row


def is_strongly_connected(g: DiGraph) -> bool:
    """True iff a directed path exists between every ordered node pair.

    Pinning links are ignored; only the agent-to-agent edges count.
    """
    n = g.n_agents
    if n == 1:
        return True
    has_edge = g.adjacency > 0

    def _reaches_all(successors_of) -> bool:
        seen = np.zeros(n, dtype=bool)
        seen[0] = True
        stack = [0]
        while stack:
            u = stack.pop()
            for v in np.flatnonzero(successors_of(u)):
                if not seen[v]:
                    seen[v] = True
                    stack.append(int(v))
        return bool(seen.all())

    # Edge j -> i exists when adjacency[i, j] > 0: successors of u sit in column u.
    forward = _reaches_all(lambda u: has_edge[:, u])
    backward = _reaches_all(lambda u: has_edge[u, :])
    return forward and backward


def ring_topology(
    n_agents: int,
    *,
    weight: float = 1.0,
    pinned_agent: int | None = None,
    pinning_gain: float = 1.0,
) -> DiGraph:
    """Directed ring in which agent ``i`` hears agent ``i - 1`` (mod ``n``)."""
    adjacency = np.zeros((n_agents, n_agents))
    for i in range(n_agents):
        adjacency[i, (i - 1) % n_agents] = weight
    pinning = np.zeros(n_agents)
    if pinned_agent is not None:
        pinning[pinned_agent] = pinning_gain
    return DiGraph(adjacency, pinning)
