"""Tanh-basis value approximator over translated consensus-error inputs.

Each error component ``e_z`` contributes one basis input per configured
translation ``d_zj``; the value estimate is linear in the weight vector,
``V(e) = w @ tanh(phi * (e_z - d_zj))``, which keeps the model linear in
the parameters when the basis scalings are held fixed.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

__all__ = [
    "CriticValidationError",
    "GfhmCritic",
    "default_critic",
    "generalized_inputs",
    "value",
    "gradient_matrix",
    "value_gradient",
]


class CriticValidationError(ValueError):
    """Critic structure violates its contract."""


@dataclass(frozen=True, eq=False)
class GfhmCritic:
    """Immutable critic snapshot: translations, basis scalings and weights.

    ``translations[z]`` lists the input offsets applied to error component
    ``z``; the basis dimension is the total number of (component, offset)
    pairs, ordered lexicographically.  ``phi`` must be positive and is held
    fixed; only the weights adapt.  The constant output offset is fixed at
    zero so the value estimate vanishes at zero error (with zero offsets).
    """

    translations: tuple
    phi: np.ndarray | None = None
    weights: np.ndarray | None = None
    zeta: float = 0.0

    def __post_init__(self) -> None:
        rows = tuple(tuple(float(d) for d in row) for row in self.translations)
        if not rows or any(len(row) == 0 for row in rows):
            raise CriticValidationError("each error component needs at least one translation")
        comp_index = np.repeat(np.arange(len(rows)), [len(row) for row in rows])
        offsets = np.concatenate([np.asarray(row, dtype=float) for row in rows])
        m = offsets.size

        phi = np.ones(m) if self.phi is None else np.asarray(self.phi, dtype=float).reshape(-1)
        if phi.shape != (m,):
            raise CriticValidationError(f"phi has shape {phi.shape}, expected ({m},)")
        if not np.all(np.isfinite(phi)) or np.any(phi <= 0):
            raise CriticValidationError("basis scalings must be positive")

        weights = np.zeros(m) if self.weights is None else np.asarray(self.weights, dtype=float).reshape(-1)
        if weights.shape != (m,):
            raise CriticValidationError(f"weights have shape {weights.shape}, expected ({m},)")
        if not np.all(np.isfinite(weights)):
            raise CriticValidationError("weights must be finite")

        if float(self.zeta) != 0.0:
            raise CriticValidationError("the constant output offset is fixed at zero")

        for arr in (phi, weights, offsets, comp_index):
            arr.setflags(write=False)
        object.__setattr__(self, "translations", rows)
        object.__setattr__(self, "phi", phi)
        object.__setattr__(self, "weights", weights)
        object.__setattr__(self, "zeta", 0.0)
        object.__setattr__(self, "_offsets", offsets)
        object.__setattr__(self, "_comp_index", comp_index)

    @property
    def error_dim(self) -> int:
        return len(self.translations)

    @property
    def gen_dim(self) -> int:
        return self._offsets.size

    def with_weights(self, weights) -> "GfhmCritic":
        """Snapshot with the same structure and new weights."""
        return GfhmCritic(self.translations, self.phi, weights)


def default_critic(error_dim: int, weights=None, phi=None) -> GfhmCritic:
    """One zero-offset basis input per error component."""
    return GfhmCritic(((0.0,),) * error_dim, phi=phi, weights=weights)


def _check_error(c: GfhmCritic, e) -> np.ndarray:
    e = np.asarray(e, dtype=float).reshape(-1)
    if e.shape != (c.error_dim,):
        raise CriticValidationError(f"error has shape {e.shape}, expected ({c.error_dim},)")
    return e


def generalized_inputs(c: GfhmCritic, e) -> np.ndarray:
    """Translated inputs ``e_z - d_zj`` in fixed (component, offset) order."""
    e = _check_error(c, e)
    return e[c._comp_index] - c._offsets


def value(c: GfhmCritic, e) -> float:
    """Value estimate ``w @ tanh(phi * generalized_inputs)``."""
    return float(c.weights @ np.tanh(c.phi * generalized_inputs(c, e)))


def _basis_slopes(c: GfhmCritic, e) -> np.ndarray:
    s = np.tanh(c.phi * generalized_inputs(c, e))
    return c.phi * (1.0 - s * s)


def gradient_matrix(c: GfhmCritic, e) -> np.ndarray:
    """Basis Jacobian transpose, shape ``(error_dim, gen_dim)``.

    Entry ``(z, k)`` is ``phi_k * sech^2(phi_k * input_k)`` when basis input
    ``k`` is a translation of error component ``z``, else zero.
    """
    slopes = _basis_slopes(c, e)
    out = np.zeros((c.error_dim, c.gen_dim))
    out[c._comp_index, np.arange(c.gen_dim)] = slopes
    return out


def value_gradient(c: GfhmCritic, e) -> np.ndarray:
    """Gradient of the value estimate with respect to the error."""
    return np.bincount(c._comp_index, weights=_basis_slopes(c, e) * c.weights, minlength=c.error_dim)
