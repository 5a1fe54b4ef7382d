"""B-spline distribution of per-agent torque coefficients along the rod."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from softgm.errors import ConfigError, InputError

__all__ = [
    "ActuationParams",
    "SplineBasis",
    "clamped_uniform_knots",
    "find_span",
    "basis_functions",
    "build_spline_basis",
    "clip_actions",
    "actions_to_torque_field",
    "agent_node_indices",
]


@dataclass(frozen=True)
class ActuationParams:
    n_agents: int = 6
    torque_max: tuple = (15.0, 15.0)
    spline_degree: int = 2

    def __post_init__(self):
        tm = tuple(float(t) for t in self.torque_max)
        if len(tm) != 2 or not all(math.isfinite(t) and t > 0 for t in tm):
            raise ConfigError(f"torque_max must be two positive numbers, got {self.torque_max}")
        object.__setattr__(self, "torque_max", tm)
        if self.n_agents < 2:
            raise ConfigError("n_agents must be >= 2")
        if self.spline_degree < 0:
            raise ConfigError("spline_degree must be >= 0")


@dataclass(frozen=True)
class SplineBasis:
    # rows: agents, columns: element midpoints
    basis_matrix: np.ndarray
    degree: int
    knots: np.ndarray

    @property
    def n_agents(self) -> int:
        return self.basis_matrix.shape[0]

    @property
    def n_elements(self) -> int:
        return self.basis_matrix.shape[1]


def clamped_uniform_knots(n_ctrl: int, degree: int) -> np.ndarray:
    n_inner = n_ctrl - degree - 1
    inner = np.arange(1, n_inner + 1) / (n_inner + 1)
    return np.concatenate([np.zeros(degree + 1), inner, np.ones(degree + 1)])


def find_span(u: float, degree: int, knots: np.ndarray) -> int:
    """Index ``i`` with ``knots[i] <= u < knots[i+1]`` (last non-empty span at the right end)."""
    n = len(knots) - degree - 2
    if u >= knots[n + 1]:
        return n
    if u <= knots[degree]:
        return degree
    lo, hi = degree, n + 1
    mid = (lo + hi) // 2
    while u < knots[mid] or u >= knots[mid + 1]:
        if u < knots[mid]:
            hi = mid
        else:
            lo = mid
        mid = (lo + hi) // 2
    return mid


def basis_functions(span: int, u: float, degree: int, knots: np.ndarray) -> np.ndarray:
    """The ``degree + 1`` non-zero basis values at ``u`` (triangular De Boor scheme)."""
    N = np.zeros(degree + 1)
    left = np.zeros(degree + 1)
    right = np.zeros(degree + 1)
    N[0] = 1.0
    for j in range(1, degree + 1):
        left[j] = u - knots[span + 1 - j]
        right[j] = knots[span + j] - u
        saved = 0.0
        for r in range(j):
            temp = N[r] / (right[r + 1] + left[j - r])
            N[r] = saved + right[r + 1] * temp
            saved = left[j - r] * temp
        N[j] = saved
    return N


def evaluate_basis(n_agents: int, degree: int, s) -> np.ndarray:
    """Dense ``n_agents x len(s)`` matrix of basis values at arc-length points ``s``."""
    if n_agents < degree + 1:
        raise ConfigError(f"need n_agents >= degree + 1 ({n_agents} < {degree + 1})")
    knots = clamped_uniform_knots(n_agents, degree)
    s = np.atleast_1d(np.asarray(s, dtype=float))
    out = np.zeros((n_agents, len(s)))
    for col, u in enumerate(s):
        span = find_span(u, degree, knots)
        out[span - degree: span + 1, col] = basis_functions(span, u, degree, knots)
    return out


def build_spline_basis(n_agents: int, n_elements: int, degree: int) -> SplineBasis:
    if n_elements < 1:
        raise ConfigError("n_elements must be positive")
    midpoints = (np.arange(n_elements) + 0.5) / n_elements
    matrix = evaluate_basis(n_agents, degree, midpoints)
    matrix.setflags(write=False)
    return SplineBasis(matrix, degree, clamped_uniform_knots(n_agents, degree))


def clip_actions(actions) -> tuple[np.ndarray, int]:
    a = np.asarray(actions, dtype=float)
    if np.isnan(a).any():
        raise InputError("actions contain NaN")
    clipped = np.clip(a, -1.0, 1.0)
    return clipped, int(np.count_nonzero(clipped != a))


def applied_torques(actions, params: ActuationParams) -> np.ndarray:
    """Per-agent physical torque vectors ``tau_max * a`` (N x 2)."""
    return np.asarray(actions, dtype=float) * np.asarray(params.torque_max)


def actions_to_torque_field(actions, basis: SplineBasis, params: ActuationParams) -> np.ndarray:
    """Couple density about (d1, d2, d3) at every element; twist is never actuated."""
    a, _ = clip_actions(actions)
    if a.shape != (basis.n_agents, 2):
        raise InputError(f"actions must have shape ({basis.n_agents}, 2), got {a.shape}")
    alpha = applied_torques(a, params)
    field = np.zeros((basis.n_elements, 3))
    field[:, :2] = basis.basis_matrix.T @ alpha
    return field


def agent_node_indices(n_agents: int, n_elements: int) -> np.ndarray:
    """Rod node supplying each agent's position/velocity (evenly spread, base to tip)."""
    idx = np.floor(np.arange(n_agents) * n_elements / (n_agents - 1) + 0.5).astype(int)
    return np.clip(idx, 0, n_elements)
