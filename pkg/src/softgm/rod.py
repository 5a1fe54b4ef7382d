"""Discrete Cosserat rod: elasticity, penalty contact and explicit integration.

Conventions follow the usual discrete Cosserat layout: ``n`` elements between
``n + 1`` nodes, one director frame per element stored as a matrix whose rows
are ``(d1, d2, d3)`` (so ``Q @ v_lab`` gives material coordinates), angular
velocities and couples expressed in the material frame.

The elastic energy is

    E = sum_e 1/2 l0 sigma_e^T S sigma_e + sum_v 1/2 l0 kappa_v^T B kappa_v

with ``sigma_e = Q_e (x_{e+1} - x_e) / l0 - e3`` and ``kappa_v l0`` the rotation
vector taking frame ``e`` to frame ``e + 1``.  Forces and couples are the exact
negative gradients of this energy (the bending couples use the SO(3) log-map
Jacobians), which makes the undamped integrator energy-conserving up to the
usual Verlet error.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from numba import njit

from softgm.errors import ConfigError

__all__ = [
    "RodParams",
    "RodState",
    "Cylinder",
    "ContactParams",
    "StepOutcome",
    "init_straight_rod",
    "compute_internal_forces",
    "compute_contact_forces",
    "step_dynamics",
    "advance",
    "mechanical_energy",
    "kinetic_energy",
    "advance_point_mass",
    "frame_from_direction",
]


@dataclass(frozen=True)
class RodParams:
    n_elements: int = 60
    base_length: float = 1.0
    base_radius: float = 0.05
    density: float = 1000.0
    youngs_modulus: float = 5e5
    shear_modulus: float = 2e5
    damping_constant: float = 0.3
    dt_physics: float = 1e-4
    gravity: bool = False

    def __post_init__(self):
        if int(self.n_elements) != self.n_elements or self.n_elements < 2:
            raise ConfigError(f"n_elements must be an integer >= 2, got {self.n_elements}")
        for name in ("base_length", "base_radius", "density", "youngs_modulus",
                     "shear_modulus", "dt_physics"):
            value = getattr(self, name)
            if not (math.isfinite(value) and value > 0):
                raise ConfigError(f"{name} must be a positive finite number, got {value}")
        if not (math.isfinite(self.damping_constant) and self.damping_constant >= 0):
            raise ConfigError(f"damping_constant must be non-negative, got {self.damping_constant}")

    @property
    def rest_length(self) -> float:
        return self.base_length / self.n_elements

    @property
    def area(self) -> float:
        return math.pi * self.base_radius**2

    @property
    def second_moment(self) -> float:
        return math.pi * self.base_radius**4 / 4.0

    @property
    def element_mass(self) -> float:
        return self.density * self.area * self.rest_length

    @property
    def total_mass(self) -> float:
        return self.element_mass * self.n_elements

    def node_masses(self) -> np.ndarray:
        m = np.full(self.n_elements + 1, self.element_mass)
        m[0] *= 0.5
        m[-1] *= 0.5
        return m

    def shear_stretch_stiffness(self) -> np.ndarray:
        ga = self.shear_modulus * self.area
        return np.array([ga, ga, self.youngs_modulus * self.area])

    def bend_twist_stiffness(self) -> np.ndarray:
        i = self.second_moment
        return np.array([self.youngs_modulus * i, self.youngs_modulus * i, self.shear_modulus * 2.0 * i])

    def element_inertia(self) -> np.ndarray:
        i = self.second_moment
        return self.density * self.rest_length * np.array([i, i, 2.0 * i])


@dataclass
class RodState:
    node_positions: np.ndarray
    node_velocities: np.ndarray
    element_directors: np.ndarray
    element_angular_velocities: np.ndarray
    time: float = 0.0

    @property
    def n_elements(self) -> int:
        return self.element_directors.shape[0]

    @property
    def tip(self) -> np.ndarray:
        return self.node_positions[-1]

    def copy(self) -> "RodState":
        return RodState(
            self.node_positions.copy(),
            self.node_velocities.copy(),
            self.element_directors.copy(),
            self.element_angular_velocities.copy(),
            self.time,
        )

    def is_finite(self) -> bool:
        return bool(
            np.isfinite(self.node_positions).all()
            and np.isfinite(self.node_velocities).all()
            and np.isfinite(self.element_directors).all()
            and np.isfinite(self.element_angular_velocities).all()
        )


@dataclass(frozen=True)
class Cylinder:
    start_point: np.ndarray
    axis_direction: np.ndarray
    length: float
    radius: float

    def __post_init__(self):
        start = np.asarray(self.start_point, dtype=float).reshape(3)
        axis = np.asarray(self.axis_direction, dtype=float).reshape(3)
        if abs(np.linalg.norm(axis) - 1.0) > 1e-9:
            raise ConfigError("cylinder axis_direction must be a unit vector")
        if not (self.length > 0 and self.radius > 0):
            raise ConfigError("cylinder length and radius must be positive")
        object.__setattr__(self, "start_point", start)
        object.__setattr__(self, "axis_direction", axis)

    @property
    def end_point(self) -> np.ndarray:
        return self.start_point + self.length * self.axis_direction

    @property
    def center(self) -> np.ndarray:
        return self.start_point + 0.5 * self.length * self.axis_direction


@dataclass(frozen=True)
class ContactParams:
    stiffness: float = 5e4
    damping: float = 50.0

    def __post_init__(self):
        if self.stiffness < 0 or self.damping < 0:
            raise ConfigError("contact stiffness and damping must be non-negative")


@dataclass
class StepOutcome:
    state: RodState
    diverged: bool = False
    contact_count: int = 0
    extra: dict = field(default_factory=dict)


def frame_from_direction(direction) -> np.ndarray:
    """Director matrix with ``d3 = direction`` and a deterministic ``d1``."""
    d3 = np.asarray(direction, dtype=float).reshape(3)
    norm = np.linalg.norm(d3)
    if not norm > 0:
        raise ConfigError("base_direction must be non-zero")
    d3 = d3 / norm
    helper = np.array([1.0, 0.0, 0.0]) if abs(d3[0]) < 0.9 else np.array([0.0, 1.0, 0.0])
    d1 = helper - helper.dot(d3) * d3
    d1 /= np.linalg.norm(d1)
    d2 = np.cross(d3, d1)
    return np.stack([d1, d2, d3])


def init_straight_rod(params: RodParams, base_direction=(0.0, 0.0, 1.0)) -> RodState:
    if not isinstance(params, RodParams):
        raise ConfigError("params must be RodParams")
    frame = frame_from_direction(base_direction)
    n = params.n_elements
    s = np.linspace(0.0, params.base_length, n + 1)
    positions = s[:, None] * frame[2][None, :]
    return RodState(
        node_positions=positions,
        node_velocities=np.zeros((n + 1, 3)),
        element_directors=np.repeat(frame[None], n, axis=0),
        element_angular_velocities=np.zeros((n, 3)),
        time=0.0,
    )


# ---------------------------------------------------------------------------
# numba kernels


@njit(cache=True, inline="always")
def _cross(a0, a1, a2, b0, b1, b2):
    return a1 * b2 - a2 * b1, a2 * b0 - a0 * b2, a0 * b1 - a1 * b0


@njit(cache=True, nogil=True)
def _log_relative(Qa, Qb, out):
    """Rotation vector phi with Qb Qa^T = exp(-[phi]x)."""
    # only the trace and the skew part of R = Qb Qa^T are needed
    r00 = Qb[0, 0] * Qa[0, 0] + Qb[0, 1] * Qa[0, 1] + Qb[0, 2] * Qa[0, 2]
    r11 = Qb[1, 0] * Qa[1, 0] + Qb[1, 1] * Qa[1, 1] + Qb[1, 2] * Qa[1, 2]
    r22 = Qb[2, 0] * Qa[2, 0] + Qb[2, 1] * Qa[2, 1] + Qb[2, 2] * Qa[2, 2]
    r21 = Qb[2, 0] * Qa[1, 0] + Qb[2, 1] * Qa[1, 1] + Qb[2, 2] * Qa[1, 2]
    r12 = Qb[1, 0] * Qa[2, 0] + Qb[1, 1] * Qa[2, 1] + Qb[1, 2] * Qa[2, 2]
    r02 = Qb[0, 0] * Qa[2, 0] + Qb[0, 1] * Qa[2, 1] + Qb[0, 2] * Qa[2, 2]
    r20 = Qb[2, 0] * Qa[0, 0] + Qb[2, 1] * Qa[0, 1] + Qb[2, 2] * Qa[0, 2]
    r10 = Qb[1, 0] * Qa[0, 0] + Qb[1, 1] * Qa[0, 1] + Qb[1, 2] * Qa[0, 2]
    r01 = Qb[0, 0] * Qa[1, 0] + Qb[0, 1] * Qa[1, 1] + Qb[0, 2] * Qa[1, 2]
    c = 0.5 * (r00 + r11 + r22 - 1.0)
    if c > 1.0:
        c = 1.0
    elif c < -1.0:
        c = -1.0
    theta = math.acos(c)
    wx = 0.5 * (r21 - r12)
    wy = 0.5 * (r02 - r20)
    wz = 0.5 * (r10 - r01)
    if theta < 1e-4:
        scale = 1.0 + theta * theta / 6.0
    else:
        scale = theta / math.sin(theta)
    out[0] = -scale * wx
    out[1] = -scale * wy
    out[2] = -scale * wz


@njit(cache=True, nogil=True)
def _jacobian_coeff(theta):
    # coefficient of [phi]x^2 in the inverse SO(3) Jacobians
    if theta < 1e-3:
        return 1.0 / 12.0 + theta * theta / 720.0
    return (1.0 - theta * math.sin(theta) / (2.0 * (1.0 - math.cos(theta)))) / (theta * theta)


@njit(cache=True, nogil=True)
def _internal_kernel(x, Q, l0, S, B, force, couple):
    n = Q.shape[0]
    force[:, :] = 0.0
    couple[:, :] = 0.0
    for e in range(n):
        t0 = x[e + 1, 0] - x[e, 0]
        t1 = x[e + 1, 1] - x[e, 1]
        t2 = x[e + 1, 2] - x[e, 2]
        qt0 = Q[e, 0, 0] * t0 + Q[e, 0, 1] * t1 + Q[e, 0, 2] * t2
        qt1 = Q[e, 1, 0] * t0 + Q[e, 1, 1] * t1 + Q[e, 1, 2] * t2
        qt2 = Q[e, 2, 0] * t0 + Q[e, 2, 1] * t1 + Q[e, 2, 2] * t2
        n0 = S[0] * (qt0 / l0)
        n1 = S[1] * (qt1 / l0)
        n2 = S[2] * (qt2 / l0 - 1.0)
        # lab-frame stress Q^T n
        f0 = Q[e, 0, 0] * n0 + Q[e, 1, 0] * n1 + Q[e, 2, 0] * n2
        f1 = Q[e, 0, 1] * n0 + Q[e, 1, 1] * n1 + Q[e, 2, 1] * n2
        f2 = Q[e, 0, 2] * n0 + Q[e, 1, 2] * n1 + Q[e, 2, 2] * n2
        force[e, 0] += f0
        force[e, 1] += f1
        force[e, 2] += f2
        force[e + 1, 0] -= f0
        force[e + 1, 1] -= f1
        force[e + 1, 2] -= f2
        c0, c1, c2 = _cross(qt0, qt1, qt2, n0, n1, n2)
        couple[e, 0] += c0
        couple[e, 1] += c1
        couple[e, 2] += c2
    phi = np.empty(3)
    for v in range(n - 1):
        _log_relative(Q[v], Q[v + 1], phi)
        m0 = B[0] * phi[0] / l0
        m1 = B[1] * phi[1] / l0
        m2 = B[2] * phi[2] / l0
        theta = math.sqrt(phi[0] ** 2 + phi[1] ** 2 + phi[2] ** 2)
        k = _jacobian_coeff(theta)
        a0, a1, a2 = _cross(phi[0], phi[1], phi[2], m0, m1, m2)
        b0, b1, b2 = _cross(phi[0], phi[1], phi[2], a0, a1, a2)
        couple[v, 0] += m0 + 0.5 * a0 + k * b0
        couple[v, 1] += m1 + 0.5 * a1 + k * b1
        couple[v, 2] += m2 + 0.5 * a2 + k * b2
        couple[v + 1, 0] += -m0 + 0.5 * a0 - k * b0
        couple[v + 1, 1] += -m1 + 0.5 * a1 - k * b1
        couple[v + 1, 2] += -m2 + 0.5 * a2 - k * b2


@njit(cache=True, nogil=True)
def _contact_kernel(x, v, starts, axes, lengths, radii, rod_radius, k, nu, force, in_contact):
    """Penalty contact of rod nodes against capsule-shaped cylinder axes."""
    force[:, :] = 0.0
    count = 0
    for i in range(x.shape[0]):
        touching = False
        for c in range(starts.shape[0]):
            r0 = x[i, 0] - starts[c, 0]
            r1 = x[i, 1] - starts[c, 1]
            r2 = x[i, 2] - starts[c, 2]
            s = r0 * axes[c, 0] + r1 * axes[c, 1] + r2 * axes[c, 2]
            if s < 0.0:
                s = 0.0
            elif s > lengths[c]:
                s = lengths[c]
            d0 = r0 - s * axes[c, 0]
            d1 = r1 - s * axes[c, 1]
            d2 = r2 - s * axes[c, 2]
            dist = math.sqrt(d0 * d0 + d1 * d1 + d2 * d2)
            reach = radii[c] + rod_radius
            if dist < reach:
                touching = True
                if dist > 1e-12:
                    n0 = d0 / dist
                    n1 = d1 / dist
                    n2 = d2 / dist
                else:
                    # node on the axis: push perpendicular to the axis, deterministic choice
                    n0, n1, n2 = _cross(axes[c, 0], axes[c, 1], axes[c, 2], 0.0, 0.0, 1.0)
                    nn = math.sqrt(n0 * n0 + n1 * n1 + n2 * n2)
                    if nn < 1e-9:
                        n0, n1, n2 = _cross(axes[c, 0], axes[c, 1], axes[c, 2], 1.0, 0.0, 0.0)
                        nn = math.sqrt(n0 * n0 + n1 * n1 + n2 * n2)
                    n0 /= nn
                    n1 /= nn
                    n2 /= nn
                pen = reach - dist
                mag = k * pen
                vn = v[i, 0] * n0 + v[i, 1] * n1 + v[i, 2] * n2
                if vn < 0.0:
                    mag -= nu * vn
                force[i, 0] += mag * n0
                force[i, 1] += mag * n1
                force[i, 2] += mag * n2
        in_contact[i] = touching
        if touching:
            count += 1
    return count


@njit(cache=True, nogil=True)
def _rotate_frame(Qe, w0, w1, w2, dt):
    """Qe <- exp(-[w dt]x) Qe, then re-orthonormalise rows."""
    a0 = w0 * dt
    a1 = w1 * dt
    a2 = w2 * dt
    theta = math.sqrt(a0 * a0 + a1 * a1 + a2 * a2)
    if theta > 1e-12:
        u0 = a0 / theta
        u1 = a1 / theta
        u2 = a2 / theta
        ct = math.cos(theta)
        st = math.sin(theta)
        vt = 1.0 - ct
        # R^T with R = exp([a]x), applied column by column
        r00 = ct + u0 * u0 * vt
        r11 = ct + u1 * u1 * vt
        r22 = ct + u2 * u2 * vt
        r01 = u0 * u1 * vt + u2 * st
        r10 = u0 * u1 * vt - u2 * st
        r02 = u0 * u2 * vt - u1 * st
        r20 = u0 * u2 * vt + u1 * st
        r12 = u1 * u2 * vt + u0 * st
        r21 = u1 * u2 * vt - u0 * st
        for j in range(3):
            q0 = Qe[0, j]
            q1 = Qe[1, j]
            q2 = Qe[2, j]
            Qe[0, j] = r00 * q0 + r01 * q1 + r02 * q2
            Qe[1, j] = r10 * q0 + r11 * q1 + r12 * q2
            Qe[2, j] = r20 * q0 + r21 * q1 + r22 * q2
    # Gram-Schmidt, tangent director first
    d3n = math.sqrt(Qe[2, 0] ** 2 + Qe[2, 1] ** 2 + Qe[2, 2] ** 2)
    Qe[2, :] /= d3n
    p = Qe[0, 0] * Qe[2, 0] + Qe[0, 1] * Qe[2, 1] + Qe[0, 2] * Qe[2, 2]
    Qe[0, :] -= p * Qe[2, :]
    d1n = math.sqrt(Qe[0, 0] ** 2 + Qe[0, 1] ** 2 + Qe[0, 2] ** 2)
    Qe[0, :] /= d1n
    c0, c1, c2 = _cross(Qe[2, 0], Qe[2, 1], Qe[2, 2], Qe[0, 0], Qe[0, 1], Qe[0, 2])
    Qe[1, 0] = c0
    Qe[1, 1] = c1
    Qe[1, 2] = c2


@njit(cache=True, nogil=True)
def _accelerations(x, v, Q, w, l0, S, B, inv_mass, inertia, ext_couple, ext_force,
                   starts, axes, lengths, radii, rod_radius, k, nu, gvec, mass,
                   force, couple, cforce, in_contact):
    _internal_kernel(x, Q, l0, S, B, force, couple)
    _contact_kernel(x, v, starts, axes, lengths, radii, rod_radius, k, nu, cforce, in_contact)
    for i in range(x.shape[0]):
        for j in range(3):
            force[i, j] = (force[i, j] + cforce[i, j] + ext_force[i, j]) * inv_mass[i] + gvec[j]
    for e in range(Q.shape[0]):
        # Euler's equations in the material frame: J w' = tau - w x J w
        jw0 = inertia[0] * w[e, 0]
        jw1 = inertia[1] * w[e, 1]
        jw2 = inertia[2] * w[e, 2]
        g0, g1, g2 = _cross(w[e, 0], w[e, 1], w[e, 2], jw0, jw1, jw2)
        couple[e, 0] = (couple[e, 0] + ext_couple[e, 0] - g0) / inertia[0]
        couple[e, 1] = (couple[e, 1] + ext_couple[e, 1] - g1) / inertia[1]
        couple[e, 2] = (couple[e, 2] + ext_couple[e, 2] - g2) / inertia[2]


@njit(cache=True, nogil=True)
def _advance_kernel(x, v, Q, w, Q_base, base_point, l0, S, B, inv_mass, inertia,
                    ext_couple, ext_force, starts, axes, lengths, radii, rod_radius,
                    k, nu, gvec, mass, dt, damping, n_steps):
    """Run ``n_steps`` kick-drift-kick steps in place; returns -1 on divergence."""
    n_nodes = x.shape[0]
    n = Q.shape[0]
    acc = np.zeros((n_nodes, 3))
    alpha = np.zeros((n, 3))
    cforce = np.zeros((n_nodes, 3))
    in_contact = np.zeros(n_nodes, dtype=np.bool_)
    decay = math.exp(-damping * dt)
    h = 0.5 * dt
    for _ in range(n_steps):
        _accelerations(x, v, Q, w, l0, S, B, inv_mass, inertia, ext_couple, ext_force,
                       starts, axes, lengths, radii, rod_radius, k, nu, gvec, mass,
                       acc, alpha, cforce, in_contact)
        for i in range(1, n_nodes):
            for j in range(3):
                v[i, j] += h * acc[i, j]
                x[i, j] += dt * v[i, j]
        for e in range(1, n):
            for j in range(3):
                w[e, j] += h * alpha[e, j]
            _rotate_frame(Q[e], w[e, 0], w[e, 1], w[e, 2], dt)
        _accelerations(x, v, Q, w, l0, S, B, inv_mass, inertia, ext_couple, ext_force,
                       starts, axes, lengths, radii, rod_radius, k, nu, gvec, mass,
                       acc, alpha, cforce, in_contact)
        bad = False
        for i in range(1, n_nodes):
            for j in range(3):
                v[i, j] = (v[i, j] + h * acc[i, j]) * decay
                if not math.isfinite(v[i, j]) or not math.isfinite(x[i, j]):
                    bad = True
        for e in range(1, n):
            for j in range(3):
                w[e, j] = (w[e, j] + h * alpha[e, j]) * decay
                if not math.isfinite(w[e, j]):
                    bad = True
        # clamped base
        for j in range(3):
            x[0, j] = base_point[j]
            v[0, j] = 0.0
            w[0, j] = 0.0
        Q[0, :, :] = Q_base
        if bad:
            return -1
    return 0


@njit(cache=True, nogil=True)
def _advance_point_kernel(x, v, force, mass, dt, damping, n_steps):
    decay = math.exp(-damping * dt)
    h = 0.5 * dt
    for _ in range(n_steps):
        for j in range(3):
            v[j] += h * force[j] / mass
            x[j] += dt * v[j]
            v[j] = (v[j] + h * force[j] / mass) * decay


# ---------------------------------------------------------------------------
# python-level API


def _cylinder_arrays(cylinders):
    m = len(cylinders)
    starts = np.zeros((m, 3))
    axes = np.zeros((m, 3))
    lengths = np.zeros(m)
    radii = np.zeros(m)
    for c, cyl in enumerate(cylinders):
        starts[c] = cyl.start_point
        axes[c] = cyl.axis_direction
        lengths[c] = cyl.length
        radii[c] = cyl.radius
    return starts, axes, lengths, radii


class CylinderSet:
    """Packed cylinder geometry, built once per scenario and shared read-only."""

    def __init__(self, cylinders):
        self.cylinders = list(cylinders)
        self.starts, self.axes, self.lengths, self.radii = _cylinder_arrays(self.cylinders)

    def __len__(self):
        return len(self.cylinders)


def _as_cylinder_set(cylinders) -> CylinderSet:
    if isinstance(cylinders, CylinderSet):
        return cylinders
    return CylinderSet(cylinders or [])


def compute_internal_forces(state: RodState, params: RodParams):
    """Elastic node forces (lab frame) and element couples (material frame)."""
    n = state.n_elements
    force = np.zeros((n + 1, 3))
    couple = np.zeros((n, 3))
    _internal_kernel(
        np.ascontiguousarray(state.node_positions, dtype=float),
        np.ascontiguousarray(state.element_directors, dtype=float),
        params.rest_length,
        params.shear_stretch_stiffness(),
        params.bend_twist_stiffness(),
        force,
        couple,
    )
    return force, couple


def compute_contact_forces(state: RodState, cylinders, contact: ContactParams,
                           rod_radius: float = 0.05):
    cset = _as_cylinder_set(cylinders)
    n_nodes = state.node_positions.shape[0]
    force = np.zeros((n_nodes, 3))
    in_contact = np.zeros(n_nodes, dtype=np.bool_)
    count = _contact_kernel(
        np.ascontiguousarray(state.node_positions, dtype=float),
        np.ascontiguousarray(state.node_velocities, dtype=float),
        cset.starts, cset.axes, cset.lengths, cset.radii,
        float(rod_radius), float(contact.stiffness), float(contact.damping),
        force, in_contact,
    )
    return force, int(count)


class _Kernels:
    """Per-parameter constant arrays, cached so the hot loop does no allocation."""

    _cache: dict = {}

    @classmethod
    def get(cls, params: RodParams):
        entry = cls._cache.get(params)
        if entry is None:
            inv_mass = 1.0 / params.node_masses()
            entry = dict(
                l0=params.rest_length,
                S=params.shear_stretch_stiffness(),
                B=params.bend_twist_stiffness(),
                inv_mass=inv_mass,
                mass=params.node_masses(),
                inertia=params.element_inertia(),
                gvec=np.array([0.0, 0.0, -9.81]) if params.gravity else np.zeros(3),
            )
            cls._cache[params] = entry
        return entry


def advance(state: RodState, params: RodParams, external_couple_field, cylinders,
            contact: ContactParams, n_steps: int = 1, tip_force=None,
            base_frame=None, base_point=None) -> StepOutcome:
    """Advance ``n_steps`` physics steps from ``state`` (which is not modified).

    ``external_couple_field`` is a couple per unit length (N m / m) about the
    material axes of each element; it is integrated over the element length
    before entering Euler's equations.  ``tip_force`` (N, lab frame) acts on
    the last node for every step of this call.
    """
    k = _Kernels.get(params)
    out = state.copy()
    n = out.n_elements
    if base_frame is None:
        base_frame = state.element_directors[0]
    if base_point is None:
        base_point = state.node_positions[0]
    ext_couple = np.zeros((n, 3))
    if external_couple_field is not None:
        ext_couple[:] = np.asarray(external_couple_field, dtype=float).reshape(n, 3) * k["l0"]
    ext_force = np.zeros((n + 1, 3))
    if tip_force is not None:
        ext_force[-1] = np.asarray(tip_force, dtype=float)
    cset = _as_cylinder_set(cylinders)
    flag = _advance_kernel(
        out.node_positions, out.node_velocities, out.element_directors,
        out.element_angular_velocities,
        np.ascontiguousarray(base_frame, dtype=float), np.ascontiguousarray(base_point, dtype=float),
        k["l0"], k["S"], k["B"], k["inv_mass"], k["inertia"],
        ext_couple, ext_force, cset.starts, cset.axes, cset.lengths, cset.radii,
        params.base_radius, float(contact.stiffness), float(contact.damping),
        k["gvec"], k["mass"], params.dt_physics, params.damping_constant, int(n_steps),
    )
    out.time = state.time + n_steps * params.dt_physics
    diverged = flag < 0 or not out.is_finite()
    count = 0
    if not diverged:
        _, count = compute_contact_forces(out, cset, contact, params.base_radius)
    return StepOutcome(state=out, diverged=diverged, contact_count=count)


def step_dynamics(state: RodState, params: RodParams, external_couple_field, cylinders,
                  contact: ContactParams, tip_force=None) -> StepOutcome:
    """One explicit integration step; see :func:`advance`."""
    return advance(state, params, external_couple_field, cylinders, contact, 1, tip_force)


def kinetic_energy(state: RodState, params: RodParams) -> float:
    m = params.node_masses()
    inertia = params.element_inertia()
    lin = 0.5 * np.sum(m[:, None] * state.node_velocities**2)
    rot = 0.5 * np.sum(inertia[None, :] * state.element_angular_velocities**2)
    return float(lin + rot)


def elastic_energy(state: RodState, params: RodParams) -> float:
    l0 = params.rest_length
    S = params.shear_stretch_stiffness()
    B = params.bend_twist_stiffness()
    Q = state.element_directors
    t = np.diff(state.node_positions, axis=0)
    sigma = np.einsum("eij,ej->ei", Q, t) / l0
    sigma[:, 2] -= 1.0
    total = 0.5 * l0 * np.sum(S * sigma**2)
    phi = np.empty(3)
    for v in range(Q.shape[0] - 1):
        _log_relative(Q[v], Q[v + 1], phi)
        total += 0.5 * np.sum(B * phi**2) / l0
    return float(total)


def mechanical_energy(state: RodState, params: RodParams) -> float:
    return kinetic_energy(state, params) + elastic_energy(state, params)


def advance_point_mass(position, velocity, force, mass, dt, damping, n_steps):
    """Free point mass under a constant force with the rod's kick-drift-kick-damp scheme."""
    x = np.array(position, dtype=float)
    v = np.array(velocity, dtype=float)
    _advance_point_kernel(x, v, np.asarray(force, dtype=float), float(mass), float(dt),
                          float(damping), int(n_steps))
    return x, v
