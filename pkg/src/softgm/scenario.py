"""Task layouts: obstacle-free reaching, two posts, and a peg wall with one hole.

All layouts share the same frame: the arm base sits at the origin, the rod
initially points up (+z) and the goal region lies toward +x.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field

import numpy as np

from softgm.errors import ConfigError
from softgm.rod import Cylinder

__all__ = [
    "ScenarioKind",
    "ShellRegion",
    "BoxRegion",
    "WallGeometry",
    "ScenarioSpec",
    "LayoutConfig",
    "build_scenario",
    "sample_target",
]


class ScenarioKind(str, enum.Enum):
    BASIC = "basic"
    STRUCTURED = "structured"
    WALL = "wall"

    @classmethod
    def parse(cls, value) -> "ScenarioKind":
        if isinstance(value, cls):
            return value
        aliases = {
            "basic": cls.BASIC,
            "structured": cls.STRUCTURED,
            "structuredobstacles": cls.STRUCTURED,
            "structured_obstacles": cls.STRUCTURED,
            "wall": cls.WALL,
            "wallwithhole": cls.WALL,
            "wall_with_hole": cls.WALL,
            "wall-with-hole": cls.WALL,
        }
        key = str(value).strip().lower()
        if key not in aliases:
            raise ConfigError(f"unknown scenario kind {value!r}; expected basic, structured or wall")
        return aliases[key]


@dataclass(frozen=True)
class ShellRegion:
    """Spherical-shell sector around the base.

    Polar angle is measured from ``up`` (the rod's rest direction), azimuth
    from ``forward`` (the reach direction).
    """

    r_min: float
    r_max: float
    polar_min_deg: float = 0.0
    polar_max_deg: float = 180.0
    azimuth_half_width_deg: float = 180.0
    center: tuple = (0.0, 0.0, 0.0)
    up: tuple = (0.0, 0.0, 1.0)
    forward: tuple = (1.0, 0.0, 0.0)

    def validate(self):
        if not (0 <= self.r_min <= self.r_max) or not math.isfinite(self.r_max):
            raise ConfigError(f"shell radii must satisfy 0 <= r_min <= r_max, got {self.r_min}, {self.r_max}")
        if not (0 <= self.polar_min_deg <= self.polar_max_deg <= 180):
            raise ConfigError("shell polar range must satisfy 0 <= min <= max <= 180")
        if not (0 <= self.azimuth_half_width_deg <= 180):
            raise ConfigError("azimuth half width must lie in [0, 180]")

    def sample(self, rng: np.random.Generator) -> np.ndarray:
        u = rng.random(3)
        r = (self.r_min**3 + u[0] * (self.r_max**3 - self.r_min**3)) ** (1.0 / 3.0)
        c_hi = math.cos(math.radians(self.polar_min_deg))
        c_lo = math.cos(math.radians(self.polar_max_deg))
        cos_polar = c_lo + u[1] * (c_hi - c_lo)
        sin_polar = math.sqrt(max(0.0, 1.0 - cos_polar**2))
        az = math.radians(self.azimuth_half_width_deg) * (2.0 * u[2] - 1.0)
        up = np.asarray(self.up, dtype=float)
        fwd = np.asarray(self.forward, dtype=float)
        side = np.cross(up, fwd)
        direction = cos_polar * up + sin_polar * (math.cos(az) * fwd + math.sin(az) * side)
        return np.asarray(self.center, dtype=float) + r * direction

    def contains(self, point, tol: float = 1e-9) -> bool:
        rel = np.asarray(point, dtype=float) - np.asarray(self.center, dtype=float)
        r = np.linalg.norm(rel)
        if not (self.r_min - tol <= r <= self.r_max + tol):
            return False
        if r == 0:
            return self.r_min == 0
        up = np.asarray(self.up, dtype=float)
        fwd = np.asarray(self.forward, dtype=float)
        polar = math.degrees(math.acos(np.clip(rel.dot(up) / r, -1, 1)))
        if not (self.polar_min_deg - 1e-6 <= polar <= self.polar_max_deg + 1e-6):
            return False
        horiz = rel - rel.dot(up) * up
        if np.linalg.norm(horiz) < 1e-12:
            return True
        side = np.cross(up, fwd)
        az = math.degrees(math.atan2(horiz.dot(side), horiz.dot(fwd)))
        return abs(az) <= self.azimuth_half_width_deg + 1e-6


@dataclass(frozen=True)
class BoxRegion:
    low: tuple
    high: tuple

    def validate(self):
        lo = np.asarray(self.low, dtype=float)
        hi = np.asarray(self.high, dtype=float)
        if lo.shape != (3,) or hi.shape != (3,) or not np.all(np.isfinite(lo)) or not np.all(np.isfinite(hi)):
            raise ConfigError("box region bounds must be two finite 3-vectors")
        if np.any(hi < lo):
            raise ConfigError(f"box region is degenerate: low {lo} exceeds high {hi}")

    def sample(self, rng: np.random.Generator) -> np.ndarray:
        lo = np.asarray(self.low, dtype=float)
        hi = np.asarray(self.high, dtype=float)
        return lo + rng.random(3) * (hi - lo)

    def contains(self, point, tol: float = 1e-12) -> bool:
        p = np.asarray(point, dtype=float)
        return bool(np.all(p >= np.asarray(self.low) - tol) and np.all(p <= np.asarray(self.high) + tol))


@dataclass(frozen=True)
class WallGeometry:
    plane_point: np.ndarray
    normal: np.ndarray
    # in-plane half extents (lateral, vertical) of the barrier including peg radius
    half_extent: tuple
    hole_center: np.ndarray
    hole_half_width: float


@dataclass
class LayoutConfig:
    """Geometry knobs for all three layouts (meters, degrees)."""

    shell_r_min: float = 0.5
    shell_r_max: float = 0.9
    shell_polar_min_deg: float = 20.0
    shell_polar_max_deg: float = 80.0
    shell_azimuth_half_width_deg: float = 45.0
    post_radius: float = 0.04
    post_length: float = 0.6
    post_lateral_offset: float = 0.12
    post_distance: float = 0.5
    post_center_height: float = 0.5
    wall_grid: int = 7
    wall_peg_radius: float = 0.04
    wall_spacing: float = 0.09
    wall_distance: float = 0.55
    wall_thickness: float = 0.06
    wall_center_height: float = 0.4
    wall_target_depth: float = 0.3
    wall_target_gap: float = 0.05
    wall_target_half_width: float = 0.15
    wall_target_z_min: float = 0.2
    wall_target_z_max: float = 0.5
    success_radius: float = 0.05
    max_episode_steps: int = 2000


@dataclass
class ScenarioSpec:
    kind: ScenarioKind
    cylinders: list
    target_sampler: object
    success_radius: float
    max_episode_steps: int
    seed: int = 0
    wall: WallGeometry | None = None
    base_direction: tuple = (0.0, 0.0, 1.0)
    layout: LayoutConfig = field(default_factory=LayoutConfig)

    def __post_init__(self):
        if self.max_episode_steps <= 0:
            raise ConfigError("max_episode_steps must be positive")
        if not self.success_radius > 0:
            raise ConfigError("success_radius must be positive")
        self.target_sampler.validate()

    def summary(self) -> dict:
        return {
            "kind": self.kind.value,
            "seed": self.seed,
            "n_cylinders": len(self.cylinders),
            "success_radius": self.success_radius,
            "max_episode_steps": self.max_episode_steps,
        }


_UP = np.array([0.0, 0.0, 1.0])
_FWD = np.array([1.0, 0.0, 0.0])
_SIDE = np.array([0.0, 1.0, 0.0])


def _shell(layout: LayoutConfig) -> ShellRegion:
    return ShellRegion(
        r_min=layout.shell_r_min,
        r_max=layout.shell_r_max,
        polar_min_deg=layout.shell_polar_min_deg,
        polar_max_deg=layout.shell_polar_max_deg,
        azimuth_half_width_deg=layout.shell_azimuth_half_width_deg,
    )


def _posts(layout: LayoutConfig) -> list:
    cylinders = []
    for sign in (-1.0, 1.0):
        center = layout.post_distance * _FWD + sign * layout.post_lateral_offset * _SIDE \
            + layout.post_center_height * _UP
        cylinders.append(Cylinder(center - 0.5 * layout.post_length * _UP, _UP.copy(),
                                  layout.post_length, layout.post_radius))
    return cylinders


def _wall(layout: LayoutConfig, rng: np.random.Generator):
    g = layout.wall_grid
    if g < 3:
        raise ConfigError("wall_grid must be at least 3 to leave a border around the hole")
    half = (g - 1) / 2.0
    # hole: any interior cell except the centre one
    interior = [(i, j) for i in range(1, g - 1) for j in range(1, g - 1)
                if not (i == half and j == half)]
    if not interior:
        raise ConfigError("wall grid has no off-centre interior cell for the hole")
    hole = interior[int(rng.integers(len(interior)))]
    cylinders = []
    hole_center = None
    x_front = layout.wall_distance - 0.5 * layout.wall_thickness
    for i in range(g):
        for j in range(g):
            y = (j - half) * layout.wall_spacing
            z = layout.wall_center_height + (i - half) * layout.wall_spacing
            if (i, j) == hole:
                hole_center = np.array([layout.wall_distance, y, z])
                continue
            start = np.array([x_front, y, z])
            cylinders.append(Cylinder(start, _FWD.copy(), layout.wall_thickness, layout.wall_peg_radius))
    extent = half * layout.wall_spacing + layout.wall_peg_radius
    geom = WallGeometry(
        plane_point=np.array([layout.wall_distance, 0.0, layout.wall_center_height]),
        normal=_FWD.copy(),
        half_extent=(extent, extent),
        hole_center=hole_center,
        hole_half_width=layout.wall_spacing - layout.wall_peg_radius,
    )
    back = layout.wall_distance + 0.5 * layout.wall_thickness + layout.wall_target_gap
    region = BoxRegion(
        low=(back, -layout.wall_target_half_width, layout.wall_target_z_min),
        high=(back + layout.wall_target_depth, layout.wall_target_half_width, layout.wall_target_z_max),
    )
    return cylinders, geom, region


def build_scenario(kind, seed: int = 0, layout: LayoutConfig | None = None) -> ScenarioSpec:
    kind = ScenarioKind.parse(kind)
    layout = layout or LayoutConfig()
    rng = np.random.default_rng(seed)
    wall = None
    if kind is ScenarioKind.BASIC:
        cylinders, region = [], _shell(layout)
    elif kind is ScenarioKind.STRUCTURED:
        cylinders, region = _posts(layout), _shell(layout)
    else:
        cylinders, wall, region = _wall(layout, rng)
    return ScenarioSpec(
        kind=kind,
        cylinders=cylinders,
        target_sampler=region,
        success_radius=layout.success_radius,
        max_episode_steps=layout.max_episode_steps,
        seed=seed,
        wall=wall,
        layout=layout,
    )


def _inside_any(point, cylinders) -> bool:
    for cyl in cylinders:
        rel = point - cyl.start_point
        s = np.clip(rel.dot(cyl.axis_direction), 0.0, cyl.length)
        if np.linalg.norm(rel - s * cyl.axis_direction) < cyl.radius:
            return True
    return False


def sample_target(spec: ScenarioSpec, rng: np.random.Generator, max_tries: int = 1000) -> np.ndarray:
    spec.target_sampler.validate()
    for _ in range(max_tries):
        target = spec.target_sampler.sample(rng)
        if not _inside_any(target, spec.cylinders):
            return target
    raise ConfigError("target region lies entirely inside obstacles")
