import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from softgm.errors import ConfigError
from softgm.scenario import (BoxRegion, LayoutConfig, ScenarioKind, ShellRegion, build_scenario,
                             sample_target)


@pytest.mark.parametrize("text,kind", [("basic", ScenarioKind.BASIC), ("Structured", ScenarioKind.STRUCTURED),
                                       ("wall-with-hole", ScenarioKind.WALL), ("wall", ScenarioKind.WALL)])
def test_parse_kind(text, kind):
    assert ScenarioKind.parse(text) is kind


def test_parse_unknown_kind():
    with pytest.raises(ConfigError):
        ScenarioKind.parse("maze")


def test_basic_has_no_obstacles():
    spec = build_scenario("basic")
    assert spec.cylinders == []
    assert spec.wall is None


def test_structured_posts_straddle_the_reach_direction():
    spec = build_scenario("structured")
    assert len(spec.cylinders) == 2
    ys = sorted(c.center[1] for c in spec.cylinders)
    assert ys[0] < 0 < ys[1]


def test_wall_has_one_missing_peg():
    layout = LayoutConfig()
    for seed in range(10):
        spec = build_scenario("wall", seed)
        assert len(spec.cylinders) == layout.wall_grid**2 - 1
        centers = np.array([c.center for c in spec.cylinders])
        # no peg sits where the hole is
        assert np.min(np.linalg.norm(centers - spec.wall.hole_center, axis=1)) > layout.wall_spacing / 2


def test_wall_hole_depends_on_seed():
    holes = {tuple(build_scenario("wall", s).wall.hole_center) for s in range(20)}
    assert len(holes) > 1


@settings(max_examples=200, deadline=None)
@given(seed=st.integers(0, 2**31))
def test_shell_samples_stay_inside(seed):
    region = ShellRegion(0.5, 0.9, 20.0, 80.0, 45.0)
    rng = np.random.default_rng(seed)
    assert region.contains(region.sample(rng))


def test_shell_volume_sampling_matches_cdf():
    # radial CDF of uniform-volume sampling: (r^3 - a^3) / (b^3 - a^3)
    region = ShellRegion(0.5, 0.9)
    rng = np.random.default_rng(0)
    r = np.array([np.linalg.norm(region.sample(rng)) for _ in range(20000)])
    med = ((0.5**3 + 0.9**3) / 2) ** (1 / 3)
    assert abs(np.mean(r < med) - 0.5) < 0.015


def test_degenerate_regions_rejected():
    with pytest.raises(ConfigError):
        BoxRegion((0, 0, 1), (1, 1, 0)).validate()
    with pytest.raises(ConfigError):
        ShellRegion(0.9, 0.5).validate()
    BoxRegion((0.2, 0.2, 0.2), (0.2, 0.2, 0.2)).validate()


@pytest.mark.parametrize("kind", ["basic", "structured", "wall"])
def test_targets_outside_obstacles_and_in_region(kind):
    spec = build_scenario(kind, 3)
    rng = np.random.default_rng(5)
    for _ in range(200):
        t = sample_target(spec, rng)
        assert spec.target_sampler.contains(t)
        for c in spec.cylinders:
            rel = t - c.start_point
            s = np.clip(rel @ c.axis_direction, 0, c.length)
            assert np.linalg.norm(rel - s * c.axis_direction) >= c.radius


def test_targets_at_least_reach_margin_from_rest_tip():
    # the rest tip sits at (0, 0, 1); targets must not start out already solved
    spec = build_scenario("basic")
    rng = np.random.default_rng(0)
    d = [np.linalg.norm(sample_target(spec, rng) - [0, 0, 1.0]) for _ in range(2000)]
    assert min(d) >= 0.3


def test_wall_targets_lie_behind_wall():
    spec = build_scenario("wall", 1)
    rng = np.random.default_rng(0)
    back = spec.wall.plane_point[0]
    assert all(sample_target(spec, rng)[0] > back for _ in range(100))


def test_scenario_validation():
    with pytest.raises(ConfigError):
        build_scenario("basic", layout=LayoutConfig(max_episode_steps=0))
    with pytest.raises(ConfigError):
        build_scenario("wall", layout=LayoutConfig(wall_grid=2))
