"""Multi-agent reaching episodes on the simulated rod.

One :class:`SoftArmEnv` owns one rod, one target and one discovery ledger.
All agents share the scalar team reward.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from softgm.actuation import (
    ActuationParams,
    actions_to_torque_field,
    agent_node_indices,
    applied_torques,
    build_spline_basis,
    clip_actions,
)
from softgm.discovery import DiscoveryLedger, update_discovery
from softgm.errors import ConfigError, InputError
from softgm.graph import GraphObservation, build_graph
from softgm.rod import ContactParams, CylinderSet, RodParams, advance, init_straight_rod
from softgm.scenario import ScenarioSpec, sample_target

__all__ = [
    "RewardWeights",
    "NoiseConfig",
    "DisturbanceConfig",
    "PerturbationConfig",
    "EnvConfig",
    "StepResult",
    "SoftArmEnv",
    "reward_terms",
    "compute_reward",
]

REWARD_TERMS = (
    "base", "progress", "smoothness", "time", "collision", "collision_per_node",
    "discovery", "stuck", "success",
)


@dataclass(frozen=True)
class RewardWeights:
    lambda_progress: float = 5.0
    lambda_action_smooth: float = 0.05
    lambda_time: float = 0.01
    lambda_collision: float = -0.5
    lambda_collision_per_node: float = -0.05
    lambda_discovery: float = 0.5
    discovery_cap: int = 3
    lambda_stuck: float = 0.2
    stuck_epsilon: float = 1e-3
    lambda_success: float = 100.0

    def __post_init__(self):
        if self.discovery_cap < 1:
            raise ConfigError("discovery_cap must be >= 1")
        if not self.stuck_epsilon > 0:
            raise ConfigError("stuck_epsilon must be positive")

    @classmethod
    def zeros(cls, **overrides) -> "RewardWeights":
        base = dict(lambda_progress=0.0, lambda_action_smooth=0.0, lambda_time=0.0,
                    lambda_collision=0.0, lambda_collision_per_node=0.0, lambda_discovery=0.0,
                    lambda_stuck=0.0, lambda_success=0.0)
        base.update(overrides)
        return cls(**base)


def reward_terms(d_t, d_prev, actions, prev_actions, contact_count, n_new,
                 weights: RewardWeights, success: bool) -> dict:
    """The nine signed contributions to the team reward."""
    a = np.asarray(actions, dtype=float)
    a_prev = np.asarray(prev_actions, dtype=float)
    n_agents, d_a = a.shape
    progress = d_prev - d_t
    touching = 1.0 if contact_count > 0 else 0.0
    return {
        "base": -d_t,
        "progress": weights.lambda_progress * progress,
        "smoothness": -weights.lambda_action_smooth * float(np.sum((a - a_prev) ** 2)) / (n_agents * d_a),
        "time": -weights.lambda_time,
        "collision": weights.lambda_collision * touching,
        "collision_per_node": weights.lambda_collision_per_node * contact_count,
        "discovery": weights.lambda_discovery * min(n_new, weights.discovery_cap),
        "stuck": -weights.lambda_stuck * touching * (1.0 if abs(progress) < weights.stuck_epsilon else 0.0),
        "success": weights.lambda_success * (1.0 if success else 0.0),
    }


def compute_reward(d_t, d_prev, actions, prev_actions, contact_count, n_new,
                   weights: RewardWeights, success: bool) -> float:
    terms = reward_terms(d_t, d_prev, actions, prev_actions, contact_count, n_new, weights, success)
    return float(sum(terms[k] for k in REWARD_TERMS))


@dataclass(frozen=True)
class NoiseConfig:
    position_std: float = 0.1
    velocity_std: float = 0.1
    action_feature_std: float = 0.2


@dataclass(frozen=True)
class DisturbanceConfig:
    force: float = 15.0
    start_step: int = 5
    duration_frames: int = 6
    direction: tuple = (0.0, 1.0, 0.0)

    def active(self, step_index: int) -> bool:
        return self.start_step <= step_index < self.start_step + self.duration_frames

    def vector(self) -> np.ndarray:
        d = np.asarray(self.direction, dtype=float)
        return self.force * d / np.linalg.norm(d)


@dataclass(frozen=True)
class PerturbationConfig:
    obs_noise: NoiseConfig | None = None
    failed_agent_index: int | None = None
    disturbance: DisturbanceConfig | None = None

    @classmethod
    def named(cls, name: str | None) -> "PerturbationConfig":
        if name in (None, "", "none"):
            return cls()
        if name == "noise":
            return cls(obs_noise=NoiseConfig())
        if name == "fail":
            return cls(failed_agent_index=2)
        if name == "disturb":
            return cls(disturbance=DisturbanceConfig())
        raise ConfigError(f"unknown perturbation {name!r}; expected noise, fail or disturb")

    @property
    def name(self) -> str:
        parts = []
        if self.obs_noise is not None:
            parts.append("noise")
        if self.failed_agent_index is not None:
            parts.append("fail")
        if self.disturbance is not None:
            parts.append("disturb")
        return "+".join(parts) or "none"


@dataclass(frozen=True)
class EnvConfig:
    rod: RodParams = field(default_factory=RodParams)
    actuation: ActuationParams = field(default_factory=ActuationParams)
    contact: ContactParams = field(default_factory=ContactParams)
    reward: RewardWeights = field(default_factory=RewardWeights)
    control_substeps: int = 50
    segment_length: float = 0.1
    sensing_radius: float = 0.15
    n_obs_max: int = 32
    divergence_penalty: float = -50.0
    base_direction: tuple = (0.0, 0.0, 1.0)

    def __post_init__(self):
        if self.control_substeps < 1:
            raise ConfigError("control_substeps must be >= 1")
        if self.actuation.n_agents > self.rod.n_elements + 1:
            raise ConfigError("more agents than rod nodes")

    @property
    def control_interval(self) -> float:
        return self.control_substeps * self.rod.dt_physics


@dataclass
class StepResult:
    per_agent_observations: np.ndarray
    graph: GraphObservation
    reward: float
    done: bool
    info: dict


class SoftArmEnv:
    """Episode loop for one arm in one scenario; not safe for concurrent calls."""

    def __init__(self, spec: ScenarioSpec, config: EnvConfig | None = None, seed: int | None = None,
                 record_trace: bool = False):
        self.spec = spec
        self.config = config or EnvConfig()
        cfg = self.config
        self.basis = build_spline_basis(cfg.actuation.n_agents, cfg.rod.n_elements, cfg.actuation.spline_degree)
        self.agent_nodes = agent_node_indices(cfg.actuation.n_agents, cfg.rod.n_elements)
        self.cylinders = CylinderSet(spec.cylinders)
        self.ledger = DiscoveryLedger(spec.cylinders, cfg.segment_length, cfg.sensing_radius, cfg.n_obs_max)
        self.rng = np.random.default_rng(seed)
        self.record_trace = record_trace
        self.trace: list = []
        self.perturbation = PerturbationConfig()
        self.done = True
        self.rod = None

    @property
    def n_agents(self) -> int:
        return self.config.actuation.n_agents

    def reset(self, seed: int | None = None, perturbation: PerturbationConfig | None = None) -> StepResult:
        cfg = self.config
        if seed is not None:
            self.rng = np.random.default_rng(seed)
        self.perturbation = perturbation or PerturbationConfig()
        self.target = sample_target(self.spec, self.rng)
        # drawn unconditionally so the target stream never depends on the perturbation
        self.noise_rng = np.random.default_rng(int(self.rng.integers(2**63)))
        self.rod = init_straight_rod(cfg.rod, cfg.base_direction)
        self._base_frame = self.rod.element_directors[0].copy()
        self._base_point = self.rod.node_positions[0].copy()
        self.ledger.reset()
        self.prev_actions = np.zeros((self.n_agents, 2))
        self.step_count = 0
        self.distance = float(np.linalg.norm(self.rod.tip - self.target))
        self.done = False
        self.trace = []
        graph = self._observe()
        info = {
            "distance": self.distance,
            "progress": 0.0,
            "contact_count": 0,
            "new_discoveries": 0,
            "success": False,
            "diverged": False,
            "horizon": False,
            "termination": None,
            "tip_position": self.rod.tip.copy(),
            "target": self.target.copy(),
        }
        return StepResult(graph.agent_features.copy(), graph, 0.0, False, info)

    def _observe(self) -> GraphObservation:
        pos = self.rod.node_positions[self.agent_nodes]
        vel = self.rod.node_velocities[self.agent_nodes]
        graph = build_graph(pos, vel, self.prev_actions, self.ledger, self.target, self.rod.tip)
        noise = self.perturbation.obs_noise
        if noise is not None:
            n = self.n_agents
            feats = graph.node_features.copy()
            feats[:n, 0:3] += self.noise_rng.normal(0.0, noise.position_std, (n, 3))
            feats[:n, 3:6] += self.noise_rng.normal(0.0, noise.velocity_std, (n, 3))
            feats[:n, 6:8] += self.noise_rng.normal(0.0, noise.action_feature_std, (n, 2))
            graph = GraphObservation(feats, graph.node_types, graph.adjacency,
                                     graph.stage1_mask, graph.stage2_mask, graph.n_agents)
        return graph

    def step(self, joint_action, perturb: PerturbationConfig | None = None) -> StepResult:
        if self.done:
            raise RuntimeError("step() called on a finished episode; call reset() first")
        cfg = self.config
        if perturb is not None:
            self.perturbation = perturb
        perturb = self.perturbation
        a = np.asarray(joint_action, dtype=float)
        if a.shape != (self.n_agents, 2):
            raise InputError(f"joint action must have shape ({self.n_agents}, 2), got {a.shape}")
        a, n_clamped = clip_actions(a)
        if perturb.failed_agent_index is not None:
            a = a.copy()
            a[perturb.failed_agent_index] = 0.0
        field_ = actions_to_torque_field(a, self.basis, cfg.actuation)
        tip_force = np.zeros(3)
        if perturb.disturbance is not None and perturb.disturbance.active(self.step_count):
            tip_force = perturb.disturbance.vector()
        outcome = advance(self.rod, cfg.rod, field_, self.cylinders, cfg.contact,
                          cfg.control_substeps, tip_force, self._base_frame, self._base_point)
        step_index = self.step_count
        self.step_count += 1
        torques = applied_torques(a, cfg.actuation)

        if outcome.diverged:
            self.done = True
            graph = self._observe()
            info = self._info(self.distance, 0.0, 0, 0, False, torques, tip_force, n_clamped)
            info.update(diverged=True, termination="diverged",
                        reward_terms={"divergence": cfg.divergence_penalty})
            self._record(step_index, info, cfg.divergence_penalty, a)
            return StepResult(graph.agent_features.copy(), graph, cfg.divergence_penalty, True, info)

        self.rod = outcome.state
        n_new = update_discovery(self.ledger, self.rod.node_positions[self.agent_nodes])
        d_prev = self.distance
        d_t = float(np.linalg.norm(self.rod.tip - self.target))
        success = d_t < self.spec.success_radius
        terms = reward_terms(d_t, d_prev, a, self.prev_actions, outcome.contact_count, n_new,
                             cfg.reward, success)
        reward = float(sum(terms[k] for k in REWARD_TERMS))
        self.distance = d_t
        self.prev_actions = a
        horizon = (not success) and self.step_count >= self.spec.max_episode_steps
        self.done = success or horizon
        graph = self._observe()
        info = self._info(d_t, d_prev - d_t, outcome.contact_count, n_new, success, torques,
                          tip_force, n_clamped)
        info.update(horizon=horizon, reward_terms=terms,
                    termination="success" if success else ("horizon" if horizon else None))
        self._record(step_index, info, reward, a)
        return StepResult(graph.agent_features.copy(), graph, reward, self.done, info)

    def _info(self, d_t, progress, contacts, n_new, success, torques, tip_force, n_clamped) -> dict:
        return {
            "distance": d_t,
            "progress": progress,
            "contact_count": int(contacts),
            "new_discoveries": int(n_new),
            "success": bool(success),
            "diverged": False,
            "horizon": False,
            "termination": None,
            "tip_position": self.rod.tip.copy(),
            "target": self.target.copy(),
            "applied_torques": torques,
            "tip_force": np.asarray(tip_force, dtype=float).copy(),
            "clamped_actions": n_clamped,
            "step": self.step_count,
        }

    def _record(self, step_index, info, reward, actions):
        if not self.record_trace:
            return
        self.trace.append({
            "step": step_index,
            "time": self.rod.time,
            "tip_position": info["tip_position"].tolist(),
            "distance": info["distance"],
            "reward": reward,
            "reward_terms": info.get("reward_terms", {}),
            "contact_count": info["contact_count"],
            "new_discoveries": info["new_discoveries"],
            "actions": np.asarray(actions).tolist(),
            "tip_force": info["tip_force"].tolist(),
            "termination": info["termination"],
        })

    def write_trace(self, path, extra: dict | None = None):
        with open(path, "w") as fh:
            for rec in self.trace:
                if extra:
                    rec = {**extra, **rec}
                fh.write(json.dumps(rec) + "\n")

