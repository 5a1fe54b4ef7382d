"""Episode metrics, robustness runs, ablations and attention dumps."""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from softgm import autodiff as ad
from softgm.env import PerturbationConfig, SoftArmEnv, StepResult
from softgm.errors import CheckpointError, ConfigError
from softgm.graph import NodeType
from softgm.policy import GatConfig, SoftGMPolicy

log = logging.getLogger(__name__)

__all__ = [
    "EpisodeRecord",
    "EvalReport",
    "run_episode",
    "evaluate",
    "policy_actor",
    "zero_actor",
    "constant_actor",
    "random_actor",
    "load_policy",
    "run_ablation",
    "dump_attention",
    "ABLATION_VARIANTS",
]

ABLATION_VARIANTS = ("full", "no-stage1", "no-stage2")


@dataclass
class EpisodeRecord:
    seed: int
    success: bool
    length: int
    tip_travel: float
    torque_magnitude: float
    final_distance: float
    episode_return: float
    termination: str | None


@dataclass
class EvalReport:
    scenario: str
    perturbation: str
    n_episodes: int
    success_rate: float
    success_std: float
    mean_episode_length: float
    episode_length_std: float
    mean_tip_travel: float
    tip_travel_std: float
    mean_torque_magnitude: float
    torque_magnitude_std: float
    seeds: list
    episodes: list = field(default_factory=list)
    config_hash: str | None = None
    variant: str | None = None

    @classmethod
    def from_episodes(cls, episodes, scenario: str, perturbation: str, config_hash=None,
                      variant=None) -> "EvalReport":
        if not episodes:
            raise ConfigError("an evaluation needs at least one episode")
        succ = np.array([e.success for e in episodes], dtype=float)
        length = np.array([e.length for e in episodes], dtype=float)
        travel = np.array([e.tip_travel for e in episodes])
        torque = np.array([e.torque_magnitude for e in episodes])
        return cls(
            scenario=scenario,
            perturbation=perturbation,
            n_episodes=len(episodes),
            success_rate=float(succ.mean()),
            success_std=float(succ.std()),
            mean_episode_length=float(length.mean()),
            episode_length_std=float(length.std()),
            mean_tip_travel=float(travel.mean()),
            tip_travel_std=float(travel.std()),
            mean_torque_magnitude=float(torque.mean()),
            torque_magnitude_std=float(torque.std()),
            seeds=[e.seed for e in episodes],
            episodes=list(episodes),
            config_hash=config_hash,
            variant=variant,
        )

    def to_dict(self) -> dict:
        out = asdict(self)
        out["episodes"] = [asdict(e) for e in self.episodes]
        return out

    def write(self, path_json, path_csv=None):
        Path(path_json).write_text(json.dumps(self.to_dict(), indent=2))
        if path_csv is not None:
            cols = list(EpisodeRecord.__dataclass_fields__)
            lines = [",".join(["config_hash"] + cols)]
            for e in self.episodes:
                row = asdict(e)
                lines.append(",".join([str(self.config_hash)] + [str(row[c]) for c in cols]))
            Path(path_csv).write_text("\n".join(lines) + "\n")


def run_episode(env: SoftArmEnv, actor: Callable[[StepResult], np.ndarray], seed: int,
                perturbation: PerturbationConfig | None = None) -> EpisodeRecord:
    """Play one episode to termination and compute its metrics."""
    res = env.reset(seed=seed, perturbation=perturbation)
    tip_prev = res.info["tip_position"]
    travel = 0.0
    torque_sum = 0.0
    total = 0.0
    steps = 0
    while not res.done:
        res = env.step(actor(res))
        steps += 1
        total += res.reward
        tip = res.info["tip_position"]
        travel += float(np.linalg.norm(tip - tip_prev))
        tip_prev = tip
        torque_sum += float(np.linalg.norm(res.info["applied_torques"], axis=1).sum())
    return EpisodeRecord(
        seed=int(seed),
        success=bool(res.info["success"]),
        length=steps,
        tip_travel=travel,
        torque_magnitude=torque_sum / (steps * env.n_agents) if steps else 0.0,
        final_distance=float(res.info["distance"]),
        episode_return=total,
        termination=res.info["termination"],
    )


def policy_actor(policy: SoftGMPolicy) -> Callable:
    """Deterministic actor: a = tanh(mean)."""
    def act(res: StepResult):
        return policy.act(res.graph, res.per_agent_observations, deterministic=True).actions
    return act


def zero_actor(res: StepResult) -> np.ndarray:
    return np.zeros((res.graph.n_agents, 2))


def constant_actor(value: float = 1.0) -> Callable:
    def act(res: StepResult):
        return np.full((res.graph.n_agents, 2), value)
    return act


def random_actor(seed: int = 0) -> Callable:
    rng = np.random.default_rng(seed)

    def act(res: StepResult):
        return rng.uniform(-1.0, 1.0, (res.graph.n_agents, 2))
    return act


def evaluate(actor: Callable, make_env: Callable[[int], SoftArmEnv], n_episodes: int,
             perturbation: PerturbationConfig | None = None, seed: int = 0, scenario: str = "",
             config_hash: str | None = None, variant: str | None = None) -> EvalReport:
    """Run ``n_episodes`` episodes with seeds ``seed, seed + 1, ...``.

    Each episode builds a fresh environment from its own seed so layouts that
    depend on the seed (the wall hole) vary across episodes.
    """
    if n_episodes < 1:
        raise ConfigError("n_episodes must be at least 1")
    perturbation = perturbation or PerturbationConfig()
    episodes = []
    for m in range(n_episodes):
        s = seed + m
        env = make_env(s)
        episodes.append(run_episode(env, actor, s, perturbation))
        scenario = scenario or env.spec.kind.value
    return EvalReport.from_episodes(episodes, scenario, perturbation.name, config_hash, variant)


def load_policy(checkpoint, expected_hash: str | None = None) -> SoftGMPolicy:
    """Rebuild a policy from a checkpoint, refusing one trained under a different config."""
    manifest = ad.read_manifest(checkpoint)
    if expected_hash is not None and manifest.get("config_hash") != expected_hash:
        raise CheckpointError(
            f"checkpoint {checkpoint} was written for config hash {manifest.get('config_hash')}, "
            f"but the requested config hashes to {expected_hash}; pass the run's own config")
    gat = manifest.get("hyperparameters", {}).get("gat")
    if gat is None:
        raise CheckpointError(f"checkpoint {checkpoint} carries no network configuration")
    policy = SoftGMPolicy(GatConfig(**gat), seed=0)
    ad.load_checkpoint(checkpoint, policy.params)
    return policy


def run_ablation(variant: str, make_env: Callable, train_cfg, out_dir=None, eval_episodes: int = 50,
                 eval_seed: int = 10_000, config_hash: str | None = None, gat_kwargs: dict | None = None):
    """Train and evaluate one network variant; returns (trainer, final report)."""
    from softgm.trainer import train

    gat_cfg = GatConfig.variant(variant, **(gat_kwargs or {}))
    out = Path(out_dir) / gat_cfg.variant_name if out_dir is not None else None

    def periodic(policy):
        n = train_cfg.eval_episodes
        return evaluate(policy_actor(policy), make_env, n, seed=eval_seed).success_rate

    trainer = train(train_cfg, make_env, gat_cfg, out, config_hash, periodic)
    report = evaluate(policy_actor(trainer.policy), make_env, eval_episodes, seed=eval_seed,
                      config_hash=config_hash, variant=gat_cfg.variant_name)
    if out is not None:
        report.write(out / "report.json", out / "report.csv")
    return trainer, report


def dump_attention(policy: SoftGMPolicy, env: SoftArmEnv, seed: int, path, config_hash: str | None = None,
                   perturbation: PerturbationConfig | None = None) -> int:
    """Replay one deterministic episode and write every attention matrix as JSON lines.

    Each line holds one (step, stage, layer, head) matrix over the non-PAD
    nodes of that step, with their original indices and types.  Returns the
    number of lines written.
    """
    res = env.reset(seed=seed, perturbation=perturbation)
    lines = 0
    with open(path, "w") as fh:
        step = 0
        while True:
            out = policy.act(res.graph, res.per_agent_observations, deterministic=True, record=True)
            idx = out.node_index
            types = [NodeType(t).name for t in res.graph.node_types[idx]]
            for rec in out.attention_records:
                alpha = rec["alpha"]
                for head in range(alpha.shape[0]):
                    fh.write(json.dumps({
                        "step": step,
                        "stage": rec["stage"],
                        "layer": rec["layer"],
                        "head": head,
                        "node_index": idx.tolist(),
                        "node_types": types,
                        "matrix": alpha[head].tolist(),
                        "config_hash": config_hash,
                    }) + "\n")
                    lines += 1
            if res.done:
                break
            res = env.step(out.actions)
            step += 1
    return lines
