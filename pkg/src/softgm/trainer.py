"""On-policy PPO with a shared actor and a pooled critic.

Rollouts come from ``n_workers`` independent environments stepped in lockstep;
the policy forward for all workers is one batched call on the current
parameters, so the result does not depend on thread scheduling.  Physics steps
can run on a thread pool (the rod kernels release the GIL).
"""

from __future__ import annotations

import csv
import json
import logging
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from softgm import autodiff as ad
from softgm.errors import ConfigError, NumericalError, SoftGMError
from softgm.policy import GatConfig, SoftGMPolicy, batch_graphs

log = logging.getLogger(__name__)

__all__ = [
    "TrainConfig",
    "RolloutBatch",
    "RunningMeanStd",
    "TrainingDivergedError",
    "METRIC_COLUMNS",
    "compute_gae",
    "normalize_advantages",
    "ppo_loss",
    "ppo_update",
    "RolloutCollector",
    "Trainer",
    "train",
]

METRIC_COLUMNS = (
    "update",
    "env_steps",
    "mean_episodic_reward",
    "eval_success_rate",
    "mean_episode_length",
    "policy_loss",
    "value_loss",
    "entropy",
    "clip_fraction",
    "wall_time_s",
)


class TrainingDivergedError(SoftGMError):
    """The simulator kept blowing up; a diagnostic file was written."""


@dataclass(frozen=True)
class TrainConfig:
    gamma: float = 0.99
    gae_lambda: float = 0.95
    clip_epsilon: float = 0.2
    entropy_coef: float = 0.05
    value_coef: float = 0.5
    actor_lr: float = 1e-4
    critic_lr: float = 3e-4
    trunk_lr_group: str = "critic"
    max_grad_norm: float = 0.5
    rollout_steps: int = 2048
    minibatch_size: int = 256
    ppo_epochs: int = 4
    n_workers: int = 8
    n_threads: int = 1
    total_updates: int = 100
    eval_every: int = 10
    eval_episodes: int = 10
    normalize_values: bool = True
    bootstrap_truncated: bool = True
    log_std_min: float = -5.0
    log_std_max: float = 1.0
    max_divergences_per_update: int = 50
    log_wall_time: bool = True
    seed: int = 0

    def __post_init__(self):
        if not 0 < self.gamma <= 1:
            raise ConfigError("gamma must lie in (0, 1]")
        if not 0 <= self.gae_lambda <= 1:
            raise ConfigError("gae_lambda must lie in [0, 1]")
        if not self.clip_epsilon > 0:
            raise ConfigError("clip_epsilon must be positive")
        for name in ("actor_lr", "critic_lr", "max_grad_norm"):
            if not getattr(self, name) > 0:
                raise ConfigError(f"{name} must be positive")
        for name in ("rollout_steps", "minibatch_size", "ppo_epochs", "n_workers", "n_threads",
                     "eval_every", "eval_episodes"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be at least 1")
        if self.total_updates < 0:
            raise ConfigError("total_updates must be non-negative")
        if self.rollout_steps % self.n_workers:
            raise ConfigError("rollout_steps must be a multiple of n_workers")
        if self.trunk_lr_group not in ("actor", "critic"):
            raise ConfigError("trunk_lr_group must be 'actor' or 'critic'")
        if self.log_std_min >= self.log_std_max:
            raise ConfigError("log_std_min must be below log_std_max")

    @property
    def steps_per_worker(self) -> int:
        return self.rollout_steps // self.n_workers


def compute_gae(rewards, values, dones, gamma: float, lam: float):
    """Generalised advantage estimates and returns.

    ``rewards`` and ``dones`` have T leading entries, ``values`` has T + 1 (the
    last row bootstraps the step after the rollout).  ``dones[t]`` cuts the
    recursion after step t.  Extra trailing axes are treated as independent
    sequences.
    """
    r = np.asarray(rewards, dtype=float)
    v = np.asarray(values, dtype=float)
    d = np.asarray(dones, dtype=float)
    if v.shape[0] != r.shape[0] + 1 or d.shape != r.shape or v.shape[1:] != r.shape[1:]:
        raise ConfigError(f"GAE shapes do not line up: rewards {r.shape}, values {v.shape}, dones {d.shape}")
    adv = np.zeros_like(r)
    running = np.zeros(r.shape[1:])
    for t in range(r.shape[0] - 1, -1, -1):
        live = 1.0 - d[t]
        delta = r[t] + gamma * v[t + 1] * live - v[t]
        running = delta + gamma * lam * live * running
        adv[t] = running
    return adv, adv + v[:-1]


def normalize_advantages(adv) -> np.ndarray:
    adv = np.asarray(adv, dtype=float)
    std = adv.std()
    return (adv - adv.mean()) / (std + 1e-8)


class RunningMeanStd:
    """Streaming mean and variance (parallel Welford merge)."""

    def __init__(self):
        self.mean = 0.0
        self.var = 1.0
        self.count = 1e-4

    def update(self, x):
        x = np.asarray(x, dtype=float).ravel()
        if x.size == 0:
            return
        b_mean, b_var, b_n = x.mean(), x.var(), x.size
        total = self.count + b_n
        delta = b_mean - self.mean
        self.mean += delta * b_n / total
        m2 = self.var * self.count + b_var * b_n + delta**2 * self.count * b_n / total
        self.var = m2 / total
        self.count = total

    @property
    def std(self) -> float:
        return math.sqrt(max(self.var, 1e-8))

    def state(self) -> dict:
        return {"mean": self.mean, "var": self.var, "count": self.count}


@dataclass
class RolloutBatch:
    graphs: list            # S graph observations (time-major: t * W + w)
    agent_obs: np.ndarray   # (S, N, 22)
    pre_squash: np.ndarray  # (S, N, 2)
    actions: np.ndarray     # (S, N, 2)
    old_log_probs: np.ndarray   # (S, N) Gaussian part, used for ratios
    rewards: np.ndarray     # (T, W)
    values: np.ndarray      # (T + 1, W) in return units
    dones: np.ndarray       # (T, W)
    advantages: np.ndarray | None = None
    returns: np.ndarray | None = None
    episode_returns: list = field(default_factory=list)
    episode_lengths: list = field(default_factory=list)
    n_divergences: int = 0

    @property
    def size(self) -> int:
        return len(self.graphs)


def ppo_loss(policy: SoftGMPolicy, batch_graphs_, pre_squash, old_log_probs, advantages, value_targets,
             cfg: TrainConfig):
    """Total loss tensor plus scalar diagnostics for one minibatch."""
    logp, value, entropy = policy.evaluate(batch_graphs_, pre_squash)
    ratio = ad.exp(ad.sub(logp, old_log_probs))
    adv = np.asarray(advantages, dtype=float)[:, None]
    unclipped = ad.mul(ratio, adv)
    clipped = ad.mul(ad.clip(ratio, 1.0 - cfg.clip_epsilon, 1.0 + cfg.clip_epsilon), adv)
    policy_loss = ad.neg(ad.reduce_mean(ad.minimum(unclipped, clipped)))
    value_loss = ad.reduce_mean(ad.square(ad.sub(value, np.asarray(value_targets, dtype=float))))
    total = ad.add(ad.sub(policy_loss, ad.mul(entropy, cfg.entropy_coef)), ad.mul(value_loss, cfg.value_coef))
    stats = {
        "policy_loss": float(policy_loss.value),
        "value_loss": float(value_loss.value),
        "entropy": float(entropy.value),
        "clip_fraction": float(np.mean(np.abs(ratio.value - 1.0) > cfg.clip_epsilon)),
        "approx_kl": float(np.mean(np.asarray(old_log_probs) - logp.value)),
    }
    return total, stats


def ppo_update(policy: SoftGMPolicy, optimizer: ad.Adam, batch: RolloutBatch, cfg: TrainConfig,
               rng: np.random.Generator, value_stats: RunningMeanStd | None = None) -> dict:
    """Run ``ppo_epochs`` passes of shuffled minibatch updates; returns averaged stats."""
    if batch.advantages is None:
        raise ConfigError("compute advantages before calling ppo_update")
    adv = normalize_advantages(batch.advantages.ravel())
    targets = batch.returns.ravel()
    if value_stats is not None:
        targets = (targets - value_stats.mean) / value_stats.std
    n = batch.size
    mb = min(cfg.minibatch_size, n)
    log_std = policy.params["actor.log_std"]
    sums: dict = {}
    count = 0
    skipped = 0
    first_epoch_clip = []
    for epoch in range(cfg.ppo_epochs):
        order = rng.permutation(n)
        for start in range(0, n, mb):
            idx = order[start: start + mb]
            gb = batch_graphs([batch.graphs[i] for i in idx], batch.agent_obs[idx])
            policy.params.zero_grad()
            try:
                loss, stats = ppo_loss(policy, gb, batch.pre_squash[idx], batch.old_log_probs[idx],
                                       adv[idx], targets[idx], cfg)
                loss.backward()
            except NumericalError as exc:
                log.warning("non-finite loss, minibatch skipped: %s", exc)
                skipped += 1
                continue
            step = optimizer.step()
            if step["skipped"]:
                skipped += 1
                continue
            log_std.value = np.clip(log_std.value, cfg.log_std_min, cfg.log_std_max)
            stats["grad_norm"] = step["grad_norm"]
            if epoch == 0:
                first_epoch_clip.append(stats["clip_fraction"])
            for k, v in stats.items():
                sums[k] = sums.get(k, 0.0) + v
            count += 1
    out = {k: v / count for k, v in sums.items()} if count else {
        k: float("nan") for k in ("policy_loss", "value_loss", "entropy", "clip_fraction", "grad_norm")}
    out["skipped_minibatches"] = skipped
    out["first_minibatch_clip_fraction"] = first_epoch_clip[0] if first_epoch_clip else float("nan")
    return out


class RolloutCollector:
    """Lockstep rollouts over a fixed set of environments."""

    def __init__(self, make_env: Callable, n_workers: int, seed: int, n_threads: int = 1):
        seqs = np.random.SeedSequence(seed).spawn(n_workers + 1)
        self.envs = [make_env(int(s.generate_state(1)[0])) for s in seqs[:n_workers]]
        self.action_rng = np.random.default_rng(seqs[-1])
        self.pool = ThreadPoolExecutor(n_threads) if n_threads > 1 else None
        self.current = [env.reset() for env in self.envs]
        self.ep_return = np.zeros(n_workers)
        self.ep_length = np.zeros(n_workers, dtype=int)

    @property
    def n_workers(self) -> int:
        return len(self.envs)

    def close(self):
        if self.pool is not None:
            self.pool.shutdown()

    def _step_all(self, actions):
        if self.pool is None:
            return [env.step(a) for env, a in zip(self.envs, actions)]
        return list(self.pool.map(lambda ea: ea[0].step(ea[1]), zip(self.envs, actions)))

    def collect(self, policy: SoftGMPolicy, n_steps: int, cfg: TrainConfig,
                value_stats: RunningMeanStd | None = None) -> RolloutBatch:
        w = self.n_workers
        n = self.envs[0].n_agents
        scale = (value_stats.std, value_stats.mean) if value_stats is not None else (1.0, 0.0)
        graphs, obs, zs, acts, logps = [], [], [], [], []
        rewards = np.zeros((n_steps, w))
        values = np.zeros((n_steps + 1, w))
        dones = np.zeros((n_steps, w))
        episode_returns, episode_lengths = [], []
        n_div = 0
        for t in range(n_steps):
            step_graphs = [r.graph for r in self.current]
            step_obs = np.stack([r.per_agent_observations for r in self.current])
            out = policy.act_batch(step_graphs, step_obs, rng=self.action_rng)
            values[t] = out.value * scale[0] + scale[1]
            graphs.extend(step_graphs)
            obs.append(step_obs)
            zs.append(out.pre_squash)
            acts.append(out.actions)
            logps.append(out.gaussian_log_probs)
            results = self._step_all(out.actions)
            truncated = []
            for i, res in enumerate(results):
                rewards[t, i] = res.reward
                self.ep_return[i] += res.reward
                self.ep_length[i] += 1
                if res.done:
                    dones[t, i] = 1.0
                    if res.info.get("diverged"):
                        n_div += 1
                    if res.info.get("horizon") and cfg.bootstrap_truncated:
                        truncated.append((i, res.graph, res.per_agent_observations))
                    episode_returns.append(float(self.ep_return[i]))
                    episode_lengths.append(int(self.ep_length[i]))
                    self.ep_return[i] = 0.0
                    self.ep_length[i] = 0
                    res = self.envs[i].reset()
                results[i] = res
            if truncated:
                tail = policy.act_batch([g for _, g, _ in truncated], np.stack([o for _, _, o in truncated]),
                                        deterministic=True)
                for (i, _, _), v in zip(truncated, tail.value):
                    rewards[t, i] += cfg.gamma * (v * scale[0] + scale[1])
            self.current = results
        last = policy.act_batch([r.graph for r in self.current],
                                np.stack([r.per_agent_observations for r in self.current]), deterministic=True)
        values[n_steps] = last.value * scale[0] + scale[1]
        return RolloutBatch(
            graphs=graphs,
            agent_obs=np.concatenate(obs).reshape(-1, n, obs[0].shape[-1]),
            pre_squash=np.concatenate(zs).reshape(-1, n, 2),
            actions=np.concatenate(acts).reshape(-1, n, 2),
            old_log_probs=np.concatenate(logps).reshape(-1, n),
            rewards=rewards,
            values=values,
            dones=dones,
            episode_returns=episode_returns,
            episode_lengths=episode_lengths,
            n_divergences=n_div,
        )


def _fmt(x) -> str:
    if x is None:
        return "nan"
    return repr(float(x))


class Trainer:
    """Owns the parameters, optimiser and rollout workers for one run."""

    def __init__(self, cfg: TrainConfig, make_env: Callable, gat_cfg: GatConfig | None = None,
                 out_dir=None, config_hash: str | None = None, eval_fn: Callable | None = None,
                 hyperparameters: dict | None = None):
        self.cfg = cfg
        self.make_env = make_env
        self.gat_cfg = gat_cfg or GatConfig()
        seqs = np.random.SeedSequence(cfg.seed).spawn(3)
        self.policy = SoftGMPolicy(self.gat_cfg, seed=int(seqs[0].generate_state(1)[0]))
        self.update_rng = np.random.default_rng(seqs[1])
        self.worker_seed = int(seqs[2].generate_state(1)[0])
        groups = self.policy.param_groups(cfg.trunk_lr_group)
        lrs = {name: (cfg.actor_lr if g == "actor" else cfg.critic_lr) for name, g in groups.items()}
        self.optimizer = ad.Adam(self.policy.params, lr=lrs, clip_norm=cfg.max_grad_norm)
        self.value_stats = RunningMeanStd() if cfg.normalize_values else None
        self.out_dir = Path(out_dir) if out_dir is not None else None
        self.config_hash = config_hash
        self.eval_fn = eval_fn
        self.hyperparameters = hyperparameters or {}
        self.rows: list = []
        self.env_steps = 0

    def _checkpoint(self, tag: str):
        if self.out_dir is None:
            return None
        hp = {"gat": asdict(self.gat_cfg), "train": asdict(self.cfg), **self.hyperparameters}
        extra = {"update": tag, "env_steps": self.env_steps,
                 "value_stats": self.value_stats.state() if self.value_stats else None}
        return ad.save_checkpoint(self.out_dir / "checkpoints" / tag, self.policy.params, hp,
                                  self.config_hash, extra)

    def _evaluate(self) -> float:
        if self.eval_fn is None:
            return float("nan")
        return float(self.eval_fn(self.policy))

    def _write_row(self, row: dict):
        self.rows.append(row)
        if self.out_dir is None:
            return
        path = self.out_dir / "metrics.csv"
        new = not path.exists()
        with open(path, "a", newline="") as fh:
            writer = csv.writer(fh)
            if new:
                writer.writerow(METRIC_COLUMNS)
            writer.writerow([row["update"], row["env_steps"]] + [_fmt(row[c]) for c in METRIC_COLUMNS[2:]])

    def run(self) -> list:
        cfg = self.cfg
        if self.out_dir is not None:
            self.out_dir.mkdir(parents=True, exist_ok=True)
            metrics = self.out_dir / "metrics.csv"
            if metrics.exists():
                metrics.unlink()
        t0 = time.perf_counter()

        def wall():
            return time.perf_counter() - t0 if cfg.log_wall_time else 0.0

        nan = float("nan")
        self._write_row({"update": 0, "env_steps": 0, "mean_episodic_reward": nan,
                         "eval_success_rate": self._evaluate(), "mean_episode_length": nan,
                         "policy_loss": nan, "value_loss": nan, "entropy": nan, "clip_fraction": nan,
                         "wall_time_s": wall()})
        self._checkpoint("update_00000")
        if cfg.total_updates == 0:
            return self.rows
        collector = RolloutCollector(self.make_env, cfg.n_workers, self.worker_seed, cfg.n_threads)
        try:
            for update in range(1, cfg.total_updates + 1):
                batch = collector.collect(self.policy, cfg.steps_per_worker, cfg, self.value_stats)
                self.env_steps += batch.rewards.size
                if batch.n_divergences > cfg.max_divergences_per_update:
                    self._diagnose(update, batch)
                adv, ret = compute_gae(batch.rewards, batch.values, batch.dones, cfg.gamma, cfg.gae_lambda)
                batch.advantages, batch.returns = adv, ret
                if self.value_stats is not None:
                    self.value_stats.update(ret)
                stats = ppo_update(self.policy, self.optimizer, batch, cfg, self.update_rng, self.value_stats)
                evaluate_now = update % cfg.eval_every == 0 or update == cfg.total_updates
                sr = self._evaluate() if evaluate_now else nan
                row = {
                    "update": update,
                    "env_steps": self.env_steps,
                    "mean_episodic_reward": float(np.mean(batch.episode_returns)) if batch.episode_returns else nan,
                    "eval_success_rate": sr,
                    "mean_episode_length": float(np.mean(batch.episode_lengths)) if batch.episode_lengths else nan,
                    "wall_time_s": wall(),
                }
                row.update({k: stats[k] for k in ("policy_loss", "value_loss", "entropy", "clip_fraction")})
                self._write_row(row)
                if evaluate_now:
                    self._checkpoint(f"update_{update:05d}")
                log.info("update %d steps %d reward %.3f sr %s clip %.3f", update, self.env_steps,
                         row["mean_episodic_reward"], sr, stats["clip_fraction"])
        finally:
            collector.close()
        self._checkpoint("final")
        return self.rows

    def _diagnose(self, update: int, batch: RolloutBatch):
        info = {"update": update, "n_divergences": batch.n_divergences,
                "limit": self.cfg.max_divergences_per_update,
                "param_digest": self.policy.params.digest(),
                "log_std": self.policy.params["actor.log_std"].value.tolist()}
        if self.out_dir is not None:
            (self.out_dir / "divergence_diagnostics.json").write_text(json.dumps(info, indent=2))
        raise TrainingDivergedError(
            f"{batch.n_divergences} simulator divergences in update {update}; "
            "reduce dt_physics or torque limits (details in divergence_diagnostics.json)")


def train(cfg: TrainConfig, make_env: Callable, gat_cfg: GatConfig | None = None, out_dir=None,
          config_hash: str | None = None, eval_fn: Callable | None = None,
          hyperparameters: dict | None = None) -> Trainer:
    trainer = Trainer(cfg, make_env, gat_cfg, out_dir, config_hash, eval_fn, hyperparameters)
    trainer.run()
    return trainer
