"""Graph-attention actor-critic for the segmented arm.

Nodes are embedded from their features plus a learned type vector, then passed
through two stacks of masked multi-head attention: the first only lets sensed
obstacle segments talk to agents, the second lets neighbouring agents talk to
each other.  A single actor head (shared by every agent) reads each agent's
own observation and final embedding; the critic reads the mean agent embedding.

PAD nodes are dropped before the forward pass.  Because every mask row of a
PAD node is its own self-loop and no other row attends to it, this changes no
agent output and keeps single-graph results bit-identical with or without
padding.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from softgm import autodiff as ad
from softgm.errors import ConfigError, ShapeError
from softgm.graph import FEATURE_DIM, GraphObservation, NodeType

__all__ = [
    "GatConfig",
    "GraphBatch",
    "PolicyOutput",
    "SoftGMPolicy",
    "batch_graphs",
    "init_params",
    "embed_nodes",
    "attention_layer",
    "two_stage_forward",
    "actor_forward",
    "critic_forward",
    "gaussian_log_prob",
    "squash_correction",
    "gaussian_entropy",
]

N_TYPES = len(NodeType)
ACTION_DIM = 2
LOG_2PI = math.log(2.0 * math.pi)


@dataclass(frozen=True)
class GatConfig:
    hidden_dim: int = 128
    n_heads: int = 4
    layers_per_stage: int = 2
    type_embed_dim: int = 8
    leaky_relu_slope: float = 0.2
    head_hidden_dim: int = 128
    init_log_std: float = math.log(0.5)
    use_stage1: bool = True
    use_stage2: bool = True

    def __post_init__(self):
        if self.hidden_dim <= 0 or self.n_heads <= 0:
            raise ConfigError("hidden_dim and n_heads must be positive")
        if self.hidden_dim % self.n_heads:
            raise ConfigError(f"hidden_dim {self.hidden_dim} is not divisible by n_heads {self.n_heads}")
        if self.layers_per_stage < 0 or self.type_embed_dim < 0 or self.head_hidden_dim <= 0:
            raise ConfigError("layer counts and widths must be non-negative")
        if not 0 <= self.leaky_relu_slope < 1:
            raise ConfigError("leaky_relu_slope must lie in [0, 1)")

    @property
    def head_dim(self) -> int:
        return self.hidden_dim // self.n_heads

    @property
    def stages(self) -> tuple:
        out = []
        if self.use_stage1:
            out.append(1)
        if self.use_stage2:
            out.append(2)
        return tuple(out)

    @classmethod
    def variant(cls, name: str, **kwargs) -> "GatConfig":
        key = name.strip().lower().replace("_", "-")
        if key in ("full", ""):
            return cls(**kwargs)
        if key in ("no-stage1", "nostage1"):
            return cls(use_stage1=False, **kwargs)
        if key in ("no-stage2", "nostage2"):
            return cls(use_stage2=False, **kwargs)
        raise ConfigError(f"unknown ablation variant {name!r}; expected full, no-stage1 or no-stage2")

    @property
    def variant_name(self) -> str:
        if self.use_stage1 and self.use_stage2:
            return "full"
        if not self.use_stage1 and self.use_stage2:
            return "no-stage1"
        if self.use_stage1 and not self.use_stage2:
            return "no-stage2"
        return "no-attention"


@dataclass
class GraphBatch:
    features: np.ndarray    # (B, V, 22)
    types: np.ndarray       # (B, V)
    stage1: np.ndarray      # (B, V, V) bool
    stage2: np.ndarray      # (B, V, V) bool
    agent_obs: np.ndarray   # (B, N, 22)
    n_agents: int
    node_index: np.ndarray  # (V,) original node index of each kept column

    @property
    def size(self) -> int:
        return self.features.shape[0]


def batch_graphs(graphs, agent_obs=None) -> GraphBatch:
    """Stack graphs of equal node budget, keeping only nodes that are non-PAD in some graph."""
    graphs = list(graphs)
    if not graphs:
        raise ShapeError("cannot batch an empty list of graphs")
    n = graphs[0].n_agents
    v = graphs[0].n_nodes
    for g in graphs:
        if g.n_agents != n or g.n_nodes != v:
            raise ShapeError("all graphs in a batch need the same agent count and node budget")
    types = np.stack([g.node_types for g in graphs])
    keep = np.flatnonzero((types != NodeType.PAD).any(axis=0))
    ix = np.ix_(keep, keep)
    features = np.stack([g.node_features[keep] for g in graphs])
    stage1 = np.stack([g.stage1_mask[ix] for g in graphs])
    stage2 = np.stack([g.stage2_mask[ix] for g in graphs])
    if agent_obs is None:
        obs = np.stack([g.node_features[:n] for g in graphs])
    else:
        obs = np.asarray(agent_obs, dtype=float).reshape(len(graphs), n, FEATURE_DIM)
    return GraphBatch(features, types[:, keep], stage1, stage2, obs, n, keep)


def _glorot(rng, fan_in, fan_out, shape=None, gain=1.0):
    limit = gain * math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape or (fan_in, fan_out))


def init_params(cfg: GatConfig, seed: int = 0) -> ad.ParamStore:
    rng = np.random.default_rng(seed)
    p = ad.ParamStore()
    d, dh, hh = cfg.hidden_dim, cfg.head_dim, cfg.head_hidden_dim
    p.add("embed.type", rng.normal(0.0, 1.0, (N_TYPES, cfg.type_embed_dim)))
    p.add("embed.w_in", _glorot(rng, FEATURE_DIM + cfg.type_embed_dim, d))
    for stage in cfg.stages:
        for layer in range(cfg.layers_per_stage):
            pre = f"stage{stage}.layer{layer}"
            p.add(f"{pre}.w", _glorot(rng, d, d))
            p.add(f"{pre}.a_dst", _glorot(rng, dh, 1, (cfg.n_heads, dh)))
            p.add(f"{pre}.a_src", _glorot(rng, dh, 1, (cfg.n_heads, dh)))
    p.add("actor.w1", _glorot(rng, FEATURE_DIM + d, hh))
    p.add("actor.b1", np.zeros(hh))
    p.add("actor.w2", _glorot(rng, hh, hh))
    p.add("actor.b2", np.zeros(hh))
    p.add("actor.w3", _glorot(rng, hh, ACTION_DIM, gain=0.01))
    p.add("actor.b3", np.zeros(ACTION_DIM))
    p.add("actor.log_std", np.full(ACTION_DIM, cfg.init_log_std))
    p.add("critic.w1", _glorot(rng, d, hh))
    p.add("critic.b1", np.zeros(hh))
    p.add("critic.w2", _glorot(rng, hh, hh))
    p.add("critic.b2", np.zeros(hh))
    p.add("critic.w3", _glorot(rng, hh, 1))
    p.add("critic.b3", np.zeros(1))
    return p


def embed_nodes(features, types, params: ad.ParamStore) -> ad.Tensor:
    """Project ``[x_v, type_embedding(v)]`` to the hidden width (no bias)."""
    feats = ad.constant(features)
    type_vec = ad.gather_rows(params["embed.type"], np.asarray(types, dtype=int))
    return ad.matmul(ad.concat([feats, type_vec], axis=-1), params["embed.w_in"])


def attention_layer(h: ad.Tensor, mask, w: ad.Tensor, a_dst: ad.Tensor, a_src: ad.Tensor,
                    n_heads: int, slope: float = 0.2):
    """One masked multi-head attention layer with a residual connection.

    ``h`` is (..., V, D); ``mask[..., i, j]`` allows node ``j`` to send to ``i``.
    Returns the new embeddings and the attention weights (..., H, V, V).
    """
    lead = h.shape[:-2]
    v, d = h.shape[-2], h.shape[-1]
    dh = d // n_heads
    u = ad.reshape(ad.matmul(h, w), lead + (v, n_heads, dh))
    nl = len(lead)
    # (..., H, V, dh)
    u = ad.transpose(u, tuple(range(nl)) + (nl + 1, nl, nl + 2))
    s_dst = ad.reduce_sum(ad.mul(u, ad.reshape(a_dst, (n_heads, 1, dh))), axis=-1)
    s_src = ad.reduce_sum(ad.mul(u, ad.reshape(a_src, (n_heads, 1, dh))), axis=-1)
    scores = ad.add(ad.reshape(s_dst, lead + (n_heads, v, 1)), ad.reshape(s_src, lead + (n_heads, 1, v)))
    scores = ad.leaky_relu(scores, slope)
    mask = np.asarray(mask, dtype=bool)
    alpha = ad.masked_softmax(scores, np.expand_dims(mask, -3), axis=-1)
    m = ad.matmul(alpha, u)
    m = ad.reshape(ad.transpose(m, tuple(range(nl)) + (nl + 1, nl, nl + 2)), lead + (v, d))
    return ad.add(h, ad.leaky_relu(m, slope)), alpha


def two_stage_forward(features, types, stage1_mask, stage2_mask, n_agents: int,
                      params: ad.ParamStore, cfg: GatConfig, record: bool = False):
    """Embeddings of every node after both attention stages, and optional attention records."""
    h = embed_nodes(features, types, params)
    records = []
    masks = {1: stage1_mask, 2: stage2_mask}
    for stage in cfg.stages:
        for layer in range(cfg.layers_per_stage):
            pre = f"stage{stage}.layer{layer}"
            h, alpha = attention_layer(h, masks[stage], params[f"{pre}.w"], params[f"{pre}.a_dst"],
                                       params[f"{pre}.a_src"], cfg.n_heads, cfg.leaky_relu_slope)
            if record:
                records.append({"stage": stage, "layer": layer, "alpha": alpha.value})
    return h, records


def _agent_rows(h: ad.Tensor, n_agents: int) -> ad.Tensor:
    if h.ndim == 2:
        return h[:n_agents]
    return h[:, :n_agents]


def _mlp(x, params, prefix):
    x = ad.tanh(ad.add(ad.matmul(x, params[f"{prefix}.w1"]), params[f"{prefix}.b1"]))
    x = ad.tanh(ad.add(ad.matmul(x, params[f"{prefix}.w2"]), params[f"{prefix}.b2"]))
    return ad.add(ad.matmul(x, params[f"{prefix}.w3"]), params[f"{prefix}.b3"])


def actor_means(agent_obs, g: ad.Tensor, params: ad.ParamStore) -> ad.Tensor:
    return _mlp(ad.concat([ad.constant(agent_obs), g], axis=-1), params, "actor")


def critic_value(g: ad.Tensor, params: ad.ParamStore) -> ad.Tensor:
    pooled = ad.reduce_mean(g, axis=-2, keepdims=True)
    out = _mlp(pooled, params, "critic")
    return ad.reshape(out, out.shape[:-2])


def gaussian_log_prob(mu: ad.Tensor, log_std: ad.Tensor, z) -> ad.Tensor:
    """Diagonal Gaussian log density of ``z``, summed over the action dimension."""
    inv_std = ad.exp(ad.neg(log_std))
    scaled = ad.mul(ad.sub(ad.constant(z), mu), inv_std)
    per_dim = ad.sub(ad.mul(ad.square(scaled), -0.5), ad.add(log_std, 0.5 * LOG_2PI))
    return ad.reduce_sum(per_dim, axis=-1)


def squash_correction(z) -> np.ndarray:
    """``sum_d log(1 - tanh(z_d)^2 + 1e-6)``; subtract from the Gaussian term."""
    a = np.tanh(np.asarray(z, dtype=float))
    return np.log(1.0 - a * a + 1e-6).sum(axis=-1)


def gaussian_entropy(log_std: ad.Tensor) -> ad.Tensor:
    """Entropy of the pre-squash Gaussian for one agent (the squash term is ignored)."""
    return ad.reduce_sum(ad.add(log_std, 0.5 * (LOG_2PI + 1.0)))


@dataclass
class PolicyOutput:
    means: np.ndarray
    log_std: np.ndarray
    pre_squash: np.ndarray
    actions: np.ndarray
    log_probs: np.ndarray
    value: np.ndarray
    agent_embeddings: np.ndarray
    attention_records: list = field(default_factory=list)
    node_index: np.ndarray | None = None
    gaussian_log_probs: np.ndarray | None = None


def actor_forward(graph: GraphObservation, agent_obs, params: ad.ParamStore, cfg: GatConfig,
                  rng: np.random.Generator | None = None, deterministic: bool = False,
                  record: bool = False) -> PolicyOutput:
    """Act for one graph; sampling needs ``rng`` unless ``deterministic`` is set."""
    return _forward_batch(batch_graphs([graph], None if agent_obs is None else [agent_obs]),
                          params, cfg, rng, deterministic, record, squeeze=True)


def critic_forward(graph: GraphObservation, params: ad.ParamStore, cfg: GatConfig) -> float:
    batch = batch_graphs([graph])
    with ad.no_grad():
        h, _ = two_stage_forward(batch.features[0], batch.types[0], batch.stage1[0], batch.stage2[0],
                                 batch.n_agents, params, cfg)
        return float(critic_value(_agent_rows(h, batch.n_agents), params).value)


def _forward_batch(batch: GraphBatch, params, cfg, rng, deterministic, record, squeeze=False):
    if not deterministic and rng is None:
        raise ValueError("a random generator is required for stochastic actions")
    with ad.no_grad():
        if squeeze:
            h, records = two_stage_forward(batch.features[0], batch.types[0], batch.stage1[0],
                                           batch.stage2[0], batch.n_agents, params, cfg, record)
            obs = batch.agent_obs[0]
        else:
            h, records = two_stage_forward(batch.features, batch.types, batch.stage1, batch.stage2,
                                           batch.n_agents, params, cfg, record)
            obs = batch.agent_obs
        g = _agent_rows(h, batch.n_agents)
        mu = actor_means(obs, g, params).value
        value = critic_value(g, params).value
    log_std = params["actor.log_std"].value.copy()
    if deterministic:
        z = mu.copy()
    else:
        z = mu + np.exp(log_std) * rng.standard_normal(mu.shape)
    actions = np.tanh(z)
    with ad.no_grad():
        gauss = gaussian_log_prob(ad.Tensor(mu), ad.Tensor(log_std), z).value
    logp = gauss - squash_correction(z)
    return PolicyOutput(mu, log_std, z, actions, logp, value, g.value, records, batch.node_index, gauss)


class SoftGMPolicy:
    """Parameters plus config; convenience wrapper over the functional forward passes."""

    def __init__(self, cfg: GatConfig | None = None, seed: int = 0, params: ad.ParamStore | None = None):
        self.cfg = cfg or GatConfig()
        self.params = params if params is not None else init_params(self.cfg, seed)

    def act(self, graph: GraphObservation, agent_obs=None, rng=None, deterministic=False,
            record=False) -> PolicyOutput:
        return actor_forward(graph, agent_obs, self.params, self.cfg, rng, deterministic, record)

    def act_batch(self, graphs, agent_obs=None, rng=None, deterministic=False) -> PolicyOutput:
        return _forward_batch(batch_graphs(graphs, agent_obs), self.params, self.cfg, rng, deterministic,
                              record=False)

    def value(self, graph: GraphObservation) -> float:
        return critic_forward(graph, self.params, self.cfg)

    def evaluate(self, batch: GraphBatch, pre_squash):
        """Differentiable (log-prob per agent, values, per-agent entropy) for stored pre-squash samples.

        The returned log-prob omits the tanh correction, which is constant in
        the parameters and cancels in probability ratios.
        """
        h, _ = two_stage_forward(batch.features, batch.types, batch.stage1, batch.stage2,
                                 batch.n_agents, self.params, self.cfg)
        g = _agent_rows(h, batch.n_agents)
        mu = actor_means(batch.agent_obs, g, self.params)
        logp = gaussian_log_prob(mu, self.params["actor.log_std"], pre_squash)
        value = critic_value(g, self.params)
        entropy = gaussian_entropy(self.params["actor.log_std"])
        return logp, value, entropy

    def param_groups(self, trunk_with: str = "critic") -> dict:
        """Map parameter name to 'actor' or 'critic' learning-rate group."""
        if trunk_with not in ("actor", "critic"):
            raise ConfigError("trunk_with must be 'actor' or 'critic'")
        groups = {}
        for name in self.params.names():
            if name.startswith("actor."):
                groups[name] = "actor"
            elif name.startswith("critic."):
                groups[name] = "critic"
            else:
                groups[name] = trunk_with
        return groups
