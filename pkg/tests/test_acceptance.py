"""End-to-end acceptance checks, one test per criterion.

Each test records a PASS/FAIL line that is printed in the terminal summary.
Criterion 8 trains real policies and takes tens of minutes on one core.
Set SOFTGM_WALL_SEEDS to change how many seeds the wall ordering report uses
(default 1).
"""

import dataclasses
import math
import os
import time

import numpy as np
import pytest

from softgm import autodiff as ad
from softgm.actuation import ActuationParams, actions_to_torque_field, build_spline_basis
from softgm.cli import DEFAULT_CONFIG, main
from softgm.config import load_config
from softgm.discovery import DiscoveryLedger, update_discovery
from softgm.env import REWARD_TERMS, RewardWeights, compute_reward, reward_terms
from softgm.evaluation import evaluate, load_policy, policy_actor, random_actor, run_ablation
from softgm.graph import FEATURE_DIM, NodeType, build_graph
from softgm.policy import GatConfig, SoftGMPolicy, attention_layer, batch_graphs, two_stage_forward
from softgm.rod import (ContactParams, Cylinder, RodParams, advance, compute_contact_forces, init_straight_rod,
                        mechanical_energy)
from softgm.scenario import build_scenario
from softgm.trainer import RolloutCollector, TrainConfig, compute_gae, ppo_loss, ppo_update, train

SMOKE = DEFAULT_CONFIG.with_name("smoke.ini")
NO_CONTACT = ContactParams()


def test_criterion_01_physics_invariants(criterion):
    with criterion("1", "physics invariants") as note:
        t0 = time.perf_counter()
        p = RodParams()
        assert p.n_elements == 60 and p.base_length == 1.0
        rest = init_straight_rod(p)
        drift = np.linalg.norm(advance(rest, p, None, [], NO_CONTACT, 1000).state.tip - rest.tip)
        assert drift < 1e-6

        # load, release, then watch every passive step
        rng = np.random.default_rng(0)
        worst = -np.inf
        for trial in range(3):
            field = np.zeros((60, 3))
            field[:, :2] = rng.uniform(-2.0, 2.0, 2)
            s = advance(rest, p, field, [], NO_CONTACT, int(rng.integers(300, 1500))).state
            energy = [mechanical_energy(s, p)]
            for _ in range(1500):
                s = advance(s, p, None, [], NO_CONTACT, 1).state
                energy.append(mechanical_energy(s, p))
            worst = max(worst, float(np.diff(energy).max()))
        assert worst <= 0.0

        for trial in range(5):
            s = advance(rest, p, rng.uniform(-5, 5, (60, 3)), [], NO_CONTACT, 300,
                        tip_force=rng.normal(0, 2, 3)).state
            np.testing.assert_array_equal(s.node_positions[0], rest.node_positions[0])
            np.testing.assert_array_equal(s.element_directors[0], rest.element_directors[0])
            np.testing.assert_array_equal(s.node_velocities[0], 0.0)

        cyl = Cylinder(np.array([0.3, 0.0, 0.0]), np.array([0.0, 0.0, 1.0]), 1.0, 0.04)
        for trial in range(200):
            s = init_straight_rod(RodParams(n_elements=10))
            s.node_positions = np.column_stack([rng.uniform(0.15, 0.45, 11), rng.uniform(-0.15, 0.15, 11),
                                                rng.uniform(0.05, 0.95, 11)])
            s.node_velocities = rng.normal(0, 1, (11, 3))
            force, count = compute_contact_forces(s, [cyl], NO_CONTACT, rod_radius=0.05)
            radial = s.node_positions - cyl.start_point
            radial[:, 2] = 0.0
            dist = np.linalg.norm(radial, axis=1)
            touching = dist < 0.09
            assert count == touching.sum()
            assert not force[~touching].any()
            assert np.all(np.einsum("ij,ij->i", force[touching], radial[touching]) >= 0.0)
        elapsed = time.perf_counter() - t0
        assert elapsed < 60.0
        note["detail"] = f"drift {drift:.1e} m, max energy step {worst:.1e} J, {elapsed:.1f} s"


def test_criterion_02_actuation(criterion):
    with criterion("2", "actuation basis and torque map") as note:
        t0 = time.perf_counter()
        worst = 0.0
        for n_agents, n_elements, degree in [(6, 60, 2), (4, 20, 2), (6, 60, 3), (8, 100, 3), (5, 7, 1)]:
            basis = build_spline_basis(n_agents, n_elements, degree)
            worst = max(worst, float(np.abs(basis.basis_matrix.sum(0) - 1.0).max()))
        assert worst < 1e-9
        params = ActuationParams()
        basis = build_spline_basis(6, 60, 2)
        rng = np.random.default_rng(0)
        for _ in range(200):
            a = rng.uniform(-3, 3, (6, 2))
            field = actions_to_torque_field(a, basis, params)
            assert np.all(np.abs(field[:, :2]) <= np.asarray(params.torque_max) + 1e-12)
            assert not field[:, 2].any()
            a1, a2 = rng.uniform(-0.5, 0.5, (2, 6, 2))
            c = rng.uniform(-1, 1)
            np.testing.assert_allclose(actions_to_torque_field(a1 + c * a2, basis, params),
                                       actions_to_torque_field(a1, basis, params)
                                       + c * actions_to_torque_field(a2, basis, params), atol=1e-12)
            np.testing.assert_array_equal(actions_to_torque_field(-a1, basis, params),
                                          -actions_to_torque_field(a1, basis, params))
        elapsed = time.perf_counter() - t0
        assert elapsed < 1.0
        note["detail"] = f"max |column sum - 1| {worst:.1e}, {elapsed * 1e3:.0f} ms"


# (d_t, d_prev, actions, prev_actions, contact_count, n_new, success)
REWARD_CASES = [
    (0.80, 0.85, [[0.1, 0.2], [0.3, -0.4]], [[0.0, 0.0], [0.0, 0.0]], 0, 0, False),
    (0.50, 0.50, [[1.0, -1.0], [0.5, 0.5]], [[1.0, -1.0], [0.5, 0.5]], 0, 0, False),
    (0.40, 0.4005, [[0.2, 0.2], [0.2, 0.2]], [[-0.2, 0.2], [0.2, -0.2]], 3, 0, False),
    (0.30, 0.29, [[0.0, 0.0], [0.0, 0.0]], [[1.0, 1.0], [1.0, 1.0]], 1, 2, False),
    (0.04, 0.07, [[0.9, 0.1], [-0.9, 0.1]], [[0.8, 0.1], [-0.8, 0.1]], 0, 0, True),
    (0.60, 0.55, [[-1.0, 1.0], [1.0, -1.0]], [[1.0, -1.0], [-1.0, 1.0]], 5, 5, False),
    (0.20, 0.20, [[0.3, 0.3], [0.3, 0.3]], [[0.3, 0.3], [0.3, 0.3]], 2, 0, False),
    (0.90, 1.00, [[0.5, 0.0], [0.0, 0.5]], [[0.0, 0.5], [0.5, 0.0]], 0, 4, False),
    (0.10, 0.1009, [[0.1, -0.1], [0.1, -0.1]], [[0.1, -0.1], [0.1, -0.1]], 1, 0, False),
    (0.35, 0.45, [[0.7, 0.7], [0.7, 0.7]], [[0.6, 0.7], [0.7, 0.8]], 0, 1, False),
    (0.02, 0.30, [[1.0, 1.0], [1.0, 1.0]], [[-1.0, -1.0], [-1.0, -1.0]], 4, 3, True),
    (0.75, 0.70, [[0.0, 0.25], [0.25, 0.0]], [[0.25, 0.0], [0.0, 0.25]], 0, 0, False),
    (0.50, 0.5011, [[0.4, 0.4], [0.4, 0.4]], [[0.4, 0.4], [0.4, 0.4]], 6, 0, False),
    (0.15, 0.25, [[-0.5, -0.5], [-0.5, -0.5]], [[0.5, 0.5], [0.5, 0.5]], 0, 7, False),
    (0.66, 0.60, [[0.9, -0.9], [0.9, -0.9]], [[0.9, -0.9], [0.9, -0.9]], 10, 1, False),
    (0.45, 0.4491, [[0.05, 0.1], [0.15, 0.2]], [[0.0, 0.0], [0.0, 0.0]], 2, 0, False),
    (0.01, 0.049, [[0.3, -0.3], [0.0, 0.0]], [[0.3, -0.3], [0.0, 0.0]], 1, 0, True),
    (1.20, 1.10, [[1.0, 0.0], [0.0, 1.0]], [[0.0, 0.0], [0.0, 0.0]], 0, 0, False),
    (0.33, 0.34, [[0.2, 0.4], [0.6, 0.8]], [[0.8, 0.6], [0.4, 0.2]], 0, 3, False),
    (0.55, 0.56, [[-0.1, -0.2], [-0.3, -0.4]], [[-0.1, -0.2], [-0.3, -0.4]], 8, 12, False),
]

WEIGHT_OF_TERM = {
    "progress": "lambda_progress", "smoothness": "lambda_action_smooth", "time": "lambda_time",
    "collision": "lambda_collision", "collision_per_node": "lambda_collision_per_node",
    "discovery": "lambda_discovery", "stuck": "lambda_stuck", "success": "lambda_success",
}


def reward_term_oracle(term, w, d_t, d_prev, a, a_prev, contacts, n_new, success):
    a, a_prev = np.array(a), np.array(a_prev)
    touch = contacts > 0
    progress = d_prev - d_t
    return {
        "progress": w.lambda_progress * progress,
        "smoothness": -w.lambda_action_smooth * ((a - a_prev) ** 2).mean(),
        "time": -w.lambda_time,
        "collision": w.lambda_collision if touch else 0.0,
        "collision_per_node": w.lambda_collision_per_node * contacts,
        "discovery": w.lambda_discovery * min(n_new, w.discovery_cap),
        "stuck": -w.lambda_stuck if (touch and abs(progress) < w.stuck_epsilon) else 0.0,
        "success": w.lambda_success if success else 0.0,
    }[term]


def test_criterion_03_reward_oracle(criterion):
    with criterion("3", "reward oracle") as note:
        defaults = RewardWeights()
        assert len(REWARD_CASES) == 20 and len(REWARD_TERMS) == 9
        checked = 0
        for case in REWARD_CASES:
            d_t = case[0]
            assert compute_reward(*case[:6], RewardWeights.zeros(), case[6]) == -d_t
            full = -d_t
            for term, weight in WEIGHT_OF_TERM.items():
                isolated = RewardWeights.zeros(**{weight: getattr(defaults, weight)})
                expect = reward_term_oracle(term, defaults, *case)
                got = compute_reward(*case[:6], isolated, case[6])
                assert got == pytest.approx(-d_t + expect, abs=1e-12), (case, term)
                full += expect
                checked += 1
            assert compute_reward(*case[:6], defaults, case[6]) == pytest.approx(full, abs=1e-12)
        # discovery cap
        for n_new in (4, 5, 12):
            t = reward_terms(0.5, 0.5, np.zeros((2, 2)), np.zeros((2, 2)), 0, n_new, defaults, False)
            assert t["discovery"] == defaults.lambda_discovery * defaults.discovery_cap
        note["detail"] = f"{checked} isolated terms over 20 cases"


def test_criterion_04_graph(criterion):
    from test_graph import posts, random_graph

    with criterion("4", "graph construction") as note:
        rng = np.random.default_rng(4)
        for n in range(2, 9):
            g, _, _ = random_graph(rng, n=n)
            assert g.node_features.shape[1] == FEATURE_DIM == 22
            assert g.adjacency[:n, :n].sum() == 2 * (n - 1)
        # agent layout: p, v, [a, 0], target - p, tip - p, zero padding
        ledger = DiscoveryLedger(posts(), 0.1, 0.15, 8)
        update_discovery(ledger, [[0.5, -0.12, 0.25]])
        p = np.array([[0.5, -0.12, 0.25], [0.1, 0.2, 0.3]])
        v = np.array([[1.0, 2.0, 3.0], [4.0, 5.0, 6.0]])
        a = np.array([[0.5, -0.5], [0.25, 0.75]])
        target, tip = np.array([0.9, 0.0, 0.5]), np.array([0.1, 0.0, 0.9])
        g = build_graph(p, v, a, ledger, target, tip)
        x = g.node_features[1]
        np.testing.assert_array_equal(x[:15], np.concatenate([p[1], v[1], [0.25, 0.75, 0.0], target - p[1],
                                                              tip - p[1]]))
        assert not x[15:].any()
        b = ledger.bin_in_slot[0]
        o = g.node_features[2]
        np.testing.assert_allclose(o[:15], np.concatenate([ledger.centers[b], [0, 0, 1],
                                                           [0.04, 0.6, ledger.axial_fractions[b]],
                                                           target - ledger.centers[b], tip - ledger.centers[b]]))
        assert not o[15:].any()

        mismatches = 0
        for _ in range(1000):
            g, ledger, pos = random_graph(rng, n=int(rng.integers(2, 7)), slots=int(rng.integers(1, 14)))
            n = len(pos)
            for j in range(ledger.n_slots):
                bj = ledger.bin_in_slot[j]
                for i in range(n):
                    expected = bj >= 0 and (np.linalg.norm(pos[i] - ledger.centers[bj]) - ledger.radii[bj]
                                            < ledger.sensing_radius)
                    mismatches += g.adjacency[i, n + j] != expected
            pad = g.node_types == NodeType.PAD
            assert not g.node_features[pad].any()
            assert not g.adjacency[pad].any() and not g.adjacency[:, pad].any()
        assert mismatches == 0

        ledger = DiscoveryLedger(build_scenario("wall", 0).cylinders, 0.1, 0.15, 32)
        seen = np.zeros(ledger.n_bins, dtype=bool)
        for _ in range(200):
            before = ledger.slot_of.copy()
            pos = rng.uniform([0.3, -0.4, 0.0], [0.7, 0.4, 0.8], (4, 3))
            update_discovery(ledger, pos)
            sensed = (np.linalg.norm(pos[:, None] - ledger.centers[None], axis=-1) - ledger.radii < 0.15).any(0)
            seen |= sensed
            np.testing.assert_array_equal(ledger.discovered, seen)
            np.testing.assert_array_equal(ledger.slot_of[before >= 0], before[before >= 0])
            occupied = ledger.bin_in_slot >= 0
            assert not occupied[occupied.sum():].any()
        note["detail"] = "1000 random layouts, 0 proximity mismatches"


def test_criterion_05_attention(criterion):
    from test_policy import random_graph

    with criterion("5", "attention correctness") as note:
        rng = np.random.default_rng(5)
        worst_row = 0.0
        for _ in range(200):
            x = rng.normal(0, 4, (5, 9))
            mask = rng.random((5, 9)) < 0.4
            mask[:, 0] = True
            out = ad.masked_softmax(x, mask).value
            worst_row = max(worst_row, float(np.abs(out.sum(-1) - 1.0).max()))
            assert np.all(out[~mask] == 0.0)
        assert worst_row < 1e-9

        h = np.array([[0.7], [-1.3]])
        w, a_d, a_s = 0.9, 1.1, -0.4
        out, _ = attention_layer(ad.Tensor(h), np.ones((2, 2), bool), ad.Tensor(np.array([[w]])),
                                 ad.Tensor(np.array([[a_d]])), ad.Tensor(np.array([[a_s]])), 1)

        def lrelu(z):
            return z if z > 0 else 0.2 * z

        u = [h[0, 0] * w, h[1, 0] * w]
        oracle_err = 0.0
        for i in range(2):
            e = [math.exp(lrelu(a_d * u[i] + a_s * u[j])) for j in range(2)]
            m = (e[0] * u[0] + e[1] * u[1]) / (e[0] + e[1])
            oracle_err = max(oracle_err, abs(out.value[i, 0] - (h[i, 0] + lrelu(m))))
        assert oracle_err < 1e-12

        pol = SoftGMPolicy(GatConfig(hidden_dim=16, n_heads=2, head_hidden_dim=16), seed=0)
        for _ in range(20):
            g = random_graph(rng, n_pad=int(rng.integers(1, 6)))
            np.testing.assert_array_equal(pol.act(g, deterministic=True).agent_embeddings,
                                          pol.act(g.without_pad(), deterministic=True).agent_embeddings)

        grads = {}
        for variant in ("no-stage1", "full"):
            cfg = GatConfig.variant(variant, hidden_dim=16, n_heads=2, head_hidden_dim=16)
            params = SoftGMPolicy(cfg, seed=1).params
            g = random_graph(rng, density=1.0)
            feats = ad.Tensor(g.node_features.copy(), requires_grad=True)
            hfin, _ = two_stage_forward(feats, g.node_types, g.stage1_mask, g.stage2_mask, g.n_agents, params, cfg)
            probe = rng.normal(size=(g.n_agents, 16))
            ad.reduce_sum(ad.mul(hfin[: g.n_agents], probe)).backward()
            grads[variant] = feats.grad[g.node_types == NodeType.OBST]
        assert np.all(grads["no-stage1"] == 0.0)
        assert np.abs(grads["full"]).max() > 0.0
        note["detail"] = f"row error {worst_row:.1e}, 2-node oracle error {oracle_err:.1e}"


def _fd_relative_errors(fns, params, h=1e-4):
    """Worst coordinate-wise relative error of tape gradients against finite differences.

    ``fns()`` returns a dict of scalar tensors that share one forward pass.  The
    four-point central stencil keeps truncation at O(h^4) while h stays small
    enough to avoid straddling LeakyReLU kinks.
    """
    grads = {}
    for key in fns():
        params.zero_grad()
        fns()[key].backward()
        grads[key] = params.grads()
    worst = dict.fromkeys(grads, 0.0)
    for name in params.names():
        p = params[name].value
        for idx in np.ndindex(p.shape):
            old = p[idx]
            samples = []
            for step in (2 * h, h, -h, -2 * h):
                p[idx] = old + step
                with ad.no_grad():
                    samples.append({k: float(v.value) for k, v in fns().items()})
            p[idx] = old
            for key in grads:
                f2, f1, m1, m2 = (s_[key] for s_ in samples)
                fd = (-f2 + 8 * f1 - 8 * m1 + m2) / (12 * h)
                an = grads[key][name][idx]
                worst[key] = max(worst[key], abs(fd - an) / max(abs(fd), abs(an), 1e-6))
    return worst


def test_criterion_06_gradient_checks(criterion):
    from test_policy import random_graph

    with criterion("6", "gradient checks") as note:
        t0 = time.perf_counter()
        rng = np.random.default_rng(6)
        cfg = GatConfig(hidden_dim=4, n_heads=2, head_hidden_dim=3, type_embed_dim=2, layers_per_stage=1)
        tc = TrainConfig()
        worst = {"log-prob": 0.0, "value": 0.0, "ppo loss": 0.0}
        for k in range(50):
            pol = SoftGMPolicy(cfg, seed=k)
            g = random_graph(rng, n_agents=int(rng.integers(2, 4)), n_obst=int(rng.integers(0, 3)),
                             n_pad=1, density=0.7)
            gb = batch_graphs([g])
            n = g.n_agents
            z = rng.normal(size=(1, n, 2))
            with ad.no_grad():
                logp0, _, _ = pol.evaluate(gb, z)
            # keep every ratio clear of the clip boundaries
            offsets = rng.uniform(-0.5, 0.5, (1, n))
            near = np.minimum(np.abs(offsets - math.log(0.8)), np.abs(offsets - math.log(1.2))) < 0.02
            offsets[near] += 0.05
            old = logp0.value - offsets
            adv = rng.normal(size=1)
            target = rng.normal(size=1)
            coef = rng.normal(size=(1, n))

            def fns():
                logp, value, _ = pol.evaluate(gb, z)
                return {"log-prob": ad.reduce_sum(ad.mul(logp, coef)), "value": ad.reduce_sum(value),
                        "ppo loss": ppo_loss(pol, gb, z, old, adv, target, tc)[0]}

            for key, err in _fd_relative_errors(fns, pol.params).items():
                worst[key] = max(worst[key], err)
        elapsed = time.perf_counter() - t0
        note["detail"] = ", ".join(f"{k} {v:.1e}" for k, v in worst.items()) + f", {elapsed:.0f} s"
        assert max(worst.values()) < 1e-4
        assert elapsed < 120.0


def test_criterion_07_gae_and_first_epoch(criterion, small_env_config):
    from test_trainer import gae_brute_force
    from softgm.env import SoftArmEnv
    from softgm.scenario import LayoutConfig

    with criterion("7", "GAE and first-epoch ratio") as note:
        rng = np.random.default_rng(7)
        worst = 0.0
        for _ in range(100):
            T = int(rng.integers(1, 60))
            gamma, lam = rng.uniform(0.8, 1.0), rng.uniform(0.0, 1.0)
            r, v = rng.normal(size=T), rng.normal(size=T + 1)
            d = (rng.random(T) < 0.1).astype(float)
            adv, _ = compute_gae(r[:, None], v[:, None], d[:, None], gamma, lam)
            worst = max(worst, float(np.abs(adv[:, 0] - gae_brute_force(r, v, d, gamma, lam)).max()))
        assert worst <= 1e-10

        def make(seed):
            return SoftArmEnv(build_scenario("basic", seed, LayoutConfig(max_episode_steps=8)), small_env_config,
                              seed=seed)

        cfg = TrainConfig(rollout_steps=32, minibatch_size=16, ppo_epochs=2, n_workers=2)
        pol = SoftGMPolicy(GatConfig(hidden_dim=16, n_heads=2, head_hidden_dim=16), seed=0)
        batch = RolloutCollector(make, 2, seed=0).collect(pol, 16, cfg)
        batch.advantages, batch.returns = compute_gae(batch.rewards, batch.values, batch.dones, 0.99, 0.95)
        stats = ppo_update(pol, ad.Adam(pol.params, lr=3e-4, clip_norm=0.5), batch, cfg, rng)
        assert stats["first_minibatch_clip_fraction"] == 0.0
        note["detail"] = f"max GAE error {worst:.1e}, first clip fraction {stats['first_minibatch_clip_fraction']}"


@pytest.fixture(scope="module")
def basic_training(tmp_path_factory):
    cfg = load_config(SMOKE)
    make_env = cfg.env_factory()
    out = tmp_path_factory.mktemp("basic")

    def periodic(policy):
        return evaluate(policy_actor(policy), make_env, cfg.train.eval_episodes, seed=cfg.eval.seed).success_rate

    trainer = train(cfg.train, make_env, cfg.gat, out, cfg.hash, periodic)
    trained = evaluate(policy_actor(trainer.policy), make_env, 50, seed=cfg.eval.seed)
    baseline = evaluate(random_actor(cfg.eval.seed), make_env, 50, seed=cfg.eval.seed)
    return cfg, trainer, trained, baseline


@pytest.mark.slow
def test_criterion_08_training_smoke(criterion, basic_training):
    cfg, trainer, trained, baseline = basic_training
    with criterion("8", "Basic training smoke") as note:
        rewards = np.array([r["mean_episodic_reward"] for r in trainer.rows[1:]])
        rewards = rewards[np.isfinite(rewards)]
        k = max(1, len(rewards) // 5)
        first, last = rewards[:k].mean(), rewards[-k:].mean()
        note["detail"] = (f"{trainer.env_steps} steps, SR {trained.success_rate:.2f} vs random "
                          f"{baseline.success_rate:.2f}, reward quintiles {first:.1f} -> {last:.1f}")
        assert trainer.env_steps <= 500_000
        assert cfg.rod.n_elements == 20 and cfg.actuation.n_agents == 4 and cfg.layout.max_episode_steps == 300
        assert baseline.success_rate <= 0.1
        assert last > first
        assert trained.success_rate >= 0.6


@pytest.mark.slow
def test_criterion_08_wall_ordering_report(criterion, tmp_path):
    """Full vs entity-stage ablation on the wall layout; reported, never failed."""
    seeds = int(os.environ.get("SOFTGM_WALL_SEEDS", "1"))
    base = load_config(SMOKE).with_overrides("run", scenario="wall")
    rates = {"full": [], "no-stage1": []}
    for seed in range(seeds):
        cfg = base.with_overrides("run", seed=seed)
        gat_kwargs = {k: v for k, v in dataclasses.asdict(cfg.gat).items() if k not in ("use_stage1", "use_stage2")}
        for variant in rates:
            _, report = run_ablation(variant, cfg.env_factory(), cfg.train, tmp_path / f"seed{seed}", 50,
                                     cfg.eval.seed, cfg.hash, gat_kwargs)
            rates[variant].append(report.success_rate)
    full, ablated = np.mean(rates["full"]), np.mean(rates["no-stage1"])
    verdict = "holds" if full >= ablated else "does not hold"
    with criterion("8-wall", "wall ordering Full >= NoStage1 (report only)") as note:
        note["detail"] = f"{seeds} seed(s): Full {full:.2f} vs NoStage1 {ablated:.2f}, ordering {verdict}"


def test_criterion_09_robustness_protocol(criterion):
    from test_env import scripted

    with criterion("9", "robustness protocol") as note:
        cfg = load_config(SMOKE).with_overrides("layout", max_episode_steps=30)
        noise, fail, disturb = (cfg.perturbation(n) for n in ("noise", "fail", "disturb"))
        assert (noise.obs_noise.position_std, noise.obs_noise.velocity_std,
                noise.obs_noise.action_feature_std) == (0.1, 0.1, 0.2)
        assert fail.failed_agent_index == 2
        d = disturb.disturbance
        assert (d.force, d.start_step, d.duration_frames) == (15.0, 5, 6)
        n = cfg.actuation.n_agents

        clean, noisy = cfg.make_env(3), cfg.make_env(3)
        clean.reset(seed=3)
        noisy.reset(seed=3, perturbation=noise)
        observations_differ = False
        for t in range(30):
            rc, rn = clean.step(scripted(t, n)), noisy.step(scripted(t, n))
            np.testing.assert_array_equal(clean.rod.node_positions, noisy.rod.node_positions)
            np.testing.assert_array_equal(clean.rod.element_directors, noisy.rod.element_directors)
            observations_differ |= not np.array_equal(rc.per_agent_observations, rn.per_agent_observations)
        assert observations_differ

        env = cfg.make_env(4)
        res = env.reset(seed=4, perturbation=fail)
        steps = 0
        while not res.done:
            res = env.step(np.ones((n, 2)))
            assert not res.info["applied_torques"][2].any()
            steps += 1

        env = cfg.make_env(5)
        res = env.reset(seed=5, perturbation=disturb)
        pushed = []
        t = 0
        while not res.done:
            res = env.step(np.zeros((n, 2)))
            if np.any(res.info["tip_force"] != 0.0):
                pushed.append(t)
                assert np.linalg.norm(res.info["tip_force"]) == pytest.approx(15.0)
            t += 1
        assert pushed == list(range(5, 11))
        note["detail"] = f"{steps} failed-agent steps, force on steps {pushed[0]}-{pushed[-1]}"


def test_criterion_10_determinism_and_persistence(criterion, tmp_path, capsys):
    from test_config_cli import TINY_INI

    with criterion("10", "determinism and persistence") as note:
        ini = tmp_path / "single.ini"
        ini.write_text(TINY_INI.replace("n_workers = 2", "n_workers = 1"))
        assert load_config(ini).train.n_workers == 1
        for name in ("a", "b"):
            assert main(["train", "--config", str(ini), "--output", str(tmp_path / name)]) == 0
        capsys.readouterr()
        a = (tmp_path / "a" / "metrics.csv").read_bytes()
        b = (tmp_path / "b" / "metrics.csv").read_bytes()
        assert a == b

        cfg = load_config(ini)
        trainer = train(cfg.train, cfg.env_factory(), cfg.gat, tmp_path / "c", cfg.hash)
        restored = load_policy(tmp_path / "c" / "checkpoints" / "final", cfg.hash)
        env = cfg.make_env(8)
        res = env.reset()
        for _ in range(4):
            o1 = trainer.policy.act(res.graph, deterministic=True, record=True)
            o2 = restored.act(res.graph, deterministic=True, record=True)
            np.testing.assert_array_equal(o1.actions, o2.actions)
            np.testing.assert_array_equal(o1.log_probs, o2.log_probs)
            np.testing.assert_array_equal(o1.value, o2.value)
            for r1, r2 in zip(o1.attention_records, o2.attention_records):
                np.testing.assert_array_equal(r1["alpha"], r2["alpha"])
            res = env.step(o1.actions)
        note["detail"] = f"metrics.csv identical ({len(a)} bytes), restored outputs bit-identical"
