"""Acceptance criteria P1-P13.

Each test prints one ``[P#] PASS|FAIL`` line with the measured quantities and
then asserts. Run just this file with ``pytest tests/test_acceptance.py -v -s``.
"""
import time

import numpy as np
import pytest

from flowalign.advantage import (GroupingConfig, group_normalize, naive_mixed_rewards, reward_grouped_advantages,
                                 temporal_advantages)
from flowalign.envs import RewardSpec
from flowalign.experiments import bootstrap_mean_diff_ci, diversity_table, noise_table, window_means
from flowalign.flow import KeyedNoise, NoiseSchedule, PointMassFlow, TimeGrid, score, sde_step
from flowalign.grpo import EdgeBatch, GrpoConfig, batch_objective, batch_ratios, train
from flowalign.flow import VelocityModel
from flowalign.nn import grad_scalar
from flowalign.rollout import (BranchSchedule, leaf_count, level_sizes, rollout_sequential, rollout_tree,
                               velocity_eval_count)
from oracles import CountingModel, brute_force_temporal, central_difference, nodes_per_level, random_tree


def report(capsys, tag, ok, detail):
    with capsys.disabled():
        print(f"\n[{tag}] {'PASS' if ok else 'FAIL'}  {detail}")
    assert ok, f"{tag}: {detail}"


# ---------------------------------------------------------------------------


def test_p1_sde_marginals(capsys):
    start = time.perf_counter()
    c = np.array([1.5, -0.5])
    flow, grid, noise = PointMassFlow(c), TimeGrid(40), NoiseSchedule(0.7)
    rng = np.random.default_rng(2024)
    x = rng.standard_normal((10_000, 2))
    worst_mean = worst_var = 0.0
    checkpoints = {30: 0.75, 20: 0.5, 10: 0.25}
    for j in range(40, 0, -1):
        x, _ = sde_step(flow, x, j, grid, noise, rng.standard_normal(x.shape))
        if j - 1 in checkpoints:
            t = checkpoints[j - 1]
            worst_mean = max(worst_mean, np.abs(x.mean(axis=0) - (1 - t) * c).max())
            worst_var = max(worst_var, np.abs(x.var(axis=0) - t * t).max())
    secs = time.perf_counter() - start
    ok = worst_mean < 0.05 and worst_var < 0.1 and secs < 60
    report(capsys, "P1", ok, f"max mean err {worst_mean:.4f} (<0.05), max var err {worst_var:.4f} (<0.1), {secs:.1f}s")


def test_p2_score_identity(capsys):
    rng = np.random.default_rng(0)
    worst = 0.0
    for k in range(100):
        t = (k + 0.5) / 100
        c = rng.normal(size=2)
        flow = PointMassFlow(c)
        x = rng.normal(size=2) * 2
        worst = max(worst, np.abs(score(x, t, flow.velocity(x, t)) - (-(x - (1 - t) * c) / t ** 2)).max())
    report(capsys, "P2", worst < 1e-10, f"max abs error {worst:.2e} (<1e-10)")


def test_p3_tree_shape(capsys):
    n48 = leaf_count(BranchSchedule(((8, 3), (6, 2)), 8))
    mismatches = 0
    for seed in range(100):
        tree = random_tree(seed)
        mismatches += nodes_per_level(tree) != level_sizes(tree.schedule, tree.T)
        mismatches += len(tree.leaves) != leaf_count(tree.schedule)
    report(capsys, "P3", n48 == 48 and mismatches == 0, f"leaf_count {n48} (48), level mismatches {mismatches}/100")


def test_p4_amortization(capsys):
    tree_cost = velocity_eval_count(BranchSchedule(((4, 3), (2, 2)), 1), 6)
    counting = CountingModel(PointMassFlow(np.zeros(2)))
    rollout_sequential(counting, 0, 6, TimeGrid(6), NoiseSchedule(0.7), KeyedNoise(0))
    seq = counting.rows
    bad = 0
    for seed in range(100):
        tree = random_tree(seed)
        counts = nodes_per_level(tree)
        evals = sum(counts[p] for p in range(tree.T, 0, -1))
        edges = sum(1 for n in tree.nodes if n.parent is not None)
        rep = velocity_eval_count(tree.schedule, tree.T)
        bad += (rep.velocity_evals, rep.transitions, rep.leaves) != (evals, edges, len(tree.leaves))
        bad += tree.velocity_evals != evals
    ok = tree_cost.velocity_evals == 20 and seq == 36 and bad == 0
    report(capsys, "P4", ok, f"tree {tree_cost.velocity_evals} (20) vs sequential {seq} (36); "
                             f"cost mismatches {bad}/100")


def test_p5_normalization(capsys):
    rng = np.random.default_rng(5)
    eps = GroupingConfig().eps_std
    checked = bad_mean = bad_std = 0
    worst_std = 0.0
    while checked < 1000:
        n = int(rng.integers(2, 33))
        v = rng.normal(rng.normal() * 10, 10 ** rng.uniform(-2, 2), size=n)
        if not v.var() > 100 * eps:
            continue
        checked += 1
        a = group_normalize(v, eps)
        bad_mean += abs(a.mean()) >= 1e-12
        dev = abs(a.std() - 1.0)
        worst_std = max(worst_std, dev)
        bad_std += dev > 1e-6
    ok = bad_mean == 0 and bad_std == 0
    report(capsys, "P5", ok, f"{checked} groups: |mean|>=1e-12 in {bad_mean}, |std-1|>1e-6 in {bad_std} "
                             f"(worst {worst_std:.2e}; the eps_std guard alone gives eps/(s+eps))")


def test_p6_reward_mixing(capsys):
    R = np.array([[0.0, 100.0], [1.0, 0.0]])
    w = [1.0, 1.0]
    eps = 1e-6
    grouped = reward_grouped_advantages(R, w, scaled=True, eps_std=eps)
    # per-column advantages with the guard: [-0.5, 0.5]/(0.5+eps) and [50, -50]/(50+eps)
    derived = 0.5 * (-0.5 / (0.5 + eps) + 50 / (50 + eps))
    limit = reward_grouped_advantages(R, w, scaled=True, eps_std=1e-300)
    naive = group_normalize(naive_mixed_rewards(R, w), eps)
    ok = (np.allclose(grouped, [derived, -derived], rtol=1e-12, atol=0) and np.all(np.abs(grouped) <= eps)
          and np.array_equal(limit, [0.0, 0.0]) and np.allclose(naive, [1, -1], atol=1e-6))
    report(capsys, "P6", ok, f"grouped {grouped} (eps-limit {limit}), naive {naive}")


def test_p7_temporal_oracle(capsys):
    worst = 0.0
    for seed in range(200):
        tree = random_tree(seed, max_leaves=30, max_points=3)
        r = np.random.default_rng(seed).normal(size=len(tree.leaves)) * 3
        got, want = temporal_advantages(tree, r), brute_force_temporal(tree, r)
        assert set(got) == set(want)
        worst = max(worst, max(abs(got[k] - want[k]) for k in want))
    tree = rollout_tree(PointMassFlow(np.zeros(2)), 0, BranchSchedule(((1, 2),), 2), TimeGrid(3),
                        NoiseSchedule(0.7), KeyedNoise(0))
    t = temporal_advantages(tree, [1, 3, 5, 9])
    top = [t[i] for i in tree.levels[2]]
    low = [t[i] for i in tree.levels[1]]
    low_leaf = [t[tree.nodes[i].children[0]] for i in tree.levels[1]]
    worked = (np.allclose(top, [-1, 1], atol=1e-6) and low == low_leaf
              and np.allclose(low, [-1.1832, -0.5071, 0.1690, 1.5213], atol=1e-4))
    ok = worst <= 1e-12 and worked
    report(capsys, "P7", ok, f"200 trees max |diff| {worst:.1e} (<=1e-12); worked example {np.round(top, 4)} "
                             f"{np.round(low, 4)}")


def test_p8_gradient(capsys):
    worst, ratio_ok = 0.0, True
    for seed in range(10):
        rng = np.random.default_rng(100 + seed)
        model = VelocityModel.create(2, 4, (8, 8), seed=seed)
        T = int(rng.integers(4, 8))
        sched = BranchSchedule(((T - 3, 2),), int(rng.integers(2, 4)))
        cfg = GrpoConfig(time_steps=T, schedule=sched, beta_kl=float(rng.uniform(0, 0.5)))
        trees = [rollout_tree(model, c, sched, cfg.grid, cfg.noise, KeyedNoise(seed, c)) for c in (0, 3)]
        tables = [temporal_advantages(tr, rng.normal(size=len(tr.leaves))) for tr in trees]
        batch = EdgeBatch.from_trees(trees, tables)
        ratio_ok &= bool(np.all(batch_ratios(model, model.params, batch, cfg.noise) == 1.0))
        theta = model.params + 0.03 * rng.standard_normal(model.params.size)
        ref = model.params + 0.03 * rng.standard_normal(model.params.size)
        f = lambda p: batch_objective(model, p, batch, cfg, ref)  # noqa: E731
        _, g = grad_scalar(theta, f)
        idx = rng.choice(theta.size, size=32, replace=False)
        fd = central_difference(f, theta, idx)
        rel = np.abs(g[idx] - fd) / np.maximum(np.maximum(np.abs(g[idx]), np.abs(fd)), 1e-7)
        worst = max(worst, rel.max())
    report(capsys, "P8", worst < 1e-4 and ratio_ok,
           f"max relative FD error {worst:.2e} (<1e-4) over 10x32 coords; ratios at theta_old all 1: {ratio_ok}")


def test_p9_diversity_ordering(capsys, pretrained, env):
    start = time.perf_counter()
    model, _ = pretrained
    T = 10
    rows = diversity_table(model, env, T, [T - 2, 2], 4, 20, NoiseSchedule(0.7), seed=0)
    lo, hi = bootstrap_mean_diff_ci(rows[0]["values"], rows[1]["values"])
    secs = time.perf_counter() - start
    ok = rows[0]["mean"] > rows[1]["mean"] and lo > 0 and secs < 300
    report(capsys, "P9", ok, f"early {rows[0]['mean']:.3f} vs late {rows[1]['mean']:.3f}, "
                             f"95% CI of diff [{lo:.3f}, {hi:.3f}], {secs:.1f}s")


@pytest.mark.slow
def test_p10_single_reward(capsys, pretrained, env):
    start = time.perf_counter()
    model, _ = pretrained
    cfg = GrpoConfig(time_steps=10, schedule=BranchSchedule(((8, 3), (6, 2)), 8), iterations=150)
    gains = []
    for seed in range(3):
        _, log = train(cfg, model, env, RewardSpec(names=("target",)), seed)
        first, last = window_means(log, 20)
        gains.append(float((last[0] - first[0]) / first[0]))
    secs = time.perf_counter() - start
    ok = all(g >= 0.2 for g in gains) and secs < 1800
    report(capsys, "P10", ok, f"relative gains {np.round(gains, 3)} (>=0.2 on 3/3), {secs:.0f}s")


@pytest.mark.slow
def test_p11_grouping_vs_mixing(capsys, pretrained, env):
    start = time.perf_counter()
    model, _ = pretrained
    spec = RewardSpec(names=("target", "ring", "angle"), ring_scale=50.0)
    bounded = [0, 2]
    wins, lines = 0, []
    for seed in range(3):
        out = {}
        for strategy in ("naive_mix", "reward_grouped"):
            cfg = GrpoConfig(iterations=150, grouping=GroupingConfig(strategy))
            _, log = train(cfg, model, env, spec, seed)
            first, last = window_means(log, 20)
            out[strategy] = last > first
        naive_fails = not all(out["naive_mix"][m] for m in bounded)
        grouped_all = bool(np.all(out["reward_grouped"]))
        wins += naive_fails and grouped_all
        lines.append(f"seed {seed}: naive improves {out['naive_mix'].tolist()}, "
                     f"grouped improves {out['reward_grouped'].tolist()}")
    secs = time.perf_counter() - start
    ok = wins >= 2 and secs < 3600
    report(capsys, "P11", ok, f"{wins}/3 seeds show the pattern; " + "; ".join(lines) + f"; {secs:.0f}s")


def test_p12_noise_table(capsys):
    rows = noise_table((6, 10, 28, 40), a=0.7)
    decreasing = True
    for T in (6, 10, 28, 40):
        vals = [r["noise_scale"] for r in rows if r["T"] == T]   # j = T..1
        decreasing &= all(a > b for a, b in zip(vals, vals[1:]))
    spot = [r["noise_scale"] for r in rows if r["T"] == 10 and r["j"] == 5][0]
    ok = decreasing and abs(spot - 0.2214) < 1e-4
    report(capsys, "P12", ok, f"strictly decreasing: {decreasing}; T=10 t=0.5 -> {spot:.4f} (0.2214)")


def test_p13_scaled_vs_unscaled(capsys):
    rng = np.random.default_rng(13)
    exact_div = 0
    worst_ulps = 0.0
    for _ in range(1000):
        G, M = int(rng.integers(2, 20)), int(rng.integers(1, 6))
        R = rng.normal(size=(G, M)) * rng.uniform(0.1, 50, size=M)
        w = rng.uniform(0, 3, size=M)
        s = reward_grouped_advantages(R, w, scaled=True)
        u = reward_grouped_advantages(R, w, scaled=False)
        exact_div += np.array_equal(u / M, s)
        worst_ulps = max(worst_ulps, float(np.max(np.abs(u - s * M) / np.spacing(np.maximum(np.abs(u), 1e-300)))))
    ok = exact_div == 1000 and worst_ulps <= 4
    report(capsys, "P13", ok, f"unscaled/M == scaled bitwise on {exact_div}/1000; "
                              f"unscaled vs scaled*M within {worst_ulps:.0f} ulp (<=4)")
