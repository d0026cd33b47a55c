"""Experiment drivers behind the CLI: pretraining, evaluation and the analyses."""
from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .envs import GaussMixEnv, RewardSpec, reward_vector, sample_data
from .flow import KeyedNoise, NoiseSchedule, TimeGrid, VelocityModel, fm_loss, sample_ode, step_noise_scale
from .grpo import GrpoConfig, train
from .nn import AdamState, adam_step, grad_scalar
from .rollout import BranchSchedule, leaf_diversity, rollout_tree

log = logging.getLogger(__name__)


@dataclass
class PretrainConfig:
    iterations: int = 3000
    batch_size: int = 256
    learning_rate: float = 2e-3
    hidden: tuple[int, ...] = (64, 64)
    activation: str = "tanh"


def pretrain(env: GaussMixEnv, cfg: PretrainConfig, seed: int):
    """Flow matching on (data, noise, t, condition) tuples. Returns (model, loss curve)."""
    model = VelocityModel.create(env.dim, env.n_conditions, cfg.hidden, cfg.activation, seed=seed)
    rng = np.random.default_rng([seed, 7])
    opt = AdamState.zeros(model.params.size, lr=cfg.learning_rate)
    params = model.params
    losses = []
    for _ in range(cfg.iterations):
        c = rng.integers(0, env.n_conditions, size=cfg.batch_size)
        x0 = sample_data(env, c, rng)
        x1 = rng.standard_normal(x0.shape)
        t = rng.uniform(0.0, 1.0, size=cfg.batch_size)
        loss, g = grad_scalar(params, lambda p: fm_loss(model, x0, x1, t, c, params=p))
        params, opt = adam_step(params, g, opt)
        losses.append(loss)
    return model.with_params(params), losses


def ode_samples(model: VelocityModel, c, n: int, T: int, seed: int) -> np.ndarray:
    rng = np.random.default_rng([seed, 11])
    return sample_ode(model, c, rng.standard_normal((n, model.dim)), TimeGrid(T))


def mode_hit_rate(model: VelocityModel, env: GaussMixEnv, n: int = 500, T: int = 40, seed: int = 0) -> float:
    """Fraction of ODE samples within 3*data_std + 0.5 of their condition's center."""
    hits = []
    for c in range(env.n_conditions):
        x = ode_samples(model, c, n, T, seed + c)
        hits.append(np.linalg.norm(x - env.center(c), axis=1) <= 3 * env.data_std + 0.5)
    return float(np.mean(np.concatenate(hits)))


def evaluate(model: VelocityModel, env: GaussMixEnv, rewards: RewardSpec, config: GrpoConfig,
             n_per_condition: int = 64, seed: int = 0) -> list[float]:
    """Mean reward vector of single-chain SDE samples over all conditions."""
    single = BranchSchedule((), n_per_condition)
    vals = []
    for c in range(env.n_conditions):
        tree = rollout_tree(model, c, single, config.grid, config.noise, KeyedNoise(seed, 99, c))
        vals.append(reward_vector(tree.leaf_states(), c, env, rewards))
    return [float(v) for v in np.concatenate(vals).mean(axis=0)]


def noise_table(T_values=(6, 10, 28, 40), a: float = 0.7, t_clip: float = 1e-4) -> list[dict]:
    """sigma_{t_j} sqrt(dt_j) for every denoising step j = T..1."""
    noise = NoiseSchedule(a, t_clip)
    rows = []
    for T in T_values:
        grid = TimeGrid(T)
        for j in range(T, 0, -1):
            rows.append({"T": T, "j": j, "t": grid.t(j), "noise_scale": step_noise_scale(noise, grid, j)})
    return rows


def diversity_table(model: VelocityModel, env: GaussMixEnv, T: int, steps, factor: int, n_trees: int,
                    noise: NoiseSchedule, seed: int) -> list[dict]:
    """Leaf diversity of single-branch trees {b: factor} for each candidate step b."""
    grid = TimeGrid(T)
    rows = []
    for b in steps:
        sched = BranchSchedule(((b, factor),), 1)
        vals = []
        for i in range(n_trees):
            c = i % env.n_conditions
            tree = rollout_tree(model, c, sched, grid, noise, KeyedNoise(seed, 5, i))
            vals.append(leaf_diversity(tree))
        rows.append({"step": b, "mean": float(np.mean(vals)), "std": float(np.std(vals)),
                     "n": n_trees, "values": vals})
    return rows


def bootstrap_mean_diff_ci(a, b, n_boot: int = 5000, level: float = 0.95, seed: int = 0):
    """Percentile bootstrap CI of mean(a) - mean(b) over paired samples."""
    a, b = np.asarray(a), np.asarray(b)
    d = a - b
    rng = np.random.default_rng(seed)
    idx = rng.integers(0, len(d), size=(n_boot, len(d)))
    means = d[idx].mean(axis=1)
    lo, hi = np.quantile(means, [(1 - level) / 2, 1 - (1 - level) / 2])
    return float(lo), float(hi)


def window_means(log_records: list[dict], window: int = 20) -> tuple[np.ndarray, np.ndarray]:
    """Mean reward vector over the first and the last ``window`` iterations."""
    R = np.array([r["mean_reward"] for r in log_records])
    w = min(window, len(R))
    return R[:w].mean(axis=0), R[-w:].mean(axis=0)


def align(model: VelocityModel, env: GaussMixEnv, rewards: RewardSpec, config: GrpoConfig, seed: int,
          metrics_path=None):
    params, records = train(config, model, env, rewards, seed, metrics_path)
    return model.with_params(params), records


