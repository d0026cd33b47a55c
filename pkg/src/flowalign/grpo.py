"""Clipped policy-gradient training of a velocity field on tree rollouts."""
from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .advantage import GroupingConfig, table_array, tree_advantages
from .envs import GaussMixEnv, RewardSpec, reward_vector
from .errors import ConfigError, NumericError, ShapeError
from .flow import KeyedNoise, NoiseSchedule, TimeGrid, Transition, VelocityModel, transition_logprob, transition_mean
from .nn import AdamState, Tensor, adam_step, grad_scalar, minimum
from .rollout import BranchSchedule, TrajectoryTree, leaf_diversity, rollout_tree, validate_schedule

log = logging.getLogger(__name__)


def default_schedule(T: int, root_factor: int = 8) -> BranchSchedule:
    """Two early splits, {T-2: 3, T-4: 2}."""
    return BranchSchedule(((T - 2, 3), (T - 4, 2)), root_factor)


@dataclass
class GrpoConfig:
    time_steps: int = 10
    noise_level: float = 0.7
    t_clip: float = 1e-4
    schedule: BranchSchedule | None = None
    grouping: GroupingConfig = field(default_factory=GroupingConfig)
    eps_clip: float = 0.2
    beta_kl: float = 0.0
    inner_epochs: int = 1
    learning_rate: float = 1e-3
    prompts_per_iter: int = 4
    iterations: int = 100

    def __post_init__(self):
        if self.schedule is None:
            self.schedule = default_schedule(self.time_steps)
        self.validate()

    def validate(self):
        if not 0.0 < self.eps_clip < 1.0:
            raise ConfigError(f"eps_clip must lie in (0, 1), got {self.eps_clip}")
        if self.beta_kl < 0:
            raise ConfigError(f"beta_kl must be >= 0, got {self.beta_kl}")
        if self.inner_epochs < 1:
            raise ConfigError(f"inner_epochs must be >= 1, got {self.inner_epochs}")
        if self.learning_rate < 0:
            raise ConfigError(f"learning_rate must be >= 0, got {self.learning_rate}")
        if self.prompts_per_iter < 1:
            raise ConfigError(f"prompts_per_iter must be >= 1, got {self.prompts_per_iter}")
        if self.iterations < 0:
            raise ConfigError(f"iterations must be >= 0, got {self.iterations}")
        validate_schedule(self.schedule, self.time_steps)

    @property
    def grid(self) -> TimeGrid:
        return TimeGrid(self.time_steps)

    @property
    def noise(self) -> NoiseSchedule:
        return NoiseSchedule(self.noise_level, self.t_clip)


# ---------------------------------------------------------------------------
# per-edge quantities
# ---------------------------------------------------------------------------


def policy_mean(model: VelocityModel, params, x_from, t, dt, sig, cond, noise: NoiseSchedule):
    """Transition mean under ``params`` (ndarray or Tensor), reusing the behaviour sigma."""
    v = model.velocity(x_from, t, cond, params=params)
    return transition_mean(x_from, v, t, dt, noise, sig=sig)


def edge_ratio(model: VelocityModel, params, edge: Transition, noise: NoiseSchedule) -> float:
    mean = policy_mean(model, params, np.atleast_2d(edge.x_from), edge.t, edge.dt, edge.sigma,
                       edge.condition, noise)[0]
    r = math.exp(float(transition_logprob(edge.x_to, mean, edge.noise_scale)) - edge.logp_old)
    if not math.isfinite(r):
        raise NumericError(f"non-finite ratio on the edge into step {edge.step - 1}")
    return r


def clipped_edge_objective(ratio, advantage, eps_clip: float):
    """min(r A, clip(r, 1-eps, 1+eps) A); Tensor ratios stay differentiable."""
    if isinstance(ratio, Tensor):
        return minimum(ratio * advantage, ratio.clip(1.0 - eps_clip, 1.0 + eps_clip) * advantage)
    return np.minimum(ratio * advantage, np.clip(ratio, 1.0 - eps_clip, 1.0 + eps_clip) * advantage)


def kl_edge_penalty(model: VelocityModel, params, ref_params, edge: Transition, noise: NoiseSchedule) -> float:
    """KL between two Gaussians sharing covariance noise_scale^2 I."""
    args = (np.atleast_2d(edge.x_from), edge.t, edge.dt, edge.sigma, edge.condition, noise)
    diff = policy_mean(model, params, *args) - policy_mean(model, ref_params, *args)
    return float((diff ** 2).sum() / (2.0 * edge.noise_scale ** 2))


@dataclass
class EdgeBatch:
    """All edges of a set of trees, ordered by tree, then step descending, then node id."""

    x_from: np.ndarray
    x_to: np.ndarray
    t: np.ndarray
    dt: np.ndarray
    sigma: np.ndarray
    noise_scale: np.ndarray
    logp_old: np.ndarray
    cond: np.ndarray
    advantage: np.ndarray

    @classmethod
    def from_trees(cls, trees: list[TrajectoryTree], tables: list[dict[int, float]]) -> "EdgeBatch":
        if len(trees) != len(tables):
            raise ShapeError("need one advantage table per tree")
        parts = [t.edge_arrays() for t in trees]
        cat = lambda k: np.concatenate([p[k] for p in parts])  # noqa: E731
        return cls(
            x_from=cat("x_from"), x_to=cat("x_to"), t=cat("t"), dt=cat("dt"), sigma=cat("sigma"),
            noise_scale=cat("noise_scale"), logp_old=cat("logp_old"),
            cond=np.concatenate([np.full(len(p["id"]), tr.condition) for p, tr in zip(parts, trees)]),
            advantage=np.concatenate([table_array(tr, tb) for tr, tb in zip(trees, tables)]),
        )

    def __len__(self):
        return len(self.t)


def _batch_means(model, params, batch: EdgeBatch, noise: NoiseSchedule):
    return policy_mean(model, params, batch.x_from, batch.t, batch.dt, batch.sigma, batch.cond, noise)


def batch_ratios(model, params, batch: EdgeBatch, noise: NoiseSchedule):
    mean = _batch_means(model, params, batch, noise)
    logp = transition_logprob(batch.x_to, mean, batch.noise_scale)
    return (logp - batch.logp_old).exp() if isinstance(logp, Tensor) else np.exp(logp - batch.logp_old)


def batch_objective(model: VelocityModel, params, batch: EdgeBatch, config: GrpoConfig, ref_params=None):
    """Edge-mean of clipped objective minus beta * KL. Returns a Tensor if ``params`` is one."""
    noise = config.noise
    mean = _batch_means(model, params, batch, noise)
    logp = transition_logprob(batch.x_to, mean, batch.noise_scale)
    if isinstance(logp, Tensor):
        ratio = (logp - batch.logp_old).exp()
    else:
        ratio = np.exp(logp - batch.logp_old)
    obj = clipped_edge_objective(ratio, batch.advantage, config.eps_clip)
    if config.beta_kl > 0:
        if ref_params is None:
            raise ConfigError("beta_kl > 0 needs reference parameters")
        diff = mean - _batch_means(model, ref_params, batch, noise)
        sq = diff.square().sum(axis=-1) if isinstance(diff, Tensor) else (diff ** 2).sum(axis=-1)
        obj = obj - sq * (config.beta_kl / (2.0 * batch.noise_scale ** 2))
    return obj.mean() if isinstance(obj, Tensor) else float(obj.mean())


def objective_and_grad(model, params, batch, config, ref_params=None) -> tuple[float, np.ndarray]:
    return grad_scalar(params, lambda p: batch_objective(model, p, batch, config, ref_params))


# ---------------------------------------------------------------------------
# training loop
# ---------------------------------------------------------------------------


@dataclass
class TrainState:
    params: np.ndarray
    params_old: np.ndarray
    params_ref: np.ndarray
    opt: AdamState
    iteration: int = 0
    log: list[dict] = field(default_factory=list)

    @classmethod
    def start(cls, params: np.ndarray, config: GrpoConfig) -> "TrainState":
        p = np.array(params, dtype=np.float64, copy=True)
        return cls(p, p.copy(), p.copy(), AdamState.zeros(p.size, lr=config.learning_rate))


def rollout_batch(model: VelocityModel, env: GaussMixEnv, rewards: RewardSpec, config: GrpoConfig,
                  seed: int, iteration: int):
    """Sample prompts, roll out one tree per prompt and score the leaves."""
    prompt_rng = np.random.default_rng([seed, iteration, 0])
    conds = prompt_rng.integers(0, env.n_conditions, size=config.prompts_per_iter)
    trees, R = [], []
    for i, c in enumerate(conds):
        tree = rollout_tree(model, int(c), config.schedule, config.grid, config.noise,
                            KeyedNoise(seed, iteration, 1, i))
        trees.append(tree)
        R.append(reward_vector(tree.leaf_states(), int(c), env, rewards))
    return trees, R


def train_iteration(state: TrainState, model: VelocityModel, env: GaussMixEnv, rewards: RewardSpec,
                    config: GrpoConfig, seed: int) -> tuple[TrainState, dict]:
    """Rollout with a behaviour snapshot, compute advantages, take inner_epochs Adam steps."""
    start = time.perf_counter()
    k = state.iteration
    state.params_old = state.params.copy()
    behaviour = model.with_params(state.params_old)
    trees, R = rollout_batch(behaviour, env, rewards, config, seed, k)
    tables = [tree_advantages(tree, r, config.grouping) for tree, r in zip(trees, R)]
    batch = EdgeBatch.from_trees(trees, tables)
    ref = state.params_ref if config.beta_kl > 0 else None

    objective = grad_norm = None
    params, opt = state.params, state.opt
    try:
        for _ in range(config.inner_epochs):
            J, g = objective_and_grad(model, params, batch, config, ref)
            if objective is None:
                objective, grad_norm = J, float(np.linalg.norm(g))
            params, opt = adam_step(params, -g, opt)
        ratio = batch_ratios(model, params, batch, config.noise)
    except NumericError as exc:
        raise NumericError(f"iteration {k}: {exc}") from exc

    all_R = np.concatenate(R)
    record = {
        "iteration": k,
        "mean_reward": [float(v) for v in all_R.mean(axis=0)],
        "objective": objective,
        "grad_norm": grad_norm,
        "clip_fraction": float(np.mean(np.abs(ratio - 1.0) > config.eps_clip)),
        "mean_abs_ratio_minus_one": float(np.mean(np.abs(ratio - 1.0))),
        "leaf_diversity": float(np.mean([leaf_diversity(t) for t in trees])) if len(trees[0].leaves) > 1 else 0.0,
        "velocity_evals": int(sum(t.velocity_evals for t in trees)),
        "seconds": time.perf_counter() - start,
    }
    state.params, state.opt = params, opt
    state.iteration = k + 1
    state.log.append(record)
    return state, record


def train(config: GrpoConfig, model: VelocityModel, env: GaussMixEnv, rewards: RewardSpec, seed: int,
          metrics_path=None, on_record: Callable[[dict], None] | None = None):
    """Run ``config.iterations`` iterations from ``model.params``; returns (params, metric log)."""
    config.validate()
    state = TrainState.start(model.params, config)
    fh = open(metrics_path, "w") if metrics_path is not None else None
    try:
        for _ in range(config.iterations):
            state, rec = train_iteration(state, model, env, rewards, config, seed)
            if fh is not None:
                fh.write(json.dumps(rec) + "\n")
                fh.flush()
            if on_record is not None:
                on_record(rec)
            log.debug("iter %d reward %s", rec["iteration"], rec["mean_reward"])
    finally:
        if fh is not None:
            fh.close()
    return state.params, state.log
