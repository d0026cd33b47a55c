"""Rectified-flow core: interpolation, flow matching, time grid, noise schedule,
score, ODE/SDE steps and Gaussian transition densities.

Array arguments carry an optional leading batch axis; the last axis is the
sample dimension ``d``. Time is 1 at pure noise and 0 at data.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Protocol, Union

import numpy as np

from .errors import ConfigError, NumericError, ShapeError
from .nn import MlpSpec, Tensor, mlp_apply, mlp_init

LOG_2PI = math.log(2.0 * math.pi)


@dataclass(frozen=True)
class TimeGrid:
    """Uniform grid t_j = j/T, j = 0..T."""

    T: int

    def __post_init__(self):
        if int(self.T) < 1:
            raise ConfigError(f"time_steps must be >= 1, got {self.T}")

    @property
    def t_values(self) -> np.ndarray:
        return np.arange(self.T + 1) / self.T

    def t(self, j: int) -> float:
        return j / self.T

    def dt(self, j: int) -> float:
        if not 1 <= j <= self.T:
            raise ConfigError(f"step index {j} outside 1..{self.T}")
        return self.t(j) - self.t(j - 1)


@dataclass(frozen=True)
class NoiseSchedule:
    a: float = 0.7
    t_clip: float = 1e-4

    def __post_init__(self):
        if self.a < 0 or not math.isfinite(self.a):
            raise ConfigError(f"noise_level must be a finite value >= 0, got {self.a}")
        if not 0.0 < self.t_clip < 0.5:
            raise ConfigError(f"t_clip must lie in (0, 0.5), got {self.t_clip}")


def _clip_time(t, lo, hi):
    return np.minimum(np.maximum(t, lo), hi)


def sigma(schedule: NoiseSchedule, t, t_max: float | None = None):
    """a * sqrt(t / (1 - t)) with t clipped into [t_clip, min(1 - t_clip, t_max)]."""
    hi = 1.0 - schedule.t_clip if t_max is None else min(1.0 - schedule.t_clip, t_max)
    tc = _clip_time(np.asarray(t, dtype=np.float64), schedule.t_clip, hi)
    out = schedule.a * np.sqrt(tc / (1.0 - tc))
    return float(out) if out.ndim == 0 else out


def step_sigma(schedule: NoiseSchedule, grid: TimeGrid, j: int) -> float:
    """Diffusion coefficient used for the step leaving grid index ``j``.

    The singular endpoint t=1 is never evaluated closer than half a grid step
    from 1; otherwise the first Euler-Maruyama step is unstable.
    """
    return sigma(schedule, grid.t(j), t_max=1.0 - 0.5 * grid.dt(j))


def step_noise_scale(schedule: NoiseSchedule, grid: TimeGrid, j: int) -> float:
    return step_sigma(schedule, grid, j) * math.sqrt(grid.dt(j))


def interpolate(x0, x1, t):
    x0 = np.asarray(x0, dtype=np.float64)
    x1 = np.asarray(x1, dtype=np.float64)
    if x0.shape != x1.shape:
        raise ShapeError(f"interpolate: shapes differ {x0.shape} vs {x1.shape}")
    t = np.asarray(t, dtype=np.float64)
    if t.ndim == 1 and x0.ndim == 2:
        t = t[:, None]
    return (1.0 - t) * x0 + t * x1


def score(x, t, v, t_clip: float = 1e-4):
    """Rectified-flow score  -x/t - (1-t)/t * v  (t clipped away from 0 and 1)."""
    t = _clip_time(np.asarray(t, dtype=np.float64), t_clip, 1.0 - t_clip)
    return -np.asarray(x) / t - (1.0 - t) / t * np.asarray(v)


def drift_coefficients(t, dt, sig, t_clip: float = 1e-4):
    """(cx, cv) such that the SDE transition mean is cx * x - cv * v."""
    t = np.maximum(np.asarray(t, dtype=np.float64), t_clip)
    sig = np.asarray(sig, dtype=np.float64)
    k = sig * sig / (2.0 * t)
    return 1.0 - k * dt, dt * (1.0 + k * (1.0 - t))


def transition_mean(x, v, t, dt, schedule: NoiseSchedule, sig=None):
    """x - [v + sigma^2/(2t) (x + (1-t) v)] dt.

    ``v`` may be a Tensor, in which case the result is differentiable in it.
    ``sig`` overrides sigma(schedule, t); the samplers pass the grid value.
    """
    if sig is None:
        sig = sigma(schedule, t)
    cx, cv = drift_coefficients(t, dt, sig, schedule.t_clip)
    x = np.asarray(x, dtype=np.float64)
    cx, cv = np.asarray(cx), np.asarray(cv)
    if cx.ndim == 1 and x.ndim == 2:
        cx, cv = cx[:, None], cv[:, None]
    return cx * x - v * cv


def transition_logprob(x_to, mean, noise_scale):
    """Isotropic Gaussian log-density of ``x_to`` summed over the last axis."""
    ns = np.asarray(noise_scale, dtype=np.float64)
    if np.any(ns <= 0):
        raise ConfigError("noise_scale must be > 0")
    x_to = np.asarray(x_to, dtype=np.float64)
    d = x_to.shape[-1]
    diff = x_to - mean
    sq = diff.square().sum(axis=-1) if isinstance(diff, Tensor) else (diff * diff).sum(axis=-1)
    return sq * (-0.5 / ns ** 2) - 0.5 * d * (LOG_2PI + 2.0 * np.log(ns))


# ---------------------------------------------------------------------------
# velocity fields
# ---------------------------------------------------------------------------


class VelocityField(Protocol):
    dim: int

    def velocity(self, x, t, c): ...


def one_hot(c, n: int) -> np.ndarray:
    c = np.atleast_1d(np.asarray(c, dtype=np.int64))
    if np.any((c < 0) | (c >= n)):
        raise ConfigError(f"condition id out of range 0..{n - 1}: {c}")
    return np.eye(n)[c]


@dataclass
class VelocityModel:
    """MLP velocity field; input is concat(x, t, one_hot(c))."""

    spec: MlpSpec
    params: np.ndarray
    cond_dim: int

    def __post_init__(self):
        if self.spec.input_dim != self.dim + 1 + self.cond_dim:
            raise ConfigError("MLP input_dim must equal d + 1 + cond_dim")

    @property
    def dim(self) -> int:
        return self.spec.output_dim

    @classmethod
    def create(cls, dim: int, cond_dim: int, hidden=(64, 64), activation="tanh", seed=0):
        spec = MlpSpec(dim + 1 + cond_dim, tuple(hidden), dim, activation)
        return cls(spec, mlp_init(spec, seed), cond_dim)

    def with_params(self, params) -> "VelocityModel":
        return VelocityModel(self.spec, np.asarray(params, dtype=np.float64), self.cond_dim)

    def inputs(self, x, t, c) -> np.ndarray:
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        n = x.shape[0]
        t = np.broadcast_to(np.asarray(t, dtype=np.float64), (n,))
        c = np.broadcast_to(np.asarray(c, dtype=np.int64), (n,))
        return np.concatenate([x, t[:, None], one_hot(c, self.cond_dim)], axis=1)

    def velocity(self, x, t, c, params=None):
        """v_theta(x, t, c). Pass a Tensor as ``params`` to get a differentiable output."""
        squeeze = np.ndim(x) == 1
        out = mlp_apply(self.params if params is None else params, self.spec, self.inputs(x, t, c))
        if squeeze:
            return out[0]
        return out


@dataclass
class PointMassFlow:
    """Exact velocity field for data concentrated at ``center``: v = (x - center)/t."""

    center: np.ndarray
    t_clip: float = 1e-4

    def __post_init__(self):
        self.center = np.asarray(self.center, dtype=np.float64)

    @property
    def dim(self) -> int:
        return self.center.shape[0]

    def velocity(self, x, t, c=None):
        t = np.maximum(np.asarray(t, dtype=np.float64), self.t_clip)
        if t.ndim == 1 and np.ndim(x) == 2:
            t = t[:, None]
        return (np.asarray(x) - self.center) / t

    def analytic_score(self, x, t):
        """Score of the marginal N((1-t) center, t^2 I)."""
        return -(np.asarray(x) - (1.0 - t) * self.center) / t ** 2


def fm_loss(model: VelocityModel, x0, x1, t, c, params=None):
    """Mean over the batch of ||v(x_t, t, c) - (x1 - x0)||^2."""
    x0 = np.atleast_2d(np.asarray(x0, dtype=np.float64))
    x1 = np.atleast_2d(np.asarray(x1, dtype=np.float64))
    if x0.shape[0] == 0:
        raise ShapeError("fm_loss needs a non-empty batch")
    t = np.broadcast_to(np.asarray(t, dtype=np.float64), (x0.shape[0],))
    xt = interpolate(x0, x1, t)
    v = model.velocity(xt, t, c, params=params)
    diff = v - (x1 - x0)
    if isinstance(diff, Tensor):
        return diff.square().sum(axis=1).mean()
    return float((diff * diff).sum(axis=1).mean())


# ---------------------------------------------------------------------------
# steps and samplers
# ---------------------------------------------------------------------------


@dataclass
class Transition:
    """One stochastic denoising edge s_j -> s_{j-1}.

    Array fields may carry a leading batch axis when produced by a batched step.
    """

    step: int
    t: float
    dt: float
    x_from: np.ndarray
    x_to: np.ndarray
    mean_old: np.ndarray
    noise_scale: float
    logp_old: Union[float, np.ndarray]
    condition: int
    sigma: float = 0.0


class KeyedNoise:
    """Counter-based Gaussian stream: each (step, node) draw has its own substream.

    Draws are independent of the order in which they are requested, so trees can
    be built in parallel and still reproduce a sequential build exactly.
    """

    def __init__(self, *key: int):
        self.key = tuple(int(k) for k in key)

    def normal(self, step: int, node: int, d: int) -> np.ndarray:
        return np.random.default_rng([*self.key, int(step), int(node)]).standard_normal(d)

    def child(self, *sub: int) -> "KeyedNoise":
        return KeyedNoise(*self.key, *sub)


def _finite(x, where):
    if not np.all(np.isfinite(x)):
        raise NumericError(f"non-finite state {where}")
    return x


def sde_step(model, x, j: int, grid: TimeGrid, schedule: NoiseSchedule, z, c=0):
    """One Euler-Maruyama step from grid index j to j-1."""
    if j < 1:
        raise ConfigError("sde_step needs j >= 1")
    x = _finite(np.asarray(x, dtype=np.float64), f"entering step {j}")
    z = np.asarray(z, dtype=np.float64)
    if z.shape != x.shape:
        raise ShapeError(f"noise shape {z.shape} does not match state shape {x.shape}")
    t, dt = grid.t(j), grid.dt(j)
    sig = step_sigma(schedule, grid, j)
    v = model.velocity(x, t, c)
    mean = transition_mean(x, v, t, dt, schedule, sig=sig)
    ns = sig * math.sqrt(dt)
    x_next = _finite(mean + ns * z, f"after step {j}")
    # a = 0 degenerates to the ODE step; there is no density to record
    logp = transition_logprob(x_next, mean, ns) if ns > 0 else 0.0
    return x_next, Transition(j, t, dt, x, x_next, mean, ns, logp, c, sig)


def ode_step(model, x, j: int, grid: TimeGrid, c=0):
    if j < 1:
        raise ConfigError("ode_step needs j >= 1")
    return np.asarray(x, dtype=np.float64) - model.velocity(x, grid.t(j), c) * grid.dt(j)


def _draw(rng, j: int, grid: TimeGrid, shape) -> np.ndarray:
    if isinstance(rng, KeyedNoise):
        if len(shape) != 1:
            raise ShapeError("keyed noise streams draw one state at a time")
        # chain node ids count down from the root: state at step j-1 is node T-j+1
        return rng.normal(j - 1, grid.T - j + 1, shape[0])
    return rng.standard_normal(shape)


def sample_sde(model, c, x_T, grid: TimeGrid, schedule: NoiseSchedule, rng):
    """Run T SDE steps from x_T. ``rng`` is a numpy Generator or a KeyedNoise."""
    x = _finite(np.asarray(x_T, dtype=np.float64), "at x_T")
    transitions = []
    for j in range(grid.T, 0, -1):
        x, tr = sde_step(model, x, j, grid, schedule, _draw(rng, j, grid, x.shape), c)
        transitions.append(tr)
    return x, transitions


def sample_ode(model, c, x_T, grid: TimeGrid):
    x = np.asarray(x_T, dtype=np.float64)
    for j in range(grid.T, 0, -1):
        x = ode_step(model, x, j, grid, c)
    return x
