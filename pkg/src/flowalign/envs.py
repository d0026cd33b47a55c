"""Toy conditional data distributions and closed-form reward functions.

The condition id plays the role of a prompt: condition ``c`` selects mode
``centers[c]``. Rewards are deliberately heterogeneous in scale and variance.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError

REWARD_NAMES = ("target", "ring", "angle")


def default_centers(radius: float = 2.0) -> np.ndarray:
    return radius * np.array([[1.0, 1.0], [-1.0, 1.0], [-1.0, -1.0], [1.0, -1.0]])


@dataclass
class GaussMixEnv:
    centers: np.ndarray = field(default_factory=default_centers)
    data_std: float = 0.3

    def __post_init__(self):
        self.centers = np.atleast_2d(np.asarray(self.centers, dtype=np.float64))
        if self.n_conditions < 2:
            raise ConfigError("the environment needs at least 2 modes")
        if len({tuple(c) for c in self.centers}) != self.n_conditions:
            raise ConfigError("mode centers must be distinct")
        if self.data_std < 0:
            raise ConfigError(f"data_std must be >= 0, got {self.data_std}")

    @property
    def dim(self) -> int:
        return self.centers.shape[1]

    @property
    def n_conditions(self) -> int:
        return self.centers.shape[0]

    def center(self, c) -> np.ndarray:
        c = np.asarray(c)
        if np.any((c < 0) | (c >= self.n_conditions)):
            raise ConfigError(f"unknown condition {c}")
        return self.centers[c]

    def phase(self, c) -> np.ndarray:
        mu = self.center(c)
        return np.arctan2(mu[..., 1], mu[..., 0])


@dataclass(frozen=True)
class RewardSpec:
    names: tuple[str, ...] = REWARD_NAMES
    target_width: float = 0.3
    ring_radius: float = 3.5
    ring_width: float = 0.5
    ring_scale: float = 50.0
    angle_offset: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "names", tuple(self.names))
        if not self.names:
            raise ConfigError("at least one reward is required")
        for n in self.names:
            if n not in REWARD_NAMES:
                raise ConfigError(f"unknown reward {n!r}; choose from {REWARD_NAMES}")
        for key in ("target_width", "ring_width", "ring_scale"):
            v = getattr(self, key)
            if not (math.isfinite(v) and v > 0):
                raise ConfigError(f"{key} must be a finite value > 0, got {v}")
        if not math.isfinite(self.ring_radius) or not math.isfinite(self.angle_offset):
            raise ConfigError("ring_radius and angle_offset must be finite")

    @property
    def M(self) -> int:
        return len(self.names)


def sample_data(env: GaussMixEnv, c, rng: np.random.Generator, n: int | None = None) -> np.ndarray:
    """mu_c + data_std * N(0, I); ``c`` may be an array of condition ids."""
    mu = env.center(c)
    shape = mu.shape if n is None else (n, env.dim)
    return mu + env.data_std * rng.standard_normal(shape)


def reward_target(x, c, env: GaussMixEnv, width: float):
    x = np.asarray(x, dtype=np.float64)
    d2 = ((x - env.center(c)) ** 2).sum(axis=-1)
    return np.exp(-d2 / (2.0 * width ** 2))


def reward_ring(x, radius: float, width: float, scale: float):
    if scale <= 0:
        raise ConfigError("ring scale must be > 0")
    r = np.linalg.norm(np.asarray(x, dtype=np.float64), axis=-1)
    return scale * np.exp(-((r - radius) ** 2) / (2.0 * width ** 2))


def reward_angle(x, c, env: GaussMixEnv, offset: float = 0.0):
    """0.5 (1 + cos(angle(x) - phase_c)); 0.5 at the origin."""
    x = np.asarray(x, dtype=np.float64)
    phi = env.phase(c) + offset
    val = 0.5 * (1.0 + np.cos(np.arctan2(x[..., 1], x[..., 0]) - phi))
    return np.where((x[..., 0] == 0) & (x[..., 1] == 0), 0.5, val)


def reward_vector(x, c, env: GaussMixEnv, spec: RewardSpec) -> np.ndarray:
    """Rewards in ``spec.names`` order along the last axis."""
    cols = []
    for name in spec.names:
        if name == "target":
            cols.append(reward_target(x, c, env, spec.target_width))
        elif name == "ring":
            cols.append(reward_ring(x, spec.ring_radius, spec.ring_width, spec.ring_scale))
        else:
            cols.append(reward_angle(x, c, env, spec.angle_offset))
    return np.stack(np.broadcast_arrays(*cols), axis=-1).astype(np.float64)
