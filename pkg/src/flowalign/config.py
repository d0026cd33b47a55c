"""Flat ``key = value`` experiment configuration.

Every key, its default and its meaning is listed in docs/config.md. Branch
schedules use code-level notation: ``branch_schedule = 2:3,4:2`` splits the
2nd and 4th denoising steps, i.e. targets T-2 and T-4.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, fields
from pathlib import Path

from .advantage import STRATEGIES, GroupingConfig
from .envs import REWARD_NAMES, GaussMixEnv, RewardSpec, default_centers
from .errors import ConfigError, ScheduleError
from .experiments import PretrainConfig
from .grpo import GrpoConfig
from .rollout import BranchSchedule, validate_schedule


def parse_pairs(text: str, key: str) -> list[tuple[int, int]]:
    pairs = []
    for item in filter(None, (s.strip() for s in text.split(","))):
        try:
            a, b = item.split(":")
            pairs.append((int(a), int(b)))
        except ValueError:
            raise ConfigError(f"{key}: expected comma-separated 'step:factor' pairs, got {item!r}") from None
    return pairs


def _floats(text: str, key: str) -> tuple[float, ...]:
    try:
        return tuple(float(s) for s in text.split(",") if s.strip())
    except ValueError:
        raise ConfigError(f"{key}: expected comma-separated numbers, got {text!r}") from None


def _ints(text: str, key: str) -> tuple[int, ...]:
    try:
        return tuple(int(s) for s in text.split(",") if s.strip())
    except ValueError:
        raise ConfigError(f"{key}: expected comma-separated integers, got {text!r}") from None


def _bool(text: str, key: str) -> bool:
    t = text.strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ConfigError(f"{key}: expected true/false, got {text!r}")


@dataclass
class ExperimentConfig:
    # sampler
    time_steps: int = 10
    noise_level: float = 0.7
    t_clip: float = 1e-4
    # tree
    branch_schedule: str = "2:3,4:2"
    root_factor: int = 8
    # advantages
    grouping: str = "reward_grouped"
    temporal: bool = True
    scaled: bool = True
    weights: str = ""
    eps_std: float = 1e-6
    # policy update
    eps_clip: float = 0.2
    beta_kl: float = 0.0
    inner_epochs: int = 1
    learning_rate: float = 1e-3
    iterations: int = 150
    prompts_per_iter: int = 4
    # environment
    mode_radius: float = 2.0
    data_std: float = 0.3
    rewards: str = "target,ring,angle"
    target_width: float = 0.3
    ring_radius: float = 3.5
    ring_width: float = 0.5
    ring_scale: float = 50.0
    angle_offset: float = 0.0
    # pretraining
    pretrain_iterations: int = 3000
    pretrain_batch: int = 256
    pretrain_lr: float = 2e-3
    hidden: str = "64,64"
    activation: str = "tanh"
    # analyses
    diversity_steps: str = "8,2"
    diversity_factor: int = 4
    diversity_trees: int = 20
    noise_table_T: str = "6,10,28,40"
    ablate_schedules: str = "2:3,4:2;3:2,7:3"
    ablate_weights: str = ""
    eval_samples: int = 64
    window: int = 20
    # run
    seed: int = 0
    out: str = "runs/default"
    checkpoint: str = ""

    @classmethod
    def keys(cls) -> list[str]:
        return [f.name for f in fields(cls)]

    @classmethod
    def from_text(cls, text: str, source: str = "<config>") -> "ExperimentConfig":
        values = {}
        for n, raw in enumerate(text.splitlines(), 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"{source}:{n}: expected 'key = value', got {raw!r}")
            k, v = (s.strip() for s in line.split("=", 1))
            values[k] = v
        return cls.from_strings(values)

    @classmethod
    def from_file(cls, path) -> "ExperimentConfig":
        return cls.from_text(Path(path).read_text(), str(path))

    @classmethod
    def from_strings(cls, values: dict[str, str], base: "ExperimentConfig | None" = None) -> "ExperimentConfig":
        cfg = base or cls()
        types = {f.name: f.type for f in fields(cls)}
        for k, v in values.items():
            if k not in types:
                raise ConfigError(f"unknown config key {k!r}")
            kind = types[k]
            try:
                if kind == "int":
                    val = int(v)
                elif kind == "float":
                    val = float(v)
                elif kind == "bool":
                    val = _bool(v, k)
                else:
                    val = v
            except ValueError:
                raise ConfigError(f"{k}: cannot parse {v!r} as {kind}") from None
            setattr(cfg, k, val)
        cfg.validate()
        return cfg

    def to_text(self) -> str:
        def fmt(v):
            if isinstance(v, bool):
                return "true" if v else "false"
            return repr(v) if isinstance(v, float) else str(v)

        return "".join(f"{f.name} = {fmt(getattr(self, f.name))}\n" for f in fields(self))

    # validation --------------------------------------------------------------
    def validate(self) -> None:
        def need(ok, key, what):
            if not ok:
                raise ConfigError(f"{key}: {what} (got {getattr(self, key)!r})")

        need(self.time_steps >= 2, "time_steps", "must be >= 2")
        need(math.isfinite(self.noise_level) and self.noise_level >= 0, "noise_level", "must be >= 0")
        need(0 < self.t_clip < 0.5, "t_clip", "must lie in (0, 0.5)")
        need(self.root_factor >= 1, "root_factor", "must be >= 1")
        need(self.grouping in STRATEGIES, "grouping", f"must be one of {STRATEGIES}")
        need(self.eps_std > 0, "eps_std", "must be > 0")
        need(0 < self.eps_clip < 1, "eps_clip", "must lie in (0, 1)")
        need(self.beta_kl >= 0, "beta_kl", "must be >= 0")
        need(self.inner_epochs >= 1, "inner_epochs", "must be >= 1")
        need(self.learning_rate >= 0, "learning_rate", "must be >= 0")
        need(self.iterations >= 0, "iterations", "must be >= 0")
        need(self.prompts_per_iter >= 1, "prompts_per_iter", "must be >= 1")
        need(self.mode_radius > 0, "mode_radius", "must be > 0")
        need(self.data_std >= 0, "data_std", "must be >= 0")
        for key in ("target_width", "ring_width", "ring_scale"):
            need(math.isfinite(getattr(self, key)) and getattr(self, key) > 0, key, "must be > 0")
        need(self.pretrain_iterations >= 0, "pretrain_iterations", "must be >= 0")
        need(self.pretrain_batch >= 1, "pretrain_batch", "must be >= 1")
        need(self.pretrain_lr > 0, "pretrain_lr", "must be > 0")
        need(self.activation in ("tanh", "relu"), "activation", "must be tanh or relu")
        need(self.diversity_factor >= 2, "diversity_factor", "must be >= 2")
        need(self.diversity_trees >= 2, "diversity_trees", "must be >= 2")
        need(self.eval_samples >= 2, "eval_samples", "must be >= 2")
        need(self.window >= 1, "window", "must be >= 1")
        hidden = _ints(self.hidden, "hidden")
        need(len(hidden) > 0 and all(h >= 1 for h in hidden), "hidden", "needs at least one width >= 1")
        names = self.reward_names
        need(len(names) > 0 and all(n in REWARD_NAMES for n in names), "rewards",
             f"must list rewards from {REWARD_NAMES}")
        w = _floats(self.weights, "weights")
        need(not w or len(w) == len(names), "weights", f"needs one weight per reward ({len(names)})")
        self.schedule()
        for s in self.ablate_schedule_list():
            self._checked_schedule(s, "ablate_schedules")
        for ws in self.ablate_weight_list():
            need(len(ws) == len(names), "ablate_weights", f"each weight vector needs {len(names)} entries")
        for T in _ints(self.noise_table_T, "noise_table_T"):
            need(T >= 1, "noise_table_T", "entries must be >= 1")
        for b in _ints(self.diversity_steps, "diversity_steps"):
            need(0 <= b < self.time_steps - 1, "diversity_steps", f"entries must lie in 0..{self.time_steps - 2}")

    def _checked_schedule(self, text: str, key: str) -> BranchSchedule:
        pairs = parse_pairs(text, key)
        for i, _ in pairs:
            if not 2 <= i <= self.time_steps:
                raise ScheduleError(f"{key}: denoising step {i} must lie in 2..{self.time_steps}")
        sched = BranchSchedule.from_steps_from_end(pairs, self.time_steps, self.root_factor)
        try:
            validate_schedule(sched, self.time_steps)
        except ScheduleError as exc:
            raise ScheduleError(f"{key}: {exc}") from None
        return sched

    # builders ----------------------------------------------------------------
    @property
    def reward_names(self) -> tuple[str, ...]:
        return tuple(s.strip() for s in self.rewards.split(",") if s.strip())

    def schedule(self) -> BranchSchedule:
        return self._checked_schedule(self.branch_schedule, "branch_schedule")

    def ablate_schedule_list(self) -> list[str]:
        return [s.strip() for s in self.ablate_schedules.split(";") if s.strip()]

    def ablate_weight_list(self) -> list[tuple[float, ...]]:
        return [_floats(s, "ablate_weights") for s in self.ablate_weights.split(";") if s.strip()]

    def env(self) -> GaussMixEnv:
        return GaussMixEnv(default_centers(self.mode_radius), self.data_std)

    def reward_spec(self) -> RewardSpec:
        return RewardSpec(self.reward_names, self.target_width, self.ring_radius, self.ring_width,
                          self.ring_scale, self.angle_offset)

    def grouping_config(self, **override) -> GroupingConfig:
        w = _floats(self.weights, "weights") or None
        kw = dict(strategy=self.grouping, temporal=self.temporal, weights=w, scaled=self.scaled,
                  eps_std=self.eps_std)
        kw.update(override)
        return GroupingConfig(**kw)

    def grpo_config(self, schedule: BranchSchedule | None = None, grouping: GroupingConfig | None = None) -> GrpoConfig:
        return GrpoConfig(
            time_steps=self.time_steps, noise_level=self.noise_level, t_clip=self.t_clip,
            schedule=schedule or self.schedule(), grouping=grouping or self.grouping_config(),
            eps_clip=self.eps_clip, beta_kl=self.beta_kl, inner_epochs=self.inner_epochs,
            learning_rate=self.learning_rate, prompts_per_iter=self.prompts_per_iter,
            iterations=self.iterations,
        )

    def pretrain_config(self) -> PretrainConfig:
        return PretrainConfig(self.pretrain_iterations, self.pretrain_batch, self.pretrain_lr,
                              _ints(self.hidden, "hidden"), self.activation)
