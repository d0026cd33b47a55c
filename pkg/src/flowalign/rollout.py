"""Tree-structured and sequential rollouts.

A schedule entry ``b: B`` means the transition that *produces* the state at
step ``b`` is replicated: velocity is evaluated once at the parent (step b+1),
the transition mean is shared and ``B`` independent noises are drawn. The root
factor ``B_0`` is the same rule applied at step T-1.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Iterable

import numpy as np

from .errors import ScheduleError
from .flow import (KeyedNoise, NoiseSchedule, TimeGrid, Transition, sample_sde, step_noise_scale,
                   step_sigma, transition_logprob, transition_mean)


@dataclass(frozen=True)
class BranchSchedule:
    """Branch target steps (strictly decreasing) with their factors, plus B_0."""

    entries: tuple[tuple[int, int], ...] = ()
    root_factor: int = 1

    def __post_init__(self):
        object.__setattr__(self, "entries", tuple((int(b), int(k)) for b, k in self.entries))

    @classmethod
    def from_mapping(cls, mapping: dict[int, int] | Iterable[tuple[int, int]], root_factor: int = 1):
        items = mapping.items() if isinstance(mapping, dict) else mapping
        return cls(tuple(sorted(items, key=lambda e: -e[0])), root_factor)

    @classmethod
    def from_steps_from_end(cls, pairs: Iterable[tuple[int, int]], T: int, root_factor: int = 1):
        """Build from code-level notation ``{i: B}`` where i counts denoising steps from the start.

        ``{2: 3, 4: 2}`` with T=10 means targets 8 and 6.
        """
        return cls(tuple((T - i, k) for i, k in pairs), root_factor)

    @property
    def targets(self) -> list[int]:
        return [b for b, _ in self.entries]

    def factor(self, step: int, T: int) -> int:
        """Number of children per node when producing ``step``."""
        if step == T - 1:
            return self.root_factor
        return dict(self.entries).get(step, 1)

    def to_steps_from_end(self, T: int) -> str:
        return ",".join(f"{T - b}:{k}" for b, k in self.entries)


def validate_schedule(schedule: BranchSchedule, T: int) -> None:
    """Raise ScheduleError unless the schedule describes a valid tree for T steps."""
    if T < 1:
        raise ScheduleError(f"time_steps must be >= 1, got {T}")
    if schedule.root_factor < 1:
        raise ScheduleError(f"root_factor must be >= 1, got {schedule.root_factor}")
    seen = set()
    prev = None
    for b, k in schedule.entries:
        if b in seen:
            raise ScheduleError(f"duplicate branch target {b}")
        seen.add(b)
        if b >= T - 1:
            raise ScheduleError(f"branch target {b} must be < T-1 = {T - 1} (T-1 is the root branch)")
        if b < 0:
            raise ScheduleError(f"branch target {b} must be >= 0")
        if k < 2:
            raise ScheduleError(f"branch factor at target {b} must be >= 2, got {k}")
        if prev is not None and b >= prev:
            raise ScheduleError(f"branch targets must be strictly decreasing, got {b} after {prev}")
        prev = b


def leaf_count(schedule: BranchSchedule) -> int:
    return schedule.root_factor * math.prod(k for _, k in schedule.entries)


def level_sizes(schedule: BranchSchedule, T: int) -> dict[int, int]:
    """Schedule-implied node count N_j for every step j = T..0."""
    sizes = {T: 1}
    for j in range(T - 1, -1, -1):
        sizes[j] = sizes[j + 1] * schedule.factor(j, T)
    return sizes


@dataclass
class CostReport:
    velocity_evals: int
    transitions: int
    leaves: int


def velocity_eval_count(schedule: BranchSchedule, T: int) -> CostReport:
    """One velocity evaluation per live node per step; one transition per edge."""
    validate_schedule(schedule, T)
    n = level_sizes(schedule, T)
    return CostReport(
        velocity_evals=sum(n[p] for p in range(T, 0, -1)),
        transitions=sum(n[j] for j in range(T)),
        leaves=n[0],
    )


@dataclass
class TreeNode:
    id: int
    step: int
    state: np.ndarray
    parent: int | None = None
    transition: Transition | None = None
    children: list[int] = field(default_factory=list)


@dataclass
class TrajectoryTree:
    condition: int
    T: int
    schedule: BranchSchedule
    nodes: list[TreeNode]
    levels: dict[int, list[int]]
    velocity_evals: int = 0

    @property
    def leaves(self) -> list[int]:
        return self.levels[0]

    @property
    def root(self) -> TreeNode:
        return self.nodes[self.levels[self.T][0]]

    def leaf_states(self) -> np.ndarray:
        return np.stack([self.nodes[i].state for i in self.leaves])

    def edges(self) -> list[TreeNode]:
        """Non-root nodes ordered by step descending, then id."""
        return [self.nodes[i] for j in range(self.T - 1, -1, -1) for i in self.levels[j]]

    def cost(self) -> CostReport:
        return CostReport(self.velocity_evals, len(self.nodes) - 1, len(self.leaves))

    def edge_arrays(self) -> dict[str, np.ndarray]:
        """Stacked transition data for every edge, in ``edges()`` order."""
        es = self.edges()
        tr = [e.transition for e in es]
        return {
            "id": np.array([e.id for e in es]),
            "step": np.array([x.step for x in tr]),
            "t": np.array([x.t for x in tr]),
            "dt": np.array([x.dt for x in tr]),
            "x_from": np.stack([x.x_from for x in tr]),
            "x_to": np.stack([x.x_to for x in tr]),
            "mean_old": np.stack([x.mean_old for x in tr]),
            "noise_scale": np.array([x.noise_scale for x in tr]),
            "sigma": np.array([x.sigma for x in tr]),
            "logp_old": np.array([x.logp_old for x in tr]),
        }


def rollout_tree(model, c: int, schedule: BranchSchedule, grid: TimeGrid,
                 noise_sched: NoiseSchedule, rng: KeyedNoise) -> TrajectoryTree:
    """Build a tree level by level; each live node's velocity is evaluated once."""
    T = grid.T
    validate_schedule(schedule, T)
    root = TreeNode(0, T, rng.normal(T, 0, model.dim))
    nodes = [root]
    levels = {T: [0]}
    evals = 0
    for p in range(T, 0, -1):
        parents = levels[p]
        X = np.stack([nodes[i].state for i in parents])
        t, dt = grid.t(p), grid.dt(p)
        sig = step_sigma(noise_sched, grid, p)
        ns = step_noise_scale(noise_sched, grid, p)
        V = model.velocity(X, t, c)
        evals += len(parents)
        means = transition_mean(X, V, t, dt, noise_sched, sig=sig)
        k = schedule.factor(p - 1, T)
        level = []
        for row, pid in enumerate(parents):
            mu = means[row]
            for _ in range(k):
                nid = len(nodes)
                x = mu + ns * rng.normal(p - 1, nid, model.dim)
                tr = Transition(p, t, dt, nodes[pid].state, x, mu, ns,
                                float(transition_logprob(x, mu, ns)), c, sig)
                nodes.append(TreeNode(nid, p - 1, x, pid, tr))
                nodes[pid].children.append(nid)
                level.append(nid)
        levels[p - 1] = level
    return TrajectoryTree(c, T, schedule, nodes, levels, evals)


def rollout_sequential(model, c: int, G: int, grid: TimeGrid, noise_sched: NoiseSchedule,
                       rng: KeyedNoise) -> list[tuple[np.ndarray, list[Transition]]]:
    """G independent chains; chain i draws from ``rng.child(i)``."""
    if G < 1:
        raise ScheduleError(f"group size must be >= 1, got {G}")
    out = []
    for i in range(G):
        stream = rng.child(i)
        x_T = stream.normal(grid.T, 0, model.dim)
        out.append(sample_sde(model, c, x_T, grid, noise_sched, stream))
    return out


def descendants(tree: TrajectoryTree, node_id: int) -> set[int]:
    if not 0 <= node_id < len(tree.nodes):
        raise KeyError(f"unknown node id {node_id}")
    out, stack = set(), [node_id]
    while stack:
        n = tree.nodes[stack.pop()]
        if n.step == 0:
            out.add(n.id)
        stack.extend(n.children)
    return out


def leaf_diversity(tree_or_states) -> float:
    """Mean pairwise Euclidean distance between leaf states."""
    X = tree_or_states.leaf_states() if isinstance(tree_or_states, TrajectoryTree) else np.asarray(tree_or_states, dtype=np.float64)
    if X.ndim == 1:
        X = X[:, None]
    if X.shape[0] < 2:
        raise ValueError("leaf_diversity needs at least 2 leaves")
    iu = np.triu_indices(len(X), k=1)
    return float(np.linalg.norm(X[:, None, :] - X[None, :, :], axis=-1)[iu].mean())


def dump_tree(tree: TrajectoryTree, path) -> None:
    """One JSON record per node: id, step, parent, state, logp_old, noise_scale."""
    with open(path, "w") as fh:
        for n in tree.nodes:
            tr = n.transition
            fh.write(json.dumps({
                "id": n.id,
                "step": n.step,
                "parent": n.parent,
                "state": n.state.tolist(),
                "logp_old": None if tr is None else tr.logp_old,
                "noise_scale": None if tr is None else tr.noise_scale,
            }) + "\n")
