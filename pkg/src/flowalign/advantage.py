"""Group-relative advantage estimators.

Per-leaf reward arrays are always aligned with ``tree.leaves``. Advantage
tables map an edge, identified by the id of the node it produces, to a scalar.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, ShapeError
from .rollout import TrajectoryTree

AdvantageTable = dict[int, float]

STRATEGIES = ("naive_mix", "reward_grouped")


@dataclass(frozen=True)
class GroupingConfig:
    strategy: str = "reward_grouped"
    temporal: bool = True
    weights: tuple[float, ...] | None = None
    scaled: bool = True
    eps_std: float = 1e-6

    def __post_init__(self):
        if self.strategy not in STRATEGIES:
            raise ConfigError(f"grouping must be one of {STRATEGIES}, got {self.strategy!r}")
        if not self.eps_std > 0:
            raise ConfigError(f"eps_std must be > 0, got {self.eps_std}")
        if self.weights is not None:
            object.__setattr__(self, "weights", tuple(float(w) for w in self.weights))

    def weights_for(self, M: int) -> np.ndarray:
        if self.weights is None:
            return np.ones(M)
        if len(self.weights) != M:
            raise ConfigError(f"weights has {len(self.weights)} entries but there are {M} rewards")
        return np.asarray(self.weights)


def group_normalize(values, eps_std: float = 1e-6) -> np.ndarray:
    """(v - mean) / (population std + eps_std)."""
    v = np.asarray(values, dtype=np.float64)
    if v.ndim != 1 or v.shape[0] < 2:
        raise ShapeError(f"group_normalize needs a 1-D group of size >= 2, got shape {v.shape}")
    d = v - v.mean()
    d -= d.mean()      # second pass removes the rounding residual, so constant groups give exact zeros
    return d / (np.sqrt(np.mean(d * d)) + eps_std)


def naive_mixed_rewards(R, w) -> np.ndarray:
    R = np.atleast_2d(np.asarray(R, dtype=np.float64))
    w = np.asarray(w, dtype=np.float64)
    if R.shape[1] != w.shape[0]:
        raise ShapeError(f"reward matrix has {R.shape[1]} columns but {w.shape[0]} weights")
    return R @ w


def reward_grouped_advantages(R, w, scaled: bool = True, eps_std: float = 1e-6) -> np.ndarray:
    """Normalize each reward column on its own, then take the weighted sum (divided by M if scaled)."""
    R = np.atleast_2d(np.asarray(R, dtype=np.float64))
    G, M = R.shape
    if G < 2:
        raise ShapeError("reward-grouped advantages need at least 2 samples")
    w = np.asarray(w, dtype=np.float64)
    if w.shape != (M,):
        raise ShapeError(f"expected {M} weights, got shape {w.shape}")
    per_reward = np.stack([group_normalize(R[:, m], eps_std) for m in range(M)], axis=1)
    out = per_reward @ w
    return out / M if scaled else out


# ---------------------------------------------------------------------------
# tree estimators
# ---------------------------------------------------------------------------


def _leaf_vector(tree: TrajectoryTree, leaf_rewards) -> np.ndarray:
    r = np.asarray(leaf_rewards, dtype=np.float64)
    if r.shape != (len(tree.leaves),):
        raise ShapeError(f"expected one reward per leaf ({len(tree.leaves)}), got shape {r.shape}")
    return r


def descendant_rewards(tree: TrajectoryTree, leaf_rewards) -> np.ndarray:
    """Mean leaf reward below every node, indexed by node id."""
    r = _leaf_vector(tree, leaf_rewards)
    n = len(tree.nodes)
    total, count = np.zeros(n), np.zeros(n)
    total[tree.leaves] = r
    count[tree.leaves] = 1
    # children always have larger ids than their parent
    for node in reversed(tree.nodes):
        if node.parent is not None:
            total[node.parent] += total[node.id]
            count[node.parent] += count[node.id]
    return total / count


def segments(tree: TrajectoryTree) -> list[tuple[int, int]]:
    """(top, bottom) step ranges between consecutive branch targets, top first.

    Edges producing steps top..bottom form one temporal group; the group's
    members are the nodes at step ``top``.
    """
    bounds = [tree.T - 1] + tree.schedule.targets
    return [(top, bounds[k + 1] + 1 if k + 1 < len(bounds) else 0) for k, top in enumerate(bounds)]


def _chain(tree: TrajectoryTree, head: int, bottom: int) -> list[int]:
    out = [head]
    node = tree.nodes[head]
    while node.step > bottom:
        node = tree.nodes[node.children[0]]
        out.append(node.id)
    return out


def temporal_advantages(tree: TrajectoryTree, leaf_rewards, eps_std: float = 1e-6) -> AdvantageTable:
    """Normalize descendant rewards across the chains of each temporal segment."""
    desc = descendant_rewards(tree, leaf_rewards)
    table: AdvantageTable = {}
    for top, bottom in segments(tree):
        heads = tree.levels[top]
        if len(heads) < 2:
            raise ShapeError(f"segment starting at step {top} has a single chain; nothing to compare")
        adv = group_normalize(desc[heads], eps_std)
        for a, head in zip(adv, heads):
            for nid in _chain(tree, head, bottom):
                table[nid] = float(a)
    return table


def uniform_advantages(tree: TrajectoryTree, leaf_rewards, eps_std: float = 1e-6) -> AdvantageTable:
    """Trajectory-level advantages; an edge shared by several leaves gets their mean."""
    leaf_adv = group_normalize(_leaf_vector(tree, leaf_rewards), eps_std)
    mean_adv = descendant_rewards(tree, leaf_adv)
    return {n.id: float(mean_adv[n.id]) for n in tree.edges()}


def tree_advantages(tree: TrajectoryTree, R, config: GroupingConfig) -> AdvantageTable:
    """Advantages for every edge from a (leaves x M) reward matrix."""
    R = np.asarray(R, dtype=np.float64)
    if R.ndim == 1:
        R = R[:, None]
    M = R.shape[1]
    w = config.weights_for(M)
    estimate = temporal_advantages if config.temporal else uniform_advantages
    if config.strategy == "naive_mix":
        return estimate(tree, naive_mixed_rewards(R, w), config.eps_std)
    per_reward = [estimate(tree, R[:, m], config.eps_std) for m in range(M)]
    scale = 1.0 / M if config.scaled else 1.0
    return {nid: scale * sum(w[m] * per_reward[m][nid] for m in range(M)) for nid in per_reward[0]}


def table_array(tree: TrajectoryTree, table: AdvantageTable) -> np.ndarray:
    """Advantages in ``tree.edges()`` order."""
    try:
        return np.array([table[n.id] for n in tree.edges()])
    except KeyError as exc:
        raise ShapeError(f"advantage table has no entry for edge {exc.args[0]}") from None


def batch_advantages(R, config: GroupingConfig) -> np.ndarray:
    """Advantages for G independent trajectories (the sequential-rollout baseline)."""
    R = np.asarray(R, dtype=np.float64)
    if R.ndim == 1:
        R = R[:, None]
    w = config.weights_for(R.shape[1])
    if config.strategy == "naive_mix":
        return group_normalize(naive_mixed_rewards(R, w), config.eps_std)
    return reward_grouped_advantages(R, w, config.scaled, config.eps_std)

