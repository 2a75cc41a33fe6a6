"""Comparison sampling schemes: random test sampling and the Mondrian
tree/forest active learner that samples proportionally to the per-cuboid
root MSE times the test density.

The Mondrian partition is generated independently of the data: a cell with
birth time t splits after an exponential waiting time with rate equal to
the sum of its side lengths, provided the split time stays within the
lifetime. The split axis is chosen proportionally to side length and the
cut is uniform along that side.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .density import DensityField, sample_from_density
from .errors import ValidationError
from .lps import Dataset


def random_test_sampling(q: DensityField, n: int, seed) -> np.ndarray:
    return sample_from_density(q, n, seed)


def mondrian_lifetime(n: float, d: int, lambda_coeff: float) -> float:
    """``lambda (n^(1/(2+d)) - 1)``."""
    if lambda_coeff <= 0:
        raise ValidationError("lambda must be positive")
    return lambda_coeff * (n ** (1.0 / (2 + d)) - 1.0)


@dataclass(eq=False)
class MondrianTree:
    """Axis-aligned random partition with per-leaf label statistics.

    Node arrays: ``axis`` and ``cut`` (axis -1 marks a leaf), ``left`` and
    ``right`` child ids, ``lo``/``hi`` cell bounds and split ``time``.
    """

    box: np.ndarray
    lifetime: float
    axis: np.ndarray
    cut: np.ndarray
    left: np.ndarray
    right: np.ndarray
    lo: np.ndarray
    hi: np.ndarray
    time: np.ndarray
    count: np.ndarray = None
    mean: np.ndarray = None
    mse: np.ndarray = None
    global_mean: float = 0.0
    global_var: float = 0.0

    @property
    def leaves(self) -> np.ndarray:
        return np.flatnonzero(self.axis < 0)

    def leaf_of(self, points) -> np.ndarray:
        """Leaf id of every point (vectorized root-to-leaf traversal)."""
        points = np.asarray(points, dtype=float).reshape(-1, len(self.box))
        node = np.zeros(len(points), dtype=np.int64)
        active = np.flatnonzero(self.axis[node] >= 0)
        while len(active):
            nd = node[active]
            ax = self.axis[nd]
            go_left = points[active, ax] <= self.cut[nd]
            node[active] = np.where(go_left, self.left[nd], self.right[nd])
            active = active[self.axis[node[active]] >= 0]
        return node

    def predict(self, points) -> np.ndarray:
        """Leaf mean; the global mean where the leaf is empty."""
        leaf = self.leaf_of(points)
        out = self.mean[leaf].copy()
        out[self.count[leaf] == 0] = self.global_mean
        return out


def _grow(box, lifetime, rng):
    """Generate the partition breadth first."""
    d = len(box)
    lo = [box[:, 0].copy()]
    hi = [box[:, 1].copy()]
    time = [0.0]
    axis, cut, left, right = [-1], [np.nan], [-1], [-1]
    frontier = np.array([0])
    while len(frontier):
        flo = np.array([lo[i] for i in frontier])
        fhi = np.array([hi[i] for i in frontier])
        side = fhi - flo
        rate = side.sum(axis=1)
        wait = rng.exponential(1.0, len(frontier)) / rate
        t_split = np.array([time[i] for i in frontier]) + wait
        ax_u = rng.random(len(frontier))
        cut_u = rng.random(len(frontier))
        nxt = []
        for r, node in enumerate(frontier):
            if t_split[r] > lifetime:
                continue
            cum = np.cumsum(side[r]) / rate[r]
            a = int(min(np.searchsorted(cum, ax_u[r], side="right"), d - 1))
            c = flo[r, a] + cut_u[r] * side[r, a]
            axis[node], cut[node] = a, c
            for child in (0, 1):
                clo, chi = flo[r].copy(), fhi[r].copy()
                if child == 0:
                    chi[a] = c
                else:
                    clo[a] = c
                lo.append(clo)
                hi.append(chi)
                time.append(t_split[r])
                axis.append(-1)
                cut.append(np.nan)
                left.append(-1)
                right.append(-1)
                if child == 0:
                    left[node] = len(lo) - 1
                else:
                    right[node] = len(lo) - 1
                nxt.append(len(lo) - 1)
        frontier = np.array(nxt, dtype=np.int64)
    return (np.array(axis), np.array(cut), np.array(left), np.array(right),
            np.array(lo), np.array(hi), np.array(time))


def _parents(left, right):
    parent = np.full(len(left), -1)
    inner = np.flatnonzero(left >= 0)
    parent[left[inner]] = inner
    parent[right[inner]] = inner
    return parent


def mondrian_fit(data: Dataset, lifetime: float, seed) -> MondrianTree:
    """Grow a partition of ``data.box`` and store per-leaf label statistics.

    A leaf with fewer than two points takes the MSE of its nearest ancestor
    cuboid holding at least two; the global label variance is the last
    resort.
    """
    if data.n < 1:
        raise ValidationError("need at least one point")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    tree = MondrianTree(data.box, float(lifetime), *_grow(data.box, max(lifetime, 0.0), rng))
    return _fill_statistics(tree, data)


def _fill_statistics(tree: MondrianTree, data: Dataset) -> MondrianTree:
    leaf = tree.leaf_of(data.inputs)
    m = len(tree.axis)
    y = data.labels
    count = np.bincount(leaf, minlength=m).astype(float)
    s1 = np.bincount(leaf, weights=y, minlength=m)
    s2 = np.bincount(leaf, weights=y * y, minlength=m)
    parent = _parents(tree.left, tree.right)
    # children carry larger ids than their parents, so one reverse pass
    # accumulates the sums of every cuboid
    for node in range(m - 1, 0, -1):
        p = parent[node]
        count[p] += count[node]
        s1[p] += s1[node]
        s2[p] += s2[node]
    mean = np.where(count > 0, s1 / np.maximum(count, 1), np.nan)
    mse = np.where(count >= 2, np.maximum(s2 / np.maximum(count, 1) - mean ** 2, 0.0), np.nan)
    tree.global_mean = float(np.mean(y))
    tree.global_var = float(np.var(y))
    for node in range(m):
        if np.isnan(mse[node]):
            p = parent[node]
            mse[node] = tree.global_var if p < 0 else mse[p]
    tree.count = count.astype(np.int64)
    tree.mean = mean
    tree.mse = mse
    return tree


@dataclass(eq=False)
class MondrianForest:
    trees: list

    def predict(self, points) -> np.ndarray:
        """Average over trees whose leaf is nonempty; global mean otherwise."""
        total = 0.0
        hits = 0
        for t in self.trees:
            leaf = t.leaf_of(points)
            ok = t.count[leaf] > 0
            total = total + np.where(ok, t.mean[leaf], 0.0)
            hits = hits + ok
        out = np.where(hits > 0, total / np.maximum(hits, 1), self.trees[0].global_mean)
        return out


def refit(model, data: Dataset):
    """Same partition(s), label statistics recomputed from ``data``."""
    if data.n < 1:
        raise ValidationError("need at least one point")
    if isinstance(model, MondrianForest):
        return MondrianForest([refit(t, data) for t in model.trees])
    tree = MondrianTree(model.box, model.lifetime, model.axis, model.cut, model.left,
                        model.right, model.lo, model.hi, model.time)
    return _fill_statistics(tree, data)


def forest_fit(data: Dataset, lifetime: float, n_trees: int, seed) -> MondrianForest:
    if n_trees < 1:
        raise ValidationError("need at least one tree")
    ss = seed if isinstance(seed, np.random.SeedSequence) else np.random.SeedSequence(seed)
    seeds = ss.spawn(n_trees)
    return MondrianForest([mondrian_fit(data, lifetime, np.random.default_rng(s))
                           for s in seeds])


def _tree_density(tree: MondrianTree, q: DensityField) -> np.ndarray:
    nodes = q.grid.nodes
    leaf = tree.leaf_of(nodes)
    m = len(tree.axis)
    # mean of q over the grid nodes inside each cuboid
    qsum = np.bincount(leaf, weights=q.values, minlength=m)
    qcnt = np.bincount(leaf, minlength=m)
    qbar = qsum / np.maximum(qcnt, 1)
    vals = np.sqrt(tree.mse[leaf]) * qbar[leaf]
    return DensityField(q.grid, vals).normalize().values


def goetz_density(model, q: DensityField) -> DensityField:
    """Per-cuboid ``sqrt(MSE) * mean q``; forests average the tree fields."""
    trees = model.trees if isinstance(model, MondrianForest) else [model]
    vals = np.mean([_tree_density(t, q) for t in trees], axis=0)
    return DensityField(q.grid, vals).normalize()


@dataclass(eq=False)
class GoetzRun:
    data: Dataset
    density: DensityField
    first_half: int
    model: object = None


def goetz_al_run(n: int, oracle, q: DensityField, lambda_coeff: float,
                 n_trees: int | None, seed, partition_seed=None) -> GoetzRun:
    """Draw n/2 points from q, fit, then draw the rest from the fitted density.

    The partition is grown for the terminal size n and kept: the density is
    optimal only for the cuboids it was estimated on, so ``model`` is the
    same partition refit on all n points. ``n_trees=None`` uses a single tree.
    ``partition_seed`` fixes the partition independently of the sampling
    seed, so that two schemes can be compared on the same cuboids.
    """
    if n < 2:
        raise ValidationError("terminal size must be at least 2")
    ss = np.random.SeedSequence(seed).spawn(4)
    half = n // 2
    x1 = random_test_sampling(q, half, np.random.default_rng(ss[0]))
    y1 = oracle.label(x1, np.random.default_rng(ss[1]))
    first = Dataset(x1, y1, oracle.box)
    life = mondrian_lifetime(n, first.d, lambda_coeff)
    part = ss[2] if partition_seed is None else partition_seed
    if n_trees is None:
        model = mondrian_fit(first, life, part)
    else:
        model = forest_fit(first, life, n_trees, part)
    dens = goetz_density(model, q)
    rng = np.random.default_rng(ss[3])
    x2 = sample_from_density(dens, n - half, rng)
    y2 = oracle.label(x2, rng)
    data = Dataset(np.vstack([x1, x2]), np.concatenate([y1, y2]), oracle.box)
    return GoetzRun(data, dens, half, refit(model, data))
