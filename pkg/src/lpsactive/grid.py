"""Regular cell-centred evaluation grids and Euclidean-ball filters on them."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage
from scipy.spatial import cKDTree

DEFAULT_SHAPE = {1: (512,), 2: (128, 128)}


@dataclass(frozen=True, eq=False)
class EvalGrid:
    """Nodes at cell centres of a regular lattice over a box."""

    box: np.ndarray
    shape: tuple

    def __post_init__(self):
        box = np.asarray(self.box, dtype=float).reshape(-1, 2)
        object.__setattr__(self, "box", box)
        object.__setattr__(self, "shape", tuple(int(s) for s in self.shape))
        if len(self.shape) != len(box):
            raise ValueError("grid shape does not match box dimension")

    @classmethod
    def default(cls, box):
        box = np.asarray(box, dtype=float).reshape(-1, 2)
        d = len(box)
        shape = DEFAULT_SHAPE.get(d, (int(round(16384 ** (1 / d))),) * d)
        return cls(box, shape)

    @property
    def d(self) -> int:
        return len(self.shape)

    @property
    def spacing(self) -> np.ndarray:
        return (self.box[:, 1] - self.box[:, 0]) / np.array(self.shape)

    @property
    def cell_volume(self) -> float:
        return float(np.prod(self.spacing))

    @property
    def size(self) -> int:
        return int(np.prod(self.shape))

    def axes(self):
        return [self.box[k, 0] + (np.arange(s) + 0.5) * self.spacing[k]
                for k, s in enumerate(self.shape)]

    @property
    def nodes(self) -> np.ndarray:
        """(size, d) node coordinates, C order (last axis fastest)."""
        mesh = np.meshgrid(*self.axes(), indexing="ij")
        return np.stack([m.ravel() for m in mesh], axis=1)

    def cell_index(self, points) -> np.ndarray:
        """Flat index of the cell containing each point (clipped to the box)."""
        points = np.asarray(points, dtype=float).reshape(-1, self.d)
        ij = np.floor((points - self.box[:, 0]) / self.spacing).astype(np.int64)
        ij = np.clip(ij, 0, np.array(self.shape) - 1)
        return np.ravel_multi_index(tuple(ij.T), self.shape)

    def boundary_distance(self) -> np.ndarray:
        """(size, d) per-axis distance of each node to the nearer box face."""
        x = self.nodes
        return np.minimum(x - self.box[:, 0], self.box[:, 1] - x)


def ball_footprint(grid: EvalGrid, radius: float) -> np.ndarray:
    """Boolean stencil of lattice offsets within Euclidean ``radius``."""
    h = grid.spacing
    reach = np.floor(radius / h + 1e-9).astype(int)
    axes = [np.arange(-r, r + 1) * hk for r, hk in zip(reach, h)]
    mesh = np.meshgrid(*axes, indexing="ij")
    r2 = sum(m * m for m in mesh)
    return r2 <= radius * radius * (1 + 1e-9)


def ball_max(grid: EvalGrid, values, radius: float) -> np.ndarray:
    """Max over each node's Euclidean ball; NaN entries are ignored."""
    a = np.asarray(values, dtype=float).reshape(grid.shape)
    a = np.where(np.isnan(a), -np.inf, a)
    out = ndimage.maximum_filter(a, footprint=ball_footprint(grid, radius),
                                 mode="constant", cval=-np.inf)
    return np.where(np.isneginf(out), np.nan, out).ravel()


def ball_min(grid: EvalGrid, values, radius: float) -> np.ndarray:
    """Min over each node's Euclidean ball; NaN entries are ignored."""
    a = np.asarray(values, dtype=float).reshape(grid.shape)
    a = np.where(np.isnan(a), np.inf, a)
    out = ndimage.minimum_filter(a, footprint=ball_footprint(grid, radius),
                                 mode="constant", cval=np.inf)
    return np.where(np.isposinf(out), np.nan, out).ravel()


def knn_by_index(tree: cKDTree, points, k: int, n: int, exclude=None,
                 scale: float = 1.0) -> np.ndarray:
    """k nearest neighbours with distance ties broken by lower index.

    ``exclude`` optionally gives, per row, one index to drop (the point
    itself). Distances are compared after rounding to 1e-12 of ``scale``
    so that lattice ties are recognized.
    """
    points = np.atleast_2d(points)
    need = k + (1 if exclude is not None else 0)
    extra = min(n, need + 8)
    dist, idx = tree.query(points, k=extra)
    dist = np.atleast_2d(dist).reshape(len(points), -1)
    idx = np.atleast_2d(idx).reshape(len(points), -1)
    key = np.round(dist / (scale * 1e-12))
    out = np.empty((len(points), k), dtype=np.int64)
    for r in range(len(points)):
        order = np.lexsort((idx[r], key[r]))
        cand = idx[r][order]
        if exclude is not None:
            cand = cand[cand != exclude[r]]
        if len(cand) < k or (extra < n and key[r][order][need - 1]
                             == key[r][order][-1]):
            # ties reach the end of the fetched block; fall back to a full sort
            dd = np.linalg.norm(tree.data - points[r], axis=1)
            kk = np.round(dd / (scale * 1e-12))
            full = np.lexsort((np.arange(n), kk))
            if exclude is not None:
                full = full[full != exclude[r]]
            cand = full
        out[r] = cand[:k]
    return out
