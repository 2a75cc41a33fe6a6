"""Training densities on a grid: local function complexity, the optimal
density, boundary correction, batch mixing and sampling.

Densities are piecewise constant on the cells of an :class:`EvalGrid`;
the value at a point is the value of the node of its cell.
"""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from .errors import ValidationError
from .grid import EvalGrid, knn_by_index

MASS_TOL = 1e-9


@dataclass(frozen=True, eq=False)
class DensityField:
    """Node values of a piecewise-constant density."""

    grid: EvalGrid
    values: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.values, dtype=float).reshape(-1).copy()
        if v.shape != (self.grid.size,):
            raise ValidationError("density values do not match the grid size")
        if not np.all(np.isfinite(v)) or np.any(v < 0):
            raise ValidationError("density values must be finite and nonnegative")
        v.setflags(write=False)
        object.__setattr__(self, "values", v)

    @classmethod
    def uniform(cls, grid: EvalGrid) -> "DensityField":
        return cls(grid, np.full(grid.size, 1.0 / np.prod(grid.box[:, 1] - grid.box[:, 0])))

    @property
    def mass(self) -> float:
        return float(self.values.sum() * self.grid.cell_volume)

    def normalize(self) -> "DensityField":
        m = self.mass
        if m <= 0:
            raise ValidationError("cannot normalize a zero density")
        return DensityField(self.grid, self.values / m)

    def cell_probabilities(self) -> np.ndarray:
        return self.values / self.values.sum()

    def __call__(self, points) -> np.ndarray:
        return self.values[self.grid.cell_index(points)]

    def sample(self, count: int, seed) -> np.ndarray:
        return sample_from_density(self, count, seed)

    def to_csv(self, path, extra: dict | None = None) -> None:
        write_text_atomic(path, field_csv(self, extra))

    @classmethod
    def from_csv(cls, path) -> "DensityField":
        with open(path, newline="") as fh:
            rows = list(csv.reader(fh))
        head = rows[0]
        if head[0] != "#grid":
            raise ValidationError(f"{path}: not a density field file")
        d = int(head[1])
        shape = tuple(int(s) for s in head[2:2 + d])
        box = np.array([float(b) for b in head[2 + d:2 + 3 * d]]).reshape(d, 2)
        cols = rows[1]
        k = cols.index("density")
        vals = np.array([float(r[k]) for r in rows[2:]])
        return cls(EvalGrid(box, shape), vals)


def _fmt(x) -> str:
    return repr(float(x))


def field_csv(field: DensityField, extra: dict | None = None) -> str:
    """CSV text: a grid header row, column names, then one row per node."""
    g = field.grid
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["#grid", g.d, *g.shape, *(_fmt(b) for b in g.box.ravel())])
    extra = extra or {}
    w.writerow([f"x{k + 1}" for k in range(g.d)] + list(extra) + ["density"])
    cols = [np.asarray(v).reshape(-1) for v in extra.values()]
    for r, x in enumerate(g.nodes):
        w.writerow([_fmt(c) for c in x] + [_fmt(c[r]) for c in cols]
                   + [_fmt(field.values[r])])
    return buf.getvalue()


def write_text_atomic(path, text: str) -> None:
    import os
    tmp = f"{path}.tmp"
    with open(tmp, "w", newline="") as fh:
        fh.write(text)
    os.replace(tmp, path)


def _rate(Q, d):
    return 2 * (Q + 1) + d


def _positive(name, a):
    a = np.asarray(a, dtype=float)
    if not np.all(np.isfinite(a)) or np.any(a <= 0):
        raise ValidationError(f"{name} must be positive")
    return a


def lfc_estimate(v_tilde, p_current, n, sigma_tilde, Q: int, d: int):
    """Unnormalized local function complexity ``[v/(p n)]^(d/D) sigma^-d``.

    ``sigma_tilde`` is the isotropic scale, so the bandwidth determinant is
    ``sigma^d``. The factor in front of the determinant is the determinant of
    the per-axis normalization ``[v/(p n)]^(1/D)``.
    """
    v = _positive("v_tilde", v_tilde)
    p = _positive("p_current", p_current)
    s = _positive("sigma_tilde", sigma_tilde)
    if n <= 0:
        raise ValidationError("n must be positive")
    D = _rate(Q, d)
    return (v / (p * n)) ** (d / D) * s ** (-d)


def optimal_exponents(Q: int, d: int) -> tuple:
    """Exponents on ``lfc * q`` and on ``v``."""
    den = 4 * (Q + 1) + d
    return _rate(Q, d) / den, 2 * (Q + 1) / den


def optimal_density(grid: EvalGrid, lfc, v, q, Q: int, d: int) -> DensityField:
    """Normalized ``[lfc q]^a v^b`` on the grid nodes."""
    a, b = optimal_exponents(Q, d)
    raw = (_positive("lfc", lfc) * _positive("q", q)) ** a * _positive("v", v) ** b
    raw = np.broadcast_to(raw, (grid.size,))
    return DensityField(grid, raw).normalize()


def effective_interior(grid: EvalGrid, sigma, s_factor: float) -> np.ndarray:
    """Nodes whose ``s_factor * sigma`` ball lies inside the box."""
    if s_factor < 0:
        raise ValidationError("s_factor must be nonnegative")
    sigma = np.broadcast_to(np.asarray(sigma, dtype=float), (grid.size,))
    dist = grid.boundary_distance()
    mask = np.all(dist >= (s_factor * sigma)[:, None], axis=1)
    if not mask.any():
        raise ValidationError("effective interior is empty; bandwidths too large for the box")
    return mask


def boundary_correct(field: DensityField, interior) -> DensityField:
    """Give each exterior node the value of its nearest interior node."""
    interior = np.asarray(interior, dtype=bool).reshape(-1)
    if not interior.any():
        raise ValidationError("effective interior is empty")
    vals = field.values.copy()
    outside = np.flatnonzero(~interior)
    if len(outside):
        inner = np.flatnonzero(interior)
        nodes = field.grid.nodes
        tree = cKDTree(nodes[inner])
        scale = float(np.linalg.norm(field.grid.box[:, 1] - field.grid.box[:, 0]))
        near = knn_by_index(tree, nodes[outside], 1, len(inner), scale=scale)[:, 0]
        vals[outside] = vals[inner[near]]
    return DensityField(field.grid, vals).normalize()


def mixing_gammas(p_k: DensityField, p_opt: DensityField) -> tuple:
    """``gamma1 = max p_k / p_opt`` and the smallest admissible weight on p_k."""
    pk, po = p_k.values, p_opt.values
    live = pk > 0
    if np.any(po[live] <= 0):
        raise ValidationError("target density vanishes where the current one does not")
    g1 = float(np.max(pk[live] / po[live])) if live.any() else 1.0
    if abs(g1 - 1.0) <= 1e-9 or g1 <= 1.0:
        return g1, 0.0
    inv = 1.0 / g1
    return g1, max(0.0, (0.5 - inv) / (1.0 - inv))


def batch_sampling_density(p_k: DensityField, p_opt: DensityField,
                           gamma2: float) -> tuple:
    """Return ``(p_next, p_tilde)`` with ``p_next = (p_k + p_tilde) / 2``."""
    if not 0.0 <= gamma2 < 0.5:
        raise ValidationError("gamma2 must lie in [0, 0.5)")
    nxt = gamma2 * p_k.values + (1.0 - gamma2) * p_opt.values
    tilde = 2.0 * nxt - p_k.values
    floor = -1e-12 * max(1.0, float(p_k.values.max()))
    if tilde.min() < floor:
        raise RuntimeError(f"batch density negative ({tilde.min():.3g}); gamma2 is inconsistent")
    return DensityField(p_k.grid, nxt), DensityField(p_k.grid, np.maximum(tilde, 0.0))


def sample_from_density(field: DensityField, count: int, seed) -> np.ndarray:
    """Draw a cell by mass, then a uniform point inside it."""
    if count < 1:
        raise ValidationError("count must be at least 1")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    g = field.grid
    cdf = np.cumsum(field.cell_probabilities())
    cells = np.searchsorted(cdf, rng.random(count) * cdf[-1], side="right")
    cells = np.minimum(cells, g.size - 1)
    ij = np.stack(np.unravel_index(cells, g.shape), axis=1)
    return g.box[:, 0] + (ij + rng.random((count, g.d))) * g.spacing


def tv_distance(field: DensityField, points) -> float:
    """Total variation between the cell histogram of ``points`` and the field."""
    counts = np.bincount(field.grid.cell_index(points), minlength=field.grid.size)
    return 0.5 * float(np.abs(counts / counts.sum() - field.cell_probabilities()).sum())
