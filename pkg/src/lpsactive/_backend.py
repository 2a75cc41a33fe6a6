"""Pick the compiled core if it imports, else the numpy fallback.

Set ``LPSACTIVE_BACKEND=python`` to force the fallback.
"""
import os
from functools import lru_cache

import numpy as np

from . import _fallback
from .kernels import stacked_indices

try:
    if os.environ.get("LPSACTIVE_BACKEND", "").lower() == "python":
        raise ImportError("fallback forced")
    from . import _core as _compiled
except ImportError:
    _compiled = None

RAD2 = 2.0 * np.log(1e12)


def available():
    return ["compiled", "python"] if _compiled is not None else ["python"]


def default():
    return "compiled" if _compiled is not None else "python"


def _impl(backend):
    name = backend or default()
    if name == "compiled":
        if _compiled is None:
            raise RuntimeError("compiled core is not built")
        return _compiled
    if name == "python":
        return _fallback
    raise ValueError(f"unknown backend {backend!r}")


@lru_cache(maxsize=None)
def basis_tables(d, Q):
    """Exponent table up to degree 2Q and the normal-matrix index map."""
    full = stacked_indices(d, 2 * Q)
    pos = {e: i for i, e in enumerate(full)}
    base = stacked_indices(d, Q)
    gidx = np.array([[pos[tuple(a + b for a, b in zip(ea, eb))] for eb in base]
                     for ea in base], dtype=np.int32)
    mexp = np.array(full, dtype=np.int32).reshape(len(full), d)
    return mexp, gidx, len(base)


class SortedDesign:
    """Training inputs sorted along the first axis, with labels and variances."""

    def __init__(self, X, Y=None, V=None):
        X = np.asarray(X, dtype=float)
        if X.ndim == 1:
            X = X[:, None]
        self.order = np.argsort(X[:, 0], kind="stable")
        self.X = np.ascontiguousarray(X[self.order])
        n = len(X)
        Y = np.zeros((n, 0)) if Y is None else np.asarray(Y, dtype=float)
        if Y.ndim == 1:
            Y = Y[:, None]
        self.Y = np.ascontiguousarray(Y[self.order])
        V = np.zeros(n) if V is None else np.broadcast_to(
            np.asarray(V, dtype=float), (n,))
        self.V = np.ascontiguousarray(V[self.order])

    @property
    def d(self):
        return self.X.shape[1]


def local_fit(design, queries, scales, Q, backend=None):
    queries = np.ascontiguousarray(np.atleast_2d(queries), dtype=float)
    # scales: (k, d) per-query per-axis bandwidths
    scales = np.ascontiguousarray(np.broadcast_to(scales, queries.shape),
                                  dtype=float)
    mexp, gidx, P = basis_tables(design.d, Q)
    return _impl(backend).local_fit(design.X, design.Y, design.V, queries,
                                    scales, mexp, gidx, P, 2 * Q, RAD2)


def lepski_path(design, queries, sigmas, Q, width, tol, full=False,
                backend=None):
    queries = np.ascontiguousarray(np.atleast_2d(queries), dtype=float)
    sigmas = np.ascontiguousarray(sigmas, dtype=float)
    mexp, gidx, P = basis_tables(design.d, Q)
    return _impl(backend).lepski_path(design.X,
                                      np.ascontiguousarray(design.Y[:, :1]), design.V,
                                      queries, sigmas, mexp, gidx, P, 2 * Q,
                                      RAD2, float(width), float(tol), bool(full))
