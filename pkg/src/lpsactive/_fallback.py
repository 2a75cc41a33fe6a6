"""Pure-numpy twin of the compiled core (same signatures, same numerics).

Used when the extension is unavailable, and as the reference the extension
is tested against.
"""
import numpy as np


def _window(X, q, sig, rad2):
    rad = np.sqrt(rad2)
    lo = np.searchsorted(X[:, 0], q[0] - rad * sig[0], side="left")
    hi = np.searchsorted(X[:, 0], q[0] + rad * sig[0], side="left")
    u = (X[lo:hi] - q) / sig
    r2 = np.sum(u * u, axis=1)
    keep = r2 <= rad2
    return lo + np.flatnonzero(keep), u[keep], r2[keep]


def _moments(X, q, sig, mexp, P, rad2):
    idx, u, r2 = _window(X, q, sig, rad2)
    wt = np.exp(-0.5 * r2)
    wm = wt[:, None] * np.prod(u[:, None, :] ** mexp[None, :, :], axis=2)
    return idx, wm.sum(axis=0), wm[:, :P]


def _cholesky(G):
    try:
        Lc = np.linalg.cholesky(G)
    except np.linalg.LinAlgError:
        return None
    dg = np.diag(Lc)
    if not np.all(dg > 0) or (dg.max() / dg.min()) ** 2 > 1e12:
        return None
    return Lc


def _solve_e1(S0, gidx, P):
    G = S0[gidx].copy()
    tr = np.trace(G)
    if not tr > 0.0:
        return None
    Lc = _cholesky(G)
    if Lc is None:
        # jitter only degenerate systems so regular fits stay exact
        G[np.diag_indices(P)] += 1e-10 * tr / P
        Lc = _cholesky(G)
        if Lc is None:
            return None
    e1 = np.zeros(P)
    e1[0] = 1.0
    z = np.linalg.solve(Lc, e1)
    return np.linalg.solve(Lc.T, z)


def local_fit(X, Y, V, queries, scales, mexp, gidx, P, maxdeg, rad2):
    nq, m = len(queries), Y.shape[1]
    est = np.full((nq, m), np.nan)
    var = np.full(nq, np.nan)
    ok = np.zeros(nq, dtype=np.uint8)
    for j in range(nq):
        idx, S0, wm = _moments(X, queries[j], scales[j], mexp, P, rad2)
        if len(idx) < P:
            continue
        a = _solve_e1(S0, gidx, P)
        if a is None:
            continue
        ok[j] = 1
        A = wm @ a
        est[j] = A @ Y[idx]
        var[j] = (A * A) @ V[idx]
    return est, var, ok


def lepski_path(X, Y, V, queries, sigmas, mexp, gidx, P, maxdeg, rad2,
                width, tol, full):
    nq, L, d = len(queries), len(sigmas), X.shape[1]
    idx = np.full(nq, -1, dtype=np.int64)
    est = np.full((nq, L), np.nan)
    sd = np.full((nq, L), np.nan)
    for j in range(nq):
        lo, hi, last, open_ = -1e308, 1e308, -1, True
        for l in range(L):
            sig = np.full(d, sigmas[l])
            win, S0, wm = _moments(X, queries[j], sig, mexp, P, rad2)
            if len(win) < P:
                continue
            a = _solve_e1(S0, gidx, P)
            if a is None:
                continue
            A = wm @ a
            e = float(A @ Y[win, 0])
            s = float(np.sqrt((A * A) @ V[win]))
            est[j, l], sd[j, l] = e, s
            if open_:
                lo = max(lo, e - width * s)
                hi = min(hi, e + width * s)
                if lo - hi > tol:
                    open_ = False
                    if not full:
                        break
                else:
                    last = l
        idx[j] = last
    return idx, est, sd
