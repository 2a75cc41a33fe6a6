# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False, language_level=3
"""Compiled local polynomial fits.

Data must be sorted by the first coordinate. Monomials are evaluated in the
bandwidth-normalized coordinate u = (x_i - x) / sigma, so the prediction
weights are unchanged while the normal matrix stays well scaled.
"""
import numpy as np
cimport numpy as cnp
from libc.math cimport exp, sqrt, fabs, NAN
from libc.stdlib cimport malloc, free

cnp.import_array()

cdef enum:
    MAXP = 64
    MAXK = 512
    MAXD = 8
    MAXE = 16


cdef struct Work:
    int d, P, K, m, maxdeg, cnt
    int* mexp      # K x d exponents, graded, degree <= 2Q
    int* gidx      # P x P index of exps[a] + exps[b]
    double* S0     # K weighted moments
    double* G      # P x P
    double* a      # P
    int* parent    # K: mono[t] = mono[parent[t]] * u[axis[t]]
    int* axis
    double* u      # d
    double* wm     # n x K weighted monomials of the window
    Py_ssize_t* idx  # n window indices


cdef inline Py_ssize_t lower_bound(const double[:, ::1] X, double v) nogil:
    cdef Py_ssize_t lo = 0, hi = X.shape[0], mid
    while lo < hi:
        mid = (lo + hi) >> 1
        if X[mid, 0] < v:
            lo = mid + 1
        else:
            hi = mid
    return lo


cdef int accumulate(Work* w, const double[:, ::1] X, const double* q,
                    const double* sig, double rad2) nogil:
    """Sum kernel moments over points inside the truncation radius."""
    cdef int d = w.d, K = w.K, P = w.P
    cdef Py_ssize_t i, lo, hi
    cdef int k, t, cnt = 0
    cdef double r2, u, wt, rad = sqrt(rad2)
    cdef double* mono
    for t in range(K):
        w.S0[t] = 0.0
    lo = lower_bound(X, q[0] - rad * sig[0])
    hi = lower_bound(X, q[0] + rad * sig[0])
    for i in range(lo, hi):
        r2 = 0.0
        for k in range(d):
            u = (X[i, k] - q[k]) / sig[k]
            w.u[k] = u
            r2 += u * u
        if r2 > rad2:
            continue
        wt = exp(-0.5 * r2)
        mono = &w.wm[cnt * K]
        mono[0] = wt
        w.S0[0] += wt
        for t in range(1, K):
            mono[t] = mono[w.parent[t]] * w.u[w.axis[t]]
            w.S0[t] += mono[t]
        w.idx[cnt] = i
        cnt += 1
    w.cnt = cnt
    return cnt


cdef void apply_weights(Work* w, const double[:, ::1] Y, const double[::1] V,
                        double* est, double* var) nogil:
    """Form A_i over the window; est_c = sum A_i y_ic, var = sum A_i^2 v_i."""
    cdef int P = w.P, m = w.m, c, t
    cdef Py_ssize_t r, i
    cdef double A
    for c in range(m):
        est[c] = 0.0
    var[0] = 0.0
    for r in range(w.cnt):
        A = 0.0
        for t in range(P):
            A += w.a[t] * w.wm[r * w.K + t]
        i = w.idx[r]
        for c in range(m):
            est[c] += A * Y[i, c]
        var[0] += A * A * V[i]


cdef int cholesky(Work* w) nogil:
    """In-place lower Cholesky of w.G; 1 if a pivot fails or the pivot
    ratio suggests a condition number above 1e12."""
    cdef int P = w.P, a, b, k
    cdef double s, dmax = 0.0, dmin = 1e300
    for a in range(P):
        for b in range(a + 1):
            s = w.G[a * P + b]
            for k in range(b):
                s -= w.G[a * P + k] * w.G[b * P + k]
            if a == b:
                if s <= 0.0:
                    return 1
                w.G[a * P + a] = sqrt(s)
            else:
                w.G[a * P + b] = s / w.G[b * P + b]
        if w.G[a * P + a] > dmax:
            dmax = w.G[a * P + a]
        if w.G[a * P + a] < dmin:
            dmin = w.G[a * P + a]
    if (dmax / dmin) * (dmax / dmin) > 1e12:
        return 1
    return 0


cdef double fill_normal(Work* w) nogil:
    cdef int P = w.P, a, b
    cdef double tr = 0.0
    for a in range(P):
        for b in range(P):
            w.G[a * P + b] = w.S0[w.gidx[a * P + b]]
        tr += w.G[a * P + a]
    return tr


cdef int solve_e1(Work* w) nogil:
    """Cholesky solve of G a = e1, retried with ridge jitter when the plain
    factorization fails. Return 0 if feasible."""
    cdef int P = w.P, a, k
    cdef double s
    cdef double tr = fill_normal(w)
    if not (tr > 0.0):
        return 1
    if cholesky(w):
        fill_normal(w)
        for a in range(P):
            w.G[a * P + a] += 1e-10 * tr / P
        if cholesky(w):
            return 1
    # forward then backward substitution on e1
    for a in range(P):
        s = 1.0 if a == 0 else 0.0
        for k in range(a):
            s -= w.G[a * P + k] * w.a[k]
        w.a[a] = s / w.G[a * P + a]
    for a in range(P - 1, -1, -1):
        s = w.a[a]
        for k in range(a + 1, P):
            s -= w.G[k * P + a] * w.a[k]
        w.a[a] = s / w.G[a * P + a]
    return 0


cdef Work* make_work(int d, int P, int K, int m, int maxdeg, Py_ssize_t n,
                     const int[:, ::1] mexp, const int[:, ::1] gidx) except NULL:
    if P > MAXP or K > MAXK or d > MAXD or maxdeg + 1 > MAXE:
        raise ValueError("polynomial basis too large for the compiled core")
    cdef Work* w = <Work*> malloc(sizeof(Work))
    w.d = d; w.P = P; w.K = K; w.m = m; w.maxdeg = maxdeg
    w.mexp = <int*> malloc(K * d * sizeof(int))
    w.gidx = <int*> malloc(P * P * sizeof(int))
    w.S0 = <double*> malloc(K * sizeof(double))
    w.G = <double*> malloc(P * P * sizeof(double))
    w.a = <double*> malloc(P * sizeof(double))
    w.parent = <int*> malloc(K * sizeof(int))
    w.axis = <int*> malloc(K * sizeof(int))
    w.u = <double*> malloc(d * sizeof(double))
    w.wm = <double*> malloc((n + 1) * K * sizeof(double))
    w.idx = <Py_ssize_t*> malloc((n + 1) * sizeof(Py_ssize_t))
    cdef int i, j, t, k, deg, match
    for i in range(K):
        for j in range(d):
            w.mexp[i * d + j] = mexp[i, j]
    w.parent[0] = 0
    w.axis[0] = 0
    for i in range(1, K):
        # lower one exponent of the last nonzero axis and look up the parent
        k = d - 1
        while mexp[i, k] == 0:
            k -= 1
        w.axis[i] = k
        w.parent[i] = -1
        for t in range(i):
            match = 1
            for j in range(d):
                deg = mexp[i, j] - (1 if j == k else 0)
                if mexp[t, j] != deg:
                    match = 0
                    break
            if match:
                w.parent[i] = t
                break
        if w.parent[i] < 0:
            free_work(w)
            raise ValueError("exponent table is not closed under parents")
    for i in range(P):
        for j in range(P):
            w.gidx[i * P + j] = gidx[i, j]
    return w


cdef void free_work(Work* w) nogil:
    free(w.mexp); free(w.gidx); free(w.S0); free(w.G); free(w.a)
    free(w.parent); free(w.axis); free(w.u); free(w.wm); free(w.idx); free(w)


def local_fit(const double[:, ::1] X, const double[:, ::1] Y,
              const double[::1] V, const double[:, ::1] queries,
              const double[:, ::1] scales, const int[:, ::1] mexp,
              const int[:, ::1] gidx, int P, int maxdeg, double rad2):
    """Fixed-bandwidth fits at each query.

    Returns (estimates (k, m), variances (k,), feasible (k,) uint8).
    """
    cdef int d = X.shape[1], m = Y.shape[1], K = mexp.shape[0]
    cdef Py_ssize_t nq = queries.shape[0], j
    cdef int c, cnt
    est_arr = np.full((nq, m), np.nan)
    var_arr = np.full(nq, np.nan)
    ok_arr = np.zeros(nq, dtype=np.uint8)
    cdef double[:, ::1] est = est_arr
    cdef double[::1] var = var_arr
    cdef unsigned char[::1] ok = ok_arr
    cdef double* buf = <double*> malloc((m + 1) * sizeof(double))
    cdef Work* w = make_work(d, P, K, m, maxdeg, X.shape[0], mexp, gidx)
    try:
        with nogil:
            for j in range(nq):
                cnt = accumulate(w, X, &queries[j, 0], &scales[j, 0], rad2)
                if cnt < P or solve_e1(w) != 0:
                    continue
                ok[j] = 1
                apply_weights(w, Y, V, buf, &var[j])
                for c in range(m):
                    est[j, c] = buf[c]
    finally:
        free_work(w)
        free(buf)
    return est_arr, var_arr, ok_arr


def lepski_path(const double[:, ::1] X, const double[:, ::1] Y,
                const double[::1] V, const double[:, ::1] queries,
                const double[::1] sigmas, const int[:, ::1] mexp,
                const int[:, ::1] gidx, int P, int maxdeg, double rad2,
                double width, double tol, bint full):
    """Intersection-of-confidence-intervals scan over an increasing scale grid.

    Returns (index (k,), estimates (k, L), std devs (k, L)); entries that were
    not evaluated or were rank deficient are NaN and index is -1 when no
    candidate was feasible. Without ``full`` the scan stops at the first
    empty intersection.
    """
    cdef int d = X.shape[1], K = mexp.shape[0], L = sigmas.shape[0]
    cdef Py_ssize_t nq = queries.shape[0], j
    cdef int l, k, cnt, last
    cdef bint open_
    cdef double lo, hi, e, s, sig[MAXD]
    if d > MAXD:
        raise ValueError("dimension too large for the compiled core")
    idx_arr = np.full(nq, -1, dtype=np.int64)
    est_arr = np.full((nq, L), np.nan)
    sd_arr = np.full((nq, L), np.nan)
    cdef long long[::1] idx = idx_arr
    cdef double[:, ::1] est = est_arr
    cdef double[:, ::1] sd = sd_arr
    cdef Work* w = make_work(d, P, K, 1, maxdeg, X.shape[0], mexp, gidx)
    try:
        with nogil:
            for j in range(nq):
                lo = -1e308
                hi = 1e308
                last = -1
                open_ = True
                for l in range(L):
                    for k in range(d):
                        sig[k] = sigmas[l]
                    cnt = accumulate(w, X, &queries[j, 0], sig, rad2)
                    if cnt < P or solve_e1(w) != 0:
                        continue
                    apply_weights(w, Y, V, &e, &s)
                    s = sqrt(s)
                    est[j, l] = e
                    sd[j, l] = s
                    if open_:
                        if e - width * s > lo:
                            lo = e - width * s
                        if e + width * s < hi:
                            hi = e + width * s
                        if lo - hi > tol:
                            open_ = False
                            if not full:
                                break
                        else:
                            last = l
                idx[j] = last
    finally:
        free_work(w)
    return idx_arr, est_arr, sd_arr
