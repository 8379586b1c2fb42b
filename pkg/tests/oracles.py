"""Independent reference computations used by the tests.

None of these call into the code paths they check: covariances are summed
by hand, CCA is found by direct numerical search of the correlation ratio,
and gradients come from central differences.
"""

import numpy as np
from scipy.linalg import null_space
from scipy.optimize import minimize


def central_difference(f, x, h=1e-5, indices=None):
    """Central-difference gradient of scalar ``f`` at array ``x`` (modified in place, restored)."""
    grad = np.zeros_like(x)
    flat, gflat = x.reshape(-1), grad.reshape(-1)
    for i in range(flat.size) if indices is None else indices:
        old = flat[i]
        flat[i] = old + h
        fp = f()
        flat[i] = old - h
        fm = f()
        flat[i] = old
        gflat[i] = (fp - fm) / (2 * h)
    return grad


def rel_error(a, b, floor=1e-8):
    """max |a - b| / max(|a|, |b|, floor), elementwise maximum."""
    a, b = np.asarray(a, dtype=float), np.asarray(b, dtype=float)
    return float(np.max(np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)))


def grad_rel_error(analytic, numeric):
    """Relative error of a gradient array measured against its overall scale."""
    scale = max(np.max(np.abs(analytic)), np.max(np.abs(numeric)), 1e-12)
    return float(np.max(np.abs(analytic - numeric)) / scale)


def naive_covariance(a, b):
    """Two-pass sample covariance with explicit loops."""
    m = a.shape[0]
    ma = [sum(a[i, j] for i in range(m)) / m for j in range(a.shape[1])]
    mb = [sum(b[i, j] for i in range(m)) / m for j in range(b.shape[1])]
    out = np.zeros((a.shape[1], b.shape[1]))
    for p in range(a.shape[1]):
        for q in range(b.shape[1]):
            out[p, q] = sum((a[i, p] - ma[p]) * (b[i, q] - mb[q]) for i in range(m)) / (m - 1)
    return out


def _corr(u, v):
    u = u - u.mean()
    v = v - v.mean()
    return float(u @ v / np.sqrt((u @ u) * (v @ v)))


def brute_force_cca(x, y, c, starts=3, seed=0):
    """Canonical correlations by direct search of the correlation ratio.

    Pair i maximizes corr(x a, y b) over a, b constrained to be uncorrelated
    (in the sample) with all earlier canonical variates of the same view.
    For a fixed ``a`` the best ``b`` in the feasible subspace is a least-squares
    fit, so the search runs Nelder-Mead over ``a`` only, from several starts.
    """
    rng = np.random.default_rng(seed)
    xc = x - x.mean(axis=0)
    yc = y - y.mean(axis=0)
    prev_x, prev_y, rhos = [], [], []
    for _ in range(c):
        nx = null_space(np.array(prev_x)) if prev_x else np.eye(x.shape[1])
        ny = null_space(np.array(prev_y)) if prev_y else np.eye(y.shape[1])
        xs, ys = xc @ nx, yc @ ny
        # y-side feasible set: variates y @ ny @ w; best fit of a target by least squares
        ys_pinv = np.linalg.pinv(ys)

        def best(z):
            u = xs @ z
            w = ys_pinv @ u
            return u, ys @ w, w

        def neg(z):
            if not np.any(z):
                return 0.0
            u, v, _ = best(z)
            if v @ v < 1e-300:
                return 0.0
            return -_corr(u, v)

        best_val, best_z = 0.0, None
        for _ in range(starts):
            z0 = rng.normal(size=nx.shape[1])
            res = minimize(neg, z0, method="Nelder-Mead",
                           options={"xatol": 1e-10, "fatol": 1e-14, "maxiter": 20000, "maxfev": 40000})
            res = minimize(neg, res.x, method="Powell", options={"xtol": 1e-10, "ftol": 1e-15})
            if res.fun < best_val:
                best_val, best_z = res.fun, res.x
        if best_z is None:
            rhos.append(0.0)
            break
        u, v, w = best(best_z)
        rhos.append(-best_val)
        # later variates must be uncorrelated with u (x side) and v (y side)
        prev_x.append(xc.T @ u)
        prev_y.append(yc.T @ v)
    return np.array(rhos)
