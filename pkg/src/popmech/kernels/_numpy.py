"""Reference kernels without numba (always available)."""
import numpy as np
from scipy.optimize import linear_sum_assignment


def softmin(C, h, eps):
    """out[i] = -eps * log(sum_j exp(h[j] - C[i, j] / eps)), stabilized."""
    z = h[None, :] - C / eps
    m = z.max(axis=1)
    m = np.where(np.isfinite(m), m, 0.0)
    return -eps * (np.log(np.exp(z - m[:, None]).sum(axis=1)) + m)


def assignment(C):
    """Min-cost assignment of rows to columns (n_rows <= n_cols); ``col[i]`` is the column of row ``i``."""
    rows, cols = linear_sum_assignment(np.asarray(C, dtype=np.float64))
    col = np.empty(len(rows), dtype=np.int64)
    col[rows] = cols
    return col


def boids_accel(X, V, r_inner, r_outer, w_sep, w_align, w_coh, w_bnd, radius):
    diff = X[:, None, :] - X[None, :, :]  # x_i - x_j
    dist = np.sqrt((diff ** 2).sum(axis=2))
    n = X.shape[0]
    notself = ~np.eye(n, dtype=bool)
    inner = (dist < r_inner) & notself
    outer = (dist < r_outer) & notself
    acc = np.zeros_like(X)

    n_in = inner.sum(axis=1)
    safe = np.where(dist > 0, dist, 1.0)
    unit = np.where(inner[:, :, None] & (dist[:, :, None] > 0), diff / safe[:, :, None], 0.0)
    has = n_in > 0
    acc[has] += w_sep * unit[has].sum(axis=1) / n_in[has, None]

    n_out = outer.sum(axis=1)
    has = n_out > 0
    w = outer.astype(np.float64)
    mean_v = w @ V
    mean_x = w @ X
    acc[has] += w_align * (mean_v[has] / n_out[has, None] - V[has])
    acc[has] += w_coh * (mean_x[has] / n_out[has, None] - X[has])

    r = np.sqrt((X ** 2).sum(axis=1))
    out = r > radius
    acc[out] -= w_bnd * (X[out] / r[out, None]) * (r[out] - radius)[:, None]
    return acc
