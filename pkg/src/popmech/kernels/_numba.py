"""numba-compiled kernels; same signatures and results as ``_numpy``."""
import math

import numpy as np
from numba import njit


@njit(cache=True)
def softmin(C, h, eps):
    n, m = C.shape
    out = np.empty(n)
    for i in range(n):
        mx = -np.inf
        for j in range(m):
            z = h[j] - C[i, j] / eps
            if z > mx:
                mx = z
        if not np.isfinite(mx):
            mx = 0.0
        s = 0.0
        for j in range(m):
            s += math.exp(h[j] - C[i, j] / eps - mx)
        out[i] = -eps * (math.log(s) + mx)
    return out


@njit(cache=True)
def assignment(C):
    n, m = C.shape
    u = np.zeros(n + 1)
    v = np.zeros(m + 1)
    p = np.zeros(m + 1, dtype=np.int64)
    way = np.zeros(m + 1, dtype=np.int64)
    minv = np.empty(m + 1)
    used = np.empty(m + 1, dtype=np.bool_)
    for i in range(1, n + 1):
        p[0] = i
        j0 = 0
        minv[:] = np.inf
        used[:] = False
        while True:
            used[j0] = True
            i0 = p[j0]
            delta = np.inf
            j1 = 0
            for j in range(1, m + 1):
                if not used[j]:
                    cur = C[i0 - 1, j - 1] - u[i0] - v[j]
                    if cur < minv[j]:
                        minv[j] = cur
                        way[j] = j0
                    if minv[j] < delta:
                        delta = minv[j]
                        j1 = j
            for j in range(m + 1):
                if used[j]:
                    u[p[j]] += delta
                    v[j] -= delta
                else:
                    minv[j] -= delta
            j0 = j1
            if p[j0] == 0:
                break
        while j0 != 0:
            j1 = way[j0]
            p[j0] = p[j1]
            j0 = j1
    col = np.empty(n, dtype=np.int64)
    for j in range(1, m + 1):
        if p[j] != 0:
            col[p[j] - 1] = j - 1
    return col


@njit(cache=True)
def boids_accel(X, V, r_inner, r_outer, w_sep, w_align, w_coh, w_bnd, radius):
    n, d = X.shape
    acc = np.zeros_like(X)
    sep = np.empty(d)
    mv = np.empty(d)
    mx = np.empty(d)
    for i in range(n):
        sep[:] = 0.0
        mv[:] = 0.0
        mx[:] = 0.0
        n_in = 0
        n_out = 0
        for j in range(n):
            if j == i:
                continue
            d2 = 0.0
            for k in range(d):
                t = X[i, k] - X[j, k]
                d2 += t * t
            dist = math.sqrt(d2)
            if dist < r_inner:
                n_in += 1
                if dist > 0.0:
                    for k in range(d):
                        sep[k] += (X[i, k] - X[j, k]) / dist
            if dist < r_outer:
                n_out += 1
                for k in range(d):
                    mv[k] += V[j, k]
                    mx[k] += X[j, k]
        if n_in > 0:
            for k in range(d):
                acc[i, k] += w_sep * sep[k] / n_in
        if n_out > 0:
            for k in range(d):
                acc[i, k] += w_align * (mv[k] / n_out - V[i, k])
                acc[i, k] += w_coh * (mx[k] / n_out - X[i, k])
        r2 = 0.0
        for k in range(d):
            r2 += X[i, k] * X[i, k]
        r = math.sqrt(r2)
        if r > radius:
            for k in range(d):
                acc[i, k] -= w_bnd * X[i, k] / r * (r - radius)
    return acc
