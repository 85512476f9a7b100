"""Pure numpy versions of the compiled kernels in ``_core.pyx``.

Operation order matches the compiled loops so both backends agree bitwise on
the EM kernels (sums are sequential, via ``cumsum``, not pairwise).
"""

import numpy as np


def affine_paths(dW, x0, law_mean, h, lam, theta, sigma, save_every):
    dW = np.asarray(dW, dtype=np.float64)
    n = dW.shape[1]
    out = np.empty((n // save_every + 1, dW.shape[0]))
    x = np.array(x0, dtype=np.float64)
    out[0] = x
    s = 1
    for k in range(n):
        x = x + h * ((-lam) * x + theta * law_mean[k]) + sigma * dW[:, k]
        if (k + 1) % save_every == 0:
            out[s] = x
            s += 1
    return out


def affine_interacting(dW, x0, h, lam, theta, sigma, save_every):
    dW = np.asarray(dW, dtype=np.float64)
    R, N, n = dW.shape
    out = np.empty((n // save_every + 1, R, N))
    x = np.array(x0, dtype=np.float64)
    out[0] = x
    s = 1
    for k in range(n):
        m = np.cumsum(x, axis=1)[:, -1:] / N
        x = x + h * ((-lam) * x + theta * m) + sigma * dW[:, :, k]
        if (k + 1) % save_every == 0:
            out[s] = x
            s += 1
    return out


def lsap(cost):
    cost = np.asarray(cost, dtype=np.float64)
    n = cost.shape[0]
    if cost.ndim != 2 or cost.shape[1] != n:
        raise ValueError("cost matrix must be square")
    u = np.zeros(n + 1)
    v = np.zeros(n + 1)
    p = np.zeros(n + 1, dtype=np.intp)
    way = np.zeros(n + 1, dtype=np.intp)
    for i in range(1, n + 1):
        p[0] = i
        j0 = 0
        minv = np.full(n + 1, np.inf)
        used = np.zeros(n + 1, dtype=bool)
        while True:
            used[j0] = True
            i0 = p[j0]
            free = ~used
            free[0] = False
            cur = cost[i0 - 1] - u[i0] - v[1:]
            better = free[1:] & (cur < minv[1:])
            minv[1:][better] = cur[better]
            way[1:][better] = j0
            masked = np.where(free, minv, np.inf)
            j1 = int(np.argmin(masked))
            delta = masked[j1]
            u[p[used]] += delta
            v[used] -= delta
            minv[~used] -= delta
            j0 = j1
            if p[j0] == 0:
                break
        while True:
            j1 = way[j0]
            p[j0] = p[j1]
            j0 = j1
            if j0 == 0:
                break
    perm = np.empty(n, dtype=np.intp)
    perm[p[1:] - 1] = np.arange(n)
    return perm
