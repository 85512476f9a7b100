"""Equal-weight empirical measures and Wasserstein distances between them."""

from __future__ import annotations

import csv
import enum
import math
from dataclasses import dataclass

import numpy as np
from scipy import stats

from . import _backend

ASSIGNMENT_CAP = 2048


class EmpiricalMeasure:
    """Uniform distribution over N points in R^d, stored as an (N, d) array."""

    __slots__ = ("points",)

    def __init__(self, points):
        pts = np.asarray(points, dtype=np.float64)
        if pts.ndim == 1:
            pts = pts[:, None]
        if pts.ndim != 2 or pts.shape[0] < 1:
            raise ValueError(f"need a non-empty (N, d) array of points, got shape {pts.shape}")
        if not np.all(np.isfinite(pts)):
            raise ValueError("empirical measure has non-finite points")
        self.points = pts

    @property
    def n(self) -> int:
        return self.points.shape[0]

    @property
    def dim(self) -> int:
        return self.points.shape[1]

    def moments(self):
        return moments(self)

    def __len__(self):
        return self.n

    def __repr__(self):
        return f"EmpiricalMeasure(n={self.n}, d={self.dim})"


def _as_measure(mu) -> EmpiricalMeasure:
    return mu if isinstance(mu, EmpiricalMeasure) else EmpiricalMeasure(mu)


def moments(mu) -> tuple[np.ndarray, float]:
    """Mean vector and mean squared norm."""
    pts = _as_measure(mu).points
    return pts.mean(axis=0), float(np.mean(np.sum(pts * pts, axis=1)))


def _check_pair(mu, nu):
    mu, nu = _as_measure(mu), _as_measure(nu)
    if mu.n != nu.n:
        raise ValueError(f"equal-size measures required, got {mu.n} and {nu.n}")
    if mu.dim != nu.dim:
        raise ValueError(f"dimension mismatch: {mu.dim} vs {nu.dim}")
    return mu, nu


def w2_1d(mu, nu) -> float:
    """Exact W2 between equal-size 1-d empirical measures (sorted matching)."""
    mu, nu = _check_pair(mu, nu)
    if mu.dim != 1:
        raise ValueError("w2_1d needs d = 1")
    diff = np.sort(mu.points[:, 0]) - np.sort(nu.points[:, 0])
    return math.sqrt(float(np.mean(diff * diff)))


def optimal_matching(cost: np.ndarray) -> np.ndarray:
    """Permutation minimizing sum_i cost[i, perm[i]]."""
    cost = np.ascontiguousarray(cost, dtype=np.float64)
    return np.asarray(_backend.lsap(cost))


def _pair_costs(x, y, p):
    diff = x[:, None, :] - y[None, :, :]
    dist = np.sqrt(np.sum(diff * diff, axis=-1))
    return dist * dist if p == 2 else dist ** p


def w2_assignment(mu, nu, cap: int = ASSIGNMENT_CAP) -> float:
    """Exact W2 for equal-size measures in any dimension via optimal assignment."""
    mu, nu = _check_pair(mu, nu)
    if mu.n > cap:
        raise ValueError(
            f"N={mu.n} exceeds the assignment cap {cap}; use w2_1d in one dimension or subsample"
        )
    x, y = mu.points, nu.points
    diff = x[:, None, :] - y[None, :, :]
    cost = np.sum(diff * diff, axis=-1)
    perm = optimal_matching(cost)
    return math.sqrt(float(np.mean(cost[np.arange(mu.n), perm])))


def w2(mu, nu) -> float:
    """W2 using the sorted path in one dimension, assignment otherwise."""
    mu, nu = _check_pair(mu, nu)
    return w2_1d(mu, nu) if mu.dim == 1 else w2_assignment(mu, nu)


def w2_gaussian(m1: float, v1: float, m2: float, v2: float) -> float:
    """Closed-form W2 between N(m1, v1) and N(m2, v2) on the line."""
    if v1 < 0 or v2 < 0:
        raise ValueError("variances must be non-negative")
    return math.hypot(m1 - m2, math.sqrt(v1) - math.sqrt(v2))


def wp_empirical(mu, nu, p: float, cap: int = ASSIGNMENT_CAP) -> float:
    """W_p for equal-size measures, with outer exponent 1/max(1, p).

    In one dimension and p >= 1 sorted matching is optimal; otherwise the
    optimal assignment is solved (p < 1 costs are concave).
    """
    if not p > 0:
        raise ValueError("p must be positive")
    mu, nu = _check_pair(mu, nu)
    if mu.dim == 1 and p >= 1:
        diff = np.abs(np.sort(mu.points[:, 0]) - np.sort(nu.points[:, 0]))
        mean_cost = float(np.mean(diff * diff)) if p == 2 else float(np.mean(diff ** p))
    else:
        if mu.n > cap:
            raise ValueError(f"N={mu.n} exceeds the assignment cap {cap}")
        cost = _pair_costs(mu.points, nu.points, p)
        perm = optimal_matching(cost)
        mean_cost = float(np.mean(cost[np.arange(mu.n), perm]))
    return mean_cost ** (1.0 / max(1.0, p))


def gaussian_quantile_sample(n: int, mean: float, var: float) -> np.ndarray:
    """n equally weighted points at the mid-rank quantiles of N(mean, var)."""
    u = (np.arange(n) + 0.5) / n
    return mean + math.sqrt(var) * stats.norm.ppf(u)


def w2_to_gaussian(sample, mean: float, var: float) -> dict:
    """W2 between a 1-d sample and N(mean, var) by two independent estimators.

    ``fitted``: closed form against the sample's own (mean, variance).
    ``quantile``: sorted matching against an equal-size quantile sample of the law.
    """
    x = np.asarray(sample, dtype=np.float64).reshape(-1)
    fitted = w2_gaussian(float(x.mean()), float(x.var()), mean, var)
    quant = w2_1d(x, gaussian_quantile_sample(x.size, mean, var))
    return {"fitted": fitted, "quantile": quant}


# --------------------------------------------------------------------------
# densities


class DensityMethod(enum.Enum):
    HISTOGRAM = "histogram"
    KDE = "kde"


@dataclass
class DensityEstimate:
    grid: np.ndarray
    density: np.ndarray
    width: float  # bin width or kernel bandwidth
    method: DensityMethod = DensityMethod.KDE
    degenerate: bool = False

    def integral(self) -> float:
        return _trapezoid(self.density, self.grid)

    def at(self, x) -> np.ndarray:
        return np.interp(x, self.grid, self.density, left=0.0, right=0.0)

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["grid", "density"])
            for g, d in zip(self.grid, self.density):
                w.writerow([f"{g:.17g}", f"{d:.17g}"])


def _trapezoid(y, x):
    fn = getattr(np, "trapezoid", None) or np.trapz
    return float(fn(y, x))


def silverman_bandwidth(x: np.ndarray) -> float:
    n = x.size
    sd = float(np.std(x, ddof=1))
    iqr = float(np.subtract(*np.percentile(x, [75, 25])))
    spread = min(sd, iqr / 1.349) if iqr > 0 else sd
    return 0.9 * spread * n ** (-0.2)


def density_1d(mu, method=DensityMethod.KDE, bins: int = 64,
               bandwidth: float | None = None, grid_size: int = 512) -> DensityEstimate:
    """Histogram or Gaussian-KDE density of a 1-d empirical measure.

    The result is renormalized so its trapezoid integral over the returned
    grid is 1. Histograms are padded with one empty bin on each side, so the
    trapezoid rule over bin centres reproduces the histogram mass exactly.
    """
    mu = _as_measure(mu)
    if mu.dim != 1:
        raise ValueError("density_1d needs d = 1")
    method = DensityMethod(method)
    x = mu.points[:, 0]
    lo, hi = float(x.min()), float(x.max())
    degenerate = hi - lo <= 1e-12 * max(1.0, abs(lo))

    if method is DensityMethod.HISTOGRAM:
        counts, edges = np.histogram(x, bins=bins)
        width = float(edges[1] - edges[0])
        centres = 0.5 * (edges[:-1] + edges[1:])
        grid = np.concatenate([[centres[0] - width], centres, [centres[-1] + width]])
        dens = np.concatenate([[0.0], counts / (x.size * width), [0.0]])
        return DensityEstimate(grid, dens, width, method, degenerate)

    if bandwidth is None:
        if x.size < 2:
            raise ValueError("automatic KDE bandwidth needs at least 2 points")
        bandwidth = silverman_bandwidth(x)
        if not bandwidth > 0:
            raise ValueError("sample has zero spread; pass a bandwidth or use a histogram")
    elif not bandwidth > 0:
        raise ValueError("bandwidth must be positive")
    grid = np.linspace(lo - 6 * bandwidth, hi + 6 * bandwidth, grid_size)
    kde = stats.gaussian_kde(x, bw_method=bandwidth / float(np.std(x, ddof=1))) if not degenerate else None
    if kde is not None:
        dens = kde(grid)
    else:
        dens = stats.norm.pdf(grid, loc=lo, scale=bandwidth)
    dens = dens / _trapezoid(dens, grid)
    return DensityEstimate(grid, dens, float(bandwidth), method, degenerate)


def sup_distance(a: DensityEstimate, b: DensityEstimate, n: int = 2048) -> float:
    """Sup-norm gap between two densities, on a common grid covering both."""
    lo = min(a.grid[0], b.grid[0])
    hi = max(a.grid[-1], b.grid[-1])
    g = np.linspace(lo, hi, n)
    return float(np.max(np.abs(a.at(g) - b.at(g))))
