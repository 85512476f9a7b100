"""Monte Carlo studies with machine-checkable verdicts.

Every study is a pure function of its arguments (seed included) and returns a
:class:`StudyReport`. Work is split into batches of independent paths or
particle systems; batches may run on a thread pool, and their partial sums are
always combined in batch order, so the numbers do not depend on ``threads``.

All error studies use synchronous coupling: the systems being compared are
driven by the same Brownian streams (coarse steps use summed fine increments).
Errors are measured against a fine-grid EM reference, not the exact solution.
"""

from __future__ import annotations

import csv
import datetime
import hashlib
import itertools
import json
import math
import os
import re
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from functools import reduce
from pathlib import Path

import numpy as np

from . import _backend
from .brownian import TimeGrid, derive_seed, increments_from_paths, ratio, sample_paths, steps_for
from .measure import (
    DensityMethod,
    EmpiricalMeasure,
    density_1d,
    sup_distance,
    w2_1d,
    w2_gaussian,
    w2_to_gaussian,
)
from .model import LawMode, LinearMeanFieldModel, ModelSpec
from .scheme import (
    DEFAULT_PROXY_SIZE,
    INIT_TAG,
    PROXY_FAMILY,
    InitialLaw,
    UnsupportedLawError,
    compute_thresholds,
    law_sequence,
    moment_factors,
    run_clones,
    run_interacting,
    run_proxy_clones,
)

DEFAULT_SEED = 20250101
BATCH_BUDGET = 1 << 22  # float64 elements per Brownian batch
MIN_R2 = 0.95

PASS, FAIL, INCONCLUSIVE, INFO = "pass", "fail", "inconclusive", "info"


# --------------------------------------------------------------------------
# verdict objects


@dataclass
class SlopeFit:
    slope: float
    intercept: float
    r_squared: float
    points: list

    def to_dict(self):
        return {
            "slope": self.slope,
            "intercept": self.intercept,
            "r_squared": self.r_squared,
            "points": [list(p) for p in self.points],
        }


def loglog_slope(xs, ys) -> SlopeFit:
    """Least-squares line through (ln x, ln y)."""
    xs = np.asarray(xs, dtype=np.float64)
    ys = np.asarray(ys, dtype=np.float64)
    if xs.shape != ys.shape or xs.ndim != 1:
        raise ValueError("xs and ys must be 1-d arrays of equal length")
    if xs.size < 3:
        raise ValueError("need at least 3 points")
    if np.any(xs <= 0) or np.any(ys <= 0) or not np.all(np.isfinite(ys)):
        raise ValueError("log-log fit needs positive, finite data")
    lx, ly = np.log(xs), np.log(ys)
    slope, intercept = np.polyfit(lx, ly, 1)
    resid = ly - (slope * lx + intercept)
    ss_tot = float(np.sum((ly - ly.mean()) ** 2))
    r2 = 1.0 - float(np.sum(resid ** 2)) / ss_tot if ss_tot > 0 else 1.0
    r2 = min(1.0, max(0.0, r2))
    return SlopeFit(float(slope), float(intercept), r2, [(float(a), float(b)) for a, b in zip(lx, ly)])


@dataclass
class Verdict:
    name: str
    status: str
    value: object
    criterion: str

    @property
    def passed(self) -> bool:
        return self.status in (PASS, INFO)


def _check(name, ok, value, criterion) -> Verdict:
    return Verdict(name, PASS if ok else FAIL, value, criterion)


def _slope_verdict(name, fit, lo, hi) -> Verdict:
    crit = f"slope in [{lo}, {hi}], r^2 >= {MIN_R2}"
    if fit is None:
        return Verdict(name, INCONCLUSIVE, None, crit + " (fit impossible: non-positive errors)")
    if not lo <= fit.slope <= hi:
        status = FAIL if fit.r_squared >= MIN_R2 else INCONCLUSIVE
    else:
        status = PASS if fit.r_squared >= MIN_R2 else INCONCLUSIVE
    return Verdict(name, status, fit.slope, crit)


@dataclass
class StudyReport:
    study: str
    seed: int
    config: dict
    metrics: dict = field(default_factory=dict)
    fits: dict = field(default_factory=dict)
    verdicts: list = field(default_factory=list)
    notes: list = field(default_factory=list)
    tables: dict = field(default_factory=dict)  # name -> (header, rows)
    wall_clock: float = 0.0
    backend: str = _backend.BACKEND

    @property
    def passed(self) -> bool:
        return all(v.passed for v in self.verdicts)

    def verdict(self, name) -> Verdict:
        for v in self.verdicts:
            if v.name == name:
                return v
        raise KeyError(name)

    def to_dict(self, timestamp: str | None = None) -> dict:
        return _jsonable({
            "study": self.study,
            "seed": self.seed,
            "backend": self.backend,
            "config": self.config,
            "metrics": self.metrics,
            "fits": {k: (v.to_dict() if v is not None else None) for k, v in self.fits.items()},
            "verdicts": [
                {"name": v.name, "status": v.status, "value": v.value, "criterion": v.criterion}
                for v in self.verdicts
            ],
            "passed": self.passed,
            "notes": self.notes,
            "timestamp": timestamp,
            "wall_clock_s": self.wall_clock,
        })


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return [_jsonable(v) for v in obj.tolist()]
    if isinstance(obj, (np.bool_, bool)):
        return bool(obj)
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        v = float(obj)
        return v if math.isfinite(v) else repr(v)
    return obj


# --------------------------------------------------------------------------
# plumbing


def _pmap(fn, items, threads):
    items = list(items)
    workers = (os.cpu_count() or 1) if threads == 0 else max(1, int(threads))
    if workers == 1 or len(items) <= 1:
        return [fn(it) for it in items]
    with ThreadPoolExecutor(max_workers=min(workers, len(items))) as pool:
        return list(pool.map(fn, items))


def _batches(total, per_unit, budget=BATCH_BUDGET):
    size = max(1, budget // max(1, per_unit))
    return [(s, min(total, s + size)) for s in range(0, total, size)]


def _initial(x0, dim=1) -> InitialLaw:
    if isinstance(x0, InitialLaw):
        return x0
    return InitialLaw.point(np.full(dim, float(x0)) if np.ndim(x0) == 0 else x0)


def _needs_exact_law(model, study):
    if model.law_mode is not LawMode.EXACT_LINEAR:
        raise UnsupportedLawError(f"{study} needs a closed-form law; model {model.name!r} has none")


def _init_states(initial, seed, start, stop, family=0):
    return initial.sample(stop - start, derive_seed(seed, INIT_TAG, family), offset=start)


def _grid_factors(h_set, h_ref, T):
    h_set = [float(h) for h in h_set]
    factors = [ratio(h, h_ref) for h in h_set]
    n_fine = steps_for(T, h_ref)
    for h, f in zip(h_set, factors):
        if n_fine % f:
            raise ValueError(f"T={T} is not a multiple of h={h}")
    return h_set, factors, n_fine


def _sup_error(sums, sq_sums, count):
    """Max over k >= 1 of the Monte Carlo mean, with its standard error."""
    mean = sums / count
    var = np.maximum(sq_sums / count - mean * mean, 0.0)
    k = int(np.argmax(mean[1:])) + 1 if mean.size > 1 else 0
    return float(mean[k]), float(math.sqrt(var[k] / count)), k


def _fit_or_none(xs, ys):
    try:
        return loglog_slope(xs, ys)
    except ValueError:
        return None


def _default_href(h_set):
    return max(h_set) / 2 ** 10


# --------------------------------------------------------------------------
# strong convergence of the self-consistent scheme


def study_strong_convergence(model: ModelSpec, h_set=(0.04, 0.02, 0.01, 0.005, 0.0025), h_ref=None,
                             M=10_000, T=1.0, seed=DEFAULT_SEED, x0=6.0,
                             slope_range=(0.4, 0.6), threads=1) -> StudyReport:
    """RMSE between EM at each h and EM at h_ref, on shared coarsened streams.

    The error at step size h is max over the coarse grid times of the Monte
    Carlo root-mean-square difference; the fitted log-log slope of that error
    against h is compared with ``slope_range``.
    """
    _needs_exact_law(model, "strong convergence")
    t0 = time.perf_counter()
    h_ref = float(h_ref) if h_ref is not None else _default_href(h_set)
    h_set, factors, n_fine = _grid_factors(h_set, h_ref, T)
    initial = _initial(x0, model.dim)
    g = reduce(math.gcd, factors)
    law0 = initial.law_state()
    ref_laws = law_sequence(model, law0, h_ref, n_fine)
    coarse_laws = [law_sequence(model, law0, h, n_fine // f) for h, f in zip(h_set, factors)]
    fine_grid = TimeGrid(h_ref, n_fine)
    d = model.dim

    def batch(span):
        start, stop = span
        paths = sample_paths(seed, range(start, stop), fine_grid, d)
        xs = _init_states(initial, seed, start, stop)
        ref = run_clones(model, xs, increments_from_paths(paths), h_ref, ref_laws, g)
        out = []
        for h, f, laws in zip(h_set, factors, coarse_laws):
            coarse = run_clones(model, xs, increments_from_paths(paths, f), h, laws, 1)
            e2 = np.sum((coarse - ref[:: f // g]) ** 2, axis=2)  # (n_h+1, B)
            out.append((e2.sum(axis=1), (e2 * e2).sum(axis=1)))
        return out

    parts = _pmap(batch, _batches(M, n_fine + 1), threads)
    rmse, stderr, argmax = [], [], []
    for i in range(len(h_set)):
        s = sum(p[i][0] for p in parts)
        s2 = sum(p[i][1] for p in parts)
        mse, se_mse, k = _sup_error(s, s2, M)
        r = math.sqrt(mse)
        rmse.append(r)
        stderr.append(se_mse / (2 * r) if r > 0 else 0.0)
        argmax.append(k * h_set[i])
    fit = _fit_or_none(h_set, rmse)

    report = StudyReport(
        "strong_convergence", int(seed),
        {"model": model.to_config(), "h_set": h_set, "h_ref": h_ref, "M": M, "T": T,
         "initial": initial.to_config(), "slope_range": list(slope_range), "kind": "self_consistent"},
    )
    report.metrics.update({"rmse": rmse, "rmse_stderr": stderr, "time_of_max_error": argmax,
                           "mse_slope": None if fit is None else 2 * fit.slope})
    report.fits["rmse_vs_h"] = fit
    report.verdicts.append(_slope_verdict("rmse_slope", fit, *slope_range))
    report.tables["rmse_vs_h"] = (("x", "y", "stderr"), list(zip(h_set, rmse, stderr)))
    report.notes.append(f"reference is EM at h_ref={h_ref:.6g} (dyadic refinement of max h), not the exact solution")
    report.wall_clock = time.perf_counter() - t0
    return report


# --------------------------------------------------------------------------
# propagation of chaos


def _clone_runner(model, seed, initial, h, n, proxy_size):
    if model.law_mode is LawMode.EXACT_LINEAR:
        laws = law_sequence(model, initial.law_state(), h, n)
        return lambda xs, dW, save: run_clones(model, xs, dW, h, laws, save)
    grid = TimeGrid(h, n)
    px0 = initial.sample(proxy_size, derive_seed(seed, INIT_TAG, PROXY_FAMILY))
    pdW = increments_from_paths(sample_paths(seed, range(proxy_size), grid, model.dim, family=PROXY_FAMILY))
    return lambda xs, dW, save: run_proxy_clones(model, xs, dW, h, px0, pdW, save)


def study_chaos_vs_N(model: ModelSpec, N_set=(50, 100, 200, 400, 800, 1600), h=0.001, T=1.0, R=300,
                     seed=DEFAULT_SEED, x0=6.0, slope_range=(-1.15, -0.85), monotone_slack=0.10,
                     proxy_size=DEFAULT_PROXY_SIZE, threads=1) -> StudyReport:
    """sup_k E|X^{N,j}_k - X^j_k|^2 between interacting particles and clones
    sharing their Brownian streams, for each N, over R independent systems.

    Particles of one system are exchangeable, so the expectation is estimated
    by averaging over particles and systems; the standard error is computed
    from the R per-system averages.
    """
    t0 = time.perf_counter()
    n = steps_for(T, h)
    grid = TimeGrid(h, n)
    initial = _initial(x0, model.dim)
    d = model.dim
    notes = []
    if model.law_mode is not LawMode.EXACT_LINEAR:
        notes.append(f"clone law approximated by an interacting proxy of {proxy_size} particles")
    clones = _clone_runner(model, seed, initial, h, n, proxy_size)

    tasks = []
    for N in N_set:
        for span in _batches(R, N * (n + 1)):
            tasks.append((int(N), span))

    def batch(task):
        N, (r0, r1) = task
        ids = range(r0 * N, r1 * N)
        dW = increments_from_paths(sample_paths(seed, ids, grid, d))
        xs = _init_states(initial, seed, r0 * N, r1 * N)
        inter = run_interacting(model, xs.reshape(r1 - r0, N, d), dW.reshape(r1 - r0, N, n, d), h, 1)
        clone = clones(xs, dW, 1)
        diff = inter.reshape(n + 1, -1, d) - clone
        per_sys = np.sum(diff * diff, axis=2).reshape(n + 1, r1 - r0, N).mean(axis=2)
        return per_sys.sum(axis=1), (per_sys * per_sys).sum(axis=1)

    parts = _pmap(batch, tasks, threads)
    mse, stderr = [], []
    for N in N_set:
        mine = [p for (NN, _), p in zip(tasks, parts) if NN == N]
        m, se, _ = _sup_error(sum(p[0] for p in mine), sum(p[1] for p in mine), R)
        mse.append(m)
        stderr.append(se)
    fit = _fit_or_none(list(N_set), mse)
    monotone = all(mse[i + 1] <= mse[i] * (1 + monotone_slack) for i in range(len(mse) - 1))

    report = StudyReport(
        "chaos_vs_N", int(seed),
        {"model": model.to_config(), "N_set": list(N_set), "h": h, "T": T, "R": R,
         "initial": initial.to_config(), "slope_range": list(slope_range)},
        notes=notes,
    )
    report.metrics.update({"mse": mse, "mse_stderr": stderr})
    report.fits["mse_vs_N"] = fit
    report.verdicts.append(_slope_verdict("mse_slope", fit, *slope_range))
    report.verdicts.append(_check("mse_non_increasing", monotone, mse,
                                  f"MSE non-increasing in N within {monotone_slack:.0%}"))
    report.tables["mse_vs_N"] = (("x", "y", "stderr"), list(zip(N_set, mse, stderr)))
    report.wall_clock = time.perf_counter() - t0
    return report


# --------------------------------------------------------------------------
# particle-system discretization error


def study_error_vs_h(model: ModelSpec, h_set=(0.04, 0.02, 0.01, 0.005, 0.0025), h_ref=None, N=100, R=100,
                     T=1.0, seed=DEFAULT_SEED, x0=6.0, slope_range=(0.8, 1.2), threads=1) -> StudyReport:
    """sup_k E|X^{N,j}_k(h) - X^{N,j}_k(h_ref)|^2 for the N-particle system."""
    t0 = time.perf_counter()
    h_ref = float(h_ref) if h_ref is not None else _default_href(h_set)
    h_set, factors, n_fine = _grid_factors(h_set, h_ref, T)
    g = reduce(math.gcd, factors)
    initial = _initial(x0, model.dim)
    d = model.dim
    fine_grid = TimeGrid(h_ref, n_fine)

    def batch(span):
        r0, r1 = span
        B = r1 - r0
        paths = sample_paths(seed, range(r0 * N, r1 * N), fine_grid, d).reshape(B, N, n_fine + 1, d)
        xs = _init_states(initial, seed, r0 * N, r1 * N).reshape(B, N, d)
        ref = run_interacting(model, xs, increments_from_paths(paths), h_ref, g)
        out = []
        for h, f in zip(h_set, factors):
            coarse = run_interacting(model, xs, increments_from_paths(paths, f), h, 1)
            e2 = np.sum((coarse - ref[:: f // g]) ** 2, axis=3).mean(axis=2)  # (n_h+1, B)
            out.append((e2.sum(axis=1), (e2 * e2).sum(axis=1)))
        return out

    parts = _pmap(batch, _batches(R, N * (n_fine + 1)), threads)
    mse, stderr = [], []
    for i in range(len(h_set)):
        m, se, _ = _sup_error(sum(p[i][0] for p in parts), sum(p[i][1] for p in parts), R)
        mse.append(m)
        stderr.append(se)
    fit = _fit_or_none(h_set, mse)

    report = StudyReport(
        "error_vs_h", int(seed),
        {"model": model.to_config(), "h_set": h_set, "h_ref": h_ref, "N": N, "R": R, "T": T,
         "initial": initial.to_config(), "slope_range": list(slope_range)},
    )
    report.metrics.update({"mse": mse, "mse_stderr": stderr})
    if len(h_set) >= 2 and mse[-1] > 0:
        report.metrics["mse_ratio_first_to_last"] = mse[0] / mse[-1]
    report.fits["mse_vs_h"] = fit
    report.verdicts.append(_slope_verdict("mse_slope", fit, *slope_range))
    report.tables["mse_vs_h"] = (("x", "y", "stderr"), list(zip(h_set, mse, stderr)))
    report.notes.append(f"reference is the particle EM at h_ref={h_ref:.6g}, same streams")
    report.wall_clock = time.perf_counter() - t0
    return report


# --------------------------------------------------------------------------
# long-run laws


def sample_at_steps(model: ModelSpec, kind: str, initial: InitialLaw, h: float, n: int, save_every: int,
                    M: int, seed: int, family: int = 0, N: int = 1000, threads: int = 1,
                    proxy_size: int = DEFAULT_PROXY_SIZE) -> np.ndarray:
    """States of M paths at steps 0, save_every, ..., shape (n // save_every + 1, M, d).

    ``kind="clones"`` runs independent self-consistent paths; ``"interacting"``
    runs M // N systems of N particles each.
    """
    grid = TimeGrid(h, n)
    d = model.dim
    if kind == "interacting":
        if M % N:
            raise ValueError(f"M={M} is not a multiple of N={N}")

        def batch(span):
            r0, r1 = span
            ids = range(r0 * N, r1 * N)
            dW = increments_from_paths(sample_paths(seed, ids, grid, d, family))
            xs = _init_states(initial, seed, r0 * N, r1 * N, family)
            out = run_interacting(model, xs.reshape(r1 - r0, N, d), dW.reshape(r1 - r0, N, n, d), h, save_every)
            return out.reshape(out.shape[0], -1, d)

        parts = _pmap(batch, _batches(M // N, N * (n + 1)), threads)
    else:
        clones = _clone_runner(model, seed, initial, h, n, proxy_size)

        def batch(span):
            s0, s1 = span
            dW = increments_from_paths(sample_paths(seed, range(s0, s1), grid, d, family))
            return clones(_init_states(initial, seed, s0, s1, family), dW, save_every)

        parts = _pmap(batch, _batches(M, n + 1), threads)
    return np.concatenate(parts, axis=1)


def study_invariant_measure(model: ModelSpec, h_set=(0.04, 0.02, 0.01), M=10_000, T_long=30.0,
                            initials=(-6.0, 6.0, 16.0), h_uniq=0.01, x0_rate=6.0, seed=DEFAULT_SEED,
                            kind="clones", N=1000, coupling="independent",
                            discrete_tol=0.02, uniq_tol=0.05, existence_tol=0.05, rate_constant_max=1.0,
                            threads=1) -> StudyReport:
    """Existence, uniqueness and h-dependence of the long-run law.

    * existence: W2 between the empirical laws at T_long/2 and T_long;
    * uniqueness: pairwise W2 at T_long between runs from each initial value
      (independent streams unless ``coupling="synchronous"``);
    * rate (linear model only): W2 to the continuous invariant law
      N(0, s^2/(2 lam)) bounded by C sqrt(h) with one C for the whole h_set,
      and W2 to the EM stationary law N(0, s^2/(2 lam - lam^2 h)).
      W2 to a Gaussian is estimated twice: closed form on the fitted moments,
      and sorted matching against a quantile sample.
    """
    t0 = time.perf_counter()
    if coupling not in ("independent", "synchronous"):
        raise ValueError("coupling must be 'independent' or 'synchronous'")
    report = StudyReport(
        "invariant_measure", int(seed),
        {"model": model.to_config(), "h_set": [float(h) for h in h_set], "M": M, "T_long": T_long,
         "initials": [float(v) for v in initials], "h_uniq": h_uniq, "x0_rate": x0_rate, "kind": kind,
         "N": N if kind == "interacting" else None, "coupling": coupling,
         "discrete_tol": discrete_tol, "uniq_tol": uniq_tol, "existence_tol": existence_tol,
         "rate_constant_max": rate_constant_max},
    )
    linear = isinstance(model, LinearMeanFieldModel)

    def long_run(h, x0, family):
        n = steps_for(T_long, h)
        if n % 2:
            raise ValueError(f"T_long/h={n} must be even")
        return sample_at_steps(model, kind, _initial(x0, model.dim), h, n, n // 2, M, seed,
                               family=family, N=N, threads=threads)

    rows_cont, rows_disc = [], []
    w_cont_fit, w_cont_q = [], []
    for i, h in enumerate(h_set):
        snaps = long_run(float(h), x0_rate, 100 + i)
        mid, end = snaps[1, :, 0], snaps[2, :, 0]
        w_exist = w2_1d(mid, end)
        report.metrics[f"existence_w2_h={h}"] = w_exist
        report.verdicts.append(_check(f"existence_h={h}", w_exist < existence_tol, w_exist,
                                      f"W2(law(T/2), law(T)) < {existence_tol}"))
        if not linear:
            continue
        v_cont = model.stationary_variance()
        v_disc = model.stationary_variance(float(h))
        cont = w2_to_gaussian(end, 0.0, v_cont)
        disc = w2_to_gaussian(end, 0.0, v_disc)
        gap = w2_gaussian(0.0, v_cont, 0.0, v_disc)
        report.metrics[f"h={h}"] = {"w2_continuous": cont, "w2_discrete": disc, "analytic_gap": gap,
                                    "sample_mean": float(end.mean()), "sample_var": float(end.var()),
                                    "discrete_var": v_disc}
        worst = max(disc.values())
        report.verdicts.append(_check(f"discrete_law_h={h}", worst <= discrete_tol, disc,
                                      f"both W2 estimates to N(0, {v_disc:.6g}) <= {discrete_tol}"))
        w_cont_fit.append(cont["fitted"])
        w_cont_q.append(cont["quantile"])
        rows_cont.append((float(h), max(cont.values()), 0.0))
        rows_disc.append((float(h), max(disc.values()), 0.0))

    if linear and h_set:
        sq = np.sqrt(np.asarray(h_set, dtype=np.float64))
        worst = np.maximum(w_cont_fit, w_cont_q)
        c_needed = float(np.max(worst / sq))  # smallest C with W2 <= C sqrt(h) on every h
        c_ls = float(np.dot(worst, sq) / np.dot(sq, sq))
        report.metrics["rate_constant"] = c_needed
        report.metrics["rate_constant_least_squares"] = c_ls
        report.verdicts.append(_check("rate_bound", c_needed <= rate_constant_max, c_needed,
                                      f"single C with W2(emp, pi) <= C sqrt(h), C <= {rate_constant_max}"))
        report.tables["w2_continuous_vs_h"] = (("x", "y", "stderr"), rows_cont)
        report.tables["w2_discrete_vs_h"] = (("x", "y", "stderr"), rows_disc)

    if initials:
        finals = []
        for i, x0 in enumerate(initials):
            fam = 200 if coupling == "synchronous" else 200 + i
            finals.append(long_run(float(h_uniq), x0, fam)[2, :, 0])
        pairs = {}
        for (i, a), (j, b) in itertools.combinations(enumerate(initials), 2):
            pairs[f"{a:g}|{b:g}"] = w2_1d(finals[i], finals[j])
        report.metrics["uniqueness_w2"] = pairs
        worst = max(pairs.values()) if pairs else 0.0
        report.verdicts.append(_check("uniqueness", worst < uniq_tol, pairs,
                                      f"pairwise W2 at t={T_long} < {uniq_tol}"))
    report.wall_clock = time.perf_counter() - t0
    return report


# --------------------------------------------------------------------------
# contraction and moment bound


def study_contraction(model: ModelSpec, x=-6.0, y=6.0, h=0.01, T=5.0, M=1000, seed=DEFAULT_SEED,
                      rel_tol=1e-10, safety=0.9, threads=1) -> StudyReport:
    """E|X_k - Y_k|^2 for self-consistent runs from x and y on the same streams."""
    _needs_exact_law(model, "contraction")
    t0 = time.perf_counter()
    n = steps_for(T, h)
    xi = _initial(x, model.dim)
    yi = _initial(y, model.dim)
    X = sample_at_steps(model, "clones", xi, h, n, 1, M, seed, threads=threads)
    Y = sample_at_steps(model, "clones", yi, h, n, 1, M, seed, threads=threads)
    D = X - Y
    dist2 = np.sum(D * D, axis=2)  # (n+1, M)
    msd = dist2.mean(axis=1)
    times = np.arange(n + 1) * h
    d0 = float(msd[0])

    report = StudyReport(
        "contraction", int(seed),
        {"model": model.to_config(), "x": xi.to_config(), "y": yi.to_config(), "h": h, "T": T, "M": M,
         "rel_tol": rel_tol, "safety": safety},
    )
    if d0 == 0.0:
        ok = bool(np.all(dist2 == 0.0))
        report.metrics["max_distance"] = float(np.sqrt(dist2.max()))
        report.verdicts.append(_check("identical_start", ok, report.metrics["max_distance"], "|X-Y| == 0"))
        report.wall_clock = time.perf_counter() - t0
        return report

    rate = -float(np.polyfit(times, np.log(msd), 1)[0])
    report.metrics.update({"decay_rate": rate, "initial_msd": d0, "final_msd": float(msd[-1])})
    report.tables["msd_vs_t"] = (("x", "y", "stderr"),
                                 list(zip(times, msd, dist2.std(axis=1) / math.sqrt(M))))
    if model.constants is not None:
        th = compute_thresholds(model.constants, safety)
        bound = d0 * np.exp(-th.xi1 * times)
        report.metrics.update({"xi1": th.xi1, "h_double_star": th.h_double_star})
        report.verdicts.append(_check("rate_at_least_xi1", rate >= th.xi1, rate, f"decay rate >= xi1={th.xi1:.6g}"))
        report.verdicts.append(_check("below_exponential_bound", bool(np.all(msd <= bound * (1 + 1e-9))),
                                      float(np.max(msd / bound)), "E|X-Y|^2 <= |x-y|^2 exp(-xi1 t)"))
        if h >= th.h_double_star:
            report.notes.append(f"h={h} is not below h**={th.h_double_star:.6g}")
    if isinstance(model, LinearMeanFieldModel):
        r = 1.0 - h * (model.lam - model.theta)
        dist0 = math.sqrt(d0)
        expected = dist0 * r ** np.arange(n + 1)
        rel = float(np.max(np.abs(np.sqrt(dist2) - expected[:, None]) / expected[:, None]))
        geo_rate = -2.0 * math.log(r) / h
        report.metrics.update({"max_relative_error": rel, "geometric_rate": geo_rate,
                               "step_factor": r})
        report.verdicts.append(_check("geometric_decay", rel <= rel_tol, rel,
                                      f"|X-Y|(k) = |x-y| (1-h(lam-theta))^k to relative {rel_tol}"))
        report.verdicts.append(_check("rate_matches_geometric", abs(rate - geo_rate) <= 1e-6 * geo_rate,
                                      rate, f"fitted rate = -2 ln(r)/h = {geo_rate:.10g}"))
    report.wall_clock = time.perf_counter() - t0
    return report


def study_moment_bound(model: ModelSpec, M=10_000, h=0.005, T=50.0, x0=6.0, seed=DEFAULT_SEED,
                       n_se=3.0, slack=0.0, kind="clones", N=1000, threads=1) -> StudyReport:
    """Running second moment against C1 = E|X0|^2 + A2/(1-A1) from declared constants."""
    if model.constants is None:
        raise ValueError("moment bound needs declared assumption constants")
    t0 = time.perf_counter()
    n = steps_for(T, h)
    initial = _initial(x0, model.dim)
    th = compute_thresholds(model.constants)
    a1, a2 = moment_factors(model.constants, h)
    report = StudyReport(
        "moment_bound", int(seed),
        {"model": model.to_config(), "M": M, "h": h, "T": T, "initial": initial.to_config(),
         "n_se": n_se, "slack": slack, "kind": kind},
    )
    if h >= th.h_star:
        report.notes.append(f"warning: h={h} is not below h*={th.h_star:.6g}")
    e0 = initial.law_state().second_moment
    c1 = e0 + a2 / (1.0 - a1) if a1 < 1 else math.inf

    grid = TimeGrid(h, n)
    d = model.dim
    if kind == "interacting":
        snaps = sample_at_steps(model, "interacting", initial, h, n, 1, M, seed, N=N, threads=threads)
        sq = np.sum(snaps * snaps, axis=2)
        s1, s2 = sq.sum(axis=1), (sq * sq).sum(axis=1)
    else:
        clones = _clone_runner(model, seed, initial, h, n, DEFAULT_PROXY_SIZE)

        def batch(span):
            s0, s1_ = span
            dW = increments_from_paths(sample_paths(seed, range(s0, s1_), grid, d))
            out = clones(_init_states(initial, seed, s0, s1_), dW, 1)
            sq = np.sum(out * out, axis=2)
            return sq.sum(axis=1), (sq * sq).sum(axis=1)

        parts = _pmap(batch, _batches(M, n + 1), threads)
        s1 = sum(p[0] for p in parts)
        s2 = sum(p[1] for p in parts)
    m2 = s1 / M
    se = np.sqrt(np.maximum(s2 / M - m2 * m2, 0.0) / M)
    upper = m2 + n_se * se
    k = int(np.argmax(upper))
    report.metrics.update({"A1": a1, "A2": a2, "C1": c1, "h_star": th.h_star,
                           "max_second_moment": float(m2.max()), "max_upper": float(upper[k]),
                           "time_of_max_upper": k * h})
    report.verdicts.append(_check("moment_bound", float(upper[k]) <= c1 * (1 + slack), float(upper[k]),
                                  f"max_k E|X_k|^2 + {n_se:g} se <= C1 (1 + {slack:g}), C1 = {c1:.6g}"))
    thin = max(1, n // 1000)
    report.tables["second_moment_vs_t"] = (("x", "y", "stderr"),
                                           [(i * h, m2[i], se[i]) for i in range(0, n + 1, thin)])
    report.wall_clock = time.perf_counter() - t0
    return report


# --------------------------------------------------------------------------
# density snapshots


def study_density_evolution(model: ModelSpec, M=10_000, h=0.01, snapshot_times=(0.1, 0.3, 0.5, 4.0, 8.0),
                            initials=(6.0,), seed=DEFAULT_SEED, kind="clones", N=1000,
                            coupling="synchronous", tol=0.03, compare_times=None,
                            method="kde", bins=64, time_unit="absolute", tau=None,
                            threads=1) -> StudyReport:
    """Density estimates at snapshot times for each initial value.

    Verdict ``late_time_agreement``: with two or more initial values, the
    densities at the last snapshot time agree in sup-norm within ``tol``.
    ``compare_times=(t1, t2)`` adds a same-run comparison at two times,
    recorded as an informational metric next to its closed-form value for the
    linear model.

    With ``time_unit="tau"`` snapshot and comparison times are multiples of
    tau, which defaults to the mean-relaxation time 1/(lam - theta) of the
    linear model.
    """
    t0 = time.perf_counter()
    if time_unit not in ("absolute", "tau"):
        raise ValueError("time_unit must be 'absolute' or 'tau'")
    unit = 1.0
    if time_unit == "tau":
        if tau is None:
            if not isinstance(model, LinearMeanFieldModel):
                raise ValueError("tau must be given for non-linear models")
            tau = 1.0 / (model.lam - model.theta)
        unit = float(tau)
    def scaled(t):
        # multiples of tau are snapped to the step grid
        return float(t) if unit == 1.0 else round(float(t) * unit / h) * h

    times = sorted(scaled(t) for t in snapshot_times)
    if compare_times:
        compare_times = [scaled(t) for t in compare_times]
    steps = [steps_for(t, h) if t > 0 else 0 for t in times]
    n = max(steps)
    stride = reduce(math.gcd, [s for s in steps if s > 0], n) or 1
    if n == 0:
        stride = 1
    report = StudyReport(
        "density_evolution", int(seed),
        {"model": model.to_config(), "M": M, "h": h, "snapshot_times": times,
         "initials": [float(v) for v in initials], "kind": kind,
         "N": N if kind == "interacting" else None, "coupling": coupling, "tol": tol,
         "compare_times": list(compare_times) if compare_times else None, "method": method,
         "time_unit": time_unit, "tau": unit if time_unit == "tau" else None},
    )
    dens = {}
    for i, x0 in enumerate(initials):
        fam = 300 if coupling == "synchronous" else 300 + i
        if n > 0:
            snaps = sample_at_steps(model, kind, _initial(x0, model.dim), h, n, stride, M, seed,
                                    family=fam, N=N, threads=threads)
        else:
            snaps = _initial(x0, model.dim).sample(M, derive_seed(seed, INIT_TAG, fam))[None]
        for t, s in zip(times, steps):
            x = snaps[s // stride, :, 0]
            degenerate = bool(np.ptp(x) == 0.0)
            if degenerate:
                # point mass: a single histogram spike, flagged
                est = density_1d(EmpiricalMeasure(x), DensityMethod.HISTOGRAM, bins=1)
            else:
                est = density_1d(EmpiricalMeasure(x), DensityMethod(method), bins=bins)
            dens[(float(x0), t)] = est
            key = f"x0={x0:g},t={t:g}"
            report.tables[f"density_{key}"] = (("grid", "density"), list(zip(est.grid, est.density)))
            report.metrics[f"{key}"] = {"mean": float(x.mean()), "var": float(x.var()),
                                        "degenerate": bool(degenerate)}

    if len(initials) >= 2:
        t_last = times[-1]
        gaps = {}
        for a, b in itertools.combinations([float(v) for v in initials], 2):
            gaps[f"{a:g}|{b:g}"] = sup_distance(dens[(a, t_last)], dens[(b, t_last)])
        report.metrics["late_time_sup_distance"] = gaps
        report.verdicts.append(_check("late_time_agreement", max(gaps.values()) < tol, gaps,
                                      f"sup-distance at t={t_last:g} < {tol}"))
    if compare_times:
        t1, t2 = (float(t) for t in compare_times)
        x0 = float(initials[0])
        gap = sup_distance(dens[(x0, t1)], dens[(x0, t2)])
        report.metrics[f"sup_distance_t={t1:g}_vs_t={t2:g}"] = gap
        info = {"empirical": gap}
        if isinstance(model, LinearMeanFieldModel):
            info["closed_form"] = _linear_density_gap(model, x0, h, t1, t2)
        report.verdicts.append(Verdict(f"same_run_t{t1:g}_t{t2:g}", INFO, info,
                                       "informational: sup-distance between two times of one run"))
    report.wall_clock = time.perf_counter() - t0
    return report


def _linear_density_gap(model, x0, h, t1, t2):
    """Sup-distance of the exact EM laws (Gaussian) of the linear model at two times."""
    from scipy.stats import norm

    def law(t):
        n = steps_for(t, h)
        laws = law_sequence(model, InitialLaw.point(x0).law_state(), h, n)
        return float(laws[-1].mean[0]), laws[-1].variance

    (m1, v1), (m2, v2) = law(t1), law(t2)
    sd = math.sqrt(max(v1, v2))
    xs = np.linspace(min(m1, m2) - 8 * sd, max(m1, m2) + 8 * sd, 20001)
    return float(np.max(np.abs(norm.pdf(xs, m1, math.sqrt(v1)) - norm.pdf(xs, m2, math.sqrt(v2)))))


# --------------------------------------------------------------------------
# output files

STANDARD_NOTES = (
    "errors are measured against a fine-grid EM reference on the same Brownian paths, not the exact solution",
)


def config_hash(config: dict) -> str:
    blob = json.dumps(_jsonable(config), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode()).hexdigest()[:12]


def _fmt(v):
    if isinstance(v, (bool, np.bool_)):
        return str(bool(v))
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return format(float(v), ".17g")


def write_csv(path, header, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for row in rows:
            w.writerow([_fmt(v) for v in row])


def _safe_name(name: str) -> str:
    return re.sub(r"[^A-Za-z0-9_.=+-]", "_", name)


def write_outputs(report: StudyReport, out_root, extra_notes=(), now=None) -> Path:
    """Write report.json, manifest.json and CSV tables; returns the run directory.

    Layout: ``<out_root>/<study>/<timestamp>-<confighash>/``. Existing
    directories are never overwritten; a numeric suffix is added instead.
    """
    from . import __version__

    now = now or datetime.datetime.now(datetime.timezone.utc)
    stamp = now.strftime("%Y%m%dT%H%M%SZ")
    chash = config_hash(report.config)
    base = Path(out_root) / report.study
    base.mkdir(parents=True, exist_ok=True)
    run_dir = base / f"{stamp}-{chash}"
    suffix = 1
    while True:
        try:
            run_dir.mkdir()
            break
        except FileExistsError:
            suffix += 1
            run_dir = base / f"{stamp}-{chash}-{suffix}"

    (run_dir / "report.json").write_text(json.dumps(report.to_dict(now.isoformat()), indent=2, sort_keys=True) + "\n")
    files = []
    for name, (header, rows) in report.tables.items():
        fname = _safe_name(name) + ".csv"
        write_csv(run_dir / fname, header, rows)
        files.append(fname)
    manifest = {
        "study": report.study,
        "seed": report.seed,
        "config_hash": chash,
        "code_version": __version__,
        "backend": report.backend,
        "numpy": np.__version__,
        "deviations": list(STANDARD_NOTES) + list(report.notes) + list(extra_notes),
        "files": ["report.json"] + sorted(files),
        "created": now.isoformat(),
    }
    (run_dir / "manifest.json").write_text(json.dumps(_jsonable(manifest), indent=2, sort_keys=True) + "\n")
    return run_dir
