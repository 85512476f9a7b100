"""Euler-Maruyama steppers for McKean-Vlasov dynamics.

Three flavours share one update rule x + h b(x, mu) + s(x, mu) dW and differ in
the measure handed to the coefficients:

* interacting: the empirical measure of the N particles, snapshotted before
  any particle moves;
* clones: a common law carried in closed form (``LawMode.EXACT_LINEAR``) or,
  for other models, approximated by a large interacting proxy ensemble;
* self-consistent: a single path with its closed-form law.
"""

from __future__ import annotations

import enum
import math
import warnings
from dataclasses import dataclass, field, replace

import numpy as np

from . import _backend
from .brownian import TimeGrid, derive_seed, sample_paths, increments_from_paths
from .measure import EmpiricalMeasure
from .model import (
    AssumptionConstants,
    LawMode,
    LawState,
    LinearMeanFieldModel,
    MeasureView,
    ModelSpec,
)

INIT_TAG = 0x494E4954
PROXY_FAMILY = 0x50524F58
DEFAULT_PROXY_SIZE = 4096


class BlowUpError(FloatingPointError):
    def __init__(self, step, particle, detail=""):
        self.step, self.particle = step, particle
        super().__init__(f"non-finite state at step {step}, particle {particle}{detail}")


class UnsupportedLawError(ValueError):
    """The clone/self-consistent scheme needs a law the model cannot provide."""


class Kind(enum.Enum):
    INTERACTING = "interacting"
    CLONES = "clones"
    SELF_CONSISTENT = "self_consistent"


# --------------------------------------------------------------------------
# step-size thresholds


@dataclass(frozen=True)
class StepThresholds:
    h_star: float
    h_double_star: float
    h_sharp: float
    xi1: float


def compute_thresholds(constants: AssumptionConstants, safety: float = 0.9) -> StepThresholds:
    """Step-size bounds keeping the moment factor A1 = 1-(gamma-kappa)h+2c0 h^2
    and the contraction factor A3 = 1-(alpha-beta)h+(a+b)h^2 below 1."""
    if not 0.0 < safety < 1.0:
        raise ValueError("safety must lie in (0, 1)")
    c = constants
    if not c.gamma > c.kappa or not c.alpha > c.beta:
        raise ValueError("thresholds need gamma > kappa and alpha > beta")
    h_star = safety * min(1.0, (c.gamma - c.kappa) / (2.0 * c.c0))
    h_dstar = safety * min(1.0, (c.alpha - c.beta) / (c.a + c.b))
    xi1 = c.alpha - c.beta - (c.a + c.b) * h_dstar
    return StepThresholds(h_star, h_dstar, min(h_star, h_dstar), xi1)


def moment_factors(constants: AssumptionConstants, h: float) -> tuple[float, float]:
    """(A1, A2) of the one-step second-moment recursion E|X_{k+1}|^2 <= A1 E|X_k|^2 + A2."""
    c = constants
    a1 = 1.0 - (c.gamma - c.kappa) * h + 2.0 * c.c0 * h * h
    a2 = c.c0 * h * h + h * c.kappa * (1.0 + c.rho)
    return a1, a2


def moment_bound(constants: AssumptionConstants, h: float, initial_second_moment: float) -> float:
    a1, a2 = moment_factors(constants, h)
    if not a1 < 1.0:
        raise ValueError(f"A1={a1} >= 1 at h={h}: step size above h*")
    return initial_second_moment + a2 / (1.0 - a1)


def contraction_factor(constants: AssumptionConstants, h: float) -> float:
    c = constants
    return 1.0 - (c.alpha - c.beta) * h + (c.a + c.b) * h * h


# --------------------------------------------------------------------------
# initial laws


@dataclass(frozen=True)
class InitialLaw:
    """Point mass at ``mean`` (var == 0) or the Gaussian N(mean, var I)."""

    mean: tuple
    var: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "mean", tuple(float(v) for v in np.atleast_1d(self.mean)))
        if self.var < 0:
            raise ValueError("initial variance must be non-negative")

    @classmethod
    def point(cls, x) -> "InitialLaw":
        return cls(x, 0.0)

    @property
    def dim(self) -> int:
        return len(self.mean)

    def law_state(self) -> LawState:
        m = np.array(self.mean)
        return LawState(m, float(m @ m) + self.dim * self.var)

    def sample(self, n: int, seed: int, offset: int = 0) -> np.ndarray:
        """n draws, shape (n, d); draw i depends only on (seed, offset + i)."""
        m = np.array(self.mean)
        if self.var == 0.0:
            return np.tile(m, (n, 1))
        out = np.empty((n, self.dim))
        sd = math.sqrt(self.var)
        for i in range(n):
            ss = np.random.SeedSequence(int(seed), spawn_key=(INIT_TAG, offset + i))
            out[i] = m + sd * np.random.Generator(np.random.PCG64(ss)).standard_normal(self.dim)
        return out

    def to_config(self):
        return {"mean": list(self.mean), "var": self.var}


# --------------------------------------------------------------------------
# ensembles and single steps


@dataclass(frozen=True)
class ParticleEnsemble:
    states: np.ndarray  # (N, d)
    k: int
    grid: TimeGrid
    kind: Kind
    law: LawState | None = None
    proxy: "ParticleEnsemble | None" = None

    def __post_init__(self):
        s = np.asarray(self.states, dtype=np.float64)
        if s.ndim == 1:
            s = s[:, None]
        if s.shape[0] < 1:
            raise ValueError("ensemble needs at least one particle")
        _check_finite(s, self.k)
        object.__setattr__(self, "states", s)
        if self.kind is Kind.SELF_CONSISTENT and self.law is None:
            raise ValueError("self-consistent ensembles carry a LawState")

    @property
    def n(self) -> int:
        return self.states.shape[0]

    @property
    def time(self) -> float:
        return self.k * self.grid.h

    def measure(self) -> EmpiricalMeasure:
        return EmpiricalMeasure(self.states)


def _check_finite(states, k):
    if not np.all(np.isfinite(states)):
        bad = np.argwhere(~np.isfinite(states.reshape(states.shape[0], -1)))[0, 0]
        raise BlowUpError(k, int(bad))


def _as_increments(increments, n, d):
    dw = np.asarray(increments, dtype=np.float64)
    dw = dw.reshape(n, d)
    return dw


def _em_update(model, x, view, dw, h):
    b = model.drift(x, view)
    s = model.diffusion(x, view)
    if model.dim == 1:
        noise = s[:, 0, :] * dw
    else:
        noise = np.einsum("nij,nj->ni", s, dw)
    return x + h * b + noise


def em_step_interacting(model: ModelSpec, ensemble: ParticleEnsemble, increments) -> ParticleEnsemble:
    if ensemble.kind is not Kind.INTERACTING:
        raise ValueError(f"expected an interacting ensemble, got {ensemble.kind.value}")
    dw = _as_increments(increments, ensemble.n, model.dim)
    view = MeasureView.empirical(EmpiricalMeasure(ensemble.states))
    new = _em_update(model, ensemble.states, view, dw, ensemble.grid.h)
    _check_finite(new, ensemble.k + 1)
    return replace(ensemble, states=new, k=ensemble.k + 1)


def em_step_clones(model: ModelSpec, ensemble: ParticleEnsemble, increments,
                   proxy_increments=None) -> ParticleEnsemble:
    """Advance clones with the shared law, never their own empirical measure.

    EXACT_LINEAR models advance the attached LawState in closed form. Other
    models need ``ensemble.proxy``, an interacting ensemble whose empirical
    measure stands in for the law; it is advanced with ``proxy_increments``.
    """
    if ensemble.kind is Kind.INTERACTING:
        raise ValueError("expected a clone ensemble")
    h = ensemble.grid.h
    dw = _as_increments(increments, ensemble.n, model.dim)
    if model.law_mode is LawMode.EXACT_LINEAR:
        law = ensemble.law
        if law is None:
            raise UnsupportedLawError("clone ensemble has no LawState attached")
        new = _em_update(model, ensemble.states, law.view(), dw, h)
        _check_finite(new, ensemble.k + 1)
        return replace(ensemble, states=new, k=ensemble.k + 1, law=model.law_step(law, h))
    if ensemble.proxy is None:
        raise UnsupportedLawError(
            f"model {model.name!r} has no closed-form law; attach a proxy ensemble"
        )
    if proxy_increments is None:
        raise ValueError("proxy ensemble needs its own increments")
    view = MeasureView.empirical(ensemble.proxy.measure())
    new = _em_update(model, ensemble.states, view, dw, h)
    _check_finite(new, ensemble.k + 1)
    proxy = em_step_interacting(model, ensemble.proxy, proxy_increments)
    return replace(ensemble, states=new, k=ensemble.k + 1, proxy=proxy)


def em_step_selfconsistent(model: ModelSpec, state, law: LawState, increment, h: float):
    """One step of a single path driven by its closed-form law."""
    if model.law_mode is not LawMode.EXACT_LINEAR:
        raise UnsupportedLawError(f"model {model.name!r} has no closed-form law")
    x = np.atleast_1d(np.asarray(state, dtype=np.float64)).reshape(1, model.dim)
    dw = _as_increments(increment, 1, model.dim)
    new = _em_update(model, x, law.view(), dw, h)
    _check_finite(new, -1)
    return new[0], model.law_step(law, h)


# --------------------------------------------------------------------------
# batch runners used by simulate() and the studies


def law_sequence(model: ModelSpec, law0: LawState, h: float, n: int) -> list:
    """LawStates at steps 0..n of the self-consistent scheme."""
    laws = [law0]
    for _ in range(n):
        laws.append(model.law_step(laws[-1], h))
    return laws


def _first_bad(arr):
    idx = np.argwhere(~np.isfinite(arr))[0]
    return int(idx[0]), int(idx[1])


def _guard(x, k):
    # generic models: stop at the first non-finite step, before the next measure snapshot
    if not np.all(np.isfinite(x)):
        flat = x.reshape(-1, x.shape[-1])
        raise BlowUpError(k, int(np.argwhere(~np.isfinite(flat))[0, 0]))


def run_clones(model: ModelSpec, x0: np.ndarray, dW: np.ndarray, h: float,
               laws: list, save_every: int = 1) -> np.ndarray:
    """Advance P independent paths under the given law sequence.

    x0 is (P, d), dW is (P, n, d); returns (n // save_every + 1, P, d).
    """
    P, n, d = dW.shape
    if isinstance(model, LinearMeanFieldModel):
        means = np.array([float(l.mean[0]) for l in laws[:n]])
        out = _backend.affine_paths(
            np.ascontiguousarray(dW[:, :, 0]), np.ascontiguousarray(x0[:, 0]), means,
            h, model.lam, model.theta, model.sigma0, save_every,
        )[:, :, None]
    else:
        out = np.empty((n // save_every + 1, P, d))
        x = np.array(x0, dtype=np.float64)
        out[0] = x
        for k in range(n):
            x = _em_update(model, x, laws[k].view(), dW[:, k, :], h)
            _guard(x, k + 1)
            if (k + 1) % save_every == 0:
                out[(k + 1) // save_every] = x
    if not np.all(np.isfinite(out)):
        s, p = _first_bad(out)
        raise BlowUpError(s * save_every, p)
    return out


def run_interacting(model: ModelSpec, x0: np.ndarray, dW: np.ndarray, h: float,
                    save_every: int = 1) -> np.ndarray:
    """Advance R independent N-particle systems.

    x0 is (R, N, d), dW is (R, N, n, d); returns (n // save_every + 1, R, N, d).
    """
    R, N, n, d = dW.shape
    if isinstance(model, LinearMeanFieldModel):
        out = _backend.affine_interacting(
            np.ascontiguousarray(dW[..., 0]), np.ascontiguousarray(x0[..., 0]),
            h, model.lam, model.theta, model.sigma0, save_every,
        )[..., None]
    else:
        out = np.empty((n // save_every + 1, R, N, d))
        x = np.array(x0, dtype=np.float64)
        out[0] = x
        for k in range(n):
            nxt = np.empty_like(x)
            for r in range(R):
                view = MeasureView.empirical(EmpiricalMeasure(x[r]))
                nxt[r] = _em_update(model, x[r], view, dW[r, :, k, :], h)
            x = nxt
            _guard(x, k + 1)
            if (k + 1) % save_every == 0:
                out[(k + 1) // save_every] = x
    if not np.all(np.isfinite(out)):
        s, rj = _first_bad(out.reshape(out.shape[0], -1))
        raise BlowUpError(s * save_every, rj // d)
    return out


def run_proxy_clones(model: ModelSpec, x0: np.ndarray, dW: np.ndarray, h: float,
                     proxy_x0: np.ndarray, proxy_dW: np.ndarray, save_every: int = 1) -> np.ndarray:
    """Clones driven by the empirical law of an interacting proxy ensemble."""
    P, n, d = dW.shape
    out = np.empty((n // save_every + 1, P, d))
    x = np.array(x0, dtype=np.float64)
    px = np.array(proxy_x0, dtype=np.float64)
    out[0] = x
    for k in range(n):
        view = MeasureView.empirical(EmpiricalMeasure(px))
        x = _em_update(model, x, view, dW[:, k, :], h)
        px = _em_update(model, px, view, proxy_dW[:, k, :], h)
        _guard(x, k + 1)
        _guard(px, k + 1)
        if (k + 1) % save_every == 0:
            out[(k + 1) // save_every] = x
    if not np.all(np.isfinite(out)):
        s, p = _first_bad(out.reshape(out.shape[0], -1))
        raise BlowUpError(s * save_every, p // d)
    return out


# --------------------------------------------------------------------------
# driver


@dataclass(frozen=True)
class TrajectoryRecord:
    kind: Kind
    n_particles: int
    seed: int
    h: float
    times: np.ndarray
    mean: np.ndarray  # (n_snap, d)
    second_moment: np.ndarray  # (n_snap,)
    states: np.ndarray | None = None  # (n_snap, N, d)
    law_mean: np.ndarray | None = None
    notes: list = field(default_factory=list)

    def __post_init__(self):
        for name in ("times", "mean", "second_moment", "states", "law_mean"):
            arr = getattr(self, name)
            if arr is not None:
                arr.flags.writeable = False


def simulate(model: ModelSpec, kind, N: int, grid: TimeGrid, master_seed: int,
             initial: InitialLaw, thin: int = 1, keep_states: bool = True,
             proxy_size: int = DEFAULT_PROXY_SIZE) -> TrajectoryRecord:
    """Run one ensemble over ``grid`` and record every ``thin``-th step.

    Particle j is driven by stream (master_seed, j). Initial states are drawn
    from ``initial`` with a seed derived from master_seed.
    """
    kind = Kind(kind)
    if N < 1:
        raise ValueError("N must be >= 1")
    if initial.dim != model.dim:
        raise ValueError("initial law dimension does not match the model")
    notes = []
    if model.constants is not None:
        th = compute_thresholds(model.constants)
        if grid.h >= th.h_sharp:
            msg = f"h={grid.h} is not below h_sharp={th.h_sharp:.6g}"
            warnings.warn(msg, RuntimeWarning, stacklevel=2)
            notes.append(msg)
    n = grid.n_steps
    if n % thin:
        raise ValueError(f"thin={thin} does not divide n_steps={n}")
    d = model.dim
    x0 = initial.sample(N, derive_seed(master_seed, INIT_TAG))
    dW = increments_from_paths(sample_paths(master_seed, range(N), grid, d))

    law_mean = None
    if kind is Kind.INTERACTING:
        states = run_interacting(model, x0[None], dW[None], grid.h, thin)[:, 0]
    elif model.law_mode is LawMode.EXACT_LINEAR:
        laws = law_sequence(model, initial.law_state(), grid.h, n)
        states = run_clones(model, x0, dW, grid.h, laws, thin)
        law_mean = np.array([l.mean for l in laws[::thin]])
    elif kind is Kind.CLONES:
        notes.append(f"law approximated by an interacting proxy of {proxy_size} particles")
        px0 = initial.sample(proxy_size, derive_seed(master_seed, INIT_TAG, PROXY_FAMILY))
        pdW = increments_from_paths(sample_paths(master_seed, range(proxy_size), grid, d, family=PROXY_FAMILY))
        states = run_proxy_clones(model, x0, dW, grid.h, px0, pdW, thin)
    else:
        raise UnsupportedLawError(f"model {model.name!r} has no closed-form law")

    times = np.arange(0, n + 1, thin) * grid.h
    mean = states.mean(axis=1)
    second = np.mean(np.sum(states * states, axis=2), axis=1)
    return TrajectoryRecord(
        kind, N, int(master_seed), grid.h, times, mean, second,
        states if keep_states else None, law_mean, notes,
    )
