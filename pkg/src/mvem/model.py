"""McKean-Vlasov coefficients, measure arguments and sample-based assumption checks.

Coefficients are evaluated on batches: ``drift(x, mu)`` takes states of shape
(n, d) and returns (n, d); ``diffusion(x, mu)`` returns (n, d, d). The measure
argument is a :class:`MeasureView`.
"""

from __future__ import annotations

import enum
import math
import dataclasses
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .measure import EmpiricalMeasure, w2


class ModelEvaluationError(ValueError):
    """A coefficient was evaluated at, or produced, a non-finite value."""


class LawMode(enum.Enum):
    EXACT_LINEAR = "exact_linear"
    EMPIRICAL_ONLY = "empirical_only"


class MeasureView:
    """The measure argument of the coefficients.

    Either wraps an :class:`EmpiricalMeasure` or carries a closed-form
    (mean, second moment) summary. Both expose ``mean`` and ``second_moment``.
    """

    __slots__ = ("measure", "mean", "second_moment")

    def __init__(self, mean, second_moment, measure=None):
        self.measure = measure
        self.mean = np.atleast_1d(np.asarray(mean, dtype=np.float64))
        self.second_moment = float(second_moment)

    @classmethod
    def empirical(cls, measure: EmpiricalMeasure) -> "MeasureView":
        if not isinstance(measure, EmpiricalMeasure):
            measure = EmpiricalMeasure(measure)
        mean, second = measure.moments()
        return cls(mean, second, measure=measure)

    @classmethod
    def closed_form(cls, mean, second_moment) -> "MeasureView":
        mean = np.atleast_1d(np.asarray(mean, dtype=np.float64))
        if not np.all(np.isfinite(mean)) or not math.isfinite(second_moment):
            raise ValueError("closed-form measure summary must be finite")
        # Cauchy-Schwarz, with rounding slack
        if second_moment < float(mean @ mean) * (1 - 1e-12) - 1e-300:
            raise ValueError(
                f"second moment {second_moment} is below |mean|^2 = {float(mean @ mean)}"
            )
        return cls(mean, second_moment)

    @property
    def is_empirical(self) -> bool:
        return self.measure is not None

    def __repr__(self):
        kind = "Empirical" if self.is_empirical else "ClosedForm"
        return f"MeasureView.{kind}(mean={self.mean.tolist()}, second_moment={self.second_moment})"


@dataclass(frozen=True)
class AssumptionConstants:
    alpha: float
    beta: float
    gamma: float
    kappa: float
    rho: float
    c0: float
    a: float
    b: float

    def __post_init__(self):
        vals = {k: getattr(self, k) for k in ("alpha", "beta", "gamma", "kappa", "rho", "c0", "a", "b")}
        for name, val in vals.items():
            if not math.isfinite(val) or val < 0:
                raise ValueError(f"constant {name} must be finite and non-negative, got {val}")
        if not self.alpha > self.beta:
            raise ValueError(f"need alpha > beta, got alpha={self.alpha}, beta={self.beta}")
        if not self.gamma > self.kappa:
            raise ValueError(f"need gamma > kappa, got gamma={self.gamma}, kappa={self.kappa}")
        for name in ("rho", "c0", "a", "b"):
            if not vals[name] > 0:
                raise ValueError(f"constant {name} must be positive")


# Constants for the built-in linear model at lambda=1.2, theta=0.4, sigma0=1.
# a = 2*lambda^2 and b = 2*theta^2 follow from Young's inequality on the drift
# difference; with them a + b < alpha - beta does not hold.
LINEAR_EXAMPLE_CONSTANTS = AssumptionConstants(
    alpha=1.6, beta=0.4, gamma=1.6, kappa=0.4, rho=1.0, c0=4.0, a=2.88, b=0.32
)


@dataclass(frozen=True)
class LawState:
    """Closed-form law summary carried alongside the self-consistent scheme."""

    mean: np.ndarray
    second_moment: float

    def __post_init__(self):
        object.__setattr__(self, "mean", np.atleast_1d(np.asarray(self.mean, dtype=np.float64)))
        m2 = float(self.mean @ self.mean)
        if self.second_moment < m2 * (1 - 1e-12) - 1e-300:
            raise ValueError("law second moment below |mean|^2")

    def view(self) -> MeasureView:
        return MeasureView(self.mean, self.second_moment)

    @property
    def variance(self) -> float:
        return self.second_moment - float(self.mean @ self.mean)


class ModelSpec:
    """Drift/diffusion pair with measure dependence and declared constants.

    Parameters
    ----------
    dim : int
        State dimension d; the noise dimension equals d.
    drift, diffusion : callable
        ``f(x, mu)`` with ``x`` of shape (n, d) and ``mu`` a MeasureView.
        Return shapes (n, d) and (n, d, d).
    constants : AssumptionConstants, optional
    law_mode : LawMode
        ``EXACT_LINEAR`` requires ``law_step``, the closed-form one-step map of
        the scheme's law summary.
    """

    name = "custom"

    def __init__(self, dim, drift, diffusion, constants=None,
                 law_mode=LawMode.EMPIRICAL_ONLY, law_step=None, name=None):
        if int(dim) < 1:
            raise ValueError("dim must be >= 1")
        self.dim = int(dim)
        self._drift = drift
        self._diffusion = diffusion
        self.constants = constants
        self.law_mode = LawMode(law_mode)
        self._law_step = law_step
        if name is not None:
            self.name = name
        if self.law_mode is LawMode.EXACT_LINEAR and law_step is None and type(self).law_step is ModelSpec.law_step:
            raise ValueError("EXACT_LINEAR models need a law_step")

    def drift(self, x: np.ndarray, mu: MeasureView) -> np.ndarray:
        return self._drift(x, mu)

    def diffusion(self, x: np.ndarray, mu: MeasureView) -> np.ndarray:
        return self._diffusion(x, mu)

    def law_step(self, law: LawState, h: float) -> LawState:
        if self._law_step is None:
            raise NotImplementedError(f"model {self.name!r} has no closed-form law")
        return self._law_step(law, h)

    def to_config(self) -> dict:
        return {"id": self.name, "dim": self.dim}


class LinearMeanFieldModel(ModelSpec):
    """dX = (-lam X + theta E[X]) dt + sigma0 dW in one dimension."""

    name = "linear"

    def __init__(self, lam=1.2, theta=0.4, sigma0=1.0, constants=None):
        lam, theta, sigma0 = float(lam), float(theta), float(sigma0)
        if not (lam > theta >= 0):
            raise ValueError(f"need lam > theta >= 0, got lam={lam}, theta={theta}")
        if not sigma0 >= 0:
            raise ValueError("sigma0 must be non-negative")
        self.lam, self.theta, self.sigma0 = lam, theta, sigma0
        super().__init__(1, None, None, constants=constants, law_mode=LawMode.EXACT_LINEAR)

    def drift(self, x, mu):
        return (-self.lam) * x + self.theta * mu.mean

    def diffusion(self, x, mu):
        return np.full((x.shape[0], 1, 1), self.sigma0)

    def mean_step(self, m: float, h: float) -> float:
        return m + h * ((-self.lam) * m + self.theta * m)

    def law_step(self, law, h):
        m = float(law.mean[0])
        a = 1.0 - self.lam * h
        c = self.theta * h * m
        # E[(aX + c + sigma dW)^2] with X ~ law, dW ~ N(0, h) independent
        second = a * a * law.second_moment + 2.0 * a * c * m + c * c + self.sigma0 ** 2 * h
        return LawState(np.array([self.mean_step(m, h)]), second)

    def stationary_variance(self, h: float | None = None) -> float:
        """Variance of the invariant law: continuous (h=None) or of the EM chain."""
        if h is None:
            return self.sigma0 ** 2 / (2.0 * self.lam)
        return self.sigma0 ** 2 / (2.0 * self.lam - self.lam ** 2 * h)

    def to_config(self):
        return {"id": self.name, "lam": self.lam, "theta": self.theta, "sigma0": self.sigma0,
                "constants": None if self.constants is None else dataclasses.asdict(self.constants)}


def _as_state(x, dim) -> np.ndarray:
    x = np.atleast_1d(np.asarray(x, dtype=np.float64))
    if x.shape != (dim,):
        raise ModelEvaluationError(f"state has shape {x.shape}, expected ({dim},)")
    if not np.all(np.isfinite(x)):
        raise ModelEvaluationError(f"non-finite state {x.tolist()}")
    return x


def eval_drift(model: ModelSpec, x, mu: MeasureView) -> np.ndarray:
    x = _as_state(x, model.dim)
    out = np.asarray(model.drift(x[None, :], mu), dtype=np.float64).reshape(-1)
    if out.shape != (model.dim,):
        raise ModelEvaluationError(f"drift returned shape {out.shape}, expected ({model.dim},)")
    if not np.all(np.isfinite(out)):
        raise ModelEvaluationError(f"drift is non-finite at x={x.tolist()}, mu={mu!r}")
    return out


def eval_diffusion(model: ModelSpec, x, mu: MeasureView) -> np.ndarray:
    x = _as_state(x, model.dim)
    out = np.asarray(model.diffusion(x[None, :], mu), dtype=np.float64)
    out = out.reshape(model.dim, model.dim)
    if not np.all(np.isfinite(out)):
        raise ModelEvaluationError(f"diffusion is non-finite at x={x.tolist()}, mu={mu!r}")
    return out


# --------------------------------------------------------------------------
# assumption checks (falsification only)


@dataclass
class Violation:
    index: int
    inequality: str
    lhs: float
    rhs: float

    @property
    def slack(self) -> float:
        return self.rhs - self.lhs


@dataclass
class CheckReport:
    n_samples: int
    violations: list = field(default_factory=list)
    # worst (smallest) slack seen per inequality
    min_slack: dict = field(default_factory=dict)

    @property
    def ok(self) -> bool:
        return not self.violations

    def count(self, inequality: str) -> int:
        return sum(v.inequality == inequality for v in self.violations)

    def _record(self, index, name, lhs, rhs):
        slack = rhs - lhs
        self.min_slack[name] = min(self.min_slack.get(name, math.inf), slack)
        # relative rounding allowance; exact ties such as x=y, mu=nu pass
        if lhs > rhs + 1e-12 * (1.0 + abs(lhs) + abs(rhs)):
            self.violations.append(Violation(index, name, float(lhs), float(rhs)))


Sample = tuple  # (x, y, mu, nu) with mu, nu EmpiricalMeasure


def sample_inputs(dim: int, n: int, box: float = 10.0, measure_size: int = 16,
                  seed: int = 0) -> list:
    """Uniform states in [-box, box]^d and empirical measures of ``measure_size`` points."""
    rng = np.random.default_rng(seed)
    out = []
    for _ in range(n):
        x = rng.uniform(-box, box, dim)
        y = rng.uniform(-box, box, dim)
        mu = EmpiricalMeasure(rng.uniform(-box, box, (measure_size, dim)))
        nu = EmpiricalMeasure(rng.uniform(-box, box, (measure_size, dim)))
        out.append((x, y, mu, nu))
    return out


def _coeffs(model, x, mu):
    view = MeasureView.empirical(mu)
    return eval_drift(model, x, view), eval_diffusion(model, x, view), view


def _require_constants(model, constants):
    constants = constants if constants is not None else model.constants
    if constants is None:
        raise ValueError(f"model {model.name!r} declares no assumption constants")
    return constants


def check_assumption2(model: ModelSpec, samples: Sequence[Sample],
                      constants: AssumptionConstants | None = None) -> CheckReport:
    """Evaluate the monotonicity and dissipativity inequalities on each sample.

    ``monotone``: 2<b(x,mu)-b(y,nu), x-y> + |s(x,mu)-s(y,nu)|^2 <= -alpha|x-y|^2 + beta W2^2
    ``dissipative``: 2<b(x,mu), x> + (1+rho)|s(x,mu)|^2 <= -gamma|x|^2 + kappa(1 + rho + mu(|.|^2)),
    checked at (x, mu) and at (y, nu).
    """
    c = _require_constants(model, constants)
    if not samples:
        raise ValueError("no samples")
    report = CheckReport(len(samples))
    for i, (x, y, mu, nu) in enumerate(samples):
        x = _as_state(x, model.dim)
        y = _as_state(y, model.dim)
        bx, sx, vmu = _coeffs(model, x, mu)
        by, sy, vnu = _coeffs(model, y, nu)
        dist2 = w2(mu, nu) ** 2
        dx = x - y
        lhs = 2.0 * float((bx - by) @ dx) + float(np.sum((sx - sy) ** 2))
        rhs = -c.alpha * float(dx @ dx) + c.beta * dist2
        report._record(i, "monotone", lhs, rhs)
        for z, bz, sz, view in ((x, bx, sx, vmu), (y, by, sy, vnu)):
            lhs = 2.0 * float(bz @ z) + (1.0 + c.rho) * float(np.sum(sz ** 2))
            rhs = -c.gamma * float(z @ z) + c.kappa * (1.0 + c.rho + view.second_moment)
            report._record(i, "dissipative", lhs, rhs)
    return report


def check_assumption3(model: ModelSpec, samples: Sequence[Sample],
                      constants: AssumptionConstants | None = None) -> CheckReport:
    """Evaluate the linear-growth and Lipschitz bounds on each sample.

    ``growth``: |b(x,mu)|^2 v |s(x,mu)|^2 <= c0(1 + |x|^2 + mu(|.|^2)), at (x, mu) and (y, nu).
    ``lipschitz``: |b(x,mu)-b(y,nu)|^2 v |s(x,mu)-s(y,nu)|^2 <= a|x-y|^2 + b W2(mu,nu)^2.
    """
    c = _require_constants(model, constants)
    if not samples:
        raise ValueError("no samples")
    report = CheckReport(len(samples))
    for i, (x, y, mu, nu) in enumerate(samples):
        x = _as_state(x, model.dim)
        y = _as_state(y, model.dim)
        bx, sx, vmu = _coeffs(model, x, mu)
        by, sy, vnu = _coeffs(model, y, nu)
        for z, bz, sz, view in ((x, bx, sx, vmu), (y, by, sy, vnu)):
            lhs = max(float(bz @ bz), float(np.sum(sz ** 2)))
            rhs = c.c0 * (1.0 + float(z @ z) + view.second_moment)
            report._record(i, "growth", lhs, rhs)
        dx = x - y
        lhs = max(float((bx - by) @ (bx - by)), float(np.sum((sx - sy) ** 2)))
        rhs = c.a * float(dx @ dx) + c.b * w2(mu, nu) ** 2
        report._record(i, "lipschitz", lhs, rhs)
    return report


def check_assumption4(constants: AssumptionConstants) -> bool:
    return constants.a + constants.b < constants.alpha - constants.beta
