"""Escape-augmented alternating optimization.

The driver here is problem agnostic: a problem supplies an objective, an
alternating (AO) step that runs to convergence, and an escape step that
searches a different subspace starting from the AO solution. The BFGS
minimizer and the finite-difference gradient are shared by the solvers in
:mod:`aoescape.matfac` and by the test-suite oracles.
"""

from __future__ import annotations

import enum
import logging
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
from scipy.linalg.blas import dger as _dger

logger = logging.getLogger(__name__)

__all__ = [
    "Objective",
    "EscapeConfig",
    "EscapeReport",
    "Termination",
    "QuasiNewtonConfig",
    "QNResult",
    "toy_objective",
    "escape_loop",
    "quasi_newton_minimize",
    "finite_diff_gradient",
    "toy_coordinate_ao",
    "toy_diagonal_escape",
]


@dataclass(frozen=True)
class Objective:
    """A scalar loss over a flat parameter vector, with optional gradient."""

    fun: Callable[[np.ndarray], float]
    grad: Optional[Callable[[np.ndarray], np.ndarray]] = None

    def __call__(self, x):
        return float(self.fun(np.asarray(x, dtype=float)))

    def gradient(self, x, h=1e-6):
        x = np.asarray(x, dtype=float)
        if self.grad is None:
            return finite_diff_gradient(self, x, h)
        return np.asarray(self.grad(x), dtype=float)


class Termination(str, enum.Enum):
    IMPROVEMENT_BELOW_EPSILON = "improvement_below_epsilon"
    ROUND_CAP = "round_cap"


@dataclass(frozen=True)
class EscapeConfig:
    """Settings for :func:`escape_loop`.

    ``epsilon=None`` selects the scale-free default
    ``1e-6 * (1 + |f(start)|)``.
    """

    epsilon: Optional[float] = None
    max_rounds: int = 20
    ao_tol: float = 1e-8
    escape_tol: float = 1e-8

    def __post_init__(self):
        if self.epsilon is not None and not self.epsilon > 0:
            raise ValueError("epsilon must be positive")
        if self.max_rounds < 1:
            raise ValueError("max_rounds must be >= 1")
        if not (self.ao_tol > 0 and self.escape_tol > 0):
            raise ValueError("tolerances must be positive")

    def resolve_epsilon(self, f0):
        if self.epsilon is not None:
            return self.epsilon
        return 1e-6 * (1.0 + abs(f0))


@dataclass
class EscapeReport:
    rounds: list = field(default_factory=list)  # (loss_after_ao, loss_after_escape)
    total_ao_iterations: int = 0
    total_escape_iterations: int = 0
    terminated_by: Termination = Termination.IMPROVEMENT_BELOW_EPSILON

    @property
    def final_loss(self):
        return self.rounds[-1][1] if self.rounds else None

    def to_dict(self):
        return {
            "rounds": [[float(a), float(b)] for a, b in self.rounds],
            "total_ao_iterations": int(self.total_ao_iterations),
            "total_escape_iterations": int(self.total_escape_iterations),
            "terminated_by": self.terminated_by.value,
        }


def escape_loop(objective, ao_step, escape_step, start, cfg=None, *,
                start_converged=False):
    """Run AO, then escape, repeating while the escape pays off.

    ``ao_step(x)`` and ``escape_step(x)`` each return ``(x_new, n_iter)``
    and must not increase ``objective``. A round consists of AO to
    convergence followed by the escape search; another round starts only if
    the escape lowered the loss by more than epsilon. With
    ``start_converged=True`` the first round skips AO because ``start`` is
    already an AO fixed point.

    Returns ``(x, report)``.
    """
    cfg = cfg or EscapeConfig()
    x = start
    eps = cfg.resolve_epsilon(objective(x))
    report = EscapeReport()
    skip_ao = start_converged

    for _ in range(cfg.max_rounds):
        if skip_ao:
            skip_ao = False
        else:
            x_ao, n_ao = ao_step(x)
            report.total_ao_iterations += int(n_ao)
            # a non-descending callback must not break the report invariants
            if objective(x_ao) <= objective(x):
                x = x_ao
        f_ao = objective(x)

        x_new, n_esc = escape_step(x)
        report.total_escape_iterations += int(n_esc)
        f_new = objective(x_new)
        if f_new > f_ao:
            x_new, f_new = x, f_ao
        report.rounds.append((f_ao, f_new))
        x = x_new
        if not f_new < f_ao - eps:
            report.terminated_by = Termination.IMPROVEMENT_BELOW_EPSILON
            return x, report

    report.terminated_by = Termination.ROUND_CAP
    return x, report


@dataclass(frozen=True)
class QuasiNewtonConfig:
    grad_tol: float = 1e-8
    max_iter: int = 500
    line_search: str = "backtracking_armijo"
    armijo_c: float = 1e-4
    backtrack_factor: float = 0.5
    max_backtracks: int = 60
    curvature_eps: float = 1e-10

    def __post_init__(self):
        if not self.grad_tol > 0:
            raise ValueError("grad_tol must be positive")
        if self.max_iter < 1:
            raise ValueError("max_iter must be positive")
        if self.line_search != "backtracking_armijo":
            raise ValueError(f"unknown line search {self.line_search!r}")
        if not 0 < self.armijo_c < 1:
            raise ValueError("armijo_c must lie in (0, 1)")
        if not 0 < self.backtrack_factor < 1:
            raise ValueError("backtrack_factor must lie in (0, 1)")


@dataclass
class QNResult:
    x: np.ndarray
    fun: float
    grad_norm: float
    n_iter: int
    converged: bool
    stalled: bool = False


def _line_search(f, x, fx, slope, p, cfg, f_best):
    """Armijo backtracking with one quadratic-interpolation trial.

    The unit step and the minimizer of the quadratic through
    ``f(0), f'(0), f(1)`` are both tried; the better one is kept if it
    satisfies the Armijo condition, otherwise the step is halved from the
    smaller of the two. On a quadratic the interpolated step is exact.
    """
    c = cfg.armijo_c
    # Decreases below this are rounding noise in f. Once the predicted
    # decrease drops under it, a step is accepted on the approximate Wolfe
    # test instead: f within noise of the best value so far and the
    # directional derivative shrunk, which lets the gradient finish the job.
    noise = 4.0 * np.finfo(float).eps * abs(f_best)

    def ok(a, fa):
        if not np.isfinite(fa):
            return False
        if fa <= fx + c * a * slope:
            return True
        if -c * a * slope > noise or fa > f_best + noise:
            return False
        return float(f.gradient(x + a * p) @ p) <= -0.8 * slope

    f1 = f(x + p)
    trials = [(1.0, f1)]
    curv = f1 - fx - slope
    if np.isfinite(f1) and -slope < 1e4 * noise:
        # f differences are mostly rounding here; interpolate the
        # directional derivative instead, exact on a quadratic as well
        curv = 0.5 * (float(f.gradient(x + p) @ p) - slope)
    if np.isfinite(f1) and curv > 0:
        a_q = -slope / (2.0 * curv)
        if np.isfinite(a_q) and 1e-10 < a_q < 1e10 and a_q != 1.0:
            trials.append((a_q, f(x + a_q * p)))
    alpha, fa = min(trials, key=lambda t: (t[1] if np.isfinite(t[1]) else np.inf))
    if ok(alpha, fa):
        return alpha, fa
    alpha = min(a for a, _ in trials)
    for _ in range(cfg.max_backtracks):
        alpha *= cfg.backtrack_factor
        fa = f(x + alpha * p)
        if ok(alpha, fa):
            return alpha, fa
    return None, fx


def _bfgs_update(H, s, y, sy):
    """In-place inverse-Hessian BFGS update (three BLAS rank-1 updates)."""
    rho = 1.0 / sy
    Hy = H @ y
    coef = rho * rho * float(y @ Hy) + rho
    _dger(-rho, s, Hy, a=H, overwrite_a=True)
    _dger(-rho, Hy, s, a=H, overwrite_a=True)
    _dger(coef, s, s, a=H, overwrite_a=True)


def quasi_newton_minimize(f, x0, cfg=None, *, retract=None):
    """Minimize ``f`` with BFGS on the inverse Hessian.

    ``f`` is an :class:`Objective` (gradients fall back to central
    differences). ``retract``, if given, maps every accepted iterate back
    onto a manifold, e.g. the unit sphere for scale-invariant objectives.
    The returned point never has a larger loss than ``x0``.
    """
    cfg = cfg or QuasiNewtonConfig()
    if not isinstance(f, Objective):
        f = Objective(f)
    x = np.array(x0, dtype=float)
    if retract is not None:
        x = retract(x)
    n = x.size
    fx = f(x)
    f_best, x_best = fx, x

    def done(it, converged, stalled=False):
        # relaxed steps may sit a rounding error above the best point seen
        if fx > f_best:
            return QNResult(x_best, f_best, gnorm, it, converged, stalled)
        return QNResult(x, fx, gnorm, it, converged, stalled)
    g = f.gradient(x)
    H = np.eye(n, order="F")
    fresh = True  # H is still the (unscaled) identity
    skipped = 0  # consecutive skipped updates
    gnorm = float(np.linalg.norm(g))

    for it in range(cfg.max_iter):
        if gnorm <= cfg.grad_tol:
            return done(it, True)
        p = -H @ g
        slope = float(g @ p)
        if not slope < 0:
            # lost descent direction, restart from steepest descent
            H = np.eye(n, order="F")
            fresh = True
            p = -g
            slope = -gnorm**2
        alpha, f_new = _line_search(f, x, fx, slope, p, cfg, f_best)
        if alpha is None and not fresh:
            # a stale curvature model can point along a useless direction
            H = np.eye(n, order="F")
            fresh = True
            p = -g
            slope = -gnorm**2
            alpha, f_new = _line_search(f, x, fx, slope, p, cfg, f_best)
        if alpha is None:
            logger.debug("line search stalled at iteration %d", it)
            return done(it, False, stalled=True)
        x_new = x + alpha * p
        if np.array_equal(x_new, x):
            # step below rounding: Armijo holds trivially but nothing moves
            return done(it, False, stalled=True)
        if retract is not None:
            x_new = retract(x_new)
            f_new = f(x_new)
            if f_new > fx:
                return done(it, False, stalled=True)
        g_new = f.gradient(x_new)
        s = x_new - x
        y = g_new - g
        sy = float(s @ y)
        if sy > cfg.curvature_eps:
            if fresh:
                # scale the identity to the observed curvature first
                H *= sy / float(y @ y)
                fresh = False
            _bfgs_update(H, s, y, sy)
            skipped = 0
        else:
            skipped += 1
            if skipped >= 2 and not fresh and sy <= 0:
                # steps too short to refresh the model: start it over
                H = np.eye(n, order="F")
                fresh = True
        x, fx, g = x_new, f_new, g_new
        if fx < f_best:
            f_best, x_best = fx, x
        gnorm = float(np.linalg.norm(g))

    return done(cfg.max_iter, gnorm <= cfg.grad_tol)


def finite_diff_gradient(f, x, h=1e-6):
    """Central-difference gradient, one coordinate at a time."""
    if h <= 0:
        raise ValueError("step h must be positive")
    x = np.asarray(x, dtype=float)
    g = np.empty_like(x)
    e = np.zeros_like(x)
    for i in range(x.size):
        e.flat[i] = h
        g.flat[i] = (f(x + e) - f(x - e)) / (2.0 * h)
        e.flat[i] = 0.0
    return g


# Toy saddle f(x, y) = (x - y)^2 - x^2 y^2; unbounded below, saddle at 0.

def toy_objective(x, y):
    return (x - y) ** 2 - x**2 * y**2


def _argmin_quadratic_on_box(a, b, lo, hi):
    """Minimize ``a t^2 + b t`` over ``[lo, hi]``."""
    cands = [lo, hi]
    if a > 0:
        t = -b / (2 * a)
        if lo < t < hi:
            cands.append(t)
    return min(cands, key=lambda t: (a * t * t + b * t, abs(t)))


def toy_coordinate_ao(z, box=10.0, tol=1e-12, max_sweeps=1000):
    """Exact coordinatewise minimization of the toy saddle inside a box.

    With ``y`` fixed the toy objective is ``(1 - y^2) x^2 - 2 y x + y^2``,
    so each block update is a one-dimensional quadratic on an interval.
    """
    x, y = float(z[0]), float(z[1])
    f_old = toy_objective(x, y)
    sweeps = 0
    for sweeps in range(1, max_sweeps + 1):
        x_new = _argmin_quadratic_on_box(1 - y * y, -2 * y, -box, box)
        if toy_objective(x_new, y) < toy_objective(x, y):
            x = x_new
        y_new = _argmin_quadratic_on_box(1 - x * x, -2 * x, -box, box)
        if toy_objective(x, y_new) < toy_objective(x, y):
            y = y_new
        f_new = toy_objective(x, y)
        if abs(f_old - f_new) <= tol * (1 + abs(f_old)):
            break
        f_old = f_new
    return np.array([x, y]), sweeps


def toy_diagonal_escape(z, box=10.0):
    """Search the line through ``z`` along (1, 1), clipped to the box."""
    from scipy.optimize import minimize_scalar

    z = np.asarray(z, dtype=float)
    lo = -box - min(z)
    hi = box - max(z)
    g = lambda t: toy_objective(z[0] + t, z[1] + t)
    ts = np.linspace(lo, hi, 2001)
    vals = np.array([g(t) for t in ts])
    k = int(np.argmin(vals))
    best_t, best_f = float(ts[k]), float(vals[k])
    res = minimize_scalar(g, bounds=(ts[max(k - 1, 0)], ts[min(k + 1, ts.size - 1)]),
                          method="bounded", options={"xatol": 1e-12})
    if res.fun < best_f:
        best_t, best_f = float(res.x), float(res.fun)
    if best_f >= g(0.0):
        return z.copy(), 1
    return z + best_t, 1
