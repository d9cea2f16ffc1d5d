"""Regularization surfaces over a (lambda, gamma) grid with escape steps.

Three surfaces are tracked. A is plain coordinate descent warm-started
from the previous A point; B runs descent plus escape warm-started from
the previous B point; C applies the escape to the A point itself. The
reported solution at each grid point is the better of B and C.
"""

from __future__ import annotations

import logging
import math
import warnings
from dataclasses import dataclass
from typing import Optional

import numpy as np

from ..core import EscapeConfig, escape_loop
from .penalty import PenaltyMC
from .regression import coordinate_descent, lambda_max, objective
from .selective import scaling_escape_sweep

logger = logging.getLogger(__name__)

ZERO_TOL = 1e-10
IMPROVED = -0.005


def make_grid(prob, n_lambda=50, n_gamma=8, gamma_lo=1.000001, gamma_hi=150.0,
              lambda_frac=0.01):
    """Log-spaced grids: lambda descending from ``lambda_max``, gamma ascending."""
    lmax = lambda_max(prob)
    if n_lambda == 1:
        lams = np.array([lmax])
    else:
        lams = np.exp(np.linspace(math.log(lmax), math.log(lambda_frac * lmax), n_lambda))
        lams[0], lams[-1] = lmax, lambda_frac * lmax
    if n_gamma == 1:
        gams = np.array([gamma_hi])
    else:
        gams = np.exp(np.linspace(math.log(gamma_lo), math.log(gamma_hi), n_gamma))
        gams[0], gams[-1] = gamma_lo, gamma_hi
    return lams, gams


def pct_delta(old, new):
    """Relative change ``(new - old) / old``."""
    if old == 0:
        raise ZeroDivisionError("relative change undefined for a zero baseline")
    return (new - old) / old


pct_delta_L = pct_delta


def pct_delta_e(old, new):
    """Relative change in selection error; 0/0 is 0, x/0 is undefined (nan)."""
    if old == 0:
        return 0.0 if new == 0 else math.nan
    return (new - old) / old


def var_sel_error(beta_hat, beta_true, zero_tol=ZERO_TOL):
    """Fraction of coefficients whose zero/nonzero status is wrong."""
    beta_hat = np.asarray(beta_hat, dtype=float)
    beta_true = np.asarray(beta_true, dtype=float)
    if beta_hat.shape != beta_true.shape:
        raise ValueError("coefficient vectors differ in length")
    est_zero = np.abs(beta_hat) < zero_tol
    true_zero = beta_true == 0
    return float(np.mean(est_zero != true_zero))


@dataclass
class SurfaceSet:
    lambda_grid: np.ndarray
    gamma_grid: np.ndarray  # ascending
    A: np.ndarray  # (n_lambda, n_gamma, d)
    B: np.ndarray
    C: np.ndarray
    obj_A: np.ndarray  # (n_lambda, n_gamma)
    obj_B: np.ndarray
    obj_C: np.ndarray
    kept_choice: np.ndarray  # 'B' or 'C'
    rounds_B: np.ndarray
    rounds_C: np.ndarray

    @property
    def kept(self):
        pick_c = (self.kept_choice == "C")[:, :, None]
        return np.where(pick_c, self.C, self.B)

    @property
    def obj_kept(self):
        return np.minimum(self.obj_B, self.obj_C)

    def pct_delta_L(self):
        return (self.obj_kept - self.obj_A) / self.obj_A


def _escape_pieces(prob, pen, sets, cd_tol):
    def obj(beta):
        return objective(beta, prob, pen)

    def ao_step(beta):
        res = coordinate_descent(prob, pen, beta, cd_tol)
        return res.beta, res.n_sweeps

    def escape_step(beta):
        return scaling_escape_sweep(beta, prob, pen, sets), 1

    return obj, ao_step, escape_step


def fit_point(prob, pen, sets, start_A, start_B, escape, cd_tol=1e-8):
    """Fit A, B and C at one grid point from their warm starts."""
    a = coordinate_descent(prob, pen, start_A, cd_tol).beta
    if escape is None:
        b = a if start_B is start_A else coordinate_descent(prob, pen, start_B, cd_tol).beta
        return a, b, a.copy(), 0, 0
    obj, ao_step, escape_step = _escape_pieces(prob, pen, sets, cd_tol)
    b, rep_b = escape_loop(obj, ao_step, escape_step, start_B, escape)
    # C starts from the A solution, which is already a descent fixed point
    c, rep_c = escape_loop(obj, ao_step, escape_step, a, escape, start_converged=True)
    return a, b, c, len(rep_b.rounds), len(rep_c.rounds)


def fit_surfaces(prob, lambda_grid, gamma_grid, sets, escape=None, cd_tol=1e-8):
    """Fit surfaces A, B, C over the grid.

    Traversal: lambda descending (outer), gamma descending (inner); each
    point is warm-started from the same gamma at the previous lambda, and
    the first lambda starts from zero. ``escape=None`` disables the escape
    steps so that B and C reproduce A.
    """
    lams = np.asarray(lambda_grid, dtype=float)
    gams = np.asarray(gamma_grid, dtype=float)
    L, G, d = lams.size, gams.size, prob.d
    A = np.zeros((L, G, d))
    B = np.zeros((L, G, d))
    C = np.zeros((L, G, d))
    rounds_B = np.zeros((L, G), dtype=int)
    rounds_C = np.zeros((L, G), dtype=int)
    zero = np.zeros(d)
    gamma_order = np.argsort(-gams, kind="stable")
    for i, lam in enumerate(lams):
        for g in gamma_order:
            pen = PenaltyMC(float(lam), float(gams[g]))
            start_A = zero if i == 0 else A[i - 1, g]
            start_B = zero if i == 0 else B[i - 1, g]
            a, b, c, rb, rc = fit_point(prob, pen, sets, start_A, start_B, escape, cd_tol)
            A[i, g], B[i, g], C[i, g] = a, b, c
            rounds_B[i, g], rounds_C[i, g] = rb, rc
        logger.debug("lambda %d/%d done", i + 1, L)

    obj = np.zeros((3, L, G))
    for s, surf in enumerate((A, B, C)):
        for i, lam in enumerate(lams):
            for g, gam in enumerate(gams):
                obj[s, i, g] = objective(surf[i, g], prob, PenaltyMC(float(lam), float(gam)))
    choice = np.where(obj[1] <= obj[2], "B", "C")
    return SurfaceSet(lams, gams, A, B, C, obj[0], obj[1], obj[2], choice,
                      rounds_B, rounds_C)


def gamma_halves(n_gamma):
    """Index arrays for the small- and large-gamma halves of an ascending grid."""
    lower = math.ceil(n_gamma / 2)
    if n_gamma % 2:
        warnings.warn(f"odd gamma grid ({n_gamma}); small half gets {lower} values",
                      stacklevel=2)
    return np.arange(lower), np.arange(lower, n_gamma)


def _mean_or_none(x):
    return float(np.mean(x)) if x.size else None


def summarize_block(dL, de):
    """Table-style aggregates for one block of grid points (flat arrays)."""
    dL = np.asarray(dL, dtype=float)
    out = {
        "n_points": int(dL.size),
        "fraction_little_difference": float(np.mean((dL >= IMPROVED) & (dL < 0))) if dL.size else None,
        "fraction_no_change": float(np.mean(dL == 0)) if dL.size else None,
        "fraction_near_zero": float(np.mean((dL >= IMPROVED) & (dL <= 0))) if dL.size else None,
        "fraction_improved": float(np.mean(dL < IMPROVED)) if dL.size else None,
        "mean_pct_delta_L_improved": _mean_or_none(dL[dL < IMPROVED]),
    }
    if de is not None:
        de = np.asarray(de, dtype=float)
        ok = ~np.isnan(de)
        out["fraction_pct_delta_e_zero"] = float(np.mean(de[ok] == 0)) if ok.any() else None
        out["mean_pct_delta_e_nonzero"] = _mean_or_none(de[ok & (de != 0)])
        out["n_pct_delta_e_undefined"] = int((~ok).sum())
    return out


def surface_errors(surf, beta_true):
    """Selection error of surfaces A and kept, shape (n_lambda, n_gamma) each."""
    kept = surf.kept
    L, G = surf.obj_A.shape
    eA = np.zeros((L, G))
    eK = np.zeros((L, G))
    for i in range(L):
        for g in range(G):
            eA[i, g] = var_sel_error(surf.A[i, g], beta_true)
            eK[i, g] = var_sel_error(kept[i, g], beta_true)
    return eA, eK


def summarize(surf, beta_true=None):
    """Aggregates split into small-gamma, large-gamma and all points."""
    dL = surf.pct_delta_L()
    de = None
    if beta_true is not None:
        eA, eK = surface_errors(surf, beta_true)
        de = np.vectorize(pct_delta_e)(eA, eK)
    small, large = gamma_halves(surf.gamma_grid.size)
    out = {}
    for name, cols in (("small_gamma", small), ("large_gamma", large),
                       ("all_gamma", np.arange(surf.gamma_grid.size))):
        out[name] = summarize_block(dL[:, cols].ravel(),
                                    None if de is None else de[:, cols].ravel())
    return out
