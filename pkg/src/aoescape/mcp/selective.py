"""Exact minimization of the selective-scaling subproblem.

For coordinate ``j`` and a set ``E`` of other coordinates, the escape step
minimizes over ``(b, v)``::

    F(b, v) = 0.5 |a - b x_j - v c|^2 + J(b) + sum_{k in E} J(v beta_k) + const

with ``a = y - sum_{l not in E, l != j} beta_l x_l`` and
``c = sum_{k in E} beta_k x_k``. ``F`` is piecewise quadratic and
continuously differentiable away from ``b = 0`` and ``v = 0``, so its
global minimizer is either a stationary point inside one of the pieces or
lies on those two lines. Stationary points are found per piece: the
``b``-condition gives ``b = psi + xi v`` for each sign/knot case of ``b``,
and substituting it into the ``v``-condition leaves a linear equation in
``v`` on each interval between the knots ``gamma lam / |beta_k|``.
Candidates whose ``b`` falls outside the case that produced them are
dropped; the remaining ones, the points on the non-smooth lines and the
piece boundaries are all scored with the exact objective.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import NamedTuple, Optional

import numpy as np

from .penalty import _threshold, mcp_penalty
from .regression import mcp_penalty_sum

CASES = ("zero", "pos_inside", "pos_outside", "neg_inside", "neg_outside")


@dataclass(frozen=True)
class CaseSpec:
    case: str
    C: float
    r: float
    psi: float
    xi: float

    def contains(self, b, knot, tol=0.0):
        """Whether ``b`` lies in the region this case assumes."""
        if self.case == "zero":
            return b == 0.0
        if self.case == "pos_inside":
            return 0.0 < b <= knot + tol
        if self.case == "neg_inside":
            return -knot - tol <= b < 0.0
        if self.case == "pos_outside":
            return b > knot - tol
        return b < -knot + tol


@dataclass(frozen=True)
class Subproblem:
    """Scalar summary of the ``(b, v)`` problem for one coordinate.

    ``betas`` holds the nonzero coefficients of the scaled set; members
    equal to zero stay zero under any ``v`` and are left out.
    """

    xa: float  # x_j . a
    xc: float  # x_j . c
    ca: float  # c . a
    cc: float  # c . c
    aa: float  # a . a
    betas: tuple
    lam: float
    gamma: float
    const: float = 0.0  # penalty of the coefficients held fixed
    b0: float = 0.0  # incumbent b

    @property
    def knot(self):
        return self.gamma * self.lam

    def value(self, b, v):
        quad = 0.5 * (self.aa - 2.0 * b * self.xa - 2.0 * v * self.ca + b * b
                      + v * v * self.cc + 2.0 * b * v * self.xc)
        lam, gamma, knot = self.lam, self.gamma, self.knot
        pen = _j(b, lam, gamma, knot)
        for bk in self.betas:
            pen += _j(v * bk, lam, gamma, knot)
        return max(quad, 0.0) + pen + self.const

    def best_b(self, v):
        """Exact minimizer over ``b`` for fixed ``v``."""
        return _threshold(self.xa - v * self.xc, self.lam, self.gamma)


def _j(t, lam, gamma, knot):
    a = abs(t)
    if a <= knot:
        return lam * a - t * t / (2.0 * gamma)
    return 0.5 * gamma * lam * lam


class VInterval(NamedTuple):
    lo: float
    hi: float  # may be inf
    active: tuple  # positions (into the beta list) with J' != 0 on the interval


def partition_intervals(betas, pen):
    """Split ``[0, inf)`` at the knots ``gamma lam / |beta_k|``.

    Intervals are returned from the one touching 0 outward. On each, the
    active members are those whose scaled value stays inside the knot,
    i.e. the ones with the smallest magnitudes. Zero entries are ignored;
    an all-zero input gives an empty list.
    """
    betas = [float(b) for b in betas]
    nz = [k for k, b in enumerate(betas) if b != 0.0]
    if not nz:
        return []
    order = sorted(nz, key=lambda k: abs(betas[k]))  # ascending |beta|
    knot = pen.gamma * pen.lam
    t = [knot / abs(betas[k]) for k in order]  # descending
    K = len(order)
    out = []
    # I_K = [0, t_K), I_{m} = [t_{m+1}, t_m), I_0 = [t_1, inf)
    for m in range(K, -1, -1):
        lo = 0.0 if m == K else t[m]
        hi = math.inf if m == 0 else t[m - 1]
        out.append(VInterval(lo, hi, tuple(order[:m])))
    return out


def _case_specs(sub):
    lam, gamma = sub.lam, sub.gamma
    specs = [CaseSpec("zero", 0.0, 0.0, 0.0, 0.0)]
    for name, C, r in (("pos_inside", lam, 1.0 / gamma),
                       ("pos_outside", 0.0, 0.0),
                       ("neg_inside", -lam, 1.0 / gamma),
                       ("neg_outside", 0.0, 0.0)):
        specs.append(CaseSpec(name, C, r, (sub.xa - C) / (1.0 - r), -sub.xc / (1.0 - r)))
    return specs


def solve_v_on_interval(interval, case, sub, sign=1):
    """Root of the reduced ``v``-equation on one interval, or ``None``.

    ``sign=-1`` searches the mirror image ``(-hi, -lo]`` of the interval,
    where every active ``J'(v beta_k)`` flips sign.
    """
    betas = sub.betas
    s1 = sum(abs(betas[k]) for k in interval.active)
    s2 = sum(betas[k] * betas[k] for k in interval.active)
    a0 = -sub.ca + case.psi * sub.xc + sign * sub.lam * s1
    a1 = sub.cc + case.xi * sub.xc - s2 / sub.gamma
    if a1 == 0.0:
        return None
    v = -a0 / a1
    t = sign * v
    tol = 1e-12 * (1.0 + abs(interval.lo))
    if t < interval.lo - tol:
        return None
    if interval.hi != math.inf and t > interval.hi * (1 + 1e-12) + 1e-300:
        return None
    return v


def build_subproblem(j, beta, prob, pen, E_j, residual=None):
    X = prob.X
    beta = np.asarray(beta, dtype=float)
    E = np.asarray(E_j, dtype=np.int64)
    E_nz = E[beta[E] != 0.0] if E.size else E
    r = prob.y - X @ beta if residual is None else residual
    xj = X[:, j]
    c = X[:, E_nz] @ beta[E_nz] if E_nz.size else np.zeros(prob.n)
    a = r + beta[j] * xj + c
    lam, gamma = pen.lam, pen.gamma
    const = (mcp_penalty_sum(beta, pen) - mcp_penalty(beta[j], pen)
             - mcp_penalty_sum(beta[E_nz], pen))
    sub = Subproblem(float(xj @ a), float(xj @ c), float(c @ a), float(c @ c),
                     float(a @ a), tuple(beta[E_nz].tolist()), lam, gamma,
                     const, float(beta[j]))
    return sub, a, c, E_nz


def build_case_specs(j, beta, prob, pen, E_j):
    """The five ``(psi, xi)`` pairs for coordinate ``j``."""
    sub, *_ = build_subproblem(j, beta, prob, pen, E_j)
    return _case_specs(sub)


class Candidate(NamedTuple):
    b: float
    v: float
    kind: str
    value: float


def enumerate_candidates(sub):
    """Every point the exact solver scores, incumbent first."""
    knot = sub.knot
    cands = [Candidate(sub.b0, 1.0, "incumbent", sub.value(sub.b0, 1.0))]

    def add_profile(v, kind):
        b = sub.best_b(v)
        cands.append(Candidate(b, v, kind, sub.value(b, v)))

    add_profile(0.0, "v_zero")
    intervals = partition_intervals(sub.betas, _Pen(sub.lam, sub.gamma))
    if not intervals:
        return cands

    specs = _case_specs(sub)
    tol = 1e-12 * (1.0 + knot)
    for spec in specs:
        for sign in (1, -1):
            for iv in intervals:
                v = solve_v_on_interval(iv, spec, sub, sign)
                if v is None:
                    continue
                b = spec.psi + spec.xi * v
                if spec.case == "zero":
                    b = 0.0
                if spec.contains(b, knot, tol):
                    cands.append(Candidate(b, v, spec.case, sub.value(b, v)))
        # where the line b = psi + xi v leaves the case's region
        if spec.case != "zero" and spec.xi != 0.0:
            for edge in (0.0, knot, -knot):
                v = (edge - spec.psi) / spec.xi
                if math.isfinite(v):
                    add_profile(v, "b_boundary")
    for iv in intervals:
        if iv.lo > 0.0:
            add_profile(iv.lo, "v_knot")
            add_profile(-iv.lo, "v_knot")
    return cands


class _Pen(NamedTuple):
    lam: float
    gamma: float


def solve_subproblem(sub):
    """Best scored candidate; the incumbent wins ties."""
    cands = enumerate_candidates(sub)
    best = cands[0]
    for cand in cands[1:]:
        if cand.value < best.value:
            best = cand
    return best


def selective_scaling_step(j, beta, prob, pen, E_j, residual=None):
    """Jointly optimal ``(beta_j, v)`` for coordinate ``j``.

    With no nonzero coefficient in ``E_j`` the scaling is vacuous and this
    reduces to the plain coordinate update with ``v = 1``.
    """
    sub, *_ = build_subproblem(j, beta, prob, pen, E_j, residual)
    if not sub.betas:
        return _threshold(sub.xa, sub.lam, sub.gamma), 1.0
    best = solve_subproblem(sub)
    return best.b, best.v


def scaling_escape_sweep(beta, prob, pen, sets, residual=None, trace=None):
    """One pass of selective scaling steps over ``j = 0..d-1``.

    ``sets[j]`` lists the coordinates rescaled together with ``j``
    (:func:`aoescape.mcp.all_sets` gives the unrestricted variant). If
    ``trace`` is a list the objective after every step is appended.
    Returns the new coefficient vector.
    """
    beta = np.array(beta, dtype=float)
    X = prob.X
    r = prob.y - X @ beta if residual is None else np.array(residual, dtype=float)
    for j in range(beta.size):
        sub, a, c, E_nz = build_subproblem(j, beta, prob, pen, sets[j], r)
        if not sub.betas:
            b, v = _threshold(sub.xa, sub.lam, sub.gamma), 1.0
        else:
            best = solve_subproblem(sub)
            b, v = best.b, best.v
        if b != beta[j] or v != 1.0:
            beta[j] = b
            if v != 1.0:
                beta[E_nz] *= v
            r = a - b * X[:, j] - v * c
        if trace is not None:
            trace.append(0.5 * float(r @ r) + mcp_penalty_sum(beta, pen))
    return beta
