"""MC+ penalty and its univariate thresholding rule.

All objectives in :mod:`aoescape.mcp` use the half-squared-error
convention ``0.5 * |y - X beta|^2 + sum_j J(beta_j)`` with unit-norm
columns, so a single-coordinate problem reads ``0.5 (b - z)^2 + J(b)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

from numba import njit


@dataclass(frozen=True)
class PenaltyMC:
    lam: float
    gamma: float

    def __post_init__(self):
        if self.lam < 0:
            raise ValueError("lam must be nonnegative")
        if not self.gamma > 1:
            raise ValueError("gamma must exceed 1")

    @property
    def knot(self):
        """Magnitude ``gamma * lam`` beyond which the penalty is flat."""
        return self.gamma * self.lam


def mcp_penalty(t, pen):
    a = abs(t)
    if a <= pen.gamma * pen.lam:
        return pen.lam * a - t * t / (2.0 * pen.gamma)
    return 0.5 * pen.gamma * pen.lam * pen.lam


def mcp_penalty_deriv(t, pen):
    if t == 0:
        raise ValueError("MC+ penalty is not differentiable at 0")
    if abs(t) <= pen.gamma * pen.lam:
        return pen.lam * math.copysign(1.0, t) - t / pen.gamma
    return 0.0


def _threshold(z, lam, gamma):
    a = abs(z)
    if a <= lam:
        return 0.0
    if a <= gamma * lam:
        return math.copysign((a - lam) / (1.0 - 1.0 / gamma), z)
    return z


_threshold_jit = njit(cache=True)(_threshold)


def cd_update(z, pen):
    """Minimizer of ``0.5 (b - z)^2 + J(b)``.

    Zero for ``|z| <= lam``, the identity beyond ``gamma * lam`` and a
    linear interpolation (slope ``gamma / (gamma - 1)``) in between.
    """
    return _threshold(float(z), pen.lam, pen.gamma)


def soft_threshold(z, lam):
    return math.copysign(max(abs(z) - lam, 0.0), z)


def hard_threshold(z, lam):
    return z if abs(z) > lam else 0.0
