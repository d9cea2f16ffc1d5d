"""Regularized matrix factorization with escape steps.

Loss minimized everywhere in this module::

    L(P, Q) = sum_{(u,i) in T} (r_ui - p_u . q_i)^2
              + lam * (sum_u |p_u|^2 + eta * sum_i |q_i|^2),   eta = n / m

Baseline AO is classic ALS (all users, then all items). Two escape
searches are provided: rescaling the opposite factor while re-solving one
factor (:func:`scaling_escape`), and a restricted joint search along one
direction per sampled user/item (:func:`joint_escape`), with directions
drawn at random or built greedily from the closed-form optimal step.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .core import (EscapeConfig, Objective, QuasiNewtonConfig, escape_loop,
                   quasi_newton_minimize)

logger = logging.getLogger(__name__)

METHODS = ("baseline", "scaling", "random", "greedy")


class RankDeficiencyError(np.linalg.LinAlgError):
    """Unregularized ALS subproblem has a singular normal matrix."""


@dataclass(frozen=True)
class RatingSet:
    """Observed ratings as parallel index/value arrays.

    ``user_ids``/``item_ids`` optionally map dense indices back to the
    identifiers found in a ratings file.
    """

    users: np.ndarray
    items: np.ndarray
    ratings: np.ndarray
    n: int
    m: int
    user_ids: Optional[tuple] = None
    item_ids: Optional[tuple] = None
    by_user: tuple = field(init=False, repr=False, compare=False)
    by_item: tuple = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        users = np.asarray(self.users, dtype=np.int64).ravel()
        items = np.asarray(self.items, dtype=np.int64).ravel()
        ratings = np.asarray(self.ratings, dtype=np.float64).ravel()
        if not (users.size == items.size == ratings.size):
            raise ValueError("users, items and ratings must have equal length")
        if users.size:
            if users.min() < 0 or users.max() >= self.n:
                raise ValueError("user index out of range")
            if items.min() < 0 or items.max() >= self.m:
                raise ValueError("item index out of range")
            keys = users * self.m + items
            if np.unique(keys).size != keys.size:
                raise ValueError("duplicate (user, item) pair")
        if not np.all(np.isfinite(ratings)):
            raise ValueError("ratings must be finite")
        for name, arr in (("users", users), ("items", items), ("ratings", ratings)):
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)
        object.__setattr__(self, "by_user", _group(users, self.n))
        object.__setattr__(self, "by_item", _group(items, self.m))

    def __len__(self):
        return int(self.ratings.size)

    @classmethod
    def from_triples(cls, triples, n=None, m=None):
        arr = list(triples)
        users = np.array([t[0] for t in arr], dtype=np.int64)
        items = np.array([t[1] for t in arr], dtype=np.int64)
        ratings = np.array([t[2] for t in arr], dtype=float)
        if n is None:
            n = int(users.max()) + 1 if users.size else 0
        if m is None:
            m = int(items.max()) + 1 if items.size else 0
        return cls(users, items, ratings, n, m)

    def triples(self):
        return list(zip(self.users.tolist(), self.items.tolist(), self.ratings.tolist()))

    def subset(self, mask):
        """Ratings selected by ``mask``, keeping the index space."""
        return RatingSet(self.users[mask], self.items[mask], self.ratings[mask],
                         self.n, self.m, self.user_ids, self.item_ids)

    def transpose(self):
        return RatingSet(self.items, self.users, self.ratings, self.m, self.n,
                         self.item_ids, self.user_ids)

    def rating_range(self):
        return float(self.ratings.min()), float(self.ratings.max())


def _group(idx, size):
    order = np.argsort(idx, kind="stable")
    bounds = np.searchsorted(idx[order], np.arange(size + 1))
    return tuple(order[bounds[k]:bounds[k + 1]] for k in range(size))


@dataclass
class FactorModel:
    P: np.ndarray
    Q: np.ndarray
    lam: float
    eta: float = field(init=False)

    def __post_init__(self):
        self.P = np.array(self.P, dtype=float, ndmin=2)
        self.Q = np.array(self.Q, dtype=float, ndmin=2)
        if self.P.shape[1] != self.Q.shape[1]:
            raise ValueError("P and Q must have the same rank K")
        if self.lam < 0:
            raise ValueError("lam must be nonnegative")
        if not (np.all(np.isfinite(self.P)) and np.all(np.isfinite(self.Q))):
            raise ValueError("factor entries must be finite")
        self.eta = self.P.shape[0] / self.Q.shape[0]

    @property
    def n(self):
        return self.P.shape[0]

    @property
    def m(self):
        return self.Q.shape[0]

    @property
    def K(self):
        return self.P.shape[1]

    @classmethod
    def random(cls, n, m, K, lam, rng, scale=0.1):
        rng = np.random.default_rng(rng)
        return cls(rng.normal(0.0, scale, (n, K)), rng.normal(0.0, scale, (m, K)), lam)

    def copy(self):
        return FactorModel(self.P.copy(), self.Q.copy(), self.lam)

    def with_factors(self, P, Q):
        return FactorModel(P, Q, self.lam)

    def predict(self, users, items):
        return np.einsum("ij,ij->i", self.P[users], self.Q[items])


CHECKPOINT_MAGIC = "aoescape-factor-model v1"


def save_model(model, path):
    """Text dump: a header line with n, m, K, lam, eta, then the rows of P
    followed by the rows of Q. Values are written with ``repr`` so they
    read back bit for bit."""
    lines = [CHECKPOINT_MAGIC,
             f"n={model.n} m={model.m} K={model.K} lam={model.lam!r} eta={model.eta!r}"]
    for row in np.vstack([model.P, model.Q]):
        lines.append(" ".join(repr(float(v)) for v in row))
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")


def load_model(path):
    with open(path, encoding="utf-8") as fh:
        lines = fh.read().splitlines()
    if len(lines) < 2 or lines[0] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: not a factor-model checkpoint")
    try:
        head = dict(item.split("=", 1) for item in lines[1].split())
        n, m, K = int(head["n"]), int(head["m"]), int(head["K"])
        lam = float(head["lam"])
        rows = np.array([[float(v) for v in line.split()] for line in lines[2:]], dtype=float)
    except (KeyError, ValueError) as exc:
        raise ValueError(f"{path}: malformed checkpoint ({exc})") from None
    if rows.shape != (n + m, K):
        raise ValueError(f"{path}: expected {n + m} rows of {K} values")
    return FactorModel(rows[:n], rows[n:], lam)


def _check_dims(model, data):
    if model.n != data.n or model.m != data.m:
        raise ValueError(
            f"model is {model.n}x{model.m} but data is {data.n}x{data.m}")


def mf_loss(model, data):
    _check_dims(model, data)
    resid = data.ratings - model.predict(data.users, data.items)
    return float(resid @ resid + model.lam * (
        np.sum(model.P**2) + model.eta * np.sum(model.Q**2)))


# -- ALS -------------------------------------------------------------------

def _ridge_row(other, r, pen):
    K = other.shape[1]
    A = other.T @ other + pen * np.eye(K)
    b = other.T @ r
    if pen == 0 and np.linalg.matrix_rank(A) < K:
        raise RankDeficiencyError("Gram matrix is singular and lam = 0")
    return np.linalg.solve(A, b)


def als_update_user(u, model, data):
    rows = data.by_user[u]
    return _ridge_row(model.Q[data.items[rows]], data.ratings[rows], model.lam)


def als_update_item(i, model, data):
    rows = data.by_item[i]
    return _ridge_row(model.P[data.users[rows]], data.ratings[rows],
                      model.lam * model.eta)


def _batched_ridge(rows_idx, cols_idx, ratings, other, size, pen):
    K = other.shape[1]
    V = other[cols_idx]
    G = np.zeros((size, K, K))
    np.add.at(G, rows_idx, V[:, :, None] * V[:, None, :])
    b = np.zeros((size, K))
    np.add.at(b, rows_idx, V * ratings[:, None])
    G += pen * np.eye(K)
    if pen == 0 and np.any(np.linalg.matrix_rank(G) < K):
        raise RankDeficiencyError("Gram matrix is singular and lam = 0")
    return np.linalg.solve(G, b[:, :, None])[:, :, 0]


def als_sweep(model, data):
    """One pass over all users, then all items. Returns a new model."""
    P = _batched_ridge(data.users, data.items, data.ratings, model.Q,
                       model.n, model.lam)
    Q = _batched_ridge(data.items, data.users, data.ratings, P,
                       model.m, model.lam * model.eta)
    return model.with_factors(P, Q)


def run_ao(model, data, tol=1e-8, max_sweeps=500, trace=None):
    """ALS sweeps until the relative loss change falls below ``tol``.

    If ``trace`` is a list, the loss after every sweep is appended to it.
    Returns ``(model, n_sweeps)``.
    """
    if not tol > 0:
        raise ValueError("tol must be positive")
    _check_dims(model, data)
    loss = mf_loss(model, data)
    sweeps = 0
    for sweeps in range(1, max_sweeps + 1):
        model = als_sweep(model, data)
        new = mf_loss(model, data)
        if trace is not None:
            trace.append(new)
        done = abs(loss - new) <= tol * max(abs(loss), 1e-300)
        loss = new
        if done:
            break
    return model, sweeps


# -- scaling escape --------------------------------------------------------

def _scaled_problem(free, fixed, rows_free, rows_fixed, r, pen_free, pen_fixed):
    """Loss of (free, v) with the fixed factor multiplied by v.

    Parameters are packed as ``[free.ravel(), v]``.
    """
    shape = free.shape
    fixed_sq = float(np.sum(fixed**2))
    Fx = fixed[rows_fixed]

    def unpack(z):
        return z[:-1].reshape(shape), z[-1]

    def fun(z):
        F, v = unpack(z)
        e = r - v * np.einsum("ij,ij->i", F[rows_free], Fx)
        return float(e @ e + pen_free * np.sum(F**2) + pen_fixed * v * v * fixed_sq)

    def grad(z):
        F, v = unpack(z)
        dots = np.einsum("ij,ij->i", F[rows_free], Fx)
        e = r - v * dots
        gF = np.zeros_like(F)
        np.add.at(gF, rows_free, (-2.0 * v * e)[:, None] * Fx)
        gF += 2.0 * pen_free * F
        gv = -2.0 * float(e @ dots) + 2.0 * pen_fixed * v * fixed_sq
        return np.concatenate([gF.ravel(), [gv]])

    return Objective(fun, grad)


def scaling_objective_users(model, data):
    """Objective in ``(P, v)`` with ``Q`` replaced by ``v Q``."""
    return _scaled_problem(model.P, model.Q, data.users, data.items, data.ratings,
                           model.lam, model.lam * model.eta)


def scaling_objective_items(model, data):
    """Objective in ``(Q, u)`` with ``P`` replaced by ``u P``."""
    return _scaled_problem(model.Q, model.P, data.items, data.users, data.ratings,
                           model.lam * model.eta, model.lam)


def scaling_escape(model, data, qn=None):
    """One (P, v) solve followed by one (Q, u) solve.

    Returns ``(model, (v, u))``. A block keeps scale 1 and is skipped when
    the factor it rescales is all zero, or when its own factor is all zero
    and ``lam == 0`` (the scale is then undetermined).
    """
    qn = qn or QuasiNewtonConfig(grad_tol=1e-8, max_iter=200)
    _check_dims(model, data)
    before = mf_loss(model, data)
    P, Q = model.P.copy(), model.Q.copy()
    v = u = 1.0

    flat = model.lam == 0
    if np.any(Q) and not (flat and not np.any(P)):
        obj = scaling_objective_users(model.with_factors(P, Q), data)
        res = quasi_newton_minimize(obj, np.concatenate([P.ravel(), [1.0]]), qn)
        P, v = res.x[:-1].reshape(P.shape), float(res.x[-1])
        Q = v * Q
    if np.any(P) and not (flat and not np.any(Q)):
        obj = scaling_objective_items(model.with_factors(P, Q), data)
        res = quasi_newton_minimize(obj, np.concatenate([Q.ravel(), [1.0]]), qn)
        Q, u = res.x[:-1].reshape(Q.shape), float(res.x[-1])
        P = u * P

    out = model.with_factors(P, Q)
    if mf_loss(out, data) > before:
        return model.copy(), (1.0, 1.0)
    return out, (v, u)


# -- restricted joint search -----------------------------------------------

@dataclass(frozen=True)
class DirectionSet:
    users: np.ndarray
    items: np.ndarray
    w_p: np.ndarray  # (len(users), K)
    w_q: np.ndarray  # (len(items), K)
    provenance: str = "random"

    @classmethod
    def empty(cls, K):
        z = np.zeros(0, dtype=np.int64)
        return cls(z, z, np.zeros((0, K)), np.zeros((0, K)))


def sample_participants(n, m, s, rng=None):
    """Each user kept with probability min(s/n, 1), each item min(s/m, 1)."""
    if s < 0:
        raise ValueError("s must be nonnegative")
    rng = np.random.default_rng(rng)
    pu = min(s / n, 1.0) if n else 0.0
    pi = min(s / m, 1.0) if m else 0.0
    users = np.flatnonzero(rng.random(n) < pu)
    items = np.flatnonzero(rng.random(m) < pi)
    return users, items


def random_directions(users, items, K, rng=None):
    rng = np.random.default_rng(rng)
    users = np.asarray(users, dtype=np.int64)
    items = np.asarray(items, dtype=np.int64)
    w_p = rng.standard_normal((users.size, K))
    w_q = rng.standard_normal((items.size, K))
    return DirectionSet(users, items, w_p, w_q, "random")


def _row_terms(x, others, r, pen):
    """Gradient pieces for a single-row step ``x + alpha w``.

    Returns ``g`` and ``A`` such that the optimal step is
    ``alpha(w) = w.g / w'Aw`` and the loss drop is ``(w.g)^2 / w'Aw``.
    """
    e = r - others @ x
    g = others.T @ e - pen * x
    A = others.T @ others + pen * np.eye(x.size)
    return g, A


def _user_terms(u, model, data):
    rows = data.by_user[u]
    return _row_terms(model.P[u], model.Q[data.items[rows]], data.ratings[rows],
                      model.lam)


def _item_terms(i, model, data):
    rows = data.by_item[i]
    return _row_terms(model.Q[i], model.P[data.users[rows]], data.ratings[rows],
                      model.lam * model.eta)


def _alpha(w, g, A):
    den = float(w @ A @ w)
    if den == 0.0:
        return 0.0
    return float(w @ g) / den


def alpha_hat(w, u, model, data):
    """Optimal step for ``p_u + alpha w`` with everything else fixed."""
    w = np.asarray(w, dtype=float)
    if not np.any(w):
        return 0.0
    return _alpha(w, *_user_terms(u, model, data))


def alpha_hat_item(w, i, model, data):
    w = np.asarray(w, dtype=float)
    if not np.any(w):
        return 0.0
    return _alpha(w, *_item_terms(i, model, data))


def row_step_loss(alpha, w, x, others, r, pen):
    """Per-row loss after the step: residuals over the row's ratings plus
    its own ridge term. Terms independent of alpha are left out."""
    z = x + alpha * np.asarray(w, dtype=float)
    e = r - others @ z
    return float(e @ e + pen * z @ z)


def greedy_objective(g, A, base):
    """``w -> L(alpha_hat(w))`` for one row, with gradient.

    ``base`` is the row loss at alpha = 0. Zero-homogeneous in ``w``.
    """
    def fun(w):
        den = float(w @ A @ w)
        if den <= 0:
            return base
        num = float(w @ g)
        return base - num * num / den

    def grad(w):
        den = float(w @ A @ w)
        if den <= 0:
            return np.zeros_like(w)
        a = float(w @ g) / den
        return -2.0 * a * (g - a * (A @ w))

    return Objective(fun, grad)


def _unit(w):
    nrm = np.linalg.norm(w)
    return w / nrm if nrm > 0 else w


def _greedy_row(x, others, r, pen, qn):
    K = x.size
    g, A = _row_terms(x, others, r, pen)
    if not np.any(g):
        w = np.zeros(K)
        w[0] = 1.0
        return w
    base = row_step_loss(0.0, np.zeros(K), x, others, r, pen)
    obj = greedy_objective(g, A, base)
    # negative gradient of the row loss at alpha = 0 is 2g
    w0 = _unit(g)
    res = quasi_newton_minimize(obj, w0, qn, retract=_unit)
    w = _unit(res.x)
    # stalled or worse than the start: fall back to the gradient direction
    if obj(w) > obj(w0):
        return w0
    return w


_GREEDY_QN = QuasiNewtonConfig(grad_tol=1e-10, max_iter=100)


def greedy_direction_user(u, model, data, qn=None):
    rows = data.by_user[u]
    return _greedy_row(model.P[u], model.Q[data.items[rows]], data.ratings[rows],
                       model.lam, qn or _GREEDY_QN)


def greedy_direction_item(i, model, data, qn=None):
    rows = data.by_item[i]
    return _greedy_row(model.Q[i], model.P[data.users[rows]], data.ratings[rows],
                       model.lam * model.eta, qn or _GREEDY_QN)


def greedy_directions(users, items, model, data, qn=None):
    users = np.asarray(users, dtype=np.int64)
    items = np.asarray(items, dtype=np.int64)
    K = model.K
    w_p = np.array([greedy_direction_user(u, model, data, qn) for u in users]).reshape(-1, K)
    w_q = np.array([greedy_direction_item(i, model, data, qn) for i in items]).reshape(-1, K)
    return DirectionSet(users, items, w_p, w_q, "greedy")


def joint_objective(model, data, dirs):
    """Loss in the step sizes ``(alpha, beta)`` of the chosen rows.

    Only ratings touching a chosen user or item enter, so the value equals
    ``mf_loss`` of the stepped model minus a constant.
    """
    nu, ni = dirs.users.size, dirs.items.size
    upos = np.full(model.n, -1)
    upos[dirs.users] = np.arange(nu)
    ipos = np.full(model.m, -1)
    ipos[dirs.items] = np.arange(ni)
    touch = (upos[data.users] >= 0) | (ipos[data.items] >= 0)
    tu, ti, r = data.users[touch], data.items[touch], data.ratings[touch]
    pu, pi = upos[tu], ipos[ti]
    has_u, has_i = pu >= 0, pi >= 0
    Pt, Qt = model.P[tu], model.Q[ti]
    Wp = np.zeros_like(Pt)
    Wp[has_u] = dirs.w_p[pu[has_u]]
    Wq = np.zeros_like(Qt)
    Wq[has_i] = dirs.w_q[pi[has_i]]
    lam, lam_q = model.lam, model.lam * model.eta
    P0, Q0 = model.P[dirs.users], model.Q[dirs.items]

    def _stepped(z):
        a_t = np.where(has_u, z[:nu][np.maximum(pu, 0)], 0.0) if nu else np.zeros(tu.size)
        b_t = np.where(has_i, z[nu:][np.maximum(pi, 0)], 0.0) if ni else np.zeros(tu.size)
        Pn = Pt + a_t[:, None] * Wp
        Qn = Qt + b_t[:, None] * Wq
        return Pn, Qn

    def fun(z):
        Pn, Qn = _stepped(z)
        e = r - np.einsum("ij,ij->i", Pn, Qn)
        Pc = P0 + z[:nu, None] * dirs.w_p
        Qc = Q0 + z[nu:, None] * dirs.w_q
        return float(e @ e + lam * np.sum(Pc**2) + lam_q * np.sum(Qc**2))

    def grad(z):
        Pn, Qn = _stepped(z)
        e = r - np.einsum("ij,ij->i", Pn, Qn)
        ga = np.zeros(nu)
        gb = np.zeros(ni)
        np.add.at(ga, pu[has_u], -2.0 * e[has_u] * np.einsum("ij,ij->i", Wp[has_u], Qn[has_u]))
        np.add.at(gb, pi[has_i], -2.0 * e[has_i] * np.einsum("ij,ij->i", Wq[has_i], Pn[has_i]))
        Pc = P0 + z[:nu, None] * dirs.w_p
        Qc = Q0 + z[nu:, None] * dirs.w_q
        ga += 2.0 * lam * np.einsum("ij,ij->i", dirs.w_p, Pc)
        gb += 2.0 * lam_q * np.einsum("ij,ij->i", dirs.w_q, Qc)
        return np.concatenate([ga, gb])

    return Objective(fun, grad)


def joint_escape(model, data, dirs, qn=None):
    """Minimize over one step size per chosen user/item, starting at 0.

    Returns ``(model, steps)`` where ``steps`` is the concatenated
    ``(alpha, beta)`` vector.
    """
    _check_dims(model, data)
    nu, ni = dirs.users.size, dirs.items.size
    if nu + ni == 0:
        return model.copy(), np.zeros(0)
    qn = qn or QuasiNewtonConfig(grad_tol=1e-9, max_iter=200)
    obj = joint_objective(model, data, dirs)
    res = quasi_newton_minimize(obj, np.zeros(nu + ni), qn)
    z = res.x
    P, Q = model.P.copy(), model.Q.copy()
    P[dirs.users] += z[:nu, None] * dirs.w_p
    Q[dirs.items] += z[nu:, None] * dirs.w_q
    out = model.with_factors(P, Q)
    if mf_loss(out, data) > mf_loss(model, data):
        return model.copy(), np.zeros(nu + ni)
    return out, z


# -- evaluation ------------------------------------------------------------

def mae(model, testset, clip=None):
    """Mean absolute error; predictions clamped to ``clip=(lo, hi)``."""
    if len(testset) == 0:
        raise ValueError("empty test set")
    _check_dims(model, testset)
    pred = model.predict(testset.users, testset.items)
    if clip is not None:
        pred = np.clip(pred, clip[0], clip[1])
    return float(np.mean(np.abs(pred - testset.ratings)))


# -- full fits ---------------------------------------------------------------

@dataclass(frozen=True)
class FitConfig:
    method: str = "baseline"
    s: int = 50
    ao_tol: float = 1e-8
    max_sweeps: int = 500
    escape_tol: float = 1e-6
    max_escape_iters: int = 30
    max_rounds: int = 20
    epsilon: Optional[float] = None
    init_scale: float = 0.1

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"unknown method {self.method!r}; choose from {METHODS}")
        if self.s < 0:
            raise ValueError("s must be nonnegative")


@dataclass
class FitResult:
    model: FactorModel
    train_loss: float
    trace: list  # dicts: step, phase, ao_sweeps, escape_iters, train_loss, test_mae
    report: Optional[object] = None


def fit(train, K, lam, cfg=None, seed=0, test=None, clip=None):
    """Fit one model with the configured method from a seeded random start.

    The trace has one entry per ALS sweep and per escape iteration; for
    the joint-search methods an escape iteration is one restricted joint
    search over a fresh sample of users and items.
    """
    cfg = cfg or FitConfig()
    rng = np.random.default_rng(seed)
    model = FactorModel.random(train.n, train.m, K, lam, rng, cfg.init_scale)
    if clip is None and len(train):
        clip = train.rating_range()
    trace = []
    counts = {"ao": 0, "esc": 0}

    def record(phase, mdl, loss=None):
        trace.append({
            "step": len(trace),
            "phase": phase,
            "ao_sweeps": counts["ao"],
            "escape_iters": counts["esc"],
            "train_loss": mf_loss(mdl, train) if loss is None else loss,
            "test_mae": mae(mdl, test, clip) if test is not None and len(test) else None,
        })

    record("init", model)

    def ao_step(mdl):
        losses = []
        out, n = run_ao(mdl, train, cfg.ao_tol, cfg.max_sweeps, trace=losses)
        counts["ao"] += n
        record("ao", out, losses[-1] if losses else None)
        return out, n

    def escape_step(mdl):
        if cfg.method == "scaling":
            out, _ = scaling_escape(mdl, train)
            counts["esc"] += 1
            record("escape", out)
            return out, 1
        loss = mf_loss(mdl, train)
        it = 0
        for it in range(1, cfg.max_escape_iters + 1):
            users, items = sample_participants(train.n, train.m, cfg.s, rng)
            if cfg.method == "random":
                dirs = random_directions(users, items, K, rng)
            else:
                dirs = greedy_directions(users, items, mdl, train)
            mdl, _ = joint_escape(mdl, train, dirs)
            new = mf_loss(mdl, train)
            counts["esc"] += 1
            record("escape", mdl, new)
            done = loss - new <= cfg.escape_tol * max(abs(loss), 1e-300)
            loss = new
            if done:
                break
        return mdl, it

    if cfg.method == "baseline":
        model, _ = ao_step(model)
        return FitResult(model, mf_loss(model, train), trace)

    ecfg = EscapeConfig(epsilon=cfg.epsilon, max_rounds=cfg.max_rounds,
                        ao_tol=cfg.ao_tol, escape_tol=cfg.escape_tol)
    obj = _ModelLoss(train)
    model, report = escape_loop(obj, ao_step, escape_step, model, ecfg)
    return FitResult(model, mf_loss(model, train), trace, report)


class _ModelLoss:
    def __init__(self, data):
        self.data = data

    def __call__(self, model):
        return mf_loss(model, self.data)


def rounds_to_within(trace, rel=0.01):
    """Escape iterations needed before the training loss first comes within
    ``rel`` of its final value."""
    final = trace[-1]["train_loss"]
    target = final + rel * abs(final)
    for row in trace:
        if row["train_loss"] <= target:
            return row["escape_iters"]
    return trace[-1]["escape_iters"]


def kfold_masks(size, folds, rng):
    rng = np.random.default_rng(rng)
    perm = rng.permutation(size)
    fold_of = np.empty(size, dtype=np.int64)
    fold_of[perm] = np.arange(size) % folds
    return [fold_of == f for f in range(folds)]


def cross_validate_lambda(lambda_grid, K, data, method="baseline", folds=5, seed=0,
                          cfg=None):
    """Pick lambda by k-fold held-out MAE; ties go to the larger lambda.

    Returns ``(best_lambda, table)`` with ``table`` mapping each lambda to
    its mean held-out MAE.
    """
    grid = [float(v) for v in lambda_grid]
    if not grid:
        raise ValueError("lambda grid must be nonempty")
    if folds < 2:
        raise ValueError("need at least two folds")
    base = cfg or FitConfig()
    cfg = FitConfig(**{**base.__dict__, "method": method})
    masks = kfold_masks(len(data), folds, seed)
    clip = data.rating_range()
    table = {}
    for lam in grid:
        errs = []
        for f, mask in enumerate(masks):
            tr, va = data.subset(~mask), data.subset(mask)
            res = fit(tr, K, lam, cfg, seed=(seed, f), clip=clip)
            errs.append(mae(res.model, va, clip))
        table[lam] = float(np.mean(errs))
    best = min(table.values())
    lam_star = max(l for l, v in table.items() if v == best)
    return lam_star, table
