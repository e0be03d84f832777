"""Training procedures with integer (frequency) row weights.

A weight-w row is exactly equivalent to w duplicated rows for every learner
here. Penalized learners use the glmnet scaling of the loss,
(1 / 2W) * sum w_i (residual_i)^2 + lam * |beta|_1 with W the total weight,
and standardize predictors (weighted mean and SD) unless told not to.

Besides the per-view ``fit`` every learner has ``fit_batch`` which fits K
weight vectors over the same rows at once and returns a (K, p + 1) array,
with a NaN row wherever the fit failed. The OLS, logistic and linear ITR
learners vectorize this; the penalized ones loop.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np
from scipy.special import expit

from . import _cd
from .errors import (
    MissingTreatment,
    OneClassFold,
    Separation,
    SingularDesign,
    FoldError,
)
from .resampling import WeightedView

KINDS = ("ols", "lasso", "logistic", "lasso_logistic", "itr_linear", "itr_lasso")
RIDGE_JITTER = 1e-8
# Newton step size (relative to the iterate) below which IRLS may stop
STEP_TOL = 1e-4


@dataclass(frozen=True)
class LearnerSpec:
    kind: str = "ols"
    lam: float = 0.0
    lambda_gamma: Optional[float] = None
    pi: Optional[float] = None
    max_iter: int = 100
    tol: float = 1e-8
    standardize: bool = True
    separation_cap: float = 30.0
    on_separation: str = "keep"
    max_sweeps: int = 100_000

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown learner kind {self.kind!r}; expected one of {KINDS}")
        if self.lam < 0 or (self.lambda_gamma is not None and self.lambda_gamma < 0):
            raise ValueError("penalties must be nonnegative")
        if self.pi is not None and not 0 < self.pi < 1:
            raise ValueError("pi must lie in (0, 1)")
        if self.tol <= 0:
            raise ValueError("tol must be positive")
        if self.on_separation not in ("keep", "raise"):
            raise ValueError("on_separation must be 'keep' or 'raise'")


@dataclass(frozen=True, eq=False)
class FittedModel:
    """Coefficients (intercept first). For ITR kinds ``coef`` is the score block."""

    coef: np.ndarray
    kind: str
    n_iter: int = 0
    converged: bool = True
    meta: dict = field(default_factory=dict)

    def score(self, features: np.ndarray) -> np.ndarray:
        features = np.atleast_2d(features)
        return self.coef[0] + features @ self.coef[1:]


def _design(x: np.ndarray) -> np.ndarray:
    return np.column_stack([np.ones(x.shape[0]), x])


def _solve_spd(gram: np.ndarray, rhs: np.ndarray) -> np.ndarray:
    try:
        chol = np.linalg.cholesky(gram)
    except np.linalg.LinAlgError:
        try:
            chol = np.linalg.cholesky(gram + RIDGE_JITTER * np.eye(gram.shape[0]))
        except np.linalg.LinAlgError:
            raise SingularDesign("weighted Gram matrix is singular even after ridge jitter")
    coef = np.linalg.solve(chol.T, np.linalg.solve(chol, rhs))
    if not np.all(np.isfinite(coef)):
        raise SingularDesign("non-finite coefficients from the weighted normal equations")
    return coef


def _solve_spd_batch(gram: np.ndarray, rhs: np.ndarray) -> np.ndarray:
    """Solve K systems; rows that stay singular come back as NaN."""
    try:
        np.linalg.cholesky(gram)
        out = np.linalg.solve(gram, rhs[..., None])[..., 0]
    except np.linalg.LinAlgError:
        out = np.empty_like(rhs)
        for k in range(gram.shape[0]):
            try:
                out[k] = _solve_spd(gram[k], rhs[k])
            except SingularDesign:
                out[k] = np.nan
    return out


# ---------------------------------------------------------------------------
# least squares


def ols_coef(x: np.ndarray, y: np.ndarray, w: np.ndarray) -> np.ndarray:
    """Minimizer of sum_i w_i (y_i - beta' z~_i)^2."""
    xd = _design(x)
    return _solve_spd(xd.T @ (w[:, None] * xd), xd.T @ (w * y))


def _ols_batch(x, y, weights):
    xd = _design(x)
    gram = (xd.T[None] * weights[:, None, :]) @ xd
    return _solve_spd_batch(gram, (weights * y) @ xd)


def _itr_columns(x: np.ndarray, g: np.ndarray, pi: float) -> np.ndarray:
    xd = _design(x)
    return np.column_stack([xd, (g - pi)[:, None] * xd])


def _resolve_pi(spec: LearnerSpec, g: np.ndarray, w: np.ndarray) -> float:
    if spec.pi is not None:
        return spec.pi
    return float(w @ g / w.sum())


def _check_arms(g, w):
    if g is None:
        raise MissingTreatment("ITR learners need a treatment column")
    treated = float(w @ g)
    if treated <= 0 or treated >= w.sum():
        raise SingularDesign("one treatment arm has zero weight; interaction block is collinear")


def itr_coef(x, y, g, w, pi):
    """Joint least squares over (gamma, beta); returns (beta, gamma)."""
    cols = _itr_columns(x, g, pi)
    coef = _solve_spd(cols.T @ (w[:, None] * cols), cols.T @ (w * y))
    d = x.shape[1] + 1
    return coef[d:], coef[:d]


def _itr_batch(x, y, g, weights, pi_fixed):
    k, n = weights.shape
    d = x.shape[1] + 1
    xd = _design(x)
    tot = weights.sum(axis=1)
    treated = weights @ g
    ok = (treated > 0) & (treated < tot)
    pi = np.full(k, pi_fixed) if pi_fixed is not None else treated / np.where(tot > 0, tot, 1)
    h = g[None, :] - pi[:, None]
    cols = np.concatenate([np.broadcast_to(xd, (k, n, d)), h[:, :, None] * xd[None]], axis=2)
    wc = cols.transpose(0, 2, 1) * weights[:, None, :]
    gram = wc @ cols
    rhs = wc @ y
    gram[~ok] = np.eye(2 * d)
    coef = _solve_spd_batch(gram, rhs)
    coef[~ok] = np.nan
    return coef[:, d:]


# ---------------------------------------------------------------------------
# logistic regression


def _check_classes(y, w):
    pos = float(w @ y)
    if pos <= 0 or pos >= w.sum():
        raise OneClassFold("training fold has only one outcome class")


def _nll(eta, y, w):
    return np.sum(w * (np.logaddexp(0.0, eta) - y * eta), axis=-1)


def _step_small(step, beta):
    # a vanishing gradient alone also holds far out along a separating direction,
    # where Newton steps stay of order one
    return np.max(np.abs(step), axis=-1) <= STEP_TOL * (1 + np.max(np.abs(beta), axis=-1))


def logistic_coef(x, y, w, tol=1e-8, max_iter=100, cap=30.0, keep_separated=True):
    """Weighted logistic MLE by Newton-Raphson (IRLS) with step halving.

    Returns (coef, iterations, converged). Once the sup-norm of the
    coefficients exceeds ``cap`` the classes are taken as separable: the
    current iterate is returned unconverged, or Separation is raised when
    ``keep_separated`` is false.
    """
    _check_classes(y, w)
    xd = _design(x)
    tot = w.sum()
    beta = np.zeros(xd.shape[1])
    prev = w @ y / tot
    beta[0] = math.log(prev / (1 - prev))
    obj = _nll(xd @ beta, y, w)
    for it in range(1, max_iter + 1):
        mu = expit(xd @ beta)
        grad = xd.T @ (w * (y - mu))
        hess = xd.T @ ((w * mu * (1 - mu))[:, None] * xd)
        step = _solve_spd(hess, grad)
        if np.max(np.abs(grad)) / tot <= tol and _step_small(step, beta):
            return beta, it - 1, True
        t = 1.0
        for _ in range(40):
            cand = beta + t * step
            new_obj = _nll(xd @ cand, y, w)
            if new_obj <= obj + 1e-12 * abs(obj):
                break
            t *= 0.5
        beta, obj = cand, new_obj
        if np.max(np.abs(beta)) > cap:
            if keep_separated:
                return beta, it, False
            raise Separation(
                f"coefficients exceeded {cap:g} in absolute value; classes look separable"
            )
    mu = expit(xd @ beta)
    converged = np.max(np.abs(xd.T @ (w * (y - mu)))) / tot <= tol
    return beta, max_iter, bool(converged)


def _logistic_batch(x, y, weights, tol, max_iter, cap, keep_separated=True):
    xd = _design(x)
    k, d = weights.shape[0], xd.shape[1]
    tot = weights.sum(axis=1)
    prev = weights @ y / np.where(tot > 0, tot, 1)
    valid = (prev > 0) & (prev < 1)
    beta = np.zeros((k, d))
    beta[valid, 0] = np.log(prev[valid] / (1 - prev[valid]))
    obj = _nll(beta @ xd.T, y, weights)
    active = valid.copy()
    failed = ~valid
    for _ in range(max_iter):
        idx = np.flatnonzero(active)
        if idx.size == 0:
            break
        b, wa = beta[idx], weights[idx]
        mu = expit(b @ xd.T)
        grad = (wa * (y - mu)) @ xd
        hess = (xd.T[None] * (wa * mu * (1 - mu))[:, None, :]) @ xd
        step = _solve_spd_batch(hess, grad)
        bad = ~np.all(np.isfinite(step), axis=1)
        done = (np.max(np.abs(grad), axis=1) / tot[idx] <= tol) & ~bad & _step_small(step, b)
        active[idx[done]] = False
        keep = ~done
        idx, b, wa, grad, step, bad = idx[keep], b[keep], wa[keep], grad[keep], step[keep], bad[keep]
        if idx.size == 0:
            break
        step[bad] = 0.0
        t = np.ones(idx.size)
        cand = b + step
        new_obj = _nll(cand @ xd.T, y, wa)
        for _ in range(40):
            worse = new_obj > obj[idx] + 1e-12 * np.abs(obj[idx])
            if not worse.any():
                break
            t[worse] *= 0.5
            cand[worse] = b[worse] + t[worse, None] * step[worse]
            new_obj[worse] = _nll(cand[worse] @ xd.T, y, wa[worse])
        beta[idx], obj[idx] = cand, new_obj
        sep = np.max(np.abs(cand), axis=1) > cap
        fail = idx[bad] if keep_separated else idx[sep | bad]
        failed[fail] = True
        active[idx[sep | bad]] = False
    beta[failed] = np.nan
    return beta


# ---------------------------------------------------------------------------
# penalized least squares and penalized logistic


@dataclass
class _Standardized:
    xs: np.ndarray
    mean: np.ndarray
    scale: np.ndarray
    live: np.ndarray  # columns with positive weighted variance


def _standardize(f, w, standardize):
    tot = w.sum()
    mean = (w @ f) / tot
    fc = f - mean
    sd = np.sqrt((w @ fc**2) / tot)
    live = sd > 1e-12 * np.maximum(1.0, np.abs(mean))
    scale = np.where(live & standardize, sd, 1.0)
    return _Standardized(fc / scale, mean, scale, live)


def penalized_ls(f, y, w, lam_vec, standardize=True, tol=1e-9, max_sweeps=100_000):
    """Coordinate descent for (1/2W) sum w (y - a - f'b)^2 + sum lam_j |b_j|.

    Returns (intercept, slopes, sweeps, kkt_violation). Penalties apply to
    standardized slopes when ``standardize`` is set.
    """
    tot = float(w.sum())
    st = _standardize(f, w, standardize)
    ybar = float(w @ y) / tot
    xsq = np.where(st.live, (w @ st.xs**2) / tot, 0.0)
    beta = np.zeros(f.shape[1])
    r = (y - ybar).astype(float).copy()
    sweeps, viol = _cd.cd_solve(
        np.ascontiguousarray(st.xs.T), w.astype(float), r, beta,
        np.asarray(lam_vec, dtype=float), xsq, 1.0 / tot, tol, max_sweeps,
    )
    slopes = beta / st.scale
    return ybar - st.mean @ slopes, slopes, int(sweeps), float(viol)


def penalized_logistic(f, y, w, lam_vec, standardize=True, tol=1e-7, max_iter=100,
                       max_sweeps=100_000, cap=30.0, keep_separated=True):
    """Penalized logistic likelihood by IRLS with a coordinate-descent inner solve.

    Objective: -(1/W) sum w_i [y_i eta_i - log(1 + e^eta_i)] + sum lam_j |b_j|.
    Returns (intercept, slopes, iterations, converged).
    """
    _check_classes(y, w)
    tot = float(w.sum())
    lam_vec = np.asarray(lam_vec, dtype=float)
    st = _standardize(f, w, standardize)
    xs = st.xs
    prev = float(w @ y) / tot
    a = math.log(prev / (1 - prev))
    beta = np.zeros(f.shape[1])

    def objective(a_, b_):
        return _nll(a_ + xs @ b_, y, w) / tot + lam_vec @ np.abs(b_)

    def kkt(a_, b_):
        res = w * (y - expit(a_ + xs @ b_))
        g = -(res @ xs) / tot
        g = np.where(st.live, g, 0.0)
        v = np.where(b_ != 0, np.abs(g + lam_vec * np.sign(b_)), np.abs(g) - lam_vec)
        return max(float(v.max(initial=0.0)), abs(res.sum()) / tot)

    obj = objective(a, beta)
    for it in range(1, max_iter + 1):
        if kkt(a, beta) <= tol:
            return a - st.mean @ (beta / st.scale), beta / st.scale, it - 1, True
        eta = a + xs @ beta
        mu = expit(eta)
        v = np.clip(mu * (1 - mu), 1e-10, None)
        u = w * v
        z = eta + (y - mu) / v
        usum = u.sum()
        cu = (u @ xs) / usum
        xc = xs - cu
        zbar = (u @ z) / usum
        xsq = np.where(st.live, (u @ xc**2) / tot, 0.0)
        b_new = beta.copy()
        r = (z - zbar) - xc @ b_new
        _cd.cd_solve(np.ascontiguousarray(xc.T), u, r, b_new, lam_vec, xsq, 1.0 / tot,
                     tol * 0.1, max_sweeps)
        a_new = zbar - cu @ b_new
        t = 1.0
        for _ in range(40):
            cand_a, cand_b = a + t * (a_new - a), beta + t * (b_new - beta)
            new_obj = objective(cand_a, cand_b)
            if new_obj <= obj + 1e-12 * abs(obj):
                break
            t *= 0.5
        a, beta, obj = cand_a, cand_b, new_obj
        slopes = beta / st.scale
        if max(abs(a - st.mean @ slopes), np.max(np.abs(slopes), initial=0.0)) > cap:
            if keep_separated:
                return a - st.mean @ slopes, slopes, it, False
            raise Separation(f"coefficients exceeded {cap:g}; classes look separable")
    slopes = beta / st.scale
    return a - st.mean @ slopes, slopes, max_iter, kkt(a, beta) <= tol


# ---------------------------------------------------------------------------
# learner objects


class Learner:
    """Learner plugin contract: ``fit(view) -> model`` and ``predict(model, X)``.

    Subclasses implement ``_fit_arrays``; ``fit_batch`` loops over it unless
    overridden with a vectorized version.
    """

    needs_treatment = False

    def __init__(self, spec: LearnerSpec):
        self.spec = spec

    def __repr__(self):
        return f"{type(self).__name__}({self.spec!r})"

    def fit(self, view: WeightedView) -> FittedModel:
        g = view.treatment
        if self.needs_treatment and g is None:
            raise MissingTreatment("ITR learners need a treatment column")
        return self._fit_arrays(view.features, view.y, np.asarray(view.w, float), g)

    def predict(self, model: FittedModel, features: np.ndarray) -> np.ndarray:
        return model.score(features)

    def fit_batch(self, x, y, g, weights) -> np.ndarray:
        out = np.full((weights.shape[0], x.shape[1] + 1), np.nan)
        for k, w in enumerate(weights):
            keep = w > 0
            try:
                model = self._fit_arrays(x[keep], y[keep], w[keep].astype(float),
                                         None if g is None else g[keep])
            except FoldError:
                continue
            out[k] = model.coef
        return out

    def _fit_arrays(self, x, y, w, g) -> FittedModel:
        raise NotImplementedError


class OLS(Learner):
    def _fit_arrays(self, x, y, w, g):
        return FittedModel(ols_coef(x, y, w), "ols")

    def fit_batch(self, x, y, g, weights):
        return _ols_batch(x, y, weights)


class Lasso(Learner):
    def _fit_arrays(self, x, y, w, g):
        s = self.spec
        a, b, sweeps, viol = penalized_ls(
            x, y, w, np.full(x.shape[1], s.lam), s.standardize, s.tol, s.max_sweeps
        )
        return FittedModel(np.concatenate([[a], b]), "lasso", sweeps, viol <= s.tol,
                           {"kkt": viol})


class Logistic(Learner):
    def _fit_arrays(self, x, y, w, g):
        s = self.spec
        coef, it, conv = logistic_coef(x, y, w, s.tol, s.max_iter, s.separation_cap,
                                       s.on_separation == "keep")
        return FittedModel(coef, "logistic", it, conv)

    def fit_batch(self, x, y, g, weights):
        s = self.spec
        return _logistic_batch(x, y, weights, s.tol, s.max_iter, s.separation_cap,
                               s.on_separation == "keep")


class LassoLogistic(Learner):
    def _fit_arrays(self, x, y, w, g):
        s = self.spec
        a, b, it, conv = penalized_logistic(
            x, y, w, np.full(x.shape[1], s.lam), s.standardize, s.tol, s.max_iter,
            s.max_sweeps, s.separation_cap, s.on_separation == "keep",
        )
        return FittedModel(np.concatenate([[a], b]), "lasso_logistic", it, conv)


class ITRLinear(Learner):
    needs_treatment = True

    def _fit_arrays(self, x, y, w, g):
        _check_arms(g, w)
        pi = _resolve_pi(self.spec, g, w)
        beta, gamma = itr_coef(x, y, g, w, pi)
        return FittedModel(beta, "itr_linear", meta={"gamma": gamma, "pi": pi})

    def fit_batch(self, x, y, g, weights):
        if g is None:
            raise MissingTreatment("ITR learners need a treatment column")
        return _itr_batch(x, y, g, weights, self.spec.pi)


class ITRLasso(Learner):
    needs_treatment = True

    def _fit_arrays(self, x, y, w, g):
        _check_arms(g, w)
        s = self.spec
        pi = _resolve_pi(s, g, w)
        p = x.shape[1]
        f = np.column_stack([x, (g - pi)[:, None] * _design(x)])
        lam_gamma = s.lam if s.lambda_gamma is None else s.lambda_gamma
        lam_vec = np.concatenate([np.full(p, lam_gamma), np.full(p + 1, s.lam)])
        a, b, sweeps, viol = penalized_ls(f, y, w, lam_vec, s.standardize, s.tol, s.max_sweeps)
        gamma = np.concatenate([[a], b[:p]])
        return FittedModel(b[p:], "itr_lasso", sweeps, viol <= s.tol,
                           {"gamma": gamma, "pi": pi, "kkt": viol})


_REGISTRY: dict[str, type] = {
    "ols": OLS,
    "lasso": Lasso,
    "logistic": Logistic,
    "lasso_logistic": LassoLogistic,
    "itr_linear": ITRLinear,
    "itr_lasso": ITRLasso,
}


def make_learner(spec: LearnerSpec | str, **kwargs) -> Learner:
    if isinstance(spec, str):
        spec = LearnerSpec(kind=spec, **kwargs)
    elif kwargs:
        spec = replace(spec, **kwargs)
    return _REGISTRY[spec.kind](spec)


def fit_ols(train: WeightedView, spec: LearnerSpec = LearnerSpec("ols")) -> FittedModel:
    return OLS(spec).fit(train)


def fit_lasso(train: WeightedView, spec: LearnerSpec) -> FittedModel:
    return Lasso(spec).fit(train)


def fit_logistic(train: WeightedView, spec: LearnerSpec = LearnerSpec("logistic")) -> FittedModel:
    return Logistic(spec).fit(train)


def fit_lasso_logistic(train: WeightedView, spec: LearnerSpec) -> FittedModel:
    return LassoLogistic(spec).fit(train)


def fit_itr(train: WeightedView, spec: LearnerSpec = LearnerSpec("itr_linear")) -> FittedModel:
    cls = ITRLasso if spec.kind == "itr_lasso" else ITRLinear
    return cls(spec).fit(train)
