import numpy as np
import pytest
from hypothesis import assume, given
from hypothesis import strategies as st
from scipy.optimize import minimize

from cvboot.errors import MissingTreatment, OneClassFold, Separation, SingularDesign
from cvboot.learners import (
    LearnerSpec,
    fit_itr,
    fit_lasso,
    fit_lasso_logistic,
    fit_logistic,
    fit_ols,
    logistic_coef,
    make_learner,
)
from cvboot.resampling import WeightedView
from cvboot.types import Dataset


def view(x, y, w=None, g=None, kind="continuous"):
    x = np.asarray(x, float)
    if x.ndim == 1:
        x = x[:, None]
    d = Dataset(x, y, treatment=g, outcome_kind=kind)
    w = np.ones(d.n) if w is None else np.asarray(w, float)
    return WeightedView(d, np.arange(d.n), w)


def expanded(x, y, w, g=None, kind="continuous"):
    rep = np.repeat(np.arange(len(y)), w)
    return view(np.asarray(x)[rep], np.asarray(y)[rep], None,
                None if g is None else np.asarray(g)[rep], kind)


def problem(seed, n, p, binary=False, treat=False):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(n, p))
    eta = x @ rng.normal(size=p) * 0.5
    y = (rng.random(n) < 1 / (1 + np.exp(-eta))).astype(float) if binary else eta + rng.normal(size=n)
    w = rng.integers(0, 4, size=n)
    w[:3] = np.maximum(w[:3], 1)
    g = None
    if treat:
        g = np.tile([0.0, 1.0], n // 2 + 1)[:n]
        rng.shuffle(g)
    return x, y, w, g


# ---------------------------------------------------------------------------
# ols


def test_ols_two_points():
    m = fit_ols(view([0.0, 1.0], [1.0, 3.0]))
    assert np.allclose(m.coef, [1.0, 2.0])


def test_ols_matches_lstsq(rng):
    x = rng.normal(size=(40, 4))
    y = rng.normal(size=40)
    w = rng.integers(1, 4, 40).astype(float)
    d = np.column_stack([np.ones(40), x]) * np.sqrt(w)[:, None]
    ref = np.linalg.lstsq(d, y * np.sqrt(w), rcond=None)[0]
    assert np.allclose(fit_ols(view(x, y, w)).coef, ref, atol=1e-10)


def test_ols_gradient_matches_finite_difference(rng):
    x = rng.normal(size=(15, 3))
    y = rng.normal(size=15)
    w = rng.integers(1, 3, 15).astype(float)
    coef = fit_ols(view(x, y, w)).coef
    xd = np.column_stack([np.ones(15), x])

    def loss(b):
        return np.sum(w * (y - xd @ b) ** 2)

    h = 1e-6
    fd = np.array([(loss(coef + h * e) - loss(coef - h * e)) / (2 * h) for e in np.eye(4)])
    analytic = -2 * xd.T @ (w * (y - xd @ coef))
    assert np.allclose(fd, analytic, atol=1e-6)
    assert np.allclose(analytic, 0, atol=1e-8)


def test_ols_collinear_design_fits_the_projection():
    x = np.column_stack([np.arange(6.0), np.arange(6.0)])
    y = np.array([0.0, 1.5, 1.0, 3.5, 4.0, 4.5])
    m = fit_ols(view(x, y))
    ref = np.polyval(np.polyfit(np.arange(6.0), y, 1), np.arange(6.0))
    assert np.allclose(m.score(x), ref, atol=1e-6)


# ---------------------------------------------------------------------------
# frequency weights


@pytest.mark.property
@pytest.mark.parametrize("kind", ["ols", "lasso", "itr_linear", "itr_lasso"])
@given(seed=st.integers(0, 10_000))
def test_frequency_weights_least_squares(kind, seed):
    treat = kind.startswith("itr")
    x, y, w, g = problem(seed, 24, 3, treat=treat)
    assume(g is None or 0 < w @ g < w.sum())
    lrn = make_learner(kind, lam=0.05 if "lasso" in kind else 0.0, tol=1e-10)
    a = lrn.fit(view(x, y, w, g))
    b = lrn.fit(expanded(x, y, w, g))
    assert np.allclose(a.coef, b.coef, atol=1e-7)


@pytest.mark.property
@pytest.mark.parametrize("kind", ["logistic", "lasso_logistic"])
@given(seed=st.integers(0, 10_000))
def test_frequency_weights_logistic(kind, seed):
    x, y, w, _ = problem(seed, 40, 2, binary=True)
    assume(0 < w @ y < w.sum())
    lrn = make_learner(kind, lam=0.02 if kind == "lasso_logistic" else 0.0, tol=1e-10)
    a = lrn.fit(view(x, y, w, kind="binary"))
    assume(a.converged)
    b = lrn.fit(expanded(x, y, w, kind="binary"))
    assert np.allclose(a.coef, b.coef, atol=1e-6)


@pytest.mark.parametrize("kind", ["ols", "logistic", "itr_linear", "lasso"])
def test_fit_batch_matches_fit(kind, rng):
    binary = kind == "logistic"
    x, y, _, g = problem(3, 60, 4, binary=binary, treat=kind.startswith("itr"))
    lrn = make_learner(kind, lam=0.05 if kind == "lasso" else 0.0)
    weights = rng.integers(0, 3, size=(6, 60)).astype(float)
    batch = lrn.fit_batch(x, y, g, weights)
    for k in range(6):
        keep = weights[k] > 0
        single = lrn.fit(WeightedView(Dataset(x, y, g), np.flatnonzero(keep), weights[k, keep]))
        assert np.allclose(batch[k], single.coef, atol=1e-6)


# ---------------------------------------------------------------------------
# lasso


def kkt_violation(x, y, w, coef, lam, standardize):
    tot = w.sum()
    mean = w @ x / tot
    sd = np.sqrt(w @ (x - mean) ** 2 / tot) if standardize else np.ones(x.shape[1])
    r = y - coef[0] - x @ coef[1:]
    grad = -(w * r) @ ((x - mean) / sd) / tot
    b = coef[1:] * sd
    v = np.where(b != 0, np.abs(grad + lam * np.sign(b)), np.maximum(np.abs(grad) - lam, 0))
    return max(v.max(), abs(w @ r) / tot)


@pytest.mark.property
@pytest.mark.parametrize("standardize", [True, False])
@given(seed=st.integers(0, 10_000), lam=st.floats(0.001, 0.5))
def test_lasso_kkt(standardize, seed, lam):
    x, y, w, _ = problem(seed, 30, 6)
    tol = 1e-8
    m = fit_lasso(view(x, y, w), LearnerSpec("lasso", lam=lam, tol=tol, standardize=standardize))
    assert m.converged
    assert kkt_violation(x, y, w.astype(float), m.coef, lam, standardize) <= 10 * tol


def test_lasso_zero_penalty_is_ols(rng):
    x, y, w, _ = problem(5, 50, 5)
    a = fit_lasso(view(x, y, w), LearnerSpec("lasso", lam=0.0, tol=1e-12))
    b = fit_ols(view(x, y, w))
    assert np.allclose(a.coef, b.coef, atol=1e-6)


@pytest.mark.property
@pytest.mark.parametrize("standardize", [True, False])
def test_lasso_lambda_max_zeroes_slopes(standardize):
    x, y, w, _ = problem(6, 50, 5)
    w = w.astype(float)
    tot = w.sum()
    xc = x - w @ x / tot
    if standardize:
        xc = xc / np.sqrt(w @ xc**2 / tot)
    lam_max = np.max(np.abs((w * (y - w @ y / tot)) @ xc / tot))
    at = fit_lasso(view(x, y, w), LearnerSpec("lasso", lam=lam_max * (1 + 1e-9), standardize=standardize))
    assert np.all(at.coef[1:] == 0)
    assert at.coef[0] == pytest.approx(w @ y / tot)
    below = fit_lasso(view(x, y, w), LearnerSpec("lasso", lam=0.99 * lam_max, standardize=standardize))
    assert np.any(below.coef[1:] != 0)


def test_lasso_single_standardized_predictor_soft_thresholds(rng):
    z = rng.normal(size=200)
    z = (z - z.mean()) / z.std()
    y = 0.7 * z + rng.normal(size=200)
    ols = fit_ols(view(z, y)).coef[1]
    lasso = fit_lasso(view(z, y), LearnerSpec("lasso", lam=0.2, tol=1e-12)).coef[1]
    assert lasso == pytest.approx(np.sign(ols) * max(abs(ols) - 0.2, 0), abs=1e-9)


# ---------------------------------------------------------------------------
# logistic


def test_logistic_intercept_only():
    y = np.array([0, 1, 1, 1, 0, 1, 0, 1.0])
    m = fit_logistic(view(np.zeros(8), y, kind="binary"))
    assert m.coef[0] == pytest.approx(np.log(5 / 3), abs=1e-8)
    assert m.coef[1] == pytest.approx(0.0, abs=1e-8)


def test_logistic_matches_scipy(rng):
    x, y, w, _ = problem(8, 200, 3, binary=True)
    w = w.astype(float)
    xd = np.column_stack([np.ones(200), x])

    def nll(b):
        eta = xd @ b
        return np.sum(w * (np.logaddexp(0, eta) - y * eta))

    ref = minimize(nll, np.zeros(4), method="BFGS", options={"gtol": 1e-10}).x
    m = fit_logistic(view(x, y, w, kind="binary"))
    assert m.converged
    assert np.allclose(m.coef, ref, atol=1e-5)


def test_logistic_one_class():
    with pytest.raises(OneClassFold):
        fit_logistic(view(np.arange(4.0), np.ones(4), kind="binary"))


def test_logistic_separation_modes():
    x = np.array([-2.0, -1.0, 1.0, 2.0])
    y = np.array([0, 0, 1, 1.0])
    kept = fit_logistic(view(x, y, kind="binary"))
    assert not kept.converged and kept.coef[1] > 0
    with pytest.raises(Separation):
        fit_logistic(view(x, y, kind="binary"), LearnerSpec("logistic", on_separation="raise"))
    with pytest.raises(Separation):
        logistic_coef(x[:, None], y, np.ones(4), keep_separated=False)


def test_lasso_logistic_zero_penalty_matches_logistic():
    x, y, w, _ = problem(9, 150, 3, binary=True)
    a = fit_lasso_logistic(view(x, y, w, kind="binary"), LearnerSpec("lasso_logistic", lam=0.0, tol=1e-10))
    b = fit_logistic(view(x, y, w, kind="binary"))
    assert np.allclose(a.coef, b.coef, atol=1e-5)


def test_lasso_logistic_huge_penalty():
    x, y, w, _ = problem(10, 100, 4, binary=True)
    w = w.astype(float)
    m = fit_lasso_logistic(view(x, y, w, kind="binary"), LearnerSpec("lasso_logistic", lam=100.0))
    prev = w @ y / w.sum()
    assert np.all(m.coef[1:] == 0)
    assert m.coef[0] == pytest.approx(np.log(prev / (1 - prev)), abs=1e-6)


@pytest.mark.property
def test_lasso_logistic_kkt():
    x, y, w, _ = problem(11, 120, 6, binary=True)
    w = w.astype(float)
    lam, tol = 0.03, 1e-8
    m = fit_lasso_logistic(view(x, y, w, kind="binary"), LearnerSpec("lasso_logistic", lam=lam, tol=tol))
    assert m.converged
    tot = w.sum()
    mean = w @ x / tot
    sd = np.sqrt(w @ (x - mean) ** 2 / tot)
    res = w * (y - 1 / (1 + np.exp(-(m.coef[0] + x @ m.coef[1:]))))
    grad = -res @ ((x - mean) / sd) / tot
    b = m.coef[1:] * sd
    v = np.where(b != 0, np.abs(grad + lam * np.sign(b)), np.maximum(np.abs(grad) - lam, 0))
    assert v.max() <= 10 * tol and abs(res.sum()) / tot <= 10 * tol


# ---------------------------------------------------------------------------
# individualized treatment rules


def test_itr_recovers_effect_contrast():
    rng = np.random.default_rng(21)
    n, p = 100_000, 10
    z = rng.normal(size=(n, p))
    zt = np.column_stack([np.ones(n), z])
    b1 = np.r_[0, 0.25, 0.25, 0.25, 0.25, np.zeros(p - 4)]
    b0 = np.r_[0, 0.25, -0.25, 0.25, -0.25, np.zeros(p - 4)]
    g = rng.permutation(np.repeat([1.0, 0.0], n // 2))
    y = np.where(g == 1, zt @ b1, zt @ b0) + rng.normal(size=n)
    m = fit_itr(view(z, y, g=g), LearnerSpec("itr_linear", pi=0.5))
    assert np.allclose(m.coef, b1 - b0, atol=0.02)


def test_itr_constant_treatment_is_singular():
    x, y, _, _ = problem(12, 20, 2)
    lrn = make_learner("itr_linear")
    with pytest.raises(SingularDesign):
        lrn.fit(WeightedView(Dataset(x, y, np.r_[1.0, np.zeros(19)]), np.arange(1, 20), np.ones(19)))


def test_itr_flip_symmetry():
    x, y, w, g = problem(13, 40, 3, treat=True)
    spec = LearnerSpec("itr_linear", pi=0.5)
    a = fit_itr(view(x, y, w, g), spec)
    b = fit_itr(view(x, y, w, 1 - g), spec)
    assert np.allclose(a.coef, -b.coef, atol=1e-10)


def test_itr_needs_treatment():
    with pytest.raises(MissingTreatment):
        make_learner("itr_linear").fit(view(np.arange(5.0), np.arange(5.0)))


def test_spec_validation():
    with pytest.raises(ValueError):
        LearnerSpec("forest")
    with pytest.raises(ValueError):
        LearnerSpec("lasso", lam=-1)
    with pytest.raises(ValueError):
        LearnerSpec("itr_linear", pi=1.0)
