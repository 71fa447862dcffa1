import warnings

import numpy as np
import pytest

from hetiv import (
    DesignMatrix,
    EstimationError,
    SingularMatrixError,
    difference_test,
    external_iv_fit,
    first_stage_f,
    first_stage_residuals,
    hansen_j,
    make_lewbel_instruments,
    ols_fit,
    subgroup_difference,
    tsls_fit,
)
from hetiv.render import round_half_away


def design(matrix, labels, intercept=True):
    return DesignMatrix(matrix=np.asarray(matrix, float), labels=list(labels),
                        has_intercept=intercept)


def exog(n, rng, k=2):
    cols = [np.ones(n)] + [rng.normal(size=n) for _ in range(k)]
    return design(np.column_stack(cols), ["intercept"] + [f"x{j}" for j in range(1, k + 1)])


def simple_iv_data(n=2_000, seed=0, beta=0.7, rho=0.5, pi=0.8):
    rng = np.random.default_rng(seed)
    X = exog(n, rng)
    z1 = rng.normal(size=n)
    z2 = rng.normal(size=n)
    v = rng.normal(size=n)
    e = rho * v + np.sqrt(1 - rho**2) * rng.normal(size=n)
    d = 0.3 * X.matrix[:, 1] + pi * z1 + 0.5 * z2 + v
    y = X.matrix @ np.array([0.1, 0.4, -0.2]) + beta * d + e
    return X, y, d, np.column_stack([z1, z2])


# --- tsls_fit ----------------------------------------------------------------


def test_self_instrumenting_equals_ols():
    rng = np.random.default_rng(1)
    n = 500
    X = exog(n, rng)
    d = (rng.random(n) < 0.3).astype(float)
    y = X.matrix @ np.array([0.2, 0.1, -0.4]) + 0.5 * d + rng.normal(size=n)
    full = design(np.column_stack([X.matrix, d]), X.labels + ["treatment"])
    ols_res = ols_fit(full, y)
    iv = tsls_fit(y, X, d, d[:, None])
    assert iv.coefficients == pytest.approx(ols_res.coefficients, rel=1e-10)
    # the projection is the identity, so the instrument is maximally strong
    assert iv.first_stage_f.statistic > 1e10
    assert not iv.weak


def test_exactly_identified_j_is_zero_marker():
    X, y, d, Z = simple_iv_data()
    iv = tsls_fit(y, X, d, Z[:, :1])
    assert iv.hansen.exactly_identified
    assert iv.hansen.statistic == 0.0
    assert iv.hansen.pvalue is None
    assert iv.instrument_count == 1


def test_recovers_structural_effect():
    X, y, d, Z = simple_iv_data(n=20_000, seed=3)
    iv = tsls_fit(y, X, d, Z)
    assert iv.coef("treatment") == pytest.approx(0.7, abs=0.05)
    assert iv.first_stage_f.df1 == 2  # df1 equals the instrument count
    assert iv.hansen.df == 1  # L - 1 with one endogenous regressor
    full = design(np.column_stack([X.matrix, d]), X.labels + ["treatment"])
    biased = ols_fit(full, y).coef("treatment")
    assert abs(biased - 0.7) > 0.1  # endogeneity visibly biases OLS here


def test_duplicate_instrument_pruned_estimate_unchanged():
    X, y, d, Z = simple_iv_data(seed=4)
    base = tsls_fit(y, X, d, Z)
    dup = np.column_stack([Z, 2.0 * Z[:, 0]])
    with_dup = tsls_fit(y, X, d, dup)
    # the deterministic pruning rule keeps the first occurrence and logs the copy
    assert with_dup.instrument_count == base.instrument_count
    assert any("pruned" in note for note in with_dup.notes)
    assert with_dup.coef("treatment") == pytest.approx(base.coef("treatment"), rel=1e-8)
    assert with_dup.hansen.df == base.hansen.df


def test_robust_covariance_uses_actual_treatment_residuals():
    X, y, d, Z = simple_iv_data(seed=5)
    iv = tsls_fit(y, X, d, Z)
    actual = np.column_stack([X.matrix, d])
    expected = y - actual @ iv.coefficients
    assert iv.residuals == pytest.approx(expected, rel=1e-12)


def test_weighted_self_instrumenting_equals_weighted_ols():
    rng = np.random.default_rng(19)
    n = 400
    X = exog(n, rng)
    d = (rng.random(n) < 0.3).astype(float)
    y = X.matrix @ np.array([0.2, 0.1, -0.4]) + 0.5 * d + rng.normal(size=n)
    w = rng.uniform(0.5, 3.0, size=n)
    full = design(np.column_stack([X.matrix, d]), X.labels + ["treatment"])
    ols_res = ols_fit(full, y, weights=w)
    iv = tsls_fit(y, X, d, d[:, None], weights=w)
    assert iv.coefficients == pytest.approx(ols_res.coefficients, rel=1e-10)


def test_weak_flag_and_warning():
    X, y, d, Z = simple_iv_data(n=500, seed=6, pi=0.0)
    noise = np.random.default_rng(7).normal(size=(500, 1))
    with pytest.warns(RuntimeWarning, match="weak"):
        iv = tsls_fit(y, X, d, noise)
    assert iv.weak


# --- first_stage_f -----------------------------------------------------------


def test_single_instrument_f_is_squared_robust_t():
    X, y, d, Z = simple_iv_data(seed=8)
    iv = tsls_fit(y, X, d, Z[:, :1])
    first = iv.first_stage
    t = first.coefficients[-1] / first.se[-1]
    assert iv.first_stage_f.statistic == pytest.approx(t**2, rel=1e-10)
    assert iv.first_stage_f.df1 == 1


def test_orthogonalized_instrument_gives_zero_f():
    # an instrument residualized against [X, d] is orthogonal to d by
    # construction: its first-stage coefficient is exactly zero
    rng = np.random.default_rng(9)
    n = 400
    X = exog(n, rng)
    d = rng.normal(size=n)
    raw = rng.normal(size=n)
    basis = np.column_stack([X.matrix, d])
    z = raw - basis @ np.linalg.lstsq(basis, raw, rcond=None)[0]
    first_design = design(np.column_stack([X.matrix, z]), X.labels + ["z"])
    first = ols_fit(first_design, d)
    res = first_stage_f(first, ["z"])
    assert res.statistic == pytest.approx(0.0, abs=1e-12)
    assert res.pvalue == pytest.approx(1.0)


def test_first_stage_f_wrapper():
    X, y, d, Z = simple_iv_data(seed=10)
    iv = tsls_fit(y, X, d, Z)
    again = first_stage_f(iv.first_stage, [X.k, X.k + 1])
    assert again.statistic == pytest.approx(iv.first_stage_f.statistic, rel=1e-12)


# --- hansen_j ----------------------------------------------------------------


def test_collinear_moments_raise_singular_error():
    X, y, d, Z = simple_iv_data(seed=11)
    iv = tsls_fit(y, X, d, Z)
    bad = np.column_stack([Z[:, 0], 3.0 * Z[:, 0]])
    with pytest.raises(SingularMatrixError):
        hansen_j(y, X, d, bad, iv)


def test_j_needs_two_instruments():
    X, y, d, Z = simple_iv_data(seed=12)
    iv = tsls_fit(y, X, d, Z)
    with pytest.raises(EstimationError):
        hansen_j(y, X, d, Z[:, :1], iv)


def test_j_power_against_invalid_instrument():
    # one instrument enters the outcome directly: rejection > 50% at n=25,000
    rejections = 0
    reps = 60
    for r in range(reps):
        rng = np.random.default_rng(np.random.SeedSequence([202, r]))
        n = 25_000
        X = exog(n, rng, k=1)
        w1 = (rng.random(n) < 0.5).astype(float)
        w2 = (rng.random(n) < 0.5).astype(float)
        v = rng.normal(size=n)
        d = (0.4 * w1 + 0.4 * w2 + v > 0.8).astype(float)
        y = 0.2 + 0.3 * X.matrix[:, 1] - 0.04 * d + 0.05 * w2 + 0.2 * rng.normal(size=n)
        iv = tsls_fit(y, X, d, np.column_stack([w1, w2]))
        rejections += iv.hansen.pvalue < 0.05
    assert rejections / reps > 0.5


# --- external_iv_fit ---------------------------------------------------------


def test_external_self_instrument_equals_ols():
    rng = np.random.default_rng(13)
    n = 600
    X = exog(n, rng)
    d = (rng.random(n) < 0.4).astype(float)
    y = X.matrix @ np.array([0.3, 0.2, 0.1]) - 0.3 * d + rng.normal(size=n)
    full = design(np.column_stack([X.matrix, d]), X.labels + ["treatment"])
    ols_res = ols_fit(full, y)
    iv = external_iv_fit(y, X, d, d)
    assert iv.coef("treatment") == pytest.approx(ols_res.coef("treatment"), rel=1e-10)
    assert iv.late and iv.instrument_source == "external"


def test_external_constant_instrument_rejected():
    rng = np.random.default_rng(14)
    X = exog(100, rng)
    d = (rng.random(100) < 0.5).astype(float)
    with pytest.raises(EstimationError, match="constant"):
        external_iv_fit(np.zeros(100), X, d, np.ones(100))


def test_external_nonbinary_instrument_rejected():
    rng = np.random.default_rng(15)
    X = exog(100, rng)
    d = (rng.random(100) < 0.5).astype(float)
    with pytest.raises(EstimationError, match="binary"):
        external_iv_fit(np.zeros(100), X, d, rng.normal(size=100))


def test_external_reports_first_stage_coefficient():
    rng = np.random.default_rng(16)
    n = 5_000
    X = exog(n, rng)
    w = (rng.random(n) < 0.9).astype(float)
    d = ((rng.random(n) < 0.08) & (w == 0) | (rng.random(n) < 0.03)).astype(float)
    y = 0.5 - 0.1 * d + 0.1 * rng.normal(size=n)
    iv = external_iv_fit(y, X, d, w)
    first = iv.first_stage
    assert iv.first_stage_instrument_coef == pytest.approx(first.coefficients[-1])
    assert iv.first_stage_instrument_se == pytest.approx(first.se[-1])
    assert any("LATE" in note for note in iv.notes)


def test_external_irrelevant_instrument_flags_weak():
    # w independent of d: central F, so median F sits far below 1 and the
    # weak flag fires essentially always
    fs = []
    for r in range(40):
        rng = np.random.default_rng(np.random.SeedSequence([303, r]))
        n = 10_000
        X = exog(n, rng)
        w = (rng.random(n) < 0.5).astype(float)
        d = (rng.random(n) < 0.3).astype(float)
        y = 0.5 + 0.1 * rng.normal(size=n)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", RuntimeWarning)
            iv = external_iv_fit(y, X, d, w)
        fs.append((iv.first_stage_f.statistic, iv.weak))
    stats = np.array([f for f, _ in fs])
    assert np.median(stats) < 1.0
    assert np.mean([weak for _, weak in fs]) > 0.95


# --- subgroup differences ----------------------------------------------------


def test_difference_matches_published_age_row():
    res = difference_test(-0.054, 0.019, 0.015, 0.013)
    assert res.difference == pytest.approx(-0.069, abs=1e-12)
    assert round_half_away(res.se, 3) == 0.023
    assert res.pvalue < 0.01


def test_identical_fits_give_zero_difference():
    res = difference_test(-0.02, 0.01, -0.02, 0.01)
    assert res.difference == 0.0
    assert res.pvalue == pytest.approx(1.0)


def test_overlapping_sample_difference_uses_independence_formula():
    # the independence formula gives 0.0252 here; a published overlapping
    # -sample value of 0.022 is not reproducible from any simple formula
    res = difference_test(-0.025, 0.014, -0.052, 0.021)
    assert abs(res.difference) == pytest.approx(0.027, abs=1e-12)
    assert res.se == pytest.approx(0.025239, abs=5e-7)


def test_subgroup_difference_by_name():
    X, y, d, Z = simple_iv_data(seed=17)
    iv_a = tsls_fit(y, X, d, Z)
    X2, y2, d2, Z2 = simple_iv_data(seed=18)
    iv_b = tsls_fit(y2, X2, d2, Z2)
    res = subgroup_difference(iv_a, iv_b, "treatment")
    manual = difference_test(
        iv_a.coef("treatment"), iv_a.se_for("treatment"),
        iv_b.coef("treatment"), iv_b.se_for("treatment"),
    )
    assert res.difference == pytest.approx(manual.difference, rel=1e-12)
    with pytest.raises(EstimationError):
        subgroup_difference(iv_a, iv_b, "nope")
