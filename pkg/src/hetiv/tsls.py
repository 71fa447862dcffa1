"""Two-stage least squares with one binary endogenous regressor.

Covers robust inference, first-stage strength and overidentification
diagnostics, an exactly identified external-instrument mode, and difference
tests between subgroup fits.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy import linalg, stats

from .errors import EstimationError, SingularMatrixError
from .lewbel import InstrumentSet
from .regression import (
    DesignMatrix,
    FitResult,
    WaldTest,
    hc_vcov,
    ols_fit,
    prune_collinear,
    wald_joint,
)

#: First-stage F below this raises the weak-instrument flag (a warning
#: annotation on the result, never an error).
WEAK_F_FLOOR = 10.0


@dataclass(frozen=True)
class JTest:
    """Hansen J overidentification test; df = L - 1 for one endogenous
    regressor. ``exactly_identified`` fits carry statistic 0 and no p-value."""

    statistic: float
    df: int
    pvalue: float | None
    exactly_identified: bool = False


@dataclass(frozen=True)
class DifferenceTest:
    difference: float
    se: float
    pvalue: float


@dataclass
class IvFitResult(FitResult):
    """Second-stage fit plus first-stage record and IV diagnostics."""

    first_stage: FitResult = None
    first_stage_f: WaldTest = None
    hansen: JTest = None
    instrument_count: int = 0
    endogenous_name: str = "treatment"
    instrument_source: str = "lewbel"
    weak: bool = False
    late: bool = False
    first_stage_instrument_coef: float | None = None
    first_stage_instrument_se: float | None = None
    notes: list = field(default_factory=list)


def _as_matrix(z) -> tuple:
    if isinstance(z, InstrumentSet):
        return np.asarray(z.instruments, dtype=float), list(z.labels), z.source
    z = np.asarray(z, dtype=float)
    if z.ndim == 1:
        z = z[:, None]
    return z, [f"iv{j}" for j in range(z.shape[1])], "external"


def tsls_fit(
    y: np.ndarray,
    X_exog: DesignMatrix,
    d: np.ndarray,
    z_excl,
    vce: str = "hc1",
    weights: np.ndarray | None = None,
    endogenous_name: str = "treatment",
    weak_floor: float = WEAK_F_FLOOR,
) -> IvFitResult:
    """2SLS of y on [X_exog, d] with excluded instruments z_excl.

    The first stage projects d onto [X_exog, z_excl]; the second stage
    regresses y on [X_exog, d_hat]. Robust covariance uses residuals formed
    with the actual d. Excluded instruments collinear with the exogenous
    design (or each other) are pruned and logged. A first-stage F below
    ``weak_floor`` sets the weak flag; it never raises.
    """
    y = np.asarray(y, dtype=float)
    d = np.asarray(d, dtype=float)
    Z, z_labels, source = _as_matrix(z_excl)
    n = len(y)
    if Z.shape[0] != n or len(d) != n or X_exog.n != n:
        raise EstimationError("input lengths differ")

    full = np.column_stack([X_exog.matrix, Z])
    full_labels = list(X_exog.labels) + z_labels
    kept, dropped = prune_collinear(full, full_labels)
    kept_z = [i for i in kept if i >= X_exog.k]
    if not kept_z:
        raise EstimationError("no excluded instrument survives collinearity pruning")
    notes = []
    if dropped:
        notes.append(f"pruned collinear instrument columns: {', '.join(dropped)}")
    L = len(kept_z)

    first_design = DesignMatrix(
        matrix=full[:, kept],
        labels=[full_labels[i] for i in kept],
        has_intercept=X_exog.has_intercept,
    )
    first = ols_fit(first_design, d, weights=weights, vce=vce)
    d_hat = first_design.matrix @ first.coefficients

    excl_idx = [first_design.labels.index(full_labels[i]) for i in kept_z]
    try:
        fs_f = wald_joint(first, excl_idx)
    except SingularMatrixError:
        if np.max(np.abs(first.residuals)) <= 1e-10:
            # perfect prediction: infinitely strong instruments
            fs_f = WaldTest(statistic=math.inf, df1=L, df2=first.n - first.k, pvalue=0.0)
        else:
            raise
    weak = fs_f.statistic < weak_floor
    if weak:
        warnings.warn(
            f"first-stage F {fs_f.statistic:.3f} below {weak_floor}: weak instruments",
            RuntimeWarning,
            stacklevel=2,
        )

    second_design = DesignMatrix(
        matrix=np.column_stack([X_exog.matrix, d_hat]),
        labels=list(X_exog.labels) + [endogenous_name],
        has_intercept=X_exog.has_intercept,
    )
    stage2 = ols_fit(second_design, y, weights=weights, vce=vce)
    coef = stage2.coefficients

    actual = np.column_stack([X_exog.matrix, d])
    residuals = y - actual @ coef
    cov = hc_vcov(second_design.matrix, residuals, kind=vce, weights=weights)
    se = np.sqrt(np.diag(cov))
    zstats = np.zeros_like(coef)
    np.divide(coef, se, out=zstats, where=se > 0)
    zstats[(se == 0) & (coef != 0)] = np.inf
    pvals = 2.0 * stats.norm.sf(np.abs(zstats))

    if weights is None:
        dep_mean = float(y.mean())
        ssr = float(residuals @ residuals)
        centered = y - dep_mean if X_exog.has_intercept else y
        sst = float(centered @ centered)
    else:
        dep_mean = float(np.dot(weights, y) / weights.sum())
        ssr = float(np.dot(weights, residuals**2))
        centered = y - dep_mean if X_exog.has_intercept else y
        sst = float(np.dot(weights, centered**2))
    r2 = 1.0 - ssr / sst if sst > 0 else float("nan")
    k = second_design.k
    adj = 1.0 - (1.0 - r2) * (n - 1) / (n - k) if sst > 0 else float("nan")

    result = IvFitResult(
        coefficients=coef,
        labels=list(second_design.labels),
        cov=cov,
        residuals=residuals,
        n=n,
        k=k,
        r_squared=r2,
        adj_r_squared=adj,
        dep_mean=dep_mean,
        se=se,
        pvalues=pvals,
        vce=vce,
        weights=weights,
        first_stage=first,
        first_stage_f=fs_f,
        hansen=None,
        instrument_count=L,
        endogenous_name=endogenous_name,
        instrument_source=source,
        weak=weak,
        notes=notes,
    )
    if L >= 2:
        result.hansen = hansen_j(y, X_exog, d, full[:, kept_z], result, weights=weights)
    else:
        result.hansen = JTest(statistic=0.0, df=0, pvalue=None, exactly_identified=True)
    return result


def first_stage_f(first: FitResult, excluded) -> WaldTest:
    """Robust Wald F that the excluded instruments are jointly zero in the
    first stage; df1 equals the instrument count."""
    return wald_joint(first, excluded)


def hansen_j(
    y: np.ndarray,
    X_exog: DesignMatrix,
    d: np.ndarray,
    z_excl: np.ndarray,
    iv_fit: IvFitResult,
    weights: np.ndarray | None = None,
) -> JTest:
    """Hansen J statistic for overidentifying restrictions, df = L - 1.

    Moments are instrument times residual over the full instrument set
    [X_exog, z_excl]. The weight is the robust moment covariance built from
    the 2SLS residuals; J is the minimized two-step GMM criterion under that
    weight (the weight is not updated again).
    """
    Z = np.asarray(z_excl, dtype=float)
    if Z.ndim == 1:
        Z = Z[:, None]
    L = Z.shape[1]
    if L < 2:
        raise EstimationError("Hansen J needs at least two excluded instruments")
    y = np.asarray(y, dtype=float)
    d = np.asarray(d, dtype=float)
    n = len(y)
    full = np.column_stack([X_exog.matrix, Z])
    actual = np.column_stack([X_exog.matrix, d])
    resid2sls = y - actual @ iv_fit.coefficients

    if weights is not None:
        wz = full * weights[:, None]
    else:
        wz = full
    W = (wz * resid2sls[:, None] ** 2).T @ wz / n
    eigs = np.linalg.eigvalsh(W)
    if eigs[0] <= 1e-12 * max(eigs[-1], 1.0):
        raise SingularMatrixError("singular moment covariance in Hansen J")
    Winv = np.linalg.inv(W)

    G = wz.T @ actual / n
    zy = wz.T @ y / n
    A = G.T @ Winv @ G
    try:
        beta_gmm = linalg.solve(A, G.T @ Winv @ zy, assume_a="pos")
    except linalg.LinAlgError:
        raise SingularMatrixError("singular GMM system in Hansen J")
    gbar = wz.T @ (y - actual @ beta_gmm) / n
    J = float(n * gbar @ Winv @ gbar)
    df = L - 1
    return JTest(statistic=J, df=df, pvalue=float(stats.chi2.sf(J, df)))


def external_iv_fit(
    y: np.ndarray,
    X_exog: DesignMatrix,
    d: np.ndarray,
    w: np.ndarray,
    vce: str = "hc1",
    weights: np.ndarray | None = None,
    endogenous_name: str = "treatment",
    instrument_name: str = "instrument",
    weak_floor: float = WEAK_F_FLOOR,
) -> IvFitResult:
    """Exactly identified 2SLS with a single binary external instrument.

    Reports the instrument's first-stage coefficient and flags the estimate
    as a local average treatment effect (effect for the subpopulation whose
    treatment the instrument shifts).
    """
    w = np.asarray(w, dtype=float)
    vals = np.unique(w[~np.isnan(w)])
    if not np.all(np.isin(vals, (0.0, 1.0))):
        raise EstimationError("external instrument must be binary")
    if len(vals) < 2:
        raise EstimationError("external instrument is constant within the estimation sample")
    result = tsls_fit(
        y,
        X_exog,
        d,
        w[:, None],
        vce=vce,
        weights=weights,
        endogenous_name=endogenous_name,
        weak_floor=weak_floor,
    )
    result.instrument_source = "external"
    result.late = True
    # the lone excluded instrument sits last in the first-stage design
    result.first_stage_instrument_coef = float(result.first_stage.coefficients[-1])
    result.first_stage_instrument_se = float(result.first_stage.se[-1])
    result.notes.append(
        f"exactly identified; estimate is a LATE for compliers of {instrument_name}"
    )
    return result


def difference_test(b_a: float, se_a: float, b_b: float, se_b: float) -> DifferenceTest:
    """Difference of two coefficients from disjoint subsamples.

    difference = b_a - b_b, se = sqrt(se_a^2 + se_b^2), two-sided normal
    p-value. For overlapping samples the same formula applies as a
    documented approximation.
    """
    diff = b_a - b_b
    se = math.sqrt(se_a**2 + se_b**2)
    if se == 0:
        p = 1.0 if diff == 0 else 0.0
    else:
        p = 2.0 * stats.norm.sf(abs(diff) / se)
    return DifferenceTest(difference=diff, se=se, pvalue=p)


def subgroup_difference(fit_a: FitResult, fit_b: FitResult, coef: str) -> DifferenceTest:
    """Difference test for a named coefficient across two subgroup fits."""
    for fit in (fit_a, fit_b):
        if coef not in fit.labels:
            raise EstimationError(f"coefficient {coef!r} absent from a subgroup fit")
    return difference_test(
        fit_a.coef(coef), fit_a.se_for(coef), fit_b.coef(coef), fit_b.se_for(coef)
    )
