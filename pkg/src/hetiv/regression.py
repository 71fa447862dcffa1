"""Weighted least squares with heteroskedasticity-robust covariance.

The solver goes through an orthogonal decomposition (LAPACK least squares),
never the raw normal equations. Near-collinear columns are pruned in input
order during design construction, so the first occurrence of a duplicated
column is always the one kept.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import linalg, stats

from .errors import DataError, EstimationError, SingularMatrixError
from .pipeline import CATEGORICAL, Dataset

#: Relative pivot tolerance for dropping a near-collinear column.
RANK_TOLERANCE = 1e-10


@dataclass(frozen=True)
class ModelSpec:
    """Declarative description of one estimation.

    ``controls`` are numeric or binary columns entered as-is, ``square``
    names controls whose squares are appended, ``factors`` and
    ``fixed_effects`` are categorical columns expanded to dummies with the
    most frequent level as base. ``instrument_mode`` is "lewbel",
    "external" or "both"; an external mode needs ``external_instrument``.
    """

    outcome: str
    treatment: str
    controls: tuple = ()
    square: tuple = ()
    factors: tuple = ()
    fixed_effects: tuple = ()
    instrument_mode: str = "lewbel"
    external_instrument: str | None = None
    use_weights: bool = False

    def variables(self) -> tuple:
        """All dataset columns the estimation touches."""
        cols = [self.outcome, self.treatment]
        cols += list(self.controls) + list(self.factors) + list(self.fixed_effects)
        if self.external_instrument and self.instrument_mode in ("external", "both"):
            cols.append(self.external_instrument)
        return tuple(dict.fromkeys(cols))


@dataclass
class DesignMatrix:
    """Full-column-rank regressor matrix with labels and a pruning log."""

    matrix: np.ndarray
    labels: list
    has_intercept: bool
    dropped: list = field(default_factory=list)
    fixed_effect_labels: list = field(default_factory=list)

    @property
    def n(self) -> int:
        return self.matrix.shape[0]

    @property
    def k(self) -> int:
        return self.matrix.shape[1]

    def select(self, labels) -> "DesignMatrix":
        """Column subset as a new DesignMatrix (no re-pruning)."""
        idx = [self.labels.index(name) for name in labels]
        return DesignMatrix(
            matrix=self.matrix[:, idx],
            labels=[self.labels[i] for i in idx],
            has_intercept="intercept" in labels,
            fixed_effect_labels=[l for l in self.fixed_effect_labels if l in labels],
        )


@dataclass
class FitResult:
    """Least-squares fit with robust covariance and fit statistics."""

    coefficients: np.ndarray
    labels: list
    cov: np.ndarray
    residuals: np.ndarray
    n: int
    k: int
    r_squared: float
    adj_r_squared: float
    dep_mean: float
    se: np.ndarray
    pvalues: np.ndarray
    vce: str
    weights: np.ndarray | None

    def coef(self, name: str) -> float:
        return float(self.coefficients[self.labels.index(name)])

    def se_for(self, name: str) -> float:
        return float(self.se[self.labels.index(name)])

    def pvalue_for(self, name: str) -> float:
        return float(self.pvalues[self.labels.index(name)])


@dataclass(frozen=True)
class WaldTest:
    statistic: float
    df1: int
    df2: int
    pvalue: float


def prune_collinear(matrix: np.ndarray, labels) -> tuple:
    """Sequential orthogonalization rank filter.

    Walks columns in order, keeping a column only when its residual against
    the span of previously kept columns has norm above
    RANK_TOLERANCE * (norm of the first kept column's residual, i.e. |r_11|).
    Returns (kept indices, dropped labels).
    """
    n, k = matrix.shape
    q = np.empty((n, 0))
    kept, dropped = [], []
    r11 = None
    for j in range(k):
        col = matrix[:, j].astype(float)
        r = col - q @ (q.T @ col)
        r = r - q @ (q.T @ r)
        nrm = float(np.linalg.norm(r))
        if r11 is None:
            r11 = nrm if nrm > 0 else 1.0
        if nrm <= RANK_TOLERANCE * r11:
            dropped.append(labels[j])
            continue
        q = np.column_stack([q, r / nrm])
        kept.append(j)
    return kept, dropped


def _dummy_columns(values: np.ndarray, name: str) -> tuple:
    """Expand a categorical vector to (levels - 1) dummies, modal level as base.

    Ties on frequency break toward the lexicographically smaller level.
    """
    present = [v for v in values if v is not None]
    if not present:
        raise DataError(f"factor {name!r} has no observed levels")
    levels, counts = np.unique(np.array(present, dtype=object), return_counts=True)
    if len(levels) < 2:
        raise DataError(f"factor {name!r} has fewer than 2 observed levels")
    base = levels[np.argmax(counts)]
    cols, labels = [], []
    for lev in levels:
        if lev == base:
            continue
        cols.append(np.array([1.0 if v == lev else 0.0 for v in values]))
        labels.append(f"{name}={lev}")
    return cols, labels


def estimation_mask(d: Dataset, spec: ModelSpec) -> np.ndarray:
    """Listwise-deletion mask: rows with every model variable nonmissing."""
    mask = np.ones(d.rows, dtype=bool)
    for name in spec.variables():
        if name not in d.frame.columns:
            raise DataError(f"model references absent column {name!r}")
        col = d.column(name)
        if d.kinds[name] == CATEGORICAL:
            mask &= np.array([v is not None for v in col], dtype=bool)
        else:
            mask &= ~np.isnan(col)
    if spec.use_weights and d.weight_column is not None:
        mask &= ~np.isnan(d.weights())
    return mask


def build_design(d: Dataset, spec: ModelSpec, mask: np.ndarray | None = None) -> DesignMatrix:
    """Assemble the exogenous design: intercept, controls, squared terms and
    factor dummies, pruned to full column rank.

    ``mask`` restricts to an estimation sample; defaults to the listwise
    mask over the model's variables.
    """
    if mask is None:
        mask = estimation_mask(d, spec)
    n = int(mask.sum())
    if n == 0:
        raise EstimationError("estimation sample has zero rows")
    outcome = d.column(spec.outcome)[mask]
    if d.kinds.get(spec.outcome) != CATEGORICAL and np.all(outcome == outcome[0]):
        raise EstimationError(f"outcome {spec.outcome!r} is constant in the estimation sample")

    cols = [np.ones(n)]
    labels = ["intercept"]
    for name in spec.controls:
        if d.kinds.get(name) == CATEGORICAL:
            raise DataError(f"control {name!r} is categorical; list it under factors")
        cols.append(d.column(name)[mask])
        labels.append(name)
    for name in spec.square:
        base = d.column(name)[mask]
        cols.append(base**2)
        labels.append(f"{name}_sq")
    fe_labels = []
    for name in spec.factors:
        dummies, dlabels = _dummy_columns(d.column(name)[mask], name)
        cols += dummies
        labels += dlabels
    for name in spec.fixed_effects:
        dummies, dlabels = _dummy_columns(d.column(name)[mask], name)
        cols += dummies
        labels += dlabels
        fe_labels += dlabels

    matrix = np.column_stack(cols)
    kept, dropped = prune_collinear(matrix, labels)
    kept_labels = [labels[i] for i in kept]
    return DesignMatrix(
        matrix=matrix[:, kept],
        labels=kept_labels,
        has_intercept="intercept" in kept_labels,
        dropped=dropped,
        fixed_effect_labels=[l for l in fe_labels if l in kept_labels],
    )


def hc_vcov(
    X: np.ndarray,
    residuals: np.ndarray,
    kind: str = "hc1",
    weights: np.ndarray | None = None,
) -> np.ndarray:
    """Heteroskedasticity-robust sandwich covariance.

    HC0 is (X'X)^-1 (sum_i x_i x_i' e_i^2) (X'X)^-1; HC1 multiplies by
    n/(n-k). With analytic weights the bread uses X'WX and the meat uses
    w_i^2 e_i^2.
    """
    if kind not in ("hc0", "hc1"):
        raise EstimationError(f"unknown robust covariance kind {kind!r}")
    n, k = X.shape
    if residuals.shape[0] != n:
        raise EstimationError("residual length does not match design rows")
    if weights is None:
        bread = np.linalg.inv(X.T @ X)
        meat = (X * residuals[:, None] ** 2).T @ X
    else:
        bread = np.linalg.inv((X * weights[:, None]).T @ X)
        meat = (X * (weights * residuals)[:, None] ** 2).T @ X
    cov = bread @ meat @ bread
    if kind == "hc1":
        cov *= n / (n - k)
    return 0.5 * (cov + cov.T)


def ols_fit(
    X: DesignMatrix,
    y: np.ndarray,
    weights: np.ndarray | None = None,
    vce: str = "hc1",
) -> FitResult:
    """Least squares of y on X with robust covariance.

    Coefficients come from an orthogonal-decomposition solver. Weights are
    analytic: the fit minimizes sum(w * e^2). Two-sided p-values use the
    t(n-k) reference.
    """
    A = X.matrix
    y = np.asarray(y, dtype=float)
    n, k = A.shape
    if len(y) != n:
        raise EstimationError("outcome length does not match design rows")
    if n <= k:
        raise EstimationError(f"n={n} too small for k={k} regressors")

    if weights is None:
        coef, _, rank, _ = linalg.lstsq(A, y, lapack_driver="gelsd")
    else:
        weights = np.asarray(weights, dtype=float)
        sw = np.sqrt(weights)
        coef, _, rank, _ = linalg.lstsq(A * sw[:, None], y * sw, lapack_driver="gelsd")
    if rank < k:
        raise EstimationError("design is rank deficient after pruning")

    residuals = y - A @ coef
    cov = hc_vcov(A, residuals, kind=vce, weights=weights)
    se = np.sqrt(np.diag(cov))

    if weights is None:
        dep_mean = float(y.mean())
        ssr = float(residuals @ residuals)
        centered = y - dep_mean if X.has_intercept else y
        sst = float(centered @ centered)
    else:
        dep_mean = float(np.dot(weights, y) / weights.sum())
        ssr = float(np.dot(weights, residuals**2))
        centered = y - dep_mean if X.has_intercept else y
        sst = float(np.dot(weights, centered**2))
    r2 = 1.0 - ssr / sst if sst > 0 else float("nan")
    adj = 1.0 - (1.0 - r2) * (n - 1) / (n - k) if sst > 0 else float("nan")

    tstats = np.zeros_like(coef)
    np.divide(coef, se, out=tstats, where=se > 0)
    tstats[(se == 0) & (coef != 0)] = np.inf
    pvals = 2.0 * stats.t.sf(np.abs(tstats), df=n - k)
    return FitResult(
        coefficients=coef,
        labels=list(X.labels),
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
    )


def wald_joint(fit: FitResult, subset) -> WaldTest:
    """Robust Wald test that the named/indexed coefficients are jointly zero.

    Returns the F-form statistic W/q with the F(q, n-k) reference.
    """
    if len(subset) == 0:
        raise EstimationError("wald_joint needs a nonempty subset")
    idx = [fit.labels.index(s) if isinstance(s, str) else int(s) for s in subset]
    b = fit.coefficients[idx]
    V = fit.cov[np.ix_(idx, idx)]
    try:
        chol = linalg.cho_factor(V)
        W = float(b @ linalg.cho_solve(chol, b))
    except linalg.LinAlgError:
        raise SingularMatrixError("singular sub-covariance in joint Wald test")
    q = len(idx)
    F = W / q
    df2 = fit.n - fit.k
    return WaldTest(statistic=F, df1=q, df2=df2, pvalue=float(stats.f.sf(F, q, df2)))
