"""Heteroskedasticity-generated instruments (Lewbel 2012 construction).

Two steps: regress the binary treatment on the exogenous design and keep the
residuals, then multiply each mean-centered instrument-source column by those
residuals. Identification needs the residual variance to move with the
sources, which ``hetero_diagnostic`` probes directly.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from .errors import EstimationError
from .regression import DesignMatrix, WaldTest, ols_fit, wald_joint

#: Instrument columns with variance below this fraction of the largest
#: column variance are numerically dead and get dropped.
DEGENERATE_RELATIVE_VARIANCE = 1e-12

#: Residual scale below which a first stage counts as perfect prediction.
DEGENERATE_RESIDUAL_TOL = 1e-10


@dataclass
class InstrumentSet:
    """Generated (or external) excluded instruments plus their provenance."""

    instruments: np.ndarray
    labels: list
    vhat: np.ndarray | None
    z_means: np.ndarray | None
    source: str
    dropped: list = field(default_factory=list)
    diagnostics: WaldTest | None = None

    @property
    def count(self) -> int:
        return self.instruments.shape[1]


def first_stage_residuals(
    X: DesignMatrix, d: np.ndarray, weights: np.ndarray | None = None
) -> tuple:
    """OLS of the treatment on the exogenous design.

    Returns (gamma, vhat) with vhat = d - X @ gamma. With an intercept the
    residuals have mean zero up to solver precision. A residual vector that
    is numerically zero (perfect prediction) triggers a warning; the
    instrument construction will then fail as degenerate.
    """
    fit = ols_fit(X, np.asarray(d, dtype=float), weights=weights)
    vhat = fit.residuals
    if np.max(np.abs(vhat)) <= DEGENERATE_RESIDUAL_TOL:
        warnings.warn(
            "first stage predicts the treatment perfectly; residuals are zero",
            RuntimeWarning,
            stacklevel=2,
        )
    return fit.coefficients, vhat


def make_lewbel_instruments(Z: DesignMatrix, vhat: np.ndarray) -> InstrumentSet:
    """Products of mean-centered source columns with first-stage residuals.

    ``Z`` must exclude the intercept. Column j of the result is
    (Z_j - mean(Z_j)) * vhat elementwise; means are the estimation-sample
    means. Columns whose variance falls below
    DEGENERATE_RELATIVE_VARIANCE times the largest column variance are
    dropped and logged; if nothing survives there is no heteroskedasticity
    signal and construction fails.
    """
    if "intercept" in Z.labels:
        raise EstimationError("instrument sources must exclude the intercept")
    vhat = np.asarray(vhat, dtype=float)
    if Z.n != len(vhat):
        raise EstimationError("residual length does not match instrument sources")
    means = Z.matrix.mean(axis=0)
    raw = (Z.matrix - means) * vhat[:, None]
    variances = raw.var(axis=0)
    ceiling = variances.max() if variances.size else 0.0
    alive = variances > DEGENERATE_RELATIVE_VARIANCE * ceiling if ceiling > 0 else np.zeros(len(variances), dtype=bool)
    dropped = [lab for lab, ok in zip(Z.labels, alive) if not ok]
    if not alive.any():
        raise EstimationError(
            "all generated instrument columns are degenerate; no heteroskedasticity signal"
        )
    labels = [f"lewbel({lab})" for lab, ok in zip(Z.labels, alive) if ok]
    return InstrumentSet(
        instruments=raw[:, alive],
        labels=labels,
        vhat=vhat,
        z_means=means,
        source="lewbel",
        dropped=dropped,
    )


def hetero_diagnostic(Z: np.ndarray, vhat: np.ndarray, vce: str = "hc1") -> WaldTest:
    """Identification probe: regress vhat^2 on Z with an intercept and test
    all slopes jointly zero with a robust Wald test.

    A low p-value means the residual variance moves with Z, which is what
    the generated instruments need.
    """
    Z = np.asarray(Z, dtype=float)
    if Z.ndim == 1:
        Z = Z[:, None]
    vhat = np.asarray(vhat, dtype=float)
    n = len(vhat)
    X = DesignMatrix(
        matrix=np.column_stack([np.ones(n), Z]),
        labels=["intercept"] + [f"z{j}" for j in range(Z.shape[1])],
        has_intercept=True,
    )
    v2 = vhat**2
    if np.allclose(v2, v2[0]):
        # no variation in squared residuals: statistic 0 by convention
        return WaldTest(statistic=0.0, df1=Z.shape[1], df2=n - X.k, pvalue=1.0)
    fit = ols_fit(X, v2, vce=vce)
    return wald_joint(fit, list(range(1, X.k)))
