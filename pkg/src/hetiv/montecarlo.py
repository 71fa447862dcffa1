"""Synthetic data-generating processes and the replication driver.

The generator embodies three endogeneity channels for a rare binary
treatment inside a linear probability model:

* unobserved heterogeneity: a latent binary type (share TYPE_SHARE) raises
  the treatment probability additively by TYPE_USE_BOOST and loads into the
  outcome with weight rho * TYPE_OUTCOME_LOAD. Because the type's effect on
  treatment take-up barely varies with the controls, the generated
  instruments stay (nearly) valid while OLS is biased.
* reverse causality: ``feedback`` loads the standardized outcome error into
  the latent treatment index (scaled by FEEDBACK_INDEX_LOAD), a channel the
  generated instruments cannot repair.
* misclassification: observed treatment flips 1->0 at the false-negative
  rate and 0->1 at the false-positive rate.

Instrument relevance comes from ``delta``: the latent-index noise scale is
exp(delta * x1), so the treatment-equation residual variance moves with x1.
A binary external instrument w (religiosity-like, mean W_PREVALENCE) shifts
take-up of the w=0 group so that P(D|w=1) - P(D|w=0) is approximately
``instrument_effect``; w never enters the outcome.

The latent-index threshold is calibrated by bisection against a large fixed
draw from the generator itself so that mean treatment prevalence hits the
``prevalence`` target.
"""

from __future__ import annotations

import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy import stats

from .errors import EstimationError
from .lewbel import first_stage_residuals, make_lewbel_instruments
from .pipeline import BINARY, NUMERIC, Dataset, dataset_from_columns
from .regression import DesignMatrix, ols_fit
from .tsls import external_iv_fit, tsls_fit

TYPE_SHARE = 0.15
TYPE_USE_BOOST = 0.08
TYPE_OUTCOME_LOAD = 0.25
OUTCOME_NOISE_SD = 0.03
FEEDBACK_INDEX_LOAD = 3.5
W_PREVALENCE = 0.9
CLAMP_BOUNDS = (0.02, 0.98)
CLAMP_WARN_SHARE = 0.05

_CALIBRATION_N = 400_000
_CALIBRATION_SEED = 0x5EED_CA1
_Z975 = float(stats.norm.ppf(0.975))

ESTIMATORS = ("ols", "lewbel", "external")


@dataclass(frozen=True)
class DgpConfig:
    """Ground-truth parameters of one synthetic scenario."""

    n: int = 25_000
    beta: float = -0.04
    alpha: tuple = (0.88, 0.01, -0.01)
    gamma: tuple = (0.0, 0.0)
    delta: float = 1.0
    rho: float = 0.3
    feedback: float = 0.0
    misclass: tuple = (0.0, 0.0)
    seed: int = 42
    prevalence: float = 0.033
    instrument_effect: float = -0.03

    def __post_init__(self):
        if self.n < 100:
            raise ValueError("n must be at least 100")
        if not (0.0 <= self.misclass[0] <= 1.0 and 0.0 <= self.misclass[1] <= 1.0):
            raise ValueError("misclassification rates must lie in [0, 1]")
        if abs(self.rho) >= 1.0:
            raise ValueError("|rho| must be below 1")
        if not (0.0 < self.prevalence < 1.0):
            raise ValueError("prevalence must lie in (0, 1)")
        if len(self.alpha) != 3 or len(self.gamma) != 2:
            raise ValueError("alpha needs 3 coefficients, gamma needs 2")


@dataclass(frozen=True)
class EstimatorSummary:
    estimator: str
    mean_estimate: float
    bias: float
    rmse: float
    empirical_sd: float
    mean_se: float
    coverage95: float
    weak_rate: float | None
    j_reject_rate: float | None
    median_first_stage_f: float | None


@dataclass
class McSummary:
    """Aggregated bias/coverage/rejection results over replications.

    ``raw`` keeps the per-replication estimate/se/F/J-p arrays per
    estimator; it is not serialized.
    """

    config: DgpConfig
    replications: int
    skipped: int
    estimators: dict = field(default_factory=dict)
    raw: dict = field(default_factory=dict, repr=False)

    CSV_HEADER = (
        "estimator,n,beta,rho,delta,feedback,fn,fp,prevalence,seed,reps,skipped,"
        "mean_estimate,bias,rmse,empirical_sd,mean_se,coverage95,weak_rate,"
        "j_reject_rate,median_first_stage_f"
    )

    def csv_rows(self) -> list:
        c = self.config
        rows = []
        for name in sorted(self.estimators):
            s = self.estimators[name]

            def fmt(x):
                return "" if x is None else f"{x:.6g}"

            rows.append(
                f"{name},{c.n},{c.beta},{c.rho},{c.delta},{c.feedback},"
                f"{c.misclass[0]},{c.misclass[1]},{c.prevalence},{c.seed},"
                f"{self.replications},{self.skipped},"
                f"{s.mean_estimate:.8f},{s.bias:.8f},{s.rmse:.8f},"
                f"{s.empirical_sd:.8f},{s.mean_se:.8f},{s.coverage95:.4f},"
                f"{fmt(s.weak_rate)},{fmt(s.j_reject_rate)},"
                f"{fmt(s.median_first_stage_f)}"
            )
        return rows

    def to_csv_text(self) -> str:
        return "\n".join([self.CSV_HEADER] + self.csv_rows()) + "\n"

    def to_report_text(self) -> str:
        c = self.config
        lines = [
            f"Monte Carlo summary ({self.replications} replications, {self.skipped} skipped)",
            f"  scenario: n={c.n} beta={c.beta} rho={c.rho} delta={c.delta} "
            f"feedback={c.feedback} misclass={c.misclass} prevalence={c.prevalence} "
            f"seed={c.seed}",
        ]
        for name in sorted(self.estimators):
            s = self.estimators[name]
            extra = ""
            if s.weak_rate is not None:
                extra += f" weak-flag rate {s.weak_rate:.3f}"
            if s.j_reject_rate is not None:
                extra += f" J rejection rate {s.j_reject_rate:.3f}"
            if s.median_first_stage_f is not None:
                extra += f" median F {s.median_first_stage_f:.1f}"
            lines.append(
                f"  {name:8s} mean {s.mean_estimate:+.5f} bias {s.bias:+.5f} "
                f"rmse {s.rmse:.5f} sd {s.empirical_sd:.5f} mean se {s.mean_se:.5f} "
                f"coverage {s.coverage95:.3f}{extra}"
            )
        return "\n".join(lines) + "\n"


_threshold_cache: dict = {}


def _structure_key(c: DgpConfig) -> tuple:
    # only parameters that move the latent index / take-up channels
    return (c.gamma, c.delta, c.rho, c.feedback, c.prevalence, c.instrument_effect)


def _draw_structure(c: DgpConfig, n: int, rng: np.random.Generator) -> dict:
    """All random building blocks in a frozen draw order."""
    x1 = rng.standard_normal(n)
    x2 = (rng.random(n) < 0.5).astype(float)
    q = (rng.random(n) < TYPE_SHARE).astype(float)
    u = rng.standard_normal(n)
    omega = rng.standard_normal(n)
    coin_q = rng.random(n)
    w = (rng.random(n) < W_PREVALENCE).astype(float)
    coin_w = rng.random(n)
    eps = c.rho * TYPE_OUTCOME_LOAD * (q - TYPE_SHARE) + OUTCOME_NOISE_SD * omega
    sd_eps = np.sqrt(
        (c.rho * TYPE_OUTCOME_LOAD) ** 2 * TYPE_SHARE * (1 - TYPE_SHARE)
        + OUTCOME_NOISE_SD**2
    )
    index = (
        c.gamma[0] * x1
        + c.gamma[1] * x2
        + c.feedback * FEEDBACK_INDEX_LOAD * eps / sd_eps
        + np.exp(c.delta * x1) * u
    )
    return dict(x1=x1, x2=x2, q=q, eps=eps, index=index, coin_q=coin_q, w=w, coin_w=coin_w)


def _treatment(c: DgpConfig, s: dict, tau: float) -> np.ndarray:
    theta_w = abs(c.instrument_effect) / (1.0 - c.prevalence)
    d = (s["index"] > tau) | ((s["q"] == 1.0) & (s["coin_q"] < TYPE_USE_BOOST))
    if c.instrument_effect != 0.0:
        d |= (s["w"] == 0.0) & (s["coin_w"] < theta_w)
    return d.astype(float)


def calibrate_threshold(c: DgpConfig) -> float:
    """Bisect the latent-index threshold so that mean treatment prevalence
    on a large fixed calibration draw hits the configured target."""
    key = _structure_key(c)
    if key in _threshold_cache:
        return _threshold_cache[key]
    rng = np.random.default_rng(np.random.SeedSequence(_CALIBRATION_SEED))
    s = _draw_structure(c, _CALIBRATION_N, rng)
    lo = float(np.min(s["index"])) - 1.0
    hi = float(np.max(s["index"])) + 1.0
    for _ in range(60):
        mid = 0.5 * (lo + hi)
        if _treatment(c, s, mid).mean() > c.prevalence:
            lo = mid
        else:
            hi = mid
    tau = 0.5 * (lo + hi)
    _threshold_cache[key] = tau
    return tau


def simulate_dgp(c: DgpConfig, seed=None) -> Dataset:
    """Draw one synthetic dataset; deterministic given the configuration.

    Columns: y, d (observed treatment), d_true, x1, x2, w. ``seed``
    overrides the config seed (the replication driver passes derived
    per-replication seeds). Warns when the probability clamp engages on
    more than CLAMP_WARN_SHARE of rows.
    """
    tau = calibrate_threshold(c)
    rng = np.random.default_rng(seed if seed is not None else np.random.SeedSequence(c.seed))
    s = _draw_structure(c, c.n, rng)
    d_true = _treatment(c, s, tau)

    p_y = (
        c.alpha[0]
        + c.alpha[1] * s["x1"]
        + c.alpha[2] * s["x2"]
        + c.beta * d_true
        + s["eps"]
    )
    lo, hi = CLAMP_BOUNDS
    clamped = (p_y < lo) | (p_y > hi)
    if clamped.mean() > CLAMP_WARN_SHARE:
        warnings.warn(
            f"probability clamp engaged on {clamped.mean():.1%} of rows; "
            "the configuration leaves too little headroom",
            RuntimeWarning,
            stacklevel=2,
        )
    y = (rng.random(c.n) < np.clip(p_y, lo, hi)).astype(float)

    flip_fn = rng.random(c.n)
    flip_fp = rng.random(c.n)
    fn, fp = c.misclass
    d_obs = d_true.copy()
    if fn > 0:
        d_obs[(d_true == 1.0) & (flip_fn < fn)] = 0.0
    if fp > 0:
        d_obs[(d_true == 0.0) & (flip_fp < fp)] = 1.0

    return dataset_from_columns(
        columns={"y": y, "d": d_obs, "d_true": d_true, "x1": s["x1"], "x2": s["x2"], "w": s["w"]},
        kinds={"y": BINARY, "d": BINARY, "d_true": BINARY, "x1": NUMERIC, "x2": BINARY, "w": BINARY},
        provenance=[f"simulated scenario seed={c.seed}"],
    )


def replication_seed(master_seed: int, index: int) -> np.random.SeedSequence:
    """Deterministic per-replication seed: SeedSequence([master, index])."""
    return np.random.SeedSequence([master_seed, index])


def _fit_one(c: DgpConfig, data: Dataset, estimators, weak_floor: float) -> dict:
    n = data.rows
    x1 = data.column("x1")
    x2 = data.column("x2")
    y = data.column("y")
    d = data.column("d")
    X = DesignMatrix(
        matrix=np.column_stack([np.ones(n), x1, x2]),
        labels=["intercept", "x1", "x2"],
        has_intercept=True,
    )
    out = {}
    if "ols" in estimators:
        full = DesignMatrix(
            matrix=np.column_stack([X.matrix, d]),
            labels=X.labels + ["d"],
            has_intercept=True,
        )
        fit = ols_fit(full, y)
        out["ols"] = dict(est=fit.coef("d"), se=fit.se_for("d"), F=None, Jp=None, weak=None)
    if "lewbel" in estimators:
        _, vhat = first_stage_residuals(X, d)
        iset = make_lewbel_instruments(X.select(["x1", "x2"]), vhat)
        fit = tsls_fit(y, X, d, iset, endogenous_name="d", weak_floor=weak_floor)
        out["lewbel"] = dict(
            est=fit.coef("d"),
            se=fit.se_for("d"),
            F=fit.first_stage_f.statistic,
            Jp=fit.hansen.pvalue,
            weak=fit.weak,
        )
    if "external" in estimators:
        fit = external_iv_fit(
            y, X, d, data.column("w"), endogenous_name="d",
            instrument_name="w", weak_floor=weak_floor,
        )
        out["external"] = dict(
            est=fit.coef("d"), se=fit.se_for("d"),
            F=fit.first_stage_f.statistic, Jp=None, weak=fit.weak,
        )
    return out


def run_mc(
    c: DgpConfig,
    estimators=("ols", "lewbel"),
    reps: int = 500,
    threads: int = 1,
    seeds=None,
    weak_floor: float = 10.0,
) -> McSummary:
    """Replicate the scenario and aggregate estimator performance.

    Per-replication seeds derive deterministically from (config seed,
    replication index); pass ``seeds`` to override. Replications raising a
    rank/degeneracy error are skipped and counted; more than 5% skipped
    aborts. Results do not depend on ``threads``.
    """
    if reps < 2:
        raise ValueError("reps must be at least 2")
    unknown = set(estimators) - set(ESTIMATORS)
    if unknown:
        raise ValueError(f"unknown estimators: {sorted(unknown)}")
    if seeds is not None and len(seeds) != reps:
        raise ValueError("seeds must have one entry per replication")
    calibrate_threshold(c)  # fill the cache before any worker starts

    def one(r: int):
        if seeds is None:
            seed = replication_seed(c.seed, r)
        else:
            seed = seeds[r]
            if isinstance(seed, (int, np.integer)):
                seed = np.random.SeedSequence(int(seed))
        data = simulate_dgp(c, seed=seed)
        try:
            return _fit_one(c, data, estimators, weak_floor)
        except (EstimationError, np.linalg.LinAlgError) as exc:
            return exc

    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        if threads > 1:
            with ThreadPoolExecutor(max_workers=threads) as pool:
                results = list(pool.map(one, range(reps)))
        else:
            results = [one(r) for r in range(reps)]

    skipped = sum(1 for r in results if isinstance(r, Exception))
    if skipped > 0.05 * reps:
        raise EstimationError(
            f"{skipped}/{reps} replications failed; scenario is degenerate"
        )
    good = [r for r in results if not isinstance(r, Exception)]

    summary = McSummary(config=c, replications=reps, skipped=skipped)
    for name in estimators:
        est = np.array([g[name]["est"] for g in good])
        se = np.array([g[name]["se"] for g in good])
        covered = (est - _Z975 * se <= c.beta) & (c.beta <= est + _Z975 * se)
        weak_vals = [g[name]["weak"] for g in good]
        j_vals = [g[name]["Jp"] for g in good]
        f_vals = [g[name]["F"] for g in good]
        bias = float(est.mean() - c.beta)
        sd = float(est.std(ddof=0))
        summary.raw[name] = {
            "estimate": est,
            "se": se,
            "F": np.array(f_vals, dtype=float) if all(v is not None for v in f_vals) else None,
            "Jp": np.array(j_vals, dtype=float) if all(p is not None for p in j_vals) else None,
        }
        summary.estimators[name] = EstimatorSummary(
            estimator=name,
            mean_estimate=float(est.mean()),
            bias=bias,
            rmse=float(np.sqrt(np.mean((est - c.beta) ** 2))),
            empirical_sd=sd,
            mean_se=float(se.mean()),
            coverage95=float(covered.mean()),
            weak_rate=(
                float(np.mean([bool(v) for v in weak_vals]))
                if all(v is not None for v in weak_vals)
                else None
            ),
            j_reject_rate=(
                float(np.mean([p < 0.05 for p in j_vals]))
                if all(p is not None for p in j_vals)
                else None
            ),
            median_first_stage_f=(
                float(np.median(np.array(f_vals, dtype=float)))
                if all(v is not None for v in f_vals)
                else None
            ),
        )
    return summary
