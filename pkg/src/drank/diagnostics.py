"""Residual diagnostics for a fitted rank-score model and score selection.

All quantities live on the standardized response scale
``(y - mu_hat) / sigma_hat``; the intercept-free fitted value at rank r is
``rho_hat * alpha_r``.
"""

from __future__ import annotations

import json
import math
import warnings
from dataclasses import asdict, dataclass, field

import numpy as np

from .errors import DomainError, InsufficientTableError, NumericalWarning, ProvenanceError
from .estimator import Estimate, RankedSample, fit_lse
from .scores import ScoreTable


@dataclass(frozen=True)
class InterceptFit:
    intercept: float
    slope: float
    intercept_std_err: float

    @property
    def z(self) -> float:
        """``|intercept| / std_err`` (inf when the fit is exact but offset)."""
        if abs(self.intercept) <= 1e-12:
            return 0.0
        if self.intercept_std_err > 0:
            return abs(self.intercept) / self.intercept_std_err
        return 0.0 if self.intercept == 0 else math.inf


@dataclass
class ResidualReport:
    residuals: np.ndarray
    rss: float
    intercept_fit: InterceptFit | None
    per_rank_theoretical_var: np.ndarray | None
    score_table_id: str
    alpha: np.ndarray = field(repr=False, default=None)
    std_y: np.ndarray = field(repr=False, default=None)
    rho_hat: float = float("nan")

    @property
    def fitted(self) -> np.ndarray:
        return self.rho_hat * self.alpha

    def to_csv(self, path_or_buf) -> None:
        """Rows of ``rank, alpha, std_y, fitted, residual[, band_lo, band_hi]``.

        Bands are ``fitted +/- 2 sqrt(var)``; ranks whose theoretical
        variance came out negative get empty band cells.
        """
        cols = ["rank", "alpha", "std_y", "fitted", "residual"]
        bands = self.per_rank_theoretical_var is not None
        if bands:
            cols += ["band_lo", "band_hi"]
        lines = [",".join(cols)]
        fitted = self.fitted
        for i in range(self.residuals.size):
            row = [str(i + 1)] + [_g(v) for v in
                                  (self.alpha[i], self.std_y[i], fitted[i], self.residuals[i])]
            if bands:
                v = self.per_rank_theoretical_var[i]
                if v >= 0:
                    half = 2.0 * math.sqrt(v)
                    row += [_g(fitted[i] - half), _g(fitted[i] + half)]
                else:
                    row += ["", ""]
            lines.append(",".join(row))
        _write(path_or_buf, "\n".join(lines) + "\n")


def _g(x) -> str:
    return format(float(x), ".17g")


def _write(path_or_buf, text):
    if hasattr(path_or_buf, "write"):
        path_or_buf.write(text)
    else:
        with open(path_or_buf, "w") as fh:
            fh.write(text)


def _check_provenance(sample: RankedSample, scores: ScoreTable, estimate: Estimate):
    prov = estimate.provenance or {}
    if prov.get("sample") != sample.digest() or prov.get("scores") != scores.key:
        raise ProvenanceError("estimate was not produced from this sample and score table")


def residuals(sample: RankedSample, scores: ScoreTable, estimate: Estimate) -> np.ndarray:
    """Plug-in residuals ``(y_r - mu_hat) / sigma_hat - rho_hat * alpha_r`` for ranks 1..m."""
    _check_provenance(sample, scores, estimate)
    return sample.std_top - estimate.rho_hat * scores.alpha[: sample.m]


def rss(sample: RankedSample, scores: ScoreTable, estimate: Estimate) -> float:
    """Residual sum of squares of the intercept-free fit."""
    e = residuals(sample, scores, estimate)
    return math.fsum(e * e)


def residual_variance_theoretical(scores: ScoreTable, rho: float, r: int, s: float, *,
                                  sigma_y: float = 1.0, sigma2=None,
                                  psi2_beta_power: int = 2) -> float:
    """Large-sample variance of the residual at rank ``r`` (1-based).

    Evaluates, term by term,

        rho^2 b_rr + (1 - rho^2)
        + a_r^2 psi1 / (n sigma_y^2 phi^2)
        - 2 / sum(a^2) * (rho^2 sum_w a_w a_r b_rw + a_r^2 (1 - rho^2))

    over the first ``floor(n s)`` ranks.  ``psi1`` uses ``sigma2`` when given
    (scalar or per-rank) and otherwise the conditional residual variance
    ``sigma_y^2 (1 - rho^2)``.  A negative result is returned as is, with a
    :class:`NumericalWarning`.
    """
    if scores.beta is None:
        raise InsufficientTableError("residual variance needs order-statistic covariances")
    k = int(math.floor(scores.n * s + 1e-9))
    if not 1 <= r <= k <= scores.m:
        raise DomainError(f"need 1 <= r <= floor(n s) <= m; got r={r}, k={k}, m={scores.m}")
    a = scores.alpha[:k]
    b = scores.beta[:k, :k]
    n = scores.n
    rho2 = rho * rho
    sa2 = math.fsum(a * a)
    phi = sa2 / n
    sig2 = sigma_y**2 * (1.0 - rho2) if sigma2 is None else sigma2
    psi1 = float(np.sum(a * a * np.broadcast_to(np.asarray(sig2, dtype=float), a.shape)) / n)
    i = r - 1
    ar = a[i]
    v = (rho2 * b[i, i] + (1.0 - rho2)
         + ar * ar * psi1 / (n * sigma_y**2 * phi**2)
         - 2.0 / sa2 * (rho2 * math.fsum(a * ar * b[i, :]) + ar * ar * (1.0 - rho2)))
    if v < 0:
        warnings.warn(f"theoretical residual variance at rank {r} is negative ({v:.3g})",
                      NumericalWarning, stacklevel=2)
    return float(v)


def intercept_check(sample: RankedSample, scores: ScoreTable) -> InterceptFit:
    """Ordinary least squares of the standardized responses on the scores, with intercept."""
    m = sample.m
    if m < 3:
        raise DomainError("the intercept check needs at least 3 ranked responses")
    a = scores.alpha[:m]
    y = sample.std_top
    X = np.column_stack([np.ones(m), a])
    coef, *_ = np.linalg.lstsq(X, y, rcond=None)
    resid = y - X @ coef
    s2 = float(resid @ resid) / (m - 2)
    xtx_inv = np.linalg.inv(X.T @ X)
    se = math.sqrt(max(s2 * xtx_inv[0, 0], 0.0))
    return InterceptFit(float(coef[0]), float(coef[1]), se)


def residual_report(sample: RankedSample, scores: ScoreTable, estimate: Estimate | None = None,
                    *, bands: bool = True) -> ResidualReport:
    """Collect residuals, RSS, intercept check and optional variance bands."""
    if estimate is None:
        estimate = fit_lse(sample, scores)
    e = residuals(sample, scores, estimate)
    tv = None
    if bands and scores.beta is not None:
        s = sample.m / sample.n
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", NumericalWarning)
            tv = np.array([residual_variance_theoretical(scores, estimate.rho_hat, r, s)
                           for r in range(1, sample.m + 1)])
        if np.any(tv < 0):
            warnings.warn("negative theoretical residual variances; bands omitted for those ranks",
                          NumericalWarning, stacklevel=2)
    return ResidualReport(
        residuals=e,
        rss=math.fsum(e * e),
        intercept_fit=intercept_check(sample, scores) if sample.m >= 3 else None,
        per_rank_theoretical_var=tv,
        score_table_id=scores.key,
        alpha=scores.alpha[: sample.m].copy(),
        std_y=sample.std_top,
        rho_hat=estimate.rho_hat,
    )


@dataclass
class CandidateResult:
    label: str
    position: int
    rss: float
    intercept: float
    intercept_z: float
    trend_slope: float
    rho_hat: float
    rank: int = 0


@dataclass
class SelectionReport:
    candidates: list[CandidateResult]

    @property
    def best(self) -> CandidateResult:
        return self.candidates[0]

    def to_dict(self) -> dict:
        return {"ordering": "rss, then |intercept|/stderr, then input position",
                "candidates": [asdict(c) for c in self.candidates]}

    def to_json(self, **kw) -> str:
        return json.dumps(self.to_dict(), **kw)


def _label(table: ScoreTable) -> str:
    return table.dist.label if table.dist is not None else table.method


def select_score(sample: RankedSample, candidates, labels=None) -> SelectionReport:
    """Rank candidate score tables by RSS, then intercept closeness to zero.

    Also reports the slope of the residuals regressed on the scores with an
    intercept, a sign of trend the model leaves unexplained.  Exact ties keep
    the input order.
    """
    candidates = list(candidates)
    if not candidates:
        raise DomainError("select_score needs at least one candidate")
    labels = list(labels) if labels is not None else [_label(t) for t in candidates]
    rows = []
    for pos, (table, label) in enumerate(zip(candidates, labels)):
        est = fit_lse(sample, table)
        e = residuals(sample, table, est)
        a = table.alpha[: sample.m]
        if sample.m >= 3:
            ic = intercept_check(sample, table)
            ac = a - a.mean()
            slope = float(ac @ e / (ac @ ac))
            intercept, iz = ic.intercept, ic.z
        else:
            intercept = iz = slope = float("nan")
        rows.append(CandidateResult(label, pos, math.fsum(e * e), intercept, iz, slope,
                                    est.rho_hat))
    key = lambda c: (c.rss, c.intercept_z if math.isfinite(c.intercept_z) else math.inf,
                     c.position)
    rows.sort(key=key)
    for i, c in enumerate(rows):
        c.rank = i + 1
    return SelectionReport(rows)
