"""Panels of daily partial rankings and the combined test of rho = 0.

Each day t follows

    Y_r = mu_t + sigma_t * rho_t * alpha_r + gamma_t * I(r in E) + noise,

where ``E`` is a small set of top ranks (``{1, 2}`` by default) allowed a
separate shift.  Days are fitted by alternating a gamma step and a
least-squares rho step; the statistics ``U_t = sqrt(n) rho_t`` are then
summed into ``t_rho = sum(U_t) / sqrt(T)`` and standardized by a truncated
autocovariance estimate of its variance.
"""

from __future__ import annotations

import json
import math
import warnings
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy import stats

from .distributions import parse_dist
from .errors import (
    ConvergenceWarning,
    DegenerateDesignError,
    DomainError,
    NumericalWarning,
    PanelRefusedError,
    RankDeficiencyError,
)
from .estimator import RankedSample, dependent_columns
from .scores import ScoreTable

DEFAULT_EXCLUSION = (1, 2)
DEFAULT_TOL = 1e-8
DEFAULT_MAX_ITER = 100
MAX_NONCONVERGED = 0.20


def default_lag(T: int) -> int:
    return int(math.floor(T ** (1.0 / 3.0) + 1e-12))


# -- preprocessing -----------------------------------------------------------

def preprocess_residualize(y, covariates, *, names=None, absolute: bool = True,
                           return_coef: bool = False):
    """Residualize ``y`` on the covariates by least squares with an intercept.

    Returns absolute residuals by default (signed with ``absolute=False``);
    ``return_coef=True`` also returns ``[intercept, slopes...]``.
    """
    y = np.asarray(y, dtype=float).ravel()
    X = np.asarray(covariates, dtype=float)
    if X.ndim == 1:
        X = X[:, None]
    if X.shape[0] != y.size:
        raise DomainError(f"covariates have {X.shape[0]} rows for {y.size} responses")
    q = X.shape[1]
    names = list(names) if names is not None else [f"x{j + 1}" for j in range(q)]
    D = np.column_stack([np.ones(y.size), X])
    if np.linalg.matrix_rank(D) < q + 1:
        bad = dependent_columns(D)
        labels = ["intercept"] + names
        raise RankDeficiencyError(
            "design matrix is rank deficient; dependent columns: "
            + ", ".join(labels[j] for j in bad)
        )
    coef, *_ = np.linalg.lstsq(D, y, rcond=None)
    resid = y - D @ coef
    out = np.abs(resid) if absolute else resid
    return (out, coef) if return_coef else out


# -- per-day fitting ---------------------------------------------------------

@dataclass
class DayFit:
    rho: float
    gamma: float
    iterations: int
    converged: bool
    objective: list = field(default_factory=list)


@dataclass
class DayFits:
    rho: np.ndarray
    gamma: np.ndarray
    iterations: np.ndarray
    converged: np.ndarray


def _exclusion_index(exclusion_ranks, m):
    ex = sorted({int(r) for r in exclusion_ranks})
    if any(not 1 <= r <= m for r in ex):
        raise DomainError(f"exclusion ranks must lie in 1..{m}, got {ex}")
    if m <= len(ex) + 1:
        raise DomainError(f"need m > |exclusion| + 1, got m={m} with {len(ex)} excluded ranks")
    return np.array(ex, dtype=int) - 1


def _objective(y, mu, sigma, a, ind, rho, gamma):
    r = y - mu[:, None] - (sigma * rho)[:, None] * a - gamma[:, None] * ind
    return np.sum(r * r, axis=1)


def fit_days(y_top, mu, sigma, alpha, exclusion_ranks=DEFAULT_EXCLUSION, *,
             tol: float = DEFAULT_TOL, max_iter: int = DEFAULT_MAX_ITER,
             trace: bool = False):
    """Alternating (gamma, rho) fits for many days at once.

    ``y_top`` is T x m in rank order; ``mu`` and ``sigma`` are the per-day
    plug-ins over all n responses.  Each day stops once
    ``|d rho| + |d gamma| < tol``.  The squared-error objective is checked
    to be non-increasing at every step.
    """
    y = np.atleast_2d(np.asarray(y_top, dtype=float))
    T, m = y.shape
    mu = np.asarray(mu, dtype=float).reshape(T)
    sigma = np.asarray(sigma, dtype=float).reshape(T)
    a = np.asarray(alpha, dtype=float)[:m]
    ex = _exclusion_index(exclusion_ranks, m)
    ind = np.zeros(m)
    ind[ex] = 1.0
    keep = np.flatnonzero(ind == 0)

    # preliminary with-intercept regression over the non-excluded ranks
    z = (y[:, keep] - mu[:, None]) / sigma[:, None]
    ak = a[keep] - a[keep].mean()
    rho = (z - z.mean(axis=1, keepdims=True)) @ ak / (ak @ ak)
    gamma = np.zeros(T)
    saa = a @ a
    iters = np.zeros(T, dtype=int)
    active = np.ones(T, dtype=bool)
    obj = _objective(y, mu, sigma, a, ind, rho, gamma)
    history = [obj.copy()] if trace else None

    for _ in range(max_iter):
        if not active.any():
            break
        if ex.size:
            g_new = np.mean(y[:, ex] - mu[:, None] - (sigma * rho)[:, None] * a[ex], axis=1)
        else:
            g_new = np.zeros(T)
        g_new = np.where(active, g_new, gamma)
        obj_g = _objective(y, mu, sigma, a, ind, rho, g_new)
        r_new = ((y - mu[:, None] - g_new[:, None] * ind) @ a) / (sigma * saa)
        r_new = np.where(active, r_new, rho)
        obj_new = _objective(y, mu, sigma, a, ind, r_new, g_new)
        slack = 1e-10 * np.maximum(obj, 1.0)
        if np.any(obj_g > obj + slack) or np.any(obj_new > obj_g + slack):
            warnings.warn("iterative day fit increased its objective", NumericalWarning,
                          stacklevel=2)
        step = np.abs(r_new - rho) + np.abs(g_new - gamma)
        iters = iters + active
        rho, gamma, obj = r_new, g_new, obj_new
        if trace:
            history.append(obj.copy())
        active = active & ~(step < tol)

    fits = DayFits(rho=rho, gamma=gamma, iterations=iters, converged=~active)
    return (fits, history) if trace else fits


def fit_day_iterative(day: RankedSample, scores: ScoreTable,
                      exclusion_ranks=DEFAULT_EXCLUSION, tol: float = DEFAULT_TOL,
                      max_iter: int = DEFAULT_MAX_ITER) -> DayFit:
    """Fit ``(rho_t, gamma_t)`` for one day; non-convergence is flagged, not raised."""
    if scores.m < day.m or scores.n != day.n:
        raise DomainError("score table does not cover this day's ranks")
    fits, hist = fit_days(day.y_top[None, :], [day.mu_hat], [day.sigma_hat], scores.alpha,
                          exclusion_ranks, tol=tol, max_iter=max_iter, trace=True)
    res = DayFit(float(fits.rho[0]), float(fits.gamma[0]), int(fits.iterations[0]),
                 bool(fits.converged[0]), [float(h[0]) for h in hist])
    if not res.converged:
        warnings.warn(f"day fit did not converge in {max_iter} iterations", ConvergenceWarning,
                      stacklevel=2)
    return res


# -- combined statistic ------------------------------------------------------

def combined_statistic(rho_ts, n: int) -> tuple[float, float]:
    """``(t_rho, rho_bar)`` with ``t_rho = sum(sqrt(n) rho_t) / sqrt(T)``."""
    r = np.asarray(rho_ts, dtype=float).ravel()
    T = r.size
    if T == 0:
        raise DomainError("combined statistic needs at least one day")
    u = math.sqrt(n) * r
    return math.fsum(u) / math.sqrt(T), math.fsum(r) / T


def hac_variance(u_ts, lag: int) -> float:
    """``(1/T) sum_{k=0}^{lag} (T - k) cov_k`` with unweighted empirical autocovariances.

    ``cov_k`` is the covariance (divisor T - k) of the pairs
    ``(u_1, u_{1+k}), ..., (u_{T-k}, u_T)``, each coordinate centred by its
    own mean.  A negative total is replaced by the lag-0 term.
    """
    u = np.asarray(u_ts, dtype=float).ravel()
    T = u.size
    lag = int(lag)
    if not 0 <= lag < T:
        raise DomainError(f"lag must satisfy 0 <= lag < T={T}, got {lag}")
    if np.all(u == u[0]):
        return 0.0
    c0 = float(np.var(u))
    terms = [c0]
    for k in range(1, lag + 1):
        a, b = u[: T - k], u[k:]
        ck = float(np.mean((a - a.mean()) * (b - b.mean())))
        terms.append((T - k) / T * ck)
    total = math.fsum(terms)
    if total < 0:
        warnings.warn(f"autocovariance sum is negative ({total:.3g}); using the lag-0 term",
                      NumericalWarning, stacklevel=2)
        return c0
    return total


# -- panel container and test ------------------------------------------------

@dataclass(eq=False)
class PanelSeries:
    """Days sharing n and m, each a :class:`RankedSample`."""

    days: list
    exclusion_ranks: tuple = DEFAULT_EXCLUSION
    covariates: list | None = None
    covariate_names: list | None = None
    labels: list | None = None
    rho_t: np.ndarray | None = None
    gamma_t: np.ndarray | None = None

    def __post_init__(self):
        if not self.days:
            raise DomainError("a panel needs at least one day")
        n, m = self.days[0].n, self.days[0].m
        if any(d.n != n or d.m != m for d in self.days):
            raise DomainError("all days must share n and m")
        self.exclusion_ranks = tuple(sorted({int(r) for r in self.exclusion_ranks}))
        _exclusion_index(self.exclusion_ranks, m)
        if self.labels is None:
            self.labels = list(range(1, len(self.days) + 1))

    @property
    def T(self) -> int:
        return len(self.days)

    @property
    def n(self) -> int:
        return self.days[0].n

    @property
    def m(self) -> int:
        return self.days[0].m

    @classmethod
    def from_arrays(cls, y_top, y_rest, **kw) -> "PanelSeries":
        return cls([RankedSample(t, r) for t, r in zip(y_top, y_rest)], **kw)

    def residualized(self, *, absolute: bool = True) -> "PanelSeries":
        """Replace responses by pooled least-squares residuals on the covariates."""
        if self.covariates is None:
            raise DomainError("panel carries no covariates")
        y = np.concatenate([np.concatenate([d.y_top, d.y_rest]) for d in self.days])
        X = np.concatenate([np.asarray(c, dtype=float) for c in self.covariates])
        res = preprocess_residualize(y, X, names=self.covariate_names, absolute=absolute)
        days, pos = [], 0
        for d in self.days:
            days.append(RankedSample(res[pos: pos + d.m], res[pos + d.m: pos + d.n]))
            pos += d.n
        return PanelSeries(days, self.exclusion_ranks, None, None, list(self.labels))


@dataclass
class CombinedTest:
    t_rho: float
    rho_bar: float
    hac_variance: float
    lag: int
    z: float
    p_value: float
    p_value_greater: float
    pooled_rho_lse: float
    T: int
    n: int
    m: int
    nonconverged_fraction: float
    rho_t: list = field(default_factory=list)
    gamma_t: list = field(default_factory=list)
    converged_t: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self, **kw) -> str:
        return json.dumps(self.to_dict(), **kw)


def pooled_lse(y_top, mu, sigma_pooled, alpha, exclusion_ranks=DEFAULT_EXCLUSION, *,
               tol=DEFAULT_TOL, max_iter=DEFAULT_MAX_ITER) -> float:
    """Common-rho least squares with per-day gamma and a single scale ``sigma_pooled``."""
    y = np.asarray(y_top, dtype=float)
    T, m = y.shape
    a = np.asarray(alpha, dtype=float)[:m]
    ex = _exclusion_index(exclusion_ranks, m)
    ind = np.zeros(m)
    ind[ex] = 1.0
    yc = y - np.asarray(mu)[:, None]
    saa = a @ a
    rho = float(np.sum(yc @ a) / (sigma_pooled * T * saa))
    gamma = np.zeros(T)
    for _ in range(max_iter):
        g_new = yc[:, ex].mean(axis=1) - sigma_pooled * rho * a[ex].mean() if ex.size else gamma
        r_new = float(np.sum((yc - g_new[:, None] * ind) @ a) / (sigma_pooled * T * saa))
        step = abs(r_new - rho) + float(np.max(np.abs(g_new - gamma), initial=0.0))
        rho, gamma = r_new, g_new
        if step < tol:
            break
    return rho


def panel_test(panel: PanelSeries, scores: ScoreTable, lag: int | None = None, *,
               tol: float = DEFAULT_TOL, max_iter: int = DEFAULT_MAX_ITER) -> CombinedTest:
    """Fit every day, combine ``U_t = sqrt(n) rho_t`` and test rho = 0.

    Refuses (raising :class:`PanelRefusedError`) when T < 2 or when more
    than 20% of the days fail to converge.
    """
    T, n, m = panel.T, panel.n, panel.m
    if T < 2:
        raise PanelRefusedError("the combined test needs at least two days")
    if scores.n != n or scores.m < m:
        raise DomainError(f"score table (n={scores.n}, m={scores.m}) does not cover the panel "
                          f"(n={n}, m={m})")
    lag = default_lag(T) if lag is None else int(lag)
    y = np.stack([d.y_top for d in panel.days])
    mu = np.array([d.mu_hat for d in panel.days])
    sigma = np.array([d.sigma_hat for d in panel.days])
    fits = fit_days(y, mu, sigma, scores.alpha, panel.exclusion_ranks, tol=tol,
                    max_iter=max_iter)
    bad = [panel.labels[i] for i in np.flatnonzero(~fits.converged)]
    frac = len(bad) / T
    if frac > MAX_NONCONVERGED:
        raise PanelRefusedError(
            f"{len(bad)} of {T} days did not converge ({frac:.1%} > {MAX_NONCONVERGED:.0%}); "
            f"days: {', '.join(map(str, bad[:20]))}{' ...' if len(bad) > 20 else ''}",
            bad,
        )
    if bad:
        warnings.warn(f"{len(bad)} day fit(s) did not converge: {bad[:10]}", ConvergenceWarning,
                      stacklevel=2)
    panel.rho_t, panel.gamma_t = fits.rho, fits.gamma
    t_rho, rho_bar = combined_statistic(fits.rho, n)
    u = math.sqrt(n) * fits.rho
    v = hac_variance(u, lag)
    if not v > 0:
        raise DegenerateDesignError("estimated variance of the combined statistic is zero")
    z = t_rho / math.sqrt(v)
    sigma_pooled = math.sqrt(float(np.mean(sigma**2)))
    pooled = pooled_lse(y, mu, sigma_pooled, scores.alpha, panel.exclusion_ranks,
                        tol=tol, max_iter=max_iter)
    return CombinedTest(
        t_rho=t_rho,
        rho_bar=rho_bar,
        hac_variance=v,
        lag=lag,
        z=z,
        p_value=float(min(1.0, 2.0 * stats.norm.sf(abs(z)))),
        p_value_greater=float(stats.norm.sf(z)),
        pooled_rho_lse=pooled,
        T=T,
        n=n,
        m=m,
        nonconverged_fraction=frac,
        rho_t=fits.rho.tolist(),
        gamma_t=fits.gamma.tolist(),
        converged_t=fits.converged.tolist(),
    )


# -- synthetic panels --------------------------------------------------------

def synthetic_panel(T: int, n: int, m: int, *, rho=0.0, gamma=0.0, dist_x="pareto(2.3)",
                    exclusion_ranks=DEFAULT_EXCLUSION, seed=0) -> PanelSeries:
    """Independent days of ``Y = beta1 X + eps`` with a ``gamma`` bump on the excluded ranks.

    ``rho`` may be a scalar or a length-T sequence.  Only the top ``m`` of
    each day's ranking is kept; the other responses are returned unranked.
    """
    dist = parse_dist(dist_x)
    rng = np.random.default_rng(np.random.SeedSequence(int(seed)))
    rho_arr = np.broadcast_to(np.asarray(rho, dtype=float), (T,))
    if np.any((rho_arr < 0) | (rho_arr >= 1)):
        raise DomainError("rho must lie in [0, 1)")
    x = dist.sample(rng, (T, n))
    eps = rng.standard_normal((T, n))
    beta1 = rho_arr / np.sqrt(1.0 - rho_arr**2)
    y = beta1[:, None] * x + eps
    top = np.argpartition(-x, m - 1, axis=1)[:, :m]
    order = np.take_along_axis(top, np.argsort(-np.take_along_axis(x, top, axis=1), axis=1), 1)
    ex = np.array(sorted(set(exclusion_ranks)), dtype=int) - 1
    rows = np.arange(T)[:, None]
    if ex.size:
        y[rows, order[:, ex]] += gamma
    mask = np.ones((T, n), dtype=bool)
    mask[rows, order] = False
    y_top = y[rows, order]
    y_rest = y[mask].reshape(T, n - m)
    return PanelSeries.from_arrays(y_top, y_rest, exclusion_ranks=tuple(exclusion_ranks))
