"""Least-squares estimation of the correlation from partially observed ranks.

The observed data are the responses attached to ranks 1..m (rank 1 = the
largest covariate) plus the responses of the n - m unranked units.  With
scores ``alpha`` for the observed ranks the estimator is

    rho_hat = sum(alpha * (y_top - mu_hat)) / (sigma_hat * sum(alpha**2))

where ``mu_hat`` and ``sigma_hat`` (divisor n) use all n responses.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy import stats

from .errors import (
    DegenerateDesignError,
    DomainError,
    InsufficientTableError,
    RankDeficiencyError,
)
from .scores import ScoreTable

ALTERNATIVES = ("two_sided", "greater")
SIGMA2_CONVENTIONS = ("conditional", "order_stat")


@dataclass(eq=False)
class RankedSample:
    """Responses ordered by covariate rank, top ``m`` observed.

    ``y_top[k]`` is the response of rank ``k + 1``; ``y_rest`` holds the
    responses whose rank is only known to exceed m (in any order).
    """

    y_top: np.ndarray
    y_rest: np.ndarray = field(default_factory=lambda: np.empty(0))
    n: int = field(init=False)
    m: int = field(init=False)
    mu_hat: float = field(init=False)
    sigma_hat: float = field(init=False)

    def __post_init__(self):
        self.y_top = np.asarray(self.y_top, dtype=float).ravel()
        self.y_rest = np.asarray(self.y_rest, dtype=float).ravel()
        if self.y_top.size == 0:
            raise DomainError("a ranked sample needs at least one ranked response")
        if not (np.all(np.isfinite(self.y_top)) and np.all(np.isfinite(self.y_rest))):
            raise DomainError("responses must be finite")
        self.m = self.y_top.size
        self.n = self.m + self.y_rest.size
        y = np.concatenate([self.y_top, self.y_rest])
        self.mu_hat = math.fsum(y) / self.n
        self.sigma_hat = math.sqrt(math.fsum((y - self.mu_hat) ** 2) / self.n)
        if not self.sigma_hat > 0:
            raise DomainError("responses have zero variance")

    @classmethod
    def from_ranked(cls, y_by_rank, m: int | None = None) -> "RankedSample":
        """Build from all n responses sorted by rank, keeping ranks 1..m."""
        y = np.asarray(y_by_rank, dtype=float)
        m = y.size if m is None else int(m)
        if not 1 <= m <= y.size:
            raise DomainError(f"need 1 <= m <= n, got m={m}, n={y.size}")
        return cls(y[:m], y[m:])

    def censor(self, m: int) -> "RankedSample":
        """Keep only ranks 1..m; the responses of ranks beyond m become unranked."""
        if not 1 <= m <= self.m:
            raise DomainError(f"cannot censor to m={m} from m={self.m}")
        return RankedSample(self.y_top[:m], np.concatenate([self.y_top[m:], self.y_rest]))

    @property
    def std_top(self) -> np.ndarray:
        """Standardized responses ``(y_top - mu_hat) / sigma_hat``."""
        return (self.y_top - self.mu_hat) / self.sigma_hat

    def digest(self) -> str:
        h = hashlib.sha256()
        h.update(np.ascontiguousarray(self.y_top).tobytes())
        h.update(b"|")
        h.update(np.ascontiguousarray(np.sort(self.y_rest)).tobytes())
        return h.hexdigest()[:16]


@dataclass(frozen=True)
class VarianceComponents:
    psi1: float
    psi2: float
    phi: float


@dataclass
class Estimate:
    rho_hat: float
    s: float
    n: int
    m: int
    variance_components: VarianceComponents
    asym_var: float
    std_err: float
    t_stat: float
    p_value: float
    method: str
    alternative: str = "two_sided"
    exceeds_unit: bool = False
    sigma2_convention: str = "conditional"
    psi2_beta_power: int = 2
    provenance: dict = field(default_factory=dict)

    @property
    def test_statistic(self) -> float:
        """``sqrt(n) * rho_hat``, before standardization by ``sqrt(phi)``."""
        return math.sqrt(self.n) * self.rho_hat

    def conf_int(self, level: float = 0.95) -> tuple[float, float]:
        z = stats.norm.isf((1 - level) / 2)
        return self.rho_hat - z * self.std_err, self.rho_hat + z * self.std_err

    def to_dict(self) -> dict:
        d = asdict(self)
        d["variance_components"] = asdict(self.variance_components)
        return d

    def to_json(self, **kw) -> str:
        return json.dumps(self.to_dict(), **kw)


# -- variance formulas -------------------------------------------------------

def _n_ranks(n: int, s: float) -> int:
    return int(math.floor(n * s + 1e-9))


def variance_components(scores: ScoreTable, s: float, *, sigma2=None,
                        psi2_beta_power: int = 2) -> VarianceComponents:
    """Finite-n sums over the first ``floor(n s)`` ranks.

    ``psi1 = sum(alpha^2 sigma2) / n``, ``psi2 = sum_ij alpha_i alpha_j beta_ij^p / n``
    and ``phi = sum(alpha^2) / n``.  ``sigma2`` defaults to the table's
    order-statistic variances; a scalar or array overrides it.  The power
    ``p`` on beta is ``psi2_beta_power`` (1 or 2).
    """
    if psi2_beta_power not in (1, 2):
        raise DomainError("psi2_beta_power must be 1 or 2")
    k = _n_ranks(scores.n, s)
    if not 0 <= k <= scores.m:
        raise InsufficientTableError(f"table has {scores.m} ranks, {k} needed for s={s}")
    if sigma2 is None:
        if scores.sigma2 is None:
            raise InsufficientTableError("score table carries no order-statistic variances")
        sigma2 = scores.sigma2[:k]
    if scores.beta is None:
        raise InsufficientTableError("score table carries no order-statistic covariances")
    a = scores.alpha[:k]
    n = scores.n
    sig2 = np.broadcast_to(np.asarray(sigma2, dtype=float), a.shape)
    b = scores.beta[:k, :k] ** psi2_beta_power
    return VarianceComponents(
        psi1=float(np.sum(a * a * sig2) / n),
        psi2=float(a @ b @ a / n),
        phi=float(np.sum(a * a) / n),
    )


def asymptotic_variance(components: VarianceComponents, rho: float, sigma_y: float) -> float:
    """``(psi1 / sigma_y^2 + rho^2 psi2) / phi^2``, the limiting variance of sqrt(n)(rho_hat - rho)."""
    c = components
    if not c.phi > 0:
        raise DegenerateDesignError("phi must be positive")
    return (c.psi1 / sigma_y**2 + rho**2 * c.psi2) / c.phi**2


def _p_value(z: float, alternative: str) -> float:
    if alternative == "two_sided":
        return float(min(1.0, 2.0 * stats.norm.sf(abs(z))))
    if alternative == "greater":
        return float(stats.norm.sf(z))
    raise DomainError(f"alternative must be one of {ALTERNATIVES}")


def test_rho_zero(estimate: Estimate, alternative: str = "two_sided") -> float:
    """Normal-reference p-value for rho = 0 using ``sqrt(n) rho_hat sqrt(phi)``."""
    z = estimate.test_statistic * math.sqrt(estimate.variance_components.phi)
    return _p_value(z, alternative)


test_rho_zero.__test__ = False  # not a pytest test despite the name


# -- fits --------------------------------------------------------------------

def _check_inputs(sample: RankedSample, scores: ScoreTable) -> np.ndarray:
    if scores.n != sample.n:
        raise DomainError(f"score table is for n={scores.n}, sample has n={sample.n}")
    if scores.m < sample.m:
        raise InsufficientTableError(f"score table has {scores.m} ranks, sample needs {sample.m}")
    alpha = scores.alpha[: sample.m]
    if not np.sum(alpha * alpha) > 0:
        raise DegenerateDesignError("scores of the observed ranks are all zero")
    return alpha


def _conditional_sigma2(rho, sigma_y):
    return sigma_y**2 * (1.0 - min(rho * rho, 1.0))


def _finish(rho, alpha_eff, beta_eff, sample, scores, *, method, alternative,
            sigma2_convention, psi2_beta_power, sigma2_eff=None):
    n = sample.n
    phi = float(np.sum(alpha_eff**2) / n)
    if sigma2_convention == "conditional":
        sig2 = _conditional_sigma2(rho, sample.sigma_hat)
    elif sigma2_convention == "order_stat":
        sig2 = sigma2_eff
    else:
        raise DomainError(f"sigma2_convention must be one of {SIGMA2_CONVENTIONS}")
    psi1 = float(np.sum(alpha_eff**2 * sig2) / n) if sig2 is not None else float("nan")
    if beta_eff is not None:
        psi2 = float(alpha_eff @ (beta_eff**psi2_beta_power) @ alpha_eff / n)
    else:
        psi2 = float("nan")
    comps = VarianceComponents(psi1, psi2, phi)
    avar = asymptotic_variance(comps, rho, sample.sigma_hat)
    if math.isfinite(avar) and avar < 0:
        avar = 0.0
    z = math.sqrt(n) * rho * math.sqrt(phi)
    return Estimate(
        rho_hat=float(rho),
        s=sample.m / n,
        n=n,
        m=sample.m,
        variance_components=comps,
        asym_var=float(avar),
        std_err=float(math.sqrt(avar / n)) if math.isfinite(avar) else float("nan"),
        t_stat=float(z),
        p_value=_p_value(z, alternative),
        method=method,
        alternative=alternative,
        exceeds_unit=bool(abs(rho) > 1.0),
        sigma2_convention=sigma2_convention,
        psi2_beta_power=psi2_beta_power,
        provenance={"sample": sample.digest(), "scores": scores.key},
    )


def _lse_value(sample, alpha):
    num = math.fsum(alpha * (sample.y_top - sample.mu_hat))
    return num / (sample.sigma_hat * math.fsum(alpha * alpha))


def fit_lse(sample: RankedSample, scores: ScoreTable, *, alternative: str = "two_sided",
            sigma2_convention: str = "conditional", psi2_beta_power: int = 2) -> Estimate:
    """Least-squares estimate of rho from the top ``m`` ranks.

    The estimate is never truncated to [-1, 1]; ``exceeds_unit`` flags it.
    Standard errors need ``beta`` in the table (and ``sigma2`` under the
    ``"order_stat"`` convention); otherwise they are NaN while the test of
    rho = 0, which needs only the scores, is still reported.
    """
    alpha = _check_inputs(sample, scores)
    rho = _lse_value(sample, alpha)
    m = sample.m
    beta = None if scores.beta is None else scores.beta[:m, :m]
    sig2 = None if scores.sigma2 is None else scores.sigma2[:m]
    return _finish(rho, alpha, beta, sample, scores, method="lse", alternative=alternative,
                   sigma2_convention=sigma2_convention, psi2_beta_power=psi2_beta_power,
                   sigma2_eff=sig2)


def fit_modified(sample: RankedSample, scores: ScoreTable, *, alternative: str = "two_sided",
                 sigma2_convention: str = "conditional", psi2_beta_power: int = 2) -> Estimate:
    """Estimator that also uses the unranked responses through their mean.

    The unranked block contributes ``(n - m) * abar * (ybar_rest - mu_hat)``
    to the numerator and ``(n - m) * abar^2`` to the denominator, where
    ``abar`` is the mean score of ranks m+1..n.  With m = n it reduces to
    :func:`fit_lse` exactly.
    """
    alpha = _check_inputs(sample, scores)
    n, m = sample.n, sample.m
    if m == n:
        est = fit_lse(sample, scores, alternative=alternative,
                      sigma2_convention=sigma2_convention, psi2_beta_power=psi2_beta_power)
        est.method = "modified"
        return est
    abar = -math.fsum(scores.alpha[:m]) / (n - m) if scores.m != m else scores.alpha_tail_mean
    if abar is None:
        raise InsufficientTableError("score table lacks the mean score of the unranked block")
    k = n - m
    ybar = float(np.mean(sample.y_rest))
    num = math.fsum(alpha * (sample.y_top - sample.mu_hat)) + k * abar * (ybar - sample.mu_hat)
    den = math.fsum(alpha * alpha) + k * abar * abar
    rho = num / (sample.sigma_hat * den)

    alpha_full = np.concatenate([alpha, np.full(k, abar)])
    beta = scores.beta if (scores.beta is not None and scores.m == n) else None
    sig2 = scores.sigma2 if (scores.sigma2 is not None and scores.m == n) else None
    if sigma2_convention == "order_stat" and sig2 is None:
        sig2 = None
    return _finish(rho, alpha_full, beta, sample, scores, method="modified",
                   alternative=alternative, sigma2_convention=sigma2_convention,
                   psi2_beta_power=psi2_beta_power, sigma2_eff=sig2)


def fit_multiple(sample: RankedSample, z_covariates, scores: ScoreTable, *,
                 centering: str = "top", names=None):
    """Point estimates ``(delta_hat, eta_hat)`` for a rank score plus covariates.

    Solves the (q+1) normal equations with covariates centred by their mean
    over the observed ranks.  ``centering="top"`` centres the response by its
    mean over ranks 1..m; ``"mu_hat"`` uses the full-sample mean instead.
    ``delta_hat`` is on the response scale (divide by ``sigma_hat`` to
    compare with ``rho_hat``).  No standard errors are produced.
    """
    alpha = _check_inputs(sample, scores)
    m = sample.m
    Z = np.asarray(z_covariates, dtype=float)
    if Z.ndim == 1:
        Z = Z.reshape(m, -1) if Z.size else np.empty((m, 0))
    if Z.shape[0] != m:
        raise DomainError(f"covariates must have m={m} rows aligned to ranks, got {Z.shape[0]}")
    q = Z.shape[1]
    names = list(names) if names is not None else [f"z{j + 1}" for j in range(q)]
    if centering == "top":
        yc = sample.y_top - sample.y_top.mean()
    elif centering == "mu_hat":
        yc = sample.y_top - sample.mu_hat
    else:
        raise DomainError("centering must be 'top' or 'mu_hat'")
    Zc = Z - Z.mean(axis=0) if q else Z

    A = np.empty((q + 1, q + 1))
    A[0, 0] = alpha @ alpha
    A[0, 1:] = alpha @ Zc
    A[1:, 0] = A[0, 1:]
    A[1:, 1:] = Zc.T @ Zc
    b = np.concatenate([[alpha @ yc], Zc.T @ yc])

    if q:
        ZZ = A[1:, 1:]
        rank = np.linalg.matrix_rank(ZZ)
        if rank < q:
            bad = dependent_columns(Zc)
            raise RankDeficiencyError(
                f"covariate block is rank deficient (rank {rank} < {q}); "
                f"dependent columns: {', '.join(names[j] for j in bad)}"
            )
        if np.linalg.matrix_rank(A) < q + 1:
            raise RankDeficiencyError("cross block: scores are collinear with the centred covariates")
    sol = np.linalg.solve(A, b)
    return float(sol[0]), sol[1:]


def dependent_columns(X) -> list[int]:
    """Indices of columns that add no rank when appended left to right."""
    bad, kept = [], []
    for j in range(X.shape[1]):
        trial = kept + [j]
        if np.linalg.matrix_rank(X[:, trial]) < len(trial):
            bad.append(j)
        else:
            kept.append(j)
    return bad


def lse_batch(y_top, mu, sigma, alpha) -> np.ndarray:
    """Vectorized estimator over replicate rows of ``y_top`` (shape reps x m)."""
    y_top = np.asarray(y_top, dtype=float)
    alpha = np.asarray(alpha, dtype=float)
    num = (y_top - np.asarray(mu)[..., None]) @ alpha
    return num / (np.asarray(sigma) * (alpha @ alpha))
