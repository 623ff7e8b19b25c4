"""Distribution-guided rank scores: moments of order statistics.

Two index conventions meet here:

* the ``mos_*`` functions take ``r`` as the *order-statistic position*,
  ``r = 1`` being the sample minimum, so ``alpha`` increases with ``r``;
* a :class:`ScoreTable` is indexed by *rank*, rank 1 being the largest
  covariate (the "top" of a partially observed ranking).  Rank ``k``
  corresponds to position ``n + 1 - k``.

Only the top ``m`` ranks are ever observed, so tables materialize the
``m`` largest order statistics.
"""

from __future__ import annotations

import math
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy import special

from .distributions import DistributionSpec, parse_dist
from .errors import DegenerateDensityError, DomainError, NumericalWarning
from .quadrature import integrate_unit

METHODS = ("exact_quadrature", "david_johnson", "monte_carlo", "identity")
BETA_METHODS = ("monte_carlo", "david_johnson")

MC_BLOCK = 1000
DEFAULT_MC_REPS = 20_000
_BREAK_SDS = (0.5, 1.0, 2.0, 3.0, 5.0, 8.0, 13.0, 21.0, 34.0, 55.0)


def _check_rank(r, n):
    if int(n) != n or n < 1:
        raise DomainError(f"sample size must be a positive integer, got {n}")
    if int(r) != r or not 1 <= r <= n:
        raise DomainError(f"order-statistic index must satisfy 1 <= r <= n, got r={r}, n={n}")
    return int(r), int(n)


def quantile(dist: DistributionSpec, p):
    """Quantile of the standardized member of ``dist``."""
    return parse_dist(dist).quantile(p)


# -- exact quadrature --------------------------------------------------------

def _kernel(r, n):
    log_b = special.betaln(r, n - r + 1)

    def k(u, v):
        logk = -log_b
        if r > 1:
            logk = logk + (r - 1) * np.log(u)
        if n > r:
            logk = logk + (n - r) * np.log(v)
        return np.exp(logk)

    return k


def _breakpoints(r, n):
    mu = r / (n + 1.0)
    sd = math.sqrt(mu * (1.0 - mu) / (n + 2.0))
    pts = [mu]
    for c in _BREAK_SDS:
        pts.extend((mu - c * sd, mu + c * sd))
    return pts


def _right_power(dist, r, n, moment):
    """Substitution power taming ``(1-u)**(n-r) * Q(u)**moment`` at u -> 1."""
    if dist.family != "pareto":
        return 4
    e = (n - r) - moment / dist.params[0]
    return max(4, math.ceil(2.0 / (e + 1.0)))


def mos_exact(dist: DistributionSpec, r: int, n: int, *, tol: float = 1e-11) -> float:
    """Expected ``r``-th order statistic (ascending) of ``n`` draws, by quadrature.

    Integrates ``Q(u) u^(r-1) (1-u)^(n-r) / B(r, n-r+1)`` over (0, 1).
    Raises :class:`~drank.errors.QuadratureError` rather than return an
    inaccurate value.
    """
    r, n = _check_rank(r, n)
    dist = parse_dist(dist)
    if n == 1:
        return 0.0
    kern = _kernel(r, n)
    f = lambda u, v: dist._quantile(u, v) * kern(u, v)
    value, _ = integrate_unit(f, _breakpoints(r, n), abs_tol=tol,
                              right_power=_right_power(dist, r, n, 1))
    return value


def mos_exact_variance(dist: DistributionSpec, r: int, n: int, *, alpha=None,
                       tol: float = 1e-11) -> float:
    """Variance of the ``r``-th order statistic, integrating ``(Q - alpha)^2`` directly."""
    r, n = _check_rank(r, n)
    dist = parse_dist(dist)
    if alpha is None:
        alpha = mos_exact(dist, r, n, tol=tol)
    kern = _kernel(r, n)
    f = lambda u, v: (dist._quantile(u, v) - alpha) ** 2 * kern(u, v)
    value, _ = integrate_unit(f, _breakpoints(r, n), abs_tol=tol,
                              right_power=_right_power(dist, r, n, 2))
    return value


# -- series approximation ----------------------------------------------------

def _dj_terms(dist, r, n):
    p = r / (n + 1.0)
    q = (n + 1.0 - r) / (n + 1.0)
    Q = float(dist._quantile(np.float64(p), np.float64(q)))
    f = float(dist.pdf(Q))
    if not (math.isfinite(f) and f > 0.0):
        raise DegenerateDensityError(
            f"density of {dist.label} vanishes at Q({p:.6g}); use exact or Monte Carlo mode"
        )
    return p, q, Q, f


def mos_approx(dist: DistributionSpec, r: int, n: int) -> float:
    """Two-term quantile expansion of the expected order statistic.

    ``alpha ~ Q_r + p_r q_r / (2 (n + 2)) * Q''(p_r)`` with ``p_r = r/(n+1)``
    and ``Q'' = -f'(Q) / f(Q)^3``.  Accurate to O(1/n^2) only.
    """
    r, n = _check_rank(r, n)
    dist = parse_dist(dist)
    p, q, Q, f = _dj_terms(dist, r, n)
    fp = float(dist.dpdf(Q))
    with np.errstate(over="ignore"):
        q2 = -fp / f**3
    corr = p * q / (2.0 * (n + 2.0)) * q2
    if not math.isfinite(corr) or abs(corr) > max(1.0, abs(Q)):
        raise DegenerateDensityError(
            f"expansion degenerates for {dist.label} at r={r}, n={n} "
            f"(correction {corr:.3g}); use exact or Monte Carlo mode"
        )
    return Q + corr


def _dj_cov(dist, positions, n):
    """First-order covariance approximation ``p_r q_s / ((n+2) f(Q_r) f(Q_s))``, r <= s."""
    terms = [_dj_terms(dist, int(r), n) for r in positions]
    p = np.array([t[0] for t in terms])
    q = np.array([t[1] for t in terms])
    f = np.array([t[3] for t in terms])
    lo = np.minimum.outer(p, p)
    hi_q = np.minimum.outer(q, q)
    return lo * hi_q / ((n + 2.0) * np.outer(f, f))


# -- Monte Carlo -------------------------------------------------------------

@dataclass
class MCResult:
    """Monte Carlo order-statistic moments.

    ``alpha``/``alpha_stderr`` cover all ``n`` positions (ascending);
    ``beta``/``beta_stderr`` cover the top ``m`` in rank order when requested.
    """

    alpha: np.ndarray
    alpha_stderr: np.ndarray
    reps: int
    seed: int
    beta: np.ndarray | None = None
    beta_stderr: np.ndarray | None = None


def _block_stream(seed, block):
    return np.random.default_rng(np.random.SeedSequence(int(seed), spawn_key=(int(block),)))


def _mc_block(args):
    dist_d, n, size, seed, block, m = args
    dist = DistributionSpec.from_dict(dist_d)
    rng = _block_stream(seed, block)
    if dist.symmetric:
        pairs = (size + 1) // 2
        z = np.sort(dist.sample(rng, (pairs, n)), axis=1)
        mirror = -z[:, ::-1]
        units = 0.5 * (z + mirror)
        draws = np.concatenate([z, mirror]) if m else None
    else:
        z = np.sort(dist.sample(rng, (size, n)), axis=1)
        units = z
        draws = z if m else None
    out = {
        "count": units.shape[0],
        "mean": units.mean(axis=0),
        "m2": ((units - units.mean(axis=0)) ** 2).sum(axis=0),
        "draws": units.shape[0] * (2 if dist.symmetric else 1),
    }
    if m:
        top = draws[:, ::-1][:, :m]
        c = np.cov(top, rowvar=False, ddof=1)
        out["cov_count"] = top.shape[0]
        out["cov_mean"] = top.mean(axis=0)
        out["cov_c"] = c * (top.shape[0] - 1)
        out["cov_block"] = c
    return out


def order_stat_mc(dist: DistributionSpec, n: int, reps: int, seed: int, *, m: int = 0,
                  workers: int = 1) -> MCResult:
    """Simulate sorted samples of size ``n``, block by block.

    Replicates are split into fixed blocks of ``MC_BLOCK``; block ``b`` draws
    from a stream seeded by ``(seed, b)``, and blocks are merged in order, so
    the result does not depend on ``workers``.  Symmetric families use
    antithetic pairs; their per-rank standard errors come from pair means.
    With ``m > 0`` the covariance of the top ``m`` order statistics is also
    estimated from the same draws, with a batch-means standard error.
    """
    dist = parse_dist(dist)
    n = int(n)
    if reps < 1000:
        raise DomainError(f"Monte Carlo needs reps >= 1000, got {reps}")
    if not 0 <= m <= n:
        raise DomainError(f"m must lie in [0, n], got {m}")
    sizes = [MC_BLOCK] * (reps // MC_BLOCK)
    if reps % MC_BLOCK:
        sizes.append(reps % MC_BLOCK)
    jobs = [(dist.to_dict(), n, size, seed, b, m) for b, size in enumerate(sizes)]
    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_mc_block, jobs))
    else:
        results = [_mc_block(j) for j in jobs]

    # Chan et al. pairwise merge, in block order
    count, mean, m2 = 0, np.zeros(n), np.zeros(n)
    ccount, cmean, cc = 0, np.zeros(m), np.zeros((m, m))
    bsum, bsq = np.zeros((m, m)), np.zeros((m, m))
    draws = 0
    for res in results:
        nb = res["count"]
        delta = res["mean"] - mean
        tot = count + nb
        mean = mean + delta * nb / tot
        m2 = m2 + res["m2"] + delta**2 * count * nb / tot
        count = tot
        draws += res["draws"]
        if m:
            nb = res["cov_count"]
            delta = res["cov_mean"] - cmean
            tot = ccount + nb
            cc = cc + res["cov_c"] + np.outer(delta, delta) * ccount * nb / tot
            cmean = cmean + delta * nb / tot
            ccount = tot
            bsum += res["cov_block"]
            bsq += res["cov_block"] ** 2
    stderr = np.sqrt(m2 / (count - 1) / count)
    out = MCResult(alpha=mean, alpha_stderr=stderr, reps=draws, seed=int(seed))
    if m:
        out.beta = cc / (ccount - 1)
        k = len(results)
        if k > 1:
            var_b = np.maximum(bsq / k - (bsum / k) ** 2, 0.0) * k / (k - 1)
            out.beta_stderr = np.sqrt(var_b / k)
        else:
            out.beta_stderr = np.full((m, m), np.nan)
    return out


def mos_mc(dist: DistributionSpec, n: int, reps: int, seed: int, *, workers: int = 1):
    """Monte Carlo expected order statistics: ``(alpha, stderr)`` over positions 1..n."""
    res = order_stat_mc(dist, n, reps, seed, workers=workers)
    return res.alpha, res.alpha_stderr


def cov_os(dist: DistributionSpec, n: int, m: int, method: str = "monte_carlo", *,
           reps: int = DEFAULT_MC_REPS, seed: int = 0, workers: int = 1) -> np.ndarray:
    """Covariance matrix of the top ``m`` order statistics, in rank order.

    ``method`` is ``"monte_carlo"`` (the default and the reference) or
    ``"david_johnson"`` for the first-order approximation.
    """
    dist = parse_dist(dist)
    if not 1 <= m <= n:
        raise DomainError(f"need 1 <= m <= n, got m={m}, n={n}")
    if method == "david_johnson":
        positions = np.arange(n, n - m, -1)
        return _dj_cov(dist, positions, n)
    if method == "monte_carlo":
        return order_stat_mc(dist, n, reps, seed, m=m, workers=workers).beta
    raise DomainError(f"unsupported covariance method {method!r}; choose from {BETA_METHODS}")


# -- score tables ------------------------------------------------------------

@dataclass(eq=False)
class ScoreTable:
    """Scores for ranks 1..m of a sample of size n (rank 1 = largest).

    ``alpha[k]`` is the expected order statistic at position ``n - k``, so the
    array decreases with rank.  ``alpha_tail_mean`` is the mean score of the
    unobserved ranks m+1..n, recovered from the zero-sum identity.
    """

    n: int
    m: int
    alpha: np.ndarray
    method: str
    dist: DistributionSpec | None = None
    sigma2: np.ndarray | None = None
    beta: np.ndarray | None = None
    alpha_stderr: np.ndarray | None = None
    mc_reps: int | None = None
    seed: int | None = None
    beta_method: str | None = None
    alpha_tail_mean: float | None = field(default=None)

    def __post_init__(self):
        self.alpha = np.asarray(self.alpha, dtype=float)
        if not 1 <= self.m <= self.n or self.alpha.shape != (self.m,):
            raise DomainError(f"alpha must hold m={self.m} scores with 1 <= m <= n={self.n}")
        if self.method not in METHODS:
            raise DomainError(f"unknown method {self.method!r}")
        for name in ("sigma2", "alpha_stderr"):
            val = getattr(self, name)
            if val is not None:
                setattr(self, name, np.asarray(val, dtype=float))
        if self.beta is not None:
            self.beta = np.asarray(self.beta, dtype=float)
            if self.beta.shape != (self.m, self.m):
                raise DomainError("beta must be m x m")
        if self.alpha_tail_mean is None and self.m < self.n:
            self.alpha_tail_mean = -math.fsum(self.alpha) / (self.n - self.m)

    @property
    def positions(self) -> np.ndarray:
        """Ascending order-statistic positions of ranks 1..m."""
        return self.n - np.arange(self.m)

    @property
    def key(self) -> str:
        from .cache import table_key

        return table_key(self.dist, self.n, self.m, self.method, self._options())

    def _options(self):
        return {
            "moments": self.sigma2 is not None,
            "beta_method": self.beta_method,
            "reps": self.mc_reps,
            "seed": self.seed,
        }

    def head(self, m: int) -> "ScoreTable":
        """The same scores restricted to ranks 1..m."""
        if not 1 <= m <= self.m:
            raise DomainError(f"cannot take {m} ranks from a table with m={self.m}")
        return ScoreTable(
            n=self.n,
            m=m,
            alpha=self.alpha[:m],
            method=self.method,
            dist=self.dist,
            sigma2=None if self.sigma2 is None else self.sigma2[:m],
            beta=None if self.beta is None else self.beta[:m, :m],
            alpha_stderr=None if self.alpha_stderr is None else self.alpha_stderr[:m],
            mc_reps=self.mc_reps,
            seed=self.seed,
            beta_method=self.beta_method,
            alpha_tail_mean=None if m == self.n else -math.fsum(self.alpha[:m]) / (self.n - m),
        )

    def validate(self, tol: float = 1e-8) -> list[str]:
        """Return a list of violated invariants (empty when the table is sound)."""
        problems = []
        if np.any(np.diff(self.alpha) >= 0):
            problems.append("alpha is not strictly decreasing in rank")
        if self.m == self.n and abs(math.fsum(self.alpha)) > tol * max(1, self.n):
            problems.append("scores do not sum to zero")
        if math.fsum(self.alpha**2) / self.n > 1 + tol:
            problems.append("mean squared score exceeds 1")
        if self.beta is not None:
            if not np.allclose(self.beta, self.beta.T, rtol=0, atol=1e-12):
                problems.append("beta is not symmetric")
            if np.any(np.diag(self.beta) < 0):
                problems.append("beta has a negative diagonal entry")
        return problems

    def to_dict(self) -> dict:
        arr = lambda a: None if a is None else np.asarray(a).tolist()
        return {
            "n": self.n,
            "m": self.m,
            "method": self.method,
            "dist": None if self.dist is None else self.dist.to_dict(),
            "alpha": arr(self.alpha),
            "alpha_tail_mean": self.alpha_tail_mean,
            "sigma2": arr(self.sigma2),
            "beta": arr(self.beta),
            "alpha_stderr": arr(self.alpha_stderr),
            "mc_reps": self.mc_reps,
            "seed": self.seed,
            "beta_method": self.beta_method,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ScoreTable":
        opt = lambda k: None if d.get(k) is None else np.asarray(d[k], dtype=float)
        return cls(
            n=int(d["n"]),
            m=int(d["m"]),
            alpha=np.asarray(d["alpha"], dtype=float),
            method=d["method"],
            dist=None if d.get("dist") is None else DistributionSpec.from_dict(d["dist"]),
            sigma2=opt("sigma2"),
            beta=opt("beta"),
            alpha_stderr=opt("alpha_stderr"),
            mc_reps=d.get("mc_reps"),
            seed=d.get("seed"),
            beta_method=d.get("beta_method"),
            alpha_tail_mean=d.get("alpha_tail_mean"),
        )

    def to_csv(self, path_or_buf) -> None:
        """Write ``rank, alpha[, sigma2][, stderr]`` with 17 significant digits."""
        cols = ["rank", "alpha"]
        data = [np.arange(1, self.m + 1), self.alpha]
        if self.sigma2 is not None:
            cols.append("sigma2")
            data.append(self.sigma2)
        if self.alpha_stderr is not None:
            cols.append("stderr")
            data.append(self.alpha_stderr)
        lines = [",".join(cols)]
        for i in range(self.m):
            row = [str(i + 1)] + [format(float(col[i]), ".17g") for col in data[1:]]
            lines.append(",".join(row))
        text = "\n".join(lines) + "\n"
        if hasattr(path_or_buf, "write"):
            path_or_buf.write(text)
        else:
            with open(path_or_buf, "w") as fh:
                fh.write(text)


def identity_scores(n: int, m: int | None = None) -> ScoreTable:
    """Identity scores ``S(r) = r`` standardized to mean 0, variance 1 over all n ranks.

    Standardizing over the full ranking (divisor n) puts the identity scores
    on the same footing as a standardized family's scores; they then differ
    from the uniform scores only by the factor ``(n+1) / sqrt(n^2 - 1)``.
    """
    m = n if m is None else m
    if not 1 <= m <= n:
        raise DomainError(f"need 1 <= m <= n, got m={m}, n={n}")
    if n < 2:
        raise DomainError("identity scores need n >= 2")
    pos = n - np.arange(m, dtype=float)
    alpha = (pos - (n + 1) / 2.0) / math.sqrt((n * n - 1) / 12.0)
    return ScoreTable(n=n, m=m, alpha=alpha, method="identity")


def build_score_table(dist, n: int, m: int | None = None, method: str = "exact_quadrature", *,
                      moments: bool = False, beta_method: str = "monte_carlo",
                      reps: int = DEFAULT_MC_REPS, seed: int = 0, workers: int = 1,
                      cache_dir=None, use_cache: bool = True) -> ScoreTable:
    """Scores for the top ``m`` ranks of a sample of size ``n``.

    ``method`` selects how ``alpha`` is computed.  With ``moments=True`` the
    table also carries ``sigma2`` (order-statistic variances) and ``beta``
    (their covariances), the latter by ``beta_method``.  Results are cached
    on disk unless ``use_cache`` is false.
    """
    if isinstance(dist, str) and dist.strip().lower() == "identity":
        return identity_scores(n, m)
    dist = parse_dist(dist)
    n = int(n)
    m = n if m is None else int(m)
    if not 1 <= m <= n:
        raise DomainError(f"need 1 <= m <= n, got m={m}, n={n}")
    if method not in METHODS or method == "identity":
        raise DomainError(f"unknown score method {method!r}")
    if beta_method not in BETA_METHODS:
        raise DomainError(f"unknown covariance method {beta_method!r}")
    uses_mc = method == "monte_carlo" or (moments and beta_method == "monte_carlo")
    options = {
        "moments": moments,
        "beta_method": beta_method if moments else None,
        "reps": reps if uses_mc else None,
        "seed": seed if uses_mc else None,
    }

    from . import cache

    if use_cache:
        hit = cache.load(dist, n, m, method, options, cache_dir)
        if hit is not None:
            return hit

    positions = np.arange(n, n - m, -1)
    sigma2 = beta = stderr = None
    mc = None
    if uses_mc:
        mc = order_stat_mc(dist, n, reps, seed, m=m if moments else 0, workers=workers)

    if method == "exact_quadrature":
        alpha = np.array([mos_exact(dist, int(r), n) for r in positions])
        if moments:
            sigma2 = np.array([mos_exact_variance(dist, int(r), n, alpha=a)
                               for r, a in zip(positions, alpha)])
    elif method == "david_johnson":
        alpha = np.array([mos_approx(dist, int(r), n) for r in positions])
        if moments:
            sigma2 = np.diag(_dj_cov(dist, positions, n)).copy()
    else:
        alpha = mc.alpha[positions - 1]
        stderr = mc.alpha_stderr[positions - 1]
        if moments:
            sigma2 = np.diag(mc.beta).copy()

    if moments:
        beta = mc.beta if beta_method == "monte_carlo" else _dj_cov(dist, positions, n)

    table = ScoreTable(
        n=n, m=m, alpha=alpha, method=method, dist=dist, sigma2=sigma2, beta=beta,
        alpha_stderr=stderr,
        mc_reps=mc.reps if mc is not None else None,
        seed=seed if uses_mc else None,
        beta_method=options["beta_method"],
    )
    problems = table.validate()
    if problems:
        warnings.warn(f"score table for {dist.label}: {'; '.join(problems)}", NumericalWarning,
                      stacklevel=2)
    if use_cache:
        cache.store(table, options, cache_dir)
    return table
