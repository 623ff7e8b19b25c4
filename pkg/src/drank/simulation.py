"""Monte Carlo studies of the rank-score estimator.

Data follow ``Y = beta1 * X + eps`` with ``X`` standardized from a chosen
family, ``eps ~ N(0, 1)`` and ``beta1 = rho / sqrt(1 - rho^2)``, so that
``corr(X, Y) = rho``.  Responses are ordered by decreasing ``X``.

Every replicate draws from its own stream seeded by
``(seed, cell, replicate)``; a cell here is a (data distribution, rho)
pair, so all score candidates and all ``m`` in that cell see the same
datasets.  Results therefore do not depend on how work is split across
processes.
"""

from __future__ import annotations

import hashlib
import io
import json
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .distributions import DistributionSpec, parse_dist
from .errors import DomainError
from .estimator import RankedSample, lse_batch
from .scores import ScoreTable, build_score_table, identity_scores

FAST_REPS = 200
DEFAULT_REPS = 1000
DEFAULT_CANDIDATES = ("identity", "uniform", "normal", "gamma(3,3)")


def _cell_key(dist_x: DistributionSpec, rho: float) -> int:
    """Stable 32-bit key for a (distribution, rho) cell."""
    text = f"{dist_x.label}|{rho!r}"
    return int.from_bytes(hashlib.sha256(text.encode()).digest()[:4], "little")


def _rep_rng(seed, cell: int, rep: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(int(seed), spawn_key=(cell, rep)))


def _draw_xy(dist_x, n, rho, rng):
    """Covariate and response pairs sorted by decreasing covariate."""
    x = dist_x.sample(rng, n)
    eps = rng.standard_normal(n)
    beta1 = rho / math.sqrt(1.0 - rho * rho)
    y = beta1 * x + eps
    order = np.argsort(-x, kind="stable")
    return x[order], y[order]


def _draw(dist_x, n, rho, rng):
    return _draw_xy(dist_x, n, rho, rng)[1]


def gen_dataset(dist_x, n: int, rho: float, seed) -> tuple[RankedSample, float]:
    """One dataset with all ``n`` ranks observed, responses in rank order."""
    dist_x = parse_dist(dist_x)
    if not 0 <= rho < 1:
        raise DomainError(f"rho must lie in [0, 1), got {rho}")
    rng = np.random.default_rng(seed)
    return RankedSample.from_ranked(_draw(dist_x, int(n), rho, rng)), rho


def replicate_responses(dist_x, n: int, rho: float, reps: int, seed, *, start: int = 0) -> np.ndarray:
    """Responses (reps x n, rank order) for replicates ``start .. start+reps-1`` of a cell."""
    dist_x = parse_dist(dist_x)
    if not 0 <= rho < 1:
        raise DomainError(f"rho must lie in [0, 1), got {rho}")
    cell = _cell_key(dist_x, rho)
    out = np.empty((reps, n))
    for i in range(reps):
        out[i] = _draw(dist_x, n, rho, _rep_rng(seed, cell, start + i))
    return out


# -- configuration and report ------------------------------------------------

@dataclass
class SimConfig:
    dist_x: DistributionSpec
    rho_values: list
    n: int
    m_values: list
    score_candidates: list = field(default_factory=lambda: list(DEFAULT_CANDIDATES))
    reps: int = DEFAULT_REPS
    seed: int = 0
    score_method: str = "exact_quadrature"
    identity_scaling: str = "full"
    workers: int = 1

    def __post_init__(self):
        self.dist_x = parse_dist(self.dist_x)
        self.rho_values = [float(r) for r in self.rho_values]
        self.m_values = [int(m) for m in self.m_values]
        self.n = int(self.n)
        self.score_candidates = [c if isinstance(c, str) else c.label for c in self.score_candidates]
        if self.reps < 1:
            raise DomainError("reps must be at least 1")
        if not self.m_values or any(not 1 <= m <= self.n for m in self.m_values):
            raise DomainError(f"every m must satisfy 1 <= m <= n={self.n}")
        if any(not 0 <= r < 1 for r in self.rho_values):
            raise DomainError("rho values must lie in [0, 1)")
        if self.identity_scaling not in ("full", "top"):
            raise DomainError("identity_scaling must be 'full' or 'top'")
        if not self.score_candidates:
            raise DomainError("at least one score candidate is required")

    def to_dict(self) -> dict:
        return {
            "dist_x": self.dist_x.label,
            "rho_values": self.rho_values,
            "n": self.n,
            "m_values": self.m_values,
            "score_candidates": self.score_candidates,
            "reps": self.reps,
            "seed": self.seed,
            "score_method": self.score_method,
            "identity_scaling": self.identity_scaling,
        }


@dataclass
class Cell:
    dist_x: str
    score: str
    rho: float
    n: int
    m: int
    reps: int
    failures: int
    bias: float
    mse: float
    mc_stderr_bias: float
    mc_stderr_mse: float


CELL_FIELDS = list(Cell.__dataclass_fields__)


@dataclass
class SimReport:
    cells: list[Cell]
    seed: int
    reps: int
    config_digest: str = ""

    def cell(self, *, score, rho, m, dist_x=None) -> Cell:
        for c in self.cells:
            if (c.score == score and c.rho == rho and c.m == m
                    and (dist_x is None or c.dist_x == dist_x)):
                return c
        raise KeyError((score, rho, m, dist_x))

    def merge(self, other: "SimReport") -> "SimReport":
        digest = self.config_digest if self.config_digest == other.config_digest else \
            hashlib.sha256((self.config_digest + other.config_digest).encode()).hexdigest()[:16]
        return SimReport(self.cells + other.cells, self.seed, self.reps, digest)

    def to_csv(self, path_or_buf=None) -> str:
        buf = io.StringIO()
        buf.write(f"# run_config_digest={self.config_digest}\n")
        buf.write(",".join(CELL_FIELDS) + "\n")
        for c in self.cells:
            row = []
            for name in CELL_FIELDS:
                v = getattr(c, name)
                row.append(format(v, ".17g") if isinstance(v, float) else str(v))
            buf.write(",".join(row) + "\n")
        text = buf.getvalue()
        if path_or_buf is not None:
            if hasattr(path_or_buf, "write"):
                path_or_buf.write(text)
            else:
                with open(path_or_buf, "w") as fh:
                    fh.write(text)
        return text

    def format_table(self) -> str:
        """Bias/MSE grid: rows (m, rho, score), one column pair per data distribution."""
        dists = list(dict.fromkeys(c.dist_x for c in self.cells))
        ms = sorted({c.m for c in self.cells})
        rhos = sorted({c.rho for c in self.cells})
        scores = list(dict.fromkeys(c.score for c in self.cells))
        index = {(c.dist_x, c.score, c.rho, c.m): c for c in self.cells}
        head = f"{'m':>5} {'rho':>4} {'score':>12}" + "".join(
            f" | {d:^17}" for d in dists)
        sub = f"{'':>5} {'':>4} {'':>12}" + "".join(f" | {'bias':>8} {'mse':>8}" for _ in dists)
        lines = [head, sub, "-" * len(head)]
        for m in ms:
            for rho in rhos:
                for s in scores:
                    row = f"{m:>5} {rho:>4.1f} {s:>12}"
                    for d in dists:
                        c = index.get((d, s, rho, m))
                        row += " | " + ("        -        " if c is None
                                        else f"{c.bias:>8.4f} {c.mse:>8.4f}")
                    lines.append(row)
            lines.append("-" * len(head))
        return "\n".join(lines) + "\n"


# -- study -------------------------------------------------------------------

def candidate_tables(candidates, n: int, m: int, *, method="exact_quadrature",
                     identity_scaling="full", cache_dir=None) -> dict[str, ScoreTable]:
    out = {}
    for c in candidates:
        if c == "identity":
            out[c] = identity_scores(n, m)
        else:
            out[c] = build_score_table(c, n, m, method, cache_dir=cache_dir)
    return out


def _alpha_for(label, table: ScoreTable, m: int, identity_scaling: str) -> np.ndarray:
    a = table.alpha[:m]
    if label == "identity" and identity_scaling == "top":
        a = a - a.mean()
        a = a / math.sqrt(np.mean(a * a)) if m > 1 else a
    return a


def _summarize(est: np.ndarray, rho: float) -> tuple:
    ok = np.isfinite(est)
    e = est[ok] - rho
    k = e.size
    if k == 0:
        nan = float("nan")
        return int((~ok).sum()), nan, nan, nan, nan
    bias = math.fsum(e) / k
    sq = e * e
    mse = math.fsum(sq) / k
    if k > 1:
        se_b = math.sqrt(math.fsum((e - bias) ** 2) / (k - 1) / k)
        se_m = math.sqrt(math.fsum((sq - mse) ** 2) / (k - 1) / k)
    else:
        se_b = se_m = float("nan")
    return int((~ok).sum()), bias, mse, se_b, se_m


def _run_cell(args):
    cfg_d, rho, alphas = args
    dist_x = parse_dist(cfg_d["dist_x"])
    n, reps, seed = cfg_d["n"], cfg_d["reps"], cfg_d["seed"]
    Y = replicate_responses(dist_x, n, rho, reps, seed)
    mu = Y.mean(axis=1)
    sigma = np.sqrt(np.mean((Y - mu[:, None]) ** 2, axis=1))
    cells = []
    for m in cfg_d["m_values"]:
        for label in cfg_d["score_candidates"]:
            a = alphas[(label, m)]
            with np.errstate(divide="ignore", invalid="ignore"):
                est = lse_batch(Y[:, :m], mu, sigma, a)
            fails, bias, mse, se_b, se_m = _summarize(est, rho)
            cells.append(Cell(dist_x.label, label, rho, n, m, reps, fails, bias, mse, se_b, se_m))
    return cells


def run_study(config: SimConfig, *, cache_dir=None) -> SimReport:
    """Bias and MSE of the least-squares estimator for every (rho, m, score) cell."""
    cfg_d = config.to_dict()
    m_max = max(config.m_values)
    tables = candidate_tables(config.score_candidates, config.n, m_max,
                              method=config.score_method, cache_dir=cache_dir)
    alphas = {(label, m): _alpha_for(label, tables[label], m, config.identity_scaling)
              for label in config.score_candidates for m in config.m_values}
    jobs = [(cfg_d, rho, alphas) for rho in config.rho_values]
    if config.workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=config.workers) as pool:
            parts = list(pool.map(_run_cell, jobs))
    else:
        parts = [_run_cell(j) for j in jobs]
    cells = [c for part in parts for c in part]
    digest = hashlib.sha256(json.dumps(cfg_d, sort_keys=True).encode()).hexdigest()[:16]
    return SimReport(cells, config.seed, config.reps, digest)


# -- optimality check --------------------------------------------------------

@dataclass
class OptimalityReport:
    correct: str
    mean_corr: dict
    stderr: dict
    gap: dict
    gap_stderr: dict
    reps: int

    @property
    def ordering(self) -> list[str]:
        return sorted(self.mean_corr, key=lambda k: -self.mean_corr[k])

    def to_dict(self) -> dict:
        return {"correct": self.correct, "ordering": self.ordering, "mean_corr": self.mean_corr,
                "stderr": self.stderr, "gap": self.gap, "gap_stderr": self.gap_stderr,
                "reps": self.reps}


def verify_optimality(dist, n: int, rho: float, reps: int, seed, *, candidates=None,
                      method="exact_quadrature", cache_dir=None) -> OptimalityReport:
    """Mean sample correlation between responses and each candidate's full-ranking scores.

    Gaps are paired differences ``corr(correct) - corr(other)`` with their
    Monte Carlo standard errors.
    """
    dist = parse_dist(dist)
    correct = dist.label
    if candidates is None:
        candidates = ["identity"] + [c for c in ("uniform", "normal", "gamma(3,3)")
                                     if parse_dist(c) != dist]
    labels = [correct] + [c if c == "identity" else parse_dist(c).label
                          for c in candidates if c != correct]
    labels = list(dict.fromkeys(labels))
    tables = candidate_tables(labels, n, n, method=method, cache_dir=cache_dir)
    Y = replicate_responses(dist, n, rho, reps, seed)
    Yc = Y - Y.mean(axis=1, keepdims=True)
    ynorm = np.sqrt(np.sum(Yc * Yc, axis=1))
    corr = {}
    for lab in labels:
        a = tables[lab].alpha
        ac = a - a.mean()
        corr[lab] = (Yc @ ac) / (ynorm * math.sqrt(ac @ ac))
    mean = {k: math.fsum(v) / reps for k, v in corr.items()}
    se = {k: float(np.std(v, ddof=1) / math.sqrt(reps)) if reps > 1 else float("nan")
          for k, v in corr.items()}
    gap, gse = {}, {}
    for k, v in corr.items():
        if k == correct:
            continue
        d = corr[correct] - v
        gap[k] = math.fsum(d) / reps
        gse[k] = float(np.std(d, ddof=1) / math.sqrt(reps)) if reps > 1 else float("nan")
    return OptimalityReport(correct, mean, se, gap, gse, reps)
