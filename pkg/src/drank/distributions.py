"""Standardized members of the five supported location-scale families.

Every :class:`DistributionSpec` records the raw family parameters but
evaluates quantiles, densities and draws for the member shifted and scaled
to mean 0 and variance 1.  The raw mean and standard deviation come from
closed forms and are re-checked by numerical integration when the object is
built.
"""

from __future__ import annotations

import functools
import math
import re
from dataclasses import dataclass, field

import numpy as np
from scipy import integrate, special

from .errors import DomainError

FAMILIES = ("uniform", "normal", "half_normal", "gamma", "pareto")
SYMMETRIC = frozenset({"uniform", "normal"})

_STANDARDIZATION_TOL = 1e-8


@dataclass(frozen=True)
class DistributionSpec:
    """A standardized generating member ``Z`` of a location-scale family.

    ``params`` holds the raw family parameters: ``(shape, rate)`` for gamma,
    ``(tail_index,)`` for pareto (``F(x) = 1 - x**-tail_index`` on x >= 1),
    and nothing for the other three families.
    """

    family: str
    params: tuple[float, ...] = ()
    standardized: bool = field(default=True, init=False)
    raw_mean: float = field(default=float("nan"), init=False, compare=False)
    raw_sd: float = field(default=float("nan"), init=False, compare=False)

    def __post_init__(self):
        family = self.family.lower().replace("-", "_")
        if family not in FAMILIES:
            raise DomainError(f"unknown family {self.family!r}; expected one of {FAMILIES}")
        params = tuple(float(p) for p in self.params)
        expected = {"gamma": 2, "pareto": 1}.get(family, 0)
        if len(params) != expected:
            raise DomainError(f"{family} takes {expected} parameter(s), got {len(params)}")
        if family == "gamma" and not (params[0] > 0 and params[1] > 0):
            raise DomainError("gamma shape and rate must be positive")
        if family == "pareto" and not params[0] > 2:
            raise DomainError(
                f"pareto tail_index must exceed 2 for a finite variance, got {params[0]}"
            )
        object.__setattr__(self, "family", family)
        object.__setattr__(self, "params", params)
        mean, sd = _raw_moments(family, params)
        object.__setattr__(self, "raw_mean", mean)
        object.__setattr__(self, "raw_sd", sd)
        _check_standardization(family, params, mean, sd)

    # -- constructors -------------------------------------------------
    @classmethod
    def uniform(cls):
        return cls("uniform")

    @classmethod
    def normal(cls):
        return cls("normal")

    @classmethod
    def half_normal(cls):
        return cls("half_normal")

    @classmethod
    def gamma(cls, shape, rate=1.0):
        return cls("gamma", (shape, rate))

    @classmethod
    def pareto(cls, tail_index):
        return cls("pareto", (tail_index,))

    # -- descriptive --------------------------------------------------
    @property
    def symmetric(self) -> bool:
        return self.family in SYMMETRIC

    @property
    def label(self) -> str:
        if not self.params:
            return self.family
        return f"{self.family}({','.join(_fmt_param(p) for p in self.params)})"

    def to_dict(self) -> dict:
        return {"family": self.family, "params": list(self.params)}

    @classmethod
    def from_dict(cls, d: dict) -> "DistributionSpec":
        return cls(d["family"], tuple(d.get("params", ())))

    # -- standardized evaluation -------------------------------------
    def quantile(self, p):
        """Quantile function of the standardized member; ``p`` must lie in (0, 1)."""
        p_arr = np.asarray(p, dtype=float)
        if np.any(~((p_arr > 0) & (p_arr < 1))):
            raise DomainError("quantile probabilities must lie strictly inside (0, 1)")
        out = self._quantile(p_arr, 1.0 - p_arr)
        return float(out) if out.ndim == 0 else out

    def _quantile(self, u, v):
        """Standardized quantile given both ``u`` and ``v = 1 - u``.

        Passing the complement separately keeps full precision in the upper
        tail, where ``1 - u`` cannot be recovered from ``u``.
        """
        return (_raw_quantile(self.family, self.params, u, v) - self.raw_mean) / self.raw_sd

    def pdf(self, z):
        z = np.asarray(z, dtype=float)
        return self.raw_sd * _raw_pdf(self.family, self.params, self.raw_mean + self.raw_sd * z)

    def dpdf(self, z):
        """Derivative of the standardized density."""
        z = np.asarray(z, dtype=float)
        x = self.raw_mean + self.raw_sd * z
        return self.raw_sd**2 * _raw_dpdf(self.family, self.params, x)

    def sample(self, rng: np.random.Generator, size):
        return (_raw_sample(self.family, self.params, rng, size) - self.raw_mean) / self.raw_sd


def _fmt_param(p: float) -> str:
    return str(int(p)) if float(p).is_integer() else repr(p)


_DIST_RE = re.compile(r"^\s*([A-Za-z_\-]+)\s*(?:\(([^)]*)\))?\s*$")
_ALIASES = {
    "unif": "uniform",
    "u": "uniform",
    "norm": "normal",
    "n": "normal",
    "halfnormal": "half_normal",
    "half_norm": "half_normal",
    "g": "gamma",
    "power_law": "pareto",
    "powerlaw": "pareto",
}


def parse_dist(text: str) -> DistributionSpec:
    """Parse labels such as ``"normal"``, ``"gamma(3,3)"`` or ``"pareto(2.3)"``."""
    if isinstance(text, DistributionSpec):
        return text
    m = _DIST_RE.match(text)
    if not m:
        raise DomainError(f"cannot parse distribution {text!r}")
    name = m.group(1).lower().replace("-", "_")
    name = _ALIASES.get(name, name)
    params = ()
    if m.group(2) and m.group(2).strip():
        try:
            params = tuple(float(t) for t in m.group(2).split(","))
        except ValueError as exc:
            raise DomainError(f"bad parameters in {text!r}") from exc
    if name == "gamma" and len(params) == 1:
        params = (params[0], 1.0)
    return _cached_spec(name, params)


@functools.lru_cache(maxsize=64)
def _cached_spec(name, params):
    return DistributionSpec(name, params)


# -- raw family formulas ---------------------------------------------------

def _raw_moments(family, params):
    if family == "uniform":
        return 0.5, math.sqrt(1.0 / 12.0)
    if family == "normal":
        return 0.0, 1.0
    if family == "half_normal":
        return math.sqrt(2.0 / math.pi), math.sqrt(1.0 - 2.0 / math.pi)
    if family == "gamma":
        k, lam = params
        return k / lam, math.sqrt(k) / lam
    a = params[0]
    return a / (a - 1.0), math.sqrt(a / ((a - 1.0) ** 2 * (a - 2.0)))


def _raw_quantile(family, params, u, v):
    if family == "uniform":
        return u
    if family == "normal":
        return np.where(u < 0.5, special.ndtri(u), -special.ndtri(v))
    if family == "half_normal":
        return -special.ndtri(0.5 * v)
    if family == "gamma":
        k, lam = params
        return np.where(u < 0.5, special.gammaincinv(k, u), special.gammainccinv(k, v)) / lam
    return v ** (-1.0 / params[0])


def _raw_pdf(family, params, x):
    if family == "uniform":
        return np.where((x >= 0) & (x <= 1), 1.0, 0.0)
    if family == "normal":
        return np.exp(-0.5 * x * x) / math.sqrt(2 * math.pi)
    if family == "half_normal":
        return np.where(x >= 0, 2.0 * np.exp(-0.5 * x * x) / math.sqrt(2 * math.pi), 0.0)
    if family == "gamma":
        k, lam = params
        with np.errstate(divide="ignore", invalid="ignore"):
            logf = k * math.log(lam) + (k - 1) * np.log(x) - lam * x - special.gammaln(k)
            return np.where(x > 0, np.exp(logf), 0.0)
    a = params[0]
    with np.errstate(divide="ignore", invalid="ignore"):
        return np.where(x >= 1, a * x ** (-a - 1.0), 0.0)


def _raw_dpdf(family, params, x):
    if family == "uniform":
        return np.zeros_like(x)
    if family in ("normal", "half_normal"):
        return -x * _raw_pdf(family, params, x)
    if family == "gamma":
        k, lam = params
        with np.errstate(divide="ignore", invalid="ignore"):
            return np.where(x > 0, _raw_pdf(family, params, x) * ((k - 1) / x - lam), 0.0)
    a = params[0]
    with np.errstate(divide="ignore", invalid="ignore"):
        return np.where(x >= 1, -a * (a + 1) * x ** (-a - 2.0), 0.0)


def _raw_sample(family, params, rng, size):
    if family == "uniform":
        return rng.random(size)
    if family == "normal":
        return rng.standard_normal(size)
    if family == "half_normal":
        return np.abs(rng.standard_normal(size))
    if family == "gamma":
        k, lam = params
        return rng.gamma(k, 1.0 / lam, size)
    # numpy's pareto is the Lomax form; shift to support [1, inf)
    return rng.pareto(params[0], size) + 1.0


@functools.lru_cache(maxsize=64)
def _check_standardization(family, params, mean, sd):
    """Re-derive mean and variance of the standardized member by quadrature."""
    opts = dict(epsabs=1e-13, epsrel=1e-13, limit=400)

    if family == "pareto":
        # x = exp(t) turns the algebraic tail into an exponential one
        a = params[0]

        def moment(j):
            g = lambda t: a / sd**j * (1.0 - mean * math.exp(-t)) ** j * math.exp((j - a) * t)
            return integrate.quad(g, 0.0, np.inf, **opts)[0]
    else:
        lo, hi = {
            "uniform": (0.0, 1.0),
            "normal": (-np.inf, np.inf),
            "half_normal": (0.0, np.inf),
            "gamma": (0.0, np.inf),
        }[family]

        def moment(j):
            g = lambda x: ((x - mean) / sd) ** j * float(_raw_pdf(family, params, np.float64(x)))
            if family == "gamma":
                # split at the mode region so quad sees the bulk
                mid = mean
                return (integrate.quad(g, lo, mid, **opts)[0]
                        + integrate.quad(g, mid, hi, **opts)[0])
            return integrate.quad(g, lo, hi, **opts)[0]

    m1, m2 = moment(1), moment(2)
    if abs(m1) > _STANDARDIZATION_TOL or abs(m2 - 1.0) > _STANDARDIZATION_TOL:
        raise DomainError(
            f"standardization check failed for {family}{params}: mean={m1:.3e}, var={m2:.12f}"
        )
