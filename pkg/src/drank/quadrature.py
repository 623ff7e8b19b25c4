"""Adaptive Gauss-Legendre quadrature on (0, 1) with endpoint substitution.

Integrands are called as ``f(u, v)`` with ``v = 1 - u`` supplied separately,
so that quantile functions keep full precision next to ``u = 1``.  The two
outermost panels are mapped through ``u = b * w**k`` (left) and
``1 - u = (1 - b) * w**k`` (right), which turns integrable power-type
singularities at the endpoints into smooth, vanishing integrands.
"""

from __future__ import annotations

import heapq
import math

import numpy as np

from .errors import QuadratureError

_ORDER = 16
_NODES, _WEIGHTS = np.polynomial.legendre.leggauss(_ORDER)


class _Segment:
    """Maps a local variable ``t`` in [0, 1] (or [a, b]) onto (u, v, jacobian)."""

    __slots__ = ("kind", "a", "b", "k")

    def __init__(self, kind, a, b, k=1):
        self.kind, self.a, self.b, self.k = kind, a, b, k

    def bounds(self):
        return (0.0, 1.0) if self.kind != "plain" else (self.a, self.b)

    def map(self, t):
        if self.kind == "plain":
            return t, 1.0 - t, 1.0
        k = self.k
        if self.kind == "left":
            u = self.b * t**k
            return u, 1.0 - u, self.b * k * t ** (k - 1)
        width = 1.0 - self.a
        v = width * t**k
        return 1.0 - v, v, width * k * t ** (k - 1)


def _gl(f, seg, lo, hi):
    half = 0.5 * (hi - lo)
    t = 0.5 * (hi + lo) + half * _NODES
    u, v, jac = seg.map(t)
    return half * float(np.dot(_WEIGHTS, f(u, v) * jac))


def integrate_unit(f, breakpoints=(), *, abs_tol=1e-11, rel_tol=1e-13,
                   left_power=4, right_power=4, max_panels=5000):
    """Integrate ``f(u, v)`` over (0, 1).

    Returns ``(value, error_estimate)``.  Raises :class:`QuadratureError`
    (carrying the best estimate) if the tolerance is not met within
    ``max_panels`` subdivisions.
    """
    pts = sorted({float(p) for p in breakpoints if 0.0 < p < 1.0})
    edges = [0.0] + pts + [1.0]
    segments = []
    for i, (a, b) in enumerate(zip(edges[:-1], edges[1:])):
        if i == 0 and left_power > 1:
            segments.append(_Segment("left", 0.0, b, left_power))
        elif i == len(edges) - 2 and right_power > 1:
            segments.append(_Segment("right", a, 1.0, right_power))
        else:
            segments.append(_Segment("plain", a, b))
    if len(edges) == 2 and left_power > 1 and right_power > 1:
        # single panel: split so each endpoint gets its own substitution
        segments = [_Segment("left", 0.0, 0.5, left_power), _Segment("right", 0.5, 1.0, right_power)]

    heap = []
    total = 0.0
    total_err = 0.0
    counter = 0

    def push(seg, lo, hi, whole):
        nonlocal total, total_err, counter
        mid = 0.5 * (lo + hi)
        left = _gl(f, seg, lo, mid)
        right = _gl(f, seg, mid, hi)
        value = left + right
        err = abs(whole - value)
        if not math.isfinite(value):
            raise QuadratureError("integrand is not finite on (0, 1)", value, float("inf"))
        total += value
        total_err += err
        counter += 1
        heapq.heappush(heap, (-err, counter, seg, lo, hi, left, right, value))

    for seg in segments:
        lo, hi = seg.bounds()
        push(seg, lo, hi, _gl(f, seg, lo, hi))

    panels = len(heap)
    while total_err > max(abs_tol, rel_tol * abs(total)):
        if panels >= max_panels:
            raise QuadratureError(
                f"adaptive quadrature did not converge: error estimate {total_err:.3e} "
                f"after {panels} panels",
                total,
                total_err,
            )
        neg_err, _, seg, lo, hi, left, right, value = heapq.heappop(heap)
        total -= value
        total_err += neg_err
        mid = 0.5 * (lo + hi)
        push(seg, lo, mid, left)
        push(seg, mid, hi, right)
        panels += 1
    # re-sum to shed drift from the running updates
    total = math.fsum(item[7] for item in heap)
    total_err = math.fsum(-item[0] for item in heap)
    return total, total_err
