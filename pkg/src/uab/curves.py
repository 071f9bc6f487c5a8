"""Shape-preserving cubic interpolation and accuracy-curve inversion.

Fits a piecewise cubic Hermite interpolant whose knot slopes are limited by
the Fritsch-Carlson criterion, so each segment is monotone and the curve never
overshoots its knot values. That makes "smallest budget reaching a target
accuracy" a well-posed bisection on the first crossing segment.
"""

from __future__ import annotations

import math
from bisect import bisect_right
from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple

from .core import ValidationError

#: Bisection tolerance (in budget units) for curve inversion.
INVERT_TOL = 1e-6


@dataclass(frozen=True)
class MonotoneCubicInterpolant:
    """Hermite interpolant with Fritsch-Carlson limited slopes."""

    xs: Tuple[float, ...]
    ys: Tuple[float, ...]
    slopes: Tuple[float, ...]

    def __call__(self, x: float) -> float:
        xs, ys, ms = self.xs, self.ys, self.slopes
        if not xs[0] <= x <= xs[-1]:
            raise ValidationError(f"x={x} outside interpolation range [{xs[0]}, {xs[-1]}]")
        if x == xs[-1]:
            return ys[-1]
        k = bisect_right(xs, x) - 1
        h = xs[k + 1] - xs[k]
        t = (x - xs[k]) / h
        t2 = t * t
        t3 = t2 * t
        h00 = 2 * t3 - 3 * t2 + 1
        h10 = t3 - 2 * t2 + t
        h01 = -2 * t3 + 3 * t2
        h11 = t3 - t2
        return h00 * ys[k] + h10 * h * ms[k] + h01 * ys[k + 1] + h11 * h * ms[k + 1]


def fit_monotone_cubic(xs: Sequence[float], ys: Sequence[float]) -> MonotoneCubicInterpolant:
    """Build the interpolant. Knots must have strictly increasing x."""
    if len(xs) != len(ys):
        raise ValidationError("xs and ys must have equal length")
    n = len(xs)
    if n < 2:
        raise ValidationError("need at least two knots")
    xs = [float(v) for v in xs]
    ys = [float(v) for v in ys]
    for a, b in zip(xs, xs[1:]):
        if not b > a:
            raise ValidationError("knot x values must be strictly increasing (no duplicates)")

    h = [xs[k + 1] - xs[k] for k in range(n - 1)]
    delta = [(ys[k + 1] - ys[k]) / h[k] for k in range(n - 1)]

    m = [0.0] * n
    for k in range(1, n - 1):
        if delta[k - 1] * delta[k] <= 0:
            m[k] = 0.0  # local extremum or flat: keep the knot stationary
        else:
            m[k] = 0.5 * (delta[k - 1] + delta[k])
    m[0] = _endpoint_slope(h[0], h[1] if n > 2 else h[0], delta[0], delta[1] if n > 2 else delta[0])
    m[-1] = _endpoint_slope(
        h[-1], h[-2] if n > 2 else h[-1], delta[-1], delta[-2] if n > 2 else delta[-1]
    )

    # Fritsch-Carlson limiting: scale (alpha, beta) back inside the circle of
    # radius 3 so every segment stays monotone.
    for k in range(n - 1):
        if delta[k] == 0.0:
            m[k] = 0.0
            m[k + 1] = 0.0
            continue
        alpha = m[k] / delta[k]
        beta = m[k + 1] / delta[k]
        if alpha < 0:
            m[k] = 0.0
            alpha = 0.0
        if beta < 0:
            m[k + 1] = 0.0
            beta = 0.0
        s = alpha * alpha + beta * beta
        if s > 9.0:
            tau = 3.0 / math.sqrt(s)
            m[k] = tau * alpha * delta[k]
            m[k + 1] = tau * beta * delta[k]

    return MonotoneCubicInterpolant(tuple(xs), tuple(ys), tuple(m))


def _endpoint_slope(h0: float, h1: float, d0: float, d1: float) -> float:
    """One-sided three-point slope with the usual shape-preserving clamps."""
    m = ((2 * h0 + h1) * d0 - h0 * d1) / (h0 + h1)
    if m * d0 <= 0:
        return 0.0
    if d0 * d1 < 0 and abs(m) > 3 * abs(d0):
        return 3 * d0
    return m


def min_budget_curve(
    points: Sequence[Tuple[float, float]],
    targets: Sequence[float],
    tol: float = INVERT_TOL,
) -> List[Tuple[float, Optional[float]]]:
    """Smallest budget at which the interpolated accuracy reaches each target.

    ``points`` are (budget N, accuracy) knots with strictly increasing N. For
    each target the answer is the leftmost real N whose interpolated accuracy
    meets it, found by bisection on the first bracketing segment; knot-valued
    targets resolve to the knot exactly. Targets above the curve's maximum get
    None, since the inversion cannot extend beyond the accuracy peak.
    """
    if len(points) < 2:
        raise ValidationError("need at least two (N, accuracy) points")
    xs = [float(p[0]) for p in points]
    ys = [float(p[1]) for p in points]
    interp = fit_monotone_cubic(xs, ys)
    peak = max(ys)

    out: List[Tuple[float, Optional[float]]] = []
    for target in targets:
        target = float(target)
        if target > peak:
            out.append((target, None))
            continue
        out.append((target, _first_reach(interp, target, tol)))
    return out


def _first_reach(interp: MonotoneCubicInterpolant, target: float, tol: float) -> float:
    xs, ys = interp.xs, interp.ys
    if ys[0] >= target:
        return xs[0]
    for k in range(len(xs) - 1):
        # Segments are monotone, so the first crossing sits in the first
        # segment whose right knot meets the target.
        if ys[k + 1] >= target:
            lo, hi = xs[k], xs[k + 1]
            while hi - lo > tol:
                mid = 0.5 * (lo + hi)
                if interp(mid) >= target:
                    hi = mid
                else:
                    lo = mid
            return hi
    raise AssertionError("target below peak but no crossing segment found")
