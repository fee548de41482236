"""Numerical kernels: incomplete gamma, adaptive Simpson, bisection, golden section."""

from __future__ import annotations

import math
import sys
from dataclasses import dataclass
from typing import Callable, Tuple

import numpy as np


class NumericsError(ArithmeticError):
    pass


class ToleranceNotMet(NumericsError):
    pass


class InvalidBracket(NumericsError):
    pass


@dataclass(frozen=True)
class QuadratureSpec:
    abs_tol: float = 1e-10
    rel_tol: float = 1e-9
    max_depth: int = 40

    def __post_init__(self):
        if self.abs_tol <= 0 or self.rel_tol <= 0:
            raise ValueError("tolerances must be positive")
        if self.max_depth < 1:
            raise ValueError("max_depth must be >= 1")


DEFAULT_QUAD = QuadratureSpec()


@dataclass(frozen=True)
class Bracket:
    lo: float
    hi: float
    f_lo: float
    f_hi: float

    @classmethod
    def of(cls, f, lo: float, hi: float) -> "Bracket":
        return cls(lo, hi, f(lo), f(hi))

    def __post_init__(self):
        if not self.lo < self.hi:
            raise InvalidBracket(f"need lo < hi, got [{self.lo}, {self.hi}]")


# ---------------------------------------------------------------------------
# incomplete gamma

_EPS = 1e-14
_MAX_ITER = 10_000


def lower_incomplete_gamma(a: float, b: float) -> float:
    """Lower incomplete gamma ``G(a, b) = int_0^b t^(a-1) e^-t dt`` (not regularized).

    Series expansion below ``b = a + 1``, Lentz continued fraction above.
    """
    if a <= 0:
        raise ValueError("lower_incomplete_gamma needs a > 0")
    if b < 0:
        raise ValueError("lower_incomplete_gamma needs b >= 0")
    if b == 0:
        return 0.0
    if math.isinf(b):
        return math.gamma(a)
    log_prefactor = -b + a * math.log(b)
    if b < a + 1.0:
        ap, term = a, 1.0 / a
        total = term
        for _ in range(_MAX_ITER):
            ap += 1.0
            term *= b / ap
            total += term
            if abs(term) < abs(total) * _EPS:
                return total * math.exp(log_prefactor)
        raise ToleranceNotMet("incomplete gamma series did not converge")
    # upper tail via continued fraction, then subtract from Gamma(a)
    tiny = sys.float_info.min / sys.float_info.epsilon
    bb = b + 1.0 - a
    c = 1.0 / tiny
    d = 1.0 / bb
    h = d
    for i in range(1, _MAX_ITER):
        an = -i * (i - a)
        bb += 2.0
        d = an * d + bb
        if abs(d) < tiny:
            d = tiny
        c = bb + an / c
        if abs(c) < tiny:
            c = tiny
        d = 1.0 / d
        delta = d * c
        h *= delta
        if abs(delta - 1.0) < _EPS:
            upper = math.exp(log_prefactor) * h
            return math.gamma(a) - upper
    raise ToleranceNotMet("incomplete gamma continued fraction did not converge")


# ---------------------------------------------------------------------------
# quadrature

def _eval(f, x: np.ndarray) -> np.ndarray:
    # constant integrands (e.g. ``lambda t: 3.0``) broadcast to the abscissae
    return np.broadcast_to(np.asarray(f(x), dtype=float), x.shape)


def integrate(f: Callable, lo: float, hi: float, spec: QuadratureSpec = DEFAULT_QUAD,
              initial_panels: int = 8) -> float:
    """Adaptive Simpson quadrature of ``f`` over ``[lo, hi]``.

    ``f`` is called with 1-D numpy arrays of abscissae and must be elementwise.
    Panels are refined level by level, so every refinement step is a single
    vectorised call. Raises :class:`ToleranceNotMet` when ``max_depth`` is hit.
    """
    if hi < lo:
        raise ValueError("integrate needs lo <= hi")
    if hi == lo:
        return 0.0
    edges = np.linspace(lo, hi, initial_panels + 1)
    a, b = edges[:-1], edges[1:]
    m = 0.5 * (a + b)
    fa, fm, fb = (_eval(f, v) for v in (a, m, b))
    whole = (b - a) / 6.0 * (fa + 4.0 * fm + fb)
    estimate = float(np.sum(whole))
    eps_total = max(spec.abs_tol, spec.rel_tol * abs(estimate))
    eps = np.full(a.shape, eps_total / initial_panels)

    total = 0.0
    for _depth in range(spec.max_depth + 1):
        lm = 0.5 * (a + m)
        rm = 0.5 * (m + b)
        flm = _eval(f, lm)
        frm = _eval(f, rm)
        left = (m - a) / 6.0 * (fa + 4.0 * flm + fm)
        right = (b - m) / 6.0 * (fm + 4.0 * frm + fb)
        err = left + right - whole
        # second test: panel error already at rounding level
        done = (np.abs(err) <= 15.0 * eps) | (np.abs(err) <= 1e-14 * np.abs(left + right))
        if np.any(done):
            total += float(np.sum(left[done] + right[done] + err[done] / 15.0))
        todo = ~done
        if not np.any(todo):
            return total
        # split each unfinished panel in two
        a = np.concatenate((a[todo], m[todo]))
        b = np.concatenate((m[todo], b[todo]))
        fa_new = np.concatenate((fa[todo], fm[todo]))
        fb_new = np.concatenate((fm[todo], fb[todo]))
        fm = np.concatenate((flm[todo], frm[todo]))
        whole = np.concatenate((left[todo], right[todo]))
        eps = np.concatenate((eps[todo], eps[todo])) / 2.0
        fa, fb = fa_new, fb_new
        m = 0.5 * (a + b)
    raise ToleranceNotMet(f"adaptive Simpson exceeded max_depth={spec.max_depth} on [{lo}, {hi}]")


# ---------------------------------------------------------------------------
# root finding and minimisation

def bisect(f: Callable[[float], float], bracket: Bracket, tol: float, side: str = "mid") -> float:
    """Binary search for a sign change of ``f`` inside ``bracket``.

    Returns the midpoint of a final bracket no wider than ``tol``, or its
    ``lo``/``hi`` end when the caller needs to stay on one side of the root.
    """
    if tol <= 0:
        raise ValueError("tol must be positive")
    if side not in ("mid", "lo", "hi"):
        raise ValueError("side must be 'mid', 'lo' or 'hi'")
    lo, hi, f_lo, f_hi = bracket.lo, bracket.hi, bracket.f_lo, bracket.f_hi
    if f_lo == 0:
        return lo
    if f_hi == 0:
        return hi
    if np.sign(f_lo) == np.sign(f_hi):
        raise InvalidBracket("bracket endpoints do not straddle a root")
    n_iter = max(0, math.ceil(math.log2((hi - lo) / tol)))
    for _ in range(n_iter):
        mid = 0.5 * (lo + hi)
        f_mid = f(mid)
        if f_mid == 0:
            return mid
        if np.sign(f_mid) == np.sign(f_lo):
            lo, f_lo = mid, f_mid
        else:
            hi = mid
    if side == "lo":
        return lo
    if side == "hi":
        return hi
    return 0.5 * (lo + hi)


_INV_PHI = (math.sqrt(5.0) - 1.0) / 2.0


def golden_section(f: Callable[[float], float], lo: float, hi: float, tol: float) -> Tuple[float, float]:
    """Plain golden-section search; assumes ``f`` unimodal on ``[lo, hi]``."""
    a, b = lo, hi
    c = b - _INV_PHI * (b - a)
    d = a + _INV_PHI * (b - a)
    fc, fd = f(c), f(d)
    while b - a > tol:
        if fc <= fd:
            b, d, fd = d, c, fc
            c = b - _INV_PHI * (b - a)
            fc = f(c)
        else:
            a, c, fc = c, d, fd
            d = a + _INV_PHI * (b - a)
            fd = f(d)
    return (c, fc) if fc <= fd else (d, fd)


def minimize_1d(f: Callable[[float], float], lo: float, hi: float, tol: float = 1e-6,
                grid: int = 512) -> Tuple[float, float]:
    """Bounded 1-D minimisation: uniform grid scan, then golden section.

    ``tol`` is relative to the interval width. The grid locates the basin of
    the global minimum; golden section refines inside the two neighbouring
    cells. The better of the refined point and the best grid point is returned.
    """
    if not lo < hi:
        if lo == hi:
            return lo, f(lo)
        raise ValueError("minimize_1d needs lo < hi")
    xs = np.linspace(lo, hi, grid)
    ys = np.array([f(float(x)) for x in xs])
    i = int(np.nanargmin(ys))
    best_x, best_y = float(xs[i]), float(ys[i])
    a = float(xs[max(i - 1, 0)])
    b = float(xs[min(i + 1, grid - 1)])
    x_ref, y_ref = golden_section(f, a, b, tol * (hi - lo))
    if y_ref < best_y:
        return float(x_ref), float(y_ref)
    return best_x, best_y
