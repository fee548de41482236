"""Closed-form and integral performance model of the orthogonal two-tier network.

Interference is modelled as a Poisson field of Rayleigh-faded fBSs; every
CCDF below is ``exp(-s P_N)`` times the Laplace transform of that field.
Femto-side quantities take ``theta`` (interference thinning): the interferer
intensity becomes ``theta * lambda_f`` and femto throughputs scale by
``theta`` (the fBS only transmits on a ``theta`` fraction of its blocks).
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from functools import lru_cache
from typing import Tuple

import numpy as np

from .model import (ControlParams, LinkClass, NetworkConfig, ThroughputReport, service_area,
                    service_radius)
from .numerics import Bracket, DEFAULT_QUAD, bisect, integrate, lower_incomplete_gamma

log = logging.getLogger(__name__)


class DomainError(ValueError):
    pass


class ConvergenceError(ValueError):
    pass


# ---------------------------------------------------------------------------
# interference field

@dataclass(frozen=True)
class InterferenceField:
    power: float          # interferer transmit power density [W/Hz]
    exponent: float       # pathloss exponent of interfering links
    z: float              # linear fixed loss Z of interfering links
    intensity: float      # interferer intensity [1/m^2], already thinned
    exclusion: float = 0.0  # no interferer closer than this [m]

    def __post_init__(self):
        if self.intensity < 0 or self.exclusion < 0:
            raise ValueError("intensity and exclusion radius must be non-negative")


def _tail_integral(c: float, alpha: float) -> float:
    """``int_c^inf du / (1 + u^(alpha/2))`` by quadrature on finite ranges.

    On ``u > 1`` the substitution ``u = w^(-1/(a-1))`` (``a = alpha/2``) maps
    the tail to ``(1/(a-1)) int_0^... dw / (1 + w^(a/(a-1)))``, which is smooth.
    """
    a = alpha / 2.0
    p = 1.0 / (a - 1.0)

    def inner(w):
        return p / (1.0 + w ** (p * a))

    if c >= 1.0:
        return integrate(inner, 0.0, c ** (-(a - 1.0)), DEFAULT_QUAD)
    head = integrate(lambda u: 1.0 / (1.0 + u ** a), c, 1.0, DEFAULT_QUAD)
    return head + integrate(inner, 0.0, 1.0, DEFAULT_QUAD)


def laplace_interference(s: float, field: InterferenceField, method: str = "auto") -> float:
    """``E[exp(-s I)]`` for the aggregate interference of ``field``.

    ``method``: ``"auto"`` uses the exclusion-free closed form when the
    exclusion radius is 0, the arctan form for exponent 4, and quadrature of
    the general integral otherwise; ``"general"`` forces quadrature.
    """
    if field.exponent <= 2.0:
        raise ConvergenceError("interference Laplace transform diverges for exponent <= 2")
    if s < 0:
        raise ValueError("s must be non-negative")
    if s == 0 or field.intensity == 0:
        return 1.0
    alpha, z, lam, dist = field.exponent, field.z, field.intensity, field.exclusion
    sp = s * field.power
    if method == "auto" and dist == 0:
        return math.exp(-2.0 * math.pi ** 2 * lam * z ** -2 * sp ** (2.0 / alpha)
                        / (alpha * math.sin(2.0 * math.pi / alpha)))
    if method == "auto" and alpha == 4.0:
        root = math.sqrt(sp)
        return math.exp(-math.pi * lam * z ** -2 * root * math.atan2(root, z ** 2 * dist ** 2))
    if method not in ("auto", "general"):
        raise ValueError(f"unknown method {method!r}")
    q = sp ** (2.0 / alpha)
    lower = z ** 2 * dist ** 2 / q
    return math.exp(-math.pi * lam * z ** -2 * q * _tail_integral(lower, alpha))


# ---------------------------------------------------------------------------
# SINR CCDFs (vectorised: thresholds along axis 0, distances along axis 1)

def _grid(gamma, r):
    g = np.atleast_1d(np.asarray(gamma, dtype=float))[:, None]
    d = np.atleast_1d(np.asarray(r, dtype=float))[None, :]
    return g, d


def _squeeze(out, gamma, r):
    if np.ndim(gamma) == 0 and np.ndim(r) == 0:
        return float(out[0, 0])
    if np.ndim(gamma) == 0:
        return out[0]
    if np.ndim(r) == 0:
        return out[:, 0]
    return out


def _fms_table(gamma, r, cfg: NetworkConfig, theta: float) -> np.ndarray:
    g, d = _grid(gamma, r)
    desired = cfg.pathloss[LinkClass.INDOOR]
    interf = cfg.pathloss[LinkClass.INDOOR_TO_INDOOR]
    s = g * (desired.z * d) ** desired.exponent / cfg.pf
    alpha = interf.exponent
    lam = theta * cfg.lambda_f
    expo = (2.0 * math.pi ** 2 * lam * interf.z ** -2 * (s * cfg.pf) ** (2.0 / alpha)
            / (alpha * math.sin(2.0 * math.pi / alpha)))
    return np.exp(-s * cfg.noise - expo)


def ccdf_fms(gamma, r_f, cfg: NetworkConfig, theta: float = 1.0):
    """``Pr[SINR >= gamma]`` for an fMS at distance ``r_f`` from its fBS."""
    if np.any(np.asarray(r_f) > cfg.home_radius) or np.any(np.asarray(r_f) < 0):
        raise DomainError("fMS distance must lie in [0, D_h]")
    return _squeeze(_fms_table(gamma, r_f, cfg, theta), gamma, r_f)


def ccdf_mms(gamma, r_m, cfg: NetworkConfig):
    """``Pr[SINR >= gamma]`` for an mMS (noise only, orthogonal band)."""
    g, d = _grid(gamma, r_m)
    link = cfg.pathloss[LinkClass.OUTDOOR]
    out = np.exp(-g * cfg.noise * (link.z * d) ** link.exponent / cfg.pm)
    return _squeeze(out, gamma, r_m)


def _oms_table(gamma, r, cfg: NetworkConfig, theta: float, indoor=None) -> np.ndarray:
    return np.exp(-_oms_exponent(gamma, r, cfg, theta, indoor))


def _oms_exponent(gamma, r, cfg: NetworkConfig, theta: float, indoor=None) -> np.ndarray:
    """``-log F_o``; kept separate so outage can use ``expm1``.

    ``indoor`` forces a branch (quadrature segments must not straddle ``D_h``).
    """
    g, d = _grid(gamma, r)
    if indoor is None:
        outdoor = d >= cfg.home_radius
    else:
        outdoor = np.full(d.shape, not indoor)
    pl = cfg.pathloss
    lam = theta * cfg.lambda_f
    out = np.empty(np.broadcast_shapes(g.shape, d.shape))
    branches = (
        (outdoor, pl[LinkClass.INDOOR_TO_OUTDOOR], pl[LinkClass.INDOOR_TO_OUTDOOR]),
        (~outdoor, pl[LinkClass.INDOOR], pl[LinkClass.INDOOR_TO_INDOOR]),
    )
    for mask, desired, interf in branches:
        cols = mask[0]
        if not np.any(cols):
            continue
        dd = d[:, cols]
        s = g * (desired.z * dd) ** desired.exponent / cfg.pf
        if interf.exponent == 4.0:
            root = np.sqrt(s * cfg.pf)
            expo = math.pi * lam * interf.z ** -2 * root * np.arctan2(root, interf.z ** 2 * dd ** 2)
            out[:, cols] = s * cfg.noise + expo
        else:
            vals = np.empty(s.shape)
            for idx in np.ndindex(s.shape):
                dist = float(dd[0, idx[1]])
                field = InterferenceField(cfg.pf, interf.exponent, interf.z, lam, dist)
                vals[idx] = s[idx] * cfg.noise - math.log(laplace_interference(float(s[idx]), field))
            out[:, cols] = vals
    return out


def ccdf_oms(gamma, r_o, cfg: NetworkConfig, theta: float = 1.0):
    """``Pr[SINR >= gamma]`` for an oMS at distance ``r_o`` from its serving fBS.

    Indoor (``r_o < D_h``): indoor desired link, indoor-to-indoor interferers.
    Outdoor: indoor-to-outdoor for both. Interferers lie beyond ``r_o``.
    """
    if np.any(np.asarray(r_o) < 0):
        raise DomainError("oMS distance must be non-negative")
    return _squeeze(_oms_table(gamma, r_o, cfg, theta), gamma, r_o)


# ---------------------------------------------------------------------------
# average spectral efficiencies

@lru_cache(maxsize=256)
def avg_se_fms(cfg: NetworkConfig, theta: float = 1.0) -> float:
    inc = cfg.rates.increments
    gam = cfg.rates.thresholds
    dh = cfg.home_radius

    def integrand(r):
        return inc @ _fms_table(gam, r, cfg, theta) * 2.0 * r / dh ** 2

    return integrate(integrand, 0.0, dh)


def _mms_integrals_closed(cfg: NetworkConfig) -> np.ndarray:
    link = cfg.pathloss[LinkClass.OUTDOOR]
    alpha = link.exponent
    dm = cfg.macro_radius
    out = []
    for gam in cfg.rates.thresholds:
        beta_l = cfg.noise * gam * link.z ** alpha / cfg.pm
        if beta_l == 0:
            out.append(1.0)
            continue
        val = beta_l ** (-2.0 / alpha) / alpha * lower_incomplete_gamma(2.0 / alpha, beta_l * dm ** alpha)
        out.append(2.0 * val / dm ** 2)
    return np.array(out)


@lru_cache(maxsize=64)
def avg_se_mms(cfg: NetworkConfig, method: str = "closed") -> float:
    """Average mMS spectral efficiency, by incomplete gamma or by quadrature."""
    inc = cfg.rates.increments
    if method == "closed":
        return float(inc @ _mms_integrals_closed(cfg))
    if method != "quadrature":
        raise ValueError(f"unknown method {method!r}")
    dm = cfg.macro_radius
    gam = cfg.rates.thresholds

    def integrand(r):
        return inc @ ccdf_mms(gam, r, cfg) * 2.0 * r / dm ** 2

    return integrate(integrand, 0.0, dm)


def oms_density(r, d_f: float, cfg: NetworkConfig):
    """Density of the oMS-to-fBS distance given service radius ``d_f``."""
    r = np.asarray(r, dtype=float)
    lam = cfg.lambda_f
    if lam == 0:
        dens = 2.0 * r / d_f ** 2
    else:
        dens = 2.0 * math.pi * lam * r * np.exp(-math.pi * lam * r ** 2) / (lam * service_area(d_f, lam))
    return np.where(r <= d_f, dens, 0.0)


def _unnormalised(r, cfg):
    lam = cfg.lambda_f
    if lam == 0:
        return 2.0 * math.pi * r
    return 2.0 * math.pi * lam * r * np.exp(-math.pi * lam * r ** 2) / lam


def _oms_integrands(cfg: NetworkConfig, theta: float, indoor: bool):
    inc = cfg.rates.increments
    gam = cfg.rates.thresholds

    def se(r):
        return inc @ _oms_table(gam, r, cfg, theta, indoor) * _unnormalised(r, cfg)

    def outage(r):
        return -np.expm1(-_oms_exponent(gam[:1], r, cfg, theta, indoor)[0]) * _unnormalised(r, cfg)

    return se, outage


def _segment(which: int, lo: float, hi: float, cfg: NetworkConfig, theta: float) -> float:
    """Integral of the oMS spectral-efficiency (0) or outage (1) integrand.

    ``[lo, hi]`` must lie on one side of ``D_h``.
    """
    indoor = hi <= cfg.home_radius
    return integrate(_oms_integrands(cfg, theta, indoor)[which], lo, hi)


def _split_integral(which: int, d: float, cfg: NetworkConfig, theta: float) -> float:
    dh = cfg.home_radius
    if d <= dh:
        return _segment(which, 0.0, d, cfg, theta)
    return _segment(which, 0.0, dh, cfg, theta) + _segment(which, dh, d, cfg, theta)


def _check_area(x: float, cfg: NetworkConfig, theta: float, strict: bool):
    if x <= 0:
        raise DomainError("service area must be positive")
    if cfg.lambda_f * x >= 1:
        raise DomainError("service area must satisfy lambda_f * x < 1")
    if strict:
        geo_min, geo_max = area_bounds(cfg, theta)
        tol = 1e-9 * geo_max
        if not (geo_min - tol <= x <= geo_max + tol):
            raise DomainError(f"service area {x:.6g} outside [{geo_min:.6g}, {geo_max:.6g}]")


def avg_se_oms(x: float, cfg: NetworkConfig, theta: float = 1.0, *, strict: bool = True) -> float:
    """Average oMS spectral efficiency for average service area ``x``.

    With ``strict`` the area must lie in ``[X_min, X_max(theta)]``.
    """
    _check_area(x, cfg, theta, strict)
    d = service_radius(x, cfg.lambda_f)
    return _split_integral(0, d, cfg, theta) / service_area(d, cfg.lambda_f)


def avg_outage_oms(d_f: float, cfg: NetworkConfig, theta: float = 1.0) -> float:
    """Average oMS outage (SINR below the lowest rate threshold) for radius ``d_f``."""
    if d_f <= 0:
        raise DomainError("d_f must be positive")
    return _split_integral(1, d_f, cfg, theta) / service_area(d_f, cfg.lambda_f)


def oms_profile(d_values, cfg: NetworkConfig, theta: float = 1.0) -> Tuple[np.ndarray, np.ndarray]:
    """Average oMS spectral efficiency and outage at many radii at once.

    Integrals are accumulated over consecutive sorted radii, so the cost is
    about one full integral regardless of the number of radii.
    """
    d_values = np.asarray(d_values, dtype=float)
    order = np.argsort(d_values)
    knots = np.union1d(d_values, [cfg.home_radius]) if d_values.max() > cfg.home_radius else np.unique(d_values)
    cum_se = np.empty(knots.size)
    cum_out = np.empty(knots.size)
    prev, acc_se, acc_out = 0.0, 0.0, 0.0
    for i, k in enumerate(knots):
        if k > prev:
            acc_se += _segment(0, prev, k, cfg, theta)
            acc_out += _segment(1, prev, k, cfg, theta)
        cum_se[i], cum_out[i] = acc_se, acc_out
        prev = k
    pos = np.searchsorted(knots, d_values[order])
    area = service_area(d_values[order], cfg.lambda_f)
    se_out = np.empty(d_values.size)
    out_out = np.empty(d_values.size)
    se_out[order] = cum_se[pos] / area
    out_out[order] = cum_out[pos] / area
    return se_out, out_out


# ---------------------------------------------------------------------------
# service area geometry and D_max

@dataclass(frozen=True)
class GeometrySnapshot:
    x: float
    d_f: float
    x_min: float
    x_max: float
    d_max: float
    p_mms: float
    p_cs: float  # RSS threshold at the service edge [W/Hz]


@dataclass(frozen=True)
class DmaxSearch:
    radius: float
    saturated: bool
    monotone: bool
    outage_at_dh: float


_DMAX_TOL = 1e-3


@lru_cache(maxsize=512)
def dmax_search(cfg: NetworkConfig, theta: float = 1.0) -> DmaxSearch:
    """Largest service radius whose average oMS outage stays within ``O_max``.

    Doubling from ``D_h`` finds an upper bracket (capped at ``5 D_m``), then
    bisection refines to 1 mm. Outage values seen during the doubling are
    checked for monotonicity; a violation is logged and reported.
    """
    cap = cfg.outage_cap
    dh = cfg.home_radius

    def excess(d):
        return avg_outage_oms(d, cfg, theta) - cap

    at_dh = excess(dh)
    if at_dh >= 0:
        return DmaxSearch(dh, False, True, at_dh + cap)
    lo, hi, f_hi = dh, 2.0 * dh, excess(2.0 * dh)
    seen = [at_dh, f_hi]
    limit = 5.0 * cfg.macro_radius
    while f_hi < 0 and hi < limit:
        lo, hi = hi, min(2.0 * hi, limit)
        f_hi = excess(hi)
        seen.append(f_hi)
    monotone = bool(np.all(np.diff(seen) >= -1e-12))
    if not monotone:
        log.warning("average oMS outage is not monotone in d_f on the search path")
    if f_hi < 0:
        log.warning("D_max search saturated at %.1f m", hi)
        return DmaxSearch(hi, True, monotone, at_dh + cap)
    # keep the feasible end so the cap holds exactly at D_max
    radius = bisect(excess, Bracket(lo, hi, excess(lo), f_hi), _DMAX_TOL, side="lo")
    return DmaxSearch(radius, False, monotone, at_dh + cap)


def find_dmax(cfg: NetworkConfig, theta: float = 1.0) -> float:
    return dmax_search(cfg, theta).radius


_AREA_CEILING = 1.0 - 1e-12


def area_bounds(cfg: NetworkConfig, theta: float = 1.0) -> Tuple[float, float]:
    """``(X_min, X_max)`` for the given thinning probability.

    A saturated search radius can make ``lambda_f * X_max`` round to 1; the
    bound is then held just below full coverage.
    """
    x_max = service_area(find_dmax(cfg, theta), cfg.lambda_f)
    if cfg.lambda_f > 0:
        x_max = min(x_max, _AREA_CEILING / cfg.lambda_f)
    return cfg.x_min, x_max


def service_geometry(d_f: float, cfg: NetworkConfig, theta: float = 1.0) -> GeometrySnapshot:
    d_max = find_dmax(cfg, theta)
    if not (cfg.home_radius - 1e-9 <= d_f <= d_max + 1e-9):
        raise DomainError(f"d_f={d_f} outside [{cfg.home_radius}, {d_max:.3f}]")
    lam = cfg.lambda_f
    x = service_area(d_f, lam)
    edge = cfg.pathloss[LinkClass.INDOOR_TO_OUTDOOR]
    return GeometrySnapshot(
        x=x, d_f=d_f, x_min=cfg.x_min, x_max=area_bounds(cfg, theta)[1], d_max=d_max,
        p_mms=math.exp(-math.pi * lam * d_f ** 2), p_cs=float(cfg.pf * edge.gain(d_f)),
    )


# ---------------------------------------------------------------------------
# user counts and resource-sharing factors

def hetero_counts(x: float, k_in: float, lambda_u_out: float, cfg: NetworkConfig) -> Tuple[float, float]:
    """Mean mMS count per macrocell and mean oMS count per femtocell.

    Indoor (home-disk) users have intensity ``k_in * lambda_u_out``.
    """
    x_dh = cfg.x_min
    if k_in < 1:
        raise DomainError("k_in must be >= 1")
    if x < x_dh * (1 - 1e-12):
        raise DomainError("service area below the home area")
    n_m = (cfg.macro_area - cfg.lambda_f * cfg.macro_area * x) * lambda_u_out
    n_o = k_in * lambda_u_out * x_dh + lambda_u_out * (x - x_dh)
    return n_m, n_o


def mean_counts(x: float, cfg: NetworkConfig) -> Tuple[float, float]:
    if cfg.heterogeneous:
        return hetero_counts(x, cfg.indoor_density_factor, cfg.lambda_u_outdoor, cfg)
    return cfg.macro_area * cfg.lambda_u * (1.0 - cfg.lambda_f * x), cfg.lambda_u * x


def share_single(t):
    """``(1 - e^-t) / t``: mean of ``1/(N+1)`` for ``N ~ Poisson(t)``."""
    t = np.asarray(t, dtype=float)
    small = t < 1e-4
    ts = np.where(small, 1.0, t)
    out = np.where(small, 1.0 - t / 2.0 + t ** 2 / 6.0 - t ** 3 / 24.0, -np.expm1(-ts) / ts)
    return float(out) if out.ndim == 0 else out


def share_pair(t):
    """``(t + e^-t - 1) / t^2``: size-biased mean of ``1/(N+1)``."""
    t = np.asarray(t, dtype=float)
    small = t < 1e-4
    ts = np.where(small, 1.0, t)
    out = np.where(small, 0.5 - t / 6.0 + t ** 2 / 24.0 - t ** 3 / 120.0, (ts + np.expm1(-ts)) / ts ** 2)
    return float(out) if out.ndim == 0 else out


# ---------------------------------------------------------------------------
# throughputs

def tput_fms(rho: float, x: float, beta: float, cfg: NetworkConfig, theta: float = 1.0) -> float:
    _, n_o = mean_counts(x, cfg)
    base = rho * cfg.bandwidth * avg_se_fms(cfg, theta)
    return theta * (beta * base + (1.0 - beta) * base * share_single(n_o))


def tput_mms(rho: float, x: float, cfg: NetworkConfig) -> float:
    if 1.0 - cfg.lambda_f * x <= 0:
        raise DomainError("femtocells cover the whole macrocell (1 - lambda_f x <= 0)")
    n_m, _ = mean_counts(x, cfg)
    return (1.0 - rho) * cfg.bandwidth * avg_se_mms(cfg) * share_single(n_m)


def tput_oms(rho: float, x: float, beta: float, cfg: NetworkConfig, theta: float = 1.0,
             *, se_oms: float = None) -> float:
    if x <= 0:
        raise DomainError("service area must be positive")
    if se_oms is None:
        se_oms = avg_se_oms(x, cfg, theta, strict=False)
    _, n_o = mean_counts(x, cfg)
    return theta * (1.0 - beta) * rho * cfg.bandwidth * se_oms * share_pair(n_o)


def analyze(params: ControlParams, cfg: NetworkConfig, *, strict: bool = True) -> ThroughputReport:
    """Full analytic report at one parameter point."""
    theta = params.theta
    if strict:
        service_geometry(params.d_f, cfg, theta)  # domain check
    x = params.area(cfg)
    se_o = avg_se_oms(x, cfg, theta, strict=False)
    return ThroughputReport.build(
        cfg,
        tput_fms=tput_fms(params.rho, x, params.beta, cfg, theta),
        tput_mms=tput_mms(params.rho, x, cfg),
        tput_oms=tput_oms(params.rho, x, params.beta, cfg, theta, se_oms=se_o),
        se_fms=avg_se_fms(cfg, theta),
        se_mms=avg_se_mms(cfg),
        se_oms=se_o,
        outage_oms=avg_outage_oms(params.d_f, cfg, theta),
    )
