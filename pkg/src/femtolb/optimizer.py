"""Joint choice of spectrum split, service area, dedication and thinning.

For a fixed service area ``x`` the best spectrum split is closed form, so
every mode reduces to a bounded search over ``x``:

* ``t_m(x)``  mMS throughput per unit of macro bandwidth,
* ``t_fo(x)`` the tighter of the fMS and oMS requirements per unit of femto
  bandwidth (``T_f / (M W rho)`` and ``T_o / (K W rho)``),

and the best mMS throughput at ``x`` is ``W t_m t_fo / (t_m + t_fo)``.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from . import analytic as an
from .model import ControlParams, NetworkConfig, ThroughputReport, service_radius
from .numerics import golden_section

log = logging.getLogger(__name__)

MODES = ("OA", "OA-Thin", "HA", "HA-Thin")
DEFAULT_THETAS = tuple(round(0.05 * k, 2) for k in range(1, 21))
TIE_TOL = 1e-9


# ---------------------------------------------------------------------------
# per-area terms

@dataclass(frozen=True)
class AbcdTerms:
    """Normalised throughput terms at one or many service areas.

    ``a`` mMS throughput per unit macro bandwidth; ``b`` fMS throughput per
    unit femto bandwidth with full dedication, over ``M``; ``c`` the same with
    round-robin sharing; ``d`` oMS throughput per unit femto bandwidth over
    ``K`` (infinite when ``K = 0``).
    """

    a: np.ndarray
    b: np.ndarray
    c: np.ndarray
    d: np.ndarray

    def oa_fo(self):
        return np.minimum(self.c, self.d)

    def ha_fo(self):
        a, b, c, d = np.broadcast_arrays(self.a, self.b, self.c, self.d)
        with np.errstate(invalid="ignore", divide="ignore"):
            balanced = np.where(np.isinf(d), b, b * d / (b - c + d))
        return np.where(d >= c, balanced, d)

    def ha_beta(self):
        a, b, c, d = np.broadcast_arrays(self.a, self.b, self.c, self.d)
        with np.errstate(invalid="ignore", divide="ignore"):
            beta = np.where(np.isinf(d), 1.0, (d - c) / (b - c + d))
        return np.clip(np.where(d >= c, beta, 0.0), 0.0, 1.0)


def _scalar(v):
    v = np.asarray(v)
    return float(v) if v.ndim == 0 else v


def abcd_terms(x, cfg: NetworkConfig, theta: float = 1.0, se_oms=None) -> AbcdTerms:
    """Terms for service area(s) ``x``; ``se_oms`` may supply precomputed oMS efficiencies."""
    x = np.asarray(x, dtype=float)
    counts = [an.mean_counts(float(v), cfg) for v in np.atleast_1d(x)]
    n_m = np.array([c[0] for c in counts]).reshape(x.shape)
    n_o = np.array([c[1] for c in counts]).reshape(x.shape)
    bf = an.avg_se_fms(cfg, theta)
    a = an.avg_se_mms(cfg) * an.share_single(n_m)
    b = np.full(x.shape, theta * bf / cfg.benefit_ratio)
    c = b * an.share_single(n_o)
    if cfg.oms_ratio == 0:
        d = np.full(x.shape, np.inf)
    else:
        if se_oms is None:
            se_oms = np.array([an.avg_se_oms(float(v), cfg, theta, strict=False)
                               for v in np.atleast_1d(x)]).reshape(x.shape)
        d = theta * np.asarray(se_oms) * an.share_pair(n_o) / cfg.oms_ratio
    return AbcdTerms(*(np.asarray(v, dtype=float) for v in (a, b, c, d)))


def normalized_terms(x, cfg: NetworkConfig, theta: float = 1.0, mode: str = "OA", se_oms=None):
    """``(t_m, t_fo)`` at service area ``x``; hybrid modes use the best dedication."""
    terms = abcd_terms(x, cfg, theta, se_oms)
    fo = terms.ha_fo() if mode.startswith("HA") else terms.oa_fo()
    return _scalar(terms.a), _scalar(fo)


def _best_rho(t_m, t_fo):
    t_m = np.asarray(t_m, dtype=float)
    return _scalar(np.where(np.isinf(t_fo), 0.0, t_m / (t_m + t_fo)))


def optimal_rho(x, cfg: NetworkConfig, theta: float = 1.0, mode: str = "OA", se_oms=None):
    """Smallest femto share meeting the binding requirement: ``t_m / (t_m + t_fo)``."""
    t_m, t_fo = normalized_terms(x, cfg, theta, mode, se_oms)
    return _best_rho(t_m, t_fo)


def optimal_beta(x, cfg: NetworkConfig, theta: float = 1.0, se_oms=None):
    """Dedication that balances ``T_f / M`` against ``T_o / K`` (0 if the oMS side binds)."""
    return _scalar(abcd_terms(x, cfg, theta, se_oms).ha_beta())


def _mms_value(t_m, t_fo):
    t_m = np.asarray(t_m, dtype=float)
    t_fo = np.asarray(t_fo, dtype=float)
    return np.where(np.isinf(t_fo), t_m, t_m * t_fo / (t_m + t_fo))


# ---------------------------------------------------------------------------
# structural conditions

@dataclass(frozen=True)
class FmsLimitedReport:
    sufficient: bool      # closed-form sufficient condition holds
    ratio: float          # left side of that condition
    bound: float          # M / K
    direct: bool          # K T_f <= M T_o verified on the x-grid

    @property
    def limited(self) -> bool:
        return self.sufficient or self.direct


def _area_grid(cfg: NetworkConfig, theta: float, n: int):
    x_lo, x_hi = an.area_bounds(cfg, theta)
    xs = np.linspace(x_lo, x_hi, n) if x_hi > x_lo else np.array([x_lo])
    radii = np.minimum(np.asarray(service_radius(xs, cfg.lambda_f), dtype=float), an.find_dmax(cfg, theta))
    radii = np.maximum(radii, cfg.home_radius)
    return xs, radii


def _se_on_grid(cfg: NetworkConfig, theta: float, n: int):
    xs, radii = _area_grid(cfg, theta, n)
    se, _ = an.oms_profile(radii, cfg, theta)
    return xs, se


def fms_limited_check(cfg: NetworkConfig, theta: float = 1.0, grid: int = 200) -> FmsLimitedReport:
    """Whether the fMS requirement binds for every feasible service area.

    Evaluates both the closed-form sufficient condition (sharing factors at
    ``X_min``, oMS efficiency at ``X_max``) and the definition on a grid.
    """
    if cfg.oms_ratio == 0:
        return FmsLimitedReport(True, 0.0, math.inf, True)
    x_lo, x_hi = an.area_bounds(cfg, theta)
    _, n_o_lo = an.mean_counts(x_lo, cfg)
    se_hi = an.avg_se_oms(x_hi, cfg, theta, strict=False)
    ratio = an.avg_se_fms(cfg, theta) * an.share_single(n_o_lo) / (se_hi * an.share_pair(n_o_lo))
    bound = cfg.benefit_ratio / cfg.oms_ratio
    xs, se = _se_on_grid(cfg, theta, grid)
    terms = abcd_terms(xs, cfg, theta, se)
    direct = bool(np.all(terms.c <= terms.d))
    return FmsLimitedReport(bool(ratio <= bound), float(ratio), float(bound), direct)


@dataclass(frozen=True)
class CoverageCondition:
    quantity: float       # N_f theta B_f / (M B_m)
    users_ok: bool        # macro users at X_max >= users of one femtocell at X_max
    holds: bool


def prop4_check(cfg: NetworkConfig, theta: float = 1.0) -> CoverageCondition:
    """Sufficient condition for the largest feasible service area being optimal."""
    q = cfg.fbs_mean * theta * an.avg_se_fms(cfg, theta) / (cfg.benefit_ratio * an.avg_se_mms(cfg))
    _, x_hi = an.area_bounds(cfg, theta)
    n_m, n_o = an.mean_counts(x_hi, cfg)
    users_ok = bool(n_m >= n_o)
    return CoverageCondition(float(q), users_ok, bool(q > 1.0 and users_ok))


def reciprocal_objective(x, cfg: NetworkConfig, theta: float = 1.0):
    """``1/t_fo + 1/t_m`` when the fMS requirement binds (minimise this)."""
    terms = abcd_terms(x, cfg, theta, se_oms=np.zeros(np.shape(x)))
    return _scalar(1.0 / terms.c + 1.0 / terms.a)


def convexity_bracket(y):
    """``(y+2) e^-y + y - 2``, non-negative for ``y > 0``; cancellation-free form."""
    y = np.asarray(y, dtype=float)
    return _scalar((y + 2.0) * np.expm1(-y) + 2.0 * y)


@dataclass(frozen=True)
class ConvexityReport:
    min_scaled_second_difference: float
    bracket_min: float
    verified: bool


def verify_convexity(cfg: NetworkConfig, theta: float = 1.0, points: int = 1000,
                     tol: float = 1e-9) -> ConvexityReport:
    """Second differences of the reciprocal objective over ``[X_min, X_max]``.

    Differences are scaled by the objective's magnitude so the test is
    unit-free; the analytic bracket is checked on the femto user counts seen.
    """
    x_lo, x_hi = an.area_bounds(cfg, theta)
    if x_hi <= x_lo:
        return ConvexityReport(0.0, 0.0, True)
    xs = np.linspace(x_lo, x_hi, points)
    f = np.asarray(reciprocal_objective(xs, cfg, theta))
    second = f[2:] - 2.0 * f[1:-1] + f[:-2]
    scaled = second / np.max(np.abs(f))
    ys = np.array([an.mean_counts(float(v), cfg)[1] for v in xs])
    bracket = np.asarray(convexity_bracket(ys))
    min_scaled = float(scaled.min())
    return ConvexityReport(min_scaled, float(bracket.min()), bool(min_scaled >= -tol and bracket.min() >= 0))


# ---------------------------------------------------------------------------
# solvers

@dataclass(frozen=True)
class OptimizationResult:
    mode: str
    params: ControlParams
    x: float
    objective: float               # optimal mean mMS throughput [bit/s]
    report: ThroughputReport
    feasible: bool = True
    fms_limited: Optional[bool] = None
    prop3_sufficient: Optional[bool] = None
    prop4_condition: Optional[bool] = None
    convexity_verified: Optional[bool] = None
    binding: str = "fms"
    d_max: float = float("nan")
    x_min: float = float("nan")
    x_max: float = float("nan")
    extra: dict = field(default_factory=dict)

    def as_dict(self) -> dict:
        row = {"mode": self.mode, "rho": self.params.rho, "d_f": self.params.d_f,
               "beta": self.params.beta, "theta": self.params.theta, "x": self.x,
               "objective": self.objective, "feasible": self.feasible,
               "fms_limited": self.fms_limited, "prop3_sufficient": self.prop3_sufficient,
               "prop4_condition": self.prop4_condition,
               "convexity_verified": self.convexity_verified, "binding": self.binding,
               "d_max": self.d_max, "x_min": self.x_min, "x_max": self.x_max}
        row.update(self.report.as_dict())
        return row


def _pick(xs, vals):
    """Index of the smallest ``x`` whose value is within ``TIE_TOL`` (relative) of the max."""
    vals = np.asarray(vals, dtype=float)
    best = np.nanmax(vals)
    ok = vals >= best - TIE_TOL * abs(best)
    return int(np.argmax(ok))


def _refine(fun, xs, i, best_val):
    """Golden-section refinement in the two grid cells around ``xs[i]``."""
    if xs.size < 2:
        return float(xs[i]), best_val
    lo = float(xs[max(i - 1, 0)])
    hi = float(xs[min(i + 1, xs.size - 1)])
    width = float(xs[-1] - xs[0])
    x_ref, neg = golden_section(lambda v: -fun(v), lo, hi, 1e-6 * width)
    if -neg > best_val + TIE_TOL * abs(best_val):
        return float(x_ref), float(-neg)
    return float(xs[i]), best_val


def _binding(terms: AbcdTerms, mode: str) -> str:
    c, d = float(terms.c), float(terms.d)
    if mode.startswith("HA") and d >= c:
        return "fms+oms"
    return "fms" if c <= d else "oms"


def _assemble(mode, cfg, theta, x, feasible, **diag) -> OptimizationResult:
    terms = abcd_terms(x, cfg, theta)
    hybrid = mode.startswith("HA")
    fo = float(terms.ha_fo() if hybrid else terms.oa_fo())
    beta = float(terms.ha_beta()) if hybrid else 0.0
    t_m = float(terms.a)
    rho = float(_best_rho(t_m, fo))
    d_f = float(service_radius(x, cfg.lambda_f))
    d_max = an.find_dmax(cfg, theta)
    d_f = min(max(d_f, cfg.home_radius), d_max) if feasible else cfg.home_radius
    params = ControlParams(rho=rho, d_f=d_f, beta=beta, theta=theta)
    report = an.analyze(params, cfg, strict=False)
    x_lo, x_hi = an.area_bounds(cfg, theta)
    return OptimizationResult(
        mode=mode, params=params, x=float(x), objective=report.tput_mms, report=report,
        feasible=feasible, binding=_binding(terms, mode), d_max=d_max, x_min=x_lo, x_max=x_hi,
        **diag)


def _infeasible(mode, cfg, theta) -> OptimizationResult:
    log.warning("outage at the home radius already exceeds O_max; coverage cannot expand")
    return _assemble(mode, cfg, theta, cfg.x_min, False)


def solve_oa(cfg: NetworkConfig, theta: float = 1.0, *, grid: int = 512) -> OptimizationResult:
    """Open access: best ``(rho, x)`` with ``beta = 0`` at fixed ``theta``."""
    search = an.dmax_search(cfg, theta)
    if search.outage_at_dh >= cfg.outage_cap:
        return _infeasible("OA", cfg, theta)
    x_lo, x_hi = an.area_bounds(cfg, theta)
    limited = fms_limited_check(cfg, theta)
    cond = prop4_check(cfg, theta)
    diag = dict(fms_limited=limited.limited, prop3_sufficient=limited.sufficient,
                prop4_condition=cond.holds)
    if x_hi <= x_lo:
        return _assemble("OA", cfg, theta, x_lo, True, **diag)
    if limited.limited:
        # fMS side binds everywhere: the reciprocal objective is convex
        conv = verify_convexity(cfg, theta)
        xs = np.linspace(x_lo, x_hi, grid)
        vals = -np.asarray(reciprocal_objective(xs, cfg, theta))
        i = _pick(xs, vals)
        x_star, _ = _refine(lambda v: -reciprocal_objective(v, cfg, theta), xs, i, float(vals[i]))
        diag["convexity_verified"] = conv.verified
    else:
        xs, se = _se_on_grid(cfg, theta, grid)
        vals = _mms_value(*normalized_terms(xs, cfg, theta, "OA", se))

        def fun(v):
            return float(_mms_value(*normalized_terms(v, cfg, theta, "OA")))

        i = _pick(xs, vals)
        x_star, _ = _refine(fun, xs, i, float(vals[i]))
    return _assemble("OA", cfg, theta, x_star, True, **diag)


def solve_ha(cfg: NetworkConfig, theta: float = 1.0, *, grid: int = 2000) -> OptimizationResult:
    """Hybrid access: best ``(rho, x, beta)``; dense grid over ``x`` then local refinement."""
    mode = "HA"
    search = an.dmax_search(cfg, theta)
    if search.outage_at_dh >= cfg.outage_cap:
        return _infeasible(mode, cfg, theta)
    x_lo, x_hi = an.area_bounds(cfg, theta)
    limited = fms_limited_check(cfg, theta)
    diag = dict(fms_limited=limited.limited, prop3_sufficient=limited.sufficient,
                prop4_condition=prop4_check(cfg, theta).holds)
    if x_hi <= x_lo:
        return _assemble(mode, cfg, theta, x_lo, True, **diag)
    xs, se = _se_on_grid(cfg, theta, grid)
    vals = _mms_value(*normalized_terms(xs, cfg, theta, mode, se))

    def fun(v):
        return float(_mms_value(*normalized_terms(v, cfg, theta, mode)))

    i = _pick(xs, vals)
    x_star, _ = _refine(fun, xs, i, float(vals[i]))
    return _assemble(mode, cfg, theta, x_star, True, **diag)


def _sweep(solver, mode, cfg, thetas: Sequence[float], **kw) -> OptimizationResult:
    thetas = sorted(set(float(t) for t in thetas))
    if not thetas or thetas[0] <= 0 or thetas[-1] > 1:
        raise ValueError("theta grid must be non-empty and inside (0, 1]")
    best = None
    per_theta = {}
    for th in thetas:
        res = solver(cfg, th, **kw)
        per_theta[th] = res.objective if res.feasible else float("nan")
        if not res.feasible:
            continue
        # ties go to the larger theta (less thinning)
        if best is None or res.objective >= best.objective * (1 - TIE_TOL):
            best = res
    if best is None:
        best = solver(cfg, thetas[-1], **kw)
    extra = dict(best.extra, per_theta=per_theta)
    return OptimizationResult(**{**best.__dict__, "mode": mode, "extra": extra})


def solve_oa_thin(cfg: NetworkConfig, thetas: Sequence[float] = DEFAULT_THETAS, **kw) -> OptimizationResult:
    """Open access with the thinning probability chosen from ``thetas``."""
    return _sweep(solve_oa, "OA-Thin", cfg, thetas, **kw)


def solve_ha_thin(cfg: NetworkConfig, thetas: Sequence[float] = DEFAULT_THETAS, **kw) -> OptimizationResult:
    return _sweep(solve_ha, "HA-Thin", cfg, thetas, **kw)


def solve(mode: str, cfg: NetworkConfig, theta: float = 1.0, thetas=DEFAULT_THETAS, **kw) -> OptimizationResult:
    if mode == "OA":
        return solve_oa(cfg, theta, **kw)
    if mode == "HA":
        return solve_ha(cfg, theta, **kw)
    if mode == "OA-Thin":
        return solve_oa_thin(cfg, thetas, **kw)
    if mode == "HA-Thin":
        return solve_ha_thin(cfg, thetas, **kw)
    raise ValueError(f"unknown mode {mode!r}; expected one of {MODES}")
