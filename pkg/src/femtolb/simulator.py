"""Drop-based Monte Carlo simulator of the two-tier network.

Each drop places fBSs (hard-core Poisson, spacing ``2 D_h``), one owner per
fBS inside its home disk and Poisson macro users, associates users according
to the scheme, and computes every user's expected spectral efficiency.

Fading is averaged per drop. By default the average over Rayleigh fading and
Bernoulli interferer activity is computed exactly from the conditional
success probability

    Pr[SINR >= G] = exp(-s N) * prod_j (1 - theta_j + theta_j / (1 + s P_j g_j)),
    s = G / (P_0 g_0),

which is the limit of infinitely many fading samples. ``fading_samples > 0``
switches to explicit sampling.

Per-drop records hold sums that are linear in the resource split, so one
campaign yields throughputs for any ``rho`` and ``beta``.
"""

from __future__ import annotations

import json
import logging
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from typing import IO, Optional, Sequence

import numpy as np
from scipy.spatial import cKDTree

from .model import ControlParams, LinkClass, NetworkConfig, ThroughputReport

log = logging.getLogger(__name__)

SCHEMES = ("OA", "OA-Thin", "HA", "HA-Thin", "CoRSSI", "CoLB", "DivRSSI", "CoCA", "DivCA")
PROPOSED = frozenset({"OA", "OA-Thin", "HA", "HA-Thin"})
CO_CHANNEL = frozenset({"CoRSSI", "CoLB", "CoCA"})
CLOSED = frozenset({"CoCA", "DivCA"})
RSSI_BASED = frozenset({"CoRSSI", "CoLB", "DivRSSI"})

WORKERS_ENV = "FEMTOLB_WORKERS"
FBS_REGION_FACTOR = 3.0      # fBSs are dropped out to this many macro radii
MAX_ATTEMPTS = 10_000
_MIN_DIST = 1e-6             # keeps pathloss finite at zero distance

MMS, FMS, OMS = 0, 1, 2


class PlacementError(RuntimeError):
    pass


def default_workers() -> int:
    try:
        return max(1, int(os.environ.get(WORKERS_ENV, "1")))
    except ValueError:
        return 1


# ---------------------------------------------------------------------------
# scheme description

@dataclass(frozen=True)
class SchemeSpec:
    scheme: str
    params: Optional[ControlParams] = None   # proposed schemes (rho, d_f, beta, theta)
    delta_db: float = 0.0                    # CoLB association bias
    rho: Optional[float] = None              # femto share for DivRSSI / DivCA
    n_max: Optional[int] = None              # admission cap per fBS, owner included
    k_in: Optional[float] = None             # indoor user density factor override
    margin: Optional[float] = None           # user region beyond the macro radius [m]

    def __post_init__(self):
        if self.scheme not in SCHEMES:
            raise ValueError(f"unknown scheme {self.scheme!r}")
        if self.scheme in PROPOSED and self.params is None:
            raise ValueError(f"{self.scheme} needs control parameters")
        if self.delta_db < 0:
            raise ValueError("delta_db must be >= 0")
        if self.n_max is not None and self.n_max < 1:
            raise ValueError("n_max must be >= 1")
        if self.rho is not None and not 0.0 <= self.rho <= 1.0:
            raise ValueError("rho must lie in [0, 1]")
        if self.k_in is not None and self.k_in < 1:
            raise ValueError("k_in must be >= 1")

    @property
    def orthogonal(self) -> bool:
        return self.scheme not in CO_CHANNEL

    @property
    def theta(self) -> float:
        return self.params.theta if self.scheme in PROPOSED else 1.0

    @property
    def beta(self) -> float:
        return self.params.beta if self.scheme in PROPOSED else 0.0

    @property
    def split(self) -> float:
        """Femto share of the band (co-channel schemes reuse the whole band)."""
        if self.scheme in PROPOSED:
            return self.params.rho
        if self.scheme in CO_CHANNEL:
            return 1.0
        return 0.5 if self.rho is None else self.rho

    def bandwidth_factors(self, cfg: NetworkConfig, rho: float = None, beta: float = None):
        """``(macro, femto, beta)``: bandwidth multipliers applied to per-user sums."""
        w = cfg.bandwidth
        beta = self.beta if beta is None else beta
        if not self.orthogonal:
            return w, w, 0.0
        rho = self.split if rho is None else rho
        return (1.0 - rho) * w, self.theta * rho * w, beta

    def user_margin(self, cfg: NetworkConfig) -> float:
        """How far beyond the macro edge users must exist for unbiased femto cells."""
        if self.margin is not None:
            return self.margin
        if self.scheme in PROPOSED:
            reach = self.params.d_f
        elif self.scheme in CLOSED:
            reach = 0.0
        else:
            # femto wins while delta pf (z4 d)^-4 > pm (z1 (D_m + d))^-4
            pl = cfg.pathloss
            q = ((10 ** (self.delta_db / 10) * cfg.pf / cfg.pm) ** 0.25
                 * pl[LinkClass.OUTDOOR].z / pl[LinkClass.INDOOR_TO_OUTDOOR].z)
            reach = cfg.macro_radius * q / (1 - q) if q < 0.9 else 2.0 * cfg.macro_radius
            reach *= 1.1
        return float(min(2.0 * cfg.macro_radius, reach + cfg.home_radius))


# ---------------------------------------------------------------------------
# drops

@dataclass(frozen=True)
class Drop:
    fbs: np.ndarray        # (F, 2) fBS positions, mBS at the origin
    fms: np.ndarray        # (F, 2) owner positions
    users: np.ndarray      # (U, 2) macro user positions
    home: np.ndarray       # (U,) index of the home disk containing the user, -1 outdoors
    seed: int
    macro_radius: float

    @property
    def inside(self) -> np.ndarray:
        """fBSs that belong to the simulated macrocell."""
        return np.hypot(self.fbs[:, 0], self.fbs[:, 1]) <= self.macro_radius

    @property
    def users_inside(self) -> np.ndarray:
        return np.hypot(self.users[:, 0], self.users[:, 1]) <= self.macro_radius


def _uniform_disk(rng, n, radius, center=(0.0, 0.0)):
    r = radius * np.sqrt(rng.random(n))
    phi = 2.0 * math.pi * rng.random(n)
    return np.column_stack((center[0] + r * np.cos(phi), center[1] + r * np.sin(phi)))


def _hard_core(rng, n, radius, spacing):
    """``n`` uniform points in a disk; points closer than ``spacing`` to an earlier point are redrawn."""
    pts = _uniform_disk(rng, n, radius)
    if n < 2 or spacing <= 0:
        return pts
    for _ in range(MAX_ATTEMPTS):
        pairs = cKDTree(pts).query_pairs(spacing, output_type="ndarray")
        if pairs.size == 0:
            return pts
        bad = np.unique(pairs.max(axis=1))     # the later point of each pair moves
        pts[bad] = _uniform_disk(rng, bad.size, radius)
    raise PlacementError(f"could not place {n} fBSs with spacing {spacing} m in {MAX_ATTEMPTS} rounds")


def _home_index(points, fbs, home_radius):
    if fbs.shape[0] == 0 or points.shape[0] == 0:
        return np.full(points.shape[0], -1, dtype=int)
    d = np.hypot(points[:, None, 0] - fbs[None, :, 0], points[:, None, 1] - fbs[None, :, 1])
    nearest = d.argmin(axis=1)
    return np.where(d[np.arange(points.shape[0]), nearest] < home_radius, nearest, -1)


def _seed_int(seed) -> int:
    if isinstance(seed, np.random.SeedSequence):
        lo, hi = seed.generate_state(2, dtype=np.uint32)
        return int(lo) | (int(hi) << 32)
    return int(seed)


def generate_drop(cfg: NetworkConfig, seed, k_in: float = None, user_radius: float = None,
                  rng: np.random.Generator = None) -> Drop:
    """Random deployment: hard-core Poisson fBSs, owners, Poisson users.

    fBSs cover a disk of ``3 D_m`` so the interference field around the
    macrocell is nearly the infinite one. Users cover ``user_radius``
    (default ``D_m``). With ``k_in > 1`` home disks hold ``k_in`` times the
    outdoor user density, and the outdoor density is lowered so the mean
    number of users per macrocell is unchanged.
    """
    if rng is None:
        rng = np.random.default_rng(seed)
    dm, dh = cfg.macro_radius, cfg.home_radius
    fbs_radius = FBS_REGION_FACTOR * dm
    user_radius = dm if user_radius is None else user_radius
    n_f = rng.poisson(cfg.lambda_f * math.pi * fbs_radius ** 2)
    fbs = _hard_core(rng, n_f, fbs_radius, 2.0 * dh)
    fms = np.empty_like(fbs)
    if n_f:
        fms = fbs + _uniform_disk(rng, n_f, dh)
    k_in = cfg.indoor_density_factor if k_in is None else k_in
    hetero_cfg = cfg.replace(indoor_density_factor=k_in)
    lam_out = hetero_cfg.lambda_u_outdoor
    users = _uniform_disk(rng, rng.poisson(lam_out * math.pi * user_radius ** 2), user_radius)
    if k_in > 1 and n_f:
        near = np.flatnonzero(np.hypot(fbs[:, 0], fbs[:, 1]) <= user_radius + dh)
        counts = rng.poisson((k_in - 1.0) * lam_out * math.pi * dh ** 2, near.size)
        extra = [_uniform_disk(rng, c, dh, fbs[j]) for j, c in zip(near, counts) if c]
        if extra:
            extra = np.concatenate(extra)
            extra = extra[np.hypot(extra[:, 0], extra[:, 1]) <= user_radius]
            users = np.concatenate((users, extra))
    home = _home_index(users, fbs, dh)
    return Drop(fbs=fbs, fms=fms, users=users, home=home, seed=_seed_int(seed), macro_radius=dm)


# ---------------------------------------------------------------------------
# channel

def _gains(cfg: NetworkConfig, rx: np.ndarray, rx_home: np.ndarray, fbs: np.ndarray):
    """Mean gains from every fBS and from the mBS to each receiver.

    Link classes follow receiver and transmitter placement: same home is
    indoor, another home is indoor-to-indoor, outdoors is indoor-to-outdoor;
    the mBS reaches indoor receivers through one wall.
    """
    pl = cfg.pathloss
    alpha = np.array([pl[c].exponent for c in LinkClass])
    z = np.array([pl[c].z for c in LinkClass])
    d = np.hypot(rx[:, None, 0] - fbs[None, :, 0], rx[:, None, 1] - fbs[None, :, 1])
    d = np.maximum(d, _MIN_DIST)
    cls = np.where(rx_home[:, None] < 0, int(LinkClass.INDOOR_TO_OUTDOOR), int(LinkClass.INDOOR_TO_INDOOR))
    own = rx_home[:, None] == np.arange(fbs.shape[0])[None, :]
    cls = np.where(own, int(LinkClass.INDOOR), cls)
    g_f = (z[cls - 1] * d) ** (-alpha[cls - 1])
    d0 = np.maximum(np.hypot(rx[:, 0], rx[:, 1]), _MIN_DIST)
    cls0 = np.where(rx_home < 0, int(LinkClass.OUTDOOR), int(LinkClass.OUTDOOR_TO_INDOOR))
    g_m = (z[cls0 - 1] * d0) ** (-alpha[cls0 - 1])
    return g_f, g_m


# ---------------------------------------------------------------------------
# association

@dataclass(frozen=True)
class Assignment:
    cell: np.ndarray       # (U,) serving fBS index, -1 for the mBS


def _preferences(drop: Drop, spec: SchemeSpec, cfg: NetworkConfig, ranked: bool):
    """fBS candidates per user, best first, flagged when they beat the mBS.

    Without ``ranked`` only the best candidate is returned.
    """
    n_u, n_f = drop.users.shape[0], drop.fbs.shape[0]
    if n_f == 0 or n_u == 0 or spec.scheme in CLOSED:
        return np.zeros((n_u, 0), dtype=int), np.zeros((n_u, 0), dtype=bool)
    if spec.scheme in PROPOSED:
        k = min(n_f, 32) if ranked else 1
        d, order = cKDTree(drop.fbs).query(drop.users, k=k)
        d, order = d.reshape(n_u, k), order.reshape(n_u, k)
        return order, d <= spec.params.d_f
    g_f, g_m = _gains(cfg, drop.users, drop.home, drop.fbs)
    bias = 10 ** (spec.delta_db / 10) if spec.scheme == "CoLB" else 1.0
    score = cfg.pf * g_f
    if ranked:
        order = np.argsort(-score, axis=1, kind="stable")
    else:
        order = score.argmax(axis=1)[:, None]
    best = np.take_along_axis(score, order, axis=1)
    return order, bias * best > (cfg.pm * g_m)[:, None]


def associate(drop: Drop, spec: SchemeSpec, cfg: NetworkConfig,
              rng: np.random.Generator = None) -> Assignment:
    """Serving cell of every macro user; owners always stay on their own fBS.

    Proposed schemes: nearest fBS within ``d_f``. RSSI schemes: strongest mean
    received power (CoLB biases the femto side by ``delta``). Closed access:
    macro users never join an fBS. With an admission cap, users are taken in
    random order and fall back to their next-best cell when an fBS is full.
    """
    n_u = drop.users.shape[0]
    order, ok = _preferences(drop, spec, cfg, ranked=spec.n_max is not None)
    cell = np.full(n_u, -1, dtype=int)
    if order.shape[1] == 0:
        return Assignment(cell)
    if spec.n_max is None:
        first = ok[:, 0]
        cell[first] = order[first, 0]
        return Assignment(cell)
    if rng is None:
        rng = np.random.default_rng(drop.seed)
    free = np.full(drop.fbs.shape[0], spec.n_max - 1, dtype=int)  # owner holds one slot
    for u in rng.permutation(n_u):
        for j, good in zip(order[u], ok[u]):
            if not good:
                break
            if free[j] > 0:
                free[j] -= 1
                cell[u] = j
                break
    return Assignment(cell)


# ---------------------------------------------------------------------------
# per-drop evaluation

RECORD_FIELDS = ("n_fbs", "n_users", "m_count", "m_se", "m_unit", "m_out",
                 "f_count", "f_se", "f_unit", "f_out", "o_count", "o_se", "o_unit", "o_out")


@dataclass(frozen=True)
class DropResult:
    role: np.ndarray       # MMS / FMS / OMS per evaluated receiver
    cell: np.ndarray       # serving fBS (-1 for mBS)
    se: np.ndarray         # fading-averaged spectral efficiency [bit/s/Hz]
    outage: np.ndarray     # probability of SINR below the lowest threshold
    share: np.ndarray      # 1 / number of users sharing the serving cell
    n_fbs: int
    n_users: int

    def record(self) -> np.ndarray:
        """Per-class sums, in ``RECORD_FIELDS`` order."""
        out = [float(self.n_fbs), float(self.n_users)]
        for role in (MMS, FMS, OMS):
            m = self.role == role
            out += [float(m.sum()), float(self.se[m].sum()), float((self.se[m] * self.share[m]).sum()),
                    float(self.outage[m].sum())]
        return np.array(out)

    def throughputs(self, spec: SchemeSpec, cfg: NetworkConfig, rho: float = None,
                    beta: float = None) -> np.ndarray:
        """Per-user throughput [bit/s] under round-robin scheduling."""
        macro, femto, beta = spec.bandwidth_factors(cfg, rho, beta)
        shared = self.se * self.share
        return np.select(
            [self.role == MMS, self.role == FMS],
            [macro * shared, femto * (beta * self.se + (1.0 - beta) * shared)],
            femto * (1.0 - beta) * shared)


def _success(cfg, thresholds, p0g0, q, activity):
    """Exact fading/activity average of ``Pr[SINR >= G_l]``, shape (R, L)."""
    s = thresholds[None, :] / p0g0[:, None]                     # (R, L)
    expo = s * cfg.noise
    rows = np.flatnonzero(q.any(axis=1))                         # noise-only rows skip the product
    if rows.size:
        qr = q[rows]
        cols = np.flatnonzero(qr.any(axis=0))
        x = s[rows, :, None] * qr[:, None, cols]                 # (R', L, J')
        expo[rows] -= np.log1p(-activity[None, None, cols] * x / (1.0 + x)).sum(axis=2)
    return np.exp(-expo)


def _sampled(cfg, rates, p0g0, q, activity, samples, rng):
    n_r, n_j = q.shape
    se = np.empty(n_r)
    out = np.empty(n_r)
    for r in range(n_r):
        h0 = rng.exponential(size=samples)
        h = rng.exponential(size=(samples, n_j))
        on = rng.random((samples, n_j)) < activity[None, :]
        sinr = p0g0[r] * h0 / (cfg.noise + (q[r][None, :] * h * on).sum(axis=1))
        se[r] = rates.efficiency_linear(sinr).mean()
        out[r] = np.mean(sinr < rates.thresholds[0])
    return se, out


def evaluate_drop(drop: Drop, assignment: Assignment, spec: SchemeSpec, cfg: NetworkConfig,
                  fading_samples: int = 0, rng: np.random.Generator = None) -> DropResult:
    """Spectral efficiency, outage and cell share of every counted user.

    Counted users: owners of fBSs inside the macrocell, users served by those
    fBSs (wherever they stand), and users inside the macrocell served by the mBS.
    """
    inside_f = drop.inside
    cell = assignment.cell
    users_in = drop.users_inside
    n_f = drop.fbs.shape[0]
    served_by_inside = (cell >= 0) & inside_f[np.maximum(cell, 0)] if n_f else np.zeros_like(cell, bool)
    mms = (cell < 0) & users_in
    if spec.scheme in CLOSED:
        oms = np.zeros_like(mms)
    else:
        oms = served_by_inside
    owners = np.flatnonzero(inside_f)

    rx = np.concatenate((drop.users[mms], drop.users[oms], drop.fms[owners]))
    rx_home = np.concatenate((drop.home[mms], drop.home[oms], owners))
    rx_cell = np.concatenate((np.full(int(mms.sum()), -1), cell[oms], owners))
    role = np.concatenate((np.full(int(mms.sum()), MMS), np.full(int(oms.sum()), OMS),
                           np.full(owners.size, FMS)))

    g_f, g_m = _gains(cfg, rx, rx_home, drop.fbs)
    femto = rx_cell >= 0
    idx = np.arange(rx.shape[0])
    p0g0 = np.where(femto, cfg.pf * g_f[idx, np.maximum(rx_cell, 0)] if n_f else 0.0, cfg.pm * g_m)

    # interferer powers: fBS columns then the mBS column
    theta = spec.theta
    q = np.zeros((rx.shape[0], n_f + 1))
    if spec.orthogonal:
        q[femto, :n_f] = cfg.pf * g_f[femto]
    else:
        q[:, :n_f] = cfg.pf * g_f
        q[femto, n_f] = cfg.pm * g_m[femto]
    if n_f:
        q[femto, rx_cell[femto]] = 0.0
    activity = np.concatenate((np.full(n_f, theta), [1.0]))

    rates = cfg.rates
    if fading_samples:
        if rng is None:
            rng = np.random.default_rng(drop.seed)
        se, outage = _sampled(cfg, rates, p0g0, q, activity, fading_samples, rng)
    else:
        succ = _success(cfg, rates.thresholds, p0g0, q, activity)
        se = succ @ rates.increments
        outage = 1.0 - succ[:, 0]

    # round-robin shares
    n_m = int(mms.sum())
    share = np.empty(rx.shape[0])
    share[role == MMS] = 1.0 / max(n_m, 1)
    load = np.bincount(cell[oms], minlength=n_f) if n_f else np.zeros(0, int)
    share[femto] = 1.0 / (load[rx_cell[femto]] + 1.0)
    return DropResult(role=role, cell=rx_cell, se=se, outage=outage, share=share,
                      n_fbs=int(inside_f.sum()), n_users=int(users_in.sum()))


# ---------------------------------------------------------------------------
# campaigns

def drop_seed(base_seed: int, index: int) -> np.random.SeedSequence:
    return np.random.SeedSequence(entropy=int(base_seed), spawn_key=(int(index),))


def simulate_drop(index: int, spec: SchemeSpec, cfg: NetworkConfig, base_seed: int,
                  fading_samples: int = 0) -> np.ndarray:
    """One drop, fully determined by ``(base_seed, index)``; returns its record."""
    seq = drop_seed(base_seed, index)
    rng = np.random.default_rng(seq)
    drop = generate_drop(cfg, seq, k_in=spec.k_in, user_radius=cfg.macro_radius + spec.user_margin(cfg),
                         rng=rng)
    assignment = associate(drop, spec, cfg, rng)
    return evaluate_drop(drop, assignment, spec, cfg, fading_samples, rng).record()


def _chunk(args):
    start, stop, spec, cfg, base_seed, fading_samples = args
    return np.array([simulate_drop(i, spec, cfg, base_seed, fading_samples) for i in range(start, stop)])


def _ratio(num: np.ndarray, den: np.ndarray):
    """Ratio-of-sums estimate and its delta-method standard error."""
    n = num.size
    total = den.sum()
    if total == 0:
        return float("nan"), float("nan")
    r = num.sum() / total
    if n < 2:
        return float(r), float("nan")
    resid = num - r * den
    se = math.sqrt((resid ** 2).sum() / (n * (n - 1))) / (total / n)
    return float(r), float(se)


@dataclass(frozen=True)
class SimEstimate:
    spec: SchemeSpec
    cfg: NetworkConfig
    base_seed: int
    records: np.ndarray    # (drops, len(RECORD_FIELDS))
    fading_samples: int = 0

    @property
    def drops(self) -> int:
        return self.records.shape[0]

    def column(self, name: str) -> np.ndarray:
        return self.records[:, RECORD_FIELDS.index(name)]

    def ratio(self, num: str, den: str):
        return _ratio(self.column(num), self.column(den))

    def unit_terms(self):
        """Per-user sums normalised by user counts: mMS, fMS shared, fMS alone, oMS shared."""
        return {
            "m_unit": self.ratio("m_unit", "m_count"),
            "f_unit": self.ratio("f_unit", "f_count"),
            "f_se": self.ratio("f_se", "f_count"),
            "o_unit": self.ratio("o_unit", "o_count"),
        }

    def metrics(self, rho: float = None, beta: float = None) -> dict:
        """``name -> (mean, standard error)`` for the nine report quantities."""
        macro, femto, beta = self.spec.bandwidth_factors(self.cfg, rho, beta)
        f_mix = beta * self.column("f_se") + (1.0 - beta) * self.column("f_unit")
        out = {
            "se_fms": self.ratio("f_se", "f_count"),
            "se_mms": self.ratio("m_se", "m_count"),
            "se_oms": self.ratio("o_se", "o_count"),
            "outage_oms": self.ratio("o_out", "o_count"),
        }
        tf = _ratio(f_mix, self.column("f_count"))
        tm = self.ratio("m_unit", "m_count")
        to = self.ratio("o_unit", "o_count")
        out["tput_fms"] = (femto * tf[0], femto * tf[1])
        out["tput_mms"] = (macro * tm[0], macro * tm[1])
        out["tput_oms"] = (femto * (1.0 - beta) * to[0], femto * (1.0 - beta) * to[1])
        return out

    def report(self, rho: float = None, beta: float = None, z: float = 1.96) -> ThroughputReport:
        m = self.metrics(rho, beta)
        vals = {k: (0.0 if math.isnan(v[0]) else v[0]) for k, v in m.items()}
        return ThroughputReport.build(self.cfg, source="simulated",
                                      half_widths={k: z * v[1] for k, v in m.items()}, **vals)

    def mean_counts(self) -> dict:
        n = self.drops
        return {name: float(self.column(name).sum() / n) for name in ("n_fbs", "n_users", "m_count",
                                                                      "f_count", "o_count")}

    def outage_within_cap(self, sigmas: float = 3.0) -> bool:
        mean, se = self.ratio("o_out", "o_count")
        if math.isnan(mean):
            return True
        return mean <= self.cfg.outage_cap + sigmas * (0.0 if math.isnan(se) else se)


def run_campaign(spec: SchemeSpec, cfg: NetworkConfig, drops: int, base_seed: int = 0, *,
                 workers: int = None, fading_samples: int = 0, stream: IO[str] = None,
                 chunk_size: int = 64) -> SimEstimate:
    """Simulate ``drops`` independent drops and collect their records.

    Drop ``i`` uses the seed ``(base_seed, i)``, and records are stacked in
    drop order, so the result does not depend on ``workers``.
    """
    if drops < 1:
        raise ValueError("drops must be >= 1")
    workers = default_workers() if workers is None else max(1, int(workers))
    bounds = [(s, min(s + chunk_size, drops)) for s in range(0, drops, chunk_size)]
    jobs = [(a, b, spec, cfg, base_seed, fading_samples) for a, b in bounds]
    if workers == 1 or len(jobs) == 1:
        parts = [_chunk(j) for j in jobs]
    else:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            parts = list(pool.map(_chunk, jobs))
    records = np.concatenate(parts)
    if stream is not None:
        for i, rec in enumerate(records):
            row = {"drop": i, "seed": _seed_int(drop_seed(base_seed, i))}
            row.update({k: float(v) for k, v in zip(RECORD_FIELDS, rec)})
            stream.write(json.dumps(row) + "\n")
    return SimEstimate(spec=spec, cfg=cfg, base_seed=base_seed, records=records,
                       fading_samples=fading_samples)


# ---------------------------------------------------------------------------
# calibration of the comparison schemes

@dataclass(frozen=True)
class ColbCalibration:
    delta_db: float
    grid_db: np.ndarray
    outage: np.ndarray
    outage_se: np.ndarray
    feasible: bool             # some grid point met the cap


def calibrate_colb(cfg: NetworkConfig, drops: int, base_seed: int = 0,
                   grid_db: Sequence[float] = tuple(range(0, 21)), **kw) -> ColbCalibration:
    """Largest association bias whose average oMS outage stays within ``O_max``.

    All grid points reuse the same drop seeds. Falls back to 0 dB.
    """
    grid = np.asarray(sorted(grid_db), dtype=float)
    outage, se = np.empty(grid.size), np.empty(grid.size)
    for i, delta in enumerate(grid):
        est = run_campaign(SchemeSpec("CoLB", delta_db=float(delta)), cfg, drops, base_seed, **kw)
        mean, err = est.ratio("o_out", "o_count")
        outage[i] = 0.0 if math.isnan(mean) else mean
        se[i] = err
    ok = outage <= cfg.outage_cap
    best = float(grid[np.flatnonzero(ok)[-1]]) if ok.any() else 0.0
    return ColbCalibration(delta_db=max(best, 0.0), grid_db=grid, outage=outage, outage_se=se,
                           feasible=bool(ok.any()))


@dataclass(frozen=True)
class DivCalibration:
    rho: float
    objective: float           # simulated mean mMS throughput at rho [bit/s]
    feasible: bool
    rho_grid: np.ndarray
    estimate: SimEstimate


def calibrate_div(cfg: NetworkConfig, scheme: str, drops: int, base_seed: int = 0,
                  rho_grid: Sequence[float] = None, **kw) -> DivCalibration:
    """Femto share maximising the mMS throughput under the fMS requirement.

    Association does not depend on the split, so one campaign covers the
    whole grid. DivRSSI also requires ``T_f >= K T_o``.
    """
    if scheme not in ("DivRSSI", "DivCA"):
        raise ValueError("calibrate_div handles DivRSSI and DivCA")
    grid = np.linspace(0.0, 1.0, 201) if rho_grid is None else np.asarray(rho_grid, dtype=float)
    est = run_campaign(SchemeSpec(scheme, rho=0.5), cfg, drops, base_seed, **kw)
    t_f = np.array([est.metrics(rho=r)["tput_fms"][0] for r in grid])
    t_m = np.array([est.metrics(rho=r)["tput_mms"][0] for r in grid])
    ok = t_f >= cfg.benefit_ratio * t_m
    if scheme == "DivRSSI" and est.column("o_count").sum() > 0:
        t_o = np.array([est.metrics(rho=r)["tput_oms"][0] for r in grid])
        ok &= t_f >= cfg.oms_ratio * t_o
    if not ok.any():
        i = int(np.argmax(t_f - cfg.benefit_ratio * t_m))
        return DivCalibration(float(grid[i]), float(t_m[i]), False, grid, est)
    cand = np.flatnonzero(ok)
    i = int(cand[np.argmax(t_m[cand])])
    return DivCalibration(float(grid[i]), float(t_m[i]), True, grid,
                          replace(est, spec=replace(est.spec, rho=float(grid[i]))))


# ---------------------------------------------------------------------------
# split and dedication chosen from simulated terms (used with admission caps)

@dataclass(frozen=True)
class SimulatedOptimum:
    d_f: float
    rho: float
    beta: float
    objective: float           # simulated mean mMS throughput [bit/s]
    objective_se: float
    per_radius: dict = field(default_factory=dict)
    estimate: Optional[SimEstimate] = None


def _split_from_terms(cfg: NetworkConfig, theta: float, units: dict, hybrid: bool):
    t_m = units["m_unit"][0]
    b = theta * units["f_se"][0] / cfg.benefit_ratio
    c = theta * units["f_unit"][0] / cfg.benefit_ratio
    if cfg.oms_ratio == 0 or math.isnan(units["o_unit"][0]):
        d = math.inf
    else:
        d = theta * units["o_unit"][0] / cfg.oms_ratio
    if hybrid and d >= c:
        beta = 1.0 if math.isinf(d) else (d - c) / (b - c + d)
        t_fo = b if math.isinf(d) else b * d / (b - c + d)
    else:
        beta, t_fo = 0.0, min(c, d)
    rho = t_m / (t_m + t_fo)
    return rho, beta


def optimize_simulated(cfg: NetworkConfig, radii: Sequence[float], drops: int, base_seed: int = 0, *,
                       mode: str = "OA", theta: float = 1.0, n_max: int = None, **kw) -> SimulatedOptimum:
    """Pick ``d_f`` from ``radii``, with the split (and dedication) from simulated terms.

    For each radius one campaign gives the per-unit-bandwidth throughputs;
    the split that makes the binding requirement tight and, in hybrid mode,
    the balancing dedication are then applied as in the analytic optimiser.
    """
    hybrid = mode.startswith("HA")
    best = None
    per = {}
    for d_f in radii:
        spec = SchemeSpec(mode, params=ControlParams(rho=0.5, d_f=float(d_f), theta=theta), n_max=n_max)
        est = run_campaign(spec, cfg, drops, base_seed, **kw)
        rho, beta = _split_from_terms(cfg, theta, est.unit_terms(), hybrid)
        tm, tm_se = est.metrics(rho=rho, beta=beta)["tput_mms"]
        per[float(d_f)] = tm
        if best is None or tm > best.objective:
            params = ControlParams(rho=rho, d_f=float(d_f), beta=beta, theta=theta)
            best = SimulatedOptimum(float(d_f), rho, beta, tm, tm_se,
                                    estimate=replace(est, spec=replace(spec, params=params)))
    return replace(best, per_radius=per)
