"""Configuration and domain types for the two-tier femtocell model.

All quantities are stored in linear SI units internally (W/Hz, Hz, m).
dB/dBm values only appear at the configuration boundary.
"""

from __future__ import annotations

import configparser
import dataclasses
import enum
import math
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Mapping, Optional, Sequence

import numpy as np


class ConfigError(ValueError):
    """Raised for malformed or inconsistent configuration."""


def db_to_linear(db):
    return np.power(10.0, np.divide(db, 10.0))


def linear_to_db(lin):
    return 10.0 * np.log10(lin)


def dbm_to_watt(dbm: float) -> float:
    return 10.0 ** ((dbm - 30.0) / 10.0)


def watt_to_dbm(watt: float) -> float:
    return 10.0 * math.log10(watt) + 30.0


class LinkClass(enum.IntEnum):
    OUTDOOR = 1
    INDOOR = 2
    OUTDOOR_TO_INDOOR = 3
    INDOOR_TO_OUTDOOR = 4
    INDOOR_TO_INDOOR = 5


def fixed_loss_db(fc_mhz: float, wall_loss_db: float, link: LinkClass) -> float:
    """Fixed loss ``Z^alpha`` in dB for a link class."""
    if fc_mhz <= 0:
        raise ValueError("carrier frequency must be positive")
    link = LinkClass(link)
    if link is LinkClass.INDOOR:
        return 37.0
    outdoor = 30.0 * math.log10(fc_mhz) - 71.0
    if link is LinkClass.OUTDOOR:
        return outdoor
    if link is LinkClass.INDOOR_TO_INDOOR:
        return outdoor + 2.0 * wall_loss_db
    return outdoor + wall_loss_db


@dataclass(frozen=True)
class PathlossEntry:
    exponent: float
    fixed_loss_db: float

    @property
    def z(self) -> float:
        """Linear ``Z`` such that ``Z**exponent`` equals the fixed loss."""
        return 10.0 ** (self.fixed_loss_db / (10.0 * self.exponent))

    def gain(self, distance):
        """Average channel gain ``(Z d)^-alpha``."""
        return (self.z * np.asarray(distance, dtype=float)) ** (-self.exponent)


_DEFAULT_EXPONENTS = {
    LinkClass.OUTDOOR: 4.0,
    LinkClass.INDOOR: 3.0,
    LinkClass.OUTDOOR_TO_INDOOR: 4.0,
    LinkClass.INDOOR_TO_OUTDOOR: 4.0,
    LinkClass.INDOOR_TO_INDOOR: 4.0,
}


@dataclass(frozen=True)
class PathlossTable:
    entries: tuple  # PathlossEntry per LinkClass, in enum order

    @classmethod
    def default(cls, fc_mhz: float = 2000.0, wall_loss_db: float = 10.0) -> "PathlossTable":
        return cls(tuple(
            PathlossEntry(_DEFAULT_EXPONENTS[link], fixed_loss_db(fc_mhz, wall_loss_db, link))
            for link in LinkClass
        ))

    def __post_init__(self):
        if len(self.entries) != len(LinkClass):
            raise ConfigError("pathloss table needs one entry per link class")
        for e in self.entries:
            if e.exponent <= 2.0:
                raise ConfigError("pathloss exponents must exceed 2")

    def __getitem__(self, link) -> PathlossEntry:
        return self.entries[int(link) - 1]


@dataclass(frozen=True)
class RateTable:
    """Discrete rate set: spectral efficiencies and SINR lower bounds (dB)."""

    efficiencies: tuple
    thresholds_db: tuple

    def __post_init__(self):
        b = np.asarray(self.efficiencies, dtype=float)
        g = np.asarray(self.thresholds_db, dtype=float)
        if b.ndim != 1 or b.size == 0 or b.size != g.size:
            raise ConfigError("rate table needs matching non-empty columns")
        if np.any(np.diff(b) <= 0) or np.any(np.diff(g) <= 0):
            raise ConfigError("rate table columns must be strictly increasing")

    def __len__(self) -> int:
        return len(self.efficiencies)

    @cached_property
    def b(self) -> np.ndarray:
        return np.asarray(self.efficiencies, dtype=float)

    @cached_property
    def thresholds(self) -> np.ndarray:
        """Linear SINR lower bounds, length L."""
        return 10.0 ** (np.asarray(self.thresholds_db, dtype=float) / 10.0)

    @cached_property
    def increments(self) -> np.ndarray:
        """``b_l - b_{l-1}`` with ``b_0 = 0``.

        ``sum_l b_l [F(G_l) - F(G_{l+1})] == sum_l increments_l F(G_l)``, which
        avoids the sentinel threshold.
        """
        return np.diff(np.concatenate(([0.0], self.b)))

    @property
    def top(self) -> float:
        return float(self.b[-1])

    def index(self, sinr_db):
        """Rate index (1-based) for an SINR in dB; 0 means outage."""
        return np.searchsorted(np.asarray(self.thresholds_db, dtype=float), sinr_db, side="right")

    def efficiency_linear(self, sinr):
        """Spectral efficiency for linear SINR values (0 in outage)."""
        idx = np.searchsorted(self.thresholds, sinr, side="right")
        return np.concatenate(([0.0], self.b))[idx]


DEFAULT_RATES = RateTable(
    efficiencies=(0.4922, 1.3889, 2.8962, 4.7364, 6.6885, 8.6711),
    thresholds_db=(-4.0, 0.0, 4.0, 8.0, 12.0, 16.0),
)


def sinr_to_rate(sinr_db: float, rates: RateTable = DEFAULT_RATES) -> Optional[int]:
    """Largest rate index ``l`` with ``Gamma_l <= sinr``; ``None`` in outage."""
    idx = int(rates.index(sinr_db))
    return idx if idx > 0 else None


def overlap_probability(lambda_f: float, home_radius: float) -> float:
    """Probability that two or more fBSs fall in a disk of radius ``2 D_h``."""
    t = lambda_f * 4.0 * math.pi * home_radius ** 2
    # 1 - e^-t (1 + t), written to stay accurate as t -> 0
    return -math.expm1(-t) - t * math.exp(-t)


def service_area(d_f, lambda_f: float):
    """Average femtocell service area ``x`` for a target radius ``d_f``."""
    d_f = np.asarray(d_f, dtype=float)
    if lambda_f == 0.0:
        out = math.pi * d_f ** 2
    else:
        out = -np.expm1(-math.pi * lambda_f * d_f ** 2) / lambda_f
    return float(out) if out.ndim == 0 else out


def service_radius(x, lambda_f: float):
    """Inverse of :func:`service_area`."""
    x = np.asarray(x, dtype=float)
    if lambda_f == 0.0:
        out = np.sqrt(x / math.pi)
    else:
        if np.any(lambda_f * x >= 1.0):
            raise ValueError("service area must satisfy lambda_f * x < 1")
        out = np.sqrt(-np.log1p(-lambda_f * x) / (math.pi * lambda_f))
    return float(out) if out.ndim == 0 else out


@dataclass(frozen=True)
class NetworkConfig:
    """Physical and deployment parameters. Defaults are the reference scenario."""

    macro_radius: float = 800.0          # D_m [m]
    home_radius: float = 20.0            # D_h [m]
    carrier_freq: float = 2000.0         # f_c [MHz]
    bandwidth: float = 5e6               # W [Hz]
    noise_density: float = -174.0        # P_N [dBm/Hz]
    macro_power: float = 46.0            # total mBS power [dBm], spread over W
    femto_power: float = 23.0            # total fBS power [dBm], spread over W
    wall_loss: float = 10.0              # WL [dB]
    fbs_mean: float = 30.0               # N_f per macrocell
    user_mean: float = 200.0             # N_u per macrocell
    benefit_ratio: float = 10.0          # M
    oms_ratio: float = 1.0               # K
    outage_cap: float = 0.15             # O_max
    indoor_density_factor: float = 1.0   # k_in (1 = homogeneous users)
    rates: RateTable = field(default=DEFAULT_RATES, compare=True)

    def __post_init__(self):
        if not (0 < self.home_radius < self.macro_radius):
            raise ConfigError("need 0 < home_radius < macro_radius")
        if self.bandwidth <= 0:
            raise ConfigError("bandwidth must be positive")
        if not (0 < self.outage_cap < 1):
            raise ConfigError("outage_cap must lie in (0, 1)")
        if self.benefit_ratio < 1:
            raise ConfigError("benefit_ratio (M) must be >= 1")
        if not (0 <= self.oms_ratio <= self.benefit_ratio):
            raise ConfigError("oms_ratio (K) must satisfy 0 <= K <= M")
        if self.fbs_mean < 0 or self.user_mean <= 0:
            raise ConfigError("fbs_mean must be >= 0 and user_mean > 0")
        if self.indoor_density_factor < 1:
            raise ConfigError("indoor_density_factor must be >= 1")
        if self.carrier_freq <= 0:
            raise ConfigError("carrier_freq must be positive")

    # derived quantities -------------------------------------------------
    @property
    def macro_area(self) -> float:
        return math.pi * self.macro_radius ** 2

    @property
    def lambda_f(self) -> float:
        return self.fbs_mean / self.macro_area

    @property
    def lambda_u(self) -> float:
        return self.user_mean / self.macro_area

    @cached_property
    def noise(self) -> float:
        """Noise power density [W/Hz]."""
        return dbm_to_watt(self.noise_density)

    @cached_property
    def pm(self) -> float:
        """mBS transmit power density [W/Hz]."""
        return dbm_to_watt(self.macro_power) / self.bandwidth

    @cached_property
    def pf(self) -> float:
        """fBS transmit power density [W/Hz]."""
        return dbm_to_watt(self.femto_power) / self.bandwidth

    @cached_property
    def pathloss(self) -> PathlossTable:
        return PathlossTable.default(self.carrier_freq, self.wall_loss)

    @property
    def x_min(self) -> float:
        return service_area(self.home_radius, self.lambda_f)

    @property
    def heterogeneous(self) -> bool:
        return self.indoor_density_factor != 1.0

    @property
    def lambda_u_outdoor(self) -> float:
        """Outdoor user intensity keeping the mean user count at ``user_mean``.

        Indoor (home-disk) intensity is ``k_in`` times this value.
        """
        extra = (self.indoor_density_factor - 1.0) * self.lambda_f * self.x_min
        return self.lambda_u / (1.0 + extra)

    def replace(self, **changes) -> "NetworkConfig":
        return dataclasses.replace(self, **changes)


@dataclass(frozen=True)
class ControlParams:
    """Decision variables: spectrum split, service radius, dedication, thinning."""

    rho: float
    d_f: float
    beta: float = 0.0
    theta: float = 1.0

    def __post_init__(self):
        if not (0.0 <= self.rho <= 1.0):
            raise ValueError("rho must lie in [0, 1]")
        if not (0.0 <= self.beta <= 1.0):
            raise ValueError("beta must lie in [0, 1]")
        if not (0.0 < self.theta <= 1.0):
            raise ValueError("theta must lie in (0, 1]")
        if self.d_f < 0:
            raise ValueError("d_f must be non-negative")

    def area(self, cfg: NetworkConfig) -> float:
        return service_area(self.d_f, cfg.lambda_f)


@dataclass(frozen=True)
class ThroughputReport:
    tput_fms: float
    tput_mms: float
    tput_oms: float
    se_fms: float
    se_mms: float
    se_oms: float
    outage_oms: float
    slack_fms: float
    slack_oms: float
    source: str = "analytic"
    half_widths: Optional[Mapping[str, float]] = None

    @classmethod
    def build(cls, cfg: NetworkConfig, *, tput_fms, tput_mms, tput_oms, se_fms, se_mms,
              se_oms, outage_oms, source="analytic", half_widths=None) -> "ThroughputReport":
        return cls(
            tput_fms=float(tput_fms), tput_mms=float(tput_mms), tput_oms=float(tput_oms),
            se_fms=float(se_fms), se_mms=float(se_mms), se_oms=float(se_oms),
            outage_oms=float(outage_oms),
            slack_fms=float(tput_fms - cfg.benefit_ratio * tput_mms),
            slack_oms=float(tput_oms - cfg.oms_ratio * tput_mms),
            source=source, half_widths=half_widths,
        )

    def as_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d.pop("half_widths")
        return d


# ---------------------------------------------------------------------------
# config files

CONTROL_KEYS = ("rho", "d_f", "beta", "theta")
_NETWORK_KEYS = tuple(f.name for f in dataclasses.fields(NetworkConfig) if f.name != "rates")

# short aliases accepted on the command line
ALIASES = {"M": "benefit_ratio", "K": "oms_ratio", "N_f": "fbs_mean", "N_u": "user_mean",
           "k_in": "indoor_density_factor", "O_max": "outage_cap", "W": "bandwidth"}


def parse_pairs(pairs: Sequence[str]) -> dict:
    """Parse ``key=value`` strings into a dict of strings."""
    out = {}
    for item in pairs:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not key=value")
        key, value = item.split("=", 1)
        out[key.strip()] = value.strip()
    return out


def read_config_file(path) -> dict:
    """Read a flat ``key = value`` file (``#`` comments allowed)."""
    parser = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#",))
    parser.optionxform = str  # keep key case
    try:
        text = Path(path).read_text(encoding="utf-8")
        parser.read_string("[config]\n" + text)
    except (OSError, configparser.Error, UnicodeDecodeError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return dict(parser["config"])


def build_config(values: Mapping[str, str], extra_keys: Sequence[str] = ()) -> tuple:
    """Split raw key/value strings into a NetworkConfig and leftover keys.

    Keys must be NetworkConfig fields, control keys, aliases or ``extra_keys``;
    anything else is an error.
    """
    net, rest = {}, {}
    for key, raw in values.items():
        name = ALIASES.get(key, key)
        if name in _NETWORK_KEYS:
            try:
                net[name] = float(raw)
            except ValueError as exc:
                raise ConfigError(f"{key}: not a number: {raw!r}") from exc
        elif name in CONTROL_KEYS or name in extra_keys:
            rest[name] = raw
        else:
            raise ConfigError(f"unknown config key {key!r}")
    try:
        cfg = NetworkConfig(**net)
    except TypeError as exc:  # pragma: no cover - guarded above
        raise ConfigError(str(exc)) from exc
    return cfg, rest


def load_config(path=None, overrides: Sequence[str] = (), extra_keys: Sequence[str] = ()) -> tuple:
    values = read_config_file(path) if path else {}
    values.update(parse_pairs(overrides))
    return build_config(values, extra_keys)
