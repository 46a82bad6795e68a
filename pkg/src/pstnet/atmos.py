"""Standard-atmosphere state handling, stability diagnostics, and regime labels.

The estimator consumes a seven-entry feature vector built from a point
atmospheric state: altitude, temperature, pressure, 10 m wind speed, vertical
temperature gradient, density ratio to sea level, and latitude.  This module
owns that state type, the ISA backfill used when only altitude is known, the
bulk Richardson number, and the soft four-class stability label (convective,
neutral, stable, stratospheric) that supervises the gating network.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

# ── Physical constants ───────────────────────────────────────────────
G0 = 9.80665            # m/s^2, standard gravity used by the ISA profile
R_AIR = 287.05287       # J/(kg K), specific gas constant of dry air
T0_K = 288.15           # K, sea-level standard temperature
P0_PA = 101325.0        # Pa, sea-level standard pressure
RHO0 = P0_PA / (R_AIR * T0_K)   # 1.225 kg/m^3

GAMMA_DRY = 0.0098      # K/m, dry adiabatic lapse magnitude
G_ACCEL = 9.81          # m/s^2, gravity used in stability diagnostics

ALT_MIN_M = 0.0
ALT_MAX_M = 35_000.0

# ISA segments: (base altitude m, base temperature K, lapse K/m).
# Base pressures are derived once at import so the profile is continuous.
_ISA_SEGMENTS = [
    (0.0, 288.15, -0.0065),
    (11_000.0, 216.65, 0.0),
    (20_000.0, 216.65, 0.0010),
    (32_000.0, 228.65, 0.0028),
]


def _isa_base_pressures():
    bases = [P0_PA]
    for i in range(1, len(_ISA_SEGMENTS)):
        h_b, t_b, lapse = _ISA_SEGMENTS[i - 1]
        h_top = _ISA_SEGMENTS[i][0]
        p_b = bases[-1]
        if lapse == 0.0:
            p = p_b * math.exp(-G0 * (h_top - h_b) / (R_AIR * t_b))
        else:
            t_top = t_b + lapse * (h_top - h_b)
            p = p_b * (t_top / t_b) ** (-G0 / (R_AIR * lapse))
        bases.append(p)
    return bases


_ISA_BASE_P = _isa_base_pressures()

# Nominal 10 m wind applied by the ISA backfill; the reference atmosphere
# itself carries no wind, but a zero default would zero out the whole
# surface-layer turbulence path for backfilled states.
ISA_DEFAULT_WIND_MPS = 5.0

# Richardson number bulk form: layer depth and the fraction of the 10 m wind
# taken as the cross-layer shear, with a floor so calm air stays finite.
RI_DELTA_Z_M = 100.0
RI_SHEAR_FRAC = 0.2
RI_SHEAR_FLOOR_MPS = 0.5

# Regime label thresholds and softening temperature (Richardson units; the
# altitude threshold is handled in km so one temperature serves both axes).
RI_NEUTRAL_BAND = 0.1
STRATO_ALT_M = 12_000.0
STRATO_SCALE_M = 1000.0
REGIME_TAU = 0.03

REGIME_NAMES = ("convective", "neutral", "stable", "stratospheric")


@dataclass(frozen=True)
class AtmosphericState:
    """Raw weather at a point; the source of the model's feature vector."""

    altitude_m: float
    temperature_k: float
    pressure_pa: float
    wind10_mps: float
    lapse_k_per_m: float
    density_ratio: float
    latitude_deg: float

    def __post_init__(self):
        fields = (self.altitude_m, self.temperature_k, self.pressure_pa,
                  self.wind10_mps, self.lapse_k_per_m, self.density_ratio,
                  self.latitude_deg)
        if not all(math.isfinite(v) for v in fields):
            raise ValueError("atmospheric state has non-finite fields")
        if self.temperature_k <= 0 or self.pressure_pa <= 0:
            raise ValueError("temperature and pressure must be positive")
        if self.density_ratio <= 0 or self.density_ratio > 1.3:
            raise ValueError("density ratio outside (0, 1.3]")
        if self.wind10_mps < 0:
            raise ValueError("wind speed must be non-negative")
        if not (ALT_MIN_M <= self.altitude_m <= ALT_MAX_M):
            raise ValueError(f"altitude {self.altitude_m} outside "
                             f"[{ALT_MIN_M}, {ALT_MAX_M}] m")
        if not (-90.0 <= self.latitude_deg <= 90.0):
            raise ValueError("latitude outside [-90, 90] deg")


@dataclass(frozen=True)
class RegimeTarget:
    """Soft four-class stability label (simplex) plus the Richardson number."""

    probs: np.ndarray
    ri: float

    def argmax(self) -> int:
        return int(np.argmax(self.probs))

    def name(self) -> str:
        return REGIME_NAMES[self.argmax()]


@dataclass(frozen=True)
class NormStats:
    """Feature / target standardization constants, fit on the training split."""

    feat_mean: np.ndarray    # (7,)
    feat_scale: np.ndarray   # (7,)
    target_mean: float
    target_scale: float

    def __post_init__(self):
        if self.feat_mean.shape != (7,) or self.feat_scale.shape != (7,):
            raise ValueError("norm stats must cover exactly 7 features")
        if not (np.all(np.isfinite(self.feat_mean))
                and np.all(np.isfinite(self.feat_scale))):
            raise ValueError("norm stats must be finite")
        if np.any(self.feat_scale <= 0) or self.target_scale <= 0:
            raise ValueError("standardization scales must be positive")

    def standardize(self, raw: np.ndarray) -> np.ndarray:
        return (raw - self.feat_mean) / self.feat_scale

    def destandardize(self, x: np.ndarray) -> np.ndarray:
        return x * self.feat_scale + self.feat_mean

    def standardize_target(self, k):
        return (k - self.target_mean) / self.target_scale

    def destandardize_target(self, k_std):
        return k_std * self.target_scale + self.target_mean


def identity_norm_stats() -> NormStats:
    """Zero-mean / unit-scale stats; standardization becomes a no-op."""
    return NormStats(np.zeros(7), np.ones(7), 0.0, 1.0)


# ── ISA profile ──────────────────────────────────────────────────────

def isa_temperature(altitude_m: float) -> float:
    h_b, t_b, lapse = _isa_segment(altitude_m)[1:]
    return t_b + lapse * (altitude_m - h_b)


def _isa_segment(altitude_m: float):
    idx = 0
    for i, (h_b, _, _) in enumerate(_ISA_SEGMENTS):
        if altitude_m >= h_b:
            idx = i
    return (idx,) + _ISA_SEGMENTS[idx]


def isa_pressure(altitude_m: float) -> float:
    idx, h_b, t_b, lapse = _isa_segment(altitude_m)
    p_b = _ISA_BASE_P[idx]
    if lapse == 0.0:
        return p_b * math.exp(-G0 * (altitude_m - h_b) / (R_AIR * t_b))
    t = t_b + lapse * (altitude_m - h_b)
    return p_b * (t / t_b) ** (-G0 / (R_AIR * lapse))


def isa_state(altitude_m: float, wind10_mps: float = ISA_DEFAULT_WIND_MPS,
              latitude_deg: float = 0.0) -> AtmosphericState:
    """Standard-atmosphere backfill for a point where only altitude is known.

    Temperature, pressure, density ratio, and the (signed) lapse rate come
    from the layered ISA profile; wind defaults to a documented nominal value
    so turbulence estimates stay non-degenerate.
    """
    if not math.isfinite(altitude_m) or not (ALT_MIN_M <= altitude_m <= ALT_MAX_M):
        raise ValueError(f"altitude {altitude_m} outside "
                         f"[{ALT_MIN_M}, {ALT_MAX_M}] m")
    t = isa_temperature(altitude_m)
    p = isa_pressure(altitude_m)
    lapse = _isa_segment(altitude_m)[3]
    rho = p / (R_AIR * t)
    return AtmosphericState(
        altitude_m=float(altitude_m),
        temperature_k=t,
        pressure_pa=p,
        wind10_mps=float(wind10_mps),
        lapse_k_per_m=lapse,
        density_ratio=rho / RHO0,
        latitude_deg=float(latitude_deg),
    )


# ── Stability diagnostics ────────────────────────────────────────────

def bulk_richardson(state: AtmosphericState) -> float:
    """Bulk Richardson number over a fixed 100 m layer.

    Ri = (g/T) * (lapse + Gamma_d) * dz^2 / du^2, with the shear taken as a
    fixed fraction of the 10 m wind and floored so calm air stays finite.
    The sign equals the sign of (lapse + Gamma_d).
    """
    du = max(RI_SHEAR_FRAC * state.wind10_mps, RI_SHEAR_FLOOR_MPS)
    num = (G_ACCEL / state.temperature_k) * \
        (state.lapse_k_per_m + GAMMA_DRY) * RI_DELTA_Z_M ** 2
    return num / du ** 2


def regime_target(ri: float, altitude_m: float) -> RegimeTarget:
    """Soft stability label over (convective, neutral, stable, stratospheric).

    Hard thresholds (Ri < -0.1 convective, |Ri| <= 0.1 neutral, Ri > 0.1
    stable, altitude > 12 km stratospheric) are softened by a fixed
    temperature.  The stratospheric class is assigned hierarchically so it
    dominates above 12 km no matter how extreme Ri is.
    """
    if not math.isfinite(ri):
        raise ValueError("Richardson number must be finite")
    # stratospheric share from a logistic in scaled altitude
    z = (altitude_m - STRATO_ALT_M) / STRATO_SCALE_M / REGIME_TAU
    if z >= 0:
        p_strat = 1.0 / (1.0 + math.exp(-z))
    else:
        e = math.exp(z)
        p_strat = e / (1.0 + e)
    # remaining mass split by signed distances to the Ri thresholds
    scores = np.array([
        -(ri + RI_NEUTRAL_BAND),
        RI_NEUTRAL_BAND - abs(ri),
        ri - RI_NEUTRAL_BAND,
    ]) / REGIME_TAU
    scores -= scores.max()
    w = np.exp(scores)
    w /= w.sum()
    probs = np.empty(4)
    probs[:3] = (1.0 - p_strat) * w
    probs[3] = p_strat
    return RegimeTarget(probs=probs, ri=float(ri))


# ── Feature vector ───────────────────────────────────────────────────

def raw_features(state: AtmosphericState) -> np.ndarray:
    """Unstandardized feature vector in the fixed model input order."""
    return np.array([
        state.altitude_m,
        state.temperature_k,
        state.pressure_pa,
        state.wind10_mps,
        state.lapse_k_per_m,
        state.density_ratio,
        state.latitude_deg,
    ])


def feature_vector(state: AtmosphericState, stats: NormStats) -> np.ndarray:
    """Standardized 7-entry feature vector (affine and invertible)."""
    x = stats.standardize(raw_features(state))
    if not np.all(np.isfinite(x)):
        raise ValueError("feature vector has non-finite entries")
    return x
