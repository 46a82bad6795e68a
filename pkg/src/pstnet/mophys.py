"""Zero-parameter surface-layer physics and the classical gust-table baseline.

Friction velocity, Obukhov length, the similarity-theory TKE backbone, a
surface-layer dissipation estimate, and the constrained output transform that
adds a bounded spectral residual on top of the backbone.  Nothing in this
module is trained; every constant is fixed at import time.

All scalar operations also accept numpy arrays so dataset preprocessing can
run vectorized.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass
from importlib import resources

import numpy as np

from .atmos import AtmosphericState, GAMMA_DRY

# ── Fixed physics constants ──────────────────────────────────────────
C_MU = 0.09          # turbulence-viscosity constant in the TKE backbone
KAPPA = 0.4          # von Karman constant
C_K = 1.5            # Kolmogorov constant scaling the spectral residual
G_ACCEL = 9.81       # m/s^2

Z_REF_M = 10.0       # reference height of the wind input
Z0_M = 0.03          # aerodynamic roughness length (open grassland)
_LOG_Z_RATIO = math.log(Z_REF_M / Z0_M)

C_H = 1.3e-3         # bulk heat-transfer coefficient for the flux proxy
FLUX_DZ_M = 100.0    # layer depth of the flux proxy

H_CAP_M = 500.0      # similarity theory is surface-layer only: cap the
                     # evaluation height so phi_m cannot grow without bound
H_EVAL_MIN_M = 10.0  # floor for the dissipation evaluation height
ZETA_CLAMP = 5.0     # stability parameter clamp avoiding the unstable-branch
                     # singularity at (1 - 16 zeta) = 0


@dataclass(frozen=True)
class PhysicsConstants:
    """Fixed constants of the analytical path; never trained."""

    c_mu: float = C_MU
    kappa: float = KAPPA
    c_k: float = C_K
    g: float = G_ACCEL


@dataclass(frozen=True)
class SurfaceFluxState:
    """Surface-layer scales: friction velocity, virtual potential temperature,
    kinematic heat flux, and the resulting Obukhov length."""

    u_star_mps: float
    theta_v_k: float
    heat_flux_kms: float
    obukhov_len_m: float


def friction_velocity(wind10_mps):
    """Neutral log-law friction velocity from the 10 m wind; zero wind -> zero."""
    return KAPPA * np.asarray(wind10_mps, dtype=float) / _LOG_Z_RATIO


def heat_flux_proxy(state: AtmosphericState) -> float:
    """Bulk-transfer proxy for the kinematic virtual heat flux w'theta'_v.

    Sign-correct closure from the available inputs: superadiabatic lapse
    (lapse < -Gamma_d) gives upward (positive) flux, inversions give
    downward (negative) flux.
    """
    return -C_H * state.wind10_mps * (state.lapse_k_per_m + GAMMA_DRY) * FLUX_DZ_M


def obukhov_length(u_star_mps, theta_v_k, heat_flux_kms):
    """Obukhov length L = -u*^3 theta_v / (kappa g w'theta'_v).

    Zero heat flux returns +inf as the neutral sentinel; otherwise the sign
    of L is opposite the sign of the flux.
    """
    u3 = np.asarray(u_star_mps, dtype=float) ** 3
    flux = np.asarray(heat_flux_kms, dtype=float)
    if np.ndim(flux) == 0:
        if flux == 0.0:
            return math.inf
        return float(-u3 * theta_v_k / (KAPPA * G_ACCEL * flux))
    with np.errstate(divide="ignore"):
        out = -u3 * theta_v_k / (KAPPA * G_ACCEL * flux)
    return np.where(flux == 0.0, np.inf, out)


def surface_flux_state(state: AtmosphericState) -> SurfaceFluxState:
    """Assemble the surface-layer scales for a point state.

    Virtual potential temperature is approximated by the dry-air temperature
    (no moisture inputs are carried).
    """
    u_star = float(friction_velocity(state.wind10_mps))
    flux = heat_flux_proxy(state)
    L = obukhov_length(u_star, state.temperature_k, flux)
    return SurfaceFluxState(u_star_mps=u_star, theta_v_k=state.temperature_k,
                            heat_flux_kms=flux, obukhov_len_m=L)


def phi_m(zeta):
    """Businger-Dyer dimensionless shear function, clamped to |zeta| <= 5.

    (1 - 16 zeta)^(-1/4) on the unstable side, 1 + 5 zeta on the stable side;
    continuous and equal to 1 at neutral.
    """
    z = np.clip(np.asarray(zeta, dtype=float), -ZETA_CLAMP, ZETA_CLAMP)
    unstable = (1.0 - 16.0 * np.minimum(z, 0.0)) ** -0.25
    stable = 1.0 + 5.0 * np.maximum(z, 0.0)
    out = np.where(z < 0.0, unstable, stable)
    return float(out) if np.ndim(zeta) == 0 else out


def _zeta(altitude_m, obukhov_len_m):
    h_eff = np.minimum(np.asarray(altitude_m, dtype=float), H_CAP_M)
    L = np.asarray(obukhov_len_m, dtype=float)
    with np.errstate(divide="ignore", invalid="ignore"):
        z = np.where(np.isinf(L), 0.0, h_eff / L)
    return z


def mo_tke(state: AtmosphericState) -> float:
    """Surface-layer TKE backbone: k = u*^2 / sqrt(C_mu) * phi_m(h_eff / L).

    Strictly positive for nonzero wind, zero for calm air, and free of any
    learnable parameter.  The evaluation height is capped at H_CAP_M.
    """
    flux = surface_flux_state(state)
    zeta = _zeta(state.altitude_m, flux.obukhov_len_m)
    return float(flux.u_star_mps ** 2 / math.sqrt(C_MU) * phi_m(zeta))


def dissipation(u_star_mps, altitude_m, obukhov_len_m):
    """Surface-layer TKE dissipation rate, m^2/s^3.

    eps = u*^3 / (kappa h_eff) * phi_eps(zeta) with phi_eps = phi_m - zeta on
    the stable side and phi_m on the unstable side; h_eff is clamped to
    [H_EVAL_MIN_M, H_CAP_M].  Non-negative by construction.
    """
    h_eff = np.clip(np.asarray(altitude_m, dtype=float), H_EVAL_MIN_M, H_CAP_M)
    zeta = _zeta(np.asarray(altitude_m, dtype=float), obukhov_len_m)
    pm = phi_m(zeta)
    phi_eps = np.where(zeta >= 0.0, pm - np.clip(zeta, -ZETA_CLAMP, ZETA_CLAMP), pm)
    eps = np.asarray(u_star_mps, dtype=float) ** 3 / (KAPPA * h_eff) * phi_eps
    return float(eps) if np.ndim(eps) == 0 else eps


def _sigmoid(s):
    s = np.asarray(s, dtype=float)
    out = np.empty_like(s)
    pos = s >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-s[pos]))
    e = np.exp(s[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def residual_ceiling(eps, density_ratio):
    """Upper bound of the learned residual: C_K eps^(1/3) sqrt(rho/rho0)."""
    return C_K * np.asarray(eps, dtype=float) ** (1.0 / 3.0) * \
        np.sqrt(np.asarray(density_ratio, dtype=float))


def kolmogorov_output(k_mo, s, eps, density_ratio):
    """Hard-constrained output: k = k_MO + sigmoid(s) * C_K eps^(1/3) sqrt(rho/rho0).

    For every logit s the output is sandwiched between the backbone and the
    backbone plus the spectral residual ceiling, and it is monotone
    non-decreasing in s, eps, and density ratio.
    """
    k = np.asarray(k_mo, dtype=float) + _sigmoid(s) * residual_ceiling(eps, density_ratio)
    return float(k) if np.ndim(k) == 0 else k


def physics_columns(states) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Vectorized (k_MO, eps, residual ceiling) for a list of states."""
    n = len(states)
    k_mo = np.empty(n)
    eps = np.empty(n)
    ceil = np.empty(n)
    for i, st in enumerate(states):
        fx = surface_flux_state(st)
        k_mo[i] = fx.u_star_mps ** 2 / math.sqrt(C_MU) * \
            phi_m(_zeta(st.altitude_m, fx.obukhov_len_m))
        eps[i] = dissipation(fx.u_star_mps, st.altitude_m, fx.obukhov_len_m)
        ceil[i] = residual_ceiling(eps[i], st.density_ratio)
    return k_mo, eps, ceil


# ── Dryden classical baseline ────────────────────────────────────────
#
# Below 600 m the closed forms from the military handbook convention apply:
#   sigma_w = 0.1 * W20
#   sigma_u = sigma_v = sigma_w / (0.177 + 0.000823 h_ft)^0.4
# Above, severity-indexed altitude bands come from a versioned fixture table,
# with a linear crossfade over [600, 1200] m so the seam is continuous.

DRYDEN_LOW_ALT_M = 600.0
DRYDEN_BLEND_TOP_M = 1200.0
_FT_PER_M = 1.0 / 0.3048

DRYDEN_SEVERITIES = ("light", "moderate", "severe")

_dryden_table = None


class FixtureError(RuntimeError):
    """A bundled data table failed validation."""


def _load_dryden_table():
    """Parse and checksum the altitude-band intensity table."""
    global _dryden_table
    if _dryden_table is not None:
        return _dryden_table
    text = resources.files("pstnet.data").joinpath("dryden_bands.txt").read_text()
    lines = text.splitlines()
    if not lines or not lines[0].startswith("# dryden-bands v"):
        raise FixtureError("dryden fixture: missing version header")
    if not lines[1].startswith("# sha256:"):
        raise FixtureError("dryden fixture: missing checksum line")
    expected = lines[1].split(":", 1)[1].strip()
    body = "\n".join(lines[2:]) + "\n"
    actual = hashlib.sha256(body.encode()).hexdigest()
    if actual != expected:
        raise FixtureError("dryden fixture: checksum mismatch")
    table = {sev: ([], []) for sev in DRYDEN_SEVERITIES}
    for line in lines[2:]:
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        alt_s, sev, su, sv, sw = line.split()
        if sev not in table:
            raise FixtureError(f"dryden fixture: unknown severity {sev!r}")
        table[sev][0].append(float(alt_s))
        table[sev][1].append((float(su), float(sv), float(sw)))
    out = {}
    for sev, (alts, sigmas) in table.items():
        a = np.array(alts)
        if np.any(np.diff(a) <= 0):
            raise FixtureError("dryden fixture: altitudes not increasing")
        out[sev] = (a, np.array(sigmas))
    _dryden_table = out
    return out


def _dryden_low(altitude_m: float, wind20ft_mps: float) -> np.ndarray:
    sigma_w = 0.1 * wind20ft_mps
    h_ft = max(altitude_m, 0.0) * _FT_PER_M
    denom = (0.177 + 0.000823 * h_ft) ** 0.4
    sigma_uv = sigma_w / denom
    return np.array([sigma_uv, sigma_uv, sigma_w])


def _dryden_band(altitude_m: float, severity: str) -> np.ndarray:
    alts, sigmas = _load_dryden_table()[severity]
    out = np.empty(3)
    for i in range(3):
        out[i] = np.interp(altitude_m, alts, sigmas[:, i])
    return out


def dryden_sigma(altitude_m: float, wind20ft_mps: float,
                 severity: str = "moderate") -> np.ndarray:
    """Classical gust intensities (sigma_u, sigma_v, sigma_w) in m/s.

    Low-altitude closed forms below 600 m, fixture-table bands above, with a
    continuous blend across the seam.
    """
    if altitude_m < 0:
        raise ValueError("altitude must be non-negative")
    if severity not in DRYDEN_SEVERITIES:
        raise ValueError(f"severity must be one of {DRYDEN_SEVERITIES}")
    if altitude_m < DRYDEN_LOW_ALT_M:
        return _dryden_low(altitude_m, wind20ft_mps)
    band = _dryden_band(altitude_m, severity)
    if altitude_m >= DRYDEN_BLEND_TOP_M:
        return band
    low = _dryden_low(DRYDEN_LOW_ALT_M, wind20ft_mps)
    w = (altitude_m - DRYDEN_LOW_ALT_M) / (DRYDEN_BLEND_TOP_M - DRYDEN_LOW_ALT_M)
    return (1.0 - w) * low + w * band


def dryden_tke(state: AtmosphericState, severity: str = "moderate") -> float:
    """TKE implied by the classical table: k = (su^2 + sv^2 + sw^2) / 2.

    The 20 ft wind is taken from the 10 m input via the neutral log profile.
    """
    wind20ft = state.wind10_mps * math.log(6.096 / Z0_M) / _LOG_Z_RATIO
    s = dryden_sigma(state.altitude_m, wind20ft, severity)
    return float(0.5 * np.sum(s ** 2))
