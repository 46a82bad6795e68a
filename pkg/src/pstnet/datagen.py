"""Synthetic ground-truth turbulence data with regime-structured targets.

No public training set exists for this problem, so this generator is the
declared stand-in.  Targets are built so that (a) the analytical backbone
carries the bulk magnitude, (b) the dominant residual signal is the stability
regime, which the gate must discover, and (c) the targets always lie inside
the band the constrained output layer can reach:

    k_true = k_MO + f(regime) * ceiling * (1 + eta) + floor(regime)

where `ceiling` is the spectral residual bound C_K eps^(1/3) sqrt(rho/rho0),
f is a per-regime fraction in [0, 1], eta is clipped multiplicative noise,
and the stratospheric floor models weak gravity-wave background turbulence.
Every constant lives in GEN_CONFIG.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass

import numpy as np

from . import mophys
from .atmos import (REGIME_NAMES, AtmosphericState, RegimeTarget,
                    bulk_richardson, isa_pressure, isa_temperature,
                    regime_target, R_AIR, RHO0)

GEN_CONFIG = dict(
    alt_range_m=(10.0, 30000.0),
    strato_alt_min_m=12000.0,
    wind_mean_mps=8.0,
    temp_anomaly_sd_k=5.0,
    lapse_mean_sd={
        "convective": (-0.020, 0.004),
        "neutral": (-0.0098, 0.0004),
        "stable": (0.005, 0.004),
        "stratospheric": (0.001, 0.002),
    },
    # residual fraction curves: base level per regime plus a within-regime
    # modulation that deepens with stability distance (or altitude for the
    # stratospheric class)
    resid_frac_base={
        "convective": 0.70,
        "neutral": 0.0,
        "stable": 0.40,
        "stratospheric": 0.15,
    },
    conv_gain=0.20,
    stable_gain=0.15,
    strato_halving_m=9000.0,
    regime_floor={
        "convective": 0.0,
        "neutral": 0.0,
        "stable": 0.0,
        "stratospheric": 0.02,
    },
    noise_sd=0.10,
    noise_clip=0.30,
    class_balance_tol=0.02,
)

MIN_DATASET_SIZE = 400
MIN_REGIME_SHARE = 0.10
SPLIT_FRACS = (0.70, 0.15, 0.15)

DATASET_COLUMNS = (
    "seed_id altitude_m temperature_k pressure_pa wind10_mps lapse_k_per_m "
    "density_ratio latitude_deg k_true ri p_convective p_neutral p_stable "
    "p_stratospheric"
).split()


def config_hash() -> str:
    return hashlib.sha256(
        json.dumps(GEN_CONFIG, sort_keys=True).encode()).hexdigest()


@dataclass(frozen=True)
class SyntheticSample:
    state: AtmosphericState
    k_true: float
    regime: RegimeTarget
    seed_id: int


@dataclass(frozen=True)
class DatasetSplit:
    train: np.ndarray
    val: np.ndarray
    test: np.ndarray
    seed: int
    histogram: dict[str, int]


def resid_fraction(label: str, ri: float, altitude_m: float) -> float:
    """Regime-dependent fraction of the residual ceiling, in [0, 1].

    Convective enhancement deepens as Ri drops below -0.1, stable suppression
    deepens as Ri rises above 0.1, and the stratospheric contribution halves
    per fixed altitude increment; neutral air sits exactly on the backbone.
    """
    cfg = GEN_CONFIG
    base = cfg["resid_frac_base"][label]
    if label == "convective":
        return base + cfg["conv_gain"] * math.tanh(-(ri + 0.1))
    if label == "stable":
        return base - cfg["stable_gain"] * math.tanh((ri - 0.1) / 2.0)
    if label == "stratospheric":
        return base * 2.0 ** (-(altitude_m - cfg["strato_alt_min_m"])
                              / cfg["strato_halving_m"])
    return base


def target_from_state(state: AtmosphericState, eta: float = 0.0) -> float:
    """Closed-form ground truth for a state (the generator's own oracle)."""
    ri = bulk_richardson(state)
    label = regime_target(ri, state.altitude_m).name()
    flux = mophys.surface_flux_state(state)
    k_mo = mophys.mo_tke(state)
    eps = mophys.dissipation(flux.u_star_mps, state.altitude_m,
                             flux.obukhov_len_m)
    ceiling = mophys.residual_ceiling(eps, state.density_ratio)
    frac = resid_fraction(label, ri, state.altitude_m)
    floor = GEN_CONFIG["regime_floor"][label]
    return float(k_mo + frac * ceiling * (1.0 + eta) + floor)


def synth_sample(seed_id: int, regime_hint: str | None = None) -> SyntheticSample:
    """One reproducible sample; the hint shapes the draw, the stored label is
    always recomputed from the realized state."""
    rng = np.random.default_rng([seed_id, 0x5157])
    hint = regime_hint or REGIME_NAMES[int(rng.integers(0, 4))]
    if hint not in REGIME_NAMES:
        raise ValueError(f"unknown regime hint {hint!r}")

    lo, hi = GEN_CONFIG["alt_range_m"]
    strato_lo = GEN_CONFIG["strato_alt_min_m"]
    if hint == "stratospheric":
        alt = float(np.exp(rng.uniform(math.log(strato_lo), math.log(hi))))
    else:
        alt = float(np.exp(rng.uniform(math.log(lo), math.log(strato_lo))))

    wind = float(rng.rayleigh(GEN_CONFIG["wind_mean_mps"] / math.sqrt(math.pi / 2)))
    mu, sd = GEN_CONFIG["lapse_mean_sd"][hint]
    lapse = float(rng.normal(mu, sd))
    t = isa_temperature(alt) + float(rng.normal(0.0, GEN_CONFIG["temp_anomaly_sd_k"]))
    p = isa_pressure(alt)
    ratio = min(p / (R_AIR * t) / RHO0, 1.3)
    lat = float(rng.uniform(-90.0, 90.0))
    state = AtmosphericState(altitude_m=alt, temperature_k=t, pressure_pa=p,
                             wind10_mps=wind, lapse_k_per_m=lapse,
                             density_ratio=ratio, latitude_deg=lat)

    eta = float(np.clip(rng.normal(0.0, GEN_CONFIG["noise_sd"]),
                        -GEN_CONFIG["noise_clip"], GEN_CONFIG["noise_clip"]))
    regime = regime_target(bulk_richardson(state), alt)
    return SyntheticSample(state=state, k_true=target_from_state(state, eta),
                           regime=regime, seed_id=seed_id)


def _stratified_split(labels: np.ndarray, seed: int):
    rng = np.random.default_rng([seed, 0xB175])
    buckets = {"train": [], "val": [], "test": []}
    for cls in range(4):
        idx = np.flatnonzero(labels == cls)
        rng.shuffle(idx)
        n = idx.size
        n_tr = int(round(SPLIT_FRACS[0] * n))
        n_va = int(round(SPLIT_FRACS[1] * n))
        buckets["train"].append(idx[:n_tr])
        buckets["val"].append(idx[n_tr:n_tr + n_va])
        buckets["test"].append(idx[n_tr + n_va:])
    return {k: np.sort(np.concatenate(v)) for k, v in buckets.items()}


def make_dataset(n: int, seed: int):
    """Generate n samples with a stratified 70/15/15 split.

    Regime hints rotate round-robin, then over-represented samples are
    re-drawn with hints at the deficient class until all four classes sit
    within the balance tolerance of an even 25% share (label-balanced data
    keeps the load-balancing term from fighting regime-aligned routing).
    Raises if coverage cannot be reached.
    """
    if n < MIN_DATASET_SIZE:
        raise ValueError(f"dataset size {n} below minimum {MIN_DATASET_SIZE}")
    samples = [synth_sample(seed * 1_000_003 + i, REGIME_NAMES[i % 4])
               for i in range(n)]
    next_id = n
    tol = GEN_CONFIG["class_balance_tol"]
    for _round in range(200):
        labels = np.array([s.regime.argmax() for s in samples])
        counts = np.bincount(labels, minlength=4)
        if counts.max() / n - 0.25 <= tol and 0.25 - counts.min() / n <= tol:
            break
        deficient = int(np.argmin(counts))
        surplus = int(np.argmax(counts))
        swap = np.flatnonzero(labels == surplus)[:max(8, n // 200)]
        for i in swap:
            samples[i] = synth_sample(seed * 1_000_003 + next_id,
                                      REGIME_NAMES[deficient])
            next_id += 1
    else:
        raise RuntimeError("regime coverage unattainable at this dataset size")

    labels = np.array([s.regime.argmax() for s in samples])
    parts = _stratified_split(labels, seed)
    for name, idx in parts.items():
        shares = np.bincount(labels[idx], minlength=4) / max(idx.size, 1)
        if shares.min() < MIN_REGIME_SHARE - 1e-9:
            raise RuntimeError(f"regime coverage below {MIN_REGIME_SHARE:.0%} "
                               f"in the {name} split")
    histogram = {REGIME_NAMES[c]: int((labels == c).sum()) for c in range(4)}
    split = DatasetSplit(train=parts["train"], val=parts["val"],
                         test=parts["test"], seed=seed, histogram=histogram)
    return samples, split


def save_dataset(samples, split: DatasetSplit, data_path, manifest_path) -> None:
    """Columnar plain-text export plus a manifest with seed and config hash."""
    with open(data_path, "w") as f:
        f.write("# " + " ".join(DATASET_COLUMNS) + "\n")
        for s in samples:
            st = s.state
            row = [s.seed_id, st.altitude_m, st.temperature_k, st.pressure_pa,
                   st.wind10_mps, st.lapse_k_per_m, st.density_ratio,
                   st.latitude_deg, s.k_true, s.regime.ri, *s.regime.probs]
            f.write(" ".join(f"{v:.12g}" if isinstance(v, float) else str(v)
                             for v in row) + "\n")
    manifest = dict(
        n=len(samples), seed=split.seed, config_hash=config_hash(),
        histogram=split.histogram,
        split_sizes=dict(train=int(split.train.size), val=int(split.val.size),
                         test=int(split.test.size)),
        splits=dict(train=split.train.tolist(), val=split.val.tolist(),
                    test=split.test.tolist()),
    )
    with open(manifest_path, "w") as f:
        json.dump(manifest, f, indent=1)


def load_dataset(data_path, manifest_path):
    """Round-trip loader for the columnar export."""
    samples = []
    with open(data_path) as f:
        for line in f:
            if line.startswith("#") or not line.strip():
                continue
            vals = line.split()
            seed_id = int(vals[0])
            nums = [float(v) for v in vals[1:]]
            state = AtmosphericState(*nums[:7])
            regime = RegimeTarget(probs=np.array(nums[9:13]), ri=nums[8])
            samples.append(SyntheticSample(state=state, k_true=nums[7],
                                           regime=regime, seed_id=seed_id))
    with open(manifest_path) as f:
        manifest = json.load(f)
    split = DatasetSplit(
        train=np.array(manifest["splits"]["train"], dtype=int),
        val=np.array(manifest["splits"]["val"], dtype=int),
        test=np.array(manifest["splits"]["test"], dtype=int),
        seed=manifest["seed"], histogram=manifest["histogram"])
    return samples, split
