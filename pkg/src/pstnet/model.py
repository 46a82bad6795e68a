"""The learnable turbulence corrector: gate, four experts, density FiLM, head.

A deliberately tiny network (543 learnable scalars in the reference
configuration) wrapped around the zero-parameter physics path:

    x (7 standardized features)
      -> gate: affine(7->16) -> sigmoid -> affine(16->4) -> softmax -> alpha
      -> experts j=0..3: affine(7->6) -> GELU -> affine(6->4) -> z_j
      -> FiLM hyper-net on density ratio: affine(1->3) -> tanh -> affine(3->8)
         giving one shared (gamma, beta) pair; z~_j = gamma * z_j + beta
      -> zbar = sum_j alpha_j z~_j;  s = w . zbar + b
      -> k = k_MO + sigmoid(s) * C_K eps^(1/3) sqrt(rho/rho0)

Gradients are derived by hand (no autodiff) and verified against central
finite differences in the test suite.  Everything here runs in float64; the
compiled single-sample path lives in fastpath.py.
"""

from __future__ import annotations

import struct
import zlib
from dataclasses import dataclass, field

import numpy as np

from . import mophys
from .atmos import AtmosphericState, NormStats, feature_vector
from .mophys import PhysicsConstants

# Reference configuration.  The hidden sizes are pinned by the parameter
# budget: four experts of width 6 with a 4-wide output keep the total
# learnable count inside [500, 600].
N_EXPERTS = 4
GATE_HIDDEN = 16
EXPERT_HIDDEN = 6
EXPERT_DIM = 4
FILM_HIDDEN = 3

GELU_A = 0.7978845608   # sqrt(2/pi)
GELU_C = 0.044715

MODEL_MAGIC = b"PSTN"
MODEL_VERSION = 1


class ModelFormatError(ValueError):
    """Model file is corrupt, truncated, or carries an unknown version."""


class ChecksumError(ModelFormatError):
    """Model file checksum does not match its contents."""


class VersionError(ModelFormatError):
    """Model file version is not supported."""


def param_specs(d: int = EXPERT_DIM, h_gate: int = GATE_HIDDEN,
                h_expert: int = EXPERT_HIDDEN, h_film: int = FILM_HIDDEN):
    """Fixed (name, shape) order of every learnable tensor."""
    specs = [
        ("gate_w1", (h_gate, 7)), ("gate_b1", (h_gate,)),
        ("gate_w2", (N_EXPERTS, h_gate)), ("gate_b2", (N_EXPERTS,)),
    ]
    for j in range(N_EXPERTS):
        specs += [
            (f"expert{j}_w1", (h_expert, 7)), (f"expert{j}_b1", (h_expert,)),
            (f"expert{j}_w2", (d, h_expert)), (f"expert{j}_b2", (d,)),
        ]
    specs += [
        ("film_w1", (h_film, 1)), ("film_b1", (h_film,)),
        ("film_w2", (2 * d, h_film)), ("film_b2", (2 * d,)),
        ("head_w", (d,)), ("head_b", (1,)),
    ]
    return specs


@dataclass
class PSTNetModel:
    """All learnable parameters plus the fixed physics constants."""

    params: dict[str, np.ndarray]
    norm_stats: NormStats
    constants: PhysicsConstants = field(default_factory=PhysicsConstants)

    @property
    def d(self) -> int:
        return self.params["head_w"].shape[0]

    @property
    def h_gate(self) -> int:
        return self.params["gate_b1"].shape[0]

    @property
    def h_expert(self) -> int:
        return self.params["expert0_b1"].shape[0]

    @property
    def h_film(self) -> int:
        return self.params["film_b1"].shape[0]

    def specs(self):
        return param_specs(self.d, self.h_gate, self.h_expert, self.h_film)

    def copy(self) -> "PSTNetModel":
        return PSTNetModel({k: v.copy() for k, v in self.params.items()},
                           self.norm_stats, self.constants)

    def flat(self) -> np.ndarray:
        return np.concatenate([self.params[n].ravel() for n, _ in self.specs()])

    def set_flat(self, theta: np.ndarray) -> None:
        off = 0
        for name, shape in self.specs():
            size = int(np.prod(shape))
            self.params[name][...] = theta[off:off + size].reshape(shape)
            off += size
        if off != theta.size:
            raise ValueError("flat vector length mismatch")


@dataclass(frozen=True)
class ForwardDiagnostics:
    """Everything the forward pass saw, for inspection and the demo UI."""

    alpha: np.ndarray        # (4,) gate weights on the simplex
    per_expert_z: np.ndarray  # (4, d) raw expert outputs
    z_bar: np.ndarray        # (d,) aggregated, FiLM-conditioned representation
    s: float                 # head logit
    k_mo: float              # analytical backbone, m^2/s^2
    epsilon: float           # dissipation estimate, m^2/s^3
    k_out: float             # final constrained output, m^2/s^2


EXPERT_BIAS_INIT = 0.5


def new_model(seed: int, norm_stats: NormStats, d: int = EXPERT_DIM,
              h_gate: int = GATE_HIDDEN, h_expert: int = EXPERT_HIDDEN,
              h_film: int = FILM_HIDDEN) -> PSTNetModel:
    """Kaiming-uniform weights with three deliberate exceptions.

    The FiLM output layer is zero (with the +1 offset on the gamma half the
    modulation starts as the identity); each expert's second-layer weights
    are zero while its output bias is a small random constant, so experts
    begin as four distinct constants and the whole network starts as
    "backbone plus small residual".
    """
    rng = np.random.default_rng(seed)
    params = {}
    for name, shape in param_specs(d, h_gate, h_expert, h_film):
        if name.startswith("expert") and name.endswith("_b2"):
            params[name] = rng.uniform(-EXPERT_BIAS_INIT, EXPERT_BIAS_INIT,
                                       size=shape)
        elif name in ("film_w2", "film_b2") or name.endswith("_b1") \
                or name.endswith("_b2") or name == "head_b" \
                or (name.startswith("expert") and name.endswith("_w2")):
            params[name] = np.zeros(shape)
        elif name == "head_w":
            bound = np.sqrt(6.0 / d)
            params[name] = rng.uniform(-bound, bound, size=shape)
        else:
            fan_in = shape[1]
            bound = np.sqrt(6.0 / fan_in)
            params[name] = rng.uniform(-bound, bound, size=shape)
    return PSTNetModel(params=params, norm_stats=norm_stats)


# ── Elementary pieces ────────────────────────────────────────────────

def gelu(h):
    u = GELU_A * (h + GELU_C * h ** 3)
    return 0.5 * h * (1.0 + np.tanh(u))


def gelu_grad(h):
    u = GELU_A * (h + GELU_C * h ** 3)
    t = np.tanh(u)
    return 0.5 * (1.0 + t) + 0.5 * h * (1.0 - t ** 2) * GELU_A * (1.0 + 3.0 * GELU_C * h ** 2)


def _sigmoid(v):
    return np.where(v >= 0, 1.0 / (1.0 + np.exp(-np.abs(v))),
                    np.exp(-np.abs(v)) / (1.0 + np.exp(-np.abs(v))))


def _softmax_rows(logits):
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def gate_forward(model: PSTNetModel, x: np.ndarray) -> np.ndarray:
    """Gate weights alpha on the 3-simplex for one standardized input."""
    p = model.params
    h = _sigmoid(p["gate_w1"] @ x + p["gate_b1"])
    return _softmax_rows(p["gate_w2"] @ h + p["gate_b2"])


def expert_forward(model: PSTNetModel, j: int, x: np.ndarray) -> np.ndarray:
    """Raw output of expert j; independent of every other expert."""
    if not 0 <= j < N_EXPERTS:
        raise ValueError(f"expert index {j} out of range")
    p = model.params
    h = gelu(p[f"expert{j}_w1"] @ x + p[f"expert{j}_b1"])
    return p[f"expert{j}_w2"] @ h + p[f"expert{j}_b2"]


def film_params(model: PSTNetModel, density_ratio: float):
    """Shared (gamma, beta) pair from the density hyper-network."""
    p = model.params
    t = np.tanh(p["film_w1"][:, 0] * density_ratio + p["film_b1"])
    out = p["film_w2"] @ t + p["film_b2"]
    d = model.d
    return 1.0 + out[:d], out[d:]


def film_condition(model: PSTNetModel, z: np.ndarray,
                   density_ratio: float) -> np.ndarray:
    """Apply the density-conditioned affine modulation to one representation."""
    if density_ratio <= 0:
        raise ValueError("density ratio must be positive")
    gamma, beta = film_params(model, density_ratio)
    return gamma * z + beta


def forward(model: PSTNetModel, state: AtmosphericState):
    """Full estimate for one state: (k, diagnostics).

    The output is architecturally sandwiched between the analytical backbone
    and the backbone plus the spectral residual ceiling.
    """
    x = feature_vector(state, model.norm_stats)
    alpha = gate_forward(model, x)
    z = np.stack([expert_forward(model, j, x) for j in range(N_EXPERTS)])
    gamma, beta = film_params(model, state.density_ratio)
    z_bar = gamma * (alpha @ z) + beta   # same (gamma, beta) for every expert
    s = float(model.params["head_w"] @ z_bar + model.params["head_b"][0])
    flux = mophys.surface_flux_state(state)
    k_mo = mophys.mo_tke(state)
    eps = mophys.dissipation(flux.u_star_mps, state.altitude_m,
                             flux.obukhov_len_m)
    k = mophys.kolmogorov_output(k_mo, s, eps, state.density_ratio)
    diag = ForwardDiagnostics(alpha=alpha, per_expert_z=z, z_bar=z_bar, s=s,
                              k_mo=k_mo, epsilon=eps, k_out=k)
    return k, diag


# ── Vectorized batch path ────────────────────────────────────────────

def forward_batch(model: PSTNetModel, X: np.ndarray, k_mo: np.ndarray,
                  ceiling: np.ndarray, ratio: np.ndarray):
    """Batched forward over standardized features and precomputed physics.

    `ceiling` is C_K eps^(1/3) sqrt(rho/rho0) per sample.  Returns the
    physical estimate and a cache holding every intermediate the backward
    pass needs.
    """
    p = model.params
    n = X.shape[0]
    d = model.d
    pre_g = X @ p["gate_w1"].T + p["gate_b1"]
    hid_g = _sigmoid(pre_g)
    logits = hid_g @ p["gate_w2"].T + p["gate_b2"]
    alpha = _softmax_rows(logits)

    pre_e = np.empty((N_EXPERTS, n, model.h_expert))
    act_e = np.empty_like(pre_e)
    z = np.empty((N_EXPERTS, n, d))
    for j in range(N_EXPERTS):
        pre_e[j] = X @ p[f"expert{j}_w1"].T + p[f"expert{j}_b1"]
        act_e[j] = gelu(pre_e[j])
        z[j] = act_e[j] @ p[f"expert{j}_w2"].T + p[f"expert{j}_b2"]

    pre_f = ratio[:, None] * p["film_w1"][:, 0] + p["film_b1"]
    tan_f = np.tanh(pre_f)
    film_out = tan_f @ p["film_w2"].T + p["film_b2"]
    gamma = 1.0 + film_out[:, :d]
    beta = film_out[:, d:]

    z_mix = np.einsum("nj,jnk->nk", alpha, z)
    z_bar = gamma * z_mix + beta
    s = z_bar @ p["head_w"] + p["head_b"][0]
    sig = _sigmoid(s)
    k_hat = k_mo + sig * ceiling
    cache = dict(X=X, pre_g=pre_g, hid_g=hid_g, alpha=alpha, pre_e=pre_e,
                 act_e=act_e, z=z, tan_f=tan_f, gamma=gamma, beta=beta,
                 z_mix=z_mix, z_bar=z_bar, s=s, sig=sig, k_hat=k_hat,
                 ceiling=ceiling, ratio=ratio, k_mo=k_mo)
    return k_hat, cache


def loss_components(model: PSTNetModel, cache: dict, y_std: np.ndarray,
                    y_regime: np.ndarray, lambda_g: float, lambda_b: float):
    """Composite objective pieces on one batch (targets standardized)."""
    ts = model.norm_stats.target_scale
    tm = model.norm_stats.target_mean
    k_hat_std = (cache["k_hat"] - tm) / ts
    resid = k_hat_std - y_std
    data_mse = float(np.mean(resid ** 2))
    log_a = np.log(np.maximum(cache["alpha"], 1e-300))
    gate_ce = float(np.mean(-(y_regime * log_a).sum(axis=1)))
    abar = cache["alpha"].mean(axis=0)
    load_balance = float(4.0 * np.sum(abar ** 2))
    total = data_mse + lambda_g * gate_ce + lambda_b * load_balance
    return dict(data_mse=data_mse, gate_ce=gate_ce,
                load_balance=load_balance, total=total)


def backward_arrays(model: PSTNetModel, X, k_mo, ceiling, ratio, y_std,
                    y_regime, lambda_g: float, lambda_b: float):
    """Exact analytic gradients of the composite objective on one batch.

    The physics inputs (k_MO, the residual ceiling) are constants with
    respect to the parameters.  Returns (gradients, loss components).
    """
    n = X.shape[0]
    if n == 0:
        raise ValueError("empty batch")
    p = model.params
    d = model.d
    _, cache = forward_batch(model, X, k_mo, ceiling, ratio)
    comps = loss_components(model, cache, y_std, y_regime, lambda_g, lambda_b)

    ts = model.norm_stats.target_scale
    tm = model.norm_stats.target_mean
    alpha, z, sig = cache["alpha"], cache["z"], cache["sig"]
    gamma, z_mix, z_bar = cache["gamma"], cache["z_mix"], cache["z_bar"]

    grads = {name: np.zeros(shape) for name, shape in model.specs()}

    # data path: d L_data / d s
    k_hat_std = (cache["k_hat"] - tm) / ts
    d_khat = 2.0 * (k_hat_std - y_std) / (n * ts)
    d_s = d_khat * sig * (1.0 - sig) * ceiling           # (n,)

    grads["head_w"] += d_s @ z_bar
    grads["head_b"][0] += d_s.sum()
    d_zbar = d_s[:, None] * p["head_w"]                  # (n, d)

    # FiLM hyper-network
    d_gamma = d_zbar * z_mix
    d_beta = d_zbar
    d_film_out = np.concatenate([d_gamma, d_beta], axis=1)   # (n, 2d)
    grads["film_w2"] += d_film_out.T @ cache["tan_f"]
    grads["film_b2"] += d_film_out.sum(axis=0)
    d_tan = d_film_out @ p["film_w2"]                    # (n, h_film)
    d_pre_f = d_tan * (1.0 - cache["tan_f"] ** 2)
    grads["film_w1"][:, 0] += (d_pre_f * ratio[:, None]).sum(axis=0)
    grads["film_b1"] += d_pre_f.sum(axis=0)

    # mixture and experts
    d_zmix = d_zbar * gamma                              # (n, d)
    d_alpha = np.einsum("nk,jnk->nj", d_zmix, z)         # data path into alpha
    d_alpha += lambda_b * 8.0 * alpha.mean(axis=0)[None, :] / n
    inner = (d_alpha * alpha).sum(axis=1, keepdims=True)
    d_logits = alpha * (d_alpha - inner)                 # softmax jacobian
    d_logits += lambda_g * (alpha - y_regime) / n        # cross-entropy path

    grads["gate_w2"] += d_logits.T @ cache["hid_g"]
    grads["gate_b2"] += d_logits.sum(axis=0)
    d_hid = d_logits @ p["gate_w2"]
    d_pre_g = d_hid * cache["hid_g"] * (1.0 - cache["hid_g"])
    grads["gate_w1"] += d_pre_g.T @ X
    grads["gate_b1"] += d_pre_g.sum(axis=0)

    for j in range(N_EXPERTS):
        d_zj = alpha[:, j][:, None] * d_zmix             # (n, d)
        grads[f"expert{j}_w2"] += d_zj.T @ cache["act_e"][j]
        grads[f"expert{j}_b2"] += d_zj.sum(axis=0)
        d_act = d_zj @ p[f"expert{j}_w2"]
        d_pre = d_act * gelu_grad(cache["pre_e"][j])
        grads[f"expert{j}_w1"] += d_pre.T @ X
        grads[f"expert{j}_b1"] += d_pre.sum(axis=0)

    return grads, comps


def prepare_batch(model: PSTNetModel, states, k_true=None, regimes=None):
    """Standardized features plus the per-sample physics constants."""
    X = np.stack([feature_vector(st, model.norm_stats) for st in states])
    k_mo, eps, ceiling = mophys.physics_columns(states)
    ratio = np.array([st.density_ratio for st in states])
    out = [X, k_mo, ceiling, ratio]
    if k_true is not None:
        out.append(model.norm_stats.standardize_target(np.asarray(k_true, dtype=float)))
    if regimes is not None:
        out.append(np.stack([r.probs for r in regimes]))
    return tuple(out)


def backward(model: PSTNetModel, batch, lambda_g: float, lambda_b: float):
    """Gradient of the composite objective on a list of
    (state, k_true, regime target) samples."""
    if len(batch) == 0:
        raise ValueError("empty batch")
    states = [b[0] for b in batch]
    k_true = [b[1] for b in batch]
    regimes = [b[2] for b in batch]
    X, k_mo, ceiling, ratio, y_std, y_reg = prepare_batch(
        model, states, k_true, regimes)
    return backward_arrays(model, X, k_mo, ceiling, ratio, y_std, y_reg,
                           lambda_g, lambda_b)


# ── Audit and serialization ──────────────────────────────────────────

@dataclass(frozen=True)
class ParamAudit:
    total: int
    breakdown: dict[str, int]
    serialized_bytes: int


def param_audit(model: PSTNetModel) -> ParamAudit:
    """Exact learnable-scalar count per component plus the file size.

    Physics constants and standardization statistics are not learnable and
    are excluded from the total (the stats are still stored in the file).
    """
    groups = {"gate": 0, "experts": 0, "film": 0, "head": 0}
    for name, shape in model.specs():
        size = int(np.prod(shape))
        if name.startswith("gate"):
            groups["gate"] += size
        elif name.startswith("expert"):
            groups["experts"] += size
        elif name.startswith("film"):
            groups["film"] += size
        else:
            groups["head"] += size
    total = sum(groups.values())
    header = 16
    stats_bytes = 16 * 8
    payload = total * 4
    return ParamAudit(total=total, breakdown=groups,
                      serialized_bytes=header + stats_bytes + payload + 4)


def save(model: PSTNetModel, path) -> None:
    """Write the little-endian binary model file.

    Layout: magic, version u16, param-count u32, (d, H_gate, H_film) u16,
    norm stats as 16 float64, parameters as float32 in spec order, then a
    CRC32 of all preceding bytes.  Parameters are stored in float32; the
    in-memory model keeps float64, so save -> load -> save is byte-stable.
    """
    audit = param_audit(model)
    head = struct.pack("<4sHIHHH", MODEL_MAGIC, MODEL_VERSION, audit.total,
                       model.d, model.h_gate, model.h_film)
    ns = model.norm_stats
    stats = np.concatenate([ns.feat_mean, ns.feat_scale,
                            [ns.target_mean, ns.target_scale]])
    body = head + stats.astype("<f8").tobytes()
    body += model.flat().astype("<f4").tobytes()
    crc = zlib.crc32(body) & 0xFFFFFFFF
    with open(path, "wb") as f:
        f.write(body + struct.pack("<I", crc))


def load(path) -> PSTNetModel:
    """Read a model file; rejects bad magic, versions, and checksums."""
    with open(path, "rb") as f:
        blob = f.read()
    if len(blob) < 20:
        raise ModelFormatError("model file truncated")
    body, (crc,) = blob[:-4], struct.unpack("<I", blob[-4:])
    if zlib.crc32(body) & 0xFFFFFFFF != crc:
        raise ChecksumError("model file checksum mismatch")
    magic, version, count, d, h_gate, h_film = struct.unpack("<4sHIHHH", body[:16])
    if magic != MODEL_MAGIC:
        raise ModelFormatError("bad magic")
    if version != MODEL_VERSION:
        raise VersionError(f"unsupported model version {version}")
    stats = np.frombuffer(body[16:16 + 128], dtype="<f8")
    norm = NormStats(feat_mean=stats[:7].copy(), feat_scale=stats[7:14].copy(),
                     target_mean=float(stats[14]), target_scale=float(stats[15]))
    # expert width is implied by the residual count
    h_expert = None
    for h in range(1, 65):
        specs = param_specs(d, h_gate, h, h_film)
        if sum(int(np.prod(s)) for _, s in specs) == count:
            h_expert = h
            break
    if h_expert is None:
        raise ModelFormatError("parameter count matches no known layout")
    raw = np.frombuffer(body[16 + 128:], dtype="<f4")
    if raw.size != count:
        raise ModelFormatError("parameter payload length mismatch")
    model = PSTNetModel(
        params={name: np.zeros(shape)
                for name, shape in param_specs(d, h_gate, h_expert, h_film)},
        norm_stats=norm)
    model.set_flat(raw.astype(np.float64))
    return model
