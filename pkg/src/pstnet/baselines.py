"""Learned baselines: vanilla MLP, deep residual MLP, gradient-boosted trees.

All three consume exactly the same standardized features and z-scored targets
as the structured estimator, but regress k directly with no physics priors,
so nothing stops them from predicting below the analytical backbone.

The MLPs share the Adam loop conventions of the main trainer (cosine decay,
seeded shuffles, best-validation checkpoint, divergence guard).  The tree
ensemble is least-squares boosting with exact greedy splits; tree structure
may be found on a row subsample, but leaf values are always refit on the full
training set so the training MSE is non-increasing per added tree.
"""

from __future__ import annotations

import struct
import zlib
from dataclasses import dataclass, field

import numpy as np

from .atmos import NormStats, feature_vector
from .model import ChecksumError, ModelFormatError, VersionError
from .train import Adam, TrainConfig, TrainingDiverged, _cosine_lr

VANILLA_LAYERS = (7, 32, 16, 1)
DEEP_LAYERS = (7, 40, 40, 40, 40, 40, 1)

MLP_MAGIC = b"PMLP"
GBT_MAGIC = b"PGBT"
BASELINE_VERSION = 1


# ── MLPs ─────────────────────────────────────────────────────────────

@dataclass
class MLPModel:
    """Plain affine stack with tanh hidden units.

    The deep variant adds identity skip connections between equal-width
    hidden layers.  Outputs are standardized-k; use predict() for physical
    units.
    """

    weights: list
    biases: list
    norm_stats: NormStats
    residual: bool = False

    @property
    def layers(self):
        dims = [self.weights[0].shape[1]]
        dims += [w.shape[0] for w in self.weights]
        return tuple(dims)

    def copy(self) -> "MLPModel":
        return MLPModel([w.copy() for w in self.weights],
                        [b.copy() for b in self.biases],
                        self.norm_stats, self.residual)

    def param_count(self) -> int:
        return sum(w.size for w in self.weights) + sum(b.size for b in self.biases)


def new_mlp(seed: int, norm_stats: NormStats, layers=VANILLA_LAYERS,
            residual: bool = False) -> MLPModel:
    rng = np.random.default_rng(seed)
    weights, biases = [], []
    for fan_in, fan_out in zip(layers[:-1], layers[1:]):
        bound = np.sqrt(6.0 / fan_in)
        weights.append(rng.uniform(-bound, bound, size=(fan_out, fan_in)))
        biases.append(np.zeros(fan_out))
    return MLPModel(weights=weights, biases=biases, norm_stats=norm_stats,
                    residual=residual)


def _has_skip(model: MLPModel, i: int) -> bool:
    # identity skip around hidden layer i: needs residual mode, a non-input
    # non-output layer, and matching widths
    return (model.residual and 0 < i < len(model.weights) - 1
            and model.weights[i].shape[0] == model.weights[i].shape[1])


def mlp_forward_std(model: MLPModel, X: np.ndarray):
    """Standardized-k prediction plus the per-layer cache for backprop."""
    acts = [X]
    pre = []
    last = len(model.weights) - 1
    for i, (w, b) in enumerate(zip(model.weights, model.biases)):
        z = acts[i] @ w.T + b
        pre.append(z)
        if i == last:
            acts.append(z)
        else:
            a = np.tanh(z)
            if _has_skip(model, i):
                a = a + acts[i]
            acts.append(a)
    return acts[-1][:, 0], (pre, acts)


def mlp_forward(model: MLPModel, x: np.ndarray) -> float:
    """Physical-unit prediction for one standardized feature vector."""
    y_std, _ = mlp_forward_std(model, x[None, :])
    return float(model.norm_stats.destandardize_target(y_std[0]))


def mlp_predict_state(model: MLPModel, state) -> float:
    return mlp_forward(model, feature_vector(state, model.norm_stats))


def _mlp_backward(model: MLPModel, X, y_std):
    n = X.shape[0]
    out, (pre, acts) = mlp_forward_std(model, X)
    resid = out - y_std
    loss = float(np.mean(resid ** 2))
    g_w = [None] * len(model.weights)
    g_b = [None] * len(model.biases)
    last = len(model.weights) - 1
    g_act = (2.0 * resid / n)[:, None]   # dL / d acts[i+1]
    for i in range(last, -1, -1):
        if i == last:
            g_pre = g_act
        else:
            g_pre = g_act * (1.0 - np.tanh(pre[i]) ** 2)
        g_w[i] = g_pre.T @ acts[i]
        g_b[i] = g_pre.sum(axis=0)
        if i > 0:
            nxt = g_pre @ model.weights[i]
            if _has_skip(model, i):
                nxt = nxt + g_act
            g_act = nxt
    return loss, g_w, g_b


def mlp_train(model: MLPModel, samples, split, config: TrainConfig) -> MLPModel:
    """Data-term-only training with the shared loop conventions."""
    X = np.stack([feature_vector(samples[i].state, model.norm_stats)
                  for i in split.train])
    y = model.norm_stats.standardize_target(
        np.array([samples[i].k_true for i in split.train]))
    Xv = np.stack([feature_vector(samples[i].state, model.norm_stats)
                   for i in split.val])
    yv = model.norm_stats.standardize_target(
        np.array([samples[i].k_true for i in split.val]))
    n = X.shape[0]
    shapes = [(f"w{i}", w.shape) for i, w in enumerate(model.weights)]
    shapes += [(f"b{i}", b.shape) for i, b in enumerate(model.biases)]
    opt = Adam(shapes)
    best_val = np.inf
    best = model.copy()
    initial = None
    for epoch in range(config.epochs):
        lr = _cosine_lr(config, epoch)
        order = np.random.default_rng([config.seed, epoch, 0x7A19]).permutation(n)
        ep_loss = 0.0
        for lo in range(0, n, config.batch_size):
            sel = order[lo:lo + config.batch_size]
            loss, g_w, g_b = _mlp_backward(model, X[sel], y[sel])
            grads = {f"w{i}": g for i, g in enumerate(g_w)}
            grads.update({f"b{i}": g for i, g in enumerate(g_b)})
            params = {f"w{i}": w for i, w in enumerate(model.weights)}
            params.update({f"b{i}": b for i, b in enumerate(model.biases)})
            opt.step(params, grads, lr)
            ep_loss += loss * sel.size
        ep_loss /= n
        if initial is None:
            initial = ep_loss
        if ep_loss > config.divergence_factor * initial:
            raise TrainingDiverged(f"baseline loss diverged at epoch {epoch}")
        val, _ = mlp_forward_std(model, Xv)
        val_mse = float(np.mean((val - yv) ** 2))
        if val_mse < best_val:
            best_val = val_mse
            best = model.copy()
    return best


def save_mlp(model: MLPModel, path) -> None:
    layers = model.layers
    head = struct.pack("<4sHHB", MLP_MAGIC, BASELINE_VERSION, len(layers),
                       1 if model.residual else 0)
    head += struct.pack(f"<{len(layers)}H", *layers)
    ns = model.norm_stats
    stats = np.concatenate([ns.feat_mean, ns.feat_scale,
                            [ns.target_mean, ns.target_scale]])
    body = head + stats.astype("<f8").tobytes()
    for w, b in zip(model.weights, model.biases):
        body += w.astype("<f8").tobytes() + b.astype("<f8").tobytes()
    with open(path, "wb") as f:
        f.write(body + struct.pack("<I", zlib.crc32(body) & 0xFFFFFFFF))


def load_mlp(path) -> MLPModel:
    with open(path, "rb") as f:
        blob = f.read()
    body, (crc,) = blob[:-4], struct.unpack("<I", blob[-4:])
    if zlib.crc32(body) & 0xFFFFFFFF != crc:
        raise ChecksumError("baseline file checksum mismatch")
    magic, version, n_layers, residual = struct.unpack("<4sHHB", body[:9])
    if magic != MLP_MAGIC:
        raise ModelFormatError("bad magic")
    if version != BASELINE_VERSION:
        raise VersionError(f"unsupported baseline version {version}")
    off = 9
    layers = struct.unpack(f"<{n_layers}H", body[off:off + 2 * n_layers])
    off += 2 * n_layers
    stats = np.frombuffer(body[off:off + 128], dtype="<f8")
    off += 128
    norm = NormStats(stats[:7].copy(), stats[7:14].copy(),
                     float(stats[14]), float(stats[15]))
    weights, biases = [], []
    for fan_in, fan_out in zip(layers[:-1], layers[1:]):
        w = np.frombuffer(body[off:off + 8 * fan_in * fan_out],
                          dtype="<f8").reshape(fan_out, fan_in).copy()
        off += 8 * fan_in * fan_out
        b = np.frombuffer(body[off:off + 8 * fan_out], dtype="<f8").copy()
        off += 8 * fan_out
        weights.append(w)
        biases.append(b)
    return MLPModel(weights, biases, norm, residual=bool(residual))


# ── Gradient-boosted trees ───────────────────────────────────────────

@dataclass
class GBTConfig:
    n_trees: int = 200
    max_depth: int = 4
    shrinkage: float = 0.1
    subsample: float = 1.0
    min_leaf: int = 4
    seed: int = 0


@dataclass
class GBTModel:
    """Flat-array forest: per node (feature, threshold, left, right, value).

    feature < 0 marks a leaf.  Predictions are base + shrinkage * sum of
    per-tree leaf values on the standardized target scale.
    """

    base: float
    shrinkage: float
    trees: list = field(default_factory=list)   # each: dict of numpy arrays
    norm_stats: NormStats | None = None
    train_mse_per_tree: list = field(default_factory=list)

    def node_count(self) -> int:
        return sum(t["feature"].size for t in self.trees)

    def leaf_count(self) -> int:
        return sum(int((t["feature"] < 0).sum()) for t in self.trees)


def _best_split(Xs, r, min_leaf):
    """Exact greedy least-squares split; deterministic tie-breaking by lowest
    feature index then lowest threshold."""
    n, n_feat = Xs.shape
    best = None  # (sse, feature, threshold)
    total = r.sum()
    sq = (r ** 2).sum()
    for f in range(n_feat):
        order = np.argsort(Xs[:, f], kind="stable")
        xv = Xs[order, f]
        rv = r[order]
        csum = np.cumsum(rv)[:-1]
        cnt = np.arange(1, n)
        valid = xv[:-1] < xv[1:]
        valid &= (cnt >= min_leaf) & (n - cnt >= min_leaf)
        if not valid.any():
            continue
        left_mean = csum / cnt
        right_mean = (total - csum) / (n - cnt)
        sse = sq - cnt * left_mean ** 2 - (n - cnt) * right_mean ** 2
        sse = np.where(valid, sse, np.inf)
        i = int(np.argmin(sse))
        if not np.isfinite(sse[i]):
            continue
        thr = 0.5 * (xv[i] + xv[i + 1])
        cand = (float(sse[i]), f, float(thr))
        if best is None or cand[0] < best[0] - 1e-12:
            best = cand
    return best


def _fit_tree(X, r, cfg: GBTConfig, rows):
    feature, thresh, left, right, value = [], [], [], [], []

    def grow(idx, depth):
        node = len(feature)
        feature.append(-1)
        thresh.append(0.0)
        left.append(-1)
        right.append(-1)
        value.append(float(r[idx].mean()) if idx.size else 0.0)
        if depth >= cfg.max_depth or idx.size < 2 * cfg.min_leaf:
            return node
        split = _best_split(X[idx], r[idx], cfg.min_leaf)
        if split is None:
            return node
        _, f, thr = split
        mask = X[idx, f] <= thr
        if not mask.any() or mask.all():
            return node
        feature[node] = f
        thresh[node] = thr
        left[node] = grow(idx[mask], depth + 1)
        right[node] = grow(idx[~mask], depth + 1)
        return node

    grow(rows, 0)
    return dict(feature=np.array(feature, dtype=np.int32),
                threshold=np.array(thresh),
                left=np.array(left, dtype=np.int32),
                right=np.array(right, dtype=np.int32),
                value=np.array(value))


def _tree_apply(tree, X):
    """Leaf index for every row."""
    out = np.zeros(X.shape[0], dtype=np.int32)
    todo = [(0, np.arange(X.shape[0]))]
    while todo:
        node, idx = todo.pop()
        f = tree["feature"][node]
        if f < 0 or idx.size == 0:
            out[idx] = node
            continue
        mask = X[idx, f] <= tree["threshold"][node]
        todo.append((tree["left"][node], idx[mask]))
        todo.append((tree["right"][node], idx[~mask]))
    return out


def gbt_fit(X: np.ndarray, y_std: np.ndarray, cfg: GBTConfig,
            norm_stats: NormStats | None = None) -> GBTModel:
    """Least-squares boosting on standardized targets.

    Leaf values are refit on all rows after the structure is grown (on the
    subsample), which keeps the full-sample training MSE non-increasing.
    Degenerate constant targets yield the base-only model.
    """
    n = X.shape[0]
    if n < 2:
        raise ValueError("need at least 2 rows")
    model = GBTModel(base=float(y_std.mean()), shrinkage=cfg.shrinkage,
                     norm_stats=norm_stats)
    pred = np.full(n, model.base)
    r = y_std - pred
    model.train_mse_per_tree.append(float(np.mean(r ** 2)))
    if np.all(y_std == y_std[0]):
        return model
    rng = np.random.default_rng([cfg.seed, 0x6B7])
    for _t in range(cfg.n_trees):
        if cfg.subsample < 1.0:
            rows = np.sort(rng.choice(n, size=max(2 * cfg.min_leaf,
                                                  int(cfg.subsample * n)),
                                      replace=False))
        else:
            rows = np.arange(n)
        tree = _fit_tree(X, r, cfg, rows)
        # refit leaves on the full residuals
        leaves = _tree_apply(tree, X)
        sums = np.bincount(leaves, weights=r, minlength=tree["value"].size)
        cnts = np.bincount(leaves, minlength=tree["value"].size)
        refit = np.where(cnts > 0, sums / np.maximum(cnts, 1), 0.0)
        tree["value"] = refit
        contrib = cfg.shrinkage * refit[leaves]
        pred += contrib
        r = y_std - pred
        model.trees.append(tree)
        model.train_mse_per_tree.append(float(np.mean(r ** 2)))
    return model


def gbt_predict_std(model: GBTModel, X: np.ndarray) -> np.ndarray:
    out = np.full(X.shape[0], model.base)
    for tree in model.trees:
        out += model.shrinkage * tree["value"][_tree_apply(tree, X)]
    return out


def gbt_predict(model: GBTModel, x: np.ndarray) -> float:
    """Physical-unit prediction for one standardized feature vector."""
    y = gbt_predict_std(model, x[None, :])[0]
    if model.norm_stats is None:
        return float(y)
    return float(model.norm_stats.destandardize_target(y))


def gbt_grid_search(X, y_std, Xv, yv_std, seed: int = 0,
                    n_trees: int = 200):
    """Small deterministic grid on the validation split, replacing an
    opaque hyperparameter search; returns (best config, results table)."""
    grid = [GBTConfig(n_trees=n_trees, max_depth=d, shrinkage=s,
                      subsample=sub, seed=seed)
            for d in (3, 4, 6) for s in (0.05, 0.1, 0.3) for sub in (0.8, 1.0)]
    results = []
    best = None
    for cfg in grid:
        m = gbt_fit(X, y_std, cfg)
        val_mse = float(np.mean((gbt_predict_std(m, Xv) - yv_std) ** 2))
        results.append((cfg, val_mse))
        if best is None or val_mse < best[1]:
            best = (cfg, val_mse)
    return best[0], results


def save_gbt(model: GBTModel, path) -> None:
    head = struct.pack("<4sHdIH", GBT_MAGIC, BASELINE_VERSION, model.base,
                       len(model.trees), 1 if model.norm_stats else 0)
    body = head + struct.pack("<d", model.shrinkage)
    if model.norm_stats:
        ns = model.norm_stats
        stats = np.concatenate([ns.feat_mean, ns.feat_scale,
                                [ns.target_mean, ns.target_scale]])
        body += stats.astype("<f8").tobytes()
    for t in model.trees:
        body += struct.pack("<I", t["feature"].size)
        body += t["feature"].astype("<i4").tobytes()
        body += t["threshold"].astype("<f8").tobytes()
        body += t["left"].astype("<i4").tobytes()
        body += t["right"].astype("<i4").tobytes()
        body += t["value"].astype("<f8").tobytes()
    with open(path, "wb") as f:
        f.write(body + struct.pack("<I", zlib.crc32(body) & 0xFFFFFFFF))


def load_gbt(path) -> GBTModel:
    with open(path, "rb") as f:
        blob = f.read()
    body, (crc,) = blob[:-4], struct.unpack("<I", blob[-4:])
    if zlib.crc32(body) & 0xFFFFFFFF != crc:
        raise ChecksumError("baseline file checksum mismatch")
    magic, version, base, n_trees, has_stats = struct.unpack("<4sHdIH", body[:20])
    if magic != GBT_MAGIC:
        raise ModelFormatError("bad magic")
    if version != BASELINE_VERSION:
        raise VersionError(f"unsupported baseline version {version}")
    off = 20
    (shrinkage,) = struct.unpack("<d", body[off:off + 8])
    off += 8
    norm = None
    if has_stats:
        stats = np.frombuffer(body[off:off + 128], dtype="<f8")
        off += 128
        norm = NormStats(stats[:7].copy(), stats[7:14].copy(),
                         float(stats[14]), float(stats[15]))
    trees = []
    for _ in range(n_trees):
        (n_nodes,) = struct.unpack("<I", body[off:off + 4])
        off += 4
        tree = {}
        for name, dt, w in (("feature", "<i4", 4), ("threshold", "<f8", 8),
                            ("left", "<i4", 4), ("right", "<i4", 4),
                            ("value", "<f8", 8)):
            tree[name] = np.frombuffer(body[off:off + w * n_nodes],
                                       dtype=dt).copy()
            off += w * n_nodes
        trees.append(tree)
    return GBTModel(base=base, shrinkage=shrinkage, trees=trees,
                    norm_stats=norm)
