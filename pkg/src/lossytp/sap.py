"""Semantic-aware predictors: tiny regressors that rank next-layer groups.

One predictor pair (MHA + MLP head counts) per feature layer l in [0, L-2].
Input is the hidden state entering layer l; the regression target is the
max-normalized vector of layer l+1's per-group contribution norms. Running
one layer ahead is what lets prediction hide under the previous layer's
communication at generation time.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from .model import (BlockKind, ModelSpec, RankList, WeightStore, dense_forward,
                    rms_norm)

CHECKPOINT_MAGIC = b"HALP"
CHECKPOINT_VERSION = 1
_KINDS = (BlockKind.MHA, BlockKind.MLP)


class PredictorMissingError(KeyError):
    """No predictor exists for the requested layer (the last layer has none)."""


class CalibrationError(ValueError):
    pass


@dataclass
class PredictorParams:
    """linear -> rectifier -> linear regression weights for one (layer, kind)."""

    w1: np.ndarray  # (D, hidden_p)
    w2: np.ndarray  # (hidden_p, group_count)
    b1: np.ndarray | None = None  # (hidden_p,)
    b2: np.ndarray | None = None  # (group_count,)

    def __post_init__(self):
        if self.b1 is None:
            self.b1 = np.zeros(self.w1.shape[1])
        if self.b2 is None:
            self.b2 = np.zeros(self.w2.shape[1])


@dataclass
class TrainingSample:
    feature: np.ndarray  # hidden state entering layer l, length D
    target: np.ndarray   # layer l+1 per-group norms, max-normalized


@dataclass
class CalibrationSet:
    """Stacked training data keyed by (feature layer, block kind)."""

    spec: ModelSpec
    features: dict = field(default_factory=dict)  # (layer, kind) -> (N, D)
    targets: dict = field(default_factory=dict)   # (layer, kind) -> (N, N_k)

    def samples(self, layer: int, kind: BlockKind) -> list[TrainingSample]:
        x = self.features[(layer, kind)]
        y = self.targets[(layer, kind)]
        return [TrainingSample(feature=x[i], target=y[i]) for i in range(len(x))]

    def sample_count(self, kind: BlockKind) -> int:
        return sum(len(self.features[k]) for k in self.features if k[1] == kind)


@dataclass
class PredictorSet:
    spec: ModelSpec
    hidden_p: int
    params: dict = field(default_factory=dict)  # (feature layer, kind) -> PredictorParams

    def has_layer(self, layer: int) -> bool:
        return (layer, BlockKind.MHA) in self.params


def synthetic_prompts(spec: ModelSpec, count: int, length: int, seed: int,
                      step: int = 2) -> list[np.ndarray]:
    """Random-walk token sequences: the desk-scale calibration distribution.

    Neighboring tokens stay close in id space, which gives hidden states the
    across-position coherence that natural text has and uniform noise lacks.
    """
    rng = np.random.default_rng(seed)
    prompts = []
    for _ in range(count):
        tok = int(rng.integers(0, spec.vocab_size))
        walk = [tok]
        for _ in range(length - 1):
            tok = int((tok + rng.integers(-step, step + 1)) % spec.vocab_size)
            walk.append(tok)
        prompts.append(np.array(walk, dtype=np.int64))
    return prompts


def normalize_targets(norms: np.ndarray) -> np.ndarray:
    """Scale each sample's norm vector to unit max (zero rows stay zero)."""
    peak = norms.max(axis=-1, keepdims=True)
    peak = np.where(peak > 0, peak, 1.0)
    return norms / peak


def collect_calibration(store: WeightStore, prompts) -> CalibrationSet:
    """Record (hidden state at layer l -> layer l+1 group norms) on prompts.

    One sample per position per feature layer per block kind; the last layer
    produces no targets.
    """
    if not prompts:
        raise CalibrationError("at least one prompt is required")
    spec = store.spec
    calib = CalibrationSet(spec=spec)
    feats: dict = {}
    targs: dict = {}
    for prompt in prompts:
        trace = dense_forward(store, prompt)
        for layer in range(spec.num_layers - 1):
            for kind in _KINDS:
                key = (layer, kind)
                feats.setdefault(key, []).append(trace.hiddens[layer])
                targs.setdefault(key, []).append(
                    normalize_targets(trace.group_norms[(layer + 1, kind)]))
    for key in feats:
        calib.features[key] = np.concatenate(feats[key], axis=0)
        calib.targets[key] = np.concatenate(targs[key], axis=0)
    return calib


def _forward_scores(params: PredictorParams, x: np.ndarray) -> np.ndarray:
    # Residual-stream magnitudes grow with depth; normalizing the feature
    # keeps one set of hyperparameters workable for every layer.
    xn = rms_norm(x)
    h = np.maximum(xn @ params.w1 + params.b1, 0.0)
    return h @ params.w2 + params.b2


def loss_and_grads(params: PredictorParams, x: np.ndarray, y: np.ndarray):
    """Mean-squared-error loss with analytic gradients for all four tensors."""
    xn = rms_norm(x)
    h = np.maximum(xn @ params.w1 + params.b1, 0.0)
    pred = h @ params.w2 + params.b2
    err = pred - y
    loss = float(np.mean(err ** 2))
    d_out = 2.0 * err / err.size
    g2 = h.T @ d_out
    gb2 = d_out.sum(axis=0)
    d_h = (d_out @ params.w2.T) * (h > 0)
    g1 = xn.T @ d_h
    gb1 = d_h.sum(axis=0)
    return loss, (g1, gb1, g2, gb2)


def mse(params: PredictorParams, x: np.ndarray, y: np.ndarray) -> float:
    return float(np.mean((_forward_scores(params, x) - y) ** 2))


def train(calib: CalibrationSet, hidden_p: int = 64, epochs: int = 300,
          learning_rate: float = 0.08, seed: int = 0, batch_size: int = 32):
    """Mini-batch gradient descent on every (layer, kind) regressor.

    Deterministic per seed: initialization, the 90/10 train/validation split,
    and the per-epoch shuffles all come from one generator. Returns the
    predictor set and the mean validation MSE per block kind.
    """
    if not calib.features:
        raise CalibrationError("empty calibration set")
    spec = calib.spec
    rng = np.random.default_rng(seed)
    pset = PredictorSet(spec=spec, hidden_p=hidden_p)
    val_losses = {kind: [] for kind in _KINDS}
    for layer in range(spec.num_layers - 1):
        for kind in _KINDS:
            key = (layer, kind)
            if key not in calib.features or len(calib.features[key]) == 0:
                raise CalibrationError(f"no samples for layer {layer} kind {kind!r}")
            x = calib.features[key]
            y = calib.targets[key]
            n = len(x)
            perm = rng.permutation(n)
            n_val = max(1, n // 10) if n > 1 else 0
            val_idx, train_idx = perm[:n_val], perm[n_val:]
            if len(train_idx) == 0:
                train_idx = perm
            xt, yt = x[train_idx], y[train_idx]
            d = spec.hidden_dim
            count = spec.group_count(kind)
            params = PredictorParams(
                w1=rng.uniform(-1, 1, size=(d, hidden_p)) / np.sqrt(d),
                w2=rng.uniform(-1, 1, size=(hidden_p, count)) / np.sqrt(hidden_p))
            for _ in range(epochs):
                order = rng.permutation(len(xt))
                for start in range(0, len(xt), batch_size):
                    idx = order[start:start + batch_size]
                    _, (g1, gb1, g2, gb2) = loss_and_grads(params, xt[idx], yt[idx])
                    params.w1 -= learning_rate * g1
                    params.b1 -= learning_rate * gb1
                    params.w2 -= learning_rate * g2
                    params.b2 -= learning_rate * gb2
            pset.params[key] = params
            if n_val:
                val_losses[kind].append(mse(params, x[val_idx], y[val_idx]))
            else:
                val_losses[kind].append(mse(params, xt, yt))
    summary = {kind: float(np.mean(v)) for kind, v in val_losses.items()}
    return pset, summary


def predict_ranks(pset: PredictorSet, feature: np.ndarray, layer: int,
                  block: BlockKind) -> RankList:
    """Rank layer ``layer + 1``'s groups from the hidden state entering ``layer``.

    Stable argsort: descending score, ties by ascending group id. Scaling the
    score vector by any positive constant cannot change the result.
    """
    key = (layer, block)
    if key not in pset.params:
        raise PredictorMissingError(
            f"no predictor for feature layer {layer} (last layer has none)")
    scores = _forward_scores(pset.params[key], np.asarray(feature, dtype=np.float64))
    order = np.argsort(-scores, kind="stable")
    return RankList(order=order, block=block, layer=layer + 1)


def top_fraction_recall(predicted: RankList, oracle: RankList,
                        fraction: float = 0.25) -> float:
    """Overlap of the predicted and true top-k sets, k = fraction of groups."""
    count = len(oracle.order)
    k = max(1, int(round(fraction * count)))
    top_pred = set(predicted.order[:k].tolist())
    top_true = set(oracle.order[:k].tolist())
    return len(top_pred & top_true) / k


# ---------------------------------------------------------------------------
# Checkpoint format: magic "HALP", header, then per-(layer, kind) f32 matrices.
# ---------------------------------------------------------------------------

_CKPT_HEADER = struct.Struct("<4sIIIIII")


def save_predictors(pset: PredictorSet, path: str) -> None:
    spec = pset.spec
    with open(path, "wb") as fh:
        fh.write(_CKPT_HEADER.pack(CHECKPOINT_MAGIC, CHECKPOINT_VERSION,
                                   spec.num_layers, spec.hidden_dim, pset.hidden_p,
                                   spec.num_heads, spec.mlp_groups))
        for layer in range(spec.num_layers - 1):
            for kind in _KINDS:
                params = pset.params[(layer, kind)]
                for tensor in (params.w1, params.b1, params.w2, params.b2):
                    fh.write(tensor.astype(np.float32).tobytes())


def load_predictors(path: str, spec: ModelSpec) -> PredictorSet:
    with open(path, "rb") as fh:
        head = fh.read(_CKPT_HEADER.size)
        magic, version, nl, d, hidden_p, nh, ng = _CKPT_HEADER.unpack(head)
        if magic != CHECKPOINT_MAGIC:
            raise ValueError(f"bad predictor checkpoint magic {magic!r}")
        if version != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {version}")
        if (nl, d, nh, ng) != (spec.num_layers, spec.hidden_dim,
                               spec.num_heads, spec.mlp_groups):
            raise ValueError("checkpoint dimensions do not match the model spec")
        pset = PredictorSet(spec=spec, hidden_p=hidden_p)

        def block(*shape):
            size = int(np.prod(shape))
            return np.frombuffer(fh.read(4 * size),
                                 dtype=np.float32).reshape(*shape).astype(np.float64)

        for layer in range(nl - 1):
            for kind in _KINDS:
                count = spec.group_count(kind)
                pset.params[(layer, kind)] = PredictorParams(
                    w1=block(d, hidden_p), b1=block(hidden_p),
                    w2=block(hidden_p, count), b2=block(count))
    return pset
