"""Toy decoder-only transformer decomposed into additively mergeable neuron groups.

Every MHA head, MLP slice, and vocabulary slice is an independent "neuron
group": its contribution to the block output is a pure function of the block
input, and the block output is the elementwise sum of all group contributions
(concatenation for the vocabulary slices). That additivity is what makes
merge-what-arrived synchronization well defined: a missing group contributes
exactly zero.

All math runs in float64 on weights that are exactly representable in float32
(the on-disk dtype), so a store round-tripped through a weight file computes
bit-identical results.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from enum import IntEnum

import numpy as np

RMS_EPS = 1e-6
WEIGHT_DTYPE = np.float32

# Texture of the toy model. Real transformers have a residual stream that
# dominates per-block updates (features drift slowly across layers), sharply
# gated MLP activations, and heads/groups whose output magnitudes differ
# persistently. All three are required for group importance to be both skewed
# and predictable one layer ahead, so the toy bakes them in:
OUT_PROJ_DAMP = 0.3        # scales wo / w_down, keeps the residual stream dominant
GATE_SHARPNESS = 3.0       # pre-activation gain of the MLP gate
ATTN_SHARPNESS = 2.0       # query gain, sharpens attention distributions
GROUP_SPREAD_LOG = (np.log(0.5), np.log(2.0))  # per-head/group magnitude spread


class DimensionError(ValueError):
    """Model dimensions violate a divisibility or positivity constraint."""


class LoadMissError(KeyError):
    """A group was used for compute without being resident on the device."""


class MergeError(ValueError):
    """Partials passed to a merge are inconsistent or duplicated."""


class BlockKind(IntEnum):
    MHA = 0
    MLP = 1
    LM_HEAD = 2


@dataclass(frozen=True)
class ModelSpec:
    """Dimensions and seed of the toy transformer.

    ``mlp_groups * group_size`` is the MLP intermediate width and
    ``vocab_groups * group_size`` the vocabulary size.
    """

    num_layers: int
    hidden_dim: int
    num_heads: int
    num_kv_heads: int
    mlp_groups: int
    vocab_groups: int
    group_size: int = 256
    seed: int = 0

    def __post_init__(self):
        for name in ("num_layers", "hidden_dim", "num_heads", "num_kv_heads",
                     "mlp_groups", "vocab_groups", "group_size"):
            if getattr(self, name) <= 0:
                raise DimensionError(f"{name} must be positive, got {getattr(self, name)}")
        if self.hidden_dim % self.num_heads != 0:
            raise DimensionError(
                f"hidden_dim {self.hidden_dim} not divisible by num_heads {self.num_heads}")
        if self.num_heads % self.num_kv_heads != 0:
            raise DimensionError(
                f"num_heads {self.num_heads} not divisible by num_kv_heads {self.num_kv_heads}")

    @property
    def head_dim(self) -> int:
        return self.hidden_dim // self.num_heads

    @property
    def kv_dim(self) -> int:
        return self.num_kv_heads * self.head_dim

    @property
    def mlp_dim(self) -> int:
        return self.mlp_groups * self.group_size

    @property
    def vocab_size(self) -> int:
        return self.vocab_groups * self.group_size

    def group_count(self, kind: BlockKind) -> int:
        if kind == BlockKind.MHA:
            return self.num_heads
        if kind == BlockKind.MLP:
            return self.mlp_groups
        return self.vocab_groups

    def kv_head_of(self, head: int) -> int:
        return head // (self.num_heads // self.num_kv_heads)


@dataclass
class Activation:
    """A dense hidden state (length D) or logits vector tied to a position."""

    values: np.ndarray
    token_idx: int = 0
    layer: int = 0


@dataclass
class GroupActivation:
    """One group's additive contribution to a block output."""

    block: BlockKind
    layer: int
    group_id: int
    partial: np.ndarray
    origin_device: int = -1


@dataclass
class RankList:
    """Group ids ordered by descending importance for one (layer, block)."""

    order: np.ndarray
    block: BlockKind
    layer: int

    def __post_init__(self):
        self.order = np.asarray(self.order, dtype=np.int64)


@dataclass
class LayerWeights:
    wq: np.ndarray      # (D, D)
    wk: np.ndarray      # (D, kv_dim)
    wv: np.ndarray      # (D, kv_dim)
    wo: np.ndarray      # (D, D)
    w_up: np.ndarray    # (D, I)
    w_gate: np.ndarray  # (D, I)
    w_down: np.ndarray  # (I, D)


class WeightStore:
    """Dense weights of the toy model plus per-group slicing.

    Weights are generated in a fixed order from a single seeded generator, so
    equal specs produce bit-identical stores (and therefore bit-identical
    weight files). Read-only after construction; safe to share across workers.
    """

    def __init__(self, spec: ModelSpec, embedding: np.ndarray,
                 layers: list[LayerWeights], lm_head: np.ndarray):
        self.spec = spec
        self.embedding = embedding      # (V, D)
        self.layers = layers
        self.lm_head = lm_head          # (D, V)

    def mha_slices(self, layer: int, head: int):
        spec = self.spec
        if not 0 <= head < spec.num_heads:
            raise LoadMissError(f"MHA head {head} out of range")
        hd = spec.head_dim
        kv = spec.kv_head_of(head)
        lw = self.layers[layer]
        return (lw.wq[:, head * hd:(head + 1) * hd],
                lw.wk[:, kv * hd:(kv + 1) * hd],
                lw.wv[:, kv * hd:(kv + 1) * hd],
                lw.wo[head * hd:(head + 1) * hd, :])

    def mlp_slices(self, layer: int, group: int):
        spec = self.spec
        if not 0 <= group < spec.mlp_groups:
            raise LoadMissError(f"MLP group {group} out of range")
        gs = spec.group_size
        lw = self.layers[layer]
        sl = slice(group * gs, (group + 1) * gs)
        return lw.w_up[:, sl], lw.w_gate[:, sl], lw.w_down[sl, :]

    def lm_slice(self, group: int):
        spec = self.spec
        if not 0 <= group < spec.vocab_groups:
            raise LoadMissError(f"LM head group {group} out of range")
        gs = spec.group_size
        return self.lm_head[:, group * gs:(group + 1) * gs]

    def group_param_count(self, kind: BlockKind) -> int:
        spec = self.spec
        if kind == BlockKind.MHA:
            return 4 * spec.hidden_dim * spec.head_dim
        if kind == BlockKind.MLP:
            return 3 * spec.hidden_dim * spec.group_size
        return spec.hidden_dim * spec.group_size


def init_model(spec: ModelSpec) -> WeightStore:
    """Deterministic zero-mean weights with the toy's sparsity texture.

    Base matrices are uniform in +/- 1/sqrt(D); queries and the gate carry
    their sharpness gains, output projections are damped, and each head and
    MLP group gets a seeded log-uniform magnitude so some groups matter
    persistently more than others. Generation order is part of the format
    contract: embedding, then per layer wq, wk, wv, wo, w_up, w_gate, w_down,
    then the LM head. All scaling happens before the float32 quantization so
    the in-memory store matches a file round trip exactly.
    """
    scale = 1.0 / math.sqrt(spec.hidden_dim)
    rng = np.random.default_rng(spec.seed)

    def mat(rows: int, cols: int, gain: float = 1.0) -> np.ndarray:
        raw = rng.uniform(-scale, scale, size=(rows, cols)) * gain
        return raw.astype(WEIGHT_DTYPE).astype(np.float64)

    d, kvd, mi, v = spec.hidden_dim, spec.kv_dim, spec.mlp_dim, spec.vocab_size
    hd, gs = spec.head_dim, spec.group_size
    lo, hi = GROUP_SPREAD_LOG
    embedding = mat(v, d)
    layers = []
    for _ in range(spec.num_layers):
        wq = mat(d, d, gain=ATTN_SHARPNESS)
        wk = mat(d, kvd)
        wv = mat(d, kvd)
        raw_wo = rng.uniform(-scale, scale, size=(d, d)) * OUT_PROJ_DAMP
        head_gain = np.exp(rng.uniform(lo, hi, size=spec.num_heads))
        for h in range(spec.num_heads):
            raw_wo[h * hd:(h + 1) * hd, :] *= head_gain[h]
        wo = raw_wo.astype(WEIGHT_DTYPE).astype(np.float64)
        w_up = mat(d, mi)
        w_gate = mat(d, mi, gain=GATE_SHARPNESS)
        raw_wd = rng.uniform(-scale, scale, size=(mi, d)) * OUT_PROJ_DAMP
        group_gain = np.exp(rng.uniform(lo, hi, size=spec.mlp_groups))
        for g in range(spec.mlp_groups):
            raw_wd[g * gs:(g + 1) * gs, :] *= group_gain[g]
        w_down = raw_wd.astype(WEIGHT_DTYPE).astype(np.float64)
        layers.append(LayerWeights(wq=wq, wk=wk, wv=wv, wo=wo,
                                   w_up=w_up, w_gate=w_gate, w_down=w_down))
    lm_head = mat(d, v)
    return WeightStore(spec, embedding, layers, lm_head)


def rms_norm(x: np.ndarray) -> np.ndarray:
    ms = np.mean(np.square(x), axis=-1, keepdims=True)
    return x / np.sqrt(ms + RMS_EPS)


def silu(x: np.ndarray) -> np.ndarray:
    return x / (1.0 + np.exp(-x))


class KVCache:
    """Per-device cache of keys/values for every KV head of every layer.

    Sized for the full set of KV heads regardless of which query heads the
    device ends up computing, because runtime remapping can hand it any head.
    Single writer per token step; appends must be in token order.
    """

    def __init__(self, spec: ModelSpec, capacity: int):
        self.spec = spec
        self.capacity = capacity
        shape = (spec.num_layers, capacity, spec.num_kv_heads, spec.head_dim)
        self.k = np.zeros(shape)
        self.v = np.zeros(shape)
        self.lengths = [0] * spec.num_layers

    def append(self, layer: int, k_t: np.ndarray, v_t: np.ndarray):
        pos = self.lengths[layer]
        if pos >= self.capacity:
            raise IndexError(f"KV cache capacity {self.capacity} exceeded at layer {layer}")
        self.k[layer, pos] = k_t
        self.v[layer, pos] = v_t
        self.lengths[layer] = pos + 1

    def reserved_bytes(self) -> int:
        # Reported separately from weight memory: the reservation is made up
        # front for all KV heads even if the device never computes them.
        return 2 * self.k.nbytes


def kv_project(store: WeightStore, layer: int, x: np.ndarray):
    """Current token's keys and values for all KV heads, from the raw block input."""
    spec = store.spec
    xn = rms_norm(x)
    lw = store.layers[layer]
    k_t = (xn @ lw.wk).reshape(spec.num_kv_heads, spec.head_dim)
    v_t = (xn @ lw.wv).reshape(spec.num_kv_heads, spec.head_dim)
    return k_t, v_t


def _attend(q: np.ndarray, keys: np.ndarray, values: np.ndarray) -> np.ndarray:
    scores = keys @ q / math.sqrt(q.shape[-1])
    scores -= scores.max()
    w = np.exp(scores)
    w /= w.sum()
    return w @ values


def compute_group(store: WeightStore, layer: int, block: BlockKind, group_id: int,
                  inp: Activation, kv_cache: KVCache | None = None) -> GroupActivation:
    """One group's additive contribution to its block output.

    The input is the raw residual-stream value entering the block;
    normalization happens inside. For MHA the cache must hold exactly the
    prior tokens of this layer; the current token's key/value are computed
    from this group's own projection slices.
    """
    spec = store.spec
    x = np.asarray(inp.values, dtype=np.float64)
    xn = rms_norm(x)
    if block == BlockKind.MHA:
        if kv_cache is None:
            raise ValueError("MHA group compute requires a KV cache")
        t = inp.token_idx
        if kv_cache.lengths[layer] != t:
            raise ValueError(
                f"KV cache holds {kv_cache.lengths[layer]} tokens at layer {layer}, "
                f"expected {t} prior tokens")
        wq, wk, wv, wo = store.mha_slices(layer, group_id)
        kv = spec.kv_head_of(group_id)
        q = xn @ wq
        k_t = xn @ wk
        v_t = xn @ wv
        keys = np.concatenate([kv_cache.k[layer, :t, kv, :], k_t[None, :]], axis=0)
        values = np.concatenate([kv_cache.v[layer, :t, kv, :], v_t[None, :]], axis=0)
        partial = _attend(q, keys, values) @ wo
    elif block == BlockKind.MLP:
        w_up, w_gate, w_down = store.mlp_slices(layer, group_id)
        partial = (silu(xn @ w_gate) * (xn @ w_up)) @ w_down
    else:
        partial = xn @ store.lm_slice(group_id)
    return GroupActivation(block=block, layer=layer, group_id=group_id,
                           partial=partial)


def merge_partials(spec: ModelSpec, partials, block: BlockKind, layer: int) -> np.ndarray:
    """Elementwise sum of group contributions; absent groups contribute zero.

    This is the relaxed-synchronization semantics for MHA/MLP. LM-head chunks
    are disjoint vocabulary slices, so every one of them must be present.
    """
    seen: set[int] = set()
    items = list(partials)
    for p in items:
        if p.block != block or p.layer != layer:
            raise MergeError(f"partial tagged ({p.layer}, {p.block!r}) in merge "
                             f"for ({layer}, {block!r})")
        if p.group_id in seen:
            raise MergeError(f"duplicate group_id {p.group_id}")
        seen.add(p.group_id)
    if block == BlockKind.LM_HEAD:
        if len(seen) != spec.vocab_groups:
            missing = sorted(set(range(spec.vocab_groups)) - seen)
            raise MergeError(f"LM head requires all chunks; missing {missing}")
        out = np.empty(spec.vocab_size)
        gs = spec.group_size
        for p in items:
            out[p.group_id * gs:(p.group_id + 1) * gs] = p.partial
        return out
    out = np.zeros(spec.hidden_dim)
    for p in items:
        out += p.partial
    return out


def oracle_importance(store: WeightStore, layer: int, block: BlockKind,
                      inp: Activation, kv_cache: KVCache | None = None) -> RankList:
    """Exact importance: groups sorted by descending L2 norm of their contribution.

    Ties break by ascending group id, so the result is a deterministic
    permutation.
    """
    count = store.spec.group_count(block)
    norms = np.empty(count)
    for g in range(count):
        ga = compute_group(store, layer, block, g, inp, kv_cache)
        norms[g] = np.linalg.norm(ga.partial)
    order = np.argsort(-norms, kind="stable")
    return RankList(order=order, block=block, layer=layer)


# ---------------------------------------------------------------------------
# Whole-sequence forward (the dense oracle) and the activation-drop experiment.
# ---------------------------------------------------------------------------

@dataclass
class ForwardTrace:
    """Everything the dense oracle saw: per-layer inputs, block outputs, norms."""

    hiddens: np.ndarray                       # (L+1, T, D); hiddens[l] enters layer l
    mha_out: np.ndarray                       # (L, T, D) merged MHA block outputs
    mlp_out: np.ndarray                       # (L, T, D)
    group_norms: dict = field(default_factory=dict)  # (layer, kind) -> (T, N_k)
    logits: np.ndarray | None = None          # (T, V)


def _layer_partials(store: WeightStore, layer: int, h: np.ndarray, block: BlockKind):
    """Per-group contributions for a whole sequence at once: (T, N_k, D)."""
    spec = store.spec
    lw = store.layers[layer]
    xn = rms_norm(h)
    t_len = h.shape[0]
    if block == BlockKind.MHA:
        hd, nh, nkv = spec.head_dim, spec.num_heads, spec.num_kv_heads
        q = (xn @ lw.wq).reshape(t_len, nh, hd)
        k = (xn @ lw.wk).reshape(t_len, nkv, hd)
        v = (xn @ lw.wv).reshape(t_len, nkv, hd)
        kvmap = np.arange(nh) // (nh // nkv)
        kh = k[:, kvmap, :]
        vh = v[:, kvmap, :]
        scores = np.einsum("thd,shd->hts", q, kh) / math.sqrt(hd)
        mask = np.tril(np.ones((t_len, t_len), dtype=bool))
        scores = np.where(mask[None, :, :], scores, -np.inf)
        scores -= scores.max(axis=-1, keepdims=True)
        w = np.exp(scores)
        w /= w.sum(axis=-1, keepdims=True)
        ctx = np.einsum("hts,shd->thd", w, vh)
        wo_heads = lw.wo.reshape(nh, hd, spec.hidden_dim)
        return np.einsum("thd,hde->the", ctx, wo_heads)
    a = silu(xn @ lw.w_gate) * (xn @ lw.w_up)
    ng, gs = spec.mlp_groups, spec.group_size
    wd = lw.w_down.reshape(ng, gs, spec.hidden_dim)
    return np.einsum("tgs,gsd->tgd", a.reshape(t_len, ng, gs), wd)


def _forward(store: WeightStore, tokens, drop_fn=None) -> ForwardTrace:
    """Teacher-forced forward over the full sequence, layer by layer.

    ``drop_fn(layer, kind, norms) -> bool mask (T, N_k)`` marks contributions
    to discard before merging; ``None`` is the lossless path.
    """
    spec = store.spec
    tokens = np.asarray(tokens, dtype=np.int64)
    if tokens.ndim != 1 or len(tokens) == 0:
        raise ValueError("tokens must be a non-empty 1-D sequence")
    if tokens.min() < 0 or tokens.max() >= spec.vocab_size:
        raise ValueError(f"token out of range for vocab {spec.vocab_size}")
    t_len = len(tokens)
    hiddens = np.empty((spec.num_layers + 1, t_len, spec.hidden_dim))
    mha_out = np.empty((spec.num_layers, t_len, spec.hidden_dim))
    mlp_out = np.empty((spec.num_layers, t_len, spec.hidden_dim))
    norms_by_block: dict = {}
    h = store.embedding[tokens]
    hiddens[0] = h
    for layer in range(spec.num_layers):
        for kind, sink in ((BlockKind.MHA, mha_out), (BlockKind.MLP, mlp_out)):
            parts = _layer_partials(store, layer, h, kind)
            norms = np.linalg.norm(parts, axis=-1)
            norms_by_block[(layer, kind)] = norms
            if drop_fn is not None:
                dropped = drop_fn(layer, kind, norms)
                parts = np.where(dropped[:, :, None], 0.0, parts)
            merged = parts.sum(axis=1)
            sink[layer] = merged
            h = h + merged
        hiddens[layer + 1] = h
    logits = rms_norm(h) @ store.lm_head
    return ForwardTrace(hiddens=hiddens, mha_out=mha_out, mlp_out=mlp_out,
                        group_norms=norms_by_block, logits=logits)


def dense_forward(store: WeightStore, tokens) -> ForwardTrace:
    """Single-threaded reference forward; returns all intermediate hiddens."""
    return _forward(store, tokens)


DROP_STRATEGIES = ("random", "high_norm", "low_norm")


def drop_experiment(store: WeightStore, tokens, strategy: str, plr: float,
                    exposed_fraction: float, seed: int) -> float:
    """Mean L2 logit deviation when some group contributions are discarded.

    Per (position, block) the exposed subset of groups is picked by the
    strategy (highest activation norms, lowest, or uniform), then each exposed
    contribution is independently dropped with probability ``plr``. The LM
    head is never exposed: logits travel the reliable path.
    """
    if strategy not in DROP_STRATEGIES:
        raise ValueError(f"unknown strategy {strategy!r}")
    if not 0.0 <= plr <= 1.0:
        raise ValueError("plr must be in [0, 1]")
    if not 0.0 <= exposed_fraction <= 1.0:
        raise ValueError("exposed_fraction must be in [0, 1]")
    clean = dense_forward(store, tokens)
    rng = np.random.default_rng(seed)

    def drop_fn(layer, kind, norms):
        t_len, count = norms.shape
        n_exposed = int(round(exposed_fraction * count))
        dropped = np.zeros((t_len, count), dtype=bool)
        if n_exposed == 0 or plr == 0.0:
            return dropped
        for t in range(t_len):
            if strategy == "random":
                exposed = rng.choice(count, size=n_exposed, replace=False)
            elif strategy == "high_norm":
                exposed = np.argsort(-norms[t], kind="stable")[:n_exposed]
            else:
                exposed = np.argsort(norms[t], kind="stable")[:n_exposed]
            lost = exposed[rng.random(n_exposed) < plr]
            dropped[t, lost] = True
        return dropped

    lossy = _forward(store, tokens, drop_fn=drop_fn)
    return float(np.mean(np.linalg.norm(lossy.logits - clean.logits, axis=-1)))
