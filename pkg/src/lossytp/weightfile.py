"""HALO-M weight file: an indexed binary layout for per-group weight records.

Layout (little-endian):
  magic "HALM" | version u32 | L D N_h N_kv N_g N_v group_size (u32 each) |
  seed u64 | dtype u8 (0 = f32) | record_count u32 |
  index records (layer u32, kind u8, group u32, offset u64, length u64) |
  payload.

Offsets are absolute file offsets, so any single group record is one seek
away. Record byte ranges are non-overlapping and cover the payload exactly.
Per-record content:
  MHA head h : wq slice | wk slice of its KV head | wv slice | wo slice
  MLP group g: up slice | gate slice | down slice
  LM group g : column slice of the head projection
  kind 3     : the token embedding table (single record, master-resident)
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .model import (WEIGHT_DTYPE, BlockKind, LayerWeights, ModelSpec,
                    WeightStore)

MAGIC = b"HALM"
VERSION = 1
DTYPE_F32 = 0
KIND_EMBEDDING = 3

_HEADER = struct.Struct("<4sI7IQB I".replace(" ", ""))
_INDEX_RECORD = struct.Struct("<IBIQQ")


class WeightFileError(ValueError):
    pass


@dataclass(frozen=True)
class IndexEntry:
    layer: int
    kind: int
    group: int
    offset: int
    length: int


def _record_arrays(store: WeightStore, layer: int, kind: int, group: int):
    if kind == BlockKind.MHA:
        return store.mha_slices(layer, group)
    if kind == BlockKind.MLP:
        return store.mlp_slices(layer, group)
    if kind == BlockKind.LM_HEAD:
        return (store.lm_slice(group),)
    return (store.embedding,)


def _iter_records(spec: ModelSpec):
    yield (0, KIND_EMBEDDING, 0)
    for layer in range(spec.num_layers):
        for head in range(spec.num_heads):
            yield (layer, int(BlockKind.MHA), head)
        for g in range(spec.mlp_groups):
            yield (layer, int(BlockKind.MLP), g)
    for g in range(spec.vocab_groups):
        yield (0, int(BlockKind.LM_HEAD), g)


def write_store(store: WeightStore, path: str) -> None:
    spec = store.spec
    records = list(_iter_records(spec))
    payloads = []
    for layer, kind, group in records:
        arrays = _record_arrays(store, layer, kind, group)
        payloads.append(b"".join(np.ascontiguousarray(a, dtype=WEIGHT_DTYPE).tobytes()
                                 for a in arrays))
    header = _HEADER.pack(MAGIC, VERSION, spec.num_layers, spec.hidden_dim,
                          spec.num_heads, spec.num_kv_heads, spec.mlp_groups,
                          spec.vocab_groups, spec.group_size, spec.seed,
                          DTYPE_F32, len(records))
    offset = _HEADER.size + len(records) * _INDEX_RECORD.size
    index = b""
    for (layer, kind, group), payload in zip(records, payloads):
        index += _INDEX_RECORD.pack(layer, kind, group, offset, len(payload))
        offset += len(payload)
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(index)
        for payload in payloads:
            fh.write(payload)


class WeightFileReader:
    """Parses the header and index once; each group read is a single seek."""

    def __init__(self, path: str):
        self.path = path
        with open(path, "rb") as fh:
            head = fh.read(_HEADER.size)
            if len(head) < _HEADER.size:
                raise WeightFileError("truncated header")
            (magic, version, nl, d, nh, nkv, ng, nv, gs, seed, dtype,
             count) = _HEADER.unpack(head)
            if magic != MAGIC:
                raise WeightFileError(f"bad magic {magic!r}")
            if version != VERSION:
                raise WeightFileError(f"unsupported version {version}")
            if dtype != DTYPE_F32:
                raise WeightFileError(f"unsupported dtype code {dtype}")
            self.spec = ModelSpec(num_layers=nl, hidden_dim=d, num_heads=nh,
                                  num_kv_heads=nkv, mlp_groups=ng, vocab_groups=nv,
                                  group_size=gs, seed=seed)
            self.index: dict[tuple[int, int, int], IndexEntry] = {}
            for _ in range(count):
                layer, kind, group, offset, length = _INDEX_RECORD.unpack(
                    fh.read(_INDEX_RECORD.size))
                self.index[(layer, kind, group)] = IndexEntry(layer, kind, group,
                                                              offset, length)

    def read_record(self, layer: int, kind: int, group: int) -> bytes:
        try:
            entry = self.index[(layer, int(kind), group)]
        except KeyError:
            raise WeightFileError(f"no record for layer={layer} kind={kind} "
                                  f"group={group}") from None
        with open(self.path, "rb") as fh:
            fh.seek(entry.offset)
            data = fh.read(entry.length)
        if len(data) != entry.length:
            raise WeightFileError("short read")
        return data

    def read_group(self, layer: int, kind: BlockKind, group: int):
        """Decode one group's weight matrices from its record."""
        spec = self.spec
        raw = np.frombuffer(self.read_record(layer, int(kind), group),
                            dtype=WEIGHT_DTYPE).astype(np.float64)
        d, hd, gs = spec.hidden_dim, spec.head_dim, spec.group_size
        if kind == BlockKind.MHA:
            sizes = (d * hd, d * hd, d * hd, hd * d)
            shapes = ((d, hd), (d, hd), (d, hd), (hd, d))
        elif kind == BlockKind.MLP:
            sizes = (d * gs, d * gs, gs * d)
            shapes = ((d, gs), (d, gs), (gs, d))
        else:
            sizes = (d * gs,)
            shapes = ((d, gs),)
        if raw.size != sum(sizes):
            raise WeightFileError("record length does not match dimensions")
        out, pos = [], 0
        for size, shape in zip(sizes, shapes):
            out.append(raw[pos:pos + size].reshape(shape))
            pos += size
        return tuple(out)

    def read_embedding(self) -> np.ndarray:
        spec = self.spec
        raw = np.frombuffer(self.read_record(0, KIND_EMBEDDING, 0),
                            dtype=WEIGHT_DTYPE).astype(np.float64)
        return raw.reshape(spec.vocab_size, spec.hidden_dim)


def load_store(path: str) -> WeightStore:
    """Reassemble the dense weights from every indexed record."""
    reader = WeightFileReader(path)
    spec = reader.spec
    d, kvd, mi, v = spec.hidden_dim, spec.kv_dim, spec.mlp_dim, spec.vocab_size
    embedding = reader.read_embedding()
    layers = []
    for layer in range(spec.num_layers):
        lw = LayerWeights(wq=np.empty((d, d)), wk=np.empty((d, kvd)),
                          wv=np.empty((d, kvd)), wo=np.empty((d, d)),
                          w_up=np.empty((d, mi)), w_gate=np.empty((d, mi)),
                          w_down=np.empty((mi, d)))
        hd = spec.head_dim
        for head in range(spec.num_heads):
            wq, wk, wv, wo = reader.read_group(layer, BlockKind.MHA, head)
            lw.wq[:, head * hd:(head + 1) * hd] = wq
            kv = spec.kv_head_of(head)
            # KV slices are replicated across the query heads that share the
            # KV head; any copy reconstructs the same dense matrix.
            lw.wk[:, kv * hd:(kv + 1) * hd] = wk
            lw.wv[:, kv * hd:(kv + 1) * hd] = wv
            lw.wo[head * hd:(head + 1) * hd, :] = wo
        gs = spec.group_size
        for g in range(spec.mlp_groups):
            up, gate, down = reader.read_group(layer, BlockKind.MLP, g)
            lw.w_up[:, g * gs:(g + 1) * gs] = up
            lw.w_gate[:, g * gs:(g + 1) * gs] = gate
            lw.w_down[g * gs:(g + 1) * gs, :] = down
        layers.append(lw)
    lm_head = np.empty((d, v))
    gs = spec.group_size
    for g in range(spec.vocab_groups):
        (sl,) = reader.read_group(0, BlockKind.LM_HEAD, g)
        lm_head[:, g * gs:(g + 1) * gs] = sl
    store = WeightStore(spec, embedding, layers, lm_head)
    return store


def validate_coverage(path: str) -> None:
    """Assert records are non-overlapping and cover the payload exactly."""
    reader = WeightFileReader(path)
    entries = sorted(reader.index.values(), key=lambda e: e.offset)
    import os
    expected = _HEADER.size + len(entries) * _INDEX_RECORD.size
    for entry in entries:
        if entry.offset != expected:
            raise WeightFileError(
                f"gap or overlap before record at offset {entry.offset}")
        expected = entry.offset + entry.length
    if expected != os.path.getsize(path):
        raise WeightFileError("payload not fully covered by records")
