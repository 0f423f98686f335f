"""Workload ratios and neuron-group priority indices for heterogeneous devices.

Two stages. Load balancing first: either fill the fastest devices' memory
(computation-greedy) or binary-search the utilization threshold that
minimizes the straggler (min-max). Then the ratio vector is mapped onto
contiguous chunks of the priority-index list [1..N_k], most reliable device
first, so low packet-loss links carry the most important groups.

The exhaustive enumerator at the bottom exists only to check the others on
small instances; it is the exact solution of the latency objective.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .model import BlockKind, ModelSpec

MB = float(2 ** 20)
KINDS = (BlockKind.MHA, BlockKind.MLP, BlockKind.LM_HEAD)
ILP_KINDS = (BlockKind.MHA, BlockKind.MLP)  # the latency objective covers these


class InsufficientMemoryError(ValueError):
    """The devices' combined memory cannot hold the model."""


class InfeasibleAssignmentError(ValueError):
    """A workload matrix violates the partition or memory constraints."""


class InstanceTooLargeError(ValueError):
    """The exhaustive oracle only accepts desk-sized instances."""


@dataclass(frozen=True)
class DeviceProfile:
    """One participant: memory budget (MB), compute power, packet loss rate."""

    device_id: int
    memory_mb: float
    compute: float        # work units per second
    plr: float = 0.0

    def __post_init__(self):
        if self.memory_mb <= 0:
            raise ValueError(f"memory budget must be positive, got {self.memory_mb}")
        if self.compute <= 0:
            raise ValueError(f"compute power must be positive, got {self.compute}")
        if not 0.0 <= self.plr <= 1.0:
            raise ValueError(f"plr must be in [0, 1], got {self.plr}")


@dataclass(frozen=True)
class CostModel:
    """Per-group compute and memory costs plus the per-sync communication time.

    Work units are multiply-accumulates over one token; memory follows the
    stored parameter bytes, so both scale linearly with group size.
    """

    num_layers: int
    n_h: int
    n_g: int
    n_v: int
    tau_h: float   # work units per MHA head
    tau_g: float   # work units per MLP group
    tau_v: float   # work units per LM-head group
    mem_h: float   # MB per MHA head
    mem_g: float   # MB per MLP group
    mem_v: float   # MB per LM-head group
    t_c: float     # seconds per synchronization

    @classmethod
    def from_model_spec(cls, spec: ModelSpec, t_c: float | None = None,
                        bandwidth_bps: float = 1e9) -> "CostModel":
        d, hd, gs = spec.hidden_dim, spec.head_dim, spec.group_size
        if t_c is None:
            t_c = sync_time(d, bandwidth_bps)
        return cls(num_layers=spec.num_layers, n_h=spec.num_heads,
                   n_g=spec.mlp_groups, n_v=spec.vocab_groups,
                   tau_h=4.0 * d * hd, tau_g=3.0 * d * gs, tau_v=float(d * gs),
                   mem_h=4.0 * d * hd * 4 / MB, mem_g=3.0 * d * gs * 4 / MB,
                   mem_v=float(d * gs) * 4 / MB, t_c=t_c)

    @property
    def total_memory(self) -> float:
        """M_t: every distributable weight, LM head included."""
        return (self.num_layers * (self.n_h * self.mem_h + self.n_g * self.mem_g)
                + self.n_v * self.mem_v)

    def tau(self, kind: BlockKind) -> float:
        return {BlockKind.MHA: self.tau_h, BlockKind.MLP: self.tau_g,
                BlockKind.LM_HEAD: self.tau_v}[kind]

    def mem(self, kind: BlockKind) -> float:
        return {BlockKind.MHA: self.mem_h, BlockKind.MLP: self.mem_g,
                BlockKind.LM_HEAD: self.mem_v}[kind]

    def count(self, kind: BlockKind) -> int:
        return {BlockKind.MHA: self.n_h, BlockKind.MLP: self.n_g,
                BlockKind.LM_HEAD: self.n_v}[kind]


# Calibration constant for the reference link: D=4096 activations (16 KB of
# f32) over a 1 Gbps link cost 0.262 ms per synchronization, i.e. the up and
# down legs of one merge.
REFERENCE_SYNC_SECONDS = 0.262e-3


def sync_time(hidden_dim: int, bandwidth_bps: float) -> float:
    """Per-synchronization time: activation up plus merged result down."""
    activation_bits = hidden_dim * 4 * 8
    return 2.0 * activation_bits / bandwidth_bps


def check_ratios(r: np.ndarray) -> np.ndarray:
    r = np.asarray(r, dtype=np.float64)
    if np.any(r < -1e-12):
        raise ValueError("ratios must be non-negative")
    if abs(float(r.sum()) - 1.0) > 1e-9:
        raise ValueError(f"ratios must sum to 1, got {r.sum()!r}")
    return np.clip(r, 0.0, None)


@dataclass
class Schedule:
    """Per-device priority-index lists (1-based) per block kind, plus ratios.

    The index lists of each kind partition {1..N_k}; workload counts follow
    directly (every layer reuses the same per-kind split).
    """

    ratios: np.ndarray
    indices: dict = field(default_factory=dict)  # kind -> list (per device) of index lists

    def counts(self, kind: BlockKind) -> np.ndarray:
        return np.array([len(lst) for lst in self.indices[kind]], dtype=np.int64)

    def device_count(self) -> int:
        return len(self.ratios)

    def workload_matrix(self, cost: CostModel) -> np.ndarray:
        """W[l, i, k] counts for the latency objective's two block kinds."""
        n = self.device_count()
        w = np.zeros((cost.num_layers, n, len(ILP_KINDS)), dtype=np.int64)
        for k_idx, kind in enumerate(ILP_KINDS):
            w[:, :, k_idx] = self.counts(kind)[None, :]
        return w

    def memory_per_device(self, cost: CostModel) -> np.ndarray:
        per_layer = (self.counts(BlockKind.MHA) * cost.mem_h
                     + self.counts(BlockKind.MLP) * cost.mem_g)
        return cost.num_layers * per_layer + self.counts(BlockKind.LM_HEAD) * cost.mem_v

    def serialize(self) -> str:
        lines = ["schedule v1"]
        for i in range(self.device_count()):
            parts = [f"device {i}", f"ratio {self.ratios[i]:.9f}"]
            for kind in KINDS:
                idx = " ".join(str(p) for p in self.indices[kind][i])
                parts.append(f"{kind.name.lower()} [{idx}]")
            lines.append(" | ".join(parts))
        return "\n".join(lines) + "\n"

    @classmethod
    def parse(cls, text: str) -> "Schedule":
        lines = [ln for ln in text.strip().splitlines() if ln.strip()]
        if not lines or lines[0].strip() != "schedule v1":
            raise ValueError("not a schedule document")
        ratios, indices = [], {kind: [] for kind in KINDS}
        for line in lines[1:]:
            fields = [f.strip() for f in line.split("|")]
            ratios.append(float(fields[1].split()[1]))
            for kind, fld in zip(KINDS, fields[2:]):
                body = fld[fld.index("[") + 1:fld.index("]")].split()
                indices[kind].append([int(tok) for tok in body])
        return cls(ratios=np.array(ratios), indices=indices)


def estimate_latency(w: np.ndarray, profiles: list[DeviceProfile],
                     cost: CostModel) -> float:
    """Latency objective: per-layer straggler compute plus synchronization.

    ``w`` is the (L, n, 2) workload matrix over MHA heads and MLP groups.
    Devices with zero total workload do not take part in synchronization, so
    they drop out of the communication term.
    """
    w = np.asarray(w)
    n = len(profiles)
    if w.shape != (cost.num_layers, n, 2):
        raise InfeasibleAssignmentError(f"workload matrix shape {w.shape} invalid")
    if np.any(w < 0):
        raise InfeasibleAssignmentError("negative workload count")
    for k_idx, kind in enumerate(ILP_KINDS):
        sums = w[:, :, k_idx].sum(axis=1)
        if np.any(sums != cost.count(kind)):
            raise InfeasibleAssignmentError(
                f"{kind.name} counts do not partition all groups: {sums}")
    mem = (w[:, :, 0].sum(axis=0) * cost.mem_h + w[:, :, 1].sum(axis=0) * cost.mem_g)
    for i, prof in enumerate(profiles):
        if mem[i] > prof.memory_mb + 1e-9:
            raise InfeasibleAssignmentError(
                f"device {prof.device_id} needs {mem[i]:.3f} MB > {prof.memory_mb} MB")
    c = np.array([p.compute for p in profiles])
    taus = np.array([cost.tau_h, cost.tau_g])
    compute = float((w * taus[None, None, :] / c[None, :, None]).max(axis=1).sum())
    active = int(np.count_nonzero(w.sum(axis=(0, 2))))
    comm = 2 * cost.num_layers * max(0, active - 1) * cost.t_c
    return compute + comm


def comp_greedy(profiles: list[DeviceProfile], total_memory: float) -> np.ndarray:
    """Fill the fastest devices' memory first; use as few devices as possible."""
    m = np.array([p.memory_mb for p in profiles], dtype=np.float64)
    if m.sum() < total_memory:
        raise InsufficientMemoryError(
            f"total memory {m.sum():.3f} MB < model demand {total_memory:.3f} MB")
    order = sorted(range(len(profiles)), key=lambda i: (-profiles[i].compute, i))
    u = np.zeros(len(profiles))
    remaining = total_memory
    for i in order:
        if remaining <= 0:
            break
        u[i] = min(m[i], remaining)
        remaining -= u[i]
    return u / u.sum()


def min_max(profiles: list[DeviceProfile], total_memory: float,
            epsilon: float = 1e-3) -> np.ndarray:
    """Minimize the maximum per-device utilization via threshold search.

    Feasibility of a threshold T means sum(min(m_i, T * c_i)) covers the
    model; the search tightens until the bracket is narrower than epsilon and
    allocates u_i = min(m_i, T * c_i).
    """
    m = np.array([p.memory_mb for p in profiles], dtype=np.float64)
    c = np.array([p.compute for p in profiles], dtype=np.float64)
    if m.sum() < total_memory:
        raise InsufficientMemoryError(
            f"total memory {m.sum():.3f} MB < model demand {total_memory:.3f} MB")
    left, right = 0.0, float(m.max() / c.min())
    t_opt = right
    while right - left > epsilon:
        mid = (left + right) / 2.0
        if np.minimum(m, mid * c).sum() >= total_memory:
            t_opt = mid
            right = mid
        else:
            left = mid
    u = np.minimum(m, t_opt * c)
    return u / u.sum()


def ratios_to_counts(ratios: np.ndarray, n_k: int) -> np.ndarray:
    """Largest-remainder apportionment of n_k groups; ties favor low index."""
    r = check_ratios(ratios)
    quotas = r * n_k
    counts = np.floor(quotas).astype(np.int64)
    short = n_k - int(counts.sum())
    if short > 0:
        remainders = quotas - counts
        order = sorted(range(len(r)), key=lambda i: (-remainders[i], i))
        for i in order[:short]:
            counts[i] += 1
    return counts


def plr_map(spec_or_cost, n: int, ratios: np.ndarray, plrs,
            profiles: list[DeviceProfile] | None = None,
            cost: CostModel | None = None,
            conversion: str = "balanced") -> Schedule:
    """Map ratios to contiguous priority-index chunks, most reliable first.

    Devices sort ascending by packet loss rate (stable by id); the k-th chunk
    of [1..N_k] goes to the k-th most reliable participant, so losing a
    high-loss device's packets costs only low-priority groups.

    With only the ratios, chunk sizes come from plain largest-remainder
    rounding (the pure mapping; an over-budget result surfaces downstream as
    OOM). When ``profiles`` and ``cost`` are given, ``conversion`` picks how
    chunk sizes honor the budgets: ``"balanced"`` uses the memory-capped
    integer balance in :func:`balanced_counts`; ``"remainder"`` keeps the
    ratio-driven largest-remainder rounding and only shifts single groups off
    over-budget devices (for baselines whose ratios are the whole policy).
    """
    ratios = check_ratios(ratios)
    plrs = np.asarray(plrs, dtype=np.float64)
    if len(ratios) != n or len(plrs) != n:
        raise ValueError(f"expected {n} ratios and plrs, got {len(ratios)}/{len(plrs)}")
    if isinstance(spec_or_cost, ModelSpec):
        counts_by_kind = {kind: spec_or_cost.group_count(kind) for kind in KINDS}
    else:
        counts_by_kind = {kind: spec_or_cost.count(kind) for kind in KINDS}
    order = sorted(range(n), key=lambda i: (plrs[i], i))
    r_sorted = ratios[np.array(order)]
    if profiles is not None and cost is not None and conversion == "balanced":
        per_device_counts = balanced_counts(ratios, profiles, cost)
        chunks = {kind: per_device_counts[kind][np.array(order)]
                  for kind in counts_by_kind}
    else:
        chunks = {kind: ratios_to_counts(r_sorted, n_k)
                  for kind, n_k in counts_by_kind.items()}
        if profiles is not None and cost is not None:
            caps_sorted = np.array([profiles[i].memory_mb for i in order])
            _repair_chunk_overflow(chunks, caps_sorted, cost)
    schedule = Schedule(ratios=ratios, indices={})
    for kind, n_k in counts_by_kind.items():
        per_device: list[list[int]] = [[] for _ in range(n)]
        next_index = 1
        for rank_pos, device in enumerate(order):
            size = int(chunks[kind][rank_pos])
            per_device[device] = list(range(next_index, next_index + size))
            next_index += size
        schedule.indices[kind] = per_device
    return schedule


def _layer_factor(cost: CostModel, kind: BlockKind) -> int:
    return 1 if kind == BlockKind.LM_HEAD else cost.num_layers


def _repair_chunk_overflow(chunks: dict, caps: np.ndarray, cost: CostModel) -> None:
    """Shift single groups off over-budget positions to the roomiest ones."""
    n = len(caps)

    def need(pos: int) -> float:
        return sum(_layer_factor(cost, kind) * cost.mem(kind) * int(chunks[kind][pos])
                   for kind in chunks)

    total_groups = sum(int(chunks[kind].sum()) for kind in chunks)
    for _ in range(total_groups + 1):
        needs = np.array([need(i) for i in range(n)])
        over = needs - caps
        if np.all(over <= 1e-9):
            return
        donor = int(np.argmax(over))
        moved = False
        for kind in sorted(chunks, key=lambda k: -_layer_factor(cost, k) * cost.mem(k)):
            if chunks[kind][donor] <= 0:
                continue
            quantum = _layer_factor(cost, kind) * cost.mem(kind)
            slack = caps - needs
            slack[donor] = -np.inf
            receiver = int(np.argmax(slack))
            if slack[receiver] >= quantum - 1e-9:
                chunks[kind][donor] -= 1
                chunks[kind][receiver] += 1
                moved = True
                break
        if not moved:
            raise InsufficientMemoryError(
                "cannot shift rounding overshoot within memory budgets")
    raise InsufficientMemoryError("chunk repair did not converge")


def balanced_counts(ratios: np.ndarray, profiles: list[DeviceProfile],
                    cost: CostModel) -> dict:
    """Integer group counts per kind that minimize the per-slot straggler.

    The ratios fix each device's memory allowance (its share of the used
    memory); within those allowances groups are handed out one at a time to
    the device whose resulting count/compute is smallest, which is the exact
    integer balance for identical items. Devices with ratio zero stay empty,
    preserving the participant-eviction behavior of the greedy scheduler.
    """
    ratios = check_ratios(ratios)
    n = len(profiles)
    c = np.array([p.compute for p in profiles])
    caps = np.array([p.memory_mb for p in profiles])
    allowance = ratios * float(np.dot(ratios > 0, caps).clip(min=cost.total_memory))
    allowance = np.minimum(allowance + 1e-9, caps)

    def place(memory_first: bool) -> dict:
        used = np.zeros(n)
        counts = {kind: np.zeros(n, dtype=np.int64) for kind in KINDS}
        # Hand out the memory-heaviest kinds first so fragmentation cannot
        # strand a large quantum behind many small ones.
        for kind in sorted(KINDS, key=lambda k: -_layer_factor(cost, k) * cost.mem(k)):
            quantum_mem = _layer_factor(cost, kind) * cost.mem(kind)
            tau = cost.tau(kind)
            for _ in range(cost.count(kind)):
                best, best_key = -1, None
                for i in range(n):
                    if ratios[i] <= 0:
                        continue
                    if used[i] + quantum_mem > caps[i] + 1e-9:
                        continue
                    over_allowance = used[i] + quantum_mem > allowance[i]
                    if memory_first:
                        key = (used[i] + quantum_mem - caps[i],
                               (counts[kind][i] + 1) * tau / c[i], i)
                    else:
                        key = ((counts[kind][i] + 1) * tau / c[i], over_allowance, i)
                    if best_key is None or key < best_key:
                        best, best_key = i, key
                if best < 0:
                    raise InsufficientMemoryError(
                        f"cannot place a {kind.name} group within memory budgets")
                counts[kind][best] += 1
                used[best] += quantum_mem
        return counts

    def exact_then_lm():
        counts = _exact_hg_counts(ratios, profiles, cost)
        if counts is None:
            return None
        _place_lm_head(counts, ratios, profiles, cost)
        return counts

    def lm_then_exact():
        # Under near-exact memory fits, reserving the vocabulary chunks first
        # keeps the head/group search from walling off the last kilobytes.
        lm_counts = {kind: np.zeros(n, dtype=np.int64) for kind in KINDS}
        _place_lm_head(lm_counts, ratios, profiles, cost)
        lm_mem = lm_counts[BlockKind.LM_HEAD] * cost.mem_v
        reduced = [DeviceProfile(p.device_id, max(p.memory_mb - lm_mem[i], 1e-12),
                                 p.compute, p.plr) for i, p in enumerate(profiles)]
        counts = _exact_hg_counts(ratios, reduced, cost)
        if counts is not None:
            counts[BlockKind.LM_HEAD] = lm_counts[BlockKind.LM_HEAD]
        return counts

    candidates = []
    for attempt in (exact_then_lm, lm_then_exact):
        try:
            counts = attempt()
        except InsufficientMemoryError:
            counts = None
        if counts is not None:
            candidates.append(counts)
    if not candidates:
        try:
            candidates.append(place(memory_first=False))
        except InsufficientMemoryError:
            # Tight budgets: redo the packing worst-fit (most free space
            # first), which trades some balance for guaranteed room.
            candidates.append(place(memory_first=True))
    c_vec = np.array([p.compute for p in profiles])
    counts = min(candidates, key=lambda cc: _counts_objective(cc, c_vec, cost))
    _refine_counts(counts, profiles, cost, participating=ratios > 0)
    return counts


def _composition_count(total: int, parts: int) -> int:
    return math.comb(total + parts - 1, parts - 1)


def _exact_hg_counts(ratios, profiles, cost: CostModel, limit: int = 300_000):
    """Exact layer-constant split of heads and MLP groups for small instances.

    Enumerates both kinds' compositions over the participating devices in
    ascending slot-cost order with mutual pruning; returns None when the
    search space exceeds the limit (the greedy path takes over).
    """
    active = [i for i in range(len(profiles)) if ratios[i] > 0]
    k = len(active)
    if k == 0:
        raise InsufficientMemoryError("no participating devices")
    if _composition_count(cost.n_h, k) * _composition_count(cost.n_g, k) > limit:
        return None
    c = np.array([profiles[i].compute for i in active])
    caps = np.array([profiles[i].memory_mb for i in active])
    lf = cost.num_layers

    def options(n_k: int, tau: float):
        opts = [(lf * max(w * tau / ci for w, ci in zip(comp, c)), comp)
                for comp in _compositions(n_k, k)]
        opts.sort(key=lambda o: o[0])
        return opts

    hs = options(cost.n_h, cost.tau_h)
    gs = options(cost.n_g, cost.tau_g)
    best, best_pair = np.inf, None
    for cost_h, ch in hs:
        if cost_h + gs[0][0] >= best:
            break
        mem_h = lf * cost.mem_h * np.array(ch)
        for cost_g, cg in gs:
            if cost_h + cost_g >= best:
                break
            mem = mem_h + lf * cost.mem_g * np.array(cg)
            if np.any(mem > caps + 1e-9):
                continue
            activity = int(np.count_nonzero(np.array(ch) + np.array(cg)))
            total = cost_h + cost_g + 2 * lf * max(0, activity - 1) * cost.t_c
            if total < best:
                best, best_pair = total, (ch, cg)
    if best_pair is None:
        raise InsufficientMemoryError("no feasible head/group split exists")
    counts = {kind: np.zeros(len(profiles), dtype=np.int64) for kind in KINDS}
    for pos, dev in enumerate(active):
        counts[BlockKind.MHA][dev] = best_pair[0][pos]
        counts[BlockKind.MLP][dev] = best_pair[1][pos]
    return counts


def _place_lm_head(counts: dict, ratios, profiles, cost: CostModel) -> None:
    """Best-effort time-balanced placement of vocabulary chunks."""
    n = len(profiles)
    caps = np.array([p.memory_mb for p in profiles])
    c = np.array([p.compute for p in profiles])
    used = np.array([sum(_layer_factor(cost, kind) * cost.mem(kind) * int(counts[kind][i])
                         for kind in ILP_KINDS) for i in range(n)])
    for _ in range(cost.n_v):
        best, best_key = -1, None
        for i in range(n):
            if ratios[i] <= 0 or used[i] + cost.mem_v > caps[i] + 1e-9:
                continue
            key = ((counts[BlockKind.LM_HEAD][i] + 1) * cost.tau_v / c[i], i)
            if best_key is None or key < best_key:
                best, best_key = i, key
        if best < 0:
            raise InsufficientMemoryError("cannot place an LM-head chunk")
        counts[BlockKind.LM_HEAD][best] += 1
        used[best] += cost.mem_v


def _counts_objective(counts: dict, c: np.ndarray, cost: CostModel) -> float:
    total = 0.0
    for kind in ILP_KINDS:
        total += cost.num_layers * float(np.max(counts[kind] * cost.tau(kind) / c))
    active = int(np.count_nonzero(sum(counts[kind] for kind in KINDS)))
    return total + 2 * cost.num_layers * max(0, active - 1) * cost.t_c


def _refine_counts(counts: dict, profiles: list[DeviceProfile],
                   cost: CostModel, participating: np.ndarray,
                   max_moves: int = 500) -> None:
    """Hill-climb on the latency objective with single-group moves and swaps.

    The sequential packing above fixes each kind's split in isolation, which
    can lock in a poor kind mix on a memory-bound device; trading an MHA head
    against MLP groups across devices undoes that. Evicted (zero-ratio)
    devices never receive work. First improving move wins, scanned in a fixed
    order, so the result is deterministic.
    """
    n = len(profiles)
    c = np.array([p.compute for p in profiles])
    caps = np.array([p.memory_mb for p in profiles])

    def used(i: int) -> float:
        return sum(_layer_factor(cost, kind) * cost.mem(kind) * int(counts[kind][i])
                   for kind in KINDS)

    current = _counts_objective(counts, c, cost)
    for _ in range(max_moves):
        improved = False
        moves = []
        for kind in ILP_KINDS:
            for i in range(n):
                for j in range(n):
                    if i != j:
                        moves.append((kind, None, i, j))
        for k1 in ILP_KINDS:
            for k2 in ILP_KINDS:
                for i in range(n):
                    for j in range(n):
                        if i != j:
                            moves.append((k1, k2, i, j))
        for k1, k2, i, j in moves:
            if not participating[j]:
                continue
            if counts[k1][i] <= 0 or (k2 is not None and counts[k2][j] <= 0):
                continue
            counts[k1][i] -= 1
            counts[k1][j] += 1
            if k2 is not None:
                counts[k2][j] -= 1
                counts[k2][i] += 1
            feasible = used(i) <= caps[i] + 1e-9 and used(j) <= caps[j] + 1e-9
            candidate = _counts_objective(counts, c, cost) if feasible else np.inf
            if candidate < current - 1e-12:
                current = candidate
                improved = True
                break
            counts[k1][i] += 1
            counts[k1][j] -= 1
            if k2 is not None:
                counts[k2][j] += 1
                counts[k2][i] -= 1
        if not improved:
            return


def _compositions(total: int, parts: int):
    """All ways to split `total` identical items over `parts` ordered slots."""
    if parts == 1:
        yield (total,)
        return
    for first in range(total + 1):
        for rest in _compositions(total - first, parts - 1):
            yield (first,) + rest


def brute_force_ilp(profiles: list[DeviceProfile], cost: CostModel):
    """Exact minimizer of the latency objective by exhaustive enumeration.

    Test oracle only. Searches every active-device subset (the communication
    term depends on how many devices take part) and, within a subset, branch
    and bound over per-(layer, kind) compositions ordered by slot cost.
    """
    n = len(profiles)
    if n > 4 or cost.n_h > 8 or cost.n_g > 8 or cost.num_layers > 2:
        raise InstanceTooLargeError(
            "exhaustive oracle limited to n<=4, N_h,N_g<=8, L<=2")
    c = np.array([p.compute for p in profiles])
    m = np.array([p.memory_mb for p in profiles])
    # Slots grouped by kind so layer symmetry can be broken: layers are
    # interchangeable in both the objective and the memory constraint, so
    # within a kind the option indices may be forced non-decreasing.
    slots = [(kind, layer) for kind in ILP_KINDS for layer in range(cost.num_layers)]
    best_latency = np.inf
    best_w = None
    # Seed the incumbent with the min-max heuristic so the bound bites early.
    try:
        heur = balanced_counts(min_max(profiles, cost.total_memory), profiles, cost)
        w_h = np.zeros((cost.num_layers, n, 2), dtype=np.int64)
        for k_idx, kind in enumerate(ILP_KINDS):
            w_h[:, :, k_idx] = heur[kind][None, :]
        best_latency = estimate_latency(w_h, profiles, cost)
        best_w = w_h
    except (InsufficientMemoryError, InfeasibleAssignmentError):
        pass
    for subset_bits in range(1, 2 ** n):
        active = [i for i in range(n) if subset_bits & (1 << i)]
        comm = 2 * cost.num_layers * (len(active) - 1) * cost.t_c
        if comm >= best_latency:
            continue
        options_by_kind = {}
        feasible = True
        for kind in ILP_KINDS:
            n_k = cost.count(kind)
            tau = cost.tau(kind)
            opts = []
            for comp in _compositions(n_k, len(active)):
                slot_cost = max(tau * w / c[i] for w, i in zip(comp, active))
                mem_vec = np.array(comp, dtype=np.float64) * cost.mem(kind)
                opts.append((slot_cost, comp, mem_vec))
            opts.sort(key=lambda o: o[0])
            if not opts:
                feasible = False
                break
            options_by_kind[kind] = opts
        if not feasible:
            continue
        min_slot_cost = {kind: options_by_kind[kind][0][0] for kind in ILP_KINDS}
        suffix_bound = [0.0] * (len(slots) + 1)
        for idx in range(len(slots) - 1, -1, -1):
            suffix_bound[idx] = suffix_bound[idx + 1] + min_slot_cost[slots[idx][0]]
        mem_cap = m[active]
        chosen: list[tuple] = []

        def dfs(slot_idx: int, acc_cost: float, acc_mem: np.ndarray, min_opt: int):
            nonlocal best_latency, best_w
            if acc_cost + suffix_bound[slot_idx] + comm >= best_latency:
                return
            if slot_idx == len(slots):
                w = np.zeros((cost.num_layers, n, 2), dtype=np.int64)
                for (kind, layer), comp in zip(slots, chosen):
                    k_idx = ILP_KINDS.index(kind)
                    for pos, dev in enumerate(active):
                        w[layer, dev, k_idx] = comp[pos]
                best_latency = acc_cost + comm
                best_w = w
                return
            kind, layer = slots[slot_idx]
            opts = options_by_kind[kind]
            start = min_opt if layer > 0 else 0
            for opt_idx in range(start, len(opts)):
                slot_cost, comp, mem_vec = opts[opt_idx]
                if acc_cost + slot_cost + suffix_bound[slot_idx + 1] + comm >= best_latency:
                    break  # options are cost-sorted
                new_mem = acc_mem + mem_vec
                if np.any(new_mem > mem_cap + 1e-9):
                    continue
                chosen.append(comp)
                dfs(slot_idx + 1, acc_cost + slot_cost, new_mem, opt_idx)
                chosen.pop()

        dfs(0, 0.0, np.zeros(len(active)), 0)
    if best_w is None:
        raise InsufficientMemoryError("no feasible assignment exists")
    return best_w, float(best_latency)
