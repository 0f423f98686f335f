"""Distributed auto-regressive generation with relaxed synchronization.

Device 0 is the master: it embeds the token, merges partial activations from
every participant, decodes, and broadcasts merged hidden states. Layer 0 and
the LM head travel the reliable channel; every other block uses per-group
datagrams gathered under a timeout, with missing groups contributing zero.

Timing is a per-device wall-clock chain: compute advances a device's local
time, the network simulator supplies arrival times, and the loading of the
next layer's groups plus the next layer's rank prediction either hide under
compute/communication (overlap on) or stall the device (overlap off).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .model import (Activation, BlockKind, GroupActivation, KVCache, LoadMissError,
                    ModelSpec, RankList, WeightStore, dense_forward, kv_project,
                    merge_partials, rms_norm)
from .sap import PredictorSet, predict_ranks
from .scheduler import CostModel, DeviceProfile, Schedule
from .transport import (ChannelConfig, Network, SimClock, TimeoutPolicy,
                        fragment_partial, gather_with_timeout)

SYNC_MODES = ("relaxed", "reliable")
MAPPINGS = ("halo", "random")


class OutOfMemoryError(RuntimeError):
    """A device's schedule share does not fit its memory budget."""


class InfeasibleScheduleError(ValueError):
    pass


@dataclass
class RuntimeConfig:
    sync_mode: str = "relaxed"
    mapping: str = "halo"
    overlap_load_comp: bool = True
    overlap_pred_comm: bool = True
    policy: TimeoutPolicy = field(default_factory=TimeoutPolicy)
    io_bytes_per_sec: float = 50e6
    predict_seconds: float = 0.0002
    compute_lanes: int = 3   # worker threads for Comp/Pred
    io_lanes: int = 1        # worker threads for Load/Comm
    downlink_plr: float = 0.0
    request_id: int = 0

    def __post_init__(self):
        if self.sync_mode not in SYNC_MODES:
            raise ValueError(f"sync_mode must be one of {SYNC_MODES}")
        if self.mapping not in MAPPINGS:
            raise ValueError(f"mapping must be one of {MAPPINGS}")


def resolve_assignment(priority_indices: list[int], rank_list: RankList) -> list[int]:
    """Concrete group ids for one device: rank positions named by its indices.

    Priority index p (1-based) picks the p-th most important group according
    to the rank list, so the same static indices follow importance around as
    predictions change.
    """
    order = rank_list.order
    count = len(order)
    out = []
    for p in priority_indices:
        if not 1 <= p <= count:
            raise ValueError(f"priority index {p} out of range 1..{count}")
        out.append(int(order[p - 1]))
    return out


def identity_rank(spec: ModelSpec, kind: BlockKind, layer: int) -> RankList:
    return RankList(order=np.arange(spec.group_count(kind)), block=kind, layer=layer)


@dataclass
class StageDurations:
    """One layer's stage costs: compute/communicate now, load/predict ahead."""

    comp: float
    load: float
    pred: float
    comm: float


@dataclass
class PipelineTimeline:
    phases: list[tuple[float, float]]
    total: float


def pipeline_schedule(stages: list[StageDurations], overlap_load_comp: bool,
                      overlap_pred_comm: bool) -> PipelineTimeline:
    """Wall time of the two-phase per-layer pipeline under the overlap flags.

    Per layer: loading the next layer's groups runs concurrently with this
    layer's compute (different lanes), and predicting the next layer's ranks
    runs concurrently with this layer's communication; a disabled overlap
    serializes that pair instead.
    """
    phases = []
    total = 0.0
    for st in stages:
        phase_a = max(st.comp, st.load) if overlap_load_comp else st.comp + st.load
        phase_b = max(st.comm, st.pred) if overlap_pred_comm else st.comm + st.pred
        phases.append((phase_a, phase_b))
        total += phase_a + phase_b
    return PipelineTimeline(phases=phases, total=total)


class DeviceRuntime:
    """Per-device simulated state: residency, KV cache, local timeline."""

    def __init__(self, profile: DeviceProfile, spec: ModelSpec, cost: CostModel,
                 indices: dict, config: RuntimeConfig, capacity: int):
        self.profile = profile
        self.spec = spec
        self.cost = cost
        self.indices = indices          # kind -> 1-based priority index list
        self.config = config
        self.kv_cache = KVCache(spec, capacity)
        self.resident: dict = {}        # (layer, kind) -> set of group ids
        self.resident_bytes = 0
        self.time = 0.0
        self.tau_kv = 2.0 * spec.hidden_dim * spec.kv_dim

    def group_bytes(self, kind: BlockKind) -> int:
        if kind == BlockKind.MHA:
            return 4 * self.spec.hidden_dim * self.spec.head_dim * 4
        if kind == BlockKind.MLP:
            return 3 * self.spec.hidden_dim * self.spec.group_size * 4
        return self.spec.hidden_dim * self.spec.group_size * 4

    @property
    def memory_budget_bytes(self) -> float:
        return self.profile.memory_mb * 2 ** 20

    def schedule_bytes(self) -> float:
        per_layer = (len(self.indices[BlockKind.MHA]) * self.group_bytes(BlockKind.MHA)
                     + len(self.indices[BlockKind.MLP]) * self.group_bytes(BlockKind.MLP))
        return (self.spec.num_layers * per_layer
                + len(self.indices[BlockKind.LM_HEAD]) * self.group_bytes(BlockKind.LM_HEAD))

    def kv_reserved_bytes(self) -> int:
        return self.kv_cache.reserved_bytes()

    def load_groups(self, layer: int, kind: BlockKind, group_ids: list[int]) -> float:
        """Make the listed groups resident; returns simulated load seconds.

        Already-resident groups cost nothing. If the budget would overflow,
        non-assigned groups of the same (layer, kind) are evicted first;
        overflowing even then is an error.
        """
        count = self.spec.group_count(kind)
        for g in group_ids:
            if not 0 <= g < count:
                raise LoadMissError(f"group {g} out of range for {kind.name}")
        key = (layer, kind)
        resident = self.resident.setdefault(key, set())
        new = [g for g in group_ids if g not in resident]
        if not new:
            return 0.0
        gbytes = self.group_bytes(kind)
        needed = len(new) * gbytes
        if self.resident_bytes + needed > self.memory_budget_bytes:
            evictable = resident - set(group_ids)
            while evictable and self.resident_bytes + needed > self.memory_budget_bytes:
                resident.discard(evictable.pop())
                self.resident_bytes -= gbytes
        if self.resident_bytes + needed > self.memory_budget_bytes:
            raise OutOfMemoryError(
                f"device {self.profile.device_id}: loading {len(new)} "
                f"{kind.name} groups exceeds {self.profile.memory_mb} MB")
        resident.update(new)
        self.resident_bytes += needed
        return needed / self.config.io_bytes_per_sec

    def require_resident(self, layer: int, kind: BlockKind, group_ids) -> None:
        resident = self.resident.get((layer, kind), set())
        missing = [g for g in group_ids if g not in resident]
        if missing:
            raise LoadMissError(
                f"device {self.profile.device_id} computing non-resident "
                f"{kind.name} groups {missing} at layer {layer}")

    def compute_seconds(self, kind: BlockKind, count: int, with_kv: bool = False) -> float:
        work = self.cost.tau(kind) * count
        if with_kv:
            work += self.tau_kv
        return work / self.profile.compute


def compute_partials_batch(store: WeightStore, layer: int, kind: BlockKind,
                           group_ids: list[int], x: np.ndarray, kv_cache: KVCache,
                           token_idx: int, origin: int) -> list[GroupActivation]:
    """Vectorized equivalent of per-group compute for one device's share."""
    spec = store.spec
    if not group_ids:
        return []
    xn = rms_norm(np.asarray(x, dtype=np.float64))
    lw = store.layers[layer] if kind != BlockKind.LM_HEAD else None
    out = []
    if kind == BlockKind.MHA:
        hd = spec.head_dim
        t = token_idx
        if kv_cache.lengths[layer] != t:
            raise ValueError(f"KV cache holds {kv_cache.lengths[layer]} tokens, "
                             f"expected {t}")
        hs = np.array(group_ids)
        kvmap = hs // (spec.num_heads // spec.num_kv_heads)
        q = (xn @ lw.wq).reshape(spec.num_heads, hd)[hs]
        k_t = (xn @ lw.wk).reshape(spec.num_kv_heads, hd)
        v_t = (xn @ lw.wv).reshape(spec.num_kv_heads, hd)
        keys = np.concatenate([kv_cache.k[layer, :t], k_t[None]], axis=0)[:, kvmap, :]
        values = np.concatenate([kv_cache.v[layer, :t], v_t[None]], axis=0)[:, kvmap, :]
        scores = np.einsum("thd,hd->ht", keys, q) / math.sqrt(hd)
        scores -= scores.max(axis=1, keepdims=True)
        w = np.exp(scores)
        w /= w.sum(axis=1, keepdims=True)
        ctx = np.einsum("ht,thd->hd", w, values)
        wo_heads = lw.wo.reshape(spec.num_heads, hd, spec.hidden_dim)[hs]
        partials = np.einsum("hd,hde->he", ctx, wo_heads)
    elif kind == BlockKind.MLP:
        gs = spec.group_size
        cols = np.concatenate([np.arange(g * gs, (g + 1) * gs) for g in group_ids])
        up = xn @ lw.w_up[:, cols]
        gate = xn @ lw.w_gate[:, cols]
        act = (gate / (1.0 + np.exp(-gate))) * up
        blocks = act.reshape(len(group_ids), gs)
        downs = lw.w_down[cols, :].reshape(len(group_ids), gs, spec.hidden_dim)
        partials = np.einsum("gs,gsd->gd", blocks, downs)
    else:
        gs = spec.group_size
        partials = [xn @ store.lm_head[:, g * gs:(g + 1) * gs] for g in group_ids]
    for gid, partial in zip(group_ids, partials):
        out.append(GroupActivation(block=kind, layer=layer, group_id=int(gid),
                                   partial=np.asarray(partial), origin_device=origin))
    return out


@dataclass
class TokenStep:
    """Everything one decode step used: ranks, concrete assignments, timings.

    ``assignments[layer][kind]`` lists each device's concrete group ids; per
    (layer, kind) they partition the full group id range. ``merged[layer]``
    is the hidden state after that layer's blocks.
    """

    request_id: int
    token_idx: int
    ranks: list            # per layer: {kind: RankList}
    assignments: list      # per layer: {kind: [device -> group ids]}
    merged: list           # per layer: hidden state leaving the layer
    records: list = field(default_factory=list)


@dataclass
class StageRecord:
    token_idx: int
    device: int
    stage: str
    start: float
    end: float
    layer: int = -1
    block: str = ""

    def to_dict(self) -> dict:
        return {"token_idx": self.token_idx, "device": self.device,
                "stage": self.stage, "start": self.start, "end": self.end,
                "layer": self.layer, "block": self.block}


@dataclass
class GenerateResult:
    tokens: list[int]
    sequence: list[int]
    steps: int
    total_time: float
    tpt: float
    setup_time: float
    deviations: list[float]
    mean_deviation: float
    lost_groups: int
    records: list[StageRecord]
    step_bounds: list[tuple[float, float]]
    token_steps: list[TokenStep] = field(default_factory=list)
    kv_reserved_bytes: int = 0

    def token_records(self) -> list[dict]:
        """Per-token metrics rows: wall time and logit deviation."""
        return [{"token_idx": t, "stage": "token", "start": start, "end": end,
                 "tpt": end - start, "deviation": self.deviations[t]}
                for t, (start, end) in enumerate(self.step_bounds)]


def _rank_source(config: RuntimeConfig, pset: PredictorSet | None, spec: ModelSpec,
                 run_rng: np.random.Generator):
    """Rank lists for layer `layer` from the hidden state entering `layer - 1`.

    halo mapping uses the predictors (every device computes the same list from
    the broadcast activation); random mapping shuffles blindly, which is the
    importance-unaware baseline.
    """
    def ranks_for(layer: int, feature: np.ndarray) -> dict:
        out = {}
        for kind in (BlockKind.MHA, BlockKind.MLP):
            if config.mapping == "random":
                order = run_rng.permutation(spec.group_count(kind))
                out[kind] = RankList(order=order, block=kind, layer=layer)
            else:
                out[kind] = predict_ranks(pset, feature, layer - 1, kind)
        return out
    return ranks_for


def generate(store: WeightStore, schedule: Schedule, profiles: list[DeviceProfile],
             pset: PredictorSet | None, uplink_configs: list[ChannelConfig],
             config: RuntimeConfig, prompt, num_tokens: int,
             cost: CostModel | None = None, seed: int = 0) -> GenerateResult:
    """Run distributed auto-regressive decoding; master is device 0.

    Prompt positions run through the same distributed machinery as generated
    ones (they fill the KV caches); greedy argmax picks each next token.
    Returns generated tokens plus timing and logit-deviation metrics, the
    deviation being measured against the dense oracle teacher-forced on the
    realized sequence.
    """
    spec = store.spec
    n = len(profiles)
    if schedule.device_count() != n or len(uplink_configs) != n:
        raise InfeasibleScheduleError("schedule/profiles/channels disagree on n")
    if config.mapping == "halo" and pset is None:
        raise ValueError("halo mapping requires trained predictors")
    cost = cost or CostModel.from_model_spec(spec)
    prompt = [int(t) for t in np.asarray(prompt).ravel()]
    if not prompt:
        raise ValueError("prompt must be non-empty")
    steps = len(prompt) - 1 + num_tokens
    if steps < 1:
        raise ValueError("nothing to do: need at least two prompt tokens or "
                         "one token to generate")
    capacity = steps + 1

    devices = [DeviceRuntime(profiles[i], spec, cost,
                             {kind: schedule.indices[kind][i] for kind in schedule.indices},
                             config, capacity) for i in range(n)]
    for dev in devices:
        if dev.schedule_bytes() > dev.memory_budget_bytes:
            raise OutOfMemoryError(
                f"device {dev.profile.device_id}: schedule needs "
                f"{dev.schedule_bytes() / 2**20:.2f} MB "
                f"> budget {dev.profile.memory_mb:.2f} MB")

    clock = SimClock()
    net = Network(clock, spec)
    net.add_node(0)
    for i in range(1, n):
        up = uplink_configs[i]
        net.connect(i, 0, up)
        net.connect(0, i, ChannelConfig(plr=config.downlink_plr,
                                        one_way_latency=up.one_way_latency,
                                        bandwidth=up.bandwidth,
                                        seed=up.seed + 7919))
    master_inbox = net.inboxes[0]
    run_rng = np.random.default_rng(seed)
    ranks_for = _rank_source(config, pset, spec, run_rng)

    # Setup: everyone loads the identity-mapped share of every layer. Not
    # counted into per-token time, mirroring a separate model-load phase.
    setup = 0.0
    for dev in devices:
        t_load = 0.0
        for layer in range(spec.num_layers):
            for kind in (BlockKind.MHA, BlockKind.MLP):
                ids = resolve_assignment(dev.indices[kind],
                                         identity_rank(spec, kind, layer))
                t_load += dev.load_groups(layer, kind, ids)
        lm_ids = resolve_assignment(dev.indices[BlockKind.LM_HEAD],
                                    identity_rank(spec, BlockKind.LM_HEAD, 0))
        t_load += dev.load_groups(0, BlockKind.LM_HEAD, lm_ids)
        setup = max(setup, t_load)

    sequence = list(prompt)
    records: list[StageRecord] = []
    step_bounds: list[tuple[float, float]] = []
    token_steps: list[TokenStep] = []
    dist_logits: list[np.ndarray] = []
    lost_groups = 0
    gen_start = setup
    for dev in devices:
        dev.time = gen_start

    def broadcast(payload_bytes: float, at: float) -> list[float]:
        """Reliable master-to-worker delivery times (master itself at `at`)."""
        arrivals = [at]
        for i in range(1, n):
            arrivals.append(net.channel(0, i).send_reliable(
                payload_bytes, at, config.policy))
        return arrivals

    for step in range(steps):
        step_start = max(dev.time for dev in devices)
        token = sequence[step]
        master_inbox.advance_token(config.request_id, step)
        # Token id fan-out; workers hold the embedding table locally.
        arrivals = broadcast(4, devices[0].time)
        for i, dev in enumerate(devices):
            dev.time = max(dev.time, arrivals[i])
        h = store.embedding[token].copy()
        current_ranks: dict = {kind: identity_rank(spec, kind, 0)
                               for kind in (BlockKind.MHA, BlockKind.MLP)}
        pending_stall = [0.0] * n
        step_record = TokenStep(request_id=config.request_id, token_idx=step,
                                ranks=[], assignments=[], merged=[])
        record_mark = len(records)

        for layer in range(spec.num_layers):
            feature = h.copy()  # hidden state entering this layer
            next_ranks = ranks_for(layer + 1, feature) if layer + 1 < spec.num_layers else None
            assign = {kind: [resolve_assignment(dev.indices[kind], current_ranks[kind])
                             for dev in devices]
                      for kind in (BlockKind.MHA, BlockKind.MLP)}
            step_record.ranks.append(dict(current_ranks))
            step_record.assignments.append(assign)
            comp_window = [0.0] * n
            comm_window = [0.0] * n

            for kind in (BlockKind.MHA, BlockKind.MLP):
                reliable_block = (layer == 0 or config.sync_mode == "reliable")
                partials_by_dev = []
                send_times = [0.0] * n
                for i, dev in enumerate(devices):
                    ids = assign[kind][i]
                    dev.require_resident(layer, kind, ids)
                    start = dev.time + pending_stall[i]
                    pending_stall[i] = 0.0
                    dur = dev.compute_seconds(kind, len(ids),
                                              with_kv=(kind == BlockKind.MHA))
                    dev.time = start + dur
                    comp_window[i] += dur
                    records.append(StageRecord(step, i, "comp", start, dev.time,
                                               layer, kind.name))
                    parts = compute_partials_batch(store, layer, kind, ids, h,
                                                   dev.kv_cache, step, i)
                    partials_by_dev.append(parts)
                    send_times[i] = dev.time
                if kind == BlockKind.MHA:
                    k_t, v_t = kv_project(store, layer, h)
                    for dev in devices:
                        dev.kv_cache.append(layer, k_t, v_t)

                master_time = devices[0].time
                received: list[GroupActivation] = list(partials_by_dev[0])
                if reliable_block:
                    merge_at = master_time
                    for i in range(1, n):
                        if not partials_by_dev[i]:
                            continue
                        nbytes = len(partials_by_dev[i]) * spec.hidden_dim * 8
                        arrival = net.channel(i, 0).send_reliable(
                            nbytes, send_times[i], config.policy)
                        comm_window[i] += nbytes / uplink_configs[i].bandwidth
                        merge_at = max(merge_at, arrival)
                        received.extend(partials_by_dev[i])
                    clock.run_until(merge_at)
                else:
                    expected = set()
                    for i in range(1, n):
                        dgrams = []
                        for ga in partials_by_dev[i]:
                            dgrams.extend(fragment_partial(
                                ga.partial, config.request_id, step, layer, kind,
                                ga.group_id, i))
                            expected.add((i, ga.group_id))
                        if dgrams:
                            net.channel(i, 0).send_unreliable(dgrams, send_times[i])
                            comm_window[i] += sum(d.wire_size for d in dgrams) \
                                / uplink_configs[i].bandwidth
                    clock.run_until(master_time)
                    if expected:
                        result = gather_with_timeout(
                            clock, master_inbox, expected, config.request_id,
                            step, layer, kind, config.policy)
                        received.extend(result.received)
                        lost_groups += len(result.missing_groups)
                        records.append(StageRecord(step, 0, "gather", master_time,
                                                   clock.now(), layer, kind.name))
                    merge_at = clock.now()

                merged = merge_partials(spec, received, kind, layer)
                h = h + merged
                bcast_bytes = spec.hidden_dim * 8
                arrivals = broadcast(bcast_bytes, merge_at)
                if n > 1:
                    comm_window[0] += (merge_at - master_time) \
                        + (n - 1) * bcast_bytes / uplink_configs[0].bandwidth
                for i, dev in enumerate(devices):
                    wait_start = dev.time
                    dev.time = max(dev.time, arrivals[i])
                    if i > 0:
                        comm_window[i] += max(0.0, dev.time - wait_start)
                records.append(StageRecord(step, 0, "broadcast", merge_at,
                                           max(arrivals), layer, kind.name))

            # One layer ahead: load the next layer's groups and charge the
            # prediction, hiding each under its overlap window when enabled.
            if next_ranks is not None:
                for i, dev in enumerate(devices):
                    ids_next = {kind: resolve_assignment(dev.indices[kind],
                                                         next_ranks[kind])
                                for kind in (BlockKind.MHA, BlockKind.MLP)}
                    load_dur = sum(dev.load_groups(layer + 1, kind, ids_next[kind])
                                   for kind in (BlockKind.MHA, BlockKind.MLP))
                    pred_dur = 2 * config.predict_seconds
                    vis_load = max(0.0, load_dur - comp_window[i]) \
                        if config.overlap_load_comp else load_dur
                    vis_pred = max(0.0, pred_dur - comm_window[i]) \
                        if config.overlap_pred_comm else pred_dur
                    pending_stall[i] += vis_load + vis_pred
                    if load_dur:
                        records.append(StageRecord(step, i, "load", dev.time,
                                                   dev.time + load_dur, layer + 1, ""))
                    records.append(StageRecord(step, i, "pred", dev.time,
                                               dev.time + pred_dur, layer + 1, ""))
                current_ranks = next_ranks
            step_record.merged.append(h.copy())

        # LM head: reliable, all chunks required, identity mapping.
        lm_parts: list[GroupActivation] = []
        merge_at = 0.0
        for i, dev in enumerate(devices):
            ids = resolve_assignment(dev.indices[BlockKind.LM_HEAD],
                                     identity_rank(spec, BlockKind.LM_HEAD, 0))
            dev.require_resident(0, BlockKind.LM_HEAD, ids)
            start = dev.time + pending_stall[i]
            pending_stall[i] = 0.0
            dur = dev.compute_seconds(BlockKind.LM_HEAD, len(ids))
            dev.time = start + dur
            records.append(StageRecord(step, i, "comp", start, dev.time,
                                       spec.num_layers, "LM_HEAD"))
            parts = compute_partials_batch(store, spec.num_layers - 1,
                                           BlockKind.LM_HEAD, ids, h,
                                           dev.kv_cache, step, i)
            lm_parts.extend(parts)
            if i == 0:
                merge_at = max(merge_at, dev.time)
            elif parts:
                nbytes = len(parts) * spec.group_size * 8
                arrival = net.channel(i, 0).send_reliable(nbytes, dev.time,
                                                          config.policy)
                merge_at = max(merge_at, arrival)
        clock.run_until(merge_at)
        logits = merge_partials(spec, lm_parts, BlockKind.LM_HEAD,
                                spec.num_layers - 1)
        dist_logits.append(logits)
        next_token = int(np.argmax(logits))
        arrivals = broadcast(4, merge_at)
        for i, dev in enumerate(devices):
            dev.time = max(dev.time, arrivals[i])
        step_bounds.append((step_start, max(dev.time for dev in devices)))
        step_record.records = records[record_mark:]
        token_steps.append(step_record)
        if step + 1 < len(prompt):
            pass  # teacher-forced prompt continues
        else:
            sequence.append(next_token)

    total_time = max(dev.time for dev in devices) - gen_start
    trace = dense_forward(store, sequence[:steps] if steps <= len(sequence)
                          else sequence)
    clean = trace.logits
    deviations = [float(np.linalg.norm(dist_logits[t] - clean[t]))
                  for t in range(steps)]
    return GenerateResult(
        tokens=sequence[len(prompt):], sequence=sequence, steps=steps,
        total_time=total_time, tpt=total_time / steps, setup_time=setup,
        deviations=deviations, mean_deviation=float(np.mean(deviations)),
        lost_groups=lost_groups, records=records, step_bounds=step_bounds,
        token_steps=token_steps,
        kv_reserved_bytes=sum(d.kv_reserved_bytes() for d in devices))
