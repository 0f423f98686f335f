"""Hybrid reliable/unreliable messaging over a deterministic simulated network.

One single-threaded event clock drives everything: datagram deliveries are
events, losses are seeded Bernoulli draws per link, and the timeout-gated
gather advances the clock until its deadline. Identical seeds and configs
replay identical event traces, which the tests pin.

The reliable path is a deliberately simple stop-and-wait model: every lost
fragment is retransmitted after a fixed interval until it lands, so rising
loss rates stretch completion times the way a kernel transport's
retransmission timer would, without modeling congestion control.
"""

from __future__ import annotations

import heapq
import math
import struct
from dataclasses import dataclass, field

import numpy as np

from .model import BlockKind, GroupActivation

HEADER = struct.Struct("<QIHBHHHHH")
MAX_PAYLOAD = 1400
WIRE_DTYPE = np.dtype("<f4")


class SchedulingError(ValueError):
    """An event was scheduled before the current simulation time."""


class DeliveryFailureError(RuntimeError):
    """A reliable transfer exhausted its retry budget."""


@dataclass(frozen=True)
class ChannelConfig:
    plr: float
    one_way_latency: float = 0.0002
    bandwidth: float = 125e6     # bytes per second (1 Gbps)
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.plr <= 1.0:
            raise ValueError(f"plr must be in [0, 1], got {self.plr}")
        if self.one_way_latency < 0:
            raise ValueError("latency must be non-negative")
        if self.bandwidth <= 0:
            raise ValueError("bandwidth must be positive")


@dataclass(frozen=True)
class TimeoutPolicy:
    gather_timeout: float = 0.010
    reliable_retry_interval: float = 0.100
    reliable_max_retries: int | None = None

    def __post_init__(self):
        if self.gather_timeout <= 0:
            raise ValueError("gather_timeout must be positive")


@dataclass
class Datagram:
    """One fragment of one group's partial activation.

    The header layout is the struct above, little-endian, 25 bytes, fields in
    declaration order. A group's partial is lost if any of its fragments are.
    """

    request_id: int
    token_idx: int
    layer: int
    block: BlockKind
    group_id: int
    seq: int
    frag_count: int
    origin: int
    payload: bytes

    def encode(self) -> bytes:
        return HEADER.pack(self.request_id, self.token_idx, self.layer,
                           int(self.block), self.group_id, self.seq,
                           self.frag_count, self.origin, len(self.payload)
                           ) + self.payload

    @classmethod
    def decode(cls, raw: bytes) -> "Datagram":
        (request_id, token_idx, layer, block, group_id, seq, frag_count,
         origin, payload_len) = HEADER.unpack(raw[:HEADER.size])
        payload = raw[HEADER.size:HEADER.size + payload_len]
        if len(payload) != payload_len:
            raise ValueError("truncated datagram payload")
        return cls(request_id=request_id, token_idx=token_idx, layer=layer,
                   block=BlockKind(block), group_id=group_id, seq=seq,
                   frag_count=frag_count, origin=origin, payload=payload)

    @property
    def wire_size(self) -> int:
        return HEADER.size + len(self.payload)


def fragment_partial(values: np.ndarray, request_id: int, token_idx: int,
                     layer: int, block: BlockKind, group_id: int,
                     origin: int) -> list[Datagram]:
    raw = np.asarray(values, dtype=np.float64).astype(WIRE_DTYPE).tobytes()
    chunks = [raw[i:i + MAX_PAYLOAD] for i in range(0, len(raw), MAX_PAYLOAD)] or [b""]
    return [Datagram(request_id=request_id, token_idx=token_idx, layer=layer,
                     block=block, group_id=group_id, seq=seq,
                     frag_count=len(chunks), origin=origin, payload=chunk)
            for seq, chunk in enumerate(chunks)]


class SimClock:
    """Single-threaded event loop with (time, insertion order) execution."""

    def __init__(self):
        self._now = 0.0
        self._seq = 0
        self._heap: list = []
        self.trace: list[tuple[float, str]] = []

    def now(self) -> float:
        return self._now

    def schedule_at(self, when: float, callback, note: str = "event") -> None:
        if when < self._now - 1e-12:
            raise SchedulingError(f"cannot schedule at {when} before now={self._now}")
        heapq.heappush(self._heap, (when, self._seq, note, callback))
        self._seq += 1
        self.trace.append((when, f"schedule:{note}"))

    def schedule_after(self, delay: float, callback, note: str = "event") -> None:
        self.schedule_at(self._now + delay, callback, note)

    def peek(self) -> float | None:
        return self._heap[0][0] if self._heap else None

    def step(self) -> bool:
        if not self._heap:
            return False
        when, _seq, note, callback = heapq.heappop(self._heap)
        self._now = max(self._now, when)
        self.trace.append((self._now, f"run:{note}"))
        callback()
        return True

    def run_until(self, t: float) -> None:
        """Execute every event at time <= t, then advance the clock to t."""
        if t < self._now - 1e-12:
            raise SchedulingError(f"cannot run backwards to {t}")
        while self._heap and self._heap[0][0] <= t:
            self.step()
        self._now = max(self._now, t)

    def run_until_idle(self) -> None:
        while self.step():
            pass


class Inbox:
    """Receive queue of one endpoint; reassembles fragments, drops stale ones.

    ``current_token`` is the generation step being processed; anything tagged
    with an older (request_id, token_idx) is discarded on arrival so a late
    packet can never leak into a later token's merge.
    """

    def __init__(self, spec=None):
        self.spec = spec
        self.current_request = 0
        self.current_token = 0
        self._fragments: dict = {}
        self.ready: dict = {}       # key -> (arrival_time, GroupActivation)
        self.stale_drops = 0

    def _is_stale(self, request_id: int, token_idx: int) -> bool:
        if request_id != self.current_request:
            return request_id < self.current_request
        return token_idx < self.current_token

    def deliver(self, dgram: Datagram, at: float) -> None:
        if self._is_stale(dgram.request_id, dgram.token_idx):
            self.stale_drops += 1
            return
        key = (dgram.request_id, dgram.token_idx, dgram.layer, int(dgram.block),
               dgram.origin, dgram.group_id)
        frags = self._fragments.setdefault(key, {})
        frags[dgram.seq] = dgram.payload
        if len(frags) == dgram.frag_count:
            raw = b"".join(frags[s] for s in range(dgram.frag_count))
            values = np.frombuffer(raw, dtype=WIRE_DTYPE).astype(np.float64)
            self.ready[key] = (at, GroupActivation(
                block=dgram.block, layer=dgram.layer, group_id=dgram.group_id,
                partial=values, origin_device=dgram.origin))
            del self._fragments[key]

    def advance_token(self, request_id: int, token_idx: int) -> None:
        self.current_request = request_id
        self.current_token = token_idx
        for table in (self.ready, self._fragments):
            for key in [k for k in table if self._is_stale(k[0], k[1])]:
                del table[key]


class Channel:
    """One directed link with independent Bernoulli loss per datagram.

    Serialization occupies the link back to back; propagation adds the one-way
    latency. Loss draws come from the channel's own generator, so a run is
    reproducible link by link.
    """

    def __init__(self, clock: SimClock, config: ChannelConfig, src: int, dst: int,
                 inbox: Inbox | None = None):
        self.clock = clock
        self.config = config
        self.src = src
        self.dst = dst
        self.inbox = inbox
        self.rng = np.random.default_rng(config.seed)
        self.link_free_at = 0.0
        self.sent = 0
        self.dropped = 0

    def _serialize(self, nbytes: int, at: float) -> float:
        start = max(at, self.link_free_at)
        self.link_free_at = start + nbytes / self.config.bandwidth
        return self.link_free_at

    def send_unreliable(self, datagrams: list[Datagram], at: float) -> list[float]:
        """Fire-and-forget: lost datagrams still occupy serialization time.

        Returns per-datagram delivery times (math.inf for dropped ones).
        """
        times = []
        for dgram in datagrams:
            finish = self._serialize(dgram.wire_size, at)
            self.sent += 1
            if self.rng.random() < self.config.plr:
                self.dropped += 1
                self.clock.trace.append((finish, f"drop:{self.src}->{self.dst}"))
                times.append(math.inf)
                continue
            arrival = finish + self.config.one_way_latency
            if self.inbox is not None:
                inbox = self.inbox
                self.clock.schedule_at(
                    arrival, lambda d=dgram, t=arrival: inbox.deliver(d, t),
                    note=f"udp:{self.src}->{self.dst}")
            times.append(arrival)
        return times

    def send_reliable(self, nbytes: int, at: float,
                      policy: TimeoutPolicy, on_delivery=None) -> float:
        """Stop-and-wait per fragment; returns the completion time.

        Fragments stream back to back; each lost one is retransmitted after
        the retry interval until it lands (bounded by the retry budget).
        """
        if self.config.plr >= 1.0 and policy.reliable_max_retries is None:
            raise DeliveryFailureError(
                f"link {self.src}->{self.dst} drops everything; a reliable "
                f"transfer can never complete")
        frag_count = max(1, math.ceil(nbytes / MAX_PAYLOAD))
        completion = at
        for frag in range(frag_count):
            size = min(MAX_PAYLOAD, nbytes - frag * MAX_PAYLOAD) if nbytes else 0
            finish = self._serialize(HEADER.size + size, at)
            retries = 0
            while self.rng.random() < self.config.plr:
                retries += 1
                if (policy.reliable_max_retries is not None
                        and retries > policy.reliable_max_retries):
                    raise DeliveryFailureError(
                        f"fragment {frag} exceeded {policy.reliable_max_retries} retries"
                        f" on link {self.src}->{self.dst}")
            arrival = (finish + retries * policy.reliable_retry_interval
                       + self.config.one_way_latency)
            completion = max(completion, arrival)
        self.clock.trace.append((completion, f"tcp:{self.src}->{self.dst}"))
        if on_delivery is not None:
            self.clock.schedule_at(completion, on_delivery,
                                   note=f"tcp-delivery:{self.src}->{self.dst}")
        return completion


@dataclass
class GatherResult:
    received: list[GroupActivation]
    missing_groups: set
    elapsed: float
    timed_out: bool


def gather_with_timeout(clock: SimClock, inbox: Inbox, expected: set,
                        request_id: int, token_idx: int, layer: int,
                        block: BlockKind, policy: TimeoutPolicy) -> GatherResult:
    """Merge-side wait: collect expected (origin, group_id) partials or time out.

    The timer starts when the gather is posted (the merging node's own compute
    is done); the clock advances event by event until everything expected has
    arrived or the deadline passes. Missing groups are data, not errors.
    """
    if not expected:
        raise ValueError("gather requires a non-empty expected set")
    start = clock.now()
    deadline = start + policy.gather_timeout

    def have(origin: int, group_id: int) -> bool:
        return (request_id, token_idx, layer, int(block), origin, group_id) in inbox.ready

    def complete() -> bool:
        return all(have(o, g) for o, g in expected)

    while not complete():
        nxt = clock.peek()
        if nxt is None or nxt > deadline:
            clock.run_until(deadline)
            break
        clock.step()
    received, missing = [], set()
    for origin, group_id in expected:
        key = (request_id, token_idx, layer, int(block), origin, group_id)
        if key in inbox.ready:
            received.append(inbox.ready[key][1])
        else:
            missing.add((origin, group_id))
    return GatherResult(received=sorted(received, key=lambda g: (g.origin_device,
                                                                 g.group_id)),
                        missing_groups=missing, elapsed=clock.now() - start,
                        timed_out=bool(missing))


class Network:
    """Directed channels between device ids sharing one clock and per-node inboxes."""

    def __init__(self, clock: SimClock, spec=None):
        self.clock = clock
        self.channels: dict[tuple[int, int], Channel] = {}
        self.inboxes: dict[int, Inbox] = {}
        self.spec = spec

    def add_node(self, node_id: int) -> Inbox:
        inbox = self.inboxes.setdefault(node_id, Inbox(self.spec))
        return inbox

    def connect(self, src: int, dst: int, config: ChannelConfig) -> Channel:
        self.add_node(src)
        inbox = self.add_node(dst)
        channel = Channel(self.clock, config, src, dst, inbox)
        self.channels[(src, dst)] = channel
        return channel

    def channel(self, src: int, dst: int) -> Channel:
        return self.channels[(src, dst)]
