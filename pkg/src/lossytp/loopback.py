"""Optional real-network mode: the same datagram format over localhost UDP.

Same header layout and reassembly rules as the simulator, but wall-clock time
and real sockets. Each endpoint owns a background reader pushing decoded
datagrams into a thread-safe queue, so concurrent senders are safe; gathers
are single-consumer. Excluded from acceptance runs (kernel timing is not
deterministic), handy for eyeballing the protocol on a real stack.
"""

from __future__ import annotations

import queue
import socket
import threading
import time

import numpy as np

from .model import BlockKind, GroupActivation
from .transport import Datagram, TimeoutPolicy, WIRE_DTYPE

MAX_WIRE = 65536


class UdpEndpoint:
    """One device's socket plus reader thread and reassembly state."""

    def __init__(self, host: str = "127.0.0.1", port: int = 0):
        self.sock = socket.socket(socket.AF_INET, socket.SOCK_DGRAM)
        self.sock.bind((host, port))
        self.address = self.sock.getsockname()
        self.queue: queue.Queue = queue.Queue()
        self._fragments: dict = {}
        self._closed = threading.Event()
        self._reader = threading.Thread(target=self._read_loop, daemon=True)
        self._reader.start()

    def _read_loop(self):
        self.sock.settimeout(0.05)
        while not self._closed.is_set():
            try:
                raw, _addr = self.sock.recvfrom(MAX_WIRE)
            except socket.timeout:
                continue
            except OSError:
                return
            try:
                self.queue.put(Datagram.decode(raw))
            except ValueError:
                continue  # malformed datagrams are dropped like lost packets

    def send(self, datagrams: list[Datagram], to: tuple[str, int]) -> None:
        for dgram in datagrams:
            self.sock.sendto(dgram.encode(), to)

    def gather(self, expected: set, request_id: int, token_idx: int, layer: int,
               block: BlockKind, policy: TimeoutPolicy):
        """Collect expected (origin, group_id) partials until the timeout.

        Returns (received GroupActivations, missing key set, elapsed seconds).
        Stale datagrams from earlier tokens are discarded on arrival.
        """
        deadline = time.monotonic() + policy.gather_timeout
        start = time.monotonic()
        ready: dict = {}
        want = set(expected)
        while want:
            remaining = deadline - time.monotonic()
            if remaining <= 0:
                break
            try:
                dgram = self.queue.get(timeout=remaining)
            except queue.Empty:
                break
            if (dgram.request_id, dgram.token_idx) < (request_id, token_idx):
                continue
            if (dgram.token_idx != token_idx or dgram.layer != layer
                    or dgram.block != block):
                continue
            key = (dgram.origin, dgram.group_id)
            frags = self._fragments.setdefault(key, {})
            frags[dgram.seq] = dgram.payload
            if len(frags) == dgram.frag_count:
                raw = b"".join(frags[s] for s in range(dgram.frag_count))
                values = np.frombuffer(raw, dtype=WIRE_DTYPE).astype(np.float64)
                ready[key] = GroupActivation(block=block, layer=layer,
                                             group_id=dgram.group_id,
                                             partial=values,
                                             origin_device=dgram.origin)
                del self._fragments[key]
                want.discard(key)
        elapsed = time.monotonic() - start
        received = [ready[k] for k in sorted(ready)]
        missing = set(expected) - set(ready)
        return received, missing, elapsed

    def close(self):
        self._closed.set()
        self._reader.join(timeout=0.5)
        self.sock.close()
