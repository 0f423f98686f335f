"""Real-socket smoke tests; skipped wholesale where UDP sockets are blocked."""

import socket

import numpy as np
import pytest

from lossytp.model import BlockKind
from lossytp.transport import TimeoutPolicy, fragment_partial

loopback = pytest.importorskip("lossytp.loopback")


def _sockets_available():
    try:
        s = socket.socket(socket.AF_INET, socket.SOCK_DGRAM)
        s.bind(("127.0.0.1", 0))
        s.close()
        return True
    except OSError:
        return False


pytestmark = pytest.mark.skipif(not _sockets_available(),
                                reason="loopback sockets unavailable")


def test_single_group_roundtrip():
    master, worker = loopback.UdpEndpoint(), loopback.UdpEndpoint()
    try:
        values = np.linspace(-2, 2, 64)
        worker.send(fragment_partial(values, 0, 0, 1, BlockKind.MLP, 5, 1),
                    master.address)
        received, missing, elapsed = master.gather(
            {(1, 5)}, 0, 0, 1, BlockKind.MLP, TimeoutPolicy(gather_timeout=1.0))
        assert not missing
        assert np.allclose(received[0].partial, values, atol=1e-6)
    finally:
        master.close()
        worker.close()


def test_multi_fragment_reassembly():
    master, worker = loopback.UdpEndpoint(), loopback.UdpEndpoint()
    try:
        values = np.arange(1000, dtype=float)  # three fragments
        worker.send(fragment_partial(values, 0, 0, 0, BlockKind.MHA, 2, 1),
                    master.address)
        received, missing, _ = master.gather(
            {(1, 2)}, 0, 0, 0, BlockKind.MHA, TimeoutPolicy(gather_timeout=1.0))
        assert not missing
        assert np.allclose(received[0].partial, values, atol=1e-3)
    finally:
        master.close()
        worker.close()


def test_gather_timeout_on_missing_origin():
    master = loopback.UdpEndpoint()
    try:
        received, missing, elapsed = master.gather(
            {(1, 0)}, 0, 0, 0, BlockKind.MHA, TimeoutPolicy(gather_timeout=0.05))
        assert missing == {(1, 0)}
        assert elapsed >= 0.05
    finally:
        master.close()
