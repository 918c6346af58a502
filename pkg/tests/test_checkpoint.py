import struct

import numpy as np
import pytest

from lpnet import checkpoint
from lpnet.state import NetworkConfig, WeightSet, init_weights


def test_round_trip_is_bit_exact(tmp_path):
    c = NetworkConfig(L=3, dims=(3, 4, 5), input_dim=2, goal_node=2, tie_backward=False)
    w = init_weights(c, seed=5)
    w.A[0][0, 0] = np.nextafter(1.0, 2.0)
    checkpoint.save(w, tmp_path / "w.lpnw")
    back = checkpoint.load(tmp_path / "w.lpnw")
    assert back.equals(w)


def test_tied_round_trip():
    w = WeightSet(A=[np.eye(2), np.ones((3, 2))])
    back = checkpoint.loads(checkpoint.dumps(w))
    assert back.tied and back.equals(w)


def test_byte_layout():
    w = WeightSet(A=[np.array([[1.0, 2.0]]), np.array([[3.0]])])
    blob = checkpoint.dumps(w)
    expected = (b"LPNW" + struct.pack("<H", 1)
                + struct.pack("<HII", 0, 1, 2) + struct.pack("<2d", 1.0, 2.0)
                + struct.pack("<HII", 1, 1, 1) + struct.pack("<d", 3.0))
    assert blob == expected


@pytest.mark.parametrize("mutate, message", [
    (lambda b: b"XXXX" + b[4:], "magic"),
    (lambda b: b[:-3], "EOF"),
    (lambda b: b[:4] + struct.pack("<H", 9) + b[6:], "version"),
    (lambda b: b[:6], "no matrices"),
])
def test_corruption_is_detected(mutate, message):
    blob = checkpoint.dumps(WeightSet(A=[np.eye(2), np.eye(2)]))
    with pytest.raises(checkpoint.CorruptCheckpoint, match=message):
        checkpoint.loads(mutate(blob))
