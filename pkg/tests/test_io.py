import struct

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from fd2 import io
from fd2.errors import ValidationError

# published FNV-1a 64 test vectors
FNV_VECTORS = {b"": "cbf29ce484222325", b"a": "af63dc4c8601ec8c", b"foobar": "85944171f73967e8"}


@pytest.mark.parametrize("data,expected", list(FNV_VECTORS.items()))
def test_fnv_known_vectors(data, expected):
    assert io.fingerprint_bytes(data) == expected


@settings(max_examples=100, deadline=None)
@given(st.binary(max_size=600), st.binary(max_size=300))
def test_fnv_paths_agree_and_chain(a, b):
    ref = io._fnv1a64_py(a + b, io.FNV_OFFSET)
    assert io.fnv1a64(a + b) == ref
    assert io.fnv1a64(b, io.fnv1a64(a)) == ref


def test_fnv_kernel_matches_fallback_on_large_input():
    data = np.random.default_rng(0).integers(0, 256, size=10_000, dtype=np.uint8).tobytes()
    if io._fnv1a64_kernel is None:
        pytest.skip("compiled kernel disabled")
    assert int(io._fnv1a64_kernel(np.frombuffer(data, np.uint8), np.uint64(io.FNV_OFFSET))) == \
        io._fnv1a64_py(data, io.FNV_OFFSET)


def _checkpoint_parts():
    g = torch.Generator().manual_seed(0)
    tensors = {"w": torch.randn(3, 2, generator=g), "b": torch.randn(3, generator=g), "s": torch.tensor(2.0)}
    protos = torch.randn(4, 5, generator=g)
    init = torch.tensor([True, False, True, True])
    bn = [(torch.randn(3, generator=g), torch.rand(3, generator=g))]
    return tensors, protos, init, 0.05, bn, "deadbeefdeadbeef", {"arch": {"kind": "x"}, "history": [{"epoch": 1}]}


def test_checkpoint_round_trip():
    parts = _checkpoint_parts()
    blob = io.encode_checkpoint(*parts)
    assert blob[:4] == b"FD2C" and struct.unpack("<I", blob[4:8])[0] == 1
    out = io.decode_checkpoint(blob)
    for k, v in parts[0].items():
        assert torch.equal(out["tensors"][k], v.float())
    assert torch.equal(out["prototypes"], parts[1])
    assert torch.equal(out["initialized"], parts[2])
    assert abs(out["momentum"] - 0.05) < 1e-8
    assert torch.equal(out["bn_stats"][0][0], parts[4][0][0]) and torch.equal(out["bn_stats"][0][1], parts[4][0][1])
    assert out["config_fingerprint"] == parts[5] and out["metadata"] == parts[6]
    assert io.encode_checkpoint(*parts) == blob  # byte-stable


def test_checkpoint_rejects_corruption():
    blob = io.encode_checkpoint(*_checkpoint_parts())
    with pytest.raises(ValidationError, match="not an FD2C"):
        io.decode_checkpoint(b"XXXX" + blob[4:])
    with pytest.raises(ValidationError, match="version"):
        io.decode_checkpoint(blob[:4] + struct.pack("<I", 9) + blob[8:])
    with pytest.raises(ValidationError):
        io.decode_checkpoint(blob[:40], "trunc.fd2c")


def test_soft_label_round_trip():
    probs = np.random.default_rng(0).dirichlet(np.ones(5), size=(6, 3)).astype(np.float32)
    blob = io.encode_soft_labels(probs, "0123456789abcdef")
    assert blob[:4] == b"FD2L"
    assert struct.unpack("<IIII", blob[4:20]) == (1, 5, 6, 3)
    assert len(blob) == 20 + probs.size * 4 + 4 + 16
    back, fp = io.decode_soft_labels(blob)
    assert np.array_equal(back, probs) and fp == "0123456789abcdef"
    with pytest.raises(ValidationError):
        io.encode_soft_labels(probs[0], "x")
    with pytest.raises(ValidationError):
        io.decode_soft_labels(b"FD2C" + blob[4:])
