"""Fingerprints and the binary containers for checkpoints and soft labels.

Checkpoint layout (``.fd2c``, all integers little-endian)::

    b"FD2C"  u32 version
    u32 n_tensors, then per tensor:
        u16 name_len, name (utf-8), u8 ndim, ndim * u32 shape, fp32 data
    prototype block: u32 K, u32 D, f32 momentum, K * u8 initialized, K*D fp32
    BN block: u32 n_layers, then per layer: u32 C, C fp32 mean, C fp32 var
    u32 len, config fingerprint (utf-8)
    u32 len, metadata JSON (architecture + training history)

Soft-label layout (``.fd2l``)::

    b"FD2L"  u32 version  u32 K  u32 n_images  u32 vectors_per_image
    n_images * vectors_per_image * K fp32 (row-major)
    u32 len, teacher fingerprint (utf-8)
"""
from __future__ import annotations

import json
import os
import struct
from pathlib import Path

import numpy as np
import torch

from .errors import ValidationError

FNV_OFFSET = 0xCBF29CE484222325
FNV_PRIME = 0x100000001B3
_MASK = 0xFFFFFFFFFFFFFFFF

CHECKPOINT_MAGIC = b"FD2C"
SOFTLABEL_MAGIC = b"FD2L"
FORMAT_VERSION = 1

USE_NUMBA = os.environ.get("FD2_DISABLE_NUMBA", "0") not in ("1", "true", "yes")


def _fnv1a64_py(data, h):
    for b in data:
        h = ((h ^ b) * FNV_PRIME) & _MASK
    return h


_fnv1a64_kernel = None
if USE_NUMBA:
    try:
        import numba

        @numba.njit(cache=False, nogil=True)
        def _fnv1a64_kernel(arr, h):
            prime = np.uint64(FNV_PRIME)
            for i in range(arr.shape[0]):
                h = (h ^ np.uint64(arr[i])) * prime
            return h
    except ImportError:  # pragma: no cover - numba is a declared dependency
        _fnv1a64_kernel = None


def fnv1a64(data, h=None):
    """64-bit FNV-1a over ``data``; pass a previous hash as ``h`` to continue it."""
    h = FNV_OFFSET if h is None else h
    if _fnv1a64_kernel is not None and len(data) > 64:
        arr = np.frombuffer(bytes(data), dtype=np.uint8)
        return int(_fnv1a64_kernel(arr, np.uint64(h)))
    return _fnv1a64_py(bytes(data), h)


def fingerprint_bytes(data):
    return f"{fnv1a64(data):016x}"


def fingerprint_file(path):
    return fingerprint_bytes(Path(path).read_bytes())


# -- checkpoint container ---------------------------------------------------

def _w_str(buf, s, width="<I"):
    raw = s.encode("utf-8")
    buf += struct.pack(width, len(raw))
    buf += raw


class _Reader:
    def __init__(self, data, path):
        self.data = data
        self.pos = 0
        self.path = path

    def take(self, n):
        if self.pos + n > len(self.data):
            raise ValidationError(f"{self.path}: truncated file")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def string(self, width="<I"):
        (n,) = self.unpack(width)
        return self.take(n).decode("utf-8")

    def floats(self, count):
        return np.frombuffer(self.take(4 * count), dtype="<f4").astype(np.float32)


def encode_checkpoint(tensors, prototypes, initialized, momentum, bn_stats, config_fingerprint, metadata):
    buf = bytearray(CHECKPOINT_MAGIC)
    buf += struct.pack("<I", FORMAT_VERSION)
    buf += struct.pack("<I", len(tensors))
    for name, t in tensors.items():
        # np.array keeps 0-d tensors 0-d (ascontiguousarray would make them 1-d)
        arr = np.array(t.detach().cpu().numpy(), dtype="<f4", order="C")
        _w_str(buf, name, "<H")
        buf += struct.pack("<B", arr.ndim)
        buf += struct.pack(f"<{arr.ndim}I", *arr.shape)
        buf += arr.tobytes()
    protos = np.ascontiguousarray(prototypes.detach().cpu().numpy(), dtype="<f4")
    k, d = protos.shape
    buf += struct.pack("<IIf", k, d, momentum)
    buf += np.asarray(initialized.cpu().numpy(), dtype=np.uint8).tobytes()
    buf += protos.tobytes()
    buf += struct.pack("<I", len(bn_stats))
    for mean, var in bn_stats:
        m = np.ascontiguousarray(mean.detach().cpu().numpy(), dtype="<f4")
        v = np.ascontiguousarray(var.detach().cpu().numpy(), dtype="<f4")
        buf += struct.pack("<I", m.shape[0])
        buf += m.tobytes()
        buf += v.tobytes()
    _w_str(buf, config_fingerprint)
    _w_str(buf, json.dumps(metadata, sort_keys=True))
    return bytes(buf)


def decode_checkpoint(data, path="<bytes>"):
    r = _Reader(data, path)
    if r.take(4) != CHECKPOINT_MAGIC:
        raise ValidationError(f"{path}: not an FD2C checkpoint")
    (version,) = r.unpack("<I")
    if version != FORMAT_VERSION:
        raise ValidationError(f"{path}: unsupported checkpoint version {version}")
    (n,) = r.unpack("<I")
    tensors = {}
    for _ in range(n):
        name = r.string("<H")
        (ndim,) = r.unpack("<B")
        shape = r.unpack(f"<{ndim}I") if ndim else ()
        count = int(np.prod(shape)) if ndim else 1
        tensors[name] = torch.from_numpy(r.floats(count).reshape(shape).copy())
    k, d, momentum = r.unpack("<IIf")
    initialized = torch.from_numpy(np.frombuffer(r.take(k), dtype=np.uint8).astype(bool).copy())
    prototypes = torch.from_numpy(r.floats(k * d).reshape(k, d).copy())
    (n_layers,) = r.unpack("<I")
    bn_stats = []
    for _ in range(n_layers):
        (c,) = r.unpack("<I")
        bn_stats.append((torch.from_numpy(r.floats(c).copy()), torch.from_numpy(r.floats(c).copy())))
    config_fp = r.string()
    metadata = json.loads(r.string())
    return {
        "tensors": tensors,
        "prototypes": prototypes,
        "initialized": initialized,
        "momentum": float(momentum),
        "bn_stats": bn_stats,
        "config_fingerprint": config_fp,
        "metadata": metadata,
    }


# -- soft-label container ---------------------------------------------------

def encode_soft_labels(probs, teacher_fingerprint):
    """``probs`` has shape ``(n_images, vectors_per_image, K)``."""
    arr = np.ascontiguousarray(np.asarray(probs), dtype="<f4")
    if arr.ndim != 3:
        raise ValidationError(f"soft labels must be 3-D (images, vectors, K), got shape {arr.shape}")
    n, v, k = arr.shape
    buf = bytearray(SOFTLABEL_MAGIC)
    buf += struct.pack("<IIII", FORMAT_VERSION, k, n, v)
    buf += arr.tobytes()
    _w_str(buf, teacher_fingerprint)
    return bytes(buf)


def decode_soft_labels(data, path="<bytes>"):
    r = _Reader(data, path)
    if r.take(4) != SOFTLABEL_MAGIC:
        raise ValidationError(f"{path}: not an FD2L soft-label file")
    version, k, n, v = r.unpack("<IIII")
    if version != FORMAT_VERSION:
        raise ValidationError(f"{path}: unsupported soft-label version {version}")
    probs = r.floats(n * v * k).reshape(n, v, k).copy()
    return probs, r.string()
