"""Binary checkpoint format (magic ``LDTC``).

Little-endian throughout; every variable-size field is length-prefixed, so
a truncated file always fails with the byte offset of the first missing
data.  Round-trips are bit-exact.
"""

import os
import struct

import numpy as np

from .errors import CheckpointError

MAGIC = b"LDTC"
VERSION = 1


class _Reader:
    def __init__(self, data):
        self.data = data
        self.off = 0

    def take(self, n):
        if self.off + n > len(self.data):
            raise CheckpointError(f"unexpected end at byte {len(self.data)}")
        out = self.data[self.off:self.off + n]
        self.off += n
        return out

    def u8(self):
        return self.take(1)[0]

    def u32(self):
        return struct.unpack("<I", self.take(4))[0]

    def blob(self):
        return self.take(self.u32())

    def text(self):
        return self.blob().decode("utf-8")


def _put_u32(buf, v):
    buf.append(struct.pack("<I", v))


def _put_blob(buf, b):
    _put_u32(buf, len(b))
    buf.append(b)


def _put_text(buf, s):
    _put_blob(buf, s.encode("utf-8"))


def _put_array(buf, name, arr):
    _put_text(buf, name)
    arr = np.asarray(arr, dtype=np.float32)
    _put_u32(buf, arr.ndim)
    for d in arr.shape:
        _put_u32(buf, d)
    _put_blob(buf, arr.astype("<f4").tobytes())


def _read_array(r):
    name = r.text()
    rank = r.u32()
    dims = tuple(r.u32() for _ in range(rank))
    payload = r.blob()
    expected = int(np.prod(dims, dtype=np.int64)) * 4 if dims else 4
    if rank == 0:
        expected = 4
    if len(payload) != expected:
        raise CheckpointError(
            f"payload length {len(payload)} != expected {expected} "
            f"for tensor {name!r}"
        )
    arr = np.frombuffer(payload, dtype="<f4").reshape(dims).copy()
    return name, arr


class Checkpoint:
    """In-memory checkpoint: config text, parameters, optimizer momenta,
    training progress and the prune-mask history."""

    def __init__(self, config_text, params, momenta=None, epoch=0,
                 ldt_trained=False, mask_history=None):
        self.config_text = config_text
        self.params = dict(params)          # name -> float32 array
        self.momenta = dict(momenta or {})
        self.epoch = epoch
        self.ldt_trained = ldt_trained
        self.mask_history = list(mask_history or [])  # list of name->bool arr

    def to_bytes(self):
        buf = []
        buf.append(MAGIC)
        _put_u32(buf, VERSION)
        _put_text(buf, self.config_text)
        buf.append(bytes([1 if self.ldt_trained else 0]))
        _put_u32(buf, self.epoch)
        _put_u32(buf, len(self.params))
        for name in self.params:
            _put_array(buf, name, self.params[name])
        _put_u32(buf, len(self.momenta))
        for name in self.momenta:
            _put_array(buf, name, self.momenta[name])
        _put_u32(buf, len(self.mask_history))
        for masks in self.mask_history:
            _put_u32(buf, len(masks))
            for name, flags in masks.items():
                _put_text(buf, name)
                flags = np.asarray(flags).astype(np.uint8)
                _put_blob(buf, flags.tobytes())
        return b"".join(buf)

    @classmethod
    def from_bytes(cls, data):
        r = _Reader(data)
        if r.take(4) != MAGIC:
            raise CheckpointError("not a checkpoint")
        version = r.u32()
        if version != VERSION:
            raise CheckpointError(f"unsupported version {version}")
        config_text = r.text()
        ldt_trained = bool(r.u8())
        epoch = r.u32()
        params = dict(_read_array(r) for _ in range(r.u32()))
        momenta = dict(_read_array(r) for _ in range(r.u32()))
        history = []
        for _ in range(r.u32()):
            masks = {}
            for _ in range(r.u32()):
                name = r.text()
                masks[name] = np.frombuffer(r.blob(), dtype=np.uint8).astype(bool)
            history.append(masks)
        if r.off != len(data):
            raise CheckpointError(f"trailing bytes at {r.off}")
        return cls(config_text, params, momenta, epoch, ldt_trained, history)


def write_checkpoint(ckpt, path):
    """Atomic write: temp file then rename."""
    tmp = path + ".tmp"
    with open(tmp, "wb") as fh:
        fh.write(ckpt.to_bytes())
    os.replace(tmp, path)


def read_checkpoint(path):
    try:
        with open(path, "rb") as fh:
            data = fh.read()
    except OSError as e:
        raise CheckpointError(f"cannot read {path}: {e}") from None
    return Checkpoint.from_bytes(data)
