"""Binary container for parameters and training checkpoints.

Layout, all little-endian:
  magic "CAIRW1" | version u32 | entry count u64 |
  per entry: name_len u32, name utf-8, rank u8, dims u64 x rank,
             dtype u8 (0=f32, 1=f64), raw payload |
  CRC32 u32 of every prior byte.

Checkpoints reuse the same container: parameter entries keep their store
names, optimizer moments live under "__opt__m/" and "__opt__v/", and the
iteration counters under "__meta__/".
"""

from __future__ import annotations

import struct
import zlib
from typing import Dict, Tuple

import numpy as np

from .tensor import ContractViolation, ParamStore
from .training import Checkpoint, OptimizerState

MAGIC = b"CAIRW1"
VERSION = 1

_DTYPE_CODES = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}
_CODE_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}

META_ITER = "__meta__/iteration"
META_STEP = "__meta__/opt_step"
OPT_M = "__opt__m/"
OPT_V = "__opt__v/"


class WeightsError(IOError):
    """Unreadable, corrupt, or mismatched weights file."""


def save_weights(path: str, entries: Dict[str, np.ndarray]) -> None:
    if not entries:
        raise ContractViolation("save_weights: nothing to write")
    blob = bytearray()
    blob += MAGIC
    blob += struct.pack("<I", VERSION)
    blob += struct.pack("<Q", len(entries))
    for name, arr in entries.items():
        arr = np.asarray(arr)
        if arr.dtype not in _DTYPE_CODES:
            raise ContractViolation(
                f"save_weights: {name} has unsupported dtype {arr.dtype}"
            )
        nb = name.encode("utf-8")
        blob += struct.pack("<I", len(nb))
        blob += nb
        blob += struct.pack("<B", arr.ndim)
        for d in arr.shape:
            blob += struct.pack("<Q", d)
        blob += struct.pack("<B", _DTYPE_CODES[arr.dtype])
        code = _DTYPE_CODES[arr.dtype]
        blob += np.ascontiguousarray(arr, dtype=_CODE_DTYPES[code]).tobytes()
    blob += struct.pack("<I", zlib.crc32(bytes(blob)))
    with open(path, "wb") as f:
        f.write(bytes(blob))


class _Reader:
    def __init__(self, data: bytes, path: str):
        self.data = data
        self.pos = 0
        self.path = path

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise WeightsError(f"corrupt weights: {self.path} truncated")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]

    def u64(self) -> int:
        return struct.unpack("<Q", self.take(8))[0]

    def u8(self) -> int:
        return self.take(1)[0]


def load_weights(path: str) -> Dict[str, np.ndarray]:
    try:
        with open(path, "rb") as f:
            data = f.read()
    except FileNotFoundError:
        raise WeightsError(f"cannot read weights file {path}")
    if len(data) < len(MAGIC) + 4 + 8 + 4:
        raise WeightsError(f"corrupt weights: {path} too short")
    stored_crc = struct.unpack("<I", data[-4:])[0]
    if zlib.crc32(data[:-4]) != stored_crc:
        raise WeightsError(f"corrupt weights: {path} CRC mismatch")

    r = _Reader(data[:-4], path)
    if r.take(len(MAGIC)) != MAGIC:
        raise WeightsError(f"corrupt weights: {path} bad magic")
    version = r.u32()
    if version != VERSION:
        raise WeightsError(f"{path}: unsupported version {version}")
    count = r.u64()
    out: Dict[str, np.ndarray] = {}
    for _ in range(count):
        name = r.take(r.u32()).decode("utf-8")
        if name in out:
            raise WeightsError(f"corrupt weights: {path} repeats entry {name}")
        rank = r.u8()
        dims = tuple(r.u64() for _ in range(rank))
        code = r.u8()
        if code not in _CODE_DTYPES:
            raise WeightsError(f"corrupt weights: {path} unknown dtype {code}")
        dt = _CODE_DTYPES[code]
        n_items = 1
        for d in dims:
            n_items *= d
        raw = r.take(n_items * dt.itemsize)
        out[name] = np.frombuffer(raw, dtype=dt).reshape(dims).copy()
    if r.pos != len(r.data):
        raise WeightsError(f"corrupt weights: {path} has trailing bytes")
    return out


def save_store(path: str, store: ParamStore) -> None:
    save_weights(path, {name: t.data for name, t in store.items()})


def load_into_store(path: str, store: ParamStore) -> None:
    """Fill a model's parameters; raises naming the first mismatch."""
    entries = load_weights(path)
    _fill_store(entries, store, path)


def _fill_store(entries: Dict[str, np.ndarray], store: ParamStore,
                path: str) -> None:
    names = list(store.names())
    for name in names:
        if name not in entries:
            raise WeightsError(f"{path}: missing entry {name}")
    extra = [n for n in entries if n not in set(names)]
    if extra:
        raise WeightsError(f"{path}: unexpected entry {extra[0]}")
    for name in names:
        t = store[name]
        arr = entries[name]
        if tuple(arr.shape) != tuple(t.data.shape):
            raise WeightsError(
                f"{path}: shape mismatch at {name}: "
                f"expected {tuple(t.data.shape)}, got {tuple(arr.shape)}"
            )
        t.data[:] = arr.astype(t.data.dtype, copy=False).reshape(t.data.shape)


def save_checkpoint(path: str, ck: Checkpoint) -> None:
    entries: Dict[str, np.ndarray] = {
        name: t.data for name, t in ck.store.items()
    }
    for name, m in ck.opt_state.m.items():
        entries[OPT_M + name] = m
    for name, v in ck.opt_state.v.items():
        entries[OPT_V + name] = v
    entries[META_ITER] = np.asarray(float(ck.iteration))
    entries[META_STEP] = np.asarray(float(ck.opt_state.step))
    save_weights(path, entries)


def load_checkpoint(path: str, store: ParamStore) -> Tuple[int, OptimizerState]:
    """Restore parameters in place; returns (iteration, optimizer state)."""
    entries = load_weights(path)
    for key in (META_ITER, META_STEP):
        if key not in entries:
            raise WeightsError(f"{path}: not a checkpoint (missing {key})")
    params = {n: a for n, a in entries.items()
              if not n.startswith(("__opt__", "__meta__"))}
    _fill_store(params, store, path)
    state = OptimizerState(step=int(entries[META_STEP]))
    for name in store.names():
        for prefix, slot in ((OPT_M, state.m), (OPT_V, state.v)):
            key = prefix + name
            if key not in entries:
                raise WeightsError(f"{path}: missing optimizer entry {key}")
            slot[name] = entries[key].astype(store[name].data.dtype, copy=True)
    return int(entries[META_ITER]), state
