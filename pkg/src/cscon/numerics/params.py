"""Named parameter storage, initializers and the checkpoint archive."""

from __future__ import annotations

import struct
from collections import OrderedDict
from pathlib import Path
from typing import Iterator

import numpy as np

from .tensor import DEFAULT_DTYPE, Tensor

ARCHIVE_MAGIC = b"CSCK"
ARCHIVE_VERSION = 1


class ArchiveError(ValueError):
    """Malformed or truncated checkpoint archive."""


def trunc_normal(rng: np.random.Generator, shape, std: float = 0.02) -> np.ndarray:
    """Normal(0, std) truncated to +-2 std by resampling."""
    out = rng.normal(0.0, std, size=shape)
    bad = np.abs(out) > 2 * std
    while bad.any():
        out[bad] = rng.normal(0.0, std, size=int(bad.sum()))
        bad = np.abs(out) > 2 * std
    return out


def fan_in_uniform(rng: np.random.Generator, shape) -> np.ndarray:
    bound = 1.0 / np.sqrt(shape[0])
    return rng.uniform(-bound, bound, size=shape)


class ParamStore:
    """Ordered name -> Tensor mapping. Insertion order is the iteration order."""

    def __init__(self, dtype=DEFAULT_DTYPE):
        self._params: OrderedDict[str, Tensor] = OrderedDict()
        self.dtype = np.dtype(dtype)

    def add(self, name: str, value: np.ndarray) -> Tensor:
        if name in self._params:
            raise KeyError(f"duplicate parameter name {name!r}")
        t = Tensor(np.asarray(value, dtype=self.dtype), requires_grad=True, name=name)
        self._params[name] = t
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __iter__(self) -> Iterator[str]:
        return iter(self._params)

    def __len__(self) -> int:
        return len(self._params)

    def items(self):
        return self._params.items()

    def values(self):
        return self._params.values()

    def num_elements(self, prefix: str = "") -> int:
        return sum(t.data.size for n, t in self._params.items() if n.startswith(prefix))

    def zero_grad(self) -> None:
        for t in self._params.values():
            t.grad = None

    def state(self) -> "OrderedDict[str, np.ndarray]":
        return OrderedDict((n, t.data.copy()) for n, t in self._params.items())

    def load_state(self, state: dict[str, np.ndarray], strict: bool = True) -> None:
        if strict and set(state) != set(self._params):
            missing = sorted(set(self._params) - set(state))
            extra = sorted(set(state) - set(self._params))
            raise KeyError(f"state mismatch: missing={missing} unexpected={extra}")
        for name, arr in state.items():
            if name not in self._params:
                continue
            t = self._params[name]
            if t.shape != arr.shape:
                raise ValueError(f"{name}: shape {arr.shape} does not match {t.shape}")
            t.data = np.asarray(arr, dtype=self.dtype).copy()

    def astype(self, dtype) -> None:
        """Cast every parameter in place (used for float64 gradient checks)."""
        self.dtype = np.dtype(dtype)
        for t in self._params.values():
            t.data = t.data.astype(self.dtype)
            t.grad = None

    def set_trainable(self, trainable: bool, prefix: str = "") -> None:
        for n, t in self._params.items():
            if n.startswith(prefix):
                t.requires_grad = trainable


# -- archive ---------------------------------------------------------------
# layout (little-endian):
#   magic "CSCK" | u32 version | u32 meta_len | meta utf-8 | u32 count
#   per entry: u16 name_len | name utf-8 | u8 ndim | u32 * ndim shape | f32 payload


def save_archive(path, arrays: dict[str, np.ndarray], meta: str = "") -> None:
    path = Path(path)
    meta_b = meta.encode("utf-8")
    chunks = [ARCHIVE_MAGIC, struct.pack("<II", ARCHIVE_VERSION, len(meta_b)), meta_b]
    chunks.append(struct.pack("<I", len(arrays)))
    for name, arr in arrays.items():
        nb = name.encode("utf-8")
        arr = np.ascontiguousarray(arr, dtype="<f4")
        chunks.append(struct.pack("<H", len(nb)) + nb)
        chunks.append(struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
        chunks.append(arr.tobytes())
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(b"".join(chunks))
    tmp.replace(path)


def load_archive(path) -> tuple["OrderedDict[str, np.ndarray]", str]:
    path = Path(path)
    buf = path.read_bytes()
    pos = 0

    def take(n: int) -> bytes:
        nonlocal pos
        if pos + n > len(buf):
            raise ArchiveError(f"{path}: truncated at byte offset {pos}")
        out = buf[pos : pos + n]
        pos += n
        return out

    if take(4) != ARCHIVE_MAGIC:
        raise ArchiveError(f"{path}: bad magic at byte offset 0")
    version, meta_len = struct.unpack("<II", take(8))
    if version != ARCHIVE_VERSION:
        raise ArchiveError(f"{path}: unsupported archive version {version}")
    meta = take(meta_len).decode("utf-8")
    (count,) = struct.unpack("<I", take(4))
    out: OrderedDict[str, np.ndarray] = OrderedDict()
    for _ in range(count):
        (nlen,) = struct.unpack("<H", take(2))
        name = take(nlen).decode("utf-8")
        (ndim,) = struct.unpack("<B", take(1))
        shape = struct.unpack(f"<{ndim}I", take(4 * ndim))
        n = int(np.prod(shape, dtype=np.int64))
        out[name] = np.frombuffer(take(4 * n), dtype="<f4").reshape(shape).astype(np.float32)
    if pos != len(buf):
        raise ArchiveError(f"{path}: trailing bytes at byte offset {pos}")
    return out, meta
