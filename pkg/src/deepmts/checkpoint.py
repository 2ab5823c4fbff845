"""Binary parameter checkpoint format.

Layout (all integers little-endian):

    magic   5 bytes  b"MTSW1"
    count   u32      number of records
    record  key_len:u16, key:utf-8, dtype:u8, rank:u8,
            extents:rank*u32, values:raw little-endian

dtype codes: 0=float32, 1=float64, 2=int64, 3=uint8. Round trips are
bit-exact: loading a saved file reproduces every tensor byte for byte.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np
import torch

MAGIC = b"MTSW1"

_DTYPE_CODES = {
    np.dtype("<f4"): 0,
    np.dtype("<f8"): 1,
    np.dtype("<i8"): 2,
    np.dtype("u1"): 3,
}
_CODE_DTYPES = {v: k for k, v in _DTYPE_CODES.items()}


class CheckpointError(ValueError):
    """Malformed or truncated checkpoint file."""


def _as_array(value) -> np.ndarray:
    if isinstance(value, torch.Tensor):
        value = value.detach().cpu().numpy()
    arr = np.asarray(value)
    arr = arr.astype(arr.dtype.newbyteorder("<"), copy=False)
    if arr.dtype not in _DTYPE_CODES:
        raise CheckpointError(f"unsupported checkpoint dtype {arr.dtype}")
    return np.ascontiguousarray(arr)


def save_state(path: str | Path, state: dict) -> None:
    """Write a named-tensor map; keys are stable layer paths."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", len(state)))
        for key, value in state.items():
            arr = _as_array(value)
            kb = key.encode("utf-8")
            fh.write(struct.pack("<H", len(kb)))
            fh.write(kb)
            fh.write(struct.pack("<BB", _DTYPE_CODES[arr.dtype], arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(arr.tobytes())


def load_state(path: str | Path) -> dict[str, np.ndarray]:
    """Read a checkpoint back into a key -> ndarray map."""
    raw = Path(path).read_bytes()
    if raw[:5] != MAGIC:
        raise CheckpointError(f"bad magic in {path}")
    off = 5
    (count,) = struct.unpack_from("<I", raw, off)
    off += 4
    state: dict[str, np.ndarray] = {}
    for _ in range(count):
        (klen,) = struct.unpack_from("<H", raw, off)
        off += 2
        key = raw[off:off + klen].decode("utf-8")
        off += klen
        code, rank = struct.unpack_from("<BB", raw, off)
        off += 2
        shape = struct.unpack_from(f"<{rank}I", raw, off)
        off += 4 * rank
        if code not in _CODE_DTYPES:
            raise CheckpointError(f"unknown dtype code {code} for {key!r}")
        dtype = _CODE_DTYPES[code]
        nbytes = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize
        if off + nbytes > len(raw):
            raise CheckpointError(f"truncated record for {key!r}")
        arr = np.frombuffer(raw[off:off + nbytes], dtype=dtype).reshape(shape)
        off += nbytes
        if key in state:
            raise CheckpointError(f"duplicate key {key!r}")
        state[key] = arr.copy()
    return state


def save_module(path: str | Path, module: torch.nn.Module) -> None:
    save_state(path, module.state_dict())


def load_module(path: str | Path, module: torch.nn.Module) -> None:
    """Load a checkpoint into a module; key sets must match exactly."""
    state = load_state(path)
    expected = module.state_dict()
    missing = expected.keys() - state.keys()
    extra = state.keys() - expected.keys()
    if missing or extra:
        raise CheckpointError(
            f"checkpoint does not match module (missing={sorted(missing)}, "
            f"extra={sorted(extra)})"
        )
    tensors = {k: torch.from_numpy(v).to(expected[k].dtype) for k, v in state.items()}
    module.load_state_dict(tensors)
