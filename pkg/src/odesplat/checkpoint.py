"""Versioned binary container for named arrays, Adam states and JSON metadata.

Byte layout (all integers and floats little-endian)::

    b"ODSP"                      magic
    u32   version (= 1)
    u32   metadata length M, then M bytes of UTF-8 JSON
    u32   array count K, then K array records:
            u16 name length, name (UTF-8)
            u8  dtype code (0 = float64, 1 = int64)
            u8  ndim, then ndim x u64 dimensions
            row-major element data (8 bytes per element)
    u32   Adam state count S, then S records:
            u16 name length, name (UTF-8)
            u64 step_count
            f64 lr, beta1, beta2, eps
          moments are stored in the array section as
          "adam/<state>/m/<param>" and "adam/<state>/v/<param>"
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .autodiff import AdamState, ContractError

MAGIC = b"ODSP"
VERSION = 1
_DTYPES = {0: "<f8", 1: "<i8"}


def _pack_name(name: str) -> bytes:
    raw = name.encode("utf-8")
    return struct.pack("<H", len(raw)) + raw


def dumps(arrays: dict[str, np.ndarray], adam: dict[str, AdamState] | None = None, meta: dict | None = None) -> bytes:
    adam = adam or {}
    arrays = dict(arrays)
    for sname, st in adam.items():
        for pname, m in st.first_moment.items():
            arrays[f"adam/{sname}/m/{pname}"] = m
            arrays[f"adam/{sname}/v/{pname}"] = st.second_moment[pname]
    out = [MAGIC, struct.pack("<I", VERSION)]
    js = json.dumps(meta or {}, sort_keys=True).encode("utf-8")
    out += [struct.pack("<I", len(js)), js, struct.pack("<I", len(arrays))]
    for name in sorted(arrays):
        arr = np.asarray(arrays[name])
        code = 1 if np.issubdtype(arr.dtype, np.integer) else 0
        out.append(_pack_name(name))
        out.append(struct.pack("<BB", code, arr.ndim))
        out.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        out.append(np.ascontiguousarray(arr, dtype=_DTYPES[code]).tobytes())
    out.append(struct.pack("<I", len(adam)))
    for sname in sorted(adam):
        st = adam[sname]
        out.append(_pack_name(sname))
        out.append(struct.pack("<Q4d", st.step_count, st.lr, st.beta1, st.beta2, st.eps))
    return b"".join(out)


def loads(data: bytes) -> tuple[dict[str, np.ndarray], dict[str, AdamState], dict]:
    if data[:4] != MAGIC:
        raise ContractError("not a checkpoint blob")
    (version,) = struct.unpack_from("<I", data, 4)
    if version != VERSION:
        raise ContractError(f"unsupported checkpoint version {version}")
    off = 8

    def name():
        nonlocal off
        (n,) = struct.unpack_from("<H", data, off)
        off += 2
        s = data[off : off + n].decode("utf-8")
        off += n
        return s

    (mlen,) = struct.unpack_from("<I", data, off)
    off += 4
    meta = json.loads(data[off : off + mlen].decode("utf-8"))
    off += mlen
    (k,) = struct.unpack_from("<I", data, off)
    off += 4
    arrays = {}
    for _ in range(k):
        nm = name()
        code, ndim = struct.unpack_from("<BB", data, off)
        off += 2
        shape = struct.unpack_from(f"<{ndim}Q", data, off)
        off += 8 * ndim
        count = int(np.prod(shape)) if ndim else 1
        arr = np.frombuffer(data, dtype=_DTYPES[code], count=count, offset=off).reshape(shape)
        off += 8 * count
        arrays[nm] = arr.astype(np.float64 if code == 0 else np.int64)
    (s,) = struct.unpack_from("<I", data, off)
    off += 4
    adam = {}
    for _ in range(s):
        nm = name()
        step, lr, b1, b2, eps = struct.unpack_from("<Q4d", data, off)
        off += struct.calcsize("<Q4d")
        st = AdamState(lr=lr, beta1=b1, beta2=b2, eps=eps, step_count=step)
        prefix = f"adam/{nm}/"
        for key in [a for a in arrays if a.startswith(prefix + "m/")]:
            pname = key[len(prefix) + 2 :]
            st.first_moment[pname] = arrays.pop(key)
            st.second_moment[pname] = arrays.pop(f"{prefix}v/{pname}")
        adam[nm] = st
    return arrays, adam, meta


def save(path, arrays, adam=None, meta=None) -> None:
    Path(path).write_bytes(dumps(arrays, adam, meta))


def load(path):
    p = Path(path)
    if not p.exists():
        raise FileNotFoundError(f"checkpoint not found: {p}")
    return loads(p.read_bytes())
