"""Self-describing array container.

Layout: magic ``GST1``, little-endian uint64 manifest length, UTF-8 JSON
manifest, then the raw little-endian array payloads in manifest order. The
manifest lists ``name``, ``shape``, ``dtype``, ``offset`` and ``nbytes`` for
every array plus a free-form ``meta`` object.
"""
from __future__ import annotations

import json
import struct
from pathlib import Path
from typing import Dict, Mapping, Tuple, Union

import numpy as np

from ..errors import FormatError
from .optim import ParamStore

MAGIC = b"GST1"
_DTYPES = {"f4": "<f4", "f8": "<f8", "i8": "<i8", "i4": "<i4", "u1": "|u1", "b1": "|b1"}


def _code(dtype: np.dtype) -> str:
    code = np.dtype(dtype).str[1:]
    if code not in _DTYPES:
        raise TypeError(f"unsupported dtype {dtype}")
    return code


def pack(arrays: Mapping[str, np.ndarray], meta: Mapping) -> bytes:
    entries = []
    payloads = []
    offset = 0
    for name, arr in arrays.items():
        arr = np.asarray(arr)
        code = _code(arr.dtype)
        raw = np.ascontiguousarray(arr, dtype=_DTYPES[code]).tobytes()
        entries.append({"name": name, "shape": list(arr.shape), "dtype": code, "offset": offset, "nbytes": len(raw)})
        payloads.append(raw)
        offset += len(raw)
    manifest = json.dumps({"arrays": entries, "meta": meta}, sort_keys=True, separators=(",", ":")).encode()
    return MAGIC + struct.pack("<Q", len(manifest)) + manifest + b"".join(payloads)


def unpack(raw: bytes, source: str = "<bytes>") -> Tuple[Dict[str, np.ndarray], dict]:
    if not raw.startswith(MAGIC) or len(raw) < 12:
        raise FormatError(f"{source}: not a GST1 container")
    (mlen,) = struct.unpack("<Q", raw[4:12])
    try:
        manifest = json.loads(raw[12 : 12 + mlen].decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"{source}: corrupt manifest") from exc
    base = 12 + mlen
    arrays = {}
    for e in manifest["arrays"]:
        start = base + e["offset"]
        chunk = raw[start : start + e["nbytes"]]
        if len(chunk) != e["nbytes"]:
            raise FormatError(f"{source}: truncated payload for {e['name']}")
        dt = np.dtype(_DTYPES[e["dtype"]])
        arrays[e["name"]] = np.frombuffer(chunk, dtype=dt).reshape(e["shape"]).astype(dt.newbyteorder("="))
    return arrays, manifest.get("meta", {})


def save_container(path: Union[str, Path], arrays: Mapping[str, np.ndarray], meta: Mapping) -> None:
    Path(path).write_bytes(pack(arrays, meta))


def load_container(path: Union[str, Path]) -> Tuple[Dict[str, np.ndarray], dict]:
    return unpack(Path(path).read_bytes(), str(path))


def store_arrays(store: ParamStore) -> Dict[str, np.ndarray]:
    arrays = {}
    for name in store.params:
        arrays[f"param/{name}"] = store.params[name]
        arrays[f"adam_m/{name}"] = store.m[name]
        arrays[f"adam_v/{name}"] = store.v[name]
    return arrays


def store_from_arrays(arrays: Mapping[str, np.ndarray], step: int) -> ParamStore:
    names = [k[len("param/"):] for k in arrays if k.startswith("param/")]
    return ParamStore(
        {n: arrays[f"param/{n}"].copy() for n in names},
        {n: arrays[f"adam_m/{n}"].copy() for n in names},
        {n: arrays[f"adam_v/{n}"].copy() for n in names},
        step,
    )


def save_checkpoint(path, store: ParamStore, meta: Mapping) -> None:
    meta = dict(meta)
    meta["step"] = store.step
    save_container(path, store_arrays(store), meta)


def load_checkpoint(path) -> Tuple[ParamStore, dict]:
    arrays, meta = load_container(path)
    if "step" not in meta:
        raise FormatError(f"{path}: checkpoint manifest lacks a step counter")
    return store_from_arrays(arrays, int(meta["step"])), meta
