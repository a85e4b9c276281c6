"""Binary tensor container and full training checkpoints.

Container layout (little-endian throughout)::

    magic "SAMO" | version u32 | entry count u32
    per entry: name_len u16 | name utf-8 | dtype u8 (0=f64, 1=f32)
               | rank u8 | dims u32[rank] | row-major payload
    footer: crc32 u32 over everything after the 12-byte header

The crc footer is an integrity extension; base readers that stop after the
declared entries never see it. Non-tensor state (config text, RNG state)
rides along as byte-valued f64 arrays under ``meta.*`` names.
"""

from __future__ import annotations

import json
import struct
import zlib
from dataclasses import dataclass

import numpy as np

from ..numkernel import Tensor

MAGIC = b"SAMO"
VERSION = 1

_DTYPES = {0: np.dtype("<f8"), 1: np.dtype("<f4")}
_CODES = {np.dtype("float64"): 0, np.dtype("float32"): 1}


class CheckpointError(ValueError):
    pass


def write_container(path: str, tensors: dict) -> None:
    body = bytearray()
    body += struct.pack("<I", len(tensors))
    for name in sorted(tensors):
        arr = tensors[name]
        if isinstance(arr, Tensor):
            arr = arr.data
        arr = np.ascontiguousarray(arr)
        if arr.dtype not in _CODES:
            raise CheckpointError(f"unsupported dtype {arr.dtype} for {name!r}")
        raw = name.encode("utf-8")
        body += struct.pack("<H", len(raw)) + raw
        body += struct.pack("<BB", _CODES[arr.dtype], arr.ndim)
        body += struct.pack(f"<{arr.ndim}I", *arr.shape)
        body += arr.astype(arr.dtype.newbyteorder("<"), copy=False).tobytes()
    blob = MAGIC + struct.pack("<I", VERSION) + bytes(body)
    blob += struct.pack("<I", zlib.crc32(bytes(body)) & 0xFFFFFFFF)
    with open(path, "wb") as fh:
        fh.write(blob)


def read_container(path: str) -> dict[str, np.ndarray]:
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != MAGIC:
        raise CheckpointError(f"bad magic {blob[:4]!r}, expected {MAGIC!r}")
    (version,) = struct.unpack_from("<I", blob, 4)
    if version != VERSION:
        raise CheckpointError(f"version mismatch: file {version}, reader {VERSION}")
    body = blob[8:-4]
    (crc_stored,) = struct.unpack_from("<I", blob, len(blob) - 4)
    if zlib.crc32(body) & 0xFFFFFFFF != crc_stored:
        raise CheckpointError("integrity error: payload crc mismatch")

    out: dict[str, np.ndarray] = {}
    off = 0

    def need(n: int) -> None:
        if off + n > len(body):
            raise CheckpointError(
                f"truncated payload: need {n} bytes at offset {off + 8}")

    need(4)
    (count,) = struct.unpack_from("<I", body, off)
    off += 4
    for _ in range(count):
        need(2)
        (name_len,) = struct.unpack_from("<H", body, off)
        off += 2
        need(name_len)
        name = body[off:off + name_len].decode("utf-8")
        off += name_len
        need(2)
        code, rank = struct.unpack_from("<BB", body, off)
        off += 2
        if code not in _DTYPES:
            raise CheckpointError(f"unknown dtype code {code} for {name!r}")
        need(4 * rank)
        dims = struct.unpack_from(f"<{rank}I", body, off)
        off += 4 * rank
        dt = _DTYPES[code]
        n_elem = int(np.prod(dims, dtype=np.int64)) if rank else 1
        nbytes = n_elem * dt.itemsize
        need(nbytes)
        arr = np.frombuffer(body, dtype=dt, count=n_elem, offset=off)
        out[name] = arr.astype(dt.newbyteorder("="), copy=True).reshape(dims)
        off += nbytes
    return out


def _bytes_to_array(data: bytes) -> np.ndarray:
    return np.frombuffer(data, dtype=np.uint8).astype(np.float64)


def _array_to_bytes(arr: np.ndarray) -> bytes:
    return arr.astype(np.uint8).tobytes()


@dataclass
class Checkpoint:
    tensors: dict[str, np.ndarray]
    config_text: str
    step: int
    rng_state: dict | None
    moments: dict[str, np.ndarray]  # adam.m.* / adam.v.* stripped of prefix


def save_checkpoint(path: str, params: dict, config_text: str, step: int = 0,
                    rng: np.random.Generator | None = None,
                    moments: dict | None = None) -> None:
    entries: dict = dict(params)
    entries["meta.config_text"] = _bytes_to_array(config_text.encode("utf-8"))
    entries["meta.step"] = np.asarray(float(step))
    if rng is not None:
        state_json = json.dumps(rng.bit_generator.state, sort_keys=True)
        entries["meta.rng_state"] = _bytes_to_array(state_json.encode("utf-8"))
    if moments:
        for name, pair in moments.items():
            entries[f"adam.m.{name}"] = pair[0]
            entries[f"adam.v.{name}"] = pair[1]
    write_container(path, entries)


def load_checkpoint(path: str) -> Checkpoint:
    raw = read_container(path)
    config_text = ""
    step = 0
    rng_state = None
    tensors: dict[str, np.ndarray] = {}
    m: dict[str, np.ndarray] = {}
    v: dict[str, np.ndarray] = {}
    for name, arr in raw.items():
        if name == "meta.config_text":
            config_text = _array_to_bytes(arr).decode("utf-8")
        elif name == "meta.step":
            step = int(arr)
        elif name == "meta.rng_state":
            rng_state = json.loads(_array_to_bytes(arr).decode("utf-8"))
        elif name.startswith("adam.m."):
            m[name[len("adam.m."):]] = arr
        elif name.startswith("adam.v."):
            v[name[len("adam.v."):]] = arr
        else:
            tensors[name] = arr
    moments = {name: (m[name], v[name]) for name in m if name in v}
    return Checkpoint(tensors=tensors, config_text=config_text, step=step,
                      rng_state=rng_state, moments=moments)


def restored_rng(state: dict) -> np.random.Generator:
    rng = np.random.default_rng(0)
    rng.bit_generator.state = state
    return rng
