"""IPCK checkpoint container: named float32 arrays, little-endian.

Layout: b"IPCK", u32 version, u32 entry count, then per entry a u16 name
length, UTF-8 name, u8 rank, u32 dims and raw float32 data. The last entry
is the scalar "adam_step".
"""

from __future__ import annotations

import os
import struct

import numpy as np

from ipcnav.predictor.types import PredictorParams

MAGIC = b"IPCK"
VERSION = 1


class CheckpointError(ValueError):
    pass


def encode_entries(entries: dict[str, np.ndarray]) -> bytes:
    parts = [MAGIC, struct.pack("<II", VERSION, len(entries))]
    for name, arr in entries.items():
        a = np.asarray(arr, dtype="<f4")
        raw = name.encode("utf-8")
        parts.append(struct.pack("<H", len(raw)) + raw + struct.pack("<B", a.ndim))
        parts.append(struct.pack(f"<{a.ndim}I", *a.shape))
        parts.append(a.tobytes())
    return b"".join(parts)


def decode_entries(data: bytes) -> dict[str, np.ndarray]:
    if data[:4] != MAGIC:
        raise CheckpointError("bad magic")
    version, n = struct.unpack_from("<II", data, 4)
    if version != VERSION:
        raise CheckpointError(f"unsupported version {version}")
    off = 12
    out = {}
    try:
        for _ in range(n):
            (ln,) = struct.unpack_from("<H", data, off)
            off += 2
            name = data[off : off + ln].decode("utf-8")
            off += ln
            (rank,) = struct.unpack_from("<B", data, off)
            off += 1
            dims = struct.unpack_from(f"<{rank}I", data, off)
            off += 4 * rank
            count = int(np.prod(dims)) if rank else 1
            arr = np.frombuffer(data, dtype="<f4", count=count, offset=off).reshape(dims)
            off += 4 * count
            out[name] = arr.astype(np.float32)
    except (struct.error, ValueError) as exc:
        raise CheckpointError(f"truncated checkpoint: {exc}") from exc
    if off != len(data):
        raise CheckpointError("trailing bytes after last entry")
    return out


def params_entries(params: PredictorParams, prefix: str = "") -> dict[str, np.ndarray]:
    e = {}
    for k, v in params.arrays.items():
        e[prefix + k] = v
    for k, v in params.adam_m.items():
        e[prefix + "adam_m/" + k] = v
    for k, v in params.adam_v.items():
        e[prefix + "adam_v/" + k] = v
    return e


def params_from_entries(entries: dict[str, np.ndarray], prefix: str = "") -> PredictorParams:
    arrays, m, v = {}, {}, {}
    for name, arr in entries.items():
        if not name.startswith(prefix):
            continue
        key = name[len(prefix) :]
        if key.startswith("guidance/") or key.endswith("adam_step"):
            continue
        if key.startswith("adam_m/"):
            m[key[7:]] = arr
        elif key.startswith("adam_v/"):
            v[key[7:]] = arr
        else:
            arrays[key] = arr
    step = entries.get(prefix + "adam_step")
    return PredictorParams(arrays, m, v, int(step) if step is not None else 0)


def save_checkpoint(path, predictor: PredictorParams, guidance: PredictorParams | None = None) -> None:
    entries = params_entries(predictor)
    if guidance is not None:
        entries.update(params_entries(guidance, "guidance/"))
        entries["guidance/adam_step"] = np.array(guidance.step, np.float32)
    entries["adam_step"] = np.array(predictor.step, np.float32)
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as f:
        f.write(encode_entries(entries))
    os.replace(tmp, path)


def load_checkpoint(path) -> tuple[PredictorParams, PredictorParams | None]:
    with open(path, "rb") as f:
        entries = decode_entries(f.read())
    if "adam_step" not in entries:
        raise CheckpointError("missing adam_step record")
    predictor = params_from_entries(entries)
    guidance = None
    if any(k.startswith("guidance/") for k in entries):
        guidance = params_from_entries(entries, "guidance/")
    return predictor, guidance
