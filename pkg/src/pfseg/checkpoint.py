"""Binary checkpoint files.

Layout::

    b"PFSEG1\\0"                     magic (7 bytes)
    u32 little-endian               header length in bytes
    header                          canonical JSON (sorted keys, no spaces)
    tensor data                     raw little-endian IEEE-754, in header order
    u32 little-endian               CRC32 of header + tensor data

The header holds the format version, the model spec, the init seed, the
training state scalars (step, RNG state), and a tensor directory of
``{name, dtype, shape, offset, nbytes}`` entries sorted by name.  Offsets are
relative to the start of the tensor data.  Optimizer velocities are stored as
tensors named ``velocity/<param>``.
"""

from __future__ import annotations

import json
import struct
import zlib
from pathlib import Path
from typing import Dict, Optional, Tuple

import numpy as np

from pfseg.models import Model, ModelSpec, build_model
from pfseg.tensor import Tensor
from pfseg.train import TrainState

MAGIC = b"PFSEG1\x00"
FORMAT_VERSION = 1
_DTYPES = {"f32": np.dtype("<f4"), "f64": np.dtype("<f8")}
_CODES = {np.dtype(np.float32): "f32", np.dtype(np.float64): "f64"}


class CheckpointError(ValueError):
    pass


def _encode(model: Model, state: Optional[TrainState]) -> bytes:
    state = state or TrainState()
    tensors: Dict[str, np.ndarray] = {name: t.data for name, t in model.params.items()}
    for name, v in state.velocity.items():
        tensors[f"velocity/{name}"] = v
    directory, chunks, offset = [], [], 0
    for name in sorted(tensors):
        arr = tensors[name]
        code = _CODES.get(arr.dtype)
        if code is None:
            raise CheckpointError(f"{name}: unsupported dtype {arr.dtype}")
        raw = np.ascontiguousarray(arr, dtype=_DTYPES[code]).tobytes()
        directory.append({"name": name, "dtype": code, "shape": list(arr.shape), "offset": offset, "nbytes": len(raw)})
        chunks.append(raw)
        offset += len(raw)
    header = {
        "format_version": FORMAT_VERSION,
        "spec": model.spec.to_dict(),
        "seed": int(model.seed),
        "state": {"step": int(state.step), "rng_state": state.rng_state},
        "tensors": directory,
    }
    hbytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    body = hbytes + b"".join(chunks)
    return MAGIC + struct.pack("<I", len(hbytes)) + body + struct.pack("<I", zlib.crc32(body))


def save_checkpoint(model: Model, state: Optional[TrainState], path) -> None:
    Path(path).write_bytes(_encode(model, state))


def _decode(buf: bytes, source: str):
    if buf[: len(MAGIC)] != MAGIC:
        raise CheckpointError(f"{source}: bad magic, not a checkpoint file")
    pos = len(MAGIC)
    if len(buf) < pos + 8:
        raise CheckpointError(f"{source}: truncated file")
    (hlen,) = struct.unpack_from("<I", buf, pos)
    pos += 4
    body = buf[pos:-4]
    if len(body) < hlen:
        raise CheckpointError(f"{source}: truncated header")
    (crc,) = struct.unpack_from("<I", buf, len(buf) - 4)
    try:
        header = json.loads(body[:hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        if zlib.crc32(body) != crc:
            raise CheckpointError(f"{source}: checksum mismatch") from exc
        raise CheckpointError(f"{source}: malformed header") from exc
    data = body[hlen:]
    expected = sum(e["nbytes"] for e in header.get("tensors", []))
    if len(data) != expected:
        raise CheckpointError(f"{source}: truncated tensor data ({len(data)} of {expected} bytes)")
    if zlib.crc32(body) != crc:
        raise CheckpointError(f"{source}: checksum mismatch")
    if header.get("format_version") != FORMAT_VERSION:
        raise CheckpointError(f"{source}: unsupported format version {header.get('format_version')}")
    tensors = {}
    for e in header["tensors"]:
        dt = _DTYPES[e["dtype"]]
        arr = np.frombuffer(data, dtype=dt, count=e["nbytes"] // dt.itemsize, offset=e["offset"])
        tensors[e["name"]] = arr.reshape(e["shape"]).astype(dt.newbyteorder("="))
    return header, tensors


def load_checkpoint(path, spec: Optional[ModelSpec] = None) -> Tuple[Model, TrainState]:
    """Rebuild the model and training state stored in ``path``.

    If ``spec`` is given the stored tensors must match it name for name;
    otherwise the spec echoed in the file is used.
    """
    header, tensors = _decode(Path(path).read_bytes(), str(path))
    stored_spec = ModelSpec.from_dict(header["spec"])
    target = spec or stored_spec
    params = {k: v for k, v in tensors.items() if not k.startswith("velocity/")}
    dtype = next(iter(params.values())).dtype if params else np.float32
    model = build_model(target, header.get("seed", 0), dtype)
    extra = sorted(set(params) - set(model.params))
    missing = sorted(set(model.params) - set(params))
    if extra or missing:
        parts = []
        if extra:
            parts.append(f"extra tensors {extra}")
        if missing:
            parts.append(f"missing tensors {missing}")
        raise CheckpointError(
            f"{path}: checkpoint ({stored_spec.variant}) does not match spec ({target.variant}): " + "; ".join(parts)
        )
    for name, arr in params.items():
        t = model.params[name]
        if t.shape != arr.shape:
            raise CheckpointError(f"{path}: {name} has shape {arr.shape}, spec expects {t.shape}")
        model.params[name] = Tensor(arr, requires_grad=True, name=name)
    velocity = {k[len("velocity/") :]: v.copy() for k, v in tensors.items() if k.startswith("velocity/")}
    st = header.get("state", {})
    return model, TrainState(velocity=velocity, step=int(st.get("step", 0)), rng_state=st.get("rng_state"))
