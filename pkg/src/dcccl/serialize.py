"""Binary layouts for parameter payloads and model checkpoints.

Parameter payload (what travels over the simulated channel)::

    magic   4 bytes   b"DCCM"
    version u32       (1)
    digest  32 bytes  sha256 of the canonical JSON spec of the parameter set
    count   u32
    per parameter: ndim u32, dims u32 * ndim, float64 little-endian values

Checkpoint file::

    magic   4 bytes   b"DCCK"
    version u32       (1)
    digest  32 bytes  sha256 of the JSON spec block
    speclen u32, spec JSON (utf-8)
    nparts  u32
    per part: namelen u16, name (utf-8), payload_len u64, parameter payload
"""

from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path
from typing import Sequence

import numpy as np

from .model import DecoupledModel, LayerSpec, Sequential

PARAM_MAGIC = b"DCCM"
CKPT_MAGIC = b"DCCK"
VERSION = 1


class CheckpointError(ValueError):
    pass


def spec_digest(spec: dict) -> bytes:
    return hashlib.sha256(json.dumps(spec, sort_keys=True, separators=(",", ":")).encode()).digest()


def serialize_params(arrays: Sequence[np.ndarray], digest: bytes = b"\0" * 32) -> bytes:
    if len(digest) != 32:
        raise ValueError("digest must be 32 bytes")
    chunks = [PARAM_MAGIC, struct.pack("<I", VERSION), digest, struct.pack("<I", len(arrays))]
    for a in arrays:
        a = np.asarray(a, dtype="<f8")
        chunks.append(struct.pack(f"<I{a.ndim}I", a.ndim, *a.shape))
        chunks.append(a.tobytes())
    return b"".join(chunks)


def deserialize_params(buf: bytes) -> tuple[bytes, list[np.ndarray]]:
    if len(buf) < 44 or buf[:4] != PARAM_MAGIC:
        raise CheckpointError("not a parameter payload")
    (version,) = struct.unpack_from("<I", buf, 4)
    if version != VERSION:
        raise CheckpointError(f"unsupported payload version {version}")
    digest = buf[8:40]
    (count,) = struct.unpack_from("<I", buf, 40)
    off, out = 44, []
    for _ in range(count):
        try:
            (ndim,) = struct.unpack_from("<I", buf, off)
            dims = struct.unpack_from(f"<{ndim}I", buf, off + 4)
        except struct.error as e:
            raise CheckpointError("truncated parameter payload") from e
        off += 4 + 4 * ndim
        n = int(np.prod(dims)) if ndim else 1
        if off + 8 * n > len(buf):
            raise CheckpointError("truncated parameter payload")
        out.append(np.frombuffer(buf, dtype="<f8", count=n, offset=off).reshape(dims).astype(np.float64))
        off += 8 * n
    if off != len(buf):
        raise CheckpointError("trailing bytes in parameter payload")
    return digest, out


def model_payload(model: Sequential) -> bytes:
    """Serialized parameters of one chain; its length is the message size on the channel."""
    return serialize_params([p.data for p in model.parameters()], spec_digest(model.to_dict()))


def models_payload(models: Sequence[Sequential]) -> bytes:
    """Several chains shipped as one message (e.g. the whole decoupled model)."""
    spec = {"parts": [m.to_dict() for m in models]}
    return serialize_params([p.data for m in models for p in m.parameters()], spec_digest(spec))


# ---------------------------------------------------------------------------
# checkpoints


def _model_spec_dict(model) -> tuple[dict, dict]:
    if isinstance(model, DecoupledModel):
        return model.to_dict(), model.parts()
    return {"type": "model", "chain": model.to_dict()}, {"model": model}


def save_checkpoint(model, path) -> int:
    spec, parts = _model_spec_dict(model)
    spec_bytes = json.dumps(spec, sort_keys=True, separators=(",", ":")).encode()
    chunks = [CKPT_MAGIC, struct.pack("<I", VERSION), spec_digest(spec),
              struct.pack("<I", len(spec_bytes)), spec_bytes, struct.pack("<I", len(parts))]
    for name, m in parts.items():
        payload = model_payload(m)
        nb = name.encode()
        chunks += [struct.pack("<H", len(nb)), nb, struct.pack("<Q", len(payload)), payload]
    data = b"".join(chunks)
    Path(path).write_bytes(data)
    return len(data)


def read_checkpoint(path) -> tuple[dict, dict]:
    """Return (spec dict, {part name: list of arrays})."""
    buf = Path(path).read_bytes()
    if len(buf) < 44 or buf[:4] != CKPT_MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file")
    (version,) = struct.unpack_from("<I", buf, 4)
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    digest = buf[8:40]
    (slen,) = struct.unpack_from("<I", buf, 40)
    spec_bytes = buf[44:44 + slen]
    if len(spec_bytes) != slen:
        raise CheckpointError(f"{path}: truncated spec block")
    spec = json.loads(spec_bytes)
    if spec_digest(spec) != digest:
        raise CheckpointError(f"{path}: spec digest mismatch")
    off = 44 + slen
    (nparts,) = struct.unpack_from("<I", buf, off)
    off += 4
    parts = {}
    for _ in range(nparts):
        (nl,) = struct.unpack_from("<H", buf, off)
        name = buf[off + 2:off + 2 + nl].decode()
        off += 2 + nl
        (plen,) = struct.unpack_from("<Q", buf, off)
        off += 8
        if off + plen > len(buf):
            raise CheckpointError(f"{path}: truncated part {name!r}")
        _, arrays = deserialize_params(buf[off:off + plen])
        parts[name] = arrays
        off += plen
    return spec, parts


def _chain_from_dict(d: dict, name: str) -> Sequential:
    return Sequential([LayerSpec(**l) for l in d["layers"]], tuple(d["input_shape"]), name=name)


def load_checkpoint(path):
    """Rebuild a :class:`Sequential` or :class:`DecoupledModel` from a checkpoint."""
    spec, arrays = read_checkpoint(path)
    if spec["type"] == "model":
        m = _chain_from_dict(spec["chain"], "base")
        m.load_state(arrays["model"])
        return m
    chains = {k: _chain_from_dict(v, k) for k, v in spec["parts"].items()}
    for k, m in chains.items():
        m.load_state(arrays[k])
    dm = DecoupledModel(chains["encoder"], chains.get("cloud"), chains["co"], chains["control"],
                        spec["num_classes"], spec["heterogeneous"])
    dm.stage = spec["stage"]
    return dm
