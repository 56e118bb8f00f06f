"""ONCK checkpoint container.

Layout (little-endian): magic ``ONCK``, version u32, config length u64 and
UTF-8 JSON config, tensor count u32, then per tensor a u16-length UTF-8 name,
ndim u32, one u64 per dim and the row-major float64 data.  Trainable
parameters come first in definition order, followed by fitted buffers
(normalization constants, POD basis, mean field) prefixed ``buffer.``.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .configs import build_model, config_from_json, model_config
from .errors import BadMagicError, CheckpointError, TruncatedError, VersionError
from .models import OperatorModel, PODSplice

MAGIC = b"ONCK"
VERSION = 1


def _named_tensors(model: OperatorModel) -> list[tuple[str, np.ndarray]]:
    out = [(name, t.data) for name, t in model.parameters().items()]
    out += [(f"buffer.{name}", arr) for name, arr in model.buffers().items() if arr is not None]
    return out


def save_checkpoint(model: OperatorModel, path: str | Path) -> None:
    tensors = _named_tensors(model)
    config = {"model": model_config(model), "tensors": [name for name, _ in tensors], "meta": model.meta}
    text = json.dumps(config, sort_keys=True).encode("utf-8")
    parts = [MAGIC, struct.pack("<I", VERSION), struct.pack("<Q", len(text)), text, struct.pack("<I", len(tensors))]
    for name, arr in tensors:
        raw = name.encode("utf-8")
        arr = np.ascontiguousarray(arr, dtype="<f8")
        parts.append(struct.pack("<H", len(raw)) + raw)
        parts.append(struct.pack("<I", arr.ndim) + struct.pack(f"<{arr.ndim}Q", *arr.shape))
        parts.append(arr.tobytes())
    Path(path).write_bytes(b"".join(parts))


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise TruncatedError(f"checkpoint truncated at byte {len(self.buf)} (need {self.pos + n})")
        out = self.buf[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        s = struct.Struct(fmt)
        return s.unpack(self.take(s.size))


def load_checkpoint(path: str | Path, expected_kind: str | None = None) -> OperatorModel:
    """Rebuild a model from an ONCK file, verifying every tensor against its config."""
    r = _Reader(Path(path).read_bytes())
    if r.buf[:4] != MAGIC:
        raise BadMagicError(f"not an ONCK checkpoint (magic {r.buf[:4]!r})")
    r.take(4)
    (version,) = r.unpack("<I")
    if version != VERSION:
        raise VersionError(f"unsupported checkpoint version {version} (expected {VERSION})")
    (length,) = r.unpack("<Q")
    try:
        config = json.loads(r.take(length).decode("utf-8"))
        arch = config_from_json(config["model"])
        names = list(config["tensors"])
    except (ValueError, KeyError, TypeError) as exc:
        raise CheckpointError(f"unreadable checkpoint config: {exc}") from None
    if expected_kind is not None and arch["kind"] != expected_kind:
        raise CheckpointError(f"checkpoint holds a '{arch['kind']}' model, expected '{expected_kind}'")
    (count,) = r.unpack("<I")
    if count != len(names):
        raise CheckpointError(f"tensor count field {count} disagrees with the {len(names)} tensors in the config")
    model = build_model(arch, seed=0)
    params = model.parameters()
    missing = [n for n in params if n not in names]
    if missing:
        raise CheckpointError(f"checkpoint lacks parameters {missing[:3]}")
    buffers: dict[str, np.ndarray] = {}
    for expected in names:
        (nlen,) = r.unpack("<H")
        name = r.take(nlen).decode("utf-8")
        if name != expected:
            raise CheckpointError(f"tensor '{name}' found where the config lists '{expected}'")
        (ndim,) = r.unpack("<I")
        shape = r.unpack(f"<{ndim}Q") if ndim else ()
        data = np.frombuffer(r.take(8 * int(np.prod(shape, dtype=np.int64))), dtype="<f8").reshape(shape)
        if name.startswith("buffer."):
            buffers[name[len("buffer.") :]] = data.astype(np.float64)
            continue
        if name not in params:
            raise CheckpointError(f"unexpected parameter '{name}' for a '{arch['kind']}' model")
        if params[name].shape != tuple(shape):
            raise CheckpointError(f"parameter '{name}' has shape {tuple(shape)}, architecture needs {params[name].shape}")
        params[name].data = data.astype(np.float64)
    if r.pos != len(r.buf):
        raise CheckpointError(f"{len(r.buf) - r.pos} trailing bytes after the last tensor")
    _restore_buffers(model, buffers)
    model.meta = dict(config.get("meta") or {})
    return model


def _restore_buffers(model: OperatorModel, buffers: dict[str, np.ndarray]) -> None:
    if "norm" in buffers:
        fs, fsc, ls, lsc = (float(v) for v in buffers["norm"])
        model.function_shift, model.function_scale, model.label_shift, model.label_scale = fs, fsc, ls, lsc
    if isinstance(model.merge, PODSplice):
        if "pod.mean" not in buffers or "pod.modes" not in buffers:
            raise CheckpointError("POD checkpoint lacks its mean/modes buffers")
        model.merge.mean = buffers["pod.mean"]
        model.merge.modes = buffers["pod.modes"]
    model.mean_field = buffers.get("mean_field")
