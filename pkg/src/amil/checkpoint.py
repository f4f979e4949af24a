"""Checkpoint files: a text manifest plus a little-endian float32 payload.

``<stem>.manifest``::

    amil-checkpoint 1
    meta pooling_mode attention
    meta patch_size 28
    tensor extractor.conv1_w 20x3x5x5 0
    ...

Each ``tensor`` line gives name, shape and byte offset into ``<stem>.bin``.
Tensors are stored in manifest order with no padding.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np

from .errors import CheckpointError
from .model import AmilModel, AttentionParams, ClassifierParams, FeatureExtractorParams, extractor_geometry
from .tensor import Tensor

MAGIC = "amil-checkpoint 1"
PAYLOAD_DTYPE = np.dtype("<f4")


def _paths(stem) -> tuple[Path, Path]:
    stem = Path(stem)
    if stem.suffix in (".manifest", ".bin"):
        stem = stem.with_suffix("")
    return stem.with_name(stem.name + ".manifest"), stem.with_name(stem.name + ".bin")


def write_tensors(stem, tensors: dict[str, np.ndarray], meta: dict[str, object] | None = None) -> Path:
    """Write named arrays; returns the manifest path."""
    manifest_path, bin_path = _paths(stem)
    lines = [MAGIC]
    for key, value in (meta or {}).items():
        if any(ch.isspace() for ch in f"{key}{value}"):
            raise CheckpointError(f"meta entries may not contain whitespace: {key}={value!r}")
        lines.append(f"meta {key} {value}")
    offset = 0
    chunks = []
    for name, arr in tensors.items():
        data = np.ascontiguousarray(arr, dtype=PAYLOAD_DTYPE)
        shape = "x".join(str(d) for d in data.shape) or "scalar"
        lines.append(f"tensor {name} {shape} {offset}")
        chunks.append(data.tobytes())
        offset += data.nbytes
    bin_path.write_bytes(b"".join(chunks))
    manifest_path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return manifest_path


def read_tensors(stem) -> tuple[dict[str, np.ndarray], dict[str, str]]:
    manifest_path, bin_path = _paths(stem)
    try:
        lines = manifest_path.read_text(encoding="utf-8").splitlines()
        payload = bin_path.read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {manifest_path.with_suffix('')}: {exc}") from exc
    if not lines or lines[0].strip() != MAGIC:
        raise CheckpointError(f"{manifest_path}: not a checkpoint manifest")
    meta: dict[str, str] = {}
    tensors: dict[str, np.ndarray] = {}
    expected = 0
    for lineno, line in enumerate(lines[1:], start=2):
        parts = line.split()
        if not parts:
            continue
        if parts[0] == "meta" and len(parts) == 3:
            meta[parts[1]] = parts[2]
        elif parts[0] == "tensor" and len(parts) == 4:
            name, shape_s, off_s = parts[1:]
            shape = () if shape_s == "scalar" else tuple(int(d) for d in shape_s.split("x"))
            offset = int(off_s)
            if offset != expected:
                raise CheckpointError(f"{manifest_path}:{lineno}: offset {offset} breaks manifest order (expected {expected})")
            count = int(np.prod(shape, dtype=np.int64))
            end = offset + count * PAYLOAD_DTYPE.itemsize
            if end > len(payload):
                raise CheckpointError(f"{manifest_path}:{lineno}: {name} runs past the end of {bin_path.name}")
            tensors[name] = np.frombuffer(payload, dtype=PAYLOAD_DTYPE, count=count, offset=offset).reshape(shape).astype(np.float32)
            expected = end
        else:
            raise CheckpointError(f"{manifest_path}:{lineno}: unparsable line {line!r}")
    if expected != len(payload):
        raise CheckpointError(f"{bin_path}: {len(payload) - expected} trailing bytes not described by the manifest")
    return tensors, meta


def save_model(stem, model: AmilModel, extra: dict[str, np.ndarray] | None = None, meta: dict | None = None) -> Path:
    """Save parameters (as float32), model config and optional extra tensors."""
    tensors = {name: p.data for name, p in model.named_parameters()}
    for name, arr in (extra or {}).items():
        if name in tensors:
            raise CheckpointError(f"extra tensor {name!r} collides with a parameter")
        tensors[name] = arr
    return write_tensors(stem, tensors, {**model.config(), **(meta or {})})


def load_model(stem, dtype=np.float32) -> tuple[AmilModel, dict[str, np.ndarray], dict[str, str]]:
    """Rebuild a model; returns ``(model, other_tensors, meta)``."""
    tensors, meta = read_tensors(stem)
    try:
        pooling = meta["pooling_mode"]
        patch_size = int(meta["patch_size"])
    except KeyError as exc:
        raise CheckpointError(f"checkpoint {stem} lacks model metadata {exc}") from exc

    def take(group: str, cls):
        fields = {}
        for name in cls.__dataclass_fields__:
            key = f"{group}.{name}"
            if key not in tensors:
                raise CheckpointError(f"checkpoint {stem} is missing tensor {key}")
            fields[name] = Tensor(tensors.pop(key), requires_grad=True, dtype=dtype)
        return cls(**fields)

    model = AmilModel(
        extractor=take("extractor", FeatureExtractorParams),
        attention=take("attention", AttentionParams),
        head=take("head", ClassifierParams),
        pooling_mode=pooling,
        patch_size=patch_size,
    )
    e = model.extractor
    flat = extractor_geometry(patch_size, e.conv1_w.shape[0], e.conv2_w.shape[0])[-1][0]
    if e.fc_w.shape[1] != flat or model.head.weight.shape[1] != e.fc_w.shape[0]:
        raise CheckpointError(f"checkpoint {stem}: tensor shapes do not fit patch size {patch_size}")
    return model, tensors, meta
