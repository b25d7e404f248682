"""Versioned binary checkpoints.

Layout: magic ``CLSTL``, one format-version byte, a u32 length-prefixed JSON
metadata block (model kind, config, named tensor directory with shapes and
byte offsets), the concatenated little-endian float32 weight blobs, and a
trailing u32 CRC32 of everything before it. The format is deliberately
self-describing so non-Python readers can parse it.
"""

from __future__ import annotations

import hashlib
import json
import os
import struct
import zlib
from pathlib import Path

import numpy as np
import torch

from .errors import CheckpointFormatError, IntegrityError, UnsupportedVersionError, ValidationError
from .model import (
    Backbone,
    ClassifierModel,
    DenseHead,
    FeaturizerConfig,
    FeaturizerModel,
    ProjectionHead,
)

MAGIC = b"CLSTL"
FORMAT_VERSION = 1


def _named_tensors(model: FeaturizerModel | ClassifierModel) -> list[tuple[str, torch.Tensor]]:
    named: list[tuple[str, torch.Tensor]] = []
    if isinstance(model, ClassifierModel):
        feat = model.featurizer
    else:
        feat = model
    for key, tensor in feat.backbone.state_dict().items():
        named.append((f"backbone.{key}", tensor))
    if feat.projection is not None:
        for key, tensor in feat.projection.state_dict().items():
            named.append((f"projection.{key}", tensor))
    if isinstance(model, ClassifierModel):
        for key, tensor in model.head.state_dict().items():
            named.append((f"head.{key}", tensor))
    return named


def _config_to_dict(config: FeaturizerConfig) -> dict:
    return {
        "input_size": list(config.input_size),
        "conv_blocks": [list(b) for b in config.conv_blocks],
        "embedding_dim": config.embedding_dim,
        "projection_dim": config.projection_dim,
        "param_budget": config.param_budget,
    }


def _config_from_dict(d: dict) -> FeaturizerConfig:
    return FeaturizerConfig(
        input_size=tuple(d["input_size"]),
        conv_blocks=tuple(tuple(b) for b in d["conv_blocks"]),
        embedding_dim=d["embedding_dim"],
        projection_dim=d["projection_dim"],
        param_budget=d["param_budget"],
    )


def save_checkpoint(model: FeaturizerModel | ClassifierModel, path: str | Path) -> Path:
    """Write the model to ``path`` atomically; round-trips bit-identically."""
    path = Path(path)
    named = _named_tensors(model)

    blobs = []
    directory = []
    offset = 0
    for name, tensor in named:
        arr = tensor.detach().numpy().astype("<f4", copy=False)
        raw = arr.tobytes()
        directory.append({"name": name, "shape": list(arr.shape), "offset": offset, "nbytes": len(raw)})
        blobs.append(raw)
        offset += len(raw)

    if isinstance(model, ClassifierModel):
        feat = model.featurizer
        head_meta = {"num_classes": model.num_classes, "hidden_dim": model.hidden_dim}
        kind = "classifier"
    else:
        feat = model
        head_meta = None
        kind = "featurizer"

    meta = {
        "kind": kind,
        "config": _config_to_dict(feat.config),
        "frozen": feat.frozen,
        "has_projection": feat.projection is not None,
        "head": head_meta,
        "tensors": directory,
    }
    meta_bytes = json.dumps(meta, sort_keys=True, separators=(",", ":")).encode("utf-8")

    body = MAGIC + struct.pack("<B", FORMAT_VERSION) + struct.pack("<I", len(meta_bytes)) + meta_bytes
    body += b"".join(blobs)
    body += struct.pack("<I", zlib.crc32(body) & 0xFFFFFFFF)

    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(body)
    os.replace(tmp, path)
    return path


def load_checkpoint(path: str | Path) -> FeaturizerModel | ClassifierModel:
    """Read a checkpoint, verifying magic, version, and checksum."""
    data = Path(path).read_bytes()
    if len(data) < len(MAGIC) + 1 + 4 + 4:
        raise IntegrityError(f"checkpoint truncated: {len(data)} bytes")
    if data[: len(MAGIC)] != MAGIC:
        raise CheckpointFormatError("bad magic; not a celestial checkpoint")
    version = data[len(MAGIC)]
    if version != FORMAT_VERSION:
        raise UnsupportedVersionError(f"checkpoint format version {version} unsupported (reader supports {FORMAT_VERSION})")

    (stored_crc,) = struct.unpack("<I", data[-4:])
    if zlib.crc32(data[:-4]) & 0xFFFFFFFF != stored_crc:
        raise IntegrityError("checksum mismatch; checkpoint corrupted")

    pos = len(MAGIC) + 1
    (meta_len,) = struct.unpack("<I", data[pos : pos + 4])
    pos += 4
    try:
        meta = json.loads(data[pos : pos + meta_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointFormatError(f"bad metadata block: {exc}") from None
    blob_start = pos + meta_len

    config = _config_from_dict(meta["config"])
    backbone = Backbone(config)
    projection = ProjectionHead(config.embedding_dim, config.projection_dim) if meta["has_projection"] else None
    feat = FeaturizerModel(config=config, backbone=backbone, projection=projection)

    head = None
    if meta["kind"] == "classifier":
        head = DenseHead(config.embedding_dim, meta["head"]["hidden_dim"], meta["head"]["num_classes"])

    tensors: dict[str, np.ndarray] = {}
    for rec in meta["tensors"]:
        start = blob_start + rec["offset"]
        raw = data[start : start + rec["nbytes"]]
        if len(raw) != rec["nbytes"]:
            raise IntegrityError(f"tensor {rec['name']!r} extends past end of file")
        tensors[rec["name"]] = np.frombuffer(raw, dtype="<f4").reshape(rec["shape"]).copy()

    def load_into(module: torch.nn.Module, prefix: str) -> None:
        state = {}
        for key in module.state_dict():
            full = f"{prefix}.{key}"
            if full not in tensors:
                raise CheckpointFormatError(f"missing tensor {full!r}")
            state[key] = torch.from_numpy(tensors[full])
        module.load_state_dict(state)
        module.eval()

    load_into(backbone, "backbone")
    if projection is not None:
        load_into(projection, "projection")
    feat.set_frozen(bool(meta["frozen"]))

    if head is not None:
        load_into(head, "head")
        return ClassifierModel(
            featurizer=feat,
            head=head,
            num_classes=meta["head"]["num_classes"],
            hidden_dim=meta["head"]["hidden_dim"],
        )
    return feat


def load_featurizer(path: str | Path) -> FeaturizerModel:
    model = load_checkpoint(path)
    if not isinstance(model, FeaturizerModel):
        raise ValidationError(f"{path} holds a classifier, not a featurizer")
    return model


def checkpoint_digest(path: str | Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()
