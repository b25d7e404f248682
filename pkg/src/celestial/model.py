"""Featurizer and classifier models.

The featurizer is a plain convolutional backbone (conv blocks + global average
pooling + dense) producing an embedding. During pretraining it carries a small
projection head whose L2-normalized output feeds the contrastive loss; the
head is stripped before any supervised use. A classifier is the stripped
featurizer plus a 2-dense-layer head.
"""

from __future__ import annotations

import copy
import logging
from dataclasses import dataclass, field

import numpy as np
import torch
from torch import nn

from .errors import MissingHeadError, ValidationError

logger = logging.getLogger(__name__)

# 4 conv blocks landing near the 500k parameter budget at 64x64x3 input.
DEFAULT_CONV_BLOCKS = ((48, 3, 1, 2), (96, 3, 1, 2), (128, 3, 1, 2), (256, 3, 1, 2))
# Much smaller stack for desk-scale experiments and tests.
SMALL_CONV_BLOCKS = ((16, 3, 1, 2), (32, 3, 1, 2), (64, 3, 1, 2))

PARAM_BUDGET_TOLERANCE = 0.10
_EMBED_CHUNK = 256


@dataclass(frozen=True)
class FeaturizerConfig:
    """Architecture of the backbone + projection head.

    ``conv_blocks`` entries are (filters, kernel, stride, pool).
    """

    input_size: tuple[int, int, int] = (64, 64, 3)
    conv_blocks: tuple[tuple[int, int, int, int], ...] = DEFAULT_CONV_BLOCKS
    embedding_dim: int = 128
    projection_dim: int = 64
    param_budget: int = 500_000

    def __post_init__(self):
        if self.embedding_dim <= 0 or self.projection_dim <= 0:
            raise ValidationError("embedding_dim and projection_dim must be positive")
        if len(self.input_size) != 3 or any(v <= 0 for v in self.input_size):
            raise ValidationError(f"bad input_size {self.input_size}")
        if self.input_size[2] not in (1, 3):
            raise ValidationError("input channels must be 1 or 3")
        if not self.conv_blocks:
            raise ValidationError("need at least one conv block")

    @classmethod
    def small(cls, input_size=(64, 64, 3), embedding_dim=64, projection_dim=32) -> "FeaturizerConfig":
        return cls(
            input_size=input_size,
            conv_blocks=SMALL_CONV_BLOCKS,
            embedding_dim=embedding_dim,
            projection_dim=projection_dim,
        )


class Backbone(nn.Module):
    def __init__(self, config: FeaturizerConfig):
        super().__init__()
        h, w, c_in = config.input_size
        layers: list[nn.Module] = []
        for filters, kernel, stride, pool in config.conv_blocks:
            layers.append(nn.Conv2d(c_in, filters, kernel, stride=stride, padding=kernel // 2))
            layers.append(nn.ReLU(inplace=True))
            h = (h + 2 * (kernel // 2) - kernel) // stride + 1
            w = (w + 2 * (kernel // 2) - kernel) // stride + 1
            if pool > 1:
                layers.append(nn.MaxPool2d(pool))
                h, w = h // pool, w // pool
            if h <= 0 or w <= 0:
                raise ValidationError("conv blocks reduce spatial dims to zero")
            c_in = filters
        self.features = nn.Sequential(*layers)
        self.fc = nn.Linear(c_in, config.embedding_dim)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        h = self.features(x)
        h = h.mean(dim=(2, 3))
        return self.fc(h)


class ProjectionHead(nn.Module):
    """One hidden dense layer; callers L2-normalize the output."""

    def __init__(self, embedding_dim: int, projection_dim: int):
        super().__init__()
        self.hidden = nn.Linear(embedding_dim, embedding_dim)
        self.out = nn.Linear(embedding_dim, projection_dim)

    def forward(self, h: torch.Tensor) -> torch.Tensor:
        return self.out(torch.relu(self.hidden(h)))


class DenseHead(nn.Module):
    """Two dense layers: embedding -> hidden -> class scores."""

    def __init__(self, embedding_dim: int, hidden_dim: int, num_classes: int):
        super().__init__()
        self.hidden = nn.Linear(embedding_dim, hidden_dim)
        self.out = nn.Linear(hidden_dim, num_classes)

    def forward(self, h: torch.Tensor) -> torch.Tensor:
        return self.out(torch.relu(self.hidden(h)))


@dataclass
class FeaturizerModel:
    """Backbone plus optional pretraining projection head."""

    config: FeaturizerConfig
    backbone: Backbone
    projection: ProjectionHead | None = None
    frozen: bool = False

    @property
    def has_projection(self) -> bool:
        return self.projection is not None

    def modules(self) -> list[nn.Module]:
        mods: list[nn.Module] = [self.backbone]
        if self.projection is not None:
            mods.append(self.projection)
        return mods

    def parameters(self):
        for m in self.modules():
            yield from m.parameters()

    def set_frozen(self, frozen: bool) -> None:
        self.frozen = frozen
        for p in self.backbone.parameters():
            p.requires_grad_(not frozen)


@dataclass
class ClassifierModel:
    """f = head . featurizer; prediction is the argmax class score."""

    featurizer: FeaturizerModel
    head: DenseHead
    num_classes: int
    hidden_dim: int

    def parameters(self):
        yield from self.featurizer.parameters()
        yield from self.head.parameters()

    def trainable_parameters(self):
        return [p for p in self.parameters() if p.requires_grad]


def build_featurizer(config: FeaturizerConfig, seed: int) -> FeaturizerModel:
    """Deterministically initialized featurizer with projection head attached."""
    torch.manual_seed(seed)
    backbone = Backbone(config)
    projection = ProjectionHead(config.embedding_dim, config.projection_dim)
    model = FeaturizerModel(config=config, backbone=backbone, projection=projection)
    for m in model.modules():
        m.eval()
    return model


def _to_batch_tensor(images: np.ndarray, config: FeaturizerConfig) -> torch.Tensor:
    images = np.asarray(images, dtype=np.float32)
    if images.ndim == 3:
        images = images[None]
    h, w, c = config.input_size
    if images.shape[1:] != (h, w, c):
        raise ValidationError(f"expected images of shape (N, {h}, {w}, {c}), got {images.shape}")
    return torch.from_numpy(np.ascontiguousarray(images)).permute(0, 3, 1, 2)


def embed(model: FeaturizerModel, images: np.ndarray) -> np.ndarray:
    """Backbone embeddings for a batch of H x W x C images (no projection)."""
    x = _to_batch_tensor(images, model.config)
    outs = []
    model.backbone.eval()
    with torch.no_grad():
        for start in range(0, x.shape[0], _EMBED_CHUNK):
            outs.append(model.backbone(x[start : start + _EMBED_CHUNK]).numpy())
    out = np.concatenate(outs, axis=0) if outs else np.zeros((0, model.config.embedding_dim), np.float32)
    if not np.isfinite(out).all():
        raise ValidationError("non-finite embedding values")
    return out


def normalize_rows(vectors: np.ndarray, zero_replacement: bool = True) -> np.ndarray:
    """L2-normalize rows; zero rows become the first unit basis vector."""
    vectors = np.asarray(vectors, dtype=np.float32)
    norms = np.linalg.norm(vectors, axis=1)
    zero_rows = norms == 0.0
    if zero_rows.any():
        if not zero_replacement:
            raise ValidationError("zero vector cannot be normalized")
        logger.warning("replacing %d zero projection vector(s) with unit basis vector", zero_rows.sum())
        vectors = vectors.copy()
        vectors[zero_rows, 0] = 1.0
        norms[zero_rows] = 1.0
    return vectors / norms[:, None]


def project(model: FeaturizerModel, embeddings: np.ndarray) -> np.ndarray:
    """L2-normalized projection-head output for a batch of embeddings."""
    if model.projection is None:
        raise MissingHeadError("featurizer has no projection head (already stripped)")
    embeddings = np.asarray(embeddings, dtype=np.float32)
    if embeddings.ndim != 2 or embeddings.shape[1] != model.config.embedding_dim:
        raise ValidationError(
            f"expected (N, {model.config.embedding_dim}) embeddings, got {embeddings.shape}"
        )
    model.projection.eval()
    with torch.no_grad():
        raw = model.projection(torch.from_numpy(embeddings)).numpy()
    return normalize_rows(raw)


def strip_projection(model: FeaturizerModel) -> FeaturizerModel:
    """Drop the projection head, keeping backbone weights bit-identical."""
    if model.projection is None:
        logger.warning("strip_projection: model already stripped; no-op")
        return model
    return FeaturizerModel(
        config=model.config,
        backbone=copy.deepcopy(model.backbone),
        projection=None,
        frozen=model.frozen,
    )


def attach_head(
    featurizer: FeaturizerModel,
    num_classes: int,
    hidden_dim: int,
    seed: int,
    freeze: bool,
) -> ClassifierModel:
    """Attach a 2-dense-layer head to a stripped featurizer."""
    if featurizer.has_projection:
        raise ValidationError("strip the projection head before attaching a supervised head")
    if num_classes < 2:
        raise ValidationError("num_classes must be >= 2")
    if hidden_dim <= 0:
        raise ValidationError("hidden_dim must be positive")
    torch.manual_seed(seed)
    head = DenseHead(featurizer.config.embedding_dim, hidden_dim, num_classes)
    featurizer.set_frozen(freeze)
    return ClassifierModel(featurizer=featurizer, head=head, num_classes=num_classes, hidden_dim=hidden_dim)


def classifier_scores(classifier: ClassifierModel, images: np.ndarray) -> np.ndarray:
    """Class scores (logits) for a batch of images."""
    emb = embed(classifier.featurizer, images)
    classifier.head.eval()
    with torch.no_grad():
        scores = classifier.head(torch.from_numpy(emb)).numpy()
    if not np.isfinite(scores).all():
        raise ValidationError("non-finite class scores")
    return scores


def predict(classifier: ClassifierModel, images: np.ndarray) -> np.ndarray:
    return classifier_scores(classifier, images).argmax(axis=1)


def count_parameters(model, trainable_only: bool = False) -> int:
    """Exact count of (optionally trainable-only) scalar parameters."""
    params = list(model.parameters())
    if trainable_only:
        params = [p for p in params if p.requires_grad]
    return sum(p.numel() for p in params)


def within_param_budget(model: FeaturizerModel) -> bool:
    budget = model.config.param_budget
    count = count_parameters(model)
    return abs(count - budget) <= PARAM_BUDGET_TOLERANCE * budget


def state_bytes(model: FeaturizerModel | ClassifierModel | nn.Module) -> bytes:
    """Concatenated raw weight bytes, for bit-equality checks."""
    if isinstance(model, ClassifierModel):
        mods: list[nn.Module] = [*model.featurizer.modules(), model.head]
    elif isinstance(model, FeaturizerModel):
        mods = model.modules()
    else:
        mods = [model]
    chunks = []
    for m in mods:
        for _, tensor in sorted(m.state_dict().items()):
            chunks.append(tensor.numpy().tobytes())
    return b"".join(chunks)
