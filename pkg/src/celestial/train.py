"""Contrastive pretraining, label-fraction splits, and supervised training.

Tier 1 pulls the two views of each image together and pushes all other views
in the batch apart (normalized temperature-scaled cross entropy over cosine
similarities). The loss gradients with respect to the projection vectors are
computed analytically here and injected into the torch graph, so the tested
gradient path is exactly the one training uses. Tier 2 trains a small dense
head on top of the frozen featurizer; the supervised baseline trains the same
architecture end to end from scratch on the labeled subset only.
"""

from __future__ import annotations

import csv
import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .augment import AugmentationPolicy, make_view_pair
from .dataset import DatasetManifest, ImageSample, decode_sample
from .errors import (
    DegenerateBatchError,
    DomainError,
    LabelAccessError,
    TrainingError,
    ValidationError,
)
from .model import (
    ClassifierModel,
    FeaturizerConfig,
    FeaturizerModel,
    attach_head,
    build_featurizer,
    embed,
    predict,
    state_bytes,
    strip_projection,
)

logger = logging.getLogger(__name__)

DEFAULT_TEMPERATURE = 0.5
DEFAULT_PRETRAIN_LR = 0.05
DEFAULT_HEAD_LR = 0.01
_NORM_GUARD = 1e-3


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 40
    batch_size: int = 64  # pairs per contrastive batch / samples per supervised batch
    learning_rate: float = DEFAULT_PRETRAIN_LR
    temperature: float = DEFAULT_TEMPERATURE
    optimizer: str = "sgd"
    momentum: float = 0.9
    seed: int = 0

    def __post_init__(self):
        if self.temperature <= 0:
            raise ValidationError("temperature must be positive")
        if self.batch_size < 2:
            raise ValidationError("batch_size must be >= 2 so the contrastive loss has negatives")
        if self.epochs < 0:
            raise ValidationError("epochs must be non-negative")
        if self.optimizer not in ("sgd", "adam"):
            raise ValidationError(f"unknown optimizer {self.optimizer!r}")


@dataclass(frozen=True)
class HeadConfig:
    hidden_dim: int = 64


@dataclass
class EpochRecord:
    epoch: int
    loss: float
    seconds: float
    metrics: dict[str, float] = field(default_factory=dict)


@dataclass
class RunHistory:
    records: list[EpochRecord] = field(default_factory=list)

    def append(self, record: EpochRecord) -> None:
        if self.records and record.epoch <= self.records[-1].epoch:
            raise ValidationError("epoch indices must be strictly increasing")
        if not np.isfinite(record.loss):
            raise ValidationError("loss must be finite")
        self.records.append(record)

    @property
    def losses(self) -> list[float]:
        return [r.loss for r in self.records]

    def save(self, path: str | Path) -> Path:
        path = Path(path)
        with path.open("w", encoding="utf-8", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["epoch", "loss", "seconds", "metrics"])
            for r in self.records:
                writer.writerow([r.epoch, repr(r.loss), repr(r.seconds), json.dumps(r.metrics, sort_keys=True)])
        return path

    @classmethod
    def load(cls, path: str | Path) -> "RunHistory":
        history = cls()
        with Path(path).open(encoding="utf-8", newline="") as fh:
            for row in csv.DictReader(fh):
                history.append(
                    EpochRecord(
                        epoch=int(row["epoch"]),
                        loss=float(row["loss"]),
                        seconds=float(row["seconds"]),
                        metrics=json.loads(row["metrics"]),
                    )
                )
        return history


def _make_optimizer(params, config: TrainConfig) -> torch.optim.Optimizer:
    if config.optimizer == "adam":
        return torch.optim.Adam(params, lr=config.learning_rate)
    return torch.optim.SGD(params, lr=config.learning_rate, momentum=config.momentum)


# --- cosine similarity and the contrastive loss ------------------------------


def cosine_similarity(u: np.ndarray, v: np.ndarray) -> float:
    """u.v / (|u||v|); raises on zero vectors or mismatched dimensions."""
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    if u.shape != v.shape or u.ndim != 1:
        raise ValidationError(f"expected equal-length vectors, got {u.shape} and {v.shape}")
    nu, nv = np.linalg.norm(u), np.linalg.norm(v)
    if nu == 0.0 or nv == 0.0:
        raise DomainError("cosine similarity undefined for zero vectors")
    return float(np.dot(u, v) / (nu * nv))


@dataclass
class ContrastiveBatch:
    """2N projection vectors with an involutive pairing map.

    Vectors are expected near unit norm (the guard is loose enough for
    finite-difference probes of the loss).
    """

    vectors: np.ndarray
    pair: np.ndarray

    def __post_init__(self):
        self.vectors = np.asarray(self.vectors, dtype=np.float64)
        self.pair = np.asarray(self.pair, dtype=np.int64)
        n = self.vectors.shape[0]
        if self.vectors.ndim != 2 or self.pair.shape != (n,):
            raise ValidationError("vectors must be (2N, d) with a pair map of length 2N")
        idx = np.arange(n)
        if (self.pair == idx).any():
            raise ValidationError("pair(i) == i: a view cannot be its own partner")
        if (self.pair[self.pair] != idx).any():
            raise ValidationError("pair map is not an involution")
        norms = np.linalg.norm(self.vectors, axis=1)
        if (np.abs(norms - 1.0) > _NORM_GUARD).any():
            raise ValidationError("projection vectors must be (near) unit norm")

    @classmethod
    def from_views(cls, views_a: np.ndarray, views_b: np.ndarray) -> "ContrastiveBatch":
        views_a, views_b = np.asarray(views_a), np.asarray(views_b)
        if views_a.shape != views_b.shape:
            raise ValidationError("view matrices must have equal shapes")
        n = views_a.shape[0]
        pair = np.concatenate([np.arange(n) + n, np.arange(n)])
        return cls(np.concatenate([views_a, views_b], axis=0), pair)

    @property
    def size(self) -> int:
        return self.vectors.shape[0]


def contrastive_loss(batch: ContrastiveBatch, temperature: float) -> tuple[float, np.ndarray]:
    """NT-Xent loss and its analytic gradients w.r.t. each projection vector.

    loss = (1/2N) sum_i -log( exp(s_{i,pair(i)}/t) / sum_{j != i} exp(s_{i,j}/t) )
    with s the full cosine similarity of the raw vectors, so the gradients
    include the normalization term and match finite differences of this exact
    function.
    """
    if temperature <= 0:
        raise ValidationError("temperature must be positive")
    n = batch.size
    if n < 4:
        raise DegenerateBatchError(f"need at least 2 pairs (got {n} views); no negatives otherwise")

    z = batch.vectors
    r = np.linalg.norm(z, axis=1)
    u = z / r[:, None]
    sims = u @ u.T

    logits = sims / temperature
    np.fill_diagonal(logits, -np.inf)
    row_max = logits.max(axis=1)
    lse = row_max + np.log(np.exp(logits - row_max[:, None]).sum(axis=1))
    pos = sims[np.arange(n), batch.pair] / temperature
    losses = lse - pos
    loss = float(losses.mean())

    probs = np.exp(logits - lse[:, None])
    np.fill_diagonal(probs, 0.0)
    grad_s = probs.copy()
    grad_s[np.arange(n), batch.pair] -= 1.0
    grad_s /= n * temperature
    sym = grad_s + grad_s.T

    weighted = sym @ u
    diag = (sym * sims).sum(axis=1)
    grads = (weighted - diag[:, None] * u) / r[:, None]
    return loss, grads


class _NTXent(torch.autograd.Function):
    """Bridges the analytic numpy loss/gradients into the torch graph."""

    @staticmethod
    def forward(ctx, z: torch.Tensor, pair: np.ndarray, temperature: float) -> torch.Tensor:
        batch = ContrastiveBatch(z.detach().numpy().astype(np.float64), pair)
        loss, grads = contrastive_loss(batch, temperature)
        ctx.save_for_backward(torch.from_numpy(grads.astype(np.float32)))
        return z.new_tensor(loss)

    @staticmethod
    def backward(ctx, grad_output: torch.Tensor):
        (grads,) = ctx.saved_tensors
        return grads * grad_output, None, None


# --- label-fraction splits ----------------------------------------------------


@dataclass
class LabelFractionSplit:
    """Stratified choice of which train samples reveal their labels."""

    fraction: float
    labeled_by_class: dict[int, list[str]]
    unlabeled: list[str]
    seed: int

    @property
    def labeled_ids(self) -> list[str]:
        out: list[str] = []
        for c in sorted(self.labeled_by_class):
            out.extend(self.labeled_by_class[c])
        return out

    @property
    def labeled_count(self) -> int:
        return sum(len(v) for v in self.labeled_by_class.values())


def _round_half_up(x: float) -> int:
    return int(np.floor(x + 0.5))


def label_fraction_split(manifest: DatasetManifest, p: float, seed: int) -> LabelFractionSplit:
    """Per class, reveal the first max(1, round(p * n_c)) ids of a seeded shuffle.

    The prefix construction makes labeled sets nested across fractions for a
    fixed seed.
    """
    if not 0.0 < p <= 1.0:
        raise ValidationError(f"fraction must be in (0, 1], got {p}")
    train = manifest.split_entries("train")
    by_class: dict[int, list[str]] = {c: [] for c in range(manifest.num_classes)}
    for e in train:
        if e.label is None:
            raise ValidationError(f"train entry {e.id!r} is unlabeled; labels must be masked, not absent")
        by_class[e.label].append(e.id)

    labeled_by_class: dict[int, list[str]] = {}
    unlabeled: list[str] = []
    for c in range(manifest.num_classes):
        ids = by_class[c]
        if not ids:
            raise ValidationError(f"class {c} has no train samples")
        rng = np.random.default_rng(np.random.SeedSequence([seed, c]))
        order = [ids[i] for i in rng.permutation(len(ids))]
        count = min(len(ids), max(1, _round_half_up(p * len(ids))))
        labeled_by_class[c] = order[:count]
        unlabeled.extend(order[count:])
    return LabelFractionSplit(fraction=p, labeled_by_class=labeled_by_class, unlabeled=unlabeled, seed=seed)


# --- Tier 1: contrastive pretraining ------------------------------------------


class _BlindEntry:
    """Entry proxy whose label attribute raises; keeps Tier 1 label-blind."""

    __slots__ = ("_entry",)

    def __init__(self, entry):
        self._entry = entry

    @property
    def id(self):
        return self._entry.id

    @property
    def path(self):
        return self._entry.path

    @property
    def split(self):
        return self._entry.split

    @property
    def label(self):
        raise LabelAccessError("label read during label-blind pretraining")


class LabelBlindManifest:
    """Manifest view that raises on any label access."""

    def __init__(self, manifest: DatasetManifest):
        self._manifest = manifest

    @property
    def entries(self):
        return [_BlindEntry(e) for e in self._manifest.entries]

    @property
    def class_names(self):
        raise LabelAccessError("class names read during label-blind pretraining")

    @property
    def image_size(self):
        return self._manifest.image_size

    @property
    def images(self):
        return self._manifest.images

    @property
    def root(self):
        return self._manifest.root

    @property
    def name(self):
        return self._manifest.name

    def entry(self, sample_id: str):
        return _BlindEntry(self._manifest.entry(sample_id))

    def split_entries(self, split: str):
        return [_BlindEntry(e) for e in self._manifest.entries if e.split == split]


def _blind_sample(blind: LabelBlindManifest, sample_id: str) -> ImageSample:
    raw = decode_sample(blind._manifest, sample_id)
    return ImageSample(id=raw.id, pixels=raw.pixels, label=None, source=raw.source)


def pretrain(
    manifest: DatasetManifest,
    model: FeaturizerModel,
    policy: AugmentationPolicy,
    config: TrainConfig,
) -> tuple[FeaturizerModel, RunHistory]:
    """Tier 1: augmentation-invariance training of the featurizer.

    Reads no labels (enforced by a label-blind manifest view). Deterministic
    given the config seed.
    """
    if not model.has_projection:
        raise ValidationError("pretraining needs the projection head; got a stripped featurizer")
    blind = LabelBlindManifest(manifest)
    train_ids = [e.id for e in blind.split_entries("train")]
    if not train_ids:
        raise ValidationError("manifest has no train entries")

    history = RunHistory()
    if config.epochs == 0:
        return model, history

    pixels = {sid: _blind_sample(blind, sid).pixels for sid in train_ids}
    for m in model.modules():
        m.train()
    optimizer = _make_optimizer(list(model.parameters()), config)
    shuffle_rng = np.random.default_rng(np.random.SeedSequence([config.seed, 0xC0]))

    n = len(train_ids)
    for epoch in range(1, config.epochs + 1):
        t0 = time.monotonic()
        order = shuffle_rng.permutation(n)
        batch_losses: list[float] = []
        for start in range(0, n, config.batch_size):
            chunk = order[start : start + config.batch_size]
            if len(chunk) < 2:
                continue  # a single pair has no negatives
            ids = [train_ids[i] for i in chunk]
            views_a, views_b = [], []
            for pos_in_epoch, sid in zip(chunk, ids):
                draw = (epoch - 1) * n + int(pos_in_epoch)
                sample = ImageSample(id=sid, pixels=pixels[sid], label=None, source=blind.name)
                vp = make_view_pair(sample, policy, draw)
                views_a.append(vp.view_a)
                views_b.append(vp.view_b)
            batch_np = np.stack(views_a + views_b, axis=0)
            x = torch.from_numpy(batch_np).permute(0, 3, 1, 2)

            optimizer.zero_grad()
            emb_t = model.backbone(x)
            proj_t = model.projection(emb_t)
            z = torch.nn.functional.normalize(proj_t, dim=1)
            m = len(chunk)
            pair = np.concatenate([np.arange(m) + m, np.arange(m)])
            loss_t = _NTXent.apply(z, pair, config.temperature)
            loss = float(loss_t.item())
            if not np.isfinite(loss):
                raise TrainingError(f"non-finite contrastive loss at epoch {epoch}, batch ids {ids}")
            loss_t.backward()
            optimizer.step()
            batch_losses.append(loss)
        history.append(
            EpochRecord(epoch=epoch, loss=float(np.mean(batch_losses)), seconds=time.monotonic() - t0)
        )
    for m in model.modules():
        m.eval()
    return model, history


# --- Tier 2: supervised head training ------------------------------------------


def fit_head(
    classifier: ClassifierModel,
    embeddings: np.ndarray,
    labels: np.ndarray,
    config: TrainConfig,
) -> RunHistory:
    """Train only the dense head on fixed embeddings with cross entropy.

    Record 0 is the pre-training loss; records 1..epochs are per-epoch means.
    """
    emb_t = torch.from_numpy(np.asarray(embeddings, dtype=np.float32))
    labels_t = torch.from_numpy(np.asarray(labels, dtype=np.int64))
    n = emb_t.shape[0]
    history = RunHistory()
    criterion = torch.nn.CrossEntropyLoss()

    classifier.head.eval()
    with torch.no_grad():
        initial = float(criterion(classifier.head(emb_t), labels_t).item())
    history.append(EpochRecord(epoch=0, loss=initial, seconds=0.0))

    optimizer = _make_optimizer(list(classifier.head.parameters()), config)
    rng = np.random.default_rng(np.random.SeedSequence([config.seed, 0x0EAD]))
    classifier.head.train()
    for epoch in range(1, config.epochs + 1):
        t0 = time.monotonic()
        order = rng.permutation(n)
        losses = []
        for start in range(0, n, config.batch_size):
            idx = torch.from_numpy(order[start : start + config.batch_size].copy())
            optimizer.zero_grad()
            out = classifier.head(emb_t[idx])
            loss_t = criterion(out, labels_t[idx])
            loss = float(loss_t.item())
            if not np.isfinite(loss):
                raise TrainingError(f"non-finite head loss at epoch {epoch}")
            loss_t.backward()
            optimizer.step()
            losses.append(loss)
        history.append(EpochRecord(epoch=epoch, loss=float(np.mean(losses)), seconds=time.monotonic() - t0))
    classifier.head.eval()
    return history


def head_accuracy(classifier: ClassifierModel, embeddings: np.ndarray, labels: np.ndarray) -> float:
    emb_t = torch.from_numpy(np.asarray(embeddings, dtype=np.float32))
    classifier.head.eval()
    with torch.no_grad():
        pred = classifier.head(emb_t).argmax(dim=1).numpy()
    return float((pred == np.asarray(labels)).mean())


def finetune(
    featurizer: FeaturizerModel,
    manifest: DatasetManifest,
    split: LabelFractionSplit,
    head_config: HeadConfig,
    config: TrainConfig,
) -> tuple[ClassifierModel, RunHistory]:
    """Tier 2: train a 2-dense-layer head on the frozen featurizer.

    Only the split's labeled samples are used; the featurizer weights are
    bit-identical before and after.
    """
    if featurizer.has_projection:
        raise ValidationError("finetune expects a stripped featurizer")
    labeled = split.labeled_ids
    if not labeled:
        raise ValidationError("split has no labeled samples")
    if split.labeled_count < manifest.num_classes:
        logger.warning(
            "labeled set (%d) smaller than the number of classes (%d); proceeding",
            split.labeled_count,
            manifest.num_classes,
        )

    before = state_bytes(featurizer)
    classifier = attach_head(
        featurizer,
        num_classes=manifest.num_classes,
        hidden_dim=head_config.hidden_dim,
        seed=config.seed,
        freeze=True,
    )
    images = np.stack([decode_sample(manifest, sid).pixels for sid in labeled])
    labels = np.array([manifest.entry(sid).label for sid in labeled], dtype=np.int64)
    embeddings = embed(featurizer, images)
    history = fit_head(classifier, embeddings, labels, config)
    if state_bytes(featurizer) != before:
        raise TrainingError("frozen featurizer weights changed during finetune")
    return classifier, history


def train_supervised_baseline(
    manifest: DatasetManifest,
    split: LabelFractionSplit,
    model_config: FeaturizerConfig,
    head_config: HeadConfig,
    config: TrainConfig,
) -> tuple[ClassifierModel, RunHistory]:
    """Purely supervised reference: same architecture, trained end to end
    from random init on exactly the split's labeled samples."""
    labeled = split.labeled_ids
    if not labeled:
        raise ValidationError("split has no labeled samples")
    featurizer = strip_projection(build_featurizer(model_config, seed=config.seed))
    classifier = attach_head(
        featurizer,
        num_classes=manifest.num_classes,
        hidden_dim=head_config.hidden_dim,
        seed=config.seed + 1,
        freeze=False,
    )
    images = np.stack([decode_sample(manifest, sid).pixels for sid in labeled])
    labels_t = torch.from_numpy(np.array([manifest.entry(sid).label for sid in labeled], dtype=np.int64))
    x_all = torch.from_numpy(images).permute(0, 3, 1, 2)

    history = RunHistory()
    criterion = torch.nn.CrossEntropyLoss()
    optimizer = _make_optimizer(classifier.trainable_parameters(), config)
    rng = np.random.default_rng(np.random.SeedSequence([config.seed, 0xBA5E]))
    featurizer.backbone.train()
    classifier.head.train()
    n = len(labeled)
    for epoch in range(1, config.epochs + 1):
        t0 = time.monotonic()
        order = rng.permutation(n)
        losses = []
        for start in range(0, n, config.batch_size):
            idx = torch.from_numpy(order[start : start + config.batch_size].copy())
            optimizer.zero_grad()
            out = classifier.head(featurizer.backbone(x_all[idx]))
            loss_t = criterion(out, labels_t[idx])
            loss = float(loss_t.item())
            if not np.isfinite(loss):
                raise TrainingError(f"non-finite baseline loss at epoch {epoch}")
            loss_t.backward()
            optimizer.step()
            losses.append(loss)
        history.append(EpochRecord(epoch=epoch, loss=float(np.mean(losses)), seconds=time.monotonic() - t0))
    featurizer.backbone.eval()
    classifier.head.eval()
    return classifier, history


def evaluate_classifier(classifier: ClassifierModel, manifest: DatasetManifest, split: str = "test") -> float:
    """Accuracy of argmax predictions over a manifest split."""
    entries = manifest.split_entries(split)
    if not entries:
        raise ValidationError(f"manifest has no {split!r} entries")
    if any(e.label is None for e in entries):
        raise ValidationError(f"{split!r} entries must be labeled for evaluation")
    images = np.stack([decode_sample(manifest, e.id).pixels for e in entries])
    labels = np.array([e.label for e in entries])
    return float((predict(classifier, images) == labels).mean())
