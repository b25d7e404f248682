"""Exact cosine-similarity KNN over embeddings, plus the two evaluations:
per-k neighbor accuracy and the label-efficiency benchmark."""

from __future__ import annotations

import csv
import dataclasses
import json
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .dataset import DatasetManifest, decode_sample
from .errors import CelestialError, DomainError, IntegrityError, CheckpointFormatError, ValidationError
from .model import FeaturizerModel, embed
from .train import (
    HeadConfig,
    TrainConfig,
    evaluate_classifier,
    finetune,
    label_fraction_split,
    train_supervised_baseline,
)

DUMP_MAGIC = b"CLEMB"
DUMP_VERSION = 1


@dataclass
class EmbeddingIndex:
    """Immutable store of L2-normalized vectors with exact KNN queries."""

    ids: list[str]
    vectors: np.ndarray
    labels: list[int] | None = None

    @property
    def size(self) -> int:
        return len(self.ids)

    @property
    def dim(self) -> int:
        return self.vectors.shape[1] if self.vectors.size else 0


def build_index(
    ids: list[str], embeddings: np.ndarray, labels: list[int] | None = None
) -> EmbeddingIndex:
    """Normalize and store embeddings; insertion order preserved."""
    embeddings = np.asarray(embeddings, dtype=np.float64)
    if embeddings.ndim != 2 and len(ids) > 0:
        raise ValidationError(f"expected (n, d) embeddings, got shape {embeddings.shape}")
    if len(ids) != (embeddings.shape[0] if embeddings.ndim == 2 else 0):
        raise ValidationError("ids and embedding rows must correspond one to one")
    if labels is not None and len(labels) != len(ids):
        raise ValidationError("labels must correspond one to one with ids")
    if len(set(ids)) != len(ids):
        dupes = sorted({i for i in ids if ids.count(i) > 1})
        raise ValidationError(f"duplicate ids: {dupes[:5]}")
    if len(ids) == 0:
        return EmbeddingIndex(ids=[], vectors=np.zeros((0, 0)), labels=labels)
    norms = np.linalg.norm(embeddings, axis=1)
    if (norms == 0.0).any():
        raise DomainError("zero vectors cannot be indexed under cosine similarity")
    return EmbeddingIndex(ids=list(ids), vectors=embeddings / norms[:, None], labels=labels)


def knn_query(
    index: EmbeddingIndex, query: np.ndarray, k: int, exclude_id: str | None = None
) -> list[tuple[str, float]]:
    """Top-k ids by descending cosine similarity; ties break by ascending id."""
    if k < 1:
        raise ValidationError("k must be >= 1")
    if index.size == 0:
        return []
    query = np.asarray(query, dtype=np.float64).ravel()
    qnorm = np.linalg.norm(query)
    if qnorm == 0.0:
        raise DomainError("query vector must be nonzero")
    if query.shape[0] != index.dim:
        raise ValidationError(f"query dim {query.shape[0]} != index dim {index.dim}")
    sims = index.vectors @ (query / qnorm)
    ranked = sorted(
        (
            (-float(sims[i]), index.ids[i])
            for i in range(index.size)
            if index.ids[i] != exclude_id
        ),
    )
    return [(sid, -neg) for neg, sid in ranked[:k]]


@dataclass
class KnnReport:
    """Accuracy of the k-th ranked neighbor's label, for k = 1..k_max."""

    accuracies: list[float]
    n: int
    d: int
    num_classes: int
    seed: int | None = None

    @property
    def k_max(self) -> int:
        return len(self.accuracies)


def kth_neighbor_accuracy(index: EmbeddingIndex, k_max: int, seed: int | None = None) -> KnnReport:
    """For each point (self excluded), does its k-th neighbor share its label?"""
    if index.labels is None or any(l is None for l in index.labels):
        raise ValidationError("kth-neighbor accuracy needs a fully labeled index")
    if not 1 <= k_max < index.size:
        raise ValidationError(f"need 1 <= k_max < n; got k_max={k_max}, n={index.size}")
    label_of = dict(zip(index.ids, index.labels))
    hits = np.zeros(k_max, dtype=np.int64)
    for i in range(index.size):
        neighbors = knn_query(index, index.vectors[i], k_max, exclude_id=index.ids[i])
        for k, (nid, _) in enumerate(neighbors):
            if label_of[nid] == index.labels[i]:
                hits[k] += 1
    return KnnReport(
        accuracies=[float(h) / index.size for h in hits],
        n=index.size,
        d=index.dim,
        num_classes=len(set(index.labels)),
        seed=seed,
    )


# --- label-efficiency benchmark -------------------------------------------------


@dataclass
class EfficiencyRow:
    fraction: float
    ssl_accuracy: float
    baseline_accuracy: float
    labeled_count: int
    ssl_sd: float = 0.0
    baseline_sd: float = 0.0


@dataclass
class EfficiencyReport:
    rows: list[EfficiencyRow]
    metadata: dict = field(default_factory=dict)


def _cell_path(cell_dir: Path, p: float, seed: int) -> Path:
    return cell_dir / f"cell_p{p:g}_s{seed}.json"


def run_benchmark_cell(
    manifest: DatasetManifest,
    featurizer: FeaturizerModel,
    p: float,
    seed: int,
    head_config: HeadConfig,
    finetune_config: TrainConfig,
    baseline_config: TrainConfig,
    cell_dir: Path | None = None,
) -> dict:
    """One (fraction, seed) cell: paired fine-tune and baseline on identical
    labeled ids, both evaluated on the fixed test split. Cached when a cell
    directory is given, which makes interrupted benchmarks resumable."""
    if cell_dir is not None:
        cached = _cell_path(cell_dir, p, seed)
        if cached.exists():
            return json.loads(cached.read_text(encoding="utf-8"))
    try:
        split = label_fraction_split(manifest, p, seed)
        ft_cfg = dataclasses.replace(finetune_config, seed=seed)
        bl_cfg = dataclasses.replace(baseline_config, seed=seed)
        clf, _ = finetune(featurizer, manifest, split, head_config, ft_cfg)
        ssl_acc = evaluate_classifier(clf, manifest)
        base_clf, _ = train_supervised_baseline(manifest, split, featurizer.config, head_config, bl_cfg)
        baseline_acc = evaluate_classifier(base_clf, manifest)
    except CelestialError as exc:
        raise type(exc)(f"benchmark cell (p={p}, seed={seed}): {exc}") from exc
    cell = {
        "fraction": p,
        "seed": seed,
        "ssl_accuracy": ssl_acc,
        "baseline_accuracy": baseline_acc,
        "labeled_count": split.labeled_count,
    }
    if cell_dir is not None:
        cell_dir.mkdir(parents=True, exist_ok=True)
        _cell_path(cell_dir, p, seed).write_text(
            json.dumps(cell, sort_keys=True, indent=0) + "\n", encoding="utf-8"
        )
    return cell


def label_efficiency_benchmark(
    manifest: DatasetManifest,
    featurizer: FeaturizerModel,
    fractions: list[float],
    seeds: list[int],
    head_config: HeadConfig | None = None,
    finetune_config: TrainConfig | None = None,
    baseline_config: TrainConfig | None = None,
    cell_dir: Path | None = None,
    metadata: dict | None = None,
) -> EfficiencyReport:
    """Fig-5-style sweep: accuracy of both training routes per label fraction,
    aggregated as mean +/- sd across seeds."""
    if not fractions:
        raise ValidationError("need at least one fraction")
    if any(not 0.0 < p <= 1.0 for p in fractions):
        raise ValidationError("fractions must lie in (0, 1]")
    if not seeds:
        raise ValidationError("need at least one seed")
    if featurizer.has_projection:
        raise ValidationError("benchmark expects a stripped, pretrained featurizer")
    head_config = head_config or HeadConfig()
    finetune_config = finetune_config or TrainConfig(epochs=60, learning_rate=0.01)
    baseline_config = baseline_config or TrainConfig(epochs=30, learning_rate=0.01)

    rows = []
    for p in sorted(fractions):
        cells = [
            run_benchmark_cell(
                manifest, featurizer, p, seed, head_config, finetune_config, baseline_config, cell_dir
            )
            for seed in seeds
        ]
        ssl = np.array([c["ssl_accuracy"] for c in cells])
        base = np.array([c["baseline_accuracy"] for c in cells])
        rows.append(
            EfficiencyRow(
                fraction=p,
                ssl_accuracy=float(ssl.mean()),
                baseline_accuracy=float(base.mean()),
                labeled_count=int(cells[0]["labeled_count"]),
                ssl_sd=float(ssl.std(ddof=0)),
                baseline_sd=float(base.std(ddof=0)),
            )
        )
    meta = {"seeds": list(seeds), "fractions": sorted(fractions)}
    if metadata:
        meta.update(metadata)
    return EfficiencyReport(rows=rows, metadata=meta)


# --- serialization ----------------------------------------------------------------


def dump_embeddings(ids: list[str], vectors: np.ndarray, path: str | Path) -> Path:
    """Binary dump: header (n, d, id table) then n rows of little-endian f32."""
    vectors = np.asarray(vectors, dtype="<f4")
    if vectors.ndim != 2 or vectors.shape[0] != len(ids):
        raise ValidationError("vectors must be (n, d) matching ids")
    if any("\n" in sid for sid in ids):
        raise ValidationError("ids may not contain newlines")
    id_blob = "\n".join(ids).encode("utf-8")
    body = DUMP_MAGIC + struct.pack("<B", DUMP_VERSION)
    body += struct.pack("<III", vectors.shape[0], vectors.shape[1], len(id_blob))
    body += id_blob + vectors.tobytes()
    body += struct.pack("<I", zlib.crc32(body) & 0xFFFFFFFF)
    path = Path(path)
    path.write_bytes(body)
    return path


def load_embeddings(path: str | Path) -> tuple[list[str], np.ndarray]:
    data = Path(path).read_bytes()
    if len(data) < 22 or data[:5] != DUMP_MAGIC:
        raise CheckpointFormatError("not an embedding dump")
    if data[5] != DUMP_VERSION:
        raise CheckpointFormatError(f"unsupported embedding dump version {data[5]}")
    (stored,) = struct.unpack("<I", data[-4:])
    if zlib.crc32(data[:-4]) & 0xFFFFFFFF != stored:
        raise IntegrityError("embedding dump checksum mismatch")
    n, d, id_len = struct.unpack("<III", data[6:18])
    ids = data[18 : 18 + id_len].decode("utf-8").split("\n") if id_len else []
    vectors = np.frombuffer(data[18 + id_len : 18 + id_len + 4 * n * d], dtype="<f4").reshape(n, d).copy()
    if len(ids) != n:
        raise IntegrityError(f"id table has {len(ids)} entries, header says {n}")
    return ids, vectors


def embed_manifest(
    featurizer: FeaturizerModel, manifest: DatasetManifest, split: str | None = None
) -> tuple[list[str], np.ndarray, list[int | None]]:
    """Embed all (or one split's) manifest entries in manifest order."""
    entries = manifest.entries if split is None else manifest.split_entries(split)
    if not entries:
        return [], np.zeros((0, featurizer.config.embedding_dim), np.float32), []
    images = np.stack([decode_sample(manifest, e.id).pixels for e in entries])
    return [e.id for e in entries], embed(featurizer, images), [e.label for e in entries]


def write_knn_report(report: KnnReport, path: str | Path) -> Path:
    path = Path(path)
    with path.open("w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["k", "accuracy"])
        for k, acc in enumerate(report.accuracies, start=1):
            writer.writerow([k, repr(acc)])
    sidecar = {"n": report.n, "d": report.d, "num_classes": report.num_classes, "seed": report.seed}
    path.with_suffix(path.suffix + ".meta.json").write_text(
        json.dumps(sidecar, sort_keys=True, indent=2) + "\n", encoding="utf-8"
    )
    return path


def write_efficiency_report(report: EfficiencyReport, path: str | Path) -> Path:
    path = Path(path)
    with path.open("w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(
            ["fraction", "ssl_accuracy", "ssl_sd", "baseline_accuracy", "baseline_sd", "labeled_count"]
        )
        for row in report.rows:
            writer.writerow(
                [
                    repr(row.fraction),
                    repr(row.ssl_accuracy),
                    repr(row.ssl_sd),
                    repr(row.baseline_accuracy),
                    repr(row.baseline_sd),
                    row.labeled_count,
                ]
            )
    path.with_suffix(path.suffix + ".meta.json").write_text(
        json.dumps(report.metadata, sort_keys=True, indent=2) + "\n", encoding="utf-8"
    )
    return path
