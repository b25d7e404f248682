"""Dataset ingestion: manifests, image decoding, and synthetic toy sets.

A manifest is a line-delimited UTF-8 file:

    celestial-manifest v1
    <comma-separated class names>
    id<TAB>relative_path<TAB>label_index_or_dash<TAB>split_tag

`-` marks an unlabeled entry; split tags are ``train`` or ``test``.
Synthetic datasets keep their pixels in memory on the manifest and can be
materialized to PNG files with :func:`save_dataset`.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import DecodeError, ManifestParseError, NotFoundError, ValidationError

MANIFEST_HEADER = "celestial-manifest v1"
SPLIT_TAGS = ("train", "test")
DEFAULT_IMAGE_SIZE = (64, 64)


@dataclass
class ImageSample:
    """A decoded image: pixels are H x W x C float32 in [0, 1]."""

    id: str
    pixels: np.ndarray
    label: int | None
    source: str


@dataclass
class ManifestEntry:
    id: str
    path: str
    label: int | None
    split: str


@dataclass
class DatasetManifest:
    entries: list[ManifestEntry]
    class_names: list[str]
    image_size: tuple[int, int]
    root: Path | None = field(default=None, compare=False)
    images: dict[str, np.ndarray] | None = field(default=None, compare=False, repr=False)
    name: str = field(default="dataset", compare=False)

    def __post_init__(self):
        self._by_id: dict[str, ManifestEntry] | None = None

    def entry(self, sample_id: str) -> ManifestEntry:
        if self._by_id is None:
            self._by_id = {e.id: e for e in self.entries}
        try:
            return self._by_id[sample_id]
        except KeyError:
            raise NotFoundError(f"id {sample_id!r} not in manifest") from None

    def split_entries(self, split: str) -> list[ManifestEntry]:
        return [e for e in self.entries if e.split == split]

    @property
    def num_classes(self) -> int:
        return len(self.class_names)


def load_manifest(path: str | Path, image_size: tuple[int, int] = DEFAULT_IMAGE_SIZE) -> DatasetManifest:
    """Parse a manifest file, validating ids, label ranges, and split tags.

    ``image_size`` is the decode target; it is not persisted in the file.
    """
    path = Path(path)
    lines = path.read_text(encoding="utf-8").splitlines()
    if not lines or lines[0].strip() != MANIFEST_HEADER:
        raise ManifestParseError(f"expected header {MANIFEST_HEADER!r}", line=1)
    if len(lines) < 2:
        raise ManifestParseError("missing class-name line", line=2)
    class_line = lines[1].strip()
    class_names = [c.strip() for c in class_line.split(",")] if class_line else []

    entries: list[ManifestEntry] = []
    seen: set[str] = set()
    for lineno, raw in enumerate(lines[2:], start=3):
        if not raw.strip():
            continue
        parts = raw.split("\t")
        if len(parts) != 4:
            raise ManifestParseError(f"expected 4 tab-separated fields, got {len(parts)}", line=lineno)
        sample_id, rel_path, label_str, split = (p.strip() for p in parts)
        if not sample_id:
            raise ManifestParseError("empty id", line=lineno)
        if sample_id in seen:
            raise ManifestParseError(f"duplicate id {sample_id!r}", line=lineno)
        seen.add(sample_id)
        if split not in SPLIT_TAGS:
            raise ManifestParseError(f"unknown split tag {split!r}", line=lineno)
        if label_str == "-":
            label = None
        else:
            try:
                label = int(label_str)
            except ValueError:
                raise ManifestParseError(f"label {label_str!r} is not an integer", line=lineno) from None
            if not 0 <= label < len(class_names):
                raise ManifestParseError(
                    f"label {label} out of range for {len(class_names)} classes", line=lineno
                )
        entries.append(ManifestEntry(sample_id, rel_path, label, split))

    return DatasetManifest(
        entries=entries,
        class_names=class_names,
        image_size=image_size,
        root=path.parent,
        name=path.stem,
    )


def write_manifest(manifest: DatasetManifest, path: str | Path) -> Path:
    """Write a manifest file; inverse of :func:`load_manifest`."""
    path = Path(path)
    for name in manifest.class_names:
        if "," in name:
            raise ValidationError(f"class name {name!r} may not contain a comma")
    lines = [MANIFEST_HEADER, ",".join(manifest.class_names)]
    for e in manifest.entries:
        label = "-" if e.label is None else str(e.label)
        lines.append(f"{e.id}\t{e.path}\t{label}\t{e.split}")
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return path


def _to_unit_pixels(img: Image.Image, target_size: tuple[int, int]) -> np.ndarray:
    if img.mode not in ("L", "RGB"):
        img = img.convert("RGB")
    th, tw = target_size
    if img.size != (tw, th):
        img = img.resize((tw, th), Image.Resampling.BILINEAR)
    pixels = np.asarray(img, dtype=np.float32) / 255.0
    if pixels.ndim == 2:
        pixels = pixels[:, :, None]
    return pixels


def decode_sample(
    manifest: DatasetManifest, sample_id: str, target_size: tuple[int, int] | None = None
) -> ImageSample:
    """Decode one entry to float pixels in [0, 1], resized bilinearly.

    In-memory synthetic pixels are used when present; otherwise the image is
    read from ``manifest.root / entry.path``.
    """
    entry = manifest.entry(sample_id)
    size = target_size or manifest.image_size
    if manifest.images is not None and sample_id in manifest.images:
        img = Image.fromarray(manifest.images[sample_id])
    else:
        if manifest.root is None:
            raise DecodeError(f"manifest has no root directory to resolve {entry.path!r}")
        file_path = Path(manifest.root) / entry.path
        try:
            img = Image.open(file_path)
            img.load()
        except FileNotFoundError:
            raise DecodeError(f"image file missing: {file_path}") from None
        except OSError as exc:
            raise DecodeError(f"cannot decode {file_path}: {exc}") from None
    pixels = _to_unit_pixels(img, size)
    if pixels.min() < 0.0 or pixels.max() > 1.0:
        raise DecodeError(f"decoded pixels out of [0, 1] for {sample_id!r}")
    return ImageSample(id=sample_id, pixels=pixels, label=entry.label, source=manifest.name)


def decode_batch(
    manifest: DatasetManifest, sample_ids: list[str], target_size: tuple[int, int] | None = None
) -> np.ndarray:
    """Decode ids into one (N, H, W, C) array, preserving order."""
    samples = [decode_sample(manifest, sid, target_size) for sid in sample_ids]
    return np.stack([s.pixels for s in samples], axis=0)


# --- synthetic toy data -----------------------------------------------------
# Classes are separable by texture frequency, blob count, and a base hue;
# orientation, phase, blob placement, lighting, and noise vary per sample so
# that no single example pins the class down.

_FREQS = (2.0, 3.5, 5.5, 8.0)
_BLOB_COUNTS = (2, 7)
_TRAIN_FRACTION = 0.8


def _class_params(class_idx: int, num_classes: int) -> tuple[float, int, float]:
    freq = _FREQS[class_idx % len(_FREQS)]
    blobs = _BLOB_COUNTS[(class_idx // len(_FREQS)) % len(_BLOB_COUNTS)]
    hue = 2.0 * np.pi * class_idx / num_classes
    return freq, blobs, hue


def _hue_to_rgb(hue: float) -> np.ndarray:
    phases = np.array([0.0, 2.0 * np.pi / 3.0, 4.0 * np.pi / 3.0])
    return 0.5 + 0.5 * np.cos(hue - phases)


def _synthetic_pixels(
    class_idx: int, sample_idx: int, image_size: tuple[int, int], seed: int, num_classes: int
) -> np.ndarray:
    h, w = image_size
    rng = np.random.default_rng(np.random.SeedSequence([seed, class_idx, sample_idx]))
    freq, n_blobs, hue = _class_params(class_idx, num_classes)

    theta = rng.uniform(0.0, np.pi)
    phase = rng.uniform(0.0, 2.0 * np.pi)
    ys, xs = np.mgrid[0:h, 0:w].astype(np.float64)
    axis = (xs * np.cos(theta) + ys * np.sin(theta)) / max(h, w)
    grating = np.sin(2.0 * np.pi * freq * axis + phase)

    color = _hue_to_rgb(hue + rng.normal(0.0, 0.25))
    base = 0.45 + 0.18 * grating[:, :, None] * (0.4 + 0.6 * color[None, None, :])

    blob_color = _hue_to_rgb(hue + np.pi + rng.normal(0.0, 0.3))
    radius = (0.06 + 0.02 * rng.uniform()) * max(h, w)
    for _ in range(n_blobs):
        cy, cx = rng.uniform(0, h), rng.uniform(0, w)
        d2 = (ys - cy) ** 2 + (xs - cx) ** 2
        bump = np.exp(-d2 / (2.0 * radius**2))
        base += 0.55 * bump[:, :, None] * (blob_color[None, None, :] - 0.5)

    gain = rng.uniform(0.6, 1.0)
    offset = rng.uniform(-0.10, 0.10)
    noisy = gain * base + offset + rng.normal(0.0, 0.04, size=(h, w, 3))
    quantized = np.clip(noisy, 0.0, 1.0) * 255.0
    return np.round(quantized).astype(np.uint8)


def make_synthetic_dataset(
    num_classes: int, per_class: int, image_size: tuple[int, int] = DEFAULT_IMAGE_SIZE, seed: int = 0
) -> DatasetManifest:
    """Generate a balanced, class-structured in-memory dataset.

    Deterministic under ``seed``. Each class gets an 80/20 train/test split.
    """
    if num_classes < 2:
        raise ValidationError("num_classes must be >= 2")
    if per_class < 2:
        raise ValidationError("per_class must be >= 2")
    if image_size[0] <= 0 or image_size[1] <= 0:
        raise ValidationError("image_size must be positive")

    entries: list[ManifestEntry] = []
    images: dict[str, np.ndarray] = {}
    n_train = max(1, int(np.floor(_TRAIN_FRACTION * per_class + 0.5)))
    for c in range(num_classes):
        for i in range(per_class):
            sample_id = f"c{c:02d}_{i:04d}"
            images[sample_id] = _synthetic_pixels(c, i, image_size, seed, num_classes)
            split = "train" if i < n_train else "test"
            entries.append(ManifestEntry(sample_id, f"{sample_id}.png", c, split))

    class_names = [f"class_{c:02d}" for c in range(num_classes)]
    return DatasetManifest(
        entries=entries,
        class_names=class_names,
        image_size=image_size,
        images=images,
        name=f"synthetic-{num_classes}x{per_class}-s{seed}",
    )


def save_dataset(manifest: DatasetManifest, out_dir: str | Path) -> Path:
    """Materialize an in-memory dataset as PNG files plus a manifest.tsv."""
    if manifest.images is None:
        raise ValidationError("manifest has no in-memory images to save")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    for e in manifest.entries:
        Image.fromarray(manifest.images[e.id]).save(out_dir / e.path)
    return write_manifest(manifest, out_dir / "manifest.tsv")
