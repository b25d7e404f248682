"""Content-preserving random view pairs for contrastive pretraining.

Each augmentation is a pure function of (policy, draw): parameters come from
a Philox counter-based generator keyed by (policy.seed, draw), so any worker
can regenerate any view without shared RNG state. Order is fixed:
rotate -> brighten -> contrast -> clamp.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .dataset import ImageSample
from .errors import ValidationError

QUARTER_TURNS = (0, 1, 2, 3)


@dataclass(frozen=True)
class AugmentationPolicy:
    rotations: tuple[int, ...] = QUARTER_TURNS
    brightness_max_delta: float = 0.2
    contrast_max_delta: float = 0.2
    seed: int = 0

    def __post_init__(self):
        if not self.rotations:
            raise ValidationError("rotations set must be non-empty")
        if any(k not in QUARTER_TURNS for k in self.rotations):
            raise ValidationError(f"rotations must be quarter-turn counts in {QUARTER_TURNS}")
        if not 0.0 <= self.brightness_max_delta <= 1.0:
            raise ValidationError("brightness_max_delta must be in [0, 1]")
        if not 0.0 <= self.contrast_max_delta <= 1.0:
            raise ValidationError("contrast_max_delta must be in [0, 1]")
        if self.seed < 0:
            raise ValidationError("seed must be non-negative")


@dataclass(frozen=True)
class AugmentParams:
    """The concrete draws applied to one view."""

    quarter_turns: int
    brightness_delta: float
    contrast_delta: float


@dataclass
class ViewPair:
    source_id: str
    view_a: np.ndarray
    view_b: np.ndarray


def sample_params(policy: AugmentationPolicy, draw: int) -> AugmentParams:
    """Draw (rotation, brightness delta, contrast delta) for one view."""
    key = np.array([policy.seed, draw], dtype=np.uint64)
    rng = np.random.Generator(np.random.Philox(key=key))
    k = int(policy.rotations[rng.integers(len(policy.rotations))])
    delta_b = float(policy.brightness_max_delta * rng.uniform(-1.0, 1.0))
    delta_c = float(policy.contrast_max_delta * rng.uniform(-1.0, 1.0))
    return AugmentParams(k, delta_b, delta_c)


def apply_params(image: np.ndarray, params: AugmentParams) -> np.ndarray:
    """Apply fixed augmentation parameters to a square image."""
    if image.ndim != 3:
        raise ValidationError(f"expected H x W x C image, got shape {image.shape}")
    if image.shape[0] != image.shape[1]:
        raise ValidationError(f"image must be square for quarter-turn rotation, got {image.shape}")
    out = np.ascontiguousarray(np.rot90(image, params.quarter_turns, axes=(0, 1)))
    # zero deltas are skipped rather than applied, so the identity policy is bit-exact
    if params.brightness_delta != 0.0:
        out = out + np.float32(params.brightness_delta)
    if params.contrast_delta != 0.0:
        mean = out.mean()
        out = mean + np.float32(1.0 + params.contrast_delta) * (out - mean)
    return np.clip(out, 0.0, 1.0).astype(np.float32)


def augment(image: np.ndarray, policy: AugmentationPolicy, draw: int) -> np.ndarray:
    """One random content-preserving view of ``image``, deterministic in (policy, draw)."""
    return apply_params(image, sample_params(policy, draw))


def make_view_pair(sample: ImageSample, policy: AugmentationPolicy, draw: int) -> ViewPair:
    """Two independent views of one sample; draws 2*draw and 2*draw + 1."""
    view_a = augment(sample.pixels, policy, 2 * draw)
    view_b = augment(sample.pixels, policy, 2 * draw + 1)
    return ViewPair(source_id=sample.id, view_a=view_a, view_b=view_b)
