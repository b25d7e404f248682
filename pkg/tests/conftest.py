"""Session-wide fixtures: the toy corpus and calibrated pretrained featurizers.

Pretraining at toy scale costs about a minute per run, so checkpoints are
produced through the CLI once per session and cached on disk; tests request
only the (seed, corpus) combinations they need.
"""

import dataclasses
from pathlib import Path

import numpy as np
import pytest

from celestial.cli import main
from celestial.dataset import load_manifest, write_manifest

TOY_CLASSES = 8
TOY_PER_CLASS = 100
TOY_SIZE = 64
TOY_CHANCE = 1.0 / TOY_CLASSES

# settings calibrated on the toy set: contrastive pretraining, frozen-head
# fine-tuning, and the end-to-end supervised baseline
PRETRAIN_FLAGS = [
    "--image-size", "64x64",
    "--arch", "small",
    "--epochs", "40",
    "--batch-size", "64",
    "--optimizer", "adam",
    "--lr", "3e-3",
    "--augment-seed", "0",
]
HEAD_KWARGS = dict(epochs=100, batch_size=64, optimizer="adam", learning_rate=1e-2)
BASELINE_KWARGS = dict(epochs=30, batch_size=64, optimizer="adam", learning_rate=3e-3)


class ToyBundle:
    """Disk corpus plus lazily pretrained checkpoints, keyed by (seed, corpus)."""

    def __init__(self, root: Path):
        self.root = root
        assert main(["synth", "--classes", str(TOY_CLASSES), "--per-class", str(TOY_PER_CLASS),
                     "--size", str(TOY_SIZE), "--seed", "0",
                     "--out", str(root), "--run-name", "corpus"]) == 0
        self.corpus_dir = root / "corpus"
        self.manifest_path = self.corpus_dir / "manifest.tsv"
        self.manifest = load_manifest(self.manifest_path, image_size=(TOY_SIZE, TOY_SIZE))

    def quarter_manifest_path(self, seed: int) -> Path:
        """Manifest keeping a random quarter of the train split (test intact)."""
        path = self.corpus_dir / f"manifest_quarter_s{seed}.tsv"
        if not path.exists():
            train_ids = [e.id for e in self.manifest.split_entries("train")]
            rng = np.random.default_rng(100 + seed)
            keep = set(rng.choice(train_ids, size=len(train_ids) // 4, replace=False))
            entries = [e for e in self.manifest.entries if e.split == "test" or e.id in keep]
            write_manifest(dataclasses.replace(self.manifest, entries=entries), path)
        return path

    def featurizer(self, seed: int, corpus: str = "full") -> Path:
        """Stripped checkpoint pretrained with the calibrated flags (cached)."""
        run_name = f"pretrain_{corpus}_s{seed}"
        checkpoint = self.root / run_name / "featurizer.ckpt"
        if not checkpoint.exists():
            manifest = {
                "full": self.manifest_path,
                "quarter": self.quarter_manifest_path(seed),
            }[corpus]
            assert main(["pretrain", "--manifest", str(manifest), *PRETRAIN_FLAGS,
                         "--seed", str(seed),
                         "--out", str(self.root), "--run-name", run_name]) == 0
        return checkpoint


@pytest.fixture(scope="session")
def toy(tmp_path_factory) -> ToyBundle:
    return ToyBundle(tmp_path_factory.mktemp("toy"))
