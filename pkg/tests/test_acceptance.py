"""Acceptance suite.

One test per release criterion, in order, each with its tolerance spelled out;
`pytest -v` therefore prints exactly one pass/fail line per criterion.

The statistical criteria run on the toy corpus (8 classes x 100 images, 64x64)
with hyperparameters calibrated once and then frozen in ``conftest.py``; the
checked margins are several times wider than the seed-to-seed spread observed
during calibration.
"""

import csv
import dataclasses
import math
import time
from pathlib import Path

import numpy as np
import pytest

from celestial import (
    AugmentationPolicy,
    ContrastiveBatch,
    FeaturizerConfig,
    HeadConfig,
    TrainConfig,
    build_featurizer,
    build_index,
    contrastive_loss,
    embed,
    knn_query,
    kth_neighbor_accuracy,
    label_fraction_split,
    load_checkpoint,
    make_synthetic_dataset,
    pretrain,
    save_checkpoint,
    strip_projection,
    finetune,
    train_supervised_baseline,
)
from celestial.cli import main
from celestial.errors import CheckpointFormatError, IntegrityError
from celestial.index import embed_manifest, run_benchmark_cell
from celestial.model import state_bytes
from celestial.service import ServiceState
from celestial.train import evaluate_classifier

from conftest import BASELINE_KWARGS, HEAD_KWARGS, TOY_CHANCE

SEEDS = (0, 1, 2)


def random_batch(n_pairs: int, dim: int, seed: int) -> ContrastiveBatch:
    rng = np.random.default_rng(seed)
    views = rng.normal(size=(2, n_pairs, dim))
    views /= np.linalg.norm(views, axis=2, keepdims=True)
    return ContrastiveBatch.from_views(views[0], views[1])


def one_nn_accuracy(featurizer, manifest) -> float:
    """1-NN label agreement over the test-split embeddings."""
    ids, embeddings, labels = embed_manifest(featurizer, manifest, split="test")
    report = kth_neighbor_accuracy(build_index(ids, embeddings, labels=labels), k_max=1)
    return report.accuracies[0]


def test_gradient_oracle():
    # analytic gradients vs central finite differences (double precision,
    # step 1e-4): max relative error < 1e-4 over 21 random batches, in < 1 min
    start = time.perf_counter()
    step = 1e-4
    worst = 0.0
    for batch_index, total in enumerate(7 * [2] + 7 * [4] + 7 * [16]):
        batch = random_batch(total, 6, seed=batch_index)
        _, grads = contrastive_loss(batch, temperature=0.5)
        fd = np.zeros_like(batch.vectors)
        for i in range(batch.size):
            for j in range(batch.vectors.shape[1]):
                plus, minus = batch.vectors.copy(), batch.vectors.copy()
                plus[i, j] += step
                minus[i, j] -= step
                up, _ = contrastive_loss(ContrastiveBatch(plus, batch.pair), 0.5)
                down, _ = contrastive_loss(ContrastiveBatch(minus, batch.pair), 0.5)
                fd[i, j] = (up - down) / (2 * step)
        denom = np.maximum(np.maximum(np.abs(fd), np.abs(grads)), 1e-8)
        worst = max(worst, float(np.max(np.abs(fd - grads) / denom)))
    elapsed = time.perf_counter() - start
    assert worst < 1e-4, f"max relative gradient error {worst:.2e}"
    assert elapsed < 60.0, f"gradient oracle took {elapsed:.1f}s"


def test_closed_form_losses():
    # all-identical batch of 2N=4: every similarity is 1, loss = log 3 (1e-9);
    # identical pairs with orthogonal negatives: log(exp(1/t) + 2N - 2) - 1/t
    identical = np.tile(np.full((1, 5), 1.0 / math.sqrt(5)), (4, 1))
    loss, _ = contrastive_loss(
        ContrastiveBatch(identical, np.array([2, 3, 0, 1])), temperature=0.5
    )
    assert loss == pytest.approx(math.log(3.0), abs=1e-9)

    for n_pairs, temperature in ((2, 0.5), (4, 0.5), (8, 0.25)):
        eye = np.eye(n_pairs)
        loss, _ = contrastive_loss(ContrastiveBatch.from_views(eye, eye), temperature)
        expected = math.log(math.exp(1 / temperature) + 2 * n_pairs - 2) - 1 / temperature
        assert loss == pytest.approx(expected, abs=1e-9)


def test_knn_oracle_equivalence():
    # knn_query == exhaustive sort by (-similarity, id) on 100 random queries
    # over n=256, d=32, with duplicate vectors forcing ties; exact match, < 10 s
    start = time.perf_counter()
    rng = np.random.default_rng(17)
    vectors = rng.normal(size=(256, 32))
    vectors[200:232] = vectors[0]  # exercise the id tie-break
    ids = [f"s{i:03d}" for i in range(256)]
    labels = [i % 8 for i in range(256)]
    index = build_index(ids, vectors, labels=labels)

    for q in range(100):
        query = rng.normal(size=32)
        sims = index.vectors @ (query / np.linalg.norm(query))
        order = sorted(range(256), key=lambda i: (-sims[i], ids[i]))
        expected = [(ids[i], sims[i]) for i in order[:25]]
        got = knn_query(index, query, k=25)
        assert [i for i, _ in got] == [i for i, _ in expected], f"query {q}"
        assert np.allclose([s for _, s in got], [s for _, s in expected], atol=1e-12)
    elapsed = time.perf_counter() - start
    assert elapsed < 10.0, f"knn oracle took {elapsed:.1f}s"


def test_determinism(toy, tmp_path):
    # identical flags -> byte-identical checkpoints; identical split and
    # benchmark-cell inputs -> identical outputs
    flags = ["pretrain", "--manifest", str(toy.manifest_path), "--image-size", "64x64",
             "--arch", "small", "--epochs", "2", "--batch-size", "64",
             "--optimizer", "adam", "--lr", "3e-3", "--seed", "5", "--augment-seed", "0",
             "--out", str(tmp_path)]
    assert main(flags + ["--run-name", "a"]) == 0
    assert main(flags + ["--run-name", "b"]) == 0
    for name in ("featurizer.ckpt", "featurizer_full.ckpt"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()

    first = label_fraction_split(toy.manifest, 0.2, seed=3)
    second = label_fraction_split(toy.manifest, 0.2, seed=3)
    assert first.labeled_by_class == second.labeled_by_class

    featurizer = load_checkpoint(toy.featurizer(0))
    cells = []
    for cell_dir in (tmp_path / "cells_a", tmp_path / "cells_b"):
        run_benchmark_cell(
            toy.manifest, featurizer, p=0.0125, seed=0,
            head_config=HeadConfig(hidden_dim=64),
            finetune_config=TrainConfig(epochs=2, optimizer="adam", learning_rate=1e-2),
            baseline_config=TrainConfig(epochs=1, optimizer="adam", learning_rate=3e-3),
            cell_dir=cell_dir,
        )
        cells.append((cell_dir / "cell_p0.0125_s0.json").read_bytes())
    assert cells[0] == cells[1]


def test_label_blindness():
    # hiding every label leaves the pretraining trajectory bit-identical
    labeled = make_synthetic_dataset(2, 10, (16, 16), seed=0)
    entries = [dataclasses.replace(e, label=None) for e in labeled.entries]
    blind = dataclasses.replace(labeled, entries=entries)
    config = FeaturizerConfig.small(input_size=(16, 16, 3), embedding_dim=16, projection_dim=8)
    train = TrainConfig(epochs=2, batch_size=8, optimizer="adam", learning_rate=1e-3, seed=0)
    policy = AugmentationPolicy(seed=0)

    runs = []
    for manifest in (labeled, blind):
        model, history = pretrain(manifest, build_featurizer(config, seed=0), policy, train)
        runs.append((state_bytes(model), [r.loss for r in history.records]))
    assert runs[0][0] == runs[1][0]
    assert runs[0][1] == runs[1][1]


def test_fig4_trend_more_unlabeled_data_helps(toy):
    # mean 1-NN accuracy over 3 seeds: pretraining on 100% of the unlabeled
    # toy set strictly beats pretraining on 25% of it; < 15 min
    start = time.perf_counter()
    full, quarter = [], []
    for seed in SEEDS:
        full.append(one_nn_accuracy(load_checkpoint(toy.featurizer(seed, "full")), toy.manifest))
        quarter.append(
            one_nn_accuracy(load_checkpoint(toy.featurizer(seed, "quarter")), toy.manifest)
        )
    elapsed = time.perf_counter() - start
    assert np.mean(full) > np.mean(quarter), (
        f"full-corpus 1-NN {np.mean(full):.3f} not above quarter-corpus {np.mean(quarter):.3f} "
        f"(per seed: {full} vs {quarter})"
    )
    assert elapsed < 900.0, f"fig4 trend took {elapsed:.0f}s"


def test_fig5_trend_label_efficiency(toy):
    # at 1 label/class (p=0.0125 on 80 train images/class), the fine-tuned
    # frozen model beats the supervised baseline by >= 10 accuracy points and
    # the baseline sits within 10 points of chance (1/8); at p=1.0 the two
    # land within 10 points of each other; means over 3 seeds, < 30 min
    start = time.perf_counter()
    head_config = HeadConfig(hidden_dim=64)
    scores = {(p, kind): [] for p in (0.0125, 1.0) for kind in ("ssl", "base")}
    for seed in SEEDS:
        featurizer = load_checkpoint(toy.featurizer(seed, "full"))
        for p in (0.0125, 1.0):
            split = label_fraction_split(toy.manifest, p, seed)
            classifier, _ = finetune(
                featurizer, toy.manifest, split, head_config,
                TrainConfig(seed=seed, **HEAD_KWARGS),
            )
            scores[(p, "ssl")].append(evaluate_classifier(classifier, toy.manifest))
            baseline, _ = train_supervised_baseline(
                toy.manifest, split, featurizer.config, head_config,
                TrainConfig(seed=seed, **BASELINE_KWARGS),
            )
            scores[(p, "base")].append(evaluate_classifier(baseline, toy.manifest))
    elapsed = time.perf_counter() - start

    ssl_low = float(np.mean(scores[(0.0125, "ssl")]))
    base_low = float(np.mean(scores[(0.0125, "base")]))
    ssl_full = float(np.mean(scores[(1.0, "ssl")]))
    base_full = float(np.mean(scores[(1.0, "base")]))
    assert ssl_low >= base_low + 0.10, (
        f"at 1 label/class: ssl {ssl_low:.3f} does not beat baseline {base_low:.3f} by 10 points"
    )
    assert abs(base_low - TOY_CHANCE) <= 0.10, (
        f"baseline at 1 label/class {base_low:.3f} not within 10 points of chance {TOY_CHANCE}"
    )
    assert abs(ssl_full - base_full) <= 0.10, (
        f"at p=1.0: ssl {ssl_full:.3f} and baseline {base_full:.3f} differ by > 10 points"
    )
    assert elapsed < 1800.0, f"fig5 trend took {elapsed:.0f}s"


def test_optimization_sanity(toy):
    # contrastive pretraining makes progress: final epoch mean loss < first
    # epoch mean loss on the toy set for all 3 seeds
    for seed in SEEDS:
        toy.featurizer(seed, "full")
        history_path = toy.root / f"pretrain_full_s{seed}" / "history.csv"
        with history_path.open() as fh:
            losses = [float(row["loss"]) for row in csv.DictReader(fh)]
        assert losses[-1] < losses[0], (
            f"seed {seed}: final loss {losses[-1]:.4f} >= first {losses[0]:.4f}"
        )


def test_freezing_contract(toy, tmp_path):
    # featurizer weights are bit-equal before/after fine-tuning and before/
    # after a service refinement job
    featurizer = load_checkpoint(toy.featurizer(0))
    frozen = state_bytes(featurizer)

    split = label_fraction_split(toy.manifest, 0.0125, seed=0)
    finetune(featurizer, toy.manifest, split, HeadConfig(hidden_dim=64),
             TrainConfig(epochs=2, optimizer="adam", learning_rate=1e-2, seed=0))
    assert state_bytes(featurizer) == frozen

    state = ServiceState(toy.manifest, featurizer, tmp_path / "state")
    session = state.create_session()
    session.feedback[toy.manifest.entries[0].id] = "approve"
    session.feedback[toy.manifest.entries[1].id] = "decline"
    job = state.start_refinement(session)
    deadline = time.time() + 60
    while job.status not in ("done", "failed") and time.time() < deadline:
        time.sleep(0.05)
    assert job.status == "done", job.error
    assert state_bytes(state.featurizer) == state.base_bytes
    assert state.base_bytes == frozen


def test_checkpoint_round_trip(tmp_path):
    # save -> load -> embed is bit-identical on a fixed batch, and flipping a
    # single byte of the checkpoint is detected on load
    model = strip_projection(build_featurizer(FeaturizerConfig.small(), seed=9))
    rng = np.random.default_rng(0)
    batch = rng.random((8, 64, 64, 3), dtype=np.float32)
    before = embed(model, batch)

    path = save_checkpoint(model, tmp_path / "model.ckpt")
    after = embed(load_checkpoint(path), batch)
    assert before.tobytes() == after.tobytes()

    data = bytearray(Path(path).read_bytes())
    data[len(data) // 2] ^= 0xFF
    corrupt = tmp_path / "corrupt.ckpt"
    corrupt.write_bytes(bytes(data))
    with pytest.raises((IntegrityError, CheckpointFormatError)):
        load_checkpoint(corrupt)
