"""Command-line entry point for the full pipeline.

Subcommands: synth, pretrain, knn-eval, finetune, benchmark, embed-dump,
serve. Every run resolves one RunConfig (config file values overridden by
flags), executes, and leaves its artifacts plus the resolved config under a
run directory. Identical flags and inputs give byte-identical primary
outputs for everything except `serve`.
"""

from __future__ import annotations

import argparse
import configparser
import json
import os
import socket
import sys
import time
from dataclasses import dataclass
from pathlib import Path

from .augment import AugmentationPolicy
from .checkpoint import load_featurizer, save_checkpoint
from .dataset import load_manifest, make_synthetic_dataset, save_dataset
from .errors import CelestialError, ValidationError
from .index import (
    build_index,
    dump_embeddings,
    embed_manifest,
    kth_neighbor_accuracy,
    label_efficiency_benchmark,
    load_embeddings,
    write_efficiency_report,
    write_knn_report,
)
from .model import (
    DEFAULT_CONV_BLOCKS,
    SMALL_CONV_BLOCKS,
    FeaturizerConfig,
    build_featurizer,
    strip_projection,
)
from .train import (
    HeadConfig,
    TrainConfig,
    evaluate_classifier,
    finetune,
    label_fraction_split,
    pretrain,
)

EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_USAGE = 2

DEFAULT_FRACTIONS = (0.04, 0.1, 0.2, 0.33, 1.0)
DEFAULT_SEEDS = (0, 1, 2)

_ARCH_PRESETS = {
    "default": (DEFAULT_CONV_BLOCKS, 128, 64),
    "small": (SMALL_CONV_BLOCKS, 64, 32),
}


@dataclass(frozen=True)
class RunConfig:
    """Fully resolved settings for one run; written next to the artifacts."""

    manifest: str
    image_size: tuple[int, int]
    policy: AugmentationPolicy
    model: FeaturizerConfig
    train: TrainConfig
    head: HeadConfig
    fractions: tuple[float, ...]
    seeds: tuple[int, ...]
    finetune_epochs: int
    finetune_lr: float
    baseline_epochs: int
    baseline_lr: float
    k_max: int


def _parse_ints(text: str) -> tuple[int, ...]:
    return tuple(int(t) for t in text.split(",") if t.strip())


def _parse_floats(text: str) -> tuple[float, ...]:
    return tuple(float(t) for t in text.split(",") if t.strip())


def _parse_size(text: str) -> tuple[int, int]:
    try:
        h, w = text.lower().split("x")
        return int(h), int(w)
    except ValueError:
        raise ValidationError(f"expected HxW (e.g. 64x64), got {text!r}") from None


class _Resolver:
    """Three-layer lookup: flag value, then config file, then default."""

    def __init__(self, args: argparse.Namespace):
        self.args = args
        self.file = configparser.ConfigParser()
        path = getattr(args, "config", None)
        if path:
            if not Path(path).is_file():
                raise ValidationError(f"config file not found: {path}")
            self.file.read(path, encoding="utf-8")

    def get(self, section: str, key: str, cast, default, flag: str | None = None):
        value = getattr(self.args, flag or key, None)
        if value is not None:
            return value
        if self.file.has_option(section, key):
            return cast(self.file.get(section, key))
        return default


def resolve_config(args: argparse.Namespace) -> RunConfig:
    r = _Resolver(args)
    manifest = r.get("dataset", "manifest", str, "")
    image_size = r.get("dataset", "image_size", _parse_size, (64, 64))

    arch = r.get("model", "arch", str, "default")
    if arch not in _ARCH_PRESETS:
        raise ValidationError(f"unknown arch {arch!r}; choose from {sorted(_ARCH_PRESETS)}")
    preset_blocks, preset_emb, preset_proj = _ARCH_PRESETS[arch]
    filters = r.get("model", "conv_filters", _parse_ints, tuple(b[0] for b in preset_blocks))
    model = FeaturizerConfig(
        input_size=(image_size[0], image_size[1], 3),
        conv_blocks=tuple((f, 3, 1, 2) for f in filters),
        embedding_dim=r.get("model", "embedding_dim", int, preset_emb),
        projection_dim=r.get("model", "projection_dim", int, preset_proj),
    )

    train = TrainConfig(
        epochs=r.get("train", "epochs", int, TrainConfig.epochs),
        batch_size=r.get("train", "batch_size", int, TrainConfig.batch_size),
        learning_rate=r.get("train", "learning_rate", float, TrainConfig.learning_rate, flag="lr"),
        temperature=r.get("train", "temperature", float, TrainConfig.temperature),
        optimizer=r.get("train", "optimizer", str, TrainConfig.optimizer),
        momentum=r.get("train", "momentum", float, TrainConfig.momentum),
        seed=r.get("train", "seed", int, TrainConfig.seed),
    )

    policy = AugmentationPolicy(
        rotations=r.get("augment", "rotations", _parse_ints, (0, 1, 2, 3)),
        brightness_max_delta=r.get("augment", "brightness_max_delta", float, 0.2, flag="brightness"),
        contrast_max_delta=r.get("augment", "contrast_max_delta", float, 0.2, flag="contrast"),
        # one --seed flag drives the whole run unless --augment-seed is given
        seed=r.get("augment", "seed", int, train.seed, flag="augment_seed"),
    )

    return RunConfig(
        manifest=manifest,
        image_size=image_size,
        policy=policy,
        model=model,
        train=train,
        head=HeadConfig(hidden_dim=r.get("head", "hidden_dim", int, HeadConfig.hidden_dim)),
        fractions=r.get("benchmark", "fractions", _parse_floats, DEFAULT_FRACTIONS),
        seeds=r.get("benchmark", "seeds", _parse_ints, DEFAULT_SEEDS),
        finetune_epochs=r.get("benchmark", "finetune_epochs", int, 60),
        finetune_lr=r.get("benchmark", "finetune_lr", float, 0.01),
        baseline_epochs=r.get("benchmark", "baseline_epochs", int, 30),
        baseline_lr=r.get("benchmark", "baseline_lr", float, 0.01),
        k_max=r.get("eval", "k_max", int, 5),
    )


def write_config(config: RunConfig, path: Path) -> Path:
    """INI copy of the resolved run config, for provenance and reuse."""
    ini = configparser.ConfigParser()
    ini["dataset"] = {
        "manifest": config.manifest,
        "image_size": f"{config.image_size[0]}x{config.image_size[1]}",
    }
    ini["augment"] = {
        "rotations": ",".join(str(k) for k in config.policy.rotations),
        "brightness_max_delta": repr(config.policy.brightness_max_delta),
        "contrast_max_delta": repr(config.policy.contrast_max_delta),
        "seed": str(config.policy.seed),
    }
    ini["model"] = {
        "conv_filters": ",".join(str(b[0]) for b in config.model.conv_blocks),
        "embedding_dim": str(config.model.embedding_dim),
        "projection_dim": str(config.model.projection_dim),
    }
    ini["train"] = {
        "epochs": str(config.train.epochs),
        "batch_size": str(config.train.batch_size),
        "learning_rate": repr(config.train.learning_rate),
        "temperature": repr(config.train.temperature),
        "optimizer": config.train.optimizer,
        "momentum": repr(config.train.momentum),
        "seed": str(config.train.seed),
    }
    ini["head"] = {"hidden_dim": str(config.head.hidden_dim)}
    ini["benchmark"] = {
        "fractions": ",".join(repr(p) for p in config.fractions),
        "seeds": ",".join(str(s) for s in config.seeds),
        "finetune_epochs": str(config.finetune_epochs),
        "finetune_lr": repr(config.finetune_lr),
        "baseline_epochs": str(config.baseline_epochs),
        "baseline_lr": repr(config.baseline_lr),
    }
    ini["eval"] = {"k_max": str(config.k_max)}
    with path.open("w", encoding="utf-8") as fh:
        ini.write(fh)
    return path


def resolve_run_dir(args: argparse.Namespace, command: str) -> Path:
    root = Path(args.out or os.environ.get("CELESTIAL_OUT", "runs"))
    name = args.run_name or time.strftime("%Y%m%d-%H%M%S") + "-" + command
    run_dir = root / name
    run_dir.mkdir(parents=True, exist_ok=True)
    return run_dir


def _require_manifest(config: RunConfig):
    if not config.manifest:
        raise ValidationError("--manifest (or [dataset] manifest in the config file) is required")
    return load_manifest(config.manifest, config.image_size)


def _load_stripped(path: str):
    model = load_featurizer(path)
    if model.has_projection:
        model = strip_projection(model)
    return model


# --- subcommands -----------------------------------------------------------------


def cmd_synth(args: argparse.Namespace) -> int:
    run_dir = resolve_run_dir(args, "synth")
    manifest = make_synthetic_dataset(
        args.classes, args.per_class, (args.size, args.size), seed=args.seed
    )
    path = save_dataset(manifest, run_dir)
    print(f"wrote {len(manifest.entries)} images, manifest {path}")
    return EXIT_OK


def cmd_pretrain(args: argparse.Namespace) -> int:
    config = resolve_config(args)
    manifest = _require_manifest(config)
    run_dir = resolve_run_dir(args, "pretrain")
    write_config(config, run_dir / "config.ini")

    model = build_featurizer(config.model, seed=config.train.seed)
    model, history = pretrain(manifest, model, config.policy, config.train)

    full_path = save_checkpoint(model, run_dir / "featurizer_full.ckpt")
    stripped_path = save_checkpoint(strip_projection(model), run_dir / "featurizer.ckpt")
    history.save(run_dir / "history.csv")
    if history.records:
        print(f"pretrained {config.train.epochs} epochs, final loss {history.records[-1].loss:.4f}")
    print(f"wrote {full_path}")
    print(f"wrote {stripped_path}")
    return EXIT_OK


def cmd_knn_eval(args: argparse.Namespace) -> int:
    config = resolve_config(args)
    manifest = _require_manifest(config)
    run_dir = resolve_run_dir(args, "knn-eval")
    write_config(config, run_dir / "config.ini")

    if args.embeddings:
        ids, vectors = load_embeddings(args.embeddings)
        labels = [manifest.entry(sid).label for sid in ids]
    else:
        if not args.checkpoint:
            raise ValidationError("knn-eval needs --checkpoint or --embeddings")
        featurizer = load_featurizer(args.checkpoint)
        ids, vectors, labels = embed_manifest(featurizer, manifest, split=args.split)
    index = build_index(ids, vectors, labels=labels)
    report = kth_neighbor_accuracy(index, k_max=config.k_max)
    path = write_knn_report(report, run_dir / "knn_report.csv")
    for k, acc in enumerate(report.accuracies, start=1):
        print(f"k={k} accuracy={acc:.4f}")
    print(f"wrote {path}")
    return EXIT_OK


def cmd_finetune(args: argparse.Namespace) -> int:
    config = resolve_config(args)
    manifest = _require_manifest(config)
    run_dir = resolve_run_dir(args, "finetune")
    write_config(config, run_dir / "config.ini")

    featurizer = _load_stripped(args.checkpoint)
    split = label_fraction_split(manifest, args.fraction, seed=config.train.seed)
    classifier, history = finetune(featurizer, manifest, split, config.head, config.train)
    accuracy = evaluate_classifier(classifier, manifest, split="test")

    save_checkpoint(classifier, run_dir / "classifier.ckpt")
    history.save(run_dir / "history.csv")
    metrics = {
        "fraction": args.fraction,
        "labeled_count": split.labeled_count,
        "test_accuracy": accuracy,
    }
    (run_dir / "metrics.json").write_text(json.dumps(metrics, sort_keys=True) + "\n", encoding="utf-8")
    print(f"fraction={args.fraction} labeled={split.labeled_count} test_accuracy={accuracy:.4f}")
    return EXIT_OK


def cmd_benchmark(args: argparse.Namespace) -> int:
    config = resolve_config(args)
    manifest = _require_manifest(config)
    run_dir = resolve_run_dir(args, "benchmark")
    write_config(config, run_dir / "config.ini")

    featurizer = _load_stripped(args.checkpoint)
    base = config.train
    report = label_efficiency_benchmark(
        manifest,
        featurizer,
        fractions=list(config.fractions),
        seeds=list(config.seeds),
        head_config=config.head,
        finetune_config=TrainConfig(
            epochs=config.finetune_epochs,
            batch_size=base.batch_size,
            learning_rate=config.finetune_lr,
            optimizer=base.optimizer,
            momentum=base.momentum,
        ),
        baseline_config=TrainConfig(
            epochs=config.baseline_epochs,
            batch_size=base.batch_size,
            learning_rate=config.baseline_lr,
            optimizer=base.optimizer,
            momentum=base.momentum,
        ),
        cell_dir=run_dir / "cells",
        metadata={"manifest": config.manifest},
    )
    path = write_efficiency_report(report, run_dir / "efficiency.csv")
    for row in report.rows:
        print(
            f"p={row.fraction:g} labeled={row.labeled_count} "
            f"ssl={row.ssl_accuracy:.4f}±{row.ssl_sd:.4f} "
            f"baseline={row.baseline_accuracy:.4f}±{row.baseline_sd:.4f}"
        )
    print(f"wrote {path}")
    return EXIT_OK


def cmd_embed_dump(args: argparse.Namespace) -> int:
    config = resolve_config(args)
    manifest = _require_manifest(config)
    run_dir = resolve_run_dir(args, "embed-dump")
    write_config(config, run_dir / "config.ini")

    featurizer = load_featurizer(args.checkpoint)
    ids, vectors, _ = embed_manifest(featurizer, manifest, split=args.split)
    path = dump_embeddings(ids, vectors, run_dir / "embeddings.bin")
    print(f"wrote {path} ({len(ids)} x {vectors.shape[1]})")
    return EXIT_OK


def cmd_serve(args: argparse.Namespace) -> int:
    import uvicorn

    from .service import create_app

    config = resolve_config(args)
    manifest = _require_manifest(config)
    featurizer = _load_stripped(args.checkpoint)
    state_dir = Path(args.state_dir)
    state_dir.mkdir(parents=True, exist_ok=True)
    write_config(config, state_dir / "config.ini")
    app = create_app(manifest, featurizer, state_dir, alpha=args.alpha)

    sock = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
    sock.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
    sock.bind((args.host, args.port))
    host, port = sock.getsockname()[:2]
    print(f"serving on http://{host}:{port}", flush=True)
    server = uvicorn.Server(uvicorn.Config(app, log_level="warning"))
    server.run(sockets=[sock])
    return EXIT_OK


# --- parser ----------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="celestial",
        description="Self-supervised scene classification: pretrain, evaluate, refine, serve.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p: argparse.ArgumentParser):
        p.add_argument("--config", help="INI config file; flags override its values")
        p.add_argument("--out", help="output root (default $CELESTIAL_OUT or ./runs)")
        p.add_argument("--run-name", help="run directory name (default: timestamp)")

    def dataset_flags(p: argparse.ArgumentParser):
        p.add_argument("--manifest", help="dataset manifest path")
        p.add_argument("--image-size", type=_parse_size, dest="image_size", help="decode size HxW")

    def model_flags(p: argparse.ArgumentParser):
        p.add_argument("--arch", choices=sorted(_ARCH_PRESETS), help="architecture preset")
        p.add_argument("--conv-filters", type=_parse_ints, dest="conv_filters")
        p.add_argument("--embedding-dim", type=int, dest="embedding_dim")
        p.add_argument("--projection-dim", type=int, dest="projection_dim")

    def train_flags(p: argparse.ArgumentParser):
        p.add_argument("--epochs", type=int)
        p.add_argument("--batch-size", type=int, dest="batch_size")
        p.add_argument("--lr", type=float)
        p.add_argument("--temperature", type=float)
        p.add_argument("--optimizer", choices=("sgd", "adam"))
        p.add_argument("--momentum", type=float)
        p.add_argument("--seed", type=int)

    p = sub.add_parser("synth", help="generate the synthetic toy dataset")
    common(p)
    p.add_argument("--classes", type=int, default=8)
    p.add_argument("--per-class", type=int, default=100, dest="per_class")
    p.add_argument("--size", type=int, default=64)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_synth, parser=p)

    p = sub.add_parser("pretrain", help="Tier 1 contrastive pretraining")
    common(p)
    dataset_flags(p)
    model_flags(p)
    train_flags(p)
    p.add_argument("--rotations", type=_parse_ints)
    p.add_argument("--brightness", type=float, help="max brightness delta")
    p.add_argument("--contrast", type=float, help="max contrast delta")
    p.add_argument("--augment-seed", type=int, dest="augment_seed")
    p.set_defaults(func=cmd_pretrain, parser=p)

    p = sub.add_parser("knn-eval", help="k-th neighbor accuracy of an embedding space")
    common(p)
    dataset_flags(p)
    p.add_argument("--checkpoint", help="featurizer checkpoint")
    p.add_argument("--embeddings", help="embedding dump to evaluate instead of a checkpoint")
    p.add_argument("--split", default="test")
    p.add_argument("--k-max", type=int, dest="k_max")
    p.set_defaults(func=cmd_knn_eval, parser=p)

    p = sub.add_parser("finetune", help="Tier 2 head training on a label fraction")
    common(p)
    dataset_flags(p)
    train_flags(p)
    p.add_argument("--checkpoint", required=True, help="stripped featurizer checkpoint")
    p.add_argument("--fraction", type=float, default=1.0)
    p.add_argument("--head-hidden", type=int, dest="hidden_dim")
    p.set_defaults(func=cmd_finetune, parser=p)

    p = sub.add_parser("benchmark", help="label-efficiency sweep (fine-tune vs baseline)")
    common(p)
    dataset_flags(p)
    train_flags(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--fractions", type=_parse_floats)
    p.add_argument("--seeds", type=_parse_ints)
    p.add_argument("--finetune-epochs", type=int, dest="finetune_epochs")
    p.add_argument("--finetune-lr", type=float, dest="finetune_lr")
    p.add_argument("--baseline-epochs", type=int, dest="baseline_epochs")
    p.add_argument("--baseline-lr", type=float, dest="baseline_lr")
    p.add_argument("--head-hidden", type=int, dest="hidden_dim")
    p.set_defaults(func=cmd_benchmark, parser=p)

    p = sub.add_parser("embed-dump", help="write embeddings for a manifest split")
    common(p)
    dataset_flags(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--split", default=None)
    p.set_defaults(func=cmd_embed_dump, parser=p)

    p = sub.add_parser("serve", help="similarity-search service with relevance feedback")
    common(p)
    dataset_flags(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=8000, help="0 binds an ephemeral port")
    p.add_argument("--state-dir", default="service-state", dest="state_dir")
    p.add_argument("--alpha", type=float, default=0.5, help="relevance blend weight")
    p.set_defaults(func=cmd_serve, parser=p)

    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ValidationError as exc:
        sub = getattr(args, "parser", None)
        if sub is not None:
            sub.print_usage(sys.stderr)
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except CelestialError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FAILURE
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FAILURE


if __name__ == "__main__":
    sys.exit(main())
