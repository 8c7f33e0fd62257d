"""Command-line entry point.

    dgad train  --config run.toml [--test-object K] [overrides...]
    dgad test   --config run.toml [--test-object K] [--score rec|dir|both]
    dgad ablate --config run.toml [--variants DGAD,GAN_ONLY]
    dgad --phase test --test-object 1          # alias form

The config file is flat TOML (``key = value``); command-line flags win.
"""
from __future__ import annotations

import argparse
import datetime as _dt
import json
import logging
import shutil
import sys
from dataclasses import asdict, replace
from pathlib import Path
from typing import List, Optional, Sequence

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from . import __version__
from .data import DatasetName, DatasetSpec, Split, class_index, class_names, load_dataset
from .evaluation import (AblationVariant, Scorer, Subset, discriminator_accuracy, evaluate_one_class,
                         run_ablation_grid, write_aggregate, write_class_results)
from .losses import LossWeights
from .networks import NetConfig, PaddingMode
from .pretext import Protocol
from .trainer import CheckpointError, TrainConfig, Trainer, latest_checkpoint, train

log = logging.getLogger("dgad")

DEFAULTS = {
    "dataset": "cifar_like",
    "data_root": "data/cifar-10-batches-py",
    "image_size": 32,
    "image_channels": 3,
    "classes": None,
    "protocol": 1,
    "padding": "symmetric",
    "coord": False,
    "compactness": True,
    "compactness_mode": "channel",
    "latent_channels": 128,
    "base_width": 64,
    "disc_width": 92,
    "batch_size": 64,
    "learning_rate": 1e-4,
    "adam_beta1": 0.5,
    "adam_beta2": 0.999,
    "iterations": 10000,
    "epochs": None,
    "checkpoint_every": 1000,
    "lambda_cls": 10.0,
    "lambda_rec": 20.0,
    "lambda_cmp": 100.0,
    "lambda_s": 10.0,
    "augment_zoom": False,
    "seed": 0,
    "score": "rec",
    "run_dir": "runs/default",
    "variants": ["GAN_ONLY", "DGAD_MINUS_CL", "DGAD_ZERO_PAD", "DGAD_COORD", "DGAD"],
    "dirichlet_subsample": 18,
    "n_train": 2000,
    "n_test_per_class": 500,
    "jobs": 1,
}


class UsageError(Exception):
    pass


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="dgad", description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    p.add_argument("command", nargs="?", choices=["train", "test", "ablate"])
    p.add_argument("--phase", choices=["train", "test", "ablate"], help="alias for the command")
    p.add_argument("--config", type=Path)
    p.add_argument("--test-object", "--test_object", dest="test_object", help="class to train/test")
    p.add_argument("--protocol", type=int, choices=[1, 2, 3])
    p.add_argument("--padding", choices=["symmetric", "zero"])
    p.add_argument("--coord", action="store_const", const=True, default=None)
    p.add_argument("--no-compactness", dest="compactness", action="store_const", const=False, default=None)
    p.add_argument("--score", choices=["rec", "dir", "both"])
    p.add_argument("--seed", type=int)
    p.add_argument("--run-dir", type=Path)
    p.add_argument("--iterations", type=int)
    p.add_argument("--variants", help="comma-separated ablation variants")
    p.add_argument("--jobs", type=int, help="parallel ablation cells")
    p.add_argument("--force", action="store_true", help="overwrite existing outputs")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def load_settings(args: argparse.Namespace) -> dict:
    settings = dict(DEFAULTS)
    if args.config is not None:
        if not args.config.is_file():
            raise UsageError(f"config file {args.config} not found")
        with open(args.config, "rb") as fh:
            try:
                cfg = tomllib.load(fh)
            except tomllib.TOMLDecodeError as exc:
                raise UsageError(f"cannot parse {args.config}: {exc}") from exc
        unknown = set(cfg) - set(DEFAULTS)
        if unknown:
            raise UsageError(f"unknown config keys: {', '.join(sorted(unknown))}")
        settings.update(cfg)
    for key in ("protocol", "padding", "coord", "compactness", "score", "seed", "iterations", "jobs"):
        value = getattr(args, key)
        if value is not None:
            settings[key] = value
    if args.run_dir is not None:
        settings["run_dir"] = str(args.run_dir)
    if args.variants is not None:
        settings["variants"] = [v for v in args.variants.split(",") if v]
    return settings


def train_config(s: dict) -> TrainConfig:
    protocol = Protocol.parse(s["protocol"])
    net = NetConfig.for_protocol(
        protocol, image_size=int(s["image_size"]), image_channels=int(s["image_channels"]),
        latent_channels=int(s["latent_channels"]), base_width=int(s["base_width"]),
        disc_width=int(s["disc_width"]), padding_mode=PaddingMode(s["padding"]), use_coord=bool(s["coord"]),
    )
    return TrainConfig(
        protocol=protocol, net=net,
        weights=LossWeights(float(s["lambda_cls"]), float(s["lambda_rec"]), float(s["lambda_cmp"])),
        batch_size=int(s["batch_size"]), learning_rate=float(s["learning_rate"]),
        adam_beta1=float(s["adam_beta1"]), adam_beta2=float(s["adam_beta2"]), iterations=int(s["iterations"]),
        epochs=None if s["epochs"] is None else int(s["epochs"]), seed=int(s["seed"]),
        checkpoint_every=int(s["checkpoint_every"]), compactness_enabled=bool(s["compactness"]),
        compactness_mode=s["compactness_mode"], augment_zoom=bool(s["augment_zoom"]),
    )


def dataset_spec(s: dict, normal_class, split: Split) -> DatasetSpec:
    return DatasetSpec(
        name=DatasetName(s["dataset"]), root=s.get("data_root"), image_size=int(s["image_size"]),
        normal_class=normal_class, split=split, n_train=int(s["n_train"]),
        n_test_per_class=int(s["n_test_per_class"]), seed=int(s["seed"]),
        extra={"channels": int(s["image_channels"]), "augment": False},
    )


def selected_classes(s: dict, test_object) -> List:
    if test_object is not None:
        return [int(test_object) if str(test_object).isdigit() else test_object]
    if s.get("classes") is not None:
        return list(s["classes"])
    names = class_names(dataset_spec(s, 0, Split.TEST))
    return list(range(len(names)))


def _normal_label(s: dict, normal_class) -> int:
    return class_index(normal_class, class_names(dataset_spec(s, normal_class, Split.TEST)))


def _fresh_dir(path: Path, force: bool) -> None:
    if path.exists():
        if not force:
            raise UsageError(f"{path} already exists; pass --force to overwrite")
        shutil.rmtree(path)


def run_manifest(s: dict, config: TrainConfig, spec: DatasetSpec, argv: Sequence[str]) -> dict:
    spec_d = asdict(spec)
    spec_d.update(name=spec.name.value, split=spec.split.value, root=None if spec.root is None else str(spec.root))
    return {
        "config": config.to_dict(),
        "dataset": spec_d,
        "settings": s,
        "version": __version__,
        "seed": config.seed,
        "argv": list(argv),
        "created": _dt.datetime.now(_dt.timezone.utc).isoformat(),
    }


def cmd_train(s: dict, classes: Sequence, force: bool, argv: Sequence[str]) -> int:
    run_dir = Path(s["run_dir"])
    config = train_config(s)
    jobs = []
    for c in classes:
        spec = dataset_spec(s, c, Split.TRAIN)
        samples = load_dataset(spec)
        jobs.append((c, spec, samples))
    for c, _, _ in jobs:
        if (run_dir / f"class_{c}").exists() and not force:
            raise UsageError(f"{run_dir / f'class_{c}'} already exists; pass --force to overwrite")
    for c, spec, samples in jobs:
        class_dir = run_dir / f"class_{c}"
        _fresh_dir(class_dir, force)
        class_dir.mkdir(parents=True)
        manifest = run_manifest(s, config, spec, argv)
        (class_dir / "manifest.json").write_text(json.dumps(manifest, indent=2) + "\n")
        log.info("training class %s on %d samples for %d iterations", c, len(samples),
                 config.total_iterations(len(samples)))
        ckpt = train(config, samples, class_dir)
        log.info("class %s: final checkpoint %s", c, ckpt)
    return 0


def _scorers(score: str) -> List[Scorer]:
    return [Scorer.S_REC, Scorer.S_DIR] if score == "both" else [Scorer(score)]


def cmd_test(s: dict, classes: Sequence, force: bool) -> int:
    run_dir = Path(s["run_dir"])
    results_dir = run_dir / "results"
    scorers = _scorers(s["score"])
    models = {}
    for c in classes:
        ckpt = latest_checkpoint(run_dir / f"class_{c}")
        if ckpt is None:
            raise FileNotFoundError(f"no checkpoint for class {c}: expected {run_dir / f'class_{c}' / 'ckpt-<N>'}")
        models[c] = Trainer.load_checkpoint(ckpt)
    table = {}
    for c in classes:
        trainer = models[c]
        test_samples = load_dataset(dataset_spec(s, c, Split.TEST))
        train_samples = load_dataset(dataset_spec(s, c, Split.TRAIN)) if Scorer.S_DIR in scorers else None
        label = _normal_label(s, c)
        out = results_dir / f"class_{c}"
        _fresh_dir(out, force)
        results = [evaluate_one_class(trainer, test_samples, label, sc, train_samples, float(s["lambda_s"]),
                                      dirichlet_subsample=int(s["dirichlet_subsample"]), dirichlet_seed=int(s["seed"]))
                   for sc in scorers]
        write_class_results(results, out)
        if trainer.config.protocol is not Protocol.ROTATION or Scorer.S_DIR in scorers:
            acc = {sub.value: discriminator_accuracy(trainer, test_samples, label, sub) for sub in Subset}
            (out / "discriminator_accuracy.json").write_text(json.dumps(acc, indent=2) + "\n")
        for r in results:
            table.setdefault(f"DGAD (s_{r.scorer.value})", {})[c] = r.auc
            log.info("class %s s_%s AUC %.4f (%.1f im/s)", c, r.scorer.value, r.auc, r.throughput)
    results_dir.mkdir(parents=True, exist_ok=True)
    write_aggregate(table, list(classes), results_dir / "aggregate.csv")
    return 0


class _Provider:
    """Picklable (train, test) loader for ablation cells."""

    def __init__(self, settings: dict):
        self.settings = settings

    def __call__(self, normal_class):
        s = self.settings
        return (load_dataset(dataset_spec(s, normal_class, Split.TRAIN)),
                load_dataset(dataset_spec(s, normal_class, Split.TEST)))


def cmd_ablate(s: dict, classes: Sequence, force: bool) -> int:
    variants = [AblationVariant.parse(v) for v in s["variants"]]
    out = Path(s["run_dir"]) / "ablation"
    _fresh_dir(out, force)
    rows = run_ablation_grid(variants, train_config(s), _Provider(s), classes, out, _scorers(s["score"]),
                             n_jobs=int(s["jobs"]))
    for r in rows:
        log.info("%s class %s s_%s AUC %.4f", r["variant"], r["class"], r["scorer"], r["auc"])
    return 0


def main(argv: Optional[Sequence[str]] = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    if args.command and args.phase and args.command != args.phase:
        parser.print_usage(sys.stderr)
        print(f"dgad: conflicting command {args.command!r} and --phase {args.phase!r}", file=sys.stderr)
        return 2
    command = args.command or args.phase or "train"
    try:
        settings = load_settings(args)
        classes = selected_classes(settings, args.test_object)
        if command == "train":
            return cmd_train(settings, classes, args.force, argv)
        if command == "test":
            return cmd_test(settings, classes, args.force)
        return cmd_ablate(settings, classes, args.force)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"dgad: error: {exc}", file=sys.stderr)
        return 2
    except (FileNotFoundError, ValueError, CheckpointError) as exc:
        print(f"dgad: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
