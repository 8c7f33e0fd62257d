"""Alternating adversarial training: one discriminator update, then one
encoder/decoder update, on the same batch and the same sampled transforms.
"""
from __future__ import annotations

import csv
import json
import logging
import math
from contextlib import contextmanager
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import torch

from . import __version__
from .data import Sample, random_zoom_batch, stack_images
from .losses import (CSV_FIELDS, LossReport, LossWeights, adversarial_loss_d, adversarial_loss_g,
                     classification_loss_d, classification_loss_g, compactness_loss, reconstruction_loss,
                     total_losses)
from .networks import (Decoder, Discriminator, Encoder, NetConfig, build_decoder, build_discriminator,
                       build_encoder)
from .pretext import Protocol, apply_transforms, labels_to_tensor, normal_label, sample_transform

log = logging.getLogger(__name__)

CHECKPOINT_FILES = ("encoder.pt", "decoder.pt", "discriminator.pt", "optimizers.pt", "state.json",
                    "manifest.json")


class NonFiniteLossError(FloatingPointError):
    def __init__(self, iteration: int, terms: Dict[str, float]):
        bad = [k for k, v in terms.items() if not math.isfinite(v)]
        super().__init__(f"non-finite loss at iteration {iteration}: {', '.join(bad)}; all terms: {terms}")
        self.iteration = iteration
        self.terms = terms


class CheckpointError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    protocol: Protocol = Protocol.ROTATION
    net: Optional[NetConfig] = None
    weights: LossWeights = field(default_factory=LossWeights)
    batch_size: int = 64
    learning_rate: float = 1e-4
    adam_beta1: float = 0.5
    adam_beta2: float = 0.999
    iterations: int = 10000
    # when set, overrides ``iterations`` with epochs * batches-per-epoch
    epochs: Optional[int] = None
    seed: int = 0
    checkpoint_every: int = 1000
    compactness_enabled: bool = True
    compactness_mode: str = "channel"
    # GAN-only ablation: restore x_t by pixel L1 towards x_r instead of classifier guidance
    pixel_restoration: bool = False
    augment_zoom: bool = False

    def __post_init__(self):
        self.protocol = Protocol.parse(self.protocol)
        if self.net is None:
            self.net = NetConfig.for_protocol(self.protocol)
        elif isinstance(self.net, dict):
            self.net = NetConfig.from_dict(self.net)
        if isinstance(self.weights, dict):
            self.weights = LossWeights(**self.weights)
        if self.net.label_dim != self.protocol.label_dim or tuple(self.net.label_blocks) != self.protocol.blocks:
            self.net = replace(self.net, label_dim=self.protocol.label_dim, label_blocks=self.protocol.blocks)
        for name in ("batch_size", "iterations", "checkpoint_every"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.batch_size < 2:
            raise ValueError("batch_size must be >= 2 for the compactness loss")
        if self.epochs is not None and self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if not (self.learning_rate > 0 and 0 <= self.adam_beta1 < 1 and 0 <= self.adam_beta2 < 1):
            raise ValueError("invalid optimizer settings")
        if self.compactness_mode not in ("channel", "spatial"):
            raise ValueError(f"unknown compactness_mode {self.compactness_mode!r}")

    def to_dict(self) -> dict:
        d = {f.name: getattr(self, f.name) for f in fields(self)}
        d["protocol"] = self.protocol.value
        d["net"] = self.net.to_dict()
        d["weights"] = asdict(self.weights)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        return cls(**d)

    def total_iterations(self, n_samples: int) -> int:
        if self.epochs is None:
            return self.iterations
        return self.epochs * max(1, n_samples // self.batch_size)


class EpochSampler:
    """Shuffled mini-batches covering every sample once per epoch.

    A trailing single-sample remainder is folded into the previous batch so
    every batch has at least two samples.
    """

    def __init__(self, n: int, batch_size: int, rng: np.random.Generator):
        if n < 2:
            raise ValueError("need at least two training samples")
        self.n = n
        self.batch_size = batch_size
        self.rng = rng
        self.pending: List[List[int]] = []
        self.epoch = 0

    def epoch_batches(self) -> List[List[int]]:
        order = self.rng.permutation(self.n).tolist()
        batches = [order[i:i + self.batch_size] for i in range(0, self.n, self.batch_size)]
        if len(batches) > 1 and len(batches[-1]) < 2:
            batches[-2].extend(batches.pop())
        return batches

    def next(self) -> List[int]:
        if not self.pending:
            self.pending = self.epoch_batches()
            self.epoch += 1
        return self.pending.pop(0)

    def state_dict(self) -> dict:
        return {"pending": self.pending, "epoch": self.epoch}

    def load_state_dict(self, state: dict) -> None:
        self.pending = [list(map(int, b)) for b in state["pending"]]
        self.epoch = int(state["epoch"])


@dataclass
class Forward:
    """Generator-side tensors of one step."""
    z_r: torch.Tensor
    z_t: torch.Tensor
    x_hat_r: torch.Tensor
    x_hat_t: torch.Tensor
    z_hat_t: torch.Tensor

    def detached(self) -> "Forward":
        return Forward(*(t.detach() for t in (self.z_r, self.z_t, self.x_hat_r, self.x_hat_t, self.z_hat_t)))


class Trainer:
    """Owns the networks, both Adam optimizers and the sampling rng."""

    def __init__(self, config: TrainConfig):
        self.config = config
        torch.manual_seed(config.seed)
        self.encoder: Encoder = build_encoder(config.net)
        self.decoder: Decoder = build_decoder(config.net)
        self.discriminator: Discriminator = build_discriminator(config.net)
        betas = (config.adam_beta1, config.adam_beta2)
        self.opt_g = torch.optim.Adam(list(self.encoder.parameters()) + list(self.decoder.parameters()),
                                      lr=config.learning_rate, betas=betas)
        self.opt_d = torch.optim.Adam(self.discriminator.parameters(), lr=config.learning_rate, betas=betas)
        self.rng = np.random.default_rng(config.seed)
        self.iteration = 0
        self.running: Dict[str, float] = {}
        self.sampler: Optional[EpochSampler] = None
        self.normal_label = torch.from_numpy(normal_label(config.protocol).as_array())

    # -- pieces exposed for gradient probes --------------------------------

    def generator_forward(self, x_r: torch.Tensor, x_t: torch.Tensor) -> Forward:
        n = x_r.shape[0]
        z = self.encoder(torch.cat([x_r, x_t]))
        x_hat = self.decoder(z)
        z_r, z_t = z[:n], z[n:]
        x_hat_r, x_hat_t = x_hat[:n], x_hat[n:]
        z_hat_t = self.encoder(x_hat_t)
        return Forward(z_r, z_t, x_hat_r, x_hat_t, z_hat_t)

    def discriminator_losses(self, x_r, x_t, labels_t, fwd: Forward) -> Dict[str, torch.Tensor]:
        n = x_r.shape[0]
        adv, logits = self.discriminator(torch.cat([x_t, x_r, fwd.x_hat_t]),
                                         torch.cat([fwd.z_t, fwd.z_r, fwd.z_hat_t]))
        cls_d = classification_loss_d(logits[:n], labels_t, self.config.protocol.blocks)
        adv_d = adversarial_loss_d(adv[n:2 * n], adv[2 * n:])
        return {"adv_d": adv_d, "cls_d": cls_d}

    def generator_losses(self, x_r, x_t, labels_t, fwd: Forward) -> Dict[str, torch.Tensor]:
        cfg = self.config
        n = x_r.shape[0]
        adv, logits = self.discriminator(torch.cat([x_t, fwd.x_hat_t]), torch.cat([fwd.z_t, fwd.z_hat_t]))
        cls_g = classification_loss_g(logits[:n], labels_t, logits[n:], self.normal_label, cfg.protocol.blocks)
        adv_g = adversarial_loss_g(adv[n:])
        rec = reconstruction_loss(x_r, fwd.x_hat_r)
        if cfg.pixel_restoration:
            rec = rec + reconstruction_loss(x_r, fwd.x_hat_t)
        if cfg.compactness_enabled:
            cmp = compactness_loss(fwd.z_r, cfg.compactness_mode)
        else:
            # still reported, never optimized
            with torch.no_grad():
                cmp = compactness_loss(fwd.z_r, cfg.compactness_mode)
        return {"adv_g": adv_g, "cls_g": cls_g, "rec": rec, "cmp": cmp}

    @contextmanager
    def frozen_discriminator(self):
        """D in eval mode with gradients off; its power-iteration state is left untouched."""
        was_training = self.discriminator.training
        self.discriminator.eval()
        self.discriminator.requires_grad_(False)
        try:
            yield self.discriminator
        finally:
            self.discriminator.requires_grad_(True)
            self.discriminator.train(was_training)

    def sample_batch_transforms(self, x_r: torch.Tensor):
        specs = [sample_transform(self.config.protocol, self.rng) for _ in range(x_r.shape[0])]
        x_t = apply_transforms(x_r, specs)
        labels = labels_to_tensor(specs).to(x_r.dtype)
        return x_t, labels

    # -- training ------------------------------------------------------------

    def _check_finite(self, terms: Dict[str, torch.Tensor]) -> None:
        values = {k: float(v.detach()) for k, v in terms.items()}
        if not all(math.isfinite(v) for v in values.values()):
            raise NonFiniteLossError(self.iteration + 1, values)

    def train_step(self, x_r: torch.Tensor) -> LossReport:
        """One discriminator update followed by one encoder/decoder update."""
        if x_r.shape[0] < 2:
            raise ValueError("train_step needs a batch of at least 2 images")
        cfg = self.config
        w = cfg.weights if cfg.compactness_enabled else replace(cfg.weights, lambda_cmp=0.0)
        x_t, labels_t = self.sample_batch_transforms(x_r)
        self.encoder.train()
        self.decoder.train()

        # generator weights do not change during the D phase, so one forward serves both phases
        fwd = self.generator_forward(x_r, x_t)

        # discriminator phase
        self.discriminator.train()
        d_terms = self.discriminator_losses(x_r, x_t, labels_t, fwd.detached())
        total_d = d_terms["adv_d"] + w.lambda_cls * d_terms["cls_d"]
        self._check_finite({**d_terms, "total_d": total_d})
        self.opt_d.zero_grad(set_to_none=True)
        total_d.backward()
        self.opt_d.step()

        # encoder/decoder phase
        with self.frozen_discriminator():
            g_terms = self.generator_losses(x_r, x_t, labels_t, fwd)
            _, total_g = total_losses(torch.zeros(()), torch.zeros(()), g_terms["adv_g"], g_terms["cls_g"],
                                      g_terms["rec"], g_terms["cmp"], w)
            self._check_finite({**g_terms, "total_g": total_g})
            self.opt_g.zero_grad(set_to_none=True)
            total_g.backward()
            self.opt_g.step()

        self.iteration += 1
        report = LossReport(
            rec=_f(g_terms["rec"]), cls_d=_f(d_terms["cls_d"]), cls_g=_f(g_terms["cls_g"]),
            cmp=_f(g_terms["cmp"]), adv_d=_f(d_terms["adv_d"]), adv_g=_f(g_terms["adv_g"]),
            total_d=_f(total_d), total_g=_f(total_g),
        )
        for k, v in report.as_dict().items():
            self.running[k] = v if k not in self.running else 0.98 * self.running[k] + 0.02 * v
        return report

    def next_batch(self, images: torch.Tensor) -> torch.Tensor:
        if self.sampler is None:
            self.sampler = EpochSampler(images.shape[0], self.config.batch_size, self.rng)
        batch = images[self.sampler.next()]
        if self.config.augment_zoom:
            batch = random_zoom_batch(batch, self.rng)
        return batch

    # -- persistence ---------------------------------------------------------

    def state_dict(self) -> dict:
        return {
            "iteration": self.iteration,
            "rng": self.rng.bit_generator.state,
            "sampler": None if self.sampler is None else self.sampler.state_dict(),
            "running": self.running,
        }

    def save_checkpoint(self, path: Union[str, Path]) -> Path:
        path = Path(path)
        path.mkdir(parents=True, exist_ok=True)
        torch.save(self.encoder.state_dict(), path / "encoder.pt")
        torch.save(self.decoder.state_dict(), path / "decoder.pt")
        torch.save(self.discriminator.state_dict(), path / "discriminator.pt")
        torch.save({"g": self.opt_g.state_dict(), "d": self.opt_d.state_dict()}, path / "optimizers.pt")
        _write_json(path / "state.json", self.state_dict())
        _write_json(path / "manifest.json", {
            "config": self.config.to_dict(),
            "iteration": self.iteration,
            "seed": self.config.seed,
            "version": __version__,
        })
        return path

    @classmethod
    def load_checkpoint(cls, path: Union[str, Path], expected_net: Optional[NetConfig] = None) -> "Trainer":
        path = Path(path)
        if not path.is_dir():
            raise CheckpointError(f"checkpoint directory {path} does not exist")
        for name in CHECKPOINT_FILES:
            if not (path / name).is_file():
                raise CheckpointError(f"checkpoint {path} is missing {name}")
        try:
            manifest = json.loads((path / "manifest.json").read_text())
            config = TrainConfig.from_dict(manifest["config"])
        except (ValueError, KeyError, TypeError) as exc:
            raise CheckpointError(f"checkpoint {path} has an unreadable manifest.json: {exc}") from exc
        if expected_net is not None and expected_net.to_dict() != config.net.to_dict():
            raise CheckpointError(f"checkpoint {path} was trained with a different network config: "
                                  f"{config.net.to_dict()} != {expected_net.to_dict()}")
        trainer = cls(config)
        try:
            trainer.encoder.load_state_dict(torch.load(path / "encoder.pt", weights_only=True))
            trainer.decoder.load_state_dict(torch.load(path / "decoder.pt", weights_only=True))
            trainer.discriminator.load_state_dict(torch.load(path / "discriminator.pt", weights_only=True))
            opt = torch.load(path / "optimizers.pt", weights_only=True)
            trainer.opt_g.load_state_dict(opt["g"])
            trainer.opt_d.load_state_dict(opt["d"])
            state = json.loads((path / "state.json").read_text())
        except Exception as exc:
            raise CheckpointError(f"checkpoint {path} is corrupt: {exc}") from exc
        trainer.iteration = int(state["iteration"])
        trainer.rng.bit_generator.state = state["rng"]
        trainer.running = dict(state["running"])
        trainer._sampler_state = state["sampler"]
        return trainer

    def attach_sampler(self, n: int) -> None:
        self.sampler = EpochSampler(n, self.config.batch_size, self.rng)
        saved = getattr(self, "_sampler_state", None)
        if saved is not None:
            self.sampler.load_state_dict(saved)


def _f(t: torch.Tensor) -> float:
    return float(t.detach())


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def save_checkpoint(trainer: Trainer, path) -> Path:
    return trainer.save_checkpoint(path)


def load_checkpoint(path, expected_net: Optional[NetConfig] = None) -> Trainer:
    return Trainer.load_checkpoint(path, expected_net)


def latest_checkpoint(run_dir: Union[str, Path]) -> Optional[Path]:
    ckpts = sorted(Path(run_dir).glob("ckpt-*"), key=lambda p: int(p.name.split("-")[1]))
    return ckpts[-1] if ckpts else None


def _as_tensor(dataset) -> torch.Tensor:
    if isinstance(dataset, torch.Tensor):
        return dataset
    dataset = list(dataset)
    if not dataset:
        raise ValueError("training dataset is empty")
    if isinstance(dataset[0], Sample):
        return stack_images(dataset)
    return torch.stack(dataset)


def train(config: TrainConfig, dataset, run_dir: Union[str, Path], resume: Optional[Union[str, Path]] = None,
          callback: Optional[Callable[[int, LossReport], None]] = None) -> Path:
    """Train on ``dataset`` (normal samples only) and return the final checkpoint.

    Metrics go to ``{run_dir}/metrics.csv``; checkpoints to
    ``{run_dir}/ckpt-{iteration}/``. ``resume`` continues from a checkpoint,
    dropping any metrics rows written after it.
    """
    images = _as_tensor(dataset)
    if images.shape[0] == 0:
        raise ValueError("training dataset is empty")
    run_dir = Path(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    metrics_path = run_dir / "metrics.csv"

    if resume is not None:
        trainer = Trainer.load_checkpoint(resume, expected_net=config.net)
        trainer.attach_sampler(images.shape[0])
        rows = []
        if metrics_path.exists():
            with open(metrics_path, newline="") as fh:
                rows = [r for r in csv.reader(fh)][1:]
        rows = [r for r in rows if int(r[0]) <= trainer.iteration]
        with open(metrics_path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(("iteration",) + CSV_FIELDS)
            writer.writerows(rows)
    else:
        trainer = Trainer(config)
        trainer.attach_sampler(images.shape[0])
        with open(metrics_path, "w", newline="") as fh:
            csv.writer(fh).writerow(("iteration",) + CSV_FIELDS)

    total = config.total_iterations(images.shape[0])
    last = None
    with open(metrics_path, "a", newline="") as fh:
        writer = csv.writer(fh)
        while trainer.iteration < total:
            report = trainer.train_step(trainer.next_batch(images))
            writer.writerow((trainer.iteration,) + tuple(repr(v) for v in report.as_row()))
            if callback is not None:
                callback(trainer.iteration, report)
            if trainer.iteration % config.checkpoint_every == 0 or trainer.iteration == total:
                fh.flush()
                last = trainer.save_checkpoint(run_dir / f"ckpt-{trainer.iteration}")
    if last is None:
        last = trainer.save_checkpoint(run_dir / f"ckpt-{trainer.iteration}")
    return last
