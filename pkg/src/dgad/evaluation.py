"""One-class evaluation: ROC/AUC, per-class runs, throughput, the ablation
grid and the discriminator-accuracy analysis.
"""
from __future__ import annotations

import csv
import enum
import json
import logging
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import torch
from scipy.stats import rankdata

from .data import Sample, labels_of, stack_images
from .losses import LossWeights
from .networks import PaddingMode, block_softmax
from .pretext import Protocol, TransformSpec, apply_transform, enumerate_transforms, label_indices
from .scoring import (DirichletParams, default_transforms, dirichlet_score, fit_dirichlet_params,
                      normalize_scores, reconstruction_score, transform_softmaxes)
from .trainer import TrainConfig, Trainer, train

log = logging.getLogger(__name__)


class Scorer(str, enum.Enum):
    S_REC = "rec"
    S_DIR = "dir"


class Subset(str, enum.Enum):
    NORMAL_ONLY = "normal_only"
    ALL = "all"


class AblationVariant(str, enum.Enum):
    GAN_ONLY = "GAN_ONLY"
    DGAD_MINUS_CL = "DGAD_MINUS_CL"
    DGAD_ZERO_PAD = "DGAD_ZERO_PAD"
    DGAD_COORD = "DGAD_COORD"
    DGAD = "DGAD"

    @classmethod
    def parse(cls, name: str) -> "AblationVariant":
        key = name.strip().upper().replace("-", "_")
        try:
            return cls[key]
        except KeyError:
            valid = ", ".join(v.value for v in cls)
            raise ValueError(f"unknown ablation variant {name!r}; valid names: {valid}") from None


def variant_config(base: TrainConfig, variant: AblationVariant) -> TrainConfig:
    """Apply one ablation variant's deltas to a base configuration."""
    variant = AblationVariant(variant)
    if variant is AblationVariant.DGAD:
        return base
    if variant is AblationVariant.GAN_ONLY:
        return replace(base, weights=replace(base.weights, lambda_cls=0.0), pixel_restoration=True)
    if variant is AblationVariant.DGAD_MINUS_CL:
        return replace(base, compactness_enabled=False)
    if variant is AblationVariant.DGAD_ZERO_PAD:
        return replace(base, net=replace(base.net, padding_mode=PaddingMode.ZERO))
    return replace(base, net=replace(base.net, use_coord=True))


# ------------------------------------------------------------------ ROC / AUC

def roc_points(scores, labels) -> Tuple[np.ndarray, np.ndarray]:
    """ROC curve from a sweep over distinct score thresholds (label 1 = positive).

    Starts at (0, 0) and ends at (1, 1).
    """
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels).astype(bool)
    order = np.argsort(-s, kind="mergesort")
    s, y = s[order], y[order]
    last_of_group = np.r_[np.nonzero(np.diff(s))[0], s.size - 1]
    tp = np.cumsum(y)[last_of_group]
    fp = np.cumsum(~y)[last_of_group]
    tpr = np.r_[0.0, tp / y.sum()]
    fpr = np.r_[0.0, fp / (~y).sum()]
    return fpr, tpr


def roc_auc(scores, labels) -> Tuple[float, np.ndarray]:
    """AUC by the Mann-Whitney rank statistic (ties count 1/2) and the ROC points.

    ``labels`` are 1 for anomalies, 0 for normal samples; higher scores should
    mean more anomalous. Returns ``(auc, points)`` with ``points`` of shape (m, 2)
    holding (fpr, tpr).
    """
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels)
    if s.shape != y.shape or s.ndim != 1:
        raise ValueError("scores and labels must be 1-D arrays of equal length")
    if not set(np.unique(y)) <= {0, 1}:
        raise ValueError("labels must be binary 0/1")
    n_pos = int((y == 1).sum())
    n_neg = int((y == 0).sum())
    if n_pos == 0 or n_neg == 0:
        raise ValueError("ROC/AUC needs both normal and anomalous samples")
    ranks = rankdata(s)
    u = ranks[y == 1].sum() - n_pos * (n_pos + 1) / 2.0
    fpr, tpr = roc_points(s, y)
    return float(u / (n_pos * n_neg)), np.column_stack([fpr, tpr])


# ------------------------------------------------------------------ results

@dataclass
class EvalResult:
    class_id: Union[int, str]
    scorer: Scorer
    auc: float
    roc: List[Tuple[float, float]]
    throughput: float
    n_normal: int
    n_anomalous: int
    sample_ids: List[str] = field(default_factory=list, repr=False)
    labels: Optional[np.ndarray] = field(default=None, repr=False)
    s_raw: Optional[np.ndarray] = field(default=None, repr=False)
    s_norm: Optional[np.ndarray] = field(default=None, repr=False)

    def to_dict(self) -> dict:
        return {
            "class_id": self.class_id,
            "scorer": self.scorer.value,
            "auc": self.auc,
            "roc": [list(map(float, p)) for p in self.roc],
            "throughput_images_per_second": self.throughput,
            "n_normal": self.n_normal,
            "n_anomalous": self.n_anomalous,
        }

    def write_scores(self, path: Union[str, Path]) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(("sample_id", "label", "s_raw", "s_norm"))
            for row in zip(self.sample_ids, self.labels, self.s_raw, self.s_norm):
                w.writerow((row[0], int(row[1]), repr(float(row[2])), repr(float(row[3]))))


def _nets(model):
    if isinstance(model, (str, Path)):
        model = Trainer.load_checkpoint(model)
    return model


def _timed(fn, warmup: Optional[Callable] = None):
    if warmup is not None:
        warmup()
    t0 = time.perf_counter()
    out = fn()
    return out, time.perf_counter() - t0


def score_samples(model, test_x: torch.Tensor, scorer: Scorer, train_x: Optional[torch.Tensor] = None,
                  lambda_s: float = 10.0, batch_size: int = 64,
                  dirichlet_subsample: int = 18, dirichlet_seed: int = 0) -> Tuple[np.ndarray, float]:
    """Anomaly scores (higher = more anomalous) and wall-clock seconds.

    Timing starts after a one-batch warmup. For ``S_DIR`` it covers the
    Dirichlet fit over the training images as well as scoring, since the
    score cannot be produced without that pass.
    """
    trainer = _nets(model)
    enc, dec, disc = trainer.encoder, trainer.decoder, trainer.discriminator
    protocol = trainer.config.protocol
    warm = test_x[:batch_size]
    if Scorer(scorer) is Scorer.S_REC:
        return _timed(lambda: reconstruction_score(test_x, enc, dec, lambda_s, batch_size),
                      lambda: reconstruction_score(warm, enc, dec, lambda_s, batch_size))
    if train_x is None:
        raise ValueError("the Dirichlet score needs the training images")
    transforms = default_transforms(protocol, dirichlet_subsample, dirichlet_seed)

    def run():
        params = fit_dirichlet_params(train_x, enc, disc, protocol, transforms, batch_size)
        return -dirichlet_score(test_x, enc, disc, protocol, params, batch_size)

    def warmup():
        transform_softmaxes(warm, enc, disc, transforms[:1], batch_size)

    return _timed(run, warmup)


def evaluate_one_class(model, test_samples: Sequence[Sample], normal_class: int,
                       scorer: Scorer = Scorer.S_REC, train_samples: Optional[Sequence[Sample]] = None,
                       lambda_s: float = 10.0, batch_size: int = 64, dirichlet_subsample: int = 18,
                       dirichlet_seed: int = 0) -> EvalResult:
    """Score the whole test split; the normal class is label 0, everything else 1."""
    scorer = Scorer(scorer)
    labels = labels_of(test_samples)
    if not np.any(labels == normal_class):
        raise ValueError(f"normal class {normal_class} does not occur in the test split")
    y = (labels != normal_class).astype(np.int64)
    test_x = stack_images(test_samples)
    train_x = stack_images(train_samples) if train_samples is not None else None
    raw, seconds = score_samples(model, test_x, scorer, train_x, lambda_s, batch_size,
                                 dirichlet_subsample, dirichlet_seed)
    norm = normalize_scores(raw)
    auc, pts = roc_auc(norm, y)
    return EvalResult(
        class_id=normal_class, scorer=scorer, auc=auc, roc=[tuple(p) for p in pts.tolist()],
        throughput=len(test_samples) / max(seconds, 1e-9), n_normal=int((y == 0).sum()),
        n_anomalous=int((y == 1).sum()), sample_ids=[s.sample_id for s in test_samples], labels=y,
        s_raw=raw, s_norm=norm,
    )


# ------------------------------------------------------------------ discriminator accuracy

def pretext_accuracy(classify: Callable[[torch.Tensor], torch.Tensor], images: torch.Tensor,
                     protocol: Protocol, transforms: Optional[Sequence[TransformSpec]] = None,
                     batch_size: int = 64) -> float:
    """Fraction of correct arg-max predictions over every (image, transformation).

    ``classify`` maps a batch of transformed images to (batch, label_dim)
    logits. Multi-hot labels are scored block by block.
    """
    if transforms is None:
        transforms = [spec for spec, _ in enumerate_transforms(protocol)]
    correct = 0
    total = 0
    with torch.no_grad():
        for i in range(0, images.shape[0], batch_size):
            xb = images[i:i + batch_size]
            for spec in transforms:
                logits = classify(apply_transform(xb, spec))
                target = label_indices(spec)
                offset = 0
                for size, idx in zip(protocol.blocks, target):
                    pred = logits[:, offset:offset + size].argmax(dim=-1)
                    correct += int((pred == idx).sum())
                    total += pred.numel()
                    offset += size
    return correct / total


def discriminator_accuracy(model, test_samples: Sequence[Sample], normal_class: int,
                           subset: Subset = Subset.ALL, transforms: Optional[Sequence[TransformSpec]] = None,
                           batch_size: int = 64) -> float:
    trainer = _nets(model)
    enc, disc = trainer.encoder.eval(), trainer.discriminator.eval()
    if Subset(subset) is Subset.NORMAL_ONLY:
        test_samples = [s for s in test_samples if s.label == normal_class]
    images = stack_images(test_samples)
    return pretext_accuracy(lambda xt: disc(xt, enc(xt))[1], images, trainer.config.protocol,
                            transforms, batch_size)


# ------------------------------------------------------------------ plots

def plot_results(results: Sequence[EvalResult], out_dir: Union[str, Path]) -> Tuple[Path, Path]:
    """Score-distribution histogram and ROC curve, one file each."""
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    fig, axes = plt.subplots(1, len(results), figsize=(5 * len(results), 4), squeeze=False)
    for ax, r in zip(axes[0], results):
        bins = np.linspace(0.0, 1.0, 41)
        ax.hist(r.s_norm[r.labels == 0], bins=bins, alpha=0.6, density=True, label="normal")
        ax.hist(r.s_norm[r.labels == 1], bins=bins, alpha=0.6, density=True, label="anomalous")
        ax.set_xlabel(f"normalized anomaly score (s_{r.scorer.value})")
        ax.set_ylabel("density")
        ax.legend()
    fig.tight_layout()
    hist_path = out_dir / "hist.png"
    fig.savefig(hist_path, dpi=100)
    plt.close(fig)

    fig, ax = plt.subplots(figsize=(5, 5))
    for r in results:
        pts = np.asarray(r.roc)
        ax.plot(pts[:, 0], pts[:, 1], label=f"s_{r.scorer.value} (AUC = {r.auc:.4f})")
    ax.plot([0, 1], [0, 1], "k--", lw=0.8)
    ax.set_xlabel("false positive rate")
    ax.set_ylabel("true positive rate")
    ax.legend(loc="lower right")
    fig.tight_layout()
    roc_path = out_dir / "roc.png"
    fig.savefig(roc_path, dpi=100)
    plt.close(fig)
    return hist_path, roc_path


def write_class_results(results: Sequence[EvalResult], out_dir: Union[str, Path]) -> None:
    """eval.json, one score CSV per scorer, and the two plots."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    payload = {r.scorer.value: r.to_dict() for r in results}
    (out_dir / "eval.json").write_text(json.dumps(payload, indent=2) + "\n")
    for r in results:
        r.write_scores(out_dir / f"scores_{r.scorer.value}.csv")
    plot_results(results, out_dir)


def write_aggregate(table: Dict[str, Dict], classes: Sequence, path: Union[str, Path]) -> None:
    """Rows keyed by name, one column per class, then the mean over classes."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["method"] + [str(c) for c in classes] + ["Mean"])
        for name, per_class in table.items():
            aucs = [per_class[c] for c in classes]
            w.writerow([name] + [f"{a:.4f}" for a in aucs] + [f"{float(np.mean(aucs)):.4f}"])


# ------------------------------------------------------------------ ablation grid

DataProvider = Callable[[object], Tuple[Sequence[Sample], Sequence[Sample]]]


def _run_cell(args) -> List[dict]:
    variant, base, normal_class, scorers, data, run_dir = args
    train_samples, test_samples = data(normal_class)
    cfg = variant_config(base, variant)
    cell_dir = Path(run_dir) / variant.value / f"class_{normal_class}"
    ckpt = train(cfg, train_samples, cell_dir)
    model = Trainer.load_checkpoint(ckpt)
    rows = []
    for sc in scorers:
        res = evaluate_one_class(model, test_samples, normal_class, sc, train_samples)
        (cell_dir / f"eval_{sc.value}.json").write_text(json.dumps(res.to_dict(), indent=2) + "\n")
        rows.append({"variant": variant.value, "class": normal_class, "scorer": sc.value, "auc": res.auc,
                     "throughput": res.throughput})
    return rows


def run_ablation_grid(variants: Sequence[AblationVariant], base: TrainConfig, data: DataProvider,
                      classes: Sequence, run_dir: Union[str, Path],
                      scorers: Sequence[Scorer] = (Scorer.S_REC,), n_jobs: int = 1) -> List[dict]:
    """Train and evaluate every variant x class cell; one result row per scorer.

    ``data(normal_class)`` returns ``(train_samples, test_samples)``. Writes
    ``{run_dir}/ablation.csv`` with one row per (variant, scorer).
    """
    run_dir = Path(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    variants = [AblationVariant(v) for v in variants]
    scorers = [Scorer(s) for s in scorers]
    cells = [(v, base, c, scorers, data, run_dir) for v in variants for c in classes]
    if n_jobs > 1:
        # one intra-op thread per worker so parallel cells do not oversubscribe the CPU
        with ProcessPoolExecutor(n_jobs, initializer=torch.set_num_threads, initargs=(1,)) as pool:
            cell_rows = list(pool.map(_run_cell, cells))
    else:
        cell_rows = [_run_cell(c) for c in cells]
    rows = [r for rs in cell_rows for r in rs]
    write_aggregate(ablation_table(rows), list(classes), run_dir / "ablation.csv")
    return rows


def ablation_table(rows: Sequence[dict]) -> Dict[str, Dict]:
    table: Dict[str, Dict] = {}
    for r in rows:
        name = r["variant"] if r["scorer"] == Scorer.S_REC.value else f"{r['variant']} (s_dir)"
        table.setdefault(name, {})[r["class"]] = r["auc"]
    return table
