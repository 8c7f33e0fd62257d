"""Training objectives.

All reductions are means over the batch so that loss magnitudes do not depend
on batch size. Labels are passed as (batch, label_dim) 0/1 tensors; for
multi-hot labels the cross-entropy is summed over label blocks.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Optional, Sequence, Tuple

import torch
import torch.nn.functional as F

from .networks import block_log_softmax

CSV_FIELDS = ("rec", "cls_d", "cls_g", "cmp", "adv_d", "adv_g", "total_d", "total_g")


@dataclass(frozen=True)
class LossWeights:
    lambda_cls: float = 10.0
    lambda_rec: float = 20.0
    lambda_cmp: float = 100.0

    def __post_init__(self):
        for name, value in asdict(self).items():
            if value < 0:
                raise ValueError(f"{name} must be non-negative, got {value}")


@dataclass
class LossReport:
    rec: float
    cls_d: float
    cls_g: float
    cmp: float
    adv_d: float
    adv_g: float
    total_d: float
    total_g: float

    def as_row(self) -> Tuple[float, ...]:
        return tuple(getattr(self, f) for f in CSV_FIELDS)

    def as_dict(self) -> dict:
        return asdict(self)


def reconstruction_loss(x: torch.Tensor, x_hat: torch.Tensor) -> torch.Tensor:
    if x.shape != x_hat.shape:
        raise ValueError(f"shape mismatch: {tuple(x.shape)} vs {tuple(x_hat.shape)}")
    return (x - x_hat).abs().mean()


def _cross_entropy(logits: torch.Tensor, labels: torch.Tensor, blocks: Optional[Sequence[int]]) -> torch.Tensor:
    if logits.shape[-1] != labels.shape[-1]:
        raise ValueError(f"logit dim {logits.shape[-1]} does not match label dim {labels.shape[-1]}")
    blocks = tuple(blocks) if blocks is not None else (logits.shape[-1],)
    if sum(blocks) != logits.shape[-1]:
        raise ValueError(f"blocks {blocks} do not cover {logits.shape[-1]} logits")
    logp = block_log_softmax(logits, blocks)
    return -(labels.to(logp.dtype) * logp).sum(dim=-1).mean()


def classification_loss_d(logits: torch.Tensor, labels: torch.Tensor,
                          blocks: Optional[Sequence[int]] = None) -> torch.Tensor:
    """Cross-entropy of the pretext classifier on transformed samples."""
    return _cross_entropy(logits, labels, blocks)


def classification_loss_g(logits_on_xt: torch.Tensor, labels_t: torch.Tensor,
                          logits_on_restored: torch.Tensor, normal_label: torch.Tensor,
                          blocks: Optional[Sequence[int]] = None) -> torch.Tensor:
    """True-label term on (x_t, z_t) plus normal-label term on the restorations.

    ``normal_label`` is a single (label_dim,) vector broadcast over the batch.
    Keeping the discriminator frozen is the caller's job.
    """
    if normal_label.shape[-1] != logits_on_restored.shape[-1]:
        raise ValueError(f"normal label dim {normal_label.shape[-1]} does not match "
                         f"logit dim {logits_on_restored.shape[-1]}")
    target = normal_label.to(logits_on_restored.dtype).expand_as(logits_on_restored)
    return _cross_entropy(logits_on_xt, labels_t, blocks) + _cross_entropy(logits_on_restored, target, blocks)


def compactness_loss(z: torch.Tensor, mode: str = "channel") -> torch.Tensor:
    """Square root of the batch variance of pooled latent codes.

    ``mode="channel"`` pools each channel over space (one value per channel);
    ``mode="spatial"`` pools across channels (one value per location). The
    variance uses divisor N and is averaged over the pooled components.
    """
    if z.shape[0] < 2:
        raise ValueError("compactness needs a batch of at least 2 codes")
    if mode == "channel":
        pooled = z.mean(dim=(-2, -1))
    elif mode == "spatial":
        pooled = z.mean(dim=1).flatten(1)
    else:
        raise ValueError(f"unknown compactness mode {mode!r}")
    var = ((pooled - pooled.mean(dim=0, keepdim=True)) ** 2).mean(dim=0).mean()
    # sqrt has an infinite slope at 0; a collapsed batch gets a zero gradient instead of NaN
    positive = var > 0
    return torch.where(positive, torch.where(positive, var, torch.ones_like(var)).sqrt(), torch.zeros_like(var))


def adversarial_loss_d(adv_real: torch.Tensor, adv_fake: torch.Tensor) -> torch.Tensor:
    return F.relu(1.0 - adv_real).mean() + F.relu(1.0 + adv_fake).mean()


def adversarial_loss_g(adv_fake: torch.Tensor) -> torch.Tensor:
    return -adv_fake.mean()


def total_losses(adv_d, cls_d, adv_g, cls_g, rec, cmp, weights: LossWeights = LossWeights()):
    """Weighted discriminator and encoder/decoder objectives."""
    if not isinstance(weights, LossWeights):
        raise TypeError("weights must be a LossWeights")
    total_d = adv_d + weights.lambda_cls * cls_d
    total_g = adv_g + weights.lambda_cls * cls_g + weights.lambda_rec * rec + weights.lambda_cmp * cmp
    return total_d, total_g
