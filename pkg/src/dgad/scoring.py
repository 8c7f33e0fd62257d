"""Test-time anomaly scores.

``reconstruction_score`` needs only the encoder and decoder. The Dirichlet
score needs the discriminator's pretext classifier and concentration
parameters fitted on the training set, one Dirichlet per transformation.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import List, Optional, Sequence

import numpy as np
import torch
from scipy.special import digamma, polygamma

from .networks import block_softmax
from .pretext import Protocol, TransformSpec, apply_transform, enumerate_transforms

CLIP = 1e-6


def _batches(x: torch.Tensor, batch_size: int):
    for i in range(0, x.shape[0], batch_size):
        yield x[i:i + batch_size]


@torch.no_grad()
def reconstruction_score(x: torch.Tensor, encoder, decoder, lambda_s: float = 10.0,
                         batch_size: int = 64) -> np.ndarray:
    """Per-sample ``mean|x - De(En(x))| + lambda_s * mean|En(x) - En(De(En(x)))|``."""
    encoder.eval()
    decoder.eval()
    out = []
    for xb in _batches(x, batch_size):
        z = encoder(xb)
        x_hat = decoder(z)
        z_hat = encoder(x_hat)
        img = (xb - x_hat).abs().flatten(1).mean(1)
        lat = (z - z_hat).abs().flatten(1).mean(1)
        out.append((img + lambda_s * lat).double())
    return torch.cat(out).numpy()


def normalize_scores(scores) -> np.ndarray:
    """Min-max scale to [0, 1]; a constant vector maps to 0.5 with a warning."""
    s = np.asarray(scores, dtype=np.float64)
    lo, hi = s.min(), s.max()
    if hi == lo:
        warnings.warn("all scores are equal; normalized scores set to 0.5", RuntimeWarning, stacklevel=2)
        return np.full_like(s, 0.5)
    return (s - lo) / (hi - lo)


def inverse_digamma(y, iterations: int = 5) -> np.ndarray:
    """Solve digamma(x) = y by Newton's method (Minka's initialisation)."""
    y = np.asarray(y, dtype=np.float64)
    x = np.where(y >= -2.22, np.exp(y) + 0.5, -1.0 / (y - digamma(1.0)))
    for _ in range(iterations):
        x = x - (digamma(x) - y) / polygamma(1, x)
    return x


def clip_simplex(p, clip: float = CLIP) -> np.ndarray:
    p = np.clip(np.asarray(p, dtype=np.float64), clip, 1.0 - clip)
    return p / p.sum(axis=-1, keepdims=True)


def fit_dirichlet(samples, tol: float = 1e-6, max_iter: int = 1000, clip: float = CLIP) -> np.ndarray:
    """Maximum-likelihood Dirichlet concentration for rows of ``samples``.

    Fixed-point iteration ``alpha <- digamma^-1(digamma(sum alpha) + mean log p)``
    started from a moment-matching estimate. Stops when the largest relative
    change drops below ``tol`` or after ``max_iter`` rounds.
    """
    p = np.asarray(samples, dtype=np.float64)
    if p.ndim != 2:
        raise ValueError("samples must be a 2-D array (n_samples, n_classes)")
    n, k = p.shape
    if n < k:
        raise ValueError(f"need at least {k} samples to fit a {k}-class Dirichlet, got {n}")
    p = clip_simplex(p, clip)
    log_bar = np.log(p).mean(axis=0)

    mean = p.mean(axis=0)
    second = (p[:, 0] ** 2).mean()
    denom = second - mean[0] ** 2
    s0 = (mean[0] - second) / denom if denom > 0 else 1.0
    alpha = mean * max(s0, 1e-3)

    for _ in range(max_iter):
        new = inverse_digamma(digamma(alpha.sum()) + log_bar)
        change = np.max(np.abs(new - alpha) / np.abs(alpha))
        alpha = new
        if change < tol:
            break
    if not np.all(np.isfinite(alpha)) or np.any(alpha <= 0):
        raise FloatingPointError(f"Dirichlet fit diverged: {alpha}")
    return alpha


@dataclass
class DirichletParams:
    protocol: Protocol
    transforms: List[TransformSpec]
    # (num_transforms, label_dim); one block-wise Dirichlet per transformation
    alphas: np.ndarray
    blocks: Sequence[int] = field(default=())

    def __post_init__(self):
        self.alphas = np.asarray(self.alphas, dtype=np.float64)
        if not self.blocks:
            self.blocks = self.protocol.blocks
        if self.alphas.shape != (len(self.transforms), self.protocol.label_dim):
            raise ValueError(f"alphas shape {self.alphas.shape} does not match "
                             f"{len(self.transforms)} transforms x {self.protocol.label_dim} labels")
        if not np.all(np.isfinite(self.alphas)) or np.any(self.alphas <= 0):
            raise ValueError("Dirichlet concentrations must be finite and positive")

    def to_dict(self) -> dict:
        return {
            "protocol": self.protocol.value,
            "transforms": [[t.rotation_k, t.perm_index, list(t.partition_rotations)] for t in self.transforms],
            "alphas": self.alphas.tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "DirichletParams":
        protocol = Protocol(d["protocol"])
        transforms = [TransformSpec(protocol, k, p, tuple(r)) for k, p, r in d["transforms"]]
        return cls(protocol, transforms, np.asarray(d["alphas"]))


def default_transforms(protocol: Protocol, subsample: Optional[int] = 18, seed: int = 0) -> List[TransformSpec]:
    """Transformations used by the Dirichlet score (subsampled for jigsaw+rotation)."""
    sub = subsample if protocol is Protocol.JIGSAW_ROTATION else None
    return [spec for spec, _ in enumerate_transforms(protocol, subsample=sub, seed=seed)]


@torch.no_grad()
def transform_softmaxes(x: torch.Tensor, encoder, discriminator, transforms: Sequence[TransformSpec],
                        batch_size: int = 64) -> np.ndarray:
    """Block-wise softmax of the pretext head on every transformation.

    Returns an array of shape (n_samples, n_transforms, label_dim).
    """
    encoder.eval()
    discriminator.eval()
    blocks = discriminator.config.label_blocks
    out = []
    for xb in _batches(x, batch_size):
        per_t = []
        for spec in transforms:
            xt = apply_transform(xb, spec)
            _, logits = discriminator(xt, encoder(xt))
            per_t.append(block_softmax(logits, blocks).double())
        out.append(torch.stack(per_t, dim=1))
    return torch.cat(out).numpy()


def fit_dirichlet_from_softmaxes(softmaxes: np.ndarray, protocol: Protocol,
                                 transforms: Sequence[TransformSpec]) -> DirichletParams:
    softmaxes = np.asarray(softmaxes, dtype=np.float64)
    alphas = np.zeros((len(transforms), protocol.label_dim))
    for i in range(len(transforms)):
        offset = 0
        for size in protocol.blocks:
            alphas[i, offset:offset + size] = fit_dirichlet(softmaxes[:, i, offset:offset + size])
            offset += size
    return DirichletParams(protocol, list(transforms), alphas)


def fit_dirichlet_params(train_x: torch.Tensor, encoder, discriminator, protocol: Protocol,
                         transforms: Optional[Sequence[TransformSpec]] = None,
                         batch_size: int = 64) -> DirichletParams:
    if transforms is None:
        transforms = default_transforms(protocol)
    sm = transform_softmaxes(train_x, encoder, discriminator, transforms, batch_size)
    return fit_dirichlet_from_softmaxes(sm, protocol, transforms)


def dirichlet_score_from_softmaxes(softmaxes: np.ndarray, params: DirichletParams) -> np.ndarray:
    """``sum_i <alpha_i - 1, log y_i>`` per sample; larger means more normal."""
    logy = np.log(clip_simplex_blocks(softmaxes, params.blocks))
    return np.einsum("ntk,tk->n", logy, params.alphas - 1.0)


def clip_simplex_blocks(p: np.ndarray, blocks: Sequence[int]) -> np.ndarray:
    parts = np.split(np.asarray(p, dtype=np.float64), np.cumsum(blocks)[:-1], axis=-1)
    return np.concatenate([clip_simplex(part) for part in parts], axis=-1)


def dirichlet_score(x: torch.Tensor, encoder, discriminator, protocol: Protocol, params: DirichletParams,
                    batch_size: int = 64) -> np.ndarray:
    if params.protocol is not protocol:
        raise ValueError(f"Dirichlet parameters were fitted for {params.protocol.name}, not {protocol.name}")
    if tuple(discriminator.config.label_blocks) != tuple(protocol.blocks):
        raise ValueError("discriminator head does not match the protocol's label layout")
    sm = transform_softmaxes(x, encoder, discriminator, params.transforms, batch_size)
    return dirichlet_score_from_softmaxes(sm, params)
