"""Geometric-transformation pretext tasks and their label codecs.

Three protocols are supported:

* ``ROTATION``: whole-image rotation by 0/90/180/270 degrees (4-way one-hot).
* ``JIGSAW``: 2x2 puzzle with the top-left quadrant fixed and the other three
  permuted (6-way one-hot).
* ``JIGSAW_ROTATION``: jigsaw followed by an independent rotation of each
  movable quadrant (18-bit multi-hot laid out as ``[6 | 4 | 4 | 4]``).

Rotations are counter-clockwise, matching :func:`numpy.rot90`.
"""
from __future__ import annotations

import enum
import itertools
from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple

import numpy as np
import torch

# quadrant positions in row-major order: TL, TR, BL, BR
MOVABLE_QUADRANTS = (1, 2, 3)

_PERMUTATIONS: Tuple[Tuple[int, int, int], ...] = tuple(itertools.permutations(range(3)))


class Protocol(enum.Enum):
    ROTATION = 1
    JIGSAW = 2
    JIGSAW_ROTATION = 3

    @classmethod
    def parse(cls, value) -> "Protocol":
        """Accept a Protocol, its number (1-3) or its name (case-insensitive)."""
        if isinstance(value, cls):
            return value
        if isinstance(value, str):
            if value.isdigit():
                return cls(int(value))
            return cls[value.upper()]
        return cls(int(value))

    @property
    def blocks(self) -> Tuple[int, ...]:
        """Sizes of the mutually exclusive label blocks."""
        return {
            Protocol.ROTATION: (4,),
            Protocol.JIGSAW: (6,),
            Protocol.JIGSAW_ROTATION: (6, 4, 4, 4),
        }[self]

    @property
    def label_dim(self) -> int:
        return sum(self.blocks)

    @property
    def num_transforms(self) -> int:
        return int(np.prod(self.blocks))

    @property
    def is_jigsaw(self) -> bool:
        return self is not Protocol.ROTATION


@dataclass(frozen=True)
class TransformSpec:
    protocol: Protocol
    rotation_k: int = 0
    perm_index: int = 0
    partition_rotations: Tuple[int, int, int] = (0, 0, 0)

    def __post_init__(self):
        if not 0 <= self.rotation_k <= 3:
            raise ValueError(f"rotation_k must be in [0, 3], got {self.rotation_k}")
        if not 0 <= self.perm_index < len(_PERMUTATIONS):
            raise ValueError(f"perm_index must be in [0, 5], got {self.perm_index}")
        if len(self.partition_rotations) != 3 or any(not 0 <= r <= 3 for r in self.partition_rotations):
            raise ValueError(f"partition_rotations must be three ints in [0, 3], got {self.partition_rotations}")
        if self.protocol is Protocol.ROTATION:
            if self.perm_index != 0 or tuple(self.partition_rotations) != (0, 0, 0):
                raise ValueError("rotation protocol takes no permutation or partition rotations")
        else:
            if self.rotation_k != 0:
                raise ValueError("jigsaw protocols do not rotate the whole image")
            if self.protocol is Protocol.JIGSAW and tuple(self.partition_rotations) != (0, 0, 0):
                raise ValueError("jigsaw protocol takes no partition rotations")

    @property
    def is_identity(self) -> bool:
        return self.rotation_k == 0 and self.perm_index == 0 and tuple(self.partition_rotations) == (0, 0, 0)


@dataclass(frozen=True)
class PretextLabel:
    bits: Tuple[int, ...]
    is_normal: bool

    def as_array(self) -> np.ndarray:
        return np.asarray(self.bits, dtype=np.float32)


def jigsaw_permutations() -> List[Tuple[int, int, int]]:
    """All orderings of the three movable quadrants, identity first.

    Entry ``p`` means the quadrant at movable slot ``j`` after the shuffle is
    taken from movable slot ``p[j]`` of the input.
    """
    return list(_PERMUTATIONS)


def _check_square(image: torch.Tensor) -> None:
    if image.dim() < 2:
        raise ValueError(f"expected an image tensor, got shape {tuple(image.shape)}")
    h, w = image.shape[-2:]
    if h != w:
        raise ValueError(f"rotation needs square images, got {h}x{w}")


def rotate(image: torch.Tensor, k: int) -> torch.Tensor:
    """Rotate the trailing two axes by ``k`` quarter turns counter-clockwise."""
    _check_square(image)
    return torch.rot90(image, int(k) % 4, dims=(-2, -1))


def _split_quadrants(image: torch.Tensor) -> List[torch.Tensor]:
    h, w = image.shape[-2:]
    if h % 2 or w % 2:
        raise ValueError(f"jigsaw needs even spatial size, got {h}x{w}")
    hh, hw = h // 2, w // 2
    return [
        image[..., :hh, :hw],
        image[..., :hh, hw:],
        image[..., hh:, :hw],
        image[..., hh:, hw:],
    ]


def _join_quadrants(quads: Sequence[torch.Tensor]) -> torch.Tensor:
    top = torch.cat([quads[0], quads[1]], dim=-1)
    bottom = torch.cat([quads[2], quads[3]], dim=-1)
    return torch.cat([top, bottom], dim=-2)


def apply_transform(image: torch.Tensor, spec: TransformSpec) -> torch.Tensor:
    """Apply one transformation to an image or a batch of images."""
    _check_square(image)
    if spec.protocol is Protocol.ROTATION:
        return rotate(image, spec.rotation_k)
    quads = _split_quadrants(image)
    perm = _PERMUTATIONS[spec.perm_index]
    out = list(quads)
    for slot, src in enumerate(perm):
        out[MOVABLE_QUADRANTS[slot]] = quads[MOVABLE_QUADRANTS[src]]
    if spec.protocol is Protocol.JIGSAW_ROTATION:
        for slot, k in enumerate(spec.partition_rotations):
            pos = MOVABLE_QUADRANTS[slot]
            out[pos] = rotate(out[pos], k)
    return _join_quadrants(out)


def apply_transforms(images: torch.Tensor, specs: Sequence[TransformSpec]) -> torch.Tensor:
    """Per-sample transformation of a batch; ``specs[i]`` applies to ``images[i]``."""
    if len(specs) != images.shape[0]:
        raise ValueError(f"got {len(specs)} specs for a batch of {images.shape[0]}")
    return torch.stack([apply_transform(img, s) for img, s in zip(images, specs)])


def sample_transform(protocol: Protocol, rng: np.random.Generator) -> TransformSpec:
    """Draw a transformation uniformly from the protocol's full set."""
    if protocol is Protocol.ROTATION:
        return TransformSpec(protocol, rotation_k=int(rng.integers(4)))
    perm_index = int(rng.integers(len(_PERMUTATIONS)))
    if protocol is Protocol.JIGSAW:
        return TransformSpec(protocol, perm_index=perm_index)
    rots = tuple(int(r) for r in rng.integers(4, size=3))
    return TransformSpec(protocol, perm_index=perm_index, partition_rotations=rots)


def label_indices(spec: TransformSpec) -> Tuple[int, ...]:
    """Class index within each label block."""
    if spec.protocol is Protocol.ROTATION:
        return (spec.rotation_k,)
    if spec.protocol is Protocol.JIGSAW:
        return (spec.perm_index,)
    return (spec.perm_index, *spec.partition_rotations)


def encode_label(spec: TransformSpec) -> PretextLabel:
    bits = np.zeros(spec.protocol.label_dim, dtype=np.int64)
    offset = 0
    for size, idx in zip(spec.protocol.blocks, label_indices(spec)):
        bits[offset + idx] = 1
        offset += size
    return PretextLabel(tuple(int(b) for b in bits), spec.is_identity)


def decode_label(bits, protocol: Protocol) -> TransformSpec:
    """Inverse of :func:`encode_label` (argmax within each block)."""
    bits = np.asarray(bits)
    if bits.shape[-1] != protocol.label_dim:
        raise ValueError(f"expected {protocol.label_dim} label bits, got {bits.shape[-1]}")
    idx = []
    offset = 0
    for size in protocol.blocks:
        idx.append(int(np.argmax(bits[offset:offset + size])))
        offset += size
    if protocol is Protocol.ROTATION:
        return TransformSpec(protocol, rotation_k=idx[0])
    if protocol is Protocol.JIGSAW:
        return TransformSpec(protocol, perm_index=idx[0])
    return TransformSpec(protocol, perm_index=idx[0], partition_rotations=tuple(idx[1:]))


def normal_label(protocol: Protocol) -> PretextLabel:
    return encode_label(TransformSpec(protocol))


def enumerate_transforms(
    protocol: Protocol,
    subsample: Optional[int] = None,
    seed: int = 0,
) -> List[Tuple[TransformSpec, PretextLabel]]:
    """Every transformation of the protocol with its label, identity first.

    ``subsample`` only matters for ``JIGSAW_ROTATION``: the six unrotated
    permutations are kept and ``subsample`` rotated variants are drawn without
    replacement using ``seed``.
    """
    if protocol is Protocol.ROTATION:
        specs = [TransformSpec(protocol, rotation_k=k) for k in range(4)]
    elif protocol is Protocol.JIGSAW:
        specs = [TransformSpec(protocol, perm_index=p) for p in range(6)]
    else:
        specs = [
            TransformSpec(protocol, perm_index=p, partition_rotations=rots)
            for p in range(6)
            for rots in itertools.product(range(4), repeat=3)
        ]
        if subsample is not None:
            base = [s for s in specs if tuple(s.partition_rotations) == (0, 0, 0)]
            rest = [s for s in specs if tuple(s.partition_rotations) != (0, 0, 0)]
            rng = np.random.default_rng(seed)
            pick = rng.choice(len(rest), size=min(subsample, len(rest)), replace=False)
            specs = base + [rest[i] for i in sorted(pick)]
    return [(s, encode_label(s)) for s in specs]


def labels_to_tensor(specs: Sequence[TransformSpec]) -> torch.Tensor:
    """Stack encoded labels into a float tensor of shape (batch, label_dim)."""
    return torch.from_numpy(np.stack([encode_label(s).as_array() for s in specs]))
