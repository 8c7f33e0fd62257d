"""Dataset ingestion, one-class filtering and preprocessing.

Images leave this module as float tensors of shape (C, H, W) in [-1, 1].
"""
from __future__ import annotations

import enum
import gzip
import logging
import pickle
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, List, Optional, Sequence, Union

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image

log = logging.getLogger(__name__)

IMAGE_SUFFIXES = {".png", ".bmp", ".tif", ".tiff", ".jpg", ".jpeg", ".ppm", ".pgm"}


class DatasetName(str, enum.Enum):
    MNIST_LIKE = "mnist_like"
    CIFAR_LIKE = "cifar_like"
    FOLDER = "folder"
    SYNTHETIC_SHAPES = "synthetic_shapes"


class Split(str, enum.Enum):
    TRAIN = "train"
    TEST = "test"


class ShapeClass(enum.IntEnum):
    RECTANGLE = 0
    ELLIPSE = 1


@dataclass
class DatasetSpec:
    name: DatasetName
    root: Optional[Path] = None
    image_size: int = 32
    normal_class: Union[int, str] = 0
    split: Split = Split.TRAIN
    # synthetic-only knobs
    n_train: int = 2000
    n_test_per_class: int = 500
    seed: int = 0
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        self.name = DatasetName(self.name)
        self.split = Split(self.split)
        if self.root is not None:
            self.root = Path(self.root)
        if self.image_size < 4 or self.image_size & (self.image_size - 1):
            raise ValueError(f"image_size must be a power of two, got {self.image_size}")


@dataclass
class Sample:
    image: torch.Tensor
    label: int
    sample_id: str


def stack_images(samples: Sequence[Sample]) -> torch.Tensor:
    return torch.stack([s.image for s in samples])


def labels_of(samples: Sequence[Sample]) -> np.ndarray:
    return np.asarray([s.label for s in samples], dtype=np.int64)


def preprocess(image, target_size: int, augment: bool = False,
               rng: Optional[np.random.Generator] = None) -> torch.Tensor:
    """uint8 image (H, W) or (H, W, C) -> float tensor (C, target, target) in [-1, 1].

    With ``augment`` a random zoom factor in [1.0, 1.2] is drawn from ``rng``
    and the image is center-cropped by that factor before resizing.
    """
    arr = np.asarray(image)
    if arr.ndim == 2:
        arr = arr[:, :, None]
    if arr.ndim != 3 or arr.shape[0] == 0 or arr.shape[1] == 0:
        raise ValueError(f"cannot preprocess image of shape {arr.shape}")
    x = torch.from_numpy(arr.copy()).permute(2, 0, 1).float()
    if arr.dtype == np.uint8:
        x = x / 127.5 - 1.0
    if augment:
        if rng is None:
            raise ValueError("augmentation needs an rng")
        x = zoom_crop(x, float(rng.uniform(1.0, 1.2)))
    if x.shape[-2:] != (target_size, target_size):
        x = F.interpolate(x[None], size=(target_size, target_size), mode="bilinear",
                          align_corners=False)[0]
    return x.clamp_(-1.0, 1.0)


def zoom_crop(x: torch.Tensor, scale: float) -> torch.Tensor:
    """Center crop by ``scale`` and resize back to the input size."""
    h, w = x.shape[-2:]
    ch, cw = max(1, round(h / scale)), max(1, round(w / scale))
    top, left = (h - ch) // 2, (w - cw) // 2
    crop = x[..., top:top + ch, left:left + cw]
    squeeze = crop.dim() == 3
    if squeeze:
        crop = crop[None]
    out = F.interpolate(crop, size=(h, w), mode="bilinear", align_corners=False)
    return out[0] if squeeze else out


def random_zoom_batch(images: torch.Tensor, rng: np.random.Generator) -> torch.Tensor:
    return torch.stack([zoom_crop(img, float(rng.uniform(1.0, 1.2))) for img in images])


# ---------------------------------------------------------------- synthetic

def render_shape(image_size: int, shape: ShapeClass, rng: np.random.Generator) -> np.ndarray:
    """One grayscale uint8 image with a filled, horizontally elongated shape.

    The shape sits in the lower half and straddles the vertical midline, so
    quarter-turn rotations and quadrant shuffles both change its appearance.
    """
    s = image_size
    bg = rng.uniform(0.0, 0.08, size=(s, s))
    width = rng.uniform(0.45, 0.75) * s
    height = rng.uniform(0.18, 0.32) * s
    cx = rng.uniform(0.4, 0.6) * s
    cy = rng.uniform(0.62, 0.74) * s
    level = rng.uniform(0.55, 1.0)
    yy, xx = np.mgrid[0:s, 0:s] + 0.5
    if shape is ShapeClass.RECTANGLE:
        mask = (np.abs(xx - cx) <= width / 2) & (np.abs(yy - cy) <= height / 2)
    else:
        mask = ((xx - cx) / (width / 2)) ** 2 + ((yy - cy) / (height / 2)) ** 2 <= 1.0
    img = np.where(mask, level, bg)
    return np.clip(np.round(img * 255.0), 0, 255).astype(np.uint8)


def synthetic_shapes(n: int, image_size: int, shape: ShapeClass, seed: int,
                     id_prefix: str = "") -> List[Sample]:
    if n < 1:
        raise ValueError("n must be at least 1")
    shape = ShapeClass(shape)
    rng = np.random.default_rng([seed, int(shape)])
    out = []
    for i in range(n):
        img = render_shape(image_size, shape, rng)
        out.append(Sample(preprocess(img, image_size), int(shape), f"{id_prefix}{shape.name.lower()}-{i:05d}"))
    return out


def _load_synthetic(spec: DatasetSpec) -> List[Sample]:
    normal = ShapeClass(class_index(spec.normal_class, [c.name.lower() for c in ShapeClass]))
    if spec.split is Split.TRAIN:
        return synthetic_shapes(spec.n_train, spec.image_size, normal, spec.seed, "train-")
    out: List[Sample] = []
    for shape in ShapeClass:
        out += synthetic_shapes(spec.n_test_per_class, spec.image_size, shape, spec.seed + 10_000, "test-")
    return out


# ---------------------------------------------------------------- MNIST / CIFAR

def _open_maybe_gz(path: Path):
    if path.exists():
        return open(path, "rb")
    gz = path.with_name(path.name + ".gz")
    if gz.exists():
        return gzip.open(gz, "rb")
    raise FileNotFoundError(f"missing data file {path} (or {gz.name})")


def read_idx(path: Path) -> np.ndarray:
    """Read an IDX file (the MNIST binary format), optionally gzipped."""
    with _open_maybe_gz(Path(path)) as fh:
        data = fh.read()
    zero, dtype_code, ndim = struct.unpack(">HBB", data[:4])
    if zero != 0 or dtype_code != 0x08:
        raise ValueError(f"{path}: not an unsigned-byte IDX file")
    dims = struct.unpack(">" + "I" * ndim, data[4:4 + 4 * ndim])
    arr = np.frombuffer(data, dtype=np.uint8, offset=4 + 4 * ndim)
    if arr.size != int(np.prod(dims)):
        raise ValueError(f"{path}: truncated IDX payload")
    return arr.reshape(dims)


def _load_mnist_arrays(root: Path, split: Split):
    prefix = "train" if split is Split.TRAIN else "t10k"
    images = read_idx(root / f"{prefix}-images-idx3-ubyte")
    labels = read_idx(root / f"{prefix}-labels-idx1-ubyte")
    return images, labels.astype(np.int64)


def _load_cifar_arrays(root: Path, split: Split):
    names = [f"data_batch_{i}" for i in range(1, 6)] if split is Split.TRAIN else ["test_batch"]
    if all((root / f"{n}.bin").exists() for n in names):
        chunks = [np.fromfile(root / f"{n}.bin", dtype=np.uint8).reshape(-1, 3073) for n in names]
        raw = np.concatenate(chunks)
        labels = raw[:, 0].astype(np.int64)
        images = raw[:, 1:].reshape(-1, 3, 32, 32).transpose(0, 2, 3, 1)
        return images, labels
    images, labels = [], []
    for n in names:
        path = root / n
        if not path.exists():
            raise FileNotFoundError(f"missing CIFAR batch {path} (expected pickled or .bin batches)")
        with open(path, "rb") as fh:
            batch = pickle.load(fh, encoding="bytes")
        images.append(np.asarray(batch[b"data"], dtype=np.uint8).reshape(-1, 3, 32, 32).transpose(0, 2, 3, 1))
        labels.append(np.asarray(batch[b"labels"], dtype=np.int64))
    return np.concatenate(images), np.concatenate(labels)


def class_index(normal_class, names: Sequence[str]) -> int:
    """Resolve a class given by index or (case-insensitive) name."""
    if isinstance(normal_class, str) and not normal_class.isdigit():
        lowered = [c.lower() for c in names]
        if normal_class.lower() not in lowered:
            raise ValueError(f"unknown class {normal_class!r}; known: {list(names)}")
        return lowered.index(normal_class.lower())
    idx = int(normal_class)
    if not 0 <= idx < len(names):
        raise ValueError(f"unknown class {idx}; dataset has {len(names)} classes")
    return idx


def _array_samples(images: np.ndarray, labels: np.ndarray, spec: DatasetSpec, keep_class: Optional[int],
                   rng: Optional[np.random.Generator]) -> List[Sample]:
    out = []
    augment = bool(spec.extra.get("augment", False))
    for i, (img, lab) in enumerate(zip(images, labels)):
        if keep_class is not None and lab != keep_class:
            continue
        out.append(Sample(preprocess(img, spec.image_size, augment, rng), int(lab), f"{spec.split.value}-{i:06d}"))
    return out


def _folder_root(spec: DatasetSpec) -> Path:
    split_dir = spec.root / spec.split.value
    return split_dir if split_dir.is_dir() else spec.root


def _subdirs(path: Path) -> List[str]:
    return [p.name for p in path.iterdir() if p.is_dir()] if path.is_dir() else []


def _folder_classes(spec: DatasetSpec) -> List[str]:
    """Class names shared by both splits, so a label means the same class in each."""
    split_dirs = [spec.root / s.value for s in Split]
    if any(d.is_dir() for d in split_dirs):
        return sorted(set().union(*(_subdirs(d) for d in split_dirs)))
    return sorted(_subdirs(spec.root))


def _load_folder(spec: DatasetSpec) -> List[Sample]:
    root = _folder_root(spec)
    classes = _folder_classes(spec)
    if not classes:
        raise FileNotFoundError(f"no class subdirectories under {spec.root}")
    normal = class_index(spec.normal_class, classes)
    keep = [classes[normal]] if spec.split is Split.TRAIN else classes
    out = []
    for name in keep:
        label = classes.index(name)
        if not (root / name).is_dir():
            continue
        for path in sorted((root / name).rglob("*")):
            if path.suffix.lower() not in IMAGE_SUFFIXES:
                continue
            try:
                with Image.open(path) as im:
                    arr = np.asarray(im.convert("L" if spec.extra.get("channels", 3) == 1 else "RGB"))
            except OSError as exc:
                raise ValueError(f"unreadable image {path}: {exc}") from exc
            rel = path.relative_to(root).as_posix()
            out.append(Sample(preprocess(arr, spec.image_size), label, rel))
    if not out:
        raise FileNotFoundError(f"no images found for classes {keep} under {root}")
    return out


def load_dataset(spec: DatasetSpec) -> List[Sample]:
    """Load one split; TRAIN keeps only the normal class, TEST keeps everything."""
    if spec.name is DatasetName.SYNTHETIC_SHAPES:
        return _load_synthetic(spec)
    if spec.root is None or not spec.root.exists():
        raise FileNotFoundError(f"dataset root {spec.root} does not exist")
    if spec.name is DatasetName.FOLDER:
        return _load_folder(spec)
    if spec.name is DatasetName.MNIST_LIKE:
        images, labels = _load_mnist_arrays(spec.root, spec.split)
    else:
        images, labels = _load_cifar_arrays(spec.root, spec.split)
    n_classes = int(labels.max()) + 1
    normal = class_index(spec.normal_class, [str(i) for i in range(n_classes)])
    rng = np.random.default_rng(spec.seed)
    keep = normal if spec.split is Split.TRAIN else None
    return _array_samples(images, labels, spec, keep, rng)


def class_names(spec: DatasetSpec) -> List[str]:
    if spec.name is DatasetName.SYNTHETIC_SHAPES:
        return [c.name.lower() for c in ShapeClass]
    if spec.name is DatasetName.FOLDER:
        return _folder_classes(spec)
    return [str(i) for i in range(10)]


def binary_anomaly_labels(samples: Iterable[Sample], normal_class: int) -> np.ndarray:
    """0 for the normal class, 1 for everything else."""
    return np.asarray([0 if s.label == normal_class else 1 for s in samples], dtype=np.int64)
