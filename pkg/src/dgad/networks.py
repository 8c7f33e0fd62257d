"""Encoder, decoder and joint (image, latent) discriminator.

Every convolution pads explicitly so the padding mode can be switched between
edge-mirroring ("symmetric") and zeros, and can optionally see two coordinate
channels (CoordConv).
"""
from __future__ import annotations

import enum
from dataclasses import asdict, dataclass
from typing import Optional, Tuple

import torch
import torch.nn as nn
import torch.nn.functional as F
from torch.nn.utils.parametrizations import spectral_norm


class PaddingMode(str, enum.Enum):
    SYMMETRIC = "symmetric"
    ZERO = "zero"


@dataclass
class NetConfig:
    image_size: int = 32
    image_channels: int = 3
    latent_channels: int = 128
    base_width: int = 64
    disc_width: int = 92
    n_res_blocks: int = 3
    padding_mode: PaddingMode = PaddingMode.SYMMETRIC
    use_coord: bool = False
    label_dim: int = 4
    label_blocks: Optional[Tuple[int, ...]] = None
    # power iterations per training-mode forward of each spectrally normalized layer
    sn_iterations: int = 1

    def __post_init__(self):
        self.padding_mode = PaddingMode(self.padding_mode)
        if self.label_blocks is None:
            self.label_blocks = (self.label_dim,)
        self.label_blocks = tuple(int(b) for b in self.label_blocks)
        self.validate()

    def validate(self) -> None:
        if self.image_size < 4 or self.image_size % 4:
            raise ValueError(f"image_size must be a positive multiple of 4, got {self.image_size}")
        if self.image_channels not in (1, 3):
            raise ValueError(f"image_channels must be 1 or 3, got {self.image_channels}")
        for name in ("latent_channels", "base_width", "disc_width", "label_dim", "sn_iterations"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if sum(self.label_blocks) != self.label_dim:
            raise ValueError(f"label blocks {self.label_blocks} do not sum to label_dim={self.label_dim}")

    @classmethod
    def for_protocol(cls, protocol, **kwargs) -> "NetConfig":
        return cls(label_dim=protocol.label_dim, label_blocks=protocol.blocks, **kwargs)

    @property
    def latent_size(self) -> int:
        return self.image_size // 4

    def to_dict(self) -> dict:
        d = asdict(self)
        d["padding_mode"] = self.padding_mode.value
        d["label_blocks"] = list(self.label_blocks)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "NetConfig":
        return cls(**d)


def pad_features(x: torch.Tensor, amount: int, mode: PaddingMode | str = PaddingMode.SYMMETRIC) -> torch.Tensor:
    """Pad the last two axes by ``amount`` on every side.

    Symmetric padding mirrors the border including the edge sample, so
    ``[a, b, c]`` padded by one becomes ``[a, a, b, c, c]``.
    """
    mode = PaddingMode(mode)
    if amount < 0:
        raise ValueError("padding amount must be non-negative")
    if amount == 0:
        return x
    h, w = x.shape[-2:]
    if amount > h or amount > w:
        raise ValueError(f"padding {amount} exceeds spatial size {h}x{w}")
    if mode is PaddingMode.ZERO:
        return F.pad(x, (amount, amount, amount, amount))
    x = torch.cat([x[..., :amount].flip(-1), x, x[..., -amount:].flip(-1)], dim=-1)
    return torch.cat([x[..., :amount, :].flip(-2), x, x[..., -amount:, :].flip(-2)], dim=-2)


def coord_channels(height: int, width: int, device=None, dtype=None) -> torch.Tensor:
    """Row and column coordinates in [-1, 1], shape (2, height, width).

    A length-one axis is filled with -1.
    """
    if height < 1 or width < 1:
        raise ValueError("coordinate map needs positive size")

    def axis(n):
        if n == 1:
            return torch.full((1,), -1.0, device=device, dtype=dtype)
        return torch.linspace(-1.0, 1.0, n, device=device, dtype=dtype)

    rows, cols = torch.meshgrid(axis(height), axis(width), indexing="ij")
    return torch.stack([rows, cols])


class PadConv2d(nn.Module):
    """Explicitly padded convolution with optional coordinate channels."""

    def __init__(self, in_ch, out_ch, kernel_size, stride=1, padding=0,
                 padding_mode=PaddingMode.SYMMETRIC, use_coord=False, bias=True, sn=False, sn_iterations=1):
        super().__init__()
        self.padding = padding
        self.padding_mode = PaddingMode(padding_mode)
        self.use_coord = use_coord
        conv = nn.Conv2d(in_ch + (2 if use_coord else 0), out_ch, kernel_size, stride=stride, bias=bias)
        self.conv = spectral_norm(conv, n_power_iterations=sn_iterations) if sn else conv

    def forward(self, x):
        if self.use_coord:
            coords = coord_channels(x.shape[-2], x.shape[-1], device=x.device, dtype=x.dtype)
            x = torch.cat([x, coords.expand(x.shape[0], -1, -1, -1)], dim=1)
        return self.conv(pad_features(x, self.padding, self.padding_mode))


def _conv_in_relu(cfg: NetConfig, in_ch, out_ch, k, stride, pad):
    return nn.Sequential(
        PadConv2d(in_ch, out_ch, k, stride, pad, cfg.padding_mode, cfg.use_coord, bias=False),
        nn.InstanceNorm2d(out_ch, affine=True),
        nn.ReLU(inplace=True),
    )


class ResidualBlock(nn.Module):
    def __init__(self, cfg: NetConfig, ch: int):
        super().__init__()
        self.body = nn.Sequential(
            PadConv2d(ch, ch, 3, 1, 1, cfg.padding_mode, cfg.use_coord, bias=False),
            nn.InstanceNorm2d(ch, affine=True),
            nn.ReLU(inplace=True),
            PadConv2d(ch, ch, 3, 1, 1, cfg.padding_mode, cfg.use_coord, bias=False),
            nn.InstanceNorm2d(ch, affine=True),
        )

    def forward(self, x):
        return x + self.body(x)


class Encoder(nn.Module):
    """Image -> spatial latent code at 1/4 resolution, bounded by tanh."""

    def __init__(self, cfg: NetConfig):
        super().__init__()
        cfg.validate()
        self.config = cfg
        w = cfg.base_width
        layers = [
            _conv_in_relu(cfg, cfg.image_channels, w, 7, 1, 3),
            _conv_in_relu(cfg, w, 2 * w, 4, 2, 1),
            _conv_in_relu(cfg, 2 * w, 4 * w, 4, 2, 1),
        ]
        layers += [ResidualBlock(cfg, 4 * w) for _ in range(cfg.n_res_blocks)]
        layers += [PadConv2d(4 * w, cfg.latent_channels, 3, 1, 1, cfg.padding_mode, cfg.use_coord), nn.Tanh()]
        self.net = nn.Sequential(*layers)

    def forward(self, x):
        return self.net(x)


class Decoder(nn.Module):
    """Mirror of :class:`Encoder`; bilinear upsampling followed by 5x5 convs."""

    def __init__(self, cfg: NetConfig):
        super().__init__()
        cfg.validate()
        self.config = cfg
        w = cfg.base_width
        layers = [_conv_in_relu(cfg, cfg.latent_channels, 4 * w, 3, 1, 1)]
        layers += [ResidualBlock(cfg, 4 * w) for _ in range(cfg.n_res_blocks)]
        layers += [
            nn.Upsample(scale_factor=2, mode="bilinear", align_corners=False),
            _conv_in_relu(cfg, 4 * w, 2 * w, 5, 1, 2),
            nn.Upsample(scale_factor=2, mode="bilinear", align_corners=False),
            _conv_in_relu(cfg, 2 * w, w, 5, 1, 2),
            PadConv2d(w, cfg.image_channels, 7, 1, 3, cfg.padding_mode, cfg.use_coord),
            nn.Tanh(),
        ]
        self.net = nn.Sequential(*layers)

    def forward(self, z):
        return self.net(z)


class Discriminator(nn.Module):
    """Joint discriminator over (x, z) with an adversarial and a pretext head.

    ``forward`` returns ``(adv, class_logits)`` with shapes (B,) and
    (B, label_dim).
    """

    def __init__(self, cfg: NetConfig):
        super().__init__()
        cfg.validate()
        self.config = cfg
        d = cfg.disc_width
        it = cfg.sn_iterations

        def conv(i, o, k, s, p):
            return PadConv2d(i, o, k, s, p, cfg.padding_mode, cfg.use_coord, sn=True, sn_iterations=it)

        self.x_path = nn.Sequential(
            conv(cfg.image_channels, d, 4, 2, 1), nn.LeakyReLU(0.01),
            conv(d, 2 * d, 4, 2, 1), nn.LeakyReLU(0.01),
        )
        self.joint = nn.Sequential(
            conv(2 * d + cfg.latent_channels, 4 * d, 3, 1, 1), nn.LeakyReLU(0.01),
            conv(4 * d, 4 * d, 4, 2, 1), nn.LeakyReLU(0.01),
        )
        self.adv_head = spectral_norm(nn.Linear(4 * d, 1), n_power_iterations=it)
        self.cls_head = spectral_norm(nn.Linear(4 * d, cfg.label_dim), n_power_iterations=it)

    def forward(self, x, z):
        hx = self.x_path(x)
        if hx.shape[-2:] != z.shape[-2:]:
            raise ValueError(f"latent spatial size {tuple(z.shape[-2:])} does not match "
                             f"downsampled image {tuple(hx.shape[-2:])}")
        h = self.joint(torch.cat([hx, z], dim=1)).mean(dim=(-2, -1))
        return self.adv_head(h).squeeze(-1), self.cls_head(h)


def build_encoder(cfg: NetConfig) -> Encoder:
    return Encoder(cfg)


def build_decoder(cfg: NetConfig) -> Decoder:
    return Decoder(cfg)


def build_discriminator(cfg: NetConfig) -> Discriminator:
    return Discriminator(cfg)


def count_parameters(module: nn.Module) -> int:
    return sum(p.numel() for p in module.parameters())


def block_softmax(logits: torch.Tensor, blocks) -> torch.Tensor:
    """Softmax applied independently within each label block."""
    return torch.cat([F.softmax(part, dim=-1) for part in logits.split(list(blocks), dim=-1)], dim=-1)


def block_log_softmax(logits: torch.Tensor, blocks) -> torch.Tensor:
    return torch.cat([F.log_softmax(part, dim=-1) for part in logits.split(list(blocks), dim=-1)], dim=-1)
