"""3-D volume encoders mapping a (D, H, W) grid to a d-vector.

Two interchangeable desk-scale backbones; both end in global average
pooling and a linear head to latent_dim, so everything downstream is
backbone-agnostic. GroupNorm instead of BatchNorm keeps single-volume
encoding a pure function of (volume, params).
"""

import numpy as np
import torch
from torch import nn

from .errors import ConfigurationError
from .nnutils import deterministic_init

ARCHITECTURES = ("resnet_small", "densenet_small")


class ResidualBlock3d(nn.Module):
    def __init__(self, c_in, c_out, stride=1, groups=4):
        super().__init__()
        self.conv1 = nn.Conv3d(c_in, c_out, 3, stride=stride, padding=1, bias=False)
        self.norm1 = nn.GroupNorm(groups, c_out)
        self.conv2 = nn.Conv3d(c_out, c_out, 3, padding=1, bias=False)
        self.norm2 = nn.GroupNorm(groups, c_out)
        self.act = nn.ReLU()
        if stride != 1 or c_in != c_out:
            self.skip = nn.Sequential(
                nn.Conv3d(c_in, c_out, 1, stride=stride, bias=False),
                nn.GroupNorm(groups, c_out),
            )
        else:
            self.skip = nn.Identity()

    def forward(self, x):
        h = self.act(self.norm1(self.conv1(x)))
        h = self.norm2(self.conv2(h))
        return self.act(h + self.skip(x))


class SmallResNet3d(nn.Module):
    """Stem + 3 strided residual stages + GAP + linear."""

    def __init__(self, latent_dim):
        super().__init__()
        self.stem = nn.Sequential(nn.Conv3d(1, 8, 3, padding=1, bias=False),
                                  nn.GroupNorm(4, 8), nn.ReLU())
        self.stage1 = ResidualBlock3d(8, 16, stride=2)
        self.stage2 = ResidualBlock3d(16, 32, stride=2)
        self.stage3 = ResidualBlock3d(32, 32, stride=2)
        self.head = nn.Linear(32, latent_dim)

    def forward(self, x):
        h = self.stem(x)
        h = self.stage3(self.stage2(self.stage1(h)))
        return self.head(h.mean(dim=(2, 3, 4)))


class DenseLayer3d(nn.Module):
    def __init__(self, c_in, growth, groups=2):
        super().__init__()
        self.norm = nn.GroupNorm(groups, c_in)
        self.act = nn.ReLU()
        self.conv = nn.Conv3d(c_in, growth, 3, padding=1, bias=False)

    def forward(self, x):
        return torch.cat([x, self.conv(self.act(self.norm(x)))], dim=1)


class SmallDenseNet3d(nn.Module):
    """3 dense blocks (2 layers each, growth 8) with strided transitions."""

    def __init__(self, latent_dim, growth=8):
        super().__init__()
        self.stem = nn.Sequential(nn.Conv3d(1, 8, 3, padding=1, bias=False),
                                  nn.GroupNorm(2, 8), nn.ReLU())
        channels = 8
        blocks = []
        for b in range(3):
            layers = []
            for _ in range(2):
                layers.append(DenseLayer3d(channels, growth))
                channels += growth
            blocks.append(nn.Sequential(*layers))
            if b < 2:
                half = channels // 2
                blocks.append(nn.Sequential(
                    nn.GroupNorm(2, channels), nn.ReLU(),
                    nn.Conv3d(channels, half, 1, bias=False),
                    nn.AvgPool3d(2),
                ))
                channels = half
        self.blocks = nn.Sequential(*blocks)
        self.final = nn.Sequential(nn.GroupNorm(2, channels), nn.ReLU())
        self.head = nn.Linear(channels, latent_dim)

    def forward(self, x):
        h = self.final(self.blocks(self.stem(x)))
        return self.head(h.mean(dim=(2, 3, 4)))


def init_encoder(architecture, grid_shape, latent_dim, seed):
    """Build a seeded encoder; unknown names raise with the supported list."""
    if architecture not in ARCHITECTURES:
        raise ConfigurationError(
            f"unknown architecture {architecture!r}; supported: {', '.join(ARCHITECTURES)}"
        )
    grid_shape = tuple(int(s) for s in grid_shape)
    if len(grid_shape) != 3 or any(s < 4 for s in grid_shape):
        raise ConfigurationError("grid_shape must be three dims, each >= 4")
    if int(latent_dim) < 4:
        raise ConfigurationError("latent_dim must be >= 4")
    with deterministic_init(seed):
        if architecture == "resnet_small":
            enc = SmallResNet3d(int(latent_dim))
        else:
            enc = SmallDenseNet3d(int(latent_dim))
    enc.architecture = architecture
    enc.grid_shape = grid_shape
    enc.latent_dim = int(latent_dim)
    enc.seed = int(seed)
    return enc


def encode_volume(volume, encoder):
    """Encode one (D, H, W) volume to a (latent_dim,) vector."""
    if isinstance(volume, np.ndarray):
        volume = torch.as_tensor(np.ascontiguousarray(volume))
    dtype = next(encoder.parameters()).dtype
    if tuple(volume.shape) != encoder.grid_shape:
        raise ValueError(
            f"volume shape {tuple(volume.shape)} does not match encoder grid {encoder.grid_shape}"
        )
    return encoder(volume.to(dtype)[None, None])[0]
