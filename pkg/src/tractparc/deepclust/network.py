"""Dense convolutional autoencoder over K x K augmented feature matrices.

Each encoder level is a 5x5 convolution, batch norm, and 2x2 max pool;
with dense connections on, every level's pooled output is downsampled
again and concatenated onto the next level's output before flattening
into the latent vector. The decoder mirrors the plain convolutional path
back to a K x K reconstruction.
"""

from dataclasses import dataclass, field, asdict

import torch
from torch import nn


@dataclass
class NetworkConfig:
    """Hyperparameters of the autoencoder and its two training stages."""

    k: int
    c: int
    latent_dim: int = 10
    num_levels: int = 3
    channels: tuple = (16, 32, 64)
    lam: float = 15000.0
    beta: float = 0.5
    batch_size: int = 256
    pretrain_epochs: int = 100
    joint_epochs: int = 50
    lr_pretrain: float = 1e-3
    lr_joint: float = 1e-4
    seed: int = 0
    empty_fraction: float = 1.0 / 80.0
    dense_connections: bool = True
    adaptive_rescue: bool = True

    def __post_init__(self):
        self.channels = tuple(int(ch) for ch in self.channels)
        if self.lam <= 0:
            raise ValueError("lam must be > 0")
        if self.beta < 0:
            raise ValueError("beta must be >= 0")
        if self.c < 2:
            raise ValueError("c must be >= 2")
        if self.batch_size < self.c:
            raise ValueError("batch_size must be >= c")
        if not 0.0 < self.empty_fraction < 1.0:
            raise ValueError("empty_fraction must be in (0, 1)")
        if len(self.channels) != self.num_levels:
            raise ValueError(f"need {self.num_levels} channel counts, got {len(self.channels)}")
        if self.k < 2**self.num_levels:
            raise ValueError(f"k={self.k} too small for {self.num_levels} pooling levels")

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        d["channels"] = tuple(d["channels"])
        return cls(**d)


def _level_sizes(k, num_levels):
    sizes = [k]
    for _ in range(num_levels):
        sizes.append(sizes[-1] // 2)
    return sizes


class ConvAutoencoder(nn.Module):
    def __init__(self, cfg):
        super().__init__()
        self.cfg = cfg
        self.sizes = _level_sizes(cfg.k, cfg.num_levels)

        self.enc_convs = nn.ModuleList()
        self.enc_bns = nn.ModuleList()
        in_ch = 1
        for level, out_ch in enumerate(cfg.channels):
            self.enc_convs.append(nn.Conv2d(in_ch, out_ch, kernel_size=5, padding=2))
            self.enc_bns.append(nn.BatchNorm2d(out_ch))
            # the dense path re-pools the level input and concatenates it
            in_ch = out_ch + (in_ch if cfg.dense_connections and level > 0 else 0)
        self.enc_out_channels = in_ch
        flat = self.enc_out_channels * self.sizes[-1] ** 2
        self.to_latent = nn.Linear(flat, cfg.latent_dim)

        self.from_latent = nn.Linear(cfg.latent_dim, cfg.channels[-1] * self.sizes[-1] ** 2)
        self.dec_convs = nn.ModuleList()
        self.dec_bns = nn.ModuleList()
        dec_channels = list(cfg.channels[::-1])
        for i, ch in enumerate(dec_channels):
            out_ch = dec_channels[i + 1] if i + 1 < len(dec_channels) else 1
            self.dec_convs.append(nn.Conv2d(ch, out_ch, kernel_size=5, padding=2))
            self.dec_bns.append(nn.BatchNorm2d(out_ch) if out_ch > 1 else None)

        self.pool = nn.MaxPool2d(2)
        self.relu = nn.ReLU()

    def encode(self, x):
        out = x
        for level in range(self.cfg.num_levels):
            prev = out
            out = self.pool(self.relu(self.enc_bns[level](self.enc_convs[level](out))))
            if self.cfg.dense_connections and level > 0:
                out = torch.cat([out, self.pool(prev)], dim=1)
        return self.to_latent(out.flatten(1))

    def decode(self, z):
        out = self.from_latent(z)
        out = out.view(-1, self.cfg.channels[-1], self.sizes[-1], self.sizes[-1])
        for i, conv in enumerate(self.dec_convs):
            target = self.sizes[self.cfg.num_levels - 1 - i]
            out = nn.functional.interpolate(out, size=(target, target), mode="nearest")
            out = conv(out)
            if self.dec_bns[i] is not None:
                out = self.relu(self.dec_bns[i](out))
        return out

    def forward(self, x):
        z = self.encode(x)
        return z, self.decode(z)


def build_autoencoder(cfg, seed=None):
    """Build a seeded autoencoder; the same seed gives identical weights."""
    torch.manual_seed(cfg.seed if seed is None else seed)
    return ConvAutoencoder(cfg)
