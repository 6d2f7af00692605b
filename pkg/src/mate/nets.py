"""Modality encoders, decoders, shared-latent fusion, and the classifier head.

Encoders follow the convolution-then-recurrence recipe: two 1-D conv blocks
over time (kernel 5, same padding, batch-norm + ReLU), a unidirectional GRU
returning per-timestep states, and two linear heads producing Gaussian
posterior parameters for the shared and specific latent blocks. Decoders map
concatenated latents back to observation channels per timestep; the
classifier mean-pools latents over time before a two-layer head.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import torch
from torch import Tensor, nn


@dataclass
class PosteriorParams:
    """Factorized Gaussian parameters; exp(log_var) is the variance."""

    mean: Tensor
    log_var: Tensor

    @property
    def shape(self):
        return self.mean.shape


@dataclass
class EncoderOutput:
    shared: PosteriorParams  # over z^{c_m}, [B, T, n_c]
    specific: PosteriorParams  # over z^{s_m}, [B, T, n_s]


class ConvBlock(nn.Module):
    def __init__(self, in_channels: int, out_channels: int, kernel: int = 5):
        super().__init__()
        self.conv = nn.Conv1d(in_channels, out_channels, kernel, padding=kernel // 2)
        self.norm = nn.BatchNorm1d(out_channels)
        self.act = nn.ReLU()

    def forward(self, x: Tensor) -> Tensor:
        return self.act(self.norm(self.conv(x)))


class ModalityEncoder(nn.Module):
    """One modality's trunk and posterior heads.

    The trunk is shared between the heads, so perturbing one head leaves the
    other head's parameters untouched.
    """

    def __init__(
        self,
        in_channels: int,
        shared_dim: int,
        specific_dim: int,
        conv_channels: int = 150,
        rnn_units: int = 300,
    ):
        super().__init__()
        self.in_channels = in_channels
        self.shared_dim = shared_dim
        self.specific_dim = specific_dim
        self.conv1 = ConvBlock(in_channels, conv_channels)
        self.conv2 = ConvBlock(conv_channels, conv_channels)
        self.gru = nn.GRU(conv_channels, rnn_units, batch_first=True)
        self.shared_head = nn.Linear(rnn_units, 2 * shared_dim)
        self.specific_head = nn.Linear(rnn_units, 2 * specific_dim)

    def forward(self, x: Tensor) -> EncoderOutput:
        if x.dim() != 3 or x.shape[2] != self.in_channels:
            raise ValueError(
                f"expected [B, T, {self.in_channels}] input, got shape {tuple(x.shape)}"
            )
        h = self.conv2(self.conv1(x.transpose(1, 2))).transpose(1, 2)
        h, _ = self.gru(h)
        shared = self.shared_head(h)
        specific = self.specific_head(h)
        return EncoderOutput(
            shared=PosteriorParams(*shared.chunk(2, dim=2)),
            specific=PosteriorParams(*specific.chunk(2, dim=2)),
        )


def reparameterize(params: PosteriorParams, noise: Tensor) -> Tensor:
    """sample = mean + exp(0.5 * log_var) * noise."""
    if noise.shape != params.mean.shape:
        raise ValueError(
            f"noise shape {tuple(noise.shape)} != params shape {tuple(params.mean.shape)}"
        )
    return params.mean + torch.exp(0.5 * params.log_var) * noise


def fuse_shared(samples: Sequence[Tensor], strategy: str = "first") -> Tensor:
    """Collapse per-modality shared samples into the single z^c estimate."""
    samples = list(samples)
    if not samples:
        raise ValueError("fuse_shared needs at least one modality")
    if strategy == "first":
        return samples[0]
    if strategy == "mean":
        return torch.stack(samples).mean(dim=0)
    raise ValueError(f"unknown fusion strategy {strategy!r}")


class ModalityDecoder(nn.Module):
    """Latents back to observation channels, per timestep."""

    def __init__(
        self,
        shared_dim: int,
        specific_dim: int,
        obs_dim: int,
        hidden: tuple[int, ...] = (),
    ):
        super().__init__()
        layers: list[nn.Module] = []
        d = shared_dim + specific_dim
        for h in hidden:
            layers += [nn.Linear(d, h), nn.LeakyReLU()]
            d = h
        layers.append(nn.Linear(d, obs_dim))
        self.net = nn.Sequential(*layers)
        self.in_dim = shared_dim + specific_dim

    def forward(self, z_c: Tensor, z_s: Tensor) -> Tensor:
        joint = torch.cat([z_c, z_s], dim=2)
        if joint.shape[2] != self.in_dim:
            raise ValueError(f"latent dim {joint.shape[2]} != decoder input {self.in_dim}")
        return self.net(joint)


class Classifier(nn.Module):
    """Mean-pool latents over time, then dense(GELU) -> dense logits."""

    def __init__(self, latent_dim: int, num_classes: int, hidden: int = 128):
        super().__init__()
        self.net = nn.Sequential(
            nn.Linear(latent_dim, hidden), nn.GELU(), nn.Linear(hidden, num_classes)
        )

    def forward(self, z_c: Tensor, z_s_all: Sequence[Tensor]) -> Tensor:
        joint = torch.cat([z_c, *z_s_all], dim=2)
        return self.net(joint.mean(dim=1))
