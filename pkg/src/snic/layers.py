"""Convolution helpers and the simplified GDN/IGDN nonlinearity."""

from __future__ import annotations

import math

import torch
import torch.nn as nn
import torch.nn.functional as F

BETA_MIN = 1e-6


def conv(in_ch: int, out_ch: int, kernel_size: int = 5, stride: int = 2) -> nn.Conv2d:
    return nn.Conv2d(in_ch, out_ch, kernel_size, stride=stride, padding=kernel_size // 2)


def deconv(in_ch: int, out_ch: int, kernel_size: int = 5, stride: int = 2) -> nn.ConvTranspose2d:
    return nn.ConvTranspose2d(in_ch, out_ch, kernel_size, stride=stride,
                              padding=kernel_size // 2, output_padding=stride - 1)


def conv1x1(in_ch: int, out_ch: int) -> nn.Conv2d:
    return nn.Conv2d(in_ch, out_ch, 1)


def gdn(x: torch.Tensor, beta: torch.Tensor, gamma: torch.Tensor, inverse: bool = False) -> torch.Tensor:
    """x_i / (beta_i + sum_j gamma_ij |x_j|), or the product for ``inverse``.

    ``x`` is (B, C, H, W); ``beta`` is (C,); ``gamma`` is (C, C) indexed [i, j].
    """
    if torch.any(beta <= 0):
        raise ValueError("GDN beta must be strictly positive")
    c = x.shape[1]
    norm = F.conv2d(x.abs(), gamma.reshape(c, c, 1, 1), beta)
    return x * norm if inverse else x / norm


def igdn(x: torch.Tensor, beta: torch.Tensor, gamma: torch.Tensor) -> torch.Tensor:
    return gdn(x, beta, gamma, inverse=True)


def _inv_softplus(v: float) -> float:
    return v + math.log(-math.expm1(-v))


class GDN(nn.Module):
    """Simplified GDN; beta and gamma are kept positive through softplus."""

    def __init__(self, channels: int, inverse: bool = False, beta_init: float = 1.0,
                 gamma_init: float = 0.1):
        super().__init__()
        self.inverse = inverse
        self.beta_raw = nn.Parameter(torch.full((channels,), _inv_softplus(beta_init)))
        off = torch.full((channels, channels), -12.0)
        off.fill_diagonal_(_inv_softplus(gamma_init))
        self.gamma_raw = nn.Parameter(off)

    @property
    def beta(self) -> torch.Tensor:
        return F.softplus(self.beta_raw) + BETA_MIN

    @property
    def gamma(self) -> torch.Tensor:
        return F.softplus(self.gamma_raw)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return gdn(x, self.beta, self.gamma, self.inverse)


class ResidualBlock(nn.Module):
    """conv3x3 -> ReLU -> conv3x3 with identity skip."""

    def __init__(self, channels: int):
        super().__init__()
        self.conv1 = conv(channels, channels, 3, 1)
        self.conv2 = conv(channels, channels, 3, 1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return x + self.conv2(F.relu(self.conv1(x)))
