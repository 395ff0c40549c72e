"""Factorized hyperprior density and channel-sliced conditional Gaussian model."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .layers import conv
from .quantization import SIGMA_MIN, gaussian_interval_mass

LIKELIHOOD_FLOOR = 1e-9


@dataclass(frozen=True)
class SliceScheme:
    num_slices: int
    channel_ranges: tuple[tuple[int, int], ...]

    @classmethod
    def equal(cls, channels: int, num_slices: int = 10) -> "SliceScheme":
        if channels % num_slices:
            raise ValueError(f"{channels} channels do not split into {num_slices} equal slices")
        width = channels // num_slices
        return cls(num_slices, tuple((i * width, (i + 1) * width) for i in range(num_slices)))

    @property
    def channels(self) -> int:
        return self.channel_ranges[-1][1]

    def split(self, y: torch.Tensor) -> list[torch.Tensor]:
        return [y[:, a:b] for a, b in self.channel_ranges]


@dataclass
class EntropyParams:
    mu: torch.Tensor
    sigma: torch.Tensor


class FactorizedPrior(nn.Module):
    """Per-channel monotone cumulative density built from softplus-positive matrices.

    The CDF of channel c is sigmoid(f_c(x)) where f_c is a composition of
    increasing maps, so it is strictly increasing onto (0, 1).
    """

    def __init__(self, channels: int, filters: tuple[int, ...] = (3, 3, 3), init_scale: float = 10.0):
        super().__init__()
        self.channels = channels
        dims = (1, *filters, 1)
        scale = init_scale ** (1.0 / (len(dims) - 1))
        self.matrices = nn.ParameterList()
        self.biases = nn.ParameterList()
        self.factors = nn.ParameterList()
        for i in range(len(dims) - 1):
            init = math.log(math.expm1(1.0 / scale / dims[i + 1]))
            self.matrices.append(nn.Parameter(torch.full((channels, dims[i + 1], dims[i]), init)))
            self.biases.append(nn.Parameter(torch.empty(channels, dims[i + 1], 1).uniform_(-0.5, 0.5)))
            if i < len(dims) - 2:
                self.factors.append(nn.Parameter(torch.zeros(channels, dims[i + 1], 1)))

    def logits_cumulative(self, x: torch.Tensor) -> torch.Tensor:
        """x: (C, 1, N) -> logits (C, 1, N)."""
        logits = x
        for i, (m, b) in enumerate(zip(self.matrices, self.biases)):
            logits = torch.matmul(F.softplus(m), logits) + b
            if i < len(self.factors):
                logits = logits + torch.tanh(self.factors[i]) * torch.tanh(logits)
        return logits

    def _per_channel(self, v: torch.Tensor) -> torch.Tensor:
        # (B, C, H, W) -> (C, 1, B*H*W)
        return v.transpose(0, 1).reshape(self.channels, 1, -1)

    def _restore(self, p: torch.Tensor, shape) -> torch.Tensor:
        b, c, h, w = shape
        return p.reshape(c, b, h, w).transpose(0, 1)

    def cdf(self, v: torch.Tensor) -> torch.Tensor:
        return self._restore(torch.sigmoid(self.logits_cumulative(self._per_channel(v))), v.shape)

    def likelihood(self, v: torch.Tensor) -> torch.Tensor:
        """P(v - 1/2 < Z < v + 1/2) per element of a (B, C, H, W) tensor."""
        x = self._per_channel(v)
        lower = self.logits_cumulative(x - 0.5)
        upper = self.logits_cumulative(x + 0.5)
        sign = -torch.sign(lower + upper).detach()
        p = (torch.sigmoid(sign * upper) - torch.sigmoid(sign * lower)).abs()
        return self._restore(p, v.shape)

    @torch.no_grad()
    def channel_pmf_table(self, lo: int, hi: int) -> np.ndarray:
        """pmf of every integer in [lo, hi] per channel, float64 (C, hi - lo + 1)."""
        n = torch.arange(lo, hi + 1, dtype=torch.float32)
        v = n.reshape(1, 1, 1, -1).expand(1, self.channels, 1, -1).contiguous()
        return self.likelihood(v)[0, :, 0, :].double().numpy()


def factorized_prior_pmf(z_hat, prior: FactorizedPrior):
    """Elementwise P(z_hat = n) under the factorized prior; accepts numpy or torch."""
    as_numpy = not isinstance(z_hat, torch.Tensor)
    t = torch.as_tensor(np.asarray(z_hat, dtype=np.float32)) if as_numpy else z_hat
    with torch.set_grad_enabled(not as_numpy and torch.is_grad_enabled()):
        p = prior.likelihood(t)
    return p.detach().double().numpy() if as_numpy else p


class SlicePredictor(nn.Module):
    """Three 3x3 convolutions mapping [hyper features, earlier slices] to (mu, sigma)."""

    def __init__(self, in_ch: int, out_ch: int, width: int):
        super().__init__()
        self.net = nn.Sequential(
            conv(in_ch, width, 3, 1), nn.ReLU(),
            conv(width, width, 3, 1), nn.ReLU(),
            conv(width, 2 * out_ch, 3, 1),
        )

    def forward(self, x: torch.Tensor) -> EntropyParams:
        mu, s = self.net(x).chunk(2, dim=1)
        return EntropyParams(mu, SIGMA_MIN + F.softplus(s))


class ChannelConditionalModel(nn.Module):
    """Slice i is modelled from the hyper features and decoded slices 0..i-1."""

    def __init__(self, latent_channels: int, hyper_channels: int, num_slices: int = 10, width: int = 128):
        super().__init__()
        self.scheme = SliceScheme.equal(latent_channels, num_slices)
        s = latent_channels // num_slices
        self.predictors = nn.ModuleList(
            SlicePredictor(hyper_channels + i * s, s, width) for i in range(num_slices)
        )

    def predict_slice_params(self, hyper_features: torch.Tensor, decoded_slices: list[torch.Tensor],
                             i: int) -> EntropyParams:
        if len(decoded_slices) != i:
            raise ValueError(f"slice {i} needs exactly {i} decoded slices, got {len(decoded_slices)}")
        if not 0 <= i < self.scheme.num_slices:
            raise ValueError(f"slice index {i} out of range")
        ctx = torch.cat([hyper_features, *decoded_slices], dim=1) if decoded_slices else hyper_features
        return self.predictors[i](ctx)


def gaussian_likelihood(v: torch.Tensor, params: EntropyParams) -> torch.Tensor:
    return gaussian_interval_mass(v, params.mu, params.sigma)


def bits_from_likelihood(p: torch.Tensor) -> torch.Tensor:
    return -torch.log2(p.clamp_min(LIKELIHOOD_FLOOR)).sum()


def estimate_rate(y_slices: list[torch.Tensor], params: list[EntropyParams], z: torch.Tensor,
                  prior: FactorizedPrior) -> torch.Tensor:
    """Total bits: -sum log2 P(y | z) - sum log2 P(z).

    ``y_slices`` are noisy (training) or mean-centred rounded (inference) values.
    """
    bits = bits_from_likelihood(prior.likelihood(z))
    for v, p in zip(y_slices, params):
        bits = bits + bits_from_likelihood(gaussian_likelihood(v, p))
    return bits
