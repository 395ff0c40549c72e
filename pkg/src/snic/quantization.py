"""Rounding, uniform-noise relaxation and the discretized Gaussian pmf."""

from __future__ import annotations

import math
import warnings

import numpy as np
import torch
from scipy.special import ndtr

SIGMA_MIN = 0.11
_SQRT1_2 = 1.0 / math.sqrt(2.0)


def round_half_away_t(x: torch.Tensor) -> torch.Tensor:
    return torch.sign(x) * torch.floor(x.abs() + 0.5)


def quantize_round(y, mu=None):
    """round(y - mu) + mu with ties away from zero; works on tensors and arrays."""
    if isinstance(y, torch.Tensor):
        if not torch.isfinite(y).all():
            raise ValueError("non-finite values cannot be quantized")
        if mu is None:
            return round_half_away_t(y)
        return round_half_away_t(y - mu) + mu
    y = np.asarray(y, dtype=np.float64)
    if not np.all(np.isfinite(y)):
        raise ValueError("non-finite values cannot be quantized")
    if mu is None:
        mu = 0.0
    r = y - mu
    return np.sign(r) * np.floor(np.abs(r) + 0.5) + mu


def add_uniform_noise(y, seed=None):
    """y + U(-1/2, 1/2) noise.

    For tensors ``seed`` may be a ``torch.Generator``; otherwise it seeds numpy.
    """
    if isinstance(y, torch.Tensor):
        gen = seed
        if gen is not None and not isinstance(gen, torch.Generator):
            gen = torch.Generator().manual_seed(int(seed))
        noise = torch.rand(y.shape, generator=gen, dtype=y.dtype, device=y.device) - 0.5
        return y + noise
    rng = np.random.default_rng(seed)
    y = np.asarray(y, dtype=np.float64)
    # rng.random is in [0, 1); reject the single endpoint so |noise| < 1/2 strictly
    u = rng.random(y.shape)
    while np.any(u == 0.0):
        u[u == 0.0] = rng.random(int(np.sum(u == 0.0)))
    return y + (u - 0.5)


def _std_cdf_t(x: torch.Tensor) -> torch.Tensor:
    return 0.5 * torch.erfc(-x * _SQRT1_2)


def gaussian_interval_mass(v, mu, sigma):
    """P(v - 1/2 < Y < v + 1/2) for Y ~ N(mu, sigma^2); tail-stable, differentiable for tensors.

    No flooring is applied; callers own the sigma floor.
    """
    if isinstance(v, torch.Tensor) or isinstance(mu, torch.Tensor) or isinstance(sigma, torch.Tensor):
        d = (torch.as_tensor(v) - mu).abs()
        upper = _std_cdf_t((0.5 - d) / sigma)
        lower = _std_cdf_t((-0.5 - d) / sigma)
        return upper - lower
    d = np.abs(np.asarray(v, dtype=np.float64) - mu)
    sigma = np.asarray(sigma, dtype=np.float64)
    return ndtr((0.5 - d) / sigma) - ndtr((-0.5 - d) / sigma)


def discretized_gaussian_pmf(n, mu=0.0, sigma=1.0, sigma_min: float = SIGMA_MIN):
    """Gaussian convolved with a unit box, evaluated at ``n``.

    Scales below ``sigma_min`` are raised to it with a warning.
    """
    if isinstance(sigma, torch.Tensor):
        if torch.any(sigma < sigma_min):
            warnings.warn(f"sigma below floor {sigma_min}; clamped", RuntimeWarning, stacklevel=2)
            sigma = sigma.clamp_min(sigma_min)
        return gaussian_interval_mass(n, mu, sigma)
    sigma = np.asarray(sigma, dtype=np.float64)
    if np.any(sigma < sigma_min):
        warnings.warn(f"sigma below floor {sigma_min}; clamped", RuntimeWarning, stacklevel=2)
        sigma = np.maximum(sigma, sigma_min)
    out = gaussian_interval_mass(n, mu, sigma)
    return out.item() if np.ndim(out) == 0 else out
