"""Rate-distortion, perceptual and adversarial training objectives."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import torch
import torch.nn as nn
import torch.nn.functional as F

from .transforms import DOWNSAMPLE, PIXEL_SCALE

PROB_EPS = 1e-6


@dataclass(frozen=True)
class LossWeights:
    lam: float = 0.0125
    recon: float = 1.0
    perc: float = 1.0
    adv: float = 0.01

    def __post_init__(self):
        for name in ("lam", "recon", "perc", "adv"):
            if getattr(self, name) < 0:
                raise ValueError(f"loss weight {name} must be nonnegative")


def rd_loss(rate, distortion, lam: float):
    return rate + lam * distortion


def mse(x: torch.Tensor, x_hat: torch.Tensor) -> torch.Tensor:
    return F.mse_loss(x_hat, x)


def _clamped_log(p: torch.Tensor) -> torch.Tensor:
    return torch.log(p.clamp(PROB_EPS, 1.0 - PROB_EPS))


# -- perceptual distance ----------------------------------------------------

class RandomPyramid(nn.Module):
    """Fixed-seed random conv pyramid; a stand-in feature extractor needing no downloads."""

    def __init__(self, widths: tuple[int, ...] = (16, 32, 64), seed: int = 0):
        super().__init__()
        gen = torch.Generator().manual_seed(seed)
        layers, c_in = [], 1
        for i, c in enumerate(widths):
            conv = nn.Conv2d(c_in, c, 3, stride=1 if i == 0 else 2, padding=1)
            with torch.no_grad():
                bound = (6.0 / (9 * c_in)) ** 0.5
                conv.weight.copy_(torch.rand(conv.weight.shape, generator=gen) * 2 * bound - bound)
                conv.bias.zero_()
            layers.append(conv)
            c_in = c
        self.stages = nn.ModuleList(layers)
        self.layer_weights = [1.0 / len(widths)] * len(widths)
        self.requires_grad_(False)

    def forward(self, x: torch.Tensor) -> list[torch.Tensor]:
        feats = []
        for conv in self.stages:
            x = F.leaky_relu(conv(x), 0.2)
            feats.append(x)
        return feats


_BACKBONES: dict[str, Callable[[], nn.Module]] = {"random": RandomPyramid}
_EXTRACTORS: dict[tuple[str, torch.dtype], nn.Module] = {}


def register_backbone(name: str, factory: Callable[[], nn.Module]) -> None:
    """``factory()`` must return a module mapping (B, 1, H, W) in [-1, 1] to a feature list
    and exposing ``layer_weights``."""
    _BACKBONES[name] = factory
    for key in [k for k in _EXTRACTORS if k[0] == name]:
        del _EXTRACTORS[key]


def get_extractor(name: str = "random", dtype: torch.dtype = torch.float32) -> nn.Module:
    if name not in _BACKBONES:
        raise KeyError(f"unregistered perceptual backbone {name!r}; known: {sorted(_BACKBONES)}")
    key = (name, dtype)
    if key not in _EXTRACTORS:
        _EXTRACTORS[key] = _BACKBONES[name]().to(dtype).eval()
    return _EXTRACTORS[key]


def _unit_normalize(f: torch.Tensor, eps: float = 1e-10) -> torch.Tensor:
    return f / torch.sqrt((f * f).sum(dim=1, keepdim=True) + eps)


def lpips_distance(x: torch.Tensor, x_hat: torch.Tensor, extractor: str | nn.Module = "random") -> torch.Tensor:
    """Weighted sum over layers of spatially averaged squared differences of unit-normalized features.

    Inputs are (B, 1, H, W) on the [0, 255] scale; returns the batch mean.
    """
    net = get_extractor(extractor, x.dtype) if isinstance(extractor, str) else extractor
    fa = net(x / PIXEL_SCALE * 2.0 - 1.0)
    fb = net(x_hat / PIXEL_SCALE * 2.0 - 1.0)
    total = x.new_zeros(())
    for w, a, b in zip(net.layer_weights, fa, fb):
        d = (_unit_normalize(a) - _unit_normalize(b)).pow(2).sum(dim=1)
        total = total + w * d.mean()
    return total


def _alexnet_backbone() -> nn.Module:  # pragma: no cover - needs pretrained weights
    from torchvision.models import AlexNet_Weights, alexnet

    feats = alexnet(weights=AlexNet_Weights.DEFAULT).features.eval()
    return _TorchvisionTaps(feats, taps=(1, 4, 7, 9, 11))


def _vgg_backbone() -> nn.Module:  # pragma: no cover - needs pretrained weights
    from torchvision.models import VGG16_Weights, vgg16

    feats = vgg16(weights=VGG16_Weights.DEFAULT).features.eval()
    return _TorchvisionTaps(feats, taps=(3, 8, 15, 22, 29))


class _TorchvisionTaps(nn.Module):  # pragma: no cover - needs pretrained weights
    def __init__(self, features: nn.Sequential, taps: tuple[int, ...]):
        super().__init__()
        self.features = features
        self.taps = set(taps)
        self.layer_weights = [1.0 / len(taps)] * len(taps)
        self.requires_grad_(False)

    def forward(self, x):
        x = x.repeat(1, 3, 1, 1)
        out = []
        for i, layer in enumerate(self.features):
            x = layer(x)
            if i in self.taps:
                out.append(x)
        return out


register_backbone("alexnet", _alexnet_backbone)
register_backbone("vgg16", _vgg_backbone)


# -- adversarial terms ------------------------------------------------------

class ConditionalDiscriminator(nn.Module):
    """Four strided convolutions over [image, latent upsampled 16x]; outputs a probability map."""

    def __init__(self, latent_channels: int, width: int = 64):
        super().__init__()
        self.latent_channels = latent_channels
        w = width
        self.net = nn.Sequential(
            nn.Conv2d(1 + latent_channels, w, 4, 2, 1), nn.LeakyReLU(0.2),
            nn.Conv2d(w, 2 * w, 4, 2, 1), nn.LeakyReLU(0.2),
            nn.Conv2d(2 * w, 4 * w, 4, 2, 1), nn.LeakyReLU(0.2),
            nn.Conv2d(4 * w, 1, 3, 1, 1),
        )

    def forward(self, x: torch.Tensor, y: torch.Tensor) -> torch.Tensor:
        cond = F.interpolate(y, scale_factor=DOWNSAMPLE, mode="nearest")[..., : x.shape[-2], : x.shape[-1]]
        return torch.sigmoid(self.net(torch.cat([x / PIXEL_SCALE * 2.0 - 1.0, cond], dim=1)))


def generator_distortion(x: torch.Tensor, x_hat: torch.Tensor, y: torch.Tensor | None,
                         disc: Callable | None, weights: LossWeights,
                         extractor: str | nn.Module = "random", parts: dict | None = None) -> torch.Tensor:
    """recon * MSE + perc * LPIPS - adv * log D(x_hat, y).

    The discriminator is not evaluated when the adversarial weight is zero.
    ``parts`` (if given) receives the unweighted terms.
    """
    m = mse(x, x_hat)
    total = weights.recon * m
    perc = lpips_distance(x, x_hat, extractor) if weights.perc > 0 else x.new_zeros(())
    total = total + weights.perc * perc
    adv = x.new_zeros(())
    if weights.adv > 0:
        if disc is None:
            raise ValueError("adversarial weight > 0 needs a discriminator")
        adv = -_clamped_log(disc(x_hat, y)).mean()
        total = total + weights.adv * adv
    if parts is not None:
        parts.update(mse=m.detach(), lpips=perc.detach(), adv=adv.detach())
    return total


def discriminator_loss(x: torch.Tensor, x_hat: torch.Tensor, y: torch.Tensor | None, disc: Callable) -> torch.Tensor:
    """Cross entropy with label 1 for originals and 0 for reconstructions, averaged over the batch."""
    real = -_clamped_log(disc(x, y)).mean()
    fake = -_clamped_log(1.0 - disc(x_hat, y)).mean()
    return real + fake
