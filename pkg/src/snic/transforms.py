"""Analysis/synthesis transforms, hyperprior transforms and tiled inference."""

from __future__ import annotations

from dataclasses import asdict, dataclass, fields

import torch
import torch.nn as nn

from .attention import ResidualAttentionBlock
from .layers import GDN, conv, deconv

PIXEL_SCALE = 255.0
DOWNSAMPLE = 16
HYPER_DOWNSAMPLE = 4


@dataclass(frozen=True)
class ModelConfig:
    N: int = 192
    M: int = 320
    Cz: int = 192
    num_slices: int = 10
    window: int = 8
    reduction: int = 16
    predictor_width: int = 128
    attention_depth: int = 2
    use_wcbam: bool = True

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        names = {f.name for f in fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ValueError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)


PRESETS = {
    "paper": ModelConfig(),
    "desk": ModelConfig(N=48, M=80, Cz=48, predictor_width=48, reduction=8),
    "tiny": ModelConfig(N=16, M=20, Cz=16, predictor_width=16, reduction=4),
}


class AnalysisTransform(nn.Module):
    """Four stride-2 stages with GDN; residual attention after stages 2 and 4."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        n, m = cfg.N, cfg.M
        att = dict(window=cfg.window, reduction=cfg.reduction, use_wcbam=cfg.use_wcbam,
                   depth=cfg.attention_depth)
        self.net = nn.Sequential(
            conv(1, n), GDN(n),
            conv(n, n), GDN(n),
            ResidualAttentionBlock(n, **att),
            conv(n, n), GDN(n),
            conv(n, m),
            ResidualAttentionBlock(m, **att),
        )

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.net(x / PIXEL_SCALE)


class SynthesisTransform(nn.Module):
    """Mirror of the analysis transform with transposed convolutions and IGDN."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        n, m = cfg.N, cfg.M
        self.latent_channels = m
        att = dict(window=cfg.window, reduction=cfg.reduction, use_wcbam=cfg.use_wcbam,
                   depth=cfg.attention_depth)
        self.net = nn.Sequential(
            ResidualAttentionBlock(m, **att),
            deconv(m, n), GDN(n, inverse=True),
            deconv(n, n), GDN(n, inverse=True),
            ResidualAttentionBlock(n, **att),
            deconv(n, n), GDN(n, inverse=True),
            deconv(n, 1),
        )

    def forward(self, y: torch.Tensor) -> torch.Tensor:
        x = self.net(y) * PIXEL_SCALE
        # clamping only at inference keeps gradients alive for out-of-range outputs during training
        return x if self.training else x.clamp(0.0, PIXEL_SCALE)


class HyperAnalysis(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.net = nn.Sequential(
            conv(cfg.M, cfg.Cz, 3, 1), nn.ReLU(),
            conv(cfg.Cz, cfg.Cz, 5, 2), nn.ReLU(),
            conv(cfg.Cz, cfg.Cz, 5, 2),
        )

    def forward(self, y: torch.Tensor) -> torch.Tensor:
        return self.net(y)


class HyperSynthesis(nn.Module):
    """Upsamples the hyper latent 4x and emits M feature channels for the slice predictors."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.net = nn.Sequential(
            deconv(cfg.Cz, cfg.Cz, 5, 2), nn.ReLU(),
            deconv(cfg.Cz, cfg.Cz, 5, 2), nn.ReLU(),
            conv(cfg.Cz, cfg.M, 3, 1),
        )

    def forward(self, z_hat: torch.Tensor, latent_hw: tuple[int, int] | None = None) -> torch.Tensor:
        out = self.net(z_hat)
        if latent_hw is not None:
            out = out[..., : latent_hw[0], : latent_hw[1]]
        return out


def _check_channels(x: torch.Tensor, expected: int, what: str) -> None:
    if x.dim() != 4 or x.shape[1] != expected:
        raise ValueError(f"{what} expects (B, {expected}, H, W) input, got {tuple(x.shape)}")


def analysis_transform(x: torch.Tensor, g_a: AnalysisTransform, tile: int | None = None) -> torch.Tensor:
    """Image (B, 1, H, W) in [0, 255] -> latent (B, M, H/16, W/16)."""
    _check_channels(x, 1, "analysis transform")
    if x.shape[-2] % DOWNSAMPLE or x.shape[-1] % DOWNSAMPLE:
        raise ValueError(f"image dims {tuple(x.shape[-2:])} are not multiples of {DOWNSAMPLE}")
    if tile and max(x.shape[-2:]) > tile:
        return tiled_apply(g_a, x, 1 / DOWNSAMPLE, tile, TILE_HALO_PX)
    return g_a(x)


def synthesis_transform(y_hat: torch.Tensor, g_s: SynthesisTransform, tile: int | None = None) -> torch.Tensor:
    """Latent (B, M, h, w) -> image (B, 1, 16h, 16w)."""
    _check_channels(y_hat, g_s.latent_channels, "synthesis transform")
    if tile and max(y_hat.shape[-2:]) * DOWNSAMPLE > tile:
        return tiled_apply(g_s, y_hat, DOWNSAMPLE, tile // DOWNSAMPLE, TILE_HALO_PX // DOWNSAMPLE)
    return g_s(y_hat)


# Tiles keep peak memory bounded for very large inputs (e.g. 4096 x 4096).
# Tile origins and halos are multiples of 128 px so latent attention windows
# stay aligned with the untiled grid.
TILE_PX = 1024
TILE_HALO_PX = 128


def tiled_apply(fn, x: torch.Tensor, factor: float, tile: int, halo: int) -> torch.Tensor:
    """Apply a translation-equivariant ``fn`` tile by tile with overlapping halos.

    ``factor`` is output size / input size along each spatial axis.
    """
    _, _, h, w = x.shape
    out = None
    for r0 in range(0, h, tile):
        for c0 in range(0, w, tile):
            r1, c1 = min(r0 + tile, h), min(c0 + tile, w)
            ra, ca = max(r0 - halo, 0), max(c0 - halo, 0)
            rb, cb = min(r1 + halo, h), min(c1 + halo, w)
            res = fn(x[..., ra:rb, ca:cb])
            if out is None:
                out = res.new_empty(x.shape[0], res.shape[1], round(h * factor), round(w * factor))
            s = lambda v: round(v * factor)  # noqa: E731
            out[..., s(r0):s(r1), s(c0):s(c1)] = res[..., s(r0 - ra):s(r1 - ra), s(c0 - ca):s(c1 - ca)]
    return out
