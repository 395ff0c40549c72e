"""Window-based attention blocks: non-local (WNLAM), CBAM-style (WCBAM), residual attention."""

from __future__ import annotations

import torch
import torch.nn as nn
import torch.nn.functional as F

from .layers import ResidualBlock, conv1x1

DEFAULT_WINDOW = 8
DEFAULT_REDUCTION = 16


def pad_to_window(x: torch.Tensor, window: int) -> torch.Tensor:
    """Replicate-pad the bottom/right of a (B, C, H, W) map to window multiples."""
    if window < 1:
        raise ValueError("window must be >= 1")
    ph = -x.shape[-2] % window
    pw = -x.shape[-1] % window
    if ph or pw:
        x = F.pad(x, (0, pw, 0, ph), mode="replicate")
    return x


def window_partition(x: torch.Tensor, window: int) -> torch.Tensor:
    """(B, C, H, W) with H, W multiples of ``window`` -> (B * nWindows, C, window**2)."""
    b, c, h, w = x.shape
    x = x.reshape(b, c, h // window, window, w // window, window)
    x = x.permute(0, 2, 4, 1, 3, 5)
    return x.reshape(-1, c, window * window)


def window_merge(x: torch.Tensor, window: int, b: int, h: int, w: int) -> torch.Tensor:
    """Inverse of :func:`window_partition`."""
    c = x.shape[1]
    x = x.reshape(b, h // window, w // window, c, window, window)
    x = x.permute(0, 3, 1, 4, 2, 5)
    return x.reshape(b, c, h, w)


def wnlam_weights(theta: torch.Tensor, phi: torch.Tensor, window: int) -> torch.Tensor:
    """Softmax attention weights per window, shape (B * nWindows, L, L), L = window**2."""
    t = window_partition(theta, window)
    f = window_partition(phi, window)
    scores = t.transpose(1, 2) @ f
    return torch.softmax(scores, dim=-1)


def wnlam(p: torch.Tensor, w_theta: torch.Tensor, w_phi: torch.Tensor, w_g: torch.Tensor,
          w_r: torch.Tensor, window: int = DEFAULT_WINDOW, b_r: torch.Tensor | None = None) -> torch.Tensor:
    """Functional window non-local attention with 1x1 projection matrices.

    ``w_theta``, ``w_phi``, ``w_g`` are (Ci, C); ``w_r`` is (C, Ci).
    """
    b, c, h, w = p.shape
    pp = pad_to_window(p, window)
    hp, wp = pp.shape[-2:]

    def proj(m, x):
        return torch.einsum("oc,bchw->bohw", m, x)

    weights = wnlam_weights(proj(w_theta, pp), proj(w_phi, pp), window)
    g = window_partition(proj(w_g, pp), window)
    q = g @ weights.transpose(1, 2)
    q = window_merge(q, window, b, hp, wp)[..., :h, :w]
    r = proj(w_r, q)
    if b_r is not None:
        r = r + b_r.reshape(1, -1, 1, 1)
    return r + p


class WNLAM(nn.Module):
    def __init__(self, channels: int, window: int = DEFAULT_WINDOW, inner: int | None = None):
        super().__init__()
        inner = inner or max(channels // 2, 1)
        self.window = window
        self.theta = nn.Parameter(torch.empty(inner, channels))
        self.phi = nn.Parameter(torch.empty(inner, channels))
        self.g = nn.Parameter(torch.empty(inner, channels))
        self.w_r = nn.Parameter(torch.empty(channels, inner))
        self.b_r = nn.Parameter(torch.zeros(channels))
        for m in (self.theta, self.phi, self.g, self.w_r):
            nn.init.kaiming_uniform_(m, a=5 ** 0.5)

    def forward(self, p: torch.Tensor) -> torch.Tensor:
        return wnlam(p, self.theta, self.phi, self.g, self.w_r, self.window, self.b_r)


class WCBAM(nn.Module):
    """Channel attention per window followed by per-position spatial attention."""

    def __init__(self, channels: int, window: int = DEFAULT_WINDOW,
                 reduction: int = DEFAULT_REDUCTION, sa_kernel: int = 7):
        super().__init__()
        hidden = max(channels // reduction, 1)
        self.window = window
        self.fc = nn.Sequential(conv1x1(channels, hidden), nn.ReLU(), conv1x1(hidden, channels))
        self.sa = nn.Conv2d(2, 1, sa_kernel, padding=sa_kernel // 2)

    def channel_gate(self, x: torch.Tensor) -> torch.Tensor:
        h, w = x.shape[-2:]
        xp = pad_to_window(x, self.window)
        avg = F.avg_pool2d(xp, self.window)
        mx = F.max_pool2d(xp, self.window)
        ca = torch.sigmoid(self.fc(avg) + self.fc(mx))
        ca = ca.repeat_interleave(self.window, dim=-2).repeat_interleave(self.window, dim=-1)
        return ca[..., :h, :w]

    def spatial_gate(self, x: torch.Tensor) -> torch.Tensor:
        pooled = torch.cat([x.mean(dim=1, keepdim=True), x.amax(dim=1, keepdim=True)], dim=1)
        return torch.sigmoid(self.sa(pooled))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        x_ca = self.channel_gate(x) * x
        return self.spatial_gate(x_ca) * x_ca


class ResidualAttentionBlock(nn.Module):
    """X + T(X) * sigmoid(M(X)); the mask branch carries the window attention."""

    def __init__(self, channels: int, window: int = DEFAULT_WINDOW,
                 reduction: int = DEFAULT_REDUCTION, use_wcbam: bool = True, depth: int = 2):
        super().__init__()
        self.trunk = nn.Sequential(*[ResidualBlock(channels) for _ in range(depth)])
        mask = [ResidualBlock(channels) for _ in range(depth)]
        mask.append(WNLAM(channels, window))
        if use_wcbam:
            mask.append(WCBAM(channels, window, reduction))
        mask.append(conv1x1(channels, channels))
        self.mask = nn.Sequential(*mask)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        t = self.trunk(x)
        m = self.mask(x)
        if t.shape != m.shape:
            raise ValueError(f"trunk {tuple(t.shape)} and mask {tuple(m.shape)} shapes differ")
        return x + t * torch.sigmoid(m)
