"""The full compression network and its checkpoint format."""

from __future__ import annotations

import zlib
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn

from .entropy import ChannelConditionalModel, EntropyParams, FactorizedPrior, estimate_rate
from .quantization import add_uniform_noise, quantize_round
from .transforms import (
    PRESETS,
    AnalysisTransform,
    HyperAnalysis,
    HyperSynthesis,
    ModelConfig,
    SynthesisTransform,
)

CHECKPOINT_FORMAT = "snic-checkpoint"
CHECKPOINT_VERSION = 1


class CheckpointError(ValueError):
    """Checkpoint is unreadable or does not match the expected layer plan."""


class SolarCompressor(nn.Module):
    def __init__(self, cfg: ModelConfig | None = None):
        super().__init__()
        self.cfg = cfg or ModelConfig()
        c = self.cfg
        self.g_a = AnalysisTransform(c)
        self.g_s = SynthesisTransform(c)
        self.h_a = HyperAnalysis(c)
        self.h_s = HyperSynthesis(c)
        self.prior = FactorizedPrior(c.Cz)
        self.entropy = ChannelConditionalModel(c.M, c.M, c.num_slices, c.predictor_width)

    @property
    def scheme(self):
        return self.entropy.scheme

    def forward(self, x: torch.Tensor, generator: torch.Generator | None = None) -> dict:
        """Noise-relaxed pass in training mode, hard-quantized pass in eval mode.

        ``x`` is (B, 1, H, W) in [0, 255] with H, W multiples of 16.
        """
        noisy = self.training
        y = self.g_a(x)
        z = self.h_a(y)
        z_t = add_uniform_noise(z, generator) if noisy else quantize_round(z)
        hyper = self.h_s(z_t, y.shape[-2:])
        decoded: list[torch.Tensor] = []
        params: list[EntropyParams] = []
        for i, y_i in enumerate(self.scheme.split(y)):
            p = self.entropy.predict_slice_params(hyper, decoded, i)
            v = add_uniform_noise(y_i, generator) if noisy else quantize_round(y_i, p.mu)
            decoded.append(v)
            params.append(p)
        y_t = torch.cat(decoded, dim=1)
        bits = estimate_rate(decoded, params, z_t, self.prior)
        return {"x_hat": self.g_s(y_t), "y": y, "y_tilde": y_t, "z_tilde": z_t,
                "bits": bits, "params": params}


def layer_manifest(model: nn.Module) -> dict[str, list[int]]:
    return {k: list(v.shape) for k, v in model.state_dict().items()}


def model_fingerprint(model: nn.Module) -> int:
    """One-byte id derived from every parameter's bytes (CRC32, low byte)."""
    crc = 0
    for k, v in model.state_dict().items():
        crc = zlib.crc32(k.encode(), crc)
        crc = zlib.crc32(np.ascontiguousarray(v.detach().cpu().numpy()).tobytes(), crc)
    return crc & 0xFF


def build_model(preset: str | ModelConfig = "paper", seed: int | None = 0) -> SolarCompressor:
    cfg = PRESETS[preset] if isinstance(preset, str) else preset
    if seed is not None:
        torch.manual_seed(seed)
    return SolarCompressor(cfg)


def save_checkpoint(path: str | Path, model: SolarCompressor, **meta) -> Path:
    """Write parameters keyed by layer name plus a manifest; ``meta`` holds plain values."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "config": model.cfg.to_dict(),
        "manifest": layer_manifest(model),
        "model_id": model_fingerprint(model),
        "state_dict": {k: v.detach().cpu().clone() for k, v in model.state_dict().items()},
        "meta": meta,
    }
    tmp = path.with_suffix(path.suffix + ".tmp")
    torch.save(payload, tmp)
    tmp.replace(path)
    return path


def load_checkpoint(path: str | Path) -> tuple[SolarCompressor, dict]:
    """Rebuild the model from a checkpoint; returns (model in eval mode, meta)."""
    try:
        payload = torch.load(Path(path), map_location="cpu", weights_only=True)
    except Exception as exc:  # torch raises a zoo of types for corrupt archives
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    if not isinstance(payload, dict) or payload.get("format") != CHECKPOINT_FORMAT:
        raise CheckpointError(f"{path} is not a {CHECKPOINT_FORMAT} file")
    if payload.get("version") != CHECKPOINT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {payload.get('version')}")
    cfg = ModelConfig.from_dict(payload["config"])
    model = SolarCompressor(cfg)
    if layer_manifest(model) != payload["manifest"]:
        raise CheckpointError("checkpoint layer plan does not match the model built from its config")
    model.load_state_dict(payload["state_dict"])
    if model_fingerprint(model) != payload["model_id"]:
        raise CheckpointError("checkpoint parameters do not match the recorded model id")
    model.eval()
    meta = dict(payload.get("meta", {}))
    meta["model_id"] = payload["model_id"]
    return model, meta
