"""The ``.snic`` container and the image compress/decompress pipeline.

Layout (all integers little-endian)::

    magic "SNIC" | version u8 | model_id u8 | lambda_index u8 |
    orig_w u32 | orig_h u32 | z_payload_len u32 | 10 x slice_payload_len u32 |
    crc32(payloads) u32 | z payload | slice payloads 0..9

Each payload is an independent rANS stream.
"""

from __future__ import annotations

import math
import struct
import zlib
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np
import torch

from .data import PAD_MULTIPLE, ImageTensor, pad_to_multiple, round_half_away
from .entropy import EntropyParams, estimate_rate
from .model import SolarCompressor, model_fingerprint
from .quantization import SIGMA_MIN, quantize_round
from .rans import TableSet, build_cdf_table, rans_decode, rans_encode, table_from_pmf
from .transforms import TILE_PX, analysis_transform, synthesis_transform

MAGIC = b"SNIC"
VERSION = 1
NUM_SLICES = 10
HEADER = struct.Struct("<4sBBBIII10II")
HEADER_BYTES = HEADER.size
MAX_DIM = 1 << 16
SCALE_MAX = 256.0
SCALE_LEVELS = 128
Z_SYMBOL_RANGE = (-255, 255)


class BitstreamError(ValueError):
    """Base class for container problems."""


class FormatError(BitstreamError):
    """Bad magic, unsupported version or impossible header values."""


class IntegrityError(BitstreamError):
    """Payload lengths or CRC do not match the header."""


class ModelMismatchError(BitstreamError):
    """The container was produced by a different checkpoint."""


@dataclass
class Bitstream:
    model_id: int
    lambda_index: int
    orig_w: int
    orig_h: int
    z_payload: bytes
    slice_payloads: list[bytes] = field(default_factory=list)
    version: int = VERSION

    def __post_init__(self):
        if len(self.slice_payloads) != NUM_SLICES:
            raise FormatError(f"expected {NUM_SLICES} slice payloads, got {len(self.slice_payloads)}")
        if not (0 < self.orig_w <= MAX_DIM and 0 < self.orig_h <= MAX_DIM):
            raise FormatError(f"image dimensions {self.orig_w}x{self.orig_h} out of range")

    @property
    def payload(self) -> bytes:
        return self.z_payload + b"".join(self.slice_payloads)

    def to_bytes(self) -> bytes:
        body = self.payload
        head = HEADER.pack(MAGIC, self.version, self.model_id, self.lambda_index, self.orig_w,
                           self.orig_h, len(self.z_payload), *(len(p) for p in self.slice_payloads),
                           zlib.crc32(body))
        return head + body

    def __len__(self) -> int:
        return HEADER_BYTES + len(self.payload)

    @property
    def bpp(self) -> float:
        return 8.0 * len(self) / (self.orig_w * self.orig_h)

    @classmethod
    def from_bytes(cls, data: bytes) -> "Bitstream":
        if len(data) < HEADER_BYTES:
            raise FormatError("container shorter than its header")
        magic, version, model_id, lam, w, h, zlen, *rest = HEADER.unpack_from(data)
        slice_lens, crc = rest[:NUM_SLICES], rest[NUM_SLICES]
        if magic != MAGIC:
            raise FormatError("not a SNIC container (bad magic)")
        if version != VERSION:
            raise FormatError(f"unsupported container version {version}")
        body = data[HEADER_BYTES:]
        if zlen + sum(slice_lens) != len(body):
            raise IntegrityError("declared payload lengths do not match the container size")
        if zlib.crc32(body) != crc:
            raise IntegrityError("payload CRC mismatch")
        parts, pos = [], zlen
        for n in slice_lens:
            parts.append(bytes(body[pos:pos + n]))
            pos += n
        return cls(model_id, lam, w, h, bytes(body[:zlen]), parts, version)


def bits_per_pixel(nbytes: int, orig_w: int, orig_h: int) -> float:
    return 8.0 * nbytes / (orig_w * orig_h)


@lru_cache(maxsize=None)
def scale_table() -> np.ndarray:
    return np.exp(np.linspace(math.log(SIGMA_MIN), math.log(SCALE_MAX), SCALE_LEVELS))


@lru_cache(maxsize=None)
def gaussian_tables() -> TableSet:
    return TableSet.from_tables([build_cdf_table(0.0, s) for s in scale_table()])


def scale_indexes(sigma: torch.Tensor) -> np.ndarray:
    """Smallest tabulated scale >= sigma (float32 comparison on both sides)."""
    scales = torch.from_numpy(scale_table().astype(np.float32))
    idx = torch.searchsorted(scales, sigma.detach().float().contiguous().reshape(-1))
    return idx.clamp_max(SCALE_LEVELS - 1).numpy().astype(np.int32)


def hyper_tables(model: SolarCompressor) -> TableSet:
    pmf = model.prior.channel_pmf_table(*Z_SYMBOL_RANGE)
    return TableSet.from_tables([table_from_pmf(p, Z_SYMBOL_RANGE[0]) for p in pmf])


def _channel_indexes(shape) -> np.ndarray:
    _, c, h, w = shape
    return np.repeat(np.arange(c, dtype=np.int32), h * w)


def _image_tensor(x: ImageTensor) -> tuple[ImageTensor, torch.Tensor]:
    if x.height % PAD_MULTIPLE or x.width % PAD_MULTIPLE:
        x = pad_to_multiple(x, PAD_MULTIPLE)
    return x, torch.from_numpy(np.ascontiguousarray(x.plane, dtype=np.float32))[None, None]


@dataclass
class LatentState:
    y: torch.Tensor
    z_hat: torch.Tensor
    y_hat: torch.Tensor
    residuals: list[torch.Tensor]
    params: list[EntropyParams]


@torch.no_grad()
def encode_latents(model: SolarCompressor, xt: torch.Tensor, tile: int | None = TILE_PX) -> LatentState:
    """Analysis, hyper analysis, rounding and slice-by-slice parameter prediction."""
    y = analysis_transform(xt, model.g_a, tile)
    z_hat = quantize_round(model.h_a(y))
    hyper = model.h_s(z_hat, y.shape[-2:])
    decoded, residuals, params = [], [], []
    for i, y_i in enumerate(model.scheme.split(y)):
        p = model.entropy.predict_slice_params(hyper, decoded, i)
        r = quantize_round(y_i - p.mu)
        decoded.append(r + p.mu)
        residuals.append(r)
        params.append(p)
    return LatentState(y, z_hat, torch.cat(decoded, dim=1), residuals, params)


def _reconstruct(model: SolarCompressor, y_hat: torch.Tensor, tile: int | None) -> np.ndarray:
    x_hat = synthesis_transform(y_hat, model.g_s, tile)[0, 0].numpy().astype(np.float64)
    return np.clip(round_half_away(x_hat), 0, 255).astype(np.float32)


def compress_image(x: ImageTensor, model: SolarCompressor, lambda_index: int = 0,
                   tile: int | None = TILE_PX) -> Bitstream:
    model.eval()
    x, xt = _image_tensor(x)
    st = encode_latents(model, xt, tile)
    z_sym = st.z_hat.reshape(-1).to(torch.int64).numpy()
    z_payload = rans_encode(z_sym, hyper_tables(model), _channel_indexes(st.z_hat.shape))
    gt = gaussian_tables()
    payloads = [rans_encode(r.reshape(-1).to(torch.int64).numpy(), gt, scale_indexes(p.sigma))
                for r, p in zip(st.residuals, st.params)]
    return Bitstream(model_fingerprint(model), lambda_index, x.orig_width, x.orig_height,
                     z_payload, payloads)


@torch.no_grad()
def decompress_image(b: Bitstream | bytes, model: SolarCompressor, tile: int | None = TILE_PX,
                     crop: bool = True) -> ImageTensor:
    """Decode a container; the result holds integer levels in [0, 255]."""
    model.eval()
    if not isinstance(b, Bitstream):
        b = Bitstream.from_bytes(b)
    if b.model_id != model_fingerprint(model):
        raise ModelMismatchError(f"container model id {b.model_id} != checkpoint id {model_fingerprint(model)}")
    ph = -(-b.orig_h // PAD_MULTIPLE) * PAD_MULTIPLE
    pw = -(-b.orig_w // PAD_MULTIPLE) * PAD_MULTIPLE
    h, w = ph // 16, pw // 16
    cz = model.cfg.Cz
    z_shape = (1, cz, h // 4, w // 4)
    z_idx = _channel_indexes(z_shape)
    z = rans_decode(b.z_payload, hyper_tables(model), indexes=z_idx)
    z_hat = torch.from_numpy(z.astype(np.float32)).reshape(z_shape)
    hyper = model.h_s(z_hat, (h, w))
    gt = gaussian_tables()
    decoded = []
    for i, payload in enumerate(b.slice_payloads):
        p = model.entropy.predict_slice_params(hyper, decoded, i)
        r = rans_decode(payload, gt, indexes=scale_indexes(p.sigma))
        decoded.append(torch.from_numpy(r.astype(np.float32)).reshape(p.mu.shape) + p.mu)
    recon = ImageTensor(_reconstruct(model, torch.cat(decoded, dim=1), tile), b.orig_h, b.orig_w)
    return recon.cropped() if crop else recon


def simulate_reconstruction(x: ImageTensor, model: SolarCompressor, tile: int | None = TILE_PX) -> ImageTensor:
    """Decoder output computed directly from the rounded latents, without entropy coding."""
    model.eval()
    x, xt = _image_tensor(x)
    st = encode_latents(model, xt, tile)
    with torch.no_grad():
        recon = _reconstruct(model, st.y_hat, tile)
    return ImageTensor(recon, x.orig_height, x.orig_width).cropped()


def estimated_bits(x: ImageTensor, model: SolarCompressor, tile: int | None = TILE_PX) -> float:
    """Model rate estimate (bits) of the hard-quantized latents of ``x``."""
    model.eval()
    _, xt = _image_tensor(x)
    st = encode_latents(model, xt, tile)
    with torch.no_grad():
        bits = estimate_rate(st.residuals, [EntropyParams(torch.zeros_like(p.mu), p.sigma) for p in st.params],
                             st.z_hat, model.prior)
    return float(bits)
