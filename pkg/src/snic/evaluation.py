"""Quality metrics, RD sweeps, latency measurement and external-codec baselines."""

from __future__ import annotations

import csv
import logging
import math
import os
import platform
import shutil
import statistics
import subprocess
import tempfile
import time
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Callable, Iterable, Protocol, Sequence

import numpy as np
import torch
from scipy.signal import fftconvolve

from .bitstream import Bitstream, compress_image, decompress_image
from .data import ImageTensor, load_grayscale, save_grayscale
from .model import SolarCompressor, load_checkpoint
from .objectives import lpips_distance
from .transforms import TILE_PX

log = logging.getLogger(__name__)

PEAK = 255.0
MSSSIM_WEIGHTS = (0.0448, 0.2856, 0.3001, 0.2363, 0.1333)
SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1, SSIM_K2 = 0.01, 0.03
RD_COLUMNS = ("codec_id", "param", "bpp", "psnr", "msssim_log", "lpips", "n_images")


class MsssimScaleWarning(UserWarning):
    """Image too small for five dyadic scales; fewer were used."""


def _planes(x, x_hat) -> tuple[np.ndarray, np.ndarray]:
    a = x.plane if isinstance(x, ImageTensor) else np.asarray(x)
    b = x_hat.plane if isinstance(x_hat, ImageTensor) else np.asarray(x_hat)
    a = np.squeeze(np.asarray(a, dtype=np.float64))
    b = np.squeeze(np.asarray(b, dtype=np.float64))
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    if a.ndim != 2:
        raise ValueError("expected single-channel images")
    return a, b


def psnr(x, x_hat) -> float:
    """10 log10(255^2 / MSE); identical inputs give +inf."""
    a, b = _planes(x, x_hat)
    m = float(np.mean((a - b) ** 2))
    if m == 0.0:
        return math.inf
    return 10.0 * math.log10(PEAK * PEAK / m)


def msssim_to_log(m: float) -> float:
    """-10 log10(1 - m), with +inf at m = 1."""
    if m >= 1.0:
        return math.inf
    return -10.0 * math.log10(1.0 - m)


def _gaussian_window(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    g = np.exp(-((np.arange(size) - (size - 1) / 2.0) ** 2) / (2 * sigma * sigma))
    g /= g.sum()
    return np.outer(g, g)


def _ssim_terms(a: np.ndarray, b: np.ndarray, win: np.ndarray) -> tuple[float, float]:
    def f(v):
        return fftconvolve(v, win, mode="valid")

    c1, c2 = (SSIM_K1 * PEAK) ** 2, (SSIM_K2 * PEAK) ** 2
    mu_a, mu_b = f(a), f(b)
    s_aa = f(a * a) - mu_a * mu_a
    s_bb = f(b * b) - mu_b * mu_b
    s_ab = f(a * b) - mu_a * mu_b
    cs = (2 * s_ab + c2) / (s_aa + s_bb + c2)
    lum = (2 * mu_a * mu_b + c1) / (mu_a * mu_a + mu_b * mu_b + c1)
    return float(np.mean(lum * cs)), float(np.mean(cs))


def _downsample(v: np.ndarray) -> np.ndarray:
    """2x2 average; odd sizes are edge-padded so a side n becomes ceil(n / 2)."""
    v = np.pad(v, ((0, v.shape[0] % 2), (0, v.shape[1] % 2)), mode="edge")
    return 0.25 * (v[0::2, 0::2] + v[1::2, 0::2] + v[0::2, 1::2] + v[1::2, 1::2])


def msssim_scales(height: int, width: int) -> int:
    """Number of dyadic scales whose coarsest level still fits the 11x11 window."""
    side = min(height, width)
    n = 0
    while n < len(MSSSIM_WEIGHTS) and side >= SSIM_WINDOW:
        n += 1
        side = (side + 1) // 2
    return n


def msssim(x, x_hat) -> float:
    """Multi-scale SSIM m in [0, 1] on the 0..255 scale.

    Below 161 px the coarse scales are dropped and the remaining weights are
    renormalized (an :class:`MsssimScaleWarning` is issued).
    """
    a, b = _planes(x, x_hat)
    if np.array_equal(a, b):
        return 1.0
    levels = msssim_scales(*a.shape)
    if levels == 0:
        raise ValueError(f"image {a.shape} smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} window")
    weights = np.array(MSSSIM_WEIGHTS[:levels])
    if levels < len(MSSSIM_WEIGHTS):
        warnings.warn(f"image {a.shape} supports only {levels} MS-SSIM scales", MsssimScaleWarning, stacklevel=2)
        weights = weights / weights.sum()
    win = _gaussian_window()
    m = 1.0
    for j in range(levels):
        ssim_j, cs_j = _ssim_terms(a, b, win)
        term = ssim_j if j == levels - 1 else cs_j
        m *= max(term, 0.0) ** weights[j]
        a, b = _downsample(a), _downsample(b)
    return float(min(m, 1.0))


def msssim_log(x, x_hat) -> float:
    return msssim_to_log(msssim(x, x_hat))


@torch.no_grad()
def lpips(x, x_hat, extractor="random") -> float:
    a, b = _planes(x, x_hat)
    ta = torch.from_numpy(a.astype(np.float32))[None, None]
    tb = torch.from_numpy(b.astype(np.float32))[None, None]
    return float(lpips_distance(ta, tb, extractor))


# -- codec adapters ----------------------------------------------------------

class CodecAdapter(Protocol):
    codec_id: str
    param: float

    def encode(self, image: ImageTensor) -> bytes: ...

    def decode(self, data: bytes) -> ImageTensor: ...


class NeuralCodec:
    """Adapter around a trained model producing ``.snic`` containers."""

    def __init__(self, model: SolarCompressor, lambda_index: int = 0, lam: float = math.nan,
                 tile: int | None = TILE_PX, codec_id: str = "snic"):
        self.model = model.eval()
        self.lambda_index = lambda_index
        self.param = lam
        self.tile = tile
        self.codec_id = codec_id

    @classmethod
    def from_checkpoint(cls, path: str | Path, tile: int | None = TILE_PX) -> "NeuralCodec":
        model, meta = load_checkpoint(path)
        return cls(model, int(meta.get("lambda_index", 0)), float(meta.get("lam", math.nan)), tile)

    def encode(self, image: ImageTensor) -> bytes:
        return compress_image(image, self.model, self.lambda_index, self.tile).to_bytes()

    def decode(self, data: bytes) -> ImageTensor:
        return decompress_image(data, self.model, self.tile)


@dataclass
class RdPoint:
    codec_id: str
    param: float
    bpp: float
    psnr: float
    msssim_log: float
    lpips: float
    n_images: int = 1

    def __post_init__(self):
        if not self.bpp > 0:
            raise ValueError("bpp must be positive")


@dataclass
class ImageScore:
    bpp: float
    psnr: float
    msssim_log: float
    lpips: float


def score_image(codec: CodecAdapter, image: ImageTensor, extractor="random") -> ImageScore:
    data = codec.encode(image)
    recon = codec.decode(data)
    x = image.cropped() if isinstance(image, ImageTensor) else image
    bpp = 8.0 * len(data) / (x.height * x.width)
    if isinstance(codec, NeuralCodec) and Bitstream.from_bytes(data).bpp != bpp:
        raise RuntimeError("container bpp disagrees with the byte count")
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", MsssimScaleWarning)
        ms = msssim_log(x, recon)
    return ImageScore(bpp, psnr(x, recon), ms, lpips(x, recon, extractor))


def _mean(vals: Iterable[float]) -> float:
    vals = list(vals)
    return math.inf if any(math.isinf(v) for v in vals) else float(np.mean(vals))


def rd_point(codec: CodecAdapter, corpus: Sequence[ImageTensor], extractor="random", jobs: int = 1) -> RdPoint:
    """Average bpp and quality of one codec setting over ``corpus``."""
    if not corpus:
        raise ValueError("empty corpus")
    if jobs > 1:
        with ThreadPoolExecutor(jobs) as pool:
            scores = list(pool.map(lambda im: score_image(codec, im, extractor), corpus))
    else:
        scores = [score_image(codec, im, extractor) for im in corpus]
    return RdPoint(codec.codec_id, codec.param, _mean(s.bpp for s in scores), _mean(s.psnr for s in scores),
                   _mean(s.msssim_log for s in scores), _mean(s.lpips for s in scores), len(scores))


def rd_sweep(checkpoints: Sequence[str | Path], corpus: Sequence[ImageTensor], out_dir: str | Path | None = None,
             extractor="random", jobs: int = 1, tile: int | None = TILE_PX,
             extra_points: Sequence[RdPoint] = ()) -> list[RdPoint]:
    """One RD point per checkpoint (sorted by bpp); writes ``rd.csv`` and plots if ``out_dir`` is set."""
    if not checkpoints:
        raise ValueError("no checkpoints")
    points = [rd_point(NeuralCodec.from_checkpoint(c, tile), corpus, extractor, jobs) for c in checkpoints]
    points = sorted([*points, *extra_points], key=lambda p: p.bpp)
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        write_rd_csv(points, out / "rd.csv")
        plot_rd(points, out)
    return points


def write_rd_csv(points: Sequence[RdPoint], path: str | Path) -> Path:
    path = Path(path)
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=RD_COLUMNS)
        w.writeheader()
        for p in sorted(points, key=lambda p: p.bpp):
            w.writerow({k: _fmt(v) for k, v in asdict(p).items()})
    return path


def _fmt(v):
    if isinstance(v, float) and math.isinf(v):
        return "inf" if v > 0 else "-inf"
    return v


def read_rd_csv(path: str | Path) -> list[RdPoint]:
    with open(path, newline="") as fh:
        return [RdPoint(r["codec_id"], float(r["param"]), float(r["bpp"]), float(r["psnr"]),
                        float(r["msssim_log"]), float(r["lpips"]), int(r["n_images"]))
                for r in csv.DictReader(fh)]


def plot_rd(points: Sequence[RdPoint], out_dir: str | Path, fmt: str = "png") -> list[Path]:
    """One figure per quality metric against bpp, one line per codec."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = []
    labels = {"psnr": "PSNR [dB]", "msssim_log": "MS-SSIM [dB]", "lpips": "LPIPS"}
    for metric, label in labels.items():
        fig, ax = plt.subplots(figsize=(5, 4))
        for cid in sorted({p.codec_id for p in points}):
            pts = sorted((p for p in points if p.codec_id == cid), key=lambda p: p.bpp)
            ys = [getattr(p, metric) for p in pts]
            ax.plot([p.bpp for p in pts], [y if math.isfinite(y) else np.nan for y in ys], "o-", label=cid)
        ax.set_xlabel("bpp")
        ax.set_ylabel(label)
        ax.grid(alpha=0.3)
        ax.legend()
        fig.tight_layout()
        path = out_dir / f"rd_{metric}.{fmt}"
        fig.savefig(path)
        plt.close(fig)
        paths.append(path)
    return paths


# -- latency -----------------------------------------------------------------

@dataclass
class Latency:
    encode_ms: float
    decode_ms: float
    repeats: int
    environment: dict


def environment_info() -> dict:
    return {
        "python": platform.python_version(),
        "torch": torch.__version__,
        "machine": platform.machine(),
        "processor": platform.processor(),
        "cpu_count": os.cpu_count(),
        "torch_threads": torch.get_num_threads(),
    }


def measure_latency(codec: CodecAdapter, image: ImageTensor, repeats: int = 5,
                    clock: Callable[[], float] = time.perf_counter) -> Latency:
    """Median wall-clock encode/decode time over in-memory buffers.

    Meant to run with no concurrent load on the machine.
    """
    if repeats < 3:
        raise ValueError("repeats must be at least 3")
    enc, dec = [], []
    for _ in range(repeats):
        t0 = clock()
        data = codec.encode(image)
        t1 = clock()
        codec.decode(data)
        t2 = clock()
        enc.append((t1 - t0) * 1e3)
        dec.append((t2 - t1) * 1e3)
    return Latency(statistics.median(enc), statistics.median(dec), repeats, environment_info())


# -- external codecs -----------------------------------------------------------

# Argument templates; {in}, {out} and {q} are substituted per call.
EXTERNAL_CODECS: dict[str, dict] = {
    "jpeg": {
        "encode": ["cjpeg", "-quality", "{q}", "-grayscale", "-outfile", "{out}", "{in}"],
        "decode": ["djpeg", "-pnm", "-outfile", "{out}", "{in}"],
        "source": ".pgm", "coded": ".jpg", "decoded": ".pgm",
    },
    "jpeg2000": {
        "encode": ["opj_compress", "-i", "{in}", "-o", "{out}", "-r", "{q}"],
        "decode": ["opj_decompress", "-i", "{in}", "-o", "{out}"],
        "source": ".pgm", "coded": ".j2k", "decoded": ".pgm",
    },
    "bpg": {
        "encode": ["bpgenc", "-q", "{q}", "-f", "444", "-o", "{out}", "{in}"],
        "decode": ["bpgdec", "-o", "{out}", "{in}"],
        "source": ".png", "coded": ".bpg", "decoded": ".png",
    },
}


class ExternalCodec:
    """Subprocess wrapper driving an external encoder/decoder pair through temp files."""

    def __init__(self, binary_id: str, quality: float):
        if binary_id not in EXTERNAL_CODECS:
            raise KeyError(f"unknown external codec {binary_id!r}; known: {sorted(EXTERNAL_CODECS)}")
        self.codec_id = binary_id
        self.param = float(quality)
        self.spec = EXTERNAL_CODECS[binary_id]
        self._shape: tuple[int, int] | None = None

    def available(self) -> bool:
        return all(shutil.which(self.spec[k][0]) for k in ("encode", "decode"))

    def _run(self, template: list[str], src: Path, dst: Path) -> None:
        q = int(self.param) if float(self.param).is_integer() else self.param
        cmd = [a.format(**{"in": str(src), "out": str(dst), "q": q}) for a in template]
        proc = subprocess.run(cmd, capture_output=True, text=True)
        if proc.returncode != 0:
            raise RuntimeError(f"{cmd[0]} failed ({proc.returncode}): {proc.stderr.strip()}")

    def encode(self, image: ImageTensor) -> bytes:
        image = image.cropped()
        self._shape = (image.height, image.width)
        with tempfile.TemporaryDirectory() as tmp:
            src = Path(tmp) / f"src{self.spec['source']}"
            dst = Path(tmp) / f"coded{self.spec['coded']}"
            save_grayscale(src, image)
            self._run(self.spec["encode"], src, dst)
            return dst.read_bytes()

    def decode(self, data: bytes) -> ImageTensor:
        with tempfile.TemporaryDirectory() as tmp:
            src = Path(tmp) / f"coded{self.spec['coded']}"
            dst = Path(tmp) / f"decoded{self.spec['decoded']}"
            src.write_bytes(data)
            self._run(self.spec["decode"], src, dst)
            out = load_grayscale(dst)
        if self._shape is not None and (out.height, out.width) != self._shape:
            raise RuntimeError(f"{self.codec_id} decoded to {out.height}x{out.width}, expected {self._shape}")
        return out


def external_codec_point(binary_id: str, quality: float, image: ImageTensor | Sequence[ImageTensor],
                         extractor="random") -> RdPoint | None:
    """RD point for an external codec, or None (with a logged notice) if its binaries are missing."""
    codec = ExternalCodec(binary_id, quality)
    if not codec.available():
        log.warning("skipping %s: encoder/decoder binaries not found on PATH", binary_id)
        return None
    corpus = [image] if isinstance(image, ImageTensor) else list(image)
    return rd_point(codec, corpus, extractor)


def external_sweep(binary_id: str, qualities: Iterable[float], corpus: Sequence[ImageTensor],
                   extractor="random") -> list[RdPoint]:
    pts = [external_codec_point(binary_id, q, corpus, extractor) for q in qualities]
    return sorted((p for p in pts if p is not None), key=lambda p: p.bpp)

