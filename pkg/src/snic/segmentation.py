"""Coronal-hole detection with active contours without edges, and DICE comparisons."""

from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Protocol, Sequence

import numpy as np
from PIL import Image
from scipy import ndimage

from .data import (
    DEFAULT_CLIP_HI,
    DEFAULT_CLIP_LO,
    RawEuvImage,
    inverse_preprocess,
    preprocess_euv,
)

log = logging.getLogger(__name__)

LIMB_BIN_FRACTION = 0.01
QS_PERCENTILES = (25.0, 90.0)
# pixels darker than this fraction of the disk median are left out of the limb profile
LIMB_DARK_FRACTION = 0.5


@dataclass(frozen=True)
class DiskGeometry:
    center: tuple[float, float]
    radius: float

    def __post_init__(self):
        if not self.radius > 0:
            raise ValueError("disk radius must be positive")

    @classmethod
    def from_raw(cls, raw: RawEuvImage) -> "DiskGeometry":
        return cls(tuple(float(c) for c in raw.disk_center), float(raw.disk_radius))

    def check(self, shape: Sequence[int]) -> None:
        r, c = self.center
        h, w = shape[:2]
        if not (0 <= r < h and 0 <= c < w):
            raise ValueError(f"disk centre {self.center} outside a {h}x{w} image")

    def radius_map(self, shape: Sequence[int]) -> np.ndarray:
        """Distance of every pixel from the centre in units of the radius."""
        self.check(shape)
        rr = np.arange(shape[0], dtype=np.float64)[:, None] - self.center[0]
        cc = np.arange(shape[1], dtype=np.float64)[None, :] - self.center[1]
        return np.hypot(rr, cc) / self.radius

    def mask(self, shape: Sequence[int]) -> np.ndarray:
        return self.radius_map(shape) <= 1.0


@dataclass(frozen=True)
class AcweConfig:
    alpha: float = 0.3
    mu_len: float = 0.0
    lambda_in: float = 50.0
    lambda_out: float = 1.0
    max_iters: int = 500
    tol: float = 1e-4

    def __post_init__(self):
        if not self.alpha >= 0:
            raise ValueError("alpha must be nonnegative")
        if not (self.lambda_in > 0 and self.lambda_out > 0):
            raise ValueError("lambda_in and lambda_out must be positive")
        if self.mu_len < 0 or self.max_iters < 1 or self.tol < 0:
            raise ValueError("invalid ACWE settings")


@dataclass
class SegmentationMask:
    mask: np.ndarray
    geometry: DiskGeometry
    converged: bool = True
    iterations: int = 0
    energies: list[float] = field(default_factory=list)
    flags: list[str] = field(default_factory=list)

    def __post_init__(self):
        self.mask = np.asarray(self.mask, dtype=bool)
        if np.any(self.mask & ~self.geometry.mask(self.mask.shape)):
            raise ValueError("mask extends beyond the solar disk")

    @property
    def area(self) -> int:
        return int(self.mask.sum())


# -- preprocessing -------------------------------------------------------------

def _bin_profile(values: np.ndarray, bins: np.ndarray, nbins: int) -> tuple[np.ndarray, np.ndarray]:
    """Median of ``values`` per radial bin; empty bins are filled by interpolation."""
    present = np.unique(bins)
    medians = np.asarray(ndimage.median(values, labels=bins + 1, index=present + 1), dtype=np.float64)
    centres = (np.arange(nbins) + 0.5) / nbins
    profile = np.interp(centres, centres[present], medians)
    return centres, profile


def limb_correct(img: np.ndarray, geom: DiskGeometry, bin_fraction: float = LIMB_BIN_FRACTION) -> np.ndarray:
    """Flatten the radial brightness profile on the disk.

    Each on-disk pixel is divided by the (linearly interpolated) median of its
    annulus and multiplied by the global on-disk median; off-disk pixels are
    returned unchanged. Dark pixels (coronal-hole candidates) do not enter the
    annulus medians, so a hole filling an inner annulus is not flattened away.
    """
    img = np.asarray(img, dtype=np.float64)
    r = geom.radius_map(img.shape)
    disk = r <= 1.0
    if not disk.any():
        raise ValueError("no on-disk pixels")
    nbins = int(round(1.0 / bin_fraction))
    vals = img[disk]
    bins = np.minimum((r[disk] * nbins).astype(np.int64), nbins - 1)
    glob = float(np.median(vals))
    bright = vals >= LIMB_DARK_FRACTION * glob
    if not bright.any():
        bright[:] = True
    centres, profile = _bin_profile(vals[bright], bins[bright], nbins)
    local = np.interp(r[disk], centres, profile)
    out = img.copy()
    safe = local > 0
    corrected = vals.copy()
    corrected[safe] = vals[safe] / local[safe] * glob
    out[disk] = corrected
    return out


def quiet_sun_mean(img: np.ndarray, geom: DiskGeometry) -> float:
    """Mean of on-disk intensities between the 25th and 90th percentiles."""
    vals = np.asarray(img, dtype=np.float64)[geom.mask(np.shape(img))]
    if vals.size == 0:
        raise ValueError("no on-disk pixels")
    lo, hi = np.percentile(vals, QS_PERCENTILES)
    band = vals[(vals >= lo) & (vals <= hi)]
    return float(band.mean()) if band.size else float(vals.mean())


def seed_mask(img: np.ndarray, geom: DiskGeometry, alpha: float = 0.3, qs: float | None = None) -> SegmentationMask:
    """On-disk pixels with intensity <= alpha * QS."""
    img = np.asarray(img, dtype=np.float64)
    qs = quiet_sun_mean(img, geom) if qs is None else qs
    if not qs > 0:
        raise ValueError("quiet-sun level must be positive")
    return SegmentationMask(geom.mask(img.shape) & (img <= alpha * qs), geom)


# -- active contours without edges -----------------------------------------------

def _boundary_edges(mask: np.ndarray) -> int:
    return int(np.count_nonzero(mask[1:] != mask[:-1]) + np.count_nonzero(mask[:, 1:] != mask[:, :-1]))


def _neighbour_counts(mask: np.ndarray) -> np.ndarray:
    """Number of 4-neighbours inside ``mask`` (outside the image counts as outside)."""
    m = mask.astype(np.int8)
    n = np.zeros(mask.shape, dtype=np.int8)
    n[1:] += m[:-1]
    n[:-1] += m[1:]
    n[:, 1:] += m[:, :-1]
    n[:, :-1] += m[:, 1:]
    return n


def _degree(shape) -> np.ndarray:
    return _neighbour_counts(np.ones(shape, dtype=bool))


def acwe_energy(img: np.ndarray, inside: np.ndarray, disk: np.ndarray, cfg: AcweConfig) -> float:
    vals, ins = img[disk], inside[disk]
    e = 0.0
    if ins.any():
        v = vals[ins]
        e += cfg.lambda_in * float(np.sum((v - v.mean()) ** 2))
    if (~ins).any():
        v = vals[~ins]
        e += cfg.lambda_out * float(np.sum((v - v.mean()) ** 2))
    if cfg.mu_len > 0:
        e += cfg.mu_len * _boundary_edges(inside)
    return e


def _region_means(vals: np.ndarray, ins: np.ndarray, prev: tuple[float, float]) -> tuple[float, float]:
    c_in = float(vals[ins].mean()) if ins.any() else prev[0]
    c_out = float(vals[~ins].mean()) if (~ins).any() else prev[1]
    return c_in, c_out


class EnergyIncreaseError(RuntimeError):
    pass


def acwe_evolve(img: np.ndarray, seed: SegmentationMask, cfg: AcweConfig = AcweConfig()) -> SegmentationMask:
    """Alternate region-mean updates and pixel reassignment until few pixels flip.

    With ``mu_len > 0`` the boundary term counts 4-neighbour edges and pixels
    are updated in a red/black checkerboard, so every half-sweep is an exact
    coordinate-descent step.  The energy is checked to be nonincreasing.
    """
    img = np.asarray(img, dtype=np.float64)
    geom = seed.geometry
    disk = geom.mask(img.shape)
    inside = seed.mask & disk
    if not inside.any():
        return SegmentationMask(inside, geom, converged=True, flags=["empty-seed"])
    vals = img[disk]
    n_disk = vals.size
    ins = inside[disk]
    c = _region_means(vals, ins, (0.0, 0.0))
    energy = acwe_energy(img, inside, disk, cfg)
    energies = [energy]
    converged = False
    it = 0
    if cfg.mu_len > 0:
        rows, cols = np.nonzero(disk)
        colour = (rows + cols) % 2
        degree = _degree(img.shape)[disk]
    for it in range(1, cfg.max_iters + 1):
        cost_in = cfg.lambda_in * (vals - c[0]) ** 2
        cost_out = cfg.lambda_out * (vals - c[1]) ** 2
        if cfg.mu_len > 0:
            new = ins.copy()
            for parity in (0, 1):
                full = np.zeros(img.shape, dtype=bool)
                full[disk] = new
                n_in = _neighbour_counts(full)[disk]
                a = cost_in + cfg.mu_len * (degree - n_in)
                b = cost_out + cfg.mu_len * n_in
                sel = colour == parity
                new[sel] = np.where(a[sel] < b[sel], True, np.where(a[sel] > b[sel], False, new[sel]))
        else:
            new = np.where(cost_in < cost_out, True, np.where(cost_in > cost_out, False, ins))
        flipped = int(np.count_nonzero(new != ins))
        ins = new
        inside = np.zeros(img.shape, dtype=bool)
        inside[disk] = ins
        c = _region_means(vals, ins, c)
        e = acwe_energy(img, inside, disk, cfg)
        if e > energies[-1] * (1 + 1e-12) + 1e-9:
            raise EnergyIncreaseError(f"ACWE energy rose from {energies[-1]} to {e} at iteration {it}")
        energies.append(e)
        if flipped / n_disk < cfg.tol:
            converged = True
            break
    flags = [] if converged else ["not-converged"]
    if not converged:
        log.warning("ACWE did not converge in %d iterations", cfg.max_iters)
    return SegmentationMask(inside, geom, converged, it, energies, flags)


def segment_coronal_holes(img: np.ndarray, geom: DiskGeometry, cfg: AcweConfig = AcweConfig(),
                          correct_limb: bool = True) -> SegmentationMask:
    """Limb correction, quiet-sun seeding and ACWE on physical intensities."""
    img = np.asarray(img, dtype=np.float64)
    work = limb_correct(img, geom) if correct_limb else img
    seed = seed_mask(work, geom, cfg.alpha)
    return acwe_evolve(work, seed, cfg)


def dice(s1, s2) -> float:
    """2|A n B| / (|A| + |B|); two empty masks give 1."""
    a = np.asarray(getattr(s1, "mask", s1), dtype=bool)
    b = np.asarray(getattr(s2, "mask", s2), dtype=bool)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    total = int(a.sum()) + int(b.sum())
    if total == 0:
        return 1.0
    return 2.0 * int(np.count_nonzero(a & b)) / total


# -- compression impact ------------------------------------------------------------

class IntensityCodec(Protocol):
    """Round trip of physical intensities; returns (reconstruction, compressed byte count)."""

    def roundtrip(self, pixels: np.ndarray) -> tuple[np.ndarray, int]: ...


class IdentityCodec:
    """No compression; reports the size of the 16-bit source image."""

    bits_per_pixel = 16

    def roundtrip(self, pixels: np.ndarray) -> tuple[np.ndarray, int]:
        return np.array(pixels, dtype=np.float64, copy=True), pixels.size * self.bits_per_pixel // 8


class NeuralIntensityCodec:
    """Preprocess to 8-bit levels, code with a model, and map back to intensities."""

    def __init__(self, model, lambda_index: int = 0, clip_lo: float = DEFAULT_CLIP_LO,
                 clip_hi: float = DEFAULT_CLIP_HI, tile: int | None = None):
        from .transforms import TILE_PX

        self.model = model
        self.lambda_index = lambda_index
        self.clip = (clip_lo, clip_hi)
        self.tile = TILE_PX if tile is None else tile

    def roundtrip(self, pixels: np.ndarray) -> tuple[np.ndarray, int]:
        from .bitstream import compress_image, decompress_image

        levels = preprocess_euv(pixels, *self.clip)
        data = compress_image(levels, self.model, self.lambda_index, self.tile).to_bytes()
        recon = decompress_image(data, self.model, self.tile)
        return inverse_preprocess(recon, *self.clip), len(data)


@dataclass
class ImpactResult:
    dice: float
    bpp: float
    original: SegmentationMask
    reconstructed: SegmentationMask


def compression_impact(raw: RawEuvImage, codec: IntensityCodec, cfg: AcweConfig = AcweConfig(),
                       correct_limb: bool = True) -> ImpactResult:
    """DICE between segmentations of the original and of its codec round trip."""
    geom = DiskGeometry.from_raw(raw)
    s1 = segment_coronal_holes(raw.pixels, geom, cfg, correct_limb)
    recon, nbytes = codec.roundtrip(raw.pixels)
    s2 = segment_coronal_holes(recon, geom, cfg, correct_limb)
    return ImpactResult(dice(s1, s2), 8.0 * nbytes / raw.pixels.size, s1, s2)


# -- serialization -------------------------------------------------------------------

def save_mask(path: str | Path, seg: SegmentationMask, cfg: AcweConfig | None = None) -> tuple[Path, Path]:
    """1-bit PNG plus a JSON sidecar with geometry, config and convergence info."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(seg.mask).convert("1").save(path)
    side = path.with_suffix(".json")
    info = {
        "geometry": {"center": list(seg.geometry.center), "radius": seg.geometry.radius},
        "config": asdict(cfg) if cfg is not None else None,
        "converged": seg.converged,
        "iterations": seg.iterations,
        "flags": seg.flags,
        "area": seg.area,
    }
    side.write_text(json.dumps(info, indent=2))
    return path, side


def load_mask(path: str | Path) -> SegmentationMask:
    path = Path(path)
    mask = np.asarray(Image.open(path).convert("1"), dtype=bool)
    info = json.loads(path.with_suffix(".json").read_text())
    g = info["geometry"]
    return SegmentationMask(mask, DiskGeometry(tuple(g["center"]), g["radius"]), info["converged"],
                            info["iterations"], flags=info["flags"])


def write_dice_csv(path: str | Path, rows: Sequence[tuple[str, float, float]]) -> Path:
    """Rows of (image id, bpp, dice), written sorted by bpp."""
    path = Path(path)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["image_id", "bpp", "dice"])
        for image_id, bpp, d in sorted(rows, key=lambda r: (r[1], r[0])):
            w.writerow([image_id, "inf" if math.isinf(bpp) else bpp, d])
    return path
