"""Ingestion, intensity mapping, padding, dataset splits and crop sampling."""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from datetime import datetime
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

DEFAULT_CLIP_LO = 20.0
DEFAULT_CLIP_HI = 2500.0
NUM_LEVELS = 256
PAD_MULTIPLE = 64
TRAIN_MONTHS = frozenset(range(1, 9))
TEST_MONTHS = frozenset(range(9, 13))
DEFAULT_RADIUS_FRACTION = 0.45


def round_half_away(x):
    """Round to nearest integer, ties away from zero (numpy arrays or scalars)."""
    x = np.asarray(x, dtype=np.float64)
    return np.sign(x) * np.floor(np.abs(x) + 0.5)


@dataclass
class RawEuvImage:
    pixels: np.ndarray
    record_time: datetime | None = None
    wavelength: float | None = None
    disk_center: tuple[float, float] | None = None
    disk_radius: float | None = None

    def __post_init__(self):
        self.pixels = np.asarray(self.pixels, dtype=np.float64)
        if self.pixels.ndim != 2:
            raise ValueError(f"expected a 2-D intensity array, got shape {self.pixels.shape}")
        if np.any(self.pixels < 0):
            raise ValueError("EUV intensities must be nonnegative")
        if self.disk_center is None or self.disk_radius is None:
            self.disk_center, self.disk_radius = default_disk_geometry(self.pixels.shape)
        r0, c0 = self.disk_center
        h, w = self.pixels.shape
        rad = self.disk_radius
        if rad <= 0 or r0 - rad < -0.5 or c0 - rad < -0.5 or r0 + rad > h - 0.5 or c0 + rad > w - 0.5:
            raise ValueError("solar disk does not fit inside the image")


@dataclass
class ImageTensor:
    """Single-channel image of levels in [0, 255], stored H x W x 1.

    ``orig_height``/``orig_width`` hold the extent before any padding.
    """

    data: np.ndarray
    orig_height: int = -1
    orig_width: int = -1

    def __post_init__(self):
        data = np.asarray(self.data, dtype=np.float32)
        if data.ndim == 2:
            data = data[..., None]
        if data.ndim != 3 or data.shape[2] != 1:
            raise ValueError(f"expected H x W x 1 data, got shape {data.shape}")
        if data.size and (data.min() < 0 or data.max() > 255):
            raise ValueError("image levels must lie in [0, 255]")
        self.data = data
        if self.orig_height < 0:
            self.orig_height = data.shape[0]
        if self.orig_width < 0:
            self.orig_width = data.shape[1]
        if self.orig_height > data.shape[0] or self.orig_width > data.shape[1]:
            raise ValueError("original dimensions exceed stored dimensions")

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def plane(self) -> np.ndarray:
        return self.data[..., 0]

    def cropped(self) -> "ImageTensor":
        """Drop padding, returning the original extent."""
        return ImageTensor(self.plane[: self.orig_height, : self.orig_width].copy())


@dataclass(frozen=True)
class ManifestRecord:
    path: str
    timestamp: datetime | None


@dataclass
class DatasetSplit:
    train: list = field(default_factory=list)
    test: list = field(default_factory=list)


def default_disk_geometry(shape: Sequence[int]) -> tuple[tuple[float, float], float]:
    h, w = shape[:2]
    return ((h - 1) / 2.0, (w - 1) / 2.0), DEFAULT_RADIUS_FRACTION * min(h, w)


def _check_clip(clip_lo: float, clip_hi: float) -> None:
    if not clip_lo > 0:
        raise ValueError(f"clip_lo must be positive for the log transform, got {clip_lo}")
    if not clip_lo < clip_hi:
        raise ValueError(f"clip_lo ({clip_lo}) must be below clip_hi ({clip_hi})")


def level_step(clip_lo: float = DEFAULT_CLIP_LO, clip_hi: float = DEFAULT_CLIP_HI) -> float:
    """Width of one level in log10 intensity."""
    return (math.log10(clip_hi) - math.log10(clip_lo)) / (NUM_LEVELS - 1)


def preprocess_euv(raw: RawEuvImage | np.ndarray, clip_lo: float = DEFAULT_CLIP_LO,
                   clip_hi: float = DEFAULT_CLIP_HI) -> ImageTensor:
    """Clip, log10 and map intensities onto the integer levels 0..255."""
    _check_clip(clip_lo, clip_hi)
    pixels = raw.pixels if isinstance(raw, RawEuvImage) else np.asarray(raw, dtype=np.float64)
    if pixels.size == 0:
        raise ValueError("empty image")
    lo, hi = math.log10(clip_lo), math.log10(clip_hi)
    logs = np.log10(np.clip(pixels, clip_lo, clip_hi))
    levels = round_half_away((logs - lo) / (hi - lo) * (NUM_LEVELS - 1))
    levels = np.clip(levels, 0, NUM_LEVELS - 1)
    return ImageTensor(levels.astype(np.float32))


def inverse_preprocess(t: ImageTensor | np.ndarray, clip_lo: float = DEFAULT_CLIP_LO,
                       clip_hi: float = DEFAULT_CLIP_HI) -> np.ndarray:
    """Map levels back to physical intensities (H x W float64)."""
    _check_clip(clip_lo, clip_hi)
    levels = t.plane if isinstance(t, ImageTensor) else np.asarray(t)
    levels = np.asarray(levels, dtype=np.float64)
    if levels.ndim == 3:
        levels = levels[..., 0]
    if levels.size and (levels.min() < 0 or levels.max() > NUM_LEVELS - 1):
        raise ValueError("levels outside [0, 255]")
    lo, hi = math.log10(clip_lo), math.log10(clip_hi)
    return np.power(10.0, lo + levels / (NUM_LEVELS - 1) * (hi - lo))


def pad_to_multiple(t: ImageTensor, multiple: int = PAD_MULTIPLE) -> ImageTensor:
    """Edge-replicate bottom/right so both dims are multiples of ``multiple``."""
    if multiple < 1:
        raise ValueError("multiple must be >= 1")
    h, w = t.height, t.width
    ph = -h % multiple
    pw = -w % multiple
    if ph == 0 and pw == 0:
        return replace(t, data=t.data.copy())
    data = np.pad(t.data, ((0, ph), (0, pw), (0, 0)), mode="edge")
    return ImageTensor(data, t.orig_height, t.orig_width)


def split_by_month(records: Iterable) -> DatasetSplit:
    """Months 1-8 go to training, 9-12 to testing."""
    split = DatasetSplit()
    for rec in records:
        ts = _timestamp_of(rec)
        if ts is None:
            raise ValueError(f"record without timestamp: {rec!r}")
        (split.train if ts.month in TRAIN_MONTHS else split.test).append(rec)
    return split


def _timestamp_of(rec) -> datetime | None:
    if isinstance(rec, (ManifestRecord, RawEuvImage)):
        return rec.timestamp if isinstance(rec, ManifestRecord) else rec.record_time
    if isinstance(rec, datetime):
        return rec
    if isinstance(rec, tuple) and len(rec) == 2:
        return rec[1]
    return getattr(rec, "timestamp", None)


def parse_timestamp(text: str) -> datetime:
    text = text.strip()
    if text.endswith("Z"):
        text = text[:-1]
    # SDO T_REC style: "2010-07-25T12:00:02" possibly with "_TAI"
    text = text.replace("_TAI", "").replace(" T", "T")
    return datetime.fromisoformat(text)


def read_manifest(path: str | Path) -> list[ManifestRecord]:
    """Read ``path,timestamp`` lines; relative paths resolve against the manifest."""
    path = Path(path)
    records = []
    for lineno, line in enumerate(path.read_text().splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        parts = [p.strip() for p in line.split(",")]
        img = Path(parts[0])
        if not img.is_absolute():
            img = path.parent / img
        ts = None
        if len(parts) > 1 and parts[1]:
            try:
                ts = parse_timestamp(parts[1])
            except ValueError as exc:
                raise ValueError(f"{path}:{lineno}: bad timestamp {parts[1]!r}") from exc
        records.append(ManifestRecord(str(img), ts))
    return records


def sample_crops(images: Sequence, crop: int, batch: int, rng_seed) -> list[ImageTensor]:
    """Uniformly positioned square crops from uniformly chosen images."""
    if not images:
        raise ValueError("no images to crop from")
    planes = [im.plane if isinstance(im, ImageTensor) else np.asarray(im, dtype=np.float32)
              for im in images]
    for p in planes:
        if crop > min(p.shape[:2]):
            raise ValueError(f"crop {crop} larger than image {p.shape[:2]}")
    rng = np.random.default_rng(rng_seed)
    out = []
    for _ in range(batch):
        p = planes[rng.integers(len(planes))]
        r = rng.integers(p.shape[0] - crop + 1)
        c = rng.integers(p.shape[1] - crop + 1)
        out.append(ImageTensor(p[r:r + crop, c:c + crop].copy()))
    return out


# -- file I/O ---------------------------------------------------------------

EIGHT_BIT_SUFFIXES = {".png", ".pgm", ".pnm", ".bmp", ".tif", ".tiff"}
EUV_SUFFIXES = {".npz", ".npy", ".fits", ".fit", ".fts"}


def load_grayscale(path: str | Path) -> ImageTensor:
    from PIL import Image

    with Image.open(path) as im:
        if im.mode not in ("L", "P", "I", "I;16", "1"):
            im = im.convert("L")
        arr = np.asarray(im.convert("L"), dtype=np.float32)
    return ImageTensor(arr)


def save_grayscale(path: str | Path, image: ImageTensor | np.ndarray) -> None:
    from PIL import Image

    arr = image.plane if isinstance(image, ImageTensor) else np.asarray(image)
    arr = np.clip(round_half_away(arr), 0, 255).astype(np.uint8)
    Image.fromarray(arr, mode="L").save(path)


def load_euv(path: str | Path) -> RawEuvImage:
    """Load physical intensities from ``.npz``/``.npy`` or FITS (needs astropy)."""
    path = Path(path)
    suffix = path.suffix.lower()
    if suffix == ".npy":
        return RawEuvImage(np.load(path))
    if suffix == ".npz":
        with np.load(path, allow_pickle=False) as z:
            kw = {}
            if "record_time" in z:
                kw["record_time"] = parse_timestamp(str(z["record_time"]))
            if "wavelength" in z:
                kw["wavelength"] = float(z["wavelength"])
            if "disk_center" in z and "disk_radius" in z:
                kw["disk_center"] = tuple(float(v) for v in z["disk_center"])
                kw["disk_radius"] = float(z["disk_radius"])
            return RawEuvImage(np.clip(z["pixels"], 0, None), **kw)
    if suffix in {".fits", ".fit", ".fts"}:
        return _load_fits(path)
    raise ValueError(f"unsupported EUV file type: {path.suffix}")


def save_euv(path: str | Path, raw: RawEuvImage) -> None:
    kw = {"pixels": raw.pixels, "disk_center": np.asarray(raw.disk_center),
          "disk_radius": raw.disk_radius}
    if raw.record_time is not None:
        kw["record_time"] = raw.record_time.isoformat()
    if raw.wavelength is not None:
        kw["wavelength"] = raw.wavelength
    np.savez_compressed(path, **kw)


def _load_fits(path: Path) -> RawEuvImage:
    try:
        from astropy.io import fits
    except ImportError as exc:  # pragma: no cover - depends on host
        raise RuntimeError("reading FITS files requires astropy (pip install astropy)") from exc
    with fits.open(path) as hdul:
        hdu = next(h for h in hdul if getattr(h, "data", None) is not None)
        data = np.asarray(hdu.data, dtype=np.float64)
        hdr = hdu.header
    kw = {}
    t = hdr.get("T_REC") or hdr.get("T_OBS") or hdr.get("DATE-OBS")
    if t:
        try:
            kw["record_time"] = parse_timestamp(str(t))
        except ValueError:
            pass
    if "WAVELNTH" in hdr:
        kw["wavelength"] = float(hdr["WAVELNTH"])
    if all(k in hdr for k in ("CRPIX1", "CRPIX2", "R_SUN")):
        # FITS pixel indices are 1-based, axis 1 is columns
        kw["disk_center"] = (float(hdr["CRPIX2"]) - 1.0, float(hdr["CRPIX1"]) - 1.0)
        kw["disk_radius"] = float(hdr["R_SUN"])
    return RawEuvImage(np.nan_to_num(np.clip(data, 0, None)), **kw)


def load_any(path: str | Path) -> RawEuvImage | ImageTensor:
    suffix = Path(path).suffix.lower()
    if suffix in EUV_SUFFIXES:
        return load_euv(path)
    return load_grayscale(path)


# -- synthetic imagery --------------------------------------------------------

@dataclass
class SyntheticSun:
    raw: RawEuvImage
    ch_mask: np.ndarray


def synthetic_sun(size: int = 128, rng=None, quiet_level: float = 300.0, ch_level: float = 40.0,
                  n_holes: int = 2, n_active: int = 2, limb: float = 0.3,
                  noise: float = 0.03) -> SyntheticSun:
    """Disk with limb brightening, dark coronal holes and bright active regions.

    ``noise`` is the relative std of multiplicative Gaussian noise.
    """
    rng = np.random.default_rng(rng)
    (r0, c0), rad = default_disk_geometry((size, size))
    rr, cc = np.mgrid[0:size, 0:size].astype(np.float64)
    dist = np.hypot(rr - r0, cc - c0) / rad
    disk = dist <= 1.0
    img = np.where(disk, quiet_level * (1.0 + limb * np.minimum(dist, 1.0) ** 2), 0.0)
    corona = 0.25 * quiet_level * np.exp(-(dist - 1.0) * 6.0)
    img = np.where(disk, img, np.maximum(corona, 5.0))
    ch = np.zeros((size, size), bool)
    for _ in range(n_holes):
        ang = rng.uniform(0, 2 * np.pi)
        off = rng.uniform(0.0, 0.55) * rad
        hr, hc = r0 + off * np.sin(ang), c0 + off * np.cos(ang)
        a, b = rng.uniform(0.12, 0.25) * rad, rng.uniform(0.12, 0.25) * rad
        ch |= (((rr - hr) / a) ** 2 + ((cc - hc) / b) ** 2 <= 1.0) & disk
    img[ch] = ch_level
    for _ in range(n_active):
        ang = rng.uniform(0, 2 * np.pi)
        off = rng.uniform(0.0, 0.7) * rad
        ar, ac = r0 + off * np.sin(ang), c0 + off * np.cos(ang)
        s = rng.uniform(0.04, 0.08) * rad
        blob = 6.0 * quiet_level * np.exp(-((rr - ar) ** 2 + (cc - ac) ** 2) / (2 * s * s))
        img = np.where(disk & ~ch, img + blob, img)
    if noise > 0:
        img = img * (1.0 + noise * rng.standard_normal(img.shape))
    img = np.clip(img, 0.0, None)
    return SyntheticSun(RawEuvImage(img, disk_center=(r0, c0), disk_radius=rad), ch)


def synthetic_corpus(n: int, size: int = 64, seed: int = 0, clip_lo: float = DEFAULT_CLIP_LO,
                     clip_hi: float = DEFAULT_CLIP_HI, **kw) -> list[ImageTensor]:
    """Preprocessed synthetic suns, one fresh draw per image."""
    rng = np.random.default_rng(seed)
    return [preprocess_euv(synthetic_sun(size, rng, **kw).raw, clip_lo, clip_hi) for _ in range(n)]
