"""Command-line entry point: ``snic <subcommand> [flags]``.

Exit codes: 0 ok, 1 other failure, 2 bad input, 3 model/checkpoint problem,
4 container integrity failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import math
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from .data import (
    DEFAULT_CLIP_HI,
    DEFAULT_CLIP_LO,
    EIGHT_BIT_SUFFIXES,
    EUV_SUFFIXES,
    ImageTensor,
    RawEuvImage,
    inverse_preprocess,
    load_any,
    preprocess_euv,
    read_manifest,
    save_euv,
    save_grayscale,
    split_by_month,
    synthetic_sun,
)

EXIT_OK, EXIT_OTHER, EXIT_INPUT, EXIT_MODEL, EXIT_INTEGRITY = 0, 1, 2, 3, 4
HELP_WIDTH = 100

log = logging.getLogger("snic")


class InputError(Exception):
    pass


class _Formatter(argparse.ArgumentDefaultsHelpFormatter):
    def __init__(self, prog):
        super().__init__(prog, width=HELP_WIDTH, max_help_position=36)

    def _get_help_string(self, action):
        if action.default is None:
            return action.help
        return super()._get_help_string(action)


# -- argument parsing ----------------------------------------------------------------

def _common(p: argparse.ArgumentParser, euv: bool = True) -> None:
    p.add_argument("--seed", type=int, default=0, help="seed for all randomness")
    p.add_argument("--config", type=Path, default=None,
                   help="file of key=value lines (or JSON) merged under explicit flags")
    if euv:
        p.add_argument("--euv", action="store_true", help="inputs are physical EUV intensities")
        p.add_argument("--clip-lo", type=float, default=DEFAULT_CLIP_LO, help="lower intensity clip")
        p.add_argument("--clip-hi", type=float, default=DEFAULT_CLIP_HI, help="upper intensity clip")


def build_parser() -> argparse.ArgumentParser:
    from .training import LAMBDA_GRID

    parser = argparse.ArgumentParser(prog="snic", description="Learned compression of solar EUV images.",
                                     formatter_class=_Formatter)
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True, metavar="command")

    p = sub.add_parser("train", help="train one model per lambda", formatter_class=_Formatter)
    p.add_argument("--out", type=Path, required=True, help="output directory for checkpoints and metrics")
    p.add_argument("--corpus", type=Path, default=None, help="manifest file or image directory")
    p.add_argument("--synthetic", type=int, default=0, help="train on this many synthetic suns instead")
    p.add_argument("--synthetic-size", type=int, default=64, help="side of synthetic images")
    p.add_argument("--name", default="run", help="run name under --out")
    p.add_argument("--preset", default="paper", choices=("paper", "desk", "tiny"), help="architecture size")
    p.add_argument("--lambdas", type=float, nargs="+", default=list(LAMBDA_GRID), help="lambda grid")
    p.add_argument("--epochs", type=int, default=100, help="epochs per lambda")
    p.add_argument("--steps-per-epoch", type=int, default=None, help="steps per epoch (default: one pass)")
    p.add_argument("--batch", type=int, default=16, help="batch size")
    p.add_argument("--crop", type=int, default=256, help="crop side")
    p.add_argument("--lr-start", type=float, default=1e-4, help="initial learning rate")
    p.add_argument("--lr-end", type=float, default=1.2e-6, help="final learning rate")
    p.add_argument("--adversarial", action="store_true", help="add the conditional discriminator")
    p.add_argument("--perc-weight", type=float, default=1.0, help="LPIPS weight")
    p.add_argument("--adv-weight", type=float, default=0.01, help="adversarial weight")
    p.add_argument("--lpips-backbone", default="random", help="perceptual feature extractor")
    p.add_argument("--resume", type=Path, default=None, help="checkpoint to resume (single lambda)")
    _common(p)

    p = sub.add_parser("compress", help="compress one image to a .snic container", formatter_class=_Formatter)
    p.add_argument("input", type=Path, help="8-bit image, or EUV intensities with --euv")
    p.add_argument("-c", "--checkpoint", type=Path, required=True, help="model checkpoint")
    p.add_argument("-o", "--output", type=Path, default=None, help="container path (default: input.snic)")
    p.add_argument("--tile", type=int, default=1024, help="inference tile size in pixels (0 disables)")
    _common(p)

    p = sub.add_parser("decompress", help="decode a .snic container", formatter_class=_Formatter)
    p.add_argument("input", type=Path, help=".snic container")
    p.add_argument("-c", "--checkpoint", type=Path, required=True, help="model checkpoint")
    p.add_argument("-o", "--output", type=Path, default=None, help="reconstruction PNG (default: input.png)")
    p.add_argument("--tile", type=int, default=1024, help="inference tile size in pixels (0 disables)")
    _common(p)

    p = sub.add_parser("eval", help="rate-distortion sweep over checkpoints", formatter_class=_Formatter)
    p.add_argument("--checkpoints", type=Path, required=True, help="checkpoint file or training run directory")
    p.add_argument("--corpus", type=Path, default=None, help="manifest file or image directory")
    p.add_argument("--synthetic", type=int, default=0, help="evaluate on this many synthetic suns instead")
    p.add_argument("--synthetic-size", type=int, default=256, help="side of synthetic images")
    p.add_argument("--split", choices=("all", "train", "test"), default="all", help="manifest subset")
    p.add_argument("--out", type=Path, required=True, help="output directory for rd.csv and plots")
    p.add_argument("--external", nargs="*", default=[], metavar="CODEC:Q1,Q2",
                   help="external codec sweeps, e.g. jpeg:10,50,90")
    p.add_argument("--latency-repeats", type=int, default=0, help="also time the first image (0 skips)")
    p.add_argument("--lpips-backbone", default="random", help="perceptual feature extractor")
    p.add_argument("--jobs", type=int, default=1, help="worker threads across images")
    _common(p)

    p = sub.add_parser("segment", help="coronal-hole segmentation of an EUV image", formatter_class=_Formatter)
    p.add_argument("input", type=Path, help="EUV intensities (.npz/.npy/.fits)")
    p.add_argument("-o", "--output", type=Path, required=True, help="mask PNG; a JSON sidecar is written next to it")
    _acwe_flags(p)
    _common(p, euv=False)

    p = sub.add_parser("impact", help="DICE of segmentations before and after compression",
                       formatter_class=_Formatter)
    p.add_argument("--checkpoints", type=Path, required=True, help="checkpoint file or training run directory")
    p.add_argument("--images", type=Path, nargs="*", default=[], help="EUV intensity files")
    p.add_argument("--synthetic", type=int, default=0, help="use this many synthetic suns instead")
    p.add_argument("--synthetic-size", type=int, default=256, help="side of synthetic images")
    p.add_argument("--lambdas", type=int, default=None, help="use this many checkpoints, evenly spaced")
    p.add_argument("--identity", action="store_true", help="add an uncompressed reference row")
    p.add_argument("--out", type=Path, required=True, help="DICE CSV path")
    p.add_argument("--jobs", type=int, default=1, help="worker threads across images")
    p.add_argument("--tile", type=int, default=1024, help="inference tile size in pixels (0 disables)")
    _acwe_flags(p)
    _common(p)

    p = sub.add_parser("plot", help="plot an RD or DICE CSV", formatter_class=_Formatter)
    p.add_argument("csv", type=Path, help="rd.csv or DICE CSV")
    p.add_argument("--out", type=Path, required=True, help="output directory")
    p.add_argument("--format", default="png", choices=("png", "pdf", "svg"), help="image format")
    _common(p, euv=False)
    return parser


def _acwe_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--alpha", type=float, default=0.3, help="seeding factor")
    p.add_argument("--mu-len", type=float, default=0.0, help="contour length weight")
    p.add_argument("--lambda-in", type=float, default=50.0, help="foreground homogeneity weight")
    p.add_argument("--lambda-out", type=float, default=1.0, help="background homogeneity weight")
    p.add_argument("--max-iters", type=int, default=500, help="iteration cap")
    p.add_argument("--tol", type=float, default=1e-4, help="stop when this fraction of pixels flips")
    p.add_argument("--no-limb-correction", action="store_true", help="skip radial profile flattening")


def read_config_file(path: Path) -> dict:
    text = Path(path).read_text()
    if text.lstrip().startswith("{"):
        return json.loads(text)
    out = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise InputError(f"{path}:{lineno}: expected key=value")
        k, v = (s.strip() for s in line.split("=", 1))
        out[k.replace("-", "_")] = v
    return out


def _subparser(parser: argparse.ArgumentParser, name: str) -> argparse.ArgumentParser:
    for action in parser._actions:
        if isinstance(action, argparse._SubParsersAction):
            return action.choices[name]
    raise KeyError(name)


def parse_args(argv: Sequence[str] | None = None) -> argparse.Namespace:
    """Parse flags; values from ``--config`` act as defaults beneath explicit flags."""
    parser = build_parser()
    args = parser.parse_args(argv)
    if getattr(args, "config", None) is None:
        return args
    try:
        cfg = read_config_file(args.config)
    except (OSError, ValueError) as exc:
        raise InputError(f"cannot read config {args.config}: {exc}") from exc
    sp = _subparser(parser, args.command)
    known = {a.dest: a for a in sp._actions}
    defaults = {}
    for k, v in cfg.items():
        if k not in known or k in ("config", "help"):
            raise InputError(f"unknown config key {k!r} for {args.command}")
        a = known[k]
        if isinstance(v, str):
            if isinstance(a, argparse._StoreTrueAction):
                v = v.lower() in ("1", "true", "yes", "on")
            elif a.nargs in ("+", "*"):
                v = [a.type(s) if a.type else s for s in v.replace(",", " ").split()]
            elif a.type is not None:
                v = a.type(v)
        defaults[k] = v
    sp.set_defaults(**defaults)
    return parser.parse_args(argv)


# -- helpers ----------------------------------------------------------------------

def _load_checkpoint(path: Path):
    from .model import load_checkpoint

    if not path.exists():
        raise InputError(f"checkpoint not found: {path}")
    return load_checkpoint(path)


def _image_paths(path: Path, split: str = "all") -> list[Path]:
    if not path.exists():
        raise InputError(f"corpus not found: {path}")
    if path.is_dir():
        suffixes = EIGHT_BIT_SUFFIXES | EUV_SUFFIXES
        return sorted(p for p in path.iterdir() if p.suffix.lower() in suffixes)
    if path.suffix.lower() in EIGHT_BIT_SUFFIXES | EUV_SUFFIXES:
        return [path]
    records = read_manifest(path)
    if split != "all":
        records = getattr(split_by_month(records), split)
    return [Path(r.path) for r in records]


def _as_levels(item, args) -> ImageTensor:
    if isinstance(item, RawEuvImage):
        if not args.euv:
            raise InputError("input holds EUV intensities; pass --euv")
        return preprocess_euv(item, args.clip_lo, args.clip_hi)
    if args.euv:
        raise InputError("--euv given but the input is an 8-bit image")
    return item


def _load_levels(path: Path, args) -> ImageTensor:
    if not path.exists():
        raise InputError(f"input not found: {path}")
    try:
        item = load_any(path)
    except (OSError, ValueError) as exc:
        raise InputError(f"cannot read {path}: {exc}") from exc
    return _as_levels(item, args)


def _corpus(args, split: str = "all") -> list[ImageTensor]:
    if args.synthetic:
        rng = np.random.default_rng(args.seed)
        return [preprocess_euv(synthetic_sun(args.synthetic_size, rng).raw, args.clip_lo, args.clip_hi)
                for _ in range(args.synthetic)]
    if args.corpus is None:
        raise InputError("need --corpus or --synthetic")
    paths = _image_paths(args.corpus, split)
    if not paths:
        raise InputError(f"no images in {args.corpus}")
    return [_load_levels(p, args) for p in paths]


def _tile(args) -> int | None:
    return args.tile or None


def _checkpoint_list(path: Path, count: int | None = None) -> list[Path]:
    from .training import find_checkpoints

    if not path.exists():
        raise InputError(f"checkpoints not found: {path}")
    cks = find_checkpoints(path)
    if not cks:
        raise InputError(f"no checkpoints under {path}")
    if count is not None:
        if not 0 < count <= len(cks):
            raise InputError(f"--lambdas {count} but {len(cks)} checkpoints available")
        idx = np.unique(np.round(np.linspace(0, len(cks) - 1, count)).astype(int))
        cks = [cks[i] for i in idx]
    return cks


# -- subcommands ---------------------------------------------------------------------

def run_train(args) -> int:
    from .training import TrainConfig, run_lambda, train

    torch.manual_seed(args.seed)
    split = "train" if args.corpus is not None and args.corpus.is_file() and not args.synthetic else "all"
    images = _corpus(args, split)
    cfg = TrainConfig(lambdas=tuple(args.lambdas), epochs=args.epochs, batch=args.batch, crop=args.crop,
                      lr_start=args.lr_start, lr_end=args.lr_end, adversarial=args.adversarial,
                      seed=args.seed, preset=args.preset, steps_per_epoch=args.steps_per_epoch,
                      perc_weight=args.perc_weight, adv_weight=args.adv_weight,
                      lpips_backbone=args.lpips_backbone)
    if args.resume is not None:
        if len(cfg.lambdas) != 1:
            raise InputError("--resume needs exactly one lambda")
        ckpt, _ = run_lambda(cfg, 0, images, args.out / args.name, resume=args.resume)
        print(ckpt)
        return EXIT_OK
    for ck in train(cfg, images, args.out, args.name).checkpoints:
        print(ck)
    return EXIT_OK


def run_compress(args) -> int:
    from .bitstream import compress_image

    x = _load_levels(args.input, args)
    model, meta = _load_checkpoint(args.checkpoint)
    t0 = time.perf_counter()
    b = compress_image(x, model, int(meta.get("lambda_index", 0)), _tile(args))
    data = b.to_bytes()
    enc_ms = (time.perf_counter() - t0) * 1e3
    out = args.output or args.input.with_suffix(".snic")
    out.write_bytes(data)
    print(f"bpp={b.bpp:.6f} enc_ms={enc_ms:.1f}")
    return EXIT_OK


def run_decompress(args) -> int:
    from .bitstream import decompress_image

    if not args.input.exists():
        raise InputError(f"input not found: {args.input}")
    data = args.input.read_bytes()
    model, _ = _load_checkpoint(args.checkpoint)
    t0 = time.perf_counter()
    recon = decompress_image(data, model, _tile(args))
    dec_ms = (time.perf_counter() - t0) * 1e3
    out = args.output or args.input.with_suffix(".png")
    save_grayscale(out, recon)
    if args.euv:
        save_euv(out.with_suffix(".npz"), RawEuvImage(inverse_preprocess(recon, args.clip_lo, args.clip_hi)))
    print(f"width={recon.width} height={recon.height} dec_ms={dec_ms:.1f}")
    return EXIT_OK


def run_eval(args) -> int:
    from .evaluation import NeuralCodec, external_sweep, measure_latency, rd_sweep

    corpus = _corpus(args, args.split)
    cks = _checkpoint_list(args.checkpoints)
    extra = []
    for spec in args.external:
        name, _, qs = spec.partition(":")
        qualities = [float(q) for q in qs.split(",") if q] or [75.0]
        extra.extend(external_sweep(name, qualities, corpus, args.lpips_backbone))
    points = rd_sweep(cks, corpus, args.out, args.lpips_backbone, args.jobs, extra_points=extra)
    for p in points:
        print(f"{p.codec_id} param={p.param:g} bpp={p.bpp:.4f} psnr={p.psnr:.3f} "
              f"msssim_log={p.msssim_log:.3f} lpips={p.lpips:.4f}")
    if args.latency_repeats:
        rows = []
        for ck in cks:
            lat = measure_latency(NeuralCodec.from_checkpoint(ck), corpus[0], args.latency_repeats)
            rows.append({"checkpoint": str(ck), "encode_ms": lat.encode_ms, "decode_ms": lat.decode_ms,
                         "repeats": lat.repeats, **lat.environment})
        with open(args.out / "latency.csv", "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=list(rows[0]))
            w.writeheader()
            w.writerows(rows)
    return EXIT_OK


def _acwe_config(args):
    from .segmentation import AcweConfig

    return AcweConfig(args.alpha, args.mu_len, args.lambda_in, args.lambda_out, args.max_iters, args.tol)


def run_segment(args) -> int:
    from .segmentation import DiskGeometry, save_mask, segment_coronal_holes

    if not args.input.exists():
        raise InputError(f"input not found: {args.input}")
    item = load_any(args.input)
    if not isinstance(item, RawEuvImage):
        raise InputError("segment expects EUV intensities (.npz/.npy/.fits)")
    cfg = _acwe_config(args)
    seg = segment_coronal_holes(item.pixels, DiskGeometry.from_raw(item), cfg, not args.no_limb_correction)
    save_mask(args.output, seg, cfg)
    print(f"area={seg.area} iterations={seg.iterations} converged={seg.converged}")
    return EXIT_OK


def run_impact(args) -> int:
    from .segmentation import IdentityCodec, NeuralIntensityCodec, compression_impact, write_dice_csv

    if args.synthetic:
        rng = np.random.default_rng(args.seed)
        images = [(f"synthetic_{i}", synthetic_sun(args.synthetic_size, rng).raw) for i in range(args.synthetic)]
    else:
        if not args.images:
            raise InputError("need --images or --synthetic")
        images = []
        for p in args.images:
            if not p.exists():
                raise InputError(f"input not found: {p}")
            item = load_any(p)
            if not isinstance(item, RawEuvImage):
                raise InputError(f"{p} does not hold EUV intensities")
            images.append((p.stem, item))
    cfg = _acwe_config(args)
    codecs = []
    for ck in _checkpoint_list(args.checkpoints, args.lambdas):
        model, meta = _load_checkpoint(ck)
        codecs.append((NeuralIntensityCodec(model, int(meta.get("lambda_index", 0)), args.clip_lo,
                                            args.clip_hi, _tile(args)), ck.parent.name))
    if args.identity:
        codecs.append((IdentityCodec(), "identity"))
    rows = []
    for codec, tag in codecs:
        def one(item, codec=codec, tag=tag):
            name, raw = item
            res = compression_impact(raw, codec, cfg, not args.no_limb_correction)
            return (f"{name}@{tag}" if len(codecs) > 1 else name, res.bpp, res.dice)

        with ThreadPoolExecutor(max(1, args.jobs)) as pool:
            rows.extend(pool.map(one, images))
    write_dice_csv(args.out, rows)
    for r in sorted(rows, key=lambda r: (r[1], r[0])):
        print(f"{r[0]} bpp={r[1]:.4f} dice={r[2]:.4f}")
    return EXIT_OK


def run_plot(args) -> int:
    from .evaluation import plot_rd, read_rd_csv

    if not args.csv.exists():
        raise InputError(f"input not found: {args.csv}")
    with open(args.csv, newline="") as fh:
        header = next(csv.reader(fh), [])
    if "psnr" in header:
        paths = plot_rd(read_rd_csv(args.csv), args.out, args.format)
    elif "dice" in header:
        paths = [_plot_dice(args.csv, args.out, args.format)]
    else:
        raise InputError(f"{args.csv} is neither an RD nor a DICE table")
    for p in paths:
        print(p)
    return EXIT_OK


def _plot_dice(path: Path, out_dir: Path, fmt: str) -> Path:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    with open(path, newline="") as fh:
        rows = [r for r in csv.DictReader(fh) if math.isfinite(float(r["bpp"]))]
    rows.sort(key=lambda r: float(r["bpp"]))
    out_dir.mkdir(parents=True, exist_ok=True)
    fig, ax = plt.subplots(figsize=(5, 4))
    ax.plot([float(r["bpp"]) for r in rows], [float(r["dice"]) for r in rows], "o-")
    ax.set_xlabel("bpp")
    ax.set_ylabel("DICE")
    ax.set_ylim(0, 1.02)
    ax.grid(alpha=0.3)
    fig.tight_layout()
    dst = out_dir / f"dice.{fmt}"
    fig.savefig(dst)
    plt.close(fig)
    return dst


COMMANDS = {
    "train": run_train,
    "compress": run_compress,
    "decompress": run_decompress,
    "eval": run_eval,
    "segment": run_segment,
    "impact": run_impact,
    "plot": run_plot,
}


def _exit_code(exc: BaseException) -> int:
    from .bitstream import FormatError, IntegrityError, ModelMismatchError
    from .model import CheckpointError
    from .rans import RansError

    if isinstance(exc, (IntegrityError, FormatError, RansError)):
        return EXIT_INTEGRITY
    if isinstance(exc, (CheckpointError, ModelMismatchError)):
        return EXIT_MODEL
    if isinstance(exc, (InputError, FileNotFoundError)):
        return EXIT_INPUT
    return EXIT_OTHER


def main(argv: Sequence[str] | None = None) -> int:
    try:
        args = parse_args(argv)
    except InputError as exc:
        print(f"snic: error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    torch.manual_seed(args.seed)
    try:
        return COMMANDS[args.command](args)
    except Exception as exc:  # mapped onto the exit-code taxonomy
        code = _exit_code(exc)
        print(f"snic: error: {exc}", file=sys.stderr)
        if code == EXIT_OTHER:
            log.debug("unhandled error", exc_info=True)
        return code


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
