"""Training loop, learning-rate annealing and per-lambda checkpointing."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from .data import ImageTensor, sample_crops
from .model import SolarCompressor, build_model, load_checkpoint, save_checkpoint
from .objectives import ConditionalDiscriminator, LossWeights, discriminator_loss, generator_distortion, rd_loss

log = logging.getLogger(__name__)

LAMBDA_GRID = (0.0015, 0.0035, 0.0070, 0.0125, 0.0250, 0.0410, 0.0550)
METRIC_COLUMNS = ("step", "rate_bits", "mse", "lpips", "adv", "lr")


class TrainingError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    lambdas: tuple[float, ...] = LAMBDA_GRID
    epochs: int = 100
    batch: int = 16
    crop: int = 256
    lr_start: float = 1e-4
    lr_end: float = 1.2e-6
    adversarial: bool = False
    seed: int = 0
    preset: str = "paper"
    steps_per_epoch: int | None = None
    recon_weight: float = 1.0
    perc_weight: float = 1.0
    adv_weight: float = 0.01
    lpips_backbone: str = "random"
    grad_clip: float = 1.0
    disc_width: int = 64
    use_wcbam: bool = True
    lambda_indexes: tuple[int, ...] | None = None

    def __post_init__(self):
        self.lambdas = tuple(float(v) for v in self.lambdas)
        if not self.lr_end < self.lr_start:
            raise ValueError("lr_end must be below lr_start")
        for name in ("epochs", "batch", "crop"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if not self.lambdas:
            raise ValueError("empty lambda grid")
        if self.lambda_indexes is not None and len(self.lambda_indexes) != len(self.lambdas):
            raise ValueError("lambda_indexes must match lambdas")

    def weights(self, lam: float) -> LossWeights:
        return LossWeights(lam, self.recon_weight, self.perc_weight,
                           self.adv_weight if self.adversarial else 0.0)

    def index_of(self, k: int) -> int:
        """Grid position recorded in checkpoints/containers for the k-th lambda."""
        if self.lambda_indexes is not None:
            return self.lambda_indexes[k]
        lam = self.lambdas[k]
        for i, g in enumerate(LAMBDA_GRID):
            if math.isclose(lam, g, rel_tol=1e-9):
                return i
        return k

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        names = {f.name for f in fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ValueError(f"unknown training config keys: {sorted(unknown)}")
        return cls(**d)


def anneal_lr(step: int, total_steps: int, cfg: TrainConfig) -> float:
    """Cosine decay from ``lr_start`` at step 0 to ``lr_end`` at ``total_steps``."""
    if total_steps <= 0 or not 0 <= step <= total_steps:
        raise ValueError(f"step {step} outside [0, {total_steps}]")
    return cfg.lr_end + 0.5 * (cfg.lr_start - cfg.lr_end) * (1.0 + math.cos(math.pi * step / total_steps))


def _scalar(v) -> float:
    return float(v.detach()) if torch.is_tensor(v) else float(v)


def _batch_tensor(crops: Sequence[ImageTensor]) -> torch.Tensor:
    return torch.from_numpy(np.stack([c.plane for c in crops]).astype(np.float32))[:, None]


def _step_generator(seed: int, step: int) -> torch.Generator:
    return torch.Generator().manual_seed((seed * 1_000_003 + step) % (2**63))


class Trainer:
    """Owns one model (plus optional discriminator) trained at a single lambda."""

    def __init__(self, cfg: TrainConfig, lam: float, total_steps: int, model: SolarCompressor | None = None):
        self.cfg = cfg
        self.lam = lam
        self.weights = cfg.weights(lam)
        self.total_steps = total_steps
        if model is None:
            from .transforms import PRESETS

            arch = PRESETS[cfg.preset]
            if not cfg.use_wcbam:
                arch = type(arch)(**{**arch.to_dict(), "use_wcbam": False})
            model = build_model(arch, seed=cfg.seed)
        self.model = model
        self.model.train()
        self.opt_g = torch.optim.Adam(self.model.parameters(), lr=cfg.lr_start, betas=(0.9, 0.999), eps=1e-8)
        self.disc = None
        self.opt_d = None
        if cfg.adversarial:
            torch.manual_seed(cfg.seed + 1)
            self.disc = ConditionalDiscriminator(self.model.cfg.M, cfg.disc_width)
            self.opt_d = torch.optim.Adam(self.disc.parameters(), lr=cfg.lr_start, betas=(0.9, 0.999), eps=1e-8)
        self.step = 0

    def _set_lr(self, lr: float) -> None:
        for opt in (self.opt_g, self.opt_d):
            if opt is not None:
                for group in opt.param_groups:
                    group["lr"] = lr

    def train_step(self, x: torch.Tensor) -> dict:
        """One generator update on R + lambda * D_r and, if adversarial, one discriminator update."""
        self.model.train()
        lr = anneal_lr(min(self.step, self.total_steps), self.total_steps, self.cfg)
        self._set_lr(lr)
        out = self.model(x, _step_generator(self.cfg.seed, self.step))
        n_pix = x.shape[0] * x.shape[-2] * x.shape[-1]
        bpp = out["bits"] / n_pix
        parts: dict = {}
        dist = generator_distortion(x, out["x_hat"], out["y"], self.disc, self.weights,
                                    self.cfg.lpips_backbone, parts)
        loss = rd_loss(bpp, dist, self.lam)
        if not torch.isfinite(loss):
            raise TrainingError(
                f"non-finite loss at step {self.step}: bpp={_scalar(bpp)}, mse={_scalar(parts['mse'])}, "
                f"lpips={_scalar(parts['lpips'])}, adv={_scalar(parts['adv'])}"
            )
        self.opt_g.zero_grad(set_to_none=True)
        loss.backward()
        if self.cfg.grad_clip:
            torch.nn.utils.clip_grad_norm_(self.model.parameters(), self.cfg.grad_clip)
        self.opt_g.step()
        disc_loss = float("nan")
        if self.disc is not None:
            d_loss = discriminator_loss(x, out["x_hat"].detach(), out["y"].detach(), self.disc)
            self.opt_d.zero_grad(set_to_none=True)
            d_loss.backward()
            if self.cfg.grad_clip:
                torch.nn.utils.clip_grad_norm_(self.disc.parameters(), self.cfg.grad_clip)
            self.opt_d.step()
            disc_loss = _scalar(d_loss)
        self.step += 1
        return {
            "step": self.step,
            "rate_bits": float(out["bits"].detach()) / x.shape[0],
            "bpp": float(bpp.detach()),
            "mse": _scalar(parts["mse"]),
            "lpips": _scalar(parts["lpips"]),
            "adv": _scalar(parts["adv"]),
            "lr": lr,
            "loss": float(loss.detach()),
            "disc_loss": disc_loss,
        }

    def state(self) -> dict:
        st = {"step": self.step, "opt_g": self.opt_g.state_dict()}
        if self.disc is not None:
            st["disc"] = self.disc.state_dict()
            st["opt_d"] = self.opt_d.state_dict()
        return st

    def load_state(self, st: dict) -> None:
        self.step = int(st["step"])
        self.opt_g.load_state_dict(st["opt_g"])
        if self.disc is not None:
            if "disc" not in st:
                raise TrainingError("checkpoint has no discriminator state for an adversarial run")
            self.disc.load_state_dict(st["disc"])
            self.opt_d.load_state_dict(st["opt_d"])


def steps_per_epoch(cfg: TrainConfig, n_images: int) -> int:
    return cfg.steps_per_epoch or max(1, math.ceil(n_images / cfg.batch))


def run_lambda(cfg: TrainConfig, k: int, images: Sequence[ImageTensor], out_dir: Path,
               resume: Path | None = None, stop_after: int | None = None) -> tuple[Path, list[dict]]:
    """Train the k-th lambda; checkpoints land in ``out_dir/lambda_<idx>/ckpt_<epoch>.pt``."""
    lam = cfg.lambdas[k]
    idx = cfg.index_of(k)
    spe = steps_per_epoch(cfg, len(images))
    total = cfg.epochs * spe
    trainer = Trainer(cfg, lam, total)
    if resume is not None:
        model, meta = load_checkpoint(resume)
        trainer.model.load_state_dict(model.state_dict())
        trainer.load_state(meta["train_state"])
    lam_dir = out_dir / f"lambda_{idx}"
    lam_dir.mkdir(parents=True, exist_ok=True)
    metrics_path = lam_dir / "metrics.csv"
    history: list[dict] = []
    new_file = resume is None or not metrics_path.exists()
    with open(metrics_path, "w" if new_file else "a", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=METRIC_COLUMNS, extrasaction="ignore")
        if new_file:
            writer.writeheader()
        ckpt = resume
        while trainer.step < total:
            step = trainer.step
            crops = sample_crops(images, cfg.crop, cfg.batch, [cfg.seed, step])
            m = trainer.train_step(_batch_tensor(crops))
            history.append(m)
            writer.writerow(m)
            if trainer.step % spe == 0 or trainer.step == total:
                epoch = math.ceil(trainer.step / spe)
                ckpt = save_checkpoint(
                    lam_dir / f"ckpt_{epoch}.pt", trainer.model, lam=lam, lambda_index=idx,
                    epoch=epoch, step=trainer.step, train_config=_plain_config(cfg),
                    train_state=trainer.state(),
                )
                log.info("lambda %.4f epoch %d step %d loss %.4f", lam, epoch, trainer.step, m["loss"])
            if stop_after is not None and trainer.step >= stop_after:
                break
    return ckpt, history


def _plain_config(cfg: TrainConfig) -> dict:
    d = asdict(cfg)
    d["lambdas"] = list(d["lambdas"])
    if d["lambda_indexes"] is not None:
        d["lambda_indexes"] = list(d["lambda_indexes"])
    return d


@dataclass
class TrainResult:
    checkpoints: list[Path] = field(default_factory=list)
    histories: list[list[dict]] = field(default_factory=list)


def train(cfg: TrainConfig, dataset: Sequence[ImageTensor], out_dir: str | Path, name: str = "run") -> TrainResult:
    """Train one model per lambda; returns the final checkpoint of each."""
    if not dataset:
        raise ValueError("empty training set")
    root = Path(out_dir) / name
    res = TrainResult()
    for k in range(len(cfg.lambdas)):
        ckpt, hist = run_lambda(cfg, k, dataset, root)
        res.checkpoints.append(ckpt)
        res.histories.append(hist)
    return res


def latest_checkpoint(lam_dir: str | Path) -> Path | None:
    cks = sorted(Path(lam_dir).glob("ckpt_*.pt"), key=lambda p: int(p.stem.split("_")[1]))
    return cks[-1] if cks else None


def find_checkpoints(root: str | Path) -> list[Path]:
    """Latest checkpoint of every ``lambda_<idx>`` directory under ``root``, by index."""
    root = Path(root)
    if root.is_file():
        return [root]
    dirs = sorted(root.glob("**/lambda_*"), key=lambda p: int(p.name.split("_")[1]))
    out = [c for c in (latest_checkpoint(d) for d in dirs if d.is_dir()) if c is not None]
    if not out:
        out = sorted(root.glob("*.pt"))
    return out
