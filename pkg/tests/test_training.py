import csv
import math

import numpy as np
import pytest
import torch

from snic.data import synthetic_corpus
from snic.model import load_checkpoint
from snic.objectives import (
    ConditionalDiscriminator,
    LossWeights,
    discriminator_loss,
    generator_distortion,
    get_extractor,
    lpips_distance,
    rd_loss,
)
from snic.training import (
    METRIC_COLUMNS,
    TrainConfig,
    Trainer,
    anneal_lr,
    find_checkpoints,
    latest_checkpoint,
    run_lambda,
)


def test_loss_weights_validation():
    with pytest.raises(ValueError):
        LossWeights(lam=-1.0)


def test_rd_loss_combines_terms():
    assert rd_loss(0.5, 100.0, 0.01) == pytest.approx(1.5)


def test_lpips_zero_at_identity_and_symmetric():
    x = torch.rand(2, 1, 32, 32) * 255
    y = torch.rand(2, 1, 32, 32) * 255
    assert float(lpips_distance(x, x)) == 0.0
    assert float(lpips_distance(x, y)) == pytest.approx(float(lpips_distance(y, x)), rel=1e-6)
    assert float(lpips_distance(x, y)) > 0


def test_unknown_backbone():
    with pytest.raises(KeyError):
        get_extractor("no-such-net")


def test_generator_distortion_parts():
    torch.manual_seed(0)
    x = torch.rand(1, 1, 32, 32) * 255
    xh = x + torch.randn_like(x)
    y = torch.randn(1, 20, 2, 2)
    disc = ConditionalDiscriminator(20, width=8)
    parts = {}
    w = LossWeights(0.01, recon=1.0, perc=2.0, adv=0.5)
    d = generator_distortion(x, xh, y, disc, w, parts=parts)
    expected = parts["mse"] + 2.0 * parts["lpips"] + 0.5 * parts["adv"]
    assert float(d.detach()) == pytest.approx(float(expected), rel=1e-6)
    with pytest.raises(ValueError):
        generator_distortion(x, xh, y, None, w)


def test_discriminator_loss_finite_and_shaped():
    disc = ConditionalDiscriminator(20, width=8)
    x = torch.rand(2, 1, 32, 32) * 255
    y = torch.randn(2, 20, 2, 2)
    assert disc(x, y).shape == (2, 1, 4, 4)
    loss = discriminator_loss(x, x.flip(-1), y, disc)
    assert math.isfinite(float(loss.detach())) and float(loss.detach()) > 0


def test_anneal_lr_endpoints():
    cfg = TrainConfig(lr_start=1e-4, lr_end=1e-6)
    assert anneal_lr(0, 100, cfg) == pytest.approx(1e-4)
    assert anneal_lr(100, 100, cfg) == pytest.approx(1e-6)
    assert anneal_lr(50, 100, cfg) == pytest.approx(0.5 * (1e-4 + 1e-6))
    lrs = [anneal_lr(s, 100, cfg) for s in range(101)]
    assert all(a >= b for a, b in zip(lrs, lrs[1:]))
    with pytest.raises(ValueError):
        anneal_lr(101, 100, cfg)


def test_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(lr_start=1e-6, lr_end=1e-4)
    with pytest.raises(ValueError):
        TrainConfig.from_dict({"nope": 1})
    assert TrainConfig(lambdas=(0.0125,)).index_of(0) == 3


def _small_cfg(**kw):
    base = dict(lambdas=(0.0125,), epochs=2, steps_per_epoch=2, batch=2, crop=32, preset="tiny",
                lr_start=1e-3, lr_end=1e-5)
    base.update(kw)
    return TrainConfig(**base)


def test_trainer_step_reports_metrics():
    imgs = synthetic_corpus(4, size=32, seed=0)
    tr = Trainer(_small_cfg(), 0.0125, total_steps=4)
    x = torch.from_numpy(np.stack([i.plane for i in imgs[:2]]))[:, None]
    m = tr.train_step(x)
    assert set(METRIC_COLUMNS) <= set(m)
    assert m["rate_bits"] > 0 and m["lr"] == pytest.approx(1e-3)


def test_adversarial_step_updates_discriminator():
    imgs = synthetic_corpus(2, size=32, seed=0)
    tr = Trainer(_small_cfg(adversarial=True, disc_width=8), 0.0125, total_steps=2)
    before = [p.clone() for p in tr.disc.parameters()]
    x = torch.from_numpy(np.stack([i.plane for i in imgs]))[:, None]
    m = tr.train_step(x)
    assert math.isfinite(m["disc_loss"])
    assert any(not torch.equal(a, b) for a, b in zip(before, tr.disc.parameters()))


def test_run_lambda_writes_checkpoints_and_resumes(tmp_path):
    imgs = synthetic_corpus(4, size=32, seed=0)
    cfg = _small_cfg()
    ck_full, hist_full = run_lambda(cfg, 0, imgs, tmp_path / "full")
    assert ck_full.name == "ckpt_2.pt"
    with open(tmp_path / "full" / "lambda_3" / "metrics.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert len(rows) == 4 and tuple(rows[0]) == METRIC_COLUMNS

    ck_half, _ = run_lambda(cfg, 0, imgs, tmp_path / "part", stop_after=2)
    ck_res, hist_res = run_lambda(cfg, 0, imgs, tmp_path / "part", resume=ck_half)
    assert [h["step"] for h in hist_res] == [3, 4]
    a, _ = load_checkpoint(ck_full)
    b, _ = load_checkpoint(ck_res)
    for (k, va), vb in zip(a.state_dict().items(), b.state_dict().values()):
        torch.testing.assert_close(va, vb, msg=k)
    assert latest_checkpoint(tmp_path / "full" / "lambda_3") == ck_full
    assert find_checkpoints(tmp_path / "full") == [ck_full]
