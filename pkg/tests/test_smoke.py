"""Properties of short real training runs (shares the session fixtures in conftest)."""

import numpy as np
import pytest
import torch

from snic.bitstream import HEADER_BYTES, NUM_SLICES, compress_image, estimated_bits
from snic.data import ImageTensor, synthetic_corpus
from snic.model import load_checkpoint
from snic.training import TrainConfig, Trainer, train

pytestmark = pytest.mark.slow


def _loss_drops(history):
    k = max(1, len(history) // 10)
    losses = [h["loss"] for h in history]
    return np.median(losses[-k:]) < np.median(losses[:k])


def test_loss_decreases_on_every_smoke_run(rd_smoke, mid_smoke):
    for hist in rd_smoke.histories + mid_smoke.histories:
        assert _loss_drops(hist)


def test_constant_corpus_rate_drops_and_becomes_header_dominated():
    flat = [ImageTensor(np.full((64, 64), v, dtype=np.float32)) for v in (60.0, 120.0, 200.0)]
    cfg = TrainConfig(lambdas=(0.0125,), epochs=1, steps_per_epoch=200, batch=2, crop=64, preset="tiny",
                      lr_start=1e-3, lr_end=1e-5)
    trainer = Trainer(cfg, 0.0125, total_steps=200)
    before = estimated_bits(flat[1], trainer.model)
    x = torch.from_numpy(np.stack([f.plane for f in flat[:2]]))[:, None]
    for _ in range(200):
        trainer.train_step(x)
    assert estimated_bits(flat[1], trainer.model) < before
    overhead = HEADER_BYTES + (1 + NUM_SLICES) * 4
    for img in flat[:2]:
        assert len(compress_image(img, trainer.model)) < 2 * overhead


def test_desk_config_two_lambdas_five_epochs(tmp_path):
    cfg = TrainConfig(lambdas=(0.0015, 0.055), epochs=5, steps_per_epoch=2, batch=2, crop=32, preset="desk",
                      lr_start=1e-3, lr_end=1e-5)
    res = train(cfg, synthetic_corpus(4, size=32, seed=0), tmp_path)
    assert len(res.checkpoints) == 2
    for ck, lam in zip(res.checkpoints, cfg.lambdas):
        model, meta = load_checkpoint(ck)
        assert meta["lam"] == lam and meta["epoch"] == 5
