"""Session-scoped smoke-trained models shared by the acceptance and integration tests."""

import time
from dataclasses import dataclass, field
from pathlib import Path

import pytest
import torch

from snic.data import synthetic_corpus
from snic.training import TrainConfig, run_lambda

RD_LAMBDAS = (0.0015, 0.0125, 0.0550)
NUM_CRITERIA = 14
_RESULTS = pytest.StashKey[dict]()


@dataclass
class SmokeRun:
    checkpoints: list[Path]
    histories: list[list[dict]]
    seconds: float
    lambdas: tuple[float, ...] = field(default=())


def _train(cfg: TrainConfig, images, out: Path) -> SmokeRun:
    threads = torch.get_num_threads()
    torch.set_num_threads(1)  # single-threaded kernels keep the runs reproducible across machines
    try:
        t0 = time.perf_counter()
        cks, hists = [], []
        for k in range(len(cfg.lambdas)):
            ck, hist = run_lambda(cfg, k, images, out)
            cks.append(ck)
            hists.append(hist)
        return SmokeRun(cks, hists, time.perf_counter() - t0, cfg.lambdas)
    finally:
        torch.set_num_threads(threads)


@pytest.fixture(scope="session")
def rd_smoke(tmp_path_factory) -> SmokeRun:
    """Three lambdas, 200 steps each, on a 64x64 synthetic corpus."""
    cfg = TrainConfig(lambdas=RD_LAMBDAS, epochs=1, steps_per_epoch=200, batch=8, crop=64,
                      preset="desk", lr_start=1e-3, lr_end=1e-5)
    return _train(cfg, synthetic_corpus(64, size=64, seed=0), tmp_path_factory.mktemp("rd_smoke"))


@pytest.fixture(scope="session")
def mid_smoke(tmp_path_factory) -> SmokeRun:
    """The middle lambda trained longer on 128x128 suns for the segmentation-impact check."""
    cfg = TrainConfig(lambdas=(RD_LAMBDAS[1],), epochs=4, steps_per_epoch=200, batch=8, crop=64,
                      preset="desk", lr_start=1e-3, lr_end=1e-5)
    return _train(cfg, synthetic_corpus(64, size=128, seed=0), tmp_path_factory.mktemp("mid_smoke"))


@pytest.fixture
def criterion(request):
    """``criterion(n, ok, detail)`` records and prints one acceptance line, then asserts ``ok``."""
    results = request.config.stash.setdefault(_RESULTS, {})

    def record(n: int, ok: bool, detail: str) -> None:
        line = f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}"
        results[n] = line
        print(line)
        assert ok, line

    return record


def pytest_terminal_summary(terminalreporter, config):
    results = config.stash.get(_RESULTS, {})
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for n in range(1, NUM_CRITERIA + 1):
        terminalreporter.write_line(results.get(n, f"criterion {n:2d}: NO RESULT  (test errored, was deselected or did not run)"))
