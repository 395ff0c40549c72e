import os
from pathlib import Path

import numpy as np
import pytest

from snic import cli
from snic.bitstream import HEADER_BYTES, MAGIC
from snic.data import RawEuvImage, save_euv, save_grayscale, synthetic_sun
from snic.model import build_model, save_checkpoint

SNAPSHOTS = Path(__file__).parent / "snapshots"
SUBCOMMANDS = ("train", "compress", "decompress", "eval", "segment", "impact", "plot")


def _help(argv, capsys):
    assert cli.main(argv) == 0
    return capsys.readouterr().out


@pytest.mark.parametrize("sub", (None,) + SUBCOMMANDS)
def test_help_snapshot(sub, capsys, monkeypatch):
    monkeypatch.setenv("COLUMNS", "100")
    argv = ["--help"] if sub is None else [sub, "--help"]
    text = _help(argv, capsys)
    snap = SNAPSHOTS / f"help_{sub or 'main'}.txt"
    if os.environ.get("SNIC_UPDATE_SNAPSHOTS"):
        snap.parent.mkdir(exist_ok=True)
        snap.write_text(text)
    assert text == snap.read_text()


@pytest.fixture(scope="module")
def ckpt(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    return save_checkpoint(root / "lambda_3" / "ckpt_1.pt", build_model("tiny", seed=0), lam=0.0125, lambda_index=3)


@pytest.fixture
def image(tmp_path):
    p = tmp_path / "img.png"
    save_grayscale(p, np.random.default_rng(0).integers(0, 256, (40, 56)).astype(np.float32))
    return p


def test_compress_decompress_round_trip(tmp_path, ckpt, image, capsys):
    out = tmp_path / "a.snic"
    assert cli.main(["compress", str(image), "-c", str(ckpt), "-o", str(out)]) == 0
    line = capsys.readouterr().out
    assert line.startswith("bpp=")
    assert float(line.split()[0][4:]) == pytest.approx(8 * out.stat().st_size / (40 * 56), rel=1e-5)
    assert out.read_bytes()[:4] == MAGIC and out.stat().st_size > HEADER_BYTES
    rec = tmp_path / "a.png"
    assert cli.main(["decompress", str(out), "-c", str(ckpt), "-o", str(rec)]) == 0
    assert "width=56 height=40" in capsys.readouterr().out
    assert rec.exists()
    again = tmp_path / "b.snic"
    assert cli.main(["compress", str(image), "-c", str(ckpt), "-o", str(again)]) == 0
    assert again.read_bytes() == out.read_bytes()


def test_euv_round_trip_writes_intensities(tmp_path, ckpt):
    raw = synthetic_sun(64, 0).raw
    src = tmp_path / "sun.npz"
    save_euv(src, raw)
    out = tmp_path / "sun.snic"
    assert cli.main(["compress", str(src), "--euv", "-c", str(ckpt), "-o", str(out)]) == 0
    assert cli.main(["decompress", str(out), "--euv", "-c", str(ckpt), "-o", str(tmp_path / "r.png")]) == 0
    assert (tmp_path / "r.npz").exists()


def test_exit_codes(tmp_path, ckpt, image):
    assert cli.main(["compress", str(tmp_path / "missing.png"), "-c", str(ckpt)]) == 2
    bad = tmp_path / "bad.pt"
    bad.write_bytes(b"junk")
    assert cli.main(["compress", str(image), "-c", str(bad)]) == 3
    out = tmp_path / "a.snic"
    assert cli.main(["compress", str(image), "-c", str(ckpt), "-o", str(out)]) == 0
    data = bytearray(out.read_bytes())
    data[-1] ^= 0xFF
    out.write_bytes(bytes(data))
    assert cli.main(["decompress", str(out), "-c", str(ckpt)]) == 4
    other = save_checkpoint(tmp_path / "o.pt", build_model("tiny", seed=7))
    out.write_bytes(bytes(data[:-1]) + bytes([data[-1] ^ 0xFF]))
    assert cli.main(["decompress", str(out), "-c", str(other)]) == 3
    assert cli.main(["no-such-command"]) == 2


def test_config_file_defaults_below_flags(tmp_path):
    cfg = tmp_path / "c.cfg"
    cfg.write_text("# comment\nalpha = 0.5\nmax-iters = 7\nno_limb_correction = yes\n")
    args = cli.parse_args(["segment", "x.npz", "-o", "m.png", "--config", str(cfg), "--alpha", "0.2"])
    assert args.alpha == 0.2 and args.max_iters == 7 and args.no_limb_correction is True
    js = tmp_path / "c.json"
    js.write_text('{"lambdas": [0.01, 0.02], "epochs": 3}')
    args = cli.parse_args(["train", "--out", "o", "--config", str(js)])
    assert args.lambdas == [0.01, 0.02] and args.epochs == 3


def test_config_unknown_key_is_input_error(tmp_path, capsys):
    cfg = tmp_path / "c.cfg"
    cfg.write_text("bogus = 1\n")
    assert cli.main(["segment", "x.npz", "-o", "m.png", "--config", str(cfg)]) == 2
    assert "bogus" in capsys.readouterr().err


def test_segment_and_plot(tmp_path, capsys):
    src = tmp_path / "sun.npz"
    save_euv(src, synthetic_sun(128, 1).raw)
    assert cli.main(["segment", str(src), "-o", str(tmp_path / "m.png")]) == 0
    assert (tmp_path / "m.png").exists() and (tmp_path / "m.json").exists()
    png = tmp_path / "img.png"
    save_grayscale(png, np.zeros((8, 8), np.float32))
    assert cli.main(["segment", str(png), "-o", str(tmp_path / "n.png")]) == 2
    csv = tmp_path / "d.csv"
    csv.write_text("image_id,bpp,dice\na,0.1,0.8\nb,0.3,0.9\n")
    assert cli.main(["plot", str(csv), "--out", str(tmp_path / "plots")]) == 0
    assert (tmp_path / "plots" / "dice.png").stat().st_size > 0


def test_impact_identity_row(tmp_path, ckpt, capsys):
    out = tmp_path / "dice.csv"
    rc = cli.main(["impact", "--checkpoints", str(ckpt), "--synthetic", "1", "--synthetic-size", "64",
                   "--identity", "--out", str(out)])
    assert rc == 0
    rows = out.read_text().splitlines()
    assert rows[0] == "image_id,bpp,dice"
    assert any(r.endswith(",16.0,1.0") for r in rows[1:])


def test_eval_synthetic(tmp_path, ckpt):
    rc = cli.main(["eval", "--checkpoints", str(ckpt.parent.parent), "--synthetic", "1",
                   "--synthetic-size", "64", "--out", str(tmp_path)])
    assert rc == 0
    assert (tmp_path / "rd.csv").read_text().startswith("codec_id,param,bpp")


def test_train_tiny(tmp_path):
    rc = cli.main(["train", "--out", str(tmp_path), "--synthetic", "2", "--synthetic-size", "32", "--preset", "tiny",
                   "--lambdas", "0.0125", "--epochs", "1", "--steps-per-epoch", "1", "--batch", "1", "--crop", "32"])
    assert rc == 0
    assert (tmp_path / "run" / "lambda_3" / "ckpt_1.pt").exists()


def test_raw_input_of_wrong_kind(tmp_path, ckpt):
    src = tmp_path / "s.npz"
    save_euv(src, RawEuvImage(np.full((32, 32), 100.0)))
    assert cli.main(["compress", str(src), "-c", str(ckpt)]) == 2
