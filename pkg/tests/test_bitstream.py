import struct

import numpy as np
import pytest
import torch

from snic.bitstream import (
    HEADER_BYTES,
    NUM_SLICES,
    Bitstream,
    FormatError,
    IntegrityError,
    ModelMismatchError,
    compress_image,
    decompress_image,
    estimated_bits,
    scale_indexes,
    scale_table,
    simulate_reconstruction,
)
from snic.data import ImageTensor, preprocess_euv, synthetic_sun
from snic.model import CheckpointError, build_model, load_checkpoint, model_fingerprint, save_checkpoint


@pytest.fixture(scope="module")
def model():
    return build_model("tiny", seed=0).eval()


@pytest.fixture(scope="module")
def image():
    return preprocess_euv(synthetic_sun(96, 4).raw.pixels[:90, :70])


def test_header_layout():
    assert HEADER_BYTES == struct.calcsize("<4sBBBIII10II") == 63


def test_round_trip_matches_simulation(model, image):
    b = compress_image(image, model, lambda_index=3)
    assert (b.orig_w, b.orig_h, b.lambda_index) == (70, 90, 3)
    assert b.model_id == model_fingerprint(model)
    data = b.to_bytes()
    assert len(data) == len(b)
    assert b.bpp == pytest.approx(8 * len(data) / (70 * 90))
    rec = decompress_image(data, model)
    assert (rec.height, rec.width) == (90, 70)
    np.testing.assert_array_equal(rec.plane, simulate_reconstruction(image, model).plane)
    assert np.all(rec.plane == np.round(rec.plane))
    assert rec.plane.min() >= 0 and rec.plane.max() <= 255


def test_deterministic(model, image):
    a = compress_image(image, model).to_bytes()
    b = compress_image(image, model).to_bytes()
    assert a == b
    np.testing.assert_array_equal(decompress_image(a, model).plane, decompress_image(b, model).plane)


def test_parse_round_trip(model, image):
    b = compress_image(image, model)
    c = Bitstream.from_bytes(b.to_bytes())
    assert c == b
    assert len(c.slice_payloads) == NUM_SLICES


def test_crc_detects_flipped_payload_byte(model, image):
    data = bytearray(compress_image(image, model).to_bytes())
    data[HEADER_BYTES + 2] ^= 0x10
    with pytest.raises(IntegrityError):
        decompress_image(bytes(data), model)


def test_bad_magic_and_version(model, image):
    data = compress_image(image, model).to_bytes()
    with pytest.raises(FormatError):
        Bitstream.from_bytes(b"XXXX" + data[4:])
    with pytest.raises(FormatError):
        Bitstream.from_bytes(data[:4] + b"\x09" + data[5:])
    with pytest.raises(FormatError):
        Bitstream.from_bytes(data[:10])
    with pytest.raises(IntegrityError):
        Bitstream.from_bytes(data[:-1])


def test_model_mismatch(model, image):
    other = build_model("tiny", seed=1).eval()
    if model_fingerprint(other) == model_fingerprint(model):
        other = build_model("tiny", seed=2).eval()
    with pytest.raises(ModelMismatchError):
        decompress_image(compress_image(image, model).to_bytes(), other)


def test_constant_image_is_header_dominated(model):
    img = ImageTensor(np.full((128, 128), 80.0, dtype=np.float32))
    b = compress_image(img, model)
    assert len(b) < 4 * (HEADER_BYTES + 11 * 4)


def test_tiled_matches_untiled_codes(model):
    img = preprocess_euv(synthetic_sun(128, 2).raw)
    a = compress_image(img, model, tile=None)
    b = compress_image(img, model, tile=64)
    assert len(a) == pytest.approx(len(b), rel=0.05)
    assert decompress_image(b.to_bytes(), model, tile=64).height == 128


def test_estimated_bits_close_to_actual(model, image):
    b = compress_image(image, model)
    est = estimated_bits(image, model)
    overhead = 8 * (HEADER_BYTES + 11 * 4)
    assert abs(8 * len(b) - est) <= 0.03 * est + overhead


def test_scale_index_is_smallest_not_below():
    s = scale_table()
    idx = scale_indexes(torch.tensor([0.11, 0.2, 300.0, float(s[5])]))
    assert idx[0] == 0 and idx[2] == len(s) - 1 and idx[3] == 5
    assert s[idx[1]] >= 0.2 - 1e-6 and s[idx[1] - 1] < 0.2


def test_checkpoint_round_trip(tmp_path, model, image):
    p = save_checkpoint(tmp_path / "m.pt", model, lam=0.01, lambda_index=2)
    m2, meta = load_checkpoint(p)
    assert meta["lam"] == 0.01 and meta["model_id"] == model_fingerprint(model)
    assert compress_image(image, m2).to_bytes() == compress_image(image, model).to_bytes()


def test_checkpoint_errors(tmp_path, model):
    bad = tmp_path / "bad.pt"
    bad.write_bytes(b"not a checkpoint")
    with pytest.raises(CheckpointError):
        load_checkpoint(bad)
    p = save_checkpoint(tmp_path / "m.pt", model)
    payload = torch.load(p, weights_only=True)
    payload["model_id"] = (payload["model_id"] + 1) % 256
    torch.save(payload, tmp_path / "tampered.pt")
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "tampered.pt")
