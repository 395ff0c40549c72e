from datetime import datetime

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from snic.data import (
    ImageTensor,
    RawEuvImage,
    inverse_preprocess,
    level_step,
    load_any,
    pad_to_multiple,
    preprocess_euv,
    read_manifest,
    round_half_away,
    sample_crops,
    save_euv,
    save_grayscale,
    split_by_month,
    synthetic_sun,
)


def test_round_half_away_ties():
    np.testing.assert_array_equal(round_half_away(np.array([-2.5, -1.5, -0.5, 0.5, 1.5, 2.5])),
                                  [-3, -2, -1, 1, 2, 3])


def test_preprocess_endpoints():
    t = preprocess_euv(np.array([[20.0, 2500.0], [1.0, 1e6]]))
    np.testing.assert_array_equal(t.plane, [[0, 255], [0, 255]])
    assert t.data.dtype == np.float32 and t.data.shape == (2, 2, 1)


def test_preprocess_midpoint():
    # geometric mean of the clip range sits at level 127.5, which rounds away from zero
    mid = np.sqrt(20.0 * 2500.0)
    assert preprocess_euv(np.array([[mid]])).plane[0, 0] == 128


def test_preprocess_rejects_bad_clip():
    with pytest.raises(ValueError):
        preprocess_euv(np.ones((2, 2)), clip_lo=100, clip_hi=10)
    with pytest.raises(ValueError):
        preprocess_euv(np.ones((2, 2)), clip_lo=0, clip_hi=10)


def test_inverse_rejects_out_of_range_levels():
    with pytest.raises(ValueError):
        inverse_preprocess(np.array([[256.0]]))


@settings(max_examples=200, deadline=None)
@given(st.floats(20.0, 2500.0))
def test_round_trip_within_one_level(v):
    back = inverse_preprocess(preprocess_euv(np.array([[v]])))[0, 0]
    step = level_step()
    assert abs(np.log10(back) - np.log10(v)) <= 0.5 * step + 1e-12


def test_pad_to_multiple_replicates_edges():
    t = ImageTensor(np.arange(12, dtype=np.float32).reshape(3, 4))
    p = pad_to_multiple(t, 8)
    assert p.height == 8 and p.width == 8
    assert (p.orig_height, p.orig_width) == (3, 4)
    np.testing.assert_array_equal(p.plane[7, :4], t.plane[2])
    np.testing.assert_array_equal(p.cropped().plane, t.plane)


def test_split_by_month():
    recs = [("a", datetime(2011, m, 1)) for m in range(1, 13)]
    split = split_by_month(recs)
    assert len(split.train) == 8 and len(split.test) == 4
    assert all(r[1].month >= 9 for r in split.test)


def test_read_manifest(tmp_path):
    (tmp_path / "m.csv").write_text("# comment\nimg1.npz,2012-03-01T00:00:00\n/abs/img2.npz,2012-10-01T00:00:00Z\n")
    recs = read_manifest(tmp_path / "m.csv")
    assert recs[0].path == str(tmp_path / "img1.npz")
    assert recs[1].timestamp.month == 10
    split = split_by_month(recs)
    assert [r.path for r in split.test] == ["/abs/img2.npz"]


def test_sample_crops_deterministic():
    imgs = [ImageTensor(np.random.default_rng(i).random((32, 32)).astype(np.float32)) for i in range(3)]
    a = sample_crops(imgs, 16, 4, [0, 5])
    b = sample_crops(imgs, 16, 4, [0, 5])
    for x, y in zip(a, b):
        np.testing.assert_array_equal(x.plane, y.plane)
    with pytest.raises(ValueError):
        sample_crops(imgs, 64, 1, 0)


def test_euv_and_png_io(tmp_path):
    s = synthetic_sun(64, 0)
    save_euv(tmp_path / "s.npz", s.raw)
    raw = load_any(tmp_path / "s.npz")
    assert isinstance(raw, RawEuvImage)
    np.testing.assert_allclose(raw.pixels, s.raw.pixels)
    assert raw.disk_radius == pytest.approx(s.raw.disk_radius)
    t = preprocess_euv(raw)
    save_grayscale(tmp_path / "s.png", t)
    np.testing.assert_array_equal(load_any(tmp_path / "s.png").plane, t.plane)


def test_synthetic_sun_mask_on_disk():
    s = synthetic_sun(128, 3, noise=0.0)
    assert s.ch_mask.any()
    assert np.all(s.raw.pixels[s.ch_mask] == 40.0)
