import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from snic.rans import (
    TOTAL,
    CdfTable,
    RansError,
    TableSet,
    build_cdf_table,
    quantize_pmf,
    rans_decode,
    rans_encode,
    table_from_pmf,
)
from snic.quantization import discretized_gaussian_pmf


def test_quantize_pmf_invariants():
    cdf = quantize_pmf(np.array([0.5, 0.25, 0.25 - 1e-9, 1e-12]))
    f = np.diff(cdf)
    assert cdf[0] == 0 and cdf[-1] == TOTAL
    assert np.all(f >= 1)
    assert len(f) == 5  # four symbols plus the escape slot


def test_quantize_pmf_deterministic():
    p = np.random.default_rng(0).dirichlet(np.ones(300))
    np.testing.assert_array_equal(quantize_pmf(p), quantize_pmf(p.copy()))


def test_unit_gaussian_table_centre_frequency():
    t = build_cdf_table(0.0, 1.0)
    exact = discretized_gaussian_pmf(0, 0.0, 1.0) * TOTAL
    assert abs(t.frequency(0) - exact) <= 2
    assert (t.s_min, t.s_max) == (-5, 5)


def test_table_validation():
    with pytest.raises(ValueError):
        CdfTable(0, 1, np.array([0, 10, 10, TOTAL]))
    with pytest.raises(ValueError):
        CdfTable(0, 1, np.array([0, 10, TOTAL]))


def test_empty_stream():
    t = build_cdf_table(0.0, 1.0)
    data = rans_encode(np.array([], dtype=np.int64), [t], np.array([], dtype=np.int32))
    assert len(data) == 4
    assert rans_decode(data, [t], indexes=np.array([], dtype=np.int32)).size == 0


def test_round_trip_with_escapes():
    rng = np.random.default_rng(0)
    tables = [build_cdf_table(0.0, s) for s in (0.11, 1.0, 8.0)]
    idx = rng.integers(0, 3, 5000).astype(np.int32)
    sym = np.round(rng.normal(0, 3, 5000)).astype(np.int64)
    sym[::97] = rng.integers(-10**6, 10**6, len(sym[::97]))
    data = rans_encode(sym, tables, idx)
    np.testing.assert_array_equal(rans_decode(data, tables, indexes=idx), sym)


def test_escape_range_enforced():
    t = build_cdf_table(0.0, 1.0)
    with pytest.raises(RansError):
        rans_encode(np.array([2**40]), [t], np.array([0]))


def test_truncated_and_corrupt_streams_are_detected():
    rng = np.random.default_rng(1)
    t = build_cdf_table(0.0, 2.0)
    sym = np.round(rng.normal(0, 2, 2000)).astype(np.int64)
    idx = np.zeros(len(sym), dtype=np.int32)
    data = rans_encode(sym, [t], idx)
    with pytest.raises(RansError):
        rans_decode(data[:-5], [t], indexes=idx)
    with pytest.raises(RansError):
        rans_decode(data + b"\x00", [t], indexes=idx)


def test_near_entropy_rate():
    rng = np.random.default_rng(2)
    sigma = 4.0
    t = build_cdf_table(0.0, sigma)
    sym = np.round(rng.normal(0, sigma, 200_000)).astype(np.int64)
    data = rans_encode(sym, [t], np.zeros(len(sym), dtype=np.int32))
    p = discretized_gaussian_pmf(sym, 0.0, sigma)
    ideal = -np.log2(p).sum() / 8
    assert len(data) <= ideal * 1.01 + 8


def test_table_from_pmf_trims_tails():
    pmf = discretized_gaussian_pmf(np.arange(-255, 256), 3.0, 2.0)
    t = table_from_pmf(pmf, -255)
    assert t.s_min > -255 and t.s_max < 255
    assert t.s_min <= 3 <= t.s_max


def test_tableset_pads_to_common_width():
    ts = TableSet.from_tables([build_cdf_table(0, 0.2), build_cdf_table(0, 30)])
    assert ts.cdfs.shape[0] == 2
    assert np.all(ts.cdfs[0, ts.lengths[0] + 1:] == TOTAL)


@settings(max_examples=60, deadline=None)
@given(st.lists(st.integers(-300, 300), min_size=1, max_size=400), st.floats(0.11, 50), st.floats(-5, 5))
def test_round_trip_property(symbols, sigma, mu):
    t = build_cdf_table(mu, sigma)
    sym = np.array(symbols, dtype=np.int64)
    idx = np.zeros(len(sym), dtype=np.int32)
    np.testing.assert_array_equal(rans_decode(rans_encode(sym, [t], idx), [t], indexes=idx), sym)
