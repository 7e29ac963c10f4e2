"""File format round-trips: PPM, tensor, sparse map, bundle, dumps."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from camotex import io


def test_ppm_round_trip_exact_for_quantized(tmp_path):
    rng = np.random.default_rng(0)
    img = (rng.integers(0, 256, (9, 13, 3)) / 255.0).astype(np.float32)
    p = tmp_path / "a.ppm"
    io.write_ppm(p, img)
    back = io.read_ppm(p)
    assert back.shape == img.shape
    np.testing.assert_allclose(back, img, atol=1e-7)


def test_ppm_quantization_error_bounded(tmp_path):
    rng = np.random.default_rng(1)
    img = rng.uniform(0, 1, (16, 16, 3)).astype(np.float32)
    p = tmp_path / "b.ppm"
    io.write_ppm(p, img)
    back = io.read_ppm(p)
    assert np.abs(back - img).max() <= 0.5 / 255.0 + 1e-7


def test_ppm_header(tmp_path):
    img = np.zeros((4, 6, 3), np.float32)
    p = tmp_path / "c.ppm"
    io.write_ppm(p, img)
    raw = p.read_bytes()
    assert raw.startswith(b"P6\n6 4\n255\n")
    assert len(raw) == len(b"P6\n6 4\n255\n") + 4 * 6 * 3


@pytest.mark.parametrize("shape", [(3,), (4, 5), (2, 3, 4), (2, 2, 2, 2)])
def test_tnsr_round_trip(tmp_path, shape):
    rng = np.random.default_rng(2)
    arr = rng.standard_normal(shape).astype(np.float32)
    p = tmp_path / "t.tnsr"
    io.write_tnsr(p, arr)
    back = io.read_tnsr(p)
    assert back.shape == arr.shape
    assert back.dtype == np.float32
    np.testing.assert_array_equal(back, arr)


def test_tnsr_rejects_bad_magic(tmp_path):
    p = tmp_path / "bad.tnsr"
    p.write_bytes(b"NOPE" + b"\x00" * 16)
    with pytest.raises(ValueError):
        io.read_tnsr(p)


def test_rmap_round_trip(tmp_path):
    counts = np.array([0, 4, 0, 2, 0, 0], np.int64)
    idx = np.array([0, 1, 2, 3, 7, 8], np.int64)
    wts = np.array([0.1, 0.2, 0.3, 0.4, 0.5, 0.5], np.float32)
    p = tmp_path / "m.rmap"
    io.write_rmap(p, counts, idx, wts)
    c2, i2, w2 = io.read_rmap(p)
    np.testing.assert_array_equal(c2, counts)
    np.testing.assert_array_equal(i2, idx)
    np.testing.assert_array_equal(w2, wts)


def test_rmap_all_zero_taps(tmp_path):
    counts = np.zeros(5, np.int64)
    p = tmp_path / "z.rmap"
    io.write_rmap(p, counts, np.zeros(0, np.int64), np.zeros(0, np.float32))
    c2, i2, w2 = io.read_rmap(p)
    np.testing.assert_array_equal(c2, counts)
    assert i2.size == 0 and w2.size == 0


@settings(max_examples=25, deadline=None)
@given(st.lists(st.integers(0, 5), min_size=1, max_size=40),
       st.integers(0, 2 ** 31 - 1))
def test_rmap_round_trip_property(tmp_path_factory, counts_list, seed):
    rng = np.random.default_rng(seed)
    counts = np.asarray(counts_list, np.int64)
    n = int(counts.sum())
    idx = rng.integers(0, 1 << 20, n).astype(np.int64)
    wts = rng.uniform(0, 1, n).astype(np.float32)
    p = tmp_path_factory.mktemp("rm") / "r.rmap"
    io.write_rmap(p, counts, idx, wts)
    c2, i2, w2 = io.read_rmap(p)
    np.testing.assert_array_equal(c2, counts)
    np.testing.assert_array_equal(i2, idx)
    np.testing.assert_array_equal(w2, wts)


def test_bundle_round_trip(tmp_path):
    rng = np.random.default_rng(3)
    tensors = {"a": rng.standard_normal((2, 3)).astype(np.float32),
               "b": rng.standard_normal(5).astype(np.float32)}
    meta = {"kind": "test", "epochs": 4, "values": [1.5, 2.5]}
    p = tmp_path / "x.tnsb"
    io.write_bundle(p, tensors, meta)
    t2, m2 = io.read_bundle(p)
    assert set(t2) == {"a", "b"}
    np.testing.assert_array_equal(t2["a"], tensors["a"])
    np.testing.assert_array_equal(t2["b"], tensors["b"])
    assert m2 == meta


def test_detections_round_trip(tmp_path):
    rows = [("img_a", 0, 10.5, 20.25, 30.0, 40.0, 0.875),
            ("img_b", 2, 1.0, 2.0, 3.0, 4.0, 0.125)]
    p = tmp_path / "d.txt"
    io.write_detections(p, rows)
    back = io.read_detections(p)
    assert back == rows


def test_detections_bad_line(tmp_path):
    p = tmp_path / "bad.txt"
    p.write_text("img 0 1 2 3\n")
    with pytest.raises(ValueError, match="7 fields"):
        io.read_detections(p)


def test_json_stable_output(tmp_path):
    obj = {"b": 1, "a": {"d": 2, "c": [3, 4]}}
    p1 = tmp_path / "1.json"
    p2 = tmp_path / "2.json"
    io.write_json(p1, obj)
    io.write_json(p2, {"a": {"c": [3, 4], "d": 2}, "b": 1})
    assert p1.read_bytes() == p2.read_bytes()
    assert io.read_json(p1) == obj
