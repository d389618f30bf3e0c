import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mpcflow import data


def test_hexagon_points_lie_on_boundary():
    pts = data.sample_hexagon(2000, seed=0)
    assert np.max(data.distance_to_hexagon(pts)) < 1e-12


def test_hexagon_mean_near_origin():
    pts = data.sample_hexagon(100_000, seed=1)
    assert np.all(np.abs(pts.mean(axis=0)) < 0.02)


def test_hexagon_edges_uniform():
    pts = data.sample_hexagon(100_000, seed=2)
    counts = np.bincount(data.hexagon_edge_index(pts), minlength=6) / len(pts)
    assert np.all(np.abs(counts * 6 - 1.0) < 0.03)


def test_hexagon_corner_is_a_vertex():
    c = data.hexagon_corner("lower-right")
    np.testing.assert_allclose(c, [1.0, -np.sqrt(3.0)])
    assert data.distance_to_hexagon(c[None])[0] < 1e-12


def test_base_samples_deterministic_and_distinct():
    a, b = data.sample_base(10, 3, seed=4), data.sample_base(10, 3, seed=4)
    assert a.tobytes() == b.tobytes()
    assert not np.array_equal(a[0], data.sample_base(10, 3, seed=5)[0])


def test_base_moments():
    x = data.sample_base(500_000, 2, seed=0)
    assert abs(x.mean()) < 0.02
    assert abs(x.std() - 1.0) < 0.02


def test_discs_range_and_determinism():
    a = data.sample_discs16(50, seed=3)
    assert a.shape == (50, 16, 16)
    assert a.min() >= 0.0 and a.max() <= 1.0
    assert a.tobytes() == data.sample_discs16(50, seed=3).tobytes()


def test_discs_mean_image_spread():
    mean = data.sample_discs16(10_000, seed=9).mean(axis=0)
    center, border = mean[5:11, 5:11].mean(), np.concatenate([mean[0], mean[-1], mean[:, 0], mean[:, -1]]).mean()
    assert 1 / 3 < center / border < 3


def test_pgm_round_trip(tmp_path, rng):
    img = rng.random((16, 16))
    data.write_image(tmp_path / "a.pgm", img)
    back = data.read_image(tmp_path / "a.pgm")
    assert np.max(np.abs(back - img)) <= 1 / 65535


def test_raw_round_trip_bit_exact(tmp_path, rng):
    g = rng.normal(size=(5, 7))
    data.write_raw(tmp_path / "g.raw", g)
    assert data.read_raw(tmp_path / "g.raw").tobytes() == g.tobytes()


def test_pgm_p2_rejected(tmp_path):
    (tmp_path / "a.pgm").write_bytes(b"P2\n2 2\n255\n0 1 2 3\n")
    with pytest.raises(data.UnsupportedFormat):
        data.read_image(tmp_path / "a.pgm")


def test_pgm_short_payload(tmp_path):
    (tmp_path / "a.pgm").write_bytes(b"P5\n4 4\n65535\n\x00\x01")
    with pytest.raises(data.ShortPayload):
        data.read_image(tmp_path / "a.pgm")


def test_pgm_malformed_header(tmp_path):
    (tmp_path / "a.pgm").write_bytes(b"P5\nfour 4\n65535\n")
    with pytest.raises(data.MalformedHeader):
        data.read_image(tmp_path / "a.pgm")


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(1, 50))
def test_hexagon_boundary_property(seed, n):
    assert np.max(data.distance_to_hexagon(data.sample_hexagon(n, seed))) < 1e-12
