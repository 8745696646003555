import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from fpvit.errors import ConfigError, ParseError, ValidationError
from fpvit.minutiae import (
    Minutia,
    MinutiaeMap,
    MinutiaeSet,
    aligned_overlap,
    build_minutiae_map,
    minutiae_overlap,
    normalize_angle,
    orientation_channel,
    read_minutiae_file,
    read_pgm,
    recover_minutiae,
    write_minutiae_file,
    write_pgm,
)


def brute_force_peaks(data, threshold):
    """Scan every element and keep strict 8-neighbour maxima."""
    h, w, c = data.shape
    found = []
    for ch in range(c):
        for y in range(h):
            for x in range(w):
                v = data[y, x, ch]
                if v < threshold:
                    continue
                ok = True
                for dy in (-1, 0, 1):
                    for dx in (-1, 0, 1):
                        if dx == dy == 0:
                            continue
                        yy, xx = y + dy, x + dx
                        if 0 <= yy < h and 0 <= xx < w and data[yy, xx, ch] >= v:
                            ok = False
                found += [(x, y, ch)] if ok else []
    return sorted(found)


def random_separated_set(rng, m, side=224, sep=13.0, margin=0):
    pts = []
    while len(pts) < m:
        x, y = rng.uniform(margin, side - margin, 2)
        x, y = float(np.floor(x)), float(np.floor(y))
        if all((x - a) ** 2 + (y - b) ** 2 > sep**2 for a, b, _ in pts):
            pts.append((x, y, float(rng.uniform(0, 360))))
    return MinutiaeSet.from_array(side, side, pts)


def test_angle_normalisation():
    assert Minutia(1, 2, 365.0).theta == 5.0
    assert Minutia(1, 2, -90.0).theta == 270.0
    assert Minutia(1, 2, 360.0).theta == 0.0
    assert normalize_angle(-1e-20) == 0.0


@pytest.mark.parametrize("theta,channel", [(0.0, 0), (179.99, 0), (180.0, 1), (359.99, 1), (45, 0), (200, 1)])
def test_channel_binning_boundaries(theta, channel):
    assert orientation_channel(theta, 2) == channel
    assert orientation_channel(theta, 1) == 0


def test_set_equality_is_order_insensitive():
    a = MinutiaeSet(224, 224, (Minutia(1, 2, 3), Minutia(4, 5, 6)))
    b = MinutiaeSet(224, 224, (Minutia(4, 5, 6), Minutia(1, 2, 3)))
    assert a == b and hash(a) == hash(b)
    assert a != MinutiaeSet(224, 224, (Minutia(1, 2, 3),))


def test_out_of_bounds_point_rejected():
    with pytest.raises(ValidationError, match="minutia 1"):
        MinutiaeSet(10, 10, (Minutia(1, 1, 0), Minutia(10, 1, 0)))


def test_empty_set_gives_zero_map():
    m = build_minutiae_map(MinutiaeSet(224, 224), channels=2)
    assert m.data.shape == (224, 224, 2)
    assert not m.data.any()


def test_single_minutia_channel_zero():
    m = build_minutiae_map(MinutiaeSet(224, 224, (Minutia(100, 50, 45),)), 2, 3.0)
    assert m.data[50, 100, 0] == 1.0
    assert m.data[50, 100, 1] == 0.0


def test_single_minutia_channel_one():
    m = build_minutiae_map(MinutiaeSet(224, 224, (Minutia(100, 50, 200),)), 2, 3.0)
    assert m.data[50, 100, 1] == 1.0
    assert m.data[50, 100, 0] == 0.0


def test_single_channel_collects_everything():
    s = MinutiaeSet(64, 64, (Minutia(10, 10, 10), Minutia(40, 40, 300)))
    m = build_minutiae_map(s, 1, 2.0)
    assert m.data.shape == (64, 64, 1)
    assert m.data[10, 10, 0] == 1.0 and m.data[40, 40, 0] == 1.0


def test_bad_configuration():
    s = MinutiaeSet(8, 8)
    with pytest.raises(ConfigError):
        build_minutiae_map(s, 3)
    with pytest.raises(ConfigError):
        build_minutiae_map(s, 2, 0.0)


def test_map_values_in_unit_interval_and_max_combined():
    s = MinutiaeSet(32, 32, (Minutia(10, 10, 0), Minutia(11, 10, 10)))
    m = build_minutiae_map(s, 2, 3.0)
    assert m.data.min() >= 0.0 and m.data.max() <= 1.0
    assert m.data[10, 10, 0] == 1.0 and m.data[10, 11, 0] == 1.0


def test_recover_all_zero():
    assert len(recover_minutiae(MinutiaeMap(np.zeros((16, 16, 2))), 0.5)) == 0


def test_recover_single_reports_bin_midpoint():
    m = build_minutiae_map(MinutiaeSet(224, 224, (Minutia(100, 50, 45),)), 2, 3.0)
    rec = recover_minutiae(m, 0.5)
    assert rec == MinutiaeSet(224, 224, (Minutia(100, 50, 90),))


def test_recovery_matches_brute_force_scan():
    rng = np.random.default_rng(3)
    s = random_separated_set(rng, 30, sep=4 * 3.0 + 1)
    m = build_minutiae_map(s, 2, 3.0)
    peaks = brute_force_peaks(m.data, 0.5)
    rec = sorted((int(p.x), int(p.y), 0 if p.theta < 180 else 1) for p in recover_minutiae(m, 0.5))
    assert rec == peaks
    truth = sorted((int(p.x), int(p.y), orientation_channel(p.theta)) for p in s)
    assert rec == truth


def test_round_trip_thirty_within_one_pixel():
    rng = np.random.default_rng(11)
    s = random_separated_set(rng, 30, sep=12.5, margin=2)
    # sub-pixel positions round to the nearest pixel
    s = MinutiaeSet.from_array(224, 224, s.to_array() + [0.3, -0.2, 0.0])
    rec = recover_minutiae(build_minutiae_map(s, 2, 3.0), 0.5)
    assert len(rec) == 30
    for p in s:
        ch = orientation_channel(p.theta)
        assert any(
            abs(q.x - p.x) <= 1 and abs(q.y - p.y) <= 1 and orientation_channel(q.theta) == ch for q in rec
        )


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000), st.integers(-20, 20), st.integers(-20, 20))
def test_translation_equivariance(seed, dx, dy):
    rng = np.random.default_rng(seed)
    s = random_separated_set(rng, 5, side=96, sep=13, margin=25)
    moved = MinutiaeSet.from_array(96, 96, s.to_array() + [dx, dy, 0])
    a = build_minutiae_map(s, 2, 2.0).data
    b = build_minutiae_map(moved, 2, 2.0).data
    inner = slice(25, 71)
    shifted = np.roll(a, (dy, dx), axis=(0, 1))
    np.testing.assert_array_equal(b[inner, inner], shifted[inner, inner])


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000))
def test_monotone_occupancy_and_channel_partition(seed):
    rng = np.random.default_rng(seed)
    s = random_separated_set(rng, 6, side=64, sep=5)
    extra = Minutia(*rng.uniform(0, 63, 2), rng.uniform(0, 360))
    base = build_minutiae_map(s, 2, 2.0).data
    more = build_minutiae_map(MinutiaeSet(64, 64, s.points + (extra,)), 2, 2.0).data
    assert (more >= base).all()
    # the added minutia only touched its own channel
    other = 1 - orientation_channel(extra.theta)
    np.testing.assert_array_equal(more[:, :, other], base[:, :, other])


def test_file_round_trip(tmp_path):
    s = MinutiaeSet(224, 224, (Minutia(1.5, 2.25, 10.123), Minutia(100, 200, 359.5), Minutia(0, 0, 0)))
    write_minutiae_file(s, tmp_path / "a.mnt")
    assert read_minutiae_file(tmp_path / "a.mnt") == s
    assert (tmp_path / "a.mnt").read_bytes().count(b"\r") == 0


def test_file_count_mismatch(tmp_path):
    p = tmp_path / "b.mnt"
    p.write_text("MNT 224 224 2\n1 1 1\n2 2 2\n3 3 3\n")
    with pytest.raises(ParseError, match="declares 2"):
        read_minutiae_file(p)


def test_file_theta_normalised(tmp_path):
    p = tmp_path / "c.mnt"
    p.write_text("MNT 224 224 1\n10 20 365.0\n")
    assert read_minutiae_file(p).points[0].theta == 5.0


@pytest.mark.parametrize(
    "text,line",
    [("XYZ 1 1 0\n", 1), ("MNT 10 10 1\n20 1 0\n", 2), ("MNT 10 10 1\n1 a 0\n", 2), ("MNT 10 10\n", 1)],
)
def test_file_errors_carry_line(tmp_path, text, line):
    p = tmp_path / "d.mnt"
    p.write_text(text)
    with pytest.raises(ParseError) as ei:
        read_minutiae_file(p)
    assert ei.value.line == line


def test_pgm_round_trip(tmp_path):
    img = np.arange(12 * 7, dtype=np.uint8).reshape(7, 12)
    write_pgm(img, tmp_path / "x.pgm")
    assert (tmp_path / "x.pgm").read_bytes().startswith(b"P5\n12 7\n255\n")
    np.testing.assert_array_equal(read_pgm(tmp_path / "x.pgm"), img)


def test_pgm_truncated(tmp_path):
    (tmp_path / "t.pgm").write_bytes(b"P5\n4 4\n255\n" + bytes(5))
    with pytest.raises(ParseError):
        read_pgm(tmp_path / "t.pgm")


def test_overlap_helpers():
    a = np.array([[10, 10, 0], [50, 50, 90], [80, 20, 200]], float)
    assert minutiae_overlap(a, a) == 3
    assert minutiae_overlap(a, a + [7, 0, 0]) == 0
    r = np.deg2rad(30)
    rot = np.array([[np.cos(r), -np.sin(r)], [np.sin(r), np.cos(r)]])
    b = np.column_stack([a[:, :2] @ rot.T + [5, -3], a[:, 2] + 30])
    assert minutiae_overlap(a, b) < 3
    assert aligned_overlap(a, b) == 3
