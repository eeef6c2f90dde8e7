import json
import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import T0, make_scene
from plumeseg.errors import BoundsError, ChannelError, CrsError, DataError, FormatError
from plumeseg.raster import (
    BandMode,
    ChannelId,
    GeoTransform,
    RasterScene,
    composite_true_color,
    crop_window,
    encoded_size,
    read_scene,
    resample_nearest,
    stack_input,
    write_scene,
)


def _write_raw(path, header, planes):
    head = json.dumps(header).encode()
    with open(path, "wb") as fh:
        fh.write(b"GRD1" + struct.pack("<I", len(head)) + head)
        fh.write(np.asarray(planes, dtype="<f4").tobytes())


def _header(w, h, channels):
    return {
        "width": w,
        "height": h,
        "channels": channels,
        "transform": [0, 1, 0, 0, 0, -1],
        "crs": "EPSG:4326",
        "timestamp": "2019-09-08T20:00:00Z",
    }


def test_minimal_file(tmp_path):
    p = tmp_path / "a.grd"
    _write_raw(p, _header(2, 2, ["C07"]), [0, 0.5, 1, 0.25])
    s = read_scene(p)
    assert s.width == 2 and s.height == 2
    np.testing.assert_array_equal(s.plane("C07"), [[0, 0.5], [1, 0.25]])
    assert s.timestamp == T0


def test_full_size_header(tmp_path):
    p = tmp_path / "big.grd"
    names = ["Blue", "Red", "Veggie", "C07", "C11"]
    _write_raw(p, _header(1200, 1200, names), np.zeros(5 * 1200 * 1200))
    s = read_scene(p)
    assert s.data.shape == (5, 1200, 1200)
    assert all(s.plane(n).size == 1_440_000 for n in names)


def test_nan_over_threshold_rejected(tmp_path):
    plane = np.ones(100, dtype=np.float32)
    plane[:2] = np.nan  # 2%
    p = tmp_path / "nan.grd"
    _write_raw(p, _header(10, 10, ["C11"]), plane)
    with pytest.raises(DataError):
        read_scene(p)


def test_nan_under_threshold_filled_with_median(tmp_path):
    plane = np.arange(200, dtype=np.float32)
    plane[7] = np.nan  # 0.5%
    p = tmp_path / "nan.grd"
    _write_raw(p, _header(20, 10, ["C11"]), plane)
    with pytest.warns(UserWarning):
        s = read_scene(p)
    finite = np.delete(np.arange(200, dtype=np.float32), 7)
    assert s.plane("C11").reshape(-1)[7] == np.median(finite)
    assert len(s.warnings) == 1


@pytest.mark.parametrize(
    "mutate",
    [
        lambda raw: b"XXXX" + raw[4:],
        lambda raw: raw[:8] + b"{not json" + raw[17:],
        lambda raw: raw[:-4],
    ],
)
def test_malformed_files(tmp_path, scene, mutate):
    p = tmp_path / "s.grd"
    write_scene(scene, p)
    p.write_bytes(mutate(p.read_bytes()))
    with pytest.raises(FormatError):
        read_scene(p)


def test_missing_header_key(tmp_path):
    p = tmp_path / "s.grd"
    hdr = _header(1, 1, ["C07"])
    del hdr["crs"]
    _write_raw(p, hdr, [1.0])
    with pytest.raises(FormatError):
        read_scene(p)


def test_round_trip(tmp_path, scene):
    p = tmp_path / "s.grd"
    write_scene(scene, p)
    back = read_scene(p)
    assert back == scene
    assert back.data.tobytes() == scene.data.tobytes()


def test_zero_channel_write_rejected(tmp_path):
    s = RasterScene(np.zeros((0, 3, 3)), ())
    with pytest.raises(FormatError):
        write_scene(s, tmp_path / "z.grd")


def test_file_size(tmp_path):
    names = (ChannelId.RED, ChannelId.GREEN_SYNTH, ChannelId.BLUE, ChannelId.C07, ChannelId.C11, ChannelId.AOT)
    s = RasterScene(np.zeros((6, 300, 300)), names)
    p = tmp_path / "s.grd"
    write_scene(s, p)
    raw = p.read_bytes()
    (hlen,) = struct.unpack("<I", raw[4:8])
    assert len(raw) == encoded_size(300, 300, 6, hlen) == 8 + hlen + 6 * 300 * 300 * 4


finite32 = st.floats(-1e6, 1e6, allow_nan=False, width=32)


@settings(max_examples=30, deadline=None)
@given(
    h=st.integers(1, 6),
    w=st.integers(1, 6),
    seed=st.integers(0, 1000),
    ox=st.floats(-1e5, 1e5),
    px=st.floats(0.001, 100),
)
def test_round_trip_property(tmp_path_factory, h, w, seed, ox, px):
    rng = np.random.default_rng(seed)
    data = np.stack([rng.uniform(0, 1.3, (h, w)), rng.normal(280, 40, (h, w))])
    s = RasterScene(data, ("Red", "C11"), GeoTransform(ox, px, 0.0, -ox, 0.0, -px), "EPSG:3857", T0)
    p = tmp_path_factory.mktemp("rt") / "s.grd"
    write_scene(s, p)
    assert read_scene(p) == s


def test_invariants_enforced():
    with pytest.raises(FormatError):
        RasterScene(np.zeros((2, 2, 2)), ("Red", "Red"))
    with pytest.raises(DataError):
        RasterScene(np.full((1, 2, 2), 1.5), ("Blue",))
    with pytest.raises(DataError):
        RasterScene(np.full((1, 2, 2), 0.5), ("Mask",))
    with pytest.raises(DataError):
        RasterScene(np.full((1, 2, 2), np.inf), ("C07",))
    with pytest.raises(DataError):
        GeoTransform(0, 1, 1, 0, 1, 1)  # singular


def test_scene_is_read_only(scene):
    with pytest.raises(ValueError):
        scene.data[0, 0, 0] = 1.0


# --- compositing -----------------------------------------------------------------


def _rvb(r, v, b):
    return RasterScene(np.stack([np.full((2, 2), r), np.full((2, 2), v), np.full((2, 2), b)]), ("Red", "Veggie", "Blue"))


def test_green_zero():
    assert np.all(composite_true_color(_rvb(0, 0, 0)).plane("GreenSynth") == 0)


def test_green_ones():
    np.testing.assert_allclose(composite_true_color(_rvb(1, 1, 1)).plane("GreenSynth"), 1.0, atol=1e-7)


def test_green_linear_form():
    # 0.45 * 0.6 + 0.10 * 0.2 + 0.45 * 0.4 = 0.47
    np.testing.assert_allclose(composite_true_color(_rvb(0.6, 0.2, 0.4)).plane("GreenSynth"), 0.47, atol=1e-6)


def test_green_clamped():
    s = _rvb(1.3, 1.3, 1.3)
    assert composite_true_color(s).plane("GreenSynth").max() <= 1.3


def test_composite_keeps_inputs_and_is_idempotent(scene):
    once = composite_true_color(scene)
    twice = composite_true_color(once)
    for ch in ("Red", "Veggie", "Blue"):
        assert np.array_equal(once.plane(ch), scene.plane(ch))
    assert once == twice


def test_composite_missing_channel():
    with pytest.raises(ChannelError):
        composite_true_color(RasterScene(np.zeros((1, 2, 2)), ("Red",)))


# --- cropping --------------------------------------------------------------------


def test_crop_identity(scene):
    assert crop_window(scene, 0, 0, scene.height) == scene


def test_crop_full_size():
    s = RasterScene(np.zeros((1, 1200, 1200), dtype=np.float32), ("C07",))
    c = crop_window(s, 0, 0, 300)
    assert (c.height, c.width) == (300, 300)


def test_crop_indexing(rng):
    s = make_scene(40, 50, seed=3)
    for _ in range(50):
        size = int(rng.integers(1, 30))
        r0 = int(rng.integers(0, 40 - size + 1))
        c0 = int(rng.integers(0, 50 - size + 1))
        c = crop_window(s, r0, c0, size)
        i, j = rng.integers(0, size, 2)
        assert np.array_equal(c.data[:, i, j], s.data[:, r0 + i, c0 + j])


@pytest.mark.parametrize("window", [(-1, 0, 4), (0, 0, 9), (5, 5, 4)])
def test_crop_bounds(scene, window):
    with pytest.raises(BoundsError):
        crop_window(scene, *window)


def test_crop_preserves_map_coordinates_exactly():
    # dyadic grid values keep every sum exact
    s = make_scene(32, 32, transform=GeoTransform(-1024.0, 0.5, 0.0, 2048.0, 0.0, -0.25))
    c = crop_window(s, 5, 11, 16)
    rows, cols = np.mgrid[0:16, 0:16]
    assert np.array_equal(
        np.stack(c.transform.pixel_to_map(rows, cols)), np.stack(s.transform.pixel_to_map(rows + 5, cols + 11))
    )


@settings(max_examples=50, deadline=None)
@given(
    ox=st.floats(-1e4, 1e4),
    oy=st.floats(-1e4, 1e4),
    pw=st.floats(0.01, 10),
    ph=st.floats(-10, -0.01),
    r0=st.integers(0, 10),
    c0=st.integers(0, 10),
)
def test_crop_preserves_map_coordinates(ox, oy, pw, ph, r0, c0):
    t = GeoTransform(ox, pw, 0.0, oy, 0.0, ph)
    s = RasterScene(np.zeros((1, 20, 20)), ("C07",), t)
    c = crop_window(s, r0, c0, 8)
    rows, cols = np.mgrid[0:8, 0:8]
    np.testing.assert_allclose(
        np.stack(c.transform.pixel_to_map(rows, cols)),
        np.stack(t.pixel_to_map(rows + r0, cols + c0)),
        rtol=1e-12,
        atol=1e-9,
    )


# --- resampling ------------------------------------------------------------------


def _brute_nearest(src, target, channel):
    plane = src.plane(channel)
    out = np.empty((target.height, target.width), dtype=np.float32)
    rr, cc = np.mgrid[0 : src.height, 0 : src.width]
    sx, sy = src.transform.pixel_to_map(rr + 0.5, cc + 0.5)
    for i in range(target.height):
        for j in range(target.width):
            x, y = target.transform.pixel_to_map(i + 0.5, j + 0.5)
            d = (sx - x) ** 2 + (sy - y) ** 2
            k = np.flatnonzero(d.reshape(-1) == d.min())[0]  # row-major first = smallest (row, col)
            out[i, j] = plane.reshape(-1)[k]
    return out


def test_resample_identity_grid(scene):
    src = RasterScene(np.arange(64, dtype=np.float32).reshape(1, 8, 8), ("AOT",), scene.transform, scene.crs)
    out = resample_nearest(src, scene, "AOT")
    assert np.array_equal(out.plane("AOT"), src.plane("AOT"))
    assert out.channels == scene.channels + (ChannelId.AOT,)


def test_resample_upsample_blocks():
    src = RasterScene(np.array([[[1, 2], [3, 4]]], dtype=np.float32), ("AOT",), GeoTransform(0, 2, 0, 0, 0, -2), "X")
    tgt = RasterScene(np.zeros((1, 4, 4)), ("C07",), GeoTransform(0, 1, 0, 0, 0, -1), "X")
    out = resample_nearest(src, tgt, "AOT").plane("AOT")
    np.testing.assert_array_equal(out, np.kron([[1, 2], [3, 4]], np.ones((2, 2))))


def test_resample_crs_mismatch(scene):
    src = RasterScene(np.zeros((1, 2, 2)), ("AOT",), crs="EPSG:4326")
    with pytest.raises(CrsError):
        resample_nearest(src, scene, "AOT")


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 10_000), shear=st.booleans())
def test_resample_matches_brute_force(seed, shear):
    rng = np.random.default_rng(seed)
    sh, sw = rng.integers(2, 9, 2)
    spx = rng.uniform(0.5, 3.0)
    rot = rng.uniform(-0.2, 0.2) * spx if shear else 0.0
    st_ = GeoTransform(rng.uniform(-5, 5), spx, rot, rng.uniform(-5, 5), -rot, -spx * rng.uniform(0.7, 1.3))
    src = RasterScene(rng.normal(size=(1, sh, sw)), ("AOT",), st_, "X")
    th, tw = rng.integers(2, 12, 2)
    tpx = rng.uniform(0.2, 2.0)
    tt = GeoTransform(rng.uniform(-8, 8), tpx, 0.0, rng.uniform(-8, 8), 0.0, -tpx)
    tgt = RasterScene(np.zeros((1, th, tw)), ("C07",), tt, "X")
    assert np.array_equal(resample_nearest(src, tgt, "AOT").plane("AOT"), _brute_nearest(src, tgt, "AOT"))


def test_resample_tie_goes_to_smaller_index():
    # target center at x=1 sits exactly between src centers 0.5 and 1.5
    src = RasterScene(np.array([[[7, 9]]], dtype=np.float32), ("AOT",), GeoTransform(0, 1, 0, 0, 0, -1), "X")
    tgt = RasterScene(np.zeros((1, 1, 1)), ("C07",), GeoTransform(0.5, 1, 0, 0, 0, -1), "X")
    assert resample_nearest(src, tgt, "AOT").plane("AOT")[0, 0] == 7


# --- band modes --------------------------------------------------------------------


def test_band_modes():
    names = ("Red", "GreenSynth", "Blue", "C07", "C11", "AOT")
    s = RasterScene(np.zeros((6, 2, 2)), names)
    assert len(stack_input(s, BandMode.ONE)) == 3
    assert stack_input(s, "3band") == (ChannelId.RED, ChannelId.GREEN_SYNTH, ChannelId.BLUE, ChannelId.C07, ChannelId.C11)
    assert len(stack_input(s, BandMode.FOUR)) == 6
    assert {m: m.n_planes for m in BandMode} == {BandMode.ONE: 3, BandMode.THREE: 5, BandMode.FOUR: 6}


def test_band_mode_missing_channel():
    s = RasterScene(np.zeros((4, 2, 2)), ("Red", "GreenSynth", "Blue", "C07"))
    with pytest.raises(ChannelError):
        stack_input(s, BandMode.THREE)
