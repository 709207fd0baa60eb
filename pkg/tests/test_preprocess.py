import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from covidct.errors import ValidationError
from covidct.phantom import generate_phantom
from covidct.preprocess import (
    NormalizedStack,
    hu_window_normalize,
    preprocess_case,
    resample_grid,
    resample_isomorphic,
    resampled_shape,
    resize_depth,
    resize_inplane,
)
from covidct.volume_io import CtVolume


def test_identity_resample_is_bitwise():
    rng = np.random.default_rng(0)
    v = CtVolume(rng.integers(-1024, 3071, (5, 7, 9), dtype=np.int16), (1, 1, 1), "x")
    out = resample_isomorphic(v)
    assert out.shape == v.shape
    assert np.array_equal(out, v.voxels.astype(np.float64))


def test_resampled_shape_arithmetic():
    # 60*2.5 = 150, 512*0.7 = 358.4 -> 358
    assert resampled_shape((60, 512, 512), (2.5, 0.7, 0.7), (1, 1, 1)) == (150, 358, 358)


def test_resample_output_shape_clinical():
    v = CtVolume(np.zeros((60, 512, 512), dtype=np.int16), (2.5, 0.7, 0.7), "x")
    assert resample_isomorphic(v).shape == (150, 358, 358)


def test_resample_degenerate_axis_clamped():
    v = CtVolume(np.zeros((1, 4, 4), dtype=np.int16), (0.2, 1, 1), "x")
    assert resample_isomorphic(v).shape[0] == 1


def test_resample_bad_target():
    v = CtVolume(np.zeros((2, 2, 2), dtype=np.int16), (1, 1, 1), "x")
    with pytest.raises(ValidationError):
        resample_isomorphic(v, (1, float("nan"), 1))


@pytest.mark.parametrize("spacing", [(2.5, 0.7, 0.7), (1.3, 2.0, 0.45), (0.8, 1.7, 3.1)])
def test_resample_physical_ramp(spacing):
    # f(z, y, x) = x * spacing_x is affine, so trilinear resampling must reproduce
    # the analytic value (output x index * 1 mm) wherever it interpolates
    shape = (6, 9, 40)
    grid = np.broadcast_to(np.arange(shape[2]) * spacing[2], shape)
    out = resample_grid(grid, spacing)
    xs = np.arange(out.shape[2]) * 1.0
    interior = xs <= (shape[2] - 1) * spacing[2]
    assert np.max(np.abs(out[..., interior] - xs[interior])) <= 1e-4


def test_resample_affine_field():
    spacing = (1.6, 0.9, 1.3)
    shape = (10, 12, 14)
    z, y, x = np.meshgrid(*[np.arange(n) * s for n, s in zip(shape, spacing)], indexing="ij")
    grid = 0.5 * z - 2.0 * y + 3.0 * x + 7.0
    out = resample_grid(grid, spacing)
    zo, yo, xo = np.meshgrid(*[np.arange(n) * 1.0 for n in out.shape], indexing="ij")
    expected = 0.5 * zo - 2.0 * yo + 3.0 * xo + 7.0
    inside = (zo <= z.max()) & (yo <= y.max()) & (xo <= x.max())
    assert np.max(np.abs(out[inside] - expected[inside])) <= 1e-4


def test_hu_window_anchor_values():
    out = hu_window_normalize([-1000.0, -300.0, 400.0, 1900.0, -2000.0])
    assert out.tolist() == [0.0, 0.5, 1.0, 1.0, 0.0]


def test_hu_window_rejects_nan():
    with pytest.raises(ValidationError):
        hu_window_normalize([np.nan])


@given(st.lists(st.floats(-5000, 5000), min_size=2, max_size=50))
def test_hu_window_range_and_monotone(values):
    v = np.sort(np.asarray(values))
    out = hu_window_normalize(v)
    assert np.all((out >= 0) & (out <= 1))
    assert np.all(np.diff(out) >= 0)


@given(st.lists(st.floats(-5000, 5000), min_size=1, max_size=50))
def test_hu_clamp_idempotent(values):
    v = np.asarray(values)
    once = np.clip(v, -1000, 400)
    assert np.array_equal(hu_window_normalize(once), hu_window_normalize(v))


def test_resize_inplane_identity():
    s = np.random.default_rng(1).random((3, 240, 240))
    assert np.max(np.abs(resize_inplane(s) - s)) <= 1e-6


def test_resize_inplane_constant():
    s = np.full((2, 512, 512), 0.37)
    out = resize_inplane(s)
    assert out.shape == (2, 240, 240)
    assert np.max(np.abs(out - 0.37)) <= 1e-12


def test_resize_inplane_ramp():
    h = 480
    yy, xx = np.meshgrid(np.arange(h), np.arange(h), indexing="ij")
    s = (0.002 * xx + 0.001 * yy)[None].astype(np.float64)
    out = resize_inplane(s)[0]
    # corner-aligned mapping: output pixel i samples input coordinate i * (h-1)/239
    c = np.arange(240) * (h - 1) / 239
    expected = 0.002 * c[None, :] + 0.001 * c[:, None]
    assert np.max(np.abs(out[1:-1, 1:-1] - expected[1:-1, 1:-1])) <= 1e-4


@settings(max_examples=25, deadline=None)
@given(st.integers(2, 30), st.integers(2, 30), st.integers(0, 2**32 - 1))
def test_resize_inplane_convex(h, w, seed):
    s = np.random.default_rng(seed).random((1, h, w))
    out = resize_inplane(s, 17)
    assert out.min() >= s.min() - 1e-12 and out.max() <= s.max() + 1e-12


def test_resize_depth_identity():
    s = np.random.default_rng(2).random((50, 4, 4))
    assert np.max(np.abs(resize_depth(s) - s)) <= 1e-6


def test_resize_depth_ramp():
    s = np.arange(100, dtype=np.float64)[:, None, None] * np.ones((1, 3, 3))
    out = resize_depth(s)
    assert out.shape == (50, 3, 3)
    assert abs(out[0, 0, 0] - 0) <= 1e-6 and abs(out[-1, 0, 0] - 99) <= 1e-6
    assert np.all(np.diff(out[:, 0, 0]) >= 0)


def test_resize_depth_two_slices():
    s = np.stack([np.zeros((2, 2)), np.ones((2, 2))])
    out = resize_depth(s)
    assert np.max(np.abs(out[:, 0, 0] - np.linspace(0, 1, 50))) <= 1e-6


def test_resize_depth_single_slice_replicates(caplog):
    s = np.full((1, 2, 2), 0.3)
    out = resize_depth(s)
    assert out.shape == (50, 2, 2) and np.all(out == 0.3)
    assert "replicated" in caplog.text


def test_preprocess_air_and_bone():
    air = CtVolume(np.full((3, 20, 20), -1000, dtype=np.int16), (2.0, 1.5, 1.5), "air")
    bone = CtVolume(np.full((3, 20, 20), 1000, dtype=np.int16), (2.0, 1.5, 1.5), "bone")
    a = preprocess_case(air)
    b = preprocess_case(bone)
    assert a.slices.shape == (6, 240, 240) and np.all(a.slices == 0.0)
    assert np.all(b.slices == 1.0)
    assert a.original_slice_count == 3


def test_preprocess_control_phantom_lung_values():
    vol, _ = generate_phantom("Control", (16, 64, 64), (1.0, 1.0, 1.0), seed=4)
    hu = vol.voxels
    lung = (hu > -800) & (hu < -500)
    out = preprocess_case(vol, size=64).slices
    lo, hi = (-700 + 1000) / 1400, (-600 + 1000) / 1400
    tex = 50 / 1400
    vals = out[lung]
    assert vals.min() >= lo - tex - 1e-6 and vals.max() <= hi + tex + 1e-6
    # most lung voxels sit inside the untextured window
    assert np.median(vals) >= lo and np.median(vals) <= hi


def test_normalized_stack_invariants():
    with pytest.raises(ValidationError):
        NormalizedStack(np.full((1, 4, 4), 1.5), "x", 1)
    with pytest.raises(ValidationError):
        NormalizedStack(np.zeros((1, 4, 5)), "x", 1)
