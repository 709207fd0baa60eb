import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from covidct.errors import ValidationError
from covidct.noise import PerlinParams, build_denoiser_dataset, perlin_field, pseudo_infect, split_noisy_clean


@pytest.mark.parametrize("cell", [2, 5, 24, 64])
def test_lattice_points_are_zero(cell):
    f = perlin_field(8 * cell, 6 * cell, PerlinParams(cell_size_px=cell, octaves=1, amplitude=1.0, seed=11))
    assert np.all(f[::cell, ::cell] == 0.0)
    assert np.any(f != 0.0)


def test_multi_octave_zero_on_coarse_lattice():
    f = perlin_field(96, 96, PerlinParams(cell_size_px=24, octaves=3, seed=2))
    assert np.all(f[::24, ::24] == 0.0)


def test_determinism():
    p = PerlinParams(seed=12345)
    assert perlin_field(100, 90, p).tobytes() == perlin_field(100, 90, p).tobytes()
    assert perlin_field(100, 90, p).tobytes() != perlin_field(100, 90, PerlinParams(seed=12346)).tobytes()


def test_single_octave_bound_dense():
    p = PerlinParams(cell_size_px=32, octaves=1, amplitude=1.0, seed=99)
    f = perlin_field(1024, 1024, p)
    assert np.abs(f).max() <= 0.7072
    # noise should actually use a decent share of its range
    assert np.abs(f).max() > 0.4


def test_amplitude_scales_linearly():
    a = perlin_field(48, 48, PerlinParams(amplitude=1.0, seed=3))
    b = perlin_field(48, 48, PerlinParams(amplitude=0.25, seed=3))
    assert np.allclose(b, 0.25 * a, atol=1e-15)


@pytest.mark.parametrize("kwargs", [dict(cell_size_px=1), dict(octaves=0), dict(octaves=9), dict(persistence=0.0),
                                    dict(persistence=1.5)])
def test_invalid_params(kwargs):
    with pytest.raises(ValidationError):
        PerlinParams(**kwargs)


def test_field_smaller_than_cell():
    with pytest.raises(ValidationError):
        perlin_field(10, 10, PerlinParams(cell_size_px=24))


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**63), st.floats(0.0, 1.0))
def test_pseudo_infect_contract(seed, level):
    rng = np.random.default_rng(seed % 2**32)
    slice_ = np.clip(level + 0.1 * rng.standard_normal((48, 48)), 0, 1).astype(np.float32)
    noisy, applied = pseudo_infect(slice_, PerlinParams(cell_size_px=8, seed=seed), seed)
    assert np.all(applied >= 0)
    assert np.array_equal(noisy, np.clip(slice_ + applied, 0, 1))
    assert noisy.min() >= 0 and noisy.max() <= 1
    assert noisy.mean() >= slice_.mean()
    unclamped = (slice_ + applied) <= 1.0
    # float32 addition then subtraction is exact to within one rounding step
    assert np.max(np.abs((noisy - applied)[unclamped] - slice_[unclamped]), initial=0.0) <= 1e-6


def test_pseudo_infect_region_fraction():
    fractions = []
    for s in range(20):
        _, applied = pseudo_infect(np.zeros((240, 240), np.float32), PerlinParams(seed=s), s)
        fractions.append(np.mean(applied > 0))
    # rectified noise covers part of an ellipse of 5-20% of the slice
    assert max(fractions) <= 0.20 and min(fractions) > 0.0


def test_pseudo_infect_zero_field_is_identity(monkeypatch):
    import covidct.noise as noise

    monkeypatch.setattr(noise, "perlin_field", lambda h, w, p: np.zeros((h, w)))
    s = np.random.default_rng(0).random((32, 32)).astype(np.float32)
    noisy, applied = noise.pseudo_infect(s, PerlinParams(), 1)
    assert np.all(applied == 0) and noisy.tobytes() == s.tobytes()


def test_pseudo_infect_rejects_nonpositive_amplitude():
    with pytest.raises(ValidationError):
        pseudo_infect(np.zeros((48, 48)), PerlinParams(amplitude=0.0), 0)


def test_split_counts_full_scale():
    clean, noisy = split_noisy_clean(22249, seed=0)
    assert (len(clean), len(noisy)) == (11124, 11125)
    assert sorted(np.concatenate([clean, noisy]).tolist()) == list(range(22249))


def test_split_minimal():
    clean, noisy = split_noisy_clean(2, seed=3)
    assert len(clean) == 1 and len(noisy) == 1


def test_build_dataset_clean_half_identity():
    rng = np.random.default_rng(4)
    stacks = [rng.random((5, 48, 48)).astype(np.float32), rng.random((4, 48, 48)).astype(np.float32)]
    p = PerlinParams(cell_size_px=8)
    inputs, targets = build_denoiser_dataset(stacks, p, seed=9)
    n_clean = 9 // 2
    assert inputs.shape == targets.shape == (9, 48, 48)
    for i in range(n_clean):
        assert inputs[i].tobytes() == targets[i].tobytes()
    assert all(np.any(inputs[i] != targets[i]) for i in range(n_clean, 9))
    # targets are a permutation of the original slices
    orig = sorted(s.tobytes() for st_ in stacks for s in st_)
    assert sorted(t.tobytes() for t in targets) == orig


def test_build_dataset_deterministic():
    stacks = [np.random.default_rng(5).random((6, 48, 48)).astype(np.float32)]
    a = build_denoiser_dataset(stacks, PerlinParams(cell_size_px=8), seed=1)
    b = build_denoiser_dataset(stacks, PerlinParams(cell_size_px=8), seed=1)
    assert a[0].tobytes() == b[0].tobytes() and a[1].tobytes() == b[1].tobytes()


def test_build_dataset_empty():
    with pytest.raises(ValidationError):
        build_denoiser_dataset([], PerlinParams(), 0)


def test_theoretical_bound_value():
    assert math.sqrt(2) / 2 <= 0.7072


def test_pseudo_infect_anchored_on_lung_values(monkeypatch):
    import covidct.noise as noise

    monkeypatch.setattr(noise, "perlin_field", lambda h, w, p: np.ones((h, w)))
    s = np.full((64, 64), 0.8, np.float32)
    s[5, 58] = 0.25  # the only pixel inside the default anchor range
    for seed in range(10):
        _, applied = noise.pseudo_infect(s, PerlinParams(cell_size_px=8), seed)
        assert applied[5, 58] > 0


def test_pseudo_infect_unanchored_fallback(monkeypatch):
    import covidct.noise as noise

    monkeypatch.setattr(noise, "perlin_field", lambda h, w, p: np.ones((h, w)))
    s = np.zeros((64, 64), np.float32)  # no pixel in the anchor range
    a = noise.pseudo_infect(s, PerlinParams(cell_size_px=8), 3)[1]
    b = noise.pseudo_infect(s, PerlinParams(cell_size_px=8, anchor_range=None), 3)[1]
    assert np.array_equal(a, b) and a.any()


@pytest.mark.parametrize("rng_", [(0.5, 0.5), (-0.1, 0.3), (0.2, 1.5)])
def test_invalid_anchor_range(rng_):
    with pytest.raises(ValidationError):
        PerlinParams(anchor_range=rng_)
