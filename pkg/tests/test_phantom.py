import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from duolift.phantom import (
    Ellipsoid, MaskVolume, PhantomSpec, VesselParams, Volume, generate_phantom, line_integral,
    project, rasterize_ellipsoid, resample, threshold_segment, vessel_segments,
)


def brute_ellipsoid(e, dims):
    out = np.zeros(dims, dtype=bool)
    for i in range(dims[0]):
        for j in range(dims[1]):
            for k in range(dims[2]):
                p = [(idx + 0.5) / n * 2 - 1 for idx, n in zip((i, j, k), dims)]
                r = sum(((pc - c) / a) ** 2 for pc, c, a in zip(p, e.center, e.axes))
                out[i, j, k] = r <= 1.0
    return out


def brute_segments(segs, dims):
    out = np.zeros(dims, dtype=bool)
    for i in range(dims[0]):
        for j in range(dims[1]):
            for k in range(dims[2]):
                p = np.array([i, j, k], dtype=float)
                for p0, p1, r in segs:
                    d = p1 - p0
                    t = min(1.0, max(0.0, float((p - p0) @ d) / float(d @ d)))
                    if math.dist(p, p0 + t * d) <= r:
                        out[i, j, k] = True
                        break
    return out


def test_zero_vessels_gives_empty_vessel_mask_and_plain_lungs():
    spec = PhantomSpec(vessels=VesselParams(branches=0))
    _, lung, vessel = generate_phantom(spec)
    assert vessel.data.sum() == 0
    expected = rasterize_ellipsoid(spec.lungs[0], spec.dims) | rasterize_ellipsoid(spec.lungs[1], spec.dims)
    np.testing.assert_array_equal(lung.data, expected)


def test_same_seed_is_bit_identical():
    a = generate_phantom(PhantomSpec.random(11))
    b = generate_phantom(PhantomSpec.random(11))
    for x, y in zip(a, b):
        assert x.data.tobytes() == y.data.tobytes()


def test_vessel_mask_matches_brute_force_rasterization():
    spec = PhantomSpec(seed=5, dims=(32, 32, 32), vessels=VesselParams(branches=3, depth=2))
    _, lung, vessel = generate_phantom(spec)
    segs = vessel_segments(spec)
    assert len(segs) == 2 * 3 * (1 + 2 + 4)
    lung_bf = brute_ellipsoid(spec.lungs[0], spec.dims) | brute_ellipsoid(spec.lungs[1], spec.dims)
    expected = brute_segments(segs, spec.dims) & lung_bf
    assert vessel.data.sum() == expected.sum()
    np.testing.assert_array_equal(vessel.data.astype(bool), expected)


@pytest.mark.parametrize("seed", range(6))
def test_mask_nesting(seed):
    spec = PhantomSpec.random(seed)
    vol, lung, vessel = generate_phantom(spec)
    body = rasterize_ellipsoid(spec.body, spec.dims)
    assert not (vessel.data & ~lung.data).any()
    assert not (lung.data.astype(bool) & ~body).any()
    assert vol.data.min() >= 0 and vol.data.max() <= 1


def test_intensity_layout():
    spec = PhantomSpec(vessels=VesselParams(branches=2, depth=1))
    vol, lung, vessel = generate_phantom(spec)
    v = vol.data
    assert np.allclose(v[vessel.data == 1], spec.vessels.intensity)
    inner = (lung.data == 1) & (vessel.data == 0)
    assert v[inner].max() < spec.body.intensity < spec.vessels.intensity
    assert v[0, 0, 0] == 0.0


def test_geometry_outside_volume_rejected():
    spec = PhantomSpec(body=Ellipsoid((0.5, 0, 0), (0.7, 0.8, 0.8), 0.5))
    with pytest.raises(ValueError, match="outside the volume"):
        generate_phantom(spec)
    with pytest.raises(ValueError, match="radius"):
        generate_phantom(PhantomSpec(vessels=VesselParams(radius_range=(0.0, 1.0))))


def test_project_constant_volume_is_zero():
    p = project(Volume(np.full((8, 8, 8), 0.5)), "frontal")
    assert (p.data == 0).all()


def test_project_impulse_geometry():
    v = np.zeros((8, 12, 16), dtype=np.float32)
    v[3, 5, 7] = 1.0
    fr = project(Volume(v), "frontal").data
    assert fr.shape == (12, 16)
    assert set(zip(*np.nonzero(fr))) == {(5, 7)}
    la = project(Volume(v), "lateral").data
    assert la.shape == (12, 8)
    assert set(zip(*np.nonzero(la))) == {(5, 3)}


@pytest.mark.parametrize("view", ["frontal", "lateral"])
def test_project_matches_axis_mean_oracle(view):
    v = np.random.default_rng(0).random((8, 8, 8)).astype(np.float32)
    n = v.shape[0]
    raw = np.zeros((8, 8))
    for a in range(8):
        for b in range(8):
            s = 0.0
            for k in range(n):
                s += v[k, a, b] if view == "frontal" else v[b, a, k]
            raw[a, b] = s / n
    expected = (raw - raw.min()) / (raw.max() - raw.min())
    np.testing.assert_allclose(project(Volume(v), view).data, expected, atol=1e-6)


@settings(max_examples=25, deadline=None)
@given(st.floats(-2, 2), st.floats(-2, 2), st.integers(0, 2 ** 16))
def test_line_integral_is_linear(a, b, seed):
    rng = np.random.default_rng(seed)
    v, w = rng.random((2, 4, 4, 4))
    for view in ("frontal", "lateral"):
        lhs = line_integral(a * v + b * w, view)
        rhs = a * line_integral(v, view) + b * line_integral(w, view)
        np.testing.assert_allclose(lhs, rhs, atol=1e-6)


def test_project_deterministic():
    vol, _, _ = generate_phantom(PhantomSpec.random(2))
    assert project(vol, "lateral").data.tobytes() == project(vol, "lateral").data.tobytes()


def test_resample_identity_is_exact():
    v = Volume(np.random.default_rng(1).random((8, 8, 12)))
    np.testing.assert_array_equal(resample(v, v.shape).data, v.data)


@settings(max_examples=20, deadline=None)
@given(st.floats(0, 1, width=32), st.sampled_from([(4, 8, 12), (16, 16, 16), (12, 4, 8)]))
def test_resample_preserves_constants(c, dims):
    out = resample(Volume(np.full((8, 8, 8), c, dtype=np.float32)), dims)
    assert out.shape == dims
    assert (out.data == np.float32(c)).all()


def test_resample_ramp_matches_closed_form():
    n, m = 8, 16
    ramp = np.broadcast_to((np.arange(n) / (n - 1))[:, None, None], (n, 4, 4))
    out = resample(Volume(ramp), (m, 4, 4)).data
    expected = np.arange(m) / (m - 1)  # corner-aligned: output i samples input i*(n-1)/(m-1)
    np.testing.assert_allclose(out[:, 2, 1], expected, atol=1e-6)


@settings(max_examples=20, deadline=None)
@given(hnp.arrays(np.float32, (4, 4, 8), elements=st.floats(0, 1, width=32)),
       st.sampled_from([(8, 8, 8), (4, 12, 16), (12, 4, 4)]))
def test_resample_within_input_range(data, dims):
    out = resample(Volume(data), dims).data
    assert out.min() >= data.min() and out.max() <= data.max()


def test_resample_rejects_small_dims():
    with pytest.raises(ValueError):
        resample(Volume(np.zeros((4, 4, 4))), (1, 4, 4))


def test_threshold_segment_cases():
    assert threshold_segment(np.zeros((4, 4, 4)), 0.5).data.sum() == 0
    mask = (np.random.default_rng(2).random((4, 4, 4)) > 0.5).astype(np.float32)
    np.testing.assert_array_equal(threshold_segment(mask, 0.5).data, mask)
    v = np.random.default_rng(3).random((4, 4, 4))
    got = threshold_segment(v, 0.3).data
    for idx in np.ndindex(v.shape):
        assert got[idx] == (1 if v[idx] >= 0.3 else 0)
    for bad in (0.0, 1.0, -0.1):
        with pytest.raises(ValueError):
            threshold_segment(v, bad)


def test_volume_and_mask_validation():
    with pytest.raises(ValueError):
        Volume(np.zeros((6, 8, 8)))
    with pytest.raises(ValueError):
        Volume(np.full((4, 4, 4), 1.5))
    with pytest.raises(ValueError):
        MaskVolume(np.full((4, 4, 4), 2))
