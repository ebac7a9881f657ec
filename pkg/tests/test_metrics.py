import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from duolift.metrics import (
    PSNR_CAP, MetricReport, Thresholds, aggregate, dice, evaluate, lpips_mean, psnr2d, psnr3d,
    render_table, rms_distance, segment_lung, segment_vessel, ssim2d, ssim3d,
)
from duolift.phantom import PhantomSpec, generate_phantom
from oracles import loop_ssim2d_volume, loop_ssim_3d


def test_psnr_hand_values():
    a = np.zeros((4, 4, 4))
    assert psnr3d(a, a) == PSNR_CAP
    assert psnr3d(a, np.full((4, 4, 4), 0.1)) == pytest.approx(20.0)
    b = a.copy()
    b[:, 0] = 0.1  # one axial slice off by 0.1, the rest exact
    assert psnr2d(a, b) == pytest.approx((20.0 + 3 * PSNR_CAP) / 4)
    assert psnr3d(a, b) == pytest.approx(10 * math.log10(1 / (0.01 / 4)))


def test_psnr_closed_form_and_equal_slice_mse():
    a = np.zeros((4, 4, 4))
    assert psnr3d(a, np.full((4, 4, 4), 0.5)) == pytest.approx(6.0206, abs=1e-4)
    rng = np.random.default_rng(0)
    b = a + np.where(rng.random((4, 4, 4)) > 0.5, 0.2, -0.2)  # every slice has MSE 0.04
    assert abs(psnr2d(a, b) - psnr3d(a, b)) < 1e-9


def test_psnr_rejects_shape_mismatch_and_bad_range():
    with pytest.raises(ValueError):
        psnr3d(np.zeros((4, 4, 4)), np.zeros((4, 4, 8)))
    with pytest.raises(ValueError):
        psnr3d(np.zeros((4, 4, 4)), np.zeros((4, 4, 4)), max_val=0)


@pytest.mark.parametrize("seed", range(3))
def test_ssim2d_matches_window_loop(seed):
    rng = np.random.default_rng(seed)
    x = rng.random((14, 3, 13))
    y = np.clip(x + 0.1 * rng.standard_normal(x.shape), 0, 1)
    expected = loop_ssim2d_volume(x, y)
    assert ssim2d(x, y) == pytest.approx(expected, abs=1e-10)


def test_ssim3d_loop_oracle_on_small_cube():
    rng = np.random.default_rng(7)
    x = rng.random((12, 11, 12))
    y = 0.5 * x + 0.2
    assert ssim3d(x, y) == pytest.approx(loop_ssim_3d(x, y), abs=1e-10)


def test_ssim_identity_and_small_input():
    x = np.random.default_rng(0).random((16, 16, 16))
    assert ssim2d(x, x) == pytest.approx(1.0)
    assert ssim3d(x, x) == pytest.approx(1.0)
    with pytest.raises(ValueError, match="window"):
        ssim3d(np.zeros((8, 8, 8)), np.zeros((8, 8, 8)))


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 2 ** 16))
def test_ssim_symmetric_and_bounded(seed):
    rng = np.random.default_rng(seed)
    x, y = rng.random((2, 12, 4, 12))
    s = ssim2d(x, y)
    assert s == pytest.approx(ssim2d(y, x))
    assert -1 <= s <= 1


def test_dice_cases():
    z = np.zeros((4, 4, 4), bool)
    assert dice(z, z) == 1.0
    a = z.copy()
    a[0] = True
    assert dice(a, z) == 0.0
    assert dice(a, a) == 1.0
    b = z.copy()
    b[0, :2] = True
    assert dice(a, b) == pytest.approx(2 * 8 / (16 + 8))
    c = z.copy()
    c[0, :2] = True
    c[1, :2] = True
    assert dice(b, c) == pytest.approx(2 * 8 / (8 + 16))
    half = z.copy()
    half[0, 0, :2] = True
    other = z.copy()
    other[0, 0, 1:3] = True
    assert dice(half, other) == 0.5


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2 ** 16))
def test_dice_symmetric_and_bounded(seed):
    rng = np.random.default_rng(seed)
    a, b = rng.random((2, 4, 4, 4)) > 0.5
    d = dice(a, b)
    assert d == dice(b, a) and 0 <= d <= 1


def test_lpips_backend_plumbing():
    x = np.random.default_rng(0).random((4, 4, 4))
    assert lpips_mean(x, x, None) is None
    assert lpips_mean(x, x, rms_distance) == 0.0
    y = x + 0.1
    assert lpips_mean(x, y, rms_distance) == pytest.approx(0.1)

    def broken(a, b):
        raise RuntimeError("no weights")
    assert lpips_mean(x, y, broken) is None


@pytest.mark.parametrize("seed", range(4))
def test_segmentation_recovers_ground_truth(seed):
    vol, lung, vessel = generate_phantom(PhantomSpec.random(seed, (32, 32, 32)))
    seg = segment_lung(vol)
    assert dice(lung, seg) >= 0.99
    assert dice(vessel, segment_vessel(vol, seg)) >= 0.95


def test_evaluate_identity_and_report_round_trip():
    vol, lung, vessel = generate_phantom(PhantomSpec.random(3, (32, 32, 32)))
    rep = evaluate(vol, vol, lung, vessel, Thresholds(), rms_distance)
    assert rep.psnr3d == PSNR_CAP and rep.ssim3d == pytest.approx(1.0) and rep.lpips == 0.0
    assert MetricReport.from_json(rep.to_json()) == rep
    blank = evaluate(vol, np.zeros(vol.shape), lung, vessel)
    assert blank.dice_lung == 0.0 and blank.lpips is None


def test_aggregate_population_std_and_table():
    reps = [MetricReport(10, 20, 0.5, 0.6), MetricReport(12, 22, 0.7, 0.8, lpips=0.1)]
    s = aggregate(reps)
    assert s.mean["psnr3d"] == 21 and s.std["psnr3d"] == 1.0
    assert s.mean["lpips"] == 0.1 and s.std["lpips"] == 0.0
    assert s.mean["dice_lung"] is None
    table = render_table(s, "demo")
    assert "| psnr3d | 21.0000 ± 1.0000 |" in table and "| dice_lung | n/a |" in table
