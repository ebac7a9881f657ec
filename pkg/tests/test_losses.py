import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from duolift.losses import (
    LossReport, LossWeights, adv_discriminator_loss, adv_generator_loss, masked_losses,
    recon_losses, total_losses,
)
from oracles import central_fd, loop_adv, loop_recon


def t64(x):
    return torch.as_tensor(np.asarray(x, dtype=np.float64))


def test_recon_identity_and_constant_case():
    a = t64(np.random.default_rng(0).random((4, 4, 4)))
    assert [float(v) for v in recon_losses(a, a)] == [0.0, 0.0]
    mse, l1 = recon_losses(torch.zeros(4, 4, 4), torch.full((4, 4, 4), 0.5))
    assert float(mse) == 0.25 and float(l1) == 0.5


@pytest.mark.parametrize("seed", range(3))
def test_recon_matches_loop(seed):
    rng = np.random.default_rng(seed)
    a, b = rng.random((2, 4, 4, 4))
    mse, l1 = recon_losses(t64(a), t64(b))
    emse, el1 = loop_recon(a, b)
    assert abs(float(mse) - emse) < 1e-7 and abs(float(l1) - el1) < 1e-7


@pytest.mark.parametrize("seed", range(3))
def test_masked_matches_loop(seed):
    rng = np.random.default_rng(seed + 10)
    a, b = rng.random((2, 4, 4, 4))
    m = rng.random((4, 4, 4)) > 0.5
    mse, l1 = masked_losses(t64(a), t64(b), t64(m))
    emse, el1 = loop_recon(a, b, m)
    assert abs(float(mse) - emse) < 1e-7 and abs(float(l1) - el1) < 1e-7


def test_masked_zero_mask_and_hand_case():
    rng = np.random.default_rng(1)
    a, b = t64(rng.random((4, 4, 4))), t64(rng.random((4, 4, 4)))
    assert [float(v) for v in masked_losses(a, b, torch.zeros(4, 4, 4))] == [0.0, 0.0]
    # half of a 2x2x2 grid masked, |I - Ihat| = 0.5 inside
    mask = torch.zeros(2, 2, 2)
    mask[0] = 1
    mse, l1 = masked_losses(torch.zeros(2, 2, 2), torch.full((2, 2, 2), 0.5), mask)
    assert float(mse) == pytest.approx(0.125, abs=1e-12)
    assert float(l1) == pytest.approx(0.25, abs=1e-12)


def test_masked_ignores_outside_perturbation():
    rng = np.random.default_rng(2)
    a, b = rng.random((2, 4, 4, 4))
    m = rng.random((4, 4, 4)) > 0.5
    b2 = b.copy()
    b2[~m] = rng.random(int((~m).sum()))
    assert [float(v) for v in masked_losses(t64(a), t64(b), t64(m))] == \
        [float(v) for v in masked_losses(t64(a), t64(b2), t64(m))]


def test_shape_mismatch_rejected():
    with pytest.raises(ValueError):
        recon_losses(torch.zeros(4, 4, 4), torch.zeros(4, 4, 2))
    with pytest.raises(ValueError):
        masked_losses(torch.zeros(4, 4, 4), torch.zeros(4, 4, 4), torch.zeros(2, 4, 4))
    with pytest.raises(ValueError):
        adv_discriminator_loss(torch.full((5, 5, 5), 0.5), torch.full((4, 5, 5), 0.5))
    with pytest.raises(ValueError):
        adv_generator_loss(torch.tensor([0.5, float("nan")]))


def test_adv_closed_forms():
    assert float(adv_generator_loss(t64(np.full((5, 5, 5), 0.1)))) == pytest.approx(2.302585, abs=1e-5)
    assert float(adv_generator_loss(t64(np.full((5, 5, 5), 1.0)))) == pytest.approx(0.0, abs=1e-6)
    d = adv_discriminator_loss(t64(np.full((5, 5, 5), 0.9)), t64(np.full((5, 5, 5), 0.1)))
    assert float(d) == pytest.approx(0.210721, abs=1e-5)
    d = adv_discriminator_loss(t64(np.full((5, 5, 5), 0.5)), t64(np.full((5, 5, 5), 0.5)))
    assert float(d) == pytest.approx(2 * math.log(2), abs=1e-6)


@pytest.mark.parametrize("seed", range(3))
def test_adv_per_cell_oracle(seed):
    rng = np.random.default_rng(seed)
    real, fake = rng.random((2, 5, 5, 5))
    fake[0, 0, 0] = 0.0  # exercises the clamp
    g, d = loop_adv(real, fake)
    assert abs(float(adv_generator_loss(t64(fake))) - g) < 1e-7
    assert abs(float(adv_discriminator_loss(t64(real), t64(fake))) - d) < 1e-7


def autograd(f, x):
    xt = torch.tensor(x, requires_grad=True)
    f(xt).backward()
    return xt.grad.numpy()


@pytest.mark.parametrize("which", ["recon_mse", "recon_l1", "inside_mse", "inside_l1", "adv_g", "adv_d"])
def test_gradients_match_finite_differences(which):
    rng = np.random.default_rng(4)
    target = rng.random((3, 3, 3))
    mask = t64(rng.random((3, 3, 3)) > 0.4)
    real = t64(rng.uniform(0.2, 0.8, (3, 3, 3)))
    fns = {
        "recon_mse": lambda v: recon_losses(t64(target), v)[0],
        "recon_l1": lambda v: recon_losses(t64(target), v)[1],
        "inside_mse": lambda v: masked_losses(t64(target), v, mask)[0],
        "inside_l1": lambda v: masked_losses(t64(target), v, mask)[1],
        "adv_g": lambda v: adv_generator_loss(v),
        "adv_d": lambda v: adv_discriminator_loss(real, v),
    }
    f = fns[which]
    x = rng.uniform(0.1, 0.9, (3, 3, 3))
    x[np.abs(x - target) < 1e-3] += 0.01  # keep away from the L1 kink
    num = central_fd(lambda a: float(f(torch.as_tensor(a))), x)
    ana = autograd(lambda v: f(v), x)
    np.testing.assert_allclose(ana, num, rtol=1e-4, atol=1e-9)


def test_inside_gradient_zero_outside_mask():
    rng = np.random.default_rng(5)
    target, x = rng.random((2, 3, 3, 3))
    m = rng.random((3, 3, 3)) > 0.5
    for k in (0, 1):
        g = autograd(lambda v: masked_losses(t64(target), v, t64(m))[k], x)
        assert (g[~m] == 0).all()
        assert (g[m] != 0).all()


def test_total_losses_modes():
    parts = {"recon_mse": 0.1, "recon_l1": 0.2, "inside_mse": 0.03, "inside_l1": 0.04, "adv_g": 0.7,
             "adv_d": 1.3}
    gan = total_losses(parts, LossWeights(), "GAN", use_masked=True)
    assert gan.total_g == pytest.approx(1.0 * (0.1 + 0.2 + 0.03 + 0.04) + 0.01 * 0.7)
    assert gan.total_d == pytest.approx(0.01 * 1.3)
    cnn = total_losses(parts, LossWeights(), "CNN", use_masked=False)
    assert cnn.total_g == pytest.approx(0.1 + 0.2) and cnn.total_d == 0.0 and cnn.adv_g == 0.0
    abl1 = total_losses(parts, LossWeights(), "GAN", use_masked=False)
    assert abl1.inside_mse == abl1.inside_l1 == 0.0
    assert abl1.total_g == pytest.approx(0.3 + 0.007)


@settings(max_examples=30, deadline=None)
@given(st.lists(st.floats(0, 10), min_size=6, max_size=6), st.floats(0, 5), st.floats(0, 5),
       st.sampled_from([1.0, 2.0, 0.5, 4.0]))
def test_report_invariant_and_alpha_linearity(vals, alpha, beta, k):
    parts = dict(zip(LossReport.FIELDS[:6], vals))
    r = total_losses(parts, LossWeights(alpha, beta), "GAN", True)
    sim = r.recon_mse + r.recon_l1 + r.inside_mse + r.inside_l1
    assert r.total_g == pytest.approx(alpha * sim + beta * r.adv_g)
    assert r.total_d == pytest.approx(beta * r.adv_d)
    rk = total_losses(parts, LossWeights(alpha * k, beta), "GAN", True)
    assert rk.total_g - beta * rk.adv_g == pytest.approx(k * (r.total_g - beta * r.adv_g))


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2 ** 16))
def test_similarity_losses_nonnegative_zero_iff_equal(seed):
    rng = np.random.default_rng(seed)
    a, b = t64(rng.random((3, 3, 3))), t64(rng.random((3, 3, 3)))
    assert all(float(v) > 0 for v in recon_losses(a, b))
    assert all(float(v) == 0 for v in recon_losses(a, a))


def test_report_line_round_trip():
    r = LossReport(0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8)
    assert r.to_line() == "0.100000 0.200000 0.300000 0.400000 0.500000 0.600000 0.700000 0.800000"
    assert LossReport.from_line(r.to_line()) == r
