import math

import numpy as np
import pytest

from codedstereo.errors import UsageError
from codedstereo.optics import NUM_COEFFICIENTS, OpticalConfig, PhaseMask, compute_psf_stack, fisher_objective
from codedstereo.optimize import (RGB_ONLY, Adam, calibrated_threshold, compare_masks, cosine_lr,
                                  evaluate_mask, fd_gradient, gamma_ablation, make_fisher_mask,
                                  optimize_mask, random_init, weights_for_gamma)
from codedstereo.recon import LossWeights
from codedstereo.scenes import band_scene

# Reduced optics keep pipeline evaluations around 0.1 s.
SMALL = OpticalConfig(mask_grid_size=31, num_disparity_levels=5, psf_kernel_size=32, psf_supersample=1)


@pytest.fixture(scope="module")
def scenes():
    return [band_scene((32, 224), [30, 90], seed=1), band_scene((32, 224), [140, 60], seed=2)]


def test_evaluate_deterministic_and_decomposed(scenes):
    mask = random_init(3, 50e-9, 31)
    a = evaluate_mask(mask, scenes, SMALL, sigma=0.02, seed=5)
    b = evaluate_mask(mask, scenes, SMALL, sigma=0.02, seed=5)
    assert a.loss == b.loss
    assert a.loss == pytest.approx(a.loss_disp + a.loss_rgb)
    assert a.report.per_disparity_psnr.shape == (5,)
    c = evaluate_mask(mask, scenes, SMALL, sigma=0.02, seed=6)
    assert c.loss != a.loss


def test_gradient_of_quadratic_is_exact():
    target = np.linspace(-1, 1, NUM_COEFFICIENTS) * 1e-7
    obj = lambda c: float(np.sum((c - target) ** 2))
    g = fd_gradient(PhaseMask.flat(31), 20e-9, objective=obj)
    expected = -2 * target
    expected[0] = 0.0
    np.testing.assert_allclose(g, expected, rtol=1e-6, atol=1e-12)
    g2 = fd_gradient(PhaseMask.flat(31), 20e-9, objective=obj, indices=[0, 4, 9])
    assert np.count_nonzero(g2) == 2 and g2[4] == pytest.approx(expected[4])


def test_gradient_usage_errors():
    with pytest.raises(UsageError):
        fd_gradient(PhaseMask.flat(31), 0.0, objective=lambda c: 0.0)
    with pytest.raises(UsageError):
        fd_gradient(PhaseMask(np.zeros((5, 5))), 1e-8, objective=lambda c: 0.0)


def test_pipeline_gradient_piston_zero(scenes):
    g = fd_gradient(random_init(1, 50e-9, 31), 20e-9, scenes[:1], SMALL, indices=[0, 3, 4])
    assert g[0] == 0.0
    assert np.isfinite(g).all()


def test_adam_first_step_and_convergence():
    adam = Adam(3, 0.1)
    step = adam.step(np.array([5.0, -0.01, 0.0]))
    np.testing.assert_allclose(step[:2], [-0.1, 0.1], rtol=1e-5)
    assert step[2] == 0
    x = np.array([3.0, -2.0])
    adam = Adam(2, 0.05)
    for _ in range(2000):
        x = x + adam.step(2 * x)
    assert np.abs(x).max() < 1e-2


def test_cosine_schedule():
    assert cosine_lr(1.0, 0, 10) == 1.0
    assert cosine_lr(1.0, 5, 10) == pytest.approx(0.5)
    assert cosine_lr(1.0, 10, 10) == pytest.approx(0.0)


def test_random_init():
    m = random_init(4, 20e-9, 31)
    assert m.coefficients[0] == 0
    assert np.std(m.coefficients[1:]) == pytest.approx(20e-9, rel=0.3)
    assert random_init(4, 20e-9, 31) == m


def test_zero_lr_keeps_mask(scenes):
    init = random_init(2, 30e-9, 31)
    rep = optimize_mask(init, scenes, SMALL, iters=2, lr=0.0)
    np.testing.assert_array_equal(rep.last_mask.coefficients, init.coefficients)
    assert all(r.step_l2 == 0 for r in rep.iterations)
    assert rep.iterations[0].loss == rep.iterations[1].loss == rep.best_loss == rep.initial_loss


def test_optimize_deterministic_and_piston_preserved(scenes):
    init = PhaseMask.from_coefficients(np.r_[1e-7, np.zeros(54)], 31)
    a = optimize_mask(init, scenes, SMALL, iters=1, lr=50e-9, seed=3)
    b = optimize_mask(init, scenes, SMALL, iters=1, lr=50e-9, seed=3)
    np.testing.assert_array_equal(a.last_mask.coefficients, b.last_mask.coefficients)
    assert a.last_mask.coefficients[0] == 1e-7
    assert a.iterations[0].step_l2 > 0
    csv = a.to_csv().splitlines()
    assert csv[0] == "iter,loss,loss_disp,loss_rgb,psnr,epe,step_l2" and len(csv) == 2


def test_optimize_usage_errors(scenes):
    with pytest.raises(UsageError):
        optimize_mask(PhaseMask.flat(31), scenes, SMALL, iters=0)
    with pytest.raises(UsageError):
        optimize_mask(PhaseMask.flat(31), scenes, SMALL, lr=-1.0)
    with pytest.raises(UsageError):
        optimize_mask(PhaseMask.flat(31), [], SMALL)


def test_fisher_mask_beats_flat():
    mask, history = make_fisher_mask(SMALL, iters=1)
    assert mask.provenance == "fisher"
    flat = fisher_objective(compute_psf_stack(PhaseMask.flat(31), SMALL), SMALL)
    assert fisher_objective(compute_psf_stack(mask, SMALL), SMALL) > flat
    assert len(history) == 2


def test_compare_masks_table(scenes):
    table = compare_masks([("rand", random_init(1, 50e-9, 31))], scenes, SMALL, sigma=0.01)
    assert [r.name for r in table.rows] == ["flat-F32", "flat-F8", "rand"]
    assert table.row("flat-F32").sigma == pytest.approx(0.16)
    assert table.row("flat-F8").sigma == pytest.approx(0.01)
    assert table.dof_ratio("flat-F8") == pytest.approx(1.0) or math.isnan(table.dof_ratio("flat-F8"))
    assert "DOF[m]" in table.to_text()
    assert len(table.to_csv().splitlines()) == 4
    assert len(table.curves_csv().splitlines()) == 6
    with pytest.raises(KeyError):
        table.row("absent")


def test_calibrated_threshold():
    assert calibrated_threshold([np.array([1.0, np.nan, 3.0]), np.array([2.0])]) == 2.0


def test_gamma_weights():
    assert weights_for_gamma(RGB_ONLY) == LossWeights((0.0, 0.0, 0.0), 1.0)
    assert weights_for_gamma(0.1).gamma == 0.1
    with pytest.raises(UsageError):
        gamma_ablation([], [])
    with pytest.raises(UsageError):
        gamma_ablation([-1.0], [])


def test_gradient_matches_fresh_central_difference(scenes):
    # Slope along each differentiated coordinate, re-measured with an independent step.
    from codedstereo.optimize import MaskObjective

    mask = random_init(7, 60e-9, 31)
    objective = MaskObjective(scenes, SMALL, LossWeights(), 0.02, 4, 31)
    idx = sorted(np.random.default_rng(3).choice(np.arange(1, NUM_COEFFICIENTS), 3, replace=False).tolist())
    g = fd_gradient(mask, 20e-9, objective=objective, indices=idx)
    c = mask.coefficients
    h = 13e-9
    for j in idx:
        e = np.zeros(NUM_COEFFICIENTS)
        e[j] = h
        slope = (objective(c + e) - objective(c - e)) / (2 * h)
        assert g[j] == pytest.approx(slope, rel=0.10)
