import numpy as np
import pytest
import scipy.linalg

import mdpwatermark as mw
from mdpwatermark.watermark import ReducibleChainError, loss_report, perturbation_matrix

from conftest import random_kernel, random_policy


def _fd_derivative(R, gamma_star, nu, h, alpha, step=1e-4):
    """Central finite difference of the exact discounted cost in beta.

    Works on raw matrices so the negative-beta probe is allowed.
    """
    R3 = R.matrix.reshape(R.n, R.m, R.n)

    def eta(beta):
        g = (1 - beta) * gamma_star.matrix + beta * nu.matrix
        L = np.einsum("ijk,ij->ik", R3, g)
        hg = np.einsum("ij,ij->i", h.matrix, g)
        return scipy.linalg.solve(np.eye(R.n) - alpha * L, hg)

    return (eta(step) - eta(-step)) / (2 * step)


def test_mix_policy_endpoints():
    rng = np.random.default_rng(0)
    g = random_policy(rng, 3, 2)
    nu = random_policy(rng, 3, 2)
    np.testing.assert_array_equal(mw.mix_policy(g, mw.WatermarkSpec(nu=nu, beta=0.0)).matrix, g.matrix)
    np.testing.assert_array_equal(mw.mix_policy(g, mw.WatermarkSpec(nu=nu, beta=1.0)).matrix, nu.matrix)


def test_watermark_spec_validates_magnitude():
    nu = mw.uniform_policy(2, 2)
    with pytest.raises(ValueError, match="magnitude"):
        mw.WatermarkSpec(nu=nu, beta=1.5)


def test_mix_threshold_policy_matches_stochastic_threshold(sensornet_model):
    params = sensornet_model["params"]
    g_det = mw.threshold_policy(params, 3)
    flip = mw.threshold_policy(params, 3, beta=1.0)
    mixed = mw.mix_policy(g_det, mw.WatermarkSpec(nu=flip, beta=0.05))
    np.testing.assert_allclose(mixed.matrix, mw.threshold_policy(params, 3, beta=0.05).matrix, atol=1e-15)
    # below the threshold, performance mode keeps probability 1 - beta
    assert mixed.matrix[0, 1] == pytest.approx(0.95)


def test_control_loss_zero_for_identical_policies():
    rng = np.random.default_rng(1)
    R = random_kernel(rng, 3, 2)
    g = random_policy(rng, 3, 2)
    h = mw.CostFunction(rng.normal(size=(3, 2)))
    gap = mw.control_loss_exact(R, g, g, h, 0.6)
    np.testing.assert_allclose(gap.direct, 0.0, atol=1e-12)
    np.testing.assert_allclose(gap.identity_rhs, 0.0, atol=1e-12)


def test_perturbation_identity_common_cost():
    rng = np.random.default_rng(2)
    for seed in range(20):
        local = np.random.default_rng(seed)
        R = random_kernel(local, 4, 3)
        g1, g2 = random_policy(local, 4, 3), random_policy(local, 4, 3)
        h = mw.constant_action_cost(local.normal(size=4), 3)
        gap = mw.control_loss_exact(R, g1, g2, h, 0.75)
        np.testing.assert_allclose(gap.direct, gap.identity_rhs, atol=1e-9)


def test_control_loss_rejects_reducible_chain():
    R = mw.TransitionKernel(n=2, m=1, matrix=np.eye(2))
    g = mw.Policy(np.ones((2, 1)))
    h = mw.CostFunction(np.zeros((2, 1)))
    with pytest.raises(ReducibleChainError):
        mw.control_loss_exact(R, g, g, h, 0.5)


def test_derivative_zero_when_watermark_equals_policy():
    rng = np.random.default_rng(3)
    R = random_kernel(rng, 3, 2)
    g = random_policy(rng, 3, 2)
    h = mw.CostFunction(rng.normal(size=(3, 2)))
    for mode in ("kernel_only", "full"):
        np.testing.assert_allclose(mw.control_loss_derivative(R, g, g, h, 0.5, mode=mode), 0.0, atol=1e-12)


def dyadic_policy(rng, n, m, denom=64):
    """Row-stochastic matrix of dyadic rationals: row sums are exactly 1.0."""
    while True:
        raw = rng.integers(1, denom, size=(n, m))
        rows = raw / raw.sum(axis=1, keepdims=True)
        mat = np.round(rows * denom) / denom
        mat[:, -1] = 1.0 - mat[:, :-1].sum(axis=1)
        if (mat > 0).all() and (mat.sum(axis=1) == 1.0).all():
            return mw.Policy(mat)


def test_kernel_only_equals_full_for_action_independent_cost():
    # dyadic instances make the cost-averaging arithmetic exact, so the
    # correction term vanishes bitwise and the two modes coincide exactly
    rng = np.random.default_rng(4)
    for _ in range(10):
        n, m = 4, 3
        R = random_kernel(rng, n, m)
        g, nu = dyadic_policy(rng, n, m), dyadic_policy(rng, n, m)
        h = mw.constant_action_cost(rng.integers(-8, 8, size=n) / 8.0, m)
        d_kernel = mw.control_loss_derivative(R, nu, g, h, 0.7, mode="kernel_only")
        d_full = mw.control_loss_derivative(R, nu, g, h, 0.7, mode="full")
        np.testing.assert_array_equal(d_kernel, d_full)
    # on continuous instances the correction is pure round-off
    R = random_kernel(rng, 4, 3)
    g, nu = random_policy(rng, 4, 3), random_policy(rng, 4, 3)
    h = mw.constant_action_cost(rng.normal(size=4), 3)
    d_kernel = mw.control_loss_derivative(R, nu, g, h, 0.7, mode="kernel_only")
    d_full = mw.control_loss_derivative(R, nu, g, h, 0.7, mode="full")
    np.testing.assert_allclose(d_kernel, d_full, atol=1e-12)


def test_full_derivative_matches_finite_differences_action_dependent():
    worst = 0.0
    for seed in range(30):
        rng = np.random.default_rng(seed)
        R = random_kernel(rng, 3, 2)
        g, nu = random_policy(rng, 3, 2), random_policy(rng, 3, 2)
        h = mw.CostFunction(rng.normal(size=(3, 2)))
        alpha = rng.uniform(0.2, 0.9)
        d = mw.control_loss_derivative(R, nu, g, h, alpha, mode="full")
        fd = _fd_derivative(R, g, nu, h, alpha)
        worst = max(worst, np.abs(d - fd).max() / max(np.abs(fd).max(), 1e-12))
    assert worst <= 1e-3


def test_kernel_only_derivative_misses_cost_vector_change():
    # with action-dependent cost the two modes genuinely differ
    rng = np.random.default_rng(5)
    R = random_kernel(rng, 3, 2)
    g, nu = random_policy(rng, 3, 2), random_policy(rng, 3, 2)
    h = mw.CostFunction(rng.normal(size=(3, 2)))
    d_kernel = mw.control_loss_derivative(R, nu, g, h, 0.6, mode="kernel_only")
    fd = _fd_derivative(R, g, nu, h, 0.6)
    assert np.abs(d_kernel - fd).max() > 1e-3


def test_derivative_positive_at_numerically_optimal_sensornet_policy(sensornet_model):
    params, R, h = sensornet_model["params"], sensornet_model["R"], sensornet_model["h"]
    best, _ = mw.find_optimal_threshold(params, range(0, params.n_queue + 1))
    # evaluation flattens among near-optimal thresholds; the always-active
    # policy attains the same cost and is the value-iteration optimum
    g_opt = mw.threshold_policy(params, params.n_queue)
    for nu in (mw.uniform_policy(R.n, R.m), mw.threshold_policy(params, params.n_queue, beta=1.0)):
        d = mw.control_loss_derivative(R, nu, g_opt, h, params.alpha, mode="full")
        assert (d > 0).all()


def test_sensornet_loss_small_versus_attack_damage_scale(sensornet_model):
    params, R, h = sensornet_model["params"], sensornet_model["R"], sensornet_model["h"]
    g3 = mw.threshold_policy(params, 3)
    flip = mw.threshold_policy(params, 3, beta=1.0)
    gt = mw.mix_policy(g3, mw.WatermarkSpec(nu=flip, beta=0.05))
    gap = mw.control_loss_exact(R, g3, gt, h, params.alpha)
    loss_at_start = gap.direct[0]
    assert 0 < loss_at_start < 3.0
    # the reported cost under a successful attack (-11.65) is ~20 cost units
    # above the clean optimum; the watermark's price is far below that gap
    eta0 = mw.discounted_cost(R, g3, h, params.alpha)[0]
    attack_damage = abs(-11.65 - eta0)
    assert loss_at_start < 0.2 * attack_damage


def test_sensornet_loss_approximately_linear_below_point_one(sensornet_model):
    params, R, h = sensornet_model["params"], sensornet_model["R"], sensornet_model["h"]
    g3 = mw.threshold_policy(params, 3)
    flip = mw.threshold_policy(params, 3, beta=1.0)
    betas = np.array([0.01, 0.02, 0.05, 0.08, 0.1])
    losses = []
    for b in betas:
        gt = mw.mix_policy(g3, mw.WatermarkSpec(nu=flip, beta=b))
        losses.append(mw.control_loss_exact(R, g3, gt, h, params.alpha).direct[0])
    losses = np.array(losses)
    slope = losses @ betas / (betas @ betas)
    assert np.abs(losses - slope * betas).max() < 0.05 * losses.max()


def test_loss_report_fields_consistent():
    rng = np.random.default_rng(6)
    R = random_kernel(rng, 3, 2)
    g, nu = random_policy(rng, 3, 2), random_policy(rng, 3, 2)
    h = mw.CostFunction(rng.normal(size=(3, 2)))
    spec = mw.WatermarkSpec(nu=nu, beta=0.1)
    report = loss_report(R, g, spec, h, 0.6)
    np.testing.assert_allclose(
        report.derivative_kernel_only,
        0.6 * report.B @ mw.alpha_potential(
            mw.induced_state_chain(R, g), h.averaged(g), 0.6,
            mw.stationary_distribution(mw.induced_state_chain(R, g).L, check=False),
        ).g,
        atol=1e-10,
    )
    assert report.B.shape == (3, 3)
    assert len(report.csv_row()) == len(report.csv_header())
    B2 = perturbation_matrix(R, nu, g, 0.6)
    np.testing.assert_allclose(report.B, B2, atol=0)
