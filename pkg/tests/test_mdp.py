import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

import mdpwatermark as mw
from mdpwatermark.mdp import (
    StationarySolveError,
    cumulative_rows,
    pair_index,
    pair_unindex,
    sample_index,
    validate_stochastic,
)

from conftest import random_kernel, random_policy


# ---------------------------------------------------------------- validation

def test_validate_kernel_passes_on_valid_rows():
    report = mw.validate_kernel(np.array([[0.5, 0.5], [1.0, 0.0]]), n=2, m=1)
    assert report.passed
    assert report.max_row_sum_dev <= 1e-12


def test_validate_kernel_reports_row_sum_deviation():
    report = validate_stochastic(np.array([[0.5, 0.6], [0.5, 0.5]]))
    assert not report.passed
    assert report.bad_rows == (0,)
    assert report.max_row_sum_dev == pytest.approx(0.1)


def test_validate_kernel_flags_negative_entries():
    report = validate_stochastic(np.array([[1.1, -0.1], [0.5, 0.5]]))
    assert not report.passed
    assert (0, 1) in report.negative_entries


def test_construction_rejects_bad_rows_without_renormalizing():
    with pytest.raises(ValueError, match="row-stochastic"):
        mw.TransitionKernel(n=2, m=1, matrix=np.array([[0.5, 0.51], [1.0, 0.0]]))
    with pytest.raises(ValueError, match="row-stochastic"):
        mw.Policy(np.array([[0.7, 0.7]]))


def test_pair_index_round_trip():
    m = 3
    for i in range(4):
        for j in range(m):
            assert pair_unindex(pair_index(i, j, m), m) == (i, j)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000), st.integers(2, 5), st.integers(1, 4))
def test_constructors_accept_random_stochastic_matrices(seed, n, m):
    rng = np.random.default_rng(seed)
    R = random_kernel(rng, n, m)
    g = random_policy(rng, n, m)
    assert np.abs(R.matrix.sum(axis=1) - 1.0).max() <= 1e-12
    assert np.abs(g.matrix.sum(axis=1) - 1.0).max() <= 1e-12


def test_value_types_are_immutable():
    R = mw.TransitionKernel(n=2, m=1, matrix=np.array([[0.5, 0.5], [1.0, 0.0]]))
    with pytest.raises(ValueError):
        R.matrix[0, 0] = 0.9


# ------------------------------------------------------------- chain algebra

def test_induced_chain_deterministic_policy_selects_action_rows():
    rng = np.random.default_rng(0)
    R = random_kernel(rng, 3, 2)
    gamma = mw.deterministic_policy([1, 1, 1], 2)
    L = mw.induced_state_chain(R, gamma)
    np.testing.assert_allclose(L.L, R.as3d[:, 1, :], atol=0)


def test_induced_chain_matches_bruteforce_sum():
    rng = np.random.default_rng(1)
    R = random_kernel(rng, 2, 2)
    gamma = random_policy(rng, 2, 2)
    L = mw.induced_state_chain(R, gamma)
    brute = np.zeros((2, 2))
    for i in range(2):
        for ip in range(2):
            brute[i, ip] = sum(R.matrix[pair_index(i, j, 2), ip] * gamma.matrix[i, j] for j in range(2))
    np.testing.assert_allclose(L.L, brute, atol=1e-15)


def test_induced_chain_mixing_is_affine():
    rng = np.random.default_rng(2)
    R = random_kernel(rng, 4, 3)
    g1, g2 = random_policy(rng, 4, 3), random_policy(rng, 4, 3)
    beta = 0.37
    mixed = mw.Policy((1 - beta) * g1.matrix + beta * g2.matrix)
    lhs = mw.induced_state_chain(R, mixed).L
    rhs = (1 - beta) * mw.induced_state_chain(R, g1).L + beta * mw.induced_state_chain(R, g2).L
    np.testing.assert_allclose(lhs, rhs, atol=1e-14)


def test_joint_chain_preattack_single_pair():
    R = mw.TransitionKernel(n=1, m=1, matrix=np.array([[1.0]]))
    gamma = mw.Policy(np.array([[1.0]]))
    np.testing.assert_array_equal(mw.joint_chain_preattack(R, gamma).P, [[1.0]])


def test_joint_chain_preattack_block_structure():
    rng = np.random.default_rng(3)
    R = random_kernel(rng, 2, 2)
    gamma = random_policy(rng, 2, 2)
    P = mw.joint_chain_preattack(R, gamma).P
    for i in range(2):
        for j in range(2):
            for ip in range(2):
                for jp in range(2):
                    expected = gamma.matrix[ip, jp] * R.matrix[pair_index(i, j, 2), ip]
                    assert P[pair_index(i, j, 2), pair_index(ip, jp, 2)] == pytest.approx(expected, abs=0)


def test_joint_chain_preattack_matches_simulation():
    from conftest import empirical_joint_conditional

    rng = np.random.default_rng(4)
    R = random_kernel(rng, 2, 2)
    gamma = random_policy(rng, 2, 2)
    P = mw.joint_chain_preattack(R, gamma)
    traj = mw.simulate(R, gamma, mw.null_attack(), 1_000_000, root_seed=17)
    freq, totals = empirical_joint_conditional(traj, 2, 2)
    assert totals.min() > 0
    assert np.abs(freq - P.P).max() < 0.01


# ------------------------------------------------------- stationary solvers

def test_stationary_periodic_chain_raises():
    with pytest.raises(StationarySolveError):
        mw.stationary_distribution(np.array([[0.0, 1.0], [1.0, 0.0]]))


def test_stationary_symmetric_two_state():
    pi = mw.stationary_distribution(np.array([[0.5, 0.5], [0.5, 0.5]]))
    np.testing.assert_allclose(pi.pi, [0.5, 0.5], atol=1e-14)


def test_stationary_matches_eigen_solve():
    import scipy.linalg

    rng = np.random.default_rng(5)
    P = rng.dirichlet(np.ones(5), size=5)
    pi = mw.stationary_distribution(P)
    w, vl = scipy.linalg.eig(P, left=True, right=False)
    k = np.argmin(np.abs(w - 1.0))
    ref = np.real(vl[:, k])
    ref = ref / ref.sum()
    np.testing.assert_allclose(pi.pi, ref, atol=1e-10)


def test_stationary_power_iteration_path_matches_dense():
    rng = np.random.default_rng(6)
    P = rng.dirichlet(np.ones(8), size=8)
    dense = mw.stationary_distribution(P)
    power = mw.stationary_distribution(P, dense_limit=4)
    np.testing.assert_allclose(power.pi, dense.pi, atol=1e-9)


# ------------------------------------------------------------- cost algebra

def test_discounted_cost_zero_cost():
    rng = np.random.default_rng(7)
    R = random_kernel(rng, 3, 2)
    gamma = random_policy(rng, 3, 2)
    h = mw.CostFunction(np.zeros((3, 2)))
    np.testing.assert_array_equal(mw.discounted_cost(R, gamma, h, 0.5), np.zeros(3))


def test_discounted_cost_geometric_series():
    R = mw.TransitionKernel(n=1, m=1, matrix=np.array([[1.0]]))
    gamma = mw.Policy(np.array([[1.0]]))
    h = mw.CostFunction(np.array([[1.0]]))
    assert mw.discounted_cost(R, gamma, h, 0.5)[0] == pytest.approx(2.0, abs=1e-14)


def test_discounted_cost_bellman_fixed_point():
    rng = np.random.default_rng(8)
    R = random_kernel(rng, 5, 3)
    gamma = random_policy(rng, 5, 3)
    h = mw.CostFunction(rng.normal(size=(5, 3)))
    alpha = 0.8
    eta = mw.discounted_cost(R, gamma, h, alpha)
    L = mw.induced_state_chain(R, gamma)
    h_gamma = h.averaged(gamma)
    np.testing.assert_allclose(eta, h_gamma + alpha * L.L @ eta, atol=1e-10)


def test_discounted_cost_matches_truncated_monte_carlo():
    rng = np.random.default_rng(9)
    R = random_kernel(rng, 3, 2)
    gamma = random_policy(rng, 3, 2)
    h = mw.CostFunction(rng.normal(size=(3, 2)))
    alpha = 0.7
    eta = mw.discounted_cost(R, gamma, h, alpha)
    # vectorized truncated-sum oracle: 10^5 paths, 60 steps, from state 0
    paths, steps = 100_000, 60
    sim = np.random.default_rng(10)
    x = np.zeros(paths, dtype=np.int64)
    total = np.zeros(paths)
    gcum = cumulative_rows(gamma.matrix)
    rcum = cumulative_rows(R.matrix)
    w = 1.0
    for _ in range(steps):
        u = sim.random(paths)
        a = (gcum[x] <= u[:, None]).sum(axis=1)
        total += w * h.matrix[x, a]
        u2 = sim.random(paths)
        x = (rcum[x * 2 + a] <= u2[:, None]).sum(axis=1)
        w *= alpha
    se = total.std(ddof=1) / math.sqrt(paths)
    assert abs(total.mean() - eta[0]) < 3 * se + abs(eta[0]) * alpha**steps


# ------------------------------------------------------------ the potential

def test_alpha_potential_constant_cost():
    rng = np.random.default_rng(11)
    L = mw.induced_state_chain(random_kernel(rng, 4, 2), random_policy(rng, 4, 2))
    pi = mw.stationary_distribution(L.L, check=False)
    c = 3.7
    g_matrix = mw.alpha_potential(L, np.full(4, c), 0.6, pi, variant="matrix")
    g_def = mw.alpha_potential(L, np.full(4, c), 0.6, pi, variant="definitional")
    np.testing.assert_allclose(g_matrix.g, np.full(4, c), atol=1e-10)
    np.testing.assert_allclose(g_def.g, np.zeros(4), atol=1e-10)


def test_alpha_potential_variants_differ_by_ones_multiple():
    rng = np.random.default_rng(12)
    for seed in range(5):
        local = np.random.default_rng(seed)
        L = mw.induced_state_chain(random_kernel(local, 5, 2), random_policy(local, 5, 2))
        pi = mw.stationary_distribution(L.L, check=False)
        h_gamma = local.normal(size=5)
        gm = mw.alpha_potential(L, h_gamma, 0.5, pi, variant="matrix").g
        gd = mw.alpha_potential(L, h_gamma, 0.5, pi, variant="definitional").g
        diff = gm - gd
        assert np.abs(diff - diff.mean()).max() < 1e-8


def test_alpha_potential_variant_choice_is_invisible_downstream():
    rng = np.random.default_rng(13)
    R = random_kernel(rng, 4, 2)
    g1, g2 = random_policy(rng, 4, 2), random_policy(rng, 4, 2)
    L1, L2 = mw.induced_state_chain(R, g1), mw.induced_state_chain(R, g2)
    pi = mw.stationary_distribution(L1.L, check=False)
    h_gamma = rng.normal(size=4)
    gm = mw.alpha_potential(L1, h_gamma, 0.5, pi, variant="matrix").g
    gd = mw.alpha_potential(L1, h_gamma, 0.5, pi, variant="definitional").g
    np.testing.assert_allclose((L2.L - L1.L) @ gm, (L2.L - L1.L) @ gd, atol=1e-9)


def test_alpha_potential_rejects_non_stationary_pi():
    rng = np.random.default_rng(14)
    L = mw.induced_state_chain(random_kernel(rng, 4, 2), random_policy(rng, 4, 2))
    bad = mw.StationaryDist(np.full(4, 0.25))
    with pytest.raises(ValueError, match="not stationary"):
        mw.alpha_potential(L, np.zeros(4), 0.5, bad)


# ------------------------------------------------------------- minorization

def test_doeblin_all_positive_one_step():
    P = np.array([[0.6, 0.4], [0.5, 0.5]])
    cert = mw.doeblin_certificate(P)
    assert cert.found and cert.m == 1
    assert cert.lam == pytest.approx(0.9)


def test_doeblin_identity_never_found():
    cert = mw.doeblin_certificate(np.eye(3), m_max=16)
    assert not cert.found


def test_doeblin_hand_example():
    cert = mw.doeblin_certificate(np.array([[0.9, 0.1], [0.2, 0.8]]))
    assert cert.m == 1
    assert cert.lam == pytest.approx(0.3, abs=1e-15)
    np.testing.assert_allclose(cert.psi, [2 / 3, 1 / 3], atol=1e-15)


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 10_000), st.integers(2, 6))
def test_doeblin_certificate_minorizes_entrywise(seed, n):
    rng = np.random.default_rng(seed)
    P = rng.dirichlet(np.ones(n), size=n)
    cert = mw.doeblin_certificate(P)
    assert cert.found
    Pm = np.linalg.matrix_power(P, cert.m)
    assert (Pm - cert.lam * cert.psi[None, :] >= -1e-12).all()


# ---------------------------------------------------------------- simulation

def test_simulate_null_attack_reports_truth():
    rng = np.random.default_rng(15)
    R = random_kernel(rng, 3, 2)
    gamma = random_policy(rng, 3, 2)
    traj = mw.simulate(R, gamma, mw.null_attack(), 500, root_seed=1)
    np.testing.assert_array_equal(traj.X, traj.Y)


def test_simulate_same_seed_identical():
    rng = np.random.default_rng(16)
    R = random_kernel(rng, 3, 2)
    gamma = random_policy(rng, 3, 2)
    att = mw.virtual_system_attack(R, gamma)
    t1 = mw.simulate(R, gamma, att, 300, tau=5, root_seed=7, replicate=2)
    t2 = mw.simulate(R, gamma, att, 300, tau=5, root_seed=7, replicate=2)
    np.testing.assert_array_equal(t1.X, t2.X)
    np.testing.assert_array_equal(t1.Y, t2.Y)
    np.testing.assert_array_equal(t1.A, t2.A)
    t3 = mw.simulate(R, gamma, att, 300, tau=5, root_seed=7, replicate=3)
    assert not np.array_equal(t1.A, t3.A)


def test_simulate_truthful_before_onset():
    rng = np.random.default_rng(17)
    R = random_kernel(rng, 3, 2)
    gamma = random_policy(rng, 3, 2)
    phi = mw.AttackMatrix(n=3, matrix=np.random.default_rng(0).dirichlet(np.ones(3), size=9))
    traj = mw.simulate(R, gamma, mw.matrix_attack(phi), 200, tau=50, root_seed=3)
    np.testing.assert_array_equal(traj.X[:50], traj.Y[:50])
    assert (traj.Y[50:] != traj.X[50:]).any()


@pytest.mark.parametrize("attack_name", ["null", "matrix", "predictive", "virtual"])
@pytest.mark.parametrize("tau", [None, 0, 13])
def test_simulate_engines_agree(attack_name, tau):
    rng = np.random.default_rng(18)
    R = random_kernel(rng, 3, 2)
    gamma = random_policy(rng, 3, 2)
    attacks = {
        "null": mw.null_attack(),
        "matrix": mw.matrix_attack(mw.AttackMatrix(n=3, matrix=rng.dirichlet(np.ones(3), size=9))),
        "predictive": mw.predictive_resampling_attack(R, gamma),
        "virtual": mw.virtual_system_attack(R, gamma),
    }
    ref = mw.simulate(R, gamma, attacks[attack_name], 500, tau=tau, root_seed=9, engine="reference")
    fast = mw.simulate(R, gamma, attacks[attack_name], 500, tau=tau, root_seed=9, engine="compiled")
    np.testing.assert_array_equal(ref.X, fast.X)
    np.testing.assert_array_equal(ref.Y, fast.Y)
    np.testing.assert_array_equal(ref.A, fast.A)


def test_simulate_empirical_kernel_frequencies():
    rng = np.random.default_rng(19)
    R = random_kernel(rng, 2, 2)
    gamma = random_policy(rng, 2, 2)
    traj = mw.simulate(R, gamma, mw.null_attack(), 1_000_000, root_seed=23)
    X, A = np.asarray(traj.X), np.asarray(traj.A)
    counts = np.zeros((2, 2, 2))
    np.add.at(counts, (X[:-1], A[:-1], X[1:]), 1)
    freq = counts / counts.sum(axis=2, keepdims=True)
    assert np.abs(freq.reshape(4, 2) - R.matrix).max() < 0.01


def test_sample_index_matches_searchsorted_semantics():
    cum = np.array([0.2, 0.5, 1.0])
    assert sample_index(cum, 0.0) == 0
    assert sample_index(cum, 0.2) == 1  # strict: mass above u
    assert sample_index(cum, 0.999999) == 2
    assert sample_index(cum, 1.0) == 2  # clamped


def test_stationary_dist_constructor_validation():
    with pytest.raises(ValueError, match="negative"):
        mw.StationaryDist(np.array([1.2, -0.2]))
    with pytest.raises(ValueError, match="sum"):
        mw.StationaryDist(np.array([0.4, 0.4]))


def test_stationary_sparse_power_iteration():
    import scipy.sparse

    rng = np.random.default_rng(77)
    dense = rng.dirichlet(np.ones(40), size=40)
    sparse = scipy.sparse.csr_matrix(dense)
    via_sparse = mw.stationary_distribution(sparse, dense_limit=10)
    via_dense = mw.stationary_distribution(dense)
    np.testing.assert_allclose(via_sparse.pi, via_dense.pi, atol=1e-9)
