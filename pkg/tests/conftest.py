import numpy as np
import pytest

import mdpwatermark as mw


@pytest.fixture(scope="session")
def two_state():
    """2-state 2-action instance with a stealthy matrix attack.

    Full-support kernel, watermarked policy and attack matrix, so every
    limit-law ingredient is well defined.
    """
    R = mw.TransitionKernel(
        n=2, m=2,
        matrix=np.array([
            [0.8, 0.2],
            [0.3, 0.7],
            [0.6, 0.4],
            [0.2, 0.8],
        ]),
    )
    gamma_star = mw.deterministic_policy([0, 1], 2)
    nu = mw.uniform_policy(2, 2)
    gamma = mw.mix_policy(gamma_star, mw.WatermarkSpec(nu=nu, beta=0.3))
    phi = mw.AttackMatrix(
        n=2,
        matrix=np.array([
            [0.75, 0.25],
            [0.25, 0.75],
            [0.75, 0.25],
            [0.25, 0.75],
        ]),
    )
    h = mw.CostFunction(np.array([[1.0, 0.5], [0.0, 2.0]]))
    return {"R": R, "gamma_star": gamma_star, "nu": nu, "gamma": gamma, "phi": phi, "h": h}


@pytest.fixture(scope="session")
def sensornet_model():
    params = mw.PowerModelParams()
    R, h = mw.build_model(params)
    return {"params": params, "R": R, "h": h}


def random_kernel(rng, n, m):
    return mw.TransitionKernel(n=n, m=m, matrix=rng.dirichlet(np.ones(n), size=n * m))


def random_policy(rng, n, m):
    return mw.Policy(rng.dirichlet(np.ones(m), size=n))


def empirical_joint_conditional(traj, n, m):
    """Empirical (state, action) -> (state, action) transition frequencies."""
    codes = np.asarray(traj.X) * m + np.asarray(traj.A)
    counts = np.zeros((n * m, n * m))
    np.add.at(counts, (codes[:-1], codes[1:]), 1)
    totals = counts.sum(axis=1, keepdims=True)
    return np.divide(counts, totals, out=np.zeros_like(counts), where=totals > 0), totals.ravel()


def empirical_obs_conditional(ys, acts, n, m):
    """Empirical conditional law of the next observation given (obs, action)."""
    ys = np.asarray(ys)
    acts = np.asarray(acts)
    counts = np.zeros((n, m, n))
    np.add.at(counts, (ys[:-1], acts[: len(ys) - 1], ys[1:]), 1)
    totals = counts.sum(axis=2, keepdims=True)
    return np.divide(counts, totals, out=np.zeros_like(counts), where=totals > 0), totals[..., 0]
