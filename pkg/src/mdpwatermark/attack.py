"""Feedback-channel attack strategies and post-attack chain constructions.

An attacker replaces the reported observation ``Y_t`` while plant
dynamics continue on the true state.  Strategies with up to two steps of
state memory are representable by an attack matrix ``phi`` of shape
``(n*n, n)`` whose row ``(i, i')`` (flat index ``i*n + i'``) gives the
distribution of the reported ``Y_{t+1}`` after the true transition
``i -> i'``.  The virtual-system strategy exceeds two-step memory (it
carries a hidden simulated state), so strategies are modelled as
factories producing per-trajectory sessions rather than as matrices.

Session protocol used by :func:`mdpwatermark.mdp.simulate`: ``start(x)``
returns the first reported observation at the attack onset, and
``report(x_prev, x_cur, u0, u1)`` returns the next one.  The two
uniforms per step come from the attacker's dedicated random stream;
passing them positionally keeps the compiled simulation path and this
reference path bit-identical.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse

from .mdp import (
    JointChain,
    Policy,
    StationaryDist,
    TransitionKernel,
    _freeze,
    _require_stochastic,
    cumulative_rows,
    pair_index,
    sample_index,
    stationary_distribution,
)

KIND_NULL = 0
KIND_MATRIX = 1
KIND_PREDICTIVE = 2
KIND_VIRTUAL = 3


@dataclass(frozen=True)
class AttackMatrix:
    """Two-step-memory attack kernel; row ``i*n + i'`` covers ``(X=i, X'=i')``."""

    n: int
    matrix: np.ndarray

    def __post_init__(self):
        a = np.asarray(self.matrix, dtype=float)
        if a.shape != (self.n * self.n, self.n):
            raise ValueError(f"attack matrix must have shape {(self.n * self.n, self.n)}, got {a.shape}")
        _require_stochastic(a, "attack matrix")
        object.__setattr__(self, "matrix", _freeze(a))

    def row(self, i: int, i_next: int) -> np.ndarray:
        return self.matrix[i * self.n + i_next]


def null_attack_matrix(n: int) -> AttackMatrix:
    """Matrix encoding of truthful reporting: ``Y_{t+1} = X_{t+1}`` surely."""
    phi = np.zeros((n * n, n))
    for i in range(n):
        for ip in range(n):
            phi[i * n + ip, ip] = 1.0
    return AttackMatrix(n, phi)


class NullAttack:
    """Truthful reporting; the no-attack baseline."""

    kind = "null"
    kind_code = KIND_NULL

    def session(self):
        return _NullSession()


class _NullSession:
    def start(self, x: int) -> int:
        return x

    def report(self, x_prev: int, x_cur: int, u0: float, u1: float) -> int:
        return x_cur


class MatrixAttack:
    """Report ``Y_{t+1}`` drawn from the attack-matrix row of ``(X_t, X_{t+1})``."""

    kind = "matrix"
    kind_code = KIND_MATRIX

    def __init__(self, phi: AttackMatrix):
        self.phi = phi
        self._cum = cumulative_rows(phi.matrix)

    def session(self):
        return _MatrixSession(self.phi.n, self._cum)


class _MatrixSession:
    def __init__(self, n: int, cum: np.ndarray):
        self._n = n
        self._cum = cum

    def start(self, x: int) -> int:
        # No transition observed yet at the onset; report the truth once.
        return x

    def report(self, x_prev: int, x_cur: int, u0: float, u1: float) -> int:
        return sample_index(self._cum[x_prev * self._n + x_cur], u0)


class PredictiveResamplingAttack:
    """Infer the hidden action from the observed transition, then redraw.

    From ``(X_t, X_{t+1})`` the attacker forms the action posterior
    ``P(A_t = j | X_t, X_{t+1})`` proportional to ``gamma[X_t, j] *
    R[(X_t, j), X_{t+1}]``, picks an action estimate (a posterior sample
    by default, or the posterior mode with ``mode="map"``), and reports a
    fresh draw from ``R(.|X_t, estimate)``.
    """

    kind = "predictive"
    kind_code = KIND_PREDICTIVE

    def __init__(self, R: TransitionKernel, gamma: Policy, mode: str = "sample"):
        if gamma.matrix.shape != (R.n, R.m):
            raise ValueError("policy shape does not match kernel")
        if mode not in ("sample", "map"):
            raise ValueError(f"mode must be 'sample' or 'map', got {mode!r}")
        self.R = R
        self.gamma = gamma
        self.mode = mode
        self._rcum = cumulative_rows(R.matrix)

    def session(self):
        return _PredictiveSession(self.R, self.gamma, self._rcum, self.mode)


class _PredictiveSession:
    def __init__(self, R: TransitionKernel, gamma: Policy, rcum: np.ndarray, mode: str):
        self._R = R
        self._gamma = gamma
        self._rcum = rcum
        self._map = mode == "map"

    def start(self, x: int) -> int:
        return x

    def report(self, x_prev: int, x_cur: int, u0: float, u1: float) -> int:
        m = self._R.m
        w = self._gamma.matrix[x_prev] * self._R.matrix[x_prev * m : (x_prev + 1) * m, x_cur]
        total = w.sum()
        # The observed transition has positive probability under the true
        # closed loop, so some action must explain it.
        assert total > 0.0, "observed transition impossible under the attacker's model"
        if self._map:
            a_hat = int(np.argmax(w))
        else:
            a_hat = sample_index(np.cumsum(w), u0 * total)
        return sample_index(self._rcum[pair_index(x_prev, a_hat, m)], u1)


class VirtualSystemAttack:
    """Simulate an independent twin of the closed loop and report its states.

    The attacker knows the plant kernel and the deployed policy
    distribution but not the controller's realized actions.  From the
    onset it runs its own copy of the closed loop (seeded from the true
    state at the onset) with privately drawn actions, and reports the
    twin's states.  ``seed`` optionally fixes a dedicated attacker
    stream; by default the session uses the per-step uniforms supplied
    by the simulator, which come from the replicate's attacker stream.
    """

    kind = "virtual"
    kind_code = KIND_VIRTUAL

    def __init__(self, R: TransitionKernel, gamma: Policy, seed: int | None = None):
        if gamma.matrix.shape != (R.n, R.m):
            raise ValueError("policy shape does not match kernel")
        self.R = R
        self.gamma = gamma
        self.seed = seed
        self._gcum = cumulative_rows(gamma.matrix)
        self._rcum = cumulative_rows(R.matrix)

    def session(self):
        own_rng = None if self.seed is None else np.random.default_rng(self.seed)
        return _VirtualSession(self.R.m, self._gcum, self._rcum, own_rng)


class _VirtualSession:
    def __init__(self, m: int, gcum: np.ndarray, rcum: np.ndarray, own_rng):
        self._m = m
        self._gcum = gcum
        self._rcum = rcum
        self._own_rng = own_rng
        self._xhat = -1

    def start(self, x: int) -> int:
        self._xhat = x
        return x

    def report(self, x_prev: int, x_cur: int, u0: float, u1: float) -> int:
        if self._own_rng is not None:
            u0 = self._own_rng.random()
            u1 = self._own_rng.random()
        a_hat = sample_index(self._gcum[self._xhat], u0)
        self._xhat = sample_index(self._rcum[pair_index(self._xhat, a_hat, self._m)], u1)
        return self._xhat


def null_attack() -> NullAttack:
    return NullAttack()


def matrix_attack(phi: AttackMatrix) -> MatrixAttack:
    return MatrixAttack(phi)


def predictive_resampling_attack(R: TransitionKernel, gamma: Policy, mode: str = "sample") -> PredictiveResamplingAttack:
    return PredictiveResamplingAttack(R, gamma, mode)


def virtual_system_attack(R: TransitionKernel, gamma: Policy, seed: int | None = None) -> VirtualSystemAttack:
    return VirtualSystemAttack(R, gamma, seed)


def joint_chain_postattack(R: TransitionKernel, gamma: Policy, phi: AttackMatrix) -> JointChain:
    """Post-attack (state, action) chain.

    The next action is drawn from the policy row of the *reported*
    observation, so ``P[(i,j), (i',j')] = R[(i,j), i'] * sum_l phi[(i,i'),
    l] * gamma[l, j']``.
    """
    n, m = R.n, R.m
    if gamma.matrix.shape != (n, m):
        raise ValueError("policy shape does not match kernel")
    if phi.n != n:
        raise ValueError("attack matrix state count does not match kernel")
    # C[i, i', j'] = sum_l phi[(i,i'), l] * gamma[l, j']
    C = (phi.matrix @ gamma.matrix).reshape(n, n, m)
    P = R.as3d[:, :, :, None] * C[:, None, :, :]  # (i, j, i', j')
    return JointChain(m, P.reshape(n * m, n * m))


@dataclass(frozen=True)
class ExtendedChain:
    """Markov chain of triples ``z = (x, a, y)`` under a matrix attack.

    Flat index ``(x*m + a)*n + y``.  The one-step law factorizes as
    ``P(z -> z') = R[(x,a), x'] * phi[(x,x'), y'] * gamma[y', a']`` and in
    particular does not depend on ``y``, so the kernel has at most
    ``n*m`` distinct rows.  Stored sparse; the support is the set of
    structurally positive entries.
    """

    n: int
    m: int
    kernel: scipy.sparse.csr_matrix

    @property
    def dim(self) -> int:
        return self.n * self.m * self.n

    def index(self, x: int, a: int, y: int) -> int:
        return (x * self.m + a) * self.n + y

    def unindex(self, z: int) -> tuple[int, int, int]:
        y = z % self.n
        xa = z // self.n
        return xa // self.m, xa % self.m, y

    def stationary(self, **kwargs) -> StationaryDist:
        return stationary_distribution(self.kernel, **kwargs)

    def pi_tensor(self, pi: StationaryDist) -> np.ndarray:
        """Stationary mass reshaped to ``(x, a, y)``."""
        return pi.pi.reshape(self.n, self.m, self.n)

    def marginal_y(self, pi: StationaryDist) -> np.ndarray:
        """Observation marginal ``pi_Y(l)``."""
        return self.pi_tensor(pi).sum(axis=(0, 1))

    def marginal_ya(self, pi: StationaryDist) -> np.ndarray:
        """Observation-action marginal ``pi_YA[l, j]``."""
        return self.pi_tensor(pi).sum(axis=0).T

    def marginal_xa(self, pi: StationaryDist) -> np.ndarray:
        """State-action marginal ``pi_XA[i, j]``."""
        return self.pi_tensor(pi).sum(axis=2)


def extended_chain(R: TransitionKernel, gamma: Policy, phi: AttackMatrix) -> ExtendedChain:
    """Build the (state, action, observation) chain for a matrix attack."""
    n, m = R.n, R.m
    if gamma.matrix.shape != (n, m):
        raise ValueError("policy shape does not match kernel")
    if phi.n != n:
        raise ValueError("attack matrix state count does not match kernel")
    R3 = R.as3d  # (x, a, x')
    F3 = phi.matrix.reshape(n, n, n)  # (x, x', y')
    # rows[x, a, x', a', y'] = R3[x,a,x'] * F3[x,x',y'] * gamma[y',a']
    rows = np.einsum("ijk,ikl,lq->ijkql", R3, F3, gamma.matrix)
    unique = rows.reshape(n * m, n * m * n)
    base = scipy.sparse.csr_matrix(unique)
    kernel = base[np.repeat(np.arange(n * m), n)].tocsr()
    sums = np.asarray(kernel.sum(axis=1)).ravel()
    if np.abs(sums - 1.0).max() > 1e-10:
        raise ValueError("extended chain rows do not sum to one")
    return ExtendedChain(n=n, m=m, kernel=kernel)
