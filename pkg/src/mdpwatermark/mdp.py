"""Finite-MDP data model and core chain computations.

A finite Markov decision process with ``n`` states and ``m`` actions is
described by a transition kernel ``R`` stored as an ``(n*m, n)``
row-stochastic matrix, a stochastic policy ``gamma`` stored as an
``(n, m)`` row-stochastic matrix, and a step-cost table ``h`` of shape
``(n, m)``.  The flat kernel row for the pair (state ``i``, action ``j``)
is ``k = i*m + j`` (0-based; the same interleaving as the 1-based
``k = (i-1)*m + j`` convention).

The module provides:

* validated value types for kernels, policies, costs and chains,
* the policy-induced state chain and the pre-attack joint
  (state, action) chain,
* stationary distributions (dense solve or power iteration),
* discounted cost and the discounted deviation-from-average potential,
* minorization (Doeblin) certificates for uniform ergodicity,
* closed-loop trajectory simulation under an attack strategy.

All value types are immutable after construction and safe to share
across threads.  Row-stochasticity is checked to ``1e-12`` on
construction and inputs that fail are rejected; nothing is silently
renormalized.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import scipy.linalg
import scipy.sparse

from . import rng as _rng

ROW_SUM_TOL = 1e-12


class StationarySolveError(RuntimeError):
    """Stationary distribution could not be certified or did not converge."""


def pair_index(i: int, j: int, m: int) -> int:
    """Flat kernel-row index of (state ``i``, action ``j``)."""
    return i * m + j


def pair_unindex(k: int, m: int) -> tuple[int, int]:
    """Inverse of :func:`pair_index`."""
    return k // m, k % m


def _freeze(a: np.ndarray) -> np.ndarray:
    out = np.array(a, dtype=float, copy=True, order="C")
    out.setflags(write=False)
    return out


@dataclass(frozen=True)
class ValidationReport:
    """Outcome of checking a matrix for row-stochasticity."""

    shape: tuple[int, int]
    max_row_sum_dev: float
    bad_rows: tuple[int, ...]
    negative_entries: tuple[tuple[int, int], ...]
    nonfinite_entries: tuple[tuple[int, int], ...]
    passed: bool

    def message(self) -> str:
        if self.passed:
            return "ok"
        parts = []
        if self.nonfinite_entries:
            parts.append(f"non-finite entries at {list(self.nonfinite_entries[:5])}")
        if self.negative_entries:
            parts.append(f"negative entries at {list(self.negative_entries[:5])}")
        if self.bad_rows:
            parts.append(
                f"rows {list(self.bad_rows[:5])} deviate from unit sum by up to {self.max_row_sum_dev:.3e}"
            )
        return "; ".join(parts)


def validate_stochastic(matrix: np.ndarray, tol: float = ROW_SUM_TOL) -> ValidationReport:
    """Check that every row of ``matrix`` is a probability vector.

    Reports rather than raises: per-row sum deviation, negative entries
    and non-finite entries are collected, and ``passed`` is true iff all
    invariants hold within ``tol``.
    """
    a = np.asarray(matrix, dtype=float)
    if a.ndim != 2:
        raise ValueError(f"expected a 2-d matrix, got shape {a.shape}")
    finite = np.isfinite(a)
    nonfinite = tuple(map(tuple, np.argwhere(~finite)))
    neg = tuple(map(tuple, np.argwhere(finite & (a < 0))))
    sums = np.where(finite.all(axis=1), a.sum(axis=1), np.nan)
    dev = np.abs(sums - 1.0)
    bad = tuple(int(r) for r in np.nonzero(~(dev <= tol))[0])
    max_dev = float(np.nanmax(dev)) if dev.size else 0.0
    passed = not (nonfinite or neg or bad)
    return ValidationReport(
        shape=(a.shape[0], a.shape[1]),
        max_row_sum_dev=max_dev,
        bad_rows=bad,
        negative_entries=neg,
        nonfinite_entries=nonfinite,
        passed=passed,
    )


def _require_stochastic(matrix: np.ndarray, what: str) -> None:
    report = validate_stochastic(matrix)
    if not report.passed:
        raise ValueError(f"{what} is not row-stochastic: {report.message()}")


@dataclass(frozen=True)
class TransitionKernel:
    """State transition kernel of a finite MDP.

    ``matrix[i*m + j, i']`` is the probability of moving to state ``i'``
    from state ``i`` under action ``j``.
    """

    n: int
    m: int
    matrix: np.ndarray

    def __post_init__(self):
        if self.n < 1 or self.m < 1:
            raise ValueError("need n >= 1 and m >= 1")
        a = np.asarray(self.matrix, dtype=float)
        if a.shape != (self.n * self.m, self.n):
            raise ValueError(f"kernel must have shape {(self.n * self.m, self.n)}, got {a.shape}")
        _require_stochastic(a, "transition kernel")
        object.__setattr__(self, "matrix", _freeze(a))

    def row(self, i: int, j: int) -> np.ndarray:
        return self.matrix[pair_index(i, j, self.m)]

    @property
    def as3d(self) -> np.ndarray:
        """View of the kernel as a ``(n, m, n)`` tensor."""
        return self.matrix.reshape(self.n, self.m, self.n)

    @property
    def support_mask(self) -> np.ndarray:
        return self.matrix > 0.0


@dataclass(frozen=True)
class Policy:
    """Stationary Markov policy: ``matrix[i, j] = P(A=j | state i)``."""

    matrix: np.ndarray

    def __post_init__(self):
        a = np.asarray(self.matrix, dtype=float)
        if a.ndim != 2:
            raise ValueError("policy must be a 2-d matrix")
        _require_stochastic(a, "policy")
        object.__setattr__(self, "matrix", _freeze(a))

    @property
    def n(self) -> int:
        return self.matrix.shape[0]

    @property
    def m(self) -> int:
        return self.matrix.shape[1]


def deterministic_policy(actions: Sequence[int], m: int) -> Policy:
    """Policy that plays ``actions[i]`` with probability one in state ``i``."""
    g = np.zeros((len(actions), m))
    g[np.arange(len(actions)), list(actions)] = 1.0
    return Policy(g)


def uniform_policy(n: int, m: int) -> Policy:
    return Policy(np.full((n, m), 1.0 / m))


@dataclass(frozen=True)
class CostFunction:
    """Per-step cost table ``matrix[i, j] = h(state i, action j)``."""

    matrix: np.ndarray

    def __post_init__(self):
        a = np.asarray(self.matrix, dtype=float)
        if a.ndim != 2:
            raise ValueError("cost table must be a 2-d matrix")
        if not np.isfinite(a).all():
            raise ValueError("cost table contains non-finite entries")
        object.__setattr__(self, "matrix", _freeze(a))

    def averaged(self, gamma: Policy) -> np.ndarray:
        """Policy-averaged state cost ``h_gamma(i) = sum_j h(i,j) gamma[i,j]``."""
        if gamma.matrix.shape != self.matrix.shape:
            raise ValueError("cost table and policy shapes disagree")
        return np.einsum("ij,ij->i", self.matrix, gamma.matrix)


def constant_action_cost(values: Sequence[float], m: int) -> CostFunction:
    """Action-independent cost with ``h(i, j) = values[i]`` for every action."""
    v = np.asarray(values, dtype=float)
    return CostFunction(np.repeat(v[:, None], m, axis=1))


@dataclass(frozen=True)
class InducedChain:
    """State chain induced by a policy: ``L[i, i'] = P(X' = i' | X = i)``."""

    L: np.ndarray

    def __post_init__(self):
        a = np.asarray(self.L, dtype=float)
        if a.ndim != 2 or a.shape[0] != a.shape[1]:
            raise ValueError("induced chain must be square")
        _require_stochastic(a, "induced chain")
        object.__setattr__(self, "L", _freeze(a))

    @property
    def n(self) -> int:
        return self.L.shape[0]


@dataclass(frozen=True)
class JointChain:
    """Chain of (state, action) pairs; row/column index is ``i*m + j``."""

    m: int
    P: np.ndarray

    def __post_init__(self):
        a = np.asarray(self.P, dtype=float)
        if a.ndim != 2 or a.shape[0] != a.shape[1]:
            raise ValueError("joint chain must be square")
        if self.m < 1 or a.shape[0] % self.m:
            raise ValueError("joint chain dimension must be a multiple of the action count")
        _require_stochastic(a, "joint chain")
        object.__setattr__(self, "P", _freeze(a))

    @property
    def n(self) -> int:
        return self.P.shape[0] // self.m


@dataclass(frozen=True)
class StationaryDist:
    """Stationary probability vector of a finite chain."""

    pi: np.ndarray

    def __post_init__(self):
        a = np.asarray(self.pi, dtype=float)
        if a.ndim != 1:
            raise ValueError("stationary distribution must be a vector")
        if a.min() < -1e-12:
            raise ValueError("stationary distribution has negative mass")
        if abs(a.sum() - 1.0) > 1e-10:
            raise ValueError("stationary distribution does not sum to one")
        object.__setattr__(self, "pi", _freeze(np.maximum(a, 0.0)))

    @property
    def n(self) -> int:
        return self.pi.shape[0]


@dataclass(frozen=True)
class AlphaPotential:
    """Discounted deviation-from-average cost vector.

    Two computational variants exist ("matrix" and "definitional"); they
    differ by a scalar multiple of the all-ones vector, and every
    downstream perturbation formula is invariant to that difference.
    """

    g: np.ndarray
    variant: str

    def __post_init__(self):
        object.__setattr__(self, "g", _freeze(np.asarray(self.g, dtype=float)))


@dataclass(frozen=True)
class DoeblinCertificate:
    """Constructive minorization certificate ``P^m(r, .) >= lam * psi(.)``."""

    m: int
    lam: float
    psi: np.ndarray | None
    found: bool

    def __post_init__(self):
        if self.psi is not None:
            object.__setattr__(self, "psi", _freeze(np.asarray(self.psi, dtype=float)))


@dataclass(frozen=True)
class Trajectory:
    """Closed-loop sample path.

    ``X`` are true states, ``Y`` reported observations, ``A`` issued
    actions, all of the same length.  ``tau`` is the attack onset
    (``math.inf`` when no attack is active); ``Y[t] == X[t]`` for
    ``t < tau``.
    """

    X: np.ndarray
    Y: np.ndarray
    A: np.ndarray
    tau: float
    root_seed: int
    replicate: int

    def __post_init__(self):
        for name in ("X", "Y", "A"):
            a = np.asarray(getattr(self, name))
            arr = np.array(a, dtype=np.int64, copy=True)
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)
        if not (len(self.X) == len(self.Y) == len(self.A)):
            raise ValueError("state/observation/action sequences must have equal length")

    @property
    def horizon(self) -> int:
        return len(self.X)


def validate_kernel(kernel, n: int | None = None, m: int | None = None) -> ValidationReport:
    """Validation report for a kernel or a raw candidate matrix.

    Accepts either a constructed :class:`TransitionKernel` (which always
    passes, since construction rejects bad input) or a raw matrix with
    explicit ``n`` and ``m``.
    """
    if isinstance(kernel, TransitionKernel):
        return validate_stochastic(kernel.matrix)
    a = np.asarray(kernel, dtype=float)
    if n is not None and m is not None and a.shape != (n * m, n):
        raise ValueError(f"kernel must have shape {(n * m, n)}, got {a.shape}")
    return validate_stochastic(a)


def induced_state_chain(R: TransitionKernel, gamma: Policy) -> InducedChain:
    """State chain under a policy: ``L[i, i'] = sum_j R[(i,j), i'] gamma[i, j]``."""
    if gamma.matrix.shape != (R.n, R.m):
        raise ValueError(f"policy shape {gamma.matrix.shape} does not match kernel ({R.n}, {R.m})")
    L = np.einsum("ijk,ij->ik", R.as3d, gamma.matrix)
    return InducedChain(L)


def joint_chain_preattack(R: TransitionKernel, gamma: Policy) -> JointChain:
    """Pre-attack (state, action) chain.

    With truthful reporting the next action depends only on the next
    state, so ``P[(i,j), (i',j')] = gamma[i', j'] * R[(i,j), i']``.
    """
    if gamma.matrix.shape != (R.n, R.m):
        raise ValueError(f"policy shape {gamma.matrix.shape} does not match kernel ({R.n}, {R.m})")
    # (nm, n) x (n, m) -> (nm, n, m) -> (nm, nm)
    P = R.matrix[:, :, None] * gamma.matrix[None, :, :]
    return JointChain(R.m, P.reshape(R.n * R.m, R.n * R.m))


def _power_iteration(P, tol: float, max_iter: int) -> np.ndarray:
    dim = P.shape[0]
    x = np.full(dim, 1.0 / dim)
    for _ in range(max_iter):
        x_new = x @ P
        s = x_new.sum()
        if s <= 0:
            raise StationarySolveError("mass vanished during power iteration")
        x_new = x_new / s
        if np.abs(x_new - x).max() <= tol:
            resid = np.abs(x_new @ P - x_new).max()
            if resid <= max(tol, 1e-10):
                return x_new
        x = x_new
    raise StationarySolveError(
        f"power iteration did not converge in {max_iter} iterations; chain may be periodic/reducible"
    )


def stationary_distribution(
    P,
    *,
    dense_limit: int = 1024,
    tol: float = 1e-12,
    max_iter: int = 200_000,
    check: bool = True,
    doeblin_m_max: int = 64,
) -> StationaryDist:
    """Stationary distribution of a row-stochastic matrix.

    Up to ``dense_limit`` states the balance equations are solved
    directly (one equation replaced by the normalization constraint),
    after certifying uniform ergodicity with a minorization certificate;
    above that, power iteration on the (possibly sparse) kernel is run
    to a ``tol`` residual, whose convergence itself certifies the
    precondition.  Raises :class:`StationarySolveError` when the chain
    cannot be certified, e.g. for periodic or reducible chains.
    """
    sparse = scipy.sparse.issparse(P)
    dim = P.shape[0]
    if P.shape[0] != P.shape[1]:
        raise ValueError("stationary_distribution needs a square matrix")
    if dim <= dense_limit:
        dense = np.asarray(P.todense()) if sparse else np.asarray(P, dtype=float)
        if check:
            cert = doeblin_certificate(dense, m_max=doeblin_m_max)
            if not cert.found:
                raise StationarySolveError(
                    f"no minorization found up to lag {doeblin_m_max}; chain may be periodic/reducible"
                )
        A = dense.T - np.eye(dim)
        A[-1, :] = 1.0
        b = np.zeros(dim)
        b[-1] = 1.0
        pi = scipy.linalg.solve(A, b)
        resid = np.abs(pi @ dense - pi).max()
        if not np.isfinite(resid) or resid > 1e-8:
            raise StationarySolveError(f"balance-equation solve left residual {resid:.3e}")
        return StationaryDist(np.maximum(pi, 0.0) / np.maximum(pi, 0.0).sum())
    pi = _power_iteration(P, tol, max_iter)
    return StationaryDist(pi)


def discounted_cost(R: TransitionKernel, gamma: Policy, h: CostFunction, alpha: float) -> np.ndarray:
    """Expected discounted cost vector ``eta`` with ``eta = h_gamma + alpha L eta``.

    ``eta[i]`` is the expected value of ``sum_t alpha^t h_gamma(X_t)``
    started from ``X_0 = i``, computed by a direct linear solve.
    """
    _check_alpha(alpha)
    L = induced_state_chain(R, gamma)
    h_gamma = h.averaged(gamma)
    A = np.eye(R.n) - alpha * L.L
    eta = scipy.linalg.solve(A, h_gamma)
    # I - alpha*L is strictly diagonally dominant for alpha < 1; the solve
    # cannot legitimately fail, so treat any non-finite result as a bug.
    assert np.isfinite(eta).all()
    return eta


def _check_alpha(alpha: float) -> None:
    if not (0.0 < alpha < 1.0):
        raise ValueError(f"discount factor must lie in (0, 1), got {alpha}")


def alpha_potential(
    L: InducedChain,
    h_gamma: np.ndarray,
    alpha: float,
    pi: StationaryDist,
    variant: str = "matrix",
) -> AlphaPotential:
    """Discounted deviation-from-average potential of a Markov reward chain.

    ``variant="matrix"`` solves ``(I - alpha L + alpha e pi) g = h_gamma``;
    ``variant="definitional"`` evaluates ``(I - alpha L)^{-1} (h_gamma -
    mean_cost * e)`` where ``mean_cost = pi . h_gamma``.  The two results
    differ by ``mean_cost * e``.
    """
    _check_alpha(alpha)
    h_gamma = np.asarray(h_gamma, dtype=float)
    n = L.n
    if h_gamma.shape != (n,):
        raise ValueError("state-cost vector length does not match chain dimension")
    if pi.n != n:
        raise ValueError("stationary distribution length does not match chain dimension")
    resid = np.abs(pi.pi @ L.L - pi.pi).max()
    if resid > 1e-8:
        raise ValueError(f"pi is not stationary for this chain (residual {resid:.3e})")
    if variant == "matrix":
        A = np.eye(n) - alpha * L.L + alpha * np.outer(np.ones(n), pi.pi)
        g = scipy.linalg.solve(A, h_gamma)
    elif variant == "definitional":
        mean_cost = float(pi.pi @ h_gamma)
        A = np.eye(n) - alpha * L.L
        g = scipy.linalg.solve(A, h_gamma - mean_cost)
    else:
        raise ValueError(f"unknown variant {variant!r}")
    return AlphaPotential(g, variant)


def _column_minima(P) -> np.ndarray:
    if scipy.sparse.issparse(P):
        dim = P.shape[0]
        csc = P.tocsc()
        mins = np.zeros(dim)
        counts = np.diff(csc.indptr)
        full = np.nonzero(counts == dim)[0]
        for c in full:
            data = csc.data[csc.indptr[c] : csc.indptr[c + 1]]
            mins[c] = data.min()
        return np.maximum(mins, 0.0)
    return np.asarray(P, dtype=float).min(axis=0)


def doeblin_certificate(P, m_max: int = 64) -> DoeblinCertificate:
    """Search for the smallest-lag entrywise minorization of a chain.

    Returns the smallest ``m <= m_max`` with ``lam = sum_c min_r P^m(r, c)
    > 0`` together with the minorizing measure ``psi(c) = min_r P^m(r, c)
    / lam``; ``found=False`` if no lag works.  For finite chains this is
    the maximal one-step-measure certificate at its lag: any valid
    ``(lam', psi')`` at the same lag has ``lam' <= lam``.
    """
    if m_max < 1:
        raise ValueError("m_max must be >= 1")
    if P.shape[0] != P.shape[1]:
        raise ValueError("doeblin_certificate needs a square matrix")
    Pm = P
    for m in range(1, m_max + 1):
        mins = _column_minima(Pm)
        lam = float(mins.sum())
        if lam > 0.0:
            return DoeblinCertificate(m=m, lam=lam, psi=mins / lam, found=True)
        if m < m_max:
            Pm = Pm @ P
    return DoeblinCertificate(m=0, lam=0.0, psi=None, found=False)


def cumulative_rows(matrix: np.ndarray) -> np.ndarray:
    """Row-wise cumulative sums used for inverse-CDF sampling."""
    return np.cumsum(np.asarray(matrix, dtype=float), axis=1)


def sample_index(cumrow: np.ndarray, u: float) -> int:
    """Smallest index with cumulative mass strictly above ``u``."""
    idx = int(np.searchsorted(cumrow, u, side="right"))
    return min(idx, len(cumrow) - 1)


def simulate(
    R: TransitionKernel,
    gamma: Policy,
    attack,
    horizon: int,
    tau: int | None = None,
    root_seed: int = 0,
    replicate: int = 0,
    x0: int = 0,
    engine: str = "auto",
) -> Trajectory:
    """Simulate the closed loop under an attack strategy.

    At each step the controller sees the reported observation ``Y_t``
    (truthful before the onset ``tau``), draws ``A_t ~ gamma(.|Y_t)``,
    and the plant moves ``X_{t+1} ~ R(.|X_t, A_t)``.  ``tau=None`` means
    no attack.  Deterministic given ``(root_seed, replicate)``; the
    attacker consumes an independent stream derived from the same root.
    ``engine`` selects the pure-Python reference loop or the compiled
    fast path; both produce identical trajectories.
    """
    if horizon < 1:
        raise ValueError("horizon must be >= 1")
    if gamma.matrix.shape != (R.n, R.m):
        raise ValueError("policy shape does not match kernel")
    if not (0 <= x0 < R.n):
        raise ValueError("initial state out of range")
    tau_eff = horizon if tau is None else int(tau)
    if tau_eff < 0:
        raise ValueError("attack onset must be >= 0")
    if engine not in ("auto", "reference", "compiled"):
        raise ValueError(f"unknown engine {engine!r}")
    if engine != "reference":
        from . import _kernels

        compilable = getattr(attack, "kind_code", None) is not None and getattr(attack, "seed", None) is None
        if compilable and (_kernels.HAVE_NUMBA or engine == "compiled"):
            X, Y, A = _kernels.simulate_compiled(R, gamma, attack, horizon, tau, root_seed, replicate, x0)
            return Trajectory(X=X, Y=Y, A=A, tau=math.inf if tau is None else float(tau_eff),
                              root_seed=int(root_seed), replicate=int(replicate))
    plant_rng, attacker_rng = _rng.replicate_streams(root_seed, replicate)
    plant_u = plant_rng.random((horizon, 2))
    att_u = attacker_rng.random((horizon, 2))
    gcum = cumulative_rows(gamma.matrix)
    rcum = cumulative_rows(R.matrix)

    X = np.empty(horizon, dtype=np.int64)
    Y = np.empty(horizon, dtype=np.int64)
    A = np.empty(horizon, dtype=np.int64)
    session = attack.session()
    x = int(x0)
    for t in range(horizon):
        X[t] = x
        if t < tau_eff:
            y = x
        elif t == tau_eff:
            y = session.start(x)
        else:
            y = session.report(int(X[t - 1]), x, att_u[t, 0], att_u[t, 1])
        Y[t] = y
        a = sample_index(gcum[y], plant_u[t, 0])
        A[t] = a
        if t + 1 < horizon:
            x = sample_index(rcum[pair_index(x, a, R.m)], plant_u[t, 1])
    return Trajectory(X=X, Y=Y, A=A, tau=math.inf if tau is None else float(tau_eff),
                      root_seed=int(root_seed), replicate=int(replicate))
