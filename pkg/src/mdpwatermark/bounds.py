"""Closed-form detection-performance bounds and their ingredients.

For a matrix attack the reported-observation process has a computable
long-run conditional law ``Q`` over (observation, action) rows; the
detector's asymptotic behaviour is then governed by

* a mean-time-between-false-alarms lower bound driven by the threshold
  ``c`` and the support size ``v`` of the deployed policy's state chain,
* a mean-delay upper bound ``max(M, (c + slack) / I(Q, R))`` where
  ``I(Q, R)`` is the stationary count-weighted KL rate between attacked
  and nominal observation dynamics and ``slack`` is an additive constant
  built from a minorization certificate, and
* a Hoeffding-type tail bound for additive functionals of the extended
  (state, action, observation) chain.

All bounds drop their vanishing ``(1 + o(1))`` correction factors and
are labelled asymptotic; they are one-sided guardrails, not estimates.
``Q`` is undefined for strategies that are not matrix attacks (e.g. the
virtual-system attack), and report assembly refuses them.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .attack import AttackMatrix, ExtendedChain, extended_chain, joint_chain_postattack
from .mdp import (
    DoeblinCertificate,
    Policy,
    StationaryDist,
    TransitionKernel,
    _freeze,
    doeblin_certificate,
    induced_state_chain,
)

SERIES_VARIANTS = ("double_factorial", "half_factorial")


def min_nonzero(matrix) -> float:
    """Smallest strictly positive entry of a matrix."""
    a = np.asarray(matrix, dtype=float)
    pos = a[a > 0]
    if pos.size == 0:
        raise ValueError("matrix has no positive entries")
    return float(pos.min())


def lambda1(lam: float, r_min: float, gamma_min: float, phi_min: float) -> float:
    """Minorization constant of the paired extended chain.

    The product ``lam * r_min * gamma_min^2 * phi_min^2`` of the base
    certificate constant with the minimal nonzero kernel, policy and
    attack probabilities.
    """
    for name, val in (("lam", lam), ("r_min", r_min), ("gamma_min", gamma_min), ("phi_min", phi_min)):
        if not (0.0 < val <= 1.0):
            raise ValueError(f"{name} must lie in (0, 1], got {val}")
    return lam * r_min * gamma_min**2 * phi_min**2


def double_factorial(k: int) -> int:
    """``k!!`` with the empty products ``0!! = (-1)!! = 1``."""
    if k < -1:
        raise ValueError("double factorial needs k >= -1")
    out = 1
    while k > 1:
        out *= k
        k -= 2
    return out


def u_series(c: float, v: int, series_variant: str = "double_factorial") -> float:
    """Polynomial normalizer ``u(c) = sum_{k<floor(v/2)} c^k / denom(k)``.

    The denominator is ``(2k)!!`` by default; the alternative reading
    ``2 * (k!!)`` is selectable.  Both are reported with the variant
    flag because the source expression is ambiguous.
    """
    if v < 2:
        raise ValueError("need at least two nonzero transition entries (v >= 2)")
    if series_variant not in SERIES_VARIANTS:
        raise ValueError(f"series_variant must be one of {SERIES_VARIANTS}")
    total = 0.0
    for k in range(v // 2):
        if series_variant == "double_factorial":
            denom = float(double_factorial(2 * k))
        else:
            denom = 2.0 * double_factorial(k)
        total += c**k / denom
    return total


def mtbfa_lower_bound(c: float, M: int, v: int, series_variant: str = "double_factorial") -> float:
    """Asymptotic lower bound on the mean time between false alarms.

    ``M - 1 + (2 sqrt(2) / (3 sqrt(u(c)))) * exp(c / 4)`` with the
    vanishing correction dropped; valid for large thresholds.
    """
    if not c > 0:
        raise ValueError("threshold c must be positive")
    u = u_series(c, v, series_variant)
    return M - 1 + (2.0 * math.sqrt(2.0) / (3.0 * math.sqrt(u))) * math.exp(c / 4.0)


@dataclass(frozen=True)
class LimitingQ:
    """Long-run conditional law of the next observation under attack.

    ``Q[(l, j), l']`` approximates the detector's plug-in estimate in the
    limit.  Rows never visited in the stationary regime are filled with
    the nominal kernel rows and flagged in ``reachable``.
    """

    Q: np.ndarray
    pi_ext: StationaryDist
    pi_y: np.ndarray
    pi_ya: np.ndarray
    reachable: np.ndarray
    chain: ExtendedChain

    def __post_init__(self):
        for name in ("Q", "pi_y", "pi_ya"):
            object.__setattr__(self, name, _freeze(getattr(self, name)))
        mask = np.array(self.reachable, dtype=bool, copy=True)
        mask.setflags(write=False)
        object.__setattr__(self, "reachable", mask)


def limiting_Q(
    R: TransitionKernel,
    gamma: Policy,
    phi: AttackMatrix,
    *,
    m_max: int = 64,
    reach_tol: float = 1e-15,
) -> LimitingQ:
    """Limiting conditional law of reported transitions under a matrix attack.

    Requires a minorization certificate for the extended chain and a
    policy that plays every action seen in the stationary regime with
    positive probability.  The row formula averages the attacked
    one-step law over the stationary conditional of the true state given
    the reported (observation, action) pair.
    """
    ext = extended_chain(R, gamma, phi)
    cert = doeblin_certificate(ext.kernel, m_max=m_max)
    if not cert.found:
        raise ValueError(f"extended chain has no minorization up to lag {m_max}; limit law undefined")
    pi_ext = ext.stationary(check=False)
    piT = ext.pi_tensor(pi_ext)  # (x, a, y)
    pi_y = ext.marginal_y(pi_ext)
    pi_ya = ext.marginal_ya(pi_ext)
    n, m = R.n, R.m
    # G[i, j, l'] = sum_{i'} R[(i,j), i'] * phi[(i,i'), l']
    G = np.einsum("ijk,ikl->ijl", R.as3d, phi.matrix.reshape(n, n, n))
    Q = np.array(R.matrix, copy=True)
    reachable = pi_ya > reach_tol
    for l in range(n):
        for j in range(m):
            if not reachable[l, j]:
                continue
            if gamma.matrix[l, j] <= 0.0:
                raise ValueError(
                    f"policy plays action {j} with probability zero in observed state {l}, "
                    "yet the pair is reachable; conditional law undefined"
                )
            w = piT[:, j, l] / (pi_y[l] * gamma.matrix[l, j])
            Q[l * m + j] = w @ G[:, j, :]
    return LimitingQ(Q=Q, pi_ext=pi_ext, pi_y=pi_y, pi_ya=pi_ya, reachable=reachable, chain=ext)


def q_direct_from_extended(ext: ExtendedChain, pi_ext: StationaryDist, reach_tol: float = 1e-15):
    """Conditional law of the next observation computed from the chain itself.

    Independent cross-check for :func:`limiting_Q`: marginalizes the
    extended kernel's columns over the next observation and conditions
    on the stationary (observation, action) mass.  Unreachable rows are
    returned as zeros; use the mask to compare on reachable rows only.
    """
    n, m = ext.n, ext.m
    y_next = np.zeros((ext.dim, n))
    cols = np.arange(ext.dim) % n
    y_next[np.arange(ext.dim), cols] = 1.0
    to_y = ext.kernel @ y_next  # P(Y'=l' | z)
    piT = ext.pi_tensor(pi_ext)
    pi_ya = ext.marginal_ya(pi_ext)
    Q = np.zeros((n * m, n))
    reachable = pi_ya > reach_tol
    for l in range(n):
        for j in range(m):
            if not reachable[l, j]:
                continue
            zs = np.array([ext.index(x, j, l) for x in range(n)])
            Q[l * m + j] = (pi_ext.pi[zs] @ to_y[zs]) / pi_ya[l, j]
    return Q, reachable


def stealthiness_check(Q: np.ndarray, R: TransitionKernel, tol: float = 1e-12):
    """True iff the zero patterns of ``Q`` and the kernel coincide.

    Returns the verdict and the list of violating ``(l, j, l')`` triples.
    """
    Q = np.asarray(Q, dtype=float)
    if Q.shape != R.matrix.shape:
        raise ValueError("Q and kernel shapes disagree")
    q_zero = np.abs(Q) <= tol
    r_zero = np.abs(R.matrix) <= tol
    bad = np.argwhere(q_zero != r_zero)
    violations = [(int(k) // R.m, int(k) % R.m, int(lp)) for k, lp in bad]
    return len(violations) == 0, violations


def kl_rate(Q: np.ndarray, R: TransitionKernel, pi_ya: np.ndarray, zero_tol: float = 1e-12) -> float:
    """Stationary count-weighted KL divergence rate (nats per step).

    Sums ``pi_ya[l, j] * Q[(l,j), l'] * log(Q/R)`` over the nominal
    support.  Raises if ``Q`` puts mass outside that support.  Totals
    below ``zero_tol`` are round-off from a limit law that equals the
    kernel (e.g. truthful reporting) and collapse to exactly zero, the
    undetectable-attack sentinel.
    """
    Q = np.asarray(Q, dtype=float)
    pi_ya = np.asarray(pi_ya, dtype=float)
    sup = R.matrix > 0.0
    if np.any(Q[~sup] > 1e-12):
        raise ValueError("Q puts mass outside the nominal support; rate undefined")
    w = np.repeat(pi_ya.reshape(-1), R.n).reshape(R.matrix.shape)
    mask = sup & (Q > 0.0)
    total = float(np.sum(w[mask] * Q[mask] * np.log(Q[mask] / R.matrix[mask])))
    return total if total > zero_tol else 0.0


def delay_bound_slack(Q: np.ndarray, R: TransitionKernel, m_lag: int, lam1: float) -> float:
    """Additive delay-bound constant ``2 (m + 2) max|log(Q/R)| / lambda1``.

    Named ``slack`` throughout to avoid colliding with the discount
    factor.  The max runs over the nominal support.
    """
    sup = R.matrix > 0.0
    ratios = np.abs(np.log(np.asarray(Q)[sup] / R.matrix[sup]))
    return 2.0 * (m_lag + 2) * float(ratios.max()) / lam1


def md_upper_bound(c: float, M: int, I_QR: float, slack: float) -> float:
    """Asymptotic upper bound ``max(M, (c + slack) / I(Q,R))`` on mean delay.

    Returns ``math.inf`` when the rate is zero (undetectable attack).
    """
    if I_QR < 0:
        raise ValueError("KL rate cannot be negative")
    if I_QR == 0.0:
        return math.inf
    return max(float(M), (c + slack) / I_QR)


def hoeffding_tail(n: int, eps: float, f_norm: float, m_lag: int, lam1: float) -> float:
    """Two-sided tail bound for additive functionals of a uniformly ergodic chain.

    ``2 exp(-2 (n eps - mu)^2 / (n mu^2))`` with ``mu = 2 (m + 2) f_norm
    / lambda1``, applicable for ``n > mu / eps``; returns the vacuous
    sentinel ``1.0`` below that sample size.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    mu = 2.0 * (m_lag + 2) * f_norm / lam1
    if n <= mu / eps:
        return 1.0
    return 2.0 * math.exp(-2.0 * (n * eps - mu) ** 2 / (n * mu**2))


@dataclass(frozen=True)
class BoundsReport:
    """All bound ingredients for one (kernel, policy, matrix-attack) triple."""

    v: int
    u_c: float
    mtbfa_lb: float
    Q: np.ndarray
    I_QR: float
    slack: float
    lambda_1: float
    doeblin: DoeblinCertificate
    md_ub: float
    series_variant: str
    c: float
    M: int
    pi_ya: np.ndarray
    stealthy: bool

    def __post_init__(self):
        object.__setattr__(self, "Q", _freeze(self.Q))
        object.__setattr__(self, "pi_ya", _freeze(self.pi_ya))

    CSV_FIELDS = (
        "c", "M", "v", "u_c", "mtbfa_lb", "I_QR", "slack", "lambda_1",
        "doeblin_m", "doeblin_lambda", "md_ub", "series_variant", "stealthy",
    )

    def csv_row(self) -> list:
        return [
            self.c, self.M, self.v, self.u_c, self.mtbfa_lb, self.I_QR, self.slack,
            self.lambda_1, self.doeblin.m, self.doeblin.lam, self.md_ub,
            self.series_variant, int(self.stealthy),
        ]

    def to_dict(self) -> dict:
        return {
            "c": self.c, "M": self.M, "v": self.v, "u_c": self.u_c,
            "mtbfa_lb": self.mtbfa_lb, "I_QR": self.I_QR, "slack": self.slack,
            "lambda_1": self.lambda_1,
            "doeblin": {"m": self.doeblin.m, "lambda": self.doeblin.lam},
            "md_ub": self.md_ub, "series_variant": self.series_variant,
            "stealthy": self.stealthy,
            "Q": self.Q.tolist(), "pi_ya": self.pi_ya.tolist(),
        }

    def summary(self) -> str:
        lines = [
            "detection-performance bounds (asymptotic: vanishing correction factors dropped)",
            f"  threshold c = {self.c}, minimum segment M = {self.M}",
            f"  state-chain support size v = {self.v}, u(c) = {self.u_c:.6g} ({self.series_variant})",
            f"  MTBFA lower bound >= {self.mtbfa_lb:.6g}",
            f"  KL rate I(Q,R) = {self.I_QR:.6g} nats/step, stealthy = {self.stealthy}",
            f"  minorization: lag m = {self.doeblin.m}, lambda = {self.doeblin.lam:.6g}, "
            f"lambda_1 = {self.lambda_1:.6g}",
            f"  slack = {self.slack:.6g}",
            f"  MD upper bound <= {self.md_ub:.6g}" if math.isfinite(self.md_ub)
            else "  MD upper bound: infinite (zero KL rate; attack statistically invisible)",
        ]
        return "\n".join(lines)


def compute_report(
    R: TransitionKernel,
    gamma: Policy,
    phi: AttackMatrix,
    c: float,
    M: int,
    series_variant: str = "double_factorial",
    m_max: int = 64,
) -> BoundsReport:
    """Assemble the full bounds report for a matrix attack.

    ``gamma`` must be the deployed (watermarked) policy: the support
    size ``v`` counts nonzeros of its induced state chain, and its
    minimal nonzero probability enters ``lambda_1``.
    """
    L = induced_state_chain(R, gamma)
    v = int(np.count_nonzero(L.L))
    u_c = u_series(c, v, series_variant)
    lb = mtbfa_lower_bound(c, M, v, series_variant)
    joint = joint_chain_postattack(R, gamma, phi)
    cert = doeblin_certificate(joint.P, m_max=m_max)
    if not cert.found:
        raise ValueError(f"post-attack pair chain has no minorization up to lag {m_max}")
    lq = limiting_Q(R, gamma, phi, m_max=m_max)
    stealthy, violations = stealthiness_check(lq.Q, R)
    if not stealthy:
        raise ValueError(f"attack is not stealthy; support violations at {violations[:5]}")
    lam_1 = lambda1(cert.lam, min_nonzero(R.matrix), min_nonzero(gamma.matrix), min_nonzero(phi.matrix))
    rate = kl_rate(lq.Q, R, lq.pi_ya)
    slack = delay_bound_slack(lq.Q, R, cert.m, lam_1)
    return BoundsReport(
        v=v, u_c=u_c, mtbfa_lb=lb, Q=lq.Q, I_QR=rate, slack=slack, lambda_1=lam_1,
        doeblin=cert, md_ub=md_upper_bound(c, M, rate, slack),
        series_variant=series_variant, c=float(c), M=int(M), pi_ya=lq.pi_ya, stealthy=stealthy,
    )
