"""Watermark mixing and control-loss analysis.

A watermark randomizes the deployed policy: with magnitude ``beta`` and
watermark distribution ``nu`` the controller plays the mixture
``(1 - beta) * gamma_star + beta * nu``.  This module quantifies the
price of that randomization when no attack is present:

* the exact per-state gap between the discounted costs of two policies,
  together with the perturbation-identity form
  ``alpha (I - alpha L')^{-1} (L' - L) g`` built from the potential of
  the base chain (the two agree when both policies are charged a common
  state-cost vector), and
* the derivative of the discounted cost in ``beta`` at ``beta = 0``.

For the derivative, ``kernel_only`` mode evaluates
``alpha B(nu, gamma*) g`` with ``B = (I - alpha L*)^{-1} (L_nu - L*)``,
which accounts for the change in the induced chain only.  When the step
cost depends on the action, mixing also changes the policy-averaged cost
vector; ``full`` mode adds the missing term
``(I - alpha L*)^{-1} (h_nu - h_gamma*)`` and is the mode validated
against finite differences.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.linalg

from .mdp import (
    CostFunction,
    InducedChain,
    Policy,
    TransitionKernel,
    _check_alpha,
    _freeze,
    alpha_potential,
    discounted_cost,
    doeblin_certificate,
    induced_state_chain,
    stationary_distribution,
)


class ReducibleChainError(ValueError):
    """An induced chain required to be uniformly ergodic is not."""


@dataclass(frozen=True)
class WatermarkSpec:
    """Watermark distribution and magnitude."""

    nu: Policy
    beta: float

    def __post_init__(self):
        if not (0.0 <= self.beta <= 1.0):
            raise ValueError(f"watermark magnitude must lie in [0, 1], got {self.beta}")


@dataclass(frozen=True)
class ControlLossGap:
    """Exact per-state control-performance gap between two policies.

    ``direct`` charges each policy its own averaged cost vector (the
    ground truth); ``identity_rhs`` is the perturbation-identity value,
    which charges both chains the base policy's cost vector.  They
    coincide whenever the step cost is action-independent.
    """

    direct: np.ndarray
    identity_rhs: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "direct", _freeze(self.direct))
        object.__setattr__(self, "identity_rhs", _freeze(self.identity_rhs))


@dataclass(frozen=True)
class LossReport:
    """Loss summary for one watermark spec against a base policy."""

    beta: float
    exact_gap: np.ndarray
    derivative_kernel_only: np.ndarray
    derivative_full: np.ndarray
    B: np.ndarray

    def __post_init__(self):
        for name in ("exact_gap", "derivative_kernel_only", "derivative_full", "B"):
            object.__setattr__(self, name, _freeze(getattr(self, name)))

    def csv_header(self) -> list[str]:
        n = len(self.exact_gap)
        cols = ["beta"]
        for tag in ("exact_gap", "deriv_kernel_only", "deriv_full"):
            cols += [f"{tag}_{i}" for i in range(n)]
        return cols

    def csv_row(self) -> list[float]:
        return [self.beta, *self.exact_gap, *self.derivative_kernel_only, *self.derivative_full]

    def to_dict(self) -> dict:
        return {
            "beta": self.beta,
            "exact_gap": self.exact_gap.tolist(),
            "derivative_kernel_only": self.derivative_kernel_only.tolist(),
            "derivative_full": self.derivative_full.tolist(),
            "B": self.B.tolist(),
        }


def mix_policy(gamma_star: Policy, spec: WatermarkSpec) -> Policy:
    """Convex mixture ``(1 - beta) * gamma_star + beta * nu``."""
    if gamma_star.matrix.shape != spec.nu.matrix.shape:
        raise ValueError("policy and watermark shapes disagree")
    return Policy((1.0 - spec.beta) * gamma_star.matrix + spec.beta * spec.nu.matrix)


def _require_ergodic(L: InducedChain, what: str) -> None:
    if not doeblin_certificate(L.L).found:
        raise ReducibleChainError(f"{what} induced chain has no minorization; chain may be reducible/periodic")


def control_loss_exact(
    R: TransitionKernel,
    gamma_base: Policy,
    gamma_new: Policy,
    h: CostFunction,
    alpha: float,
) -> ControlLossGap:
    """Exact discounted-cost gap ``eta(gamma_new) - eta(gamma_base)``.

    Also evaluates ``alpha (I - alpha L_new)^{-1} (L_new - L_base)
    g(gamma_base)``, the linear-algebra identity for the gap under a
    common cost vector.  Both are returned; see :class:`ControlLossGap`.
    """
    _check_alpha(alpha)
    L_base = induced_state_chain(R, gamma_base)
    L_new = induced_state_chain(R, gamma_new)
    _require_ergodic(L_base, "base policy")
    _require_ergodic(L_new, "new policy")
    direct = discounted_cost(R, gamma_new, h, alpha) - discounted_cost(R, gamma_base, h, alpha)
    pi = stationary_distribution(L_base.L, check=False)
    g = alpha_potential(L_base, h.averaged(gamma_base), alpha, pi, variant="matrix")
    A_new = np.eye(R.n) - alpha * L_new.L
    rhs = alpha * scipy.linalg.solve(A_new, (L_new.L - L_base.L) @ g.g)
    return ControlLossGap(direct=direct, identity_rhs=rhs)


def control_loss_derivative(
    R: TransitionKernel,
    nu: Policy,
    gamma_star: Policy,
    h: CostFunction,
    alpha: float,
    mode: str = "full",
) -> np.ndarray:
    """Derivative of the discounted cost in the watermark magnitude at zero.

    ``mode="kernel_only"`` returns ``alpha B(nu, gamma*) g(gamma*)``;
    ``mode="full"`` adds ``(I - alpha L*)^{-1} (h_nu - h_gamma*)``, the
    contribution of the cost-vector change under action-dependent costs.
    """
    _check_alpha(alpha)
    if mode not in ("kernel_only", "full"):
        raise ValueError(f"mode must be 'kernel_only' or 'full', got {mode!r}")
    L_star = induced_state_chain(R, gamma_star)
    L_nu = induced_state_chain(R, nu)
    _require_ergodic(L_star, "base policy")
    pi = stationary_distribution(L_star.L, check=False)
    g = alpha_potential(L_star, h.averaged(gamma_star), alpha, pi, variant="matrix")
    A_star = np.eye(R.n) - alpha * L_star.L
    lu = scipy.linalg.lu_factor(A_star)
    deriv = alpha * scipy.linalg.lu_solve(lu, (L_nu.L - L_star.L) @ g.g)
    if mode == "full":
        dh = h.averaged(nu) - h.averaged(gamma_star)
        deriv = deriv + scipy.linalg.lu_solve(lu, dh)
    return deriv


def perturbation_matrix(R: TransitionKernel, nu: Policy, gamma_star: Policy, alpha: float) -> np.ndarray:
    """``B(nu, gamma*) = (I - alpha L*)^{-1} (L_nu - L*)``."""
    _check_alpha(alpha)
    L_star = induced_state_chain(R, gamma_star)
    L_nu = induced_state_chain(R, nu)
    return scipy.linalg.solve(np.eye(R.n) - alpha * L_star.L, L_nu.L - L_star.L)


def loss_report(
    R: TransitionKernel,
    gamma_star: Policy,
    spec: WatermarkSpec,
    h: CostFunction,
    alpha: float,
) -> LossReport:
    """Exact gap and both derivative modes for one watermark spec."""
    gamma_tilde = mix_policy(gamma_star, spec)
    gap = control_loss_exact(R, gamma_star, gamma_tilde, h, alpha)
    return LossReport(
        beta=spec.beta,
        exact_gap=gap.direct,
        derivative_kernel_only=control_loss_derivative(R, spec.nu, gamma_star, h, alpha, mode="kernel_only"),
        derivative_full=control_loss_derivative(R, spec.nu, gamma_star, h, alpha, mode="full"),
        B=perturbation_matrix(R, spec.nu, gamma_star, alpha),
    )
