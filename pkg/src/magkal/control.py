"""Feedback policies: LQR over the linearised model, field compensation, open loop.

The regulator law is u = -omega_hat - lambda * jy_hat with lambda =
sqrt(p_j / nu).  Setting lambda = 0 recovers plain field compensation
u = -omega_hat; 'none' applies no control.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.linalg import solve_continuous_are

from .core import JY, OM

__all__ = ["LqrWeights", "ControlPolicy", "lqr_gain", "lqr_gain_full",
           "control_signal"]


@dataclass(frozen=True)
class LqrWeights:
    """Quadratic cost weights: p_j |<Jy>|^2 + p_omega omega^2 + nu u^2."""

    p_j: float = 1.0
    p_omega: float = 0.0
    nu: float = 1.0

    def __post_init__(self):
        if self.p_j < 0 or self.p_omega < 0:
            raise ValueError("state weights must be >= 0")
        if not self.nu > 0:
            raise ValueError("control weight nu must be > 0")


@dataclass(frozen=True)
class ControlPolicy:
    """kind in {'lqr', 'compensate', 'none'}; lambda applies to 'lqr' only."""

    kind: str = "none"
    lam: float = 1.0

    def __post_init__(self):
        if self.kind not in ("lqr", "compensate", "none"):
            raise ValueError(f"unknown policy kind {self.kind!r}")
        if self.lam < 0:
            raise ValueError("lam must be >= 0")


def lqr_gain(w: LqrWeights) -> float:
    """Feedback gain lambda = sqrt(p_j / nu).

    p_omega does not enter: the frequency mode is uncontrollable (u cannot
    change the true field), so the optimal law splits into exact feedforward
    cancellation of the estimated frequency plus a regulator on the
    controllable <Jy> mode whose scalar Riccati equation gives lambda.
    """
    return float(np.sqrt(w.p_j / w.nu))


def lqr_gain_full(w: LqrWeights, n_atoms: int):
    """Gain row (lambda, 1) acting on (jy_hat, omega_hat), with lambda from a
    numeric Riccati solve on the controllable subspace.

    The naive 2x2 algebraic Riccati equation for the pair
    A = ((0, J), (0, 0)), B = (J, 0)^T has no positive solution (the omega
    mode sits on the imaginary axis and is uncontrollable), so the solve is
    done on the reduced scalar problem d<Jy> = J u~ with cost
    p_j <Jy>^2 + nu u~^2, and the feedforward component is exactly 1.
    """
    j = n_atoms / 2.0
    if w.p_j == 0:
        lam = 0.0
        sigma_c = 0.0
    else:
        sc = solve_continuous_are(np.array([[0.0]]), np.array([[j]]),
                                  np.array([[w.p_j]]), np.array([[w.nu]]))
        sigma_c = float(sc[0, 0])
        lam = j * sigma_c / w.nu
    return np.array([lam, 1.0]), sigma_c


def control_signal(policy: ControlPolicy, estimate: np.ndarray) -> float:
    """Control value from the current filter estimate.

    Accepts either the 7-dim moment estimate or the 2-dim (jy, omega) LG
    estimate; lqr -> -omega_hat - lam*jy_hat, compensate -> -omega_hat,
    none -> 0.
    """
    if policy.kind == "none":
        return 0.0
    est = np.asarray(estimate, dtype=float)
    if est.shape[-1] == 7:
        jy_hat, om_hat = est[..., JY], est[..., OM]
    elif est.shape[-1] == 2:
        jy_hat, om_hat = est[..., 0], est[..., 1]
    else:
        raise ValueError("estimate must have 2 or 7 components")
    if policy.kind == "compensate":
        return -om_hat if est.ndim > 1 else float(-om_hat)
    u = -om_hat - policy.lam * jy_hat
    return u if est.ndim > 1 else float(u)
