"""Precision benchmarks: decoherence-induced lower bound on the AMSE,
noiseless Heisenberg-scaling formula, and the quantum Bayesian Cramer-Rao
bound for the strong-measurement (classical) strategy.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import gammaln

from .core import GaussianPrior, SensorParams

__all__ = [
    "BoundCurve", "cs_limit", "heisenberg_limit", "qfi_local",
    "collective_dephased_css", "qfi_from_state", "qbcrb", "css_amplitudes",
]


@dataclass
class BoundCurve:
    """Lower bound on the frequency AMSE sampled on a time grid."""

    times: np.ndarray
    values: np.ndarray

    def __post_init__(self):
        self.times = np.asarray(self.times, dtype=float)
        self.values = np.asarray(self.values, dtype=float)
        if self.times.shape != self.values.shape:
            raise ValueError("times and values must have equal length")
        if not np.all(np.isfinite(self.values)) or np.any(self.values < 0):
            raise ValueError("bound values must be finite and >= 0")


def cs_limit(t, p: SensorParams, prior: GaussianPrior | None = None,
             flat_prior: bool = False):
    """Decoherence lower bound on the AMSE at time t (elementwise over t).

    With a Gaussian prior: 1 / (1/sigma0^2 + [kappa_coll/t + 2 kappa_loc/(t N)]^{-1});
    with flat_prior=True the prior term is dropped, leaving
    kappa_coll/t + 2 kappa_loc/(N t).  Vanishes identically when both rates
    are zero.
    """
    t = np.asarray(t, dtype=float)
    if np.any(t <= 0):
        raise ValueError("t must be > 0")
    noise = p.kappa_coll / t + 2.0 * p.kappa_loc / (t * p.n_atoms)
    if flat_prior:
        return noise if noise.ndim else float(noise)
    if prior is None:
        raise ValueError("prior required unless flat_prior=True")
    out = np.where(noise > 0,
                   1.0 / (1.0 / prior.std ** 2 + 1.0 / np.where(noise > 0, noise, 1.0)),
                   0.0)
    return out if out.ndim else float(out)


def heisenberg_limit(t, p: SensorParams):
    """Noiseless short-time error 3 / (N^2 eta M t^3).

    Only meaningful for t << 1/(N M); the caller is responsible for staying
    in that window.
    """
    t = np.asarray(t, dtype=float)
    if np.any(t <= 0):
        raise ValueError("t must be > 0")
    out = 3.0 / (p.n_atoms ** 2 * p.efficiency * p.meas_strength * t ** 3)
    return out if out.ndim else float(out)


def qfi_local(p: SensorParams, t):
    """Quantum Fisher information N t^2 exp(-kappa_loc t) for purely local
    dephasing of the initial product state; requires kappa_coll = 0."""
    if p.kappa_coll != 0:
        raise ValueError("closed form requires kappa_coll = 0")
    t = np.asarray(t, dtype=float)
    out = p.n_atoms * t ** 2 * np.exp(-p.kappa_loc * t)
    return out if out.ndim else float(out)


def css_amplitudes(n_atoms: int) -> np.ndarray:
    """Amplitudes b_k = 2^{-J} C(2J, J+k)^{1/2} of the x-polarised coherent
    state in the |J, m> basis, ordered m = J..-J."""
    j = n_atoms / 2.0
    m = j - np.arange(n_atoms + 1)
    logb = 0.5 * (gammaln(2 * j + 1) - gammaln(j + m + 1) - gammaln(j - m + 1)) \
        - j * np.log(2.0)
    return np.exp(logb)


def collective_dephased_css(n_atoms: int, kappa_coll: float, t: float) -> np.ndarray:
    """Density matrix (|J,m> basis) of the CSS after collective dephasing for
    time t: entries b_n b_m exp(-kappa_coll t (m-n)^2 / 2)."""
    if n_atoms > 300:
        raise ValueError("n_atoms capped at 300 for dense eigendecomposition")
    b = css_amplitudes(n_atoms)
    j = n_atoms / 2.0
    m = j - np.arange(n_atoms + 1)
    dm = m[:, None] - m[None, :]
    return np.outer(b, b) * np.exp(-kappa_coll * t * dm ** 2 / 2.0)


def qfi_from_state(rho: np.ndarray, jz: np.ndarray, t: float,
                   pair_threshold: float = 1e-12) -> float:
    """QFI 2 t^2 sum_{k,l} (l_k - l_l)^2/(l_k + l_l) |<k|Jz|l>|^2 by
    eigendecomposition; pairs with l_k + l_l below the threshold are dropped
    (0/0 null-space convention)."""
    rho = np.asarray(rho)
    if np.abs(rho - rho.conj().T).max() > 1e-10:
        raise ValueError("rho must be Hermitian")
    lam, vec = np.linalg.eigh(rho)
    jz_eig = vec.conj().T @ np.asarray(jz) @ vec
    lsum = lam[:, None] + lam[None, :]
    ldiff = lam[:, None] - lam[None, :]
    mask = lsum > pair_threshold
    weight = np.zeros_like(lsum)
    weight[mask] = ldiff[mask] ** 2 / lsum[mask]
    return float(2.0 * t ** 2 * np.sum(weight * np.abs(jz_eig) ** 2))


def qbcrb(prior: GaussianPrior, qfi) -> float:
    """Quantum Bayesian Cramer-Rao bound 1 / (1/sigma0^2 + QFI)."""
    qfi = np.asarray(qfi, dtype=float)
    if np.any(qfi < 0):
        raise ValueError("qfi must be >= 0")
    out = 1.0 / (1.0 / prior.std ** 2 + qfi)
    return out if out.ndim else float(out)
