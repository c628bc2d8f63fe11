"""Angular-momentum coupling coefficients and the spherical Wigner function.

Clebsch-Gordan coefficients are generated by ladder-operator recursion:
the stretched row <j1 m1; j2 m3-m1 | j3 j3> follows from annihilation by the
total raising operator (two-term recursion, Condon-Shortley sign), and lower
m3 rows follow by applying the total lowering operator, which preserves
normalisation row by row and is numerically benign up to j of a few hundred.

The Wigner quasiprobability on the sphere for a symmetric-subspace state is

    W(theta, phi) = sqrt((N+1)/4pi) sum_{k=0}^{N} sum_{q=-k}^{k} rho_kq Y_kq

with multipole amplitudes rho_kq = sum_{m1} rho_{m1, m1-q} t_kq^{m1, m1-q},
t_kq^{m1 m2} = (-1)^{J - m1 - q} <J, m1; J, -m2 | k, q>, and complex
spherical harmonics evaluated through a normalised associated-Legendre
recursion (stable to degree ~300).
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

__all__ = ["clebsch_gordan", "wigner_sphere", "WignerField",
           "legendre_normalized"]


@dataclass
class WignerField:
    """Wigner function sampled on a (theta, phi) grid."""

    theta: np.ndarray
    phi: np.ndarray
    values: np.ndarray   # shape (len(theta), len(phi)), real


def _check_half_integer(x, name):
    two = 2 * x
    if abs(two - round(two)) > 1e-9:
        raise ValueError(f"{name} must be integer or half-integer, got {x}")
    return round(two)


def _lowering(j, m):
    """Coefficient of |j, m-1> in J-|j, m>."""
    return np.sqrt(j * (j + 1) - m * (m - 1))


def _cg_stretched(j1: float, j2: float, j3: float) -> tuple[np.ndarray, np.ndarray]:
    """Coefficients of |j3, j3> over |j1 m1>|j2, j3-m1>; returns (m1_values, c)."""
    m1_hi = min(j1, j3 + j2)
    m1_lo = max(-j1, j3 - j2)
    n = int(round(m1_hi - m1_lo)) + 1
    m1 = m1_hi - np.arange(n)
    c = np.zeros(n)
    c[0] = 1.0
    # J+ |j3, j3> = 0  =>  A1(m1) c(m1-1) = -A2(j3+1-m1) c(m1)
    for i in range(1, n):
        mm = m1[i - 1]          # recursing from c(mm) to c(mm-1)
        a1 = np.sqrt(j1 * (j1 + 1) - mm * (mm - 1))
        m2 = j3 + 1 - mm        # = (j3 - (mm-1)) ... raising partner
        a2 = np.sqrt(j2 * (j2 + 1) - m2 * (m2 - 1))
        c[i] = -a2 / a1 * c[i - 1]
        if abs(c[i]) > 1e100:
            c[: i + 1] /= 1e100
    c /= np.linalg.norm(c)
    if c[0] < 0:
        c = -c
    return m1, c


class _CgRowWalker:
    """Iterates rows <j1 m1; j2 m3-m1 | j3 m3> for m3 = j3 down to -j3."""

    def __init__(self, j1: float, j2: float, j3: float):
        self.j1, self.j2, self.j3 = j1, j2, j3
        self.m1, self.c = _cg_stretched(j1, j2, j3)
        self.m3 = j3

    def lower(self):
        """Advance to the next row (m3 -> m3 - 1)."""
        j1, j2, j3 = self.j1, self.j2, self.j3
        m3_new = self.m3 - 1
        m1_hi = min(j1, m3_new + j2)
        m1_lo = max(-j1, m3_new - j2)
        n = int(round(m1_hi - m1_lo)) + 1
        m1_new = m1_hi - np.arange(n)
        b3 = _lowering(j3, self.m3)
        c_new = np.zeros(n)
        # contribution from J1- on (m1+1, m3-1-m1) and J2- on (m1, m3-m1)
        old_of = {round(2 * v): i for i, v in enumerate(self.m1)}
        b1 = _lowering(j1, m1_new + 1)
        b2 = _lowering(j2, self.m3 - m1_new)
        for i, mv in enumerate(m1_new):
            k_up = old_of.get(round(2 * (mv + 1)))
            k_same = old_of.get(round(2 * mv))
            acc = 0.0
            if k_up is not None:
                acc += b1[i] * self.c[k_up]
            if k_same is not None:
                acc += b2[i] * self.c[k_same]
            c_new[i] = acc / b3
        self.m1, self.c, self.m3 = m1_new, c_new, m3_new
        return self


@lru_cache(maxsize=512)
def _cg_table(two_j1: int, two_j2: int, two_j3: int):
    """All coefficients for fixed (j1, j2, j3): dict m3 -> (m1 array, c array)."""
    j1, j2, j3 = two_j1 / 2.0, two_j2 / 2.0, two_j3 / 2.0
    walker = _CgRowWalker(j1, j2, j3)
    rows = {round(2 * walker.m3): (walker.m1.copy(), walker.c.copy())}
    while walker.m3 > -j3:
        walker.lower()
        rows[round(2 * walker.m3)] = (walker.m1.copy(), walker.c.copy())
    return rows


def clebsch_gordan(j1: float, m1: float, j2: float, m2: float,
                   k: float, q: float) -> float:
    """Condon-Shortley coefficient <j1 m1; j2 m2 | k q>.

    Selection-rule violations return 0; non-half-integer inputs raise.
    """
    two = [_check_half_integer(v, n) for v, n in
           [(j1, "j1"), (m1, "m1"), (j2, "j2"), (m2, "m2"), (k, "k"), (q, "q")]]
    tj1, tm1, tj2, tm2, tk, tq = two
    if tj1 < 0 or tj2 < 0 or tk < 0:
        raise ValueError("angular momenta must be >= 0")
    if (tj1 + tm1) % 2 or (tj2 + tm2) % 2 or (tk + tq) % 2:
        return 0.0   # m not compatible with j (integer vs half-integer ladder)
    if abs(tm1) > tj1 or abs(tm2) > tj2 or abs(tq) > tk:
        return 0.0
    if tm1 + tm2 != tq:
        return 0.0
    if tk < abs(tj1 - tj2) or tk > tj1 + tj2:
        return 0.0
    if (tj1 + tj2 + tk) % 2:
        return 0.0   # j1 + j2 + j3 must be integral
    rows = _cg_table(tj1, tj2, tk)
    m1_arr, c = rows[tq]
    idx = np.flatnonzero(np.abs(2 * m1_arr - tm1) < 0.5)
    if idx.size == 0:
        return 0.0
    return float(c[idx[0]])


def legendre_normalized(k_max: int, q: int, x: np.ndarray) -> np.ndarray:
    """Normalised associated Legendre P-bar_k^q(x) for k = q..k_max, q >= 0.

    Normalised so that Y_kq = P-bar_k^q(cos theta) e^{i q phi}; includes the
    Condon-Shortley phase.  Returns array of shape (k_max - q + 1, len(x)).
    """
    x = np.asarray(x, dtype=float)
    sint = np.sqrt(np.maximum(0.0, 1.0 - x * x))
    out = np.empty((k_max - q + 1, len(x)))
    # P-bar_q^q by product formula
    pqq = np.full(len(x), 1.0 / np.sqrt(4 * np.pi))
    for mm in range(1, q + 1):
        pqq = -np.sqrt((2 * mm + 1) / (2.0 * mm)) * sint * pqq
    out[0] = pqq
    if k_max == q:
        return out
    out[1] = np.sqrt(2 * q + 3.0) * x * pqq
    for k in range(q + 2, k_max + 1):
        a = np.sqrt((4.0 * k * k - 1.0) / (k * k - q * q))
        b = np.sqrt(((2.0 * k + 1.0) / (2.0 * k - 3.0))
                    * ((k - 1.0) ** 2 - q * q) / (k * k - q * q))
        out[k - q] = a * x * out[k - q - 1] - b * out[k - q - 2]
    return out


def _multipole_coefficients(rho: np.ndarray) -> np.ndarray:
    """rho_kq for a symmetric-subspace density matrix in the |J, m> basis
    (m ordered J..-J).  Returns complex array indexed [k, q + 2J]."""
    d = rho.shape[0]
    n = d - 1
    j = n / 2.0
    mvals = j - np.arange(d)
    coeffs = np.zeros((n + 1, 2 * n + 1), dtype=complex)
    for k in range(n + 1):
        walker = _CgRowWalker(j, j, float(k))
        while True:
            q = walker.m3
            iq = int(round(q))
            # rho_kq = sum_m1 rho[m1, m1-q] (-1)^(J-m1-q) <J m1; J -(m1-q)|k q>
            # matrix index i = J - m1; column index = J - (m1 - q) = i + iq
            m1_arr, c = walker.m1, walker.c
            # CG row is over <J m1; J m2'|k q> with m2' = q - m1 = -(m1 - q) ✓
            i_idx = np.round(j - m1_arr).astype(int)
            col = i_idx + iq
            ok = (col >= 0) & (col < d)
            if np.any(ok):
                sign = np.where((np.round(j - m1_arr - q).astype(int) % 2) == 0,
                                1.0, -1.0)
                vals = rho[i_idx[ok], col[ok]]
                coeffs[k, iq + n] = np.sum(sign[ok] * c[ok] * vals)
            if walker.m3 <= -k:
                break
            walker.lower()
    return coeffs


def wigner_sphere(rho: np.ndarray, theta: np.ndarray, phi: np.ndarray,
                  imag_tol: float = 1e-8) -> WignerField:
    """Spherical Wigner function of a symmetric-subspace density matrix.

    rho must be in the |J, m> (m = J..-J) basis with dim N+1 <= 301.  The
    imaginary residual of the reconstruction is checked against imag_tol and
    then discarded.
    """
    rho = np.asarray(rho, dtype=complex)
    d = rho.shape[0]
    if rho.ndim != 2 or rho.shape[1] != d:
        raise ValueError("rho must be square")
    if d > 301:
        raise ValueError("symmetric-subspace Wigner capped at N=300")
    n = d - 1
    theta = np.asarray(theta, dtype=float)
    phi = np.asarray(phi, dtype=float)
    x = np.cos(theta)

    coeffs = _multipole_coefficients(rho)
    w = np.zeros((len(theta), len(phi)), dtype=complex)
    for q in range(0, n + 1):
        pbar = legendre_normalized(n, q, x)          # (n-q+1, ntheta)
        ks = np.arange(q, n + 1)
        s_pos = coeffs[ks, q + n] @ pbar             # sum_k rho_kq Pbar_k^q
        if q == 0:
            w += s_pos[:, None] * np.exp(0j)
            continue
        s_neg = coeffs[ks, -q + n] @ pbar            # rho_{k,-q} with Pbar_k^{-q} = (-1)^q Pbar_k^q
        eip = np.exp(1j * q * phi)
        w += s_pos[:, None] * eip[None, :]
        w += ((-1.0) ** q) * s_neg[:, None] * np.conj(eip)[None, :]
    w *= np.sqrt((n + 1) / (4 * np.pi))

    resid = np.abs(w.imag).max()
    if resid > imag_tol:
        raise ValueError(f"Wigner reconstruction has imaginary residual {resid:.2e}")
    return WignerField(theta=theta, phi=phi, values=w.real.copy())
