"""Exact conditional density-matrix evolution under continuous probing.

The conditional master equation advances by a positivity-preserving,
normalised measurement-operator step.  Writing L = Jy for the probed
operator, one dt step applies, in order,

  1. the exact homodyne Kraus operator
         D(dv) = exp( sqrt(eta M) Jy dv - eta M Jy^2 dt ),
     with record increment dv = 2 sqrt(eta M) <Jy> dt + dW (the POVM formed
     by D(dv) over the Gaussian base measure N(0, dt) is complete, and the
     predictive density of dv is the exact mixture
     sum_i rho_ii N(2 sqrt(eta M) y_i dt, dt));
  2. the excess measurement dephasing for eta < 1, elementwise in the Jy
     eigenbasis with factor exp(-(1-eta) M dt (y_i - y_j)^2 / 2);
  3. collective dephasing as the Kraus pair
         rho -> Kd rho Kd^† + kappa_coll dt Jz rho Jz,
     Kd = 1 - kappa_coll dt Jz^2 / 2;
  4. local dephasing (full backend only), exact and elementwise in the
     product basis: factor exp(-kappa_loc dt hamming(s, s'));
  5. the controlled precession as the Cayley unitary
         Q = (1 + i phi Jz / 2)^{-1} (1 - i phi Jz / 2),   phi = (w + u) dt,
     which is exactly unitary for any step size;
  6. renormalisation.

Every piece is a sandwich rho -> sum_k A_k rho A_k^†, so positivity holds by
construction at any dt; expanding the composition reproduces the Ito master
equation to O(dt^{3/2}).

Two backends realise the same abstract map: a symmetric-subspace (Dicke)
backend that stores the state in the Jy eigenbasis, where every operator
involved is diagonal or banded (O(d^2) per step, d = N+1), and a full
2^N-dimensional backend for N <= 12 that additionally supports local
dephasing.  On collective-only problems the two produce identical moment
trajectories on shared noise paths.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numba import njit

from .bounds import css_amplitudes
from .core import SensorParams

__all__ = [
    "DensityMatrix", "CollectiveOperators", "build_collective_operators",
    "css_density_matrix", "sme_step", "extract_moments",
    "DickeTrajectory", "FullTrajectory", "FULL_BASIS_MAX_ATOMS",
]

FULL_BASIS_MAX_ATOMS = 12


@dataclass
class DensityMatrix:
    """Complex density matrix with its basis tag.

    dicke: |J, m> basis of the symmetric subspace, m ordered J..-J,
    dim N+1.  full: product sigma_z basis, dim 2^N.
    """

    dim: int
    entries: np.ndarray
    basis: str

    def __post_init__(self):
        if self.basis not in ("dicke", "full"):
            raise ValueError(f"unknown basis {self.basis!r}")
        self.entries = np.asarray(self.entries, dtype=complex)
        if self.entries.shape != (self.dim, self.dim):
            raise ValueError("entries shape must match dim")

    def trace_error(self) -> float:
        return abs(np.trace(self.entries).real - 1.0) + abs(np.trace(self.entries).imag)

    def hermiticity_error(self) -> float:
        return float(np.abs(self.entries - self.entries.conj().T).max())

    def min_eigenvalue(self) -> float:
        return float(np.linalg.eigvalsh(self.entries).min())


def _su2_matrices(dim: int):
    """Standard angular momentum matrices for j = (dim-1)/2, m ordered j..-j."""
    j = (dim - 1) / 2.0
    m = j - np.arange(dim)
    jp = np.zeros((dim, dim))
    for i in range(1, dim):
        jp[i - 1, i] = np.sqrt(j * (j + 1) - m[i] * (m[i] + 1))
    jx = (jp + jp.T) / 2.0
    jy = (jp - jp.T) / 2j
    jz = np.diag(m)
    return jx.astype(complex), jy.astype(complex), jz.astype(complex)


def _pauli_site_signs(n_atoms: int) -> np.ndarray:
    """sigma_z eigenvalue of each site for each product-basis state: (N, 2^N)."""
    idx = np.arange(2 ** n_atoms)
    signs = np.empty((n_atoms, 2 ** n_atoms))
    for k in range(n_atoms):
        signs[k] = 1.0 - 2.0 * ((idx >> (n_atoms - 1 - k)) & 1)
    return signs


class CollectiveOperators:
    """Collective angular momentum operators plus backend-specific caches."""

    def __init__(self, n_atoms: int, basis: str):
        if basis not in ("dicke", "full"):
            raise ValueError(f"unknown basis {basis!r}")
        if n_atoms < 1:
            raise ValueError("n_atoms must be >= 1")
        self.n_atoms = n_atoms
        self.basis = basis
        if basis == "dicke":
            self.dim = n_atoms + 1
            self.jx, self.jy, self.jz = _su2_matrices(self.dim)
            self.sigma_z = None
            self._build_dicke_cache()
        else:
            if n_atoms > FULL_BASIS_MAX_ATOMS:
                raise ValueError(
                    f"full basis limited to N <= {FULL_BASIS_MAX_ATOMS} "
                    f"(memory guard), got {n_atoms}")
            self.dim = 2 ** n_atoms
            signs = _pauli_site_signs(n_atoms)
            self._signs = signs
            self.jz = np.diag(signs.sum(axis=0) / 2.0).astype(complex)
            jx = np.zeros((self.dim, self.dim), dtype=complex)
            jy = np.zeros((self.dim, self.dim), dtype=complex)
            idx = np.arange(self.dim)
            for k in range(n_atoms):
                flipped = idx ^ (1 << (n_atoms - 1 - k))
                jx[flipped, idx] += 0.5
                # sigma_y|0> = i|1>, sigma_y|1> = -i|0> with bit 0 <-> up
                up = ((idx >> (n_atoms - 1 - k)) & 1) == 0
                jy[flipped[up], idx[up]] += 0.5j
                jy[flipped[~up], idx[~up]] += -0.5j
            self.jx, self.jy = jx, jy
            self.sigma_z_diag = signs
            self._build_full_cache()

    # -- dicke internals ----------------------------------------------------
    def _build_dicke_cache(self):
        d = self.dim
        j = self.n_atoms / 2.0
        self.mvals = j - np.arange(d)
        self.sup = np.array([np.sqrt(j * (j + 1) - (j - i - 1) * (j - i))
                             for i in range(d - 1)])
        # rotation from the public |J, m> (Jz) basis into the internal Jy
        # eigenbasis, gauge-fixed so the internal generators are
        # Jy~ = diag(m), Jx~ = Ax, Jz~ = -Ay.
        w, v = np.linalg.eigh(self.jy)
        v = v[:, np.argsort(-w)]
        xt = v.conj().T @ self.jx @ v
        phases = np.ones(d, dtype=complex)
        for i in range(1, d):
            c = phases[i - 1].conjugate() * xt[i - 1, i]
            phases[i] = c.conjugate() / abs(c)
        self.rot = v * phases[None, :]          # public = rot @ internal @ rot^dag
        ax = (np.diag(self.sup, 1) + np.diag(self.sup, -1)) / 2.0
        self.ax2_d0 = np.diagonal(ax @ ax, 0).copy()
        self.ax2_d2 = np.diagonal(ax @ ax, 2).copy()
        # Jz~^2 = Ay^2, real pentadiagonal, shares |off-diag| pattern with Ax^2
        ay2_d0 = np.empty(d)
        ay2_d0[:] = 0.0
        s2 = self.sup ** 2
        ay2_d0[:-1] += s2 / 4.0
        ay2_d0[1:] += s2 / 4.0
        self.az2_d0 = ay2_d0                    # diag of Ay^2 == diag of Ax^2
        self.az2_d2 = -self.ax2_d2              # Ay^2 second diag = -Ax^2 second diag

    def _build_full_cache(self):
        wy, vy = np.linalg.eigh(self.jy)
        self.jy_eigvals = wy.real
        self.jy_eigvecs = vy
        self.zdiag = np.diagonal(self.jz).real.copy()
        self._hamming = None

    def sigma_z(self, site: int) -> np.ndarray:
        """Dense sigma_z of one site (full basis only)."""
        if self.basis != "full":
            raise ValueError("per-site operators exist only in the full basis")
        return np.diag(self.sigma_z_diag[site]).astype(complex)

    @property
    def hamming(self) -> np.ndarray:
        """Pairwise Hamming distance of product-basis states (lazy)."""
        if self._hamming is None:
            s = self._signs
            self._hamming = (self.n_atoms - s.T @ s) / 2.0
        return self._hamming

    def to_internal(self, rho: np.ndarray) -> np.ndarray:
        if self.basis != "dicke":
            return np.array(rho, dtype=complex)
        return self.rot.conj().T @ rho @ self.rot

    def to_public(self, rho_internal: np.ndarray) -> np.ndarray:
        if self.basis != "dicke":
            return np.array(rho_internal, dtype=complex)
        return self.rot @ rho_internal @ self.rot.conj().T


def build_collective_operators(n_atoms: int, basis: str) -> CollectiveOperators:
    """Angular momentum operators for the chosen backend."""
    return CollectiveOperators(n_atoms, basis)


def css_density_matrix(n_atoms: int, basis: str) -> DensityMatrix:
    """Projector onto the x-polarised coherent spin state."""
    if basis == "dicke":
        b = css_amplitudes(n_atoms).astype(complex)
        return DensityMatrix(n_atoms + 1, np.outer(b, b.conj()), "dicke")
    if basis == "full":
        if n_atoms > FULL_BASIS_MAX_ATOMS:
            raise ValueError(f"full basis limited to N <= {FULL_BASIS_MAX_ATOMS}")
        dim = 2 ** n_atoms
        v = np.full(dim, 1.0 / np.sqrt(dim), dtype=complex)
        return DensityMatrix(dim, np.outer(v, v.conj()), "full")
    raise ValueError(f"unknown basis {basis!r}")


def extract_moments(rho: DensityMatrix, ops: CollectiveOperators) -> np.ndarray:
    """(jx, jy, vx, vy, vz, cxy) with C_ab = <{Ja,Jb}>/2 - <Ja><Jb>."""
    r = rho.entries
    jx, jy, jz = ops.jx, ops.jy, ops.jz
    ex = np.trace(jx @ r).real
    ey = np.trace(jy @ r).real
    exx = np.trace(jx @ jx @ r).real
    eyy = np.trace(jy @ jy @ r).real
    ezz = np.trace(jz @ jz @ r).real
    ez = np.trace(jz @ r).real
    sym_xy = 0.5 * np.trace((jx @ jy + jy @ jx) @ r).real
    return np.array([ex, ey, exx - ex ** 2, eyy - ey ** 2, ezz - ez ** 2,
                     sym_xy - ex * ey])


# ---------------------------------------------------------------------------
# numba kernels for the banded Dicke backend (state resident in the Jy basis,
# stored as separate real/imag planes padded by 3 on each side)
# ---------------------------------------------------------------------------

_PAD = 3


@njit(cache=True, fastmath=True)
def _build_bands(sup, kd_d0, kd_d2, dvec, g, g1, zb):
    """Fill the row-aligned bands of G1 = B (Kd D) and G2 = B (Zt D).

    g1: (7, d) real, g1[o, i] = G1[i, i + o - 3].  zb: (5, d) imaginary
    parts of G2[i, i + o - 2] (B is real and Zt D purely imaginary, so G2 is
    purely imaginary, 5-banded).  B = I - i(phi/2)Zt is real tridiagonal
    with B[i,i+1] = +g[i], B[i+1,i] = -g[i].
    """
    d = dvec.shape[0]
    for o in range(7):
        for i in range(d):
            g1[o, i] = 0.0
    for o in range(5):
        for i in range(d):
            zb[o, i] = 0.0
    for i in range(d):
        g1[3, i] = kd_d0[i] * dvec[i]
    for i in range(d - 2):
        g1[5, i] = kd_d2[i] * dvec[i + 2]       # (KdD)[i, i+2]
        g1[1, i + 2] = kd_d2[i] * dvec[i]       # (KdD)[i+2, i]
    for i in range(d - 1):
        g1[4, i] += g[i] * kd_d0[i + 1] * dvec[i + 1]
        g1[2, i + 1] += -g[i] * kd_d0[i] * dvec[i]
    for i in range(d - 3):
        g1[6, i] += g[i] * kd_d2[i + 1] * dvec[i + 3]
        g1[0, i + 3] += -g[i + 2] * kd_d2[i] * dvec[i]
    for i in range(1, d - 1):
        g1[2, i] += g[i] * kd_d2[i - 1] * dvec[i - 1]
        g1[4, i] += -g[i - 1] * kd_d2[i - 1] * dvec[i + 1]
    # Zt D bands (imag parts): zu[i] = Im (ZtD)[i,i+1], zl[i] = Im (ZtD)[i+1,i]
    for i in range(d - 1):
        zu = 0.5 * sup[i] * dvec[i + 1]
        zl = -0.5 * sup[i] * dvec[i]
        zb[3, i] += zu
        zb[1, i + 1] += zl
        zb[2, i] += g[i] * zl                   # B[i,i+1] (ZtD)[i+1,i]
        zb[2, i + 1] += -g[i] * zu              # B[i+1,i] (ZtD)[i,i+1]
    for i in range(d - 2):
        zb[4, i] += g[i] * 0.5 * sup[i + 1] * dvec[i + 2]       # B[i,i+1](ZtD)[i+1,i+2]
        zb[0, i + 2] += -g[i + 1] * (-0.5 * sup[i] * dvec[i])   # B[i+2,i+1](ZtD)[i+1,i]


@njit(cache=True, fastmath=True)
def _sandwich_pair(re, im, g1, zb, w2, t1re, t1im, t2re, t2im, outre, outim):
    """out = G1 rho G1^† + w2 (ZtD) rho (ZtD)^† with G1 real 7-banded and
    ZtD purely imaginary tridiagonal.

    re/im: (d+6, d+6) padded state planes, live block [3:d+3, 3:d+3].
    t*: (d, d+6) scratch.  Returns the trace of the live block of out.
    """
    d = g1.shape[1]
    for i in range(d):
        a0 = g1[0, i]; a1 = g1[1, i]; a2 = g1[2, i]; a3 = g1[3, i]
        a4 = g1[4, i]; a5 = g1[5, i]; a6 = g1[6, i]
        zlo = zb[0, i]; zhi = zb[2, i]
        for j in range(_PAD, d + _PAD):
            r0 = re[i + 0, j]; s0 = im[i + 0, j]
            r1 = re[i + 1, j]; s1 = im[i + 1, j]
            r2 = re[i + 2, j]; s2 = im[i + 2, j]
            r3 = re[i + 3, j]; s3 = im[i + 3, j]
            r4 = re[i + 4, j]; s4 = im[i + 4, j]
            r5 = re[i + 5, j]; s5 = im[i + 5, j]
            r6 = re[i + 6, j]; s6 = im[i + 6, j]
            t1re[i, j] = (a0 * r0 + a1 * r1 + a2 * r2 + a3 * r3
                          + a4 * r4 + a5 * r5 + a6 * r6)
            t1im[i, j] = (a0 * s0 + a1 * s1 + a2 * s2 + a3 * s3
                          + a4 * s4 + a5 * s5 + a6 * s6)
            # (i z) * (r + i s) = -z s + i z r, bands at offsets -1, +1
            t2re[i, j] = -(zlo * s2 + zhi * s4)
            t2im[i, j] = zlo * r2 + zhi * r4
    trace = 0.0
    for i in range(d):
        for j in range(d):
            sr = (g1[0, j] * t1re[i, j] + g1[1, j] * t1re[i, j + 1]
                  + g1[2, j] * t1re[i, j + 2] + g1[3, j] * t1re[i, j + 3]
                  + g1[4, j] * t1re[i, j + 4] + g1[5, j] * t1re[i, j + 5]
                  + g1[6, j] * t1re[i, j + 6])
            si = (g1[0, j] * t1im[i, j] + g1[1, j] * t1im[i, j + 1]
                  + g1[2, j] * t1im[i, j + 2] + g1[3, j] * t1im[i, j + 3]
                  + g1[4, j] * t1im[i, j + 4] + g1[5, j] * t1im[i, j + 5]
                  + g1[6, j] * t1im[i, j + 6])
            # conj((ZtD)[j, j+o-1]) = -i zb[o, j]:
            # (tr + i ti)(-i z) = z ti - i z tr
            zlo = zb[0, j]; zhi = zb[2, j]
            sr += w2 * (zlo * t2im[i, j + 2] + zhi * t2im[i, j + 4])
            si -= w2 * (zlo * t2re[i, j + 2] + zhi * t2re[i, j + 4])
            outre[i + _PAD, j + _PAD] = sr
            outim[i + _PAD, j + _PAD] = si
        trace += outre[i + _PAD, i + _PAD]
    return trace


@njit(cache=True, fastmath=True)
def _cayley_rows(re, im, g, scratch):
    """Solve (I + T) X = W in place on the live block, T real tridiagonal with
    T[i, i+1] = -g[i], T[i+1, i] = +g[i]; rows of the padded planes re/im."""
    d = g.shape[0] + 1
    dloc = scratch
    dloc[0] = 1.0
    for i in range(1, d):
        f = g[i - 1] / dloc[i - 1]
        dloc[i] = 1.0 + f * g[i - 1]
        fi = f
        for j in range(_PAD, d + _PAD):
            re[i + _PAD, j] -= fi * re[i - 1 + _PAD, j]
            im[i + _PAD, j] -= fi * im[i - 1 + _PAD, j]
    inv = 1.0 / dloc[d - 1]
    for j in range(_PAD, d + _PAD):
        re[d - 1 + _PAD, j] *= inv
        im[d - 1 + _PAD, j] *= inv
    for i in range(d - 2, -1, -1):
        gi = g[i]
        inv = 1.0 / dloc[i]
        for j in range(_PAD, d + _PAD):
            re[i + _PAD, j] = (re[i + _PAD, j] + gi * re[i + 1 + _PAD, j]) * inv
            im[i + _PAD, j] = (im[i + _PAD, j] + gi * im[i + 1 + _PAD, j]) * inv


@njit(cache=True, fastmath=True)
def _conj_transpose_live(re, im, outre, outim, d):
    for i in range(d):
        for j in range(d):
            outre[j + _PAD, i + _PAD] = re[i + _PAD, j + _PAD]
            outim[j + _PAD, i + _PAD] = -im[i + _PAD, j + _PAD]


class DickeTrajectory:
    """Stateful symmetric-subspace trajectory engine (collective terms only).

    Keeps the conditional state in the Jy eigenbasis where each advance is
    O(d^2).  `measurement` selects how the record increment dv is produced:
    'linear' draws dv = 2 sqrt(eta M) <Jy> dt + dW from a supplied Wiener
    increment (the small-step contract used for path sharing), 'exact'
    samples the exact predictive mixture and needs (uniform, normal) pairs.
    """

    def __init__(self, ops: CollectiveOperators, p: SensorParams, dt: float):
        if ops.basis != "dicke":
            raise ValueError("DickeTrajectory requires dicke-basis operators")
        if p.kappa_loc != 0:
            raise ValueError("dicke backend requires kappa_loc = 0 "
                             "(local dephasing leaves the symmetric subspace)")
        if not dt > 0:
            raise ValueError("dt must be positive")
        self.ops = ops
        self.p = p
        self.dt = dt
        d = ops.dim
        self.d = d
        m = ops.mvals
        eta, mm = p.efficiency, p.meas_strength
        self._sq = np.sqrt(eta * mm)
        self._meas_quad = eta * mm * m * m * dt
        self._excess = None
        if eta < 1.0 and mm > 0:
            dm = m[:, None] - m[None, :]
            self._excess = np.exp(-(1 - eta) * mm * dt * dm ** 2 / 2.0)
        # Kd = I - kc dt Jz~^2 / 2 (real pentadiagonal) and Jz~ (imag tridiag)
        kc = p.kappa_coll
        self._kd_d0 = 1.0 - 0.5 * kc * dt * ops.az2_d0
        self._kd_d2 = -0.5 * kc * dt * ops.az2_d2
        self._kcdt = kc * dt
        self._re = np.zeros((d + 2 * _PAD, d + 2 * _PAD))
        self._im = np.zeros((d + 2 * _PAD, d + 2 * _PAD))
        self._outre = np.zeros_like(self._re)
        self._outim = np.zeros_like(self._im)
        self._t1re = np.zeros((d, d + 2 * _PAD))
        self._t1im = np.zeros_like(self._t1re)
        self._t2re = np.zeros_like(self._t1re)
        self._t2im = np.zeros_like(self._t1re)
        self._scratch = np.zeros(d)
        self._g1 = np.zeros((7, d))
        self._zb = np.zeros((3, d))
        self._trace = 1.0
        self._steps = 0
        self.reset()

    # -- state handling -----------------------------------------------------
    def reset(self, rho_public: np.ndarray | None = None):
        d = self.d
        if rho_public is None:
            b = css_amplitudes(self.ops.n_atoms).astype(complex)
            psi = self.ops.rot.conj().T @ b
            rho_int = np.outer(psi, psi.conj())
        else:
            rho_int = self.ops.to_internal(np.asarray(rho_public, dtype=complex))
        self._re[:] = 0.0
        self._im[:] = 0.0
        self._re[_PAD:d + _PAD, _PAD:d + _PAD] = rho_int.real
        self._im[_PAD:d + _PAD, _PAD:d + _PAD] = rho_int.imag
        self._trace = float(np.trace(rho_int).real)
        self._steps = 0

    def density_matrix(self) -> DensityMatrix:
        d = self.d
        rho_int = (self._re[_PAD:d + _PAD, _PAD:d + _PAD]
                   + 1j * self._im[_PAD:d + _PAD, _PAD:d + _PAD]) / self._trace
        rho_int = 0.5 * (rho_int + rho_int.conj().T)
        return DensityMatrix(d, self.ops.to_public(rho_int), "dicke")

    # -- per-step machinery ---------------------------------------------------
    def _diag_populations(self) -> np.ndarray:
        d = self.d
        return np.diagonal(self._re[_PAD:d + _PAD, _PAD:d + _PAD]) / self._trace

    def jy_mean(self) -> float:
        return float(self.ops.mvals @ self._diag_populations())

    def sample_dv(self, uniform: float, normal: float) -> float:
        """Draw dv from the exact predictive mixture using one uniform and
        one standard normal."""
        pops = np.maximum(self._diag_populations(), 0.0)
        cdf = np.cumsum(pops)
        cdf /= cdf[-1]
        i = int(np.searchsorted(cdf, uniform))
        i = min(i, self.d - 1)
        return (2.0 * self._sq * self.ops.mvals[i] * self.dt
                + np.sqrt(self.dt) * normal)

    def linear_dv(self, dw: float) -> float:
        return 2.0 * self._sq * self.jy_mean() * self.dt + dw

    def step(self, u: float, dv: float):
        """Advance one dt given the record increment dv (photocurrent
        y dt = sqrt(eta) dv)."""
        if not np.isfinite(dv):
            raise ValueError("non-finite measurement increment")
        d, dt = self.d, self.dt
        if self._excess is not None:
            blk = slice(_PAD, d + _PAD)
            self._re[blk, blk] *= self._excess
            self._im[blk, blk] *= self._excess
        m = self.ops.mvals
        expo = self._sq * m * dv - self._meas_quad
        expo -= expo.max()
        dvec = np.exp(expo) / np.sqrt(self._trace)

        # G1 = B (Kd D) with B = I - i(phi/2)Jz~, real tridiagonal with
        # B[i,i+1] = +g[i], B[i+1,i] = -g[i]; the collective Kraus partner
        # Jz~ D is sandwiched bare (its B dressing would enter at
        # O(phi kappa dt), far below scheme order).
        phi = (self.p.omega_true + u) * dt
        g = 0.25 * phi * self.ops.sup
        _build_bands(self.ops.sup, self._kd_d0, self._kd_d2, dvec, g,
                     self._g1, self._zb)
        tr = _sandwich_pair(self._re, self._im, self._g1, self._zb,
                            self._kcdt, self._t1re, self._t1im,
                            self._t2re, self._t2im, self._outre, self._outim)
        if not (np.isfinite(tr) and tr > 0):
            raise RuntimeError("density-matrix step lost positivity/trace")
        # Cayley: rho' = A^{-1} M A^{-dag} with A = I + i(phi/2)Jz~;
        # solve rows, conjugate-transpose, solve rows again.
        _cayley_rows(self._outre, self._outim, g, self._scratch)
        _conj_transpose_live(self._outre, self._outim, self._re, self._im, d)
        _cayley_rows(self._re, self._im, g, self._scratch)
        self._trace = float(
            np.trace(self._re[_PAD:d + _PAD, _PAD:d + _PAD]))
        if not (np.isfinite(self._trace) and self._trace > 0):
            raise RuntimeError("density-matrix step lost positivity/trace")
        if self._trace < 1e-6 or self._trace > 1e6:
            blk = slice(_PAD, d + _PAD)
            self._re[blk, blk] /= self._trace
            self._im[blk, blk] /= self._trace
            self._trace = 1.0
        self._steps += 1
        if self._steps % 64 == 0:
            self._rehermitize()

    def _rehermitize(self):
        d = self.d
        blk = slice(_PAD, d + _PAD)
        r = self._re[blk, blk]
        s = self._im[blk, blk]
        self._re[blk, blk] = 0.5 * (r + r.T)
        self._im[blk, blk] = 0.5 * (s - s.T)

    def moments(self) -> np.ndarray:
        """(jx, jy, vx, vy, vz, cxy) of the current conditional state."""
        d = self.d
        blk = slice(_PAD, d + _PAD)
        tr = self._trace
        r = self._re[blk, blk]
        s = self._im[blk, blk]
        m = self.ops.mvals
        sup = self.ops.sup
        diag = np.diagonal(r) / tr
        re1 = np.diagonal(r, 1) / tr
        im1 = np.diagonal(s, 1) / tr
        re2 = np.diagonal(r, 2) / tr

        jy = float(m @ diag)
        vy = float((m * m) @ diag) - jy ** 2
        jx = float(sup @ re1)
        jz = float(sup @ im1)
        exx = float(self.ops.ax2_d0 @ diag + 2.0 * self.ops.ax2_d2 @ re2)
        ezz = float(self.ops.az2_d0 @ diag + 2.0 * self.ops.az2_d2 @ re2)
        sym = float((sup * (m[:-1] + m[1:])) @ re1)    # <{Jx~, Jy~}>
        cxy_tilde = 0.5 * sym - jx * jy
        # internal axes: (x~, y~, z~) measure (Jx, Jy, Jz) directly
        return np.array([jx, jy, exx - jx ** 2, vy, ezz - jz ** 2, cxy_tilde])


class FullTrajectory:
    """Full 2^N-dimensional trajectory engine, including local dephasing.

    Applies the same abstract one-step map as the Dicke engine, so the two
    agree on shared noise paths whenever kappa_loc = 0.
    """

    def __init__(self, ops: CollectiveOperators, p: SensorParams, dt: float):
        if ops.basis != "full":
            raise ValueError("FullTrajectory requires full-basis operators")
        if not dt > 0:
            raise ValueError("dt must be positive")
        self.ops = ops
        self.p = p
        self.dt = dt
        d = ops.dim
        self.d = d
        eta, mm = p.efficiency, p.meas_strength
        self._sq = np.sqrt(eta * mm)
        wy = ops.jy_eigvals
        self._wy = wy
        self._vy = ops.jy_eigvecs
        self._meas_quad = eta * mm * wy * wy * dt
        self._excess = None
        if eta < 1.0 and mm > 0:
            dm = wy[:, None] - wy[None, :]
            self._excess = np.exp(-(1 - eta) * mm * dt * dm ** 2 / 2.0)
        z = ops.zdiag
        self._z = z
        self._kd = 1.0 - 0.5 * p.kappa_coll * dt * z * z
        self._kcdt = p.kappa_coll * dt
        self._local = None
        if p.kappa_loc > 0:
            self._local = np.exp(-p.kappa_loc * dt * ops.hamming)
        self.rho = None
        self.reset()

    def reset(self, rho_public: np.ndarray | None = None):
        if rho_public is None:
            self.rho = css_density_matrix(self.ops.n_atoms, "full").entries
        else:
            self.rho = np.array(rho_public, dtype=complex)

    def density_matrix(self) -> DensityMatrix:
        return DensityMatrix(self.d, self.rho.copy(), "full")

    def jy_mean(self) -> float:
        return float(np.trace(self.ops.jy @ self.rho).real)

    def sample_dv(self, uniform: float, normal: float) -> float:
        pops = np.maximum(np.diagonal(self._vy.conj().T @ self.rho @ self._vy).real, 0.0)
        cdf = np.cumsum(pops)
        cdf /= cdf[-1]
        i = min(int(np.searchsorted(cdf, uniform)), self.d - 1)
        return 2.0 * self._sq * self._wy[i] * self.dt + np.sqrt(self.dt) * normal

    def linear_dv(self, dw: float) -> float:
        return 2.0 * self._sq * self.jy_mean() * self.dt + dw

    def step(self, u: float, dv: float):
        if not np.isfinite(dv):
            raise ValueError("non-finite measurement increment")
        dt = self.dt
        # measurement in the Jy eigenbasis (exact diagonal Kraus)
        expo = self._sq * self._wy * dv - self._meas_quad
        expo -= expo.max()
        dvec = np.exp(expo)
        m1 = self._vy.conj().T @ self.rho @ self._vy
        m1 *= np.outer(dvec, dvec)
        if self._excess is not None:
            m1 *= self._excess
        rho = self._vy @ m1 @ self._vy.conj().T
        # collective dephasing Kraus (Jz diagonal here)
        rho = (np.outer(self._kd, self._kd) * rho
               + self._kcdt * np.outer(self._z, self._z) * rho)
        # local dephasing, exact
        if self._local is not None:
            rho = rho * self._local
        # Cayley rotation (diagonal)
        phi = (self.p.omega_true + u) * dt
        q = (1.0 - 0.5j * phi * self._z) / (1.0 + 0.5j * phi * self._z)
        rho = np.outer(q, q.conj()) * rho
        rho = 0.5 * (rho + rho.conj().T)
        tr = np.trace(rho).real
        if not (np.isfinite(tr) and tr > 0):
            raise RuntimeError("density-matrix step lost positivity/trace")
        self.rho = rho / tr

    def moments(self) -> np.ndarray:
        return extract_moments(self.density_matrix(), self.ops)


def _engine_for(ops: CollectiveOperators, p: SensorParams, dt: float):
    if ops.basis == "dicke":
        return DickeTrajectory(ops, p, dt)
    return FullTrajectory(ops, p, dt)


def sme_step(rho: DensityMatrix, ops: CollectiveOperators, p: SensorParams,
             u: float, dw: float, dt: float) -> DensityMatrix:
    """One positivity-preserving step of the conditional master equation.

    dw is the Wiener increment of the record, dv = 2 sqrt(eta M) <Jy> dt + dw.
    The dicke backend rejects kappa_loc > 0.
    """
    if rho.basis != ops.basis:
        raise ValueError("state and operators use different bases")
    if not np.isfinite(dw):
        raise ValueError("non-finite dW")
    eng = _engine_for(ops, p, dt)
    eng.reset(rho.entries)
    eng.step(u, eng.linear_dv(dw))
    return eng.density_matrix()
