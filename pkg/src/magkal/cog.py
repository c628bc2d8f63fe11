"""Comoving-Gaussian moment dynamics and the photocurrent observation model.

The conditional state is tracked through the 7-vector
x = (<Jx>, <Jy>, Vx, Vy, Vz, Cxy, omega).  Its Ito drift and diffusion are

    d<Jx> = -(w+u)<Jy> dt - (kc + 2kl + M)/2 <Jx> dt + 2 sqrt(eta M) Cxy dW
    d<Jy> = +(w+u)<Jx> dt - (kc + 2kl)/2     <Jy> dt + 2 sqrt(eta M) Vy  dW
    dVx   = -2(w+u)Cxy dt + kc(Vy + <Jy>^2 - Vx) dt + kl(N/2 - 2Vx) dt
            + M(Vz - Vx - 4 eta Cxy^2) dt
    dVy   = +2(w+u)Cxy dt + kc(Vx + <Jx>^2 - Vy) dt + kl(N/2 - 2Vy) dt
            - 4 eta M Vy^2 dt
    dVz   = M(Vx + <Jx>^2 - Vz) dt
    dCxy  = (w+u)(Vx - Vy) dt - kc(2Cxy + <Jx><Jy>) dt - 2 kl Cxy dt
            - M Cxy (1 + 8 eta Vy)/2 dt
    dw    = 0

with kc = kappa_coll, kl = kappa_loc and w+u the controlled precession rate.
The untruncated second-moment equations additionally carry stochastic terms
built from symmetrised third-order cumulants, e.g.

    dVy  += 2 sqrt(eta M) cov(Jy,Jy,Jy) dW
    dVx  += 2 sqrt(eta M) (cov(Jx,Jx,Jy)/2 + cov(Jy,Jx,Jx)/2) dW
    dVz  += 2 sqrt(eta M) (cov(Jz,Jz,Jy)/2 + cov(Jy,Jz,Jz)/2) dW
    dCxy += 2 sqrt(eta M) (cov(JxJy^2)/4 + cov(JyJxJy)/2 + cov(Jy^2Jx)/4) dW

where cov(A,B,C) = <ABC> - <A><BC> - <B><AC> - <C><AB> + 2<A><B><C>.
These third-moment kicks are deliberately not simulated: the Gaussian closure
sets them to zero, which removes every stochastic term from the second-moment
rows (only the jx and jy rows diffuse).

Functions here are pure; batched variants accept arrays shaped (..., 7) so
that whole ensembles advance in lock-step.
"""

from __future__ import annotations

import numpy as np

from .core import JX, JY, VX, VY, VZ, CXY, OM, MomentState, SensorParams

__all__ = [
    "cog_drift", "cog_diffusion", "cog_step",
    "drift7", "diffusion7", "step7", "project_feasible",
    "photocurrent", "innovation_dw",
    "IntegrationError",
]


class IntegrationError(RuntimeError):
    """A moment integration step produced a non-finite component."""

    def __init__(self, component: str, step: int | None = None):
        self.component = component
        self.step = step
        where = f" at step {step}" if step is not None else ""
        super().__init__(f"non-finite value in component '{component}'{where}")


def drift7(x: np.ndarray, p: SensorParams, u) -> np.ndarray:
    """Deterministic part of the moment equations; x has shape (..., 7)."""
    x = np.asarray(x, dtype=float)
    kc, kl, m, eta = p.kappa_coll, p.kappa_loc, p.meas_strength, p.efficiency
    half_n = p.n_atoms / 2.0
    w = x[..., OM] + u
    jx, jy = x[..., JX], x[..., JY]
    vx, vy, vz, cxy = x[..., VX], x[..., VY], x[..., VZ], x[..., CXY]

    out = np.empty_like(x)
    out[..., JX] = -w * jy - 0.5 * (kc + 2 * kl + m) * jx
    out[..., JY] = w * jx - 0.5 * (kc + 2 * kl) * jy
    out[..., VX] = (-2 * w * cxy + kc * (vy + jy ** 2 - vx)
                    + kl * (half_n - 2 * vx) + m * (vz - vx - 4 * eta * cxy ** 2))
    out[..., VY] = (2 * w * cxy + kc * (vx + jx ** 2 - vy)
                    + kl * (half_n - 2 * vy) - 4 * eta * m * vy ** 2)
    out[..., VZ] = m * (vx + jx ** 2 - vz)
    out[..., CXY] = (w * (vx - vy) - kc * (2 * cxy + jx * jy) - 2 * kl * cxy
                     - 0.5 * m * cxy * (1 + 8 * eta * vy))
    out[..., OM] = 0.0
    return out


def diffusion7(x: np.ndarray, p: SensorParams) -> np.ndarray:
    """Coefficients multiplying dW; nonzero only in the jx and jy rows."""
    x = np.asarray(x, dtype=float)
    g = 2.0 * np.sqrt(p.efficiency * p.meas_strength)
    out = np.zeros_like(x)
    out[..., JX] = g * x[..., CXY]
    out[..., JY] = g * x[..., VY]
    return out


def project_feasible(x: np.ndarray) -> np.ndarray:
    """Clamp variances to >= 0 and shrink cxy onto the cxy^2 <= vx*vy cone.

    At coarse dt the truncated model can transiently leave the feasible
    region; projecting keeps the squeezing parameter and the EKF linearisation
    well defined.
    """
    x = np.asarray(x, dtype=float)
    for idx in (VX, VY, VZ):
        np.maximum(x[..., idx], 0.0, out=x[..., idx])
    lim = np.sqrt(x[..., VX] * x[..., VY])
    np.clip(x[..., CXY], -lim, lim, out=x[..., CXY])
    return x


def step7(x: np.ndarray, p: SensorParams, u, dw, dt: float) -> np.ndarray:
    """One Euler-Maruyama step with feasibility projection; batched over (..., 7).

    `u` and `dw` broadcast against the leading axes of x.
    """
    dw = np.asarray(dw, dtype=float)
    out = x + drift7(x, p, u) * dt + diffusion7(x, p) * dw[..., None]
    return project_feasible(out)


def cog_drift(x: MomentState, p: SensorParams, u: float) -> np.ndarray:
    """Drift vector of the moment equations at state x under control u."""
    return drift7(x.to_array(), p, u)


def cog_diffusion(x: MomentState, p: SensorParams) -> np.ndarray:
    """Diffusion vector (coefficient of dW) at state x."""
    return diffusion7(x.to_array(), p)


def cog_step(x: MomentState, p: SensorParams, u: float, dw: float,
             dt: float) -> MomentState:
    """Advance the moment state by one Euler-Maruyama step of size dt."""
    if not dt > 0:
        raise ValueError(f"dt must be positive, got {dt}")
    out = step7(x.to_array(), p, u, dw, dt)
    if not np.all(np.isfinite(out)):
        bad = int(np.flatnonzero(~np.isfinite(out))[0])
        names = ["jx", "jy", "vx", "vy", "vz", "cxy", "omega"]
        raise IntegrationError(names[bad])
    return MomentState.from_array(out)


def photocurrent(jy_cond, p: SensorParams, dw, dt: float):
    """Detected increment y dt = 2 eta sqrt(M) <Jy>_c dt + sqrt(eta) dW."""
    if not dt > 0:
        raise ValueError(f"dt must be positive, got {dt}")
    eta, m = p.efficiency, p.meas_strength
    return 2.0 * eta * np.sqrt(m) * np.asarray(jy_cond) * dt + np.sqrt(eta) * np.asarray(dw)


def innovation_dw(y_dt, jy_est, p: SensorParams, dt: float):
    """Invert the photocurrent model: dW = y dt / sqrt(eta) - 2 sqrt(eta M) <Jy> dt.

    With jy_est equal to the generating conditional mean this recovers the
    driving Wiener increment exactly.
    """
    if not dt > 0:
        raise ValueError(f"dt must be positive, got {dt}")
    eta, m = p.efficiency, p.meas_strength
    return np.asarray(y_dt) / np.sqrt(eta) - 2.0 * np.sqrt(eta * m) * np.asarray(jy_est) * dt
