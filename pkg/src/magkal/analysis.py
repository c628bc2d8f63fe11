"""Post-processing of trajectory ensembles: estimation error, spin squeezing,
unconditional moments, and model-vs-exact discrepancy metrics.
"""

from __future__ import annotations

import numpy as np

__all__ = [
    "amse", "sem_of_squared_error", "squeezing_parameter",
    "squeezing_series", "unconditional_moments", "unconditional_squeezing",
    "cog_error_metrics",
]


def amse(estimates: np.ndarray, truths) -> np.ndarray:
    """Mean squared estimation error over trajectories, per time point.

    estimates: (n_traj, n_times); truths: scalar (fixed-omega mode) or
    (n_traj,) (prior-sampled mode).
    """
    est = np.atleast_2d(np.asarray(estimates, dtype=float))
    tr = np.asarray(truths, dtype=float)
    if tr.ndim == 0:
        err = est - tr
    else:
        if tr.shape[0] != est.shape[0]:
            raise ValueError("one truth per trajectory required")
        err = est - tr[:, None]
    return np.mean(err ** 2, axis=0)


def sem_of_squared_error(estimates: np.ndarray, truths) -> np.ndarray:
    """Standard error of the mean of the squared errors, per time point."""
    est = np.atleast_2d(np.asarray(estimates, dtype=float))
    tr = np.asarray(truths, dtype=float)
    err2 = (est - (tr if tr.ndim == 0 else tr[:, None])) ** 2
    n = err2.shape[0]
    if n < 2:
        return np.zeros(err2.shape[1])
    return np.std(err2, axis=0, ddof=1) / np.sqrt(n)


def squeezing_parameter(jx_mean: float, vy: float, n_atoms: int) -> float:
    """Inverse squeezing parameter <Jx>^2 / (N Vy); > 1 certifies squeezing."""
    if not vy > 0:
        raise ValueError(f"squeezing undefined for vy <= 0 (got {vy})")
    return float(jx_mean ** 2 / (n_atoms * vy))


def squeezing_series(jx: np.ndarray, vy: np.ndarray, n_atoms: int) -> np.ndarray:
    """Elementwise <Jx>^2/(N Vy) with non-positive Vy mapped to nan."""
    jx = np.asarray(jx, dtype=float)
    vy = np.asarray(vy, dtype=float)
    out = np.full(np.broadcast(jx, vy).shape, np.nan)
    ok = vy > 0
    out[ok] = (jx ** 2 / (n_atoms * vy))[ok] if jx.shape == vy.shape \
        else (np.broadcast_to(jx, out.shape) ** 2 / (n_atoms * vy))[ok]
    return out


def unconditional_moments(jx: np.ndarray, jy: np.ndarray, vy: np.ndarray):
    """Trajectory-averaged moments of the unconditional state.

    Inputs are per-trajectory series shaped (n_traj, n_times).  The
    unconditional variance combines the mean conditional variance with the
    spread of conditional means: Vy_unc = E[Vy_c] + Var[<Jy>_c].
    """
    jx = np.atleast_2d(jx)
    jy = np.atleast_2d(jy)
    vy = np.atleast_2d(vy)
    jx_mean = jx.mean(axis=0)
    jy_mean = jy.mean(axis=0)
    vy_unc = vy.mean(axis=0) + jy.var(axis=0)
    return jx_mean, jy_mean, vy_unc


def unconditional_squeezing(jx: np.ndarray, jy: np.ndarray, vy: np.ndarray,
                            n_atoms: int) -> np.ndarray:
    """Squeezing parameter of the trajectory-averaged state."""
    jx_mean, _, vy_unc = unconditional_moments(jx, jy, vy)
    return squeezing_series(jx_mean, vy_unc, n_atoms)


def cog_error_metrics(exact: np.ndarray, approx: np.ndarray,
                      trajectory_wise: bool = False,
                      guard: float = 1e-12) -> np.ndarray:
    """Percent discrepancy between matched exact and approximate series.

    Series are (n_traj, n_times) on shared noise paths.  Moment errors ratio
    the ensemble means, 100 * E[|exact - approx|] / E[|exact|]; the
    frequency-estimate error instead averages trajectory-wise ratios,
    100 * E[|(exact - approx)/exact|] (trajectory_wise=True).  Denominators
    below the guard yield nan.
    """
    ex = np.atleast_2d(np.asarray(exact, dtype=float))
    ap = np.atleast_2d(np.asarray(approx, dtype=float))
    if ex.shape != ap.shape:
        raise ValueError("series must be aligned on the same grid")
    if trajectory_wise:
        denom = np.abs(ex)
        ratio = np.where(denom > guard, np.abs(ex - ap) / np.where(denom > guard, denom, 1.0), np.nan)
        return 100.0 * np.nanmean(ratio, axis=0)
    num = np.mean(np.abs(ex - ap), axis=0)
    den = np.mean(np.abs(ex), axis=0)
    return np.where(den > guard, 100.0 * num / np.where(den > guard, den, 1.0), np.nan)
