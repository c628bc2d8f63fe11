"""Shared parameter, state, prior and randomness types.

All quantities are dimensionless: rates are in units of the inverse time base
used throughout, angular momenta in units of hbar.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "SensorParams",
    "GaussianPrior",
    "MomentState",
    "RngStream",
    "wiener_increment",
    "sample_prior",
    "css_initial_state",
    "JX", "JY", "VX", "VY", "VZ", "CXY", "OM",
]

# Index layout of the 7-dimensional moment vector (jx, jy, vx, vy, vz, cxy, omega).
JX, JY, VX, VY, VZ, CXY, OM = range(7)


@dataclass(frozen=True)
class SensorParams:
    """Physical and measurement constants of the monitored ensemble."""

    n_atoms: int
    kappa_coll: float = 0.0
    kappa_loc: float = 0.0
    meas_strength: float = 0.0
    efficiency: float = 1.0
    omega_true: float = 0.0

    def __post_init__(self):
        if int(self.n_atoms) != self.n_atoms or self.n_atoms < 1:
            raise ValueError(f"n_atoms must be a positive integer, got {self.n_atoms}")
        for name in ("kappa_coll", "kappa_loc", "meas_strength"):
            v = getattr(self, name)
            if not np.isfinite(v) or v < 0:
                raise ValueError(f"{name} must be finite and >= 0, got {v}")
        # efficiency = 0 would make the measurement-noise variance R = eta
        # singular inside the Kalman gain, so it is rejected up front.
        if not (0.0 < self.efficiency <= 1.0):
            raise ValueError(f"efficiency must be in (0, 1], got {self.efficiency}")
        if not np.isfinite(self.omega_true):
            raise ValueError("omega_true must be finite")


@dataclass(frozen=True)
class GaussianPrior:
    """Gaussian prior for the Larmor frequency, N(mean, std**2)."""

    mean: float
    std: float

    def __post_init__(self):
        if not (np.isfinite(self.std) and self.std > 0):
            raise ValueError(f"prior std must be > 0, got {self.std}")
        if not np.isfinite(self.mean):
            raise ValueError("prior mean must be finite")


@dataclass
class MomentState:
    """Conditional first/second moments plus frequency: (jx, jy, vx, vy, vz, cxy, omega)."""

    jx: float
    jy: float
    vx: float
    vy: float
    vz: float
    cxy: float
    omega: float

    def __post_init__(self):
        if min(self.vx, self.vy, self.vz) < 0:
            raise ValueError("variances must be non-negative")
        if self.cxy ** 2 > self.vx * self.vy * (1 + 1e-12) + 1e-12:
            raise ValueError("covariance must satisfy cxy^2 <= vx*vy")

    def to_array(self) -> np.ndarray:
        return np.array([self.jx, self.jy, self.vx, self.vy, self.vz,
                         self.cxy, self.omega], dtype=float)

    @classmethod
    def from_array(cls, x) -> "MomentState":
        x = np.asarray(x, dtype=float)
        return cls(*x[:7])


@dataclass
class RngStream:
    """Counter-based random stream, keyed by (seed, stream_id).

    The same (seed, stream_id) always reproduces the same draw sequence;
    distinct stream_ids give statistically independent streams, so trajectory
    ensembles parallelise without shared state.
    """

    seed: int
    stream_id: int = 0
    _gen: np.random.Generator = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        bitgen = np.random.Philox(key=np.array(
            [self.seed % (1 << 64), self.stream_id % (1 << 64)], dtype=np.uint64))
        object.__setattr__(self, "_gen", np.random.Generator(bitgen))

    @property
    def generator(self) -> np.random.Generator:
        return self._gen

    def normal(self, size=None):
        return self._gen.standard_normal(size)

    def uniform(self, size=None):
        return self._gen.random(size)


def wiener_increment(rng: RngStream, dt: float):
    """Draw dW ~ N(0, dt). Each call advances the stream by one draw."""
    if not dt > 0:
        raise ValueError(f"dt must be positive, got {dt}")
    return rng.normal() * np.sqrt(dt)


def wiener_increments(rng: RngStream, dt: float, n: int) -> np.ndarray:
    """Draw n consecutive Wiener increments (equivalent to n single calls)."""
    if not dt > 0:
        raise ValueError(f"dt must be positive, got {dt}")
    return rng.normal(n) * np.sqrt(dt)


def sample_prior(prior: GaussianPrior, rng: RngStream) -> float:
    """Draw omega ~ N(prior.mean, prior.std**2)."""
    return prior.mean + prior.std * rng.normal()


def css_initial_state(n_atoms: int, prior: GaussianPrior) -> MomentState:
    """Moments of the coherent spin state polarised along x.

    <J> = (N/2, 0, 0) and (Vx, Vy, Vz) = (0, N/4, N/4); omega starts at the
    prior mean, which is where the filter is initialised.
    """
    if n_atoms < 1:
        raise ValueError("n_atoms must be >= 1")
    n = float(n_atoms)
    return MomentState(jx=n / 2, jy=0.0, vx=0.0, vy=n / 4, vz=n / 4,
                       cxy=0.0, omega=prior.mean)
