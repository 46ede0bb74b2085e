"""Forward models for the twin experiments.

* Lorenz-96 (40 cyclic components, forcing 8) integrated with classical RK4
  at dt = 0.05, plus additive standard-Gaussian model noise per step.
* Fisher reaction-diffusion equation on [0, L] with zero-flux boundaries,
  explicit central-difference scheme on 200 grid points, plus spatially
  correlated Gaussian model noise per step.

Steps accept batched states with shape (..., d).  Passing ``rng=None``
suppresses the model noise (used by tests and for noise-free truths).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Protocol

import numpy as np

L96_DIM = 40
L96_FORCING = 8.0
L96_DT = 0.05


class HiddenMarkovModel(Protocol):
    """Transition sampler plus initial-condition sampler."""

    dim: int

    def step(self, x: np.ndarray, rng: np.random.Generator | None) -> np.ndarray: ...

    def sample_initial(self, rng: np.random.Generator, n: int) -> np.ndarray: ...


def lorenz96_rhs(x: np.ndarray, forcing: float = L96_FORCING) -> np.ndarray:
    """Cyclic advection term (x_{n+1} - x_{n-2}) x_{n-1} - x_n + forcing."""
    x = np.asarray(x, dtype=float)
    return (np.roll(x, -1, axis=-1) - np.roll(x, 2, axis=-1)) * np.roll(
        x, 1, axis=-1
    ) - x + forcing


def rk4_step(rhs: Callable[[np.ndarray], np.ndarray], x: np.ndarray, dt: float) -> np.ndarray:
    k1 = rhs(x)
    k2 = rhs(x + 0.5 * dt * k1)
    k3 = rhs(x + 0.5 * dt * k2)
    k4 = rhs(x + dt * k3)
    return x + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)


def lorenz96_step(
    x: np.ndarray,
    rng: np.random.Generator | None = None,
    dt: float = L96_DT,
    forcing: float = L96_FORCING,
) -> np.ndarray:
    """One RK4 step of the Lorenz-96 system plus standard-Gaussian noise."""
    x = np.asarray(x, dtype=float)
    out = rk4_step(lambda s: lorenz96_rhs(s, forcing), x, dt)
    if rng is not None:
        out = out + rng.standard_normal(out.shape)
    return out


@dataclass(frozen=True)
class Lorenz96Model:
    dim: int = L96_DIM
    forcing: float = L96_FORCING
    dt: float = L96_DT
    init_low: float = 1.0
    init_high: float = 10.0

    def step(self, x: np.ndarray, rng: np.random.Generator | None) -> np.ndarray:
        return lorenz96_step(x, rng, dt=self.dt, forcing=self.forcing)

    def sample_initial(self, rng: np.random.Generator, n: int) -> np.ndarray:
        return rng.uniform(self.init_low, self.init_high, size=(n, self.dim))


def hat_profile(x: np.ndarray, length: float = 2.0) -> np.ndarray:
    """Piecewise-linear initial profile: a unit hat on the middle half of [0, L]."""
    x = np.asarray(x, dtype=float)
    s = x / length
    return np.where(
        s < 0.25,
        0.0,
        np.where(s < 0.5, 4.0 * s - 1.0, np.where(s < 0.75, 3.0 - 4.0 * s, 0.0)),
    )


@dataclass(frozen=True)
class FisherModel:
    """Explicit scheme for c_t = D c_xx + r c (1 - c) with zero-flux boundaries.

    The time step is fixed by the stability number D dt / dx**2 = 0.1.  The
    Neumann closure uses the ghost points c[-1] = c[0] and c[N] = c[N-1]
    (flux form), so noiseless pure diffusion conserves the plain sum of the
    grid values exactly.  Model noise is N(0, C) with the squared-exponential
    covariance C(i, j) = 0.3 exp(-(x_i - x_j)**2 / L).
    """

    diffusivity: float = 0.001
    growth_rate: float = 0.1
    length: float = 2.0
    dim: int = 200
    stability_number: float = 0.1
    noise_amplitude: float = 0.3
    init_spread: float = 5.0
    _noise_factor: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        w, V = np.linalg.eigh(self.noise_cov)
        factor = V * np.sqrt(np.clip(w, 0.0, None))
        factor.setflags(write=False)
        object.__setattr__(self, "_noise_factor", factor)

    @property
    def dx(self) -> float:
        return self.length / (self.dim - 1)

    @property
    def dt(self) -> float:
        return self.stability_number * self.dx**2 / self.diffusivity

    @property
    def grid(self) -> np.ndarray:
        return np.linspace(0.0, self.length, self.dim)

    @property
    def noise_cov(self) -> np.ndarray:
        g = self.grid
        return self.noise_amplitude * np.exp(
            -((g[:, None] - g[None, :]) ** 2) / self.length
        )

    def diffusion_increment(self, c: np.ndarray) -> np.ndarray:
        """Stability-number-weighted discrete Laplacian with zero-flux closure."""
        lap = np.empty_like(c)
        lap[..., 1:-1] = c[..., 2:] - 2.0 * c[..., 1:-1] + c[..., :-2]
        lap[..., 0] = c[..., 1] - c[..., 0]
        lap[..., -1] = c[..., -2] - c[..., -1]
        return self.stability_number * lap

    def step(
        self,
        c: np.ndarray,
        rng: np.random.Generator | None = None,
        reaction: bool = True,
    ) -> np.ndarray:
        c = np.asarray(c, dtype=float)
        out = c + self.diffusion_increment(c)
        if reaction:
            out = out + self.dt * self.growth_rate * c * (1.0 - c)
        if rng is not None:
            z = rng.standard_normal(c.shape)
            out = out + z @ self._noise_factor.T
        return out

    def sample_initial(self, rng: np.random.Generator, n: int) -> np.ndarray:
        base = hat_profile(self.grid, self.length)
        return base + rng.uniform(
            -self.init_spread, self.init_spread, size=(n, self.dim)
        )


def fisher_step(
    model: FisherModel, c: np.ndarray, rng: np.random.Generator | None = None
) -> np.ndarray:
    """One explicit time step of the Fisher model (module-level convenience)."""
    return model.step(c, rng)
