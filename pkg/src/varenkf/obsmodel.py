"""Observation models: simulation, negative log-likelihood and its gradient.

Two concrete models are provided:

* :class:`PowerScaledNoiseModel` -- the componentwise model
  ``y = h(x) + a * h(x)**theta * beta`` with ``h(x) = 0.1 x**2`` and ``beta``
  i.i.d. Student-t noise.  ``theta`` interpolates between absolute
  (``theta=0``), Poisson-like (``theta=0.5``) and relative (``theta=1``)
  observation noise.
* :class:`LinearGaussianObs` -- ``y = H x + eps`` with ``eps ~ N(0, R)``,
  used for the analytic-Kalman equivalence checks.

All operations accept batched states with shape ``(..., d)`` and broadcast
against observations, returning ``(...,)`` negative log-likelihoods and
``(..., d)`` gradients.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Protocol, runtime_checkable

import numpy as np

# Floor on the per-component noise scale; the density is singular where the
# signal (and hence the scale) vanishes for theta > 0.
SCALE_FLOOR = 1e-8


@runtime_checkable
class ObservationModel(Protocol):
    """Anything exposing simulate / nll / nll_gradient plugs into the filters."""

    obs_dim: int

    def simulate(self, x: np.ndarray, rng: np.random.Generator) -> np.ndarray: ...

    def nll(self, x: np.ndarray, y: np.ndarray) -> np.ndarray: ...

    def nll_gradient(self, x: np.ndarray, y: np.ndarray) -> np.ndarray: ...


def quad_map(x: np.ndarray) -> np.ndarray:
    """Componentwise observation operator 0.1 * x**2."""
    x = np.asarray(x, dtype=float)
    return 0.1 * x * x


def quad_map_jacobian_diag(x: np.ndarray) -> np.ndarray:
    """Diagonal of the Jacobian of quad_map: 0.2 * x."""
    return 0.2 * np.asarray(x, dtype=float)


def _student_t_log_normalizer(dof: float) -> float:
    # log of the standard-t density normalizer Gamma((v+1)/2)/(Gamma(v/2) sqrt(v pi))
    return (
        math.lgamma((dof + 1.0) / 2.0)
        - math.lgamma(dof / 2.0)
        - 0.5 * math.log(dof * math.pi)
    )


@dataclass(frozen=True)
class PowerScaledNoiseModel:
    """Componentwise observation noise whose scale is a power of the signal.

    ``noise_dof = 6`` makes the standard Student-t noise have variance
    ``6/(6-2) = 1.5`` with no extra scaling.  ``noise_scale`` is a test hook:
    it multiplies the noise draws (and the likelihood scale), and
    ``noise_scale=0`` gives noise-free simulation.
    """

    obs_dim: int
    theta: float = 0.0
    a: float = 1.0
    noise_dof: float = 6.0
    noise_scale: float = 1.0

    def __post_init__(self):
        if self.a <= 0:
            raise ValueError("a must be positive")
        if self.noise_dof <= 2:
            raise ValueError("noise_dof must exceed 2 for a finite variance")

    @property
    def noise_variance(self) -> float:
        """Variance of one (unscaled) noise component."""
        return self.noise_dof / (self.noise_dof - 2.0)

    def _scale(self, signal: np.ndarray) -> np.ndarray:
        s = self.a * signal**self.theta
        if self.noise_scale != 1.0:
            s = s * self.noise_scale
        return np.maximum(s, SCALE_FLOOR)

    def simulate(self, x: np.ndarray, rng: np.random.Generator) -> np.ndarray:
        signal = quad_map(x)
        beta = rng.standard_t(self.noise_dof, size=signal.shape)
        return signal + self.a * signal**self.theta * self.noise_scale * beta

    def nll(self, x: np.ndarray, y: np.ndarray) -> np.ndarray:
        signal = quad_map(x)
        s = self._scale(signal)
        r = (np.asarray(y, dtype=float) - signal) / s
        half = (self.noise_dof + 1.0) / 2.0
        per_comp = np.log(s) + half * np.log1p(r * r / self.noise_dof)
        const = -_student_t_log_normalizer(self.noise_dof)
        return per_comp.sum(axis=-1) + self.obs_dim * const

    def nll_gradient(self, x: np.ndarray, y: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        signal = quad_map(x)
        raw = self.a * signal**self.theta * self.noise_scale
        floored = raw < SCALE_FLOOR
        s = np.maximum(raw, SCALE_FLOOR)
        r = (np.asarray(y, dtype=float) - signal) / s
        w = (self.noise_dof + 1.0) * r / (self.noise_dof + r * r)
        if self.theta == 0.0:
            ds = np.zeros_like(signal)
        else:
            with np.errstate(divide="ignore", over="ignore"):
                ds = self.a * self.theta * signal ** (self.theta - 1.0) * self.noise_scale
            ds = np.where(floored, 0.0, ds)
        dl_dsignal = -w / s + ds * (1.0 - w * r) / s
        return dl_dsignal * quad_map_jacobian_diag(x)

    def linearize(self, x0: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Local linear-Gaussian surrogate (H, R, h0) around x0.

        H is the observation Jacobian, R the (diagonal) noise covariance
        evaluated at x0, h0 the predicted observation.
        """
        x0 = np.asarray(x0, dtype=float)
        signal = quad_map(x0)
        H = np.diag(quad_map_jacobian_diag(x0))
        sd = self.a * signal**self.theta * self.noise_scale
        var = np.maximum(sd * sd * self.noise_variance, SCALE_FLOOR)
        return H, np.diag(var), signal

    def restrict(self, idx: np.ndarray) -> "PowerScaledNoiseModel":
        """Restriction to a subset of components (the model is separable)."""
        return PowerScaledNoiseModel(
            obs_dim=len(idx),
            theta=self.theta,
            a=self.a,
            noise_dof=self.noise_dof,
            noise_scale=self.noise_scale,
        )


@dataclass(frozen=True)
class LinearGaussianObs:
    """y = H x + eps with eps ~ N(0, R)."""

    H: np.ndarray
    R: np.ndarray
    _chol: np.ndarray = field(init=False, repr=False, compare=False)
    _Rinv: np.ndarray = field(init=False, repr=False, compare=False)
    _log_norm: float = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        H = np.atleast_2d(np.asarray(self.H, dtype=float))
        R = np.atleast_2d(np.asarray(self.R, dtype=float))
        if R.shape != (H.shape[0], H.shape[0]):
            raise ValueError("R must be obs_dim x obs_dim")
        R = 0.5 * (R + R.T)
        chol = np.linalg.cholesky(R)  # also certifies R is SPD
        H.setflags(write=False)
        R.setflags(write=False)
        object.__setattr__(self, "H", H)
        object.__setattr__(self, "R", R)
        object.__setattr__(self, "_chol", chol)
        object.__setattr__(self, "_Rinv", np.linalg.inv(R))
        sign, logdet = np.linalg.slogdet(R)
        object.__setattr__(
            self, "_log_norm", 0.5 * (H.shape[0] * math.log(2 * math.pi) + logdet)
        )

    @property
    def obs_dim(self) -> int:
        return self.H.shape[0]

    @property
    def state_dim(self) -> int:
        return self.H.shape[1]

    def simulate(self, x: np.ndarray, rng: np.random.Generator) -> np.ndarray:
        mean = np.asarray(x, dtype=float) @ self.H.T
        eps = rng.standard_normal(mean.shape) @ self._chol.T
        return mean + eps

    def nll(self, x: np.ndarray, y: np.ndarray) -> np.ndarray:
        resid = np.asarray(y, dtype=float) - np.asarray(x, dtype=float) @ self.H.T
        quad = np.einsum("...i,ij,...j->...", resid, self._Rinv, resid)
        return 0.5 * quad + self._log_norm

    def nll_gradient(self, x: np.ndarray, y: np.ndarray) -> np.ndarray:
        resid = np.asarray(y, dtype=float) - np.asarray(x, dtype=float) @ self.H.T
        return -(resid @ self._Rinv) @ self.H

    def linearize(self, x0: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        x0 = np.asarray(x0, dtype=float)
        return self.H, self.R, self.H @ x0

    def restrict(self, idx: np.ndarray) -> "LinearGaussianObs":
        """Restriction for one-to-one observation/state alignment."""
        idx = np.asarray(idx)
        return LinearGaussianObs(self.H[np.ix_(idx, idx)], self.R[np.ix_(idx, idx)])
