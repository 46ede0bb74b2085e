"""Comparator filters: analytic/linearized Kalman, stochastic EnKF, bootstrap
particle filter, and NLEAF with first- and second-order moment correction.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .ensemble import (
    AffineMap,
    GaussianMoments,
    StateEnsemble,
    apply_affine,
    empirical_moments,
    regularize_cov,
)
from .obsmodel import LinearGaussianObs, ObservationModel

# Cap on entries of the pairwise (conditioning values x members) likelihood
# table materialized at once by the NLEAF conditional-moment estimator.
_NLEAF_CHUNK_ENTRIES = 20_000_000


@dataclass(frozen=True)
class WeightedEnsemble:
    """Ensemble members with normalized importance weights."""

    members: np.ndarray
    weights: np.ndarray

    def __post_init__(self):
        members = np.asarray(self.members, dtype=float)
        weights = np.asarray(self.weights, dtype=float)
        if weights.shape != (members.shape[0],):
            raise ValueError("one weight per member required")
        if np.any(weights < 0):
            raise ValueError("weights must be nonnegative")
        if abs(weights.sum() - 1.0) > 1e-12:
            raise ValueError("weights must sum to 1")
        object.__setattr__(self, "members", members)
        object.__setattr__(self, "weights", weights)


def analytic_kalman_map(
    prior_moments: GaussianMoments, obs: LinearGaussianObs, y: np.ndarray
) -> AffineMap:
    """Exact Gaussian update map x -> (I - K H) x + K y with the Kalman gain K."""
    H, R = obs.H, obs.R
    S = H @ prior_moments.cov @ H.T + R
    K = np.linalg.solve(S.T, H @ prior_moments.cov).T
    d = prior_moments.dim
    return AffineMap(np.eye(d) - K @ H, K @ np.asarray(y, dtype=float))


def ekf_update(
    prior_ens: StateEnsemble, obs: ObservationModel, y: np.ndarray
) -> StateEnsemble:
    """Kalman update after linearizing the observation model at the prior mean.

    Requires the model to expose ``linearize(x0) -> (H, R, h0)``.  For a
    linear-Gaussian model this is the exact analytic update.
    """
    moments = empirical_moments(prior_ens)
    H, R, h0 = obs.linearize(moments.mean)
    S = H @ moments.cov @ H.T + R
    K = np.linalg.solve(S.T, H @ moments.cov).T
    d = prior_ens.dim
    A = np.eye(d) - K @ H
    b = K @ (np.asarray(y, dtype=float) - h0 + H @ moments.mean)
    return apply_affine(AffineMap(A, b), prior_ens)


def stochastic_enkf_update(
    prior_ens: StateEnsemble,
    obs: ObservationModel,
    y: np.ndarray,
    rng: np.random.Generator,
) -> StateEnsemble:
    """EnKF with the gain estimated from simulated observations.

    Draws one simulated observation per member, estimates the gain from the
    state/observation sample cross- and auto-covariances, and applies the
    perturbed-observation update memberwise.
    """
    X = prior_ens.members
    M = prior_ens.size
    ysim = obs.simulate(X, rng)
    x_dev = X - X.mean(axis=0)
    y_dev = ysim - ysim.mean(axis=0)
    c_xy = x_dev.T @ y_dev / (M - 1)
    c_yy = regularize_cov(y_dev.T @ y_dev / (M - 1))
    try:
        gain = np.linalg.solve(c_yy.T, c_xy.T).T
    except np.linalg.LinAlgError as exc:
        raise np.linalg.LinAlgError(
            "simulated-observation covariance is singular even after jitter"
        ) from exc
    return StateEnsemble(X + (np.asarray(y, dtype=float) - ysim) @ gain.T)


def importance_weights(nll_values: np.ndarray) -> np.ndarray:
    """Normalized weights from negative log-likelihoods, max-shifted."""
    logw = -(np.asarray(nll_values, dtype=float))
    with np.errstate(invalid="ignore"):
        logw -= logw.max()
        w = np.exp(logw)
    total = w.sum()
    if not np.isfinite(total) or total <= 0.0:
        raise FloatingPointError("all importance weights degenerate")
    return w / total


def systematic_resample(
    weights: np.ndarray, rng: np.random.Generator
) -> np.ndarray:
    """Systematic resampling: indices drawn with one uniform offset."""
    M = len(weights)
    positions = (rng.random() + np.arange(M)) / M
    return np.searchsorted(np.cumsum(weights), positions)


def pf_update(
    prior_ens: StateEnsemble,
    obs: ObservationModel,
    y: np.ndarray,
    rng: np.random.Generator,
) -> StateEnsemble:
    """Bootstrap particle-filter update: weight by likelihood, resample."""
    w = importance_weights(obs.nll(prior_ens.members, np.asarray(y, dtype=float)))
    idx = systematic_resample(w, rng)
    return StateEnsemble(prior_ens.members[idx])


def _conditional_moments(
    X: np.ndarray,
    obs: ObservationModel,
    ys: np.ndarray,
    with_cov: bool,
    prior_moments: GaussianMoments,
):
    """Importance-weighted conditional means (and covariances) E[x | y_c].

    For each conditioning value ``ys[c]`` the weights over the prior members
    are proportional to the likelihood g(y_c | x_j).  Conditioning values
    whose weights all underflow fall back to the prior moments; the number of
    fallbacks is returned for diagnostics.
    """
    M, d = X.shape
    C = ys.shape[0]
    means = np.empty((C, d))
    covs = np.empty((C, d, d)) if with_cov else None
    fallbacks = 0
    chunk = max(1, _NLEAF_CHUNK_ENTRIES // max(M, 1))
    for start in range(0, C, chunk):
        yc = ys[start : start + chunk]  # (c, p)
        logw = -obs.nll(X[None, :, :], yc[:, None, :])  # (c, M)
        logw -= logw.max(axis=1, keepdims=True)
        w = np.exp(logw)
        totals = w.sum(axis=1)
        bad = ~np.isfinite(totals) | (totals <= 0.0)
        fallbacks += int(bad.sum())
        totals = np.where(bad, 1.0, totals)
        w /= totals[:, None]
        mu_c = w @ X
        mu_c[bad] = prior_moments.mean
        means[start : start + len(yc)] = mu_c
        if with_cov:
            for i in range(len(yc)):
                if bad[i]:
                    covs[start + i] = prior_moments.cov
                else:
                    dev = X - mu_c[i]
                    covs[start + i] = (dev * w[i][:, None]).T @ dev
    return means, covs, fallbacks


def _sqrt_and_invsqrt(cov: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    # symmetric square root / inverse square root with eigenvalue flooring
    w, V = np.linalg.eigh(0.5 * (cov + cov.T))
    floor = max(w.max(), 0.0) * 1e-12 + 1e-300
    w = np.clip(w, floor, None)
    root = np.sqrt(w)
    return (V * root) @ V.T, (V / root) @ V.T


def nleaf_update(
    prior_ens: StateEnsemble,
    obs: ObservationModel,
    y: np.ndarray,
    order: int,
    rng: np.random.Generator,
) -> StateEnsemble:
    """Moment-correction update via importance-sampled conditional moments.

    Order 1 shifts each member by the difference between the conditional mean
    given the real observation and the conditional mean given the member's own
    simulated observation.  Order 2 additionally rescales the member anomaly
    by conditional-covariance square-root factors.  The plain (kernel-free)
    importance estimator over the prior ensemble is used.
    """
    if order not in (1, 2):
        raise ValueError("order must be 1 or 2")
    X = prior_ens.members
    y = np.asarray(y, dtype=float)
    prior_moments = empirical_moments(prior_ens)
    ysim = obs.simulate(X, rng)
    with_cov = order == 2

    mean_y, cov_y, _ = _conditional_moments(
        X, obs, y[None, :], with_cov, prior_moments
    )
    means_sim, covs_sim, _ = _conditional_moments(
        X, obs, ysim, with_cov, prior_moments
    )

    if order == 1:
        return StateEnsemble(X + mean_y[0] - means_sim)

    root_y, _ = _sqrt_and_invsqrt(cov_y[0])
    out = np.empty_like(X)
    for m in range(X.shape[0]):
        _, invroot = _sqrt_and_invsqrt(covs_sim[m])
        out[m] = mean_y[0] + root_y @ invroot @ (X[m] - means_sim[m])
    return StateEnsemble(out)
