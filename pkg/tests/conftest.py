"""Shared fixtures and independent oracle implementations.

The oracles here are written from scratch against the underlying math (plain
dense linear algebra, no calls into the package's factored code paths) so the
package and its checks never share a bug.
"""

import numpy as np
import pytest
import scipy.sparse

from mrfilter import (
    CovarianceFunction,
    FunctionCovSource,
    GaussianObs,
    Observation,
    StateSpaceModel,
    advection_diffusion_matrix,
    unit_square_grid,
)

# ---------------------------------------------------------------------------
# Independent dense Kalman recursion (textbook form, no shared code)
# ---------------------------------------------------------------------------


def textbook_kalman_means(A, Q, mu0, S0, obs_list, tau2):
    """Plain covariance-form Kalman recursion, written independently.

    obs_list: per time either None or (indices, values).
    Returns the (T, n) array of filtering means.
    """
    A = np.asarray(A.todense()) if scipy.sparse.issparse(A) else np.asarray(A)
    mu = np.array(mu0, dtype=float)
    P = np.array(S0, dtype=float)
    out = []
    for entry in obs_list:
        mu = A @ mu
        P = A @ P @ A.T + Q
        if entry is not None:
            idx, y = entry
            H = np.zeros((len(idx), len(mu)))
            H[np.arange(len(idx)), idx] = 1.0
            S = H @ P @ H.T + tau2 * np.eye(len(idx))
            K = P @ H.T @ np.linalg.inv(S)
            mu = mu + K @ (y - H @ mu)
            P = P - K @ H @ P
        out.append(mu.copy())
    return np.array(out)


# ---------------------------------------------------------------------------
# Independent dense multi-resolution filter (identity projection)
# ---------------------------------------------------------------------------


def dense_multires_factor(sigma, partition):
    """Unprojected multi-resolution factorization via the dense peeling
    recursion: per region B = W L_V^{-T}, remainder zeroed across regions."""
    n = partition.n_points
    blocks = {}
    current = np.array(sigma, dtype=float)
    for m in range(partition.M + 1):
        nxt = np.zeros_like(current)
        for reg in partition.regions_at_level(m):
            sl = slice(reg.start, reg.stop)
            W = current[sl, :][:, reg.knots]
            V = W[reg.knots - reg.start, :]
            Lv = np.linalg.cholesky(0.5 * (V + V.T))
            B = W @ np.linalg.inv(Lv).T
            blocks[reg.path] = B
            rem = current[sl, sl] - B @ B.T
            for child in reg.children:
                cs = slice(child.start - reg.start, child.stop - reg.start)
                nxt[child.start:child.stop, child.start:child.stop] = (
                    rem[cs, cs]
                )
        current = nxt
    # assemble dense factor in the finest-first column layout
    dense = np.zeros((n, partition.n_columns))
    for reg, (c0, c1) in zip(partition.block_order, partition.column_spans):
        dense[reg.start:reg.stop, c0:c1] = blocks[reg.path]
    return dense


def dense_mrf_means(model, partition, tau2):
    """Independent dense run of the unprojected multi-resolution filter.

    Works entirely with dense matrices in ordered-index space: factor the
    initial covariance, propagate, re-factor B_F B_F^T + Q, and apply the
    small-system update via a dense Cholesky.
    """
    part = partition
    n2o, o2n = part.new_to_old, part.old_to_new
    n = part.n_points
    idx_all = np.arange(n)
    A = model.dynamics.matrix.toarray()[np.ix_(n2o, n2o)]
    Q = model.process_cov.block(n2o[idx_all], n2o[idx_all])
    S0 = model.initial_cov.block(n2o[idx_all], n2o[idx_all])
    mu = model.initial_mean[n2o]
    B = dense_multires_factor(S0, part)
    out = []
    for obs in model.observations:
        mu = A @ mu
        B = dense_multires_factor(A @ B @ B.T @ A.T + Q, part)
        if obs is not None and obs.count:
            oidx = np.sort(o2n[obs.indices])
            y = obs.values[np.argsort(o2n[obs.indices])]
            d = np.zeros(n)
            d[oidx] = 1.0 / tau2
            lam = np.eye(B.shape[1]) + B.T @ (d[:, None] * B)
            L = np.linalg.cholesky(lam)
            Btt = B @ np.linalg.inv(L).T
            z = np.zeros(n)
            z[oidx] = (y - mu[oidx]) / tau2
            mu = mu + Btt @ (Btt.T @ z)
            B = Btt
        mean_grid = np.empty(n)
        mean_grid[n2o] = mu
        out.append(mean_grid)
    return np.array(out)


# ---------------------------------------------------------------------------
# Model builders
# ---------------------------------------------------------------------------


def random_linear_gaussian_model(seed, n_side=8, T=6, tau2=0.05,
                                 obs_fraction=0.4, dynamics=None):
    """Small linear-Gaussian model with simulated data."""
    rng = np.random.default_rng(seed)
    grid = unit_square_grid(n_side)
    n = grid.n_points
    if dynamics is None:
        dynamics = advection_diffusion_matrix(grid, 0.01, 0.0002)
    q_src = FunctionCovSource(grid.points,
                              CovarianceFunction("exponential", 0.1, 0.15))
    s0_src = FunctionCovSource(grid.points,
                               CovarianceFunction("exponential", 1.0, 0.15))
    om = GaussianObs(tau2=tau2)
    chol_q = np.linalg.cholesky(q_src.dense() + 1e-12 * np.eye(n))
    chol_0 = np.linalg.cholesky(s0_src.dense() + 1e-12 * np.eye(n))
    x = chol_0 @ rng.standard_normal(n)
    observations = []
    for _ in range(T):
        x = dynamics.matrix @ x + chol_q @ rng.standard_normal(n)
        k = max(1, int(round(obs_fraction * n)))
        idx = np.sort(rng.choice(n, size=k, replace=False))
        observations.append(Observation(indices=idx,
                                        values=om.sample(rng, x[idx])))
    return StateSpaceModel(grid=grid, dynamics=dynamics, process_cov=q_src,
                           initial_mean=np.zeros(n), initial_cov=s0_src,
                           observation_model=om, observations=observations)


def random_spd_matrix(rng, n, jitter=0.5):
    """Well-conditioned random SPD matrix."""
    a = rng.standard_normal((n, n))
    return a @ a.T / n + jitter * np.eye(n)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
