"""Filtering algorithms: exact Kalman, multi-resolution factored filters
(Gaussian, non-Gaussian Newton, nonlinear Jacobian-linearized), a dense
Newton/Laplace reference, and a perturbed-observation ensemble filter.

All filters consume the same StateSpaceModel and produce a FilterResult with
per-time filtering means in grid order.  The factored filters run internally
in the partition's ordered-index space and carry a BlockFactor instead of a
covariance; its block structure is preserved through time, which is what makes
them fast.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass

import numpy as np
import scipy.sparse
from scipy.linalg import cho_factor, cho_solve, solve

from .blocksparse import (
    BlockFactor,
    factor_postmultiply,
    gram_plus_identity,
    invert_lower_triangular,
    selection_weights,
    structured_cholesky,
)
from .covmodel import GaussianObs, ObservationModel, TaperFunction, taper_matrix
from .dynamics import LinearDynamics, NonlinearDynamics
from .mralp import CovSource, FactorCovSource, decompose
from .partition import GridSpec, MultiResPartition


class FilterError(RuntimeError):
    """A filter run failed; message carries the time index."""


class NewtonConvergenceError(FilterError):
    """Newton iteration hit the cap or diverged at some time step."""

    def __init__(self, message, t=None, iterations=None, step_norms=None):
        super().__init__(message)
        self.t = t
        self.iterations = iterations
        self.step_norms = step_norms


# ---------------------------------------------------------------------------
# Model and result containers
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Observation:
    """Values observed at a subset of grid points at one time.

    Indices are grid-order site indices, strictly ascending.
    """

    indices: np.ndarray
    values: np.ndarray

    def __post_init__(self):
        idx = np.asarray(self.indices, dtype=np.int64)
        val = np.asarray(self.values, dtype=float)
        if idx.shape != val.shape or idx.ndim != 1:
            raise ValueError("indices and values must be matching 1-D arrays")
        if idx.size and np.any(np.diff(idx) <= 0):
            raise ValueError("observation indices must be strictly ascending")
        object.__setattr__(self, "indices", idx)
        object.__setattr__(self, "values", val)

    @property
    def count(self) -> int:
        return self.indices.size


@dataclass
class StateSpaceModel:
    """Dynamics, covariances, observation model, and the data.

    ``process_cov`` and ``initial_cov`` are CovSource providers in grid order;
    ``observations`` has one entry per time step (None marks a time with no
    data).  The observation model supplies the per-site likelihood; Gaussian
    noise R = tau^2 I corresponds to GaussianObs(tau2).
    """

    grid: GridSpec
    dynamics: LinearDynamics | NonlinearDynamics
    process_cov: CovSource
    initial_mean: np.ndarray
    initial_cov: CovSource
    observation_model: ObservationModel
    observations: list[Observation | None]

    def __post_init__(self):
        self.initial_mean = np.asarray(self.initial_mean, dtype=float)
        n = self.grid.n_points
        if self.initial_mean.shape != (n,):
            raise ValueError(f"initial mean must have length {n}")
        for t, obs in enumerate(self.observations):
            if obs is not None and obs.count and obs.indices[-1] >= n:
                raise ValueError(f"observation at t={t + 1} indexes beyond grid")

    @property
    def n(self) -> int:
        return self.grid.n_points

    @property
    def T(self) -> int:
        return len(self.observations)

    @property
    def is_linear(self) -> bool:
        return isinstance(self.dynamics, LinearDynamics)


@dataclass
class FilterState:
    """Terminal state of a run: time index, mean (grid order), and the
    uncertainty carrier (BlockFactor, dense covariance, or ensemble)."""

    t: int
    mean: np.ndarray
    factor: BlockFactor | None = None
    covariance: np.ndarray | None = None
    ensemble: np.ndarray | None = None


@dataclass
class FilterResult:
    """Per-time filtering means plus diagnostics.

    means[t-1] is the filtering mean at time t, in grid order.  Newton counts
    are zero for non-iterative methods.  Wall times are per step, split into
    forecast and update stages.
    """

    method: str
    means: np.ndarray
    newton_iters: np.ndarray
    forecast_ms: np.ndarray
    update_ms: np.ndarray
    final_state: FilterState
    factors: list[BlockFactor] | None = None
    covariances: list[np.ndarray] | None = None

    def __post_init__(self):
        if not np.all(np.isfinite(self.means)):
            raise FilterError(f"{self.method}: non-finite filtering means")

    @property
    def total_ms(self) -> float:
        return float(np.sum(self.forecast_ms) + np.sum(self.update_ms))


def _require_gaussian(model: StateSpaceModel, method: str) -> GaussianObs:
    om = model.observation_model
    if not isinstance(om, GaussianObs):
        raise FilterError(f"{method} requires Gaussian observation noise")
    return om


def _dense_cov(src: CovSource) -> np.ndarray:
    sig = src.dense()
    return 0.5 * (sig + sig.T)


# ---------------------------------------------------------------------------
# Exact Kalman filter (dense baseline)
# ---------------------------------------------------------------------------


def kalman_filter(model: StateSpaceModel,
                  keep_covariances: bool = False) -> FilterResult:
    """Exact filtering recursion with dense covariances.

    Baseline and oracle; cost is cubic in the observed count per step.
    """
    if not model.is_linear:
        raise FilterError("exact Kalman filter requires linear dynamics")
    om = _require_gaussian(model, "kalman_filter")
    n, T = model.n, model.T
    A = model.dynamics.matrix
    Q = _dense_cov(model.process_cov)
    mu = model.initial_mean.copy()
    sigma = _dense_cov(model.initial_cov)

    means = np.zeros((T, n))
    f_ms = np.zeros(T)
    u_ms = np.zeros(T)
    covs = [] if keep_covariances else None

    for t in range(1, T + 1):
        tic = time.perf_counter()
        mu = A @ mu
        sigma = A @ (A @ sigma).T + Q
        sigma = 0.5 * (sigma + sigma.T)
        f_ms[t - 1] = 1e3 * (time.perf_counter() - tic)

        tic = time.perf_counter()
        obs = model.observations[t - 1]
        if obs is not None and obs.count:
            idx = obs.indices
            innov_cov = sigma[np.ix_(idx, idx)] + om.tau2 * np.eye(idx.size)
            try:
                cf = cho_factor(innov_cov, lower=True)
            except np.linalg.LinAlgError as exc:
                raise FilterError(f"t={t}: innovation matrix not PD") from exc
            gain = cho_solve(cf, sigma[idx, :]).T
            mu = mu + gain @ (obs.values - mu[idx])
            sigma = sigma - gain @ sigma[idx, :]
            sigma = 0.5 * (sigma + sigma.T)
        u_ms[t - 1] = 1e3 * (time.perf_counter() - tic)
        means[t - 1] = mu
        if covs is not None:
            covs.append(sigma.copy())

    state = FilterState(t=T, mean=mu, covariance=sigma)
    return FilterResult(method="kalman", means=means,
                        newton_iters=np.zeros(T, dtype=int),
                        forecast_ms=f_ms, update_ms=u_ms,
                        final_state=state, covariances=covs)


# ---------------------------------------------------------------------------
# Factored filters: shared machinery
# ---------------------------------------------------------------------------


class _PermutedCovSource(CovSource):
    """View of a grid-order CovSource in ordered-index space."""

    def __init__(self, src: CovSource, new_to_old: np.ndarray):
        self.src = src
        self.new_to_old = new_to_old
        self.n = src.n

    def block(self, rows, cols):
        return self.src.block(self.new_to_old[rows], self.new_to_old[cols])


def _permute_sparse(mat, perm) -> scipy.sparse.csr_matrix:
    return mat.tocsr()[perm][:, perm]


def _ordered_observation(obs: Observation, old_to_new: np.ndarray):
    """Map an observation into ordered-index space, keeping indices ascending
    (the partition reordering does not preserve the grid order)."""
    idx = old_to_new[obs.indices]
    order = np.argsort(idx)
    return idx[order], obs.values[order]


def laplace_newton_step(mu_f: np.ndarray, b_f: BlockFactor, x: np.ndarray,
                        obs_model: ObservationModel, y: np.ndarray,
                        idx: np.ndarray):
    """One Newton update of the factored filtering problem.

    Everything lives in ordered-index space: ``idx`` are the observed ordered
    sites (ascending) and ``y`` their values.  Unobserved sites contribute
    zero score and curvature.  Returns the next iterate and the factor at the
    current one.
    """
    n = len(mu_f)
    u, d = obs_model.score_hess(y, x[idx])
    if np.any(d < 0):
        raise FilterError("negative observation curvature")
    d_full = selection_weights(n, idx, d)
    u_full = np.zeros(n)
    u_full[idx] = u
    gram = gram_plus_identity(b_f, d_full)
    linv = invert_lower_triangular(structured_cholesky(gram))
    b_x = factor_postmultiply(b_f, linv)
    rhs = d_full * (x - mu_f) + u_full
    x_next = mu_f + b_x.apply(b_x.apply_transpose(rhs))
    return x_next, b_x


def _newton_solve(mu_f, b_f, obs_model, y, idx, epsilon, max_iter,
                  scale_by_sqrt_n, t):
    """Iterate laplace_newton_step from the forecast mean until the step norm
    drops below epsilon; returns (mean, factor at accepted iterate, count)."""
    n = len(mu_f)
    scale = math.sqrt(n) if scale_by_sqrt_n else 1.0
    x = mu_f.copy()
    norms = []
    grow = 0
    for it in range(1, max_iter + 1):
        x_next, _ = laplace_newton_step(mu_f, b_f, x, obs_model, y, idx)
        step = float(np.linalg.norm(x_next - x)) / scale
        norms.append(step)
        if step < epsilon:
            _, b_acc = laplace_newton_step(mu_f, b_f, x_next, obs_model, y, idx)
            return x_next, b_acc, it
        grow = grow + 1 if (len(norms) > 1 and step > norms[-2]) else 0
        if grow >= 5:
            raise NewtonConvergenceError(
                f"t={t}: Newton diverging (step norm grew 5 times in a row)",
                t=t, iterations=it, step_norms=norms)
        x = x_next
    raise NewtonConvergenceError(
        f"t={t}: Newton did not converge in {max_iter} iterations "
        f"(last step {norms[-1]:.3e})", t=t, iterations=max_iter,
        step_norms=norms)


def _factored_filter(model: StateSpaceModel, partition: MultiResPartition,
                     projection: str, newton: bool, epsilon: float,
                     max_iter: int, scale_by_sqrt_n: bool,
                     keep_factors: bool, method: str) -> FilterResult:
    """Common engine: forecast by factor propagation + re-decomposition,
    update either in closed form (Gaussian) or by Newton iteration."""
    n, T = model.n, model.T
    part = partition
    if part.n_points != n:
        raise FilterError("partition size does not match the model grid")
    n2o, o2n = part.new_to_old, part.old_to_new

    q_src = _PermutedCovSource(model.process_cov, n2o)
    s0_src = _PermutedCovSource(model.initial_cov, n2o)
    om = model.observation_model
    if not newton:
        om = _require_gaussian(model, method)

    linear = model.is_linear
    if linear:
        a_ord = _permute_sparse(model.dynamics.matrix, n2o)

    mu = model.initial_mean[n2o]
    factor = decompose(s0_src, part, projection=projection)

    means = np.zeros((T, n))
    iters = np.zeros(T, dtype=int)
    f_ms = np.zeros(T)
    u_ms = np.zeros(T)
    factors = [] if keep_factors else None

    for t in range(1, T + 1):
        tic = time.perf_counter()
        if linear:
            mu_f = a_ord @ mu
            bf_sparse = a_ord @ factor.to_sparse()
        else:
            mu_grid = np.empty(n)
            mu_grid[n2o] = mu
            mu_f = model.dynamics.map(mu_grid)[n2o]
            a_ord = _permute_sparse(model.dynamics.jacobian_at(mu_grid), n2o)
            bf_sparse = a_ord @ factor.to_sparse()
        try:
            b_f = decompose(FactorCovSource(bf_sparse, q_src), part,
                            projection=projection)
        except Exception as exc:
            raise FilterError(f"t={t}: forecast decomposition failed: {exc}") from exc
        f_ms[t - 1] = 1e3 * (time.perf_counter() - tic)

        tic = time.perf_counter()
        obs = model.observations[t - 1]
        if obs is None or obs.count == 0:
            mu, factor = mu_f, b_f
        else:
            idx, y = _ordered_observation(obs, o2n)
            if newton:
                mu, factor, iters[t - 1] = _newton_solve(
                    mu_f, b_f, om, y, idx, epsilon, max_iter,
                    scale_by_sqrt_n, t)
            else:
                rinv = 1.0 / om.tau2
                gram = gram_plus_identity(b_f, (idx, np.full(idx.size, rinv)))
                linv = invert_lower_triangular(structured_cholesky(gram))
                factor = factor_postmultiply(b_f, linv)
                z = np.zeros(n)
                z[idx] = rinv * (y - mu_f[idx])
                mu = mu_f + factor.apply(factor.apply_transpose(z))
        u_ms[t - 1] = 1e3 * (time.perf_counter() - tic)

        mean_grid = np.empty(n)
        mean_grid[n2o] = mu
        means[t - 1] = mean_grid
        if factors is not None:
            factors.append(factor)

    state = FilterState(t=T, mean=means[-1].copy(), factor=factor)
    return FilterResult(method=method, means=means, newton_iters=iters,
                        forecast_ms=f_ms, update_ms=u_ms, final_state=state,
                        factors=factors)


def mrf_lp_filter(model: StateSpaceModel, partition: MultiResPartition,
                  projection: str = "eigen",
                  keep_factors: bool = False) -> FilterResult:
    """Factored filter for linear-Gaussian models.

    Forecast: propagate the mean and factor through A, then re-factor the
    implicit covariance B^F B^F^T + Q.  Update: assemble the small Gram
    matrix, Cholesky it on the structural envelope, post-multiply the factor,
    and apply the closed-form mean correction.  Times without data pass the
    forecast pair through unchanged.

    ``projection="identity"`` (with a partition built with r' = r) gives the
    unprojected multi-resolution variant.
    """
    if not model.is_linear:
        raise FilterError("mrf_lp_filter requires linear dynamics; "
                          "use mrf_lp_filter_nonlinear")
    return _factored_filter(model, partition, projection, newton=False,
                            epsilon=0.0, max_iter=0, scale_by_sqrt_n=True,
                            keep_factors=keep_factors, method="mrflp")


def mrf_lp_filter_nongaussian(model: StateSpaceModel,
                              partition: MultiResPartition,
                              epsilon: float = 1e-6,
                              projection: str = "eigen",
                              max_iter: int = 100,
                              scale_by_sqrt_n: bool = True,
                              keep_factors: bool = False) -> FilterResult:
    """Factored filter with exponential-family observations (linear dynamics).

    The update maximizes the per-time posterior by Newton iteration started
    at the forecast mean; iteration stops when the (sqrt(n)-scaled) step norm
    falls below epsilon, and the accepted iterate also supplies the factor.
    """
    if not model.is_linear:
        raise FilterError("mrf_lp_filter_nongaussian requires linear dynamics")
    return _factored_filter(model, partition, projection, newton=True,
                            epsilon=epsilon, max_iter=max_iter,
                            scale_by_sqrt_n=scale_by_sqrt_n,
                            keep_factors=keep_factors, method="mrflp")


def mrf_lp_filter_nonlinear(model: StateSpaceModel,
                            partition: MultiResPartition,
                            epsilon: float = 1e-6,
                            projection: str = "eigen",
                            max_iter: int = 100,
                            scale_by_sqrt_n: bool = True,
                            keep_factors: bool = False) -> FilterResult:
    """Factored filter for nonlinear dynamics and exponential-family data.

    The forecast linearizes the dynamics at the current mean (Jacobian) to
    propagate the factor while the mean moves through the full nonlinear map;
    the update is identical to the linear non-Gaussian case.  With linear
    dynamics supplied as a NonlinearDynamics wrapper the output coincides
    with mrf_lp_filter_nongaussian.
    """
    return _factored_filter(model, partition, projection, newton=True,
                            epsilon=epsilon, max_iter=max_iter,
                            scale_by_sqrt_n=scale_by_sqrt_n,
                            keep_factors=keep_factors, method="mrflp")


# ---------------------------------------------------------------------------
# Dense Newton/Laplace reference ("original method")
# ---------------------------------------------------------------------------


def dense_laplace_filter(model: StateSpaceModel, epsilon: float = 1e-6,
                         max_iter: int = 100,
                         scale_by_sqrt_n: bool = True) -> FilterResult:
    """Dense reference filter: explicit covariances, Newton posterior mode.

    Linear dynamics use the exact forecast; nonlinear dynamics linearize at
    the mean for the covariance (first-order forecast).  With Gaussian
    observations this reduces to the (extended) Kalman filter.
    """
    n, T = model.n, model.T
    om = model.observation_model
    Q = _dense_cov(model.process_cov)
    mu = model.initial_mean.copy()
    sigma = _dense_cov(model.initial_cov)
    linear = model.is_linear

    means = np.zeros((T, n))
    iters = np.zeros(T, dtype=int)
    f_ms = np.zeros(T)
    u_ms = np.zeros(T)
    scale = math.sqrt(n) if scale_by_sqrt_n else 1.0

    for t in range(1, T + 1):
        tic = time.perf_counter()
        if linear:
            A = model.dynamics.matrix
            mu_f = A @ mu
        else:
            A = model.dynamics.jacobian_at(mu)
            mu_f = model.dynamics.map(mu)
        sigma_f = A @ (A @ sigma).T + Q
        sigma_f = 0.5 * (sigma_f + sigma_f.T)
        f_ms[t - 1] = 1e3 * (time.perf_counter() - tic)

        tic = time.perf_counter()
        obs = model.observations[t - 1]
        if obs is None or obs.count == 0:
            mu, sigma = mu_f, sigma_f
        else:
            idx, y = obs.indices, obs.values
            try:
                prec_f = np.linalg.inv(sigma_f)
            except np.linalg.LinAlgError as exc:
                raise FilterError(f"t={t}: forecast covariance singular") from exc
            prec_f = 0.5 * (prec_f + prec_f.T)
            x = mu_f.copy()
            norms: list[float] = []
            grow = 0
            for it in range(1, max_iter + 1):
                u, d = om.score_hess(y, x[idx])
                if np.any(d < 0):
                    raise FilterError(f"t={t}: negative observation curvature")
                d_full = selection_weights(n, idx, d)
                u_full = np.zeros(n)
                u_full[idx] = u
                w = prec_f + np.diag(d_full)
                try:
                    cf = cho_factor(0.5 * (w + w.T), lower=True)
                except np.linalg.LinAlgError as exc:
                    raise FilterError(f"t={t}: Newton Hessian not PD") from exc
                x_next = mu_f + cho_solve(cf, d_full * (x - mu_f) + u_full)
                step = float(np.linalg.norm(x_next - x)) / scale
                norms.append(step)
                if step < epsilon:
                    iters[t - 1] = it
                    u, d = om.score_hess(y, x_next[idx])
                    w = prec_f + np.diag(selection_weights(n, idx, d))
                    cf = cho_factor(0.5 * (w + w.T), lower=True)
                    sigma = cho_solve(cf, np.eye(n))
                    sigma = 0.5 * (sigma + sigma.T)
                    mu = x_next
                    break
                grow = grow + 1 if (len(norms) > 1 and step > norms[-2]) else 0
                if grow >= 5:
                    raise NewtonConvergenceError(
                        f"t={t}: dense Newton diverging", t=t, iterations=it,
                        step_norms=norms)
                x = x_next
            else:
                raise NewtonConvergenceError(
                    f"t={t}: dense Newton hit the {max_iter}-iteration cap",
                    t=t, iterations=max_iter, step_norms=norms)
        u_ms[t - 1] = 1e3 * (time.perf_counter() - tic)
        means[t - 1] = mu

    state = FilterState(t=T, mean=mu.copy(), covariance=sigma)
    return FilterResult(method="dense_laplace", means=means,
                        newton_iters=iters, forecast_ms=f_ms, update_ms=u_ms,
                        final_state=state)


# ---------------------------------------------------------------------------
# Ensemble Kalman filter
# ---------------------------------------------------------------------------


def _tapered_sample_cov(ensemble: np.ndarray,
                        taper: scipy.sparse.csr_matrix | None):
    """Sample covariance of the ensemble, optionally Hadamard-tapered.

    With a taper, only entries on the taper's sparsity pattern are formed.
    """
    n, m = ensemble.shape
    xc = ensemble - ensemble.mean(axis=1, keepdims=True)
    if taper is None:
        return (xc @ xc.T) / (m - 1)
    pattern = taper.tocoo()
    vals = np.einsum("ij,ij->i", xc[pattern.row], xc[pattern.col]) / (m - 1)
    return scipy.sparse.csr_matrix(
        (vals * pattern.data, (pattern.row, pattern.col)), shape=(n, n)
    )


def enkf_filter(model: StateSpaceModel, ensemble_size: int,
                taper: TaperFunction | None = None,
                seed: int = 0) -> FilterResult:
    """Perturbed-observation ensemble filter with optional localization.

    The forecast covariance estimate is the ensemble sample covariance,
    Hadamard-multiplied by the taper matrix when a taper is supplied.
    Gaussian observation noise only.
    """
    om = _require_gaussian(model, "enkf_filter")
    n, T = model.n, model.T
    rng = np.random.default_rng(seed)
    taper_mat = None
    if taper is not None:
        taper_mat = taper_matrix(model.grid.points, taper)

    chol0 = np.linalg.cholesky(
        _dense_cov(model.initial_cov) + 1e-12 * np.eye(n))
    ensemble = (model.initial_mean[:, None]
                + chol0 @ rng.standard_normal((n, ensemble_size)))
    q = _dense_cov(model.process_cov)
    if np.any(np.diag(q) > 0):
        chol_q = np.linalg.cholesky(q + 1e-12 * np.eye(n))
    else:
        chol_q = np.zeros((n, n))

    means = np.zeros((T, n))
    f_ms = np.zeros(T)
    u_ms = np.zeros(T)

    for t in range(1, T + 1):
        tic = time.perf_counter()
        if model.is_linear:
            ensemble = model.dynamics.matrix @ ensemble
        else:
            ensemble = np.column_stack(
                [model.dynamics.map(ensemble[:, i]) for i in range(ensemble_size)]
            )
        ensemble = ensemble + chol_q @ rng.standard_normal((n, ensemble_size))
        f_ms[t - 1] = 1e3 * (time.perf_counter() - tic)

        tic = time.perf_counter()
        obs = model.observations[t - 1]
        if obs is not None and obs.count:
            idx, y = obs.indices, obs.values
            cov = _tapered_sample_cov(ensemble, taper_mat)
            if scipy.sparse.issparse(cov):
                c_ht = cov[:, idx].toarray()
            else:
                c_ht = cov[:, idx]
            innov_cov = c_ht[idx, :] + om.tau2 * np.eye(idx.size)
            try:
                gain = solve(innov_cov, c_ht.T, assume_a="pos").T
            except np.linalg.LinAlgError as exc:
                raise FilterError(f"t={t}: singular innovation matrix") from exc
            perturb = math.sqrt(om.tau2) * rng.standard_normal(
                (idx.size, ensemble_size))
            ensemble = ensemble + gain @ (
                y[:, None] - ensemble[idx, :] + perturb)
        u_ms[t - 1] = 1e3 * (time.perf_counter() - tic)
        means[t - 1] = ensemble.mean(axis=1)

    state = FilterState(t=T, mean=means[-1].copy(), ensemble=ensemble)
    return FilterResult(method="enkf", means=means,
                        newton_iters=np.zeros(T, dtype=int),
                        forecast_ms=f_ms, update_ms=u_ms, final_state=state)


# ---------------------------------------------------------------------------
# Pure forecasting beyond the data
# ---------------------------------------------------------------------------


def forecast(model: StateSpaceModel, partition: MultiResPartition | None,
             state: FilterState, horizon: int,
             with_factors: bool = False, projection: str = "eigen"):
    """Propagate a terminal filter state ``horizon`` steps with no data.

    Returns (means, factors): means is an array of the forecast means in grid
    order; factors is a list of BlockFactor (requires ``partition`` and a
    state carrying a factor) when requested, else None.  Skipping the factors
    avoids per-step re-decomposition entirely.
    """
    n = model.n
    means = np.zeros((horizon, n))
    factors: list[BlockFactor] | None = [] if with_factors else None
    mu_grid = state.mean.copy()

    if with_factors:
        if partition is None or state.factor is None:
            raise FilterError("factor forecasting needs a partition and a "
                              "state with a BlockFactor")
        n2o = partition.new_to_old
        q_src = _PermutedCovSource(model.process_cov, n2o)
        factor = state.factor

    for h in range(horizon):
        if model.is_linear:
            mu_grid = model.dynamics.matrix @ mu_grid
        else:
            mu_next = model.dynamics.map(mu_grid)
            if with_factors:
                jac = model.dynamics.jacobian_at(mu_grid)
            mu_grid = mu_next
        means[h] = mu_grid
        if with_factors:
            a_mat = model.dynamics.matrix if model.is_linear else jac
            a_ord = _permute_sparse(a_mat, partition.new_to_old)
            bf_sparse = a_ord @ factor.to_sparse()
            factor = decompose(FactorCovSource(bf_sparse, q_src), partition,
                               projection=projection)
            factors.append(factor)

    return means, factors
