"""State transition operators: advection-diffusion, the Lorenz-2005 flow on a
latitude circle, and plain AR/quadratic maps.

Linear operators are sparse matrices; nonlinear ones bundle the map with an
analytic sparse Jacobian so covariance factors can be propagated cheaply.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from typing import Callable

import numpy as np
import scipy.sparse

from .partition import GridSpec


@dataclass(frozen=True)
class LinearDynamics:
    """x_t = A x_{t-1} with sparse A."""

    matrix: scipy.sparse.csr_matrix

    @property
    def n(self) -> int:
        return self.matrix.shape[0]

    def apply(self, x: np.ndarray) -> np.ndarray:
        return self.matrix @ x

    def max_row_nnz(self) -> int:
        return int(np.max(np.diff(self.matrix.indptr)))


@dataclass(frozen=True)
class NonlinearDynamics:
    """x_t = map(x_{t-1}) + noise, with jacobian_at(x) returning sparse A'."""

    map: Callable[[np.ndarray], np.ndarray]
    jacobian_at: Callable[[np.ndarray], scipy.sparse.csr_matrix]
    n: int


# ---------------------------------------------------------------------------
# Advection-diffusion on a regular 2-D grid
# ---------------------------------------------------------------------------


def advection_diffusion_coefficients(alpha: float, beta: float,
                                     ds1: float, ds2: float):
    """Stencil weights (c0, c_m1, c_p1, c_m2, c_p2) of the explicit scheme.

    Forward difference in time (unit step), centered differences in space.
    The advection parts cancel in the row sum, so interior rows sum to
    1 - 4*beta/ds^2 + 4*beta/ds^2 = 1 for any alpha.
    """
    c0 = 1.0 - 2.0 * beta / ds1**2 - 2.0 * beta / ds2**2
    c_m1 = beta / ds1**2 - alpha / (2.0 * ds1)
    c_p1 = beta / ds1**2 + alpha / (2.0 * ds1)
    c_m2 = beta / ds2**2 - alpha / (2.0 * ds2)
    c_p2 = beta / ds2**2 + alpha / (2.0 * ds2)
    return c0, c_m1, c_p1, c_m2, c_p2


def advection_diffusion_matrix(grid: GridSpec, alpha: float, beta: float,
                               ds1: float | None = None,
                               ds2: float | None = None) -> LinearDynamics:
    """Transition matrix of the discretized advection-diffusion flow.

    Interior rows carry at most five nonzeros (self and the four axis
    neighbors); rows at the grid edge simply drop the missing-neighbor
    coefficients (absorbing boundary).

    Args:
        grid: regular square grid built by ``unit_square_grid`` (needs
            ``grid.shape``).
        alpha: advection coefficient.
        beta: diffusion coefficient.
        ds1, ds2: grid spacings; default 1/(n+1) from the grid layout.
    """
    if grid.shape is None:
        raise ValueError("advection-diffusion needs a regular square grid")
    n1, n2 = grid.shape
    if ds1 is None:
        ds1 = 1.0 / (n1 + 1)
    if ds2 is None:
        ds2 = 1.0 / (n2 + 1)
    c0, c_m1, c_p1, c_m2, c_p2 = advection_diffusion_coefficients(
        alpha, beta, ds1, ds2
    )
    if abs(c0) > 1.0:
        warnings.warn(
            f"advection-diffusion scheme may be unstable: |c0|={abs(c0):.3f} > 1",
            stacklevel=2,
        )

    rows, cols, vals = [], [], []

    def add(i1, j1, i2, j2, c):
        if 0 <= i2 < n1 and 0 <= j2 < n2:
            rows.append(i1 * n2 + j1)
            cols.append(i2 * n2 + j2)
            vals.append(c)

    for i in range(n1):
        for j in range(n2):
            add(i, j, i, j, c0)
            add(i, j, i - 1, j, c_m1)
            add(i, j, i + 1, j, c_p1)
            add(i, j, i, j - 1, c_m2)
            add(i, j, i, j + 1, c_p2)

    mat = scipy.sparse.coo_matrix(
        (vals, (rows, cols)), shape=(n1 * n2, n1 * n2)
    ).tocsr()
    return LinearDynamics(matrix=mat)


# ---------------------------------------------------------------------------
# Lorenz-2005 flow on a latitude circle
# ---------------------------------------------------------------------------


def lorenz05_drift(x: np.ndarray, forcing: float) -> np.ndarray:
    """dx_i/dt = x_{i-1} (x_{i+1} - x_{i-2}) - x_i + forcing, circular."""
    xm1 = np.roll(x, 1)
    xp1 = np.roll(x, -1)
    xm2 = np.roll(x, 2)
    return xm1 * (xp1 - xm2) - x + forcing


def _lorenz05_drift_jacobian(x: np.ndarray) -> scipy.sparse.csr_matrix:
    n = len(x)
    idx = np.arange(n)
    xm1 = np.roll(x, 1)
    xp1 = np.roll(x, -1)
    xm2 = np.roll(x, 2)
    data = np.concatenate([
        xp1 - xm2,            # d/dx_{i-1}
        xm1,                  # d/dx_{i+1}
        -xm1,                 # d/dx_{i-2}
        -np.ones(n),          # d/dx_i
    ])
    rows = np.concatenate([idx] * 4)
    cols = np.concatenate([(idx - 1) % n, (idx + 1) % n, (idx - 2) % n, idx])
    return scipy.sparse.coo_matrix((data, (rows, cols)), shape=(n, n)).tocsr()


def lorenz05_step_rk4(x: np.ndarray, dt: float, forcing: float) -> np.ndarray:
    """One classical RK4 step of the Lorenz-2005 flow."""
    k1 = lorenz05_drift(x, forcing)
    k2 = lorenz05_drift(x + 0.5 * dt * k1, forcing)
    k3 = lorenz05_drift(x + 0.5 * dt * k2, forcing)
    k4 = lorenz05_drift(x + dt * k3, forcing)
    return x + dt / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4)


def lorenz05_jacobian(x: np.ndarray, dt: float,
                          forcing: float) -> scipy.sparse.csr_matrix:
    """Jacobian of the RK4 step map, assembled by the chain rule.

    Products of the banded stage Jacobians stay sparse (the band grows by a
    bounded amount per stage), which keeps factor propagation cheap.
    """
    n = len(x)
    eye = scipy.sparse.identity(n, format="csr")
    k1 = lorenz05_drift(x, forcing)
    k2 = lorenz05_drift(x + 0.5 * dt * k1, forcing)
    k3 = lorenz05_drift(x + 0.5 * dt * k2, forcing)
    j1 = _lorenz05_drift_jacobian(x)
    j2 = _lorenz05_drift_jacobian(x + 0.5 * dt * k1) @ (eye + 0.5 * dt * j1)
    j3 = _lorenz05_drift_jacobian(x + 0.5 * dt * k2) @ (eye + 0.5 * dt * j2)
    j4 = _lorenz05_drift_jacobian(x + dt * k3) @ (eye + dt * j3)
    return (eye + dt / 6.0 * (j1 + 2.0 * j2 + 2.0 * j3 + j4)).tocsr()


def lorenz05_dynamics(n: int, dt: float = 0.5,
                          forcing: float = 0.5) -> NonlinearDynamics:
    """Nonlinear dynamics bundle for the Lorenz-2005 flow."""
    return NonlinearDynamics(
        map=lambda x: lorenz05_step_rk4(x, dt, forcing),
        jacobian_at=lambda x: lorenz05_jacobian(x, dt, forcing),
        n=n,
    )


# ---------------------------------------------------------------------------
# Simple maps
# ---------------------------------------------------------------------------


def ar_dynamics(n: int, coefficient: float = 0.6) -> LinearDynamics:
    """Diagonal AR(1): A = coefficient * I."""
    return LinearDynamics(
        matrix=(coefficient * scipy.sparse.identity(n)).tocsr()
    )


def quadratic_dynamics(n: int, linear: float = 0.1,
                       quad: float = 0.1) -> NonlinearDynamics:
    """Elementwise map x -> linear*x + quad*x^2, diagonal Jacobian."""

    def _map(x):
        return linear * x + quad * x * x

    def _jac(x):
        return scipy.sparse.diags(linear + 2.0 * quad * x).tocsr()

    return NonlinearDynamics(map=_map, jacobian_at=_jac, n=n)
