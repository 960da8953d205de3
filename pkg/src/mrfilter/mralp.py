"""Multi-resolution low-rank factorization of covariance matrices.

``decompose`` peels a covariance apart resolution by resolution: each region
projects its knot covariance onto a small eigenbasis, subtracts the explained
part, and hands the remainder to its children.  The result is a BlockFactor B
with Sigma ~= B B^T.  ``naive_decompose`` is the dense reference recursion
used as an oracle; both consume a CovSource so the factorization never needs
the full matrix.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse
from scipy.linalg import solve_triangular

from .blocksparse import BlockFactor
from .covmodel import CovarianceFunction, cov_block
from .partition import MultiResPartition, Region


class RankDeficiencyError(RuntimeError):
    """A region's projected knot covariance is numerically singular."""


# ---------------------------------------------------------------------------
# Covariance block providers
# ---------------------------------------------------------------------------


class CovSource:
    """Provider of covariance blocks Sigma[rows, cols] in ordered-index space."""

    n: int

    def block(self, rows: np.ndarray, cols: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def dense(self) -> np.ndarray:
        n = self.n
        idx = np.arange(n)
        return self.block(idx, idx)


class FunctionCovSource(CovSource):
    """Stationary covariance function evaluated on (ordered) grid points."""

    def __init__(self, points: np.ndarray, f: CovarianceFunction):
        self.points = np.atleast_2d(points)
        self.f = f
        self.n = self.points.shape[0]

    def block(self, rows, cols):
        return cov_block(self.points[rows], self.points[cols], self.f)


class MatrixCovSource(CovSource):
    """Explicit dense covariance matrix."""

    def __init__(self, sigma: np.ndarray):
        self.sigma = np.asarray(sigma, dtype=float)
        self.n = self.sigma.shape[0]

    def block(self, rows, cols):
        return self.sigma[np.ix_(rows, cols)]


class FactorCovSource(CovSource):
    """Implicit forecast covariance B_F B_F^T + Q, evaluated blockwise.

    ``bf`` is the (sparse) propagated factor; Q comes from another CovSource.
    The full n x n matrix is never materialized.
    """

    def __init__(self, bf: scipy.sparse.spmatrix, q: CovSource):
        self.bf = bf.tocsr()
        self.q = q
        self.n = self.bf.shape[0]

    def block(self, rows, cols):
        left = self.bf[rows]
        right = self.bf[cols].toarray()
        return left @ right.T + self.q.block(rows, cols)


# ---------------------------------------------------------------------------
# Projection bases
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class RegionBasis:
    """Per-region projection data.

    phi: (r', r) rows are the projection directions (None means identity).
    eigvals: descending positive eigenvalues of the projected knot covariance
        (None in identity mode, where the projected matrix is not diagonal).
    whitener: (r, r') matrix T = phi^T vhat^{-1/2}; satisfies
        T T^T = phi^T vhat^{-1} phi, which is all the recursion needs.
    """

    phi: np.ndarray | None
    eigvals: np.ndarray | None
    whitener: np.ndarray


def select_phi(v: np.ndarray, r_prime: int,
               min_rel_eig: float = 1e-10) -> RegionBasis:
    """Top-r' eigenbasis of a symmetric PSD knot covariance.

    Rows of phi are the leading eigenvectors; the projected matrix is then
    diag(eigvals) and its inverse square root is diagonal.

    Raises:
        RankDeficiencyError: if the r'-th eigenvalue falls at or below
            ``min_rel_eig`` times the largest one.
    """
    v = np.asarray(v, dtype=float)
    r = v.shape[0]
    if not (1 <= r_prime <= r):
        raise ValueError(f"need 1 <= r_prime <= {r}, got {r_prime}")
    vs = 0.5 * (v + v.T)
    evals, evecs = np.linalg.eigh(vs)
    lam = evals[::-1][:r_prime]
    u = evecs[:, ::-1][:, :r_prime]
    if lam[0] <= 0 or lam[-1] <= min_rel_eig * lam[0]:
        raise RankDeficiencyError(
            f"projected knot covariance rank-deficient: "
            f"eig[{r_prime - 1}]={lam[-1]:.3e} vs eig[0]={lam[0]:.3e}"
        )
    return RegionBasis(phi=u.T, eigvals=lam, whitener=u / np.sqrt(lam)[None, :])


def identity_basis(v: np.ndarray) -> RegionBasis:
    """Identity projection (r' = r): whitener is the inverse Cholesky factor."""
    vs = 0.5 * (np.asarray(v, dtype=float) + np.asarray(v, dtype=float).T)
    r = vs.shape[0]
    try:
        chol = np.linalg.cholesky(vs)
    except np.linalg.LinAlgError as exc:
        raise RankDeficiencyError(
            "knot covariance not positive definite under identity projection"
        ) from exc
    whitener = solve_triangular(chol, np.eye(r), lower=True).T
    return RegionBasis(phi=None, eigvals=None, whitener=whitener)


def _make_basis(v: np.ndarray, reg: Region, projection: str) -> RegionBasis:
    try:
        if projection == "identity":
            if reg.r_prime != reg.r:
                raise ValueError(
                    f"identity projection needs r' = r at region {reg.path}"
                )
            return identity_basis(v)
        return select_phi(v, reg.r_prime)
    except RankDeficiencyError as exc:
        raise RankDeficiencyError(f"region {reg.path}: {exc}") from None


# ---------------------------------------------------------------------------
# Decomposition
# ---------------------------------------------------------------------------


def decompose(src: CovSource, partition: MultiResPartition,
              projection: str = "eigen",
              bases: dict[tuple[int, ...], RegionBasis] | None = None
              ) -> BlockFactor:
    """Factor a covariance into the multi-resolution block form.

    Walks the region tree once.  At region u with remainder W (rows = u's
    index range, columns = u's knots), the block is B_u = W T_u, and the
    product C_u = B_u restricted to a child's rows feeds the child's
    subtraction term C_u C_u[knot rows]^T.

    Args:
        src: covariance block provider in ordered-index space.
        partition: the region tree.
        projection: "eigen" (default) or "identity" (requires r' = r).
        bases: optional precomputed per-region bases, reused instead of
            recomputing (for cross-checking two decomposition paths).
    """
    if projection not in ("eigen", "identity"):
        raise ValueError(f"unknown projection {projection!r}")
    if src.n != partition.n_points:
        raise ValueError(
            f"source dimension {src.n} != partition size {partition.n_points}"
        )
    blocks: dict[tuple[int, ...], np.ndarray] = {}
    out_bases: dict[tuple[int, ...], RegionBasis] = {}

    def visit(reg: Region, prior: list[np.ndarray]):
        w = src.block(reg.indices, reg.knots)
        kpos = reg.knots - reg.start
        for c in prior:
            w = w - c @ c[kpos].T
        v = w[kpos]
        basis = bases[reg.path] if bases is not None else _make_basis(
            v, reg, projection
        )
        blk = w @ basis.whitener
        blocks[reg.path] = blk
        out_bases[reg.path] = basis
        for child in reg.children:
            lo, hi = child.start - reg.start, child.stop - reg.start
            visit(child, [c[lo:hi] for c in prior] + [blk[lo:hi]])

    visit(partition.root, [])
    return BlockFactor(partition, blocks, bases=out_bases)


def naive_decompose(sigma0: np.ndarray, partition: MultiResPartition,
                    projection: str = "eigen",
                    bases: dict[tuple[int, ...], RegionBasis] | None = None
                    ) -> BlockFactor:
    """Dense reference recursion: materializes every peeled covariance.

    Maintains the full n x n remainder at each resolution (zeroed outside
    same-region pairs) and reads the factor blocks off it.  Oracle use only;
    quadratic memory in n.
    """
    n = partition.n_points
    sigma = np.array(sigma0, dtype=float)
    if sigma.shape != (n, n):
        raise ValueError(f"sigma0 must be {n}x{n}")
    blocks: dict[tuple[int, ...], np.ndarray] = {}
    out_bases: dict[tuple[int, ...], RegionBasis] = {}

    current = sigma
    for m in range(partition.M + 1):
        explained = np.zeros_like(current)
        next_level = np.zeros_like(current)
        for reg in partition.regions_at_level(m):
            sl = slice(reg.start, reg.stop)
            w = np.ascontiguousarray(current[sl, reg.knots])
            v = w[reg.knots - reg.start]
            basis = bases[reg.path] if bases is not None else _make_basis(
                v, reg, projection
            )
            blk = w @ basis.whitener
            blocks[reg.path] = blk
            out_bases[reg.path] = basis
            explained[sl, sl] = blk @ blk.T
            for child in reg.children:
                cs = slice(child.start, child.stop)
                next_level[cs, cs] = current[cs, cs] - explained[cs, cs]
        current = next_level

    return BlockFactor(partition, blocks, bases=out_bases)


def reconstruct(factor: BlockFactor) -> np.ndarray:
    """Dense B B^T (small-n use)."""
    dense = factor.to_dense()
    out = dense @ dense.T
    return 0.5 * (out + out.T)
