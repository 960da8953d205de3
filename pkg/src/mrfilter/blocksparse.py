"""Block-sparse linear algebra on the partition-induced envelope.

Every matrix here is stored as dense blocks addressed by region (factor) or by
region pair (Gram/triangular); the admissible block set is analytic from the
partition, so no symbolic analysis is ever needed.  Structural zeros are never
stored; numerical zeros inside the envelope are.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse
from scipy.linalg import solve_triangular

from .partition import MultiResPartition


class FactorizationError(RuntimeError):
    """A structured factorization hit a non-positive-definite pivot."""


# ---------------------------------------------------------------------------
# Block factor  B
# ---------------------------------------------------------------------------


class BlockFactor:
    """Tall factor B with one dense block per region.

    Row support of the block for region u is the contiguous ordered-index
    range of u; its columns are u's slice of the global column layout
    (finest resolution first).  B B^T is the approximated covariance.
    """

    def __init__(self, partition: MultiResPartition,
                 blocks: dict[tuple[int, ...], np.ndarray],
                 bases: dict | None = None):
        self.partition = partition
        self.blocks = blocks
        self.bases = bases
        for reg in partition.block_order:
            blk = blocks[reg.path]
            expect = (reg.size, reg.r_prime)
            if blk.shape != expect:
                raise ValueError(
                    f"block {reg.path}: shape {blk.shape}, expected {expect}"
                )

    @property
    def n_rows(self) -> int:
        return self.partition.n_points

    @property
    def n_cols(self) -> int:
        return self.partition.n_columns

    def to_dense(self) -> np.ndarray:
        out = np.zeros((self.n_rows, self.n_cols))
        for reg, (c0, c1) in zip(self.partition.block_order,
                                 self.partition.column_spans):
            out[reg.start:reg.stop, c0:c1] = self.blocks[reg.path]
        return out

    def to_sparse(self) -> scipy.sparse.csr_matrix:
        rows, cols, vals = [], [], []
        for reg, (c0, c1) in zip(self.partition.block_order,
                                 self.partition.column_spans):
            blk = self.blocks[reg.path]
            r_idx, c_idx = np.meshgrid(
                np.arange(reg.start, reg.stop),
                np.arange(c0, c1), indexing="ij",
            )
            rows.append(r_idx.ravel())
            cols.append(c_idx.ravel())
            vals.append(blk.ravel())
        return scipy.sparse.coo_matrix(
            (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
            shape=(self.n_rows, self.n_cols),
        ).tocsr()

    def apply(self, w: np.ndarray) -> np.ndarray:
        """B @ w for a coefficient vector w of length N'."""
        out = np.zeros(self.n_rows)
        for reg, (c0, c1) in zip(self.partition.block_order,
                                 self.partition.column_spans):
            out[reg.start:reg.stop] += self.blocks[reg.path] @ w[c0:c1]
        return out

    def apply_transpose(self, z: np.ndarray) -> np.ndarray:
        """B^T @ z for a site vector z of length n."""
        out = np.zeros(self.n_cols)
        for reg, (c0, c1) in zip(self.partition.block_order,
                                 self.partition.column_spans):
            out[c0:c1] = self.blocks[reg.path].T @ z[reg.start:reg.stop]
        return out


# ---------------------------------------------------------------------------
# Gram and triangular block matrices
# ---------------------------------------------------------------------------


class _BlockSquare:
    """Shared storage for N' x N' block matrices on the envelope.

    ``blocks[(i, j)]`` holds the dense block for block-row i and block-column
    j in the global block order, for admissible pairs with i >= j (block-row
    region is an ancestor-or-self of the block-column region).
    """

    def __init__(self, partition: MultiResPartition,
                 blocks: dict[tuple[int, int], np.ndarray]):
        self.partition = partition
        self.blocks = blocks

    @property
    def n(self) -> int:
        return self.partition.n_columns

    def block(self, i: int, j: int) -> np.ndarray:
        return self.blocks[(i, j)]


class BlockGram(_BlockSquare):
    """Symmetric positive definite Lambda = I + B^T W B; lower blocks stored."""

    def to_dense(self) -> np.ndarray:
        spans = self.partition.column_spans
        out = np.zeros((self.n, self.n))
        for (i, j), blk in self.blocks.items():
            r0, r1 = spans[i]
            c0, c1 = spans[j]
            out[r0:r1, c0:c1] = blk
            if i != j:
                out[c0:c1, r0:r1] = blk.T
        return out


class BlockTriangular(_BlockSquare):
    """Lower-triangular matrix on the same envelope as BlockGram's lower part."""

    def to_dense(self) -> np.ndarray:
        spans = self.partition.column_spans
        out = np.zeros((self.n, self.n))
        for (i, j), blk in self.blocks.items():
            r0, r1 = spans[i]
            c0, c1 = spans[j]
            out[r0:r1, c0:c1] = blk
        return out


# ---------------------------------------------------------------------------
# Weights for the Gram assembly
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class LeafBlockWeights:
    """Noise precision that is block-diagonal by finest region.

    ``blocks`` maps a leaf path to (site_indices, precision_block) where
    site_indices are ordered-space indices inside that leaf, ascending, and
    precision_block is the dense symmetric R^{-1} block on those sites.
    """

    blocks: dict[tuple[int, ...], tuple[np.ndarray, np.ndarray]]

    def validate(self, partition: MultiResPartition) -> None:
        for path, (idx, pre) in self.blocks.items():
            reg = partition.region(path)
            if not reg.is_leaf:
                raise ValueError(f"{path} is not a finest region")
            idx = np.asarray(idx)
            if np.any(idx < reg.start) or np.any(idx >= reg.stop):
                raise ValueError(f"sites for leaf {path} fall outside the leaf")
            if np.any(np.diff(idx) <= 0):
                raise ValueError(f"sites for leaf {path} must be ascending")
            if pre.shape != (idx.size, idx.size):
                raise ValueError(f"precision block shape mismatch for {path}")
            if not np.allclose(pre, pre.T):
                raise ValueError(f"precision block for {path} must be symmetric")


def selection_weights(n: int, indices: np.ndarray, rinv) -> np.ndarray:
    """Diagonal weights for a row-selection H and diagonal noise precision.

    Equivalent to diag(H^T R^{-1} H): the per-site precision scattered onto
    the observed sites, zero elsewhere.
    """
    d = np.zeros(n)
    d[np.asarray(indices, dtype=int)] = rinv
    return d


def _weighted_blocks(B: BlockFactor, weights) -> dict[tuple[int, ...], np.ndarray]:
    """Per-region blocks of W B where W is the (diagonal or per-leaf) weight."""
    part = B.partition
    if isinstance(weights, tuple) and len(weights) == 2 and not isinstance(
        weights, LeafBlockWeights
    ):
        weights = selection_weights(part.n_points, weights[0], weights[1])
    if isinstance(weights, LeafBlockWeights):
        weights.validate(part)
        out = {}
        for reg in part.block_order:
            wb = np.zeros_like(B.blocks[reg.path])
            for path, (idx, pre) in weights.blocks.items():
                if path[: reg.level] != reg.path:
                    continue
                rows = np.asarray(idx) - reg.start
                wb[rows] = pre @ B.blocks[reg.path][rows]
            out[reg.path] = wb
        return out
    d = np.asarray(weights, dtype=float)
    if d.shape != (part.n_points,):
        raise ValueError(f"weight vector must have length {part.n_points}")
    if np.any(d < 0):
        raise ValueError("weights must be nonnegative")
    return {
        reg.path: d[reg.start:reg.stop, None] * B.blocks[reg.path]
        for reg in part.block_order
    }


def gram_plus_identity(B: BlockFactor, weights) -> BlockGram:
    """Assemble Lambda = I_{N'} + B^T W B on the admissible blocks only.

    ``weights`` is a nonnegative per-site vector d (giving W = diag(d)), a
    pair (observed_indices, per-site precisions), or LeafBlockWeights.
    """
    part = B.partition
    wb = _weighted_blocks(B, weights)
    order = part.block_order
    blocks: dict[tuple[int, int], np.ndarray] = {}
    for j, v in enumerate(order):
        wbj = wb[v.path]
        diag = B.blocks[v.path].T @ wbj
        diag = 0.5 * (diag + diag.T)
        blocks[(j, j)] = diag + np.eye(v.r_prime)
        for i in part.block_ancestors[j]:
            u = order[i]
            lo = v.start - u.start
            blocks[(i, j)] = B.blocks[u.path][lo:lo + v.size].T @ wbj
    return BlockGram(part, blocks)


# ---------------------------------------------------------------------------
# Structured factorization
# ---------------------------------------------------------------------------


def structured_cholesky(gram: BlockGram) -> BlockTriangular:
    """Cholesky of a BlockGram; fill stays inside the analytic envelope.

    Left-looking over block columns: the update for block (i, j) only ever
    involves blocks at common descendants, which are admissible by the chain
    structure of ancestor paths.
    """
    part = gram.partition
    order = part.block_order
    L: dict[tuple[int, int], np.ndarray] = {}
    for j in range(len(order)):
        desc = part.block_descendants[j]
        S = gram.blocks[(j, j)].copy()
        for k in desc:
            S -= L[(j, k)] @ L[(j, k)].T
        try:
            L[(j, j)] = np.linalg.cholesky(0.5 * (S + S.T))
        except np.linalg.LinAlgError as exc:
            raise FactorizationError(
                f"non-positive-definite pivot at block {order[j].path}"
            ) from exc
        for i in part.block_ancestors[j]:
            S = gram.blocks[(i, j)].copy()
            for k in desc:
                # (i, k) is admissible because ancestors of k form a chain.
                S -= L[(i, k)] @ L[(j, k)].T
            L[(i, j)] = solve_triangular(L[(j, j)], S.T, lower=True).T
    return BlockTriangular(part, L)


def invert_lower_triangular(L: BlockTriangular) -> BlockTriangular:
    """Explicit inverse of a structured lower-triangular factor.

    The inverse lives on the same envelope: block (i, j) of L^{-1} is nonzero
    only when region i is an ancestor-or-self of region j.
    """
    part = L.partition
    order = part.block_order
    X: dict[tuple[int, int], np.ndarray] = {}
    eye = {j: np.eye(order[j].r_prime) for j in range(len(order))}
    for j in range(len(order)):
        diag = L.blocks[(j, j)]
        if np.any(np.diag(diag) == 0):
            raise FactorizationError(
                f"zero diagonal entry in block {order[j].path}"
            )
        X[(j, j)] = solve_triangular(diag, eye[j], lower=True)
        chain = [j]
        for i in part.block_ancestors[j]:
            S = L.blocks[(i, chain[0])] @ X[(chain[0], j)]
            for k in chain[1:]:
                S += L.blocks[(i, k)] @ X[(k, j)]
            X[(i, j)] = -solve_triangular(L.blocks[(i, i)], S, lower=True)
            chain.append(i)
    return BlockTriangular(part, X)


def factor_postmultiply(B: BlockFactor, linv: BlockTriangular) -> BlockFactor:
    """B @ L^{-T} with the output on B's exact structural map."""
    part = B.partition
    if linv.partition is not part:
        raise ValueError("factor and triangular matrix use different partitions")
    order = part.block_order
    out: dict[tuple[int, ...], np.ndarray] = {}
    for i, u in enumerate(order):
        acc = B.blocks[u.path] @ linv.blocks[(i, i)].T
        for k in part.block_descendants[i]:
            v = order[k]
            lo = v.start - u.start
            acc[lo:lo + v.size] += B.blocks[v.path] @ linv.blocks[(i, k)].T
        out[u.path] = acc
    return BlockFactor(part, out)


# ---------------------------------------------------------------------------
# Structure predicates (block-sparsity guarantees as runtime checks)
# ---------------------------------------------------------------------------


def factor_mask(partition: MultiResPartition) -> np.ndarray:
    """Boolean structural support of the block factor."""
    mask = np.zeros((partition.n_points, partition.n_columns), dtype=bool)
    for reg, (c0, c1) in zip(partition.block_order, partition.column_spans):
        mask[reg.start:reg.stop, c0:c1] = True
    return mask


def gram_mask(partition: MultiResPartition) -> np.ndarray:
    """Boolean structural support of Lambda (symmetric envelope)."""
    spans = partition.column_spans
    mask = np.zeros((partition.n_columns, partition.n_columns), dtype=bool)
    for j in range(len(partition.block_order)):
        r0, r1 = spans[j]
        mask[r0:r1, r0:r1] = True
        for i in partition.block_ancestors[j]:
            c0, c1 = spans[i]
            mask[c0:c1, r0:r1] = True
            mask[r0:r1, c0:c1] = True
    return mask


def lower_mask(partition: MultiResPartition) -> np.ndarray:
    """Boolean structural support of L and L^{-1}."""
    return np.tril(gram_mask(partition))


@dataclass
class StructureReport:
    """Outcome of a structural audit: one flag per checked clause."""

    kind: str
    ok: bool
    clauses: dict[str, bool] = field(default_factory=dict)
    first_violation: tuple[int, int] | None = None

    def __str__(self):
        lines = [f"structure check ({self.kind}): {'pass' if self.ok else 'FAIL'}"]
        for name, good in self.clauses.items():
            lines.append(f"  {name}: {'pass' if good else 'FAIL'}")
        if self.first_violation is not None:
            lines.append(f"  first violation at {self.first_violation}")
        return "\n".join(lines)


def _first_outside(dense: np.ndarray, mask: np.ndarray):
    bad = np.nonzero((dense != 0) & ~mask)
    if bad[0].size == 0:
        return None
    return int(bad[0][0]), int(bad[1][0])


def structure_check(obj, partition: MultiResPartition,
                    kind: str | None = None) -> StructureReport:
    """Audit an object against the partition's structural guarantees.

    Accepts BlockFactor / BlockGram / BlockTriangular (densified internally)
    or a plain ndarray with an explicit ``kind`` in {"factor", "gram",
    "lower"}.  Reports per-clause booleans and the first out-of-envelope
    coordinate if any.
    """
    if isinstance(obj, BlockFactor):
        dense, kind = obj.to_dense(), "factor"
    elif isinstance(obj, BlockGram):
        dense, kind = obj.to_dense(), "gram"
    elif isinstance(obj, BlockTriangular):
        dense, kind = obj.to_dense(), "lower"
    else:
        dense = np.asarray(obj)
        if kind not in ("factor", "gram", "lower"):
            raise ValueError("plain arrays need kind in {'factor','gram','lower'}")

    clauses: dict[str, bool] = {}
    violation = None
    if kind == "factor":
        mask = factor_mask(partition)
        clauses["shape"] = dense.shape == mask.shape
        violation = _first_outside(dense, mask) if clauses["shape"] else None
        clauses["row_support_in_path_blocks"] = violation is None
        if clauses["shape"]:
            n_path = partition.path_column_count()
            clauses["row_nnz_at_most_N"] = bool(
                np.max(np.count_nonzero(mask, axis=1)) <= n_path
            )
    elif kind == "gram":
        mask = gram_mask(partition)
        clauses["shape"] = dense.shape == mask.shape
        clauses["symmetric"] = clauses["shape"] and bool(
            np.allclose(dense, dense.T, atol=1e-12)
        )
        violation = _first_outside(dense, mask) if clauses["shape"] else None
        clauses["envelope"] = violation is None
    else:
        mask = lower_mask(partition)
        clauses["shape"] = dense.shape == mask.shape
        violation = _first_outside(dense, mask) if clauses["shape"] else None
        clauses["envelope"] = violation is None
        if clauses["shape"]:
            col_nnz = np.count_nonzero(mask, axis=0)
            bound = partition.path_column_count()
            clauses["column_nnz_at_most_N"] = bool(np.max(col_nnz) <= bound)

    ok = all(clauses.values())
    return StructureReport(kind=kind, ok=ok, clauses=clauses,
                           first_violation=violation)


def export_pattern_csv(obj, path) -> None:
    """Write structural nonzero coordinates as (row, col) CSV for plotting."""
    if isinstance(obj, (BlockFactor, BlockGram, BlockTriangular)):
        dense = obj.to_dense()
    else:
        dense = np.asarray(obj)
    rows, cols = np.nonzero(dense)
    with open(path, "w") as fh:
        fh.write("row,col\n")
        for i, j in zip(rows, cols):
            fh.write(f"{i},{j}\n")
