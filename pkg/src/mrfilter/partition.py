"""Recursive spatial partitions for multi-resolution covariance factorization.

A partition splits the domain into nested subregions (equal-area rectangles on
the unit square, equal arcs on the unit circle), assigns every grid point to a
leaf, and reindexes the grid so that each subregion at every resolution owns a
contiguous, lexicographically ordered block of indices.  Knot subsets are drawn
per region with a region-keyed RNG so the draw for one region never depends on
the order in which its siblings were built.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse


class PartitionError(ValueError):
    """Raised when a partition cannot be built as requested."""


# ---------------------------------------------------------------------------
# Grids
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class GridSpec:
    """A finite set of grid points carrying the spatial geometry.

    Args:
        points: (n, 2) coordinates.  Circle grids store the embedded 2-D
            coordinates; distances are always chordal/Euclidean.
        kind: "square" for points in the unit square, "circle" for points on
            the unit circle.
        angles: (n,) angles in [0, 2*pi) for circle grids, None otherwise.
        shape: (n1, n2) for regular square grids built by ``unit_square_grid``
            (used by dynamics that need the lattice layout), else None.
    """

    points: np.ndarray
    kind: str = "square"
    angles: np.ndarray | None = None
    shape: tuple[int, int] | None = None

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=float)
        if pts.ndim != 2 or pts.shape[1] != 2:
            raise PartitionError(f"points must be (n, 2), got {pts.shape}")
        if pts.shape[0] < 1:
            raise PartitionError("grid needs at least one point")
        if not np.all(np.isfinite(pts)):
            raise PartitionError("grid coordinates must be finite")
        if len(np.unique(pts, axis=0)) != pts.shape[0]:
            raise PartitionError("grid points must be distinct")
        if self.kind not in ("square", "circle"):
            raise PartitionError(f"unknown grid kind {self.kind!r}")
        if self.kind == "circle" and self.angles is None:
            raise PartitionError("circle grids must carry angles")
        object.__setattr__(self, "points", pts)

    @property
    def n_points(self) -> int:
        return self.points.shape[0]


def unit_square_grid(n1: int, n2: int | None = None) -> GridSpec:
    """Regular interior grid on the unit square.

    Coordinates are (i/(n1+1), j/(n2+1)) for i=1..n1, j=1..n2, flattened
    row-major (index = (i-1)*n2 + (j-1)).
    """
    if n2 is None:
        n2 = n1
    xs = np.arange(1, n1 + 1) / (n1 + 1)
    ys = np.arange(1, n2 + 1) / (n2 + 1)
    pts = np.column_stack(
        [np.repeat(xs, n2), np.tile(ys, n1)]
    )
    return GridSpec(points=pts, kind="square", shape=(n1, n2))


def unit_circle_grid(n: int) -> GridSpec:
    """n equally spaced points on the unit circle, ordered by angle."""
    angles = 2.0 * np.pi * np.arange(n) / n
    pts = np.column_stack([np.cos(angles), np.sin(angles)])
    return GridSpec(points=pts, kind="circle", angles=angles)


# ---------------------------------------------------------------------------
# Regions and the partition tree
# ---------------------------------------------------------------------------


@dataclass
class Region:
    """One node of the partition tree, in ordered-index space.

    The index set is the contiguous range [start, stop); contiguity is a
    consequence of the lexicographic reindexing.  ``knots`` are ordered
    indices, sorted ascending, disjoint from every ancestor's knots.
    """

    path: tuple[int, ...]
    level: int
    start: int
    stop: int
    r: int
    r_prime: int
    knots: np.ndarray = field(default_factory=lambda: np.empty(0, dtype=np.int64))
    children: tuple["Region", ...] = ()

    @property
    def size(self) -> int:
        return self.stop - self.start

    @property
    def is_leaf(self) -> bool:
        return not self.children

    @property
    def indices(self) -> np.ndarray:
        return np.arange(self.start, self.stop, dtype=np.int64)

    def __repr__(self):
        return (
            f"Region(path={self.path}, |I|={self.size}, "
            f"r={self.r}, r'={self.r_prime})"
        )


class MultiResPartition:
    """The full recursive partition: region tree, permutation, column layout.

    Immutable after construction; safe to share across threads and reuse for
    every time step of a filter run.
    """

    def __init__(self, grid: GridSpec, M: int, J: tuple[int, ...],
                 root: Region, new_to_old: np.ndarray):
        self.grid = grid
        self.M = M
        self.J = J
        self.root = root
        self.new_to_old = new_to_old
        self.old_to_new = np.argsort(new_to_old)
        #: grid points reindexed into ordered space
        self.points = grid.points[new_to_old]

        self._by_path: dict[tuple[int, ...], Region] = {}
        stack = [root]
        while stack:
            reg = stack.pop()
            self._by_path[reg.path] = reg
            stack.extend(reg.children)

        # Column layout of the block factor: finest resolution first, regions
        # within a resolution in ascending lexicographic path order.
        order = sorted(self._by_path.values(), key=lambda g: (-g.level, g.path))
        self.block_order: tuple[Region, ...] = tuple(order)
        self.block_index: dict[tuple[int, ...], int] = {
            reg.path: i for i, reg in enumerate(order)
        }
        spans = []
        c = 0
        for reg in order:
            spans.append((c, c + reg.r_prime))
            c += reg.r_prime
        self.column_spans: tuple[tuple[int, int], ...] = tuple(spans)
        self.n_columns = c

        # Ancestry in block-index terms.  Two column blocks interact iff one
        # region is an ancestor-or-self of the other; descendants precede
        # ancestors in the block order.
        def is_prefix(a, b):
            return len(a) <= len(b) and b[: len(a)] == a

        nb = len(order)
        self.block_descendants: tuple[tuple[int, ...], ...] = tuple(
            tuple(k for k in range(j) if is_prefix(order[j].path, order[k].path))
            for j in range(nb)
        )
        self.block_ancestors: tuple[tuple[int, ...], ...] = tuple(
            tuple(i for i in range(j + 1, nb) if is_prefix(order[i].path, order[j].path))
            for j in range(nb)
        )

    @property
    def n_points(self) -> int:
        return self.grid.n_points

    def region(self, path: tuple[int, ...]) -> Region:
        return self._by_path[path]

    def regions(self) -> list[Region]:
        """All regions, coarse to fine, lexicographic within a level."""
        return sorted(self._by_path.values(), key=lambda g: (g.level, g.path))

    def regions_at_level(self, m: int) -> list[Region]:
        return [g for g in self.regions() if g.level == m]

    def leaves(self) -> list[Region]:
        return [g for g in self.regions() if g.is_leaf]

    def ancestors(self, path: tuple[int, ...]) -> list[Region]:
        """Strict ancestors of ``path``, root first."""
        return [self._by_path[path[:k]] for k in range(len(path))]

    def path_column_count(self) -> int:
        """Nonzeros per finest-region row: sum of r' along a root-to-leaf path."""
        leaf = self.leaves()[0]
        return sum(reg.r_prime for reg in self.ancestors(leaf.path)) + leaf.r_prime


# ---------------------------------------------------------------------------
# Construction
# ---------------------------------------------------------------------------


def _per_level(value, length: int, name: str) -> tuple[int, ...]:
    if np.isscalar(value):
        return (int(value),) * length
    out = tuple(int(v) for v in value)
    if len(out) != length:
        raise PartitionError(f"{name} must have length {length}, got {len(out)}")
    return out


def _split_square(points: np.ndarray, idx: np.ndarray, box, axis: int, J: int):
    """Split a rectangle into J equal-width strips along ``axis``.

    Points landing exactly on an interior edge go to the lower-indexed child.
    """
    lo, hi = box[axis]
    edges = np.linspace(lo, hi, J + 1)
    coords = points[idx, axis]
    which = np.searchsorted(edges[1:-1], coords, side="left")
    groups, boxes = [], []
    for k in range(J):
        groups.append(idx[which == k])
        child_box = [list(b) for b in box]
        child_box[axis] = [edges[k], edges[k + 1]]
        boxes.append(child_box)
    return groups, boxes


def _split_arc(angles: np.ndarray, idx: np.ndarray, arc, J: int):
    """Split an arc into J equal half-open sub-arcs [lo, hi).

    A point whose angle equals an interior edge starts the next arc, so an
    evenly spaced circle grid splits into exactly equal groups.
    """
    lo, hi = arc
    edges = np.linspace(lo, hi, J + 1)
    which = np.searchsorted(edges[1:-1], angles[idx], side="right")
    groups = [idx[which == k] for k in range(J)]
    arcs = [(edges[k], edges[k + 1]) for k in range(J)]
    return groups, arcs


def _knot_rng(seed: int, path: tuple[int, ...]) -> np.random.Generator:
    # Region-keyed stream: draws do not depend on sibling processing order.
    return np.random.default_rng(
        np.random.SeedSequence(entropy=seed, spawn_key=(len(path),) + path)
    )


def build_partition(grid: GridSpec, M: int, J, r, r_prime,
                    seed: int = 0) -> MultiResPartition:
    """Build the recursive partition with knots and the ordering permutation.

    Args:
        grid: the grid to partition.
        M: maximum resolution (>= 0).  M=0 keeps the whole domain as one region.
        J: branching factor per level (int or length-M sequence, each >= 2).
        r: knots per region per level (int or length-(M+1) sequence).
        r_prime: projected rank per region per level (int or length-(M+1)
            sequence, 1 <= r' <= r).
        seed: RNG seed for the knot draws.

    Raises:
        PartitionError: empty leaf, or a region whose candidate pool
            (index set minus ancestor knots) is smaller than its r.
    """
    if M < 0:
        raise PartitionError("M must be >= 0")
    J = _per_level(J, M, "J")
    r = _per_level(r, M + 1, "r")
    r_prime = _per_level(r_prime, M + 1, "r_prime")
    for m, Jm in enumerate(J):
        if Jm < 2:
            raise PartitionError(f"J[{m}] must be >= 2, got {Jm}")
    for m in range(M + 1):
        if not (1 <= r_prime[m] <= r[m]):
            raise PartitionError(
                f"need 1 <= r'[{m}] <= r[{m}], got r'={r_prime[m]}, r={r[m]}"
            )

    n = grid.n_points
    all_idx = np.arange(n, dtype=np.int64)

    # Recursive geometric split of original indices; leaves collected in
    # lexicographic path order so concatenation yields the permutation.
    leaf_chunks: list[np.ndarray] = []
    # tree skeleton as (path, level, child list) filled bottom-up
    skeleton: dict[tuple[int, ...], list[tuple[int, ...]]] = {}

    def descend(path, level, idx, geom):
        if level == M:
            if idx.size == 0:
                raise PartitionError(f"empty leaf at region path {path}")
            skeleton[path] = []
            leaf_chunks.append(idx)
            return
        if grid.kind == "square":
            groups, child_geoms = _split_square(
                grid.points, idx, geom, axis=level % 2, J=J[level]
            )
        else:
            groups, child_geoms = _split_arc(grid.angles, idx, geom, J=J[level])
        children = []
        for k, (g_idx, g_geom) in enumerate(zip(groups, child_geoms)):
            child = path + (k + 1,)
            children.append(child)
            descend(child, level + 1, g_idx, g_geom)
        skeleton[path] = children

    if grid.kind == "square":
        root_geom = [[0.0, 1.0], [0.0, 1.0]]
    else:
        root_geom = (0.0, 2.0 * np.pi)
    descend((), 0, all_idx, root_geom)

    new_to_old = np.concatenate(leaf_chunks)

    # Build the ordered-space region tree; spans are contiguous by
    # construction since leaves were emitted in lexicographic order.
    leaf_sizes = [c.size for c in leaf_chunks]
    leaf_bounds = np.concatenate([[0], np.cumsum(leaf_sizes)])
    leaf_iter = iter(range(len(leaf_chunks)))

    def build_region(path, level):
        if not skeleton[path]:
            k = next(leaf_iter)
            return Region(path=path, level=level,
                          start=int(leaf_bounds[k]), stop=int(leaf_bounds[k + 1]),
                          r=r[level], r_prime=r_prime[level])
        kids = tuple(build_region(c, level + 1) for c in skeleton[path])
        return Region(path=path, level=level,
                      start=kids[0].start, stop=kids[-1].stop,
                      r=r[level], r_prime=r_prime[level],
                      children=kids)

    root = build_region((), 0)

    # Knots, top-down, excluding indices already chosen on the path above.
    def draw_knots(reg: Region, taken: np.ndarray):
        pool = np.setdiff1d(reg.indices, taken, assume_unique=False)
        if pool.size < reg.r:
            raise PartitionError(
                f"region {reg.path}: only {pool.size} knot candidates "
                f"(|I|={reg.size}) but r={reg.r}"
            )
        rng = _knot_rng(seed, reg.path)
        reg.knots = np.sort(rng.choice(pool, size=reg.r, replace=False))
        taken_below = np.concatenate([taken, reg.knots])
        for child in reg.children:
            draw_knots(child, taken_below)

    draw_knots(root, np.empty(0, dtype=np.int64))

    return MultiResPartition(grid=grid, M=M, J=J, root=root, new_to_old=new_to_old)


# ---------------------------------------------------------------------------
# Permutation application and exports
# ---------------------------------------------------------------------------


def apply_permutation(partition: MultiResPartition, obj, inverse: bool = False):
    """Reindex a vector or matrix between grid order and partition order.

    Forward maps grid-order data into ordered-index space; ``inverse=True``
    maps back.  1-D arrays are reindexed directly; 2-D arrays have every axis
    of size n reindexed (both axes for square matrices).  Sparse matrices are
    supported.
    """
    n = partition.n_points
    perm = partition.old_to_new if inverse else partition.new_to_old
    if scipy.sparse.issparse(obj):
        if obj.shape[0] != n or obj.shape[1] != n:
            raise PartitionError(f"sparse operand must be {n}x{n}, got {obj.shape}")
        return obj.tocsr()[perm][:, perm]
    arr = np.asarray(obj)
    if arr.ndim == 1:
        if arr.shape[0] != n:
            raise PartitionError(f"vector length {arr.shape[0]} != n={n}")
        return arr[perm]
    if arr.ndim == 2:
        out = arr
        hit = False
        if arr.shape[0] == n:
            out = out[perm, :]
            hit = True
        if arr.shape[1] == n:
            out = out[:, perm]
            hit = True
        if not hit:
            raise PartitionError(f"no axis of shape {arr.shape} matches n={n}")
        return out
    raise PartitionError("only 1-D or 2-D operands can be permuted")


def partition_summary(partition: MultiResPartition) -> str:
    """Human-readable table of regions: path, |I|, r, r'."""
    lines = [f"{'path':<18}{'|I|':>8}{'r':>6}{'r_prime':>9}"]
    for reg in partition.regions():
        label = "root" if not reg.path else ".".join(map(str, reg.path))
        lines.append(f"{label:<18}{reg.size:>8}{reg.r:>6}{reg.r_prime:>9}")
    lines.append(f"n = {partition.n_points}, columns N' = {partition.n_columns}")
    return "\n".join(lines)


def export_permutation_csv(partition: MultiResPartition, path) -> None:
    """Write the grid-index permutation as (old_index, new_index) rows."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["old_index", "new_index"])
        for old, new in enumerate(partition.old_to_new):
            writer.writerow([old, int(new)])
