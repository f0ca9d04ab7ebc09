"""Mesh geometry: pairwise distances and distance-threshold pruning masks.

A mesh is an ordered list of m points in 3-space.  The order is meaningful:
point i owns positions i, m+i and 2m+i (the x, y and z blocks) of the
flattened length-3m coordinate vector used everywhere downstream.

The pruning mask keeps the weight position (i, j) exactly when the two
undeformed mesh points are within a threshold distance alpha of each other
(boundary inclusive).  Masks are stored row-compressed: per-row sorted
column lists, which is what the masked mat-vec kernels consume.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "Mesh",
    "DistanceMatrix",
    "PruneMask",
    "pairwise_distances",
    "build_mask",
    "mask_count",
    "reference_mesh",
    "point_distances",
    "flatten_points",
    "unflatten_coords",
    "load_mesh_csv",
    "save_mesh_csv",
    "export_mask_csv",
]


@dataclass(frozen=True)
class Mesh:
    """Ordered set of 3D points (the undeformed geometry).

    points: float64 array of shape (m, 3).  Every coordinate must be finite;
    construction rejects the first offending point by index.
    """

    points: np.ndarray

    def __post_init__(self):
        pts = np.ascontiguousarray(np.asarray(self.points, dtype=np.float64))
        if pts.ndim != 2 or pts.shape[1] != 3:
            raise ValueError(f"mesh points must have shape (m, 3), got {pts.shape}")
        if pts.shape[0] < 1:
            raise ValueError("mesh needs at least one point")
        bad = np.flatnonzero(~np.isfinite(pts).all(axis=1))
        if bad.size:
            raise ValueError(f"non-finite coordinate at point index {int(bad[0])}")
        object.__setattr__(self, "points", pts)

    @property
    def m(self) -> int:
        return self.points.shape[0]

    @property
    def d(self) -> int:
        return 3 * self.m

    def flatten(self) -> np.ndarray:
        """Length-3m vector: x block, then y block, then z block."""
        return flatten_points(self.points)


def flatten_points(points: np.ndarray) -> np.ndarray:
    """(m, 3) points -> (3m,) block vector [x..., y..., z...]."""
    points = np.asarray(points, dtype=np.float64)
    return points.T.reshape(-1).copy()


def unflatten_coords(coords: np.ndarray, m: int) -> np.ndarray:
    """(3m,) block vector back to (m, 3) points."""
    coords = np.asarray(coords, dtype=np.float64)
    if coords.shape != (3 * m,):
        raise ValueError(f"expected a flat vector of length {3 * m}, got shape {coords.shape}")
    return coords.reshape(3, m).T.copy()


@dataclass(frozen=True)
class DistanceMatrix:
    """Dense m x m Euclidean distance matrix of a mesh.

    Exactly symmetric with a zero diagonal: entry (i, j) and entry (j, i)
    are computed from the same coordinate differences, so no tolerance is
    needed anywhere downstream.
    """

    entries: np.ndarray

    @property
    def m(self) -> int:
        return self.entries.shape[0]

    def diameter(self) -> float:
        return float(self.entries.max())


def pairwise_distances(mesh: Mesh) -> DistanceMatrix:
    """All-pairs Euclidean distances of the (undeformed) mesh points.

    Computed once per mesh and materialized densely; masks are sparse
    thereafter.  The subtraction (p_i - p_j) is the exact negation of
    (p_j - p_i), so the result is bit-symmetric.
    """
    pts = mesh.points
    diff = pts[:, None, :] - pts[None, :, :]
    d2 = np.einsum("ijk,ijk->ij", diff, diff)
    return DistanceMatrix(np.sqrt(d2))


@dataclass
class PruneMask:
    """Binary keep-mask over m x m weight positions, stored row-compressed.

    indptr[i]:indptr[i+1] delimits row i's sorted column indices inside
    ``indices``.  The mask is symmetric as a set of index pairs and always
    contains the full diagonal (a point is at distance zero from itself).
    """

    m: int
    alpha: float
    indptr: np.ndarray
    indices: np.ndarray
    _tables: dict = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        self.indptr = np.asarray(self.indptr, dtype=np.int64)
        self.indices = np.asarray(self.indices, dtype=np.int64)
        if self.indptr.shape != (self.m + 1,):
            raise ValueError("indptr must have length m + 1")
        if self.indptr[0] != 0 or self.indptr[-1] != self.indices.shape[0]:
            raise ValueError("indptr does not delimit the indices array")

    @property
    def nnz(self) -> int:
        return int(self.indices.shape[0])

    def row_degrees(self) -> np.ndarray:
        return np.diff(self.indptr)

    def to_dense(self) -> np.ndarray:
        """Dense 0/1 matrix; intended for diagnostics and test oracles."""
        dense = np.zeros((self.m, self.m))
        dense[self.entry_rows(), self.indices] = 1.0
        return dense

    def entry_rows(self) -> np.ndarray:
        """Row index of every stored entry, aligned with ``indices``."""
        return np.repeat(np.arange(self.m, dtype=np.int64), self.row_degrees())

    def matvec_tables(self) -> dict:
        """Index tables for fast masked mat-vec, built once per mask.

        Returns a dict with:
          rows        (nnz,)          row id of each entry (CSR order)
          transpose   (nnz,)          permutation mapping CSR entry order to
                                      column-major order; because the pattern
                                      is symmetric, the transposed structure
                                      reuses indptr/indices unchanged
          neighbors   (m, max_deg)    per-row padded neighbor columns, pad = m
          entry_pad   (m, max_deg)    per-row padded entry ids, pad = nnz
        """
        if self._tables is None:
            rows = self.entry_rows()
            transpose = np.lexsort((rows, self.indices))
            deg = self.row_degrees()
            max_deg = int(deg.max()) if self.m else 0
            neighbors = np.full((self.m, max_deg), self.m, dtype=np.int64)
            entry_pad = np.full((self.m, max_deg), self.nnz, dtype=np.int64)
            span = np.arange(max_deg)
            within = span[None, :] < deg[:, None]
            flat_pos = (self.indptr[:-1, None] + span[None, :])[within]
            neighbors[within] = self.indices[flat_pos]
            entry_pad[within] = flat_pos
            self._tables = {
                "rows": rows,
                "transpose": transpose,
                "neighbors": neighbors,
                "entry_pad": entry_pad,
            }
        return self._tables


def build_mask(dist: DistanceMatrix, alpha: float) -> PruneMask:
    """Keep positions whose mesh-point distance is <= alpha (inclusive).

    Equality keeps the connection, so alpha = 0 keeps exactly the diagonal
    and alpha >= diameter keeps everything.
    """
    if not np.isfinite(alpha) or alpha < 0:
        raise ValueError(f"alpha must be a nonnegative real, got {alpha}")
    keep = dist.entries <= alpha
    rows, cols = np.nonzero(keep)
    indptr = np.zeros(dist.m + 1, dtype=np.int64)
    np.cumsum(np.bincount(rows, minlength=dist.m), out=indptr[1:])
    return PruneMask(m=dist.m, alpha=float(alpha), indptr=indptr, indices=cols.astype(np.int64))


def mask_count(mask: PruneMask) -> int:
    """Number of surviving weight positions; m <= count <= m**2."""
    return mask.nnz


def reference_mesh(coords: np.ndarray) -> Mesh:
    """Per-point mean of a stack of flattened meshes, as a Mesh.

    coords: (n_samples, 3m) array, one flattened mesh per row.  Used with
    the good-class samples to build the reference geometry that distances
    are measured against.
    """
    coords = np.asarray(coords, dtype=np.float64)
    if coords.ndim == 1:
        coords = coords[None, :]
    if coords.shape[0] < 1:
        raise ValueError("reference mesh needs at least one sample")
    if coords.shape[1] % 3 != 0:
        raise ValueError(f"flattened mesh length must be divisible by 3, got {coords.shape[1]}")
    m = coords.shape[1] // 3
    return Mesh(unflatten_coords(coords.mean(axis=0), m))


def point_distances(coords: np.ndarray, reference: Mesh) -> np.ndarray:
    """Per-point Euclidean distance between a flattened mesh and a reference.

    Index-matched: point i of ``coords`` is compared with point i of the
    reference, never with its nearest neighbor.
    """
    coords = np.asarray(coords, dtype=np.float64)
    if coords.shape != (reference.d,):
        raise ValueError(
            f"coordinate vector has length {coords.shape}, reference expects ({reference.d},)"
        )
    delta = unflatten_coords(coords, reference.m) - reference.points
    return np.sqrt(np.einsum("ij,ij->i", delta, delta))


def save_mesh_csv(mesh: Mesh, path) -> None:
    """Write a mesh as CSV with header x,y,z; row order = point index."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["x", "y", "z"])
        for p in mesh.points:
            writer.writerow([repr(float(v)) for v in p])


def load_mesh_csv(path) -> Mesh:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or [h.strip() for h in header] != ["x", "y", "z"]:
            raise ValueError(f"{path}: expected header x,y,z")
        pts = [[float(v) for v in row] for row in reader if row]
    if not pts:
        raise ValueError(f"{path}: no points")
    return Mesh(np.asarray(pts))


def export_mask_csv(mask: PruneMask, path) -> None:
    """Write the nonzero (i, j) pairs, sorted lexicographically."""
    rows = mask.entry_rows()
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["i", "j"])
        for i, j in zip(rows, mask.indices):
            writer.writerow([int(i), int(j)])
