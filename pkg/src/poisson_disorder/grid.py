"""Uniform lattice on the belief simplex with piecewise-linear interpolation.

Nodes are the points whose coordinates are multiples of 1/resolution.  For
interpolation the simplex is mapped through partial sums
``s_j = y_1 + ... + y_j`` (y = resolution * coordinates), which turns it into
the order region ``0 <= s_1 <= ... <= s_n <= resolution``.  The standard
Kuhn/Freudenthal decomposition of the unit cubes restricts exactly to that
region, so sorting the fractional parts of ``s`` yields, for any query point,
the n+1 vertices of its containing cell and their barycentric weights.  The
scheme is linear within each cell, continuous across faces, exact on affine
functions of the coordinates, and never leaves the range of the node values.
"""

from __future__ import annotations

from functools import cached_property

import numpy as np

__all__ = ["SimplexGrid"]


def _enumerate_lattice(n_coords: int, total: int) -> np.ndarray:
    """All nonnegative integer vectors of length n_coords summing to total,
    in lexicographic order."""
    if n_coords == 1:
        return np.array([[total]], dtype=np.int64)
    rows = []
    for first in range(total + 1):
        tail = _enumerate_lattice(n_coords - 1, total - first)
        block = np.empty((tail.shape[0], n_coords), dtype=np.int64)
        block[:, 0] = first
        block[:, 1:] = tail
        rows.append(block)
    return np.vstack(rows)


class SimplexGrid:
    """Lattice of resolution subdivisions on the simplex with n+1 coordinates
    (n transient states plus the absorbed coordinate)."""

    def __init__(self, n: int, resolution: int) -> None:
        if n < 1:
            raise ValueError(f"need at least one transient state, got n={n}")
        if resolution < 1:
            raise ValueError(f"resolution must be >= 1, got {resolution}")
        self.n = n
        self.resolution = resolution
        self.lattice = _enumerate_lattice(n + 1, resolution)
        self.nodes = self.lattice.astype(float) / resolution

    @property
    def node_count(self) -> int:
        return self.lattice.shape[0]

    @cached_property
    def _radix(self) -> np.ndarray:
        base = self.resolution + 1
        return base ** np.arange(self.n + 1, dtype=np.int64)

    @cached_property
    def _sorted_keys(self) -> tuple[np.ndarray, np.ndarray]:
        keys = self.lattice @ self._radix
        order = np.argsort(keys)
        return keys[order], order

    def node_index(self, lattice_points: np.ndarray) -> np.ndarray:
        """Row indices of integer lattice points (must exist on the grid)."""
        keys = np.asarray(lattice_points, dtype=np.int64) @ self._radix
        sorted_keys, order = self._sorted_keys
        pos = np.searchsorted(sorted_keys, keys)
        if (pos >= sorted_keys.size).any() or (sorted_keys[np.minimum(pos, sorted_keys.size - 1)] != keys).any():
            raise KeyError("point off the lattice")
        return order[pos]

    def locate(self, points: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Containing cell of each query point (rows of simplex coordinates).

        Returns (vertex_rows, weights), both of shape (m, n+1): node row
        indices of the cell vertices and barycentric weights (nonnegative,
        summing to 1).  Points on shared faces get a deterministic cell via
        the tie-break that prefers incrementing later coordinates first.
        """
        pts = np.atleast_2d(np.asarray(points, dtype=float))
        m, n, res = pts.shape[0], self.n, self.resolution
        y = np.clip(pts, 0.0, None) * res
        # Partial-sum transform; cumulative sums of clipped coordinates are
        # nondecreasing, and capping at res keeps them so.
        s = np.clip(np.cumsum(y[:, :n], axis=1), 0.0, res)
        g = np.minimum(np.floor(s), res - 1).astype(np.int64)
        # Respect the order region inside each cube: when g_j == g_{j+1} the
        # fractions must stay ordered; clipping enforces it against round-off.
        frac = s - g
        same = np.concatenate([g[:, :-1] == g[:, 1:], np.zeros((m, 1), bool)], axis=1)
        for j in range(n - 2, -1, -1):
            frac[:, j] = np.where(same[:, j], np.minimum(frac[:, j], frac[:, j + 1]), frac[:, j])
        # Descending sort of fractions; ties broken toward the later axis so
        # the Kuhn vertices stay inside the order region.
        rev = frac[:, ::-1]
        order_rev = np.argsort(-rev, axis=1, kind="stable")
        axes = n - 1 - order_rev  # (m, n) axis index added at step k+1
        frac_sorted = np.take_along_axis(frac, axes, axis=1)
        # Barycentric weights: 1 - f_(1), f_(k) - f_(k+1), ..., f_(n).
        weights = np.empty((m, n + 1))
        weights[:, 0] = 1.0 - frac_sorted[:, 0]
        weights[:, 1:n] = frac_sorted[:, : n - 1] - frac_sorted[:, 1:]
        weights[:, n] = frac_sorted[:, n - 1]
        np.clip(weights, 0.0, None, out=weights)
        weights /= weights.sum(axis=1, keepdims=True)
        # Cumulative vertices in s-space (vertex k+1 adds axis axes[:, k]),
        # converted back to lattice points.
        verts_s = np.repeat(g[:, None, :], n + 1, axis=1)
        row_ids = np.arange(m)[:, None]
        for k in range(n):
            verts_s[row_ids, np.arange(k + 1, n + 1)[None, :], axes[:, k : k + 1]] += 1
        lattice_pts = np.empty((m, n + 1, n + 1), dtype=np.int64)
        lattice_pts[:, :, 0] = verts_s[:, :, 0]
        lattice_pts[:, :, 1:n] = verts_s[:, :, 1:] - verts_s[:, :, :-1]
        lattice_pts[:, :, n] = res - verts_s[:, :, n - 1]
        vertex_rows = self.node_index(lattice_pts.reshape(-1, n + 1)).reshape(m, n + 1)
        return vertex_rows, weights

    def interpolate(self, values: np.ndarray, points: np.ndarray) -> np.ndarray:
        """Piecewise-linear interpolation of node values at the query points."""
        rows, weights = self.locate(points)
        return (np.asarray(values)[rows] * weights).sum(axis=1)

    def interpolator(self, values: np.ndarray):
        """Callable (m, n+1) -> (m,) closing over a copy of the node values."""
        vals = np.array(values, dtype=float, copy=True)

        def evaluate(points: np.ndarray) -> np.ndarray:
            return self.interpolate(vals, points)

        return evaluate

    @cached_property
    def triangles(self) -> np.ndarray:
        """Cells of the interpolation triangulation as node-index triples
        (only defined for n == 2, where cells are triangles)."""
        if self.n != 2:
            raise NotImplementedError("cell enumeration provided for n == 2 only")
        res = self.resolution
        tris = []
        for g1 in range(res):
            for g2 in range(g1, res):
                upper = ((g1, g2), (g1, g2 + 1), (g1 + 1, g2 + 1))  # f1 <= f2
                cells = [upper]
                if g1 < g2:
                    cells.append(((g1, g2), (g1 + 1, g2), (g1 + 1, g2 + 1)))
                for cell in cells:
                    pts = [(w1, w2 - w1, res - w2) for (w1, w2) in cell]
                    tris.append(self.node_index(np.array(pts, dtype=np.int64)))
        return np.array(tris, dtype=np.int64)

    def refine_match(self, finer: "SimplexGrid") -> np.ndarray:
        """Rows in the finer grid corresponding to this grid's nodes
        (requires the finer resolution to be a multiple of this one)."""
        factor, rem = divmod(finer.resolution, self.resolution)
        if rem != 0:
            raise ValueError("finer resolution must be a multiple")
        return finer.node_index(self.lattice * factor)
