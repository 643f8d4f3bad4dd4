"""Exact k-nearest-neighbour search over a uniform spatial hash grid.

The grid (cell size 2 lattice units, ring expansion) is an accelerator only:
results are exact squared Euclidean distances, with ties broken by
lexicographic coordinate order.  Brute force is the test oracle.
"""

from __future__ import annotations

import numpy as np

from .errors import ContractViolation
from .sparse import SparseTensor

CELL = 2.0
_SMALL = 64  # below this many occupied cells a direct scan is cheaper


class GridIndex:
    """Uniform-grid spatial hash over integer reference coordinates."""

    def __init__(self, coords: np.ndarray):
        coords = np.asarray(coords, dtype=np.int64).reshape(-1, 3)
        if coords.shape[0] == 0:
            raise ContractViolation("reference point set is empty")
        self.coords = coords.astype(np.float64)
        cells = coords >> 1
        self._cell_lo = cells.min(axis=0)
        self._cell_hi = cells.max(axis=0)
        order = np.lexsort((cells[:, 2], cells[:, 1], cells[:, 0]))
        sorted_cells = cells[order]
        change = np.empty(len(order), dtype=bool)
        change[0] = True
        np.not_equal(sorted_cells[1:], sorted_cells[:-1]).any(axis=1, out=change[1:])
        starts = np.flatnonzero(change)
        ends = np.append(starts[1:], len(order))
        self._cells = {}
        for s, e in zip(starts, ends):
            self._cells[tuple(sorted_cells[s])] = order[s:e]

    def query(self, point, k: int):
        """Indices and squared distances of the min(k, N) nearest points.

        Results are ordered by (distance, index); since the reference is
        lex-sorted, index order equals lexicographic coordinate order.
        """
        q = np.asarray(point, dtype=np.float64)
        if len(self._cells) <= _SMALL:
            return self._take_best(np.arange(self.coords.shape[0]), q, k)
        c0 = np.floor(q / CELL).astype(np.int64)
        lo, hi = self._cell_lo, self._cell_hi
        # rings below the Chebyshev distance to the occupied bounding box are
        # empty; rings beyond its far corner cover nothing new
        r_start = int(max(0, np.maximum(lo - c0, c0 - hi).max()))
        r_end = int(np.maximum(hi - c0, c0 - lo).max())
        cand: list[np.ndarray] = []
        total = 0
        for r in range(r_start, r_end + 1):
            for cell in _ring_cells(c0, r, lo, hi):
                idx = self._cells.get(cell)
                if idx is not None:
                    cand.append(idx)
                    total += idx.size
            if total >= k:
                allc = np.concatenate(cand)
                d2 = ((self.coords[allc] - q) ** 2).sum(axis=1)
                kth = np.partition(d2, k - 1)[k - 1]
                # any point in ring r+1 or beyond lies strictly farther than
                # CELL*r from the query
                if kth <= (CELL * r) ** 2:
                    break
        allc = np.concatenate(cand) if cand else np.empty(0, dtype=np.int64)
        return self._take_best(allc, q, k)

    def _take_best(self, indices, q, k):
        d2 = ((self.coords[indices] - q) ** 2).sum(axis=1)
        m = min(k, indices.size)
        take = np.lexsort((indices, d2))[:m]
        return indices[take], d2[take]


def _ring_cells(c0, r, lo, hi):
    """Cells at Chebyshev distance exactly r from c0, clipped to [lo, hi]."""
    x0, y0, z0 = int(c0[0]), int(c0[1]), int(c0[2])

    def clip(axis, a, b):
        return range(max(a, int(lo[axis] - c0[axis])), min(b, int(hi[axis] - c0[axis])) + 1)

    if r == 0:
        if all(lo[i] <= c0[i] <= hi[i] for i in range(3)):
            yield (x0, y0, z0)
        return
    for dx in (-r, r):
        if lo[0] - x0 <= dx <= hi[0] - x0:
            for dy in clip(1, -r, r):
                for dz in clip(2, -r, r):
                    yield (x0 + dx, y0 + dy, z0 + dz)
    for dy in (-r, r):
        if lo[1] - y0 <= dy <= hi[1] - y0:
            for dx in clip(0, -r + 1, r - 1):
                for dz in clip(2, -r, r):
                    yield (x0 + dx, y0 + dy, z0 + dz)
    for dz in (-r, r):
        if lo[2] - z0 <= dz <= hi[2] - z0:
            for dx in clip(0, -r + 1, r - 1):
                for dy in clip(1, -r + 1, r - 1):
                    yield (x0 + dx, y0 + dy, z0 + dz)


def knn(queries, reference, k: int):
    """k nearest reference points for each query position.

    Args:
        queries: (Q, 3) real positions.
        reference: SparseTensor or (N, 3) integer coordinate array, lex-sorted.
        k: neighbours requested; clamped to N.

    Returns:
        (indices, sqdist) arrays of shape (Q, min(k, N)).
    """
    if k < 1:
        raise ContractViolation("k must be >= 1")
    coords = reference.coords if isinstance(reference, SparseTensor) else reference
    index = GridIndex(coords)
    q = np.atleast_2d(np.asarray(queries, dtype=np.float64))
    m = min(k, coords.shape[0])
    idx = np.empty((q.shape[0], m), dtype=np.int64)
    d2 = np.empty((q.shape[0], m), dtype=np.float64)
    for i in range(q.shape[0]):
        ii, dd = index.query(q[i], k)
        idx[i], d2[i] = ii, dd
    return idx, d2
