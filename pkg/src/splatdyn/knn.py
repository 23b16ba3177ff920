"""Exact k-nearest-neighbour queries on a uniform spatial hash grid."""
from __future__ import annotations

import numpy as np


class SpatialHashGrid:
    """Bins points into cubic cells of side ``extent / cells_per_axis``.

    Queries grow a cube of cells around the query's cell until the k-th
    candidate distance is provably no larger than any point outside the cube.
    Results are ordered by (distance, point index), so equal distances always
    resolve to the lower index.
    """

    def __init__(self, points, cells_per_axis=32, cell_size=None):
        self.points = np.ascontiguousarray(points, dtype=np.float64).reshape(-1, 3)
        if len(self.points) == 0:
            raise ValueError("cannot index an empty point set")
        self.lo = self.points.min(axis=0)
        extent = float(np.max(self.points.max(axis=0) - self.lo))
        if cell_size is None:
            cell_size = extent / cells_per_axis if extent > 0 else 1.0
        self.h = float(cell_size)
        cells = self._cell_of(self.points)
        self.dims = cells.max(axis=0) + 1
        keys = self._key(cells)
        self.order = np.argsort(keys, kind="stable")
        n_cells = int(np.prod(self.dims))
        self.counts = np.bincount(keys, minlength=n_cells)
        self.starts = np.concatenate([[0], np.cumsum(self.counts)[:-1]])

    def _cell_of(self, pts):
        return np.floor((pts - self.lo) / self.h).astype(np.int64)

    def _key(self, cells):
        d = self.dims
        return (cells[:, 0] * d[1] + cells[:, 1]) * d[2] + cells[:, 2]

    def _block(self, cell, r):
        lo = np.maximum(cell - r, 0)
        hi = np.minimum(cell + r, self.dims - 1)
        if np.any(hi < lo):
            return np.zeros(0, dtype=np.int64), False
        gx, gy, gz = np.meshgrid(*(np.arange(a, b + 1) for a, b in zip(lo, hi)), indexing="ij")
        keys = self._key(np.stack([gx.ravel(), gy.ravel(), gz.ravel()], axis=1))
        counts = self.counts[keys]
        starts = self.starts[keys]
        total = int(counts.sum())
        offs = np.repeat(starts - np.concatenate([[0], np.cumsum(counts)[:-1]]), counts)
        members = self.order[offs + np.arange(total)]
        covers_all = bool(np.all(cell - r <= 0) and np.all(cell + r >= self.dims - 1))
        return np.sort(members), covers_all

    def query(self, queries, k):
        """Return (indices, distances), each (Q, k'), where k' = min(k, n_points)."""
        q = np.asarray(queries, dtype=np.float64).reshape(-1, 3)
        k = int(min(k, len(self.points)))
        if k < 1:
            raise ValueError("k must be >= 1")
        out_idx = np.empty((len(q), k), dtype=np.int64)
        out_d2 = np.empty((len(q), k))
        qcells = self._cell_of(q)
        ukeys, inverse = np.unique(qcells, axis=0, return_inverse=True)
        inverse = inverse.reshape(-1)
        group_order = np.argsort(inverse, kind="stable")
        bounds = np.searchsorted(inverse[group_order], np.arange(len(ukeys) + 1))
        r_prev = 1
        for g, cell in enumerate(ukeys):
            members = group_order[bounds[g]:bounds[g + 1]]
            qp = q[members]
            r = max(1, r_prev - 1)
            while True:
                cand, covers_all = self._block(cell, r)
                if len(cand) >= k:
                    diff = qp[:, None, :] - self.points[cand][None, :, :]
                    d2 = np.einsum("qcd,qcd->qc", diff, diff)
                    sel = np.argsort(d2, axis=1, kind="stable")[:, :k]
                    kth = np.take_along_axis(d2, sel[:, -1:], axis=1)
                    if covers_all or np.all(kth < (r * self.h) ** 2):
                        out_idx[members] = cand[sel]
                        out_d2[members] = np.take_along_axis(d2, sel, axis=1)
                        r_prev = r
                        break
                r += 1
        return out_idx, np.sqrt(out_d2)

