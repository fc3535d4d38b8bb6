"""Quadratic partition of unity on the unit lattice of R^3.

A point p is covered by the 8 corners of its containing unit cube; each
corner l gets a smooth radial bump beta(|p - l|) and the weights are
normalized so that sum_l alpha_l(p)^2 = 1 exactly. The cutoff radius is
below 1, so corners outside the containing cube never activate and the
per-point work is a fixed 8-corner gather no matter how many lattice cells
the data visits. Each corner also carries a parity index in 0..7 grouping
cells whose waves share a phase class.
"""

from dataclasses import dataclass

import numpy as np

C1_DEFAULT = 0.9
C2_DEFAULT = 0.95


@dataclass(frozen=True)
class PartitionOfUnity:
    c1: float = C1_DEFAULT
    c2: float = C2_DEFAULT

    def __post_init__(self):
        if not 0.0 < self.c1 < self.c2 < 1.0:
            raise ValueError("need 0 < c1 < c2 < 1")

    def bump(self, r):
        """Radial profile beta(r): C-infinity, positive for r < c2, zero after."""
        r = np.asarray(r, dtype=np.float64)
        r2 = r * r
        c1sq, c2sq = self.c1 * self.c1, self.c2 * self.c2
        inside = r2 < c2sq
        denom = np.where(inside, c2sq - r2, 1.0)
        return np.where(inside, np.exp(-(c2sq - c1sq) / denom), 0.0)

    def corner_alphas(self, p):
        """Weights at the 8 cube corners around each point.

        p: array of shape (3, ...). Returns (corners, alphas) with corners
        of integer shape (8, 3, ...) and alphas of shape (8, ...) satisfying
        sum_c alphas[c]^2 = 1 pointwise.
        """
        p = np.asarray(p, dtype=np.float64)
        if p.shape[0] != 3:
            raise ValueError("expected leading axis of length 3")
        base = np.floor(p).astype(np.int64)
        corners = np.empty((8,) + p.shape, dtype=np.int64)
        betas = np.empty((8,) + p.shape[1:])
        for c in range(8):
            off = np.array([(c >> d) & 1 for d in range(3)], dtype=np.int64)
            corner = base + off.reshape((3,) + (1,) * (p.ndim - 1))
            corners[c] = corner
            d2 = np.sum((p - corner) ** 2, axis=0)
            betas[c] = self.bump(np.sqrt(d2))
        norm = np.sqrt(np.sum(betas * betas, axis=0))
        if np.any(norm == 0.0):
            raise FloatingPointError("partition not covering: a point saw no corner")
        return corners, betas / norm

    def alpha(self, l, p):
        """Weight of lattice cell l (integer 3-vector) at points p (3, ...)."""
        corners, alphas = self.corner_alphas(p)
        l = np.asarray(l, dtype=np.int64).reshape((3,) + (1,) * (np.ndim(p) - 1))
        hit = np.all(corners == l, axis=1)
        return np.sum(np.where(hit, alphas, 0.0), axis=0)


def parity_index(l):
    """Class index in 0..7: bit d set when component l_d is even."""
    l = np.asarray(l, dtype=np.int64)
    even = (l % 2 == 0).astype(np.int64)
    return even[..., 0] + 2 * even[..., 1] + 4 * even[..., 2]


def active_cells(p, pou=None):
    """Sorted list of lattice cells with nonzero weight over the points p."""
    if pou is None:
        pou = PartitionOfUnity()
    corners, alphas = pou.corner_alphas(np.asarray(p, dtype=np.float64))
    live = alphas > 0.0
    cells = set()
    flat_c = corners.reshape(8, 3, -1)
    flat_a = live.reshape(8, -1)
    for c in range(8):
        idx = np.nonzero(flat_a[c])[0]
        for i in idx:
            cells.add(tuple(int(v) for v in flat_c[c, :, i]))
    return sorted(cells)
