"""Uniform Cartesian grids with masked solid cells.

All fields live on fluid cell centers and are stored as flat arrays in
row-major (j, i) order over fluid cells only.  Vector fields stack the x
block on top of the y block, giving length ``2 * grid.n``.  The quadrature
weight of every fluid cell is its area ``dx * dy``; weighted inner products
of flat fields are plain dot products against those weights.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

__all__ = [
    "EDGES",
    "BC_KINDS",
    "BoundaryCondition",
    "Grid",
    "weighted_dot",
    "weighted_norm",
]

EDGES = ("left", "right", "bottom", "top")
BC_KINDS = ("periodic", "wall", "inlet", "outlet")


@dataclass(frozen=True)
class BoundaryCondition:
    """One edge of the domain.

    kind is one of "periodic", "wall" (no slip), "inlet" (fixed velocity,
    which also covers a moving lid), or "outlet" (zero gradient).  Only
    inlet edges carry a nonzero velocity.
    """

    kind: str
    velocity: tuple[float, float] = (0.0, 0.0)

    def __post_init__(self):
        if self.kind not in BC_KINDS:
            raise ValueError(f"unknown boundary kind {self.kind!r}")
        if self.kind != "inlet" and any(c != 0.0 for c in self.velocity):
            raise ValueError(f"{self.kind} edge cannot carry a velocity")


class Grid:
    """nx-by-ny uniform cell grid on [0, lx] x [0, ly].

    Parameters
    ----------
    nx, ny : int
        Cell counts along x and y; at least 4 each.
    lx, ly : float
        Domain extents.
    boundary : dict
        Maps every edge name in EDGES to a BoundaryCondition.  Periodic
        edges must come in opposing pairs.
    mask : ndarray of bool, shape (ny, nx), optional
        True marks fluid cells.  Solid cells may not touch a periodic
        edge, so the solid set stays closed under the periodic wrap.
    """

    def __init__(self, nx, ny, lx, ly, boundary, mask=None):
        nx, ny = int(nx), int(ny)
        if nx < 4 or ny < 4:
            raise ValueError("grid needs at least 4 cells per direction")
        if lx <= 0 or ly <= 0:
            raise ValueError("domain extents must be positive")
        if set(boundary) != set(EDGES):
            raise ValueError(f"boundary must define exactly the edges {EDGES}")
        for edge, bc in boundary.items():
            if not isinstance(bc, BoundaryCondition):
                raise TypeError(f"boundary[{edge!r}] is not a BoundaryCondition")
        if (boundary["left"].kind == "periodic") != (boundary["right"].kind == "periodic"):
            raise ValueError("periodic edges must pair left with right")
        if (boundary["bottom"].kind == "periodic") != (boundary["top"].kind == "periodic"):
            raise ValueError("periodic edges must pair bottom with top")

        self.nx, self.ny = nx, ny
        self.lx, self.ly = float(lx), float(ly)
        self.dx = self.lx / nx
        self.dy = self.ly / ny
        self.boundary = dict(boundary)

        if mask is None:
            mask = np.ones((ny, nx), dtype=bool)
        mask = np.asarray(mask, dtype=bool)
        if mask.shape != (ny, nx):
            raise ValueError(f"mask shape {mask.shape} != {(ny, nx)}")
        if not mask.any():
            raise ValueError("grid has no fluid cells")
        if self.periodic_x and ((~mask[:, 0]).any() or (~mask[:, -1]).any()):
            raise ValueError("solid cells may not touch a periodic edge")
        if self.periodic_y and ((~mask[0, :]).any() or (~mask[-1, :]).any()):
            raise ValueError("solid cells may not touch a periodic edge")
        self.mask = mask

        # flat index of each fluid cell, -1 in solid cells
        self.index = np.full((ny, nx), -1, dtype=np.int64)
        jj, ii = np.nonzero(mask)
        self.index[jj, ii] = np.arange(jj.size)
        self.cell_j = jj
        self.cell_i = ii
        self.n = int(jj.size)

        self.xc = (ii + 0.5) * self.dx
        self.yc = (jj + 0.5) * self.dy
        self.weights = np.full(self.n, self.dx * self.dy)

    # -- boundary queries ------------------------------------------------

    @property
    def periodic_x(self):
        return self.boundary["left"].kind == "periodic"

    @property
    def periodic_y(self):
        return self.boundary["bottom"].kind == "periodic"

    @property
    def vector_weights(self):
        """Weights for stacked vector fields (length 2n)."""
        return np.tile(self.weights, 2)

    def inlet_edges(self):
        """Edge names carrying fixed nonzero velocity data, in EDGES order."""
        return tuple(e for e in EDGES if self.boundary[e].kind == "inlet")

    # -- field packing ---------------------------------------------------

    def full(self, flat, fill=0.0):
        """Scatter a flat scalar field to a (ny, nx) array."""
        flat = np.asarray(flat)
        out = np.full((self.ny, self.nx), fill, dtype=flat.dtype)
        out[self.mask] = flat
        return out

    def flat(self, full):
        """Gather a (ny, nx) array to a flat scalar field."""
        return np.asarray(full)[self.mask].copy()

    def vec_full(self, vec, fill=0.0):
        """Split a stacked vector field into (ny, nx) component arrays."""
        vec = np.asarray(vec)
        return self.full(vec[: self.n], fill), self.full(vec[self.n :], fill)

    def vec_flat(self, ufull, vfull):
        """Stack (ny, nx) component arrays into a flat vector field."""
        return np.concatenate([self.flat(ufull), self.flat(vfull)])

    def magnitude(self, vec):
        """Pointwise magnitude of a stacked vector field (length n)."""
        vec = np.asarray(vec)
        return np.hypot(vec[: self.n], vec[self.n :])

    # -- neighbor lookup (used by the stencil builder) --------------------

    def fluid_at(self, j, i):
        """Fluid flat index at logical cell (j, i) with periodic wrap, or -1."""
        if self.periodic_x:
            i %= self.nx
        if self.periodic_y:
            j %= self.ny
        if i < 0 or i >= self.nx or j < 0 or j >= self.ny:
            return -1
        return int(self.index[j, i])

    # -- persistence helpers ----------------------------------------------

    def to_meta(self):
        """JSON-ready description (mask stored separately as a matrix)."""
        return {
            "nx": self.nx,
            "ny": self.ny,
            "lx": self.lx,
            "ly": self.ly,
            "boundary": {
                e: {"kind": bc.kind, "velocity": list(bc.velocity)}
                for e, bc in self.boundary.items()
            },
        }

    @classmethod
    def from_meta(cls, meta, mask=None):
        boundary = {
            e: BoundaryCondition(d["kind"], tuple(d["velocity"]))
            for e, d in meta["boundary"].items()
        }
        return cls(meta["nx"], meta["ny"], meta["lx"], meta["ly"], boundary, mask=mask)


def weighted_dot(weights, f, g):
    """Weighted l2 inner product; vector fields tile the weights."""
    f = np.asarray(f)
    if f.shape[0] == 2 * weights.shape[0]:
        weights = np.tile(weights, 2)
    return float(np.dot(weights * f, g))


def weighted_norm(weights, f):
    return np.sqrt(max(weighted_dot(weights, f, f), 0.0))
