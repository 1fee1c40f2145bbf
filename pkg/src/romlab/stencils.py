"""Cell-centered finite-difference derivative operators.

One convention, used everywhere a mode or snapshot field is
differentiated (supremizer sources, Galerkin operator assembly, boundary
curls).  For a fluid cell and a direction with spacing h:

first derivative
    * both neighbors fluid (periodic wrap counts): central,
      (f[+1] - f[-1]) / (2h)
    * one side blocked, two cells ahead on the open side: one-sided
      second order, (-3 f[0] + 4 f[+1] - f[+2]) / (2h) (mirrored with
      flipped sign on the minus side)
    * one side blocked, one cell ahead: one-sided first order
    * both sides blocked: 0

second derivative
    * both neighbors fluid: central, (f[+1] - 2 f[0] + f[-1]) / h^2
    * one side blocked, three cells ahead: one-sided second order,
      (2 f[0] - 5 f[+1] + 4 f[+2] - f[+3]) / h^2 (mirror symmetric)
    * one side blocked, two cells ahead: one-sided first order,
      (f[0] - 2 f[+1] + f[+2]) / h^2
    * fewer: 0

"Blocked" means a solid cell or a non-periodic domain edge.  Matrices act
on flat scalar fields (length grid.n).
"""

from __future__ import annotations

import numpy as np
import scipy.sparse as sp

__all__ = ["diff_matrix", "grad_matrices", "cached_diff"]


def _build(grid, axis, order):
    dj, di = (0, 1) if axis == "x" else (1, 0)
    h = grid.dx if axis == "x" else grid.dy

    rows, cols, vals = [], [], []

    def neighbors(j, i, side, count):
        """Flat indices of `count` cells walking `side` steps from (j, i),
        or None if any is blocked."""
        out = []
        for step in range(1, count + 1):
            k = grid.fluid_at(j + side * step * dj, i + side * step * di)
            if k < 0:
                return None
            out.append(k)
        return out

    def put(row, idx_coeffs):
        for k, c in idx_coeffs:
            rows.append(row)
            cols.append(k)
            vals.append(c)

    for row in range(grid.n):
        j = int(grid.cell_j[row])
        i = int(grid.cell_i[row])
        plus1 = neighbors(j, i, +1, 1)
        minus1 = neighbors(j, i, -1, 1)

        if order == 1:
            if plus1 and minus1:
                put(row, [(plus1[0], 1 / (2 * h)), (minus1[0], -1 / (2 * h))])
            elif plus1:
                p2 = neighbors(j, i, +1, 2)
                if p2:
                    put(row, [(row, -3 / (2 * h)), (p2[0], 4 / (2 * h)), (p2[1], -1 / (2 * h))])
                else:
                    put(row, [(plus1[0], 1 / h), (row, -1 / h)])
            elif minus1:
                m2 = neighbors(j, i, -1, 2)
                if m2:
                    put(row, [(row, 3 / (2 * h)), (m2[0], -4 / (2 * h)), (m2[1], 1 / (2 * h))])
                else:
                    put(row, [(row, 1 / h), (minus1[0], -1 / h)])
        else:
            if plus1 and minus1:
                put(row, [(plus1[0], 1 / h**2), (row, -2 / h**2), (minus1[0], 1 / h**2)])
            elif plus1:
                p3 = neighbors(j, i, +1, 3)
                if p3:
                    put(row, [(row, 2 / h**2), (p3[0], -5 / h**2), (p3[1], 4 / h**2), (p3[2], -1 / h**2)])
                else:
                    p2 = neighbors(j, i, +1, 2)
                    if p2:
                        put(row, [(row, 1 / h**2), (p2[0], -2 / h**2), (p2[1], 1 / h**2)])
            elif minus1:
                m3 = neighbors(j, i, -1, 3)
                if m3:
                    put(row, [(row, 2 / h**2), (m3[0], -5 / h**2), (m3[1], 4 / h**2), (m3[2], -1 / h**2)])
                else:
                    m2 = neighbors(j, i, -1, 2)
                    if m2:
                        put(row, [(row, 1 / h**2), (m2[0], -2 / h**2), (m2[1], 1 / h**2)])

    return sp.csr_matrix(
        (np.array(vals), (np.array(rows, dtype=int), np.array(cols, dtype=int))),
        shape=(grid.n, grid.n),
    )


def diff_matrix(grid, axis, order=1):
    """Sparse derivative matrix along "x" or "y"; order 1 or 2."""
    if axis not in ("x", "y"):
        raise ValueError("axis must be 'x' or 'y'")
    if order not in (1, 2):
        raise ValueError("order must be 1 or 2")
    return _build(grid, axis, order)


def cached_diff(grid, axis, order=1):
    """diff_matrix with per-grid memoization."""
    cache = getattr(grid, "_diff_cache", None)
    if cache is None:
        cache = {}
        grid._diff_cache = cache
    key = (axis, order)
    if key not in cache:
        cache[key] = diff_matrix(grid, axis, order)
    return cache[key]


def grad_matrices(grid):
    """(d/dx, d/dy) first-derivative pair."""
    return cached_diff(grid, "x", 1), cached_diff(grid, "y", 1)
