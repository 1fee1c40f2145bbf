"""Proper orthogonal decomposition and supremizer enrichment.

All decompositions are taken in the quadrature-weighted l2 inner product
(cell-area weights).  Modes are computed from the singular value
decomposition of the sqrt-weight-scaled snapshot matrix, which is the
snapshot-Gram eigenproblem in exact arithmetic but keeps the returned
modes orthonormal to machine precision; eigenvalues are the squared
singular values, in descending order.  No mean subtraction anywhere.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.linalg

from .fom import poisson_solve
from .stencils import grad_matrices

__all__ = [
    "PodBasis",
    "EnrichedBasis",
    "compute_pod",
    "supremizer_snapshots",
    "enrich_with_supremizers",
    "snapshot_coefficients",
    "eigen_decay_report",
]

RANK_TOL = 1e-12


@dataclass
class PodBasis:
    """Weighted-orthonormal modes: modes.T @ diag(weights) @ modes = I.

    eigenvalues has one entry per retained mode; total_energy is the sum
    of the full spectrum of the snapshot Gram matrix (equals the total
    weighted snapshot energy).
    """

    modes: np.ndarray       # (dof, k)
    eigenvalues: np.ndarray  # (k,)
    weights: np.ndarray      # (dof,)
    total_energy: float

    @property
    def n_modes(self):
        return self.modes.shape[1]

    @property
    def dof(self):
        return self.modes.shape[0]

    def project(self, fields):
        """Coefficients of the weighted l2 projection.

        fields may be one flat field (dof,) or a dof-by-M matrix; the
        result is (k,) or (k, M).
        """
        fields = np.asarray(fields)
        scaled = self.weights * fields if fields.ndim == 1 else self.weights[:, None] * fields
        return self.modes.T @ scaled

    def reconstruct(self, coeffs):
        return self.modes @ coeffs

    def gram(self):
        return self.modes.T @ (self.weights[:, None] * self.modes)

    def leading(self, k):
        """Sub-basis of the first k modes (shares total_energy)."""
        if not 1 <= k <= self.n_modes:
            raise ValueError(f"need 1 <= k <= {self.n_modes}, got {k}")
        return PodBasis(
            self.modes[:, :k], self.eigenvalues[:k], self.weights, self.total_energy
        )


def compute_pod(snapshots, weights, n_modes=None, rank_tol=RANK_TOL):
    """POD of a dof-by-M snapshot matrix under the given weights.

    n_modes defaults to the numerical rank (eigenvalues at least
    rank_tol times the largest); asking for more raises ValueError.
    """
    S = np.asarray(snapshots, dtype=float)
    w = np.asarray(weights, dtype=float)
    if S.ndim != 2:
        raise ValueError("snapshots must be a dof-by-M matrix")
    if w.shape != (S.shape[0],):
        raise ValueError("weights must match the snapshot dof count")
    if not np.all(np.isfinite(S)):
        raise ValueError("snapshots contain non-finite values")
    if not np.all(w > 0):
        raise ValueError("weights must be positive")

    sw = np.sqrt(w)
    U, s, _ = scipy.linalg.svd(sw[:, None] * S, full_matrices=False)
    eigenvalues = s**2
    total_energy = float(eigenvalues.sum())
    if total_energy == 0.0:
        raise ValueError("snapshot matrix is identically zero")
    rank = int(np.count_nonzero(eigenvalues >= rank_tol * eigenvalues[0]))
    if n_modes is None:
        n_modes = rank
    if not 1 <= n_modes <= rank:
        raise ValueError(
            f"n_modes={n_modes} outside the admissible range 1..{rank} "
            f"(eigenvalue cutoff {rank_tol:g} relative)"
        )
    modes = U[:, :n_modes] / sw[:, None]
    # deterministic sign: largest-magnitude entry of each mode is positive
    pick = np.argmax(np.abs(modes), axis=0)
    signs = np.sign(modes[pick, np.arange(n_modes)])
    signs[signs == 0] = 1.0
    modes = modes * signs
    return PodBasis(modes, eigenvalues[:n_modes].copy(), w.copy(), total_energy)


def supremizer_snapshots(pressure_matrix, grid, rtol=1e-10):
    """Pressure-gradient lifting fields, one per pressure snapshot.

    Each column p yields the vector field s with lap(s) = -grad(p) and
    s = 0 on every boundary, solved componentwise on the grid.  Returns
    the stacked (2n, M) matrix.
    """
    P = np.asarray(pressure_matrix, dtype=float)
    if P.ndim != 2 or P.shape[0] != grid.n:
        raise ValueError(f"pressure matrix must be ({grid.n}, M)")
    dx, dy = grad_matrices(grid)
    out = np.empty((2 * grid.n, P.shape[1]))
    for m in range(P.shape[1]):
        gx = dx @ P[:, m]
        gy = dy @ P[:, m]
        out[: grid.n, m] = poisson_solve(grid, -gx, bc="dirichlet", rtol=rtol)
        out[grid.n :, m] = poisson_solve(grid, -gy, bc="dirichlet", rtol=rtol)
    return out


@dataclass
class EnrichedBasis:
    """Velocity basis [pod block | supremizer block].

    Each block is separately weighted-orthonormal; the blocks are not
    orthogonal to each other, so projection solves the Gram system and
    reduced models carry the full mass matrix.
    """

    modes: np.ndarray
    weights: np.ndarray
    n_pod: int
    n_sup: int

    @property
    def n_modes(self):
        return self.n_pod + self.n_sup

    @property
    def dof(self):
        return self.modes.shape[0]

    def gram(self):
        return self.modes.T @ (self.weights[:, None] * self.modes)

    def project(self, fields):
        """Weighted least-squares coefficients onto the enriched span."""
        fields = np.asarray(fields)
        scaled = self.weights * fields if fields.ndim == 1 else self.weights[:, None] * fields
        return np.linalg.solve(self.gram(), self.modes.T @ scaled)

    def reconstruct(self, coeffs):
        return self.modes @ coeffs

    def pod_part(self):
        return self.modes[:, : self.n_pod]


def enrich_with_supremizers(velocity_basis, supremizer_basis):
    """Concatenate velocity and supremizer mode blocks."""
    if velocity_basis.dof != supremizer_basis.dof:
        raise ValueError("bases live on different dof counts")
    if not np.allclose(velocity_basis.weights, supremizer_basis.weights):
        raise ValueError("bases use different weights")
    modes = np.hstack([velocity_basis.modes, supremizer_basis.modes])
    return EnrichedBasis(
        modes=modes,
        weights=velocity_basis.weights.copy(),
        n_pod=velocity_basis.n_modes,
        n_sup=supremizer_basis.n_modes,
    )


def snapshot_coefficients(basis, matrix):
    """Per-snapshot projection coefficients, rows = snapshots (M, k)."""
    return np.asarray(basis.project(matrix)).T.copy()


def eigen_decay_report(basis, band=(0.9, 0.999)):
    """Cumulative retained-energy fractions and the marginal band.

    Fraction at k is sum(eigenvalues[:k]) / total_energy.  The marginal
    band lists the 1-based mode counts whose fraction falls inside
    [band[0], band[1]] -- the regime where a basis resolves most but not
    almost all of the snapshot energy.
    """
    lam = np.asarray(basis.eigenvalues, dtype=float)
    frac = np.cumsum(lam) / basis.total_energy
    lo, hi = band
    marginal = [k + 1 for k in range(lam.size) if lo <= frac[k] <= hi]
    return {
        "eigenvalues": lam.copy(),
        "cumulative_fraction": frac,
        "band": (float(lo), float(hi)),
        "marginal_modes": marginal,
    }
