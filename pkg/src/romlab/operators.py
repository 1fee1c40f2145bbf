"""Reduced-operator assembly by Galerkin projection of the strong form.

Volume terms are assembled exactly as written (no integration by parts):
derivatives of basis fields are taken with the finite-difference
matrices from :mod:`romlab.stencils` and inner products use the cell
quadrature weights.  Boundary terms use the midpoint rule on boundary
faces with the adjacent cell-center value, so a boundary integral over
edge k is a sum over that edge's fluid cells weighted by the face
length.

Velocity bases may carry supremizer columns; assembly treats every
column uniformly, and the data-rank blocks used by the correction
series are built against physical (non-supremizer) modes only.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .closure import DataRankOperators
from .grid import Grid
from .pod import EnrichedBasis, PodBasis
from .stencils import cached_diff

__all__ = [
    "ReducedOperators",
    "assemble_sup_operators",
    "assemble_ppe_operators",
    "assemble_data_rank",
]


@dataclass
class ReducedOperators:
    """Coefficient-space operators for one reduced formulation.

    Velocity blocks have r = n_u + n_sup rows/columns (supremizers only
    in the constrained formulation); pressure blocks have q.  Poisson
    blocks (D, G, N, L) are None for the constrained formulation.

    Momentum: M a' = nu (B + B_T) a - C:(a,a) - H b
              + tau_pen * sum_k (u_bc_k * D_k - E_k a)   over inlet edges.
    Continuity: P a = 0.      Poisson: D b + G:(a,a) - nu N a - L = 0.
    """

    formulation: str            # "SUP" or "PPE"
    nu: float
    tau_pen: float
    n_u: int
    n_sup: int
    q: int
    M: np.ndarray               # (r, r)
    B: np.ndarray               # (r, r)
    B_T: np.ndarray             # (r, r)
    C: np.ndarray               # (r, r, r)
    H: np.ndarray               # (r, q)
    P: np.ndarray               # (q, r)
    penalty_edges: list = field(default_factory=list)  # [(edge, u_bc, E_k, D_k)]
    D: Optional[np.ndarray] = None       # (q, q)
    G: Optional[np.ndarray] = None       # (q, r, r)
    N: Optional[np.ndarray] = None       # (q, r)
    L: Optional[np.ndarray] = None       # (q,)

    @property
    def r(self):
        return self.n_u + self.n_sup

    def penalty_matrix(self):
        """tau_pen * sum of boundary mass matrices over inlet edges."""
        E = np.zeros((self.r, self.r))
        for _, _, E_k, _ in self.penalty_edges:
            E += E_k
        return self.tau_pen * E

    def penalty_vector(self):
        """tau_pen * sum of u_bc-weighted boundary direction vectors."""
        d = np.zeros(self.r)
        for _, u_bc, _, D_k in self.penalty_edges:
            d += u_bc * D_k
        return self.tau_pen * d


class _Assembler:
    """Derivative fields and contractions shared by all operator blocks."""

    def __init__(self, grid: Grid):
        self.grid = grid
        self.w = grid.weights
        self.w2 = grid.vector_weights
        self.Dx = cached_diff(grid, "x", 1)
        self.Dy = cached_diff(grid, "y", 1)
        self.Dxx = cached_diff(grid, "x", 2)
        self.Dyy = cached_diff(grid, "y", 2)

    def split(self, Phi):
        n = self.grid.n
        return Phi[:n], Phi[n:]

    def mass(self, PhiA, PhiB):
        return PhiA.T @ (self.w2[:, None] * PhiB)

    def laplacian_fields(self, Phi):
        X, Y = self.split(Phi)
        L = self.Dxx + self.Dyy
        return np.vstack([L @ X, L @ Y])

    def graddiv_fields(self, Phi):
        div = self.divergence_fields(Phi)
        return np.vstack([self.Dx @ div, self.Dy @ div])

    def divergence_fields(self, Phi):
        X, Y = self.split(Phi)
        return self.Dx @ X + self.Dy @ Y

    def gradient_fields(self, Chi):
        return np.vstack([self.Dx @ Chi, self.Dy @ Chi])

    def convection_tensor(self, Test, PhiJ, PhiK):
        """T[i, j, k] = (test_i, div(phi_j outer phi_k))_w.

        Component m of the convected field is
        d/dx((phi_j)_m (phi_k)_x) + d/dy((phi_j)_m (phi_k)_y).
        Test may be any stack of vector fields (velocity modes or
        pressure-gradient fields).
        """
        Jx, Jy = self.split(PhiJ)
        Kx, Ky = self.split(PhiK)
        WT = (self.w2[:, None] * Test).T  # (a, 2n)
        a, b, c = Test.shape[1], PhiJ.shape[1], PhiK.shape[1]
        out = np.empty((a, b, c))
        for k in range(c):
            kx = Kx[:, k][:, None]
            ky = Ky[:, k][:, None]
            comp_x = self.Dx @ (Jx * kx) + self.Dy @ (Jx * ky)
            comp_y = self.Dx @ (Jy * kx) + self.Dy @ (Jy * ky)
            out[:, :, k] = WT @ np.vstack([comp_x, comp_y])
        return out

    # -- boundary machinery

    def edge_cells(self, edge):
        """Flat indices of fluid cells adjacent to a domain edge, plus
        the face length and outward normal."""
        g = self.grid
        if edge == "left":
            sel, face, normal = g.index[:, 0], g.dy, (-1.0, 0.0)
        elif edge == "right":
            sel, face, normal = g.index[:, -1], g.dy, (1.0, 0.0)
        elif edge == "bottom":
            sel, face, normal = g.index[0, :], g.dx, (0.0, -1.0)
        elif edge == "top":
            sel, face, normal = g.index[-1, :], g.dx, (0.0, 1.0)
        else:
            raise ValueError(f"unknown edge {edge!r}")
        return sel[sel >= 0], face, normal

    def boundary_mass(self, Phi, edge):
        """E[i, j] = sum over edge faces of face * (phi_i . phi_j)."""
        idx, face, _ = self.edge_cells(edge)
        X, Y = self.split(Phi)
        Xe, Ye = X[idx], Y[idx]
        return face * (Xe.T @ Xe + Ye.T @ Ye)

    def boundary_direction(self, Phi, edge, direction):
        """D[i] = sum over edge faces of face * (phi_i . e_hat)."""
        idx, face, _ = self.edge_cells(edge)
        X, Y = self.split(Phi)
        ex, ey = direction
        return face * (X[idx].T @ np.full(idx.size, ex) + Y[idx].T @ np.full(idx.size, ey))

    def boundary_curl_form(self, Chi, Phi):
        """N[i, j] = sum over outer non-periodic edges of
        face * (n x grad chi_i) * (curl phi_j), with the 2D scalars
        n x g = n_x g_y - n_y g_x and curl phi = d(phi_y)/dx - d(phi_x)/dy
        taken at the boundary-adjacent cell centers."""
        g = self.grid
        GX = self.Dx @ Chi
        GY = self.Dy @ Chi
        X, Y = self.split(Phi)
        curl = self.Dx @ Y - self.Dy @ X
        N = np.zeros((Chi.shape[1], Phi.shape[1]))
        for edge in ("left", "right", "bottom", "top"):
            if g.boundary[edge].kind == "periodic":
                continue
            idx, face, (nx, ny) = self.edge_cells(edge)
            ncross = nx * GY[idx] - ny * GX[idx]
            N += face * (ncross.T @ curl[idx])
        return N


def _penalty_blocks(asm, Phi, grid):
    blocks = []
    for edge in grid.inlet_edges():
        bc = grid.boundary[edge]
        vx, vy = bc.velocity
        speed = float(np.hypot(vx, vy))
        direction = (vx / speed, vy / speed) if speed > 0 else (0.0, 0.0)
        E_k = asm.boundary_mass(Phi, edge)
        D_k = asm.boundary_direction(Phi, edge, direction)
        blocks.append((edge, speed, E_k, D_k))
    return blocks


def _velocity_blocks(asm, Phi):
    M = asm.mass(Phi, Phi)
    B = asm.mass(Phi, asm.laplacian_fields(Phi))
    B_T = asm.mass(Phi, asm.graddiv_fields(Phi))
    C = asm.convection_tensor(Phi, Phi, Phi)
    return M, B, B_T, C


def _coupling_blocks(asm, Phi, Chi):
    GradChi = asm.gradient_fields(Chi)
    H = asm.mass(Phi, GradChi)
    P = Chi.T @ (asm.w[:, None] * asm.divergence_fields(Phi))
    return H, P, GradChi


def _check_bases(vel_dof, chi: PodBasis, grid: Grid):
    if vel_dof != 2 * grid.n:
        raise ValueError("velocity basis does not match the grid")
    if chi.dof != grid.n:
        raise ValueError("pressure basis does not match the grid")


def assemble_sup_operators(enriched: EnrichedBasis, chi: PodBasis, grid: Grid,
                           nu, tau_pen=1000.0):
    """Operators for the constrained (supremizer-enriched) formulation."""
    _check_bases(enriched.dof, chi, grid)
    asm = _Assembler(grid)
    Phi = enriched.modes
    M, B, B_T, C = _velocity_blocks(asm, Phi)
    H, P, _ = _coupling_blocks(asm, Phi, chi.modes)
    return ReducedOperators(
        formulation="SUP", nu=float(nu), tau_pen=float(tau_pen),
        n_u=enriched.n_pod, n_sup=enriched.n_sup, q=chi.n_modes,
        M=M, B=B, B_T=B_T, C=C, H=H, P=P,
        penalty_edges=_penalty_blocks(asm, Phi, grid),
    )


def assemble_ppe_operators(vel: PodBasis, chi: PodBasis, grid: Grid,
                           nu, tau_pen=1000.0):
    """Operators for the pressure-Poisson formulation (no supremizers)."""
    _check_bases(vel.dof, chi, grid)
    asm = _Assembler(grid)
    Phi = vel.modes
    Chi = chi.modes
    M, B, B_T, C = _velocity_blocks(asm, Phi)
    H, P, GradChi = _coupling_blocks(asm, Phi, Chi)
    D = GradChi.T @ (asm.w2[:, None] * GradChi)
    G = asm.convection_tensor(GradChi, Phi, Phi)
    N = asm.boundary_curl_form(Chi, Phi)
    L = np.zeros(Chi.shape[1])  # steady inlet data: the lift term vanishes
    return ReducedOperators(
        formulation="PPE", nu=float(nu), tau_pen=float(tau_pen),
        n_u=vel.n_modes, n_sup=0, q=chi.n_modes,
        M=M, B=B, B_T=B_T, C=C, H=H, P=P,
        penalty_edges=_penalty_blocks(asm, Phi, grid),
        D=D, G=G, N=N, L=L,
    )


def assemble_data_rank(vel_d: PodBasis, chi_dp: PodBasis, grid: Grid, r, q):
    """Rectangular blocks pairing r (q) working test modes with the
    d (d_p) data-rank trial bases.

    The working velocity modes are the leading r physical columns of
    vel_d; supremizers never enter the correction series.  Leading
    blocks therefore coincide with the physical sub-blocks of the
    working-rank operators.
    """
    _check_bases(vel_d.dof, chi_dp, grid)
    d, d_p = vel_d.n_modes, chi_dp.n_modes
    if not 0 < r <= d:
        raise ValueError(f"need 0 < r <= d, got r={r}, d={d}")
    if not 0 < q <= d_p:
        raise ValueError(f"need 0 < q <= d_p, got q={q}, d_p={d_p}")
    asm = _Assembler(grid)
    Phi_d = vel_d.modes
    Phi_r = Phi_d[:, :r]
    Chi_dp = chi_dp.modes
    Chi_q = Chi_dp[:, :q]
    GradChi_dp = asm.gradient_fields(Chi_dp)
    GradChi_q = GradChi_dp[:, :q]

    C_d = asm.convection_tensor(Phi_r, Phi_d, Phi_d)
    H_d = asm.mass(Phi_r, GradChi_dp)
    P_d = Chi_q.T @ (asm.w[:, None] * asm.divergence_fields(Phi_d))
    D_d = GradChi_q.T @ (asm.w2[:, None] * GradChi_dp)
    G_d = asm.convection_tensor(GradChi_q, Phi_d, Phi_d)
    return DataRankOperators(r=r, q=q, d=d, d_p=d_p,
                             C_d=C_d, H_d=H_d, P_d=P_d, D_d=D_d, G_d=G_d)
