"""Finite-difference incompressible flow solver for snapshot generation.

Chorin projection: explicit central-difference advection and diffusion
predictor, pressure Poisson solve by Jacobi-preconditioned conjugate
gradients, velocity correction.  Velocities are advanced on staggered cell
faces, where the discrete divergence of the corrected field equals the
Poisson residual identically, so the post-projection divergence bound is
inherited from the linear solver tolerance.  Snapshots are emitted on cell
centers (face averages, second order).

Scenarios: "taylor-green" (periodic, analytic decaying vortex),
"lid-cavity" (enclosed box with a moving lid), "channel-obstacle"
(inlet/outlet channel around a rectangular block).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np
import scipy.sparse as sp

from .grid import EDGES, BoundaryCondition, Grid, weighted_norm

__all__ = [
    "FomConfig",
    "SnapshotSet",
    "FlowSolver",
    "init_scenario",
    "run_fom",
    "poisson_solve",
    "taylor_green_fields",
]

SCENARIOS = ("taylor-green", "lid-cavity", "channel-obstacle")

PRESSURE_CG_TOL = 1e-10


@dataclass
class FomConfig:
    """Flow run description.

    inlet_speed doubles as the lid speed for "lid-cavity" and is ignored
    by "taylor-green".  obstacle is (i0, j0, w, h) in cell counts for
    "channel-obstacle"; None picks the scenario default.  Advective CFL
    at the configured velocity scale must not exceed 0.5 and the explicit
    diffusion limit nu*dt*(2/dx^2 + 2/dy^2) must not exceed 1.
    """

    scenario: str
    nx: int
    ny: int
    nu: float
    dt: float
    n_steps: int
    save_every: int = 1
    spinup_steps: int = 0
    inlet_speed: float = 1.0
    obstacle: Optional[tuple] = None
    lx: Optional[float] = None
    ly: Optional[float] = None

    def __post_init__(self):
        if self.scenario not in SCENARIOS:
            raise ValueError(f"unknown scenario {self.scenario!r}")
        if self.lx is None or self.ly is None:
            defaults = {
                "taylor-green": (2 * np.pi, 2 * np.pi),
                "lid-cavity": (1.0, 1.0),
                "channel-obstacle": (2.0, 1.0),
            }[self.scenario]
            self.lx = defaults[0] if self.lx is None else self.lx
            self.ly = defaults[1] if self.ly is None else self.ly
        if min(self.nx, self.ny) < 4:
            raise ValueError("need at least 4 cells per direction")
        if self.nu <= 0 or self.dt <= 0:
            raise ValueError("nu and dt must be positive")
        if self.n_steps < 0 or self.spinup_steps < 0 or self.save_every < 1:
            raise ValueError("step counts must be nonnegative, save_every >= 1")
        dx, dy = self.lx / self.nx, self.ly / self.ny
        scale = 1.0 if self.scenario == "taylor-green" else abs(self.inlet_speed)
        if scale * self.dt / min(dx, dy) > 0.5 + 1e-12:
            raise ValueError(
                f"advective CFL {scale * self.dt / min(dx, dy):.3f} exceeds 0.5"
            )
        if self.nu * self.dt * (2 / dx**2 + 2 / dy**2) > 1.0 + 1e-12:
            raise ValueError("explicit diffusion limit exceeded; reduce dt")

    def meta(self):
        d = {k: getattr(self, k) for k in (
            "scenario", "nx", "ny", "nu", "dt", "n_steps", "save_every",
            "spinup_steps", "inlet_speed", "lx", "ly")}
        d["obstacle"] = list(self.obstacle) if self.obstacle else None
        return d


@dataclass
class SnapshotSet:
    """Cell-centered snapshot history.

    velocity rows are stacked [u-block, v-block] flat fields (length
    2*grid.n); pressure rows are flat scalar fields.
    """

    grid: Grid
    times: np.ndarray
    velocity: np.ndarray  # (M, 2n)
    pressure: np.ndarray  # (M, n)
    meta: dict = field(default_factory=dict)

    @property
    def n_snapshots(self):
        return self.times.shape[0]

    def velocity_matrix(self):
        """dof-by-snapshot matrix (2n, M)."""
        return np.ascontiguousarray(self.velocity.T)

    def pressure_matrix(self):
        return np.ascontiguousarray(self.pressure.T)


# ---------------------------------------------------------------------------
# scenario construction


def _scenario_grid(config):
    bc = BoundaryCondition
    if config.scenario == "taylor-green":
        boundary = {e: bc("periodic") for e in EDGES}
        mask = None
    elif config.scenario == "lid-cavity":
        boundary = {
            "left": bc("wall"),
            "right": bc("wall"),
            "bottom": bc("wall"),
            "top": bc("inlet", (config.inlet_speed, 0.0)),
        }
        mask = None
    else:
        boundary = {
            "left": bc("inlet", (config.inlet_speed, 0.0)),
            "right": bc("outlet"),
            "bottom": bc("wall"),
            "top": bc("wall"),
        }
        mask = np.ones((config.ny, config.nx), dtype=bool)
        obs = config.obstacle
        if obs is None:
            # block of ny/4 cells a quarter of the way in, one cell below
            # the centerline so shedding starts without a seeded perturbation
            side = max(2, config.ny // 4)
            i0 = max(2, config.nx // 5)
            j0 = max(1, (config.ny - side) // 2 - 1)
            obs = (i0, j0, side, side)
        i0, j0, w, h = obs
        if i0 < 1 or j0 < 1 or i0 + w >= config.nx or j0 + h >= config.ny:
            raise ValueError("obstacle must leave at least one fluid cell on every side")
        mask[j0 : j0 + h, i0 : i0 + w] = False
    return Grid(config.nx, config.ny, config.lx, config.ly, boundary, mask=mask)


def taylor_green_fields(grid, nu, t):
    """Analytic decaying-vortex fields at cell centers: (velocity, pressure)."""
    x, y = grid.xc, grid.yc
    f = np.exp(-2.0 * nu * t)
    u = np.sin(x) * np.cos(y) * f
    v = -np.cos(x) * np.sin(y) * f
    p = 0.25 * (np.cos(2 * x) + np.cos(2 * y)) * f**2
    return np.concatenate([u, v]), p


def init_scenario(config):
    """Build the grid and initial cell-centered fields for a scenario.

    Returns (grid, velocity, pressure) with the same flat layout
    snapshots use.
    """
    grid = _scenario_grid(config)
    if config.scenario == "taylor-green":
        vel, p = taylor_green_fields(grid, config.nu, 0.0)
    elif config.scenario == "lid-cavity":
        vel = np.zeros(2 * grid.n)
        p = np.zeros(grid.n)
    else:
        vel = np.concatenate([np.full(grid.n, config.inlet_speed), np.zeros(grid.n)])
        p = np.zeros(grid.n)
    return grid, vel, p


# ---------------------------------------------------------------------------
# linear solver


def _pcg(A, b, x0, rtol, maxiter):
    """Jacobi-preconditioned CG.  Returns (x, iterations); raises if the
    relative residual target is not met."""
    bnorm = float(np.linalg.norm(b))
    if bnorm == 0.0:
        return np.zeros_like(b), 0
    diag = A.diagonal()
    minv = 1.0 / diag
    x = x0.copy()
    r = b - A @ x
    z = minv * r
    p = z.copy()
    rz = float(r @ z)
    it = 0
    while float(np.linalg.norm(r)) > rtol * bnorm:
        if it >= maxiter:
            raise RuntimeError(
                f"CG stalled: residual {np.linalg.norm(r) / bnorm:.2e} after {it} iterations"
            )
        Ap = A @ p
        alpha = rz / float(p @ Ap)
        x += alpha * p
        r -= alpha * Ap
        z = minv * r
        rz_new = float(r @ z)
        p = z + (rz_new / rz) * p
        rz = rz_new
        it += 1
    return x, it


def _laplacian_matrix(grid, mode, outlet_edges=()):
    """5-point Laplacian on fluid cells.

    mode "dirichlet": value zero on every non-periodic boundary face and
    solid interface (ghost = -interior).  mode "neumann": zero normal
    gradient everywhere (ghost = interior).  mode "pressure": Neumann,
    except Dirichlet-zero on the faces of the listed outlet edges --
    exactly the face rules the projection correction applies.
    """
    n = grid.n
    rows, cols, vals = [], [], []
    steps = (("left", 0, -1), ("right", 0, +1), ("bottom", -1, 0), ("top", +1, 0))
    for k in range(n):
        j, i = int(grid.cell_j[k]), int(grid.cell_i[k])
        diag = 0.0
        for edge, dj, di in steps:
            h2 = grid.dx**2 if di else grid.dy**2
            nb = grid.fluid_at(j + dj, i + di)
            inside = 0 <= i + di < grid.nx and 0 <= j + dj < grid.ny
            if nb >= 0:
                rows.append(k)
                cols.append(nb)
                vals.append(1.0 / h2)
                diag -= 1.0 / h2
            elif mode == "dirichlet":
                diag -= 3.0 / h2
            elif mode == "pressure":
                if not inside and edge in outlet_edges:
                    diag -= 2.0 / h2
            else:  # neumann: nothing
                pass
        rows.append(k)
        cols.append(k)
        vals.append(diag)
    return sp.csr_matrix((vals, (rows, cols)), shape=(n, n))


def poisson_solve(grid, rhs, bc="dirichlet", rtol=1e-10):
    """Solve the 5-point Laplacian system lap(s) = rhs on fluid cells.

    bc "dirichlet": s = 0 on all boundaries (including solid interfaces).
    bc "neumann": compatible right-hand side required (weighted mean below
    1e-10 * ||rhs||); the returned solution has zero weighted mean.
    """
    rhs = np.asarray(rhs, dtype=float)
    if rhs.shape != (grid.n,):
        raise ValueError(f"rhs must have shape ({grid.n},)")
    if bc not in ("dirichlet", "neumann"):
        raise ValueError("bc must be 'dirichlet' or 'neumann'")
    cache = getattr(grid, "_lap_cache", None)
    if cache is None:
        cache = grid._lap_cache = {}
    if bc not in cache:
        cache[bc] = _laplacian_matrix(grid, bc)
    L = cache[bc]
    if bc == "neumann":
        w = grid.weights
        mean = float(w @ rhs) / float(w.sum())
        if abs(mean) > 1e-10 * max(weighted_norm(w, rhs), 1e-300):
            raise ValueError("incompatible right-hand side for a pure Neumann solve")
        b = rhs - mean
        x, _ = _pcg(-L, -b, np.zeros_like(b), rtol, maxiter=max(2000, 10 * grid.n))
        return x - float(w @ x) / float(w.sum())
    x, _ = _pcg(-L, -rhs, np.zeros_like(rhs), rtol, maxiter=max(2000, 10 * grid.n))
    return x


# ---------------------------------------------------------------------------
# staggered solver


class FlowSolver:
    """Projection stepper.  Face arrays: u (ny, nx+1), v (ny+1, nx); the
    last u column duplicates the first when x is periodic (same for v)."""

    def __init__(self, config):
        self.config = config
        self.grid = _scenario_grid(config)
        g = self.grid
        self.nu = config.nu
        self.dt = config.dt
        self.time = 0.0
        self.step_count = 0

        fluid = g.mask
        padx = np.zeros((g.ny, 1), dtype=bool)
        pady = np.zeros((1, g.nx), dtype=bool)
        fx_l = np.hstack([padx, fluid])   # cell left of each u face
        fx_r = np.hstack([fluid, padx])   # cell right of each u face
        fy_b = np.vstack([pady, fluid])
        fy_t = np.vstack([fluid, pady])
        if g.periodic_x:
            fx_l[:, 0] = fluid[:, -1]
            fx_r[:, -1] = fluid[:, 0]
        if g.periodic_y:
            fy_b[0, :] = fluid[-1, :]
            fy_t[-1, :] = fluid[0, :]

        # faces between two fluid cells take part in the projection
        self.u_interior = fx_l & fx_r
        self.v_interior = fy_b & fy_t
        self.u_outlet = np.zeros_like(self.u_interior)
        self.v_outlet = np.zeros_like(self.v_interior)
        outlets = []
        if g.boundary["left"].kind == "outlet":
            self.u_outlet[:, 0] = fluid[:, 0]
            outlets.append("left")
        if g.boundary["right"].kind == "outlet":
            self.u_outlet[:, -1] = fluid[:, -1]
            outlets.append("right")
        if g.boundary["bottom"].kind == "outlet":
            self.v_outlet[0, :] = fluid[0, :]
            outlets.append("bottom")
        if g.boundary["top"].kind == "outlet":
            self.v_outlet[-1, :] = fluid[-1, :]
            outlets.append("top")
        self.outlet_edges = tuple(outlets)
        self.u_project = self.u_interior | self.u_outlet
        self.v_project = self.v_interior | self.v_outlet

        # fixed face values (inlet data; walls and solid faces are zero)
        self.u_fixed = np.zeros_like(self.u_interior, dtype=float)
        self.v_fixed = np.zeros_like(self.v_interior, dtype=float)
        if g.boundary["left"].kind == "inlet":
            self.u_fixed[:, 0] = np.where(fluid[:, 0], g.boundary["left"].velocity[0], 0.0)
        if g.boundary["right"].kind == "inlet":
            self.u_fixed[:, -1] = np.where(fluid[:, -1], g.boundary["right"].velocity[0], 0.0)
        if g.boundary["bottom"].kind == "inlet":
            self.v_fixed[0, :] = np.where(fluid[0, :], g.boundary["bottom"].velocity[1], 0.0)
        if g.boundary["top"].kind == "inlet":
            self.v_fixed[-1, :] = np.where(fluid[-1, :], g.boundary["top"].velocity[1], 0.0)

        self.L = _laplacian_matrix(g, "pressure", self.outlet_edges)
        self.singular = len(self.outlet_edges) == 0
        self.pflat = np.zeros(g.n)
        self.last_cg_iters = 0

        self.u, self.v = self._initial_faces()
        self._apply_bc(self.u, self.v)

    # -- construction helpers -------------------------------------------

    def _initial_faces(self):
        g, c = self.grid, self.config
        u = np.zeros((g.ny, g.nx + 1))
        v = np.zeros((g.ny + 1, g.nx))
        if c.scenario == "taylor-green":
            xf = np.arange(g.nx + 1) * g.dx
            yf = np.arange(g.ny + 1) * g.dy
            xc = (np.arange(g.nx) + 0.5) * g.dx
            yc = (np.arange(g.ny) + 0.5) * g.dy
            u[:] = np.sin(xf)[None, :] * np.cos(yc)[:, None]
            v[:] = -np.cos(xc)[None, :] * np.sin(yf)[:, None]
        elif c.scenario == "channel-obstacle":
            u[:] = c.inlet_speed
        return u, v

    def _apply_bc(self, u, v):
        """Impose fixed-face values and outlet zero-gradient; sync periodic
        duplicates."""
        g = self.grid
        u[~self.u_project] = self.u_fixed[~self.u_project]
        v[~self.v_project] = self.v_fixed[~self.v_project]
        if g.boundary["left"].kind == "outlet":
            u[:, 0] = np.where(self.u_outlet[:, 0], u[:, 1], u[:, 0])
        if g.boundary["right"].kind == "outlet":
            u[:, -1] = np.where(self.u_outlet[:, -1], u[:, -2], u[:, -1])
        if g.boundary["bottom"].kind == "outlet":
            v[0, :] = np.where(self.v_outlet[0, :], v[1, :], v[0, :])
        if g.boundary["top"].kind == "outlet":
            v[-1, :] = np.where(self.v_outlet[-1, :], v[-2, :], v[-1, :])
        if g.periodic_x:
            u[:, -1] = u[:, 0]
        if g.periodic_y:
            v[-1, :] = v[0, :]

    # -- ghost extensions --------------------------------------------------

    def _xext_u(self, u):
        if self.grid.periodic_x:
            return np.hstack([u[:, -2:-1], u, u[:, 1:2]])
        return np.hstack([u[:, :1], u, u[:, -1:]])

    def _yext_u(self, u):
        g = self.grid
        if g.periodic_y:
            return np.vstack([u[-1:, :], u, u[:1, :]])
        rows = []
        for edge, sl in (("bottom", 0), ("top", -1)):
            bc = g.boundary[edge]
            strip = u[sl : sl + 1, :] if sl == 0 else u[-1:, :]
            if bc.kind == "wall":
                rows.append(-strip)
            elif bc.kind == "inlet":
                rows.append(2 * bc.velocity[0] - strip)
            else:  # outlet
                rows.append(strip.copy())
        return np.vstack([rows[0], u, rows[1]])

    def _yext_v(self, v):
        if self.grid.periodic_y:
            return np.vstack([v[-2:-1, :], v, v[1:2, :]])
        return np.vstack([v[:1, :], v, v[-1:, :]])

    def _xext_v(self, v):
        g = self.grid
        if g.periodic_x:
            return np.hstack([v[:, -1:], v, v[:, :1]])
        cols = []
        for edge, sl in (("left", 0), ("right", -1)):
            bc = g.boundary[edge]
            strip = v[:, :1] if sl == 0 else v[:, -1:]
            if bc.kind == "wall":
                cols.append(-strip)
            elif bc.kind == "inlet":
                cols.append(2 * bc.velocity[1] - strip)
            else:
                cols.append(strip.copy())
        return np.hstack([cols[0], v, cols[1]])

    def _pext(self, pfull):
        g = self.grid
        if g.periodic_x:
            px = np.hstack([pfull[:, -1:], pfull, pfull[:, :1]])
        else:
            lgh = -pfull[:, :1] if g.boundary["left"].kind == "outlet" else pfull[:, :1]
            rgh = -pfull[:, -1:] if g.boundary["right"].kind == "outlet" else pfull[:, -1:]
            px = np.hstack([lgh, pfull, rgh])
        if g.periodic_y:
            return np.vstack([px[-1:, :], px, px[:1, :]])
        bgh = -px[:1, :] if g.boundary["bottom"].kind == "outlet" else px[:1, :]
        tgh = -px[-1:, :] if g.boundary["top"].kind == "outlet" else px[-1:, :]
        return np.vstack([bgh, px, tgh])

    # -- diagnostics -------------------------------------------------------

    def divergence(self):
        """Flat cell divergence of the current face field."""
        g = self.grid
        div = (self.u[:, 1:] - self.u[:, :-1]) / g.dx + (self.v[1:, :] - self.v[:-1, :]) / g.dy
        return div[g.mask]

    def divergence_norm(self):
        return weighted_norm(self.grid.weights, self.divergence())

    def velocity_norm(self):
        g = self.grid
        uu = self.u[:, :-1] if g.periodic_x else self.u
        vv = self.v[:-1, :] if g.periodic_y else self.v
        return float(np.sqrt((np.sum(uu**2) + np.sum(vv**2)) * g.dx * g.dy))

    def kinetic_energy(self):
        return 0.5 * self.velocity_norm() ** 2

    def cell_velocity(self):
        """Average faces to cell centers; flat stacked vector field."""
        g = self.grid
        uc = 0.5 * (self.u[:, :-1] + self.u[:, 1:])
        vc = 0.5 * (self.v[:-1, :] + self.v[1:, :])
        return g.vec_flat(uc, vc)

    def cell_pressure(self):
        return self.pflat.copy()

    # -- stepping ----------------------------------------------------------

    def step(self):
        """Advance one projection step; returns diagnostics."""
        g, dt, nu = self.grid, self.dt, self.nu
        u, v = self.u, self.v

        cfl = dt * max(
            float(np.max(np.abs(u))) / g.dx, float(np.max(np.abs(v))) / g.dy
        )
        if cfl > 1.0:
            raise RuntimeError(f"CFL violation at t={self.time:.4g}: {cfl:.3f} > 1")

        ue = self._xext_u(u)
        uy = self._yext_u(u)
        vx = self._xext_v(v)
        vy = self._yext_v(v)

        # u predictor
        uc2 = (0.5 * (ue[:, :-1] + ue[:, 1:])) ** 2           # centers, (ny, nx+2)
        du2dx = (uc2[:, 1:] - uc2[:, :-1]) / g.dx             # at u faces
        ubar = 0.5 * (uy[1:, :] + uy[:-1, :])                 # corners, (ny+1, nx+1)
        vbar = 0.5 * (vx[:, 1:] + vx[:, :-1])                 # corners, (ny+1, nx+1)
        uv = ubar * vbar
        duvdy = (uv[1:, :] - uv[:-1, :]) / g.dy
        lap_u = (ue[:, 2:] - 2 * ue[:, 1:-1] + ue[:, :-2]) / g.dx**2 + (
            uy[2:, :] - 2 * uy[1:-1, :] + uy[:-2, :]
        ) / g.dy**2
        ustar = u + dt * (-(du2dx + duvdy) + nu * lap_u)

        # v predictor
        vc2 = (0.5 * (vy[:-1, :] + vy[1:, :])) ** 2           # centers, (ny+2, nx)
        dv2dy = (vc2[1:, :] - vc2[:-1, :]) / g.dy
        duvdx = (uv[:, 1:] - uv[:, :-1]) / g.dx
        lap_v = (vx[:, 2:] - 2 * vx[:, 1:-1] + vx[:, :-2]) / g.dx**2 + (
            vy[2:, :] - 2 * vy[1:-1, :] + vy[:-2, :]
        ) / g.dy**2
        vstar = v + dt * (-(duvdx + dv2dy) + nu * lap_v)

        self._apply_bc(ustar, vstar)

        div = (ustar[:, 1:] - ustar[:, :-1]) / g.dx + (vstar[1:, :] - vstar[:-1, :]) / g.dy
        rhs = div[g.mask] / dt
        if self.singular:
            rhs = rhs - rhs.mean()
            x0 = self.pflat - self.pflat.mean()
        else:
            x0 = self.pflat
        p, iters = _pcg(
            -self.L, -rhs, x0, PRESSURE_CG_TOL, maxiter=max(2000, 10 * g.n)
        )
        if self.singular:
            p = p - p.mean()
        self.pflat = p
        self.last_cg_iters = iters

        pe = self._pext(g.full(p))
        gpx = (pe[1:-1, 1:] - pe[1:-1, :-1]) / g.dx           # at u faces
        gpy = (pe[1:, 1:-1] - pe[:-1, 1:-1]) / g.dy           # at v faces
        unew = np.where(self.u_project, ustar - dt * gpx, ustar)
        vnew = np.where(self.v_project, vstar - dt * gpy, vstar)
        if g.periodic_x:
            unew[:, -1] = unew[:, 0]
        if g.periodic_y:
            vnew[-1, :] = vnew[0, :]
        self.u, self.v = unew, vnew

        self.time += dt
        self.step_count += 1
        return {
            "t": self.time,
            "cfl": cfl,
            "cg_iters": iters,
            "div_norm": self.divergence_norm(),
            "energy": self.kinetic_energy(),
        }


def run_fom(config, progress=None):
    """Run a scenario and collect snapshots.

    Snapshots are recorded every save_every steps once spinup_steps have
    completed, so the set holds n_steps // save_every states and the
    first one lies save_every steps past the spinup.  progress, if
    given, is called as progress(step, total_steps).
    """
    solver = FlowSolver(config)
    total = config.spinup_steps + config.n_steps
    times, vels, pres = [], [], []

    for k in range(config.spinup_steps):
        solver.step()
        if progress:
            progress(k + 1, total)
    for k in range(config.n_steps):
        solver.step()
        if progress:
            progress(config.spinup_steps + k + 1, total)
        if (k + 1) % config.save_every == 0:
            times.append(solver.time)
            vels.append(solver.cell_velocity())
            pres.append(solver.cell_pressure())

    n = solver.grid.n
    return SnapshotSet(
        grid=solver.grid,
        times=np.array(times, dtype=float),
        velocity=np.array(vels, dtype=float).reshape(len(times), 2 * n),
        pressure=np.array(pres, dtype=float).reshape(len(times), n),
        meta={"config": config.meta(), "solver": "staggered-chorin"},
    )
