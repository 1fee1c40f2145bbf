"""Error measures for reduced solutions against snapshot data.

The reference at each snapshot time is the data-rank reconstruction:
velocity from the leading d physical mode coefficients, pressure from
the leading d_p coefficients.  Velocity error series compare pointwise
speed fields; pressure series compare the signed fields.  The summary
metrics used for rank selection live in coefficient space and sum the
mass-weighted distances between the reduced trajectory and the filtered
snapshot coefficients over the window.
"""

from __future__ import annotations

import numpy as np

__all__ = [
    "align_times",
    "relative_error_series",
    "error_metric_u",
    "error_metric_p",
    "reconstruction_error_series",
]


def align_times(traj_times, snap_times, rtol=1e-6):
    """Indices into snap_times matching each trajectory time.

    Raises if any trajectory time is missing from the snapshot set.
    """
    traj_times = np.asarray(traj_times, dtype=float)
    snap_times = np.asarray(snap_times, dtype=float)
    scale = max(np.ptp(snap_times), 1.0)
    idx = np.searchsorted(snap_times, traj_times)
    idx = np.clip(idx, 0, len(snap_times) - 1)
    left = np.clip(idx - 1, 0, len(snap_times) - 1)
    pick = np.where(
        np.abs(snap_times[left] - traj_times) < np.abs(snap_times[idx] - traj_times),
        left, idx)
    if not np.allclose(snap_times[pick], traj_times, rtol=0, atol=rtol * scale):
        bad = traj_times[~np.isclose(snap_times[pick], traj_times,
                                     rtol=0, atol=rtol * scale)]
        raise ValueError(f"trajectory times missing from snapshots: {bad[:5]}")
    return pick


def _speed(grid, vec_flat):
    return grid.magnitude(vec_flat)


def relative_error_series(traj, snapshots, rom_vel_basis, vel_basis_d, chi_basis_dp):
    """Per-time relative errors of the reduced run against the data-rank
    references.

    Velocity compares speed fields in the weighted norm:
    || |u_rom| - |u_ref| ||_w / || |u_ref| ||_w.  Pressure compares the
    signed fields.  Returns a dict with times, eps_u, eps_p.
    """
    grid = snapshots.grid
    pick = align_times(traj.times, snapshots.times)
    w = grid.weights
    eps_u = np.empty(len(pick))
    eps_p = np.empty(len(pick))
    for row, snap_idx in enumerate(pick):
        vel_snap = snapshots.velocity[snap_idx]
        p_snap = snapshots.pressure[snap_idx]
        u_ref = vel_basis_d.reconstruct(vel_basis_d.project(vel_snap))
        p_ref = chi_basis_dp.reconstruct(chi_basis_dp.project(p_snap))
        u_rom = rom_vel_basis.reconstruct(traj.a[row])
        p_rom = chi_basis_dp.leading(traj.b.shape[1]).reconstruct(traj.b[row])
        ds = _speed(grid, u_rom) - _speed(grid, u_ref)
        ref_u = np.sqrt(np.sum(w * _speed(grid, u_ref) ** 2))
        ref_p = np.sqrt(np.sum(w * p_ref ** 2))
        if ref_u == 0 or ref_p == 0:
            raise ValueError("reference field vanishes; relative error undefined")
        eps_u[row] = np.sqrt(np.sum(w * ds ** 2)) / ref_u
        eps_p[row] = np.sqrt(np.sum(w * (p_rom - p_ref) ** 2)) / ref_p
    return {"times": traj.times.copy(), "eps_u": eps_u, "eps_p": eps_p}


def error_metric_u(traj, snapshots, rom_vel_basis):
    """Sum over the window of mass-weighted coefficient distances.

    The snapshot filter projects each snapshot onto the run's own
    velocity basis (Gram solve for an enriched basis); the distance at
    one time is sqrt((a - ahat)' M_r (a - ahat)) with M_r the basis
    Gram matrix, which equals the weighted field-space distance between
    the reduced solution and the filtered snapshot.
    """
    pick = align_times(traj.times, snapshots.times)
    Mr = rom_vel_basis.gram()
    ahat = rom_vel_basis.project(snapshots.velocity[pick].T).T  # (mt, r)
    diff = traj.a - ahat
    return float(np.sum(np.sqrt(np.einsum("mi,ij,mj->m", diff, Mr, diff))))


def error_metric_p(traj, snapshots, chi_basis_q):
    """Sum over the window of pressure coefficient distances (the basis
    is orthonormal, so the 2-norm equals the weighted field distance)."""
    pick = align_times(traj.times, snapshots.times)
    bhat = chi_basis_q.project(snapshots.pressure[pick].T).T
    return float(np.sum(np.linalg.norm(traj.b - bhat, axis=1)))


def reconstruction_error_series(snapshots, vel_basis, chi_basis, r, q):
    """Plain relative projection errors of each snapshot at ranks (r, q).

    These use signed field differences, so the velocity series is
    monotonically nonincreasing in r (best approximation in the weighted
    norm).  Returns a dict with times, eps_u, eps_p.
    """
    grid = snapshots.grid
    w = grid.weights
    w2 = grid.vector_weights
    vb = vel_basis.leading(r)
    cb = chi_basis.leading(q)
    eps_u = np.empty(len(snapshots.times))
    eps_p = np.empty(len(snapshots.times))
    for m in range(len(snapshots.times)):
        vel = snapshots.velocity[m]
        p = snapshots.pressure[m]
        du = vb.reconstruct(vb.project(vel)) - vel
        dp = cb.reconstruct(cb.project(p)) - p
        nu_ = np.sqrt(np.sum(w2 * vel ** 2))
        np_ = np.sqrt(np.sum(w * p ** 2))
        if nu_ == 0 or np_ == 0:
            raise ValueError("zero snapshot; relative error undefined")
        eps_u[m] = np.sqrt(np.sum(w2 * du ** 2)) / nu_
        eps_p[m] = np.sqrt(np.sum(w * dp ** 2)) / np_
    return {"times": snapshots.times.copy(), "eps_u": eps_u, "eps_p": eps_p}
