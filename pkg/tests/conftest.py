"""Shared fixtures: one small lid-cavity reduced-modeling chain.

Session scope keeps the flow solve, the three POD bases, and the
assembled operators to a single computation; tests must treat every
fixture value as read-only.
"""

import numpy as np
import pytest

from romlab.closure import (
    exact_pressure_corrections_ppe,
    exact_pressure_corrections_sup,
    exact_velocity_correction,
)
from romlab.fom import FomConfig, run_fom
from romlab.operators import (
    assemble_data_rank,
    assemble_ppe_operators,
    assemble_sup_operators,
)
from romlab.pod import (
    compute_pod,
    enrich_with_supremizers,
    snapshot_coefficients,
    supremizer_snapshots,
)

CAVITY_NU = 1e-2
CAVITY_DT = 5e-3


@pytest.fixture(scope="session")
def cavity():
    """Lid-driven cavity chain: snapshots, bases, operators, histories.

    24x24 box, 80 spinup steps, then 400 steps saved every 10 -> 40
    snapshots over 2 s at 0.05 s cadence.  Working ranks r = q = 3 with
    3 supremizers; data ranks d = 8, d_p = 6.
    """
    cfg = FomConfig("lid-cavity", 24, 24, nu=CAVITY_NU, dt=CAVITY_DT,
                    n_steps=400, save_every=10, spinup_steps=80)
    snaps = run_fom(cfg)
    grid = snaps.grid

    V = snaps.velocity_matrix()
    Pm = snaps.pressure_matrix()
    vel_d = compute_pod(V, grid.vector_weights, n_modes=8)
    chi_dp = compute_pod(Pm, grid.weights, n_modes=6)
    sup = compute_pod(supremizer_snapshots(Pm, grid), grid.vector_weights,
                      n_modes=3)

    r, q = 3, 3
    enriched = enrich_with_supremizers(vel_d.leading(r), sup)
    chi_q = chi_dp.leading(q)
    sup_ops = assemble_sup_operators(enriched, chi_q, grid, CAVITY_NU)
    ppe_ops = assemble_ppe_operators(vel_d.leading(r), chi_q, grid, CAVITY_NU)
    data_ops = assemble_data_rank(vel_d, chi_dp, grid, r=r, q=q)

    a_d = snapshot_coefficients(vel_d, V)
    b_dp = snapshot_coefficients(chi_dp, Pm)
    tau_u = exact_velocity_correction(data_ops, a_d)
    tau_p1, tau_p2 = exact_pressure_corrections_sup(data_ops, a_d, b_dp)
    tau_D, tau_G = exact_pressure_corrections_ppe(data_ops, a_d, b_dp)

    return {
        "config": cfg,
        "snaps": snaps,
        "grid": grid,
        "vel_d": vel_d,
        "chi_dp": chi_dp,
        "sup": sup,
        "enriched": enriched,
        "chi_q": chi_q,
        "sup_ops": sup_ops,
        "ppe_ops": ppe_ops,
        "data_ops": data_ops,
        "a_d": a_d,
        "b_dp": b_dp,
        "series": {"u": tau_u, "p1": tau_p1, "p2": tau_p2,
                   "D": tau_D, "G": tau_G},
        "r": r,
        "q": q,
        "dt_rom": 0.05,
    }


@pytest.fixture(scope="session")
def channel_desk():
    """Channel-obstacle desk case at the marginally-resolved working rank.

    64x32 channel, nu = 2.5e-3 (obstacle Reynolds number near 100),
    2000 spinup steps, then 2400 steps saved every 8 -> 300 snapshots
    over 12 s of developed vortex shedding.  Data ranks d = 20,
    d_p = 12; working ranks r = q = 3 plus 3 supremizers.
    """
    cfg = FomConfig("channel-obstacle", 64, 32, nu=2.5e-3, dt=5e-3,
                    n_steps=2400, save_every=8, spinup_steps=2000,
                    inlet_speed=1.0)
    snaps = run_fom(cfg)
    grid = snaps.grid

    V = snaps.velocity_matrix()
    Pm = snaps.pressure_matrix()
    vel_d = compute_pod(V, grid.vector_weights, n_modes=20)
    chi_dp = compute_pod(Pm, grid.weights, n_modes=12)
    sup = compute_pod(supremizer_snapshots(Pm, grid), grid.vector_weights,
                      n_modes=3)

    r, q = 3, 3
    enriched = enrich_with_supremizers(vel_d.leading(r), sup)
    chi_q = chi_dp.leading(q)
    sup_ops = assemble_sup_operators(enriched, chi_q, grid, cfg.nu)
    ppe_ops = assemble_ppe_operators(vel_d.leading(r), chi_q, grid, cfg.nu)
    data_ops = assemble_data_rank(vel_d, chi_dp, grid, r=r, q=q)

    a_d = snapshot_coefficients(vel_d, V)
    b_dp = snapshot_coefficients(chi_dp, Pm)
    tau_u = exact_velocity_correction(data_ops, a_d)
    tau_p1, tau_p2 = exact_pressure_corrections_sup(data_ops, a_d, b_dp)
    tau_D, tau_G = exact_pressure_corrections_ppe(data_ops, a_d, b_dp)

    return {
        "config": cfg,
        "snaps": snaps,
        "grid": grid,
        "vel_d": vel_d,
        "chi_dp": chi_dp,
        "sup": sup,
        "enriched": enriched,
        "chi_q": chi_q,
        "sup_ops": sup_ops,
        "ppe_ops": ppe_ops,
        "data_ops": data_ops,
        "a_d": a_d,
        "b_dp": b_dp,
        "series": {"u": tau_u, "p1": tau_p1, "p2": tau_p2,
                   "D": tau_D, "G": tau_G},
        "r": r,
        "q": q,
        "dt_rom": 0.04,
    }


@pytest.fixture()
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    """Echo the acceptance-criterion verdict lines after the run."""
    import sys

    mod = sys.modules.get("test_acceptance")
    lines = getattr(mod, "RESULTS", None) if mod else None
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
