"""Grid-refinement study of the flow solver on the decaying vortex.

The periodic vortex has a closed-form solution, so refining the grid
while shrinking the step with h^2 exposes the spatial order directly.
"""

import numpy as np

from romlab.fom import FlowSolver, FomConfig

T = 0.32
errs = []

print(" n    dt       L2 velocity error   order")
for n, dt in [(16, 0.02), (32, 0.005), (64, 0.00125)]:
    cfg = FomConfig("taylor-green", n, n, nu=1e-2, dt=dt,
                    n_steps=int(round(T / dt)), save_every=1,
                    spinup_steps=0)
    solver = FlowSolver(cfg)
    worst_div = 0.0
    for _ in range(cfg.n_steps):
        info = solver.step()
        worst_div = max(worst_div, info["div_norm"] / solver.velocity_norm())
    g = solver.grid
    vel = solver.cell_velocity()
    u, v = vel[: g.n], vel[g.n:]
    decay = np.exp(-2 * cfg.nu * T)
    ue = np.sin(g.xc) * np.cos(g.yc) * decay
    ve = -np.cos(g.xc) * np.sin(g.yc) * decay
    errs.append(np.sqrt(np.sum(g.weights * ((u - ue) ** 2 + (v - ve) ** 2))))
    order = "" if len(errs) < 2 else f"{np.log2(errs[-2] / errs[-1]):.2f}"
    print(f"{n:3d}  {dt:<8g} {errs[-1]:.6e}       {order}")

print(f"max relative post-projection divergence: {worst_div:.2e}")
