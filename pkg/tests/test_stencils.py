import numpy as np
import pytest

import oracles
from romlab.fom import FomConfig, init_scenario
from romlab.grid import EDGES, BoundaryCondition, Grid
from romlab.stencils import cached_diff, diff_matrix, grad_matrices


def wall_grid(nx=12, ny=10, mask=None):
    return Grid(nx, ny, 1.2, 1.0,
                {e: BoundaryCondition("wall") for e in EDGES}, mask=mask)


def periodic_grid(nx=16, ny=16):
    return Grid(nx, ny, 2 * np.pi, 2 * np.pi,
                {e: BoundaryCondition("periodic") for e in EDGES})


class TestPolynomialExactness:
    """Every stencil variant (central, both one-sided orders) reproduces
    quadratics exactly, so a quadratic field is differentiated without
    error at every cell of a wall-bounded grid."""

    def test_first_derivative_on_linear(self):
        g = wall_grid()
        f = 2.0 + 3.0 * g.xc - 1.5 * g.yc
        assert np.allclose(diff_matrix(g, "x") @ f, 3.0, atol=1e-11)
        assert np.allclose(diff_matrix(g, "y") @ f, -1.5, atol=1e-11)

    def test_first_derivative_on_quadratic(self):
        g = wall_grid()
        f = g.xc**2 + 0.5 * g.xc * g.yc
        assert np.allclose(diff_matrix(g, "x") @ f, 2 * g.xc + 0.5 * g.yc,
                           atol=1e-10)

    def test_second_derivative_on_quadratic(self):
        g = wall_grid()
        f = 4.0 * g.xc**2 - g.yc**2 + g.xc
        assert np.allclose(diff_matrix(g, "x", 2) @ f, 8.0, atol=1e-9)
        assert np.allclose(diff_matrix(g, "y", 2) @ f, -2.0, atol=1e-9)


class TestPeriodic:
    def test_wrap_convergence(self):
        errs = []
        for nx in (16, 32):
            g = periodic_grid(nx, nx)
            d = diff_matrix(g, "x") @ np.sin(g.xc)
            errs.append(np.max(np.abs(d - np.cos(g.xc))))
        assert errs[1] < errs[0] / 3.5  # second order: factor ~4

    def test_second_derivative_eigenfunction(self):
        g = periodic_grid()
        d2 = diff_matrix(g, "x", 2) @ np.sin(g.xc)
        # discrete symbol of the central stencil
        lam = -(2 - 2 * np.cos(g.dx)) / g.dx**2
        assert np.allclose(d2, lam * np.sin(g.xc), atol=1e-12)


class TestBlockedCells:
    def test_single_column_has_zero_x_derivative(self):
        mask = np.zeros((6, 8), dtype=bool)
        mask[:, 3] = True
        g = wall_grid(8, 6, mask=mask)
        d = diff_matrix(g, "x") @ np.arange(1.0, g.n + 1)
        assert np.array_equal(d, np.zeros(g.n))

    def test_masked_grid_matches_oracle(self, rng):
        cfg = FomConfig("channel-obstacle", 16, 12, nu=1e-3, dt=1e-3,
                        n_steps=0, obstacle=(5, 4, 3, 3))
        g, _, _ = init_scenario(cfg)
        f = rng.standard_normal(g.n)
        for axis in ("x", "y"):
            for order in (1, 2):
                got = diff_matrix(g, axis, order) @ f
                want = oracles.deriv_field(g, f, axis, order)
                assert np.allclose(got, want, atol=1e-12), (axis, order)

    def test_periodic_grid_matches_oracle(self, rng):
        g = periodic_grid()
        f = rng.standard_normal(g.n)
        got = diff_matrix(g, "x") @ f
        assert np.allclose(got, oracles.deriv_field(g, f, "x"), atol=1e-12)


class TestApi:
    def test_bad_axis(self):
        with pytest.raises(ValueError, match="axis"):
            diff_matrix(wall_grid(), "z")

    def test_bad_order(self):
        with pytest.raises(ValueError, match="order"):
            diff_matrix(wall_grid(), "x", 3)

    def test_cache_returns_same_object(self):
        g = wall_grid()
        assert cached_diff(g, "x") is cached_diff(g, "x")
        dx, dy = grad_matrices(g)
        assert dx is cached_diff(g, "x")
        assert dy is cached_diff(g, "y", 1)
