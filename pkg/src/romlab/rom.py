"""Time integration of the reduced models.

Both formulations advance the coupled algebraic-differential system in
the stacked unknown z = [a, b] with a full Newton iteration per step and
an analytic Jacobian.  The constrained formulation closes the system
with the weak divergence constraint P a + corrections = 0; the
pressure-Poisson formulation closes it with
D b + G:(a,a) - nu N a - L + corrections = 0.

Schemes: implicit Euler, and BDF2 self-started with one implicit Euler
step.  Corrections evaluate on physical velocity modes only and are
zero-padded into supremizer rows; a rank-0 correction model contributes
exact zeros, so enabling it reproduces the uncorrected trajectory
bit for bit.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .closure import CorrectionModel

__all__ = ["RomModelSpec", "RomTrajectory", "solve_rom"]

NEWTON_TOL = 1e-10
NEWTON_MAXITER = 50
DIVERGENCE_FACTOR = 1e6

_SUP_FLAGS = ("c_u", "c_p1", "c_p2")
_PPE_FLAGS = ("c_u", "c_D", "c_G")

# model key -> flags it covers
_COVERS = {
    "u": ("c_u",),
    "p1": ("c_p1",),
    "p2": ("c_p2",),
    "D": ("c_D",),
    "G": ("c_G",),
    "DG": ("c_D", "c_G"),
    "uDG": ("c_u", "c_D", "c_G"),
}


@dataclass
class RomModelSpec:
    """Which correction terms a reduced run applies, and how.

    flags holds 0/1 activation bits: c_u, c_p1, c_p2 for the constrained
    formulation; c_u, c_D, c_G for the pressure-Poisson one.  models
    maps term keys to fitted CorrectionModel instances ("u", "p1", "p2",
    "D", "G", and the joint keys "DG" and "uDG" whose input_spec is
    "ab").  exact_series instead injects precomputed correction rows by
    step index (key -> (n_steps + 1, dim) array sampled at the solver
    times); series corrections are constants within each step, so they
    carry no Jacobian.
    """

    formulation: str
    flags: dict = field(default_factory=dict)
    models: dict = field(default_factory=dict)
    exact_series: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.formulation not in ("SUP", "PPE"):
            raise ValueError("formulation must be 'SUP' or 'PPE'")
        names = _SUP_FLAGS if self.formulation == "SUP" else _PPE_FLAGS
        flags = {name: int(self.flags.get(name, 0)) for name in names}
        unknown = set(self.flags) - set(names)
        if unknown:
            raise ValueError(f"unknown flags for {self.formulation}: {sorted(unknown)}")
        if any(v not in (0, 1) for v in flags.values()):
            raise ValueError("flags must be 0 or 1")
        self.flags = flags

        valid_keys = ({"u", "p1", "p2"} if self.formulation == "SUP"
                      else {"u", "D", "G", "DG", "uDG"})
        for key in set(self.models) | set(self.exact_series):
            if key not in valid_keys:
                raise ValueError(f"model key {key!r} invalid for {self.formulation}")
            if key in self.models and key in self.exact_series:
                raise ValueError(f"term {key!r} given both a model and a series")
        if "uDG" in self._given() and ({"u", "D", "G", "DG"} & self._given()):
            raise ValueError("joint uDG term excludes separate u/D/G terms")
        if "DG" in self._given() and ({"D", "G"} & self._given()):
            raise ValueError("joint DG term excludes separate D/G terms")

        # every active flag needs coverage; inactive flags ignore models
        covered = set()
        for key in self._given():
            for flag in _COVERS[key]:
                covered.add(flag)
        for name, bit in flags.items():
            if bit and name not in covered:
                raise ValueError(f"flag {name}=1 but no model or series covers it")
        for key in self._given():
            need = [flag for flag in _COVERS[key] if flag in flags]
            if any(not flags[flag] for flag in need):
                raise ValueError(f"term {key!r} active while its flag is 0")

    def _given(self):
        return set(self.models) | set(self.exact_series)

    @staticmethod
    def baseline(formulation):
        return RomModelSpec(formulation=formulation)


@dataclass
class RomTrajectory:
    """Stacked solution history of one reduced run."""

    times: np.ndarray        # (m + 1,)
    a: np.ndarray            # (m + 1, r)
    b: np.ndarray            # (m + 1, q)
    newton_iters: np.ndarray  # (m,)
    scheme: str
    dt: float
    diverged: bool = False
    diverged_step: Optional[int] = None

    @property
    def n_steps(self):
        return len(self.times) - 1


class _Term:
    """One correction term bound to its slot in the residual."""

    def __init__(self, key, model, series, n_u, r_sys, q):
        self.key = key
        self.model = model
        self.series = series
        self.n_u = n_u
        self.r_sys = r_sys
        self.q = q

    def _inputs(self, a, b):
        spec = self.model.input_spec
        if spec == "a":
            return a[: self.n_u]
        if spec == "b":
            return b
        return np.concatenate([a[: self.n_u], b])

    def value(self, a, b, step):
        if self.series is not None:
            return self.series[step]
        return self.model.evaluate(self._inputs(a, b))

    def jacobians(self, a, b):
        """(d value/d a_sys, d value/d b); zeros for series terms."""
        out = self.model.out_dim if self.model is not None else self.series.shape[1]
        Ja = np.zeros((out, self.r_sys))
        Jb = np.zeros((out, self.q))
        if self.series is not None:
            return Ja, Jb
        J = self.model.jacobian(self._inputs(a, b))
        spec = self.model.input_spec
        if spec == "a":
            Ja[:, : self.n_u] = J
        elif spec == "b":
            Jb[:, :] = J
        else:
            Ja[:, : self.n_u] = J[:, : self.n_u]
            Jb[:, :] = J[:, self.n_u:]
        return Ja, Jb


def _pad_rows(vec_or_mat, rows, r_sys):
    """Zero-pad physical-mode outputs into the full velocity block."""
    out = np.zeros((r_sys,) + vec_or_mat.shape[1:])
    out[:rows] = vec_or_mat
    return out


class _Residual:
    """Residual and Jacobian of the stacked steady part of one step."""

    def __init__(self, ops, spec):
        self.ops = ops
        self.spec = spec
        self.r_sys = ops.r
        self.n_u = ops.n_u
        self.q = ops.q
        self.K = ops.nu * (ops.B + ops.B_T)
        self.Epen = ops.penalty_matrix()
        self.dpen = ops.penalty_vector()
        f = spec.flags

        def term(key):
            if not f.get({"u": "c_u", "p1": "c_p1", "p2": "c_p2",
                          "D": "c_D", "G": "c_G", "DG": "c_D",
                          "uDG": "c_u"}[key], 0):
                return None
            if key in spec.models:
                return _Term(key, spec.models[key], None, self.n_u, self.r_sys, self.q)
            if key in spec.exact_series:
                return _Term(key, None, np.asarray(spec.exact_series[key], dtype=float),
                             self.n_u, self.r_sys, self.q)
            return None

        self.t_u = term("u")
        self.t_p1 = term("p1")
        self.t_p2 = term("p2")
        self.t_D = term("D")
        self.t_G = term("G")
        self.t_DG = term("DG")
        self.t_uDG = term("uDG")

    def momentum_rhs(self, a, b, step):
        """Steady momentum right-hand side and its Jacobian blocks."""
        ops = self.ops
        rhs = self.K @ a
        rhs -= np.einsum("ijk,j,k->i", ops.C, a, a)
        rhs -= ops.H @ b
        rhs += self.dpen - self.Epen @ a
        Ja = (self.K
              - np.einsum("ijk,k->ij", ops.C, a)
              - np.einsum("ijk,j->ik", ops.C, a)
              - self.Epen)
        Jb = -ops.H.copy()
        for t in (self.t_u, self.t_uDG):
            if t is None:
                continue
            val = t.value(a, b, step)
            tja, tjb = t.jacobians(a, b)
            if t.key == "uDG":
                val, tja, tjb = val[: self.n_u], tja[: self.n_u], tjb[: self.n_u]
            rhs += _pad_rows(val, self.n_u, self.r_sys)
            Ja += _pad_rows(tja, self.n_u, self.r_sys)
            Jb += _pad_rows(tjb, self.n_u, self.r_sys)
        if self.t_p1 is not None:
            val = self.t_p1.value(a, b, step)
            tja, tjb = self.t_p1.jacobians(a, b)
            rhs += _pad_rows(val, self.n_u, self.r_sys)
            Ja += _pad_rows(tja, self.n_u, self.r_sys)
            Jb += _pad_rows(tjb, self.n_u, self.r_sys)
        return rhs, Ja, Jb

    def closure_eq(self, a, b, step):
        """Constraint (SUP) or Poisson (PPE) residual and Jacobians."""
        ops = self.ops
        if ops.formulation == "SUP":
            res = ops.P @ a
            Ja = ops.P.copy()
            Jb = np.zeros((self.q, self.q))
            if self.t_p2 is not None:
                res = res + self.t_p2.value(a, b, step)
                tja, tjb = self.t_p2.jacobians(a, b)
                Ja += tja
                Jb += tjb
            return res, Ja, Jb
        res = ops.D @ b + np.einsum("ijk,j,k->i", ops.G, a, a)
        res -= ops.nu * (ops.N @ a)
        res -= ops.L
        Ja = (np.einsum("ijk,k->ij", ops.G, a)
              + np.einsum("ijk,j->ik", ops.G, a)
              - ops.nu * ops.N)
        Jb = ops.D.copy()
        for t in (self.t_D, self.t_G, self.t_DG, self.t_uDG):
            if t is None:
                continue
            val = t.value(a, b, step)
            tja, tjb = t.jacobians(a, b)
            if t.key == "uDG":
                val, tja, tjb = val[self.n_u:], tja[self.n_u:], tjb[self.n_u:]
            res = res + val
            Ja += tja
            Jb += tjb
        return res, Ja, Jb


def _series_length_ok(spec, n_steps):
    for key, series in spec.exact_series.items():
        series = np.asarray(series)
        if series.ndim != 2 or series.shape[0] < n_steps + 1:
            raise ValueError(
                f"exact series {key!r} must provide at least {n_steps + 1} rows")


def solve_rom(ops, spec, a0, b0, dt, n_steps, scheme="implicit-euler",
              t0=0.0, newton_tol=NEWTON_TOL, max_newton=NEWTON_MAXITER):
    """March the reduced model from (a0, b0) at time t0 over n_steps of
    size dt.

    Returns a RomTrajectory; a Newton failure, singular Jacobian, or a
    velocity-norm blowup past 1e6 times the initial norm marks the run
    diverged and truncates the history at the last accepted state
    instead of raising.
    """
    if spec.formulation != ops.formulation:
        raise ValueError("model spec and operators disagree on the formulation")
    if scheme not in ("implicit-euler", "bdf2"):
        raise ValueError("scheme must be 'implicit-euler' or 'bdf2'")
    if dt <= 0 or n_steps < 0:
        raise ValueError("need dt > 0 and n_steps >= 0")
    _series_length_ok(spec, n_steps)

    r, q = ops.r, ops.q
    a0 = np.asarray(a0, dtype=float).reshape(r)
    b0 = np.asarray(b0, dtype=float).reshape(q)
    resid = _Residual(ops, spec)

    A = np.empty((n_steps + 1, r))
    Bc = np.empty((n_steps + 1, q))
    iters = np.zeros(n_steps, dtype=int)
    A[0], Bc[0] = a0, b0

    norm_a0 = float(np.linalg.norm(a0))
    blow = DIVERGENCE_FACTOR * norm_a0 if norm_a0 > 0 else None
    Mop = ops.M

    def newton_step(alpha, hist, a_guess, b_guess, step):
        """Solve M (alpha a - hist)/dt = momentum_rhs, closure_eq = 0."""
        a = a_guess.copy()
        b = b_guess.copy()
        scale = None
        for it in range(1, max_newton + 1):
            rhs_m, Jm_a, Jm_b = resid.momentum_rhs(a, b, step)
            F_m = Mop @ (alpha * a - hist) / dt - rhs_m
            F_c, Jc_a, Jc_b = resid.closure_eq(a, b, step)
            F = np.concatenate([F_m, F_c])
            norm = float(np.linalg.norm(F))
            if scale is None:
                scale = max(1.0, norm)
            if norm <= newton_tol * scale:
                return a, b, it, True
            J = np.empty((r + q, r + q))
            J[:r, :r] = (alpha / dt) * Mop - Jm_a
            J[:r, r:] = -Jm_b
            J[r:, :r] = Jc_a
            J[r:, r:] = Jc_b
            try:
                delta = np.linalg.solve(J, -F)
            except np.linalg.LinAlgError:
                return a, b, it, False
            if not np.all(np.isfinite(delta)):
                return a, b, it, False
            a = a + delta[:r]
            b = b + delta[r:]
        return a, b, max_newton, False

    for m in range(1, n_steps + 1):
        if scheme == "implicit-euler" or m == 1:
            alpha, hist = 1.0, A[m - 1]
        else:
            alpha, hist = 1.5, 2.0 * A[m - 1] - 0.5 * A[m - 2]
        a_new, b_new, its, ok = newton_step(alpha, hist, A[m - 1], Bc[m - 1], m)
        bad = (not ok
               or not np.all(np.isfinite(a_new))
               or not np.all(np.isfinite(b_new))
               or (blow is not None and np.linalg.norm(a_new) > blow))
        if bad:
            times = t0 + dt * np.arange(m, dtype=float)
            return RomTrajectory(times=times, a=A[:m].copy(), b=Bc[:m].copy(),
                                 newton_iters=iters[: m - 1].copy(), scheme=scheme,
                                 dt=float(dt), diverged=True, diverged_step=m)
        A[m], Bc[m] = a_new, b_new
        iters[m - 1] = its

    times = t0 + dt * np.arange(n_steps + 1, dtype=float)
    return RomTrajectory(times=times, a=A, b=Bc, newton_iters=iters,
                         scheme=scheme, dt=float(dt))
