"""Data-driven correction terms for reduced models.

The exact correction series are the residuals between data-rank and
working-rank Galerkin terms evaluated on snapshot coefficient histories.
Each is fitted with a linear (and optionally quadratic) ansatz in the
reduced coefficients by truncated-SVD least squares; the truncation rank
is selected by replaying the corrected reduced model over the training
window and scoring the solution error, with rank 0 (the zero model)
always in the candidate grid so a correction can never score worse than
no correction.

Quadratic features use lower-triangular packing: for input x of length
r, the feature list is x_i * x_j for i = 0..r-1, j = 0..i, giving
r*(r+1)/2 columns appended after the r linear columns.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
import scipy.linalg

__all__ = [
    "DataRankOperators",
    "CorrectionModel",
    "quad_pairs",
    "pack_features",
    "build_design_matrix",
    "exact_velocity_correction",
    "exact_pressure_corrections_sup",
    "exact_pressure_corrections_ppe",
    "fit_truncated_lsq",
    "constrain_velocity_model",
    "fit_velocity_correction",
    "fit_pressure_sup",
    "fit_ppe_separate",
    "fit_ppe_joint",
    "default_rank_grid",
    "select_rank",
]


@dataclass
class DataRankOperators:
    """Rectangular Galerkin blocks evaluated against data-rank bases.

    Test rows run over the r working velocity modes (q pressure modes);
    trial columns run over the d (d_p) data-rank modes.  Leading
    (r, q)-blocks coincide with the square working-rank operators.
    """

    r: int
    q: int
    d: int
    d_p: int
    C_d: np.ndarray  # (r, d, d)
    H_d: np.ndarray  # (r, d_p)
    P_d: np.ndarray  # (q, d)
    D_d: np.ndarray  # (q, d_p)
    G_d: np.ndarray  # (q, d, d)


# ---------------------------------------------------------------------------
# exact corrections (coefficient space)


def _check_hist(X, cols, name):
    X = np.asarray(X, dtype=float)
    if X.ndim != 2 or X.shape[1] != cols:
        raise ValueError(f"{name} must be (M, {cols}), got {X.shape}")
    return X


def exact_velocity_correction(ops, a_hist):
    """Momentum closure series: unresolved-minus-resolved convection.

    a_hist is the (M, d) data-rank velocity coefficient history.  Row m
    is  -C_d : (a, a) + C_rrr : (a_r, a_r)  with a_r the leading r
    entries; identically zero when r = d.
    """
    A = _check_hist(a_hist, ops.d, "a_hist")
    Ar = A[:, : ops.r]
    Crrr = ops.C_d[:, : ops.r, : ops.r]
    full = np.einsum("ijk,mj,mk->mi", ops.C_d, A, A)
    res = np.einsum("ijk,mj,mk->mi", Crrr, Ar, Ar)
    return res - full


def exact_pressure_corrections_sup(ops, a_hist, b_hist):
    """Pressure-gradient and divergence closure series (tau_p1, tau_p2)."""
    A = _check_hist(a_hist, ops.d, "a_hist")
    B = _check_hist(b_hist, ops.d_p, "b_hist")
    Ar = A[:, : ops.r]
    Bq = B[:, : ops.q]
    tau_p1 = Bq @ ops.H_d[:, : ops.q].T - B @ ops.H_d.T
    tau_p2 = A @ ops.P_d.T - Ar @ ops.P_d[:, : ops.r].T
    return tau_p1, tau_p2


def exact_pressure_corrections_ppe(ops, a_hist, b_hist):
    """Poisson closure series (tau_D, tau_G)."""
    A = _check_hist(a_hist, ops.d, "a_hist")
    B = _check_hist(b_hist, ops.d_p, "b_hist")
    Ar = A[:, : ops.r]
    Bq = B[:, : ops.q]
    tau_D = B @ ops.D_d.T - Bq @ ops.D_d[:, : ops.q].T
    full = np.einsum("ijk,mj,mk->mi", ops.G_d, A, A)
    res = np.einsum("ijk,mj,mk->mi", ops.G_d[:, : ops.r, : ops.r], Ar, Ar)
    tau_G = full - res
    return tau_D, tau_G


# ---------------------------------------------------------------------------
# features and models


def quad_pairs(in_dim):
    """Packed quadratic index pairs (i, j), j <= i, in block order."""
    return [(i, j) for i in range(in_dim) for j in range(i + 1)]


def pack_features(X):
    """Quadratic monomial columns x_i * x_j (j <= i) of each row."""
    X = np.atleast_2d(np.asarray(X, dtype=float))
    cols = [X[:, i] * X[:, j] for i, j in quad_pairs(X.shape[1])]
    return np.stack(cols, axis=1) if cols else np.zeros((X.shape[0], 0))


def build_design_matrix(X, quadratic=True):
    """Linear columns followed by packed quadratic columns."""
    X = np.atleast_2d(np.asarray(X, dtype=float))
    if not quadratic:
        return X.copy()
    return np.hstack([X, pack_features(X)])


@dataclass
class CorrectionModel:
    """Fitted correction tau(x) = linear @ x + quadratic @ pack(x).

    input_spec records which reduced coefficients feed the model: "a"
    (velocity), "b" (pressure), or "ab" (concatenated [a, b]).  rank is
    the SVD truncation used in the fit; rank 0 is the zero model.
    """

    linear: np.ndarray                 # (out, in_dim)
    quadratic: Optional[np.ndarray]    # (out, in_dim*(in_dim+1)/2) or None
    input_spec: str
    rank: int

    @property
    def out_dim(self):
        return self.linear.shape[0]

    @property
    def in_dim(self):
        return self.linear.shape[1]

    @property
    def is_zero(self):
        return self.rank == 0

    def evaluate(self, x):
        out = self.linear @ x
        if self.quadratic is not None:
            out = out + self.quadratic @ pack_features(x[None, :])[0]
        return out

    def evaluate_history(self, X):
        """Rows of predictions for rows of inputs (M, in_dim) -> (M, out)."""
        out = X @ self.linear.T
        if self.quadratic is not None:
            out = out + pack_features(X) @ self.quadratic.T
        return out

    def jacobian(self, x):
        jac = self.linear.copy()
        if self.quadratic is not None:
            T = self.unpack_quadratic()
            jac = jac + 2.0 * np.einsum("oij,j->oi", T, x)
        return jac

    def unpack_quadratic(self):
        """Full (out, in, in) tensor, symmetric in its trailing indices."""
        r = self.in_dim
        T = np.zeros((self.out_dim, r, r))
        if self.quadratic is None:
            return T
        for col, (i, j) in enumerate(quad_pairs(r)):
            if i == j:
                T[:, i, i] = self.quadratic[:, col]
            else:
                T[:, i, j] = 0.5 * self.quadratic[:, col]
                T[:, j, i] = 0.5 * self.quadratic[:, col]
        return T

    @staticmethod
    def pack_quadratic(T):
        """Inverse of unpack_quadratic for tensors symmetric in (i, j)."""
        out, r, _ = T.shape
        packed = np.empty((out, r * (r + 1) // 2))
        for col, (i, j) in enumerate(quad_pairs(r)):
            packed[:, col] = T[:, i, i] if i == j else T[:, i, j] + T[:, j, i]
        return packed

    @staticmethod
    def zero(out_dim, in_dim, input_spec, quadratic=True):
        nq = in_dim * (in_dim + 1) // 2
        return CorrectionModel(
            linear=np.zeros((out_dim, in_dim)),
            quadratic=np.zeros((out_dim, nq)) if quadratic else None,
            input_spec=input_spec,
            rank=0,
        )


# ---------------------------------------------------------------------------
# least squares


def fit_truncated_lsq(design, targets, rank):
    """Minimum-norm least squares from the leading `rank` singular triplets.

    Returns the (out, n_cols) coefficient matrix O with
    targets ~ design @ O.T.  rank 0 gives the zero matrix; ranks beyond
    the number of positive singular values are clamped.
    """
    D = np.asarray(design, dtype=float)
    T = np.asarray(targets, dtype=float)
    if D.ndim != 2 or T.ndim != 2 or D.shape[0] != T.shape[0]:
        raise ValueError("design and targets must share their row count")
    if rank < 0:
        raise ValueError("rank must be nonnegative")
    if rank == 0 or D.shape[1] == 0:
        return np.zeros((T.shape[1], D.shape[1]))
    U, s, Vt = scipy.linalg.svd(D, full_matrices=False)
    npos = int(np.count_nonzero(s > 0))
    k = min(rank, npos)
    if k == 0:
        return np.zeros((T.shape[1], D.shape[1]))
    coeff = (Vt[:k].T / s[:k]) @ (U[:, :k].T @ T)  # (n_cols, out)
    return coeff.T


def residual_fro(design, targets, coeff):
    """Frobenius norm of targets - design @ coeff.T."""
    return float(np.linalg.norm(targets - design @ coeff.T))


def fit_velocity_correction(a_hist_r, tau_u, rank, constrained=False):
    """Linear + quadratic momentum correction model on velocity inputs."""
    A = np.asarray(a_hist_r, dtype=float)
    D = build_design_matrix(A, quadratic=True)
    O = fit_truncated_lsq(D, np.asarray(tau_u, dtype=float), rank)
    r = A.shape[1]
    model = CorrectionModel(
        linear=O[:, :r].copy(),
        quadratic=O[:, r:].copy(),
        input_spec="a",
        rank=int(rank),
    )
    if constrained:
        model = constrain_velocity_model(model)
    return model


def constrain_velocity_model(model):
    """Closed-form projection onto the stability-compatible set.

    The symmetric part of the linear map is eigen-clipped to a
    nonpositive spectrum, and the fully symmetric part of the unpacked
    quadratic tensor (the only part that contributes to the cubic energy
    form a . tau(a)) is removed.  Both are Frobenius-orthogonal
    projections, so a feasible model passes through unchanged.
    """
    if model.out_dim != model.in_dim:
        raise ValueError("constraint projection needs a square model")
    A = model.linear
    S = 0.5 * (A + A.T)
    lam, V = np.linalg.eigh(S)
    S_neg = (V * np.minimum(lam, 0.0)) @ V.T
    linear = S_neg + 0.5 * (A - A.T)

    quadratic = model.quadratic
    if quadratic is not None:
        T = model.unpack_quadratic()
        sym = np.zeros_like(T)
        for perm in ((0, 1, 2), (0, 2, 1), (1, 0, 2), (1, 2, 0), (2, 0, 1), (2, 1, 0)):
            sym += np.transpose(T, perm)
        sym /= 6.0
        quadratic = CorrectionModel.pack_quadratic(T - sym)
    return CorrectionModel(linear, quadratic, model.input_spec, model.rank)


def fit_pressure_sup(b_hist, a_hist_r, tau_p1, tau_p2, rank, mode="joint"):
    """Linear pressure-correction models for the constrained formulation.

    tau_p1 ~ Hhat @ b (momentum rows), tau_p2 ~ Phat @ a (continuity
    rows).  mode "separate" solves two independent problems at the given
    rank; mode "joint" solves one least squares over the block-diagonal
    stacked system with a single shared truncation rank, which matches
    the separate solves exactly at full rank.
    """
    B = np.asarray(b_hist, dtype=float)
    A = np.asarray(a_hist_r, dtype=float)
    T1 = np.asarray(tau_p1, dtype=float)
    T2 = np.asarray(tau_p2, dtype=float)
    M, q = B.shape
    r = A.shape[1]
    if mode == "separate":
        O1 = fit_truncated_lsq(B, T1, rank)
        O2 = fit_truncated_lsq(A, T2, rank)
    elif mode == "joint":
        D = np.zeros((2 * M, q + r))
        D[:M, :q] = B
        D[M:, q:] = A
        T = np.zeros((2 * M, r + q))
        T[:M, :r] = T1
        T[M:, r:] = T2
        O = fit_truncated_lsq(D, T, rank)
        O1 = O[:r, :q]
        O2 = O[r:, q:]
    else:
        raise ValueError("mode must be 'separate' or 'joint'")
    m1 = CorrectionModel(np.ascontiguousarray(O1), None, "b", int(rank))
    m2 = CorrectionModel(np.ascontiguousarray(O2), None, "a", int(rank))
    return m1, m2


def fit_ppe_separate(b_hist, a_hist, tau_D, tau_G, rank_D, rank_G, d_quadratic=True):
    """Independent Poisson correction models.

    tau_D is fitted on pressure coefficients (linear, optionally plus a
    quadratic term); tau_G on velocity coefficients (linear plus
    quadratic).
    """
    B = np.asarray(b_hist, dtype=float)
    A = np.asarray(a_hist, dtype=float)
    q = B.shape[1]
    r = A.shape[1]
    DD = build_design_matrix(B, quadratic=d_quadratic)
    OD = fit_truncated_lsq(DD, np.asarray(tau_D, dtype=float), rank_D)
    model_D = CorrectionModel(
        OD[:, :q].copy(), OD[:, q:].copy() if d_quadratic else None, "b", int(rank_D)
    )
    DG = build_design_matrix(A, quadratic=True)
    OG = fit_truncated_lsq(DG, np.asarray(tau_G, dtype=float), rank_G)
    model_G = CorrectionModel(OG[:, :r].copy(), OG[:, r:].copy(), "a", int(rank_G))
    return model_D, model_G


def _scatter_ab_quadratic(packed_sub, sub_index, n_ab, out_dim):
    """Place packed coefficients over a subset of ab into the full ab
    packing (zeros elsewhere).  sub_index maps subset positions to ab
    positions."""
    pairs_ab = quad_pairs(n_ab)
    pos = {pq: c for c, pq in enumerate(pairs_ab)}
    full = np.zeros((out_dim, len(pairs_ab)))
    sub_dim = len(sub_index)
    for col, (i, j) in enumerate(quad_pairs(sub_dim)):
        gi, gj = sub_index[i], sub_index[j]
        key = (gi, gj) if gi >= gj else (gj, gi)
        full[:, pos[key]] = packed_sub[:, col]
    return full


def fit_ppe_joint(case, a_hist, b_hist, tau_u, tau_D, tau_G, rank):
    """Combined Poisson (and momentum) correction fits on ab = [a, b].

    case 1: tau_D + tau_G ~ Dtilde @ b + a' Btilde a  (linear in b,
            quadratic in a, no cross terms).
    case 2: tau_D + tau_G ~ full linear + quadratic ansatz in ab.
    case 3: the stacked target [tau_u, tau_D + tau_G] with the full ab
            ansatz; the first r output rows are the momentum correction,
            the rest the Poisson correction.

    Returns a single CorrectionModel with input_spec "ab"; for case 3
    its output dimension is r + q.
    """
    A = np.asarray(a_hist, dtype=float)
    B = np.asarray(b_hist, dtype=float)
    r, q = A.shape[1], B.shape[1]
    n_ab = r + q
    AB = np.hstack([A, B])
    TDG = np.asarray(tau_D, dtype=float) + np.asarray(tau_G, dtype=float)

    if case == 1:
        D = np.hstack([B, pack_features(A)])
        O = fit_truncated_lsq(D, TDG, rank)
        linear = np.zeros((q, n_ab))
        linear[:, r:] = O[:, :q]
        quadratic = _scatter_ab_quadratic(O[:, q:], list(range(r)), n_ab, q)
        return CorrectionModel(linear, quadratic, "ab", int(rank))
    if case == 2:
        D = build_design_matrix(AB, quadratic=True)
        O = fit_truncated_lsq(D, TDG, rank)
        return CorrectionModel(O[:, :n_ab].copy(), O[:, n_ab:].copy(), "ab", int(rank))
    if case == 3:
        if tau_u is None:
            raise ValueError("case 3 needs the velocity correction target")
        T = np.hstack([np.asarray(tau_u, dtype=float), TDG])
        D = build_design_matrix(AB, quadratic=True)
        O = fit_truncated_lsq(D, T, rank)
        return CorrectionModel(O[:, :n_ab].copy(), O[:, n_ab:].copy(), "ab", int(rank))
    raise ValueError("case must be 1, 2, or 3")


# ---------------------------------------------------------------------------
# rank selection


def default_rank_grid(n_cols):
    """0..min(20, n_cols), then every 5th column count, then full rank."""
    grid = set(range(0, min(20, n_cols) + 1))
    grid.update(range(20, n_cols + 1, 5))
    grid.add(n_cols)
    return sorted(grid)


def select_rank(candidates, fit_fn, score_fn, jobs=1):
    """Grid search over truncation ranks.

    fit_fn(rank) builds the model(s); score_fn(models) replays the
    corrected reduced model and returns the training-window solution
    error (float; +inf for a diverged run).  Candidates are scored in
    ascending rank order and the smallest rank achieving the minimum
    wins, so a tie (including with rank 0, which must be present to
    guarantee non-degradation) resolves deterministically regardless of
    evaluation parallelism.

    Returns (best_rank, best_models, table) where table lists
    (rank, score) pairs.
    """
    cand = sorted(set(int(c) for c in candidates))
    if cand[0] < 0:
        raise ValueError("ranks must be nonnegative")

    def run(rank):
        models = fit_fn(rank)
        score = score_fn(models)
        if not np.isfinite(score):
            score = np.inf
        return rank, models, float(score)

    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as ex:
            results = list(ex.map(run, cand))
    else:
        results = [run(rank) for rank in cand]

    best = None
    for rank, models, score in results:
        if best is None or score < best[2]:
            best = (rank, models, score)
    table = [(rank, score) for rank, _, score in results]
    return best[0], best[1], table
