"""Nonlinear least-squares refinement of cameras, velocities and points.

The normal equations have a three-segment block structure over the stacked
parameter vector [velocities | poses | points]:

    [ R  S  T ] [ d_rs ]     [ t ]
    [ S' U  W ] [ d_gs ]  = -[ u ]
    [ T' W' V ] [ d_p  ]     [ v ]

R, U, S are block diagonal per camera (6x6), V per point (3x3); T and W
couple cameras to the points they observe.  Three interchangeable linear
back-ends solve a damped version of this system:

* ``dense``   -- materialize everything, one Cholesky (oracle back-end).
* ``schur1``  -- eliminate the points, solve the 12C camera system whole.
* ``schur2``  -- eliminate the points, then eliminate the poses through a
  second Schur complement and solve the velocity system first, back-
  substituting poses and points.

All three produce the same step up to roundoff; they differ in runtime.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import LinAlgError, cho_factor, cho_solve, solve_triangular
from scipy.linalg import blas as _blas

from . import _batch
from .errors import (
    CheiralityViolation,
    InitializationInfeasible,
    NotPositiveDefinite,
)
from .geometry import so3_exp_batch
from .problem import NoisePrior, Problem

_DIAG_FLOOR = 1e-12
_MAX_STEP_RETRIES = 40
_LAMBDA_CEILING = 1e16

BACKENDS = ("dense", "schur1", "schur2")


@dataclass
class SolverConfig:
    max_iterations: int = 50
    cost_tolerance: float = 1e-10       # relative decrease per accepted step
    gradient_tolerance: float = 1e-10   # infinity norm of J^T e
    lm_initial_lambda: float = 1e-4     # 0 disables damping (pure Gauss-Newton)
    backend: str = "schur2"
    method: str = "nw"

    def __post_init__(self):
        if self.backend not in BACKENDS:
            raise ValueError(f"unknown backend {self.backend!r}")
        if self.method not in _batch.METHODS:
            raise ValueError(f"unknown method {self.method!r}")
        if self.max_iterations <= 0:
            raise ValueError("max_iterations must be positive")
        if self.cost_tolerance <= 0 or self.gradient_tolerance <= 0:
            raise ValueError("tolerances must be positive")
        if self.lm_initial_lambda < 0:
            raise ValueError("damping must be non-negative")


@dataclass
class BlockHessian:
    """Block-sparse Gauss-Newton Hessian J^T J and gradient J^T e.

    ``T_blocks``/``W_blocks`` are stored per observation; their shared
    sparsity pattern is (cam_idx, pt_idx).  For the motion-free method the
    velocity segment is absent and R/S/T are empty.
    """

    n_cameras: int
    n_points: int
    has_rs: bool
    cam_idx: np.ndarray
    pt_idx: np.ndarray
    R_blocks: np.ndarray  # (C,6,6) velocity-velocity
    U_blocks: np.ndarray  # (C,6,6) pose-pose
    S_blocks: np.ndarray  # (C,6,6) velocity-pose
    V_blocks: np.ndarray  # (P,3,3) point-point
    T_blocks: np.ndarray  # (N,6,3) velocity-point
    W_blocks: np.ndarray  # (N,6,3) pose-point
    grad_t: np.ndarray    # (6C,) velocity gradient segment
    grad_u: np.ndarray    # (6C,) pose gradient segment
    grad_v: np.ndarray    # (3P,) point gradient segment
    pairs_unique: bool = True

    @property
    def n_rs(self) -> int:
        return 6 * self.n_cameras if self.has_rs else 0

    @property
    def n_total(self) -> int:
        return self.n_rs + 6 * self.n_cameras + 3 * self.n_points

    def gradient(self) -> np.ndarray:
        parts = [self.grad_t] if self.has_rs else []
        return np.concatenate(parts + [self.grad_u, self.grad_v])


class _SegmentSum:
    """Reduceat-based scatter-sum, precomputed for a static index array."""

    def __init__(self, idx: np.ndarray, n: int):
        self.n = n
        self.order = np.argsort(idx, kind="stable")
        sorted_idx = idx[self.order]
        starts = np.searchsorted(sorted_idx, np.arange(n))
        self.counts = np.bincount(idx, minlength=n)
        self.bounds = np.searchsorted(sorted_idx, np.arange(n + 1))
        self.starts = np.minimum(starts, max(len(idx) - 1, 0))

    def __call__(self, values: np.ndarray) -> np.ndarray:
        tail = values.shape[1:]
        if self.n == 0:
            return np.zeros((0,) + tail)
        flat = values.reshape(len(values), -1)
        if len(flat) == 0:
            return np.zeros((self.n,) + tail)
        out = np.add.reduceat(flat[self.order], self.starts, axis=0)
        out[self.counts == 0] = 0.0
        return out.reshape((self.n,) + tail)

    def grams(self, A: np.ndarray, B: np.ndarray | None = None) -> np.ndarray:
        """Per-segment sums of a_n^T b_n over the two rows of each item.

        ``A`` is (N,2,ka), ``B`` (N,2,kb); returns (n, ka, kb) computed as
        one small matrix product per segment, skipping the (N,ka,kb)
        intermediate entirely.
        """
        ka = A.shape[2]
        if self.n == 0:
            return np.zeros((0, ka, ka if B is None else B.shape[2]))
        A_s = A[self.order].reshape(-1, ka)
        B_s = A_s if B is None else B[self.order].reshape(-1, B.shape[2])
        out = np.empty((self.n, ka, B_s.shape[1]))
        bounds = 2 * self.bounds
        for j in range(self.n):
            lo, hi = bounds[j], bounds[j + 1]
            if lo == hi:
                out[j] = 0.0
            else:
                np.dot(A_s[lo:hi].T, B_s[lo:hi], out=out[j])
        return out


class _ObsIndex:
    """Static per-problem indexing shared by every assembly pass."""

    def __init__(self, packed: _batch.PackedProblem):
        self.by_cam = _SegmentSum(packed.cam_idx, packed.n_cameras)
        self.by_pt = _SegmentSum(packed.pt_idx, packed.n_points)
        # unique (camera, point) pairs allow plain fancy-index scatter
        key = packed.cam_idx * max(packed.n_points, 1) + packed.pt_idx
        self.unique_pairs = len(np.unique(key)) == len(key)
        self.rows6 = 6 * packed.cam_idx[:, None] + np.arange(6)[None, :]
        self.cols3 = 3 * packed.pt_idx[:, None] + np.arange(3)[None, :]


def _assemble_packed(packed: _batch.PackedProblem, index: _ObsIndex):
    """BlockHessian + gradient + cost at the packed parameters."""
    e, jr, jg, jp, valid = _batch.residuals_and_jacobians(packed)
    if not valid.all():
        bad = int(np.flatnonzero(~valid)[0])
        raise CheiralityViolation(f"observation {bad} is behind its camera")
    cost = 0.5 * float(np.einsum("ni,ni->", e, e))
    has_rs = jr is not None
    C, P = packed.n_cameras, packed.n_points
    N = len(e)

    from . import _kernels

    if _kernels.HAVE_NUMBA:
        R = np.zeros((C, 6, 6))
        U = np.zeros((C, 6, 6))
        S = np.zeros((C, 6, 6))
        V = np.zeros((P, 3, 3))
        T = np.empty((N, 6, 3)) if has_rs else np.zeros((N, 6, 3))
        W = np.empty((N, 6, 3))
        grad_t = np.zeros((C, 6))
        grad_u = np.zeros((C, 6))
        grad_v = np.zeros((P, 3))
        _kernels.accumulate_kernel(
            packed.cam_idx, packed.pt_idx, e,
            jr if has_rs else np.empty((0, 2, 6)), jg, jp, has_rs,
            R, U, S, V, T, W, grad_t, grad_u, grad_v,
        )
        grad_t, grad_u, grad_v = grad_t.reshape(-1), grad_u.reshape(-1), grad_v.reshape(-1)
    else:
        def pair_outer(A, B):
            # sum over the two residual rows of a_n^T b_n, per observation
            return (A[:, 0, :, None] * B[:, 0, None, :]
                    + A[:, 1, :, None] * B[:, 1, None, :])

        def dotted(A):
            return A[:, 0, :] * e[:, 0, None] + A[:, 1, :] * e[:, 1, None]

        U = index.by_cam.grams(jg)
        V = index.by_pt.grams(jp)
        W = pair_outer(jg, jp)
        grad_u = index.by_cam(dotted(jg)).reshape(-1)
        grad_v = index.by_pt(dotted(jp)).reshape(-1)
        if has_rs:
            R = index.by_cam.grams(jr)
            S = index.by_cam.grams(jr, jg)
            T = pair_outer(jr, jp)
            grad_t = index.by_cam(dotted(jr)).reshape(-1)
        else:
            R = np.zeros((C, 6, 6))
            S = np.zeros((C, 6, 6))
            T = np.zeros((N, 6, 3))
            grad_t = np.zeros(6 * C)

    H = BlockHessian(
        n_cameras=C, n_points=P, has_rs=has_rs,
        cam_idx=packed.cam_idx, pt_idx=packed.pt_idx,
        R_blocks=R, U_blocks=U, S_blocks=S, V_blocks=V,
        T_blocks=T, W_blocks=W,
        grad_t=grad_t, grad_u=grad_u, grad_v=grad_v,
        pairs_unique=index.unique_pairs,
    )
    return H, cost


def assemble(problem: Problem, method: str = "nw"):
    """Accumulate J^T J block-wise and J^T e without materializing J.

    Returns ``(BlockHessian, cost)`` with cost the half squared norm of the
    stacked method residual.
    """
    packed = _batch.PackedProblem.pack(problem, method)
    return _assemble_packed(packed, _ObsIndex(packed))


def _damped(blocks: np.ndarray, lam: float) -> np.ndarray:
    """Add lam * max(diag, floor) to the diagonal of a block stack."""
    if lam == 0.0:
        return blocks
    out = blocks.copy()
    k = blocks.shape[-1]
    idx = np.arange(k)
    diag = out[:, idx, idx]
    out[:, idx, idx] = diag + lam * np.maximum(diag, _DIAG_FLOOR)
    return out


def _block_diag_embed(blocks: np.ndarray, out: np.ndarray, offset: int) -> None:
    k = blocks.shape[-1]
    for j in range(len(blocks)):
        s = offset + k * j
        out[s:s + k, s:s + k] = blocks[j]


def densify(H: BlockHessian, lam: float = 0.0) -> np.ndarray:
    """Materialize the full damped normal matrix (tests and dense back-end)."""
    n = H.n_total
    n_rs = H.n_rs
    n_gs = 6 * H.n_cameras
    M = np.zeros((n, n))
    _block_diag_embed(_damped(H.U_blocks, lam), M, n_rs)
    _block_diag_embed(_damped(H.V_blocks, lam), M, n_rs + n_gs)
    rows_g = n_rs + 6 * H.cam_idx[:, None] + np.arange(6)[None, :]
    cols_p = n_rs + n_gs + 3 * H.pt_idx[:, None] + np.arange(3)[None, :]
    if H.pairs_unique:
        M[rows_g[:, :, None], cols_p[:, None, :]] = H.W_blocks
    else:
        np.add.at(M, (rows_g[:, :, None], cols_p[:, None, :]), H.W_blocks)
    if H.has_rs:
        _block_diag_embed(_damped(H.R_blocks, lam), M, 0)
        rows_r = 6 * H.cam_idx[:, None] + np.arange(6)[None, :]
        if H.pairs_unique:
            M[rows_r[:, :, None], cols_p[:, None, :]] = H.T_blocks
        else:
            np.add.at(M, (rows_r[:, :, None], cols_p[:, None, :]), H.T_blocks)
        for j in range(H.n_cameras):
            M[6 * j:6 * j + 6, n_rs + 6 * j:n_rs + 6 * j + 6] = H.S_blocks[j]
    iu = np.triu_indices(n, 1)
    M[(iu[1], iu[0])] = M[iu]
    return M


def solve_dense(H: BlockHessian, lam: float = 0.0, timings: dict | None = None) -> np.ndarray:
    """Oracle back-end: full Cholesky of the damped system."""
    t0 = time.perf_counter()
    M = densify(H, lam)
    g = H.gradient()
    try:
        c = cho_factor(M, lower=True, overwrite_a=True, check_finite=False)
        delta = cho_solve(c, -g, check_finite=False)
    except LinAlgError as exc:
        raise NotPositiveDefinite(str(exc)) from None
    if timings is not None:
        timings["reduced_solve"] = timings.get("reduced_solve", 0.0) + time.perf_counter() - t0
    return delta


def _cholesky_blocks(blocks: np.ndarray) -> np.ndarray:
    try:
        return np.linalg.cholesky(blocks)
    except np.linalg.LinAlgError as exc:
        raise NotPositiveDefinite(f"point block: {exc}") from None


def _inv_lower3(L: np.ndarray) -> np.ndarray:
    """Closed-form inverses of a stack of 3x3 lower-triangular matrices."""
    a = L[:, 0, 0]
    b = L[:, 1, 0]
    c = L[:, 1, 1]
    d = L[:, 2, 0]
    e = L[:, 2, 1]
    f = L[:, 2, 2]
    out = np.zeros_like(L)
    out[:, 0, 0] = 1.0 / a
    out[:, 1, 0] = -b / (a * c)
    out[:, 1, 1] = 1.0 / c
    out[:, 2, 0] = (b * e - c * d) / (a * c * f)
    out[:, 2, 1] = -e / (c * f)
    out[:, 2, 2] = 1.0 / f
    return out


class _PointElimination:
    """Shared first stage: eliminate the point blocks.

    Produces the lower triangle of the camera-system Schur complement and
    the reduced gradient, plus what back-substitution needs.
    """

    def __init__(self, H: BlockHessian, lam: float):
        C = H.n_cameras
        n_rs = H.n_rs
        self.H = H
        Vd = _damped(H.V_blocks, lam)
        Lv = _cholesky_blocks(Vd)
        Linv = _inv_lower3(Lv)
        self.Vinv = np.einsum("pji,pjk->pik", Linv, Linv)

        # dense camera-to-point coupling, zero where unobserved
        n_cols = 3 * H.n_points
        T_mat = np.zeros((n_rs, n_cols))
        W_mat = np.zeros((6 * C, n_cols))
        rows6 = 6 * H.cam_idx[:, None, None] + np.arange(6)[None, :, None]
        cols3 = 3 * H.pt_idx[:, None, None] + np.arange(3)[None, None, :]
        if H.pairs_unique:
            W_mat[rows6, cols3] = H.W_blocks
            if H.has_rs:
                T_mat[rows6, cols3] = H.T_blocks
        else:
            np.add.at(W_mat, (rows6, cols3), H.W_blocks)
            if H.has_rs:
                np.add.at(T_mat, (rows6, cols3), H.T_blocks)
        self.T_mat, self.W_mat = T_mat, W_mat

        # half-whitened couplings: M V^-1 M^T computed as a rank-3P update
        LinvT = np.transpose(Linv, (0, 2, 1))
        stacked = np.vstack([T_mat, W_mat]) if H.has_rs else W_mat
        A = np.einsum("kpi,pij->kpj", stacked.reshape(-1, H.n_points, 3), LinvT)
        A = A.reshape(stacked.shape)

        n_cam = n_rs + 6 * C
        Sp = np.zeros((n_cam, n_cam))
        _block_diag_embed(_damped(H.U_blocks, lam), Sp, n_rs)
        if H.has_rs:
            _block_diag_embed(_damped(H.R_blocks, lam), Sp, 0)
            for j in range(C):
                # lower triangle: pose-velocity block holds S^T
                Sp[n_rs + 6 * j:n_rs + 6 * j + 6, 6 * j:6 * j + 6] = H.S_blocks[j].T
        # Sp(lower) -= A A^T
        G = _blas.dsyrk(1.0, A, lower=1)
        Sp -= G
        self.Sp_lower = Sp
        self.n_rs = n_rs
        self.n_cam = n_cam

        vres = H.grad_v.reshape(-1, 3)
        self.Vinv_v = np.einsum("pij,pj->pi", self.Vinv, vres).reshape(-1)
        self.u_red = H.grad_u - W_mat @ self.Vinv_v
        self.t_red = (H.grad_t - T_mat @ self.Vinv_v) if H.has_rs else np.zeros(0)

    def back_substitute(self, delta_rs: np.ndarray, delta_gs: np.ndarray) -> np.ndarray:
        rhs = self.H.grad_v + self.W_mat.T @ delta_gs
        if self.H.has_rs:
            rhs = rhs + self.T_mat.T @ delta_rs
        dp = -np.einsum("pij,pj->pi", self.Vinv, rhs.reshape(-1, 3))
        return dp.reshape(-1)


def solve_schur_one_stage(H: BlockHessian, lam: float = 0.0, timings: dict | None = None) -> np.ndarray:
    """Eliminate points, solve the whole camera system with one Cholesky."""
    t0 = time.perf_counter()
    elim = _PointElimination(H, lam)
    t1 = time.perf_counter()
    rhs = np.concatenate([elim.t_red, elim.u_red])
    try:
        c = cho_factor(elim.Sp_lower, lower=True, overwrite_a=True, check_finite=False)
        d_cam = cho_solve(c, -rhs, check_finite=False)
    except LinAlgError as exc:
        raise NotPositiveDefinite(str(exc)) from None
    t2 = time.perf_counter()
    d_rs, d_gs = d_cam[:elim.n_rs], d_cam[elim.n_rs:]
    d_p = elim.back_substitute(d_rs, d_gs)
    t3 = time.perf_counter()
    if timings is not None:
        timings["schur_construction"] = timings.get("schur_construction", 0.0) + t1 - t0
        timings["reduced_solve"] = timings.get("reduced_solve", 0.0) + t2 - t1
        timings["back_substitution"] = timings.get("back_substitution", 0.0) + t3 - t2
    return np.concatenate([d_rs, d_gs, d_p])


def solve_schur_two_stage(H: BlockHessian, lam: float = 0.0, timings: dict | None = None) -> np.ndarray:
    """Eliminate points, then poses; solve velocities first and cascade back.

    The pose block factor is reused for the second complement, the reduced
    gradient and the pose back-substitution; the pose-system inverse is never
    formed.
    """
    t0 = time.perf_counter()
    elim = _PointElimination(H, lam)
    n_rs = elim.n_rs
    if not H.has_rs:
        # no velocity segment: the cascade is just the pose solve
        t1 = time.perf_counter()
        try:
            cu = cho_factor(elim.Sp_lower, lower=True, overwrite_a=True, check_finite=False)
            d_gs = cho_solve(cu, -elim.u_red, check_finite=False)
        except LinAlgError as exc:
            raise NotPositiveDefinite(str(exc)) from None
        t2 = time.perf_counter()
        d_p = elim.back_substitute(np.zeros(0), d_gs)
        t3 = time.perf_counter()
        if timings is not None:
            timings["schur_construction"] = timings.get("schur_construction", 0.0) + t1 - t0
            timings["reduced_solve"] = timings.get("reduced_solve", 0.0) + t2 - t1
            timings["back_substitution"] = timings.get("back_substitution", 0.0) + t3 - t2
        return np.concatenate([d_gs, d_p])

    Rstar = elim.Sp_lower[:n_rs, :n_rs]
    Ustar = elim.Sp_lower[n_rs:, n_rs:]
    St_T = elim.Sp_lower[n_rs:, :n_rs]  # S*^T, stored fully
    try:
        cu = cho_factor(Ustar, lower=True, check_finite=False)
    except LinAlgError as exc:
        raise NotPositiveDefinite(f"pose complement: {exc}") from None
    # the factor array keeps stale data in its upper triangle; the
    # triangular solves below only read the lower part
    Lu = cu[0]
    Y = solve_triangular(Lu, St_T, lower=True, check_finite=False)
    S_rs = Rstar - _blas.dsyrk(1.0, Y, trans=1, lower=1)
    t_star = elim.t_red - Y.T @ solve_triangular(Lu, elim.u_red, lower=True, check_finite=False)
    t1 = time.perf_counter()
    try:
        cr = cho_factor(S_rs, lower=True, overwrite_a=True, check_finite=False)
        d_rs = cho_solve(cr, -t_star, check_finite=False)
    except LinAlgError as exc:
        raise NotPositiveDefinite(f"velocity complement: {exc}") from None
    d_gs = cho_solve(cu, -elim.u_red - St_T @ d_rs, check_finite=False)
    t2 = time.perf_counter()
    d_p = elim.back_substitute(d_rs, d_gs)
    t3 = time.perf_counter()
    if timings is not None:
        timings["schur_construction"] = timings.get("schur_construction", 0.0) + t1 - t0
        timings["reduced_solve"] = timings.get("reduced_solve", 0.0) + t2 - t1
        timings["back_substitution"] = timings.get("back_substitution", 0.0) + t3 - t2
    return np.concatenate([d_rs, d_gs, d_p])


_BACKEND_FUNCS = {
    "dense": solve_dense,
    "schur1": solve_schur_one_stage,
    "schur2": solve_schur_two_stage,
}


def _apply_delta(packed: _batch.PackedProblem, delta: np.ndarray) -> _batch.PackedProblem:
    from dataclasses import replace as dc_replace

    C, P = packed.n_cameras, packed.n_points
    has_rs = packed.method != "gsba"
    n_rs = 6 * C if has_rs else 0
    d_gs = delta[n_rs:n_rs + 6 * C].reshape(C, 6)
    d_p = delta[n_rs + 6 * C:].reshape(P, 3)
    R0 = so3_exp_batch(d_gs[:, :3]) @ packed.R0
    t0 = packed.t0 + d_gs[:, 3:]
    if has_rs:
        d_rs = delta[:n_rs].reshape(C, 6)
        omega = packed.omega + d_rs[:, :3]
        d = packed.d + d_rs[:, 3:]
    else:
        omega, d = packed.omega.copy(), packed.d.copy()
    return dc_replace(packed, R0=R0, t0=t0, omega=omega, d=d,
                      points=packed.points + d_p)


def apply_update(problem: Problem, delta: np.ndarray, method: str = "nw") -> Problem:
    """One parameter step: R0 <- Exp(dxi) R0 (left), additive elsewhere."""
    packed = _batch.PackedProblem.pack(problem, method)
    updated = _apply_delta(packed, np.asarray(delta, dtype=float))
    return Problem(
        cameras=updated.cameras(),
        points=updated.points,
        observations=problem.observations.copy(),
        prior=NoisePrior(problem.prior.Sigma.copy()),
    )


@dataclass
class SolveReport:
    """Everything a run produces besides the refined parameters."""

    method: str
    backend: str
    costs: list[float]              # cost after each accepted step, [0] = initial
    termination: str
    problem: Problem                # refined parameters
    timings: dict[str, float] = field(default_factory=dict)
    gradient_inf: float = np.nan
    final_lambda: float = np.nan

    @property
    def n_iterations(self) -> int:
        return len(self.costs) - 1

    @property
    def final_cost(self) -> float:
        return self.costs[-1]

    @property
    def total_time(self) -> float:
        return sum(self.timings.values())


def optimize(problem: Problem, config: SolverConfig | None = None) -> SolveReport:
    """Damped Gauss-Newton loop.

    A trial step is accepted when it decreases the cost; rejection scales
    the damping up tenfold, acceptance relaxes it tenfold.  With zero
    initial damping the loop degenerates to plain Gauss-Newton and accepts
    every finite step.  Terminates on the iteration budget, on a relative
    cost decrease below ``cost_tolerance``, or on a gradient infinity norm
    below ``gradient_tolerance``.
    """
    config = config or SolverConfig()
    backend = _BACKEND_FUNCS[config.backend]
    timings: dict[str, float] = {}

    packed = _batch.PackedProblem.pack(problem, config.method)
    index = _ObsIndex(packed)

    t0 = time.perf_counter()
    try:
        H, cost = _assemble_packed(packed, index)
    except CheiralityViolation as exc:
        raise InitializationInfeasible(str(exc)) from None
    if not np.isfinite(cost):
        raise InitializationInfeasible(f"initial cost {cost!r}")
    timings["assembly"] = time.perf_counter() - t0

    lam = config.lm_initial_lambda
    costs = [cost]
    termination = "max_iterations"
    g_inf = float(np.abs(H.gradient()).max()) if H.n_total else 0.0

    for _ in range(config.max_iterations):
        if g_inf < config.gradient_tolerance:
            termination = "converged_gradient"
            break

        accepted = False
        trial_packed, trial_cost = None, np.inf
        for _retry in range(_MAX_STEP_RETRIES):
            try:
                delta = backend(H, lam, timings)
            except NotPositiveDefinite:
                lam = max(lam, _DIAG_FLOOR) * 10.0
                if lam > _LAMBDA_CEILING:
                    break
                continue
            trial_packed = _apply_delta(packed, delta)
            trial_cost = _batch.cost(trial_packed)
            if config.lm_initial_lambda == 0.0:
                accepted = np.isfinite(trial_cost)
                break
            if trial_cost < cost:
                accepted = True
                break
            lam *= 10.0
            if lam > _LAMBDA_CEILING:
                break
        if not accepted:
            termination = "stalled"
            break

        packed = trial_packed
        prev, cost = cost, trial_cost
        costs.append(cost)
        if lam > 0.0:
            lam /= 10.0

        t0 = time.perf_counter()
        H, _ = _assemble_packed(packed, index)
        timings["assembly"] += time.perf_counter() - t0
        g_inf = float(np.abs(H.gradient()).max())

        if prev - cost < config.cost_tolerance * max(prev, 1e-300):
            termination = "converged_cost"
            break

    refined = Problem(
        cameras=packed.cameras(),
        points=packed.points.copy(),
        observations=problem.observations.copy(),
        prior=NoisePrior(problem.prior.Sigma.copy()),
    )
    return SolveReport(
        method=config.method,
        backend=config.backend,
        costs=costs,
        termination=termination,
        problem=refined,
        timings=timings,
        gradient_inf=g_inf,
        final_lambda=lam,
    )
