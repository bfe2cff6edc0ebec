"""Error metrics with gauge alignment, plus the sweep drivers.

Monocular reconstruction leaves a global similarity undetermined, so the
point metric aligns the estimated points to the truth with a closed-form
Sim(3) fit before taking the RMSE.  Trial rows additionally report pose
errors in the gauge fixed by that same alignment, which makes them
meaningful for solutions that drifted along the gauge during optimization.
The bare :func:`metric_rot` / :func:`metric_trans` operations compare
poses as given.
"""

from __future__ import annotations

import dataclasses
import json
import time
from dataclasses import dataclass, replace

import numpy as np

from .errors import (
    DegenerateConfiguration,
    DimensionMismatch,
    RsbaError,
    ZeroTranslation,
)
from .problem import Problem
from .solver import SolverConfig, optimize
from .synthetic import (
    GroundTruth,
    PerturbMagnitudes,
    SceneConfig,
    add_noise,
    generate_scene,
    perturb_initialization,
)

SWEEP_KINDS = ("speed", "noise", "readout", "runtime")
_KIND_ID = {k: i + 1 for i, k in enumerate(SWEEP_KINDS)}

CSV_COLUMNS = (
    "sweep_kind", "method", "backend", "coordinate", "trial", "seed",
    "e_point", "e_rot", "e_trans",
    "time_assembly", "time_schur", "time_solve", "time_total", "status",
)

CSV_FORMAT_VERSION = "rsba-sweep v1"


def sim3_align(traj_est: np.ndarray, traj_gt: np.ndarray):
    """Closed-form similarity (scale, R, t) minimizing sum |s R x + t - y|^2.

    Needs at least three non-collinear correspondences; collinear or
    coincident inputs leave the rotation ill-determined.
    """
    est = np.asarray(traj_est, dtype=float).reshape(-1, 3)
    gt = np.asarray(traj_gt, dtype=float).reshape(-1, 3)
    if len(est) != len(gt):
        raise DimensionMismatch(f"{len(est)} vs {len(gt)} correspondences")
    if len(est) < 3:
        raise DegenerateConfiguration("need at least 3 correspondences")
    mu_e = est.mean(axis=0)
    mu_g = gt.mean(axis=0)
    X = est - mu_e
    Y = gt - mu_g
    var_e = float(np.einsum("ni,ni->", X, X)) / len(est)
    if var_e < 1e-24:
        raise DegenerateConfiguration("coincident source points")
    cov = Y.T @ X / len(est)
    U, D, Vt = np.linalg.svd(cov)
    if D[1] <= 1e-9 * max(D[0], 1e-300):
        raise DegenerateConfiguration("collinear correspondences")
    S = np.eye(3)
    if np.linalg.det(U) * np.linalg.det(Vt) < 0.0:
        S[2, 2] = -1.0
    R = U @ S @ Vt
    s = float(np.trace(np.diag(D) @ S)) / var_e
    t = mu_g - s * (R @ mu_e)
    return s, R, t


def ate(traj_est: np.ndarray, traj_gt: np.ndarray) -> float:
    """RMS position residual after the optimal similarity alignment."""
    s, R, t = sim3_align(traj_est, traj_gt)
    moved = s * np.asarray(traj_est) @ R.T + t
    d = moved - np.asarray(traj_gt)
    return float(np.sqrt(np.mean(np.einsum("ni,ni->n", d, d))))


def metric_point(P_est: np.ndarray, P_gt: np.ndarray, sim3=None) -> float:
    """RMSE of the aligned points."""
    P_est = np.asarray(P_est, dtype=float).reshape(-1, 3)
    P_gt = np.asarray(P_gt, dtype=float).reshape(-1, 3)
    if len(P_est) != len(P_gt):
        raise DimensionMismatch(f"{len(P_est)} vs {len(P_gt)} points")
    s, R, t = sim3 if sim3 is not None else sim3_align(P_est, P_gt)
    moved = s * P_est @ R.T + t
    d = moved - P_gt
    return float(np.sqrt(np.mean(np.einsum("ni,ni->n", d, d))))


def metric_rot(R_est, R_gt) -> float:
    """Mean geodesic angle between corresponding rotations, radians."""
    R_est = np.asarray(R_est, dtype=float).reshape(-1, 3, 3)
    R_gt = np.asarray(R_gt, dtype=float).reshape(-1, 3, 3)
    if len(R_est) != len(R_gt):
        raise DimensionMismatch(f"{len(R_est)} vs {len(R_gt)} rotations")
    rel = np.einsum("nij,nkj->nik", R_est, R_gt)
    tr = np.clip((np.trace(rel, axis1=1, axis2=2) - 1.0) / 2.0, -1.0, 1.0)
    return float(np.arccos(tr).mean())


def metric_trans(t_est, t_gt) -> float:
    """Mean angle between translation directions, radians (scale-blind)."""
    t_est = np.asarray(t_est, dtype=float).reshape(-1, 3)
    t_gt = np.asarray(t_gt, dtype=float).reshape(-1, 3)
    if len(t_est) != len(t_gt):
        raise DimensionMismatch(f"{len(t_est)} vs {len(t_gt)} translations")
    ne = np.linalg.norm(t_est, axis=1)
    ng = np.linalg.norm(t_gt, axis=1)
    if (ne < 1e-300).any() or (ng < 1e-300).any():
        raise ZeroTranslation("translation direction undefined for zero vector")
    cosang = np.clip(np.einsum("ni,ni->n", t_est, t_gt) / (ne * ng), -1.0, 1.0)
    return float(np.arccos(cosang).mean())


def evaluate_solution(problem_est: Problem, gt: GroundTruth) -> dict:
    """Gauge-aligned errors of an estimate against the generating truth."""
    sim3 = sim3_align(problem_est.points, gt.points)
    s, R, t = sim3
    e_point = metric_point(problem_est.points, gt.points, sim3=sim3)

    R_corr = np.stack([cam.R0 @ R.T for cam in problem_est.cameras])
    R_true = np.stack([cam.R0 for cam in gt.cameras])
    e_rot = metric_rot(R_corr, R_true)

    centers = np.stack([cam.center for cam in problem_est.cameras])
    centers_corr = s * centers @ R.T + t
    t_corr = -np.einsum("nij,nj->ni", R_corr, centers_corr)
    t_true = np.stack([cam.t0 for cam in gt.cameras])
    e_trans = metric_trans(t_corr, t_true)

    try:
        e_ate = ate(centers, np.stack([cam.center for cam in gt.cameras]))
    except DegenerateConfiguration:
        e_ate = np.nan
    return {"e_point": e_point, "e_rot": e_rot, "e_trans": e_trans, "ate": e_ate}


@dataclass
class TrialResult:
    sweep_kind: str
    method: str
    backend: str
    coordinate: float
    trial: int
    seed: int
    e_point: float = np.nan
    e_rot: float = np.nan
    e_trans: float = np.nan
    time_assembly: float = np.nan
    time_schur: float = np.nan
    time_solve: float = np.nan
    time_total: float = np.nan
    status: str = "ok"

    def csv_row(self) -> str:
        vals = []
        for col in CSV_COLUMNS:
            v = getattr(self, col)
            vals.append(f"{v:.17g}" if isinstance(v, float) else str(v))
        return ",".join(vals)


def default_coordinates(kind: str) -> list[float]:
    return {
        "speed": [0.0, 5.0, 10.0, 15.0, 20.0],       # deg/frame; units/frame = /10
        "noise": [0.0, 0.5, 1.0, 1.5, 2.0],          # px
        "readout": [0.0, 22.5, 45.0, 67.5, 90.0],    # deg between readout axes
        "runtime": [50.0, 100.0, 150.0, 200.0, 250.0],  # cameras
    }[kind]


def _trial_seeds(base_seed: int, kind: str, coord_idx: int, trial: int):
    ss = np.random.SeedSequence([base_seed, _KIND_ID[kind], coord_idx, trial])
    a, b, c = ss.generate_state(3)
    return int(a), int(b), int(c)


def _scene_for(kind: str, coordinate: float, base: SceneConfig, scene_seed: int) -> SceneConfig:
    if kind == "speed":
        return replace(base, angular_speed=coordinate, linear_speed=coordinate / 10.0,
                       seed=scene_seed)
    if kind == "noise":
        return replace(base, noise_sigma=coordinate, seed=scene_seed)
    if kind == "readout":
        n = base.n_cameras
        rolls = tuple(coordinate * j / max(n - 1, 1) for j in range(n))
        return replace(base, arrangement="ring", readout_angle_deg=rolls, seed=scene_seed)
    if kind == "runtime":
        return replace(base, n_cameras=int(coordinate), seed=scene_seed,
                       readout_angle_deg=0.0)
    raise ValueError(f"unknown sweep kind {kind!r}")


RUNTIME_BASE = SceneConfig(
    n_points=2500,
    sphere_radius=30.0,
)

# Degeneracy-study scene: coplanar cameras with parallel readout axes, far
# enough out that the vertical-collapse mode is cheap relative to the
# triangulation stiffness and the unweighted method actually falls into it.
READOUT_BASE = SceneConfig(
    arrangement="ring",
    sphere_radius=30.0,
)


def default_base(kind: str) -> SceneConfig:
    if kind == "runtime":
        return RUNTIME_BASE
    if kind == "readout":
        return READOUT_BASE
    return SceneConfig()


def run_sweep(
    kind: str,
    methods: list[str],
    trials: int,
    base: SceneConfig | None = None,
    backends: list[str] | None = None,
    magnitudes: PerturbMagnitudes | None = None,
    max_iterations: int = 50,
    coordinates: list[float] | None = None,
    threads: int = 1,
) -> list[TrialResult]:
    """Per-trial experiment rows for one sweep family.

    Every trial generates an independently seeded scene shared by all
    methods (and back-ends), perturbs the truth into the solver start and
    records gauge-aligned errors plus stage timings.  Failures come back as
    tagged rows, not exceptions.  The runtime kind pins the linear algebra
    to one thread and runs a fixed small iteration budget so back-ends see
    identical work.
    """
    if kind not in SWEEP_KINDS:
        raise ValueError(f"unknown sweep kind {kind!r}")
    if trials < 1:
        raise ValueError("trials must be >= 1")
    if base is None:
        base = default_base(kind)
    coords = coordinates if coordinates is not None else default_coordinates(kind)
    backends = backends or (["dense", "schur1", "schur2"] if kind == "runtime" else ["schur2"])
    mags = magnitudes or PerturbMagnitudes()
    if kind == "runtime":
        max_iterations = min(max_iterations, 3)

    jobs = [
        (ci, coord, trial)
        for ci, coord in enumerate(coords)
        for trial in range(trials)
    ]

    def run_job(job) -> list[TrialResult]:
        ci, coord, trial = job
        scene_seed, noise_seed, perturb_seed = _trial_seeds(base.seed, kind, ci, trial)
        cfg = _scene_for(kind, coord, base, scene_seed)
        rows = []
        try:
            problem, gt = generate_scene(cfg)
            noisy = add_noise(problem, cfg.noise_sigma, noise_seed)
            init = perturb_initialization(gt, mags, perturb_seed)
            start = Problem(init.cameras, init.points, noisy.observations, noisy.prior)
        except RsbaError as exc:
            for method in methods:
                for backend in backends:
                    rows.append(TrialResult(kind, method, backend, coord, trial,
                                            scene_seed, status=f"failed:{type(exc).__name__}"))
            return rows
        for method in methods:
            for backend in backends:
                row = TrialResult(kind, method, backend, coord, trial, scene_seed)
                # the absolute gradient threshold is scale-sensitive across
                # residual domains (whitened vs bare), so sweeps terminate on
                # relative cost decrease only
                config = SolverConfig(method=method, backend=backend,
                                      max_iterations=max_iterations,
                                      gradient_tolerance=1e-300)
                try:
                    t0 = time.perf_counter()
                    report = optimize(start.copy(), config)
                    wall = time.perf_counter() - t0
                    metrics = evaluate_solution(report.problem, gt)
                    row.e_point = metrics["e_point"]
                    row.e_rot = metrics["e_rot"]
                    row.e_trans = metrics["e_trans"]
                    row.time_assembly = report.timings.get("assembly", 0.0)
                    row.time_schur = report.timings.get("schur_construction", 0.0)
                    row.time_solve = (report.timings.get("reduced_solve", 0.0)
                                      + report.timings.get("back_substitution", 0.0))
                    row.time_total = wall
                except RsbaError as exc:
                    row.status = f"failed:{type(exc).__name__}"
                rows.append(row)
        return rows

    results: list[TrialResult] = []
    if kind == "runtime":
        # timing runs stay sequential on one BLAS thread for reproducibility
        from threadpoolctl import threadpool_limits

        with threadpool_limits(limits=1):
            for job in jobs:
                results.extend(run_job(job))
    elif threads > 1:
        from concurrent.futures import ThreadPoolExecutor

        with ThreadPoolExecutor(max_workers=threads) as pool:
            for rows in pool.map(run_job, jobs):
                results.extend(rows)
    else:
        for job in jobs:
            results.extend(run_job(job))
    results.sort(key=lambda r: (r.coordinate, r.trial, r.method, r.backend))
    return results


def write_csv(rows: list[TrialResult], path, metadata: dict | None = None) -> None:
    """CSV with '#' metadata lines: format version, resolved config, seed."""
    lines = [f"# {CSV_FORMAT_VERSION}"]
    if metadata:
        lines.append("# " + json.dumps(metadata, sort_keys=True, default=_json_default))
    lines.append(",".join(CSV_COLUMNS))
    lines.extend(r.csv_row() for r in rows)
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        f.write("\n".join(lines) + "\n")


def _json_default(obj):
    if dataclasses.is_dataclass(obj):
        return dataclasses.asdict(obj)
    if isinstance(obj, (np.integer, np.floating)):
        return obj.item()
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    raise TypeError(f"not JSON serializable: {type(obj)}")


def median_by(rows: list[TrialResult], field: str = "e_point"):
    """(method, backend, coordinate) -> median of a field over ok trials."""
    groups: dict[tuple, list[float]] = {}
    for r in rows:
        if r.status != "ok":
            continue
        groups.setdefault((r.method, r.backend, r.coordinate), []).append(getattr(r, field))
    return {k: float(np.median(v)) for k, v in groups.items()}
