"""Outer bundle-adjustment loop.

Trees and per-leaf sigmas are computed once.  Every outer iteration views
the trees through the current poses, regroups leaves, rebuilds surfels from
the groups, optimises poses and surfel offsets, and commits the offsets.
"""

from __future__ import annotations

import logging
import math
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from .association import MatchThresholds, associate
from .ba_solver import FactorGraph, optimize
from .beam_model import DEFAULT_CAP, DEFAULT_DIVERGENCE, DEFAULT_FLOOR, BeamSpec, normalize_sigmas, simulate_sigmas
from .cloud_io import Trajectory
from .errors import InputError, SolverError
from .evaluation import ate
from .kdtree import KdTree
from .surfel_map import SurfelSet, commit_offsets, create_surfels

log = logging.getLogger(__name__)

PARALLEL_MIN_DISPLACEMENT = 1e-6
# costs below this are rounding noise; the relative test never settles there
COST_FLOOR = 1e-20


@dataclass
class BAConfig:
    d_e: float = 0.5
    d_n: float = 1.0
    d_theta: float = math.radians(5.0)
    rho_ker: float | None = 0.1
    b_max: float = 0.2
    b_min: float = 0.1
    divergence: float = DEFAULT_DIVERGENCE
    beam_rings: int = 3
    rays_per_ring: int = 12
    sigma_floor: float = DEFAULT_FLOOR
    sigma_cap: float = DEFAULT_CAP
    outer_iterations: int = 10
    inner_iterations: int = 20
    convergence_tol: float = 1e-4
    outer_tol: float = 1e-4
    uncertainty: bool = True
    pose_only: bool = False
    sigma_scale: float = 1.0
    max_dt: float = 0.05

    def __post_init__(self):
        self.thresholds()
        self.beam()
        if not self.b_max > self.b_min > 0:
            raise InputError(f"need b_max > b_min > 0, got {self.b_max}, {self.b_min}")
        if not 0 < self.sigma_floor < self.sigma_cap:
            raise InputError(f"need 0 < sigma_floor < sigma_cap, got {self.sigma_floor}, {self.sigma_cap}")
        if self.rho_ker is not None and not self.rho_ker > 0:
            raise InputError("rho_ker must be positive")
        if self.outer_iterations < 1 or self.inner_iterations < 1:
            raise InputError("iteration caps must be at least 1")
        if not self.sigma_scale > 0:
            raise InputError("sigma_scale must be positive")

    def thresholds(self) -> MatchThresholds:
        try:
            return MatchThresholds(self.d_e, self.d_n, self.d_theta)
        except ValueError as exc:
            raise InputError(str(exc)) from None

    def beam(self) -> BeamSpec:
        try:
            return BeamSpec(self.divergence, self.beam_rings, self.rays_per_ring)
        except ValueError as exc:
            raise InputError(str(exc)) from None


@dataclass
class IterationRecord:
    iteration: int
    total_cost: float
    ate_rms: float | None = None
    n_surfels: int = 0
    n_factors: int = 0
    inner_iterations: int = 0
    inner_cost_trace: list = field(default_factory=list)
    max_parallel_deviation: float = 0.0
    seconds: float = 0.0


@dataclass
class BAResult:
    trajectory: Trajectory
    surfels: SurfelSet
    records: list
    converged: bool
    sigmas: np.ndarray
    fixed_pose_before: np.ndarray
    fixed_pose_after: np.ndarray

    @property
    def iterations(self) -> int:
        return len(self.records) - 1

    def ate_trace(self):
        return [r.ate_rms for r in self.records]

    def cost_trace(self):
        return [r.total_cost for r in self.records]


def build_trees(clouds, config: BAConfig):
    trees = []
    for k, c in enumerate(clouds):
        pts = getattr(c, "points", c)
        trees.append(KdTree(pts, config.b_max, config.b_min, scan_id=getattr(c, "scan_id", k)))
    return trees


def assign_sigmas(trees, config: BAConfig):
    """Beam-model sigma per leaf, normalised over the whole dataset.

    With uncertainty disabled every sigma is 1.
    """
    if not config.uncertainty:
        for t in trees:
            t.set_sigmas(np.full(len(t), config.sigma_scale))
        return np.concatenate([t.sigmas for t in trees])
    raw = [simulate_sigmas(t.means, t.normals, config.beam(), config.sigma_cap)[0] for t in trees]
    _, normalized = normalize_sigmas(np.concatenate(raw), config.sigma_floor, config.sigma_cap)
    normalized = normalized * config.sigma_scale
    off = 0
    for t in trees:
        t.set_sigmas(normalized[off:off + len(t)])
        off += len(t)
    return normalized


def multi_scan(surfels: SurfelSet) -> np.ndarray:
    """Surfels backed by leaves from at least two scans."""
    scans = surfels.table.scan_index
    return np.array([len(np.unique(scans[m])) >= 2 for m in surfels.members], dtype=bool)


def displacement_deviation(before, after, normals, min_disp=PARALLEL_MIN_DISPLACEMENT) -> float:
    """Largest angle between a surfel's displacement and its normal.

    Displacements shorter than ``min_disp`` are skipped: their direction is
    dominated by floating-point rounding of the center coordinates.
    """
    d = after - before
    L = np.linalg.norm(d, axis=1)
    sel = L > min_disp
    if not sel.any():
        return 0.0
    cross = np.linalg.norm(np.cross(d[sel], normals[sel]), axis=1)
    dot = np.abs(np.einsum("ij,ij->i", d[sel], normals[sel]))
    return float(np.max(np.arctan2(cross, dot)))


def run_bundle_adjustment(clouds, initial: Trajectory, config: BAConfig = BAConfig(),
                          gt: Trajectory | None = None, trees=None) -> BAResult:
    if len(clouds) != len(initial):
        raise InputError(f"{len(clouds)} clouds but {len(initial)} poses")
    if len(clouds) < 2:
        raise InputError("bundle adjustment needs at least two scans")
    if trees is None:
        trees = build_trees(clouds, config)
    sigmas = assign_sigmas(trees, config)
    th = config.thresholds()
    poses = list(initial.poses)
    fixed_before = poses[0].as_matrix()

    def current_ate(ps):
        if gt is None:
            return None
        return ate(Trajectory(initial.timestamps, ps), gt, config.max_dt).rms

    records = [IterationRecord(0, float("nan"), current_ate(poses))]
    surfels = None
    converged = False
    prev_cost = None
    for it in range(1, config.outer_iterations + 1):
        t0 = time.perf_counter()
        views = [t.view(p) for t, p in zip(trees, poses)]
        groups = associate(views, th)
        all_surfels = create_surfels(groups)
        surfels = all_surfels.subset(multi_scan(all_surfels))
        graph = FactorGraph.from_surfels(poses, surfels, rho_ker=config.rho_ker,
                                         optimize_surfels=not config.pose_only)
        if len(graph) == 0:
            raise SolverError("no cross-scan associations; check thresholds and initial poses")
        res = optimize(graph, config.inner_iterations, config.convergence_tol)
        if not all(np.isfinite(c) for c in res.cost_trace):
            raise SolverError(f"non-finite cost in outer iteration {it}")
        if it == 1:
            records[0].total_cost = res.cost_trace[0]
        before = surfels.centers.copy()
        pre_normals = surfels.normals.copy()
        surfels.q = res.offsets.copy()
        commit_offsets(surfels)
        poses = res.poses
        cost = res.cost_trace[-1]
        rec = IterationRecord(
            it, cost, current_ate(poses), len(surfels), len(graph), res.iterations,
            list(res.cost_trace), displacement_deviation(before, surfels.centers, pre_normals),
            time.perf_counter() - t0,
        )
        records.append(rec)
        log.info("iteration %d: cost %.6g, surfels %d, factors %d, ate %s",
                 it, cost, len(surfels), len(graph), rec.ate_rms)
        if prev_cost is not None and abs(prev_cost - cost) <= config.outer_tol * max(prev_cost, 1e-300):
            converged = True
            break
        if cost <= COST_FLOOR:
            converged = True
            break
        prev_cost = cost

    traj = Trajectory(initial.timestamps, poses)
    return BAResult(traj, surfels, records, converged, sigmas, fixed_before, poses[0].as_matrix())


def records_to_csv(records) -> str:
    lines = ["iteration,total_cost,ate_rms"]
    for r in records:
        ate_s = "" if r.ate_rms is None else f"{r.ate_rms:.9g}"
        lines.append(f"{r.iteration},{r.total_cost:.9g},{ate_s}")
    return "\n".join(lines) + "\n"


def config_dict(config: BAConfig) -> dict:
    return asdict(config)
