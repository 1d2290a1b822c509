"""Synthetic box-world scenes with known ground truth.

A spinning LiDAR is simulated inside an axis-aligned room containing solid
axis-aligned boxes.  With a non-zero ``beam_divergence`` the beam has a
footprint: ``footprint_samples`` sub-rays are drawn uniformly over the cone's
cross-section and the nearest of their hits is reported along the nominal
beam direction, mimicking a receiver that triggers on the leading edge of
the echo.  On surfaces hit at grazing incidence this pulls ranges short by
an amount that grows with range and incidence.  Gaussian range noise is
added on top.  The initial trajectory is the ground truth perturbed per pose.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .cloud_io import Cloud, Trajectory
from .errors import EmptyScanError
from .geometry import Pose, so3_exp

@dataclass
class SceneSpec:
    room_min: tuple = (-6.0, -4.0, 0.0)
    room_max: tuple = (6.0, 4.0, 3.0)
    boxes: list = field(default_factory=lambda: [
        ((-3.5, 1.8, 0.0), (-2.0, 3.0, 1.0)),
        ((1.0, -3.2, 0.0), (2.6, -2.0, 1.6)),
        ((3.8, 1.0, 0.0), (4.6, 2.5, 2.2)),
        ((-1.0, -0.4, 0.0), (-0.2, 0.4, 0.7)),
    ])
    n_scans: int = 20
    path_radii: tuple = (3.0, 1.6)
    sensor_height: float = 1.3
    arc: float = 1.5 * math.pi
    yaw_wobble: float = 0.3
    n_rings: int = 16
    fov_down: float = math.radians(-20.0)
    fov_up: float = math.radians(20.0)
    azimuth_steps: int = 360
    max_range: float = 60.0
    range_noise: float = 0.01
    beam_divergence: float = 0.0
    footprint_samples: int = 8
    translation_noise: float = 0.05
    rotation_noise: float = math.radians(0.5)
    map_spacing: float = 0.1
    scan_period: float = 0.1
    seed: int = 0


@dataclass
class SyntheticScene:
    clouds: list
    gt_trajectory: Trajectory
    initial_trajectory: Trajectory
    gt_map_points: np.ndarray
    spec: SceneSpec


def ring_directions(spec: SceneSpec) -> np.ndarray:
    """Unit beam directions in the sensor frame, ring-major."""
    elev = np.linspace(spec.fov_down, spec.fov_up, spec.n_rings)
    az = 2.0 * np.pi * np.arange(spec.azimuth_steps) / spec.azimuth_steps
    E, A = np.meshgrid(elev, az, indexing="ij")
    return np.stack([np.cos(E) * np.cos(A), np.cos(E) * np.sin(A), np.sin(E)], axis=-1).reshape(-1, 3)


def gt_poses(spec: SceneSpec) -> list:
    rx, ry = spec.path_radii
    poses = []
    for i in range(spec.n_scans):
        s = spec.arc * i / max(spec.n_scans - 1, 1)
        pos = np.array([rx * math.cos(s), ry * math.sin(s), spec.sensor_height])
        yaw = math.atan2(ry * math.cos(s), -rx * math.sin(s)) + spec.yaw_wobble * math.sin(3 * s)
        poses.append(Pose(so3_exp([0.0, 0.0, yaw]), pos))
    return poses


def raycast(spec: SceneSpec, origin, dirs):
    """Nearest hit distance and hit-face normal (world frame) per ray.

    Misses (beyond ``max_range``) return ``inf``.  A sensor outside the room
    sees only the boxes.
    """
    o = np.asarray(origin, dtype=float)
    d = np.asarray(dirs, dtype=float)
    lo, hi = np.array(spec.room_min, float), np.array(spec.room_max, float)
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / d
        t_axis = np.where(d > 0, (hi - o) * inv, np.where(d < 0, (lo - o) * inv, np.inf))
    if np.any(o <= lo) or np.any(o >= hi):
        t_axis[:] = np.inf  # room faces are only seen from inside
    ax = np.argmin(t_axis, axis=1)
    t_best = t_axis[np.arange(len(d)), ax]
    normal = np.zeros_like(d)
    normal[np.arange(len(d)), ax] = -np.sign(d[np.arange(len(d)), ax])

    for bmin, bmax in spec.boxes:
        bmin, bmax = np.array(bmin, float), np.array(bmax, float)
        with np.errstate(divide="ignore", invalid="ignore"):
            t1 = (bmin - o) * inv
            t2 = (bmax - o) * inv
        t1 = np.where(np.isnan(t1), -np.inf, t1)
        t2 = np.where(np.isnan(t2), np.inf, t2)
        tnear = np.minimum(t1, t2)
        tfar = np.maximum(t1, t2)
        t_in = tnear.max(axis=1)
        t_out = tfar.min(axis=1)
        hit = (t_out >= t_in) & (t_in > 1e-9) & (t_in < t_best)
        if hit.any():
            bax = np.argmax(tnear[hit], axis=1)
            t_best[hit] = t_in[hit]
            n = np.zeros((hit.sum(), 3))
            n[np.arange(len(bax)), bax] = -np.sign(d[hit][np.arange(len(bax)), bax])
            normal[hit] = n
    t_best[~(t_best <= spec.max_range)] = np.inf
    return t_best, normal


def cone_sample(dirs, divergence, rng):
    """One random sub-ray per direction, uniform over the cone's cross-section."""
    half = 0.5 * divergence
    theta = half * np.sqrt(rng.random(len(dirs)))
    phi = 2.0 * np.pi * rng.random(len(dirs))
    helper = np.zeros_like(dirs)
    use_x = np.abs(dirs[:, 0]) < 0.9
    helper[use_x, 0] = 1.0
    helper[~use_x, 1] = 1.0
    u = np.cross(dirs, helper)
    u /= np.linalg.norm(u, axis=1, keepdims=True)
    v = np.cross(dirs, u)
    off = np.cos(phi)[:, None] * u + np.sin(phi)[:, None] * v
    return np.cos(theta)[:, None] * dirs + np.sin(theta)[:, None] * off


def scan(spec: SceneSpec, pose: Pose, rng) -> np.ndarray:
    """Noisy LiDAR returns of one pose, in the sensor frame."""
    dirs = ring_directions(spec)
    if spec.beam_divergence > 0:
        r = np.full(len(dirs), np.inf)
        for _ in range(spec.footprint_samples):
            cast = cone_sample(dirs, spec.beam_divergence, rng)
            r = np.minimum(r, raycast(spec, pose.translation, cast @ pose.rotation.T)[0])
    else:
        r, _ = raycast(spec, pose.translation, dirs @ pose.rotation.T)
    hit = np.isfinite(r)
    noise = rng.standard_normal(hit.sum()) * spec.range_noise
    return dirs[hit] * (r[hit] + noise)[:, None]


def surface_samples(spec: SceneSpec) -> np.ndarray:
    """Regular samples of every visible surface of the world."""
    h = spec.map_spacing
    out = []

    def face(lo, hi, axis, value):
        u, v = [a for a in range(3) if a != axis]
        gu = np.arange(lo[u] + h / 2, hi[u], h)
        gv = np.arange(lo[v] + h / 2, hi[v], h)
        U, V = np.meshgrid(gu, gv, indexing="ij")
        pts = np.zeros((U.size, 3))
        pts[:, u], pts[:, v], pts[:, axis] = U.ravel(), V.ravel(), value
        out.append(pts)

    lo, hi = np.array(spec.room_min, float), np.array(spec.room_max, float)
    for axis in range(3):
        face(lo, hi, axis, lo[axis])
        face(lo, hi, axis, hi[axis])
    for bmin, bmax in spec.boxes:
        bmin, bmax = np.array(bmin, float), np.array(bmax, float)
        for axis in range(3):
            if not (axis == 2 and bmin[2] <= lo[2]):
                face(bmin, bmax, axis, bmin[axis])
            face(bmin, bmax, axis, bmax[axis])
    return np.vstack(out)


def perturb(poses, translation_noise, rotation_noise, rng) -> list:
    out = []
    for p in poses:
        dt = rng.standard_normal(3) * translation_noise
        dr = rng.standard_normal(3) * rotation_noise
        out.append(Pose(p.rotation @ so3_exp(dr), p.translation + dt))
    return out


def generate_scene(spec: SceneSpec = SceneSpec()) -> SyntheticScene:
    rng = np.random.default_rng(spec.seed)
    poses = gt_poses(spec)
    stamps = spec.scan_period * np.arange(len(poses))
    clouds = []
    for k, pose in enumerate(poses):
        pts = scan(spec, pose, rng)
        if len(pts) == 0:
            raise EmptyScanError(f"scan {k} has no returns; sensor outside the geometry?")
        clouds.append(Cloud(pts, timestamp=float(stamps[k]), scan_id=k))
    initial = perturb(poses, spec.translation_noise, spec.rotation_noise, rng)
    return SyntheticScene(
        clouds, Trajectory(stamps, poses), Trajectory(stamps, initial), surface_samples(spec), spec
    )
