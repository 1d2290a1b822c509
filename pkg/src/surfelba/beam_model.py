"""Range uncertainty from beam divergence.

A beam cone is cast from the sensor origin towards a leaf mean and
discretised into sub-beams laid out on concentric rings.  Every sub-beam is
intersected with the leaf's fitted plane; the spread of the resulting
ranges around the range of the leaf mean is the leaf's standard deviation.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

GRAZING_COS = 1e-3
MIN_SAMPLES = 3
DEFAULT_DIVERGENCE = 3e-3
DEFAULT_FLOOR = 1e-2
DEFAULT_CAP = 1.0

SENSOR_PRESETS = {
    "generic": DEFAULT_DIVERGENCE,
    "ouster": DEFAULT_DIVERGENCE,
}


@dataclass(frozen=True)
class BeamSpec:
    """Cone sampling: one axial ray plus ``n_rings`` rings of ``rays_per_ring``.

    ``divergence`` is the full cone angle in radians.  Ring ``k`` of ``K``
    sits at ``half_angle * sqrt(k / K)`` off the axis, which spreads the
    sub-beams evenly over the cone's cross-section.
    """

    divergence: float = DEFAULT_DIVERGENCE
    n_rings: int = 3
    rays_per_ring: int = 12

    def __post_init__(self):
        if not self.divergence >= 0 or not math.isfinite(self.divergence):
            raise ValueError(f"divergence must be finite and non-negative, got {self.divergence}")
        if self.n_samples < MIN_SAMPLES:
            raise ValueError(f"need at least {MIN_SAMPLES} sub-beams, got {self.n_samples}")

    @property
    def n_samples(self) -> int:
        return 1 + self.n_rings * self.rays_per_ring

    def offsets(self):
        """Per sub-beam ``(off-axis angle, azimuth)`` arrays."""
        half = 0.5 * self.divergence
        k = np.repeat(np.arange(1, self.n_rings + 1), self.rays_per_ring)
        j = np.tile(np.arange(self.rays_per_ring), self.n_rings)
        theta = np.concatenate([[0.0], half * np.sqrt(k / self.n_rings)])
        phi = np.concatenate([[0.0], 2.0 * np.pi * j / self.rays_per_ring])
        return theta, phi


@dataclass(frozen=True)
class SigmaNormalization:
    sigma_floor: float
    sigma_cap: float
    scale: float


def _perp_basis(a):
    """Two unit vectors completing ``a`` (rows ``(N, 3)``) to an orthonormal frame."""
    helper = np.zeros_like(a)
    use_x = np.abs(a[:, 0]) < 0.9
    helper[use_x, 0] = 1.0
    helper[~use_x, 1] = 1.0
    u = np.cross(a, helper)
    u /= np.linalg.norm(u, axis=1, keepdims=True)
    v = np.cross(a, u)
    return u, v


def simulate_sigmas(means, normals, spec: BeamSpec, sigma_cap=DEFAULT_CAP):
    """Vectorised beam simulation for leaves in their sensor frame.

    Returns ``(sigma, degenerate)``.  Sub-beams almost parallel to the plane
    (``|d . n| < 1e-3``) or hitting it behind the origin are dropped and the
    sample count shrinks with them; fewer than three survivors marks the
    leaf degenerate and its sigma is ``sigma_cap``.
    """
    means = np.asarray(means, dtype=float).reshape(-1, 3)
    normals = np.asarray(normals, dtype=float).reshape(-1, 3)
    rng = np.linalg.norm(means, axis=1)
    if np.any(rng <= 0):
        raise ValueError("leaf mean at the sensor origin has no beam direction")
    a = means / rng[:, None]
    u, v = _perp_basis(a)
    theta, phi = spec.offsets()
    ct, st = np.cos(theta), np.sin(theta)
    # (L, N, 3) sub-beam directions
    d = (
        ct[None, :, None] * a[:, None, :]
        + (st * np.cos(phi))[None, :, None] * u[:, None, :]
        + (st * np.sin(phi))[None, :, None] * v[:, None, :]
    )
    d[:, theta == 0.0, :] = a[:, None, :]
    cos_axis = np.einsum("lj,lj->l", normals, a)
    cos_i = np.einsum("lnj,lj->ln", d, normals)
    with np.errstate(divide="ignore", invalid="ignore"):
        # n.p = |p| (n.a), so the ray parameter is |p| (n.a) / (n.d); the axial ray gives |p| exactly
        r = rng[:, None] * (cos_axis[:, None] / cos_i)
    valid = (np.abs(cos_i) >= GRAZING_COS) & (r > 0.0) & np.isfinite(r)
    count = valid.sum(axis=1)
    dev2 = np.where(valid, (r - rng[:, None]) ** 2, 0.0)
    with np.errstate(invalid="ignore"):
        sigma = np.sqrt(dev2.sum(axis=1) / np.maximum(count, 1))
    degenerate = count < MIN_SAMPLES
    sigma[degenerate] = sigma_cap
    return sigma, degenerate


def simulate_sigma(leaf, spec: BeamSpec, sigma_cap=DEFAULT_CAP) -> float:
    """Range standard deviation of one leaf (sensor frame, sensor at origin)."""
    mean = np.asarray(leaf.mean, dtype=float)
    normal = np.asarray(leaf.normal, dtype=float)
    if abs(np.linalg.norm(normal) - 1.0) > 1e-6:
        raise ValueError("leaf normal must be unit length")
    sigma, _ = simulate_sigmas(mean[None], normal[None], spec, sigma_cap)
    return float(sigma[0])


def normalize_sigmas(sigmas, floor=DEFAULT_FLOOR, cap=DEFAULT_CAP):
    """Clamp to ``[floor, cap]`` then divide by the median of the clamped values.

    The median measurement ends up with unit weight, which keeps the Huber
    threshold in meters for a typical leaf.
    """
    sigmas = np.asarray(sigmas, dtype=float).reshape(-1)
    if len(sigmas) == 0:
        raise ValueError("normalize_sigmas needs at least one value")
    if not 0 < floor < cap:
        raise ValueError(f"need 0 < floor < cap, got {floor}, {cap}")
    clamped = np.clip(np.nan_to_num(sigmas, nan=cap, posinf=cap), floor, cap)
    scale = float(np.median(clamped))
    return SigmaNormalization(floor, cap, scale), clamped / scale
