"""Surfels built from leaf groups.

A surfel is a disc ``(center, unit normal, radius)`` plus a scalar offset
``q`` owned by the solver: during optimisation the surfel may only slide
along its normal, to ``center + q * normal``.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

log = logging.getLogger(__name__)

DEGENERATE_NORM = 1e-6


@dataclass(frozen=True)
class Surfel:
    center: np.ndarray
    normal: np.ndarray
    radius: float
    q: float
    members: np.ndarray


def aligned_mean_normal(normals) -> np.ndarray:
    """Mean of normals, each flipped into the hemisphere of the running sum.

    Returns the un-normalised mean so callers can test for cancellation.
    """
    normals = np.asarray(normals, dtype=float).reshape(-1, 3)
    acc = normals[0].copy()
    for n in normals[1:]:
        acc += n if n @ acc >= 0.0 else -n
    return acc / len(normals)


class SurfelSet:
    """Surfels as parallel arrays; surfel id = row index.

    ``members[s]`` holds global leaf indices into ``table`` (a
    :class:`~surfelba.association.LeafTable`).
    """

    def __init__(self, centers, normals, radii, members, table=None, dropped=0):
        self.centers = np.asarray(centers, dtype=float).reshape(-1, 3)
        self.normals = np.asarray(normals, dtype=float).reshape(-1, 3)
        self.radii = np.asarray(radii, dtype=float).reshape(-1)
        self.q = np.zeros(len(self.centers))
        self.members = list(members)
        self.table = table
        self.dropped = dropped

    def __len__(self):
        return len(self.centers)

    def __getitem__(self, s) -> Surfel:
        return Surfel(self.centers[s].copy(), self.normals[s].copy(), float(self.radii[s]),
                      float(self.q[s]), self.members[s])

    def positions(self) -> np.ndarray:
        """Live positions including the uncommitted offsets."""
        return self.centers + self.q[:, None] * self.normals

    def subset(self, keep) -> "SurfelSet":
        keep = np.flatnonzero(np.asarray(keep))
        out = SurfelSet(self.centers[keep], self.normals[keep], self.radii[keep],
                        [self.members[i] for i in keep], self.table, self.dropped)
        out.q = self.q[keep].copy()
        return out


def _fuse(groups, means, normals, radii):
    centers, out_normals, out_radii, members = [], [], [], []
    dropped = 0
    for idx in groups:
        idx = np.asarray(idx, dtype=np.int64)
        n = aligned_mean_normal(normals[idx])
        norm = np.linalg.norm(n)
        if norm < DEGENERATE_NORM:
            dropped += 1
            continue
        centers.append(means[idx].mean(axis=0))
        out_normals.append(n / norm)
        out_radii.append(radii[idx].max())
        members.append(idx)
    return centers, out_normals, out_radii, members, dropped


def create_surfels(assoc) -> SurfelSet:
    """One surfel per group: mean of member means, sign-aligned mean normal,
    largest member radius, ``q = 0``.  Groups with degenerate (zero-length)
    normals are dropped."""
    t = assoc.table
    c, n, r, m, dropped = _fuse(assoc.groups, t.world_means, t.world_normals, t.radii)
    if dropped:
        log.info("dropped %d surfels with degenerate normals", dropped)
    return SurfelSet(c, n, r, m, table=t, dropped=dropped)


def refresh_normals(surfels: SurfelSet, leaf_normals=None):
    """Recompute every surfel normal from its members' current normals.

    Centers and offsets are left alone.  ``leaf_normals`` defaults to the
    world normals of the surfel set's leaf table.
    """
    if leaf_normals is None:
        leaf_normals = surfels.table.world_normals
    keep = np.ones(len(surfels), dtype=bool)
    for s, idx in enumerate(surfels.members):
        n = aligned_mean_normal(leaf_normals[idx])
        norm = np.linalg.norm(n)
        if norm < DEGENERATE_NORM:
            keep[s] = False
            continue
        surfels.normals[s] = n / norm
    if not keep.all():
        n_bad = int((~keep).sum())
        log.info("dropped %d surfels with degenerate normals on refresh", n_bad)
        reduced = surfels.subset(keep)
        reduced.dropped += n_bad
        return reduced
    return surfels


def commit_offsets(surfels: SurfelSet):
    """Move each center by ``q * normal`` and reset ``q``."""
    surfels.centers += surfels.q[:, None] * surfels.normals
    surfels.q[:] = 0.0
