"""Cross-scan leaf grouping.

Every ordered pair of trees ``(i, j)`` is visited; each leaf of ``i`` looks up
its nearest leaf in ``j`` and pulls it into its own group when the group's
running surfel estimate accepts it.  Scans, partner scans and leaves are
visited in ascending id order and a leaf claimed by one group is never
reassigned, so the result is deterministic.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from numba import njit


@dataclass(frozen=True)
class MatchThresholds:
    d_e: float = 0.5
    d_n: float = 1.0
    d_theta: float = math.radians(5.0)

    def __post_init__(self):
        if not (self.d_e > 0 and self.d_n > 0 and self.d_theta > 0):
            raise ValueError(f"match thresholds must be positive: {self}")


@dataclass
class SurfelEstimate:
    mean: np.ndarray
    normal: np.ndarray
    radius: float = 0.0


def check_match(aggregate, leaf, th: MatchThresholds) -> bool:
    """Distance, distance-along-normal and normal-angle gates.

    Antipodal normals count as aligned.
    """
    diff = np.asarray(aggregate.mean, dtype=float) - np.asarray(leaf.mean, dtype=float)
    n_s = np.asarray(aggregate.normal, dtype=float)
    if not np.linalg.norm(diff) < th.d_e:
        return False
    if not abs(n_s @ diff) < th.d_n:
        return False
    return bool(abs(n_s @ np.asarray(leaf.normal, dtype=float)) > math.cos(th.d_theta))


class LeafTable:
    """All leaves of all scans, flattened and expressed in the world frame.

    Global leaf index ``g`` belongs to scan ``scan_ids[g]`` with per-tree id
    ``leaf_ids[g]``; scans are concatenated in the given order.
    """

    def __init__(self, views):
        self.views = list(views)
        sizes = [len(v) for v in self.views]
        self.offsets = np.concatenate([[0], np.cumsum(sizes)]).astype(np.int64)
        self.scan_index = np.repeat(np.arange(len(self.views)), sizes).astype(np.int64)
        self.scan_ids = np.array([v.scan_id for v in self.views], dtype=np.int64)[self.scan_index]
        self.leaf_ids = np.concatenate([np.arange(n) for n in sizes]).astype(np.int64) if sizes else np.zeros(0, np.int64)
        self.world_means = np.vstack([v.means for v in self.views]).reshape(-1, 3)
        self.world_normals = np.vstack([v.normals for v in self.views]).reshape(-1, 3)
        self.local_means = np.vstack([v.tree.means for v in self.views]).reshape(-1, 3)
        self.radii = np.concatenate([v.tree.radii for v in self.views])
        self.sigmas = np.concatenate([v.tree.sigmas for v in self.views])

    def __len__(self):
        return len(self.world_means)


class AssociationSet:
    """Disjoint leaf groups with their running surfel estimates.

    ``groups[g]`` lists global leaf indices in the order they joined.
    """

    def __init__(self, table: LeafTable, groups, agg_mean, agg_normal, agg_radius):
        self.table = table
        self.groups = groups
        self.agg_mean = agg_mean
        self.agg_normal = agg_normal
        self.agg_radius = agg_radius

    def __len__(self):
        return len(self.groups)

    def sizes(self) -> np.ndarray:
        return np.array([len(g) for g in self.groups], dtype=np.int64)

    def members(self, g):
        """``(scan_id, leaf_id)`` pairs of group ``g``."""
        idx = self.groups[g]
        return list(zip(self.table.scan_ids[idx].tolist(), self.table.leaf_ids[idx].tolist()))

    def serialize(self) -> bytes:
        return "\n".join(
            " ".join(f"{s}:{l}" for s, l in self.members(g)) for g in range(len(self))
        ).encode()


def associate(views, th: MatchThresholds = MatchThresholds()) -> AssociationSet:
    """Group leaves across scans; ``views`` must share one world frame."""
    table = LeafTable(views)
    L = len(table)
    group_of = np.full(L, -1, dtype=np.int64)
    join_seq = np.full(L, -1, dtype=np.int64)
    g_sum = np.zeros((L, 3))
    g_count = np.zeros(L, dtype=np.int64)
    g_nsum = np.zeros((L, 3))
    g_normal = np.zeros((L, 3))
    g_radius = np.zeros(L)
    state = np.zeros(2, dtype=np.int64)  # [n_groups, join counter]
    cos_theta = math.cos(th.d_theta)

    order = np.argsort(table.scan_ids[table.offsets[:-1]] if len(views) else np.zeros(0), kind="stable")
    for i in order:
        lo_i, hi_i = table.offsets[i], table.offsets[i + 1]
        queries = table.world_means[lo_i:hi_i]
        for j in order:
            if i == j:
                continue
            nn = table.views[j].nearest_leaf_ids(queries) + table.offsets[j]
            _associate_pair(
                lo_i, hi_i, nn, table.world_means, table.world_normals, table.radii,
                group_of, join_seq, g_sum, g_count, g_nsum, g_normal, g_radius, state,
                th.d_e, th.d_n, cos_theta,
            )

    # leaves never visited as a source (single-tree runs) become singletons
    for g_leaf in range(L):
        if group_of[g_leaf] < 0:
            _new_group(g_leaf, table.world_means, table.world_normals, table.radii,
                       group_of, join_seq, g_sum, g_count, g_nsum, g_normal, g_radius, state)

    n_groups = int(state[0])
    idx = np.lexsort((join_seq, group_of))
    bounds = np.searchsorted(group_of[idx], np.arange(n_groups + 1))
    groups = [idx[bounds[g]:bounds[g + 1]] for g in range(n_groups)]
    agg_mean = g_sum[:n_groups] / g_count[:n_groups, None]
    return AssociationSet(table, groups, agg_mean, g_normal[:n_groups].copy(), g_radius[:n_groups].copy())


@njit(cache=True)
def _new_group(leaf, means, normals, radii, group_of, join_seq, g_sum, g_count, g_nsum, g_normal, g_radius, state):
    g = state[0]
    state[0] += 1
    group_of[leaf] = g
    join_seq[leaf] = state[1]
    state[1] += 1
    for c in range(3):
        g_sum[g, c] = means[leaf, c]
        g_nsum[g, c] = normals[leaf, c]
        g_normal[g, c] = normals[leaf, c]
    g_count[g] = 1
    g_radius[g] = radii[leaf]
    return g


@njit(cache=True)
def _associate_pair(lo, hi, nn, means, normals, radii, group_of, join_seq,
                    g_sum, g_count, g_nsum, g_normal, g_radius, state, d_e, d_n, cos_theta):
    for li in range(lo, hi):
        g = group_of[li]
        if g < 0:
            g = _new_group(li, means, normals, radii, group_of, join_seq,
                           g_sum, g_count, g_nsum, g_normal, g_radius, state)
        lj = nn[li - lo]
        if group_of[lj] >= 0:
            continue
        cnt = g_count[g]
        dx = g_sum[g, 0] / cnt - means[lj, 0]
        dy = g_sum[g, 1] / cnt - means[lj, 1]
        dz = g_sum[g, 2] / cnt - means[lj, 2]
        if not math.sqrt(dx * dx + dy * dy + dz * dz) < d_e:
            continue
        if not abs(g_normal[g, 0] * dx + g_normal[g, 1] * dy + g_normal[g, 2] * dz) < d_n:
            continue
        c = g_normal[g, 0] * normals[lj, 0] + g_normal[g, 1] * normals[lj, 1] + g_normal[g, 2] * normals[lj, 2]
        if not abs(c) > cos_theta:
            continue
        sign = 1.0 if c >= 0.0 else -1.0
        group_of[lj] = g
        join_seq[lj] = state[1]
        state[1] += 1
        g_count[g] = cnt + 1
        for k in range(3):
            g_sum[g, k] += means[lj, k]
            g_nsum[g, k] += sign * normals[lj, k]
        nrm = math.sqrt(g_nsum[g, 0] ** 2 + g_nsum[g, 1] ** 2 + g_nsum[g, 2] ** 2)
        if nrm > 0.0:
            for k in range(3):
                g_normal[g, k] = g_nsum[g, k] / nrm
        if radii[lj] > g_radius[g]:
            g_radius[g] = radii[lj]
