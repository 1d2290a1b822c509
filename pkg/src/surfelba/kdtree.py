"""PCA kd-tree over a single scan.

Each node is split at its mean along the direction of largest variance.
Splitting stops once the node's extent along that direction is at most
``b_max``.  A node whose spread along its smallest-variance direction
(``2 * sqrt(lambda_0)``) is below ``b_min`` while still spanning a plane is
treated as flat: its normal is handed down to every leaf below it instead of
each leaf estimating its own from a handful of points.

Leaves summarise their member points by mean, unit normal (oriented towards
the sensor at the local origin) and bounding radius; they are the
measurements of the bundle adjustment.  Nearest-leaf queries are exact.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numba import njit

from .geometry import Pose, apply_direction, apply_point, invert

MIN_PCA_POINTS = 3


@dataclass(frozen=True)
class Leaf:
    mean: np.ndarray
    normal: np.ndarray
    radius: float
    point_count: int
    sigma: float
    scan_id: int
    leaf_id: int
    propagated: bool = False


def _orient(normal, mean):
    if normal @ mean > 0.0:
        return -normal
    return normal


def _fallback_normal(mean):
    r = np.linalg.norm(mean)
    if r > 0.0:
        return -mean / r
    return np.array([0.0, 0.0, 1.0])


class KdTree:
    """Immutable PCA kd-tree in the sensor frame of one scan."""

    def __init__(self, points, b_max=0.2, b_min=0.1, scan_id=0):
        points = np.asarray(points, dtype=float).reshape(-1, 3)
        if len(points) == 0:
            raise ValueError("cannot build a kd-tree from an empty cloud")
        if not b_max > b_min > 0:
            raise ValueError(f"need b_max > b_min > 0, got b_max={b_max}, b_min={b_min}")
        self.b_max = float(b_max)
        self.b_min = float(b_min)
        self.scan_id = int(scan_id)
        self._build(points)

    def _build(self, points):
        centers, axes, left, right, node_leaf = [], [], [], [], []
        means, normals, radii, counts, propagated, members = [], [], [], [], [], []

        # (indices, inherited normal, parent w0, parent node, is_left)
        stack = [(np.arange(len(points)), None, None, -1, True)]
        while stack:
            idx, inherited, parent_w0, parent, is_left = stack.pop()
            node = len(centers)
            if parent >= 0:
                (left if is_left else right)[parent] = node
            P = points[idx]
            mu = P.mean(axis=0)
            n = len(idx)
            if n >= 2:
                D = P - mu
                lam, W = np.linalg.eigh(D.T @ D / n)
                lam = np.maximum(lam, 0.0)
            else:
                lam, W = np.zeros(3), np.eye(3)
            w0, w2 = W[:, 0], W[:, 2]
            proj = (P - mu) @ w2
            extent = proj.max() - proj.min() if n >= 2 else 0.0

            centers.append(mu)
            axes.append(w2)
            left.append(-1)
            right.append(-1)

            go_left = proj <= 0.0
            if n == 1 or extent <= self.b_max or go_left.all() or not go_left.any():
                if inherited is not None:
                    normal, prop = inherited, True
                elif n >= MIN_PCA_POINTS:
                    normal, prop = w0, False
                elif parent_w0 is not None:
                    normal, prop = parent_w0, True
                else:
                    normal, prop = _fallback_normal(mu), True
                node_leaf.append(len(means))
                means.append(mu)
                normals.append(_orient(normal / np.linalg.norm(normal), mu))
                radii.append(float(np.sqrt(((P - mu) ** 2).sum(axis=1).max())))
                counts.append(n)
                propagated.append(prop)
                members.append(idx)
                continue

            node_leaf.append(-1)
            if inherited is None and 2.0 * np.sqrt(lam[0]) < self.b_min and 2.0 * np.sqrt(lam[1]) >= self.b_min:
                inherited = w0
            # right pushed first so the left subtree gets the lower leaf ids
            stack.append((idx[~go_left], inherited, w0, node, False))
            stack.append((idx[go_left], inherited, w0, node, True))

        self.node_center = np.array(centers).reshape(-1, 3)
        self.node_axis = np.array(axes).reshape(-1, 3)
        self.node_left = np.array(left, dtype=np.int64)
        self.node_right = np.array(right, dtype=np.int64)
        self.node_leaf = np.array(node_leaf, dtype=np.int64)
        self.means = np.array(means).reshape(-1, 3)
        self.normals = np.array(normals).reshape(-1, 3)
        self.radii = np.array(radii)
        self.point_counts = np.array(counts, dtype=np.int64)
        self.propagated = np.array(propagated, dtype=bool)
        self.members = members
        self.sigmas = np.full(len(means), np.nan)
        self.n_points = len(points)
        for a in (self.node_center, self.node_axis, self.means, self.normals, self.radii):
            a.flags.writeable = False

    def __len__(self):
        return len(self.means)

    @property
    def n_leaves(self):
        return len(self.means)

    def set_sigmas(self, sigmas):
        sigmas = np.asarray(sigmas, dtype=float).reshape(-1)
        if sigmas.shape != (len(self),):
            raise ValueError("one sigma per leaf required")
        self.sigmas = sigmas.copy()

    def leaf(self, i) -> Leaf:
        return Leaf(
            self.means[i].copy(), self.normals[i].copy(), float(self.radii[i]),
            int(self.point_counts[i]), float(self.sigmas[i]), self.scan_id, int(i),
            bool(self.propagated[i]),
        )

    def leaves(self):
        return [self.leaf(i) for i in range(len(self))]

    def nearest_leaf_ids(self, queries) -> np.ndarray:
        """Exact nearest leaf mean for each query row; ties go to the lowest id."""
        Q = np.ascontiguousarray(np.asarray(queries, dtype=float).reshape(-1, 3))
        return _nearest_batch(
            self.node_center, self.node_axis, self.node_left, self.node_right,
            self.node_leaf, self.means, Q,
        )

    def nearest_leaf(self, query) -> Leaf:
        return self.leaf(int(self.nearest_leaf_ids(query)[0]))

    def view(self, pose: Pose) -> "KdTreeView":
        return KdTreeView(self, pose)


def build(cloud, b_max=0.2, b_min=0.1) -> KdTree:
    points = getattr(cloud, "points", cloud)
    return KdTree(points, b_max, b_min, scan_id=getattr(cloud, "scan_id", 0))


def nearest_leaf(tree, query) -> Leaf:
    return tree.nearest_leaf(query)


class KdTreeView:
    """A tree seen through a rigid pose, without rebuilding it.

    Queries are pulled back into the tree frame by the inverse pose, which
    preserves distances, so results equal those of a tree rebuilt from the
    transformed cloud.  Leaf geometry is mapped lazily on access.
    """

    def __init__(self, tree: KdTree, pose: Pose):
        self.tree = tree
        self.pose = pose
        self._inv = invert(pose)
        self._means = None
        self._normals = None

    def __len__(self):
        return len(self.tree)

    @property
    def scan_id(self):
        return self.tree.scan_id

    @property
    def means(self) -> np.ndarray:
        if self._means is None:
            self._means = apply_point(self.pose, self.tree.means)
        return self._means

    @property
    def normals(self) -> np.ndarray:
        if self._normals is None:
            self._normals = apply_direction(self.pose, self.tree.normals)
        return self._normals

    @property
    def split_centers(self) -> np.ndarray:
        return apply_point(self.pose, self.tree.node_center)

    @property
    def split_axes(self) -> np.ndarray:
        return self.tree.node_axis @ self.pose.rotation.T

    def leaf(self, i) -> Leaf:
        t = self.tree
        return Leaf(
            self.means[i].copy(), self.normals[i].copy(), float(t.radii[i]),
            int(t.point_counts[i]), float(t.sigmas[i]), t.scan_id, int(i), bool(t.propagated[i]),
        )

    def nearest_leaf_ids(self, queries) -> np.ndarray:
        return self.tree.nearest_leaf_ids(apply_point(self._inv, np.asarray(queries, dtype=float)))

    def nearest_leaf(self, query) -> Leaf:
        return self.leaf(int(self.nearest_leaf_ids(query)[0]))


def transformed_view(tree: KdTree, pose: Pose) -> KdTreeView:
    return KdTreeView(tree, pose)


@njit(cache=True)
def _nearest_batch(node_center, node_axis, node_left, node_right, node_leaf, leaf_means, queries):
    n_nodes = node_center.shape[0]
    out = np.empty(queries.shape[0], dtype=np.int64)
    stack_node = np.empty(n_nodes + 1, dtype=np.int64)
    stack_bound = np.empty(n_nodes + 1, dtype=np.float64)
    for qi in range(queries.shape[0]):
        qx = queries[qi, 0]
        qy = queries[qi, 1]
        qz = queries[qi, 2]
        best = np.inf
        best_id = -1
        top = 0
        stack_node[0] = 0
        stack_bound[0] = 0.0
        top = 1
        while top > 0:
            top -= 1
            node = stack_node[top]
            bound = stack_bound[top]
            # slack keeps rounding in the plane bound from pruning exact ties
            if bound > best * (1.0 + 1e-9) + 1e-18:
                continue
            leaf = node_leaf[node]
            if leaf >= 0:
                dx = leaf_means[leaf, 0] - qx
                dy = leaf_means[leaf, 1] - qy
                dz = leaf_means[leaf, 2] - qz
                d2 = dx * dx + dy * dy + dz * dz
                if d2 < best or (d2 == best and leaf < best_id):
                    best = d2
                    best_id = leaf
                continue
            d = (
                node_axis[node, 0] * (qx - node_center[node, 0])
                + node_axis[node, 1] * (qy - node_center[node, 1])
                + node_axis[node, 2] * (qz - node_center[node, 2])
            )
            if d <= 0.0:
                near = node_left[node]
                far = node_right[node]
            else:
                near = node_right[node]
                far = node_left[node]
            far_bound = max(bound, d * d)
            stack_node[top] = far
            stack_bound[top] = far_bound
            top += 1
            stack_node[top] = near
            stack_bound[top] = bound
            top += 1
        out[qi] = best_id
    return out
