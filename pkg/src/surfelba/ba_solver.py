"""Point-to-plane bundle adjustment over poses and surfel offsets.

Each factor ties one leaf mean ``p`` (sensor frame of scan ``k``) to one
surfel ``(p_s, n_s)`` sliding along its normal by ``q``::

    e = (R_wk n_s)^T (T_wk (p_s + q n_s) - p) / sigma

with ``T_wk`` the world-to-sensor transform.  Poses are stored sensor-to-world
(``T_kw``) and updated on the right, ``T_kw exp(delta)``; ``delta`` is the
twist ``(v, w)``.  Robustness comes from a Huber kernel applied through
iteratively reweighted least squares inside Levenberg-Marquardt.  Surfel
offsets are scalars and are eliminated by a Schur complement, leaving a
dense ``6(K-1)`` system (pose 0 is held fixed to remove the gauge freedom).
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg
import scipy.sparse as sp

from .errors import RankDeficiencyError, SolverError
from .geometry import Pose, se3_exp

log = logging.getLogger(__name__)

LAMBDA_INIT = 1e-4
LAMBDA_MIN = 1e-12
LAMBDA_MAX = 1e12
RANK_TOL = 1e-12
STEP_TOL = 1e-12


def huber_cost(e, rho_ker):
    """Huber loss and IRLS weight ``rho'(e) / e``.

    Works elementwise on arrays.  ``rho_ker=None`` disables the kernel
    (plain least squares, weight 1).
    """
    e = np.asarray(e, dtype=float)
    a = np.abs(e)
    if rho_ker is None:
        return 0.5 * e * e, np.ones_like(e)
    if rho_ker <= 0:
        raise ValueError("rho_ker must be positive")
    inlier = a <= rho_ker
    cost = np.where(inlier, 0.5 * e * e, rho_ker * (a - 0.5 * rho_ker))
    with np.errstate(divide="ignore"):
        weight = np.where(inlier, 1.0, rho_ker / np.where(inlier, 1.0, a))
    if cost.ndim == 0:
        return float(cost), float(weight)
    return cost, weight


def residual(T_w_k: Pose, surfel, p_l, sigma) -> float:
    """Signed, sigma-scaled distance of leaf mean ``p_l`` to the surfel plane in frame ``k``."""
    n = np.asarray(surfel.normal, dtype=float)
    q = float(getattr(surfel, "q", 0.0))
    ps = np.asarray(surfel.center, dtype=float) + q * n
    n_k = T_w_k.rotation @ n
    x_k = T_w_k.rotation @ ps + T_w_k.translation
    return float(n_k @ (x_k - np.asarray(p_l, dtype=float)) / sigma)


def jacobians(T_w_k: Pose, surfel, p_l, sigma):
    """``(J_pose, J_q)`` of :func:`residual`.

    ``J_pose`` (6,) is taken w.r.t. a twist applied on the right of the
    sensor-to-world pose ``T_kw = inverse(T_w_k)``.  With ``m = R_wk n_s``:
    ``d e / d v = -m / sigma`` and ``d e / d w = (m x p_l) / sigma``.  The
    offset enters as ``q * |n_s|^2 / sigma = q / sigma``.
    """
    m = T_w_k.rotation @ np.asarray(surfel.normal, dtype=float)
    p = np.asarray(p_l, dtype=float)
    J = np.concatenate([-m, np.cross(m, p)]) / sigma
    return J, 1.0 / sigma


@dataclass
class OptimizeResult:
    poses: list
    offsets: np.ndarray
    cost_trace: list
    iterations: int
    converged: bool
    step_norms: list = field(default_factory=list)


class FactorGraph:
    """Poses (sensor-to-world), surfel offsets and point-to-plane factors.

    Factors are stored as parallel arrays in factor-id order:
    ``scan`` (pose index), ``surfel`` (surfel index), ``points`` (leaf means,
    sensor frame) and ``sigma``.
    """

    def __init__(self, poses, centers, normals, scan, surfel, points, sigma,
                 rho_ker=0.1, optimize_surfels=True, fixed_pose=0):
        self.poses = list(poses)
        self.centers = np.asarray(centers, dtype=float).reshape(-1, 3)
        self.normals = np.asarray(normals, dtype=float).reshape(-1, 3)
        self.q = np.zeros(len(self.centers))
        self.scan = np.asarray(scan, dtype=np.int64)
        self.surfel = np.asarray(surfel, dtype=np.int64)
        self.points = np.asarray(points, dtype=float).reshape(-1, 3)
        self.sigma = np.asarray(sigma, dtype=float).reshape(-1)
        self.rho_ker = rho_ker
        self.optimize_surfels = optimize_surfels
        self.fixed_pose = fixed_pose
        n = len(self.scan)
        if not (len(self.surfel) == n and len(self.points) == n and len(self.sigma) == n):
            raise SolverError("factor arrays differ in length")
        if n and (self.scan.min() < 0 or self.scan.max() >= len(self.poses)):
            raise SolverError("factor references a missing pose")
        if n and (self.surfel.min() < 0 or self.surfel.max() >= len(self.centers)):
            raise SolverError("factor references a missing surfel")
        if np.any(~(self.sigma > 0)):
            raise SolverError("factor sigma must be positive")
        if not 0 <= fixed_pose < len(self.poses):
            raise SolverError("gauge pose index out of range")

    @classmethod
    def from_surfels(cls, poses, surfels, rho_ker=0.1, optimize_surfels=True, sigmas=None):
        """One factor per surfel member leaf, in surfel-id then join order."""
        t = surfels.table
        if len(surfels):
            idx = np.concatenate(surfels.members)
            owner = np.repeat(np.arange(len(surfels)), [len(m) for m in surfels.members])
        else:
            idx = np.zeros(0, dtype=np.int64)
            owner = np.zeros(0, dtype=np.int64)
        sig = t.sigmas if sigmas is None else np.asarray(sigmas, dtype=float)
        graph = cls(poses, surfels.centers, surfels.normals, t.scan_index[idx], owner,
                    t.local_means[idx], sig[idx], rho_ker=rho_ker, optimize_surfels=optimize_surfels)
        graph.q = surfels.q.copy()
        return graph

    def __len__(self):
        return len(self.scan)

    def _pose_arrays(self, poses):
        R = np.stack([p.rotation for p in poses])
        t = np.stack([p.translation for p in poses])
        return R, t

    def residuals(self, poses=None, q=None) -> np.ndarray:
        poses = self.poses if poses is None else poses
        q = self.q if q is None else q
        R, t = self._pose_arrays(poses)
        n = self.normals[self.surfel]
        x = np.einsum("fij,fj->fi", R[self.scan], self.points) + t[self.scan]
        ps = self.centers[self.surfel]
        return (np.einsum("fi,fi->f", n, ps - x) + q[self.surfel]) / self.sigma

    def cost(self, poses=None, q=None) -> float:
        c, _ = huber_cost(self.residuals(poses, q), self.rho_ker)
        return float(np.sum(c))

    def linearize(self):
        """Per-factor residual, IRLS weight, pose Jacobian (F, 6) and offset Jacobian (F,)."""
        R, _ = self._pose_arrays(self.poses)
        e = self.residuals()
        _, w = huber_cost(e, self.rho_ker)
        m = np.einsum("fji,fj->fi", R[self.scan], self.normals[self.surfel])
        inv_s = 1.0 / self.sigma
        Jp = np.hstack([-m, np.cross(m, self.points)]) * inv_s[:, None]
        return e, w, Jp, inv_s


def _retract(poses, dp, free):
    out = list(poses)
    for j, k in enumerate(free):
        out[k] = out[k] @ se3_exp(dp[6 * j:6 * j + 6])
    return out


def _null_space_ids(S, free):
    vals, vecs = np.linalg.eigh(S)
    bad = vecs[:, vals <= RANK_TOL * max(vals.max(), 1.0)]
    rows = np.flatnonzero(np.abs(bad).max(axis=1) > 1e-3) if bad.size else np.zeros(0, int)
    return sorted({f"pose:{free[r // 6]}" for r in rows})


def _check_rank(Hpp, Hqq, Hpq, free, optimize_surfels):
    """Raise if the undamped reduced pose system is singular."""
    diagH = np.diag(Hpp)
    if np.any(diagH <= 0):
        bad = sorted({f"pose:{free[r // 6]}" for r in np.flatnonzero(diagH <= 0)})
        raise RankDeficiencyError(f"unconstrained variables: {', '.join(bad)}", bad)
    if not len(diagH):
        return
    S0 = Hpp
    if optimize_surfels:
        S0 = Hpp - (Hpq @ sp.diags(1.0 / Hqq) @ Hpq.T).toarray()
    d = 1.0 / np.sqrt(np.diag(S0).clip(min=1e-300))
    Ss = S0 * d[:, None] * d[None, :]
    if np.linalg.eigvalsh(Ss).min() <= RANK_TOL:
        bad = _null_space_ids(Ss, free)
        raise RankDeficiencyError(f"singular reduced system; weakly constrained: {', '.join(bad)}", bad)


def optimize(graph: FactorGraph, max_inner_iters=20, convergence_tol=1e-4) -> OptimizeResult:
    """Levenberg-Marquardt with IRLS Huber weights.

    Damping is Marquardt-scaled (``lambda * diag(H)``), starts at 1e-4, grows
    tenfold on a rejected step and shrinks tenfold (down to 1e-12) on an
    accepted one.  Stops when an accepted step lowers the cost by less than
    ``convergence_tol`` relative, when the step norm drops below 1e-12, or
    after ``max_inner_iters`` iterations.
    The pose at ``graph.fixed_pose`` is never touched.
    """
    K = len(graph.poses)
    free = [k for k in range(K) if k != graph.fixed_pose]
    col = np.full(K, -1, dtype=np.int64)
    col[free] = np.arange(len(free))
    n_p = 6 * len(free)
    S_count = len(graph.centers)

    cost = graph.cost()
    if not np.isfinite(cost):
        raise SolverError(f"non-finite initial cost {cost}")
    trace = [cost]
    steps = []
    lam = LAMBDA_INIT
    converged = False
    iterations = 0

    if len(graph) == 0:
        return OptimizeResult(list(graph.poses), graph.q.copy(), trace, 1, True, [0.0])

    fk = col[graph.scan]
    on_free = fk >= 0
    rows6 = (6 * fk[on_free])[:, None] + np.arange(6)[None, :]

    def assemble():
        e, w, Jp, Jq = graph.linearize()
        # pose blocks are block diagonal: every factor touches one pose
        Hpp = np.zeros((len(free), 6, 6))
        np.add.at(Hpp, fk[on_free], np.einsum("f,fi,fj->fij", w[on_free], Jp[on_free], Jp[on_free]))
        gp = np.zeros((len(free), 6))
        np.add.at(gp, fk[on_free], (w * e)[on_free, None] * Jp[on_free])
        Hpp = scipy.linalg.block_diag(*Hpp) if len(free) else np.zeros((0, 0))
        Hqq = gq = Hpq = None
        if graph.optimize_surfels:
            Hqq = np.bincount(graph.surfel, weights=w * Jq * Jq, minlength=S_count)
            gq = np.bincount(graph.surfel, weights=w * Jq * e, minlength=S_count)
            Hpq = sp.csr_matrix(
                (((w * Jq)[on_free, None] * Jp[on_free]).ravel(),
                 (rows6.ravel(), np.repeat(graph.surfel[on_free], 6))),
                shape=(n_p, S_count),
            )
        return Hpp, gp.reshape(-1), Hqq, gq, Hpq

    Hpp, gp, Hqq, gq, Hpq = assemble()
    _check_rank(Hpp, Hqq, Hpq, free, graph.optimize_surfels)
    if cost == 0.0:
        return OptimizeResult(list(graph.poses), graph.q.copy(), trace, 1, True, [0.0])

    for it in range(max_inner_iters):
        iterations = it + 1
        if it > 0:
            Hpp, gp, Hqq, gq, Hpq = assemble()
        diagH = np.diag(Hpp).copy()

        accepted = False
        while lam <= LAMBDA_MAX:
            A = Hpp + lam * np.diag(diagH)
            b = -gp
            if graph.optimize_surfels:
                Dq = Hqq * (1.0 + lam)
                Dinv = sp.diags(1.0 / Dq)
                A = A - (Hpq @ Dinv @ Hpq.T).toarray()
                b = b + Hpq @ (gq / Dq)
            try:
                dp = scipy.linalg.cho_solve(scipy.linalg.cho_factor(A), b) if n_p else np.zeros(0)
            except (np.linalg.LinAlgError, scipy.linalg.LinAlgError):
                lam *= 10.0
                continue
            if graph.optimize_surfels:
                dq = (-gq - Hpq.T @ dp) / Dq
            else:
                dq = np.zeros(S_count)
            new_poses = _retract(graph.poses, dp, free)
            new_q = graph.q + dq
            new_cost = graph.cost(new_poses, new_q)
            if np.isfinite(new_cost) and new_cost < cost:
                accepted = True
                break
            lam *= 10.0

        if not accepted:
            converged = True  # no descent direction left at this damping
            break
        rel = (cost - new_cost) / cost
        graph.poses = new_poses
        graph.q = new_q
        steps.append(float(np.sqrt(dp @ dp + dq @ dq)))
        cost = new_cost
        trace.append(cost)
        lam = max(lam / 10.0, LAMBDA_MIN)
        if rel < convergence_tol or cost == 0.0 or steps[-1] < STEP_TOL:
            converged = True
            break

    return OptimizeResult(list(graph.poses), graph.q.copy(), trace, iterations, converged, steps)
