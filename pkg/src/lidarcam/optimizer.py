"""Joint camera/landmark/LiDAR factor graph and its damped Gauss-Newton solver.

State: every keyframe pose (camera in the laser frame) and every landmark
(laser frame). The first keyframe pose is the extrinsic calibration.

Pose error state is ``[theta, dp]`` with ``R = R_hat (I - skew(theta))`` and
``p = p_hat + dp``. Residuals are prediction minus measurement.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.linalg
import scipy.sparse as sp

from .geometry import (
    DEPTH_EPS,
    CameraIntrinsics,
    RigidPose,
    apply_rotation_error,
    project_camera_point,
    skew,
    skew_batch,
    so3_exp,
)


class SingularNormalEquations(np.linalg.LinAlgError):
    def __init__(self, message, condition=np.inf, null_dim=0, basis=None):
        super().__init__(message)
        self.condition = condition
        self.null_dim = null_dim
        self.basis = basis


class InsufficientConstraints(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# single residuals


def reprojection_residual(pose: RigidPose, landmark, pixel, K: CameraIntrinsics, offset: float = 0.0):
    """Pixel residual of a landmark seen from ``pose`` and Jacobians (2x6 pose, 2x3 landmark).

    ``offset`` shifts the camera along its own x axis (right camera of a stereo rig).
    """
    R, p = pose.R, pose.translation
    d = np.asarray(landmark, float) - p
    xc = R @ d - np.array([offset, 0.0, 0.0])
    uv, Jp = project_camera_point(xc, K)
    J_pose = np.hstack([Jp @ R @ skew(d), -Jp @ R])
    J_lm = Jp @ R
    return uv - np.asarray(pixel, float), J_pose, J_lm


def point_to_plane_residual(landmark, p_r, n_r):
    """Signed distance of the landmark from the plane through ``p_r`` with normal ``n_r``."""
    n_r = np.asarray(n_r, float)
    r = float(n_r @ (np.asarray(landmark, float) - np.asarray(p_r, float)))
    return r, n_r.reshape(1, 3)


def point_to_point_residual(landmark, q):
    return np.asarray(landmark, float) - np.asarray(q, float), np.eye(3)


def huber(r, delta: float):
    """Huber cost and IRLS weight of a residual norm."""
    r = np.abs(np.asarray(r, float))
    small = r <= delta
    cost = np.where(small, 0.5 * r**2, delta * r - 0.5 * delta**2)
    weight = np.where(small, 1.0, delta / np.maximum(r, 1e-300))
    if cost.ndim == 0:
        return float(cost), float(weight)
    return cost, weight


# ---------------------------------------------------------------------------
# graph


@dataclass
class SolverConfig:
    max_iters: int = 100
    damping: float = 1e-4
    cost_tol: float = 1e-9
    step_tol: float = 1e-10
    huber_px: float = 2.0
    huber_plane: float = 0.02
    huber_point: float = 0.05
    sigma_px: float = 0.5
    sigma_lidar: float = 0.01
    reassociate_every: int = 5
    max_reassociations: int = 3
    allow_singular: bool = False
    check_rank: bool = True
    null_tol: float = 1e-8

    def to_dict(self) -> dict:
        return dict(vars(self))


@dataclass
class CalibrationGraph:
    poses: list[RigidPose]
    landmarks: np.ndarray
    intrinsics: CameraIntrinsics
    obs_pose: np.ndarray
    obs_landmark: np.ndarray
    obs_uv: np.ndarray
    obs_camera: np.ndarray | None = None
    baseline: float = 0.0
    on_target: np.ndarray | None = None
    landmark_ids: np.ndarray | None = None
    keyframe_ids: np.ndarray | None = None
    plane_landmark: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=int))
    plane_point: np.ndarray = field(default_factory=lambda: np.zeros((0, 3)))
    plane_normal: np.ndarray = field(default_factory=lambda: np.zeros((0, 3)))
    point_landmark: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=int))
    point_target: np.ndarray = field(default_factory=lambda: np.zeros((0, 3)))

    def __post_init__(self):
        self.landmarks = np.asarray(self.landmarks, float).reshape(-1, 3)
        m = len(self.landmarks)
        self.obs_pose = np.asarray(self.obs_pose, int)
        self.obs_landmark = np.asarray(self.obs_landmark, int)
        self.obs_uv = np.asarray(self.obs_uv, float).reshape(-1, 2)
        if self.obs_camera is None:
            self.obs_camera = np.zeros(len(self.obs_pose), int)
        if self.on_target is None:
            self.on_target = np.ones(m, bool)
        if self.landmark_ids is None:
            self.landmark_ids = np.arange(m)
        if self.keyframe_ids is None:
            self.keyframe_ids = np.arange(len(self.poses))
        self.validate()

    @property
    def n_poses(self) -> int:
        return len(self.poses)

    @property
    def n_landmarks(self) -> int:
        return len(self.landmarks)

    @property
    def dim(self) -> int:
        return 6 * self.n_poses + 3 * self.n_landmarks

    @property
    def extrinsics(self) -> RigidPose:
        return self.poses[0]

    def validate(self):
        if not self.poses:
            raise ValueError("graph needs at least one pose")
        m, k = self.n_landmarks, self.n_poses
        for name, arr, hi in (
            ("observation pose", self.obs_pose, k),
            ("observation landmark", self.obs_landmark, m),
            ("plane landmark", self.plane_landmark, m),
            ("point landmark", self.point_landmark, m),
        ):
            if len(arr) and (arr.min() < 0 or arr.max() >= hi):
                raise ValueError(f"{name} index out of range")

    def set_plane_factors(self, landmark_idx, points, normals):
        self.plane_landmark = np.asarray(landmark_idx, int).reshape(-1)
        self.plane_point = np.asarray(points, float).reshape(-1, 3)
        self.plane_normal = np.asarray(normals, float).reshape(-1, 3)
        self.validate()

    def set_point_factors(self, landmark_idx, targets):
        self.point_landmark = np.asarray(landmark_idx, int).reshape(-1)
        self.point_target = np.asarray(targets, float).reshape(-1, 3)
        self.validate()

    def copy(self) -> "CalibrationGraph":
        return CalibrationGraph(
            poses=list(self.poses),
            landmarks=self.landmarks.copy(),
            intrinsics=self.intrinsics,
            obs_pose=self.obs_pose,
            obs_landmark=self.obs_landmark,
            obs_uv=self.obs_uv,
            obs_camera=self.obs_camera,
            baseline=self.baseline,
            on_target=self.on_target,
            landmark_ids=self.landmark_ids,
            keyframe_ids=self.keyframe_ids,
            plane_landmark=self.plane_landmark,
            plane_point=self.plane_point,
            plane_normal=self.plane_normal,
            point_landmark=self.point_landmark,
            point_target=self.point_target,
        )

    def retract(self, delta: np.ndarray) -> "CalibrationGraph":
        """New graph with the error-state step ``delta`` applied."""
        g = self.copy()
        k = self.n_poses
        dp = delta[: 6 * k].reshape(k, 6)
        g.poses = [
            RigidPose.from_matrix(apply_rotation_error(pose.R, d[:3]), pose.translation + d[3:])
            for pose, d in zip(self.poses, dp)
        ]
        g.landmarks = self.landmarks + delta[6 * k :].reshape(-1, 3)
        return g


# ---------------------------------------------------------------------------
# linearization


@dataclass
class Linearization:
    J: sp.csr_matrix
    r: np.ndarray
    cost: float
    terms: dict
    behind: int = 0


def _huber_rows(r_white: np.ndarray, delta: float):
    """Per-factor Huber cost and sqrt-weights for whitened residual blocks (n, d)."""
    norm = np.linalg.norm(r_white, axis=1)
    cost, w = huber(norm, delta)
    return np.atleast_1d(cost), np.sqrt(np.atleast_1d(w))


def linearize(graph: CalibrationGraph, cfg: SolverConfig, jacobian: bool = True, robust: bool = True) -> Linearization:
    """Whitened, Huber-reweighted residual vector and sparse Jacobian."""
    K = graph.intrinsics
    kp = graph.n_poses
    lm0 = 6 * kp
    Rs = np.array([p.R for p in graph.poses])
    ps = np.array([p.translation for p in graph.poses])
    rows, cols, vals, res = [], [], [], []
    terms = {}
    row = 0

    # reprojection
    k, j = graph.obs_pose, graph.obs_landmark
    no = len(k)
    behind = 0
    if no:
        R = Rs[k]
        d = graph.landmarks[j] - ps[k]
        xc = np.einsum("nab,nb->na", R, d)
        xc[:, 0] -= graph.obs_camera * graph.baseline
        z = xc[:, 2]
        valid = z > DEPTH_EPS
        behind = int(np.count_nonzero(~valid))
        zs = np.where(valid, z, 1.0)
        uv = np.stack([K.fx * xc[:, 0] / zs + K.cx, K.fy * xc[:, 1] / zs + K.cy], axis=1)
        r = (uv - graph.obs_uv) / cfg.sigma_px
        if robust:
            cost, sw = _huber_rows(r, cfg.huber_px / cfg.sigma_px)
        else:
            cost, sw = 0.5 * np.sum(r**2, axis=1), np.ones(no)
        # a point behind the camera carries a fixed large penalty and no gradient
        big = cfg.huber_px / cfg.sigma_px
        cost = np.where(valid, cost, big * 1e3)
        sw = np.where(valid, sw, 0.0)
        r = np.where(valid[:, None], r, 0.0) * sw[:, None]
        terms["reprojection"] = float(cost.sum())
        res.append(r.reshape(-1))
        if jacobian:
            Jp = np.zeros((no, 2, 3))
            Jp[:, 0, 0] = K.fx / zs
            Jp[:, 0, 2] = -K.fx * xc[:, 0] / zs**2
            Jp[:, 1, 1] = K.fy / zs
            Jp[:, 1, 2] = -K.fy * xc[:, 1] / zs**2
            Jp *= (sw / cfg.sigma_px)[:, None, None]
            JR = Jp @ R
            Jth = np.einsum("nab,nbc->nac", JR, skew_batch(d))
            Jpose = np.concatenate([Jth, -JR], axis=2)  # (n, 2, 6)
            r_idx = row + 2 * np.arange(no)[:, None] + np.arange(2)[None, :]
            pc = 6 * k[:, None] + np.arange(6)[None, :]
            lc = lm0 + 3 * j[:, None] + np.arange(3)[None, :]
            rows.append(np.repeat(r_idx[:, :, None], 6, axis=2).ravel())
            cols.append(np.repeat(pc[:, None, :], 2, axis=1).ravel())
            vals.append(Jpose.ravel())
            rows.append(np.repeat(r_idx[:, :, None], 3, axis=2).ravel())
            cols.append(np.repeat(lc[:, None, :], 2, axis=1).ravel())
            vals.append(JR.ravel())
        row += 2 * no

    # point to plane
    npl = len(graph.plane_landmark)
    if npl:
        j = graph.plane_landmark
        r = np.einsum("ni,ni->n", graph.plane_normal, graph.landmarks[j] - graph.plane_point) / cfg.sigma_lidar
        if robust:
            cost, sw = _huber_rows(r[:, None], cfg.huber_plane / cfg.sigma_lidar)
        else:
            cost, sw = 0.5 * r**2, np.ones(npl)
        terms["plane"] = float(cost.sum())
        res.append(r * sw)
        if jacobian:
            rows.append(np.repeat(row + np.arange(npl), 3))
            cols.append((lm0 + 3 * j[:, None] + np.arange(3)[None, :]).ravel())
            vals.append((graph.plane_normal * (sw / cfg.sigma_lidar)[:, None]).ravel())
        row += npl

    # point to point
    npt = len(graph.point_landmark)
    if npt:
        j = graph.point_landmark
        r = (graph.landmarks[j] - graph.point_target) / cfg.sigma_lidar
        if robust:
            cost, sw = _huber_rows(r, cfg.huber_point / cfg.sigma_lidar)
        else:
            cost, sw = 0.5 * np.sum(r**2, axis=1), np.ones(npt)
        terms["point"] = float(cost.sum())
        res.append((r * sw[:, None]).ravel())
        if jacobian:
            rows.append(row + np.arange(3 * npt))
            cols.append((lm0 + 3 * j[:, None] + np.arange(3)[None, :]).ravel())
            vals.append(np.repeat(sw / cfg.sigma_lidar, 3))
        row += 3 * npt

    rvec = np.concatenate(res) if res else np.zeros(0)
    J = None
    if jacobian:
        J = sp.csr_matrix(
            (np.concatenate(vals) if vals else [], (np.concatenate(rows) if rows else [], np.concatenate(cols) if cols else [])),
            shape=(row, graph.dim),
        )
    return Linearization(J, rvec, float(sum(terms.values())), terms, behind)


def normal_equation_nullspace(graph: CalibrationGraph, cfg: SolverConfig | None = None, tol: float | None = None):
    """Numerical nullspace of the whitened Jacobian (same as that of J^T J).

    Returns ``(null_dim, basis (dim, null_dim), singular values)``.
    """
    cfg = cfg or SolverConfig()
    tol = cfg.null_tol if tol is None else tol
    lin = linearize(graph, cfg, robust=False)
    J = lin.J.toarray()
    if J.shape[0] > J.shape[1]:
        # the triangular factor has the same singular values and right vectors
        J = scipy.linalg.qr(J, mode="r", overwrite_a=True, check_finite=False)[0][: J.shape[1]]
    _, s, vt = np.linalg.svd(J, full_matrices=True)
    full = np.zeros(graph.dim)
    full[: len(s)] = s
    smax = s.max() if len(s) else 0.0
    null = full <= tol * smax
    return int(null.sum()), vt[null].T, s


# ---------------------------------------------------------------------------
# solver


@dataclass
class SolveReport:
    iterations: int
    initial_cost: float
    final_cost: float
    cost_terms: dict
    converged: bool
    termination: str
    extrinsics: RigidPose
    cost_trace: list = field(default_factory=list)
    null_dim: int = 0
    condition: float = np.inf
    reassociations: int = 0

    def to_dict(self) -> dict:
        return {
            "iterations": self.iterations,
            "initial_cost": self.initial_cost,
            "final_cost": self.final_cost,
            "cost_terms": self.cost_terms,
            "converged": self.converged,
            "termination": self.termination,
            "extrinsics": self.extrinsics.to_dict(),
            "cost_trace": list(self.cost_trace),
            "null_dim": self.null_dim,
            "condition": self.condition,
            "reassociations": self.reassociations,
        }


def schur_solve(H: sp.spmatrix, g: np.ndarray, n_pose_dims: int, lam: float) -> np.ndarray:
    """Solve (H + lam diag(H)) x = -g, eliminating 3x3 landmark blocks first."""
    H = sp.csr_matrix(H)
    diag = H.diagonal()
    floor = 1e-12 * max(diag.max(initial=0.0), 1e-300)
    Hd = H + sp.diags(lam * np.maximum(diag, floor) + (diag <= floor) * floor)
    npd = n_pose_dims
    A = Hd[:npd, :npd].toarray()
    B = Hd[:npd, npd:]
    C = Hd[npd:, npd:]
    gp, gl = g[:npd], g[npd:]
    m = C.shape[0] // 3
    if m:
        Cd = C.toarray()
        blocks = np.stack([Cd[3 * i : 3 * i + 3, 3 * i : 3 * i + 3] for i in range(m)])
        Cinv = sp.block_diag(np.linalg.inv(blocks), format="csr")
        BCi = (B @ Cinv).tocsr()
        S = A - (BCi @ B.T).toarray()
        rhs = -gp + BCi @ gl
    else:
        S, rhs, Cinv = A, -gp, None
    if npd:
        try:
            xp = scipy.linalg.cho_solve(scipy.linalg.cho_factor(S), rhs)
        except np.linalg.LinAlgError:
            xp = np.linalg.lstsq(S, rhs, rcond=None)[0]
    else:
        xp = np.zeros(0)
    xl = Cinv @ (-gl - B.T @ xp) if m else np.zeros(0)
    return np.concatenate([xp, xl])


def solve(graph: CalibrationGraph, cfg: SolverConfig | None = None, reassociate=None):
    """Levenberg-damped Gauss-Newton with Huber IRLS.

    ``reassociate(graph) -> bool`` may replace the laser factors of ``graph``
    in place from the current landmark estimates; it is called every
    ``cfg.reassociate_every`` accepted iterations and at convergence, at most
    ``cfg.max_reassociations`` times that change anything, and returns whether
    anything changed.

    Returns ``(graph, report)``.
    """
    cfg = cfg or SolverConfig()
    null_dim, condition = 0, np.inf
    if cfg.check_rank:
        null_dim, basis, s = normal_equation_nullspace(graph, cfg)
        nz = s[s > 0]
        condition = float(nz.max() / nz.min()) if len(nz) else np.inf
        if null_dim and not cfg.allow_singular:
            raise SingularNormalEquations(
                f"normal equations have a {null_dim}-dimensional nullspace", condition, null_dim, basis
            )
    lin = linearize(graph, cfg)
    initial = lin.cost
    trace = [initial]
    lam = cfg.damping
    npd = 6 * graph.n_poses
    it = 0
    accepted = 0
    reassoc = 0
    termination = "max_iters"
    converged = False
    while it < cfg.max_iters:
        if lin.cost <= 0.0:
            converged, termination = True, "zero_cost"
            break
        H = (lin.J.T @ lin.J).tocsr()
        g = lin.J.T @ lin.r
        step_taken = False
        while lam < 1e12:
            delta = schur_solve(H, g, npd, lam)
            cand = graph.retract(delta)
            new = linearize(cand, cfg, jacobian=False)
            if np.isfinite(new.cost) and new.cost <= lin.cost:
                step_taken = True
                break
            lam *= 10.0
        it += 1
        if not step_taken:
            termination = "damping_exhausted"
            converged = True
            break
        rel = (lin.cost - new.cost) / max(lin.cost, 1e-300)
        graph = cand
        lam = max(lam / 10.0, 1e-12)
        accepted += 1
        lin = linearize(graph, cfg)
        trace.append(lin.cost)
        small = np.linalg.norm(delta) < cfg.step_tol or rel < cfg.cost_tol
        due = small or accepted % cfg.reassociate_every == 0
        if reassociate is not None and due and reassoc < cfg.max_reassociations:
            if reassociate(graph):
                reassoc += 1
                lin = linearize(graph, cfg)
                trace.append(lin.cost)
                continue
        if small:
            converged = True
            termination = "step_tol" if np.linalg.norm(delta) < cfg.step_tol else "cost_tol"
            break
    report = SolveReport(
        iterations=it,
        initial_cost=initial,
        final_cost=lin.cost,
        cost_terms=lin.terms,
        converged=converged,
        termination=termination,
        extrinsics=graph.extrinsics,
        cost_trace=trace,
        null_dim=null_dim,
        condition=condition,
        reassociations=reassoc,
    )
    return graph, report


# ---------------------------------------------------------------------------
# rigid pre-alignment


def transform_graph(graph: CalibrationGraph, Rg: np.ndarray, tg: np.ndarray) -> CalibrationGraph:
    """Move the whole graph by ``x -> Rg x + tg``; pixel residuals are unchanged."""
    g = graph.copy()
    g.landmarks = graph.landmarks @ Rg.T + tg
    g.poses = [RigidPose.from_matrix(p.R @ Rg.T, Rg @ p.translation + tg) for p in graph.poses]
    return g


def _laser_terms(graph: CalibrationGraph, cfg: SolverConfig):
    """Whitened, reweighted laser residuals and their Jacobian w.r.t. a rigid motion [w, t]."""
    res, jac, cost = [], [], 0.0
    if len(graph.plane_landmark):
        f = graph.landmarks[graph.plane_landmark]
        n = graph.plane_normal
        r = np.einsum("ni,ni->n", n, f - graph.plane_point) / cfg.sigma_lidar
        c, sw = _huber_rows(r[:, None], cfg.huber_plane / cfg.sigma_lidar)
        cost += float(c.sum())
        res.append(r * sw)
        jac.append(np.hstack([np.cross(f, n), n]) * (sw / cfg.sigma_lidar)[:, None])
    if len(graph.point_landmark):
        f = graph.landmarks[graph.point_landmark]
        r = (f - graph.point_target) / cfg.sigma_lidar
        c, sw = _huber_rows(r, cfg.huber_point / cfg.sigma_lidar)
        cost += float(c.sum())
        res.append((r * sw[:, None]).ravel())
        J = np.concatenate([-skew_batch(f), np.broadcast_to(np.eye(3), (len(f), 3, 3))], axis=2)
        jac.append((J * (sw / cfg.sigma_lidar)[:, None, None]).reshape(-1, 6))
    if not res:
        raise InsufficientConstraints("graph has no laser factors")
    return np.concatenate(res), np.concatenate(jac), cost


def rigid_align(graph: CalibrationGraph, cfg: SolverConfig | None = None, reassociate=None, max_iters: int = 50, rounds: int = 5):
    """Align the camera-side map to the laser factors as one rigid body.

    Only the 6-DoF map-to-laser motion is estimated; relative keyframe poses
    and landmark positions are held as given. Returns the moved graph.
    """
    cfg = cfg or SolverConfig()
    for _ in range(rounds):
        lam = cfg.damping
        r, J, cost = _laser_terms(graph, cfg)
        for _ in range(max_iters):
            H = J.T @ J
            g = J.T @ r
            improved = False
            while lam < 1e12:
                A = H + lam * np.diag(np.maximum(np.diag(H), 1e-12 * max(np.trace(H), 1e-300)))
                x = np.linalg.lstsq(A, -g, rcond=None)[0]
                cand = transform_graph(graph, so3_exp(x[:3]), x[3:])
                r2, J2, cost2 = _laser_terms(cand, cfg)
                if cost2 <= cost:
                    improved = True
                    break
                lam *= 10.0
            if not improved:
                break
            rel = (cost - cost2) / max(cost, 1e-300)
            graph, r, J, cost = cand, r2, J2, cost2
            lam = max(lam / 10.0, 1e-12)
            if np.linalg.norm(x) < cfg.step_tol or rel < cfg.cost_tol:
                break
        if reassociate is None or not reassociate(graph):
            break
    return graph
