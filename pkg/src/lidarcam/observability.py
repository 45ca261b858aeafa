"""Error-state observability of the camera-landmark system with laser anchors.

Error state ordering: ``[theta (3), p (3), p_f1 (3), ..., p_fm (3)]`` where
``theta`` and ``p`` are the rotation and position errors of the camera at the
start of the window ``t_s`` (conventions as in :mod:`lidarcam.geometry`).

Each block row of the observability matrix is a measurement Jacobian pushed
back to ``t_s`` through the error-state transition matrices. Three kinds of
rows exist: stereo projections (2 rows), point-to-plane distances (1 row) and
point-to-point residuals (3 rows). The rank decision is numeric.

The analytic nullspace bases are built by right-multiplying the pure-SLAM
basis ``N_slam`` (translation columns first, then rotations about the laser
origin) with column-operation matrices ``A1..A4``; the selected columns of
``N_slam @ A`` are the predicted unobservable directions.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import subspace_angles

from .geometry import CameraIntrinsics, RigidPose, project_camera_point, skew

KINDS = ("proj", "plane", "point")
# wide angle so that all scenario features fit in one view
DEFAULT_K = CameraIntrinsics(200.0, 200.0, 320.0, 240.0, 640, 480)


class EmptySchedule(ValueError):
    pass


class ScenarioDegenerate(ValueError):
    """The requested scenario violates its own preconditions."""


class AnalyticDegenerate(ZeroDivisionError):
    """An analytic column operation would divide by (near) zero."""


def state_dim(m: int) -> int:
    return 6 + 3 * m


# ---------------------------------------------------------------------------
# building blocks


def transition_matrix(p_k, p_k1, m: int) -> np.ndarray:
    """Error-state transition from ``t_k`` to ``t_{k+1}`` given camera positions.

    Identity except the position/rotation block ``-skew(p_{k+1} - p_k)``.
    Positions are the only input because the block depends on nothing else,
    which also makes ``transition_matrix(p_a, p_c)`` equal the product of the
    two steps through any ``p_b``.
    """
    p_k = p_k.p if isinstance(p_k, RigidPose) else np.asarray(p_k, float)
    p_k1 = p_k1.p if isinstance(p_k1, RigidPose) else np.asarray(p_k1, float)
    Phi = np.eye(state_dim(m))
    Phi[3:6, 0:3] = -skew(p_k1 - p_k)
    return Phi


def measurement_jacobian(pose: RigidPose, landmarks, i: int, K: CameraIntrinsics = DEFAULT_K, offset: float = 0.0):
    """Projection Jacobian ``H_ik`` w.r.t. the error state at ``t_k``.

    ``offset`` shifts the camera along its x axis (right stereo camera uses
    ``-baseline``); it does not change the structure.
    """
    landmarks = np.atleast_2d(landmarks)
    m = len(landmarks)
    pf = landmarks[i]
    xc = pose.to_camera(pf) + np.array([offset, 0.0, 0.0])
    _, J = project_camera_point(xc, K)
    JR = J @ pose.R
    H = np.zeros((2, state_dim(m)))
    H[:, 0:3] = JR @ skew(pf - pose.p)
    H[:, 3:6] = -JR
    H[:, 6 + 3 * i : 9 + 3 * i] = JR
    return H


def projection_block(trajectory, landmarks, k: int, i: int, K: CameraIntrinsics = DEFAULT_K, s: int = 0, form: str = "closed", offset: float = 0.0):
    """Projection rows of feature ``i`` at time ``k`` expressed at ``t_s``.

    ``form="product"`` multiplies ``H_ik`` by every transition from ``s`` to
    ``k``; ``form="closed"`` uses ``J R_k [skew(p_f - p_s), -I, .., I, ..]``.
    """
    landmarks = np.atleast_2d(landmarks)
    m = len(landmarks)
    if form == "product":
        M = measurement_jacobian(trajectory[k], landmarks, i, K, offset)
        for j in range(k - 1, s - 1, -1):
            M = M @ transition_matrix(trajectory[j], trajectory[j + 1], m)
        return M
    if form != "closed":
        raise ValueError(f"unknown form {form!r}")
    pose = trajectory[k]
    pf = landmarks[i]
    _, J = project_camera_point(pose.to_camera(pf) + np.array([offset, 0.0, 0.0]), K)
    JR = J @ pose.R
    M = np.zeros((2, state_dim(m)))
    M[:, 0:3] = JR @ skew(pf - trajectory[s].p)
    M[:, 3:6] = -JR
    M[:, 6 + 3 * i : 9 + 3 * i] = JR
    return M


def plane_block(normal, i: int, m: int) -> np.ndarray:
    """Point-to-plane row of feature ``i`` (0-based)."""
    n = np.asarray(normal, float)
    if abs(np.linalg.norm(n) - 1.0) > 1e-9:
        raise ValueError("plane normal must be unit length")
    row = np.zeros((1, state_dim(m)))
    row[0, 6 + 3 * i : 9 + 3 * i] = n
    return row


def point_block(i: int, m: int) -> np.ndarray:
    """Point-to-point rows of feature ``i`` (0-based)."""
    rows = np.zeros((3, state_dim(m)))
    rows[:, 6 + 3 * i : 9 + 3 * i] = np.eye(3)
    return rows


def slam_nullspace(p_s, landmarks) -> np.ndarray:
    """Gauge directions of pure visual SLAM, shape ``(6 + 3m, 6)``.

    Columns 0-2 translate everything, columns 3-5 rotate everything about the
    laser origin.
    """
    p_s = p_s.p if isinstance(p_s, RigidPose) else np.asarray(p_s, float)
    landmarks = np.atleast_2d(landmarks)
    m = len(landmarks)
    N = np.zeros((state_dim(m), 6))
    N[0:3, 3:6] = np.eye(3)
    N[3:6, 0:3] = np.eye(3)
    N[3:6, 3:6] = -skew(p_s)
    for i, pf in enumerate(landmarks):
        N[6 + 3 * i : 9 + 3 * i, 0:3] = np.eye(3)
        N[6 + 3 * i : 9 + 3 * i, 3:6] = -skew(pf)
    return N


# ---------------------------------------------------------------------------
# stacking


@dataclass(frozen=True)
class Measurement:
    k: int
    i: int
    kind: str = "proj"
    normal: tuple | None = None  # plane rows only

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown measurement kind {self.kind!r}")
        if self.kind == "plane" and self.normal is None:
            raise ValueError("plane measurement needs a normal")


@dataclass
class RowBlock:
    k: int
    i: int
    kind: str
    start: int
    stop: int


@dataclass
class ObservabilityMatrix:
    matrix: np.ndarray
    rows: list[RowBlock]
    window: tuple[int, int]
    m: int
    skipped: list[str] = field(default_factory=list)

    def __post_init__(self):
        if self.matrix.shape[1] != state_dim(self.m):
            raise ValueError("column count does not match landmark count")

    def block(self, k: int, i: int, kind: str) -> np.ndarray:
        for r in self.rows:
            if (r.k, r.i, r.kind) == (k, i, kind):
                return self.matrix[r.start : r.stop]
        raise KeyError((k, i, kind))


def _visible(pose: RigidPose, x, K: CameraIntrinsics, offset: float = 0.0) -> bool:
    xc = pose.to_camera(x) + np.array([offset, 0.0, 0.0])
    if xc[2] <= 1e-6:
        return False
    uv, _ = project_camera_point(xc, K)
    return bool(K.in_bounds(uv))


def build_observability(trajectory, landmarks, schedule, K: CameraIntrinsics = DEFAULT_K, s: int | None = None) -> ObservabilityMatrix:
    """Stack measurement blocks over the window spanned by ``schedule``.

    Rows are ordered by time, then feature, then kind. Projection rows whose
    feature is behind the camera or outside the image are skipped and noted.
    """
    schedule = list(schedule)
    if not schedule or not len(trajectory):
        raise EmptySchedule("need at least one time step and one measurement")
    landmarks = np.atleast_2d(np.asarray(landmarks, float))
    m = len(landmarks)
    order = sorted(schedule, key=lambda q: (q.k, q.i, KINDS.index(q.kind)))
    s = order[0].k if s is None else s
    end = order[-1].k
    blocks, rows, skipped = [], [], []
    n = 0
    for q in order:
        if not (0 <= q.i < m) or not (s <= q.k < len(trajectory)):
            raise IndexError(f"measurement {q} outside trajectory/landmarks")
        if q.kind == "proj":
            if not _visible(trajectory[q.k], landmarks[q.i], K):
                skipped.append(f"k={q.k} i={q.i}: feature not visible")
                continue
            b = projection_block(trajectory, landmarks, q.k, q.i, K, s)
        elif q.kind == "plane":
            b = plane_block(q.normal, q.i, m)
        else:
            b = point_block(q.i, m)
        blocks.append(b)
        rows.append(RowBlock(q.k, q.i, q.kind, n, n + len(b)))
        n += len(b)
    if not blocks:
        raise EmptySchedule("every scheduled measurement was skipped")
    return ObservabilityMatrix(np.vstack(blocks), rows, (s, end), m, skipped)


# ---------------------------------------------------------------------------
# numeric nullspace


@dataclass
class NullspaceBasis:
    basis: np.ndarray  # (n, dim), orthonormal columns
    dim: int
    singular_values: np.ndarray
    scale: float

    def residual(self, M: np.ndarray) -> float:
        """Largest ``|M v| / |M|`` over basis vectors (spectral norm of M)."""
        if self.dim == 0:
            return 0.0
        nrm = np.linalg.norm(M, 2)
        return float(np.max(np.linalg.norm(M @ self.basis, axis=0)) / nrm) if nrm > 0 else 0.0


def nullspace(M, rtol: float = 1e-8) -> NullspaceBasis:
    """SVD nullspace with a relative rank threshold.

    The matrix is first scaled so its largest singular value is 10, which
    makes the decision independent of units.
    """
    M = np.atleast_2d(np.asarray(M, float))
    if M.size == 0:
        raise ValueError("empty matrix")
    _, s, vt = np.linalg.svd(M, full_matrices=True)
    smax = s[0] if len(s) else 0.0
    scale = 10.0 / smax if smax > 0 else 1.0
    s = s * scale
    rank = int(np.sum(s >= rtol * 10.0)) if smax > 0 else 0
    basis = vt[rank:].T
    return NullspaceBasis(basis, M.shape[1] - rank, s, scale)


def max_principal_angle(A, B) -> float:
    """Largest principal angle between the column spans of A and B (radians)."""
    A, B = np.atleast_2d(A), np.atleast_2d(B)
    if A.shape[1] != B.shape[1]:
        return np.pi / 2
    if A.shape[1] == 0:
        return 0.0
    return float(np.max(subspace_angles(A, B)))


def relative_product(M, N) -> float:
    """``|M N| / (|M| |N|)`` in spectral norm."""
    den = np.linalg.norm(M, 2) * np.linalg.norm(N, 2)
    return float(np.linalg.norm(M @ N, 2) / den) if den > 0 else 0.0


# ---------------------------------------------------------------------------
# analytic column operations

_EPS = 1e-12


def a1_matrix(n) -> np.ndarray:
    """Single plane: columns 1, 2, 5 of ``N_slam @ A1`` are unobservable."""
    n1, n2, n3 = np.asarray(n, float)
    if abs(n1) < _EPS:
        raise AnalyticDegenerate("A1 needs n_1 != 0")
    A = np.eye(6)
    A[0, 1] = -n2 / n1
    A[0, 2] = -n3 / n1
    A[3:6, 5] = [n1, n2, n3]
    return A


def plane_lambda(na, nb) -> float:
    na1, na2, na3 = na
    nb1, nb2, nb3 = nb
    if abs(na1) < _EPS:
        raise AnalyticDegenerate("A2 needs n_a1 != 0")
    den = nb2 * na1 - nb1 * na2
    if abs(den) < _EPS:
        raise AnalyticDegenerate("A2 needs n_b2 n_a1 - n_b1 n_a2 != 0")
    return (nb3 * na1 - nb1 * na3) / den


def a2_matrix(na, nb) -> np.ndarray:
    """Two planes: column 2 of ``N_slam @ A2`` is unobservable."""
    na = np.asarray(na, float)
    lam = plane_lambda(na, np.asarray(nb, float))
    A = np.eye(6)
    A[0, 1] = -na[1] / na[0]
    A[0, 2] = na[1] / na[0] * lam - na[2] / na[0]
    A[1, 2] = -lam
    return A


def a3_matrix(p) -> np.ndarray:
    """Single point: columns 3-5 of ``N_slam @ A3`` are unobservable."""
    A = np.eye(6)
    A[0:3, 3:6] = skew(p)
    return A


def a4_matrix(p_i, p_j) -> np.ndarray:
    """Two points: column 3 of ``N_slam @ A4`` is unobservable.

    Only that column differs from the identity. Its rotation part is the
    direction through both points scaled to unit first component; its
    translation part is ``p_j x omega`` so the axis passes through ``p_j``.
    """
    p_i, p_j = np.asarray(p_i, float), np.asarray(p_j, float)
    d = p_i - p_j
    if abs(d[0]) < _EPS:
        raise AnalyticDegenerate("A4 needs p_i1 != p_j1")
    omega = d / d[0]
    A = np.eye(6)
    A[0:3, 3] = np.cross(p_j, omega)
    A[3:6, 3] = omega
    return A


NULL_COLUMNS = {"a1": [1, 2, 5], "a2": [2], "a3": [3, 4, 5], "a4": [3]}


def analytic_nullspace(case: str, n_items: int, p_s, landmarks, normals=None, points=None) -> np.ndarray:
    """``N1..N4`` for ``case`` in {plane, point} with 1 or 2 items."""
    N = slam_nullspace(p_s, landmarks)
    if case == "plane" and n_items == 1:
        A, key = a1_matrix(normals[0]), "a1"
    elif case == "plane" and n_items == 2:
        A, key = a2_matrix(normals[0], normals[1]), "a2"
    elif case == "point" and n_items == 1:
        A, key = a3_matrix(points[0]), "a3"
    elif case == "point" and n_items == 2:
        A, key = a4_matrix(points[0], points[1]), "a4"
    else:
        raise ValueError(f"no analytic basis for {n_items} {case}(s)")
    return (N @ A)[:, NULL_COLUMNS[key]]


# ---------------------------------------------------------------------------
# scenarios


def look_at(position, target, roll: float = 0.0) -> RigidPose:
    """Pose at ``position`` whose optical axis points at ``target``."""
    position = np.asarray(position, float)
    z = np.asarray(target, float) - position
    z /= np.linalg.norm(z)
    up = np.array([0.0, 0.0, 1.0]) if abs(z[2]) < 0.9 else np.array([0.0, 1.0, 0.0])
    x = np.cross(up, z)
    x /= np.linalg.norm(x)
    y = np.cross(z, x)
    R = np.stack([x, y, z])
    c, s = np.cos(roll), np.sin(roll)
    R = np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]]) @ R
    return RigidPose.from_matrix(R, position)


def scenario_trajectory(target, n_keyframes: int = 3, radius: float = 0.3) -> list[RigidPose]:
    """Deterministic, non-degenerate camera motion around the origin."""
    out = []
    for k in range(n_keyframes):
        a = 2.0 * np.pi * k / max(n_keyframes, 1) + 0.3
        pos = radius * np.array([np.cos(a), np.sin(a), 0.4 * np.sin(2.0 * a + 0.5)]) + 0.05 * k
        out.append(look_at(pos, target, roll=0.1 * np.sin(1.7 * k)))
    return out


_PLANE_OFFSETS = np.array([[0.6, 0.7], [1.3, 0.9], [0.8, 1.4]])


def plane_features(normal, distance: float, per_plane: int = 3) -> np.ndarray:
    """Non-collinear points on ``n . x = distance``, offset into the positive octant."""
    n = np.asarray(normal, float)
    n = n / np.linalg.norm(n)
    a = np.cross(n, [0.0, 0.0, 1.0]) if abs(n[2]) < 0.9 else np.cross(n, [1.0, 0.0, 0.0])
    a /= np.linalg.norm(a)
    b = np.cross(n, a)
    # orient the in-plane axes towards the positive octant, where the default cameras look
    a = a if a.sum() >= 0 else -a
    b = b if b.sum() >= 0 else -b
    offs = np.array([_PLANE_OFFSETS[j % 3] + 0.37 * (j // 3) for j in range(per_plane)])
    return distance * n + offs[:, :1] * a + offs[:, 1:] * b


DEFAULT_NORMALS = np.eye(3)
DEFAULT_POINTS = np.array([[1.0, 2.0, 3.0], [2.0, 1.0, 3.5], [1.5, 2.6, 2.2]])


@dataclass
class CaseReport:
    case: str
    n_items: int
    null_dim: int
    expected_dim: int
    basis: np.ndarray
    singular_values: np.ndarray
    null_residual: float
    analytic_residual: float | None = None
    principal_angle: float | None = None
    analytic_zero_columns: list[int] | None = None
    notes: list[str] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        ok = self.null_dim == self.expected_dim
        if self.analytic_residual is not None:
            ok &= self.analytic_residual <= 1e-10 and self.principal_angle < 1e-6
        return bool(ok)

    def to_dict(self) -> dict:
        return {
            "case": self.case,
            "n_items": self.n_items,
            "null_dim": self.null_dim,
            "expected_dim": self.expected_dim,
            "passed": self.passed,
            "basis": self.basis.tolist(),
            "singular_values": self.singular_values.tolist(),
            "null_residual": self.null_residual,
            "analytic_residual": self.analytic_residual,
            "principal_angle": self.principal_angle,
            "analytic_zero_columns": self.analytic_zero_columns,
            "notes": list(self.notes),
        }


def zero_columns(M, NA, rtol: float = 1e-10) -> list[int]:
    """Indices of columns of ``M @ NA`` that vanish relative to ``|M| |NA_j|``."""
    prod = M @ NA
    scale = np.linalg.norm(M, 2) * np.maximum(np.linalg.norm(NA, axis=0), 1e-300)
    return [int(j) for j in np.flatnonzero(np.linalg.norm(prod, axis=0) <= rtol * scale)]


def _finish(case, n_items, M, obs, p_s, landmarks, normals, points, rtol):
    ns = nullspace(M, rtol)
    rep = CaseReport(case, n_items, ns.dim, {1: 3, 2: 1, 3: 0}[n_items], ns.basis, ns.singular_values, ns.residual(M), notes=list(obs.skipped))
    if n_items >= 3:
        return rep
    try:
        N = analytic_nullspace(case, n_items, p_s, landmarks, normals, points)
    except AnalyticDegenerate as e:
        rep.notes.append(f"analytic basis unavailable: {e}")
        return rep
    key = {("plane", 1): "a1", ("plane", 2): "a2", ("point", 1): "a3", ("point", 2): "a4"}[(case, n_items)]
    full = slam_nullspace(p_s, landmarks)
    A = {"a1": lambda: a1_matrix(normals[0]), "a2": lambda: a2_matrix(normals[0], normals[1]), "a3": lambda: a3_matrix(points[0]), "a4": lambda: a4_matrix(points[0], points[1])}[key]()
    rep.analytic_zero_columns = zero_columns(M, full @ A)
    rep.analytic_residual = relative_product(M, N)
    rep.principal_angle = max_principal_angle(ns.basis, N)
    return rep


def verify_plane_cases(
    n_planes: int,
    trajectory=None,
    normals=None,
    per_plane: int = 3,
    distance: float = 3.0,
    n_keyframes: int = 3,
    K: CameraIntrinsics = DEFAULT_K,
    rtol: float = 1e-8,
) -> CaseReport:
    """Projection plus point-to-plane rows for features on 1, 2 or 3 planes."""
    if n_planes not in (1, 2, 3):
        raise ValueError("n_planes must be 1, 2 or 3")
    normals = DEFAULT_NORMALS[:n_planes] if normals is None else np.atleast_2d(np.asarray(normals, float))
    if len(normals) != n_planes:
        raise ValueError("one normal per plane expected")
    normals = normals / np.linalg.norm(normals, axis=1, keepdims=True)
    for a in range(n_planes):
        for b in range(a + 1, n_planes):
            if np.linalg.norm(np.cross(normals[a], normals[b])) < 1e-9:
                raise ScenarioDegenerate(f"normals {a} and {b} are collinear")
    if n_planes == 3 and np.linalg.matrix_rank(normals, tol=1e-9) < 3:
        raise ScenarioDegenerate("three normals lie in one plane")
    landmarks = np.vstack([plane_features(n, distance, per_plane) for n in normals])
    owner = np.repeat(np.arange(n_planes), per_plane)
    if trajectory is None:
        trajectory = scenario_trajectory(landmarks.mean(axis=0), n_keyframes)
    sched = []
    for k in range(len(trajectory)):
        for i in range(len(landmarks)):
            sched.append(Measurement(k, i, "proj"))
            sched.append(Measurement(k, i, "plane", tuple(normals[owner[i]])))
    obs = build_observability(trajectory, landmarks, sched, K, s=0)
    return _finish("plane", n_planes, obs.matrix, obs, trajectory[0].p, landmarks, normals, None, rtol)


def verify_point_cases(
    n_points: int,
    trajectory=None,
    points=None,
    n_keyframes: int = 3,
    K: CameraIntrinsics = DEFAULT_K,
    rtol: float = 1e-8,
) -> CaseReport:
    """Projection plus point-to-point rows for 1, 2 or 3 features."""
    if n_points not in (1, 2, 3):
        raise ValueError("n_points must be 1, 2 or 3")
    points = DEFAULT_POINTS[:n_points] if points is None else np.atleast_2d(np.asarray(points, float))
    if len(points) != n_points:
        raise ValueError("point count does not match")
    if n_points >= 2 and np.min(np.linalg.norm(points[1:] - points[0], axis=1)) < 1e-9:
        raise ScenarioDegenerate("coincident points")
    if n_points == 3 and np.linalg.norm(np.cross(points[1] - points[0], points[2] - points[0])) < 1e-9:
        raise ScenarioDegenerate("three collinear points")
    if trajectory is None:
        trajectory = scenario_trajectory(points.mean(axis=0), n_keyframes)
    sched = []
    for k in range(len(trajectory)):
        for i in range(n_points):
            sched.append(Measurement(k, i, "proj"))
            sched.append(Measurement(k, i, "point"))
    obs = build_observability(trajectory, points, sched, K, s=0)
    return _finish("point", n_points, obs.matrix, obs, trajectory[0].p, points, None, points, rtol)


def slam_gauge_report(m: int, n_keyframes: int = 4, seed: int = 0, K: CameraIntrinsics = DEFAULT_K, rtol: float = 1e-8) -> dict:
    """Projection-only matrix for ``m`` random features against ``N_slam``."""
    rng = np.random.default_rng(seed)
    landmarks = np.column_stack([rng.uniform(-1, 1, m), rng.uniform(-0.8, 0.8, m), rng.uniform(3, 5, m)])
    traj = scenario_trajectory(np.array([0.0, 0.0, 4.0]), n_keyframes, radius=0.3)
    sched = [Measurement(k, i) for k in range(n_keyframes) for i in range(m)]
    obs = build_observability(traj, landmarks, sched, K, s=0)
    ns = nullspace(obs.matrix, rtol)
    N = slam_nullspace(traj[0].p, landmarks)
    return {
        "m": m,
        "null_dim": ns.dim,
        "principal_angle": max_principal_angle(ns.basis, N),
        "product": relative_product(obs.matrix, N),
        "skipped": len(obs.skipped),
    }
