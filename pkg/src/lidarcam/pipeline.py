"""End-to-end calibration: segment the scan, select and associate landmarks,
solve the joint graph, and evaluate against ground truth."""

from __future__ import annotations

import math
import time
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from .cloud import PointCloud
from .geometry import CameraIntrinsics, RigidPose, rotation_angle
from .optimizer import CalibrationGraph, InsufficientConstraints, SolveReport, SolverConfig, rigid_align, solve
from .scene import SensorData
from .segmentation import (
    PlaneSegment,
    SegmentationConfig,
    SegmentIndex,
    associate,
    associate_corners,
    balanced_gamma,
    extract_planes,
    score_landmark,
)

PLANE_KINDS = ("chessboard", "polygon")
POINT_KINDS = ("polygon", "box")
# kinds whose corners all lie on one laser-visible plane, usable for held-out scoring
HELDOUT_KINDS = ("chessboard", "polygon")


class EmptyTestSet(ValueError):
    pass


# ---------------------------------------------------------------------------
# metrics


def extrinsic_error(est: RigidPose, gt: RigidPose) -> tuple[float, float]:
    """Rotation error of R_est^-1 R_gt in degrees and translation error in meters."""
    dR = est.R.T @ gt.R
    return math.degrees(rotation_angle(dR)), float(np.linalg.norm(est.translation - gt.translation))


def heldout_error(
    extrinsics: RigidPose,
    landmarks_cam: np.ndarray,
    segments: list[PlaneSegment],
    cloud: PointCloud,
    cutoff: float = 0.5,
) -> float:
    """RMS point-to-plane distance of first-camera-frame landmarks mapped into the laser frame.

    Each landmark is associated with its three laser neighbours under the given
    extrinsics and contributes the three point-to-plane distances.
    """
    landmarks_cam = np.asarray(landmarks_cam, float).reshape(-1, 3)
    if not len(landmarks_cam):
        raise EmptyTestSet("no test landmarks")
    x = extrinsics.to_world(landmarks_cam)
    assocs, _ = associate(x, segments, cloud, cutoff=cutoff)
    if not assocs:
        raise EmptyTestSet("no test landmark could be associated")
    d = np.concatenate([np.einsum("ij,ij->i", a.normals, x[a.landmark] - a.points) for a in assocs])
    return float(np.sqrt(np.mean(d**2)))


# ---------------------------------------------------------------------------
# configuration


@dataclass
class PipelineConfig:
    segmentation: SegmentationConfig = field(default_factory=SegmentationConfig)
    solver: SolverConfig = field(default_factory=SolverConfig)
    association_cutoff: float = 0.5
    score_r_threshold: float = 0.05
    corner_cutoff: float = 0.3
    gamma: float | None = 1.0
    score_c_threshold: float = 0.0
    min_observations: int = 2
    reassociate: bool = True
    prealign: bool = True
    include_background: bool = True
    test_fraction: float = 0.5
    split_seed: int = 0

    def __post_init__(self):
        if isinstance(self.segmentation, dict):
            self.segmentation = SegmentationConfig(**self.segmentation)
        if isinstance(self.solver, dict):
            self.solver = SolverConfig(**self.solver)
        if not 0.0 <= self.test_fraction < 1.0:
            raise ValueError("test fraction must be in [0, 1)")

    def to_dict(self) -> dict:
        return asdict(self)


# ---------------------------------------------------------------------------
# landmark selection and graph building


def select_landmarks(data: SensorData, cfg: PipelineConfig) -> np.ndarray:
    """Ids of landmarks worth putting in the graph."""
    n_obs = np.bincount(data.obs_landmark, minlength=len(data.landmark_truth))
    gamma = cfg.gamma if cfg.gamma is not None else balanced_gamma(data.n_a[n_obs > 0], data.n_b[n_obs > 0])
    score = score_landmark(data.n_a, data.n_b, gamma)
    keep = (n_obs >= cfg.min_observations) & (score > cfg.score_c_threshold)
    if not cfg.include_background:
        keep &= data.landmark_on_target
    return np.flatnonzero(keep)


def split_landmarks(ids: np.ndarray, data: SensorData, fraction: float, seed: int):
    """Landmark-level train/test split.

    Only corners of planar targets can be held out; box corners off the front
    face have no laser plane to be scored against.
    """
    ids = np.asarray(ids)
    if fraction <= 0:
        return ids, ids[:0]
    kinds = np.asarray(data.landmark_kind)[ids]
    cand = ids[data.landmark_on_target[ids] & np.isin(kinds, HELDOUT_KINDS)]
    rng = np.random.default_rng(seed)
    n_test = int(round(fraction * len(cand)))
    test = np.sort(rng.choice(cand, size=n_test, replace=False)) if n_test else cand[:0]
    train = np.setdiff1d(ids, test)
    return train, test


def initial_state(data: SensorData, init_extrinsics: RigidPose, ids: np.ndarray):
    """Keyframe poses and landmark positions mapped from the SLAM frame into the laser frame."""
    poses = [p.compose(init_extrinsics) for p in data.slam_poses]
    landmarks = init_extrinsics.to_world(data.landmark_init[ids])
    return poses, landmarks


def build_graph(
    data: SensorData,
    intrinsics: CameraIntrinsics,
    baseline: float,
    init_extrinsics: RigidPose,
    ids: np.ndarray,
    min_keyframe_obs: int = 6,
) -> CalibrationGraph:
    """Graph over the selected landmarks.

    Keyframes with fewer than ``min_keyframe_obs`` observations of those
    landmarks are left out, except the first one, which carries the extrinsics.
    """
    ids = np.asarray(ids, int)
    local = np.full(len(data.landmark_truth), -1)
    local[ids] = np.arange(len(ids))
    sel = local[data.obs_landmark] >= 0
    counts = np.bincount(data.obs_keyframe[sel], minlength=len(data.slam_poses))
    if counts[0] < min_keyframe_obs:
        raise InsufficientConstraints(f"first keyframe observes only {counts[0]} selected landmarks")
    keep_kf = np.flatnonzero(counts >= min_keyframe_obs)
    kf_local = np.full(len(data.slam_poses), -1)
    kf_local[keep_kf] = np.arange(len(keep_kf))
    sel &= kf_local[data.obs_keyframe] >= 0
    poses, landmarks = initial_state(data, init_extrinsics, ids)
    return CalibrationGraph(
        poses=[poses[k] for k in keep_kf],
        landmarks=landmarks,
        intrinsics=intrinsics,
        obs_pose=kf_local[data.obs_keyframe[sel]],
        obs_landmark=local[data.obs_landmark[sel]],
        obs_uv=data.obs_uv[sel],
        obs_camera=data.obs_camera[sel],
        baseline=baseline,
        on_target=data.landmark_on_target[ids],
        landmark_ids=ids,
        keyframe_ids=keep_kf,
    )


class Associator:
    """Keeps the laser factors of a graph in sync with its landmark estimates.

    Chessboard corners get point-to-plane factors against their three laser
    neighbours; polygon and box corners get point-to-point factors against
    matched laser corners. The first call is unfiltered when ``filter_first``
    is false; later calls drop plane associations scoring above the threshold.
    Corner matching can be switched off with ``use_points`` while a planar
    target is still far from aligned.
    """

    def __init__(self, data: SensorData, segments, cloud, cfg: PipelineConfig, filter_first: bool):
        self.data = data
        self.cfg = cfg
        self.index = SegmentIndex(cloud, segments) if segments else None
        self.cloud = cloud
        self.segments = segments
        self.calls = 0
        self.filter_first = filter_first
        self.state = None
        self.n_plane = 0
        self.n_point = 0
        self.rejected = []
        self.use_points = True

    def __call__(self, graph: CalibrationGraph) -> bool:
        kinds = np.array(self.data.landmark_kind)[graph.landmark_ids]
        on = graph.on_target
        plane_local = np.flatnonzero(on & np.isin(kinds, PLANE_KINDS))
        point_local = np.flatnonzero(on & np.isin(kinds, POINT_KINDS))
        max_score = self.cfg.score_r_threshold if (self.calls > 0 or self.filter_first) else None
        self.calls += 1

        pl_idx, pl_pts, pl_nrm = [], [], []
        rejected = []
        if len(plane_local) and self.index is not None:
            assocs, rejected = associate(
                graph.landmarks[plane_local],
                self.segments,
                self.cloud,
                cutoff=self.cfg.association_cutoff,
                ids=plane_local,
                max_score=max_score,
                index=self.index,
            )
            for a in assocs:
                pl_idx += [a.landmark] * len(a.points)
                pl_pts.append(a.points)
                pl_nrm.append(a.normals)
        pt_idx, pt_q = [], []
        if self.use_points and len(point_local) and len(self.data.laser_corners):
            match = associate_corners(
                graph.landmarks[point_local], self.data.laser_corners, self.cfg.corner_cutoff, ids=point_local
            )
            for j, c in sorted(match.items()):
                pt_idx.append(j)
                pt_q.append(self.data.laser_corners[c])
        graph.set_plane_factors(pl_idx, np.concatenate(pl_pts) if pl_pts else np.zeros((0, 3)), np.concatenate(pl_nrm) if pl_nrm else np.zeros((0, 3)))
        graph.set_point_factors(pt_idx, np.array(pt_q).reshape(-1, 3))
        self.n_plane = len(set(pl_idx))
        self.n_point = len(pt_idx)
        self.rejected = rejected
        state = (tuple(graph.plane_landmark), graph.plane_point.tobytes(), tuple(graph.point_landmark), graph.point_target.tobytes())
        changed = state != self.state
        self.state = state
        return changed


# ---------------------------------------------------------------------------
# driver


@dataclass
class CalibrationResult:
    extrinsics: RigidPose
    report: SolveReport
    graph: CalibrationGraph
    segments: list
    cloud: PointCloud
    train_ids: np.ndarray
    test_ids: np.ndarray
    n_plane_factors: int
    n_point_factors: int
    heldout: float | None = None
    timings: dict = field(default_factory=dict)


def triangulate(graph: CalibrationGraph, data: SensorData, ids: np.ndarray, intrinsics: CameraIntrinsics, baseline: float):
    """Least-squares ray intersection of landmarks using the solved keyframe poses.

    Returns positions in the frame of the first camera.
    """
    T0 = graph.extrinsics
    Kinv = np.linalg.inv(intrinsics.K)
    out = np.zeros((len(ids), 3))
    ok = np.zeros(len(ids), bool)
    kf_local = np.full(len(data.slam_poses), -1)
    kf_local[graph.keyframe_ids] = np.arange(graph.n_poses)
    for n, j in enumerate(ids):
        sel = np.flatnonzero((data.obs_landmark == j) & (kf_local[data.obs_keyframe] >= 0))
        A = np.zeros((3, 3))
        b = np.zeros(3)
        for o in sel:
            pose = graph.poses[kf_local[data.obs_keyframe[o]]]
            c = pose.to_world(np.array([baseline * data.obs_camera[o], 0.0, 0.0]))
            d = pose.R.T @ (Kinv @ np.array([*data.obs_uv[o], 1.0]))
            d /= np.linalg.norm(d)
            P = np.eye(3) - np.outer(d, d)
            A += P
            b += P @ c
        if len(sel) >= 2 and np.linalg.cond(A) < 1e12:
            out[n] = T0.to_camera(np.linalg.solve(A, b))
            ok[n] = True
    return out, ok


def calibrate(
    data: SensorData,
    intrinsics: CameraIntrinsics,
    baseline: float,
    init_extrinsics: RigidPose,
    cfg: PipelineConfig | None = None,
    segments=None,
    cloud: PointCloud | None = None,
) -> CalibrationResult:
    cfg = cfg or PipelineConfig()
    timings = {}
    t0 = time.perf_counter()
    if segments is None:
        if data.scan is None:
            raise ValueError("sensor data carries no scan")
        cloud, segments, _ = extract_planes(data.scan, cfg.segmentation)
    timings["segment"] = time.perf_counter() - t0

    ids = select_landmarks(data, cfg)
    train, test = split_landmarks(ids, data, cfg.test_fraction, cfg.split_seed)
    if not len(train):
        raise InsufficientConstraints("no landmark passed selection")
    graph = build_graph(data, intrinsics, baseline, init_extrinsics, train)
    assoc = Associator(data, segments, cloud, cfg, filter_first=not cfg.reassociate)
    kinds = np.array(data.landmark_kind)[train]
    # corners of planar point targets: align on the planes before matching corners
    staged = bool(np.any(np.isin(kinds, PLANE_KINDS) & np.isin(kinds, POINT_KINDS)))
    assoc.use_points = not staged
    assoc(graph)
    if not (len(graph.plane_landmark) or len(graph.point_landmark)):
        raise InsufficientConstraints("no landmark could be associated with laser data")
    t1 = time.perf_counter()
    reassoc = assoc if cfg.reassociate else None
    if cfg.prealign:
        graph = rigid_align(graph, cfg.solver, reassociate=reassoc)
    if staged:
        # planes alone may leave directions free; damping copes, the final solve checks rank
        graph, _ = solve(graph, replace(cfg.solver, check_rank=False), reassociate=reassoc)
        assoc.use_points = True
        assoc(graph)
    graph, report = solve(graph, cfg.solver, reassociate=reassoc)
    timings["solve"] = time.perf_counter() - t1

    heldout = None
    if len(test):
        pts, ok = triangulate(graph, data, test, intrinsics, baseline)
        try:
            heldout = heldout_error(graph.extrinsics, pts[ok], segments, cloud, cfg.association_cutoff)
        except EmptyTestSet:
            heldout = None
    return CalibrationResult(
        extrinsics=graph.extrinsics,
        report=report,
        graph=graph,
        segments=segments,
        cloud=cloud,
        train_ids=train,
        test_ids=test,
        n_plane_factors=assoc.n_plane,
        n_point_factors=assoc.n_point,
        heldout=heldout,
        timings=timings,
    )
