"""Synthetic calibration scenes: targets, one static spinning-LiDAR scan, and a
moving stereo camera that observes target corners.

The camera pass stands in for a visual SLAM front-end. It returns pixel
observations, keyframe poses and landmark estimates expressed in the frame of
the first camera keyframe, which is exactly what a metric (stereo) SLAM map
would provide. Mapping that map into the laser frame is the calibration
problem.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from .cloud import BACKGROUND, PointCloud
from .geometry import CameraIntrinsics, RigidPose, matrix_to_quat, quat_from_axis_angle, quat_multiply, so3_exp

TARGET_KINDS = ("chessboard", "polygon", "box")
PLACEMENTS = ("scattered", "centralized")
# scattered boards: tilt range and smallest angle between any two target planes [deg]
PITCH_RANGE = (12.0, 25.0)
MIN_PLANE_ANGLE = 20.0


class PlacementInfeasible(RuntimeError):
    pass


class NoObservations(RuntimeError):
    pass


def _rot_z(a: float) -> np.ndarray:
    c, s = math.cos(a), math.sin(a)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


# ---------------------------------------------------------------------------
# targets


@dataclass
class TargetModel:
    """A calibration target.

    ``pose`` maps laser coordinates into the target frame the same way a camera
    pose does, so ``pose.to_world`` takes target-frame points to the laser
    frame. Planar targets lie in the target z = 0 plane with their front face
    towards +z.
    """

    kind: str
    pose: RigidPose
    extent: tuple[float, float]
    depth: float = 0.0
    grid: tuple[int, int] = (0, 0)
    square: float = 0.0
    polygon: np.ndarray | None = None

    def __post_init__(self):
        if self.kind not in TARGET_KINDS:
            raise ValueError(f"unknown target kind {self.kind!r}")
        if min(self.extent) <= 0:
            raise ValueError("target extent must be positive")
        if self.kind == "box" and self.depth <= 0:
            raise ValueError("box depth must be positive")
        if self.polygon is not None:
            self.polygon = np.asarray(self.polygon, dtype=float)

    @property
    def normal(self) -> np.ndarray:
        """Front-face normal in the laser frame."""
        return self.pose.R.T @ np.array([0.0, 0.0, 1.0])

    @property
    def center(self) -> np.ndarray:
        return self.pose.translation

    @property
    def radius(self) -> float:
        w, h = self.extent
        return 0.5 * math.sqrt(w * w + h * h + self.depth**2)

    def local_corners(self) -> np.ndarray:
        w, h = self.extent
        if self.kind == "chessboard":
            rows, cols = self.grid
            xs = (np.arange(cols) - (cols - 1) / 2) * self.square
            ys = (np.arange(rows) - (rows - 1) / 2) * self.square
            gx, gy = np.meshgrid(xs, ys)
            return np.stack([gx.ravel(), gy.ravel(), np.zeros(gx.size)], axis=1)
        if self.kind == "polygon":
            return np.column_stack([self.polygon, np.zeros(len(self.polygon))])
        d = self.depth
        # front face at z = 0, box body behind it
        sx, sy, sz = np.meshgrid([-w / 2, w / 2], [-h / 2, h / 2], [0.0, -d], indexing="ij")
        return np.stack([sx.ravel(), sy.ravel(), sz.ravel()], axis=1)

    def corners(self) -> np.ndarray:
        return self.pose.to_world(self.local_corners())

    def faces(self) -> list[tuple[np.ndarray, np.ndarray]]:
        """Planar faces as (laser-frame vertex loop, outward normal)."""
        w, h = self.extent
        if self.kind == "polygon":
            loops = [(np.column_stack([self.polygon, np.zeros(len(self.polygon))]), np.array([0, 0, 1.0]))]
        else:
            rect = np.array([[-w / 2, -h / 2, 0], [w / 2, -h / 2, 0], [w / 2, h / 2, 0], [-w / 2, h / 2, 0]])
            loops = [(rect, np.array([0, 0, 1.0]))]
            if self.kind == "box":
                d = self.depth
                c = self.local_corners()  # index = 4*ix + 2*iy + iz
                def v(ix, iy, iz):
                    return c[4 * ix + 2 * iy + iz]
                loops += [
                    (np.array([v(0, 0, 1), v(1, 0, 1), v(1, 1, 1), v(0, 1, 1)]), np.array([0, 0, -1.0])),
                    (np.array([v(0, 0, 0), v(0, 0, 1), v(0, 1, 1), v(0, 1, 0)]), np.array([-1.0, 0, 0])),
                    (np.array([v(1, 0, 0), v(1, 0, 1), v(1, 1, 1), v(1, 1, 0)]), np.array([1.0, 0, 0])),
                    (np.array([v(0, 0, 0), v(1, 0, 0), v(1, 0, 1), v(0, 0, 1)]), np.array([0, -1.0, 0])),
                    (np.array([v(0, 1, 0), v(1, 1, 0), v(1, 1, 1), v(0, 1, 1)]), np.array([0, 1.0, 0])),
                ]
                assert d > 0
        Rt = self.pose.R.T
        return [(self.pose.to_world(loop), Rt @ n) for loop, n in loops]

    def to_dict(self) -> dict:
        d = {
            "kind": self.kind,
            "pose": self.pose.to_dict(),
            "extent": list(self.extent),
            "depth": self.depth,
            "grid": list(self.grid),
            "square": self.square,
        }
        if self.polygon is not None:
            d["polygon"] = self.polygon.tolist()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TargetModel":
        return cls(
            kind=d["kind"],
            pose=RigidPose.from_dict(d["pose"]),
            extent=tuple(d["extent"]),
            depth=d.get("depth", 0.0),
            grid=tuple(d.get("grid", (0, 0))),
            square=d.get("square", 0.0),
            polygon=None if d.get("polygon") is None else np.array(d["polygon"]),
        )


# ---------------------------------------------------------------------------
# scene


@dataclass
class SceneConfig:
    n_targets: int = 4
    placement: str = "scattered"
    target_kind: str = "chessboard"
    seed: int = 0
    distance: tuple[float, float] = (2.6, 3.4)
    board_grid: tuple[int, int] = (4, 6)
    board_square: float = 0.1
    box_size: tuple[float, float, float] = (0.5, 0.5, 0.5)
    polygon_radius: float = 0.4
    polygon_sides: int = 6
    n_keyframes: int = 24
    trajectory_radius: float = 0.4
    stereo_baseline: float = 0.12
    intrinsics: dict = field(
        default_factory=lambda: dict(fx=500.0, fy=500.0, cx=320.0, cy=240.0, width=640, height=480)
    )
    ground_z: float | None = -1.2
    n_background_features: int = 200
    extrinsics: dict | None = None

    def __post_init__(self):
        if self.n_targets < 1:
            raise ValueError("need at least one target")
        if self.placement not in PLACEMENTS:
            raise ValueError(f"unknown placement {self.placement!r}")
        if self.target_kind not in TARGET_KINDS:
            raise ValueError(f"unknown target kind {self.target_kind!r}")
        if self.n_keyframes < 1:
            raise ValueError("trajectory must be nonempty")
        self.distance = tuple(self.distance)
        self.board_grid = tuple(self.board_grid)
        self.box_size = tuple(self.box_size)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "SceneConfig":
        return cls(**d)


@dataclass
class Scene:
    targets: list[TargetModel]
    extrinsics: RigidPose
    trajectory: list[RigidPose]
    intrinsics: CameraIntrinsics
    stereo_baseline: float = 0.12
    ground_z: float | None = None
    background_points: np.ndarray = field(default_factory=lambda: np.zeros((0, 3)))

    def __post_init__(self):
        if not self.trajectory:
            raise ValueError("trajectory must be nonempty")

    def to_dict(self) -> dict:
        return {
            "targets": [t.to_dict() for t in self.targets],
            "extrinsics": self.extrinsics.to_dict(),
            "trajectory": [p.to_dict() for p in self.trajectory],
            "intrinsics": self.intrinsics.to_dict(),
            "stereo_baseline": self.stereo_baseline,
            "ground_z": self.ground_z,
            "background_points": self.background_points.tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Scene":
        return cls(
            targets=[TargetModel.from_dict(t) for t in d["targets"]],
            extrinsics=RigidPose.from_dict(d["extrinsics"]),
            trajectory=[RigidPose.from_dict(p) for p in d["trajectory"]],
            intrinsics=CameraIntrinsics.from_dict(d["intrinsics"]),
            stereo_baseline=d.get("stereo_baseline", 0.12),
            ground_z=d.get("ground_z"),
            background_points=np.array(d.get("background_points", []), dtype=float).reshape(-1, 3),
        )


# laser -> camera for a camera looking along laser +x (camera x right, y down)
_FORWARD = np.array([[0.0, -1.0, 0.0], [0.0, 0.0, -1.0], [1.0, 0.0, 0.0]])


def random_extrinsics(rng: np.random.Generator) -> RigidPose:
    """Camera mounted anywhere on the rig, facing any azimuth."""
    yaw = rng.uniform(-math.pi, math.pi)
    tilt = so3_exp(rng.uniform(-1, 1, 3) * math.radians(5.0))
    R = tilt @ _FORWARD @ _rot_z(yaw).T
    p = rng.uniform(-0.2, 0.2, 3)
    return RigidPose.from_matrix(R, p)


def camera_heading(extrinsics: RigidPose) -> float:
    axis = extrinsics.R.T @ np.array([0.0, 0.0, 1.0])
    return math.atan2(axis[1], axis[0])


def _target_pose(center: np.ndarray, normal: np.ndarray) -> RigidPose:
    """Pose whose target +z axis is ``normal`` and whose x axis is horizontal."""
    z = normal / np.linalg.norm(normal)
    x = np.cross([0.0, 0.0, 1.0], z)
    if np.linalg.norm(x) < 1e-9:
        x = np.array([1.0, 0.0, 0.0])
    x /= np.linalg.norm(x)
    y = np.cross(z, x)
    Rtw = np.column_stack([x, y, z])  # target -> laser
    return RigidPose(matrix_to_quat(Rtw.T), center)


def _facing_normal(azimuth: float, yaw_tilt: float, pitch_tilt: float) -> np.ndarray:
    a = azimuth + math.pi + yaw_tilt
    return np.array([math.cos(a) * math.cos(pitch_tilt), math.sin(a) * math.cos(pitch_tilt), math.sin(pitch_tilt)])


def _make_target(cfg: SceneConfig, center, normal, rng) -> TargetModel:
    pose = _target_pose(np.asarray(center, float), normal)
    if cfg.target_kind == "chessboard":
        rows, cols = cfg.board_grid
        s = cfg.board_square
        return TargetModel("chessboard", pose, ((cols + 1) * s, (rows + 1) * s), grid=(rows, cols), square=s)
    if cfg.target_kind == "polygon":
        n = cfg.polygon_sides
        ang = 2 * math.pi * np.arange(n) / n + rng.uniform(0, 2 * math.pi / n)
        rad = cfg.polygon_radius * rng.uniform(0.8, 1.0, n)
        poly = np.column_stack([rad * np.cos(ang), rad * np.sin(ang)])
        ext = tuple(np.ptp(poly, axis=0))
        return TargetModel("polygon", pose, ext, polygon=poly)
    w, h, d = cfg.box_size
    return TargetModel("box", pose, (w, h), depth=d)


def _pairwise_normal_angles(targets, lines: bool = False) -> np.ndarray:
    """Pairwise normal angles in degrees; ``lines`` ignores the normal sign,
    so facing boards on opposite sides count as parallel planes."""
    n = np.array([t.normal for t in targets])
    c = np.clip(n @ n.T, -1, 1)
    return np.degrees(np.arccos(np.abs(c) if lines else c))


def _surface_samples(target: TargetModel, per_edge: int = 10, shells: int = 6) -> np.ndarray:
    out = []
    for loop, _ in target.faces():
        c = loop.mean(axis=0)
        t = np.linspace(0.0, 1.0, per_edge, endpoint=False)[:, None]
        edge = np.concatenate([a + t * (b - a) for a, b in zip(loop, np.roll(loop, -1, axis=0))])
        for s in np.linspace(0.0, 1.0, shells):
            out.append(c + s * (edge - c))
    return np.concatenate(out)


def _interpenetrate(targets, clearance: float = 0.25) -> bool:
    """True if any two target surfaces come closer than ``clearance`` meters."""
    samples = [_surface_samples(t) for t in targets]
    for i in range(len(targets)):
        for j in range(i + 1, len(targets)):
            if np.linalg.norm(targets[i].center - targets[j].center) > targets[i].radius + targets[j].radius + clearance:
                continue
            d, _ = cKDTree(samples[i]).query(samples[j])
            if d.min() < clearance:
                return True
    return False


def _scattered(cfg: SceneConfig, rng, heading: float) -> list[TargetModel]:
    n = cfg.n_targets
    if n > 8:
        raise PlacementInfeasible("scattered placement keeps pairwise normals >= 45 deg; at most 8 targets")
    # two boards opposite each other would be parallel planes
    spacing = math.pi / 2 if n == 2 else 2 * math.pi / n
    # room left above the 45 deg normal separation, shared by the jitters
    slack = min(1.0, max(0.0, math.degrees(spacing) - 45.0) / 20.0)
    for _ in range(200):
        # one target sits in front of the first camera keyframe
        start = heading + rng.uniform(-0.15, 0.15)
        targets = []
        for i in range(n):
            az = start + i * spacing + slack * rng.uniform(-0.1, 0.1) * min(spacing, 1.0)
            dist = rng.uniform(*cfg.distance)
            center = np.array([dist * math.cos(az), dist * math.sin(az), rng.uniform(-0.15, 0.15)])
            # boards facing each other must tilt the same way to keep their planes
            # apart; alternating does that when n is a multiple of 4, otherwise the
            # sign repeats every half turn. Both give both signs for n >= 3.
            if n % 4 == 0:
                sign = (-1.0) ** i
            else:
                sign = 1.0 if (i * spacing) % math.pi < math.pi / 2 - 1e-9 else -1.0
            pitch = sign * math.radians(rng.uniform(PITCH_RANGE[0], PITCH_RANGE[1]))
            yaw = slack * math.radians(rng.uniform(-10.0, 10.0))
            targets.append(_make_target(cfg, center, _facing_normal(az, yaw, pitch), rng))
        iu = np.triu_indices(n, 1)
        ok_angles = n == 1 or (
            _pairwise_normal_angles(targets)[iu].min() >= 45.0
            and _pairwise_normal_angles(targets, lines=True)[iu].min() >= MIN_PLANE_ANGLE
        )
        if ok_angles and not _interpenetrate(targets):
            return targets
    raise PlacementInfeasible(f"could not place {n} scattered targets")


def _centralized(cfg: SceneConfig, rng, heading: float) -> list[TargetModel]:
    n = cfg.n_targets
    rows = 1 if n <= 4 else 2
    cols = math.ceil(n / rows)
    half_span = math.radians(29.0)  # centres stay inside a 60 deg frustum after jitter
    if cols > 1:
        step = 2 * half_span / (cols - 1)
    else:
        step = 0.0
    slots = []
    for r in range(rows):
        for c in range(cols):
            az = heading - half_span + c * step if cols > 1 else heading
            z = 0.0 if rows == 1 else (0.4 if r == 0 else -0.4)
            slots.append((az, z))
    slots = slots[:n]
    for _ in range(200):
        targets = []
        for az, z in slots:
            az_j = az + math.radians(rng.uniform(-1.0, 1.0))
            dist = rng.uniform(*cfg.distance)
            center = np.array([dist * math.cos(az_j), dist * math.sin(az_j), z + rng.uniform(-0.03, 0.03)])
            pitch = rng.choice([-1.0, 1.0]) * math.radians(rng.uniform(3.0, 12.0))
            yaw = math.radians(rng.uniform(-10.0, 10.0))
            # all boards face back along the shared heading
            targets.append(_make_target(cfg, center, _facing_normal(heading, yaw, pitch), rng))
        if not _interpenetrate(targets):
            return targets
    raise PlacementInfeasible(f"could not place {n} centralized targets within the frustum")


def rig_trajectory(n: int, radius: float, rng) -> list[RigidPose]:
    """World-to-rig poses of a rig that turns a full circle while drifting on a loop.

    The first pose is the identity: the laser scan is taken there.
    """
    poses = [RigidPose.identity()]
    phase = rng.uniform(0, 2 * math.pi)
    for k in range(1, n):
        yaw = 2 * math.pi * k / n
        c = radius * np.array(
            [math.cos(yaw) - 1.0, math.sin(yaw), 0.15 * (math.sin(3 * yaw + phase) - math.sin(phase))]
        )
        poses.append(RigidPose.from_matrix(_rot_z(yaw).T, c))
    return poses


def generate_scene(config: SceneConfig) -> Scene:
    rng = np.random.default_rng(config.seed)
    ext = RigidPose.from_dict(config.extrinsics) if config.extrinsics else random_extrinsics(rng)
    if config.placement == "scattered":
        targets = _scattered(config, rng, camera_heading(ext))
    else:
        targets = _centralized(config, rng, camera_heading(ext))
    rig = rig_trajectory(config.n_keyframes, config.trajectory_radius, rng)
    trajectory = [ext.compose(r) for r in rig]
    bg = np.zeros((0, 3))
    if config.n_background_features:
        az = rng.uniform(-math.pi, math.pi, config.n_background_features)
        dist = rng.uniform(6.0, 9.0, config.n_background_features)
        bg = np.column_stack([dist * np.cos(az), dist * np.sin(az), rng.uniform(-0.8, 1.5, len(az))])
    return Scene(
        targets=targets,
        extrinsics=ext,
        trajectory=trajectory,
        intrinsics=CameraIntrinsics(**config.intrinsics),
        stereo_baseline=config.stereo_baseline,
        ground_z=config.ground_z,
        background_points=bg,
    )


# ---------------------------------------------------------------------------
# LiDAR


def lidar_directions(rings: int = 16, fov_deg: tuple[float, float] = (-15.0, 15.0), azimuth_step_deg: float = 0.2):
    elev = np.radians(np.linspace(fov_deg[0], fov_deg[1], rings))
    az = np.radians(np.arange(0.0, 360.0, azimuth_step_deg))
    E, A = np.meshgrid(elev, az, indexing="ij")
    d = np.stack([np.cos(E) * np.cos(A), np.cos(E) * np.sin(A), np.sin(E)], axis=-1)
    return d.reshape(-1, 3)


def _ray_face(dirs: np.ndarray, loop: np.ndarray, normal: np.ndarray) -> np.ndarray:
    """Ray parameter of the hit on a convex planar face (inf when missed)."""
    d = float(normal @ loop[0])
    denom = dirs @ normal
    with np.errstate(divide="ignore", invalid="ignore"):
        t = d / denom
    t = np.where((np.abs(denom) > 1e-12) & (t > 0), t, np.inf)
    hit = dirs * np.where(np.isfinite(t), t, 0.0)[:, None]
    inside = np.isfinite(t)
    nv = len(loop)
    # consistent orientation test against the polygon winding
    sign = None
    for k in range(nv):
        a, b = loop[k], loop[(k + 1) % nv]
        s = np.cross(b - a, hit - a) @ normal
        if sign is None:
            centroid = loop.mean(axis=0)
            sign = np.sign(np.cross(b - a, centroid - a) @ normal)
        inside &= s * sign >= 0
    return np.where(inside, t, np.inf)


def simulate_lidar_scan(
    scene: Scene,
    rings: int = 16,
    azimuth_step_deg: float = 0.2,
    noise_sigma: float = 0.01,
    seed: int = 0,
    max_range: float = 30.0,
) -> PointCloud:
    """Single static scan from the laser origin with isotropic Gaussian noise."""
    if noise_sigma < 0:
        raise ValueError("noise sigma must be non-negative")
    dirs = lidar_directions(rings, azimuth_step_deg=azimuth_step_deg)
    best = np.full(len(dirs), np.inf)
    owner = np.full(len(dirs), BACKGROUND, dtype=int)
    for tid, target in enumerate(scene.targets):
        for loop, normal in target.faces():
            t = _ray_face(dirs, loop, normal)
            closer = t < best
            best[closer] = t[closer]
            owner[closer] = tid
    if scene.ground_z is not None and scene.ground_z < 0:
        with np.errstate(divide="ignore"):
            t = np.where(dirs[:, 2] < -1e-9, scene.ground_z / dirs[:, 2], np.inf)
        closer = t < best
        best[closer] = t[closer]
        owner[closer] = BACKGROUND
    keep = best <= max_range
    pts = dirs[keep] * best[keep, None]
    rng = np.random.default_rng(seed)
    if noise_sigma > 0:
        pts = pts + rng.normal(0.0, noise_sigma, pts.shape)
    return PointCloud(pts, owner[keep])


# ---------------------------------------------------------------------------
# camera


@dataclass
class SensorData:
    """Everything the calibration pipeline consumes, plus ground truth for tests.

    Camera-side quantities (``slam_poses``, ``landmark_init``) are in the frame
    of the first camera keyframe. ``landmark_truth`` is in the laser frame.
    """

    scan: PointCloud | None
    obs_keyframe: np.ndarray
    obs_landmark: np.ndarray
    obs_camera: np.ndarray
    obs_uv: np.ndarray
    slam_poses: list[RigidPose]
    landmark_init: np.ndarray
    landmark_truth: np.ndarray
    landmark_target: np.ndarray
    landmark_on_target: np.ndarray
    landmark_kind: list[str]
    n_a: np.ndarray
    n_b: np.ndarray
    laser_corners: np.ndarray = field(default_factory=lambda: np.zeros((0, 3)))
    laser_corner_target: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=int))

    def to_dict(self) -> dict:
        return {
            "observations": [
                {"keyframe": int(k), "landmark": int(j), "camera": int(c), "uv": uv.tolist()}
                for k, j, c, uv in zip(self.obs_keyframe, self.obs_landmark, self.obs_camera, self.obs_uv)
            ],
            "slam_poses": [p.to_dict() for p in self.slam_poses],
            "landmark_init": self.landmark_init.tolist(),
            "landmark_truth": self.landmark_truth.tolist(),
            "landmark_target": self.landmark_target.tolist(),
            "landmark_on_target": self.landmark_on_target.tolist(),
            "landmark_kind": list(self.landmark_kind),
            "n_a": self.n_a.tolist(),
            "n_b": self.n_b.tolist(),
            "laser_corners": self.laser_corners.tolist(),
            "laser_corner_target": self.laser_corner_target.tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict, scan: PointCloud | None = None) -> "SensorData":
        obs = d["observations"]
        return cls(
            scan=scan,
            obs_keyframe=np.array([o["keyframe"] for o in obs], dtype=int),
            obs_landmark=np.array([o["landmark"] for o in obs], dtype=int),
            obs_camera=np.array([o["camera"] for o in obs], dtype=int),
            obs_uv=np.array([o["uv"] for o in obs], dtype=float).reshape(-1, 2),
            slam_poses=[RigidPose.from_dict(p) for p in d["slam_poses"]],
            landmark_init=np.array(d["landmark_init"], dtype=float).reshape(-1, 3),
            landmark_truth=np.array(d["landmark_truth"], dtype=float).reshape(-1, 3),
            landmark_target=np.array(d["landmark_target"], dtype=int),
            landmark_on_target=np.array(d["landmark_on_target"], dtype=bool),
            landmark_kind=list(d["landmark_kind"]),
            n_a=np.array(d["n_a"], dtype=float),
            n_b=np.array(d["n_b"], dtype=float),
            laser_corners=np.array(d.get("laser_corners", []), dtype=float).reshape(-1, 3),
            laser_corner_target=np.array(d.get("laser_corner_target", []), dtype=int),
        )


def scene_landmarks(scene: Scene):
    """Ground-truth landmark positions with target ids, on-target flags and kinds."""
    pts, tids, kinds = [], [], []
    for tid, t in enumerate(scene.targets):
        c = t.corners()
        pts.append(c)
        tids += [tid] * len(c)
        kinds += [t.kind] * len(c)
    if len(scene.background_points):
        pts.append(scene.background_points)
        tids += [BACKGROUND] * len(scene.background_points)
        kinds += ["background"] * len(scene.background_points)
    pts = np.concatenate(pts) if pts else np.zeros((0, 3))
    tids = np.array(tids, dtype=int)
    return pts, tids, tids >= 0, kinds


def camera_centers(scene: Scene, pose: RigidPose) -> np.ndarray:
    """Laser-frame centres of the left and right cameras of the rig."""
    right = pose.to_world(np.array([scene.stereo_baseline, 0.0, 0.0]))
    return np.stack([pose.translation, right])


def _parallax_uncertainty(centers: np.ndarray, point: np.ndarray, ref_angle: float) -> float:
    """Mean of min(1, ref / parallax) over pairs of observing rays."""
    rays = point - centers
    rays /= np.linalg.norm(rays, axis=1, keepdims=True)
    if len(rays) < 2:
        return 1.0
    c = np.clip(rays @ rays.T, -1.0, 1.0)
    iu = np.triu_indices(len(rays), 1)
    ang = np.arccos(c[iu])
    return float(np.mean(np.minimum(1.0, ref_angle / np.maximum(ang, 1e-12))))


def simulate_camera_pass(
    scene: Scene,
    pixel_sigma: float = 0.5,
    landmark_sigma: float = 0.02,
    seed: int = 0,
    pose_sigma: tuple[float, float] = (0.0, 0.0),
    min_depth: float = 0.1,
    max_view_angle_deg: float = 75.0,
    parallax_ref_deg: float = 1.0,
) -> SensorData:
    """Stereo observations of every visible target corner from every keyframe.

    A chessboard or polygon corner is detected only when the board's front face
    is turned towards the camera within ``max_view_angle_deg``. Self-occlusion
    of boxes and inter-target occlusion in the image are not modelled.
    """
    if pixel_sigma < 0 or landmark_sigma < 0 or min(pose_sigma) < 0:
        raise ValueError("noise sigmas must be non-negative")
    rng = np.random.default_rng(seed)
    K = scene.intrinsics
    pts, tids, on_target, kinds = scene_landmarks(scene)
    normals = np.array([scene.targets[t].normal if t >= 0 else np.zeros(3) for t in tids]).reshape(-1, 3)
    planar = np.array([k in ("chessboard", "polygon") for k in kinds], dtype=bool)
    cos_max = math.cos(math.radians(max_view_angle_deg))
    offsets = np.array([[0.0, 0.0, 0.0], [scene.stereo_baseline, 0.0, 0.0]])

    obs_k, obs_j, obs_c, obs_uv = [], [], [], []
    seen_by = [[] for _ in range(len(pts))]
    for k, pose in enumerate(scene.trajectory):
        centers = camera_centers(scene, pose)
        xc0 = pose.to_camera(pts)
        for c in (0, 1):
            xc = xc0 - offsets[c]
            z = xc[:, 2]
            zs = np.where(z > min_depth, z, 1.0)
            uv = np.stack([K.fx * xc[:, 0] / zs + K.cx, K.fy * xc[:, 1] / zs + K.cy], axis=1)
            vis = (z > min_depth) & K.in_bounds(uv)
            view = centers[c] - pts
            view /= np.linalg.norm(view, axis=1, keepdims=True)
            facing = np.einsum("ij,ij->i", view, normals) >= cos_max
            vis &= ~planar | facing
            for j in np.flatnonzero(vis):
                obs_k.append(k)
                obs_j.append(j)
                obs_c.append(c)
                obs_uv.append(uv[j])
                seen_by[j].append((k, c))
    if not obs_k:
        raise NoObservations("no target corner is visible from any keyframe")
    obs_uv = np.array(obs_uv)
    if pixel_sigma > 0:
        obs_uv = obs_uv + rng.normal(0.0, pixel_sigma, obs_uv.shape)

    n_a = np.zeros(len(pts))
    n_b = np.zeros(len(pts))
    ref = math.radians(parallax_ref_deg)
    for j, views in enumerate(seen_by):
        if not views:
            continue
        kfs = sorted({k for k, _ in views})
        n_a[j] = len(kfs)
        centers = np.array([camera_centers(scene, scene.trajectory[k])[c] for k, c in views])
        n_b[j] = n_a[j] * _parallax_uncertainty(centers, pts[j], ref)

    # metric SLAM map, expressed in the first camera frame
    ext = scene.extrinsics
    slam_poses = []
    for k, pose in enumerate(scene.trajectory):
        rel = pose.compose(ext.inverse())
        if k > 0 and max(pose_sigma) > 0:
            dR = so3_exp(rng.normal(0.0, pose_sigma[0], 3))
            rel = RigidPose.from_matrix(dR @ rel.R, rel.translation + rng.normal(0.0, pose_sigma[1], 3))
        slam_poses.append(rel)
    init = ext.to_camera(pts)
    if landmark_sigma > 0:
        init = init + rng.normal(0.0, landmark_sigma, init.shape)

    corners, corner_tid = np.zeros((0, 3)), np.zeros(0, dtype=int)
    return SensorData(
        scan=None,
        obs_keyframe=np.array(obs_k, dtype=int),
        obs_landmark=np.array(obs_j, dtype=int),
        obs_camera=np.array(obs_c, dtype=int),
        obs_uv=obs_uv,
        slam_poses=slam_poses,
        landmark_init=init,
        landmark_truth=pts,
        landmark_target=tids,
        landmark_on_target=on_target,
        landmark_kind=kinds,
        n_a=n_a,
        n_b=n_b,
        laser_corners=corners,
        laser_corner_target=corner_tid,
    )


def simulate_laser_corners(scene: Scene, scan: PointCloud, noise_sigma: float, seed: int = 0, min_hits: int = 10):
    """Corner points of point-type targets (polygons, boxes) as seen by the LiDAR.

    Corners are taken from the scene model and perturbed, the way a simulator
    would export them; only targets the scan actually hit are reported.
    """
    rng = np.random.default_rng(seed)
    pts, tid = [], []
    for t_id, t in enumerate(scene.targets):
        if t.kind == "chessboard":
            continue
        if np.count_nonzero(scan.target_ids == t_id) < min_hits:
            continue
        c = t.corners()
        pts.append(c)
        tid += [t_id] * len(c)
    if not pts:
        return np.zeros((0, 3)), np.zeros(0, dtype=int)
    pts = np.concatenate(pts)
    if noise_sigma > 0:
        pts = pts + rng.normal(0.0, noise_sigma, pts.shape)
    return pts, np.array(tid, dtype=int)


def simulate(scene: Scene, lidar_sigma=0.01, pixel_sigma=0.5, landmark_sigma=0.02, seed=0, azimuth_step_deg=0.2, **kw):
    """Scan plus camera pass with independent, seed-derived noise streams."""
    ss = np.random.SeedSequence(seed).spawn(3)
    s_scan, s_cam, s_corner = (int(s.generate_state(1)[0]) for s in ss)
    scan = simulate_lidar_scan(scene, noise_sigma=lidar_sigma, seed=s_scan, azimuth_step_deg=azimuth_step_deg)
    data = simulate_camera_pass(scene, pixel_sigma=pixel_sigma, landmark_sigma=landmark_sigma, seed=s_cam, **kw)
    data.scan = scan
    data.laser_corners, data.laser_corner_target = simulate_laser_corners(scene, scan, lidar_sigma, seed=s_corner)
    return data


def perturb_extrinsics(gt: RigidPose, rot_deg: float, trans_m: float, seed: int = 0) -> RigidPose:
    """Pose offset from ``gt`` by exactly ``rot_deg`` about a random axis and ``trans_m`` along a random direction."""
    if rot_deg < 0 or trans_m < 0:
        raise ValueError("perturbation magnitudes must be non-negative")
    rng = np.random.default_rng(seed)
    axis = rng.normal(size=3)
    axis /= np.linalg.norm(axis)
    direction = rng.normal(size=3)
    direction /= np.linalg.norm(direction)
    q = quat_multiply(gt.rotation, quat_from_axis_angle(axis, math.radians(rot_deg)))
    return RigidPose(q, gt.translation + trans_m * direction)
