"""Plane extraction from a single laser scan, visual landmark scoring, and
landmark-to-laser association."""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from .cloud import PointCloud


class DegenerateNeighborhood(ValueError):
    """Raised when a neighbourhood has no well-defined normal."""


class NoAssociation(LookupError):
    pass


@dataclass
class SegmentationConfig:
    normal_k: int = 30
    radius: float | None = None
    radius_scale: float = 1.5
    angle_deg: float = 8.0
    min_points: int = 30
    min_area: float = 0.1
    max_rms: float = 0.02
    min_inlier_fraction: float = 0.8
    seed: int = 0

    def to_dict(self) -> dict:
        return dict(vars(self))


@dataclass
class PlaneSegment:
    indices: np.ndarray
    normal: np.ndarray
    offset: float
    rms: float
    extent: tuple[float, float]

    @property
    def area(self) -> float:
        return self.extent[0] * self.extent[1]

    def distance(self, x: np.ndarray) -> np.ndarray:
        return np.asarray(x) @ self.normal + self.offset

    def to_dict(self) -> dict:
        return {
            "indices": self.indices.tolist(),
            "normal": self.normal.tolist(),
            "offset": self.offset,
            "rms": self.rms,
            "extent": list(self.extent),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "PlaneSegment":
        return cls(np.array(d["indices"], dtype=int), np.array(d["normal"], float), d["offset"], d["rms"], tuple(d["extent"]))


@dataclass
class Association:
    landmark: int
    segment: int
    neighbors: np.ndarray  # laser point indices, shape (3,)
    points: np.ndarray  # (3, 3)
    normals: np.ndarray  # (3, 3)
    score: float = 0.0


# ---------------------------------------------------------------------------
# normals and region growing


def estimate_normals(cloud: PointCloud, k: int = 30, degenerate_tol: float = 1e-9) -> PointCloud:
    """PCA normals over k nearest neighbours, oriented towards the sensor origin.

    Neighbourhoods whose covariance has rank < 2 get ``degenerate`` set; their
    normal is still a unit vector but carries no information.
    """
    pts = cloud.points
    n = len(pts)
    k = min(k, n)
    if k < 3:
        raise DegenerateNeighborhood("need at least 3 points for a normal")
    _, idx = cKDTree(pts).query(pts, k=k)
    nb = pts[idx]
    centered = nb - nb.mean(axis=1, keepdims=True)
    cov = np.einsum("nki,nkj->nij", centered, centered) / k
    w, v = np.linalg.eigh(cov)
    normals = v[:, :, 0]
    degenerate = w[:, 1] <= degenerate_tol * np.maximum(w[:, 2], 1e-300)
    flip = np.einsum("ij,ij->i", normals, pts) > 0
    normals[flip] *= -1.0
    out = cloud.subset(np.arange(n))
    out.normals = normals
    out.degenerate = degenerate
    return out


def default_radius(cloud: PointCloud, k: int, scale: float) -> np.ndarray:
    """Per-point neighbour radius: ``scale`` times the distance to the k-th neighbour.

    Spinning-LiDAR density falls with range, so a single global radius is
    either too small to bridge scan rings nearby or large enough to bridge
    separate targets further out.
    """
    d, _ = cKDTree(cloud.points).query(cloud.points, k=min(k, len(cloud)))
    return scale * d[:, -1]


def region_grow(
    cloud: PointCloud,
    n_seeds: int | None = None,
    radius=0.15,
    angle_deg: float = 8.0,
    seed: int = 0,
    min_points: int = 1,
) -> list[np.ndarray]:
    """Grow disjoint, radius-connected sets of points with similar normals.

    ``radius`` is a scalar or one radius per point. Seeds are drawn in random
    order from unassigned, non-degenerate points. A neighbour joins when its
    normal is within ``angle_deg`` of the normal of the point it was reached
    from (sign ignored).
    """
    if cloud.normals is None:
        raise ValueError("cloud has no normals; run estimate_normals first")
    n = len(cloud)
    normals = cloud.normals
    bad = cloud.degenerate if cloud.degenerate is not None else np.zeros(n, bool)
    nbrs = cKDTree(cloud.points).query_ball_point(cloud.points, r=radius)
    cos_t = np.cos(np.radians(angle_deg))
    label = np.full(n, -1)
    order = np.random.default_rng(seed).permutation(n)
    sets = []
    tried = 0
    for s in order:
        if label[s] >= 0 or bad[s]:
            continue
        if n_seeds is not None and tried >= n_seeds:
            break
        tried += 1
        cur = len(sets)
        label[s] = cur
        members = [s]
        queue = deque([s])
        while queue:
            i = queue.popleft()
            cand = np.asarray(nbrs[i])
            cand = cand[(label[cand] < 0) & ~bad[cand]]
            if not len(cand):
                continue
            ok = cand[np.abs(normals[cand] @ normals[i]) >= cos_t]
            label[ok] = cur
            members.extend(ok.tolist())
            queue.extend(ok.tolist())
        if len(members) >= min_points:
            sets.append(np.sort(np.array(members)))
        else:
            # release small sets so their points can join a later region
            label[members] = -2
    return sets


def fit_plane(points: np.ndarray):
    """Least-squares plane: unit normal, offset d with n.x + d = 0, residuals."""
    c = points.mean(axis=0)
    _, s, vt = np.linalg.svd(points - c, full_matrices=False)
    n = vt[-1]
    d = -float(n @ c)
    return n, d, points @ n + d, vt


def filter_planes(
    sets: list[np.ndarray],
    cloud: PointCloud,
    min_area: float = 0.1,
    max_rms: float = 0.02,
    min_inlier_fraction: float = 0.8,
    max_trim_iters: int = 20,
) -> list[PlaneSegment]:
    """Keep point sets that are flat and large enough to be calibration targets.

    Each set is fitted and trimmed until every member lies within 3 RMS of the
    plane. Sets that lose too many points while trimming are not planar.
    """
    out = []
    for idx in sets:
        idx = np.asarray(idx)
        if len(idx) < 3:
            continue
        keep = idx
        for _ in range(max_trim_iters):
            n, d, r, vt = fit_plane(cloud.points[keep])
            rms = float(np.sqrt(np.mean(r**2)))
            inl = np.abs(r) <= 3.0 * rms
            if inl.all():
                break
            keep = keep[inl]
            if len(keep) < 3:
                break
        if len(keep) < max(3, min_inlier_fraction * len(idx)):
            continue
        n, d, r, vt = fit_plane(cloud.points[keep])
        rms = float(np.sqrt(np.mean(r**2)))
        if np.any(np.abs(r) > 3.0 * rms):
            continue
        if rms > max_rms:
            continue
        local = (cloud.points[keep] - cloud.points[keep].mean(axis=0)) @ vt[:2].T
        extent = tuple(float(e) for e in np.ptp(local, axis=0))
        if extent[0] * extent[1] < min_area:
            continue
        if d < 0:  # normal towards the sensor, origin on the positive side
            n, d = -n, -d
        out.append(PlaneSegment(keep, n, d, rms, extent))
    return out


def extract_planes(cloud: PointCloud, cfg: SegmentationConfig | None = None):
    """Normals, region growing and plane filtering with one configuration."""
    cfg = cfg or SegmentationConfig()
    withn = estimate_normals(cloud, cfg.normal_k)
    radius = cfg.radius or default_radius(withn, cfg.normal_k, cfg.radius_scale)
    sets = region_grow(withn, None, radius, cfg.angle_deg, cfg.seed, cfg.min_points)
    segs = filter_planes(sets, withn, cfg.min_area, cfg.max_rms, cfg.min_inlier_fraction)
    return withn, segs, radius


# ---------------------------------------------------------------------------
# landmarks


def score_landmark(n_a, n_b, gamma: float = 1.0):
    """Visual landmark quality: observation count minus weighted depth uncertainty."""
    return np.asarray(n_a, float) - gamma * np.asarray(n_b, float)


def balanced_gamma(n_a, n_b) -> float:
    """Weight that puts both terms on the same average scale."""
    mb = float(np.mean(n_b))
    return float(np.mean(n_a)) / mb if mb > 0 else 1.0


# ---------------------------------------------------------------------------
# association


class SegmentIndex:
    """Nearest-neighbour lookups restricted to segment member points."""

    def __init__(self, cloud: PointCloud, segments: list[PlaneSegment]):
        if not segments:
            raise NoAssociation("no plane segments to associate with")
        self.cloud = cloud
        self.segments = segments
        self.members = np.concatenate([s.indices for s in segments])
        self.owner = np.concatenate([np.full(len(s.indices), i) for i, s in enumerate(segments)])
        self.tree = cKDTree(cloud.points[self.members])
        self.seg_trees = [cKDTree(cloud.points[s.indices]) for s in segments]

    def associate_one(self, j: int, x: np.ndarray, cutoff: float, vote_k: int = 5) -> Association:
        k = min(vote_k, len(self.members))
        d, i = self.tree.query(x, k=k)
        d, i = np.atleast_1d(d), np.atleast_1d(i)
        if d[0] > cutoff:
            raise NoAssociation(f"landmark {j}: nearest segment point at {d[0]:.3f} m")
        votes = np.bincount(self.owner[i], minlength=len(self.segments))
        # ties go to the segment of the nearest point
        best = np.flatnonzero(votes == votes.max())
        seg = self.owner[i[0]] if self.owner[i[0]] in best else best[0]
        s = self.segments[seg]
        _, local = self.seg_trees[seg].query(x, k=min(3, len(s.indices)))
        nb = s.indices[np.atleast_1d(local)]
        pts = self.cloud.points[nb]
        normals = np.tile(s.normal, (len(nb), 1))
        return Association(j, int(seg), nb, pts, normals, score_association_raw(x, pts, normals))


def score_association_raw(x, points, normals) -> float:
    return float(np.sum(np.abs(np.einsum("ij,ij->i", normals, x - points))))


def score_association(assoc: Association, landmark: np.ndarray) -> float:
    """Sum of absolute point-to-plane distances to the three laser neighbours."""
    return score_association_raw(np.asarray(landmark, float), assoc.points, assoc.normals)


def associate(
    landmarks: np.ndarray,
    segments: list[PlaneSegment],
    cloud: PointCloud,
    cutoff: float = 0.5,
    ids=None,
    max_score: float | None = None,
    index: SegmentIndex | None = None,
):
    """Associate laser-frame landmarks with 3 laser neighbours on one segment.

    Returns ``(associations, rejected)`` where ``rejected`` lists landmark ids
    that had no segment point within ``cutoff`` or scored above ``max_score``.
    """
    landmarks = np.atleast_2d(np.asarray(landmarks, float))
    ids = np.arange(len(landmarks)) if ids is None else np.asarray(ids)
    index = index or SegmentIndex(cloud, segments)
    out, rejected = [], []
    for j, x in zip(ids, landmarks):
        try:
            a = index.associate_one(int(j), x, cutoff)
        except NoAssociation:
            rejected.append(int(j))
            continue
        if max_score is not None and a.score > max_score:
            rejected.append(int(j))
            continue
        out.append(a)
    return out, rejected


def associate_corners(landmarks: np.ndarray, corners: np.ndarray, cutoff: float = 0.3, ids=None):
    """Mutual nearest-neighbour matching of landmarks to laser corner points.

    Returns a dict landmark id -> corner index.
    """
    landmarks = np.atleast_2d(np.asarray(landmarks, float))
    ids = np.arange(len(landmarks)) if ids is None else np.asarray(ids)
    if not len(corners) or not len(landmarks):
        return {}
    d, ci = cKDTree(corners).query(landmarks)
    _, back = cKDTree(landmarks).query(corners)
    return {int(ids[a]): int(ci[a]) for a in range(len(landmarks)) if d[a] <= cutoff and back[ci[a]] == a}
