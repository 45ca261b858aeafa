import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from lidarcam.cloud import PointCloud
from lidarcam.scene import SceneConfig, generate_scene, simulate_lidar_scan
from lidarcam.segmentation import (
    Association,
    NoAssociation,
    SegmentationConfig,
    SegmentIndex,
    associate,
    associate_corners,
    balanced_gamma,
    estimate_normals,
    extract_planes,
    filter_planes,
    region_grow,
    score_association,
    score_landmark,
)


def grid_plane(origin, u, v, size=(1.0, 1.0), step=0.02, noise=0.0, rng=None):
    u, v = np.asarray(u, float), np.asarray(v, float)
    a = np.arange(0, size[0] + 1e-9, step)
    b = np.arange(0, size[1] + 1e-9, step)
    A, B = np.meshgrid(a, b)
    pts = np.asarray(origin, float) + A.reshape(-1, 1) * u + B.reshape(-1, 1) * v
    if noise:
        n = np.cross(u, v)
        pts = pts + (rng or np.random.default_rng(0)).normal(0, noise, (len(pts), 1)) * n / np.linalg.norm(n)
    return pts


def angle_deg(a, b):
    return math.degrees(math.acos(min(1.0, abs(float(a @ b)) / np.linalg.norm(a) / np.linalg.norm(b))))


# normals -----------------------------------------------------------------------


def test_normals_on_z_plane_face_sensor():
    pts = grid_plane([-0.5, -0.5, 1.0], [1, 0, 0], [0, 1, 0], step=0.05)
    c = estimate_normals(PointCloud(pts), k=10)
    assert np.allclose(c.normals, [0, 0, -1], atol=1e-9)
    assert not c.degenerate.any()


def test_noisy_normals_within_five_degrees():
    rng = np.random.default_rng(1)
    pts = grid_plane([2.0, -0.5, -0.5], [0, 1, 0], [0, 0, 1], step=0.03, noise=0.002, rng=rng)
    c = estimate_normals(PointCloud(pts), k=30)
    errs = [angle_deg(n, np.array([1.0, 0, 0])) for n in c.normals]
    assert np.median(errs) < 5.0


def test_collinear_neighbourhood_degenerate():
    pts = np.c_[np.linspace(0, 1, 20), np.zeros(20), np.ones(20)]
    c = estimate_normals(PointCloud(pts), k=5)
    assert c.degenerate.all()
    assert np.allclose(np.linalg.norm(c.normals, axis=1), 1.0)


# region growing ----------------------------------------------------------------------


def test_parallel_planes_not_merged():
    a = grid_plane([2.0, -0.5, -0.5], [0, 1, 0], [0, 0, 1], step=0.05)
    b = grid_plane([2.5, -0.5, -0.5], [0, 1, 0], [0, 0, 1], step=0.05)
    c = estimate_normals(PointCloud(np.vstack([a, b])), k=10)
    sets = region_grow(c, radius=0.1, angle_deg=8.0, min_points=10)
    assert len(sets) == 2
    for s in sets:
        assert (s < len(a)).all() or (s >= len(a)).all()


def test_single_plane_recall():
    pts = grid_plane([2.0, -0.5, -0.5], [0, 1, 0], [0, 0, 1], step=0.03, noise=0.002)
    c = estimate_normals(PointCloud(pts), k=30)
    sets = region_grow(c, radius=0.1, angle_deg=8.0, min_points=10)
    assert max(len(s) for s in sets) >= 0.99 * len(pts)


def test_noise_ball_has_no_large_set():
    rng = np.random.default_rng(3)
    pts = rng.normal(size=(1000, 3)) * 0.3 + [3.0, 0, 0]
    c = estimate_normals(PointCloud(pts), k=15)
    sets = region_grow(c, radius=0.1, angle_deg=8.0)
    assert max(len(s) for s in sets) <= 0.05 * len(pts)


def test_region_grow_needs_normals():
    with pytest.raises(ValueError):
        region_grow(PointCloud(np.zeros((5, 3))))


@given(st.integers(0, 1000))
@settings(max_examples=15, deadline=None)
def test_region_sets_are_disjoint(seed):
    rng = np.random.default_rng(seed)
    pts = np.vstack([
        grid_plane([2.0, -0.5, -0.5], [0, 1, 0], [0, 0, 1], step=0.08),
        grid_plane([0.0, 2.0, -0.5], [1, 0, 0], [0, 0, 1], step=0.08),
        rng.normal(size=(100, 3)) + [0, 0, 3],
    ])
    c = estimate_normals(PointCloud(pts), k=10)
    sets = region_grow(c, radius=0.15, seed=seed)
    allidx = np.concatenate(sets)
    assert len(allidx) == len(np.unique(allidx))


# filtering ---------------------------------------------------------------------


def test_filter_keeps_board_drops_fragment_and_sphere():
    rng = np.random.default_rng(5)
    board = grid_plane([2.0, -0.5, -0.5], [0, 1, 0], [0, 0, 1], step=0.03, noise=0.005, rng=rng)
    frag = grid_plane([2.0, 1.0, 0.0], [0, 1, 0], [0, 0, 1], size=(0.2, 0.2), step=0.03)
    d = rng.normal(size=(800, 3))
    sphere = 0.5 * d / np.linalg.norm(d, axis=1, keepdims=True) + [0, -3.0, 0]
    pts = np.vstack([board, frag, sphere])
    c = estimate_normals(PointCloud(pts), k=20)
    nb, nf = len(board), len(frag)
    sets = [np.arange(nb), np.arange(nb, nb + nf), np.arange(nb + nf, len(pts))]
    segs = filter_planes(sets, c)
    assert len(segs) == 1
    assert angle_deg(segs[0].normal, np.array([1.0, 0, 0])) < 2.0
    assert segs[0].normal[0] < 0  # faces the origin
    assert abs(segs[0].distance(np.array([2.0, 0.3, 0.1]))) < 0.01


@pytest.mark.parametrize("seed", range(20))
def test_extract_planes_recovers_targets(seed):
    s = generate_scene(SceneConfig(n_targets=7, seed=seed))
    scan = simulate_lidar_scan(s, noise_sigma=0.01, seed=seed)
    _, segs, _ = extract_planes(scan)
    hit, total = 0, 0
    for tid, t in enumerate(s.targets):
        mask = scan.target_ids == tid
        if mask.sum() < 30:
            continue
        total += mask.sum()
        best = max(segs, key=lambda g: np.count_nonzero(mask[g.indices]))
        hit += np.count_nonzero(mask[best.indices])
        if np.count_nonzero(mask[best.indices]) > 0.5 * mask.sum():
            assert angle_deg(best.normal, t.normal) < 3.0
    assert hit / total >= 0.90


# landmark scoring -------------------------------------------------------------------


def test_score_landmark_examples():
    assert score_landmark(10, 0, 1.0) == 10
    assert score_landmark(10, 5, 1.0) == 5
    assert np.array_equal(score_landmark([3, 4], [1, 4], 0.5), [2.5, 2.0])


def test_balanced_gamma():
    na, nb = np.array([10, 20, 30]), np.array([1, 2, 3])
    g = balanced_gamma(na, nb)
    assert g == 10.0
    assert abs(np.mean(na) - g * np.mean(nb)) < 1e-12
    assert balanced_gamma(na, np.zeros(3)) == 1.0


# association ------------------------------------------------------------------------


def board_cloud():
    pts = grid_plane([2.0, -0.5, -0.5], [0, 1, 0], [0, 0, 1], step=0.05)
    c = estimate_normals(PointCloud(pts), k=10)
    _, segs, _ = extract_planes(PointCloud(pts), SegmentationConfig(normal_k=10, min_area=0.05))
    return c, segs


def test_associate_self_and_score_zero():
    c, segs = board_cloud()
    assocs, rej = associate(c.points[[10, 200]], segs, c)
    assert not rej
    assert all(10 in a.neighbors or 200 in a.neighbors for a in assocs)
    assert all(a.score < 1e-12 for a in assocs)


def test_association_neighbours_match_linear_scan():
    c, segs = board_cloud()
    rng = np.random.default_rng(0)
    members = segs[0].indices
    for x in rng.uniform([1.95, -0.4, -0.4], [2.05, 0.4, 0.4], (50, 3)):
        (a,), _ = associate(x[None], segs, c)
        d = np.linalg.norm(c.points[members] - x, axis=1)
        brute = np.sort(d)[:3]
        assert np.allclose(np.sort(np.linalg.norm(a.points - x, axis=1)), brute, atol=1e-12)


def test_no_association_far_away():
    c, segs = board_cloud()
    idx = SegmentIndex(c, segs)
    with pytest.raises(NoAssociation):
        idx.associate_one(0, np.array([4.0, 0, 0]), cutoff=0.5)
    _, rej = associate(np.array([[4.0, 0, 0]]), segs, c)
    assert rej == [0]
    with pytest.raises(NoAssociation):
        SegmentIndex(c, [])


def test_score_association_examples():
    pts = np.array([[0, 0, 1.0], [1, 0, 1], [0, 1, 1]])
    normals = np.tile([0, 0, 1.0], (3, 1))
    a = Association(0, 0, np.arange(3), pts, normals)
    assert score_association(a, [0.2, 0.2, 1.0]) == 0.0
    assert abs(score_association(a, [0.2, 0.2, 1.01]) - 0.03) < 1e-12


def test_rejected_landmarks_score_worse():
    c, segs = board_cloud()
    rng = np.random.default_rng(2)
    good = c.points[rng.choice(len(c.points), 30)] + rng.normal(0, 0.003, (30, 3))
    bad = c.points[rng.choice(len(c.points), 30)] + [0.15, 0, 0]
    x = np.vstack([good, bad])
    assocs, rej = associate(x, segs, c, max_score=0.1)
    kept = {a.landmark for a in assocs}
    assert kept == set(range(30)) and rej == list(range(30, 60))
    all_scores, _ = associate(x, segs, c)
    sc = {a.landmark: a.score for a in all_scores}
    assert np.mean([sc[j] for j in rej]) > np.mean([sc[j] for j in kept])


def test_associate_corners_mutual():
    corners = np.array([[0, 0, 0], [1, 0, 0], [0, 1, 0.0]])
    lm = np.array([[0.01, 0, 0], [1.02, 0, 0], [5, 5, 5], [0.03, 0, 0]])
    m = associate_corners(lm, corners, cutoff=0.1)
    assert m == {0: 0, 1: 1}
