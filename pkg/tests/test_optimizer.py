import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.spatial.transform import Rotation

from lidarcam.geometry import CameraIntrinsics, RigidPose, apply_rotation_error, rotation_angle, so3_exp
from lidarcam.optimizer import (
    CalibrationGraph,
    InsufficientConstraints,
    SingularNormalEquations,
    SolverConfig,
    huber,
    linearize,
    normal_equation_nullspace,
    point_to_plane_residual,
    point_to_point_residual,
    reprojection_residual,
    rigid_align,
    solve,
    transform_graph,
)

K = CameraIntrinsics(400.0, 400.0, 320.0, 240.0, 640, 480)
BOARD_NORMALS = np.array([[-1.0, 0.0, 0.0], [-0.5, -0.8, 0.0], [-0.5, 0.3, -0.8]])


def looking_at(position, target):
    z = np.asarray(target, float) - position
    z /= np.linalg.norm(z)
    x = np.cross([0, 0, 1.0], z)
    if np.linalg.norm(x) < 1e-6:
        x = np.cross([0, 1.0, 0], z)
    x /= np.linalg.norm(x)
    R = np.vstack([x, np.cross(z, x), z])
    return RigidPose.from_matrix(R, np.asarray(position, float))


def rig(n_poses=4):
    return [looking_at(np.array([0.0, 0.2 * k - 0.3, 0.1 * k]), [4.0, 0.0, 0.0]) for k in range(n_poses)]


def board_points(normal, center, per=9, size=0.6):
    n = normal / np.linalg.norm(normal)
    a = np.cross(n, [0, 0, 1.0]) if abs(n[2]) < 0.9 else np.cross(n, [0, 1.0, 0])
    a /= np.linalg.norm(a)
    b = np.cross(n, a)
    s = int(np.sqrt(per))
    g = np.linspace(-size / 2, size / 2, s)
    return np.array([center + u * a + v * b for u in g for v in g])


def make_graph(n_planes=3, n_points=0, n_poses=4, baseline=0.12, pixel_noise=0.0, seed=0):
    rng = np.random.default_rng(seed)
    poses = rig(n_poses)
    centers = np.array([[4.0, 0.0, 0.0], [4.0, 1.0, 0.3], [4.0, -1.0, 0.5]])
    lms, plane_l, plane_p, plane_n = [], [], [], []
    for i in range(3):
        pts = board_points(BOARD_NORMALS[i], centers[i])
        for x in pts:
            if i < n_planes:
                plane_l.append(len(lms))
                plane_p.append(centers[i])
                plane_n.append(BOARD_NORMALS[i] / np.linalg.norm(BOARD_NORMALS[i]))
            lms.append(x)
    lms = np.array(lms)
    ok, oj, oc, uv = [], [], [], []
    for k, P in enumerate(poses):
        for j, x in enumerate(lms):
            for c in (0, 1):
                xc = P.to_camera(x) - [c * baseline, 0, 0]
                u = np.array([K.fx * xc[0] / xc[2] + K.cx, K.fy * xc[1] / xc[2] + K.cy])
                ok.append(k)
                oj.append(j)
                oc.append(c)
                uv.append(u + rng.normal(0, pixel_noise, 2) if pixel_noise else u)
    g = CalibrationGraph(poses, lms, K, np.array(ok), np.array(oj), np.array(uv), np.array(oc), baseline)
    g.set_plane_factors(plane_l, plane_p, plane_n)
    g.set_point_factors(np.arange(n_points) * 9, lms[np.arange(n_points) * 9])
    return g


def perturb(g, rot=0.03, trans=0.05, lm=0.01, seed=1):
    rng = np.random.default_rng(seed)
    h = g.copy()
    h.poses = [RigidPose.from_matrix(so3_exp(rng.normal(0, rot, 3)) @ P.R, P.translation + rng.normal(0, trans, 3)) for P in g.poses]
    h.landmarks = g.landmarks + rng.normal(0, lm, g.landmarks.shape)
    return h


# residuals ------------------------------------------------------------------------


def test_reprojection_residual_zero_at_truth():
    P = RigidPose(np.array([1.0, 0, 0, 0]), np.zeros(3))
    r, Jp, Jl = reprojection_residual(P, [0.1, 0, 1.0], [360, 240], K)
    assert np.allclose(r, 0.0) and Jp.shape == (2, 6) and Jl.shape == (2, 3)


def test_reprojection_jacobians_finite_difference():
    rng = np.random.default_rng(0)
    worst = 0.0
    for _ in range(500):
        P = RigidPose(Rotation.random(random_state=rng).as_quat(scalar_first=True), rng.normal(size=3))
        x = P.to_world(np.array([rng.uniform(-1, 1), rng.uniform(-1, 1), rng.uniform(1, 5)]))
        off = rng.choice([0.0, 0.12])
        r0, Jp, Jl = reprojection_residual(P, x, [0, 0], K, off)
        Jn = np.zeros((2, 9))
        h = 1e-6
        for a in range(9):
            e = np.zeros(9)
            e[a] = h
            def ev(e):
                Q = RigidPose.from_matrix(apply_rotation_error(P.R, e[:3]), P.translation + e[3:6])
                return reprojection_residual(Q, x + e[6:], [0, 0], K, off)[0]
            Jn[:, a] = (ev(e) - ev(-e)) / (2 * h)
        J = np.hstack([Jp, Jl])
        worst = max(worst, np.linalg.norm(J - Jn) / np.linalg.norm(J))
    assert worst < 1e-5


def test_point_to_plane_examples():
    r, J = point_to_plane_residual([0, 0, 1.5], [0, 0, 1], [0, 0, 1])
    assert r == 0.5 and np.array_equal(J, [[0, 0, 1]])
    assert point_to_plane_residual([3, -2, 1], [0, 0, 1], [0, 0, 1])[0] == 0.0


def test_point_to_point_example():
    r, J = point_to_point_residual([1, 2, 3], [1, 2, 2.5])
    assert np.array_equal(r, [0, 0, 0.5]) and np.array_equal(J, np.eye(3))


def test_huber_cases():
    assert huber(0.5, 1.0) == (0.125, 1.0)
    c, w = huber(3.0, 1.0)
    assert c == 2.5 and abs(w - 1 / 3) < 1e-15
    c, w = huber(np.array([-3.0, 1.0]), 1.0)
    assert np.allclose(c, [2.5, 0.5]) and np.allclose(w, [1 / 3, 1])


def test_graph_index_validation():
    g = make_graph()
    with pytest.raises(ValueError):
        g.set_plane_factors([10_000], [[0, 0, 0]], [[1, 0, 0]])
    with pytest.raises(ValueError):
        CalibrationGraph([], np.zeros((0, 3)), K, [], [], np.zeros((0, 2)))


def test_full_jacobian_finite_difference():
    g = perturb(make_graph(n_planes=2, n_points=1, n_poses=2))
    cfg = SolverConfig()
    lin = linearize(g, cfg, robust=False)
    J = lin.J.toarray()
    rng = np.random.default_rng(3)
    for col in rng.choice(g.dim, 40, replace=False):
        e = np.zeros(g.dim)
        e[col] = 1e-6
        d = (linearize(g.retract(e), cfg, False, False).r - linearize(g.retract(-e), cfg, False, False).r) / 2e-6
        assert np.allclose(J[:, col], d, atol=1e-4 * max(1.0, np.abs(d).max()))


def test_rigid_motion_leaves_pixel_residuals_unchanged():
    g = perturb(make_graph())
    R = so3_exp([0.1, -0.2, 0.3])
    h = transform_graph(g, R, np.array([0.5, -1.0, 0.2]))
    cfg = SolverConfig()
    a = linearize(g, cfg, False, False).r[: 2 * len(g.obs_pose)]
    b = linearize(h, cfg, False, False).r[: 2 * len(g.obs_pose)]
    assert np.allclose(a, b, atol=1e-9)


# nullspace ------------------------------------------------------------------------


@pytest.mark.parametrize("n_planes,expected", [(1, 3), (2, 1), (3, 0)])
def test_plane_graph_nullity(n_planes, expected):
    dim, basis, _ = normal_equation_nullspace(make_graph(n_planes=n_planes, n_poses=3))
    assert dim == expected


@pytest.mark.parametrize("n_points,expected", [(1, 3), (2, 1), (3, 0)])
def test_point_graph_nullity(n_points, expected):
    dim, _, _ = normal_equation_nullspace(make_graph(n_planes=0, n_points=n_points, n_poses=3))
    assert dim == expected


def test_camera_only_graph_has_gauge():
    dim, _, _ = normal_equation_nullspace(make_graph(n_planes=0, n_poses=3))
    assert dim >= 6
    dim, _, _ = normal_equation_nullspace(make_graph(n_planes=0, n_poses=3, baseline=0.0))
    assert dim >= 7  # scale as well


@pytest.mark.parametrize("n_planes", [1, 2])
def test_solve_refuses_underconstrained(n_planes):
    with pytest.raises(SingularNormalEquations) as e:
        solve(make_graph(n_planes=n_planes, n_poses=3))
    assert e.value.null_dim == {1: 3, 2: 1}[n_planes]


# solver -----------------------------------------------------------------------------


def test_exact_recovery_three_boards():
    truth = make_graph()
    g, rep = solve(perturb(truth), SolverConfig(max_iters=200))
    assert rep.converged
    E, T = g.extrinsics, truth.extrinsics
    assert rotation_angle(E.R.T @ T.R) < 1e-6
    assert np.linalg.norm(E.translation - T.translation) < 1e-6
    assert rep.null_dim == 0


def test_zero_residual_stops_immediately():
    g, rep = solve(make_graph())
    assert rep.iterations <= 1
    assert rep.final_cost < 1e-12


@given(st.integers(0, 10_000))
@settings(max_examples=8, deadline=None)
def test_cost_never_increases(seed):
    g, rep = solve(perturb(make_graph(pixel_noise=0.5, seed=seed), seed=seed), SolverConfig(check_rank=False))
    t = np.array(rep.cost_trace)
    assert np.all(np.diff(t) <= 1e-9 * t[0])
    assert rep.termination in ("step_tol", "cost_tol", "damping_exhausted", "max_iters", "zero_cost")


def test_max_iters_reported():
    g, rep = solve(perturb(make_graph(pixel_noise=0.5)), SolverConfig(max_iters=1, check_rank=False))
    assert rep.iterations == 1 and rep.termination == "max_iters" and not rep.converged


def test_noisy_solution_is_a_minimum_and_error_scales_with_noise():
    truth = make_graph()
    cfg = SolverConfig()
    errs = []
    for sigma in (0.05, 0.5):
        noisy = make_graph(pixel_noise=sigma, seed=4)
        g, rep = solve(perturb(noisy), cfg)
        # at least as good as the ground truth state under the same measurements
        assert rep.final_cost <= linearize(noisy, cfg, False).cost
        errs.append(np.linalg.norm(g.extrinsics.translation - truth.extrinsics.translation))
    # first-order estimator: error proportional to the noise level
    assert 7.0 < errs[1] / errs[0] < 13.0


def test_rigid_align_recovers_offset():
    truth = make_graph()
    moved = transform_graph(truth, so3_exp([0.05, 0.02, -0.04]), np.array([0.1, -0.05, 0.08]))
    back = rigid_align(moved)
    assert rotation_angle(back.extrinsics.R.T @ truth.extrinsics.R) < 1e-8
    assert np.allclose(back.landmarks, truth.landmarks, atol=1e-8)


def test_rigid_align_needs_laser():
    g = make_graph(n_planes=0)
    with pytest.raises(InsufficientConstraints):
        rigid_align(g)
