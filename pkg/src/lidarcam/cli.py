"""lidarcam command line.

Subcommands::

    simulate       synthetic scene, laser scan and camera pass
    segment        plane extraction on a PLY scan
    calibrate      joint solve from simulated (or exported) data
    evaluate       extrinsic error of a calibration against ground truth
    observability  nullspace checks for the plane/point scenarios
    placement      2D determinant sweeps and a plate layout
    experiment     Monte-Carlo runs of a preset over many seeds

Exit status is 0 on success, 2 when some experiment seeds failed and 1 on a
hard error.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from .cloud import read_ply, write_ply
from .experiment import PRESETS, ExperimentSpec, dumps, run_experiment
from .geometry import CameraIntrinsics, RigidPose
from .observability import slam_gauge_report, verify_plane_cases, verify_point_cases
from .pipeline import PipelineConfig, calibrate, extrinsic_error
from .placement import beta_sweep, min_pairwise_angle, recommend_placement, separation_sweep, write_csv
from .scene import TARGET_KINDS, Scene, SceneConfig, SensorData, generate_scene, perturb_extrinsics, simulate
from .segmentation import SegmentationConfig, extract_planes

EXIT_OK, EXIT_ERROR, EXIT_PARTIAL = 0, 1, 2


def parse_seeds(text: str) -> list[int]:
    """``"0-19"``, ``"1,4,9"`` or a mix such as ``"0-3,10"``."""
    out = []
    for part in text.split(","):
        part = part.strip()
        if not part:
            continue
        if "-" in part:
            a, b = part.split("-", 1)
            out.extend(range(int(a), int(b) + 1))
        else:
            out.append(int(part))
    if not out:
        raise argparse.ArgumentTypeError("empty seed list")
    return out


def _load_json(path):
    return json.loads(Path(path).read_text()) if path else {}


def _write(path: Path, obj) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(dumps(obj))
    return path


# ---------------------------------------------------------------------------
# subcommands


def cmd_simulate(args) -> int:
    cfg = _load_json(args.config)
    scene_cfg = dict(cfg.get("scene", cfg))
    scene_cfg["seed"] = args.seed
    if args.preset:
        scene_cfg["placement"] = args.preset
    if args.target_kind:
        scene_cfg["target_kind"] = args.target_kind
    scene = generate_scene(SceneConfig.from_dict(scene_cfg))
    noise = cfg.get("noise", {})
    data = simulate(
        scene,
        lidar_sigma=args.lidar_sigma if args.lidar_sigma is not None else noise.get("lidar_sigma", 0.01),
        pixel_sigma=args.pixel_sigma if args.pixel_sigma is not None else noise.get("pixel_sigma", 0.5),
        landmark_sigma=noise.get("landmark_sigma", 0.02),
        seed=args.seed,
    )
    init = perturb_extrinsics(scene.extrinsics, args.init_rot, args.init_trans, args.seed)
    out = Path(args.out)
    _write(out / "scene.json", scene.to_dict())
    _write(out / "sensor.json", data.to_dict())
    _write(out / "rig.json", {"intrinsics": scene.intrinsics.to_dict(), "stereo_baseline": scene.stereo_baseline})
    _write(out / "init.json", init.to_dict())
    write_ply(out / "scan.ply", data.scan)
    print(f"scene with {len(scene.targets)} targets, {len(data.scan)} laser points, {len(data.obs_uv)} image observations -> {out}")
    return EXIT_OK


def cmd_segment(args) -> int:
    cloud = read_ply(args.scan)
    seg_cfg = SegmentationConfig(**_load_json(args.config).get("segmentation", {}))
    seg_cfg.seed = args.seed
    withn, segments, _ = extract_planes(cloud, seg_cfg)
    out = Path(args.out)
    _write(out / "segments.json", {"config": seg_cfg.to_dict(), "segments": [s.to_dict() for s in segments]})
    write_ply(out / "scan_normals.ply", withn)
    print(f"{len(segments)} planes from {len(cloud)} points -> {out}")
    return EXIT_OK


def cmd_calibrate(args) -> int:
    data_dir = Path(args.data)
    rig = _load_json(data_dir / "rig.json")
    scan = read_ply(data_dir / "scan.ply")
    data = SensorData.from_dict(_load_json(data_dir / "sensor.json"), scan)
    init = RigidPose.from_dict(_load_json(args.init or data_dir / "init.json"))
    cfg_d = _load_json(args.config).get("pipeline", {})
    cfg = PipelineConfig(**cfg_d)
    cfg.segmentation.seed = args.seed
    cfg.split_seed = args.seed
    if args.no_reassociate:
        cfg.reassociate = False
    res = calibrate(data, CameraIntrinsics.from_dict(rig["intrinsics"]), rig["stereo_baseline"], init, cfg)
    report = {
        "extrinsics": res.extrinsics.to_dict(),
        "solver": res.report.to_dict(),
        "heldout_rms_m": res.heldout,
        "n_plane_landmarks": res.n_plane_factors,
        "n_point_landmarks": res.n_point_factors,
        "n_segments": len(res.segments),
        "train_ids": res.train_ids.tolist(),
        "test_ids": res.test_ids.tolist(),
    }
    path = _write(Path(args.out) / "calibration.json", report)
    print(f"{res.report.termination} after {res.report.iterations} iterations -> {path}")
    return EXIT_OK


def cmd_evaluate(args) -> int:
    calib = _load_json(args.calibration)
    scene = Scene.from_dict(_load_json(args.scene))
    est = RigidPose.from_dict(calib["extrinsics"])
    rot, trans = extrinsic_error(est, scene.extrinsics)
    report = {"rotation_deg": rot, "translation_m": trans, "heldout_rms_m": calib.get("heldout_rms_m")}
    _write(Path(args.out) / "evaluation.json", report)
    print(f"rotation {rot:.4f} deg, translation {trans:.4f} m")
    return EXIT_OK


def cmd_observability(args) -> int:
    cases = []
    for n in (1, 2, 3):
        cases.append(verify_plane_cases(n, n_keyframes=args.keyframes).to_dict())
        cases.append(verify_point_cases(n, n_keyframes=args.keyframes).to_dict())
    gauge = [slam_gauge_report(m, seed=args.seed) for m in (1, 5, 20)]
    _write(Path(args.out) / "observability.json", {"cases": cases, "slam_gauge": gauge})
    for c in cases:
        print(f"{c['n_items']} {c['case']}(s): null dim {c['null_dim']} (expected {c['expected_dim']}) {'ok' if c['passed'] else 'FAIL'}")
    bad = [c for c in cases if not c["passed"]] + [g for g in gauge if g["null_dim"] != 6]
    return EXIT_OK if not bad else EXIT_ERROR


def cmd_placement(args) -> int:
    out = Path(args.out)
    p1, p2, p3 = np.array([1.0, 0.3]), np.array([1.0, -0.4]), np.array([0.4, 1.0])
    betas = np.linspace(0.0, np.pi, args.grid + 1)
    brows = beta_sweep(p1, p2, p3, args.theta, betas)
    srows = separation_sweep(args.theta, np.linspace(0.0, 2.0, args.grid + 1))
    write_csv(out / "beta_sweep.csv", ["beta_rad", "det_closed", "det_hessian"], brows)
    write_csv(out / "separation_sweep.csv", ["separation_m", "det_closed", "det_hessian"], srows)
    plates = recommend_placement(args.targets, args.radius)
    _write(
        out / "placement.json",
        {"plates": [p.to_dict() for p in plates], "min_pairwise_angle_deg": float(np.degrees(min_pairwise_angle(plates)))},
    )
    if args.plot:
        from .plotting import determinant_curves

        determinant_curves(brows, srows, out / "determinant.png")
    best = betas[int(np.argmax([r[1] for r in brows]))]
    print(f"|H| peaks at beta = {np.degrees(best):.1f} deg; {len(plates)} plates -> {out}")
    return EXIT_OK


def cmd_experiment(args) -> int:
    base = _load_json(args.config).get("experiment", {})
    if args.preset:
        base["preset"] = args.preset
    if args.target_kind:
        base["target_kind"] = args.target_kind
    if args.seeds:
        base["seeds"] = args.seeds
    if args.lidar_sigma is not None:
        base["lidar_sigma"] = args.lidar_sigma
    if args.pixel_sigma is not None:
        base["pixel_sigma"] = args.pixel_sigma
    if args.no_reassociate:
        base["reassociate"] = False
    spec = ExperimentSpec(**base)
    res = run_experiment(spec, jobs=args.jobs, out=args.out)
    if args.plot:
        from .plotting import error_boxplots

        error_boxplots({f"{spec.preset}/{spec.target_kind}": res}, Path(args.out) / f"{spec.preset}_{spec.target_kind}.png")
    s = res.summary()
    print(
        f"{spec.preset}/{spec.target_kind}: median rotation {s['rotation_deg']['median']} deg, "
        f"translation {s['translation_m']['median']} m, {s['n_failed']}/{s['n_seeds']} failed"
    )
    for r in res.failures:
        print(f"  seed {r.seed}: {r.error}", file=sys.stderr)
    return EXIT_PARTIAL if res.failures else EXIT_OK


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="lidarcam", description="LiDAR-camera extrinsic calibration toolkit")
    sub = ap.add_subparsers(dest="command", required=True)

    def common(p, out_default):
        p.add_argument("--config", help="JSON config file")
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--out", default=out_default, help="output directory")

    p = sub.add_parser("simulate", help="generate a scene and simulate both sensors")
    common(p, "out/sim")
    p.add_argument("--preset", choices=("scattered", "centralized"))
    p.add_argument("--target-kind", choices=TARGET_KINDS)
    p.add_argument("--lidar-sigma", type=float)
    p.add_argument("--pixel-sigma", type=float)
    p.add_argument("--init-rot", type=float, default=5.0, help="initial guess rotation offset [deg]")
    p.add_argument("--init-trans", type=float, default=0.1, help="initial guess translation offset [m]")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("segment", help="extract planes from a PLY scan")
    common(p, "out/segment")
    p.add_argument("--scan", required=True)
    p.set_defaults(func=cmd_segment)

    p = sub.add_parser("calibrate", help="solve for the extrinsics")
    common(p, "out/calib")
    p.add_argument("--data", required=True, help="directory written by 'simulate'")
    p.add_argument("--init", help="initial extrinsics JSON (default: <data>/init.json)")
    p.add_argument("--no-reassociate", action="store_true", help="associate once, before solving")
    p.set_defaults(func=cmd_calibrate)

    p = sub.add_parser("evaluate", help="compare a calibration with ground truth")
    common(p, "out/eval")
    p.add_argument("--calibration", required=True)
    p.add_argument("--scene", required=True)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("observability", help="nullspace checks")
    common(p, "out/observability")
    p.add_argument("--keyframes", type=int, default=3)
    p.set_defaults(func=cmd_observability)

    p = sub.add_parser("placement", help="determinant sweeps and plate layout")
    common(p, "out/placement")
    p.add_argument("--theta", type=float, default=0.3, help="camera rotation [rad]")
    p.add_argument("--grid", type=int, default=180)
    p.add_argument("--targets", type=int, default=4)
    p.add_argument("--radius", type=float, default=3.0)
    p.add_argument("--plot", action="store_true")
    p.set_defaults(func=cmd_placement)

    p = sub.add_parser("experiment", help="Monte-Carlo preset over seeds")
    common(p, "out/experiment")
    p.add_argument("--preset", choices=PRESETS)
    p.add_argument("--target-kind", choices=TARGET_KINDS)
    p.add_argument("--seeds", type=parse_seeds, help="e.g. 0-19 or 1,3,5")
    p.add_argument("--lidar-sigma", type=float)
    p.add_argument("--pixel-sigma", type=float)
    p.add_argument("--no-reassociate", action="store_true")
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("--plot", action="store_true")
    p.set_defaults(func=cmd_experiment)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except Exception as e:
        print(f"lidarcam {args.command}: {type(e).__name__}: {e}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
