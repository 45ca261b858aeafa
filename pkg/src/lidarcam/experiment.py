"""Monte-Carlo calibration experiments over seeds, with per-seed records and
median / quartile summaries."""

from __future__ import annotations

import csv
import dataclasses
import json
import time
import traceback
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .pipeline import PipelineConfig, calibrate, extrinsic_error
from .scene import SceneConfig, generate_scene, perturb_extrinsics, simulate

PRESETS = ("scattered", "centralized", "single-shot-style")


@dataclass
class ExperimentSpec:
    preset: str = "scattered"
    target_kind: str = "chessboard"
    lidar_sigma: float = 0.01
    pixel_sigma: float = 0.5
    landmark_sigma: float = 0.02
    seeds: list[int] = field(default_factory=lambda: list(range(20)))
    test_fraction: float = 0.5
    n_targets: int = 7
    init_rot_deg: float = 5.0
    init_trans_m: float = 0.1
    reassociate: bool = True
    check_rank: bool = False
    n_keyframes: int = 24

    def __post_init__(self):
        if self.preset not in PRESETS:
            raise ValueError(f"unknown preset {self.preset!r}")
        self.seeds = [int(s) for s in self.seeds]
        if not self.seeds:
            raise ValueError("seed list is empty")
        if not 0.0 < self.test_fraction < 1.0:
            raise ValueError("test fraction must be in (0, 1)")
        if min(self.lidar_sigma, self.pixel_sigma, self.landmark_sigma) < 0:
            raise ValueError("noise levels must be non-negative")

    @property
    def noiseless(self) -> bool:
        return self.lidar_sigma == 0 and self.pixel_sigma == 0 and self.landmark_sigma == 0

    def scene_config(self, seed: int) -> SceneConfig:
        placement = "centralized" if self.preset == "single-shot-style" else self.preset
        return SceneConfig(
            n_targets=self.n_targets,
            placement=placement,
            target_kind=self.target_kind,
            seed=seed,
            n_keyframes=self.n_keyframes,
        )

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentSpec":
        return cls(**d)


@dataclass
class SeedRecord:
    seed: int
    rotation_deg: float = float("nan")
    translation_m: float = float("nan")
    heldout_m: float | None = None
    iterations: int = 0
    termination: str = ""
    runtime_s: float = 0.0
    error: str | None = None
    detail: str | None = None

    @property
    def ok(self) -> bool:
        return self.error is None


@dataclass
class EvalResult:
    spec: ExperimentSpec
    records: list[SeedRecord]

    @property
    def failures(self) -> list[SeedRecord]:
        return [r for r in self.records if not r.ok]

    def column(self, name: str) -> np.ndarray:
        vals = [getattr(r, name) for r in self.records if r.ok]
        return np.array([np.nan if v is None else v for v in vals], dtype=float)

    def stats(self, name: str) -> dict:
        v = self.column(name)
        v = v[np.isfinite(v)]
        if not len(v):
            return {"median": None, "q1": None, "q3": None, "n": 0}
        q1, med, q3 = np.percentile(v, [25, 50, 75])
        return {"median": float(med), "q1": float(q1), "q3": float(q3), "n": int(len(v))}

    @property
    def median_rotation(self) -> float:
        return self.stats("rotation_deg")["median"]

    @property
    def median_translation(self) -> float:
        return self.stats("translation_m")["median"]

    def summary(self) -> dict:
        return {
            "spec": self.spec.to_dict(),
            "rotation_deg": self.stats("rotation_deg"),
            "translation_m": self.stats("translation_m"),
            "heldout_m": self.stats("heldout_m"),
            "n_seeds": len(self.records),
            "n_failed": len(self.failures),
            "failures": {str(r.seed): r.error for r in self.failures},
        }


def _scene_and_data(spec: ExperimentSpec, seed: int):
    scene = generate_scene(spec.scene_config(seed))
    if spec.preset == "single-shot-style":
        # same layout as the centralized preset, but the camera never moves
        scene = dataclasses.replace(scene, trajectory=scene.trajectory[:1])
    data = simulate(scene, spec.lidar_sigma, spec.pixel_sigma, spec.landmark_sigma, seed=seed)
    return scene, data


def run_seed(spec: ExperimentSpec, seed: int) -> SeedRecord:
    """One full simulate-segment-associate-solve-evaluate run; never raises."""
    t0 = time.perf_counter()
    rec = SeedRecord(seed)
    try:
        scene, data = _scene_and_data(spec, seed)
        cfg = PipelineConfig(test_fraction=spec.test_fraction, reassociate=spec.reassociate, split_seed=seed)
        cfg.solver.check_rank = spec.check_rank
        init = perturb_extrinsics(scene.extrinsics, spec.init_rot_deg, spec.init_trans_m, seed)
        res = calibrate(data, scene.intrinsics, scene.stereo_baseline, init, cfg)
        rec.rotation_deg, rec.translation_m = extrinsic_error(res.extrinsics, scene.extrinsics)
        rec.heldout_m = res.heldout
        rec.iterations = res.report.iterations
        rec.termination = res.report.termination
    except Exception as e:  # recorded per seed, the remaining seeds still run
        rec.error = f"{type(e).__name__}: {e}"
        rec.termination = "error"
        rec.detail = traceback.format_exc(limit=3)
    rec.runtime_s = time.perf_counter() - t0
    return rec


def _run_one(args):
    spec_dict, seed = args
    return run_seed(ExperimentSpec.from_dict(spec_dict), seed)


def run_experiment(spec: ExperimentSpec, jobs: int = 1, out=None) -> EvalResult:
    """Run every seed, optionally in a process pool, and write artifacts to ``out``.

    Records are sorted by seed before anything is aggregated, so results do
    not depend on ``jobs``.
    """
    work = [(spec.to_dict(), s) for s in spec.seeds]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as ex:
            recs = list(ex.map(_run_one, work))
    else:
        recs = [_run_one(w) for w in work]
    result = EvalResult(spec, sorted(recs, key=lambda r: r.seed))
    if out is not None:
        write_artifacts(result, out)
    return result


RECORD_FIELDS = ("seed", "rotation_deg", "translation_m", "heldout_m", "iterations", "termination", "error")


def write_artifacts(result: EvalResult, out, stem: str | None = None) -> tuple[Path, Path]:
    """Per-seed CSV and summary JSON. Runtimes are left out so reruns are byte-identical."""
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    stem = stem or f"{result.spec.preset}_{result.spec.target_kind}"
    csv_path = out / f"{stem}.csv"
    with csv_path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(RECORD_FIELDS)
        for r in result.records:
            w.writerow([fmt_value(getattr(r, f)) for f in RECORD_FIELDS])
    json_path = out / f"{stem}.json"
    summary = result.summary()
    summary["records"] = [{f: getattr(r, f) for f in RECORD_FIELDS} for r in result.records]
    json_path.write_text(dumps(summary))
    return csv_path, json_path


# ---------------------------------------------------------------------------
# deterministic JSON


def fmt_value(v):
    if v is None:
        return ""
    if isinstance(v, float):
        return format(v, ".17g")
    return v


def _round_floats(obj):
    if isinstance(obj, float):
        if not np.isfinite(obj):
            return None
        return float(format(obj, ".17g"))
    if isinstance(obj, (np.floating, np.integer)):
        return _round_floats(obj.item())
    if isinstance(obj, np.ndarray):
        return _round_floats(obj.tolist())
    if isinstance(obj, dict):
        return {str(k): _round_floats(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_round_floats(v) for v in obj]
    return obj


def dumps(obj) -> str:
    """JSON with sorted keys, floats at 17 significant digits, NaN/inf as null."""
    return json.dumps(_round_floats(obj), sort_keys=True, indent=2) + "\n"
