"""Point cloud container and ASCII PLY reader/writer.

The on-disk layout is one vertex element with properties
``x y z nx ny nz target_id``; normals are written as zeros when they have not
been estimated. ``target_id`` is -1 for background returns.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

BACKGROUND = -1


@dataclass
class PointCloud:
    points: np.ndarray
    target_ids: np.ndarray | None = None
    normals: np.ndarray | None = None
    degenerate: np.ndarray | None = None

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=float).reshape(-1, 3)
        if self.target_ids is None:
            self.target_ids = np.full(len(self.points), BACKGROUND, dtype=int)
        self.target_ids = np.asarray(self.target_ids, dtype=int)

    def __len__(self) -> int:
        return len(self.points)

    def subset(self, idx) -> "PointCloud":
        idx = np.asarray(idx)
        return PointCloud(
            self.points[idx],
            self.target_ids[idx],
            None if self.normals is None else self.normals[idx],
            None if self.degenerate is None else self.degenerate[idx],
        )


def write_ply(path, cloud: PointCloud) -> None:
    normals = cloud.normals if cloud.normals is not None else np.zeros_like(cloud.points)
    lines = [
        "ply",
        "format ascii 1.0",
        f"element vertex {len(cloud)}",
        "property double x",
        "property double y",
        "property double z",
        "property double nx",
        "property double ny",
        "property double nz",
        "property int target_id",
        "end_header",
    ]
    for p, n, t in zip(cloud.points.tolist(), normals.tolist(), cloud.target_ids.tolist()):
        lines.append(" ".join(repr(float(v)) for v in (*p, *n)) + f" {int(t)}")
    Path(path).write_text("\n".join(lines) + "\n")


def read_ply(path) -> PointCloud:
    text = Path(path).read_text().splitlines()
    if not text or text[0].strip() != "ply":
        raise ValueError(f"{path}: not a PLY file")
    n = None
    props = []
    body_start = None
    for i, line in enumerate(text):
        parts = line.split()
        if parts[:2] == ["format", "ascii"] or not parts:
            continue
        if parts[0] == "format":
            raise ValueError(f"{path}: only ASCII PLY is supported")
        if parts[0] == "element" and parts[1] == "vertex":
            n = int(parts[2])
        elif parts[0] == "property":
            props.append(parts[-1])
        elif parts[0] == "end_header":
            body_start = i + 1
            break
    if n is None or body_start is None:
        raise ValueError(f"{path}: malformed header")
    data = np.array([row.split() for row in text[body_start : body_start + n]], dtype=float).reshape(n, len(props))
    col = {name: data[:, k] for k, name in enumerate(props)}
    points = np.stack([col["x"], col["y"], col["z"]], axis=1)
    normals = None
    if {"nx", "ny", "nz"} <= col.keys():
        normals = np.stack([col["nx"], col["ny"], col["nz"]], axis=1)
        if not np.any(normals):
            normals = None
    tid = col["target_id"].astype(int) if "target_id" in col else None
    return PointCloud(points, tid, normals)
