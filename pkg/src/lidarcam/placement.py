"""Planar (2D) conditioning of the point-to-plane alignment problem.

The extrinsic is reduced to ``(theta, t_x, t_y)``. Each visual point ``p``
on a plate with unit normal ``n`` contributes the residual
``n . (R(theta) p + t - p_r)`` and one Jacobian row. The determinant of the
Gauss-Newton Hessian ``sum J^T J`` is the conditioning measure: larger means
a tighter estimate.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from fractions import Fraction
from pathlib import Path

import numpy as np


class FormulaMismatch(AssertionError):
    """Closed-form determinant disagrees with the assembled Hessian."""


def rot2(theta: float) -> np.ndarray:
    c, s = np.cos(theta), np.sin(theta)
    return np.array([[c, -s], [s, c]])


def drot2(theta: float) -> np.ndarray:
    c, s = np.cos(theta), np.sin(theta)
    return np.array([[-s, -c], [c, -s]])


def residual_2d(n, p, theta: float, t, p_r=(0.0, 0.0)) -> float:
    n, p, t, p_r = (np.asarray(v, float) for v in (n, p, t, p_r))
    return float(n @ (rot2(theta) @ p + t - p_r))


def jacobian_2d(n, p, theta: float) -> np.ndarray:
    """Row ``[n . R'(theta) p, n_x, n_y]``."""
    n = np.asarray(n, float)
    if abs(np.linalg.norm(n) - 1.0) > 1e-9:
        raise ValueError("normal must be unit length")
    return np.array([n @ drot2(theta) @ np.asarray(p, float), n[0], n[1]])


def hessian_2d(rows) -> np.ndarray:
    rows = np.atleast_2d(np.asarray(rows, float))
    if rows.shape[0] < 1 or rows.shape[1] != 3:
        raise ValueError("need at least one 3-column Jacobian row")
    return rows.T @ rows


def q_y(p, theta: float) -> float:
    """y component of ``R(theta) p``."""
    return float(np.sin(theta) * p[0] + np.cos(theta) * p[1])


@dataclass(frozen=True)
class Determinant:
    closed: float
    brute: float

    @property
    def value(self) -> float:
        return self.closed


def exact_det(rows) -> float:
    """det(J^T J) in rational arithmetic, free of the cancellation LU suffers
    when the plates are close to degenerate."""
    J = [[Fraction(float(v)) for v in r] for r in np.atleast_2d(rows)]
    H = [[sum(J[k][i] * J[k][j] for k in range(len(J))) for j in range(3)] for i in range(3)]
    det = (
        H[0][0] * (H[1][1] * H[2][2] - H[1][2] * H[2][1])
        - H[0][1] * (H[1][0] * H[2][2] - H[1][2] * H[2][0])
        + H[0][2] * (H[1][0] * H[2][1] - H[1][1] * H[2][0])
    )
    return float(det)


def _check(closed: float, rows, rtol: float) -> Determinant:
    H = hessian_2d(rows)
    brute = exact_det(rows)
    # a determinant that vanishes in closed form is compared against the scale of H
    floor = 1e-12 * (np.trace(H) / 3.0) ** 3
    if abs(closed - brute) > rtol * max(abs(closed), abs(brute)) + floor:
        raise FormulaMismatch(f"closed form {closed!r} vs Hessian determinant {brute!r}")
    return Determinant(closed, brute)


def det_angle(p1, p2, p3, beta: float, theta: float, rtol: float = 1e-9) -> Determinant:
    """Two points on plate a (normal (1, 0)) and one on plate b at angle ``beta``.

    |H| = (Qy(p1) - Qy(p2))^2 sin^2(beta), with Qy the y component of R(theta) p.
    """
    n1 = np.array([1.0, 0.0])
    n2 = np.array([np.cos(beta), np.sin(beta)])
    rows = [jacobian_2d(n1, p1, theta), jacobian_2d(n1, p2, theta), jacobian_2d(n2, p3, theta)]
    closed = (q_y(p1, theta) - q_y(p2, theta)) ** 2 * np.sin(beta) ** 2
    return _check(float(closed), rows, rtol)


def det_distance(p1, p2, p3, theta: float, rtol: float = 1e-9) -> Determinant:
    """Orthogonal plates (normals (1, 0) and (0, 1)); |H| is the squared
    y-axis separation of the two plate-a points after rotation."""
    rows = [jacobian_2d((1.0, 0.0), p1, theta), jacobian_2d((1.0, 0.0), p2, theta), jacobian_2d((0.0, 1.0), p3, theta)]
    d = np.asarray(p1, float) - np.asarray(p2, float)
    closed = (d[0] * np.sin(theta) + d[1] * np.cos(theta)) ** 2
    return _check(float(closed), rows, rtol)


# ---------------------------------------------------------------------------
# sweeps


def beta_sweep(p1, p2, p3, theta: float, betas) -> list[tuple[float, float, float]]:
    out = []
    for b in betas:
        d = det_angle(p1, p2, p3, float(b), theta)
        out.append((float(b), d.closed, d.brute))
    return out


def separation_sweep(theta: float, separations, p3=(0.5, 1.0)) -> list[tuple[float, float, float]]:
    """Plate-a points split along the direction that maps onto the laser y axis."""
    axis = rot2(theta).T @ np.array([0.0, 1.0])
    base = np.array([1.0, 0.0])
    out = []
    for sep in separations:
        d = det_distance(base + 0.5 * sep * axis, base - 0.5 * sep * axis, p3, theta)
        out.append((float(sep), d.closed, d.brute))
    return out


def write_csv(path, header, rows) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for r in rows:
            w.writerow([repr(float(v)) for v in r])


# ---------------------------------------------------------------------------
# recommender


@dataclass(frozen=True)
class Plate2D:
    center: tuple[float, float]
    normal_angle: float  # radians, normal = (cos, sin)

    @property
    def normal(self) -> np.ndarray:
        return np.array([np.cos(self.normal_angle), np.sin(self.normal_angle)])

    def to_dict(self) -> dict:
        return {"center": list(self.center), "normal_angle": self.normal_angle}


def _line_gap(a: float, b: float) -> float:
    """Angle between two undirected lines, in [0, pi/2]."""
    d = abs(a - b) % np.pi
    return min(d, np.pi - d)


def recommend_placement(n_targets: int, workspace_radius: float, grid: int = 360) -> list[Plate2D]:
    """Greedy heuristic layout of ``n_targets`` plates around a sensor at the origin.

    Normal directions are chosen one at a time from a 0.5 degree grid to
    maximise the smallest pairwise sin^2 of the angle between plates, which
    is the factor the two-plate determinant depends on. Each plate is then put
    on the workspace circle facing the sensor, on whichever side of the
    sensor keeps it furthest from the plates already placed.
    """
    if n_targets < 2:
        raise ValueError("need at least two plates")
    if workspace_radius <= 0:
        raise ValueError("workspace radius must be positive")
    cand = np.arange(grid) * np.pi / grid
    angles = [0.0]
    while len(angles) < n_targets:
        score = np.array([min(np.sin(_line_gap(c, a)) ** 2 for a in angles) for c in cand])
        angles.append(float(cand[int(np.argmax(score))]))  # argmax keeps the first of ties
    plates: list[Plate2D] = []
    for a in angles:
        best = None
        for side in (0.0, np.pi):
            az = a + side
            c = workspace_radius * np.array([np.cos(az), np.sin(az)])
            gap = min((np.linalg.norm(c - np.array(p.center)) for p in plates), default=np.inf)
            if best is None or gap > best[0] + 1e-12:
                best = (gap, c, az)
        _, c, az = best
        plates.append(Plate2D((float(c[0]), float(c[1])), float((az + np.pi) % (2 * np.pi))))
    return plates


def min_pairwise_angle(plates) -> float:
    """Smallest angle between plate normals treated as lines (radians)."""
    a = [p.normal_angle for p in plates]
    return min(_line_gap(a[i], a[j]) for i in range(len(a)) for j in range(i + 1, len(a)))
