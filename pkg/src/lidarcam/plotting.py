"""Report figures, rendered off-screen to image files."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402


def error_boxplots(results: dict, path) -> Path:
    """Rotation and translation error distributions, one box per experiment.

    ``results`` maps a label to an :class:`~lidarcam.experiment.EvalResult`.
    """
    path = Path(path)
    labels = list(results)
    fig, axes = plt.subplots(1, 2, figsize=(9, 3.6))
    for ax, name, unit in ((axes[0], "rotation_deg", "rotation error [deg]"), (axes[1], "translation_m", "translation error [m]")):
        data = [results[k].column(name) for k in labels]
        data = [d[np.isfinite(d)] for d in data]
        ax.boxplot(data, showfliers=True)
        ax.set_xticks(range(1, len(labels) + 1), labels, rotation=20, fontsize=8)
        ax.set_ylabel(unit)
        ax.grid(alpha=0.3)
    fig.tight_layout()
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def determinant_curves(beta_rows, sep_rows, path) -> Path:
    """|H| against plate angle and against projected point separation."""
    path = Path(path)
    b = np.array(beta_rows, float)
    s = np.array(sep_rows, float)
    fig, (a0, a1) = plt.subplots(1, 2, figsize=(9, 3.4))
    a0.plot(np.degrees(b[:, 0]), b[:, 1], "-", label="closed form")
    a0.plot(np.degrees(b[:, 0]), b[:, 2], ".", ms=3, label="det(H)")
    a0.set_xlabel("beta [deg]")
    a0.set_ylabel("|H|")
    a0.legend(fontsize=8)
    a1.plot(s[:, 0], s[:, 1], "-", label="closed form")
    a1.plot(s[:, 0], s[:, 2], ".", ms=3, label="det(H)")
    a1.set_xlabel("projected separation [m]")
    a1.set_ylabel("|H|")
    a1.legend(fontsize=8)
    for ax in (a0, a1):
        ax.grid(alpha=0.3)
    fig.tight_layout()
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path
