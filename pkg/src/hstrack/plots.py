"""Render precision/success curves from an evaluation report."""
from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402


def render_curves(report: dict, out_dir: str | Path) -> list[Path]:
    """Write precision.png and success.png next to the report output."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = []

    prec = report["curves"]["precision"]
    fig, ax = plt.subplots(figsize=(5, 4))
    ax.plot(prec["thresholds"], prec["values"], lw=2, color="tab:red")
    ax.set_xlabel("center error threshold [px]")
    ax.set_ylabel("fraction of frames")
    ax.set_title(f"Precision plot (DP@20 = {report['overall']['dp20']:.3f})")
    ax.set_xlim(min(prec["thresholds"]), max(prec["thresholds"]))
    ax.set_ylim(0, 1.02)
    ax.grid(alpha=0.3)
    fig.tight_layout()
    path = out / "precision.png"
    fig.savefig(path, dpi=120)
    plt.close(fig)
    written.append(path)

    succ = report["curves"]["success"]
    fig, ax = plt.subplots(figsize=(5, 4))
    ax.plot(succ["thresholds"], succ["values"], lw=2, color="tab:blue")
    ax.set_xlabel("overlap threshold (IoU)")
    ax.set_ylabel("fraction of frames")
    ax.set_title(f"Success plot (AUC = {report['overall']['auc']:.3f})")
    ax.set_xlim(0, 1)
    ax.set_ylim(0, 1.02)
    ax.grid(alpha=0.3)
    fig.tight_layout()
    path = out / "success.png"
    fig.savefig(path, dpi=120)
    plt.close(fig)
    written.append(path)

    return written
