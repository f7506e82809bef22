"""SVG figures for run reports (matplotlib, headless)."""

from __future__ import annotations

import numpy as np

from .metrics import AUC_CAP


def accuracy_curve(errors, cap: float = AUC_CAP, n: int = 201) -> tuple[np.ndarray, np.ndarray]:
    """Fraction of errors at or below each threshold in [0, cap]."""
    th = np.linspace(0.0, cap, n)
    e = np.sort(np.asarray(errors, float))
    if e.size == 0:
        return th, np.zeros_like(th)
    return th, np.searchsorted(e, th, side="right") / e.size


def plot_accuracy(fused: dict[str, list[float]], single: dict[str, list[float]] | None, cap: float, path,
                  title: str = "ADD-S accuracy vs threshold") -> None:
    """Solid lines: reported estimates; dashed: single-view measurements."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    with matplotlib.rc_context({"svg.hashsalt": "surfelpose", "svg.fonttype": "none"}):
        fig, ax = plt.subplots(figsize=(6.0, 4.0))
        colors = plt.rcParams["axes.prop_cycle"].by_key()["color"]
        for k, name in enumerate(fused):
            c = colors[k % len(colors)]
            th, acc = accuracy_curve(fused[name], cap)
            ax.plot(th * 100.0, acc * 100.0, color=c, label=name)
            if single is not None and single.get(name):
                th, acc = accuracy_curve(single[name], cap)
                ax.plot(th * 100.0, acc * 100.0, color=c, linestyle="--", linewidth=1.0)
        ax.set_xlim(0, cap * 100.0)
        ax.set_ylim(0, 101)
        ax.set_xlabel("threshold [cm]")
        ax.set_ylabel("accuracy [%]")
        ax.set_title(title)
        ax.grid(alpha=0.3)
        if fused:
            ax.legend(loc="lower right", fontsize=8)
        fig.tight_layout()
        fig.savefig(path, format="svg", metadata={"Date": None})
        plt.close(fig)
