"""Static SVG figures of evaluation curves."""
from __future__ import annotations

from pathlib import Path
from typing import Mapping, Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

MODE_STYLE = {
    "Direct": dict(color="0.35", linestyle="-", marker="o"),
    "Ours^A-": dict(color="tab:blue", linestyle="--", marker="s"),
    "Ours": dict(color="tab:red", linestyle="-", marker="^"),
    "Ours^EMB": dict(color="tab:green", linestyle="-", marker="D"),
    "C-D": dict(color="tab:orange", linestyle=":", marker="v"),
    "C-D^EMB": dict(color="tab:purple", linestyle=":", marker="x"),
}

CASE_ORDER = ("homogeneous", "cross-detector", "cross-descriptor", "heterogeneous")

RC = {
    "font.size": 8,
    "axes.titlesize": 8,
    "axes.labelsize": 8,
    "legend.fontsize": 7,
    "lines.linewidth": 1.2,
    "lines.markersize": 3.5,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "svg.hashsalt": "crossfeat",
}


def _label(mode: str) -> str:
    return mode.replace("^A-", "$^{A-}$").replace("^EMB", "$^{EMB}$")


def _save(fig, path: Path) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)
    return path


def plot_curves(curves: Mapping[tuple[str, str, str], Mapping[str, np.ndarray]], out_dir,
                stem: str = "matching") -> list[Path]:
    """One column per configuration, MMA on top and inlier counts below.

    Configurations are grouped homogeneous first, then the heterogeneous kinds.
    Returns the written SVG paths: one overview plus one figure per case kind.
    """
    out_dir = Path(out_dir)
    configs: dict[str, str] = {}
    for kind, config, _ in curves:
        configs.setdefault(config, kind)
    ordered = sorted(configs, key=lambda c: (CASE_ORDER.index(configs[c]) if configs[c] in CASE_ORDER else 99, c))
    written = []
    with plt.rc_context(RC):
        written.append(_panel_figure(curves, ordered, configs, out_dir / f"{stem}_all.svg"))
        for kind in CASE_ORDER:
            subset = [c for c in ordered if configs[c] == kind]
            if subset:
                written.append(_panel_figure(curves, subset, configs, out_dir / f"{stem}_{kind}.svg"))
    return written


def _panel_figure(curves, configs: Sequence[str], kinds: Mapping[str, str], path: Path) -> Path:
    n = len(configs)
    fig, axes = plt.subplots(2, n, figsize=(2.2 * n + 0.6, 4.2), squeeze=False, sharex=True)
    for col, config in enumerate(configs):
        top, bottom = axes[0, col], axes[1, col]
        for (kind, cfg, mode), c in sorted(curves.items()):
            if cfg != config:
                continue
            style = MODE_STYLE.get(mode, {})
            top.plot(c["thresholds"], c["mma"], label=_label(mode), **style)
            bottom.plot(c["thresholds"], c["inliers"], label=_label(mode), **style)
        top.set_title(f"{config}\n({kinds[config]})")
        top.set_ylim(0, 1.02)
        bottom.set_xlabel("threshold [px]")
        bottom.set_xticks(range(1, 11))
        bottom.set_ylim(bottom=0)
        if col == 0:
            top.set_ylabel("MMA")
            bottom.set_ylabel("# inliers")
        top.grid(alpha=0.3)
        bottom.grid(alpha=0.3)
    handles, labels = {}, []
    for ax in axes[0]:
        for h, l in zip(*ax.get_legend_handles_labels()):
            if l not in handles:
                handles[l] = h
                labels.append(l)
    fig.legend([handles[l] for l in labels], labels, loc="lower center", ncol=len(labels), frameon=False)
    fig.tight_layout(rect=(0, 0.06, 1, 1))
    return _save(fig, path)


def plot_losses(history: Sequence[Mapping[str, float]], keys: Sequence[str], path, title: str = "") -> Path:
    steps = np.array([row["step"] for row in history])
    with plt.rc_context(RC):
        fig, ax = plt.subplots(figsize=(4.0, 2.6))
        for k in keys:
            ax.plot(steps, [row[k] for row in history], label=k, marker=None)
        ax.set_xlabel("step")
        ax.set_ylabel("loss")
        if title:
            ax.set_title(title)
        ax.legend(frameon=False)
        ax.grid(alpha=0.3)
        fig.tight_layout()
        return _save(fig, Path(path))
