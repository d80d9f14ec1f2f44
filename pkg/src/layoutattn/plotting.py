"""Static figures: layout overlays, loss curves and ablation bars.

Everything renders through the Agg backend with fixed sizes and without the
software tag in the PNG metadata, so identical inputs give identical files.
"""

from __future__ import annotations

from typing import Mapping, Optional, Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402
from matplotlib.patches import Circle as CirclePatch  # noqa: E402
from matplotlib.patches import Rectangle  # noqa: E402

from .evaluation import Detection  # noqa: E402
from .generator import ToyScene  # noqa: E402
from .layout.gmm import Circle, Layout  # noqa: E402
from .scene_dsl import SceneDescription  # noqa: E402

_SAVE_KW = {"dpi": 100, "metadata": {"Software": None}}


def _save(fig, path) -> None:
    fig.savefig(path, format="png", **_SAVE_KW)
    plt.close(fig)


def plot_layout_overlay(
    scene: ToyScene,
    layout: Layout,
    desc: SceneDescription,
    path,
    detections: Optional[Sequence[Detection]] = None,
    title: Optional[str] = None,
) -> None:
    """Scene render with the layout regions (dashed) and optional detection boxes."""
    h, w = scene.shape
    fig, ax = plt.subplots(figsize=(5, 5))
    ax.imshow(scene.render_rgb(), extent=(0, 1, 1, 0), interpolation="nearest")
    cmap = plt.get_cmap("tab10")
    for i, (region, obj) in enumerate(zip(layout.regions, desc.objects)):
        color = cmap(i % 10)
        cx, cy = region.center
        if isinstance(region, Circle):
            ax.add_patch(CirclePatch((cx, cy), region.r, fill=False, ls="--", lw=1.5, ec=color))
        else:
            ax.contour(
                (np.arange(w) + 0.5) / w,
                (np.arange(h) + 0.5) / h,
                region.mask.astype(float),
                levels=[0.5],
                colors=[color],
                linestyles="--",
            )
        label = f"{obj.id}: {obj.color + ' ' if obj.color else ''}{obj.noun}"
        ax.plot([cx], [cy], marker="+", ms=10, color=color)
        ax.text(cx, cy - 0.03, label, color=color, ha="center", fontsize=8,
                bbox={"facecolor": "white", "alpha": 0.6, "lw": 0})
    for det in detections or ():
        y0, x0, y1, x1 = det.box
        ax.add_patch(Rectangle((x0 / w, y0 / h), (x1 - x0) / w, (y1 - y0) / h, fill=False, ec="white", lw=1))
    ax.set_xlim(0, 1)
    ax.set_ylim(1, 0)
    ax.set_title(title or desc.global_text, fontsize=8, wrap=True)
    _save(fig, path)


def plot_loss_curves(curves: Mapping[str, Sequence[float]], path, xlabel: str = "iteration", ylabel: str = "loss",
                     title: str = "") -> None:
    fig, ax = plt.subplots(figsize=(6, 4))
    for name in sorted(curves):
        values = list(curves[name])
        ax.plot(range(len(values)), values, label=name)
    ax.set_xlabel(xlabel)
    ax.set_ylabel(ylabel)
    if title:
        ax.set_title(title)
    if len(curves) > 1:
        ax.legend()
    ax.grid(alpha=0.3)
    fig.tight_layout()
    _save(fig, path)


def plot_lambda_heatmap(lam: np.ndarray, path, labels: Optional[Sequence[str]] = None) -> None:
    """Combination weights, objects by rows and denoising steps (T..1) by columns."""
    lam = np.asarray(lam)
    fig, ax = plt.subplots(figsize=(7, 1 + 0.4 * lam.shape[0]))
    im = ax.imshow(lam[:, ::-1], aspect="auto", cmap="viridis", interpolation="nearest")
    ax.set_xlabel("step (T → 1)")
    ax.set_yticks(range(lam.shape[0]))
    ax.set_yticklabels(labels or [str(i + 1) for i in range(lam.shape[0])])
    fig.colorbar(im, ax=ax)
    fig.tight_layout()
    _save(fig, path)


def plot_ablation_bars(rows: Mapping[str, Mapping[str, float]], path, metrics: Sequence[str] = ("object_recall", "sprel_precision"),
                       errors: Optional[Mapping[str, Mapping[str, float]]] = None) -> None:
    """Grouped bars: one group per metric, one bar per row (variant)."""
    names = list(rows)
    fig, ax = plt.subplots(figsize=(7, 4))
    width = 0.8 / max(len(names), 1)
    x = np.arange(len(metrics))
    for i, name in enumerate(names):
        vals = [rows[name].get(m) or 0.0 for m in metrics]
        err = [errors[name].get(m, 0.0) for m in metrics] if errors and name in errors else None
        ax.bar(x + (i - (len(names) - 1) / 2) * width, vals, width, yerr=err, label=name, capsize=3)
    ax.set_xticks(x)
    ax.set_xticklabels(metrics)
    ax.set_ylim(0, 1.05)
    ax.legend(fontsize=8)
    ax.grid(axis="y", alpha=0.3)
    fig.tight_layout()
    _save(fig, path)
