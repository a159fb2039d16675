"""File-based rendering: grayscale attention maps, heatmap overlays on frames,
and the matplotlib report figures written next to the delimited outputs."""

from __future__ import annotations

import json
from pathlib import Path

import matplotlib
matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402
from PIL import Image  # noqa: E402

from .metrics import EvalReport  # noqa: E402

_HEAT_CMAP = matplotlib.colormaps["magma"]


def _to_unit(arr: np.ndarray) -> np.ndarray:
    peak = arr.max()
    return arr / peak if peak > 0 else arr


def save_grayscale(arr: np.ndarray, path: Path | str, upscale_to: int | None = None) -> None:
    """Write a (H, W) nonnegative array as an 8-bit grayscale PNG."""
    img = Image.fromarray((_to_unit(arr) * 255).round().astype(np.uint8), mode="L")
    if upscale_to and img.size != (upscale_to, upscale_to):
        img = img.resize((upscale_to, upscale_to), Image.NEAREST)
    img.save(path)


def save_overlay(frame: np.ndarray, heat: np.ndarray, path: Path | str,
                 dot: tuple[float, float] | None = None, scale: int = 4) -> None:
    """Blend a heatmap over an RGB frame (both unit-range), optionally marking
    a normalised (x, y) point, and write the PNG."""
    h, w, _ = frame.shape
    if heat.shape != (h, w):
        heat_img = Image.fromarray((_to_unit(heat) * 255).astype(np.uint8))
        heat = np.asarray(heat_img.resize((w, h), Image.BILINEAR)) / 255.0
    colored = _HEAT_CMAP(_to_unit(heat))[..., :3]
    blend = np.clip(0.55 * colored + 0.45 * frame, 0.0, 1.0)
    if dot is not None:
        cx = int(round(dot[0] * (w - 1)))
        cy = int(round(dot[1] * (h - 1)))
        y0, y1 = max(0, cy - 1), min(h, cy + 2)
        x0, x1 = max(0, cx - 1), min(w, cx + 2)
        blend[y0:y1, x0:x1] = (0.0, 1.0, 0.1)
    img = Image.fromarray((blend * 255).round().astype(np.uint8))
    if scale > 1:
        img = img.resize((w * scale, h * scale), Image.NEAREST)
    img.save(path)


def per_frame_figure(report: EvalReport, path: Path | str) -> None:
    """F1/recall/precision against the anticipation step index."""
    idx = [i for i, *_ in report.per_frame]
    fig, ax = plt.subplots(figsize=(5.2, 3.4))
    for pos, name in ((1, "f1"), (2, "recall"), (3, "precision")):
        ax.plot(idx, [row[pos] for row in report.per_frame], marker="o", label=name)
    ax.set_xlabel("future frame index")
    ax.set_ylabel("score")
    ax.set_ylim(0, 1)
    ax.legend(frameon=False)
    ax.grid(alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def ablation_figure(rows: list[dict], path: Path | str) -> None:
    """Mean F1 per ablation cell as a bar chart."""
    labels = []
    for r in rows:
        if r["label"] not in labels:
            labels.append(r["label"])
    means, spread = [], []
    for lab in labels:
        vals = [r["f1"] for r in rows if r["label"] == lab and r["f1"] is not None]
        means.append(np.mean(vals) if vals else 0.0)
        spread.append(np.std(vals) if len(vals) > 1 else 0.0)
    fig, ax = plt.subplots(figsize=(1.1 * len(labels) + 2, 3.4))
    ax.bar(labels, means, yerr=spread, capsize=3, color="#4878a8")
    ax.set_ylabel("test F1")
    ax.grid(axis="y", alpha=0.3)
    plt.setp(ax.get_xticklabels(), rotation=30, ha="right")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def loss_curve_figure(metrics_path: Path | str, path: Path | str) -> None:
    """Per-step loss terms from a JSON-lines training log."""
    steps, kld, cntr, total = [], [], [], []
    with open(metrics_path, encoding="utf-8") as f:
        for line in f:
            rec = json.loads(line)
            if "step" in rec:
                steps.append(rec["step"])
                kld.append(rec["kld"])
                cntr.append(rec["cntr"])
                total.append(rec["total"])
    fig, ax = plt.subplots(figsize=(5.2, 3.4))
    ax.plot(steps, total, label="total")
    ax.plot(steps, kld, label="kld", alpha=0.8)
    if any(c != 0.0 for c in cntr):
        ax.plot(steps, cntr, label="contrastive", alpha=0.8)
    ax.set_xlabel("step")
    ax.set_ylabel("loss")
    ax.legend(frameon=False)
    ax.grid(alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
