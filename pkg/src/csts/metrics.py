"""Heatmap evaluation: threshold binarisation against the kernel-support
ground truth, micro-averaged precision/recall/F1, per-future-frame breakdown.

The binarisation protocol (predicted positives = cells >= gamma * max, ground
truth = the border-clipped 19x19 kernel support) is this kit's documented
convention; gamma is adjustable so alternative protocols can be slotted in.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .errors import EvalError

DEFAULT_KERNEL = 19
DEFAULT_GAMMA = 0.5


def kernel_support(x: float, y: float, height: int, width: int,
                   kernel: int = DEFAULT_KERNEL) -> np.ndarray:
    """Boolean mask of the kernel-sized square centred at the gaze pixel."""
    cx = int(round(x * (width - 1)))
    cy = int(round(y * (height - 1)))
    r = kernel // 2
    mask = np.zeros((height, width), dtype=bool)
    mask[max(0, cy - r):cy + r + 1, max(0, cx - r):cx + r + 1] = True
    return mask


@dataclass
class FrameCounts:
    future_index: int
    tp: int
    n_pred: int
    n_true: int

    @property
    def precision(self) -> float:
        return self.tp / self.n_pred if self.n_pred else 0.0

    @property
    def recall(self) -> float:
        return self.tp / self.n_true if self.n_true else 0.0


def frame_counts(pred: np.ndarray, gaze: tuple[float, float], future_index: int = 0,
                 kernel: int = DEFAULT_KERNEL, gamma: float = DEFAULT_GAMMA
                 ) -> FrameCounts:
    truth = kernel_support(gaze[0], gaze[1], *pred.shape, kernel=kernel)
    peak = pred.max()
    if peak <= 0.0:
        positive = np.zeros_like(truth)
    else:
        positive = pred >= gamma * peak
    return FrameCounts(future_index=future_index,
                       tp=int(np.count_nonzero(positive & truth)),
                       n_pred=int(np.count_nonzero(positive)),
                       n_true=int(np.count_nonzero(truth)))


def binarize_and_score(pred: np.ndarray, gaze: tuple[float, float],
                       kernel: int = DEFAULT_KERNEL, gamma: float = DEFAULT_GAMMA
                       ) -> tuple[float, float]:
    """(precision, recall) for one predicted heatmap against one gaze point."""
    c = frame_counts(pred, gaze, kernel=kernel, gamma=gamma)
    return c.precision, c.recall


def _f1(p: float, r: float) -> float:
    return 2.0 * p * r / (p + r) if p + r > 0 else 0.0


@dataclass
class EvalReport:
    f1: float
    recall: float
    precision: float
    per_frame: list[tuple[int, float, float, float]]  # (future index, f1, r, p)
    n_frames: int

    def to_dict(self) -> dict:
        return {
            "f1": self.f1,
            "recall": self.recall,
            "precision": self.precision,
            "n_frames": self.n_frames,
            "per_frame": [
                {"future_index": i, "f1": f, "recall": r, "precision": p}
                for i, f, r, p in self.per_frame
            ],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def to_text(self) -> str:
        lines = [f"{'frame':>5}  {'f1':>8}  {'recall':>8}  {'precision':>9}"]
        for i, f, r, p in self.per_frame:
            lines.append(f"{i:>5}  {f:8.4f}  {r:8.4f}  {p:9.4f}")
        lines.append(f"{'all':>5}  {self.f1:8.4f}  {self.recall:8.4f}  "
                     f"{self.precision:9.4f}   ({self.n_frames} frames)")
        return "\n".join(lines)

    def per_frame_csv(self) -> str:
        rows = ["future_index,f1,recall,precision"]
        rows += [f"{i},{f!r},{r!r},{p!r}" for i, f, r, p in self.per_frame]
        return "\n".join(rows) + "\n"


def aggregate(counts: list[FrameCounts], out_frames: int) -> EvalReport:
    """Micro-average pooled pixel counts over all frames, with a per-future-
    frame breakdown (the counts grouped by anticipation step)."""
    if not counts:
        raise EvalError("no valid frames to evaluate")
    tp = sum(c.tp for c in counts)
    n_pred = sum(c.n_pred for c in counts)
    n_true = sum(c.n_true for c in counts)
    precision = tp / n_pred if n_pred else 0.0
    recall = tp / n_true if n_true else 0.0

    per_frame = []
    for k in range(out_frames):
        group = [c for c in counts if c.future_index == k]
        gtp = sum(c.tp for c in group)
        gp = sum(c.n_pred for c in group)
        gt = sum(c.n_true for c in group)
        p = gtp / gp if gp else 0.0
        r = gtp / gt if gt else 0.0
        per_frame.append((k, _f1(p, r), r, p))

    return EvalReport(f1=_f1(precision, recall), recall=recall, precision=precision,
                      per_frame=per_frame, n_frames=len(counts))
