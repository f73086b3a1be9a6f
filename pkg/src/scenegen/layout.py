"""Object layouts: per-node class ids with normalized corner-form boxes."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class Layout:
    """Per-object class id and (x1, y1, x2, y2) box in [0,1] image coords."""

    classes: tuple[int, ...]
    boxes: np.ndarray  # (N, 4) float32

    def __post_init__(self):
        object.__setattr__(self, "classes", tuple(int(c) for c in self.classes))
        b = np.asarray(self.boxes, dtype=np.float32)
        if b.ndim != 2 or b.shape != (len(self.classes), 4):
            raise ValueError(f"boxes must be ({len(self.classes)}, 4), got {b.shape}")
        object.__setattr__(self, "boxes", b)

    @property
    def n_objects(self) -> int:
        return len(self.classes)


def sanitize_boxes(boxes: np.ndarray) -> np.ndarray:
    """Clamp to [0,1] and swap corners so x1 <= x2 and y1 <= y2."""
    b = np.clip(np.asarray(boxes, dtype=np.float32), 0.0, 1.0)
    out = np.empty_like(b)
    out[:, 0] = np.minimum(b[:, 0], b[:, 2])
    out[:, 2] = np.maximum(b[:, 0], b[:, 2])
    out[:, 1] = np.minimum(b[:, 1], b[:, 3])
    out[:, 3] = np.maximum(b[:, 1], b[:, 3])
    return out


def box_iou(a, b) -> float:
    """Intersection over union of two corner-form boxes."""
    ax1, ay1, ax2, ay2 = (float(v) for v in a)
    bx1, by1, bx2, by2 = (float(v) for v in b)
    iw = max(0.0, min(ax2, bx2) - max(ax1, bx1))
    ih = max(0.0, min(ay2, by2) - max(ay1, by1))
    inter = iw * ih
    union = (ax2 - ax1) * (ay2 - ay1) + (bx2 - bx1) * (by2 - by1) - inter
    if union <= 0.0:
        return 0.0
    return inter / union
