"""Axis-aligned box utilities shared by the head, sampler and evaluator.

Boxes are [x1, y1, x2, y2] in image pixels with x1 < x2 and y1 < y2; batched
operations work on float arrays of shape [N, 4].
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class Box:
    x1: float
    y1: float
    x2: float
    y2: float

    def __post_init__(self):
        if not (self.x1 < self.x2 and self.y1 < self.y2):
            raise ValueError(f"degenerate box {self.as_array().tolist()}")

    def as_array(self):
        return np.array([self.x1, self.y1, self.x2, self.y2], dtype=np.float64)

    @property
    def area(self):
        return (self.x2 - self.x1) * (self.y2 - self.y1)


def as_box_array(boxes) -> np.ndarray:
    if isinstance(boxes, np.ndarray):
        return boxes.reshape(-1, 4).astype(np.float64)
    if len(boxes) == 0:
        return np.zeros((0, 4))
    rows = [b.as_array() if isinstance(b, Box) else np.asarray(b, dtype=np.float64) for b in boxes]
    return np.stack(rows)


def iou_matrix(a, b) -> np.ndarray:
    """Pairwise IoU between [N,4] and [M,4] boxes."""
    a, b = as_box_array(a), as_box_array(b)
    if a.size == 0 or b.size == 0:
        return np.zeros((a.shape[0], b.shape[0]))
    lt = np.maximum(a[:, None, :2], b[None, :, :2])
    rb = np.minimum(a[:, None, 2:], b[None, :, 2:])
    wh = np.clip(rb - lt, 0.0, None)
    inter = wh[..., 0] * wh[..., 1]
    area_a = (a[:, 2] - a[:, 0]) * (a[:, 3] - a[:, 1])
    area_b = (b[:, 2] - b[:, 0]) * (b[:, 3] - b[:, 1])
    union = area_a[:, None] + area_b[None, :] - inter
    return np.where(union > 0, inter / np.maximum(union, 1e-12), 0.0)


def clip_boxes(boxes, width, height) -> np.ndarray:
    out = as_box_array(boxes).copy()
    out[:, 0::2] = np.clip(out[:, 0::2], 0.0, width)
    out[:, 1::2] = np.clip(out[:, 1::2], 0.0, height)
    return out


def nms(boxes, scores, iou_thresh) -> np.ndarray:
    """Greedy NMS; returns kept indices in descending score order."""
    boxes = as_box_array(boxes)
    order = np.argsort(-np.asarray(scores), kind="stable")
    keep = []
    alive = np.ones(len(order), dtype=bool)
    ious = iou_matrix(boxes, boxes)
    for pos, i in enumerate(order):
        if not alive[pos]:
            continue
        keep.append(int(i))
        alive[pos + 1:] &= ious[i, order[pos + 1:]] <= iou_thresh
    return np.asarray(keep, dtype=np.intp)


def encode_deltas(target, reference) -> np.ndarray:
    """Regression targets (tx, ty, tw, th) taking ``reference`` to ``target``."""
    t, r = as_box_array(target), as_box_array(reference)
    tw, th = t[:, 2] - t[:, 0], t[:, 3] - t[:, 1]
    rw, rh = r[:, 2] - r[:, 0], r[:, 3] - r[:, 1]
    tcx, tcy = t[:, 0] + 0.5 * tw, t[:, 1] + 0.5 * th
    rcx, rcy = r[:, 0] + 0.5 * rw, r[:, 1] + 0.5 * rh
    return np.stack(
        [(tcx - rcx) / rw, (tcy - rcy) / rh, np.log(tw / rw), np.log(th / rh)], axis=1
    )


def decode_deltas(deltas, reference, max_log_scale=4.0) -> np.ndarray:
    """Apply (tx, ty, tw, th) to reference boxes; log scales are clamped."""
    d, r = np.asarray(deltas, dtype=np.float64).reshape(-1, 4), as_box_array(reference)
    rw, rh = r[:, 2] - r[:, 0], r[:, 3] - r[:, 1]
    rcx, rcy = r[:, 0] + 0.5 * rw, r[:, 1] + 0.5 * rh
    cx = rcx + d[:, 0] * rw
    cy = rcy + d[:, 1] * rh
    w = rw * np.exp(np.clip(d[:, 2], -max_log_scale, max_log_scale))
    h = rh * np.exp(np.clip(d[:, 3], -max_log_scale, max_log_scale))
    return np.stack([cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h], axis=1)


def make_anchors(grid, stride, sizes, ratios) -> np.ndarray:
    """[H*W*A, 4] anchors; index layout is token-major then anchor."""
    h, w = grid
    shapes = []
    for size in sizes:
        for ratio in ratios:  # ratio = width / height
            aw = size * np.sqrt(ratio)
            ah = size / np.sqrt(ratio)
            shapes.append((aw, ah))
    shapes = np.asarray(shapes)
    ys, xs = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    centers = np.stack([(xs + 0.5) * stride, (ys + 0.5) * stride], axis=-1).reshape(-1, 2)
    cx = centers[:, None, 0]
    cy = centers[:, None, 1]
    out = np.stack(
        [
            cx - 0.5 * shapes[None, :, 0],
            cy - 0.5 * shapes[None, :, 1],
            cx + 0.5 * shapes[None, :, 0],
            cy + 0.5 * shapes[None, :, 1],
        ],
        axis=-1,
    )
    return out.reshape(-1, 4)
