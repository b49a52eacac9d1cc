"""Axis-aligned boxes, IoU, box coding, NMS, affine transforms and grids.

Conventions shared by the whole package:

* Boxes are float arrays of shape (..., 4) holding [x_min, y_min, x_max, y_max]
  interpreted as half-open real intervals, so area = (x_max - x_min) * (y_max - y_min).
  The coordinate frame (image pixels or feature cells) is contextual; conversions
  between frames are always explicit.
* Affine transforms are 2x3 float matrices [[a11, a12, tx], [a21, a22, ty]]
  acting on column points (x, y, 1).
* Grid arrays store (y, x) pairs so they index planes directly.

All functions are pure and operate on plain numpy arrays.
"""

from __future__ import annotations

import numpy as np

# |det| of the 2x2 block at or below this marks an affine transform as degenerate.
SINGULAR_DET_EPS = 1e-6


def box_area(boxes: np.ndarray) -> np.ndarray:
    boxes = np.asarray(boxes, dtype=np.float64)
    return (boxes[..., 2] - boxes[..., 0]) * (boxes[..., 3] - boxes[..., 1])


def intersect_area(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pairwise intersection areas between box sets a (n,4) and b (m,4) -> (n,m)."""
    a = np.atleast_2d(np.asarray(a, dtype=np.float64))
    b = np.atleast_2d(np.asarray(b, dtype=np.float64))
    lt = np.maximum(a[:, None, :2], b[None, :, :2])
    rb = np.minimum(a[:, None, 2:], b[None, :, 2:])
    wh = np.clip(rb - lt, 0.0, None)
    return wh[..., 0] * wh[..., 1]


def iou(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pairwise IoU matrix (n,m); passing two single boxes returns a scalar.

    Degenerate zero-area boxes yield 0 against everything (including themselves).
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    scalar = a.ndim == 1 and b.ndim == 1
    a2 = np.atleast_2d(a)
    b2 = np.atleast_2d(b)
    inter = intersect_area(a2, b2)
    union = box_area(a2)[:, None] + box_area(b2)[None, :] - inter
    out = np.where(union > 0.0, inter / np.where(union > 0.0, union, 1.0), 0.0)
    return float(out[0, 0]) if scalar else out


def clip_boxes(boxes: np.ndarray, width: float, height: float) -> np.ndarray:
    boxes = np.asarray(boxes, dtype=np.float64).copy()
    boxes[..., 0::2] = np.clip(boxes[..., 0::2], 0.0, float(width))
    boxes[..., 1::2] = np.clip(boxes[..., 1::2], 0.0, float(height))
    return boxes


def encode_boxes(boxes: np.ndarray, anchors: np.ndarray) -> np.ndarray:
    """Encode target boxes relative to anchors as (tx, ty, tw, th).

    tx = (cx_box - cx_anchor) / w_anchor, tw = log(w_box / w_anchor), and the
    same for the y axis.  Anchors must have positive width/height; encoding a
    target with non-positive width/height raises ValueError.
    """
    boxes = np.asarray(boxes, dtype=np.float64)
    anchors = np.asarray(anchors, dtype=np.float64)
    bw = boxes[..., 2] - boxes[..., 0]
    bh = boxes[..., 3] - boxes[..., 1]
    if np.any(bw <= 0.0) or np.any(bh <= 0.0):
        raise ValueError("encode_boxes: target box with non-positive width or height")
    aw = anchors[..., 2] - anchors[..., 0]
    ah = anchors[..., 3] - anchors[..., 1]
    tx = ((boxes[..., 0] + boxes[..., 2]) - (anchors[..., 0] + anchors[..., 2])) / (2.0 * aw)
    ty = ((boxes[..., 1] + boxes[..., 3]) - (anchors[..., 1] + anchors[..., 3])) / (2.0 * ah)
    tw = np.log(bw / aw)
    th = np.log(bh / ah)
    return np.stack([tx, ty, tw, th], axis=-1)


def decode_boxes(encodings: np.ndarray, anchors: np.ndarray) -> np.ndarray:
    encodings = np.asarray(encodings, dtype=np.float64)
    anchors = np.asarray(anchors, dtype=np.float64)
    aw = anchors[..., 2] - anchors[..., 0]
    ah = anchors[..., 3] - anchors[..., 1]
    cx = (anchors[..., 0] + anchors[..., 2]) / 2.0 + encodings[..., 0] * aw
    cy = (anchors[..., 1] + anchors[..., 3]) / 2.0 + encodings[..., 1] * ah
    w = aw * np.exp(encodings[..., 2])
    h = ah * np.exp(encodings[..., 3])
    return np.stack([cx - w / 2.0, cy - h / 2.0, cx + w / 2.0, cy + h / 2.0], axis=-1)


def nms(boxes: np.ndarray, scores: np.ndarray, iou_threshold: float) -> np.ndarray:
    """Greedy non-maximum suppression; returns kept indices in descending-score order.

    Score ties are broken by the smaller original index so results are
    reproducible regardless of input permutation of distinct-score entries.
    """
    boxes = np.atleast_2d(np.asarray(boxes, dtype=np.float64))
    scores = np.asarray(scores, dtype=np.float64)
    if boxes.shape[0] == 0:
        return np.zeros(0, dtype=np.int64)
    order = np.argsort(-scores, kind="stable")
    kept: list[int] = []
    suppressed = np.zeros(boxes.shape[0], dtype=bool)
    for idx in order:
        if suppressed[idx]:
            continue
        kept.append(int(idx))
        rest = order[~suppressed[order]]
        overlaps = iou(boxes[idx], boxes[rest])[0]
        suppressed[rest[overlaps > iou_threshold]] = True
        suppressed[idx] = True
    return np.asarray(kept, dtype=np.int64)


# ---------------------------------------------------------------------------
# Affine transforms (2x3, acting on (x, y))
# ---------------------------------------------------------------------------

def identity_affine() -> np.ndarray:
    return np.array([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]], dtype=np.float64)


def compose_affine(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Composition a after b: (a o b)(p) = a(b(p))."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    out = a[:, :2] @ b[:, :2]
    t = a[:, :2] @ b[:, 2] + a[:, 2]
    return np.concatenate([out, t[:, None]], axis=1)


def apply_affine(t: np.ndarray, points_xy: np.ndarray) -> np.ndarray:
    """Apply transform to points of shape (..., 2) given as (x, y)."""
    t = np.asarray(t, dtype=np.float64)
    p = np.asarray(points_xy, dtype=np.float64)
    return p @ t[:, :2].T + t[:, 2]


def invert_affine(t: np.ndarray, eps: float = SINGULAR_DET_EPS) -> tuple[np.ndarray, bool]:
    """Invert a 2x3 affine transform.

    Returns (inverse, degenerate).  When |det| of the 2x2 block is <= eps the
    identity transform is returned with degenerate=True; callers use the flag
    to suppress such locations from localization gradients.
    """
    t = np.asarray(t, dtype=np.float64)
    det = t[0, 0] * t[1, 1] - t[0, 1] * t[1, 0]
    if abs(det) <= eps:
        return identity_affine(), True
    inv = np.array([[t[1, 1], -t[0, 1]], [-t[1, 0], t[0, 0]]], dtype=np.float64) / det
    tr = -inv @ t[:, 2]
    return np.concatenate([inv, tr[:, None]], axis=1), False


def invert_affine_batch(ts: np.ndarray, eps: float = SINGULAR_DET_EPS) -> tuple[np.ndarray, np.ndarray]:
    """Vectorized invert_affine over a (n, 2, 3) stack -> ((n, 2, 3), (n,) flags)."""
    ts = np.asarray(ts, dtype=np.float64)
    det = ts[:, 0, 0] * ts[:, 1, 1] - ts[:, 0, 1] * ts[:, 1, 0]
    degenerate = np.abs(det) <= eps
    safe_det = np.where(degenerate, 1.0, det)
    out = np.empty_like(ts)
    out[:, 0, 0] = ts[:, 1, 1] / safe_det
    out[:, 0, 1] = -ts[:, 0, 1] / safe_det
    out[:, 1, 0] = -ts[:, 1, 0] / safe_det
    out[:, 1, 1] = ts[:, 0, 0] / safe_det
    out[:, 0, 2] = -(out[:, 0, 0] * ts[:, 0, 2] + out[:, 0, 1] * ts[:, 1, 2])
    out[:, 1, 2] = -(out[:, 1, 0] * ts[:, 0, 2] + out[:, 1, 1] * ts[:, 1, 2])
    out[degenerate] = identity_affine()
    return out, degenerate


def canonical_lattice(rows: int, cols: int) -> np.ndarray:
    """Regular rows x cols lattice over the canonical window [-1, 1]^2, as (y, x)."""
    if rows < 2 or cols < 2:
        raise ValueError("lattice needs rows, cols >= 2")
    v = np.linspace(-1.0, 1.0, rows)
    u = np.linspace(-1.0, 1.0, cols)
    vv, uu = np.meshgrid(v, u, indexing="ij")
    return np.stack([vv, uu], axis=-1)


def generate_grid(t: np.ndarray, rows: int, cols: int) -> np.ndarray:
    """Apply transform t to the canonical lattice; returns (rows, cols, 2) of (y, x)."""
    lat = canonical_lattice(rows, cols)
    pts_xy = lat[..., ::-1]
    out_xy = apply_affine(t, pts_xy.reshape(-1, 2)).reshape(rows, cols, 2)
    return out_xy[..., ::-1]


def anchor_boxes(grid_h: int, grid_w: int, stride: int,
                 half_h: float = 7.0, half_w: float = 7.0) -> np.ndarray:
    """Anchor rectangles for every feature cell, in image pixels, shape (h*w, 4).

    The anchor at cell (k, l) is the min/max envelope of the identity alignment
    grid: cell centers (k, l) +- (half_h, half_w), converted to pixels via
    p = (cell + 0.5) * stride.
    """
    ky, kx = np.meshgrid(np.arange(grid_h, dtype=np.float64),
                         np.arange(grid_w, dtype=np.float64), indexing="ij")
    cx = (kx + 0.5) * stride
    cy = (ky + 0.5) * stride
    ex = half_w * stride
    ey = half_h * stride
    boxes = np.stack([cx - ex, cy - ey, cx + ex, cy + ey], axis=-1)
    return boxes.reshape(-1, 4)


def cell_to_pixel(coords: np.ndarray, stride: int) -> np.ndarray:
    """Feature-cell coordinates to image pixels (cell centers)."""
    return (np.asarray(coords, dtype=np.float64) + 0.5) * stride
