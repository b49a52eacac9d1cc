"""Image-pyramid inference, sliding-window baselines, and VOC mAP scoring.

Evaluation runs the head over a 7-level image pyramid (each level resizes the
scene's larger side to level * dataset_scale), collects score-map peaks as
detections, maps their boxes back to the original pixel frame, and merges
everything with per-class NMS -- never joint across classes.  The mAP scorer
follows Pascal VOC semantics: greedy matching by descending score, and
"difficult" ground truth neither rewards nor penalizes a detection.

Baselines reuse the same pyramid and NMS machinery with the transform model
removed: "square" pools the correlation tensor over identity windows (which
the head with an identity transform reproduces bitwise), "target_ar" uses a
class-aspect-ratio window instead of the square 15x15 one.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from . import geometry, head
from .diffengine import Tensor, no_grad
from .diffengine.store import ParameterStore
from .features import (FEATURE_STRIDE, extract_features, resize_class_features,
                       resize_class_image, resize_feature_map, rotate_class_image)

PYRAMID_LEVELS = (0.5, 0.625, 0.8, 1.0, 1.2, 1.4, 1.6)
SCORE_THRESHOLD = 0.25
NMS_IOU = 0.3
MIN_IMAGE_SIDE = 16


@dataclass
class EvalConfig:
    dataset_scale: int
    pyramid_levels: tuple = PYRAMID_LEVELS
    score_threshold: float = SCORE_THRESHOLD
    nms_iou: float = NMS_IOU
    rotations: bool = False
    variant: str = "v1"


@dataclass
class Detection:
    image_id: str
    class_id: int
    box: np.ndarray  # (4,) original-image pixels
    score: float
    level: float = 1.0


def score_map_peaks(scores: np.ndarray, threshold: float) -> np.ndarray:
    """(n, 2) array of (k, l) cells that are 3x3 local maxima above threshold."""
    s = np.asarray(scores)
    padded = np.full((s.shape[0] + 2, s.shape[1] + 2), -np.inf, dtype=s.dtype)
    padded[1:-1, 1:-1] = s
    is_max = s > threshold
    for dy in (-1, 0, 1):
        for dx in (-1, 0, 1):
            if dy == 0 and dx == 0:
                continue
            is_max &= s >= padded[1 + dy:1 + dy + s.shape[0], 1 + dx:1 + dx + s.shape[1]]
    return np.argwhere(is_max)


def resize_image(image: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Bilinear resize of a (3, H, W) float image (align-corners convention)."""
    with no_grad():
        return resize_feature_map(Tensor(np.ascontiguousarray(image)), out_h, out_w).data


def _odd(v: float, lo: int = 5, hi: int = 29) -> int:
    k = int(round((v - 1) / 2.0)) * 2 + 1
    return int(np.clip(k, lo, hi))


def target_ar_grid(class_image_shape: tuple[int, ...]) -> tuple[int, int]:
    """Odd (rows, cols) window matching the class aspect ratio, area near 15x15."""
    h, w = class_image_shape[-2], class_image_shape[-1]
    ar = h / w
    return _odd(15 * np.sqrt(ar)), _odd(15 / np.sqrt(ar))


def sliding_window_scores(c: np.ndarray) -> np.ndarray:
    """Mean correlation over the window interior, the transform fixed to identity.

    c is (hA, wA, p, q); the window at (k, l) reads c[k + i - (p-1)/2,
    l + j - (q-1)/2, i, j] with border clamping, averaged over the interior
    ring-excluded (i, j).  Pure integer gather; for p = q = 15 this equals the
    identity-transform head bitwise.
    """
    ha, wa, p, q = c.shape
    di = np.arange(1, p - 1) - (p - 1) // 2
    dj = np.arange(1, q - 1) - (q - 1) // 2
    kk = np.clip(np.arange(ha)[:, None] + di[None, :], 0, ha - 1)      # (hA, p-2)
    ll = np.clip(np.arange(wa)[:, None] + dj[None, :], 0, wa - 1)      # (wA, q-2)
    gathered = c[kk[:, None, :, None], ll[None, :, None, :],
                 np.arange(1, p - 1)[None, None, :, None],
                 np.arange(1, q - 1)[None, None, None, :]]
    return gathered.mean(axis=(2, 3))


def window_boxes(ha: int, wa: int, rows: int, cols: int, stride: int) -> np.ndarray:
    """(hA, wA, 4) envelope boxes of a rows x cols identity window at each cell."""
    return geometry.anchor_boxes(ha, wa, float(stride),
                                 half_h=(rows - 1) / 2.0,
                                 half_w=(cols - 1) / 2.0).reshape(ha, wa, 4)


@dataclass
class _ClassEntry:
    class_id: int
    feats: list  # one ResizedClassFeatures per active rotation
    grid: tuple[int, int]


def _prepare_classes(class_images: dict[int, np.ndarray], store: ParameterStore,
                     mode: str, rotations: bool) -> list[_ClassEntry]:
    entries = []
    rots = (0, 90, 180, 270) if rotations else (0,)
    with no_grad():
        for cid in sorted(class_images):
            img = class_images[cid]
            grid = (15, 15) if mode != "target_ar" else target_ar_grid(img.shape)
            feats = []
            for rot in rots:
                rimg = rotate_class_image(img, rot) if rot else img
                resized = resize_class_image(rimg)
                f = extract_features(resized, store)
                g = grid if rot % 180 == 0 else (grid[1], grid[0])
                feats.append(resize_class_features(f, *g))
            entries.append(_ClassEntry(cid, feats, grid))
    return entries


def pyramid_detect(image: np.ndarray, image_id: str,
                   class_images: dict[int, np.ndarray], store: ParameterStore,
                   cfg: EvalConfig, mode: str = "head") -> list[Detection]:
    """Detect every class in one image across the pyramid; returns post-NMS detections.

    mode selects the scoring path: "head" (the full transform head) or the
    baselines "square" / "target_ar".  Detections are clipped to the image.
    """
    if mode not in ("head", "square", "target_ar"):
        raise ValueError(f"unknown mode {mode!r}")
    _, orig_h, orig_w = image.shape
    entries = _prepare_classes(class_images, store, mode, cfg.rotations)
    raw: dict[int, list[tuple[np.ndarray, float, float]]] = {e.class_id: [] for e in entries}

    with no_grad():
        for level in cfg.pyramid_levels:
            target = level * cfg.dataset_scale
            if orig_h >= orig_w:
                nh = int(round(target))
                nw = max(int(round(orig_w * target / orig_h)), 1)
            else:
                nw = int(round(target))
                nh = max(int(round(orig_h * target / orig_w)), 1)
            if min(nh, nw) < MIN_IMAGE_SIDE:
                warnings.warn(f"{image_id}: level {level} gives {nh}x{nw}, skipped")
                continue
            fmap = extract_features(resize_image(image, nh, nw), store)
            ha, wa = fmap.values.shape[-2:]
            sx = orig_w / nw
            sy = orig_h / nh
            for entry in entries:
                for feats in entry.feats:
                    if mode == "head":
                        out = head.forward_head(fmap, feats, store, variant=cfg.variant)
                        scores = out.scores.data
                        boxes = out.boxes.data
                    else:
                        c = head.correlate(fmap, feats).data
                        scores = sliding_window_scores(c)
                        rows, cols = c.shape[2], c.shape[3]
                        boxes = window_boxes(ha, wa, rows, cols, FEATURE_STRIDE)
                    for k, l in score_map_peaks(scores, cfg.score_threshold):
                        b = boxes[k, l] * np.array([sx, sy, sx, sy])
                        raw[entry.class_id].append((b, float(scores[k, l]), level))

    detections: list[Detection] = []
    for cid in sorted(raw):
        if not raw[cid]:
            continue
        boxes = geometry.clip_boxes(np.stack([r[0] for r in raw[cid]]), orig_w, orig_h)
        scores = np.array([r[1] for r in raw[cid]])
        keep = geometry.nms(boxes, scores, cfg.nms_iou)
        detections.extend(Detection(image_id, cid, boxes[i], float(scores[i]), raw[cid][i][2])
                          for i in keep)
    return detections


def sliding_window_detect(image: np.ndarray, image_id: str,
                          class_images: dict[int, np.ndarray], store: ParameterStore,
                          cfg: EvalConfig, mode: str = "square") -> list[Detection]:
    """Baseline detector: same pyramid and NMS, transform model removed."""
    if mode not in ("square", "target_ar"):
        raise ValueError("baseline mode must be 'square' or 'target_ar'")
    return pyramid_detect(image, image_id, class_images, store, cfg, mode=mode)


def class_score_maps(image: np.ndarray, class_images: dict[int, np.ndarray],
                     store: ParameterStore, cfg: EvalConfig, mode: str = "head",
                     level: float = 1.0) -> dict[int, np.ndarray]:
    """Raw per-class score maps at one pyramid level (max over rotations).

    Same resize and scoring path as pyramid_detect, without peak extraction,
    so the maps can be rendered as diagnostics.
    """
    if mode not in ("head", "square", "target_ar"):
        raise ValueError(f"unknown mode {mode!r}")
    _, orig_h, orig_w = image.shape
    entries = _prepare_classes(class_images, store, mode, cfg.rotations)
    target = level * cfg.dataset_scale
    if orig_h >= orig_w:
        nh = int(round(target))
        nw = max(int(round(orig_w * target / orig_h)), 1)
    else:
        nw = int(round(target))
        nh = max(int(round(orig_h * target / orig_w)), 1)
    if min(nh, nw) < MIN_IMAGE_SIDE:
        raise ValueError(f"level {level} gives {nh}x{nw}, below the minimum side")
    maps: dict[int, np.ndarray] = {}
    with no_grad():
        fmap = extract_features(resize_image(image, nh, nw), store)
        for entry in entries:
            per_rot = []
            for feats in entry.feats:
                if mode == "head":
                    per_rot.append(head.forward_head(fmap, feats, store,
                                                     variant=cfg.variant).scores.data)
                else:
                    c = head.correlate(fmap, feats).data
                    per_rot.append(sliding_window_scores(c))
            maps[entry.class_id] = np.maximum.reduce(per_rot)
    return maps


# ---------------------------------------------------------------------------
# VOC scoring


GroundTruth = dict[str, tuple[np.ndarray, np.ndarray, np.ndarray]]
# image id -> (boxes (m, 4), class ids (m,), difficult (m,))


def ground_truth_from_records(records) -> GroundTruth:
    return {r.name: (r.boxes(), r.class_ids(), r.difficult_flags()) for r in records}


@dataclass
class EvalResult:
    ap: dict[int, float]
    map: float
    n_gt: dict[int, int] = field(default_factory=dict)


def voc_map(detections: list[Detection], gt: GroundTruth,
            iou_threshold: float = 0.5) -> EvalResult:
    """Per-class average precision and their mean, VOC devkit semantics.

    Detections matched to a difficult ground truth are dropped from both
    precision and recall; classes with no non-difficult ground truth are
    excluded from the mean.  AP is the exact area under the stepwise
    precision envelope.
    """
    class_ids = sorted({int(c) for _, c, _ in gt.values() for c in c} |
                       {d.class_id for d in detections})
    ap: dict[int, float] = {}
    n_gt: dict[int, int] = {}
    for cid in class_ids:
        gt_c = {img: (b[c == cid], d[c == cid]) for img, (b, c, d) in gt.items()}
        npos = int(sum((~d).sum() for _, d in gt_c.values()))
        n_gt[cid] = npos
        if npos == 0:
            continue
        dets = [d for d in detections if d.class_id == cid]
        if not dets:
            ap[cid] = 0.0
            continue
        # deterministic order: score descending, then image id, then box
        order = sorted(range(len(dets)),
                       key=lambda i: (-dets[i].score, dets[i].image_id, tuple(dets[i].box)))
        matched = {img: np.zeros(len(b), dtype=bool) for img, (b, _) in gt_c.items()}
        tp, fp = [], []
        for i in order:
            d = dets[i]
            boxes, difficult = gt_c.get(d.image_id, (np.zeros((0, 4)), np.zeros(0, dtype=bool)))
            if boxes.shape[0]:
                ious = geometry.iou(d.box.reshape(1, 4), boxes)[0]
                j = int(np.argmax(ious))
                if ious[j] >= iou_threshold:
                    if difficult[j]:
                        continue  # neither reward nor penalty
                    if not matched[d.image_id][j]:
                        matched[d.image_id][j] = True
                        tp.append(1.0), fp.append(0.0)
                    else:
                        tp.append(0.0), fp.append(1.0)
                    continue
            tp.append(0.0), fp.append(1.0)
        tp = np.cumsum(tp)
        fp = np.cumsum(fp)
        rec = tp / npos
        prec = tp / np.maximum(tp + fp, 1e-12)
        ap[cid] = _envelope_ap(rec, prec)
    mean = float(np.mean(list(ap.values()))) if ap else 0.0
    return EvalResult(ap=ap, map=mean, n_gt=n_gt)


def _envelope_ap(rec: np.ndarray, prec: np.ndarray) -> float:
    """Area under the right-to-left precision envelope over recall."""
    mrec = np.concatenate([[0.0], rec, [1.0]])
    mpre = np.concatenate([[0.0], prec, [0.0]])
    for i in range(mpre.size - 2, -1, -1):
        mpre[i] = max(mpre[i], mpre[i + 1])
    idx = np.flatnonzero(mrec[1:] != mrec[:-1]) + 1
    return float(np.sum((mrec[idx] - mrec[idx - 1]) * mpre[idx]))


def export_detections(detections: list[Detection], path) -> None:
    """One record per line: image id, class id, score, box; ordered by
    (image, class, descending score)."""
    rows = sorted(detections, key=lambda d: (d.image_id, d.class_id, -d.score, tuple(d.box)))
    with open(path, "w") as f:
        for d in rows:
            f.write(f"{d.image_id}\t{d.class_id}\t{d.score:.6f}\t"
                    f"{d.box[0]:.2f}\t{d.box[1]:.2f}\t{d.box[2]:.2f}\t{d.box[3]:.2f}\n")


def evaluate_dataset(records, class_images: dict[int, np.ndarray],
                     store: ParameterStore, cfg: EvalConfig,
                     mode: str = "head") -> tuple[EvalResult, list[Detection]]:
    """Run detection over a record list and score against its annotations."""
    detections: list[Detection] = []
    for r in records:
        detections.extend(pyramid_detect(r.load_image(), r.name, class_images,
                                         store, cfg, mode=mode))
    result = voc_map(detections, ground_truth_from_records(records))
    return result, detections
