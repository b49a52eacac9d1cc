"""Training objective: recognition hinges, CL/RLL weighting, localization, targets.

Recognition works per (image, class) pair on the head's score maps; the two
phases of target assignment differ in what the IoU is measured against:

* loc phase: anchors vs ground truth, positive above 0.5, negative below 0.1;
  drives the localization targets (and recognition when remapping is off).
* remap phase: the head's decoded output boxes vs ground truth, thresholds
  0.8 / 0.4; drives recognition targets when remapping is on.

"Difficult" ground-truth objects never become positives and also veto the
negative label for anything overlapping them at or above the negative
threshold, mirroring how the evaluation metric ignores them.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import geometry
from .diffengine import Tensor, concatenate
from .diffengine.tensor import stack

LOC_THRESHOLDS = (0.5, 0.1)
REMAP_THRESHOLDS = (0.8, 0.4)
RLL_WEIGHT_RATIO = 1e3
CL_HARD_NEGATIVE_RATIO = 3
CL_MIN_NEGATIVES = 8
# Predicted box sides are floored here before log-encoding so collapsed
# transforms cannot produce infinite localization targets.
MIN_PRED_BOX_SIZE = 1e-3


def hinge_rec(s: float, polarity: str, m_pos: float = 0.6, m_neg: float = 0.5) -> float:
    """Hinge-embedding recognition loss for a single score."""
    if polarity == "pos":
        return max(m_pos - s, 0.0)
    if polarity == "neg":
        return max(s - m_neg, 0.0)
    raise ValueError("polarity must be 'pos' or 'neg'")


def pos_hinge(scores: Tensor, m_pos: float) -> Tensor:
    return (-scores + m_pos).relu()


def neg_hinge(scores: Tensor, m_neg: float) -> Tensor:
    return (scores - m_neg).relu()


def smooth_l1(x: Tensor, y) -> Tensor:
    """Smoothed L1 between encodings, summed over the last axis.

    Quadratic below unit error, linear above; continuously differentiable at
    the joint.
    """
    if not isinstance(y, Tensor):
        y = Tensor(np.asarray(y, dtype=x.data.dtype))
    d = x - y
    a = d.abs()
    per = Tensor.where(a.data < 1.0, d * d * 0.5, a - 0.5)
    return per.sum(axis=per.ndim - 1)


def encode_boxes_t(boxes: Tensor, anchors: np.ndarray) -> Tensor:
    """Differentiable version of geometry.encode_boxes for predicted boxes (n, 4)."""
    anchors = np.asarray(anchors, dtype=boxes.data.dtype)
    aw = anchors[:, 2] - anchors[:, 0]
    ah = anchors[:, 3] - anchors[:, 1]
    acx = (anchors[:, 0] + anchors[:, 2]) * 0.5
    acy = (anchors[:, 1] + anchors[:, 3]) * 0.5
    w = (boxes[:, 2] - boxes[:, 0]).maximum(MIN_PRED_BOX_SIZE)
    h = (boxes[:, 3] - boxes[:, 1]).maximum(MIN_PRED_BOX_SIZE)
    cx = (boxes[:, 0] + boxes[:, 2]) * 0.5
    cy = (boxes[:, 1] + boxes[:, 3]) * 0.5
    tx = (cx - Tensor(acx)) / Tensor(aw)
    ty = (cy - Tensor(acy)) / Tensor(ah)
    tw = (w / Tensor(aw)).log()
    th = (h / Tensor(ah)).log()
    return stack([tx, ty, tw, th], axis=1)


@dataclass
class TargetAssignment:
    labels: np.ndarray      # (n,) int8: 1 positive, 0 negative, -1 ignore
    matched_gt: np.ndarray  # (n,) int64 ground-truth index, -1 unless positive

    @property
    def positive_indices(self) -> np.ndarray:
        return np.flatnonzero(self.labels == 1)

    @property
    def negative_indices(self) -> np.ndarray:
        return np.flatnonzero(self.labels == 0)


def assign_targets(candidate_boxes: np.ndarray, gt_boxes: np.ndarray,
                   difficult: np.ndarray | None, phase: str,
                   clip_to: tuple[float, float] | None = None) -> TargetAssignment:
    """Assign positive/negative/ignore labels to candidate boxes for one class.

    candidate_boxes are anchors (loc phase) or decoded output boxes (remap
    phase).  Each candidate matches its highest-IoU non-difficult ground
    truth, ties broken by the smallest ground-truth index.  clip_to=(w, h)
    clips candidates to the image for the IoU computation only (used for
    anchors, which extend past patch borders).
    """
    if phase == "loc":
        pos_thr, neg_thr = LOC_THRESHOLDS
    elif phase == "remap":
        pos_thr, neg_thr = REMAP_THRESHOLDS
    else:
        raise ValueError("phase must be 'loc' or 'remap'")
    candidates = np.asarray(candidate_boxes, dtype=np.float64)
    n = candidates.shape[0]
    gt_boxes = np.asarray(gt_boxes, dtype=np.float64).reshape(-1, 4)
    m = gt_boxes.shape[0]
    if difficult is None:
        difficult = np.zeros(m, dtype=bool)
    difficult = np.asarray(difficult, dtype=bool)

    labels = np.zeros(n, dtype=np.int8)
    matched = np.full(n, -1, dtype=np.int64)
    if m == 0:
        return TargetAssignment(labels, matched)

    if clip_to is not None:
        candidates = geometry.clip_boxes(candidates, clip_to[0], clip_to[1])
    overlaps = geometry.iou(candidates, gt_boxes)  # (n, m)

    best_all = overlaps.max(axis=1)
    easy = np.flatnonzero(~difficult)
    if easy.size:
        sub = overlaps[:, easy]
        best_easy = sub.max(axis=1)
        arg_easy = easy[np.argmax(sub, axis=1)]  # argmax takes the first max: smallest index
    else:
        best_easy = np.zeros(n)
        arg_easy = np.full(n, -1, dtype=np.int64)

    pos = best_easy >= pos_thr
    labels[pos] = 1
    matched[pos] = arg_easy[pos]
    ignore = ~pos & (best_all >= neg_thr)  # includes overlap with difficult objects
    labels[ignore] = -1
    return TargetAssignment(labels, matched)


def mine_hard_negatives(neg_losses: np.ndarray, n_pos: int,
                        ratio: int = CL_HARD_NEGATIVE_RATIO,
                        min_keep: int = CL_MIN_NEGATIVES) -> np.ndarray:
    """Indices of the highest-loss negatives at the 1:ratio positive:negative budget.

    With no positives in the batch, min_keep negatives are still mined so the
    recognition loss never starves.  Ties resolve to smaller indices.
    """
    k = ratio * n_pos if n_pos > 0 else min_keep
    k = min(k, neg_losses.size)
    order = np.argsort(-np.asarray(neg_losses), kind="stable")
    return np.sort(order[:k])


def contrastive_loss(pos_scores: Tensor | None, neg_scores: Tensor | None,
                     n_pos: int, m_pos: float = 1.0, m_neg: float = 0.5) -> Tensor:
    """Squared-hinge contrastive recognition loss, both sums divided by n_pos.

    neg_scores must already be the mined hard-negative subset.  With zero
    positives the divisor falls back to 1 and the positive term vanishes.
    """
    div = float(max(n_pos, 1))
    total = Tensor(np.zeros((), dtype=np.float64))
    if pos_scores is not None and pos_scores.size:
        h = pos_hinge(pos_scores, m_pos)
        total = total + (h * h).sum() * (1.0 / div)
    if neg_scores is not None and neg_scores.size:
        h = neg_hinge(neg_scores, m_neg)
        total = total + (h * h).sum() * (1.0 / div)
    return total


def rll_negative_weights(neg_losses: np.ndarray, ratio: float = RLL_WEIGHT_RATIO) -> np.ndarray:
    """Constant weights for active negatives of one image-class pair.

    w_i is proportional to exp(T * l_i) on active negatives (l_i > 0) and 0
    elsewhere, normalized to sum 1.  T is chosen per pair so the highest-loss
    negative weighs `ratio` times a negative at the margin boundary (l -> 0),
    i.e. T = ln(ratio) / l_max.  All-zero losses give an all-zero weight
    vector (no active negatives).
    """
    l = np.asarray(neg_losses, dtype=np.float64)
    active = l > 0.0
    if not active.any():
        return np.zeros_like(l)
    l_max = l.max()
    t = np.log(ratio) / l_max
    w = np.where(active, np.exp(t * (l - l_max)), 0.0)  # shifted by l_max for stability
    return w / w.sum()


def rll_pair_loss(pos_scores: Tensor | None, neg_scores: Tensor | None,
                  m_pos: float = 0.6, m_neg: float = 0.5,
                  ratio: float = RLL_WEIGHT_RATIO) -> tuple[Tensor, int]:
    """Ranked-list recognition loss for one image-class pair.

    Positive hinges are averaged over the active positives; negative hinges
    are combined with the exponential weights of rll_negative_weights, which
    are treated as constants (no gradient flows through them).  Returns the
    pair loss and the active-positive count.
    """
    total = Tensor(np.zeros((), dtype=np.float64))
    n_active = 0
    if pos_scores is not None and pos_scores.size:
        h = pos_hinge(pos_scores, m_pos)
        n_active = int((h.data > 0).sum())
        total = total + h.sum() * (1.0 / max(n_active, 1))
    if neg_scores is not None and neg_scores.size:
        h = neg_hinge(neg_scores, m_neg)
        w = rll_negative_weights(h.data, ratio)
        if w.any():
            total = total + (h * Tensor(w.astype(h.data.dtype))).sum()
    return total, n_active


@dataclass
class PairTerms:
    """Per-(image, class) inputs to the total loss, assembled by the trainer."""
    pos_scores: Tensor | None = None       # live-graph scores at recognition positives
    neg_scores: Tensor | None = None       # detached-transform scores at negatives
    loc_pred_enc: Tensor | None = None     # (n, 4) predicted encodings at loc positives
    loc_target_enc: np.ndarray | None = None


@dataclass
class LossReport:
    total: float = 0.0
    recognition: float = 0.0
    localization: float = 0.0
    n_pos: int = 0
    n_pos_active: int = 0
    n_loc_pos: int = 0
    detail: dict = field(default_factory=dict)


def total_loss(pairs: list[PairTerms], loss_type: str, m_pos: float, m_neg: float,
               loc_weight: float, rll_ratio: float = RLL_WEIGHT_RATIO) -> tuple[Tensor, LossReport]:
    """Combine recognition and localization terms over a batch of pairs.

    loss_type selects contrastive ("cl", batch-wide 1:3 hard-negative mining)
    or ranked-list ("rll", per-pair weighting).  Localization is smoothed L1
    between predicted and target encodings, averaged over localization
    positives and scaled by loc_weight (zero disables it, the V2 setting).
    Raises FloatingPointError if any term goes non-finite.
    """
    report = LossReport()
    n_pos = sum(p.pos_scores.size for p in pairs if p.pos_scores is not None)
    report.n_pos = int(n_pos)

    if loss_type == "cl":
        neg_parts = [p.neg_scores for p in pairs if p.neg_scores is not None and p.neg_scores.size]
        if neg_parts:
            all_neg = neg_parts[0] if len(neg_parts) == 1 else concatenate(neg_parts)
            keep = mine_hard_negatives(neg_hinge(all_neg, m_neg).data, n_pos)
            mined = all_neg[keep] if keep.size else None
        else:
            mined = None
        pos_parts = [p.pos_scores for p in pairs if p.pos_scores is not None and p.pos_scores.size]
        all_pos = None
        if pos_parts:
            all_pos = pos_parts[0] if len(pos_parts) == 1 else concatenate(pos_parts)
        rec = contrastive_loss(all_pos, mined, n_pos, m_pos, m_neg)
        report.n_pos_active = int((pos_hinge(all_pos, m_pos).data > 0).sum()) if all_pos is not None else 0
    elif loss_type == "rll":
        rec = Tensor(np.zeros((), dtype=np.float64))
        for p in pairs:
            pair_loss, n_active = rll_pair_loss(p.pos_scores, p.neg_scores, m_pos, m_neg, rll_ratio)
            rec = rec + pair_loss
            report.n_pos_active += n_active
    else:
        raise ValueError("loss_type must be 'cl' or 'rll'")

    loc = Tensor(np.zeros((), dtype=np.float64))
    n_loc = sum(p.loc_pred_enc.shape[0] for p in pairs if p.loc_pred_enc is not None)
    report.n_loc_pos = int(n_loc)
    if loc_weight != 0.0 and n_loc > 0:
        for p in pairs:
            if p.loc_pred_enc is not None and p.loc_pred_enc.shape[0]:
                loc = loc + smooth_l1(p.loc_pred_enc, p.loc_target_enc).sum()
        loc = loc * (1.0 / n_loc)

    total = rec + loc * loc_weight
    report.recognition = float(rec.data)
    report.localization = float(loc.data)
    report.total = float(total.data)
    if not np.isfinite(report.total):
        raise FloatingPointError(
            f"non-finite loss: rec={report.recognition}, loc={report.localization}, "
            f"n_pos={report.n_pos}, n_loc_pos={report.n_loc_pos}")
    return total, report
