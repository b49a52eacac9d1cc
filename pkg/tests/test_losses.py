"""Objective terms: hinges, smooth L1, target assignment, mining, CL/RLL, totals."""

import numpy as np
import pytest

from os2dkit import geometry, losses
from os2dkit.diffengine import Tensor, grad_check


# ---------------------------------------------------------------------------
# elementary terms


def test_hinge_rec_closed_form():
    assert losses.hinge_rec(0.3, "pos") == pytest.approx(0.3)
    assert losses.hinge_rec(0.7, "pos") == 0.0
    assert losses.hinge_rec(0.7, "neg") == pytest.approx(0.2)
    assert losses.hinge_rec(0.4, "neg") == 0.0
    with pytest.raises(ValueError):
        losses.hinge_rec(0.5, "both")


def test_tensor_hinges_match_scalar():
    s = np.linspace(-1, 1, 21)
    pos = losses.pos_hinge(Tensor(s), 0.6).data
    neg = losses.neg_hinge(Tensor(s), 0.5).data
    for i, v in enumerate(s):
        assert pos[i] == pytest.approx(losses.hinge_rec(v, "pos"))
        assert neg[i] == pytest.approx(losses.hinge_rec(v, "neg"))


def test_smooth_l1_closed_form():
    x = Tensor(np.array([[0.5, 1.0, 3.0, 0.0]]))
    out = losses.smooth_l1(x, np.zeros((1, 4))).data
    assert out[0] == pytest.approx(0.125 + 0.5 + 2.5 + 0.0)


def test_smooth_l1_continuous_at_joint():
    lo = losses.smooth_l1(Tensor(np.array([[1.0 - 1e-9]])), np.zeros((1, 1))).data[0]
    hi = losses.smooth_l1(Tensor(np.array([[1.0 + 1e-9]])), np.zeros((1, 1))).data[0]
    assert abs(lo - hi) < 1e-8


def test_smooth_l1_gradients():
    rng = np.random.default_rng(41)
    x = Tensor(rng.uniform(-0.8, 0.8, (3, 4)) + np.where(rng.random((3, 4)) < 0.5, 0.0, 1.5),
               requires_grad=True)
    y = rng.standard_normal((3, 4)) * 0.1
    rep = grad_check(lambda a: losses.smooth_l1(a, y).sum(), [x], tolerance=1e-4, rng=rng)
    assert rep.ok, str(rep)


def test_encode_boxes_t_matches_plain_encoding():
    rng = np.random.default_rng(42)
    x1 = rng.uniform(0, 50, (30, 1))
    y1 = rng.uniform(0, 50, (30, 1))
    boxes = np.hstack([x1, y1, x1 + rng.uniform(5, 60, (30, 1)), y1 + rng.uniform(5, 60, (30, 1))])
    ax1 = rng.uniform(0, 50, (30, 1))
    ay1 = rng.uniform(0, 50, (30, 1))
    anchors = np.hstack([ax1, ay1, ax1 + rng.uniform(5, 60, (30, 1)), ay1 + rng.uniform(5, 60, (30, 1))])
    got = losses.encode_boxes_t(Tensor(boxes), anchors).data
    want = geometry.encode_boxes(boxes, anchors)
    assert np.abs(got - want).max() < 1e-9


def test_encode_boxes_t_floors_collapsed_boxes():
    anchors = np.array([[0.0, 0.0, 10.0, 10.0]])
    collapsed = Tensor(np.array([[5.0, 5.0, 5.0, 5.0]]))  # zero width and height
    enc = losses.encode_boxes_t(collapsed, anchors).data
    assert np.all(np.isfinite(enc))
    assert enc[0, 2] == pytest.approx(np.log(losses.MIN_PRED_BOX_SIZE / 10.0))


# ---------------------------------------------------------------------------
# target assignment


def _iou_scalar(a, b):
    ix = max(0.0, min(a[2], b[2]) - max(a[0], b[0]))
    iy = max(0.0, min(a[3], b[3]) - max(a[1], b[1]))
    inter = ix * iy
    area_a = max(0.0, a[2] - a[0]) * max(0.0, a[3] - a[1])
    area_b = max(0.0, b[2] - b[0]) * max(0.0, b[3] - b[1])
    union = area_a + area_b - inter
    return inter / union if union > 0 else 0.0


def _assign_oracle(cands, gts, difficult, pos_thr, neg_thr, clip_to=None):
    cands = np.asarray(cands, dtype=float).copy()
    if clip_to is not None:
        w, h = clip_to
        cands[:, [0, 2]] = np.clip(cands[:, [0, 2]], 0, w)
        cands[:, [1, 3]] = np.clip(cands[:, [1, 3]], 0, h)
    labels = np.zeros(len(cands), dtype=np.int8)
    matched = np.full(len(cands), -1, dtype=np.int64)
    for i, c in enumerate(cands):
        best_all = 0.0
        best_easy, best_j = -1.0, -1
        for j, g in enumerate(gts):
            v = _iou_scalar(c, g)
            best_all = max(best_all, v)
            if not difficult[j] and v > best_easy:
                best_easy, best_j = v, j
        if best_easy >= pos_thr:
            labels[i] = 1
            matched[i] = best_j
        elif best_all >= neg_thr:
            labels[i] = -1
    return labels, matched


def _random_boxes(rng, n, extent=100.0):
    x = np.sort(rng.uniform(0, extent, (n, 2)), axis=1)
    y = np.sort(rng.uniform(0, extent, (n, 2)), axis=1)
    return np.stack([x[:, 0], y[:, 0], x[:, 1] + 3.0, y[:, 1] + 3.0], axis=1)


def test_assign_targets_matches_oracle():
    rng = np.random.default_rng(2101)
    for trial in range(200):
        n = int(rng.integers(1, 30))
        m = int(rng.integers(0, 5))
        cands = _random_boxes(rng, n)
        gts = _random_boxes(rng, m) if m else np.zeros((0, 4))
        diff = rng.random(m) < 0.3
        phase = "loc" if trial % 2 == 0 else "remap"
        thr = losses.LOC_THRESHOLDS if phase == "loc" else losses.REMAP_THRESHOLDS
        clip = (60.0, 60.0) if trial % 5 == 0 else None
        got = losses.assign_targets(cands, gts, diff, phase, clip_to=clip)
        labels, matched = _assign_oracle(cands, gts, diff, *thr, clip_to=clip)
        assert np.array_equal(got.labels, labels), f"trial {trial}"
        assert np.array_equal(got.matched_gt, matched), f"trial {trial}"


def test_assign_targets_thresholds_by_phase():
    gt = np.array([[0.0, 0.0, 10.0, 10.0]])
    # candidate IoUs with gt: 1.0, 0.74, 0.45, 0.085
    cands = np.array([[0.0, 0.0, 10.0, 10.0],
                      [0.0, 0.0, 10.0, 7.4],
                      [0.0, 0.0, 10.0, 4.5],
                      [0.0, 0.0, 10.0, 0.85]])
    loc = losses.assign_targets(cands, gt, None, "loc")
    assert list(loc.labels) == [1, 1, -1, 0]
    remap = losses.assign_targets(cands, gt, None, "remap")
    assert list(remap.labels) == [1, -1, -1, 0]
    assert remap.matched_gt[0] == 0 and remap.matched_gt[1] == -1


def test_assign_targets_no_ground_truth_all_negative():
    out = losses.assign_targets(_random_boxes(np.random.default_rng(3), 12),
                                np.zeros((0, 4)), None, "loc")
    assert np.all(out.labels == 0) and np.all(out.matched_gt == -1)


def test_assign_targets_difficult_vetoes_but_never_matches():
    gt = np.array([[0.0, 0.0, 10.0, 10.0], [40.0, 40.0, 50.0, 50.0]])
    difficult = np.array([True, False])
    cands = np.array([[0.0, 0.0, 10.0, 10.0],     # exactly on the difficult one
                      [40.0, 40.0, 50.0, 50.0]])  # exactly on the easy one
    out = losses.assign_targets(cands, gt, difficult, "loc")
    assert out.labels[0] == -1        # would be positive, but target is difficult
    assert out.labels[1] == 1 and out.matched_gt[1] == 1


def test_assign_targets_tie_breaks_to_smaller_gt_index():
    gt = np.array([[0.0, 0.0, 10.0, 10.0], [10.0, 0.0, 20.0, 10.0]])
    cand = np.array([[5.0, 0.0, 15.0, 10.0]])  # IoU 1/3 with both
    out = losses.assign_targets(cand, gt, None, "remap")
    assert out.labels[0] == 0  # 1/3 is below the 0.4 remap negative band
    out = losses.assign_targets(np.array([[2.5, 0.0, 12.5, 10.0]]), gt, None, "loc")
    # IoU 0.6 with gt 0 wins over 0.2 with gt 1
    assert out.matched_gt[0] == 0
    sym = losses.assign_targets(np.array([[5.0, 0.0, 15.0, 10.0]]),
                                np.array([[0.0, 0.0, 15.0, 10.0], [5.0, 0.0, 20.0, 10.0]]),
                                None, "loc")
    # exact two-way tie at IoU 2/3: smallest ground-truth index wins
    assert sym.labels[0] == 1 and sym.matched_gt[0] == 0


def test_assign_targets_clipping_changes_border_anchors():
    gt = np.array([[0.0, 0.0, 56.0, 56.0]])
    anchor = np.array([[-48.0, -48.0, 64.0, 64.0]])
    unclipped = losses.assign_targets(anchor, gt, None, "loc")
    assert unclipped.labels[0] != 1
    clipped = losses.assign_targets(anchor, gt, None, "loc", clip_to=(64.0, 64.0))
    assert clipped.labels[0] == 1


# ---------------------------------------------------------------------------
# mining and recognition losses


def test_mine_hard_negatives_budget_and_order():
    l = np.array([0.1, 0.9, 0.0, 0.5, 0.7, 0.2])
    assert list(losses.mine_hard_negatives(l, 1)) == [1, 3, 4]
    assert list(losses.mine_hard_negatives(l, 2)) == [0, 1, 2, 3, 4, 5]  # budget 6 keeps all
    # no positives: min_keep kicks in
    assert losses.mine_hard_negatives(l, 0).size == min(losses.CL_MIN_NEGATIVES, l.size)
    # ties resolve to smaller indices
    t = np.array([0.5, 0.5, 0.5, 0.5])
    assert list(losses.mine_hard_negatives(t, 1)) == [0, 1, 2]


def test_mine_hard_negatives_matches_argsort_oracle():
    rng = np.random.default_rng(77)
    for _ in range(50):
        l = rng.uniform(0, 1, int(rng.integers(1, 40)))
        n_pos = int(rng.integers(0, 5))
        got = losses.mine_hard_negatives(l, n_pos)
        k = 3 * n_pos if n_pos else losses.CL_MIN_NEGATIVES
        k = min(k, l.size)
        want = np.sort(np.argsort(-l, kind="stable")[:k])
        assert np.array_equal(got, want)


def test_contrastive_loss_closed_form():
    pos = Tensor(np.array([0.2, 0.8]))
    neg = Tensor(np.array([0.7, 0.3]))
    out = losses.contrastive_loss(pos, neg, n_pos=2, m_pos=1.0, m_neg=0.5)
    assert float(out.data) == pytest.approx((0.8 ** 2 + 0.2 ** 2 + 0.2 ** 2) / 2.0)


def test_contrastive_loss_zero_positive_divisor():
    neg = Tensor(np.array([0.9]))
    out = losses.contrastive_loss(None, neg, n_pos=0)
    assert float(out.data) == pytest.approx(0.4 ** 2)


def test_rll_weights_reference_example():
    w = losses.rll_negative_weights(np.array([0.3, 0.15]))
    assert w[0] == pytest.approx(0.969347, abs=1e-4)
    assert w[1] == pytest.approx(0.030653, abs=1e-4)


def test_rll_weights_sum_one_and_ratio_law():
    rng = np.random.default_rng(99)
    for _ in range(50):
        l = rng.uniform(0, 0.6, int(rng.integers(2, 30)))
        l[rng.random(l.size) < 0.3] = 0.0
        w = losses.rll_negative_weights(l)
        if (l > 0).any():
            assert abs(w.sum() - 1.0) < 1e-9
            assert np.all(w[l == 0.0] == 0.0)
            # by construction w_i / w_j = exp(T (l_i - l_j)) with T = ln(R)/l_max:
            # the max-loss negative outweighs one at the boundary by exactly R
            lm = l.max()
            t = np.log(losses.RLL_WEIGHT_RATIO) / lm
            active = np.flatnonzero(l > 0)
            i, j = active[np.argmax(l[active])], active[np.argmin(l[active])]
            assert w[i] / w[j] == pytest.approx(np.exp(t * (l[i] - l[j])), rel=1e-9)
        else:
            assert np.all(w == 0.0)


def test_rll_weights_boundary_ratio_is_exactly_the_constant():
    w = losses.rll_negative_weights(np.array([0.4, 1e-300]))
    assert w[0] / w[1] == pytest.approx(losses.RLL_WEIGHT_RATIO, rel=1e-9)


def test_rll_pair_loss_closed_form():
    pos = Tensor(np.array([0.7, 0.5, 0.2]))
    neg = Tensor(np.array([0.6, 0.55]))
    loss, n_active = losses.rll_pair_loss(pos, neg)
    assert n_active == 2
    h = np.array([0.1, 0.05])
    w = losses.rll_negative_weights(h)
    want = (0.1 + 0.4) / 2.0 + (h * w).sum()
    assert float(loss.data) == pytest.approx(want, rel=1e-12)


def test_rll_negative_weights_carry_no_gradient():
    # the exponential weights are constants: d loss / d s_i must equal w_i
    s = Tensor(np.array([0.6, 0.55, 0.3]), requires_grad=True)
    loss, _ = losses.rll_pair_loss(None, s)
    loss.backward()
    w = losses.rll_negative_weights(np.maximum(s.data - 0.5, 0.0))
    assert np.allclose(s.grad, w * (s.data > 0.5))


def test_rll_pair_loss_all_satisfied_is_zero():
    loss, n_active = losses.rll_pair_loss(Tensor(np.array([0.9, 0.8])),
                                          Tensor(np.array([0.1, 0.4])))
    assert float(loss.data) == 0.0 and n_active == 0


# ---------------------------------------------------------------------------
# batch totals


def _pair(pos=None, neg=None, pred=None, target=None):
    return losses.PairTerms(
        pos_scores=Tensor(np.asarray(pos, dtype=np.float64)) if pos is not None else None,
        neg_scores=Tensor(np.asarray(neg, dtype=np.float64)) if neg is not None else None,
        loc_pred_enc=Tensor(np.asarray(pred, dtype=np.float64)) if pred is not None else None,
        loc_target_enc=np.asarray(target, dtype=np.float64) if target is not None else None)


def test_total_loss_rll_is_sum_of_pair_losses_plus_loc():
    pairs = [_pair(pos=[0.4, 0.9], neg=[0.7, 0.2]),
             _pair(neg=[0.8]),
             _pair(pos=[0.55], pred=[[0.1, -0.2, 0.05, 0.0]], target=[[0.0, 0.0, 0.0, 0.0]])]
    total, report = losses.total_loss(pairs, "rll", 0.6, 0.5, loc_weight=0.2)
    want = 0.0
    for p in pairs:
        l, _ = losses.rll_pair_loss(p.pos_scores, p.neg_scores)
        want += float(l.data)
    loc = float(losses.smooth_l1(pairs[2].loc_pred_enc, pairs[2].loc_target_enc).sum().data)
    want += 0.2 * loc / 1.0
    assert float(total.data) == pytest.approx(want, rel=1e-12)
    assert report.n_pos == 3 and report.n_loc_pos == 1
    assert report.localization == pytest.approx(loc)


def test_total_loss_cl_mines_across_the_whole_batch():
    pairs = [_pair(pos=[0.3], neg=[0.9, 0.55]),
             _pair(neg=[0.95, 0.1, 0.6])]
    total, report = losses.total_loss(pairs, "cl", 1.0, 0.5, loc_weight=0.0)
    # n_pos = 1 -> 3 hardest negatives among all 5: scores 0.9, 0.95, 0.6
    want = ((1.0 - 0.3) ** 2 + (0.9 - 0.5) ** 2 + (0.95 - 0.5) ** 2 + (0.6 - 0.5) ** 2)
    assert float(total.data) == pytest.approx(want / 1.0, rel=1e-12)
    assert report.n_pos == 1 and report.n_pos_active == 1


def test_total_loss_zero_loc_weight_disables_localization():
    pairs = [_pair(pos=[0.1], pred=[[3.0, 3.0, 1.0, 1.0]], target=[[0.0, 0.0, 0.0, 0.0]])]
    _, report = losses.total_loss(pairs, "rll", 0.6, 0.5, loc_weight=0.0)
    assert report.localization == 0.0
    assert report.n_loc_pos == 1


def test_total_loss_loc_averages_over_positives_across_pairs():
    pairs = [_pair(pos=[0.9], pred=[[0.5, 0.0, 0.0, 0.0]], target=[[0.0, 0.0, 0.0, 0.0]]),
             _pair(pos=[0.9], pred=[[0.0, 0.5, 0.0, 0.0], [0.0, 0.0, 0.5, 0.0]],
                   target=[[0.0, 0.0, 0.0, 0.0], [0.0, 0.0, 0.0, 0.0]])]
    _, report = losses.total_loss(pairs, "rll", 0.6, 0.5, loc_weight=1.0)
    assert report.localization == pytest.approx(3 * 0.125 / 3)
    assert report.n_loc_pos == 3


def test_total_loss_rejects_unknown_type_and_non_finite():
    with pytest.raises(ValueError):
        losses.total_loss([_pair(pos=[0.5])], "focal", 0.6, 0.5, 0.2)
    bad = [_pair(pos=[0.1], pred=[[np.nan, 0.0, 0.0, 0.0]], target=[[0.0, 0.0, 0.0, 0.0]])]
    with pytest.raises(FloatingPointError):
        losses.total_loss(bad, "rll", 0.6, 0.5, 0.2)


def test_total_loss_gradients():
    # RLL negatives are excluded: their weights are constants on the tape but
    # finite differences would see them change, disagreeing by design.
    rng = np.random.default_rng(1234)
    pos = Tensor(np.array([0.15, 0.85, 0.42]), requires_grad=True)
    neg = Tensor(np.array([0.72, 0.31, 0.64]), requires_grad=True)
    neg_const = Tensor(np.array([0.72, 0.31, 0.64]))
    pred = Tensor(rng.uniform(-0.6, 0.6, (2, 4)), requires_grad=True)
    target = rng.uniform(-0.1, 0.1, (2, 4))

    def f(a, c):
        pairs = [_pair(), losses.PairTerms(pos_scores=a, neg_scores=neg_const,
                                           loc_pred_enc=c, loc_target_enc=target)]
        return losses.total_loss(pairs, "rll", 0.6, 0.5, loc_weight=0.2)[0]

    rep = grad_check(f, [pos, pred], tolerance=1e-4, rng=rng)
    assert rep.ok, str(rep)

    def g(a, b):
        pairs = [losses.PairTerms(pos_scores=a, neg_scores=b)]
        return losses.total_loss(pairs, "cl", 1.0, 0.5, loc_weight=0.0)[0]

    rep = grad_check(g, [pos, neg], tolerance=1e-4, rng=rng)
    assert rep.ok, str(rep)
