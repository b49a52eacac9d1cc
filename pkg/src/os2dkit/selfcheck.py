"""Runtime sanity suite: gradient checks and brute-force oracle equivalences.

Each check rebuilds its reference result from first principles (quadruple
loops, exhaustive pairwise IoU, closed-form weights) so a regression in the
fast paths cannot hide behind itself.  Intended for `os2dkit selfcheck` and
for quick reassurance after touching the engine; the pytest suite runs wider
sweeps of the same properties.
"""

from __future__ import annotations

import numpy as np

from . import evalkit, geometry, head, losses
from .diffengine import ParameterStore, Tensor, conv2d, grad_check
from .diffengine.ops import bilinear_sample_planes
from .features import FEATURE_DIM, init_extractor_params


def _conv_oracle(xd, wd, bd, stride, padding):
    sh, sw = (stride, stride) if isinstance(stride, int) else stride
    ph, pw = (padding, padding) if isinstance(padding, int) else padding
    n, cin, h, w = xd.shape
    cout, _, kh, kw = wd.shape
    xp = np.pad(xd, ((0, 0), (0, 0), (ph, ph), (pw, pw)))
    oh = (h + 2 * ph - kh) // sh + 1
    ow = (w + 2 * pw - kw) // sw + 1
    out = np.zeros((n, cout, oh, ow))
    for i in range(n):
        for o in range(cout):
            for y in range(oh):
                for x in range(ow):
                    acc = np.sum(xp[i, :, y * sh:y * sh + kh, x * sw:x * sw + kw] * wd[o])
                    out[i, o, y, x] = acc + (bd[o] if bd is not None else 0.0)
    return out


def check_conv_oracle(rng) -> tuple[bool, str]:
    worst = 0.0
    for shape, k, s, p, cout in [((2, 3, 9, 8), 3, 1, 1, 4), ((1, 4, 10, 7), 5, 2, 2, 3),
                                 ((1, 12, 8, 8), 3, (2, 1), (0, 1), 5)]:
        xd = rng.standard_normal(shape)
        wd = rng.standard_normal((cout, shape[1], k, k))
        bd = rng.standard_normal(cout)
        got = conv2d(Tensor(xd), Tensor(wd), Tensor(bd), stride=s, padding=p).data
        worst = max(worst, float(np.abs(got - _conv_oracle(xd, wd, bd, s, p)).max()))
    return worst < 1e-9, f"max dev {worst:.2e}"


def check_conv_grad(rng) -> tuple[bool, str]:
    x = Tensor(rng.standard_normal((2, 3, 7, 6)), requires_grad=True)
    w = Tensor(rng.standard_normal((4, 3, 3, 3)), requires_grad=True)
    b = Tensor(rng.standard_normal(4), requires_grad=True)
    proj = Tensor(rng.standard_normal((2, 4, 4, 3)))
    rep = grad_check(lambda x, w, b: (conv2d(x, w, b, stride=2, padding=1) * proj).sum(),
                     [x, w, b], tolerance=1e-4, rng=rng)
    return rep.ok, str(rep)


def check_correlate_oracle(rng) -> tuple[bool, str]:
    d, ha, wa = 6, 5, 7
    fi = rng.standard_normal((d, ha, wa))
    fc = rng.standard_normal((d, 15, 15))
    got = head.correlate(Tensor(fi), Tensor(fc)).data
    ref = np.zeros((ha, wa, 15, 15))
    for k in range(ha):
        for l in range(wa):
            a = fi[:, k, l]
            for p in range(15):
                for q in range(15):
                    bvec = fc[:, p, q]
                    ref[k, l, p, q] = a @ bvec / max(np.linalg.norm(a) * np.linalg.norm(bvec), 1e-12)
    dev = float(np.abs(got - ref).max())
    return dev < 1e-6, f"max dev {dev:.2e}"


def check_resample_identity(rng) -> tuple[bool, str]:
    # constant grid g[k,l,p,q] = (k,l) must reproduce c exactly
    ha, wa = 6, 5
    c = Tensor(rng.standard_normal((ha, wa, 15, 15)))
    ks = np.broadcast_to(np.arange(ha, dtype=np.float64)[:, None, None, None], c.shape).copy()
    ls = np.broadcast_to(np.arange(wa, dtype=np.float64)[None, :, None, None], c.shape).copy()
    s_hat = head.resample_scores(c, Tensor(ks), Tensor(ls)).data
    dev = float(np.abs(s_hat - c.data).max())
    return dev == 0.0, f"max dev {dev:.2e}"


def check_bilinear_grad(rng) -> tuple[bool, str]:
    planes = Tensor(rng.standard_normal((3, 6, 7)), requires_grad=True)
    # off-lattice points; bilinear interpolation has kinks at integers
    ys = Tensor(rng.uniform(0.3, 4.7, (3, 9)) + 0.01, requires_grad=True)
    xs = Tensor(rng.uniform(0.3, 5.7, (3, 9)) + 0.01, requires_grad=True)
    proj = Tensor(rng.standard_normal((3, 9)))
    rep = grad_check(lambda p, y, x: (bilinear_sample_planes(p, y, x) * proj).sum(),
                     [planes, ys, xs], tolerance=1e-3, rng=rng)
    return rep.ok, str(rep)


def check_nms_oracle(rng) -> tuple[bool, str]:
    for _ in range(20):
        n = int(rng.integers(1, 24))
        xy = rng.uniform(0, 40, (n, 2))
        wh = rng.uniform(2, 18, (n, 2))
        boxes = np.concatenate([xy, xy + wh], axis=1)
        scores = rng.standard_normal(n)
        thr = float(rng.uniform(0.1, 0.7))
        got = geometry.nms(boxes, scores, thr)
        order = np.argsort(-scores, kind="stable")
        kept, dead = [], np.zeros(n, dtype=bool)
        for i in order:
            if dead[i]:
                continue
            kept.append(int(i))
            for j in order:
                if not dead[j] and j != i and geometry.iou(boxes[i], boxes[j]) > thr:
                    dead[j] = True
            dead[i] = True
        if list(got) != kept:
            return False, f"mismatch at n={n} thr={thr:.2f}"
    return True, "20 random problems exact"


def check_assignment_oracle(rng) -> tuple[bool, str]:
    for _ in range(20):
        na, ng = int(rng.integers(2, 30)), int(rng.integers(1, 5))
        xy = rng.uniform(0, 50, (na, 2))
        wh = rng.uniform(4, 25, (na, 2))
        cand = np.concatenate([xy, xy + wh], axis=1)
        gxy = rng.uniform(0, 50, (ng, 2))
        gwh = rng.uniform(4, 25, (ng, 2))
        gt = np.concatenate([gxy, gxy + gwh], axis=1)
        difficult = rng.random(ng) < 0.3
        asg = losses.assign_targets(cand, gt, difficult, "remap")
        m = geometry.iou(cand, gt)
        for i in range(na):
            easy = np.where(~difficult)[0]
            best_easy = easy[np.argmax(m[i, easy])] if easy.size else -1
            lab = 0
            if best_easy >= 0 and m[i, best_easy] >= losses.REMAP_THRESHOLDS[0]:
                lab = 1
            elif m[i].max() >= losses.REMAP_THRESHOLDS[1]:
                lab = -1
            if asg.labels[i] != lab:
                return False, f"label mismatch at candidate {i}"
            if lab == 1 and asg.matched_gt[i] != best_easy:
                return False, f"match mismatch at candidate {i}"
    return True, "20 random problems exact"


def check_voc_map_oracle(rng) -> tuple[bool, str]:
    # one randomized scenario against a direct envelope-AP computation
    gt = {}
    dets = []
    for img in ("a", "b", "c"):
        ng = int(rng.integers(1, 4))
        xy = rng.uniform(0, 60, (ng, 2))
        wh = rng.uniform(8, 30, (ng, 2))
        gt[img] = (np.concatenate([xy, xy + wh], 1), np.zeros(ng, np.int64),
                   rng.random(ng) < 0.25)
        for _ in range(int(rng.integers(0, 6))):
            j = int(rng.integers(0, ng))
            jitter = rng.normal(0, 4, 4)
            dets.append(evalkit.Detection(img, 0, gt[img][0][j] + jitter,
                                          float(rng.random()), 1.0))
    got = evalkit.voc_map(dets, gt).map

    rows = sorted(dets, key=lambda d: (-d.score, d.image_id, tuple(d.box)))
    claimed = {img: np.zeros(len(gt[img][0]), bool) for img in gt}
    tp, fp = [], []
    for d in rows:
        boxes, _, diff = gt[d.image_id]
        best, bi = 0.0, -1
        for j in range(len(boxes)):
            v = geometry.iou(d.box, boxes[j])
            if v > best:
                best, bi = v, j
        if best >= 0.5 and diff[bi]:
            continue
        if best >= 0.5 and not claimed[d.image_id][bi]:
            claimed[d.image_id][bi] = True
            tp.append(1.0); fp.append(0.0)
        else:
            tp.append(0.0); fp.append(1.0)
    npos = sum(int((~d).sum()) for _, _, d in gt.values())
    if tp:
        ctp, cfp = np.cumsum(tp), np.cumsum(fp)
        rec = ctp / max(npos, 1)
        prec = ctp / np.maximum(ctp + cfp, 1e-12)
        mrec = np.concatenate([[0.0], rec, [1.0]])
        mpre = np.concatenate([[0.0], prec, [0.0]])
        for i in range(len(mpre) - 2, -1, -1):
            mpre[i] = max(mpre[i], mpre[i + 1])
        idx = np.where(mrec[1:] != mrec[:-1])[0]
        ref = float(np.sum((mrec[idx + 1] - mrec[idx]) * mpre[idx + 1]))
    else:
        ref = 0.0
    dev = abs(got - ref)
    return dev < 1e-9, f"|mAP - oracle| = {dev:.2e}"


def _tiny_store(rng, variant="v1") -> ParameterStore:
    store = ParameterStore()
    store.add("norm.mean", np.full(3, 0.5), trainable=False)
    store.add("norm.std", np.full(3, 0.25), trainable=False)
    init_extractor_params(store, rng)
    head.init_transform_net_params(store, variant, rng)
    return store


def check_patchwise_equivalence(rng) -> tuple[bool, str]:
    # make the last conv nonzero so the check exercises real transforms
    store = _tiny_store(rng)
    store.get("tnet.conv3.weight").data[:] = rng.standard_normal((4, 64, 5, 5)) * 0.01
    worst = 0.0
    for ha, wa in [(4, 5), (7, 6)]:
        c = Tensor(rng.standard_normal((ha, wa, 15, 15)))
        full = head.transform_net(c, store, "v1").data
        padded = np.zeros((ha + 14, wa + 14, 15, 15))
        padded[7:7 + ha, 7:7 + wa] = c.data
        for k in range(ha):
            for l in range(wa):
                window = Tensor(padded[k:k + 15, l:l + 15])
                one = head.transform_net(window, store, "v1").data
                worst = max(worst, float(np.abs(one[:, 7, 7] - full[:, k, l]).max()))
    return worst <= 1e-6, f"max |patchwise - fullyconv| = {worst:.2e}"


def check_identity_square_equiv(rng) -> tuple[bool, str]:
    store = _tiny_store(rng)  # conv3 zero-initialized: exact identity transforms
    fi = Tensor(rng.standard_normal((FEATURE_DIM, 9, 8)))
    fc = Tensor(rng.standard_normal((FEATURE_DIM, 15, 15)))
    out = head.forward_head(fi, fc, store, variant="v1")
    c = head.correlate(fi, fc).data
    base = evalkit.sliding_window_scores(c)
    same = np.array_equal(out.scores.data, base)
    return same, "bitwise equal" if same else f"max dev {np.abs(out.scores.data - base).max():.2e}"


def check_head_grad(rng) -> tuple[bool, str]:
    store = _tiny_store(rng)
    store.get("tnet.conv3.weight").data[:] = rng.standard_normal((4, 64, 5, 5)) * 0.01
    fi = Tensor(rng.standard_normal((FEATURE_DIM, 8, 8)), requires_grad=True)
    fc = Tensor(rng.standard_normal((FEATURE_DIM, 15, 15)), requires_grad=True)
    w1 = store.get("tnet.conv1.weight")
    rep = grad_check(lambda a, b, w: head.forward_head(a, b, store, variant="v1").scores.sum(),
                     [fi, fc, w1], tolerance=1e-3, max_coords_per_input=8, rng=rng)
    return rep.ok, str(rep)


def check_rll_weight_law(rng) -> tuple[bool, str]:
    for _ in range(10):
        scores = rng.uniform(0.4, 1.4, int(rng.integers(4, 40)))
        ell = np.maximum(scores - 0.5, 0.0)
        w = losses.rll_negative_weights(ell)
        active = ell > 0
        if not active.any():
            if w.sum() != 0:
                return False, "weights on inactive set"
            continue
        if abs(w.sum() - 1.0) > 1e-9:
            return False, f"sum {w.sum()!r}"
        ratio = w[active].max() / w[active].min()
        expect = losses.RLL_WEIGHT_RATIO ** ((ell[active].max() - ell[active].min()) / ell[active].max())
        if abs(ratio - expect) / expect > 1e-9:
            return False, f"ratio {ratio:.6g} vs {expect:.6g}"
    return True, "sum-to-one and ratio law hold"


CHECKS = [
    ("conv2d vs quadruple-loop oracle", check_conv_oracle),
    ("conv2d finite-difference gradients", check_conv_grad),
    ("correlation vs cosine oracle", check_correlate_oracle),
    ("resampling at the constant grid returns c", check_resample_identity),
    ("bilinear sampler gradients", check_bilinear_grad),
    ("nms vs greedy oracle", check_nms_oracle),
    ("target assignment vs exhaustive oracle", check_assignment_oracle),
    ("voc map vs envelope oracle", check_voc_map_oracle),
    ("patchwise == fully-convolutional transform net", check_patchwise_equivalence),
    ("identity head == square sliding window", check_identity_square_equiv),
    ("full head finite-difference gradients", check_head_grad),
    ("ranked-list negative weight law", check_rll_weight_law),
]


def run_all(seed: int = 0, out=print) -> bool:
    ok_all = True
    for index, (name, fn) in enumerate(CHECKS):
        rng = np.random.default_rng(np.random.SeedSequence((seed, index)))
        try:
            ok, detail = fn(rng)
        except Exception as e:  # a crashed check is a failed check
            ok, detail = False, f"{type(e).__name__}: {e}"
        ok_all &= ok
        out(f"{'PASS' if ok else 'FAIL'}  {name}: {detail}")
    return ok_all
