"""Training loop: batch sampling, the two-phase objective, SGD, checkpoints.

A batch is 4 random crops at random scale plus a shared class list (the
annotated classes of the crops, padded with random negative classes up to the
label cap).  Every (patch, class) pair contributes recognition terms; pairs
whose class is present contribute localization terms and drive TransformNet.

TransformNet learns from positive pairs only: for those, positive-anchor
scores flow through the live transform field while negative-anchor scores use
a detached copy of the field; for negative pairs the transforms are computed
outside the tape entirely, so only the feature extractor sees those
gradients.

The metrics log has one line per validation point, "step<TAB>loss<TAB>mAP",
written with repr() floats so reruns can be compared byte for byte.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import config as configmod
from . import evalkit, geometry, head, losses
from .datagen import Dataset
from .diffengine import ParameterStore, Tensor, no_grad, stack
from .features import (FEATURE_STRIDE, extract_features, init_extractor_params,
                       resize_class_features, resize_class_image, warmup_extractor_stats)

DTYPES = {"float32": np.float32, "float64": np.float64}


@dataclass
class TrainConfig:
    steps: int = 2000
    batch_size: int = 4
    patch_size: int = 192
    max_labels: int = 15
    lr: float = 1e-4
    momentum: float = 0.9
    weight_decay: float = 1e-4
    milestones: tuple[float, ...] = (0.5, 0.75)  # fractions of total steps
    lr_decay: float = 0.1
    loss_type: str = "rll"  # "cl" | "rll"
    variant: str = "v1"
    remap: bool = True
    loc_weight: float = 0.2
    m_pos: float | None = None  # None -> 1.0 for cl, 0.6 for rll
    m_neg: float = 0.5
    crop_scale_min: float = 0.6
    crop_scale_max: float = 1.4
    seed: int = 0
    dtype: str = "float32"
    warmup_patches: int = 64
    val_every: int = 200
    val_images: int = 12
    val_level: float = 1.0

    def __post_init__(self):
        if self.patch_size % FEATURE_STRIDE:
            raise ValueError("patch_size must be divisible by the feature stride")
        if list(self.milestones) != sorted(set(self.milestones)):
            raise ValueError("milestones must be strictly increasing")
        if self.loss_type not in ("cl", "rll"):
            raise ValueError("loss_type must be 'cl' or 'rll'")
        if self.dtype not in DTYPES:
            raise ValueError("dtype must be 'float32' or 'float64'")

    @property
    def resolved_m_pos(self) -> float:
        if self.m_pos is not None:
            return self.m_pos
        return 1.0 if self.loss_type == "cl" else 0.6

    def milestone_steps(self) -> list[int]:
        return [int(round(f * self.steps)) for f in self.milestones]

    def lr_at(self, step: int) -> float:
        k = sum(step >= m for m in self.milestone_steps())
        return self.lr * self.lr_decay ** k


def init_model_store(rng: np.random.Generator, normalization: tuple[np.ndarray, np.ndarray],
                     variant: str = "v1", dtype=np.float32) -> ParameterStore:
    """Fresh parameter store: normalization constants, extractor, TransformNet."""
    store = ParameterStore()
    mean, std = normalization
    store.add("norm.mean", np.asarray(mean, dtype=dtype), trainable=False)
    store.add("norm.std", np.asarray(std, dtype=dtype), trainable=False)
    init_extractor_params(store, rng, dtype=dtype)
    head.init_transform_net_params(store, variant, rng, dtype=dtype)
    return store


# ---------------------------------------------------------------------------
# batches


@dataclass
class PatchSample:
    image: np.ndarray       # (3, P, P) float
    boxes: np.ndarray       # (n, 4) patch pixels, clipped
    class_ids: np.ndarray   # (n,)
    difficult: np.ndarray   # (n,) bool; includes crop-truncated objects


@dataclass
class TrainBatch:
    patches: list[PatchSample]
    class_ids: list[int]


class _ImageCache:
    def __init__(self):
        self._data: dict[str, np.ndarray] = {}

    def get(self, record) -> np.ndarray:
        if record.name not in self._data:
            self._data[record.name] = record.load_image()
        return self._data[record.name]


def sample_patch(record, image: np.ndarray, dataset_scale: int, cfg: TrainConfig,
                 rng: np.random.Generator, pad_value: np.ndarray) -> PatchSample:
    """One random-scale random crop of a scene with adjusted annotations.

    Scale is uniform in [crop_scale_min, crop_scale_max] times the factor that
    maps the scene to its dataset scale.  The crop origin is uniform among
    positions keeping some object's center inside when possible.  Objects
    with under half their area inside the crop are marked difficult (kept for
    negative-veto purposes, never positives).
    """
    p = cfg.patch_size
    base = dataset_scale / max(record.width, record.height)
    s = rng.uniform(cfg.crop_scale_min, cfg.crop_scale_max) * base
    rw = max(int(round(record.width * s)), 16)
    rh = max(int(round(record.height * s)), 16)
    resized = evalkit.resize_image(image, rh, rw)
    sx = rw / record.width
    sy = rh / record.height
    boxes = record.boxes() * np.array([sx, sy, sx, sy])

    def origin_range(c, limit):
        lo, hi = int(np.ceil(c - p)) + 1, int(np.floor(c)) - 1
        return max(lo, 0), min(hi, max(limit - p, 0))

    ox = oy = 0
    if boxes.shape[0]:
        order = rng.permutation(boxes.shape[0])
        for j in order:
            cx = (boxes[j, 0] + boxes[j, 2]) / 2
            cy = (boxes[j, 1] + boxes[j, 3]) / 2
            x_lo, x_hi = origin_range(cx, rw)
            y_lo, y_hi = origin_range(cy, rh)
            if x_lo <= x_hi and y_lo <= y_hi:
                ox = int(rng.integers(x_lo, x_hi + 1))
                oy = int(rng.integers(y_lo, y_hi + 1))
                break
        else:
            ox = int(rng.integers(0, max(rw - p, 0) + 1))
            oy = int(rng.integers(0, max(rh - p, 0) + 1))
    patch = np.empty((3, p, p), dtype=image.dtype)
    patch[:] = pad_value.reshape(3, 1, 1)
    cw = min(p, rw - ox)
    ch = min(p, rh - oy)
    patch[:, :ch, :cw] = resized[:, oy:oy + ch, ox:ox + cw]

    kept_boxes, kept_cids, kept_diff = [], [], []
    for j in range(boxes.shape[0]):
        b = boxes[j] - np.array([ox, oy, ox, oy])
        clipped = geometry.clip_boxes(b.reshape(1, 4), p, p)[0]
        inside = geometry.box_area(clipped.reshape(1, 4))[0]
        full = geometry.box_area(b.reshape(1, 4))[0]
        if full <= 0 or inside <= 0:
            continue
        truncated = inside / full < 0.5
        kept_boxes.append(clipped)
        kept_cids.append(record.objects[j].class_id)
        kept_diff.append(bool(record.objects[j].difficult or truncated))
    return PatchSample(
        image=patch,
        boxes=np.array(kept_boxes).reshape(-1, 4),
        class_ids=np.array(kept_cids, dtype=np.int64),
        difficult=np.array(kept_diff, dtype=bool),
    )


def build_batch(records: list, class_pool: list[int], dataset_scale: int,
                cfg: TrainConfig, rng: np.random.Generator,
                cache: _ImageCache, pad_value: np.ndarray) -> TrainBatch:
    """Sample batch_size patches and assemble the shared class list."""
    patches = []
    for _ in range(cfg.batch_size):
        record = records[int(rng.integers(len(records)))]
        patches.append(sample_patch(record, cache.get(record), dataset_scale, cfg,
                                    rng, pad_value))
    annotated: list[int] = []
    for patch in patches:
        for cid in patch.class_ids:
            if int(cid) not in annotated:
                annotated.append(int(cid))
    if len(annotated) > cfg.max_labels:
        keep = rng.permutation(len(annotated))[:cfg.max_labels]
        class_ids = [annotated[i] for i in sorted(keep)]
    else:
        class_ids = list(annotated)
        extras = [c for c in class_pool if c not in class_ids]
        rng.shuffle(extras)
        class_ids.extend(extras[:cfg.max_labels - len(class_ids)])
    return TrainBatch(patches=patches, class_ids=class_ids)


# ---------------------------------------------------------------------------
# the step


@dataclass
class StepReport:
    loss: losses.LossReport
    n_pos_pairs: int = 0
    n_neg_pairs: int = 0
    remap_pos_ious: np.ndarray = field(default_factory=lambda: np.zeros(0))


def _negative_pair_scores(fmap, class_feats: Tensor, store, variant, bn_training,
                          stride: float) -> tuple[Tensor, np.ndarray]:
    """Scores with transforms computed off-tape: gradients reach features only.

    class_feats is a (B, d, 15, 15) class stack.  Returns scores (B, hA, wA)
    and decoded boxes (B, hA*wA, 4); the boxes carry no gradient and exist so
    difficult objects can still veto nearby negatives in remap assignment.
    """
    c = head.correlate(fmap, class_feats)
    with no_grad():
        raw = head.transform_net(c, store, variant, bn_training=bn_training,
                                 update_running=bn_training)
        fieldv = head.to_global_transforms(raw, variant)
        gy, gx = head.alignment_grid(fieldv)
        boxes = head.extract_boxes(gy, gx, stride).data.reshape(c.shape[0], -1, 4)
    scores = head.pool_scores(head.resample_scores(c, gy, gx))
    return scores, boxes


def training_step(store: ParameterStore, batch: TrainBatch, cfg: TrainConfig,
                  class_images: dict[int, np.ndarray]) -> tuple[Tensor, StepReport]:
    """Forward and loss for one batch; returns (loss tensor, report).

    Class features are computed once per batch through the live graph (the
    Siamese branches share parameters, so the exemplar side trains too).  Per
    patch, classes split into one stacked positive-head call and one stacked
    negative call so the wide TransformNet convolutions run batched.
    """
    bn_tnet = cfg.variant == "v1"
    class_feats = {}
    for cid in batch.class_ids:
        img = class_images[cid]
        class_feats[cid] = resize_class_features(extract_features(img, store))

    pairs: list[losses.PairTerms] = []
    report = StepReport(loss=losses.LossReport())
    remap_ious: list[np.ndarray] = []
    for patch in batch.patches:
        fmap = extract_features(patch.image, store)
        ha, wa = fmap.values.shape[-2:]
        anchors = geometry.anchor_boxes(ha, wa, float(FEATURE_STRIDE))
        pos_cids = [cid for cid in batch.class_ids
                    if bool(((patch.class_ids == cid) & ~patch.difficult).any())]
        neg_cids = [cid for cid in batch.class_ids if cid not in pos_cids]

        if neg_cids:
            # No trainable positives; transforms stay off-tape.  Difficult
            # instances of a class (if any) still veto nearby negatives.
            feats = stack([class_feats[c].values for c in neg_cids], axis=0)
            neg, dec = _negative_pair_scores(fmap, feats, store, cfg.variant,
                                             bn_tnet, float(FEATURE_STRIDE))
            for j, cid in enumerate(neg_cids):
                of_class = patch.class_ids == cid
                gts = patch.boxes[of_class]
                diff = patch.difficult[of_class]
                flat = neg[j].reshape(ha * wa)
                if gts.shape[0]:
                    cand = dec[j] if cfg.remap else anchors
                    clip = None if cfg.remap else (cfg.patch_size, cfg.patch_size)
                    asg = losses.assign_targets(cand, gts, diff,
                                                "remap" if cfg.remap else "loc", clip_to=clip)
                    keep = asg.negative_indices
                    pairs.append(losses.PairTerms(neg_scores=flat[keep] if keep.size else None))
                else:
                    pairs.append(losses.PairTerms(neg_scores=flat))
                report.n_neg_pairs += 1

        if not pos_cids:
            continue
        feats = stack([class_feats[c].values for c in pos_cids], axis=0)
        out = head.forward_head(fmap, feats, store, variant=cfg.variant,
                                bn_training=bn_tnet, update_running=bn_tnet,
                                with_detached_scores=True)
        for j, cid in enumerate(pos_cids):
            of_class = patch.class_ids == cid
            gts = patch.boxes[of_class]
            diff = patch.difficult[of_class]
            report.n_pos_pairs += 1
            loc_asg = losses.assign_targets(anchors, gts, diff, "loc",
                                            clip_to=(cfg.patch_size, cfg.patch_size))
            if cfg.remap:
                decoded = out.boxes.data[j].reshape(-1, 4)
                rec_asg = losses.assign_targets(decoded, gts, diff, "remap")
                pos_idx = rec_asg.positive_indices
                if pos_idx.size:
                    matched = gts[rec_asg.matched_gt[pos_idx]]
                    m = geometry.iou(decoded[pos_idx], matched)
                    remap_ious.append(m[np.arange(pos_idx.size), np.arange(pos_idx.size)])
            else:
                rec_asg = loc_asg

            terms = losses.PairTerms()
            flat_scores = out.scores[j].reshape(ha * wa)
            flat_detached = out.scores_detached_tf[j].reshape(ha * wa)
            pos_idx = rec_asg.positive_indices
            neg_idx = rec_asg.negative_indices
            if pos_idx.size:
                terms.pos_scores = flat_scores[pos_idx]
            if neg_idx.size:
                terms.neg_scores = flat_detached[neg_idx]

            loc_pos = loc_asg.positive_indices
            nondegenerate = ~out.field.degenerate[j].reshape(-1)
            loc_pos = loc_pos[nondegenerate[loc_pos]]
            if cfg.loc_weight != 0.0 and loc_pos.size:
                pred = out.boxes[j].reshape(ha * wa, 4)[loc_pos]
                terms.loc_pred_enc = losses.encode_boxes_t(pred, anchors[loc_pos])
                terms.loc_target_enc = geometry.encode_boxes(
                    gts[loc_asg.matched_gt[loc_pos]], anchors[loc_pos])
            pairs.append(terms)

    loss, loss_report = losses.total_loss(pairs, cfg.loss_type, cfg.resolved_m_pos,
                                          cfg.m_neg, cfg.loc_weight)
    report.loss = loss_report
    if remap_ious:
        report.remap_pos_ious = np.concatenate(remap_ious)
    return loss, report


class SGD:
    """Classic momentum SGD with decoupled-from-nothing L2 weight decay.

    v <- momentum * v + (g + wd * w);  w <- w - lr * v.  Non-finite gradients
    abort with the offending parameter named.
    """

    def __init__(self, store: ParameterStore, momentum: float, weight_decay: float):
        self.store = store
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.velocity: dict[str, np.ndarray] = {}

    def step(self, lr: float) -> None:
        for name, tensor in self.store.trainable_items():
            g = tensor.grad
            if g is None:
                continue
            if not np.all(np.isfinite(g)):
                raise FloatingPointError(f"non-finite gradient in {name}")
            g = g + self.weight_decay * tensor.data
            v = self.velocity.get(name)
            if v is None:
                v = np.zeros_like(tensor.data)
                self.velocity[name] = v
            v *= self.momentum
            v += g
            tensor.data -= (lr * v).astype(tensor.data.dtype, copy=False)


def sgd_step(store: ParameterStore, cfg: TrainConfig, step_index: int,
             state: SGD | None = None) -> SGD:
    """One optimizer step at the scheduled learning rate; returns the SGD state."""
    if state is None:
        state = SGD(store, cfg.momentum, cfg.weight_decay)
    state.step(cfg.lr_at(step_index))
    return state


# ---------------------------------------------------------------------------
# the loop


@dataclass
class TrainResult:
    out_dir: Path
    best_map: float
    best_step: int
    final_map: float
    metrics: list[tuple[int, float, float]]
    init_path: Path
    best_path: Path
    final_path: Path


def _quick_val(store: ParameterStore, dataset: Dataset, cfg: TrainConfig,
               class_images: dict[int, np.ndarray]) -> float:
    records = dataset.splits["val_new"][:cfg.val_images]
    ecfg = evalkit.EvalConfig(dataset_scale=dataset.dataset_scale,
                              pyramid_levels=(cfg.val_level,), variant=cfg.variant)
    result, _ = evalkit.evaluate_dataset(records, class_images, store, ecfg, mode="head")
    return result.map


def _save_ckpt(store: ParameterStore, path: Path, cfg: TrainConfig, step: int,
               val_map: float, dataset_scale: int) -> None:
    store.extra["train_meta"] = {"config": configmod.dataclass_to_flat(cfg),
                                 "step": step, "val_map": val_map,
                                 "dataset_scale": dataset_scale}
    store.save(path)


def train(dataset: Dataset, cfg: TrainConfig, out_dir) -> TrainResult:
    """Full training run; writes checkpoints, metrics.log, and config.txt."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.txt").write_text(configmod.format_flat(configmod.dataclass_to_flat(cfg)))
    dtype = DTYPES[cfg.dtype]

    records = dataset.splits["train"]
    if not records:
        raise ValueError("dataset has no training records")
    class_pool = dataset.train_class_ids
    rng_init = np.random.default_rng(np.random.SeedSequence((cfg.seed, 100)))
    store = init_model_store(rng_init, dataset.normalization, cfg.variant, dtype)
    class_raw = {cid: dataset.class_image(cid).astype(dtype) for cid in dataset.classes}
    # standard-size exemplars for the train-time Siamese branch (eval resizes
    # internally from the raw images, including rotations)
    class_images = {cid: resize_class_image(img) for cid, img in class_raw.items()}

    cache = _ImageCache()
    pad_value = dataset.normalization[0].astype(dtype)

    warm_rng = np.random.default_rng(np.random.SeedSequence((cfg.seed, 101)))
    warm = []
    while len(warm) < cfg.warmup_patches:
        batch = build_batch(records, class_pool, dataset.dataset_scale, cfg, warm_rng,
                            cache, pad_value)
        warm.extend(p.image.astype(dtype) for p in batch.patches)
    warmup_extractor_stats(store, warm[:cfg.warmup_patches])

    val_classes = {cid: class_raw[cid] for cid in dataset.unseen_class_ids}
    metrics: list[tuple[int, float, float]] = []
    log_path = out / "metrics.log"
    log = open(log_path, "w")

    def log_point(step: int, loss_value: float, val_map: float) -> None:
        metrics.append((step, loss_value, val_map))
        log.write(f"{step}\t{loss_value!r}\t{val_map!r}\n")
        log.flush()

    init_path = out / "ckpt_init.bin"
    best_path = out / "ckpt_best.bin"
    final_path = out / "ckpt_final.bin"

    map0 = _quick_val(store, dataset, cfg, val_classes)
    _save_ckpt(store, init_path, cfg, 0, map0, dataset.dataset_scale)
    _save_ckpt(store, best_path, cfg, 0, map0, dataset.dataset_scale)
    best_map, best_step = map0, 0

    optimizer = SGD(store, cfg.momentum, cfg.weight_decay)
    batch_rng = np.random.default_rng(np.random.SeedSequence((cfg.seed, 102)))
    loss_value = float("nan")
    t0 = time.time()
    for step in range(cfg.steps):
        batch = build_batch(records, class_pool, dataset.dataset_scale, cfg, batch_rng,
                            cache, pad_value)
        store.zero_grads()
        loss, _ = training_step(store, batch, cfg, class_images)
        loss.backward()
        optimizer.step(cfg.lr_at(step))
        loss_value = float(loss.data)
        if step == 0:
            log_point(0, loss_value, map0)
        if (step + 1) % cfg.val_every == 0 or step + 1 == cfg.steps:
            val_map = _quick_val(store, dataset, cfg, val_classes)
            log_point(step + 1, loss_value, val_map)
            if val_map > best_map:
                best_map, best_step = val_map, step + 1
                _save_ckpt(store, best_path, cfg, step + 1, val_map, dataset.dataset_scale)
    if cfg.steps == 0:
        log_point(0, 0.0, map0)
    final_map = metrics[-1][2]
    _save_ckpt(store, final_path, cfg, cfg.steps, final_map, dataset.dataset_scale)
    log.close()
    elapsed = time.time() - t0
    (out / "run.txt").write_text(
        f"steps={cfg.steps}\nelapsed_sec={elapsed:.1f}\nbest_map={best_map!r}\n"
        f"best_step={best_step}\nfinal_map={final_map!r}\n")
    return TrainResult(out_dir=out, best_map=best_map, best_step=best_step,
                       final_map=final_map, metrics=metrics, init_path=init_path,
                       best_path=best_path, final_path=final_path)


def load_model(path) -> tuple[ParameterStore, dict]:
    """Load a checkpoint; returns (store, training metadata)."""
    store = ParameterStore.load(path)
    return store, store.extra.get("train_meta", {})
