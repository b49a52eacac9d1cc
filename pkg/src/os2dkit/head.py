"""Detection head: correlation, transform regression, grid resampling, scoring.

Pipeline per (input image, class) pair, all differentiable end to end:

1. correlate: cosine similarities between every input-feature cell and every
   cell of the 15x15 resized class features -> 4D tensor c[k, l, p, q].
2. transform_net: a small conv net applied fully convolutionally over c
   (reshaped to 225 channels) regresses per-location transform parameters.
3. to_global_transforms / alignment_grid: local parameters become per-location
   affine maps in input-feature coordinates and a 15x15 grid of match points.
4. resample_scores: each (p, q) channel of c is bilinearly resampled at its
   own grid points; pool_scores averages the grid interior into one score per
   location; extract_boxes takes the min/max envelope of the grid as the box.

Transforms are stored in "lattice units": the canonical alignment lattice is
the integer range -7..7 in feature cells, and a transform maps lattice
coordinates to global feature-cell coordinates.  The identity transform at
location (k, l) covers the window centered there, g[k,l,p,q] = (k+p-7, l+q-7).
Those grids are exactly integer, so with V1's identity initialization the
bilinear resampling is an exact gather and the head coincides bitwise with
plain sliding-window correlation averaging (the "square" baseline).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .diffengine import Tensor, channelwise_l2_normalize, conv2d, batchnorm
from .diffengine.ops import bilinear_sample_planes
from .diffengine.store import ParameterStore
from .features import FeatureMap, ResizedClassFeatures

HT = 15
WT = 15
LATTICE = np.arange(HT, dtype=np.float64) - (HT - 1) / 2.0  # integers -7..7
# Degenerate-transform threshold on |det| of the local 2x2 block.
DEGENERATE_DET_EPS = 1e-6

_P = {"v1": 4, "v2": 6}


def _values(x) -> Tensor:
    if isinstance(x, FeatureMap) or isinstance(x, ResizedClassFeatures):
        return x.values
    return x


def correlate(input_f, class_f) -> Tensor:
    """Correlation tensor of cosine similarities.

    input_f: (d, hA, wA); class_f: (d, 15, 15) for one class or (C, d, 15, 15)
    for a class batch.  Returns (hA, wA, 15, 15) or (C, hA, wA, 15, 15).
    Feature columns with near-zero norm correlate to 0.
    """
    fi = _values(input_f)
    fc = _values(class_f)
    squeeze = fc.ndim == 3
    if squeeze:
        fc = fc.reshape(1, *fc.shape)
    d, ha, wa = fi.shape
    cN, dc, ht, wt = fc.shape
    if d != dc:
        raise ValueError(f"correlate: channel mismatch {d} vs {dc}")
    ni = channelwise_l2_normalize(fi)
    nc = channelwise_l2_normalize(fc)
    a = ni.reshape(d, ha * wa).transpose(1, 0)
    b = nc.transpose(1, 0, 2, 3).reshape(d, cN * ht * wt)
    c = (a @ b).reshape(ha, wa, cN, ht * wt).transpose(2, 0, 1, 3).reshape(cN, ha, wa, ht, wt)
    return c.reshape(ha, wa, ht, wt) if squeeze else c


def init_transform_net_params(store: ParameterStore, variant: str,
                              rng: np.random.Generator, dtype=np.float64) -> None:
    """He-initialized conv stack with the last layer forced to the identity transform."""
    p = _P[variant]
    specs = [("conv1", 128, HT * WT, 7), ("conv2", 64, 128, 5)]
    for name, cout, cin, k in specs:
        fan_in = cin * k * k
        w = rng.standard_normal((cout, cin, k, k)) * np.sqrt(2.0 / fan_in)
        store.add(f"tnet.{name}.weight", w.astype(dtype))
        bn = name.replace("conv", "bn")
        store.add(f"tnet.{bn}.gamma", np.ones(cout, dtype=dtype))
        store.add(f"tnet.{bn}.beta", np.zeros(cout, dtype=dtype))
        store.add(f"tnet.{bn}.running_mean", np.zeros(cout, dtype=dtype), trainable=False)
        store.add(f"tnet.{bn}.running_var", np.ones(cout, dtype=dtype), trainable=False)
    store.add("tnet.conv3.weight", np.zeros((p, 64, 5, 5), dtype=dtype))
    bias = np.zeros(p, dtype=dtype)
    if variant == "v2":
        bias[:] = (1.0, 0.0, 0.0, 0.0, 1.0, 0.0)
    store.add("tnet.conv3.bias", bias)


def transform_net(c: Tensor, store: ParameterStore, variant: str,
                  bn_training: bool = False, update_running: bool = False) -> Tensor:
    """Regress raw transform parameters from the correlation tensor.

    c: (hA, wA, 15, 15) or (B, hA, wA, 15, 15).  Returns (P, hA, wA) or
    (B, P, hA, wA).  The 4D tensor is reshaped to 225 channels (channel index
    p * 15 + q) and passed through ReLU, channelwise L2 normalization, and
    three convolutions.  The correlation field is zero-padded by 7 = 3 + 2 + 2
    once up front and the convolutions run unpadded, so the value at (k, l)
    equals running the plain 15x15-window TransformNet centered there.
    """
    squeeze = c.ndim == 4
    if squeeze:
        c = c.reshape(1, *c.shape)
    b, ha, wa, ht, wt = c.shape
    x = c.reshape(b, ha, wa, ht * wt).transpose(0, 3, 1, 2)
    x = x.relu()
    x = channelwise_l2_normalize(x)

    def bn(x, name, cname=None):
        return batchnorm(x, store.get(f"tnet.{name}.gamma"), store.get(f"tnet.{name}.beta"),
                         store.get(f"tnet.{name}.running_mean"), store.get(f"tnet.{name}.running_var"),
                         training=bn_training, update_running=update_running)

    x = conv2d(x, store.get("tnet.conv1.weight"), padding=7)
    x = bn(x, "bn1").relu()
    x = conv2d(x, store.get("tnet.conv2.weight"), padding=0)
    x = bn(x, "bn2").relu()
    x = conv2d(x, store.get("tnet.conv3.weight"), store.get("tnet.conv3.bias"), padding=0)
    return x.reshape(x.shape[1:]) if squeeze else x


@dataclass
class TransformField:
    """Per-location global affine transforms in lattice units.

    Grid point (p, q) of location (k, l) lands at
        x = c11 * LATTICE[q] + c12 * LATTICE[p] + ctx
        y = c21 * LATTICE[q] + c22 * LATTICE[p] + cty
    in input-feature-cell coordinates.  Components have shape (B, hA, wA).
    degenerate marks locations where the raw V2 transform was not invertible;
    those fall back to the identity and are excluded from localization terms.
    """
    c11: Tensor
    c12: Tensor
    ctx: Tensor
    c21: Tensor
    c22: Tensor
    cty: Tensor
    degenerate: np.ndarray
    variant: str

    @property
    def spatial_shape(self) -> tuple[int, int, int]:
        return self.c11.shape

    def detach(self) -> "TransformField":
        return TransformField(self.c11.detach(), self.c12.detach(), self.ctx.detach(),
                              self.c21.detach(), self.c22.detach(), self.cty.detach(),
                              self.degenerate, self.variant)

    def as_affines(self) -> np.ndarray:
        """Global transforms as (B, hA, wA, 2, 3) numpy affines on (x, y) lattice points."""
        b, ha, wa = self.spatial_shape
        out = np.empty((b, ha, wa, 2, 3), dtype=np.float64)
        out[..., 0, 0] = self.c11.data
        out[..., 0, 1] = self.c12.data
        out[..., 0, 2] = self.ctx.data
        out[..., 1, 0] = self.c21.data
        out[..., 1, 1] = self.c22.data
        out[..., 1, 2] = self.cty.data
        return out


def _cell_index_planes(b: int, ha: int, wa: int, dtype) -> tuple[Tensor, Tensor]:
    ks = Tensor(np.broadcast_to(np.arange(ha, dtype=dtype)[None, :, None], (1, ha, wa)).copy())
    ls = Tensor(np.broadcast_to(np.arange(wa, dtype=dtype)[None, None, :], (1, ha, wa)).copy())
    return ks, ls


def to_global_transforms(raw: Tensor, variant: str) -> TransformField:
    """Decode raw network outputs into per-location global affine transforms.

    V1 raw channels are (tx, ty, log sx, log sy): an axis-aligned scale and a
    translation of up to +-7 cells per unit, already in the input->class-free
    forward direction.  V2 raw channels are a full local affine
    (a11, a12, tx, a21, a22, ty) regressed in the inverse direction, so each
    location's 3x3 homogeneous matrix is inverted; non-invertible locations
    (|det| <= 1e-6) become the identity and are flagged.
    """
    squeeze = raw.ndim == 3
    if squeeze:
        raw = raw.reshape(1, *raw.shape)
    b, p, ha, wa = raw.shape
    dtype = raw.data.dtype
    ks, ls = _cell_index_planes(b, ha, wa, dtype)
    half = dtype.type((HT - 1) / 2.0)
    zeros = Tensor(np.zeros((1, 1, 1), dtype=dtype))

    if variant == "v1":
        if p != 4:
            raise ValueError("v1 expects 4 raw channels")
        sx = raw[:, 2].exp()
        sy = raw[:, 3].exp()
        ctx = ls + half * raw[:, 0]
        cty = ks + half * raw[:, 1]
        degenerate = np.zeros((b, ha, wa), dtype=bool)
        field = TransformField(sx, zeros, ctx, zeros, sy, cty, degenerate, variant)
    elif variant == "v2":
        if p != 6:
            raise ValueError("v2 expects 6 raw channels")
        a11, a12, atx = raw[:, 0], raw[:, 1], raw[:, 2]
        a21, a22, aty = raw[:, 3], raw[:, 4], raw[:, 5]
        det = a11 * a22 - a12 * a21
        degenerate = np.abs(det.data) <= DEGENERATE_DET_EPS
        safe = Tensor.where(degenerate, 1.0, det)
        b11 = a22 / safe
        b12 = -a12 / safe
        b21 = -a21 / safe
        b22 = a11 / safe
        btx = -(b11 * atx + b12 * aty)
        bty = -(b21 * atx + b22 * aty)
        one = Tensor(np.ones((1, 1, 1), dtype=dtype))
        field = TransformField(
            Tensor.where(degenerate, one, b11),
            Tensor.where(degenerate, zeros, b12),
            ls + half * Tensor.where(degenerate, zeros, btx),
            Tensor.where(degenerate, zeros, b21),
            Tensor.where(degenerate, one, b22),
            ks + half * Tensor.where(degenerate, zeros, bty),
            degenerate, variant)
    else:
        raise ValueError(f"unknown variant {variant!r}")
    return field


def alignment_grid(field: TransformField) -> tuple[Tensor, Tensor]:
    """Alignment grids (gy, gx), each (B, hA, wA, 15, 15), in feature cells."""
    b, ha, wa = field.spatial_shape
    dtype = field.c11.data.dtype
    lat = LATTICE.astype(dtype)
    lat_q = Tensor(lat.reshape(1, 1, 1, 1, WT))
    lat_p = Tensor(lat.reshape(1, 1, 1, HT, 1))

    def expand(t: Tensor) -> Tensor:
        if t.shape == (b, ha, wa):
            return t.reshape(b, ha, wa, 1, 1)
        return t.reshape(t.shape + (1, 1))  # broadcast constants

    gx = expand(field.c11) * lat_q + expand(field.c12) * lat_p + expand(field.ctx)
    gy = expand(field.c21) * lat_q + expand(field.c22) * lat_p + expand(field.cty)
    return gy, gx


def resample_scores(c: Tensor, gy: Tensor, gx: Tensor) -> Tensor:
    """Resample every (p, q) channel of c at that channel's own grid points.

    s_hat[k, l, p, q] = c[:, :, p, q] bilinearly sampled at
    (gy[k, l, p, q], gx[k, l, p, q]), with border clamping.  Accepts a leading
    batch axis on all three tensors.
    """
    squeeze = c.ndim == 4
    if squeeze:
        c = c.reshape(1, *c.shape)
        gy = gy.reshape(1, *gy.shape)
        gx = gx.reshape(1, *gx.shape)
    b, ha, wa, ht, wt = c.shape
    planes = c.transpose(0, 3, 4, 1, 2).reshape(b * ht * wt, ha, wa)
    ys = gy.transpose(0, 3, 4, 1, 2).reshape(b * ht * wt, ha * wa)
    xs = gx.transpose(0, 3, 4, 1, 2).reshape(b * ht * wt, ha * wa)
    out = bilinear_sample_planes(planes, ys, xs)
    out = out.reshape(b, ht, wt, ha, wa).transpose(0, 3, 4, 1, 2)
    return out.reshape(ha, wa, ht, wt) if squeeze else out


def pool_scores(s_hat: Tensor) -> Tensor:
    """Average the interior of each grid (boundary ring omitted) into one score."""
    nd = s_hat.ndim
    interior = s_hat[..., 1:HT - 1, 1:WT - 1]
    return interior.mean(axis=(nd - 2, nd - 1))


def extract_boxes(gy: Tensor, gx: Tensor, stride: int) -> Tensor:
    """Per-location box envelope of the alignment grid, in image pixels.

    Returns (..., 4) as [x_min, y_min, x_max, y_max]; cell coordinate v maps
    to pixel (v + 0.5) * stride.  Differentiable through min/max.
    """
    nd = gy.ndim
    axes = (nd - 2, nd - 1)
    half = gy.data.dtype.type(0.5)
    s = gy.data.dtype.type(float(stride))
    x_min = (gx.amin(axis=axes) + half) * s
    y_min = (gy.amin(axis=axes) + half) * s
    x_max = (gx.amax(axis=axes) + half) * s
    y_max = (gy.amax(axis=axes) + half) * s
    from .diffengine.tensor import stack
    return stack([x_min, y_min, x_max, y_max], axis=x_min.ndim)


@dataclass
class HeadOutput:
    scores: Tensor                 # (B, hA, wA) scores through the live transform graph
    scores_detached_tf: Tensor | None  # same scores but with transforms detached
    boxes: Tensor                  # (B, hA, wA, 4) localization boxes, image pixels
    field: TransformField
    gy: Tensor
    gx: Tensor
    c: Tensor                      # correlation tensor (B, hA, wA, 15, 15)
    raw: Tensor


def forward_head(input_f, class_f, store: ParameterStore, variant: str = "v1",
                 bn_training: bool = False, update_running: bool = False,
                 with_detached_scores: bool = False) -> HeadOutput:
    """Full head for one input feature map against one or more classes.

    When with_detached_scores is set, a second score branch is computed with
    the transform field cut off from the tape; training uses it for negative
    anchors so TransformNet learns from positives only while the feature
    extractor still learns from every score.
    """
    fi = _values(input_f)
    fc = _values(class_f)
    stride = input_f.stride if isinstance(input_f, FeatureMap) else 8
    c = correlate(fi, fc)
    squeeze = c.ndim == 4
    cb = c.reshape(1, *c.shape) if squeeze else c
    raw = transform_net(cb, store, variant, bn_training=bn_training, update_running=update_running)
    field = to_global_transforms(raw, variant)
    gy, gx = alignment_grid(field)
    scores = pool_scores(resample_scores(cb, gy, gx))
    detached = None
    if with_detached_scores:
        detached = pool_scores(resample_scores(cb, gy.detach(), gx.detach()))
    boxes = extract_boxes(gy, gx, stride)
    if squeeze:
        scores = scores.reshape(scores.shape[1:])
        boxes = boxes.reshape(boxes.shape[1:])
        if detached is not None:
            detached = detached.reshape(detached.shape[1:])
    return HeadOutput(scores=scores, scores_detached_tf=detached, boxes=boxes,
                      field=field, gy=gy, gx=gx, c=cb, raw=raw)
