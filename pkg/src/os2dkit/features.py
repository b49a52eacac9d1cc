"""Siamese local-feature extraction and class-feature resizing.

One convolutional extractor serves both the input image and the class
exemplar; both branches read the same ParameterStore entries, which is the
property the correlation head relies on.  The extractor is four 3x3
conv + BN + ReLU blocks with strides 1, 2, 2, 2, so feature cells are 8 image
pixels apart and the map size scales linearly with the image.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .diffengine import Tensor, batchnorm, bilinear_sample_planes, conv2d, no_grad
from .diffengine.store import ParameterStore

FEATURE_STRIDE = 8
FEATURE_DIM = 32
# Class exemplars are resized (AR-preserving) to roughly this pixel area: the
# square of the 15-cell matching window span at the feature stride.
CLASS_IMAGE_AREA = float((15 * FEATURE_STRIDE) ** 2)

# (out_channels, stride) per conv block; kernels are all 3x3 with padding 1.
_EXTRACTOR_LAYERS = ((16, 1), (32, 2), (32, 2), (FEATURE_DIM, 2))


@dataclass
class FeatureMap:
    values: Tensor  # (d, H, W) or (N, d, H, W)
    stride: int = FEATURE_STRIDE

    @property
    def d(self) -> int:
        return self.values.shape[-3]


@dataclass
class ResizedClassFeatures:
    values: Tensor  # (d, rows, cols)
    source_aspect_ratio: float = 1.0  # source height / width


def init_extractor_params(store: ParameterStore, rng: np.random.Generator, dtype=np.float64) -> None:
    cin = 3
    for i, (cout, _) in enumerate(_EXTRACTOR_LAYERS, start=1):
        fan_in = cin * 9
        w = rng.standard_normal((cout, cin, 3, 3)) * np.sqrt(2.0 / fan_in)
        store.add(f"extractor.conv{i}.weight", w.astype(dtype))
        store.add(f"extractor.bn{i}.gamma", np.ones(cout, dtype=dtype))
        store.add(f"extractor.bn{i}.beta", np.zeros(cout, dtype=dtype))
        store.add(f"extractor.bn{i}.running_mean", np.zeros(cout, dtype=dtype), trainable=False)
        store.add(f"extractor.bn{i}.running_var", np.ones(cout, dtype=dtype), trainable=False)
        cin = cout


def extract_features(image, store: ParameterStore, bn_training: bool = False,
                     update_running: bool = False) -> FeatureMap:
    """Run the extractor on an RGB image in [0, 1], shape (3,H,W) or (N,3,H,W).

    Channel normalization constants are read from the store ("norm.mean",
    "norm.std"), so the same checkpoint always reproduces the same features.
    BN runs in eval mode by default; bn_training is only used by the
    statistics warm-up.  Images smaller than 2 * stride per side are rejected.
    """
    x = image if isinstance(image, Tensor) else Tensor(np.asarray(image))
    h, w = x.shape[-2], x.shape[-1]
    if h < 2 * FEATURE_STRIDE or w < 2 * FEATURE_STRIDE:
        raise ValueError(f"image {h}x{w} too small; each side must be >= {2 * FEATURE_STRIDE}")
    cshape = (3, 1, 1) if x.ndim == 3 else (1, 3, 1, 1)
    mean = store.get("norm.mean").reshape(*cshape)
    std = store.get("norm.std").reshape(*cshape)
    x = (x - mean) / std
    for i, (_, stride) in enumerate(_EXTRACTOR_LAYERS, start=1):
        x = conv2d(x, store.get(f"extractor.conv{i}.weight"), stride=stride, padding=1)
        x = batchnorm(x, store.get(f"extractor.bn{i}.gamma"), store.get(f"extractor.bn{i}.beta"),
                      store.get(f"extractor.bn{i}.running_mean"), store.get(f"extractor.bn{i}.running_var"),
                      training=bn_training, update_running=update_running)
        x = x.relu()
    return FeatureMap(values=x, stride=FEATURE_STRIDE)


def warmup_extractor_stats(store: ParameterStore, patches) -> None:
    """One pass of training-mode BN over sample patches to seed running statistics.

    Afterward the extractor is always used with BN in eval mode.
    """
    with no_grad():
        for patch in patches:
            extract_features(patch, store, bn_training=True, update_running=True)


def resize_feature_map(values: Tensor, rows: int, cols: int) -> Tensor:
    """Bilinearly resample a (d, h, w) feature map to (d, rows, cols).

    Uses the align-corners mapping src = dst * (size - 1) / (target - 1), so a
    map already at the target size passes through unchanged and gradients flow
    back to the source map.
    """
    d, h, w = values.shape
    sy = (h - 1) / (rows - 1)
    sx = (w - 1) / (cols - 1)
    ys_row = np.arange(rows, dtype=values.data.dtype) * values.data.dtype.type(sy)
    xs_row = np.arange(cols, dtype=values.data.dtype) * values.data.dtype.type(sx)
    yy, xx = np.meshgrid(ys_row, xs_row, indexing="ij")
    ys = Tensor(np.tile(yy.reshape(1, -1), (d, 1)))
    xs = Tensor(np.tile(xx.reshape(1, -1), (d, 1)))
    return bilinear_sample_planes(values, ys, xs).reshape(d, rows, cols)


def resize_class_features(f: FeatureMap, rows: int = 15, cols: int = 15) -> ResizedClassFeatures:
    """Resize extracted class features to the fixed alignment size (15x15)."""
    values = f.values if isinstance(f, FeatureMap) else f
    d, h, w = values.shape
    if (h, w) == (rows, cols):
        resized = values
    else:
        resized = resize_feature_map(values, rows, cols)
    return ResizedClassFeatures(values=resized, source_aspect_ratio=h / w)


def rotate_class_image(image: np.ndarray, k: int) -> np.ndarray:
    """Rotate an image by k in {0, 90, 180, 270} degrees over its last two axes.

    Works on (H, W) and channel-first (C, H, W) layouts.  Rotation is
    counterclockwise and exact (pure index permutation).
    """
    if k not in (0, 90, 180, 270):
        raise ValueError("rotation must be one of 0, 90, 180, 270")
    return np.ascontiguousarray(np.rot90(np.asarray(image), k // 90, axes=(-2, -1)))


def resize_class_image(image: np.ndarray, target_area: float = CLASS_IMAGE_AREA) -> np.ndarray:
    """Resize a (3, h, w) class image so h*w is close to target_area, keeping AR.

    The target area is the square of the matching-window span (15 cells at
    stride 8 = 120 px), so class objects and the head's anchor window agree in
    scale at pyramid level 1.0.  Sides are floored at 16 px (the extractor
    minimum).
    """
    c, h, w = image.shape
    ar = w / h
    nh = max(int(round(np.sqrt(target_area / ar))), 16)
    nw = max(int(round(np.sqrt(target_area * ar))), 16)
    if (nh, nw) == (h, w):
        return np.asarray(image)
    with no_grad():
        return resize_feature_map(Tensor(np.ascontiguousarray(image)), nh, nw).data
