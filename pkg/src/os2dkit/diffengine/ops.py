"""Neural-network operations built on the Tensor tape.

conv2d and the bilinear sampler carry hand-written backward passes for speed
and memory control; the remaining operations are compositions of Tensor
primitives and inherit their gradients.
"""

from __future__ import annotations

import numpy as np

from .tensor import Tensor, grad_enabled

BN_EPS = 1e-5
BN_MOMENTUM = 0.1
L2_NORM_EPS = 1e-6

def _pair(v) -> tuple[int, int]:
    if isinstance(v, (tuple, list)):
        return int(v[0]), int(v[1])
    return int(v), int(v)


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None,
           stride=1, padding=0) -> Tensor:
    """2-D cross-correlation. x: (C,H,W) or (N,C,H,W); weight: (Cout,Cin,kh,kw).

    Output spatial size is (H + 2*ph - kh) // sh + 1 per axis.  The input is
    held channels-last and each vertical kernel offset becomes one full-width
    GEMM against a (Cin, kw*Cout) kernel-row matrix; horizontal offsets are
    then gathered out of the result.  Full-width rows waste a few columns but
    the GEMM operands stay contiguous views, which on the wide 225-channel
    layer beats any column-matrix layout by a wide margin.
    """
    squeeze = x.ndim == 3
    xd = x.data[None] if squeeze else x.data
    if xd.ndim != 4 or weight.ndim != 4 or xd.shape[1] != weight.shape[1]:
        raise ValueError(f"conv2d shape mismatch: input {x.shape}, weight {weight.shape}")
    n, cin, h, w = xd.shape
    cout, _, kh, kw = weight.shape
    sh, sw = _pair(stride)
    ph, pw = _pair(padding)
    oh = (h + 2 * ph - kh) // sh + 1
    ow = (w + 2 * pw - kw) // sw + 1
    if oh < 1 or ow < 1:
        raise ValueError("conv2d: kernel larger than padded input")

    if ph or pw:
        xp = np.pad(xd, ((0, 0), (0, 0), (ph, ph), (pw, pw)))
    else:
        xp = xd
    wp = xp.shape[3]
    xcl = np.ascontiguousarray(xp.transpose(0, 2, 3, 1))  # (n, hp, wp, cin)
    w4 = np.ascontiguousarray(weight.data.transpose(1, 2, 3, 0))  # (cin, kh, kw, cout)
    w_rows = [np.ascontiguousarray(w4[:, a]).reshape(cin, kw * cout) for a in range(kh)]

    def _row_block(a: int) -> np.ndarray:
        # all input rows feeding output rows at vertical offset a; a view when
        # sh == 1, a cheap copy otherwise
        return xcl[:, a:a + (oh - 1) * sh + 1:sh].reshape(n, oh * wp, cin)

    out = np.zeros((n, oh, ow, cout), dtype=xd.dtype)
    for a in range(kh):
        res = (_row_block(a) @ w_rows[a]).reshape(n, oh, wp, kw, cout)
        for b in range(kw):
            out += res[:, :, b:b + (ow - 1) * sw + 1:sw, b, :]
    if bias is not None:
        out += bias.data
    out = np.ascontiguousarray(out.transpose(0, 3, 1, 2))
    out_data = out[0] if squeeze else out

    parents = [x, weight] if bias is None else [x, weight, bias]

    def backward(g: np.ndarray) -> None:
        gd = g[None] if squeeze else g
        if bias is not None and bias.requires_grad:
            bias._accumulate(gd.sum(axis=(0, 2, 3)))
        need_x = x.requires_grad
        need_w = weight.requires_grad
        if not (need_x or need_w):
            return
        gcl = np.ascontiguousarray(gd.transpose(0, 2, 3, 1))  # (n, oh, ow, cout)
        dres = np.zeros((n, oh, wp, kw, cout), dtype=xd.dtype)
        dw4 = np.zeros_like(w4) if need_w else None
        dxcl = np.zeros_like(xcl) if need_x else None
        for a in range(kh):
            dres.fill(0)
            for b in range(kw):
                dres[:, :, b:b + (ow - 1) * sw + 1:sw, b, :] = gcl
            dmat = dres.reshape(n, oh * wp, kw * cout)
            if need_w:
                acc = _row_block(a).reshape(n * oh * wp, cin).T @ \
                    dmat.reshape(n * oh * wp, kw * cout)
                dw4[:, a] += acc.reshape(cin, kw, cout)
            if need_x:
                dxcl[:, a:a + (oh - 1) * sh + 1:sh] += \
                    (dmat @ w_rows[a].T).reshape(n, oh, wp, cin)
        if need_w:
            weight._accumulate(dw4.transpose(3, 0, 1, 2))
        if need_x:
            dxp = dxcl.transpose(0, 3, 1, 2)
            dx = dxp[:, :, ph:ph + h, pw:pw + w] if (ph or pw) else dxp
            x._accumulate(np.ascontiguousarray(dx[0] if squeeze else dx))

    return Tensor._result(out_data, parents, backward)


def batchnorm(x: Tensor, gamma: Tensor, beta: Tensor,
              running_mean: Tensor, running_var: Tensor,
              training: bool, momentum: float = BN_MOMENTUM, eps: float = BN_EPS,
              update_running: bool = True) -> Tensor:
    """Batch normalization over the channel axis of (C,H,W) or (N,C,H,W) input.

    Train mode normalizes with biased batch statistics and, when
    update_running is set, folds unbiased statistics into the running buffers
    in place.  Eval mode is a pure affine map from the running buffers.
    """
    squeeze = x.ndim == 3
    xd = x.data[None] if squeeze else x.data
    n, c, h, w = xd.shape
    axes = (0, 2, 3)
    gshape = (1, c, 1, 1)

    if training:
        mu = xd.mean(axis=axes)
        var = xd.var(axis=axes)
        inv_std = 1.0 / np.sqrt(var + eps)
        xhat = (xd - mu.reshape(gshape)) * inv_std.reshape(gshape)
        if update_running:
            count = n * h * w
            unbiased = var * (count / max(1, count - 1))
            running_mean.data[...] = (1 - momentum) * running_mean.data + momentum * mu
            running_var.data[...] = (1 - momentum) * running_var.data + momentum * unbiased
    else:
        inv_std = 1.0 / np.sqrt(running_var.data + eps)
        xhat = (xd - running_mean.data.reshape(gshape)) * inv_std.reshape(gshape)

    out = gamma.data.reshape(gshape) * xhat + beta.data.reshape(gshape)
    out_data = out[0] if squeeze else out

    def backward(g: np.ndarray) -> None:
        gd = g[None] if squeeze else g
        if gamma.requires_grad:
            gamma._accumulate((gd * xhat).sum(axis=axes))
        if beta.requires_grad:
            beta._accumulate(gd.sum(axis=axes))
        if x.requires_grad:
            dxhat = gd * gamma.data.reshape(gshape)
            if training:
                m1 = dxhat.mean(axis=axes, keepdims=True)
                m2 = (dxhat * xhat).mean(axis=axes, keepdims=True)
                dx = (dxhat - m1 - xhat * m2) * inv_std.reshape(gshape)
            else:
                dx = dxhat * inv_std.reshape(gshape)
            x._accumulate(dx[0] if squeeze else dx)

    return Tensor._result(out_data, (x, gamma, beta), backward)


def channelwise_l2_normalize(x: Tensor, eps: float = L2_NORM_EPS) -> Tensor:
    """Scale every spatial column to unit L2 norm along the channel axis.

    Columns with norm below eps are divided by eps instead, so zero columns
    stay zero and gradients stay finite.  Channel axis is 0 for 3-D input and
    1 for 4-D input.
    """
    axis = 0 if x.ndim == 3 else 1
    sq = (x * x).sum(axis=axis, keepdims=True)
    denom = sq.maximum(eps * eps).sqrt()
    return x / denom


def bilinear_sample_planes(planes: Tensor, ys: Tensor, xs: Tensor) -> Tensor:
    """Sample each plane at its own points: (M,H,W) x (M,K) x (M,K) -> (M,K).

    Coordinates are in cell units and are clamped to the valid square
    [0, H-1] x [0, W-1] before interpolation (border clamping, no zero halo).
    Gradients flow to the planes and, inside the valid square, to the
    coordinates; the clamp zeroes coordinate gradients beyond the border.
    """
    m, h, w = planes.shape
    if ys.shape != xs.shape or ys.shape[0] != m:
        raise ValueError("bilinear_sample_planes: shape mismatch")
    k = ys.shape[1]
    dtype = planes.data.dtype

    yc = np.clip(ys.data, 0.0, h - 1.0)
    xc = np.clip(xs.data, 0.0, w - 1.0)
    y0 = np.clip(np.floor(yc), 0, h - 2).astype(np.int64) if h > 1 else np.zeros_like(yc, dtype=np.int64)
    x0 = np.clip(np.floor(xc), 0, w - 2).astype(np.int64) if w > 1 else np.zeros_like(xc, dtype=np.int64)
    dy = (yc - y0).astype(dtype)
    dx = (xc - x0).astype(dtype)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)

    pm = np.arange(m, dtype=np.int64)[:, None]
    pd = planes.data
    v00 = pd[pm, y0, x0]
    v01 = pd[pm, y0, x1]
    v10 = pd[pm, y1, x0]
    v11 = pd[pm, y1, x1]
    wy1 = dy
    wy0 = 1.0 - dy
    wx1 = dx
    wx0 = 1.0 - dx
    out = (wy0 * wx0 * v00 + wy0 * wx1 * v01 + wy1 * wx0 * v10 + wy1 * wx1 * v11)

    def backward(g: np.ndarray) -> None:
        if planes.requires_grad:
            base = pm * (h * w)
            idx = np.concatenate([
                (base + y0 * w + x0).ravel(),
                (base + y0 * w + x1).ravel(),
                (base + y1 * w + x0).ravel(),
                (base + y1 * w + x1).ravel(),
            ])
            wts = np.concatenate([
                (g * wy0 * wx0).ravel(),
                (g * wy0 * wx1).ravel(),
                (g * wy1 * wx0).ravel(),
                (g * wy1 * wx1).ravel(),
            ])
            dplanes = np.bincount(idx, weights=wts, minlength=m * h * w)
            planes._accumulate(dplanes.reshape(m, h, w).astype(dtype, copy=False))
        if ys.requires_grad:
            inside = (ys.data >= 0.0) & (ys.data <= h - 1.0)
            dvdy = (v10 - v00) * wx0 + (v11 - v01) * wx1
            ys._accumulate((g * dvdy * inside).astype(ys.data.dtype, copy=False))
        if xs.requires_grad:
            inside = (xs.data >= 0.0) & (xs.data <= w - 1.0)
            dvdx = (v01 - v00) * wy0 + (v11 - v10) * wy1
            xs._accumulate((g * dvdx * inside).astype(xs.data.dtype, copy=False))

    return Tensor._result(out, (planes, ys, xs), backward)


def bilinear_sample(plane: Tensor, points) -> Tensor:
    """Sample a single (H,W) plane at (K,2) points given as (y, x) -> (K,) values."""
    if not isinstance(points, Tensor):
        points = Tensor(np.asarray(points, dtype=plane.data.dtype))
    k = points.shape[0]
    ys = points[:, 0].reshape(1, k)
    xs = points[:, 1].reshape(1, k)
    h, w = plane.shape
    return bilinear_sample_planes(plane.reshape(1, h, w), ys, xs).reshape(k)


def avg_pool2d(x: Tensor, kernel: int) -> Tensor:
    """Non-overlapping average pooling; spatial sizes must divide the kernel."""
    return _pool2d(x, kernel, "avg")


def max_pool2d(x: Tensor, kernel: int) -> Tensor:
    """Non-overlapping max pooling; spatial sizes must divide the kernel."""
    return _pool2d(x, kernel, "max")


def _pool2d(x: Tensor, kernel: int, mode: str) -> Tensor:
    k = int(kernel)
    h, w = x.shape[-2], x.shape[-1]
    if h % k or w % k:
        raise ValueError("pooling requires spatial sizes divisible by the kernel")
    lead = x.shape[:-2]
    r = x.reshape(lead + (h // k, k, w // k, k))
    nd = len(lead)
    if mode == "avg":
        return r.mean(axis=(nd + 1, nd + 3))
    return r.amax(axis=(nd + 1, nd + 3))
