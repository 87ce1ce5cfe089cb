"""Kernel set for the tape engine.

Every public function accepts :class:`Tensor` operands (plain numbers and
ndarrays participate as non-differentiated constants) and records a pullback
on the active tape when any input requires gradients.
"""

from __future__ import annotations

import math

import numpy as np

from ..errors import NumericError, ShapeError
from .tensor import Tensor, active_tape


def _data(x):
    return x.data if isinstance(x, Tensor) else x


def _needs_grad(*xs) -> bool:
    return any(isinstance(x, Tensor) and x.requires_grad for x in xs)


def _emit(name, out_data, inputs, pullback) -> Tensor:
    tape = active_tape()
    track = tape is not None and _needs_grad(*inputs)
    out = Tensor(out_data, requires_grad=track)
    if track:
        tape.record(name, out, tuple(inputs), pullback)
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``g`` down to ``shape`` (inverse of numpy broadcasting)."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# ---------------------------------------------------------------------------
# elementwise arithmetic


def add(a, b):
    ad, bd = _data(a), _data(b)

    def pull(g):
        return (
            _unbroadcast(g, np.shape(ad)) if isinstance(a, Tensor) else None,
            _unbroadcast(g, np.shape(bd)) if isinstance(b, Tensor) else None,
        )

    return _emit("add", ad + bd, (a, b), pull)


def sub(a, b):
    ad, bd = _data(a), _data(b)

    def pull(g):
        return (
            _unbroadcast(g, np.shape(ad)) if isinstance(a, Tensor) else None,
            _unbroadcast(-g, np.shape(bd)) if isinstance(b, Tensor) else None,
        )

    return _emit("sub", ad - bd, (a, b), pull)


def mul(a, b):
    ad, bd = _data(a), _data(b)

    def pull(g):
        return (
            _unbroadcast(g * bd, np.shape(ad)) if isinstance(a, Tensor) else None,
            _unbroadcast(g * ad, np.shape(bd)) if isinstance(b, Tensor) else None,
        )

    return _emit("mul", ad * bd, (a, b), pull)


def div(a, b):
    ad, bd = _data(a), _data(b)

    def pull(g):
        return (
            _unbroadcast(g / bd, np.shape(ad)) if isinstance(a, Tensor) else None,
            _unbroadcast(-g * ad / (bd * bd), np.shape(bd)) if isinstance(b, Tensor) else None,
        )

    return _emit("div", ad / bd, (a, b), pull)


def neg(a):
    return _emit("neg", -_data(a), (a,), lambda g: (-g,))


def power(a, p: float):
    ad = _data(a)
    return _emit("power", ad**p, (a,), lambda g: (g * p * ad ** (p - 1),))


def exp(a):
    out = np.exp(_data(a))
    return _emit("exp", out, (a,), lambda g: (g * out,))


def log(a):
    ad = _data(a)
    return _emit("log", np.log(ad), (a,), lambda g: (g / ad,))


def sqrt(a):
    out = np.sqrt(_data(a))
    return _emit("sqrt", out, (a,), lambda g: (g / (2.0 * out),))


def sigmoid(a):
    ad = _data(a)
    out = np.empty_like(ad)
    pos = ad >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-ad[pos]))
    ea = np.exp(ad[~pos])
    out[~pos] = ea / (1.0 + ea)
    return _emit("sigmoid", out, (a,), lambda g: (g * out * (1.0 - out),))


def tanh(a):
    out = np.tanh(_data(a))
    return _emit("tanh", out, (a,), lambda g: (g * (1.0 - out * out),))


def relu(a):
    ad = _data(a)
    mask = ad > 0
    return _emit("relu", ad * mask, (a,), lambda g: (g * mask,))


def abs_(a):
    ad = _data(a)
    return _emit("abs", np.abs(ad), (a,), lambda g: (g * np.sign(ad),))


def softplus(a):
    """log(1 + exp(a)), numerically stable."""
    ad = _data(a)
    out = np.logaddexp(0.0, ad)

    def pull(g):
        s = np.empty_like(ad)
        pos = ad >= 0
        s[pos] = 1.0 / (1.0 + np.exp(-ad[pos]))
        ea = np.exp(ad[~pos])
        s[~pos] = ea / (1.0 + ea)
        return (g * s,)

    return _emit("softplus", out, (a,), pull)


# ---------------------------------------------------------------------------
# reductions and reshapes


def sum(a, axis=None, keepdims: bool = False):  # noqa: A001 - mirrors np.sum
    ad = _data(a)
    out = np.sum(ad, axis=axis, keepdims=keepdims)

    def pull(g):
        gg = g
        if not keepdims and axis is not None:
            axes = axis if isinstance(axis, tuple) else (axis,)
            for ax in sorted(_norm_axes(axes, ad.ndim)):
                gg = np.expand_dims(gg, ax)
        return (np.broadcast_to(gg, ad.shape).copy(),)

    return _emit("sum", out, (a,), pull)


def _norm_axes(axes, ndim):
    return tuple(ax % ndim for ax in axes)


def mean(a, axis=None, keepdims: bool = False):
    ad = _data(a)
    out = np.mean(ad, axis=axis, keepdims=keepdims)
    if axis is None:
        n = ad.size
    else:
        axes = axis if isinstance(axis, tuple) else (axis,)
        n = int(np.prod([ad.shape[ax] for ax in _norm_axes(axes, ad.ndim)]))

    def pull(g):
        gg = g
        if not keepdims and axis is not None:
            axes = axis if isinstance(axis, tuple) else (axis,)
            for ax in sorted(_norm_axes(axes, ad.ndim)):
                gg = np.expand_dims(gg, ax)
        return (np.broadcast_to(gg, ad.shape) / n,)

    return _emit("mean", out, (a,), pull)


def reshape(a, shape):
    ad = _data(a)
    return _emit("reshape", ad.reshape(shape), (a,), lambda g: (g.reshape(ad.shape),))


def transpose(a, axes):
    ad = _data(a)
    inv = np.argsort(axes)
    return _emit("transpose", np.transpose(ad, axes), (a,), lambda g: (np.transpose(g, inv),))


def getitem(a, idx):
    """Basic (slice/int) indexing with scatter-add pullback."""
    ad = _data(a)

    def pull(g):
        ga = np.zeros_like(ad)
        ga[idx] += g
        return (ga,)

    return _emit("getitem", ad[idx], (a,), pull)


def concat(tensors, axis: int = 0):
    datas = [_data(t) for t in tensors]
    out = np.concatenate(datas, axis=axis)
    sizes = [d.shape[axis] for d in datas]
    splits = np.cumsum(sizes)[:-1]

    def pull(g):
        return tuple(np.split(g, splits, axis=axis))

    return _emit("concat", out, tuple(tensors), pull)


def stack(tensors, axis: int = 0):
    datas = [_data(t) for t in tensors]
    out = np.stack(datas, axis=axis)
    ax = axis % out.ndim

    def pull(g):
        return tuple(np.moveaxis(g, ax, 0)[i] for i in range(len(datas)))

    return _emit("stack", out, tuple(tensors), pull)


def matmul(a, b):
    """Matrix product with numpy batch broadcasting; operands must be >= 2-D."""
    ad, bd = _data(a), _data(b)
    if np.ndim(ad) < 2 or np.ndim(bd) < 2:
        raise ShapeError("matmul operands must be at least 2-D; reshape vectors first")
    out = np.matmul(ad, bd)

    def pull(g):
        ga = gb = None
        if isinstance(a, Tensor):
            ga = _unbroadcast(np.matmul(g, np.swapaxes(bd, -1, -2)), ad.shape)
        if isinstance(b, Tensor):
            gb = _unbroadcast(np.matmul(np.swapaxes(ad, -1, -2), g), bd.shape)
        return (ga, gb)

    return _emit("matmul", out, (a, b), pull)


# ---------------------------------------------------------------------------
# convolution


def conv2d(x, weight, bias=None, stride: int = 1, padding: int = 0, groups: int = 1):
    """Grouped 2-D cross-correlation.

    ``x``: [C_in, H, W] or [N, C_in, H, W]; ``weight``: [C_out, C_in/groups,
    KH, KW]; ``bias``: [C_out] or None. Output spatial size follows
    floor((H + 2*padding - K)/stride) + 1.
    """
    xd, wd = _data(x), _data(weight)
    squeeze = xd.ndim == 3
    if squeeze:
        xd = xd[None]
    if xd.ndim != 4:
        raise ShapeError(f"conv2d input must be 3-D or 4-D, got {xd.ndim}-D")
    if wd.ndim != 4:
        raise ShapeError(f"conv2d weight must be 4-D, got {wd.ndim}-D")
    n, c_in, h, w = xd.shape
    c_out, c_in_g, kh, kw = wd.shape
    if padding < 0:
        raise ShapeError("conv2d padding must be >= 0")
    if stride < 1:
        raise ShapeError("conv2d stride must be >= 1")
    if c_in % groups != 0:
        raise ShapeError(f"input channel axis ({c_in}) not divisible by groups ({groups})")
    if c_out % groups != 0:
        raise ShapeError(f"output channel axis ({c_out}) not divisible by groups ({groups})")
    if c_in_g * groups != c_in:
        raise ShapeError(
            f"weight channel axis expects {c_in_g * groups} input channels, input has {c_in}"
        )
    h_out = (h + 2 * padding - kh) // stride + 1
    w_out = (w + 2 * padding - kw) // stride + 1
    if h_out < 1 or w_out < 1:
        raise ShapeError(f"conv2d output spatial axis empty: ({h_out}, {w_out})")

    xp = np.pad(xd, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else xd
    cols = np.empty((n, c_in, kh, kw, h_out, w_out), dtype=xd.dtype)
    for ky in range(kh):
        for kx in range(kw):
            cols[:, :, ky, kx] = xp[
                :, :, ky : ky + stride * h_out : stride, kx : kx + stride * w_out : stride
            ]
    lsz = c_in_g * kh * kw
    cols_m = cols.reshape(n, groups, lsz, h_out * w_out)
    w_m = wd.reshape(groups, c_out // groups, lsz)
    out = np.matmul(w_m, cols_m)  # [n, groups, c_out/g, h_out*w_out]
    out = out.reshape(n, c_out, h_out, w_out)
    bd = _data(bias) if bias is not None else None
    if bd is not None:
        out = out + bd.reshape(1, c_out, 1, 1)
    if squeeze:
        out = out[0]

    def pull(g):
        gm = (g[None] if squeeze else g).reshape(n, groups, c_out // groups, h_out * w_out)
        g_w = np.matmul(gm, cols_m.transpose(0, 1, 3, 2)).sum(axis=0).reshape(wd.shape)
        g_cols = np.matmul(w_m.transpose(0, 2, 1)[None], gm)
        g_cols = g_cols.reshape(n, c_in, kh, kw, h_out, w_out)
        gxp = np.zeros(
            (n, c_in, h + 2 * padding, w + 2 * padding), dtype=g.dtype
        )
        for ky in range(kh):
            for kx in range(kw):
                gxp[
                    :, :, ky : ky + stride * h_out : stride, kx : kx + stride * w_out : stride
                ] += g_cols[:, :, ky, kx]
        gx = gxp[:, :, padding : padding + h, padding : padding + w] if padding else gxp
        if squeeze:
            gx = gx[0]
        g_b = None
        if bias is not None and isinstance(bias, Tensor):
            g_b = (g[None] if squeeze else g).sum(axis=(0, 2, 3))
        return (
            gx if isinstance(x, Tensor) else None,
            g_w if isinstance(weight, Tensor) else None,
            g_b,
        )

    return _emit("conv2d", out, (x, weight, bias), pull)


# ---------------------------------------------------------------------------
# normalization / attention / sampling


def batchnorm2d(x, mean_c, var_c, weight_c, bias_c, eps: float):
    """Per-channel affine normalization of [..., C, H, W].

    Statistics and affine parameters are length-C vectors (Tensor or ndarray;
    gradients flow into whichever are Tensors). eps >= 0, var + eps > 0.
    """
    vd = _data(var_c)
    if np.any(vd < 0):
        raise NumericError("batchnorm2d: negative variance")
    if eps < 0 or np.any(vd + eps <= 0):
        raise NumericError("batchnorm2d: var + eps must be positive")
    c = _data(x).shape[-3]
    shape = (c, 1, 1)
    inv_std = div(1.0, sqrt(add(var_c, eps))) if isinstance(var_c, Tensor) else 1.0 / np.sqrt(vd + eps)
    scale = mul(weight_c, inv_std) if _needs_grad(weight_c, var_c) else _data(weight_c) * _data(inv_std)
    centered = sub(x, reshape(mean_c, shape) if isinstance(mean_c, Tensor) else np.reshape(_data(mean_c), shape))
    scaled = mul(centered, reshape(scale, shape) if isinstance(scale, Tensor) else np.reshape(_data(scale), shape))
    return add(scaled, reshape(bias_c, shape) if isinstance(bias_c, Tensor) else np.reshape(_data(bias_c), shape))


def softmax_rows(m):
    """Row-wise softmax of a 2-D matrix, with max-subtraction for stability."""
    md = _data(m)
    if md.ndim != 2:
        raise ShapeError(f"softmax_rows expects a 2-D matrix, got {md.ndim}-D")
    if np.isnan(md).any():
        raise NumericError("softmax_rows: NaN input")
    shifted = md - md.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=1, keepdims=True)

    def pull(g):
        return (out * (g - (g * out).sum(axis=1, keepdims=True)),)

    return _emit("softmax_rows", out, (m,), pull)


def bilinear_sample(map_, x, y):
    """Bilinear interpolation of a [H, W] map at real coordinates (x, y).

    x indexes columns, y rows. Samples fully outside [0, H-1] x [0, W-1]
    return 0; partial overlap uses zero-padded neighbors. Differentiable in
    the map values and in both coordinates.
    """
    md = np.asarray(_data(map_))
    xv = float(_data(x))
    yv = float(_data(y))
    h, w = md.shape
    x0, y0 = math.floor(xv), math.floor(yv)
    fx, fy = xv - x0, yv - y0
    corners = [
        (y0, x0, (1 - fy) * (1 - fx)),
        (y0, x0 + 1, (1 - fy) * fx),
        (y0 + 1, x0, fy * (1 - fx)),
        (y0 + 1, x0 + 1, fy * fx),
    ]
    vals = []
    for yy, xx, _ in corners:
        inside = 0 <= yy < h and 0 <= xx < w
        vals.append(md[yy, xx] if inside else 0.0)
    out = np.asarray(
        vals[0] * corners[0][2] + vals[1] * corners[1][2] + vals[2] * corners[2][2] + vals[3] * corners[3][2],
        dtype=md.dtype,
    )

    def pull(g):
        g_map = None
        if isinstance(map_, Tensor):
            g_map = np.zeros_like(md)
            for (yy, xx, wgt), v in zip(corners, vals):
                if 0 <= yy < h and 0 <= xx < w:
                    g_map[yy, xx] += g * wgt
        # d/dfx and d/dfy of the blend, holding corner values fixed
        dfx = (1 - fy) * (vals[1] - vals[0]) + fy * (vals[3] - vals[2])
        dfy = (1 - fx) * (vals[2] - vals[0]) + fx * (vals[3] - vals[1])
        g_x = np.asarray(g * dfx) if isinstance(x, Tensor) else None
        g_y = np.asarray(g * dfy) if isinstance(y, Tensor) else None
        if g_x is not None:
            g_x = g_x.reshape(np.shape(_data(x)))
        if g_y is not None:
            g_y = g_y.reshape(np.shape(_data(y)))
        return (g_map, g_x, g_y)

    return _emit("bilinear_sample", out, (map_, x, y), pull)


def deform_sample(planes, ys, xs):
    """Vectorized bilinear gather: ``out[g, ...] = planes[g] at (ys, xs)``.

    ``planes``: [G, H, W]; ``ys``/``xs``: [G, ...] real coordinate arrays.
    Same zero-padding semantics as :func:`bilinear_sample`. Differentiable in
    the planes and both coordinate arrays.
    """
    pd, yd, xd = _data(planes), _data(ys), _data(xs)
    g_count, h, w = pd.shape
    gidx = np.arange(g_count).reshape((g_count,) + (1,) * (yd.ndim - 1))
    y0 = np.floor(yd).astype(np.int64)
    x0 = np.floor(xd).astype(np.int64)
    fy = yd - y0
    fx = xd - x0

    def corner(yy, xx):
        valid = (yy >= 0) & (yy < h) & (xx >= 0) & (xx < w)
        v = pd[gidx, np.clip(yy, 0, h - 1), np.clip(xx, 0, w - 1)]
        return np.where(valid, v, 0.0), valid

    v00, m00 = corner(y0, x0)
    v01, m01 = corner(y0, x0 + 1)
    v10, m10 = corner(y0 + 1, x0)
    v11, m11 = corner(y0 + 1, x0 + 1)
    w00 = (1 - fy) * (1 - fx)
    w01 = (1 - fy) * fx
    w10 = fy * (1 - fx)
    w11 = fy * fx
    out = w00 * v00 + w01 * v01 + w10 * v10 + w11 * v11

    def pull(g):
        g_planes = None
        if isinstance(planes, Tensor):
            # one bincount scatter over all four corners (ufunc.at is slow)
            base = (np.broadcast_to(gidx, yd.shape) * (h * w)).ravel()
            idx_parts, val_parts = [], []
            for yy, xx, wgt, mask in (
                (y0, x0, w00, m00),
                (y0, x0 + 1, w01, m01),
                (y0 + 1, x0, w10, m10),
                (y0 + 1, x0 + 1, w11, m11),
            ):
                flat = base + (np.clip(yy, 0, h - 1) * w + np.clip(xx, 0, w - 1)).ravel()
                idx_parts.append(flat)
                val_parts.append((g * wgt * mask).ravel())
            acc = np.bincount(
                np.concatenate(idx_parts),
                weights=np.concatenate(val_parts),
                minlength=g_count * h * w,
            )
            g_planes = acc.reshape(pd.shape).astype(pd.dtype, copy=False)
        g_y = None
        if isinstance(ys, Tensor):
            g_y = g * ((1 - fx) * (v10 - v00) + fx * (v11 - v01))
        g_x = None
        if isinstance(xs, Tensor):
            g_x = g * ((1 - fy) * (v01 - v00) + fy * (v11 - v10))
        return (g_planes, g_y, g_x)

    return _emit("deform_sample", out, (planes, ys, xs), pull)


def spike(u, smooth: bool = False, alpha: float = 2.0):
    """Threshold nonlinearity for spiking neurons.

    Hard mode: exact Heaviside(u >= 0) forward with an arctan surrogate
    derivative alpha / (2 * (1 + (pi/2 * alpha * u)^2)). Smooth mode replaces
    the forward by the surrogate's primitive arctan(pi*alpha*u/2)/pi + 1/2,
    making the whole network finite-difference checkable.
    """
    ud = _data(u)
    if smooth:
        out = np.arctan(math.pi * alpha * ud / 2.0) / math.pi + 0.5
    else:
        out = (ud >= 0).astype(ud.dtype)

    def pull(g):
        return (g * (alpha / (2.0 * (1.0 + (math.pi / 2.0 * alpha * ud) ** 2))),)

    return _emit("spike", out, (u,), pull)


# ---------------------------------------------------------------------------
# operator sugar on Tensor

Tensor.__add__ = lambda self, other: add(self, other)
Tensor.__radd__ = lambda self, other: add(other, self)
Tensor.__sub__ = lambda self, other: sub(self, other)
Tensor.__rsub__ = lambda self, other: sub(other, self)
Tensor.__mul__ = lambda self, other: mul(self, other)
Tensor.__rmul__ = lambda self, other: mul(other, self)
Tensor.__truediv__ = lambda self, other: div(self, other)
Tensor.__rtruediv__ = lambda self, other: div(other, self)
Tensor.__neg__ = lambda self: neg(self)
Tensor.__pow__ = lambda self, p: power(self, p)
Tensor.__matmul__ = lambda self, other: matmul(self, other)
Tensor.__getitem__ = lambda self, idx: getitem(self, idx)
