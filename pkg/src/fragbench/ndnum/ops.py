"""Kernel set. Each kernel computes its forward value with numpy and
registers a closure producing the parent gradients.

Convolutions use the (N, C, H, W) layout; pooling windows are square with
size == stride and require evenly divisible spatial dims.
"""

from __future__ import annotations

import numpy as np

from .core import Tensor, make_node

KERNELS = {}


def _register(name):
    def deco(fn):
        KERNELS[name] = fn
        return fn

    return deco


def kernel(op_name: str, *inputs, **attrs):
    """Name-indexed dispatch into the kernel set."""
    try:
        fn = KERNELS[op_name]
    except KeyError:
        raise KeyError(f"unknown kernel {op_name!r}; have {sorted(KERNELS)}") from None
    return fn(*inputs, **attrs)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def constant(data, name=None) -> Tensor:
    return Tensor(data, requires_grad=False, name=name)


def ones(shape) -> Tensor:
    return Tensor(np.ones(shape))


def zeros(shape) -> Tensor:
    return Tensor(np.zeros(shape))


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    """Sum ``g`` down to ``shape`` (reverse of numpy broadcasting)."""
    if g.shape == tuple(shape):
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# ------------------------------------------------------------- element-wise

@_register("add")
def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out = a.data + b.data

    def bwd(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return make_node(out, (a, b), bwd, "add")


@_register("sub")
def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out = a.data - b.data

    def bwd(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return make_node(out, (a, b), bwd, "sub")


@_register("mul")
def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out = a.data * b.data

    def bwd(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return make_node(out, (a, b), bwd, "mul")


@_register("div")
def div(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out = a.data / b.data

    def bwd(g):
        ga = g / b.data
        gb = -g * a.data / (b.data * b.data)
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return make_node(out, (a, b), bwd, "div")


@_register("scale")
def scale(a, s: float) -> Tensor:
    a = _as_tensor(a)
    s = float(s)

    def bwd(g):
        return (g * s,)

    return make_node(a.data * s, (a,), bwd, "scale")


@_register("neg")
def neg(a) -> Tensor:
    return scale(a, -1.0)


@_register("relu")
def relu(a) -> Tensor:
    a = _as_tensor(a)
    mask = a.data > 0.0

    def bwd(g):
        return (g * mask,)

    return make_node(np.where(mask, a.data, 0.0), (a,), bwd, "relu")


@_register("log")
def log(a) -> Tensor:
    a = _as_tensor(a)
    with np.errstate(divide="raise", invalid="raise"):
        try:
            out = np.log(a.data)
        except FloatingPointError:
            from .core import NumericFaultError

            raise NumericFaultError("log of a non-positive value") from None

    def bwd(g):
        return (g / a.data,)

    return make_node(out, (a,), bwd, "log")


@_register("softmax")
def softmax(a, axis: int = -1) -> Tensor:
    a = _as_tensor(a)
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    s = e / e.sum(axis=axis, keepdims=True)

    def bwd(g):
        dot = (g * s).sum(axis=axis, keepdims=True)
        return (s * (g - dot),)

    return make_node(s, (a,), bwd, "softmax")


# ------------------------------------------------------------------- linear

@_register("matmul")
def matmul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ValueError(f"matmul expects 2D operands, got {a.shape} @ {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    out = a.data @ b.data

    def bwd(g):
        return g @ b.data.T, a.data.T @ g

    return make_node(out, (a, b), bwd, "matmul")


@_register("transpose")
def transpose(a) -> Tensor:
    a = _as_tensor(a)
    if a.data.ndim != 2:
        raise ValueError(f"transpose expects a 2D tensor, got {a.shape}")

    def bwd(g):
        return (g.T,)

    return make_node(a.data.T, (a,), bwd, "transpose")


@_register("permute")
def permute(a, axes) -> Tensor:
    """General axis permutation."""
    a = _as_tensor(a)
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))

    def bwd(g):
        return (g.transpose(inv),)

    return make_node(a.data.transpose(axes), (a,), bwd, "permute")


@_register("bmm")
def bmm(a, b) -> Tensor:
    """Batched matmul: (k, n, m) @ (k, m, p) -> (k, n, p)."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.data.ndim != 3 or b.data.ndim != 3 or a.shape[0] != b.shape[0] or a.shape[2] != b.shape[1]:
        raise ValueError(f"bmm shape mismatch: {a.shape} @ {b.shape}")
    out = np.matmul(a.data, b.data)

    def bwd(g):
        ga = np.matmul(g, b.data.transpose(0, 2, 1))
        gb = np.matmul(a.data.transpose(0, 2, 1), g)
        return ga, gb

    return make_node(out, (a, b), bwd, "bmm")


@_register("linear")
def linear(x, w, b=None) -> Tensor:
    """x @ w (+ b); x: (n, din), w: (din, dout), b: (dout,)."""
    y = matmul(x, w)
    if b is None:
        return y
    return add(y, b)


# ------------------------------------------------------------------ reshape

@_register("reshape")
def reshape(a, shape) -> Tensor:
    a = _as_tensor(a)
    old = a.shape

    def bwd(g):
        return (g.reshape(old),)

    return make_node(a.data.reshape(shape), (a,), bwd, "reshape")


@_register("flatten")
def flatten(a) -> Tensor:
    """Collapse all but the leading axis: (n, ...) -> (n, prod(...))."""
    a = _as_tensor(a)
    n = a.shape[0]
    return reshape(a, (n, int(np.prod(a.shape[1:], dtype=np.int64))))


@_register("concat")
def concat(tensors, axis: int = 0) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    splits = np.cumsum(sizes)[:-1]

    def bwd(g):
        return tuple(np.split(g, splits, axis=axis))

    return make_node(out, tuple(tensors), bwd, "concat")


@_register("gather_rows")
def gather_rows(a, idx) -> Tensor:
    """Select rows along axis 0; backward scatter-adds."""
    a = _as_tensor(a)
    idx = np.asarray(idx, dtype=np.int64)

    def bwd(g):
        ga = np.zeros_like(a.data)
        np.add.at(ga, idx, g)
        return (ga,)

    return make_node(a.data[idx], (a,), bwd, "gather_rows")


@_register("slice_rows")
def slice_rows(a, start: int, stop: int) -> Tensor:
    """Contiguous row slice along axis 0 (cheaper backward than gather)."""
    a = _as_tensor(a)

    def bwd(g):
        ga = np.zeros_like(a.data)
        ga[start:stop] = g
        return (ga,)

    return make_node(a.data[start:stop], (a,), bwd, "slice_rows")


# --------------------------------------------------------------- reductions

@_register("sum")
def tsum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _as_tensor(a)
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def bwd(g):
        if axis is None:
            return (np.broadcast_to(g, a.shape).copy(),)
        gg = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(gg, a.shape).copy(),)

    return make_node(out, (a,), bwd, "sum")


@_register("mean")
def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _as_tensor(a)
    if axis is None:
        count = a.data.size
    else:
        count = a.shape[axis]
    return scale(tsum(a, axis=axis, keepdims=keepdims), 1.0 / count)


# ------------------------------------------------------------- convolutions

def _pad_hw(x, p):
    if p == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))


def _im2col(xp, kh, kw, stride, ho, wo):
    """(n, c, Hp, Wp) -> (c*kh*kw, n*ho*wo), one strided copy per tap."""
    n, c = xp.shape[:2]
    cols = np.empty((c, kh, kw, n, ho, wo), dtype=np.float64)
    src = xp.transpose(1, 0, 2, 3)
    for i in range(kh):
        for j in range(kw):
            cols[:, i, j] = src[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride]
    return cols.reshape(c * kh * kw, n * ho * wo)


def _col2im(gcols, n, c, hp, wp, kh, kw, stride, ho, wo):
    gxp = np.zeros((c, n, hp, wp), dtype=np.float64)
    g6 = gcols.reshape(c, kh, kw, n, ho, wo)
    for i in range(kh):
        for j in range(kw):
            gxp[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += g6[:, i, j]
    return gxp.transpose(1, 0, 2, 3)


@_register("conv2d")
def conv2d(x, w, b=None, stride: int = 1, padding: int = 0) -> Tensor:
    """x: (N, C, H, W), w: (F, C, kh, kw) -> (N, F, Ho, Wo).

    One im2col per call and single BLAS GEMMs for the forward value, the
    weight gradient, and the data gradient; the cols matrix is shared
    between forward and backward.
    """
    x, w = _as_tensor(x), _as_tensor(w)
    n, c, h, wd = x.shape
    f, cw, kh, kw = w.shape
    if cw != c:
        raise ValueError(f"conv2d channel mismatch: input {c}, weight {cw}")
    ho = (h + 2 * padding - kh) // stride + 1
    wo = (wd + 2 * padding - kw) // stride + 1
    if ho < 1 or wo < 1:
        raise ValueError("conv2d output would be empty")
    xp = _pad_hw(x.data, padding)
    cols = _im2col(xp, kh, kw, stride, ho, wo)  # (ckk, n*p)
    wmat = w.data.reshape(f, c * kh * kw)
    out = (wmat @ cols).reshape(f, n, ho, wo).transpose(1, 0, 2, 3)

    def bwd(g):
        gmat = np.ascontiguousarray(g.transpose(1, 0, 2, 3)).reshape(f, n * ho * wo)
        gw = (gmat @ cols.T).reshape(w.shape)
        gcols = wmat.T @ gmat
        gxp = _col2im(gcols, n, c, xp.shape[2], xp.shape[3], kh, kw, stride, ho, wo)
        gx = gxp if padding == 0 else gxp[:, :, padding:-padding, padding:-padding]
        return gx, gw

    y = make_node(out, (x, w), bwd, "conv2d")
    if b is None:
        return y
    b = _as_tensor(b)

    def bwd_b(g):
        return g, g.sum(axis=(0, 2, 3))

    return make_node(y.data + b.data[None, :, None, None], (y, b), bwd_b, "conv2d_bias")


@_register("conv_transpose2d")
def conv_transpose2d(x, w, b=None, stride: int = 1, padding: int = 0) -> Tensor:
    """x: (N, C, H, W), w: (C, F, kh, kw) -> (N, F, Ho, Wo) with
    Ho = (H-1)*stride + kh - 2*padding (the adjoint of conv2d)."""
    x, w = _as_tensor(x), _as_tensor(w)
    n, c, h, wd = x.shape
    cw, f, kh, kw = w.shape
    if cw != c:
        raise ValueError(f"conv_transpose2d channel mismatch: input {c}, weight {cw}")
    ho = (h - 1) * stride + kh - 2 * padding
    wo = (wd - 1) * stride + kw - 2 * padding
    if ho < 1 or wo < 1:
        raise ValueError("conv_transpose2d output would be empty")
    # gathered layout (c, n*h*wd): the transpose-conv forward is the
    # col2im adjoint of a conv2d over its own output grid
    xflat = np.ascontiguousarray(x.data.transpose(1, 0, 2, 3)).reshape(c, n * h * wd)
    wmat = w.data.reshape(c, f * kh * kw)
    cols = (wmat.T @ xflat)  # (f*kh*kw, n*h*wd)
    out_p = _col2im(cols, n, f, ho + 2 * padding, wo + 2 * padding, kh, kw, stride, h, wd)
    out = out_p if padding == 0 else out_p[:, :, padding:-padding, padding:-padding]

    def bwd(g):
        gp = g if padding == 0 else np.pad(g, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
        gcols = _im2col(gp, kh, kw, stride, h, wd)  # (f*kh*kw, n*h*wd)
        gx_flat = wmat @ gcols  # (c, n*h*wd)
        gx = gx_flat.reshape(c, n, h, wd).transpose(1, 0, 2, 3)
        gw = (xflat @ gcols.T).reshape(w.shape)
        return gx, gw

    y = make_node(out, (x, w), bwd, "conv_transpose2d")
    if b is None:
        return y
    b = _as_tensor(b)

    def bwd_b(g):
        return g, g.sum(axis=(0, 2, 3))

    return make_node(y.data + b.data[None, :, None, None], (y, b), bwd_b, "conv_transpose2d_bias")


# ------------------------------------------------------------------ pooling

def _pool_view(x, size):
    n, c, h, w = x.shape
    if h % size or w % size:
        raise ValueError(f"pooling size {size} does not divide spatial dims {(h, w)}")
    return x.reshape(n, c, h // size, size, w // size, size)


@_register("maxpool2d")
def maxpool2d(a, size: int) -> Tensor:
    """Square max pooling with stride == size; gradient splits evenly
    between tied maxima."""
    a = _as_tensor(a)
    if size == 0:
        return a  # zero-sized pooling is the identity
    r = _pool_view(a.data, size)
    out = r.max(axis=(3, 5))

    def bwd(g):
        m = r == out[:, :, :, None, :, None]
        counts = m.sum(axis=(3, 5), keepdims=True)
        gr = m * (g[:, :, :, None, :, None] / counts)
        return (gr.reshape(a.shape),)

    return make_node(out, (a,), bwd, "maxpool2d")


@_register("avgpool2d")
def avgpool2d(a, size: int) -> Tensor:
    a = _as_tensor(a)
    if size == 0:
        return a
    r = _pool_view(a.data, size)
    out = r.mean(axis=(3, 5))

    def bwd(g):
        gr = np.broadcast_to(
            g[:, :, :, None, :, None] / (size * size),
            r.shape,
        )
        return (gr.reshape(a.shape).copy(),)

    return make_node(out, (a,), bwd, "avgpool2d")


# ----------------------------------------------------------- regularization

@_register("dropout")
def dropout(a, rate: float, train: bool, rng=None) -> Tensor:
    """Inverted dropout; exact identity when ``train`` is false."""
    a = _as_tensor(a)
    if not train or rate == 0.0:
        def bwd(g):
            return (g,)

        return make_node(a.data, (a,), bwd, "dropout")
    if rng is None:
        raise ValueError("dropout in train mode needs an rng")
    keep = 1.0 - rate
    mask = (rng.random(a.shape) < keep) / keep

    def bwd(g):
        return (g * mask,)

    return make_node(a.data * mask, (a,), bwd, "dropout")


@_register("batchnorm")
def batchnorm(x, gamma, beta, running_mean, running_var, train: bool,
              momentum: float = 0.1, eps: float = 1e-5) -> Tensor:
    """Batch normalization over the batch (and spatial dims for 4D inputs).

    ``running_mean``/``running_var`` are plain numpy arrays, updated in
    place in train mode; eval mode is a deterministic affine map.
    """
    x, gamma, beta = _as_tensor(x), _as_tensor(gamma), _as_tensor(beta)
    axes = (0,) if x.data.ndim == 2 else (0, 2, 3)
    shape = [1] * x.data.ndim
    shape[1 if x.data.ndim == 4 else -1] = -1
    g_ = gamma.data.reshape(shape)
    b_ = beta.data.reshape(shape)

    if train:
        mu = x.data.mean(axis=axes)
        var = x.data.var(axis=axes)
        running_mean *= 1.0 - momentum
        running_mean += momentum * mu
        running_var *= 1.0 - momentum
        running_var += momentum * var
        mu_ = mu.reshape(shape)
        var_ = var.reshape(shape)
        inv = 1.0 / np.sqrt(var_ + eps)
        xhat = (x.data - mu_) * inv
        out = g_ * xhat + b_
        m = x.data.size / gamma.data.size

        def bwd(g):
            gxhat = g * g_
            gvar = (gxhat * (x.data - mu_) * -0.5 * inv**3).sum(axis=axes, keepdims=True)
            gmu = (-gxhat * inv).sum(axis=axes, keepdims=True) + gvar * (
                -2.0 * (x.data - mu_)
            ).mean(axis=axes, keepdims=True)
            gx = gxhat * inv + gvar * 2.0 * (x.data - mu_) / m + gmu / m
            ggamma = (g * xhat).sum(axis=axes)
            gbeta = g.sum(axis=axes)
            return gx, ggamma, gbeta

        return make_node(out, (x, gamma, beta), bwd, "batchnorm")

    inv = 1.0 / np.sqrt(running_var.reshape(shape) + eps)
    xhat = (x.data - running_mean.reshape(shape)) * inv
    out = g_ * xhat + b_

    def bwd_eval(g):
        gx = g * g_ * inv
        ggamma = (g * xhat).sum(axis=axes)
        gbeta = g.sum(axis=axes)
        return gx, ggamma, gbeta

    return make_node(out, (x, gamma, beta), bwd_eval, "batchnorm")
