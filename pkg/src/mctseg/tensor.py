"""N-d tensors with reverse-mode autodiff on an explicit gradient tape.

Tensors wrap numpy arrays (float32 by default, float64 for gradient
verification). Every primitive checks its output for NaN/Inf: overflow is
an error, never a silent value. Ops record onto the innermost active
GradTape in execution order, which is already a topological order, so
backward() is a single reverse sweep.
"""

import math

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import ndtr

from .errors import (
    AllKeysMasked,
    DetachedTensor,
    EmptyOutput,
    NonFiniteValue,
    NonScalarLoss,
    ShapeMismatch,
    TapeConsumed,
)

DEFAULT_DTYPE = np.float32

_finite_checks = True
_corrupt_op = None


def set_finite_checks(enabled):
    """Toggle per-op NaN/Inf guards (on by default)."""
    global _finite_checks
    _finite_checks = bool(enabled)


def set_gradient_corruption(op_name):
    """Test fixture: deliberately corrupt the backward of one op.

    Pass None to restore correct gradients. Used as a negative control by
    the gradcheck harness.
    """
    global _corrupt_op
    _corrupt_op = op_name


def _guard(name, arr):
    if _finite_checks and not np.isfinite(arr).all():
        raise NonFiniteValue(f"{name} produced non-finite values")


# ---------------------------------------------------------------------------
# tape
# ---------------------------------------------------------------------------

_tape_stack = []


class GradTape:
    """Execution-ordered op record for one forward pass.

    Use as a context manager around the forward computation, then call
    backward(loss). A tape is consumed by backward and cannot be replayed.
    """

    def __init__(self):
        self._records = []  # (out, inputs, backward_fn, name)
        self.consumed = False

    def __enter__(self):
        _tape_stack.append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        assert _tape_stack and _tape_stack[-1] is self
        _tape_stack.pop()
        return False

    def __len__(self):
        return len(self._records)


def _active_tape():
    return _tape_stack[-1] if _tape_stack else None


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_tape")

    def __init__(self, data, requires_grad=False, dtype=None):
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(DEFAULT_DTYPE)
        _guard("tensor", arr)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._tape = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def detach(self):
        """A tape-free view of the same data."""
        return Tensor(self.data, requires_grad=False, dtype=self.data.dtype)

    def item(self):
        return float(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __neg__(self):
        return scale(self, -1.0)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, other)

    def __truediv__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, 1.0 / float(other))
        return div(self, other)

    def __matmul__(self, other):
        return matmul(self, other)


def _record(name, data, inputs, backward_fn):
    """Create an op output tensor and record it on the active tape."""
    _guard(name, data)
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out._tape = None
    out.requires_grad = any(t.requires_grad for t in inputs)
    tape = _active_tape()
    if out.requires_grad and tape is not None and not tape.consumed:
        out._tape = tape
        tape._records.append((out, inputs, backward_fn, name))
    return out


def backward(loss):
    """Populate grads of every requires_grad tensor reachable from loss."""
    if loss.data.size != 1:
        raise NonScalarLoss(f"loss has shape {loss.data.shape}")
    tape = loss._tape
    if tape is None:
        raise DetachedTensor("loss tensor is not on any tape")
    if tape.consumed:
        raise TapeConsumed("tape already consumed by a previous backward")
    loss.grad = np.ones_like(loss.data)
    for out, inputs, fn, name in reversed(tape._records):
        if out.grad is None:
            continue
        grads = fn(out.grad)
        if _corrupt_op is not None and name == _corrupt_op:
            grads = [None if g is None else g * 1.01 for g in grads]
        for t, g in zip(inputs, grads):
            if g is None or not t.requires_grad:
                continue
            if t.grad is None:
                # own fresh arrays outright; copy views and pass-throughs
                if g is out.grad or g.base is not None:
                    t.grad = g.copy()
                else:
                    t.grad = g
            else:
                t.grad += g
    tape.consumed = True
    tape._records.clear()


# ---------------------------------------------------------------------------
# broadcasting helpers (trailing-suffix only)
# ---------------------------------------------------------------------------


def _bcast_shape(sa, sb):
    if sa == sb:
        return sa
    if len(sa) >= len(sb) and sa[len(sa) - len(sb):] == sb:
        return sa
    if len(sb) > len(sa) and sb[len(sb) - len(sa):] == sa:
        return sb
    raise ShapeMismatch(f"shapes {sa} and {sb} do not align")


def _reduce_to(g, shape):
    if g.shape == tuple(shape):
        return g
    lead = g.ndim - len(shape)
    return g.sum(axis=tuple(range(lead)))


# ---------------------------------------------------------------------------
# elementwise primitives
# ---------------------------------------------------------------------------


def add(a, b):
    _bcast_shape(a.shape, b.shape)

    def bw(g):
        return [_reduce_to(g, a.shape), _reduce_to(g, b.shape)]

    return _record("add", a.data + b.data, [a, b], bw)


def sub(a, b):
    _bcast_shape(a.shape, b.shape)

    def bw(g):
        return [_reduce_to(g, a.shape), -_reduce_to(g, b.shape)]

    return _record("sub", a.data - b.data, [a, b], bw)


def mul(a, b):
    _bcast_shape(a.shape, b.shape)
    ad, bd = a.data, b.data

    def bw(g):
        return [_reduce_to(g * bd, a.shape), _reduce_to(g * ad, b.shape)]

    return _record("mul", ad * bd, [a, b], bw)


def div(a, b):
    _bcast_shape(a.shape, b.shape)
    ad, bd = a.data, b.data

    def bw(g):
        return [_reduce_to(g / bd, a.shape), _reduce_to(-g * ad / (bd * bd), b.shape)]

    return _record("div", ad / bd, [a, b], bw)


def scale(a, s):
    s = float(s)

    def bw(g):
        return [g * s]

    return _record("scale", a.data * s, [a], bw)


def cmul(a, c):
    """Elementwise multiply by a constant array (no gradient into c)."""
    c = np.asarray(c, dtype=a.dtype)
    data = a.data * c
    if data.shape != a.shape:
        raise ShapeMismatch(f"constant {c.shape} would expand operand {a.shape}")

    def bw(g):
        return [g * c]

    return _record("cmul", data, [a], bw)


def absval(a):
    sign = np.sign(a.data)

    def bw(g):
        return [g * sign]

    return _record("abs", np.abs(a.data), [a], bw)


def leaky_relu(a, slope=0.01):
    factor = np.where(a.data >= 0, a.dtype.type(1), a.dtype.type(slope))

    def bw(g):
        return [g * factor]

    return _record("leaky_relu", a.data * factor, [a], bw)


def gelu(a):
    """Exact Gaussian-CDF GELU: x * Phi(x)."""
    x = a.data
    phi = ndtr(x).astype(x.dtype)
    pdf = (np.exp(-0.5 * x * x) / math.sqrt(2.0 * math.pi)).astype(x.dtype)

    def bw(g):
        return [g * (phi + x * pdf)]

    return _record("gelu", x * phi, [a], bw)


# ---------------------------------------------------------------------------
# shape primitives
# ---------------------------------------------------------------------------


def reshape(a, shape):
    shape = tuple(shape)
    old = a.shape

    def bw(g):
        return [g.reshape(old)]

    return _record("reshape", a.data.reshape(shape), [a], bw)


def transpose(a, axes):
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))

    def bw(g):
        return [g.transpose(inv)]

    return _record("transpose", a.data.transpose(axes), [a], bw)


def concat(tensors, axis=0):
    tensors = list(tensors)
    sizes = [t.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def bw(g):
        return [
            np.ascontiguousarray(np.take(g, range(offsets[i], offsets[i + 1]), axis=axis))
            for i in range(len(tensors))
        ]

    return _record("concat", np.concatenate([t.data for t in tensors], axis=axis), tensors, bw)


def tsum(a, axis=None, keepdims=False):
    shape = a.shape

    def bw(g):
        if axis is None:
            return [np.broadcast_to(g, shape).astype(g.dtype, copy=True)]
        gg = g if keepdims else np.expand_dims(g, axis)
        return [np.broadcast_to(gg, shape).astype(g.dtype, copy=True)]

    return _record("sum", a.data.sum(axis=axis, keepdims=keepdims), [a], bw)


def tmean(a, axis=None, keepdims=False):
    shape = a.shape
    n = a.data.size if axis is None else shape[axis]

    def bw(g):
        if axis is None:
            gg = g / n
            return [np.broadcast_to(gg, shape).astype(g.dtype, copy=True)]
        gg = (g if keepdims else np.expand_dims(g, axis)) / n
        return [np.broadcast_to(gg, shape).astype(g.dtype, copy=True)]

    return _record("mean", a.data.mean(axis=axis, keepdims=keepdims), [a], bw)


# ---------------------------------------------------------------------------
# matmul
# ---------------------------------------------------------------------------


def _swap_last(x):
    return np.swapaxes(x, -1, -2)


def matmul(a, b):
    ad, bd = a.data, b.data
    if ad.ndim < 2 or bd.ndim < 2:
        raise ShapeMismatch("matmul operands must be at least 2-d")
    if ad.shape[-1] != bd.shape[-2]:
        raise ShapeMismatch(f"inner dims differ: {ad.shape} @ {bd.shape}")
    if ad.ndim != bd.ndim and ad.ndim != 2 and bd.ndim != 2:
        raise ShapeMismatch("batch dims must match or one operand must be 2-d")
    if ad.ndim == bd.ndim and ad.shape[:-2] != bd.shape[:-2]:
        raise ShapeMismatch(f"batch dims differ: {ad.shape} @ {bd.shape}")

    def bw(g):
        ga = gb = None
        if a.requires_grad:
            ga = _reduce_to(g @ _swap_last(bd), a.shape)
        if b.requires_grad:
            gb = _reduce_to(_swap_last(ad) @ g, b.shape)
        return [ga, gb]

    return _record("matmul", ad @ bd, [a, b], bw)


# ---------------------------------------------------------------------------
# softmax family
# ---------------------------------------------------------------------------


def softmax(a, axis=-1):
    x = a.data
    z = x - x.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return [y * (g - (g * y).sum(axis=axis, keepdims=True))]

    return _record("softmax", y, [a], bw)


def masked_softmax(a, mask, axis=-1):
    """Softmax over positions where mask is True; masked outputs are 0.

    mask is a constant boolean array broadcastable to a's shape.
    """
    x = a.data
    mask = np.broadcast_to(np.asarray(mask, dtype=bool), x.shape)
    if not mask.any(axis=axis).all():
        raise AllKeysMasked("a softmax row has no unmasked entries")
    neg = np.where(mask, x, -np.inf)
    m = neg.max(axis=axis, keepdims=True)
    e = np.where(mask, np.exp(x - m), x.dtype.type(0))
    y = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return [y * (g - (g * y).sum(axis=axis, keepdims=True))]

    return _record("masked_softmax", y, [a], bw)


def log_softmax(a, axis=-1):
    x = a.data
    z = x - x.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out = z - lse
    sm = np.exp(out)

    def bw(g):
        return [g - sm * g.sum(axis=axis, keepdims=True)]

    return _record("log_softmax", out, [a], bw)


# ---------------------------------------------------------------------------
# normalization
# ---------------------------------------------------------------------------


def _norm_core(x, axes):
    mu = x.mean(axis=axes, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=axes, keepdims=True)
    return xc, var


def layer_norm(a, gamma, beta, eps=1e-5):
    """Normalize over the last axis to mean 0 / var 1, then affine."""
    if gamma.shape != a.shape[-1:] or beta.shape != a.shape[-1:]:
        raise ShapeMismatch("gamma/beta must match the last axis")
    x = a.data
    xc, var = _norm_core(x, -1)
    sigma = np.sqrt(var + eps)
    xhat = xc / sigma
    y = xhat * gamma.data + beta.data
    red = tuple(range(x.ndim - 1))

    def bw(g):
        gg = g * gamma.data
        dx = (gg - gg.mean(axis=-1, keepdims=True)
              - xhat * (gg * xhat).mean(axis=-1, keepdims=True)) / sigma
        dgamma = (g * xhat).sum(axis=red) if gamma.requires_grad else None
        dbeta = g.sum(axis=red) if beta.requires_grad else None
        return [dx, dgamma, dbeta]

    return _record("layer_norm", y, [a, gamma, beta], bw)


def instance_norm(a, gamma, beta, eps=1e-5):
    """Per-channel normalization over all spatial voxels of [C, D, H, W]."""
    if a.data.ndim != 4:
        raise ShapeMismatch(f"instance_norm expects [C, D, H, W], got {a.shape}")
    if gamma.shape != (a.shape[0],) or beta.shape != (a.shape[0],):
        raise ShapeMismatch("gamma/beta must match the channel axis")
    x = a.data
    axes = (1, 2, 3)
    xc, var = _norm_core(x, axes)
    sigma = np.sqrt(var + eps)
    xhat = xc / sigma
    gam = gamma.data.reshape(-1, 1, 1, 1)
    bet = beta.data.reshape(-1, 1, 1, 1)
    y = xhat * gam + bet

    def bw(g):
        gg = g * gam
        dx = (gg - gg.mean(axis=axes, keepdims=True)
              - xhat * (gg * xhat).mean(axis=axes, keepdims=True)) / sigma
        dgamma = (g * xhat).sum(axis=axes) if gamma.requires_grad else None
        dbeta = g.sum(axis=axes) if beta.requires_grad else None
        return [dx, dgamma, dbeta]

    return _record("instance_norm", y, [a, gamma, beta], bw)


# ---------------------------------------------------------------------------
# 3-d convolution (cross-correlation) and resampling
# ---------------------------------------------------------------------------


def _pad_volume(x, pad):
    if pad == 0:
        return x
    cin, d, h, w = x.shape
    xp = np.zeros((cin, d + 2 * pad, h + 2 * pad, w + 2 * pad), dtype=x.dtype)
    xp[:, pad:pad + d, pad:pad + h, pad:pad + w] = x
    return xp


def _offsets(k, hp, wp):
    return [(a, b, c, (a * hp + b) * wp + c)
            for a in range(k) for b in range(k) for c in range(k)]


_scratch_pool = {}


def _scratch(tag, shape, dtype):
    """Reusable per-(tag, shape) work buffer; the engine is single-threaded
    and every buffer is consumed before the next op starts."""
    key = (tag, shape, np.dtype(dtype).name)
    buf = _scratch_pool.get(key)
    if buf is None:
        buf = _scratch_pool[key] = np.empty(shape, dtype=dtype)
    return buf


def _pad_volume_scratch(x, pad):
    if pad == 0:
        return x
    cin, d, h, w = x.shape
    xp = _scratch("pad", (cin, d + 2 * pad, h + 2 * pad, w + 2 * pad), x.dtype)
    xp.fill(0)
    xp[:, pad:pad + d, pad:pad + h, pad:pad + w] = x
    return xp


def _s1_geometry(x_shape, k, pad):
    dp, hp, wp = (d + 2 * pad for d in x_shape[1:])
    off_max = ((k - 1) * hp + (k - 1)) * wp + (k - 1)
    n = dp * hp * wp - off_max
    return dp, hp, wp, n


def _corner_view(flat2d, spatial, hp, wp):
    """View of a [C, n] flat-offset panel as the valid [C, *spatial] corner;
    the position map is injective, so reads and writes are safe."""
    c = flat2d.shape[0]
    s0, s1 = flat2d.strides
    return np.lib.stride_tricks.as_strided(
        flat2d, (c,) + tuple(spatial), (s0, hp * wp * s1, wp * s1, s1))


def _conv_s1_forward(x, wk, bias, pad, out_spatial):
    """Stride-1 conv as 27 flat-offset GEMMs: each kernel tap multiplies a
    contiguous view of the padded volume, so nothing is im2col-copied."""
    cout, cin, k = wk.shape[0], wk.shape[1], wk.shape[2]
    dp, hp, wp, n = _s1_geometry(x.shape, k, pad)
    npad = dp * hp * wp
    xpf = _pad_volume_scratch(x, pad).reshape(cin, npad)
    acc = _scratch("conv_acc", (cout, n), x.dtype)
    acc.fill(0)
    wf = wk.reshape(cout, cin, k ** 3)
    for j, (_, _, _, off) in enumerate(_offsets(k, hp, wp)):
        wj = np.ascontiguousarray(wf[:, :, j])
        acc += wj @ xpf[:, off:off + n]
    corner = _corner_view(acc, out_spatial, hp, wp)
    if bias is None:
        return np.ascontiguousarray(corner)
    return corner + bias.reshape(-1, 1, 1, 1)


def _conv_s1_backward(g, x, wk, pad, need_x, need_w):
    cout, cin, k = wk.shape[0], wk.shape[1], wk.shape[2]
    dp, hp, wp, n = _s1_geometry(x.shape, k, pad)
    npad = dp * hp * wp
    xpf = _pad_volume_scratch(x, pad).reshape(cin, npad)
    gflat = _scratch("conv_g", (cout, n), g.dtype)
    gflat.fill(0)
    _corner_view(gflat, g.shape[1:], hp, wp)[...] = g
    offsets = _offsets(k, hp, wp)
    wf = wk.reshape(cout, cin, k ** 3)

    gw = None
    if need_w:
        gw = np.empty_like(wf)
        for j, (_, _, _, off) in enumerate(offsets):
            # [cout, n] @ [n, cin]: large shared K keeps the GEMM efficient
            gw[:, :, j] = gflat @ xpf[:, off:off + n].T
        gw = gw.reshape(wk.shape)
    gx = None
    if need_x:
        # transposed conv as one GEMM: stack the 27 shifted copies of the
        # output gradient so the contraction dim grows to 27*cout
        gbuf = _scratch("conv_gbuf", (k ** 3, cout, npad), g.dtype)
        for j, (_, _, _, off) in enumerate(offsets):
            gj = gbuf[j]
            gj[:, :off].fill(0)
            gj[:, off:off + n] = gflat
            gj[:, off + n:].fill(0)
        wt = np.ascontiguousarray(wk.reshape(cout, cin, k ** 3).transpose(1, 2, 0))
        gxf = wt.reshape(cin, k ** 3 * cout) @ gbuf.reshape(k ** 3 * cout, npad)
        d, h, w_ = x.shape[1:]
        gx = gxf.reshape(cin, dp, hp, wp)[:, pad:pad + d, pad:pad + h, pad:pad + w_]
        gx = np.ascontiguousarray(gx)
    return gx, gw


def _im2col(xp, k, stride, cin):
    win = sliding_window_view(xp, (k, k, k), axis=(1, 2, 3))
    win = win[:, ::stride, ::stride, ::stride]
    nvox = win.shape[1] * win.shape[2] * win.shape[3]
    return win.transpose(0, 4, 5, 6, 1, 2, 3).reshape(cin * k ** 3, nvox)


def conv3d(x, w, b=None, stride=1, pad=0):
    """Cross-correlation of [C_in, D, H, W] with [C_out, C_in, k, k, k].

    b is an optional per-channel bias; layers normalized right after the
    conv omit it (a bias there has an identically zero gradient)."""
    if x.data.ndim != 4 or w.data.ndim != 5:
        raise ShapeMismatch(f"conv3d expects 4-d input and 5-d kernel, got {x.shape}, {w.shape}")
    cout, cin, k = w.shape[0], w.shape[1], w.shape[2]
    if w.shape[2:] != (k, k, k) or k % 2 == 0:
        raise ShapeMismatch(f"kernel must be cubic with odd size, got {w.shape[2:]}")
    if x.shape[0] != cin:
        raise ShapeMismatch(f"input channels {x.shape[0]} != kernel channels {cin}")
    if b is not None and b.shape != (cout,):
        raise ShapeMismatch(f"bias must be [{cout}], got {b.shape}")
    if stride < 1 or pad < 0:
        raise ShapeMismatch("stride must be >= 1 and pad >= 0")
    spatial = x.shape[1:]
    out_spatial = tuple((d + 2 * pad - k) // stride + 1 for d in spatial)
    if min(out_spatial) <= 0:
        raise EmptyOutput(f"conv3d output would be {out_spatial}")

    bias_data = None if b is None else b.data
    inputs = [x, w] if b is None else [x, w, b]

    if stride == 1:
        out = _conv_s1_forward(x.data, w.data, bias_data, pad, out_spatial)

        def bw(g):
            gx, gw = _conv_s1_backward(g, x.data, w.data, pad,
                                       x.requires_grad, w.requires_grad)
            grads = [gx, gw]
            if b is not None:
                grads.append(g.sum(axis=(1, 2, 3)) if b.requires_grad else None)
            return grads

        return _record("conv3d", out, inputs, bw)

    pads = ((0, 0), (pad, pad), (pad, pad), (pad, pad))
    xp = np.pad(x.data, pads)
    cols = _im2col(xp, k, stride, cin)
    w2 = w.data.reshape(cout, cin * k ** 3)
    out = w2 @ cols
    if bias_data is not None:
        out = out + bias_data[:, None]
    out = out.reshape((cout,) + out_spatial)
    do, ho, wo = out_spatial

    def bw(g):
        g2 = g.reshape(cout, -1)
        gw = None
        if w.requires_grad:
            cols_b = _im2col(np.pad(x.data, pads), k, stride, cin)
            gw = (g2 @ cols_b.T).reshape(w.shape)
        gx = None
        if x.requires_grad:
            gcols = (w2.T @ g2).reshape(cin, k, k, k, do, ho, wo)
            gxp = np.zeros_like(xp)
            for a_ in range(k):
                for b_ in range(k):
                    for c_ in range(k):
                        gxp[:, a_:a_ + stride * do:stride,
                            b_:b_ + stride * ho:stride,
                            c_:c_ + stride * wo:stride] += gcols[:, a_, b_, c_]
            gx = gxp[:, pad:pad + spatial[0], pad:pad + spatial[1], pad:pad + spatial[2]]
            gx = np.ascontiguousarray(gx)
        grads = [gx, gw]
        if b is not None:
            grads.append(g2.sum(axis=1) if b.requires_grad else None)
        return grads

    return _record("conv3d", out, inputs, bw)


_interp_cache = {}


def _interp_matrix(n_out, n_in, dtype):
    key = (n_out, n_in, np.dtype(dtype).name)
    m = _interp_cache.get(key)
    if m is not None:
        return m
    m = np.zeros((n_out, n_in), dtype=np.float64)
    for j in range(n_out):
        c = (j + 0.5) * n_in / n_out - 0.5
        c = min(max(c, 0.0), n_in - 1.0)
        i0 = int(math.floor(c))
        i1 = min(i0 + 1, n_in - 1)
        f = c - i0
        m[j, i0] += 1.0 - f
        m[j, i1] += f
    m = m.astype(dtype)
    _interp_cache[key] = m
    return m


def _apply_axis(arr, m, axis):
    out = np.tensordot(m, arr, axes=([1], [axis]))
    return np.moveaxis(out, 0, axis)


def resize3d(x, out_spatial):
    """Trilinear resampling of [C, D, H, W] to [C, *out_spatial].

    Half-pixel-center convention; out == in shape is an exact identity.
    """
    if x.data.ndim != 4:
        raise ShapeMismatch(f"resize3d expects [C, D, H, W], got {x.shape}")
    out_spatial = tuple(out_spatial)
    mats = [_interp_matrix(out_spatial[i], x.shape[1 + i], x.dtype) for i in range(3)]
    data = x.data
    for i, m in enumerate(mats):
        data = _apply_axis(data, m, 1 + i)

    def bw(g):
        for i, m in reversed(list(enumerate(mats))):
            g = _apply_axis(g, m.T, 1 + i)
        return [np.ascontiguousarray(g)]

    return _record("resize3d", np.ascontiguousarray(data), [x], bw)


# ---------------------------------------------------------------------------
# gradient oracle
# ---------------------------------------------------------------------------


def finite_diff_check(f, x, h=1e-4):
    """Max relative error between analytic and central-difference gradients.

    f must be a deterministic scalar-valued function of one tensor. The
    whole check runs in float64.
    """
    base = np.asarray(x.data, dtype=np.float64)
    leaf = Tensor(base.copy(), requires_grad=True, dtype=np.float64)
    with GradTape():
        y = f(leaf)
        if y.data.size != 1:
            raise NonScalarLoss("finite_diff_check needs a scalar-valued f")
        backward(y)
    analytic = leaf.grad if leaf.grad is not None else np.zeros_like(base)

    num = np.zeros_like(base)
    flat = num.reshape(-1)
    for i in range(base.size):
        xp = base.copy()
        xp.flat[i] += h
        xm = base.copy()
        xm.flat[i] -= h
        fp = float(f(Tensor(xp, dtype=np.float64)).data)
        fm = float(f(Tensor(xm, dtype=np.float64)).data)
        flat[i] = (fp - fm) / (2.0 * h)

    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(num)), 1e-8)
    return float(np.max(np.abs(analytic - num) / denom))
