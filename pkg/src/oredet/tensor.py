"""Minimal dense-tensor engine with reverse-mode gradients.

Values are numpy arrays wrapped in :class:`Tensor`; every op records a
backward closure so a scalar loss can backpropagate through arbitrary
compositions. Feature maps use channel-major ``C x H x W`` layout
(row-major within a channel); a leading batch axis is accepted where an
op documents it. float32 is the working precision, float64 is used for
finite-difference gradient checks (see :func:`use_dtype`).
"""

from __future__ import annotations

import contextlib

import numpy as np

__all__ = [
    "Tensor", "Parameter", "Module", "GradCheckError",
    "no_grad", "use_dtype", "default_dtype",
    "tensor", "zeros",
    "add", "sub", "mul", "div", "neg", "power",
    "relu", "sigmoid", "exp", "log", "absolute", "clip",
    "tsum", "tmean",
    "reshape", "transpose", "concat", "split", "stack", "broadcast_to",
    "take_rows",
    "matmul", "linear", "softmax",
    "conv2d", "depthwise_xcorr", "adaptive_avg_pool", "max_pool",
    "bilinear_resize",
    "grad_check",
    "reset_mac_count", "mac_count",
    "reset_alloc_bytes", "alloc_bytes",
    "kaiming_uniform",
]


# ---------------------------------------------------------------------------
# global state: default dtype, grad mode, cost counters

_DEFAULT_DTYPE = np.float32
_GRAD_ENABLED = True
_MAC_COUNT = 0
_ALLOC_BYTES = 0


def default_dtype():
    return _DEFAULT_DTYPE


@contextlib.contextmanager
def use_dtype(dtype):
    """Temporarily change the dtype used by constructors and initializers."""
    global _DEFAULT_DTYPE
    prev = _DEFAULT_DTYPE
    _DEFAULT_DTYPE = np.dtype(dtype).type
    try:
        yield
    finally:
        _DEFAULT_DTYPE = prev


@contextlib.contextmanager
def no_grad():
    """Disable graph construction (inference mode)."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def reset_mac_count():
    global _MAC_COUNT
    _MAC_COUNT = 0


def mac_count():
    """Multiply-accumulates performed by conv/correlation/linear forwards
    since the last reset."""
    return _MAC_COUNT


def _count_macs(n):
    global _MAC_COUNT
    _MAC_COUNT += int(n)


def reset_alloc_bytes():
    global _ALLOC_BYTES
    _ALLOC_BYTES = 0


def alloc_bytes():
    """Bytes of tensor storage created since the last reset (peak-memory
    estimate for a forward pass when reset immediately before it)."""
    return _ALLOC_BYTES


# ---------------------------------------------------------------------------
# Tensor

class GradCheckError(RuntimeError):
    """A gradient check hit a non-finite value or an unusable function."""


class Tensor:
    """Dense n-d float array with an optional gradient slot."""

    __slots__ = ("data", "requires_grad", "grad", "_backward", "_parents")

    def __init__(self, data, requires_grad=False):
        arr = np.asarray(data)
        if not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(_DEFAULT_DTYPE)
        self.data = arr
        self.requires_grad = bool(requires_grad) and _GRAD_ENABLED
        self.grad = None
        self._backward = None
        self._parents = ()
        global _ALLOC_BYTES
        _ALLOC_BYTES += arr.nbytes

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def item(self):
        return float(self.data)

    def detach(self):
        return Tensor(self.data, requires_grad=False)

    def zero_grad(self):
        self.grad = None

    def _accumulate(self, g):
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def backward(self):
        """Reverse-mode sweep seeded with ones (call on a scalar loss)."""
        topo = []
        visited = set()
        stack = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                topo.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in visited:
                    stack.append((p, False))
        self.grad = np.ones_like(self.data)
        for node in reversed(topo):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    # --- operator sugar -------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return neg(self)

    def __pow__(self, p):
        return power(self, p)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, axes):
        return transpose(self, axes)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"


class Parameter(Tensor):
    """Trainable tensor; collected by :class:`Module` under a dotted name."""

    def __init__(self, data):
        super().__init__(data, requires_grad=True)
        # parameters stay trainable even when created under no_grad
        self.requires_grad = True


def tensor(data, requires_grad=False):
    return Tensor(data, requires_grad=requires_grad)


def zeros(shape, requires_grad=False):
    return Tensor(np.zeros(shape, dtype=_DEFAULT_DTYPE), requires_grad=requires_grad)


def _as_tensor(x):
    if isinstance(x, Tensor):
        return x
    if isinstance(x, (int, float, np.integer, np.floating)):
        # scalars adopt the active dtype so they never upcast float32 graphs
        return Tensor(np.asarray(x, dtype=_DEFAULT_DTYPE))
    return Tensor(np.asarray(x))


def _make(data, parents, backward):
    out = Tensor(data)
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(p for p in parents if p.requires_grad)
        out._backward = backward
    return out


def _unbroadcast(g, shape):
    """Reduce gradient ``g`` back to ``shape`` after numpy broadcasting."""
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# ---------------------------------------------------------------------------
# elementwise arithmetic (numpy broadcasting allowed)

def add(a, b):
    a, b = _as_tensor(a), _as_tensor(b)

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g, b.shape))

    return _make(a.data + b.data, (a, b), backward)


def sub(a, b):
    a, b = _as_tensor(a), _as_tensor(b)

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b._accumulate(-_unbroadcast(g, b.shape))

    return _make(a.data - b.data, (a, b), backward)


def mul(a, b):
    a, b = _as_tensor(a), _as_tensor(b)

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g * b.data, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g * a.data, b.shape))

    return _make(a.data * b.data, (a, b), backward)


def div(a, b):
    a, b = _as_tensor(a), _as_tensor(b)

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g / b.data, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(-g * a.data / (b.data * b.data), b.shape))

    return _make(a.data / b.data, (a, b), backward)


def neg(a):
    a = _as_tensor(a)

    def backward(g):
        a._accumulate(-g)

    return _make(-a.data, (a,), backward)


def power(a, p):
    a = _as_tensor(a)
    p = float(p)

    def backward(g):
        a._accumulate(g * p * np.power(a.data, p - 1.0))

    return _make(np.power(a.data, p), (a,), backward)


def relu(a):
    a = _as_tensor(a)
    out_data = np.maximum(a.data, 0)

    def backward(g):
        a._accumulate(g * (a.data > 0))

    return _make(out_data, (a,), backward)


def sigmoid(a):
    a = _as_tensor(a)
    x = a.data
    out_data = np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))),
                        np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))
    out_data = out_data.astype(x.dtype, copy=False)

    def backward(g):
        a._accumulate(g * out_data * (1.0 - out_data))

    return _make(out_data, (a,), backward)


def exp(a):
    a = _as_tensor(a)
    out_data = np.exp(a.data)

    def backward(g):
        a._accumulate(g * out_data)

    return _make(out_data, (a,), backward)


def log(a):
    a = _as_tensor(a)

    def backward(g):
        a._accumulate(g / a.data)

    return _make(np.log(a.data), (a,), backward)


def absolute(a):
    a = _as_tensor(a)

    def backward(g):
        a._accumulate(g * np.sign(a.data))

    return _make(np.abs(a.data), (a,), backward)


def clip(a, lo, hi):
    a = _as_tensor(a)
    out_data = np.clip(a.data, lo, hi)
    inside = (a.data >= lo) & (a.data <= hi)

    def backward(g):
        a._accumulate(g * inside)

    return _make(out_data, (a,), backward)


# ---------------------------------------------------------------------------
# reductions

def tsum(a, axis=None, keepdims=False):
    a = _as_tensor(a)
    out_data = a.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is None:
            a._accumulate(np.broadcast_to(g, a.shape).astype(a.dtype, copy=False))
        else:
            if not keepdims:
                g = np.expand_dims(g, axis)
            a._accumulate(np.broadcast_to(g, a.shape).astype(a.dtype, copy=False))

    return _make(out_data, (a,), backward)


def tmean(a, axis=None, keepdims=False):
    a = _as_tensor(a)
    if axis is None:
        n = a.size
    else:
        axes = axis if isinstance(axis, tuple) else (axis,)
        n = int(np.prod([a.shape[ax] for ax in axes]))
    return tsum(a, axis=axis, keepdims=keepdims) * (1.0 / n)


# ---------------------------------------------------------------------------
# shape ops

def reshape(a, shape):
    a = _as_tensor(a)

    def backward(g):
        a._accumulate(g.reshape(a.shape))

    return _make(a.data.reshape(shape), (a,), backward)


def transpose(a, axes):
    a = _as_tensor(a)
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))

    def backward(g):
        a._accumulate(g.transpose(inv))

    return _make(a.data.transpose(axes), (a,), backward)


def concat(tensors, axis=0):
    tensors = [_as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum(sizes)[:-1]

    def backward(g):
        pieces = np.split(g, bounds, axis=axis)
        for t, piece in zip(tensors, pieces):
            if t.requires_grad:
                t._accumulate(piece)

    return _make(np.concatenate([t.data for t in tensors], axis=axis),
                 tuple(tensors), backward)


def split(a, sizes, axis=0):
    """Inverse of :func:`concat`: cut ``a`` into chunks of the given sizes."""
    a = _as_tensor(a)
    if sum(sizes) != a.shape[axis]:
        raise ValueError(f"split sizes {sizes} do not cover axis {axis} of {a.shape}")
    bounds = np.cumsum(sizes)[:-1]
    pieces = np.split(a.data, bounds, axis=axis)
    outs = []
    for i, piece in enumerate(pieces):
        start = 0 if i == 0 else int(bounds[i - 1])

        def backward(g, start=start, length=piece.shape[axis]):
            full = np.zeros_like(a.data)
            sl = [slice(None)] * a.ndim
            sl[axis] = slice(start, start + length)
            full[tuple(sl)] = g
            a._accumulate(full)

        outs.append(_make(piece.copy(), (a,), backward))
    return outs


def stack(tensors, axis=0):
    tensors = [_as_tensor(t) for t in tensors]

    def backward(g):
        pieces = np.split(g, len(tensors), axis=axis)
        for t, piece in zip(tensors, pieces):
            if t.requires_grad:
                t._accumulate(np.squeeze(piece, axis=axis))

    return _make(np.stack([t.data for t in tensors], axis=axis),
                 tuple(tensors), backward)


def broadcast_to(a, shape):
    a = _as_tensor(a)

    def backward(g):
        a._accumulate(_unbroadcast(g, a.shape))

    return _make(np.broadcast_to(a.data, shape).copy(), (a,), backward)


def take_rows(a, indices):
    """Select rows along axis 0 (gather with repetition allowed)."""
    a = _as_tensor(a)
    idx = np.asarray(indices, dtype=np.int64)

    def backward(g):
        full = np.zeros_like(a.data)
        np.add.at(full, idx, g)
        a._accumulate(full)

    return _make(a.data[idx], (a,), backward)


# ---------------------------------------------------------------------------
# dense linear algebra

def matmul(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    _count_macs(a.size // a.shape[-1] * a.shape[-1] * b.shape[-1])

    def backward(g):
        if a.requires_grad:
            ga = g @ np.swapaxes(b.data, -1, -2)
            a._accumulate(_unbroadcast(ga, a.shape))
        if b.requires_grad:
            gb = np.swapaxes(a.data, -1, -2) @ g
            b._accumulate(_unbroadcast(gb, b.shape))

    return _make(a.data @ b.data, (a, b), backward)


def linear(x, w, b=None):
    """Affine map over the last axis: ``y[..., o] = sum_i x[..., i] w[i, o] (+ b[o])``."""
    x, w = _as_tensor(x), _as_tensor(w)
    if x.shape[-1] != w.shape[0]:
        raise ValueError(f"linear: input extent {x.shape[-1]} != weight rows {w.shape[0]}")
    y = matmul(x, w)
    if b is not None:
        y = add(y, _as_tensor(b))
    return y


def softmax(x, axis):
    """Numerically stable softmax along ``axis``; slices sum to 1."""
    x = _as_tensor(x)
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out_data = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        dot = (g * out_data).sum(axis=axis, keepdims=True)
        x._accumulate((g - dot) * out_data)

    return _make(out_data, (x,), backward)


# ---------------------------------------------------------------------------
# convolution kernels

def _pair(v):
    return tuple(v) if isinstance(v, (tuple, list)) else (v, v)


def _batched(x):
    """Add a singleton batch axis to a 3-d map; report whether we did."""
    if x.data.ndim == 3:
        return x.data[None], True
    if x.data.ndim == 4:
        return x.data, False
    raise ValueError(f"expected 3-d or 4-d input, got shape {x.shape}")


def conv2d(x, w, b=None, stride=1, padding=0):
    """Standard cross-correlation conv.

    ``x``: (C,H,W) or (N,C,H,W); ``w``: (Cout,Cin,kh,kw); zero padding.
    """
    x, w = _as_tensor(x), _as_tensor(w)
    xd, squeeze = _batched(x)
    cout, cin, kh, kw = w.shape
    sh, sw = _pair(stride)
    ph, pw = _pair(padding)
    n, c, h, wd = xd.shape
    if c != cin:
        raise ValueError(f"conv2d: input channels {c} != weight channels {cin}")
    ho = (h + 2 * ph - kh) // sh + 1
    wo = (wd + 2 * pw - kw) // sw + 1
    if ho <= 0 or wo <= 0:
        raise ValueError(f"conv2d: kernel {kh}x{kw} does not fit input {h}x{wd}")
    xp = np.pad(xd, ((0, 0), (0, 0), (ph, ph), (pw, pw)))
    win = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::sh, ::sw]
    cols = np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5)).reshape(n * ho * wo, cin * kh * kw)
    wmat = w.data.reshape(cout, -1)
    ymat = cols @ wmat.T
    _count_macs(n * ho * wo * cin * kh * kw * cout)
    y = ymat.reshape(n, ho, wo, cout).transpose(0, 3, 1, 2)
    if b is not None:
        bt = _as_tensor(b)
        y = y + bt.data.reshape(1, -1, 1, 1)
    else:
        bt = None
    if squeeze:
        y = y[0]

    def backward(g):
        gd = g[None] if squeeze else g
        gmat = np.ascontiguousarray(gd.transpose(0, 2, 3, 1)).reshape(n * ho * wo, cout)
        if w.requires_grad:
            w._accumulate((gmat.T @ cols).reshape(w.shape))
        if bt is not None and bt.requires_grad:
            bt._accumulate(gmat.sum(axis=0).reshape(bt.shape))
        if x.requires_grad:
            dcols = (gmat @ wmat).reshape(n, ho, wo, cin, kh, kw)
            dxp = np.zeros_like(xp)
            for i in range(kh):
                for j in range(kw):
                    dxp[:, :, i:i + sh * ho:sh, j:j + sw * wo:sw] += dcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
            dx = dxp[:, :, ph:ph + h, pw:pw + wd]
            x._accumulate(dx[0] if squeeze else dx)

    parents = (x, w) if bt is None else (x, w, bt)
    return _make(y, parents, backward)


def depthwise_xcorr(query, kernel, padding="same"):
    """Per-channel sliding dot product of ``kernel`` over ``query``.

    ``query``: (C,H,W); ``kernel``: (C,Ph,Pw) with odd extents. Each channel
    is correlated only with its own kernel slice; zero same-padding keeps
    the spatial size.
    """
    if padding != "same":
        raise ValueError("depthwise_xcorr supports same-padding only")
    query, kernel = _as_tensor(query), _as_tensor(kernel)
    if query.ndim != 3 or kernel.ndim != 3:
        raise ValueError("depthwise_xcorr expects (C,H,W) query and (C,Ph,Pw) kernel")
    c, h, w = query.shape
    ck, ph_k, pw_k = kernel.shape
    if c != ck:
        raise ValueError(f"depthwise_xcorr: channel mismatch {c} vs {ck}")
    if ph_k % 2 == 0 or pw_k % 2 == 0:
        raise ValueError(f"depthwise_xcorr: kernel extents must be odd, got {ph_k}x{pw_k}")
    ph, pw = ph_k // 2, pw_k // 2
    qp = np.pad(query.data, ((0, 0), (ph, ph), (pw, pw)))
    out_data = np.zeros_like(query.data)
    kd = kernel.data
    for i in range(ph_k):
        for j in range(pw_k):
            out_data += kd[:, i, j][:, None, None] * qp[:, i:i + h, j:j + w]
    _count_macs(c * ph_k * pw_k * h * w)

    def backward(g):
        if query.requires_grad:
            dqp = np.zeros_like(qp)
            for i in range(ph_k):
                for j in range(pw_k):
                    dqp[:, i:i + h, j:j + w] += kd[:, i, j][:, None, None] * g
            query._accumulate(dqp[:, ph:ph + h, pw:pw + w])
        if kernel.requires_grad:
            dk = np.empty_like(kd)
            for i in range(ph_k):
                for j in range(pw_k):
                    dk[:, i, j] = (g * qp[:, i:i + h, j:j + w]).sum(axis=(1, 2))
            kernel._accumulate(dk)

    return _make(out_data, (query, kernel), backward)


def _adaptive_matrix(n_in, n_out, dtype):
    """Row-stochastic averaging matrix for the standard adaptive partition."""
    m = np.zeros((n_out, n_in), dtype=dtype)
    for i in range(n_out):
        lo = (i * n_in) // n_out
        hi = -(-((i + 1) * n_in) // n_out)  # ceil
        m[i, lo:hi] = 1.0 / (hi - lo)
    return m


def adaptive_avg_pool(x, out_h, out_w):
    """Average-pool to ``out_h x out_w`` using the adaptive window partition
    (window i spans [floor(i*H/out), ceil((i+1)*H/out)) ). Pooling to 1x1 is
    the global mean. Requires out dims <= input dims."""
    x = _as_tensor(x)
    xd, squeeze = _batched(x)
    h, w = xd.shape[2], xd.shape[3]
    if out_h > h or out_w > w:
        raise ValueError(f"adaptive_avg_pool: output {out_h}x{out_w} exceeds input {h}x{w}")
    ah = _adaptive_matrix(h, out_h, xd.dtype)
    aw = _adaptive_matrix(w, out_w, xd.dtype)
    out_data = np.einsum("ih,nchw,jw->ncij", ah, xd, aw, optimize=True)
    if squeeze:
        out_data = out_data[0]

    def backward(g):
        gd = g[None] if squeeze else g
        dx = np.einsum("ih,ncij,jw->nchw", ah, gd, aw, optimize=True)
        x._accumulate(dx[0] if squeeze else dx)

    return _make(np.ascontiguousarray(out_data), (x,), backward)


def max_pool(x, kernel=2, stride=None):
    """Max pooling with square kernel (no padding)."""
    x = _as_tensor(x)
    xd, squeeze = _batched(x)
    k = int(kernel)
    s = int(stride) if stride is not None else k
    n, c, h, w = xd.shape
    ho = (h - k) // s + 1
    wo = (w - k) // s + 1
    win = np.lib.stride_tricks.sliding_window_view(xd, (k, k), axis=(2, 3))[:, :, ::s, ::s]
    out_data = win.max(axis=(4, 5))
    out = out_data[0] if squeeze else out_data

    def backward(g):
        gd = g[None] if squeeze else g
        dx = np.zeros_like(xd)
        for i in range(k):
            for j in range(k):
                sel = (xd[:, :, i:i + s * ho:s, j:j + s * wo:s] == out_data)
                dx[:, :, i:i + s * ho:s, j:j + s * wo:s] += gd * sel
        x._accumulate(dx[0] if squeeze else dx)

    return _make(np.ascontiguousarray(out), (x,), backward)


def _bilinear_matrix(n_in, n_out, dtype):
    """Sparse-as-dense row interpolation matrix, half-pixel-center convention."""
    m = np.zeros((n_out, n_in), dtype=dtype)
    if n_in == 1:
        m[:, 0] = 1.0
        return m
    src = (np.arange(n_out, dtype=np.float64) + 0.5) * n_in / n_out - 0.5
    src = np.clip(src, 0.0, n_in - 1.0)
    i0 = np.floor(src).astype(np.int64)
    i1 = np.minimum(i0 + 1, n_in - 1)
    frac = src - i0
    for r in range(n_out):
        m[r, i0[r]] += 1.0 - frac[r]
        m[r, i1[r]] += frac[r]
    return m


def bilinear_resize(x, out_h, out_w):
    """Bilinear resize of (C,H,W) or (N,C,H,W) maps (half-pixel centers)."""
    x = _as_tensor(x)
    xd, squeeze = _batched(x)
    h, w = xd.shape[2], xd.shape[3]
    rh = _bilinear_matrix(h, out_h, xd.dtype)
    rw = _bilinear_matrix(w, out_w, xd.dtype)
    out_data = np.einsum("ih,nchw,jw->ncij", rh, xd, rw, optimize=True)
    if squeeze:
        out_data = out_data[0]

    def backward(g):
        gd = g[None] if squeeze else g
        dx = np.einsum("ih,ncij,jw->nchw", rh, gd, rw, optimize=True)
        x._accumulate(dx[0] if squeeze else dx)

    return _make(np.ascontiguousarray(out_data), (x,), backward)


# ---------------------------------------------------------------------------
# modules and parameters

class Module:
    """Container that names its :class:`Parameter` attributes with dotted
    paths (checkpoint identity). Attribute insertion order is the iteration
    order, so parameter enumeration is deterministic."""

    def named_parameters(self, prefix=""):
        out = []
        for name, value in vars(self).items():
            path = f"{prefix}{name}" if prefix else name
            if isinstance(value, Parameter):
                out.append((path, value))
            elif isinstance(value, Module):
                out.extend(value.named_parameters(prefix=path + "."))
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        out.extend(item.named_parameters(prefix=f"{path}.{i}."))
                    elif isinstance(item, Parameter):
                        out.append((f"{path}.{i}", item))
        return out

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def zero_grad(self):
        for p in self.parameters():
            p.zero_grad()


def kaiming_uniform(rng, shape, fan_in):
    """Kaiming-uniform fan-in init (ReLU gain), in the active dtype."""
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(_DEFAULT_DTYPE)


# ---------------------------------------------------------------------------
# gradient checking

def grad_check(f, inputs, eps=1e-4):
    """Max relative error between analytic and central-difference gradients.

    ``f`` maps the input tensors to a scalar Tensor and is evaluated in
    float64. Error per entry is |analytic - numeric| / max(1, |numeric|);
    non-finite values raise :class:`GradCheckError` rather than being
    swallowed.
    """
    with use_dtype(np.float64):
        xs = [Tensor(np.asarray(t.data if isinstance(t, Tensor) else t,
                                dtype=np.float64).copy(), requires_grad=True)
              for t in inputs]
        out = f(*xs)
        if out.size != 1:
            raise GradCheckError(f"grad_check needs a scalar output, got shape {out.shape}")
        if not np.isfinite(out.data).all():
            raise GradCheckError("non-finite forward value")
        out.backward()
        grads = [np.zeros_like(x.data) if x.grad is None else x.grad.copy() for x in xs]

        max_err = 0.0
        for x, g in zip(xs, grads):
            flat = x.data.reshape(-1)
            gflat = g.reshape(-1)
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + eps
                fp = float(f(*xs).data)
                flat[i] = orig - eps
                fm = float(f(*xs).data)
                flat[i] = orig
                if not (np.isfinite(fp) and np.isfinite(fm)):
                    raise GradCheckError(f"non-finite value during finite differencing at entry {i}")
                num = (fp - fm) / (2.0 * eps)
                err = abs(gflat[i] - num) / max(1.0, abs(num))
                if err > max_err:
                    max_err = err
    return max_err
