"""Dense tensors with reverse-mode automatic differentiation.

Image batches use NCHW layout. Scalars are float32 by default; pass
``dtype=np.float64`` when building tensors for finite-difference gradient
checking. Every op validates shapes up front and raises
:class:`~kneegrade.errors.ConfigurationError` instead of letting numpy
broadcast silently.

Gradient mechanics follow the usual tape-free graph pattern: each op links
its output to its parents and stores a backward closure. ``backward(loss)``
topologically sorts the graph reachable from ``loss`` and runs the closures
once each. Intermediate gradients live in a scratch dict; only leaf tensors
(those created by the caller) accumulate into ``.grad``, so calling
``backward`` twice without zeroing doubles leaf gradients and nothing else.
"""

from __future__ import annotations

import numpy as np

from .errors import ConfigurationError, DataError, NumericsError, UsageError

# When enabled, every op output is scanned and a NumericsError is raised the
# moment a NaN/Inf would enter the graph. Costs one pass per op output.
FINITE_CHECKS = True

_ALLOWED_DTYPES = (np.float32, np.float64)


def _coerce(data, dtype):
    if dtype is None:
        # float64 is opt-in (gradient checking); everything else runs 32-bit
        arr = np.asarray(data, dtype=np.float32)
    else:
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in _ALLOWED_DTYPES:
            raise ConfigurationError(f"tensors are float32/float64 only, got {arr.dtype}")
    return arr


class Tensor:
    """A numpy array plus gradient bookkeeping."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad=False, dtype=None):
        self.data = _coerce(data, dtype)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = ()
        self._backward = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self):
        return self.data.size

    @property
    def ndim(self):
        return self.data.ndim

    def zero_grad(self):
        self.grad = None

    def detach(self):
        return Tensor(self.data)

    def item(self):
        if self.data.size != 1:
            raise UsageError(f"item() needs a single element, got shape {self.shape}")
        return float(self.data.reshape(()))

    def backward(self):
        backward(self)

    # Small operator surface for tests and loss arithmetic. Shapes must
    # match exactly; use broadcast_to for anything fancier.
    def __add__(self, other):
        return add(self, _wrap(other, self))

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __sub__(self, other):
        return add(self, scale(_wrap(other, self), -1.0))

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.dtype.name}, requires_grad={self.requires_grad})"


def _wrap(value, like):
    if isinstance(value, Tensor):
        return value
    return Tensor(np.full_like(like.data, float(value)))


def _node(data, parents, backward_fn, op):
    """Create a graph node; drops the tape when no parent wants gradients."""
    if FINITE_CHECKS and not np.all(np.isfinite(data)):
        raise NumericsError(f"{op} produced non-finite values")
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.requires_grad = any(p.requires_grad for p in parents)
    if out.requires_grad:
        out._parents = tuple(parents)
        out._backward = backward_fn
    else:
        out._parents = ()
        out._backward = None
    return out


def _put(grads, t, g):
    """Accumulate a gradient contribution for tensor ``t`` in the scratch dict.

    Closures may hand the incoming output gradient to at most one parent
    without copying; every other contribution must be a fresh array, because
    accumulation mutates the stored buffer in place.
    """
    if not t.requires_grad:
        return
    key = id(t)
    if key in grads:
        grads[key] += g
    else:
        grads[key] = g


def backward(loss):
    """Run reverse-mode accumulation from a scalar ``loss``.

    Every reachable leaf with ``requires_grad`` receives ``d loss / d leaf``
    in ``.grad``. Gradients add onto whatever ``.grad`` already holds.
    """
    if not isinstance(loss, Tensor):
        raise UsageError("backward expects a Tensor")
    if loss.data.size != 1:
        raise UsageError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise UsageError("loss does not require gradients; nothing to do")

    # Iterative topological sort: parents come before children in `topo`.
    topo = []
    state = {}  # id -> 0 discovered, 1 finished
    stack = [loss]
    while stack:
        node = stack[-1]
        key = id(node)
        if state.get(key) == 1:
            stack.pop()
            continue
        if state.get(key) == 0:
            state[key] = 1
            topo.append(node)
            stack.pop()
            continue
        state[key] = 0
        for p in node._parents:
            if state.get(id(p)) is None:
                stack.append(p)

    grads = {id(loss): np.ones_like(loss.data)}
    for node in reversed(topo):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is not None:
            node._backward(g, grads)
        elif node.requires_grad:
            if node.grad is None:
                node.grad = np.zeros_like(node.data)
            node.grad += g


# ---------------------------------------------------------------------------
# elementwise ops


def _check_same_shape(a, b, op):
    if a.data.shape != b.data.shape:
        raise ConfigurationError(f"{op}: operand shapes {a.data.shape} and {b.data.shape} differ")


def add(a, b):
    _check_same_shape(a, b, "add")
    def bwd(g, grads):
        _put(grads, a, g)
        _put(grads, b, g.copy())
    return _node(a.data + b.data, (a, b), bwd, "add")


def mul(a, b):
    _check_same_shape(a, b, "mul")
    def bwd(g, grads):
        _put(grads, a, g * b.data)
        _put(grads, b, g * a.data)
    return _node(a.data * b.data, (a, b), bwd, "mul")


def scale(a, s):
    s = float(s)
    def bwd(g, grads):
        _put(grads, a, g * s)
    return _node(a.data * s, (a,), bwd, "scale")


def relu(a):
    mask = a.data > 0
    def bwd(g, grads):
        _put(grads, a, g * mask)
    return _node(a.data * mask, (a,), bwd, "relu")


def sigmoid(a):
    # Split on sign so exp never overflows.
    x = a.data
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    def bwd(g, grads):
        _put(grads, a, g * out * (1.0 - out))
    return _node(out, (a,), bwd, "sigmoid")


# ---------------------------------------------------------------------------
# shape ops


def reshape(a, shape):
    shape = tuple(int(s) for s in shape)
    if int(np.prod(shape, dtype=np.int64)) != a.data.size:
        raise ConfigurationError(f"reshape: cannot view {a.data.shape} as {shape}")
    old = a.data.shape
    def bwd(g, grads):
        _put(grads, a, g.reshape(old))
    return _node(a.data.reshape(shape), (a,), bwd, "reshape")


def broadcast_to(a, shape):
    shape = tuple(int(s) for s in shape)
    try:
        out = np.broadcast_to(a.data, shape)
    except ValueError as exc:
        raise ConfigurationError(f"broadcast_to: {a.data.shape} -> {shape}: {exc}") from None
    src = a.data.shape
    # Axes added on the left, plus axes stretched from 1, are summed out on
    # the way back.
    added = len(shape) - len(src)
    summed = tuple(range(added)) + tuple(
        added + i for i, s in enumerate(src) if s == 1 and shape[added + i] != 1
    )
    def bwd(g, grads):
        red = g.sum(axis=summed, keepdims=False) if summed else g
        _put(grads, a, red.reshape(src).copy() if red.shape != src else red.copy())
    return _node(np.ascontiguousarray(out), (a,), bwd, "broadcast_to")


def reduce_sum(a, axis=None, keepdims=False):
    if axis is None:
        axes = tuple(range(a.data.ndim))
    elif isinstance(axis, int):
        axes = (axis % a.data.ndim,)
    else:
        axes = tuple(ax % a.data.ndim for ax in axis)
    out = a.data.sum(axis=axes, keepdims=keepdims)
    out = np.asarray(out)
    src = a.data.shape
    def bwd(g, grads):
        gk = g if keepdims else np.expand_dims(g, axes) if axes else g
        _put(grads, a, np.broadcast_to(gk, src).copy())
    return _node(out, (a,), bwd, "reduce_sum")


def mean_all(a):
    n = a.data.size
    return scale(reduce_sum(a), 1.0 / n)


# ---------------------------------------------------------------------------
# dense / convolutional ops


def linear(x, w, b=None):
    """``x @ w.T + b`` for x [N, F], w [O, F], b [O]."""
    if x.data.ndim != 2 or w.data.ndim != 2:
        raise ConfigurationError(
            f"linear: expected 2-D activations and weights, got {x.data.shape} and {w.data.shape}")
    if x.data.shape[1] != w.data.shape[1]:
        raise ConfigurationError(
            f"linear: feature width {x.data.shape[1]} does not match weight width {w.data.shape[1]}")
    if b is not None and b.data.shape != (w.data.shape[0],):
        raise ConfigurationError(f"linear: bias shape {b.data.shape} should be ({w.data.shape[0]},)")
    out = x.data @ w.data.T
    if b is not None:
        out = out + b.data
    parents = (x, w) if b is None else (x, w, b)
    def bwd(g, grads):
        _put(grads, x, g @ w.data)
        _put(grads, w, g.T @ x.data)
        if b is not None:
            _put(grads, b, g.sum(axis=0))
    return _node(out, parents, bwd, "linear")


def _conv_geometry(x_shape, w_shape, stride, padding, groups):
    n, cin, h, wdt = x_shape
    cout, cper, kh, kw = w_shape
    if cin % groups or cout % groups:
        raise ConfigurationError(
            f"conv2d: groups={groups} must divide in_channels={cin} and out_channels={cout}")
    if cper != cin // groups:
        raise ConfigurationError(
            f"conv2d: weight expects {cper} channels per group, input provides {cin // groups}")
    hp, wp = h + 2 * padding, wdt + 2 * padding
    if kh > hp or kw > wp:
        raise ConfigurationError(
            f"conv2d: kernel ({kh},{kw}) larger than padded input ({hp},{wp})")
    ho = (hp - kh) // stride + 1
    wo = (wp - kw) // stride + 1
    return ho, wo


def conv2d(x, w, b=None, stride=1, padding=0, groups=1):
    """2-D cross correlation with optional channel groups.

    x: [N, Cin, H, W]; w: [Cout, Cin//groups, kH, kW]; b: [Cout] or None.
    Forward runs im2col then one batched matmul per call (groups stacked on
    the leading axis); backward folds the column gradient back with a loop
    over the kH*kW kernel offsets, which keeps everything vectorized.
    """
    if x.data.ndim != 4 or w.data.ndim != 4:
        raise ConfigurationError(
            f"conv2d: expected NCHW input and OIHW weight, got {x.data.shape} and {w.data.shape}")
    stride = int(stride)
    padding = int(padding)
    groups = int(groups)
    if stride < 1 or padding < 0 or groups < 1:
        raise ConfigurationError("conv2d: stride >= 1, padding >= 0, groups >= 1 required")
    n, cin, h, wdt = x.data.shape
    cout, _, kh, kw = w.data.shape
    ho, wo = _conv_geometry(x.data.shape, w.data.shape, stride, padding, groups)
    if b is not None and b.data.shape != (cout,):
        raise ConfigurationError(f"conv2d: bias shape {b.data.shape} should be ({cout},)")
    cg, og = cin // groups, cout // groups

    if padding:
        xp = np.zeros((n, cin, h + 2 * padding, wdt + 2 * padding), dtype=x.data.dtype)
        xp[:, :, padding:padding + h, padding:padding + wdt] = x.data
    else:
        xp = x.data
    win = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(2, 3))
    win = win[:, :, ::stride, ::stride]  # [N, Cin, Ho, Wo, kh, kw]
    cols = win.reshape(n, groups, cg, ho, wo, kh, kw)
    cols = cols.transpose(1, 0, 3, 4, 2, 5, 6).reshape(groups, n * ho * wo, cg * kh * kw)
    cols = np.ascontiguousarray(cols)
    wg = w.data.reshape(groups, og, cg * kh * kw)

    out = np.matmul(cols, wg.transpose(0, 2, 1))          # [g, N*Ho*Wo, og]
    out = out.reshape(groups, n, ho, wo, og).transpose(1, 0, 4, 2, 3)
    out = np.ascontiguousarray(out).reshape(n, cout, ho, wo)
    if b is not None:
        out += b.data[None, :, None, None]

    parents = (x, w) if b is None else (x, w, b)

    def bwd(g, grads):
        gg = g.reshape(n, groups, og, ho, wo).transpose(1, 0, 3, 4, 2)
        gg = np.ascontiguousarray(gg).reshape(groups, n * ho * wo, og)
        dw = np.matmul(gg.transpose(0, 2, 1), cols).reshape(w.data.shape)
        _put(grads, w, dw)
        if b is not None:
            _put(grads, b, g.sum(axis=(0, 2, 3)))
        if x.requires_grad:
            dcols = np.matmul(gg, wg)                      # [g, N*Ho*Wo, cg*kh*kw]
            dcols = dcols.reshape(groups, n, ho, wo, cg, kh, kw)
            dcols = dcols.transpose(1, 0, 4, 2, 3, 5, 6).reshape(n, cin, ho, wo, kh, kw)
            dxp = np.zeros_like(xp)
            for ki in range(kh):
                for kj in range(kw):
                    dxp[:, :, ki:ki + stride * ho:stride, kj:kj + stride * wo:stride] += \
                        dcols[:, :, :, :, ki, kj]
            dx = dxp[:, :, padding:padding + h, padding:padding + wdt] if padding else dxp
            _put(grads, x, np.ascontiguousarray(dx))

    return _node(out, parents, bwd, "conv2d")


def batch_norm2d(x, gamma, beta, running_mean, running_var, training,
                 momentum=0.1, eps=1e-5):
    """Per-channel batch normalization over [N, C, H, W].

    ``running_mean``/``running_var`` are plain float arrays owned by the
    caller; in training mode they are updated in place with the biased batch
    statistics (``new = (1 - momentum) * old + momentum * batch``).
    """
    if x.data.ndim != 4:
        raise ConfigurationError(f"batch_norm2d: expected NCHW input, got {x.data.shape}")
    n, c, h, w = x.data.shape
    if gamma.data.shape != (c,) or beta.data.shape != (c,):
        raise ConfigurationError(
            f"batch_norm2d: gamma/beta must have shape ({c},), got {gamma.data.shape}/{beta.data.shape}")
    m = n * h * w
    if training:
        if m < 2:
            from .errors import NormalizationError
            raise NormalizationError(
                "batch_norm2d: training mode needs at least 2 values per channel")
        mean = x.data.mean(axis=(0, 2, 3))
        var = x.data.var(axis=(0, 2, 3))  # biased, matches the normalizer
        running_mean *= (1.0 - momentum)
        running_mean += momentum * mean.astype(running_mean.dtype)
        running_var *= (1.0 - momentum)
        running_var += momentum * var.astype(running_var.dtype)
    else:
        mean = running_mean.astype(x.data.dtype)
        var = running_var.astype(x.data.dtype)

    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mean[None, :, None, None]) * inv[None, :, None, None]
    out = gamma.data[None, :, None, None] * xhat + beta.data[None, :, None, None]

    def bwd(g, grads):
        _put(grads, beta, g.sum(axis=(0, 2, 3)))
        _put(grads, gamma, (g * xhat).sum(axis=(0, 2, 3)))
        if not x.requires_grad:
            return
        gxhat = g * gamma.data[None, :, None, None]
        if training:
            s1 = gxhat.sum(axis=(0, 2, 3))
            s2 = (gxhat * xhat).sum(axis=(0, 2, 3))
            dx = (gxhat - (s1[None, :, None, None] + xhat * s2[None, :, None, None]) / m) \
                * inv[None, :, None, None]
        else:
            dx = gxhat * inv[None, :, None, None]
        _put(grads, x, dx)

    return _node(out, (x, gamma, beta), bwd, "batch_norm2d")


def avg_pool2d(x, kernel, stride=None):
    """Non-padded average pooling, window ``kernel`` and step ``stride``."""
    if x.data.ndim != 4:
        raise ConfigurationError(f"avg_pool2d: expected NCHW input, got {x.data.shape}")
    k = int(kernel)
    s = int(stride) if stride is not None else k
    n, c, h, w = x.data.shape
    if k < 1 or s < 1:
        raise ConfigurationError("avg_pool2d: kernel and stride must be >= 1")
    if k > h or k > w:
        raise ConfigurationError(f"avg_pool2d: window {k} larger than input ({h},{w})")
    ho = (h - k) // s + 1
    wo = (w - k) // s + 1
    win = np.lib.stride_tricks.sliding_window_view(x.data, (k, k), axis=(2, 3))
    out = win[:, :, ::s, ::s].mean(axis=(4, 5))
    inv = 1.0 / (k * k)
    def bwd(g, grads):
        if not x.requires_grad:
            return
        dx = np.zeros_like(x.data)
        gk = g * inv
        for ki in range(k):
            for kj in range(k):
                dx[:, :, ki:ki + s * ho:s, kj:kj + s * wo:s] += gk
        _put(grads, x, dx)
    return _node(np.ascontiguousarray(out), (x,), bwd, "avg_pool2d")


def global_avg_pool(x):
    """Spatial mean: [N, C, H, W] -> [N, C]."""
    if x.data.ndim != 4:
        raise ConfigurationError(f"global_avg_pool: expected NCHW input, got {x.data.shape}")
    n, c, h, w = x.data.shape
    out = x.data.mean(axis=(2, 3))
    def bwd(g, grads):
        if x.requires_grad:
            _put(grads, x, np.broadcast_to(g[:, :, None, None], x.data.shape) * (1.0 / (h * w)))
    return _node(out, (x,), bwd, "global_avg_pool")


def dropout(x, p, training, rng):
    """Inverted dropout; identity when not training or p == 0."""
    p = float(p)
    if not 0.0 <= p < 1.0:
        raise ConfigurationError(f"dropout: p must lie in [0, 1), got {p}")
    if not training or p == 0.0:
        return x
    if rng is None:
        raise UsageError("dropout: training mode needs an rng")
    keep = (rng.random(x.data.shape) >= p).astype(x.data.dtype)
    keep *= 1.0 / (1.0 - p)
    def bwd(g, grads):
        _put(grads, x, g * keep)
    return _node(x.data * keep, (x,), bwd, "dropout")


# ---------------------------------------------------------------------------
# classification ops


def softmax(x):
    """Row-wise softmax for [N, K] logits, shifted for stability."""
    if x.data.ndim != 2:
        raise ConfigurationError(f"softmax: expected [N, K] logits, got {x.data.shape}")
    z = x.data - x.data.max(axis=1, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=1, keepdims=True)
    def bwd(g, grads):
        dot = (g * out).sum(axis=1, keepdims=True)
        _put(grads, x, (g - dot) * out)
    return _node(out, (x,), bwd, "softmax")


def cross_entropy(logits, targets):
    """Mean negative log likelihood of integer ``targets`` under ``logits``.

    Computed as ``logsumexp(row) - row[target]`` per row, so no probability
    is ever materialized at 0.
    """
    if logits.data.ndim != 2:
        raise ConfigurationError(f"cross_entropy: expected [N, K] logits, got {logits.data.shape}")
    t = np.asarray(targets)
    if t.ndim != 1 or t.shape[0] != logits.data.shape[0]:
        raise ConfigurationError(
            f"cross_entropy: targets shape {t.shape} does not match batch {logits.data.shape[0]}")
    if not np.issubdtype(t.dtype, np.integer):
        raise DataError("cross_entropy: targets must be integers")
    n, k = logits.data.shape
    bad = np.nonzero((t < 0) | (t >= k))[0]
    if bad.size:
        raise DataError(
            f"cross_entropy: target {int(t[bad[0]])} at row {int(bad[0])} outside [0, {k - 1}]")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1))
    nll = lse - z[np.arange(n), t]
    out = np.asarray(nll.mean(), dtype=logits.data.dtype)
    sm = np.exp(z) / np.exp(z).sum(axis=1, keepdims=True)
    def bwd(g, grads):
        d = sm.copy()
        d[np.arange(n), t] -= 1.0
        _put(grads, logits, d * (float(g) / n))
    return _node(out, (logits,), bwd, "cross_entropy")
