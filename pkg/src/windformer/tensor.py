"""Dense-tensor numeric core with reverse-mode automatic differentiation.

A ``Tensor`` wraps a numpy array plus an optional gradient buffer. Operations
build a define-by-run tape; ``backward`` walks it once in reverse topological
order, so gradient accumulation order is fixed and runs are bit-reproducible.

Single precision is the working dtype for training; gradient verification
converts parameters to float64 (see ``training.gradient_check``).
"""

from __future__ import annotations

import contextlib

import numpy as np

from .errors import ShapeError

DEFAULT_DTYPE = np.float32

_grad_enabled = True


def is_grad_enabled() -> bool:
    return _grad_enabled


@contextlib.contextmanager
def no_grad():
    """Disable tape construction inside the block (eval / finite differences)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    """N-dimensional array with a gradient slot.

    ``data`` is a row-major numpy array. ``grad``, once populated, always has
    the same shape as ``data``. Tensors are treated as immutable after
    construction except through ops and the optimizer step.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad=False, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data, dtype=dtype if dtype is not None else None)
        if arr.dtype.kind != "f":
            arr = arr.astype(DEFAULT_DTYPE)
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = ()
        self._backward = None

    # -- introspection -------------------------------------------------
    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self):
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self):
        grad = ", grad" if self.grad is not None else ""
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}{grad})"

    # -- operator sugar ------------------------------------------------
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

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __pow__(self, p):
        return power(self, p)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes if axes else None)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis, keepdims)


class Parameter(Tensor):
    """Trainable tensor; its hierarchical name comes from the module tree."""

    __slots__ = ()

    def __init__(self, data, dtype=None):
        super().__init__(data, requires_grad=True, dtype=dtype)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


# ----------------------------------------------------------------------
# tape machinery
# ----------------------------------------------------------------------

def _node(data, parents, backward_fn) -> Tensor:
    """Wrap ``data``; record the edge only if some parent needs gradients."""
    out = Tensor(data)
    if _grad_enabled:
        track = tuple(p for p in parents if isinstance(p, Tensor) and p.requires_grad)
        if track:
            out.requires_grad = True
            out._parents = track
            out._backward = backward_fn
    return out


def _accumulate(t: Tensor, g: np.ndarray):
    # The first write copies: ops may hand the same array to several parents
    # (add), or a view of a downstream grad (reshape). Once owned, in-place
    # add keeps accumulation order fixed by the topological walk.
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = g.copy()
    else:
        t.grad += g


def _accumulate_fresh(t: Tensor, g: np.ndarray):
    # Fast path for backward fns whose g is freshly allocated at the call
    # site (or a view over private fresh storage): adopt without copying.
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = g
    else:
        t.grad += g


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    """Reduce a broadcast gradient back down to ``shape``."""
    if g.shape == tuple(shape):
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _topological_order(root: Tensor):
    order = []
    visited = set()
    stack = [(root, False)]
    while stack:
        node, processed = stack.pop()
        if processed:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in visited:
                stack.append((p, False))
    return order


def backward(loss: Tensor):
    """Populate ``grad`` of every reachable tensor that requires one.

    ``loss`` must be scalar. Repeated calls accumulate unless grads are
    zeroed in between. Traversal order is deterministic.
    """
    if loss.size != 1:
        raise ShapeError(f"backward expects a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    order = _topological_order(loss)
    for node in order:
        # only leaves (parameters, inputs) retain grads across calls
        if node._backward is not None:
            node.grad = None
    loss.grad = np.ones_like(loss.data)
    for node in reversed(order):
        if node._backward is not None:
            node._backward(node.grad)


# ----------------------------------------------------------------------
# elementwise arithmetic
# ----------------------------------------------------------------------

def add(a, b) -> Tensor:
    if not isinstance(b, Tensor):
        a = as_tensor(a)

        def bwd_s(g, a=a):
            _accumulate(a, g)

        return _node(a.data + b, (a,), bwd_s)
    if not isinstance(a, Tensor):
        return add(b, a)

    def bwd(g, a=a, b=b):
        _accumulate(a, _unbroadcast(g, a.shape))
        _accumulate(b, _unbroadcast(g, b.shape))

    return _node(a.data + b.data, (a, b), bwd)


def sub(a, b) -> Tensor:
    if isinstance(b, Tensor) and not isinstance(a, Tensor):

        def bwd_l(g, b=b):
            _accumulate(b, _unbroadcast(-g, b.shape))

        return _node(a - b.data, (b,), bwd_l)
    if not isinstance(b, Tensor):
        a = as_tensor(a)

        def bwd_s(g, a=a):
            _accumulate(a, g)

        return _node(a.data - b, (a,), bwd_s)

    def bwd(g, a=a, b=b):
        _accumulate(a, _unbroadcast(g, a.shape))
        _accumulate(b, _unbroadcast(-g, b.shape))

    return _node(a.data - b.data, (a, b), bwd)


def mul(a, b) -> Tensor:
    if not isinstance(b, Tensor):
        a = as_tensor(a)

        def bwd_s(g, a=a, b=b):
            _accumulate_fresh(a, g * b)

        return _node(a.data * b, (a,), bwd_s)
    if not isinstance(a, Tensor):
        return mul(b, a)

    def bwd(g, a=a, b=b):
        _accumulate_fresh(a, _unbroadcast(g * b.data, a.shape))
        _accumulate_fresh(b, _unbroadcast(g * a.data, b.shape))

    return _node(a.data * b.data, (a, b), bwd)


def div(a, b) -> Tensor:
    if not isinstance(b, Tensor):
        return mul(a, 1.0 / b)
    a = as_tensor(a)
    out_data = a.data / b.data

    def bwd(g, a=a, b=b, out_data=out_data):
        _accumulate_fresh(a, _unbroadcast(g / b.data, a.shape))
        _accumulate_fresh(b, _unbroadcast(-g * out_data / b.data, b.shape))

    return _node(out_data, (a, b), bwd)


def power(a: Tensor, p) -> Tensor:
    a = as_tensor(a)
    out_data = a.data ** p

    def bwd(g, a=a, p=p):
        _accumulate_fresh(a, g * p * a.data ** (p - 1))

    return _node(out_data, (a,), bwd)


def texp(a: Tensor) -> Tensor:
    out_data = np.exp(a.data)

    def bwd(g, a=a, out_data=out_data):
        _accumulate_fresh(a, g * out_data)

    return _node(out_data, (a,), bwd)


def tanh(a: Tensor) -> Tensor:
    out_data = np.tanh(a.data)

    def bwd(g, a=a, out_data=out_data):
        _accumulate_fresh(a, g * (1.0 - out_data * out_data))

    return _node(out_data, (a,), bwd)


def sigmoid(a: Tensor) -> Tensor:
    # 0.5 * (tanh(x/2) + 1): one vectorized pass, stable for any input
    out_data = np.tanh(a.data * 0.5)
    out_data += 1.0
    out_data *= 0.5

    def bwd(g, a=a, out_data=out_data):
        _accumulate_fresh(a, g * out_data * (1.0 - out_data))

    return _node(out_data, (a,), bwd)


def relu(a: Tensor) -> Tensor:
    out_data = np.maximum(a.data, 0)

    def bwd(g, a=a):
        _accumulate_fresh(a, g * (a.data > 0))

    return _node(out_data, (a,), bwd)


def abs_(a: Tensor) -> Tensor:
    out_data = np.abs(a.data)

    def bwd(g, a=a):
        _accumulate_fresh(a, g * np.sign(a.data))

    return _node(out_data, (a,), bwd)


# ----------------------------------------------------------------------
# reductions
# ----------------------------------------------------------------------

def tsum(a: Tensor, axis=None, keepdims=False) -> Tensor:
    out_data = a.data.sum(axis=axis, keepdims=keepdims)

    def bwd(g, a=a, axis=axis, keepdims=keepdims):
        if axis is None:
            _accumulate_fresh(a, np.broadcast_to(g, a.shape).copy())
            return
        axes = axis if isinstance(axis, tuple) else (axis,)
        if not keepdims:
            g = np.expand_dims(g, axes)
        _accumulate_fresh(a, np.broadcast_to(g, a.shape).copy())

    return _node(out_data, (a,), bwd)


def tmean(a: Tensor, axis=None, keepdims=False) -> Tensor:
    if axis is None:
        n = a.size
    else:
        axes = axis if isinstance(axis, tuple) else (axis,)
        n = 1
        for ax in axes:
            n *= a.shape[ax]
    return mul(tsum(a, axis, keepdims), 1.0 / n)


# ----------------------------------------------------------------------
# shape manipulation
# ----------------------------------------------------------------------

def reshape(a: Tensor, shape) -> Tensor:
    old = a.shape

    def bwd(g, a=a, old=old):
        _accumulate(a, g.reshape(old))

    return _node(a.data.reshape(shape), (a,), bwd)


def transpose(a: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    inv = np.argsort(axes)

    def bwd(g, a=a, inv=inv):
        _accumulate(a, g.transpose(inv))

    return _node(a.data.transpose(axes), (a,), bwd)


def concat(tensors, axis=0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    out_data = np.concatenate([t.data for t in tensors], axis=axis)

    def bwd(g, tensors=tensors, sizes=sizes, axis=axis):
        offs = np.cumsum([0] + sizes)
        for t, lo, hi in zip(tensors, offs[:-1], offs[1:]):
            sl = [slice(None)] * g.ndim
            sl[axis] = slice(lo, hi)
            _accumulate(t, g[tuple(sl)])

    return _node(out_data, tuple(tensors), bwd)


def stack(tensors, axis=0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    out_data = np.stack([t.data for t in tensors], axis=axis)

    def bwd(g, tensors=tensors, axis=axis):
        for i, t in enumerate(tensors):
            _accumulate(t, np.take(g, i, axis=axis))

    return _node(out_data, tuple(tensors), bwd)


def getitem(a: Tensor, idx) -> Tensor:
    advanced = isinstance(idx, np.ndarray) or (
        isinstance(idx, tuple) and any(isinstance(i, (np.ndarray, list)) for i in idx)
    )

    def bwd(g, a=a, idx=idx, advanced=advanced):
        ga = np.zeros(a.shape, dtype=g.dtype)
        if advanced:
            np.add.at(ga, idx, g)
        else:
            ga[idx] += g
        _accumulate_fresh(a, ga)

    return _node(a.data[idx], (a,), bwd)


def pad(a: Tensor, pad_width) -> Tensor:
    """Zero-pad; ``pad_width`` as in ``np.pad``."""
    pw = tuple((int(lo), int(hi)) for lo, hi in pad_width)

    def bwd(g, a=a, pw=pw):
        sl = tuple(slice(lo, g.shape[i] - hi) for i, (lo, hi) in enumerate(pw))
        _accumulate(a, g[sl])

    return _node(np.pad(a.data, pw), (a,), bwd)


def roll(a: Tensor, shift, axis) -> Tensor:
    def bwd(g, a=a, shift=shift, axis=axis):
        neg = tuple(-s for s in shift) if isinstance(shift, tuple) else -shift
        _accumulate(a, np.roll(g, neg, axis=axis))

    return _node(np.roll(a.data, shift, axis=axis), (a,), bwd)


# ----------------------------------------------------------------------
# linear algebra and layers
# ----------------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Standard (optionally batch-stacked) matrix product.

    Backward accumulates ``dL/da = dL/dc @ b^T`` and ``dL/db = a^T @ dL/dc``.
    """
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs 2-d or stacked operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: inner dimensions disagree: {a.shape} vs {b.shape}")
    out_data = np.matmul(a.data, b.data)

    def bwd(g, a=a, b=b):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        _accumulate_fresh(a, _unbroadcast(ga, a.shape))
        _accumulate_fresh(b, _unbroadcast(gb, b.shape))

    return _node(out_data, (a, b), bwd)


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """Affine map over the trailing dimension: ``x @ weight^T + bias``.

    ``weight`` has shape ``[d_out, d_in]``; leading dims of ``x`` broadcast.
    """
    x = as_tensor(x)
    if x.shape[-1] != weight.shape[-1]:
        raise ShapeError(
            f"linear: input features {x.shape} do not match weight {weight.shape}"
        )
    lead = x.shape[:-1]
    x2 = reshape(x, (-1, x.shape[-1])) if x.ndim != 2 else x
    out = matmul(x2, transpose(weight))
    if x.ndim != 2:
        out = reshape(out, lead + (weight.shape[0],))
    if bias is not None:
        out = add(out, bias)
    return out


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, padding=None) -> Tensor:
    """2-d cross-correlation (no kernel flip), stride 1.

    ``x``: ``[B, C_in, H, W]`` or ``[C_in, H, W]``; ``weight``:
    ``[C_out, C_in, k, k]`` with odd ``k``. Default padding ``(k-1)//2``
    keeps the spatial size. Contraction order is fixed (kernel row-major,
    then input channel) so the nested-loop oracle matches it exactly on
    exactly-representable inputs.
    """
    x = as_tensor(x)
    squeeze = x.ndim == 3
    if squeeze:
        x = reshape(x, (1,) + x.shape)
    cout, cin, kh, kw = weight.shape
    if kh != kw or kh % 2 == 0:
        raise ShapeError(f"conv2d: kernel must be square with odd size, got {weight.shape}")
    if x.shape[1] != cin:
        raise ShapeError(
            f"conv2d: input channels {x.shape} do not match weight {weight.shape}"
        )
    p = (kh - 1) // 2 if padding is None else int(padding)
    k = kh
    b_, _, h, w = x.shape
    xp = x.data
    if p:
        xp = np.pad(xp, ((0, 0), (0, 0), (p, p), (p, p)))
    ho, wo = h + 2 * p - k + 1, w + 2 * p - k + 1
    # im2col with column order (kh, kw, cin)
    win = np.lib.stride_tricks.sliding_window_view(xp, (k, k), axis=(2, 3))
    cols = win.transpose(0, 4, 5, 1, 2, 3).reshape(b_, k * k * cin, ho * wo)
    w2 = weight.data.transpose(0, 2, 3, 1).reshape(cout, k * k * cin)
    out_data = np.matmul(w2[None], cols).reshape(b_, cout, ho, wo)
    if bias is not None:
        out_data += bias.data[None, :, None, None]
    parents = (x, weight) if bias is None else (x, weight, bias)

    def bwd(g, x=x, weight=weight, bias=bias, cols=cols, w2=w2,
            p=p, k=k, ho=ho, wo=wo):
        b_, cout = g.shape[0], g.shape[1]
        cin = weight.shape[1]
        g2 = g.reshape(b_, cout, ho * wo)
        if weight.requires_grad:
            gw = np.matmul(g2, cols.transpose(0, 2, 1)).sum(axis=0)
            gw = gw.reshape(cout, k, k, cin).transpose(0, 3, 1, 2)
            _accumulate_fresh(weight, np.ascontiguousarray(gw))
        if bias is not None and bias.requires_grad:
            _accumulate_fresh(bias, g.sum(axis=(0, 2, 3)))
        if x.requires_grad:
            gcols = np.matmul(w2.T[None], g2).reshape(b_, k, k, cin, ho, wo)
            hp, wp = x.shape[2] + 2 * p, x.shape[3] + 2 * p
            gxp = np.zeros((b_, cin, hp, wp), dtype=g.dtype)
            for i in range(k):
                for j in range(k):
                    gxp[:, :, i:i + ho, j:j + wo] += gcols[:, i, j]
            # gxp is private fresh storage, so adopting its view is safe
            gx = gxp[:, :, p:hp - p, p:wp - p] if p else gxp
            _accumulate_fresh(x, gx)

    out = _node(out_data, parents, bwd)
    if squeeze:
        out = reshape(out, out.shape[1:])
    return out


def softmax(x: Tensor, axis=-1) -> Tensor:
    """Numerically stable softmax; the row max is detached (softmax is
    invariant to constant shifts, so its gradient contribution is zero)."""
    m = x.data.max(axis=axis, keepdims=True)
    e = texp(sub(x, m))
    return div(e, tsum(e, axis=axis, keepdims=True))


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize over the trailing dimension, then apply the affine pair."""
    mu = tmean(x, axis=-1, keepdims=True)
    xc = sub(x, mu)
    var = tmean(mul(xc, xc), axis=-1, keepdims=True)
    inv = power(add(var, eps), -0.5)
    return add(mul(mul(xc, inv), gamma), beta)


def global_avg_pool(x: Tensor) -> Tensor:
    """Per-channel spatial mean: ``[..., C, H, W] -> [..., C]``."""
    return tmean(x, axis=(-2, -1))
