"""Reverse-mode autodiff over dense numpy arrays.

The engine is deliberately small: a `Tensor` wraps a contiguous ndarray and
remembers how it was produced, `backward` replays the recorded graph in
reverse topological order, and the op set is exactly what the embedding
model, the two losses and the evaluator need. There is no broadcasting
beyond scalar-with-anything, no views escaping an op, and no device story.

Training runs in float32; verification (finite-difference checks) switches
the default dtype to float64 via `use_dtype`.
"""

from __future__ import annotations

from contextlib import contextmanager

import numpy as np

_default_dtype = np.float32
_grad_enabled = True

# Set to True to assert finiteness of every op output (slow, debug only).
debug_checks = False

OP_CATALOG: dict[str, str] = {}


def catalog_op(doc):
    def deco(fn):
        OP_CATALOG[fn.__name__] = doc
        return fn
    return deco


def op_catalog() -> dict[str, str]:
    """Name -> one-line contract for every differentiable primitive."""
    return dict(OP_CATALOG)


def default_dtype():
    return _default_dtype


def set_default_dtype(dtype) -> None:
    global _default_dtype
    dtype = np.dtype(dtype).type
    if dtype not in (np.float32, np.float64):
        raise ValueError(f"default dtype must be float32 or float64, got {dtype}")
    _default_dtype = dtype


@contextmanager
def use_dtype(dtype):
    """Temporarily switch the default tensor dtype (e.g. float64 for checks)."""
    prev = _default_dtype
    set_default_dtype(dtype)
    try:
        yield
    finally:
        set_default_dtype(prev)


def is_grad_enabled() -> bool:
    return _grad_enabled


@contextmanager
def no_grad():
    """Disable graph recording inside the block (evaluation, data prep)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    """Dense real tensor plus the bookkeeping for reverse-mode backprop."""

    __slots__ = ("data", "grad", "requires_grad", "_prev", "_backward", "_op", "_done")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if isinstance(data, Tensor):
            raise TypeError("wrap raw data, not another Tensor")
        if dtype is not None:
            arr = np.asarray(data, dtype=dtype)
        elif isinstance(data, np.ndarray) and data.dtype in (np.float32, np.float64):
            arr = data  # keep an explicit float dtype (e.g. float64 checks)
        else:
            arr = np.asarray(data, dtype=_default_dtype)
        self.data = np.ascontiguousarray(arr)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._prev = ()
        self._backward = None
        self._op = None
        self._done = False

    # -- introspection -----------------------------------------------------

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

    @property
    def _tracked(self) -> bool:
        return self.requires_grad or bool(self._prev)

    def item(self) -> float:
        if self.data.size != 1:
            raise ValueError(f"item: tensor has {self.data.size} elements")
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        backward(self)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype.name}, op={self._op})"

    # -- operator sugar ----------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(_as_tensor(other, self), self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("tensor/tensor division is not in the op catalog")
        return mul(self, 1.0 / float(other))

    def __matmul__(self, other):
        return matmul(self, other)

    def relu(self):
        return relu(self)

    def sum(self, axis=None):
        return reduce_sum(self, axis)

    def mean(self, axis=None):
        return reduce_mean(self, axis)


# -- graph plumbing ---------------------------------------------------------


def _from_op(data, prev, op, backward_fn):
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.requires_grad = False
    out._done = False
    out._op = op
    if _grad_enabled and any(p._tracked for p in prev):
        out._prev = tuple(prev)
        out._backward = backward_fn
    else:
        out._prev = ()
        out._backward = None
    if debug_checks and not np.isfinite(data).all():
        raise FloatingPointError(f"{op}: non-finite values in output")
    return out


def _acc(t: Tensor, g) -> None:
    if not t._tracked:
        return
    if t.grad is None:
        t.grad = np.array(g, dtype=t.data.dtype, copy=True)
    else:
        t.grad += g


def backward(loss: Tensor) -> None:
    """Backpropagate from a scalar loss, filling `.grad` on every reachable
    tensor that requires (or transports) gradients."""
    if loss.data.size != 1:
        raise ValueError(f"backward: loss must be scalar, got shape {loss.data.shape}")
    if loss._done:
        raise RuntimeError("backward: graph already consumed, rerun the forward pass")
    if not loss._prev:
        raise RuntimeError("backward: tensor is not attached to a graph")

    topo: list[Tensor] = []
    visited: set[int] = set()
    work: list[tuple[Tensor, bool]] = [(loss, False)]
    while work:
        node, expanded = work.pop()
        if expanded:
            topo.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        work.append((node, True))
        for child in node._prev:
            if id(child) not in visited:
                work.append((child, False))

    loss.grad = np.ones_like(loss.data)
    for node in reversed(topo):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)
    loss._done = True


def _as_tensor(x, like: Tensor) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=like.data.dtype))


def _check_elementwise(op: str, a: Tensor, b: Tensor) -> None:
    if a.data.shape == b.data.shape or a.data.size == 1 or b.data.size == 1:
        return
    raise ValueError(f"{op}: shape mismatch {a.data.shape} vs {b.data.shape}")


def _reduce_to(g: np.ndarray, shape) -> np.ndarray:
    # inverse of the scalar-with-anything broadcast
    if g.shape == tuple(shape):
        return g
    return np.sum(g).reshape(shape)


# -- elementwise ops ---------------------------------------------------------


@catalog_op("elementwise or scalar addition")
def add(a: Tensor, b) -> Tensor:
    b = _as_tensor(b, a)
    _check_elementwise("add", a, b)
    out = a.data + b.data

    def _bw(g):
        _acc(a, _reduce_to(g, a.data.shape))
        _acc(b, _reduce_to(g, b.data.shape))

    return _from_op(out, (a, b), "add", _bw)


@catalog_op("elementwise or scalar subtraction")
def sub(a: Tensor, b) -> Tensor:
    b = _as_tensor(b, a)
    _check_elementwise("sub", a, b)
    out = a.data - b.data

    def _bw(g):
        _acc(a, _reduce_to(g, a.data.shape))
        _acc(b, _reduce_to(-g, b.data.shape))

    return _from_op(out, (a, b), "sub", _bw)


@catalog_op("elementwise or scalar multiplication")
def mul(a: Tensor, b) -> Tensor:
    b = _as_tensor(b, a)
    _check_elementwise("mul", a, b)
    out = a.data * b.data

    def _bw(g):
        _acc(a, _reduce_to(g * b.data, a.data.shape))
        _acc(b, _reduce_to(g * a.data, b.data.shape))

    return _from_op(out, (a, b), "mul", _bw)


@catalog_op("elementwise max(x, 0); gradient at exactly 0 is 0")
def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    out = np.where(mask, a.data, a.data.dtype.type(0))

    def _bw(g):
        _acc(a, g * mask)

    return _from_op(out, (a,), "relu", _bw)


@catalog_op("hinge max(x, 0), same kernel as relu")
def hinge(a: Tensor) -> Tensor:
    return relu(a)


# -- linear algebra ----------------------------------------------------------


@catalog_op("2-D matrix multiply")
def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2 or a.data.shape[1] != b.data.shape[0]:
        raise ValueError(f"matmul: incompatible shapes {a.data.shape} vs {b.data.shape}")
    out = a.data @ b.data

    def _bw(g):
        _acc(a, g @ b.data.T)
        _acc(b, a.data.T @ g)

    return _from_op(out, (a, b), "matmul", _bw)


@catalog_op("direct 2-D convolution with stride and symmetric zero padding")
def conv2d(x: Tensor, w: Tensor, stride=1, padding=0) -> Tensor:
    if w.data.ndim != 4:
        raise ValueError(f"conv2d: kernel must be 4-D (out,in,kh,kw), got {w.data.shape}")
    squeeze = x.data.ndim == 3
    xd = x.data[None] if squeeze else x.data
    if xd.ndim != 4:
        raise ValueError(f"conv2d: input must be 3-D or 4-D, got {x.data.shape}")
    n, c, h, wd_ = xd.shape
    co, ci, kh, kw = w.data.shape
    if ci != c:
        raise ValueError(f"conv2d: channel mismatch, input {xd.shape} vs kernel {w.data.shape}")
    sh, sw = (stride, stride) if isinstance(stride, int) else stride
    ph, pw = (padding, padding) if isinstance(padding, int) else padding
    ho = (h + 2 * ph - kh) // sh + 1
    wo = (wd_ + 2 * pw - kw) // sw + 1
    if ho <= 0 or wo <= 0:
        raise ValueError(f"conv2d: kernel {w.data.shape} larger than padded input {xd.shape}")
    xp = np.pad(xd, ((0, 0), (0, 0), (ph, ph), (pw, pw))) if (ph or pw) else xd

    out = np.zeros((n, co, ho, wo), dtype=np.result_type(xd, w.data))
    for i in range(kh):
        for j in range(kw):
            xs = xp[:, :, i:i + sh * (ho - 1) + 1:sh, j:j + sw * (wo - 1) + 1:sw]
            out += np.einsum("nchw,oc->nohw", xs, w.data[:, :, i, j])

    def _bw(g):
        g4 = g[None] if squeeze else g
        gw = np.zeros_like(w.data)
        gxp = np.zeros_like(xp)
        for i in range(kh):
            for j in range(kw):
                sl = (slice(None), slice(None),
                      slice(i, i + sh * (ho - 1) + 1, sh),
                      slice(j, j + sw * (wo - 1) + 1, sw))
                gw[:, :, i, j] = np.einsum("nohw,nchw->oc", g4, xp[sl])
                gxp[sl] += np.einsum("nohw,oc->nchw", g4, w.data[:, :, i, j])
        gx = gxp[:, :, ph:ph + h, pw:pw + wd_] if (ph or pw) else gxp
        _acc(x, gx[0] if squeeze else gx)
        _acc(w, gw)

    return _from_op(out[0] if squeeze else out, (x, w), "conv2d", _bw)


@catalog_op("batch normalization over the non-channel axes, train/eval modes")
def batch_norm(x: Tensor, gamma: Tensor, beta: Tensor, running_mean=None,
               running_var=None, training: bool = True, momentum: float = 0.1,
               eps: float = 1e-5) -> Tensor:
    if x.data.ndim not in (2, 4):
        raise ValueError(f"batch_norm: expected 2-D or 4-D input, got {x.data.shape}")
    c = x.data.shape[1]
    if gamma.data.shape != (c,) or beta.data.shape != (c,):
        raise ValueError(f"batch_norm: affine shape {gamma.data.shape}/{beta.data.shape} "
                         f"does not match {c} channels")
    axes = (0,) if x.data.ndim == 2 else (0, 2, 3)
    bshape = (1, c) if x.data.ndim == 2 else (1, c, 1, 1)

    if training:
        mean = x.data.mean(axis=axes)
        var = x.data.var(axis=axes)
        if running_mean is not None:
            m = x.data.size // c
            # running variance uses the unbiased estimate, normalization the biased one
            uvar = var * (m / (m - 1)) if m > 1 else var
            running_mean *= (1.0 - momentum)
            running_mean += momentum * mean
            running_var *= (1.0 - momentum)
            running_var += momentum * uvar
        std = np.sqrt(var + eps)
    else:
        if running_mean is None or running_var is None:
            raise ValueError("batch_norm: eval mode requires running statistics")
        mean = running_mean
        std = np.sqrt(running_var + eps)

    xhat = (x.data - mean.reshape(bshape)) / std.reshape(bshape)
    out = gamma.data.reshape(bshape) * xhat + beta.data.reshape(bshape)

    def _bw(g):
        _acc(gamma, (g * xhat).sum(axis=axes))
        _acc(beta, g.sum(axis=axes))
        gxh = g * gamma.data.reshape(bshape)
        if training:
            mg = gxh.mean(axis=axes).reshape(bshape)
            mgx = (gxh * xhat).mean(axis=axes).reshape(bshape)
            gx = (gxh - mg - xhat * mgx) / std.reshape(bshape)
        else:
            gx = gxh / std.reshape(bshape)
        _acc(x, gx)

    return _from_op(out, (x, gamma, beta), "batch_norm", _bw)


# -- pooling, slicing, concatenation ------------------------------------------


@catalog_op("max over the trailing two spatial axes")
def global_max_pool(x: Tensor) -> Tensor:
    if x.data.ndim < 3:
        raise ValueError(f"global_max_pool: expected >=3-D input, got {x.data.shape}")
    lead = x.data.shape[:-2]
    hw = x.data.shape[-2] * x.data.shape[-1]
    flat = x.data.reshape(lead + (hw,))
    idx = flat.argmax(axis=-1)
    out = np.take_along_axis(flat, idx[..., None], axis=-1)[..., 0]

    def _bw(g):
        gf = np.zeros_like(flat)
        np.put_along_axis(gf, idx[..., None], g[..., None], axis=-1)
        _acc(x, gf.reshape(x.data.shape))

    return _from_op(out, (x,), "global_max_pool", _bw)


@catalog_op("mean over the trailing two spatial axes")
def global_avg_pool(x: Tensor) -> Tensor:
    if x.data.ndim < 3:
        raise ValueError(f"global_avg_pool: expected >=3-D input, got {x.data.shape}")
    hw = x.data.shape[-2] * x.data.shape[-1]
    out = x.data.mean(axis=(-2, -1))

    def _bw(g):
        _acc(x, np.broadcast_to(g[..., None, None] / hw, x.data.shape))

    return _from_op(out, (x,), "global_avg_pool", _bw)


@catalog_op("contiguous row slice along the height (second-to-last) axis")
def slice_rows(x: Tensor, start: int, stop: int) -> Tensor:
    if x.data.ndim < 3:
        raise ValueError(f"slice_rows: expected >=3-D input, got {x.data.shape}")
    h = x.data.shape[-2]
    if not (0 <= start < stop <= h):
        raise ValueError(f"slice_rows: range [{start}, {stop}) out of bounds for height {h}")
    out = x.data[..., start:stop, :].copy()

    def _bw(g):
        gx = np.zeros_like(x.data)
        gx[..., start:stop, :] = g
        _acc(x, gx)

    return _from_op(out, (x,), "slice_rows", _bw)


@catalog_op("concatenation along a given axis (default feature/channel axis 1)")
def concat(tensors, axis: int = 1) -> Tensor:
    ts = list(tensors)
    if not ts:
        raise ValueError("concat: no tensors given")
    ref = ts[0].data.shape
    for t in ts[1:]:
        s = t.data.shape
        if len(s) != len(ref) or s[:axis] + s[axis + 1:] != ref[:axis] + ref[axis + 1:]:
            raise ValueError(f"concat: shape mismatch {ref} vs {s} along axis {axis}")
    out = np.concatenate([t.data for t in ts], axis=axis)
    sizes = [t.data.shape[axis] for t in ts]

    def _bw(g):
        off = 0
        index = [slice(None)] * g.ndim
        for t, s in zip(ts, sizes):
            index[axis] = slice(off, off + s)
            _acc(t, g[tuple(index)])
            off += s

    return _from_op(out, tuple(ts), "concat", _bw)


# -- losses and reductions -----------------------------------------------------


@catalog_op("fused, log-sum-exp-stabilized softmax cross-entropy")
def softmax_cross_entropy(logits: Tensor, labels, reduction: str = "mean") -> Tensor:
    if logits.data.ndim != 2:
        raise ValueError(f"softmax_cross_entropy: logits must be 2-D, got {logits.data.shape}")
    labels = np.asarray(labels, dtype=np.int64)
    n, k = logits.data.shape
    if labels.shape != (n,):
        raise ValueError(f"softmax_cross_entropy: labels shape {labels.shape} does not match "
                         f"batch {n}")
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        raise ValueError(f"softmax_cross_entropy: label out of range [0, {k})")
    if reduction not in ("mean", "sum", "none"):
        raise ValueError(f"softmax_cross_entropy: unknown reduction {reduction!r}")

    z = logits.data - logits.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1))
    rows = np.arange(n)
    per = lse - z[rows, labels]
    if reduction == "mean":
        out = per.mean()
    elif reduction == "sum":
        out = per.sum()
    else:
        out = per

    def _bw(g):
        p = np.exp(z - lse[:, None])
        p[rows, labels] -= 1
        if reduction == "mean":
            gx = p * (g / n)
        elif reduction == "sum":
            gx = p * g
        else:
            gx = p * g[:, None]
        _acc(logits, gx)

    return _from_op(np.asarray(out, dtype=logits.data.dtype), (logits,),
                    "softmax_cross_entropy", _bw)


@catalog_op("Euclidean (L2) distance between two same-shape tensors")
def euclidean_distance(a: Tensor, b: Tensor) -> Tensor:
    if a.data.shape != b.data.shape:
        raise ValueError(f"euclidean_distance: shape mismatch {a.data.shape} vs {b.data.shape}")
    diff = a.data - b.data
    ssq = float((diff * diff).sum())
    out = np.asarray(np.sqrt(ssq), dtype=a.data.dtype)

    def _bw(g):
        # 1e-12 under the root keeps the gradient finite at zero distance
        ga = g * diff / np.sqrt(ssq + 1e-12)
        _acc(a, ga)
        _acc(b, -ga)

    return _from_op(out, (a, b), "euclidean_distance", _bw)


@catalog_op("Euclidean (L2) norm of all elements")
def euclidean_norm(a: Tensor) -> Tensor:
    ssq = float((a.data * a.data).sum())
    out = np.asarray(np.sqrt(ssq), dtype=a.data.dtype)

    def _bw(g):
        _acc(a, g * a.data / np.sqrt(ssq + 1e-12))

    return _from_op(out, (a,), "euclidean_norm", _bw)


@catalog_op("matrix of pairwise Euclidean distances between row vectors")
def pairwise_distances(x: Tensor) -> Tensor:
    if x.data.ndim != 2:
        raise ValueError(f"pairwise_distances: expected 2-D input, got {x.data.shape}")
    diff = x.data[:, None, :] - x.data[None, :, :]
    d = np.sqrt(np.einsum("ijk,ijk->ij", diff, diff) + 1e-12)

    def _bw(g):
        w = (g + g.T) / d
        gx = w.sum(axis=1)[:, None] * x.data - w @ x.data
        _acc(x, gx)

    return _from_op(d.astype(x.data.dtype, copy=False), (x,), "pairwise_distances", _bw)


@catalog_op("gather matrix entries at (row, col) index pairs")
def take_pairs(m: Tensor, rows, cols) -> Tensor:
    if m.data.ndim != 2:
        raise ValueError(f"take_pairs: expected 2-D input, got {m.data.shape}")
    rows = np.asarray(rows, dtype=np.int64)
    cols = np.asarray(cols, dtype=np.int64)
    if rows.shape != cols.shape:
        raise ValueError(f"take_pairs: index shapes differ, {rows.shape} vs {cols.shape}")
    h, w = m.data.shape
    if rows.size and not ((rows >= 0).all() and (rows < h).all()
                          and (cols >= 0).all() and (cols < w).all()):
        raise ValueError(f"take_pairs: indices out of bounds for shape {m.data.shape}")
    out = m.data[rows, cols].copy()

    def _bw(g):
        gm = np.zeros_like(m.data)
        np.add.at(gm, (rows, cols), g)
        _acc(m, gm)

    return _from_op(out, (m,), "take_pairs", _bw)


@catalog_op("shape change without reordering elements")
def reshape(x: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    out = x.data.reshape(shape)

    def _bw(g):
        _acc(x, g.reshape(x.data.shape))

    return _from_op(out.copy(), (x,), "reshape", _bw)


@catalog_op("sum of all elements or along one axis")
def reduce_sum(x: Tensor, axis=None) -> Tensor:
    out = x.data.sum(axis=axis)

    def _bw(g):
        if axis is None:
            _acc(x, np.broadcast_to(g, x.data.shape))
        else:
            _acc(x, np.broadcast_to(np.expand_dims(g, axis), x.data.shape))

    return _from_op(np.asarray(out, dtype=x.data.dtype), (x,), "reduce_sum", _bw)


@catalog_op("mean of all elements or along one axis")
def reduce_mean(x: Tensor, axis=None) -> Tensor:
    out = x.data.mean(axis=axis)
    count = x.data.size if axis is None else x.data.shape[axis]

    def _bw(g):
        if axis is None:
            _acc(x, np.broadcast_to(g / count, x.data.shape))
        else:
            _acc(x, np.broadcast_to(np.expand_dims(g / count, axis), x.data.shape))

    return _from_op(np.asarray(out, dtype=x.data.dtype), (x,), "reduce_mean", _bw)
