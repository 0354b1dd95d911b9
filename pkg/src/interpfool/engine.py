"""Reverse-mode automatic differentiation over numpy arrays.

Every backward rule is itself written with graph primitives, so the same
rule serves two purposes:

* ``backward`` runs the rules with graph recording switched off and
  returns plain numeric gradients;
* ``grad_as_graph`` runs them with recording on, returning gradient nodes
  that can be differentiated again (double backprop).

Because both routes execute identical floating point code, their values
agree bit for bit. ReLU masks, sign patterns and max-pool winner indices are
emitted as detached constants, so second-order terms through those
selections are zero (the almost-everywhere derivative).
"""

from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "ShapeError",
    "NonFiniteError",
    "NotGraphDifferentiable",
    "tensor",
    "constant",
    "no_record",
    "primitive_forward",
    "backward",
    "grad_as_graph",
    "sgd_step",
    "SGD",
    "finite_diff_check",
    "selection_signature",
]


class ShapeError(ValueError):
    """Operand shapes violate a primitive's shape rule."""


class NonFiniteError(ValueError):
    """A NaN or infinity entered or was produced by the graph."""


class NotGraphDifferentiable(RuntimeError):
    """A primitive on the path has no graph-expressible backward rule."""


_RECORDING = True


@contextlib.contextmanager
def no_record():
    """Build values only; new nodes keep no references to their inputs."""
    global _RECORDING
    prev = _RECORDING
    _RECORDING = False
    try:
        yield
    finally:
        _RECORDING = prev


class Tensor:
    """A graph node holding an n-dimensional float array.

    ``op`` is the primitive tag that produced the node (``"leaf"`` for
    inputs and parameters), ``inputs`` the ordered parent nodes and
    ``attrs`` whatever the primitive needs to recompute or differentiate
    itself. A ``detached`` node passes no gradient to its parents.
    """

    __slots__ = ("data", "op", "inputs", "attrs", "detached", "name", "__weakref__")
    __array_priority__ = 100

    def __init__(self, data, op="leaf", inputs=(), attrs=None, detached=False, name=None):
        arr = np.asarray(data)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float64)
        if not np.isfinite(arr).all():
            raise NonFiniteError(f"{op}: non-finite value in tensor of shape {arr.shape}")
        self.data = arr
        self.op = op
        self.inputs = tuple(inputs) if _RECORDING else ()
        self.attrs = attrs or {}
        self.detached = detached
        self.name = name

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def detach(self) -> "Tensor":
        return Tensor(self.data, op="detach", inputs=(self,), detached=True)

    def __repr__(self):
        return f"Tensor(op={self.op}, shape={self.shape}, dtype={self.dtype})"

    # arithmetic sugar
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return slice_(self, index)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    @property
    def T(self):
        return transpose(self, None)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)


def tensor(data, dtype=None, name=None) -> Tensor:
    """Create a leaf node (an input or a parameter)."""
    arr = np.array(data, dtype=dtype if dtype is not None else None, copy=True)
    if arr.dtype not in (np.float32, np.float64):
        arr = arr.astype(np.float64 if dtype is None else dtype)
    return Tensor(arr, name=name)


def constant(data, like: Tensor | None = None) -> Tensor:
    """Detached constant, cast to ``like``'s dtype when given."""
    arr = np.asarray(data)
    if like is not None:
        arr = arr.astype(like.dtype, copy=False)
    elif arr.dtype not in (np.float32, np.float64):
        arr = arr.astype(np.float64)
    return Tensor(arr, op="const", detached=True)


def _lift(x, like: Tensor | None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return constant(x, like)


def _pair(a, b) -> tuple[Tensor, Tensor]:
    if isinstance(a, Tensor):
        return a, _lift(b, a)
    b = _lift(b, None)
    return _lift(a, b), b


def _node(op, data, inputs, attrs=None) -> Tensor:
    return Tensor(data, op=op, inputs=inputs, attrs=attrs)


# ---------------------------------------------------------------------------
# elementwise and broadcasting


def _broadcast_shape(op, a, b):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: cannot broadcast shapes {a.shape} and {b.shape}") from None


def add(a, b) -> Tensor:
    a, b = _pair(a, b)
    _broadcast_shape("add", a, b)
    return _node("add", a.data + b.data, (a, b))


def sub(a, b) -> Tensor:
    a, b = _pair(a, b)
    _broadcast_shape("sub", a, b)
    return _node("sub", a.data - b.data, (a, b))


def mul(a, b) -> Tensor:
    a, b = _pair(a, b)
    _broadcast_shape("mul", a, b)
    return _node("mul", a.data * b.data, (a, b))


def div(a, b) -> Tensor:
    a, b = _pair(a, b)
    _broadcast_shape("div", a, b)
    if np.any(b.data == 0):
        raise NonFiniteError(f"div: zero in denominator of shape {b.shape}")
    return _node("div", a.data / b.data, (a, b))


def relu(x: Tensor) -> Tensor:
    return _node("relu", np.maximum(x.data, 0), (x,))


def abs_(x: Tensor) -> Tensor:
    return _node("abs", np.abs(x.data), (x,))


def square(x: Tensor) -> Tensor:
    return _node("square", x.data * x.data, (x,))


def sqrt(x: Tensor) -> Tensor:
    if np.any(x.data < 0):
        raise NonFiniteError("sqrt: negative input")
    return _node("sqrt", np.sqrt(x.data), (x,))


def exp(x: Tensor) -> Tensor:
    return _node("exp", np.exp(x.data), (x,))


def log(x: Tensor) -> Tensor:
    if np.any(x.data <= 0):
        raise NonFiniteError("log: non-positive input")
    return _node("log", np.log(x.data), (x,))


def sign(x: Tensor, zero=1.0) -> Tensor:
    """Detached sign pattern; zeros map to ``zero``."""
    s = np.sign(x.data)
    s[s == 0] = zero
    return constant(s, x)


def step(x: Tensor) -> Tensor:
    """Detached indicator of ``x > 0``."""
    return constant(x.data > 0, x)


# ---------------------------------------------------------------------------
# shape manipulation and reductions


def reshape(x: Tensor, shape) -> Tensor:
    shape = tuple(int(s) for s in shape)
    try:
        out = x.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot reshape {x.shape} to {shape}") from None
    return _node("reshape", out, (x,), {"shape": out.shape})


def transpose(x: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(x.ndim)))
    axes = tuple(axes)
    if sorted(axes) != list(range(x.ndim)):
        raise ShapeError(f"transpose: axes {axes} invalid for shape {x.shape}")
    return _node("transpose", np.transpose(x.data, axes), (x,), {"axes": axes})


def broadcast_to(x: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    try:
        out = np.broadcast_to(x.data, shape)
    except ValueError:
        raise ShapeError(f"broadcast_to: cannot broadcast {x.shape} to {shape}") from None
    return _node("broadcast_to", np.ascontiguousarray(out), (x,), {"shape": shape})


def _norm_axes(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(sorted(a % ndim for a in axis))


def sum_(x: Tensor, axis=None, keepdims=False) -> Tensor:
    axes = _norm_axes(axis, x.ndim)
    return _node("sum", x.data.sum(axis=axes, keepdims=keepdims), (x,),
                 {"axes": axes, "keepdims": keepdims})


def mean(x: Tensor, axis=None, keepdims=False) -> Tensor:
    axes = _norm_axes(axis, x.ndim)
    n = int(np.prod([x.shape[a] for a in axes])) if axes else 1
    return mul(sum_(x, axes, keepdims), 1.0 / n)


def amax(x: Tensor, axis=None, keepdims=False) -> Tensor:
    """Maximum over ``axis``; ties go to the first index in row-major order."""
    axes = _norm_axes(axis, x.ndim)
    keep = [a for a in range(x.ndim) if a not in axes]
    moved = np.transpose(x.data, keep + list(axes))
    lead = moved.shape[: len(keep)]
    flat = moved.reshape(lead + (-1,))
    idx = np.argmax(flat, axis=-1)
    onehot = np.zeros_like(flat)
    np.put_along_axis(onehot, idx[..., None], 1.0, axis=-1)
    inv = np.argsort(keep + list(axes))
    mask = np.transpose(onehot.reshape(moved.shape), inv)
    out = np.take_along_axis(flat, idx[..., None], axis=-1)[..., 0]
    if keepdims:
        out = out.reshape([1 if a in axes else s for a, s in enumerate(x.shape)])
    return _node("amax", out, (x,), {"axes": axes, "keepdims": keepdims, "mask": mask})


def sum_to(g: Tensor, shape) -> Tensor:
    """Sum ``g`` down to ``shape`` (the adjoint of broadcasting)."""
    shape = tuple(shape)
    if g.shape == shape:
        return g
    lead = g.ndim - len(shape)
    axes = tuple(range(lead)) + tuple(
        lead + i for i, s in enumerate(shape) if s == 1 and g.shape[lead + i] != 1
    )
    out = sum_(g, axes, keepdims=True)
    return reshape(out, shape)


def _normalize_index(index, shape):
    if not isinstance(index, tuple):
        index = (index,)
    out = []
    for i, ix in enumerate(index):
        if isinstance(ix, slice):
            out.append(ix)
        elif isinstance(ix, (int, np.integer)):
            n = shape[i]
            ix = int(ix) % n
            out.append(slice(ix, ix + 1))
        else:
            raise ShapeError("slice: only integer and slice indices are supported")
    return tuple(out)


def slice_(x: Tensor, index) -> Tensor:
    """Basic slicing; integer indices keep their axis with extent 1."""
    if not isinstance(index, tuple):
        index = (index,)
    if len(index) > x.ndim:
        raise ShapeError(f"slice: {len(index)} indices for shape {x.shape}")
    squeeze = tuple(i for i, ix in enumerate(index) if isinstance(ix, (int, np.integer)))
    norm = _normalize_index(index, x.shape)
    out = _node("slice", x.data[norm], (x,), {"index": norm, "in_shape": x.shape})
    if squeeze:
        out = reshape(out, [s for i, s in enumerate(out.shape) if i not in squeeze])
    return out


def unslice(g: Tensor, index, shape) -> Tensor:
    """Embed ``g`` into zeros of ``shape`` at ``index`` (adjoint of slicing)."""
    out = np.zeros(shape, dtype=g.dtype)
    out[index] = g.data
    return _node("unslice", out, (g,), {"index": index, "shape": tuple(shape)})


def concat(xs: Sequence[Tensor], axis=0) -> Tensor:
    xs = list(xs)
    if not xs:
        raise ShapeError("concat: no inputs")
    axis = axis % xs[0].ndim
    for x in xs[1:]:
        if x.ndim != xs[0].ndim or any(
            s != t for i, (s, t) in enumerate(zip(x.shape, xs[0].shape)) if i != axis
        ):
            raise ShapeError(f"concat: incompatible shapes {[t.shape for t in xs]} on axis {axis}")
    sizes = [x.shape[axis] for x in xs]
    return _node("concat", np.concatenate([x.data for x in xs], axis=axis), tuple(xs),
                 {"axis": axis, "sizes": sizes})


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _pair(a, b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    return _node("matmul", a.data @ b.data, (a, b))


# ---------------------------------------------------------------------------
# convolution: a triple closed under differentiation


def _conv_out(n, k, stride, pad):
    return (n + 2 * pad - k) // stride + 1


def _pad(x, pad):
    if pad == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))


def _im2col(x, kh, kw, stride, pad, ho, wo):
    """[N,C,H,W] -> [N*Ho*Wo, kh*kw*C] patches, channel-fastest."""
    n, c = x.shape[:2]
    xp = _pad(x, pad).transpose(0, 2, 3, 1)
    cols = np.empty((n, ho, wo, kh, kw, c), dtype=x.dtype)
    for p in range(kh):
        for q in range(kw):
            cols[:, :, :, p, q, :] = xp[:, p:p + stride * ho:stride, q:q + stride * wo:stride, :]
    return cols.reshape(n * ho * wo, kh * kw * c)


def _conv_fwd(x, w, stride, pad):
    o, c, kh, kw = w.shape
    n = x.shape[0]
    ho = _conv_out(x.shape[2], kh, stride, pad)
    wo = _conv_out(x.shape[3], kw, stride, pad)
    out = _im2col(x, kh, kw, stride, pad, ho, wo) @ w.transpose(2, 3, 1, 0).reshape(kh * kw * c, o)
    return np.ascontiguousarray(out.reshape(n, ho, wo, o).transpose(0, 3, 1, 2))


def _conv_dx(g, w, x_shape, stride, pad):
    n, c, h, wd = x_shape
    o, _, kh, kw = w.shape
    ho, wo = g.shape[2:]
    gm = g.transpose(0, 2, 3, 1).reshape(n * ho * wo, o)
    dcols = (gm @ w.transpose(0, 2, 3, 1).reshape(o, kh * kw * c)).reshape(n, ho, wo, kh, kw, c)
    hp = max(h + 2 * pad, stride * (ho - 1) + kh)
    wp = max(wd + 2 * pad, stride * (wo - 1) + kw)
    out = np.zeros((n, hp, wp, c), dtype=dcols.dtype)
    for p in range(kh):
        for q in range(kw):
            out[:, p:p + stride * ho:stride, q:q + stride * wo:stride, :] += dcols[:, :, :, p, q, :]
    out = out[:, pad:pad + h, pad:pad + wd, :]
    return np.ascontiguousarray(out.transpose(0, 3, 1, 2))


def _conv_dw(x, g, w_shape, stride, pad):
    o, c, kh, kw = w_shape
    n = x.shape[0]
    ho, wo = g.shape[2:]
    cols = _im2col(x, kh, kw, stride, pad, ho, wo)
    gm = g.transpose(0, 2, 3, 1).reshape(n * ho * wo, o)
    dw = (cols.T @ gm).reshape(kh, kw, c, o)
    return np.ascontiguousarray(dw.transpose(3, 2, 0, 1))


def conv2d(x: Tensor, w: Tensor, stride=1, pad=0) -> Tensor:
    """Cross-correlation, x: [N,C,H,W], w: [O,C,kh,kw]."""
    if x.ndim != 4 or w.ndim != 4 or x.shape[1] != w.shape[1]:
        raise ShapeError(f"conv2d: incompatible shapes {x.shape} and {w.shape}")
    if stride < 1 or pad < 0:
        raise ShapeError(f"conv2d: invalid stride {stride} / pad {pad}")
    if _conv_out(x.shape[2], w.shape[2], stride, pad) < 1 or _conv_out(x.shape[3], w.shape[3], stride, pad) < 1:
        raise ShapeError(f"conv2d: kernel {w.shape[2:]} larger than padded input {x.shape[2:]}")
    return _node("conv2d", _conv_fwd(x.data, w.data, stride, pad), (x, w),
                 {"stride": stride, "pad": pad})


def conv2d_input_grad(g: Tensor, w: Tensor, x_shape, stride=1, pad=0) -> Tensor:
    """Transposed convolution: gradient of <g, conv2d(x, w)> w.r.t. x."""
    x_shape = tuple(x_shape)
    if g.ndim != 4 or w.ndim != 4 or g.shape[1] != w.shape[0]:
        raise ShapeError(f"conv2d_input_grad: incompatible shapes {g.shape} and {w.shape}")
    return _node("conv2d_input_grad", _conv_dx(g.data, w.data, x_shape, stride, pad), (g, w),
                 {"stride": stride, "pad": pad, "x_shape": x_shape})


def conv2d_weight_grad(x: Tensor, g: Tensor, w_shape, stride=1, pad=0) -> Tensor:
    """Gradient of <g, conv2d(x, w)> w.r.t. w."""
    w_shape = tuple(w_shape)
    if x.ndim != 4 or g.ndim != 4 or x.shape[0] != g.shape[0]:
        raise ShapeError(f"conv2d_weight_grad: incompatible shapes {x.shape} and {g.shape}")
    return _node("conv2d_weight_grad", _conv_dw(x.data, g.data, w_shape, stride, pad), (x, g),
                 {"stride": stride, "pad": pad, "w_shape": w_shape})


# ---------------------------------------------------------------------------
# pooling (non-overlapping windows; a trailing remainder is cropped)


def _pool_windows(x, k):
    """Stack of the k*k window members, shape [k*k, N, C, Ho, Wo]."""
    h, w = x.shape[2:]
    ho, wo = h // k, w // k
    if ho < 1 or wo < 1:
        raise ShapeError(f"pool: window {k} larger than input {x.shape[2:]}")
    return np.stack([x[:, :, p:p + k * ho:k, q:q + k * wo:k] for p in range(k) for q in range(k)])


def _pool_gather(x, idx, k):
    wins = _pool_windows(x, k)
    out = wins[0].copy()
    for j in range(1, len(wins)):
        np.copyto(out, wins[j], where=idx == j)
    return out


def _pool_scatter(g, idx, k, shape):
    ho, wo = g.shape[2:]
    out = np.zeros(shape, dtype=g.dtype)
    for p in range(k):
        for q in range(k):
            out[:, :, p:p + k * ho:k, q:q + k * wo:k] = g * (idx == p * k + q)
    return out


def maxpool2d(x: Tensor, k=2) -> Tensor:
    """Max over k×k windows; the winner index is a detached attribute, first index wins ties."""
    if x.ndim != 4:
        raise ShapeError(f"maxpool2d: expected 4-d input, got {x.shape}")
    wins = _pool_windows(x.data, k)
    best = wins[0]
    idx = np.zeros(best.shape, dtype=np.int8)
    for j in range(1, len(wins)):
        better = wins[j] > best
        idx[better] = j
        best = np.where(better, wins[j], best)
    return _node("maxpool2d", best, (x,), {"k": k, "idx": idx})


def _gather_node(x, idx, k):
    return _node("maxpool2d", _pool_gather(x.data, idx, k), (x,), {"k": k, "idx": idx})


def pool_scatter(g: Tensor, idx, k, shape) -> Tensor:
    return _node("pool_scatter", _pool_scatter(g.data, idx, k, tuple(shape)), (g,),
                 {"k": k, "idx": idx, "shape": tuple(shape)})


def avgpool2d(x: Tensor, k=2) -> Tensor:
    if x.ndim != 4:
        raise ShapeError(f"avgpool2d: expected 4-d input, got {x.shape}")
    return _node("avgpool2d", _pool_windows(x.data, k).mean(axis=0), (x,), {"k": k})


def nearest_upsample(x: Tensor, k) -> Tensor:
    """Replicate every spatial cell into a k×k block (k may be a (kh, kw) pair)."""
    if x.ndim < 2:
        raise ShapeError(f"nearest_upsample: expected ≥2-d input, got {x.shape}")
    kh, kw = (k, k) if np.isscalar(k) else k
    out = np.repeat(np.repeat(x.data, kh, axis=-2), kw, axis=-1)
    return _node("nearest_upsample", out, (x,), {"k": (int(kh), int(kw))})


def _block_sum(g: Tensor, k) -> Tensor:
    kh, kw = k
    shp = g.shape
    r = reshape(g, shp[:-2] + (shp[-2] // kh, kh, shp[-1] // kw, kw))
    return sum_(r, (g.ndim - 1, g.ndim + 1))


def global_avg_pool(x: Tensor) -> Tensor:
    """[N,C,H,W] -> [N,C]."""
    if x.ndim != 4:
        raise ShapeError(f"global_avg_pool: expected 4-d input, got {x.shape}")
    return mean(x, axis=(2, 3))


# ---------------------------------------------------------------------------
# loss


def _softmax(z):
    e = np.exp(z - z.max(axis=1, keepdims=True))
    return e / e.sum(axis=1, keepdims=True)


def softmax_cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean cross-entropy of integer ``labels`` under softmax(logits)."""
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    if logits.ndim != 2 or logits.shape[0] != labels.shape[0]:
        raise ShapeError(f"softmax_cross_entropy: logits {logits.shape} vs labels {labels.shape}")
    if labels.min(initial=0) < 0 or labels.max(initial=0) >= logits.shape[1]:
        raise ShapeError("softmax_cross_entropy: label out of range")
    z = logits.data
    m = z.max(axis=1, keepdims=True)
    lse = m[:, 0] + np.log(np.exp(z - m).sum(axis=1))
    loss = np.mean(lse - z[np.arange(len(labels)), labels])
    return _node("softmax_cross_entropy", np.asarray(loss, dtype=z.dtype), (logits,),
                 {"labels": labels})


# ---------------------------------------------------------------------------
# backward rules, each written in graph primitives


def _vjp_add(n, g):
    a, b = n.inputs
    return sum_to(g, a.shape), sum_to(g, b.shape)


def _vjp_sub(n, g):
    a, b = n.inputs
    return sum_to(g, a.shape), sum_to(mul(g, -1.0), b.shape)


def _vjp_mul(n, g):
    a, b = n.inputs
    return sum_to(mul(g, b), a.shape), sum_to(mul(g, a), b.shape)


def _vjp_div(n, g):
    a, b = n.inputs
    ga = div(g, b)
    gb = mul(mul(ga, n), -1.0)
    return sum_to(ga, a.shape), sum_to(gb, b.shape)


def _vjp_relu(n, g):
    return (mul(g, step(n.inputs[0])),)


def _vjp_abs(n, g):
    return (mul(g, sign(n.inputs[0], zero=0.0)),)


def _vjp_square(n, g):
    return (mul(g, mul(n.inputs[0], 2.0)),)


def _vjp_sqrt(n, g):
    return (div(g, mul(n, 2.0)),)


def _vjp_exp(n, g):
    return (mul(g, n),)


def _vjp_log(n, g):
    return (div(g, n.inputs[0]),)


def _vjp_reshape(n, g):
    return (reshape(g, n.inputs[0].shape),)


def _vjp_transpose(n, g):
    inv = tuple(np.argsort(n.attrs["axes"]))
    return (transpose(g, inv),)


def _vjp_broadcast_to(n, g):
    return (sum_to(g, n.inputs[0].shape),)


def _vjp_sum(n, g):
    x = n.inputs[0]
    axes = n.attrs["axes"]
    if not n.attrs["keepdims"]:
        g = reshape(g, [1 if a in axes else s for a, s in enumerate(x.shape)])
    return (broadcast_to(g, x.shape),)


def _vjp_amax(n, g):
    x = n.inputs[0]
    axes = n.attrs["axes"]
    if not n.attrs["keepdims"]:
        g = reshape(g, [1 if a in axes else s for a, s in enumerate(x.shape)])
    return (mul(broadcast_to(g, x.shape), constant(n.attrs["mask"], x)),)


def _vjp_slice(n, g):
    return (unslice(g, n.attrs["index"], n.attrs["in_shape"]),)


def _vjp_unslice(n, g):
    return (slice_(g, n.attrs["index"]),)


def _vjp_concat(n, g):
    axis = n.attrs["axis"]
    out, start = [], 0
    for size in n.attrs["sizes"]:
        index = [slice(None)] * g.ndim
        index[axis] = slice(start, start + size)
        out.append(slice_(g, tuple(index)))
        start += size
    return tuple(out)


def _vjp_matmul(n, g):
    a, b = n.inputs
    return matmul(g, transpose(b)), matmul(transpose(a), g)


def _vjp_conv2d(n, g):
    x, w = n.inputs
    s, p = n.attrs["stride"], n.attrs["pad"]
    return (conv2d_input_grad(g, w, x.shape, s, p), conv2d_weight_grad(x, g, w.shape, s, p))


def _vjp_conv2d_input_grad(n, gbar):
    g, w = n.inputs
    s, p = n.attrs["stride"], n.attrs["pad"]
    dg = conv2d(gbar, w, s, p)
    dg = _fit_spatial(dg, g.shape)
    return dg, conv2d_weight_grad(gbar, g, w.shape, s, p)


def _vjp_conv2d_weight_grad(n, wbar):
    x, g = n.inputs
    s, p = n.attrs["stride"], n.attrs["pad"]
    dx = conv2d_input_grad(g, wbar, x.shape, s, p)
    dg = _fit_spatial(conv2d(x, wbar, s, p), g.shape)
    return dx, dg


def _fit_spatial(t: Tensor, shape) -> Tensor:
    if t.shape == tuple(shape):
        return t
    return slice_(t, (slice(None), slice(None), slice(0, shape[2]), slice(0, shape[3])))


def _vjp_maxpool2d(n, g):
    x = n.inputs[0]
    return (pool_scatter(g, n.attrs["idx"], n.attrs["k"], x.shape),)


def _vjp_pool_scatter(n, g):
    return (_gather_node(g, n.attrs["idx"], n.attrs["k"]),)


def _vjp_avgpool2d(n, g):
    x = n.inputs[0]
    k = n.attrs["k"]
    up = mul(nearest_upsample(g, k), 1.0 / (k * k))
    if up.shape != x.shape:
        idx = (slice(None), slice(None), slice(0, up.shape[2]), slice(0, up.shape[3]))
        up = unslice(up, idx, x.shape)
    return (up,)


def _vjp_nearest_upsample(n, g):
    return (_block_sum(g, n.attrs["k"]),)


def _vjp_softmax_ce(n, g):
    # numeric only; the loss head is never differentiated twice
    logits = n.inputs[0]
    labels = n.attrs["labels"]
    p = _softmax(logits.data)
    p[np.arange(len(labels)), labels] -= 1.0
    p /= len(labels)
    return (constant(p * g.data, logits),)


_VJP: dict[str, Callable] = {
    "add": _vjp_add,
    "sub": _vjp_sub,
    "mul": _vjp_mul,
    "div": _vjp_div,
    "relu": _vjp_relu,
    "abs": _vjp_abs,
    "square": _vjp_square,
    "sqrt": _vjp_sqrt,
    "exp": _vjp_exp,
    "log": _vjp_log,
    "reshape": _vjp_reshape,
    "transpose": _vjp_transpose,
    "broadcast_to": _vjp_broadcast_to,
    "sum": _vjp_sum,
    "amax": _vjp_amax,
    "slice": _vjp_slice,
    "unslice": _vjp_unslice,
    "concat": _vjp_concat,
    "matmul": _vjp_matmul,
    "conv2d": _vjp_conv2d,
    "conv2d_input_grad": _vjp_conv2d_input_grad,
    "conv2d_weight_grad": _vjp_conv2d_weight_grad,
    "maxpool2d": _vjp_maxpool2d,
    "pool_scatter": _vjp_pool_scatter,
    "avgpool2d": _vjp_avgpool2d,
    "nearest_upsample": _vjp_nearest_upsample,
    "softmax_cross_entropy": _vjp_softmax_ce,
}

_NUMERIC_ONLY = {"softmax_cross_entropy"}


# ---------------------------------------------------------------------------
# dispatcher


def _scalar_op(fn):
    def apply(x, value=None, **_):
        return fn(x, value)
    return apply


_PRIMITIVES: dict[str, Callable] = {
    "add": lambda a, b: add(a, b),
    "sub": lambda a, b: sub(a, b),
    "mul": lambda a, b: mul(a, b),
    "div": lambda a, b: div(a, b),
    "matmul": lambda a, b: matmul(a, b),
    "relu": relu,
    "abs": abs_,
    "square": square,
    "sqrt": sqrt,
    "exp": exp,
    "log": log,
    "sum": lambda x, axis=None, keepdims=False: sum_(x, axis, keepdims),
    "mean": lambda x, axis=None, keepdims=False: mean(x, axis, keepdims),
    "amax": lambda x, axis=None, keepdims=False: amax(x, axis, keepdims),
    "reshape": lambda x, shape: reshape(x, shape),
    "transpose": lambda x, axes=None: transpose(x, axes),
    "broadcast_to": lambda x, shape: broadcast_to(x, shape),
    "slice": lambda x, index: slice_(x, index),
    "concat": lambda *xs, axis=0: concat(xs, axis),
    "conv2d": lambda x, w, stride=1, pad=0: conv2d(x, w, stride, pad),
    "maxpool2d": lambda x, k=2: maxpool2d(x, k),
    "avgpool2d": lambda x, k=2: avgpool2d(x, k),
    "global_avg_pool": global_avg_pool,
    "nearest_upsample": lambda x, k=2: nearest_upsample(x, k),
    "softmax_cross_entropy": lambda logits, labels: softmax_cross_entropy(logits, labels),
    "scalar_add": _scalar_op(add),
    "scalar_mul": _scalar_op(mul),
}


def primitive_forward(op: str, inputs: Sequence, attrs: Mapping | None = None) -> Tensor:
    """Apply primitive ``op`` by tag. Non-Tensor inputs are lifted to leaves."""
    if op not in _PRIMITIVES:
        raise ValueError(f"unknown primitive {op!r}")
    ins = [x if isinstance(x, Tensor) else tensor(x) for x in inputs]
    return _PRIMITIVES[op](*ins, **dict(attrs or {}))


# ---------------------------------------------------------------------------
# differentiation


def _topo(root: Tensor) -> list[Tensor]:
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        if not node.detached:
            for inp in node.inputs:
                if id(inp) not in seen:
                    stack.append((inp, False))
    return order


def _grads(loss: Tensor, leaves: Sequence[Tensor], create_graph: bool) -> list[Tensor]:
    if loss.size != 1:
        raise ShapeError(f"backward: loss must be scalar, got shape {loss.shape}")
    order = _topo(loss)
    leaf_ids = {id(x) for x in leaves}
    needs: set[int] = set()
    for node in order:
        if id(node) in leaf_ids or (
            not node.detached and any(id(i) in needs for i in node.inputs)
        ):
            needs.add(id(node))

    grads: dict[int, Tensor] = {id(loss): constant(np.ones_like(loss.data), loss)}
    found: dict[int, Tensor] = {}
    ctx = contextlib.nullcontext() if create_graph else no_record()
    with ctx:
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if id(node) in leaf_ids:
                found[id(node)] = g
            if node.detached or not node.inputs:
                continue
            if not any(id(i) in needs for i in node.inputs):
                continue
            if create_graph and node.op in _NUMERIC_ONLY:
                raise NotGraphDifferentiable(
                    f"grad_as_graph: primitive {node.op!r} has no graph-expressible backward rule"
                )
            rule = _VJP.get(node.op)
            if rule is None:
                raise NotGraphDifferentiable(f"no backward rule for primitive {node.op!r}")
            for inp, gi in zip(node.inputs, rule(node, g)):
                if gi is None or id(inp) not in needs:
                    continue
                prev = grads.get(id(inp))
                grads[id(inp)] = gi if prev is None else add(prev, gi)

    out = []
    for leaf in leaves:
        g = found.get(id(leaf))
        if g is None:
            g = constant(np.zeros_like(leaf.data), leaf)
        out.append(g)
    return out


class GradMap(dict):
    """Leaf node -> gradient array of the leaf's shape."""

    def by_name(self) -> dict:
        return {k.name: v for k, v in self.items()}


def backward(loss: Tensor, leaves: Iterable[Tensor]) -> GradMap:
    """Numeric reverse-mode gradients of a scalar ``loss``."""
    leaves = list(leaves)
    gs = _grads(loss, leaves, create_graph=False)
    return GradMap((leaf, g.data) for leaf, g in zip(leaves, gs))


def grad_as_graph(score: Tensor, leaves: Sequence[Tensor]) -> list[Tensor]:
    """Gradients of ``score`` as differentiable graph nodes, one per leaf.

    Must be called with recording on; otherwise the forward graph that the
    gradients depend on does not exist.
    """
    if not _RECORDING:
        raise RuntimeError("grad_as_graph: graph recording is disabled (inside no_record)")
    return _grads(score, list(leaves), create_graph=True)


def selection_signature(root: Tensor) -> tuple:
    """Every ReLU mask and max-pool winner index reachable from ``root``.

    Two evaluations with equal signatures lie in the same linear region of
    all piecewise selections, which is what finite-difference checks need.
    """
    sig = []
    for node in _topo(root):
        if node.op == "relu":
            sig.append(np.packbits(node.inputs[0].data > 0).tobytes() if node.inputs else b"")
        elif node.op == "maxpool2d":
            sig.append(node.attrs["idx"].tobytes())
        elif node.op == "amax":
            sig.append(np.packbits(node.attrs["mask"] > 0).tobytes())
    return tuple(sig)


# ---------------------------------------------------------------------------
# optimisation and checking


def sgd_step(params: Mapping[str, Tensor], grads: Mapping, lr: float, momentum: float = 0.0,
             velocity: dict | None = None) -> dict[str, Tensor]:
    """One SGD step: v <- momentum*v + g; p <- p - lr*v.

    ``grads`` may be keyed by parameter name or by the parameter node.
    ``velocity`` (name -> array) is updated in place when given.
    """
    if lr < 0:
        raise ValueError("sgd_step: lr must be non-negative")
    if not 0 <= momentum < 1:
        raise ValueError("sgd_step: momentum must lie in [0, 1)")
    if velocity is None:
        velocity = {}
    out = {}
    for name, p in params.items():
        g = grads.get(name) if name in grads else grads.get(p)
        if g is None:
            raise KeyError(f"sgd_step: missing gradient for parameter {name!r}")
        g = np.asarray(g.data if isinstance(g, Tensor) else g, dtype=p.dtype)
        v = velocity.get(name)
        v = g.copy() if v is None else momentum * v + g
        velocity[name] = v
        out[name] = Tensor(p.data - np.asarray(lr, p.dtype) * v, name=name)
    return out


class SGD:
    """Plain SGD with heavy-ball momentum over a name -> Tensor dict."""

    def __init__(self, lr: float, momentum: float = 0.9):
        if lr < 0:
            raise ValueError("lr must be non-negative")
        if not 0 <= momentum < 1:
            raise ValueError("momentum must lie in [0, 1)")
        self.lr = lr
        self.momentum = momentum
        self.velocity: dict[str, np.ndarray] = {}

    def step(self, params, grads):
        return sgd_step(params, grads, self.lr, self.momentum, self.velocity)


def finite_diff_check(fn: Callable[[dict], Tensor], params: Mapping[str, Tensor], eps: float = 1e-4,
                      coords: int | None = None, seed: int = 0, guard_kinks: bool = True) -> float:
    """Max relative error between reverse-mode and central-difference gradients.

    ``fn`` maps a name -> Tensor dict to a scalar node. ``coords`` limits the
    check to that many randomly chosen coordinates per tensor. With
    ``guard_kinks`` a coordinate is skipped when either probe changes a ReLU
    mask or pooling winner, i.e. when it straddles a kink.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    params = {k: Tensor(v.data.copy(), name=k) for k, v in params.items()}
    out = fn(params)
    ad = backward(out, list(params.values())).by_name()
    base_sig = selection_signature(out) if guard_kinks else None
    rng = np.random.default_rng(seed)
    worst = 0.0
    for name, p in params.items():
        flat_n = p.size
        idxs = np.arange(flat_n)
        if coords is not None and coords < flat_n:
            idxs = np.sort(rng.choice(flat_n, size=coords, replace=False))
        for i in idxs:
            vals = []
            skip = False
            for sgn in (1.0, -1.0):
                data = p.data.copy()
                data.reshape(-1)[i] += sgn * eps
                probe = dict(params)
                probe[name] = Tensor(data, name=name)
                with no_record() if not guard_kinks else contextlib.nullcontext():
                    val = fn(probe)
                if guard_kinks and selection_signature(val) != base_sig:
                    skip = True
                    break
                vals.append(float(val.data.reshape(-1)[0]))
            if skip:
                continue
            g_fd = (vals[0] - vals[1]) / (2 * eps)
            g_ad = float(ad[name].reshape(-1)[i])
            err = abs(g_ad - g_fd) / max(abs(g_fd), 1e-8)
            worst = max(worst, err)
    return worst
