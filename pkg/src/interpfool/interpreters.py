"""Saliency interpreters as differentiable graph expressions.

All interpreters are batched: ``x`` is [N,C,H,W] and ``classes`` holds one
class id per sample. They return a :class:`Heatmap` whose ``values`` is an
[N, Hd, Wd] graph node, so a penalty built on it can be back-propagated to
the parameters. Channel axes are summed to produce spatial maps.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, replace

import numpy as np

from . import engine as E
from .engine import Tensor
from .model import Model

logger = logging.getLogger(__name__)

KINDS = ("simplegrad", "simplegrad_t", "gradcam", "lrp", "lrp_t", "smoothgrad")
_CONV_STABILIZER = 1e-9


class InterpreterError(ValueError):
    pass


@dataclass(frozen=True)
class InterpreterSpec:
    kind: str
    target_layer: str | None = None
    epsilon: float = 0.01
    alpha: float = 1.0
    beta: float = 0.0
    smooth_n: int = 8
    smooth_sigma: float = 0.15
    seed: int = 0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise InterpreterError(f"unknown interpreter {self.kind!r}")
        if self.epsilon <= 0:
            raise InterpreterError("epsilon must be positive")
        if abs(self.alpha - self.beta - 1.0) > 1e-12:
            raise InterpreterError("alpha - beta must equal 1")
        if self.smooth_n < 1 or self.smooth_sigma < 0:
            raise InterpreterError("smooth_n >= 1 and smooth_sigma >= 0 required")

    @property
    def layer_level(self) -> bool:
        return self.kind in ("simplegrad_t", "gradcam", "lrp_t")

    @property
    def signed(self) -> bool:
        return self.kind != "gradcam"

    def resolved(self, model: Model) -> "InterpreterSpec":
        """Fill in the model's default target layer for layer-level kinds."""
        if self.layer_level and self.target_layer is None:
            if not model.desc.target_layers:
                raise InterpreterError(f"{self.kind} needs a target layer")
            return replace(self, target_layer=model.desc.target_layers[0])
        return self

    def to_dict(self):
        return {"kind": self.kind, "target_layer": self.target_layer, "epsilon": self.epsilon,
                "alpha": self.alpha, "beta": self.beta, "smooth_n": self.smooth_n,
                "smooth_sigma": self.smooth_sigma, "seed": self.seed}


def parse_interpreter(name: str, **kw) -> InterpreterSpec:
    aliases = {"g-cam": "gradcam", "grad-cam": "gradcam", "lrpt": "lrp_t", "simpleg": "simplegrad",
               "simpleg_t": "simplegrad_t", "sg": "smoothgrad"}
    kind = aliases.get(name.lower(), name.lower())
    return InterpreterSpec(kind, **kw)


@dataclass
class Heatmap:
    values: Tensor
    spec: InterpreterSpec
    classes: np.ndarray
    signed: bool
    zero_flags: np.ndarray | None = None

    @property
    def data(self) -> np.ndarray:
        return self.values.data


def _as_input(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x))


def _class_mask(classes, k, like: Tensor) -> Tensor:
    classes = np.asarray(classes, dtype=np.int64).reshape(-1)
    if classes.min(initial=0) < 0 or classes.max(initial=0) >= k:
        raise InterpreterError(f"class id outside [0, {k})")
    m = np.zeros((len(classes), k))
    m[np.arange(len(classes)), classes] = 1.0
    return E.constant(m, like)


def _class_score(logits: Tensor, classes) -> Tensor:
    return E.sum_(logits * _class_mask(classes, logits.shape[1], logits))


def _target_act(model: Model, res, target_layer: str) -> Tensor:
    if target_layer not in res.acts:
        raise InterpreterError(f"unknown target layer {target_layer!r}")
    return res.acts[target_layer]


def simplegrad(model: Model, params, x, classes, target_layer: str | None = None) -> Heatmap:
    """Gradient of the class logit w.r.t. the input (or a target layer's activation)."""
    x = _as_input(x)
    res = model.run(params, x)
    score = _class_score(res.logits, classes)
    wrt = x if target_layer is None else _target_act(model, res, target_layer)
    (g,) = E.grad_as_graph(score, [wrt])
    if g.ndim == 4:
        g = E.sum_(g, axis=1)
    kind = "simplegrad" if target_layer is None else "simplegrad_t"
    return Heatmap(g, InterpreterSpec(kind, target_layer), np.asarray(classes), True)


def gradcam(model: Model, params, x, classes, target_layer: str) -> Heatmap:
    """relu(sum_k alpha_k A^k), alpha_k the spatial mean of d logit_c / d A^k."""
    x = _as_input(x)
    res = model.run(params, x)
    a = _target_act(model, res, target_layer)
    if a.ndim != 4:
        raise InterpreterError(f"gradcam: target layer {target_layer!r} is not spatial (shape {a.shape})")
    (g,) = E.grad_as_graph(_class_score(res.logits, classes), [a])
    alpha = E.mean(g, axis=(2, 3), keepdims=True)
    cam = E.relu(E.sum_(alpha * a, axis=1))
    return Heatmap(cam, InterpreterSpec("gradcam", target_layer), np.asarray(classes), False)


# ---------------------------------------------------------------------------
# LRP


def _stab(z: Tensor, eps: float) -> Tensor:
    return z + E.sign(z) * eps


def _lrp_dense(layer, params, a: Tensor, r: Tensor, eps: float) -> Tensor:
    shape = a.shape
    if a.ndim > 2:
        a = E.reshape(a, (shape[0], -1))
    w = params[f"{layer['name']}.weight"]
    z = E.matmul(a, w)
    s = r / _stab(z, eps)
    out = a * E.matmul(s, E.transpose(w))
    return E.reshape(out, shape) if len(shape) > 2 else out


def _lrp_gap(a: Tensor, out: Tensor, r: Tensor, eps: float) -> Tensor:
    n, c, h, w = a.shape
    s = r / _stab(out, eps)
    return a * E.reshape(s, (n, c, 1, 1)) * (1.0 / (h * w))


def _lrp_avgpool(layer, a: Tensor, out: Tensor, r: Tensor, eps: float) -> Tensor:
    k = layer.get("size", 2)
    s = E.nearest_upsample(r / _stab(out, eps), k) * (1.0 / (k * k))
    if s.shape != a.shape:
        idx = (slice(None), slice(None), slice(0, s.shape[2]), slice(0, s.shape[3]))
        s = E.unslice(s, idx, a.shape)
    return a * s


def _lrp_conv(layer, params, a: Tensor, r: Tensor, alpha: float, beta: float) -> Tensor:
    w = params[f"{layer['name']}.weight"]
    stride, pad = layer.get("stride", 1), layer.get("pad", 0)
    wp = E.relu(w)
    wn = w - wp
    ap = E.relu(a)
    has_neg = bool(np.any(a.data < 0))
    an = a - ap if has_neg else None

    def conv(x, k):
        return E.conv2d(x, k, stride, pad)

    def back(s, k):
        return E.conv2d_input_grad(s, k, a.shape, stride, pad)

    # positive contributions: a+ w+ and a- w-
    zp = conv(ap, wp)
    if has_neg:
        zp = zp + conv(an, wn)
    sp = r / (zp + _CONV_STABILIZER)
    rel = ap * back(sp, wp)
    if has_neg:
        rel = rel + an * back(sp, wn)
    rel = rel * alpha
    if beta:
        zn = conv(ap, wn)
        if has_neg:
            zn = zn + conv(an, wp)
        sn = r / (zn - _CONV_STABILIZER)
        neg = ap * back(sn, wn)
        if has_neg:
            neg = neg + an * back(sn, wp)
        rel = rel - neg * beta
    return rel


def lrp_relevances(model: Model, params, x, classes, stop_layer: str | None = None,
                   epsilon: float = 0.01, alpha: float = 1.0, beta: float = 0.0):
    """Relevance at the stop layer's output (input level when ``stop_layer`` is None).

    Returns ``(relevance, logits)``; the relevance keeps its channel axis.
    Dense, global-average and average-pool layers use the epsilon rule;
    conv layers the alpha-beta rule. Biases do not take part in either
    denominator.
    """
    x = _as_input(x)
    res = model.run(params, x)
    trace = res.trace
    stop = -1
    if stop_layer is not None:
        if stop_layer not in res.acts:
            raise InterpreterError(f"unknown target layer {stop_layer!r}")
        target = res.acts[stop_layer]
        stop = next(i for i, (_, _, out) in enumerate(trace) if out is target)
    r = res.logits * _class_mask(classes, res.logits.shape[1], res.logits)
    for i in range(len(trace) - 1, stop, -1):
        layer, a, out = trace[i]
        kind = layer["kind"]
        if kind == "dense":
            r = _lrp_dense(layer, params, a, r, epsilon)
        elif kind == "gap":
            r = _lrp_gap(a, out, r, epsilon)
        elif kind == "relu":
            pass
        elif kind == "maxpool":
            r = E.pool_scatter(r, out.attrs["idx"], out.attrs["k"], a.shape)
        elif kind == "avgpool":
            r = _lrp_avgpool(layer, a, out, r, epsilon)
        elif kind == "conv":
            r = _lrp_conv(layer, params, a, r, alpha, beta)
        else:
            raise InterpreterError(f"LRP: no propagation rule for layer {layer['name']!r} ({kind})")
    return r, res.logits


def lrp_composite(model: Model, params, x, classes, stop_layer: str | None = None,
                  epsilon: float = 0.01, alpha: float = 1.0, beta: float = 0.0) -> Heatmap:
    r, _ = lrp_relevances(model, params, x, classes, stop_layer, epsilon, alpha, beta)
    if r.ndim == 4:
        r = E.sum_(r, axis=1)
    kind = "lrp" if stop_layer is None else "lrp_t"
    spec = InterpreterSpec(kind, stop_layer, epsilon, alpha, beta)
    return Heatmap(r, spec, np.asarray(classes), True)


def smoothgrad(model: Model, params, x, classes, n: int = 8, sigma: float = 0.15, seed: int = 0) -> Heatmap:
    """Mean SimpleGrad over ``n`` copies of ``x`` with N(0, sigma^2) noise."""
    if n < 1 or sigma < 0:
        raise InterpreterError("smoothgrad needs n >= 1 and sigma >= 0")
    x = np.asarray(x.data if isinstance(x, Tensor) else x)
    rng = np.random.default_rng(seed)
    acc = None
    for _ in range(n):
        noisy = x + rng.normal(0.0, sigma, x.shape).astype(x.dtype) if sigma > 0 else x
        h = simplegrad(model, params, noisy, classes).values
        acc = h if acc is None else acc + h
    vals = acc * (1.0 / n) if n > 1 else acc
    spec = InterpreterSpec("smoothgrad", smooth_n=n, smooth_sigma=sigma, seed=seed)
    return Heatmap(vals, spec, np.asarray(classes), True)


def heatmap(model: Model, params, x, classes, spec: InterpreterSpec) -> Heatmap:
    """Dispatch on ``spec.kind``."""
    spec = spec.resolved(model)
    if spec.kind == "simplegrad":
        h = simplegrad(model, params, x, classes)
    elif spec.kind == "simplegrad_t":
        h = simplegrad(model, params, x, classes, spec.target_layer)
    elif spec.kind == "gradcam":
        h = gradcam(model, params, x, classes, spec.target_layer)
    elif spec.kind == "lrp":
        h = lrp_composite(model, params, x, classes, None, spec.epsilon, spec.alpha, spec.beta)
    elif spec.kind == "lrp_t":
        h = lrp_composite(model, params, x, classes, spec.target_layer, spec.epsilon, spec.alpha, spec.beta)
    else:
        h = smoothgrad(model, params, x, classes, spec.smooth_n, spec.smooth_sigma, spec.seed)
    h.spec = spec
    return h


def heatmap_array(model: Model, params, images: np.ndarray, classes, spec: InterpreterSpec,
                  batch_size: int = 250) -> np.ndarray:
    """Numeric heatmaps for many images, computed in chunks without keeping graphs."""
    classes = np.asarray(classes)
    out = []
    for s in range(0, len(images), batch_size):
        out.append(heatmap(model, params, images[s:s + batch_size], classes[s:s + batch_size], spec).data)
    return np.concatenate(out)


# ---------------------------------------------------------------------------
# post-processing


def _flat(h: Tensor) -> Tensor:
    return E.reshape(h, (h.shape[0], -1))


def _nonzero_guard(d: Tensor) -> Tensor:
    return d + E.constant(d.data == 0, d)


def normalize_heatmap(h, mode: str):
    """Per-sample normalization of an [N, ...] heatmap node.

    ``unit_mass`` divides by the sum of absolute values; ``max_one`` clamps
    negatives and divides by the maximum. Returns ``(node, zero_flags)``;
    an all-zero sample comes back all-zero with its flag set.
    """
    if isinstance(h, Heatmap):
        h = h.values
    if not isinstance(h, Tensor):
        h = E.constant(np.asarray(h, dtype=np.float64))
    shape = h.shape
    flat = _flat(h)
    if mode == "unit_mass":
        denom = E.sum_(E.abs_(flat), axis=1, keepdims=True)
    elif mode == "max_one":
        flat = E.relu(flat)
        denom = E.amax(flat, axis=1, keepdims=True)
    else:
        raise ValueError(f"unknown normalization {mode!r}")
    zero = denom.data[:, 0] == 0
    if zero.any():
        logger.debug("normalize_heatmap: %d all-zero heatmap(s)", int(zero.sum()))
    out = flat / _nonzero_guard(denom)
    return E.reshape(out, shape), zero


def normalize_array(h: np.ndarray, mode: str) -> np.ndarray:
    with E.no_record():
        out, _ = normalize_heatmap(E.constant(np.asarray(h, dtype=np.float64)), mode)
    return out.data


def upsample_heatmap(h: np.ndarray, out_shape) -> np.ndarray:
    """Nearest-neighbour upsampling of the trailing two axes."""
    h = np.asarray(h)
    ih, iw = h.shape[-2:]
    oh, ow = out_shape
    if oh < ih or ow < iw:
        raise InterpreterError(f"upsample_heatmap: cannot downsample {(ih, iw)} to {(oh, ow)}")
    rows = (np.arange(oh) * ih) // oh
    cols = (np.arange(ow) * iw) // ow
    return h[..., rows, :][..., cols]
