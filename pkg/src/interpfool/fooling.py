"""Adversarial model manipulation: fooling penalties and the fine-tuning loop.

The training objective is ``CE(D; w) + lambda * penalty(D_fool; w, w0)``.
Passive penalties (location, topk, centermass) use the classification batch
itself; the active penalty draws its batch from a composite two-class set.
Every quantity that refers to the original model (top-k index sets, frozen
centres of mass, cached heatmaps) is computed once from a separate copy of
w0 before training starts.
"""

from __future__ import annotations

import csv
import logging
import math
import os
from dataclasses import dataclass, field

import numpy as np

from . import engine as E
from .data import Dataset, infinite_batches
from .engine import Tensor
from .interpreters import InterpreterSpec, heatmap, heatmap_array, normalize_heatmap
from .model import Model, as_params, predict, save_checkpoint

logger = logging.getLogger(__name__)

METHODS = ("location", "topk", "centermass", "active")
LOG_COLUMNS = ("iteration", "loss_total", "loss_ce", "loss_fool", "train_acc_probe")


class FoolingError(ValueError):
    pass


class FoolingDiverged(RuntimeError):
    """Raised when the loss turns non-finite; carries the last good parameters."""

    def __init__(self, msg, params, log):
        super().__init__(msg)
        self.params = params
        self.log = log


# ---------------------------------------------------------------------------
# configuration


@dataclass
class MaskSpec:
    m: np.ndarray

    def __post_init__(self):
        self.m = np.asarray(self.m, dtype=np.float64)
        if not np.isin(self.m, (0.0, 1.0)).all():
            raise FoolingError("mask entries must be 0 or 1")
        if self.m.min() != 0 or self.m.max() != 1:
            raise FoolingError("mask needs at least one 0 and one 1")

    @property
    def shape(self):
        return self.m.shape


@dataclass
class FoolingConfig:
    method: str
    interpreter: InterpreterSpec
    lam: float = 1.0
    lr: float = 0.01
    momentum: float = 0.9
    iterations: int = 300
    batch_size: int = 64
    fool_batch_size: int | None = None
    k_percent: float = 10.0
    mask: MaskSpec | None = None
    c1: int | None = None
    c2: int | None = None
    seed: int = 0
    active_normalize: str | None = None
    log_every: int = 1
    checkpoint_every: int = 0

    def validate(self):
        if self.method not in METHODS:
            raise FoolingError(f"unknown fooling method {self.method!r}")
        if self.lam < 0:
            raise FoolingError("lambda must be non-negative")
        if self.lr <= 0:
            raise FoolingError("lr must be positive")
        if not 0 <= self.momentum < 1:
            raise FoolingError("momentum must lie in [0, 1)")
        if self.iterations < 0 or self.batch_size < 1:
            raise FoolingError("iterations >= 0 and batch_size >= 1 required")
        if self.method == "topk" and not 0 < self.k_percent < 100 + 1e-12:
            raise FoolingError("k_percent must lie in (0, 100]")
        if self.method == "active":
            if self.c1 is None or self.c2 is None:
                raise FoolingError("active fooling needs c1 and c2")
            if self.c1 == self.c2:
                raise FoolingError("c1 and c2 must differ")
        if self.interpreter.kind == "simplegrad_t":
            raise FoolingError("simplegrad_t is a visualization-only interpreter")
        return self

    def to_dict(self):
        return {
            "method": self.method, "interpreter": self.interpreter.to_dict(), "lambda": self.lam,
            "lr": self.lr, "momentum": self.momentum, "iterations": self.iterations,
            "batch_size": self.batch_size, "fool_batch_size": self.fool_batch_size,
            "k_percent": self.k_percent, "c1": self.c1, "c2": self.c2, "seed": self.seed,
            "active_normalize": self.active_normalize,
        }


# ---------------------------------------------------------------------------
# masks and index sets


def build_frame_mask(h: int, w: int) -> MaskSpec:
    """Ones on the frame, zeros on rows [h//7, 6h//7) x cols [w//7, 6w//7)."""
    if h < 7 or w < 7:
        raise FoolingError(f"frame mask needs H, W >= 7, got {h}x{w}")
    m = np.ones((h, w))
    m[h // 7: (6 * h) // 7, w // 7: (6 * w) // 7] = 0.0
    return MaskSpec(m)


def topk_count(k_percent: float, d: int) -> int:
    """round(k% * d) with halves rounded up, at least one position."""
    return max(1, min(d, int(math.floor(k_percent / 100.0 * d + 0.5))))


def topk_indices(h: np.ndarray, k_percent: float) -> np.ndarray:
    """Indices of the largest values of each row-major flattened heatmap.

    Ties go to the lower index. ``h`` is [N, ...]; returns [N, k].
    """
    if not 0 < k_percent <= 100:
        raise FoolingError("k_percent must lie in (0, 100]")
    flat = np.asarray(h).reshape(len(h), -1)
    k = topk_count(k_percent, flat.shape[1])
    order = np.argsort(-flat, axis=1, kind="stable")
    return order[:, :k]


@dataclass
class TopKIndexSet:
    """Per-sample top-k% positions under w0, keyed by sample id."""

    k_percent: float
    d: int
    sets: dict = field(default_factory=dict)

    def lookup(self, ids) -> np.ndarray:
        try:
            return np.stack([self.sets[int(i)] for i in ids])
        except KeyError as e:
            raise FoolingError(f"no top-k set for sample id {e.args[0]}") from None

    def mask(self, ids) -> np.ndarray:
        idx = self.lookup(ids)
        m = np.zeros((len(idx), self.d))
        np.put_along_axis(m, idx, 1.0, axis=1)
        return m


def compute_topk_sets(model: Model, params_frozen, dataset: Dataset, spec: InterpreterSpec,
                      k_percent: float, ids=None, batch_size: int = 250) -> TopKIndexSet:
    if not 0 < k_percent <= 100:
        raise FoolingError("k_percent must lie in (0, 100]")
    ids = np.arange(len(dataset)) if ids is None else np.asarray(ids)
    h = heatmap_array(model, params_frozen, dataset.images[ids], dataset.labels[ids], spec, batch_size)
    idx = topk_indices(h, k_percent)
    d = int(np.prod(h.shape[1:]))
    return TopKIndexSet(k_percent, d, {int(i): row for i, row in zip(ids, idx)})


# ---------------------------------------------------------------------------
# centre of mass


def center_of_mass(h: np.ndarray) -> np.ndarray:
    """Mass-weighted mean of 0-based coordinates, negatives clamped to zero."""
    h = np.clip(np.asarray(h, dtype=np.float64), 0, None)
    total = h.sum()
    if total <= 0:
        raise FoolingError("center_of_mass: heatmap has no positive mass")
    grids = np.meshgrid(*[np.arange(n) for n in h.shape], indexing="ij")
    return np.array([(g * h).sum() / total for g in grids])


def center_of_mass_node(h: Tensor):
    """Batched centre of mass of [N, H, W] heatmaps as an [N, 2] node.

    Returns ``(centres, valid)``; samples without positive mass are invalid
    and their centre is meaningless.
    """
    n, hh, ww = h.shape
    hc = E.relu(h)
    mass = E.sum_(hc, axis=(1, 2))
    valid = mass.data > 0
    safe = mass + E.constant(~valid, mass)
    rows = E.constant(np.arange(hh, dtype=np.float64)[None, :, None], h)
    cols = E.constant(np.arange(ww, dtype=np.float64)[None, None, :], h)
    cy = E.sum_(hc * rows, axis=(1, 2)) / safe
    cx = E.sum_(hc * cols, axis=(1, 2)) / safe
    centres = E.concat([E.reshape(cy, (n, 1)), E.reshape(cx, (n, 1))], axis=1)
    return centres, valid


def frozen_centers(model: Model, params_frozen, dataset: Dataset, spec: InterpreterSpec,
                   batch_size: int = 250):
    """Centres of mass under w0 for every sample: ``(centres [N,2], valid [N])``."""
    h = heatmap_array(model, params_frozen, dataset.images, dataset.labels, spec, batch_size)
    with E.no_record():
        c, valid = center_of_mass_node(E.constant(h))
    return c.data.astype(np.float64), valid


# ---------------------------------------------------------------------------
# penalties (graph nodes)


def _hm(model, params, x, classes, spec) -> Tensor:
    h = heatmap(model, params, x, classes, spec).values
    if h.ndim != 3:
        raise FoolingError(f"expected spatial heatmaps, got shape {h.shape}")
    return h


def location_penalty_from_heatmap(h: Tensor, mask: MaskSpec) -> Tensor:
    if h.shape[1:] != mask.shape:
        raise FoolingError(f"heatmap resolution {h.shape[1:]} differs from mask {mask.shape}")
    hn, _ = normalize_heatmap(h, "max_one")
    diff = hn - E.constant(mask.m[None], hn)
    return E.mean(E.square(diff))


def location_penalty(model: Model, params, x, labels, spec: InterpreterSpec, mask: MaskSpec) -> Tensor:
    """(1/n) sum_i (1/d) ||max_one(h_{y_i}) - m||^2."""
    return location_penalty_from_heatmap(_hm(model, params, x, labels, spec), mask)


def topk_penalty_from_heatmap(h: Tensor, topk_mask: np.ndarray) -> Tensor:
    hn, _ = normalize_heatmap(h, "unit_mass")
    flat = E.reshape(hn, (hn.shape[0], -1))
    if flat.shape != topk_mask.shape:
        raise FoolingError(f"top-k mask {topk_mask.shape} does not match heatmaps {flat.shape}")
    per = E.sum_(E.abs_(flat) * E.constant(topk_mask, flat), axis=1)
    return E.mean(per)


def topk_penalty(model: Model, params, x, labels, ids, spec: InterpreterSpec,
                 topk: TopKIndexSet) -> Tensor:
    """(1/n) sum_i sum_{j in P_i} |unit_mass(h_{y_i})_j|."""
    m = topk.mask(ids)
    return topk_penalty_from_heatmap(_hm(model, params, x, labels, spec), m)


def centermass_penalty_from_heatmap(h: Tensor, c0: np.ndarray, valid0: np.ndarray):
    c, valid = center_of_mass_node(h)
    ok = valid & np.asarray(valid0, dtype=bool)
    skipped = int((~ok).sum())
    if not ok.any():
        return E.constant(np.zeros((), dtype=h.dtype), h), skipped
    d = E.abs_(c - E.constant(c0, c))
    per = E.sum_(d, axis=1) * E.constant(ok, c)
    return E.sum_(per) * (-1.0 / ok.sum()), skipped


def centermass_penalty(model: Model, params, x, labels, ids, spec: InterpreterSpec,
                       centres0: np.ndarray, valid0: np.ndarray):
    """-(1/n) sum_i ||C(h_{y_i}(w)) - C(h_{y_i}(w0))||_1; returns ``(node, skipped)``."""
    ids = np.asarray(ids)
    return centermass_penalty_from_heatmap(_hm(model, params, x, labels, spec), centres0[ids], valid0[ids])


@dataclass
class ActiveCache:
    """h_{c1}(w0) and h_{c2}(w0) per composite image id."""

    h1: dict
    h2: dict

    def lookup(self, ids):
        try:
            return (np.stack([self.h1[int(i)] for i in ids]), np.stack([self.h2[int(i)] for i in ids]))
        except KeyError as e:
            raise FoolingError(f"active cache miss for sample id {e.args[0]}") from None


def build_active_cache(model: Model, params_frozen, images: np.ndarray, spec: InterpreterSpec,
                       c1: int, c2: int, normalize: str | None = None, batch_size: int = 100) -> ActiveCache:
    n = len(images)
    h1 = heatmap_array(model, params_frozen, images, np.full(n, c1), spec, batch_size)
    h2 = heatmap_array(model, params_frozen, images, np.full(n, c2), spec, batch_size)
    if normalize:
        from .interpreters import normalize_array

        h1, h2 = normalize_array(h1, normalize), normalize_array(h2, normalize)
    return ActiveCache({i: h1[i] for i in range(n)}, {i: h2[i] for i in range(n)})


def active_penalty_from_heatmaps(h1: Tensor, h2: Tensor, h1_0: np.ndarray, h2_0: np.ndarray) -> Tensor:
    t1 = E.mean(E.square(h1 - E.constant(h2_0, h1)))
    t2 = E.mean(E.square(E.constant(h1_0, h2) - h2))
    return (t1 + t2) * 0.5


def active_penalty(model: Model, params, x_fool, ids, cache: ActiveCache, spec: InterpreterSpec,
                   c1: int, c2: int, normalize: str | None = None) -> Tensor:
    """(1/2n) sum_i (1/d)(||h_c1(w) - h_c2(w0)||^2 + ||h_c1(w0) - h_c2(w)||^2)."""
    h1_0, h2_0 = cache.lookup(ids)
    n = len(ids)
    h1 = _hm(model, params, x_fool, np.full(n, c1), spec)
    h2 = _hm(model, params, x_fool, np.full(n, c2), spec)
    if normalize:
        h1, _ = normalize_heatmap(h1, normalize)
        h2, _ = normalize_heatmap(h2, normalize)
    return active_penalty_from_heatmaps(h1, h2, h1_0, h2_0)


# ---------------------------------------------------------------------------
# composite two-class images


@dataclass
class CompositeSet:
    images: np.ndarray
    quadrants: np.ndarray  # [N, 4] class per tile: top-left, top-right, bottom-left, bottom-right
    c1: int
    c2: int

    def __len__(self):
        return len(self.images)

    def as_dataset(self, num_classes: int, norm=None) -> Dataset:
        return Dataset(self.images, None, num_classes, norm)


def build_composite_dataset(base: Dataset, c1: int, c2: int, n_total: int = 260, seed: int = 0,
                            holdout_ratio: float = 200 / 1300):
    """2x2 tile images with two tiles of each class in random quadrants.

    Returns ``(train, holdout)`` CompositeSets split 1100:200 scaled to ``n_total``.
    """
    if c1 == c2:
        raise FoolingError("c1 and c2 must differ")
    pool1 = np.flatnonzero(base.labels == c1)
    pool2 = np.flatnonzero(base.labels == c2)
    if len(pool1) < 2 or len(pool2) < 2:
        raise FoolingError(f"need at least two images of each of classes {c1} and {c2}")
    rng = np.random.default_rng(seed)
    n, (ch, h, w) = n_total, base.image_shape
    images = np.zeros((n, ch, 2 * h, 2 * w), dtype=base.images.dtype)
    quads = np.zeros((n, 4), dtype=np.int64)
    for i in range(n):
        t1 = rng.choice(pool1, size=2, replace=False)
        t2 = rng.choice(pool2, size=2, replace=False)
        order = rng.permutation(4)
        tiles = [base.images[t1[0]], base.images[t1[1]], base.images[t2[0]], base.images[t2[1]]]
        classes = [c1, c1, c2, c2]
        for slot, src in enumerate(order):
            r, c = divmod(slot, 2)
            images[i, :, r * h:(r + 1) * h, c * w:(c + 1) * w] = tiles[src]
            quads[i, slot] = classes[src]
    n_hold = int(round(n * holdout_ratio))
    n_train = n - n_hold
    train = CompositeSet(images[:n_train], quads[:n_train], c1, c2)
    hold = CompositeSet(images[n_train:], quads[n_train:], c1, c2)
    return train, hold


# ---------------------------------------------------------------------------
# fine-tuning


def _copy(params):
    return as_params({k: v.data for k, v in params.items()})


def finetune(model: Model, params0, dataset: Dataset, config: FoolingConfig, fool_images=None,
             log_path=None, checkpoint_dir=None, desc=None):
    """Minimize CE + lambda * penalty with SGD + momentum.

    ``fool_images`` are the composite training images (active fooling only).
    Returns ``(params, log_rows)``. Deterministic for a fixed ``config.seed``.
    """
    config.validate()
    spec = config.interpreter.resolved(model)
    w0 = _copy(params0)
    params = _copy(params0)
    passive = config.method != "active"
    if not passive and fool_images is None:
        raise FoolingError("active fooling needs a composite fool set")
    if passive and fool_images is not None:
        raise FoolingError("passive fooling uses the classification data as its fool set")

    need_penalty = config.lam > 0 and config.iterations > 0
    topk = centres0 = valid0 = cache = mask = None
    if need_penalty:
        if config.method == "location":
            mask = config.mask
            if mask is None:
                probe = heatmap(model, w0, dataset.images[:1], dataset.labels[:1], spec).values
                mask = build_frame_mask(*probe.shape[1:])
        elif config.method == "topk":
            topk = compute_topk_sets(model, w0, dataset, spec, config.k_percent)
        elif config.method == "centermass":
            centres0, valid0 = frozen_centers(model, w0, dataset, spec)
            logger.info("centermass: %d degenerate baseline heatmaps", int((~valid0).sum()))
        else:
            cache = build_active_cache(model, w0, fool_images, spec, config.c1, config.c2,
                                       config.active_normalize)

    batches = infinite_batches(dataset, config.batch_size, seed=config.seed)
    if not passive:
        fool_ds = Dataset(fool_images, None, dataset.num_classes)
        fool_batches = infinite_batches(fool_ds, config.fool_batch_size or config.batch_size,
                                        seed=config.seed + 1)
    opt = E.SGD(config.lr, config.momentum)
    log = []
    writer = None
    fh = None
    if log_path is not None:
        d = os.path.dirname(os.fspath(log_path))
        if d:
            os.makedirs(d, exist_ok=True)
        fh = open(log_path, "w", newline="")
        writer = csv.writer(fh)
        writer.writerow(LOG_COLUMNS)
    try:
        for it in range(1, config.iterations + 1):
            ids = next(batches)
            x = dataset.images[ids]
            y = dataset.labels[ids]
            xt = Tensor(x)
            logits = model.run(params, xt).logits
            ce = E.softmax_cross_entropy(logits, y)
            acc = float((logits.data.argmax(axis=1) == y).mean())
            fool = None
            if need_penalty:
                if config.method == "location":
                    fool = location_penalty(model, params, x, y, spec, mask)
                elif config.method == "topk":
                    fool = topk_penalty(model, params, x, y, ids, spec, topk)
                elif config.method == "centermass":
                    fool, _ = centermass_penalty(model, params, x, y, ids, spec, centres0, valid0)
                else:
                    fids = next(fool_batches)
                    fool = active_penalty(model, params, fool_images[fids], fids, cache, spec,
                                          config.c1, config.c2, config.active_normalize)
                total = ce + fool * config.lam
            else:
                total = ce
            row = (it, float(total.data), float(ce.data), float(fool.data) if fool is not None else 0.0, acc)
            if not all(math.isfinite(v) for v in row[1:4]):
                raise FoolingDiverged(f"non-finite loss at iteration {it}", params, log)
            grads = E.backward(total, list(params.values()))
            new = opt.step(params, grads)
            if not all(np.isfinite(v.data).all() for v in new.values()):
                raise FoolingDiverged(f"non-finite parameters at iteration {it}", params, log)
            params = new
            log.append(row)
            if writer is not None and (it % config.log_every == 0 or it == config.iterations):
                writer.writerow([it] + [repr(v) for v in row[1:]])
            if checkpoint_dir is not None and config.checkpoint_every and it % config.checkpoint_every == 0:
                save_checkpoint(os.path.join(checkpoint_dir, f"iter{it:06d}.ckpt"), params,
                                desc if desc is not None else model.desc)
            if it % 50 == 0:
                logger.info("iter %d total %.4f ce %.4f fool %.4f acc %.3f", *row)
    except E.NonFiniteError as e:
        raise FoolingDiverged(str(e), params, log) from e
    finally:
        if fh is not None:
            fh.close()
    return params, log


def train_baseline(model: Model, params0, dataset: Dataset, epochs: int = 5, lr: float = 0.05,
                   momentum: float = 0.9, batch_size: int = 64, seed: int = 0, log_path=None):
    """Plain cross-entropy training (the lambda = 0 case of ``finetune``)."""
    iters = epochs * math.ceil(len(dataset) / batch_size)
    cfg = FoolingConfig("location", InterpreterSpec("gradcam"), lam=0.0, lr=lr, momentum=momentum,
                        iterations=iters, batch_size=batch_size, seed=seed)
    return finetune(model, params0, dataset, cfg, log_path=log_path)


def accuracy_of(model: Model, params, dataset: Dataset) -> float:
    return float((predict(model, params, dataset.images).argmax(axis=1) == dataset.labels).mean() * 100)
