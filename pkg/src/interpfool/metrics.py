"""Fooling metrics: per-sample test losses, FSR, Spearman, accuracy, AOPC, weight noise.

Test losses compare the fooled model's heatmaps against either a target
(mask, top-k set) or the original model's heatmaps. All per-sample values
are kept as :class:`TestLossRecord` rows so FSR can be recomputed for any
success interval without touching the models again.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np
from scipy.stats import rankdata

from . import engine as E
from .data import Dataset
from .fooling import MaskSpec, topk_indices
from .interpreters import InterpreterSpec, heatmap_array, normalize_array, upsample_heatmap
from .model import Model, as_params, predict

logger = logging.getLogger(__name__)


class MetricError(ValueError):
    pass


DEFAULT_RANGES = {
    "location": (0.0, 0.2),
    "topk": (0.0, 0.3),
    "centermass": (0.1, 1.0),
    "active": (0.5, 2.0),
}


@dataclass(frozen=True)
class FsrSpec:
    method: str
    lo: float
    hi: float

    def __post_init__(self):
        if self.lo > self.hi:
            raise MetricError(f"empty success interval [{self.lo}, {self.hi}]")

    @classmethod
    def default(cls, method: str) -> "FsrSpec":
        if method not in DEFAULT_RANGES:
            raise MetricError(f"unknown fooling method {method!r}")
        return cls(method, *DEFAULT_RANGES[method])

    def contains(self, t: float) -> bool:
        return self.lo <= t <= self.hi


@dataclass(frozen=True)
class TestLossRecord:
    __test__ = False  # not a pytest class

    sample_id: int
    method: str
    interpreter: str
    t: float
    in_range: bool
    degenerate: bool = False


# ---------------------------------------------------------------------------
# Spearman


def spearman(a, b) -> float:
    """Pearson correlation of average ranks (ties share the mean rank)."""
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    if a.shape != b.shape:
        raise MetricError(f"spearman: length mismatch {a.size} vs {b.size}")
    if a.size < 2:
        raise MetricError("spearman: need at least two values")
    if np.all(a == a[0]) or np.all(b == b[0]):
        raise MetricError("spearman: undefined for constant input")
    ra = rankdata(a) - (a.size + 1) / 2.0
    rb = rankdata(b) - (b.size + 1) / 2.0
    r = float((ra * rb).sum() / math.sqrt((ra * ra).sum() * (rb * rb).sum()))
    return max(-1.0, min(1.0, r))


# ---------------------------------------------------------------------------
# single-sample test losses (plain numpy; the graph versions live in fooling)


def location_test_loss(h: np.ndarray, mask: MaskSpec) -> float:
    h = np.asarray(h, dtype=np.float64)
    if h.shape != mask.shape:
        raise MetricError(f"heatmap {h.shape} does not match mask {mask.shape}")
    hn = normalize_array(h[None], "max_one")[0]
    return float(((hn - mask.m) ** 2).mean())


def topk_test_loss(h: np.ndarray, idx) -> float:
    flat = normalize_array(np.asarray(h, dtype=np.float64)[None], "unit_mass")[0].ravel()
    return float(np.abs(flat[np.asarray(idx)]).sum())


def centermass_test_loss(h_fooled: np.ndarray, h_orig: np.ndarray) -> float:
    """L1 displacement of the centre of mass over the heatmap diagonal."""
    from .fooling import center_of_mass

    shape = np.asarray(h_fooled).shape
    diag = math.sqrt(sum(n * n for n in shape))
    return float(np.abs(center_of_mass(h_fooled) - center_of_mass(h_orig)).sum() / diag)


def active_test_loss(h_c_fooled: np.ndarray, h_other_orig: np.ndarray, h_c_orig: np.ndarray) -> float:
    """s(c, c') - s(c, c): fooled map of c against the original maps of c' and c."""
    return spearman(h_c_fooled, h_other_orig) - spearman(h_c_fooled, h_c_orig)


# ---------------------------------------------------------------------------
# batched test losses


def _spec_name(spec: InterpreterSpec) -> str:
    return spec.kind


def _record(i, method, spec, t, rng: FsrSpec | None):
    rng = rng or FsrSpec.default(method)
    return TestLossRecord(int(i), method, _spec_name(spec), float(t), rng.contains(t))


def _degenerate(i, method, spec):
    return TestLossRecord(int(i), method, _spec_name(spec), float("nan"), False, True)


def test_losses(method: str, model: Model, params_fooled, params_frozen, dataset: Dataset,
                spec: InterpreterSpec, mask: MaskSpec | None = None, k_percent: float = 10.0,
                c1: int | None = None, c2: int | None = None, r: FsrSpec | None = None,
                ids=None, batch_size: int = 250) -> list[TestLossRecord]:
    """Per-sample test losses over ``dataset`` (labels used as the explained class).

    For ``active`` the dataset holds composite images and two records are
    produced per image (ids ``2i`` for class c1 and ``2i+1`` for c2).
    Heatmaps that are identically zero (or constant, for Spearman) are
    flagged degenerate and kept out of FSR.
    """
    spec = spec.resolved(model)
    ids = np.arange(len(dataset)) if ids is None else np.asarray(ids)
    x = dataset.images[ids]
    out = []
    if method == "active":
        if c1 is None or c2 is None:
            raise MetricError("active test loss needs c1 and c2")
        n = len(ids)
        f1 = heatmap_array(model, params_fooled, x, np.full(n, c1), spec, batch_size)
        f2 = heatmap_array(model, params_fooled, x, np.full(n, c2), spec, batch_size)
        o1 = heatmap_array(model, params_frozen, x, np.full(n, c1), spec, batch_size)
        o2 = heatmap_array(model, params_frozen, x, np.full(n, c2), spec, batch_size)
        for j, i in enumerate(ids):
            for rid, (hf, ho_other, ho_self) in ((2 * i, (f1[j], o2[j], o1[j])), (2 * i + 1, (f2[j], o1[j], o2[j]))):
                try:
                    out.append(_record(rid, method, spec, active_test_loss(hf, ho_other, ho_self), r))
                except MetricError:
                    out.append(_degenerate(rid, method, spec))
        return out

    if dataset.labels is None:
        raise MetricError("passive test losses need labelled data")
    y = dataset.labels[ids]
    hf = heatmap_array(model, params_fooled, x, y, spec, batch_size)
    if method == "location":
        if mask is None:
            from .fooling import build_frame_mask

            mask = build_frame_mask(*hf.shape[1:])
        for j, i in enumerate(ids):
            if not (hf[j] > 0).any():
                out.append(_degenerate(i, method, spec))
            else:
                out.append(_record(i, method, spec, location_test_loss(hf[j], mask), r))
    elif method == "topk":
        ho = heatmap_array(model, params_frozen, x, y, spec, batch_size)
        idx = topk_indices(ho, k_percent)
        for j, i in enumerate(ids):
            if not hf[j].any():
                out.append(_degenerate(i, method, spec))
            else:
                out.append(_record(i, method, spec, topk_test_loss(hf[j], idx[j]), r))
    elif method == "centermass":
        ho = heatmap_array(model, params_frozen, x, y, spec, batch_size)
        for j, i in enumerate(ids):
            if not (hf[j] > 0).any() or not (ho[j] > 0).any():
                out.append(_degenerate(i, method, spec))
            else:
                out.append(_record(i, method, spec, centermass_test_loss(hf[j], ho[j]), r))
    else:
        raise MetricError(f"unknown fooling method {method!r}")
    n_deg = sum(rec.degenerate for rec in out)
    if n_deg:
        logger.warning("%s/%s: %d degenerate heatmap(s) excluded", method, spec.kind, n_deg)
    return out


def fsr(records, r: FsrSpec | None = None) -> float:
    """Percentage of non-degenerate records whose t_i lies in the success interval.

    With ``r`` the interval is re-applied to the stored t_i values.
    """
    valid = [rec for rec in records if not rec.degenerate]
    if not valid:
        raise MetricError("fsr: no valid records")
    if r is None:
        hits = sum(rec.in_range for rec in valid)
    else:
        hits = sum(r.contains(rec.t) for rec in valid)
    return 100.0 * hits / len(valid)


# ---------------------------------------------------------------------------
# accuracy


def accuracy(model: Model, params, dataset: Dataset, top_k: int = 1, class_filter: int | None = None) -> float:
    if dataset.labels is None:
        raise MetricError("accuracy needs labelled data")
    if top_k < 1 or top_k > dataset.num_classes:
        raise MetricError(f"top_k must lie in [1, {dataset.num_classes}]")
    sel = np.arange(len(dataset))
    if class_filter is not None:
        sel = np.flatnonzero(dataset.labels == class_filter)
        if len(sel) == 0:
            raise MetricError(f"class {class_filter} does not occur in the dataset")
    logits = predict(model, params, dataset.images[sel])
    y = dataset.labels[sel]
    if top_k == 1:
        hit = logits.argmax(axis=1) == y
    else:
        # rank of the true logit: count of strictly larger logits
        true = logits[np.arange(len(y)), y][:, None]
        hit = (logits > true).sum(axis=1) < top_k
    return float(hit.mean() * 100.0)


# ---------------------------------------------------------------------------
# AOPC


def _softmax(z):
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def region_scores(h: np.ndarray, image_hw, region: int) -> np.ndarray:
    """Sum of the (upsampled) heatmap over each region x region block.

    Trailing rows/columns that do not fill a block are dropped.
    Returns [N, (H // region) * (W // region)] in row-major block order.
    """
    H, W = image_hw
    if h.shape[-2:] != (H, W):
        h = upsample_heatmap(h, (H, W))
    gh, gw = H // region, W // region
    h = h[..., : gh * region, : gw * region]
    return h.reshape(len(h), gh, region, gw, region).sum(axis=(2, 4)).reshape(len(h), -1)


def aopc_curve(model: Model, params, dataset: Dataset, ordering: str = "heatmap", heatmap_params=None,
               spec: InterpreterSpec | None = None, steps: int = 20, region: int = 2, seed: int = 0,
               value_range=None, replacement: np.ndarray | None = None, batch_size: int = 250) -> np.ndarray:
    """Average AOPC(l), l = 0..steps, for the model ``params``.

    Regions are removed in descending order of the heatmap computed with
    ``heatmap_params`` (default: ``params``) for the predicted class, or in
    a random order. Removed pixels take values from a per-sample uniform
    noise image (shared across orderings for the same seed) or from
    ``replacement`` when given.
    """
    if ordering not in ("heatmap", "random"):
        raise MetricError(f"unknown ordering {ordering!r}")
    n, c, H, W = dataset.images.shape
    gh, gw = H // region, W // region
    if region < 1 or steps < 0 or steps > gh * gw:
        raise MetricError(f"{steps} steps of {region}x{region} regions exceed the {H}x{W} image")
    lo, hi = value_range if value_range is not None else dataset.value_range()
    rng = np.random.default_rng(seed)
    if replacement is None:
        replacement = rng.uniform(lo, hi, size=dataset.images.shape).astype(dataset.images.dtype)
    elif replacement.shape != dataset.images.shape:
        raise MetricError("replacement images must match the dataset shape")
    order_rng = np.random.default_rng(seed + 1)

    total = np.zeros(steps + 1)
    for s in range(0, n, batch_size):
        x0 = dataset.images[s:s + batch_size]
        b = len(x0)
        p0 = _softmax(predict(model, params, x0))
        cls = p0.argmax(axis=1)
        base = p0[np.arange(b), cls]
        if ordering == "heatmap":
            src = params if heatmap_params is None else heatmap_params
            h = heatmap_array(model, src, x0, cls, spec, batch_size)
            if h.ndim == 4:
                h = h.sum(axis=1)
            order = np.argsort(-region_scores(h, (H, W), region), axis=1, kind="stable")
        else:
            order = np.stack([order_rng.permutation(gh * gw) for _ in range(b)])
        x = x0.copy()
        rep = replacement[s:s + b]
        drop = np.zeros((b, steps + 1))
        for k in range(1, steps + 1):
            ri, ci = np.divmod(order[:, k - 1], gw)
            for j in range(b):
                rs, cs = ri[j] * region, ci[j] * region
                x[j, :, rs:rs + region, cs:cs + region] = rep[j, :, rs:rs + region, cs:cs + region]
            pk = _softmax(predict(model, params, x))[np.arange(b), cls]
            drop[:, k] = base - pk
        total += (np.cumsum(drop, axis=1) / np.arange(1, steps + 2)).sum(axis=0)
    return total / n


# ---------------------------------------------------------------------------
# weight perturbation


def perturb_params(params, sigma: float, rng: np.random.Generator, relative: bool = True):
    """Add N(0, sigma^2) noise to every tensor; with ``relative`` sigma is scaled by the tensor's RMS."""
    out = {}
    for name in sorted(params):
        p = params[name].data
        scale = sigma
        if relative:
            rms = float(np.sqrt(np.mean(np.square(p, dtype=np.float64))))
            scale = sigma * rms
        noise = rng.normal(0.0, 1.0, size=p.shape) * scale if scale > 0 else 0.0
        out[name] = (p + noise).astype(p.dtype)
    return as_params(out)


def gaussian_perturb_probe(model: Model, params, dataset: Dataset, sigmas=(0.0, 1e-3, 3e-3, 1e-2),
                           trials: int = 5, seed: int = 0, relative: bool = True) -> list[dict]:
    """Mean top-1 accuracy over ``trials`` noisy copies of ``params`` for each sigma."""
    sigmas = list(sigmas)
    if not sigmas:
        raise MetricError("sigma grid is empty")
    if any(s < 0 for s in sigmas):
        raise MetricError("sigmas must be non-negative")
    curve = []
    for si, sigma in enumerate(sigmas):
        accs = []
        for t in range(trials):
            rng = np.random.default_rng([seed, si, t])
            p = perturb_params(params, sigma, rng, relative) if sigma > 0 else params
            accs.append(accuracy(model, p, dataset))
        curve.append({"sigma": float(sigma), "accuracy": float(np.mean(accs)), "trials": [float(a) for a in accs]})
    return curve
