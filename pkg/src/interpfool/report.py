"""Artifacts: heatmap images, per-sample CSV dumps and the JSON evaluation report."""

from __future__ import annotations

import csv
import glob
import json
import math
import os

import numpy as np

from .interpreters import normalize_array, upsample_heatmap
from .metrics import MetricError, TestLossRecord, fsr
from .pnm import write_pnm

RECORD_COLUMNS = ("sample_id", "method", "interpreter", "t_i", "in_range")
DATASET_NOTE = ("desk-scale substitute dataset; the original large-scale image "
                "pipeline is replaced wholesale")


class ReportError(ValueError):
    pass


# ---------------------------------------------------------------------------
# heatmap images


def heatmap_to_rgb(h: np.ndarray) -> np.ndarray:
    """Diverging colours: red for positive, blue for negative, white at zero."""
    h = np.asarray(h, dtype=np.float64)
    m = np.abs(h).max()
    v = h / m if m > 0 else np.zeros_like(h)
    pos = np.clip(v, 0, 1)
    neg = np.clip(-v, 0, 1)
    r = 1.0 - neg
    g = 1.0 - pos - neg
    b = 1.0 - pos
    rgb = np.stack([r, g, b], axis=-1)
    return np.round(rgb * 255).astype(np.uint8)


def heatmap_to_gray(h: np.ndarray) -> np.ndarray:
    hn = normalize_array(np.asarray(h, dtype=np.float64)[None], "max_one")[0]
    return np.round(hn * 255).astype(np.uint8)


def export_heatmap_image(h: np.ndarray, out_path, style: str = "gray", out_shape=None) -> None:
    """Write a 2D heatmap as P5 (``gray``) or P6 (``diverging``).

    Layer-resolution maps are nearest-upsampled to ``out_shape`` first.
    """
    h = np.asarray(h, dtype=np.float64)
    if h.ndim != 2:
        raise ReportError(f"expected a 2D heatmap, got shape {h.shape}")
    if not np.isfinite(h).all():
        raise ReportError("heatmap contains non-finite values")
    if out_shape is not None and tuple(out_shape) != h.shape:
        h = upsample_heatmap(h, tuple(out_shape))
    if style == "gray":
        img = heatmap_to_gray(h)
    elif style == "diverging":
        img = heatmap_to_rgb(h)
    else:
        raise ReportError(f"unknown style {style!r}")
    write_pnm(out_path, img)


# ---------------------------------------------------------------------------
# per-sample records


def write_records_csv(path, records) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(RECORD_COLUMNS)
        for r in records:
            w.writerow([r.sample_id, r.method, r.interpreter, repr(float(r.t)), int(r.in_range)])


def read_records_csv(path) -> list[TestLossRecord]:
    out = []
    with open(path, newline="") as f:
        reader = csv.DictReader(f)
        if tuple(reader.fieldnames or ()) != RECORD_COLUMNS:
            raise ReportError(f"{path}: unexpected columns {reader.fieldnames}")
        for row in reader:
            t = float(row["t_i"])
            out.append(TestLossRecord(int(row["sample_id"]), row["method"], row["interpreter"], t,
                                      row["in_range"] == "1", math.isnan(t)))
    return out


# ---------------------------------------------------------------------------
# report


def fsr_table(records_by_fooling: dict) -> dict:
    """{fooling interpreter: {evaluated interpreter: FSR}} from per-sample records."""
    table = {}
    for fool_interp in sorted(records_by_fooling):
        groups: dict[str, list] = {}
        for r in records_by_fooling[fool_interp]:
            groups.setdefault(r.interpreter, []).append(r)
        table[fool_interp] = {k: fsr(v) for k, v in sorted(groups.items())}
    return table


def _records_path(out_dir, fool_interp):
    return os.path.join(out_dir, f"records-{fool_interp}.csv")


def build_report(baseline_acc, fooled_acc, records_by_fooling: dict, aopc_curves=None,
                 perturb_curves=None, extra=None) -> dict:
    if not records_by_fooling or not any(records_by_fooling.values()):
        raise MetricError("report needs at least one test-loss record")
    report = {
        "dataset_note": DATASET_NOTE,
        "baseline_acc": float(baseline_acc),
        "fooled_acc": float(fooled_acc),
        "accuracy_delta": float(baseline_acc) - float(fooled_acc),
        "fsr_table": fsr_table(records_by_fooling),
        "degenerate": {k: sum(r.degenerate for r in v) for k, v in sorted(records_by_fooling.items())},
        "aopc_curves": {k: [float(x) for x in v] for k, v in (aopc_curves or {}).items()},
        "perturb_curves": perturb_curves or {},
    }
    if extra:
        report["extra"] = extra
    return report


def emit_report(out_dir, baseline_acc, fooled_acc, records_by_fooling: dict, aopc_curves=None,
                perturb_curves=None, extra=None) -> dict:
    """Write ``report.json`` and one ``records-<interp>.csv`` per fooling interpreter."""
    report = build_report(baseline_acc, fooled_acc, records_by_fooling, aopc_curves, perturb_curves, extra)
    os.makedirs(out_dir, exist_ok=True)
    for fool_interp, recs in records_by_fooling.items():
        write_records_csv(_records_path(out_dir, fool_interp), recs)
    write_json(os.path.join(out_dir, "report.json"), report)
    return report


def regenerate_report(out_dir) -> dict:
    """Rebuild ``report.json`` contents from the persisted per-sample CSVs."""
    with open(os.path.join(out_dir, "report.json")) as f:
        old = json.load(f)
    recs = {}
    for path in sorted(glob.glob(os.path.join(out_dir, "records-*.csv"))):
        name = os.path.basename(path)[len("records-"):-len(".csv")]
        recs[name] = read_records_csv(path)
    return build_report(old["baseline_acc"], old["fooled_acc"], recs, old.get("aopc_curves"),
                        old.get("perturb_curves"), old.get("extra"))


def write_json(path, obj) -> None:
    d = os.path.dirname(os.fspath(path))
    if d:
        os.makedirs(d, exist_ok=True)
    with open(path, "w") as f:
        json.dump(obj, f, indent=2, sort_keys=True)
        f.write("\n")
