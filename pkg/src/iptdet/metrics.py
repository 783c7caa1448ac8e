"""Frame- and event-level F1 scoring with micro/macro averaging.

Event matching pairs predictions and references of the same class whose
onsets fall within the tolerance (offsets are never checked), using a
maximum-cardinality one-to-one matching.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.optimize import linear_sum_assignment

from .dataset import ClassMap, IPTEvent

DEFAULT_ONSET_TOLERANCE = 0.05  # seconds; 0.2 used for cross-study comparison


def _f1(tp: int, fp: int, fn: int) -> float:
    denom = 2 * tp + fp + fn
    return 2 * tp / denom if denom else 0.0


@dataclass
class EvalReport:
    frame_micro_f1: float
    frame_macro_f1: float
    event_micro_f1: float
    event_macro_f1: float
    per_class: dict  # name -> {"frame_f1", "event_f1", "support"}
    tolerance: float = DEFAULT_ONSET_TOLERANCE
    extra: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "frame_micro_f1": self.frame_micro_f1,
            "frame_macro_f1": self.frame_macro_f1,
            "event_micro_f1": self.event_micro_f1,
            "event_macro_f1": self.event_macro_f1,
            "per_class": self.per_class,
            "tolerance": self.tolerance,
            "extra": self.extra,
        }

    def save(self, path):
        with open(path, "w", encoding="utf-8") as f:
            json.dump(self.to_dict(), f, indent=2)

    @classmethod
    def load(cls, path) -> "EvalReport":
        with open(path, encoding="utf-8") as f:
            d = json.load(f)
        return cls(
            d["frame_micro_f1"],
            d["frame_macro_f1"],
            d["event_micro_f1"],
            d["event_macro_f1"],
            d["per_class"],
            d.get("tolerance", DEFAULT_ONSET_TOLERANCE),
            d.get("extra", {}),
        )


def frame_f1(pred: np.ndarray, ref: np.ndarray, mask: np.ndarray | None = None):
    """Per-(frame, class) binary F1 over mask-valid frames.

    Returns (micro, macro, per_class) where micro pools TP/FP/FN across
    classes, macro averages per-class F1, and zero-support classes score 0.
    """
    pred = np.asarray(pred).astype(bool)
    ref = np.asarray(ref).astype(bool)
    if pred.shape != ref.shape:
        raise ValueError(f"shape mismatch {pred.shape} vs {ref.shape}")
    if mask is not None:
        valid = np.asarray(mask).astype(bool)
        pred = pred[valid]
        ref = ref[valid]

    n_classes = pred.shape[1]
    per_class = []
    tp_all = fp_all = fn_all = 0
    for c in range(n_classes):
        tp = int((pred[:, c] & ref[:, c]).sum())
        fp = int((pred[:, c] & ~ref[:, c]).sum())
        fn = int((~pred[:, c] & ref[:, c]).sum())
        tp_all += tp
        fp_all += fp
        fn_all += fn
        per_class.append({"f1": _f1(tp, fp, fn), "support": int(ref[:, c].sum())})
    micro = _f1(tp_all, fp_all, fn_all)
    macro = float(np.mean([pc["f1"] for pc in per_class])) if per_class else 0.0
    return micro, macro, per_class


def match_events(
    pred: list[IPTEvent], ref: list[IPTEvent], tolerance: float = DEFAULT_ONSET_TOLERANCE
) -> list[tuple[int, int]]:
    """Maximum-cardinality one-to-one matching of compatible event pairs.

    A pair is compatible when labels agree and |onset difference| is within
    the tolerance. Returns (pred_index, ref_index) pairs.
    """
    pairs = []
    labels = {e.label for e in pred} | {e.label for e in ref}
    for c in labels:
        p_idx = [i for i, e in enumerate(pred) if e.label == c]
        r_idx = [j for j, e in enumerate(ref) if e.label == c]
        if not p_idx or not r_idx:
            continue
        compat = np.zeros((len(p_idx), len(r_idx)))
        for a, i in enumerate(p_idx):
            for b, j in enumerate(r_idx):
                if abs(pred[i].onset - ref[j].onset) <= tolerance:
                    compat[a, b] = 1.0
        rows, cols = linear_sum_assignment(compat, maximize=True)
        for a, b in zip(rows, cols):
            if compat[a, b] > 0:
                pairs.append((p_idx[a], r_idx[b]))
    return sorted(pairs)


def event_f1(
    pred: list[IPTEvent],
    ref: list[IPTEvent],
    tolerance: float,
    class_map: ClassMap,
):
    """Event-level F1: matched pairs are TP, unmatched predictions FP,
    unmatched references FN. Micro pools counts, macro averages the
    per-class F1 over every class in the map."""
    per_class = []
    tp_all = fp_all = fn_all = 0
    for c in range(class_map.n_ipt):
        p = [e for e in pred if e.label == c]
        r = [e for e in ref if e.label == c]
        tp = len(match_events(p, r, tolerance))
        fp = len(p) - tp
        fn = len(r) - tp
        tp_all += tp
        fp_all += fp
        fn_all += fn
        per_class.append({"f1": _f1(tp, fp, fn), "support": len(r)})
    micro = _f1(tp_all, fp_all, fn_all)
    macro = float(np.mean([pc["f1"] for pc in per_class])) if per_class else 0.0
    return micro, macro, per_class


def build_report(
    pred_grids,
    ref_grids,
    pred_events,
    ref_events,
    class_map: ClassMap,
    tolerance: float = DEFAULT_ONSET_TOLERANCE,
    extra: dict | None = None,
    masks=None,
) -> EvalReport:
    """Score pooled frame grids and event lists into one report."""
    pred_cat = np.concatenate([np.asarray(g) for g in pred_grids], axis=0)
    ref_cat = np.concatenate([np.asarray(g) for g in ref_grids], axis=0)
    mask_cat = None
    if masks is not None:
        mask_cat = np.concatenate([np.asarray(m) for m in masks], axis=0)
    f_micro, f_macro, f_pc = frame_f1(pred_cat, ref_cat, mask_cat)
    e_micro, e_macro, e_pc = event_f1(pred_events, ref_events, tolerance, class_map)
    per_class = {
        name: {
            "frame_f1": f_pc[c]["f1"],
            "event_f1": e_pc[c]["f1"],
            "support": f_pc[c]["support"],
        }
        for c, name in enumerate(class_map.ipt_names)
    }
    return EvalReport(f_micro, f_macro, e_micro, e_macro, per_class, tolerance, extra or {})


def per_class_histogram(report: EvalReport, output):
    """Write a per-class frame-F1 bar chart (PNG) plus a CSV alongside.

    ``output`` is the PNG path; the CSV lands next to it with the same stem.
    """
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    output = Path(output)
    names = list(report.per_class.keys())
    values = [report.per_class[n]["frame_f1"] for n in names]

    fig, ax = plt.subplots(figsize=(max(4, 1.2 * len(names)), 4))
    ax.bar(range(len(names)), values)
    ax.set_xticks(range(len(names)))
    ax.set_xticklabels(names, rotation=30, ha="right")
    ax.set_ylabel("frame-level F1")
    ax.set_ylim(0, 1)
    fig.tight_layout()
    fig.savefig(output)
    plt.close(fig)

    csv_path = output.with_suffix(".csv")
    with open(csv_path, "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f)
        w.writerow(["class", "frame_f1"])
        for n, v in zip(names, values):
            w.writerow([n, repr(v)])
    return output, csv_path
