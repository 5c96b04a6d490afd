"""Quantitative evaluation: segmentation-based reality metrics, diversity
scoring, and per-class noise-linkage measurement.

The segmenter here is an exact palette-angle oracle that is only valid for
images rendered (or learned) from the synthetic world's palette; every
report states this caveat in its header.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .data import Dataset, ImageRGB, NoiseVector, SemanticLayout, tensor_to_image

ORACLE_CAVEAT = ("segmenter: palette-angle oracle, valid only for the synthetic "
                 "renderer's palette")

DEFAULT_SWEEP_STEPS = (-1.0, -0.5, 0.0, 0.5, 1.0)

LINKAGE_FLOOR = 1e-6
LINKAGE_CAP = 1e6


class EvalError(ValueError):
    pass


@dataclass
class MetricsReport:
    accuracy: float
    mean_iou: float
    per_class_iou: list
    diversity: float
    linkage: list
    images_evaluated: int
    class_names: list[str] = field(default_factory=list)
    note: str = ORACLE_CAVEAT

    def mean_linkage(self) -> float:
        vals = [v for v in self.linkage if v is not None]
        return float(np.mean(vals)) if vals else 0.0


def oracle_segment(image: ImageRGB, palette) -> SemanticLayout:
    """Assign each pixel the class whose base color has the smallest angle
    to the pixel's RGB vector (illumination-invariant); ties take the lowest
    class index, zero pixels fall to class 0."""
    pal = np.asarray(palette, dtype=np.float64)
    pal_norms = np.linalg.norm(pal, axis=1)
    if (pal_norms == 0).any():
        raise EvalError("palette contains a zero color")
    pal_unit = pal / pal_norms[:, None]
    flat = image.values.reshape(-1, 3).astype(np.float64)
    norms = np.linalg.norm(flat, axis=1)
    safe = np.where(norms[:, None] > 0, flat / np.maximum(norms, 1e-300)[:, None], 0.0)
    cos = safe @ pal_unit.T
    cls = np.argmax(cos, axis=1).astype(np.uint8)  # first max = lowest index
    cls[norms == 0] = 0
    return SemanticLayout(cls.reshape(image.height, image.width), classes=len(pal))


def accuracy(pred: SemanticLayout, truth: SemanticLayout) -> float:
    if pred.pixels.shape != truth.pixels.shape:
        raise EvalError(f"accuracy: dims differ {pred.pixels.shape} vs {truth.pixels.shape}")
    return float(np.mean(pred.pixels == truth.pixels))


def iou(pred: SemanticLayout, truth: SemanticLayout):
    """Per-class TP/(TP+FP+FN); the mean runs over classes present in the
    ground truth. Classes absent from both sides report None."""
    if pred.pixels.shape != truth.pixels.shape:
        raise EvalError(f"iou: dims differ {pred.pixels.shape} vs {truth.pixels.shape}")
    classes = max(pred.classes, truth.classes)
    idx = truth.pixels.astype(np.int64) * classes + pred.pixels.astype(np.int64)
    conf = np.bincount(idx.reshape(-1), minlength=classes * classes).reshape(classes, classes)
    tp = np.diag(conf).astype(np.float64)
    fp = conf.sum(axis=0) - tp
    fn = conf.sum(axis=1) - tp
    denom = tp + fp + fn
    per_class = [float(tp[c] / denom[c]) if denom[c] > 0 else None for c in range(classes)]
    truth_present = conf.sum(axis=1) > 0
    mean = float(np.mean([per_class[c] for c in range(classes) if truth_present[c]]))
    return mean, per_class


def pairwise_mean_l1(images: list[np.ndarray]) -> float:
    k = len(images)
    if k < 2:
        return 0.0
    dists = [float(np.mean(np.abs(images[i] - images[j])))
             for i in range(k) for j in range(i + 1, k)]
    return float(np.mean(dists))


def diversity_score(model, layout: SemanticLayout, k: int, rng: np.random.Generator) -> float:
    """Mean pairwise global L1 between outputs under i.i.d. noise."""
    if k < 2:
        raise EvalError("diversity_score needs k >= 2 samples")
    outs = [np.asarray(model.generate(layout, NoiseVector.sample(layout.classes, rng)).data,
                       dtype=np.float64) for _ in range(k)]
    return pairwise_mean_l1(outs)


def linkage_score(model, layout: SemanticLayout, c: int,
                  steps=DEFAULT_SWEEP_STEPS) -> float:
    """Sweep n^c while holding every other entry at zero; the score is the
    mean per-pixel change inside segment c over the mean change outside it
    (denominator floored, ratio capped)."""
    steps = list(steps)
    if len(steps) < 2:
        raise EvalError("linkage_score needs at least 2 sweep steps")
    if c not in layout.present_classes():
        raise EvalError(f"class {c} absent from layout")
    outs = []
    for v in steps:
        entries = np.zeros(layout.classes)
        entries[c] = v
        outs.append(np.asarray(model.generate(layout, NoiseVector(entries)).data,
                               dtype=np.float64))
    delta = np.zeros(layout.pixels.shape, dtype=np.float64)
    for a, b in zip(outs, outs[1:]):
        delta += np.mean(np.abs(b - a), axis=0)
    delta /= len(outs) - 1
    inside_mask = layout.pixels == c
    inside = float(delta[inside_mask].mean())
    outside_vals = delta[~inside_mask]
    outside = float(outside_vals.mean()) if outside_vals.size else 0.0
    return min(inside / max(outside, LINKAGE_FLOOR), LINKAGE_CAP)


def reality_report(model, split: Dataset, samples_per_layout: int,
                   rng: np.random.Generator, palette, class_names=None,
                   linkage_layouts: int = 4,
                   sweep_steps=DEFAULT_SWEEP_STEPS) -> MetricsReport:
    """Generate images from every layout in the split, segment them with the
    palette oracle, and compare against the ground-truth layouts. Diversity
    is the mean pairwise distance among each layout's samples; linkage is
    averaged per class over the first few layouts."""
    if samples_per_layout < 1:
        raise EvalError("samples_per_layout must be >= 1")
    classes = split.class_count
    accs, mean_ious = [], []
    per_class_sums = np.zeros(classes)
    per_class_counts = np.zeros(classes)
    layout_divs = []
    for layout, _image in split.pairs:
        outs = []
        for _ in range(samples_per_layout):
            out = model.generate(layout, NoiseVector.sample(classes, rng))
            outs.append(np.asarray(out.data, dtype=np.float64))
            pred = oracle_segment(tensor_to_image(out), palette)
            accs.append(accuracy(pred, layout))
            m, per_class = iou(pred, layout)
            mean_ious.append(m)
            for cidx in range(classes):
                if per_class[cidx] is not None and np.any(layout.pixels == cidx):
                    per_class_sums[cidx] += per_class[cidx]
                    per_class_counts[cidx] += 1
        if samples_per_layout >= 2:
            layout_divs.append(pairwise_mean_l1(outs))

    linkage: list = [None] * classes
    for cidx in range(classes):
        scores = []
        for layout, _ in split.pairs[:linkage_layouts]:
            if cidx in layout.present_classes():
                scores.append(linkage_score(model, layout, cidx, sweep_steps))
        if scores:
            linkage[cidx] = float(np.mean(scores))

    per_class_iou = [float(per_class_sums[c] / per_class_counts[c])
                     if per_class_counts[c] else None for c in range(classes)]
    return MetricsReport(
        accuracy=float(np.mean(accs)),
        mean_iou=float(np.mean(mean_ious)),
        per_class_iou=per_class_iou,
        diversity=float(np.mean(layout_divs)) if layout_divs else 0.0,
        linkage=linkage,
        images_evaluated=len(accs),
        class_names=list(class_names) if class_names else
        [f"class{c}" for c in range(classes)],
    )


def report_csv(report: MetricsReport) -> str:
    """Flat metric,value CSV."""
    lines = ["metric,value",
             f"accuracy,{report.accuracy!r}",
             f"mean_iou,{report.mean_iou!r}",
             f"diversity,{report.diversity!r}",
             f"mean_linkage,{report.mean_linkage()!r}",
             f"images_evaluated,{report.images_evaluated}"]
    for name, v in zip(report.class_names, report.per_class_iou):
        lines.append(f"iou_{name},{'' if v is None else repr(v)}")
    for name, v in zip(report.class_names, report.linkage):
        lines.append(f"linkage_{name},{'' if v is None else repr(v)}")
    return "\n".join(lines) + "\n"


def report_table(report: MetricsReport, title: str = "evaluation") -> str:
    """Aligned text table with the oracle caveat in the header."""
    rows = [("accuracy", f"{report.accuracy:.4f}"),
            ("mean IoU", f"{report.mean_iou:.4f}"),
            ("diversity", f"{report.diversity:.4f}"),
            ("mean linkage", f"{report.mean_linkage():.4f}"),
            ("images", str(report.images_evaluated))]
    for name, v in zip(report.class_names, report.per_class_iou):
        rows.append((f"IoU[{name}]", "n/a" if v is None else f"{v:.4f}"))
    for name, v in zip(report.class_names, report.linkage):
        rows.append((f"linkage[{name}]", "n/a" if v is None else f"{v:.4f}"))
    key_w = max(len(k) for k, _ in rows)
    val_w = max(len(v) for _, v in rows)
    bar = "-" * (key_w + val_w + 5)
    out = [f"== {title} ==", f"({report.note})", bar]
    out += [f"| {k.ljust(key_w)} | {v.rjust(val_w)} |" for k, v in rows]
    out.append(bar)
    return "\n".join(out) + "\n"


def comparison_table(reports: dict[str, MetricsReport],
                     thresholds: dict | None = None) -> str:
    """Side-by-side Accuracy/IoU/diversity table across model variants."""
    cols = ["Model", "Accuracy", "IoU", "Diversity", "MeanLinkage"]
    rows = [[name, f"{r.accuracy:.4f}", f"{r.mean_iou:.4f}",
             f"{r.diversity:.4f}", f"{r.mean_linkage():.4f}"]
            for name, r in reports.items()]
    widths = [max(len(c), *(len(row[i]) for row in rows)) for i, c in enumerate(cols)]
    bar = "-" * (sum(widths) + 3 * len(cols) + 1)
    out = [f"({ORACLE_CAVEAT})", bar,
           "| " + " | ".join(c.ljust(w) for c, w in zip(cols, widths)) + " |", bar]
    for row in rows:
        out.append("| " + " | ".join(v.ljust(w) for v, w in zip(row, widths)) + " |")
    out.append(bar)
    if thresholds:
        out.append("thresholds: " + ", ".join(f"{k}={v}" for k, v in sorted(thresholds.items())))
    return "\n".join(out) + "\n"
