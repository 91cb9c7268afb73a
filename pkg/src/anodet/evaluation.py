"""Evaluation of anomaly score files.

Everything here is computed from scratch on in-memory score/label lists:
ROC curve with threshold grouping, trapezoidal AUC, average precision,
the Youden operating point, and F1/accuracy at a threshold. The report
renderer turns a score CSV into a key-value report, a ROC table, and
plots. Positive class is "anomalous"; a higher score ranks as more
anomalous; "score >= threshold" predicts anomalous.
"""

from __future__ import annotations

import math
import os
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from anodet.errors import DegenerateInputError, ShapeError
from anodet.scoring import read_scores

REPORT_NAME = "report.txt"
ROC_NAME = "roc.csv"
HIST_BINS = 50

LABEL_TO_INT = {"healthy": 0, "anomalous": 1}


@dataclass(frozen=True)
class RocPoint:
    threshold: float
    fpr: float
    tpr: float


@dataclass
class EvalReport:
    auc: float
    ap: float
    youden_threshold: float
    youden_j: float
    f1: float
    ca: float
    n_healthy: int
    n_anomalous: int
    hist_edges: np.ndarray
    hist_healthy: np.ndarray
    hist_anomalous: np.ndarray


def _check_classes(scores, labels):
    if len(scores) != len(labels):
        raise ShapeError(f"{len(scores)} scores vs {len(labels)} labels")
    if len(scores) == 0:
        raise DegenerateInputError("no scores")
    labels = [int(v) for v in labels]
    if any(v not in (0, 1) for v in labels):
        raise ValueError("labels must be 0 (healthy) or 1 (anomalous)")
    n_pos = sum(labels)
    if n_pos == 0 or n_pos == len(labels):
        raise DegenerateInputError("need both classes to evaluate")
    return [float(s) for s in scores], labels


def roc_points(scores, labels) -> list[RocPoint]:
    """ROC curve over all distinct thresholds, descending.

    Equal scores collapse into a single threshold step, so the curve has
    one point per distinct score plus the (0, 0) start at +infinity; it
    always ends at (1, 1).
    """
    scores, labels = _check_classes(scores, labels)
    n_pos = sum(labels)
    n_neg = len(labels) - n_pos
    order = sorted(range(len(scores)), key=lambda i: -scores[i])
    points = [RocPoint(math.inf, 0.0, 0.0)]
    tp = fp = 0
    i = 0
    while i < len(order):
        t = scores[order[i]]
        while i < len(order) and scores[order[i]] == t:
            if labels[order[i]]:
                tp += 1
            else:
                fp += 1
            i += 1
        points.append(RocPoint(t, fp / n_neg, tp / n_pos))
    return points


def auc(curve: list[RocPoint]) -> float:
    """Trapezoidal area under the ROC curve."""
    total = 0.0
    for a, b in zip(curve, curve[1:]):
        total += (b.fpr - a.fpr) * (a.tpr + b.tpr) / 2.0
    return total


def average_precision(scores, labels) -> float:
    """Area under the precision-recall walk over descending thresholds.

    Each distinct threshold contributes (recall gain) x (precision there);
    tied scores move recall and precision in one step.
    """
    scores, labels = _check_classes(scores, labels)
    n_pos = sum(labels)
    order = sorted(range(len(scores)), key=lambda i: -scores[i])
    total = 0.0
    tp = fp = 0
    last_recall = 0.0
    i = 0
    while i < len(order):
        t = scores[order[i]]
        while i < len(order) and scores[order[i]] == t:
            if labels[order[i]]:
                tp += 1
            else:
                fp += 1
            i += 1
        recall = tp / n_pos
        if recall > last_recall:
            total += (recall - last_recall) * (tp / (tp + fp))
            last_recall = recall
    return total


def youden(curve: list[RocPoint]) -> tuple[float, float]:
    """Operating point maximizing TPR - FPR.

    Returns (threshold, J). When several thresholds attain the maximum, the
    smallest is returned: it keeps sensitivity highest among the optima.
    """
    best_t = curve[0].threshold
    best_j = curve[0].tpr - curve[0].fpr
    for p in curve[1:]:
        j = p.tpr - p.fpr
        # thresholds descend along the curve, so >= prefers the smallest
        if j >= best_j:
            best_j = j
            best_t = p.threshold
    return best_t, best_j


def stats_at_threshold(scores, labels, threshold: float) -> tuple[float, float]:
    """(F1, accuracy) when predicting anomalous at score >= threshold."""
    scores, labels = _check_classes(scores, labels)
    tp = sum(1 for s, y in zip(scores, labels) if y and s >= threshold)
    fp = sum(1 for s, y in zip(scores, labels) if not y and s >= threshold)
    fn = sum(labels) - tp
    tn = len(labels) - tp - fp - fn
    precision = tp / (tp + fp) if tp + fp else 0.0
    recall = tp / (tp + fn) if tp + fn else 0.0
    f1 = (2 * precision * recall / (precision + recall)
          if precision + recall else 0.0)
    return f1, (tp + tn) / len(labels)


def evaluate_scores(scores, labels) -> tuple[EvalReport, list[RocPoint]]:
    """All report statistics for one score/label sample."""
    scores, labels = _check_classes(scores, labels)
    curve = roc_points(scores, labels)
    area = auc(curve)
    ap = average_precision(scores, labels)
    thr, j = youden(curve)
    f1, ca = stats_at_threshold(scores, labels, thr)

    arr = np.asarray(scores, dtype=np.float64)
    lab = np.asarray(labels, dtype=bool)
    lo, hi = float(arr.min()), float(arr.max())
    if lo == hi:
        lo, hi = lo - 0.5, hi + 0.5
    edges = np.linspace(lo, hi, HIST_BINS + 1)
    hist_h, _ = np.histogram(arr[~lab], bins=edges)
    hist_a, _ = np.histogram(arr[lab], bins=edges)

    report = EvalReport(
        auc=area, ap=ap, youden_threshold=thr, youden_j=j, f1=f1, ca=ca,
        n_healthy=int((~lab).sum()), n_anomalous=int(lab.sum()),
        hist_edges=edges, hist_healthy=hist_h, hist_anomalous=hist_a,
    )
    return report, curve


def _write_report_file(path: Path, report: EvalReport) -> None:
    fields = ["auc", "ap", "youden_threshold", "youden_j", "f1", "ca",
              "n_healthy", "n_anomalous"]
    with open(path, "w") as fh:
        for name in fields:
            fh.write(f"{name}={getattr(report, name)!r}\n")


def _write_roc_csv(path: Path, curve: list[RocPoint]) -> None:
    with open(path, "w") as fh:
        fh.write("threshold,fpr,tpr\n")
        for p in curve:
            fh.write(f"{p.threshold!r},{p.fpr!r},{p.tpr!r}\n")


def _write_plots(out: Path, report: EvalReport, curve: list[RocPoint]) -> None:
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(5, 5))
    ax.plot([p.fpr for p in curve], [p.tpr for p in curve], label=f"AUC {report.auc:.3f}")
    ax.plot([0, 1], [0, 1], linestyle="--", color="grey", linewidth=0.8)
    ax.set_xlabel("false positive rate")
    ax.set_ylabel("true positive rate")
    ax.legend(loc="lower right")
    fig.savefig(out / "roc.png", dpi=120)
    plt.close(fig)

    fig, ax = plt.subplots(figsize=(6, 4))
    centers = (report.hist_edges[:-1] + report.hist_edges[1:]) / 2
    width = report.hist_edges[1] - report.hist_edges[0]
    for counts, n, name in ((report.hist_healthy, report.n_healthy, "healthy"),
                            (report.hist_anomalous, report.n_anomalous, "anomalous")):
        density = counts / (n * width) if n else counts
        ax.bar(centers, density, width=width, alpha=0.55, label=name)
    ax.axvline(report.youden_threshold, color="black", linewidth=0.8,
               label=f"threshold {report.youden_threshold:.4g}")
    ax.set_xlabel("anomaly score")
    ax.set_ylabel("density")
    ax.legend()
    fig.savefig(out / "histogram.png", dpi=120)
    plt.close(fig)


def render_report(score_path: str | os.PathLike, out_dir: str | os.PathLike,
                  plots: bool = True) -> EvalReport:
    """Evaluate a score file and write report.txt, roc.csv, and plot images.

    The textual outputs round-trip exactly: every float is written with
    full precision, so re-rendering the same score file is byte-identical.
    """
    records = read_scores(score_path)
    if not records:
        raise DegenerateInputError(f"score file {score_path} is empty")
    unknown = sorted({r.true_label for r in records} - set(LABEL_TO_INT))
    if unknown:
        raise ValueError(f"unknown labels in score file: {unknown}")
    scores = [r.score for r in records]
    labels = [LABEL_TO_INT[r.true_label] for r in records]
    report, curve = evaluate_scores(scores, labels)

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    _write_report_file(out / REPORT_NAME, report)
    _write_roc_csv(out / ROC_NAME, curve)
    if plots:
        _write_plots(out, report, curve)
    return report
