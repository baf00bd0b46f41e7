"""Classification metrics and report files."""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ParameterError, ParseError, ShapeError


@dataclass
class ClassMetrics:
    ppv: float
    sensitivity: float
    f1: float
    ppv_undefined: bool = False
    sensitivity_undefined: bool = False
    f1_undefined: bool = False


@dataclass
class EvalReport:
    confusion: np.ndarray  # rows truth, columns prediction
    accuracy: float
    per_class: list
    per_subject: dict = field(default_factory=dict)
    tta_rate: float = 0.0

    @property
    def n_samples(self) -> int:
        return int(self.confusion.sum())

    @property
    def undefined(self) -> list[str]:
        out = []
        for k, m in enumerate(self.per_class):
            for name in ("ppv", "sensitivity", "f1"):
                if getattr(m, f"{name}_undefined"):
                    out.append(f"{name}_{k}")
        return out


def _ratio(num, den):
    return (num / den, False) if den > 0 else (0.0, True)


def confusion_matrix(preds, truths, n_classes: int = 2) -> np.ndarray:
    preds = np.asarray(preds, dtype=np.int64)
    truths = np.asarray(truths, dtype=np.int64)
    if preds.shape != truths.shape:
        raise ShapeError(f"{len(preds)} predictions vs {len(truths)} truths")
    for name, arr in (("prediction", preds), ("truth", truths)):
        if arr.size and (arr.min() < 0 or arr.max() >= n_classes):
            raise ParameterError(f"{name} label outside [0, {n_classes})")
    cm = np.zeros((n_classes, n_classes), dtype=np.int64)
    np.add.at(cm, (truths, preds), 1)
    return cm


def metrics_from_confusion(cm: np.ndarray) -> tuple[float, list[ClassMetrics]]:
    cm = np.asarray(cm, dtype=np.int64)
    total = cm.sum()
    accuracy = float(np.trace(cm) / total) if total else 0.0
    per_class = []
    for k in range(cm.shape[0]):
        tp = cm[k, k]
        ppv, ppv_u = _ratio(tp, cm[:, k].sum())
        se, se_u = _ratio(tp, cm[k, :].sum())
        f1, f1_u = _ratio(2 * ppv * se, ppv + se)
        per_class.append(ClassMetrics(float(ppv), float(se), float(f1), ppv_u, se_u, f1_u))
    return accuracy, per_class


def evaluate(preds, truths, subject_ids=None, tta_invoked=None, n_classes: int = 2) -> EvalReport:
    """Confusion matrix, per-class PPV / sensitivity / F1, and per-subject accuracy.

    Zero denominators give 0 and set the matching ``*_undefined`` flag.
    """
    cm = confusion_matrix(preds, truths, n_classes)
    accuracy, per_class = metrics_from_confusion(cm)
    per_subject = {}
    if subject_ids is not None:
        subject_ids = np.asarray(subject_ids)
        if len(subject_ids) != len(truths):
            raise ShapeError("subject ids and truths differ in length")
        hits = np.asarray(preds) == np.asarray(truths)
        for sid in sorted(set(subject_ids.tolist())):
            per_subject[str(sid)] = float(hits[subject_ids == sid].mean())
    rate = 0.0
    if tta_invoked is not None:
        tta_invoked = np.asarray(tta_invoked, dtype=bool)
        if len(tta_invoked) != len(truths):
            raise ShapeError("tta flags and truths differ in length")
        rate = float(tta_invoked.mean()) if len(tta_invoked) else 0.0
    return EvalReport(cm, accuracy, per_class, per_subject, rate)


# -- report files -------------------------------------------------------------

REPORT_HEADER = ["metric", "class", "value", "undefined"]


def write_report_csv(report: EvalReport, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(REPORT_HEADER)
        w.writerow(["accuracy", "", repr(report.accuracy), 0])
        w.writerow(["tta_rate", "", repr(report.tta_rate), 0])
        k = report.confusion.shape[0]
        for t in range(k):
            for p in range(k):
                w.writerow([f"confusion_{t}_{p}", "", int(report.confusion[t, p]), 0])
        for c, m in enumerate(report.per_class):
            w.writerow(["ppv", c, repr(m.ppv), int(m.ppv_undefined)])
            w.writerow(["sensitivity", c, repr(m.sensitivity), int(m.sensitivity_undefined)])
            w.writerow(["f1", c, repr(m.f1), int(m.f1_undefined)])


def read_report_csv(path, per_subject_path=None) -> EvalReport:
    rows = list(csv.reader(Path(path).read_text().splitlines()))
    if not rows or rows[0] != REPORT_HEADER:
        raise ParseError("bad report header", 1)
    scalars, cells, classes = {}, {}, {}
    for lineno, row in enumerate(rows[1:], start=2):
        if len(row) != 4:
            raise ParseError(f"expected 4 fields, got {len(row)}", lineno)
        name, cls, value, undef = row
        try:
            if name.startswith("confusion_"):
                _, t, p = name.split("_")
                cells[int(t), int(p)] = int(value)
            elif cls == "":
                scalars[name] = float(value)
            else:
                classes.setdefault(int(cls), {})[name] = (float(value), bool(int(undef)))
        except ValueError as exc:
            raise ParseError(str(exc), lineno) from None
    k = len(classes)
    cm = np.zeros((k, k), dtype=np.int64)
    for (t, p), v in cells.items():
        cm[t, p] = v
    per_class = []
    for c in range(k):
        d = classes[c]
        per_class.append(ClassMetrics(d["ppv"][0], d["sensitivity"][0], d["f1"][0],
                                      d["ppv"][1], d["sensitivity"][1], d["f1"][1]))
    per_subject = read_subject_csv(per_subject_path) if per_subject_path else {}
    return EvalReport(cm, scalars["accuracy"], per_class, per_subject, scalars.get("tta_rate", 0.0))


def write_subject_csv(report: EvalReport, path):
    """One row per subject; header only when there are none."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["subject_id", "accuracy"])
        for sid, acc in report.per_subject.items():
            w.writerow([sid, repr(acc)])


def read_subject_csv(path) -> dict[str, float]:
    rows = list(csv.reader(Path(path).read_text().splitlines()))
    if not rows or rows[0] != ["subject_id", "accuracy"]:
        raise ParseError("bad per-subject header", 1)
    return {r[0]: float(r[1]) for r in rows[1:]}


def format_report(report: EvalReport) -> str:
    lines = [f"samples: {report.n_samples}", f"accuracy: {report.accuracy:.4f}",
             f"tta invocation rate: {report.tta_rate:.4f}", "confusion (rows = truth, cols = prediction):"]
    for row in report.confusion:
        lines.append("  " + " ".join(f"{v:6d}" for v in row))
    lines.append("class    PPV      Se       F1")
    for k, m in enumerate(report.per_class):
        flags = [n for n in ("ppv", "sensitivity", "f1") if getattr(m, f"{n}_undefined")]
        note = f"  (undefined: {', '.join(flags)})" if flags else ""
        lines.append(f"{k:<8d} {m.ppv:.4f}   {m.sensitivity:.4f}   {m.f1:.4f}{note}")
    if report.per_subject:
        lines.append("per-subject accuracy:")
        lines += [f"  {sid}: {acc:.4f}" for sid, acc in report.per_subject.items()]
    return "\n".join(lines) + "\n"


def emit_reports(report: EvalReport, out_dir, prefix: str = "report") -> dict[str, Path]:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = {"csv": out_dir / f"{prefix}.csv", "text": out_dir / f"{prefix}.txt",
             "subjects": out_dir / f"{prefix}_subjects.csv"}
    write_report_csv(report, paths["csv"])
    paths["text"].write_text(format_report(report))
    write_subject_csv(report, paths["subjects"])
    return paths
