"""Overlap metrics and the per-patient evaluation report.

Dice = 2|P∩T| / (|P|+|T|), IoU = |P∩T| / |P∪T|, both defined as 1.0 when
prediction and truth are both empty. Reports carry Dice/IoU per foreground
class at the ED and ES phases plus a frame-to-frame consistency series
(Dice between consecutive predicted foreground masks).
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass

import numpy as np

CLASS_NAMES = {1: "LV", 2: "RV", 3: "MYO"}
PHASES = ("ED", "ES")
OVERALL_MODES = ("foreground_union", "mean_class")


def _as_binary(mask: np.ndarray, name: str) -> np.ndarray:
    arr = np.asarray(mask)
    if arr.dtype == bool:
        return arr
    if not np.isin(arr, (0, 1)).all():
        raise ValueError(f"{name} is not a binary mask "
                         f"(values outside {{0,1}} present)")
    return arr.astype(bool)


def _counts(p: np.ndarray, t: np.ndarray, op: str) -> tuple[int, int]:
    p = _as_binary(p, "prediction")
    t = _as_binary(t, "truth")
    if p.shape != t.shape:
        raise ValueError(f"mask shapes differ: {p.shape} vs {t.shape}")
    inter = int(np.count_nonzero(p & t))
    if op == "dice":
        return inter, int(np.count_nonzero(p)) + int(np.count_nonzero(t))
    return inter, int(np.count_nonzero(p | t))


def dice(p: np.ndarray, t: np.ndarray) -> float:
    inter, total = _counts(p, t, "dice")
    if total == 0:
        return 1.0
    return 2.0 * inter / total


def iou(p: np.ndarray, t: np.ndarray) -> float:
    inter, union = _counts(p, t, "iou")
    if union == 0:
        return 1.0
    return inter / union


@dataclass
class MetricsReport:
    patient_id: str
    dice_scores: dict  # (phase, class name) -> float
    iou_scores: dict   # (phase, class name) -> float
    overall_iou: float
    consistency: list[float]

    def rows(self):
        """CSV rows ordered phase-major, class order LV, RV, MYO."""
        for phase in PHASES:
            for name in CLASS_NAMES.values():
                yield (self.patient_id, phase, name,
                       self.dice_scores[(phase, name)],
                       self.iou_scores[(phase, name)])

    def mean_foreground_dice(self) -> float:
        return float(np.mean([self.dice_scores[(p, n)] for p in PHASES
                              for n in CLASS_NAMES.values()]))


def evaluate_sequence(pred_labels, gt_labels, ed_index: int, es_index: int,
                      patient_id: str = "unknown",
                      overall: str = "foreground_union") -> MetricsReport:
    """Scores a predicted label sequence against ground truth.

    ``overall`` picks the aggregate IoU flavor: "foreground_union" scores the
    union-of-foreground masks (averaged over the two phases);
    "mean_class" averages the six per-class IoU entries.
    """
    if overall not in OVERALL_MODES:
        raise ValueError(f"overall must be one of {OVERALL_MODES}, got {overall!r}")
    t_len = len(pred_labels)
    if t_len != len(gt_labels):
        raise ValueError(f"sequence lengths differ: {t_len} vs {len(gt_labels)}")
    for idx, name in ((ed_index, "ed_index"), (es_index, "es_index")):
        if not 0 <= idx < t_len:
            raise ValueError(f"{name}={idx} out of range for T={t_len}")
    for p, g in zip(pred_labels, gt_labels):
        if np.shape(p) != np.shape(g):
            raise ValueError(f"label shapes differ: {np.shape(p)} vs {np.shape(g)}")

    dice_scores, iou_scores = {}, {}
    for phase, idx in (("ED", ed_index), ("ES", es_index)):
        pred, gt = np.asarray(pred_labels[idx]), np.asarray(gt_labels[idx])
        for cls, name in CLASS_NAMES.items():
            dice_scores[(phase, name)] = dice(pred == cls, gt == cls)
            iou_scores[(phase, name)] = iou(pred == cls, gt == cls)

    if overall == "mean_class":
        overall_iou = float(np.mean(list(iou_scores.values())))
    else:
        vals = []
        for idx in (ed_index, es_index):
            pred, gt = np.asarray(pred_labels[idx]), np.asarray(gt_labels[idx])
            vals.append(iou(pred > 0, gt > 0))
        overall_iou = float(np.mean(vals))

    consistency = [dice(np.asarray(pred_labels[t]) > 0,
                        np.asarray(pred_labels[t + 1]) > 0)
                   for t in range(t_len - 1)]
    return MetricsReport(patient_id, dice_scores, iou_scores, overall_iou,
                         consistency)


CSV_HEADER = ["patient", "phase", "class", "dice", "iou"]


def write_report_csv(reports, path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(CSV_HEADER)
        for report in reports:
            for patient, phase, name, d, i in report.rows():
                writer.writerow([patient, phase, name, f"{d:.6f}", f"{i:.6f}"])


def write_consistency_jsonl(reports, path) -> None:
    with open(path, "w") as fh:
        for report in reports:
            for t, value in enumerate(report.consistency):
                fh.write(json.dumps({"patient": report.patient_id,
                                     "t": t, "dice": value}) + "\n")
