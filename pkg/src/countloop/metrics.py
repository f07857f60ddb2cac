"""Detection scoring: counting error, localization error (FP+FN), and F1 under
the 21x21 one-to-one matching rule.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

MATCH_RADIUS = 10  # Chebyshev; half of the 21x21 matching window


def match_detections(
    pred: np.ndarray, gt_points: np.ndarray, radius: int = MATCH_RADIUS
) -> tuple[int, int, int]:
    """One-to-one greedy matching on ascending Chebyshev distance.

    Candidate pairs within `radius` are sorted by (distance, pred coordinate,
    gt coordinate) so results do not depend on input ordering; each endpoint
    matches at most once. Returns (TP, FP, FN).
    """
    pred = np.asarray(pred, dtype=np.float64).reshape(-1, 2)
    gt_points = np.asarray(gt_points, dtype=np.float64).reshape(-1, 2)
    if len(pred) == 0 or len(gt_points) == 0:
        return 0, len(pred), len(gt_points)
    dx = np.abs(pred[:, 0:1] - gt_points[None, :, 0])
    dy = np.abs(pred[:, 1:2] - gt_points[None, :, 1])
    cheb = np.maximum(dx, dy)
    pi, gi = np.nonzero(cheb <= radius)
    order = sorted(
        range(len(pi)),
        key=lambda k: (
            cheb[pi[k], gi[k]],
            pred[pi[k], 0], pred[pi[k], 1],
            gt_points[gi[k], 0], gt_points[gi[k], 1],
        ),
    )
    used_pred = np.zeros(len(pred), dtype=bool)
    used_gt = np.zeros(len(gt_points), dtype=bool)
    tp = 0
    for k in order:
        i, j = pi[k], gi[k]
        if used_pred[i] or used_gt[j]:
            continue
        used_pred[i] = used_gt[j] = True
        tp += 1
    return tp, len(pred) - tp, len(gt_points) - tp


@dataclass(frozen=True)
class ScoreReport:
    gt_count: int
    pred_count: int
    counting_error_pct: float
    tp: int
    fp: int
    fn: int
    precision_pct: float
    recall_pct: float
    f1_pct: float
    localization_error_pct: float

    def to_dict(self) -> dict:
        return asdict(self)


def score(pred: np.ndarray, gt_points: np.ndarray, radius: int = MATCH_RADIUS) -> ScoreReport:
    """Score a detection list against ground-truth dots (same coordinate space)."""
    gt_points = np.asarray(gt_points).reshape(-1, 2)
    if len(gt_points) == 0:
        raise ValueError("ground truth is empty")
    pred = np.asarray(pred).reshape(-1, 2)
    tp, fp, fn = match_detections(pred, gt_points, radius)
    gt_n, pred_n = len(gt_points), len(pred)
    precision = 100.0 * tp / pred_n if pred_n else 0.0
    recall = 100.0 * tp / gt_n
    f1 = 200.0 * tp / (pred_n + gt_n) if (pred_n + gt_n) else 0.0
    return ScoreReport(
        gt_count=gt_n,
        pred_count=pred_n,
        counting_error_pct=100.0 * abs(pred_n - gt_n) / gt_n,
        tp=tp,
        fp=fp,
        fn=fn,
        precision_pct=precision,
        recall_pct=recall,
        f1_pct=f1,
        localization_error_pct=100.0 * (fp + fn) / gt_n,
    )


_COLUMNS = [
    ("Cnt. Er. [%]", "counting_error_pct", "{:.1f}"),
    ("Loc. Er. [%]", "localization_error_pct", "{:.1f}"),
    ("F1 [%]", "f1_pct", "{:.1f}"),
    ("Clicks", "clicks", "{:.1f}"),
    ("Time [sec]", "time_sec", "{:.1f}"),
]


def format_table(rows: list[dict], include_average: bool = True) -> str:
    """Aligned text table of per-image report rows; the Average row is the
    unweighted mean of each column over rows that define it."""
    headers = ["Image"] + [h for h, _, _ in _COLUMNS]
    lines = [headers]
    for row in rows:
        line = [str(row.get("name", "?"))]
        for _, key, fmt in _COLUMNS:
            line.append(fmt.format(row[key]) if key in row and row[key] is not None else "--")
        lines.append(line)
    if include_average and rows:
        avg = ["Average"]
        for _, key, fmt in _COLUMNS:
            vals = [row[key] for row in rows if key in row and row[key] is not None]
            avg.append(fmt.format(float(np.mean(vals))) if vals else "--")
        lines.append(avg)
    widths = [max(len(line[i]) for line in lines) for i in range(len(headers))]
    return "\n".join("  ".join(cell.rjust(w) for cell, w in zip(line, widths)) for line in lines)
