"""Evaluation: depth error metrics and center-distance detection AP.

Depth metrics are computed over supervised pixels (gt > 0) up to a range
cap, with no scale or offset alignment.  Detection AP uses greedy
score-descending matching of predicted centers to ground-truth centers
within a set of radii; the reported composite blends mAP with a
translation-error bonus.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable, NamedTuple, Sequence

import numpy as np

MATCH_RADII = (0.5, 1.0, 2.0, 4.0)
ATE_RADIUS = 2.0
RANGE_BANDS = (10.0, 20.0, 30.0, 40.0)


@dataclass(frozen=True)
class DepthEvalResult:
    """Error and threshold-accuracy statistics of a depth prediction."""

    abs_rel: float
    sq_rel: float
    rmse: float
    rmse_log: float
    a1: float  # fraction with max(pred/gt, gt/pred) < 1.25
    a2: float  # ... < 1.25^2
    a3: float  # ... < 1.25^3

    def as_dict(self) -> dict:
        return {"abs_rel": self.abs_rel, "sq_rel": self.sq_rel, "rmse": self.rmse,
                "rmse_log": self.rmse_log, "a1": self.a1, "a2": self.a2, "a3": self.a3}


@dataclass(frozen=True)
class DetEvalResult:
    """Detection quality: per-class AP, mAP, translation error, composite."""

    class_ap: dict
    mean_ap: float
    translation_error: float
    composite: float


class PredBox(NamedTuple):
    sample_id: int
    class_id: int
    x: float
    y: float
    score: float


class GtBox(NamedTuple):
    sample_id: int
    class_id: int
    x: float
    y: float


def eval_depth(pred: np.ndarray, gt: np.ndarray, max_range: float = 80.0) -> DepthEvalResult:
    """Depth metrics over pixels with 0 < gt <= max_range.

    abs_rel = mean |pred-gt| / gt        sq_rel  = mean (pred-gt)^2 / gt
    rmse    = sqrt(mean (pred-gt)^2)     rmse_log = sqrt(mean (ln pred - ln gt)^2)
    a_i     = fraction with max(pred/gt, gt/pred) < 1.25^i
    """
    p = np.asarray(pred, dtype=np.float64)
    g = np.asarray(gt, dtype=np.float64)
    if p.shape != g.shape:
        raise ValueError(f"eval_depth: prediction shape {p.shape} != ground truth {g.shape}")
    mask = (g > 0) & (g <= max_range)
    if not mask.any():
        raise ValueError("eval_depth: no supervised pixels in range")
    p, g = p[mask], g[mask]
    if p.min() <= 0:
        raise ValueError("eval_depth: non-positive predictions at supervised pixels")
    diff = p - g
    ratio = np.maximum(p / g, g / p)
    return DepthEvalResult(
        abs_rel=float(np.mean(np.abs(diff) / g)),
        sq_rel=float(np.mean(diff ** 2 / g)),
        rmse=float(np.sqrt(np.mean(diff ** 2))),
        rmse_log=float(np.sqrt(np.mean((np.log(p) - np.log(g)) ** 2))),
        a1=float(np.mean(ratio < 1.25)),
        a2=float(np.mean(ratio < 1.25 ** 2)),
        a3=float(np.mean(ratio < 1.25 ** 3)),
    )


def _as_pred(p) -> PredBox:
    return p if isinstance(p, PredBox) else PredBox(*p)


def _as_gt(g) -> GtBox:
    return g if isinstance(g, GtBox) else GtBox(*g)


def _sorted_preds(preds: Sequence[PredBox]) -> list[PredBox]:
    return sorted(preds, key=lambda p: (-p.score, p.sample_id, p.x, p.y))


def _greedy_match(preds: Sequence[PredBox], gts: Sequence[GtBox], radius: float
                  ) -> tuple[list[bool], list[float], int]:
    """Match score-sorted predictions to the nearest unmatched ground truth
    of the same sample within ``radius``; returns per-prediction TP flags,
    matched distances, and the ground-truth count."""
    by_sample: dict[int, list[GtBox]] = {}
    for g in gts:
        by_sample.setdefault(g.sample_id, []).append(g)
    used: dict[int, list[bool]] = {s: [False] * len(v) for s, v in by_sample.items()}
    tp_flags: list[bool] = []
    distances: list[float] = []
    for p in preds:
        cands = by_sample.get(p.sample_id, [])
        best_i, best_d = -1, radius
        for i, g in enumerate(cands):
            if used[p.sample_id][i]:
                continue
            d = math.hypot(p.x - g.x, p.y - g.y)
            if d <= best_d:
                if d < best_d or best_i < 0:
                    best_i, best_d = i, d
        if best_i >= 0:
            used[p.sample_id][best_i] = True
            tp_flags.append(True)
            distances.append(best_d)
        else:
            tp_flags.append(False)
    return tp_flags, distances, len(gts)


def _average_precision(tp_flags: Sequence[bool], n_gt: int) -> float:
    """Trapezoidal area under the precision-recall curve."""
    if n_gt == 0:
        return 0.0
    if not tp_flags:
        return 0.0
    terms = []
    tp = fp = 0
    prev_r, prev_p = 0.0, None
    for flag in tp_flags:
        if flag:
            tp += 1
        else:
            fp += 1
        r = tp / n_gt
        p = tp / (tp + fp)
        if prev_p is None:
            prev_p = p  # flat extension back to recall 0
        terms.append((r - prev_r) * (p + prev_p) / 2.0)
        prev_r, prev_p = r, p
    return float(math.fsum(terms))


def eval_detection(preds: Iterable, gts: Iterable,
                   radii: Sequence[float] = MATCH_RADII,
                   ate_radius: float = ATE_RADIUS) -> DetEvalResult:
    """Center-distance detection evaluation.

    AP per class is the mean over match radii of the trapezoidal area
    under the precision-recall curve from greedy score-order matching;
    mAP averages classes that have ground truth.  The translation error
    is the mean matched-center distance at ``ate_radius`` (equal to
    ``ate_radius`` when nothing matches), and the composite score is
    (5 * mAP + (1 - min(1, ATE / 1m))) / 6.
    """
    preds = [_as_pred(p) for p in preds]
    gts = [_as_gt(g) for g in gts]
    classes = sorted({g.class_id for g in gts})
    class_ap: dict = {}
    all_distances: list[float] = []
    for cls in classes:
        p_cls = _sorted_preds([p for p in preds if p.class_id == cls])
        g_cls = [g for g in gts if g.class_id == cls]
        aps = []
        for radius in radii:
            flags, dists, n_gt = _greedy_match(p_cls, g_cls, radius)
            aps.append(_average_precision(flags, n_gt))
            if radius == ate_radius:
                all_distances.extend(dists)
        class_ap[cls] = float(np.mean(aps))
    mean_ap = float(np.mean(list(class_ap.values()))) if class_ap else 0.0
    if ate_radius not in radii:
        for cls in classes:
            p_cls = _sorted_preds([p for p in preds if p.class_id == cls])
            _, dists, _ = _greedy_match(p_cls, [g for g in gts if g.class_id == cls], ate_radius)
            all_distances.extend(dists)
    ate = float(np.mean(all_distances)) if all_distances else float(ate_radius)
    composite = (5.0 * mean_ap + (1.0 - min(1.0, ate / 1.0))) / 6.0
    return DetEvalResult(class_ap, mean_ap, ate, composite)


def eval_range_banded(preds: Iterable, gts: Iterable,
                      bands: Sequence[float] = RANGE_BANDS,
                      radii: Sequence[float] = MATCH_RADII) -> dict:
    """mAP restricted to objects within each radial band from the origin.

    Bands are cumulative (0..band meters).  A band with no ground truth
    is reported as None.
    """
    preds = [_as_pred(p) for p in preds]
    gts = [_as_gt(g) for g in gts]
    out: dict = {}
    for band in bands:
        g_band = [g for g in gts if math.hypot(g.x, g.y) <= band]
        p_band = [p for p in preds if math.hypot(p.x, p.y) <= band]
        if not g_band:
            out[band] = None
            continue
        out[band] = eval_detection(p_band, g_band, radii=radii).mean_ap
    return out
