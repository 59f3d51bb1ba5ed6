"""Loss stack: teacher-student distillation terms and task losses.

Distillation components:
  * masked BEV feature matching (squared L2 under per-view masks),
  * coarse depth matching (temperature-scaled cross-entropy between
    depth-bin distributions),
  * fine depth matching (mean squared error),
  * soft-label heatmap matching (BCE against teacher probabilities).

Task losses: center-heatmap focal loss and the scale-invariant log-depth
loss, plus BCE supervision of the depth-bin distribution against binned
sparse ground truth.  Teacher inputs are always detached, so no gradient
can reach teacher parameters.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import ShapeError, Tensor

PROB_EPS = 1e-7
MASK_NORM_EPS = 1e-8


@dataclass(frozen=True)
class LossWeights:
    """Weights of the combined distillation objective.

    ``alpha`` balances fine vs coarse depth matching, ``beta`` scales the
    BEV feature term, ``gamma`` the depth term, and ``temperature``
    softens the depth-bin distributions.  ``focal_alpha``/``focal_beta``
    are the center focal-loss exponents.
    """

    alpha: float = 1.0
    beta: float = 1.0
    gamma: float = 1.0
    temperature: float = 4.0
    focal_alpha: float = 2.0
    focal_beta: float = 4.0

    def __post_init__(self):
        if self.temperature <= 0:
            raise ValueError(f"temperature must be positive, got {self.temperature}")
        if min(self.alpha, self.beta, self.gamma) < 0:
            raise ValueError("loss weights must be non-negative")
        if self.focal_alpha < 1 or self.focal_beta < 0:
            raise ValueError(f"focal exponents out of range: {self.focal_alpha}, {self.focal_beta}")


@dataclass
class LossReport:
    """Named scalar losses for one optimization step."""

    task: float = 0.0
    focal: float = 0.0
    sil: float = 0.0
    coarse_bce: float = 0.0
    soft: float = 0.0
    bev: float = 0.0
    coarse: float = 0.0
    fine: float = 0.0
    depth: float = 0.0
    total: float = 0.0


def _tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _detached(x) -> Tensor:
    t = _tensor(x)
    return t.detach()


def _clamp_prob(p: Tensor) -> Tensor:
    return ad.clamp(p, PROB_EPS, 1.0 - PROB_EPS)


# -- distillation components ----------------------------------------------------


def bev_distill_loss(bev_teacher, bev_student, view_masks) -> Tensor:
    """Per-view masked squared L2 distance between BEV features.

    ``view_masks`` is (K, rows, cols) (or a list of 2-D masks); both BEV
    features are (..., C, rows, cols).  The summed masked squared error is
    normalized by C * sum of all mask weights (+ eps), so the magnitude is
    independent of grid size.  The teacher feature is detached.
    """
    if isinstance(view_masks, (list, tuple)):
        view_masks = np.stack([m.values if hasattr(m, "values") else np.asarray(m)
                               for m in view_masks])
    masks = np.asarray(view_masks, dtype=np.float64)
    bt = _detached(bev_teacher)
    bs = _tensor(bev_student)
    if bt.shape != bs.shape:
        raise ShapeError(f"bev_distill_loss: teacher {bt.shape} vs student {bs.shape}")
    if masks.ndim not in (3, 4) or masks.shape[-2:] != bs.shape[-2:]:
        raise ShapeError(f"bev_distill_loss: masks {masks.shape} do not match BEV {bs.shape}")
    c = bs.shape[-3]
    diff = bt - bs  # (..., C, rows, cols)
    # lay out as (..., K, C, rows, cols) via broadcasting
    expanded = diff.reshape(diff.shape[:-3] + (1,) + diff.shape[-3:])
    masked = expanded * masks[..., :, None, :, :]
    sq = ad.sum_(ad.square(masked))
    norm = c * float(masks.sum()) + MASK_NORM_EPS
    return sq * (1.0 / norm)


def coarse_depth_loss(student_logits, teacher_logits, temperature: float) -> Tensor:
    """Temperature-scaled cross-entropy between depth-bin distributions.

    Both logits are (..., D, Hf, Wf); the teacher softmax (over D, at
    temperature T) is the target weighting the student log-softmax, the
    per-pixel cross-entropies are averaged, and the result is scaled by
    T^2 to keep gradient magnitude T-independent.
    """
    s = _tensor(student_logits)
    t = _detached(teacher_logits)
    if s.shape != t.shape:
        raise ShapeError(f"coarse_depth_loss: student {s.shape} vs teacher {t.shape}")
    if temperature <= 0:
        raise ValueError(f"temperature must be positive, got {temperature}")
    t_scaled = t.data / temperature
    t_shift = t_scaled - t_scaled.max(axis=-3, keepdims=True)
    t_exp = np.exp(t_shift)
    target = t_exp / t_exp.sum(axis=-3, keepdims=True)
    log_q = ad.log_softmax(s * (1.0 / temperature), axis=-3)
    ce = -ad.sum_(log_q * target, axis=-3)
    return ad.mean(ce) * temperature ** 2


def fine_depth_loss(student_depth, teacher_depth) -> Tensor:
    """Mean squared difference between continuous depth maps (teacher detached)."""
    s = _tensor(student_depth)
    t = _detached(teacher_depth)
    if s.shape != t.shape:
        raise ShapeError(f"fine_depth_loss: student {s.shape} vs teacher {t.shape}")
    return ad.mean(ad.square(s - t))


def depth_distill_loss(coarse, fine, alpha: float) -> Tensor:
    """Combined depth term: coarse + alpha * fine."""
    return _tensor(coarse) + alpha * _tensor(fine)


def soft_label_loss(student_heatmap, teacher_heatmap, distance: str = "bce") -> Tensor:
    """Match student heatmap probabilities to detached teacher probabilities.

    ``distance`` is "bce" (default) or "l2"; inputs must lie in (0, 1).
    """
    s = _tensor(student_heatmap)
    t = _detached(teacher_heatmap)
    if s.shape != t.shape:
        raise ShapeError(f"soft_label_loss: student {s.shape} vs teacher {t.shape}")
    for name, v in (("student", s.data), ("teacher", t.data)):
        # saturated probabilities (exactly 0 or 1) are handled by the clamp
        if v.min() < 0.0 or v.max() > 1.0:
            raise ValueError(f"soft_label_loss: {name} heatmap values must lie in (0, 1)")
    if distance == "l2":
        return ad.mean(ad.square(s - t))
    if distance != "bce":
        raise ValueError(f"unknown soft-label distance {distance!r}")
    sc = _clamp_prob(s)
    y = t.data
    return ad.mean(-(y * ad.log(sc) + (1.0 - y) * ad.log(1.0 - sc)))


def total_distill_loss(soft, bev, depth, weights: LossWeights) -> Tensor:
    """Weighted sum of the three components: soft + beta*bev + gamma*depth."""
    return _tensor(soft) + weights.beta * _tensor(bev) + weights.gamma * _tensor(depth)


# -- task losses -----------------------------------------------------------------


def center_focal_loss(pred, target, focal_alpha: float = 2.0, focal_beta: float = 4.0) -> Tensor:
    """Penalty-reduced focal loss for Gaussian center heatmaps.

    At cells where the target is exactly 1:  -(1-p)^a * log(p).
    Elsewhere:  -(1-y)^b * p^a * log(1-p).
    The sum is divided by the number of target-1 cells (at least 1).
    """
    p = _tensor(pred)
    y = np.asarray(target.data if isinstance(target, Tensor) else target, dtype=np.float64)
    if p.shape != y.shape:
        raise ShapeError(f"center_focal_loss: prediction {p.shape} vs target {y.shape}")
    if y.min() < 0.0 or y.max() > 1.0:
        raise ValueError("center_focal_loss: target heatmap must lie in [0, 1]")
    pc = _clamp_prob(p)
    pos = (y == 1.0).astype(np.float64)
    neg = 1.0 - pos
    n = max(1.0, pos.sum())
    one_m_p = 1.0 - pc
    pos_term = _pow(one_m_p, focal_alpha) * ad.log(pc) * pos
    neg_term = _pow(pc, focal_alpha) * ((1.0 - y) ** focal_beta * neg) * ad.log(one_m_p)
    return -(ad.sum_(pos_term) + ad.sum_(neg_term)) * (1.0 / n)


def _pow(t: Tensor, e: float) -> Tensor:
    if e == 1.0:
        return t
    if e == 2.0:
        return ad.square(t)
    return ad.exp(e * ad.log(t))


def scale_invariant_depth_loss(pred, target, valid=None) -> Tensor:
    """Mean-centered squared log-depth error over supervised pixels.

    With d_i = log(pred_i) - log(target_i) over the n valid pixels, the
    loss is sum((d_i - mean(d))^2) / (2n): invariant under a global
    multiplicative rescaling of the predictions.  ``valid`` defaults to
    target > 0 (sparse ground truth with 0 = unsupervised).
    """
    p = _tensor(pred)
    y = np.asarray(target.data if isinstance(target, Tensor) else target, dtype=np.float64)
    if p.shape != y.shape:
        raise ShapeError(f"scale_invariant_depth_loss: prediction {p.shape} vs target {y.shape}")
    mask = (y > 0) if valid is None else np.asarray(valid, dtype=bool)
    idx = np.nonzero(mask.reshape(-1))[0]
    n = idx.size
    if n == 0:
        raise ValueError("scale_invariant_depth_loss: no supervised pixels")
    p_sel = ad.take(p.reshape((p.size, 1)), idx, axis=0)
    if p_sel.data.min() <= 0:
        raise ValueError("scale_invariant_depth_loss: predictions must be positive at supervised pixels")
    d = ad.log(p_sel) - np.log(y.reshape(-1)[idx])[:, None]
    centered = d - ad.mean(d)
    return ad.sum_(ad.square(centered)) * (1.0 / (2.0 * n))


def log_depth_scale_anchor(pred, target, valid=None) -> Tensor:
    """Squared mean log-ratio over supervised pixels.

    The mean-centered scale-invariant loss is blind to a global rescaling
    of the predictions; this companion term pins the absolute scale.
    """
    p = _tensor(pred)
    y = np.asarray(target.data if isinstance(target, Tensor) else target, dtype=np.float64)
    if p.shape != y.shape:
        raise ShapeError(f"log_depth_scale_anchor: prediction {p.shape} vs target {y.shape}")
    mask = (y > 0) if valid is None else np.asarray(valid, dtype=bool)
    idx = np.nonzero(mask.reshape(-1))[0]
    if idx.size == 0:
        raise ValueError("log_depth_scale_anchor: no supervised pixels")
    p_sel = ad.take(p.reshape((p.size, 1)), idx, axis=0)
    d = ad.log(p_sel) - np.log(y.reshape(-1)[idx])[:, None]
    return ad.square(ad.mean(d))


def coarse_depth_bce(depth_prob, gt_depth, bin_centers: np.ndarray) -> Tensor:
    """BCE between the depth-bin distribution and one-hot binned ground truth.

    ``depth_prob`` is (..., D, Hf, Wf); ``gt_depth`` (..., Hf, Wf) sparse
    metric depth (0 = unsupervised).  Each supervised pixel's target is
    the one-hot of its nearest bin center; pixels beyond the last bin
    edge are ignored.
    """
    p = _tensor(depth_prob)
    y = np.asarray(gt_depth.data if isinstance(gt_depth, Tensor) else gt_depth, dtype=np.float64)
    centers = np.asarray(bin_centers, dtype=np.float64)
    d = centers.size
    if p.shape[-3] != d or p.shape[:-3] + p.shape[-2:] != y.shape:
        raise ShapeError(f"coarse_depth_bce: probabilities {p.shape} vs depth {y.shape} "
                         f"with {d} bins")
    edges = (centers[1:] + centers[:-1]) / 2.0
    flat_y = y.reshape(-1)
    max_edge = centers[-1] + (centers[-1] - edges[-1])
    valid = (flat_y > 0) & (flat_y <= max_edge)
    idx = np.nonzero(valid)[0]
    if idx.size == 0:
        raise ValueError("coarse_depth_bce: no supervised pixels")
    bins = np.searchsorted(edges, flat_y[idx])
    onehot = np.zeros((idx.size, d))
    onehot[np.arange(idx.size), bins] = 1.0
    # pixels-last layout so rows are pixels and columns are bins
    axes = tuple(range(p.ndim))
    perm = axes[:-3] + axes[-2:] + (p.ndim - 3,)
    rows = ad.transpose(p, perm).reshape((y.size, d))
    sel = _clamp_prob(ad.take(rows, idx, axis=0))
    return ad.mean(-(onehot * ad.log(sel) + (1.0 - onehot) * ad.log(1.0 - sel)))
