"""Teacher/student detection networks with lift-splat BEV aggregation.

Per view the network produces context features (C channels), a categorical
depth distribution over D bins, and a continuous depth map from a small
decoder.  Features weighted by the depth distribution are scattered along
precomputed frustum rays into the BEV grid, where a heatmap head predicts
per-class object-center probabilities.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from . import autodiff as ad
from .autodiff import Parameter, ShapeError, Tensor
from .bev import GridSpec
from .geometry import CameraRig, FrustumSpec, frustum_points

FINE_DEPTH_FLOOR = 1e-3
HEATMAP_BIAS_INIT = -2.1972245773362196  # logit(0.1)


@dataclass(frozen=True)
class ModelSpec:
    """Architecture hyperparameters for one network role."""

    role: str
    backbone_widths: tuple[int, int, int]
    feature_channels: int
    feature_size: tuple[int, int]
    depth_bins: int
    decoder_widths: tuple[int, ...]
    heatmap_classes: int

    def __post_init__(self):
        if self.role not in ("teacher", "student"):
            raise ValueError(f"role must be 'teacher' or 'student', got {self.role!r}")
        if len(self.backbone_widths) != 3 or any(w < 1 for w in self.backbone_widths):
            raise ValueError(f"need 3 positive backbone widths, got {self.backbone_widths}")
        if self.feature_channels < 2 or self.depth_bins < 2:
            raise ValueError("feature channels and depth bins must both be >= 2")
        if not self.decoder_widths or any(w < 1 for w in self.decoder_widths):
            raise ValueError(f"need at least one positive decoder width, got {self.decoder_widths}")
        if self.heatmap_classes < 1:
            raise ValueError("need at least one heatmap class")


def check_teacher_student(teacher: ModelSpec, student: ModelSpec) -> None:
    """Validate the capacity relation between a teacher/student pair."""
    if teacher.role != "teacher" or student.role != "student":
        raise ValueError(f"got roles {teacher.role!r} and {student.role!r}")
    if any(tw < sw for tw, sw in zip(teacher.backbone_widths, student.backbone_widths)):
        raise ValueError(
            f"teacher widths {teacher.backbone_widths} must be >= student widths "
            f"{student.backbone_widths} stage-wise")
    for name in ("feature_channels", "feature_size", "depth_bins", "heatmap_classes"):
        if getattr(teacher, name) != getattr(student, name):
            raise ValueError(f"teacher and student must share {name}")


class ForwardOutput(NamedTuple):
    """All per-sample network outputs (leading K = number of cameras)."""

    features: Tensor      # (K, C, Hf, Wf)
    depth_logits: Tensor  # (K, D, Hf, Wf)
    depth_prob: Tensor    # (K, D, Hf, Wf), sums to 1 over D
    fine_depth: Tensor    # (K, Hf, Wf), strictly positive meters
    bev: Tensor           # (C, He, We)
    heatmap: Tensor       # (classes, He, We), values in (0, 1)


class BatchOutput(NamedTuple):
    """Batched variant; leading axes are (B, K) or (B,) as appropriate."""

    features: Tensor      # (B*K, C, Hf, Wf)
    depth_logits: Tensor  # (B*K, D, Hf, Wf)
    depth_prob: Tensor
    fine_depth: Tensor    # (B*K, Hf, Wf)
    bev: Tensor           # (B, C, He, We)
    heatmap: Tensor       # (B, classes, He, We)


def lift_splat(features, depth_prob, points: np.ndarray, grid: GridSpec) -> Tensor:
    """Scatter depth-weighted image features into the BEV grid.

    ``features`` is (K, C, Hf, Wf), ``depth_prob`` (K, D, Hf, Wf), and
    ``points`` the (K, D*Hf*Wf, 3) ego-frame frustum lattice in the
    depth-major order produced by :func:`geometry.frustum_points`.  Each
    lattice point contributes depth_prob * feature of its source cell to
    the BEV cell containing it; points outside the extent are dropped.
    Differentiable in both ``features`` and ``depth_prob``.
    """
    feats = features if isinstance(features, Tensor) else Tensor(features)
    prob = depth_prob if isinstance(depth_prob, Tensor) else Tensor(depth_prob)
    if feats.ndim != 4 or prob.ndim != 4:
        raise ShapeError(f"lift_splat: expected 4-D features/probabilities, got {feats.shape}, {prob.shape}")
    k, c, hf, wf = feats.shape
    d = prob.shape[1]
    if prob.shape != (k, d, hf, wf):
        raise ShapeError(f"lift_splat: depth shape {prob.shape} does not match features {feats.shape}")
    pts = np.asarray(points, dtype=np.float64).reshape(k, d * hf * wf, 3)
    out = _lift_splat_batch(feats, prob, pts, batch=1, grid=grid)
    return out.reshape((c, grid.rows, grid.cols))


def _splat_indices(points: np.ndarray, grid: GridSpec) -> tuple[np.ndarray, np.ndarray]:
    """Flat (row-major) BEV cell index and validity per frustum point."""
    flat = points.reshape(-1, 3)
    row, col, inside = grid.cell_index(flat[:, 0], flat[:, 1])
    cell = row * grid.cols + col
    return np.where(inside, cell, 0), inside


def _splat_flat_targets(points: np.ndarray, grid: GridSpec, batch: int,
                        channels: int, d: int, hw: int) -> np.ndarray:
    """Per-element flat output index for the fused scatter.

    Element (b, k, c, d, p) of the depth-weighted feature block lands in
    flat slot (b * C + c) * n_cells + cell(k, d, p); lattice points
    outside the grid extent are redirected to a trash slot that is sliced
    off after pooling (so they contribute nothing and get zero gradient).
    """
    k = points.shape[0]
    cell, valid = _splat_indices(points, grid)
    cells = grid.n_cells
    trash = batch * channels * cells
    cell3 = cell.reshape(k, d, hw)
    valid3 = valid.reshape(k, d, hw)
    base = (np.arange(batch)[:, None] * channels + np.arange(channels)[None, :]) * cells
    full = base[:, None, :, None, None] + cell3[None, :, None, :, :]
    full = np.where(valid3[None, :, None, :, :], full, trash)
    return full.reshape(batch * k, channels, d, hw)


def _depth_outer_scatter(feats: Tensor, prob: Tensor, flat_idx: np.ndarray,
                         batch: int, grid: GridSpec) -> Tensor:
    """Fused outer product of features with the depth distribution plus
    scatter into BEV cells; one bincount pass keeps the summation order
    fixed and the adjoint a plain gather."""
    bk, c, hf, wf = feats.shape
    d = prob.shape[1]
    hw = hf * wf
    f3 = feats.reshape((bk, c, hw))
    p3 = prob.reshape((bk, d, hw))
    cells = grid.n_cells
    weighted = f3.data[:, :, None, :] * p3.data[:, None, :, :]  # (BK, C, D, HW)
    pooled = np.bincount(flat_idx.reshape(-1), weights=weighted.reshape(-1),
                         minlength=batch * c * cells + 1)[:batch * c * cells]
    out = pooled.reshape(batch, c, grid.rows, grid.cols)

    def backward(g):
        upstream = np.append(g.reshape(-1), 0.0)[flat_idx]  # (BK, C, D, HW)
        if f3.requires_grad:
            f3._accumulate((upstream * p3.data[:, None, :, :]).sum(axis=2))
        if p3.requires_grad:
            p3._accumulate((upstream * f3.data[:, :, None, :]).sum(axis=1))

    return Tensor(out, _parents=(f3, p3), _backward=backward)


def _lift_splat_batch(feats: Tensor, prob: Tensor, points: np.ndarray,
                      batch: int, grid: GridSpec,
                      flat_idx: np.ndarray | None = None) -> Tensor:
    """Core pooling for (B*K, ...) tensors; returns (B, C, rows, cols)."""
    bk, c, hf, wf = feats.shape
    d = prob.shape[1]
    if flat_idx is None:
        flat_idx = _splat_flat_targets(points, grid, batch, c, d, hf * wf)
    return _depth_outer_scatter(feats, prob, flat_idx, batch, grid)


def _he_init(rng: np.random.Generator, c_out: int, c_in: int, k: int) -> np.ndarray:
    std = np.sqrt(2.0 / (c_in * k * k))
    return rng.standard_normal((c_out, c_in, k, k)) * std


class DetectionNet:
    """Lift-splat detector: shared backbone, depth and context heads,
    fine-depth decoder, BEV heatmap head.

    The backbone has three 3x3 conv stages (stride 2, 2, 1) so the feature
    plane is 1/4 of the input image.  Frustum geometry is fixed at
    construction from the rig, frustum spec, and BEV grid.
    """

    def __init__(self, spec: ModelSpec, rig: CameraRig, frustum: FrustumSpec,
                 grid: GridSpec, seed: int = 0):
        hf, wf = spec.feature_size
        if frustum.rows != hf or frustum.cols != wf:
            raise ShapeError(f"frustum {frustum.rows}x{frustum.cols} does not match "
                             f"model feature plane {hf}x{wf}")
        if rig.image_height != 4 * hf or rig.image_width != 4 * wf:
            raise ShapeError(f"image {rig.image_height}x{rig.image_width} must be 4x the "
                             f"feature plane {hf}x{wf}")
        self.spec = spec
        self.rig = rig
        self.frustum = frustum
        self.grid = grid
        self.points = np.stack([frustum_points(rig, frustum, k) for k in range(rig.n_cameras)])
        rng = np.random.default_rng([seed, 0xDE])
        w1, w2, w3 = spec.backbone_widths
        c, d = spec.feature_channels, spec.depth_bins
        p: dict[str, Parameter] = {}

        def conv(name, c_out, c_in, k=3, bias_fill=0.0):
            p[f"{name}.w"] = Parameter(f"{name}.w", _he_init(rng, c_out, c_in, k))
            p[f"{name}.b"] = Parameter(f"{name}.b", np.full(c_out, bias_fill))

        conv("backbone.0", w1, 3)
        conv("backbone.1", w2, w1)
        conv("backbone.2", w3, w2)
        # prediction heads are pointwise; spatial context comes from the stages
        conv("depth_head", d, w3, k=1)
        conv("context_head", c, w3, k=1)
        prev = c
        for i, width in enumerate(spec.decoder_widths):
            conv(f"fine_decoder.{i}", width, prev)
            prev = width
        conv("fine_decoder.out", 1, prev, k=1)
        conv("bev_head.0", c, c)
        conv("bev_head.1", spec.heatmap_classes, c, k=1, bias_fill=HEATMAP_BIAS_INIT)
        self._params = p
        self._splat_cache: dict[int, np.ndarray] = {}

    # -- parameter plumbing --------------------------------------------------

    def parameters(self) -> list[Parameter]:
        return list(self._params.values())

    def named_parameters(self) -> dict[str, Parameter]:
        return dict(self._params)

    def n_parameters(self) -> int:
        return sum(p.size for p in self.parameters())

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.data for name, p in self._params.items()}

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        for name, p in self._params.items():
            if name not in state:
                raise ad.CheckpointError(f"missing parameter '{name}'")
            arr = state[name]
            if arr.shape != p.shape:
                raise ad.CheckpointError(
                    f"parameter '{name}' has shape {arr.shape}, model expects {p.shape}")
            p.data = np.array(arr, dtype=np.float64)
        extra = set(state) - set(self._params)
        if extra:
            raise ad.CheckpointError(f"unexpected parameters: {', '.join(sorted(extra))}")

    def zero_weights(self) -> None:
        for p in self._params.values():
            p.data = np.zeros_like(p.data)

    # -- forward --------------------------------------------------------------

    def _conv(self, x: Tensor, name: str, stride: int = 1) -> Tensor:
        w = self._params[f"{name}.w"]
        return ad.conv2d(x, w, self._params[f"{name}.b"],
                         stride=stride, padding=w.shape[2] // 2)

    def forward_batch(self, images: np.ndarray | Tensor) -> BatchOutput:
        """Run a (B, K, 3, H, W) batch; K must match the rig."""
        x = images if isinstance(images, Tensor) else Tensor(images)
        if x.ndim != 5:
            raise ShapeError(f"expected (B, K, 3, H, W) images, got {x.shape}")
        b, k = x.shape[0], x.shape[1]
        if k != self.rig.n_cameras or x.shape[2] != 3 or \
                x.shape[3] != self.rig.image_height or x.shape[4] != self.rig.image_width:
            raise ShapeError(f"images {x.shape} do not match rig "
                             f"({self.rig.n_cameras} cameras, 3x{self.rig.image_height}"
                             f"x{self.rig.image_width})")
        x = x.reshape((b * k, 3, self.rig.image_height, self.rig.image_width))
        h = ad.relu(self._conv(x, "backbone.0", stride=2))
        h = ad.relu(self._conv(h, "backbone.1", stride=2))
        h = ad.relu(self._conv(h, "backbone.2"))
        depth_logits = self._conv(h, "depth_head")
        depth_prob = ad.softmax(depth_logits, axis=-3)
        feats = self._conv(h, "context_head")
        g = feats
        for i in range(len(self.spec.decoder_widths)):
            g = ad.relu(self._conv(g, f"fine_decoder.{i}"))
        hf, wf = self.spec.feature_size
        fine = ad.softplus(self._conv(g, "fine_decoder.out")) + FINE_DEPTH_FLOOR
        fine = fine.reshape((b * k, hf, wf))
        if b not in self._splat_cache:
            self._splat_cache[b] = _splat_flat_targets(
                self.points, self.grid, b, self.spec.feature_channels,
                self.spec.depth_bins, hf * wf)
        bev = _lift_splat_batch(feats, depth_prob, self.points, batch=b,
                                grid=self.grid, flat_idx=self._splat_cache[b])
        hm = ad.relu(self._conv(bev, "bev_head.0"))
        heatmap = ad.sigmoid(self._conv(hm, "bev_head.1"))
        return BatchOutput(feats, depth_logits, depth_prob, fine, bev, heatmap)

    def forward(self, images: np.ndarray | Tensor) -> ForwardOutput:
        """Run one sample of (K, 3, H, W) images."""
        x = images if isinstance(images, Tensor) else Tensor(images)
        if x.ndim != 4:
            raise ShapeError(f"expected (K, 3, H, W) images, got {x.shape}")
        out = self.forward_batch(x.reshape((1,) + x.shape))
        c = self.spec.feature_channels
        hf, wf = self.spec.feature_size
        k, d = self.rig.n_cameras, self.spec.depth_bins
        return ForwardOutput(
            features=out.features.reshape((k, c, hf, wf)),
            depth_logits=out.depth_logits.reshape((k, d, hf, wf)),
            depth_prob=out.depth_prob.reshape((k, d, hf, wf)),
            fine_depth=out.fine_depth.reshape((k, hf, wf)),
            bev=out.bev.reshape((c, self.grid.rows, self.grid.cols)),
            heatmap=out.heatmap.reshape((self.spec.heatmap_classes, self.grid.rows, self.grid.cols)),
        )


class Detection(NamedTuple):
    class_id: int
    x: float
    y: float
    score: float


def detect_decode(heatmap: np.ndarray, grid: GridSpec, threshold: float = 0.3,
                  max_dets: int = 50) -> list[Detection]:
    """Extract center detections from a (classes, rows, cols) heatmap.

    A cell is a peak when its value is >= all 8 neighbors (3x3 local max;
    plateau cells all qualify) and strictly above the threshold.  Peaks
    are reported at cell-center metric coordinates, sorted by descending
    score with deterministic tie-breaking, at most ``max_dets``.
    """
    hm = np.asarray(heatmap, dtype=np.float64)
    if hm.ndim != 3:
        raise ShapeError(f"expected (classes, rows, cols) heatmap, got {hm.shape}")
    padded = np.pad(hm, ((0, 0), (1, 1), (1, 1)), constant_values=-np.inf)
    is_peak = np.ones_like(hm, dtype=bool)
    for di in (-1, 0, 1):
        for dj in (-1, 0, 1):
            if di == 0 and dj == 0:
                continue
            nb = padded[:, 1 + di:1 + di + hm.shape[1], 1 + dj:1 + dj + hm.shape[2]]
            is_peak &= hm >= nb
    is_peak &= hm > threshold
    cls, row, col = np.nonzero(is_peak)
    scores = hm[cls, row, col]
    order = np.lexsort((col, row, cls, -scores))[:max_dets]
    dets = []
    for idx in order:
        x = grid.x_min + (col[idx] + 0.5) * grid.dx
        y = grid.y_min + (row[idx] + 0.5) * grid.dy
        dets.append(Detection(int(cls[idx]), float(x), float(y), float(scores[idx])))
    return dets
