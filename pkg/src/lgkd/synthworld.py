"""Deterministic synthetic multi-view scenes: boxes, LiDAR, images, labels.

A scene is a set of oriented boxes resting on the ground plane (ego z=0)
around the rig.  LiDAR returns are exact ray intersections with box
surfaces or the ground; camera images are flat-shaded class-colored boxes
over a checkerboard ground; depth ground truth is the per-feature-cell
minimum camera depth of projected LiDAR points.  Everything is a pure
function of (seed, config), so regeneration is byte-identical.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .bev import GridSpec, PointCloud, load_pcbv, save_pcbv
from .geometry import (CameraRig, ego_to_lidar, load_calibration,
                       save_calibration, surround_rig)

GROUND_INTENSITY = 0.3
BOX_INTENSITY = 0.8

# per-class (length, width, height) base sizes, jittered +-20%
CLASS_SIZES = np.array([
    [4.2, 1.9, 1.6],
    [2.6, 1.6, 2.0],
    [1.4, 1.4, 2.4],
    [3.2, 2.6, 1.2],
    [5.4, 2.3, 2.8],
])

# per-class RGB in [0, 1]
CLASS_COLORS = np.array([
    [0.85, 0.25, 0.20],
    [0.20, 0.45, 0.85],
    [0.95, 0.80, 0.20],
    [0.30, 0.75, 0.35],
    [0.70, 0.30, 0.75],
])


class GenerationError(RuntimeError):
    """Scene generation could not satisfy its constraints."""


@dataclass(frozen=True)
class Box:
    """Oriented box: center (x, y, z), size (l, w, h), yaw about +z."""

    class_id: int
    center: tuple[float, float, float]
    size: tuple[float, float, float]
    yaw: float

    def footprint(self) -> np.ndarray:
        """BEV corner polygon, (4, 2), counter-clockwise."""
        l, w = self.size[0] / 2.0, self.size[1] / 2.0
        corners = np.array([[l, w], [-l, w], [-l, -w], [l, -w]])
        c, s = np.cos(self.yaw), np.sin(self.yaw)
        rot = np.array([[c, -s], [s, c]])
        return corners @ rot.T + np.array(self.center[:2])


@dataclass(frozen=True)
class LidarScan:
    """Ring elevations (radians) and azimuth sampling of the scanner."""

    ring_elevations: tuple[float, ...]
    azimuth_step: float
    max_range: float = 70.0

    @classmethod
    def default(cls, rings: int = 16, azimuth_step_deg: float = 0.5,
                elevation_min_deg: float = -14.0, elevation_max_deg: float = 2.0,
                max_range: float = 70.0) -> "LidarScan":
        elevations = np.radians(np.linspace(elevation_min_deg, elevation_max_deg, rings))
        return cls(tuple(float(e) for e in elevations), float(np.radians(azimuth_step_deg)),
                   max_range)


@dataclass(frozen=True)
class Scene:
    boxes: tuple[Box, ...]
    rig: CameraRig
    scan: LidarScan
    seed: int


@dataclass
class Sample:
    """Fully rendered training sample for one scene."""

    images: np.ndarray      # (K, 3, H, W) in [0, 1]
    cloud: PointCloud       # LiDAR frame
    depth_gt: np.ndarray    # (K, Hf, Wf) meters, 0 = unsupervised
    heatmap_gt: np.ndarray  # (classes, rows, cols)
    boxes: tuple[Box, ...]


# -- scene generation -------------------------------------------------------------


def _obb_overlap(a: np.ndarray, b: np.ndarray) -> bool:
    """Separating-axis test for two convex BEV quads (True = overlapping)."""
    for poly1, poly2 in ((a, b), (b, a)):
        for i in range(4):
            edge = poly1[(i + 1) % 4] - poly1[i]
            axis = np.array([-edge[1], edge[0]])
            p1 = poly1 @ axis
            p2 = poly2 @ axis
            if p1.max() <= p2.min() or p2.max() <= p1.min():
                return False
    return True


def generate_scene(seed: int, n_boxes: int, class_count: int, extent: GridSpec,
                   rig: CameraRig | None = None, scan: LidarScan | None = None,
                   min_center_range: float = 4.0, max_center_range: float = np.inf,
                   margin: float = 1.0, max_attempts: int = 1000) -> Scene:
    """Rejection-sample non-overlapping boxes inside the BEV extent.

    Deterministic in ``seed``.  Raises :class:`GenerationError` when a box
    cannot be placed within ``max_attempts`` tries.
    """
    if n_boxes < 0:
        raise ValueError(f"n_boxes must be non-negative, got {n_boxes}")
    if not 1 <= class_count <= len(CLASS_SIZES):
        raise ValueError(f"class_count must be in [1, {len(CLASS_SIZES)}], got {class_count}")
    rig = rig if rig is not None else surround_rig()
    scan = scan if scan is not None else LidarScan.default()
    rng = np.random.default_rng([seed, 0x5CE])
    boxes: list[Box] = []
    footprints: list[np.ndarray] = []
    for b in range(n_boxes):
        placed = False
        for _ in range(max_attempts):
            cls = int(rng.integers(0, class_count))
            size = CLASS_SIZES[cls] * rng.uniform(0.8, 1.2, size=3)
            x = rng.uniform(extent.x_min + margin, extent.x_max - margin)
            y = rng.uniform(extent.y_min + margin, extent.y_max - margin)
            yaw = rng.uniform(-np.pi, np.pi)
            if not (min_center_range <= np.hypot(x, y) <= max_center_range):
                continue
            box = Box(cls, (float(x), float(y), float(size[2] / 2.0)),
                      (float(size[0]), float(size[1]), float(size[2])), float(yaw))
            fp = box.footprint()
            if fp[:, 0].min() < extent.x_min or fp[:, 0].max() > extent.x_max or \
                    fp[:, 1].min() < extent.y_min or fp[:, 1].max() > extent.y_max:
                continue
            # keep a small gap so footprints are strictly disjoint
            grown = replace(box, size=(box.size[0] + 0.5, box.size[1] + 0.5, box.size[2]))
            if any(_obb_overlap(grown.footprint(), other) for other in footprints):
                continue
            boxes.append(box)
            footprints.append(fp)
            placed = True
            break
        if not placed:
            raise GenerationError(f"placed only {len(boxes)} of {n_boxes} boxes "
                                  f"after {max_attempts} attempts each")
    return Scene(tuple(boxes), rig, scan, seed)


# -- ray casting -------------------------------------------------------------------


def _ray_box_hits(origin: np.ndarray, dirs: np.ndarray, box: Box) -> np.ndarray:
    """Slab-test entry distance per ray (inf where missed).

    Rays are given in the ego frame; the test runs in the box's local
    axis-aligned frame.
    """
    c, s = np.cos(box.yaw), np.sin(box.yaw)
    rot = np.array([[c, s, 0.0], [-s, c, 0.0], [0.0, 0.0, 1.0]])  # ego -> box local
    o = rot @ (origin - np.asarray(box.center))
    d = dirs @ rot.T
    half = np.asarray(box.size) / 2.0
    t_near = np.full(dirs.shape[0], -np.inf)
    t_far = np.full(dirs.shape[0], np.inf)
    ok = np.ones(dirs.shape[0], dtype=bool)
    for axis in range(3):
        da = d[:, axis]
        oa = o[axis]
        parallel = np.abs(da) < 1e-12
        ok &= ~(parallel & (np.abs(oa) > half[axis]))
        with np.errstate(divide="ignore", invalid="ignore"):
            t1 = (-half[axis] - oa) / da
            t2 = (half[axis] - oa) / da
        lo = np.minimum(t1, t2)
        hi = np.maximum(t1, t2)
        t_near = np.where(parallel, t_near, np.maximum(t_near, lo))
        t_far = np.where(parallel, t_far, np.minimum(t_far, hi))
    hit = ok & (t_near <= t_far) & (t_far > 0)
    t = np.where(t_near > 0, t_near, t_far)  # inside the box: exit face
    return np.where(hit, t, np.inf)


def _cast_rays(origin: np.ndarray, dirs: np.ndarray, boxes, max_range: float,
               min_range: float = 0.05) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Nearest surface hit per ray against boxes and the ground plane.

    Returns (t, hit_kind, class_id): hit_kind is -1 none, 0 ground,
    1 box; t is inf where nothing was hit within range.
    """
    n = dirs.shape[0]
    best_t = np.full(n, np.inf)
    kind = np.full(n, -1, dtype=np.int64)
    cls = np.full(n, -1, dtype=np.int64)
    dz = dirs[:, 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        t_ground = np.where(dz < -1e-12, -origin[2] / dz, np.inf)
    ground_ok = (t_ground > min_range) & (t_ground <= max_range)
    best_t = np.where(ground_ok, t_ground, best_t)
    kind = np.where(ground_ok, 0, kind)
    for box in boxes:
        t = _ray_box_hits(origin, dirs, box)
        better = (t > min_range) & (t <= max_range) & (t < best_t)
        best_t = np.where(better, t, best_t)
        kind = np.where(better, 1, kind)
        cls = np.where(better, box.class_id, cls)
    return best_t, kind, cls


def cast_lidar(scene: Scene) -> PointCloud:
    """Exact LiDAR returns in the LiDAR frame (box surfaces and ground)."""
    rig, scan = scene.rig, scene.scan
    origin = rig.lidar_to_ego_matrix()[:3, 3]
    azimuths = np.arange(0.0, 2.0 * np.pi, scan.azimuth_step)
    elevations = np.asarray(scene.scan.ring_elevations)
    az, el = np.meshgrid(azimuths, elevations)
    az, el = az.reshape(-1), el.reshape(-1)
    dirs = np.stack([np.cos(el) * np.cos(az), np.cos(el) * np.sin(az), np.sin(el)], axis=-1)
    # rays are expressed in the LiDAR frame; rotate into ego for casting
    dirs_ego = dirs @ rig.lidar_rotation.T
    t, kind, _ = _cast_rays(origin, dirs_ego, scene.boxes, scan.max_range)
    hit = kind >= 0
    points_ego = origin + t[hit, None] * dirs_ego[hit]
    intensity = np.where(kind[hit] == 1, BOX_INTENSITY, GROUND_INTENSITY)
    return PointCloud(ego_to_lidar(rig, points_ego), intensity)


def render_images(scene: Scene) -> np.ndarray:
    """Flat-shaded (K, 3, H, W) camera images in [0, 1].

    Boxes are class-colored with simple distance attenuation; the ground
    is a 2 m checkerboard; the sky is a flat tone.
    """
    rig = scene.rig
    h, w = rig.image_height, rig.image_width
    vv, uu = np.meshgrid(np.arange(h, dtype=np.float64), np.arange(w, dtype=np.float64),
                         indexing="ij")
    pix = np.stack([uu.reshape(-1), vv.reshape(-1), np.ones(h * w)], axis=-1)
    images = np.empty((rig.n_cameras, 3, h, w))
    sky = np.array([0.55, 0.65, 0.75])
    for k in range(rig.n_cameras):
        k_inv = np.linalg.inv(rig.intrinsics[k])
        cam_dirs = pix @ k_inv.T
        cam_dirs /= np.linalg.norm(cam_dirs, axis=-1, keepdims=True)
        dirs = cam_dirs @ rig.rotations[k].T
        origin = rig.translations[k]
        t, kind, cls = _cast_rays(origin, dirs, scene.boxes, max_range=120.0)
        color = np.broadcast_to(sky, (h * w, 3)).copy()
        ground = kind == 0
        if ground.any():
            p = origin + t[ground, None] * dirs[ground]
            parity = (np.floor(p[:, 0] / 2.0) + np.floor(p[:, 1] / 2.0)) % 2
            shade = np.where(parity == 0, 0.35, 0.6)
            color[ground] = shade[:, None] * np.array([1.0, 0.98, 0.92])
        boxed = kind == 1
        if boxed.any():
            base = CLASS_COLORS[cls[boxed]]
            atten = np.clip(1.0 - t[boxed] / 90.0, 0.25, 1.0)
            color[boxed] = base * atten[:, None]
        images[k] = color.T.reshape(3, h, w)
    return images


def render_depth_gt(scene: Scene, camera_index: int, feature_size: tuple[int, int],
                    cloud: PointCloud | None = None) -> np.ndarray:
    """Sparse depth: per feature cell, the minimum camera-frame z of
    LiDAR points projecting into it (0 where none do)."""
    rig = scene.rig
    cloud = cloud if cloud is not None else cast_lidar(scene)
    rows, cols = feature_size
    depth = np.zeros((rows, cols))
    if not len(cloud):
        return depth
    m = rig.ego_to_cam(camera_index) @ rig.lidar_to_ego_matrix()
    cam = cloud.xyz @ m[:3, :3].T + m[:3, 3]
    z = cam[:, 2]
    front = z > 1e-6
    u = rig.intrinsics[camera_index][0, 0] * cam[front, 0] / z[front] + rig.intrinsics[camera_index][0, 2]
    v = rig.intrinsics[camera_index][1, 1] * cam[front, 1] / z[front] + rig.intrinsics[camera_index][1, 2]
    sx = rig.image_width / cols
    sy = rig.image_height / rows
    cw = np.floor((u + 0.5) / sx).astype(np.int64)
    ch = np.floor((v + 0.5) / sy).astype(np.int64)
    ok = (cw >= 0) & (cw < cols) & (ch >= 0) & (ch < rows)
    zf = z[front][ok]
    flat = ch[ok] * cols + cw[ok]
    mins = np.full(rows * cols, np.inf)
    np.minimum.at(mins, flat, zf)
    filled = np.isfinite(mins)
    out = np.zeros(rows * cols)
    out[filled] = mins[filled]
    return out.reshape(rows, cols)


def splat_gt_heatmap(scene: Scene, grid: GridSpec, class_count: int,
                     sigma_gain: float = 1.0 / 6.0, sigma_min: float = 0.6) -> np.ndarray:
    """Per-class max-combined Gaussians at quantized box centers (peak 1).

    The splat radius of each box scales with its BEV footprint diagonal
    measured in cells (sigma = max(sigma_min, sigma_gain * diagonal)).
    """
    heat = np.zeros((class_count, grid.rows, grid.cols))
    jj, ii = np.meshgrid(np.arange(grid.cols, dtype=np.float64),
                         np.arange(grid.rows, dtype=np.float64))
    for box in scene.boxes:
        row, col, inside = grid.cell_index(box.center[0], box.center[1])
        if not bool(inside):
            continue
        diag = np.hypot(box.size[0] / grid.dx, box.size[1] / grid.dy)
        sigma = max(sigma_min, sigma_gain * diag)
        g = np.exp(-((jj - float(col)) ** 2 + (ii - float(row)) ** 2) / (2.0 * sigma ** 2))
        heat[box.class_id] = np.maximum(heat[box.class_id], g)
    return heat


def make_sample(scene: Scene, feature_size: tuple[int, int], grid: GridSpec,
                class_count: int, sigma_gain: float = 1.0 / 6.0) -> Sample:
    """Render all per-scene training data (images, cloud, depth GT, heatmap)."""
    cloud = cast_lidar(scene)
    images = render_images(scene)
    depth = np.stack([render_depth_gt(scene, k, feature_size, cloud=cloud)
                      for k in range(scene.rig.n_cameras)])
    heat = splat_gt_heatmap(scene, grid, class_count, sigma_gain=sigma_gain)
    return Sample(images, cloud, depth, heat, scene.boxes)


# -- image and dataset files --------------------------------------------------------


def write_ppm(path, image: np.ndarray) -> None:
    """Write a (3, H, W) float image in [0, 1] as binary PPM (P6)."""
    img = np.asarray(image)
    if img.ndim != 3 or img.shape[0] != 3:
        raise ValueError(f"expected (3, H, W) image, got {img.shape}")
    data = np.round(np.clip(img, 0.0, 1.0) * 255.0).astype(np.uint8)
    h, w = img.shape[1], img.shape[2]
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        fh.write(data.transpose(1, 2, 0).tobytes())


def read_ppm(path) -> np.ndarray:
    """Read a binary PPM into a (3, H, W) float array in [0, 1]."""
    with open(path, "rb") as fh:
        blob = fh.read()
    parts = blob.split(maxsplit=4)
    if parts[0] != b"P6":
        raise ValueError(f"{path}: not a binary PPM")
    w, h, maxval = int(parts[1]), int(parts[2]), int(parts[3])
    if maxval != 255:
        raise ValueError(f"{path}: unsupported max value {maxval}")
    data = np.frombuffer(parts[4][:w * h * 3], dtype=np.uint8).reshape(h, w, 3)
    return data.transpose(2, 0, 1).astype(np.float64) / 255.0


def save_scene_dir(path, scene: Scene, sample: Sample, split: str) -> None:
    """Write one scene directory: images/, cloud.pcbv, calib.json, gt.json."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    (path / "images").mkdir(exist_ok=True)
    for k in range(sample.images.shape[0]):
        write_ppm(path / "images" / f"cam{k}.ppm", sample.images[k])
    save_pcbv(path / "cloud.pcbv", sample.cloud)
    save_calibration(path / "calib.json", scene.rig)
    doc = {
        "split": split,
        "seed": scene.seed,
        "boxes": [
            {"class_id": b.class_id, "center": list(b.center),
             "size": list(b.size), "yaw": b.yaw}
            for b in scene.boxes
        ],
    }
    with open(path / "gt.json", "w", encoding="utf-8") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_scene_dir(path, feature_size: tuple[int, int], grid: GridSpec,
                   class_count: int, sigma_gain: float = 1.0 / 6.0
                   ) -> tuple[Sample, str]:
    """Read a scene directory back; depth GT and heatmap are recomputed
    from the stored cloud and labels."""
    path = Path(path)
    rig = load_calibration(path / "calib.json")
    with open(path / "gt.json", "r", encoding="utf-8") as fh:
        doc = json.load(fh)
    boxes = tuple(
        Box(int(b["class_id"]), tuple(b["center"]), tuple(b["size"]), float(b["yaw"]))
        for b in doc["boxes"])
    cloud = load_pcbv(path / "cloud.pcbv")
    image_files = sorted((path / "images").glob("cam*.ppm"),
                         key=lambda p: int(p.stem[3:]))
    images = np.stack([read_ppm(p) for p in image_files])
    scene = Scene(boxes, rig, LidarScan.default(), int(doc.get("seed", 0)))
    depth = np.stack([render_depth_gt(scene, k, feature_size, cloud=cloud)
                      for k in range(rig.n_cameras)])
    heat = splat_gt_heatmap(scene, grid, class_count, sigma_gain=sigma_gain)
    return Sample(images, cloud, depth, heat, boxes), str(doc["split"])
