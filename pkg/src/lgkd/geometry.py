"""Rigid transforms between pixel, camera, ego, and LiDAR frames.

COORDINATE CONVENTIONS
======================
Ego frame (right-handed): x forward, y left, z up; origin on the ground
under the vehicle center.  Azimuth is atan2(y, x).

Camera frame (computer vision): x right, y down, z forward (optical axis).
Camera extrinsics [R | T] map camera coordinates to ego coordinates;
LiDAR extrinsics map LiDAR coordinates to ego coordinates.

Pixels: (u, v) addresses pixel centers at integer coordinates, u along
image width (columns), v along height (rows).  The intrinsic matrix is
K = [[fx, 0, cx], [0, fy, cy], [0, 0, 1]].

All transforms are composed as explicit homogeneous 4x4 matrices, and
inverse poses are the explicit matrix inverse of [R T; 0 1].
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

ROTATION_TOL = 1e-9


class CalibrationError(ValueError):
    """Calibration data violates a rig invariant."""


def _pose(rotation: np.ndarray, translation: np.ndarray) -> np.ndarray:
    m = np.eye(4)
    m[:3, :3] = rotation
    m[:3, 3] = translation
    return m


def _check_rotation(r: np.ndarray, what: str) -> None:
    if r.shape != (3, 3):
        raise CalibrationError(f"{what}: rotation must be 3x3, got {r.shape}")
    if not np.allclose(r.T @ r, np.eye(3), atol=ROTATION_TOL):
        raise CalibrationError(f"{what}: rotation is not orthonormal within {ROTATION_TOL}")
    if not np.isclose(np.linalg.det(r), 1.0, atol=1e-9):
        raise CalibrationError(f"{what}: rotation determinant is {np.linalg.det(r):.6f}, expected +1")


def _check_intrinsics(k: np.ndarray, what: str) -> None:
    if k.shape != (3, 3):
        raise CalibrationError(f"{what}: intrinsics must be 3x3, got {k.shape}")
    if k[0, 0] <= 0 or k[1, 1] <= 0:
        raise CalibrationError(f"{what}: focal lengths must be positive, got {k[0, 0]}, {k[1, 1]}")
    if k[1, 0] != 0 or k[2, 0] != 0 or k[2, 1] != 0:
        raise CalibrationError(f"{what}: lower-left intrinsic entries must be zero")
    if k[2, 2] != 1.0:
        raise CalibrationError(f"{what}: K[2,2] must be 1, got {k[2, 2]}")


@dataclass(frozen=True)
class CameraRig:
    """Calibration for a multi-camera rig plus the LiDAR mount.

    ``intrinsics`` is (K, 3, 3); ``rotations``/``translations`` are the
    camera-to-ego extrinsics, (K, 3, 3) and (K, 3).  ``lidar_rotation``
    and ``lidar_translation`` map LiDAR to ego.  All cameras share one
    image size (height, width) in pixels.
    """

    intrinsics: np.ndarray
    rotations: np.ndarray
    translations: np.ndarray
    lidar_rotation: np.ndarray
    lidar_translation: np.ndarray
    image_height: int
    image_width: int

    def __post_init__(self):
        k = np.asarray(self.intrinsics, dtype=np.float64)
        r = np.asarray(self.rotations, dtype=np.float64)
        t = np.asarray(self.translations, dtype=np.float64)
        lr = np.asarray(self.lidar_rotation, dtype=np.float64)
        lt = np.asarray(self.lidar_translation, dtype=np.float64)
        object.__setattr__(self, "intrinsics", k)
        object.__setattr__(self, "rotations", r)
        object.__setattr__(self, "translations", t)
        object.__setattr__(self, "lidar_rotation", lr)
        object.__setattr__(self, "lidar_translation", lt)
        if k.ndim != 3 or k.shape[0] < 1:
            raise CalibrationError(f"rig must have at least one camera, intrinsics shape {k.shape}")
        n = k.shape[0]
        if r.shape != (n, 3, 3) or t.shape != (n, 3):
            raise CalibrationError(
                f"per-camera array lengths disagree: K {k.shape}, R {r.shape}, T {t.shape}")
        for i in range(n):
            _check_intrinsics(k[i], f"camera {i}")
            _check_rotation(r[i], f"camera {i}")
        _check_rotation(lr, "lidar")
        if lt.shape != (3,):
            raise CalibrationError(f"lidar translation must be length 3, got {lt.shape}")
        if self.image_height < 1 or self.image_width < 1:
            raise CalibrationError(
                f"image size must be positive, got {self.image_height}x{self.image_width}")

    @property
    def n_cameras(self) -> int:
        return self.intrinsics.shape[0]

    def _check_index(self, camera_index: int) -> None:
        if not 0 <= camera_index < self.n_cameras:
            raise IndexError(f"camera index {camera_index} out of range [0, {self.n_cameras})")

    def cam_to_ego(self, camera_index: int) -> np.ndarray:
        """Homogeneous 4x4 camera-to-ego pose."""
        self._check_index(camera_index)
        return _pose(self.rotations[camera_index], self.translations[camera_index])

    def ego_to_cam(self, camera_index: int) -> np.ndarray:
        return np.linalg.inv(self.cam_to_ego(camera_index))

    def lidar_to_ego_matrix(self) -> np.ndarray:
        return _pose(self.lidar_rotation, self.lidar_translation)

    def ego_to_lidar_matrix(self) -> np.ndarray:
        return np.linalg.inv(self.lidar_to_ego_matrix())


@dataclass(frozen=True)
class FrustumSpec:
    """Feature-plane size and depth bin centers for frustum generation."""

    rows: int
    cols: int
    depth_centers: np.ndarray

    def __post_init__(self):
        centers = np.asarray(self.depth_centers, dtype=np.float64)
        object.__setattr__(self, "depth_centers", centers)
        if self.rows < 1 or self.cols < 1:
            raise ValueError(f"feature plane must be positive, got {self.rows}x{self.cols}")
        if centers.ndim != 1 or centers.size < 2:
            raise ValueError("need at least 2 depth bins")
        if centers[0] <= 0 or np.any(np.diff(centers) <= 0):
            raise ValueError("depth bin centers must be positive and strictly increasing")

    @property
    def n_bins(self) -> int:
        return int(self.depth_centers.size)


def uniform_depth_bins(d_min: float, d_max: float, n_bins: int) -> np.ndarray:
    """Centers of ``n_bins`` equal-width depth bins spanning [d_min, d_max]."""
    if not (0 < d_min < d_max):
        raise ValueError(f"invalid depth range [{d_min}, {d_max}]")
    width = (d_max - d_min) / n_bins
    return d_min + (np.arange(n_bins) + 0.5) * width


# -- projection chain ---------------------------------------------------------


def pixel_to_ego(rig: CameraRig, camera_index: int, u, v, z_c) -> np.ndarray:
    """Unproject pixel(s) (u, v) at camera depth z_c into the ego frame.

    Scalars give a (3,) result; equal-shaped arrays give (..., 3).
    """
    rig._check_index(camera_index)
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    z = np.asarray(z_c, dtype=np.float64)
    if np.any(z <= 0):
        raise ValueError("pixel_to_ego: camera depth must be positive")
    k = rig.intrinsics[camera_index]
    if abs(np.linalg.det(k)) < 1e-12:
        raise CalibrationError(f"camera {camera_index}: intrinsic matrix is not invertible")
    pix = np.stack([u, v, np.ones_like(u)], axis=-1)
    cam = (np.linalg.inv(k) @ pix[..., None])[..., 0] * z[..., None]
    m = rig.cam_to_ego(camera_index)
    ego = (m[:3, :3] @ cam[..., None])[..., 0] + m[:3, 3]
    return ego


def ego_to_pixel(rig: CameraRig, camera_index: int, p_ego) -> tuple:
    """Project ego point(s) to (u, v, z_c) for one camera."""
    rig._check_index(camera_index)
    p = np.asarray(p_ego, dtype=np.float64)
    m = rig.ego_to_cam(camera_index)
    cam = (m[:3, :3] @ p[..., None])[..., 0] + m[:3, 3]
    z = cam[..., 2]
    k = rig.intrinsics[camera_index]
    proj = (k @ cam[..., None])[..., 0]
    return proj[..., 0] / z, proj[..., 1] / z, z


def lidar_to_ego(rig: CameraRig, p_lidar) -> np.ndarray:
    p = np.asarray(p_lidar, dtype=np.float64)
    m = rig.lidar_to_ego_matrix()
    return (m[:3, :3] @ p[..., None])[..., 0] + m[:3, 3]


def ego_to_lidar(rig: CameraRig, p_ego) -> np.ndarray:
    """Apply the inverse LiDAR mount pose to ego point(s)."""
    p = np.asarray(p_ego, dtype=np.float64)
    m = rig.ego_to_lidar_matrix()
    return (m[:3, :3] @ p[..., None])[..., 0] + m[:3, 3]


def pixel_to_lidar(rig: CameraRig, camera_index: int, u, v, z_c) -> np.ndarray:
    """Pixel -> ego -> LiDAR, exactly the composition of the two steps."""
    return ego_to_lidar(rig, pixel_to_ego(rig, camera_index, u, v, z_c))


def feature_cell_pixels(rig: CameraRig, rows: int, cols: int) -> tuple[np.ndarray, np.ndarray]:
    """Full-resolution pixel centers of an rows x cols feature grid.

    Cell (h, w) maps to pixel ((w + 0.5) * W/cols - 0.5, (h + 0.5) * H/rows - 0.5),
    i.e. cell centers are center-aligned with the image.
    """
    sx = rig.image_width / cols
    sy = rig.image_height / rows
    us = (np.arange(cols) + 0.5) * sx - 0.5
    vs = (np.arange(rows) + 0.5) * sy - 0.5
    return us, vs


def frustum_points(rig: CameraRig, spec: FrustumSpec, camera_index: int) -> np.ndarray:
    """Ego-frame lattice of unprojected feature-cell centers.

    Returns (D * rows * cols, 3) ordered depth-major, then row, then
    column: index = (d * rows + h) * cols + w.
    """
    us, vs = feature_cell_pixels(rig, spec.rows, spec.cols)
    uu, vv = np.meshgrid(us, vs)  # (rows, cols)
    d = spec.n_bins
    u_flat = np.broadcast_to(uu, (d, spec.rows, spec.cols)).reshape(-1)
    v_flat = np.broadcast_to(vv, (d, spec.rows, spec.cols)).reshape(-1)
    z_flat = np.repeat(spec.depth_centers, spec.rows * spec.cols)
    return pixel_to_ego(rig, camera_index, u_flat, v_flat, z_flat)


# -- field-of-view sectors ------------------------------------------------------

_EDGE_SAMPLES = 33


def _wrap(a: np.ndarray) -> np.ndarray:
    """Wrap angle(s) to (-pi, pi]."""
    return np.asarray(a) - 2.0 * np.pi * np.floor((np.asarray(a) + np.pi) / (2.0 * np.pi))


def camera_fov_sector(rig: CameraRig, camera_index: int) -> tuple[float, float]:
    """Ego-frame azimuth interval covered by one camera.

    The sector spans the azimuths of ray directions through the left and
    right image edges (corners included), so it contains every image
    corner ray.  Returned as (azimuth_min, azimuth_max) with
    azimuth_max - azimuth_min < pi; the interval may extend outside
    (-pi, pi] to express wrap-around.
    """
    rig._check_index(camera_index)
    k = rig.intrinsics[camera_index]
    if abs(np.linalg.det(k)) < 1e-12:
        raise CalibrationError(f"camera {camera_index}: intrinsic matrix is not invertible")
    r = rig.rotations[camera_index]
    forward = r[:, 2]
    fwd_az = float(np.arctan2(forward[1], forward[0]))
    vs = np.linspace(-0.5, rig.image_height - 0.5, _EDGE_SAMPLES)
    us = np.concatenate([np.full(_EDGE_SAMPLES, -0.5),
                         np.full(_EDGE_SAMPLES, rig.image_width - 0.5)])
    vs = np.concatenate([vs, vs])
    pix = np.stack([us, vs, np.ones_like(us)], axis=-1)
    dirs = (r @ (np.linalg.inv(k) @ pix.T)).T
    az = np.arctan2(dirs[:, 1], dirs[:, 0])
    delta = _wrap(az - fwd_az)
    lo, hi = float(delta.min()), float(delta.max())
    if hi - lo >= np.pi:
        raise CalibrationError(
            f"camera {camera_index}: field of view spans {np.degrees(hi - lo):.1f} deg, not a pinhole")
    return fwd_az + lo, fwd_az + hi


def sector_contains(sector: tuple[float, float], azimuth) -> np.ndarray:
    """True where azimuth(s) fall inside the (possibly wrapping) sector.

    Boundaries are inclusive with a 1e-12 rad guard so rays exactly on a
    sector edge (e.g. image corners) always count as covered.
    """
    tol = 1e-12
    lo, hi = sector
    width = hi - lo
    rel = np.mod(np.asarray(azimuth, dtype=np.float64) - lo + tol, 2.0 * np.pi)
    return rel <= width + 2.0 * tol


# -- rig construction and calibration files ------------------------------------


def _yaw_matrix(yaw: float) -> np.ndarray:
    c, s = np.cos(yaw), np.sin(yaw)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])

# Camera axes (x right, y down, z forward) expressed in ego axes for a
# camera looking along ego +x.
_CAM_TO_EGO_BASE = np.array([[0.0, 0.0, 1.0],
                             [-1.0, 0.0, 0.0],
                             [0.0, -1.0, 0.0]])


def make_intrinsics(image_width: int, image_height: int, hfov_rad: float) -> np.ndarray:
    """Square-pixel intrinsics with the given horizontal field of view."""
    fx = (image_width / 2.0) / np.tan(hfov_rad / 2.0)
    return np.array([[fx, 0.0, (image_width - 1) / 2.0],
                     [0.0, fx, (image_height - 1) / 2.0],
                     [0.0, 0.0, 1.0]])


def surround_rig(n_cameras: int = 6, hfov_deg: float = 70.0,
                 image_height: int = 64, image_width: int = 176,
                 camera_height: float = 1.5, camera_radius: float = 1.0,
                 lidar_height: float = 1.8, start_yaw: float = 0.0) -> CameraRig:
    """Evenly spaced surround-view rig with a centered LiDAR.

    Cameras sit at ``camera_radius`` from the ego origin, each yawed by
    360/n degrees from its neighbor, all pitch/roll free.
    """
    hfov = np.radians(hfov_deg)
    k = make_intrinsics(image_width, image_height, hfov)
    ks, rs, ts = [], [], []
    for i in range(n_cameras):
        yaw = start_yaw + 2.0 * np.pi * i / n_cameras
        rot = _yaw_matrix(yaw) @ _CAM_TO_EGO_BASE
        pos = np.array([camera_radius * np.cos(yaw), camera_radius * np.sin(yaw), camera_height])
        ks.append(k)
        rs.append(rot)
        ts.append(pos)
    return CameraRig(
        intrinsics=np.stack(ks), rotations=np.stack(rs), translations=np.stack(ts),
        lidar_rotation=np.eye(3), lidar_translation=np.array([0.0, 0.0, lidar_height]),
        image_height=image_height, image_width=image_width)


def identity_rig(image_height: int = 8, image_width: int = 8) -> CameraRig:
    """Single camera with identity intrinsics and extrinsics (test fixture)."""
    return CameraRig(
        intrinsics=np.eye(3)[None], rotations=np.eye(3)[None], translations=np.zeros((1, 3)),
        lidar_rotation=np.eye(3), lidar_translation=np.zeros(3),
        image_height=image_height, image_width=image_width)


def save_calibration(path, rig: CameraRig) -> None:
    """Write rig calibration as JSON (matrices row-major)."""
    doc = {
        "cameras": [
            {
                "K": [float(x) for x in rig.intrinsics[i].reshape(-1)],
                "R": [float(x) for x in rig.rotations[i].reshape(-1)],
                "T": [float(x) for x in rig.translations[i]],
                "width": rig.image_width,
                "height": rig.image_height,
            }
            for i in range(rig.n_cameras)
        ],
        "lidar": {
            "R": [float(x) for x in rig.lidar_rotation.reshape(-1)],
            "T": [float(x) for x in rig.lidar_translation],
        },
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _field(doc: dict, key: str, where: str):
    if key not in doc:
        raise CalibrationError(f"{where}: missing field '{key}'")
    return doc[key]


def load_calibration(path) -> CameraRig:
    """Read a calibration JSON file, validating every rig invariant."""
    with open(path, "r", encoding="utf-8") as fh:
        try:
            doc = json.load(fh)
        except json.JSONDecodeError as e:
            raise CalibrationError(f"{path}:{e.lineno}: invalid JSON: {e.msg}") from e
    cameras = _field(doc, "cameras", str(path))
    if not isinstance(cameras, list) or not cameras:
        raise CalibrationError(f"{path}: 'cameras' must be a non-empty list")
    ks, rs, ts = [], [], []
    width = height = None
    for i, cam in enumerate(cameras):
        where = f"{path}: cameras[{i}]"
        k = np.asarray(_field(cam, "K", where), dtype=np.float64)
        r = np.asarray(_field(cam, "R", where), dtype=np.float64)
        t = np.asarray(_field(cam, "T", where), dtype=np.float64)
        if k.shape != (9,) or r.shape != (9,) or t.shape != (3,):
            raise CalibrationError(f"{where}: K and R need 9 floats, T needs 3")
        ks.append(k.reshape(3, 3))
        rs.append(r.reshape(3, 3))
        ts.append(t)
        w, h = int(_field(cam, "width", where)), int(_field(cam, "height", where))
        if width is None:
            width, height = w, h
        elif (w, h) != (width, height):
            raise CalibrationError(f"{where}: image size {w}x{h} differs from camera 0 ({width}x{height})")
    lidar = _field(doc, "lidar", str(path))
    lr = np.asarray(_field(lidar, "R", f"{path}: lidar"), dtype=np.float64)
    lt = np.asarray(_field(lidar, "T", f"{path}: lidar"), dtype=np.float64)
    if lr.shape != (9,) or lt.shape != (3,):
        raise CalibrationError(f"{path}: lidar R needs 9 floats, T needs 3")
    try:
        return CameraRig(
            intrinsics=np.stack(ks), rotations=np.stack(rs), translations=np.stack(ts),
            lidar_rotation=lr.reshape(3, 3), lidar_translation=lt,
            image_height=height, image_width=width)
    except CalibrationError as e:
        raise CalibrationError(f"{path}: {e}") from e
