"""Bird's-eye-view grids: LiDAR occupancy, Gaussian smoothing, view masks.

Grid convention: cell (i, j) covers
[x_min + j*dx, x_min + (j+1)*dx) x [y_min + i*dy, y_min + (i+1)*dy),
so rows index y and columns index x.  Values are stored row-major as
(rows, cols) or (channels, rows, cols).
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .geometry import CameraRig, camera_fov_sector, lidar_to_ego, sector_contains

PCBV_MAGIC = b"PCBV"


@dataclass(frozen=True)
class GridSpec:
    """Metric extent and resolution of a flattened BEV grid."""

    x_min: float
    x_max: float
    y_min: float
    y_max: float
    rows: int
    cols: int

    def __post_init__(self):
        if not (self.x_max > self.x_min and self.y_max > self.y_min):
            raise ValueError(f"degenerate extent [{self.x_min},{self.x_max}]x[{self.y_min},{self.y_max}]")
        if self.rows < 1 or self.cols < 1:
            raise ValueError(f"grid resolution must be positive, got {self.rows}x{self.cols}")

    @property
    def dx(self) -> float:
        return (self.x_max - self.x_min) / self.cols

    @property
    def dy(self) -> float:
        return (self.y_max - self.y_min) / self.rows

    @property
    def n_cells(self) -> int:
        return self.rows * self.cols

    def cell_index(self, x, y) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """(row, col, inside) for metric coordinates; indices only valid where inside."""
        x = np.asarray(x, dtype=np.float64)
        y = np.asarray(y, dtype=np.float64)
        col = np.floor((x - self.x_min) / self.dx).astype(np.int64)
        row = np.floor((y - self.y_min) / self.dy).astype(np.int64)
        inside = (col >= 0) & (col < self.cols) & (row >= 0) & (row < self.rows)
        return row, col, inside

    def cell_centers(self) -> tuple[np.ndarray, np.ndarray]:
        """Metric (x, y) center coordinate arrays, each (rows, cols)."""
        xs = self.x_min + (np.arange(self.cols) + 0.5) * self.dx
        ys = self.y_min + (np.arange(self.rows) + 0.5) * self.dy
        return np.meshgrid(xs, ys)

    def cell_azimuths(self) -> np.ndarray:
        """Azimuth of each cell center from the ego origin, (rows, cols)."""
        cx, cy = self.cell_centers()
        return np.arctan2(cy, cx)


@dataclass
class BevGrid:
    """A BEV scalar or multi-channel field over a :class:`GridSpec`."""

    spec: GridSpec
    values: np.ndarray = field(repr=False)

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64)
        shape2 = (self.spec.rows, self.spec.cols)
        if v.shape != shape2 and (v.ndim != 3 or v.shape[1:] != shape2):
            raise ValueError(f"values shape {v.shape} does not match grid {shape2}")
        self.values = v


@dataclass
class PointCloud:
    """N points in the LiDAR frame, meters, with optional intensity."""

    xyz: np.ndarray
    intensity: np.ndarray | None = None

    def __post_init__(self):
        p = np.asarray(self.xyz, dtype=np.float64).reshape(-1, 3)
        if p.size and not np.isfinite(p).all():
            raise ValueError("point cloud contains non-finite coordinates")
        self.xyz = p
        if self.intensity is not None:
            inten = np.asarray(self.intensity, dtype=np.float64).reshape(-1)
            if inten.shape[0] != p.shape[0]:
                raise ValueError(f"{inten.shape[0]} intensities for {p.shape[0]} points")
            self.intensity = inten

    def __len__(self) -> int:
        return self.xyz.shape[0]


# -- occupancy -----------------------------------------------------------------


def voxelize_occupancy(cloud: PointCloud, rig: CameraRig, spec: GridSpec,
                       z_range: tuple[float, float] = (-3.0, 5.0)) -> BevGrid:
    """Binary occupancy: 1 where at least one LiDAR return lands in a cell.

    Points are moved to the ego frame first; returns outside the grid
    extent or the ego-frame z range are dropped.  The result depends only
    on the set of occupied cells, so duplicated points change nothing.
    """
    occ = np.zeros((spec.rows, spec.cols), dtype=np.float64)
    if len(cloud):
        ego = lidar_to_ego(rig, cloud.xyz)
        row, col, inside = spec.cell_index(ego[:, 0], ego[:, 1])
        keep = inside & (ego[:, 2] >= z_range[0]) & (ego[:, 2] <= z_range[1])
        occ[row[keep], col[keep]] = 1.0
    return BevGrid(spec, occ)


def gaussian_kernel_1d(sigma: float) -> np.ndarray:
    """Truncated Gaussian of radius ceil(3*sigma), normalized to sum 1."""
    radius = int(np.ceil(3.0 * sigma))
    x = np.arange(-radius, radius + 1, dtype=np.float64)
    k = np.exp(-0.5 * (x / sigma) ** 2)
    return k / k.sum()


def gaussian_smooth(mask: BevGrid, sigma: float) -> BevGrid:
    """Blur with a truncated Gaussian and rescale the peak to exactly 1.

    Convolution uses zero padding at the borders and a square kernel of
    radius ceil(3*sigma); an all-zero input stays all-zero.
    """
    if sigma <= 0:
        raise ValueError(f"sigma must be positive, got {sigma}")
    k = gaussian_kernel_1d(sigma)
    out = ndimage.correlate1d(mask.values, k, axis=0, mode="constant", cval=0.0)
    out = ndimage.correlate1d(out, k, axis=1, mode="constant", cval=0.0)
    peak = out.max()
    if peak > 0:
        out = out / peak
    return BevGrid(mask.spec, out)


def split_view_masks(smoothed: BevGrid, rig: CameraRig,
                     sectors: list[tuple[float, float]] | None = None) -> list[BevGrid]:
    """Restrict a BEV mask to each camera's azimuth sector.

    Mask k is the input multiplied by the indicator that the cell-center
    azimuth lies inside camera k's field-of-view sector; cells inside an
    overlap of two sectors appear in both outputs.  ``sectors`` overrides
    the rig-derived sectors (mainly for synthetic test geometries).
    """
    if sectors is None:
        sectors = [camera_fov_sector(rig, k) for k in range(rig.n_cameras)]
    az = smoothed.spec.cell_azimuths()
    out = []
    for sector in sectors:
        inside = sector_contains(sector, az)
        out.append(BevGrid(smoothed.spec, smoothed.values * inside))
    return out


def foreground_view_masks(cloud: PointCloud, rig: CameraRig, spec: GridSpec,
                          sigma: float = 2.0,
                          z_range: tuple[float, float] = (-3.0, 5.0)
                          ) -> tuple[BevGrid, BevGrid, list[BevGrid]]:
    """Full mask pipeline: occupancy, smoothed mask, per-camera masks."""
    occ = voxelize_occupancy(cloud, rig, spec, z_range=z_range)
    smoothed = gaussian_smooth(occ, sigma)
    return occ, smoothed, split_view_masks(smoothed, rig)


# -- file formats ---------------------------------------------------------------


def save_pcbv(path, cloud: PointCloud) -> None:
    """Write the little-endian binary cloud format (x, y, z, intensity float32)."""
    n = len(cloud)
    inten = cloud.intensity if cloud.intensity is not None else np.zeros(n)
    rec = np.empty((n, 4), dtype="<f4")
    rec[:, :3] = cloud.xyz
    rec[:, 3] = inten
    with open(path, "wb") as fh:
        fh.write(PCBV_MAGIC)
        fh.write(struct.pack("<I", n))
        fh.write(rec.tobytes())


def load_pcbv(path) -> PointCloud:
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != PCBV_MAGIC:
        raise ValueError(f"{path}: bad magic {blob[:4]!r}, expected {PCBV_MAGIC!r}")
    (n,) = struct.unpack_from("<I", blob, 4)
    expected = 8 + 16 * n
    if len(blob) != expected:
        raise ValueError(f"{path}: expected {expected} bytes for {n} points, got {len(blob)}")
    rec = np.frombuffer(blob, dtype="<f4", offset=8).reshape(n, 4)
    return PointCloud(rec[:, :3].astype(np.float64), rec[:, 3].astype(np.float64))


def write_pgm(path, values: np.ndarray) -> None:
    """8-bit PGM (P5) visualization plus a float32 raw sidecar (.f32).

    The PGM is scaled so the max value maps to 255; the sidecar keeps the
    exact float values (little-endian float32, row-major).
    """
    v = np.asarray(values, dtype=np.float64)
    if v.ndim != 2:
        raise ValueError(f"PGM export needs a 2-D array, got shape {v.shape}")
    peak = v.max()
    scaled = np.zeros_like(v) if peak <= 0 else v / peak
    img = np.round(scaled * 255.0).astype(np.uint8)
    with open(path, "wb") as fh:
        fh.write(f"P5\n{v.shape[1]} {v.shape[0]}\n255\n".encode("ascii"))
        fh.write(img.tobytes())
    with open(str(path) + ".f32", "wb") as fh:
        fh.write(v.astype("<f4").tobytes())
