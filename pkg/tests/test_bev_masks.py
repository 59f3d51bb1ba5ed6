import numpy as np
import pytest

from lgkd.bev import (BevGrid, GridSpec, PointCloud, foreground_view_masks,
                      gaussian_smooth, load_pcbv, save_pcbv, split_view_masks,
                      voxelize_occupancy, write_pgm)
from lgkd.geometry import identity_rig, lidar_to_ego, surround_rig

from .conftest import random_rig
from .oracles import (azimuth_membership_oracle, dense_gaussian_smooth_oracle,
                      voxelize_oracle)


def lidar_identity_rig():
    return identity_rig()


def test_single_point_lands_in_expected_cell(small_grid):
    cloud = PointCloud(np.array([[0.5, 0.5, 0.0]]))
    grid = voxelize_occupancy(cloud, lidar_identity_rig(), small_grid)
    expect = np.zeros((8, 8))
    expect[4, 4] = 1.0
    assert np.array_equal(grid.values, expect)


def test_out_of_range_point_dropped():
    spec = GridSpec(-51.2, 51.2, -51.2, 51.2, 16, 16)
    cloud = PointCloud(np.array([[100.0, 0.0, 0.0]]))
    grid = voxelize_occupancy(cloud, lidar_identity_rig(), spec)
    assert not grid.values.any()


def test_z_range_filter(small_grid):
    cloud = PointCloud(np.array([[0.5, 0.5, 10.0], [0.5, 0.5, -5.0]]))
    grid = voxelize_occupancy(cloud, lidar_identity_rig(), small_grid, z_range=(-3.0, 5.0))
    assert not grid.values.any()


def test_empty_cloud_gives_zero_grid(small_grid):
    grid = voxelize_occupancy(PointCloud(np.zeros((0, 3))), lidar_identity_rig(), small_grid)
    assert grid.values.shape == (8, 8)
    assert not grid.values.any()


def test_voxelize_matches_index_oracle(rng):
    spec = GridSpec(-10.0, 10.0, -8.0, 12.0, 16, 20)
    rig = random_rig(rng)
    pts = rng.uniform(-15, 15, size=(10000, 3))
    grid = voxelize_occupancy(PointCloud(pts), rig, spec, z_range=(-2.0, 4.0))
    ego = lidar_to_ego(rig, pts)
    expected = voxelize_oracle(ego, -10.0, 10.0, -8.0, 12.0, 16, 20, -2.0, 4.0)
    got = {(i, j) for i, j in zip(*np.nonzero(grid.values))}
    assert got == expected


def test_voxelize_invariant_to_order_and_duplicates(rng, small_grid):
    rig = lidar_identity_rig()
    pts = rng.uniform(-4, 4, size=(200, 3))
    base = voxelize_occupancy(PointCloud(pts), rig, small_grid).values
    shuffled = voxelize_occupancy(PointCloud(pts[rng.permutation(200)]), rig, small_grid).values
    doubled = voxelize_occupancy(PointCloud(np.vstack([pts, pts])), rig, small_grid).values
    assert np.array_equal(base, shuffled)
    assert np.array_equal(base, doubled)


# -- smoothing -------------------------------------------------------------------


def test_smooth_all_zero(small_grid):
    out = gaussian_smooth(BevGrid(small_grid, np.zeros((8, 8))), sigma=1.5)
    assert not out.values.any()


def test_smooth_rejects_bad_sigma(small_grid):
    with pytest.raises(ValueError):
        gaussian_smooth(BevGrid(small_grid, np.ones((8, 8))), sigma=0.0)


def test_smooth_single_cell_peak_and_monotone():
    spec = GridSpec(-8, 8, -8, 8, 16, 16)
    mask = np.zeros((16, 16))
    mask[7, 9] = 1.0
    out = gaussian_smooth(BevGrid(spec, mask), sigma=1.0).values
    assert out[7, 9] == 1.0
    assert out.argmax() == 7 * 16 + 9
    # strictly decreasing along the axes away from the peak
    row = out[7, 9:14]
    col = out[3:8, 9]
    assert np.all(np.diff(row) < 0)
    assert np.all(np.diff(col) > 0)


def test_smooth_matches_dense_oracle(rng):
    spec = GridSpec(-8, 8, -8, 8, 12, 14)
    for sigma in (1.0, 2.1):
        mask = (rng.uniform(size=(12, 14)) < 0.15).astype(float)
        got = gaussian_smooth(BevGrid(spec, mask), sigma=sigma).values
        want = dense_gaussian_smooth_oracle(mask, sigma)
        assert np.abs(got - want).max() < 1e-12


def test_smooth_two_cells_oracle():
    spec = GridSpec(-8, 8, -8, 8, 16, 16)
    mask = np.zeros((16, 16))
    mask[8, 5] = 1.0
    mask[8, 8] = 1.0
    got = gaussian_smooth(BevGrid(spec, mask), sigma=1.0).values
    want = dense_gaussian_smooth_oracle(mask, 1.0)
    assert np.abs(got - want).max() < 1e-12


# -- view masks -------------------------------------------------------------------


def test_full_circle_sector_identity(rng, small_grid):
    values = rng.uniform(size=(8, 8))
    masks = split_view_masks(BevGrid(small_grid, values), identity_rig(),
                             sectors=[(-np.pi, np.pi)])
    assert len(masks) == 1
    assert np.array_equal(masks[0].values, values)


def test_two_disjoint_half_planes(small_grid):
    values = np.ones((8, 8))
    sectors = [(-np.pi / 2, np.pi / 2), (np.pi / 2, 3 * np.pi / 2)]
    masks = split_view_masks(BevGrid(small_grid, values), identity_rig(), sectors=sectors)
    combined = masks[0].values + masks[1].values
    # every cell is covered; x=+ cells in mask0, x=- cells in mask1
    assert combined.min() >= 1.0
    assert masks[0].values[:, 5:].all() and not masks[0].values[:, :3].any()
    assert masks[1].values[:, :3].all() and not masks[1].values[:, 5:].any()


def test_view_masks_match_azimuth_oracle(rng):
    spec = GridSpec(-16, 16, -16, 16, 32, 32)
    rig = surround_rig()
    smoothed = BevGrid(spec, rng.uniform(size=(32, 32)))
    masks = split_view_masks(smoothed, rig)
    from lgkd.geometry import camera_fov_sector
    for k in range(6):
        indicator = azimuth_membership_oracle(spec, camera_fov_sector(rig, k))
        assert np.abs(masks[k].values - smoothed.values * indicator).max() == 0.0


def test_mask_algebra_max_recovers_smoothed(rng):
    spec = GridSpec(-16, 16, -16, 16, 32, 32)
    rig = surround_rig()
    smoothed = BevGrid(spec, rng.uniform(size=(32, 32)))
    masks = split_view_masks(smoothed, rig)
    stacked = np.stack([m.values for m in masks])
    assert np.array_equal(stacked.max(axis=0), smoothed.values)
    # 0 <= per-view <= smoothed <= 1
    assert stacked.min() >= 0.0
    assert (stacked <= smoothed.values[None] + 0.0).all()
    assert smoothed.values.max() <= 1.0


def test_mask_pipeline_bounds(rng):
    spec = GridSpec(-16, 16, -16, 16, 32, 32)
    rig = surround_rig()
    pts = rng.uniform(-14, 14, size=(500, 3)) * np.array([1, 1, 0.1])
    occ, smoothed, views = foreground_view_masks(PointCloud(pts), rig, spec, sigma=2.0)
    assert set(np.unique(occ.values)) <= {0.0, 1.0}
    assert smoothed.values.max() == 1.0
    for v in views:
        assert (v.values <= smoothed.values + 0.0).all()


# -- file formats -----------------------------------------------------------------


def test_pcbv_round_trip(tmp_path, rng):
    pts = rng.uniform(-10, 10, size=(57, 3)).astype(np.float32).astype(np.float64)
    inten = rng.uniform(size=57).astype(np.float32).astype(np.float64)
    path = tmp_path / "cloud.pcbv"
    save_pcbv(path, PointCloud(pts, inten))
    assert path.read_bytes()[:4] == b"PCBV"
    loaded = load_pcbv(path)
    assert np.array_equal(loaded.xyz, pts)
    assert np.array_equal(loaded.intensity, inten)


def test_pcbv_rejects_truncation(tmp_path):
    path = tmp_path / "bad.pcbv"
    path.write_bytes(b"PCBV" + (5).to_bytes(4, "little") + b"\x00" * 8)
    with pytest.raises(ValueError, match="expected"):
        load_pcbv(path)


def test_pgm_export(tmp_path, rng):
    values = rng.uniform(size=(6, 9))
    path = tmp_path / "mask.pgm"
    write_pgm(path, values)
    blob = path.read_bytes()
    assert blob.startswith(b"P5\n9 6\n255\n")
    raw = np.frombuffer((tmp_path / "mask.pgm.f32").read_bytes(), dtype="<f4")
    assert np.allclose(raw.reshape(6, 9), values, atol=1e-7)
