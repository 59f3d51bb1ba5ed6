import numpy as np
import pytest

from lgkd import autodiff as ad
from lgkd.autodiff import ShapeError, Tensor
from lgkd.bev import GridSpec
from lgkd.geometry import FrustumSpec, surround_rig, uniform_depth_bins
from lgkd.models import (DetectionNet, ModelSpec, check_teacher_student,
                         detect_decode, lift_splat)

from .oracles import lift_splat_oracle, local_max_oracle


def tiny_setup():
    rig = surround_rig(image_height=16, image_width=32)
    frustum = FrustumSpec(4, 8, uniform_depth_bins(1.0, 20.0, 4))
    grid = GridSpec(-12.0, 12.0, -12.0, 12.0, 10, 10)
    return rig, frustum, grid


def teacher_spec():
    return ModelSpec("teacher", (6, 8, 12), 4, (4, 8), 4, (8, 8), 3)


def student_spec():
    return ModelSpec("student", (3, 4, 6), 4, (4, 8), 4, (6,), 3)


# -- lift-splat --------------------------------------------------------------------


def grid_points(rng, k, d, hf, wf, grid, spill=0.2):
    lo = np.array([grid.x_min, grid.y_min, -1.0])
    hi = np.array([grid.x_max, grid.y_max, 1.0])
    span = hi - lo
    pts = rng.uniform(lo - spill * span, hi + spill * span, size=(k, d * hf * wf, 3))
    return pts


def test_lift_splat_matches_bruteforce(rng):
    grid = GridSpec(-4, 4, -4, 4, 5, 5)
    for _ in range(5):
        k, c, d, hf, wf = 2, 3, 3, 2, 2
        feats = rng.standard_normal((k, c, hf, wf))
        prob = rng.uniform(size=(k, d, hf, wf))
        prob /= prob.sum(axis=1, keepdims=True)
        pts = grid_points(rng, k, d, hf, wf, grid)
        got = lift_splat(feats, prob, pts, grid).data
        want = lift_splat_oracle(feats, prob, pts, grid)
        assert np.abs(got - want).max() < 1e-12


def test_lift_splat_one_hot_depth(rng):
    grid = GridSpec(-4, 4, -4, 4, 6, 6)
    k, c, d, hf, wf = 1, 2, 3, 2, 2
    feats = rng.standard_normal((k, c, hf, wf))
    prob = np.zeros((k, d, hf, wf))
    prob[:, 1] = 1.0  # one-hot at bin 1
    pts = grid_points(rng, k, d, hf, wf, grid, spill=0.0)
    got = lift_splat(feats, prob, pts, grid).data
    only_bin1 = lift_splat_oracle(feats, prob, pts, grid)
    assert np.allclose(got, only_bin1)
    # moving the unused bins' points changes nothing
    pts2 = pts.copy()
    pts2[:, : hf * wf] += 100.0
    assert np.allclose(lift_splat(feats, prob, pts2, grid).data, got)


def test_lift_splat_uniform_depth_is_mean_of_slices(rng):
    grid = GridSpec(-4, 4, -4, 4, 6, 6)
    k, c, d, hf, wf = 1, 2, 4, 2, 2
    feats = rng.standard_normal((k, c, hf, wf))
    uniform = np.full((k, d, hf, wf), 1.0 / d)
    pts = grid_points(rng, k, d, hf, wf, grid, spill=0.0)
    got = lift_splat(feats, uniform, pts, grid).data
    total = np.zeros_like(got)
    for di in range(d):
        one = np.zeros((k, d, hf, wf))
        one[:, di] = 1.0
        total += lift_splat(feats, one, pts, grid).data
    assert np.allclose(got, total / d)


def test_lift_splat_linear_in_features(rng):
    grid = GridSpec(-4, 4, -4, 4, 5, 5)
    k, c, d, hf, wf = 2, 3, 3, 2, 2
    f1 = rng.standard_normal((k, c, hf, wf))
    f2 = rng.standard_normal((k, c, hf, wf))
    prob = rng.uniform(size=(k, d, hf, wf))
    pts = grid_points(rng, k, d, hf, wf, grid)
    a, b = 0.7, -1.3
    lhs = lift_splat(a * f1 + b * f2, prob, pts, grid).data
    rhs = a * lift_splat(f1, prob, pts, grid).data + b * lift_splat(f2, prob, pts, grid).data
    assert np.abs(lhs - rhs).max() < 1e-10


def test_lift_splat_gradients(rng):
    grid = GridSpec(-4, 4, -4, 4, 5, 5)
    k, c, d, hf, wf = 1, 2, 3, 2, 2
    feats = rng.standard_normal((k, c, hf, wf))
    prob = rng.uniform(0.1, 1.0, size=(k, d, hf, wf))
    pts = grid_points(rng, k, d, hf, wf, grid)
    err_f = ad.grad_check(lambda t: ad.sum_(ad.square(lift_splat(t, prob, pts, grid))), feats)
    err_d = ad.grad_check(lambda t: ad.sum_(ad.square(lift_splat(feats, t, pts, grid))), prob)
    assert err_f < 1e-5
    assert err_d < 1e-5


def test_lift_splat_shape_errors(rng):
    grid = GridSpec(-4, 4, -4, 4, 5, 5)
    with pytest.raises(ShapeError):
        lift_splat(np.zeros((1, 2, 2, 2)), np.zeros((2, 3, 2, 2)), np.zeros((1, 12, 3)), grid)


# -- network -----------------------------------------------------------------------


def test_forward_shapes_and_invariants(rng):
    rig, frustum, grid = tiny_setup()
    net = DetectionNet(student_spec(), rig, frustum, grid, seed=3)
    out = net.forward(rng.uniform(size=(6, 3, 16, 32)))
    assert out.features.shape == (6, 4, 4, 8)
    assert out.depth_logits.shape == (6, 4, 4, 8)
    assert out.depth_prob.shape == (6, 4, 4, 8)
    assert out.fine_depth.shape == (6, 4, 8)
    assert out.bev.shape == (4, 10, 10)
    assert out.heatmap.shape == (3, 10, 10)
    assert np.abs(out.depth_prob.data.sum(axis=1) - 1.0).max() < 1e-9
    assert out.fine_depth.data.min() > 0
    assert 0 < out.heatmap.data.min() and out.heatmap.data.max() < 1


def test_depth_distribution_sums_over_random_inits(rng):
    rig, frustum, grid = tiny_setup()
    imgs = rng.uniform(size=(6, 3, 16, 32))
    for seed in range(100):
        net = DetectionNet(student_spec(), rig, frustum, grid, seed=seed)
        with ad.no_grad():
            out = net.forward(imgs)
        assert np.abs(out.depth_prob.data.sum(axis=1) - 1.0).max() < 1e-9


def test_zero_weight_model_uniform_depth(rng):
    rig, frustum, grid = tiny_setup()
    net = DetectionNet(student_spec(), rig, frustum, grid, seed=0)
    net.zero_weights()
    out = net.forward(rng.uniform(size=(6, 3, 16, 32)))
    assert np.allclose(out.depth_prob.data, 0.25)


def test_forward_deterministic(rng):
    rig, frustum, grid = tiny_setup()
    imgs = rng.uniform(size=(6, 3, 16, 32))
    a = DetectionNet(student_spec(), rig, frustum, grid, seed=7).forward(imgs)
    b = DetectionNet(student_spec(), rig, frustum, grid, seed=7).forward(imgs)
    assert np.array_equal(a.heatmap.data, b.heatmap.data)
    assert np.array_equal(a.bev.data, b.bev.data)


def test_forward_batch_consistent_with_single(rng):
    rig, frustum, grid = tiny_setup()
    net = DetectionNet(student_spec(), rig, frustum, grid, seed=5)
    imgs = rng.uniform(size=(2, 6, 3, 16, 32))
    with ad.no_grad():
        batched = net.forward_batch(imgs)
        single0 = net.forward(imgs[0])
        single1 = net.forward(imgs[1])
    assert np.allclose(batched.bev.data[0], single0.bev.data, atol=1e-12)
    assert np.allclose(batched.bev.data[1], single1.bev.data, atol=1e-12)
    assert np.allclose(batched.heatmap.data[1], single1.heatmap.data, atol=1e-12)


def test_teacher_larger_than_student():
    rig, frustum, grid = tiny_setup()
    t = DetectionNet(teacher_spec(), rig, frustum, grid, seed=0)
    s = DetectionNet(student_spec(), rig, frustum, grid, seed=0)
    assert t.n_parameters() > s.n_parameters()
    check_teacher_student(t.spec, s.spec)
    with pytest.raises(ValueError, match="stage-wise"):
        check_teacher_student(ModelSpec("teacher", (2, 4, 6), 4, (4, 8), 4, (8,), 3), s.spec)


def test_forward_shape_mismatch(rng):
    rig, frustum, grid = tiny_setup()
    net = DetectionNet(student_spec(), rig, frustum, grid, seed=0)
    with pytest.raises(ShapeError):
        net.forward(rng.uniform(size=(6, 3, 16, 30)))


def test_state_roundtrip_through_checkpoint(tmp_path, rng):
    rig, frustum, grid = tiny_setup()
    net = DetectionNet(student_spec(), rig, frustum, grid, seed=11)
    path = tmp_path / "net.ckpt"
    ad.save_checkpoint(path, net.state_dict())
    net2 = DetectionNet(student_spec(), rig, frustum, grid, seed=99)
    net2.load_state(ad.load_checkpoint(path))
    imgs = rng.uniform(size=(6, 3, 16, 32))
    with ad.no_grad():
        a = net.forward(imgs)
        b = net2.forward(imgs)
    assert np.array_equal(a.heatmap.data, b.heatmap.data)


# -- decoding ----------------------------------------------------------------------


def test_decode_empty_heatmap():
    grid = GridSpec(-4, 4, -4, 4, 8, 8)
    assert detect_decode(np.zeros((2, 8, 8)), grid, threshold=0.1) == []


def test_decode_single_peak_at_cell_center():
    grid = GridSpec(-4, 4, -4, 4, 8, 8)
    hm = np.zeros((1, 8, 8))
    hm[0, 2, 5] = 1.0
    dets = detect_decode(hm, grid, threshold=0.3)
    assert len(dets) == 1
    det = dets[0]
    assert det.class_id == 0 and det.score == 1.0
    assert np.isclose(det.x, grid.x_min + 5.5 * grid.dx)
    assert np.isclose(det.y, grid.y_min + 2.5 * grid.dy)


def test_decode_matches_exhaustive_oracle(rng):
    grid = GridSpec(-4, 4, -4, 4, 10, 10)
    for _ in range(20):
        hm = rng.uniform(size=(3, 10, 10))
        # plant a plateau
        hm[1, 4, 4] = hm[1, 4, 5] = 0.95
        dets = detect_decode(hm, grid, threshold=0.5, max_dets=1000)
        want = {(c, i, j) for c, i, j, _ in local_max_oracle(hm, 0.5)}
        got = set()
        for det in dets:
            j = int(np.floor((det.x - grid.x_min) / grid.dx))
            i = int(np.floor((det.y - grid.y_min) / grid.dy))
            got.add((det.class_id, i, j))
        assert got == want


def test_decode_threshold_and_cap(rng):
    grid = GridSpec(-4, 4, -4, 4, 8, 8)
    hm = rng.uniform(0.4, 0.9, size=(2, 8, 8))
    dets = detect_decode(hm, grid, threshold=0.0, max_dets=3)
    assert len(dets) == 3
    assert dets[0].score >= dets[1].score >= dets[2].score
