import numpy as np
import pytest

from lgkd import autodiff as ad
from lgkd.autodiff import Parameter, ShapeError, Tensor, TrainingError


def test_softmax_uniform_on_equal_logits():
    for d in (2, 5, 16):
        out = ad.softmax(Tensor(np.zeros(d)), axis=-1)
        assert np.allclose(out.data, 1.0 / d)


def test_conv2d_identity_kernel():
    x = np.arange(24, dtype=float).reshape(1, 2, 3, 4)
    w = np.zeros((2, 2, 1, 1))
    w[0, 0, 0, 0] = 1.0
    w[1, 1, 0, 0] = 1.0
    y = ad.conv2d(Tensor(x), Tensor(w))
    assert np.array_equal(y.data, x)


def test_scatter_add_basic():
    out = ad.scatter_add(Tensor(np.array([1.0, 2.0, 3.0])), np.array([0, 0, 1]), size=2)
    assert np.array_equal(out.data, [3.0, 3.0])


def test_scatter_add_backward_is_gather(rng):
    v = Tensor(rng.standard_normal((6, 3)), requires_grad=True)
    idx = np.array([0, 2, 2, 1, 0, 3])
    out = ad.scatter_add(v, idx, size=4)
    seed = rng.standard_normal(out.shape)
    ad.sum_(out * seed).backward()
    assert np.allclose(v.grad, seed[idx])


def test_scatter_add_rejects_bad_indices():
    with pytest.raises(ShapeError):
        ad.scatter_add(Tensor(np.ones(3)), np.array([0, 1, 5]), size=2)


def test_shape_error_names_shapes():
    with pytest.raises(ShapeError, match=r"matmul"):
        ad.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((4, 2))))


def test_grad_check_quadratic(rng):
    err = ad.grad_check(lambda t: ad.sum_(ad.square(t)), rng.standard_normal((3, 4)))
    assert err < 1e-7


def test_grad_check_rejects_nonscalar(rng):
    with pytest.raises(ShapeError):
        ad.grad_check(lambda t: ad.square(t), rng.standard_normal(3))


def test_grad_check_rejects_bad_eps(rng):
    with pytest.raises(ValueError):
        ad.grad_check(lambda t: ad.sum_(t), rng.standard_normal(3), eps=1e-2)


OPS = [
    ("add_broadcast", lambda t, c: ad.sum_(ad.square(ad.add(t, c[:1])))),
    ("mul_broadcast", lambda t, c: ad.sum_(ad.square(ad.mul(t, c[:, :1])))),
    ("div", lambda t, c: ad.sum_(ad.div(t, 2.0 + ad.square(c)))),
    ("matmul", lambda t, c: ad.sum_(ad.square(ad.matmul(t, c.T)))),
    ("relu", lambda t, c: ad.sum_(ad.relu(t * 3.0))),
    ("sigmoid", lambda t, c: ad.sum_(ad.square(ad.sigmoid(t)))),
    ("softplus", lambda t, c: ad.sum_(ad.softplus(t) * c)),
    ("exp", lambda t, c: ad.sum_(ad.exp(t * 0.3))),
    ("log", lambda t, c: ad.sum_(ad.log(ad.softplus(t) + 0.5))),
    ("softmax", lambda t, c: ad.sum_(ad.square(ad.softmax(t, axis=-1) - np.abs(c)))),
    ("log_softmax", lambda t, c: ad.sum_(ad.log_softmax(t, axis=-1) * c)),
    ("mean_axis", lambda t, c: ad.sum_(ad.square(ad.mean(t, axis=0)))),
    ("sum_keepdims", lambda t, c: ad.sum_(ad.square(ad.sum_(t, axis=1, keepdims=True) * c[:, :1]))),
    ("reshape_transpose", lambda t, c: ad.sum_(ad.square(ad.transpose(ad.reshape(t, (4, 6)), (1, 0))))),
    ("broadcast_to", lambda t, c: ad.sum_(ad.square(ad.broadcast_to(ad.sum_(t, axis=0, keepdims=True), t.shape)))),
    ("concat", lambda t, c: ad.sum_(ad.square(ad.concat([t, t * 2.0], axis=1)))),
    ("slice", lambda t, c: ad.sum_(ad.square(t[1:3, ::2]))),
    ("take", lambda t, c: ad.sum_(ad.square(ad.take(t, np.array([0, 2, 2, 1]), axis=0)))),
    ("clamp", lambda t, c: ad.sum_(ad.square(ad.clamp(t, -0.5, 0.5)))),
]


@pytest.mark.parametrize("name,fn", OPS, ids=[o[0] for o in OPS])
def test_op_gradients(name, fn, rng):
    # > 10 random instances per op across the whole suite run
    for trial in range(3):
        x = rng.standard_normal((4, 6))
        c = rng.standard_normal((4, 6))
        err = ad.grad_check(lambda t: fn(t, c), x)
        assert err < 1e-5, f"{name} trial {trial}: {err}"


@pytest.mark.parametrize("stride,padding,shape,kshape", [
    (1, 0, (2, 3, 6, 7), (4, 3, 3, 3)),
    (2, 1, (1, 2, 5, 6), (3, 2, 3, 3)),
    (2, 0, (1, 1, 6, 6), (2, 1, 3, 3)),   # rightmost column unused by stride
    ((2, 1), (0, 1), (1, 2, 7, 5), (2, 2, 3, 3)),
])
def test_conv2d_gradients(stride, padding, shape, kshape, rng):
    w0 = rng.standard_normal(kshape) * 0.3
    b0 = rng.standard_normal(kshape[0]) * 0.1
    x0 = rng.standard_normal(shape)

    def loss_x(t):
        return ad.sum_(ad.square(ad.conv2d(t, Tensor(w0), Tensor(b0), stride, padding)))

    def loss_w(t):
        return ad.sum_(ad.square(ad.conv2d(Tensor(x0), t, Tensor(b0), stride, padding)))

    def loss_b(t):
        return ad.sum_(ad.square(ad.conv2d(Tensor(x0), Tensor(w0), t, stride, padding)))

    assert ad.grad_check(loss_x, x0) < 1e-5
    assert ad.grad_check(loss_w, w0) < 1e-5
    assert ad.grad_check(loss_b, b0) < 1e-5


def test_forward_deterministic(rng):
    x = rng.standard_normal((3, 5))
    w = rng.standard_normal((5, 4))
    a = ad.matmul(ad.softmax(Tensor(x), axis=1), Tensor(w)).data
    b = ad.matmul(ad.softmax(Tensor(x), axis=1), Tensor(w)).data
    assert np.array_equal(a, b)


def test_detach_blocks_gradient(rng):
    x = Tensor(rng.standard_normal(4), requires_grad=True)
    y = ad.sum_(ad.square(x.detach() * 2.0 + x))
    y.backward()
    expected = 2.0 * (x.data * 3.0)  # d/dx of (2*const + x)^2 with const = x.data
    assert np.allclose(x.grad, expected)


def test_axis_limit_enforced():
    with pytest.raises(ShapeError):
        Tensor(np.zeros((1, 1, 1, 1, 1, 1)))


def test_no_grad_blocks_graph(rng):
    with ad.no_grad():
        x = Tensor(rng.standard_normal(3), requires_grad=True)
        y = ad.sum_(ad.square(x))
    assert not y.requires_grad


# -- optimizers -----------------------------------------------------------------


def test_sgd_zero_gradient_no_decay():
    p = Parameter("p", np.array([1.0, -2.0]))
    p.grad = np.zeros(2)
    opt = ad.SGD([p], lr=0.5)
    opt.step()
    assert np.array_equal(p.data, [1.0, -2.0])


def test_sgd_scalar_step():
    p = Parameter("p", np.array([1.0]))
    p.grad = np.array([1.0])
    ad.SGD([p], lr=0.1).step()
    assert np.allclose(p.data, [0.9])


def test_sgd_step_functional():
    out = ad.sgd_step([np.array([2.0])], [np.array([1.0])], lr=0.25, weight_decay=0.0)
    assert np.allclose(out[0], [1.75])
    with pytest.raises(ValueError):
        ad.sgd_step([np.array([1.0])], [np.array([1.0])], lr=0.0)


def test_sgd_converges_to_quadratic_optimum():
    # f(p) = 0.5 * sum((p - target)^2); optimum at target
    target = np.array([0.3, -1.2, 2.5])
    p = Parameter("p", np.zeros(3))
    opt = ad.SGD([p], lr=0.5)
    for _ in range(100):
        opt.zero_grad()
        loss = ad.sum_(ad.square(p - Tensor(target))) * 0.5
        loss.backward()
        opt.step()
    assert np.abs(p.data - target).max() < 1e-6


def test_nan_gradient_aborts():
    p = Parameter("p", np.array([1.0]))
    p.grad = np.array([np.nan])
    with pytest.raises(TrainingError, match="'p'"):
        ad.SGD([p], lr=0.1).step()
    with pytest.raises(TrainingError, match="'p'"):
        ad.AdamW([p], lr=0.1).step()


def test_adamw_decoupled_decay_moves_weights():
    p = Parameter("p", np.array([1.0]))
    opt = ad.AdamW([p], lr=0.1, weight_decay=0.1)
    p.grad = np.array([0.0])
    opt.step()
    # zero gradient: only the decoupled decay term acts
    assert np.allclose(p.data, [1.0 - 0.1 * 0.1 * 1.0])


# -- checkpoints ----------------------------------------------------------------


def test_checkpoint_roundtrip(tmp_path, rng):
    params = {"a.w": rng.standard_normal((3, 4)), "b": np.array(2.5)}
    path = tmp_path / "model.ckpt"
    ad.save_checkpoint(path, params)
    assert path.read_bytes()[:4] == b"LGKD"
    loaded = ad.load_checkpoint(path)
    assert list(loaded) == ["a.w", "b"]
    for k in params:
        assert np.array_equal(loaded[k], params[k])


def test_checkpoint_shape_validation(tmp_path):
    path = tmp_path / "m.ckpt"
    ad.save_checkpoint(path, {"p": np.ones((2, 2))})
    good = Parameter("p", np.zeros((2, 2)))
    ad.load_into(path, [good])
    assert np.array_equal(good.data, np.ones((2, 2)))
    bad = Parameter("p", np.zeros(3))
    with pytest.raises(ad.CheckpointError, match="shape"):
        ad.load_into(path, [bad])
    with pytest.raises(ad.CheckpointError, match="missing"):
        ad.load_into(path, [Parameter("q", np.zeros(1))])


def test_checkpoint_rejects_garbage(tmp_path):
    path = tmp_path / "junk.ckpt"
    path.write_bytes(b"NOPE" + b"\x00" * 16)
    with pytest.raises(ad.CheckpointError, match="magic"):
        ad.load_checkpoint(path)
