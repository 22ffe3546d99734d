import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from imicnn import nn, train
from conftest import central_diff, rel_err

RNG = np.random.default_rng


# --- convolution --------------------------------------------------------------

def direct_conv(x, w, b):
    """Zero-padded 'same' correlation by explicit summation."""
    L, C = x.shape
    K, _, F = w.shape
    left = (K - 1) // 2
    out = np.zeros((L, F))
    for t in range(L):
        for f in range(F):
            acc = b[f]
            for k in range(K):
                src = t + k - left
                if 0 <= src < L:
                    acc += sum(w[k, c, f] * x[src, c] for c in range(C))
            out[t, f] = acc
    return out


def test_conv_identity_kernel():
    x = np.array([[1.0], [2], [3], [4]])
    out, _ = nn.conv1d_forward(x, 3, np.array([0, 1.0, 0]).reshape(3, 1, 1), np.zeros(1))
    np.testing.assert_array_equal(out[:, 0], [1, 2, 3, 4])


def test_conv_box_kernel():
    x = np.array([[1.0], [2], [3], [4]])
    w = np.ones((3, 1, 1))
    out, _ = nn.conv1d_forward(x, 3, w, np.zeros(1))
    np.testing.assert_array_equal(out[:, 0], direct_conv(x, w, np.zeros(1))[:, 0])
    np.testing.assert_array_equal(out[:, 0], [3, 6, 9, 7])


def test_conv_bias_only():
    x = RNG(0).normal(size=(10, 2))
    out, _ = nn.conv1d_forward(x, 5, np.zeros((5, 2, 3)), np.array([0.5, -1, 2]))
    np.testing.assert_array_equal(out, np.tile([0.5, -1, 2], (10, 1)))


@pytest.mark.parametrize("K", nn.WINDOWS)
def test_conv_matches_direct_sum_and_keeps_length(K):
    rng = RNG(K)
    x = rng.normal(size=(40, 2))
    w = rng.normal(size=(K, 2, 4))
    b = rng.normal(size=4)
    out, _ = nn.conv1d_forward(x, K, w, b)
    assert out.shape == (40, 4)
    np.testing.assert_allclose(out, direct_conv(x, w, b), atol=1e-12)


def test_conv_even_window_extra_pad_on_right():
    # window 4: one zero on the left, two on the right
    x = np.arange(1.0, 6.0)[:, None]
    w = np.array([1.0, 0, 0, 0]).reshape(4, 1, 1)
    out, _ = nn.conv1d_forward(x, 4, w, np.zeros(1))
    np.testing.assert_array_equal(out[:, 0], [0, 1, 2, 3, 4])


def test_conv_shape_mismatch():
    with pytest.raises(nn.ShapeMismatch):
        nn.conv1d_forward(np.ones((5, 2)), 3, np.ones((3, 1, 4)), np.zeros(4))


def test_conv_backward_zero_and_identity():
    x = RNG(1).normal(size=(2, 12, 1))
    w = np.array([0, 1.0, 0]).reshape(3, 1, 1)
    _, cache = nn.conv1d_forward(x, 3, w, np.zeros(1))
    dx, dw, db = nn.conv1d_backward(np.zeros((2, 12, 1)), cache)
    assert not dx.any() and not dw.any() and not db.any()
    g = RNG(2).normal(size=(2, 12, 1))
    dx, _, db = nn.conv1d_backward(g, cache)
    np.testing.assert_array_equal(dx, g)
    np.testing.assert_allclose(db, g.sum(axis=(0, 1)))


@pytest.mark.parametrize("K, C, F", [(3, 1, 1), (4, 2, 3), (7, 1, 4), (16, 1, 4)])
def test_conv_gradients(K, C, F):
    rng = RNG(10 + K)
    x = rng.normal(size=(2, 20, C))
    w = rng.normal(size=(K, C, F))
    b = rng.normal(size=F)
    R = rng.normal(size=(2, 20, F))
    f = lambda: float(np.sum(nn.conv1d_forward(x, K, w, b)[0] * R))
    _, cache = nn.conv1d_forward(x, K, w, b)
    dx, dw, db = nn.conv1d_backward(R, cache)
    assert rel_err(dx, central_diff(f, x)) < 1e-5
    assert rel_err(dw, central_diff(f, w)) < 1e-5
    assert rel_err(db, central_diff(f, b)) < 1e-5


# --- batch norm -----------------------------------------------------------------

def test_bn_infer_neutral_is_identity():
    eps = 1e-3
    st_ = nn.BatchNormState(np.ones(3), np.zeros(3), np.zeros(3), np.full(3, 1 - eps), 0.99, eps)
    x = RNG(3).normal(size=(4, 7, 3))
    out, _ = nn.batchnorm_forward(x, st_, "infer")
    np.testing.assert_allclose(out, x, atol=1e-15)


def test_bn_train_normalizes():
    x = RNG(4).normal(3.0, 5.0, size=(6, 20, 4))
    out, _ = nn.batchnorm_forward(x, nn.BatchNormState.fresh(4, epsilon=0.0), "train")
    flat = out.reshape(-1, 4)
    np.testing.assert_allclose(flat.mean(axis=0), 0, atol=1e-6)
    np.testing.assert_allclose(flat.var(axis=0), 1, atol=1e-6)


def test_bn_train_gamma_beta():
    x = RNG(5).normal(-2.0, 3.0, size=(6, 20, 4))
    s = nn.BatchNormState(np.full(4, 2.0), np.full(4, 3.0), np.zeros(4), np.ones(4), 0.99, 1e-3)
    out, _ = nn.batchnorm_forward(x, s, "train")
    flat = out.reshape(-1, 4)
    # epsilon shrinks the std slightly: 2 * sqrt(var / (var + eps))
    var = x.reshape(-1, 4).var(axis=0)
    np.testing.assert_allclose(flat.mean(axis=0), 3, atol=1e-5)
    np.testing.assert_allclose(flat.std(axis=0), 2 * np.sqrt(var / (var + 1e-3)), atol=1e-5)
    s0 = nn.BatchNormState(np.full(4, 2.0), np.full(4, 3.0), np.zeros(4), np.ones(4), 0.99, 0.0)
    out0, _ = nn.batchnorm_forward(x, s0, "train")
    np.testing.assert_allclose(out0.reshape(-1, 4).std(axis=0), 2, atol=1e-5)


def test_bn_running_stats_update():
    x = RNG(6).normal(1.0, 2.0, size=(3, 10, 2))
    s = nn.BatchNormState.fresh(2)
    nn.batchnorm_forward(x, s, "train")
    flat = x.reshape(-1, 2)
    np.testing.assert_allclose(s.running_mean, 0.01 * flat.mean(axis=0))
    np.testing.assert_allclose(s.running_var, 0.99 + 0.01 * flat.var(axis=0))


def test_bn_degenerate():
    with pytest.raises(nn.DegenerateBatch):
        nn.batchnorm_forward(np.ones((1, 1, 2)), nn.BatchNormState.fresh(2), "train")


def test_bn_backward_zero():
    x = RNG(7).normal(size=(2, 4, 1))
    _, cache = nn.batchnorm_forward(x, nn.BatchNormState.fresh(1), "train")
    assert not any(g.any() for g in nn.batchnorm_backward(np.zeros_like(x), cache))


@pytest.mark.parametrize("shape", [(2, 4, 1), (3, 9, 4)])
def test_bn_gradients(shape):
    rng = RNG(shape[1])
    x = rng.normal(size=shape)
    C = shape[-1]
    s = nn.BatchNormState(rng.normal(size=C), rng.normal(size=C), np.zeros(C), np.ones(C))
    R = rng.normal(size=shape)

    def f():
        tmp = nn.BatchNormState(s.gamma, s.beta, np.zeros(C), np.ones(C))
        return float(np.sum(nn.batchnorm_forward(x, tmp, "train")[0] * R))

    _, cache = nn.batchnorm_forward(x, nn.BatchNormState(s.gamma, s.beta, np.zeros(C),
                                                         np.ones(C)), "train")
    dx, dg, db = nn.batchnorm_backward(R, cache)
    assert rel_err(dx, central_diff(f, x)) < 1e-5
    assert rel_err(dg, central_diff(f, s.gamma)) < 1e-5
    assert rel_err(db, central_diff(f, s.beta)) < 1e-5
    np.testing.assert_allclose(db, R.reshape(-1, C).sum(axis=0))


def test_bn_constant_upstream_grad_sums_to_zero():
    x = RNG(8).normal(size=(4, 10, 3))
    _, cache = nn.batchnorm_forward(x, nn.BatchNormState.fresh(3), "train")
    dx, _, _ = nn.batchnorm_backward(np.broadcast_to([1.0, -2.0, 0.5], x.shape), cache)
    np.testing.assert_allclose(dx.reshape(-1, 3).sum(axis=0), 0, atol=1e-10)


# --- relu, pooling, gap -------------------------------------------------------

def test_relu():
    out, mask = nn.relu_forward(np.array([-1.0, 0.0, 2.0]))
    np.testing.assert_array_equal(out, [0, 0, 2])
    assert not nn.relu_forward(-np.ones(5))[0].any()
    np.testing.assert_array_equal(nn.relu_backward(np.array([5.0, 7.0]),
                                                   nn.relu_forward(np.array([-1.0, 2.0]))[1]),
                                  [0, 7])
    assert nn.relu_backward(np.array([3.0]), nn.relu_forward(np.array([0.0]))[1])[0] == 0


def test_relu_gradient():
    x = RNG(9).normal(size=(3, 8, 2))
    R = RNG(10).normal(size=x.shape)
    f = lambda: float(np.sum(nn.relu_forward(x)[0] * R))
    _, mask = nn.relu_forward(x)
    assert rel_err(nn.relu_backward(R, mask), central_diff(f, x)) < 1e-5


def test_maxpool_forward():
    out, _ = nn.maxpool_forward(np.array([1.0, 3, 2, 5])[:, None])
    np.testing.assert_array_equal(out[:, 0], [3, 5])
    out, _ = nn.maxpool_forward(np.arange(5.0)[:, None])
    assert out.shape == (2, 1)


def test_maxpool_tie_goes_to_first():
    _, cache = nn.maxpool_forward(np.array([[2.0], [2.0]]))
    np.testing.assert_array_equal(nn.maxpool_backward(np.array([[1.0]]), cache)[:, 0], [1, 0])


def test_maxpool_gradient():
    x = RNG(11).normal(size=(2, 9, 3))
    R = RNG(12).normal(size=(2, 4, 3))
    f = lambda: float(np.sum(nn.maxpool_forward(x)[0] * R))
    _, cache = nn.maxpool_forward(x)
    dx = nn.maxpool_backward(R, cache)
    assert dx.shape == x.shape and not dx[:, 8].any()
    assert rel_err(dx, central_diff(f, x)) < 1e-5


def test_gap():
    out, _ = nn.gap_forward(np.full((98, 1), 3.5))
    assert out[0] == 3.5
    assert nn.gap_forward(np.array([[0.0], [2.0]]))[0][0] == 1.0
    np.testing.assert_array_equal(nn.gap_backward(np.array([1.0]), (4, 1))[:, 0], [0.25] * 4)


def test_gap_gradient():
    x = RNG(13).normal(size=(2, 6, 3))
    R = RNG(14).normal(size=(2, 3))
    f = lambda: float(np.sum(nn.gap_forward(x)[0] * R))
    assert rel_err(nn.gap_backward(R, x.shape), central_diff(f, x)) < 1e-5


# --- dense + softmax ------------------------------------------------------------

def test_softmax_values():
    np.testing.assert_allclose(nn.softmax(np.array([0.0, 0.0])), [0.5, 0.5])
    p = nn.softmax(np.array([1000.0, 0.0]))
    assert np.all(np.isfinite(p)) and p[0] == 1.0 and p[1] < 1e-300
    np.testing.assert_allclose(nn.softmax(np.array([np.log(3.0), 0.0])), [0.75, 0.25],
                               atol=1e-15)


@settings(max_examples=100)
@given(st.lists(st.floats(-700, 700), min_size=2, max_size=2))
def test_softmax_sums_to_one(z):
    p = nn.softmax(np.array(z))
    assert np.all(p >= 0) and abs(p.sum() - 1) <= 1e-12


def test_dense_softmax_crossentropy_gradients():
    rng = RNG(15)
    f_in = rng.normal(size=(5, 84))
    w = rng.normal(scale=0.2, size=(84, 2))
    b = rng.normal(size=2)
    y = np.array([0, 1, 1, 0, 1])
    lam = 0.001

    def obj():
        p, _ = nn.dense_softmax_forward(f_in, w, b)
        return train.loss(p, y, w, lam)

    p, cache = nn.dense_softmax_forward(f_in, w, b)
    df, dw, db = nn.dense_softmax_backward(train.loss_grad(p, y), cache)
    dw = dw + 2 * lam * w
    # smooth head: fourth-order differences keep round-off well under the tiny entries
    fd = lambda t: central_diff(obj, t, h=1e-3, points=5)
    assert rel_err(df, fd(f_in)) < 1e-5
    assert rel_err(dw, fd(w)) < 1e-5
    assert rel_err(db, fd(b)) < 1e-5


# --- model ----------------------------------------------------------------------

def test_parameter_count_and_shapes():
    p = nn.init_params(0)
    expected = 3 * (sum(4 * n for n in nn.WINDOWS) + 28 + 56) + 84 * 2 + 2
    assert p.n_trainable() == expected == 2054
    assert p["dense/kernel"].shape == (84, 2)
    assert p["ii/conv64/kernel"].shape == (64, 1, 4)


def test_init_matches_glorot_bounds():
    p = nn.init_params(3)
    for k in nn.WINDOWS:
        lim = np.sqrt(6 / (k + 4 * k))
        w = p[f"avf/conv{k}/kernel"]
        assert np.all(np.abs(w) <= lim) and np.abs(w).max() > 0.5 * lim
    assert not p["ii/conv3/bias"].any()
    assert np.all(p["iii/bn9/gamma"] == 1)


def test_forward_shapes_and_probabilities():
    x = RNG(16).normal(size=(5, 3, 196))
    p = nn.init_params(1)
    probs, feats, cache = nn.model_forward(x, p, "infer")
    assert probs.shape == (5, 2) and feats.shape == (5, 84)
    np.testing.assert_allclose(probs.sum(axis=1), 1, atol=1e-12)
    lead, k, c_conv, *_ = cache[0][0]
    assert c_conv[0][1] == 196            # conv input length
    assert cache[1] == (5, 98, 84)        # concatenated pooled maps


def test_forward_constant_path():
    p = nn.init_params(2)
    for name in p.trainable:
        if "/conv" in name:
            p.tensors[name][...] = 0
    eps = p.arch.bn_epsilon
    for name in p.tensors:
        if name.endswith("running_var"):
            p.tensors[name][...] = 1 - eps
    p.tensors["dense/bias"][...] = [0.3, -0.2]
    probs, feats, _ = nn.model_forward(np.zeros((2, 3, 196)), p, "infer")
    assert not feats.any()
    np.testing.assert_allclose(probs, np.tile(nn.softmax(np.array([0.3, -0.2])), (2, 1)))


def test_infer_is_pure_and_batch_invariant():
    rng = RNG(17)
    x = rng.normal(size=(6, 3, 196))
    p = nn.init_params(4)
    for name in p.tensors:
        if "running" in name:
            p.tensors[name][...] = rng.uniform(0.5, 1.5, size=p.tensors[name].shape)
    a, fa, _ = nn.model_forward(x, p, "infer")
    b, fb, _ = nn.model_forward(x, p, "infer")
    assert a.tobytes() == b.tobytes() and fa.tobytes() == fb.tobytes()
    c, fc, _ = nn.model_forward(x[2:4], p, "infer")
    np.testing.assert_allclose(c, a[2:4], rtol=1e-13, atol=1e-15)
    np.testing.assert_allclose(fc, fa[2:4], rtol=1e-13, atol=1e-15)


def test_train_mode_updates_running_stats_only():
    p = nn.init_params(5)
    before = p.copy()
    nn.model_forward(RNG(18).normal(size=(2, 3, 32)), p, "train")
    for name in p.tensors:
        changed = not np.array_equal(p[name], before[name])
        assert changed == ("running" in name), name


def test_backward_zero_upstream():
    p = nn.init_params(6)
    _, _, cache = nn.model_forward(RNG(19).normal(size=(2, 3, 32)), p, "train")
    grads = nn.model_backward(np.zeros((2, 2)), cache)
    assert set(grads) == set(p.trainable)
    assert all(grads[n].shape == p[n].shape and not grads[n].any() for n in p.trainable)


def reduced_model_check(seed=20):
    """Max relative error over every trainable scalar of the reduced (2 x 3 x 32) model."""
    rng = RNG(seed)
    x = rng.normal(size=(2, 3, 32))
    y = np.array([0, 1])
    p = nn.init_params(seed)
    for name in p.trainable:
        if "bn" in name or "bias" in name:
            p.tensors[name] += rng.normal(scale=0.1, size=p[name].shape)
    lam = 0.001

    def obj():
        probs, _, _ = nn.model_forward(x, p, "train")
        return train.loss(probs, y, p["dense/kernel"], lam)

    probs, _, cache = nn.model_forward(x, p, "train")
    grads = nn.model_backward(train.loss_grad(probs, y), cache)
    grads["dense/kernel"] = grads["dense/kernel"] + 2 * lam * p["dense/kernel"]
    worst = 0.0
    for name in p.trainable:
        fd = central_diff(obj, p.tensors[name])
        if "conv" in name and name.endswith("bias"):
            # BN cancels the conv bias: both sides must sit at round-off level
            assert np.max(np.abs(grads[name])) < 1e-12 and np.max(np.abs(fd)) < 1e-9
            continue
        worst = max(worst, rel_err(grads[name], fd))
    return worst


def test_full_model_gradient():
    assert reduced_model_check() < 1e-4


def test_input_gradient():
    rng = RNG(21)
    x = rng.normal(size=(2, 3, 24))
    p = nn.init_params(21)
    R = rng.normal(size=(2, 2))
    f = lambda: float(np.sum(nn.model_forward(x, p, "train")[0] * R))
    _, _, cache = nn.model_forward(x, p, "train")
    g = nn.model_backward(R, cache, need_input_grad=True)["input"]
    assert rel_err(g, central_diff(f, x)) < 1e-4


def test_checkpoint_roundtrip(tmp_path):
    p = nn.init_params(7)
    p.tensors["ii/bn3/running_mean"][...] = [1, 2, 3, 4]
    path = nn.save_checkpoint(tmp_path / "m.json", p, seed=7)
    blob = (tmp_path / "m.f32").read_bytes()
    assert len(blob) == 4 * sum(a.size for a in p.tensors.values())
    q, header = nn.load_checkpoint(path)
    assert header["trainable_count"] == 2054 and header["seed"] == 7
    assert list(q.tensors) == list(p.tensors)
    for name in p.tensors:
        np.testing.assert_array_equal(q[name], p[name].astype(np.float32))
    # the blob starts with lead II's window-3 kernel
    np.testing.assert_array_equal(np.frombuffer(blob[:12 * 4], "<f4"),
                                  p["ii/conv3/kernel"].ravel().astype(np.float32))
