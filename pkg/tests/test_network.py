import numpy as np
import pytest

from deepdot.errors import ContractViolation, InvalidArgument
from deepdot.network import (
    ConvLayer,
    NetworkSpec,
    adam_step,
    backward,
    conv3d_backward,
    conv3d_forward,
    count_params,
    forward,
    network_forward,
    standard_spec,
    train,
    xavier_init,
)


def toy_spec(**kw):
    return standard_spec(6, (3, 3, 2), channels=2, fc_channels=2, **kw)


def perturbed_params(spec, seed):
    p = xavier_init(spec, seed)
    rng = np.random.default_rng(seed + 100)
    for t in p.tensors():
        t += rng.normal(0, 0.3, t.shape)
    return p


def naive_conv(x, K):
    B, X, Y, Z, cin = x.shape
    out = np.zeros((B, X, Y, Z, K.shape[4]))
    for b in range(B):
        for i in range(X):
            for j in range(Y):
                for k in range(Z):
                    for a in range(3):
                        for bb in range(3):
                            for c in range(3):
                                ii, jj, kk = i + a - 1, j + bb - 1, k + c - 1
                                if 0 <= ii < X and 0 <= jj < Y and 0 <= kk < Z:
                                    out[b, i, j, k] += x[b, ii, jj, kk] @ K[a, bb, c]
    return out


def test_parameter_counts():
    assert count_params(standard_spec(466, (48, 70, 16))) == 25_219_968
    spec = standard_spec(466, (48, 70, 16))
    assert (spec.input_length + 1) * spec.fc_outputs == 25_105_920
    assert ConvLayer(64, 64).n_params == 110_592


def test_spec_validation():
    with pytest.raises(InvalidArgument):
        NetworkSpec(4, (2, 2, 2, 1), (ConvLayer(1, 2, "tanh"),))
    with pytest.raises(InvalidArgument):
        NetworkSpec(4, (2, 2, 2, 1), (ConvLayer(2, 1, "relu"),))
    with pytest.raises(InvalidArgument):
        NetworkSpec(4, (2, 2, 2, 1), (ConvLayer(1, 3, "relu"), ConvLayer(3, 1, "relu")))
    with pytest.raises(InvalidArgument):
        ConvLayer(1, 1, "sigmoid")


def test_spec_dict_roundtrip():
    spec = toy_spec(denoising_layers=2)
    assert NetworkSpec.from_dict(spec.to_dict()) == spec


def test_fc_scalar_toy():
    spec = NetworkSpec(1, (1, 1, 1, 1), (ConvLayer(1, 1, "relu"),), dropout_p=0.0)
    p = xavier_init(spec, 0)
    p.fc_weights[:] = 2.0
    p.fc_bias[:] = 0.5
    p.filters[0][:] = 0.0
    p.filters[0][1, 1, 1] = 1.0
    out = network_forward(spec, p, np.array([1.0]))
    assert out[0, 0, 0] == pytest.approx(np.tanh(2.5))
    assert np.tanh(2.5) == pytest.approx(0.98661, abs=1e-5)


def test_zero_fc_gives_zero():
    spec = toy_spec()
    p = xavier_init(spec, 0)
    p.fc_weights[:] = 0
    out = network_forward(spec, p, np.ones(6))
    assert not np.any(out)


def test_fc_shape_mismatch():
    spec = toy_spec()
    with pytest.raises(InvalidArgument):
        network_forward(spec, xavier_init(spec, 0), np.ones(5))


def test_conv_delta_kernel_identity():
    x = np.random.default_rng(0).normal(size=(2, 4, 3, 5, 1))
    K = np.zeros((3, 3, 3, 1, 1))
    K[1, 1, 1] = 1
    np.testing.assert_array_equal(conv3d_forward(x, K), x)


def test_conv_against_naive():
    rng = np.random.default_rng(1)
    x = rng.normal(size=(1, 5, 5, 5, 2))
    K = rng.normal(size=(3, 3, 3, 2, 3))
    np.testing.assert_allclose(conv3d_forward(x, K), naive_conv(x, K), atol=1e-12)


def test_conv_channel_mismatch():
    with pytest.raises(InvalidArgument):
        conv3d_forward(np.zeros((1, 2, 2, 2, 3)), np.zeros((3, 3, 3, 2, 1)))


def test_conv_backward_is_adjoint():
    rng = np.random.default_rng(2)
    x = rng.normal(size=(2, 4, 3, 3, 2))
    K = rng.normal(size=(3, 3, 3, 2, 3))
    dy = rng.normal(size=(2, 4, 3, 3, 3))
    dx, dK = conv3d_backward(x, K, dy)
    xp = rng.normal(size=x.shape)
    assert np.sum(conv3d_forward(xp, K) * dy) == pytest.approx(np.sum(xp * dx), rel=1e-12)
    Kp = rng.normal(size=K.shape)
    assert np.sum(conv3d_forward(x, Kp) * dy) == pytest.approx(np.sum(Kp * dK), rel=1e-12)


def test_infer_deterministic_and_nonnegative():
    spec = toy_spec()
    p = perturbed_params(spec, 3)
    g = np.random.default_rng(0).normal(size=(4, 6))
    a = network_forward(spec, p, g, "infer")
    b = network_forward(spec, p, g, "infer")
    np.testing.assert_array_equal(a, b)
    assert a.min() >= 0
    assert network_forward(spec, p, g, "train", 1).min() >= 0


def test_finite_difference_gradients():
    spec = toy_spec()
    p = perturbed_params(spec, 1)
    g = np.random.default_rng(2).normal(size=(2, 6))
    lab = np.random.default_rng(3).random((2, 18))

    def loss():
        out, _ = forward(spec, p, g, "train", 7)
        return np.mean((out.reshape(2, -1) - lab) ** 2)

    _, cache = forward(spec, p, g, "train", 7)
    _, grads = backward(spec, p, cache, lab)
    rng = np.random.default_rng(0)
    worst = 0.0
    tensors = p.tensors()
    for k in range(250):
        ti = k % len(tensors)
        T = tensors[ti]
        j = rng.integers(T.size)
        old = T.flat[j]
        T.flat[j] = old + 1e-5
        lp = loss()
        T.flat[j] = old - 1e-5
        lm = loss()
        T.flat[j] = old
        fd, an = (lp - lm) / 2e-5, grads[ti].flat[j]
        scale = max(abs(fd), abs(an))
        if scale > 1e-10:
            worst = max(worst, abs(fd - an) / scale)
    assert worst < 1e-4


def test_gradient_zero_at_label():
    spec = toy_spec()
    p = perturbed_params(spec, 4)
    g = np.random.default_rng(5).normal(size=(3, 6))
    out, cache = forward(spec, p, g, "infer")
    loss, grads = backward(spec, p, cache, out)
    assert loss == 0
    assert all(not np.any(gr) for gr in grads)


def test_fc_bias_gradient_is_summed_delta():
    spec = NetworkSpec(3, (2, 2, 1, 1), (ConvLayer(1, 1, "relu"),), dropout_p=0.0)
    p = perturbed_params(spec, 6)
    p.filters[0][:] = 0
    p.filters[0][1, 1, 1] = 1.0
    g = np.random.default_rng(7).normal(size=(3, 3))
    lab = np.random.default_rng(8).random((3, 4))
    out, cache = forward(spec, p, g, "infer")
    _, grads = backward(spec, p, cache, lab)
    z = g @ p.fc_weights + p.fc_bias
    a = np.tanh(z)
    delta = (2 / lab.size) * (out.reshape(3, -1) - lab) * (a > 0) * (1 - a**2)
    np.testing.assert_allclose(grads[1], delta.sum(axis=0), atol=1e-14)
    np.testing.assert_allclose(grads[0], g.T @ delta, atol=1e-14)


def test_backward_requires_cache():
    spec = toy_spec()
    with pytest.raises(ContractViolation):
        backward(spec, xavier_init(spec, 0), None, np.zeros(18))


def test_inverted_dropout_preserves_mean():
    spec = NetworkSpec(1, (100, 100, 10, 1), (ConvLayer(1, 1, "relu"),), dropout_p=0.7,
                       input_noise_sigma=0.0)
    p = xavier_init(spec, 0)
    p.fc_weights[:] = 0
    p.fc_bias[:] = 0.5
    _, cache = forward(spec, p, np.zeros(1), "train", 0)
    assert cache.mask.size == 10**5
    dropped = cache.fc_act * cache.mask
    assert abs(dropped.mean() / np.tanh(0.5) - 1) < 0.01


def test_adam_hand_step():
    spec = NetworkSpec(1, (1, 1, 1, 1), (ConvLayer(1, 1, "relu"),))
    p = xavier_init(spec, 0)
    p.fc_weights[:] = 1.0
    zero = [np.zeros_like(t) for t in p.tensors()]
    before = [t.copy() for t in p.tensors()]
    adam_step(p, zero, 1)
    for a, b in zip(before, p.tensors()):
        np.testing.assert_array_equal(a, b)
    grads = [np.zeros_like(t) for t in p.tensors()]
    grads[0][:] = 0.5
    adam_step(p, grads, 1)
    assert p.fc_weights[0, 0] == pytest.approx(1 - 1e-4 * 0.5 / (0.5 + 1e-8), rel=1e-15)
    assert p.fc_weights[0, 0] == pytest.approx(0.9999)
    with pytest.raises(InvalidArgument):
        adam_step(p, grads, 0)


def test_adam_first_step_bounded():
    rng = np.random.default_rng(0)
    spec = toy_spec()
    p = xavier_init(spec, 0)
    before = [t.copy() for t in p.tensors()]
    grads = [rng.normal(size=t.shape) for t in p.tensors()]
    adam_step(p, grads, 1, lr=1e-3)
    for a, b in zip(before, p.tensors()):
        assert np.abs(a - b).max() <= 1e-3 * (1 + 1e-6)


def test_xavier_statistics():
    spec = standard_spec(1000, (10, 10, 10), channels=1)
    p = xavier_init(spec, 0)
    W = p.fc_weights
    target = 2.0 / (1000 + 1000)
    assert W.size == 10**6
    assert abs(W.var() / target - 1) < 0.05
    assert not np.any(p.fc_bias)
    assert all(not np.any(m) for m in p.m + p.v)
    q = xavier_init(spec, 0)
    for a, b in zip(p.tensors(), q.tensors()):
        np.testing.assert_array_equal(a, b)
    limit = np.sqrt(6 / (27 * 1 + 27 * 1))
    assert np.abs(p.filters[0]).max() <= limit


def _toy_data(n=40, seed=0):
    rng = np.random.default_rng(seed)
    X = rng.normal(size=(n, 6))
    Y = np.maximum(X @ rng.normal(size=(6, 18)) * 0.1, 0)
    return X, Y


def test_train_patience_zero_runs_one_epoch():
    X, Y = _toy_data()
    res = train(toy_spec(), X, Y, np.arange(30), np.arange(30, 40), patience=0, batch_size=8)
    assert len(res.history) == 1


def test_train_reduces_loss_and_is_reproducible():
    X, Y = _toy_data()
    spec = toy_spec(dropout_p=0.0, input_noise_sigma=0.0)
    kw = dict(batch_size=8, max_epochs=30, patience=30, lr=1e-2, rng_seed=3)
    a = train(spec, X, Y, np.arange(30), np.arange(30, 40), **kw)
    b = train(spec, X, Y, np.arange(30), np.arange(30, 40), **kw)
    assert [h["val_loss"] for h in a.history] == [h["val_loss"] for h in b.history]
    assert a.best_val_loss < a.history[0]["val_loss"]
    assert len(a.history) <= 120
    best = min(h["val_loss"] for h in a.history)
    assert a.best_val_loss == best


def test_train_rejects_empty():
    X, Y = _toy_data()
    with pytest.raises(InvalidArgument):
        train(toy_spec(), X, Y, [], np.arange(3))
