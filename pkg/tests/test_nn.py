import math

import numpy as np
import pytest

from fedmask.errors import ShapeMismatchError
from fedmask.nn import (
    Architecture,
    ModelParams,
    OptimizerState,
    backward,
    cross_entropy,
    forward,
    init_params,
    load_params,
    log_softmax,
    per_sample_cross_entropy,
    save_params,
    sgd_step,
    softmax,
)

from .oracles import finite_diff_grad, rel_error

ARCH = Architecture(input_dim=5, hidden=(7,), num_classes=4)


def _zero_params(arch=ARCH):
    p = init_params(arch, rng_seed=0)
    return ModelParams(arch, {k: np.zeros_like(v) for k, v in p.tensors.items()})


def test_forward_zero_weights_zero_logits():
    params = _zero_params()
    out = forward(params, np.random.default_rng(0).standard_normal((3, 5)))
    assert np.array_equal(out, np.zeros((3, 4)))


def test_forward_linear_identity_map():
    arch = Architecture(2, (), 2)
    params = ModelParams(arch, {"w0": np.eye(2), "b0": np.zeros(2)})
    out = forward(params, np.array([[3.0, -1.0]]))
    assert np.array_equal(out[0], [3.0, -1.0])


def test_forward_shape_contract():
    params = init_params(ARCH, rng_seed=1)
    out = forward(params, np.random.default_rng(1).standard_normal((5, 5)))
    assert out.shape == (5, 4)
    assert np.isfinite(out).all()


def test_forward_rejects_bad_shape():
    params = init_params(ARCH, rng_seed=1)
    with pytest.raises(ShapeMismatchError):
        forward(params, np.zeros((3, 6)))


def test_forward_batch_order_equivariant():
    params = init_params(ARCH, rng_seed=2)
    x = np.random.default_rng(2).standard_normal((16, 5))
    perm = np.random.default_rng(3).permutation(16)
    assert np.array_equal(forward(params, x[perm]), forward(params, x)[perm])


def test_softmax_uniform_and_large():
    assert np.allclose(softmax(np.zeros(4)), 0.25)
    p = softmax(np.array([10.0, 0.0, 0.0, 0.0]))
    e10 = math.exp(10.0)
    assert math.isclose(p[0], e10 / (e10 + 3.0), rel_tol=1e-12)
    assert math.isclose(p[1], 1.0 / (e10 + 3.0), rel_tol=1e-12)
    assert abs(p.sum() - 1.0) <= 1e-12


def test_softmax_shift_invariance_and_overflow():
    v = np.array([1.0, -2.0, 0.5, 3.0])
    assert np.allclose(softmax(v), softmax(v + 123.456), atol=1e-15)
    extreme = softmax(np.array([700.0, -700.0, 0.0]))
    assert np.isfinite(extreme).all()
    assert abs(extreme.sum() - 1.0) <= 1e-12


def test_softmax_is_distribution_randomized():
    rng = np.random.default_rng(0)
    for _ in range(50):
        z = rng.uniform(-50, 50, size=6)
        p = softmax(z)
        assert (p > 0).all()
        assert abs(p.sum() - 1.0) <= 1e-12


def test_cross_entropy_uniform_prior_equals_plain():
    logits = np.array([[0.4, -0.2, 1.0, 0.0]])
    labels = np.array([2])
    plain, _ = cross_entropy(logits, labels)
    adjusted, _ = cross_entropy(logits, labels, prior=np.full(4, 0.25))
    assert math.isclose(plain, adjusted, rel_tol=1e-12)


def test_cross_entropy_known_values():
    loss, _ = cross_entropy(np.array([[0.0, 0.0]]), np.array([0]), prior=np.array([0.5, 0.5]))
    assert math.isclose(loss, math.log(2.0), rel_tol=1e-12)
    loss, _ = cross_entropy(np.array([[0.0, 0.0]]), np.array([0]), prior=np.array([0.9, 0.1]))
    assert math.isclose(loss, -math.log(0.9), rel_tol=1e-12)


def test_cross_entropy_prior_floor():
    loss, grad = cross_entropy(
        np.array([[0.0, 0.0]]), np.array([0]), prior=np.array([1.0, 0.0])
    )
    assert np.isfinite(loss)
    assert np.isfinite(grad).all()


def test_cross_entropy_label_out_of_range():
    with pytest.raises(IndexError):
        cross_entropy(np.zeros((1, 3)), np.array([3]))
    with pytest.raises(IndexError):
        cross_entropy(np.zeros((1, 3)), np.array([-1]))


def test_per_sample_cross_entropy_uniform():
    losses = per_sample_cross_entropy(np.zeros((3, 4)), np.array([0, 1, 3]))
    assert np.allclose(losses, math.log(4.0))


def test_backward_zero_upstream():
    params = init_params(ARCH, rng_seed=3)
    x = np.random.default_rng(4).standard_normal((6, 5))
    grads = backward(params, x, np.zeros((6, 4)))
    assert all(np.array_equal(g, np.zeros_like(g)) for g in grads.values())


def test_backward_linear_closed_form():
    arch = Architecture(3, (), 2)
    params = ModelParams(arch, {"w0": np.random.default_rng(5).standard_normal((3, 2)), "b0": np.zeros(2)})
    x = np.random.default_rng(6).standard_normal((4, 3))
    up = np.random.default_rng(7).standard_normal((4, 2))
    grads = backward(params, x, up)
    assert np.allclose(grads["w0"], x.T @ up)
    assert np.allclose(grads["b0"], up.sum(axis=0))


def test_backward_matches_finite_differences():
    rng = np.random.default_rng(8)
    params = init_params(ARCH, rng_seed=8)
    x = rng.standard_normal((6, 5))
    labels = rng.integers(0, 4, size=6)
    prior = np.full(4, 0.25)

    _, dlogits = cross_entropy(forward(params, x), labels, prior)
    grads = backward(params, x, dlogits)

    for name in params.tensors:
        def scalar(tensor, name=name):
            trial = ModelParams(params.arch, {**params.tensors, name: tensor})
            loss, _ = cross_entropy(forward(trial, x), labels, prior)
            return loss

        numeric = finite_diff_grad(scalar, params.tensors[name].copy())
        assert rel_error(grads[name], numeric) <= 1e-4


def test_sgd_zero_grad_identity():
    params = init_params(ARCH, rng_seed=9)
    state = OptimizerState.fresh(params, lr=0.1, momentum=0.9, weight_decay=0.0)
    zero = {k: np.zeros_like(v) for k, v in params.tensors.items()}
    out = sgd_step(params, zero, state)
    assert all(np.array_equal(out.tensors[k], params.tensors[k]) for k in params.tensors)


def test_sgd_plain_step():
    params = init_params(ARCH, rng_seed=10)
    grads = {k: np.full_like(v, 0.5) for k, v in params.tensors.items()}
    state = OptimizerState.fresh(params, lr=1.0, momentum=0.0, weight_decay=0.0)
    out = sgd_step(params, grads, state)
    for k in params.tensors:
        assert np.allclose(out.tensors[k], params.tensors[k] - 0.5)


def test_sgd_momentum_unroll():
    # Two steps on constant grad g with momentum 0.9, lr 1: total change 2.9 g.
    params = init_params(ARCH, rng_seed=11)
    g = {k: np.full_like(v, 0.3) for k, v in params.tensors.items()}
    state = OptimizerState.fresh(params, lr=1.0, momentum=0.9, weight_decay=0.0)
    stepped = sgd_step(sgd_step(params, g, state), g, state)
    for k in params.tensors:
        assert np.allclose(params.tensors[k] - stepped.tensors[k], 2.9 * 0.3)


def test_sgd_bit_deterministic():
    def one():
        params = init_params(ARCH, rng_seed=12)
        state = OptimizerState.fresh(params, lr=0.01, momentum=0.9, weight_decay=5e-4)
        g = {k: np.full_like(v, 0.1) for k, v in params.tensors.items()}
        for _ in range(5):
            params = sgd_step(params, g, state)
        return params

    a, b = one(), one()
    assert all(np.array_equal(a.tensors[k], b.tensors[k]) for k in a.tensors)


def test_init_bounds_and_seeding():
    params = init_params(ARCH, rng_seed=13)
    limit0 = math.sqrt(6.0 / (5 + 7))
    assert np.abs(params.tensors["w0"]).max() <= limit0
    assert np.array_equal(params.tensors["b0"], np.zeros(7))
    again = init_params(ARCH, rng_seed=13)
    assert np.array_equal(params.tensors["w0"], again.tensors["w0"])


def test_checkpoint_roundtrip_bit_exact(tmp_path):
    params = init_params(Architecture(6, (5, 3), 4), rng_seed=14)
    path = tmp_path / "model.npz"
    save_params(path, params)
    back = load_params(path)
    assert back.arch == params.arch
    assert back.names() == params.names()
    for k in params.tensors:
        assert np.array_equal(back.tensors[k], params.tensors[k])


def test_log_softmax_consistency():
    z = np.random.default_rng(15).standard_normal((4, 6))
    assert np.allclose(np.exp(log_softmax(z)), softmax(z))
