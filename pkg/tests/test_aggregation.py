import numpy as np
import pytest

from fedmask.aggregation import (
    aggregate,
    coordinate_median,
    geometric_median,
    pre_merge,
    weighted_average,
)
from fedmask.errors import AggregationError, ShapeMismatchError
from fedmask.nn import Architecture, ModelParams, init_params

ARCH = Architecture(3, (4,), 2)


def _model(seed):
    return init_params(ARCH, rng_seed=seed)


def _scalar_models(values):
    arch = Architecture(2, (), 2)
    return [
        ModelParams(arch, {"w0": np.full((2, 2), v), "b0": np.full(2, v)}) for v in values
    ]


def _tensors_equal(a, b, atol=0.0):
    return all(np.allclose(a.tensors[k], b.tensors[k], atol=atol) for k in a.tensors)


def test_average_single_model_identity():
    m = _model(0)
    out = weighted_average([m], [17])
    assert _tensors_equal(out, m)


def test_average_two_equal_weights():
    a, b = _model(1), _model(2)
    out = weighted_average([a, b], [3, 3])
    for k in a.tensors:
        assert np.allclose(out.tensors[k], (a.tensors[k] + b.tensors[k]) / 2.0)


def test_average_weighted_scalars():
    models = _scalar_models([0.0, 4.0])
    out = weighted_average(models, [1, 3])
    assert np.allclose(out.tensors["w0"], 3.0)


def test_average_zero_weight_sum_rejected():
    with pytest.raises(AggregationError):
        weighted_average(_scalar_models([1.0, 2.0]), [0, 0])


def test_coordinate_median_cases():
    m = _model(3)
    assert _tensors_equal(coordinate_median([m, m, m]), m)
    out = coordinate_median(_scalar_models([0.0, 0.0, 10.0]))
    assert np.allclose(out.tensors["w0"], 0.0)
    out = coordinate_median(_scalar_models([0.0, 2.0, 4.0, 100.0]))
    assert np.allclose(out.tensors["w0"], 3.0)


def test_geometric_median_identical_models():
    m = _model(4)
    out = geometric_median([m, m, m])
    assert _tensors_equal(out, m)


def test_geometric_median_triangle_centroid():
    arch = Architecture(2, (), 1)
    pts = [
        np.array([1.0, 0.0]),
        np.array([-0.5, np.sqrt(3) / 2]),
        np.array([-0.5, -np.sqrt(3) / 2]),
    ]
    models = [ModelParams(arch, {"w0": p.reshape(2, 1), "b0": np.zeros(1)}) for p in pts]
    out = geometric_median(models, eps=1e-9, max_iter=200)
    assert np.linalg.norm(out.tensors["w0"].ravel()) <= 1e-3


def test_geometric_median_outlier_scalars():
    out = geometric_median(_scalar_models([0.0, 0.0, 0.0, 10.0]))
    # default budget (10 iterations) already lands within 1e-3 of 0
    assert np.abs(out.tensors["w0"]).max() <= 1e-3


def test_geometric_median_matches_bruteforce_1d():
    from .oracles import brute_force_geometric_median_1d

    rng = np.random.default_rng(0)
    arch = Architecture(2, (), 1)
    for trial in range(10):
        n = int(rng.integers(3, 16))
        values = rng.uniform(-3, 3, size=n)
        models = [
            ModelParams(arch, {"w0": np.full((2, 1), v), "b0": np.full(1, v)}) for v in values
        ]
        out = geometric_median(models, eps=1e-9, max_iter=500)
        found = out.tensors["b0"][0]
        best_x, best_f = brute_force_geometric_median_1d(values)
        f_found = np.abs(values - found).sum()
        assert f_found <= best_f + 1e-3
        if n % 2 == 1:  # odd sizes have a unique minimizer
            assert abs(found - best_x) <= 1e-3


def test_aggregators_permutation_invariant():
    models = [_model(s) for s in range(5)]
    weights = [1.0, 2.0, 3.0, 4.0, 5.0]
    perm = [3, 0, 4, 1, 2]
    pm = [models[i] for i in perm]
    pw = [weights[i] for i in perm]
    assert _tensors_equal(weighted_average(models, weights), weighted_average(pm, pw), atol=1e-12)
    assert _tensors_equal(coordinate_median(models), coordinate_median(pm), atol=0.0)
    assert _tensors_equal(
        geometric_median(models), geometric_median(pm), atol=1e-9
    )


def test_geometric_median_in_convex_hull():
    models = [_model(s) for s in range(4)]
    out = geometric_median(models, eps=1e-7, max_iter=100)
    for k in out.tensors:
        stack = np.stack([m.tensors[k] for m in models])
        assert np.all(out.tensors[k] >= stack.min(axis=0) - 1e-9)
        assert np.all(out.tensors[k] <= stack.max(axis=0) + 1e-9)


def test_aggregators_translation_equivariant():
    models = [_model(s) for s in range(3)]
    weights = [1.0, 2.0, 3.0]
    shift = 0.75

    def shifted(m):
        return ModelParams(m.arch, {k: v + shift for k, v in m.tensors.items()})

    shifted_models = [shifted(m) for m in models]
    for method in ("average", "coord_median", "geometric_median"):
        base = aggregate(models, weights, method)
        moved = aggregate(shifted_models, weights, method)
        assert _tensors_equal(shifted(base), moved, atol=1e-9)


def test_geometric_median_outlier_robustness():
    # 9 models at v, 1 at v + delta: stays within ||delta||/2 of v even for
    # huge delta, unlike averaging which moves delta/10 without bound.
    v = 1.0
    for delta in (1.0, 100.0, 1000.0):
        models = _scalar_models([v] * 9 + [v + delta])
        gm = geometric_median(models, eps=1e-7, max_iter=200)
        move = np.abs(gm.tensors["w0"] - v).max()
        assert move < delta / 2.0
        avg = weighted_average(models, [1.0] * 10)
        assert np.allclose(avg.tensors["w0"], v + delta / 10.0)
        assert move < abs(avg.tensors["w0"].max() - v)


def test_pre_merge_blend():
    local, globl = _model(7), _model(8)
    assert _tensors_equal(pre_merge(local, globl, 1.0), local)
    assert _tensors_equal(pre_merge(local, globl, 0.0), globl)
    out = pre_merge(local, globl, 0.8)
    for k in local.tensors:
        assert np.allclose(out.tensors[k], 0.8 * local.tensors[k] + 0.2 * globl.tensors[k])


def test_pre_merge_scalar_example():
    models = _scalar_models([1.0, 0.0])
    out = pre_merge(models[0], models[1], 0.8)
    assert np.allclose(out.tensors["w0"], 0.8)


def test_pre_merge_shape_mismatch():
    other = init_params(Architecture(3, (5,), 2), rng_seed=0)
    with pytest.raises(ShapeMismatchError):
        pre_merge(_model(0), other, 0.5)


def test_aggregate_dispatch_unknown():
    with pytest.raises(AggregationError):
        aggregate([_model(0)], [1.0], "trimmed_mean")


def test_mismatched_architectures_rejected():
    with pytest.raises(AggregationError):
        weighted_average([_model(0), init_params(Architecture(3, (5,), 2), 0)], [1, 1])
