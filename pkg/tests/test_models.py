import numpy as np
import pytest
from hypothesis import given, strategies as st

from pflsim import models
from pflsim.models import ArchDescriptor

FAMILIES = [
    ArchDescriptor("linear_regression", 5, 1, l2_reg=0.1),
    ArchDescriptor("linear_svm", 5, 2, l2_reg=0.1),
    ArchDescriptor("softmax_classifier", 5, 4, l2_reg=0.1),
    ArchDescriptor("mlp_classifier", 5, 3, hidden_dim=6, l2_reg=0.1),
    ArchDescriptor("mlp_regressor", 5, 1, hidden_dim=6, l2_reg=0.1),
]


def _batch(arch, rng, n=7):
    X = rng.standard_normal((n, arch.input_dim))
    if arch.is_classifier:
        y = rng.integers(0, arch.num_classes, n)
    else:
        y = rng.standard_normal(n)
    return X, y


def fd_gradient(params, batch, h=1e-5):
    """Central differences of models.loss, coordinate by coordinate."""
    g = np.zeros(len(params))
    for i in range(len(params)):
        e = np.zeros(len(params))
        e[i] = h
        g[i] = (models.loss(params.with_values(params.values + e), batch)
                - models.loss(params.with_values(params.values - e), batch)) / (2 * h)
    return g


@pytest.mark.parametrize("arch", FAMILIES, ids=lambda a: a.family)
def test_gradient_matches_finite_differences(arch):
    rng = np.random.default_rng(7)
    checked = 0
    while checked < 50:
        p = models.random_params(arch, int(rng.integers(1 << 30)), 0.7)
        p = p.with_values(p.values + 0.3 * rng.standard_normal(len(p)))
        X, y = _batch(arch, rng)
        if arch.family == "linear_svm":
            s = 2.0 * y - 1.0
            f = models.predict(p, X).scores[:, 1]
            if np.any(np.abs(1 - s * f) <= 1e-3):
                continue
        fd = fd_gradient(p, (X, y))
        an = models.gradient(p, (X, y))
        assert np.linalg.norm(an - fd) / max(1.0, np.linalg.norm(fd)) < 1e-5
        checked += 1


def test_param_counts():
    assert ArchDescriptor("softmax_classifier", 10, 4).num_params == 11 * 4
    assert ArchDescriptor("mlp_classifier", 4, 3, hidden_dim=8).num_params == 67
    p = models.init_params(ArchDescriptor("linear_svm", 100, 2), 0)
    assert len(p) == 101 and not p.values.any()


def test_init_is_deterministic():
    arch = ArchDescriptor("mlp_classifier", 4, 3, hidden_dim=8)
    a, b = models.init_params(arch, 3), models.init_params(arch, 3)
    assert np.array_equal(a.values, b.values) and not np.array_equal(a.values, models.init_params(arch, 4).values)
    assert not a.layer("hidden.bias").any() and not a.layer("out.bias").any()
    assert np.abs(a.layer("hidden.weight")).max() <= 0.5


@pytest.mark.parametrize("bad", [dict(input_dim=0), dict(l2_reg=-1.0), dict(family="mlp_classifier", hidden_dim=0),
                                 dict(family="nope"), dict(family="linear_svm", num_classes=3)])
def test_invalid_descriptors(bad):
    with pytest.raises(ValueError):
        ArchDescriptor(**{"family": "softmax_classifier", "input_dim": 3, "num_classes": 3, **bad})


def _set(arch, **layers):
    p = models.init_params(arch, 0)
    v = p.values.copy()
    for name, val in layers.items():
        v[p.layer_index[name.replace("_", ".")]] = np.ravel(val)
    return p.with_values(v)


def test_predict_examples():
    probs = models.predict(models.init_params(ArchDescriptor("softmax_classifier", 2, 3), 0), [1.0, 2.0]).probs
    np.testing.assert_allclose(probs, [1 / 3] * 3, rtol=0, atol=1e-15)
    lr = _set(ArchDescriptor("linear_regression", 1), out_weight=[2.0], out_bias=[1.0])
    assert models.predict(lr, [3.0]) == 7.0
    svm = _set(ArchDescriptor("linear_svm", 2, 2), out_weight=[1.0, -1.0])
    assert models.predict(svm, [1.0, 1.0]).scores[1] == 0.0
    with pytest.raises(ValueError):
        models.predict(svm, [1.0, 1.0, 1.0])


def test_loss_examples():
    X = np.random.default_rng(0).standard_normal((5, 2))
    sm = models.init_params(ArchDescriptor("softmax_classifier", 2, 3), 0)
    assert models.loss(sm, (X, np.array([0, 1, 2, 0, 1]))) == pytest.approx(np.log(3), abs=1e-15)
    svm = models.init_params(ArchDescriptor("linear_svm", 2, 2), 0)
    assert models.loss(svm, (X, np.array([0, 1, 1, 0, 1]))) == 1.0
    lr = _set(ArchDescriptor("linear_regression", 1), out_weight=[2.0], out_bias=[1.0])
    assert models.loss(lr, ([[3.0]], [7.0])) == 0.0
    with pytest.raises(ValueError):
        models.loss(lr, (np.zeros((0, 1)), np.zeros(0)))


def test_l2_excludes_bias():
    arch = ArchDescriptor("linear_regression", 1, l2_reg=2.0)
    p = _set(arch, out_weight=[3.0], out_bias=[5.0])
    # exact fit for x=0 (prediction = bias = 5), so the loss is the penalty alone
    assert models.loss(p, ([[0.0]], [5.0])) == pytest.approx(0.5 * 2.0 * 9.0)
    g = models.gradient(p, ([[0.0]], [5.0]))
    assert g[p.layer_index["out.bias"]][0] == 0.0


def test_gradient_examples():
    lr = _set(ArchDescriptor("linear_regression", 1), out_weight=[2.0], out_bias=[1.0])
    assert not models.gradient(lr, ([[3.0]], [7.0])).any()
    svm = models.init_params(ArchDescriptor("linear_svm", 2, 2), 0)
    g = models.gradient(svm, ([[1.0, 0.0]], [1]))
    np.testing.assert_array_equal(g, [-1.0, 0.0, -1.0])


def test_hinge_kink_is_inactive():
    svm = _set(ArchDescriptor("linear_svm", 1, 2), out_weight=[1.0])
    # margin y*f = 1 exactly
    assert not models.gradient(svm, ([[1.0]], [1])).any()


def test_representation():
    svm = models.init_params(ArchDescriptor("linear_svm", 2, 2), 0)
    np.testing.assert_array_equal(models.representation(svm, [1.0, 2.0]), [1.0, 2.0])
    mlp = models.init_params(ArchDescriptor("mlp_classifier", 3, 2, hidden_dim=8), 0)
    assert models.representation(mlp, [1.0, 2.0, 3.0]).shape == (8,)
    zero = mlp.with_values(np.zeros(len(mlp)))
    assert not models.representation(zero, [1.0, 2.0, 3.0]).any()


@given(st.integers(0, 10_000), st.sampled_from(FAMILIES))
def test_probabilities_normalized_and_loss_nonnegative(seed, arch):
    rng = np.random.default_rng(seed)
    p = models.random_params(arch, seed, 2.0)
    X, y = _batch(arch, rng)
    assert models.loss(p, (X, y)) >= 0.0
    if arch.is_classifier:
        np.testing.assert_allclose(models.predict(p, X).probs.sum(axis=1), 1.0, atol=1e-9)


@given(st.integers(0, 10_000), st.sampled_from([a for a in FAMILIES if a.family != "linear_svm"]))
def test_loss_decreases_along_negative_gradient(seed, arch):
    rng = np.random.default_rng(seed)
    p = models.random_params(arch, seed, 0.5)
    X, y = _batch(arch, rng)
    g = models.gradient(p, (X, y))
    if np.linalg.norm(g) < 1e-8:
        return
    step = 1e-4 / max(1.0, np.linalg.norm(g))
    assert models.loss(p.with_values(p.values - step * g), (X, y)) < models.loss(p, (X, y))


def test_last_layer_mask():
    arch = ArchDescriptor("mlp_classifier", 3, 2, hidden_dim=4)
    mask = models.last_layer_mask(arch)
    assert mask.sum() == 4 * 2 + 2 and not mask[: 3 * 4 + 4].any()


def test_examples_accepted_as_batch():
    from pflsim.datamodel import Example
    arch = ArchDescriptor("softmax_classifier", 2, 2)
    p = models.random_params(arch, 0)
    exs = [Example(np.array([1.0, 2.0]), 1), Example(np.array([0.0, -1.0]), 0)]
    assert models.loss(p, exs) == models.loss(p, (np.array([[1.0, 2.0], [0.0, -1.0]]), np.array([1, 0])))
