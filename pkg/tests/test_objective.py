import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from ssl_reweight import network
from ssl_reweight.linalg import cholesky, make_rng
from ssl_reweight.influence import assemble_hessian
from ssl_reweight.objective import (
    LossSpec,
    WeightVector,
    build_batch,
    combined_loss,
    pseudo_label,
    reparam_binary,
    softmax_ce,
)

from conftest import random_net


def test_softmax_ce_uniform_and_saturated():
    loss, grad = softmax_ce([0.0, 0.0], [1.0, 0.0])
    assert loss == pytest.approx(np.log(2), abs=1e-12)
    np.testing.assert_allclose(grad, [-0.5, 0.5])
    loss, _ = softmax_ce([50.0, -50.0], [1.0, 0.0])
    assert 0.0 <= loss <= 1e-20


def test_softmax_ce_gradient_finite_difference():
    rng = make_rng(0)
    z = rng.standard_normal(4)
    t = np.array([0.0, 0.0, 1.0, 0.0])
    _, g = softmax_ce(z, t)
    for k in range(4):
        e = np.zeros(4)
        e[k] = 1e-6
        fd = (softmax_ce(z + e, t)[0] - softmax_ce(z - e, t)[0]) / 2e-6
        assert fd == pytest.approx(g[k], rel=1e-6, abs=1e-10)


def test_softmax_ce_rejects_soft_target():
    with pytest.raises(ValueError):
        softmax_ce([0.0, 1.0], [0.5, 0.5])


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-1e4, 1e4), min_size=2, max_size=6))
def test_softmax_normalized_without_overflow(z):
    p = network.softmax(np.array([z]))[0]
    assert np.all(np.isfinite(p))
    assert abs(p.sum() - 1.0) <= 1e-12


def test_pseudo_label_cases():
    np.testing.assert_array_equal(pseudo_label(np.log([0.2, 0.8])), [0.0, 1.0])
    np.testing.assert_array_equal(pseudo_label(np.log([0.5, 0.5]), 0.0), [1.0, 0.0])
    assert pseudo_label(np.log([0.6, 0.4]), 0.9) is None


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-30, 30), min_size=2, max_size=5), st.floats(-100, 100))
def test_pseudo_label_shift_invariant(z, c):
    z = np.array(z)
    np.testing.assert_array_equal(pseudo_label(z), pseudo_label(z + c))


def _setup(seed=0):
    p = random_net(seed, classes=2)
    rng = make_rng(seed)
    xd = rng.standard_normal((6, 2))
    yd = np.array([0, 1, 0, 1, 1, 0])
    xu = rng.standard_normal((9, 2))
    ids = np.arange(9)
    return p, xd, yd, xu, ids


def test_combined_loss_reduces_to_supervised():
    p, xd, yd, xu, ids = _setup()
    sup = combined_loss(p, xd, yd)
    assert combined_loss(p, xd, yd, xu, ids, WeightVector.constant(9, 0.0)) == pytest.approx(sup, rel=1e-15)
    assert combined_loss(p, xd, yd, xu[:0], ids[:0], WeightVector.constant(9, 1.0)) == sup


def test_combined_loss_linear_in_weights():
    p, xd, yd, xu, ids = _setup(1)
    sup = combined_loss(p, xd, yd)
    w = WeightVector(np.linspace(0.0, 2.0, 9))
    unsup = combined_loss(p, xd, yd, xu, ids, w) - sup
    w2 = WeightVector(2 * w.values)
    assert combined_loss(p, xd, yd, xu, ids, w2) - sup == pytest.approx(2 * unsup, rel=1e-12)


def test_combined_loss_affine_in_each_weight():
    p, xd, yd, xu, ids = _setup(2)
    base = np.ones(9)
    logits, _ = network.forward(p, xu[3:4])
    t = pseudo_label(logits[0])
    slope = softmax_ce(logits[0], t)[0] / 9
    vals = []
    for lam in (0.0, 1.0, 3.0):
        w = base.copy()
        w[3] = lam
        vals.append(combined_loss(p, xd, yd, xu, ids, WeightVector(w)))
    assert vals[1] - vals[0] == pytest.approx(slope, rel=1e-10)
    assert vals[2] - vals[0] == pytest.approx(3 * slope, rel=1e-10)


def test_combined_loss_missing_weight_id():
    p, xd, yd, xu, ids = _setup()
    with pytest.raises(KeyError):
        combined_loss(p, xd, yd, xu, ids + 5, WeightVector.constant(9, 1.0))


def test_threshold_drops_unconfident_rows():
    p, xd, yd, xu, _ = _setup(3)
    b = build_batch(p, xd, yd, xu, np.ones(9), LossSpec(pseudo_label_threshold=1.0))
    np.testing.assert_array_equal(b.targets[6:], 0.0)


def test_loss_spec_validation():
    with pytest.raises(ValueError):
        LossSpec(pseudo_label_threshold=1.5)
    with pytest.raises(ValueError):
        LossSpec(kind="vat")


def test_weight_vector_nonnegative():
    with pytest.raises(ValueError):
        WeightVector(np.array([1.0, -0.1]))


def test_reparam_symmetric_case():
    p = random_net(4, classes=2)
    w, b = p.layers[-1]
    w[:, 1] = w[:, 0]
    b[1] = b[0]
    q = reparam_binary(p)
    np.testing.assert_array_equal(q.last_layer_flat(), 0.0)
    probs = network.predict_proba(q, make_rng(4).standard_normal((5, 2)))
    np.testing.assert_allclose(probs, 0.5)


def test_reparam_preserves_probabilities_and_loss():
    p = random_net(5, hidden=12, classes=2)
    _, b = p.layers[-1]
    b += [0.3, -0.2]
    q = reparam_binary(p)
    assert q.last_dim == p.last_dim // 2
    x = 2.0 * make_rng(5).standard_normal((50, 2))
    np.testing.assert_allclose(network.predict_proba(q, x), network.predict_proba(p, x), atol=1e-12)
    xd, yd = x[:10], make_rng(6).integers(0, 2, 10)
    xu, ids = x[10:], np.arange(40)
    w = WeightVector(np.linspace(0.5, 1.5, 40))
    assert combined_loss(q, xd, yd, xu, ids, w) == pytest.approx(combined_loss(p, xd, yd, xu, ids, w), rel=1e-12)


def test_reparam_rejects_multiclass():
    with pytest.raises(ValueError):
        reparam_binary(random_net(0, classes=3))


def test_reparam_hessian_positive_definite():
    p = reparam_binary(random_net(6, hidden=20, classes=2))
    rng = make_rng(6)
    b = build_batch(p, rng.standard_normal((10, 2)), np.arange(10) % 2, rng.standard_normal((30, 2)), np.ones(30))
    cholesky(assemble_hessian(p, b, 1e-3))
