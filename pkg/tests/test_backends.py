from __future__ import annotations

import numpy as np
import pytest

from app.autodiff import ShapeError, Tape, constant, parameter
from app.backends import (
    ClassifierNet,
    EnhancerNet,
    accuracy,
    ci95,
    classify,
    cross_entropy,
    enhance,
    enhancement_loss,
    parameter_count,
    predict_mask,
    si_sdr,
)
from app.frontend.params import init_frontend
from app.optim import grad_check


def test_parameter_counts():
    assert parameter_count(ClassifierNet.initial(40)) == 14310
    assert parameter_count(EnhancerNet.initial()) == 34931
    assert parameter_count(ClassifierNet.initial(40, use_stem=True)) == 14310 + 400
    with pytest.raises(ValueError):
        ClassifierNet.initial(1)


def test_initialization_is_seeded():
    a = ClassifierNet.initial(3, seed=5).tensors()
    b = ClassifierNet.initial(3, seed=5).tensors()
    c = ClassifierNet.initial(3, seed=6).tensors()
    for name in a:
        np.testing.assert_array_equal(a[name].value, b[name].value)
    assert not np.array_equal(a["classifier.conv0.weight"].value, c["classifier.conv0.weight"].value)
    np.testing.assert_array_equal(a["classifier.head.bias"].value, 0.0)


def test_output_shapes(rng):
    features = constant(rng.standard_normal((40, 129, 6)))
    assert classify(features, ClassifierNet.initial(3)).shape == (6, 3)
    mask = predict_mask(features, EnhancerNet.initial())
    assert mask.shape == (6, 129)
    assert np.all((mask.value > 0.0) & (mask.value < 1.0))
    stem_input = constant(rng.standard_normal((1, 129, 6)))
    assert classify(stem_input, ClassifierNet.initial(3, use_stem=True)).shape == (6, 3)
    with pytest.raises(ShapeError):
        classify(stem_input, ClassifierNet.initial(3))


def test_cross_entropy_skips_unlabeled_frames():
    logits = constant(np.zeros((3, 4)))
    assert float(cross_entropy(logits, [0, 1, -1]).value) == pytest.approx(np.log(4.0))
    with pytest.raises(ValueError, match="unlabeled"):
        cross_entropy(logits, [-1, -1, -1])
    with pytest.raises(ValueError):
        cross_entropy(logits, [0, 4, 1])


def test_cross_entropy_gradient_is_softmax_minus_one_hot():
    values = np.array([[2.0, 0.0, -1.0], [0.5, 0.5, 3.0]])
    logits = parameter(values, name="logits")
    with Tape() as tape:
        loss = cross_entropy(logits, [0, -1])
    tape.backward(loss)
    softmax = np.exp(values[0]) / np.exp(values[0]).sum()
    np.testing.assert_allclose(logits.grad[0], softmax - np.array([1.0, 0.0, 0.0]))
    np.testing.assert_allclose(logits.grad[1], 0.0)


def test_accuracy_ties_and_unlabeled():
    logits = np.array([[1.0, 1.0], [0.0, 2.0], [3.0, 0.0]])
    assert accuracy(logits, [0, 1, 1]) == pytest.approx(2.0 / 3.0)
    assert accuracy(logits, [1, -1, -1]) == 0.0
    assert np.isnan(accuracy(logits, [-1, -1, -1]))


def test_unit_mask_reconstructs_mix(rng):
    mix = rng.standard_normal(1000)
    estimate, mask = enhance(mix, init_frontend(), None, forced_mask=1.0)
    assert estimate.shape == (1000,)
    assert mask.shape == (13, 129)
    np.testing.assert_allclose(estimate.value, mix, atol=1e-10)
    silent, _ = enhance(mix, init_frontend(), None, forced_mask=0.0)
    np.testing.assert_allclose(silent.value, 0.0, atol=1e-12)
    with pytest.raises(ValueError):
        enhance(mix, init_frontend(), None)


def test_enhancement_loss(rng):
    target = rng.standard_normal(2000)
    assert float(enhancement_loss(target, target).value) == 0.0
    assert float(enhancement_loss(target + 0.1, target).value) > 0.1
    with pytest.raises(ShapeError):
        enhancement_loss(target[:1999], target)


def test_si_sdr_values():
    t = np.array([1.0, 1.0, 0.0, 0.0])
    assert si_sdr(t, t) == 100.0
    assert si_sdr(3.0 * t, t) == 100.0
    assert si_sdr(t + 0.1 * np.array([1.0, -1.0, 0.0, 0.0]), t) == pytest.approx(20.0)
    assert si_sdr(np.array([0.0, 0.0, 1.0, 0.0]), t) == -100.0
    with pytest.raises(ValueError, match="silent"):
        si_sdr(t, np.zeros(4))
    with pytest.raises(ValueError):
        si_sdr(t[:3], t)


def test_ci95():
    assert ci95([1.0, 2.0, 3.0]) == pytest.approx(1.96 / np.sqrt(3.0))
    assert ci95([5.0]) == 0.0
    assert ci95([]) == 0.0


def _sampled(net, count=3):
    rng = np.random.default_rng(0)
    params = net.tensors()
    components = {}
    for name, tensor in params.items():
        picks = rng.choice(tensor.size, size=min(count, tensor.size), replace=False)
        components[name] = [np.unravel_index(k, tensor.shape) for k in picks]
    return params, components


def test_classifier_gradients(rng):
    net = ClassifierNet.initial(3, seed=0)
    net.head_bias.value = rng.normal(0.0, 0.1, 3)
    features = constant(rng.standard_normal((40, 129, 4)))
    labels = [0, 2, -1, 1]
    params, components = _sampled(net)
    report = grad_check(
        lambda: cross_entropy(classify(features, net), labels), params, tol=1e-4, atol=1e-8, components=components
    )
    assert report.passed, report.failures


def test_enhancer_gradients(rng):
    net = EnhancerNet.initial(seed=0)
    mix = rng.standard_normal(1600)
    target = rng.standard_normal(1600)
    features = constant(rng.standard_normal((40, 129, 20)))
    params, components = _sampled(net)
    report = grad_check(
        lambda: enhancement_loss(enhance(mix, init_frontend(), net, features=features)[0], target),
        params,
        tol=1e-4,
        atol=1e-8,
        components=components,
    )
    assert report.passed, report.failures
