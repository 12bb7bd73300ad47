import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from llebkit import nets
from llebkit.autodiff import Tensor, finite_diff_check
from llebkit.metrics import accuracy
from llebkit.nets import AdamState, ClassifierParams, TrainConfig

from conftest import tiny_arch


def test_mnist_split_dim():
    arch = nets.mnist_cnn()
    assert arch.split_dim == 50 * 10 + 10
    assert arch.feature_dim == 50


def test_inconsistent_architecture_rejected():
    with pytest.raises(ValueError):
        nets.Architecture((2,), (nets.Linear(3, 4), nets.Linear(4, 2)))
    with pytest.raises(ValueError):
        nets.Architecture((28, 28, 1), (nets.Conv2d(1, 4, 5), nets.Flatten(), nets.Linear(100, 2)))


def test_architecture_round_trip():
    arch = nets.mnist_cnn(0.3)
    assert nets.Architecture.from_dict(arch.to_dict()) == arch


def test_last_layer_flatten_round_trip(rng):
    p = nets.init_params(nets.mnist_cnn(), rng)
    vec = p.flatten_last()
    assert vec.shape == (510,)
    q = p.with_last(vec)
    for k in p.tensors:
        np.testing.assert_array_equal(p.tensors[k], q.tensors[k])


def test_zero_net_gives_zero_logits():
    arch = nets.two_moons_mlp()
    p = nets.init_params(arch, np.random.default_rng(0))
    zero = ClassifierParams(arch, {k: np.zeros_like(v) for k, v in p.tensors.items()})
    out = nets.net_forward(zero, np.zeros((3, 2)))
    np.testing.assert_array_equal(out.data, np.zeros((3, 2)))


def test_eval_mode_is_deterministic(rng):
    arch = nets.mnist_cnn()
    p = nets.init_params(arch, rng)
    x = rng.random((2, 28, 28, 1))
    a = nets.net_forward(p, x).data
    b = nets.net_forward(p, x).data
    assert a.tobytes() == b.tobytes()
    assert a.shape == (2, 10)


def test_inverted_dropout_scaling():
    arch = nets.Architecture((2,), (nets.Dropout(0.5), nets.Linear(2, 1)))
    p = ClassifierParams(arch, {"1.weight": np.eye(2)[:, :1] * 0 + 1.0, "1.bias": np.zeros(1)})
    x = np.array([[3.0, 5.0]])
    feats = nets.features(arch, p.tensors, x, dropout_active=True, rng=np.random.default_rng(7)).data
    # each unit is either dropped or doubled
    for f, v in zip(feats[0], x[0]):
        assert f in (0.0, 2.0 * v)


def test_dropout2d_drops_whole_channels(rng):
    layer = nets.Dropout2d(0.5)
    m = nets._dropout_mask(layer, (4, 3, 3, 6), rng)
    for n in range(4):
        for c in range(6):
            assert np.unique(m[n, :, :, c]).size == 1


def test_dropout_needs_rng():
    arch = nets.two_moons_mlp()
    p = nets.init_params(arch, np.random.default_rng(0))
    with pytest.raises(ValueError):
        nets.net_forward(p, np.zeros((1, 2)), dropout_active=True)


def test_input_shape_checked(rng):
    p = nets.init_params(nets.two_moons_mlp(), rng)
    with pytest.raises(ValueError):
        nets.net_forward(p, np.zeros((1, 3)))


def test_cross_entropy_examples(rng):
    assert abs(nets.cross_entropy(Tensor([[0.0, 0.0]]), [0]).item() - math.log(2)) < 1e-15
    assert nets.cross_entropy(Tensor([[1000.0, 0.0]]), [0]).item() < 1e-9
    logits = rng.normal(size=(3, 4)) * 3
    labels = np.array([0, 3, 1])
    import mpmath

    mpmath.mp.dps = 40
    ref = 0.0
    for row, y in zip(logits, labels):
        z = sum(mpmath.e ** mpmath.mpf(float(v)) for v in row)
        ref += -mpmath.log(mpmath.e ** mpmath.mpf(float(row[y])) / z)
    assert abs(nets.cross_entropy(Tensor(logits), labels).item() - float(ref / 3)) < 1e-14
    assert nets.cross_entropy(Tensor(logits), labels).item() >= 0


def test_cross_entropy_label_range():
    with pytest.raises(ValueError):
        nets.cross_entropy(Tensor([[0.0, 1.0]]), [2])


def test_cross_entropy_gradient(rng):
    y = rng.integers(0, 4, 6)
    assert finite_diff_check(lambda z: nets.cross_entropy(z, y), rng.normal(size=(6, 4))) < 1e-5


def test_adam_first_step():
    st_ = AdamState(lr=0.1)
    p, st_ = nets.adam_step(st_, {"w": np.array(1.0)}, {"w": np.array(2.0)})
    assert abs(p["w"] - (1.0 - 0.1 * 2.0 / (2.0 + 1e-8))) < 1e-15
    assert st_.t == 1


def test_adam_zero_gradient_and_equal_updates():
    st_ = AdamState(lr=0.1)
    p, _ = nets.adam_step(st_, {"a": np.array([1.0, 2.0])}, {"a": np.zeros(2)})
    np.testing.assert_array_equal(p["a"], [1.0, 2.0])
    p, _ = nets.adam_step(AdamState(lr=0.1), {"a": np.array(1.5), "b": np.array(1.5)},
                          {"a": np.array(0.3), "b": np.array(0.3)})
    assert p["a"] == p["b"] != 1.5


def test_adam_weight_decay_enters_gradient():
    # with g = 0 the L2 term alone drives the first step: -lr * sign(param)
    p, _ = nets.adam_step(AdamState(lr=0.01, weight_decay=0.1), {"w": np.array(2.0)}, {"w": np.array(0.0)})
    assert abs(p["w"] - (2.0 - 0.01 * 0.2 / (0.2 + 1e-8))) < 1e-15


def test_adam_rejects_nonfinite():
    with pytest.raises(FloatingPointError):
        nets.adam_step(AdamState(), {"w": np.array(1.0)}, {"w": np.array(np.nan)})


def test_clip_examples():
    g = nets.clip_grad_norm({"a": np.array([3.0, 4.0])}, 1.0)
    np.testing.assert_allclose(g["a"], [0.6, 0.8], rtol=1e-15)
    g = nets.clip_grad_norm({"a": np.array([0.6]), "b": np.array([0.8])}, 0.1)
    assert abs(nets.global_norm(g) - 0.1) < 1e-15
    small = {"a": np.array([0.03, 0.04])}
    np.testing.assert_array_equal(nets.clip_grad_norm(small, 0.1)["a"], small["a"])


@settings(max_examples=100, deadline=None)
@given(arrays(np.float64, st.integers(1, 10), elements=st.floats(-1e6, 1e6)),
       st.floats(1e-6, 1e3))
def test_clip_bound_property(g, max_norm):
    out = nets.clip_grad_norm({"g": g}, max_norm)
    assert nets.global_norm(out) <= max_norm + 1e-12 * max(1.0, max_norm)


def test_zero_learning_rate_keeps_parameters(moons):
    arch = nets.two_moons_mlp()
    hp = TrainConfig(epochs=3, lr=0.0, weight_decay=0.0)
    p, _ = nets.train_classifier(arch, moons.train, hp, 0)
    init = nets.init_params(arch, nets.make_rng(0, "init"))
    for k in p.tensors:
        np.testing.assert_array_equal(p.tensors[k], init.tensors[k])


def test_zero_lr_constant_trace_without_dropout(moons):
    arch = nets.two_moons_mlp(dropout=0.0)
    _, trace = nets.train_classifier(arch, moons.train, TrainConfig(epochs=3, lr=0.0), 0)
    # batch order differs per epoch, so only the summation order changes
    np.testing.assert_allclose(trace, trace[0], rtol=1e-12)


def test_training_is_deterministic(moons):
    arch = nets.two_moons_mlp()
    hp = TrainConfig(epochs=5)
    a, ta = nets.train_classifier(arch, moons.train, hp, 3)
    b, tb = nets.train_classifier(arch, moons.train, hp, 3)
    assert ta == tb
    for k in a.tensors:
        assert a.tensors[k].tobytes() == b.tensors[k].tobytes()


def test_two_moons_reaches_accuracy(ml_params, moons):
    acc = accuracy(nets.predict_proba(ml_params, moons.test.features), moons.test.labels)
    assert acc >= 0.97


def test_smoothed_loss_trace_non_increasing():
    from conftest import desk_run

    trace = np.array(desk_run("default", 0).traces["0"]["classifier"])
    smooth = trace[: len(trace) // 10 * 10].reshape(-1, 10).mean(axis=1)
    # a sanity check, not strict monotonicity: dropout noise near convergence
    # may lift a window by a hair relative to the starting loss
    assert np.all(np.diff(smooth) <= 1e-3 * smooth[0])
    assert smooth[-1] < 0.05 * smooth[0]


def test_divergence_aborts(moons):
    with pytest.raises(nets.TrainingDiverged):
        nets.train_classifier(nets.two_moons_mlp(), moons.train,
                              TrainConfig(epochs=20, lr=50.0, clip_norm=1e6), 0)


def test_empty_dataset_rejected():
    from llebkit.data import Dataset

    with pytest.raises(ValueError):
        nets.train_classifier(tiny_arch(), Dataset(np.zeros((0, 2)), np.zeros(0)), TrainConfig(epochs=1), 0)
