import hashlib

import numpy as np
import pytest

from llebkit import autodiff as ad
from llebkit import lleb, nets
from llebkit.autodiff import Tensor
from llebkit.flow import FlowConfig, NeuralSplineFlow
from llebkit.lleb import (END_TO_END, FC_GENERATOR, TWO_STEP, ConfigurationError, FCGenerator, LLEBModel,
                          RegularizationConfig, mc_expected_loglik)
from llebkit.metrics import accuracy, epistemic_variance, predictive
from llebkit.nets import TrainConfig

from conftest import desk_data, desk_report, desk_run, tiny_arch


def sha(d: dict) -> str:
    h = hashlib.sha256()
    for k in sorted(d):
        h.update(k.encode())
        h.update(np.ascontiguousarray(d[k]).tobytes())
    return h.hexdigest()


def toy_model(seed=0, flow=True):
    rng = np.random.default_rng(seed)
    arch = tiny_arch(h=3, c=2)
    p = nets.init_params(arch, rng)
    if flow:
        sampler = NeuralSplineFlow.create(arch.split_dim, FlowConfig(hidden_features=8), rng).randomize(rng)
    else:
        sampler = FCGenerator.create(arch.split_dim, rng, hidden=8)
    return LLEBModel(arch, p.backbone(), np.zeros(arch.split_dim), sampler, TWO_STEP,
                     lleb.SPLINE_FLOW if flow else FC_GENERATOR)


def toy_batch(seed=0, n=20):
    rng = np.random.default_rng(seed)
    return rng.normal(size=(n, 2)), rng.integers(0, 2, n)


def test_constant_sampler_gives_plain_log_likelihood():
    model = toy_model(flow=False)
    theta0 = np.random.default_rng(3).normal(size=model.arch.split_dim)
    model.sampler.params["fc2.w"] = np.zeros_like(model.sampler.params["fc2.w"])
    model.sampler.params["fc2.b"] = theta0
    x, y = toy_batch()
    val = mc_expected_loglik(model, (x, y), S=10, rng=np.random.default_rng(0)).item()
    params = nets.ClassifierParams(model.arch, dict(model.backbone)).with_last(theta0)
    ref = -nets.cross_entropy(nets.net_forward(params, x), y).item()
    assert abs(val - ref) <= 1e-14 * abs(ref)


def test_mc_objective_deterministic():
    model = toy_model()
    b = toy_batch()
    a = mc_expected_loglik(model, b, S=1, rng=np.random.default_rng(4)).item()
    c = mc_expected_loglik(model, b, S=1, rng=np.random.default_rng(4)).item()
    assert a == c


def test_mc_objective_agrees_with_large_sample():
    model = toy_model()
    x, y = toy_batch()
    # per-draw values from a large sample give the oracle mean and spread
    big = np.array([mc_expected_loglik(model, (x, y), S=1, rng=np.random.default_rng(1000 + i)).item()
                    for i in range(2000)])
    big_mean = mc_expected_loglik(model, (x, y), S=10_000, rng=np.random.default_rng(7)).item()
    small = mc_expected_loglik(model, (x, y), S=10, rng=np.random.default_rng(8)).item()
    assert abs(small - big_mean) <= 3 * big.std() / np.sqrt(10)


def test_mc_objective_rejects_zero_samples():
    with pytest.raises(ValueError):
        mc_expected_loglik(toy_model(), toy_batch(), S=0, rng=np.random.default_rng(0))


def test_reparameterisation_gradient_of_objective():
    model = toy_model(seed=2)
    assert model.arch.split_dim == 8
    x, y = toy_batch(1)
    name = "c0.out.w"
    base = model.sampler.params[name]
    coords = np.random.default_rng(0).choice(base.size, 12, replace=False)

    def f(w):
        weights = {f"flow/{k}": v for k, v in model.sampler.params.items()}
        weights[f"flow/{name}"] = w
        return mc_expected_loglik(model, (x, y), S=4, rng=np.random.default_rng(11), weights=weights)

    assert ad.finite_diff_check(f, base, coords=coords) < 1e-4


def test_fc_generator_zero_output_layer_is_constant():
    g = FCGenerator.create(5, np.random.default_rng(0), hidden=7)
    g.params["fc2.w"][:] = 0.0
    th, logq = g.sample(6, np.random.default_rng(1))
    assert logq is None
    assert np.all(th.data == th.data[0])


def test_fc_generator_rejects_entropy(moons, ml_params):
    with pytest.raises(ConfigurationError):
        lleb.train_two_step(ml_params, moons.train, None, TrainConfig(epochs=1), 0,
                            sampler_kind=FC_GENERATOR, reg=RegularizationConfig(lam=0.5))
    with pytest.raises(ConfigurationError):
        lleb.train_regularized(RegularizationConfig(lam=-1.0), mode=END_TO_END, arch=nets.two_moons_mlp(),
                               data=moons.train, flow_cfg=None, hp=TrainConfig(epochs=1), seed=0,
                               sampler_kind=FC_GENERATOR)


def test_two_step_freezes_backbone(moons, ml_params):
    before = sha(ml_params.tensors)
    model = lleb.train_two_step(ml_params, moons.train, FlowConfig(hidden_features=16),
                                TrainConfig(epochs=2, lr=1e-3), 0)
    assert sha(ml_params.tensors) == before
    assert sha(model.backbone) == sha(ml_params.backbone())
    np.testing.assert_array_equal(model.base_last, 0.0)


def test_two_step_desk_run_keeps_pretrained_backbone():
    pre = desk_run("default", 0).members[0]
    model = desk_run("lleb", 0).members[0]
    assert sha(model.backbone) == sha(pre.backbone())


def test_lambda_zero_is_plain_training(moons, ml_params):
    kw = dict(pretrained=ml_params, data=moons.train, flow_cfg=FlowConfig(hidden_features=16),
              hp=TrainConfig(epochs=3, lr=1e-3), seed=5)
    a = lleb.train_two_step(**kw)
    b = lleb.train_regularized(RegularizationConfig(lam=0.0), mode=TWO_STEP, **kw)
    assert a.trace == b.trace
    assert sha(a.sampler.params) == sha(b.sampler.params)


def test_lambda_zero_end_to_end(moons):
    kw = dict(arch=nets.two_moons_mlp(), data=moons.train, flow_cfg=FlowConfig(hidden_features=16),
              hp=TrainConfig(epochs=2), seed=1)
    a = lleb.train_end_to_end(**kw)
    b = lleb.train_regularized(RegularizationConfig(lam=0.0), mode=END_TO_END, **kw)
    assert a.trace == b.trace
    assert sha(a.backbone) == sha(b.backbone)
    assert sha(a.sampler.params) == sha(b.sampler.params)
    assert a.base_last.tobytes() == b.base_last.tobytes()


def test_entropy_term_changes_training(moons, ml_params):
    kw = dict(pretrained=ml_params, data=moons.train, flow_cfg=FlowConfig(hidden_features=16),
              hp=TrainConfig(epochs=2, lr=1e-3), seed=5)
    a = lleb.train_two_step(**kw)
    b = lleb.train_regularized(RegularizationConfig(lam=1.0, entropy_samples=4), mode=TWO_STEP, **kw)
    assert a.trace != b.trace


def test_end_to_end_accuracy_and_spread():
    assert desk_report("lleb_e2e", 0).accuracy >= 0.95
    model = desk_run("lleb_e2e", 0).members[0]
    assert model.mode == END_TO_END
    assert np.all(lleb.sampler_std(model, 100, np.random.default_rng(0)) > 1e-4)


def test_two_step_matches_maximum_likelihood_accuracy():
    data = desk_data(0)
    pre = desk_run("default", 0).members[0]
    ml_acc = accuracy(nets.predict_proba(pre, data.test.features), data.test.labels)
    assert desk_report("lleb", 0).accuracy >= ml_acc - 0.02


@pytest.mark.parametrize("seed", range(5))
def test_training_improves_objective(seed):
    data = desk_data(seed)
    trained = desk_run("lleb", seed).members[0]
    fresh = LLEBModel(trained.arch, trained.backbone, trained.base_last,
                      NeuralSplineFlow.create(trained.arch.split_dim), TWO_STEP)
    batch = (data.train.features, data.train.labels)
    at_init = mc_expected_loglik(fresh, batch, S=10, rng=np.random.default_rng(0)).item()
    after = mc_expected_loglik(trained, batch, S=10, rng=np.random.default_rng(0)).item()
    assert after > at_init


def test_sample_posterior_differs_only_in_last_layer():
    model = desk_run("lleb", 0).members[0]
    vecs = lleb.sample_posterior(model, 2, np.random.default_rng(0)).full_vectors()
    d = model.arch.split_dim
    np.testing.assert_array_equal(vecs[0, :-d], vecs[1, :-d])
    assert np.any(vecs[0, -d:] != vecs[1, -d:])
    a = lleb.sample_posterior(model, 1, np.random.default_rng(3)).full_vectors()
    b = lleb.sample_posterior(model, 1, np.random.default_rng(3)).full_vectors()
    assert a.tobytes() == b.tobytes()


def test_end_to_end_draws_are_offsets_from_base():
    model = desk_run("lleb_e2e", 0).members[0]
    th, _ = model.sampler.sample(3, np.random.default_rng(0))
    s = lleb.sample_posterior(model, 3, np.random.default_rng(0))
    np.testing.assert_array_equal(s.members[0].last_layers, model.base_last + th.data)


def test_predictive_variance_positive_on_grid():
    model = desk_run("lleb", 0).members[0]
    g = np.linspace(-3, 3, 15)
    grid = np.stack(np.meshgrid(g, g), -1).reshape(-1, 2)
    rows = lleb.sample_posterior(model, 10, np.random.default_rng(0)).prob_rows(grid)
    assert np.max(epistemic_variance(rows)) > 0
    assert predictive(rows).shape == (len(grid), 2)


def test_sampler_dimension_checked():
    arch = tiny_arch()
    with pytest.raises(ValueError):
        LLEBModel(arch, {}, np.zeros(arch.split_dim), NeuralSplineFlow.create(3), TWO_STEP)


def test_divergence_is_loud(moons):
    with pytest.raises(nets.TrainingDiverged):
        lleb.train_end_to_end(nets.two_moons_mlp(), moons.train, FlowConfig(hidden_features=8),
                              TrainConfig(epochs=30, lr=5.0, clip_norm=1e6), 0)
