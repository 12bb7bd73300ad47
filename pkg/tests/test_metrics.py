import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from llebkit import nets
from llebkit.data import Dataset
from llebkit.metrics import (EvalReport, Member, PosteriorSamples, accuracy, auroc, ece, epistemic_variance,
                             evaluate_method, predictive)

from conftest import tiny_arch


def brute_auroc(a, b):
    tot = 0.0
    for x, y in itertools.product(a, b):
        tot += 1.0 if y > x else 0.5 if y == x else 0.0
    return tot / (len(a) * len(b))


def brute_ece(probs, labels, bins):
    conf = probs.max(1)
    corr = probs.argmax(1) == labels
    out = 0.0
    for b in range(bins):
        lo, hi = b / bins, (b + 1) / bins
        sel = (conf > lo) & (conf <= hi)
        if sel.any():
            out += sel.mean() * abs(corr[sel].mean() - conf[sel].mean())
    return out


def test_predictive_examples():
    np.testing.assert_array_equal(predictive([[1, 0], [0, 1]]), [0.5, 0.5])
    np.testing.assert_array_equal(predictive([[0.3, 0.7]]), [0.3, 0.7])
    np.testing.assert_allclose(predictive([[0.6, 0.4], [0.8, 0.2]]), [0.7, 0.3], atol=1e-15)
    with pytest.raises(ValueError):
        predictive([[0.6, 0.6]])


def test_accuracy_examples():
    assert accuracy(np.eye(3), [0, 1, 2]) == 1.0
    assert accuracy(np.eye(2)[[0, 1, 0, 1]], [0, 1, 0, 0]) == 0.75
    assert accuracy([[0.5, 0.5]], [0]) == 1.0


def test_ece_examples(rng):
    assert ece(np.eye(2)[[0, 1, 1]], [0, 1, 1]) == 0.0
    probs = np.tile([0.8, 0.2], (10, 1))
    labels = np.array([0] * 5 + [1] * 5)
    assert abs(ece(probs, labels) - 0.3) < 1e-12
    n = 100_000
    p1 = rng.uniform(0, 1, n)
    probs = np.stack([1 - p1, p1], 1)
    labels = (rng.uniform(0, 1, n) < p1).astype(int)
    assert ece(probs, labels) < 0.01


def test_ece_matches_brute_force(rng):
    for _ in range(20):
        logits = rng.normal(size=(200, 4)) * 2
        probs = nets.softmax_np(logits)
        labels = rng.integers(0, 4, 200)
        assert abs(ece(probs, labels) - brute_ece(probs, labels, 15)) < 1e-12


def test_epistemic_variance_examples():
    assert epistemic_variance([[0.2, 0.8], [0.2, 0.8]]) == 0.0
    assert epistemic_variance([[1, 0], [0, 1]]) == 0.5
    assert epistemic_variance([[0.3, 0.7]]) == 0.0


def test_auroc_examples():
    assert auroc([0.1, 0.2], [0.3, 0.4]) == 1.0
    assert auroc([0.1, 0.3], [0.2, 0.4]) == 0.75
    v = [0.5, 0.1, 0.9]
    assert auroc(v, v) == 0.5
    with pytest.raises(ValueError):
        auroc([], [1.0])


@settings(max_examples=100, deadline=None)
@given(arrays(np.float64, st.integers(1, 15), elements=st.sampled_from([0.0, 0.1, 0.2, 0.5, 1.0, 3.0])),
       arrays(np.float64, st.integers(1, 15), elements=st.sampled_from([0.0, 0.1, 0.2, 0.5, 1.0, 3.0])))
def test_auroc_matches_enumeration_and_is_antisymmetric(a, b):
    assert auroc(a, b) == brute_auroc(a, b)
    assert auroc(a, b) + auroc(b, a) == 1.0


# scores on a 1/8 grid keep both transforms strictly increasing in floating point
grid_scores = arrays(np.float64, st.integers(1, 20), elements=st.integers(-40, 40).map(lambda k: k / 8))


@settings(max_examples=100, deadline=None)
@given(grid_scores, grid_scores)
def test_auroc_monotone_invariance(a, b):
    assert auroc(np.exp(a), np.exp(b)) == auroc(a, b)
    assert auroc(a ** 3 + 2 * a, b ** 3 + 2 * b) == auroc(a, b)


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 8), st.integers(2, 5), st.integers(0, 1000))
def test_variance_class_permutation_invariant(S, C, seed):
    rng = np.random.default_rng(seed)
    rows = nets.softmax_np(rng.normal(size=(S, C)))
    perm = rng.permutation(C)
    assert abs(epistemic_variance(rows) - epistemic_variance(rows[:, perm])) < 1e-15


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 8), st.integers(0, 1000))
def test_predictive_permutation_equivariant(S, seed):
    rng = np.random.default_rng(seed)
    rows = nets.softmax_np(rng.normal(size=(S, 5, 3)))
    perm = rng.permutation(S)
    np.testing.assert_allclose(predictive(rows), predictive(rows[perm]), atol=1e-15)
    np.testing.assert_allclose(predictive(rows).sum(-1), 1.0, atol=1e-9)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 1000))
def test_ece_shuffle_invariant(seed):
    rng = np.random.default_rng(seed)
    probs = nets.softmax_np(rng.normal(size=(50, 3)))
    labels = rng.integers(0, 3, 50)
    perm = rng.permutation(50)
    assert abs(ece(probs, labels) - ece(probs[perm], labels[perm])) < 1e-15


def _toy(rng):
    arch = tiny_arch()
    p = nets.init_params(arch, rng)
    test = Dataset(rng.normal(size=(30, 2)), rng.integers(0, 2, 30))
    ood = Dataset(rng.normal(size=(20, 2)) + 5, np.zeros(20, int))
    return p, test, ood


def test_point_mass_report(rng):
    p, test, ood = _toy(rng)
    r = evaluate_method(PosteriorSamples([Member(p)]), test, ood, method="default")
    assert r.auroc is None and not r.auroc_applicable
    assert np.all(r.test_scores == 0) and np.all(r.ood_scores == 0)
    # with the scores it would have produced, the tie rule gives one half
    assert auroc(r.test_scores, r.ood_scores) == 0.5
    rec = r.to_record()
    assert rec["auroc"] is None and rec["auroc_applicable"] is False


def test_duplicate_samples_same_accuracy(rng):
    p, test, ood = _toy(rng)
    single = evaluate_method(PosteriorSamples([Member(p)]), test, ood)
    dup = evaluate_method(PosteriorSamples([Member(p), Member(p), Member(p)]), test, ood)
    assert single.accuracy == dup.accuracy
    assert dup.auroc == 0.5


def test_report_invariants_and_round_trip(rng):
    p, test, ood = _toy(rng)
    lasts = p.flatten_last() + rng.normal(size=(5, p.split_dim))
    r = evaluate_method(PosteriorSamples([Member(p, lasts)]), test, ood, method="x", seed=3)
    assert 0 <= r.accuracy <= 1 and r.ece >= 0 and 0 <= r.auroc <= 1
    back = EvalReport.from_record(r.to_record())
    assert back.to_record() == r.to_record()


def test_posterior_samples_validation(rng):
    with pytest.raises(ValueError):
        PosteriorSamples([])
    a = nets.init_params(tiny_arch(h=3), rng)
    b = nets.init_params(tiny_arch(h=4), rng)
    with pytest.raises(ValueError):
        PosteriorSamples([Member(a), Member(b)])


def test_full_vectors_layout(rng):
    p = nets.init_params(tiny_arch(), rng)
    lasts = rng.normal(size=(2, p.split_dim))
    v = PosteriorSamples([Member(p, lasts)]).full_vectors()
    assert v.shape == (2, sum(t.size for t in p.tensors.values()))
    np.testing.assert_array_equal(v[:, -p.split_dim:], lasts)
