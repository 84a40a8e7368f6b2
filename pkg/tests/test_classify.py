import math

import numpy as np
import pytest
from scipy.stats import norm

from lle_fmri.classify import (ClassifierError, LdaModel, SelectionResult, flatten_volumes,
                               lda_fit, lda_predict, sfs_select, stack_features)


def _log_density_gap(model, z):
    sd = np.sqrt(model.variances)
    l1 = norm.logpdf(z, model.means[1], sd).sum() + math.log(model.priors[1])
    l0 = norm.logpdf(z, model.means[0], sd).sum() + math.log(model.priors[0])
    return l1 - l0


@pytest.mark.parametrize("seed", range(10))
def test_gap_matches_log_density(seed):
    rng = np.random.default_rng(seed)
    X = rng.normal(size=(9, 4))
    y = np.array([0, 0, 0, 0, 0, 1, 1, 1, 1])
    model = lda_fit(X, y)
    z = rng.normal(size=4)
    label, gap = lda_predict(model, z)
    assert gap == pytest.approx(_log_density_gap(model, z), abs=1e-10)
    assert label == int(gap > 1e-12)


def test_fit_by_hand():
    X = np.array([[0.0], [2.0], [4.0], [8.0]])
    model = lda_fit(X, [0, 0, 1, 1])
    assert np.array_equal(model.means, [[1.0], [6.0]])
    # pooled SS = 2 + 8, divided by n - 2 = 2
    assert model.variances[0] == pytest.approx(5.0)
    assert np.array_equal(model.priors, [0.5, 0.5])


def test_variance_floor_and_tie():
    model = lda_fit(np.ones((4, 2)), [0, 1, 0, 1])
    assert np.all(model.variances == 1e-12)
    label, gap = lda_predict(model, np.ones(2))
    assert gap == 0.0 and label == 0


def test_fit_errors():
    with pytest.raises(ClassifierError):
        lda_fit(np.zeros((3, 2)), [1, 1, 1])
    with pytest.raises(ClassifierError):
        lda_fit(np.zeros((3, 2)), [0, 1])
    with pytest.raises(ClassifierError):
        lda_fit(np.zeros((3, 2)), [0, 1, 2])
    model = lda_fit(np.random.default_rng(0).normal(size=(4, 3)), [0, 0, 1, 1])
    with pytest.raises(ClassifierError):
        lda_predict(model, np.zeros(2))


def test_flatten_volumes_order():
    modes = np.arange(12.0).reshape(4, 3)  # V=4, d=3
    out = flatten_volumes(modes, [2, 0])
    assert np.array_equal(out, np.concatenate([modes[:, 0], modes[:, 2]]))
    with pytest.raises(ClassifierError):
        flatten_volumes(modes, [1, 1])
    with pytest.raises(ClassifierError):
        flatten_volumes(modes, [3])


def test_stack_features_matches_flatten():
    stack = np.random.default_rng(1).normal(size=(5, 6, 4))
    F = stack_features(stack, [3, 1])
    for k in range(5):
        assert np.array_equal(F[k], flatten_volumes(stack[k], [1, 3]))


def test_selection_text_roundtrip():
    sel = SelectionResult([4, 1], [0.75, 0.9], d=6)
    back = SelectionResult.from_text(sel.to_text())
    assert back == sel
    assert back.accuracy == 0.9
    with pytest.raises(ValueError):
        SelectionResult.from_text("nothing here\n")


def _planted_stack(seed, n_per=10, V=125, d=10, vol=None, effect=2.0):
    rng = np.random.default_rng(seed)
    vol = int(rng.integers(d)) if vol is None else vol
    stack = rng.normal(size=(2 * n_per, V, d))
    y = np.array([1] * n_per + [0] * n_per)
    stack[y == 1, :, vol] += effect
    return stack, y, vol


def test_sfs_recovers_planted_volume():
    stack, y, vol = _planted_stack(3)
    sel = sfs_select(stack, y)
    assert sel.volumes[0] == vol
    assert sel.d == 10
    assert all(b > a for a, b in zip(sel.trace, sel.trace[1:]))


def test_sfs_tie_goes_to_lowest_index_and_stops():
    calls = []

    def evaluator(features, labels):
        calls.append(features.shape[1])
        return 0.5  # every candidate ties, no round improves

    stack = np.zeros((4, 2, 3))
    sel = sfs_select(stack, [0, 0, 1, 1], evaluator=evaluator)
    assert sel.volumes == [0]
    assert sel.trace == [0.5]


def test_sfs_requires_a_full_subject_of_improvement():
    scores = {(0,): 0.5, (0, 1): 0.5 + 0.4 / 10, (0, 2): 0.6}

    def evaluator(features, labels):
        return scores.get(tuple(features[0].astype(int)), 0.0)

    stack = np.zeros((10, 1, 3))
    stack[:, 0, :] = np.arange(3)
    sel = sfs_select(stack, [0] * 5 + [1] * 5, evaluator=evaluator)
    assert sel.volumes == [0, 2]
    assert sel.trace == [0.5, 0.6]


def test_sfs_candidates_restrict_pool():
    stack, y, _ = _planted_stack(4, vol=7)
    sel = sfs_select(stack, y, candidates=[1, 2, 3])
    assert set(sel.volumes) <= {1, 2, 3}


def test_model_predict_vectorised():
    model = LdaModel(np.array([[0.0], [1.0]]), np.array([1.0]), np.array([0.5, 0.5]))
    assert list(model.predict(np.array([[-1.0], [0.5], [2.0]]))) == [0, 0, 1]
