"""Behavioral tests for the from-scratch classifiers."""

import numpy as np
import pytest

from longstack import base_predictors as bp
from longstack.base_predictors import (
    ALGORITHMS,
    PredictorError,
    PredictorSpec,
    fit,
    load_model,
    predict_proba,
    save_model,
)
from longstack.harness import macro_f_measure
from longstack.synth import GeneratorConfig, ModalitySpec, generate


def separable_toy(n_per_class: int = 20, seed: int = 3):
    # three well-separated Gaussian blobs in 2-d
    rng = np.random.default_rng(seed)
    centers = np.array([[0.0, 0.0], [6.0, 0.0], [0.0, 6.0]])
    X = np.concatenate(
        [centers[c] + 0.3 * rng.standard_normal((n_per_class, 2)) for c in range(3)]
    )
    y = np.repeat(np.arange(3), n_per_class)
    return X, y


def test_spec_rejects_unknown_algorithm():
    with pytest.raises(PredictorError):
        PredictorSpec(algorithm="svm")


def test_spec_rejects_unknown_hyperparameter():
    with pytest.raises(PredictorError):
        PredictorSpec(algorithm="knn", hyperparameters={"kk": 3})


@pytest.mark.parametrize(
    "algorithm,hp",
    [
        ("knn", {"k": 0}),
        ("multinomial_logistic", {"learning_rate": 0.0}),
        ("multinomial_logistic", {"l2": -1.0}),
        ("random_forest", {"n_trees": 0}),
        ("random_forest", {"min_leaf": 0}),
        ("random_forest", {"max_features": "half"}),
    ],
)
def test_spec_rejects_invalid_values(algorithm, hp):
    with pytest.raises(PredictorError):
        PredictorSpec(algorithm=algorithm, hyperparameters=hp)


def test_spec_merges_defaults_and_round_trips():
    spec = PredictorSpec(algorithm="knn", hyperparameters={"k": 3}, seed=7)
    assert spec.hyperparameters == {"k": 3}
    again = PredictorSpec.from_dict(spec.to_dict())
    assert again == spec
    # defaults are filled in when omitted
    forest = PredictorSpec(algorithm="random_forest")
    assert forest.hyperparameters["n_trees"] >= 1
    assert forest.hyperparameters["min_leaf"] >= 1


def test_fit_rejects_bad_training_input():
    with pytest.raises(PredictorError):
        fit(PredictorSpec("knn"), np.empty((0, 2)), np.empty(0, dtype=int), 3)
    with pytest.raises(PredictorError):
        fit(PredictorSpec("knn"), np.zeros((4, 2)), np.array([0, 1, 2, 3]), 3)
    with pytest.raises(PredictorError):
        fit(PredictorSpec("knn"), np.zeros((4, 2)), np.array([0, 1]), 3)


def test_predict_rejects_feature_mismatch():
    X, y = separable_toy()
    for algorithm in ALGORITHMS:
        model = fit(PredictorSpec(algorithm), X, y, 3)
        with pytest.raises(PredictorError):
            predict_proba(model, X[:, :1])


def test_logistic_reaches_perfect_train_accuracy_on_separable_data():
    X, y = separable_toy()
    model = fit(PredictorSpec("multinomial_logistic"), X, y, 3)
    probs = predict_proba(model, X)
    assert (probs.argmax(axis=1) == y).all()


def test_logistic_with_zero_epochs_is_uniform():
    # zero-initialized weights, never updated
    X, y = separable_toy()
    spec = PredictorSpec("multinomial_logistic", hyperparameters={"epochs": 0})
    probs = predict_proba(fit(spec, X, y, 3), X)
    np.testing.assert_allclose(probs, np.full_like(probs, 1.0 / 3.0), atol=1e-15)


def test_knn_with_k_equal_rows_matches_class_distribution():
    X, y = separable_toy(n_per_class=5)
    spec = PredictorSpec("knn", hyperparameters={"k": len(y)})
    probs = predict_proba(fit(spec, X, y, 3), np.array([[100.0, -50.0], [0.0, 0.0]]))
    expected = np.bincount(y, minlength=3) / len(y)
    np.testing.assert_allclose(probs, np.tile(expected, (2, 1)), atol=1e-15)


def test_knn_k1_memorizes_training_points():
    X = np.array([[0.0, 0.0], [1.0, 0.0], [0.0, 1.0], [2.0, 2.0]])
    y = np.array([0, 1, 1, 2])
    model = fit(PredictorSpec("knn", hyperparameters={"k": 1}), X, y, 3)
    probs = predict_proba(model, X)
    np.testing.assert_array_equal(probs, np.eye(3)[y])
    # the stated single-query case: nearest neighbor carries label 2
    np.testing.assert_array_equal(
        predict_proba(model, np.array([[2.0, 2.0]])), [[0.0, 0.0, 1.0]]
    )


def test_knn_caps_k_at_training_rows():
    X = np.array([[0.0], [1.0]])
    y = np.array([0, 1])
    probs = predict_proba(fit(PredictorSpec("knn", hyperparameters={"k": 50}), X, y, 2),
                          np.array([[0.4]]))
    np.testing.assert_allclose(probs, [[0.5, 0.5]])


def test_knn_prediction_invariant_to_row_order_with_distinct_distances():
    X, y = separable_toy(n_per_class=8, seed=11)
    query = np.array([[1.0, 2.0], [4.0, 1.0]])
    base = predict_proba(fit(PredictorSpec("knn"), X, y, 3), query)
    perm = np.random.default_rng(0).permutation(len(y))
    shuffled = predict_proba(fit(PredictorSpec("knn"), X[perm], y[perm], 3), query)
    np.testing.assert_allclose(shuffled, base, atol=1e-12)


def test_depth_zero_single_tree_is_constant_majority():
    # single-class data makes the bootstrap leaf identical to the train set
    X = np.random.default_rng(0).standard_normal((12, 3))
    y = np.full(12, 1)
    spec = PredictorSpec("random_forest", hyperparameters={"n_trees": 1, "max_depth": 0})
    probs = predict_proba(fit(spec, X, y, 3), np.random.default_rng(1).standard_normal((5, 3)))
    np.testing.assert_array_equal(probs, np.tile([0.0, 1.0, 0.0], (5, 1)))
    # mixed classes: still a constant output, argmax follows the heavy class
    y_mixed = np.zeros(12, dtype=int)
    y_mixed[-1] = 2
    probs = predict_proba(fit(spec, X, y_mixed, 3), X)
    assert (probs == probs[0]).all()
    assert probs[0].argmax() == 0


def test_min_leaf_equal_to_rows_forbids_splits():
    X, y = separable_toy(n_per_class=4)
    spec = PredictorSpec(
        "random_forest",
        hyperparameters={"n_trees": 5, "max_depth": 8, "min_leaf": len(y)},
    )
    probs = predict_proba(fit(spec, X, y, 3), X)
    assert (probs == probs[0]).all()


def test_forest_fits_separable_data_well():
    X, y = separable_toy(n_per_class=25)
    probs = predict_proba(fit(PredictorSpec("random_forest"), X, y, 3), X)
    assert (probs.argmax(axis=1) == y).mean() > 0.95


def test_forest_trees_differ_across_seeds():
    X, y = separable_toy(n_per_class=15, seed=5)
    query = np.random.default_rng(2).standard_normal((40, 2)) * 3.0
    a = predict_proba(fit(PredictorSpec("random_forest", seed=0), X, y, 3), query)
    b = predict_proba(fit(PredictorSpec("random_forest", seed=1), X, y, 3), query)
    assert not np.array_equal(a, b)


@pytest.mark.parametrize("algorithm", ALGORITHMS)
def test_fit_is_deterministic(algorithm):
    X, y = separable_toy(n_per_class=10, seed=9)
    query = np.random.default_rng(4).standard_normal((20, 2)) * 4.0
    spec = PredictorSpec(algorithm, seed=17)
    a = predict_proba(fit(spec, X, y, 3), query)
    b = predict_proba(fit(spec, X, y, 3), query)
    np.testing.assert_array_equal(a, b)


@pytest.mark.parametrize("algorithm", ALGORITHMS)
def test_output_rows_are_probability_vectors(algorithm):
    rng = np.random.default_rng(21)
    for trial in range(5):
        n = int(rng.integers(4, 40))
        d = int(rng.integers(1, 6))
        X = rng.standard_normal((n, d))
        y = rng.integers(0, 4, size=n)
        probs = predict_proba(
            fit(PredictorSpec(algorithm, seed=trial), X, y, 4),
            rng.standard_normal((15, d)),
        )
        assert probs.shape == (15, 4)
        assert probs.min() >= 0.0
        np.testing.assert_allclose(probs.sum(axis=1), 1.0, atol=1e-9)


def test_absent_class_gets_zero_probability_from_knn_and_forest():
    X, y = separable_toy(n_per_class=10)
    y = np.where(y == 2, 1, y)  # class 2 never observed
    for algorithm in ("knn", "random_forest"):
        probs = predict_proba(fit(PredictorSpec(algorithm), X, y, 3), X)
        assert probs[:, 2].max() == 0.0
    probs = predict_proba(fit(PredictorSpec("multinomial_logistic"), X, y, 3), X)
    assert probs.shape == (len(y), 3)
    np.testing.assert_allclose(probs.sum(axis=1), 1.0, atol=1e-9)


def test_forest_separates_signal_from_noise_modality():
    config = GeneratorConfig(
        n_samples=180,
        modality_specs=(
            ModalitySpec("signal", 5, signal_fraction=1.0, noise_scale=0.6),
            ModalitySpec("noise", 5, signal_fraction=0.0, noise_scale=0.6),
        ),
        target_proportions=np.array([[0.5, 0.5, 0.0], [0.35, 0.45, 0.2]]),
        time_point_count=2,
        seed=13,
    )
    cohort = generate(config)
    y = cohort.labels.labels[:, 0]
    train, test = np.arange(120), np.arange(120, 180)
    scores = {}
    for name in ("signal", "noise"):
        X = cohort.modality(name).values[:, 0, :]
        model = fit(PredictorSpec("random_forest"), X[train], y[train], 3)
        pred = predict_proba(model, X[test]).argmax(axis=1)
        scores[name] = macro_f_measure(y[test], pred, 3)
    assert scores["signal"] - scores["noise"] > 0.1


def test_fit_counter_tracks_every_fit():
    bp.reset_fit_counter()
    X, y = separable_toy(n_per_class=4)
    for algorithm in ALGORITHMS:
        fit(PredictorSpec(algorithm), X, y, 3)
    assert bp.FIT_CALLS == 3
    bp.reset_fit_counter()
    assert bp.FIT_CALLS == 0


@pytest.mark.parametrize("algorithm", ALGORITHMS)
def test_model_round_trips_through_disk(tmp_path, algorithm):
    X, y = separable_toy(n_per_class=6)
    model = fit(PredictorSpec(algorithm, seed=3), X, y, 3)
    path = tmp_path / "model.bin"
    save_model(model, path)
    loaded = load_model(path)
    query = np.random.default_rng(8).standard_normal((10, 2))
    np.testing.assert_array_equal(predict_proba(loaded, query), predict_proba(model, query))


def test_load_rejects_wrong_container_version(tmp_path, monkeypatch):
    X, y = separable_toy(n_per_class=4)
    model = fit(PredictorSpec("knn"), X, y, 3)
    path = tmp_path / "model.bin"
    monkeypatch.setattr(bp, "MODEL_FORMAT_VERSION", 99)
    save_model(model, path)
    monkeypatch.undo()
    with pytest.raises(PredictorError):
        load_model(path)
