"""Per-modality probabilistic classifiers, implemented from first principles.

Three families behind one interface: k-nearest-neighbors, multinomial
logistic regression (full-batch gradient descent on softmax cross entropy
with L2), and a random forest (Gini splits at midpoints, seeded bootstrap
and feature subsampling).  Everything is deterministic given (spec, X, y);
further families (e.g. margin or boosted models) plug in behind the same
spec/fit/predict_proba surface.

All models emit row-stochastic class-probability matrices over a fixed
class count supplied at fit time, so classes absent from a training fold
legitimately receive probability zero from knn and forests.
"""

from __future__ import annotations

import pickle
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .util import derive_seed, softmax

ALGORITHMS = ("knn", "multinomial_logistic", "random_forest")

_HYPERPARAMETER_SCHEMA = {
    "knn": {"k": 5},
    "multinomial_logistic": {"learning_rate": 0.1, "epochs": 500, "l2": 1e-4},
    "random_forest": {"n_trees": 25, "max_depth": 6, "min_leaf": 2, "max_features": "sqrt"},
}

MODEL_FORMAT_VERSION = 1

# Instrumentation: number of fit() calls since process start (or last reset).
FIT_CALLS = 0


def reset_fit_counter() -> None:
    global FIT_CALLS
    FIT_CALLS = 0


class PredictorError(ValueError):
    pass


@dataclass(frozen=True)
class PredictorSpec:
    algorithm: str
    hyperparameters: dict = field(default_factory=dict)
    seed: int = 0

    def __post_init__(self):
        if self.algorithm not in ALGORITHMS:
            raise PredictorError(f"unknown algorithm {self.algorithm!r}; expected one of {ALGORITHMS}")
        schema = _HYPERPARAMETER_SCHEMA[self.algorithm]
        unknown = set(self.hyperparameters) - set(schema)
        if unknown:
            raise PredictorError(f"{self.algorithm}: unknown hyperparameters {sorted(unknown)}")
        merged = {**schema, **self.hyperparameters}
        self._check(merged)
        object.__setattr__(self, "hyperparameters", merged)

    def _check(self, hp: dict) -> None:
        if self.algorithm == "knn" and hp["k"] < 1:
            raise PredictorError("knn: k must be >= 1")
        if self.algorithm == "multinomial_logistic":
            if hp["learning_rate"] <= 0 or hp["epochs"] < 0 or hp["l2"] < 0:
                raise PredictorError("multinomial_logistic: invalid hyperparameters")
        if self.algorithm == "random_forest":
            if hp["n_trees"] < 1 or hp["max_depth"] < 0 or hp["min_leaf"] < 1:
                raise PredictorError("random_forest: invalid hyperparameters")
            mf = hp["max_features"]
            if not (mf in ("sqrt", "all") or (isinstance(mf, int) and mf >= 1)):
                raise PredictorError("random_forest: max_features must be 'sqrt', 'all' or int >= 1")

    def to_dict(self) -> dict:
        return {"algorithm": self.algorithm, "hyperparameters": dict(self.hyperparameters),
                "seed": self.seed}

    @classmethod
    def from_dict(cls, d: dict) -> "PredictorSpec":
        return cls(algorithm=d["algorithm"], hyperparameters=dict(d.get("hyperparameters", {})),
                   seed=d.get("seed", 0))


def _validate_training(X: np.ndarray, y: np.ndarray, n_classes: int) -> tuple[np.ndarray, np.ndarray]:
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.int64)
    if X.ndim != 2 or X.shape[0] == 0:
        raise PredictorError("training matrix must be non-empty and 2-d")
    if y.shape != (X.shape[0],):
        raise PredictorError("label vector length must match row count")
    if y.size and (y.min() < 0 or y.max() >= n_classes):
        raise PredictorError(f"labels must lie in [0, {n_classes - 1}]")
    return X, y


class KnnClassifier:
    """Stores the training set; predicts neighbor class frequencies."""

    def __init__(self, spec: PredictorSpec, X, y, n_classes):
        self.spec = spec
        self.X = X
        self.y = y
        self.n_classes = n_classes
        self.n_features = X.shape[1]

    def predict_proba(self, X: np.ndarray) -> np.ndarray:
        X = _check_features(X, self.n_features)
        k = min(self.spec.hyperparameters["k"], self.X.shape[0])
        d2 = (np.sum(X ** 2, axis=1)[:, None] - 2.0 * X @ self.X.T
              + np.sum(self.X ** 2, axis=1)[None, :])
        neighbors = np.argsort(d2, axis=1, kind="stable")[:, :k]
        probs = np.zeros((X.shape[0], self.n_classes))
        for c in range(self.n_classes):
            probs[:, c] = (self.y[neighbors] == c).mean(axis=1)
        return probs


class LogisticClassifier:
    """Multinomial logistic regression, full-batch gradient descent from zero init."""

    def __init__(self, spec: PredictorSpec, X, y, n_classes):
        hp = spec.hyperparameters
        self.spec = spec
        self.n_classes = n_classes
        self.n_features = X.shape[1]
        self.W = np.zeros((self.n_features, n_classes))
        self.b = np.zeros(n_classes)
        n = X.shape[0]
        onehot = np.zeros((n, n_classes))
        onehot[np.arange(n), y] = 1.0
        for _ in range(hp["epochs"]):
            probs = softmax(X @ self.W + self.b)
            grad = (probs - onehot) / n
            self.W -= hp["learning_rate"] * (X.T @ grad + hp["l2"] * self.W)
            self.b -= hp["learning_rate"] * grad.sum(axis=0)

    def predict_proba(self, X: np.ndarray) -> np.ndarray:
        X = _check_features(X, self.n_features)
        return softmax(X @ self.W + self.b)


@dataclass
class _TreeNode:
    # leaf: distribution set; internal: feature/threshold/children set
    distribution: np.ndarray | None = None
    feature: int = -1
    threshold: float = 0.0
    left: "._TreeNode | None" = None
    right: "._TreeNode | None" = None


def _gini_best_split(X, onehot, feature_ids, min_leaf):
    """Best (feature, threshold) over candidate features; splits at midpoints
    of consecutive distinct sorted values.  Ties keep the lowest feature
    index, then the lowest threshold.  Vectorized over all candidates."""
    n = X.shape[0]
    sub = X[:, feature_ids]
    order = np.argsort(sub, axis=0, kind="stable")
    xs = np.take_along_axis(sub, order, axis=0)
    cum = np.cumsum(onehot[order], axis=0)  # (n, m, C)
    left_n = np.arange(1, n, dtype=np.float64)[:, None]
    right_n = n - left_n
    valid = (xs[1:] > xs[:-1]) & (left_n >= min_leaf) & (right_n >= min_leaf)
    if not valid.any():
        return None
    left_counts = cum[:-1]
    right_counts = cum[-1][None, :, :] - left_counts
    gini_left = 1.0 - np.sum(left_counts ** 2, axis=2) / left_n ** 2
    gini_right = 1.0 - np.sum(right_counts ** 2, axis=2) / right_n ** 2
    weighted = np.where(valid, (left_n * gini_left + right_n * gini_right) / n, np.inf)
    # feature-major argmin realizes the declared tie order exactly
    flat = int(np.argmin(weighted.T))
    col, i = divmod(flat, n - 1)
    threshold = 0.5 * (xs[i, col] + xs[i + 1, col])
    return int(feature_ids[col]), float(threshold)


def _grow_tree(X, onehot, depth, hp, n_features_split, rng) -> _TreeNode:
    counts = onehot.sum(axis=0)
    if (depth >= hp["max_depth"] or X.shape[0] < 2 * hp["min_leaf"]
            or np.count_nonzero(counts) <= 1):
        return _TreeNode(distribution=counts / counts.sum())
    chosen = rng.choice(X.shape[1], size=n_features_split, replace=False)
    best = _gini_best_split(X, onehot, np.sort(chosen), hp["min_leaf"])
    if best is None:
        return _TreeNode(distribution=counts / counts.sum())
    feature, threshold = best
    go_left = X[:, feature] < threshold
    left = _grow_tree(X[go_left], onehot[go_left], depth + 1, hp, n_features_split, rng)
    right = _grow_tree(X[~go_left], onehot[~go_left], depth + 1, hp, n_features_split, rng)
    return _TreeNode(feature=feature, threshold=threshold, left=left, right=right)


def _tree_proba(node: _TreeNode, X: np.ndarray, out: np.ndarray, rows: np.ndarray) -> None:
    if node.distribution is not None:
        out[rows] += node.distribution
        return
    go_left = X[rows, node.feature] < node.threshold
    if go_left.any():
        _tree_proba(node.left, X, out, rows[go_left])
    if (~go_left).any():
        _tree_proba(node.right, X, out, rows[~go_left])


class RandomForestClassifier:
    """Bagged Gini trees with per-node feature subsampling."""

    def __init__(self, spec: PredictorSpec, X, y, n_classes):
        hp = spec.hyperparameters
        self.spec = spec
        self.n_classes = n_classes
        self.n_features = X.shape[1]
        if hp["max_features"] == "sqrt":
            m = max(1, int(round(np.sqrt(self.n_features))))
        elif hp["max_features"] == "all":
            m = self.n_features
        else:
            m = min(hp["max_features"], self.n_features)
        self.trees = []
        n = X.shape[0]
        onehot = np.zeros((n, n_classes))
        onehot[np.arange(n), y] = 1.0
        for i in range(hp["n_trees"]):
            rng = np.random.default_rng(derive_seed(spec.seed, "tree", i))
            sample = rng.integers(0, n, size=n)
            self.trees.append(_grow_tree(X[sample], onehot[sample], 0, hp, m, rng))

    def predict_proba(self, X: np.ndarray) -> np.ndarray:
        X = _check_features(X, self.n_features)
        probs = np.zeros((X.shape[0], self.n_classes))
        rows = np.arange(X.shape[0])
        for tree in self.trees:
            _tree_proba(tree, X, probs, rows)
        return probs / len(self.trees)


_FAMILIES = {
    "knn": KnnClassifier,
    "multinomial_logistic": LogisticClassifier,
    "random_forest": RandomForestClassifier,
}


def _check_features(X: np.ndarray, n_features: int) -> np.ndarray:
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2 or X.shape[1] != n_features:
        raise PredictorError(f"expected {n_features} feature columns, got shape {X.shape}")
    return X


def fit(spec: PredictorSpec, X: np.ndarray, y: np.ndarray, n_classes: int):
    """Train one base predictor; deterministic given (spec, X, y)."""
    global FIT_CALLS
    X, y = _validate_training(X, y, n_classes)
    FIT_CALLS += 1
    return _FAMILIES[spec.algorithm](spec, X, y, n_classes)


def predict_proba(model, X: np.ndarray) -> np.ndarray:
    return model.predict_proba(X)


def save_model(model, path) -> None:
    """Versioned binary container for fitted predictors."""
    payload = {"format_version": MODEL_FORMAT_VERSION, "model": model}
    Path(path).write_bytes(pickle.dumps(payload))


def load_model(path):
    payload = pickle.loads(Path(path).read_bytes())
    version = payload.get("format_version")
    if version != MODEL_FORMAT_VERSION:
        raise PredictorError(f"unsupported model container version {version!r}")
    return payload["model"]
