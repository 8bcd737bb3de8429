"""Small shared numerics and seeding helpers."""

from __future__ import annotations

import hashlib

import numpy as np


def derive_seed(*parts) -> int:
    """Derive a 64-bit seed by stable hashing of task coordinates.

    The same parts always yield the same seed, independent of process,
    platform or hash randomization, so parallel workers can reproduce the
    serial execution bit for bit.
    """
    key = "|".join(repr(p) for p in parts)
    digest = hashlib.sha256(key.encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little")


def format_float(value) -> str:
    """Shortest round-trippable decimal text for a float; accepts numpy scalars."""
    return repr(float(value))


def softmax(z: np.ndarray, axis: int = -1) -> np.ndarray:
    """Numerically stable softmax (max-subtracted) along `axis`."""
    shifted = z - np.max(z, axis=axis, keepdims=True)
    e = np.exp(shifted)
    return e / np.sum(e, axis=axis, keepdims=True)


def one_hot(labels: np.ndarray, n_classes: int) -> np.ndarray:
    """Integer labels of any shape -> one-hot array with a trailing class axis."""
    labels = np.asarray(labels)
    out = np.zeros(labels.shape + (n_classes,), dtype=np.float64)
    np.put_along_axis(out, labels[..., None], 1.0, axis=-1)
    return out


def stratified_folds(labels: np.ndarray, n_folds: int, seed: int) -> np.ndarray:
    """Assign each position a fold in [0, n_folds), balancing every label value
    across folds.  Within each label value the order is a seeded permutation;
    the result depends only on (labels, n_folds, seed)."""
    labels = np.asarray(labels)
    if labels.ndim != 1 or labels.size == 0:
        raise ValueError("labels must be a non-empty vector")
    if n_folds < 2 or n_folds > labels.size:
        raise ValueError("n_folds must be in [2, number of samples]")
    rng = np.random.default_rng(seed)
    assignment = np.empty(labels.size, dtype=np.int64)
    offset = 0
    for value in np.unique(labels):
        members = np.flatnonzero(labels == value)
        members = members[rng.permutation(members.size)]
        # rotate the starting fold between label values so small strata do not
        # all land in fold 0
        assignment[members] = (np.arange(members.size) + offset) % n_folds
        offset += members.size
    return assignment
