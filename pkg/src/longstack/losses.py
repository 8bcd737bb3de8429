"""Sequence classification losses over per-time-point probability tensors.

Three nested variants: plain categorical cross entropy, a class-weighted
form that rebalances each time point by inverse class frequency, and a
distance-weighted form that additionally scales each term by how far the
predicted class sits from the true one on the ordinal class axis.  The
ordinal factor is treated as a constant during differentiation, so the
gradient of the distance-weighted loss is the class-weighted gradient
scaled per (sample, time) cell.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

LOSS_KINDS = ("cce", "weighted_cce", "dwcce")

LOG_CLIP = 1e-12


class LossError(ValueError):
    pass


@dataclass(frozen=True)
class LossSpec:
    kind: str = "cce"

    def __post_init__(self):
        if self.kind not in LOSS_KINDS:
            raise LossError(f"unknown loss kind {self.kind!r}; expected one of {LOSS_KINDS}")


def class_weights(labels: np.ndarray, n_classes: int) -> np.ndarray:
    """Per-time-point inverse-frequency weights, shape (T, C).

    w[t, c] = N / (C * n[t, c]), and 0 for classes absent at t so their
    (necessarily zero) loss terms stay defined.
    """
    labels = np.asarray(labels, dtype=np.int64)
    if labels.ndim != 2:
        raise LossError("labels must have shape (samples, time points)")
    n, t_count = labels.shape
    counts = np.zeros((t_count, n_classes), dtype=np.float64)
    for t in range(t_count):
        counts[t] = np.bincount(labels[:, t], minlength=n_classes)
    with np.errstate(divide="ignore"):
        weights = np.where(counts > 0, n / (n_classes * np.maximum(counts, 1)), 0.0)
    return weights


def ordinal_weight(probs: np.ndarray, labels: np.ndarray) -> np.ndarray:
    """|argmax(probs) - label| / (C - 1) + 1 per (sample, time); lies in [1, 2]."""
    probs = np.asarray(probs, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    n_classes = probs.shape[-1]
    if n_classes < 2:
        raise LossError("ordinal weighting needs at least two classes")
    predicted = np.argmax(probs, axis=-1)
    return np.abs(predicted - labels) / (n_classes - 1) + 1.0


def _check(probs: np.ndarray, labels: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    probs = np.asarray(probs, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    if probs.ndim != 3:
        raise LossError("probabilities must have shape (samples, time points, classes)")
    if labels.shape != probs.shape[:2]:
        raise LossError("label matrix must match the leading probability axes")
    if labels.size and (labels.min() < 0 or labels.max() >= probs.shape[2]):
        raise LossError("labels out of class range")
    return probs, labels


def _weights_for(spec: LossSpec, probs, labels, cw, ordinal_override):
    n, t_count, n_classes = probs.shape
    if spec.kind == "cce":
        w_class = np.ones((n, t_count))
    else:
        if cw is None:
            cw = class_weights(labels, n_classes)
        cw = np.asarray(cw, dtype=np.float64)
        if cw.shape != (t_count, n_classes):
            raise LossError(f"class weights must have shape ({t_count}, {n_classes})")
        if not np.all(np.isfinite(cw)) or (cw < 0).any():
            raise LossError("class weights must be finite and non-negative")
        w_class = np.take_along_axis(cw[None, :, :].repeat(n, axis=0),
                                     labels[:, :, None], axis=2)[:, :, 0]
    if spec.kind == "dwcce":
        if ordinal_override is not None:
            w_ord = np.asarray(ordinal_override, dtype=np.float64)
            if w_ord.shape != (n, t_count):
                raise LossError("ordinal override must have shape (samples, time points)")
        else:
            w_ord = ordinal_weight(probs, labels)
    else:
        w_ord = np.ones((n, t_count))
    return w_class * w_ord


def loss(spec: LossSpec, probs: np.ndarray, labels: np.ndarray,
         class_weight_table: np.ndarray | None = None,
         ordinal_override: np.ndarray | None = None) -> float:
    """Mean over samples of the summed per-time-point cross-entropy terms.

    `ordinal_override` fixes the ordinal factors explicitly (they are
    constants with respect to the probabilities either way).
    """
    probs, labels = _check(probs, labels)
    w = _weights_for(spec, probs, labels, class_weight_table, ordinal_override)
    true_p = np.take_along_axis(probs, labels[:, :, None], axis=2)[:, :, 0]
    terms = -w * np.log(np.maximum(true_p, LOG_CLIP))
    return float(terms.sum(axis=1).mean())


def loss_grad(spec: LossSpec, probs: np.ndarray, labels: np.ndarray,
              class_weight_table: np.ndarray | None = None,
              ordinal_override: np.ndarray | None = None) -> np.ndarray:
    """d loss / d probs, same shape as probs.

    Cells clipped inside the log contribute zero gradient, matching the
    piecewise-defined loss exactly.
    """
    probs, labels = _check(probs, labels)
    n = probs.shape[0]
    w = _weights_for(spec, probs, labels, class_weight_table, ordinal_override)
    true_p = np.take_along_axis(probs, labels[:, :, None], axis=2)[:, :, 0]
    live = true_p > LOG_CLIP
    cell = np.where(live, -w / np.maximum(true_p, LOG_CLIP), 0.0) / n
    grad = np.zeros_like(probs)
    np.put_along_axis(grad, labels[:, :, None], cell[:, :, None], axis=2)
    return grad
