"""Base-prediction tensor assembly for the two generation regimes.

A base-prediction tensor holds, for every (sample, time point), the class
probabilities emitted by each (modality, algorithm) pair, concatenated into
one feature row for the sequence stacker.  Training tensors are built from
inner-fold out-of-fold predictions so the stacker never sees a prediction
made by a model that trained on that sample; test tensors come from models
refit on the full training split (the bank).

Two regimes:

- time_dependent: a separate model per (time point, modality, algorithm),
  trained on that time point's rows only.  Bank size T*M*A.
- time_distributed: one model per (modality, algorithm), trained on rows
  from all time points stacked together with an appended numeric
  time-index feature.  Bank size M*A, a factor of T fewer, and the
  predictions at all time points share one decision function.

Inner folds are keyed by sample id, so in the time-distributed regime all
T rows of a sample stay on one side of every split.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import base_predictors as bp
from .base_predictors import PredictorSpec
from .cohort import LongitudinalCohort
from .util import derive_seed, format_float, stratified_folds

REGIMES = ("time_dependent", "time_distributed")


class TensorError(ValueError):
    pass


@dataclass
class BasePredictionTensor:
    values: np.ndarray  # (sample, time, modality * algorithm * class)
    columns: tuple  # ordered (modality, algorithm, class_name) per column
    sample_ids: tuple
    time_point_names: tuple
    # populated on training tensors only; lets callers audit the splits
    inner_assignment: dict | None = None
    fold_train_ids: dict | None = None

    def validate(self) -> None:
        n, t_count, width = self.values.shape
        if width != len(self.columns):
            raise TensorError("column metadata does not match tensor width")
        if n != len(self.sample_ids) or t_count != len(self.time_point_names):
            raise TensorError("axis metadata does not match tensor shape")
        if n == 0:
            return
        if not np.isfinite(self.values).all():
            raise TensorError("tensor contains non-finite values")
        for start, stop in _block_ranges(self.columns):
            sums = self.values[:, :, start:stop].sum(axis=2)
            if np.abs(sums - 1.0).max() > 1e-6:
                raise TensorError(
                    f"probability block {self.columns[start][:2]} rows do not sum to 1")

    def block_columns(self, modality: str, algorithm: str) -> list[int]:
        return [i for i, (m, a, _) in enumerate(self.columns)
                if m == modality and a == algorithm]


@dataclass
class FittedBpBank:
    regime: str
    models: dict  # time_dependent: (time, modality, algorithm) -> model; else (modality, algorithm)
    modality_names: tuple
    modality_widths: dict
    algorithm_names: tuple
    class_names: tuple
    time_point_names: tuple
    absent_classes: list = field(default_factory=list)

    @property
    def model_count(self) -> int:
        return len(self.models)

    def validate(self) -> None:
        m, a = len(self.modality_names), len(self.algorithm_names)
        expected = m * a * len(self.time_point_names) if self.regime == "time_dependent" else m * a
        if self.model_count != expected:
            raise TensorError(f"bank holds {self.model_count} models, expected {expected}")


def algorithm_labels(specs: list[PredictorSpec]) -> list[str]:
    """One label per spec; duplicate algorithm families get .2, .3 suffixes."""
    seen: dict[str, int] = {}
    labels = []
    for spec in specs:
        seen[spec.algorithm] = seen.get(spec.algorithm, 0) + 1
        k = seen[spec.algorithm]
        labels.append(spec.algorithm if k == 1 else f"{spec.algorithm}.{k}")
    return labels


def _block_ranges(columns) -> list[tuple[int, int]]:
    ranges = []
    start = 0
    for i in range(1, len(columns) + 1):
        if i == len(columns) or columns[i][:2] != columns[start][:2]:
            ranges.append((start, i))
            start = i
    return ranges


def _build_columns(cohort: LongitudinalCohort, labels: list[str]) -> tuple:
    return tuple((mod.name, alg, cls)
                 for mod in cohort.modalities
                 for alg in labels
                 for cls in cohort.labels.class_names)


def _require_complete(cohort: LongitudinalCohort) -> None:
    for mod in cohort.modalities:
        if not mod.mask.all():
            raise TensorError(
                f"modality {mod.name!r} has missing values; impute before generating predictions")


def _resolve_assignment(cohort, inner_folds, seed, inner_assignment):
    ids = list(cohort.sample_ids)
    if inner_assignment is not None:
        if set(inner_assignment) != set(ids):
            raise TensorError("inner assignment does not cover the cohort's samples")
        fold_vec = np.array([inner_assignment[s] for s in ids], dtype=np.int64)
        n_folds = int(fold_vec.max()) + 1
    else:
        # stratify on the label at the latest input visit
        strat = cohort.labels.labels[:, cohort.n_times - 1]
        fold_vec = stratified_folds(strat, inner_folds, derive_seed(seed, "inner-folds"))
        n_folds = inner_folds
    assignment = {s: int(f) for s, f in zip(ids, fold_vec)}
    fold_train_ids = {f: tuple(s for s, g in zip(ids, fold_vec) if g != f)
                      for f in range(n_folds)}
    return fold_vec, n_folds, assignment, fold_train_ids


def _record_absent(events, labels_vec, class_names, time_name, fold_label):
    present = np.bincount(labels_vec, minlength=len(class_names)) > 0
    for c in np.flatnonzero(~present):
        events.append({"time_point": time_name, "fold": fold_label,
                       "class_name": class_names[c]})


def generate_time_dependent(train: LongitudinalCohort, specs: list[PredictorSpec],
                            inner_folds: int = 5, seed: int = 0,
                            inner_assignment: dict | None = None
                            ) -> tuple[BasePredictionTensor, FittedBpBank]:
    """Per (time, modality, algorithm): out-of-fold training predictions plus a
    full-train refit for the bank.  Labels are the same-visit labels."""
    _require_complete(train)
    labels = train.labels.labels
    class_names = tuple(train.labels.class_names)
    n, t_count, c_count = train.n_samples, train.n_times, train.n_classes
    alg_labels = algorithm_labels(specs)
    columns = _build_columns(train, alg_labels)
    fold_vec, n_folds, assignment, fold_train_ids = _resolve_assignment(
        train, inner_folds, seed, inner_assignment)
    values = np.empty((n, t_count, len(columns)))
    models = {}
    events: list = []
    col = 0
    for mod in train.modalities:
        for spec, alg in zip(specs, alg_labels):
            block = slice(col, col + c_count)
            for t in range(t_count):
                x = mod.values[:, t, :]
                y = labels[:, t]
                time_name = train.time_point_names[t]
                for f in range(n_folds):
                    rows = fold_vec == f
                    task_spec = replace(spec, seed=derive_seed(seed, "bp", t, mod.name, alg, f))
                    _record_absent(events, y[~rows], class_names, time_name, f)
                    model = bp.fit(task_spec, x[~rows], y[~rows], c_count)
                    if rows.any():
                        values[rows, t, block] = bp.predict_proba(model, x[rows])
                final_spec = replace(spec, seed=derive_seed(seed, "bp", t, mod.name, alg, "final"))
                _record_absent(events, y, class_names, time_name, "final")
                models[(t, mod.name, alg)] = bp.fit(final_spec, x, y, c_count)
            col += c_count
    tensor = BasePredictionTensor(values=values, columns=columns,
                                  sample_ids=tuple(train.sample_ids),
                                  time_point_names=tuple(train.time_point_names),
                                  inner_assignment=assignment,
                                  fold_train_ids=fold_train_ids)
    bank = FittedBpBank(regime="time_dependent", models=models,
                        modality_names=tuple(m.name for m in train.modalities),
                        modality_widths={m.name: m.n_features for m in train.modalities},
                        algorithm_names=tuple(alg_labels), class_names=class_names,
                        time_point_names=tuple(train.time_point_names),
                        absent_classes=events)
    tensor.validate()
    bank.validate()
    return tensor, bank


def _time_feature(t_count: int) -> np.ndarray:
    """Standardized 0..T-1 index; the stacked train matrix holds each index
    equally often, so these constants equal the empirical scaling exactly."""
    idx = np.arange(t_count, dtype=np.float64)
    scale = np.sqrt((t_count ** 2 - 1) / 12.0) if t_count > 1 else 1.0
    return (idx - (t_count - 1) / 2.0) / scale


def _stack_rows(block_values: np.ndarray) -> np.ndarray:
    """(N, T, F) -> (T*N, F+1) with the time-index feature appended, time-major."""
    n, t_count, width = block_values.shape
    flat = block_values.transpose(1, 0, 2).reshape(t_count * n, width)
    time_col = np.repeat(_time_feature(t_count), n)
    return np.concatenate([flat, time_col[:, None]], axis=1)


def generate_time_distributed(train: LongitudinalCohort, specs: list[PredictorSpec],
                              inner_folds: int = 5, seed: int = 0,
                              inner_assignment: dict | None = None
                              ) -> tuple[BasePredictionTensor, FittedBpBank]:
    """One model per (modality, algorithm) trained on rows from every time
    point; sample-keyed folds keep all of a sample's rows together."""
    _require_complete(train)
    labels = train.labels.labels
    class_names = tuple(train.labels.class_names)
    n, t_count, c_count = train.n_samples, train.n_times, train.n_classes
    alg_labels = algorithm_labels(specs)
    columns = _build_columns(train, alg_labels)
    fold_vec, n_folds, assignment, fold_train_ids = _resolve_assignment(
        train, inner_folds, seed, inner_assignment)
    y_stack = labels[:, :t_count].T.reshape(-1)  # time-major to match _stack_rows
    row_folds = np.tile(fold_vec, t_count)
    values = np.empty((n, t_count, len(columns)))
    models = {}
    events: list = []
    col = 0
    for mod in train.modalities:
        x_stack = _stack_rows(mod.values)
        for spec, alg in zip(specs, alg_labels):
            block = slice(col, col + c_count)
            for f in range(n_folds):
                rows = row_folds == f
                task_spec = replace(spec, seed=derive_seed(seed, "bp", mod.name, alg, f))
                _record_absent(events, y_stack[~rows], class_names, "pooled", f)
                model = bp.fit(task_spec, x_stack[~rows], y_stack[~rows], c_count)
                if rows.any():
                    preds = bp.predict_proba(model, x_stack[rows])
                    hold = fold_vec == f
                    values[hold, :, block] = (
                        preds.reshape(t_count, int(hold.sum()), c_count).transpose(1, 0, 2))
            final_spec = replace(spec, seed=derive_seed(seed, "bp", mod.name, alg, "final"))
            _record_absent(events, y_stack, class_names, "pooled", "final")
            models[(mod.name, alg)] = bp.fit(final_spec, x_stack, y_stack, c_count)
            col += c_count
    tensor = BasePredictionTensor(values=values, columns=columns,
                                  sample_ids=tuple(train.sample_ids),
                                  time_point_names=tuple(train.time_point_names),
                                  inner_assignment=assignment,
                                  fold_train_ids=fold_train_ids)
    bank = FittedBpBank(regime="time_distributed", models=models,
                        modality_names=tuple(m.name for m in train.modalities),
                        modality_widths={m.name: m.n_features for m in train.modalities},
                        algorithm_names=tuple(alg_labels), class_names=class_names,
                        time_point_names=tuple(train.time_point_names),
                        absent_classes=events)
    tensor.validate()
    bank.validate()
    return tensor, bank


def apply_bank(bank: FittedBpBank, cohort: LongitudinalCohort) -> BasePredictionTensor:
    """Predict a tensor for new samples from the bank's full-train models."""
    _require_complete(cohort)
    names = tuple(m.name for m in cohort.modalities)
    if names != bank.modality_names:
        raise TensorError(f"modalities {names} do not match the bank's {bank.modality_names}")
    for mod in cohort.modalities:
        if mod.n_features != bank.modality_widths[mod.name]:
            raise TensorError(f"modality {mod.name!r} width {mod.n_features} does not match "
                              f"the bank's {bank.modality_widths[mod.name]}")
    if tuple(cohort.time_point_names) != bank.time_point_names:
        raise TensorError("time points do not match the bank's training time points")
    if tuple(cohort.labels.class_names) != bank.class_names:
        raise TensorError("class names do not match the bank's")
    n, t_count, c_count = cohort.n_samples, cohort.n_times, len(bank.class_names)
    columns = tuple((m, a, cls) for m in bank.modality_names
                    for a in bank.algorithm_names for cls in bank.class_names)
    values = np.empty((n, t_count, len(columns)))
    tensor = BasePredictionTensor(values=values, columns=columns,
                                  sample_ids=tuple(cohort.sample_ids),
                                  time_point_names=tuple(cohort.time_point_names))
    if n == 0:
        return tensor
    col = 0
    for mod in cohort.modalities:
        x_stack = _stack_rows(mod.values) if bank.regime == "time_distributed" else None
        for alg in bank.algorithm_names:
            block = slice(col, col + c_count)
            if bank.regime == "time_dependent":
                for t in range(t_count):
                    model = bank.models[(t, mod.name, alg)]
                    values[:, t, block] = bp.predict_proba(model, mod.values[:, t, :])
            else:
                preds = bp.predict_proba(bank.models[(mod.name, alg)], x_stack)
                values[:, :, block] = preds.reshape(t_count, n, c_count).transpose(1, 0, 2)
            col += c_count
    tensor.validate()
    return tensor


def export_tensor(tensor: BasePredictionTensor, path) -> None:
    """Delimited dump, one row per (sample, time point), columns named
    modality|algorithm|class."""
    header = "sample_id,time_point," + ",".join("|".join(c) for c in tensor.columns)
    lines = [header]
    for i, sid in enumerate(tensor.sample_ids):
        for t, tname in enumerate(tensor.time_point_names):
            row = ",".join(format_float(v) for v in tensor.values[i, t])
            lines.append(f"{sid},{tname},{row}")
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")
