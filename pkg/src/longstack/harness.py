"""Experimental protocol: nested cross-validation over configurations.

One experiment = outer 5-fold cross-validation, repeated (default 20 times
with fresh fold assignments and initializations), where each outer
training split drives preprocessing, inner-fold base-prediction tensors
and stacker training, and the held-out fold is scored per time point with
the macro F-measure.  The prediction made at input step t is always scored
against the label one visit later.

Four stacked configurations cover {time-dependent, time-distributed} base
predictors x {per-step MLP, longitudinal softmax} heads:

    1: time_dependent BPs   + time_distributed_mlp head
    2: time_dependent BPs   + longitudinal_softmax head
    3: time_distributed BPs + time_distributed_mlp head
    4: time_distributed BPs + longitudinal_softmax head

Early-fusion baselines feed the preprocessed concatenated features straight
into the same stacker architectures, skipping base predictors.

All fold assignments and seeds derive from (base seed, repeat, fold) by
stable hashing, so every configuration sees identical splits within a
repeat and parallel execution reproduces serial results bit for bit.
"""

from __future__ import annotations

import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import stacker as stacker_mod
from .bp_tensor import apply_bank, generate_time_dependent, generate_time_distributed
from .base_predictors import PredictorSpec
from .cohort import LongitudinalCohort, load_cohort, load_schema, subset_by_samples
from .losses import LossSpec
from .preprocess import FittedPreprocessor, PreprocessPlan
from .synth import GeneratorConfig, generate
from .util import derive_seed, format_float, stratified_folds

CONFIGURATIONS = {
    1: ("time_dependent", "time_distributed_mlp"),
    2: ("time_dependent", "longitudinal_softmax"),
    3: ("time_distributed", "time_distributed_mlp"),
    4: ("time_distributed", "longitudinal_softmax"),
}

BASELINES = {
    "baseline_time_distributed": "time_distributed_mlp",
    "baseline_longitudinal": "longitudinal_softmax",
}


class HarnessError(ValueError):
    pass


def default_predictor_specs() -> tuple[PredictorSpec, ...]:
    return (PredictorSpec("knn"), PredictorSpec("multinomial_logistic"),
            PredictorSpec("random_forest"))


# ---------------------------------------------------------------------------
# metrics

def confusion_matrix(pred: np.ndarray, truth: np.ndarray, n_classes: int) -> np.ndarray:
    pred = np.asarray(pred, dtype=np.int64)
    truth = np.asarray(truth, dtype=np.int64)
    if pred.shape != truth.shape or pred.ndim != 1 or pred.size == 0:
        raise HarnessError("prediction and truth must be equal-length non-empty vectors")
    out = np.zeros((n_classes, n_classes), dtype=np.int64)
    np.add.at(out, (truth, pred), 1)
    return out


def per_class_f(pred: np.ndarray, truth: np.ndarray, n_classes: int) -> np.ndarray:
    """F1 per class from the argmax predictions; 0 when precision+recall is 0."""
    conf = confusion_matrix(pred, truth, n_classes)
    tp = np.diag(conf).astype(np.float64)
    denom = conf.sum(axis=1) + conf.sum(axis=0)  # 2tp + fn + fp
    with np.errstate(invalid="ignore"):
        f = np.where(denom > 0, 2.0 * tp / np.maximum(denom, 1), 0.0)
    return f


def macro_f_measure(pred: np.ndarray, truth: np.ndarray, n_classes: int) -> float:
    """Unweighted mean of per-class F1 over all n_classes classes."""
    return float(per_class_f(pred, truth, n_classes).mean())


# ---------------------------------------------------------------------------
# fold plans

@dataclass(frozen=True)
class FoldPlan:
    outer: dict  # sample_id -> outer fold
    inner: dict  # outer fold -> {sample_id -> inner fold}
    repeat_index: int
    seed: int
    n_outer: int
    n_inner: int


def build_fold_plan(cohort: LongitudinalCohort, n_outer: int, n_inner: int,
                    repeat_index: int, seed: int) -> FoldPlan:
    """Sample-keyed stratified folds: outer folds stratify on the final label,
    inner folds (per outer training split) on the latest input-visit label."""
    ids = list(cohort.sample_ids)
    labels = cohort.labels.labels
    outer_vec = stratified_folds(labels[:, -1], n_outer,
                                 derive_seed(seed, "repeat", repeat_index, "outer-folds"))
    outer = {s: int(f) for s, f in zip(ids, outer_vec)}
    inner = {}
    for k in range(n_outer):
        train_rows = np.flatnonzero(outer_vec != k)
        strat = labels[train_rows, cohort.n_times - 1]
        vec = stratified_folds(strat, n_inner,
                               derive_seed(seed, "repeat", repeat_index, "outer", k, "inner-folds"))
        inner[k] = {ids[row]: int(f) for row, f in zip(train_rows, vec)}
    return FoldPlan(outer=outer, inner=inner, repeat_index=repeat_index, seed=seed,
                    n_outer=n_outer, n_inner=n_inner)


# ---------------------------------------------------------------------------
# configuration

@dataclass(frozen=True)
class ExperimentConfig:
    """One experiment: a cohort source, a configuration id (1..4 or a
    baseline name), and the protocol knobs.

    stacker_hidden names the LSTM trunk; the longitudinal head always adds
    a class-width layer on top of it.
    """

    configuration: int | str = 4
    cohort_path: str | None = None
    schema_path: str | None = None
    generator: GeneratorConfig | None = None
    plan: PreprocessPlan = field(default_factory=PreprocessPlan)
    predictor_specs: tuple = field(default_factory=default_predictor_specs)
    loss: LossSpec = field(default_factory=lambda: LossSpec("dwcce"))
    repeats: int = 20
    outer_folds: int = 5
    inner_folds: int = 5
    seed: int = 0
    stacker_epochs: int = 300
    stacker_learning_rate: float = 1e-3
    stacker_hidden: tuple | None = None
    stacker_mlp_hidden: int = 32

    def __post_init__(self):
        object.__setattr__(self, "predictor_specs", tuple(self.predictor_specs))
        if self.stacker_hidden is not None:
            object.__setattr__(self, "stacker_hidden", tuple(self.stacker_hidden))
        _regime_and_head(self.configuration)
        if self.repeats < 1 or self.outer_folds < 2 or self.inner_folds < 2:
            raise HarnessError("need repeats >= 1 and at least 2 folds at both levels")
        if (self.cohort_path is None) == (self.generator is None):
            raise HarnessError("exactly one of cohort_path and generator must be set")
        if self.cohort_path is not None and self.schema_path is None:
            raise HarnessError("cohort_path needs a schema_path")

    def to_dict(self) -> dict:
        return {
            "configuration": self.configuration,
            "cohort_path": self.cohort_path,
            "schema_path": self.schema_path,
            "generator": self.generator.to_dict() if self.generator else None,
            "plan": self.plan.to_dict(),
            "predictor_specs": [s.to_dict() for s in self.predictor_specs],
            "loss": self.loss.kind,
            "repeats": self.repeats,
            "outer_folds": self.outer_folds,
            "inner_folds": self.inner_folds,
            "seed": self.seed,
            "stacker_epochs": self.stacker_epochs,
            "stacker_learning_rate": self.stacker_learning_rate,
            "stacker_hidden": list(self.stacker_hidden) if self.stacker_hidden else None,
            "stacker_mlp_hidden": self.stacker_mlp_hidden,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        return cls(
            configuration=d.get("configuration", 4),
            cohort_path=d.get("cohort_path"),
            schema_path=d.get("schema_path"),
            generator=GeneratorConfig.from_dict(d["generator"]) if d.get("generator") else None,
            plan=PreprocessPlan.from_dict(d.get("plan", {})),
            predictor_specs=tuple(PredictorSpec.from_dict(s)
                                  for s in d.get("predictor_specs", [])) or default_predictor_specs(),
            loss=LossSpec(d.get("loss", "dwcce")),
            repeats=d.get("repeats", 20),
            outer_folds=d.get("outer_folds", 5),
            inner_folds=d.get("inner_folds", 5),
            seed=d.get("seed", 0),
            stacker_epochs=d.get("stacker_epochs", 300),
            stacker_learning_rate=d.get("stacker_learning_rate", 1e-3),
            stacker_hidden=tuple(d["stacker_hidden"]) if d.get("stacker_hidden") else None,
            stacker_mlp_hidden=d.get("stacker_mlp_hidden", 32),
        )


def _regime_and_head(configuration) -> tuple[str | None, str]:
    """(regime, head); regime None means early fusion."""
    key = configuration
    if isinstance(key, str) and key.isdigit():
        key = int(key)
    if key in CONFIGURATIONS:
        return CONFIGURATIONS[key]
    if key in BASELINES:
        return None, BASELINES[key]
    raise HarnessError(f"unknown configuration {configuration!r}; expected 1..4 or one of "
                       f"{sorted(BASELINES)}")


def load_experiment_cohort(config: ExperimentConfig) -> LongitudinalCohort:
    if config.generator is not None:
        return generate(config.generator)
    schema = load_schema(config.schema_path)
    return load_cohort(config.cohort_path, schema)


# ---------------------------------------------------------------------------
# reports

@dataclass
class MetricsReport:
    configuration: str
    time_point_names: tuple  # names of the predicted visits
    class_names: tuple
    macro_f: np.ndarray  # (repeat, time)
    per_class: np.ndarray  # (repeat, time, class)
    confusion: np.ndarray  # (repeat, time, class, class)
    events: tuple = ()

    def __post_init__(self):
        if self.macro_f.ndim != 2 or self.macro_f.shape[1] != len(self.time_point_names):
            raise HarnessError("macro_f must have shape (repeats, time points)")

    @property
    def medians(self) -> np.ndarray:
        return np.median(self.macro_f, axis=0)

    @property
    def standard_errors(self) -> np.ndarray:
        if self.macro_f.shape[0] < 2:
            return np.zeros(self.macro_f.shape[1])
        return np.std(self.macro_f, axis=0, ddof=1) / np.sqrt(self.macro_f.shape[0])


def report_rows(report: MetricsReport) -> list[str]:
    """Delimited per-repeat rows: configuration,repeat,time_point,macro_f,f_<class>..."""
    header = ("configuration,repeat,time_point,macro_f,"
              + ",".join(f"f_{c}" for c in report.class_names))
    lines = [header]
    for r in range(report.macro_f.shape[0]):
        for t, name in enumerate(report.time_point_names):
            per = ",".join(format_float(v) for v in report.per_class[r, t])
            lines.append(f"{report.configuration},{r},{name},{format_float(report.macro_f[r, t])},{per}")
    return lines


def summary_rows(reports: list[MetricsReport]) -> list[str]:
    lines = ["configuration,time_point,median_macro_f,se_macro_f"]
    for report in reports:
        med, se = report.medians, report.standard_errors
        for t, name in enumerate(report.time_point_names):
            lines.append(f"{report.configuration},{name},{format_float(med[t])},{format_float(se[t])}")
    return lines


def write_report_table(reports, path) -> None:
    reports = [reports] if isinstance(reports, MetricsReport) else list(reports)
    lines = report_rows(reports[0])
    for rep in reports[1:]:
        lines.extend(report_rows(rep)[1:])
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def write_report_summary(reports, path) -> None:
    reports = [reports] if isinstance(reports, MetricsReport) else list(reports)
    Path(path).write_text("\n".join(summary_rows(reports)) + "\n", encoding="utf-8")


# ---------------------------------------------------------------------------
# the protocol

def predicted_time_names(cohort: LongitudinalCohort) -> tuple:
    return tuple(list(cohort.time_point_names[1:]) + [cohort.target_time_name])


def _stacker_config(config: ExperimentConfig, head: str, width: int, n_classes: int,
                    t_in: int, seed: int) -> stacker_mod.StackerConfig:
    trunk = config.stacker_hidden if config.stacker_hidden is not None else (32,)
    hidden = tuple(trunk) + (n_classes,) if head == "longitudinal_softmax" else tuple(trunk)
    return stacker_mod.StackerConfig(
        input_width=width, class_count=n_classes, hidden_sizes=hidden, head=head,
        mlp_hidden=config.stacker_mlp_hidden, epochs=config.stacker_epochs,
        learning_rate=config.stacker_learning_rate, seed=seed, time_steps=t_in)


def _repeat_predictions(cohort: LongitudinalCohort, config: ExperimentConfig,
                        repeat_index: int, labels_wanted: list) -> tuple[dict, list]:
    """Argmax predictions (sample, step) per requested configuration label, with
    shared folds, preprocessing and base-prediction tensors within the repeat."""
    t_in, n_classes = cohort.n_times, cohort.n_classes
    n = cohort.n_samples
    plan = build_fold_plan(cohort, config.outer_folds, config.inner_folds,
                           repeat_index, config.seed)
    index_of = {s: i for i, s in enumerate(cohort.sample_ids)}
    preds = {label: np.full((n, t_in), -1, dtype=np.int64) for label in labels_wanted}
    events: list = []
    regimes_needed = {_regime_and_head(label)[0] for label in labels_wanted} - {None}
    fusion_needed = any(_regime_and_head(label)[0] is None for label in labels_wanted)
    for k in range(config.outer_folds):
        test_ids = [s for s in cohort.sample_ids if plan.outer[s] == k]
        train_ids = [s for s in cohort.sample_ids if plan.outer[s] != k]
        if not test_ids:
            continue
        train_c = subset_by_samples(cohort, train_ids)
        test_c = subset_by_samples(cohort, test_ids)
        fitted, train_p = FittedPreprocessor.fit(train_c, config.plan)
        test_p = fitted.transform(test_c)
        shifted = train_p.labels.labels[:, 1:]
        for t in range(t_in):
            counts = np.bincount(shifted[:, t], minlength=n_classes)
            for c in np.flatnonzero(counts == 0):
                events.append(f"repeat {repeat_index} fold {k}: class "
                              f"{cohort.labels.class_names[c]} absent from training targets "
                              f"at step {t}")
        tensors = {}
        for regime in sorted(regimes_needed):
            gen = (generate_time_dependent if regime == "time_dependent"
                   else generate_time_distributed)
            bp_seed = derive_seed(config.seed, "repeat", repeat_index, "fold", k, regime)
            oof, bank = gen(train_p, list(config.predictor_specs), config.inner_folds,
                            bp_seed, inner_assignment=plan.inner[k])
            tensors[regime] = (oof, apply_bank(bank, test_p))
        if fusion_needed:
            x_train = np.concatenate([m.values for m in train_p.modalities], axis=2)
            x_test = np.concatenate([m.values for m in test_p.modalities], axis=2)
        stacker_seed = derive_seed(config.seed, "repeat", repeat_index, "fold", k, "stacker")
        rows = np.array([index_of[s] for s in test_ids])
        for label in labels_wanted:
            regime, head = _regime_and_head(label)
            if regime is None:
                tr, te = x_train, x_test
            else:
                oof, test_tensor = tensors[regime]
                tr, te = oof.values, test_tensor.values
            scfg = _stacker_config(config, head, tr.shape[2], n_classes, t_in, stacker_seed)
            model = stacker_mod.train(scfg, tr, shifted, config.loss)
            probs = stacker_mod.forward(model, te)
            preds[label][rows] = probs.argmax(axis=2)
    for label, arr in preds.items():
        if (arr < 0).any():
            raise HarnessError("outer folds did not cover every sample exactly once")
    return preds, events


def _metrics_from_predictions(cohort: LongitudinalCohort, preds: np.ndarray):
    truth = cohort.labels.labels[:, 1:]
    t_in, n_classes = truth.shape[1], cohort.n_classes
    macro = np.array([macro_f_measure(preds[:, t], truth[:, t], n_classes)
                      for t in range(t_in)])
    pcf = np.stack([per_class_f(preds[:, t], truth[:, t], n_classes) for t in range(t_in)])
    conf = np.stack([confusion_matrix(preds[:, t], truth[:, t], n_classes)
                     for t in range(t_in)])
    return macro, pcf, conf


def _repeat_worker(payload):
    cohort, config, repeat_index, labels_wanted = payload
    preds, events = _repeat_predictions(cohort, config, repeat_index, labels_wanted)
    return {label: _metrics_from_predictions(cohort, arr) for label, arr in preds.items()}, events


def _run_labels(cohort: LongitudinalCohort, config: ExperimentConfig,
                labels_wanted: list, threads: int = 1) -> dict:
    """All repeats for the requested configuration labels; repeat results are
    assembled in index order whatever the thread count."""
    payloads = [(cohort, config, r, labels_wanted) for r in range(config.repeats)]
    if threads > 1:
        with ProcessPoolExecutor(max_workers=threads) as pool:
            outcomes = list(pool.map(_repeat_worker, payloads))
    else:
        outcomes = [_repeat_worker(p) for p in payloads]
    names = predicted_time_names(cohort)
    reports = {}
    for label in labels_wanted:
        macro = np.stack([out[0][label][0] for out in outcomes])
        pcf = np.stack([out[0][label][1] for out in outcomes])
        conf = np.stack([out[0][label][2] for out in outcomes])
        events = tuple(e for out in outcomes for e in out[1])
        reports[label] = MetricsReport(configuration=str(label), time_point_names=names,
                                       class_names=tuple(cohort.labels.class_names),
                                       macro_f=macro, per_class=pcf, confusion=conf,
                                       events=events)
    return reports


def run_experiment(config: ExperimentConfig, cohort: LongitudinalCohort | None = None,
                   threads: int = 1) -> MetricsReport:
    """The full protocol for one configuration id (1..4)."""
    regime, _ = _regime_and_head(config.configuration)
    if regime is None:
        raise HarnessError("use run_baseline_early_fusion for baseline configurations")
    if cohort is None:
        cohort = load_experiment_cohort(config)
    return _run_labels(cohort, config, [config.configuration], threads)[config.configuration]


def run_baseline_early_fusion(config: ExperimentConfig,
                              cohort: LongitudinalCohort | None = None,
                              threads: int = 1) -> MetricsReport:
    """Same protocol, but the stacker consumes the preprocessed concatenated
    features directly; the architecture mirrors the corresponding stacker."""
    regime, _ = _regime_and_head(config.configuration)
    if regime is not None:
        raise HarnessError("configuration must name a baseline "
                           f"(one of {sorted(BASELINES)})")
    if cohort is None:
        cohort = load_experiment_cohort(config)
    return _run_labels(cohort, config, [config.configuration], threads)[config.configuration]


def compare_configurations(cohort: LongitudinalCohort, config: ExperimentConfig,
                           configurations=(1, 2, 3, 4), baselines=(),
                           threads: int = 1) -> dict:
    """Paired comparison: every requested configuration and baseline runs on
    identical folds, preprocessing and base-prediction tensors within each
    repeat.  Results equal independent run_experiment calls seed for seed."""
    labels_wanted = list(configurations) + list(baselines)
    for label in labels_wanted:
        _regime_and_head(label)
    return _run_labels(cohort, config, labels_wanted, threads)


def comparison_table(reports: dict) -> str:
    """Median +- SE per (configuration, predicted visit), delimited text."""
    return "\n".join(summary_rows(list(reports.values()))) + "\n"
