"""Longitudinal multimodal cohort data model and delimited-file I/O.

A cohort is a set of samples observed at a fixed sequence of time points,
with features grouped into named modalities and an ordinal label per sample
per time point.  Labels cover one extra time point beyond the feature time
points because data up to time t is used to predict the label at t+1; the
shift itself happens in the experiment harness, never here.

Missingness is an explicit boolean mask per cell (True = observed), not a
sentinel value, so zero is a legal observed value.  Missing cells carry NaN
in the value array purely so that accidental use fails loudly.
"""

from __future__ import annotations

import csv
import json
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np


class CohortError(ValueError):
    """Raised for schema violations and malformed cohort files."""


def _freeze(arr: np.ndarray) -> np.ndarray:
    arr.flags.writeable = False
    return arr


@dataclass(frozen=True, eq=False)
class ModalityBlock:
    """One named feature block: values (sample, time, feature) plus observed mask."""

    name: str
    feature_names: list[str]
    values: np.ndarray
    mask: np.ndarray

    def __post_init__(self):
        values = np.asarray(self.values, dtype=np.float64)
        mask = np.asarray(self.mask, dtype=bool)
        if values.ndim != 3:
            raise CohortError(f"modality {self.name!r}: values must be 3-d (sample, time, feature)")
        if values.shape != mask.shape:
            raise CohortError(f"modality {self.name!r}: values/mask shape mismatch")
        if values.shape[2] != len(self.feature_names):
            raise CohortError(
                f"modality {self.name!r}: {len(self.feature_names)} feature names "
                f"but {values.shape[2]} feature columns"
            )
        values = values.copy()
        values[~mask] = np.nan
        object.__setattr__(self, "values", _freeze(values))
        object.__setattr__(self, "mask", _freeze(mask.copy()))

    @property
    def n_features(self) -> int:
        return len(self.feature_names)

    def missing_fraction(self, t: int) -> np.ndarray:
        """Per-feature fraction of samples missing at time point t."""
        return 1.0 - self.mask[:, t, :].mean(axis=0)


@dataclass(frozen=True, eq=False)
class LabelSequence:
    """Ordinal labels (sample, time) as integers in [0, C-1]."""

    labels: np.ndarray
    class_names: list[str]

    def __post_init__(self):
        labels = np.asarray(self.labels, dtype=np.int64)
        if labels.ndim != 2:
            raise CohortError("labels must be 2-d (sample, time)")
        if labels.size and (labels.min() < 0 or labels.max() >= self.n_classes):
            raise CohortError(f"labels must lie in [0, {self.n_classes - 1}]")
        object.__setattr__(self, "labels", _freeze(labels.copy()))

    @property
    def n_classes(self) -> int:
        return len(self.class_names)


@dataclass(frozen=True, eq=False)
class LongitudinalCohort:
    """Samples x time points x modalities, with labels for every input time plus one target time."""

    sample_ids: list[str]
    time_point_names: list[str]
    target_time_name: str
    modalities: list[ModalityBlock]
    labels: LabelSequence
    monotone_progression: bool = True

    def __post_init__(self):
        ids = list(self.sample_ids)
        if len(set(ids)) != len(ids):
            raise CohortError("sample_ids must be unique")
        n, t = len(ids), len(self.time_point_names)
        for block in self.modalities:
            if block.values.shape[:2] != (n, t):
                raise CohortError(
                    f"modality {block.name!r} has extents {block.values.shape[:2]}, "
                    f"expected {(n, t)}"
                )
        names = [b.name for b in self.modalities]
        if len(set(names)) != len(names):
            raise CohortError("modality names must be unique")
        if self.labels.labels.shape != (n, t + 1):
            raise CohortError(
                f"labels must cover {t + 1} time points (inputs plus one target), "
                f"got shape {self.labels.labels.shape}"
            )
        if self.monotone_progression and n:
            steps = np.diff(self.labels.labels, axis=1)
            if steps.size and steps.min() < 0:
                bad = int(np.argwhere(steps < 0)[0][0])
                raise CohortError(
                    f"monotone progression violated for sample {ids[bad]!r}"
                )

    @property
    def n_samples(self) -> int:
        return len(self.sample_ids)

    @property
    def n_times(self) -> int:
        return len(self.time_point_names)

    @property
    def n_classes(self) -> int:
        return self.labels.n_classes

    @property
    def n_features(self) -> int:
        return sum(b.n_features for b in self.modalities)

    @property
    def label_time_names(self) -> list[str]:
        return list(self.time_point_names) + [self.target_time_name]

    def modality(self, name: str) -> ModalityBlock:
        for block in self.modalities:
            if block.name == name:
                return block
        raise CohortError(f"unknown modality {name!r}")

    def fully_observed(self) -> bool:
        return all(b.mask.all() for b in self.modalities)


@dataclass(frozen=True)
class CohortSchema:
    """Companion schema: modality layout, time axis, class names, one-hot designations."""

    modalities: list[tuple[str, list[str]]]
    time_points: list[str]
    target_time_point: str
    class_names: list[str]
    one_hot: list[tuple[str, str]] = field(default_factory=list)

    @property
    def feature_columns(self) -> list[str]:
        return [f for _, feats in self.modalities for f in feats]

    def to_dict(self) -> dict:
        return {
            "modalities": [{"name": m, "features": list(f)} for m, f in self.modalities],
            "time_points": list(self.time_points),
            "target_time_point": self.target_time_point,
            "class_names": list(self.class_names),
            "one_hot": [{"modality": m, "feature": f} for m, f in self.one_hot],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "CohortSchema":
        try:
            mods = [(m["name"], list(m["features"])) for m in d["modalities"]]
            return cls(
                modalities=mods,
                time_points=list(d["time_points"]),
                target_time_point=d["target_time_point"],
                class_names=list(d["class_names"]),
                one_hot=[(o["modality"], o["feature"]) for o in d.get("one_hot", [])],
            )
        except KeyError as e:
            raise CohortError(f"schema missing field {e.args[0]!r}") from e


def save_schema(schema: CohortSchema, path) -> None:
    Path(path).write_text(json.dumps(schema.to_dict(), indent=2, sort_keys=True) + "\n")


def load_schema(path) -> CohortSchema:
    return CohortSchema.from_dict(json.loads(Path(path).read_text()))


def schema_of(cohort: LongitudinalCohort, one_hot: Sequence[tuple[str, str]] = ()) -> CohortSchema:
    return CohortSchema(
        modalities=[(b.name, list(b.feature_names)) for b in cohort.modalities],
        time_points=list(cohort.time_point_names),
        target_time_point=cohort.target_time_name,
        class_names=list(cohort.labels.class_names),
        one_hot=list(one_hot),
    )


def _format_cell(value: float, observed: bool) -> str:
    if not observed:
        return ""
    return repr(float(value))


def load_cohort(path, schema: CohortSchema | str | Path) -> LongitudinalCohort:
    """Read a long-format delimited cohort file.

    Expected columns: sample_id, time_point, one column per schema feature,
    label.  Missing cells are empty fields.  Rows at the target time point
    carry only the label.  An absent (sample, time) row marks all feature
    cells for that pair missing; its label is filled from the nearest
    observed visit (forward first) with a warning, since the label tensor
    has no missing concept.
    """
    if not isinstance(schema, CohortSchema):
        schema = load_schema(schema)
    path = Path(path)
    all_times = list(schema.time_points) + [schema.target_time_point]
    time_index = {tp: i for i, tp in enumerate(all_times)}
    class_index = {c: i for i, c in enumerate(schema.class_names)}
    known = set(schema.feature_columns)

    with path.open(newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise CohortError(f"{path}: empty file") from None
        if header[:2] != ["sample_id", "time_point"] or header[-1] != "label":
            raise CohortError(f"{path}: header must be sample_id,time_point,<features...>,label")
        file_features = header[2:-1]
        for col in file_features:
            if col not in known:
                raise CohortError(f"{path}: feature column {col!r} not covered by schema")
        absent = [c for c in schema.feature_columns if c not in file_features]
        if absent:
            warnings.warn(f"{path.name}: schema features absent from file, marked missing: {absent}")
        col_of = {c: i for i, c in enumerate(file_features)}

        sample_ids: list[str] = []
        sample_pos: dict[str, int] = {}
        rows: dict[tuple[str, str], list[str]] = {}
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(header):
                raise CohortError(f"{path}:{lineno}: expected {len(header)} fields, got {len(row)}")
            sid, tp = row[0], row[1]
            if tp not in time_index:
                raise CohortError(f"{path}:{lineno}: unknown time point {tp!r}")
            if (sid, tp) in rows:
                raise CohortError(f"{path}:{lineno}: duplicate row for ({sid!r}, {tp!r})")
            if sid not in sample_pos:
                sample_pos[sid] = len(sample_ids)
                sample_ids.append(sid)
            rows[(sid, tp)] = row

    n, t_in = len(sample_ids), len(schema.time_points)
    labels = np.full((n, t_in + 1), -1, dtype=np.int64)
    blocks = []
    offset = 0
    per_modality = []
    for mod_name, feats in schema.modalities:
        values = np.full((n, t_in, len(feats)), np.nan)
        mask = np.zeros((n, t_in, len(feats)), dtype=bool)
        per_modality.append((mod_name, feats, values, mask))
        offset += len(feats)

    for (sid, tp), row in rows.items():
        i = sample_pos[sid]
        j = time_index[tp]
        label_text = row[-1]
        if label_text != "":
            if label_text not in class_index:
                raise CohortError(f"{path}: label {label_text!r} for ({sid!r}, {tp!r}) "
                                  f"outside declared classes {schema.class_names}")
            labels[i, j] = class_index[label_text]
        if j >= t_in:
            if any(f != "" for f in row[2:-1]):
                warnings.warn(f"{path.name}: feature values at target time {tp!r} ignored")
            continue
        for mod_name, feats, values, mask in per_modality:
            for k, feat in enumerate(feats):
                if feat not in col_of:
                    continue
                cell = row[2 + col_of[feat]]
                if cell == "":
                    continue
                parsed = float(cell)
                if np.isnan(parsed):
                    continue
                values[i, j, k] = parsed
                mask[i, j, k] = True

    filled = 0
    for i in range(n):
        observed = np.flatnonzero(labels[i] >= 0)
        if observed.size == 0:
            raise CohortError(f"{path}: no label observed for sample {sample_ids[i]!r}")
        if observed.size < t_in + 1:
            for j in range(t_in + 1):
                if labels[i, j] < 0:
                    earlier = observed[observed < j]
                    source = earlier[-1] if earlier.size else observed[0]
                    labels[i, j] = labels[i, source]
                    filled += 1
    if filled:
        warnings.warn(f"{path.name}: {filled} absent labels filled from nearest observed visit")

    return LongitudinalCohort(
        sample_ids=sample_ids,
        time_point_names=list(schema.time_points),
        target_time_name=schema.target_time_point,
        modalities=[ModalityBlock(m, list(f), v, msk) for m, f, v, msk in per_modality],
        labels=LabelSequence(labels, list(schema.class_names)),
    )


def export_cohort(cohort: LongitudinalCohort, path) -> None:
    """Write the long-format delimited file accepted by load_cohort.

    Floats are written with repr() so that a load round trip reproduces every
    observed cell bit-exactly.
    """
    path = Path(path)
    feature_names = [f for b in cohort.modalities for f in b.feature_names]
    class_names = cohort.labels.class_names
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["sample_id", "time_point"] + feature_names + ["label"])
        for i, sid in enumerate(cohort.sample_ids):
            for t, tp in enumerate(cohort.time_point_names):
                cells = []
                for block in cohort.modalities:
                    for k in range(block.n_features):
                        cells.append(_format_cell(block.values[i, t, k], block.mask[i, t, k]))
                writer.writerow([sid, tp] + cells + [class_names[cohort.labels.labels[i, t]]])
            target_label = class_names[cohort.labels.labels[i, cohort.n_times]]
            writer.writerow([sid, cohort.target_time_name] + [""] * len(feature_names) + [target_label])


def class_distribution(cohort: LongitudinalCohort) -> np.ndarray:
    """Counts (label time point, class); each row sums to the sample count."""
    c = cohort.n_classes
    labels = cohort.labels.labels
    out = np.zeros((labels.shape[1], c), dtype=np.int64)
    for t in range(labels.shape[1]):
        out[t] = np.bincount(labels[:, t], minlength=c)
    return out


def subset_by_samples(cohort: LongitudinalCohort, ids: Iterable[str]) -> LongitudinalCohort:
    """Restrict to the given samples, preserving the cohort's original order."""
    wanted = set(ids)
    unknown = wanted - set(cohort.sample_ids)
    if unknown:
        raise CohortError(f"unknown sample ids: {sorted(unknown)}")
    keep = [i for i, sid in enumerate(cohort.sample_ids) if sid in wanted]
    idx = np.array(keep, dtype=np.intp)
    return LongitudinalCohort(
        sample_ids=[cohort.sample_ids[i] for i in keep],
        time_point_names=list(cohort.time_point_names),
        target_time_name=cohort.target_time_name,
        modalities=[
            ModalityBlock(b.name, list(b.feature_names), b.values[idx], b.mask[idx])
            for b in cohort.modalities
        ],
        labels=LabelSequence(cohort.labels.labels[idx], list(cohort.labels.class_names)),
        monotone_progression=cohort.monotone_progression,
    )


def cohorts_equal(a: LongitudinalCohort, b: LongitudinalCohort) -> bool:
    """Structural equality: metadata, masks, and every observed cell bit-exact."""
    if (a.sample_ids != b.sample_ids or a.time_point_names != b.time_point_names
            or a.target_time_name != b.target_time_name
            or a.labels.class_names != b.labels.class_names):
        return False
    if not np.array_equal(a.labels.labels, b.labels.labels):
        return False
    if len(a.modalities) != len(b.modalities):
        return False
    for ba, bb in zip(a.modalities, b.modalities):
        if ba.name != bb.name or ba.feature_names != bb.feature_names:
            return False
        if not np.array_equal(ba.mask, bb.mask):
            return False
        if not np.array_equal(ba.values[ba.mask], bb.values[bb.mask]):
            return False
    return True
