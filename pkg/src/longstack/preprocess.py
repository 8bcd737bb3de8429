"""Training-split-fitted preprocessing for longitudinal cohorts.

Pipeline order: one-hot encode designated categoricals, drop features by
per-time-point missingness, KNN-impute within each modality at each time
point, then z-score.  Every fitted statistic (category sets, kept columns,
imputation neighbors, means/scales) derives from the training split only;
test rows are transformed against that fitted state.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from .cohort import CohortError, LabelSequence, LongitudinalCohort, ModalityBlock


class PreprocessError(ValueError):
    """Raised when preprocessing preconditions fail."""


@dataclass(frozen=True)
class PreprocessPlan:
    missing_threshold: float = 0.30
    impute_k: int = 5
    one_hot: tuple[tuple[str, str], ...] = ()
    standardize: bool = True

    def __post_init__(self):
        if not 0.0 < self.missing_threshold <= 1.0:
            raise PreprocessError("missing_threshold must be in (0, 1]")
        if self.impute_k < 1:
            raise PreprocessError("impute_k must be >= 1")
        object.__setattr__(self, "one_hot", tuple(tuple(p) for p in self.one_hot))

    def to_dict(self) -> dict:
        return {
            "missing_threshold": self.missing_threshold,
            "impute_k": self.impute_k,
            "one_hot": [list(p) for p in self.one_hot],
            "standardize": self.standardize,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "PreprocessPlan":
        return cls(
            missing_threshold=d.get("missing_threshold", 0.30),
            impute_k=d.get("impute_k", 5),
            one_hot=tuple(tuple(p) for p in d.get("one_hot", [])),
            standardize=d.get("standardize", True),
        )


def _pairwise_partial_distances(query_vals, query_mask, ref_vals, ref_mask):
    """Euclidean distance over jointly observed features, rescaled by
    sqrt(total features / observed features); +inf when nothing overlaps."""
    n_features = query_vals.shape[1]
    q = np.where(query_mask, query_vals, 0.0)
    r = np.where(ref_mask, ref_vals, 0.0)
    qm = query_mask.astype(np.float64)
    rm = ref_mask.astype(np.float64)
    # sum over common features of (q - r)^2, assembled from masked pieces
    sq = (q ** 2) @ rm.T + qm @ (r ** 2).T - 2.0 * (q @ r.T)
    overlap = qm @ rm.T
    with np.errstate(divide="ignore", invalid="ignore"):
        dist = np.sqrt(np.maximum(sq, 0.0) * n_features / overlap)
    dist[overlap == 0] = np.inf
    return dist


def knn_impute(values: np.ndarray, mask: np.ndarray, k: int,
               reference: tuple[np.ndarray, np.ndarray] | None = None) -> np.ndarray:
    """Fill missing cells of a (rows, features) matrix by the mean of the
    feature over the k nearest reference rows that observe it.

    Without `reference` the matrix imputes against itself and a row is never
    its own neighbor (hence k <= rows - 1).  With a fitted reference (the
    training matrix and its mask), every reference row is a candidate and the
    query rows never influence each other.  Distance ties break toward the
    lower reference row index.
    """
    values = np.asarray(values, dtype=np.float64)
    mask = np.asarray(mask, dtype=bool)
    if values.shape != mask.shape or values.ndim != 2:
        raise PreprocessError("values and mask must be matching 2-d arrays")
    self_reference = reference is None
    if self_reference:
        ref_vals, ref_mask = values, mask
    else:
        ref_vals, ref_mask = np.asarray(reference[0], np.float64), np.asarray(reference[1], bool)
    n_ref = ref_vals.shape[0]
    max_k = n_ref - 1 if self_reference else n_ref
    if k > max_k:
        raise PreprocessError(f"k={k} exceeds the {max_k} available reference rows")
    never_observed = np.flatnonzero(~ref_mask.any(axis=0))
    if never_observed.size and (~mask[:, never_observed]).any():
        raise PreprocessError(
            f"feature index {int(never_observed[0])} is missing in every reference row"
        )

    out = values.copy()
    rows_to_fill = np.flatnonzero(~mask.all(axis=1))
    if rows_to_fill.size == 0:
        return out
    dist = _pairwise_partial_distances(values[rows_to_fill], mask[rows_to_fill], ref_vals, ref_mask)
    for pos, i in enumerate(rows_to_fill):
        d = dist[pos].copy()
        if self_reference:
            d[i] = np.inf
        order = np.argsort(d, kind="stable")
        for j in np.flatnonzero(~mask[i]):
            donors = order[ref_mask[order, j]][:k]
            if donors.size < k:
                raise PreprocessError(
                    f"feature index {j}: only {donors.size} reference rows observe it, "
                    f"need k={k}"
                )
            out[i, j] = ref_vals[donors, j].mean()
    return out


def filter_missing_features(cohort: LongitudinalCohort, threshold: float
                            ) -> tuple[LongitudinalCohort, list[tuple[str, str, float]]]:
    """Drop every feature whose missing fraction reaches `threshold` at one or
    more time points; the drop applies across all time points.  Returns the
    filtered cohort and a (modality, feature, worst fraction) report."""
    if not 0.0 < threshold <= 1.0:
        raise PreprocessError("threshold must be in (0, 1]")
    dropped: list[tuple[str, str, float]] = []
    blocks = []
    for block in cohort.modalities:
        worst = np.stack([block.missing_fraction(t) for t in range(cohort.n_times)]).max(axis=0)
        keep = worst < threshold
        for j in np.flatnonzero(~keep):
            dropped.append((block.name, block.feature_names[j], float(worst[j])))
        if keep.any():
            blocks.append(ModalityBlock(
                block.name,
                [f for f, k in zip(block.feature_names, keep) if k],
                block.values[:, :, keep],
                block.mask[:, :, keep],
            ))
    if not blocks:
        raise PreprocessError("missingness filter dropped every feature")
    filtered = LongitudinalCohort(
        sample_ids=list(cohort.sample_ids),
        time_point_names=list(cohort.time_point_names),
        target_time_name=cohort.target_time_name,
        modalities=blocks,
        labels=cohort.labels,
        monotone_progression=cohort.monotone_progression,
    )
    return filtered, dropped


def _fit_categories(block: ModalityBlock, feature_idx: int) -> np.ndarray:
    observed = block.values[:, :, feature_idx][block.mask[:, :, feature_idx]]
    cats = np.unique(observed)
    if cats.size == 0:
        raise PreprocessError(
            f"one-hot feature {block.feature_names[feature_idx]!r} has no observed values"
        )
    return cats


def _encode_block(block: ModalityBlock, designated: dict[int, np.ndarray]) -> ModalityBlock:
    """Replace each designated feature by one indicator column per category.
    A missing source cell makes all its indicators missing; an unseen category
    yields all-zero indicators and a warning."""
    if not designated:
        return block
    names: list[str] = []
    cols_vals: list[np.ndarray] = []
    cols_mask: list[np.ndarray] = []
    for j, feat in enumerate(block.feature_names):
        if j not in designated:
            names.append(feat)
            cols_vals.append(block.values[:, :, j])
            cols_mask.append(block.mask[:, :, j])
            continue
        cats = designated[j]
        col = block.values[:, :, j]
        observed = block.mask[:, :, j]
        known = observed & np.isin(np.where(observed, col, np.nan), cats)
        unseen = observed & ~known
        if unseen.any():
            warnings.warn(
                f"{block.name}/{feat}: {int(unseen.sum())} cells with categories unseen "
                f"in training, encoded as all-zero indicators"
            )
        for cat in cats:
            names.append(f"{feat}={cat:g}")
            indicator = np.where(observed & (col == cat), 1.0, 0.0)
            cols_vals.append(indicator)
            cols_mask.append(observed.copy())
    values = np.stack(cols_vals, axis=2)
    mask = np.stack(cols_mask, axis=2)
    return ModalityBlock(block.name, names, values, mask)


def standardize_fit(values: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Per-feature mean and scale pooled over all (sample, time) rows.
    Zero-variance features get mean 0 and scale 1 so they pass through
    unchanged."""
    flat = values.reshape(-1, values.shape[-1])
    mean = flat.mean(axis=0)
    scale = flat.std(axis=0)
    constant = scale <= 0.0
    return np.where(constant, 0.0, mean), np.where(constant, 1.0, scale)


def standardize_fit_transform(train: np.ndarray, test: np.ndarray
                              ) -> tuple[np.ndarray, np.ndarray]:
    """Z-score train and test feature arrays with statistics fitted on train."""
    if train.size == 0:
        raise PreprocessError("cannot fit standardization on an empty training array")
    mean, scale = standardize_fit(train)
    return (train - mean) / scale, (test - mean) / scale


class FittedPreprocessor:
    """Preprocessing state fitted on one training cohort.

    Use `fit` (class method) on the training split, then `transform` on any
    schema-compatible cohort; the training cohort itself comes back from
    `fit` already transformed.
    """

    def __init__(self, plan: PreprocessPlan):
        self.plan = plan
        self.categories: dict[tuple[str, str], np.ndarray] = {}
        self.kept: dict[str, list[str]] = {}
        self.dropped: list[tuple[str, str, float]] = []
        self.reference: dict[str, tuple[np.ndarray, np.ndarray]] = {}
        self.scaling: dict[str, tuple[np.ndarray, np.ndarray]] = {}
        self.modality_order: list[str] = []

    @classmethod
    def fit(cls, train: LongitudinalCohort, plan: PreprocessPlan
            ) -> tuple["FittedPreprocessor", LongitudinalCohort]:
        self = cls(plan)
        for modality, feature in plan.one_hot:
            block = train.modality(modality)
            if feature not in block.feature_names:
                raise PreprocessError(f"one-hot designation {modality}/{feature} not in cohort")
            j = block.feature_names.index(feature)
            self.categories[(modality, feature)] = _fit_categories(block, j)

        encoded = self._encode(train)
        filtered, self.dropped = filter_missing_features(encoded, plan.missing_threshold)
        self.modality_order = [b.name for b in filtered.modalities]
        self.kept = {b.name: list(b.feature_names) for b in filtered.modalities}
        for block in filtered.modalities:
            self.reference[block.name] = (block.values.copy(), block.mask.copy())

        imputed = self._impute(filtered, fitted=False)
        if plan.standardize:
            for block in imputed.modalities:
                self.scaling[block.name] = standardize_fit(block.values)
        return self, self._scale(imputed)

    def transform(self, cohort: LongitudinalCohort) -> LongitudinalCohort:
        if not self.modality_order:
            raise PreprocessError("preprocessor has not been fitted")
        encoded = self._encode(cohort)
        trimmed = self._restrict(encoded)
        imputed = self._impute(trimmed, fitted=True)
        return self._scale(imputed)

    # -- pipeline stages -------------------------------------------------

    def _encode(self, cohort: LongitudinalCohort) -> LongitudinalCohort:
        blocks = []
        for block in cohort.modalities:
            designated = {}
            for (modality, feature), cats in self.categories.items():
                if modality == block.name:
                    if feature not in block.feature_names:
                        raise PreprocessError(f"cohort lacks designated feature {modality}/{feature}")
                    designated[block.feature_names.index(feature)] = cats
            blocks.append(_encode_block(block, designated))
        return self._rebuild(cohort, blocks)

    def _restrict(self, cohort: LongitudinalCohort) -> LongitudinalCohort:
        blocks = []
        for name in self.modality_order:
            block = cohort.modality(name)
            index = {f: i for i, f in enumerate(block.feature_names)}
            try:
                cols = [index[f] for f in self.kept[name]]
            except KeyError as e:
                raise PreprocessError(
                    f"cohort modality {name!r} lacks fitted feature {e.args[0]!r}"
                ) from e
            blocks.append(ModalityBlock(
                name, list(self.kept[name]), block.values[:, :, cols], block.mask[:, :, cols]
            ))
        return self._rebuild(cohort, blocks)

    def _impute(self, cohort: LongitudinalCohort, fitted: bool) -> LongitudinalCohort:
        blocks = []
        for block in cohort.modalities:
            values = np.empty_like(block.values)
            for t in range(cohort.n_times):
                if fitted:
                    ref_vals, ref_mask = self.reference[block.name]
                    reference = (ref_vals[:, t, :], ref_mask[:, t, :])
                else:
                    reference = None
                values[:, t, :] = knn_impute(
                    block.values[:, t, :], block.mask[:, t, :], self.plan.impute_k,
                    reference=reference,
                )
            mask = np.ones_like(block.mask)
            blocks.append(ModalityBlock(block.name, list(block.feature_names), values, mask))
        return self._rebuild(cohort, blocks)

    def _scale(self, cohort: LongitudinalCohort) -> LongitudinalCohort:
        if not self.plan.standardize:
            return cohort
        blocks = []
        for block in cohort.modalities:
            mean, scale = self.scaling[block.name]
            blocks.append(ModalityBlock(
                block.name, list(block.feature_names),
                (block.values - mean) / scale, block.mask,
            ))
        return self._rebuild(cohort, blocks)

    @staticmethod
    def _rebuild(cohort: LongitudinalCohort, blocks: list[ModalityBlock]) -> LongitudinalCohort:
        return LongitudinalCohort(
            sample_ids=list(cohort.sample_ids),
            time_point_names=list(cohort.time_point_names),
            target_time_name=cohort.target_time_name,
            modalities=blocks,
            labels=cohort.labels,
            monotone_progression=cohort.monotone_progression,
        )


def write_dropped_report(dropped: list[tuple[str, str, float]], path) -> None:
    """Delimited report of filtered-out features."""
    import csv
    from pathlib import Path

    with Path(path).open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["modality", "feature", "worst_missing_fraction"])
        for modality, feature, fraction in dropped:
            writer.writerow([modality, feature, repr(fraction)])
