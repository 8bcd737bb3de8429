"""Per-time-point feature importance via static stacking.

The sequence model itself is opaque, so interpretation falls back to
static stacking at each input visit: base predictors fit on data at time
t against the label one visit later, a multinomial logistic combiner fit
on their out-of-fold predictions, and two levels of seeded permutation
importance on top:

- combiner level: permute one base-prediction column, measure the
  held-out macro-F drop, aggregate columns into a per-modality rank;
- feature level: permute one raw feature per algorithm, re-predict that
  algorithm's out-of-fold block through the fixed fold models, measure
  the macro-F drop, rank features per algorithm and average the ranks.

A feature's ordering key is the product of its modality's combiner-level
rank and its mean feature-level rank (smaller is more important); the
reported score stays on the drop scale, so an ignored feature scores
near zero.  Rankings are deterministic given the seed.  Consecutive
top-k sets joined by intersection give the cross-time trajectories.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from . import base_predictors as bp
from .base_predictors import PredictorSpec
from .cohort import LongitudinalCohort
from .harness import macro_f_measure
from .util import derive_seed, stratified_folds

COMBINER_SPEC = PredictorSpec("multinomial_logistic")


class InterpretError(ValueError):
    pass


@dataclass(frozen=True)
class RankedFeature:
    modality: str
    feature: str
    score: float  # mean held-out macro-F drop under feature permutation
    sd: float  # spread of that drop across permutation repeats
    rank_product: float  # ordering key; smaller means more important


@dataclass
class ImportanceTable:
    time_point_names: tuple
    rankings: dict  # time index -> list[RankedFeature], already truncated to top_k
    top_k: int
    links: list  # (feature key, t_from, t_to) for consecutive top-k appearances

    def validate(self) -> None:
        for t, ranked in self.rankings.items():
            keys = [f.rank_product for f in ranked]
            if any(b < a for a, b in zip(keys, keys[1:])):
                raise InterpretError(f"ranking at time index {t} is out of order")
        top_sets = {t: {(f.modality, f.feature) for f in ranked}
                    for t, ranked in self.rankings.items()}
        for key, t_from, t_to in self.links:
            pair = tuple(key.split("/", 1))
            if pair not in top_sets.get(t_from, set()) or pair not in top_sets.get(t_to, set()):
                raise InterpretError(f"link {key} {t_from}->{t_to} not backed by both top-k lists")


def _rank_desc(values: np.ndarray) -> np.ndarray:
    """Rank 1 = largest value; ties resolved by position for determinism."""
    order = np.argsort(-np.asarray(values, dtype=np.float64), kind="stable")
    ranks = np.empty(order.size, dtype=np.float64)
    ranks[order] = np.arange(1, order.size + 1)
    return ranks


def combine_rankings(modality_names: list, feature_index: list,
                     modality_drops: np.ndarray, feature_drops: np.ndarray) -> np.ndarray:
    """Ordering keys from the two importance levels, using ranks only.

    feature_index maps feature row -> modality position; feature_drops is
    (feature, algorithm).  Any monotone rescaling of either drop array
    leaves the result unchanged.
    """
    modality_rank = _rank_desc(modality_drops)
    per_alg_ranks = np.stack([_rank_desc(feature_drops[:, a])
                              for a in range(feature_drops.shape[1])], axis=1)
    mean_rank = per_alg_ranks.mean(axis=1)
    return np.array([modality_rank[feature_index[j]] * mean_rank[j]
                     for j in range(len(feature_index))])


def _require_complete(cohort: LongitudinalCohort) -> None:
    for mod in cohort.modalities:
        if not mod.mask.all():
            raise InterpretError(
                f"modality {mod.name!r} has missing values; impute before interpretation")


def _oof_predict(fold_models: list, fold_vec: np.ndarray, x: np.ndarray,
                 n_classes: int) -> np.ndarray:
    out = np.empty((x.shape[0], n_classes))
    for f, model in enumerate(fold_models):
        rows = fold_vec == f
        if rows.any():
            out[rows] = bp.predict_proba(model, x[rows])
    return out


def rank_features_at_time(cohort: LongitudinalCohort, t: int, specs: list[PredictorSpec],
                          seed: int = 0, inner_folds: int = 5,
                          permutation_repeats: int = 10) -> list[RankedFeature]:
    """Full ranked feature list for input visit t, most important first."""
    _require_complete(cohort)
    if not 0 <= t < cohort.n_times:
        raise InterpretError(
            f"time index {t} has no next-visit label; eligible range is 0..{cohort.n_times - 1}")
    labels = cohort.labels.labels
    y = labels[:, t + 1]
    n, c_count = cohort.n_samples, cohort.n_classes
    n_algs = len(specs)
    fold_vec = stratified_folds(y, inner_folds, derive_seed(seed, "static-folds", t))

    # out-of-fold base predictions per (modality, algorithm)
    fold_models: dict = {}
    blocks: dict = {}
    for m_idx, mod in enumerate(cohort.modalities):
        x = mod.values[:, t, :]
        for a_idx, spec in enumerate(specs):
            models = []
            for f in range(inner_folds):
                rows = fold_vec != f
                task = replace(spec, seed=derive_seed(seed, "static-bp", t, mod.name, a_idx, f))
                models.append(bp.fit(task, x[rows], y[rows], c_count))
            fold_models[(m_idx, a_idx)] = models
            blocks[(m_idx, a_idx)] = _oof_predict(models, fold_vec, x, c_count)
    z = np.concatenate([blocks[(m, a)] for m in range(len(cohort.modalities))
                        for a in range(n_algs)], axis=1)
    combiner = bp.fit(replace(COMBINER_SPEC, seed=derive_seed(seed, "combiner", t)),
                      z, y, c_count)
    baseline = macro_f_measure(bp.predict_proba(combiner, z).argmax(axis=1), y, c_count)

    # combiner level: column permutation drops, averaged into modality scores
    col_drops = np.empty(z.shape[1])
    for col in range(z.shape[1]):
        drops = np.empty(permutation_repeats)
        for r in range(permutation_repeats):
            rng = np.random.default_rng(derive_seed(seed, "perm-col", t, col, r))
            zp = z.copy()
            zp[:, col] = zp[rng.permutation(n), col]
            drops[r] = baseline - macro_f_measure(
                bp.predict_proba(combiner, zp).argmax(axis=1), y, c_count)
        col_drops[col] = drops.mean()
    width = n_algs * c_count
    modality_drops = np.array([col_drops[m * width:(m + 1) * width].mean()
                               for m in range(len(cohort.modalities))])

    # feature level: permute a raw feature, push it through one algorithm's
    # fixed fold models, score the combiner on the patched matrix
    feature_rows = [(m_idx, j) for m_idx, mod in enumerate(cohort.modalities)
                    for j in range(mod.n_features)]
    per_repeat = np.empty((len(feature_rows), n_algs, permutation_repeats))
    for row, (m_idx, j) in enumerate(feature_rows):
        mod = cohort.modalities[m_idx]
        x = mod.values[:, t, :]
        for a_idx in range(n_algs):
            start = (m_idx * n_algs + a_idx) * c_count
            for r in range(permutation_repeats):
                rng = np.random.default_rng(
                    derive_seed(seed, "perm-feat", t, mod.name, j, a_idx, r))
                xp = x.copy()
                xp[:, j] = xp[rng.permutation(n), j]
                zp = z.copy()
                zp[:, start:start + c_count] = _oof_predict(
                    fold_models[(m_idx, a_idx)], fold_vec, xp, c_count)
                per_repeat[row, a_idx, r] = baseline - macro_f_measure(
                    bp.predict_proba(combiner, zp).argmax(axis=1), y, c_count)
    feature_drops = per_repeat.mean(axis=2)  # (feature, algorithm)
    keys = combine_rankings([m.name for m in cohort.modalities],
                            [m for m, _ in feature_rows], modality_drops, feature_drops)
    scores = feature_drops.mean(axis=1)
    sds = per_repeat.mean(axis=1).std(axis=1, ddof=1) if permutation_repeats > 1 \
        else np.zeros(len(feature_rows))

    ranked = []
    for row, (m_idx, j) in enumerate(feature_rows):
        mod = cohort.modalities[m_idx]
        ranked.append(RankedFeature(modality=mod.name, feature=mod.feature_names[j],
                                    score=float(scores[row]), sd=float(sds[row]),
                                    rank_product=float(keys[row])))
    ranked.sort(key=lambda f: (f.rank_product, -f.score, f.modality, f.feature))
    return ranked


def build_trajectories(tables: dict, top_k: int = 10,
                       time_point_names: tuple | None = None) -> ImportanceTable:
    """tables: time index -> ranked list (as from rank_features_at_time).
    Links join features present in both of two consecutive top-k lists."""
    if len(tables) < 2:
        raise InterpretError("trajectories need rankings at two or more time points")
    order = sorted(tables)
    rankings = {t: list(tables[t][:top_k]) for t in order}
    links = []
    for t_from, t_to in zip(order, order[1:]):
        previous = {(f.modality, f.feature) for f in rankings[t_from]}
        current = {(f.modality, f.feature) for f in rankings[t_to]}
        for modality, feature in sorted(previous & current):
            links.append((f"{modality}/{feature}", t_from, t_to))
    if time_point_names is None:
        time_point_names = tuple(f"t{t}" for t in order)
    table = ImportanceTable(time_point_names=tuple(time_point_names), rankings=rankings,
                            top_k=top_k, links=links)
    table.validate()
    return table


def write_importance_table(table: ImportanceTable, path) -> None:
    lines = ["time_point,rank,modality,feature,score"]
    for pos, t in enumerate(sorted(table.rankings)):
        name = table.time_point_names[pos]
        for rank, f in enumerate(table.rankings[t], start=1):
            lines.append(f"{name},{rank},{f.modality},{f.feature},{f.score!r}")
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def write_trajectory_links(table: ImportanceTable, path) -> None:
    lines = ["feature,t_from,t_to"]
    for key, t_from, t_to in table.links:
        lines.append(f"{key},{t_from},{t_to}")
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")
