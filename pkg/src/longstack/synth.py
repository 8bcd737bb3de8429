"""Synthetic longitudinal cohort generator.

Stands in for the access-restricted clinical dataset: same shape (named
modalities with fixed feature counts, four input visits plus one target
visit, three ordinal diagnosis classes whose late-stage prevalence rises
over time), with a controllable signal-to-noise profile and
missing-completely-at-random cells.

Each sample follows a non-decreasing latent severity score; per-visit class
labels are quantile thresholds of that score chosen to match the configured
class proportions, so labels are ordinal and monotone by construction.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from .cohort import LabelSequence, LongitudinalCohort, ModalityBlock

DEFAULT_CLASS_NAMES = ["CN", "MCI", "Dementia"]
DEFAULT_TIME_NAMES = ["bl", "m06", "m12", "m24", "m36"]

SIGNAL_MODES = ("linear", "interaction")


class GeneratorError(ValueError):
    """Raised for infeasible or malformed generator configurations."""


@dataclass(frozen=True)
class ModalitySpec:
    """One synthetic modality: how many features, how many carry signal, how noisy."""

    name: str
    feature_count: int
    signal_fraction: float = 0.5
    noise_scale: float = 1.0

    def __post_init__(self):
        if self.feature_count < 1:
            raise GeneratorError(f"modality {self.name!r}: feature_count must be >= 1")
        if not 0.0 <= self.signal_fraction <= 1.0:
            raise GeneratorError(f"modality {self.name!r}: signal_fraction must be in [0, 1]")
        if self.noise_scale <= 0:
            raise GeneratorError(f"modality {self.name!r}: noise_scale must be > 0")

    @property
    def n_informative(self) -> int:
        return int(round(self.signal_fraction * self.feature_count))


@dataclass(frozen=True)
class GeneratorConfig:
    n_samples: int
    modality_specs: tuple[ModalitySpec, ...]
    target_proportions: np.ndarray  # (label time, class), rows sum to 1
    class_count: int = 3
    time_point_count: int = 5  # label time points; inputs are one fewer
    progression_drift: float = 0.15
    missing_rate: float = 0.0
    signal_mode: str = "linear"
    seed: int = 0
    class_names: tuple[str, ...] | None = None
    time_point_names: tuple[str, ...] | None = None

    def __post_init__(self):
        object.__setattr__(self, "modality_specs", tuple(self.modality_specs))
        props = np.asarray(self.target_proportions, dtype=np.float64)
        props = props.copy()
        props.flags.writeable = False
        object.__setattr__(self, "target_proportions", props)
        self.validate()

    def validate(self) -> None:
        if self.n_samples < 1:
            raise GeneratorError("n_samples must be >= 1")
        if self.time_point_count < 2:
            raise GeneratorError("time_point_count must be >= 2 (one input plus one target)")
        if self.class_count < 2:
            raise GeneratorError("class_count must be >= 2")
        if self.progression_drift < 0:
            raise GeneratorError("progression_drift must be >= 0")
        if not 0.0 <= self.missing_rate < 1.0:
            raise GeneratorError("missing_rate must be in [0, 1)")
        if self.signal_mode not in SIGNAL_MODES:
            raise GeneratorError(f"signal_mode must be one of {SIGNAL_MODES}")
        props = self.target_proportions
        if props.shape != (self.time_point_count, self.class_count):
            raise GeneratorError(
                f"target_proportions must have shape ({self.time_point_count}, "
                f"{self.class_count}), got {props.shape}"
            )
        if props.min() < 0:
            raise GeneratorError("target_proportions must be non-negative")
        sums = props.sum(axis=1)
        bad = np.flatnonzero(np.abs(sums - 1.0) > 1e-9)
        if bad.size:
            raise GeneratorError(
                f"target_proportions row {bad[0]} sums to {sums[bad[0]]:.12f}, expected 1"
            )
        if props[0, self.class_count - 1] > 1e-9:
            raise GeneratorError(
                "target_proportions assign terminal-class mass at the first time point; "
                "progression cohorts start below the terminal class"
            )
        # Monotone labels need every cumulative class share to shrink (or hold)
        # over time; a growing share of a low class cannot be realized.
        cum = np.cumsum(props, axis=1)[:, :-1]
        growth = np.diff(cum, axis=0)
        if growth.size and growth.max() > 1e-9:
            t, c = np.unravel_index(np.argmax(growth), growth.shape)
            raise GeneratorError(
                f"infeasible proportions: cumulative share of classes <= {c} rises "
                f"between time points {t} and {t + 1}, violating monotone labels"
            )
        if self.class_names is not None and len(self.class_names) != self.class_count:
            raise GeneratorError("class_names length must equal class_count")
        if (self.time_point_names is not None
                and len(self.time_point_names) != self.time_point_count):
            raise GeneratorError("time_point_names length must equal time_point_count")

    def resolved_class_names(self) -> list[str]:
        if self.class_names is not None:
            return list(self.class_names)
        if self.class_count == 3:
            return list(DEFAULT_CLASS_NAMES)
        return [f"class_{c}" for c in range(self.class_count)]

    def resolved_time_names(self) -> list[str]:
        if self.time_point_names is not None:
            return list(self.time_point_names)
        if self.time_point_count == 5:
            return list(DEFAULT_TIME_NAMES)
        return [f"t{i}" for i in range(self.time_point_count)]

    def to_dict(self) -> dict:
        return {
            "n_samples": self.n_samples,
            "modalities": [
                {
                    "name": m.name,
                    "feature_count": m.feature_count,
                    "signal_fraction": m.signal_fraction,
                    "noise_scale": m.noise_scale,
                }
                for m in self.modality_specs
            ],
            "target_proportions": self.target_proportions.tolist(),
            "class_count": self.class_count,
            "time_point_count": self.time_point_count,
            "progression_drift": self.progression_drift,
            "missing_rate": self.missing_rate,
            "signal_mode": self.signal_mode,
            "seed": self.seed,
            "class_names": list(self.class_names) if self.class_names else None,
            "time_point_names": list(self.time_point_names) if self.time_point_names else None,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "GeneratorConfig":
        try:
            mods = tuple(
                ModalitySpec(
                    name=m["name"],
                    feature_count=m["feature_count"],
                    signal_fraction=m.get("signal_fraction", 0.5),
                    noise_scale=m.get("noise_scale", 1.0),
                )
                for m in d["modalities"]
            )
            return cls(
                n_samples=d["n_samples"],
                modality_specs=mods,
                target_proportions=np.asarray(d["target_proportions"], dtype=np.float64),
                class_count=d.get("class_count", 3),
                time_point_count=d.get("time_point_count", 5),
                progression_drift=d.get("progression_drift", 0.15),
                missing_rate=d.get("missing_rate", 0.0),
                signal_mode=d.get("signal_mode", "linear"),
                seed=d.get("seed", 0),
                class_names=tuple(d["class_names"]) if d.get("class_names") else None,
                time_point_names=tuple(d["time_point_names"]) if d.get("time_point_names") else None,
            )
        except KeyError as e:
            raise GeneratorError(f"generator config missing field {e.args[0]!r}") from e


def _latent_scores(config: GeneratorConfig, rng: np.random.Generator) -> np.ndarray:
    """Non-decreasing severity score per sample per label time point."""
    n, t = config.n_samples, config.time_point_count
    start = rng.uniform(0.0, 1.0, size=n)
    steps = np.abs(rng.normal(0.0, config.progression_drift, size=(n, t - 1)))
    return np.concatenate([start[:, None], start[:, None] + np.cumsum(steps, axis=1)], axis=1)


def _thresholds(scores: np.ndarray, props: np.ndarray) -> np.ndarray:
    """Per time, per class boundary: empirical quantile at the cumulative share."""
    t_count, c_count = props.shape
    thr = np.empty((t_count, c_count - 1))
    for t in range(t_count):
        cum = np.cumsum(props[t])[:-1]
        thr[t] = np.quantile(scores[:, t], np.clip(cum, 0.0, 1.0))
    return thr


def _labels_from_scores(scores: np.ndarray, thresholds: np.ndarray) -> np.ndarray:
    labels = (scores[:, :, None] > thresholds[None, :, :]).sum(axis=2)
    # Rank crossings between visits can lower a raw thresholded label; clamp to
    # keep progression monotone.  With drifting targets this is a rare edit.
    return np.maximum.accumulate(labels, axis=1).astype(np.int64)


def generate(config: GeneratorConfig) -> LongitudinalCohort:
    """Generate a cohort; fully deterministic given the config (seed included)."""
    config.validate()
    rng = np.random.default_rng(config.seed)
    n = config.n_samples
    t_labels = config.time_point_count
    t_in = t_labels - 1
    c = config.class_count

    scores = _latent_scores(config, rng)
    thresholds = _thresholds(scores, config.target_proportions)
    labels = _labels_from_scores(scores, thresholds)
    if labels[:, 0].max() >= c - 1 and c > 1 and config.target_proportions[0, c - 1] <= 1e-9:
        # Quantile at share 1.0 equals the max score and the comparison is
        # strict, so this cannot trigger; guard documents the contract.
        raise GeneratorError("terminal-class label generated at the first time point")

    # Center/scale of the score stream feeding informative features.
    score_mid = np.median(scores[:, :t_in])
    score_scale = max(np.std(scores[:, :t_in]), 1e-12)
    z = (scores[:, :t_in] - score_mid) / score_scale

    blocks = []
    for spec in config.modality_specs:
        f = spec.feature_count
        n_inf = spec.n_informative
        values = np.empty((n, t_in, f))
        if config.signal_mode == "linear":
            slopes = rng.uniform(0.75, 1.5, size=n_inf) * rng.choice([-1.0, 1.0], size=n_inf)
            intercepts = rng.normal(0.0, 1.0, size=n_inf)
            noise = rng.normal(0.0, spec.noise_scale, size=(n, t_in, n_inf))
            values[:, :, :n_inf] = slopes * z[:, :, None] + intercepts + noise
        else:
            values[:, :, :n_inf] = _interaction_features(
                rng, z, thresholds[:t_in], scores[:, :t_in], score_mid, score_scale,
                n_inf, spec.noise_scale, c,
            )
        values[:, :, n_inf:] = rng.normal(0.0, 1.0, size=(n, t_in, f - n_inf))
        mask = np.ones((n, t_in, f), dtype=bool)
        if config.missing_rate > 0:
            mask = rng.random((n, t_in, f)) >= config.missing_rate
        names = [f"{spec.name}_f{j}" for j in range(f)]
        blocks.append(ModalityBlock(spec.name, names, values, mask))

    time_names = config.resolved_time_names()
    return LongitudinalCohort(
        sample_ids=[f"s{i:04d}" for i in range(n)],
        time_point_names=time_names[:t_in],
        target_time_name=time_names[t_in],
        modalities=blocks,
        labels=LabelSequence(labels, config.resolved_class_names()),
        monotone_progression=True,
    )


def _interaction_features(rng, z, thresholds_in, scores_in, score_mid, score_scale,
                          n_inf, noise_scale, n_classes) -> np.ndarray:
    """Pairwise interaction signal: each pair (u, v) has u random in {-1, +1} and
    v = u * side-of-threshold, so neither column predicts the class marginally
    but their product recovers one ordinal boundary.  Pairs cycle through the
    class boundaries; a leftover odd column is pure noise."""
    n, t_in = z.shape
    out = np.empty((n, t_in, n_inf))
    n_pairs = n_inf // 2
    n_boundaries = max(n_classes - 1, 1)
    for p in range(n_pairs):
        boundary = p % min(n_boundaries, thresholds_in.shape[1])
        gate = np.where(scores_in > thresholds_in[:, boundary][None, :], 1.0, -1.0)
        u = rng.choice([-1.0, 1.0], size=(n, t_in))
        out[:, :, 2 * p] = u + rng.normal(0.0, noise_scale, size=(n, t_in))
        out[:, :, 2 * p + 1] = u * gate + rng.normal(0.0, noise_scale, size=(n, t_in))
    if n_inf % 2:
        out[:, :, -1] = rng.normal(0.0, 1.0, size=(n, t_in))
    return out


def _drifting_proportions() -> np.ndarray:
    # Qualitative drift of the clinical cohort: the healthy share shrinks and
    # the terminal-class share grows visit over visit.
    return np.array(
        [
            [0.48, 0.52, 0.00],
            [0.42, 0.50, 0.08],
            [0.36, 0.47, 0.17],
            [0.30, 0.44, 0.26],
            [0.24, 0.41, 0.35],
        ]
    )


def table1_preset(seed: int = 0, n_samples: int = 749, missing_rate: float = 0.05) -> GeneratorConfig:
    """Full-scale schema preset: 8 modalities with the clinical feature counts
    (9, 7, 8, 40, 69, 68, 68, 68 = 337 features), 4 input visits, 3 classes."""
    counts = {
        "cognitive_tests": 9,
        "mri_volumes": 7,
        "demographics": 8,
        "mri_roi_volume": 40,
        "mri_roi_cortical_volume": 69,
        "mri_roi_surface_area": 68,
        "mri_roi_thickness_avg": 68,
        "mri_roi_thickness_std": 68,
    }
    specs = tuple(
        ModalitySpec(name, count, signal_fraction=0.2, noise_scale=2.0)
        for name, count in counts.items()
    )
    return GeneratorConfig(
        n_samples=n_samples,
        modality_specs=specs,
        target_proportions=_drifting_proportions(),
        progression_drift=0.15,
        missing_rate=missing_rate,
        seed=seed,
    )


def trend_preset(seed: int = 0, n_samples: int = 220, noise_scale: float = 2.4) -> GeneratorConfig:
    """Desk-scale preset with temporally accumulating signal: each visit is a
    noisy view of the slowly drifting severity score, so pooling visits pays."""
    specs = tuple(
        ModalitySpec(name, 6, signal_fraction=0.5, noise_scale=noise_scale)
        for name in ("clinical", "imaging", "labs")
    )
    return GeneratorConfig(
        n_samples=n_samples,
        modality_specs=specs,
        target_proportions=_drifting_proportions(),
        progression_drift=0.18,
        missing_rate=0.0,
        seed=seed,
    )


def interaction_preset(seed: int = 0, n_samples: int = 220, noise_scale: float = 0.4) -> GeneratorConfig:
    """Desk-scale preset whose signal is a within-modality nonlinear
    interaction, invisible to linear models and to naive feature concatenation."""
    specs = tuple(
        ModalitySpec(name, 6, signal_fraction=1.0, noise_scale=noise_scale)
        for name in ("clinical", "imaging", "labs")
    )
    return GeneratorConfig(
        n_samples=n_samples,
        modality_specs=specs,
        target_proportions=_drifting_proportions(),
        progression_drift=0.18,
        missing_rate=0.0,
        signal_mode="interaction",
        seed=seed,
    )
