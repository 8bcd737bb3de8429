"""Acceptance gate: one test per shipping criterion, one verdict line each.

Run with `pytest tests/test_acceptance.py -v -s` to see the verdict lines as
they complete.  The two trend-reproduction criteria run full 20-repeat
protocols and sit at the end of the file; together they need roughly half an
hour of CPU time.
"""

import itertools
import json
import time

import numpy as np

from longstack import base_predictors as bp
from longstack.base_predictors import PredictorSpec
from longstack.bp_tensor import generate_time_dependent, generate_time_distributed
from longstack.cli import main as cli_main
from longstack.cohort import (LabelSequence, LongitudinalCohort, ModalityBlock,
                              subset_by_samples)
from longstack.harness import (ExperimentConfig, build_fold_plan,
                               compare_configurations, macro_f_measure)
from longstack.interpret import build_trajectories, rank_features_at_time
from longstack.losses import LossSpec, class_weights, loss, ordinal_weight
from longstack.preprocess import FittedPreprocessor, PreprocessPlan, knn_impute
from longstack.stacker import StackerConfig, backward, forward, init_model, named_parameters
from longstack.synth import (GeneratorConfig, ModalitySpec, generate,
                             interaction_preset, trend_preset)
from longstack.util import derive_seed

HEADS = ("time_distributed_mlp", "longitudinal_softmax", "time_dependent_per_step")
LOSSES = ("cce", "weighted_cce", "dwcce")


def verdict(number, name, ok, detail):
    line = f"criterion {number} {name}: {'PASS' if ok else 'FAIL'} ({detail})"
    print(line, flush=True)
    assert ok, line


# ---------------------------------------------------------------------------
# 1: analytic gradients vs central finite differences

def _numeric_grads(model, x, y, spec, cw, override, eps=1e-6):
    grads = {}
    for name, value in named_parameters(model):
        g = np.zeros_like(value)
        flat, gflat = value.ravel(), g.ravel()
        for i in range(flat.size):
            keep = flat[i]
            flat[i] = keep + eps
            hi = loss(spec, forward(model, x), y, cw, override)
            flat[i] = keep - eps
            lo = loss(spec, forward(model, x), y, cw, override)
            flat[i] = keep
            gflat[i] = (hi - lo) / (2.0 * eps)
        grads[name] = g
    return grads


def test_criterion_1_gradient_suite():
    started = time.monotonic()
    worst, instances = 0.0, 0
    for head, kind, seed in itertools.product(HEADS, LOSSES, (0, 1, 2)):
        rng = np.random.default_rng(derive_seed(seed, "grad", head, kind))
        config = StackerConfig(input_width=8, class_count=3, hidden_sizes=(4, 3),
                               head=head, mlp_hidden=4, epochs=1,
                               learning_rate=1e-3, seed=seed, time_steps=4)
        model = init_model(config)
        x = rng.standard_normal((3, 4, 8))
        y = rng.integers(0, 3, size=(3, 4))
        spec = LossSpec(kind)
        cw = None if kind == "cce" else class_weights(y, 3)
        override = ordinal_weight(forward(model, x), y) if kind == "dwcce" else None
        analytic = backward(model, x, y, spec, cw, override)
        numeric = _numeric_grads(model, x, y, spec, cw, override)
        for name in analytic:
            a, n = analytic[name], numeric[name]
            denom = np.maximum(1e-3, np.maximum(np.abs(a), np.abs(n)))
            worst = max(worst, float(np.max(np.abs(a - n) / denom)))
        instances += 1
    elapsed = time.monotonic() - started
    verdict(1, "gradient-suite",
            instances >= 20 and worst < 1e-5 and elapsed < 60.0,
            f"{instances} instances, max relative error {worst:.2e}, {elapsed:.1f}s")


# ---------------------------------------------------------------------------
# 2: loss identities

def test_criterion_2_loss_identities():
    rng = np.random.default_rng(12)
    max_gap = 0.0
    for _ in range(10):
        y = rng.integers(0, 3, size=(4, 5))
        probs = rng.dirichlet(np.ones(3), size=(4, 5))
        for i in range(4):
            for t in range(5):
                probs[i, t, y[i, t]] += 1.0
        probs /= probs.sum(axis=2, keepdims=True)
        ones = np.ones((5, 3))
        gap = abs(loss(LossSpec("dwcce"), probs, y, ones) - loss(LossSpec("cce"), probs, y))
        max_gap = max(max_gap, gap)
    identity_ok = max_gap <= 1e-12

    uniform_ok = True
    for c in (2, 3, 5):
        for t in (1, 4):
            probs = np.full((3, t, c), 1.0 / c)
            labels = np.zeros((3, t), dtype=int)
            uniform_ok &= loss(LossSpec("cce"), probs, labels) == t * np.log(c)

    ordinal_ok = True
    for c in range(2, 6):
        for a, truth in itertools.product(range(c), repeat=2):
            p = np.full((1, 1, c), 0.1 / max(c - 1, 1))
            p[0, 0, a] = 0.9
            w = float(ordinal_weight(p, np.array([[truth]]))[0, 0])
            ordinal_ok &= 1.0 <= w <= 2.0
            ordinal_ok &= abs(w - (abs(a - truth) / (c - 1) + 1.0)) < 1e-15

    verdict(2, "loss-identities", identity_ok and uniform_ok and ordinal_ok,
            f"equal-weight gap {max_gap:.1e}, uniform sum exact {uniform_ok}, "
            f"ordinal factor bounded {ordinal_ok}")


# ---------------------------------------------------------------------------
# 3 + 4: nested-split hygiene and model counts on a real cohort

def audit_generator():
    props = np.array([[0.5, 0.5, 0.0], [0.45, 0.4, 0.15],
                      [0.4, 0.35, 0.25], [0.35, 0.3, 0.35]])
    return GeneratorConfig(n_samples=45,
                           modality_specs=(ModalitySpec("m0", 4, 1.0, 0.5),
                                           ModalitySpec("m1", 3, 0.5, 0.8)),
                           target_proportions=props, time_point_count=4, seed=5)


AUDIT_SPECS = [PredictorSpec("knn"), PredictorSpec("multinomial_logistic")]


def test_criterion_3_leakage_suite():
    cohort = generate(audit_generator())
    violations = 0
    plan = build_fold_plan(cohort, 5, 5, repeat_index=0, seed=0)
    outer_counts = {s: 0 for s in cohort.sample_ids}
    for k in range(5):
        for s in cohort.sample_ids:
            if plan.outer[s] == k:
                outer_counts[s] += 1
    violations += sum(1 for c in outer_counts.values() if c != 1)
    for k in range(5):
        train_ids = [s for s in cohort.sample_ids if plan.outer[s] != k]
        assignment = plan.inner[k]
        if sorted(assignment) != sorted(train_ids):
            violations += 1
        train_c = subset_by_samples(cohort, train_ids)
        _, train_p = FittedPreprocessor.fit(train_c, PreprocessPlan())
        for regime_fn in (generate_time_dependent, generate_time_distributed):
            oof, _ = regime_fn(train_p, AUDIT_SPECS, 5,
                               derive_seed(0, "audit", k), inner_assignment=assignment)
            oof.validate()  # finite row-stochastic blocks: one prediction per row
            if sorted(oof.inner_assignment) != sorted(train_ids):
                violations += 1
            for fold, trained_on in oof.fold_train_ids.items():
                violations += sum(1 for s in trained_on if assignment[s] == fold)
                violations += sum(1 for s in trained_on if s not in assignment)
    verdict(3, "leakage-suite", violations == 0,
            f"{violations} violations over outer/inner splits in both regimes")


def test_criterion_4_model_counts():
    cohort = generate(audit_generator())
    t_in, m_count, a_count = cohort.n_times, len(cohort.modalities), len(AUDIT_SPECS)
    inner = 5
    bp.reset_fit_counter()
    _, bank_dep = generate_time_dependent(cohort, AUDIT_SPECS, inner, seed=1)
    fits_dep = bp.FIT_CALLS
    bp.reset_fit_counter()
    _, bank_dist = generate_time_distributed(cohort, AUDIT_SPECS, inner, seed=1)
    fits_dist = bp.FIT_CALLS
    ok = (bank_dep.model_count == t_in * m_count * a_count
          and bank_dist.model_count == m_count * a_count
          and fits_dep == (inner + 1) * t_in * m_count * a_count
          and fits_dist == (inner + 1) * m_count * a_count)
    verdict(4, "model-counts", ok,
            f"banks {bank_dep.model_count} vs {bank_dist.model_count} models "
            f"(T={t_in}, M={m_count}, A={a_count}); fit calls {fits_dep} vs {fits_dist}")


# ---------------------------------------------------------------------------
# 5: oracle equivalences

def test_criterion_5_oracle_equivalences():
    rng = np.random.default_rng(31)
    macro_ok = True
    for _ in range(100):
        n_classes = int(rng.integers(2, 6))
        n = int(rng.integers(5, 30))
        pred = rng.integers(0, n_classes, size=n)
        truth = rng.integers(0, n_classes, size=n)
        fs = []
        for c in range(n_classes):
            tp = int(((pred == c) & (truth == c)).sum())
            fp = int(((pred == c) & (truth != c)).sum())
            fn = int(((pred != c) & (truth == c)).sum())
            denom = 2 * tp + fp + fn
            fs.append(0.0 if denom == 0 else 2.0 * tp / denom)
        macro_ok &= macro_f_measure(pred, truth, n_classes) == float(np.mean(fs))

    impute_gap = 0.0
    for trial in range(20):
        trng = np.random.default_rng(100 + trial)
        n = int(trng.integers(5, 9))
        f = int(trng.integers(3, 7))
        k = int(trng.integers(1, 4))
        values = trng.standard_normal((n, f))
        mask = trng.random((n, f)) < 0.75
        mask[:3] = True  # fully observed donor pool keeps every case solvable
        for i in range(3, n):
            mask[i, i % f] = True
        values = np.where(mask, values, 0.0)
        got = knn_impute(values, mask, k)
        want = _impute_oracle(values, mask, k)
        impute_gap = max(impute_gap, float(np.abs(got - want).max()))
    verdict(5, "oracle-equivalences", macro_ok and impute_gap <= 1e-12,
            f"macro F exact on 100 vectors: {macro_ok}; "
            f"imputation max gap {impute_gap:.1e} over 20 matrices")


def _impute_oracle(values, mask, k):
    """Exhaustive reference: all pairwise scaled distances by hand."""
    n, f = values.shape
    out = values.copy()
    for i in range(n):
        dists = []
        for r in range(n):
            if r == i:
                dists.append(np.inf)
                continue
            both = mask[i] & mask[r]
            if not both.any():
                dists.append(np.inf)
                continue
            sq = float(((values[i, both] - values[r, both]) ** 2).sum())
            dists.append(np.sqrt(sq * f / both.sum()))
        order = np.argsort(np.array(dists), kind="stable")
        for j in range(f):
            if mask[i, j]:
                continue
            donors = [r for r in order if mask[r, j]][:k]
            out[i, j] = values[donors, j].mean()
    return out


# ---------------------------------------------------------------------------
# 8: interpretation sanity on a planted-signal cohort

def test_criterion_8_interpretation_sanity():
    rng = np.random.default_rng(7)
    y = np.repeat(np.arange(3), 20)
    n, t_in = y.size, 3
    planted = y[:, None] + 0.05 * rng.standard_normal((n, t_in))
    sig = np.concatenate([planted[:, :, None],
                          rng.standard_normal((n, t_in, 5))], axis=2)
    junk = rng.standard_normal((n, t_in, 6))
    labels = np.tile(y[:, None], (1, t_in + 1))
    cohort = LongitudinalCohort(
        sample_ids=[f"s{i}" for i in range(n)],
        time_point_names=[f"v{j}" for j in range(t_in)],
        target_time_name=f"v{t_in}",
        modalities=[
            ModalityBlock("sig", ["planted"] + [f"sn{j}" for j in range(5)],
                          sig, np.ones(sig.shape, dtype=bool)),
            ModalityBlock("junk", [f"jn{j}" for j in range(6)],
                          junk, np.ones(junk.shape, dtype=bool)),
        ],
        labels=LabelSequence(labels, ["c0", "c1", "c2"]),
    )
    specs = [PredictorSpec("knn"), PredictorSpec("multinomial_logistic")]
    tables = {t: rank_features_at_time(cohort, t, specs, seed=4) for t in range(t_in)}
    table = build_trajectories(tables, top_k=10)
    in_top = all(("sig", "planted") in {(f.modality, f.feature) for f in ranked}
                 for ranked in table.rankings.values())
    linked = all((f"sig/planted", t, t + 1) in table.links for t in range(t_in - 1))
    noise = next(f for f in tables[0] if (f.modality, f.feature) == ("junk", "jn0"))
    noise_ok = abs(noise.score) <= 2.0 * noise.sd + 1e-12
    verdict(8, "interpretation-sanity", in_top and linked and noise_ok,
            f"planted in top-10 at all visits: {in_top}; unbroken trajectory: {linked}; "
            f"noise score {noise.score:.4f} within 2 SDs ({noise.sd:.4f}) of zero")


# ---------------------------------------------------------------------------
# 9: byte-identical reruns across thread counts

def test_criterion_9_thread_determinism(tmp_path):
    gen = GeneratorConfig(
        n_samples=30, modality_specs=(ModalitySpec("feat", 3, 1.0, 0.1),),
        target_proportions=np.array([[0.5, 0.5, 0.0], [0.4, 0.4, 0.2], [0.3, 0.4, 0.3]]),
        time_point_count=3, seed=0)
    base = dict(configuration=4, generator=gen.to_dict(),
                predictor_specs=[PredictorSpec("multinomial_logistic").to_dict()],
                repeats=3, stacker_epochs=40, stacker_hidden=[6], seed=3)
    identical = True
    for command, extra in (("run", {}),
                           ("compare", {"configurations": [2, 4],
                                        "baselines": ["baseline_longitudinal"],
                                        "repeats": 2})):
        cfg_path = tmp_path / f"{command}.json"
        cfg_path.write_text(json.dumps({**base, **extra}), encoding="utf-8")
        out1 = tmp_path / f"{command}-t1"
        out8 = tmp_path / f"{command}-t8"
        assert cli_main([command, "--config", str(cfg_path), "--out", str(out1),
                         "--threads", "1"]) == 0
        assert cli_main([command, "--config", str(out1 / "manifest.json"),
                         "--out", str(out8), "--threads", "8"]) == 0
        for name in ("report.csv", "summary.csv"):
            identical &= (out1 / name).read_bytes() == (out8 / name).read_bytes()
    verdict(9, "thread-determinism", identical,
            "run and compare manifests replayed at 1 and 8 threads, reports byte-identical")


# ---------------------------------------------------------------------------
# 6 + 7: full-protocol trend reproduction (the long runs)

def test_criterion_6_head_ordering_trend():
    started = time.monotonic()
    gen = trend_preset()
    cohort = generate(gen)
    config = ExperimentConfig(configuration=4, generator=gen, repeats=20)
    reports = compare_configurations(cohort, config, configurations=(1, 2, 3, 4))
    long_head = (reports[2].macro_f + reports[4].macro_f) / 2.0
    mlp_head = (reports[1].macro_f + reports[3].macro_f) / 2.0
    first_wins = int((long_head[:, 0] < mlp_head[:, 0]).sum())
    final_wins = int((long_head[:, -1] > mlp_head[:, -1]).sum())
    med_ok = (np.median(long_head[:, 0]) < np.median(mlp_head[:, 0])
              and np.median(long_head[:, -1]) > np.median(mlp_head[:, -1]))
    elapsed = time.monotonic() - started
    verdict(6, "head-ordering-trend",
            med_ok and first_wins >= 15 and final_wins >= 15 and elapsed < 1800.0,
            f"longitudinal heads behind at first visit in {first_wins}/20, "
            f"ahead at final visit in {final_wins}/20, medians ordered {med_ok}, "
            f"{elapsed / 60.0:.1f} min")


def test_criterion_7_interaction_vs_baseline():
    started = time.monotonic()
    gen = interaction_preset()
    cohort = generate(gen)
    config = ExperimentConfig(configuration=4, generator=gen, repeats=20)
    reports = compare_configurations(cohort, config, configurations=(4,),
                                     baselines=("baseline_time_distributed",))
    stacked = reports[4].macro_f
    fusion = reports["baseline_time_distributed"].macro_f
    last2 = slice(stacked.shape[1] - 2, stacked.shape[1])
    med_gap = np.median(stacked, axis=0) - np.median(fusion, axis=0)
    paired = np.median(stacked - fusion, axis=0)
    ok = bool((med_gap[last2] > 0).all() and (paired[last2] > 0).all())
    elapsed = time.monotonic() - started
    verdict(7, "interaction-vs-baseline", ok,
            f"median gap at final two visits {med_gap[last2].round(3).tolist()}, "
            f"median paired difference {paired[last2].round(3).tolist()}, "
            f"{elapsed / 60.0:.1f} min")
