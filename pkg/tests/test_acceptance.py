"""End-to-end acceptance checks, one test per criterion.

Each test records a ``criterion N: PASS|FAIL`` line with its pinned
tolerance; the lines are repeated together in the terminal summary.
Criteria 5-8 share one toy study (3 seeds x 4 loss variants), which takes
roughly 1.5-2 h on one CPU core. Deselect it with ``-m "not slow"``.
"""
import math
import time

import numpy as np
import pytest

from conftest import TINY_SIZE, make_pool, make_tiny_teacher
from test_constraints import _random_case, bank_of, t
from test_gradients import CASES, N_INSTANCES, REL_TOL, grad_error
from fd2.config import PipelineConfig
from fd2.constraints import fg_constraint, prototype_score, total_loss
from fd2.data import quantize, toy_dataset
from fd2.distill import distill_dataset, plan_groups
from fd2.metrics import attention_diversity, distilled_metrics, distilled_signals
from fd2.models import parameter_hash
from fd2.pipeline import run_pipeline, setup_determinism, toy_spec
from fd2.pretrain import head_accuracies, pretrain
from fd2.softlabel import evaluate, generate_soft_labels, train_student
from fd2.theory import run_all

RESULTS = {}

# pinned tolerances
IDENTITY_TOL = 1e-12
IDENTITY_SECONDS = 10.0
THEORY_TRIALS = 1000
THEORY_SECONDS = 120.0
GRAD_SECONDS = 60.0
SIMPLEX_TOL = 1e-5
TEACHER_MIN_VAL = 0.80
GAIN_POINTS = 2.0
ABLATION_SLACK_POINTS = 0.5
PREFIX_SLACK = 1e-12
STUDY_SEEDS = (0, 1, 2)
VARIANTS = {"none": dict(use_constraints=False), "fg": dict(lam=1.0), "sim": dict(lam=0.0), "both": dict(lam=0.8)}


def record(n, ok, detail):
    line = f"criterion {n}: {'PASS' if ok else 'FAIL'}  {detail}"
    RESULTS[n] = line
    print(line)
    assert ok, line


def test_criterion_1_algebraic_identities():
    t0 = time.perf_counter()
    rng = np.random.default_rng(2024)
    worst = 0.0
    for _ in range(1000):
        z, protos, y, beta = _random_case(rng)
        bank = bank_of(protos)
        s = float(fg_constraint(t(z), bank, y, beta) + prototype_score(t(z), bank, y, beta))
        worst = max(worst, abs(s - (1 - beta)))
    comp = total_loss(0.25, 0.5, 0.125, 0.0625, lam=0.8).l_total
    exact = comp == 0.25 + 0.5 + 0.8 * 0.125 + (1.0 - 0.8) * 0.0625
    first = total_loss(0.25, 0.5, 0.125, 0.0, lam=0.8).l_total == 0.25 + 0.5 + 0.8 * 0.125
    elapsed = time.perf_counter() - t0
    ok = worst < IDENTITY_TOL and exact and first and elapsed < IDENTITY_SECONDS
    record(1, ok, f"max |L_F + score - (1-beta)| = {worst:.2e} (< {IDENTITY_TOL:g}) over 1000 instances; "
                  f"total_loss composition exact = {exact and first}; {elapsed:.2f}s (< {IDENTITY_SECONDS:g}s)")


def test_criterion_2_theory_verifiers():
    t0 = time.perf_counter()
    results = run_all(trials=THEORY_TRIALS, seed=0)
    elapsed = time.perf_counter() - t0
    parts = [f"{r.statement}: {r.violations}/{r.trials} violations, witness={r.witness}" for r in results]
    ok = (len(results) == 6 and all(r.trials == THEORY_TRIALS and r.passed for r in results)
          and elapsed < THEORY_SECONDS)
    record(2, ok, f"{'; '.join(parts)}; {elapsed:.1f}s (< {THEORY_SECONDS:g}s)")


def test_criterion_3_gradient_checks():
    t0 = time.perf_counter()
    worst = {}
    for name, make in CASES.items():
        worst[name] = max(grad_error(fn, x) for seed in range(N_INSTANCES) for fn, x in make(seed))
    elapsed = time.perf_counter() - t0
    ok = all(v < REL_TOL for v in worst.values()) and elapsed < GRAD_SECONDS
    detail = ", ".join(f"{k} {v:.1e}" for k, v in worst.items())
    record(3, ok, f"max relative error over {N_INSTANCES} fp64 instances each: {detail} (< {REL_TOL:g}); "
                  f"{elapsed:.1f}s (< {GRAD_SECONDS:g}s)")


def test_criterion_4_structural_laws():
    plan_ok = True
    for ipc in range(1, 65):
        for n_s in range(1, 65):
            g = plan_groups(ipc, n_s).groups
            plan_ok &= (sum(g) == ipc and len(g) == math.ceil(ipc / n_s) and all(n == n_s for n in g[:-1])
                        and 1 <= g[-1] <= n_s)

    teacher = make_tiny_teacher()
    before = parameter_hash(teacher.model)
    cfg = PipelineConfig(image_size=TINY_SIZE, num_classes=2, channels=(4, 8), ipc=9, group_size=4,
                         distill_steps=2, seed=0)
    hist = []
    ds = distill_dataset(teacher, make_pool(), cfg, history=hist)
    first = [h for h in hist if h["priors"] == 0]
    ls_zero = len(first) == 3 and all(float(s["l_s"].abs().max()) == 0.0 for h in first for s in h["steps"])
    hash_ok = parameter_hash(teacher.model) == before

    worst = 0.0
    negative = False
    for mode in ("offline", "online"):
        probs = generate_soft_labels(teacher, ds, mode=mode, tau=4.0, epochs=3).probs
        worst = max(worst, float((probs.sum(-1) - 1).abs().max()))
        negative |= bool((probs < 0).any())
    simplex_ok = worst <= SIMPLEX_TOL and not negative
    ok = plan_ok and ls_zero and hash_ok and simplex_ok
    record(4, ok, f"plan laws for 1<=IPC,N_S<=64: {plan_ok}; L_S == 0 on all {len(first)} group-first samples: "
                  f"{ls_zero}; teacher hash unchanged: {hash_ok}; soft labels >= 0 and "
                  f"max |sum-1| = {worst:.1e} (<= {SIMPLEX_TOL:g})")


def prefix_diversities(attn, labels, k, group_size):
    """Diversity of the first i samples of each class's first group, i = 1..n."""
    sets = attn[labels == k][:group_size]
    return [attention_diversity(sets[:i]) for i in range(1, len(sets) + 1)]


@pytest.fixture(scope="session")
def toy_study():
    runs = {}
    for seed in STUDY_SEEDS:
        cfg = PipelineConfig(seed=seed)
        setup_determinism(seed, True)
        train, val, test = (toy_dataset(toy_spec(cfg), s) for s in ("train", "val", "test"))
        teacher = pretrain(train, val, cfg)
        val_acc = head_accuracies(teacher.model, val)[0]
        variants = {}
        for name, change in VARIANTS.items():
            vcfg = cfg.replace(**change)
            setup_determinism(seed, True)
            ds = distill_dataset(teacher, train, vcfg)
            ds.images = quantize(ds.images)  # what the saved PNGs hold
            store = generate_soft_labels(teacher, ds, vcfg.softlabel_mode, vcfg.tau, vcfg.aug_policy, seed,
                                         epochs=vcfg.student_epochs)
            student = train_student(ds, store, vcfg)
            means = distilled_metrics(teacher, ds).means()
            _, attn, labels = distilled_signals(teacher, ds)
            prefixes = [prefix_diversities(attn, labels, k, vcfg.group_size) for k in range(ds.num_classes)]
            variants[name] = dict(top1=evaluate(student, test), prefixes=prefixes, **means)
        runs[seed] = dict(teacher_val=val_acc, variants=variants)
    return runs


def _seed_table(study, key, fmt="{:.3f}"):
    return "; ".join(f"seed {s}: " + " ".join(f"{v}={fmt.format(r['variants'][v][key])}" for v in VARIANTS)
                     for s, r in study.items())


@pytest.mark.slow
def test_criterion_5_constraints_beat_baseline(toy_study):
    vals = {s: r["teacher_val"] for s, r in toy_study.items()}
    on = np.mean([r["variants"]["both"]["top1"] for r in toy_study.values()]) * 100
    off = np.mean([r["variants"]["none"]["top1"] for r in toy_study.values()]) * 100
    ok = all(v >= TEACHER_MIN_VAL for v in vals.values()) and on - off >= GAIN_POINTS
    record(5, ok, f"teacher val top-1 {', '.join(f'{v:.3f}' for v in vals.values())} (>= {TEACHER_MIN_VAL}); "
                  f"student top-1 constraints on {on:.2f}% vs off {off:.2f}%, gain {on - off:+.2f} points "
                  f"(>= {GAIN_POINTS}) over seeds {STUDY_SEEDS}; per seed: {_seed_table(toy_study, 'top1')}")


@pytest.mark.slow
def test_criterion_6_geometry_direction(toy_study):
    rows, ok = [], True
    for s, r in toy_study.items():
        on, off = r["variants"]["both"], r["variants"]["none"]
        good = on["intra_dispersion"] < off["intra_dispersion"] and on["nn_center_distance"] > off["nn_center_distance"]
        ok &= good
        rows.append(f"seed {s}: dispersion {on['intra_dispersion']:.4f} vs {off['intra_dispersion']:.4f}, "
                    f"nn distance {on['nn_center_distance']:.4f} vs {off['nn_center_distance']:.4f}")
    record(6, ok, "constraints on vs off, strict per seed: " + "; ".join(rows))


@pytest.mark.slow
def test_criterion_7_diversity_direction(toy_study):
    rows, ok = [], True
    for s, r in toy_study.items():
        on, off = r["variants"]["both"], r["variants"]["none"]
        higher = on["attention_trace"] > off["attention_trace"]
        drops = [max(p[i] - p[i + 1] for i in range(len(p) - 1)) for p in on["prefixes"] if len(p) > 1]
        monotone = all(d <= PREFIX_SLACK for d in drops)
        ok &= higher and monotone
        rows.append(f"seed {s}: trace {on['attention_trace']:.5f} vs {off['attention_trace']:.5f}, "
                    f"prefix nondecreasing in all classes {monotone} (largest drop {max(drops):.1e})")
    record(7, ok, f"constraints on vs off, strict per seed; prefix slack {PREFIX_SLACK:g}: " + "; ".join(rows))


@pytest.mark.slow
def test_criterion_8_ablation_shape(toy_study):
    mean = {v: np.mean([r["variants"][v]["top1"] for r in toy_study.values()]) * 100 for v in VARIANTS}
    ok = mean["both"] >= max(mean["fg"], mean["sim"]) - ABLATION_SLACK_POINTS
    record(8, ok, f"mean student top-1 over seeds {STUDY_SEEDS}: "
                  + ", ".join(f"{v} {m:.2f}%" for v, m in mean.items())
                  + f"; both >= max(fg, sim) - {ABLATION_SLACK_POINTS} points")


def test_criterion_9_determinism(tmp_path):
    def cfg(out):
        return PipelineConfig(image_size=48, num_classes=3, toy_train_per_class=8, toy_val_per_class=2,
                              toy_test_per_class=4, channels=(8, 16), num_attention_maps=2, pretrain_epochs=2,
                              pretrain_batch=8, ipc=5, group_size=4, distill_steps=4, student_epochs=3,
                              student_batch=4, student_arch="convnet3", seed=7, deterministic=True, out_dir=str(out))

    a = run_pipeline(cfg(tmp_path / "a"))
    b = run_pipeline(cfg(tmp_path / "b"))
    stages = [s for s, _, _ in a.artifacts]
    ok = a.artifacts == b.artifacts and len(set(stages)) == 6
    record(9, ok, f"{len(a.artifacts)} artifact fingerprints over stages {sorted(set(stages))} identical across "
                  f"two runs: {a.artifacts == b.artifacts}")
