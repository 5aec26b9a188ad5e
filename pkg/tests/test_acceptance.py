"""Acceptance criteria 1-10. Each test prints one PASS/FAIL line, then asserts."""

import time

import numpy as np
import pytest

from dcrlab import autodiff as ad
from dcrlab.autodiff import finite_diff_check
from dcrlab.data import make_synthetic_task
from dcrlab.engine import MethodConfig, flat_grad, forward_losses, training_step
from dcrlab.gates import dcr_aggr20, schedule_value, theseus_aggr20
from dcrlab.harness import DEFAULT_GRID, run_grid
from dcrlab.model import MicroTransformer, ModelSpec, model_forward
from dcrlab.theory import (SuiteConfig, mid_replacement_snapshot, probe_batches, hard_gate_check, gate_variance_check,
                           curvature_check, path_bound_check, soft_gate_check)
from test_autodiff import BINARY, UNARY


@pytest.fixture
def report(capsys):
    def emit(n, ok, detail):
        with capsys.disabled():
            print(f"\n[acceptance {n:>2}] {'PASS' if ok else 'FAIL'}  {detail}")
        assert ok, detail
    return emit


@pytest.fixture(scope="module")
def snapshot(full_teacher):
    cfg, teacher, acc = full_teacher
    suite = SuiteConfig()
    model, alpha = mid_replacement_snapshot(cfg, teacher, acc, suite.snapshot_fraction)
    _, val = make_synthetic_task(cfg.task())
    return cfg, model, alpha, val, suite


@pytest.fixture(scope="module")
def grid(full_teacher, tmp_path_factory):
    cfg, _, _ = full_teacher
    out = tmp_path_factory.mktemp("grid")
    start = time.perf_counter()
    ranked = run_grid(cfg.replace(out_dir=str(out)), DEFAULT_GRID)
    return {s["method"]: s for s in ranked}, time.perf_counter() - start


def test_teacher_reaches_95_percent(full_teacher, report):
    _, _, acc = full_teacher
    report(0, acc >= 0.95, f"teacher val acc {acc:.4f} (need >= 0.95)")


def test_1_theseus_closed_form(report):
    start = time.perf_counter()
    rec = hard_gate_check(n=100_000)
    secs = time.perf_counter() - start
    report(1, rec.passed and secs < 30, f"worst |z| {rec.observed:.2f} <= 3, {secs:.1f}s < 30s")


def test_2_gate_variance_on_live_model(snapshot, report):
    cfg, model, alpha, val, suite = snapshot
    rng = np.random.default_rng([cfg.seed, 11])
    batches = probe_batches(val.tokens, val.labels, suite.variance_batches, suite.probe_batch_size, rng)
    start = time.perf_counter()
    rec = gate_variance_check(model, batches, p=0.5, draws=32, other_alpha=alpha, seed=cfg.seed)
    secs = time.perf_counter() - start
    dcr_zero = all(c["dcr_gate_variance"] == 0.0 for c in rec.detail["cases"])
    report(2, rec.passed and secs < 300,
           f"DCR variance exactly 0: {dcr_zero}; worst Theseus rel err {rec.observed:.3f} <= 0.10; {secs:.0f}s < 300s")


def test_3_soft_gate(report):
    rec = soft_gate_check(n=100_000)
    report(3, rec.passed, f"worst |z| {rec.observed:.2f} <= 3, monotone in Var(r): {rec.detail['monotone_in_var_r']}")


def test_4_curvature_bias(report):
    rec = curvature_check(100)
    d = rec.detail
    report(4, rec.passed, f"violations {d['violations']}/100, quadratic equality {d['equality_on_quadratics']} "
                          f"(max gap {d['max_quadratic_gap']:.1e}), DCR bias 0: {d['dcr_bias_zero']}")


def test_5_loss_path(snapshot, report):
    cfg, model, alpha, val, suite = snapshot
    rng = np.random.default_rng([cfg.seed, 12])
    pairs = probe_batches(val.tokens, val.labels, 20, suite.probe_batch_size, rng)
    rec = path_bound_check(model, pairs, grid_points=21, other_alpha=alpha, seed=cfg.seed)
    report(5, rec.passed, f"max violation {rec.observed:.3e} <= 0 over 20 pairs x 21 points")


def test_6_finite_differences(report):
    worst = 0.0
    for seed in range(10):
        rng = np.random.default_rng([seed, 17])
        for f in UNARY.values():
            x = ad.Tensor(rng.uniform(-2, 2, (3, 4)), requires_grad=True)
            worst = max(worst, finite_diff_check(f, x))
        for f in BINARY.values():
            a, b = rng.uniform(-2, 2, (3, 4)), rng.uniform(-2, 2, (3, 4))
            worst = max(worst, finite_diff_check(lambda t: f(t, ad.Tensor(b)).sum(),
                                                 ad.Tensor(a, requires_grad=True)))
            worst = max(worst, finite_diff_check(lambda t: f(ad.Tensor(a), t).sum(),
                                                 ad.Tensor(b, requires_grad=True)))
    spec = ModelSpec()
    model_worst = 0.0
    for seed in range(10):
        model = MicroTransformer(spec, seed=seed).attach_students(seed + 100)
        rng = np.random.default_rng(seed)
        tokens = rng.integers(0, spec.vocab_size, (4, spec.seq_len))
        labels = rng.integers(0, spec.num_classes, 4)
        site = 1 + seed % spec.depth
        student = model.sites[site].student

        # every branch differentiable: the teacher path is detached by design
        def loss(w, student=student, model=model):
            student.wq = w
            return forward_losses(model, tokens, labels, MethodConfig("student_only"), 0.5, {})[0]

        coords = rng.choice(student.wq.size, 12, replace=False)
        x = ad.Tensor(student.wq.data.copy(), requires_grad=True)
        model_worst = max(model_worst, finite_diff_check(loss, x, coords=coords))
    ok = worst <= 1e-5 and model_worst <= 1e-5
    report(6, ok, f"max rel err ops {worst:.1e}, full model loss {model_worst:.1e} (<= 1e-5, 10 seeds each)")


def test_7_structural_invariants(full_teacher, report):
    cfg, teacher, _ = full_teacher
    model = teacher.copy().attach_students(cfg.seed, cfg.replaced)
    train, _ = make_synthetic_task(cfg.task())
    batch = (train.tokens[:32], train.labels[:32])
    ones = {l: 1.0 for l in model.sites}
    blended = model_forward(model, batch[0], ones, "dcr_blend").logits.data
    alone = model_forward(teacher, batch[0]).logits.data
    endpoint = np.array_equal(blended, alone)

    skip = training_step(model, batch, MethodConfig("dcr"), 0.5, np.random.default_rng(0))
    g_skip = flat_grad(model.student_parameters())
    full = training_step(model, batch, MethodConfig("dcr"), 0.5, np.random.default_rng(0), need_teacher=True)
    skip_ok = skip.teacher_evals == 0 and np.array_equal(g_skip, flat_grad(model.student_parameters()))
    skip_ok = skip_ok and full.teacher_evals == len(model.sites)

    no_teacher_grad, additive = True, True
    for kind in ("dcr", "dcr_dfg", "theseus", "theseus_gumbel", "student_only", "kd"):
        method = MethodConfig(kind)
        out = training_step(model, batch, method, 0.07, np.random.default_rng(1))
        no_teacher_grad &= all(p.grad is None or not np.any(p.grad) for p in model.teacher_parameters())
        expected = out.task_loss + out.dfg_lambda * out.dfg_loss
        if kind == "kd":
            expected = expected + method.kd_weight * out.kd_loss
        additive &= out.total_loss == expected
    ok = endpoint and skip_ok and no_teacher_grad and additive
    report(7, ok, f"alpha=1 bit-identical {endpoint}, teacher skipped with identical grads {skip_ok}, "
                  f"teacher grads zero {no_teacher_grad}, loss additive {additive}")


def test_8_convergence_ordering(grid, report):
    runs, secs = grid
    steps = {m: runs[m]["steps_to_threshold"] for m in DEFAULT_GRID}
    inf = float("inf")
    s = {m: inf if v is None else v for m, v in steps.items()}
    others = [m for m in DEFAULT_GRID if m != "student_only"]
    ok = (s["dcr_dfg"] <= s["dcr"] < s["theseus"] and all(s["student_only"] > s[m] for m in others)
          and secs < 900)
    text = ", ".join(f"{m} {'never' if v is None else v}" for m, v in steps.items())
    report(8, ok, f"steps to 90% of teacher: {text}; grid {secs:.0f}s < 900s")


def test_9_interface_similarity(grid, report):
    runs, _ = grid
    dfg, th = runs["dcr_dfg"]["final_cos"], runs["theseus"]["final_cos"]
    all_high = all(v >= 0.9 for v in dfg.values())
    beats = sum(dfg[k] >= th[k] for k in dfg)
    text = ", ".join(f"block {k}: {dfg[k]:.3f} vs {th[k]:.3f}" for k in sorted(dfg))
    report(9, all_high and beats >= 3, f"DCR+DFG vs Theseus final cos ({text}); all >= 0.9: {all_high}, "
                                       f"wins {beats}/4 (need 3)")


def test_10_schedule_exactness(report):
    ts = (0.0, 0.10, 0.20, 1.0)
    dcr = [schedule_value(dcr_aggr20(), t) for t in ts]
    th = [schedule_value(theseus_aggr20(), t) for t in ts]
    ok = dcr == [1.0, 0.3, 0.0, 0.0] and th == [0.1, 0.7, 1.0, 1.0]
    report(10, ok, f"dcr_aggr20 {dcr}, theseus_aggr20 {th}")
