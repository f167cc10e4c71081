"""Acceptance criteria, one test each. Every test prints a PASS/FAIL line with
the measured value; the lines are repeated in the terminal summary.

Tolerances are pinned here and nowhere else.
"""
import csv
import math
import statistics
import time

import numpy as np
import pytest

from conftest import record
from _gradcases import ALL_OPS, INSTANCES, LAYER_OPS, LOSS_OPS, STEP, TOL, max_error
from oracles import centroid_oracle, largest_component_oracle
from veinseg import cli
from veinseg.data_io import generate_dataset
from veinseg.experiment import benchmark_config, run_benchmark, run_cross_validation
from veinseg.losses import LossWeights, total_loss
from veinseg.metrics import centroid_error, dsc, failure_rate, write_results_csv, write_summary_csv
from veinseg.network import STAGE_NAMES, NetConfig, build_model, stage_shapes
from veinseg.postprocess import centroid, largest_component, plan_puncture
from veinseg.trainer import TrainConfig, ema_update, mean_dsc, prepare_eval, prepare_masks, train_supervised

pytestmark = pytest.mark.acceptance

GRAD_BUDGET_S = 60.0
EXACT_TOL = 1e-9
OVERFIT_DSC, OVERFIT_EPOCHS, OVERFIT_BUDGET_S = 0.95, 500, 300.0
BENCH_MARGIN, BENCH_BUDGET_S = 0.01, 30 * 60.0
AXIS6_MM, AXIS6_TOL = 34.20, 0.01

# output column of the layer table for a 64x64 single-channel input: (channels, side)
LAYER_TABLE = [(64, 32), (256, 16), (512, 8), (256, 16), (256, 16), (256, 16), (128, 32), (128, 32),
               (128, 32), (64, 64), (64, 64), (64, 64), (2, 64)]


def test_criterion_01_gradients():
    assert set(ALL_OPS) == set(LAYER_OPS) | set(LOSS_OPS) and len(LAYER_OPS) == 7 and len(LOSS_OPS) == 4
    t0 = time.perf_counter()
    errors = {op: max_error(op) for op in sorted(ALL_OPS)}
    elapsed = time.perf_counter() - t0
    worst_op = max(errors, key=lambda k: errors[k][0])
    worst = errors[worst_op][0]
    counts = min(n for _, n in errors.values())
    ok = worst <= TOL and counts >= INSTANCES and elapsed <= GRAD_BUDGET_S and STEP == 1e-5
    record(1, ok, f"{len(errors)} ops x >= {counts} instances, worst rel err {worst:.2e} ({worst_op}), "
                  f"{elapsed:.1f} s")
    assert ok


def test_criterion_02_stage_shapes():
    shapes = stage_shapes(build_model(0))
    got = [(s[1], s[2]) for s in shapes.values()]
    square = all(s[2] == s[3] for s in shapes.values())
    ok = list(shapes) == list(STAGE_NAMES) and len(got) == 13 and got == LAYER_TABLE and square
    record(2, ok, f"{sum(g == e for g, e in zip(got, LAYER_TABLE))}/13 stages match")
    assert ok


def test_criterion_03_equations():
    errs = [
        abs(total_loss(0.4, 0.2, LossWeights(1, 1, 4, 4)) - 0.3),
        abs(total_loss(0.4, 123.0, LossWeights(2.0, 1, 4, 0)) - 0.8),
        abs(total_loss(0.2, 0.1, LossWeights(1, 0.5, 300, 900)) - 0.0875),
        abs(ema_update(1.0, 0.0, 0.99) - 0.99),
    ]
    t = 0.0
    for s, want in zip((1.0, 2.0, 3.0), (0.5, 1.25, 2.125)):
        t = ema_update(t, s, 0.5)
        errs.append(abs(t - want))
    m = np.zeros((3, 3), int)
    m[0, 0] = m[0, 2] = m[2, 0] = m[2, 2] = 1
    errs += [abs(a - b) for a, b in zip(centroid(m), (1.0, 1.0))]
    rng = np.random.default_rng(1)
    m = np.zeros((64, 64), int)
    m.flat[rng.choice(64 * 64, 200, replace=False)] = 1
    errs += [abs(a - b) for a, b in zip(centroid(m), centroid_oracle(m))]
    worst = max(errs)
    ok = worst <= EXACT_TOL
    record(3, ok, f"{len(errs)} checks, max abs deviation {worst:.1e}")
    assert ok


def test_criterion_04_postprocess_oracle():
    rng = np.random.default_rng(2024)
    mismatches = 0
    for _ in range(1000):
        m = rng.random((64, 64)) < rng.uniform(0.05, 0.6)
        want = largest_component_oracle(m)
        got = largest_component(m)
        if not np.array_equal(got, want):
            mismatches += 1
        elif want.any() and centroid(got) != centroid_oracle(want):
            mismatches += 1
    ok = mismatches == 0
    record(4, ok, f"1000 random grids, {mismatches} mismatches")
    assert ok


def test_criterion_05_metric_identities():
    rng = np.random.default_rng(5)
    checks = []
    for _ in range(200):
        a = (rng.random((16, 16)) < 0.3).astype(int)
        b = (rng.random((16, 16)) < 0.3).astype(int)
        a[0, 0] = 1
        checks += [dsc(a, a) == 1.0, dsc(a, b) == dsc(b, a)]
    a = np.zeros((20, 20), int)
    a[:5, :5] = 1
    b = np.zeros_like(a)
    b[10:, 10:] = 1
    checks.append(dsc(a, b) == 0.0)
    x, y = np.zeros(400, int), np.zeros(400, int)
    x[:100], y[50:150] = 1, 1
    checks.append(dsc(x.reshape(20, 20), y.reshape(20, 20)) == 0.5)
    p, g = np.zeros((10, 10), int), np.zeros((10, 10), int)
    p[0, 0], g[4, 3] = 1, 1
    c345 = centroid_error(p, g)
    checks.append(c345 == 5.0)
    checks += [failure_rate([True] * 4 + [False] * 56) == 400 / 60, failure_rate([False] * 60) == 0.0,
               failure_rate([True] * 60) == 100.0, failure_rate([True, False, False, False]) == 25.0]
    ok = all(checks)
    record(5, ok, f"{sum(checks)}/{len(checks)} identities hold, 3-4-5 case = {c345}")
    assert ok


def test_criterion_06_overfit():
    entries = generate_dataset(0, subjects=8, images_per_subject=1, labeled_per_subject=1)
    images, masks = [e.image for e in entries], [e.mask for e in entries]
    cfg = TrainConfig(net=NetConfig(width_div=8, cardinality=4), augment=False, lr_bce=1e-2, lr_focal=5e-3,
                      bce_max_epochs=100, focal_max_epochs=OVERFIT_EPOCHS - 100, patience=50)
    t0 = time.perf_counter()
    res = train_supervised(images, masks, cfg, seed=0)
    elapsed = time.perf_counter() - t0
    epochs = res.history["bce"]["epochs"] + res.history["focal"]["epochs"]
    score = mean_dsc(res.model, prepare_eval(images), prepare_masks(masks), cfg)
    ok = len(images) == 8 and score > OVERFIT_DSC and epochs <= OVERFIT_EPOCHS and elapsed <= OVERFIT_BUDGET_S
    record(6, ok, f"training DSC {score:.4f} after {epochs} epochs, {elapsed:.0f} s")
    assert ok


def test_criterion_07_benchmark():
    t0 = time.perf_counter()
    runs = run_benchmark(seeds=(0, 1, 2), data_seed=0, method="mean_teacher", cfg=benchmark_config())
    elapsed = time.perf_counter() - t0
    sup = [r.mean_dsc("supervised") for r in runs]
    mt = [r.mean_dsc("mean_teacher") for r in runs]
    gains = [b - a for a, b in zip(sup, mt)]
    median_gain = statistics.median(gains)
    ok = (statistics.mean(mt) >= statistics.mean(sup) - BENCH_MARGIN and median_gain > 0
          and elapsed <= BENCH_BUDGET_S)
    per_seed = ", ".join(f"{g:+.4f}" for g in gains)
    record(7, ok, f"supervised {statistics.mean(sup):.4f}, mean teacher {statistics.mean(mt):.4f}, "
                  f"gains per seed [{per_seed}], median {median_gain:+.4f}, {elapsed:.0f} s")
    assert ok


def test_criterion_08_baselines(tmp_path):
    methods = ["pi_model", "temporal_ensemble", "pseudo_label"]
    cfg = benchmark_config()
    entries = generate_dataset(0, subjects=10, images_per_subject=30, labeled_per_subject=6)
    arts = {}
    reports = run_cross_validation(entries, cfg, methods, seed=0, folds=5, artifacts=arts)
    headers, shapes = set(), set()
    for m in methods + ["supervised"]:
        write_results_csv(tmp_path / f"{m}_results.csv", {m: reports[m]})
        write_summary_csv(tmp_path / f"{m}_summary.csv", {m: reports[m]})
        with open(tmp_path / f"{m}_results.csv") as fh:
            rows = list(csv.reader(fh))
        headers.add((tuple(rows[0]), (tmp_path / f"{m}_summary.csv").read_text().splitlines()[0]))
        shapes.add((len(rows) - 1, tuple(len(r) for r in rows[1:2])))
    digests = [arts[f].history["pseudo_label"]["pseudo_digest"] for f in sorted(arts)]
    constant = all(len(d) == cfg.semi_epochs and len(set(d)) == 1 for d in digests)
    ok = all(m in reports for m in methods) and len(headers) == 1 and len(shapes) == 1 and constant
    dscs = ", ".join(f"{m} {reports[m][1].dsc_mean:.4f}" for m in methods)
    record(8, ok, f"{dscs}; one CSV schema: {len(headers) == 1}; pseudo targets constant in "
                  f"{sum(len(set(d)) == 1 for d in digests)}/5 folds")
    assert ok


def test_criterion_09_navigation():
    cmd = plan_puncture((20.0, 10.0 / 0.3), skin_row=0.0, mm_per_pixel=0.3, needle_angle_deg=17.0)
    dx, dy = cmd.tip_displacement()
    tip_err = math.hypot(dx - cmd.axis5_travel_mm, dy - cmd.depth_mm)
    rng = np.random.default_rng(9)
    for _ in range(1000):
        c = plan_puncture((rng.uniform(0, 64), rng.uniform(1, 64)), mm_per_pixel=rng.uniform(0.1, 0.5),
                          needle_angle_deg=rng.uniform(5, 85))
        _, y = c.tip_displacement()
        tip_err = max(tip_err, abs(y - c.depth_mm))
    ok = abs(cmd.depth_mm - 10.0) <= EXACT_TOL and abs(cmd.axis6_travel_mm - AXIS6_MM) <= AXIS6_TOL \
        and tip_err <= EXACT_TOL
    record(9, ok, f"axis6 {cmd.axis6_travel_mm:.4f} mm, worst tip error {tip_err:.1e} mm")
    assert ok


def test_criterion_10_determinism(tmp_path):
    data = tmp_path / "data"
    assert cli.main(["gen-phantom", "--out", str(data), "--seed", "0"]) == 0
    schedule = ["--bce-epochs", "10", "--focal-epochs", "10", "--patience", "5", "--epochs", "2"]
    blobs = []
    for run in ("a", "b"):
        out = tmp_path / run
        assert cli.main(["eval", "--data", str(data), "--out", str(out), "--seed", "7", "--folds", "5",
                         *schedule]) == 0
        blobs.append(((out / "results.csv").read_bytes(), (out / "summary.csv").read_bytes()))
    ok = blobs[0] == blobs[1] and len(blobs[0][0]) > 0
    rows = blobs[0][0].count(b"\n") - 1
    record(10, ok, f"results.csv {len(blobs[0][0])} bytes, {rows} rows, identical: {blobs[0][0] == blobs[1][0]}")
    assert ok
