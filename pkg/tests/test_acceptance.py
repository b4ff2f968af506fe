"""End-to-end acceptance gate: one verdict line per criterion.

Each test records ``PASS``/``FAIL`` with the measured value next to its
threshold and then asserts, so the summary shows every criterion even when
some fail.  The case-study episodes are shared through module fixtures.
"""
import math
import time

import numpy as np
import pytest

from conftest import ACCEPTANCE_LINES
from lyaplearn.cli import grad_check_system
from lyaplearn.controller import (
    SaturationConfig,
    format_params,
    load_params,
    save_params,
    saturate,
    saturate_on,
)
from lyaplearn.diffgraph import Graph
from lyaplearn.dynamics import PlantModel, Variant, simulate
from lyaplearn.experiments import compute_metrics, example_config, run_episode, write_csv
from lyaplearn.learner import PenaltyConfig, penalty

SEEDS = (0, 1, 2)


def verdict(number: int, title: str, ok: bool, detail: str) -> None:
    line = f"[{'PASS' if ok else 'FAIL'}] criterion {number:2d} {title}: {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)
    assert ok, line


def timed(fn, *args):
    start = time.perf_counter()
    out = fn(*args)
    return out, time.perf_counter() - start


@pytest.fixture(scope="module")
def ex1_runs():
    runs = []
    for seed in SEEDS:
        learned, seconds = timed(run_episode, example_config(1, seed=seed))
        tested = run_episode(example_config(1, mode="test", seed=seed), learned.params)
        runs.append((learned, seconds, tested))
    return runs


@pytest.fixture(scope="module")
def ex2_runs():
    return [run_episode(example_config(2, seed=seed)) for seed in SEEDS]


@pytest.fixture(scope="module")
def ex3_runs():
    runs = []
    for seed in SEEDS:
        learned = run_episode(example_config(3, seed=seed))
        runs.append((learned, run_episode(example_config(3, mode="test", seed=seed), learned.params)))
    return runs


def test_criterion_01_gradient_oracle():
    rng = np.random.default_rng(2024)
    start = time.perf_counter()
    errors = {n: grad_check_system(example_config(n), 20, rng) for n in (1, 2, 3)}
    seconds = time.perf_counter() - start
    worst = max(errors.values())
    verdict(1, "gradient oracle", worst < 1e-4 and seconds < 10.0,
            f"max rel error {worst:.2e} (< 1e-4) over 3x20 points in {seconds:.2f}s (< 10s)")


def test_criterion_02_saturation_invariant():
    cfg = SaturationConfig(50.0, -50.0)
    raw = np.random.default_rng(7).uniform(-1e6, 1e6, 100_000)
    raw[:4] = [1e6, -1e6, 0.0, 123.0]
    out = np.array([saturate(float(u), cfg) for u in raw])
    inside = bool(np.all((out > -50.0) & (out < 50.0)))
    g = Graph()
    u = g.param(0.0)
    slope = g.backward(saturate_on(g, u, cfg))[u]
    verdict(2, "saturation invariant", inside and abs(slope - 1.0) <= 1e-9,
            f"range [{float(out.min())!r}, {float(out.max())!r}] strictly inside (-50, 50): {inside}; "
            f"slope at 0 = {slope:.12f}")


def test_criterion_03_penalty_properties():
    cfg = PenaltyConfig(0.1, 1.0, 1.0)
    pairs = np.random.default_rng(3).uniform(-50, 50, (10_000, 2))
    monotone = all(penalty(min(a, b), cfg) <= penalty(max(a, b), cfg) for a, b in pairs)
    far, mid = penalty(-10.0, cfg), penalty(-0.1, cfg)
    ok = monotone and far < 1e-4 and abs(mid - math.log(2)) <= 1e-9
    verdict(3, "penalty properties", ok,
            f"monotone on 1e4 pairs: {monotone}; penalty(-10) = {far:.4e}; |penalty(-0.1) - ln 2| = {abs(mid - math.log(2)):.1e}")


def test_criterion_04_integrator_oracle():
    model = PlantModel(Variant.LINEAR2, 9.0, 6.0, 6.0)
    r1, r2 = (-9 + math.sqrt(57)) / 2, (-9 - math.sqrt(57)) / 2
    c1, c2 = -r2 / (r1 - r2), r1 / (r1 - r2)

    def max_error(dt):
        n = round(1.0 / dt)
        xs = simulate(model, [1.0, 0.0], np.zeros(n), dt)
        t = np.arange(n + 1) * dt
        return float(np.max(np.abs(xs[:, 0] - (c1 * np.exp(r1 * t) + c2 * np.exp(r2 * t)))))

    e1, e2 = max_error(1e-3), max_error(5e-4)
    ratio = e1 / e2
    verdict(4, "integrator oracle", e1 <= 0.01 and 1.7 <= ratio <= 2.3,
            f"max abs error {e1:.2e} (<= 0.01); dt/(dt/2) error ratio {ratio:.3f} (in [1.7, 2.3])")


def test_criterion_05_example1_learning(ex1_runs):
    settle = [compute_metrics(r.records, 0.25, 5.0).settle_time_s for r, _, _ in ex1_runs]
    tail = [r.metrics.max_abs_error_tail for r, _, _ in ex1_runs]
    slowest = max(s for _, s, _ in ex1_runs)
    aborted = [r.aborted for r, _, _ in ex1_runs if r.aborted]
    ok = not aborted and np.median(settle) < 10.0 and np.median(tail) < 0.05 and slowest < 10.0
    verdict(5, "example 1 learning", ok,
            f"median settle(0.25) {np.median(settle):.2f}s (< 10s), median tail max|e| {np.median(tail):.4f} (< 0.05), "
            f"slowest episode {slowest:.2f}s (< 10s), seeds {list(SEEDS)}")


def test_criterion_06_example1_test(ex1_runs):
    tail = [t.metrics.max_abs_error_tail for _, _, t in ex1_runs]
    med = float(np.median(tail))
    stretch = "met" if med < 0.01 else "not met"
    verdict(6, "example 1 test", med < 0.05 and not any(t.aborted for _, _, t in ex1_runs),
            f"median tail max|e| {med:.4f} (< 0.05); stretch target < 0.01 {stretch}")


def test_criterion_07_example2(ex2_runs):
    rmse = [r.metrics.rmse_tail for r in ex2_runs]
    verdict(7, "example 2 tracking", float(np.median(rmse)) < 0.1 and not any(r.aborted for r in ex2_runs),
            f"median tail RMSE {np.median(rmse):.4f} (< 0.1), per seed {[round(v, 4) for v in rmse]}")


def test_criterion_08_example3_robustness(ex3_runs):
    p90 = [t.metrics.p90_abs_error for _, t in ex3_runs]
    umax = max(max(abs(rec.u_sat) for rec in t.records) for _, t in ex3_runs)
    ok = float(np.median(p90)) <= 0.3 and umax < 50.0 and not any(t.aborted for _, t in ex3_runs)
    verdict(8, "example 3 robustness", ok,
            f"median p90|e| {np.median(p90):.4f} (<= 0.3), per seed {[round(v, 4) for v in p90]}, "
            f"max |u| {umax:.2f} (< 50)")


def test_criterion_09_constraint_pressure(ex1_runs, ex2_runs):
    episodes = [r for r, _, _ in ex1_runs] + list(ex2_runs)
    pairs = [(r.metrics.penalty_head_mean, r.metrics.penalty_tail_mean) for r in episodes]
    ok = all(tail < head for head, tail in pairs)
    verdict(9, "constraint pressure decreases", ok,
            "head -> tail mean penalty " + ", ".join(f"{h:.3f}->{t:.3f}" for h, t in pairs))


def test_criterion_10_determinism(ex1_runs, tmp_path):
    first, _, _ = ex1_runs[0]
    again = run_episode(example_config(1, seed=SEEDS[0]))
    write_csv(first.records, tmp_path / "a.csv")
    write_csv(again.records, tmp_path / "b.csv")
    same_csv = (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()
    save_params(first.params, tmp_path / "p.txt")
    loaded = load_params(tmp_path / "p.txt")
    same_params = loaded.flat().tobytes() == first.params.flat().tobytes()
    same_text = format_params(loaded) == (tmp_path / "p.txt").read_text()
    verdict(10, "determinism", same_csv and same_params and same_text,
            f"byte-identical CSV: {same_csv}; parameters round-trip bitwise: {same_params and same_text}")
