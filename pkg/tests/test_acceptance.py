"""Acceptance checks; each test prints one ``criterion k: PASS|FAIL`` line."""

import json
import math
import time

import numpy as np
import pytest

from mlgp.cli import run_command
from mlgp.curves import (
    CurveProblem,
    benchmark_problem,
    lc_simulate,
    lc_theory_multi,
    lc_theory_single,
    lowrank_truncate,
    lowrank_truncate_modes,
)
from mlgp.io import load_dataset, load_json, model_document, model_from_document, save_json
from mlgp.model import (
    MultiTaskDataset,
    TrainConfig,
    build_utilde,
    fit,
    mle_subspace_angle,
    nll_dense,
    nll_grad,
    nll_woodbury,
    predict,
    stationarity_residual,
)
from mlgp.tensreg import als_fit, principal_angles

from conftest import fd_gradient_errors, monotone, planted, planted_tucker, random_instance

pytestmark = pytest.mark.acceptance

CURVE_GRID = [0, 1, 2, 4, 8, 16, 64, 256, 1024]


@pytest.fixture
def report(capsys):
    def emit(k, ok, detail):
        with capsys.disabled():
            print(f"\ncriterion {k}: {'PASS' if ok else 'FAIL'} {detail}")
        assert ok, detail

    return emit


def paired_difference(a, b):
    """Mean and SE over replicates of the task-averaged error difference ``a - b``.

    Both results must come from the same seed so the designs are shared.
    """
    d = a.errors.mean(axis=2) - b.errors.mean(axis=2)
    return d.mean(axis=0), d.std(axis=0, ddof=1) / np.sqrt(d.shape[0])


def test_criterion_1_gradients(report):
    start = time.perf_counter()
    worst, n_instances = 0.0, 0
    for i in range(24):
        rng = np.random.default_rng(1000 + i)
        n_modes = 2 + i % 2
        n = int(rng.integers(10, 101))
        model, data = random_instance(rng, n_modes=n_modes, n_samples=n, n_outputs=1 + i % 3)
        _, grad = nll_grad(model, data)
        worst = max(worst, fd_gradient_errors(model, data, grad, h=1e-5, floor=1e-8).max())
        n_instances += 1
    elapsed = time.perf_counter() - start
    ok = worst < 1e-5 and elapsed < 60 and n_instances >= 20
    report(1, ok, f"{n_instances} instances, max rel err {worst:.2e}, {elapsed:.1f}s")


def dense_posterior(model, data, Xs, ts):
    B = np.sqrt(model.core_amp) * build_utilde(model, data)
    q = MultiTaskDataset(data.task_shape, Xs, np.zeros(len(ts)), ts)
    Bs = np.sqrt(model.core_amp) * build_utilde(model, q)
    C = B @ B.T + np.diag(model.noise_vars[data.tasks])
    Ks = Bs @ B.T
    mean = Ks @ np.linalg.solve(C, data.y)
    var = np.sum(Bs**2, axis=1) - np.sum(Ks * np.linalg.solve(C, Ks.T).T, axis=1)
    return mean, var


def test_criterion_2_woodbury_oracle(report):
    start = time.perf_counter()
    worst_nll = worst_mean = worst_var = 0.0
    for i in range(50):
        rng = np.random.default_rng(2000 + i)
        n = int(rng.integers(20, 301))
        model, data = random_instance(rng, n_modes=2 + i % 2, n_samples=n, hetero=True)
        ref = nll_dense(model, data)
        worst_nll = max(worst_nll, abs(nll_woodbury(model, data) - ref) / abs(ref))
        Xs = rng.standard_normal((10, model.mode_dims[0]))
        ts = rng.integers(0, data.n_tasks, 10)
        post = predict(model, data, Xs, ts)
        mean, var = dense_posterior(model, data, Xs, ts)
        worst_mean = max(worst_mean, np.max(np.abs(post.mean - mean)) / np.max(np.abs(mean)))
        worst_var = max(worst_var, np.max(np.abs(post.variance - var)) / np.max(np.abs(var)))
    elapsed = time.perf_counter() - start
    ok = max(worst_nll, worst_mean, worst_var) < 1e-8 and elapsed < 120
    report(2, ok, f"50 instances, rel dNLL {worst_nll:.1e}, mean {worst_mean:.1e}, "
                  f"variance {worst_var:.1e}, {elapsed:.1f}s")


def test_criterion_3_lower_bound_and_rho_ordering(report):
    start = time.perf_counter()
    violations, theories = 0, []
    for rho in (0.25, 0.5, 0.75):
        res = lc_simulate(benchmark_problem(rho), CURVE_GRID, replicates=200, seed=0)
        violations += int(np.sum(res.theory > res.sim_mean + 2 * res.sim_se))
        theories.append(res.theory)
    interior = slice(1, len(CURVE_GRID) - 1)
    ordered = all(np.all(hi[interior] < lo[interior]) for lo, hi in zip(theories, theories[1:]))
    elapsed = time.perf_counter() - start
    ok = violations == 0 and ordered and elapsed < 300
    report(3, ok, f"{violations} bound violations over {3 * len(CURVE_GRID) * 16} points, "
                  f"rho ordering {'strict' if ordered else 'broken'}, {elapsed:.1f}s")


def test_criterion_4_truncation(report):
    start = time.perf_counter()
    full = benchmark_problem(0.75)
    grid = [1, 2, 4, 8, 16, 64, 256, 1024]
    runs = {r: lc_simulate(lowrank_truncate(full, r), grid, replicates=100, seed=1) for r in (1, 4, 9, 16)}
    runs["full"] = lc_simulate(full, grid, replicates=100, seed=1)
    avg = {key: res.task_average()[0] for key, res in runs.items()}
    d, se = paired_difference(runs[1], runs["full"])
    crossing = bool(avg[1][0] < avg["full"][0] and avg[1][-1] > avg["full"][-1])
    crossing_sim = bool(d[0] <= 2 * se[0] and d[-1] >= -2 * se[-1])
    full_rank_same = np.max(np.abs(avg[16] - avg["full"])) < 1e-10

    # the same 3-mode truth, truncated per mode (3-mode model) or as one flat matrix (2-mode model)
    sparse = [1, 2, 4]
    depth_theory, depth_sim = True, True
    gaps = []
    for s in (2, 3):
        three = lc_simulate(lowrank_truncate_modes(full, (s, s)), sparse, replicates=400, seed=2)
        two = lc_simulate(lowrank_truncate(full, s * s), sparse, replicates=400, seed=2)
        gap = three.task_average()[0] - two.task_average()[0]
        depth_theory &= bool(np.all(gap < 0))
        dm, ds = paired_difference(three, two)
        depth_sim &= bool(np.all(dm <= 2 * ds))
        gaps.append(gap)
    for s in (1, 4):
        three = lc_theory_multi(lowrank_truncate_modes(full, (s, s)), sparse)
        two = lc_theory_multi(lowrank_truncate(full, s * s), sparse)
        depth_theory &= bool(np.all(three <= two + 1e-10))
    elapsed = time.perf_counter() - start
    ok = crossing and crossing_sim and full_rank_same and depth_theory and depth_sim and elapsed < 300
    report(4, ok, f"r=1 vs full {avg[1][0]:.4f}/{avg['full'][0]:.4f} at N=1, "
                  f"{avg[1][-1]:.4f}/{avg['full'][-1]:.4f} at N=1024; "
                  f"3-mode minus 2-mode theory r=4 {np.round(gaps[0], 4).tolist()}, "
                  f"r=9 {np.round(gaps[1], 4).tolist()}; sim within 2 SE {crossing_sim and depth_sim}; "
                  f"{elapsed:.1f}s")


def test_criterion_5_theory_self_consistency(report):
    grid = [0, 1, 4, 16, 64, 256, 1024]
    forms = 0.0
    for rho in (0.1, 0.5, 0.9):
        for modes in (2, 3):
            p = benchmark_problem(rho, modes=modes)
            a = lc_theory_multi(p, grid, mode="full_rank")
            b = lc_theory_multi(p, grid, mode="rank_deficient")
            forms = max(forms, np.max(np.abs(a - b)))
    lam = benchmark_problem(0.0).spectrum
    decoupled = CurveProblem(lam, (np.eye(4), np.eye(4)), 0.05)
    multi = lc_theory_multi(decoupled, grid)
    single = np.array([lc_theory_single(lam, 0.05, N / 16) for N in grid])
    dec = np.max(np.abs(multi - single[:, None]))
    ok = forms < 1e-10 and dec < 1e-10
    report(5, ok, f"forms differ by {forms:.1e}, decoupled vs single {dec:.1e}")


def test_criterion_6_equivalence(report):
    start = time.perf_counter()
    angles, residuals, feature = [], [], []
    for seed in range(5):
        data, _ = planted(seed, (6, 3, 3), (2, 2, 1), 10, 3000, 100.0)
        model = fit(data, (6, 3, 3), (2, 2, 1), TrainConfig(max_iters=500))
        angles.append(math.degrees(mle_subspace_angle(model, data)))
        residuals.append(stationarity_residual(model, data))
        single = MultiTaskDataset(data.task_shape, data.X, data.Y[:, 0], data.tasks)
        tucker = als_fit(single, (2, 2, 1), sweeps=30)
        feature.append(math.degrees(principal_angles(model.factors[0], tucker.factors[0]).max()))
    med = np.median(angles), np.median(residuals), np.median(feature)
    elapsed = time.perf_counter() - start
    ok = med[0] < 5 and med[1] < 0.05 and med[2] < 15 and elapsed < 180
    report(6, ok, f"median angle {med[0]:.2f} deg, residual {med[1]:.3f}, "
                  f"feature-subspace angle {med[2]:.2f} deg, {elapsed:.1f}s")


def test_criterion_7_tensor_recovery(report):
    errors, all_monotone = [], True
    for seed in range(5):
        data, W = planted_tucker(seed)
        model = als_fit(data, (2, 2, 2), sweeps=30)
        errors.append(np.linalg.norm(model.weights - W) / np.linalg.norm(W))
        all_monotone &= monotone(model.objective_trace)
    med = float(np.median(errors))
    report(7, med < 1e-3 and all_monotone, f"median recovery error {med:.1e}, monotone {all_monotone}")


def test_criterion_8_determinism_and_round_trip(tmp_path, report):
    cfg = {
        "mode_dims": [3, 2, 2],
        "ranks": [2, 1, 2],
        "seed": 5,
        "train": {"max_iters": 50},
        "synth": {"n_per_task": 10, "noise_var": 0.05},
        "curve": {"k": 6, "grid": [0, 8, 32], "replicates": 5},
    }
    (tmp_path / "cfg.json").write_text(json.dumps(cfg))
    c = ["--config", str(tmp_path / "cfg.json")]
    d = str(tmp_path)
    commands = {
        "synth": (["synth", *c, "--out", f"{d}/data.csv", "--model", f"{d}/truth.json"],
                  ["data.csv", "data.csv.meta.json", "truth.json"]),
        "train": (["train", *c, "--data", f"{d}/data.csv", "--out", f"{d}/model.json"], ["model.json"]),
        "predict": (["predict", "--model", f"{d}/model.json", "--data", f"{d}/data.csv", "--out", f"{d}/pred.csv"],
                    ["pred.csv", "pred.csv.meta.json"]),
        "tensreg": (["tensreg", *c, "--data", f"{d}/data.csv", "--out", f"{d}/tucker.json"], ["tucker.json"]),
        "equiv": (["equiv", *c, "--data", f"{d}/data.csv", "--out", f"{d}/equiv.json"], ["equiv.json"]),
        "curve-theory": (["curve-theory", *c, "--out", f"{d}/theory.csv"], ["theory.csv", "theory.csv.meta.json"]),
        "curve-sim": (["curve-sim", *c, "--out", f"{d}/sim.csv"], ["sim.csv", "sim.csv.meta.json"]),
    }
    identical = []
    for name, (argv, outputs) in commands.items():
        snapshots = []
        for _ in range(2):
            assert run_command(argv) == 0, name
            snapshots.append([(tmp_path / o).read_bytes() for o in outputs])
        identical.append(snapshots[0] == snapshots[1])

    data = load_dataset(tmp_path / "data.csv", (2, 2))
    model = model_from_document(load_json(tmp_path / "model.json"))
    save_json(model_document(model), tmp_path / "again.json")
    again = model_from_document(load_json(tmp_path / "again.json"))
    fitted = fit(data, (3, 2, 2), (2, 1, 2), TrainConfig(max_iters=50, seed=5))
    drift = max(abs(nll_woodbury(model, data) - nll_woodbury(fitted, data)),
                abs(nll_woodbury(again, data) - nll_woodbury(fitted, data)))
    ok = all(identical) and drift <= 1e-12
    report(8, ok, f"{sum(identical)}/{len(identical)} subcommands byte-identical, NLL drift {drift:.1e}")
