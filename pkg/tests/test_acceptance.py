"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

Run with ``pytest tests/test_acceptance.py -v``; the lines are repeated in
an "acceptance criteria" section at the end of the session.
"""

import math
import time

import numpy as np
import pytest

from epimerge import cli
from epimerge.checkpoint import ParameterSet, task_vector
from epimerge.curvature import accumulate_fisher, subsample_stream
from epimerge.diagnostics import certify_bound, curvature_correlation, diagnose, eta, frechet_objective
from epimerge.estimator import SubspaceMerger
from epimerge.merge import epimer_coefficients, frechet_mean, merge_fisher_avg, merge_ta, tsvm_coefficients
from epimerge.subspace import (
    build_tagged_basis,
    lift,
    materialize_layer,
    project_diag_curvature,
    project_vector,
)
from epimerge.synthetic import (
    MLP_LAYERS,
    evaluate_accuracy,
    finetune_mlp,
    gen_mlp_tasks,
    gen_quadratic_suite,
    gradient_stream,
    init_mlp,
    mlp_loss_grad,
)

ALPHAS = (0.20, 0.30, 0.40, 0.50, 0.70, 1.00)
DESK_SEEDS = range(10)


def _status(ok: bool) -> str:
    return "PASS" if ok else "FAIL"


def _quadratic_instance(i: int):
    """Random quadratic suite pushed through a tagged basis: kT <= 16 coefficients."""
    rng = np.random.default_rng([17, i])
    T = int(rng.integers(1, 9))
    h = (0.0, 0.5, 1.0)[i % 3]
    k = int(rng.integers(1, 16 // T + 1))
    a, b = k * T + int(rng.integers(1, 3)), k * T + int(rng.integers(1, 3))
    suite = gen_quadratic_suite(i, {"w": (a, b)}, T, h)
    deltas = [task_vector(m, suite.base) for m in suite.models]
    basis = build_tagged_basis(deltas, k)
    d = [project_vector(basis, v)["w"] for v in deltas]
    H = [project_diag_curvature(basis, f)["w"] for f in suite.fishers]
    lam = rng.dirichlet(np.ones(T)) if i % 2 else np.full(T, 1.0 / T)
    return d, H, lam


def _F(x, d, H, lam):
    return sum(l * float((x - v) @ h @ (x - v)) for l, h, v in zip(lam, H, d))


def test_criterion_1_curvature_advantage_identity(report_line):
    start = time.perf_counter()
    worst, min_eta = 0.0, math.inf
    for i in range(200):
        d, H, lam = _quadratic_instance(i)
        c, Hbar = curvature_correlation(H, d, lam)
        e = eta(c, Hbar)
        flat = sum(l * v for l, v in zip(lam, d))
        xh, _, _ = frechet_mean(d, H, lam)
        FI = _F(flat, d, H, lam)
        gap = FI - _F(xh, d, H, lam)
        worst = max(worst, abs(gap - e) / max(1.0, FI))
        min_eta = min(min_eta, e)
    elapsed = time.perf_counter() - start
    ok = worst <= 1e-9 and min_eta >= -1e-12 and elapsed < 5.0
    report_line(f"criterion 1 {_status(ok)}: max |gap - eta|/max(1,F_I) = {worst:.2e} (<= 1e-9), "
                f"min eta = {min_eta:.2e} (>= -1e-12), {elapsed:.2f}s (< 5s)")
    assert ok


def test_criterion_2_zero_eta_cases(report_line):
    worst_h, worst_id = 0.0, 0.0
    for seed in range(50):
        for identical in (False, True):
            suite = gen_quadratic_suite(seed, {"w": (8, 8), "b": (4,)}, 3, 0.0 if not identical else 1.0,
                                        identical=identical)
            deltas = [task_vector(m, suite.base) for m in suite.models]
            basis = build_tagged_basis(deltas, 2, on_violation="fallback")
            rep = diagnose(suite.base, suite.models, basis, suite.fishers)
            value = max(rep.eta, rep.eta_raw)
            if identical:
                worst_id = max(worst_id, value)
            else:
                worst_h = max(worst_h, value)
    ok = worst_h <= 1e-12 and worst_id <= 1e-12
    report_line(f"criterion 2 {_status(ok)}: max eta homogeneous = {worst_h:.2e}, identical tasks = {worst_id:.2e} "
                f"(<= 1e-12, 50 seeds each)")
    assert ok


def test_criterion_3_error_bound(report_line):
    violations, n_in, n_out = 0, 0, 0
    rng = np.random.default_rng(3)
    for i in range(200):
        T = int(rng.integers(1, 7))
        k = int(rng.integers(1, 3))
        if i % 2:
            # deltas inside the tagged subspace
            suite = gen_quadratic_suite(i, {"w": (k * T + 1, k * T + 2)}, T, float(rng.uniform()),
                                        structure="orthogonal", rank=k)
            n_in += 1
        else:
            suite = gen_quadratic_suite(i, {"w": (k * T + 2, k * T + 1), "b": (3,)}, T, float(rng.uniform()))
            n_out += 1
        basis = build_tagged_basis([task_vector(m, suite.base) for m in suite.models], k)
        rep = certify_bound(suite.tasks, suite.base, basis)
        violations += not rep.certified

    # equality instances: in-subspace deltas (R_S = 0) and single tasks (V_S = 0)
    worst_slack = 0.0
    for i in range(20):
        if i % 2:
            suite = gen_quadratic_suite(500 + i, {"w": (7, 8)}, 3, 1.0, structure="orthogonal", rank=2)
            basis = build_tagged_basis([task_vector(m, suite.base) for m in suite.models], 2)
        else:
            suite = gen_quadratic_suite(500 + i, {"w": (7, 8)}, 1, 1.0)
            basis = build_tagged_basis([task_vector(suite.models[0], suite.base)], 3)
        rep = certify_bound(suite.tasks, suite.base, basis)
        worst_slack = max(worst_slack, (rep.bound_value - rep.actual_excess_loss) / max(1.0, rep.bound_value))
    ok = violations == 0 and worst_slack <= 1e-6
    report_line(f"criterion 3 {_status(ok)}: {violations} bound violations over 200 instances "
                f"({n_in} in-subspace, {n_out} out-of-subspace); equality-case slack {worst_slack:.2e} (<= 1e-6)")
    assert ok


def test_criterion_4_existence_uniqueness(report_line):
    worst_res = 0.0
    for i in range(200):
        d, H, lam = _quadratic_instance(i)
        _, _, res = frechet_mean(d, H, lam)
        worst_res = max(worst_res, res)
    rng = np.random.default_rng(4)
    d, H, lam = _quadratic_instance(7)
    x, _, _ = frechet_mean(d, H, lam)
    F0 = _F(x, d, H, lam)
    increases = 0
    for _ in range(50):
        p = rng.standard_normal(x.shape)
        p *= 1e-3 / np.linalg.norm(p)
        increases += _F(x + p, d, H, lam) > F0
    ok = worst_res <= 1e-10 and increases == 50
    report_line(f"criterion 4 {_status(ok)}: max relative solve residual {worst_res:.2e} (<= 1e-10); "
                f"{increases}/50 perturbations increase F")
    assert ok


def test_criterion_5_subsumption(report_line):
    rng = np.random.default_rng(5)
    err_tsvm = err_ta = err_fisher = 0.0
    for i in range(20):
        T = int(rng.integers(1, 5))
        lam = rng.dirichlet(np.ones(T))
        alpha = float(rng.uniform(0.1, 1.0))
        # (a) identity projected metric inside a tagged basis
        deltas = [task_vector(ParameterSet({"w": rng.standard_normal((9, 8))}), ParameterSet({"w": np.zeros((9, 8))}))
                  for _ in range(T)]
        basis = build_tagged_basis(deltas, 2)
        proj = [project_vector(basis, v) for v in deltas]
        eye = [{"w": np.eye(basis.size)}] * T
        a, _ = epimer_coefficients(proj, eye, lam, jitter=0.0, scale=alpha * T)
        b = tsvm_coefficients(proj, lam, alpha)
        err_tsvm = max(err_tsvm, float(np.max(np.abs(a["w"] - b["w"]))))

        # (b) full space, S = I, identity metric: a model of <= 100 parameters
        base = ParameterSet({"w": rng.standard_normal((6, 7)), "b": rng.standard_normal(5)})
        models = [ParameterSet({n: base[n] + rng.standard_normal(base[n].shape) for n in base}) for _ in range(T)]
        full = [task_vector(m, base).flatten() for m in models]
        x, _, _ = frechet_mean(full, [np.eye(full[0].size)] * T, lam)
        ta = merge_ta(base, [task_vector(m, base) for m in models], lam, alpha * T)
        err_ta = max(err_ta, float(np.max(np.abs(base.flatten() + alpha * T * x - ta.flatten()))))

        # (c) full space, diagonal Fisher metric
        fishers = [ParameterSet({n: rng.uniform(0.0, 2.0, base[n].shape) for n in base}) for _ in range(T)]
        x, _, _ = frechet_mean(full, [np.diag(f.flatten()) for f in fishers], lam)
        fa = merge_fisher_avg(models, fishers, lam)
        err_fisher = max(err_fisher, float(np.max(np.abs(base.flatten() + x - fa.flatten()))))
    ok = max(err_tsvm, err_ta, err_fisher) <= 1e-12
    report_line(f"criterion 5 {_status(ok)}: identity metric vs TSV-M {err_tsvm:.1e}, full-space identity vs TA "
                f"{err_ta:.1e}, diagonal Fisher vs Fisher averaging {err_fisher:.1e} (<= 1e-12)")
    assert ok


def test_criterion_6_aggregator_relation(report_line):
    rng = np.random.default_rng(6)
    worst = 0.0
    for i in range(50):
        T = int(rng.integers(1, 5))
        shapes = {"w": (8, 9), "v": (10, 8), "b": (4,)}
        base = ParameterSet({n: rng.standard_normal(s) for n, s in shapes.items()})
        models = [ParameterSet({n: base[n] + 0.1 * rng.standard_normal(s) for n, s in shapes.items()}) for _ in range(T)]
        fishers = [ParameterSet({n: rng.uniform(0.0, 2.0, s) for n, s in shapes.items()}) for _ in range(T)]
        lam = rng.dirichlet(np.ones(T)) if i % 5 else None
        alpha = float(rng.uniform(0.1, 1.5))
        s = SubspaceMerger("epimer-sum", rank=2, alpha=alpha, weights=lam).fit(base, models, fishers)
        m = SubspaceMerger("epimer-mean", rank=2, weights=lam).fit(base, models, fishers)
        for n in s.coef_:
            ref = alpha * T * m.coef_[n]
            worst = max(worst, float(np.max(np.abs(s.coef_[n] - ref)) / max(1.0, np.max(np.abs(ref)))))
    ok = worst <= 1e-12
    report_line(f"criterion 6 {_status(ok)}: max |sum - alpha*T*mean| = {worst:.1e} over 50 instances (<= 1e-12)")
    assert ok


def test_criterion_7_basis_correctness(report_line):
    rng = np.random.default_rng(7)
    gram = roundtrip = proj_err = curv_err = 0.0
    for i in range(30):
        T = int(rng.integers(1, 4))
        k = int(rng.integers(1, 6 // T + 1))
        d1, d2 = int(rng.integers(k * T, 9)), int(rng.integers(k * T, 9))
        deltas = [task_vector(ParameterSet({"w": rng.standard_normal((d1, d2))}),
                              ParameterSet({"w": np.zeros((d1, d2))})) for _ in range(T)]
        basis = build_tagged_basis(deltas, k)
        S = materialize_layer(basis.layers["w"])
        gram = max(gram, float(np.max(np.abs(S.T @ S - np.eye(S.shape[1])))))
        c = rng.standard_normal(S.shape[1])
        back = project_vector(basis, lift(basis, {"w": c}))["w"]
        roundtrip = max(roundtrip, float(np.max(np.abs(back - c))))
        proj_err = max(proj_err, float(np.max(np.abs(project_vector(basis, deltas[0])["w"] - S.T @ deltas[0]["w"].ravel()))))
        v = rng.uniform(0.0, 3.0, (d1, d2))
        oracle = S.T @ np.diag(v.ravel()) @ S
        curv_err = max(curv_err, float(np.max(np.abs(project_diag_curvature(basis, {"w": v})["w"] - oracle))))
    ok = gram <= 1e-10 and roundtrip <= 1e-12 and proj_err <= 1e-10 and curv_err <= 1e-10
    report_line(f"criterion 7 {_status(ok)}: Gram {gram:.1e} (<= 1e-10), project(lift) {roundtrip:.1e} (<= 1e-12), "
                f"projection {proj_err:.1e}, projected curvature {curv_err:.1e} (<= 1e-10)")
    assert ok


def test_criterion_8_gradient_fidelity(report_line):
    rng = np.random.default_rng(8)
    worst = 0.0
    h = 1e-5
    for _ in range(50):
        theta = init_mlp(rng, 6, 5, 4)
        theta = ParameterSet({n: v + 0.3 * rng.standard_normal(v.shape) for n, v in theta.items()})
        sample = (rng.standard_normal(6), int(rng.integers(4)))
        _, g = mlp_loss_grad(theta, sample)
        for n in MLP_LAYERS:
            for idx in np.ndindex(theta[n].shape):
                up = {k: theta[k].copy() for k in theta}
                dn = {k: theta[k].copy() for k in theta}
                up[n][idx] += h
                dn[n][idx] -= h
                fd = (mlp_loss_grad(ParameterSet(up), sample)[0] - mlp_loss_grad(ParameterSet(dn), sample)[0]) / (2 * h)
                worst = max(worst, abs(fd - g[n][idx]) / max(abs(fd), abs(g[n][idx]), 1e-4))
    ok = worst <= 1e-5
    report_line(f"criterion 8 {_status(ok)}: max relative gradient error {worst:.1e} over 50 probes (<= 1e-5)")
    assert ok


# -- desk-scale MLP analogs ---------------------------------------------------


_DESK_CACHE: dict = {}


def _desk_seed(seed: int):
    """Fine-tuned models, gradient streams and full Fisher diagonals for one seed (cached)."""
    if seed not in _DESK_CACHE:
        theta0, tasks = gen_mlp_tasks(seed)
        models = [finetune_mlp(theta0, task, seed=seed * 1000 + t) for t, task in enumerate(tasks)]
        streams = [gradient_stream(m, task) for m, task in zip(models, tasks)]
        fishers = [accumulate_fisher(s) for s in streams]
        basis = build_tagged_basis([task_vector(m, theta0) for m in models], 2, on_violation="fallback")
        _DESK_CACHE[seed] = (theta0, tasks, models, streams, fishers, basis)
    return _DESK_CACHE[seed]


def _accuracies(merged, tasks):
    return [evaluate_accuracy(merged, t) for t in tasks]


def _best_over_alpha(method, theta0, models, fishers, basis, tasks):
    best = None
    for a in ALPHAS:
        merged = SubspaceMerger(method, rank=2, alpha=a, rank_violation="fallback").fit(
            theta0, models, fishers, basis).merged_
        accs = _accuracies(merged, tasks)
        if best is None or np.mean(accs) > np.mean(best):
            best = accs
    return best


def test_criterion_9_desk_analog(report_line):
    start = time.perf_counter()
    hard_ok = True
    wins_avg = wins_worst = 0
    rows = []
    for seed in DESK_SEEDS:
        theta0, tasks, models, _, fishers, basis = _desk_seed(seed)
        deltas = [task_vector(m, theta0) for m in models]
        proj = [project_vector(basis, d) for d in deltas]
        hess = [project_diag_curvature(basis, f) for f in fishers]
        lam = np.full(len(models), 1.0 / len(models))
        xh, _ = epimer_coefficients(proj, hess, lam)
        flat = {n: sum(l * p[n] for l, p in zip(lam, proj)) for n in basis.layers}
        cond = [{n: h[n] + 1e-8 * np.eye(basis.size) for n in basis.layers} for h in hess]
        FH, FI = frechet_objective(xh, proj, cond, lam), frechet_objective(flat, proj, cond, lam)
        hard_ok &= FH <= FI

        ta = _accuracies(SubspaceMerger("ta", alpha=1.0).fit(theta0, models).merged_, tasks)
        tsvm = _best_over_alpha("tsvm", theta0, models, None, basis, tasks)
        epi = _best_over_alpha("epimer-sum", theta0, models, fishers, basis, tasks)
        wins_avg += np.mean(epi) >= np.mean(ta)
        wins_worst += min(epi) >= min(tsvm)
        rows.append((seed, np.mean(ta), np.mean(tsvm), np.mean(epi), min(tsvm), min(epi)))
    elapsed = time.perf_counter() - start
    for seed, a_ta, a_tsvm, a_epi, w_tsvm, w_epi in rows:
        print(f"  seed {seed}: avg TA {a_ta:.4f} TSV-M {a_tsvm:.4f} EpiMerSum {a_epi:.4f} | "
              f"worst TSV-M {w_tsvm:.4f} EpiMerSum {w_epi:.4f}")
    soft_avg, soft_worst = wins_avg >= 7, wins_worst >= 6
    ok = hard_ok and elapsed < 120
    soft = "met" if soft_avg and soft_worst else "FLAG for review"
    report_line(f"criterion 9 {_status(ok)}: F_H <= F_I on every seed: {hard_ok}; {elapsed:.1f}s (< 120s); "
                f"soft: EpiMerSum avg >= TA on {wins_avg}/10 (target 7), worst-task >= TSV-M on {wins_worst}/10 "
                f"(target 6) -> {soft}")
    assert ok


def test_criterion_10_fisher_subsample_robustness(report_line):
    acc_gaps, eta_gaps = [], []
    for seed in DESK_SEEDS:
        theta0, tasks, models, streams, fishers, basis = _desk_seed(seed)

        def sub(f):
            return [accumulate_fisher(subsample_stream(s, f, seed * 100 + t)) for t, s in enumerate(streams)]

        def avg_acc(fis):
            merged = SubspaceMerger("epimer-sum", rank=2, alpha=1.0, rank_violation="fallback").fit(
                theta0, models, fis, basis).merged_
            return float(np.mean(_accuracies(merged, tasks)))

        acc_gaps.append(abs(avg_acc(sub(0.1)) - avg_acc(fishers)))
        e_full = diagnose(theta0, models, basis, fishers).eta
        e_part = diagnose(theta0, models, basis, sub(0.25)).eta
        eta_gaps.append(abs(e_part - e_full) / e_full)
    acc_med, eta_med = float(np.median(acc_gaps)), float(np.median(eta_gaps))
    ok = acc_med <= 0.02 and eta_med <= 0.2
    report_line(f"criterion 10 {_status(ok)}: median |acc(f=0.1) - acc(f=1)| = {acc_med:.4f} (<= 0.02), "
                f"median eta relative gap f=0.25 vs 1 = {eta_med:.3f} (<= 0.2)")
    assert ok


def test_criterion_11_cli_determinism(report_line, tmp_path):
    synth = ["--tasks", "2", "--features", "8", "--hidden", "8", "--classes", "4", "--samples", "400",
             "--steps", "100", "--batch-size", "50", "--seed", "5"]
    outputs = {}
    for run in ("a", "b"):
        d = tmp_path / run
        d.mkdir()
        inputs = ["--base", str(d / "base.epmc"), "--models", str(d / "model_0.epmc"), "--models", str(d / "model_1.epmc")]
        fishers = ["--fishers", str(d / "grads_0.epmc"), "--fishers", str(d / "grads_1.epmc")]
        data = ["--data", str(d / "data_0.epmc"), "--data", str(d / "data_1.epmc")]
        codes = [
            cli.main(["synth", "--out", str(d / "synth"), *synth]),
        ]
        for f in (d / "synth").iterdir():
            f.rename(d / f.name)
        codes += [
            cli.main(["build-basis", *inputs, "--rank", "2", "--out", str(d / "basis.epmc")]),
            cli.main(["merge", *inputs, *fishers, "--fraction", "0.5", "--seed", "2", "--out", str(d / "merged.epmc")]),
            cli.main(["diagnose", *inputs, *fishers, *data, "--out", str(d / "report.json")]),
            cli.main(["sweep", *inputs, *fishers, *data, "--methods", "ta,tsvm,epimer-sum", "--alphas", "0.5,1.0",
                      "--ranks", "1,2", "--fractions", "0.5,1.0", "--out", str(d / "sweep.csv")]),
        ]
        assert codes == [0] * 5
        outputs[run] = {f.name: f.read_bytes() for f in sorted(d.iterdir()) if f.is_file()}
    same = outputs["a"] == outputs["b"]
    differing = sorted(n for n in outputs["a"] if outputs["a"][n] != outputs["b"].get(n))
    report_line(f"criterion 11 {_status(same)}: {len(outputs['a'])} output files from synth, build-basis, merge, "
                f"diagnose, sweep re-run byte-identical" + ("" if same else f"; differing: {differing}"))
    assert same
