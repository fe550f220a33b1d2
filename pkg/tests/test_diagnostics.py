import json

import numpy as np
import pytest

from epimerge.checkpoint import ParameterSet, TaskVector, task_vector
from epimerge.curvature import trace_normalize
from epimerge.diagnostics import (
    certify_bound,
    curvature_correlation,
    diagnose,
    error_bound,
    eta,
    frechet_objective,
    frechet_variance,
    residual_energy,
)
from epimerge.merge import frechet_mean
from epimerge.subspace import build_tagged_basis, materialize_layer, residual_component
from epimerge.synthetic import gen_quadratic_suite


def _random_instance(rng, p, T):
    H, d = [], []
    for _ in range(T):
        G = rng.standard_normal((p, p + 2))
        H.append(G @ G.T / p + 0.05 * np.eye(p))
        d.append(rng.standard_normal(p))
    lam = rng.dirichlet(np.ones(T))
    return H, d, lam


def test_correlation_zero_cases(rng):
    H, d, lam = _random_instance(rng, 5, 3)
    c, _ = curvature_correlation([H[0]] * 3, d, lam)
    assert np.max(np.abs(c)) <= 1e-12
    c, _ = curvature_correlation(H, [d[0]] * 3, lam)
    assert np.max(np.abs(c)) <= 1e-12


def test_correlation_dual_formula(rng):
    H, d, lam = _random_instance(rng, 6, 4)
    c, Hbar = curvature_correlation(H, d, lam)
    dbar = sum(l * v for l, v in zip(lam, d))
    b = sum(l * h @ v for l, h, v in zip(lam, H, d))
    np.testing.assert_allclose(Hbar, sum(l * h for l, h in zip(lam, H)), atol=1e-12)
    np.testing.assert_allclose(c, b - Hbar @ dbar, atol=1e-10)


def test_correlation_dimension_mismatch(rng):
    with pytest.raises(ValueError):
        curvature_correlation([np.eye(3), np.eye(3)], [np.zeros(3), np.zeros(4)])


def test_eta_arithmetic():
    assert eta(np.zeros(3), np.eye(3)) == 0.0
    assert eta(np.array([3.0, 4.0]), np.eye(2)) == 25.0


@pytest.mark.parametrize("seed", range(20))
def test_eta_is_objective_gap(seed):
    # eta = F(flat mean) - F(Frechet mean), with F summed directly
    rng = np.random.default_rng(seed)
    p, T = rng.integers(1, 9), rng.integers(1, 6)
    H, d, lam = _random_instance(rng, p, T)
    c, Hbar = curvature_correlation(H, d, lam)
    flat = sum(l * v for l, v in zip(lam, d))
    xh, _, _ = frechet_mean(d, H, lam)

    def F(x):
        return sum(l * float((x - v) @ h @ (x - v)) for l, h, v in zip(lam, H, d))

    gap = F(flat) - F(xh)
    e = eta(c, Hbar)
    assert e >= -1e-12
    assert abs(gap - e) <= 1e-9 * max(1.0, F(flat))


def test_eta_trace_normalized_scale_invariant(rng):
    H, d, lam = _random_instance(rng, 5, 4)
    ref = eta(*curvature_correlation([trace_normalize(h) for h in H], d, lam))
    scaled = [s * h for s, h in zip(rng.uniform(0.01, 100, 4), H)]
    got = eta(*curvature_correlation([trace_normalize(h) for h in scaled], d, lam))
    assert abs(got - ref) <= 1e-9 * abs(ref)


def test_frechet_variance_examples(rng):
    H, d, lam = _random_instance(rng, 4, 3)
    assert frechet_variance(d[0], [d[0]] * 3, H, lam) == 0.0
    x, _, _ = frechet_mean(d[:1], H[:1], [1.0])
    assert abs(frechet_variance(x, d[:1], H[:1], [1.0])) <= 1e-20
    m = rng.standard_normal(4)
    loop = 0.0
    for t in range(3):
        for i in range(4):
            for j in range(4):
                loop += lam[t] * (m[i] - d[t][i]) * H[t][i, j] * (m[j] - d[t][j])
    assert abs(frechet_variance(m, d, H, lam) - loop) <= 1e-12 * max(1.0, abs(loop))


def test_residual_energy_examples(rng):
    D = rng.standard_normal((5, 4))
    full = build_tagged_basis([TaskVector({"w": D})], 4)
    assert residual_energy([TaskVector({"w": D})], full, [{"w": np.ones((5, 4))}], [1.0]) <= 1e-24

    deltas = [TaskVector({"w": rng.standard_normal((7, 6)), "b": rng.standard_normal(3)}) for _ in range(2)]
    basis = build_tagged_basis(deltas, 2)
    zero = [{"w": np.zeros((7, 6)), "b": np.zeros(3)}] * 2
    assert residual_energy(deltas, basis, zero) == 0.0

    fishers = [{"w": rng.uniform(0, 2, (7, 6)), "b": rng.uniform(0, 2, 3)} for _ in range(2)]
    S = materialize_layer(basis.layers["w"])
    P = np.eye(42) - S @ S.T
    lam = [0.3, 0.7]
    oracle = 0.0
    for l, d, f in zip(lam, deltas, fishers):
        r = P @ d["w"].ravel()
        oracle += l * float(np.sum(f["w"].ravel() * r * r))
    assert abs(residual_energy(deltas, basis, fishers, lam) - oracle) <= 1e-10 * max(1.0, oracle)
    np.testing.assert_allclose(residual_component(basis, deltas[0])["w"].ravel(), P @ deltas[0]["w"].ravel(), atol=1e-12)


def test_error_bound_formula():
    assert error_bound(4.0, 9.0) == 12.5
    assert error_bound(0.0, 0.0) == 0.0


def test_certify_identical_tasks():
    suite = gen_quadratic_suite(0, {"w": (6, 5)}, 3, 0.5, identical=True)
    basis = build_tagged_basis([task_vector(m, suite.base) for m in suite.models], 1, on_violation="fallback")
    rep = certify_bound(suite.tasks, suite.base, basis)
    assert rep.certified


def test_certify_in_subspace_excess_is_half_variance():
    suite = gen_quadratic_suite(3, {"w": (9, 8), "v": (7, 7)}, 3, 0.8, structure="orthogonal", rank=2)
    basis = build_tagged_basis([task_vector(m, suite.base) for m in suite.models], 2)
    rep = certify_bound(suite.tasks, suite.base, basis)
    assert rep.R_S <= 1e-20
    assert abs(rep.actual_excess_loss - 0.5 * rep.V_S) <= 1e-12 * max(1.0, rep.V_S)
    assert rep.certified


def test_certify_bound_tight_single_task():
    # with one task V_S = 0, so the excess is exactly R_S / 2, the bound
    suite = gen_quadratic_suite(5, {"w": (8, 6)}, 1, 0.7)
    basis = build_tagged_basis([task_vector(suite.models[0], suite.base)], 2)
    rep = certify_bound(suite.tasks, suite.base, basis)
    assert rep.V_S <= 1e-20
    assert rep.bound_value - rep.actual_excess_loss <= 1e-6 * max(1.0, rep.bound_value)


def test_certify_monte_carlo():
    rng = np.random.default_rng(99)
    violations = 0
    for i in range(200):
        T = int(rng.integers(1, 9))
        a, b = int(rng.integers(2, 5)), int(rng.integers(2, 5))
        k = 1
        while (k + 1) * T <= min(a, b) and rng.uniform() < 0.5:
            k += 1
        suite = gen_quadratic_suite(i, {"w": (a, b), "bias": (a,)}, T, float(rng.uniform()))
        basis = build_tagged_basis([task_vector(m, suite.base) for m in suite.models], k, on_violation="fallback")
        rep = certify_bound(suite.tasks, suite.base, basis)
        violations += not rep.certified
        assert min(rep.eta, rep.V_S, rep.R_S, rep.advantage) >= -1e-12
        assert abs(rep.advantage - rep.eta) <= 1e-9 * max(1.0, abs(rep.eta))
    assert violations == 0


def test_homogeneous_curvature_eta_zero(toy_model):
    base, models, _ = toy_model
    same = [{n: np.full(base[n].shape, 0.7) for n in base}] * 3
    basis = build_tagged_basis([task_vector(m, base) for m in models], 2)
    rep = diagnose(base, models, basis, same)
    assert rep.eta <= 1e-12 and rep.eta_raw <= 1e-12


def test_identical_tasks_eta_zero(toy_model, rng):
    base, models, fishers = toy_model
    models = [models[0]] * 3
    basis = build_tagged_basis([task_vector(m, base) for m in models], 1, on_violation="fallback")
    rep = diagnose(base, models, basis, fishers)
    assert rep.eta <= 1e-12


def test_report_json_is_deterministic(toy_model):
    base, models, fishers = toy_model
    basis = build_tagged_basis([task_vector(m, base) for m in models], 2)
    a = diagnose(base, models, basis, fishers, method="epimer-sum").to_json()
    b = diagnose(base, models, basis, fishers, method="epimer-sum").to_json()
    assert a == b
    data = json.loads(a)
    assert list(data)[:4] == ["eta", "eta_raw", "eta_trace_normalized", "aggregator"]
    assert data["aggregator"] == "epimer-sum"
    assert float(format(data["V_S"], ".17g")) == data["V_S"]
    assert data["bound_value"] == pytest.approx(error_bound(data["V_S"], data["R_S"]), rel=1e-15)


def test_report_sum_variance_uses_sum_coefficients(toy_model):
    base, models, fishers = toy_model
    basis = build_tagged_basis([task_vector(m, base) for m in models], 2)
    mean = diagnose(base, models, basis, fishers, method="epimer-mean")
    sum_at_mean = diagnose(base, models, basis, fishers, method="epimer-sum", alpha=1 / 3)
    assert sum_at_mean.V_S == pytest.approx(mean.V_S, rel=1e-12)
    # the mean minimizes F, so any other coefficient choice is no better
    other = diagnose(base, models, basis, fishers, method="tsvm", alpha=1.0)
    assert other.V_S >= mean.V_S - 1e-12


def test_frechet_objective_layers_sum(rng):
    H, d, lam = _random_instance(rng, 3, 2)
    x = rng.standard_normal(3)
    one = frechet_objective(x, d, H, lam)
    two = frechet_objective({"a": x, "b": x}, [{"a": v, "b": v} for v in d], [{"a": h, "b": h} for h in H], lam)
    assert two == pytest.approx(2 * one, rel=1e-14)
