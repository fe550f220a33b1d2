"""Curvature heterogeneity, Fréchet variance, residual energy and the merge error bound.

Everything here works on per-layer coefficient vectors and projected
Hessians. Functions taking ``Mapping`` inputs sum per-layer values in the
mapping's order; plain arrays are treated as a single layer.
"""

from __future__ import annotations

import json
import math
from collections.abc import Mapping, Sequence
from dataclasses import asdict, dataclass, field

import numpy as np

from .checkpoint import ParameterSet, check_aligned, task_vector
from .curvature import DEFAULT_JITTER, as_values, ensure_psd, trace_normalize
from .linalg import spd_solve
from .merge import Method, epimer_coefficients, tsvm_coefficients
from .subspace import TaggedBasis, lift, project_diag_curvature, project_vector, residual_component
from .validation import check_fishers, check_weights

NEGATIVE_SLACK = 1e-12


def _by_layer(x) -> dict:
    return dict(x) if isinstance(x, Mapping) else {"": x}


def curvature_correlation(hessians: Sequence[np.ndarray], coeffs: Sequence[np.ndarray], weights=None):
    """``c = sum_t w_t (H_t - Hbar)(d_t - dbar)`` and ``Hbar = sum_t w_t H_t`` for one layer."""
    if len(hessians) != len(coeffs):
        raise ValueError("need one Hessian per task vector")
    lam = check_weights(weights, len(coeffs))
    H = [np.asarray(h, dtype=np.float64) for h in hessians]
    d = [np.asarray(v, dtype=np.float64) for v in coeffs]
    p = d[0].shape[0]
    for h, v in zip(H, d):
        if h.shape != (p, p) or v.shape != (p,):
            raise ValueError(f"inconsistent dimensions: H {h.shape}, d {v.shape}, p={p}")
    Hbar = sum(l * h for l, h in zip(lam, H))
    dbar = sum(l * v for l, v in zip(lam, d))
    c = sum(l * (h - Hbar) @ (v - dbar) for l, h, v in zip(lam, H, d))
    return c, Hbar


def eta(c, Hbar, jitter: float = 0.0) -> float:
    """``sum_layers c^T Hbar^{-1} c``."""
    cs, Hs = _by_layer(c), _by_layer(Hbar)
    total = 0.0
    for name, cl in cs.items():
        x, _ = spd_solve(Hs[name], cl, jitter)
        total += float(np.dot(cl, x))
    return total


def frechet_objective(x, coeffs: Sequence, hessians: Sequence, weights=None) -> float:
    """``F(x) = sum_t w_t (x - d_t)^T H_t (x - d_t)`` summed over layers."""
    lam = check_weights(weights, len(coeffs))
    xs = _by_layer(x)
    ds = [_by_layer(d) for d in coeffs]
    Hs = [_by_layer(h) for h in hessians]
    total = 0.0
    for name, xl in xs.items():
        for l, d, h in zip(lam, ds, Hs):
            r = np.asarray(xl) - np.asarray(d[name])
            total += l * float(r @ np.asarray(h[name]) @ r)
    return total


def frechet_variance(merged, coeffs: Sequence, hessians: Sequence, weights=None) -> float:
    """Subspace Fréchet variance evaluated at the merged coefficients."""
    return frechet_objective(merged, coeffs, hessians, weights)


def residual_energy(deltas: Sequence[Mapping], basis: TaggedBasis, fishers: Sequence, weights=None) -> float:
    """``sum_t w_t sum_coords v_t * (delta_t^perp)^2`` over basis layers."""
    lam = check_weights(weights, len(deltas))
    total = 0.0
    for l, d, f in zip(lam, deltas, fishers):
        values = as_values(f)
        res = residual_component(basis, d)
        total += l * sum(float(np.sum(np.asarray(values[n]) * r * r)) for n, r in res.items())
    return total


def error_bound(V_S: float, R_S: float) -> float:
    return 0.5 * (math.sqrt(max(V_S, 0.0)) + math.sqrt(max(R_S, 0.0))) ** 2


@dataclass
class DiagnosticsReport:
    eta: float
    eta_raw: float
    eta_trace_normalized: bool
    aggregator: str
    c: dict[str, list[float]]
    mean_hessian: dict[str, list[list[float]]]
    V_S: float
    R_S: float
    bound_value: float
    actual_excess_loss: float | None
    certified: bool | None
    advantage: float
    solve_residuals: dict[str, float]
    eps_used: dict[str, float]
    r3_note: float = 0.0
    k: int = 0
    n_tasks: int = 0
    fallback_layers: list[str] = field(default_factory=list)
    linear_path: dict[str, list[float]] | None = None

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return _dump(self.to_dict(), 0) + "\n"


def _dump(obj, indent: int) -> str:
    pad, inner = "  " * indent, "  " * (indent + 1)
    if isinstance(obj, dict):
        if not obj:
            return "{}"
        items = [f"{inner}{_dump(str(k), 0)}: {_dump(v, indent + 1)}" for k, v in obj.items()]
        return "{\n" + ",\n".join(items) + "\n" + pad + "}"
    if isinstance(obj, (list, tuple)):
        if all(not isinstance(v, (dict, list, tuple)) for v in obj):
            return "[" + ", ".join(_dump(v, 0) for v in obj) + "]"
        return "[\n" + ",\n".join(inner + _dump(v, indent + 1) for v in obj) + "\n" + pad + "]"
    if obj is None:
        return "null"
    if isinstance(obj, bool):
        return "true" if obj else "false"
    if isinstance(obj, (int, np.integer)):
        return str(int(obj))
    if isinstance(obj, (float, np.floating)):
        v = float(obj)
        if math.isnan(v) or math.isinf(v):
            return f'"{v}"'
        return format(v, ".17g")
    if isinstance(obj, str):
        return json.dumps(obj, ensure_ascii=False)
    raise TypeError(f"cannot serialize {type(obj).__name__}")


def _subspace_quantities(deltas, basis, fishers, weights, jitter):
    projected = [project_vector(basis, d) for d in deltas]
    raw = [project_diag_curvature(basis, f) for f in fishers]
    hessians = [{n: ensure_psd(H, jitter) for n, H in h.items()} for h in raw]
    return projected, hessians


def diagnose(
    base: ParameterSet,
    models: Sequence[ParameterSet],
    basis: TaggedBasis,
    fishers: Sequence,
    weights=None,
    jitter: float = DEFAULT_JITTER,
    method: Method | str = Method.EPIMER_MEAN,
    alpha: float | None = None,
    trace_normalized: bool = True,
) -> DiagnosticsReport:
    """Diagnostics for merging ``models`` into ``base`` on ``basis``.

    ``V_S`` is evaluated at the coefficients produced by ``method``; for
    flat full-space methods these are the projections of their merged delta.
    ``eta`` uses trace-normalized projected Hessians when
    ``trace_normalized`` is set, ``eta_raw`` never does.
    """
    method = Method(method)
    check_aligned(base, *models)
    T = len(models)
    lam = check_weights(weights, T)
    alpha = 1.0 / math.sqrt(T) if alpha is None else float(alpha)
    fvals = check_fishers(fishers, base)
    deltas = [task_vector(m, base) for m in models]
    projected, hessians = _subspace_quantities(deltas, basis, fvals, lam, jitter)

    mean_coeffs, info = epimer_coefficients(projected, hessians, lam, jitter=0.0)
    flat = {n: sum(l * d[n] for l, d in zip(lam, projected)) for n in basis.layers}

    cs, Hbars = {}, {}
    eta_raw = eta_norm = 0.0
    for n in basis.layers:
        c, Hbar = curvature_correlation([h[n] for h in hessians], [d[n] for d in projected], lam)
        cs[n], Hbars[n] = c, Hbar
        eta_raw += eta(c, Hbar)
        if trace_normalized:
            hn = [trace_normalize(h[n]) for h in hessians]
            cn, Hn = curvature_correlation(hn, [d[n] for d in projected], lam)
            eta_norm += eta(cn, Hn)
    advantage = frechet_objective(flat, projected, hessians, lam) - frechet_objective(mean_coeffs, projected, hessians, lam)

    if method == Method.EPIMER_MEAN:
        merged = mean_coeffs
    elif method == Method.EPIMER_SUM:
        merged = {n: alpha * T * x for n, x in mean_coeffs.items()}
    elif method == Method.TSVM:
        merged = tsvm_coefficients(projected, lam, alpha)
    else:
        from .estimator import merge_models

        merged_model = merge_models(base, models, fvals, method=method, weights=lam, alpha=alpha, jitter=jitter)
        merged = project_vector(basis, task_vector(merged_model, base))

    V_S = frechet_variance(merged, projected, hessians, lam)
    R_S = residual_energy(deltas, basis, fvals, lam)
    return DiagnosticsReport(
        eta=eta_norm if trace_normalized else eta_raw,
        eta_raw=eta_raw,
        eta_trace_normalized=trace_normalized,
        aggregator=method.value,
        c={n: c.tolist() for n, c in cs.items()},
        mean_hessian={n: H.tolist() for n, H in Hbars.items()},
        V_S=V_S,
        R_S=R_S,
        bound_value=error_bound(V_S, R_S),
        actual_excess_loss=None,
        certified=None,
        advantage=advantage,
        solve_residuals=dict(info.residual),
        eps_used={n: jitter + e for n, e in info.eps_used.items()},
        k=basis.k,
        n_tasks=basis.n_tasks,
        fallback_layers=list(basis.fallback),
    )


def certify_bound(tasks: Sequence, base: ParameterSet, basis: TaggedBasis, weights=None, jitter: float = 0.0) -> DiagnosticsReport:
    """Check the merge error bound on tasks with exact quadratic losses.

    Each task needs ``optimum`` (a ParameterSet), ``fisher()`` returning its
    exact Hessian diagonal, and ``loss(theta, layers)``. The merged point is
    the subspace Fréchet mean; layers outside the basis are left at ``base``
    and excluded from the excess loss, which is valid because the losses are
    separable across layers.
    """
    T = len(tasks)
    lam = check_weights(weights, T)
    deltas = [task_vector(t.optimum, base) for t in tasks]
    fishers = [t.fisher().values for t in tasks]
    projected, hessians = _subspace_quantities(deltas, basis, fishers, lam, jitter)
    coeffs, info = epimer_coefficients(projected, hessians, lam, jitter=0.0)

    lifted = lift(basis, coeffs)
    theta_m = ParameterSet({n: base[n] + lifted[n] if n in lifted else base[n] for n in base}, dtypes=base.dtypes)
    layers = list(basis.layers)
    actual = sum(l * (t.loss(theta_m, layers) - t.loss(t.optimum, layers)) for l, t in zip(lam, tasks))

    V_S = frechet_variance(coeffs, projected, hessians, lam)
    R_S = residual_energy(deltas, basis, fishers, lam)
    bound = error_bound(V_S, R_S)
    scale = max(1.0, bound)

    cs, Hbars = {}, {}
    eta_raw = 0.0
    for n in basis.layers:
        c, Hbar = curvature_correlation([h[n] for h in hessians], [d[n] for d in projected], lam)
        cs[n], Hbars[n] = c, Hbar
        eta_raw += eta(c, Hbar)
    flat = {n: sum(l * d[n] for l, d in zip(lam, projected)) for n in basis.layers}
    advantage = frechet_objective(flat, projected, hessians, lam) - frechet_objective(coeffs, projected, hessians, lam)

    return DiagnosticsReport(
        eta=eta_raw,
        eta_raw=eta_raw,
        eta_trace_normalized=False,
        aggregator=Method.EPIMER_MEAN.value,
        c={n: c.tolist() for n, c in cs.items()},
        mean_hessian={n: H.tolist() for n, H in Hbars.items()},
        V_S=V_S,
        R_S=R_S,
        bound_value=bound,
        actual_excess_loss=actual,
        certified=bool(actual <= bound + 1e-9 * scale),
        advantage=advantage,
        solve_residuals=dict(info.residual),
        eps_used={n: jitter + e for n, e in info.eps_used.items()},
        k=basis.k,
        n_tasks=T,
        fallback_layers=list(basis.fallback),
    )
