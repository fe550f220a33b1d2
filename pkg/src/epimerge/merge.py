"""Merging aggregators: flat baselines, Fisher averaging, TSV-M and the subspace Fréchet mean."""

from __future__ import annotations

import enum
import logging
import math
from collections.abc import Mapping, Sequence
from dataclasses import dataclass, field

import numpy as np

from .checkpoint import ParameterSet, TaskVector, check_aligned
from .curvature import DEFAULT_JITTER, ensure_psd
from .linalg import spd_solve
from .subspace import TaggedBasis, lift, project_vector
from .validation import check_fishers, check_weights

logger = logging.getLogger(__name__)

FISHER_GUARD = 1e-12


class Method(str, enum.Enum):
    AM = "am"
    TA = "ta"
    TIES = "ties"
    FISHER = "fisher"
    TSVM = "tsvm"
    EPIMER_MEAN = "epimer-mean"
    EPIMER_SUM = "epimer-sum"

    @property
    def uses_basis(self) -> bool:
        return self in (Method.TSVM, Method.EPIMER_MEAN, Method.EPIMER_SUM)

    @property
    def uses_curvature(self) -> bool:
        return self in (Method.FISHER, Method.EPIMER_MEAN, Method.EPIMER_SUM)


@dataclass
class MergeConfig:
    method: Method = Method.EPIMER_SUM
    weights: Sequence[float] | None = None
    k: int = 2
    alpha: float | None = None
    jitter: float = DEFAULT_JITTER
    ties_keep_fraction: float = 0.20

    def __post_init__(self):
        self.method = Method(self.method)
        if self.k < 1:
            raise ValueError("k must be >= 1")
        if self.alpha is not None and not self.alpha > 0:
            raise ValueError("alpha must be positive")
        if self.jitter < 0:
            raise ValueError("jitter must be non-negative")
        if not (0.0 < self.ties_keep_fraction <= 1.0):
            raise ValueError("ties_keep_fraction must lie in (0, 1]")

    def resolve_weights(self, n_tasks: int) -> np.ndarray:
        return check_weights(self.weights, n_tasks)

    def resolve_alpha(self, n_tasks: int) -> float:
        return 1.0 / math.sqrt(n_tasks) if self.alpha is None else float(self.alpha)


# ---------------------------------------------------------------------------
# Full-space baselines


def merge_am(models: Sequence[ParameterSet], weights=None) -> ParameterSet:
    check_aligned(*models)
    lam = check_weights(weights, len(models))
    return ParameterSet(
        {n: sum(l * m[n] for l, m in zip(lam, models)) for n in models[0]}, dtypes=models[0].dtypes
    )


def merge_ta(base: ParameterSet, deltas: Sequence[TaskVector], weights=None, alpha: float = 1.0, layers=None) -> ParameterSet:
    """``base + alpha * sum_t weights_t * delta_t``; ``layers`` restricts which entries move."""
    check_aligned(base, *deltas)
    lam = check_weights(weights, len(deltas))
    out = {}
    for n in base:
        if layers is None or n in layers:
            out[n] = base[n] + alpha * sum(l * d[n] for l, d in zip(lam, deltas))
        else:
            out[n] = base[n].copy()
    return ParameterSet(out, dtypes=base.dtypes)


def ties_trim(delta: ParameterSet, keep_fraction: float) -> dict[str, np.ndarray]:
    """Zero entries whose magnitude is below the task-global (1 - keep) quantile."""
    mags = np.abs(delta.flatten())
    if mags.size == 0:
        return {}
    threshold = np.quantile(mags, 1.0 - keep_fraction)
    return {n: np.where(np.abs(a) >= threshold, a, 0.0) for n, a in delta.items()}


def merge_ties(base: ParameterSet, deltas: Sequence[TaskVector], weights=None, keep_fraction: float = 0.20) -> ParameterSet:
    """Trim, elect sign by frequency (ties go positive), disjoint mean.

    Contributions are ``weights_t * T * delta_t`` so uniform weights give the
    plain disjoint mean.
    """
    check_aligned(base, *deltas)
    if not (0.0 < keep_fraction <= 1.0):
        raise ValueError("keep_fraction must lie in (0, 1]")
    T = len(deltas)
    lam = check_weights(weights, T)
    trimmed = [ties_trim(d, keep_fraction) for d in deltas]
    out = {}
    for n in base:
        stack = np.stack([tr[n] for tr in trimmed])
        pos = np.sum(stack > 0, axis=0)
        neg = np.sum(stack < 0, axis=0)
        elected = np.where(pos >= neg, 1.0, -1.0)
        agree = np.sign(stack) == elected
        scaled = stack * (lam * T).reshape((T,) + (1,) * (stack.ndim - 1))
        count = agree.sum(axis=0)
        total = np.where(agree, scaled, 0.0).sum(axis=0)
        merged = np.divide(total, count, out=np.zeros_like(total), where=count > 0)
        out[n] = base[n] + merged
    return ParameterSet(out, dtypes=base.dtypes)


def merge_fisher_avg(models: Sequence[ParameterSet], fishers, weights=None) -> ParameterSet:
    """Per-coordinate Fisher-weighted average of the models.

    Coordinates where the weighted Fisher mass is at most ``FISHER_GUARD``
    take the plain weighted average instead.
    """
    check_aligned(*models)
    lam = check_weights(weights, len(models))
    fvals = check_fishers(fishers, models[0])
    out = {}
    for n in models[0]:
        num = sum(l * f[n] * m[n] for l, f, m in zip(lam, fvals, models))
        mass = sum(l * f[n] for l, f in zip(lam, fvals))
        plain = sum(l * m[n] for l, m in zip(lam, models))
        safe = np.where(mass > FISHER_GUARD, mass, 1.0)
        out[n] = np.where(mass > FISHER_GUARD, num / safe, plain)
    return ParameterSet(out, dtypes=models[0].dtypes)


# ---------------------------------------------------------------------------
# Fréchet mean in coefficient space


@dataclass
class SolveInfo:
    # total jitter added to each layer's mean Hessian: the requested one plus any escalation
    eps_used: dict[str, float] = field(default_factory=dict)
    residual: dict[str, float] = field(default_factory=dict)


def frechet_mean(coeffs: Sequence[np.ndarray], hessians: Sequence[np.ndarray], weights=None, eps: float = 0.0):
    """Minimizer of ``sum_t w_t (x - d_t)^T H_t (x - d_t)``.

    Returns ``(x, eps_used, relative_residual)``.
    """
    lam = check_weights(weights, len(coeffs))
    Hbar = sum(l * np.asarray(H, dtype=np.float64) for l, H in zip(lam, hessians))
    b = sum(l * (np.asarray(H, dtype=np.float64) @ np.asarray(d, dtype=np.float64)) for l, H, d in zip(lam, hessians, coeffs))
    Hbar = 0.5 * (Hbar + Hbar.T)
    x, eps_used = spd_solve(Hbar, b, eps)
    A = Hbar + eps_used * np.eye(Hbar.shape[0])
    denom = np.linalg.norm(A) * np.linalg.norm(x) + np.linalg.norm(b)
    residual = float(np.linalg.norm(A @ x - b) / denom) if denom > 0 else 0.0
    return x, eps_used, residual


def condition_hessians(projected_hessians: Sequence[Mapping], jitter: float) -> list[dict[str, np.ndarray]]:
    return [{n: ensure_psd(H, jitter) for n, H in ph.items()} for ph in projected_hessians]


def epimer_coefficients(
    projected_deltas: Sequence[Mapping],
    projected_hessians: Sequence[Mapping],
    weights=None,
    jitter: float = DEFAULT_JITTER,
    scale: float = 1.0,
):
    """Per-layer subspace Fréchet mean times ``scale``; returns ``(coeffs, SolveInfo)``.

    ``jitter`` is added to every projected Hessian before the solve.
    """
    T = len(projected_deltas)
    lam = check_weights(weights, T)
    hessians = condition_hessians(projected_hessians, jitter)
    coeffs, info = {}, SolveInfo()
    for name in projected_deltas[0]:
        x, eps_used, res = frechet_mean(
            [d[name] for d in projected_deltas], [h[name] for h in hessians], lam
        )
        coeffs[name] = scale * x
        info.eps_used[name] = jitter + eps_used
        info.residual[name] = res
    return coeffs, info


def _assemble(base: ParameterSet, basis: TaggedBasis, coeffs, aux: ParameterSet) -> ParameterSet:
    lifted = lift(basis, coeffs)
    out = {n: (base[n] + lifted[n]) if n in lifted else aux[n] for n in base}
    return ParameterSet(out, dtypes=base.dtypes)


def _aux_layers(base: ParameterSet, basis: TaggedBasis) -> set[str]:
    """Layers outside the basis. They are merged by task arithmetic with the
    same multiplier the method applies to the weighted mean inside the basis
    (``alpha * T`` for the sum aggregator and TSV-M, 1 for the mean), so the
    scaling identities between methods hold for whole checkpoints."""
    return {n for n in base if n not in basis.layers}


def _check_basis(basis: TaggedBasis, deltas) -> None:
    if basis.n_tasks != len(deltas):
        raise ValueError(f"basis was built for {basis.n_tasks} tasks, got {len(deltas)} task vectors")


def tsvm_coefficients(projected_deltas: Sequence[Mapping], weights=None, alpha: float = 1.0):
    T = len(projected_deltas)
    lam = check_weights(weights, T)
    return {n: alpha * T * sum(l * d[n] for l, d in zip(lam, projected_deltas)) for n in projected_deltas[0]}


def merge_tsvm(base, deltas, basis: TaggedBasis, weights=None, alpha: float = 1.0) -> ParameterSet:
    """``alpha * T * sum_t w_t delta~_t`` lifted; equals ``alpha * sum_t delta~_t`` for uniform weights."""
    check_aligned(base, *deltas)
    _check_basis(basis, deltas)
    projected = [project_vector(basis, d) for d in deltas]
    coeffs = tsvm_coefficients(projected, weights, alpha)
    aux = merge_ta(base, deltas, weights, alpha * len(deltas), layers=_aux_layers(base, basis))
    return _assemble(base, basis, coeffs, aux)


def merge_epimer_mean(base, deltas, basis: TaggedBasis, projected_hessians, weights=None, jitter: float = DEFAULT_JITTER) -> ParameterSet:
    check_aligned(base, *deltas)
    _check_basis(basis, deltas)
    projected = [project_vector(basis, d) for d in deltas]
    coeffs, _ = epimer_coefficients(projected, projected_hessians, weights, jitter)
    aux = merge_ta(base, deltas, weights, 1.0, layers=_aux_layers(base, basis))
    return _assemble(base, basis, coeffs, aux)


def merge_epimer_sum(base, deltas, basis: TaggedBasis, projected_hessians, weights=None, alpha: float = 1.0, jitter: float = DEFAULT_JITTER) -> ParameterSet:
    """``alpha * T`` times the subspace Fréchet mean, lifted and added to ``base``."""
    check_aligned(base, *deltas)
    _check_basis(basis, deltas)
    projected = [project_vector(basis, d) for d in deltas]
    coeffs, _ = epimer_coefficients(projected, projected_hessians, weights, jitter, scale=alpha * len(deltas))
    aux = merge_ta(base, deltas, weights, alpha * len(deltas), layers=_aux_layers(base, basis))
    return _assemble(base, basis, coeffs, aux)
