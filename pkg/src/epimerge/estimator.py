"""Estimator-style front end so merges compose with sklearn tooling (``get_params``, ``clone``)."""

from __future__ import annotations

import logging
import math

from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .checkpoint import ParameterSet, task_vector
from .curvature import DEFAULT_JITTER
from .merge import (
    Method,
    _assemble,
    _aux_layers,
    epimer_coefficients,
    merge_am,
    merge_fisher_avg,
    merge_ta,
    merge_ties,
    tsvm_coefficients,
)
from .subspace import TaggedBasis, build_tagged_basis, project_diag_curvature, project_vector
from .validation import check_fishers, check_parameter_sets, check_weights

logger = logging.getLogger(__name__)


class SubspaceMerger(BaseEstimator):
    """Merge fine-tuned parameter sets into one.

    Parameters
    ----------
    method : str
        One of ``am``, ``ta``, ``ties``, ``fisher``, ``tsvm``,
        ``epimer-mean``, ``epimer-sum``.
    rank : int
        Per-task rank ``k`` of the tagged basis.
    alpha : float or None
        Global rescaling; ``None`` means ``1/sqrt(T)``.
    weights : sequence of float or None
        Task weights summing to one; ``None`` means uniform.
    jitter : float
        Added to each projected Hessian before the solve.
    keep_fraction : float
        TIES trim level.
    rank_violation : {"raise", "fallback"}
        What to do with matrix layers too small for ``rank * T`` atoms.

    Attributes
    ----------
    merged_ : ParameterSet
    basis_ : TaggedBasis or None
    coef_ : dict or None
        Subspace coefficients per basis layer (subspace methods only).
    eps_used_ : dict or None
        Jitter actually used per layer by the Fréchet solve.
    """

    def __init__(
        self,
        method="epimer-sum",
        rank=2,
        alpha=None,
        weights=None,
        jitter=DEFAULT_JITTER,
        keep_fraction=0.20,
        rank_violation="raise",
    ):
        self.method = method
        self.rank = rank
        self.alpha = alpha
        self.weights = weights
        self.jitter = jitter
        self.keep_fraction = keep_fraction
        self.rank_violation = rank_violation

    def fit(self, base: ParameterSet, models, fishers=None, basis: TaggedBasis | None = None):
        method = Method(self.method)
        models = list(models)
        check_parameter_sets(base, models)
        T = len(models)
        lam = check_weights(self.weights, T)
        alpha = 1.0 / math.sqrt(T) if self.alpha is None else float(self.alpha)
        if alpha <= 0:
            raise ValueError("alpha must be positive")
        if method.uses_curvature:
            if fishers is None or len(fishers) != T:
                raise ValueError(f"method {method.value} needs one Fisher estimate per task")
            fishers = check_fishers(fishers, base)

        deltas = [task_vector(m, base) for m in models]
        self.n_tasks_ = T
        self.weights_ = lam
        self.alpha_ = alpha
        self.basis_ = None
        self.coef_ = None
        self.eps_used_ = None

        if method.uses_basis:
            if basis is None:
                basis = build_tagged_basis(deltas, self.rank, on_violation=self.rank_violation)
            elif basis.n_tasks != T:
                raise ValueError(f"basis built for {basis.n_tasks} tasks, got {T}")
            self.basis_ = basis
            projected = [project_vector(basis, d) for d in deltas]
            aux = _aux_layers(base, basis)
            if method == Method.TSVM:
                self.coef_ = tsvm_coefficients(projected, lam, alpha)
                aux_alpha = alpha * T
            else:
                hessians = [project_diag_curvature(basis, f) for f in fishers]
                scale = alpha * T if method == Method.EPIMER_SUM else 1.0
                self.coef_, info = epimer_coefficients(projected, hessians, lam, self.jitter, scale=scale)
                self.eps_used_ = info.eps_used
                self.solve_residuals_ = info.residual
                aux_alpha = alpha * T if method == Method.EPIMER_SUM else 1.0
            aux_model = merge_ta(base, deltas, lam, aux_alpha, layers=aux)
            self.merged_ = _assemble(base, basis, self.coef_, aux_model)
        elif method == Method.AM:
            self.merged_ = merge_am(models, lam)
        elif method == Method.TA:
            self.merged_ = merge_ta(base, deltas, lam, alpha)
        elif method == Method.TIES:
            self.merged_ = merge_ties(base, deltas, lam, self.keep_fraction)
        elif method == Method.FISHER:
            self.merged_ = merge_fisher_avg(models, fishers, lam)
        return self

    def transform(self, base: ParameterSet | None = None) -> ParameterSet:
        """Return the merged parameters, or the merged task vector relative to ``base``."""
        check_is_fitted(self, "merged_")
        return self.merged_ if base is None else task_vector(self.merged_, base)

    def fit_transform(self, base, models, fishers=None, basis=None) -> ParameterSet:
        return self.fit(base, models, fishers, basis).merged_


def merge_models(base, models, fishers=None, method="epimer-sum", weights=None, alpha=None, rank=2,
                 jitter=DEFAULT_JITTER, keep_fraction=0.20, basis=None, rank_violation="raise") -> ParameterSet:
    """Functional shortcut for :class:`SubspaceMerger`."""
    merger = SubspaceMerger(method=Method(method).value, rank=rank, alpha=alpha, weights=weights,
                            jitter=jitter, keep_fraction=keep_fraction, rank_violation=rank_violation)
    return merger.fit(base, models, fishers, basis).merged_
