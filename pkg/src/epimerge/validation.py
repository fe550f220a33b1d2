"""Input checks shared by the functional API, the estimator and the CLI."""

from __future__ import annotations

from collections.abc import Mapping, Sequence

import numpy as np

from .checkpoint import ParameterSet, check_aligned
from .curvature import as_values


def check_weights(weights, n_tasks: int) -> np.ndarray:
    """Return task weights as an array; ``None`` means uniform ``1/T``."""
    if n_tasks < 1:
        raise ValueError("need at least one task")
    if weights is None:
        return np.full(n_tasks, 1.0 / n_tasks)
    lam = np.asarray(weights, dtype=np.float64).ravel()
    if lam.shape != (n_tasks,):
        raise ValueError(f"expected {n_tasks} weights, got {lam.size}")
    if np.any(lam < 0) or not np.all(np.isfinite(lam)):
        raise ValueError("weights must be finite and non-negative")
    if abs(lam.sum() - 1.0) > 1e-12:
        raise ValueError(f"weights must sum to 1, got {lam.sum()!r}")
    return lam


def check_parameter_sets(base: ParameterSet, models: Sequence[ParameterSet]) -> None:
    if not models:
        raise ValueError("need at least one fine-tuned model")
    for m in (base, *models):
        if not isinstance(m, ParameterSet):
            raise TypeError(f"expected ParameterSet, got {type(m).__name__}")
    check_aligned(base, *models)


def check_fishers(fishers, reference: Mapping) -> list[Mapping]:
    """Unwrap curvature estimates and check they cover ``reference``'s layers."""
    out = []
    for i, f in enumerate(fishers):
        values = as_values(f)
        for name, arr in reference.items():
            if name not in values:
                raise ValueError(f"fisher {i} lacks layer {name!r}")
            v = np.asarray(values[name])
            if v.shape != np.shape(arr):
                raise ValueError(f"fisher {i} layer {name!r} has shape {v.shape}, expected {np.shape(arr)}")
            if np.any(v < 0):
                raise ValueError(f"fisher {i} layer {name!r} has negative entries")
        out.append(values)
    return out
