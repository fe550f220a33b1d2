"""Empirical Fisher diagonals and conditioning of projected curvature."""

from __future__ import annotations

import enum
import math
from collections.abc import Iterable, Mapping, Sequence
from dataclasses import dataclass

import numpy as np

from .checkpoint import (
    ParameterSet,
    TaskVector,
    check_aligned,
    read_checkpoint,
    read_sidecar,
    stack_entries,
    unstack_entries,
    write_checkpoint,
    write_sidecar,
)

DEFAULT_JITTER = 1e-8


class CurvatureSource(str, enum.Enum):
    GRADIENT_STREAM = "gradient-stream"
    EXACT_QUADRATIC = "exact-quadratic"
    LOADED_FILE = "loaded-file"


@dataclass
class CurvatureEstimate:
    values: ParameterSet
    sample_count: int
    source: CurvatureSource = CurvatureSource.GRADIENT_STREAM
    fraction: float = 1.0

    def __post_init__(self):
        for name, arr in self.values.items():
            if np.any(arr < 0) or not np.all(np.isfinite(arr)):
                raise ValueError(f"Fisher values for {name!r} must be finite and non-negative")
        if self.source == CurvatureSource.GRADIENT_STREAM and self.sample_count <= 0:
            raise ValueError("a gradient-stream estimate needs at least one sample")

    def __getitem__(self, name):
        return self.values[name]

    def __iter__(self):
        return iter(self.values)

    def __len__(self):
        return len(self.values)

    def keys(self):
        return self.values.keys()


def accumulate_fisher(grad_stream: Iterable[ParameterSet]) -> CurvatureEstimate:
    """Mean of per-sample squared gradients, summed in stream order."""
    total = None
    ref = None
    n = 0
    for g in grad_stream:
        if ref is None:
            ref = g
            total = {name: np.zeros_like(a) for name, a in g.items()}
        else:
            check_aligned(ref, g)
        for name, a in g.items():
            total[name] += a * a
        n += 1
    if n == 0:
        raise ValueError("gradient stream is empty")
    values = ParameterSet({name: s / n for name, s in total.items()}, dtypes=ref.dtypes)
    return CurvatureEstimate(values, n, CurvatureSource.GRADIENT_STREAM)


def subsample_size(n: int, fraction: float) -> int:
    if not (0.0 < fraction <= 1.0):
        raise ValueError(f"fraction must lie in (0, 1], got {fraction}")
    # small slack so that e.g. 0.29 * 100 counts as 29
    return max(1, min(n, math.floor(fraction * n + 1e-9)))


def subsample_stream(stream: Sequence, fraction: float, seed: int) -> list:
    """Shuffle with ``seed`` and keep the first ``floor(fraction * N)`` items (at least one)."""
    n = len(stream)
    m = subsample_size(n, fraction)
    order = np.random.default_rng(seed).permutation(n)
    return [stream[i] for i in order[:m]]


def ensure_psd(H, eps: float = DEFAULT_JITTER) -> np.ndarray:
    H = np.asarray(H, dtype=np.float64)
    if eps == 0:
        return H.copy()
    return H + eps * np.eye(H.shape[0])


def trace_normalize(H) -> np.ndarray:
    H = np.asarray(H, dtype=np.float64)
    tr = np.trace(H)
    if not tr > 0:
        raise ValueError("trace must be positive to normalize")
    return H * (H.shape[0] / tr)


# ---------------------------------------------------------------------------
# Files


def save_fisher(estimate: CurvatureEstimate, path) -> None:
    write_checkpoint(estimate.values, path)
    write_sidecar(
        path,
        {
            "kind": "fisher",
            "sample_count": estimate.sample_count,
            "fraction": float(estimate.fraction),
            "source": estimate.source.value,
        },
    )


def load_fisher(path) -> CurvatureEstimate:
    values = read_checkpoint(path)
    try:
        meta = read_sidecar(path)
    except FileNotFoundError:
        meta = {}
    return CurvatureEstimate(
        values,
        int(meta.get("sample_count", 1)),
        CurvatureSource.LOADED_FILE,
        float(meta.get("fraction", 1.0)),
    )


def save_gradients(stream: Sequence[ParameterSet], path) -> None:
    write_checkpoint(stack_entries(stream), path)
    write_sidecar(path, {"kind": "gradients", "count": len(stream)})


def load_gradients(path) -> list[TaskVector]:
    return unstack_entries(read_checkpoint(path), cls=TaskVector)


def is_gradient_file(path) -> bool:
    try:
        return read_sidecar(path).get("kind") == "gradients"
    except FileNotFoundError:
        return False


def fisher_from_file(path, fraction: float = 1.0, seed: int = 0) -> CurvatureEstimate:
    """Load a Fisher file, or accumulate one from a gradient-batch file."""
    if is_gradient_file(path):
        stream = load_gradients(path)
        if fraction < 1.0:
            stream = subsample_stream(stream, fraction, seed)
        est = accumulate_fisher(stream)
        est.fraction = fraction
        return est
    if fraction != 1.0:
        raise ValueError(f"{path} holds a precomputed Fisher; subsampling needs a gradient file")
    return load_fisher(path)


def as_values(fisher) -> Mapping:
    return fisher.values if isinstance(fisher, CurvatureEstimate) else fisher
