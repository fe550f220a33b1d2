"""Per-layer tagged rank-1 basis built from per-task truncated SVDs.

For a matrix layer the basis holds ``k*T`` atoms ``u_i v_i^T``. ``U`` and ``V``
are column-orthonormal, so the atoms are orthonormal in the Frobenius inner
product and the coefficient of a matrix ``D`` on atom ``i`` is ``u_i^T D v_i``.
"""

from __future__ import annotations

import logging
from collections.abc import Mapping, Sequence
from dataclasses import dataclass, field

import numpy as np

from .checkpoint import (
    ParameterSet,
    TaskVector,
    check_aligned,
    matrix_layers,
    read_checkpoint,
    read_sidecar,
    write_checkpoint,
    write_sidecar,
)
from .curvature import as_values
from .linalg import procrustes_orthonormalize, thin_svd

logger = logging.getLogger(__name__)


class RankGuardError(ValueError):
    """``k*T`` exceeds ``min(rows, cols)`` on at least one matrix layer."""

    def __init__(self, violations):
        self.violations = list(violations)
        lines = [f"{name}: k*T={kt} > min{shape}={min(shape)}" for name, shape, kt in self.violations]
        super().__init__("rank guard violated on " + "; ".join(lines))


@dataclass(frozen=True)
class LayerBasis:
    u: np.ndarray  # rows x kT
    v: np.ndarray  # cols x kT

    @property
    def size(self) -> int:
        return self.u.shape[1]


@dataclass
class TaggedBasis:
    """Tagged atoms for every basis layer.

    ``fallback`` lists matrix layers left out of the basis because the rank
    guard failed for them and the caller asked for a fallback instead of an
    error; merges treat them like auxiliary layers.
    """

    layers: dict[str, LayerBasis]
    k: int
    n_tasks: int
    fallback: list[str] = field(default_factory=list)

    @property
    def tags(self) -> list[int]:
        return [t for t in range(self.n_tasks) for _ in range(self.k)]

    @property
    def size(self) -> int:
        return self.k * self.n_tasks

    def __contains__(self, name) -> bool:
        return name in self.layers

    def gram(self, name: str) -> np.ndarray:
        lb = self.layers[name]
        return (lb.u.T @ lb.u) * (lb.v.T @ lb.v)


def check_rank_guard(delta: ParameterSet, k: int, n_tasks: int, layers=None):
    layers = matrix_layers(delta) if layers is None else layers
    return [(n, delta[n].shape, k * n_tasks) for n in layers if k * n_tasks > min(delta[n].shape)]


def build_tagged_basis(deltas: Sequence[TaskVector], k: int, on_violation: str = "raise") -> TaggedBasis:
    """Stack each task's top-``k`` singular vectors per layer and orthonormalize.

    Atoms are ordered task-major, then by descending singular value. When
    ``on_violation`` is ``"fallback"``, layers failing the rank guard are
    recorded in ``basis.fallback`` instead of raising.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    if not deltas:
        raise ValueError("need at least one task vector")
    if on_violation not in ("raise", "fallback"):
        raise ValueError(f"unknown on_violation {on_violation!r}")
    check_aligned(*deltas)
    T = len(deltas)
    violations = check_rank_guard(deltas[0], k, T)
    if violations and on_violation == "raise":
        raise RankGuardError(violations)
    skipped = {n for n, _, _ in violations}
    for n in sorted(skipped):
        logger.warning("layer %s left out of the basis (k*T=%d > min%s)", n, k * T, deltas[0][n].shape)

    layers = {}
    for name in matrix_layers(deltas[0]):
        if name in skipped:
            continue
        svds = [thin_svd(d[name], k) for d in deltas]
        U = np.concatenate([s.U for s in svds], axis=1)
        V = np.concatenate([s.V for s in svds], axis=1)
        layers[name] = LayerBasis(procrustes_orthonormalize(U), procrustes_orthonormalize(V))
    return TaggedBasis(layers, k, T, sorted(skipped, key=list(deltas[0]).index))


def _check_layers(basis: TaggedBasis, delta: Mapping) -> None:
    for name, lb in basis.layers.items():
        if name not in delta:
            raise ValueError(f"layer {name!r} missing from input")
        shape = np.shape(delta[name])
        if shape != (lb.u.shape[0], lb.v.shape[0]):
            raise ValueError(f"layer {name!r} has shape {shape}, basis expects {(lb.u.shape[0], lb.v.shape[0])}")


def project_vector(basis: TaggedBasis, delta: Mapping) -> dict[str, np.ndarray]:
    _check_layers(basis, delta)
    return {
        name: np.einsum("ri,rc,ci->i", lb.u, np.asarray(delta[name], dtype=np.float64), lb.v)
        for name, lb in basis.layers.items()
    }


def lift(basis: TaggedBasis, coeffs: Mapping[str, np.ndarray]) -> dict[str, np.ndarray]:
    out = {}
    for name, lb in basis.layers.items():
        c = np.asarray(coeffs[name], dtype=np.float64)
        if c.shape != (lb.size,):
            raise ValueError(f"layer {name!r}: expected {lb.size} coefficients, got shape {c.shape}")
        out[name] = (lb.u * c) @ lb.v.T
    return out


def residual_component(basis: TaggedBasis, delta: Mapping) -> dict[str, np.ndarray]:
    """Part of ``delta`` orthogonal to every atom, for basis layers only."""
    lifted = lift(basis, project_vector(basis, delta))
    return {name: np.asarray(delta[name], dtype=np.float64) - lifted[name] for name in basis.layers}


def project_layer_diag(lb: LayerBasis, diag: np.ndarray) -> np.ndarray:
    """``S^T diag(vec(diag)) S`` for one layer without materializing ``S``.

    Entry ``(i, j)`` is ``(u_i * u_j)^T diag (v_i * v_j)``.
    """
    p = lb.size
    H = np.empty((p, p))
    for i in range(p):
        right = diag @ (lb.v * lb.v[:, i : i + 1])  # rows x p
        H[i] = np.sum((lb.u * lb.u[:, i : i + 1]) * right, axis=0)
    return 0.5 * (H + H.T)


def project_diag_curvature(basis: TaggedBasis, fisher: Mapping) -> dict[str, np.ndarray]:
    values = as_values(fisher)
    _check_layers(basis, values)
    out = {}
    for name, lb in basis.layers.items():
        diag = np.asarray(values[name], dtype=np.float64)
        if np.any(diag < 0):
            raise ValueError(f"negative Fisher entries in layer {name!r}")
        out[name] = project_layer_diag(lb, diag)
    return out


def materialize_layer(lb: LayerBasis) -> np.ndarray:
    """Explicit ``(rows*cols) x kT`` matrix of vectorized atoms (row-major vec)."""
    return np.stack([np.outer(lb.u[:, i], lb.v[:, i]).ravel() for i in range(lb.size)], axis=1)


# ---------------------------------------------------------------------------
# Basis files: an EPMC container with ``<layer>/u`` and ``<layer>/v`` entries.


def save_basis(basis: TaggedBasis, path) -> None:
    entries = {}
    for name, lb in basis.layers.items():
        entries[f"{name}/u"] = lb.u
        entries[f"{name}/v"] = lb.v
    write_checkpoint(ParameterSet(entries), path)
    write_sidecar(
        path,
        {
            "kind": "tagged-basis",
            "k": basis.k,
            "T": basis.n_tasks,
            "layers": list(basis.layers),
            "fallback": basis.fallback,
            "tags": basis.tags,
        },
    )


def load_basis(path) -> TaggedBasis:
    meta = read_sidecar(path)
    if meta.get("kind") != "tagged-basis":
        raise ValueError(f"{path} is not a basis file")
    k, T = int(meta["k"]), int(meta["T"])
    data = read_checkpoint(path)
    names = [n for n in meta.get("layers", "").split(",") if n]
    layers = {}
    for name in names:
        u, v = data[f"{name}/u"], data[f"{name}/v"]
        if u.shape[1] != k * T or v.shape[1] != k * T:
            raise ValueError(f"basis layer {name!r} does not hold k*T={k * T} atoms")
        layers[name] = LayerBasis(u, v)
    fallback = [n for n in meta.get("fallback", "").split(",") if n]
    return TaggedBasis(layers, k, T, fallback)
