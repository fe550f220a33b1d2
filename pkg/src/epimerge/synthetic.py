"""Synthetic tasks with known ground truth.

Quadratic suites have exact diagonal Hessians, so second-order statements
about merging hold with no Taylor remainder. The MLP tasks are small
Gaussian-blob classification problems trained by minibatch gradient descent
from a shared initialization, a desk-scale stand-in for fine-tuning.
"""

from __future__ import annotations

import logging
from collections.abc import Mapping
from dataclasses import dataclass

import numpy as np

from .checkpoint import ParameterSet, TaskVector, is_matrix_shape, read_checkpoint, read_sidecar, write_checkpoint, write_sidecar
from .curvature import CurvatureEstimate, CurvatureSource

logger = logging.getLogger(__name__)

MLP_LAYERS = ("fc1.weight", "fc1.bias", "fc2.weight", "fc2.bias")


class TrainingDivergedError(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# Quadratic tasks


@dataclass
class QuadraticTask:
    """``L(theta) = 1/2 sum h * (theta - optimum)^2 + floor`` with a diagonal Hessian ``h``."""

    optimum: ParameterSet
    hessian: ParameterSet
    floor: float = 0.0

    def loss(self, theta: Mapping, layers=None) -> float:
        names = list(self.optimum) if layers is None else layers
        total = 0.0
        for n in names:
            r = np.asarray(theta[n]) - self.optimum[n]
            total += 0.5 * float(np.sum(self.hessian[n] * r * r))
        return total + self.floor

    def grad(self, theta: Mapping) -> TaskVector:
        return TaskVector({n: self.hessian[n] * (np.asarray(theta[n]) - self.optimum[n]) for n in self.optimum})

    def fisher(self) -> CurvatureEstimate:
        return CurvatureEstimate(self.hessian, 1, CurvatureSource.EXACT_QUADRATIC)


@dataclass
class QuadraticSuite:
    base: ParameterSet
    tasks: list[QuadraticTask]

    def __len__(self):
        return len(self.tasks)

    def __iter__(self):
        return iter(self.tasks)

    def __getitem__(self, i):
        return self.tasks[i]

    @property
    def models(self) -> list[ParameterSet]:
        return [t.optimum for t in self.tasks]

    @property
    def fishers(self) -> list[CurvatureEstimate]:
        return [t.fisher() for t in self.tasks]


def _layer_shapes(layer_dims) -> dict[str, tuple]:
    if isinstance(layer_dims, Mapping):
        return {n: tuple(s) for n, s in layer_dims.items()}
    return {f"layer{i}": tuple(s) for i, s in enumerate(layer_dims)}


def _ball_radius(rng, m: int, radius: float) -> float:
    return radius * rng.uniform() ** (1.0 / max(m, 1))


def gen_quadratic_suite(
    seed: int,
    layer_dims,
    T: int,
    heterogeneity: float,
    structure: str = "dense",
    rank: int = 1,
    identical: bool = False,
    radius: float = 1.0,
) -> QuadraticSuite:
    """Random quadratic tasks around a shared base.

    Per-task Hessian diagonals are ``exp(heterogeneity * z)`` with standard
    normal ``z``, so ``heterogeneity=0`` gives ``H = I`` for every task. Task
    optima lie in a ball of ``radius`` around the base. With
    ``structure="orthogonal"`` each task's matrix-layer delta has exact rank
    ``rank`` and its singular vectors are orthogonal to every other task's,
    so a tagged basis of that rank contains the deltas exactly (auxiliary
    layers then stay at the base).
    """
    if T < 1:
        raise ValueError("T must be >= 1")
    if not 0.0 <= heterogeneity <= 1.0:
        raise ValueError("heterogeneity must lie in [0, 1]")
    if structure not in ("dense", "orthogonal"):
        raise ValueError(f"unknown structure {structure!r}")
    shapes = _layer_shapes(layer_dims)
    rng = np.random.default_rng(seed)
    base = ParameterSet({n: rng.standard_normal(s) for n, s in shapes.items()})
    m = sum(int(np.prod(s)) for s in shapes.values())

    if structure == "orthogonal":
        frames = {}
        for n, s in shapes.items():
            if is_matrix_shape(s):
                if rank * T > min(s):
                    raise ValueError(f"layer {n} {s} cannot hold {T} orthogonal rank-{rank} deltas")
                U, _ = np.linalg.qr(rng.standard_normal((s[0], rank * T)))
                V, _ = np.linalg.qr(rng.standard_normal((s[1], rank * T)))
                frames[n] = (U, V)

    n_draws = 1 if identical else T
    deltas = []
    for t in range(n_draws):
        if structure == "dense":
            raw = {n: rng.standard_normal(s) for n, s in shapes.items()}
        else:
            raw = {}
            for n, s in shapes.items():
                if n in frames:
                    U, V = frames[n]
                    cols = slice(t * rank, (t + 1) * rank)
                    sig = np.sort(rng.uniform(0.5, 1.5, rank))[::-1] * (1.0 + 0.1 * np.arange(rank, 0, -1))
                    raw[n] = (U[:, cols] * sig) @ V[:, cols].T
                else:
                    raw[n] = np.zeros(s)
        norm = np.sqrt(sum(float(np.sum(a * a)) for a in raw.values()))
        scale = _ball_radius(rng, m, radius) / norm if norm > 0 else 0.0
        deltas.append({n: a * scale for n, a in raw.items()})
    if identical:
        deltas = deltas * T

    tasks = []
    for t in range(T):
        hess = ParameterSet({n: np.exp(heterogeneity * rng.standard_normal(s)) for n, s in shapes.items()})
        optimum = ParameterSet({n: base[n] + deltas[t][n] for n in shapes})
        tasks.append(QuadraticTask(optimum, hess, float(rng.uniform(0.0, 1.0))))
    return QuadraticSuite(base, tasks)


# ---------------------------------------------------------------------------
# MLP tasks


@dataclass
class MlpTask:
    X_train: np.ndarray
    y_train: np.ndarray
    X_test: np.ndarray
    y_test: np.ndarray
    class_means: np.ndarray
    n_classes: int

    @property
    def n_features(self) -> int:
        return self.X_train.shape[1]


def init_mlp(rng, n: int, h: int, C: int) -> ParameterSet:
    return ParameterSet(
        {
            "fc1.weight": rng.standard_normal((h, n)) * np.sqrt(2.0 / n),
            "fc1.bias": np.zeros(h),
            "fc2.weight": rng.standard_normal((C, h)) * np.sqrt(1.0 / h),
            "fc2.bias": np.zeros(C),
        }
    )


def _balanced_labels(rng, N: int, C: int) -> np.ndarray:
    return rng.permutation(np.arange(N) % C)


def gen_mlp_tasks(
    seed: int,
    T: int = 4,
    n: int = 16,
    h: int = 16,
    C: int = 4,
    N: int = 2000,
    test_fraction: float = 0.25,
    separation: float = 6.0,
    noise: float = 1.0,
    spill: float = 0.1,
):
    """Shared initialization plus ``T`` Gaussian-blob tasks.

    Task ``t`` places its class means mostly on its own block of ``n // T``
    input features (scaled by ``spill`` on the rest), so tasks share
    the input space and the label space but lean on different features.
    Returns ``(theta0, tasks)``.
    """
    if min(T, n, h, C, N) <= 0:
        raise ValueError("all sizes must be positive")
    if N < 2 * C:
        raise ValueError(f"N={N} too small for {C} classes with a test split")
    rng = np.random.default_rng(seed)
    theta0 = init_mlp(rng, n, h, C)
    block = max(1, n // T)
    tasks = []
    for t in range(T):
        trng = np.random.default_rng([seed, t + 1])
        emphasis = np.full(n, spill)
        lo = (t * block) % n
        emphasis[lo : lo + block] = 1.0
        means = trng.standard_normal((C, n)) * emphasis * separation / np.sqrt(block)
        y = _balanced_labels(trng, N, C)
        X = means[y] + noise * trng.standard_normal((N, n))
        n_test = max(C, int(round(test_fraction * N)))
        # balanced split: the first n_test positions of a class-interleaved order
        order = _interleave_by_class(y, C)
        test_idx, train_idx = order[:n_test], order[n_test:]
        tasks.append(MlpTask(X[train_idx], y[train_idx], X[test_idx], y[test_idx], means, C))
    return theta0, tasks


def _interleave_by_class(y: np.ndarray, C: int) -> np.ndarray:
    per_class = [np.flatnonzero(y == c) for c in range(C)]
    out = []
    for i in range(max(len(p) for p in per_class)):
        for p in per_class:
            if i < len(p):
                out.append(p[i])
    return np.array(out)


def _check_mlp(theta: Mapping, n_features: int | None = None) -> None:
    missing = [n for n in MLP_LAYERS if n not in theta]
    if missing:
        raise ValueError(f"parameters lack MLP layers {missing}")
    W1, b1, W2, b2 = (np.shape(theta[n]) for n in MLP_LAYERS)
    if len(W1) != 2 or len(W2) != 2 or b1 != (W1[0],) or W2[1] != W1[0] or b2 != (W2[0],):
        raise ValueError(f"inconsistent MLP shapes {W1}, {b1}, {W2}, {b2}")
    if n_features is not None and W1[1] != n_features:
        raise ValueError(f"MLP expects {W1[1]} features, data has {n_features}")


def mlp_logits(theta: Mapping, X: np.ndarray) -> np.ndarray:
    z1 = X @ theta["fc1.weight"].T + theta["fc1.bias"]
    return np.maximum(z1, 0.0) @ theta["fc2.weight"].T + theta["fc2.bias"]


def _log_softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=-1, keepdims=True)
    return shifted - np.log(np.sum(np.exp(shifted), axis=-1, keepdims=True))


def _forward_backward(theta: Mapping, X: np.ndarray, y: np.ndarray):
    """Per-sample losses and gradients (leading sample axis)."""
    W1, b1, W2, b2 = (theta[n] for n in MLP_LAYERS)
    z1 = X @ W1.T + b1
    a1 = np.maximum(z1, 0.0)
    logp = _log_softmax(a1 @ W2.T + b2)
    rows = np.arange(len(y))
    losses = -logp[rows, y]
    dlogits = np.exp(logp)
    dlogits[rows, y] -= 1.0
    dz1 = (dlogits @ W2) * (z1 > 0)
    grads = {
        "fc1.weight": dz1[:, :, None] * X[:, None, :],
        "fc1.bias": dz1,
        "fc2.weight": dlogits[:, :, None] * a1[:, None, :],
        "fc2.bias": dlogits,
    }
    return losses, grads


def mlp_loss_grad(theta: Mapping, sample) -> tuple[float, TaskVector]:
    """Softmax cross-entropy and its gradient for one ``(features, label)`` sample."""
    x, label = sample
    x = np.asarray(x, dtype=np.float64).reshape(1, -1)
    _check_mlp(theta, x.shape[1])
    losses, grads = _forward_backward(theta, x, np.array([int(label)]))
    return float(losses[0]), TaskVector({n: g[0] for n, g in grads.items()})


def mlp_batch_loss_grad(theta: Mapping, X: np.ndarray, y: np.ndarray) -> tuple[float, TaskVector]:
    """Mean loss and mean gradient over a batch."""
    W1, b1, W2, b2 = (theta[n] for n in MLP_LAYERS)
    z1 = X @ W1.T + b1
    a1 = np.maximum(z1, 0.0)
    logp = _log_softmax(a1 @ W2.T + b2)
    rows = np.arange(len(y))
    B = len(y)
    dlogits = np.exp(logp)
    dlogits[rows, y] -= 1.0
    dlogits /= B
    dz1 = (dlogits @ W2) * (z1 > 0)
    grad = TaskVector(
        {
            "fc1.weight": dz1.T @ X,
            "fc1.bias": dz1.sum(axis=0),
            "fc2.weight": dlogits.T @ a1,
            "fc2.bias": dlogits.sum(axis=0),
        }
    )
    return float(-logp[rows, y].mean()), grad


def gradient_stream(theta: Mapping, task: MlpTask) -> list[TaskVector]:
    """Per-sample gradients over the training split, in dataset order."""
    _check_mlp(theta, task.n_features)
    _, grads = _forward_backward(theta, task.X_train, task.y_train)
    return [TaskVector({n: grads[n][i] for n in MLP_LAYERS}) for i in range(len(task.y_train))]


def full_batch_grad_norm(theta: Mapping, task: MlpTask) -> float:
    _, g = mlp_batch_loss_grad(theta, task.X_train, task.y_train)
    return float(np.linalg.norm(g.flatten()))


def training_loss(theta: Mapping, task: MlpTask) -> float:
    return mlp_batch_loss_grad(theta, task.X_train, task.y_train)[0]


def finetune_mlp(theta0: ParameterSet, task: MlpTask, steps: int = 1000, lr: float = 0.5, seed: int = 0,
                 batch_size: int = 500, callback=None) -> ParameterSet:
    """Minibatch gradient descent from ``theta0``; one reshuffle per pass over the data.

    The step size decays linearly to 1% of ``lr`` over the run so that the
    final iterate settles near a stationary point. ``callback(step, theta)``
    is called after every update.
    """
    if steps < 0 or lr < 0:
        raise ValueError("steps and lr must be non-negative")
    _check_mlp(theta0, task.n_features)
    theta = {n: theta0[n].copy() for n in theta0}
    if steps == 0 or lr == 0:
        return ParameterSet(theta, dtypes=theta0.dtypes)
    rng = np.random.default_rng(seed)
    N = len(task.y_train)
    batch_size = min(batch_size, N)
    order, pos = rng.permutation(N), 0
    for step in range(steps):
        if pos + batch_size > N:
            order, pos = rng.permutation(N), 0
        idx = order[pos : pos + batch_size]
        pos += batch_size
        loss, g = mlp_batch_loss_grad(theta, task.X_train[idx], task.y_train[idx])
        if not np.isfinite(loss):
            raise TrainingDivergedError(f"loss became {loss} at step {step}")
        step_lr = lr * (1.0 - 0.99 * step / steps)
        for n in theta:
            theta[n] -= step_lr * g[n]
        if callback is not None:
            callback(step, theta)
    out = ParameterSet(theta, dtypes=theta0.dtypes)
    logger.debug("finetune done: full-batch grad norm %.3g", full_batch_grad_norm(out, task))
    return out


def evaluate_accuracy(theta: Mapping, task: MlpTask) -> float:
    _check_mlp(theta, task.n_features)
    pred = np.argmax(mlp_logits(theta, task.X_test), axis=1)
    return float(np.mean(pred == task.y_test))


def linear_path_losses(theta_a: Mapping, theta_b: Mapping, task: MlpTask, n_points: int = 11) -> list[float]:
    """Training loss along the straight line from ``theta_a`` to ``theta_b``."""
    out = []
    for s in np.linspace(0.0, 1.0, n_points):
        theta = {n: (1 - s) * np.asarray(theta_a[n]) + s * np.asarray(theta_b[n]) for n in MLP_LAYERS}
        out.append(training_loss(theta, task))
    return out


# ---------------------------------------------------------------------------
# Dataset files


def save_task(task: MlpTask, path) -> None:
    write_checkpoint(
        ParameterSet(
            {
                "X_train": task.X_train,
                "y_train": task.y_train.astype(np.float64),
                "X_test": task.X_test,
                "y_test": task.y_test.astype(np.float64),
                "class_means": task.class_means,
            }
        ),
        path,
    )
    write_sidecar(path, {"kind": "dataset", "n_classes": task.n_classes})


def load_task(path) -> MlpTask:
    data = read_checkpoint(path)
    meta = read_sidecar(path)
    if meta.get("kind") != "dataset":
        raise ValueError(f"{path} is not a dataset file")
    return MlpTask(
        data["X_train"],
        data["y_train"].astype(np.int64),
        data["X_test"],
        data["y_test"].astype(np.int64),
        data["class_means"],
        int(meta["n_classes"]),
    )
