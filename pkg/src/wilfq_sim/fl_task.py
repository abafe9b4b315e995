"""Desk-scale federated learning task: softmax regression on Gaussian clusters."""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np
from scipy import optimize

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class Dataset:
    features: np.ndarray  # (n, d)
    labels: np.ndarray  # (n,) ints in [0, n_classes)
    n_classes: int

    def __post_init__(self):
        x = np.asarray(self.features, dtype=float)
        y = np.asarray(self.labels, dtype=np.int64)
        if x.ndim != 2 or x.shape[0] < 1 or x.shape[1] < 1:
            raise ValueError("features must be a non-empty (n, d) matrix")
        if y.shape != (x.shape[0],):
            raise ValueError("labels must have one entry per row")
        if self.n_classes < 2:
            raise ValueError("need at least two classes")
        if y.min() < 0 or y.max() >= self.n_classes:
            raise ValueError("labels out of range")
        object.__setattr__(self, "features", x)
        object.__setattr__(self, "labels", y)

    @property
    def n(self) -> int:
        return self.features.shape[0]

    @property
    def dim(self) -> int:
        return self.features.shape[1]

    @property
    def n_params(self) -> int:
        return self.n_classes * (self.dim + 1)


@dataclass(frozen=True)
class Shard:
    owner: int
    indices: np.ndarray

    def __len__(self):
        return len(self.indices)


def make_cluster_centers(classes: int, dim: int, rng: np.random.Generator, scale: float = 1.0) -> np.ndarray:
    return scale * rng.standard_normal((classes, dim))


def generate_synthetic_dataset(n: int, classes: int, dim: int, cluster_spread: float,
                               rng: np.random.Generator, centers: np.ndarray | None = None,
                               center_scale: float = 1.0) -> Dataset:
    """Balanced Gaussian clusters, one per label.

    Pass ``centers`` to draw a second sample (e.g. a test split) from the same
    clusters.
    """
    if n < classes:
        raise ValueError("n must be at least the number of classes")
    if dim < 1:
        raise ValueError("dim must be positive")
    if centers is None:
        centers = make_cluster_centers(classes, dim, rng, center_scale)
    labels = rng.permutation(np.arange(n) % classes)
    noise = rng.standard_normal((n, dim))
    features = centers[labels] + cluster_spread * noise
    return Dataset(features, labels, classes)


def load_dataset(path) -> Dataset:
    """Read a CSV whose first line is ``n,d,K`` followed by ``n`` rows of
    ``d`` features and a trailing integer label."""
    with open(path) as fh:
        header = fh.readline().strip().split(",")
        n, d, k = (int(v) for v in header)
        body = np.loadtxt(fh, delimiter=",", ndmin=2)
    if body.shape != (n, d + 1):
        raise ValueError(f"expected {n} rows of {d + 1} columns, got {body.shape}")
    return Dataset(body[:, :d], body[:, d].astype(np.int64), k)


def dirichlet_partition(dataset: Dataset, n_clients: int, tau: float, rng: np.random.Generator) -> list[Shard]:
    """Split each label's samples across clients with Dirichlet(tau) proportions.

    Empty shards are topped up one sample at a time from the largest shard.
    """
    if n_clients < 1:
        raise ValueError("n_clients must be positive")
    if tau <= 0:
        raise ValueError("tau must be positive")
    if n_clients > dataset.n:
        raise ValueError(f"cannot give {n_clients} clients a sample each from {dataset.n} rows")
    buckets: list[list[int]] = [[] for _ in range(n_clients)]
    for k in range(dataset.n_classes):
        idx = np.flatnonzero(dataset.labels == k)
        if idx.size == 0:
            continue
        idx = rng.permutation(idx)
        props = rng.dirichlet(np.full(n_clients, tau))
        cuts = (np.cumsum(props)[:-1] * idx.size).astype(int)
        for j, part in enumerate(np.split(idx, cuts)):
            buckets[j].extend(part.tolist())
    sizes = np.array([len(b) for b in buckets])
    for j in np.flatnonzero(sizes == 0):
        donor = int(np.argmax(sizes))
        buckets[j].append(buckets[donor].pop())
        sizes[donor] -= 1
        sizes[j] += 1
    return [Shard(j, np.sort(np.asarray(b, dtype=np.int64))) for j, b in enumerate(buckets)]


def zero_params(dataset: Dataset) -> np.ndarray:
    return np.zeros(dataset.n_params)


def _unpack(params: np.ndarray, dim: int, n_classes: int):
    w = params.reshape(dim + 1, n_classes)
    return w[:dim], w[dim]


def _logits(params, x, n_classes):
    w, b = _unpack(params, x.shape[1], n_classes)
    return x @ w + b


def _logsumexp_rows(z: np.ndarray) -> np.ndarray:
    zmax = z.max(axis=1)
    return zmax + np.log(np.exp(z - zmax[:, None]).sum(axis=1))


def softmax_loss(params: np.ndarray, x: np.ndarray, y: np.ndarray, n_classes: int) -> float:
    z = _logits(params, x, n_classes)
    return float(np.mean(_logsumexp_rows(z) - z[np.arange(len(y)), y]))


def softmax_loss_and_grad(params: np.ndarray, x: np.ndarray, y: np.ndarray, n_classes: int):
    z = _logits(params, x, n_classes)
    lse = _logsumexp_rows(z)
    loss = float(np.mean(lse - z[np.arange(len(y)), y]))
    p = np.exp(z - lse[:, None])
    p[np.arange(len(y)), y] -= 1.0
    p /= len(y)
    grad = np.vstack([x.T @ p, p.sum(axis=0)])
    return loss, grad.ravel()


def local_loss(params: np.ndarray, dataset: Dataset, shard: Shard) -> float:
    """Mean cross-entropy of ``params`` on the shard's rows."""
    if len(shard) == 0:
        raise ValueError("shard is empty")
    return softmax_loss(params, dataset.features[shard.indices], dataset.labels[shard.indices], dataset.n_classes)


def local_gradient(params: np.ndarray, dataset: Dataset, shard: Shard) -> np.ndarray:
    return softmax_loss_and_grad(params, dataset.features[shard.indices], dataset.labels[shard.indices],
                                 dataset.n_classes)[1]


def local_train(start: np.ndarray, dataset: Dataset, shard: Shard, epochs: int, lr: float, batch: int,
                rng: np.random.Generator) -> np.ndarray:
    """Mini-batch gradient descent on the shard; ``start`` is left untouched."""
    if len(shard) == 0:
        raise ValueError("shard is empty")
    if lr <= 0:
        raise ValueError("lr must be positive")
    params = np.array(start, dtype=float, copy=True)
    x = dataset.features[shard.indices]
    y = dataset.labels[shard.indices]
    for _ in range(epochs):
        order = rng.permutation(len(y))
        for s in range(0, len(y), batch):
            b = order[s:s + batch]
            _, g = softmax_loss_and_grad(params, x[b], y[b], dataset.n_classes)
            params -= lr * g
    return params


def data_weights(sizes: Mapping[int, int]) -> dict[int, float]:
    """Data-proportional aggregation weights renormalized over ``sizes``' keys."""
    total = float(sum(sizes.values()))
    if total <= 0:
        raise ValueError("no data among participants")
    return {j: d / total for j, d in sizes.items()}


def aggregate(models: Sequence[np.ndarray] | Mapping[int, np.ndarray], weights) -> np.ndarray:
    """Weighted sum of parameter vectors.

    ``models`` and ``weights`` are either parallel sequences or mappings keyed
    by client id.
    """
    if isinstance(models, Mapping):
        if set(models) != set(weights):
            raise ValueError("weights must cover exactly the listed models")
        keys = sorted(models)
        stack = np.stack([models[k] for k in keys])
        w = np.array([weights[k] for k in keys], dtype=float)
    else:
        stack = np.stack(list(models))
        w = np.asarray(list(weights.values()) if isinstance(weights, Mapping) else weights, dtype=float)
        if len(w) != len(stack):
            raise ValueError("weights must cover exactly the listed models")
    if np.any(w < 0):
        raise ValueError("weights must be non-negative")
    if abs(w.sum() - 1.0) > 1e-9:
        raise ValueError(f"weights sum to {w.sum()!r}, expected 1")
    return w @ stack


def global_loss(models: Mapping[int, np.ndarray], dataset: Dataset, shards: Mapping[int, Shard],
                weights: Mapping[int, float]) -> float:
    """Participant-weighted loss of personalized models, weights renormalized."""
    if not models:
        raise ValueError("no participants")
    if not (set(models) == set(shards) == set(weights)):
        raise ValueError("models, shards and weights must share client ids")
    total = sum(weights[j] for j in models)
    return float(sum(weights[j] / total * local_loss(models[j], dataset, shards[j]) for j in sorted(models)))


def full_loss(params: np.ndarray, dataset: Dataset) -> float:
    return softmax_loss(params, dataset.features, dataset.labels, dataset.n_classes)


def accuracy(params: np.ndarray, dataset: Dataset) -> float:
    pred = np.argmax(_logits(params, dataset.features, dataset.n_classes), axis=1)
    return float(np.mean(pred == dataset.labels))


class OracleNotConverged(RuntimeError):
    def __init__(self, message: str, best_loss: float):
        super().__init__(message)
        self.best_loss = best_loss


def optimal_loss_oracle(dataset: Dataset, tolerance: float = 1e-6, rng: np.random.Generator | None = None,
                        max_iter: int = 20_000, restarts: int = 10) -> float:
    """Centralized full-batch minimum of the cross-entropy.

    L-BFGS runs until the gradient 2-norm drops below ``tolerance``; it is
    restarted from its last iterate when the line search stalls.
    """
    x = np.zeros(dataset.n_params) if rng is None else 0.01 * rng.standard_normal(dataset.n_params)

    def fun(p):
        return softmax_loss_and_grad(p, dataset.features, dataset.labels, dataset.n_classes)

    best = np.inf
    for _ in range(restarts):
        res = optimize.minimize(fun, x, jac=True, method="L-BFGS-B",
                                options={"gtol": tolerance * 1e-2, "ftol": 0.0, "maxiter": max_iter})
        x = res.x
        best = min(best, float(res.fun))
        if np.linalg.norm(res.jac) < tolerance:
            return float(res.fun)
    raise OracleNotConverged(f"gradient norm {np.linalg.norm(res.jac):.3g} above {tolerance:g}", best)
