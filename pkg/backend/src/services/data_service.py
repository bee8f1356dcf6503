"""
Data Service Module

Synthetic heterogeneous client datasets. The base pool is a Gaussian mixture
whose class means sit at equal norm around the origin, so a bias-free linear
classifier can separate them at the configured margin. Clients are derived from
the pool either by Dirichlet label skew or by per-client task transformations
(label permutations or input rotations).
"""

import logging
import math
from dataclasses import dataclass
from typing import List, Sequence, Tuple

import numpy as np
import pandas as pd

from errors import PoolExhaustedError
from models.dataset import ClientDataset, LabeledSet, PoolConfig, TaskKind
from models.rng import Rng

logger = logging.getLogger(__name__)


@dataclass(frozen=True, eq=False)
class TaskTransform:
    """One client's task: a label permutation and/or an input rotation"""
    kind: TaskKind
    permutation: Tuple[int, ...] = ()
    angle_deg: float = 0.0
    plane: Tuple[int, int] = (0, 1)

    @property
    def tag(self) -> str:
        if self.kind == TaskKind.LABEL_PERMUTATION:
            return "perm:" + "-".join(str(p) for p in self.permutation)
        if self.kind == TaskKind.INPUT_ROTATION:
            return f"rot:{self.angle_deg:g}"
        return "identity"

    def apply(self, data: LabeledSet) -> LabeledSet:
        X, y = data.X, data.y
        if self.kind == TaskKind.LABEL_PERMUTATION:
            y = np.asarray(self.permutation, dtype=np.int64)[y]
        elif self.kind == TaskKind.INPUT_ROTATION:
            X = X @ rotation_matrix(X.shape[1], self.angle_deg, self.plane).T
        return LabeledSet(X, y)


def rotation_matrix(d: int, angle_deg: float, plane: Tuple[int, int] = (0, 1)) -> np.ndarray:
    """Rotation by angle_deg inside the given coordinate plane, identity elsewhere."""
    i, j = plane
    if d < 2 or not (0 <= i < d and 0 <= j < d and i != j):
        raise ValueError(f"Rotation plane {plane} invalid for dimension {d}")
    theta = math.radians(angle_deg)
    R = np.eye(d)
    R[i, i] = R[j, j] = math.cos(theta)
    R[i, j] = -math.sin(theta)
    R[j, i] = math.sin(theta)
    return R


def make_base_pool(config: PoolConfig, rng: Rng) -> LabeledSet:
    """
    Labeled pool of n_classes * samples_per_class examples.

    Class means are (margin / 2) * u_k with unit directions u_k (orthonormal
    when n_classes <= d_in, antipodal for two classes); noise is isotropic.
    """
    generator = rng.generator
    k, d = config.n_classes, config.d_in
    if k == 2:
        u = generator.normal(size=d)
        u /= np.linalg.norm(u)
        directions = np.stack([u, -u])
    elif k <= d:
        q, _ = np.linalg.qr(generator.normal(size=(d, k)))
        directions = q.T
    else:
        directions = generator.normal(size=(k, d))
        directions /= np.linalg.norm(directions, axis=1, keepdims=True)
    means = 0.5 * config.margin * directions

    y = np.repeat(np.arange(k), config.samples_per_class)
    X = means[y] + generator.normal(0.0, config.noise_std, size=(len(y), d))
    order = generator.permutation(len(y))
    logger.info(f"Built pool: {k} classes x {config.samples_per_class} samples, d={d}, margin={config.margin}")
    return LabeledSet(X[order], y[order])


def largest_remainder(weights: np.ndarray, total: int) -> np.ndarray:
    """Integer quotas proportional to weights that sum exactly to total; ties go to the lower index."""
    weights = np.asarray(weights, dtype=np.float64)
    if total < 0 or np.any(weights < 0):
        raise ValueError("Quotas need a non-negative total and weights")
    if weights.sum() <= 0:
        raise ValueError("Quota weights must not all be zero")
    exact = weights / weights.sum() * total
    quotas = np.floor(exact).astype(np.int64)
    remainder = total - int(quotas.sum())
    order = np.argsort(-(exact - quotas), kind="stable")
    quotas[order[:remainder]] += 1
    return quotas


def partition_dirichlet(pool: LabeledSet, alpha: float, n_clients: int, rng: Rng,
                        n_train: int, n_test: int, n_classes: int = None) -> List[ClientDataset]:
    """
    Dirichlet label skew.

    For each class, the split across clients is drawn from Dirichlet(alpha * 1).
    Each client's class mix is the global histogram reweighted by its share,
    and both its train and test sets are drawn from that one mix (largest
    remainder quotas), without replacement from the pool.
    """
    if not alpha > 0:
        raise ValueError(f"Dirichlet alpha must be > 0, got {alpha}")
    if n_clients < 1:
        raise ValueError(f"n_clients must be >= 1, got {n_clients}")
    n_classes = n_classes or int(pool.y.max()) + 1
    generator = rng.generator
    global_hist = pool.class_histogram(n_classes).astype(np.float64)
    shares = np.stack([
        generator.dirichlet(np.full(n_clients, alpha)) if n_clients > 1 else np.ones(1)
        for _ in range(n_classes)
    ])  # (n_classes, n_clients)

    available = [list(generator.permutation(np.flatnonzero(pool.y == c))) for c in range(n_classes)]
    clients = []
    for i in range(n_clients):
        mix = global_hist * shares[:, i]
        if mix.sum() <= 0:
            mix = global_hist
        train_q = largest_remainder(mix, n_train)
        test_q = largest_remainder(mix, n_test)
        train_idx, test_idx = [], []
        for c in range(n_classes):
            need = int(train_q[c] + test_q[c])
            if need > len(available[c]):
                raise PoolExhaustedError(
                    f"Client {i} needs {need} examples of class {c}, pool has {len(available[c])} left"
                )
            taken, available[c] = available[c][:need], available[c][need:]
            train_idx.extend(taken[:train_q[c]])
            test_idx.extend(taken[train_q[c]:])
        train_idx = np.asarray(train_idx, dtype=np.int64)[generator.permutation(len(train_idx))]
        test_idx = np.asarray(test_idx, dtype=np.int64)[generator.permutation(len(test_idx))]
        clients.append(ClientDataset(i, pool.subset(train_idx), pool.subset(test_idx),
                                     task_tag=f"dirichlet:{alpha:g}"))
    logger.info(f"Dirichlet partition: {n_clients} clients, alpha={alpha}")
    return clients


def make_task_transforms(kind: TaskKind, n_clients: int, n_classes: int, rng: Rng,
                         max_angle_deg: float = 90.0) -> List[TaskTransform]:
    """
    One task per client.

    Client 0 keeps the identity labeling and every other client relabels with
    a uniform random permutation drawn from rng.child(f"task{i}"), so two
    clients agree on 1/K of the labels in expectation. Rotations are equispaced
    in [0, max_angle_deg] within the plane of the first two feature axes.
    """
    kind = TaskKind(kind)
    if kind == TaskKind.IDENTITY:
        return [TaskTransform(TaskKind.IDENTITY) for _ in range(n_clients)]
    if kind == TaskKind.LABEL_PERMUTATION:
        transforms = [TaskTransform(kind, permutation=tuple(range(n_classes)))]
        for i in range(1, n_clients):
            perm = rng.child(f"task{i}").generator.permutation(n_classes)
            transforms.append(TaskTransform(kind, permutation=tuple(int(p) for p in perm)))
        return transforms
    if n_clients == 1:
        return [TaskTransform(kind, angle_deg=0.0)]
    step = max_angle_deg / (n_clients - 1)
    return [TaskTransform(kind, angle_deg=i * step) for i in range(n_clients)]


def partition_distinct_tasks(pool: LabeledSet, transforms: Sequence[TaskTransform],
                             n_clients: int, rng: Rng, n_train: int, n_test: int
                             ) -> List[ClientDataset]:
    """Disjoint iid slices of the pool, one transformed task per client."""
    if len(transforms) != n_clients:
        raise ValueError(f"Got {len(transforms)} task transforms for {n_clients} clients")
    per_client = n_train + n_test
    if per_client * n_clients > len(pool):
        raise PoolExhaustedError(
            f"{n_clients} clients x {per_client} examples exceed the pool of {len(pool)}"
        )
    order = rng.generator.permutation(len(pool))
    clients = []
    for i, transform in enumerate(transforms):
        chunk = order[i * per_client:(i + 1) * per_client]
        train = transform.apply(pool.subset(chunk[:n_train]))
        test = transform.apply(pool.subset(chunk[n_train:]))
        clients.append(ClientDataset(i, train, test, task_tag=transform.tag))
    logger.info(f"Distinct-task partition: {[c.task_tag for c in clients]}")
    return clients


def client_histograms(clients: Sequence[ClientDataset], n_classes: int, split: str = "train") -> np.ndarray:
    """(n_clients, n_classes) label counts."""
    return np.stack([getattr(c, split).class_histogram(n_classes) for c in clients])


def export_csv(data: LabeledSet, path: str) -> None:
    """Columns x_0..x_{d-1}, y."""
    frame = pd.DataFrame(data.X, columns=[f"x_{j}" for j in range(data.d_in)])
    frame["y"] = data.y
    try:
        frame.to_csv(path, index=False, float_format="%.17g")
    except OSError as e:
        logger.error(f"Failed to export dataset to {path}: {e}")
        raise


def import_csv(path: str) -> LabeledSet:
    try:
        frame = pd.read_csv(path, float_precision="round_trip")
    except OSError as e:
        logger.error(f"Failed to import dataset from {path}: {e}")
        raise
    if "y" not in frame.columns:
        raise ValueError(f"{path} has no 'y' column")
    feature_cols = sorted((c for c in frame.columns if c.startswith("x_")), key=lambda c: int(c[2:]))
    return LabeledSet(frame[feature_cols].to_numpy(dtype=np.float64),
                      frame["y"].to_numpy(dtype=np.int64))
