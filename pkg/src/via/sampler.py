"""K-Means over sequence descriptors and contrastive source selection."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .skeleton import root_center


class SamplerError(ValueError):
    pass


def descriptor(frames: np.ndarray) -> np.ndarray:
    """Per-joint temporal mean and std of root-centred coordinates, ``[2·V·C]``.

    Accepts one sequence ``[T, V, C]`` or a batch ``[N, T, V, C]``.
    """
    x = np.asarray(frames, dtype=np.float64)
    mean = x.mean(axis=-3)
    std = x.std(axis=-3)
    lead = x.shape[:-3]
    return np.concatenate([mean.reshape(lead + (-1,)), std.reshape(lead + (-1,))], axis=-1)


def dataset_descriptors(frames: np.ndarray) -> np.ndarray:
    return descriptor(root_center(np.asarray(frames)))


@dataclass
class ClusterModel:
    k: int
    centroids: np.ndarray
    assignments: np.ndarray
    inertia_history: list[float] = field(default_factory=list)

    @property
    def inertia(self) -> float:
        return self.inertia_history[-1]

    def members(self, cluster: int) -> np.ndarray:
        return np.flatnonzero(self.assignments == cluster)


def _sq_dists(x: np.ndarray, c: np.ndarray) -> np.ndarray:
    d = (x * x).sum(1)[:, None] - 2 * x @ c.T + (c * c).sum(1)[None]
    return np.maximum(d, 0.0)


def kmeans_plus_plus(x: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    centroids = [x[rng.integers(len(x))]]
    closest = _sq_dists(x, centroids[0][None])[:, 0]
    for _ in range(1, k):
        total = closest.sum()
        if total <= 0:
            # fewer distinct points than k; take any point not yet chosen
            idx = rng.integers(len(x))
        else:
            idx = rng.choice(len(x), p=closest / total)
        centroids.append(x[idx])
        closest = np.minimum(closest, _sq_dists(x, x[idx][None])[:, 0])
    return np.array(centroids)


def _repair_empty(x, labels, centroids, d2):
    """Move each empty centroid to the farthest member of the largest cluster."""
    k = len(centroids)
    for j in range(k):
        counts = np.bincount(labels, minlength=k)
        if counts[j]:
            continue
        big = int(counts.argmax())
        members = np.flatnonzero(labels == big)
        far = members[d2[members, big].argmax()]
        centroids[j] = x[far]
        labels[far] = j
    return labels, centroids


def fit(descriptors: np.ndarray, k: int, seed: int = 0, max_iter: int = 100,
        tol: float = 1e-6) -> ClusterModel:
    """Lloyd iterations from k-means++ seeding.

    ``inertia_history[0]`` is the inertia of the seeding; one entry follows
    per Lloyd iteration.
    """
    x = np.asarray(descriptors, dtype=np.float64)
    if k < 2:
        raise SamplerError(f"k must be at least 2, got {k}")
    if len(x) < k:
        raise SamplerError(f"need at least k={k} sequences, got {len(x)}")
    rng = np.random.default_rng([seed, 3])
    centroids = kmeans_plus_plus(x, k, rng)
    d2 = _sq_dists(x, centroids)
    labels = d2.argmin(1)
    history = [float(d2[np.arange(len(x)), labels].sum())]
    for _ in range(max_iter):
        labels, centroids = _repair_empty(x, labels, centroids, d2)
        new = np.array([x[labels == j].mean(0) for j in range(k)])
        shift = float(np.sqrt(((new - centroids) ** 2).sum(1)).max())
        centroids = new
        d2 = _sq_dists(x, centroids)
        labels = d2.argmin(1)
        history.append(float(d2[np.arange(len(x)), labels].sum()))
        if shift < tol:
            break
    labels, centroids = _repair_empty(x, labels, centroids, d2)
    return ClusterModel(k, centroids, labels, history)


def fit_dataset(frames: np.ndarray, k: int = 10, seed: int = 0) -> ClusterModel:
    return fit(dataset_descriptors(frames), k, seed)


def sample_contrastive(driving_index: int, model: ClusterModel, rng: np.random.Generator) -> int:
    """Uniform draw among sequences outside the driving sequence's cluster."""
    own = model.assignments[driving_index]
    eligible = np.flatnonzero(model.assignments != own)
    if len(eligible) == 0:
        raise SamplerError("every sequence is in one cluster; lower k or enlarge the dataset")
    return int(eligible[rng.integers(len(eligible))])


def sample_contrastive_batch(driving: np.ndarray, model: ClusterModel,
                             rng: np.random.Generator) -> np.ndarray:
    return np.array([sample_contrastive(int(i), model, rng) for i in driving])
