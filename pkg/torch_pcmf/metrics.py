from dataclasses import dataclass

import numpy as np
import torch
from sklearn.cluster import KMeans
from sklearn.metrics import adjusted_rand_score

from torch_pcmf.errors import InputError
from torch_pcmf.utils import generator_seed


@dataclass(frozen=True)
class Partition:
    labels: np.ndarray

    def __post_init__(self):
        labels = np.asarray(self.labels)
        if labels.ndim != 1:
            raise InputError("Partition labels must be a vector")
        object.__setattr__(self, "labels", labels)

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def n_clusters(self) -> int:
        return len(np.unique(self.labels))


def _as_partition(p: Partition | np.ndarray | list) -> Partition:
    return p if isinstance(p, Partition) else Partition(np.asarray(p))


def kmeans(
    points: torch.Tensor | np.ndarray,
    kappa: int,
    rng: np.random.Generator,
    restarts: int = 10,
) -> Partition:
    """Lloyd's algorithm with k-means++ seeding, best of `restarts` runs."""
    if isinstance(points, torch.Tensor):
        points = points.detach().cpu().numpy()
    points = np.asarray(points, dtype=np.float64)
    if points.ndim == 1:
        points = points[:, None]
    if kappa < 1:
        raise InputError(f"kappa must be at least 1, got {kappa}")
    if kappa > points.shape[0]:
        raise InputError(f"Cannot form {kappa} clusters from {points.shape[0]} points")
    if not np.all(np.isfinite(points)):
        raise InputError("k-means needs finite coordinates")
    model = KMeans(
        n_clusters=kappa,
        init="k-means++",
        n_init=restarts,
        random_state=generator_seed(rng),
    )
    return Partition(model.fit_predict(points))


def adjusted_rand_index(
    p: Partition | np.ndarray | list, q: Partition | np.ndarray | list
) -> float:
    p, q = _as_partition(p), _as_partition(q)
    if len(p) != len(q):
        raise InputError(f"Partitions have different lengths: {len(p)} and {len(q)}")
    return float(adjusted_rand_score(p.labels, q.labels))


def selection_accuracy(
    selected: torch.Tensor | np.ndarray | list, truth: torch.Tensor | np.ndarray | list
) -> float:
    """Fraction of genes whose selection matches the truth."""
    selected = np.asarray(selected, dtype=bool)
    truth = np.asarray(truth, dtype=bool)
    if selected.shape != truth.shape:
        raise InputError(
            f"Selection has {selected.size} entries, the truth has {truth.size}"
        )
    return float(np.mean(selected == truth))
