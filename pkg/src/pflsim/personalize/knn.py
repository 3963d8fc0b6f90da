"""kNN-Per: interpolate a global model with a local nearest-neighbour model
built on the global model's representations."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .. import models
from ..datamodel import ClientDataset, ModelParams


@dataclass(frozen=True)
class KnnPerConfig:
    k_neighbors: int = 10
    coefficient: float = 0.5

    def __post_init__(self):
        if self.k_neighbors < 1:
            raise ValueError("k_neighbors must be >= 1")
        if not 0.0 <= self.coefficient <= 1.0:
            raise ValueError("coefficient must lie in [0, 1]")


class KnnStore:
    """Representations and labels of a client's personalization examples."""

    def __init__(self, global_params: ModelParams, X, y):
        X = np.asarray(X, dtype=np.float64)
        if len(X) == 0:
            raise ValueError("kNN store needs at least one example")
        self.params = global_params
        self.reps = np.atleast_2d(models.representation(global_params, X))
        self.y = np.asarray(y)

    def neighbors(self, X, k: int) -> np.ndarray:
        """Indices of the min(k, store size) nearest stored points per query row.

        Euclidean distance; equal distances keep store order.
        """
        q = np.atleast_2d(models.representation(self.params, np.atleast_2d(X)))
        m = min(k, len(self.y))
        out = np.empty((len(q), m), dtype=np.int64)
        for start in range(0, len(q), 64):
            chunk = q[start:start + 64]
            d2 = ((chunk[:, None, :] - self.reps[None, :, :]) ** 2).sum(axis=2)
            out[start:start + 64] = np.argsort(d2, axis=1, kind="stable")[:, :m]
        return out

    def knn_output(self, X, k: int) -> np.ndarray:
        """Neighbour label frequencies (classifiers) or neighbour label means (regressors)."""
        labels = self.y[self.neighbors(X, k)]
        arch = self.params.arch
        if arch.is_classifier:
            labels = labels.astype(np.int64)
            out = np.stack([(labels == c).sum(axis=1) for c in range(arch.num_classes)], axis=1)
            return out / labels.shape[1]
        return labels.astype(np.float64).mean(axis=1)


def knn_per_output(global_params: ModelParams, store: KnnStore, X, cfg: KnnPerConfig) -> np.ndarray:
    """coefficient * kNN + (1 - coefficient) * global, as probabilities or values."""
    g = models.predict_output(global_params, np.atleast_2d(X))
    knn = store.knn_output(X, cfg.k_neighbors)
    return cfg.coefficient * knn + (1.0 - cfg.coefficient) * g


def knn_per_eval(global_params: ModelParams, client: ClientDataset, cfg: KnnPerConfig,
                 personal_tag: str = "personalization", eval_tag: str = "evaluation") -> float:
    Xp, yp = client.subset(personal_tag)
    if len(yp) == 0:
        raise ValueError(f"client {client.client_id!r} has an empty {personal_tag} set")
    Xe, ye = client.subset(eval_tag)
    store = KnnStore(global_params, Xp, yp)
    out = knn_per_output(global_params, store, Xe, cfg)
    return models.metric_from_output(out, ye, global_params.arch.metric_kind)
