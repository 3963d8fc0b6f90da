"""Personalization algorithms and the personalizer objects used by the evaluation battery.

A personalizer turns a client's personalization examples into a predictor
(a function from features to probabilities or values).
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Callable, Sequence

import numpy as np

from .. import models
from ..datamodel import ModelParams
from ..engine import select_model
from .finetune import (FinetuneConfig, FinetuneResult, best_index, finetune, finetune_eval,
                       local_training_eval, select_best_epoch)
from .hypcluster import (HypClusterSpec, HypClusterState, ensemble_k_fedavg, first_cluster_share,
                         hypcluster_select, hypcluster_train, largest_cluster_share, mode_collapse_detected,
                         purity, train_assignments)
from .knn import KnnPerConfig, KnnStore, knn_per_eval, knn_per_output
from .mtl import (DittoConfig, MochaConfig, MtlResult, MtlState, ditto_round, mocha_round, omega_update,
                  run_ditto, run_mocha)

Predictor = Callable[[np.ndarray], np.ndarray]


@dataclass(frozen=True)
class GlobalModel:
    params: ModelParams

    def fit(self, client_id: str, X, y) -> Predictor:
        return lambda Z: models.predict_output(self.params, Z)


@dataclass(frozen=True)
class FineTuner:
    params: ModelParams
    cfg: FinetuneConfig

    def with_epochs(self, epochs: int) -> "FineTuner":
        return FineTuner(self.params, replace(self.cfg, max_epochs=epochs))

    def fit(self, client_id: str, X, y) -> Predictor:
        final = self.params
        for final in finetune(self.params, X, y, self.cfg, client_id):
            pass
        return lambda Z: models.predict_output(final, Z)


@dataclass(frozen=True)
class KnnPer:
    params: ModelParams
    cfg: KnnPerConfig

    def fit(self, client_id: str, X, y) -> Predictor:
        store = KnnStore(self.params, X, y)
        return lambda Z: knn_per_output(self.params, store, Z, self.cfg)


@dataclass(frozen=True)
class ClusterSelector:
    cluster_models: tuple

    def fit(self, client_id: str, X, y) -> Predictor:
        idx, _ = select_model(self.cluster_models, (X, y))
        chosen = self.cluster_models[idx]
        return lambda Z: models.predict_output(chosen, Z)


__all__ = [
    "FinetuneConfig", "FinetuneResult", "finetune", "finetune_eval", "local_training_eval", "select_best_epoch",
    "best_index", "HypClusterSpec", "HypClusterState", "hypcluster_train", "hypcluster_select",
    "ensemble_k_fedavg", "first_cluster_share", "mode_collapse_detected", "purity", "largest_cluster_share",
    "train_assignments", "KnnPerConfig", "KnnStore", "knn_per_eval", "knn_per_output", "DittoConfig",
    "MochaConfig", "MtlState", "MtlResult", "ditto_round", "mocha_round", "omega_update", "run_ditto",
    "run_mocha", "GlobalModel", "FineTuner", "KnnPer", "ClusterSelector", "Predictor",
]
