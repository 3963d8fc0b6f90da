"""FedAvg + fine-tuning and local training."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping, Optional, Sequence

import numpy as np

from .. import models
from .._rng import rng_for
from ..datamodel import ClientDataset, ModelParams
from ..engine import local_sgd
from ..models import ArchDescriptor

SCOPES = ("all_layers", "last_layer")


@dataclass(frozen=True)
class FinetuneConfig:
    lr: float = 0.01
    max_epochs: int = 10
    scope: str = "all_layers"
    batch_size: Optional[int] = 20
    seed: int = 0

    def __post_init__(self):
        if not self.lr > 0:
            raise ValueError("fine-tuning lr must be positive")
        if self.max_epochs < 0:
            raise ValueError("max_epochs must be >= 0")
        if self.scope not in SCOPES:
            raise ValueError(f"unknown fine-tuning scope {self.scope!r}")
        if self.batch_size is not None and self.batch_size < 1:
            raise ValueError("batch_size must be positive")


@dataclass
class FinetuneResult:
    client_id: str
    metrics: dict                 # eval-set name -> metric after each epoch (index 0 = untouched model)
    params: list = field(repr=False)
    n_personalization: int = 0
    n_evaluation: int = 0
    primary: str = "evaluation"

    @property
    def metric_before(self) -> float:
        return self.metrics[self.primary][0]

    @property
    def metric_after(self) -> float:
        return self.metrics[self.primary][-1]

    def curve(self, name: Optional[str] = None) -> list:
        return self.metrics[name or self.primary]


def _mask(arch: ArchDescriptor, scope: str) -> Optional[np.ndarray]:
    return models.last_layer_mask(arch) if scope == "last_layer" else None


def finetune(start: ModelParams, X, y, cfg: FinetuneConfig, client_id: str, epochs: Optional[int] = None):
    """Yield the model after every epoch of fine-tuning on (X, y)."""
    rng = rng_for(cfg.seed, client_id, "finetune")
    mask = _mask(start.arch, cfg.scope)
    current = start
    for _ in range(cfg.max_epochs if epochs is None else epochs):
        current = local_sgd(current, X, y, 1, cfg.batch_size, cfg.lr, rng, mask=mask)
        yield current


def finetune_eval(global_params: ModelParams, client: ClientDataset, cfg: FinetuneConfig,
                  personal_tag: str = "personalization", eval_tags: Sequence[str] = ("evaluation",),
                  extra_eval: Optional[Mapping[str, tuple]] = None, keep_params: bool = False) -> FinetuneResult:
    """Fine-tune on the personalization set, scoring every epoch on the evaluation set(s).

    Entry 0 of each curve is the unmodified global model. ``extra_eval`` adds
    named (X, y) sets scored alongside the client's own tagged sets.
    """
    if client.split_tags is None:
        raise ValueError(f"client {client.client_id!r} carries no split tags")
    Xp, yp = client.subset(personal_tag)
    if len(yp) == 0:
        raise ValueError(f"client {client.client_id!r} has an empty {personal_tag} set")
    sets = {}
    for tag in eval_tags:
        Xe, ye = client.subset(tag)
        if len(ye) == 0:
            raise ValueError(f"client {client.client_id!r} has an empty {tag} set")
        sets[tag] = (Xe, ye)
    sets.update(extra_eval or {})

    def score(p):
        for name, s in sets.items():
            metrics[name].append(models.metric(p, s))

    metrics = {name: [] for name in sets}
    kept = [global_params] if keep_params else []
    score(global_params)
    for p in finetune(global_params, Xp, yp, cfg, client.client_id):
        score(p)
        if keep_params:
            kept.append(p)
    return FinetuneResult(client.client_id, metrics, kept, len(yp), len(sets[eval_tags[0]][1]), eval_tags[0])


def local_training_eval(client: ClientDataset, cfg: FinetuneConfig, arch: ArchDescriptor, seed: int = 0,
                        **kw) -> FinetuneResult:
    """Fine-tuning from a freshly initialized model: training without federation."""
    return finetune_eval(models.init_params(arch, seed), client, cfg, **kw)


def select_best_epoch(per_client: Sequence[Sequence[float]], kind: str = "accuracy") -> int:
    """Epoch whose across-client mean is best (max accuracy / min mse); ties go to the earliest."""
    if not per_client:
        raise ValueError("no validation curves to select from")
    lengths = {len(c) for c in per_client}
    if len(lengths) != 1 or 0 in lengths:
        raise ValueError("validation curves must be nonempty and of equal length")
    means = np.mean(np.asarray(per_client, dtype=np.float64), axis=0)
    return best_index(means, kind)


def best_index(values: Sequence[float], kind: str = "accuracy") -> int:
    best = 0
    for i, v in enumerate(values):
        better = v > values[best] if kind == "accuracy" else v < values[best]
        if better:
            best = i
    return best
