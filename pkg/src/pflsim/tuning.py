"""Grid sweeps with deterministic selection, and global vs per-client fine-tuning selection."""

from __future__ import annotations

import csv
import itertools
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Mapping, Optional, Sequence

import numpy as np

from . import models
from .datamodel import ClientDataset, ModelParams
from .personalize.finetune import FinetuneConfig, finetune

SELECTION_METRICS = ("mean_accuracy", "mean_mse", "pct_hurt")
SELECTION_SCOPES = ("global", "per_client")
# axes that only change how a client adapts a fixed model
FINETUNE_AXES = frozenset({
    "lr", "epochs", "scope",
    "algorithm.finetune.lr", "algorithm.finetune.max_epochs", "algorithm.finetune.scope",
})


@dataclass(frozen=True)
class Grid:
    axes: Mapping[str, Sequence]   # declared order is the tie-breaking order
    selection_metric: str = "mean_accuracy"
    selection_scope: str = "global"

    def __post_init__(self):
        object.__setattr__(self, "axes", {k: tuple(v) for k, v in dict(self.axes).items()})
        if not self.axes:
            raise ValueError("grid has no axes")
        for name, values in self.axes.items():
            if not values:
                raise ValueError(f"grid axis {name!r} is empty")
        if self.selection_metric not in SELECTION_METRICS:
            raise ValueError(f"unknown selection metric {self.selection_metric!r}")
        if self.selection_scope not in SELECTION_SCOPES:
            raise ValueError(f"unknown selection scope {self.selection_scope!r}")
        if self.selection_scope == "per_client":
            bad = [a for a in self.axes if a not in FINETUNE_AXES]
            if bad:
                raise ValueError(f"per_client scope only tunes fine-tuning axes; got {bad}")

    def points(self) -> list:
        names = list(self.axes)
        return [dict(zip(names, combo)) for combo in itertools.product(*self.axes.values())]

    @property
    def maximize(self) -> bool:
        return self.selection_metric == "mean_accuracy"


def argbest(values: Sequence[float], maximize: bool) -> int:
    """First index attaining the best value."""
    best = 0
    for i, v in enumerate(values):
        if (v > values[best]) if maximize else (v < values[best]):
            best = i
    return best


@dataclass
class GridResult:
    best: dict
    best_index: int
    table: list = field(repr=False)   # one dict per point: axis values then metrics

    def write_csv(self, path) -> None:
        write_table(self.table, path)


def write_table(rows: Sequence[Mapping], path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    cols = []
    for r in rows:
        cols.extend(k for k in r if k not in cols)
    with path.open("w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=cols, lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in r.items()})


def grid_search(grid: Grid, runner: Callable[[dict, Sequence], Mapping[str, float]], validation_clients,
                workers: int = 1, csv_path=None) -> GridResult:
    """Score every point with ``runner(point, validation_clients)`` and pick the best.

    ``runner`` returns a metric dict that includes ``grid.selection_metric``.
    Points run independently (on a thread pool when ``workers > 1``); the table
    keeps grid order and ties go to the earliest point.
    """
    points = grid.points()

    def job(point):
        return dict(runner(dict(point), validation_clients))

    if workers > 1 and len(points) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(job, points))
    else:
        results = [job(p) for p in points]
    table = []
    for p, r in zip(points, results):
        if grid.selection_metric not in r:
            raise KeyError(f"runner did not report {grid.selection_metric!r} for point {p}")
        table.append({**p, **r})
    i = argbest([row[grid.selection_metric] for row in table], grid.maximize)
    res = GridResult(dict(points[i]), i, table)
    if csv_path is not None:
        res.write_csv(csv_path)
    return res


# --- fine-tuning hyperparameters ----------------------------------------------------------

@dataclass
class FinetuneTable:
    """Validation and test metric for every (lr, epochs) pair of one client."""

    client_id: str
    lrs: tuple
    epochs: tuple
    valid: np.ndarray   # (len(lrs), len(epochs))
    test: np.ndarray


def finetune_table(global_params: ModelParams, client: ClientDataset, lrs: Sequence[float],
                   epochs: Sequence[int], base: FinetuneConfig = FinetuneConfig(), personal_tag: str = "train",
                   valid_tag: str = "valid", test_tag: str = "test") -> FinetuneTable:
    """One fine-tuning trajectory per lr, read off at every epoch count in ``epochs``."""
    if not lrs or not epochs:
        raise ValueError("fine-tuning grid is empty")
    Xp, yp = client.subset(personal_tag)
    if len(yp) == 0:
        raise ValueError(f"client {client.client_id!r} has an empty {personal_tag} set")
    valid = client.subset(valid_tag)
    if len(valid[1]) == 0:
        raise ValueError(f"client {client.client_id!r} has an empty {valid_tag} set")
    test = client.subset(test_tag)
    want = sorted(set(int(e) for e in epochs))
    V = np.empty((len(lrs), len(epochs)))
    T = np.full((len(lrs), len(epochs)), np.nan)
    for i, lr in enumerate(lrs):
        cfg = FinetuneConfig(lr=lr, max_epochs=want[-1], scope=base.scope, batch_size=base.batch_size,
                             seed=base.seed)
        at = {0: global_params}
        for e, p in enumerate(finetune(global_params, Xp, yp, cfg, client.client_id), start=1):
            if e in want:
                at[e] = p
        for j, e in enumerate(epochs):
            V[i, j] = models.metric(at[int(e)], valid)
            if len(test[1]):
                T[i, j] = models.metric(at[int(e)], test)
    return FinetuneTable(client.client_id, tuple(lrs), tuple(int(e) for e in epochs), V, T)


@dataclass
class FinetuneChoice:
    client_id: str
    lr: float
    epochs: int
    valid_metric: float
    test_metric: float


def _pick(values: np.ndarray, maximize: bool) -> tuple:
    # row-major flattening walks lrs first, then epochs: declared axis order
    i = argbest(list(values.ravel()), maximize)
    return np.unravel_index(i, values.shape)


def per_client_tune(table: FinetuneTable, kind: str = "accuracy") -> FinetuneChoice:
    """The client's own best (lr, epochs) on its validation metric."""
    i, j = _pick(table.valid, kind == "accuracy")
    return FinetuneChoice(table.client_id, table.lrs[i], table.epochs[j], float(table.valid[i, j]),
                          float(table.test[i, j]))


def global_tune(tables: Sequence[FinetuneTable], kind: str = "accuracy") -> list:
    """One (lr, epochs) for everyone, chosen on the across-client mean validation metric."""
    if not tables:
        raise ValueError("no clients to tune on")
    mean_valid = np.mean([t.valid for t in tables], axis=0)
    i, j = _pick(mean_valid, kind == "accuracy")
    return [FinetuneChoice(t.client_id, t.lrs[i], t.epochs[j], float(t.valid[i, j]), float(t.test[i, j]))
            for t in tables]


def tune_finetuning(global_params: ModelParams, clients: Sequence[ClientDataset], lrs: Sequence[float],
                    epochs: Sequence[int], scope: str = "global", base: FinetuneConfig = FinetuneConfig(),
                    **tags) -> list:
    """Per-client choices under ``scope`` ("global" or "per_client"), sorted by client id."""
    if scope not in SELECTION_SCOPES:
        raise ValueError(f"unknown selection scope {scope!r}")
    kind = global_params.arch.metric_kind
    tables = [finetune_table(global_params, c, lrs, epochs, base, **tags)
              for c in sorted(clients, key=lambda c: c.client_id)]
    if scope == "global":
        return global_tune(tables, kind)
    return [per_client_tune(t, kind) for t in tables]
