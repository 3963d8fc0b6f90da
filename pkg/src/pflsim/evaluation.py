"""Evaluation battery over per-client metrics and round traces."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Mapping, NamedTuple, Optional, Sequence

import numpy as np

from . import models
from ._rng import rng_for
from .datamodel import ClientDataset, ClientRecord, ModelParams, PerClientMetrics, RoundTrace

ID_OOD_EPOCHS = (1, 3, 5, 10, 15)
SUMMARY_FIELDS = ("mean", "std_across_clients", "pct_hurt", "n_clients")


@dataclass(frozen=True)
class SummaryStats:
    mean: float
    std_across_clients: float   # population std
    pct_hurt: Optional[float]   # None when no before/after pairs exist
    n_clients: int
    pct_helped: Optional[float] = None
    pct_unchanged: Optional[float] = None

    def to_dict(self) -> dict:
        return dict(self.__dict__)


def _worse(before: float, after: float, kind: str) -> bool:
    return after < before if kind == "accuracy" else after > before


def _better(before: float, after: float, kind: str) -> bool:
    return after > before if kind == "accuracy" else after < before


def hurt_breakdown(pcm: PerClientMetrics) -> Optional[tuple]:
    """(pct_hurt, pct_helped, pct_unchanged) over clients with both metrics, or None.

    Strict comparisons: a client whose metric did not move counts as unchanged.
    """
    pairs = [(r.metric_before, r.metric_after) for r in pcm.records if r.metric_before is not None]
    if not pairs:
        return None
    n = len(pairs)
    hurt = sum(1 for b, a in pairs if _worse(b, a, pcm.metric_kind))
    helped = sum(1 for b, a in pairs if _better(b, a, pcm.metric_kind))
    pct_hurt = 100.0 * hurt / n
    pct_helped = 100.0 * helped / n
    return pct_hurt, pct_helped, 100.0 - (pct_hurt + pct_helped)


def summarize(pcm: PerClientMetrics) -> SummaryStats:
    if not pcm.records:
        raise ValueError("cannot summarize an empty set of client records")
    after = np.array(sorted(r.metric_after for r in pcm.records), dtype=np.float64)
    hb = hurt_breakdown(pcm)
    hurt, helped, same = hb if hb is not None else (None, None, None)
    return SummaryStats(float(np.mean(after)), float(np.std(after)), hurt, len(after), helped, same)


def multi_run_summary(runs: Sequence[SummaryStats]) -> dict:
    """field -> {"mean", "std"} over runs (population std); pct_hurt only if every run has it."""
    if len(runs) < 2:
        raise ValueError("a multi-run summary needs at least 2 runs")
    out = {}
    for name in SUMMARY_FIELDS + ("pct_helped", "pct_unchanged"):
        vals = [getattr(r, name) for r in runs]
        if any(v is None for v in vals):
            continue
        arr = np.asarray(vals, dtype=np.float64)
        # centering on the first run keeps the std exactly 0 for identical runs
        out[name] = {"mean": float(np.mean(arr)), "std": float(np.std(arr - arr[0]))}
    return out


def format_multi_run(summary: Mapping[str, Mapping[str, float]], digits: int = 4) -> str:
    """One-line "mean ± run-std" rendering of the per-client mean, client std and pct_hurt."""
    parts = []
    for name in ("mean", "std_across_clients", "pct_hurt"):
        if name in summary:
            s = summary[name]
            parts.append(f"{name}={s['mean']:.{digits}f}±{s['std']:.{digits}f}")
    return "  ".join(parts)


# --- personalizer-driven evaluation ------------------------------------------------------

def _score(predictor: Callable, X: np.ndarray, y: np.ndarray, kind: str) -> float:
    return models.metric_from_output(predictor(X), y, kind)


def evaluate_personalizer(personalizer, clients: Sequence[ClientDataset], kind: str,
                          personal_tag: str = "personalization", eval_tag: str = "evaluation",
                          baseline: Optional[ModelParams] = None) -> PerClientMetrics:
    """Fit ``personalizer`` on each client's ``personal_tag`` set and score on ``eval_tag``.

    With ``baseline``, metric_before is that model's metric on the same evaluation set.
    """
    records = []
    for c in sorted(clients, key=lambda c: c.client_id):
        Xp, yp = c.subset(personal_tag)
        Xe, ye = c.subset(eval_tag)
        if len(ye) == 0:
            raise ValueError(f"client {c.client_id!r} has an empty {eval_tag} set")
        after = _score(personalizer.fit(c.client_id, Xp, yp), Xe, ye, kind)
        before = None if baseline is None else models.metric(baseline, (Xe, ye))
        records.append(ClientRecord(c.client_id, before, after, len(yp), len(ye)))
    return PerClientMetrics(tuple(records), kind)


class CurvePoint(NamedTuple):
    epochs: int
    id_metric: float
    ood_metric: float


def id_ood_curve(global_params: ModelParams, clients: Sequence[ClientDataset], ood_set: tuple, personalizer,
                 epoch_grid: Sequence[int] = ID_OOD_EPOCHS, personal_tag: str = "personalization",
                 eval_tag: str = "evaluation") -> list:
    """Mean in-distribution and out-of-distribution metric after each epoch budget.

    ``personalizer`` must offer ``with_epochs(e)`` returning a personalizer that
    adapts for ``e`` epochs (see :class:`pflsim.personalize.FineTuner`).
    ``global_params`` fixes the metric kind and is what epoch 0 evaluates.
    """
    grid = list(epoch_grid)
    if not grid:
        raise ValueError("epoch grid is empty")
    if any(int(e) != e or e < 0 for e in grid):
        raise ValueError("epoch grid entries must be nonnegative integers")
    kind = global_params.arch.metric_kind
    Xo, yo = ood_set
    if len(yo) == 0:
        raise ValueError("OOD set is empty")
    ordered = sorted(clients, key=lambda c: c.client_id)
    out = []
    for e in grid:
        p = personalizer.with_epochs(int(e))
        ids, oods = [], []
        for c in ordered:
            predictor = p.fit(c.client_id, *c.subset(personal_tag))
            ids.append(_score(predictor, *c.subset(eval_tag), kind))
            oods.append(_score(predictor, Xo, yo, kind))
        out.append(CurvePoint(int(e), float(np.mean(ids)), float(np.mean(oods))))
    return out


class CommPoint(NamedTuple):
    step: int          # position in the trace list, 1-based
    phase: str
    round: int
    broadcast: int     # cumulative
    uploaded: int      # cumulative
    total: int         # cumulative broadcast + uploaded


def communication_report(traces: Sequence[RoundTrace]) -> list:
    """Cumulative scalars communicated, warm-start phases included, in trace order."""
    out, b, u = [], 0, 0
    for i, t in enumerate(traces, start=1):
        b += int(t.params_broadcast)
        u += int(t.params_uploaded)
        out.append(CommPoint(i, t.phase, t.round, b, u, b + u))
    return out


@dataclass
class SweepResult:
    means: dict       # fraction -> mean metric over clients that kept a nonempty set
    skipped: dict     # fraction -> number of clients skipped


def _nested_subsets(c: ClientDataset, personal_tag: str, fractions: Sequence[float], seed: int) -> dict:
    idx = c.indices(personal_tag)
    perm = rng_for(seed, c.client_id, "sweep").permutation(len(idx))
    out = {}
    for f in fractions:
        m = len(idx) if f == 1.0 else int(np.floor(f * len(idx) + 1e-9))
        # keep original order so that fraction 1.0 reproduces the unswept set exactly
        out[f] = np.sort(idx[perm[:m]])
    return out


def personalization_set_sweep(clients: Sequence[ClientDataset], personalizer, fractions: Sequence[float],
                              kind: str, seed: int = 0, personal_tag: str = "personalization",
                              eval_tag: str = "evaluation") -> SweepResult:
    """Shrink each personalization set to nested random prefixes; the evaluation set is untouched."""
    fractions = list(fractions)
    if not fractions:
        raise ValueError("no fractions given")
    for f in fractions:
        if not 0.0 < f <= 1.0:
            raise ValueError(f"fraction {f} outside (0, 1]")
    scores = {f: [] for f in fractions}
    skipped = {f: 0 for f in fractions}
    for c in sorted(clients, key=lambda c: c.client_id):
        Xe, ye = c.subset(eval_tag)
        for f, idx in _nested_subsets(c, personal_tag, fractions, seed).items():
            if len(idx) == 0:
                skipped[f] += 1
                continue
            predictor = personalizer.fit(c.client_id, c.X[idx], c.y[idx])
            scores[f].append(_score(predictor, Xe, ye, kind))
    means = {f: (float(np.mean(v)) if v else float("nan")) for f, v in scores.items()}
    return SweepResult(means, skipped)
