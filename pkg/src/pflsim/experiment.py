"""Config-driven experiments: build data, train, personalize, evaluate, write artifacts.

A config is one YAML file. Sections: ``regime``, ``seeds``, ``output_dir``,
``dataset`` (``synthetic`` or ``csv``), ``split``, ``model``, ``engine``,
``algorithm``, and the optional ``tuning`` grid and ``expected`` block used by
``--check``. Relative paths resolve against the config file's directory.
"""

from __future__ import annotations

import copy
import hashlib
import json
import logging
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional

import numpy as np
import yaml

from . import models
from ._rng import rng_for
from .data import SplitSpec, SynthSpec, generate_synthetic, load_csv_silo, split
from .datamodel import CLASSIFICATION, REGRESSION, ClientRecord, PerClientMetrics
from .engine import EngineConfig, global_evaluator, latest_checkpoint, run_fedavg
from .evaluation import (SummaryStats, communication_report, evaluate_personalizer, multi_run_summary,
                         summarize)
from .models import LINEAR_FAMILIES, REGRESSION_FAMILIES, ArchDescriptor
from .personalize import (ClusterSelector, DittoConfig, FineTuner, FinetuneConfig, HypClusterSpec, KnnPer,
                          KnnPerConfig, MochaConfig, ensemble_k_fedavg, finetune_eval, hypcluster_train,
                          mode_collapse_detected, largest_cluster_share, run_ditto, run_mocha,
                          select_best_epoch, train_assignments)
from .tuning import Grid, grid_search, tune_finetuning, write_table

log = logging.getLogger(__name__)

REPORT_SCHEMA = "pflsim.report"
REPORT_SCHEMA_VERSION = 1
ALGORITHMS = ("local", "fedavg_finetune", "hypcluster", "ensemble_fedavg", "knn_per", "ditto", "mocha")
STATEFUL = ("ditto", "mocha")
# algorithms that report a before/after pair per client
WITH_BASELINE = ("fedavg_finetune", "knn_per", "ditto")
TOP_LEVEL = ("name", "regime", "seeds", "output_dir", "dataset", "split", "model", "engine", "algorithm",
             "tuning", "expected")
ALGO_SECTIONS = ("finetune", "select_epoch", "hypcluster", "ensemble", "knn", "ditto", "mocha")


class ConfigError(ValueError):
    """Raised with the full list of violations when a config does not validate."""

    def __init__(self, violations):
        self.violations = list(violations)
        super().__init__("invalid config:\n  " + "\n  ".join(self.violations))


@dataclass
class AlgorithmConfig:
    name: str
    finetune: FinetuneConfig = field(default_factory=FinetuneConfig)
    select_epoch: bool = True
    hypcluster: HypClusterSpec = field(default_factory=HypClusterSpec)
    ensemble_k: int = 2
    knn: KnnPerConfig = field(default_factory=KnnPerConfig)
    ditto: DittoConfig = field(default_factory=DittoConfig)
    mocha: MochaConfig = field(default_factory=MochaConfig)


@dataclass
class ExperimentConfig:
    name: str
    regime: str
    seeds: list
    output_dir: Path
    synthetic: Optional[dict]
    csv: Optional[dict]
    split: dict
    model: dict
    engine: EngineConfig
    algorithm: AlgorithmConfig
    tuning: Optional[Grid]
    expected: dict
    raw: dict = field(repr=False)
    base_dir: Path = Path(".")


# --- parsing and validation ---------------------------------------------------------------

def _section(raw: dict, key: str, problems: list) -> dict:
    val = raw.get(key) or {}
    if not isinstance(val, dict):
        problems.append(f"{key}: expected a mapping, got {type(val).__name__}")
        return {}
    return dict(val)


def _build(cls, kwargs: dict, label: str, problems: list):
    try:
        return cls(**kwargs)
    except TypeError as exc:
        problems.append(f"{label}: {exc}")
    except ValueError as exc:
        problems.append(f"{label}: {exc}")
    return None


def _tuples(d: dict, keys) -> dict:
    return {k: (tuple(v) if k in keys and isinstance(v, list) else v) for k, v in d.items()}


def _synthetic_roles(spec: SynthSpec, split_spec: SplitSpec) -> int:
    n = spec.num_clients
    if split_spec.regime == "cross_silo":
        return n
    _, fv, ft = split_spec.client_fractions
    return n - int(round(fv * n)) - int(round(ft * n))


def parse_config(raw, base_dir=".", check_tuning: bool = True):
    """Return ``(ExperimentConfig or None, violations)``. Never reads data files."""
    problems = []
    if not isinstance(raw, dict):
        return None, [f"config must be a mapping, got {type(raw).__name__}"]
    base_dir = Path(base_dir)
    for key in raw:
        if key not in TOP_LEVEL:
            problems.append(f"unknown top-level key {key!r}")

    regime = raw.get("regime")
    if regime not in ("cross_device", "cross_silo"):
        problems.append(f"regime: must be cross_device or cross_silo, got {regime!r}")

    seeds = raw.get("seeds", [0])
    if not isinstance(seeds, list) or not seeds or not all(isinstance(s, int) and not isinstance(s, bool)
                                                            for s in seeds):
        problems.append("seeds: must be a nonempty list of integers")
        seeds = [0]
    elif len(set(seeds)) != len(seeds):
        problems.append("seeds: duplicate seeds")

    out_dir = raw.get("output_dir")
    if not isinstance(out_dir, str) or not out_dir:
        problems.append("output_dir: required path")
        out_dir = "."

    # dataset
    dsec = _section(raw, "dataset", problems)
    synthetic = csv_cfg = None
    synth_spec = None
    task_kind = None
    if ("synthetic" in dsec) == ("csv" in dsec):
        problems.append("dataset: give exactly one of 'synthetic' or 'csv'")
    elif "synthetic" in dsec:
        synthetic = dict(dsec["synthetic"] or {})
        if "seed" in synthetic:
            problems.append("dataset.synthetic.seed: the data seed comes from the run seed; remove it")
            synthetic.pop("seed")
        synth_spec = _build(SynthSpec, _tuples(synthetic, ("examples_per_client",)), "dataset.synthetic",
                            problems)
        task_kind = synth_spec.task_kind if synth_spec else None
    else:
        csv_cfg = dict(dsec["csv"] or {})
        for key in ("path", "client_col", "label_col"):
            if not csv_cfg.get(key):
                problems.append(f"dataset.csv.{key}: required")
        unknown = set(csv_cfg) - {"path", "client_col", "label_col", "feature_cols", "task_kind", "standardize"}
        if unknown:
            problems.append(f"dataset.csv: unknown keys {sorted(unknown)}")
        task_kind = csv_cfg.get("task_kind", CLASSIFICATION)
        if task_kind not in (CLASSIFICATION, REGRESSION):
            problems.append(f"dataset.csv.task_kind: unknown {task_kind!r}")
        if csv_cfg.get("path") and not (base_dir / csv_cfg["path"]).is_file():
            problems.append(f"dataset.csv.path: file not found: {base_dir / csv_cfg['path']}")

    # split
    split_raw = _section(raw, "split", problems)
    split_spec = None
    if regime in ("cross_device", "cross_silo"):
        if "regime" in split_raw or "seed" in split_raw:
            problems.append("split: regime and seed are set at the top level / by the run seed")
        else:
            split_spec = _build(SplitSpec, _tuples({"regime": regime, **split_raw},
                                                   ("client_fractions", "local_fractions")), "split", problems)

    # model
    model = _section(raw, "model", problems)
    family = model.get("family")
    unknown = set(model) - {"family", "hidden_dim", "l2_reg"}
    if unknown:
        problems.append(f"model: unknown keys {sorted(unknown)}")
    if family not in models.FAMILIES:
        problems.append(f"model.family: unknown {family!r}; choose from {list(models.FAMILIES)}")
    elif task_kind is not None and (family in REGRESSION_FAMILIES) != (task_kind == REGRESSION):
        problems.append(f"model.family: {family} does not fit a {task_kind} task")
    elif synth_spec is not None:
        ncls = synth_spec.num_classes if synth_spec.task_kind == CLASSIFICATION else 1
        _build(ArchDescriptor, {"family": family, "input_dim": synth_spec.feature_dim, "num_classes": ncls,
                                "hidden_dim": model.get("hidden_dim", 0), "l2_reg": model.get("l2_reg", 0.0)},
               "model", problems)

    # engine
    engine_raw = _section(raw, "engine", problems)
    if "seed" in engine_raw:
        problems.append("engine.seed: the engine seed comes from the run seed; remove it")
        engine_raw.pop("seed")
    engine = _build(EngineConfig, engine_raw, "engine", problems)
    if engine is not None and synth_spec is not None and split_spec is not None:
        pool = _synthetic_roles(synth_spec, split_spec)
        if engine.clients_per_round > pool:
            problems.append(f"engine.clients_per_round={engine.clients_per_round} exceeds the {pool} "
                            f"clients available for training")

    # algorithm
    asec = _section(raw, "algorithm", problems)
    name = asec.get("name")
    algo = None
    if name not in ALGORITHMS:
        problems.append(f"algorithm.name: unknown {name!r}; choose from {list(ALGORITHMS)}")
    else:
        unknown = set(asec) - {"name", *ALGO_SECTIONS}
        if unknown:
            problems.append(f"algorithm: unknown keys {sorted(unknown)}")
        if name in STATEFUL and regime != "cross_silo":
            problems.append(f"algorithm.name: {name} keeps per-client state across rounds; stateful algorithms "
                            f"need regime cross_silo (clients must be available every round)")
        if name == "mocha" and family is not None and family not in LINEAR_FAMILIES:
            problems.append(f"algorithm: mocha needs a linear model family, got {family}")
        ft = _build(FinetuneConfig, dict(asec.get("finetune") or {}), "algorithm.finetune", problems)
        hc = _build(HypClusterSpec, dict(asec.get("hypcluster") or {}), "algorithm.hypcluster", problems)
        kn = _build(KnnPerConfig, dict(asec.get("knn") or {}), "algorithm.knn", problems)
        dt = _build(DittoConfig, dict(asec.get("ditto") or {}), "algorithm.ditto", problems)
        mc = _build(MochaConfig, dict(asec.get("mocha") or {}), "algorithm.mocha", problems)
        ens = dict(asec.get("ensemble") or {})
        ek = ens.get("k", 2)
        if set(ens) - {"k"}:
            problems.append(f"algorithm.ensemble: unknown keys {sorted(set(ens) - {'k'})}")
        if not isinstance(ek, int) or ek < 1:
            problems.append("algorithm.ensemble.k: must be an integer >= 1")
        if None not in (ft, hc, kn, dt, mc):
            algo = AlgorithmConfig(name, ft, bool(asec.get("select_epoch", True)), hc, ek, kn, dt, mc)

    # tuning
    grid = None
    if raw.get("tuning") is not None:
        tsec = _section(raw, "tuning", problems)
        grid = _build(Grid, tsec, "tuning", problems)
        if grid is not None:
            if grid.selection_metric == "pct_hurt" and name not in WITH_BASELINE:
                problems.append(f"tuning.selection_metric: pct_hurt needs a before/after pair; {name} has none")
            if grid.selection_scope == "per_client" and name not in ("local", "fedavg_finetune"):
                problems.append("tuning.selection_scope: per_client applies to local and fedavg_finetune only")
            if grid.selection_scope == "per_client":
                bad = set(grid.axes) - {"algorithm.finetune.lr", "algorithm.finetune.max_epochs"}
                if bad:
                    problems.append(f"tuning.axes: per_client scope tunes algorithm.finetune.lr and "
                                    f"algorithm.finetune.max_epochs; got {sorted(bad)}")
            if check_tuning and not problems:
                for point in grid.points():
                    try:
                        sub = apply_overrides(raw, point)
                    except KeyError as exc:
                        problems.append(f"tuning.axes: {exc.args[0]}")
                        break
                    sub.pop("tuning")
                    _, sub_problems = parse_config(sub, base_dir, check_tuning=False)
                    problems.extend(f"tuning point {point}: {p}" for p in sub_problems)

    expected = raw.get("expected") or {}
    if not isinstance(expected, dict):
        problems.append("expected: must be a mapping")
        expected = {}
    for key, rule in expected.items():
        if not isinstance(rule, dict) or not (set(rule) in ({"value", "tol"}, {"min", "max"}, {"min"}, {"max"})):
            problems.append(f"expected.{key}: use {{value, tol}} or {{min, max}}")

    if problems:
        return None, problems
    cfg = ExperimentConfig(
        name=str(raw.get("name", "experiment")), regime=regime, seeds=list(seeds),
        output_dir=(base_dir / out_dir), synthetic=synthetic, csv=csv_cfg, split=split_raw, model=model,
        engine=engine, algorithm=algo, tuning=grid, expected=expected, raw=copy.deepcopy(raw), base_dir=base_dir)
    return cfg, []


def validate_config(raw, base_dir=".") -> list:
    """Every violation found in ``raw``; an empty list means the config is well formed."""
    return parse_config(raw, base_dir)[1]


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    try:
        raw = yaml.safe_load(path.read_text())
    except OSError as exc:
        raise ConfigError([f"cannot read {path}: {exc}"]) from None
    except yaml.YAMLError as exc:
        raise ConfigError([f"{path}: not valid YAML ({exc})"]) from None
    cfg, problems = parse_config(raw, path.parent)
    if problems:
        raise ConfigError(problems)
    return cfg


def apply_overrides(raw: dict, point: dict) -> dict:
    """Copy of ``raw`` with dotted keys set; every parent section must already exist."""
    out = copy.deepcopy(raw)
    for dotted, value in point.items():
        keys = dotted.split(".")
        node = out
        for k in keys[:-1]:
            if not isinstance(node.get(k), dict):
                if k in ALGO_SECTIONS and node is out.get("algorithm"):
                    node[k] = {}
                else:
                    raise KeyError(f"{dotted!r} does not name a config section")
            node = node[k]
        node[keys[-1]] = value
    return out


# --- one run ------------------------------------------------------------------------------

@dataclass
class RunOutcome:
    run_id: str
    seed: int
    metrics: PerClientMetrics
    summary: SummaryStats
    extra: dict
    communication: dict
    history: list
    tuning_table: Optional[list] = None
    tuning_best: Optional[dict] = None


def build_dataset(cfg: ExperimentConfig, seed: int):
    if cfg.synthetic is not None:
        spec = SynthSpec(**_tuples({**cfg.synthetic, "seed": seed}, ("examples_per_client",)))
        ds = generate_synthetic(spec)
    else:
        c = cfg.csv
        ds = load_csv_silo(cfg.base_dir / c["path"], c["client_col"], c["label_col"], c.get("feature_cols"),
                           c.get("task_kind", CLASSIFICATION), c.get("standardize", True))
    split_spec = SplitSpec(**_tuples({"regime": cfg.regime, **cfg.split, "seed": seed},
                                     ("client_fractions", "local_fractions")))
    return split(ds, split_spec)


def build_arch(cfg: ExperimentConfig, ds) -> ArchDescriptor:
    return ArchDescriptor(cfg.model["family"], ds.feature_dim, ds.num_classes, cfg.model.get("hidden_dim", 0),
                          cfg.model.get("l2_reg", 0.0))


def eval_view(ds, stage: str) -> tuple:
    """(clients, personal_tag, eval_tag) for the validation ("valid") or test ("test") stage."""
    if ds.is_cross_silo:
        return sorted(ds.clients, key=lambda c: c.client_id), "train", stage
    return sorted(ds.by_role(stage), key=lambda c: c.client_id), "personalization", "evaluation"


def _choose_epochs(start, ds, ft: FinetuneConfig) -> int:
    clients, ptag, etag = eval_view(ds, "valid")
    curves = [finetune_eval(start, c, ft, ptag, (etag,)).curve() for c in clients]
    return select_best_epoch(curves, start.arch.metric_kind)


def _fingerprint(cfg: ExperimentConfig, seed: int) -> str:
    raw = {k: v for k, v in cfg.raw.items() if k not in ("expected", "output_dir", "name")}
    blob = json.dumps({"config": raw, "seed": seed}, sort_keys=True, default=str)
    return hashlib.sha256(blob.encode()).hexdigest()


def _prepare_checkpoints(ckdir: Optional[Path], cfg: ExperimentConfig, seed: int) -> Optional[Path]:
    """Checkpoint to resume from, after checking that ``ckdir`` belongs to this config."""
    if ckdir is None:
        return None
    ckdir.mkdir(parents=True, exist_ok=True)
    stamp = ckdir / "fingerprint.txt"
    fp = _fingerprint(cfg, seed)
    if stamp.exists() and stamp.read_text().strip() != fp:
        raise RuntimeError(f"{ckdir} holds checkpoints of a different config; delete it to start over")
    stamp.write_text(fp + "\n")
    return latest_checkpoint(ckdir)


def _records_from_models(per_client: dict, clients, ptag, etag, kind, baseline=None) -> PerClientMetrics:
    recs = []
    for c in clients:
        Xe, ye = c.subset(etag)
        before = None if baseline is None else models.metric(baseline, (Xe, ye))
        recs.append(ClientRecord(c.client_id, before, models.metric(per_client[c.client_id], (Xe, ye)),
                                 c.count(ptag), len(ye)))
    return PerClientMetrics(tuple(recs), kind)


def run_single(cfg: ExperimentConfig, seed: int, workers: int = 1, stage: str = "test",
               checkpoint_dir: Optional[Path] = None) -> RunOutcome:
    """Train and evaluate one seed. ``stage="valid"`` scores validation data only."""
    ds = build_dataset(cfg, seed)
    arch = build_arch(cfg, ds)
    kind = arch.metric_kind
    engine = replace(cfg.engine, seed=seed)
    algo = cfg.algorithm
    ft = replace(algo.finetune, seed=seed)
    clients, ptag, etag = eval_view(ds, stage)
    if not clients:
        raise RuntimeError(f"no {stage} clients to evaluate")
    resume = _prepare_checkpoints(checkpoint_dir, cfg, seed) if engine.rounds_per_checkpoint else None
    ckdir = checkpoint_dir if engine.rounds_per_checkpoint else None
    evaluate = global_evaluator(ds, "valid", seed, engine.eval_clients_per_round) if engine.rounds_per_evaluation \
        else None
    extra, traces, history = {}, [], []

    def fedavg():
        res = run_fedavg(ds, arch, engine, evaluate=evaluate, checkpoint_dir=ckdir, resume_from=resume,
                         workers=workers)
        traces.extend(res.traces)
        history.extend(res.history)
        return res.params

    name = algo.name
    if name in ("local", "fedavg_finetune"):
        start = models.init_params(arch, seed) if name == "local" else fedavg()
        epochs = _choose_epochs(start, ds, ft) if algo.select_epoch else ft.max_epochs
        extra["finetune_epochs"] = epochs
        pcm = evaluate_personalizer(FineTuner(start, replace(ft, max_epochs=epochs)), clients, kind, ptag, etag,
                                    baseline=None if name == "local" else start)
    elif name == "knn_per":
        g = fedavg()
        pcm = evaluate_personalizer(KnnPer(g, algo.knn), clients, kind, ptag, etag, baseline=g)
    elif name == "hypcluster":
        st = hypcluster_train(ds, arch, engine, algo.hypcluster, workers, evaluate, ckdir, resume)
        traces.extend(st.traces)
        history.extend(st.history)
        assigned = train_assignments(st.models, ds)
        extra["largest_cluster_share"] = largest_cluster_share(assigned)
        extra["mode_collapse"] = int(mode_collapse_detected(st.traces))
        pcm = evaluate_personalizer(ClusterSelector(tuple(st.models)), clients, kind, ptag, etag)
    elif name == "ensemble_fedavg":
        ms, tr = ensemble_k_fedavg(ds, arch, engine, algo.ensemble_k, engine.total_rounds, workers=workers)
        traces.extend(tr)
        pcm = evaluate_personalizer(ClusterSelector(tuple(ms)), clients, kind, ptag, etag)
    elif name == "ditto":
        res = run_ditto(ds, arch, engine, algo.ditto, workers)
        traces.extend(res.traces)
        # clients never sampled have no personal model and fall back to the global one
        per = {c.client_id: res.state.personal_models.get(c.client_id, res.global_model) for c in clients}
        pcm = _records_from_models(per, clients, ptag, etag, kind, baseline=res.global_model)
    elif name == "mocha":
        res = run_mocha(ds, arch, engine, algo.mocha)
        traces.extend(res.traces)
        pcm = _records_from_models(res.state.personal_models, clients, ptag, etag, kind)
    else:  # pragma: no cover - parse_config rejects unknown names
        raise ValueError(name)

    comm = communication_report(traces)
    last = comm[-1] if comm else None
    communication = {"broadcast": last.broadcast if last else 0, "uploaded": last.uploaded if last else 0,
                     "total": last.total if last else 0, "rounds": len(comm)}
    return RunOutcome(f"seed_{seed}", seed, pcm, summarize(pcm), extra, communication, history)


def _selection_metrics(out: RunOutcome) -> dict:
    s = out.summary
    key = "mean_accuracy" if out.metrics.metric_kind == "accuracy" else "mean_mse"
    m = {key: s.mean, "std_across_clients": s.std_across_clients}
    if s.pct_hurt is not None:
        m["pct_hurt"] = s.pct_hurt
    return m


def run_tuned(cfg: ExperimentConfig, seed: int, workers: int = 1, checkpoint_dir=None) -> RunOutcome:
    grid = cfg.tuning
    if grid is None:
        return run_single(cfg, seed, workers, "test", checkpoint_dir)
    if grid.selection_scope == "per_client":
        return _run_per_client(cfg, seed, workers, checkpoint_dir)

    def runner(point, _clients):
        sub, _ = parse_config(_without_tuning(apply_overrides(cfg.raw, point)), cfg.base_dir)
        return _selection_metrics(run_single(sub, seed, workers, "valid"))

    res = grid_search(grid, runner, "valid")
    best_cfg, _ = parse_config(_without_tuning(apply_overrides(cfg.raw, res.best)), cfg.base_dir)
    out = run_single(best_cfg, seed, workers, "test", checkpoint_dir)
    out.tuning_table, out.tuning_best = res.table, res.best
    return out


def _without_tuning(raw: dict) -> dict:
    return {k: v for k, v in raw.items() if k != "tuning"}


def _run_per_client(cfg: ExperimentConfig, seed: int, workers: int, checkpoint_dir) -> RunOutcome:
    """Each test client picks its own fine-tuning lr and epoch count on its own validation data.

    Cross-silo clients select on their valid split. Cross-device test clients
    have no local validation data, so their personalization set is halved: one
    half fine-tunes, the other selects, and the fitted model is scored on the
    evaluation set.
    """
    grid = cfg.tuning
    lrs = list(grid.axes.get("algorithm.finetune.lr", [cfg.algorithm.finetune.lr]))
    epochs = list(grid.axes.get("algorithm.finetune.max_epochs", [cfg.algorithm.finetune.max_epochs]))
    ds = build_dataset(cfg, seed)
    arch = build_arch(cfg, ds)
    engine = replace(cfg.engine, seed=seed)
    ft = replace(cfg.algorithm.finetune, seed=seed)
    traces = []
    if cfg.algorithm.name == "local":
        start = models.init_params(arch, seed)
    else:
        resume = _prepare_checkpoints(checkpoint_dir, cfg, seed) if engine.rounds_per_checkpoint else None
        res = run_fedavg(ds, arch, engine, checkpoint_dir=checkpoint_dir if engine.rounds_per_checkpoint else None,
                         resume_from=resume, workers=workers)
        start, traces = res.params, res.traces
    clients, ptag, etag = eval_view(ds, "test")
    if ds.is_cross_silo:
        tagged, tags = clients, {"personal_tag": "train", "valid_tag": "valid", "test_tag": "test"}
    else:
        tagged = [_halve_personalization(c, seed) for c in clients]
        tags = {"personal_tag": "fit", "valid_tag": "select", "test_tag": "evaluation"}
    choices = tune_finetuning(start, tagged, lrs, epochs, "per_client", ft, **tags)
    base = None if cfg.algorithm.name == "local" else start
    recs = []
    for c, ch in zip(clients, choices):
        Xe, ye = c.subset(etag)
        before = None if base is None else models.metric(base, (Xe, ye))
        recs.append(ClientRecord(c.client_id, before, ch.test_metric, c.count(ptag), len(ye)))
    pcm = PerClientMetrics(tuple(recs), arch.metric_kind)
    table = [{"client_id": ch.client_id, "algorithm.finetune.lr": ch.lr, "algorithm.finetune.max_epochs": ch.epochs,
              "valid_metric": ch.valid_metric, "test_metric": ch.test_metric} for ch in choices]
    comm = communication_report(traces)
    last = comm[-1] if comm else None
    communication = {"broadcast": last.broadcast if last else 0, "uploaded": last.uploaded if last else 0,
                     "total": last.total if last else 0, "rounds": len(comm)}
    return RunOutcome(f"seed_{seed}", seed, pcm, summarize(pcm), {}, communication, [], table, None)


def _halve_personalization(c, seed: int):
    idx = c.indices("personalization")
    if len(idx) < 2:
        raise RuntimeError(f"client {c.client_id!r} needs 2+ personalization examples for per-client tuning")
    perm = rng_for(seed, c.client_id, "per-client-select").permutation(len(idx))
    tags = list(c.split_tags)
    for j, p in enumerate(perm):
        tags[idx[p]] = "fit" if j < (len(idx) + 1) // 2 else "select"
    return c.with_tags(tags)


# --- whole experiment ---------------------------------------------------------------------

def _num(v):
    if v is None or (isinstance(v, (int, np.integer)) and not isinstance(v, bool)):
        return None if v is None else int(v)
    v = float(v)
    return None if np.isnan(v) else v


@dataclass
class ExperimentReport:
    path: Path
    report: dict
    runs: list


def run_experiment(cfg: ExperimentConfig, workers: int = 1, seed_offset: int = 0,
                   output_dir=None) -> ExperimentReport:
    out = Path(output_dir) if output_dir is not None else cfg.output_dir
    out.mkdir(parents=True, exist_ok=True)
    runs = []
    for s in cfg.seeds:
        seed = s + seed_offset
        log.info("run seed=%d algorithm=%s", seed, cfg.algorithm.name)
        runs.append(run_tuned(cfg, seed, workers, out / "checkpoints" / f"seed_{seed}"))

    multi = multi_run_summary([r.summary for r in runs]) if len(runs) >= 2 else None
    report = {
        "schema": REPORT_SCHEMA,
        "schema_version": REPORT_SCHEMA_VERSION,
        "name": cfg.name,
        "algorithm": cfg.algorithm.name,
        "regime": cfg.regime,
        "metric_kind": runs[0].metrics.metric_kind,
        "seed_offset": seed_offset,
        "config": cfg.raw,
        "runs": [{
            "run_id": r.run_id, "seed": r.seed,
            "summary": {k: _num(v) for k, v in r.summary.to_dict().items()},
            "extra": r.extra, "communication": r.communication, "tuning_best": r.tuning_best,
        } for r in runs],
        "summary": multi,
    }
    (out / "report.json").write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")
    per_client = {r.run_id: [rec.__dict__ for rec in r.metrics.records] for r in runs}
    (out / "per_client.json").write_text(json.dumps(per_client, indent=2, sort_keys=True) + "\n")
    write_table(_metric_rows(cfg, runs, multi), out / "metrics.csv")
    for r in runs:
        if r.tuning_table:
            write_table(r.tuning_table, out / "tuning" / f"{r.run_id}.csv")
    return ExperimentReport(out, report, runs)


def _metric_rows(cfg: ExperimentConfig, runs, multi) -> list:
    rows = []

    def add(run_id, seed, metric, value, rnd=""):
        value = _num(value)
        rows.append({"run_id": run_id, "seed": seed, "algorithm": cfg.algorithm.name, "metric": metric,
                     "value": "" if value is None else value, "round": rnd})

    for r in runs:
        for name, v in r.summary.to_dict().items():
            if v is not None:
                add(r.run_id, r.seed, name, v)
        for name, v in sorted(r.extra.items()):
            add(r.run_id, r.seed, name, v)
        for name, v in r.communication.items():
            add(r.run_id, r.seed, f"comm_{name}", v)
        for h in r.history:
            add(r.run_id, r.seed, h["metric"], h["value"], h["round"])
    for name, s in (multi or {}).items():
        add("all", "", f"{name}_run_mean", s["mean"])
        add("all", "", f"{name}_run_std", s["std"])
    return rows


def check_expected(cfg: ExperimentConfig, report: dict) -> list:
    """Failures of the ``expected`` rules against the across-run means (or the single run)."""
    failures = []
    for key, rule in cfg.expected.items():
        if report.get("summary"):
            entry = report["summary"].get(key)
            value = None if entry is None else entry["mean"]
        else:
            value = report["runs"][0]["summary"].get(key)
        if value is None:
            failures.append(f"{key}: not reported")
            continue
        if "value" in rule and abs(value - rule["value"]) > rule["tol"]:
            failures.append(f"{key}={value:.6g} outside {rule['value']} ± {rule['tol']}")
        if "min" in rule and value < rule["min"]:
            failures.append(f"{key}={value:.6g} below {rule['min']}")
        if "max" in rule and value > rule["max"]:
            failures.append(f"{key}={value:.6g} above {rule['max']}")
    return failures


def read_report(output_dir) -> dict:
    path = Path(output_dir) / "report.json"
    report = json.loads(path.read_text())
    if report.get("schema") != REPORT_SCHEMA:
        raise ValueError(f"{path} is not a run report")
    if report.get("schema_version") != REPORT_SCHEMA_VERSION:
        raise ValueError(f"{path} has schema version {report.get('schema_version')!r}; "
                         f"this version reads {REPORT_SCHEMA_VERSION}")
    return report


def render_report(report: dict) -> str:
    kind = report.get("metric_kind", "metric")
    lines = [f"{report['name']}  algorithm={report['algorithm']}  regime={report['regime']}  ({kind})"]
    for r in report["runs"]:
        s = r["summary"]
        hurt = "n/a" if s.get("pct_hurt") is None else f"{s['pct_hurt']:.1f}%"
        lines.append(f"  {r['run_id']:<12} mean={s['mean']:.4f}  client_std={s['std_across_clients']:.4f}  "
                     f"hurt={hurt}  clients={s['n_clients']}  comm={r['communication']['total']}")
    if report.get("summary"):
        m = report["summary"]
        parts = [f"{k}={m[k]['mean']:.4f}±{m[k]['std']:.4f}" for k in ("mean", "std_across_clients", "pct_hurt")
                 if k in m]
        lines.append("  across runs: " + "  ".join(parts))
    return "\n".join(lines)
