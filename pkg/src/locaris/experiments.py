"""Experiment harness: config-driven protocols that write result tables.

Every run produces the same artifact set in its output directory:

  manifest.json   resolved config echo + code/vocab versions (re-runnable)
  results.csv     one row per condition per seed, plus seed-mean rows
  report.json     full per-condition EvalReports keyed by row label
  checkpoints/    weights for runs that train

results.csv shares one column schema across all experiment kinds (unused
fields stay empty) and is byte-deterministic: wall-clock measurements such
as throughput never enter it. Throughput lives in report.json and, for
quantize sweeps, in the separate quantize_table.csv.
"""

from __future__ import annotations

import csv
import json
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import __version__
from .baselines import (
    FeatureSchema, MlpConfig, knn_fit, knn_predict_batch, mlp_fit, mlp_predict_batch,
)
from .errors import ConfigError, DataError, NumericError, UnknownPreset
from .evaluation import (
    EvalReport, build_report, distance_errors, evaluate_model, measure_throughput,
)
from .model import (
    LoraConfig, Model, ModelConfig, attach_lora, init_model, load_weights,
    quantize_backbone, save_weights,
)
from .simulator import EnvironmentSpec, gen_dataset, preset, simulate_to_files
from .telemetry import (
    NO_ABLATION, AblationSpec, DatasetSplit, MODALITIES, ap_drop_schedule,
    apply_ablation, load_split,
)
from .tokenizer import VOCAB_VERSION, Vocab, build_vocab
from .training import TrainConfig, condition_seeds, few_shot_subset, train

KINDS = (
    "train", "adapt", "evaluate", "fewshot_sweep", "telemetry_ablation",
    "ap_ablation", "quantize_sweep", "simulate",
)

RESULT_COLUMNS = (
    "kind", "method", "environment", "condition", "fraction", "seed",
    "n_train", "n_test", "mae_m", "rmse_m", "p50_m", "p75_m", "p95_m",
    "p99_m", "memory_bytes", "trainable_params", "total_params",
)

QUANTIZE_COLUMNS = (
    "environment", "bits", "mae_m", "rmse_m", "p95_m", "throughput_sps",
    "memory_bytes",
)

MEAN_SEED = "mean"
_METRIC_KEYS = ("mae_m", "rmse_m", "p50_m", "p75_m", "p95_m", "p99_m")


@dataclass
class ExperimentConfig:
    """One experiment, one JSON document; doubles as the run manifest."""

    kind: str
    output_dir: str
    environments: tuple[str, ...] = ()
    custom_environments: tuple[dict, ...] = ()  # simulate only
    dataset: Optional[dict] = None  # {"train": path, "test": path}
    target: Optional[str] = None
    data_seed: int = 0
    seeds: tuple[int, ...] = (0,)
    fractions: tuple[float, ...] = ()
    modalities: tuple[str, ...] = MODALITIES
    drop_k: tuple[int, ...] = (1, 2)
    bits: tuple[int, ...] = (32, 8, 4)
    baselines: tuple[str, ...] = ()
    knn_k: int = 3
    model: dict = field(default_factory=dict)
    lora: dict = field(default_factory=dict)
    train: dict = field(default_factory=dict)
    adapt: dict = field(default_factory=dict)
    mlp: dict = field(default_factory=dict)
    backbone_checkpoint: Optional[str] = None
    checkpoint: Optional[str] = None
    throughput: bool = False
    jobs: int = 1

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ConfigError(f"unknown experiment kind {self.kind!r}")
        if not self.seeds:
            raise ConfigError("seeds must be non-empty")
        for f in self.fractions:
            if not (0.0 < f <= 1.0):
                raise ConfigError(f"fraction must lie in (0, 1], got {f}")
        for m in self.modalities:
            if m not in MODALITIES:
                raise ConfigError(f"unknown modality {m!r}")
        for k in self.drop_k:
            if k not in (1, 2):
                raise ConfigError(f"drop_k entries must be 1 or 2, got {k}")
        for b in self.bits:
            if b not in (32, 8, 4):
                raise ConfigError(f"bits entries must be 32, 8, or 4, got {b}")
        for b in self.baselines:
            if b not in ("knn", "mlp"):
                raise ConfigError(f"unknown baseline {b!r}")
        for name, d in (("train", self.train), ("adapt", self.adapt)):
            if "mode" in d:
                raise ConfigError(f"{name}.mode is set by the experiment kind")
            if "seed" in d:
                raise ConfigError(f"{name}.seed is driven by the seeds list")
        if self.jobs < 1:
            raise ConfigError("jobs must be >= 1")
        self._validate_kind()

    def _validate_kind(self):
        kind = self.kind
        if kind == "adapt" and not self.backbone_checkpoint:
            raise ConfigError("adapt needs a backbone_checkpoint")
        if kind == "evaluate" and not self.checkpoint:
            raise ConfigError("evaluate needs a checkpoint")
        if kind == "fewshot_sweep":
            if len(self.environments) != 3:
                raise ConfigError("fewshot_sweep needs exactly 3 environments")
            if self.target not in self.environments:
                raise ConfigError("fewshot_sweep target must be one of environments")
            if not self.fractions:
                raise ConfigError("fewshot_sweep needs a fractions list")
        if kind == "quantize_sweep":
            n_envs = len(self.environments) + (1 if self.dataset else 0)
            if n_envs != 1:
                raise ConfigError("quantize_sweep needs exactly one environment")
        if kind == "simulate" and not (self.environments or self.custom_environments):
            raise ConfigError("simulate needs environments or custom_environments")
        if kind in ("train", "telemetry_ablation", "ap_ablation"):
            if not self.environments and self.dataset is None:
                raise ConfigError(f"{kind} needs environments or a dataset")
        if self.baselines and kind in ("train", "adapt", "simulate", "quantize_sweep"):
            raise ConfigError(f"baselines are not supported for kind {kind!r}")

    def to_dict(self) -> dict:
        d = asdict(self)
        for key, value in d.items():
            if isinstance(value, tuple):
                d[key] = list(value)
        return d


def config_from_dict(raw: dict) -> ExperimentConfig:
    data = dict(raw)
    data.pop("_meta", None)
    known = set(ExperimentConfig.__dataclass_fields__)
    unknown = set(data) - known
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    for key in ("environments", "custom_environments", "seeds", "fractions",
                "modalities", "drop_k", "bits", "baselines"):
        if key in data:
            data[key] = tuple(data[key])
    try:
        return ExperimentConfig(**data)
    except TypeError as exc:
        raise ConfigError(str(exc)) from exc


def load_config(path) -> ExperimentConfig:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            raw = json.load(fh)
    except FileNotFoundError as exc:
        raise ConfigError(f"config file not found: {path}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config is not valid JSON: {exc}") from exc
    if not isinstance(raw, dict):
        raise ConfigError("config root must be a JSON object")
    return config_from_dict(raw)


# ---------------------------------------------------------------------------
# Config -> domain objects
# ---------------------------------------------------------------------------


def _model_config(cfg: ExperimentConfig, vocab: Vocab) -> ModelConfig:
    try:
        return ModelConfig(vocab_size=len(vocab), **cfg.model)
    except TypeError as exc:
        raise ConfigError(f"bad model config: {exc}") from exc


def _lora_config(cfg: ExperimentConfig) -> LoraConfig:
    try:
        return LoraConfig(**cfg.lora)
    except TypeError as exc:
        raise ConfigError(f"bad lora config: {exc}") from exc


def _train_config(d: dict, mode: str) -> TrainConfig:
    try:
        return TrainConfig(mode=mode, **d)
    except TypeError as exc:
        raise ConfigError(f"bad {mode} train config: {exc}") from exc


def _mlp_config(cfg: ExperimentConfig, seed: int) -> MlpConfig:
    d = dict(cfg.mlp)
    d.setdefault("seed", seed)
    try:
        return MlpConfig(**d)
    except TypeError as exc:
        raise ConfigError(f"bad mlp config: {exc}") from exc


def _build_envs(cfg: ExperimentConfig) -> dict[str, DatasetSplit]:
    envs: dict[str, DatasetSplit] = {}
    for name in cfg.environments:
        envs[name] = gen_dataset(preset(name), seed=cfg.data_seed)
    if cfg.dataset is not None:
        spec = dict(cfg.dataset)
        fmt = spec.pop("format", "ftm_rssi_csv")
        name = spec.pop("name", "dataset")
        try:
            train_path, test_path = spec.pop("train"), spec.pop("test")
        except KeyError as exc:
            raise ConfigError(f"dataset config needs {exc} path") from exc
        if spec:
            raise ConfigError(f"unknown dataset keys: {sorted(spec)}")
        envs[name] = load_split(train_path, test_path, fmt)
    if not envs:
        raise ConfigError("no environments configured")
    return envs


def _feature_schema(split: DatasetSplit, modality: str = "both") -> FeatureSchema:
    return FeatureSchema(ap_universe=tuple(sorted(split.ap_universe)), modality=modality)


# ---------------------------------------------------------------------------
# Rows and artifact writers
# ---------------------------------------------------------------------------


def _fmt(value) -> str:
    if value is None or value == "":
        return ""
    if isinstance(value, (bool, np.bool_)):
        return str(bool(value))
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    if isinstance(value, (float, np.floating)):
        return repr(float(value))
    return str(value)


def _row(kind: str, method: str, environment: str, condition: str, **cells) -> dict:
    row = {col: "" for col in RESULT_COLUMNS}
    row.update(kind=kind, method=method, environment=environment, condition=condition)
    for key, value in cells.items():
        if key not in row:
            raise KeyError(f"unknown results column {key!r}")
        row[key] = value
    return row


def _report_cells(report: EvalReport) -> dict:
    d = report.to_dict()
    cells = {key: d[key] for key in _METRIC_KEYS}
    cells["n_test"] = report.n_samples
    if report.weight_memory_bytes is not None:
        cells["memory_bytes"] = report.weight_memory_bytes
    counts = report.param_counts or {}
    if counts:
        cells["trainable_params"] = counts.get("trainable", "")
        cells["total_params"] = counts.get("total", "")
    return cells


def row_label(row: dict) -> str:
    return "|".join(
        str(row[k]) for k in ("method", "environment", "condition", "fraction", "seed")
    )


def _mean_rows(rows: Sequence[dict]) -> list[dict]:
    """One seed-mean row per (method, environment, condition, fraction) group."""
    groups: dict[tuple, list[dict]] = {}
    for row in rows:
        if row["seed"] == MEAN_SEED:
            continue
        key = (row["kind"], row["method"], row["environment"],
               row["condition"], row["fraction"])
        groups.setdefault(key, []).append(row)
    means = []
    for (kind, method, environment, condition, fraction), members in groups.items():
        if len(members) < 2:
            continue
        mean = _row(kind, method, environment, condition,
                    fraction=fraction, seed=MEAN_SEED)
        for col in _METRIC_KEYS:
            mean[col] = float(np.mean([m[col] for m in members]))
        for col in ("n_train", "n_test", "memory_bytes",
                    "trainable_params", "total_params"):
            values = {m[col] for m in members}
            if len(values) == 1:
                mean[col] = members[0][col]
        means.append(mean)
    return means


def write_results_csv(path, rows: Sequence[dict]) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(RESULT_COLUMNS)
        for row in rows:
            writer.writerow([_fmt(row[col]) for col in RESULT_COLUMNS])


def write_quantize_csv(path, rows: Sequence[dict]) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(QUANTIZE_COLUMNS)
        for row in rows:
            writer.writerow([_fmt(row.get(col, "")) for col in QUANTIZE_COLUMNS])


def render_artifacts(out_dir: Path, payload: dict) -> None:
    """Write results.csv (and quantize_table.csv) from a report payload."""
    write_results_csv(out_dir / "results.csv", payload["rows"])
    if payload.get("quantize_rows"):
        write_quantize_csv(out_dir / "quantize_table.csv", payload["quantize_rows"])


def _write_run(out_dir: Path, cfg: ExperimentConfig, rows: list[dict],
               reports: dict[str, dict], quantize_rows: Optional[list[dict]] = None,
               extras: Optional[dict] = None) -> None:
    manifest = cfg.to_dict()
    manifest["_meta"] = {"code_version": __version__, "vocab_version": VOCAB_VERSION}
    if extras:
        manifest["_meta"].update(extras)
    payload = {"kind": cfg.kind, "rows": rows, "reports": reports}
    if quantize_rows is not None:
        payload["quantize_rows"] = quantize_rows
    with open(out_dir / "manifest.json", "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
    with open(out_dir / "report.json", "w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")
    render_artifacts(out_dir, payload)


def _resolve_jobs(cfg: ExperimentConfig, override: Optional[int]) -> int:
    env = os.environ.get("LOCARIS_JOBS")
    if env is not None:
        try:
            jobs = int(env)
        except ValueError as exc:
            raise ConfigError(f"LOCARIS_JOBS must be an integer, got {env!r}") from exc
    elif override is not None:
        jobs = override
    else:
        jobs = cfg.jobs
    if jobs < 1:
        raise ConfigError("jobs must be >= 1")
    return jobs


def _map_tasks(worker, tasks: list[dict], jobs: int) -> list:
    """Run condition tasks, optionally in parallel; results keep task order."""
    if jobs <= 1 or len(tasks) <= 1:
        return [worker(t) for t in tasks]
    with ProcessPoolExecutor(max_workers=min(jobs, len(tasks))) as pool:
        return list(pool.map(worker, tasks))


def _named_numeric(label: str):
    """Re-raise numeric failures with the offending condition named."""
    class _Ctx:
        def __enter__(self):
            return self

        def __exit__(self, exc_type, exc, tb):
            if exc is not None and isinstance(exc, NumericError):
                raise type(exc)(f"condition {label}: {exc}") from exc
            return False

    return _Ctx()


# ---------------------------------------------------------------------------
# Condition workers (module level so process pools can pickle them)
# ---------------------------------------------------------------------------


def _adapt_worker(task: dict) -> dict:
    """One (fraction, seed) adaptation: attach fresh adapters, train, eval."""
    cfg = config_from_dict(task["config"])
    fraction, fi, seed = task["fraction"], task["fraction_index"], task["seed"]
    label = f"fraction={fraction} seed={seed}"
    with _named_numeric(label):
        vocab = build_vocab()
        envs = _build_envs(cfg)
        target = envs[task["target"]]
        mcfg = _model_config(cfg, vocab)
        backbone = init_model(mcfg, seed=0)
        load_weights(backbone, task["backbone"])

        attach_seed, train_seed = condition_seeds(seed, fi)
        shots = few_shot_subset(target.train, fraction, seed=train_seed)
        adapted = attach_lora(backbone, _lora_config(cfg), seed=attach_seed)
        run_cfg = replace(_train_config(cfg.adapt, "lora"), seed=train_seed)
        train(adapted, shots, NO_ABLATION, run_cfg, vocab)
        if task.get("ckpt_out"):
            save_weights(adapted, task["ckpt_out"], only_trainable=True)

        _, errors = evaluate_model(adapted, target.test, vocab)
        fingerprint = {"kind": cfg.kind, "method": "locaris",
                       "environment": task["target"], "fraction": fraction,
                       "seed": seed}
        reports = {"locaris": build_report(errors, model=adapted,
                                           fingerprint=fingerprint).to_dict()}

        schema = _feature_schema(target)
        if "knn" in task.get("baselines", ()):
            knn = knn_fit(shots, schema, k=min(cfg.knn_k, len(shots)))
            errs = distance_errors(knn_predict_batch(knn, target.test),
                                   [s.position for s in target.test])
            reports["knn"] = build_report(
                errs, fingerprint=dict(fingerprint, method="knn")).to_dict()
        if "mlp" in task.get("baselines", ()):
            mlp = mlp_fit(shots, schema, _mlp_config(cfg, seed=seed))
            errs = distance_errors(mlp_predict_batch(mlp, target.test),
                                   [s.position for s in target.test])
            reports["mlp"] = build_report(
                errs, fingerprint=dict(fingerprint, method="mlp")).to_dict()
        return {"n_shots": len(shots), "reports": reports}


def _ablation_worker(task: dict) -> dict:
    """One (environment, modality, seed) cell: train from scratch, eval."""
    cfg = config_from_dict(task["config"])
    name, modality, seed = task["environment"], task["modality"], task["seed"]
    with _named_numeric(f"env={name} modality={modality} seed={seed}"):
        vocab = build_vocab()
        split = _build_envs(cfg)[name]
        spec = AblationSpec(modality=modality)
        model = init_model(_model_config(cfg, vocab), seed=seed)
        run_cfg = replace(_train_config(cfg.train, "full"), seed=seed)
        train(model, split.train, spec, run_cfg, vocab)
        _, errors = evaluate_model(model, split.test, vocab, spec=spec)
        fingerprint = {"kind": cfg.kind, "method": "locaris", "environment": name,
                       "condition": f"modality={modality}", "seed": seed}
        report = build_report(errors, model=model, fingerprint=fingerprint)
        return {"n_train": len(split.train), "reports": {"locaris": report.to_dict()}}


def _drop_label(dropped: frozenset) -> str:
    if not dropped:
        return "drop=none"
    return "drop=" + "+".join(str(ap) for ap in sorted(dropped))


def _ap_worker(task: dict) -> dict:
    """One seed of the AP-dropout grid: train once, eval every drop set."""
    cfg = config_from_dict(task["config"])
    name, seed = task["environment"], task["seed"]
    with _named_numeric(f"env={name} seed={seed}"):
        vocab = build_vocab()
        split = _build_envs(cfg)[name]
        truth = [s.position for s in split.test]
        model = init_model(_model_config(cfg, vocab), seed=seed)
        run_cfg = replace(_train_config(cfg.train, "full"), seed=seed)
        train(model, split.train, NO_ABLATION, run_cfg, vocab)

        schema = _feature_schema(split)
        mlp = (mlp_fit(split.train, schema, _mlp_config(cfg, seed=seed))
               if "mlp" in cfg.baselines else None)
        knn = (knn_fit(split.train, schema, k=cfg.knn_k)
               if "knn" in cfg.baselines else None)

        drop_sets = [frozenset()]
        for k in cfg.drop_k:
            drop_sets.extend(ap_drop_schedule(split.ap_universe, k))
        out = []
        for dropped in drop_sets:
            spec = AblationSpec(dropped_aps=dropped)
            condition = _drop_label(dropped)
            fingerprint = {"kind": cfg.kind, "environment": name,
                           "condition": condition, "seed": seed}
            _, errors = evaluate_model(model, split.test, vocab, spec=spec)
            reports = {"locaris": build_report(
                errors, model=model,
                fingerprint=dict(fingerprint, method="locaris")).to_dict()}
            ablated = [apply_ablation(s, spec) for s in split.test]
            if mlp is not None:
                errs = distance_errors(mlp_predict_batch(mlp, ablated), truth)
                reports["mlp"] = build_report(
                    errs, fingerprint=dict(fingerprint, method="mlp")).to_dict()
            if knn is not None:
                errs = distance_errors(knn_predict_batch(knn, ablated), truth)
                reports["knn"] = build_report(
                    errs, fingerprint=dict(fingerprint, method="knn")).to_dict()
            out.append({"condition": condition, "n_drop": len(dropped),
                        "reports": reports})
        return {"n_train": len(split.train), "conditions": out}


# ---------------------------------------------------------------------------
# Kind runners
# ---------------------------------------------------------------------------


def _report_from_dict_cells(rdict: dict) -> dict:
    cells = {key: rdict[key] for key in _METRIC_KEYS}
    cells["n_test"] = rdict["n_samples"]
    if rdict.get("weight_memory_bytes") is not None:
        cells["memory_bytes"] = rdict["weight_memory_bytes"]
    counts = rdict.get("param_counts") or {}
    if counts:
        cells["trainable_params"] = counts.get("trainable", "")
        cells["total_params"] = counts.get("total", "")
    return cells


def _run_train(cfg: ExperimentConfig, out: Path, jobs: int):
    vocab = build_vocab()
    envs = _build_envs(cfg)
    mcfg = _model_config(cfg, vocab)
    pooled = [s for split in envs.values() for s in split.train]
    rows: list[dict] = []
    reports: dict[str, dict] = {}
    for seed in cfg.seeds:
        with _named_numeric(f"train seed={seed}"):
            model = init_model(mcfg, seed=seed)
            run_cfg = replace(_train_config(cfg.train, "full"), seed=seed)
            train(model, pooled, NO_ABLATION, run_cfg, vocab)
            save_weights(model, out / "checkpoints" / f"model_seed{seed}.ckpt")
            for name, split in envs.items():
                _, errors = evaluate_model(model, split.test, vocab)
                report = build_report(
                    errors, model=model,
                    fingerprint={"kind": "train", "method": "locaris",
                                 "environment": name, "seed": seed})
                row = _row("train", "locaris", name, f"env={name}", seed=seed,
                           n_train=len(pooled), **_report_cells(report))
                rows.append(row)
                reports[row_label(row)] = report.to_dict()
    rows.extend(_mean_rows(rows))
    return rows, reports, None, {}


def _run_evaluate(cfg: ExperimentConfig, out: Path, jobs: int):
    vocab = build_vocab()
    envs = _build_envs(cfg)
    mcfg = _model_config(cfg, vocab)
    model = init_model(mcfg, seed=0)
    if not os.path.exists(cfg.checkpoint):
        raise ConfigError(f"checkpoint not found: {cfg.checkpoint}")
    load_weights(model, cfg.checkpoint)
    rows: list[dict] = []
    reports: dict[str, dict] = {}
    for name, split in envs.items():
        with _named_numeric(f"evaluate env={name}"):
            _, errors = evaluate_model(model, split.test, vocab)
            tps = (measure_throughput(model, split.test, vocab=vocab)
                   if cfg.throughput else None)
            report = build_report(
                errors, model=model, throughput=tps,
                fingerprint={"kind": "evaluate", "method": "locaris",
                             "environment": name})
            row = _row("evaluate", "locaris", name, f"env={name}",
                       n_train=len(split.train), **_report_cells(report))
            rows.append(row)
            reports[row_label(row)] = report.to_dict()
            schema = _feature_schema(split)
            truth = [s.position for s in split.test]
            if "knn" in cfg.baselines:
                knn = knn_fit(split.train, schema, k=cfg.knn_k)
                errs = distance_errors(knn_predict_batch(knn, split.test), truth)
                report = build_report(errs, fingerprint={
                    "kind": "evaluate", "method": "knn", "environment": name})
                row = _row("evaluate", "knn", name, f"env={name}",
                           n_train=len(split.train), **_report_cells(report))
                rows.append(row)
                reports[row_label(row)] = report.to_dict()
            if "mlp" in cfg.baselines:
                mlp = mlp_fit(split.train, schema, _mlp_config(cfg, seed=cfg.seeds[0]))
                errs = distance_errors(mlp_predict_batch(mlp, split.test), truth)
                report = build_report(errs, fingerprint={
                    "kind": "evaluate", "method": "mlp", "environment": name})
                row = _row("evaluate", "mlp", name, f"env={name}",
                           n_train=len(split.train), **_report_cells(report))
                rows.append(row)
                reports[row_label(row)] = report.to_dict()
    return rows, reports, None, {}


def _adapt_tasks(cfg: ExperimentConfig, out: Path, target: str, backbone_path,
                 fractions: Sequence[float]) -> list[dict]:
    tasks = []
    for fi, fraction in enumerate(fractions):
        for seed in cfg.seeds:
            ckpt = out / "checkpoints" / f"adapted_f{fraction}_s{seed}.ckpt"
            tasks.append({
                "config": cfg.to_dict(), "target": target, "fraction": fraction,
                "fraction_index": fi, "seed": seed,
                "backbone": str(backbone_path), "baselines": tuple(cfg.baselines),
                "ckpt_out": str(ckpt),
            })
    return tasks


def _adapt_rows(cfg: ExperimentConfig, kind: str, target: str, tasks: list[dict],
                results: list[dict]):
    rows: list[dict] = []
    reports: dict[str, dict] = {}
    for task, result in zip(tasks, results):
        for method, rdict in result["reports"].items():
            row = _row(kind, method, target, f"fraction={task['fraction']}",
                       fraction=task["fraction"], seed=task["seed"],
                       n_train=result["n_shots"], **_report_from_dict_cells(rdict))
            rows.append(row)
            reports[row_label(row)] = rdict
    rows.extend(_mean_rows(rows))
    return rows, reports


def _run_adapt(cfg: ExperimentConfig, out: Path, jobs: int):
    if not os.path.exists(cfg.backbone_checkpoint):
        raise ConfigError(f"backbone checkpoint not found: {cfg.backbone_checkpoint}")
    envs = _build_envs(cfg)
    target = cfg.target
    if target is None:
        if len(envs) != 1:
            raise ConfigError("adapt needs a target when several environments are given")
        target = next(iter(envs))
    if target not in envs:
        raise ConfigError(f"target {target!r} is not a configured environment")
    fractions = cfg.fractions or (1.0,)
    tasks = _adapt_tasks(cfg, out, target, cfg.backbone_checkpoint, fractions)
    results = _map_tasks(_adapt_worker, tasks, jobs)
    rows, reports = _adapt_rows(cfg, "adapt", target, tasks, results)
    return rows, reports, None, {}


def _run_fewshot(cfg: ExperimentConfig, out: Path, jobs: int):
    vocab = build_vocab()
    envs = _build_envs(cfg)
    mcfg = _model_config(cfg, vocab)
    backbone_path = out / "checkpoints" / "backbone.ckpt"
    if cfg.backbone_checkpoint:
        if not os.path.exists(cfg.backbone_checkpoint):
            raise ConfigError(
                f"backbone checkpoint not found: {cfg.backbone_checkpoint}")
        backbone_path = Path(cfg.backbone_checkpoint)
    else:
        with _named_numeric("source full-train"):
            pooled = [s for name, split in envs.items() if name != cfg.target
                      for s in split.train]
            backbone = init_model(mcfg, seed=cfg.seeds[0])
            run_cfg = replace(_train_config(cfg.train, "full"), seed=cfg.seeds[0])
            train(backbone, pooled, NO_ABLATION, run_cfg, vocab)
            save_weights(backbone, backbone_path)
    tasks = _adapt_tasks(cfg, out, cfg.target, backbone_path, cfg.fractions)
    results = _map_tasks(_adapt_worker, tasks, jobs)
    rows, reports = _adapt_rows(cfg, "fewshot_sweep", cfg.target, tasks, results)
    return rows, reports, None, {}


def _run_telemetry_ablation(cfg: ExperimentConfig, out: Path, jobs: int):
    envs = _build_envs(cfg)
    tasks = [
        {"config": cfg.to_dict(), "environment": name, "modality": modality,
         "seed": seed}
        for name in envs
        for modality in cfg.modalities
        for seed in cfg.seeds
    ]
    results = _map_tasks(_ablation_worker, tasks, jobs)
    rows: list[dict] = []
    reports: dict[str, dict] = {}
    for task, result in zip(tasks, results):
        rdict = result["reports"]["locaris"]
        row = _row("telemetry_ablation", "locaris", task["environment"],
                   f"modality={task['modality']}", seed=task["seed"],
                   n_train=result["n_train"], **_report_from_dict_cells(rdict))
        rows.append(row)
        reports[row_label(row)] = rdict
    rows.extend(_mean_rows(rows))
    return rows, reports, None, {}


def _run_ap_ablation(cfg: ExperimentConfig, out: Path, jobs: int):
    envs = _build_envs(cfg)
    tasks = [
        {"config": cfg.to_dict(), "environment": name, "seed": seed}
        for name in envs
        for seed in cfg.seeds
    ]
    results = _map_tasks(_ap_worker, tasks, jobs)
    rows: list[dict] = []
    reports: dict[str, dict] = {}
    condition_drops: dict[str, int] = {}
    for task, result in zip(tasks, results):
        for cell in result["conditions"]:
            condition_drops[cell["condition"]] = cell["n_drop"]
            for method, rdict in cell["reports"].items():
                row = _row("ap_ablation", method, task["environment"],
                           cell["condition"], seed=task["seed"],
                           n_train=result["n_train"],
                           **_report_from_dict_cells(rdict))
                rows.append(row)
                reports[row_label(row)] = rdict
    per_seed = list(rows)
    rows.extend(_mean_rows(rows))
    # One rotation-average row per (method, environment, k): the mean over
    # every drop set of that size and every seed.
    for k in cfg.drop_k:
        conditions = {c for c, n in condition_drops.items() if n == k}
        groups: dict[tuple, list[dict]] = {}
        for row in per_seed:
            if row["condition"] in conditions:
                groups.setdefault((row["method"], row["environment"]), []).append(row)
        for (method, environment), members in sorted(groups.items()):
            mean = _row("ap_ablation", method, environment,
                        f"rotation_mean_k{k}", seed=MEAN_SEED)
            for col in _METRIC_KEYS:
                mean[col] = float(np.mean([m[col] for m in members]))
            mean["n_test"] = members[0]["n_test"]
            rows.append(mean)
    return rows, reports, None, {}


def _run_quantize(cfg: ExperimentConfig, out: Path, jobs: int):
    vocab = build_vocab()
    name, split = next(iter(_build_envs(cfg).items()))
    mcfg = _model_config(cfg, vocab)
    seed = cfg.seeds[0]
    with _named_numeric("quantize source train"):
        base = init_model(mcfg, seed=seed)
        if cfg.backbone_checkpoint:
            if not os.path.exists(cfg.backbone_checkpoint):
                raise ConfigError(
                    f"backbone checkpoint not found: {cfg.backbone_checkpoint}")
            load_weights(base, cfg.backbone_checkpoint)
        else:
            run_cfg = replace(_train_config(cfg.train, "full"), seed=seed)
            train(base, split.train, NO_ABLATION, run_cfg, vocab)
        adapted = attach_lora(base, _lora_config(cfg), seed=seed)
        run_cfg = replace(_train_config(cfg.adapt, "lora"), seed=seed)
        train(adapted, split.train, NO_ABLATION, run_cfg, vocab)
        save_weights(adapted, out / "checkpoints" / "model.ckpt")

    rows: list[dict] = []
    reports: dict[str, dict] = {}
    quantize_rows: list[dict] = []
    for bits in cfg.bits:
        with _named_numeric(f"bits={bits}"):
            model = adapted if bits == 32 else quantize_backbone(adapted, bits)
            _, errors = evaluate_model(model, split.test, vocab)
            tps = (measure_throughput(model, split.test, vocab=vocab)
                   if cfg.throughput else None)
            report = build_report(
                errors, model=model, throughput=tps,
                fingerprint={"kind": "quantize_sweep", "method": "locaris",
                             "environment": name, "bits": bits, "seed": seed})
            row = _row("quantize_sweep", "locaris", name, f"bits={bits}",
                       seed=seed, n_train=len(split.train),
                       **_report_cells(report))
            rows.append(row)
            reports[row_label(row)] = report.to_dict()
            quantize_rows.append({
                "environment": name, "bits": bits,
                "mae_m": report.metrics.mae, "rmse_m": report.metrics.rmse,
                "p95_m": report.metrics.p95, "throughput_sps": tps,
                "memory_bytes": report.weight_memory_bytes,
            })
    return rows, reports, quantize_rows, {}


def _run_simulate(cfg: ExperimentConfig, out: Path, jobs: int):
    dataset_dir = out / "datasets"
    dataset_dir.mkdir(parents=True, exist_ok=True)
    manifests = []
    for name in cfg.environments:
        manifests.append(simulate_to_files(preset(name), cfg.data_seed, dataset_dir))
    for raw in cfg.custom_environments:
        data = dict(raw)
        if "ap_positions" in data:
            data["ap_positions"] = tuple((float(x), float(y)) for x, y in data["ap_positions"])
        try:
            spec = EnvironmentSpec(**data)
        except TypeError as exc:
            raise ConfigError(f"bad custom environment: {exc}") from exc
        manifests.append(simulate_to_files(spec, cfg.data_seed, dataset_dir))
    return [], {}, None, {"datasets": manifests}


_RUNNERS = {
    "train": _run_train,
    "adapt": _run_adapt,
    "evaluate": _run_evaluate,
    "fewshot_sweep": _run_fewshot,
    "telemetry_ablation": _run_telemetry_ablation,
    "ap_ablation": _run_ap_ablation,
    "quantize_sweep": _run_quantize,
    "simulate": _run_simulate,
}


def run_experiment(cfg: ExperimentConfig, jobs_override: Optional[int] = None) -> Path:
    """Execute one experiment config; returns its output directory."""
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    if cfg.kind != "simulate":
        (out / "checkpoints").mkdir(exist_ok=True)
    jobs = _resolve_jobs(cfg, jobs_override)
    rows, reports, quantize_rows, extras = _RUNNERS[cfg.kind](cfg, out, jobs)
    _write_run(out, cfg, rows, reports, quantize_rows, extras)
    return out
