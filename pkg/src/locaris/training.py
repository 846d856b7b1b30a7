"""MSE training loops over coordinate targets.

Two modes share one loop: "full" updates every parameter (used to build a
backbone on source environments, standing in for pretraining) and "lora"
updates only adapters plus head on a frozen backbone. The supervision signal
is always the final (x, y) regression output; there is no token-level loss.

Each step: serialize -> encode -> pad -> forward -> MSE -> global-norm clip
-> AdamW. Batching is a seeded shuffle per epoch; everything is deterministic
given (model snapshot, dataset order, config).
"""

from __future__ import annotations

import json
import math
import time
from dataclasses import dataclass, field, replace
from typing import Optional, Sequence

import numpy as np

from . import numerics as nx
from .errors import (
    BadFraction,
    BadTarget,
    ConfigError,
    EmptyDataset,
    NonFiniteLoss,
    NotAdapted,
)
from .model import (
    LoraConfig,
    Model,
    ModelConfig,
    attach_lora,
    count_parameters,
    forward_batch,
    init_model,
)
from .telemetry import (
    NO_ABLATION, RSSI_MAX, RSSI_MIN, AblationSpec, APReading, DatasetSplit,
    TelemetrySample, serialize_prompt,
)
from .tokenizer import Vocab, build_vocab, encode, pad_batch

DEFAULT_EPOCHS = {"full": 30, "lora": 15}


@dataclass(frozen=True)
class TrainConfig:
    mode: str
    lr: float = 1e-4
    batch_size: int = 8
    epochs: Optional[int] = None  # None -> 30 for full, 15 for lora
    seed: int = 0
    clip_norm: float = 1.0
    weight_decay: float = 0.01
    max_steps: Optional[int] = None  # hard cap on optimizer steps, for budgeted runs
    lr_schedule: str = "constant"  # or "cosine" (decay to 0 over the planned steps)
    warmup_steps: int = 0
    ema_decay: Optional[float] = None  # average trainable weights over steps
    # Per-epoch measurement re-noising, in dB / ns. Few-shot sets cover each
    # reference point with a handful of draws; jittering within sensor noise
    # approximates the draws we did not keep.
    augment_rssi_db: Optional[float] = None
    augment_ftm_ns: Optional[float] = None

    def __post_init__(self):
        if self.mode not in ("full", "lora"):
            raise ConfigError(f"mode must be full or lora, got {self.mode!r}")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.epochs is not None and self.epochs < 1:
            raise ConfigError("epochs must be >= 1")
        if self.max_steps is not None and self.max_steps < 1:
            raise ConfigError("max_steps must be >= 1")
        if self.lr_schedule not in ("constant", "cosine"):
            raise ConfigError(f"lr_schedule must be constant or cosine, got {self.lr_schedule!r}")
        if self.warmup_steps < 0:
            raise ConfigError("warmup_steps must be >= 0")
        if self.ema_decay is not None and not (0.0 < self.ema_decay < 1.0):
            raise ConfigError("ema_decay must lie in (0, 1)")
        for name in ("augment_rssi_db", "augment_ftm_ns"):
            value = getattr(self, name)
            if value is not None and value <= 0:
                raise ConfigError(f"{name} must be positive when set")

    @property
    def augmented(self) -> bool:
        return self.augment_rssi_db is not None or self.augment_ftm_ns is not None

    @property
    def resolved_epochs(self) -> int:
        return self.epochs if self.epochs is not None else DEFAULT_EPOCHS[self.mode]

    def planned_steps(self, n_samples: int) -> int:
        per_epoch = max(1, math.ceil(n_samples / self.batch_size))
        total = per_epoch * self.resolved_epochs
        return min(total, self.max_steps) if self.max_steps is not None else total

    def lr_at(self, step: int, planned: int) -> float:
        """Learning rate for 0-indexed `step` of a `planned`-step run."""
        if self.warmup_steps > 0 and step < self.warmup_steps:
            return self.lr * (step + 1) / self.warmup_steps
        if self.lr_schedule == "constant":
            return self.lr
        span = max(1, planned - self.warmup_steps)
        progress = min(1.0, (step - self.warmup_steps) / span)
        return self.lr * 0.5 * (1.0 + math.cos(math.pi * progress))


@dataclass
class TrainLog:
    """Per-epoch mean loss (m^2) and wall time, plus a trainable snapshot."""

    epoch_losses: list[float] = field(default_factory=list)
    epoch_seconds: list[float] = field(default_factory=list)
    trainable_fraction: float = 0.0
    steps: int = 0

    def to_json_lines(self) -> str:
        lines = [
            json.dumps({"epoch": i, "loss": loss, "seconds": secs})
            for i, (loss, secs) in enumerate(zip(self.epoch_losses, self.epoch_seconds))
        ]
        return "\n".join(lines)


def mse_loss(pred: nx.Tensor, target) -> nx.Tensor:
    """Mean over the batch of squared Euclidean distance, in m^2."""
    t = target if isinstance(target, nx.Tensor) else nx.Tensor(np.asarray(target, dtype=np.float64))
    if pred.shape != t.shape or pred.data.ndim != 2 or pred.shape[1] != 2:
        raise nx.ShapeMismatch(f"mse_loss shapes {pred.shape} vs {t.shape}")
    diff = nx.sub(pred, t)
    return nx.scale(nx.sum_all(nx.mul(diff, diff)), 1.0 / pred.shape[0])


def _encode_dataset(
    dataset: Sequence[TelemetrySample], spec: AblationSpec, vocab: Vocab
) -> tuple[list, np.ndarray]:
    seqs = [encode(serialize_prompt(s, spec), vocab) for s in dataset]
    targets = np.array([s.position for s in dataset], dtype=np.float64)
    return seqs, targets


def _renoise(sample: TelemetrySample, cfg: TrainConfig, rng) -> TelemetrySample:
    readings = []
    for r in sample.readings:
        rssi, rtt = r.rssi, r.ftm_rtt
        if rssi is not None and cfg.augment_rssi_db:
            jitter = int(round(rng.normal(0.0, cfg.augment_rssi_db)))
            rssi = min(RSSI_MAX, max(RSSI_MIN, rssi + jitter))
        if rtt is not None and cfg.augment_ftm_ns:
            jitter = int(round(rng.normal(0.0, cfg.augment_ftm_ns)))
            rtt = max(1, rtt + jitter)
        readings.append(APReading(ap_id=r.ap_id, rssi=rssi, ftm_rtt=rtt))
    return TelemetrySample(readings=tuple(readings), position=sample.position,
                           metadata=dict(sample.metadata))


def train(
    model: Model,
    dataset: Sequence[TelemetrySample],
    spec: AblationSpec,
    cfg: TrainConfig,
    vocab: Optional[Vocab] = None,
) -> tuple[Model, TrainLog]:
    """Train in place; returns the same model plus a TrainLog."""
    if len(dataset) == 0:
        raise EmptyDataset("training dataset is empty")
    if cfg.mode == "lora" and not model.adapted:
        raise NotAdapted("lora mode requires attach_lora first")
    if cfg.mode == "full" and model.adapted:
        raise ConfigError("full mode on an adapted model would train a frozen backbone")
    vocab = vocab or build_vocab()

    seqs, targets = _encode_dataset(dataset, spec, vocab)
    bias = model.params["head.b2"]
    if bias.requires_grad:
        # Adam moves a bias coordinate by roughly lr per step, so a head
        # centered on another environment burns thousands of steps walking
        # to the new coordinate mean. Start it there instead.
        bias.data = targets.mean(axis=0).copy()
    names_params = sorted(model.trainable_parameters(), key=lambda nt: nt[0])
    params = [t for _, t in names_params]
    state = nx.AdamWState.init(
        params, lr=cfg.lr, weight_decay=cfg.weight_decay
    )
    shuffle_rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 0]))
    dropout_rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 1]))
    augment_rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 2]))
    shadow = [np.zeros_like(p.data) for p in params] if cfg.ema_decay else None

    log = TrainLog(trainable_fraction=count_parameters(model)["trainable_fraction"])
    n = len(seqs)
    planned = cfg.planned_steps(n)
    step = 0
    for epoch in range(cfg.resolved_epochs):
        t0 = time.perf_counter()
        order = shuffle_rng.permutation(n)
        if cfg.augmented:
            noisy = [_renoise(s, cfg, augment_rng) for s in dataset]
            seqs, _ = _encode_dataset(noisy, spec, vocab)
        loss_sum = 0.0
        seen = 0
        for start in range(0, n, cfg.batch_size):
            idx = order[start : start + cfg.batch_size]
            batch = pad_batch([seqs[i] for i in idx], targets[idx])
            with nx.Tape():
                preds, _ = forward_batch(model, batch, rng=dropout_rng)
                loss = mse_loss(preds, nx.Tensor(batch.targets))
                loss_value = loss.item()
                if not math.isfinite(loss_value):
                    raise NonFiniteLoss(f"non-finite loss at step {step}")
                nx.grad(loss, params)
            grads, _ = nx.clip_global_norm([p.grad for p in params], cfg.clip_norm)
            state.lr = cfg.lr_at(step, planned)
            nx.adamw_step(params, grads, state)
            if shadow is not None:
                for s, p in zip(shadow, params):
                    s *= cfg.ema_decay
                    s += (1.0 - cfg.ema_decay) * p.data
            loss_sum += loss_value * len(idx)
            seen += len(idx)
            step += 1
            if cfg.max_steps is not None and step >= cfg.max_steps:
                break
        log.epoch_losses.append(loss_sum / seen)
        log.epoch_seconds.append(time.perf_counter() - t0)
        if cfg.max_steps is not None and step >= cfg.max_steps:
            break
    if shadow is not None:
        # Zero-initialized EMA underweights early steps; dividing by the
        # geometric-series mass makes it an exact weighted average.
        correction = 1.0 - cfg.ema_decay**step
        for s, p in zip(shadow, params):
            p.data = s / correction
    log.steps = step
    return model, log


def few_shot_subset(
    dataset: Sequence[TelemetrySample], fraction: float, seed: int
) -> list[TelemetrySample]:
    """max(1, floor(fraction*N)) samples, seeded, original order preserved."""
    if not (0.0 < fraction <= 1.0):
        raise BadFraction(f"fraction must lie in (0, 1], got {fraction}")
    n = len(dataset)
    if n == 0:
        raise EmptyDataset("cannot subset an empty dataset")
    if fraction == 1.0:
        return list(dataset)
    size = max(1, int(math.floor(fraction * n)))
    rng = np.random.default_rng(seed)
    picked = np.sort(rng.choice(n, size=size, replace=False))
    return [dataset[i] for i in picked]


def condition_seeds(seed: int, fraction_index: int) -> tuple[int, int]:
    """(attach_seed, train_seed) for one protocol condition.

    Derived from (seed, fraction index), never from execution order, so any
    scheduling of the conditions yields identical results.
    """
    ss = np.random.SeedSequence([0x10CA, seed, fraction_index])
    attach_seed, train_seed = (int(x) for x in ss.generate_state(2))
    return attach_seed, train_seed


@dataclass
class AdaptedRun:
    fraction: float
    seed: int
    n_shots: int
    model: Model
    log: TrainLog


@dataclass
class CrossEnvResult:
    backbone: Model
    backbone_log: TrainLog
    runs: list[AdaptedRun]


def cross_env_protocol(
    envs: Sequence[DatasetSplit],
    target_index: int,
    fractions: Sequence[float],
    seeds: Sequence[int],
    model_cfg: ModelConfig,
    lora_cfg: LoraConfig,
    full_cfg: TrainConfig,
    adapt_cfg: TrainConfig,
    vocab: Optional[Vocab] = None,
    init_seed: int = 0,
    backbone: Optional[Model] = None,
) -> CrossEnvResult:
    """Full-train on the two source environments, LoRA-adapt on the target.

    For every (fraction, seed): fresh adapters on a copy of the source-trained
    backbone, adapted on a seeded subset of the target train split. A
    pre-trained backbone can be passed in to skip the source phase (it must
    then match model_cfg).
    """
    if len(envs) != 3:
        raise BadTarget(f"protocol needs exactly 3 environments, got {len(envs)}")
    if not (0 <= target_index < len(envs)):
        raise BadTarget(f"target_index {target_index} out of range")
    if not seeds or not fractions:
        raise ConfigError("fractions and seeds must be non-empty")
    vocab = vocab or build_vocab()

    target = envs[target_index]
    sources = [e for i, e in enumerate(envs) if i != target_index]
    pooled = [s for e in sources for s in e.train]

    if backbone is None:
        backbone = init_model(model_cfg, seed=init_seed)
        backbone, backbone_log = train(backbone, pooled, NO_ABLATION, full_cfg, vocab)
    else:
        backbone_log = TrainLog(trainable_fraction=1.0)

    runs: list[AdaptedRun] = []
    for fi, fraction in enumerate(fractions):
        for seed in seeds:
            attach_seed, train_seed = condition_seeds(seed, fi)
            shots = few_shot_subset(target.train, fraction, seed=train_seed)
            adapted = attach_lora(backbone, lora_cfg, seed=attach_seed)
            run_cfg = replace(adapt_cfg, mode="lora", seed=train_seed)
            adapted, log = train(adapted, shots, NO_ABLATION, run_cfg, vocab)
            runs.append(
                AdaptedRun(fraction=fraction, seed=seed, n_shots=len(shots), model=adapted, log=log)
            )
    return CrossEnvResult(backbone=backbone, backbone_log=backbone_log, runs=runs)
