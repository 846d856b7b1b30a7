"""Error metrics, throughput and memory accounting, report assembly.

Percentiles use linear interpolation between order statistics at fractional
index p*(n-1), the numpy "linear" method. Energy per sample is deliberately
not measured (no portable watt meter); reports carry an explicit null.

Memory accounting convention: weights count at their storage width, 4 bytes
per float (the checkpoint stores float32) regardless of the float64 compute
dtype, and quantized matrices count packed code bytes plus per-row float32
scales. This makes the int8/int4 ratios honest properties of the format.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from . import numerics as nx
from .errors import EmptyErrors, LengthMismatch, NumericError
from .model import Model, QuantizedModel, count_parameters, forward_batch
from .telemetry import NO_ABLATION, AblationSpec, TelemetrySample, serialize_prompt
from .tokenizer import Vocab, build_vocab, encode, pad_batch


def distance_errors(preds, truths) -> np.ndarray:
    """Per-sample planar Euclidean distance in meters."""
    p = np.asarray(preds, dtype=np.float64)
    t = np.asarray(truths, dtype=np.float64)
    if p.shape != t.shape or p.ndim != 2 or p.shape[1] != 2 or p.shape[0] < 1:
        raise LengthMismatch(f"distance_errors shapes {p.shape} vs {t.shape}")
    return np.sqrt(((p - t) ** 2).sum(axis=1))


@dataclass(frozen=True)
class MetricSummary:
    mae: float
    rmse: float
    p50: float
    p75: float
    p95: float
    p99: float
    n: int

    def __post_init__(self):
        if not (self.rmse + 1e-12 >= self.mae):
            raise NumericError(f"rmse {self.rmse} < mae {self.mae}")
        if not (self.p50 <= self.p75 <= self.p95 <= self.p99):
            raise NumericError("percentiles not monotone")
        if min(self.mae, self.rmse, self.p50) < 0:
            raise NumericError("negative metric")


def summarize(errors) -> MetricSummary:
    e = np.asarray(errors, dtype=np.float64).reshape(-1)
    if e.size == 0:
        raise EmptyErrors("summarize needs at least one error")
    p50, p75, p95, p99 = np.percentile(e, [50, 75, 95, 99], method="linear")
    return MetricSummary(
        mae=float(e.mean()),
        rmse=float(np.sqrt((e * e).mean())),
        p50=float(p50),
        p75=float(p75),
        p95=float(p95),
        p99=float(p99),
        n=int(e.size),
    )


@dataclass
class EvalReport:
    """One evaluated condition; fingerprint identifies it across files."""

    metrics: MetricSummary
    n_samples: int
    throughput: Optional[float] = None  # samples/second, nondeterministic
    energy: None = None  # intentionally unmeasured
    param_counts: dict = field(default_factory=dict)
    weight_memory_bytes: Optional[int] = None
    fingerprint: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "mae_m": self.metrics.mae,
            "rmse_m": self.metrics.rmse,
            "p50_m": self.metrics.p50,
            "p75_m": self.metrics.p75,
            "p95_m": self.metrics.p95,
            "p99_m": self.metrics.p99,
            "n_samples": self.n_samples,
            "throughput_sps": self.throughput,
            "energy_samples_per_wh": self.energy,
            "param_counts": self.param_counts,
            "weight_memory_bytes": self.weight_memory_bytes,
            "fingerprint": self.fingerprint,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "EvalReport":
        metrics = MetricSummary(
            mae=d["mae_m"], rmse=d["rmse_m"], p50=d["p50_m"], p75=d["p75_m"],
            p95=d["p95_m"], p99=d["p99_m"], n=d["n_samples"],
        )
        return cls(
            metrics=metrics,
            n_samples=d["n_samples"],
            throughput=d.get("throughput_sps"),
            param_counts=d.get("param_counts", {}),
            weight_memory_bytes=d.get("weight_memory_bytes"),
            fingerprint=d.get("fingerprint", {}),
        )


def predict_samples(
    model,
    samples: Sequence[TelemetrySample],
    vocab: Optional[Vocab] = None,
    spec: AblationSpec = NO_ABLATION,
    batch_size: int = 64,
) -> np.ndarray:
    """Deterministic inference over a sample list; returns (N, 2) meters."""
    vocab = vocab or build_vocab()
    out = np.empty((len(samples), 2), dtype=np.float64)
    for start in range(0, len(samples), batch_size):
        chunk = samples[start : start + batch_size]
        seqs = [encode(serialize_prompt(s, spec), vocab) for s in chunk]
        batch = pad_batch(seqs, [s.position for s in chunk])
        preds, _ = forward_batch(model, batch)
        out[start : start + len(chunk)] = preds.data
    return out


def evaluate_model(
    model,
    samples: Sequence[TelemetrySample],
    vocab: Optional[Vocab] = None,
    spec: AblationSpec = NO_ABLATION,
    batch_size: int = 64,
) -> tuple[np.ndarray, np.ndarray]:
    """(predictions, per-sample distance errors) on a sample list."""
    preds = predict_samples(model, samples, vocab, spec, batch_size)
    truths = np.array([s.position for s in samples], dtype=np.float64)
    return preds, distance_errors(preds, truths)


def measure_throughput(
    model,
    samples: Sequence[TelemetrySample],
    batch_size: int = 64,
    vocab: Optional[Vocab] = None,
    passes: int = 3,
) -> float:
    """Median samples/second over >= 3 timed passes after one warm-up.

    End to end: serialize, encode, pad, forward. Wall-clock, so inherently
    nondeterministic; never written into deterministic result tables.
    """
    vocab = vocab or build_vocab()
    passes = max(3, passes)
    predict_samples(model, samples, vocab, batch_size=batch_size)  # warm-up
    rates = []
    for _ in range(passes):
        t0 = time.perf_counter()
        predict_samples(model, samples, vocab, batch_size=batch_size)
        rates.append(len(samples) / (time.perf_counter() - t0))
    return float(np.median(rates))


FLOAT_STORAGE_BYTES = 4  # checkpoint dtype is float32


def weight_memory(model) -> int:
    """Exact bytes of weight storage, excluding activations and RNG state."""
    if isinstance(model, QuantizedModel):
        quantized = sum(qm.storage_bytes for qm in model.quantized.values())
        floats = sum(t.size for t in model.float_params.values()) * FLOAT_STORAGE_BYTES
        return int(quantized + floats)
    return int(sum(t.size for _, t in model.named_parameters()) * FLOAT_STORAGE_BYTES)


def backbone_memory(model) -> int:
    """Weight bytes of backbone tensors only (the quantization target)."""
    if isinstance(model, QuantizedModel):
        quantized = sum(qm.storage_bytes for qm in model.quantized.values())
        norms = sum(
            t.size for name, t in model.float_params.items() if name.startswith("backbone.")
        ) * FLOAT_STORAGE_BYTES
        return int(quantized + norms)
    return int(
        sum(t.size for name, t in model.named_parameters() if name.startswith("backbone."))
        * FLOAT_STORAGE_BYTES
    )


def build_report(
    errors,
    model=None,
    throughput: Optional[float] = None,
    fingerprint: Optional[dict] = None,
) -> EvalReport:
    metrics = summarize(errors)
    report = EvalReport(
        metrics=metrics,
        n_samples=metrics.n,
        throughput=throughput,
        fingerprint=dict(fingerprint or {}),
    )
    if model is not None:
        report.param_counts = count_parameters(model)
        report.weight_memory_bytes = weight_memory(model)
    return report
