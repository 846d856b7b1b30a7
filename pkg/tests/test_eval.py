"""Metrics, reports, memory accounting."""

import numpy as np
import pytest

from locaris.errors import EmptyErrors, LengthMismatch, NumericError
from locaris.evaluation import (
    FLOAT_STORAGE_BYTES, EvalReport, MetricSummary, backbone_memory,
    build_report, distance_errors, evaluate_model, summarize, weight_memory,
)
from locaris.model import (
    LoraConfig, ModelConfig, attach_lora, count_parameters, init_model,
    quantize_backbone,
)
from locaris.tokenizer import build_vocab

VOCAB = build_vocab()
CFG = ModelConfig(vocab_size=len(VOCAB), d_model=32, n_layers=2, n_heads=2, max_seq_len=64)


class TestDistanceErrors:
    def test_oracle(self):
        errs = distance_errors([[0.0, 0.0], [1.0, 1.0]], [[3.0, 4.0], [1.0, 1.0]])
        np.testing.assert_allclose(errs, [5.0, 0.0])

    def test_shape_guard(self):
        with pytest.raises(LengthMismatch):
            distance_errors([[0.0, 0.0]], [[0.0, 0.0], [1.0, 1.0]])
        with pytest.raises(LengthMismatch):
            distance_errors([[0.0, 0.0, 0.0]], [[0.0, 0.0, 0.0]])


class TestSummarize:
    def test_frozen_oracle(self):
        # Hand-computed for [1,2,3,4,100] with linear interpolation.
        s = summarize([1.0, 2.0, 3.0, 4.0, 100.0])
        assert s.mae == pytest.approx(22.0, rel=1e-15)
        assert s.rmse == pytest.approx(np.sqrt(2006.0), rel=1e-15)
        assert s.p50 == pytest.approx(3.0, rel=1e-15)
        assert s.p75 == pytest.approx(4.0, rel=1e-15)
        assert s.p95 == pytest.approx(4.0 + 0.8 * 96.0, rel=1e-15)
        assert s.p99 == pytest.approx(4.0 + 0.96 * 96.0, rel=1e-15)
        assert s.n == 5

    def test_single_error(self):
        s = summarize([2.5])
        assert s.mae == s.rmse == s.p50 == s.p99 == 2.5

    def test_empty(self):
        with pytest.raises(EmptyErrors):
            summarize([])

    def test_invariant_guards(self):
        with pytest.raises(NumericError):
            MetricSummary(mae=2.0, rmse=1.0, p50=1, p75=1, p95=1, p99=1, n=1)
        with pytest.raises(NumericError):
            MetricSummary(mae=1.0, rmse=1.0, p50=2, p75=1, p95=3, p99=4, n=1)


class TestEvalReport:
    def test_dict_round_trip(self):
        report = build_report([1.0, 2.0], fingerprint={"env": "lecture"})
        again = EvalReport.from_dict(report.to_dict())
        assert again.metrics == report.metrics
        assert again.fingerprint == {"env": "lecture"}
        assert again.throughput is None

    def test_model_accounting_attached(self):
        model = init_model(CFG, seed=0)
        report = build_report([1.0], model=model)
        assert report.param_counts == count_parameters(model)
        assert report.weight_memory_bytes == weight_memory(model)

    def test_energy_intentionally_absent(self):
        assert build_report([1.0]).energy is None


class TestMemoryAccounting:
    def test_float_model_bytes(self):
        model = init_model(CFG, seed=0)
        n = count_parameters(model)["total"]
        assert weight_memory(model) == n * FLOAT_STORAGE_BYTES

    def test_quantized_reduction(self):
        # Per-row scales and float norm gains shrink relative to weights as
        # width grows; the byte bounds hold from d_model=64 up.
        wide = ModelConfig(vocab_size=len(VOCAB), d_model=64, n_layers=2,
                           n_heads=4, max_seq_len=64)
        adapted = attach_lora(init_model(wide, seed=0), LoraConfig(rank=2, dropout=0.0), seed=1)
        base = backbone_memory(adapted)
        q8 = backbone_memory(quantize_backbone(adapted, 8))
        q4 = backbone_memory(quantize_backbone(adapted, 4))
        assert q4 < q8 < base
        assert q8 <= 0.27 * base
        assert q4 <= 0.15 * base

    def test_quantized_total_includes_adapters(self):
        adapted = attach_lora(init_model(CFG, seed=0), LoraConfig(rank=2, dropout=0.0), seed=1)
        q8 = quantize_backbone(adapted, 8)
        assert weight_memory(q8) > backbone_memory(q8)


class TestEvaluateModel:
    def test_runs_end_to_end(self):
        from locaris.telemetry import APReading, TelemetrySample
        samples = [
            TelemetrySample(readings=(APReading(ap_id=1, rssi=-50),),
                            position=(1.0, 2.0), metadata={}),
            TelemetrySample(readings=(APReading(ap_id=2, ftm_rtt=500),),
                            position=(3.0, 4.0), metadata={}),
        ]
        preds, errs = evaluate_model(init_model(CFG, seed=0), samples, VOCAB)
        assert preds.shape == (2, 2)
        assert errs.shape == (2,)
        # untrained model predicts the origin
        np.testing.assert_allclose(errs, [np.sqrt(5.0), 5.0])
