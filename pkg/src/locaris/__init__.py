"""locaris: desk-scale indoor localization from Wi-Fi telemetry prompts.

Pipeline: telemetry samples -> textual prompts -> domain tokenizer -> causal
decoder regressor (optionally LoRA-adapted and/or quantized) -> planar
coordinates, plus a synthetic RF simulator, KNN/MLP baselines, an evaluation
suite, and a config-driven experiment harness (`locaris` CLI).
"""

__version__ = "0.1.0"
