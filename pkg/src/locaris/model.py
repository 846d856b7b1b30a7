"""Causal decoder-only regressor: frozen-able backbone + LoRA + MLP head.

Architecture, per token: embedding -> n_layers x [rms_norm -> causal
multi-head self-attention with rotary position encoding -> residual ->
rms_norm -> SiLU feed-forward -> residual] -> final rms_norm. The sequence
representation is the hidden state at the last non-padding position (the
trailing EOS), fed to Linear(d -> d/2) -> ReLU -> Linear(d/2 -> 2) to produce
planar coordinates in meters.

LoRA attaches rank-r pairs to the four attention projections; the effective
projection becomes W.x + (alpha/r) * B.(A.x) with A ~ N(0, 0.02^2) and B = 0,
so a freshly adapted model is forward-identical to its base. In adapt mode
every backbone tensor is frozen (requires_grad False, never touched by the
optimizer); only adapters and the head train.

Quantization replaces each frozen 2-D matrix with symmetric per-row int8 or
packed int4 codes plus one float32 scale per row, dequantized at use. Norm
gains, adapters, and the head stay floating point.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterator, Optional

import numpy as np

from . import numerics as nx
from .errors import (
    AlreadyAdapted,
    ConfigError,
    EmptyMaskRow,
    SequenceTooLong,
    UnsupportedBits,
)
from .tokenizer import Batch

LORA_TARGETS = ("q", "k", "v", "o")

INIT_STD = 0.02


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int
    d_model: int = 128
    n_layers: int = 4
    n_heads: int = 4
    ffn_mult: int = 4
    max_seq_len: int = 128
    rope_base: float = 10000.0

    def __post_init__(self):
        if self.vocab_size < 1:
            raise ConfigError("vocab_size must be positive")
        if self.d_model % self.n_heads != 0:
            raise ConfigError(f"d_model {self.d_model} not divisible by n_heads {self.n_heads}")
        if (self.d_model // self.n_heads) % 2 != 0:
            raise ConfigError("head dimension must be even for rotary encoding")
        if self.d_model < 2 or self.n_layers < 1 or self.ffn_mult < 1 or self.max_seq_len < 1:
            raise ConfigError("degenerate model configuration")

    @property
    def head_dim(self) -> int:
        return self.d_model // self.n_heads


@dataclass(frozen=True)
class LoraConfig:
    rank: int = 16
    alpha: float = 32.0
    dropout: float = 0.05

    def __post_init__(self):
        if self.rank < 1:
            raise ConfigError("LoRA rank must be >= 1")
        if self.alpha <= 0:
            raise ConfigError("LoRA alpha must be > 0")
        if not (0.0 <= self.dropout < 1.0):
            raise ConfigError("LoRA dropout must lie in [0, 1)")

    @property
    def scaling(self) -> float:
        return self.alpha / self.rank


def _rope_tables(cfg: ModelConfig) -> tuple[np.ndarray, np.ndarray]:
    half = cfg.head_dim // 2
    inv_freq = cfg.rope_base ** (-np.arange(half, dtype=np.float64) * 2.0 / cfg.head_dim)
    angles = np.arange(cfg.max_seq_len, dtype=np.float64)[:, None] * inv_freq[None, :]
    return np.cos(angles), np.sin(angles)


class Model:
    """Parameter container; all weights live in a flat name -> Tensor dict."""

    def __init__(self, config: ModelConfig, params: dict[str, nx.Tensor], lora: Optional[LoraConfig]):
        self.config = config
        self.params = params
        self.lora = lora
        self._rope_cos, self._rope_sin = _rope_tables(config)

    @property
    def adapted(self) -> bool:
        return self.lora is not None

    def weight(self, name: str) -> nx.Tensor:
        return self.params[name]

    def named_parameters(self) -> Iterator[tuple[str, nx.Tensor]]:
        return iter(self.params.items())

    def trainable_parameters(self) -> list[tuple[str, nx.Tensor]]:
        return [(n, t) for n, t in self.params.items() if t.requires_grad]

    def frozen_parameters(self) -> list[tuple[str, nx.Tensor]]:
        return [(n, t) for n, t in self.params.items() if not t.requires_grad]


def _backbone_names(cfg: ModelConfig) -> list[str]:
    names = ["backbone.embed"]
    for i in range(cfg.n_layers):
        prefix = f"backbone.layers.{i}"
        names += [
            f"{prefix}.attn_norm",
            f"{prefix}.attn.wq",
            f"{prefix}.attn.wk",
            f"{prefix}.attn.wv",
            f"{prefix}.attn.wo",
            f"{prefix}.ffn_norm",
            f"{prefix}.ffn.w1",
            f"{prefix}.ffn.w2",
        ]
    names.append("backbone.final_norm")
    return names


def init_model(cfg: ModelConfig, seed: int) -> Model:
    """Deterministic from-scratch initialization.

    Backbone weights ~ N(0, 0.02^2); the residual-output projections (wo, w2)
    are additionally scaled by 1/sqrt(2 * n_layers). The head's final linear
    layer starts at exactly zero so an untrained model predicts (0, 0).
    """
    rng = np.random.default_rng(seed)
    d, m = cfg.d_model, cfg.ffn_mult
    residual_std = INIT_STD / math.sqrt(2.0 * cfg.n_layers)

    def normal(shape, std):
        return nx.Tensor(rng.normal(0.0, std, shape), requires_grad=True)

    params: dict[str, nx.Tensor] = {}
    params["backbone.embed"] = normal((cfg.vocab_size, d), INIT_STD)
    for i in range(cfg.n_layers):
        prefix = f"backbone.layers.{i}"
        params[f"{prefix}.attn_norm"] = nx.Tensor(np.ones(d), requires_grad=True)
        params[f"{prefix}.attn.wq"] = normal((d, d), INIT_STD)
        params[f"{prefix}.attn.wk"] = normal((d, d), INIT_STD)
        params[f"{prefix}.attn.wv"] = normal((d, d), INIT_STD)
        params[f"{prefix}.attn.wo"] = normal((d, d), residual_std)
        params[f"{prefix}.ffn_norm"] = nx.Tensor(np.ones(d), requires_grad=True)
        params[f"{prefix}.ffn.w1"] = normal((d, m * d), INIT_STD)
        params[f"{prefix}.ffn.w2"] = normal((m * d, d), residual_std)
    params["backbone.final_norm"] = nx.Tensor(np.ones(d), requires_grad=True)
    # He init: the head reads rms-normed features through a ReLU, and the
    # 0.02 backbone std would leave it orders of magnitude too quiet.
    params["head.w1"] = normal((d, d // 2), math.sqrt(2.0 / d))
    params["head.b1"] = nx.Tensor(np.zeros(d // 2), requires_grad=True)
    params["head.w2"] = nx.Tensor(np.zeros((d // 2, 2)), requires_grad=True)
    params["head.b2"] = nx.Tensor(np.zeros(2), requires_grad=True)
    return Model(cfg, params, lora=None)


def attach_lora(model: Model, lcfg: LoraConfig, seed: int) -> Model:
    """Freeze the backbone and add fresh adapters; returns a new Model.

    Weights are copied, so the input model is untouched and several adapted
    copies can train independently. A ~ N(0, 0.02^2), B = 0: the adapted
    model's forward equals the base model's until the first update.
    """
    if model.adapted:
        raise AlreadyAdapted("model already has LoRA adapters")
    rng = np.random.default_rng(seed)
    cfg = model.config
    d, r = cfg.d_model, lcfg.rank
    params: dict[str, nx.Tensor] = {}
    for name, tensor in model.params.items():
        frozen = name.startswith("backbone.")
        params[name] = nx.Tensor(tensor.data.copy(), requires_grad=not frozen)
    for i in range(cfg.n_layers):
        for target in LORA_TARGETS:
            prefix = f"adapter.layers.{i}.{target}"
            params[f"{prefix}.a"] = nx.Tensor(rng.normal(0.0, INIT_STD, (d, r)), requires_grad=True)
            params[f"{prefix}.b"] = nx.Tensor(np.zeros((r, d)), requires_grad=True)
    return Model(cfg, params, lora=lcfg)


def pool_last_token(hidden: nx.Tensor, mask: np.ndarray) -> nx.Tensor:
    """hidden[i, L_i - 1, :] with L_i the mask row sum."""
    lengths = np.asarray(mask).sum(axis=1).astype(np.int64)
    if (lengths < 1).any():
        raise EmptyMaskRow("attention mask has an all-zero row")
    return nx.take_per_row(hidden, lengths - 1)


def _attention_bias(mask: np.ndarray) -> np.ndarray:
    """Additive (B, 1, L, L) bias: causal upper triangle and padded keys
    get -1e30, which underflows to an exact 0 attention weight after softmax."""
    B, L = mask.shape
    neg = -1e30
    causal = np.triu(np.full((L, L), neg), k=1)
    key_pad = (1.0 - mask)[:, None, None, :] * neg
    return causal[None, None, :, :] + key_pad


def forward_batch(
    model, batch: Batch, rng: Optional[np.random.Generator] = None
) -> tuple[nx.Tensor, nx.Tensor]:
    """Predictions (B, 2) and final-layer hidden states (B, L, d).

    Passing an rng enables LoRA dropout (training); without it the forward is
    fully deterministic. The batch is sliced to its true maximum length first,
    so appending padding can never change any output bit.
    """
    cfg: ModelConfig = model.config
    lora: Optional[LoraConfig] = model.lora
    mask = np.asarray(batch.attention_mask, dtype=np.float64)
    lengths = mask.sum(axis=1).astype(np.int64)
    if (lengths < 1).any():
        raise EmptyMaskRow("attention mask has an all-zero row")
    true_max = int(lengths.max())
    if true_max > cfg.max_seq_len:
        raise SequenceTooLong(f"sequence length {true_max} > max_seq_len {cfg.max_seq_len}")
    ids = np.asarray(batch.ids)[:, :true_max]
    mask = mask[:, :true_max]
    B, L = ids.shape
    H, dh = cfg.n_heads, cfg.head_dim

    cos = model._rope_cos[:L]
    sin = model._rope_sin[:L]
    bias = nx.Tensor(_attention_bias(mask))
    inv_sqrt_dh = 1.0 / math.sqrt(dh)

    def project(x: nx.Tensor, layer: int, target: str) -> nx.Tensor:
        w = model.weight(f"backbone.layers.{layer}.attn.w{target}")
        out = nx.matmul(x, w)
        if lora is not None:
            xin = x
            if rng is not None and lora.dropout > 0.0:
                keep = (rng.random(x.shape) >= lora.dropout) / (1.0 - lora.dropout)
                xin = nx.mul(x, nx.Tensor(keep))
            a = model.weight(f"adapter.layers.{layer}.{target}.a")
            b = model.weight(f"adapter.layers.{layer}.{target}.b")
            out = nx.add(out, nx.scale(nx.matmul(nx.matmul(xin, a), b), lora.scaling))
        return out

    def split_heads(x: nx.Tensor) -> nx.Tensor:
        return nx.swapaxes(nx.reshape(x, (B, L, H, dh)), 1, 2)

    h = nx.embedding_lookup(model.weight("backbone.embed"), ids)
    for layer in range(cfg.n_layers):
        prefix = f"backbone.layers.{layer}"
        x = nx.rms_norm(h, model.weight(f"{prefix}.attn_norm"))
        q = nx.rope_rotate(split_heads(project(x, layer, "q")), cos, sin)
        k = nx.rope_rotate(split_heads(project(x, layer, "k")), cos, sin)
        v = split_heads(project(x, layer, "v"))
        scores = nx.scale(nx.matmul(q, nx.swapaxes(k, 2, 3)), inv_sqrt_dh)
        probs = nx.softmax_rows(nx.add(scores, bias))
        ctx = nx.reshape(nx.swapaxes(nx.matmul(probs, v), 1, 2), (B, L, cfg.d_model))
        h = nx.add(h, project(ctx, layer, "o"))
        x = nx.rms_norm(h, model.weight(f"{prefix}.ffn_norm"))
        ff = nx.matmul(nx.silu(nx.matmul(x, model.weight(f"{prefix}.ffn.w1"))), model.weight(f"{prefix}.ffn.w2"))
        h = nx.add(h, ff)

    hidden = nx.rms_norm(h, model.weight("backbone.final_norm"))
    z = pool_last_token(hidden, mask)
    a1 = nx.relu(nx.add(nx.matmul(z, model.weight("head.w1")), model.weight("head.b1")))
    preds = nx.add(nx.matmul(a1, model.weight("head.w2")), model.weight("head.b2"))
    return preds, hidden


def count_parameters(model) -> dict[str, float]:
    total = sum(t.size for _, t in model.named_parameters())
    trainable = sum(t.size for _, t in model.named_parameters() if t.requires_grad)
    return {
        "total": int(total),
        "trainable": int(trainable),
        "trainable_fraction": trainable / total,
    }


# ---------------------------------------------------------------------------
# Quantization
# ---------------------------------------------------------------------------


def _round_half_away(x: np.ndarray) -> np.ndarray:
    return np.copysign(np.floor(np.abs(x) + 0.5), x)


def quantize_rows(w: np.ndarray, bits: int) -> tuple[np.ndarray, np.ndarray]:
    """Symmetric per-row quantization: scale = max|row|/qmax; zero rows get
    scale 1 and all-zero codes. Codes returned as int8 in [-qmax, qmax]."""
    if bits not in (8, 4):
        raise UnsupportedBits(f"supported widths are 8 and 4, got {bits}")
    qmax = 127 if bits == 8 else 7
    scales = np.abs(w).max(axis=1) / qmax
    scales = np.where(scales == 0.0, 1.0, scales).astype(np.float32)
    codes = _round_half_away(w / scales[:, None].astype(np.float64)).astype(np.int8)
    return codes, scales


def dequantize_rows(codes: np.ndarray, scales: np.ndarray) -> np.ndarray:
    return codes.astype(np.float64) * scales[:, None].astype(np.float64)


def pack_int4(codes: np.ndarray) -> np.ndarray:
    """Two int4 codes per byte, offset by +8 into [0, 15]; row-major order."""
    flat = (codes.astype(np.int16).reshape(-1) + 8).astype(np.uint8)
    if flat.size % 2:
        flat = np.concatenate([flat, np.zeros(1, dtype=np.uint8)])
    return (flat[0::2] << 4) | flat[1::2]


def unpack_int4(packed: np.ndarray, n: int) -> np.ndarray:
    high = (packed >> 4).astype(np.int16) - 8
    low = (packed & 0x0F).astype(np.int16) - 8
    flat = np.empty(packed.size * 2, dtype=np.int16)
    flat[0::2] = high
    flat[1::2] = low
    return flat[:n].astype(np.int8)


@dataclass
class QuantizedMatrix:
    shape: tuple[int, int]
    bits: int
    scales: np.ndarray  # (rows,) float32
    codes: np.ndarray  # int8 (rows, cols) for 8-bit, packed uint8 for 4-bit

    def dequantize(self) -> np.ndarray:
        if self.bits == 8:
            codes = self.codes
        else:
            codes = unpack_int4(self.codes, self.shape[0] * self.shape[1]).reshape(self.shape)
        return dequantize_rows(codes, self.scales)

    @property
    def storage_bytes(self) -> int:
        return self.codes.nbytes + self.scales.nbytes


class QuantizedModel:
    """Backbone matrices quantized; norms, adapters, and head stay float."""

    def __init__(self, config: ModelConfig, lora: Optional[LoraConfig],
                 quantized: dict[str, QuantizedMatrix], float_params: dict[str, nx.Tensor],
                 bits: int):
        self.config = config
        self.lora = lora
        self.quantized = quantized
        self.float_params = float_params
        self.bits = bits
        self._rope_cos, self._rope_sin = _rope_tables(config)

    @property
    def adapted(self) -> bool:
        return self.lora is not None

    def weight(self, name: str) -> nx.Tensor:
        qm = self.quantized.get(name)
        if qm is not None:
            return nx.Tensor(qm.dequantize())
        return self.float_params[name]

    def named_parameters(self) -> Iterator[tuple[str, nx.Tensor]]:
        for name, qm in self.quantized.items():
            yield name, self.weight(name)
        yield from self.float_params.items()


def quantize_backbone(model: Model, bits: int) -> QuantizedModel:
    """Quantize every 2-D backbone matrix; requires a frozen backbone."""
    if bits not in (8, 4):
        raise UnsupportedBits(f"supported widths are 8 and 4, got {bits}")
    if not model.adapted:
        raise ConfigError("quantize_backbone expects a frozen (adapted) backbone")
    quantized: dict[str, QuantizedMatrix] = {}
    float_params: dict[str, nx.Tensor] = {}
    for name, tensor in model.params.items():
        if name.startswith("backbone.") and tensor.data.ndim == 2:
            codes, scales = quantize_rows(tensor.data, bits)
            stored = codes if bits == 8 else pack_int4(codes)
            quantized[name] = QuantizedMatrix(
                shape=tensor.data.shape, bits=bits, scales=scales, codes=stored
            )
        else:
            float_params[name] = tensor
    return QuantizedModel(model.config, model.lora, quantized, float_params, bits)


# ---------------------------------------------------------------------------
# Checkpoint helpers (format defined in numerics)
# ---------------------------------------------------------------------------


def save_weights(model: Model, path, only_trainable: bool = False) -> None:
    """Write weights; with only_trainable, adapt-mode checkpoints hold just
    the adapter and head tensors."""
    tensors = {
        name: t for name, t in model.params.items() if t.requires_grad or not only_trainable
    }
    nx.save_checkpoint(path, tensors)


def load_weights(model: Model, path) -> Model:
    """Load a checkpoint into matching parameter names, in place."""
    loaded = nx.load_checkpoint(path)
    for name, arr in loaded.items():
        if name not in model.params:
            raise ConfigError(f"checkpoint tensor {name!r} has no home in this model")
        if model.params[name].data.shape != arr.shape:
            raise ConfigError(
                f"checkpoint tensor {name!r} shape {arr.shape} != {model.params[name].data.shape}"
            )
        model.params[name].data = arr
    return model
