"""Fixed-length-vector baselines: weighted KNN and a small MLP regressor.

Where the prompt model simply omits absent readings, these baselines must
fill a fixed feature layout, so missing telemetry takes extreme mask values
(-200 dBm for RSSI, 100000 ns for FTM). That contrast is the point of the
ablation experiments: the mask values sit far outside the data distribution
and parametric models degrade hard when they appear at eval time.

Feature layout: [FTM per AP ascending..., RSSI per AP ascending..., optional
environment one-hot]. Modality-filtered schemas drop whole blocks, keeping
the length fixed across fit and predict.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from . import numerics as nx
from .errors import BadK, ConfigError, EmptyTrain, UnknownAP
from .telemetry import MODALITIES, TelemetrySample

RSSI_MASK = -200.0
FTM_MASK = 100000.0


@dataclass(frozen=True)
class FeatureSchema:
    ap_universe: tuple[int, ...]
    modality: str = "both"
    env_names: tuple[str, ...] = ()

    def __post_init__(self):
        if len(self.ap_universe) == 0:
            raise ConfigError("ap_universe must be non-empty")
        if list(self.ap_universe) != sorted(set(self.ap_universe)):
            raise ConfigError("ap_universe must be strictly ascending")
        if self.modality not in MODALITIES:
            raise ConfigError(f"modality must be one of {MODALITIES}")

    @property
    def length(self) -> int:
        blocks = 2 if self.modality == "both" else 1
        return blocks * len(self.ap_universe) + len(self.env_names)


def featurize(sample: TelemetrySample, schema: FeatureSchema) -> np.ndarray:
    if not set(sample.ap_ids) <= set(schema.ap_universe):
        raise UnknownAP(
            f"sample APs {sample.ap_ids} outside schema universe {schema.ap_universe}"
        )
    by_id = {r.ap_id: r for r in sample.readings}
    parts: list[float] = []
    if schema.modality in ("both", "ftm_only"):
        for ap in schema.ap_universe:
            r = by_id.get(ap)
            parts.append(float(r.ftm_rtt) if r is not None and r.ftm_rtt is not None else FTM_MASK)
    if schema.modality in ("both", "rssi_only"):
        for ap in schema.ap_universe:
            r = by_id.get(ap)
            parts.append(float(r.rssi) if r is not None and r.rssi is not None else RSSI_MASK)
    env = sample.metadata.get("environment")
    parts.extend(1.0 if name == env else 0.0 for name in schema.env_names)
    return np.array(parts, dtype=np.float64)


def _feature_matrix(samples: Sequence[TelemetrySample], schema: FeatureSchema) -> np.ndarray:
    return np.stack([featurize(s, schema) for s in samples])


# ---------------------------------------------------------------------------
# KNN
# ---------------------------------------------------------------------------

KNN_EPS = 1e-9


@dataclass
class KnnModel:
    schema: FeatureSchema
    features: np.ndarray  # (N, F)
    positions: np.ndarray  # (N, 2)
    k: int = 3


def knn_fit(train: Sequence[TelemetrySample], schema: FeatureSchema, k: int = 3) -> KnnModel:
    if len(train) == 0:
        raise EmptyTrain("knn_fit needs at least one training sample")
    if not (1 <= k <= len(train)):
        raise BadK(f"k must lie in [1, {len(train)}], got {k}")
    return KnnModel(
        schema=schema,
        features=_feature_matrix(train, schema),
        positions=np.array([s.position for s in train], dtype=np.float64),
        k=k,
    )


def knn_predict_features(model: KnnModel, queries: np.ndarray) -> np.ndarray:
    """Inverse-distance weighted mean of the k nearest stored positions.

    Stable argsort breaks exact distance ties by lower stored index.
    """
    q = np.atleast_2d(queries)
    d2 = ((q[:, None, :] - model.features[None, :, :]) ** 2).sum(axis=2)
    dist = np.sqrt(d2)
    nearest = np.argsort(dist, axis=1, kind="stable")[:, : model.k]
    nd = np.take_along_axis(dist, nearest, axis=1)
    w = 1.0 / (nd + KNN_EPS)
    w /= w.sum(axis=1, keepdims=True)
    return (model.positions[nearest] * w[:, :, None]).sum(axis=1)


def knn_predict(model: KnnModel, sample: TelemetrySample) -> tuple[float, float]:
    pred = knn_predict_features(model, featurize(sample, model.schema)[None, :])[0]
    return float(pred[0]), float(pred[1])


def knn_predict_batch(model: KnnModel, samples: Sequence[TelemetrySample]) -> np.ndarray:
    return knn_predict_features(model, _feature_matrix(samples, model.schema))


# ---------------------------------------------------------------------------
# MLP
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class MlpConfig:
    hidden: tuple[int, int] = (64, 32)
    lr: float = 1e-2
    epochs: int = 60
    batch_size: int = 32
    seed: int = 0
    weight_decay: float = 0.0

    def __post_init__(self):
        if len(self.hidden) != 2 or min(self.hidden) < 1:
            raise ConfigError("hidden must be two positive layer widths")
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigError("epochs and batch_size must be >= 1")


@dataclass
class MlpModel:
    schema: FeatureSchema
    cfg: MlpConfig
    mean: np.ndarray
    scale: np.ndarray  # per-dim sigma with zeros replaced by 1 (passthrough)
    weights: list[nx.Tensor] = field(default_factory=list)  # w1,b1,w2,b2,w3,b3
    final_loss: float = float("nan")


def _standardize(x: np.ndarray, mean: np.ndarray, scale: np.ndarray) -> np.ndarray:
    return (x - mean) / scale


def _mlp_forward(model: MlpModel, x: np.ndarray) -> nx.Tensor:
    w1, b1, w2, b2, w3, b3 = model.weights
    h = nx.Tensor(x)
    h = nx.relu(nx.add(nx.matmul(h, w1), b1))
    h = nx.relu(nx.add(nx.matmul(h, w2), b2))
    return nx.add(nx.matmul(h, w3), b3)


def mlp_fit(
    train: Sequence[TelemetrySample], schema: FeatureSchema, cfg: MlpConfig = MlpConfig()
) -> MlpModel:
    """Two ReLU hidden layers, MSE + AdamW; standardization from train only."""
    if len(train) == 0:
        raise EmptyTrain("mlp_fit needs at least one training sample")
    feats = _feature_matrix(train, schema)
    targets = np.array([s.position for s in train], dtype=np.float64)
    mean = feats.mean(axis=0)
    sigma = feats.std(axis=0)
    scale = np.where(sigma == 0.0, 1.0, sigma)

    rng = np.random.default_rng(cfg.seed)
    h1, h2 = cfg.hidden
    dims = [(feats.shape[1], h1), (h1, h2), (h2, 2)]
    weights: list[nx.Tensor] = []
    for fan_in, fan_out in dims:
        std = math.sqrt(2.0 / fan_in)
        weights.append(nx.Tensor(rng.normal(0.0, std, (fan_in, fan_out)), requires_grad=True))
        weights.append(nx.Tensor(np.zeros(fan_out), requires_grad=True))
    # Centering the output bias on the train-target mean removes the slow
    # "find the right output scale" phase; deterministic per seed.
    weights[5].data = targets.mean(axis=0)
    w1, b1, w2, b2, w3, b3 = weights
    model = MlpModel(schema=schema, cfg=cfg, mean=mean, scale=scale,
                     weights=[w1, b1, w2, b2, w3, b3])

    x = _standardize(feats, mean, scale)
    params = model.weights
    state = nx.AdamWState.init(params, lr=cfg.lr, weight_decay=cfg.weight_decay)
    n = len(train)
    final = float("nan")
    for _ in range(cfg.epochs):
        order = rng.permutation(n)
        for start in range(0, n, cfg.batch_size):
            idx = order[start : start + cfg.batch_size]
            with nx.Tape():
                preds = _mlp_forward(model, x[idx])
                diff = nx.sub(preds, nx.Tensor(targets[idx]))
                loss = nx.scale(nx.sum_all(nx.mul(diff, diff)), 1.0 / len(idx))
                nx.grad(loss, params)
            final = loss.item()
            nx.adamw_step(params, [p.grad for p in params], state)
    model.final_loss = final
    return model


def mlp_predict_batch(model: MlpModel, samples: Sequence[TelemetrySample]) -> np.ndarray:
    x = _standardize(_feature_matrix(samples, model.schema), model.mean, model.scale)
    return _mlp_forward(model, x).data


def mlp_predict(model: MlpModel, sample: TelemetrySample) -> tuple[float, float]:
    pred = mlp_predict_batch(model, [sample])[0]
    return float(pred[0]), float(pred[1])
