"""Synthetic indoor-RF dataset generator.

Channel model: log-distance path loss with Gaussian shadowing for RSSI, and
two-way time of flight with Gaussian timing noise plus an exponential excess
delay for non-line-of-sight regimes for FTM round-trip times:

    RSSI = P0 - 10 * n * log10(max(d, 0.1)) + N(0, sigma^2)        [dBm, int]
    RTT  = 2 d / c + N(0, sigma_t^2) + Exp(delay_mean) if not LOS  [ns, int]

Reference points (RPs) are a seeded subsample of a regular grid; every RP
contributes samples_per_rp measurement samples; the train/test split is by
whole RPs so test positions are spatially unseen. Three presets (lecture,
office, corridor) differ in geometry, AP count, propagation regime, and
noise levels, giving a difficulty ordering los < mixed < nlos.

Geometry (grid, RP subsample, AP placement) depends only on the spec, never
on the generation seed: different seeds give different noise realizations
and splits over identical reference points.
"""

from __future__ import annotations

import json
import math
import re
import zlib
from dataclasses import asdict, dataclass
from typing import Optional, Sequence

import numpy as np

from .errors import ConfigError, UnknownPreset
from .telemetry import APReading, DatasetSplit, TelemetrySample

SPEED_OF_LIGHT_M_PER_NS = 0.299792458

_NAME_RE = re.compile(r"^[a-z][a-z0-9_-]*$")

REGIMES = ("los", "mixed", "nlos")


@dataclass(frozen=True)
class EnvironmentSpec:
    name: str
    width: float
    height: float
    n_aps: int
    ap_positions: tuple[tuple[float, float], ...]
    regime: str
    path_loss_exponent: float
    grid_spacing: float = 0.6
    ref_power_dbm: float = -40.0
    shadowing_sigma_db: float = 2.0
    ftm_noise_sigma_ns: float = 3.0
    nlos_delay_mean_ns: float = 25.0
    samples_per_rp: int = 60
    # Table-shaped presets pin exact RP counts; None uses the full grid and a
    # 75% train share.
    n_rps: Optional[int] = None
    train_rps: Optional[int] = None

    def __post_init__(self):
        if not _NAME_RE.match(self.name):
            raise ConfigError(f"environment name must be lowercase [a-z0-9_-], got {self.name!r}")
        if self.width <= 0 or self.height <= 0 or self.grid_spacing <= 0:
            raise ConfigError("width, height, grid_spacing must be positive")
        if self.regime not in REGIMES:
            raise ConfigError(f"regime must be one of {REGIMES}, got {self.regime!r}")
        if self.n_aps != len(self.ap_positions) or self.n_aps < 1:
            raise ConfigError("n_aps must match ap_positions and be >= 1")
        for x, y in self.ap_positions:
            if not (0 <= x <= self.width and 0 <= y <= self.height):
                raise ConfigError(f"AP at ({x}, {y}) outside the {self.width}x{self.height} testbed")
        if self.path_loss_exponent <= 0:
            raise ConfigError("path_loss_exponent must be positive")
        if self.shadowing_sigma_db < 0 or self.ftm_noise_sigma_ns < 0 or self.nlos_delay_mean_ns < 0:
            raise ConfigError("noise magnitudes must be nonnegative")
        if self.samples_per_rp < 1:
            raise ConfigError("samples_per_rp must be >= 1")
        if self.n_rps is not None and self.n_rps < 2:
            raise ConfigError("n_rps must be >= 2 to allow a train/test split")


@dataclass(frozen=True)
class Environment:
    """Spec plus materialized reference points and the generation seed."""

    spec: EnvironmentSpec
    rps: tuple[tuple[float, float], ...]
    seed: Optional[int] = None


def _corner_aps(width: float, height: float, with_center: bool) -> tuple[tuple[float, float], ...]:
    aps = [(0.0, 0.0), (width, 0.0), (0.0, height), (width, height)]
    if with_center:
        aps.append((round(width / 2, 4), round(height / 2, 4)))
    return tuple(aps)


def preset(name: str) -> EnvironmentSpec:
    """Three table-shaped environments; RP counts pin the sample budget."""
    if name == "lecture":
        return EnvironmentSpec(
            name="lecture", width=15.0, height=14.5,
            n_aps=5, ap_positions=_corner_aps(15.0, 14.5, True),
            regime="los", path_loss_exponent=2.0, shadowing_sigma_db=2.0,
            n_rps=120, train_rps=88,
        )
    if name == "office":
        return EnvironmentSpec(
            name="office", width=18.0, height=5.5,
            n_aps=5, ap_positions=_corner_aps(18.0, 5.5, True),
            regime="mixed", path_loss_exponent=2.7, shadowing_sigma_db=3.0,
            n_rps=108, train_rps=81,
        )
    if name == "corridor":
        return EnvironmentSpec(
            name="corridor", width=35.0, height=6.0,
            n_aps=4, ap_positions=_corner_aps(35.0, 6.0, False),
            regime="nlos", path_loss_exponent=3.3, shadowing_sigma_db=4.0,
            n_rps=114, train_rps=85,
        )
    raise UnknownPreset(f"unknown preset {name!r} (expected lecture, office, corridor)")


def _grid_points(spec: EnvironmentSpec) -> list[tuple[float, float]]:
    nx = int(math.floor(spec.width / spec.grid_spacing + 1e-9)) + 1
    ny = int(math.floor(spec.height / spec.grid_spacing + 1e-9)) + 1
    return [
        (round(i * spec.grid_spacing, 4), round(j * spec.grid_spacing, 4))
        for j in range(ny)
        for i in range(nx)
    ]


def _geometry_seed(spec: EnvironmentSpec) -> int:
    key = f"{spec.name}|{spec.width}|{spec.height}|{spec.grid_spacing}|{spec.n_rps}"
    return zlib.crc32(key.encode("utf-8"))


def build_environment(spec: EnvironmentSpec, seed: Optional[int] = None) -> Environment:
    """Materialize reference points; geometry is a function of the spec only."""
    grid = _grid_points(spec)
    n_rps = spec.n_rps if spec.n_rps is not None else len(grid)
    if n_rps > len(grid):
        raise ConfigError(
            f"{spec.name}: wants {n_rps} RPs but the grid only has {len(grid)} points"
        )
    if n_rps == len(grid):
        rps = grid
    else:
        rng = np.random.default_rng(_geometry_seed(spec))
        keep = np.sort(rng.choice(len(grid), size=n_rps, replace=False))
        rps = [grid[i] for i in keep]
    return Environment(spec=spec, rps=tuple(rps), seed=seed)


def _distance(pos: tuple[float, float], ap: tuple[float, float]) -> float:
    return math.hypot(pos[0] - ap[0], pos[1] - ap[1])


def rssi_at(spec: EnvironmentSpec, ap_index: int, pos: tuple[float, float],
            rng: np.random.Generator) -> int:
    d = _distance(pos, spec.ap_positions[ap_index])
    value = spec.ref_power_dbm - 10.0 * spec.path_loss_exponent * math.log10(max(d, 0.1))
    if spec.shadowing_sigma_db > 0:
        value += rng.normal(0.0, spec.shadowing_sigma_db)
    return int(min(0, max(-104, round(value))))


def ftm_at(spec: EnvironmentSpec, ap_index: int, pos: tuple[float, float],
           rng: np.random.Generator) -> int:
    d = _distance(pos, spec.ap_positions[ap_index])
    rtt = 2.0 * d / SPEED_OF_LIGHT_M_PER_NS
    if spec.ftm_noise_sigma_ns > 0:
        rtt += rng.normal(0.0, spec.ftm_noise_sigma_ns)
    if spec.regime != "los":
        rtt += rng.standard_exponential() * spec.nlos_delay_mean_ns
    return max(1, int(round(rtt)))


def _resolve_train_rps(spec: EnvironmentSpec, n_rps: int) -> int:
    if spec.train_rps is not None:
        if not (0 < spec.train_rps < n_rps):
            raise ConfigError(f"train_rps {spec.train_rps} must lie in (0, {n_rps})")
        return spec.train_rps
    return max(1, min(n_rps - 1, round(0.75 * n_rps)))


def gen_dataset(spec: EnvironmentSpec, seed: int) -> DatasetSplit:
    """samples_per_rp samples per RP; whole-RP seeded train/test split."""
    env = build_environment(spec, seed)
    n_rps = len(env.rps)
    train_rps = _resolve_train_rps(spec, n_rps)

    root = np.random.SeedSequence([0x51D0, seed])
    split_ss, *rp_ss = root.spawn(1 + n_rps)
    split_rng = np.random.default_rng(split_ss)
    perm = split_rng.permutation(n_rps)
    train_idx = set(int(i) for i in perm[:train_rps])

    train: list[TelemetrySample] = []
    test: list[TelemetrySample] = []
    meta = {"environment": spec.name}
    for rp_i, rp in enumerate(env.rps):
        rng = np.random.default_rng(rp_ss[rp_i])
        bucket = train if rp_i in train_idx else test
        for _ in range(spec.samples_per_rp):
            readings = []
            for ap_i in range(spec.n_aps):
                rssi = rssi_at(spec, ap_i, rp, rng)
                rtt = ftm_at(spec, ap_i, rp, rng)
                readings.append(APReading(ap_id=ap_i + 1, rssi=rssi, ftm_rtt=rtt))
            bucket.append(TelemetrySample(readings=tuple(readings), position=rp, metadata=meta))
    return DatasetSplit(
        train=tuple(train), test=tuple(test),
        ap_universe=frozenset(range(1, spec.n_aps + 1)),
    )


# ---------------------------------------------------------------------------
# CSV emission (the ranging format the telemetry module ingests)
# ---------------------------------------------------------------------------


def write_dataset_csv(samples: Sequence[TelemetrySample], path, n_aps: int) -> None:
    header = (
        [f"RTT{i}" for i in range(1, n_aps + 1)]
        + [f"RSS{i}" for i in range(1, n_aps + 1)]
        + ["X", "Y", "ENV"]
    )
    lines = [",".join(header)]
    for s in samples:
        by_id = {r.ap_id: r for r in s.readings}
        rtt = [str(by_id[i].ftm_rtt) if i in by_id and by_id[i].ftm_rtt is not None else ""
               for i in range(1, n_aps + 1)]
        rss = [str(by_id[i].rssi) if i in by_id and by_id[i].rssi is not None else ""
               for i in range(1, n_aps + 1)]
        row = rtt + rss + [f"{s.position[0]:.4f}", f"{s.position[1]:.4f}",
                           s.metadata.get("environment", "")]
        lines.append(",".join(row))
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("\n".join(lines) + "\n")


def simulate_to_files(spec: EnvironmentSpec, seed: int, out_dir) -> dict:
    """Generate, write <name>_train.csv / <name>_test.csv and a manifest."""
    from pathlib import Path

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    split = gen_dataset(spec, seed)
    train_path = out / f"{spec.name}_train.csv"
    test_path = out / f"{spec.name}_test.csv"
    write_dataset_csv(split.train, train_path, spec.n_aps)
    write_dataset_csv(split.test, test_path, spec.n_aps)
    manifest = {
        "environment": asdict(spec),
        "seed": seed,
        "files": {"train": train_path.name, "test": test_path.name},
        "counts": {"train": len(split.train), "test": len(split.test)},
        "format": "ftm_rssi_csv",
    }
    manifest_path = out / f"{spec.name}_manifest.json"
    with open(manifest_path, "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return {"train": str(train_path), "test": str(test_path), "manifest": str(manifest_path)}
