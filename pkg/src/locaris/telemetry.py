"""Domain types for Wi-Fi telemetry and the prompt serialization layer.

A measurement sample is a set of per-AP readings (FTM round-trip time in
nanoseconds, RSSI in dBm, either may be absent), a ground-truth position in
meters, and optional string metadata. Samples serialize to a fixed textual
prompt format:

    AP1 RTT: 8667 AP2 RTT: 12334 AP1 RSS: -45 AP2 RSS: -60 ENVIRONMENT: lecture

All FTM fields come first (ascending ap_id), then all RSSI fields (ascending
ap_id), then metadata "KEY: value" pairs in a fixed key order. Absent values
produce no placeholder text at all. Coordinates are regression targets and
are never serialized.

Two CSV layouts are ingested: a survey-style layout with per-AP RSSI columns
(sentinel 100 = missing) and a ranging layout with paired RTT/RSS columns
(empty cell = missing). Both flow into the same TelemetrySample type.
"""

from __future__ import annotations

import csv
import math
import re
from dataclasses import dataclass, field
from itertools import combinations
from typing import Iterable, Mapping, Optional, Sequence

from .errors import (
    AllReadingsDropped,
    DataError,
    EmptyDataset,
    RangeError,
    SchemaError,
    TooFewAPs,
)

RSSI_MIN = -104
RSSI_MAX = 0
RSSI_SENTINEL = 100  # survey-format marker for a missing RSSI measurement

# Serialization order for metadata keys; keys absent from a sample are omitted.
META_KEYS = ("building", "floor", "user", "phone", "environment")

MODALITIES = ("both", "ftm_only", "rssi_only")

_META_VALUE_RE = re.compile(r"^[a-z0-9_-]+$")


@dataclass(frozen=True)
class APReading:
    """One access point's measurements; at least one modality is present."""

    ap_id: int
    rssi: Optional[int] = None
    ftm_rtt: Optional[int] = None

    def __post_init__(self):
        if not isinstance(self.ap_id, int) or self.ap_id < 1:
            raise RangeError(f"ap_id must be a positive integer, got {self.ap_id!r}")
        if self.rssi is None and self.ftm_rtt is None:
            raise RangeError(f"AP{self.ap_id}: at least one of rssi/ftm_rtt required")
        if self.rssi is not None and not (RSSI_MIN <= self.rssi <= RSSI_MAX):
            raise RangeError(
                f"AP{self.ap_id}: rssi {self.rssi} outside [{RSSI_MIN}, {RSSI_MAX}] dBm"
            )
        if self.ftm_rtt is not None and self.ftm_rtt <= 0:
            raise RangeError(f"AP{self.ap_id}: ftm_rtt must be > 0 ns, got {self.ftm_rtt}")


@dataclass(frozen=True)
class TelemetrySample:
    """Readings (ascending ap_id), position in meters, optional metadata."""

    readings: tuple[APReading, ...]
    position: tuple[float, float]
    metadata: Mapping[str, str] = field(default_factory=dict)

    def __post_init__(self):
        if len(self.readings) == 0:
            raise RangeError("sample must have at least one reading")
        ids = [r.ap_id for r in self.readings]
        if any(b <= a for a, b in zip(ids, ids[1:])):
            raise RangeError(f"ap_ids must be strictly increasing, got {ids}")
        if len(self.position) != 2 or not all(math.isfinite(c) for c in self.position):
            raise RangeError(f"position must be two finite meters, got {self.position!r}")
        for key, value in self.metadata.items():
            if key not in META_KEYS:
                raise SchemaError(f"unknown metadata key {key!r}")
            if not isinstance(value, str) or not _META_VALUE_RE.match(value):
                raise SchemaError(
                    f"metadata value for {key!r} must match [a-z0-9_-]+, got {value!r}"
                )

    @property
    def ap_ids(self) -> tuple[int, ...]:
        return tuple(r.ap_id for r in self.readings)


@dataclass(frozen=True)
class DatasetSplit:
    """Train/test sample lists plus the set of AP ids seen anywhere."""

    train: tuple[TelemetrySample, ...]
    test: tuple[TelemetrySample, ...]
    ap_universe: frozenset[int]

    def __post_init__(self):
        for sample in (*self.train, *self.test):
            if not set(sample.ap_ids) <= self.ap_universe:
                raise RangeError(
                    f"sample ap_ids {sample.ap_ids} outside universe {sorted(self.ap_universe)}"
                )


@dataclass(frozen=True)
class AblationSpec:
    """Modality filter plus a set of APs to drop entirely."""

    modality: str = "both"
    dropped_aps: frozenset[int] = frozenset()

    def __post_init__(self):
        if self.modality not in MODALITIES:
            raise RangeError(f"modality must be one of {MODALITIES}, got {self.modality!r}")
        object.__setattr__(self, "dropped_aps", frozenset(self.dropped_aps))


NO_ABLATION = AblationSpec()


def apply_ablation(sample: TelemetrySample, spec: AblationSpec) -> TelemetrySample:
    """Drop APs and filter modalities; error if nothing survives.

    A reading whose surviving modalities are all absent disappears from the
    sample entirely (no placeholder), mirroring how absent fields serialize.
    """
    kept: list[APReading] = []
    for r in sample.readings:
        if r.ap_id in spec.dropped_aps:
            continue
        rssi = r.rssi if spec.modality in ("both", "rssi_only") else None
        rtt = r.ftm_rtt if spec.modality in ("both", "ftm_only") else None
        if rssi is None and rtt is None:
            continue
        kept.append(APReading(ap_id=r.ap_id, rssi=rssi, ftm_rtt=rtt))
    if not kept:
        raise AllReadingsDropped(
            f"ablation {spec.modality}/drop{sorted(spec.dropped_aps)} removed every reading"
        )
    return TelemetrySample(
        readings=tuple(kept), position=sample.position, metadata=dict(sample.metadata)
    )


def serialize_prompt(sample: TelemetrySample, spec: AblationSpec = NO_ABLATION) -> str:
    """Render a sample as the token prompt consumed by the model."""
    ablated = apply_ablation(sample, spec)
    fields = [f"AP{r.ap_id} RTT: {r.ftm_rtt}" for r in ablated.readings if r.ftm_rtt is not None]
    fields += [f"AP{r.ap_id} RSS: {r.rssi}" for r in ablated.readings if r.rssi is not None]
    fields += [
        f"{key.upper()}: {ablated.metadata[key]}" for key in META_KEYS if key in ablated.metadata
    ]
    return " ".join(fields)


def ap_drop_schedule(ap_universe: Iterable[int], k: int) -> list[frozenset[int]]:
    """All size-k drop sets over the AP universe, lexicographic by sorted id."""
    ids = sorted(set(ap_universe))
    if k < 1 or len(ids) <= k:
        raise TooFewAPs(f"cannot drop {k} of {len(ids)} APs")
    return [frozenset(c) for c in combinations(ids, k)]


# ---------------------------------------------------------------------------
# CSV ingestion
# ---------------------------------------------------------------------------

_SOD_AP_RE = re.compile(r"^AP(\d{3})$")
_RTT_COL_RE = re.compile(r"^RTT(\d+)$")
_RSS_COL_RE = re.compile(r"^RSS(\d+)$")

_SOD_META_COLS = {"FLOOR": "floor", "BUILDINGID": "building", "USERID": "user", "PHONEID": "phone"}


def _parse_int(value: str, column: str, row: int) -> int:
    try:
        f = float(value)
    except ValueError:
        raise SchemaError(f"row {row}: column {column} has non-numeric value {value!r}") from None
    if not math.isfinite(f) or f != int(f):
        raise SchemaError(f"row {row}: column {column} must be an integer, got {value!r}")
    return int(f)


def _parse_meters(value: str, column: str, row: int) -> float:
    try:
        f = float(value)
    except ValueError:
        raise SchemaError(f"row {row}: column {column} has non-numeric value {value!r}") from None
    if not math.isfinite(f):
        raise RangeError(f"row {row}: column {column} must be finite, got {value!r}")
    return f


def _check_rssi(value: int, ap_id: int, row: int) -> int:
    if not (RSSI_MIN <= value <= RSSI_MAX):
        raise RangeError(
            f"row {row}: AP{ap_id} RSSI {value} outside [{RSSI_MIN}, {RSSI_MAX}] dBm"
        )
    return value


def _ingest_sod(rows: list[dict[str, str]], header: Sequence[str]) -> list[TelemetrySample]:
    ap_cols: dict[str, int] = {}
    for col in header:
        m = _SOD_AP_RE.match(col)
        if m:
            ap_cols[col] = int(m.group(1))
        elif col not in ("X", "Y") and col not in _SOD_META_COLS:
            raise SchemaError(f"unknown column {col!r} for survey format")
    for required in ("X", "Y"):
        if required not in header:
            raise SchemaError(f"missing column {required!r}")
    if not ap_cols:
        raise SchemaError("no AP columns (AP001..) found")

    samples = []
    for i, row in enumerate(rows, start=1):
        readings = []
        for col, ap_id in sorted(ap_cols.items(), key=lambda kv: kv[1]):
            raw = row[col].strip()
            if raw == "":
                continue
            rssi = _parse_int(raw, col, i)
            if rssi == RSSI_SENTINEL:
                continue  # sentinel: measurement missing
            readings.append(APReading(ap_id=ap_id, rssi=_check_rssi(rssi, ap_id, i)))
        if not readings:
            raise DataError(f"row {i}: every AP measurement is missing")
        meta = {
            name: row[col].strip().lower()
            for col, name in _SOD_META_COLS.items()
            if col in row and row[col].strip() != ""
        }
        samples.append(
            TelemetrySample(
                readings=tuple(readings),
                position=(_parse_meters(row["X"], "X", i), _parse_meters(row["Y"], "Y", i)),
                metadata=meta,
            )
        )
    return samples


def _ingest_ftm_rssi(rows: list[dict[str, str]], header: Sequence[str]) -> list[TelemetrySample]:
    rtt_cols: dict[int, str] = {}
    rss_cols: dict[int, str] = {}
    for col in header:
        m = _RTT_COL_RE.match(col)
        if m:
            rtt_cols[int(m.group(1))] = col
            continue
        m = _RSS_COL_RE.match(col)
        if m:
            rss_cols[int(m.group(1))] = col
            continue
        if col not in ("X", "Y", "ENV"):
            raise SchemaError(f"unknown column {col!r} for ranging format")
    for required in ("X", "Y"):
        if required not in header:
            raise SchemaError(f"missing column {required!r}")
    ap_ids = sorted(set(rtt_cols) | set(rss_cols))
    if not ap_ids:
        raise SchemaError("no RTT/RSS columns found")

    samples = []
    for i, row in enumerate(rows, start=1):
        readings = []
        for ap_id in ap_ids:
            raw_rtt = row.get(rtt_cols.get(ap_id, ""), "").strip()
            raw_rss = row.get(rss_cols.get(ap_id, ""), "").strip()
            rtt = _parse_int(raw_rtt, f"RTT{ap_id}", i) if raw_rtt else None
            rssi = _parse_int(raw_rss, f"RSS{ap_id}", i) if raw_rss else None
            if rssi is not None:
                _check_rssi(rssi, ap_id, i)
            if rtt is not None and rtt <= 0:
                raise RangeError(f"row {i}: AP{ap_id} RTT must be > 0 ns, got {rtt}")
            if rtt is None and rssi is None:
                continue
            readings.append(APReading(ap_id=ap_id, rssi=rssi, ftm_rtt=rtt))
        if not readings:
            raise DataError(f"row {i}: every AP measurement is missing")
        env = row.get("ENV", "").strip().lower()
        meta = {"environment": env} if env else {}
        samples.append(
            TelemetrySample(
                readings=tuple(readings),
                position=(_parse_meters(row["X"], "X", i), _parse_meters(row["Y"], "Y", i)),
                metadata=meta,
            )
        )
    return samples


def ingest_dataset(path, format: str) -> DatasetSplit:
    """Load one CSV into a DatasetSplit (all rows in train, test empty).

    format "sod_csv": columns AP001..APnnn (RSSI, sentinel 100 = missing),
    X, Y, and optional FLOOR/BUILDINGID/USERID/PHONEID metadata.
    format "ftm_rssi_csv": columns RTT1..RTTn (ns), RSS1..RSSn (dBm), X, Y,
    optional ENV; an empty cell means the measurement is absent.
    """
    if format not in ("sod_csv", "ftm_rssi_csv"):
        raise SchemaError(f"unknown dataset format {format!r}")
    try:
        with open(path, newline="", encoding="utf-8") as fh:
            reader = csv.DictReader(fh)
            header = reader.fieldnames
            if header is None:
                raise EmptyDataset(f"{path}: no header row")
            rows = list(reader)
    except OSError as exc:
        raise DataError(f"cannot read {path}: {exc}") from None
    if not rows:
        raise EmptyDataset(f"{path}: no data rows")
    if format == "sod_csv":
        samples = _ingest_sod(rows, header)
    else:
        samples = _ingest_ftm_rssi(rows, header)
    universe = frozenset(ap for s in samples for ap in s.ap_ids)
    return DatasetSplit(train=tuple(samples), test=(), ap_universe=universe)


def load_split(train_path, test_path, format: str = "ftm_rssi_csv") -> DatasetSplit:
    """Load a train/test CSV pair into one DatasetSplit."""
    train = ingest_dataset(train_path, format)
    test = ingest_dataset(test_path, format)
    return DatasetSplit(
        train=train.train,
        test=test.train,
        ap_universe=train.ap_universe | test.ap_universe,
    )
