"""Telemetry domain types, prompt serialization, ingestion, ablations."""

import hypothesis.strategies as st
import pytest
from hypothesis import given, settings

from locaris.errors import (
    AllReadingsDropped, DataError, EmptyDataset, RangeError, SchemaError,
    TooFewAPs,
)
from locaris.telemetry import (
    NO_ABLATION, APReading, AblationSpec, TelemetrySample, ap_drop_schedule,
    apply_ablation, ingest_dataset, serialize_prompt,
)

from conftest import telemetry_samples

TWO_AP = TelemetrySample(
    readings=(
        APReading(ap_id=1, rssi=-45, ftm_rtt=8667),
        APReading(ap_id=2, rssi=-60, ftm_rtt=12334),
    ),
    position=(1.0, 2.0),
    metadata={},
)


class TestSerializePrompt:
    def test_both_modalities(self):
        assert serialize_prompt(TWO_AP, NO_ABLATION) == (
            "AP1 RTT: 8667 AP2 RTT: 12334 AP1 RSS: -45 AP2 RSS: -60"
        )

    def test_dropped_ap_is_omitted(self):
        spec = AblationSpec(dropped_aps=frozenset({2}))
        assert serialize_prompt(TWO_AP, spec) == "AP1 RTT: 8667 AP1 RSS: -45"

    def test_rssi_only(self):
        spec = AblationSpec(modality="rssi_only")
        assert serialize_prompt(TWO_AP, spec) == "AP1 RSS: -45 AP2 RSS: -60"

    def test_metadata_appended_in_fixed_order(self):
        sample = TelemetrySample(
            readings=(APReading(ap_id=3, rssi=-50),),
            position=(0.0, 0.0),
            metadata={"user": "u7", "building": "b1", "environment": "lab"},
        )
        assert serialize_prompt(sample) == (
            "AP3 RSS: -50 BUILDING: b1 USER: u7 ENVIRONMENT: lab"
        )

    def test_drop_everything_raises(self):
        spec = AblationSpec(dropped_aps=frozenset({1, 2}))
        with pytest.raises(AllReadingsDropped):
            serialize_prompt(TWO_AP, spec)

    @given(telemetry_samples())
    @settings(max_examples=150)
    def test_deterministic_and_well_formed(self, sample):
        a = serialize_prompt(sample)
        b = serialize_prompt(sample)
        assert a == b
        assert "  " not in a
        assert not a.endswith(" ")
        assert a.startswith("AP")

    @given(telemetry_samples())
    def test_modality_filter_excludes_other_fields(self, sample):
        ftm = AblationSpec(modality="ftm_only")
        rssi = AblationSpec(modality="rssi_only")
        has_rtt = any(r.ftm_rtt is not None for r in sample.readings)
        has_rssi = any(r.rssi is not None for r in sample.readings)
        if has_rtt:
            assert "RSS:" not in serialize_prompt(sample, ftm).split(
                "BUILDING:")[0].split("FLOOR:")[0]
        if has_rssi:
            assert "RTT:" not in serialize_prompt(sample, rssi)

    @given(telemetry_samples())
    def test_field_count_matches_present_modalities(self, sample):
        prompt = serialize_prompt(sample)
        n_rtt = sum(1 for r in sample.readings if r.ftm_rtt is not None)
        n_rssi = sum(1 for r in sample.readings if r.rssi is not None)
        assert prompt.count("RTT:") == n_rtt
        assert prompt.count("RSS:") == n_rssi


class TestDomainInvariants:
    def test_reading_needs_one_modality(self):
        with pytest.raises(DataError):
            APReading(ap_id=1)

    def test_rssi_range_enforced(self):
        with pytest.raises(RangeError):
            APReading(ap_id=1, rssi=-120)
        with pytest.raises(RangeError):
            APReading(ap_id=1, rssi=7)

    def test_rtt_positive(self):
        with pytest.raises(RangeError):
            APReading(ap_id=1, ftm_rtt=0)

    def test_sample_needs_readings(self):
        with pytest.raises(DataError):
            TelemetrySample(readings=(), position=(0.0, 0.0), metadata={})

    def test_ap_ids_strictly_increasing(self):
        readings = (APReading(ap_id=2, rssi=-50), APReading(ap_id=1, rssi=-40))
        with pytest.raises(DataError):
            TelemetrySample(readings=readings, position=(0.0, 0.0), metadata={})


class TestApplyAblation:
    def test_drop_removes_reading(self):
        out = apply_ablation(TWO_AP, AblationSpec(dropped_aps=frozenset({1})))
        assert [r.ap_id for r in out.readings] == [2]

    def test_modality_strips_other_values(self):
        out = apply_ablation(TWO_AP, AblationSpec(modality="ftm_only"))
        assert all(r.rssi is None for r in out.readings)
        assert all(r.ftm_rtt is not None for r in out.readings)

    def test_single_modality_reading_disappears_under_other_filter(self):
        sample = TelemetrySample(
            readings=(APReading(ap_id=1, rssi=-45),
                      APReading(ap_id=2, rssi=-60, ftm_rtt=100)),
            position=(0.0, 0.0), metadata={},
        )
        out = apply_ablation(sample, AblationSpec(modality="ftm_only"))
        assert [r.ap_id for r in out.readings] == [2]


class TestDropSchedule:
    def test_k1_singletons_ascending(self):
        sched = ap_drop_schedule(frozenset({1, 2, 3, 4, 5}), 1)
        assert sched == [frozenset({i}) for i in (1, 2, 3, 4, 5)]

    def test_k2_all_pairs_lexicographic(self):
        sched = ap_drop_schedule(frozenset({1, 2, 3, 4, 5}), 2)
        assert len(sched) == 10
        assert sched[0] == frozenset({1, 2})
        assert sched[-1] == frozenset({4, 5})
        as_tuples = [tuple(sorted(s)) for s in sched]
        assert as_tuples == sorted(as_tuples)

    def test_too_few_aps(self):
        with pytest.raises(TooFewAPs):
            ap_drop_schedule(frozenset({1, 2}), 2)

    @given(ids=st.sets(st.integers(1, 16), min_size=3, max_size=16))
    def test_lengths(self, ids):
        n = len(ids)
        assert len(ap_drop_schedule(frozenset(ids), 1)) == n
        assert len(ap_drop_schedule(frozenset(ids), 2)) == n * (n - 1) // 2


class TestIngest:
    def test_sod_sentinel_becomes_absent(self, tmp_path):
        path = tmp_path / "sod.csv"
        path.write_text(
            "AP001,AP002,AP003,X,Y,FLOOR,BUILDINGID,USERID,PHONEID\n"
            "-50,100,-70,1.5,2.5,1,b0,u1,p2\n"
        )
        split = ingest_dataset(path, format="sod_csv")
        sample = split.train[0]
        assert [r.ap_id for r in sample.readings] == [1, 3]
        assert sample.position == (1.5, 2.5)

    def test_sod_out_of_range_rssi(self, tmp_path):
        path = tmp_path / "sod.csv"
        path.write_text(
            "AP001,X,Y,FLOOR,BUILDINGID,USERID,PHONEID\n"
            "-120,0,0,1,b,u,p\n"
        )
        with pytest.raises(RangeError):
            ingest_dataset(path, format="sod_csv")

    def test_zero_rows_is_empty(self, tmp_path):
        path = tmp_path / "sod.csv"
        path.write_text("AP001,X,Y,FLOOR,BUILDINGID,USERID,PHONEID\n")
        with pytest.raises(EmptyDataset):
            ingest_dataset(path, format="sod_csv")

    def test_unknown_column_is_schema_error(self, tmp_path):
        path = tmp_path / "sod.csv"
        path.write_text("AP001,X,Y,WAT\n-50,0,0,1\n")
        with pytest.raises(SchemaError):
            ingest_dataset(path, format="sod_csv")

    def test_ranging_empty_cell_means_absent(self, tmp_path):
        path = tmp_path / "r.csv"
        path.write_text(
            "RTT1,RTT2,RSS1,RSS2,X,Y,ENV\n"
            "120,,-40,-62,3.0,4.0,lab\n"
        )
        split = ingest_dataset(path, format="ftm_rssi_csv")
        sample = split.train[0]
        assert sample.readings[0].ftm_rtt == 120
        assert sample.readings[1].ftm_rtt is None
        assert sample.readings[1].rssi == -62
        assert sample.metadata["environment"] == "lab"

    def test_ingest_never_serializes_sentinel(self, tmp_path):
        path = tmp_path / "sod.csv"
        rows = ["AP001,AP002,X,Y,FLOOR,BUILDINGID,USERID,PHONEID"]
        rows += [f"-{40 + i},100,{i}.0,0.0,1,b,u,p" for i in range(20)]
        path.write_text("\n".join(rows) + "\n")
        split = ingest_dataset(path, format="sod_csv")
        for sample in split.train:
            assert "RSS: 100" not in serialize_prompt(sample)
