"""RF simulator: presets, geometry, physics oracles, dataset generation."""

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from locaris.errors import ConfigError, UnknownPreset
from locaris.simulator import (
    SPEED_OF_LIGHT_M_PER_NS, EnvironmentSpec, build_environment, ftm_at,
    gen_dataset, preset, rssi_at, simulate_to_files,
)
from locaris.telemetry import load_split


def micro_spec(**overrides):
    base = dict(
        name="micro", width=6.0, height=4.0, n_aps=2,
        ap_positions=((0.0, 0.0), (6.0, 4.0)), regime="los",
        path_loss_exponent=2.0, shadowing_sigma_db=0.0,
        ftm_noise_sigma_ns=0.0, samples_per_rp=2, grid_spacing=1.0,
    )
    base.update(overrides)
    return EnvironmentSpec(**base)


class TestPresets:
    def test_table_values(self):
        lecture = preset("lecture")
        assert (lecture.width, lecture.height) == (15.0, 14.5)
        assert lecture.n_aps == 5 and lecture.regime == "los"
        assert (lecture.n_rps, lecture.train_rps) == (120, 88)

        office = preset("office")
        assert (office.width, office.height) == (18.0, 5.5)
        assert office.n_aps == 5 and office.regime == "mixed"
        assert (office.n_rps, office.train_rps) == (108, 81)

        corridor = preset("corridor")
        assert (corridor.width, corridor.height) == (35.0, 6.0)
        assert corridor.n_aps == 4 and corridor.regime == "nlos"
        assert (corridor.n_rps, corridor.train_rps) == (114, 85)

    def test_corner_ap_layout(self):
        corridor = preset("corridor")
        assert set(corridor.ap_positions) == {
            (0.0, 0.0), (35.0, 0.0), (0.0, 6.0), (35.0, 6.0)}
        lecture = preset("lecture")
        assert (7.5, 7.25) in lecture.ap_positions

    def test_unknown(self):
        with pytest.raises(UnknownPreset):
            preset("warehouse")


class TestSpecValidation:
    def test_ap_outside_bounds(self):
        with pytest.raises(ConfigError):
            micro_spec(ap_positions=((0.0, 0.0), (7.0, 4.0)))

    def test_ap_count_mismatch(self):
        with pytest.raises(ConfigError):
            micro_spec(n_aps=3)

    def test_bad_regime(self):
        with pytest.raises(ConfigError):
            micro_spec(regime="underwater")

    def test_uppercase_name(self):
        with pytest.raises(ConfigError):
            micro_spec(name="Micro")


class TestGeometry:
    def test_grid_covers_extent(self):
        env = build_environment(micro_spec())
        xs = [p[0] for p in env.rps]
        ys = [p[1] for p in env.rps]
        assert min(xs) == 0.0 and max(xs) == 6.0
        assert min(ys) == 0.0 and max(ys) == 4.0
        assert len(env.rps) == 7 * 5

    def test_rp_subset_is_spec_determined(self):
        spec = preset("lecture")
        a = build_environment(spec, seed=0)
        b = build_environment(spec, seed=99)
        assert a.rps == b.rps
        assert len(a.rps) == 120

    def test_too_many_rps(self):
        with pytest.raises(ConfigError):
            build_environment(micro_spec(n_rps=1000))


class TestPhysics:
    def test_rssi_log_distance_oracle(self):
        # -40 - 10*2*log10(d), noise off
        spec = micro_spec()
        rng = np.random.default_rng(0)
        got = rssi_at(spec, 0, (3.0, 0.0), rng)
        assert got == round(-40.0 - 20.0 * math.log10(3.0))

    def test_rssi_clamped(self):
        spec = micro_spec(path_loss_exponent=8.0)
        rng = np.random.default_rng(0)
        assert rssi_at(spec, 0, (6.0, 4.0), rng) == -104
        near = micro_spec(ref_power_dbm=10.0)
        assert rssi_at(near, 0, (0.0, 0.0), rng) == 0

    def test_ftm_two_way_time_oracle(self):
        spec = micro_spec()
        rng = np.random.default_rng(0)
        d = 5.0
        want = round(2.0 * d / SPEED_OF_LIGHT_M_PER_NS)
        assert ftm_at(spec, 0, (3.0, 4.0), rng) == want

    def test_nlos_adds_positive_delay(self):
        los = micro_spec()
        nlos = micro_spec(regime="nlos", nlos_delay_mean_ns=25.0)
        pos = (3.0, 4.0)
        los_vals = [ftm_at(los, 0, pos, np.random.default_rng(i)) for i in range(200)]
        nlos_vals = [ftm_at(nlos, 0, pos, np.random.default_rng(i)) for i in range(200)]
        assert np.mean(nlos_vals) > np.mean(los_vals) + 10
        assert all(v >= l for v, l in zip(nlos_vals, los_vals))

    def test_mixed_regime_also_delayed(self):
        mixed = micro_spec(regime="mixed", nlos_delay_mean_ns=25.0)
        los = micro_spec()
        pos = (1.0, 1.0)
        delta = np.mean([
            ftm_at(mixed, 0, pos, np.random.default_rng(i))
            - ftm_at(los, 0, pos, np.random.default_rng(i))
            for i in range(300)
        ])
        assert delta == pytest.approx(25.0, abs=5.0)

    @given(st.floats(0.5, 7.0), st.floats(0.0, 4.0))
    @settings(max_examples=60)
    def test_rssi_monotone_in_distance(self, x, y):
        # With noise off, farther from AP0 at the origin means weaker.
        spec = micro_spec(width=8.0, ap_positions=((0.0, 0.0), (8.0, 4.0)))
        rng = np.random.default_rng(0)
        near = rssi_at(spec, 0, (x * 0.5, y * 0.5), rng)
        far = rssi_at(spec, 0, (x, y), rng)
        assert far <= near


class TestGenDataset:
    def test_split_counts_and_determinism(self):
        spec = preset("corridor")
        split = gen_dataset(spec, seed=0)
        assert len(split.train) == 85 * 60
        assert len(split.test) == (114 - 85) * 60
        again = gen_dataset(spec, seed=0)
        assert split.train[0] == again.train[0]
        assert split.test[-1] == again.test[-1]

    def test_seed_changes_measurements_not_geometry(self):
        spec = micro_spec(shadowing_sigma_db=2.0)
        a = gen_dataset(spec, seed=0)
        b = gen_dataset(spec, seed=1)
        assert {s.position for s in a.train} | {s.position for s in a.test} \
            == {s.position for s in b.train} | {s.position for s in b.test}
        assert any(x != y for x, y in zip(a.train, b.train))

    def test_whole_rp_split(self):
        split = gen_dataset(micro_spec(), seed=3)
        train_rps = {s.position for s in split.train}
        test_rps = {s.position for s in split.test}
        assert train_rps.isdisjoint(test_rps)

    def test_sample_structure(self):
        split = gen_dataset(micro_spec(), seed=0)
        sample = split.train[0]
        assert sample.ap_ids == (1, 2)
        assert sample.metadata["environment"] == "micro"
        assert all(r.rssi is not None and r.ftm_rtt is not None
                   for r in sample.readings)


class TestFileEmission:
    def test_round_trip_through_ingest(self, tmp_path):
        spec = micro_spec(shadowing_sigma_db=1.0)
        paths = simulate_to_files(spec, seed=0, out_dir=tmp_path)
        split = gen_dataset(spec, seed=0)
        loaded = load_split(paths["train"], paths["test"])
        assert len(loaded.train) == len(split.train)
        got = loaded.train[0]
        want = split.train[0]
        assert got.readings == want.readings
        assert got.position == pytest.approx(want.position, abs=1e-4)
        assert got.metadata["environment"] == "micro"
