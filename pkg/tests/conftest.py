"""Shared fixtures and hypothesis strategies."""

import hypothesis.strategies as st
import pytest

from locaris.simulator import gen_dataset, preset
from locaris.telemetry import APReading, TelemetrySample
from locaris.tokenizer import build_vocab

META_VALUES = st.from_regex(r"[a-z0-9_-]{1,8}", fullmatch=True)


@st.composite
def ap_readings(draw, max_ap=16):
    """One reading with at least one modality present."""
    ap_id = draw(st.integers(min_value=1, max_value=max_ap))
    has_rssi = draw(st.booleans())
    has_rtt = draw(st.booleans()) or not has_rssi
    rssi = draw(st.integers(min_value=-104, max_value=0)) if has_rssi else None
    rtt = draw(st.integers(min_value=1, max_value=500000)) if has_rtt else None
    return APReading(ap_id=ap_id, rssi=rssi, ftm_rtt=rtt)


@st.composite
def telemetry_samples(draw, max_aps=16, with_metadata=True):
    ids = draw(st.lists(st.integers(min_value=1, max_value=max_aps),
                        min_size=1, max_size=min(8, max_aps), unique=True))
    readings = []
    for ap_id in sorted(ids):
        r = draw(ap_readings(max_ap=max_aps))
        readings.append(APReading(ap_id=ap_id, rssi=r.rssi, ftm_rtt=r.ftm_rtt))
    pos = (draw(st.floats(min_value=0, max_value=100, allow_nan=False)),
           draw(st.floats(min_value=0, max_value=100, allow_nan=False)))
    metadata = {}
    if with_metadata:
        keys = draw(st.sets(st.sampled_from(
            ("building", "floor", "user", "phone", "environment"))))
        metadata = {k: draw(META_VALUES) for k in keys}
    return TelemetrySample(readings=tuple(readings), position=pos,
                           metadata=metadata)


@pytest.fixture(scope="session")
def vocab():
    return build_vocab()


@pytest.fixture(scope="session")
def lecture_split():
    return gen_dataset(preset("lecture"), seed=0)


@pytest.fixture(scope="session")
def corridor_split():
    return gen_dataset(preset("corridor"), seed=0)
