import math

import pytest
import yaml
from hypothesis import given, settings
from hypothesis import strategies as st

from selforg.config import (
    ConfigError, ExperimentConfig, config_from_mapping, config_to_mapping, dump_config, load_config, parse_quantity,
)
from selforg.constants import KHZ, MHZ, US


def test_units():
    assert parse_quantity("80 MHz", "frequency") == pytest.approx(2 * math.pi * 80e6)
    assert parse_quantity("-1.9 MHz", "frequency") == pytest.approx(-1.9 * MHZ)
    assert parse_quantity("93 kHz", "frequency") == pytest.approx(93 * KHZ)
    assert parse_quantity("35 uK", "temperature") == pytest.approx(35e-6)
    assert parse_quantity("35 μK", "temperature") == pytest.approx(35e-6)
    assert parse_quantity("5 us", "time") == pytest.approx(5 * US)
    assert parse_quantity("780 nm", "length") == pytest.approx(780e-9)
    assert parse_quantity("0.25 lambda", "length", wavelength=780e-9) == pytest.approx(195e-9)
    assert parse_quantity("3e5 1/s", "rate") == pytest.approx(3e5)
    assert parse_quantity("2 1/ms", "rate") == pytest.approx(2e3)


@pytest.mark.parametrize("text,dim", [("80", "frequency"), ("80 MHz", "time"), ("fast", "time"), ("5 parsec", "length")])
def test_bad_quantities_name_the_field(text, dim):
    with pytest.raises(ConfigError) as err:
        parse_quantity(text, dim, "delta_pa")
    assert err.value.field == "delta_pa"


def test_unknown_key_rejected():
    with pytest.raises(ConfigError, match="bogus"):
        config_from_mapping({"bogus": "1 MHz"})


@pytest.mark.parametrize("changes,field", [
    ({"n_atoms": 0}, "n_atoms"),
    ({"temperature": -1e-6}, "temperature"),
    ({"spacing": 1e-6}, "spacing"),
    ({"dims": 2}, "dims"),
    ({"record_time": 10e-6}, "record_time"),
    ({"friction": -1.0}, "friction"),
    ({"delta_pa": 0.0}, "delta_pa"),
])
def test_invariants(changes, field):
    with pytest.raises(ConfigError) as err:
        ExperimentConfig(**changes)
    assert err.value.field == field


def test_yaml_file(tmp_path):
    p = tmp_path / "c.yaml"
    p.write_text("n_atoms: 14\ndelta_pa: -60 MHz\ntemperature: 20 uK\nheating: false\n")
    cfg = load_config(p)
    assert cfg.n_atoms == 14 and cfg.heating is False
    assert cfg.delta_pa == pytest.approx(-60 * MHZ)
    assert load_config(_dump(tmp_path, cfg)) == cfg


def _dump(tmp_path, cfg):
    q = tmp_path / "d.yaml"
    q.write_text(dump_config(cfg))
    return q


def test_digest_tracks_physics_fields():
    a = ExperimentConfig()
    assert a.digest() == ExperimentConfig().digest()
    assert a.digest() != a.replace(temperature=36e-6).digest()
    assert a.digest() != a.replace(n_atoms=21).digest()


configs = st.builds(
    ExperimentConfig,
    n_atoms=st.integers(1, 40),
    rabi_peak=st.floats(0, 100 * MHZ),
    delta_pa=st.floats(-200 * MHZ, -1 * MHZ),
    delta_pc=st.floats(-10 * MHZ, 10 * MHZ),
    temperature=st.floats(0, 100e-6),
    tweezer_bias=st.floats(-200e-9, 200e-9),
    heating=st.booleans(),
    friction=st.floats(0, 1e6),
    dims=st.sampled_from([1, 3]),
)


@settings(max_examples=80, deadline=None)
@given(cfg=configs)
def test_round_trip_is_idempotent(cfg):
    once = config_from_mapping(yaml.safe_load(dump_config(cfg)))
    assert once == cfg
    assert config_to_mapping(once) == config_to_mapping(cfg)
