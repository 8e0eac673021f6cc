import pytest
from hypothesis import given, settings, strategies as st

from feataug.config import (ExperimentConfig, from_text, load_config, parse_override, to_text)
from feataug.errors import ConfigError


def test_defaults_validate():
    cfg = ExperimentConfig().validate()
    assert cfg.phase2.tau_s == 0.5 and cfg.phase2.lr == 0.001


def test_file_and_overrides(tmp_path):
    p = tmp_path / "c.cfg"
    p.write_text("# comment\nseed = 3\nphase2.n_a = 2  # trailing\nphase1.augment = no\n")
    cfg = load_config(p, ["phase2.n_a=4", "data.im=50"])
    assert cfg.seed == 3 and cfg.phase2.n_a == 4 and cfg.data.im == 50.0
    assert cfg.phase1.augment is False


def test_errors_cite_line_and_key(tmp_path):
    p = tmp_path / "c.cfg"
    p.write_text("seed = 1\n\nphase2.n_t = many\n")
    with pytest.raises(ConfigError, match=r"c.cfg:3 \(key 'phase2.n_t'\)"):
        load_config(p)
    p.write_text("phase9.x = 1\n")
    with pytest.raises(ConfigError, match="c.cfg:1.*unknown config key 'phase9.x'"):
        load_config(p)
    p.write_text("seed\n")
    with pytest.raises(ConfigError, match="c.cfg:1"):
        load_config(p)
    with pytest.raises(ConfigError):
        load_config(tmp_path / "missing.cfg")
    with pytest.raises(ConfigError):
        parse_override("novalue")


@pytest.mark.parametrize("bad", ["phase2.h_r_target=1.0", "phase2.tau_s=0", "phase2.n_t=0",
                                 "data.im=0.5", "loss.kind=hinge", "phase2.gamma_min=0.8",
                                 "model.channels=a,b", "phase1.batch_size=0"])
def test_invalid_values_rejected(bad):
    with pytest.raises(ConfigError):
        load_config(None, [bad])


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10**6), st.floats(0.05, 0.95), st.booleans(), st.integers(0, 5))
def test_resolved_text_round_trips(seed, tau, dump, n_a):
    cfg = load_config(None, [f"seed={seed}", f"phase2.tau_s={tau}", f"phase2.tau_g={tau}",
                             f"phase2.dump_batches={dump}", f"phase2.n_a={n_a}"])
    assert from_text(to_text(cfg)) == cfg
    assert to_text(from_text(to_text(cfg))) == to_text(cfg)
