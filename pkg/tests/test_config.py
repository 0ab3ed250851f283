import pytest

from catsagg.config import SCHEMA, RunConfig
from catsagg.errors import ConfigurationError


def test_defaults_fill_every_key():
    cfg = RunConfig.from_string("")
    for sec, keys in SCHEMA.items():
        assert set(cfg.values[sec]) == set(keys)
    assert cfg.synth_config().channels == cfg.model_config().channels
    assert cfg.train_config().lr_milestones == [(250, 0.5), (375, 0.5)]


def test_values_are_parsed():
    cfg = RunConfig.from_string(
        "[data]\nh = 4\nw = 6\nchannels = 3, 5\nlattice_spacing = 2,3\n"
        "[model]\nembed_dim = 6\nheads = 3\nswap = no\n"
        "[train]\nmilestones = 10:0.1, 20:0.5\nlr = 1e-3  # inline comment\n"
    )
    m = cfg.model_config()
    assert (m.h, m.w, m.p, m.channels, m.heads, m.swap_on) == (4, 6, 6, [3, 5], 3, False)
    t = cfg.train_config()
    assert t.lr_milestones == [(10, 0.1), (20, 0.5)] and t.lr_aggregator == 1e-3
    assert cfg.synth_config().lattice_spacing == [2.0, 3.0]


@pytest.mark.parametrize(
    "text, match",
    [
        ("[modle]\nheads = 2\n", "unknown section"),
        ("[model]\nhead = 2\n", "unknown key"),
        ("[model]\nheads = two\n", "heads"),
        ("[model]\nswap = maybe\n", "swap"),
        ("no section header\n", "section"),
    ],
)
def test_bad_input_is_rejected(text, match):
    with pytest.raises(ConfigurationError, match=match):
        RunConfig.from_string(text)


def test_effective_config_round_trips(tmp_path):
    cfg = RunConfig.from_string("[train]\nbatch_size = 3\n")
    text = cfg.to_ini()
    assert "batch_size = 3" in text and "# pairs per step" in text
    (tmp_path / "c.ini").write_text(text)
    assert RunConfig.from_file(tmp_path / "c.ini").values == cfg.values
