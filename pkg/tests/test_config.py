import pytest

from genckpt.bandwidth import ConstantCongestion, LogNormalCongestion, TraceCongestion
from genckpt.config import ConfigError, GenckptConfig, load_config, parse_bytes, parse_config, parse_duration
from genckpt.precious import Classification, classify

GiB = 1 << 30


def test_defaults():
    cfg = parse_config("")
    assert cfg == GenckptConfig()
    assert cfg.bandwidth.base_rate == 1.5 * GiB and cfg.keep_k == 2
    assert load_config(None) == cfg


@pytest.mark.parametrize("text,want", [("10", 10.0), ("10s", 10.0), ("10m", 600.0), ("48h", 172800.0), (" 1.5m ", 90.0)])
def test_durations(text, want):
    assert parse_duration(text) == want


@pytest.mark.parametrize("text,want", [("1.5GiB", 1.5 * GiB), ("20MiB", 20 << 20), ("4KiB", 4096), ("7B", 7), ("100", 100)])
def test_sizes(text, want):
    assert parse_bytes(text) == want


def test_full_file(tmp_path):
    path = tmp_path / "p.ini"
    path.write_text(
        "[policy]\nmode = combined ; both triggers\nperiod = 10m\nwindow = 5\nwalltime_limit = 6h\n"
        "[bandwidth]\nbase_rate = 1GiB\ncongestion = lognormal\nmu = -0.2\nsigma = 0.3\nseed = 4\n"
        "[precious]\nprefixes = tmp_, scratch_\nckpt_enabled = yes\n"
        "[store]\nkeep_k = 3\nbarrier_timeout = 2m\n"
    )
    cfg = load_config(str(path))
    assert (cfg.policy.mode, cfg.policy.period, cfg.policy.window, cfg.policy.walltime_limit) == ("combined", 600.0, 5, 21600.0)
    assert cfg.bandwidth.base_rate == GiB
    assert isinstance(cfg.bandwidth.congestion, LogNormalCongestion)
    assert classify("scratch_x", cfg.precious) is Classification.PRECIOUS
    assert classify("out.fa", cfg.precious) is not Classification.PRECIOUS
    assert (cfg.keep_k, cfg.barrier_timeout) == (3, 120.0)


def test_trace_and_constant():
    cfg = parse_config("[bandwidth]\ncongestion = trace\nfactors = 1.0, 0.5\ninterval = 30\n")
    assert isinstance(cfg.bandwidth.congestion, TraceCongestion)
    assert cfg.bandwidth.congestion.factor(31) == 0.5
    cfg = parse_config("[bandwidth]\nvalue = 0.25\n")
    assert cfg.bandwidth.congestion == ConstantCongestion(0.25)


@pytest.mark.parametrize("text", [
    "[policy\nmode = x",
    "[policy]\nwindow = ten\n",
    "[policy]\nperiod = soon\n",
    "[bandwidth]\ncongestion = weather\n",
    "[bandwidth]\ncongestion = trace\n",
    "[bandwidth]\nvalue = 2.0\n",
])
def test_bad_config(text):
    with pytest.raises(ConfigError):
        parse_config(text)


def test_missing_file(tmp_path):
    with pytest.raises(ConfigError):
        load_config(str(tmp_path / "nope.ini"))
