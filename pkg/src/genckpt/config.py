"""Policy configuration files.

INI syntax (``configparser``); every section and key is optional::

    [policy]
    mode = periodic            ; periodic | app_initiated | walltime_only | combined
    period = 10m               ; durations take s, m, h suffixes (plain numbers are seconds)
    window = 10
    walltime_limit = 48h
    safety_factor = 1.5
    percentile = 0.05
    metric = sum               ; sum | footprint | precious
    start_time = 0

    [bandwidth]
    base_rate = 1.5GiB         ; bytes per second; B, KiB, MiB, GiB suffixes
    congestion = constant      ; constant | lognormal | trace
    value = 1.0                ; constant factor
    mu = -0.4                  ; lognormal parameters
    sigma = 0.5
    interval = 60
    seed = 0
    factors = 1.0, 0.5, 0.8    ; trace factors, one per interval

    [precious]
    prefixes = tmp_
    suffixes =
    directory =
    ckpt_enabled = true
    intercept_all = false

    [store]
    keep_k = 2
    barrier_timeout =          ; empty: derived from the bandwidth model
"""

from __future__ import annotations

import configparser
from dataclasses import dataclass, field

from .bandwidth import BandwidthModel, ConstantCongestion, LogNormalCongestion, TraceCongestion
from .errors import GenckptError
from .precious import PreciousPolicy
from .scheduler import CkptPolicyCfg

GiB = 1 << 30
DEFAULT_RATE = 1.5 * GiB


class ConfigError(GenckptError, ValueError):
    pass


_SIZE = (("GiB", 1 << 30), ("MiB", 1 << 20), ("KiB", 1 << 10), ("B", 1))
_TIME = (("h", 3600.0), ("m", 60.0), ("s", 1.0))


def parse_bytes(text: str) -> float:
    text = text.strip()
    for suffix, mult in _SIZE:
        if text.endswith(suffix):
            return float(text[: -len(suffix)]) * mult
    return float(text)


def parse_duration(text: str) -> float:
    text = text.strip()
    for suffix, mult in _TIME:
        if text.endswith(suffix):
            return float(text[: -len(suffix)]) * mult
    return float(text)


def _list(text: str) -> tuple[str, ...]:
    return tuple(s.strip() for s in text.split(",") if s.strip())


@dataclass(frozen=True)
class GenckptConfig:
    policy: CkptPolicyCfg = field(default_factory=CkptPolicyCfg)
    bandwidth: BandwidthModel = field(default_factory=lambda: BandwidthModel(DEFAULT_RATE, ConstantCongestion()))
    precious: PreciousPolicy = field(default_factory=lambda: PreciousPolicy.from_flags(prefixes=("tmp_",), ckpt_enable=True))
    keep_k: int = 2
    barrier_timeout: float | None = None


def parse_config(text: str) -> GenckptConfig:
    cp = configparser.ConfigParser(inline_comment_prefixes=(";", "#"))
    try:
        cp.read_string(text)
    except configparser.Error as e:
        raise ConfigError(f"malformed config: {e}") from e
    try:
        return _build(cp)
    except ConfigError:
        raise
    except (KeyError, ValueError, GenckptError) as e:
        raise ConfigError(f"bad config value: {e}") from e


def load_config(path: str | None) -> GenckptConfig:
    if path is None:
        return GenckptConfig()
    try:
        with open(path, encoding="utf-8") as f:
            return parse_config(f.read())
    except OSError as e:
        raise ConfigError(f"cannot read config {path}: {e}") from e


def _build(cp: configparser.ConfigParser) -> GenckptConfig:
    kw = {}
    if cp.has_section("policy"):
        s = cp["policy"]
        pol = {}
        for key in ("mode", "metric"):
            if key in s:
                pol[key] = s[key].strip()
        for key in ("period", "walltime_limit", "start_time"):
            if key in s:
                pol[key] = parse_duration(s[key])
        if "window" in s:
            pol["window"] = s.getint("window")
        for key in ("safety_factor", "percentile"):
            if key in s:
                pol[key] = s.getfloat(key)
        kw["policy"] = CkptPolicyCfg(**pol)

    if cp.has_section("bandwidth"):
        s = cp["bandwidth"]
        rate = parse_bytes(s.get("base_rate", str(DEFAULT_RATE)))
        kind = s.get("congestion", "constant").strip()
        if kind == "constant":
            cong = ConstantCongestion(s.getfloat("value", 1.0))
        elif kind == "lognormal":
            cong = LogNormalCongestion(
                s.getfloat("mu", -0.4), s.getfloat("sigma", 0.5),
                parse_duration(s.get("interval", "60")), s.getint("seed", 0),
            )
        elif kind == "trace":
            factors = tuple(float(x) for x in _list(s.get("factors", "")))
            if not factors:
                raise ConfigError("trace congestion needs factors")
            cong = TraceCongestion(factors, parse_duration(s.get("interval", "60")))
        else:
            raise ConfigError(f"unknown congestion model {kind!r}")
        kw["bandwidth"] = BandwidthModel(rate, cong)

    if cp.has_section("precious"):
        s = cp["precious"]
        kw["precious"] = PreciousPolicy.from_flags(
            prefixes=_list(s.get("prefixes", "")),
            suffixes=_list(s.get("suffixes", "")),
            precious_dir=s.get("directory", "").strip() or None,
            ckpt_enable=s.getboolean("ckpt_enabled", False),
            intercept_all=s.getboolean("intercept_all", False),
        )

    if cp.has_section("store"):
        s = cp["store"]
        if "keep_k" in s:
            kw["keep_k"] = s.getint("keep_k")
        if s.get("barrier_timeout", "").strip():
            kw["barrier_timeout"] = parse_duration(s["barrier_timeout"])
    return GenckptConfig(**kw)
