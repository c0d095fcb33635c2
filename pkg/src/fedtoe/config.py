"""Experiment configuration: sectioned ``key = value`` files with unit suffixes.

Values are converted to SI on parsing (seconds, Hz, W, W/Hz, metres) and
written back in SI with an explicit unit, so parse -> serialize -> parse is
the identity.
"""

from __future__ import annotations

import configparser
import dataclasses
import io
import re
from dataclasses import dataclass, field

from .errors import ParameterError

_SCALE = {
    "s": {"s": 1.0, "ms": 1e-3, "us": 1e-6},
    "Hz": {"Hz": 1.0, "kHz": 1e3, "MHz": 1e6, "GHz": 1e9},
    "W": {"W": 1.0, "mW": 1e-3},
    "W/Hz": {"W/Hz": 1.0},
    "m": {"m": 1.0, "km": 1e3},
    "dB": {"dB": 1.0},
}
# logarithmic units: value in dBm -> watts
_LOG = {"W": {"dBm": -30.0, "dBW": 0.0}, "W/Hz": {"dBm/Hz": -30.0, "dBW/Hz": 0.0}}
_NUMBER = re.compile(r"^\s*([-+]?(?:\d+\.?\d*|\.\d+)(?:[eE][-+]?\d+)?|[-+]?inf)\s*([A-Za-z/]*)\s*$")


def parse_quantity(text: str, unit: str) -> float:
    """``'50 ms'`` -> ``0.05`` for ``unit='s'``; a bare number is taken as SI."""
    m = _NUMBER.match(text)
    if not m:
        raise ParameterError(f"cannot parse quantity {text!r}")
    value, suffix = float(m.group(1)), m.group(2)
    if not suffix:
        return value
    if suffix in _SCALE.get(unit, {}):
        return value * _SCALE[unit][suffix]
    if suffix in _LOG.get(unit, {}):
        return 10.0 ** ((value + _LOG[unit][suffix]) / 10.0)
    raise ParameterError(f"unit {suffix!r} does not measure {unit}")


def _q(unit, default, doc=""):
    return field(default=default, metadata={"unit": unit, "doc": doc})


def _list(default):
    return field(default_factory=lambda: list(default), metadata={"list": True})


@dataclass
class ScenarioConfig:
    N: int = 100
    radius: float = _q("m", 600.0)
    seed: int = 0
    task: str = "quadratic"  # quadratic or logistic
    dim: int = 10
    heterogeneity: float = 1.0
    noise_std: float = 0.5
    hessian_spread: float = 0.0
    partition: str = "noniid"  # logistic: noniid or iid
    classes: int = 10
    classes_per_client: int = 2
    samples_per_client: int = 100
    features: int = 8


@dataclass
class ChannelConfig:
    sigma_db: float = _q("dB", 3.65)
    k_db: float = _q("dB", -31.54)
    lam: float = 3.0
    n0: float = _q("W/Hz", 10 ** ((-174.0 - 30.0) / 10))


@dataclass
class AllocatorConfig:
    q_max: float = 0.1
    tau_max: float = _q("s", 0.05)
    w_total: float = _q("Hz", 20e6)
    p_max: float = _q("W", 1.0)
    m: int = 23860
    n_groups: int = 4
    range_bits: int = 64


@dataclass
class SimSection:
    K: int = 10
    E: int = 1
    M: int = 100
    gamma: float = 0.05
    b: int = 128
    schemes: list = _list(["fedtoe-offline", "baseline1:5", "baseline3", "ideal"])
    seed: int = 0
    scheduling: str = "offline"
    participation: str = "partial"
    channel_mode: str = "bernoulli"
    retransmit: str = "resend"
    retransmit_cap: int = 10_000


@dataclass
class SweepConfig:
    tau_max: list = field(default_factory=lambda: [0.04, 0.05, 0.1, 0.2],
                          metadata={"list": True, "unit": "s"})
    total_time: float = _q("s", 10.0)  # rounds per point = total_time / tau_max


@dataclass
class BoundConfig:
    radius: float = 0.0  # ball around visited iterates for the heterogeneity constants
    mc_trials: int = 10_000_000


@dataclass
class OutputConfig:
    directory: str = "out"
    svg: bool = True


SECTIONS = {
    "scenario": ScenarioConfig,
    "channel": ChannelConfig,
    "allocator": AllocatorConfig,
    "sim": SimSection,
    "sweep": SweepConfig,
    "bound": BoundConfig,
    "output": OutputConfig,
}


@dataclass
class ExperimentConfig:
    scenario: ScenarioConfig = field(default_factory=ScenarioConfig)
    channel: ChannelConfig = field(default_factory=ChannelConfig)
    allocator: AllocatorConfig = field(default_factory=AllocatorConfig)
    sim: SimSection = field(default_factory=SimSection)
    sweep: SweepConfig = field(default_factory=SweepConfig)
    bound: BoundConfig = field(default_factory=BoundConfig)
    output: OutputConfig = field(default_factory=OutputConfig)


def _convert(f: dataclasses.Field, text: str):
    unit = f.metadata.get("unit")
    if f.metadata.get("list"):
        items = [t.strip() for t in text.split(",") if t.strip()]
        if unit:
            return [parse_quantity(t, unit) for t in items]
        return items
    if unit:
        return parse_quantity(text, unit)
    kind = type(f.default)
    if kind is bool:
        low = text.strip().lower()
        if low not in ("true", "false", "yes", "no", "1", "0"):
            raise ParameterError(f"{f.name}: expected a boolean, got {text!r}")
        return low in ("true", "yes", "1")
    if kind is int:
        return int(text)
    if kind is float:
        return float(text)
    return text.strip()


def loads(text: str) -> ExperimentConfig:
    cp = configparser.ConfigParser(interpolation=None)
    cp.optionxform = str
    cp.read_string(text)
    unknown = set(cp.sections()) - set(SECTIONS)
    if unknown:
        raise ParameterError(f"unknown config section(s): {sorted(unknown)}")
    out = {}
    for name, cls in SECTIONS.items():
        fields = {f.name: f for f in dataclasses.fields(cls)}
        kwargs = {}
        if cp.has_section(name):
            for key, value in cp.items(name):
                if key not in fields:
                    raise ParameterError(f"unknown key {name}.{key}")
                try:
                    kwargs[key] = _convert(fields[key], value)
                except ValueError as exc:
                    raise ParameterError(f"{name}.{key}: {exc}") from exc
        out[name] = cls(**kwargs)
    return ExperimentConfig(**out)


def load(path) -> ExperimentConfig:
    with open(path, encoding="utf-8") as fh:
        return loads(fh.read())


def _format(f: dataclasses.Field, value) -> str:
    unit = f.metadata.get("unit")
    if f.metadata.get("list"):
        return ", ".join(_format_scalar(v, unit) for v in value)
    if isinstance(value, bool):
        return "true" if value else "false"
    return _format_scalar(value, unit)


def _format_scalar(value, unit) -> str:
    if isinstance(value, float):
        text = repr(value)
        return f"{text} {unit}" if unit else text
    return str(value)


def dumps(cfg: ExperimentConfig) -> str:
    cp = configparser.ConfigParser(interpolation=None)
    cp.optionxform = str
    for name in SECTIONS:
        section = getattr(cfg, name)
        cp[name] = {f.name: _format(f, getattr(section, f.name))
                    for f in dataclasses.fields(section)}
    buf = io.StringIO()
    cp.write(buf)
    return buf.getvalue()


def default_text() -> str:
    return dumps(ExperimentConfig())
