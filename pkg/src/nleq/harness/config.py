"""Experiment configuration: INI sections with a fixed, strictly checked schema.

Every key has a default, so an empty file is a valid configuration. Unknown
sections or keys are rejected rather than ignored. Schema::

    [channel]     sps rolloff rrc_span_symbols nl_amplitude snr_db fir_len
                  n_streams pilot_symbols
    [code]        path                      (empty: shipped rate-0.8 code)
    [equalizer]   kind = none|volterra|nn_bp, memory, train_snr_db
                  (number, inf or "per" for per-SNR training), volterra_symbols,
                  model_path
    [nn]          n_stages n_bn total_iterations n_q n_r lambda1 lambda2
                  train_snr_db n_frames batch_frames epochs lr
                  carry_messages (keep BP check messages across stages)
    [simulation]  snr_grid frames_per_point min_errors target_ber workers
                  search_start_db search_step_db search_refine
    [sweep]       train_snr_grid moment_symbols
    [compare]     vlt_optimal_train_snr_db
    [calibration] target_ratio band_low band_high train_snr_db n_symbols
                  a_low a_high
    [run]         seed output_dir

Lists are comma separated; ``inf`` is accepted wherever a dB value is.
Comments start with ``;`` or ``#``, also after a value.
"""

from __future__ import annotations

import configparser
import math
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

from .. import chansim, ldpc, montecarlo, nnbp
from ..chansim import ChannelConfig


class ConfigError(ValueError):
    pass


def _float(v: str) -> float:
    v = v.strip().lower()
    if v in ("inf", "+inf", "infinity"):
        return math.inf
    return float(v)


def _floats(v: str) -> tuple[float, ...]:
    return tuple(_float(x) for x in v.split(",") if x.strip())


def _bool(v: str) -> bool:
    v = v.strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {v!r}")


def _train_snr(v: str):
    return "per" if v.strip().lower() == "per" else _float(v)


@dataclass(frozen=True)
class EqualizerSettings:
    kind: str = "none"
    memory: int = 4
    train_snr_db: float | str = 19.0
    volterra_symbols: int = 200_000
    model_path: str = ""


@dataclass(frozen=True)
class NnSettings:
    n_stages: int = 3
    n_bn: int = 5
    total_iterations: int = ldpc.DEFAULT_ITERATIONS
    n_q: int = 40
    n_r: int = 40
    lambda1: float = 1.0
    lambda2: float = 1.0
    train_snr_db: float = 17.0
    n_frames: int = 64
    batch_frames: int = 8
    epochs: int = 250
    lr: float = 3e-3
    carry_messages: bool = False

    def schedule(self, n_stages: int | None = None) -> nnbp.Schedule:
        return nnbp.Schedule.for_stages(n_stages or self.n_stages, self.n_bn, self.total_iterations,
                                        lambdas=(self.lambda1, self.lambda2), carry_messages=self.carry_messages)

    def hyper(self, L: int, seed: int) -> nnbp.TrainHyper:
        return nnbp.TrainHyper(self.train_snr_db, self.n_frames, self.batch_frames, self.epochs, self.lr,
                               dims=nnbp.StageDims(L, chansim.PAM8.M, self.n_q, self.n_r), seed=seed)


@dataclass(frozen=True)
class SimulationSettings:
    snr_grid: tuple[float, ...] = (17.0, 17.25, 17.5, 17.75, 18.0, 18.25, 18.5)
    frames_per_point: int = 2000
    min_errors: int = montecarlo.MIN_ERRORS
    target_ber: float = montecarlo.TARGET_BER
    workers: int = 1
    search_start_db: float = 17.5
    search_step_db: float = 0.25
    search_refine: int = 1

    def search(self) -> montecarlo.SearchSettings:
        return montecarlo.SearchSettings(self.search_start_db, self.search_step_db, self.search_refine,
                                         max_frames=self.frames_per_point, min_errors=self.min_errors,
                                         target_ber=self.target_ber)


@dataclass(frozen=True)
class SweepSettings:
    train_snr_grid: tuple[float, ...] = (15.0, 17.0, 19.0, 21.0, 24.0, 28.0, 35.0)
    moment_symbols: int = 200_000


@dataclass(frozen=True)
class CompareSettings:
    vlt_optimal_train_snr_db: float = 21.0


@dataclass(frozen=True)
class CalibrationSettings:
    target_ratio: float = 0.067
    band_low: float = 0.05
    band_high: float = 0.085
    train_snr_db: float = 19.0
    n_symbols: int = 200_000
    a_low: float = 0.6
    a_high: float = 4.0


@dataclass(frozen=True)
class ExperimentConfig:
    channel: ChannelConfig = field(default_factory=ChannelConfig)
    code_path: str = ""
    equalizer: EqualizerSettings = field(default_factory=EqualizerSettings)
    nn: NnSettings = field(default_factory=NnSettings)
    simulation: SimulationSettings = field(default_factory=SimulationSettings)
    sweep: SweepSettings = field(default_factory=SweepSettings)
    compare: CompareSettings = field(default_factory=CompareSettings)
    calibration: CalibrationSettings = field(default_factory=CalibrationSettings)
    seed: int = 0
    output_dir: str = "out"

    def __post_init__(self):
        g = self.simulation.snr_grid
        if not g or any(b <= a for a, b in zip(g, g[1:])):
            raise ConfigError("snr_grid must be non-empty and strictly increasing")
        if self.simulation.frames_per_point < 1:
            raise ConfigError("frames_per_point must be >= 1")
        if not 0 < self.simulation.target_ber < 0.5:
            raise ConfigError("target_ber must lie in (0, 0.5)")
        if self.simulation.workers < 1:
            raise ConfigError("workers must be >= 1")
        if self.equalizer.kind not in ("none", "volterra", "nn_bp"):
            raise ConfigError(f"unknown equalizer kind {self.equalizer.kind!r}")
        if not self.sweep.train_snr_grid:
            raise ConfigError("train_snr_grid must be non-empty")
        c = self.calibration
        if not c.band_low < c.target_ratio < c.band_high or not 0 < c.a_low < c.a_high:
            raise ConfigError("inconsistent calibration band or bracket")
        if self.seed < 0 or self.seed >= 2**64:
            raise ConfigError("seed must be an unsigned 64-bit integer")

    def load_code(self) -> ldpc.LdpcCode:
        if not self.code_path:
            return ldpc.default_code()
        try:
            return ldpc.read_alist(self.code_path)
        except OSError as exc:
            raise ConfigError(f"cannot read code file: {exc}") from exc

    def with_(self, **kw) -> "ExperimentConfig":
        return replace(self, **kw)


_CHANNEL_PARSERS = {
    "sps": int, "rolloff": float, "rrc_span_symbols": int, "nl_amplitude": _float, "snr_db": _float,
    "fir_len": int, "n_streams": int, "pilot_symbols": int,
}


def _parsers(cls, overrides=None):
    out = {}
    for f in fields(cls):
        t = f.type if isinstance(f.type, str) else f.type.__name__
        if "tuple" in t:
            out[f.name] = _floats
        elif t.startswith("int"):
            out[f.name] = int
        elif t.startswith("float"):
            out[f.name] = _float
        elif t.startswith("bool"):
            out[f.name] = _bool
        else:
            out[f.name] = str
    out.update(overrides or {})
    return out


_SECTIONS = {
    "equalizer": (EqualizerSettings, _parsers(EqualizerSettings, {"train_snr_db": _train_snr})),
    "nn": (NnSettings, _parsers(NnSettings)),
    "simulation": (SimulationSettings, _parsers(SimulationSettings)),
    "sweep": (SweepSettings, _parsers(SweepSettings)),
    "compare": (CompareSettings, _parsers(CompareSettings)),
    "calibration": (CalibrationSettings, _parsers(CalibrationSettings)),
}


def _read_section(cp, name, parsers):
    out = {}
    if not cp.has_section(name):
        return out
    for key, raw in cp.items(name):
        if key not in parsers:
            raise ConfigError(f"unknown key {key!r} in [{name}]")
        try:
            out[key] = parsers[key](raw)
        except ValueError as exc:
            raise ConfigError(f"bad value for {name}.{key}: {raw!r} ({exc})") from exc
    return out


def parse_config(text: str, base_dir: str | Path | None = None) -> ExperimentConfig:
    """Parse INI text; relative paths resolve against ``base_dir``."""
    cp = configparser.ConfigParser(interpolation=None, default_section="__none__",
                                   inline_comment_prefixes=(";", "#"))
    try:
        cp.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"malformed config: {exc}") from exc
    known = {"channel", "code", "run", *_SECTIONS}
    for s in cp.sections():
        if s not in known:
            raise ConfigError(f"unknown section [{s}]")
    try:
        channel = ChannelConfig(**_read_section(cp, "channel", _CHANNEL_PARSERS))
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    code = _read_section(cp, "code", {"path": str})
    run = _read_section(cp, "run", {"seed": int, "output_dir": str})
    parts = {}
    for name, (cls, parsers) in _SECTIONS.items():
        try:
            parts[name] = cls(**_read_section(cp, name, parsers))
        except TypeError as exc:
            raise ConfigError(str(exc)) from exc

    def resolve(p: str) -> str:
        if p and base_dir is not None and not Path(p).is_absolute():
            return str(Path(base_dir) / p)
        return p

    eq = parts["equalizer"]
    parts["equalizer"] = replace(eq, model_path=resolve(eq.model_path))
    return ExperimentConfig(channel=channel, code_path=resolve(code.get("path", "")), seed=run.get("seed", 0),
                            output_dir=run.get("output_dir", "out"), **parts)


def load_config(path: str | Path | None) -> ExperimentConfig:
    if path is None:
        return ExperimentConfig()
    p = Path(path)
    try:
        text = p.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config: {exc}") from exc
    return parse_config(text, p.parent)


def dump_config(cfg: ExperimentConfig) -> str:
    """INI text that parses back to ``cfg`` (paths verbatim)."""

    def fmt(v):
        if isinstance(v, tuple):
            return ", ".join(fmt(x) for x in v)
        if isinstance(v, float) and math.isinf(v):
            return "inf" if v > 0 else "-inf"
        return str(v)

    lines = ["[channel]"]
    lines += [f"{k} = {fmt(getattr(cfg.channel, k))}" for k in _CHANNEL_PARSERS]
    lines += ["", "[code]", f"path = {cfg.code_path}"]
    for name in _SECTIONS:
        obj = getattr(cfg, name)
        lines += ["", f"[{name}]"] + [f"{f.name} = {fmt(getattr(obj, f.name))}" for f in fields(obj)]
    lines += ["", "[run]", f"seed = {cfg.seed}", f"output_dir = {cfg.output_dir}"]
    return "\n".join(lines) + "\n"
