"""Experiment pipelines behind the CLI.

Every function is a pure function of the configuration (seed included).
CSV schemas are fixed; the column tuples below are the documented contract:

* ``WATERFALL_COLUMNS``: one row per (curve, SNR point), integer counts
  alongside the derived BERs.
* ``SWEEP_COLUMNS``: one row per training SNR of the penalty sweep;
  ``SWEEP_DETAIL_COLUMNS`` adds the underlying required SNRs, the empirical
  noise figure and the nonlinearity ratio.
* ``REQUIRED_COLUMNS``: one row per system of the final comparison.
* ``NF_COLUMNS``: analytic against empirical noise figure per training SNR.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.optimize import brentq
from scipy.stats import spearmanr

from .. import chansim, ldpc, montecarlo, nnbp, noisefig, volterra
from ..chansim import ChannelConfig
from ..montecarlo import BerCurve, BerPoint, RangeError, required_snr  # noqa: F401  (re-exported)
from .config import ConfigError, ExperimentConfig

WATERFALL_COLUMNS = ("label", "snr_db", "pre_fec_ber", "post_bp_ber", "frames", "pre_bit_errors", "pre_bits",
                     "post_bit_errors", "post_bits", "frame_errors")
SWEEP_COLUMNS = ("train_snr", "ne_db", "nl_db", "total_db", "nf_db")
SWEEP_DETAIL_COLUMNS = ("train_snr", "req_nonl_db", "req_c_db", "req_a_db", "nf_db", "nf_empirical_db",
                        "nonlinearity_ratio")
REQUIRED_COLUMNS = ("label", "required_snr_db", "gain_over_no_eq_db")
NF_COLUMNS = ("train_snr", "eval_snr", "nf_db", "nf_empirical_db", "difference_db")

NO_NL, NO_EQ, VLT_PER, VLT_OPT, NN_1, NN_BP = (
    "no-NL", "no-equalizer", "VLT per-SNR", "VLT optimal", "NN 1-stage", "NN-BP")


def _fmt(v) -> str:
    if isinstance(v, str):
        return v
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    v = float(v)
    if math.isnan(v):
        return "nan"
    if math.isinf(v):
        return "inf" if v > 0 else "-inf"
    return f"{v:.6g}" if abs(v) >= 1e-3 or v == 0 else f"{v:.6e}"


def csv_text(columns, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(columns)
    for r in rows:
        w.writerow([_fmt(v) for v in r])
    return buf.getvalue()


def write_text(path: str | Path, text: str) -> Path:
    p = Path(path)
    p.parent.mkdir(parents=True, exist_ok=True)
    p.write_text(text, encoding="utf-8")
    return p


def channel_of(cfg: ExperimentConfig) -> ChannelConfig:
    return cfg.channel.with_(seed=cfg.seed)


def _log(log, msg):
    if log is not None:
        log(msg)


# ---------------------------------------------------------------------------
# Calibration
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class CalibrationResult:
    nl_amplitude: float
    ratio: float
    target_ratio: float
    train_snr_db: float
    band: tuple[float, float]
    evaluations: tuple[tuple[float, float], ...] = ()

    @property
    def in_band(self) -> bool:
        return self.band[0] <= self.ratio <= self.band[1]

    def dumps(self) -> str:
        """``key = value`` file; the ``[channel]`` section can be merged into a config."""
        return (f"[channel]\nnl_amplitude = {self.nl_amplitude!r}\n\n[calibration]\n"
                f"target_ratio = {self.target_ratio!r}\ntrain_snr_db = {self.train_snr_db!r}\n"
                f"# achieved ratio = {self.ratio!r}\n")


def nonlinearity_ratio(channel: ChannelConfig, A: float, train_snr_db: float, n_symbols: int,
                       L: int = volterra.DEFAULT_MEMORY, seed: int = 0) -> float:
    """``E[w^2] |h3| / |h1|`` of the equalizer fitted at ``train_snr_db`` for drive level ``A``.

    ``w`` is the noise-free FIR output, so the ratio describes the signal
    the equalizer is applied to.
    """
    cfg = channel.with_(nl_amplitude=A)
    w, z, x, g = volterra.training_components(cfg, train_snr_db, n_symbols, seed)
    model = volterra.fit_components(w, z, x, g, L, train_snr_db)
    return model.nonlinearity_ratio(float(np.mean(w[:, g:-g] ** 2)))


def calibrate_nonlinearity(cfg: ExperimentConfig, log=None) -> CalibrationResult:
    """Root-find the drive level whose fitted ratio equals the target.

    The ratio falls monotonically with ``A``; the search is Brent's method on
    ``[a_low, a_high]`` and stops at 1e-3 absolute in ``A``.
    """
    c = cfg.calibration
    L = cfg.equalizer.memory
    seen: dict[float, float] = {}

    def ratio(A):
        if A not in seen:
            seen[A] = nonlinearity_ratio(cfg.channel, A, c.train_snr_db, c.n_symbols, L, cfg.seed)
            _log(log, f"A={A:.4f} ratio={seen[A]:.5f}")
        return seen[A]

    r_lo, r_hi = ratio(c.a_low), ratio(c.a_high)
    if (r_lo - c.target_ratio) * (r_hi - c.target_ratio) > 0:
        raise RangeError(f"ratio does not cross {c.target_ratio} on A in [{c.a_low}, {c.a_high}] "
                         f"(ratios {r_lo:.4f}, {r_hi:.4f})")
    A = float(brentq(lambda a: ratio(a) - c.target_ratio, c.a_low, c.a_high, xtol=1e-3))
    return CalibrationResult(A, ratio(A), c.target_ratio, c.train_snr_db, (c.band_low, c.band_high),
                             tuple(seen.items()))


# ---------------------------------------------------------------------------
# Equalizers and decoders from the configuration
# ---------------------------------------------------------------------------


def fit_volterra(cfg: ExperimentConfig, train_snr_db: float | None = None) -> volterra.VolterraModel:
    eq = cfg.equalizer
    trs = eq.train_snr_db if train_snr_db is None else train_snr_db
    if trs == "per":
        raise ConfigError("fit-volterra needs a numeric equalizer.train_snr_db")
    return volterra.train_at_snr(channel_of(cfg), float(trs), eq.volterra_symbols, eq.memory, cfg.seed)


def load_volterra(path: str) -> volterra.VolterraModel:
    try:
        return volterra.VolterraModel.loads(Path(path).read_text(encoding="utf-8"))
    except OSError as exc:
        raise ConfigError(f"cannot read Volterra model: {exc}") from exc


def load_nn(path: str):
    try:
        return nnbp.load(path)
    except OSError as exc:
        raise ConfigError(f"cannot read NN-BP weights: {exc}") from exc


def train_nn(cfg: ExperimentConfig, code: ldpc.LdpcCode | None = None, log=None) -> nnbp.TrainResult:
    code = code or cfg.load_code()
    return nnbp.train(channel_of(cfg), code, cfg.nn.schedule(), cfg.nn.hyper(cfg.equalizer.memory, cfg.seed), log=log)


class _VolterraCache:
    """Per-training-SNR Volterra fits, trained on first use."""

    def __init__(self, cfg: ExperimentConfig):
        self.cfg = cfg
        self.models: dict[float, volterra.VolterraModel] = {}

    def __call__(self, train_snr_db: float) -> volterra.VolterraModel:
        key = round(float(train_snr_db), 9)
        if key not in self.models:
            self.models[key] = fit_volterra(self.cfg, key)
        return self.models[key]


def evaluator(cfg: ExperimentConfig, code, equalizer_at, decoder=None, channel: ChannelConfig | None = None,
              variant: str = "a", workers: int | None = None, max_frames: int | None = None):
    """``snr -> ErrorCounts``; ``equalizer_at(snr)`` supplies the amplitude equalizer."""
    channel = channel or channel_of(cfg)
    decoder = decoder or montecarlo.BpDecoder(cfg.nn.total_iterations)
    sim = cfg.simulation
    workers = workers or sim.workers
    max_frames = max_frames or sim.frames_per_point

    def evaluate(snr_db: float) -> montecarlo.ErrorCounts:
        link = chansim.build_link(channel, snr_db, equalizer_at(snr_db), variant, seed=cfg.seed)
        pipe = montecarlo.Pipeline(link, decoder)
        return montecarlo.simulate_point(pipe, code, cfg.seed, max_frames, sim.min_errors, workers=workers)

    return evaluate


def configured_evaluator(cfg: ExperimentConfig, code, workers: int | None = None):
    """Evaluator for ``[equalizer] kind`` as configured."""
    eq = cfg.equalizer
    if eq.kind == "none":
        return evaluator(cfg, code, lambda s: None, workers=workers)
    if eq.kind == "volterra":
        if eq.model_path:
            model = load_volterra(eq.model_path)
            return evaluator(cfg, code, lambda s: model, workers=workers)
        cache = _VolterraCache(cfg)
        if eq.train_snr_db == "per":
            return evaluator(cfg, code, cache, workers=workers)
        return evaluator(cfg, code, lambda s: cache(eq.train_snr_db), workers=workers)
    if not eq.model_path:
        raise ConfigError("equalizer kind nn_bp needs equalizer.model_path (run train-nn first)")
    stages, schedule = load_nn(eq.model_path)
    if stages[0].dims.L != eq.memory:
        raise ConfigError(f"NN-BP weights use L={stages[0].dims.L}, config has memory={eq.memory}")
    return evaluator(cfg, code, lambda s: None, nnbp.NnBpDecoder(tuple(stages), schedule), workers=workers)


def _check_code(cfg: ExperimentConfig, code: ldpc.LdpcCode):
    if code.n % (cfg.channel.n_streams * chansim.PAM8.M):
        raise ConfigError(f"code length {code.n} is not a whole number of "
                          f"{cfg.channel.n_streams}x{chansim.PAM8.M}-bit symbol slots")


# ---------------------------------------------------------------------------
# Waterfall
# ---------------------------------------------------------------------------


def run_waterfall(cfg: ExperimentConfig, label: str | None = None, workers: int | None = None, log=None) -> BerCurve:
    code = cfg.load_code()
    _check_code(cfg, code)
    evaluate = configured_evaluator(cfg, code, workers)
    curve = BerCurve(label or cfg.equalizer.kind, [])
    for s in cfg.simulation.snr_grid:
        curve.add(BerPoint(s, evaluate(s)))
        p = curve.points[-1]
        _log(log, f"{curve.label} {s:g} dB: pre {p.pre_ber:.3e} post {p.post_ber:.3e} ({p.counts.frames} frames)")
    return curve


def waterfall_rows(curves):
    for c in curves:
        for p in c.points:
            k = p.counts
            yield (c.label, p.snr_db, p.pre_ber, p.post_ber, k.frames, k.pre_errors, k.pre_bits, k.post_errors,
                   k.post_bits, k.frame_errors)


def waterfall_csv(curves) -> str:
    return csv_text(WATERFALL_COLUMNS, waterfall_rows(curves))


# ---------------------------------------------------------------------------
# Training-SNR sweep
# ---------------------------------------------------------------------------


@dataclass
class SweepResult:
    reports: list[noisefig.PenaltyReport]
    nf_empirical_db: list[float]
    ratios: list[float]
    curves: list[BerCurve] = field(default_factory=list)

    @property
    def train_snrs(self) -> list[float]:
        return [r.train_snr_db for r in self.reports]

    @property
    def optimal_train_snr_db(self) -> float:
        return self.reports[int(np.argmin([r.total_db for r in self.reports]))].train_snr_db

    def rows(self):
        for r in self.reports:
            yield (r.train_snr_db, r.ne_penalty_db, r.nl_penalty_db, r.total_db, r.nf_db)

    def detail_rows(self):
        for r, e, q in zip(self.reports, self.nf_empirical_db, self.ratios):
            yield (r.train_snr_db, r.req_baseline_db, r.req_c_db, r.req_a_db, r.nf_db, e, q)


@dataclass(frozen=True)
class NoiseFigurePoint:
    train_snr_db: float
    eval_snr_db: float
    nf_db: float
    nf_empirical_db: float

    @property
    def difference_db(self) -> float:
        return self.nf_db - self.nf_empirical_db


def noise_figure_point(cfg: ExperimentConfig, model: volterra.VolterraModel, eval_snr_db: float) -> NoiseFigurePoint:
    """Closed-form against paired-pass noise figure at the operating point ``eval_snr_db``."""
    ch = channel_of(cfg)
    n = cfg.sweep.moment_symbols
    fir = chansim.fit_link_fir(ch, eval_snr_db, cfg.seed)
    mom = noisefig.estimate_moments(ch, n, model.L, eval_snr_db, cfg.seed, fir)
    emp = noisefig.empirical_output_snr(model, ch, eval_snr_db, n, cfg.seed, fir)
    return NoiseFigurePoint(model.train_snr_db, eval_snr_db, noisefig.noise_figure_db(model, mom), emp.figure_db)


def run_noise_figure_check(cfg: ExperimentConfig, train_snr_grid=None, eval_snr_db: float | None = None,
                           log=None) -> list[NoiseFigurePoint]:
    grid = cfg.sweep.train_snr_grid if train_snr_grid is None else train_snr_grid
    eval_snr_db = cfg.channel.snr_db if eval_snr_db is None else eval_snr_db
    cache = _VolterraCache(cfg)
    out = []
    for t in grid:
        out.append(noise_figure_point(cfg, cache(t), eval_snr_db))
        _log(log, f"train {t:g} dB: NF {out[-1].nf_db:.3f} dB, empirical {out[-1].nf_empirical_db:.3f} dB")
    return out


def noise_figure_csv(points) -> str:
    return csv_text(NF_COLUMNS, ((p.train_snr_db, p.eval_snr_db, p.nf_db, p.nf_empirical_db, p.difference_db)
                                 for p in points))


def run_training_snr_sweep(cfg: ExperimentConfig, train_snr_grid=None, workers: int | None = None,
                           log=None) -> SweepResult:
    """Penalty decomposition and noise figure per training SNR.

    The no-nonlinearity reference is searched once and shared. Both noise
    figures are evaluated at the variant-a required SNR of each point.
    """
    grid = tuple(cfg.sweep.train_snr_grid if train_snr_grid is None else train_snr_grid)
    if not grid:
        raise ConfigError("train_snr_grid must be non-empty")
    code = cfg.load_code()
    _check_code(cfg, code)
    ch = channel_of(cfg)
    settings = cfg.simulation.search()
    workers = workers or cfg.simulation.workers
    base, base_curve = noisefig.baseline_required_snr(ch, code, cfg.seed, settings, workers)
    _log(log, f"no-NL reference {base:.3f} dB")
    result = SweepResult([], [], [], [base_curve])
    cache = _VolterraCache(cfg)
    for t in grid:
        model = cache(t)
        rep, curves = noisefig.penalty_decomposition(ch, model, code, settings, cfg.seed, baseline_db=base,
                                                     moments=None, workers=workers)
        nfp = noise_figure_point(cfg, model, rep.req_a_db)
        rep = noisefig.make_report(base, rep.req_c_db, rep.req_a_db, nfp.nf_db, t)
        for c in curves:
            c.label = f"train {t:g} dB {c.label}"
        w, _, _, g = volterra.training_components(ch, t, 20_000, cfg.seed)
        result.reports.append(rep)
        result.nf_empirical_db.append(nfp.nf_empirical_db)
        result.ratios.append(model.nonlinearity_ratio(float(np.mean(w[:, g:-g] ** 2))))
        result.curves.extend(curves)
        _log(log, f"train {t:g} dB: NE {rep.ne_penalty_db:.3f} NL {rep.nl_penalty_db:.3f} "
                  f"total {rep.total_db:.3f} NF {rep.nf_db:.3f} (empirical {nfp.nf_empirical_db:.3f})")
    return result


def run_penalty(cfg: ExperimentConfig, workers: int | None = None, log=None) -> SweepResult:
    """Single-point sweep at ``equalizer.train_snr_db``."""
    t = cfg.equalizer.train_snr_db
    if t == "per":
        raise ConfigError("penalty needs a numeric equalizer.train_snr_db")
    return run_training_snr_sweep(cfg, (float(t),), workers, log)


def spearman(x, y) -> float:
    return float(spearmanr(x, y).statistic)


# ---------------------------------------------------------------------------
# Final comparison
# ---------------------------------------------------------------------------


@dataclass
class ComparisonResult:
    required: dict[str, float]
    curves: list[BerCurve]
    order: tuple[str, ...]
    slack_db: float = 0.05

    def gain(self, better: str, worse: str) -> float:
        return self.required[worse] - self.required[better]

    def ordering_violations(self) -> list[tuple[str, str, float]]:
        """Adjacent pairs of ``order`` whose required SNRs break the ordering by more than the slack."""
        out = []
        for a, b in zip(self.order, self.order[1:]):
            if self.required[a] > self.required[b] + self.slack_db:
                out.append((a, b, self.required[a] - self.required[b]))
        return out

    def rows(self):
        ref = self.required.get(NO_EQ, math.nan)
        for k in self.order:
            yield (k, self.required[k], ref - self.required[k])

    def report(self) -> str:
        lines = [f"{k:>14s}: {v:7.3f} dB" for k, v in ((k, self.required[k]) for k in self.order)]
        bad = self.ordering_violations()
        lines.append("ordering holds" if not bad else
                     "ordering violated: " + "; ".join(f"{a} > {b} by {d:.3f} dB" for a, b, d in bad))
        nn = self.order[1]
        lines.append(f"gain {nn} over {VLT_OPT}: {self.gain(nn, VLT_OPT):.3f} dB")
        lines.append(f"gain {nn} over {NO_EQ}: {self.gain(nn, NO_EQ):.3f} dB")
        lines.append(f"gain {VLT_OPT} over {NO_EQ}: {self.gain(VLT_OPT, NO_EQ):.3f} dB")
        return "\n".join(lines) + "\n"


def run_final_comparison(cfg: ExperimentConfig, nn_stages=None, vlt_optimal_train_snr_db: float | None = None,
                         workers: int | None = None, log=None) -> ComparisonResult:
    """Required SNR of every system, from best to worst expected.

    NN-BP weights come from ``nn_stages``, else ``equalizer.model_path`` when
    the configured kind is ``nn_bp``, else they are trained here. The
    1-stage system reuses the first stage with the full BP budget after it.
    """
    code = cfg.load_code()
    _check_code(cfg, code)
    ch = channel_of(cfg)
    settings = cfg.simulation.search()
    nn = cfg.nn
    carry = nn.carry_messages
    if nn_stages is None:
        if cfg.equalizer.kind == "nn_bp" and cfg.equalizer.model_path:
            # weights are only meaningful with the message handling they were trained under
            nn_stages, sched = load_nn(cfg.equalizer.model_path)
            carry = sched.carry_messages
        else:
            _log(log, "training NN-BP")
            nn_stages = train_nn(cfg, code, log=log).stages
    nn_stages = list(nn_stages)
    lam = (nn.lambda1, nn.lambda2)
    full = nnbp.truncate(nn_stages, len(nn_stages), nn.n_bn, nn.total_iterations, lam, carry)
    one = nnbp.truncate(nn_stages, 1, nn.n_bn, nn.total_iterations, lam)
    t_opt = cfg.compare.vlt_optimal_train_snr_db if vlt_optimal_train_snr_db is None else vlt_optimal_train_snr_db
    cache = _VolterraCache(cfg)
    nn_label = f"{NN_BP} {len(nn_stages)}-stage"
    systems = {
        NO_NL: evaluator(cfg, code, lambda s: None, channel=ch.with_(nl_amplitude=math.inf), workers=workers),
        nn_label: evaluator(cfg, code, lambda s: None, full, workers=workers),
        NN_1: evaluator(cfg, code, lambda s: None, one, workers=workers),
        VLT_OPT: evaluator(cfg, code, lambda s: cache(t_opt), workers=workers),
        VLT_PER: evaluator(cfg, code, cache, workers=workers),
        NO_EQ: evaluator(cfg, code, lambda s: None, workers=workers),
    }
    required, curves = {}, []
    for label, ev in systems.items():
        required[label], c = montecarlo.search_required_snr(ev, settings, label)
        curves.append(c)
        _log(log, f"{label}: {required[label]:.3f} dB")
    return ComparisonResult(required, curves, tuple(systems))


def required_csv(result: ComparisonResult) -> str:
    return csv_text(REQUIRED_COLUMNS, result.rows())
