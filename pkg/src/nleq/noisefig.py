"""Noise enhancement of a Volterra equalizer.

Two views of the same quantity:

* ``noise_figure`` evaluates the closed-form ratio of input SNR to output SNR
  from noise-free signal moments, keeping terms up to first order in ``h3``
  and assuming white noise added after the linear filter.
* ``empirical_output_snr`` splits the equalizer output into signal and noise
  parts with paired noise-free / noisy passes over the real chain.

``penalty_decomposition`` turns three required-SNR searches (no nonlinearity,
noise injected after the equalizer, full chain) into NE and NL penalties.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from . import chansim, montecarlo, volterra
from .chansim import ChannelConfig, FirEqualizer
from .volterra import VolterraIndexSet, VolterraModel


class DegenerateModelError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class SignalMoments:
    sigma_w11: np.ndarray
    sigma_w13: np.ndarray
    ew2: float
    ez2: float
    n_samples: int = 0

    def __post_init__(self):
        s = self.sigma_w11
        if s.ndim != 2 or s.shape[0] != s.shape[1] or self.sigma_w13.shape[0] != s.shape[0]:
            raise ValueError("moment shapes are inconsistent")
        if not np.allclose(s, s.T, rtol=0, atol=1e-12 * max(1.0, float(np.abs(s).max()))):
            raise ValueError("sigma_w11 must be symmetric")
        if self.ez2 < 0:
            raise ValueError("ez2 must be non-negative")

    @property
    def L(self) -> int:
        return (self.sigma_w11.shape[0] - 1) // 2


def moments_from_signal(w: np.ndarray, iset: VolterraIndexSet, ez2: float, margin: int = 0,
                        chunk: int = 8192) -> SignalMoments:
    """Window moments of a noise-free symbol-rate signal (time on the last axis).

    ``E[w^2]`` is taken as the mean diagonal of ``sigma_w11`` so the two agree
    exactly; for a stationary signal this is the plain power.
    """
    w = np.atleast_2d(np.asarray(w, dtype=float))
    w = w.reshape(-1, w.shape[-1])
    n1, n3 = iset.n1, len(iset)
    stop = w.shape[-1] - margin
    n = w.shape[0] * max(stop - margin, 0)
    if n < 100 * max(n1, n3):
        raise ValueError(f"need at least {100 * max(n1, n3)} samples for the moment estimate, got {n}")
    s11 = np.zeros((n1, n1))
    s13 = np.zeros((n1, n3))
    for row in w:
        y1_all = volterra.windows(row, iset.L)
        for s in range(margin, stop, chunk):
            y1 = y1_all[s : min(s + chunk, stop)]
            s11 += y1.T @ y1
            s13 += y1.T @ volterra.cubic_terms(y1, iset)
    s11 = 0.5 * (s11 + s11.T) / n
    s13 /= n
    return SignalMoments(s11, s13, float(np.mean(np.diag(s11))), float(ez2), n)


def filtered_noise_power(cfg: ChannelConfig, snr_db: float, fir: FirEqualizer) -> float:
    """``E[z^2]`` at the FIR output for the configured channel noise."""
    sd = chansim.channel_noise_std(cfg, snr_db)
    return sd**2 * float(np.sum(fir.impulse(cfg) ** 2))


def estimate_moments(cfg: ChannelConfig, n_symbols: int = 200_000, L: int = volterra.DEFAULT_MEMORY,
                     snr_db: float | None = None, seed: int | None = None,
                     fir: FirEqualizer | None = None) -> SignalMoments:
    """Noise-free moments of the linear-filter output at operating point ``snr_db``.

    The FIR is the one fitted for the link at ``snr_db`` so ``w`` and ``E[z^2]``
    describe the signal the equalizer actually sees.
    """
    snr_db = cfg.snr_db if snr_db is None else snr_db
    seed = cfg.seed if seed is None else seed
    if fir is None:
        fir = chansim.fit_link_fir(cfg, snr_db, seed)
    rng = chansim.substream(seed, chansim.TAG_MOMENTS)
    block = 8192
    n_blocks = max(1, math.ceil(n_symbols / block))
    g = cfg.guard
    x = chansim.PAM8.levels[rng.integers(0, 2**chansim.PAM8.M, size=(n_blocks, block + 2 * g))]
    w, _ = chansim.channel_components(x, None, cfg, math.inf, fir)
    return moments_from_signal(w, volterra.build_index_set(L), filtered_noise_power(cfg, snr_db, fir), margin=g)


# ---------------------------------------------------------------------------
# Closed form
# ---------------------------------------------------------------------------


def h3_tensor(model: VolterraModel) -> np.ndarray:
    """Dense ``(2L+1)^3`` array of third-order weights, zero off the ordered triples."""
    n1 = model.index_set.n1
    H = np.zeros((n1, n1, n1))
    o = model.index_set.offsets
    H[o[:, 0], o[:, 1], o[:, 2]] = model.h3
    return H


def alpha(model: VolterraModel) -> np.ndarray:
    """First-order noise coupling ``alpha[i, j]`` for ``j <= i`` (window positions).

    ``alpha[i, j]`` collects every ``h1[k] h3`` product in which the noise
    sample at ``k`` multiplies the signal pair ``(w_i, w_j)``.
    """
    H = h3_tensor(model)
    h1 = model.h1
    a = (np.einsum("k,ijk->ij", h1, H) + np.einsum("k,ikj->ij", h1, H) + np.einsum("k,kij->ij", h1, H))
    return np.tril(a)


def noise_figure(model: VolterraModel, mom: SignalMoments, include_diagonal: bool = True) -> float:
    """Input SNR over output SNR (linear) to first order in ``h3``.

    With ``include_diagonal=False`` the pair sum runs over ``j < i`` only,
    dropping the same-position pairs (``w_i^2`` times noise), which are the
    dominant third-order noise terms.
    """
    if mom.sigma_w11.shape[0] != model.index_set.n1 or mom.sigma_w13.shape[1] != len(model.index_set):
        raise ValueError("moment dimensions do not match the model")
    h1, h3 = model.h1, model.h3
    a = alpha(model)
    if not include_diagonal:
        a = np.tril(a, -1)
    num = h1 @ h1 + 2.0 * np.sum(a * mom.sigma_w11)
    den = h1 @ mom.sigma_w11 @ h1 + 2.0 * h1 @ mom.sigma_w13 @ h3
    if not den > 0:
        raise DegenerateModelError(f"non-positive output signal power {den:g}")
    F = mom.ew2 * num / den
    if not F > 0:
        raise DegenerateModelError(f"non-positive output noise power (F={F:g})")
    return float(F)


def noise_figure_db(model: VolterraModel, mom: SignalMoments, include_diagonal: bool = True) -> float:
    return 10 * math.log10(noise_figure(model, mom, include_diagonal))


# ---------------------------------------------------------------------------
# Monte-Carlo split
# ---------------------------------------------------------------------------


class OutputPowers(NamedTuple):
    p_s: float
    p_n: float
    ew2: float
    ez2: float

    @property
    def figure(self) -> float:
        """Empirical noise figure ``(E[w^2]/E[z^2]) / (P_S/P_N)``."""
        return (self.ew2 / self.ez2) / (self.p_s / self.p_n) if self.p_n > 0 else 1.0

    @property
    def figure_db(self) -> float:
        return 10 * math.log10(self.figure)


def empirical_output_snr(model: VolterraModel | None, cfg: ChannelConfig, snr_db: float, n_symbols: int = 200_000,
                         seed: int | None = None, fir: FirEqualizer | None = None) -> OutputPowers:
    """Signal and noise power at the equalizer output from paired passes.

    ``x_S = V(w)``, ``x_N = V(w + z) - x_S`` with one signal and noise
    realization shared by both passes. ``model=None`` is a pass-through.
    """
    seed = cfg.seed if seed is None else seed
    if fir is None:
        fir = chansim.fit_link_fir(cfg, snr_db, seed)
    rng = chansim.substream(seed, chansim.TAG_MOMENTS, 1)
    block = 8192
    n_blocks = max(1, math.ceil(n_symbols / block))
    g = cfg.guard
    x = chansim.PAM8.levels[rng.integers(0, 2**chansim.PAM8.M, size=(n_blocks, block + 2 * g))]
    normal = rng.standard_normal((n_blocks, (block + 2 * g) * cfg.sps))
    w, z = chansim.channel_components(x, normal, cfg, snr_db, fir)
    eq = (lambda v: v) if model is None else model.apply
    xs = eq(w)
    xn = eq(w + z) - xs
    sl = (slice(None), slice(g, -g))
    return OutputPowers(float(np.mean(xs[sl] ** 2)), float(np.mean(xn[sl] ** 2)),
                        float(np.mean(w[sl] ** 2)), float(np.mean(z[sl] ** 2)))


# ---------------------------------------------------------------------------
# Required-SNR penalties
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class PenaltyReport:
    ne_penalty_db: float
    nl_penalty_db: float
    total_db: float
    nf_db: float
    train_snr_db: float
    req_baseline_db: float = math.nan
    req_c_db: float = math.nan
    req_a_db: float = math.nan

    def __post_init__(self):
        if abs(self.total_db - self.ne_penalty_db - self.nl_penalty_db) > 1e-9:
            raise ValueError("total penalty must equal NE + NL")


def make_report(req_baseline: float, req_c: float, req_a: float, nf_db: float, train_snr_db: float) -> PenaltyReport:
    ne = req_a - req_c
    nl = req_c - req_baseline
    return PenaltyReport(ne, nl, ne + nl, nf_db, train_snr_db, req_baseline, req_c, req_a)


def link_evaluator(cfg: ChannelConfig, code, equalizer, variant: str, seed: int, settings: montecarlo.SearchSettings,
                   decoder=None, workers: int = 1):
    """``snr -> ErrorCounts`` for a fixed equalizer and variant."""
    decoder = decoder or montecarlo.BpDecoder()

    def evaluate(snr_db: float) -> montecarlo.ErrorCounts:
        link = chansim.build_link(cfg, snr_db, equalizer, variant, seed=seed)
        return montecarlo.simulate_point(montecarlo.Pipeline(link, decoder), code, seed, settings.max_frames,
                                         settings.min_errors, workers=workers)

    return evaluate


def baseline_required_snr(cfg: ChannelConfig, code, seed: int, settings: montecarlo.SearchSettings,
                          workers: int = 1) -> tuple[float, montecarlo.BerCurve]:
    """No-nonlinearity, no-equalizer reference."""
    lin = cfg.with_(nl_amplitude=math.inf)
    return montecarlo.search_required_snr(link_evaluator(lin, code, None, "a", seed, settings, workers=workers),
                                          settings, "no-NL")


def penalty_decomposition(cfg: ChannelConfig, model: VolterraModel, code, settings: montecarlo.SearchSettings,
                          seed: int | None = None, baseline_db: float | None = None,
                          moments: SignalMoments | None = None, workers: int = 1):
    """NE and NL penalties of ``model`` at the target BER.

    NL = req(c) - req(no nonlinearity); NE = req(a) - req(c). Pass a
    precomputed ``baseline_db`` to share the reference across a sweep.
    Returns ``(report, curves)``; raises ``montecarlo.RangeError`` when a
    curve cannot be bracketed.
    """
    seed = cfg.seed if seed is None else seed
    curves = []
    if baseline_db is None:
        baseline_db, cb = baseline_required_snr(cfg, code, seed, settings, workers)
        curves.append(cb)
    req = {}
    for v in ("c", "a"):
        req[v], cv = montecarlo.search_required_snr(link_evaluator(cfg, code, model, v, seed, settings, workers=workers),
                                                    settings, f"variant-{v}")
        curves.append(cv)
    if moments is None:
        moments = estimate_moments(cfg, L=model.L, snr_db=req["a"], seed=seed)
    report = make_report(baseline_db, req["c"], req["a"], noise_figure_db(model, moments), model.train_snr_db)
    return report, curves
