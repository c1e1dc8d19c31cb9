"""Transmitter, channel and linear receiver for the real-PAM link.

Each I/Q dimension is an independent 8-PAM stream.  A codeword of ``n`` bits
becomes ``n / 3`` symbols; symbol ``s`` goes to stream ``s % n_streams`` at
time ``s // n_streams`` (I first).  Symbol-domain arrays therefore use the
layout ``(..., T, n_streams)`` whose C-order flattening is codeword order.

Every stream is surrounded by random guard symbols so the nonlinear channel
is stationary over the payload; guards never enter BER counts.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from functools import lru_cache
from typing import Protocol

import numpy as np
from scipy.ndimage import convolve1d
from scipy.special import logsumexp, ndtr

LLR_MAX = 30.0

# SeedSequence tags, one per independent randomness consumer.
TAG_FRAME = 1
TAG_PILOT = 2
TAG_TRAIN = 3
TAG_MOMENTS = 4
TAG_NN = 5


def substream(seed: int, tag: int, index: int = 0) -> np.random.Generator:
    """Independent generator keyed by ``(seed, tag, index)``."""
    return np.random.default_rng(np.random.SeedSequence([int(seed), int(tag), int(index)]))


# ---------------------------------------------------------------------------
# Constellation
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class Constellation:
    """Real PAM alphabet with bit labels.

    ``levels[idx]`` is the amplitude of the label whose MSB-first integer
    value is ``idx``; bit 0 is the most significant (sign) bit.
    """

    levels: np.ndarray
    bits_per_dim: int

    def __post_init__(self):
        levels = np.asarray(self.levels, dtype=float)
        if levels.shape != (2**self.bits_per_dim,):
            raise ValueError("need one level per label")
        levels.setflags(write=False)
        object.__setattr__(self, "levels", levels)

    @property
    def M(self) -> int:
        return self.bits_per_dim

    @property
    def labels(self) -> np.ndarray:
        """``(2**M, M)`` bit table, row ``idx`` is the label of ``levels[idx]``."""
        idx = np.arange(2**self.M)
        shifts = np.arange(self.M - 1, -1, -1)
        return (idx[:, None] >> shifts) & 1

    @property
    def partitions(self) -> list[tuple[np.ndarray, np.ndarray]]:
        """Per bit ``m``: indices of levels whose bit m is 0, and is 1."""
        lab = self.labels
        return [(np.flatnonzero(lab[:, m] == 0), np.flatnonzero(lab[:, m] == 1)) for m in range(self.M)]

    @property
    def weights(self) -> np.ndarray:
        return 2 ** np.arange(self.M - 1, -1, -1)


def gray_pam8() -> Constellation:
    """8-PAM, sign bit first, (d1, d2) = 00, 01, 11, 10 for magnitudes 1, 3, 5, 7."""
    mag = {(0, 0): 1, (0, 1): 3, (1, 1): 5, (1, 0): 7}
    levels = np.empty(8)
    for idx in range(8):
        d0, d1, d2 = (idx >> 2) & 1, (idx >> 1) & 1, idx & 1
        levels[idx] = (1 - 2 * d0) * mag[(d1, d2)]
    return Constellation(levels / math.sqrt(21.0), 3)


PAM8 = gray_pam8()


def map_bits(bits: np.ndarray, c: Constellation = PAM8) -> np.ndarray:
    """Map bit tuples on the last axis to amplitudes."""
    bits = np.asarray(bits)
    if bits.shape[-1] != c.M:
        raise ValueError(f"expected {c.M} bits per symbol, got {bits.shape[-1]}")
    if not np.all((bits == 0) | (bits == 1)):
        raise ValueError("labels must consist of 0/1 bits")
    return c.levels[bits.astype(np.int64) @ c.weights]


def hard_decide(xhat: np.ndarray, c: Constellation = PAM8) -> np.ndarray:
    """Nearest-level decision, returned as bit tuples on a new last axis."""
    idx = np.argmin(np.abs(np.asarray(xhat)[..., None] - c.levels), axis=-1)
    return c.labels[idx]


def soft_demap(xhat: np.ndarray, c: Constellation = PAM8, rho: float = 1.0) -> np.ndarray:
    """Max-free log-sum-exp bit LLRs, clamped to ``±LLR_MAX``.

    Output has a new trailing axis of length ``M``; positive favours bit 0.
    """
    if not rho > 0:
        raise ValueError("rho must be positive")
    metric = -rho * (np.asarray(xhat, dtype=float)[..., None] - c.levels) ** 2
    out = np.empty(metric.shape[:-1] + (c.M,))
    for m, (zero, one) in enumerate(c.partitions):
        out[..., m] = logsumexp(metric[..., zero], axis=-1) - logsumexp(metric[..., one], axis=-1)
    return np.clip(out, -LLR_MAX, LLR_MAX)


def pam_ber(snr_db: float, c: Constellation = PAM8) -> float:
    """Exact hard-decision bit error rate of ``c`` on AWGN with unit symbol power."""
    sigma = math.sqrt(10 ** (-snr_db / 10))
    order = np.argsort(c.levels)
    lev = c.levels[order]
    lab = c.labels[order]
    edges = np.concatenate(([-np.inf], (lev[1:] + lev[:-1]) / 2, [np.inf]))
    # p[i, j]: sent level i, decided level j
    p = ndtr((edges[None, 1:] - lev[:, None]) / sigma) - ndtr((edges[None, :-1] - lev[:, None]) / sigma)
    wrong = (lab[:, None, :] != lab[None, :, :]).sum(axis=-1)
    return float((p * wrong).sum() / (len(lev) * c.M))


# ---------------------------------------------------------------------------
# Configuration and waveforms
# ---------------------------------------------------------------------------

# Drive level giving E[w^2]|h3|/|h1| = 0.067 for a Volterra fit at 19 dB
# training SNR (calibrated value 1.0336); reproduced by
# ``harness.experiments.calibrate_nonlinearity``.
DEFAULT_NL_AMPLITUDE = 1.034


@dataclass(frozen=True)
class ChannelConfig:
    sps: int = 2
    rolloff: float = 0.2
    rrc_span_symbols: int = 40
    nl_amplitude: float = DEFAULT_NL_AMPLITUDE
    snr_db: float = 18.0
    fir_len: int = 17
    seed: int = 0
    n_streams: int = 2
    pilot_symbols: int = 16384
    guard_symbols: int | None = None

    def __post_init__(self):
        if self.sps < 2:
            raise ValueError("sps must be >= 2")
        if not 0 < self.rolloff < 1:
            raise ValueError("rolloff must lie in (0, 1)")
        if not self.nl_amplitude > 0:
            raise ValueError("nonlinearity amplitude must be positive")
        if self.fir_len % 2 != 1:
            raise ValueError("fir_len must be odd")
        if self.rrc_span_symbols < 8:
            raise ValueError("RRC span must be at least 8 symbols")
        if self.pilot_symbols < 10 * self.fir_len:
            raise ValueError("pilot block must be at least 10x the FIR length")

    @property
    def guard(self) -> int:
        """Guard symbols per stream side: filter tails plus equalizer memory."""
        if self.guard_symbols is not None:
            return self.guard_symbols
        return self.rrc_span_symbols + (self.fir_len // self.sps) + 1 + 8

    @property
    def linear(self) -> bool:
        return math.isinf(self.nl_amplitude)

    def with_(self, **kw) -> "ChannelConfig":
        return replace(self, **kw)


@dataclass(frozen=True)
class FrameSignal:
    """Sample-domain waveform; rows on leading axes are independent streams."""

    samples: np.ndarray
    sps: int
    n_symbols: int = field(default=-1)

    def __post_init__(self):
        n = self.samples.shape[-1] // self.sps
        if self.n_symbols < 0:
            object.__setattr__(self, "n_symbols", n)
        if self.samples.shape[-1] != self.n_symbols * self.sps:
            raise ValueError("sample count must equal n_symbols * sps")


def rrc_taps(rolloff: float, span: int, sps: int) -> np.ndarray:
    """Unit-energy root-raised-cosine taps, ``span * sps + 1`` long."""
    n = span * sps
    t = (np.arange(n + 1) - n / 2) / sps
    h = np.empty_like(t)
    b = rolloff
    sing = 1 / (4 * b)
    for i, ti in enumerate(t):
        if ti == 0:
            h[i] = 1 + b * (4 / np.pi - 1)
        elif abs(abs(ti) - sing) < 1e-12:
            h[i] = b / np.sqrt(2) * ((1 + 2 / np.pi) * np.sin(np.pi * sing) + (1 - 2 / np.pi) * np.cos(np.pi * sing))
        else:
            num = np.sin(np.pi * ti * (1 - b)) + 4 * b * ti * np.cos(np.pi * ti * (1 + b))
            h[i] = num / (np.pi * ti * (1 - (4 * b * ti) ** 2))
    return h / np.sqrt(np.sum(h**2))


def _filter(samples: np.ndarray, taps: np.ndarray) -> np.ndarray:
    # centred ("same") convolution, each row independent
    return convolve1d(samples, taps, axis=-1, mode="constant", cval=0.0)


def rrc_shape(x: np.ndarray, cfg: ChannelConfig) -> FrameSignal:
    """Upsample symbols and apply the transmit RRC; sample ``k*sps`` is symbol ``k``."""
    x = np.asarray(x, dtype=float)
    up = np.zeros(x.shape[:-1] + (x.shape[-1] * cfg.sps,))
    up[..., :: cfg.sps] = x
    taps = rrc_taps(cfg.rolloff, cfg.rrc_span_symbols, cfg.sps)
    return FrameSignal(_filter(up, taps), cfg.sps, x.shape[-1])


def rx_filter(s: FrameSignal, cfg: ChannelConfig) -> FrameSignal:
    taps = rrc_taps(cfg.rolloff, cfg.rrc_span_symbols, cfg.sps)
    return FrameSignal(_filter(s.samples, taps), s.sps, s.n_symbols)


def apply_nonlinearity(s: FrameSignal, A: float) -> FrameSignal:
    """Memoryless sinusoidal compression ``u -> A sin(u / A)``; ``A = inf`` is linear."""
    if not A > 0:
        raise ValueError("A must be positive")
    if math.isinf(A):
        return FrameSignal(s.samples.copy(), s.sps, s.n_symbols)
    return FrameSignal(A * np.sin(s.samples / A), s.sps, s.n_symbols)


def noise_std(snr_db: float) -> float:
    """Per-sample noise standard deviation; ``inf`` dB means no noise."""
    return 0.0 if math.isinf(snr_db) and snr_db > 0 else math.sqrt(10 ** (-snr_db / 10))


@lru_cache(maxsize=64)
def _nl_power_ratio(sps, rolloff, span, A) -> float:
    if math.isinf(A):
        return 1.0
    rng = np.random.default_rng(0x5EED)
    cfg = ChannelConfig(sps=sps, rolloff=rolloff, rrc_span_symbols=span, nl_amplitude=A)
    u = rrc_shape(PAM8.levels[rng.integers(0, 2**PAM8.M, size=1 << 16)], cfg).samples[span * sps : -span * sps]
    return float(np.mean((A * np.sin(u / A)) ** 2) / np.mean(u**2))


def nl_power_ratio(cfg: ChannelConfig) -> float:
    """Mean power after the nonlinearity relative to the linear waveform.

    The SNR axis is referred to the compressed signal, so the channel noise
    variance is scaled by this ratio. Fixed-seed estimate, cached per config.
    """
    return _nl_power_ratio(cfg.sps, cfg.rolloff, cfg.rrc_span_symbols, cfg.nl_amplitude)


def channel_noise_std(cfg: ChannelConfig, snr_db: float) -> float:
    return noise_std(snr_db) * math.sqrt(nl_power_ratio(cfg))


def add_awgn(s: FrameSignal, snr_db: float, rng: np.random.Generator) -> FrameSignal:
    if math.isinf(snr_db) and snr_db > 0:
        return FrameSignal(s.samples.copy(), s.sps, s.n_symbols)
    noise = rng.standard_normal(s.samples.shape) * noise_std(snr_db)
    return FrameSignal(s.samples + noise, s.sps, s.n_symbols)


# ---------------------------------------------------------------------------
# Fractionally spaced FIR
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class FirEqualizer:
    taps: np.ndarray
    sps: int = 2

    def windows(self, samples: np.ndarray) -> np.ndarray:
        half = len(self.taps) // 2
        pad = [(0, 0)] * (samples.ndim - 1) + [(half, half)]
        win = np.lib.stride_tricks.sliding_window_view(np.pad(samples, pad), len(self.taps), axis=-1)
        return win[..., :: self.sps, :]

    def __call__(self, s: FrameSignal) -> np.ndarray:
        """Symbol-rate output ``y_k = sum_j taps[j] r[k*sps + j - half]``."""
        return self.windows(s.samples) @ self.taps

    def impulse(self, cfg: ChannelConfig) -> np.ndarray:
        """Sample-rate response of Rx-RRC followed by this FIR."""
        return np.convolve(self.taps, rrc_taps(cfg.rolloff, cfg.rrc_span_symbols, cfg.sps))


def fit_fir(rx: FrameSignal, pilots: np.ndarray, fir_len: int, unbiased: bool = True, skip: int = 0) -> FirEqualizer:
    """Block least-squares FIR against known pilots, ridge-stabilised.

    ``skip`` symbols at both ends of ``pilots`` are left out of the fit.
    With ``unbiased`` the LS taps are rescaled so that ``E[y x] = E[x^2]``.
    """
    pilots = np.asarray(pilots, dtype=float)
    if pilots.shape[-1] - 2 * skip < 10 * fir_len:
        raise ValueError("pilot block must be at least 10x the FIR length")
    proto = FirEqualizer(np.zeros(fir_len), rx.sps)
    X = proto.windows(rx.samples)[..., skip : pilots.shape[-1] - skip, :].reshape(-1, fir_len)
    x = pilots[..., skip : pilots.shape[-1] - skip].reshape(-1)
    R = X.T @ X
    lam = 1e-8 * np.trace(R) / fir_len
    try:
        taps = np.linalg.solve(R + lam * np.eye(fir_len), X.T @ x)
    except np.linalg.LinAlgError as exc:
        raise np.linalg.LinAlgError(f"FIR normal matrix is singular (cond={np.linalg.cond(R):.3g})") from exc
    if unbiased:
        gain = (X @ taps) @ x / (x @ x)
        taps = taps / gain
    return FirEqualizer(taps, rx.sps)


def linear_receive(s: FrameSignal, cfg: ChannelConfig, pilots: np.ndarray, unbiased: bool = True) -> np.ndarray:
    """Rx-RRC, then a FIR fitted on the leading pilot symbols of ``s``."""
    rx = rx_filter(s, cfg)
    n_p = np.asarray(pilots).shape[-1]
    head = FrameSignal(rx.samples[..., : n_p * cfg.sps], cfg.sps, n_p)
    fir = fit_fir(head, pilots, cfg.fir_len, unbiased=unbiased, skip=min(cfg.guard, n_p // 20))
    return fir(rx)


# ---------------------------------------------------------------------------
# Channel components and links
# ---------------------------------------------------------------------------


def to_streams(symbols: np.ndarray, n_streams: int) -> np.ndarray:
    """``(..., n_sym)`` codeword-ordered symbols to ``(..., T, n_streams)``."""
    if symbols.shape[-1] % n_streams:
        raise ValueError("symbol count must be a multiple of the stream count")
    return symbols.reshape(symbols.shape[:-1] + (-1, n_streams))


def channel_components(x: np.ndarray, normal: np.ndarray | None, cfg: ChannelConfig, snr_db: float, fir: FirEqualizer):
    """Signal and noise parts of the linear-filter output.

    ``x`` has time on the last axis; ``normal`` holds unit-variance Gaussian
    samples of the waveform shape (or ``None`` for a noise-free pass).
    Returns ``(w, z)`` at symbol rate with ``y = w + z``.
    """
    tx = apply_nonlinearity(rrc_shape(x, cfg), cfg.nl_amplitude)
    w = fir(rx_filter(tx, cfg))
    sd = channel_noise_std(cfg, snr_db)
    if normal is None or sd == 0.0:
        return w, np.zeros_like(w)
    z = fir(rx_filter(FrameSignal(normal * sd, cfg.sps, x.shape[-1]), cfg))
    return w, z


class AmplitudeEqualizer(Protocol):
    def apply(self, y: np.ndarray) -> np.ndarray: ...


def _equalize(eq, y: np.ndarray) -> np.ndarray:
    return y if eq is None else eq.apply(y)


@dataclass(frozen=True, eq=False)
class Link:
    """Receive chain frozen at one SNR: fitted FIR, equalizer, demapper scale."""

    cfg: ChannelConfig
    snr_db: float
    fir: FirEqualizer
    rho: float
    equalizer: AmplitudeEqualizer | None = None
    variant: str = "a"
    constellation: Constellation = PAM8


def pilot_block(cfg: ChannelConfig, seed: int):
    """Known pilot symbols and their unit-variance noise draw."""
    rng = substream(seed, TAG_PILOT)
    labels = rng.integers(0, 2**PAM8.M, size=cfg.pilot_symbols)
    normal = rng.standard_normal(cfg.pilot_symbols * cfg.sps)
    return PAM8.levels[labels], normal


def fit_link_fir(cfg: ChannelConfig, snr_db: float, seed: int) -> FirEqualizer:
    x, normal = pilot_block(cfg, seed)
    tx = apply_nonlinearity(rrc_shape(x, cfg), cfg.nl_amplitude)
    sd = channel_noise_std(cfg, snr_db)
    samples = tx.samples + (normal * sd if sd else 0.0)
    rx = rx_filter(FrameSignal(samples, cfg.sps, len(x)), cfg)
    return fit_fir(rx, x, cfg.fir_len, unbiased=True, skip=cfg.guard)


def build_link(cfg: ChannelConfig, snr_db: float, equalizer=None, variant: str = "a", seed: int | None = None,
               fir: FirEqualizer | None = None) -> Link:
    """Fit the FIR on the pilot block and set rho from the pilot-block MSE."""
    if variant not in ("a", "c"):
        raise ValueError(f"unknown or non-simulated variant {variant!r}")
    seed = cfg.seed if seed is None else seed
    if fir is None:
        fir = fit_link_fir(cfg, snr_db, seed)
    x, normal = pilot_block(cfg, seed)
    w, z = channel_components(x, normal, cfg, snr_db, fir)
    xhat = _variant_output(variant, equalizer, w, z)
    g = cfg.guard
    mse = float(np.mean((xhat[g:-g] - x[g:-g]) ** 2))
    rho = 1.0 / (2.0 * max(mse, 1e-12))
    return Link(cfg, snr_db, fir, rho, equalizer, variant)


def _variant_output(variant, eq, w, z):
    if variant == "a":
        return _equalize(eq, w + z)
    if variant == "c":
        return _equalize(eq, w) + z
    raise ValueError(f"unknown variant {variant!r}")


def draw_frame_randomness(rng: np.random.Generator, cfg: ChannelConfig, n_payload_symbols: int):
    """Guard labels and unit noise for one frame, drawn in a fixed order."""
    T = n_payload_symbols // cfg.n_streams
    g = cfg.guard
    guards = rng.integers(0, 2**PAM8.M, size=(cfg.n_streams, 2 * g))
    normal = rng.standard_normal((cfg.n_streams, (T + 2 * g) * cfg.sps))
    return guards, normal


def frame_streams(codeword: np.ndarray, guards: np.ndarray, cfg: ChannelConfig, c: Constellation = PAM8) -> np.ndarray:
    """Codeword bits to guarded transmit streams ``(n_streams, T + 2G)``."""
    sym = map_bits(np.asarray(codeword).reshape(-1, c.M), c)
    payload = to_streams(sym, cfg.n_streams).T
    g = cfg.guard
    return np.concatenate([c.levels[guards[:, :g]], payload, c.levels[guards[:, g:]]], axis=1)


def run_variant(variant: str, link: Link, codewords: np.ndarray, rngs, noise_free: bool = False):
    """Push a batch of codewords through the chain.

    Returns ``(xhat, llr)`` with shapes ``(B, T, S)`` and ``(B, T, S, M)``.
    Variant ``'a'`` equalizes the noisy filter output; ``'c'`` equalizes the
    noise-free output and adds the filtered noise realization afterwards.
    """
    if variant == "b":
        raise ValueError("variant b is an analytical model only; see noisefig")
    if variant not in ("a", "c"):
        raise ValueError(f"unknown variant {variant!r}")
    cfg = link.cfg
    codewords = np.atleast_2d(codewords)
    n_sym = codewords.shape[1] // link.constellation.M
    xs, normals = [], []
    for cw, rng in zip(codewords, rngs):
        guards, normal = draw_frame_randomness(rng, cfg, n_sym)
        xs.append(frame_streams(cw, guards, cfg, link.constellation))
        normals.append(normal)
    x = np.stack(xs)
    w, z = channel_components(x, None if noise_free else np.stack(normals), cfg, link.snr_db, link.fir)
    xhat = _variant_output(variant, link.equalizer, w, z)
    g = cfg.guard
    xhat = np.swapaxes(xhat[..., g:-g], -1, -2)
    return xhat, soft_demap(xhat, link.constellation, link.rho)
