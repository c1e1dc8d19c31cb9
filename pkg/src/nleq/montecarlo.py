"""Seeded, chunked Monte-Carlo error counting.

Frame ``i`` draws all of its randomness (info bits, guard symbols, noise)
from the substream ``(seed, TAG_FRAME, i)``, so curves that share a seed use
common random numbers and serial and parallel runs see identical frames.
Work is cut into fixed chunks; counts are integers merged in chunk order.
"""

from __future__ import annotations

import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass

import numpy as np

from . import chansim, ldpc
from .chansim import Link

MIN_ERRORS = 100
CHUNK = 16


@dataclass
class ErrorCounts:
    frames: int = 0
    pre_errors: int = 0
    pre_bits: int = 0
    post_errors: int = 0
    post_bits: int = 0
    frame_errors: int = 0

    def __iadd__(self, other: "ErrorCounts"):
        for f in ("frames", "pre_errors", "pre_bits", "post_errors", "post_bits", "frame_errors"):
            setattr(self, f, getattr(self, f) + getattr(other, f))
        return self

    @property
    def pre_ber(self) -> float:
        return self.pre_errors / self.pre_bits if self.pre_bits else math.nan

    @property
    def post_ber(self) -> float:
        return self.post_errors / self.post_bits if self.post_bits else math.nan


@dataclass(frozen=True, eq=False)
class BpDecoder:
    """Plain flooding BP on the demapper LLRs."""

    n_iter: int = ldpc.DEFAULT_ITERATIONS

    def __call__(self, llr: np.ndarray, code: ldpc.LdpcCode, layout) -> np.ndarray:
        l_out, *_ = ldpc.decode(llr.reshape(llr.shape[0], -1), code, self.n_iter, early_stop=True)
        return l_out


@dataclass(frozen=True, eq=False)
class Pipeline:
    """A link plus the decoder that consumes its demapper LLRs."""

    link: Link
    decoder: object = BpDecoder()
    label: str = ""


def frame_batch(code: ldpc.LdpcCode, seed: int, start: int, stop: int):
    rngs = [chansim.substream(seed, chansim.TAG_FRAME, i) for i in range(start, stop)]
    info = np.stack([rng.integers(0, 2, code.k, dtype=np.uint8) for rng in rngs])
    return info, code.encode(info), rngs


def run_chunk(pipeline: Pipeline, code: ldpc.LdpcCode, seed: int, start: int, stop: int) -> ErrorCounts:
    info, cw, rngs = frame_batch(code, seed, start, stop)
    link = pipeline.link
    _, llr = chansim.run_variant(link.variant, link, cw, rngs)
    B = cw.shape[0]
    l_r = llr.reshape(B, -1)
    pre = int(np.count_nonzero(ldpc.hard_bits(l_r) != cw))
    l_out = pipeline.decoder(llr, code, llr.shape[1:])
    dec = ldpc.hard_bits(l_out)[:, code.info_positions]
    wrong = dec != info
    return ErrorCounts(
        frames=B,
        pre_errors=pre,
        pre_bits=cw.size,
        post_errors=int(np.count_nonzero(wrong)),
        post_bits=info.size,
        frame_errors=int(np.count_nonzero(wrong.any(axis=1))),
    )


def _chunk_task(args):
    return run_chunk(*args)


def simulate_point(pipeline: Pipeline, code: ldpc.LdpcCode, seed: int, max_frames: int,
                   min_errors: int = MIN_ERRORS, chunk: int = CHUNK, workers: int = 1,
                   pool: ProcessPoolExecutor | None = None) -> ErrorCounts:
    """Count errors until ``min_errors`` post-BP bit errors or ``max_frames`` frames.

    The stop decision is taken after each chunk in index order, so the result
    does not depend on ``workers``.
    """
    total = ErrorCounts()
    bounds = [(s, min(s + chunk, max_frames)) for s in range(0, max_frames, chunk)]
    if workers <= 1 and pool is None:
        for s, e in bounds:
            total += run_chunk(pipeline, code, seed, s, e)
            if total.post_errors >= min_errors:
                break
        return total
    own = pool is None
    pool = pool or ProcessPoolExecutor(max_workers=workers)
    try:
        wave = max(workers, 1)
        for w0 in range(0, len(bounds), wave):
            tasks = [(pipeline, code, seed, s, e) for s, e in bounds[w0 : w0 + wave]]
            for counts in pool.map(_chunk_task, tasks):
                total += counts
                if total.post_errors >= min_errors:
                    return total
        return total
    finally:
        if own:
            pool.shutdown()


# ---------------------------------------------------------------------------
# Waterfall curves and required SNR
# ---------------------------------------------------------------------------

TARGET_BER = 1e-4


class RangeError(ValueError):
    """The target BER is not bracketed by the simulated points."""


@dataclass(frozen=True)
class BerPoint:
    snr_db: float
    counts: ErrorCounts

    @property
    def pre_ber(self) -> float:
        return self.counts.pre_ber

    @property
    def post_ber(self) -> float:
        return self.counts.post_ber

    @property
    def log_ber(self) -> float:
        # zero-error points are floored at half an error so they stay on a log axis
        c = self.counts
        return math.log10(max(c.post_errors, 0.5) / c.post_bits)


@dataclass
class BerCurve:
    label: str
    points: list[BerPoint]

    def __post_init__(self):
        self.points = sorted(self.points, key=lambda p: p.snr_db)

    @property
    def snrs(self) -> np.ndarray:
        return np.array([p.snr_db for p in self.points])

    def add(self, point: BerPoint):
        self.points = sorted([*self.points, point], key=lambda p: p.snr_db)


def required_snr(curve: BerCurve | list[tuple[float, float]], target_ber: float = TARGET_BER) -> float:
    """SNR at ``target_ber`` by linear interpolation in (dB, log10 BER).

    Accepts a curve or plain ``(snr_db, post_ber)`` pairs. The first bracketing
    pair in SNR order is used.
    """
    if isinstance(curve, BerCurve):
        pts = [(p.snr_db, p.log_ber) for p in curve.points]
    else:
        pts = sorted((float(s), math.log10(b) if b > 0 else -math.inf) for s, b in curve)
    t = math.log10(target_ber)
    for (s0, b0), (s1, b1) in zip(pts, pts[1:]):
        if b0 == t:
            return s0
        if b0 > t >= b1:
            if b1 == t:
                return s1
            if math.isinf(b1):
                raise RangeError(f"zero-error point at {s1} dB; cannot interpolate to {target_ber:g}")
            return s0 + (b0 - t) / (b0 - b1) * (s1 - s0)
    if pts and pts[-1][1] == t:
        return pts[-1][0]
    if not pts:
        raise RangeError("empty curve")
    hint = "raise the grid" if pts[-1][1] > t else "lower the grid"
    raise RangeError(
        f"target BER {target_ber:g} not bracketed on [{pts[0][0]}, {pts[-1][0]}] dB ({hint})")


@dataclass(frozen=True)
class SearchSettings:
    """Adaptive required-SNR search: step until bracketed, then halve ``refine`` times."""

    start_db: float = 17.5
    step_db: float = 0.25
    refine: int = 1
    lo_db: float = 5.0
    hi_db: float = 40.0
    max_frames: int = 4000
    min_errors: int = MIN_ERRORS
    target_ber: float = TARGET_BER


def search_required_snr(evaluate, settings: SearchSettings, label: str = "") -> tuple[float, BerCurve]:
    """Locate the target crossing of a monotone waterfall.

    ``evaluate(snr_db) -> ErrorCounts``. Points are on a grid of
    ``step_db / 2**refine`` anchored at ``start_db``, so curves searched with
    the same settings share SNR points.
    """
    t = math.log10(settings.target_ber)
    curve = BerCurve(label, [])
    cache: dict[float, BerPoint] = {}

    def at(s: float) -> BerPoint:
        s = round(s, 9)
        if not settings.lo_db <= s <= settings.hi_db:
            raise RangeError(f"required SNR outside [{settings.lo_db}, {settings.hi_db}] dB")
        if s not in cache:
            cache[s] = BerPoint(s, evaluate(s))
            curve.add(cache[s])
        return cache[s]

    step = settings.step_db
    s = settings.start_db
    if at(s).log_ber > t:
        while at(s + step).log_ber > t:
            s += step
        lo, hi = s, s + step
    else:
        while at(s - step).log_ber <= t:
            s -= step
        lo, hi = s - step, s
    for _ in range(settings.refine):
        mid = (lo + hi) / 2
        if at(mid).log_ber > t:
            lo = mid
        else:
            hi = mid
    req = required_snr(BerCurve(label, [cache[round(lo, 9)], cache[round(hi, 9)]]), settings.target_ber)
    return req, curve
