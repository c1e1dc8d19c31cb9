"""Third-order Volterra equalizer with a closed-form MMSE fit.

Only odd orders are used (the channel nonlinearity is odd), so the model is

    xhat_n = sum_i h1[i] y[n+i] + sum_{(i,j,k)} h3[ijk] y[n+i] y[n+j] y[n+k]

with ``i`` in ``[-L, L]`` and ordered triples ``i >= j >= k``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import cached_property

import numpy as np
import scipy.linalg

from . import chansim
from .chansim import ChannelConfig

DEFAULT_MEMORY = 4


@dataclass(frozen=True)
class VolterraIndexSet:
    L: int
    triples: tuple[tuple[int, int, int], ...]

    def __len__(self) -> int:
        return len(self.triples)

    @cached_property
    def offsets(self) -> np.ndarray:
        """``(n_triples, 3)`` window positions (offset + L) of each factor."""
        return np.array(self.triples, dtype=np.int64).reshape(-1, 3) + self.L

    @property
    def n1(self) -> int:
        return 2 * self.L + 1


def build_index_set(L: int) -> VolterraIndexSet:
    """Triples ``(i, j, k)`` with ``i in [-L, L]``, ``j in [-L, i]``, ``k in [-L, j]``."""
    if L < 0:
        raise ValueError("L must be non-negative")
    triples = tuple((i, j, k) for i in range(-L, L + 1) for j in range(-L, i + 1) for k in range(-L, j + 1))
    return VolterraIndexSet(L, triples)


def windows(y: np.ndarray, L: int) -> np.ndarray:
    """Zero-padded ``(..., N, 2L+1)`` windows; column ``i + L`` holds ``y[n+i]``."""
    pad = [(0, 0)] * (y.ndim - 1) + [(L, L)]
    return np.lib.stride_tricks.sliding_window_view(np.pad(y, pad), 2 * L + 1, axis=-1)


def cubic_terms(y1: np.ndarray, iset: VolterraIndexSet) -> np.ndarray:
    o = iset.offsets
    return y1[..., o[:, 0]] * y1[..., o[:, 1]] * y1[..., o[:, 2]]


def build_features(y: np.ndarray, n: int, iset: VolterraIndexSet):
    """First- and third-order feature vectors for output symbol ``n``."""
    L = iset.L
    y = np.asarray(y, dtype=float)
    if n - L < 0 or n + L >= y.shape[-1]:
        raise IndexError(f"window [{n - L}, {n + L}] leaves the sequence of length {y.shape[-1]}")
    y1 = y[..., n - L : n + L + 1]
    return y1, cubic_terms(y1, iset)


def feature_matrix(y: np.ndarray, iset: VolterraIndexSet) -> tuple[np.ndarray, np.ndarray]:
    """Stacked features for every position of ``y`` (zero padded at the ends)."""
    y1 = windows(np.asarray(y, dtype=float), iset.L)
    return y1, cubic_terms(y1, iset)


@dataclass(frozen=True, eq=False)
class VolterraModel:
    h1: np.ndarray
    h3: np.ndarray
    index_set: VolterraIndexSet
    train_snr_db: float = math.nan

    def __post_init__(self):
        if self.h1.shape != (self.index_set.n1,) or self.h3.shape != (len(self.index_set),):
            raise ValueError("weight shapes do not match the index set")

    @property
    def L(self) -> int:
        return self.index_set.L

    @property
    def weights(self) -> np.ndarray:
        return np.concatenate([self.h1, self.h3])

    def apply(self, y: np.ndarray) -> np.ndarray:
        """Equalize along the last axis of ``y``."""
        y1, y3 = feature_matrix(y, self.index_set)
        return y1 @ self.h1 + y3 @ self.h3

    def nonlinearity_ratio(self, ew2: float) -> float:
        """``E[w^2] |h3| / |h1|`` with Euclidean norms."""
        return float(ew2 * np.linalg.norm(self.h3) / np.linalg.norm(self.h1))

    def scaled(self, a: float) -> "VolterraModel":
        return VolterraModel(a * self.h1, a * self.h3, self.index_set, self.train_snr_db)

    def __add__(self, other: "VolterraModel") -> "VolterraModel":
        return VolterraModel(self.h1 + other.h1, self.h3 + other.h3, self.index_set, self.train_snr_db)

    @classmethod
    def identity(cls, L: int) -> "VolterraModel":
        iset = build_index_set(L)
        h1 = np.zeros(iset.n1)
        h1[L] = 1.0
        return cls(h1, np.zeros(len(iset)), iset)

    # -- persistence ------------------------------------------------------

    def dumps(self) -> str:
        """Text form: header, then h1 and h3 one value per line (repr precision)."""
        head = f"volterra L={self.L} n1={self.index_set.n1} n3={len(self.index_set)} train_snr_db={self.train_snr_db!r}"
        return "\n".join([head, *map(repr, self.h1.tolist()), *map(repr, self.h3.tolist())]) + "\n"

    @classmethod
    def loads(cls, text: str) -> "VolterraModel":
        lines = text.split("\n")
        fields = dict(tok.split("=", 1) for tok in lines[0].split()[1:])
        if not lines[0].startswith("volterra"):
            raise ValueError("not a Volterra weight file")
        L = int(fields["L"])
        iset = build_index_set(L)
        vals = np.array([float(v) for v in lines[1:] if v.strip()])
        if len(vals) != iset.n1 + len(iset):
            raise ValueError("weight count does not match header")
        return cls(vals[: iset.n1], vals[iset.n1 :], iset, float(fields.get("train_snr_db", "nan")))


class GramAccumulator:
    """Streaming normal equations for the stacked ``[Y1 | Y3]`` design."""

    def __init__(self, iset: VolterraIndexSet):
        self.iset = iset
        d = iset.n1 + len(iset)
        self.G = np.zeros((d, d))
        self.b = np.zeros(d)
        self.xx = 0.0
        self.count = 0

    def add(self, y1: np.ndarray, y3: np.ndarray, x: np.ndarray):
        """Rank-k update with rows of already-built features."""
        phi = np.concatenate([y1.reshape(-1, y1.shape[-1]), y3.reshape(-1, y3.shape[-1])], axis=1)
        x = np.asarray(x, dtype=float).reshape(-1)
        self.G += phi.T @ phi
        self.b += phi.T @ x
        self.xx += float(x @ x)
        self.count += len(x)

    def add_sequence(self, y: np.ndarray, x: np.ndarray, margin: int = 0, chunk: int = 8192):
        """Accumulate every interior position of ``y`` (time on the last axis)."""
        y = np.atleast_2d(y)
        x = np.atleast_2d(x)
        stop = y.shape[-1] - margin
        for row_y, row_x in zip(y.reshape(-1, y.shape[-1]), x.reshape(-1, x.shape[-1])):
            y1_all = windows(row_y, self.iset.L)
            for s in range(margin, stop, chunk):
                e = min(s + chunk, stop)
                y1 = y1_all[s:e]
                self.add(y1, cubic_terms(y1, self.iset), row_x[s:e])

    def solve(self, train_snr_db: float = math.nan, ridge: float = 1e-8, refine: int = 3) -> VolterraModel:
        return _solve(self.G, self.b, self.iset, train_snr_db, ridge, refine, self.count)


def _solve(G, b, iset, train_snr_db, ridge, refine, n_rows):
    d = G.shape[0]
    if n_rows < 10 * d:
        raise ValueError(f"need at least {10 * d} rows for {d} features, got {n_rows}")
    lam = ridge * np.trace(G) / d
    try:
        factor = scipy.linalg.cho_factor(G + lam * np.eye(d))
    except np.linalg.LinAlgError:
        cond = np.linalg.cond(G)
        raise np.linalg.LinAlgError(f"Volterra normal matrix not positive definite after ridge (cond={cond:.3g})")
    h = scipy.linalg.cho_solve(factor, b)
    # iterative refinement toward the unregularised normal-equation solution
    for _ in range(refine):
        h = h + scipy.linalg.cho_solve(factor, b - G @ h)
    if not np.all(np.isfinite(h)):
        raise np.linalg.LinAlgError(f"non-finite Volterra weights (cond={np.linalg.cond(G):.3g})")
    return VolterraModel(h[: iset.n1].copy(), h[iset.n1 :].copy(), iset, train_snr_db)


def fit_mmse(Y1: np.ndarray, Y3: np.ndarray, x: np.ndarray, iset: VolterraIndexSet | None = None,
             train_snr_db: float = math.nan, ridge: float = 1e-8, refine: int = 3) -> VolterraModel:
    """Solve the block normal equations for stacked features and targets."""
    if iset is None:
        n1 = Y1.shape[-1]
        iset = build_index_set((n1 - 1) // 2)
    acc = GramAccumulator(iset)
    acc.add(Y1, Y3, x)
    return acc.solve(train_snr_db, ridge, refine)


def apply(model: VolterraModel, y: np.ndarray) -> np.ndarray:
    return model.apply(y)


def training_components(cfg: ChannelConfig, snr_db: float, n_symbols: int, seed: int, fir=None):
    """Signal and noise parts ``(w, z, x, margin)`` of the variant-a chain at ``snr_db``.

    Positions within ``margin`` of either end are transients and should not
    be trained on.
    """
    if fir is None:
        fir = chansim.fit_link_fir(cfg, snr_db, seed)
    rng = chansim.substream(seed, chansim.TAG_TRAIN)
    block = 8192
    n_blocks = max(1, math.ceil(n_symbols / block))
    g = cfg.guard
    labels = rng.integers(0, 2**chansim.PAM8.M, size=(n_blocks, block + 2 * g))
    x = chansim.PAM8.levels[labels]
    normal = rng.standard_normal((n_blocks, (block + 2 * g) * cfg.sps))
    w, z = chansim.channel_components(x, normal, cfg, snr_db, fir)
    return w, z, x, g


def training_pairs(cfg: ChannelConfig, snr_db: float, n_symbols: int, seed: int, fir=None):
    """Labelled ``(y, x, margin)`` streams from the variant-a chain at ``snr_db``."""
    w, z, x, g = training_components(cfg, snr_db, n_symbols, seed, fir)
    return w + z, x, g


def fit_components(w, z, x, margin: int, L: int = DEFAULT_MEMORY, train_snr_db: float = math.nan) -> VolterraModel:
    acc = GramAccumulator(build_index_set(L))
    acc.add_sequence(w + z, x, margin=margin)
    return acc.solve(train_snr_db)


def train_at_snr(cfg: ChannelConfig, snr_db: float, n_symbols: int = 200_000, L: int = DEFAULT_MEMORY,
                 seed: int | None = None, fir=None) -> VolterraModel:
    """Fit a Volterra equalizer on data generated at ``snr_db`` (``inf`` = noise free)."""
    if n_symbols < 1:
        raise ValueError("need at least one training symbol")
    seed = cfg.seed if seed is None else seed
    return fit_components(*training_components(cfg, snr_db, n_symbols, seed, fir), L=L, train_snr_db=snr_db)
