"""LDPC codes: alist parsing, systematic encoding, sum-product decoding.

Messages live on edges.  Edges are stored check-major, and every check's
edges are also laid out in a padded ``(n_checks, dmax)`` slot table so the
leave-one-out tanh product is a prefix/suffix product with no division.
One flooding iteration (:func:`bp_iteration`) can record what its adjoint
(:func:`bp_iteration_backward`) needs, which is how the neural equalizer
trains through unrolled BP.
"""

from __future__ import annotations

from dataclasses import dataclass
from importlib import resources
from pathlib import Path

import numpy as np
import scipy.sparse as sp

from .chansim import LLR_MAX

TANH_BOUND = 1.0 - 1e-12
DEFAULT_ITERATIONS = 50


class AlistError(ValueError):
    pass


class RankDeficientError(AlistError):
    def __init__(self, rows):
        self.rows = list(rows)
        super().__init__(f"parity-check matrix is rank deficient; dependent rows: {self.rows}")


class LdpcCode:
    """Binary LDPC code given by its parity-check adjacency."""

    def __init__(self, n: int, check_to_var: list[list[int]]):
        self.n = int(n)
        self.m = len(check_to_var)
        self.check_to_var = [sorted(int(v) for v in row) for row in check_to_var]
        var_to_check: list[list[int]] = [[] for _ in range(self.n)]
        for c, row in enumerate(self.check_to_var):
            if len(set(row)) != len(row):
                raise AlistError(f"check {c} lists a variable twice")
            for v in row:
                if not 0 <= v < self.n:
                    raise AlistError(f"check {c} references variable {v} outside [0, {self.n})")
                var_to_check[v].append(c)
        self.var_to_check = var_to_check

        edge_check = np.repeat(np.arange(self.m), [len(r) for r in self.check_to_var])
        edge_var = np.fromiter((v for r in self.check_to_var for v in r), dtype=np.int64, count=len(edge_check))
        self.edge_check, self.edge_var = edge_check, edge_var
        self.n_edges = len(edge_var)
        self.H = sp.csr_matrix((np.ones(self.n_edges, dtype=np.int8), (edge_check, edge_var)), shape=(self.m, self.n))
        # (E, n) incidence used to sum edge messages into variables
        self.edge_to_var = sp.csr_matrix((np.ones(self.n_edges), (np.arange(self.n_edges), edge_var)),
                                         shape=(self.n_edges, self.n))
        self.var_gather = self.edge_to_var.T.tocsr()

        deg = np.array([len(r) for r in self.check_to_var])
        self.dmax = int(deg.max()) if self.m else 0
        slots = np.full((self.m, self.dmax), self.n_edges, dtype=np.int64)  # n_edges = pad sentinel
        start = np.concatenate(([0], np.cumsum(deg)[:-1]))
        for c in range(self.m):
            slots[c, : deg[c]] = start[c] + np.arange(deg[c])
        self.slots = slots
        self.slots_t = np.ascontiguousarray(slots.T)
        # flat position of each edge in the (dmax, m) slot layout
        self.edge_slot = ((np.arange(self.n_edges) - start[edge_check]) * self.m + edge_check).astype(np.int64)

        self._build_encoder()

    # -- construction ------------------------------------------------------

    @classmethod
    def from_alist(cls, text: str) -> "LdpcCode":
        return load_alist(text)

    @classmethod
    def from_dense(cls, H) -> "LdpcCode":
        H = np.asarray(H) % 2
        return cls(H.shape[1], [list(np.flatnonzero(row)) for row in H])

    def dense(self) -> np.ndarray:
        return self.H.toarray().astype(np.uint8)

    @property
    def rate(self) -> float:
        return self.k / self.n

    def _build_encoder(self):
        """Reduce H to ``[A | I]`` over GF(2), pivoting from the rightmost column."""
        m, n = self.m, self.n
        packed, pivot_cols, pivot_rows, free_rows = _gf2_reduce(np.packbits(self.dense(), axis=1), n, m)
        if len(pivot_cols) < m:
            # redo with row bookkeeping to name the dependent rows
            track = np.concatenate([self.dense(), np.eye(m, dtype=np.uint8)], axis=1)
            packed_t = np.packbits(track, axis=1)
            _, _, _, free_t = _gf2_reduce(packed_t, n, m, cols=range(n - 1, -1, -1))
            combo = np.unpackbits(packed_t, axis=1, count=n + m)[:, n:]
            rows = sorted(set(np.flatnonzero(combo[np.flatnonzero(free_t)].any(axis=0)).tolist()))
            raise RankDeficientError(rows)
        reduced = np.unpackbits(packed, axis=1, count=n)
        pivot_cols = np.array(pivot_cols)
        info = np.setdiff1d(np.arange(n), pivot_cols)
        self.k = n - m
        self.info_positions = info
        self.parity_positions = pivot_cols
        # parity bit at pivot_cols[i] = reduced[pivot_rows[i], info] . info_bits
        self._A = reduced[np.array(pivot_rows)][:, info].astype(np.float32)

    # -- coding -----------------------------------------------------------

    def encode(self, info) -> np.ndarray:
        """Systematic encoding; the info bits occupy ``info_positions``."""
        info = np.asarray(info)
        if info.shape[-1] != self.k:
            raise ValueError(f"expected {self.k} info bits, got {info.shape[-1]}")
        parity = (info.astype(np.float32) @ self._A.T) % 2
        cw = np.zeros(info.shape[:-1] + (self.n,), dtype=np.uint8)
        cw[..., self.info_positions] = info
        cw[..., self.parity_positions] = parity.astype(np.uint8)
        return cw

    def syndrome_weight(self, bits) -> np.ndarray:
        bits = np.asarray(bits)
        if bits.shape[-1] != self.n:
            raise ValueError(f"expected {self.n} bits, got {bits.shape[-1]}")
        flat = bits.reshape(-1, self.n).astype(np.int32)
        s = (self.H @ flat.T).T % 2
        return s.sum(axis=-1).reshape(bits.shape[:-1])

    def syndrome(self, bits) -> bool | np.ndarray:
        """True iff ``H bits = 0``; vectorized over leading axes."""
        ok = self.syndrome_weight(bits) == 0
        return bool(ok) if np.ndim(ok) == 0 else ok

    def to_alist(self) -> str:
        cols = self.var_to_check
        rows = self.check_to_var
        dv = max(len(c) for c in cols)
        dc = max(len(r) for r in rows)
        lines = [f"{self.n} {self.m}", f"{dv} {dc}",
                 " ".join(str(len(c)) for c in cols), " ".join(str(len(r)) for r in rows)]
        for c in cols:
            lines.append(" ".join(str(x + 1) for x in c + [-1] * (dv - len(c))))
        for r in rows:
            lines.append(" ".join(str(x + 1) for x in r + [-1] * (dc - len(r))))
        return "\n".join(lines) + "\n"


def _gf2_reduce(packed: np.ndarray, n: int, m: int, cols=None):
    """In-place Gauss-Jordan on bit-packed rows; returns pivots found."""
    pivot_cols, pivot_rows = [], []
    free_rows = np.ones(m, dtype=bool)
    for col in (range(n - 1, -1, -1) if cols is None else cols):
        if len(pivot_cols) == m:
            break
        byte, bit = divmod(col, 8)
        has = (packed[:, byte] & np.uint8(1 << (7 - bit))) != 0
        cand = np.flatnonzero(has & free_rows)
        if cand.size == 0:
            continue
        p = cand[0]
        others = np.flatnonzero(has)
        others = others[others != p]
        packed[others] ^= packed[p]
        free_rows[p] = False
        pivot_cols.append(col)
        pivot_rows.append(p)
    return packed, pivot_cols, pivot_rows, free_rows


def syndrome(bits, code: LdpcCode):
    return code.syndrome(bits)


def encode(info, code: LdpcCode) -> np.ndarray:
    return code.encode(info)


def load_alist(text: str) -> LdpcCode:
    """Parse MacKay alist text (1-based indices, zero padding allowed)."""
    try:
        tokens = [int(t) for t in text.split()]
    except ValueError as exc:
        raise AlistError(f"non-integer token in alist: {exc}") from None
    if len(tokens) < 4:
        raise AlistError("alist header is truncated")
    n, m, dv, dc = tokens[:4]
    pos = 4
    if n <= 0 or m <= 0:
        raise AlistError("alist header needs positive n and m")

    def take(count):
        nonlocal pos
        if pos + count > len(tokens):
            raise AlistError("alist body is truncated")
        out = tokens[pos : pos + count]
        pos += count
        return out

    col_deg = take(n)
    row_deg = take(m)
    if max(col_deg) > dv or max(row_deg) > dc:
        raise AlistError("degree exceeds declared maximum")
    if sum(col_deg) != sum(row_deg):
        raise AlistError("column and row degree totals differ")
    cols = []
    for j in range(n):
        entries = [e for e in take(dv) if e > 0]
        if len(entries) != col_deg[j]:
            raise AlistError(f"column {j + 1} lists {len(entries)} entries, degree says {col_deg[j]}")
        cols.append(entries)
    # row lists may use either padded (dc per row) or exact-degree layout
    remaining = len(tokens) - pos
    padded = remaining >= m * dc
    rows = []
    for i in range(m):
        entries = [e for e in take(dc if padded else row_deg[i]) if e > 0]
        if len(entries) != row_deg[i]:
            raise AlistError(f"row {i + 1} lists {len(entries)} entries, degree says {row_deg[i]}")
        rows.append([e - 1 for e in entries])
    from_cols = [[] for _ in range(m)]
    for j, entries in enumerate(cols):
        for e in entries:
            if not 1 <= e <= m:
                raise AlistError(f"column {j + 1} references check {e} outside [1, {m}]")
            from_cols[e - 1].append(j)
    if [sorted(r) for r in rows] != [sorted(r) for r in from_cols]:
        raise AlistError("row and column lists are inconsistent")
    return LdpcCode(n, rows)


def read_alist(path) -> LdpcCode:
    return load_alist(Path(path).read_text())


def default_code() -> LdpcCode:
    """Desk-scale rate-0.8 code shipped with the package (n = 4020)."""
    return load_alist(resources.files("nleq.data").joinpath("desk_r08_n4020.alist").read_text())


def make_ira_code(n: int, k: int, col_weight: int = 3, seed: int = 0) -> LdpcCode:
    """Random irregular repeat-accumulate code without 4-cycles.

    Info columns have weight ``col_weight``; the parity part is a staircase
    (dual diagonal), so ``H`` is full rank and the first ``k`` bits are the
    systematic ones.
    """
    m = n - k
    rng = np.random.default_rng(seed)
    cap = np.full(m, (k * col_weight) // m)
    cap[rng.permutation(m)[: (k * col_weight) % m]] += 1
    rows: list[list[int]] = [[] for _ in range(m)]
    pairs = set()
    for i in range(m):
        rows[i].append(k + i)
        if i + 1 < m:
            rows[i + 1].append(k + i)
            pairs.add((i, i + 1))
    for col in rng.permutation(k):
        for _attempt in range(200):
            avail = np.flatnonzero(cap > 0)
            if avail.size < col_weight:
                raise RuntimeError("ran out of check capacity")
            p = cap[avail].astype(float)
            pick = rng.choice(avail, size=col_weight, replace=False, p=p / p.sum())
            pick.sort()
            new = {(a, b) for ai, a in enumerate(pick) for b in pick[ai + 1 :]}
            if not new & pairs or _attempt == 199:
                break
        pairs |= new
        for r in pick:
            rows[r].append(int(col))
            cap[r] -= 1
    return LdpcCode(n, rows)


# ---------------------------------------------------------------------------
# Belief propagation
# ---------------------------------------------------------------------------


@dataclass
class BpState:
    """Edge messages of one (batched) BP run; ``u`` is the per-variable sum."""

    c2v: np.ndarray
    v2c: np.ndarray
    u: np.ndarray

    @classmethod
    def zeros(cls, code: LdpcCode, batch_shape=()) -> "BpState":
        e = np.zeros(tuple(batch_shape) + (code.n_edges,))
        return cls(e, e.copy(), np.zeros(tuple(batch_shape) + (code.n,)))


def _gather(code: LdpcCode, per_var: np.ndarray) -> np.ndarray:
    return per_var[..., code.edge_var]


def _scatter(code: LdpcCode, per_edge: np.ndarray) -> np.ndarray:
    flat = per_edge.reshape(-1, code.n_edges)
    out = np.asarray((code.var_gather @ flat.T).T)
    return out.reshape(per_edge.shape[:-1] + (code.n,))


def _leave_one_out(code: LdpcCode, t: np.ndarray):
    """Per-edge product of the other tanh values on the same check."""
    ext = np.concatenate([t, np.ones(t.shape[:-1] + (1,))], axis=-1)
    tp = ext[..., code.slots_t]  # (..., dmax, m)
    d = code.dmax
    pre = np.empty_like(tp)
    suf = np.empty_like(tp)
    pre[..., 0, :] = 1.0
    for i in range(1, d):
        np.multiply(pre[..., i - 1, :], tp[..., i - 1, :], out=pre[..., i, :])
    suf[..., d - 1, :] = 1.0
    for i in range(d - 2, -1, -1):
        np.multiply(suf[..., i + 1, :], tp[..., i + 1, :], out=suf[..., i, :])
    prod = (pre * suf).reshape(t.shape[:-1] + (-1,))[..., code.edge_slot]
    return prod, (tp, pre, suf)


def _leave_one_out_backward(code: LdpcCode, g_prod: np.ndarray, saved) -> np.ndarray:
    tp, pre, suf = saved
    lead = g_prod.shape[:-1]
    gP = np.zeros(lead + (code.dmax * code.m,))
    gP[..., code.edge_slot] = g_prod
    gP = gP.reshape(tp.shape)
    g_pre = gP * suf
    g_suf = gP * pre
    gt = np.zeros_like(tp)
    d = code.dmax
    # pre[i+1] = pre[i] * t[i]; acc is the total adjoint of pre[i+1]
    if d > 1:
        acc = g_pre[..., d - 1, :].copy()
        for i in range(d - 2, -1, -1):
            gt[..., i, :] += acc * pre[..., i, :]
            acc = acc * tp[..., i, :] + g_pre[..., i, :]
        # suf[i-1] = suf[i] * t[i]; acc is the total adjoint of suf[i-1]
        acc = g_suf[..., 0, :].copy()
        for i in range(1, d):
            gt[..., i, :] += acc * suf[..., i, :]
            acc = acc * tp[..., i, :] + g_suf[..., i, :]
    return gt.reshape(lead + (-1,))[..., code.edge_slot]


def bp_iteration(c2v: np.ndarray, l_in: np.ndarray, code: LdpcCode, record: bool = False):
    """One flooding iteration from check messages ``c2v`` and channel LLRs ``l_in``.

    Returns ``(c2v_new, v2c, u_new, l_out)`` and, with ``record``, a cache
    for :func:`bp_iteration_backward`.
    """
    u = _scatter(code, c2v)
    raw = _gather(code, l_in + u) - c2v
    v2c = np.clip(raw, -LLR_MAX, LLR_MAX)
    t = np.tanh(0.5 * v2c)
    prod, saved = _leave_one_out(code, t)
    pc = np.clip(prod, -TANH_BOUND, TANH_BOUND)
    c2v_new = 2.0 * np.arctanh(pc)
    u_new = _scatter(code, c2v_new)
    l_out = u_new + l_in
    cache = None
    if record:
        cache = {"raw": raw, "t": t, "prod": prod, "pc": pc, "saved": saved}
    return c2v_new, v2c, u_new, l_out, cache


def bp_iteration_backward(code: LdpcCode, cache, g_c2v_new: np.ndarray | None, g_out: np.ndarray | None):
    """Adjoint of :func:`bp_iteration`: returns ``(g_c2v_prev, g_l_in)``.

    Clamped regions pass zero gradient.
    """
    shape = cache["t"].shape
    g_c2v = np.zeros(shape) if g_c2v_new is None else g_c2v_new.copy()
    g_l_in = np.zeros(shape[:-1] + (code.n,))
    if g_out is not None:
        g_l_in += g_out
        g_c2v += _gather(code, g_out)
    pc, prod = cache["pc"], cache["prod"]
    g_prod = g_c2v * 2.0 / (1.0 - pc * pc)
    g_prod[np.abs(prod) > TANH_BOUND] = 0.0
    g_t = _leave_one_out_backward(code, g_prod, cache["saved"])
    t = cache["t"]
    g_v2c = g_t * 0.5 * (1.0 - t * t)
    g_v2c[np.abs(cache["raw"]) > LLR_MAX] = 0.0
    g_var = _scatter(code, g_v2c)
    g_l_in += g_var
    g_c2v_prev = _gather(code, g_var) - g_v2c
    return g_c2v_prev, g_l_in


def bp_step(state: BpState, l_in: np.ndarray, code: LdpcCode):
    """One BP iteration on ``state``; returns ``(new_state, l_out)``."""
    c2v, v2c, u, l_out, _ = bp_iteration(state.c2v, l_in, code)
    return BpState(c2v, v2c, u), l_out


def hard_bits(llr: np.ndarray) -> np.ndarray:
    return (llr < 0).astype(np.uint8)


def decode(llr: np.ndarray, code: LdpcCode, n_iter: int = DEFAULT_ITERATIONS, early_stop: bool = True,
           state: BpState | None = None):
    """Flooding sum-product decoding of channel LLRs (leading axes batch frames).

    Returns ``(l_out, bits, converged, iterations)``.  Frames stop
    individually once their hard decision has zero syndrome.
    """
    if n_iter < 1:
        raise ValueError("n_iter must be >= 1")
    llr = np.asarray(llr, dtype=float)
    single = llr.ndim == 1
    l_in = np.atleast_2d(llr).reshape(-1, code.n)
    B = l_in.shape[0]
    c2v = np.zeros((B, code.n_edges)) if state is None else state.c2v.reshape(B, -1).copy()
    l_out = l_in.copy()
    converged = np.zeros(B, dtype=bool)
    iters = np.zeros(B, dtype=np.int64)
    active = np.arange(B)
    for _ in range(n_iter):
        c_new, _, _, lo, _ = bp_iteration(c2v[active], l_in[active], code)
        c2v[active] = c_new
        l_out[active] = lo
        iters[active] += 1
        if early_stop:
            ok = code.syndrome(hard_bits(lo))
            converged[active[ok]] = True
            active = active[~ok]
            if active.size == 0:
                break
    if not early_stop:
        converged = np.atleast_1d(code.syndrome(hard_bits(l_out)))
    bits = hard_bits(l_out)
    shape = llr.shape
    if single:
        return l_out[0], bits[0], bool(converged[0]), int(iters[0])
    return l_out.reshape(shape), bits.reshape(shape), converged.reshape(shape[:-1]), iters.reshape(shape[:-1])
