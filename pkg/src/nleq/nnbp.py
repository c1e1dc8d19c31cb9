"""Iterative NN equalizer with unrolled belief propagation.

Each stage is a pair of small sliding-window networks (one per lower-order
bit of the 8-PAM label) reading ``tanh(l/2)`` of the demapper LLRs and, from
the second stage on, of the BP posterior of the previous stage. Its outputs
replace the channel LLRs of those bits at the input of a fixed number of BP
iterations. The sign bit is passed through untouched.

Frames are ``(B, T, S, M)`` arrays: batch, time, stream, bit. Flattening the
last three axes in C order gives codeword order. Gradients are written out
by hand layer by layer and certified against finite differences in the
tests.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from . import chansim, ldpc
from .chansim import LLR_MAX, ChannelConfig

NN_BITS = (1, 2)
PARAMS = ("wR", "wB", "b1", "w2", "b2", "w3", "b3")


class TrainingDivergedError(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# Types
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class StageDims:
    L: int = 4
    M: int = 3
    n_q: int = 40
    n_r: int = 40

    def __post_init__(self):
        if self.L < 0 or self.M < 2 or self.n_q < 1 or self.n_r < 1:
            raise ValueError(f"invalid stage dimensions {self}")

    @property
    def window(self) -> int:
        return 2 * self.L + 1

    @property
    def n_in(self) -> int:
        return self.window * self.M

    def shapes(self) -> dict[str, tuple[int, ...]]:
        nb = len(NN_BITS)
        return {
            "wR": (nb, self.n_q, self.window, self.M),
            "wB": (nb, self.n_q, self.window, self.M),
            "b1": (nb, self.n_q),
            "w2": (nb, self.n_r, self.n_q),
            "b2": (nb, self.n_r),
            "w3": (nb, self.n_r),
            "b3": (nb,),
        }


@dataclass(frozen=True, eq=False)
class EqualizerStage:
    """Weights of one stage; leading axis of every tensor indexes bits 1 and 2."""

    dims: StageDims
    params: dict[str, np.ndarray]

    def __post_init__(self):
        shapes = self.dims.shapes()
        if set(self.params) != set(shapes):
            raise ValueError(f"expected parameters {sorted(shapes)}")
        for k, s in shapes.items():
            if self.params[k].shape != s:
                raise ValueError(f"{k} has shape {self.params[k].shape}, expected {s}")
            if not np.all(np.isfinite(self.params[k])):
                raise ValueError(f"non-finite values in {k}")

    def __getitem__(self, k: str) -> np.ndarray:
        return self.params[k]

    def updated(self, **arrays) -> "EqualizerStage":
        return EqualizerStage(self.dims, {**self.params, **arrays})

    def flat(self) -> np.ndarray:
        return np.concatenate([self.params[k].ravel() for k in PARAMS])

    @classmethod
    def zeros(cls, dims: StageDims) -> "EqualizerStage":
        return cls(dims, {k: np.zeros(s) for k, s in dims.shapes().items()})


@dataclass(frozen=True)
class Schedule:
    n_stages: int = 3
    n_bn: int = 5
    n_res: int = 40
    lambdas: tuple[float, float] = (1.0, 1.0)
    budget: int | None = None
    # keep BP check messages from one stage to the next instead of restarting
    carry_messages: bool = False

    def __post_init__(self):
        if self.n_stages < 1 or self.n_bn < 1 or self.n_res < 1:
            raise ValueError("stage and iteration counts must be positive")
        if self.budget is not None and self.total_iterations > self.budget:
            raise ValueError(f"schedule uses {self.total_iterations} BP iterations, budget is {self.budget}")

    @property
    def total_iterations(self) -> int:
        return self.n_bn * (self.n_stages - 1) + self.n_res

    def iterations(self, k: int) -> int:
        return self.n_res if k == self.n_stages - 1 else self.n_bn

    @classmethod
    def for_stages(cls, n_stages: int, n_bn: int = 5, total: int = ldpc.DEFAULT_ITERATIONS, **kw) -> "Schedule":
        """Fill the BP budget: the last stage gets what the others leave."""
        return cls(n_stages, n_bn, total - n_bn * (n_stages - 1), budget=total, **kw)


@dataclass(frozen=True, eq=False)
class LlrFrame:
    """``(..., T, S, M)`` LLRs tagged with their role (R, N, B or U); clipped to ±LLR_MAX."""

    values: np.ndarray
    kind: str = "R"

    def __post_init__(self):
        if self.kind not in ("R", "N", "B", "U"):
            raise ValueError(f"unknown LLR kind {self.kind!r}")
        v = np.asarray(self.values, dtype=float)
        if not np.all(np.isfinite(v)):
            raise ValueError("LLR frame contains non-finite values")
        object.__setattr__(self, "values", np.clip(v, -LLR_MAX, LLR_MAX))


# ---------------------------------------------------------------------------
# Initialization and persistence
# ---------------------------------------------------------------------------


def init_stage(dims: StageDims, rng: np.random.Generator, first: bool = True) -> EqualizerStage:
    """Fan-in scaled uniform init; small output layer, zero ``b3``, zero ``wB`` on stage 1."""
    sh = dims.shapes()
    a1 = math.sqrt(6.0 / (2 * dims.n_in))
    a2 = math.sqrt(6.0 / dims.n_q)
    p = {
        "wR": rng.uniform(-a1, a1, sh["wR"]),
        "wB": rng.uniform(-a1, a1, sh["wB"]),
        "b1": np.zeros(sh["b1"]),
        "w2": rng.uniform(-a2, a2, sh["w2"]),
        "b2": np.zeros(sh["b2"]),
        "w3": rng.uniform(-1e-2, 1e-2, sh["w3"]),
        "b3": np.zeros(sh["b3"]),
    }
    if first:
        p["wB"] = np.zeros(sh["wB"])
    return EqualizerStage(dims, p)


def dumps(stages: list[EqualizerStage], schedule: Schedule) -> str:
    """Weight file: one header line, then one line per tensor.

    Tensor order: for each stage, ``wR wB b1 w2 b2 w3 b3``, each with bits 1
    and 2 stacked on the leading axis and flattened in C order.
    """
    d = stages[0].dims
    lam = ",".join(repr(x) for x in schedule.lambdas)
    head = (f"nnbp L={d.L} M={d.M} n_q={d.n_q} n_r={d.n_r} n_stages={len(stages)} "
            f"n_bn={schedule.n_bn} n_res={schedule.n_res} lambdas={lam} carry={int(schedule.carry_messages)}")
    lines = [head]
    for st in stages:
        for k in PARAMS:
            lines.append(" ".join(map(repr, st[k].ravel().tolist())))
    return "\n".join(lines) + "\n"


def loads(text: str) -> tuple[list[EqualizerStage], Schedule]:
    lines = text.rstrip("\n").split("\n")
    if not lines or not lines[0].startswith("nnbp "):
        raise ValueError("not an NN-BP weight file")
    f = dict(tok.split("=", 1) for tok in lines[0].split()[1:])
    dims = StageDims(int(f["L"]), int(f["M"]), int(f["n_q"]), int(f["n_r"]))
    n_stages = int(f["n_stages"])
    lam = tuple(float(x) for x in f["lambdas"].split(","))
    schedule = Schedule(n_stages, int(f["n_bn"]), int(f["n_res"]), lam,
                        carry_messages=bool(int(f.get("carry", "0"))))
    if len(lines) != 1 + n_stages * len(PARAMS):
        raise ValueError("tensor count does not match header")
    shapes = dims.shapes()
    stages, it = [], iter(lines[1:])
    for _ in range(n_stages):
        p = {}
        for k in PARAMS:
            vals = np.array([float(v) for v in next(it).split()])
            if vals.size != math.prod(shapes[k]):
                raise ValueError(f"wrong element count for {k}")
            p[k] = vals.reshape(shapes[k])
        stages.append(EqualizerStage(dims, p))
    return stages, schedule


def save(path, stages, schedule):
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(dumps(stages, schedule))


def load(path):
    with open(path, encoding="utf-8") as fh:
        return loads(fh.read())


# ---------------------------------------------------------------------------
# Stage forward / backward
# ---------------------------------------------------------------------------


def _windows(t: np.ndarray, L: int) -> np.ndarray:
    """``(B, T, S, M)`` -> ``(B*T*S, (2L+1)*M)`` zero-padded time windows."""
    B, T, S, M = t.shape
    pad = np.pad(t, ((0, 0), (L, L), (0, 0), (0, 0)))
    win = np.lib.stride_tricks.sliding_window_view(pad, 2 * L + 1, axis=1)  # (B, T, S, M, W)
    return np.ascontiguousarray(np.swapaxes(win, -1, -2)).reshape(B * T * S, -1)


def _unwindow(g: np.ndarray, shape, L: int) -> np.ndarray:
    """Adjoint of :func:`_windows`."""
    B, T, S, M = shape
    W = 2 * L + 1
    g = g.reshape(B, T, S, W, M)
    out = np.zeros((B, T + 2 * L, S, M))
    for i in range(W):
        out[:, i : i + T] += g[:, :, :, i, :]
    return out[:, L : L + T]


def stage_forward(stage: EqualizerStage, lR: np.ndarray, lB: np.ndarray | None = None, record: bool = False):
    """``lN`` for one stage. ``lB=None`` stands for an all-zero posterior.

    Returns ``lN`` or, with ``record``, ``(lN, cache)``.
    """
    lR = np.asarray(lR, dtype=float)
    if lR.ndim != 4 or lR.shape[-1] != stage.dims.M:
        raise ValueError(f"expected (B, T, S, {stage.dims.M}) LLRs, got {lR.shape}")
    if lB is not None and lB.shape != lR.shape:
        raise ValueError("lR and lB must have the same shape")
    d = stage.dims
    tB = None if lB is None else np.tanh(0.5 * lB)
    xR = _windows(np.tanh(0.5 * lR), d.L)
    xB = None if lB is None else _windows(tB, d.L)
    lN = lR.copy()
    per_bit = []
    for b, m in enumerate(NN_BITS):
        a1 = xR @ stage["wR"][b].reshape(d.n_q, -1).T + stage["b1"][b]
        if xB is not None:
            a1 += xB @ stage["wB"][b].reshape(d.n_q, -1).T
        h1 = np.maximum(a1, 0.0)
        a2 = h1 @ stage["w2"][b].T + stage["b2"][b]
        h2 = np.maximum(a2, 0.0)
        o = h2 @ stage["w3"][b] + stage["b3"][b]
        lN[..., m] = np.clip(o, -LLR_MAX, LLR_MAX).reshape(lR.shape[:-1])
        per_bit.append((a1, h1, a2, h2, o))
    if not record:
        return lN
    return lN, {"xR": xR, "xB": xB, "tB": tB, "shape": lR.shape, "per_bit": per_bit}


def stage_backward(stage: EqualizerStage, cache, g_lN: np.ndarray, need_input_grad: bool = False):
    """Adjoint of :func:`stage_forward`.

    Returns ``(grads, g_lB)``; ``g_lB`` is ``None`` unless requested and a
    posterior input was present. The sign-bit pass-through carries no
    weight gradient and its input gradient (to ``lR``) is not needed.
    """
    d = stage.dims
    xR, xB = cache["xR"], cache["xB"]
    grads = {k: np.zeros_like(v) for k, v in stage.params.items()}
    g_xB = np.zeros_like(xB) if (need_input_grad and xB is not None) else None
    for b, m in enumerate(NN_BITS):
        a1, h1, a2, h2, o = cache["per_bit"][b]
        go = g_lN[..., m].reshape(-1) * (np.abs(o) <= LLR_MAX)
        grads["w3"][b] = h2.T @ go
        grads["b3"][b] = go.sum()
        g_a2 = np.outer(go, stage["w3"][b]) * (a2 > 0)
        grads["w2"][b] = g_a2.T @ h1
        grads["b2"][b] = g_a2.sum(axis=0)
        g_a1 = (g_a2 @ stage["w2"][b]) * (a1 > 0)
        grads["wR"][b] = (g_a1.T @ xR).reshape(d.n_q, d.window, d.M)
        grads["b1"][b] = g_a1.sum(axis=0)
        if xB is not None:
            grads["wB"][b] = (g_a1.T @ xB).reshape(d.n_q, d.window, d.M)
            if g_xB is not None:
                g_xB += g_a1 @ stage["wB"][b].reshape(d.n_q, -1)
    g_lB = None
    if g_xB is not None:
        g_lB = _unwindow(g_xB, cache["shape"], d.L) * 0.5 * (1.0 - cache["tB"] ** 2)
    return grads, g_lB


# ---------------------------------------------------------------------------
# Unrolled network
# ---------------------------------------------------------------------------


@dataclass
class StageRecord:
    lN: np.ndarray
    lB: np.ndarray
    iterations: int
    nn_cache: dict | None = None
    bp_caches: list = field(default_factory=list)
    c2v: np.ndarray | None = None  # final check messages, kept when they carry over


def _run_bp(l_in: np.ndarray, code: ldpc.LdpcCode, n_iter: int, record: bool, c2v: np.ndarray | None = None):
    """``n_iter`` flooding iterations from ``c2v`` (zero when ``None``).

    Returns ``(l_out, caches, c2v_final)``.
    """
    if c2v is None:
        c2v = np.zeros(l_in.shape[:-1] + (code.n_edges,))
    caches = []
    l_out = l_in
    for _ in range(n_iter):
        c2v, _, _, l_out, cache = ldpc.bp_iteration(c2v, l_in, code, record)
        if record:
            caches.append(cache)
    return l_out, caches, c2v


def full_forward(stages: list[EqualizerStage], schedule: Schedule, lR: np.ndarray, code: ldpc.LdpcCode,
                 record: bool = False, last_iterations: int | None = None, first_stage: int = 0,
                 lB_init: np.ndarray | None = None, c2v_init: np.ndarray | None = None):
    """Run the stage/BP cascade; returns ``(lB_final, records)``.

    BP messages restart from zero in every stage unless the schedule carries
    them over. ``last_iterations`` overrides the iteration count after the
    last stage (training unrolls a stage with ``n_bn`` iterations).
    ``first_stage``/``lB_init``/``c2v_init`` resume from the cached state of
    frozen earlier stages.
    """
    if len(stages) != schedule.n_stages:
        raise ValueError(f"schedule expects {schedule.n_stages} stages, got {len(stages)}")
    lR = np.asarray(lR, dtype=float)
    B = lR.shape[0]
    lB = lB_init
    c2v = c2v_init if schedule.carry_messages else None
    records = []
    for k in range(first_stage, len(stages)):
        out = stage_forward(stages[k], lR, lB, record=record)
        lN, nn_cache = out if record else (out, None)
        n_it = schedule.iterations(k)
        if k == len(stages) - 1 and last_iterations is not None:
            n_it = last_iterations
        l_out, caches, c2v_out = _run_bp(lN.reshape(B, -1), code, n_it, record, c2v)
        lB = l_out.reshape(lR.shape)
        c2v = c2v_out if schedule.carry_messages else None
        records.append(StageRecord(lN, lB, n_it, nn_cache, caches, c2v))
    return lB, records


def loss(lB: np.ndarray, d: np.ndarray, lambdas=(1.0, 1.0)) -> float:
    """``sum_m lambda_m * mean_n CE(l_{n,m}, d_{n,m})`` over bits 1 and 2."""
    return float(sum(lam * np.mean(_ce(lB[..., m], d[..., m])) for lam, m in zip(lambdas, NN_BITS)))


def _ce(l, d):
    # (1-d) log(1+e^-l) + d log(1+e^l) == softplus((2d-1) l), stable for any |l|
    return np.logaddexp(0.0, (2.0 * np.asarray(d, dtype=float) - 1.0) * l)


def loss_grad(lB: np.ndarray, d: np.ndarray, lambdas=(1.0, 1.0)) -> np.ndarray:
    g = np.zeros_like(lB)
    s = 2.0 * np.asarray(d, dtype=float) - 1.0
    for lam, m in zip(lambdas, NN_BITS):
        v = s[..., m] * lB[..., m]
        n = v.size
        g[..., m] = lam * s[..., m] * _sigmoid(v) / n
    return g


def _sigmoid(v):
    return np.exp(-np.logaddexp(0.0, -v))


def backward(stages: list[EqualizerStage], schedule: Schedule, records: list[StageRecord], d: np.ndarray,
             code: ldpc.LdpcCode, lambdas=None, first_trainable: int = 0, first_stage: int = 0):
    """Exact gradients of :func:`loss` at the final posterior w.r.t. stage weights.

    ``records`` must come from ``full_forward(..., record=True)`` with the
    same ``first_stage``. Stages before ``first_trainable`` get ``None``.
    """
    lambdas = schedule.lambdas if lambdas is None else lambdas
    lB = records[-1].lB
    B = lB.shape[0]
    g_lB = loss_grad(lB, d, lambdas)
    grads: list[dict | None] = [None] * len(stages)
    g_c2v = None
    for k in range(len(stages) - 1, first_stage - 1, -1):
        rec = records[k - first_stage]
        g_out = g_lB.reshape(B, -1)
        # with carried messages, g_c2v enters as the adjoint of this stage's final c2v
        g_c2v = g_c2v if schedule.carry_messages else None
        g_lin = np.zeros_like(g_out)
        for i in range(len(rec.bp_caches) - 1, -1, -1):
            g_c2v, gl = ldpc.bp_iteration_backward(code, rec.bp_caches[i], g_c2v,
                                                   g_out if i == len(rec.bp_caches) - 1 else None)
            g_lin += gl
        need = k - 1 >= max(first_trainable, first_stage)
        g, g_lB = stage_backward(stages[k], rec.nn_cache, g_lin.reshape(lB.shape), need_input_grad=need)
        if k >= first_trainable:
            grads[k] = g
        if not need:
            break
    return grads


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class TrainHyper:
    train_snr_db: float = 17.5
    n_frames: int = 64
    batch_frames: int = 8
    epochs: int = 30
    lr: float = 2e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    dims: StageDims = StageDims()
    seed: int = 0
    warm_start: bool = True

    def __post_init__(self):
        if self.n_frames < 1 or self.batch_frames < 1 or self.epochs < 1 or not self.lr > 0:
            raise ValueError("invalid training hyperparameters")


class Adam:
    def __init__(self, stage: EqualizerStage, lr: float, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr, self.b1, self.b2, self.eps = lr, beta1, beta2, eps
        self.m = {k: np.zeros_like(v) for k, v in stage.params.items()}
        self.v = {k: np.zeros_like(v) for k, v in stage.params.items()}
        self.t = 0

    def step(self, stage: EqualizerStage, grads: dict, frozen=()) -> EqualizerStage:
        self.t += 1
        c1 = 1 - self.b1**self.t
        c2 = 1 - self.b2**self.t
        new = {}
        for k, p in stage.params.items():
            if k in frozen:
                new[k] = p
                continue
            g = grads[k]
            self.m[k] = self.b1 * self.m[k] + (1 - self.b1) * g
            self.v[k] = self.b2 * self.v[k] + (1 - self.b2) * g * g
            new[k] = p - self.lr * (self.m[k] / c1) / (np.sqrt(self.v[k] / c2) + self.eps)
        return stage.updated(**new)


def training_frames(cfg: ChannelConfig, code: ldpc.LdpcCode, snr_db: float, n_frames: int, seed: int,
                    link: chansim.Link | None = None, offset: int = 0):
    """Demapper LLRs and transmitted bits, both ``(F, T, S, M)``, at ``snr_db``.

    Frames ``offset .. offset + n_frames - 1`` of the training substream.
    """
    link = link or chansim.build_link(cfg, snr_db, None, "a", seed=seed)
    rngs = [chansim.substream(seed, chansim.TAG_NN, offset + i) for i in range(n_frames)]
    info = np.stack([r.integers(0, 2, code.k, dtype=np.uint8) for r in rngs])
    cw = code.encode(info)
    _, llr = chansim.run_variant("a", link, cw, rngs)
    return llr, cw.reshape(llr.shape)


@dataclass
class TrainResult:
    stages: list[EqualizerStage]
    schedule: Schedule
    trace: list[list[float]]  # per stage: loss before training, then after each epoch


def _take(state, idx):
    return None if state is None else tuple(None if a is None else a[idx] for a in state)


def _batched_forward(stages, schedule, lR, code, k, prev, batch):
    """Stage ``k`` (unrolled with ``n_bn`` iterations) from state ``prev``; returns ``(lB, c2v)``."""
    lBs, c2vs = [], []
    for s in range(0, lR.shape[0], batch):
        lB0, c0 = _take(prev, slice(s, s + batch)) or (None, None)
        lB, rec = full_forward(stages[: k + 1], replace(schedule, n_stages=k + 1), lR[s : s + batch], code,
                               last_iterations=schedule.n_bn, first_stage=k, lB_init=lB0, c2v_init=c0)
        lBs.append(lB)
        c2vs.append(rec[-1].c2v)
    return np.concatenate(lBs), (np.concatenate(c2vs) if schedule.carry_messages else None)


def _posterior_before(stages, schedule, lR, code, k, batch):
    """``(lB, c2v)`` entering stage ``k`` when stages ``< k`` run on ``lR``; ``None`` for ``k = 0``."""
    state = None
    for j in range(k):
        state = _batched_forward(stages, schedule, lR, code, j, state, batch)
    return state


def train(cfg: ChannelConfig, code: ldpc.LdpcCode, schedule: Schedule, hyper: TrainHyper, log=None,
          frames=None) -> TrainResult:
    """Greedy stage-wise training.

    Stage ``k`` is trained with earlier stages frozen; its loss is taken at
    the BP posterior after ``n_bn`` iterations following it (the last stage
    is trained with the same unroll depth and run with ``n_res`` at test
    time). Every epoch draws ``n_frames`` fresh frames, so the networks
    never revisit the handful of failing frames that dominate the loss;
    the trace is measured on a fixed validation set of the same size.
    Passing ``frames`` instead trains and validates on that one set.
    Minibatches of whole frames, Adam updates.
    """
    rng = chansim.substream(hyper.seed, chansim.TAG_NN, 1 << 20)
    link = None if frames is not None else chansim.build_link(cfg, hyper.train_snr_db, None, "a", seed=hyper.seed)
    n = hyper.n_frames

    def draw(block: int):
        if frames is not None:
            return frames
        return training_frames(cfg, code, hyper.train_snr_db, n, hyper.seed, link, offset=block * n)

    val_R, val_d = draw(0)
    stages: list[EqualizerStage] = []
    trace: list[list[float]] = []
    bs = hyper.batch_frames
    block = 1
    for k in range(schedule.n_stages):
        val_prev = _posterior_before(stages, schedule, val_R, code, k, bs)
        stage = init_stage(hyper.dims, rng, first=(k == 0))
        if k > 0 and hyper.warm_start:
            # start from the previous stage with the posterior path switched off
            stage = stages[-1].updated(wB=np.zeros_like(stage["wB"]))
        frozen = ("wB",) if k == 0 else ()
        sub = replace(schedule, n_stages=k + 1)

        def val_loss(st):
            lB, _ = _batched_forward([*stages, st], schedule, val_R, code, k, val_prev, bs)
            return loss(lB, val_d, schedule.lambdas)

        l0 = val_loss(stage)
        losses = [l0]
        opt = Adam(stage, hyper.lr, hyper.beta1, hyper.beta2, hyper.eps)
        bad = 0
        for epoch in range(hyper.epochs):
            lR, d = draw(block)
            block += 1
            prev = val_prev if frames is not None else _posterior_before(stages, schedule, lR, code, k, bs)
            order = rng.permutation(lR.shape[0])
            for s in range(0, len(order), bs):
                idx = np.sort(order[s : s + bs])
                lB0, c0 = _take(prev, idx) or (None, None)
                _, rec = full_forward([*stages, stage], sub, lR[idx], code, record=True,
                                      last_iterations=schedule.n_bn, first_stage=k, lB_init=lB0, c2v_init=c0)
                g = backward([*stages, stage], sub, rec, d[idx], code, first_trainable=k, first_stage=k)[k]
                stage = opt.step(stage, g, frozen)
            losses.append(val_loss(stage))
            if log:
                log(f"stage {k + 1} epoch {epoch + 1}: loss {losses[-1]:.5f}")
            if not math.isfinite(losses[-1]):
                raise TrainingDivergedError(f"non-finite loss in stage {k + 1}, epoch {epoch + 1}")
            bad = bad + 1 if losses[-1] > 10 * l0 else 0
            if bad >= 3:
                raise TrainingDivergedError(f"loss above 10x its initial value for 3 epochs (stage {k + 1})")
        stages.append(stage)
        trace.append(losses)
    return TrainResult(stages, schedule, trace)


# ---------------------------------------------------------------------------
# Decoding
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class NnBpDecoder:
    """Monte-Carlo decoder: NN stages with BP in between, early stop in the last BP run."""

    stages: tuple[EqualizerStage, ...]
    schedule: Schedule

    def __call__(self, llr: np.ndarray, code: ldpc.LdpcCode, layout=None) -> np.ndarray:
        lR = np.asarray(llr, dtype=float)
        B = lR.shape[0]
        lB = c2v = None
        carry = self.schedule.carry_messages
        for k, st in enumerate(self.stages):
            lN = stage_forward(st, lR, lB)
            if k == len(self.stages) - 1:
                state = None if c2v is None else ldpc.BpState(c2v, np.zeros_like(c2v), np.zeros((B, code.n)))
                l_out, *_ = ldpc.decode(lN.reshape(B, -1), code, self.schedule.n_res, early_stop=True, state=state)
                return l_out
            l_out, _, c_out = _run_bp(lN.reshape(B, -1), code, self.schedule.n_bn, False, c2v)
            lB = l_out.reshape(lR.shape)
            c2v = c_out if carry else None
        raise ValueError("decoder has no stages")


def truncate(stages: list[EqualizerStage], n_stages: int, n_bn: int = 5,
             total: int = ldpc.DEFAULT_ITERATIONS, lambdas=(1.0, 1.0), carry_messages: bool = False) -> NnBpDecoder:
    """Decoder built from the first ``n_stages`` stages with the BP budget refilled."""
    sched = Schedule.for_stages(n_stages, n_bn, total, lambdas=tuple(lambdas), carry_messages=carry_messages)
    return NnBpDecoder(tuple(stages[:n_stages]), sched)
