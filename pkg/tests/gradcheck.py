"""Central finite-difference check of the NN-BP gradients on a toy code.

A coordinate whose ±eps perturbation flips any ReLU is sitting on a kink
where the derivative does not exist; such coordinates are reported
separately rather than compared.
"""

import numpy as np

from nleq import ldpc, nnbp

EPS = 1e-4


def toy_problem(n_stages=1, n_bn=2, n_res=2, carry=False, seed=1, frames=2):
    code = ldpc.make_ira_code(63, 36, 3, seed=0)  # low check degree keeps c2v messages non-trivial
    rng = np.random.default_rng(seed)
    dims = nnbp.StageDims(L=2, M=3, n_q=8, n_r=8)
    stages = []
    for k in range(n_stages):
        s = nnbp.init_stage(dims, rng, first=False)
        stages.append(s.updated(w3=rng.normal(0, 0.5, s["w3"].shape), b3=rng.normal(0, 0.3, (2,)),
                                b1=rng.normal(0, 0.2, s["b1"].shape)))
    sched = nnbp.Schedule(n_stages, n_bn, n_res, carry_messages=carry)
    cw = code.encode(rng.integers(0, 2, (frames, code.k)))
    d = cw.reshape(frames, 21, 1, 3)
    lR = (1 - 2 * d) * 2.0 + rng.normal(0, 1.5, d.shape)
    return stages, sched, lR, d, code


def _pattern(records):
    return np.concatenate([np.concatenate([(a1 > 0).ravel(), (a2 > 0).ravel()])
                           for r in records for (a1, _, a2, _, _) in r.nn_cache["per_bit"]])


def check(stages, sched, lR, d, code, eps=EPS):
    """Per parameter group: ``(max relative error, coordinates checked, kink coordinates)``."""
    _, rec = nnbp.full_forward(stages, sched, lR, code, record=True)
    grads = nnbp.backward(stages, sched, rec, d, code)
    base = _pattern(rec)
    out = {}
    for k, st in enumerate(stages):
        for name in nnbp.PARAMS:
            an = grads[k][name]
            worst, n_ok, n_kink = 0.0, 0, 0
            for idx in np.ndindex(an.shape):
                vals, kink = [], False
                for sgn in (1, -1):
                    p = st[name].copy()
                    p[idx] += sgn * eps
                    trial = list(stages)
                    trial[k] = st.updated(**{name: p})
                    lB, r = nnbp.full_forward(trial, sched, lR, code, record=True)
                    kink |= not np.array_equal(_pattern(r), base)
                    vals.append(nnbp.loss(lB, d, sched.lambdas))
                if kink:
                    n_kink += 1
                    continue
                fd = (vals[0] - vals[1]) / (2 * eps)
                scale = max(abs(an[idx]), abs(fd), 1e-6)
                worst = max(worst, abs(fd - an[idx]) / scale)
                n_ok += 1
            out[(k, name)] = (worst, n_ok, n_kink)
    return out
