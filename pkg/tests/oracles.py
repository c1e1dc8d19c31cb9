"""Brute-force references shared by the unit and acceptance tests."""

import itertools

import numpy as np

from nleq import ldpc


def brute_triples(L: int) -> set[tuple[int, int, int]]:
    """Every non-increasing delay triple in ``[-L, L]``, by filtering the full cube."""
    r = range(-L, L + 1)
    return {t for t in itertools.product(r, r, r) if t[0] >= t[1] >= t[2]}


def tree_code(n_checks: int, rng: np.random.Generator, max_k: int = 10) -> ldpc.LdpcCode:
    """Random cycle-free Tanner graph: each check joins one old variable to 1-3 new ones.

    Redrawn until the code has at most ``2**max_k`` codewords.
    """
    while True:
        rows, n = [], 1
        for _ in range(n_checks):
            old = int(rng.integers(0, n))
            new = list(range(n, n + int(rng.integers(1, 4))))
            n += len(new)
            rows.append([old, *new])
        if n - n_checks <= max_k:
            return ldpc.LdpcCode(n, rows)


def codebook(code: ldpc.LdpcCode) -> np.ndarray:
    info = np.array(list(itertools.product((0, 1), repeat=code.k)), dtype=np.uint8)
    return code.encode(info)


def bitwise_map(llr: np.ndarray, words: np.ndarray) -> np.ndarray:
    # log P(c | l) up to a constant: sum over bits of -c_i l_i
    score = -(words * llr).sum(axis=1)
    out = np.empty(words.shape[1])
    for i in range(words.shape[1]):
        out[i] = np.logaddexp.reduce(score[words[:, i] == 0]) - np.logaddexp.reduce(score[words[:, i] == 1])
    return out


def tree_map_error(seed: int) -> float:
    """Worst |BP - MAP| LLR gap on five random inputs to a random tree code."""
    rng = np.random.default_rng(seed)
    code = tree_code(int(rng.integers(2, 6)), rng)
    words = codebook(code)
    l = rng.normal(0, 2.0, (5, code.n))
    out, *_ = ldpc.decode(l, code, n_iter=2 * code.m + 2, early_stop=False)
    return max(float(np.max(np.abs(o - bitwise_map(row, words)))) for row, o in zip(l, out))
