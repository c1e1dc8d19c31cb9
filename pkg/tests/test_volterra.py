import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from oracles import brute_triples

from nleq import chansim, volterra
from nleq.volterra import VolterraModel, build_index_set


class TestIndexSet:
    @pytest.mark.parametrize("L", range(7))
    def test_count_matches_enumeration(self, L):
        iset = build_index_set(L)
        assert set(iset.triples) == brute_triples(L)
        assert len(iset) == len(brute_triples(L)) == math.comb(2 * L + 3, 3)

    def test_known_sizes(self):
        assert build_index_set(0).triples == ((0, 0, 0),)
        assert len(build_index_set(1)) == 10
        assert len(build_index_set(4)) == 165

    def test_ordered_and_unique(self):
        t = build_index_set(3).triples
        assert len(set(t)) == len(t)
        assert all(k <= j <= i for i, j, k in t)
        assert list(t) == sorted(t)

    def test_negative_memory(self):
        with pytest.raises(ValueError):
            build_index_set(-1)


class TestFeatures:
    def test_constant_sequence(self):
        iset = build_index_set(2)
        y1, y3 = volterra.build_features(np.full(9, 2.0), 4, iset)
        assert np.all(y1 == 2.0) and np.all(y3 == 8.0)

    def test_against_triple_loop(self, rng):
        iset = build_index_set(1)
        y = rng.normal(size=12)
        n = 5
        y1, y3 = volterra.build_features(y, n, iset)
        assert np.array_equal(y1, y[n - 1 : n + 2])
        expect = [y[n + i] * y[n + j] * y[n + k] for i, j, k in iset.triples]
        assert np.allclose(y3, expect, rtol=0, atol=1e-15)

    def test_out_of_range(self):
        iset = build_index_set(2)
        with pytest.raises(IndexError):
            volterra.build_features(np.zeros(10), 1, iset)
        with pytest.raises(IndexError):
            volterra.build_features(np.zeros(10), 8, iset)

    def test_feature_matrix_matches_pointwise(self, rng):
        iset = build_index_set(2)
        y = rng.normal(size=30)
        Y1, Y3 = volterra.feature_matrix(y, iset)
        for n in (2, 13, 27):
            y1, y3 = volterra.build_features(y, n, iset)
            assert np.array_equal(Y1[n], y1) and np.allclose(Y3[n], y3)


def _fit_toy(y, x, L):
    iset = build_index_set(L)
    Y1, Y3 = volterra.feature_matrix(y, iset)
    return volterra.fit_mmse(Y1, Y3, x, iset), Y1, Y3


class TestFit:
    def test_identity_channel(self, rng):
        x = chansim.PAM8.levels[rng.integers(0, 8, 5000)]
        m, _, _ = _fit_toy(x, x, 2)
        assert np.mean((m.apply(x) - x) ** 2) < 1e-10

    def test_cubic_beats_linear(self, rng):
        x = rng.uniform(-1.5, 1.5, 4000)
        y = x + 0.1 * x**3
        m, Y1, _ = _fit_toy(y, x, 0)
        h_lin = np.linalg.lstsq(Y1, x, rcond=None)[0]
        mse_lin = np.mean((Y1 @ h_lin - x) ** 2)
        assert np.mean((m.apply(y) - x) ** 2) < mse_lin

    def test_orthogonality(self, rng):
        x = chansim.PAM8.levels[rng.integers(0, 8, 20_000)]
        y = np.tanh(np.convolve(x, [0.1, 1.0, 0.2], "same")) + 0.05 * rng.normal(size=x.size)
        m, Y1, Y3 = _fit_toy(y, x, 2)
        r = Y1 @ m.h1 + Y3 @ m.h3 - x
        corr = np.abs(np.concatenate([Y1, Y3], axis=1).T @ r) / len(x)
        assert corr.max() < 1e-8 * np.mean(x**2)

    def test_more_memory_never_worse(self, rng):
        x = chansim.PAM8.levels[rng.integers(0, 8, 6000)]
        y = np.sin(np.convolve(x, [0.15, 1.0, -0.1], "same"))
        mse = [np.mean((_fit_toy(y, x, L)[0].apply(y) - x) ** 2) for L in (0, 1, 2)]
        assert mse[1] <= mse[0] + 1e-12 and mse[2] <= mse[1] + 1e-12

    def test_too_few_rows(self, rng):
        with pytest.raises(ValueError):
            _fit_toy(rng.normal(size=100), rng.normal(size=100), 1)

    def test_streaming_matches_batch(self, rng):
        iset = build_index_set(1)
        y, x = rng.normal(size=(2, 3000))
        acc = volterra.GramAccumulator(iset)
        acc.add_sequence(y, x, chunk=700)
        a = acc.solve()
        b, _, _ = _fit_toy(y, x, 1)
        assert np.allclose(a.weights, b.weights, rtol=1e-9, atol=1e-12)

    def test_collinear_features_still_solve(self):
        # constant input makes every feature column identical; the ridge keeps it solvable
        m, _, _ = _fit_toy(np.ones(2000), np.ones(2000), 1)
        assert np.all(np.isfinite(m.weights))


class TestApply:
    def test_pass_through(self, rng):
        y = rng.normal(size=50)
        assert np.array_equal(VolterraModel.identity(3).apply(y), y)

    @settings(max_examples=25, deadline=None)
    @given(st.integers(0, 2**32 - 1))
    def test_odd_symmetry(self, seed):
        r = np.random.default_rng(seed)
        iset = build_index_set(2)
        m = VolterraModel(r.normal(size=iset.n1), r.normal(size=len(iset)), iset)
        y = r.normal(size=40)
        assert np.allclose(m.apply(-y), -m.apply(y), rtol=0, atol=1e-12)

    def test_linear_in_weights(self, rng):
        iset = build_index_set(1)
        m1 = VolterraModel(rng.normal(size=3), rng.normal(size=10), iset)
        m2 = VolterraModel(rng.normal(size=3), rng.normal(size=10), iset)
        y = rng.normal(size=25)
        lhs = (m1.scaled(0.7) + m2.scaled(-1.3)).apply(y)
        assert np.allclose(lhs, 0.7 * m1.apply(y) - 1.3 * m2.apply(y), atol=1e-12)

    def test_batched_time_axis(self, rng):
        iset = build_index_set(1)
        m = VolterraModel(rng.normal(size=3), rng.normal(size=10), iset)
        y = rng.normal(size=(2, 3, 20))
        assert np.allclose(m.apply(y)[1, 2], m.apply(y[1, 2]))

    def test_shape_check(self):
        with pytest.raises(ValueError):
            VolterraModel(np.zeros(3), np.zeros(9), build_index_set(1))


class TestPersistence:
    def test_round_trip_exact(self, rng):
        iset = build_index_set(2)
        m = VolterraModel(rng.normal(size=iset.n1), rng.normal(size=len(iset)), iset, 19.0)
        back = VolterraModel.loads(m.dumps())
        assert np.array_equal(back.weights, m.weights) and back.L == 2 and back.train_snr_db == 19.0

    def test_infinite_training_snr(self):
        m = VolterraModel.identity(1)
        m = VolterraModel(m.h1, m.h3, m.index_set, math.inf)
        assert VolterraModel.loads(m.dumps()).train_snr_db == math.inf

    def test_rejects_garbage(self):
        with pytest.raises(ValueError):
            VolterraModel.loads("volterra L=1 n1=3 n3=10\n1.0\n")
        with pytest.raises(ValueError):
            VolterraModel.loads("something else\n")


@pytest.fixture(scope="module")
def pair():
    cfg = chansim.ChannelConfig()
    return [volterra.train_at_snr(cfg, 19.0, 200_000, seed=s) for s in (11, 12)]


class TestTrainAtSnr:
    def test_default_memory(self, pair):
        assert pair[0].L == volterra.DEFAULT_MEMORY == 4
        assert pair[0].train_snr_db == 19.0

    def test_seed_stability(self, pair):
        a, b = pair
        assert np.linalg.norm(a.weights - b.weights) / np.linalg.norm(a.weights) < 0.05

    def test_deterministic(self, pair):
        again = volterra.train_at_snr(chansim.ChannelConfig(), 19.0, 200_000, seed=11)
        assert np.array_equal(again.weights, pair[0].weights)

    def test_training_residual_orthogonal(self):
        cfg = chansim.ChannelConfig()
        w, z, x, g = volterra.training_components(cfg, 19.0, 20_000, seed=3)
        m = volterra.fit_components(w, z, x, g, L=2)
        y1, y3 = volterra.feature_matrix(w + z, m.index_set)
        sl = (slice(None), slice(g, -g))
        phi = np.concatenate([y1[sl].reshape(-1, m.index_set.n1), y3[sl].reshape(-1, len(m.index_set))], axis=1)
        r = phi @ m.weights - x[sl].reshape(-1)
        assert np.abs(phi.T @ r / len(r)).max() < 1e-8 * np.mean(x[sl] ** 2)

    def test_rejects_empty(self):
        with pytest.raises(ValueError):
            volterra.train_at_snr(chansim.ChannelConfig(), 19.0, 0)
