import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from nleq import chansim, ldpc, montecarlo, noisefig, volterra
from nleq.noisefig import SignalMoments
from nleq.volterra import VolterraModel, build_index_set


def iid_moments(L, ew2=1.0, ez2=0.1):
    iset = build_index_set(L)
    return SignalMoments(ew2 * np.eye(iset.n1), np.zeros((iset.n1, len(iset))), ew2, ez2)


def random_model(r, L, h3_scale=0.05):
    iset = build_index_set(L)
    return VolterraModel(r.normal(size=iset.n1), h3_scale * r.normal(size=len(iset)), iset)


def alpha_by_loops(model):
    """Reference coupling: for each triple, every factor position that can carry the noise."""
    n1 = model.index_set.n1
    a = np.zeros((n1, n1))
    for h3, (i, j, k) in zip(model.h3, model.index_set.offsets):
        for noise, (p, q) in ((k, (i, j)), (j, (i, k)), (i, (j, k))):
            p, q = max(p, q), min(p, q)
            a[p, q] += model.h1[noise] * h3
    return a


class TestMoments:
    def test_iid_signal(self, rng):
        w = rng.choice([-1.0, 1.0], size=(4, 20_000))
        mom = noisefig.moments_from_signal(w, build_index_set(1), ez2=0.0)
        tol = 3 / math.sqrt(mom.n_samples)
        assert np.allclose(mom.sigma_w11, np.eye(3), atol=tol)
        assert mom.ew2 == pytest.approx(np.mean(np.diag(mom.sigma_w11)), abs=1e-12)

    def test_odd_cross_moments_vanish(self, rng):
        iset = build_index_set(1)
        w = rng.normal(size=(2, 40_000))
        mom = noisefig.moments_from_signal(w, iset, ez2=0.0)
        tol = 3 * math.sqrt(15) / math.sqrt(mom.n_samples)
        for col, t in enumerate(iset.triples):
            for row in range(3):
                counts = np.bincount(np.array([*t, row - 1]) + 1, minlength=3)
                if np.any(counts % 2):
                    assert abs(mom.sigma_w13[row, col]) < tol

    def test_correlated_signal_autocorrelation(self, rng):
        x = rng.normal(size=200_000)
        w = np.convolve(x, [0.3, 1.0, -0.4], "same")
        mom = noisefig.moments_from_signal(w, build_index_set(2), ez2=0.0, margin=4)
        for lag in range(5):
            direct = np.mean(w[4 : -4 - lag] * w[4 + lag : -4])
            assert np.allclose(np.diag(mom.sigma_w11, lag), direct, atol=0.02)
        assert np.allclose(mom.sigma_w11, mom.sigma_w11.T)

    def test_too_few_samples(self, rng):
        with pytest.raises(ValueError):
            noisefig.moments_from_signal(rng.normal(size=500), build_index_set(2), ez2=0.0)

    def test_validation(self):
        with pytest.raises(ValueError):
            SignalMoments(np.array([[1.0, 0.5], [0.0, 1.0]]), np.zeros((2, 4)), 1.0, 0.0)
        with pytest.raises(ValueError):
            SignalMoments(np.eye(3), np.zeros((3, 10)), 1.0, -1.0)

    def test_channel_moments(self):
        cfg = chansim.ChannelConfig()
        mom = noisefig.estimate_moments(cfg, 20_000, L=1, snr_db=19.0, seed=5)
        assert mom.sigma_w11.shape == (3, 3) and mom.sigma_w13.shape == (3, 10)
        assert np.all(np.linalg.eigvalsh(mom.sigma_w11) > 0)
        assert 0 < mom.ez2 < mom.ew2


class TestAlpha:
    def test_matches_loop_reference(self, rng):
        m = random_model(rng, 2)
        assert np.allclose(noisefig.alpha(m), alpha_by_loops(m), atol=1e-13)

    def test_h3_tensor_layout(self, rng):
        m = random_model(rng, 1)
        H = noisefig.h3_tensor(m)
        for w, (i, j, k) in zip(m.h3, m.index_set.offsets):
            assert H[i, j, k] == w
        assert np.count_nonzero(H) == len(m.index_set)


class TestNoiseFigure:
    def test_identity_is_unity(self):
        assert noisefig.noise_figure(VolterraModel.identity(4), iid_moments(4, ew2=0.8)) == 1.0

    def test_linear_reduction(self, rng):
        iset = build_index_set(2)
        h1 = rng.normal(size=iset.n1)
        A = rng.normal(size=(iset.n1, iset.n1))
        s11 = A @ A.T + np.eye(iset.n1)
        ew2 = float(np.mean(np.diag(s11)))
        mom = SignalMoments(s11, rng.normal(size=(iset.n1, len(iset))), ew2, 0.1)
        m = VolterraModel(h1, np.zeros(len(iset)), iset)
        assert noisefig.noise_figure(m, mom) == pytest.approx(h1 @ h1 * ew2 / (h1 @ s11 @ h1), rel=1e-12)

    @settings(max_examples=30, deadline=None)
    @given(st.integers(0, 2**32 - 1), st.floats(0.1, 10.0))
    def test_scale_invariant(self, seed, a):
        r = np.random.default_rng(seed)
        m = random_model(r, 1, 0.01)
        w = r.normal(size=5000)
        mom = noisefig.moments_from_signal(w, m.index_set, ez2=0.1)
        assert noisefig.noise_figure(m.scaled(a), mom) == pytest.approx(noisefig.noise_figure(m, mom), rel=1e-10)

    def test_diagonal_terms_matter(self, rng):
        m = random_model(rng, 1, 0.05)
        mom = noisefig.moments_from_signal(rng.normal(size=5000), m.index_set, ez2=0.1)
        assert noisefig.noise_figure(m, mom) != noisefig.noise_figure(m, mom, include_diagonal=False)

    def test_degenerate(self):
        iset = build_index_set(0)
        m = VolterraModel(np.array([1.0]), np.array([-1.0]), iset)
        mom = SignalMoments(np.eye(1), np.array([[3.0]]), 1.0, 0.1)
        with pytest.raises(noisefig.DegenerateModelError):
            noisefig.noise_figure(m, mom)

    def test_dimension_mismatch(self):
        with pytest.raises(ValueError):
            noisefig.noise_figure(VolterraModel.identity(2), iid_moments(1))

    def test_small_noise_matches_direct_expansion(self, rng):
        # white noise added after the filter: the closed form is the exact first-order expansion
        m = random_model(rng, 1, 0.02)
        w = rng.choice(chansim.PAM8.levels, size=(8, 50_000))
        mom = noisefig.moments_from_signal(w, m.index_set, ez2=1e-6)
        sd = 1e-3
        z = sd * rng.normal(size=w.shape)
        xs = m.apply(w)
        xn = m.apply(w + z) - xs
        emp = (mom.ew2 / sd**2) / (np.mean(xs**2) / np.mean(xn**2))
        assert 10 * math.log10(emp) == pytest.approx(noisefig.noise_figure_db(m, mom), abs=0.05)


class TestEmpirical:
    def test_zero_noise(self):
        p = noisefig.empirical_output_snr(None, chansim.ChannelConfig(), math.inf, 10_000, seed=1)
        assert p.p_n == 0 and p.figure == 1.0

    def test_pass_through(self):
        p = noisefig.empirical_output_snr(None, chansim.ChannelConfig(), 17.0, 50_000, seed=1)
        assert p.p_n / p.ez2 == pytest.approx(1.0, abs=1e-12)
        assert p.figure_db == pytest.approx(10 * math.log10((p.ew2 / p.ez2) / (p.p_s / p.p_n)))

    def test_noise_power_matches_filter(self):
        cfg = chansim.ChannelConfig()
        fir = chansim.fit_link_fir(cfg, 17.0, 2)
        p = noisefig.empirical_output_snr(None, cfg, 17.0, 100_000, seed=2, fir=fir)
        assert p.ez2 == pytest.approx(noisefig.filtered_noise_power(cfg, 17.0, fir), rel=0.02)

    @pytest.mark.parametrize("snr", [15.0, 19.0, 24.0])
    def test_analytic_tracks_empirical(self, snr):
        cfg = chansim.ChannelConfig()
        model = volterra.train_at_snr(cfg, 19.0, 100_000, seed=4)
        mom = noisefig.estimate_moments(cfg, 100_000, snr_db=snr, seed=4)
        emp = noisefig.empirical_output_snr(model, cfg, snr, 100_000, seed=4)
        assert abs(noisefig.noise_figure_db(model, mom) - emp.figure_db) < 0.2


class TestReport:
    def test_additive(self):
        r = noisefig.make_report(16.9, 17.3, 17.6, 0.25, 19.0)
        assert r.total_db == pytest.approx(0.7) and r.ne_penalty_db == pytest.approx(0.3)
        assert r.nl_penalty_db == pytest.approx(0.4)

    def test_rejects_inconsistent_total(self):
        with pytest.raises(ValueError):
            noisefig.PenaltyReport(0.1, 0.2, 0.4, 0.0, 19.0)


@pytest.fixture(scope="module")
def short_code():
    return ldpc.make_ira_code(300, 240, 3, seed=1)


class TestPenaltyDecomposition:
    SEARCH = montecarlo.SearchSettings(17.0, 0.5, 0, max_frames=400, min_errors=40, target_ber=1e-3)

    def test_linear_channel_has_no_nl_penalty(self, short_code):
        cfg = chansim.ChannelConfig(nl_amplitude=math.inf)
        model = volterra.train_at_snr(cfg, math.inf, 20_000, L=1, seed=2)
        rep, curves = noisefig.penalty_decomposition(cfg, model, short_code, self.SEARCH, seed=2)
        assert abs(rep.nl_penalty_db) <= 0.05
        assert rep.ne_penalty_db >= -0.05
        assert len(curves) == 3

    def test_unbracketed_raises(self, short_code):
        cfg = chansim.ChannelConfig(nl_amplitude=math.inf)
        s = montecarlo.SearchSettings(5.5, 0.5, 0, hi_db=6.0, max_frames=50, min_errors=20)
        with pytest.raises(montecarlo.RangeError):
            noisefig.baseline_required_snr(cfg, short_code, 1, s)
