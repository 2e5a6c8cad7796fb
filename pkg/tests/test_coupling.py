import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats

from levymix.coupling import (
    CoupledState,
    CouplingConstants,
    RejectionCapError,
    StoppingTimeRecord,
    apply_coupled_big_jump,
    build_record,
    compute_delta_k,
    coupling_constants,
    maximal_coupling_batch,
    maximal_coupling_draw,
    run_chain_ensemble,
    run_coupled_chain,
    run_coupled_segment,
    track_stopping_times,
)
from levymix.engine import EnsembleDriver
from levymix.levy_noise import AssumptionDiagnosticError, LevyConfig, sample_big_jump
from levymix.rng import substream
from levymix.spde_model import State

from conftest import make_model

CFG1 = LevyConfig(1.5, 1, 3.0)


def pk_cdf_1d(z, alpha, K):
    z = np.asarray(z, dtype=float)
    a = np.abs(np.where(np.abs(z) < K, K, z))
    return np.where(z < 0, 0.5 * (K / a) ** alpha, np.where(z < K, 0.5, 1 - 0.5 * (K / a) ** alpha))


def tv_1d(alpha, K, s):
    return 2.0 * (1.0 - (K / (K + s)) ** alpha)


def coupled_batch(cfg, cx, cy, n, seed):
    rng = substream(seed, "coupling")
    cx = np.tile(np.atleast_1d(cx), (n, 1)).astype(float)
    cy = np.tile(np.atleast_1d(cy), (n, 1)).astype(float)
    eta = sample_big_jump(cfg, substream(seed, "noise"), n)
    return cx, cy, maximal_coupling_batch(cx, cy, eta, cfg, rng)


class TestMaximalCoupling:
    def test_equal_centers_always_coupled(self):
        _, _, (zx, zy, ok) = coupled_batch(LevyConfig(1.2, 3, 1.0), [0.1, 0.2, 0.3], [0.1, 0.2, 0.3], 1000, 1)
        assert ok.all() and np.array_equal(zx, zy)

    def test_marginals(self):
        cx, cy, (zx, zy, ok) = coupled_batch(CFG1, 0.0, 2.0, 50000, 2)
        cdf = lambda z: pk_cdf_1d(z, 1.5, 3.0)  # noqa: E731
        assert stats.kstest((zx - cx)[:, 0], cdf).pvalue > 0.001
        assert stats.kstest((zy - cy)[:, 0], cdf).pvalue > 0.001
        assert np.all(zy[~ok] != zx[~ok])

    @pytest.mark.parametrize("s", [0.3, 1.0, 2.0, 5.0])
    def test_success_probability(self, s):
        n = 40000
        _, _, (_, _, ok) = coupled_batch(CFG1, 0.0, s, n, 3)
        p = 1 - tv_1d(1.5, 3.0, s) / 2
        assert abs(ok.mean() - p) < 4 * math.sqrt(p * (1 - p) / n)

    def test_success_probability_binned(self):
        # random separations; compare per bin with the bin-averaged closed form
        rng = np.random.default_rng(7)
        n = 60000
        s = rng.uniform(0, 6, n)
        cx = np.zeros((n, 1))
        cy = s[:, None]
        eta = sample_big_jump(CFG1, substream(4, "noise"), n)
        _, _, ok = maximal_coupling_batch(cx, cy, eta, CFG1, substream(4, "coupling"))
        edges = np.linspace(0, 6, 7)
        for lo, hi in zip(edges[:-1], edges[1:]):
            m = (s >= lo) & (s < hi)
            p = np.mean(1 - tv_1d(1.5, 3.0, s[m]) / 2)
            assert abs(ok[m].mean() - p) < 4 * math.sqrt(p * (1 - p) / m.sum())

    def test_rejection_cap(self):
        cfg = LevyConfig(1.5, 1, 1.0)
        cx = np.zeros((1, 1))
        cy = np.full((1, 1), 1e-9)
        eta = np.ones((1, 1))  # lands inside the y-support hole, so never coupled
        with pytest.raises(RejectionCapError) as exc:
            maximal_coupling_batch(cx, cy, eta, cfg, substream(0, "coupling"), max_iter=100)
        assert isinstance(exc.value, AssumptionDiagnosticError)
        assert "acceptance rate" in str(exc.value)

    def test_draw_validation(self):
        with pytest.raises(ValueError):
            maximal_coupling_draw([0.0, 0.0], [1.0, 0.0], CFG1, substream(0, "coupling"))
        with pytest.raises(ValueError):
            maximal_coupling_draw([0.0], [np.nan], CFG1, substream(0, "coupling"))
        zx, zy, ok = maximal_coupling_draw([0.0], [0.0], CFG1, substream(0, "coupling"))
        assert ok and zx == zy

    def test_apply_to_states(self):
        m = make_model(alpha=1.5, D=1, N=3, K=3.0)
        cs = CoupledState(State([0.0, 1.0, 2.0], 1.5), State([0.0, -1.0, 2.0], 1.5))
        out, ok = apply_coupled_big_jump(cs, m.levy, substream(1, "coupling"))
        assert ok and out.first_components_merged
        assert out.time == 1.5
        assert out.sx.coeffs[1:].tolist() == [1.0, 2.0]
        assert out.distance == pytest.approx(2.0)

    def test_coupled_state_times(self):
        with pytest.raises(ValueError):
            CoupledState(State([0.0], 0.0), State([0.0], 1.0))


class TestDelta:
    def test_frozen_value(self):
        # exp(-10) + e / 11
        assert compute_delta_k(1.0, 10.0, 1.0) == pytest.approx(0.2471619297896757, rel=1e-14)

    def test_no_nonlinearity(self):
        assert compute_delta_k(0.7, 3.0, 0.0) == pytest.approx(math.exp(-2.1), rel=1e-15)

    def test_small_gap_limit(self):
        assert compute_delta_k(1e-12, 10.0, 1.0) == pytest.approx(1 + 1 / 11, rel=1e-9)

    def test_vectorized_and_guards(self):
        out = compute_delta_k(np.array([0.5, 1.0]), 10.0, 1.0)
        assert out.shape == (2,)
        for g in (0.0, -1.0, np.nan):
            with pytest.raises(ValueError):
                compute_delta_k(g, 10.0, 1.0)

    @settings(max_examples=50, deadline=None)
    @given(g=st.floats(1e-3, 20), lam=st.floats(1.0, 100), L=st.floats(0, 0.5))
    def test_decreasing_in_lambda(self, g, lam, L):
        assert compute_delta_k(g, lam * 2, L) <= compute_delta_k(g, lam, L) + 1e-15


class TestConstants:
    def test_kappa(self):
        m = make_model(alpha=1.5, D=1, N=4, K=3.0, a=0.1, g=1.0, T=2.0)
        c = coupling_constants(m)
        assert c.kappa == pytest.approx(c.beta1 * math.exp(c.beta2 * 0.1 * 2.0))
        assert c.beta0 == pytest.approx(tv_1d(1.5, 3.0, 1.0), abs=1e-9)

    def test_validation(self):
        with pytest.raises(ValueError):
            CouplingConstants(1.0, 0.0, 1.0, 1.0)
        with pytest.raises(ValueError):
            CouplingConstants(0.5, 1.0, 1.0, 1.0)


def synthetic(dist, nx, ny, tau=None, model=None, M=1.0, d=0.1):
    n = len(dist)
    model = model or make_model(D=1, N=2, a=0.0)
    tau = np.arange(n, dtype=float) * 2.0 if tau is None else np.asarray(tau, dtype=float)
    return build_record(tau, dist, nx, ny, np.ones(n, bool), model, M, d)


class TestStoppingTimes:
    def test_identical_start(self):
        m = make_model(alpha=1.5, D=1, N=3, K=3.0, dt=1e-2)
        x = State([0.5, 0.2, -0.1])
        chain, rec = run_coupled_chain(x, x, m, 4, substream(0, "noise"), substream(0, "coupling"))
        assert len(chain) == 4
        assert np.all(rec.dist == 0)
        assert rec.sigma == 1 and rec.sigma_hat is None
        assert np.all(np.diff(rec.tau_tilde) > m.T_refractory)
        assert all(c.first_components_merged and c.distance == 0 for c in chain)

    def test_synthetic_example(self):
        # delta = exp(-4 * 2) per gap with f_lip = 0 and lambda_2 = 4
        dist = [0.5, 0.05, 0.5 * math.exp(-16) / 2, 0.3, 0.01, 0.0]
        nx = [2.0, 2.0, 0.5, 2.0, 0.2, 0.2]
        ny = [2.0, 2.0, 0.3, 2.0, 0.2, 0.2]
        r = synthetic(dist, nx, ny)
        assert r.sigma_tilde == 2
        assert r.sigma == 1
        assert r.sigma_hat == 1  # 0.05 > exp(-8) * 0.5
        # restarted at index 1: dist[2] stays under the product bound, dist[3] exceeds it
        assert r.sigma_dagger == 1 + 2
        assert r.sigma_bar == 3 + 1

    def test_composition_identity(self):
        rng = np.random.default_rng(3)
        for _ in range(200):
            n = 12
            r = synthetic(rng.uniform(0, 0.3, n), rng.uniform(0, 1, n), rng.uniform(0, 1, n))
            if r.sigma_bar is not None:
                assert r.sigma_bar_seq and r.sigma_bar_seq[0] == r.sigma_bar
            else:
                assert r.sigma_bar_seq == []
            assert all(b > a for a, b in zip([0] + r.sigma_bar_seq, r.sigma_bar_seq))

    def test_monotone_in_M(self):
        rng = np.random.default_rng(4)
        for _ in range(100):
            n = 10
            args = (rng.uniform(0, 1, n), rng.uniform(0, 2, n), rng.uniform(0, 2, n))
            lo = synthetic(*args, M=0.5).sigma_tilde
            hi = synthetic(*args, M=2.0).sigma_tilde
            if lo is not None:
                assert hi is not None and hi <= lo

    def test_idempotent(self):
        r = synthetic([0.5, 0.05, 0.01, 0.3], [1, 1, 1, 1], [1, 1, 1, 1])
        before = (r.sigma_tilde, r.sigma, r.sigma_hat, r.sigma_dagger, r.sigma_bar, list(r.sigma_bar_seq))
        track_stopping_times(r, r.M, r.d)
        assert before == (r.sigma_tilde, r.sigma, r.sigma_hat, r.sigma_dagger, r.sigma_bar, r.sigma_bar_seq)

    def test_censored_is_none(self):
        r = synthetic([0.5, 0.4, 0.3], [5, 5, 5], [5, 5, 5])
        assert r.sigma_tilde is None and r.sigma is None and r.sigma_bar is None

    def test_nan_tail_truncated(self):
        m = make_model(D=1, N=2, a=0.0)
        r = build_record([0, 2, np.nan], [0.5, 0.05, np.nan], [1, 1, np.nan], [1, 1, np.nan], [1, 1, 0], m)
        assert r.k_observed == 1

    def test_length_errors(self):
        r = synthetic([0.5, 0.05], [1, 1], [1, 1])
        bad = StoppingTimeRecord(r.tau_tilde, r.dist[:1], r.norm_x, r.norm_y, r.coupled_flags, r.delta, 1.0, 0.1)
        with pytest.raises(ValueError, match="inconsistent"):
            track_stopping_times(bad, 1.0, 0.1)
        bad = StoppingTimeRecord(np.array([0.0, 0.0]), r.dist, r.norm_x, r.norm_y, r.coupled_flags, r.delta, 1, 0.1)
        with pytest.raises(ValueError):
            track_stopping_times(bad, 1.0, 0.1)

    def test_product_contraction_on_merged_segments(self):
        m = make_model(alpha=1.5, D=1, N=4, K=3.0, a=0.1, dt=1e-2)
        x = np.zeros(4)
        y = np.array([0.01, 0.01, 0.0, 0.0])
        ens = run_chain_ensemble(m, x, y, 300, 5, 3)
        checked = 0
        for r in ens.records(m):
            # as long as every coupling attempt merged, the distance is the H2 part only
            for k in range(1, r.k_observed + 1):
                if not r.coupled_flags[1 : k + 1].all():
                    break
                bound = np.prod(r.delta[:k]) * r.dist[0] * (1 + 1e-9) + 64 * np.finfo(float).eps * (
                    r.norm_x[k] + r.norm_y[k]
                )
                assert r.dist[k] <= bound
                checked += 1
        assert checked > 300


class TestDrivers:
    def test_x_marginal_bit_identical(self):
        m = make_model(alpha=1.5, D=2, N=5, K=1.0, dt=1e-2)
        x0 = np.array([1.0, 0.0, 0.5, 0.0, 0.0])
        y0 = np.array([0.0, 0.3, 0.0, 0.0, 0.2])
        single = EnsembleDriver(m, x0, replicas=50, noise_rng=substream(9, "noise")).run_until(5.0)
        pair = EnsembleDriver(
            m, x0, y0, replicas=50, noise_rng=substream(9, "noise"), coupling_rng=substream(9, "coupling"), couple=True
        ).run_until(5.0)
        assert np.array_equal(single.X, pair.X)
        assert pair.coupling_attempts > 0

    def test_y_marginal(self):
        # the y copy of a coupled pair has the law of a single run from y0
        m = make_model(alpha=1.5, D=1, N=3, K=1.0, a=0.2, dt=1e-2)
        x0 = np.array([1.0, 0.0, 0.5])
        y0 = np.array([-1.0, 0.2, 0.0])
        pair = EnsembleDriver(
            m, x0, y0, replicas=4000, noise_rng=substream(10, "noise"), coupling_rng=substream(10, "coupling"),
            couple=True,
        ).run_until(3.0)
        single = EnsembleDriver(m, y0, replicas=4000, noise_rng=substream(11, "noise")).run_until(3.0)
        for j in range(3):
            assert stats.ks_2samp(pair.Y[:, j], single.X[:, j]).pvalue > 0.001
        a = np.tanh(pair.Y[:, 0])
        b = np.tanh(single.X[:, 0])
        se = math.sqrt(a.var() / a.size + b.var() / b.size)
        assert abs(a.mean() - b.mean()) < 4 * se

    def test_segment(self):
        m = make_model(alpha=1.5, D=1, N=3, K=1.0, dt=1e-2)
        cs = CoupledState(State([0.0, 1.0, 0.0], 0.5), State([0.0, 0.0, 1.0], 0.5), True)
        out = run_coupled_segment(cs, 1.5, m, substream(0, "noise"))
        assert out.time == pytest.approx(1.5)
        assert out.first_components_merged
        with pytest.raises(ValueError):
            run_coupled_segment(cs, 0.5, m, substream(0, "noise"))

    def test_chain_argument_guard(self):
        m = make_model(D=1, N=2)
        with pytest.raises(ValueError):
            run_coupled_chain(State([0.0, 0.0]), State([0.0, 0.0]), m, 0, substream(0, "noise"))
