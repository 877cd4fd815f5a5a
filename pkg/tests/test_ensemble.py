import numpy as np
import pytest
from scipy import stats

from fieldcrystal.bloch_cell import SpectralGrid, theta_grid
from fieldcrystal.covariance import (
    FieldKernel,
    InitialMeasureSpec,
    LatticeKernel,
    evolve_covariance_table,
    initial_covariance_table,
    limit_covariance_table,
    quadratic_form,
)
from fieldcrystal.dispersion import band_structure, flagged_points, max_group_speed
from fieldcrystal.ensemble import (
    EnsembleConfig,
    GaussianSampler,
    MovingAverageSampler,
    draw_noise,
    empirical_char_functional,
    estimate_quadratic_form,
    make_sampler,
    mixing_correlation,
    moment_stats,
    normality_stats,
    observe,
    rademacher_kurtosis,
    sample_initial,
    sample_rng,
)
from fieldcrystal.errors import NotPSD, WraparoundRisk
from fieldcrystal.propagator import (
    GaussianPacket,
    LatticeEntry,
    TestFunction,
    adjoint_evolve,
    smooth_window,
    zak_forward,
    zak_inverse,
)
from fieldcrystal.propagator import test_function_zak as zak_of

from conftest import reference_model

MA_SPEC = InitialMeasureSpec.moving_average(
    field_kernels=(FieldKernel(1.0, 0.3), FieldKernel(0.5, 0.3, component=1)),
    lattice_kernels=(LatticeKernel.from_dict({0: 1.0, 1: 0.5}), LatticeKernel.from_dict({0: 0.7}, component=1)),
    noise_law="rademacher",
)
SIGN_SPEC = InitialMeasureSpec.moving_average(lattice_kernels=(LatticeKernel.delta(1),), noise_law="rademacher")
DELTA = TestFunction(lattice=(LatticeEntry((0,), (1.0,)),))
MIXED = TestFunction(lattice=(LatticeEntry((0,), (1.0,)), LatticeEntry((2,), (-0.5,), 1)),
                     packets=(GaussianPacket(0.8, (1.3,), 0.4),))


def physical_pairing(state, model, z):
    return state.inner(zak_inverse(zak_of(z, model), model), model.P)


def cutoff_function(model, band_limit=4):
    b = band_structure(model, model_thetas(model))
    f = flagged_points(b, band_limit, 0.05)
    pts = np.vstack([f["boundary"], f["crossing"]])
    w = smooth_window(model_thetas(model), pts, 0.1, 0.1, 4.0)
    return TestFunction(lattice=DELTA.lattice, band_limit=band_limit, cutoff=w), max_group_speed(b).gamma


def model_thetas(model):
    return theta_grid(model.N, model.d)


class TestNoise:
    @pytest.mark.parametrize("law", ["gaussian", "rademacher", "uniform"])
    def test_unit_variance(self, law):
        x = draw_noise(np.random.default_rng(0), law, 200_000)
        assert abs(np.mean(x)) < 0.01
        assert np.var(x) == pytest.approx(1.0, abs=0.01)

    def test_rademacher_values(self):
        x = draw_noise(np.random.default_rng(0), "rademacher", 1000)
        assert set(np.unique(x)) == {-1.0, 1.0}

    def test_unknown_law(self):
        with pytest.raises(ValueError):
            draw_noise(np.random.default_rng(0), "cauchy", 3)


class TestSamplers:
    def test_ma_weights_match_physical_pairing(self, small_model):
        smp = MovingAverageSampler(MA_SPEC, small_model)
        g = SpectralGrid(small_model)
        zf = zak_of(MIXED, small_model, g)
        vals = smp.functionals([smp.weights(zf)], 5, seed=3)
        for i in range(5):
            state = smp.sample(sample_rng(3, i))
            assert vals[i, 0] == pytest.approx(physical_pairing(state, small_model, MIXED), abs=1e-12)

    def test_gaussian_weights_match_physical_pairing(self, small_model):
        g = SpectralGrid(small_model)
        q = initial_covariance_table(MA_SPEC, small_model, grid=g)
        smp = GaussianSampler(q, small_model)
        zf = zak_of(MIXED, small_model, g)
        vals = smp.functionals([smp.weights(zf)], 5, seed=3)
        for i in range(5):
            state = smp.sample(sample_rng(3, i))
            assert vals[i, 0] == pytest.approx(physical_pairing(state, small_model, MIXED), abs=1e-12)

    def test_single_site_signs(self, small_model):
        state = sample_initial(SIGN_SPEC, small_model, np.random.default_rng(1))
        val = physical_pairing(state, small_model, DELTA)
        assert val in (pytest.approx(-1.0, abs=1e-12), pytest.approx(1.0, abs=1e-12))
        assert np.all(np.isin(np.round(state.u, 12), [-1.0, 1.0]))

    def test_not_psd(self, small_model):
        q = -initial_covariance_table(InitialMeasureSpec.gibbs(), small_model)
        with pytest.raises(NotPSD):
            GaussianSampler(q, small_model)

    def test_samples_are_real_states(self, small_model):
        smp = make_sampler(InitialMeasureSpec.gibbs(1.0), small_model)
        state = smp.sample(np.random.default_rng(0))
        zf = zak_forward(state, small_model)
        back = zak_inverse(zf, small_model)
        np.testing.assert_allclose(back.psi, state.psi, atol=1e-12)


class TestEstimators:
    def test_mean_and_variance_at_zero(self, small_model):
        g = SpectralGrid(small_model)
        for spec in (MA_SPEC, InitialMeasureSpec.gibbs(0.7)):
            cfg = EnsembleConfig(10_000, 11, spec)
            est = estimate_quadratic_form(cfg, small_model, 0.0, MIXED, g)
            q = quadratic_form(initial_covariance_table(spec, small_model, grid=g), zak_of(MIXED, small_model, g))
            assert abs(est.mean) < 3 * est.mean_stderr
            assert abs(est.variance - q) < 3 * est.stderr

    def test_gibbs_time_independent(self, small_model):
        g = SpectralGrid(small_model)
        cfg = EnsembleConfig(4000, 5, InitialMeasureSpec.gibbs(1.0))
        x = observe(cfg, small_model, [0.0, 3.0, 40.0], MIXED, g)
        q = quadratic_form(initial_covariance_table(cfg.spec, small_model, grid=g), zak_of(MIXED, small_model, g))
        for k in range(3):
            sq = x[:, k] ** 2
            assert abs(sq.mean() - q) < 3 * sq.std(ddof=1) / np.sqrt(len(sq))

    def test_large_time_matches_limit(self):
        m = reference_model(N=512, K=4)
        g = SpectralGrid(m)
        z, gamma = cutoff_function(m)
        q0 = initial_covariance_table(MA_SPEC, m, grid=g)
        q_inf = quadratic_form(limit_covariance_table(q0, g), zak_of(z, m, g))
        est = estimate_quadratic_form(EnsembleConfig(4000, 2, MA_SPEC), m, 100.0, z, g, gamma=gamma)
        assert abs(est.variance - q_inf) < 3 * est.stderr

    def test_wraparound_guard(self, small_model):
        with pytest.raises(WraparoundRisk):
            observe(EnsembleConfig(10, 0, MA_SPEC), small_model, [100.0], DELTA, gamma=1.0)

    def test_variance_convergence(self):
        m = reference_model(N=512, K=4)
        g = SpectralGrid(m)
        z, gamma = cutoff_function(m)
        q0 = initial_covariance_table(MA_SPEC, m, grid=g)
        zf = zak_of(z, m, g)
        q_inf = quadratic_form(limit_covariance_table(q0, g), zf)
        times = [0.0, 5.0, 20.0, 100.0]
        x = observe(EnsembleConfig(4000, 9, MA_SPEC), m, times, z, g, gamma=gamma)
        exact = [abs(quadratic_form(evolve_covariance_table(q0, g, t), zf) - q_inf) for t in times]
        assert exact[-1] < exact[0]
        sq = x[:, -1] ** 2
        se = sq.std(ddof=1) / np.sqrt(len(sq))
        assert abs(sq.mean() - q_inf) < 3 * se
        assert exact[-1] < se


class TestCharacteristicFunctional:
    def test_s_zero(self, small_model):
        rows = empirical_char_functional(EnsembleConfig(200, 0, MA_SPEC), small_model, 0.0, MIXED, [0.0], 1.0)
        assert rows[0].re == 1.0 and rows[0].im == 0.0 and rows[0].deviation_sigmas == 0.0

    def test_gaussian_spec_any_time(self, small_model):
        g = SpectralGrid(small_model)
        spec = InitialMeasureSpec.direct(initial_covariance_table(MA_SPEC, small_model, grid=g))
        q0 = spec.table
        zf = zak_of(MIXED, small_model, g)
        for t in (0.0, 7.0):
            q_t = quadratic_form(evolve_covariance_table(q0, g, t), zf)
            s = np.linspace(0.25, 2.5, 6) / np.sqrt(q_t)
            rows = empirical_char_functional(EnsembleConfig(5000, 4, spec), small_model, t, MIXED, s, q_t, g)
            assert max(r.deviation_sigmas for r in rows) < 3.5

    def test_two_point_law_is_not_gaussian(self, small_model):
        rows = empirical_char_functional(EnsembleConfig(2000, 0, SIGN_SPEC), small_model, 0.0, DELTA, [1.5], 1.0)
        assert rows[0].re == pytest.approx(np.cos(1.5), abs=1e-12)
        assert rows[0].deviation_sigmas > 5


class TestNormality:
    def test_gaussian_spec(self, small_model):
        spec = InitialMeasureSpec.gibbs(1.0)
        for t in (0.0, 10.0):
            st = normality_stats(EnsembleConfig(10_000, 1, spec), small_model, t, MIXED)
            assert abs(st.skewness) < 3 * st.skew_stderr
            assert abs(st.excess_kurtosis) < 3 * st.kurt_stderr

    def test_two_point_kurtosis(self, small_model):
        st = normality_stats(EnsembleConfig(10_000, 1, SIGN_SPEC), small_model, 0.0, DELTA)
        assert st.excess_kurtosis == pytest.approx(-2.0, abs=3 * st.kurt_stderr + 1e-12)
        assert rademacher_kurtosis([np.array([1.0])]) == -2.0

    def test_exact_rademacher_kurtosis(self):
        rng = np.random.default_rng(2)
        w = rng.standard_normal(6)
        signs = np.array(np.meshgrid(*([[-1.0, 1.0]] * 6))).reshape(6, -1)
        x = w @ signs
        exact = np.mean(x**4) / np.mean(x**2) ** 2 - 3
        assert rademacher_kurtosis([w]) == pytest.approx(exact, rel=1e-12)

    def test_moment_stats_normal(self):
        x = np.random.default_rng(3).standard_normal(20_000)
        st = moment_stats(x)
        assert abs(st.skewness) < 3 * st.skew_stderr and abs(st.excess_kurtosis) < 3 * st.kurt_stderr

    def test_ks_gaussianity_preserved(self, small_model):
        g = SpectralGrid(small_model)
        spec = InitialMeasureSpec.direct(initial_covariance_table(MA_SPEC, small_model, grid=g))
        zf = zak_of(MIXED, small_model, g)
        times = [0.0, 1.0, 10.0]
        x = observe(EnsembleConfig(3000, 8, spec), small_model, times, MIXED, g)
        for k, t in enumerate(times):
            q_t = quadratic_form(evolve_covariance_table(spec.table, g, t), zf)
            res = stats.kstest(x[:, k] / np.sqrt(q_t), "norm")
            assert res.pvalue > 0.01


class TestMixing:
    def test_zero_time_and_tracking(self, small_model):
        g = SpectralGrid(small_model)
        q_inf = limit_covariance_table(initial_covariance_table(MA_SPEC, small_model, grid=g), g)
        rows = mixing_correlation(small_model, q_inf, MIXED, MIXED, [0.0, 2.0, 8.0], 3000, seed=1, grid=g)
        q_zz = quadratic_form(q_inf, zak_of(MIXED, small_model, g))
        assert rows[0].exact == pytest.approx(q_zz, rel=1e-12) and q_zz > 0
        for r in rows:
            assert abs(r.mc - r.exact) < 3 * r.mc_stderr

    def test_exact_estimator_by_duality(self, small_model):
        g = SpectralGrid(small_model)
        q_inf = limit_covariance_table(initial_covariance_table(MA_SPEC, small_model, grid=g), g)
        z1 = TestFunction(lattice=(LatticeEntry((1,), (1.0,)),))
        rows = mixing_correlation(small_model, q_inf, MIXED, z1, [3.0], 10, grid=g)
        a = adjoint_evolve(zak_of(MIXED, small_model, g), small_model, 3.0, g).stacked
        b = zak_of(z1, small_model, g).stacked
        val = np.einsum("gi,gij,gj->", np.conj(a), q_inf, b).real / len(a)
        assert rows[0].exact == pytest.approx(val, rel=1e-12)


class TestReproducibility:
    def test_schedule_independent(self, small_model):
        g = SpectralGrid(small_model)
        a = observe(EnsembleConfig(700, 42, MA_SPEC, batch_size=700, threads=1), small_model, [0.0, 5.0], MIXED, g)
        b = observe(EnsembleConfig(700, 42, MA_SPEC, batch_size=64, threads=4), small_model, [0.0, 5.0], MIXED, g)
        np.testing.assert_array_equal(a, b)

    def test_seed_changes_samples(self, small_model):
        a = observe(EnsembleConfig(50, 1, MA_SPEC), small_model, [0.0], MIXED)
        b = observe(EnsembleConfig(50, 2, MA_SPEC), small_model, [0.0], MIXED)
        assert not np.array_equal(a, b)

    def test_unbiased_across_seeds(self, small_model):
        """Covariance of two observables matches the table pairing in at least 19 of 20 seeds."""
        g = SpectralGrid(small_model)
        q0 = initial_covariance_table(MA_SPEC, small_model, grid=g)
        z2 = TestFunction(lattice=(LatticeEntry((1,), (1.0,)),), packets=(GaussianPacket(0.5, (0.7,), 0.3),))
        a, b = zak_of(MIXED, small_model, g).stacked, zak_of(z2, small_model, g).stacked
        target = np.einsum("gi,gij,gj->", np.conj(b), q0, a).real / len(a)
        smp = make_sampler(MA_SPEC, small_model, g)
        passed = 0
        for seed in range(20):
            x = smp.functionals([smp.weights(zak_of(MIXED, small_model, g)),
                                 smp.weights(zak_of(z2, small_model, g))], 2000, seed)
            prod = x[:, 0] * x[:, 1]
            passed += abs(prod.mean() - target) < 3 * prod.std(ddof=1) / np.sqrt(len(prod))
        assert passed >= 19

    def test_config_validation(self):
        with pytest.raises(ValueError):
            EnsembleConfig(0, 0, MA_SPEC)
