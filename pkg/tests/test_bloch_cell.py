import numpy as np
import pytest

from fieldcrystal.bloch_cell import (
    CouplingSpec,
    ModelParams,
    SpectralGrid,
    build_h_theta,
    check_r2,
    check_r2_prime,
    coupling_coefficients,
    degeneracy_groups,
    matrix_function,
    reduce_theta,
    spectral_decompose,
    theta_grid,
)
from fieldcrystal.errors import NonPositiveSpectrum, SingularFunction

from conftest import decoupled_model, reference_model


def quadrature_coefficient(model, theta, m, points=4096, kmax=40):
    """int_0^1 exp(2 pi i m y) exp(i y theta) sum_k exp(i k theta) R(k + y) dy by the periodic rule."""
    y = np.arange(points) / points
    k = np.arange(-kmax, kmax + 1)
    x = (k[:, None] + y[None, :])[..., None]
    R = model.coupling.evaluate(x, model.n)[..., 0]
    periodized = np.sum(np.exp(1j * k * theta)[:, None] * R, axis=0)
    integrand = np.exp(2j * np.pi * m * y) * np.exp(1j * y * theta) * periodized
    return np.mean(integrand)


def r2_prime_lattice_sum(A, sigma, kmax=20):
    """int_0^1 |sum_k R(k+y)|^2 dy = sum_k int R(x) R(x+k) dx for a centred Gaussian bump."""
    k = np.arange(-kmax, kmax + 1)
    return A**2 * sigma * np.sqrt(np.pi) * np.sum(np.exp(-(k**2) / (4 * sigma**2)))


class TestModelParams:
    def test_cell_dimension(self):
        m = reference_model()
        assert m.cell_dim == 18
        assert ModelParams(d=2, n=2, K=2, N=4).cell_dim == 27

    @pytest.mark.parametrize("kw", [dict(m0=0.0), dict(nu0=-1.0), dict(N=5), dict(N=0), dict(K=-1), dict(d=3)])
    def test_invalid(self, kw):
        with pytest.raises(ValueError):
            ModelParams(**kw)

    def test_coupling_dimension_mismatch(self):
        with pytest.raises(ValueError, match="components"):
            ModelParams(n=2, coupling=CouplingSpec.gaussian(0.1, 0.2))

    def test_reduce_theta(self):
        out = reduce_theta([0.0, np.pi, 1.5 * np.pi, 2 * np.pi, -np.pi])
        np.testing.assert_allclose(out, [0.0, np.pi, -0.5 * np.pi, 0.0, np.pi], atol=1e-15)


class TestCouplingCoefficients:
    def test_zero_coupling(self):
        c = coupling_coefficients(decoupled_model(K=3), 0.7)
        assert c.shape == (7, 1)
        assert np.all(c == 0)

    def test_gaussian_theta0_m0(self):
        m = reference_model()
        c = coupling_coefficients(m, 0.0)[m.K, 0]
        assert c == pytest.approx(0.1 * np.sqrt(2 * np.pi) * 0.2, rel=1e-14)
        assert abs(c) == pytest.approx(0.0501326, abs=5e-8)
        assert c == pytest.approx(quadrature_coefficient(m, 0.0, 0), abs=1e-13)

    def test_gaussian_theta_pi_m1(self):
        m = reference_model()
        c = coupling_coefficients(m, np.pi)[m.K + 1, 0]
        closed = 0.1 * np.sqrt(2 * np.pi) * 0.2 * np.exp(-0.02 * 9 * np.pi**2)
        assert abs(c) == pytest.approx(closed, rel=1e-12)
        assert abs(c) == pytest.approx(0.00845, abs=5e-5)
        assert c == pytest.approx(quadrature_coefficient(m, np.pi, 1), abs=1e-13)

    @pytest.mark.parametrize("theta", [0.3, 2.0, 4.4])
    def test_matches_quadrature_all_modes(self, theta):
        m = ModelParams(K=4, coupling=CouplingSpec.sum_of_gaussians([(0.1, 0.2, 0.1), (-0.05, 0.35, -0.3)]))
        th = float(reduce_theta(theta))
        c = coupling_coefficients(m, theta)[:, 0]
        ref = [quadrature_coefficient(m, th, k) for k in range(-m.K, m.K + 1)]
        np.testing.assert_allclose(c, ref, atol=1e-13)


class TestBuildH:
    def test_decoupled_theta0(self):
        h = build_h_theta(decoupled_model(K=1), 0.0)
        expected = [(2 * np.pi) ** 2 + 1, 1.0, (2 * np.pi) ** 2 + 1, 1.0]
        np.testing.assert_allclose(np.sort(np.diag(h).real), np.sort(expected), rtol=1e-15)
        assert np.count_nonzero(h - np.diag(np.diag(h))) == 0

    def test_lattice_entry_at_pi(self):
        m = decoupled_model(K=1)
        h = build_h_theta(m, np.pi)
        assert h[m.n_modes, m.n_modes].real == pytest.approx(5.0, rel=1e-15)

    def test_coupled_blocks(self):
        m = reference_model()
        h = build_h_theta(m, 1.3)
        M = m.n_modes
        np.testing.assert_array_equal(h[:M, M:], coupling_coefficients(m, 1.3))
        np.testing.assert_array_equal(h, h.conj().T)

    def test_batched_equals_single(self):
        m = reference_model(N=8, K=2)
        th = theta_grid(8)
        hb = build_h_theta(m, th)
        for g in range(len(th)):
            np.testing.assert_array_equal(hb[g], build_h_theta(m, th[g]))


class TestSpectralDecompose:
    def test_one_by_one(self):
        s = spectral_decompose(np.array([[4.0]]))
        assert s.eigenvalues[0] == 4.0
        assert s.omegas[0] == 2.0
        assert abs(s.eigenvectors[0, 0]) == 1.0

    def test_decoupled_k0_field_frequency(self):
        m = decoupled_model(K=0)
        s = spectral_decompose(build_h_theta(m, np.pi))
        assert np.any(np.isclose(s.omegas, 3.2969079, atol=5e-8))

    def test_degenerate_pair_at_pi(self):
        m = decoupled_model(K=1)
        s = spectral_decompose(build_h_theta(m, np.pi))
        sizes = sorted(len(g) for g in s.groups)
        assert sizes == [1, 1, 2]
        pair = [g for g in s.groups if len(g) == 2][0]
        assert s.eigenvalues[pair[0]] == pytest.approx(np.pi**2 + 1, rel=1e-14)

    def test_nonpositive(self):
        with pytest.raises(NonPositiveSpectrum):
            spectral_decompose(np.diag([-1.0, 2.0]))
        s = spectral_decompose(np.diag([-1.0, 2.0]), require_positive=False)
        assert s.eigenvalues[0] == -1.0

    def test_groups_helper(self):
        assert [list(g) for g in degeneracy_groups(np.array([1.0, 1.0 + 1e-12, 2.0]), 1e-8)] == [[0, 1], [2]]


class TestMatrixFunction:
    def setup_method(self):
        self.m = reference_model()
        self.h = build_h_theta(self.m, 0.9)
        self.s = spectral_decompose(self.h)

    def test_square_reproduces_h(self):
        np.testing.assert_allclose(matrix_function(self.s, lambda w: w**2), self.h, atol=1e-10 * np.abs(self.h).max())

    def test_constant_one(self):
        np.testing.assert_allclose(matrix_function(self.s, lambda w: np.cos(w * 0.0)), np.eye(18), atol=1e-12)

    def test_inverse_square(self):
        inv = matrix_function(self.s, lambda w: 1.0 / w**2)
        np.testing.assert_allclose(inv @ self.h, np.eye(18), atol=1e-10)
        np.testing.assert_allclose(inv, np.linalg.solve(self.h, np.eye(18)), atol=1e-10)

    def test_singular(self):
        s = spectral_decompose(np.diag([4.0, 9.0]))
        with pytest.raises(SingularFunction):
            matrix_function(s, lambda w: 1.0 / (w - 2.0))

    def test_multiplicative(self):
        f = matrix_function(self.s, np.cos)
        g = matrix_function(self.s, lambda w: np.sin(w) / w)
        fg = matrix_function(self.s, lambda w: np.cos(w) * np.sin(w) / w)
        np.testing.assert_allclose(f @ g, fg, atol=1e-10)


class TestConditions:
    def test_r2_decoupled(self):
        rep = check_r2(decoupled_model(K=2), theta_grid(64))
        assert rep.min_eigenvalue == pytest.approx(1.0, rel=1e-12)
        assert rep.passed

    def test_r2_single_point(self):
        m = decoupled_model(K=2, m0=2.0, nu0=1.5)
        rep = check_r2(m, [0.0])
        assert rep.min_eigenvalue == pytest.approx(min(2.0**2, 1.5**2), rel=1e-14)

    def test_r2_strong_coupling_fails(self):
        m = reference_model(N=8).replace(coupling=CouplingSpec.gaussian(10.0, 0.2))
        rep = check_r2(m, theta_grid(64))
        assert not rep.passed
        # the eigensolver at the reported theta is the oracle
        lam = np.linalg.eigvalsh(build_h_theta(m, rep.worst_theta))
        assert lam[0] == pytest.approx(rep.min_eigenvalue, rel=1e-12)
        assert lam[0] < 0

    def test_r2_empty(self):
        with pytest.raises(ValueError):
            check_r2(decoupled_model(), np.zeros((0, 1)))

    def test_r2_prime_zero(self):
        rep = check_r2_prime(decoupled_model())
        assert rep.lhs == 0.0 and rep.passed

    def test_r2_prime_reference(self):
        rep = check_r2_prime(reference_model())
        assert rep.lhs == pytest.approx(r2_prime_lattice_sum(0.1, 0.2), rel=1e-10)
        assert rep.lhs == pytest.approx(3.54e-3, rel=1e-2)
        assert rep.rhs == 0.5 and rep.passed

    def test_r2_prime_strong(self):
        rep = check_r2_prime(reference_model().replace(coupling=CouplingSpec.gaussian(10.0, 0.2)))
        assert rep.lhs == pytest.approx(r2_prime_lattice_sum(10.0, 0.2), rel=1e-10)
        assert rep.lhs == pytest.approx(35.4, rel=1e-2)
        assert not rep.passed and rep.margin < 0

    def test_r2_prime_needs_points(self):
        with pytest.raises(ValueError):
            check_r2_prime(reference_model(), points_per_axis=64)


class TestSpectralGrid:
    def test_matches_pointwise(self, small_model):
        g = SpectralGrid(small_model)
        for j in (0, 5, 16):
            s = spectral_decompose(build_h_theta(small_model, g.thetas[j]))
            np.testing.assert_allclose(g.eigenvalues[j], s.eigenvalues, rtol=1e-13)

    def test_function_matrices(self, small_model):
        g = SpectralGrid(small_model)
        np.testing.assert_allclose(g.function_matrices(g.eigenvalues), g.h, atol=1e-10 * np.abs(g.h).max())


def test_truncation_report():
    """Low bands settle as K grows; the differences are reported, not held to a rate."""
    th = 1.1
    lams = [np.linalg.eigvalsh(build_h_theta(reference_model(K=K), th))[:3] for K in (2, 4, 8, 16)]
    diffs = [np.max(np.abs(a - b)) for a, b in zip(lams[:-1], lams[1:])]
    print("K-truncation differences of the lowest three eigenvalues:", diffs)
    assert diffs[-1] <= diffs[0]
