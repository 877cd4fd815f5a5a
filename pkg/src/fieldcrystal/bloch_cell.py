"""Unit-cell operator H(theta) of the field/crystal system and its spectral data.

The cell space is a truncated plane-wave basis ``phi_m(y) = exp(-2 pi i m.y)``,
``|m|_inf <= K``, followed by the ``n`` lattice displacement components.  The
quasimomentum is always reduced to ``(-pi, pi]`` per axis before the field
block is assembled, so the mode window is centred on the reduced value.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .errors import NonPositiveSpectrum, SingularFunction

TWO_PI = 2.0 * np.pi

FAMILIES = ("zero", "gaussian", "sum-of-gaussians")


@dataclass(frozen=True)
class GaussianTerm:
    """One bump ``A exp(-|x - c|^2 / (2 sigma^2))`` with ``A`` in R^n."""

    amplitude: tuple
    sigma: float
    center: tuple

    def __post_init__(self):
        if not self.sigma > 0:
            raise ValueError(f"sigma must be > 0, got {self.sigma}")


@dataclass(frozen=True)
class CouplingSpec:
    family: str = "zero"
    terms: tuple = ()

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ValueError(f"unknown coupling family {self.family!r}")
        if self.family == "zero" and self.terms:
            raise ValueError("zero coupling takes no terms")
        if self.family == "gaussian" and len(self.terms) != 1:
            raise ValueError("gaussian coupling takes exactly one term")
        if self.family == "sum-of-gaussians" and not self.terms:
            raise ValueError("sum-of-gaussians needs at least one term")

    @classmethod
    def zero(cls) -> "CouplingSpec":
        return cls("zero", ())

    @classmethod
    def gaussian(cls, amplitude, sigma, center=0.0) -> "CouplingSpec":
        return cls("gaussian", (_term(amplitude, sigma, center),))

    @classmethod
    def sum_of_gaussians(cls, terms: Sequence[tuple]) -> "CouplingSpec":
        return cls("sum-of-gaussians", tuple(_term(*t) for t in terms))

    def scaled(self, factor: float) -> "CouplingSpec":
        if self.family == "zero":
            return self
        terms = tuple(
            GaussianTerm(tuple(factor * a for a in t.amplitude), t.sigma, t.center)
            for t in self.terms
        )
        return CouplingSpec(self.family, terms)

    def fourier(self, xi: np.ndarray, n: int) -> np.ndarray:
        """R^(xi) = int exp(i xi.x) R(x) dx for xi of shape (..., d); returns (..., n)."""
        xi = np.asarray(xi, dtype=float)
        out = np.zeros(xi.shape[:-1] + (n,), dtype=complex)
        d = xi.shape[-1]
        for t in self.terms:
            c = np.asarray(t.center, dtype=float)
            scalar = (
                np.exp(1j * (xi @ c))
                * (TWO_PI ** (d / 2) * t.sigma**d)
                * np.exp(-0.5 * t.sigma**2 * np.sum(xi**2, axis=-1))
            )
            out += scalar[..., None] * np.asarray(t.amplitude, dtype=float)
        return out

    def fourier_gradient(self, xi: np.ndarray, n: int) -> np.ndarray:
        """d/dxi_i of R^(xi); returns (..., d, n)."""
        xi = np.asarray(xi, dtype=float)
        d = xi.shape[-1]
        out = np.zeros(xi.shape[:-1] + (d, n), dtype=complex)
        for t in self.terms:
            c = np.asarray(t.center, dtype=float)
            scalar = (
                np.exp(1j * (xi @ c))
                * (TWO_PI ** (d / 2) * t.sigma**d)
                * np.exp(-0.5 * t.sigma**2 * np.sum(xi**2, axis=-1))
            )
            factor = 1j * c - t.sigma**2 * xi  # (..., d)
            out += (scalar[..., None] * factor)[..., None] * np.asarray(t.amplitude, dtype=float)
        return out

    def evaluate(self, x: np.ndarray, n: int) -> np.ndarray:
        """R(x) for x of shape (..., d); returns (..., n)."""
        x = np.asarray(x, dtype=float)
        out = np.zeros(x.shape[:-1] + (n,))
        for t in self.terms:
            r2 = np.sum((x - np.asarray(t.center, dtype=float)) ** 2, axis=-1)
            out += np.exp(-0.5 * r2 / t.sigma**2)[..., None] * np.asarray(t.amplitude, dtype=float)
        return out

    @property
    def max_sigma(self) -> float:
        return max((t.sigma for t in self.terms), default=0.0)


def _term(amplitude, sigma, center) -> GaussianTerm:
    amp = tuple(float(a) for a in np.atleast_1d(amplitude))
    cen = tuple(float(c) for c in np.atleast_1d(center))
    return GaussianTerm(amp, float(sigma), cen)


@dataclass(frozen=True)
class ModelParams:
    """Physical constants and discretisation of the coupled system."""

    d: int = 1
    n: int = 1
    m0: float = 1.0
    nu0: float = 1.0
    K: int = 8
    coupling: CouplingSpec = field(default_factory=CouplingSpec.zero)
    N: int = 64

    def __post_init__(self):
        errors = []
        if self.d not in (1, 2):
            errors.append(f"d must be 1 or 2, got {self.d}")
        if self.n < 1:
            errors.append(f"n must be >= 1, got {self.n}")
        if not self.m0 > 0:
            errors.append(f"m0 must be > 0, got {self.m0}")
        if not self.nu0 > 0:
            errors.append(f"nu0 must be > 0, got {self.nu0}")
        if self.K < 0:
            errors.append(f"K must be >= 0, got {self.K}")
        if self.N < 2 or self.N % 2:
            errors.append(f"N must be even and >= 2, got {self.N}")
        for t in self.coupling.terms:
            if len(t.amplitude) != self.n:
                errors.append(f"coupling amplitude has {len(t.amplitude)} components, n={self.n}")
            if len(t.center) != self.d:
                errors.append(f"coupling center has {len(t.center)} components, d={self.d}")
        if errors:
            raise ValueError("; ".join(errors))

    @property
    def P(self) -> int:
        """Collocation points (and plane waves) per axis."""
        return 2 * self.K + 1

    @property
    def n_modes(self) -> int:
        return self.P**self.d

    @property
    def cell_dim(self) -> int:
        return self.n_modes + self.n

    @property
    def n_theta(self) -> int:
        return self.N**self.d

    def mode_indices(self) -> np.ndarray:
        """Integer plane-wave labels m, shape (n_modes, d), in C order over axes."""
        r = range(-self.K, self.K + 1)
        return np.array(list(itertools.product(r, repeat=self.d)), dtype=int).reshape(-1, self.d)

    def replace(self, **changes) -> "ModelParams":
        kw = dict(d=self.d, n=self.n, m0=self.m0, nu0=self.nu0, K=self.K,
                  coupling=self.coupling, N=self.N)
        kw.update(changes)
        return ModelParams(**kw)


def reduce_theta(theta) -> np.ndarray:
    """Map quasimomenta to (-pi, pi] componentwise."""
    theta = np.asarray(theta, dtype=float)
    r = np.mod(theta + np.pi, TWO_PI) - np.pi
    # the left endpoint -pi is represented by +pi
    return np.where(np.isclose(r, -np.pi, rtol=0.0, atol=1e-13), np.pi, r)


def theta_grid(N: int, d: int = 1) -> np.ndarray:
    """Discrete quasimomenta 2 pi j / N, shape (N**d, d), C order."""
    axis = TWO_PI * np.arange(N) / N
    mesh = np.meshgrid(*([axis] * d), indexing="ij")
    return np.stack([g.ravel() for g in mesh], axis=-1)


def uniform_theta_grid(G: int, d: int = 1) -> np.ndarray:
    """Alias of :func:`theta_grid` for sweeps that are not tied to a lattice size."""
    return theta_grid(G, d)


def _as_theta(theta, d: int) -> np.ndarray:
    theta = np.asarray(theta, dtype=float)
    if theta.ndim == 0:
        theta = theta[None]
    if theta.shape[-1] != d:
        if d == 1:
            theta = theta[..., None]
        else:
            raise ValueError(f"theta must have trailing dimension {d}")
    return theta


def lattice_frequency_sq(model: ModelParams, theta) -> np.ndarray:
    """omega_*^2(theta) = sum_i 2(1 - cos theta_i) + nu0^2."""
    theta = _as_theta(theta, model.d)
    return np.sum(2.0 * (1.0 - np.cos(theta)), axis=-1) + model.nu0**2


def field_kinetic(model: ModelParams, theta) -> np.ndarray:
    """Diagonal of the field block, |2 pi m + theta_red|^2 + m0^2; shape (..., n_modes)."""
    theta = reduce_theta(_as_theta(theta, model.d))
    shifted = TWO_PI * model.mode_indices() + theta[..., None, :]
    return np.sum(shifted**2, axis=-1) + model.m0**2


def mode_fourier(model: ModelParams, fourier: Callable[[np.ndarray], np.ndarray], theta) -> np.ndarray:
    """Evaluate a continuum transform at theta_red + 2 pi m for every plane-wave label m.

    ``fourier`` maps frequencies of shape (..., d) to (..., k).  Returns (..., n_modes, k).
    At theta_i = pi the top mode m_i = K has no conjugate partner inside the
    window; its value is averaged with the mirrored frequency so that real
    continuum data stay real after truncation.
    """
    theta = reduce_theta(_as_theta(theta, model.d))
    xi = TWO_PI * model.mode_indices() + theta[..., None, :]
    c = fourier(xi)
    flip = _unpaired_axes(model, theta)
    if np.any(flip):
        mirrored = fourier(np.where(flip, -xi, xi))
        c = np.where(np.any(flip, axis=-1)[..., None], 0.5 * (c + mirrored), c)
    return c


def coupling_coefficients(model: ModelParams, theta) -> np.ndarray:
    """Plane-wave coefficients c_m(theta) = R^(theta + 2 pi m); shape (..., n_modes, n)."""
    return mode_fourier(model, lambda xi: model.coupling.fourier(xi, model.n), theta)


def _unpaired_axes(model: ModelParams, theta_red: np.ndarray) -> np.ndarray:
    """(..., n_modes, d) mask of axes with theta_i = pi and m_i = K."""
    at_pi = np.isclose(theta_red, np.pi, rtol=0.0, atol=1e-12)[..., None, :]
    return at_pi & (model.mode_indices() == model.K)


def build_h_theta(model: ModelParams, theta) -> np.ndarray:
    """Hermitian cell operator H(theta); batched over leading axes of ``theta``.

    A scalar (d=1) or length-d theta gives a single (m, m) matrix.
    """
    theta = _as_theta(theta, model.d)
    M, n = model.n_modes, model.n
    lead = theta.shape[:-1]
    h = np.zeros(lead + (model.cell_dim, model.cell_dim), dtype=complex)
    kin = field_kinetic(model, theta)
    idx = np.arange(M)
    h[..., idx, idx] = kin
    lat = np.arange(M, M + n)
    h[..., lat, lat] = lattice_frequency_sq(model, theta)[..., None]
    if model.coupling.family != "zero":
        c = coupling_coefficients(model, theta)
        h[..., :M, M:] = c
        h[..., M:, :M] = np.conj(np.swapaxes(c, -1, -2))
    return h


def build_dh_theta(model: ModelParams, theta) -> np.ndarray:
    """Closed-form derivative dH/dtheta_i, shape (..., d, m, m)."""
    theta = _as_theta(theta, model.d)
    M, n, d = model.n_modes, model.n, model.d
    red = reduce_theta(theta)
    lead = theta.shape[:-1]
    dh = np.zeros(lead + (d, model.cell_dim, model.cell_dim), dtype=complex)
    shifted = TWO_PI * model.mode_indices() + red[..., None, :]  # (..., M, d)
    idx = np.arange(M)
    lat = np.arange(M, M + n)
    for i in range(d):
        dh[..., i, idx, idx] = 2.0 * shifted[..., i]
        dh[..., i, lat, lat] = (2.0 * np.sin(theta[..., i]))[..., None]
    if model.coupling.family != "zero":
        g = model.coupling.fourier_gradient(shifted, n)  # (..., M, d, n)
        flip = _unpaired_axes(model, red)
        if np.any(flip):
            sign = np.where(flip, -1.0, 1.0)
            gm = model.coupling.fourier_gradient(sign * shifted, n) * sign[..., :, None]
            g = np.where(np.any(flip, axis=-1)[..., None, None], 0.5 * (g + gm), g)
        g = np.moveaxis(g, -2, -3)  # (..., d, M, n)
        dh[..., :M, M:] = g
        dh[..., M:, :M] = np.conj(np.swapaxes(g, -1, -2))
    return dh


def default_gap_tol(eigenvalues: np.ndarray) -> float:
    return 1e-8 * (1.0 + float(np.max(eigenvalues)))


def degeneracy_groups(eigenvalues: np.ndarray, gap_tol: float) -> list[range]:
    """Split ascending eigenvalues into runs whose neighbours differ by < gap_tol."""
    groups = []
    start = 0
    for l in range(1, len(eigenvalues) + 1):
        if l == len(eigenvalues) or eigenvalues[l] - eigenvalues[l - 1] >= gap_tol:
            groups.append(range(start, l))
            start = l
    return groups


@dataclass
class SpectralData:
    """Eigen-decomposition of H(theta) at one quasimomentum."""

    theta: np.ndarray
    h_matrix: np.ndarray
    eigenvalues: np.ndarray
    eigenvectors: np.ndarray
    gap_tol: float

    @property
    def omegas(self) -> np.ndarray:
        if self.eigenvalues[0] <= 0:
            raise NonPositiveSpectrum(self.eigenvalues[0], self.theta)
        return np.sqrt(self.eigenvalues)

    @property
    def groups(self) -> list[range]:
        return degeneracy_groups(self.eigenvalues, self.gap_tol)

    def projector(self, group) -> np.ndarray:
        F = self.eigenvectors[:, list(group)]
        return F @ F.conj().T

    def projectors(self) -> list[np.ndarray]:
        return [self.projector(g) for g in self.groups]

    @property
    def dim(self) -> int:
        return len(self.eigenvalues)


def spectral_decompose(h: np.ndarray, gap_tol: float | None = None, theta=None,
                       require_positive: bool = True) -> SpectralData:
    """Ascending eigenpairs of a Hermitian matrix.

    Raises NonPositiveSpectrum when the lowest eigenvalue is <= 0 unless
    ``require_positive`` is False.
    """
    h = np.asarray(h)
    lam, F = np.linalg.eigh(h)
    if gap_tol is None:
        gap_tol = default_gap_tol(lam)
    if require_positive and lam[0] <= 0:
        raise NonPositiveSpectrum(lam[0], theta)
    th = None if theta is None else np.atleast_1d(np.asarray(theta, dtype=float))
    return SpectralData(th, h, lam, F, gap_tol)


def matrix_function(spec: SpectralData, f: Callable[[np.ndarray], np.ndarray]) -> np.ndarray:
    """sum_l f(omega_l) F_l F_l^dagger."""
    with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
        vals = np.asarray(f(spec.omegas))
    if not np.all(np.isfinite(vals)):
        bad = spec.omegas[~np.isfinite(vals)]
        raise SingularFunction(f"function not finite at omega={bad}")
    F = spec.eigenvectors
    return (F * vals) @ F.conj().T


@dataclass
class R2Report:
    min_eigenvalue: float
    worst_theta: np.ndarray
    passed: bool
    note: str = "finite-K, finite-grid certificate: min of lambda_1 over the sampled grid"


def check_r2(model: ModelParams, thetas) -> R2Report:
    """Lowest eigenvalue of H(theta) over a grid; positive means the condition holds there."""
    thetas = _as_theta(thetas, model.d).reshape(-1, model.d)
    if len(thetas) == 0:
        raise ValueError("theta grid is empty")
    lam = np.linalg.eigvalsh(build_h_theta(model, thetas))[:, 0]
    j = int(np.argmin(lam))
    return R2Report(float(lam[j]), thetas[j], bool(lam[j] > 0))


@dataclass
class R2PrimeReport:
    lhs: float
    rhs: float
    margin: float
    passed: bool


def periodized_coupling(model: ModelParams, y: np.ndarray) -> np.ndarray:
    """sum_k R(k + y) with the lattice sum truncated at |k|_inf <= 8 sigma + 8."""
    kmax = int(math.ceil(8.0 * model.coupling.max_sigma + 8.0))
    ks = np.array(list(itertools.product(range(-kmax, kmax + 1), repeat=model.d)), dtype=float)
    total = np.zeros(y.shape[:-1] + (model.n,))
    for k in ks:
        total += model.coupling.evaluate(y + k, model.n)
    return total


def check_r2_prime(model: ModelParams, points_per_axis: int = 256) -> R2PrimeReport:
    """Sufficient condition int_{[0,1]^d} |sum_k R(k+y)|^2 dy < nu0^2 m0^2 / 2 by quadrature."""
    if points_per_axis < 256:
        raise ValueError("use at least 256 quadrature points per axis")
    rhs = model.nu0**2 * model.m0**2 / 2.0
    if model.coupling.family == "zero":
        lhs = 0.0
    else:
        # the integrand is smooth and 1-periodic, so the uniform rule is spectrally accurate
        y = theta_grid(points_per_axis, model.d) / TWO_PI
        vals = periodized_coupling(model, y)
        lhs = float(np.mean(np.sum(vals**2, axis=-1)))
    return R2PrimeReport(lhs, rhs, rhs - lhs, bool(lhs < rhs))


class SpectralGrid:
    """Batched spectral data of H(theta) over a whole theta grid.

    ``eigenvalues`` has shape (G, m) and ``eigenvectors`` (G, m, m); index g
    follows the row order of ``thetas``.
    """

    def __init__(self, model: ModelParams, thetas=None, require_positive: bool = True):
        self.model = model
        if thetas is None:
            thetas = theta_grid(model.N, model.d)
        self.thetas = _as_theta(thetas, model.d).reshape(-1, model.d)
        self.h = build_h_theta(model, self.thetas)
        self.eigenvalues, self.eigenvectors = np.linalg.eigh(self.h)
        if require_positive and np.min(self.eigenvalues[:, 0]) <= 0:
            g = int(np.argmin(self.eigenvalues[:, 0]))
            raise NonPositiveSpectrum(self.eigenvalues[g, 0], self.thetas[g])

    def __len__(self):
        return len(self.thetas)

    @property
    def omegas(self) -> np.ndarray:
        return np.sqrt(self.eigenvalues)

    def at(self, g: int) -> SpectralData:
        lam = self.eigenvalues[g]
        return SpectralData(self.thetas[g], self.h[g], lam, self.eigenvectors[g], default_gap_tol(lam))

    def apply_function(self, values: np.ndarray, vectors: np.ndarray) -> np.ndarray:
        """Apply sum_l values[g, l] F_l F_l^dagger to vectors of shape (G, m) or (G, m, k)."""
        F = self.eigenvectors
        squeeze = vectors.ndim == 2
        v = vectors[..., None] if squeeze else vectors
        coeff = np.conj(np.swapaxes(F, -1, -2)) @ v
        out = F @ (values[..., None] * coeff)
        return out[..., 0] if squeeze else out

    def function_matrices(self, values: np.ndarray) -> np.ndarray:
        F = self.eigenvectors
        return (F * values[:, None, :]) @ np.conj(np.swapaxes(F, -1, -2))


_GRID_CACHE: dict = {}


def spectral_grid(model: ModelParams) -> SpectralGrid:
    """Spectral data on the lattice theta grid of ``model``, memoised per model."""
    grid = _GRID_CACHE.get(model)
    if grid is None:
        if len(_GRID_CACHE) > 8:
            _GRID_CACHE.clear()
        grid = SpectralGrid(model)
        _GRID_CACHE[model] = grid
    return grid
