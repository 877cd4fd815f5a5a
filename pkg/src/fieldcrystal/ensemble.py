"""Random initial data, ensemble estimators and normality statistics.

Every sample index owns its own generator ``default_rng([seed, index])``, so
estimates do not depend on how samples are scheduled over threads.  Linear
observables <Y(t), Z> are evaluated through the duality
<Y(t), Z> = <Y0, G(t)^dagger Z>, which is exact: the evolution of each sample
is never time-stepped.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .bloch_cell import ModelParams, SpectralGrid, spectral_grid, theta_grid
from .covariance import (
    InitialMeasureSpec,
    cross_form,
    initial_covariance_table,
    ma_transfer,
    quadratic_form,
)
from .errors import NotPSD
from .propagator import (
    LatticeState,
    TestFunction,
    ZakField,
    adjoint_evolve,
    check_wraparound,
    mode_permutations,
    partner_indices,
    test_function_zak,
    zak_inverse,
)


def sample_rng(seed: int, index: int) -> np.random.Generator:
    return np.random.default_rng([int(seed), int(index)])


@dataclass
class EnsembleConfig:
    sample_count: int
    seed: int
    spec: InitialMeasureSpec
    times: tuple = (0.0,)
    test_functions: tuple = ()
    batch_size: int = 256
    threads: int = 1
    confidence_sigmas: float = 3.0

    def __post_init__(self):
        if self.sample_count < 1:
            raise ValueError("sample_count must be positive")
        if self.batch_size < 1:
            raise ValueError("batch_size must be positive")


def _run_indexed(fn, M: int, batch: int, threads: int) -> np.ndarray:
    """Evaluate fn(start, stop) -> array over [0, M) in batches; results stacked in index order."""
    bounds = [(s, min(s + batch, M)) for s in range(0, M, batch)]
    if threads <= 1 or len(bounds) == 1:
        parts = [fn(a, b) for a, b in bounds]
    else:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            parts = list(pool.map(lambda ab: fn(*ab), bounds))
    return np.concatenate(parts, axis=0)


# --- noise ------------------------------------------------------------------

def draw_noise(rng: np.random.Generator, law: str, shape) -> np.ndarray:
    """i.i.d. zero-mean unit-variance noise."""
    if law == "gaussian":
        return rng.standard_normal(shape)
    if law == "rademacher":
        return 2.0 * rng.integers(0, 2, size=shape) - 1.0
    if law == "uniform":
        return rng.uniform(-np.sqrt(3.0), np.sqrt(3.0), size=shape)
    raise ValueError(f"unknown noise law {law!r}")


# --- moving averages ------------------------------------------------------------

class MovingAverageSampler:
    """Finite-range moving-average initial data.

    Noise channels are psi, u, pi, v (the last two reuse psi and u when noise
    is shared).  The field part is the K-truncated projection of the kernel
    convolution, evaluated exactly in mode space.
    """

    def __init__(self, spec: InitialMeasureSpec, model: ModelParams):
        if spec.kind != "moving_average":
            raise ValueError("MovingAverageSampler needs a moving_average spec")
        self.spec = spec
        self.model = model
        self.fld, self.lat = ma_transfer(spec, model)
        self.cells = (model.N,) * model.d
        self.n_channels = 2 if spec.shared_noise else 4

    def _channel_of(self, component: int, lattice: bool) -> int:
        base = 0 if (self.spec.shared_noise or component == 0) else 2
        return base + (1 if lattice else 0)

    def draw(self, rng: np.random.Generator) -> list[np.ndarray]:
        """Noise arrays in fixed order: psi (cells), u (cells + n), then pi and v unless shared."""
        law = self.spec.noise_law
        out = []
        for ch in range(self.n_channels):
            shape = self.cells + ((self.model.n,) if ch % 2 else ())
            out.append(draw_noise(rng, law, shape))
        return out

    def zak_from_noise(self, noise: list[np.ndarray]) -> ZakField:
        m, d, N = self.model, self.model.d, self.model.N
        G = N**d
        axes = tuple(range(d))
        parts = []
        for comp in range(2):
            eta = noise[self._channel_of(comp, False)]
            zeta = noise[self._channel_of(comp, True)]
            eta_t = (np.fft.ifftn(eta, axes=axes) * G).reshape(G)
            zeta_t = (np.fft.ifftn(zeta, axes=axes) * G).reshape(G, m.n)
            fpart = self.fld[comp] * eta_t[:, None]
            lpart = (self.lat[comp] @ zeta_t[..., None])[..., 0]
            parts.append(np.concatenate([fpart, lpart], axis=1))
        return ZakField(parts[0], parts[1], N, d)

    def sample(self, rng: np.random.Generator) -> LatticeState:
        return zak_inverse(self.zak_from_noise(self.draw(rng)), self.model)

    def weights(self, a: ZakField) -> list[np.ndarray]:
        """Real weights w_c with <Y0, A> = sum_c sum_k noise_c(k) w_c(k)."""
        m, d, N = self.model, self.model.d, self.model.N
        M = m.n_modes
        w = [None] * self.n_channels
        comps = (a.y0, a.y1)
        for comp in range(2):
            A = comps[comp]
            alpha = np.sum(np.conj(A[:, :M]) * self.fld[comp], axis=1)  # (G,)
            beta = np.einsum("ga,gab->gb", np.conj(A[:, M:]), self.lat[comp])  # (G, n)
            for ch, coef in ((self._channel_of(comp, False), alpha.reshape((N,) * d)),
                             (self._channel_of(comp, True), beta.reshape((N,) * d + (m.n,)))):
                val = np.fft.ifftn(coef, axes=tuple(range(d))).real
                w[ch] = val if w[ch] is None else w[ch] + val
        return w

    def functionals(self, weights: Sequence[list[np.ndarray]], M: int, seed: int,
                    batch: int = 256, threads: int = 1) -> np.ndarray:
        """(M, F) values of <Y0, A_f> for a list of weight sets (one per functional)."""
        flat = np.stack([np.concatenate([x.ravel() for x in ws]) for ws in weights], axis=1)

        def run(a, b):
            out = np.empty((b - a, flat.shape[1]))
            for i in range(a, b):
                noise = self.draw(sample_rng(seed, i))
                out[i - a] = np.concatenate([x.ravel() for x in noise]) @ flat
            return out

        return _run_indexed(run, M, batch, threads)


# --- Gaussian sampling ----------------------------------------------------------

class GaussianSampler:
    """Exact sampler of the translation-invariant Gaussian measure with table q(theta_j).

    Representatives j < -j carry independent complex normal vectors; partners are
    mirrored by the reality map; self-conjugate points are symmetrised.
    """

    def __init__(self, q_table: np.ndarray, model: ModelParams, tol: float = 1e-10):
        self.model = model
        G = model.N**model.d
        m2 = 2 * model.cell_dim
        if q_table.shape != (G, m2, m2):
            raise NotPSD(f"covariance table has shape {q_table.shape}, expected {(G, m2, m2)}")
        herm = 0.5 * (q_table + np.conj(np.swapaxes(q_table, -1, -2)))
        lam, V = np.linalg.eigh(herm)
        scale = max(1.0, float(np.max(np.abs(lam))))
        if np.min(lam) < -tol * scale * 1e3:
            raise NotPSD(f"covariance table has eigenvalue {np.min(lam):.3g}")
        self.L = V * np.sqrt(np.clip(lam, 0.0, None))[:, None, :]
        part = partner_indices(model.N, model.d)
        idx = np.arange(G)
        self.rep = idx[idx < part]
        self.selfc = idx[idx == part]
        self.partner = part
        perm = mode_permutations(model)
        m = model.cell_dim
        self.perm2 = np.concatenate([perm, perm + m], axis=1)
        self.G = G

    def draw(self, rng: np.random.Generator) -> np.ndarray:
        """Complex normal vectors, rows ordered as rep then self-conjugate points."""
        k = len(self.rep) + len(self.selfc)
        shape = (k, self.L.shape[-1])
        return (rng.standard_normal(shape) + 1j * rng.standard_normal(shape)) / np.sqrt(2.0)

    def zak_from_noise(self, zeta: np.ndarray) -> ZakField:
        G, N = self.G, self.model.N
        Y = np.zeros((G, self.L.shape[-1]), dtype=complex)
        nr = len(self.rep)
        X = np.sqrt(G) * (self.L[self.rep] @ zeta[:nr, :, None])[..., 0]
        Y[self.rep] = X
        Y[self.partner[self.rep]] = np.conj(np.take_along_axis(X, self.perm2[self.rep], axis=1))
        Xs = (self.L[self.selfc] @ zeta[nr:, :, None])[..., 0]
        Js = np.conj(np.take_along_axis(Xs, self.perm2[self.selfc], axis=1))
        Y[self.selfc] = np.sqrt(G) * (Xs + Js) / np.sqrt(2.0)
        return ZakField.from_stacked(Y, N, self.model.d)

    def sample(self, rng: np.random.Generator) -> LatticeState:
        return zak_inverse(self.zak_from_noise(self.draw(rng)), self.model)

    def weights(self, a: ZakField) -> np.ndarray:
        """u_j = L_j^dagger A_j on rep and self points, scaled so <Y, A> = Re(sum conj(u) zeta)."""
        A = a.stacked
        u = np.conj(np.swapaxes(self.L, -1, -2)) @ A[..., None]
        u = u[..., 0]
        G = self.G
        return np.concatenate([2.0 / np.sqrt(G) * u[self.rep], np.sqrt(2.0 / G) * u[self.selfc]], axis=0)

    def functionals(self, weights: Sequence[np.ndarray], M: int, seed: int,
                    batch: int = 256, threads: int = 1) -> np.ndarray:
        W = np.stack([w.ravel() for w in weights], axis=1)

        def run(a, b):
            out = np.empty((b - a, W.shape[1]))
            for i in range(a, b):
                z = self.draw(sample_rng(seed, i)).ravel()
                out[i - a] = (np.conj(W).T @ z).real
            return out

        return _run_indexed(run, M, batch, threads)


def make_sampler(spec: InitialMeasureSpec, model: ModelParams, grid: SpectralGrid | None = None):
    if spec.kind == "moving_average":
        return MovingAverageSampler(spec, model)
    g = spectral_grid(model) if grid is None else grid
    return GaussianSampler(initial_covariance_table(spec, model, grid=g), model)


def sample_initial(spec: InitialMeasureSpec, model: ModelParams, rng: np.random.Generator) -> LatticeState:
    return make_sampler(spec, model).sample(rng)


# --- estimators -----------------------------------------------------------------

@dataclass
class QuadraticEstimate:
    t: float
    mean: float
    mean_stderr: float
    variance: float  # E<Y(t), Z>^2 estimated with the known zero mean
    stderr: float


def observe(config: EnsembleConfig, model: ModelParams, times: Sequence[float], z: TestFunction,
            grid: SpectralGrid | None = None, sampler=None, gamma: float | None = None) -> np.ndarray:
    """(M, T) samples of <Y(t), Z> for each requested time."""
    g = spectral_grid(model) if grid is None else grid
    if gamma is not None:
        check_wraparound(model.N, gamma, max(times, default=0.0))
    smp = make_sampler(config.spec, model, g) if sampler is None else sampler
    z0 = test_function_zak(z, model, g)
    weights = [smp.weights(adjoint_evolve(z0, model, float(t), g)) for t in times]
    return smp.functionals(weights, config.sample_count, config.seed, config.batch_size, config.threads)


def estimate_quadratic_form(config: EnsembleConfig, model: ModelParams, t: float, z: TestFunction,
                            grid: SpectralGrid | None = None, gamma: float | None = None,
                            sampler=None) -> QuadraticEstimate:
    x = observe(config, model, [t], z, grid, sampler, gamma)[:, 0]
    return _summarize(float(t), x)


def _summarize(t: float, x: np.ndarray) -> QuadraticEstimate:
    M = len(x)
    sq = x**2
    return QuadraticEstimate(t, float(np.mean(x)), float(np.std(x, ddof=1) / np.sqrt(M)),
                             float(np.mean(sq)), float(np.std(sq, ddof=1) / np.sqrt(M)))


@dataclass
class CharRow:
    s: float
    re: float
    im: float
    re_stderr: float
    im_stderr: float
    reference: float

    @property
    def deviation_sigmas(self) -> float:
        dev = []
        for val, ref, se in ((self.re, self.reference, self.re_stderr), (self.im, 0.0, self.im_stderr)):
            diff = abs(val - ref)
            dev.append(0.0 if diff == 0 else (np.inf if se == 0 else diff / se))
        return float(max(dev))


def char_functional_table(x: np.ndarray, s_grid: Sequence[float], q_ref: float) -> list[CharRow]:
    M = len(x)
    rows = []
    for s in s_grid:
        c, si = np.cos(s * x), np.sin(s * x)
        rows.append(CharRow(float(s), float(np.mean(c)), float(np.mean(si)),
                            float(np.std(c, ddof=1) / np.sqrt(M)), float(np.std(si, ddof=1) / np.sqrt(M)),
                            float(np.exp(-0.5 * s**2 * q_ref))))
    return rows


def empirical_char_functional(config: EnsembleConfig, model: ModelParams, t: float, z: TestFunction,
                              s_grid: Sequence[float], q_ref: float, grid: SpectralGrid | None = None,
                              gamma: float | None = None) -> list[CharRow]:
    """(1/M) sum exp(i s <Y(t), Z>) against the Gaussian reference exp(-s^2 q_ref / 2)."""
    x = observe(config, model, [t], z, grid, None, gamma)[:, 0]
    return char_functional_table(x, s_grid, q_ref)


@dataclass
class NormalityStats:
    t: float
    skewness: float
    excess_kurtosis: float
    skew_stderr: float
    kurt_stderr: float


def moment_stats(x: np.ndarray, t: float = 0.0, n_batches: int = 20) -> NormalityStats:
    """Sample skewness and excess kurtosis; stderrs from batch means (valid for any law)."""

    def stats(v):
        c = v - np.mean(v)
        m2 = np.mean(c**2)
        return np.mean(c**3) / m2**1.5, np.mean(c**4) / m2**2 - 3.0

    sk, ku = stats(x)
    nb = max(2, min(n_batches, len(x) // 50))
    parts = np.array_split(x, nb)
    bs = np.array([stats(p) for p in parts])
    # batch estimates have variance ~ nb times that of the full-sample estimate
    se = np.std(bs, axis=0, ddof=1) / np.sqrt(nb)
    return NormalityStats(float(t), float(sk), float(ku), float(se[0]), float(se[1]))


def normality_stats(config: EnsembleConfig, model: ModelParams, t: float, z: TestFunction,
                    grid: SpectralGrid | None = None, gamma: float | None = None) -> NormalityStats:
    x = observe(config, model, [t], z, grid, None, gamma)[:, 0]
    return moment_stats(x, t)


def rademacher_kurtosis(weights: Sequence[np.ndarray]) -> float:
    """Exact excess kurtosis of sum_k w_k eps_k for i.i.d. signs: -2 sum w^4 / (sum w^2)^2."""
    w = np.concatenate([np.ravel(x) for x in weights])
    return float(-2.0 * np.sum(w**4) / np.sum(w**2) ** 2)


@dataclass
class MixingRow:
    t: float
    exact: float
    mc: float
    mc_stderr: float


def mixing_correlation(model: ModelParams, q_inf: np.ndarray, z: TestFunction, z1: TestFunction,
                       times: Sequence[float], M: int, seed: int = 0, grid: SpectralGrid | None = None,
                       batch: int = 256, threads: int = 1) -> list[MixingRow]:
    """E<W(t)Y, Z><Y, Z1> under the Gaussian measure with table q_inf: exact and Monte Carlo."""
    g = spectral_grid(model) if grid is None else grid
    zf = test_function_zak(z, model, g)
    z1f = test_function_zak(z1, model, g)
    evolved = [adjoint_evolve(zf, model, float(t), g) for t in times]
    exact = [cross_form(q_inf, a, z1f) for a in evolved]
    sampler = GaussianSampler(q_inf, model)
    weights = [sampler.weights(a) for a in evolved] + [sampler.weights(z1f)]
    vals = sampler.functionals(weights, M, seed, batch, threads)
    y = vals[:, -1]
    rows = []
    for k, t in enumerate(times):
        prod = vals[:, k] * y
        rows.append(MixingRow(float(t), exact[k], float(np.mean(prod)),
                              float(np.std(prod, ddof=1) / np.sqrt(M))))
    return rows
