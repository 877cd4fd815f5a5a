"""Per-theta covariance matrices: initial measures, evolution, limit, quadratic forms.

Convention: for a translation-invariant random state Y, E[Y_j Y_j^dagger] = N^d q(theta_j)
on the lattice grid, so that E|<Y, Z>|^2 = (1/N^d) sum_j Z_j^dagger q(theta_j) Z_j.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .bloch_cell import (
    ModelParams,
    SpectralData,
    SpectralGrid,
    TWO_PI,
    _as_theta,
    build_h_theta,
    default_gap_tol,
    mode_fourier,
    spectral_grid,
    theta_grid,
)
from .errors import GridMismatch, NotPSD, SingularFunction

NOISE_LAWS = ("gaussian", "rademacher", "uniform")


@dataclass
class CovarianceMatrix:
    theta: np.ndarray
    q: np.ndarray  # (2m, 2m)

    @property
    def m(self) -> int:
        return self.q.shape[0] // 2

    def block(self, i: int, j: int) -> np.ndarray:
        m = self.m
        return self.q[i * m:(i + 1) * m, j * m:(j + 1) * m]

    def check(self, tol: float = 1e-10):
        scale = max(1.0, float(np.max(np.abs(self.q))))
        if np.max(np.abs(self.q - self.q.conj().T)) > tol * scale:
            raise NotPSD("covariance is not Hermitian")
        lam = np.linalg.eigvalsh(0.5 * (self.q + self.q.conj().T))
        if lam[0] < -tol * scale:
            raise NotPSD(f"covariance has eigenvalue {lam[0]:.3g}")


# --- initial measures ---------------------------------------------------------

@dataclass(frozen=True)
class FieldKernel:
    """Gaussian moving-average kernel a exp(-|x-c|^2/(2w^2)) for the psi (0) or pi (1) field."""

    amplitude: float
    width: float
    center: tuple = None
    component: int = 0

    def fourier(self, xi: np.ndarray) -> np.ndarray:
        d = xi.shape[-1]
        c = np.zeros(d) if self.center is None else np.asarray(self.center, dtype=float)
        w = self.width
        val = self.amplitude * (TWO_PI ** (d / 2) * w**d) * np.exp(-0.5 * w**2 * np.sum(xi**2, axis=-1))
        return val * np.exp(1j * (xi @ c))

    def evaluate(self, x: np.ndarray) -> np.ndarray:
        d = x.shape[-1]
        c = np.zeros(d) if self.center is None else np.asarray(self.center, dtype=float)
        return self.amplitude * np.exp(-0.5 * np.sum((x - c) ** 2, axis=-1) / self.width**2)


@dataclass(frozen=True)
class LatticeKernel:
    """Finite-range lattice kernel: u(k) = sum_r B_r zeta(k - r); ``taps`` maps offsets to n x n matrices."""

    taps: tuple  # ((offset tuple, matrix as nested tuple), ...)
    component: int = 0

    @classmethod
    def from_dict(cls, taps: dict, component: int = 0) -> "LatticeKernel":
        items = tuple((tuple(int(x) for x in np.atleast_1d(k)),
                       tuple(map(tuple, np.atleast_2d(np.asarray(v, dtype=float))))) for k, v in taps.items())
        return cls(items, component)

    @classmethod
    def delta(cls, n: int, d: int = 1, scale: float = 1.0, component: int = 0) -> "LatticeKernel":
        return cls.from_dict({(0,) * d: scale * np.eye(n)}, component)

    def matrices(self):
        return [(np.asarray(off, dtype=float), np.asarray(mat, dtype=float)) for off, mat in self.taps]

    def fourier(self, thetas: np.ndarray) -> np.ndarray:
        """B^(theta) = sum_r B_r exp(i r.theta); shape (G, n, n)."""
        out = None
        for off, mat in self.matrices():
            term = np.exp(1j * (thetas @ off))[:, None, None] * mat
            out = term if out is None else out + term
        return out

    @property
    def range(self) -> float:
        return max((float(np.max(np.abs(off))) for off, _ in self.matrices()), default=0.0)


@dataclass
class InitialMeasureSpec:
    """Translation-invariant zero-mean initial measure.

    kind 'gibbs' uses ``temperature``; 'moving_average' builds each component
    (psi, pi, u, v) as a kernel applied to i.i.d. unit-variance noise; 'direct'
    carries a per-theta table (G, 2m, 2m) on the lattice grid.
    """

    kind: str
    temperature: float = 1.0
    field_kernels: tuple = ()
    lattice_kernels: tuple = ()
    noise_law: str = "gaussian"
    shared_noise: bool = False
    table: np.ndarray | None = None

    def __post_init__(self):
        if self.kind not in ("gibbs", "moving_average", "direct"):
            raise ValueError(f"unknown initial measure kind {self.kind!r}")
        if self.noise_law not in NOISE_LAWS:
            raise ValueError(f"unknown noise law {self.noise_law!r}")
        if self.kind == "gibbs" and not self.temperature > 0:
            raise ValueError("temperature must be > 0")
        if self.kind == "direct" and self.table is None:
            raise ValueError("direct measure needs a covariance table")

    @classmethod
    def gibbs(cls, temperature: float = 1.0) -> "InitialMeasureSpec":
        return cls("gibbs", temperature=temperature)

    @classmethod
    def moving_average(cls, field_kernels=(), lattice_kernels=(), noise_law="gaussian",
                       shared_noise=False) -> "InitialMeasureSpec":
        return cls("moving_average", field_kernels=tuple(field_kernels),
                   lattice_kernels=tuple(lattice_kernels), noise_law=noise_law, shared_noise=shared_noise)

    @classmethod
    def direct(cls, table: np.ndarray) -> "InitialMeasureSpec":
        return cls("direct", table=np.asarray(table, dtype=complex))

    @property
    def is_gaussian(self) -> bool:
        return self.kind != "moving_average" or self.noise_law == "gaussian"

    @property
    def mixing_range(self) -> float:
        """Dependence range: exact for lattice taps, 8 widths for Gaussian field kernels."""
        r = [k.range for k in self.lattice_kernels]
        for k in self.field_kernels:
            c = 0.0 if k.center is None else float(np.max(np.abs(k.center)))
            r.append(c + 8.0 * k.width)
        return max(r, default=0.0)

    def noise_channel(self, component: int) -> int:
        """Noise stream index for Y0 (0) or Y1 (1) data; shared noise reuses stream 0."""
        return 0 if self.shared_noise else component


def ma_transfer(spec: InitialMeasureSpec, model: ModelParams, thetas=None):
    """Mode-space transfer of the moving average.

    Returns (field, lattice): field has shape (2, G, n_modes) with the psi/pi
    transfer kappa^(theta+2 pi m); lattice has shape (2, G, n, n) with B^(theta).
    Y_j = transfer_j * noise~_j channel by channel.
    """
    if thetas is None:
        thetas = theta_grid(model.N, model.d)
    thetas = _as_theta(thetas, model.d).reshape(-1, model.d)
    G = len(thetas)
    fld = np.zeros((2, G, model.n_modes), dtype=complex)
    lat = np.zeros((2, G, model.n, model.n), dtype=complex)
    for k in spec.field_kernels:
        if k.center is not None and len(k.center) != model.d:
            raise ValueError("field kernel center dimension differs from d")
        fld[k.component] += mode_fourier(model, lambda xi: k.fourier(xi)[..., None], thetas)[..., 0]
    for k in spec.lattice_kernels:
        lat[k.component] += k.fourier(thetas)
    return fld, lat


def initial_covariance_table(spec: InitialMeasureSpec, model: ModelParams, thetas=None,
                             grid: SpectralGrid | None = None) -> np.ndarray:
    """q0(theta) for every grid theta; shape (G, 2m, 2m)."""
    if thetas is None:
        thetas = theta_grid(model.N, model.d)
    thetas = _as_theta(thetas, model.d).reshape(-1, model.d)
    G, m, M = len(thetas), model.cell_dim, model.n_modes
    if spec.kind == "direct":
        table = np.asarray(spec.table, dtype=complex)
        if table.shape != (G, 2 * m, 2 * m):
            raise GridMismatch(f"direct table has shape {table.shape}, expected {(G, 2 * m, 2 * m)}")
        for g in range(G):
            CovarianceMatrix(thetas[g], table[g]).check()
        return table.copy()
    q = np.zeros((G, 2 * m, 2 * m), dtype=complex)
    if spec.kind == "gibbs":
        h = build_h_theta(model, thetas) if grid is None else grid.h
        try:
            hinv = np.linalg.inv(h)
        except np.linalg.LinAlgError as exc:
            raise SingularFunction("H(theta) is singular") from exc
        q[:, :m, :m] = spec.temperature * 0.5 * (hinv + np.conj(np.swapaxes(hinv, -1, -2)))
        q[:, m:, m:] = spec.temperature * np.eye(m)
        return q
    fld, lat = ma_transfer(spec, model, thetas)
    # vectors per component: Y^c = [field_c ; lattice_c] acting on noise of channel c
    for a in range(2):
        for b in range(2):
            if spec.noise_channel(a) != spec.noise_channel(b):
                continue
            blk = q[:, a * m:(a + 1) * m, b * m:(b + 1) * m]
            blk[:, :M, :M] = fld[a][:, :, None] * np.conj(fld[b][:, None, :])
            blk[:, M:, M:] = lat[a] @ np.conj(np.swapaxes(lat[b], -1, -2))
    return q


def initial_covariance(spec: InitialMeasureSpec, model: ModelParams, theta) -> CovarianceMatrix:
    th = _as_theta(theta, model.d).reshape(1, model.d)
    if spec.kind == "direct":
        grid = theta_grid(model.N, model.d)
        hit = np.nonzero(np.all(np.isclose(grid, th), axis=1))[0]
        if len(hit) == 0:
            raise GridMismatch("theta is not on the lattice grid of the direct table")
        q = np.asarray(spec.table[hit[0]], dtype=complex)
        cm = CovarianceMatrix(th[0], q.copy())
        cm.check()
        return cm
    return CovarianceMatrix(th[0], initial_covariance_table(spec, model, th)[0])


# --- evolution and limit --------------------------------------------------------

def _blocks(spec: SpectralData, t: float):
    w = spec.omegas
    F = spec.eigenvectors
    Fh = F.conj().T
    c = (F * np.cos(w * t)) @ Fh
    s = (F * (np.sin(w * t) / w)) @ Fh
    ws = (F * (w * np.sin(w * t))) @ Fh
    return np.block([[c, s], [-ws, c]])


def evolve_covariance(q0: CovarianceMatrix, spec: SpectralData, t: float) -> CovarianceMatrix:
    """q_t = G(theta, t) q0 G(theta, t)^dagger."""
    G = _blocks(spec, t)
    return CovarianceMatrix(q0.theta, G @ q0.q @ G.conj().T)


def limit_covariance(q0: CovarianceMatrix, spec: SpectralData) -> CovarianceMatrix:
    """Cesaro limit of q_t: the slowly rotating part of each degeneracy group."""
    F = spec.eigenvectors[None]
    p = _to_eigenbasis(q0.q[None], F)
    ids = group_ids(spec.eigenvalues[None], spec.gap_tol)
    out = _limit_eigen(p, spec.eigenvalues[None], ids)
    return CovarianceMatrix(q0.theta, _from_eigenbasis(out, F)[0])


def group_ids(eigenvalues: np.ndarray, gap_tol: np.ndarray | float | None = None) -> np.ndarray:
    """Degeneracy-group label of each band, shape like eigenvalues (batched over leading axes)."""
    lam = np.asarray(eigenvalues)
    if gap_tol is None:
        gap_tol = 1e-8 * (1.0 + lam[..., -1])
    tol = np.asarray(gap_tol)[..., None]
    step = (np.diff(lam, axis=-1) >= tol).astype(int)
    zeros = np.zeros(lam.shape[:-1] + (1,), dtype=int)
    return np.concatenate([zeros, np.cumsum(step, axis=-1)], axis=-1)


def _to_eigenbasis(q: np.ndarray, F: np.ndarray) -> np.ndarray:
    """(F+F)^dagger q (F+F) batched; q (G, 2m, 2m), F (G, m, m)."""
    m = F.shape[-1]
    Fh = np.conj(np.swapaxes(F, -1, -2))
    out = np.empty_like(q)
    for i in range(2):
        for j in range(2):
            out[:, i * m:(i + 1) * m, j * m:(j + 1) * m] = Fh @ q[:, i * m:(i + 1) * m, j * m:(j + 1) * m] @ F
    return out


def _from_eigenbasis(p: np.ndarray, F: np.ndarray) -> np.ndarray:
    m = F.shape[-1]
    Fh = np.conj(np.swapaxes(F, -1, -2))
    out = np.empty_like(p)
    for i in range(2):
        for j in range(2):
            out[:, i * m:(i + 1) * m, j * m:(j + 1) * m] = F @ p[:, i * m:(i + 1) * m, j * m:(j + 1) * m] @ Fh
    return out


_CHUNK = 256  # theta points per batch; keeps the working set in cache


def _chunked(fn, q0: np.ndarray, *arrays) -> np.ndarray:
    out = np.empty_like(q0, dtype=complex)
    for a in range(0, len(q0), _CHUNK):
        sl = slice(a, a + _CHUNK)
        out[sl] = fn(q0[sl], *(x[sl] for x in arrays))
    return out


def evolve_covariance_table(q0: np.ndarray, grid: SpectralGrid, t: float) -> np.ndarray:
    """Batched congruence by G(theta_j, t) over the grid."""
    return _chunked(lambda q, w, F: _evolve_eigen(q, w, F, t), q0, grid.omegas, grid.eigenvectors)


def _evolve_eigen(q0: np.ndarray, w: np.ndarray, F: np.ndarray, t: float) -> np.ndarray:
    m = w.shape[1]
    p = _to_eigenbasis(q0, F)
    c, s = np.cos(w * t), np.sin(w * t)
    sw, ws = s / w, w * s
    # g_l = [[c, s/w], [-w s, c]] acts on the (l, l + m) pair, from the left and the right
    rows = np.concatenate([c[:, :, None] * p[:, :m] + sw[:, :, None] * p[:, m:],
                           -ws[:, :, None] * p[:, :m] + c[:, :, None] * p[:, m:]], axis=1)
    pt = np.concatenate([rows[:, :, :m] * c[:, None, :] + rows[:, :, m:] * sw[:, None, :],
                         -rows[:, :, :m] * ws[:, None, :] + rows[:, :, m:] * c[:, None, :]], axis=2)
    return _from_eigenbasis(pt, F)


def _limit_eigen(p: np.ndarray, lam: np.ndarray, ids: np.ndarray) -> np.ndarray:
    """Time average in the eigenbasis, keeping pairs (l, l') in the same group.

    Inside a group the difference frequency is treated as zero; the pairwise
    factors keep the result Hermitian when the group is only nearly degenerate.
    """
    m = lam.shape[1]
    w = np.sqrt(lam)
    wl, wr = w[:, :, None], w[:, None, :]
    p00, p01, p10, p11 = p[:, :m, :m], p[:, :m, m:], p[:, m:, :m], p[:, m:, m:]
    chi = ids[:, :, None] == ids[:, None, :]
    out = np.zeros_like(p)
    out[:, :m, :m] = 0.5 * (p00 + p11 / (wl * wr))
    out[:, :m, m:] = 0.5 * (p01 - (wr / wl) * p10)
    out[:, m:, :m] = 0.5 * (p10 - (wl / wr) * p01)
    out[:, m:, m:] = 0.5 * (wl * wr * p00 + p11)
    out *= np.tile(chi, (1, 2, 2))
    return out


def limit_covariance_table(q0: np.ndarray, grid: SpectralGrid) -> np.ndarray:
    """Batched limit covariance; equals :func:`limit_covariance` at each theta."""
    def one(q, lam, F):
        return _from_eigenbasis(_limit_eigen(_to_eigenbasis(q, F), lam, group_ids(lam)), F)

    return _chunked(one, q0, grid.eigenvalues, grid.eigenvectors)


# --- spectral coefficients ----------------------------------------------------

def spectral_coeffs(q0: CovarianceMatrix, spec: SpectralData) -> np.ndarray:
    """p[l, l', i, j] = F_l^dagger q0^{ij} F_l'."""
    m = q0.m
    F = spec.eigenvectors
    p = np.empty((m, m, 2, 2), dtype=complex)
    for i in range(2):
        for j in range(2):
            p[:, :, i, j] = F.conj().T @ q0.block(i, j) @ F
    return p


def c_matrix(omega: float) -> np.ndarray:
    return np.array([[0.0, 1.0 / omega], [-omega, 0.0]])


def r_matrix(p: np.ndarray, omega_l: float, omega_lp: float, t: float) -> np.ndarray:
    """2x2 coefficient r_ll'(t) from p_ll' by the sum over the +/- frequency combinations."""
    Cl = c_matrix(omega_l)
    ClpT = c_matrix(omega_lp).T
    CpC = Cl @ p @ ClpT
    out = np.zeros((2, 2), dtype=complex)
    for sgn in (1.0, -1.0):
        phase = (omega_l + sgn * omega_lp) * t
        out += np.cos(phase) * (p - sgn * CpC) + np.sin(phase) * (Cl @ p + sgn * p @ ClpT)
    return 0.5 * out


def assemble_from_r(p: np.ndarray, spec: SpectralData, t: float) -> np.ndarray:
    """sum_{l,l'} F_l r_ll'(t) F_l'^dagger as a (2m, 2m) matrix."""
    m = p.shape[0]
    w = spec.omegas
    r = np.empty_like(p)
    for l in range(m):
        for lp in range(m):
            r[l, lp] = r_matrix(p[l, lp], w[l], w[lp], t)
    F = spec.eigenvectors
    out = np.zeros((2 * m, 2 * m), dtype=complex)
    for i in range(2):
        for j in range(2):
            out[i * m:(i + 1) * m, j * m:(j + 1) * m] = F @ r[:, :, i, j] @ F.conj().T
    return out


# --- scalar diagnostics ---------------------------------------------------------

def trace_diagnostic(q: CovarianceMatrix, spec: SpectralData) -> float:
    """tr(W q W) with W = diag(Omega, I)."""
    m = q.m
    F = spec.eigenvectors
    omega = (F * spec.omegas) @ F.conj().T
    val = np.trace(omega @ q.block(0, 0) @ omega) + np.trace(q.block(1, 1))
    return float(val.real)


def trace_diagnostic_table(q: np.ndarray, grid: SpectralGrid) -> np.ndarray:
    m = grid.eigenvalues.shape[1]
    p = _to_eigenbasis(q, grid.eigenvectors)
    d00 = np.real(np.diagonal(p[:, :m, :m], axis1=1, axis2=2))
    d11 = np.real(np.diagonal(p[:, m:, m:], axis1=1, axis2=2))
    return np.sum(grid.eigenvalues * d00 + d11, axis=1)


def quadratic_form(q_table: np.ndarray, z, model: ModelParams | None = None, tol: float = 1e-10) -> float:
    """(1/N^d) sum_j Z_j^dagger q(theta_j) Z_j for a ZakField z."""
    zs = z.stacked
    if q_table.shape[0] != zs.shape[0] or q_table.shape[1] != zs.shape[1]:
        raise GridMismatch(f"covariance table {q_table.shape} and test field {zs.shape} differ")
    val = np.einsum("gi,gij,gj->", np.conj(zs), q_table, zs) / zs.shape[0]
    scale = np.einsum("gi,gi->", np.conj(zs), zs).real / zs.shape[0] * max(1.0, np.max(np.abs(q_table)))
    if val.real < -tol * max(scale, 1.0):
        raise NotPSD(f"quadratic form is negative ({val.real:.3g})")
    return float(val.real)


def cross_form(q_table: np.ndarray, z, z1) -> float:
    """(1/N^d) sum_j Z_j^dagger q Z1_j: the covariance E<Y, Z1><Y, Z>."""
    a, b = z.stacked, z1.stacked
    if a.shape != b.shape or q_table.shape[0] != a.shape[0]:
        raise GridMismatch("fields and table live on different grids")
    return float((np.einsum("gi,gij,gj->", np.conj(a), q_table, b) / a.shape[0]).real)


def write_covariance_csv(q_table: np.ndarray, path) -> None:
    m2 = q_table.shape[1]
    m = m2 // 2
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["theta_idx", "i", "j", "row", "col", "re", "im"])
        for g in range(q_table.shape[0]):
            for r in range(m2):
                for c in range(m2):
                    v = q_table[g, r, c]
                    w.writerow([g, r // m, c // m, r % m, c % m, f"{v.real:.17g}", f"{v.imag:.17g}"])


def read_covariance_csv(path, G: int, m: int) -> np.ndarray:
    q = np.zeros((G, 2 * m, 2 * m), dtype=complex)
    with open(path) as fh:
        reader = csv.DictReader(fh)
        for row in reader:
            g = int(row["theta_idx"])
            r = int(row["i"]) * m + int(row["row"])
            c = int(row["j"]) * m + int(row["col"])
            q[g, r, c] = float(row["re"]) + 1j * float(row["im"])
    return q
