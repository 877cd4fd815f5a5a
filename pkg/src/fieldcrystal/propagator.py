"""Exact per-theta dynamics, Zak transforms and decay measurements on a finite crystal.

A ZakField stores, for every grid quasimomentum, the pair (Y0, Y1) of mode
vectors of length m = (2K+1)^d + n.  The pairing of two fields is the grid
Parseval sum ``(1/N^d) sum_j Z_j^dagger Y_j``, equal to the physical inner
product ``sum_k sum_p psi xi / P^d + sum_k u.v`` of the corresponding states.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.special import erf

from .bloch_cell import ModelParams, SpectralGrid, mode_fourier, reduce_theta, spectral_grid, theta_grid, TWO_PI
from .errors import DimensionMismatch, NonRealField, WraparoundRisk


@dataclass
class ZakField:
    y0: np.ndarray  # (G, m) complex
    y1: np.ndarray  # (G, m) complex
    N: int
    d: int = 1

    def __post_init__(self):
        self.y0 = np.asarray(self.y0, dtype=complex)
        self.y1 = np.asarray(self.y1, dtype=complex)
        if self.y0.shape != self.y1.shape or self.y0.ndim != 2:
            raise DimensionMismatch(f"component shapes {self.y0.shape} and {self.y1.shape} differ")
        if self.y0.shape[0] != self.N**self.d:
            raise DimensionMismatch(f"{self.y0.shape[0]} theta points, expected {self.N ** self.d}")

    @property
    def stacked(self) -> np.ndarray:
        """(G, 2m) array [Y0, Y1]."""
        return np.concatenate([self.y0, self.y1], axis=1)

    @classmethod
    def from_stacked(cls, arr: np.ndarray, N: int, d: int = 1) -> "ZakField":
        m = arr.shape[1] // 2
        return cls(arr[:, :m], arr[:, m:], N, d)

    def copy(self) -> "ZakField":
        return ZakField(self.y0.copy(), self.y1.copy(), self.N, self.d)

    def __add__(self, other: "ZakField") -> "ZakField":
        return ZakField(self.y0 + other.y0, self.y1 + other.y1, self.N, self.d)

    def __mul__(self, c) -> "ZakField":
        return ZakField(c * self.y0, c * self.y1, self.N, self.d)

    __rmul__ = __mul__


@dataclass
class LatticeState:
    """Real physical data on the crystal.

    psi, pi have shape (N,)*d + (P,)*d (cell axes then intra-cell collocation axes);
    u, v have shape (N,)*d + (n,).
    """

    psi: np.ndarray
    u: np.ndarray
    pi: np.ndarray
    v: np.ndarray

    def __post_init__(self):
        for name in ("psi", "u", "pi", "v"):
            arr = np.asarray(getattr(self, name), dtype=float)
            if not np.all(np.isfinite(arr)):
                raise ValueError(f"{name} has non-finite entries")
            setattr(self, name, arr)

    @classmethod
    def zeros(cls, model: ModelParams) -> "LatticeState":
        fshape = (model.N,) * model.d + (model.P,) * model.d
        lshape = (model.N,) * model.d + (model.n,)
        return cls(np.zeros(fshape), np.zeros(lshape), np.zeros(fshape), np.zeros(lshape))

    @classmethod
    def random(cls, model: ModelParams, rng: np.random.Generator) -> "LatticeState":
        z = cls.zeros(model)
        return cls(*(rng.standard_normal(a.shape) for a in (z.psi, z.u, z.pi, z.v)))

    def check(self, model: ModelParams):
        fshape = (model.N,) * model.d + (model.P,) * model.d
        lshape = (model.N,) * model.d + (model.n,)
        for name, shape in (("psi", fshape), ("pi", fshape), ("u", lshape), ("v", lshape)):
            if getattr(self, name).shape != shape:
                raise DimensionMismatch(f"{name} has shape {getattr(self, name).shape}, expected {shape}")

    def inner(self, other: "LatticeState", P: int) -> float:
        d = self.u.ndim - 1
        field_part = (np.sum(self.psi * other.psi) + np.sum(self.pi * other.pi)) / P**d
        return float(field_part + np.sum(self.u * other.u) + np.sum(self.v * other.v))

    def max_abs(self) -> float:
        return float(max(np.max(np.abs(a)) for a in (self.psi, self.u, self.pi, self.v)))


# --- reality structure ------------------------------------------------------

def partner_indices(N: int, d: int) -> np.ndarray:
    """Flat index of -theta_j for every flat grid index j."""
    idx = np.arange(N**d).reshape((N,) * d)
    for ax in range(d):
        idx = np.take(idx, (-np.arange(N)) % N, axis=ax)
    return idx.ravel()


def _pi_flags(N: int, d: int) -> np.ndarray:
    """(G, d) integer flags s_i = 1 where the reduced theta_i equals pi."""
    j = np.array(list(itertools.product(range(N), repeat=d))).reshape(-1, d)
    return (j == N // 2).astype(int)


def mode_permutations(model: ModelParams) -> np.ndarray:
    """(G, m) index arrays sigma with (J Y)(-theta)_m = conj Y(theta)_{sigma(m)}."""
    P, K = model.P, model.K
    modes = model.mode_indices()
    s = _pi_flags(model.N, model.d)
    strides = P ** np.arange(model.d - 1, -1, -1)
    out = np.empty((len(s), model.cell_dim), dtype=int)
    cache = {}
    for g, sg in enumerate(s):
        key = tuple(sg)
        if key not in cache:
            target = np.mod(-(modes + sg) + K, P)  # 0-based position per axis
            field_perm = target @ strides
            cache[key] = np.concatenate([field_perm, model.n_modes + np.arange(model.n)])
        out[g] = cache[key]
    return out


def apply_reality_map(model: ModelParams, arr: np.ndarray) -> np.ndarray:
    """Antilinear map J whose fixed points are the Zak images of real states; arr has shape (G, m)."""
    part = partner_indices(model.N, model.d)
    perm = mode_permutations(model)
    out = np.empty_like(arr)
    src = np.conj(np.take_along_axis(arr, perm, axis=1))
    out[part] = src
    return out


def reality_defect(model: ModelParams, zf: ZakField) -> float:
    """Max deviation from the reality constraint relative to the field's max entry."""
    scale = max(np.max(np.abs(zf.y0), initial=0.0), np.max(np.abs(zf.y1), initial=0.0))
    if scale == 0:
        return 0.0
    dev = max(np.max(np.abs(apply_reality_map(model, zf.y0) - zf.y0)),
              np.max(np.abs(apply_reality_map(model, zf.y1) - zf.y1)))
    return float(dev / scale)


def symmetrize(model: ModelParams, zf: ZakField) -> ZakField:
    """Project onto the real subspace: (Y + J Y) / 2."""
    return ZakField(0.5 * (zf.y0 + apply_reality_map(model, zf.y0)),
                    0.5 * (zf.y1 + apply_reality_map(model, zf.y1)), zf.N, zf.d)


# --- Zak transforms -----------------------------------------------------------

def _twist(model: ModelParams) -> np.ndarray:
    """exp(i y_p . theta_red) with shape (G,) + (P,)*d."""
    d, P = model.d, model.P
    thr = reduce_theta(theta_grid(model.N, d))
    y = np.arange(P) / P
    mesh = np.stack(np.meshgrid(*([y] * d), indexing="ij"), axis=-1)  # (P,)*d + (d,)
    phase = np.tensordot(thr, mesh, axes=([1], [d]))  # (G,) + (P,)*d
    return np.exp(1j * phase)


def _field_to_modes(model: ModelParams, arr: np.ndarray) -> np.ndarray:
    d, N = model.d, model.N
    cell_axes = tuple(range(d))
    cell_axes_after = tuple(range(1, d + 1))
    tilde = np.fft.ifftn(arr, axes=cell_axes) * N**d
    tilde = tilde.reshape((N**d,) + arr.shape[d:]) * _twist(model)
    coef = np.fft.fftshift(np.fft.ifftn(tilde, axes=cell_axes_after), axes=cell_axes_after)
    return coef.reshape(N**d, model.n_modes)


def _modes_to_field(model: ModelParams, coef: np.ndarray) -> np.ndarray:
    d, N, P = model.d, model.N, model.P
    cell_axes_after = tuple(range(1, d + 1))
    c = coef.reshape((N**d,) + (P,) * d)
    vals = np.fft.fftn(np.fft.ifftshift(c, axes=cell_axes_after), axes=cell_axes_after)
    vals = vals * np.conj(_twist(model))
    vals = vals.reshape((N,) * d + (P,) * d)
    return np.fft.fftn(vals, axes=tuple(range(d))) / N**d


def _lattice_to_modes(model: ModelParams, arr: np.ndarray) -> np.ndarray:
    d, N = model.d, model.N
    tilde = np.fft.ifftn(arr, axes=tuple(range(d))) * N**d
    return tilde.reshape(N**d, model.n)


def _modes_to_lattice(model: ModelParams, coef: np.ndarray) -> np.ndarray:
    d, N = model.d, model.N
    c = coef.reshape((N,) * d + (model.n,))
    return np.fft.fftn(c, axes=tuple(range(d))) / N**d


def zak_forward(state: LatticeState, model: ModelParams) -> ZakField:
    state.check(model)
    y0 = np.concatenate([_field_to_modes(model, state.psi), _lattice_to_modes(model, state.u)], axis=1)
    y1 = np.concatenate([_field_to_modes(model, state.pi), _lattice_to_modes(model, state.v)], axis=1)
    return ZakField(y0, y1, model.N, model.d)


def zak_inverse(zf: ZakField, model: ModelParams, tol: float = 1e-8) -> LatticeState:
    if zf.N != model.N or zf.d != model.d or zf.y0.shape[1] != model.cell_dim:
        raise DimensionMismatch("ZakField does not match the model dimensions")
    defect = reality_defect(model, zf)
    if defect > tol:
        raise NonRealField(f"reality constraint violated by {defect:.3g} (tolerance {tol:g})")
    M = model.n_modes
    parts = [
        _modes_to_field(model, zf.y0[:, :M]),
        _modes_to_lattice(model, zf.y0[:, M:]),
        _modes_to_field(model, zf.y1[:, :M]),
        _modes_to_lattice(model, zf.y1[:, M:]),
    ]
    scale = max((np.max(np.abs(p)) for p in parts), default=0.0)
    residue = max((np.max(np.abs(p.imag)) for p in parts), default=0.0)
    if scale > 0 and residue > max(1e-10, 10 * tol) * scale:
        raise NonRealField(f"imaginary residue {residue:.3g} after inversion")
    return LatticeState(*(p.real for p in parts))


def pairing(y: ZakField, z: ZakField) -> complex:
    """Grid Parseval pairing (1/N^d) sum_j Z_j^dagger Y_j."""
    if y.y0.shape != z.y0.shape:
        raise DimensionMismatch("fields live on different grids")
    G = y.y0.shape[0]
    return complex(np.vdot(z.y0, y.y0) + np.vdot(z.y1, y.y1)) / G


# --- propagator ---------------------------------------------------------------

def propagator_matrix(spec, t: float) -> np.ndarray:
    """2m x 2m block matrix [[cos Wt, sin Wt / W], [-W sin Wt, cos Wt]] at one theta."""
    w = spec.omegas
    F = spec.eigenvectors
    Fh = F.conj().T

    def fn(vals):
        return (F * vals) @ Fh

    c = fn(np.cos(w * t))
    s = fn(np.sin(w * t) / w)
    ws = fn(w * np.sin(w * t))
    return np.block([[c, s], [-ws, c]])


def adjoint_propagator_matrix(spec, t: float) -> np.ndarray:
    """Hermitian adjoint of :func:`propagator_matrix`, the flow of the transposed generator."""
    return propagator_matrix(spec, t).conj().T


def _grid_for(model: ModelParams, grid: SpectralGrid | None) -> SpectralGrid:
    return spectral_grid(model) if grid is None else grid


def _flow(zf: ZakField, grid: SpectralGrid, t: float, adjoint: bool) -> ZakField:
    w = grid.omegas
    F = grid.eigenvectors
    Fh = np.conj(np.swapaxes(F, -1, -2))
    a0 = (Fh @ zf.y0[..., None])[..., 0]
    a1 = (Fh @ zf.y1[..., None])[..., 0]
    c, s = np.cos(w * t), np.sin(w * t)
    if adjoint:
        b0 = c * a0 - w * s * a1
        b1 = s / w * a0 + c * a1
    else:
        b0 = c * a0 + s / w * a1
        b1 = -w * s * a0 + c * a1
    y0 = (F @ b0[..., None])[..., 0]
    y1 = (F @ b1[..., None])[..., 0]
    return ZakField(y0, y1, zf.N, zf.d)


def evolve(zf: ZakField, model: ModelParams, t: float, grid: SpectralGrid | None = None) -> ZakField:
    """exp(A(theta) t) applied at every grid theta."""
    return _flow(zf, _grid_for(model, grid), t, adjoint=False)


def adjoint_evolve(zf: ZakField, model: ModelParams, t: float, grid: SpectralGrid | None = None) -> ZakField:
    """exp(A(theta)^dagger t) applied at every grid theta."""
    return _flow(zf, _grid_for(model, grid), t, adjoint=True)


def energy(zf: ZakField, model: ModelParams, grid: SpectralGrid | None = None) -> float:
    """(1/2)(1/N^d) sum_j [Y0^dagger H Y0 + |Y1|^2]."""
    g = _grid_for(model, grid)
    hy = (g.h @ zf.y0[..., None])[..., 0]
    G = zf.y0.shape[0]
    return float(0.5 * (np.vdot(zf.y0, hy).real + np.vdot(zf.y1, zf.y1).real) / G)


def solve(initial: LatticeState, model: ModelParams, times: Sequence[float],
          grid: SpectralGrid | None = None) -> list[LatticeState]:
    g = _grid_for(model, grid)
    y = zak_forward(initial, model)
    return [zak_inverse(evolve(y, model, float(t), g), model) for t in times]


# --- test functions -----------------------------------------------------------

@dataclass(frozen=True)
class GaussianPacket:
    """Real field bump a exp(-|x-x0|^2/(2w^2)) cos(kappa.(x-x0)) in component 0 or 1."""

    amplitude: float
    center: tuple
    width: float
    carrier: tuple = None
    component: int = 0

    def fourier(self, eta: np.ndarray) -> np.ndarray:
        """int exp(i eta.x) xi(x) dx for eta of shape (..., d)."""
        d = eta.shape[-1]
        x0 = np.asarray(self.center, dtype=float)
        kap = np.zeros(d) if self.carrier is None else np.asarray(self.carrier, dtype=float)
        w = self.width
        env = 0.5 * (np.exp(-0.5 * w**2 * np.sum((eta + kap) ** 2, axis=-1))
                     + np.exp(-0.5 * w**2 * np.sum((eta - kap) ** 2, axis=-1)))
        return self.amplitude * np.exp(1j * (eta @ x0)) * (TWO_PI ** (d / 2) * w**d) * env


@dataclass(frozen=True)
class LatticeEntry:
    cell: tuple
    vector: tuple
    component: int = 0


@dataclass
class TestFunction:
    """Test function with closed-form Zak data.

    ``band_limit`` keeps only the lowest bands; ``cutoff`` is a per-theta window
    (values in [0, 1], exactly zero on excluded cells) applied after filtering.
    """

    __test__ = False  # not a pytest class

    packets: tuple = ()
    lattice: tuple = ()
    band_limit: int | None = None
    cutoff: np.ndarray | None = None
    center: tuple | None = None

    def position(self, d: int) -> np.ndarray:
        if self.center is not None:
            return np.asarray(self.center, dtype=float)
        pts = [np.asarray(p.center, dtype=float) for p in self.packets]
        pts += [np.asarray(e.cell, dtype=float) for e in self.lattice]
        return np.mean(pts, axis=0) if pts else np.zeros(d)


def test_function_zak(z: TestFunction, model: ModelParams, grid: SpectralGrid | None = None) -> ZakField:
    """Mode coordinates of a test function on the lattice theta grid."""
    d, N = model.d, model.N
    thetas = theta_grid(N, d)
    G = len(thetas)
    out = [np.zeros((G, model.cell_dim), dtype=complex) for _ in range(2)]
    if z.packets:
        for p in z.packets:
            if len(p.center) != d:
                raise DimensionMismatch("packet center dimension differs from d")
            out[p.component][:, : model.n_modes] += mode_fourier(
                model, lambda xi, p=p: p.fourier(xi)[..., None], thetas)[..., 0]
    for e in z.lattice:
        if len(e.cell) != d or len(e.vector) != model.n:
            raise DimensionMismatch("lattice entry does not match (d, n)")
        phase = np.exp(1j * (thetas @ np.asarray(e.cell, dtype=float)))
        out[e.component][:, model.n_modes:] += phase[:, None] * np.asarray(e.vector, dtype=float)
    zf = ZakField(out[0], out[1], N, d)
    if z.band_limit is not None:
        g = _grid_for(model, grid)
        keep = np.zeros(model.cell_dim)
        keep[: z.band_limit] = 1.0
        vals = np.broadcast_to(keep, g.eigenvalues.shape)
        zf = ZakField(g.apply_function(vals, zf.y0), g.apply_function(vals, zf.y1), N, d)
    if z.cutoff is not None:
        w = np.asarray(z.cutoff, dtype=float)
        if w.shape != (G,):
            raise DimensionMismatch(f"cutoff has shape {w.shape}, expected ({G},)")
        zf = ZakField(w[:, None] * zf.y0, w[:, None] * zf.y1, N, d)
    return zf


def circular_distance(theta: np.ndarray, points: np.ndarray) -> np.ndarray:
    """Distance on the torus from each theta (G, d) to the nearest of points (k, d)."""
    if len(points) == 0:
        return np.full(len(theta), np.inf)
    diff = theta[:, None, :] - points[None, :, :]
    diff = np.abs(np.mod(diff + np.pi, TWO_PI) - np.pi)
    return np.min(np.sqrt(np.sum(diff**2, axis=-1)), axis=1)


def smooth_window(thetas: np.ndarray, flagged: np.ndarray, delta: float, width: float,
                  steepness: float = 3.0) -> np.ndarray:
    """Window in [0, 1] that is exactly 0 within ``delta`` of every flagged point.

    ``delta`` and ``width`` may be scalars or one value per flagged point.
    Points sharing the same (delta, width) form a group; each group contributes
    one erf ramp in the distance to its nearest member, rising from exactly 0
    at distance delta to exactly 1 at delta + 2 steepness width.  The window is
    the product over groups.
    """
    thetas = np.asarray(thetas, dtype=float)
    flagged = np.atleast_2d(np.asarray(flagged, dtype=float))
    a = steepness
    deltas = np.broadcast_to(np.asarray(delta, dtype=float), (len(flagged),))
    widths = np.broadcast_to(np.asarray(width, dtype=float), (len(flagged),))
    out = np.ones(len(thetas))
    for dlt, wd in sorted(set(zip(deltas.tolist(), widths.tolist()))):
        members = flagged[(deltas == dlt) & (widths == wd)]
        dist = circular_distance(thetas, members)
        u = (dist - dlt - a * wd) / wd
        ramp = (erf(u) + erf(a)) / (2.0 * erf(a))
        out *= np.clip(ramp, 0.0, 1.0)
    return out


# --- decay ------------------------------------------------------------------

@dataclass
class DecayRow:
    t: float
    sup_all: float
    sup_in: float
    sup_out: float


def check_wraparound(N: int, gamma: float, t_max: float, factor: float = 1.5):
    if not N / 2 > factor * gamma * t_max:
        raise WraparoundRisk(N, gamma, t_max, factor)


def _cell_distance(model: ModelParams, center: np.ndarray):
    """Periodic distances of field collocation points and lattice sites from center."""
    d, N, P = model.d, model.N, model.P
    cells = np.stack(np.meshgrid(*([np.arange(N)] * d), indexing="ij"), axis=-1)  # (N,)*d + (d,)
    y = np.stack(np.meshgrid(*([np.arange(P) / P] * d), indexing="ij"), axis=-1)
    field_pos = cells.reshape((N,) * d + (1,) * d + (d,)) + y.reshape((1,) * d + (P,) * d + (d,))

    def dist(pos):
        diff = np.mod(pos - center + N / 2, N) - N / 2
        return np.sqrt(np.sum(diff**2, axis=-1))

    return dist(field_pos), dist(cells.astype(float))


def decay_profile(z: TestFunction, model: ModelParams, times: Sequence[float], gamma: float,
                  v_factor: float = 1.3, grid: SpectralGrid | None = None,
                  guard: float = 1.5) -> list[DecayRow]:
    """Sup norms of the adjoint-evolved test function inside and outside the cone |x| <= v gamma t."""
    times = [float(t) for t in times]
    check_wraparound(model.N, gamma, max(times, default=0.0), guard)
    g = _grid_for(model, grid)
    z0 = test_function_zak(z, model, g)
    fd, ld = _cell_distance(model, z.position(model.d))
    rows = []
    for t in times:
        state = zak_inverse(adjoint_evolve(z0, model, t, g), model)
        r = v_factor * gamma * t
        fabs = np.maximum(np.abs(state.psi), np.abs(state.pi))
        labs = np.max(np.maximum(np.abs(state.u), np.abs(state.v)), axis=-1)
        sup_all = max(fabs.max(), labs.max())
        fin, lin = fd <= r, ld <= r
        sup_in = max(fabs[fin].max(initial=0.0), labs[lin].max(initial=0.0))
        sup_out = max(fabs[~fin].max(initial=0.0), labs[~lin].max(initial=0.0))
        rows.append(DecayRow(t, float(sup_all), float(sup_in), float(sup_out)))
    return rows


def fit_decay_exponent(rows: Sequence[DecayRow], t_min: float, t_max: float) -> float:
    """Least-squares slope of log sup_all against log t over [t_min, t_max]."""
    pts = [(np.log(r.t), np.log(r.sup_all)) for r in rows if t_min <= r.t <= t_max and r.sup_all > 0]
    if len(pts) < 2:
        raise ValueError("need at least two times in the fit window")
    x, y = np.array(pts).T
    return float(np.polyfit(x, y, 1)[0])
