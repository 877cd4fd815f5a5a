"""Band structures, group velocities, Hessian determinants and the E1/E2 diagnostics.

Bands are the sorted frequencies omega_l(theta); they are not continued
analytically through crossings.  Samples whose band touches a neighbour
(gap below tolerance) get NaN velocities and Hessians.
"""

from __future__ import annotations

import csv
import itertools
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .bloch_cell import (
    CouplingSpec,
    ModelParams,
    _as_theta,
    build_dh_theta,
    build_h_theta,
    check_r2_prime,
    default_gap_tol,
)
from .errors import DegenerateBand, NonPositiveSpectrum

HESSIAN_STEP = 1e-4


@dataclass
class Bands:
    theta_grid: np.ndarray  # (G, d)
    omegas: np.ndarray  # (G, m)
    gaps: np.ndarray  # (G,) minimal adjacent gap in omega
    velocities: np.ndarray  # (G, m, d), NaN at degenerate samples
    hessian_dets: np.ndarray  # (G, m), NaN where the stencil touches a degeneracy
    band_gaps: np.ndarray = None  # (G, m) gap of each band to its nearest neighbour, in lambda

    @property
    def n_bands(self) -> int:
        return self.omegas.shape[1]

    def __len__(self):
        return len(self.theta_grid)


def _local_gaps(lam: np.ndarray) -> np.ndarray:
    """Distance of each eigenvalue to its nearest neighbour, shape like lam."""
    diff = np.diff(lam, axis=-1)
    inf = np.full(lam.shape[:-1] + (1,), np.inf)
    return np.minimum(np.concatenate([inf, diff], axis=-1), np.concatenate([diff, inf], axis=-1))


def _eigs(model: ModelParams, thetas: np.ndarray) -> np.ndarray:
    return np.linalg.eigvalsh(build_h_theta(model, thetas))


def _velocities(model, thetas, lam, F, ok):
    dh = build_dh_theta(model, thetas)  # (G, d, m, m)
    Fh = np.conj(np.swapaxes(F, -1, -2))
    # diagonal of F^dagger dH F for each direction
    diag = np.einsum("gli,gdij,gjl->gld", Fh, dh, F).real
    v = diag / (2.0 * np.sqrt(lam))[..., None]
    v[~ok] = np.nan
    return v


def _stencil(d: int, h: float):
    """Offsets and weights for the central-difference Hessian; returns list per (i, j)."""
    out = {}
    for i in range(d):
        for j in range(i, d):
            if i == j:
                e = np.zeros(d)
                e[i] = h
                out[(i, j)] = [(e, 1.0 / h**2), (np.zeros(d), -2.0 / h**2), (-e, 1.0 / h**2)]
            else:
                ei, ej = np.zeros(d), np.zeros(d)
                ei[i], ej[j] = h, h
                w = 1.0 / (4 * h**2)
                out[(i, j)] = [(ei + ej, w), (ei - ej, -w), (-ei + ej, -w), (-ei - ej, w)]
    return out


def _hessians(model: ModelParams, thetas: np.ndarray, h: float):
    """Second-difference Hessians of every band at every theta; (G, m, d, d) plus a validity mask."""
    d = model.d
    G, m = len(thetas), model.cell_dim
    hess = np.zeros((G, m, d, d))
    ok = np.ones((G, m), dtype=bool)
    cache = {}
    for (i, j), terms in _stencil(d, h).items():
        acc = np.zeros((G, m))
        for off, w in terms:
            key = tuple(np.round(off / h * 4).astype(int))
            if key not in cache:
                lam = _eigs(model, thetas + off)
                tol = default_gap_tol(lam[:, -1])
                ok &= _local_gaps(lam) > tol
                if np.min(lam[:, 0]) <= 0:
                    g = int(np.argmin(lam[:, 0]))
                    raise NonPositiveSpectrum(lam[g, 0], thetas[g] + off)
                cache[key] = np.sqrt(lam)
            acc += w * cache[key]
        hess[:, :, i, j] = acc
        hess[:, :, j, i] = acc
    return hess, ok


def _hessian_dets(model: ModelParams, thetas: np.ndarray, h: float = HESSIAN_STEP):
    h1, ok1 = _hessians(model, thetas, h)
    h2, ok2 = _hessians(model, thetas, h / 2)
    rich = (4.0 * h2 - h1) / 3.0
    det = np.linalg.det(rich) if model.d > 1 else rich[..., 0, 0]
    det = np.where(ok1 & ok2, det, np.nan)
    return det


def band_structure(model: ModelParams, theta_grid, with_hessian: bool = True) -> Bands:
    thetas = _as_theta(theta_grid, model.d).reshape(-1, model.d)
    if len(thetas) == 0:
        raise ValueError("theta grid is empty")
    lam, F = np.linalg.eigh(build_h_theta(model, thetas))
    if np.min(lam[:, 0]) <= 0:
        g = int(np.argmin(lam[:, 0]))
        raise NonPositiveSpectrum(lam[g, 0], thetas[g])
    omegas = np.sqrt(lam)
    tol = np.array([default_gap_tol(row) for row in lam])
    local = _local_gaps(lam)
    ok = local > tol[:, None]
    gaps = np.min(np.diff(omegas, axis=1), axis=1) if lam.shape[1] > 1 else np.full(len(lam), np.inf)
    vel = _velocities(model, thetas, lam, F, ok)
    if with_hessian:
        dets = _hessian_dets(model, thetas)
        dets = np.where(ok, dets, np.nan)
    else:
        dets = np.full(lam.shape, np.nan)
    return Bands(thetas, omegas, gaps, vel, dets, local)


def _single_band(model: ModelParams, theta, l: int):
    th = _as_theta(theta, model.d).reshape(1, model.d)
    lam, F = np.linalg.eigh(build_h_theta(model, th))
    if not 0 <= l < lam.shape[1]:
        raise IndexError(f"band {l} out of range")
    if lam[0, 0] <= 0:
        raise NonPositiveSpectrum(lam[0, 0], th[0])
    if _local_gaps(lam)[0, l] <= default_gap_tol(lam[0]):
        raise DegenerateBand(th[0], l)
    return th, lam, F


def group_velocity(model: ModelParams, theta, l: int) -> np.ndarray:
    """Hellmann-Feynman gradient of omega_l at theta (band index is 0-based)."""
    th, lam, F = _single_band(model, theta, l)
    ok = np.ones_like(lam, dtype=bool)
    return _velocities(model, th, lam, F, ok)[0, l]


def band_frequency(model: ModelParams, theta, l: int) -> float:
    th = _as_theta(theta, model.d).reshape(1, model.d)
    return float(np.sqrt(_eigs(model, th)[0, l]))


def hessian_det(model: ModelParams, theta, l: int, h: float = HESSIAN_STEP) -> float:
    """det of the Richardson-extrapolated second-difference Hessian of omega_l."""
    th, _, _ = _single_band(model, theta, l)
    det = _hessian_dets(model, th, h)[0, l]
    if np.isnan(det):
        raise DegenerateBand(th[0], l)
    return float(det)


@dataclass
class E1E2Report:
    e1_fractions: np.ndarray  # per band
    e1_pass: bool
    e2_min_variance: float
    e2_worst_pair: tuple
    e2_pass: bool
    e2_exempt: list = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return self.e1_pass and self.e2_pass


def check_e1_e2(bands: Bands, tol: float = 1e-8, e1_fraction: float = 0.05,
                bands_subset: Sequence[int] | None = None, e2_tol: float = 1e-14) -> E1E2Report:
    """Grid diagnostics for the nondegenerate-Hessian and non-constant-sum/difference conditions.

    E2 includes l = l' sums (so a constant band fails); differences of pairs
    that coincide on the whole grid are exempt.  ``tol`` bounds |D_l| for E1
    and ``e2_tol`` bounds the grid variance for E2; high field bands are nearly
    linear in theta, so sums of mirror pairs vary only at the 1e-10 level.
    """
    idx = list(range(bands.n_bands)) if bands_subset is None else list(bands_subset)
    fr = []
    for l in idx:
        D = bands.hessian_dets[:, l]
        valid = np.isfinite(D)
        if not valid.any():
            fr.append(1.0)
            continue
        fr.append(float(np.mean(np.abs(D[valid]) < tol)))
    fr = np.array(fr)
    min_var = np.inf
    worst = None
    exempt = []
    for a, b in itertools.combinations_with_replacement(idx, 2):
        wa, wb = bands.omegas[:, a], bands.omegas[:, b]
        for sign in (1.0, -1.0):
            comb = wa + sign * wb
            if sign < 0 and np.max(np.abs(comb)) <= 1e-12 * (1.0 + np.max(wa)):
                exempt.append((a, b))
                continue
            var = float(np.var(comb))
            if var < min_var:
                min_var, worst = var, (a, b, "+" if sign > 0 else "-")
    return E1E2Report(fr, bool(np.all(fr < e1_fraction)), min_var, worst, bool(min_var > e2_tol), exempt)


@dataclass
class GroupSpeed:
    gamma: float
    gamma_safe: float  # gamma with a 10% margin

    def __float__(self):
        return self.gamma


def max_group_speed(bands: Bands, band_subset: Sequence[int] | None = None) -> GroupSpeed:
    v = bands.velocities if band_subset is None else bands.velocities[:, list(band_subset)]
    speed = np.sqrt(np.sum(v**2, axis=-1))
    gamma = float(np.nanmax(speed)) if np.isfinite(speed).any() else 0.0
    return GroupSpeed(gamma, 1.1 * gamma)


def find_crossings(bands: Bands, tol: float, band_subset: Sequence[int] | None = None) -> np.ndarray:
    """Grid indices where a band in the subset comes within ``tol`` (in omega) of a neighbour."""
    w = bands.omegas
    diff = np.diff(w, axis=1)
    close = np.zeros(len(w), dtype=bool)
    limit = w.shape[1] - 1 if band_subset is None else min(max(band_subset) + 1, w.shape[1] - 1)
    for l in range(limit):
        if band_subset is None or l in band_subset or l + 1 in band_subset:
            close |= diff[:, l] < tol
    return np.nonzero(close)[0]


def hessian_sign_changes(bands: Bands, band_subset: Sequence[int]) -> np.ndarray:
    """Grid indices g where D_l changes sign between g and its successor (d = 1 grids)."""
    out = set()
    G = len(bands)
    for l in band_subset:
        D = bands.hessian_dets[:, l]
        s = np.sign(D)
        nxt = np.roll(s, -1)
        for g in np.nonzero((s * nxt) < 0)[0]:
            out.add(int(g))
            out.add(int((g + 1) % G))
    return np.array(sorted(out), dtype=int)


def _clusters(indices: np.ndarray, G: int) -> list[np.ndarray]:
    """Split sorted grid indices into runs of neighbours on the circle."""
    if len(indices) == 0:
        return []
    runs, cur = [], [int(indices[0])]
    for g in indices[1:]:
        if g == cur[-1] + 1:
            cur.append(int(g))
        else:
            runs.append(cur)
            cur = [int(g)]
    runs.append(cur)
    if len(runs) > 1 and runs[0][0] == 0 and runs[-1][-1] == G - 1:
        runs[0] = runs.pop() + runs[0]
    return [np.array(r) for r in runs]


def _circular_mean(theta: np.ndarray) -> float:
    return float(np.mod(np.angle(np.mean(np.exp(1j * theta))), 2 * np.pi))


def flagged_points(bands: Bands, band_limit: int, crossing_tol: float = 1e-3) -> dict:
    """Points a cutoff must avoid when keeping bands 0..band_limit-1 (d = 1 grids).

    Returns a dict with 'boundary' (theta = 0), 'crossing' (every grid point
    where a kept band comes within ``crossing_tol`` of its neighbour, so a
    flat near-degenerate stretch is excluded as a whole) and 'hessian' (centres
    of sign changes of omega_l'' on the kept bands).  Each entry has shape (k, 1).
    """
    th = bands.theta_grid
    if th.shape[1] != 1:
        raise ValueError("flagged_points supports d = 1 grids only")
    G = len(th)
    keep = list(range(band_limit))
    out = {"boundary": np.zeros((1, 1))}
    out["crossing"] = th[find_crossings(bands, crossing_tol, keep)].reshape(-1, 1)
    runs = _clusters(hessian_sign_changes(bands, keep), G)
    out["hessian"] = np.array([_circular_mean(th[r, 0]) for r in runs], dtype=float).reshape(-1, 1)
    return out


@dataclass
class ScanRow:
    base: int
    amplitude: tuple
    status: str  # "ok" or "skipped"
    r2_prime_margin: float
    e1_pass: bool | None = None
    e2_pass: bool | None = None
    e2_min_variance: float | None = None
    note: str = ""


def _scale_terms(coupling: CouplingSpec, amplitude) -> CouplingSpec:
    amp = np.atleast_1d(np.asarray(amplitude, dtype=float))
    if coupling.family == "zero":
        return coupling
    if amp.size == 1:
        return coupling.scaled(float(amp[0]))
    if amp.size != len(coupling.terms):
        raise ValueError("amplitude vector length must equal the number of coupling terms")
    terms = [(tuple(c * a for a in t.amplitude), t.sigma, t.center) for c, t in zip(amp, coupling.terms)]
    return CouplingSpec(coupling.family, tuple(CouplingSpec.sum_of_gaussians(terms).terms))


def scan_coupling(base_models: Sequence[ModelParams], amplitudes, theta_grid, tol: float = 1e-8,
                  bands_subset: Sequence[int] | None = None, e2_tol: float = 1e-14) -> list[ScanRow]:
    """E1/E2 verdicts for R_C = sum_s C_s R_s over a list of amplitude vectors C."""
    rows = []
    for b, base in enumerate(base_models):
        for amp in amplitudes:
            model = base.replace(coupling=_scale_terms(base.coupling, amp))
            r2p = check_r2_prime(model)
            key = tuple(np.atleast_1d(np.asarray(amp, dtype=float)).tolist())
            if not r2p.passed:
                rows.append(ScanRow(b, key, "skipped", r2p.margin, note="fails the R2' sufficient condition"))
                continue
            bands = band_structure(model, theta_grid)
            rep = check_e1_e2(bands, tol, bands_subset=bands_subset, e2_tol=e2_tol)
            rows.append(ScanRow(b, key, "ok", r2p.margin, rep.e1_pass, rep.e2_pass, rep.e2_min_variance))
    return rows


def write_bands_csv(bands: Bands, path) -> None:
    d = bands.theta_grid.shape[1]
    header = [f"theta{i}" for i in range(d)] if d > 1 else ["theta"]
    header += ["band_index", "omega"]
    header += [f"velocity{i}" for i in range(d)] if d > 1 else ["velocity"]
    header += ["hessian_det", "gap"]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for g in range(len(bands)):
            for l in range(bands.n_bands):
                row = [f"{x:.17g}" for x in bands.theta_grid[g]]
                row += [str(l), f"{bands.omegas[g, l]:.17g}"]
                row += [f"{x:.17g}" for x in bands.velocities[g, l]]
                row += [f"{bands.hessian_dets[g, l]:.17g}", f"{bands.gaps[g]:.17g}"]
                w.writerow(row)
