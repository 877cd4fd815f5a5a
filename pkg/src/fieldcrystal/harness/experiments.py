"""Experiment drivers.

Each driver takes a validated :class:`ExperimentConfig`, writes its CSV files
into the experiment directory and returns a list of :class:`Assertion`.
Numbers are written with ``%.17g`` and nothing time-dependent is recorded,
so identical configs give byte-identical files.
"""

from __future__ import annotations

import csv
import json
import os
from dataclasses import asdict, dataclass

import numpy as np

from ..bloch_cell import (
    ModelParams,
    SpectralGrid,
    check_r2,
    check_r2_prime,
    lattice_frequency_sq,
    reduce_theta,
    spectral_grid,
    theta_grid,
    uniform_theta_grid,
)
from ..covariance import (
    InitialMeasureSpec,
    evolve_covariance_table,
    initial_covariance_table,
    limit_covariance_table,
    quadratic_form,
    trace_diagnostic_table,
)
from ..dispersion import (
    band_structure,
    check_e1_e2,
    flagged_points,
    max_group_speed,
    scan_coupling,
    write_bands_csv,
)
from ..ensemble import (
    EnsembleConfig,
    char_functional_table,
    make_sampler,
    mixing_correlation,
    moment_stats,
    observe,
    rademacher_kurtosis,
)
from ..errors import ConfigError
from ..propagator import (
    TestFunction,
    adjoint_evolve,
    decay_profile,
    fit_decay_exponent,
    smooth_window,
    test_function_zak,
)
from .config import ExperimentConfig, check_wraparound_for


@dataclass
class Assertion:
    name: str
    anchor: str
    measured: float
    threshold: float
    relation: str  # "<", ">" or "<="
    passed: bool


def _check(name, anchor, measured, threshold, relation) -> Assertion:
    m = float(measured)
    if relation == "<":
        ok = m < threshold
    elif relation == "<=":
        ok = m <= threshold
    elif relation == ">":
        ok = m > threshold
    else:
        raise ValueError(relation)
    return Assertion(name, anchor, m, float(threshold), relation, bool(ok))


def _fmt(x) -> str:
    if isinstance(x, (bool, np.bool_)):
        return "1" if x else "0"
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    if isinstance(x, (float, np.floating)):
        return f"{float(x):.17g}"
    return str(x)


def write_csv(path, header, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for r in rows:
            w.writerow([_fmt(x) for x in r])


# --- shared builders ---------------------------------------------------------------

class Context:
    """Lazily computed grid-level objects shared by one run."""

    def __init__(self, cfg: ExperimentConfig):
        self.cfg = cfg
        self.model = cfg.model
        self._bands = None

    @property
    def grid(self) -> SpectralGrid:
        return spectral_grid(self.model)

    @property
    def thetas(self) -> np.ndarray:
        return theta_grid(self.model.N, self.model.d)

    def bands(self):
        if self._bands is None:
            self._bands = band_structure(self.model, self.thetas, with_hessian=True)
        return self._bands

    def gamma(self) -> float:
        return max_group_speed(self.bands()).gamma

    def measure(self, name: str) -> InitialMeasureSpec:
        return self.cfg.measures[name]

    def window(self, name: str, band_limit: int) -> np.ndarray:
        w = self.cfg.windows[name]
        if self.model.d != 1:
            raise ConfigError([f"window.{name}: cutoff windows need d = 1"])
        flags = flagged_points(self.bands(), band_limit, w.crossing_tol)
        pts, deltas, widths = [], [], []
        for kind in w.flags:
            p = flags[kind]
            pts.append(p)
            deltas += [w.delta[kind]] * len(p)
            widths += [w.width[kind]] * len(p)
        pts = np.vstack(pts) if pts else np.zeros((0, 1))
        if len(pts) == 0:
            return np.ones(len(self.thetas))
        return smooth_window(self.thetas, pts, np.array(deltas), np.array(widths), w.steepness)

    def test_function(self, name: str) -> TestFunction:
        t = self.cfg.testfns[name]
        cutoff = None
        if t.window is not None:
            bl = t.band_limit if t.band_limit is not None else self.model.cell_dim
            cutoff = self.window(t.window, bl)
        return TestFunction(packets=t.packets, lattice=t.lattice, band_limit=t.band_limit,
                            cutoff=cutoff, center=t.center)


# --- experiments ---------------------------------------------------------------------

def closed_form_bands(model: ModelParams, thetas: np.ndarray) -> np.ndarray:
    """Sorted decoupled frequencies: lattice omega_*(theta) and sqrt(|2 pi k + theta|^2 + m0^2)."""
    th = reduce_theta(thetas)
    field = np.sqrt(np.sum((2 * np.pi * model.mode_indices() + th[:, None, :]) ** 2, axis=-1) + model.m0**2)
    lat = np.repeat(np.sqrt(lattice_frequency_sq(model, thetas))[:, None], model.n, axis=1)
    return np.sort(np.concatenate([field, lat], axis=1), axis=1)


def run_bands(ctx: Context, outdir: str) -> list[Assertion]:
    p = ctx.cfg.section("bands")
    model = ctx.model
    th = uniform_theta_grid(p["grid"], model.d)
    b = band_structure(model, th, with_hessian=p["hessian"])
    write_bands_csv(b, os.path.join(outdir, "data_bands.csv"))
    out = []
    if model.coupling.family == "zero":
        ref = closed_form_bands(model, th)
        err = float(np.max(np.abs(b.omegas - ref) / ref))
        out.append(_check("closed_form_relative_error", "decoupled dispersion", err, p["closed_form_tol"], "<="))
    gs = max_group_speed(b)
    write_csv(os.path.join(outdir, "data_group_speed.csv"), ["gamma", "gamma_safe"], [(gs.gamma, gs.gamma_safe)])
    if p["hessian"]:
        rep = check_e1_e2(b, p["e1_tol"], p["e1_fraction"], e2_tol=p["e2_tol"])
        write_csv(os.path.join(outdir, "data_e1.csv"), ["band_index", "small_hessian_fraction"],
                  list(enumerate(rep.e1_fractions)))
        out.append(_check("e1_worst_small_hessian_fraction", "nondegenerate Hessian",
                          float(np.max(rep.e1_fractions)), p["e1_fraction"], "<"))
        out.append(_check("e2_min_variance", "non-constant band sums and differences",
                          rep.e2_min_variance, p["e2_tol"], ">"))
    return out


def run_conditions(ctx: Context, outdir: str) -> list[Assertion]:
    p = ctx.cfg.section("conditions")
    model = ctx.model
    r2p = check_r2_prime(model, p["r2_prime_points"])
    r2 = check_r2(model, uniform_theta_grid(p["grid"], model.d))
    write_csv(os.path.join(outdir, "data_conditions.csv"), ["quantity", "value"],
              [("r2_prime_lhs", r2p.lhs), ("r2_prime_rhs", r2p.rhs), ("r2_prime_margin", r2p.margin),
               ("r2_min_eigenvalue", r2.min_eigenvalue)]
              + [(f"r2_worst_theta{i}", v) for i, v in enumerate(r2.worst_theta)])
    return [_check("r2_prime_margin", "coupling smallness", r2p.margin, 0.0, ">"),
            _check("r2_min_eigenvalue", "positive cell operator", r2.min_eigenvalue, 0.0, ">")]


def run_converge(ctx: Context, outdir: str) -> list[Assertion]:
    p = ctx.cfg.section("converge")
    g = ctx.grid
    q0 = initial_covariance_table(ctx.measure(p["measure"]), ctx.model, grid=g)
    qinf = limit_covariance_table(q0, g)
    zf = test_function_zak(ctx.test_function(p["testfn"]), ctx.model, g)
    q_inf = quadratic_form(qinf, zf)
    rows = []
    for t in p["times"]:
        qt = quadratic_form(evolve_covariance_table(q0, g, t), zf)
        rows.append((t, qt, q_inf, abs(qt - q_inf) / q_inf))
    write_csv(os.path.join(outdir, "data_converge.csv"), ["t", "Q_t", "Q_inf", "relative_error"], rows)
    t_end = max(p["times"])
    rel_end = [r[3] for r in rows if r[0] == t_end][0]
    early = [r[3] for r in rows if r[0] <= p["early_until"]]
    late = [r[3] for r in rows if r[0] >= t_end / 4]
    ratio = max(late) / max(early) if early and max(early) > 0 else np.inf
    return [_check("relative_error_at_final_time", "deterministic covariance convergence",
                   rel_end, p["rel_tol"], "<"),
            _check("late_to_early_envelope_ratio", "decaying oscillation envelope",
                   ratio, p["envelope_ratio"], "<")]


def run_decay(ctx: Context, outdir: str) -> list[Assertion]:
    p = ctx.cfg.section("decay")
    g = ctx.grid
    gamma = ctx.gamma()
    z = ctx.test_function(p["testfn"])
    rows = decay_profile(z, ctx.model, p["times"], gamma, v_factor=p["v_factor"], grid=g)
    rows = sorted(rows, key=lambda r: r.t)
    write_csv(os.path.join(outdir, "data_decay.csv"), ["t", "sup_all", "sup_inside", "sup_outside"],
              [(r.t, r.sup_all, r.sup_in, r.sup_out) for r in rows])
    slope = fit_decay_exponent(rows, p["fit_min"], p["fit_max"])
    at = [r for r in rows if np.isclose(r.t, p["outside_time"])]
    if not at:
        raise ConfigError([f"decay: 'outside_time' {p['outside_time']} is not among the times"])
    ratio = at[0].sup_out / at[0].sup_all
    return [_check("decay_exponent_deviation", "stationary-phase decay",
                   abs(slope - p["slope"]), p["slope_tol"], "<="),
            _check("outside_cone_ratio", "light-cone localisation", ratio, p["outside_tol"], "<")]


def run_gaussianity(ctx: Context, outdir: str) -> list[Assertion]:
    p = ctx.cfg.section("gaussianity")
    cfg, g, model = ctx.cfg, ctx.grid, ctx.model
    spec = ctx.measure(p["measure"])
    z = ctx.test_function(p["testfn"])
    zf = test_function_zak(z, model, g)
    q0 = initial_covariance_table(spec, model, grid=g)
    q_inf = quadratic_form(limit_covariance_table(q0, g), zf)
    ens = EnsembleConfig(p["samples"], cfg.seed, spec, batch_size=p["batch"], threads=cfg.threads)
    sampler = make_sampler(spec, model, g)
    times = [0.0, p["t_final"]]
    x = observe(ens, model, times, z, g, sampler, gamma=ctx.gamma())
    stats = [moment_stats(x[:, k], t) for k, t in enumerate(times)]
    exact = [np.nan, np.nan]
    if spec.kind == "moving_average" and spec.noise_law == "rademacher":
        exact = [rademacher_kurtosis(sampler.weights(adjoint_evolve(zf, model, t, g))) for t in times]
    write_csv(os.path.join(outdir, "data_moments.csv"),
              ["t", "skewness", "skew_stderr", "excess_kurtosis", "kurt_stderr", "exact_kurtosis"],
              [(s.t, s.skewness, s.skew_stderr, s.excess_kurtosis, s.kurt_stderr, e) for s, e in zip(stats, exact)])
    s_grid = np.linspace(p["s_min"], p["s_max"], p["s_points"]) / np.sqrt(q_inf)
    char = char_functional_table(x[:, 1], s_grid, q_inf)
    write_csv(os.path.join(outdir, "data_charfn.csv"),
              ["s", "re", "im", "re_stderr", "im_stderr", "gaussian_reference", "deviation_sigmas"],
              [(r.s, r.re, r.im, r.re_stderr, r.im_stderr, r.reference, r.deviation_sigmas) for r in char])
    return [_check("abs_kurtosis_initial", "non-Gaussian initial data",
                   abs(stats[0].excess_kurtosis), p["kurtosis_initial_min"], ">"),
            _check("abs_kurtosis_final", "Gaussianization", abs(stats[1].excess_kurtosis),
                   p["kurtosis_final_max"], "<"),
            _check("char_functional_max_deviation_sigmas", "Gaussian limit characteristic functional",
                   max(r.deviation_sigmas for r in char), p["char_sigmas"], "<=")]


def run_mixing(ctx: Context, outdir: str) -> list[Assertion]:
    p = ctx.cfg.section("mixing")
    cfg, g, model = ctx.cfg, ctx.grid, ctx.model
    q0 = initial_covariance_table(ctx.measure(p["measure"]), model, grid=g)
    qinf = limit_covariance_table(q0, g)
    z, z1 = ctx.test_function(p["testfn"]), ctx.test_function(p["testfn1"])
    q_zz = quadratic_form(qinf, test_function_zak(z, model, g))
    rows = mixing_correlation(model, qinf, z, z1, p["times"], p["samples"], cfg.seed, g,
                              p["batch"], cfg.threads)
    write_csv(os.path.join(outdir, "data_mixing.csv"), ["t", "exact", "monte_carlo", "mc_stderr", "Q_inf"],
              [(r.t, r.exact, r.mc, r.mc_stderr, q_zz) for r in rows])
    late = [abs(r.exact) / q_zz for r in rows if r.t >= p["decay_time"]]
    if not late:
        raise ConfigError([f"mixing: no time >= 'decay_time' {p['decay_time']}"])
    dev = max(abs(r.mc - r.exact) / r.mc_stderr if r.mc_stderr > 0 else 0.0 for r in rows)
    return [_check("late_correlation_ratio", "mixing of the limit measure", max(late), p["ratio_max"], "<"),
            _check("monte_carlo_max_deviation_sigmas", "Monte-Carlo agreement", dev, p["mc_sigmas"], "<=")]


def run_invariance(ctx: Context, outdir: str) -> list[Assertion]:
    p = ctx.cfg.section("invariance")
    model = ctx.model
    th = uniform_theta_grid(p["grid"], model.d)
    g = SpectralGrid(model, th)
    gibbs = initial_covariance_table(InitialMeasureSpec.gibbs(p["temperature"]), model, th, grid=g)
    q0 = initial_covariance_table(ctx.measure(p["measure"]), model, th, grid=g)
    scale = np.max(np.abs(gibbs))
    lim_err = float(np.max(np.abs(limit_covariance_table(gibbs, g) - gibbs)) / scale)
    tr_g0 = trace_diagnostic_table(gibbs, g)
    tr_q0 = trace_diagnostic_table(q0, g)
    rows = []
    for t in p["times"]:
        ev = evolve_covariance_table(gibbs, g, t)
        e_err = float(np.max(np.abs(ev - gibbs)) / scale)
        tg = float(np.max(np.abs(trace_diagnostic_table(ev, g) - tr_g0) / tr_g0))
        tq = float(np.max(np.abs(trace_diagnostic_table(evolve_covariance_table(q0, g, t), g) - tr_q0) / tr_q0))
        rows.append((t, e_err, tg, tq))
    write_csv(os.path.join(outdir, "data_invariance.csv"),
              ["t", "gibbs_evolution_error", "gibbs_trace_drift", "measure_trace_drift"], rows)
    tol = p["tol"]
    return [_check("gibbs_evolution_error", "Gibbs fixed point under evolution", max(r[1] for r in rows), tol, "<="),
            _check("gibbs_limit_error", "Gibbs fixed point of the limit map", lim_err, tol, "<="),
            _check("trace_drift", "conserved energy trace",
                   max(max(r[2], r[3]) for r in rows), tol, "<=")]


def run_coupling_scan(ctx: Context, outdir: str) -> list[Assertion]:
    p = ctx.cfg.section("coupling-scan")
    model = ctx.model
    if model.coupling.family == "zero":
        raise ConfigError(["coupling-scan: the model coupling is zero; nothing to scale"])
    th = uniform_theta_grid(p["grid"], model.d)
    rows = scan_coupling([model], p["amplitudes"], th, p["e1_tol"], e2_tol=p["e2_tol"])
    write_csv(os.path.join(outdir, "data_scan.csv"),
              ["amplitude", "status", "r2_prime_margin", "e1_pass", "e2_pass", "e2_min_variance"],
              [(r.amplitude[0] if len(r.amplitude) == 1 else " ".join(map(_fmt, r.amplitude)), r.status,
                r.r2_prime_margin, "" if r.e1_pass is None else r.e1_pass,
                "" if r.e2_pass is None else r.e2_pass,
                "" if r.e2_min_variance is None else r.e2_min_variance) for r in rows])
    ok = [r for r in rows if r.status == "ok"]
    failing = sum(1 for r in ok if not (r.e1_pass and r.e2_pass))
    return [_check("admissible_amplitudes", "scan covers admissible couplings", len(ok), 0, ">"),
            _check("admissible_amplitudes_failing_e1_e2", "generic band conditions", failing, 0, "<=")]


DRIVERS = {
    "bands": run_bands,
    "conditions": run_conditions,
    "converge": run_converge,
    "decay": run_decay,
    "gaussianity": run_gaussianity,
    "mixing": run_mixing,
    "invariance": run_invariance,
    "coupling-scan": run_coupling_scan,
}


def run_experiment(cfg: ExperimentConfig, experiment: str | None = None, out: str | None = None) -> dict:
    """Run one experiment, write ``<out>/<experiment>/`` and return the summary dict."""
    name = experiment or cfg.experiment
    if name not in DRIVERS:
        raise ConfigError([f"unknown experiment {name!r}"])
    check_wraparound_for(cfg, name)
    outdir = os.path.join(out or cfg.out, name)
    os.makedirs(outdir, exist_ok=True)
    ctx = Context(cfg)
    assertions = DRIVERS[name](ctx, outdir)
    summary = {
        "experiment": name,
        "seed": cfg.seed,
        "passed": all(a.passed for a in assertions),
        "assertions": [asdict(a) for a in assertions],
    }
    with open(os.path.join(outdir, "summary.json"), "w") as fh:
        json.dump(summary, fh, indent=2, sort_keys=True, default=float)
        fh.write("\n")
    return summary
