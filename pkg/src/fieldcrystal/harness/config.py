"""INI configuration for the experiment harness.

Layout (all times dimensionless, theta in radians, lists space separated)::

    [run]            seed, threads, out
    [model]          d, n, m0, nu0, K, N, coupling, amplitude, sigma, center, terms
    [measure.NAME]   kind, temperature, noise_law, shared_noise, field_kernels, lattice_kernels
    [window.NAME]    crossing_tol, flags, steepness, delta, width
    [testfn.NAME]    lattice, packets, band_limit, window, center
    [bands] [conditions] [converge] [decay] [gaussianity] [mixing]
    [invariance] [coupling-scan]

Entries inside list-valued keys are separated by ``;`` and their fields by
``/``; vector fields use spaces.  Thresholds carry defaults equal to the
frozen pilot values, so a config only needs to mention what it changes.
"""

from __future__ import annotations

import configparser
from dataclasses import dataclass, field
from typing import Any

import numpy as np

from ..bloch_cell import CouplingSpec, ModelParams
from ..covariance import FieldKernel, InitialMeasureSpec, LatticeKernel
from ..errors import ConfigError, WraparoundRisk
from ..propagator import GaussianPacket, LatticeEntry

EXPERIMENTS = ("bands", "conditions", "converge", "decay", "gaussianity", "mixing",
               "invariance", "coupling-scan")
WINDOW_KINDS = ("boundary", "crossing", "hessian")
WRAP_FACTOR = 1.5

_REQUIRED_MODEL = ("d", "n", "m0", "nu0", "K", "N")

# section -> key -> (parser name, shipped default)
_SCHEMA: dict[str, dict[str, tuple[str, Any]]] = {
    "run": {"seed": ("int", 0), "threads": ("int", 1), "out": ("str", "results")},
    "bands": {"grid": ("int", 256), "e1_tol": ("float", 1e-8), "e1_fraction": ("float", 0.05),
              "e2_tol": ("float", 1e-14), "closed_form_tol": ("float", 1e-12),
              "hessian": ("bool", True)},
    "conditions": {"grid": ("int", 256), "r2_prime_points": ("int", 256)},
    "converge": {"measure": ("str", "ma"), "testfn": ("str", "converge"),
                 "times": ("floats", [1, 2, 5, 10, 20, 50, 100, 200]),
                 "rel_tol": ("float", 0.02), "envelope_ratio": ("float", 0.1),
                 "early_until": ("float", 10.0)},
    "decay": {"testfn": ("str", "decay"),
              "times": ("floats", list(np.geomspace(20.0, 200.0, 13)) + [100.0]),
              "fit_min": ("float", 20.0), "fit_max": ("float", 200.0),
              "v_factor": ("float", 1.3), "slope": ("float", -0.5), "slope_tol": ("float", 0.1),
              "outside_time": ("float", 100.0), "outside_tol": ("float", 1e-6)},
    "gaussianity": {"measure": ("str", "lattice"), "testfn": ("str", "gauss"),
                    "samples": ("int", 10000), "t_final": ("float", 200.0),
                    "kurtosis_initial_min": ("float", 0.5), "kurtosis_final_max": ("float", 0.1),
                    "s_points": ("int", 11), "s_min": ("float", 0.25), "s_max": ("float", 2.75),
                    "char_sigmas": ("float", 3.0), "batch": ("int", 256)},
    "mixing": {"measure": ("str", "ma"), "testfn": ("str", "converge"), "testfn1": ("str", "converge"),
               "samples": ("int", 2000), "times": ("floats", [0, 1, 2, 5, 10, 20, 50, 100]),
               "decay_time": ("float", 100.0), "ratio_max": ("float", 0.05),
               "mc_sigmas": ("float", 3.0), "batch": ("int", 256)},
    "invariance": {"temperature": ("float", 1.0), "measure": ("str", "ma"),
                   "times": ("floats", [0, 0.1, 1, 10, 100]), "tol": ("float", 1e-10),
                   "grid": ("int", 256)},
    "coupling-scan": {"amplitudes": ("floats", [0.0, 0.05, 0.1, 0.2, 0.5, 1.0, 2.0, 5.0, 10.0]),
                      "grid": ("int", 256), "e1_tol": ("float", 1e-8), "e2_tol": ("float", 1e-14)},
}

_WINDOW_DEFAULTS = {"crossing_tol": 0.05, "steepness": 4.0}


@dataclass
class WindowSpec:
    name: str
    crossing_tol: float
    flags: tuple
    steepness: float
    delta: dict
    width: dict


@dataclass
class TestFunctionSpec:
    __test__ = False  # not a pytest class

    name: str
    lattice: tuple = ()
    packets: tuple = ()
    band_limit: int | None = None
    window: str | None = None
    center: tuple | None = None


@dataclass
class ExperimentConfig:
    model: ModelParams
    seed: int = 0
    threads: int = 1
    out: str = "results"
    experiment: str | None = None
    measures: dict = field(default_factory=dict)
    windows: dict = field(default_factory=dict)
    testfns: dict = field(default_factory=dict)
    params: dict = field(default_factory=dict)
    source: str = ""

    def section(self, name: str) -> dict:
        return self.params[name]


# --- value parsers ---------------------------------------------------------------

def _bool(text: str) -> bool:
    low = text.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _floats(text: str) -> list[float]:
    vals = [float(x) for x in text.replace(",", " ").split()]
    if not vals:
        raise ValueError("empty list")
    return vals


_PARSERS = {"int": int, "float": float, "str": str.strip, "bool": _bool, "floats": _floats}


def _vector(text: str) -> tuple:
    return tuple(float(x) for x in text.split())


def _entries(text: str) -> list[list[str]]:
    return [[f.strip() for f in e.split("/")] for e in text.split(";") if e.strip()]


def _kinds_map(text: str, what: str) -> dict:
    """'boundary:0.05 crossing:0.05 hessian:0.4' or a single number for every kind."""
    text = text.strip()
    try:
        v = float(text)
        return {k: v for k in WINDOW_KINDS}
    except ValueError:
        pass
    out = {}
    for item in text.split():
        k, _, v = item.partition(":")
        if k not in WINDOW_KINDS:
            raise ValueError(f"unknown flag kind {k!r} in {what}")
        out[k] = float(v)
    return out


# --- sections ----------------------------------------------------------------------

def _parse_model(sec, errors: list) -> ModelParams | None:
    if sec is None:
        errors.append("missing section [model]")
        return None
    vals = {}
    for key in _REQUIRED_MODEL:
        if key not in sec:
            errors.append(f"model: missing required key '{key}'")
            continue
        try:
            vals[key] = (int if key in ("d", "n", "K", "N") else float)(sec[key])
        except ValueError:
            errors.append(f"model: '{key}' is not a number ({sec[key]!r})")
    if "N" in vals and (vals["N"] < 2 or vals["N"] % 2):
        errors.append(f"model: 'N' must be even and >= 2, got {vals['N']}")
    if "d" in vals and vals["d"] not in (1, 2):
        errors.append(f"model: 'd' must be 1 or 2, got {vals['d']}")
    if "n" in vals and vals["n"] < 1:
        errors.append(f"model: 'n' must be >= 1, got {vals['n']}")
    for key in ("m0", "nu0"):
        if key in vals and not vals[key] > 0:
            errors.append(f"model: '{key}' must be > 0, got {vals[key]}")
    if "K" in vals and vals["K"] < 0:
        errors.append(f"model: 'K' must be >= 0, got {vals['K']}")
    allowed = set(_REQUIRED_MODEL) | {"coupling", "amplitude", "sigma", "center", "terms"}
    for key in sec:
        if key not in allowed:
            errors.append(f"model: unknown key '{key}'")
    family = sec.get("coupling", "zero").strip()
    coupling = None
    try:
        if family == "zero":
            coupling = CouplingSpec.zero()
        elif family == "gaussian":
            missing = [k for k in ("amplitude", "sigma") if k not in sec]
            for k in missing:
                errors.append(f"model: gaussian coupling needs '{k}'")
            if not missing:
                coupling = CouplingSpec.gaussian(_vector(sec["amplitude"]), float(sec["sigma"]),
                                                 _vector(sec.get("center", "0")))
        elif family == "sum-of-gaussians":
            terms = [(_vector(a), float(s), _vector(c)) for a, s, c in _entries(sec.get("terms", ""))]
            coupling = CouplingSpec.sum_of_gaussians(terms)
        else:
            errors.append(f"model: unknown coupling family {family!r}")
    except ValueError as exc:
        errors.append(f"model: coupling: {exc}")
    if coupling is None or len(vals) < len(_REQUIRED_MODEL) or any(e.startswith("model:") for e in errors):
        return None
    try:
        return ModelParams(coupling=coupling, **vals)
    except ValueError as exc:
        errors.append(f"model: {exc}")
        return None


def _parse_measure(name: str, sec, errors: list) -> dict | None:
    """Raw measure description; lattice taps become matrices once n is known."""
    where = f"measure.{name}"
    try:
        kind = sec.get("kind", "moving_average").strip()
        if kind == "gibbs":
            t = float(sec.get("temperature", "1"))
            if not t > 0:
                errors.append(f"{where}: 'temperature' must be > 0")
                return None
            return {"kind": "gibbs", "temperature": t}
        if kind != "moving_average":
            errors.append(f"{where}: 'kind' must be gibbs or moving_average, got {kind!r}")
            return None
        fk = []
        for e in _entries(sec.get("field_kernels", "")):
            center = _vector(e[3]) if len(e) > 3 else None
            fk.append(FieldKernel(float(e[0]), float(e[1]), center, int(e[2])))
        taps: dict[int, dict] = {}
        for e in _entries(sec.get("lattice_kernels", "")):
            off = tuple(int(x) for x in e[0].split())
            taps.setdefault(int(e[2]), {})[off] = float(e[1])
        law = sec.get("noise_law", "gaussian").strip()
        InitialMeasureSpec.moving_average(noise_law=law)  # validates the law
        return {"kind": "moving_average", "field_kernels": fk, "taps": taps, "noise_law": law,
                "shared_noise": _bool(sec.get("shared_noise", "false"))}
    except (ValueError, IndexError) as exc:
        errors.append(f"{where}: {exc}")
        return None


def _build_measure(raw: dict, model: ModelParams) -> InitialMeasureSpec:
    """Lattice taps are scalar multiples of the n x n identity."""
    if raw["kind"] == "gibbs":
        return InitialMeasureSpec.gibbs(raw["temperature"])
    lk = [LatticeKernel.from_dict({off: v * np.eye(model.n) for off, v in taps.items()}, comp)
          for comp, taps in sorted(raw["taps"].items())]
    return InitialMeasureSpec.moving_average(raw["field_kernels"], lk, raw["noise_law"], raw["shared_noise"])


def _parse_window(name: str, sec, errors: list) -> WindowSpec | None:
    where = f"window.{name}"
    try:
        flags = tuple(sec.get("flags", "boundary crossing").split())
        bad = [f for f in flags if f not in WINDOW_KINDS]
        if bad:
            errors.append(f"{where}: 'flags' has unknown kinds {bad}")
            return None
        delta = _kinds_map(sec.get("delta", "0.05"), where)
        width = _kinds_map(sec.get("width", "0.1"), where)
        for f in flags:
            if f not in delta or f not in width:
                errors.append(f"{where}: 'delta' and 'width' need a value for {f!r}")
                return None
            if not width[f] > 0 or delta[f] < 0:
                errors.append(f"{where}: need width > 0 and delta >= 0 for {f!r}")
                return None
        return WindowSpec(name, float(sec.get("crossing_tol", _WINDOW_DEFAULTS["crossing_tol"])), flags,
                          float(sec.get("steepness", _WINDOW_DEFAULTS["steepness"])), delta, width)
    except ValueError as exc:
        errors.append(f"{where}: {exc}")
        return None


def _parse_testfn(name: str, sec, errors: list, d: int | None, n: int | None) -> TestFunctionSpec | None:
    where = f"testfn.{name}"
    try:
        lat = []
        for e in _entries(sec.get("lattice", "")):
            cell = tuple(int(x) for x in e[0].split())
            vec = _vector(e[1])
            comp = int(e[2]) if len(e) > 2 else 0
            if d is not None and len(cell) != d:
                errors.append(f"{where}: lattice cell {cell} does not have d={d} entries")
            if n is not None and len(vec) != n:
                errors.append(f"{where}: lattice vector {vec} does not have n={n} entries")
            lat.append(LatticeEntry(cell, vec, comp))
        pk = []
        for e in _entries(sec.get("packets", "")):
            amp, center, width = float(e[0]), _vector(e[1]), float(e[2])
            comp = int(e[3]) if len(e) > 3 else 0
            carrier = _vector(e[4]) if len(e) > 4 else None
            if d is not None and len(center) != d:
                errors.append(f"{where}: packet center {center} does not have d={d} entries")
            pk.append(GaussianPacket(amp, center, width, carrier, comp))
        if not lat and not pk:
            errors.append(f"{where}: needs 'lattice' or 'packets'")
        bl = sec.get("band_limit")
        win = sec.get("window")
        center = _vector(sec["center"]) if "center" in sec else None
        return TestFunctionSpec(name, tuple(lat), tuple(pk), int(bl) if bl else None,
                                win.strip() if win else None, center)
    except (ValueError, IndexError) as exc:
        errors.append(f"{where}: {exc}")
        return None


def _parse_params(cp: configparser.ConfigParser, errors: list) -> dict:
    params = {}
    for sec_name, schema in _SCHEMA.items():
        sec = cp[sec_name] if cp.has_section(sec_name) else {}
        vals = {}
        for key, (kind, default) in schema.items():
            if key in sec:
                try:
                    vals[key] = _PARSERS[kind](sec[key])
                except ValueError:
                    errors.append(f"{sec_name}: '{key}' is not a valid {kind} ({sec[key]!r})")
            else:
                vals[key] = default
        for key in sec:
            if key not in schema:
                errors.append(f"{sec_name}: unknown key '{key}'")
        params[sec_name] = vals
    return params


def _times_max(cfg: ExperimentConfig, experiment: str) -> float:
    p = cfg.params
    if experiment == "converge":
        return max(p["converge"]["times"])
    if experiment == "decay":
        return max(p["decay"]["times"])
    if experiment == "gaussianity":
        return p["gaussianity"]["t_final"]
    if experiment == "mixing":
        return max(p["mixing"]["times"])
    return 0.0


def estimated_gamma(model: ModelParams, points: int = 512) -> float:
    """Maximal group speed on a coarse theta grid (used for the wraparound guard)."""
    from ..bloch_cell import uniform_theta_grid
    from ..dispersion import band_structure, max_group_speed

    if model.d == 1:
        th = uniform_theta_grid(points, 1)
    else:
        th = uniform_theta_grid(int(np.sqrt(points)) + 1, model.d)
    return max_group_speed(band_structure(model, th, with_hessian=False)).gamma


def check_wraparound_for(cfg: ExperimentConfig, experiment: str, gamma: float | None = None) -> float:
    """Raise WraparoundRisk unless N/2 > 1.5 gamma T_max; returns gamma."""
    t_max = _times_max(cfg, experiment)
    if t_max <= 0:
        return 0.0 if gamma is None else gamma
    g = estimated_gamma(cfg.model) if gamma is None else gamma
    if not cfg.model.N / 2 > WRAP_FACTOR * g * t_max:
        raise WraparoundRisk(cfg.model.N, g, t_max, WRAP_FACTOR)
    return g


def validate_config(text: str, experiment: str | None = None, check_wrap: bool = True) -> ExperimentConfig:
    """Parse and validate a config; every problem is reported in one ConfigError.

    With ``experiment`` given (or ``[run] experiment`` set), references used by
    that experiment are resolved and the wraparound guard is checked.
    """
    cp = configparser.ConfigParser(inline_comment_prefixes=("#",), interpolation=None)
    cp.optionxform = str
    try:
        cp.read_string(text)
    except configparser.Error as exc:
        raise ConfigError([f"syntax: {exc}"]) from None
    errors: list[str] = []
    known = set(_SCHEMA) | {"model"}
    for sec in cp.sections():
        head = sec.split(".", 1)[0]
        if sec not in known and head not in ("measure", "window", "testfn"):
            errors.append(f"unknown section [{sec}]")
    run_sec = cp["run"] if cp.has_section("run") else {}
    if experiment is None and "experiment" in run_sec:
        experiment = run_sec["experiment"].strip()
    if experiment is not None and experiment not in EXPERIMENTS:
        errors.append(f"run: 'experiment' must be one of {', '.join(EXPERIMENTS)}, got {experiment!r}")
    model = _parse_model(cp["model"] if cp.has_section("model") else None, errors)
    d = model.d if model else None
    n = model.n if model else None
    if cp.has_section("run") and "experiment" in cp["run"]:
        cp.remove_option("run", "experiment")
    params = _parse_params(cp, errors)
    measures, windows, testfns = {}, {}, {}
    for sec in cp.sections():
        kind, _, name = sec.partition(".")
        if kind == "measure":
            measures[name] = _parse_measure(name, cp[sec], errors)
        elif kind == "window":
            windows[name] = _parse_window(name, cp[sec], errors)
        elif kind == "testfn":
            testfns[name] = _parse_testfn(name, cp[sec], errors, d, n)
    for name, t in testfns.items():
        if t is not None and t.window is not None and t.window not in windows:
            errors.append(f"testfn.{name}: 'window' refers to missing [window.{t.window}]")
    run = params["run"]
    if run["threads"] < 1:
        errors.append("run: 'threads' must be >= 1")
    if experiment is not None:
        sec = params.get(experiment, {})
        for key in ("measure",):
            if key in sec and sec[key] not in measures:
                errors.append(f"{experiment}: '{key}' refers to missing [measure.{sec[key]}]")
        for key in ("testfn", "testfn1"):
            if key in sec and sec[key] not in testfns:
                errors.append(f"{experiment}: '{key}' refers to missing [testfn.{sec[key]}]")
        if experiment in ("gaussianity", "mixing") and params[experiment]["samples"] < 2:
            errors.append(f"{experiment}: 'samples' must be >= 2")
    if errors:
        raise ConfigError(errors)
    measures = {k: _build_measure(v, model) for k, v in measures.items()}
    cfg = ExperimentConfig(model=model, seed=run["seed"], threads=run["threads"], out=run["out"],
                           experiment=experiment, measures=measures, windows=windows,
                           testfns=testfns, params=params, source=text)
    if experiment is not None and check_wrap:
        check_wraparound_for(cfg, experiment)
    return cfg


def load_config(path, experiment: str | None = None, check_wrap: bool = True) -> ExperimentConfig:
    with open(path, encoding="utf-8") as fh:
        return validate_config(fh.read(), experiment, check_wrap)
