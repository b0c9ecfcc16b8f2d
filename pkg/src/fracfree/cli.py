"""Experiment orchestration: named pipelines, JSON configs, CSV reports.

Usage: fracfree <experiment> --config <path> [--outdir DIR] [--threads N]
                             [--seed N] [--cache-dir DIR]

Each run creates <outdir>/<experiment>-<timestamp>/ containing config.json
(the fully defaulted echo), schema.json, summary.json and the experiment's
CSV profiles. Exit codes: 0 success, 2 invalid config, 3 solver did not
converge, 4 internal assertion failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import math
import os
import sys
import time
from dataclasses import dataclass, replace

import numpy as np
from scipy.integrate import quad

from . import numerics
from .energy import frac_perimeter, gagliardo_energy, total_energy
from .errors import (
    ConfigError,
    FracfreeError,
    FreeBoundaryError,
    NonConvergenceError,
)
from .extension import cone_defect, make_half_grid, weiss_profile
from .model import (
    AdmissiblePair,
    ConeF,
    ConstantF,
    DiscreteFunction,
    ExteriorDatum,
    FractionalParams,
    FullSet,
    GridSpec,
    HalfspaceSet,
    InvalidSpecError,
    PhaseSet,
    ball_datum,
    build_grid,
    cone_datum,
    constant_datum,
    halfspace_datum,
    make_pair,
    rescale_pair,
    sample_datum,
    tabulated_datum,
)
from .operators import frac_laplacian
from .quadrature import assemble_table
from .solver import SolverParams, alternate_minimize, brute_force_minimize

EXPERIMENTS = (
    "energy",
    "minimize",
    "oracle",
    "comparison",
    "remark-r",
    "plateau",
    "weiss-scan",
    "blowup",
    "cone2d",
    "dyda",
    "energy-bound",
)

CONFIG_SCHEMA = {
    "experiment": "one of " + ", ".join(EXPERIMENTS),
    "grid": {
        "dimension": 1,
        "half_width": 2.0,
        "cells_per_side": 64,
        "truncation_radius": 128.0,
        "domain_radius": 1.0,
    },
    "fractional": {"s": 0.3, "sigma": 0.5, "c_ratio": 1.0},
    "datum": {
        "kind": "halfspace | ball | constant | cone | tabulated",
        "halfspace": {"normal": [1.0], "offset": 0.0},
        "ball": {"center": [0.0], "radius": 0.5, "inside_sign": 1},
        "constant": {"value": 2.0},
        "cone": {"degree": 0.5, "profile": [1.0, -1.0]},
        "tabulated": {
            "edges": [2.0, 4.0, 8.0],
            "right": [1.0, 1.0],
            "left": [-1.0, -1.0],
            "far_value": 0.0,
            "set": {"kind": "halfspace | full | empty", "normal": [1.0], "offset": 0.0},
        },
    },
    "solver": {
        "max_outer_iters": 30,
        "qp_tolerance": 1e-9,
        "zero_threshold": None,
        "flip_strategy": "exhaustive-on-zero-set",
        "exhaustive_cap": 12,
        "multistart_random": 5,
        "energy_stall_tolerance": 1e-10,
        "qp_max_iters": 5000,
    },
    "extension": {
        "ratio": 1.15,
        "z_first": None,
        "levels": None,
        "top": None,
        "pad_cells": 0,
    },
    "experiment_params": "per-experiment options (see run_experiment)",
    "output_dir": "runs",
    "seed": 0,
    "threads": None,
    "cache_dir": None,
}

_GRID_KEYS = set(CONFIG_SCHEMA["grid"])
_FRACTIONAL_KEYS = set(CONFIG_SCHEMA["fractional"])
_SOLVER_KEYS = set(CONFIG_SCHEMA["solver"]) | {"seed"}
_EXTENSION_KEYS = set(CONFIG_SCHEMA["extension"])
_TOP_KEYS = {
    "experiment", "grid", "fractional", "datum", "solver", "extension",
    "experiment_params", "output_dir", "seed", "threads", "cache_dir",
}


@dataclass
class ExperimentConfig:
    experiment: str
    grid_spec: GridSpec
    fractional: FractionalParams
    datum: ExteriorDatum
    solver: SolverParams
    extension: dict
    experiment_params: dict
    output_dir: str
    seed: int
    threads: int | None
    cache_dir: str | None
    echo: dict


@dataclass
class ExperimentReport:
    config: dict
    run_dir: str
    scalars: dict
    verdicts: dict
    files: list
    timings: dict

    @property
    def passed(self) -> bool:
        return all(self.verdicts.values())


def _reject_unknown(section: dict, allowed: set, path: str) -> None:
    unknown = sorted(set(section) - allowed)
    if unknown:
        raise ConfigError(f"unknown keys under {path}: {', '.join(unknown)}")


def _build_datum(spec: dict, dimension: int) -> ExteriorDatum:
    kind = spec.get("kind")
    try:
        if kind == "halfspace":
            _reject_unknown(spec, {"kind", "normal", "offset"}, "datum")
            return halfspace_datum(spec.get("normal", [1.0] + [0.0] * (dimension - 1)),
                                   spec.get("offset", 0.0))
        if kind == "ball":
            _reject_unknown(spec, {"kind", "center", "radius", "inside_sign"}, "datum")
            return ball_datum(spec.get("center", [0.0] * dimension),
                              spec["radius"], spec.get("inside_sign", 1))
        if kind == "constant":
            _reject_unknown(spec, {"kind", "value"}, "datum")
            return constant_datum(spec["value"])
        if kind == "cone":
            _reject_unknown(spec, {"kind", "degree", "profile"}, "datum")
            return cone_datum(spec["degree"], tuple(spec["profile"]), dimension)
        if kind == "tabulated":
            _reject_unknown(
                spec, {"kind", "edges", "right", "left", "far_value", "set"}, "datum"
            )
            set_spec = spec.get("set", {"kind": "full"})
            skind = set_spec.get("kind", "full")
            if skind == "halfspace":
                sset = HalfspaceSet(tuple(set_spec.get("normal", [1.0])),
                                    set_spec.get("offset", 0.0))
            elif skind == "full":
                sset = FullSet(1)
            elif skind == "empty":
                sset = FullSet(-1)
            else:
                raise ConfigError(f"datum.set.kind: unknown kind {skind!r}")
            return tabulated_datum(spec["edges"], spec["right"], spec["left"],
                                   spec.get("far_value"), sset)
    except KeyError as exc:
        raise ConfigError(f"datum.{exc.args[0]}: required for kind {kind!r}") from exc
    raise ConfigError(
        f"datum.kind: unknown kind {kind!r} "
        "(expected halfspace, ball, constant, cone or tabulated)"
    )


def validate_config(source) -> ExperimentConfig:
    """Parse, range-check and default-fill a config (path, dict or file)."""
    if isinstance(source, dict):
        raw = dict(source)
    else:
        with open(source) as fh:
            raw = json.load(fh)
    _reject_unknown(raw, _TOP_KEYS, "top level")
    experiment = raw.get("experiment")
    if experiment not in EXPERIMENTS:
        raise ConfigError(
            f"experiment: unknown name {experiment!r}; valid names: "
            + ", ".join(EXPERIMENTS)
        )
    grid_in = dict(raw.get("grid", {}))
    _reject_unknown(grid_in, _GRID_KEYS, "grid")
    grid_doc = dict(CONFIG_SCHEMA["grid"])
    grid_doc.update(grid_in)
    frac_in = dict(raw.get("fractional", {}))
    _reject_unknown(frac_in, _FRACTIONAL_KEYS, "fractional")
    frac_doc = dict(CONFIG_SCHEMA["fractional"])
    frac_doc.update(frac_in)
    try:
        grid_spec = GridSpec(**grid_doc)
    except InvalidSpecError as exc:
        raise ConfigError(f"grid: {exc}") from exc
    for key, lo, hi in (("s", 0.0, 1.0), ("sigma", 0.0, 1.0)):
        v = frac_doc[key]
        if not (lo < v < hi):
            raise ConfigError(f"fractional.{key}: {key} must lie in (0,1), got {v}")
    if frac_doc["c_ratio"] <= 0:
        raise ConfigError("fractional.c_ratio: must be positive")
    fractional = FractionalParams(**frac_doc)
    datum_doc = dict(raw.get("datum", {"kind": "halfspace"}))
    datum = _build_datum(datum_doc, grid_spec.dimension)
    solver_in = dict(raw.get("solver", {}))
    _reject_unknown(solver_in, _SOLVER_KEYS, "solver")
    solver_doc = dict(CONFIG_SCHEMA["solver"])
    solver_doc.update(solver_in)
    seed = int(raw.get("seed", CONFIG_SCHEMA["seed"]))
    try:
        solver = SolverParams(seed=seed, **solver_doc)
    except ValueError as exc:
        raise ConfigError(f"solver: {exc}") from exc
    ext_in = dict(raw.get("extension", {}))
    _reject_unknown(ext_in, _EXTENSION_KEYS, "extension")
    ext_doc = dict(CONFIG_SCHEMA["extension"])
    ext_doc.update(ext_in)
    params = dict(raw.get("experiment_params", {}))
    echo = {
        "experiment": experiment,
        "grid": grid_doc,
        "fractional": frac_doc,
        "datum": datum_doc,
        "solver": solver_doc,
        "extension": ext_doc,
        "experiment_params": params,
        "output_dir": raw.get("output_dir", CONFIG_SCHEMA["output_dir"]),
        "seed": seed,
        "cache_dir": raw.get("cache_dir"),
    }
    return ExperimentConfig(
        experiment=experiment,
        grid_spec=grid_spec,
        fractional=fractional,
        datum=datum,
        solver=solver,
        extension=ext_doc,
        experiment_params=params,
        output_dir=echo["output_dir"],
        seed=seed,
        threads=raw.get("threads"),
        cache_dir=raw.get("cache_dir"),
        echo=echo,
    )


# ---------------------------------------------------------------------------
# shared pipeline pieces

def _tables(cfg: ExperimentConfig, grid=None):
    g = build_grid(cfg.grid_spec) if grid is None else grid
    tg = assemble_table(g, 2.0 * cfg.fractional.s, cache_dir=cfg.cache_dir)
    tp = assemble_table(g, cfg.fractional.sigma, cache_dir=cfg.cache_dir)
    return g, tg, tp


def _half_grid(cfg: ExperimentConfig, grid, **overrides):
    opts = dict(cfg.extension)
    opts.update(overrides)
    return make_half_grid(
        grid,
        ratio=opts.get("ratio", 1.15),
        z_first=opts.get("z_first"),
        levels=opts.get("levels"),
        top=opts.get("top"),
        pad_cells=int(opts.get("pad_cells") or 0),
    )


def _minimize(cfg: ExperimentConfig):
    g, tg, tp = _tables(cfg)
    pair0 = make_pair(*sample_datum(cfg.datum, g))
    report = alternate_minimize(pair0, cfg.solver, tg, tp, cfg.fractional)
    return g, tg, tp, report


def _write_csv(path: str, header, rows) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for row in rows:
            writer.writerow([repr(v) if isinstance(v, float) else v for v in row])


def _trace_rows(trace):
    return [
        (k, b.gagliardo, b.perimeter, b.total) for k, b in enumerate(trace)
    ]


# ---------------------------------------------------------------------------
# experiment pipelines (each returns scalars, verdicts, csv files)

def _run_energy(cfg, run_dir):
    g, tg, tp = _tables(cfg)
    pair = make_pair(*sample_datum(cfg.datum, g))
    b = total_energy(pair, cfg.fractional, tg, tp)
    scalars = {
        "gagliardo": b.gagliardo,
        "perimeter": b.perimeter,
        "total": b.total,
        "gagliardo_tail": b.gagliardo_tail,
        "perimeter_tail": b.perimeter_tail,
    }
    verdicts = {
        "breakdown_sums": b.total == b.gagliardo + b.perimeter,
        "nonnegative": b.gagliardo >= 0.0 and b.perimeter >= 0.0,
    }
    path = os.path.join(run_dir, "breakdown.csv")
    _write_csv(path, ["gagliardo", "perimeter", "total"],
               [(b.gagliardo, b.perimeter, b.total)])
    return scalars, verdicts, [path]


def _run_minimize(cfg, run_dir):
    g, tg, tp, report = _minimize(cfg)
    final = report.trace[-1]
    scalars = {
        "gagliardo": final.gagliardo,
        "perimeter": final.perimeter,
        "total": final.total,
        "termination": report.termination,
        "outer_iterations": report.outer_iterations,
        "qp_kkt": report.qp_kkt,
        "min_u": float(report.pair.u.values[g.in_omega].min()),
        "max_u": float(report.pair.u.values[g.in_omega].max()),
    }
    totals = [b.total for b in report.trace]
    verdicts = {
        "trace_nonincreasing": all(
            b <= a + report.trace_slack for a, b in zip(totals[:-1], totals[1:])
        ),
        "converged": report.termination in ("stalled", "exhaustive"),
    }
    path = os.path.join(run_dir, "trace.csv")
    _write_csv(path, ["iter", "gagliardo", "perimeter", "total"],
               _trace_rows(report.trace))
    return scalars, verdicts, [path]


def _run_oracle(cfg, run_dir):
    g, tg, tp = _tables(cfg)
    n_max = int(cfg.experiment_params.get("n_max", 12))
    oracle = brute_force_minimize(g, cfg.datum, tg, tp, cfg.solver, n_max=n_max)
    pair0 = make_pair(*sample_datum(cfg.datum, g))
    report = alternate_minimize(pair0, cfg.solver, tg, tp, cfg.fractional)
    e_alt = report.trace[-1].total
    e_orc = float(oracle.landscape.min())
    scalars = {
        "alternate_total": e_alt,
        "oracle_total": e_orc,
        "gap": e_alt - e_orc,
        "patterns": int(oracle.landscape.size),
    }
    verdicts = {
        "oracle_dominance": e_alt >= e_orc - 1e-9,
        "oracle_hit": e_alt <= e_orc + 1e-6,
    }
    path = os.path.join(run_dir, "landscape.csv")
    _write_csv(path, ["pattern", "total"],
               list(enumerate(oracle.landscape.tolist())))
    return scalars, verdicts, [path]


def _run_comparison(cfg, run_dir):
    if "bound" not in cfg.experiment_params:
        raise ConfigError("experiment_params.bound: required for comparison runs")
    bound = float(cfg.experiment_params["bound"])
    side = cfg.experiment_params.get("side", "above")
    g, tg, tp, report = _minimize(cfg)
    u_in = report.pair.u.values[g.in_omega]
    scalars = {
        "bound": bound,
        "side": side,
        "min_u": float(u_in.min()),
        "max_u": float(u_in.max()),
        "total": report.trace[-1].total,
    }
    if side == "above":
        verdicts = {"comparison": u_in.min() >= bound - 1e-6}
    else:
        verdicts = {"comparison": u_in.max() <= bound + 1e-6}
    path = os.path.join(run_dir, "trace.csv")
    _write_csv(path, ["iter", "gagliardo", "perimeter", "total"],
               _trace_rows(report.trace))
    return scalars, verdicts, [path]


def _run_remark_r(cfg, run_dir):
    if abs(cfg.fractional.sigma - 2.0 * cfg.fractional.s) > 1e-12:
        raise ConfigError("fractional: remark-r requires sigma = 2 s")
    threshold = float(cfg.experiment_params.get("value_threshold", 0.5))
    g, tg, tp, report = _minimize(cfg)
    u_in = report.pair.u.values[g.in_omega]
    e_in = report.pair.phases.indicator[g.in_omega]
    both = bool((e_in == 1).any() and (e_in == -1).any())
    min_abs = float(np.abs(u_in).min())
    scalars = {
        "min_abs_u": min_abs,
        "phase_plus_cells": int((e_in == 1).sum()),
        "phase_minus_cells": int((e_in == -1).sum()),
        "total": report.trace[-1].total,
    }
    verdicts = {
        "both_phases_nonempty": both,
        "not_pure_indicator": both and min_abs <= threshold,
    }
    path = os.path.join(run_dir, "solution.csv")
    _write_csv(path, ["x", "u", "phase"],
               [(float(x), float(v), int(e)) for x, v, e in zip(
                   g.centers[g.in_omega, 0], u_in, e_in)])
    return scalars, verdicts, [path]


def _run_plateau(cfg, run_dir):
    factor = float(cfg.experiment_params.get("residual_factor", 10.0))
    g, tg, tp, report = _minimize(cfg)
    pair = report.pair
    u_in = pair.u.values[g.in_omega]
    delta = cfg.solver.zero_threshold
    if delta is None:
        delta = 1e-7 * max(1.0, float(np.abs(u_in).max()))
    zero_cells = np.flatnonzero(g.in_omega & (np.abs(pair.u.values) <= delta))
    h_n = g.h**g.dimension
    kkt_bound = max(report.qp_kkt, cfg.solver.qp_tolerance) / (2.0 * h_n)
    residual = None
    if zero_cells.size == 1 and g.strict_interior[zero_cells[0]]:
        residual = frac_laplacian(pair.u, int(zero_cells[0]), tg)
    single_and_bad = (
        zero_cells.size == 1
        and residual is not None
        and abs(residual) > factor * kkt_bound
    )
    scalars = {
        "zero_cells": int(zero_cells.size),
        "zero_threshold": delta,
        "kkt_bound": kkt_bound,
        "residual_at_single_zero": residual,
        "total": report.trace[-1].total,
    }
    verdicts = {"no_isolated_nonharmonic_zero": not single_and_bad}
    path = os.path.join(run_dir, "solution.csv")
    _write_csv(path, ["x", "u", "phase"],
               [(float(x), float(v), int(e)) for x, v, e in zip(
                   g.centers[g.in_omega, 0], u_in,
                   pair.phases.indicator[g.in_omega])])
    return scalars, verdicts, [path]


def _weiss_radii(cfg, grid):
    radii = cfg.experiment_params.get("radii")
    if radii is None:
        r_max = 0.95 * grid.spec.domain_radius
        radii = np.linspace(0.25 * r_max / 0.95, r_max, 9)
    return np.asarray([float(r) for r in radii])


def _run_weiss_scan(cfg, run_dir):
    synthetic = isinstance(cfg.datum.func, ConeF)
    g, tg, tp = _tables(cfg)
    if synthetic:
        pair = make_pair(*sample_datum(cfg.datum, g))
        kkt = 0.0
    else:
        _, _, _, report = _minimize(cfg)
        pair = report.pair
        kkt = report.qp_kkt
    hg = _half_grid(cfg, g)
    radii = _weiss_radii(cfg, g)
    shell_cells = float(cfg.experiment_params.get("shell_cells", 3.0))
    prof = weiss_profile(pair, radii, cfg.fractional, hg, shell_cells=shell_cells)
    scale = float(np.abs(prof.phi).max())
    slack = float(cfg.experiment_params.get("monotone_slack_rel", 1e-3)) * scale
    monotone = bool(np.all(np.diff(prof.phi) >= -slack))
    spread = float((prof.phi.max() - prof.phi.min()) / scale) if scale else 0.0
    scalars = {
        "phi_first": float(prof.phi[0]),
        "phi_last": float(prof.phi[-1]),
        "phi_spread_rel": spread,
        "monotone_slack": slack,
        "qp_kkt": kkt,
        "synthetic": synthetic,
    }
    verdicts = {"phi_monotone": monotone}
    if synthetic:
        tol = float(cfg.experiment_params.get("constancy_tol", 0.02))
        verdicts["phi_constant"] = spread <= tol
    path = os.path.join(run_dir, "profile.csv")
    _write_csv(path, ["r", "G", "H", "Phi"],
               [(float(r), float(gv), float(hv), float(pv)) for r, gv, hv, pv in
                zip(prof.radii, prof.g_values, prof.h_values, prof.phi)])
    return scalars, verdicts, [path]


def _run_blowup(cfg, run_dir):
    g, tg, tp = _tables(cfg)
    pair = make_pair(*sample_datum(cfg.datum, g))
    scales = [int(k) for k in cfg.experiment_params.get("scales", [1, 2])]
    ts = np.asarray(cfg.experiment_params.get("radii", [0.5, 0.75, 1.0]), dtype=float)
    tol = float(cfg.experiment_params.get("identity_tol", 1e-10))
    levels = cfg.extension.get("levels")
    if levels is None:
        ratio = cfg.extension.get("ratio", 1.15)
        z1 = cfg.extension.get("z_first") or 0.5 * g.h
        levels = 2 + int(math.ceil(math.log(1.05 * ts.max() / z1) / math.log(ratio)))
    hg = _half_grid(cfg, g, levels=levels)
    rows = []
    worst = 0.0
    base = weiss_profile(pair, ts, cfg.fractional, hg)
    for k in scales:
        r = 2.0 ** (-k)
        scaled = rescale_pair(pair, r, cfg.fractional)
        hg_r = _half_grid(cfg, scaled.grid, levels=levels,
                          z_first=(cfg.extension.get("z_first") or 0.5 * g.h) / r)
        prof_r = weiss_profile(scaled, ts, cfg.fractional, hg_r)
        prof_o = weiss_profile(pair, r * ts, cfg.fractional, hg)
        err = float(np.max(np.abs(prof_r.phi - prof_o.phi)
                           / np.maximum(np.abs(prof_o.phi), 1e-30)))
        worst = max(worst, err)
        for t, phi_r, phi_o in zip(ts, prof_r.phi, prof_o.phi):
            rows.append((k, r, float(t), float(phi_r), float(phi_o)))
    scalars = {
        "identity_max_rel_err": worst,
        "phi_at_unit": [float(v) for v in base.phi],
    }
    verdicts = {"scaling_identity": worst <= tol}
    path = os.path.join(run_dir, "blowup.csv")
    _write_csv(path, ["k", "r", "t", "phi_rescaled", "phi_original"], rows)
    return scalars, verdicts, [path]


def _run_cone2d(cfg, run_dir):
    if cfg.grid_spec.dimension != 2:
        raise ConfigError("grid.dimension: cone2d needs a 2D base grid")
    g = build_grid(cfg.grid_spec)
    normal = cfg.experiment_params.get("normal", [1.0, 0.0])
    set_spec = HalfspaceSet(tuple(float(v) for v in normal), 0.0)
    datum = ExteriorDatum(ConstantF(0.0), set_spec)
    u = DiscreteFunction(g, np.zeros(g.n_cells), datum)
    phases = PhaseSet(g, set_spec.membership(g.centers), datum)
    pair = make_pair(u, phases)
    radii = [float(r) for r in cfg.experiment_params.get("radii", [4.0, 8.0, 16.0])]
    slack = float(cfg.experiment_params.get("decay_slack", 0.6))
    pos_tol = float(cfg.experiment_params.get("positivity_tol", 1e-8))
    hg = _half_grid(cfg, g)
    defects = [cone_defect(pair, r, hg, cfg.fractional) for r in radii]
    rates = [
        math.log2(abs(d2) / abs(d1)) if d1 != 0.0 else float("nan")
        for d1, d2 in zip(defects[:-1], defects[1:])
    ]
    bound = -cfg.fractional.sigma + slack
    scalars = {
        "radii": radii,
        "defects": [float(d) for d in defects],
        "rates_log2": [float(r) for r in rates],
        "rate_bound": bound,
    }
    verdicts = {
        "defect_positive": all(d > -pos_tol for d in defects),
        "defect_decay": all(r <= bound for r in rates),
    }
    path = os.path.join(run_dir, "defect.csv")
    _write_csv(path, ["R", "defect"], list(zip(radii, defects)))
    return scalars, verdicts, [path]


def _run_dyda(cfg, run_dir):
    cells = [int(m) for m in cfg.experiment_params.get("cells", [64, 128, 256])]
    window = cfg.experiment_params.get("window", [0.25, 0.75])
    max_final = float(cfg.experiment_params.get("max_final", 0.05))
    s = cfg.fractional.s
    datum = cone_datum(s, (1.0, 0.0))
    rows, maxima = [], []
    for m in cells:
        spec = replace(cfg.grid_spec, cells_per_side=m)
        g = build_grid(spec)
        table = assemble_table(g, 2.0 * s, cache_dir=cfg.cache_dir)
        u, _ = sample_datum(datum, g)
        x = g.centers[:, 0]
        sel = np.flatnonzero((x >= window[0]) & (x <= window[1]))
        residuals = [abs(frac_laplacian(u, int(c), table)) for c in sel]
        worst = float(max(residuals))
        maxima.append(worst)
        rows.append((m, g.h, worst))
    decreasing = all(b < a for a, b in zip(maxima[:-1], maxima[1:]))
    scalars = {"cells": cells, "max_residuals": maxima}
    verdicts = {
        "residual_strictly_decreasing": decreasing,
        "finest_below_bound": maxima[-1] <= max_final,
    }
    path = os.path.join(run_dir, "residuals.csv")
    _write_csv(path, ["m", "h", "max_residual"], rows)
    return scalars, verdicts, [path]


def _weighted_l2(u: DiscreteFunction, s: float) -> float:
    """Approximate integral of u^2 / (1 + |y|^(n+2s)) over the line."""
    g = u.grid
    if g.dimension != 1:
        raise ConfigError("energy-bound runs are 1D")
    w = 1.0 / (1.0 + np.abs(g.centers[:, 0]) ** (1.0 + 2.0 * s))
    box = float(np.sum(u.values**2 * w) * g.h)
    L = g.spec.half_width
    func = u.datum.func

    def tail_integrand(t):
        vals = func.evaluate(np.array([[t], [-t]]))
        return float((vals**2).sum()) / (1.0 + t ** (1.0 + 2.0 * s))

    tail = quad(tail_integrand, L, np.inf, epsabs=0.0, epsrel=1e-8,
                limit=200, full_output=1)[0]
    return box + tail


def _run_energy_bound(cfg, run_dir):
    instances = int(cfg.experiment_params.get("instances", 5))
    lo = float(cfg.experiment_params.get("low", -1.0))
    hi = float(cfg.experiment_params.get("high", 1.0))
    g, tg, tp = _tables(cfg)
    eval_mask = np.linalg.norm(g.centers, axis=1) < min(
        1.0, g.spec.domain_radius
    )
    rng = np.random.RandomState(cfg.seed)
    rows = []
    ratios = []
    for k in range(instances):
        edges = tuple(float(g.spec.half_width * 2.0**j) for j in range(7))
        right = tuple(float(abs(v)) for v in rng.uniform(lo, hi, 6))
        left = tuple(-float(abs(v)) for v in rng.uniform(lo, hi, 6))
        datum = tabulated_datum(edges, right, left,
                                float(abs(rng.uniform(lo, hi))),
                                HalfspaceSet((1.0,), 0.0))
        pair0 = make_pair(*sample_datum(datum, g))
        report = alternate_minimize(pair0, cfg.solver, tg, tp, cfg.fractional)
        pair = report.pair
        energy = gagliardo_energy(pair.u, tg, omega_mask=eval_mask) + frac_perimeter(
            pair.phases, tp, omega_mask=eval_mask
        )
        denom = 1.0 + _weighted_l2(pair.u, cfg.fractional.s)
        ratios.append(energy / denom)
        rows.append((k, energy, denom, energy / denom))
    scalars = {"ratios": [float(r) for r in ratios]}
    verdicts = {"ratios_finite": all(math.isfinite(r) for r in ratios)}
    path = os.path.join(run_dir, "ratios.csv")
    _write_csv(path, ["instance", "energy_b1", "denominator", "ratio"], rows)
    return scalars, verdicts, [path]


_RUNNERS = {
    "energy": _run_energy,
    "minimize": _run_minimize,
    "oracle": _run_oracle,
    "comparison": _run_comparison,
    "remark-r": _run_remark_r,
    "plateau": _run_plateau,
    "weiss-scan": _run_weiss_scan,
    "blowup": _run_blowup,
    "cone2d": _run_cone2d,
    "dyda": _run_dyda,
    "energy-bound": _run_energy_bound,
}


def _jsonify(obj):
    """Plain-Python copy of a summary structure (numpy scalars included)."""
    if isinstance(obj, dict):
        return {k: _jsonify(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonify(v) for v in obj]
    if isinstance(obj, np.bool_):
        return bool(obj)
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, np.floating):
        return float(obj)
    if isinstance(obj, np.ndarray):
        return [_jsonify(v) for v in obj.tolist()]
    return obj


def run_experiment(config: ExperimentConfig) -> ExperimentReport:
    """Run the named pipeline; writes config echo, CSVs and summary.json."""
    if config.threads:
        numerics.set_worker_cap(config.threads)
    started = time.time()
    stamp = time.strftime("%Y%m%d-%H%M%S") + f"-{os.getpid()}-{started:.0f}"
    run_dir = os.path.join(config.output_dir, f"{config.experiment}-{stamp}")
    os.makedirs(run_dir, exist_ok=True)
    with open(os.path.join(run_dir, "config.json"), "w") as fh:
        json.dump(config.echo, fh, indent=2, sort_keys=True)
    with open(os.path.join(run_dir, "schema.json"), "w") as fh:
        json.dump(CONFIG_SCHEMA, fh, indent=2, sort_keys=True)
    try:
        scalars, verdicts, files = _RUNNERS[config.experiment](config, run_dir)
    except NonConvergenceError as exc:
        partial = {
            "experiment": config.experiment,
            "seed": config.seed,
            "error": str(exc),
            "verdicts": {"converged": False},
            "timings": {"wall_s": time.time() - started},
        }
        with open(os.path.join(run_dir, "summary.json"), "w") as fh:
            json.dump(partial, fh, indent=2, sort_keys=True)
        raise
    scalars = _jsonify(scalars)
    verdicts = _jsonify(verdicts)
    timings = {"wall_s": time.time() - started, "threads": config.threads}
    summary = {
        "experiment": config.experiment,
        "seed": config.seed,
        "scalars": scalars,
        "verdicts": verdicts,
        "files": [os.path.basename(f) for f in files],
        "timings": timings,
    }
    summary_path = os.path.join(run_dir, "summary.json")
    with open(summary_path, "w") as fh:
        json.dump(summary, fh, indent=2, sort_keys=True)
    files = files + [
        os.path.join(run_dir, "config.json"),
        os.path.join(run_dir, "schema.json"),
        summary_path,
    ]
    for f in files:
        assert os.path.exists(f), f"manifest file missing: {f}"
    return ExperimentReport(
        config=config.echo,
        run_dir=run_dir,
        scalars=scalars,
        verdicts=verdicts,
        files=files,
        timings=timings,
    )


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="fracfree",
        description="desk-scale experiments for the nonlocal free-boundary energy",
    )
    parser.add_argument("experiment", choices=EXPERIMENTS)
    parser.add_argument("--config", required=True, help="JSON config path")
    parser.add_argument("--outdir", default=None, help="output root directory")
    parser.add_argument("--threads", type=int, default=None, help="worker cap")
    parser.add_argument("--seed", type=int, default=None, help="override seed")
    parser.add_argument("--cache-dir", default=None, help="kernel table cache")
    args = parser.parse_args(argv)
    try:
        with open(args.config) as fh:
            raw = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        print(f"error: cannot read config: {exc}", file=sys.stderr)
        return 2
    raw.setdefault("experiment", args.experiment)
    if raw["experiment"] != args.experiment:
        print(
            f"error: config names experiment {raw['experiment']!r}, "
            f"command line says {args.experiment!r}",
            file=sys.stderr,
        )
        return 2
    if args.outdir is not None:
        raw["output_dir"] = args.outdir
    if args.threads is not None:
        raw["threads"] = args.threads
    if args.seed is not None:
        raw["seed"] = args.seed
    if args.cache_dir is not None:
        raw["cache_dir"] = args.cache_dir
    try:
        config = validate_config(raw)
    except ConfigError as exc:
        print(f"error: invalid config: {exc}", file=sys.stderr)
        return 2
    try:
        report = run_experiment(config)
    except ConfigError as exc:
        print(f"error: invalid config: {exc}", file=sys.stderr)
        return 2
    except NonConvergenceError as exc:
        print(f"error: solver did not converge: {exc}", file=sys.stderr)
        return 3
    except (AssertionError, FracfreeError) as exc:
        print(f"error: internal failure: {exc}", file=sys.stderr)
        return 4
    status = "pass" if report.passed else "FAIL"
    for name, ok in report.verdicts.items():
        print(f"{name}: {'pass' if ok else 'FAIL'}")
    print(f"{report.run_dir}: {status}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
