"""Acceptance suite: every criterion at its stated tolerance.

Each test prints one pass/fail line (run with `pytest -s` to see them all)
and asserts both the tolerance and the runtime budget.
"""

import json
import math
import os
import time

import numpy as np
import pytest

from fracfree import (
    FractionalParams,
    GridSpec,
    assemble_table,
    build_grid,
    cell_pair_weight,
    constant_datum,
    halfspace_datum,
    make_pair,
    rescale_pair,
    sample_datum,
    tabulated_datum,
    tail_weight,
)
from fracfree.energy import frac_perimeter, gagliardo_energy, total_energy
from fracfree.extension import make_half_grid, weiss_profile
from fracfree.model import (
    DiscreteFunction,
    FullSet,
    HalfspaceSet,
    PhaseSet,
    cone_datum,
)
from fracfree.operators import frac_laplacian, harmonicity_residual
from fracfree.quadrature import ray_region
from fracfree.solver import SolverParams, alternate_minimize, brute_force_minimize
from fracfree.cli import run_experiment, validate_config

SQRT2 = math.sqrt(2.0)


def _report(num, name, ok, budget_s, elapsed, detail=""):
    line = (
        f"[criterion {num:02d}] {'PASS' if ok else 'FAIL'} {name} "
        f"({elapsed:.1f}s / {budget_s:.0f}s) {detail}"
    )
    print(line)
    assert ok, line
    assert elapsed <= budget_s, f"criterion {num} over budget: {line}"


def _random_signed_datum(rng, half_width, scale=1.0):
    """Sign-compatible shell data: positive right, negative left."""
    edges = tuple(half_width * 2.0**k for k in range(7))
    right = tuple(float(abs(v)) for v in rng.uniform(-scale, scale, 6))
    left = tuple(-float(abs(v)) for v in rng.uniform(-scale, scale, 6))
    far = float(abs(rng.uniform(-scale, scale)))
    return tabulated_datum(edges, right, left, far, HalfspaceSet((1.0,), 0.0))


def _bounded_datum(rng, half_width, lo, hi):
    edges = tuple(half_width * 2.0**k for k in range(7))
    right = tuple(float(v) for v in rng.uniform(lo, hi, 6))
    left = tuple(float(v) for v in rng.uniform(lo, hi, 6))
    far = float(rng.uniform(lo, hi))
    set_spec = FullSet(1) if lo >= 0.0 else FullSet(-1)
    return tabulated_datum(edges, right, left, far, set_spec)


def test_criterion_01_kernel_golden_values():
    t0 = time.time()
    w = cell_pair_weight(((0.0,), (1.0,)), ((1.0,), (2.0,)), 0.5)
    t = tail_weight(((0.0,), (1.0,)), ray_region(2.0, +1), 0.5)
    ok_w = abs(w - (8.0 - 4.0 * SQRT2)) <= 1e-6 * (8.0 - 4.0 * SQRT2)
    ok_t = abs(t - (4.0 * SQRT2 - 4.0)) <= 1e-6 * (4.0 * SQRT2 - 4.0)
    _report(1, "kernel golden values", ok_w and ok_t, 1.0, time.time() - t0,
            f"pair={w:.9f} tail={t:.9f}")


def test_criterion_02_perimeter_golden_value():
    t0 = time.time()
    g = build_grid(GridSpec(1, 2.0, 16, 64.0, 1.0))
    table = assemble_table(g, 0.5)
    _, phases = sample_datum(halfspace_datum([1.0], 0.0), g)
    per = frac_perimeter(phases, table, sigma=0.5)
    ok = abs(per - 4.0 * SQRT2) <= 1e-3 * 4.0 * SQRT2
    _report(2, "half-line perimeter 4*sqrt(2)", ok, 5.0, time.time() - t0,
            f"value={per:.9f}")


def test_criterion_03_cross_term_identity():
    t0 = time.time()
    g = build_grid(GridSpec(1, 2.0, 16, 128.0, 1.0))
    table = assemble_table(g, 0.5)
    datum = halfspace_datum([1.0], 0.0)
    rng = np.random.RandomState(314)
    worst = 0.0
    for _ in range(10):
        ind = datum.set_spec.membership(g.centers).copy()
        ind[g.in_omega] = rng.choice([-1, 1], size=int(g.in_omega.sum()))
        phases = PhaseSet(g, ind, datum)
        u = DiscreteFunction(g, phases.indicator.astype(float), datum)
        gag = gagliardo_energy(u, table, s=0.25)
        per = frac_perimeter(phases, table, sigma=0.5)
        worst = max(worst, abs(gag - 8.0 * per) / max(abs(gag), 1e-300))
    _report(3, "gagliardo = 8 * perimeter on indicators", worst <= 1e-6,
            10.0, time.time() - t0, f"worst rel dev={worst:.2e}")


def test_criterion_04_scaling_identities():
    t0 = time.time()
    # (a) pair weights scale like r^(n - alpha) within 1e-12
    ok = True
    details = []
    r = 2.0
    w1 = cell_pair_weight(((0.0,), (1.0,)), ((1.0,), (2.0,)), 0.5)
    w2 = cell_pair_weight(((0.0,), (r,)), ((r,), (2 * r,)), 0.5)
    dev_a1 = abs(w2 - r**0.5 * w1) / abs(w2)
    w1 = cell_pair_weight(((0.0, 0.0), (1.0, 1.0)), ((3.0, 2.0), (4.0, 3.0)), 0.75)
    w2 = cell_pair_weight(((0.0, 0.0), (r, r)), ((3 * r, 2 * r), (4 * r, 3 * r)), 0.75)
    dev_a2 = abs(w2 - r**1.25 * w1) / abs(w2)
    ok &= dev_a1 <= 1e-12 and dev_a2 <= 1e-12
    details.append(f"W: {max(dev_a1, dev_a2):.2e}")
    # (b) total energy scales like r^(sigma - n) under dyadic rescale
    params = FractionalParams(0.25, 0.5)
    g = build_grid(GridSpec(1, 2.0, 16, 128.0, 1.0))
    pair = make_pair(*sample_datum(halfspace_datum([1.0], 0.0), g))
    tg = assemble_table(g, 0.5)
    base = total_energy(pair, params, tg, tg).total
    worst_b = 0.0
    for rr in (2.0, 0.5):
        scaled = rescale_pair(pair, rr, params)
        t2 = assemble_table(scaled.grid, 0.5)
        val = total_energy(scaled, params, t2, t2).total
        expect = rr ** (params.sigma - 1.0) * base
        worst_b = max(worst_b, abs(val - expect) / abs(expect))
    ok &= worst_b <= 1e-10
    details.append(f"energy: {worst_b:.2e}")
    # (c) profile identity Phi_u(r t) = Phi_(u_r)(t) within 1e-10
    params_c = FractionalParams(0.625, 0.25)
    gc = build_grid(GridSpec(1, 1.25, 128, 128.0, 1.0))
    pair_c = make_pair(*sample_datum(cone_datum(0.5, (1.0, -1.0)), gc))
    hg = make_half_grid(gc, ratio=1.10, z_first=0.25 * gc.h, levels=55)
    rr = 0.5
    scaled_c = rescale_pair(pair_c, rr, params_c)
    hg_r = make_half_grid(scaled_c.grid, ratio=1.10,
                          z_first=0.25 * scaled_c.grid.h, levels=55)
    ts = np.array([0.5, 0.75, 1.0])
    prof_o = weiss_profile(pair_c, rr * ts, params_c, hg)
    prof_r = weiss_profile(scaled_c, ts, params_c, hg_r)
    dev_c = float(np.max(np.abs(prof_r.phi - prof_o.phi) / np.abs(prof_o.phi)))
    ok &= dev_c <= 1e-10
    details.append(f"profile: {dev_c:.2e}")
    _report(4, "scaling identities", ok, 30.0, time.time() - t0, " ".join(details))


def test_criterion_05_dyda_identity():
    t0 = time.time()
    datum = cone_datum(0.5, (1.0, 0.0))
    maxima = []
    for m in (128, 256, 512):  # h = 1/64, 1/128, 1/256 on [-1, 1]
        g = build_grid(GridSpec(1, 1.0, m, 64.0, 1.0))
        table = assemble_table(g, 1.0)
        u, _ = sample_datum(datum, g)
        x = g.centers[:, 0]
        sel = np.flatnonzero((x >= 0.25) & (x <= 0.75))
        maxima.append(max(abs(frac_laplacian(u, int(c), table)) for c in sel))
    decreasing = maxima[0] > maxima[1] > maxima[2]
    ok = decreasing and maxima[-1] <= 0.05
    _report(5, "one-sided root profile residual", ok, 30.0, time.time() - t0,
            "maxima=" + ",".join(f"{v:.4f}" for v in maxima))


def test_criterion_06_oracle_equivalence():
    t0 = time.time()
    g = build_grid(GridSpec(1, 1.0, 10, 64.0, 1.0))
    tg = assemble_table(g, 0.6)
    tp = assemble_table(g, 0.5)
    rng = np.random.RandomState(20260810)
    hits = 0
    dominance = True
    for trial in range(20):
        datum = _random_signed_datum(rng, 1.0)
        params = SolverParams(qp_tolerance=1e-10, multistart_random=5, seed=trial)
        oracle = brute_force_minimize(g, datum, tg, tp, params)
        pair0 = make_pair(*sample_datum(datum, g))
        rep = alternate_minimize(pair0, params, tg, tp)
        gap = rep.trace[-1].total - float(oracle.landscape.min())
        dominance &= gap >= -1e-9
        hits += gap <= 1e-6
    ok = dominance and hits >= 18
    _report(6, "oracle equivalence 20 instances", ok, 300.0, time.time() - t0,
            f"hits={hits}/20")


def test_criterion_07_comparison_principle():
    t0 = time.time()
    g = build_grid(GridSpec(1, 1.0, 12, 64.0, 1.0))
    tg = assemble_table(g, 0.6)
    tp = assemble_table(g, 0.5)
    rng = np.random.RandomState(55)
    ok = True
    worst = 0.0
    plan = [(-1.0, 4), (0.5, 3), (2.0, 3)]
    for bound, count in plan:
        for k in range(count):
            if bound >= 0:
                datum = _bounded_datum(rng, 1.0, bound, bound + 1.0)
            else:
                datum = _random_signed_datum(rng, 1.0)  # phi >= -1 by scale
            params = SolverParams(qp_tolerance=1e-10, multistart_random=3, seed=k)
            pair0 = make_pair(*sample_datum(datum, g))
            rep = alternate_minimize(pair0, params, tg, tp)
            m = float(rep.pair.u.values[g.in_omega].min())
            ok &= m >= bound - 1e-6
            worst = max(worst, bound - m)
            # mirrored: data below -bound force u below -bound
            mirror = _bounded_datum(rng, 1.0, -bound - 1.0, -bound) if bound >= 0 \
                else None
            if mirror is not None:
                pairm = make_pair(*sample_datum(mirror, g))
                repm = alternate_minimize(pairm, params, tg, tp)
                mm = float(repm.pair.u.values[g.in_omega].max())
                ok &= mm <= -bound + 1e-6
    _report(7, "comparison principle", ok, 120.0, time.time() - t0,
            f"worst undershoot={worst:.2e}")


def test_criterion_08_s_harmonicity():
    t0 = time.time()
    g = build_grid(GridSpec(1, 1.0, 16, 64.0, 1.0))
    tg = assemble_table(g, 0.6)
    tp = assemble_table(g, 0.5)
    rng = np.random.RandomState(808)
    ok = True
    worst_ratio = 0.0
    for k in range(5):
        datum = _random_signed_datum(rng, 1.0)
        params = SolverParams(qp_tolerance=1e-9, multistart_random=2, seed=k)
        pair0 = make_pair(*sample_datum(datum, g))
        rep = alternate_minimize(pair0, params, tg, tp)
        field = harmonicity_residual(rep.pair, tg)
        bound = 10.0 * max(rep.qp_kkt, params.qp_tolerance) / (2.0 * g.h)
        if field.mask.any():
            ratio = field.max_masked / bound
            worst_ratio = max(worst_ratio, ratio)
            ok &= field.max_masked <= bound
    _report(8, "masked operator residual vs KKT bound", ok, 120.0,
            time.time() - t0, f"worst ratio={worst_ratio:.3f}")


def test_criterion_09_weiss_monotonicity():
    t0 = time.time()
    # synthetic homogeneous pair: Phi constant within 2% over [0.25, 1]
    params = FractionalParams(0.575, 0.15, c_ratio=0.25)
    g = build_grid(GridSpec(1, 1.25, 512, 128.0, 1.0))
    pair = make_pair(*sample_datum(cone_datum(params.scaling_degree, (1.0, -1.0)), g))
    hg = make_half_grid(g, ratio=1.06, z_first=0.25 * g.h, top=1.25)
    prof = weiss_profile(pair, np.linspace(0.25, 1.0, 9), params, hg)
    spread = float((prof.phi.max() - prof.phi.min()) / np.abs(prof.phi).max())
    ok_const = spread <= 0.02
    # computed minimizer with the free boundary at the origin: Phi rises
    cfg = validate_config({
        "experiment": "weiss-scan",
        "grid": {"dimension": 1, "half_width": 1.25, "cells_per_side": 256,
                 "truncation_radius": 80.0, "domain_radius": 1.0},
        "fractional": {"s": 0.3, "sigma": 0.5},
        "datum": {"kind": "halfspace", "normal": [1.0], "offset": 0.0},
        "solver": {"multistart_random": 2},
        "extension": {"ratio": 1.08, "top": 1.05},
        "experiment_params": {"radii": list(np.linspace(0.25, 0.95, 8))},
        "output_dir": "/tmp/fracfree-acceptance",
    })
    rep = run_experiment(cfg)
    ok_mono = rep.verdicts["phi_monotone"]
    _report(9, "profile constancy + monotonicity", ok_const and ok_mono,
            120.0, time.time() - t0,
            f"synthetic spread={spread:.4f} minimizer monotone={ok_mono}")


def test_criterion_10_nontrivial_at_matched_orders():
    t0 = time.time()
    cfg = validate_config({
        "experiment": "remark-r",
        "grid": {"dimension": 1, "half_width": 2.0, "cells_per_side": 32,
                 "truncation_radius": 128.0, "domain_radius": 1.0},
        "fractional": {"s": 0.25, "sigma": 0.5},
        "datum": {"kind": "halfspace", "normal": [1.0], "offset": 0.0},
        "solver": {"multistart_random": 3},
        "output_dir": "/tmp/fracfree-acceptance",
    })
    rep = run_experiment(cfg)
    ok = rep.verdicts["both_phases_nonempty"] and rep.verdicts["not_pure_indicator"]
    _report(10, "minimizer is not the bare indicator", ok, 60.0,
            time.time() - t0, f"min|u|={rep.scalars['min_abs_u']:.4f}")


def test_criterion_11_plateau_disjunction():
    t0 = time.time()
    ok = True
    zero_sizes = []
    for seed in range(5):
        rng = np.random.RandomState(900 + seed)
        edges = [2.0 * 2.0**k for k in range(7)]
        right = [float(abs(v)) for v in rng.uniform(-1, 1, 6)]
        left = [-float(abs(v)) for v in rng.uniform(-1, 1, 6)]
        cfg = validate_config({
            "experiment": "plateau",
            "grid": {"dimension": 1, "half_width": 2.0, "cells_per_side": 24,
                     "truncation_radius": 128.0, "domain_radius": 1.0},
            "fractional": {"s": 0.5, "sigma": 0.5},
            "datum": {"kind": "tabulated", "edges": edges, "right": right,
                      "left": left, "far_value": 0.5,
                      "set": {"kind": "halfspace", "normal": [1.0], "offset": 0.0}},
            "solver": {"multistart_random": 3},
            "seed": seed,
            "output_dir": "/tmp/fracfree-acceptance",
        })
        rep = run_experiment(cfg)
        ok &= rep.verdicts["no_isolated_nonharmonic_zero"]
        zero_sizes.append(rep.scalars["zero_cells"])
    _report(11, "no isolated non-harmonic zero", ok, 120.0, time.time() - t0,
            f"zero-set sizes={zero_sizes}")


def test_criterion_12_cone_defect_decay():
    t0 = time.time()
    cfg = validate_config({
        "experiment": "cone2d",
        "grid": {"dimension": 2, "half_width": 18.0, "cells_per_side": 48,
                 "truncation_radius": 1152.0, "domain_radius": 17.0},
        "fractional": {"s": 0.75, "sigma": 0.5},
        "datum": {"kind": "halfspace", "normal": [1.0, 0.0], "offset": 0.0},
        "extension": {"ratio": 1.3, "z_first": 0.375, "levels": 16,
                      "pad_cells": 3},
        "experiment_params": {"radii": [4.0, 8.0, 16.0]},
        "output_dir": "/tmp/fracfree-acceptance",
    })
    rep = run_experiment(cfg)
    ok = rep.verdicts["defect_positive"] and rep.verdicts["defect_decay"]
    _report(12, "translation defect decay (2D)", ok, 1800.0, time.time() - t0,
            f"defects={['%.3f' % d for d in rep.scalars['defects']]} "
            f"rates={['%.3f' % r for r in rep.scalars['rates_log2']]}")


def test_criterion_13_determinism():
    t0 = time.time()
    base = {
        "experiment": "minimize",
        "grid": {"dimension": 1, "half_width": 1.0, "cells_per_side": 12,
                 "truncation_radius": 64.0, "domain_radius": 1.0},
        "fractional": {"s": 0.3, "sigma": 0.5},
        "datum": {"kind": "halfspace", "normal": [1.0], "offset": 0.0},
        "solver": {"multistart_random": 3},
        "seed": 7,
        "output_dir": "/tmp/fracfree-acceptance",
    }
    dumps = []
    for threads in (1, 8):
        c = dict(base)
        c["threads"] = threads
        rep = run_experiment(validate_config(c))
        with open(os.path.join(rep.run_dir, "summary.json")) as fh:
            summary = json.load(fh)
        summary.pop("timings")
        dumps.append(json.dumps(summary, sort_keys=True))
    _report(13, "bit-identical summaries across thread counts",
            dumps[0] == dumps[1], 60.0, time.time() - t0)
