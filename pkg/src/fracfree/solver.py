"""Minimization of the coupled functional over admissible pairs.

The function solve is a sign-constrained convex quadratic program (the
Gagliardo form is strictly positive definite thanks to the exterior
tails); the phase solve flips cells of the discrete zero set while the
perimeter strictly decreases. Alternating the two from several starts
gives the local solver; exhaustive enumeration of all phase patterns on
tiny grids gives the global oracle it is calibrated against.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .energy import EnergyBreakdown, PerimeterForm, gagliardo_energy
from .errors import NonConvergenceError, TooLargeError
from .model import (
    AdmissiblePair,
    DiscreteFunction,
    ExteriorDatum,
    FractionalParams,
    Grid,
    PhaseSet,
    sample_datum,
)
from .quadrature import KernelTable


@dataclass(frozen=True)
class SolverParams:
    max_outer_iters: int = 30
    qp_tolerance: float = 1e-9
    zero_threshold: float | None = None     # default 1e-7 * value scale
    flip_strategy: str = "exhaustive-on-zero-set"   # or "greedy"
    exhaustive_cap: int = 12
    multistart_random: int = 5
    energy_stall_tolerance: float = 1e-10
    seed: int = 0
    qp_max_iters: int = 5000

    def __post_init__(self):
        if self.max_outer_iters < 1:
            raise ValueError("max_outer_iters must be at least 1")
        if self.qp_tolerance <= 0 or self.energy_stall_tolerance <= 0:
            raise ValueError("tolerances must be positive")
        if self.flip_strategy not in ("greedy", "exhaustive-on-zero-set"):
            raise ValueError(f"unknown flip strategy {self.flip_strategy!r}")


@dataclass(frozen=True)
class QPResult:
    values: np.ndarray
    kkt_residual: float
    iterations: int
    converged: bool


@dataclass
class SolveReport:
    pair: AdmissiblePair
    trace: list
    termination: str
    outer_iterations: int
    qp_kkt: float
    start_energies: list = field(default_factory=list)
    landscape: np.ndarray | None = None
    trace_slack: float = 1e-9

    def __post_init__(self):
        # phase flips on the zero set may move clamped values by up to the
        # zero threshold, so descent holds within the declared slack
        totals = [b.total for b in self.trace]
        for a, b in zip(totals[:-1], totals[1:]):
            if b > a + self.trace_slack:
                raise NonConvergenceError(
                    f"energy trace increased by {b - a:g} "
                    f"(slack {self.trace_slack:g})",
                    best=self.pair,
                )


class GagliardoQP:
    """Dense quadratic data of the Gagliardo energy in the free values.

    energy(u) = u H u / 2 + b.u + c0 over the ball cells, everything else
    folded in; the sign pattern only changes the feasible box.
    """

    def __init__(self, grid: Grid, datum: ExteriorDatum, table: KernelTable):
        self.grid = grid
        self.free = np.flatnonzero(grid.in_omega)
        fixed = np.flatnonzero(~grid.in_omega)
        dense = table.dense_matrix()
        w_ff = dense[np.ix_(self.free, self.free)]
        w_fx = dense[np.ix_(self.free, fixed)]
        t0, m1, _ = table.function_tails(datum.func, need_m2=False)
        d_vals = datum.func.evaluate(grid.centers[fixed]) if fixed.size else np.zeros(0)
        diag = dense[self.free, :].sum(axis=1) + t0[self.free]
        self.hess = -4.0 * w_ff
        self.hess[np.diag_indices_from(self.hess)] = 4.0 * diag
        self.lin = -4.0 * (w_fx @ d_vals + m1[self.free])
        zero_vals = np.zeros(grid.n_cells)
        zero_vals[fixed] = d_vals
        base = DiscreteFunction(grid, zero_vals, datum)
        self.const = gagliardo_energy(base, table)
        self.table = table
        self.datum = datum
        self._lip = float(np.linalg.norm(self.hess, np.inf))

    def energy(self, u_free: np.ndarray) -> float:
        return float(0.5 * u_free @ self.hess @ u_free + self.lin @ u_free + self.const)

    def gradient(self, u_free: np.ndarray) -> np.ndarray:
        return self.hess @ u_free + self.lin

    def kkt_residual(self, u_free: np.ndarray, signs: np.ndarray) -> float:
        g = self.gradient(u_free)
        at_zero = u_free == 0.0
        res = np.abs(np.where(at_zero, 0.0, g))
        lower = at_zero & (signs > 0)      # u >= 0 active: need g >= 0
        upper = at_zero & (signs < 0)      # u <= 0 active: need g <= 0
        res = np.maximum(res, np.where(lower, np.maximum(-g, 0.0), 0.0))
        res = np.maximum(res, np.where(upper, np.maximum(g, 0.0), 0.0))
        return float(res.max()) if res.size else 0.0

    def _project(self, u: np.ndarray, signs: np.ndarray) -> np.ndarray:
        u = u.copy()
        pos = signs > 0
        u[pos] = np.maximum(u[pos], 0.0)
        u[~pos] = np.minimum(u[~pos], 0.0)
        return u

    def solve(self, signs: np.ndarray, x0: np.ndarray | None = None,
              tol: float = 1e-9, max_iters: int = 5000) -> QPResult:
        """Projected gradient with BB steps, then an active-set polish."""
        n = self.free.size
        signs = np.asarray(signs)
        u = np.zeros(n) if x0 is None else self._project(np.asarray(x0, float), signs)
        g = self.gradient(u)
        tau = 1.0 / max(self._lip, 1e-300)
        iters = 0
        for iters in range(1, max_iters + 1):
            u_new = self._project(u - tau * g, signs)
            if np.max(np.abs(u_new - u)) <= 1e-14 * max(1.0, np.max(np.abs(u))):
                u = u_new
                break
            g_new = self.gradient(u_new)
            du = u_new - u
            dg = g_new - g
            denom = float(du @ dg)
            tau = float(du @ du) / denom if denom > 0.0 else 1.0 / self._lip
            tau = min(max(tau, 1e-6 / self._lip), 1e6 / self._lip)
            u, g = u_new, g_new
            if self.kkt_residual(u, signs) <= tol:
                break
        u, polished = self._polish(u, signs, tol)
        kkt = self.kkt_residual(u, signs)
        return QPResult(values=u, kkt_residual=kkt, iterations=iters,
                        converged=kkt <= 10.0 * tol or polished)

    def _polish(self, u: np.ndarray, signs: np.ndarray, tol: float):
        """Primal active-set refinement to machine-accurate KKT."""
        n = self.free.size
        active = u == 0.0
        for _ in range(2 * n + 20):
            inactive = ~active
            u_try = np.zeros(n)
            if inactive.any():
                sub = self.hess[np.ix_(inactive.nonzero()[0], inactive.nonzero()[0])]
                rhs = -self.lin[inactive]
                u_try[inactive] = np.linalg.solve(sub, rhs)
            viol = inactive & (
                ((signs > 0) & (u_try < 0.0)) | ((signs < 0) & (u_try > 0.0))
            )
            if viol.any():
                active = active | viol
                continue
            g = self.gradient(u_try)
            bad_low = active & (signs > 0) & (g < -tol)
            bad_up = active & (signs < 0) & (g > tol)
            bad = bad_low | bad_up
            if not bad.any():
                return u_try, True
            worst = int(np.argmax(np.where(bad, np.abs(g), -np.inf)))
            active[worst] = False
        return u, False


def solve_u_given_phase(phases: PhaseSet, datum: ExteriorDatum,
                        table: KernelTable, params: SolverParams,
                        qp: GagliardoQP | None = None,
                        warm: np.ndarray | None = None):
    """Minimize the Gagliardo quadratic at fixed phase; returns the
    function and the QP result (with its KKT residual)."""
    grid = phases.grid
    qp = GagliardoQP(grid, datum, table) if qp is None else qp
    signs = phases.indicator[grid.in_omega]
    result = qp.solve(signs, x0=warm, tol=params.qp_tolerance,
                      max_iters=params.qp_max_iters)
    if not result.converged:
        raise NonConvergenceError(
            f"QP stalled at KKT residual {result.kkt_residual:g}",
            best=result,
        )
    values = np.zeros(grid.n_cells)
    values[grid.in_omega] = result.values
    u = DiscreteFunction(grid, values, datum)
    return u, result


def _zero_threshold(params: SolverParams, u_vals: np.ndarray) -> float:
    if params.zero_threshold is not None:
        return params.zero_threshold
    scale = float(np.max(np.abs(u_vals))) if u_vals.size else 1.0
    return 1e-7 * max(1.0, scale)


def update_phase(u: DiscreteFunction, phases: PhaseSet, table: KernelTable,
                 params: SolverParams,
                 form: PerimeterForm | None = None) -> PhaseSet:
    """Force signs where |u| clears the threshold; on the zero set flip
    cells while the perimeter strictly decreases (exhaustively when the
    zero set is small). Ties keep the incumbent phase."""
    grid = u.grid
    inside = grid.in_omega
    form = PerimeterForm(phases, table) if form is None else form
    delta = _zero_threshold(params, u.values[inside])
    e_in = phases.indicator[inside].astype(np.int8).copy()
    uu = u.values[inside]
    e_in[uu > delta] = 1
    e_in[uu < -delta] = -1
    zero_set = np.flatnonzero(np.abs(uu) <= delta)
    use_exhaustive = (
        params.flip_strategy == "exhaustive-on-zero-set"
        and zero_set.size <= params.exhaustive_cap
    )
    if use_exhaustive and zero_set.size:
        best = form.value(e_in)
        best_e = e_in.copy()
        for bits in range(1 << zero_set.size):
            cand = e_in.copy()
            for j in range(zero_set.size):
                if bits >> j & 1:
                    cand[zero_set[j]] = -cand[zero_set[j]]
            val = form.value(cand)
            if val < best - 1e-15 * max(1.0, abs(best)):
                best, best_e = val, cand
        e_in = best_e
    elif zero_set.size:
        while True:
            deltas = np.array([form.flip_delta(e_in, int(k)) for k in zero_set])
            k_best = int(np.argmin(deltas))
            if deltas[k_best] >= -1e-13 * max(1.0, abs(form.value(e_in))):
                break
            e_in[zero_set[k_best]] = -e_in[zero_set[k_best]]
    ind = phases.indicator.copy()
    ind[inside] = e_in
    return phases.with_indicator(ind)


def _start_phases(init: AdmissiblePair, qp: GagliardoQP, params: SolverParams):
    """Deterministic seeds plus seeded random phase patterns."""
    grid = init.grid
    inside = grid.in_omega
    starts = [("incumbent", init.phases.indicator[inside].astype(np.int8))]
    datum_pair = sample_datum(init.u.datum, grid)
    starts.append(("datum", datum_pair[1].indicator[inside].astype(np.int8)))
    free = np.linalg.solve(qp.hess, -qp.lin)
    starts.append(("unconstrained-sign",
                   np.where(free >= 0.0, 1, -1).astype(np.int8)))
    rng = np.random.RandomState(params.seed)
    for k in range(params.multistart_random):
        starts.append((f"random-{k}", rng.choice(
            np.array([-1, 1], dtype=np.int8), size=int(inside.sum()))))
    return starts


def alternate_minimize(init: AdmissiblePair, params: SolverParams,
                       table_gagliardo: KernelTable,
                       table_perimeter: KernelTable,
                       fractional: FractionalParams | None = None) -> SolveReport:
    """Alternate the function solve and the phase solve from every start;
    return the best final pair with its (nonincreasing) energy trace."""
    grid = init.grid
    inside = grid.in_omega
    datum = init.u.datum
    qp = GagliardoQP(grid, datum, table_gagliardo)
    template = init.phases
    form = PerimeterForm(template, table_perimeter)
    best = None
    start_energies = []
    for label, e0 in _start_phases(init, qp, params):
        ind = template.indicator.copy()
        ind[inside] = e0
        phases = template.with_indicator(ind)
        trace = []
        u, qp_res = solve_u_given_phase(phases, datum, table_gagliardo, params, qp=qp)
        kkt = qp_res.kkt_residual
        total = qp.energy(qp_res.values) + form.value(phases.indicator[inside])
        trace.append(_breakdown(u, phases, qp, form, table_gagliardo))
        termination = "max_iters"
        outer = 0
        for outer in range(1, params.max_outer_iters + 1):
            new_phases = update_phase(u, phases, table_perimeter, params, form=form)
            if np.array_equal(new_phases.indicator, phases.indicator):
                termination = "stalled"
                break
            phases = new_phases
            u, qp_res = solve_u_given_phase(
                phases, datum, table_gagliardo, params, qp=qp,
                warm=qp_res.values,
            )
            kkt = max(kkt, qp_res.kkt_residual)
            new_total = qp.energy(qp_res.values) + form.value(phases.indicator[inside])
            trace.append(_breakdown(u, phases, qp, form, table_gagliardo))
            if total - new_total <= params.energy_stall_tolerance:
                total = min(total, new_total)
                termination = "stalled"
                break
            total = new_total
        start_energies.append((label, total))
        if best is None or total < best[0]:
            best = (total, u, phases, trace, termination, outer, kkt)
    total, u, phases, trace, termination, outer, kkt = best
    pair = AdmissiblePair(u, phases)
    slack = max(params.energy_stall_tolerance, 1e-6 * (1.0 + abs(total)))
    return SolveReport(pair=pair, trace=trace, termination=termination,
                       outer_iterations=outer, qp_kkt=kkt,
                       start_energies=start_energies, trace_slack=slack)


def _breakdown(u, phases, qp: GagliardoQP, form: PerimeterForm,
               table_g: KernelTable) -> EnergyBreakdown:
    inside = u.grid.in_omega
    gag = qp.energy(u.values[inside])
    per = form.value(phases.indicator[inside])
    t0, m1, m2 = table_g.function_tails(u.datum.func)
    ui = u.values[inside]
    gag_tail = float(
        2.0 * np.sum(ui**2 * t0[inside] - 2.0 * ui * m1[inside] + m2[inside])
    )
    tp, tn = table_g.set_tails(phases.datum.set_spec)  # diagnostics only
    e_in = phases.indicator[inside].astype(float)
    per_tail = float(0.5 * np.sum((1.0 + e_in) * tn[inside] + (1.0 - e_in) * tp[inside]))
    return EnergyBreakdown(gagliardo=gag, perimeter=per,
                           gagliardo_tail=gag_tail, perimeter_tail=per_tail)


def brute_force_minimize(grid: Grid, datum: ExteriorDatum,
                         table_gagliardo: KernelTable,
                         table_perimeter: KernelTable,
                         params: SolverParams,
                         n_max: int = 12) -> SolveReport:
    """Global minimum by enumerating every phase pattern on the ball.

    Runs the same inner QP for each of the 2^N patterns and returns the
    best pair together with the full energy landscape.
    """
    inside = grid.in_omega
    n = int(inside.sum())
    if n > n_max:
        raise TooLargeError(f"{n} ball cells exceed the exhaustive cap {n_max}")
    qp = GagliardoQP(grid, datum, table_gagliardo)
    _, template = sample_datum(datum, grid)
    form = PerimeterForm(template, table_perimeter)
    landscape = np.empty(1 << n)
    best = None
    kkt = 0.0
    for bits in range(1 << n):
        signs = np.where(
            (bits >> np.arange(n)) & 1, 1, -1
        ).astype(np.int8)
        res = qp.solve(signs, tol=params.qp_tolerance, max_iters=params.qp_max_iters)
        kkt = max(kkt, res.kkt_residual)
        total = qp.energy(res.values) + form.value(signs)
        landscape[bits] = total
        if best is None or total < best[0]:
            best = (total, res.values.copy(), signs.copy())
    total, u_free, signs = best
    values = np.zeros(grid.n_cells)
    values[inside] = u_free
    u = DiscreteFunction(grid, values, datum)
    ind = template.indicator.copy()
    ind[inside] = signs
    phases = template.with_indicator(ind)
    pair = AdmissiblePair(u, phases)
    trace = [_breakdown(u, phases, qp, form, table_gagliardo)]
    return SolveReport(pair=pair, trace=trace, termination="exhaustive",
                       outer_iterations=1, qp_kkt=kkt, landscape=landscape)
