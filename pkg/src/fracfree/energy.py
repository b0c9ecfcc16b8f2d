"""Assembly of the nonlocal energies from kernel tables.

Three quantities: the raw interaction L(A,B) between disjoint collections,
the fractional perimeter of a phase set relative to the minimization ball,
and the Gagliardo energy of a function over all pairs meeting the ball.
Every exterior contribution reduces to per-cell tail weights or datum
moment triples served by the kernel table.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import GeometryError, ParameterError
from .model import AdmissiblePair, DiscreteFunction, FractionalParams, PhaseSet
from .numerics import ordered_sum
from .quadrature import KernelTable


@dataclass(frozen=True)
class EnergyBreakdown:
    """Gagliardo + perimeter split; total is their exact float sum."""

    gagliardo: float
    perimeter: float
    gagliardo_tail: float
    perimeter_tail: float

    @property
    def total(self) -> float:
        return self.gagliardo + self.perimeter


@dataclass(frozen=True)
class CellSelection:
    """A collection of grid cells plus an optional symbolic exterior region."""

    cells: tuple
    region: object = None


def interaction(a: CellSelection, b: CellSelection, table: KernelTable) -> float:
    """L(A, B): kernel mass between two disjoint collections."""
    ia = np.asarray(a.cells, dtype=int)
    ib = np.asarray(b.cells, dtype=int)
    if np.intersect1d(ia, ib).size:
        raise GeometryError("interaction sides share cells")
    if a.region is not None and b.region is not None:
        raise GeometryError("region-to-region interactions are not supported")
    parts = []
    if ia.size and ib.size:
        dense = table.dense_matrix()
        parts.append(ordered_sum(dense[np.ix_(ia, ib)]))
    if b.region is not None and ia.size:
        tails = table.region_tails(b.region)
        parts.append(ordered_sum(tails[ia]))
    if a.region is not None and ib.size:
        tails = table.region_tails(a.region)
        parts.append(ordered_sum(tails[ib]))
    return ordered_sum(parts)


def _check_exponent(table: KernelTable, expected: float, label: str) -> None:
    if abs(table.alpha - expected) > 1e-12:
        raise ParameterError(
            f"{label} table has exponent {table.alpha}, expected {expected}"
        )


def frac_perimeter(phases: PhaseSet, table: KernelTable,
                   sigma: float | None = None,
                   omega_mask: np.ndarray | None = None) -> float:
    """Fractional perimeter of the phase set relative to the ball.

    Three interaction terms: in-ball against in-ball complement, in-ball
    against exterior complement, and in-ball complement against exterior
    set, including the symbolic tails beyond the box. omega_mask overrides
    the grid's ball (evaluation on a smaller domain).
    """
    if sigma is not None:
        _check_exponent(table, sigma, "perimeter")
    grid = phases.grid
    if table.grid is not grid:
        raise ParameterError("table was assembled on a different grid")
    e = phases.indicator.astype(float)
    inside = grid.in_omega if omega_mask is None else omega_mask
    outside = ~inside
    dense = table.dense_matrix()
    w_oo = dense[np.ix_(inside.nonzero()[0], inside.nonzero()[0])]
    w_cross = dense[np.ix_(inside.nonzero()[0], outside.nonzero()[0])]
    e_in = e[inside]
    e_out = e[outside]
    tp, tn = table.set_tails(phases.datum.set_spec)
    inner = 0.25 * ordered_sum(w_oo * (1.0 - np.outer(e_in, e_in)))
    cross = 0.5 * ordered_sum(w_cross * (1.0 - np.outer(e_in, e_out)))
    tail_terms = 0.5 * ((1.0 + e_in) * tn[inside] + (1.0 - e_in) * tp[inside])
    tail = ordered_sum(tail_terms)
    return ordered_sum([inner, cross, tail])


def _perimeter_tail_part(phases: PhaseSet, table: KernelTable) -> float:
    e_in = phases.indicator[phases.grid.in_omega].astype(float)
    tp, tn = table.set_tails(phases.datum.set_spec)
    inside = phases.grid.in_omega
    return ordered_sum(0.5 * ((1.0 + e_in) * tn[inside] + (1.0 - e_in) * tp[inside]))


def gagliardo_energy(u: DiscreteFunction, table: KernelTable,
                     s: float | None = None,
                     omega_mask: np.ndarray | None = None) -> float:
    """Gagliardo energy over all ordered pairs with at least one point
    in the minimization ball, plus exterior-datum tail terms."""
    if s is not None:
        _check_exponent(table, 2.0 * s, "gagliardo")
    grid = u.grid
    if table.grid is not grid:
        raise ParameterError("table was assembled on a different grid")
    vals = u.values
    inside = grid.in_omega if omega_mask is None else omega_mask
    outside = ~inside
    dense = table.dense_matrix()
    idx_in = inside.nonzero()[0]
    diff_all = vals[idx_in][:, None] - vals[None, :]
    part_a = ordered_sum(diff_all**2 * dense[idx_in, :])
    idx_out = outside.nonzero()[0]
    if idx_out.size:
        diff_out = vals[idx_in][:, None] - vals[idx_out][None, :]
        part_b = ordered_sum(diff_out**2 * dense[np.ix_(idx_in, idx_out)])
    else:
        part_b = 0.0
    t0, m1, m2 = table.function_tails(u.datum.func)
    ui = vals[idx_in]
    tail = 2.0 * ordered_sum(
        ui**2 * t0[idx_in] - 2.0 * ui * m1[idx_in] + m2[idx_in]
    )
    return ordered_sum([part_a, part_b, tail])


def _gagliardo_tail_part(u: DiscreteFunction, table: KernelTable) -> float:
    idx_in = u.grid.in_omega.nonzero()[0]
    t0, m1, m2 = table.function_tails(u.datum.func)
    ui = u.values[idx_in]
    return 2.0 * ordered_sum(ui**2 * t0[idx_in] - 2.0 * ui * m1[idx_in] + m2[idx_in])


def total_energy(pair: AdmissiblePair, params: FractionalParams,
                 table_gagliardo: KernelTable,
                 table_perimeter: KernelTable) -> EnergyBreakdown:
    """Full functional value of an admissible pair, with the term split."""
    _check_exponent(table_gagliardo, 2.0 * params.s, "gagliardo")
    _check_exponent(table_perimeter, params.sigma, "perimeter")
    gag = gagliardo_energy(pair.u, table_gagliardo)
    per = frac_perimeter(pair.phases, table_perimeter)
    return EnergyBreakdown(
        gagliardo=gag,
        perimeter=per,
        gagliardo_tail=_gagliardo_tail_part(pair.u, table_gagliardo),
        perimeter_tail=_perimeter_tail_part(pair.phases, table_perimeter),
    )


class PerimeterForm:
    """The perimeter as a quadratic form in the in-ball phase signs.

    Per(e) = const + lin . e - e^T W_oo e / 4, with the outside-ball signs
    and the symbolic exterior folded into const and lin. This is the fast
    path used by phase updates and the exhaustive oracle.
    """

    def __init__(self, phases: PhaseSet, table: KernelTable):
        grid = phases.grid
        inside = grid.in_omega
        outside = ~inside
        dense = table.dense_matrix()
        idx_in = inside.nonzero()[0]
        idx_out = outside.nonzero()[0]
        self.w_oo = dense[np.ix_(idx_in, idx_in)]
        w_cross = dense[np.ix_(idx_in, idx_out)]
        e_out = phases.indicator[idx_out].astype(float)
        tp, tn = table.set_tails(phases.datum.set_spec)
        s_oo = float(self.w_oo.sum())
        s_cross = float(w_cross.sum())
        self.const = 0.25 * s_oo + 0.5 * s_cross + 0.5 * float(
            (tp[idx_in] + tn[idx_in]).sum()
        )
        self.lin = -0.5 * (w_cross @ e_out) + 0.5 * (tn[idx_in] - tp[idx_in])
        self.idx_in = idx_in

    def value(self, e_in: np.ndarray) -> float:
        e = e_in.astype(float)
        return self.const + float(self.lin @ e) - 0.25 * float(e @ self.w_oo @ e)

    def flip_delta(self, e_in: np.ndarray, k: int) -> float:
        """Perimeter change from flipping the sign of in-ball cell k."""
        e = e_in.astype(float)
        return -2.0 * e[k] * float(self.lin[k]) + e[k] * float(self.w_oo[k] @ e)
