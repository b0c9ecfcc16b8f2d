"""Interaction weights for the singular kernel |x-y|^(-(n+alpha)).

Cell-pair weights W_ij (the kernel integrated over C_i x C_j) are exact in
1D via a double antiderivative. In 2D touching and near pairs are refined
by recursive dyadic subdivision with midpoint leaves, and distant pairs use
a single midpoint evaluation. Tail weights integrate a cell against an
unbounded exterior region: closed forms in 1D, adaptive angular quadrature
with an exact radial integral in 2D.

For alpha >= 1 the exact integral over touching geometry diverges; the
depth-limited subdivision then acts as the regularization shared by every
energy term, so identities between terms still hold cell-by-cell.
"""

from __future__ import annotations

import hashlib
import json
import math
import os
from dataclasses import dataclass

import numpy as np
from scipy.integrate import quad

from .errors import GeometryError, IncompleteDatumError, ParameterError
from .model import (
    BallSet,
    ConeF,
    ConstantF,
    FullSet,
    Grid,
    HalfspaceSet,
    IndicatorF,
    SectorSet,
    TabulatedF,
)
from .numerics import map_blocks, ordered_sum

CACHE_VERSION = 1
NEAR_FACTOR = 2.0          # pairs closer than this many diameters get subdivided
MID_FACTOR = 6.0           # pairs out to this range get two extra split levels
DEPTH_1D = 12
DEPTH_2D = 6


def _check_alpha(alpha: float) -> None:
    if not (0.0 < alpha < 2.0):
        raise ParameterError(f"kernel exponent must lie in (0,2), got {alpha}")


# ---------------------------------------------------------------------------
# 1D closed forms

def _pair_weight_1d(a, b, c, d, alpha):
    """Exact integral of (y-x)^(-(1+alpha)) over [a,b] x [c,d] with c >= b.

    d may be +inf. Touching intervals (c == b) are fine for alpha < 1; for
    alpha >= 1 the touching integral diverges and callers must regularize.
    """
    a, b, c, d = (np.asarray(v, dtype=float) for v in (a, b, c, d))
    if alpha == 1.0:
        with np.errstate(divide="ignore", invalid="ignore"):
            ratio = np.where(
                np.isinf(d),
                (c - a) / (c - b),
                ((c - a) * (d - b)) / ((c - b) * (d - a)),
            )
            return np.log(ratio)
    p = 1.0 - alpha
    d_fin = np.where(np.isinf(d), c + 1.0, d)
    with np.errstate(divide="ignore"):
        ca = (c - a) ** p
        cb = (c - b) ** p
        dterm = np.where(np.isinf(d), 0.0, (d_fin - a) ** p - (d_fin - b) ** p)
    return (ca - cb - dterm) / (alpha * p)


def _point_piece_1d(p, a, b, alpha):
    """Integral of |p-y|^(-(1+alpha)) over [a,b] with p < a; b may be inf."""
    ta = (a - p) ** (-alpha)
    tb = 0.0 if math.isinf(b) else (b - p) ** (-alpha)
    return (ta - tb) / alpha


# ---------------------------------------------------------------------------
# subdivision / regularization for touching pairs

def _subdivided_pair_weight_1d(a, b, c, d, alpha, depth):
    """Dyadic subdivision of a touching 1D pair with midpoint leaves.

    Kept as the cross-check companion of the closed form (alpha < 1) and
    as the depth-limited regularization of the divergent touching integral
    (alpha >= 1). Cost is linear in depth: each split leaves exactly one
    touching sub-pair, the separated sub-pairs are evaluated exactly.
    """
    parts = []
    for _ in range(depth):
        am, cm = 0.5 * (a + b), 0.5 * (c + d)
        parts.append(float(_pair_weight_1d(a, am, c, cm, alpha)))
        parts.append(float(_pair_weight_1d(a, am, cm, d, alpha)))
        parts.append(float(_pair_weight_1d(am, b, cm, d, alpha)))
        a, d = am, cm
    parts.append((b - a) * (d - c) * (0.5 * (c + d) - 0.5 * (a + b)) ** (-(1.0 + alpha)))
    return ordered_sum(parts)


def _consistent_touch_1d(h: float, alpha: float) -> float:
    """Convention for the divergent 1D touching weight at alpha >= 1.

    Chosen so the mirrored second difference (2u_c - u_j - u_j') * W is
    exact on parabolas: W = h^(1-alpha) * (1.5^(2-a) - 0.5^(2-a))/(2-a).
    This keeps the energy-table operator consistent where the raw integral
    diverges; it coincides with the plain midpoint value at alpha = 1.
    """
    c = (1.5 ** (2.0 - alpha) - 0.5 ** (2.0 - alpha)) / (2.0 - alpha)
    return h ** (1.0 - alpha) * c


def _touch_children_2d(kind):
    """Child sub-pairs of a unit touching pair, classified by contact type.

    kind 'edge' is the pattern [0,1]^2 vs [1,2]x[0,1]; 'corner' is
    [0,1]^2 vs [1,2]^2. Returns (separated offsets, edge count, corner
    count) where offsets are (delta, widths) of half-scale sub-pairs.
    """
    lo_b0 = np.array([1.0, 0.0]) if kind == "edge" else np.array([1.0, 1.0])
    separated = []
    n_edge = n_corner = 0
    for oa in np.ndindex(2, 2):
        for ob in np.ndindex(2, 2):
            la = 0.5 * np.asarray(oa, dtype=float)
            lb = lo_b0 + 0.5 * np.asarray(ob, dtype=float)
            gaps = np.maximum(la - (lb + 0.5), lb - (la + 0.5))
            if (gaps > 0.0).any():
                separated.append((la + 0.25) - (lb + 0.25))
            elif np.count_nonzero(gaps == 0.0) == 1:
                n_edge += 1
            else:
                n_corner += 1
    return separated, n_edge, n_corner


def _regularized_touch_2d(kind: str, h: float, alpha: float, depth: int) -> float:
    """Touching 2D pair weight by self-similar recursion to a fixed depth.

    Separated children are exact (tent-Gauss); the touching children are
    half-scale copies of the two unit patterns, so one linear recurrence
    replaces the exponential tree. Leaves are midpoint values.
    """
    half = np.array([0.5, 0.5])
    sums = {}
    for kind_k in ("edge", "corner"):
        separated, _, _ = _touch_children_2d(kind_k)
        sums[kind_k] = ordered_sum(
            [_pair_weight_gauss_2d(delta, half, half, alpha, 12) for delta in separated]
        )
    scale = 0.5 ** (2.0 - alpha)
    e_val = 1.0 ** (-(2.0 + alpha))          # midpoint of the unit edge pattern
    c_val = math.sqrt(2.0) ** (-(2.0 + alpha))
    _, e_ne, e_nc = _touch_children_2d("edge")
    _, c_ne, c_nc = _touch_children_2d("corner")
    for _ in range(depth):
        e_next = sums["edge"] + scale * (e_ne * e_val + e_nc * c_val)
        c_next = sums["corner"] + scale * (c_ne * e_val + c_nc * c_val)
        e_val, c_val = e_next, c_next
    unit = e_val if kind == "edge" else c_val
    return h ** (2.0 - alpha) * unit


def _normalize_cell(cell):
    lo, hi = (np.atleast_1d(np.asarray(v, dtype=float)) for v in cell)
    if lo.shape != hi.shape or not (hi > lo).all():
        raise GeometryError(f"degenerate cell {cell!r}")
    return lo, hi


# -- 2D pair weights via the difference-variable (tent) reduction ----------
#
# W = integral over w = x - y of T1(w1) T2(w2) |w|^(-(2+alpha)), where T_k
# is the correlation trapezoid of the two cell projections on axis k.
# Separated pairs: the trapezoid support avoids 0, split it into patches
# where T1*T2 is bilinear and use tensor Gauss (spectrally accurate).
# Touching pairs: polar coordinates around 0; along each ray the tent is
# piecewise quadratic in t, so the radial integral is closed form and only
# the angle is quadrature.

_GAUSS_CACHE: dict = {}


def _gauss01(n: int):
    if n not in _GAUSS_CACHE:
        x, w = np.polynomial.legendre.leggauss(n)
        _GAUSS_CACHE[n] = (0.5 * (x + 1.0), 0.5 * w)
    return _GAUSS_CACHE[n]


def _axis_patches(delta, wa, wb):
    """Breakpoints of the correlation trapezoid of two widths at offset delta."""
    half_sum = 0.5 * (wa + wb)
    half_diff = 0.5 * abs(wa - wb)
    pts = [delta - half_sum, delta - half_diff, delta + half_diff, delta + half_sum]
    return [(pts[i], pts[i + 1]) for i in range(3) if pts[i + 1] > pts[i]]


def _trap_value(t, delta, wa, wb):
    return np.maximum(
        0.0, np.minimum(np.minimum(wa, wb), 0.5 * (wa + wb) - np.abs(t - delta))
    )


def _pair_weight_gauss_2d(delta, wa, wb, alpha, order):
    """Tent-reduced weight for a separated 2D pair, tensor Gauss per patch."""
    xs, ws = _gauss01(order)
    total = 0.0
    for p0 in _axis_patches(delta[0], wa[0], wb[0]):
        for p1 in _axis_patches(delta[1], wa[1], wb[1]):
            t0 = p0[0] + (p0[1] - p0[0]) * xs
            t1 = p1[0] + (p1[1] - p1[0]) * xs
            f0 = _trap_value(t0, delta[0], wa[0], wb[0])
            f1 = _trap_value(t1, delta[1], wa[1], wb[1])
            r2 = t0[:, None] ** 2 + t1[None, :] ** 2
            kern = r2 ** (-(2.0 + alpha) / 2.0)
            patch = (ws * f0) @ kern @ (ws * f1)
            total += (p0[1] - p0[0]) * (p1[1] - p1[0]) * patch
    return float(total)


def _radial_poly_integral(t0, t1, q0, q1, q2, alpha):
    """Integral of (q0 + q1 t + q2 t^2) * t^(-1-alpha) over [t0, t1].

    A segment starting at t0 = 0 only arises for touching geometry, where
    the tent vanishes at the origin; its constant coefficient is then
    roundoff and is dropped.
    """
    out = 0.0
    if q0 != 0.0 and t0 > 0.0:
        out += q0 * (t0 ** (-alpha) - t1 ** (-alpha)) / alpha
    if q1 != 0.0:
        if alpha == 1.0:
            out += q1 * math.log(t1 / t0)
        else:
            out += q1 * (t1 ** (1.0 - alpha) - t0 ** (1.0 - alpha)) / (1.0 - alpha)
    if q2 != 0.0:
        out += q2 * (t1 ** (2.0 - alpha) - t0 ** (2.0 - alpha)) / (2.0 - alpha)
    return out


def _ray_tent_integral(theta, delta, wa, wb, alpha):
    """Radial integral of tent * t^(-1-alpha) along one direction."""
    d = (math.cos(theta), math.sin(theta))
    lo_t, hi_t = 0.0, math.inf
    kinks = []
    lin = []
    for k in range(2):
        half_sum = 0.5 * (wa[k] + wb[k])
        half_diff = 0.5 * abs(wa[k] - wb[k])
        if d[k] == 0.0:
            if _trap_value(0.0, delta[k], wa[k], wb[k]) <= 0.0:
                return 0.0
            lin.append(None)
            continue
        z0 = (delta[k] - half_sum) / d[k]
        z1 = (delta[k] + half_sum) / d[k]
        lo_t = max(lo_t, min(z0, z1))
        hi_t = min(hi_t, max(z0, z1))
        for kk in ((delta[k] - half_diff) / d[k], (delta[k] + half_diff) / d[k]):
            kinks.append(kk)
        lin.append(k)
    lo_t = max(lo_t, 0.0)
    if hi_t <= lo_t:
        return 0.0
    pts = sorted({lo_t, hi_t, *[t for t in kinks if lo_t < t < hi_t]})
    total = 0.0
    for t0, t1 in zip(pts[:-1], pts[1:]):
        tm = 0.5 * (t0 + t1)
        coeffs = []
        for k in range(2):
            val = float(_trap_value(tm * d[k], delta[k], wa[k], wb[k]))
            if val <= 0.0:
                coeffs = None
                break
            if d[k] == 0.0:
                coeffs.append((val, 0.0))
                continue
            plateau = abs(tm * d[k] - delta[k]) <= 0.5 * abs(wa[k] - wb[k])
            if plateau:
                coeffs.append((val, 0.0))
            else:
                s = 1.0 if delta[k] - tm * d[k] > 0.0 else -1.0
                b = s * d[k]
                coeffs.append((val - b * tm, b))
        if coeffs is None:
            continue
        (a1, b1), (a2, b2) = coeffs
        total += _radial_poly_integral(
            t0, t1, a1 * a2, a1 * b2 + a2 * b1, b1 * b2, alpha
        )
    return total


def _pair_weight_polar_2d(delta, wa, wb, alpha, order=48):
    """Tent-reduced weight by angular quadrature with exact radial integrals.

    Used for touching pairs with alpha < 1, where the tent support reaches
    the kernel singularity but the product vanishes there.
    """
    corners = []
    for sx in (-1.0, 1.0):
        for sy in (-1.0, 1.0):
            corners.append(
                math.atan2(
                    delta[1] + sy * 0.5 * (wa[1] + wb[1]),
                    delta[0] + sx * 0.5 * (wa[0] + wb[0]),
                )
            )
    arcs = sorted(
        {c % (2.0 * math.pi) for c in corners}
        | {0.0, 0.5 * math.pi, math.pi, 1.5 * math.pi, 2.0 * math.pi}
    )
    xs, ws = _gauss01(order)
    total = 0.0
    for a0, a1 in zip(arcs[:-1], arcs[1:]):
        if a1 <= a0:
            continue
        width = a1 - a0
        for x, w in zip(xs, ws):
            total += width * w * _ray_tent_integral(a0 + width * x, delta, wa, wb, alpha)
    return total


def cell_pair_weight(cell_a, cell_b, alpha: float, tol: float = 1e-9) -> float:
    """Kernel weight of a cell pair; cells given as (lower, upper) corners.

    Identical cells use the same-cell convention (weight 0). Overlapping
    distinct cells are a geometry error. Touching pairs with alpha >= 1 are
    depth-limited regularizations of a divergent integral.
    """
    _check_alpha(alpha)
    lo_a, hi_a = _normalize_cell(cell_a)
    lo_b, hi_b = _normalize_cell(cell_b)
    n = lo_a.size
    if np.array_equal(lo_a, lo_b) and np.array_equal(hi_a, hi_b):
        return 0.0
    gaps = np.maximum(lo_a - hi_b, lo_b - hi_a)
    if (gaps < 0.0).all():
        raise GeometryError("distinct cells overlap")
    if n == 1:
        if lo_b[0] < lo_a[0]:
            lo_a, hi_a, lo_b, hi_b = lo_b, hi_b, lo_a, hi_a
        touching = hi_a[0] >= lo_b[0]
        if touching and alpha >= 1.0:
            if not np.isclose(hi_a[0] - lo_a[0], hi_b[0] - lo_b[0]):
                raise ParameterError(
                    "touching pairs with alpha >= 1 are regularized for "
                    "equal cells only"
                )
            return _consistent_touch_1d(hi_a[0] - lo_a[0], alpha)
        return float(_pair_weight_1d(lo_a[0], hi_a[0], lo_b[0], hi_b[0], alpha))
    delta = 0.5 * (lo_a + hi_a) - 0.5 * (lo_b + hi_b)
    wa, wb = hi_a - lo_a, hi_b - lo_b
    touching = bool((gaps <= 0.0).all())
    if touching:
        if alpha >= 1.0:
            h = wa[0]
            square = np.allclose(wa, h) and np.allclose(wb, h)
            adelta = np.sort(np.abs(delta))
            if square and np.allclose(adelta, [0.0, h]):
                return _regularized_touch_2d("edge", h, alpha, 0)
            if square and np.allclose(adelta, [h, h]):
                return _regularized_touch_2d("corner", h, alpha, 0)
            raise ParameterError(
                "touching pairs with alpha >= 1 are regularized for equal "
                "grid-aligned cells only"
            )
        return _pair_weight_polar_2d(delta, wa, wb, alpha)
    w1 = _pair_weight_gauss_2d(delta, wa, wb, alpha, 12)
    w2 = _pair_weight_gauss_2d(delta, wa, wb, alpha, 18)
    if abs(w2 - w1) > tol * max(abs(w2), 1e-300):
        w2 = _pair_weight_gauss_2d(delta, wa, wb, alpha, 32)
    return w2


# ---------------------------------------------------------------------------
# exterior regions

@dataclass(frozen=True)
class Region1D:
    """Disjoint union of open intervals (a, b); a may be -inf, b may be inf."""

    pieces: tuple

    def is_empty(self) -> bool:
        return len(self.pieces) == 0


@dataclass(frozen=True)
class _HalfplaneTerm:
    normal: tuple
    offset: float


@dataclass(frozen=True)
class _BallTerm:
    center: tuple
    radius: float


@dataclass(frozen=True)
class _SectorTerm:
    angle_lo: float
    angle_hi: float  # aperture at most pi/2 after splitting


@dataclass(frozen=True)
class Region2D:
    """Signed combination of primitives, implicitly intersected with the
    complement of the box [-box_half, box_half]^2."""

    box_half: float
    terms: tuple  # of (coef, primitive or None for the whole plane)

    def is_empty(self) -> bool:
        return len(self.terms) == 0


def empty_region(n: int):
    return Region1D(()) if n == 1 else Region2D(0.0, ())


def interval_region(a: float, b: float) -> Region1D:
    return Region1D(((float(a), float(b)),))


def ray_region(a: float, side: int = 1) -> Region1D:
    """(a, inf) for side=+1, (-inf, a) for side=-1."""
    if side > 0:
        return Region1D(((float(a), math.inf),))
    return Region1D(((-math.inf, float(a)),))


def _split_sector(a0: float, a1: float):
    a0, a1 = float(a0), float(a1)
    while a1 <= a0:
        a1 += 2.0 * math.pi
    width = a1 - a0
    parts = max(1, int(math.ceil(width / (0.5 * math.pi - 1e-9))))
    step = width / parts
    return [_SectorTerm(a0 + k * step, a0 + (k + 1) * step) for k in range(parts)]


def _set_breakpoints_1d(set_spec):
    if isinstance(set_spec, HalfspaceSet):
        nu = set_spec.normal[0]
        return [set_spec.offset / nu] if nu != 0.0 else []
    if isinstance(set_spec, BallSet):
        c = set_spec.center[0]
        return [c - set_spec.radius, c + set_spec.radius]
    if isinstance(set_spec, SectorSet):
        return [0.0]
    if hasattr(set_spec, "edges"):
        return [e for e in set_spec.edges] + [-e for e in set_spec.edges]
    return []


def _set_regions_1d(set_spec, L: float):
    brk = sorted({b for b in _set_breakpoints_1d(set_spec) if abs(b) > L})
    right = [L] + [b for b in brk if b > L] + [math.inf]
    left = [-math.inf] + [b for b in brk if b < -L] + [-L]
    pos, neg = [], []
    for lo, hi in list(zip(right[:-1], right[1:])) + list(zip(left[:-1], left[1:])):
        if math.isinf(hi):
            probe = max(2.0 * lo, lo + 1.0)
        elif math.isinf(lo):
            probe = min(2.0 * hi, hi - 1.0)
        else:
            probe = 0.5 * (lo + hi)
        sign = int(set_spec.membership(np.array([[probe]]))[0])
        (pos if sign > 0 else neg).append((lo, hi))
    return Region1D(tuple(pos)), Region1D(tuple(neg))


def _set_terms_2d(set_spec):
    if isinstance(set_spec, FullSet):
        return [(1.0, None)] if set_spec.sign > 0 else []
    if isinstance(set_spec, HalfspaceSet):
        return [(1.0, _HalfplaneTerm(tuple(set_spec.normal), set_spec.offset))]
    if isinstance(set_spec, BallSet):
        ball = _BallTerm(tuple(set_spec.center), set_spec.radius)
        if set_spec.inside_sign > 0:
            return [(1.0, ball)]
        return [(1.0, None), (-1.0, ball)]
    if isinstance(set_spec, SectorSet):
        terms = []
        for a0, a1 in set_spec.sectors:
            terms.extend((1.0, chunk) for chunk in _split_sector(a0, a1))
        return terms
    raise IncompleteDatumError(f"no 2D exterior region for set {set_spec!r}")


def _complement_terms(terms):
    return tuple([(1.0, None)] + [(-c, t) for c, t in terms])


def set_exterior_regions(set_spec, grid: Grid):
    """Regions (E0 minus box, E0 complement minus box) for a phase set."""
    L = grid.spec.half_width
    if grid.dimension == 1:
        return _set_regions_1d(set_spec, L)
    pos = tuple(_set_terms_2d(set_spec))
    return Region2D(L, pos), Region2D(L, _complement_terms(pos))


# ---------------------------------------------------------------------------
# 2D angular quadrature with exact radial integrals

def _box_exit(px, py, dx, dy, L):
    with np.errstate(divide="ignore"):
        tx = np.where(dx > 0.0, (L - px) / dx, np.where(dx < 0.0, (-L - px) / dx, np.inf))
        ty = np.where(dy > 0.0, (L - py) / dy, np.where(dy < 0.0, (-L - py) / dy, np.inf))
    return np.minimum(tx, ty)


def _term_interval(p, dx, dy, t_exit, term):
    """Radial interval of {p + t d : t > t_exit} inside one primitive.

    p has shape (P, 2); dx, dy have shape (T,); everything broadcasts to
    (P, T) so a batch of points shares one set of angular nodes.
    """
    lo = np.broadcast_to(t_exit, t_exit.shape).copy()
    hi = np.full_like(lo, np.inf)
    if term is None:
        return lo, hi
    if isinstance(term, _HalfplaneTerm):
        nx, ny = term.normal
        dn = (dx * nx + dy * ny)[None, :]
        pn = (p[:, 0] * nx + p[:, 1] * ny)[:, None]
        with np.errstate(divide="ignore", invalid="ignore"):
            tau = (term.offset - pn) / dn
        lo = np.where(dn > 0.0, np.maximum(lo, tau), lo)
        hi = np.where(dn < 0.0, np.minimum(hi, tau), hi)
        empty = (dn == 0.0) & (pn <= term.offset)
        hi = np.where(empty, lo, hi)
        return lo, hi
    if isinstance(term, _BallTerm):
        wx = term.center[0] - p[:, 0][:, None]
        wy = term.center[1] - p[:, 1][:, None]
        b = dx[None, :] * wx + dy[None, :] * wy
        disc = b * b - (wx * wx + wy * wy - term.radius**2)
        root = np.sqrt(np.maximum(disc, 0.0))
        lo = np.maximum(lo, b - root)
        hi = np.where(disc > 0.0, np.minimum(hi, b + root), lo)
        return lo, hi
    if isinstance(term, _SectorTerm):
        for nrm in (
            (-math.sin(term.angle_lo), math.cos(term.angle_lo)),
            (math.sin(term.angle_hi), -math.cos(term.angle_hi)),
        ):
            l2, h2 = _term_interval(p, dx, dy, t_exit, _HalfplaneTerm(nrm, 0.0))
            lo, hi = np.maximum(lo, l2), np.minimum(hi, h2)
        return lo, hi
    raise GeometryError(f"unknown region term {term!r}")


def _angular_batch(points, weights, region: Region2D, radial_cdf,
                   tol: float = 1e-8, n_start: int = 128,
                   n_max: int = 4096, per_point: bool = False):
    """Weighted sum of radially-exact region integrals from many points.

    radial_cdf(t) is the remaining-mass integral from t to infinity, so a
    ray piece contributes radial_cdf(lo) - radial_cdf(hi). One adaptively
    doubled midpoint rule in the angle serves the whole batch; the
    relative stopping test on the weighted total is invariant under
    rescaling the geometry. With per_point the per-point integrals are
    returned (their accuracy tracks the batch total).
    """
    points = np.atleast_2d(np.asarray(points, dtype=float))
    weights = np.asarray(weights, dtype=float)
    if region.is_empty():
        return np.zeros(points.shape[0]) if per_point else 0.0
    L = region.box_half
    if np.any(np.abs(points) >= L):
        raise GeometryError("angular quadrature points must lie inside the box")
    prev = None
    n_theta = n_start
    while True:
        theta = (np.arange(n_theta) + 0.5) * (2.0 * math.pi / n_theta)
        dx, dy = np.cos(theta), np.sin(theta)
        t_exit = _box_exit(points[:, 0][:, None], points[:, 1][:, None],
                           dx[None, :], dy[None, :], L)
        acc = np.zeros_like(t_exit)
        for coef, term in region.terms:
            lo, hi = _term_interval(points, dx, dy, t_exit, term)
            good = hi > lo
            if not good.any():
                continue
            vals = np.zeros_like(t_exit)
            lo_v = radial_cdf(lo[good])
            hi_g = hi[good]
            hi_v = np.zeros_like(lo_v)
            fin = np.isfinite(hi_g)
            if fin.any():
                hi_v[fin] = radial_cdf(hi_g[fin])
            vals[good] = lo_v - hi_v
            acc += coef * vals
        row = acc.sum(axis=1) * (2.0 * math.pi / n_theta)
        total = float(weights @ row)
        if prev is not None and (
            abs(total - prev) <= tol * max(abs(total), 1e-300) or n_theta >= n_max
        ):
            return row if per_point else total
        prev = total
        n_theta *= 2


def angular_region_integral(p, region: Region2D, radial_cdf, tol: float = 1e-8,
                            n_start: int = 128, n_max: int = 4096) -> float:
    """Region integral of a radially-exact density seen from one point."""
    return _angular_batch(np.asarray(p, dtype=float)[None, :], np.ones(1),
                          region, radial_cdf, tol=tol, n_start=n_start,
                          n_max=n_max)


def point_region_integral(p, region, alpha: float, tol: float = 1e-8) -> float:
    """Integral of |p-y|^(-(n+alpha)) over an exterior region."""
    _check_alpha(alpha)
    if isinstance(region, Region1D):
        if region.is_empty():
            return 0.0
        px = float(np.atleast_1d(p)[0])
        parts = []
        for a, b in region.pieces:
            if a <= px <= b:
                raise GeometryError("region overlaps the evaluation point")
            if px < a:
                parts.append(_point_piece_1d(px, a, b, alpha))
            else:
                parts.append(_point_piece_1d(-px, -b, -a, alpha))
        return ordered_sum(parts)
    return angular_region_integral(p, region, lambda t: t ** (-alpha) / alpha, tol=tol)


def _regularized_ray_1d(e, f, a, b, alpha):
    """Touching cell-ray weight, alpha >= 1: dyadic slabs toward the contact
    point f == a, closed form per separated slab, midpoint on the sliver."""
    parts = []
    w = f - e
    for k in range(DEPTH_1D):
        slab_lo = f - w * 2.0 ** (-k)
        slab_hi = f - w * 2.0 ** (-k - 1)
        parts.append(float(_pair_weight_1d(slab_lo, slab_hi, a, b, alpha)))
    sliver_lo = f - w * 2.0 ** (-DEPTH_1D)
    mid = 0.5 * (sliver_lo + f)
    parts.append((f - sliver_lo) * _point_piece_1d(mid, a, b, alpha))
    return ordered_sum(parts)


def tail_weight(cell, region, alpha: float, tol: float = 1e-8) -> float:
    """Kernel weight of a cell against an unbounded exterior region.

    1D is closed form (exact out to infinity); a region touching the cell
    with alpha >= 1 uses the same depth-limited regularization as touching
    pairs. 2D subdivides the cell toward the box boundary and evaluates the
    angular-radial integral at subcell centers.
    """
    _check_alpha(alpha)
    lo, hi = _normalize_cell(cell)
    n = lo.size
    if n == 1:
        if not isinstance(region, Region1D):
            raise GeometryError("region dimensionality does not match the cell")
        if region.is_empty():
            return 0.0
        e, f = lo[0], hi[0]
        parts = []
        snap = 1e-9 * (f - e)
        for a, b in region.pieces:
            overlap = min(b, f) - max(a, e)
            if overlap > snap:
                raise GeometryError("region overlaps the cell")
            if overlap > 0.0:
                # roundoff overhang of a cell edge against the box boundary
                if a <= e:
                    b = min(b, e)
                else:
                    a = max(a, f)
            if a >= f:
                if a == f and alpha >= 1.0:
                    parts.append(_regularized_ray_1d(e, f, a, b, alpha))
                else:
                    parts.append(float(_pair_weight_1d(e, f, a, b, alpha)))
            else:
                if b == e and alpha >= 1.0:
                    parts.append(_regularized_ray_1d(-f, -e, -b, -a, alpha))
                else:
                    parts.append(float(_pair_weight_1d(-f, -e, -b, -a, alpha)))
        return ordered_sum(parts)
    if not isinstance(region, Region2D):
        raise GeometryError("region dimensionality does not match the cell")
    if region.is_empty():
        return 0.0
    return _cell_region_2d(lo, hi, region, alpha, tol, DEPTH_2D)


def _cell_leaves_2d(lo, hi, box_half, depth):
    """Midpoint leaves of the boundary-adaptive cell subdivision."""
    stack = [(lo, hi, depth)]
    leaf_pts, leaf_wts = [], []
    while stack:
        clo, chi, d = stack.pop()
        ctr = 0.5 * (clo + chi)
        size = chi - clo
        diam = float(np.linalg.norm(size))
        edge_dist = float(box_half - np.max(np.abs(ctr)))
        if d == 0 or edge_dist >= NEAR_FACTOR * diam:
            leaf_pts.append(ctr)
            leaf_wts.append(float(np.prod(size)))
        else:
            for off in np.ndindex(2, 2):
                o = np.asarray(off, dtype=float)
                stack.append((clo + 0.5 * size * o, clo + 0.5 * size * (o + 1.0), d - 1))
    return np.asarray(leaf_pts), np.asarray(leaf_wts)


def _cell_region_2d(lo, hi, region, alpha, tol, depth):
    """Subdivide the cell toward the box boundary, then evaluate every leaf
    midpoint in one weighted angular pass."""
    pts, wts = _cell_leaves_2d(lo, hi, region.box_half, depth)
    return _angular_batch(pts, wts, region,
                          lambda t: t ** (-alpha) / alpha, tol=tol)


# ---------------------------------------------------------------------------
# kernel table assembly

def _offsets_1d(m: int, h: float, alpha: float) -> np.ndarray:
    offs = np.zeros(m)
    if m >= 2:
        if alpha >= 1.0:
            offs[1] = _consistent_touch_1d(h, alpha)
        else:
            offs[1] = float(_pair_weight_1d(0.0, h, h, 2.0 * h, alpha))
    if m >= 3:
        ks = np.arange(2, m, dtype=float)
        offs[2:] = _pair_weight_1d(0.0, h, ks * h, (ks + 1.0) * h, alpha)
    return offs


def _offsets_2d(m: int, h: float, alpha: float) -> np.ndarray:
    offs = np.zeros((m, m))
    cell = (np.array([0.0, 0.0]), np.array([h, h]))
    widths = np.array([h, h])

    def row(dx: int) -> np.ndarray:
        vals = np.zeros(m)
        for dy in range(dx, m):
            if dx == 0 and dy == 0:
                continue
            delta = np.array([dx * h, dy * h])
            if max(dx, dy) <= 1:  # touching offsets (0,1) and (1,1)
                if alpha >= 1.0:
                    kind = "edge" if min(dx, dy) == 0 else "corner"
                    vals[dy] = _regularized_touch_2d(kind, h, alpha, 0)
                else:
                    vals[dy] = _pair_weight_polar_2d(delta, widths, widths, alpha)
            else:
                vals[dy] = _pair_weight_gauss_2d(delta, widths, widths, alpha, 12)
        return vals

    rows = map_blocks(row, list(range(m)))
    for dx, vals in enumerate(rows):
        offs[dx, dx:] = vals[dx:]
        offs[dx:, dx] = vals[dx:]
    return offs


def _cache_header(grid: Grid, alpha: float, tol: float) -> dict:
    spec = grid.spec
    return {
        "version": CACHE_VERSION,
        "n": spec.dimension,
        "m": spec.cells_per_side,
        "L": spec.half_width,
        "alpha": alpha,
        "tol": tol,
    }


def _cache_path(cache_dir: str, header: dict) -> str:
    blob = json.dumps(header, sort_keys=True).encode()
    digest = hashlib.sha256(blob).hexdigest()[:16]
    return os.path.join(cache_dir, f"ktable-{digest}.npz")


def assemble_table(grid: Grid, alpha: float, tol: float = 1e-9,
                   cache_dir: str | None = None) -> KernelTable:
    """All unordered pair weights of the grid, deduplicated by offset.

    Deterministic regardless of worker count: rows are computed in fixed
    blocks and merged in index order. With ``cache_dir`` the offset array
    is cached on disk keyed by (n, m, L, alpha, tol, version).
    """
    _check_alpha(alpha)
    header = _cache_header(grid, alpha, tol)
    if cache_dir is not None:
        path = _cache_path(cache_dir, header)
        if os.path.exists(path):
            with np.load(path, allow_pickle=False) as payload:
                stored = json.loads(str(payload["header"]))
                if stored == header:
                    return KernelTable(grid, alpha, tol, payload["offsets"].copy())
    m, h = grid.spec.cells_per_side, grid.h
    if grid.dimension == 1:
        offsets = _offsets_1d(m, h, alpha)
    else:
        offsets = _offsets_2d(m, h, alpha)
    if cache_dir is not None:
        os.makedirs(cache_dir, exist_ok=True)
        np.savez(
            _cache_path(cache_dir, header),
            header=json.dumps(header, sort_keys=True),
            offsets=offsets,
        )
    return KernelTable(grid, alpha, tol, offsets)


class KernelTable:
    """Pair weights for one exponent on one grid, plus memoized tails.

    The grid is uniform, so pair weights depend only on the index offset;
    the dense W matrix is served from the offset table. The same-cell
    weight W_ii is stored as 0 (piecewise-constant convention).
    """

    def __init__(self, grid: Grid, alpha: float, tol: float, offset_weights: np.ndarray):
        self.grid = grid
        self.alpha = alpha
        self.tol = tol
        self.offset_weights = offset_weights
        self.offset_weights.setflags(write=False)
        self._tail_cache: dict = {}
        self._dense = None

    def pair_weight(self, i: int, j: int) -> float:
        if self.grid.dimension == 1:
            return float(self.offset_weights[abs(i - j)])
        m = self.grid.spec.cells_per_side
        ix, iy = divmod(i, m)
        jx, jy = divmod(j, m)
        return float(self.offset_weights[abs(ix - jx), abs(iy - jy)])

    def dense_matrix(self) -> np.ndarray:
        if self._dense is None:
            m = self.grid.spec.cells_per_side
            ax = np.arange(m)
            didx = np.abs(ax[:, None] - ax[None, :])
            if self.grid.dimension == 1:
                dense = self.offset_weights[didx]
            else:
                dense = self.offset_weights[
                    didx[:, None, :, None], didx[None, :, None, :]
                ].reshape(m * m, m * m)
            dense.setflags(write=False)
            self._dense = dense
        return self._dense

    def region_tails(self, region) -> np.ndarray:
        """Tail weight of every cell against one exterior region."""
        if region not in self._tail_cache:
            g = self.grid
            half = 0.5 * g.h
            if g.dimension == 2 and isinstance(region, Region2D):
                vals = self._region_tails_2d_batched(region)
            else:

                def block(idx):
                    out = np.empty(len(idx))
                    for k, i in enumerate(idx):
                        lo = g.centers[i] - half
                        hi = g.centers[i] + half
                        out[k] = tail_weight((lo, hi), region, self.alpha,
                                             tol=self.tol)
                    return out

                chunks = np.array_split(
                    np.arange(g.n_cells), max(1, g.n_cells // 256)
                )
                vals = np.concatenate(map_blocks(block, chunks))
            vals.setflags(write=False)
            self._tail_cache[region] = vals
        return self._tail_cache[region]

    def _region_tails_2d_batched(self, region) -> np.ndarray:
        """All-cell 2D tails in chunked weighted angular passes."""
        g = self.grid
        half = 0.5 * g.h
        if region.is_empty():
            return np.zeros(g.n_cells)
        pts, wts, owner = [], [], []
        for i in range(g.n_cells):
            lo = g.centers[i] - half
            hi = g.centers[i] + half
            p, w = _cell_leaves_2d(lo, hi, region.box_half, DEPTH_2D)
            pts.append(p)
            wts.append(w)
            owner.append(np.full(p.shape[0], i))
        pts = np.concatenate(pts)
        wts = np.concatenate(wts)
        owner = np.concatenate(owner)
        tol = max(self.tol, 1e-8)
        cdf = lambda t: t ** (-self.alpha) / self.alpha
        per_point = np.empty(pts.shape[0])
        chunk = 2048
        for start in range(0, pts.shape[0], chunk):
            sl = slice(start, start + chunk)
            per_point[sl] = _angular_batch(pts[sl], wts[sl], region, cdf,
                                           tol=tol, per_point=True)
        return np.bincount(owner, weights=wts * per_point, minlength=g.n_cells)

    def set_tails(self, set_spec):
        """(T+, T-): tails against E0 minus box and E0-complement minus box."""
        pos, neg = set_exterior_regions(set_spec, self.grid)
        return self.region_tails(pos), self.region_tails(neg)

    def function_tails(self, func_spec, need_m2: bool = True):
        """Moment triple (T0, M1, M2) of the datum over the box exterior.

        T0_i integrates the bare kernel over C_i x box^c, M1_i the datum
        against the kernel, M2_i the squared datum. Every supported datum
        reduces to this triple, which is all the energy and the operator
        need of the far field. M2 can be skipped (operator use): square
        moments of a growing profile may diverge while M1 still exists.
        """
        key = ("moments", func_spec, bool(need_m2))
        if key in self._tail_cache:
            return self._tail_cache[key]
        if isinstance(func_spec, ConstantF):
            pos, neg = set_exterior_regions(FullSet(1), self.grid)
            t0 = self.region_tails(pos) + self.region_tails(neg)
            v = func_spec.value
            out = (t0, v * t0, v * v * t0)
        elif isinstance(func_spec, IndicatorF):
            tp, tn = self.set_tails(func_spec.set_spec)
            a = func_spec.amp
            out = (tp + tn, a * (tp - tn), a * a * (tp + tn))
        elif isinstance(func_spec, TabulatedF):
            out = self._tabulated_moments(func_spec)
        elif isinstance(func_spec, ConeF):
            out = self._cone_moments(func_spec, need_m2)
        else:
            raise IncompleteDatumError(
                f"datum {func_spec!r} has no analytic tail for energy terms"
            )
        for arr in out:
            if arr is not None:
                arr.setflags(write=False)
        self._tail_cache[key] = out
        return out

    def _tabulated_moments(self, func: TabulatedF):
        g = self.grid
        if g.dimension != 1:
            raise IncompleteDatumError("tabulated data supported in 1D only")
        if func.far_value is None:
            raise IncompleteDatumError(
                "tabulated datum lacks coverage beyond its last shell"
            )
        pieces = []
        edges = list(func.edges)
        for k in range(len(edges) - 1):
            pieces.append((func.right[k], interval_region(edges[k], edges[k + 1])))
            pieces.append((func.left[k], interval_region(-edges[k + 1], -edges[k])))
        pieces.append((func.far_value, ray_region(edges[-1], +1)))
        pieces.append((func.far_value, ray_region(-edges[-1], -1)))
        t0 = np.zeros(g.n_cells)
        m1 = np.zeros(g.n_cells)
        m2 = np.zeros(g.n_cells)
        for val, reg in pieces:
            t = self.region_tails(reg)
            t0 = t0 + t
            m1 = m1 + val * t
            m2 = m2 + val * val * t
        return t0, m1, m2

    def _cone_moments(self, func: ConeF, need_m2: bool = True):
        """Datum moments for a homogeneous profile, by adaptive quadrature.

        Integrability requires degree < alpha for M1 and 2*degree < alpha
        for M2 (otherwise the far field is not energy-admissible).
        """
        g = self.grid
        if g.dimension != 1:
            raise IncompleteDatumError("homogeneous-profile tails supported in 1D only")
        kappa = func.degree
        alpha = self.alpha
        if kappa >= alpha:
            raise IncompleteDatumError(
                f"profile degree {kappa} has no kernel moment at exponent {alpha} "
                f"(needs degree < alpha)"
            )
        if need_m2 and 2.0 * kappa >= alpha:
            raise IncompleteDatumError(
                f"profile degree {kappa} is not square-integrable against the "
                f"exponent-{alpha} kernel tail (needs 2*degree < alpha)"
            )
        L = g.spec.half_width
        h = g.h
        gplus, gminus = func.profile
        amp = func.amp
        both_rays = Region1D(((L, math.inf), (-math.inf, -L)))
        t0 = self.region_tails(both_rays).copy()
        m1 = np.zeros(g.n_cells)
        m2 = np.zeros(g.n_cells)
        for i in range(g.n_cells):
            e = g.centers[i, 0] - 0.5 * h
            f = g.centers[i, 0] + 0.5 * h
            for gval, lo_ref, hi_ref in ((gplus, e, f), (gminus, -f, -e)):
                if gval == 0.0:
                    continue
                # reflected cell for the left ray; exterior variable t > L
                touching = hi_ref >= L - 1e-12 * L
                if touching and alpha >= 1.0:
                    # depth-limited sliver, matching the regularized T0
                    delta = (hi_ref - lo_ref) * 2.0 ** (-DEPTH_1D)
                    hi_eff = hi_ref - delta
                    mid = hi_ref - 0.5 * delta

                    def kern(t, lo=lo_ref, hi=hi_eff, d=delta, m=mid):
                        base = ((t - hi) ** (-alpha) - (t - lo) ** (-alpha)) / alpha
                        return base + d * (t - m) ** (-1.0 - alpha)
                else:
                    def kern(t, lo=lo_ref, hi=hi_ref):
                        return ((t - hi) ** (-alpha) - (t - lo) ** (-alpha)) / alpha

                def moment(power):
                    # quad's roundoff-stall warning on the decaying far part
                    # is benign at this tolerance; full_output suppresses it
                    coef = (amp * gval) ** power
                    fn = lambda t: coef * t ** (kappa * power) * kern(t)
                    near = quad(fn, L, L + 2.0 * h, epsabs=0.0, epsrel=1e-10,
                                limit=200, full_output=1)
                    far = quad(fn, L + 2.0 * h, math.inf, epsabs=0.0,
                               epsrel=1e-10, limit=400, full_output=1)
                    return near[0] + far[0]

                m1[i] += moment(1)
                if need_m2:
                    m2[i] += moment(2)
        return t0, m1, (m2 if need_m2 else None)
