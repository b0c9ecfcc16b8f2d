import math

import numpy as np
import pytest

from fracfree import (
    GeometryError,
    GridSpec,
    ParameterError,
    assemble_table,
    build_grid,
    cell_pair_weight,
    tail_weight,
)
from fracfree.numerics import set_worker_cap
from fracfree.quadrature import (
    Region1D,
    _pair_weight_polar_2d,
    _subdivided_pair_weight_1d,
    interval_region,
    ray_region,
    set_exterior_regions,
)
from fracfree.model import BallSet, FullSet, HalfspaceSet

C1 = ((0.0,), (1.0,))
C2 = ((1.0,), (2.0,))


def test_touching_golden_value():
    # closed form: 8 - 4*sqrt(2)
    w = cell_pair_weight(C1, C2, 0.5)
    assert w == pytest.approx(8.0 - 4.0 * math.sqrt(2.0), rel=1e-12)


def test_far_pair_value_and_midpoint_consistency():
    w = cell_pair_weight(C1, ((10.0,), (11.0,)), 0.5)
    # exact value is within 0.5% of the bare midpoint estimate 10^-1.5
    assert w == pytest.approx(10.0**-1.5, rel=5e-3)


def test_pair_symmetry():
    for alpha in (0.3, 0.5, 1.0, 1.5):
        a = cell_pair_weight(C1, ((3.0,), (4.0,)), alpha)
        b = cell_pair_weight(((3.0,), (4.0,)), C1, alpha)
        assert a == b


def test_same_cell_convention_and_errors():
    assert cell_pair_weight(C1, C1, 0.5) == 0.0
    with pytest.raises(GeometryError):
        cell_pair_weight(C1, ((0.5,), (1.5,)), 0.5)
    with pytest.raises(ParameterError):
        cell_pair_weight(C1, C2, 2.5)
    with pytest.raises(ParameterError):
        cell_pair_weight(C1, C2, -0.1)


def test_tail_golden_value():
    t = tail_weight(C1, ray_region(2.0, +1), 0.5)
    assert t == pytest.approx(4.0 * math.sqrt(2.0) - 4.0, rel=1e-12)


def test_tail_empty_region_is_zero():
    assert tail_weight(C1, Region1D(()), 0.5) == 0.0


def test_tail_monotone_under_translation():
    prev = math.inf
    for a in (2.0, 3.0, 5.0, 9.0):
        t = tail_weight(C1, ray_region(a, +1), 0.5)
        assert t < prev
        prev = t


def test_tail_overlap_is_geometry_error():
    with pytest.raises(GeometryError):
        tail_weight(C1, ray_region(0.5, +1), 0.5)


def test_1d_subdivision_cross_checks_closed_form():
    # the depth-d midpoint regularization approaches the closed form at the
    # documented geometric rate 2^(-depth*(1-alpha))
    for alpha in (0.3, 0.5, 0.7):
        exact = cell_pair_weight(C1, C2, alpha)
        sub = _subdivided_pair_weight_1d(0.0, 1.0, 1.0, 2.0, alpha, 12)
        bound = 2.0 * 2.0 ** (-12 * (1.0 - alpha)) * exact
        assert abs(sub - exact) <= bound


def test_2d_separated_pair_against_frozen_oracle():
    # adaptive 4D quadrature oracle (scipy.integrate.dblquad nested), frozen:
    # cells [0,1]^2 and [2,3]x[0,1], alpha = 0.5
    oracle = 0.20328767214612803
    w = cell_pair_weight(((0.0, 0.0), (1.0, 1.0)), ((2.0, 0.0), (3.0, 1.0)), 0.5)
    assert w == pytest.approx(oracle, rel=1e-10)


def test_2d_touching_pairs_against_frozen_oracle():
    # tent-reduced scipy.dblquad oracles for touching unit cells
    cases = {
        (0.3, "edge"): 2.596530240877,
        (0.5, "edge"): 3.647087515503,
        (0.9, "edge"): 19.379525542461,
        (0.3, "corner"): 0.659904814657,
        (0.5, "corner"): 0.676008398686,
        (0.9, "corner"): 0.756731413012,
    }
    for (alpha, kind), oracle in cases.items():
        if kind == "edge":
            w = cell_pair_weight(((0.0, 0.0), (1.0, 1.0)), ((1.0, 0.0), (2.0, 1.0)), alpha)
        else:
            w = cell_pair_weight(((0.0, 0.0), (1.0, 1.0)), ((1.0, 1.0), (2.0, 2.0)), alpha)
        assert w == pytest.approx(oracle, rel=5e-8), (alpha, kind)


def test_2d_scaling_identity():
    r = 2.0
    for alpha in (0.5, 0.75):
        w1 = cell_pair_weight(((0.0, 0.0), (1.0, 1.0)), ((3.0, 2.0), (4.0, 3.0)), alpha)
        w2 = cell_pair_weight(
            ((0.0, 0.0), (r, r)), ((3.0 * r, 2.0 * r), (4.0 * r, 3.0 * r)), alpha
        )
        assert abs(w2 - r ** (2.0 - alpha) * w1) <= 1e-12 * abs(w2)


def test_1d_scaling_identity_touching():
    r = 4.0
    for alpha in (0.25, 0.5, 1.2):
        w1 = cell_pair_weight(C1, C2, alpha)
        w2 = cell_pair_weight(((0.0,), (r,)), ((r,), (2 * r,)), alpha)
        assert abs(w2 - r ** (1.0 - alpha) * w1) <= 1e-12 * abs(w2)


def test_assemble_table_counts_and_symmetry():
    g = build_grid(GridSpec(1, 1.0, 4, 64.0, 1.0))
    table = assemble_table(g, 0.5)
    # 10 unordered weights for 4 cells, symmetric by construction
    n = g.n_cells
    pairs = [(i, j) for i in range(n) for j in range(i, n)]
    assert len(pairs) == 10
    for i, j in pairs:
        assert table.pair_weight(i, j) == table.pair_weight(j, i)
        if i != j:
            assert table.pair_weight(i, j) > 0.0
        else:
            assert table.pair_weight(i, j) == 0.0


def test_dense_matrix_matches_direct_weights():
    g = build_grid(GridSpec(1, 1.0, 8, 64.0, 1.0))
    table = assemble_table(g, 0.6)
    dense = table.dense_matrix()
    for i in (0, 3, 7):
        for j in (0, 2, 5):
            direct = cell_pair_weight(
                (g.centers[i] - g.h / 2, g.centers[i] + g.h / 2),
                (g.centers[j] - g.h / 2, g.centers[j] + g.h / 2),
                0.6,
            )
            assert dense[i, j] == pytest.approx(direct, rel=1e-12, abs=1e-300)


def test_assemble_table_thread_count_invariance():
    g = build_grid(GridSpec(2, 1.0, 6, 64.0, 1.0))
    set_worker_cap(1)
    t1 = assemble_table(g, 0.5)
    set_worker_cap(4)
    t4 = assemble_table(g, 0.5)
    set_worker_cap(1)
    assert np.array_equal(t1.offset_weights, t4.offset_weights)


def test_table_scaled_grid_weights():
    # W(r C_i, r C_j) = r^(n - alpha) W(C_i, C_j) within 1e-12
    alpha = 0.5
    g1 = build_grid(GridSpec(1, 1.0, 16, 64.0, 1.0))
    g2 = build_grid(GridSpec(1, 2.0, 16, 128.0, 2.0))
    t1 = assemble_table(g1, alpha)
    t2 = assemble_table(g2, alpha)
    ratio = 2.0 ** (1.0 - alpha)
    assert np.allclose(t2.offset_weights[1:], ratio * t1.offset_weights[1:], rtol=1e-12)


def test_table_cache_roundtrip(tmp_path):
    g = build_grid(GridSpec(1, 1.0, 16, 64.0, 1.0))
    t1 = assemble_table(g, 0.5, cache_dir=str(tmp_path))
    files = list(tmp_path.glob("ktable-*.npz"))
    assert len(files) == 1
    t2 = assemble_table(g, 0.5, cache_dir=str(tmp_path))
    assert np.array_equal(t1.offset_weights, t2.offset_weights)
    # different exponent gets its own entry
    assemble_table(g, 0.7, cache_dir=str(tmp_path))
    assert len(list(tmp_path.glob("ktable-*.npz"))) == 2
    # header is validated, not trusted blindly
    import json
    with np.load(files[0]) as payload:
        header = json.loads(str(payload["header"]))
    assert header["alpha"] == 0.5 and header["m"] == 16 and header["version"] >= 1


def test_table_cache_version_bump_invalidates(tmp_path, monkeypatch):
    g = build_grid(GridSpec(1, 1.0, 8, 64.0, 1.0))
    t1 = assemble_table(g, 0.5, cache_dir=str(tmp_path))
    from fracfree import quadrature as q

    monkeypatch.setattr(q, "CACHE_VERSION", q.CACHE_VERSION + 1)
    t2 = assemble_table(g, 0.5, cache_dir=str(tmp_path))  # recomputes, re-stores
    assert np.array_equal(t1.offset_weights, t2.offset_weights)
    assert len(list(tmp_path.glob("ktable-*.npz"))) == 2


def test_set_exterior_regions_halfspace():
    g = build_grid(GridSpec(1, 1.0, 8, 64.0, 1.0))
    pos, neg = set_exterior_regions(HalfspaceSet((1.0,), 0.0), g)
    assert pos.pieces == ((1.0, math.inf),)
    assert neg.pieces == ((-math.inf, -1.0),)


def test_set_exterior_regions_ball_split():
    g = build_grid(GridSpec(1, 1.0, 8, 64.0, 1.0))
    pos, neg = set_exterior_regions(BallSet((0.0,), 2.0), g)
    assert pos.pieces == ((1.0, 2.0), (-2.0, -1.0))
    assert neg.pieces == ((2.0, math.inf), (-math.inf, -2.0))


def test_full_set_regions():
    g = build_grid(GridSpec(1, 1.0, 8, 64.0, 1.0))
    pos, neg = set_exterior_regions(FullSet(1), g)
    assert pos.pieces == ((1.0, math.inf), (-math.inf, -1.0))
    assert neg.is_empty()


def test_tolerance_refinement_is_stable():
    # halving tol never changes a weight by more than the previous tol
    cell_a = ((0.0, 0.0), (1.0, 1.0))
    cell_b = ((2.0, 1.0), (3.0, 2.0))
    for alpha in (0.5, 1.2):
        tol = 1e-6
        prev = cell_pair_weight(cell_a, cell_b, alpha, tol=tol)
        for _ in range(4):
            tol *= 0.5
            cur = cell_pair_weight(cell_a, cell_b, alpha, tol=tol)
            assert abs(cur - prev) <= 2.0 * tol * abs(prev)
            prev = cur


def test_tail_weight_2d_halfplane_against_1d_marginal():
    # kernel tails of a 2D halfplane {x0 > a} from a unit cell reduce to a
    # 1D integral; cross-check against midpoint-refined reference
    alpha = 0.5
    g = build_grid(GridSpec(2, 1.0, 4, 64.0, 1.0))
    pos, neg = set_exterior_regions(HalfspaceSet((1.0, 0.0), 0.0), g)
    cell = (np.array([-0.25, -0.25]), np.array([0.25, 0.25]))
    t = tail_weight(cell, pos, alpha, tol=1e-8)
    # brute reference: dense midpoint grid over the half-plane strip
    xs = np.linspace(-0.25, 0.25, 8) + 0.25 / 8
    xs = xs[:-1]
    ref = 0.0
    hq = 0.5 / 7
    # integrate kernel against region numerically in polar around each node
    from fracfree.quadrature import point_region_integral
    for x0 in xs:
        for x1 in xs:
            ref += point_region_integral((x0, x1), pos, alpha, tol=1e-9) * hq * hq
    assert t == pytest.approx(ref, rel=2e-2)
