"""Checks for the convex cost catalog and its transforms.

Derived expectations are computed by independent brute-force oracles inside
this module (dense scans, double sup loops, lower convex hulls) rather than
by the code under test.
"""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mvlimits.costs import (
    ConjugatePair,
    ConvexityError,
    CostFunction,
    OffsetTerm,
    biconjugate,
    grid_from_csv,
    grid_to_csv,
    legendre_transform,
    pasch_hausdorff,
    truncate_pair,
    viscosity_scale,
)


# ---------------------------------------------------------------------------
# independent oracles


def conjugate_oracle(fvals, znodes, q):
    """sup over the sample of (q z - f(z)), dense 1-D scan."""
    return np.max(q * znodes - fvals)


def truncated_conjugate_oracle(g, radius, z, n_q=200001):
    """max over ||q|| <= radius of (q z - g(q)) on a dense 1-D q-grid."""
    qs = np.linspace(-radius, radius, n_q)
    return float(np.max(qs * z - g(qs[:, None])))


def lower_convex_hull(z, f):
    """Convex envelope of 1-D samples via the monotone-chain lower hull."""
    pts = sorted(zip(z, f))
    hull = []
    for p in pts:
        while len(hull) >= 2:
            (x1, y1), (x2, y2) = hull[-2], hull[-1]
            if (x2 - x1) * (p[1] - y1) - (p[0] - x1) * (y2 - y1) <= 0:
                hull.pop()
            else:
                break
        hull.append(p)
    hx = np.array([p[0] for p in hull])
    hy = np.array([p[1] for p in hull])
    return np.interp(z, hx, hy)


def pasch_hausdorff_oracle(nodes, values, m, x):
    return np.min(values + m * np.abs(nodes - x))


# ---------------------------------------------------------------------------
# Legendre transform


class TestLegendreTransform:
    def test_quadratic_self_conjugate(self):
        f = CostFunction.quadratic()
        g = legendre_transform(f, (-5, 5), 101)
        assert g.kind == "quadratic" and g.scale == 1.0
        q = np.linspace(-3, 3, 13)[:, None]
        np.testing.assert_allclose(g(q), q[:, 0] ** 2 / 2)

    def test_power4_conjugate_exponent(self):
        f = CostFunction.power(p=4.0, scale=1.0)
        g = legendre_transform(f, (-5, 5), 101)
        assert g.kind == "power"
        assert g.p == pytest.approx(4.0 / 3.0)
        q = np.array([[1.0], [2.0], [-0.5]])
        np.testing.assert_allclose(g(q), 0.75 * np.abs(q[:, 0]) ** (4.0 / 3.0))

    def test_abs_value_gives_ball_support(self):
        znodes = np.linspace(-5, 5, 2001)
        f = CostFunction.from_grid(znodes, np.abs(znodes))
        g = legendre_transform(f, (-5, 5), 2001, dual_domain=(-3, 3), dual_resolution=601)
        qs = np.linspace(-0.9, 0.9, 19)
        np.testing.assert_allclose(g(qs[:, None]), 0.0, atol=1e-9)
        outside = float(g(2.0))
        assert outside == pytest.approx((2.0 - 1.0) * 5.0, rel=1e-2)

    def test_closed_forms_match_grid_transform(self):
        # interior agreement between the fast path and the double loop
        for f in (CostFunction.quadratic(scale=0.7), CostFunction.power(p=3.0, scale=1.3)):
            fast = legendre_transform(f, (-4, 4), 1201)
            znodes = np.linspace(-4, 4, 8001)
            sampled = CostFunction.from_grid(znodes, f(znodes[:, None]))
            slow = legendre_transform(sampled, (-4, 4), 8001,
                                      dual_domain=(-2, 2), dual_resolution=801)
            qs = np.linspace(-1.5, 1.5, 31)
            np.testing.assert_allclose(slow(qs[:, None]), fast(qs[:, None]), atol=1e-6)

    def test_rejects_nonconvex_table(self):
        z = np.linspace(-3, 3, 301)
        f = CostFunction.from_grid(z, -np.cos(z))
        with pytest.raises(ConvexityError):
            legendre_transform(f, (-3, 3), 301)

    def test_rejects_empty_domain(self):
        with pytest.raises(ValueError):
            legendre_transform(CostFunction.quadratic(), (2, 2), 11)

    def test_flags_box_clipping(self):
        z = np.linspace(-1, 1, 201)
        f = CostFunction.from_grid(z, z ** 2 / 2)
        # dual box wider than the attained slope range [-1, 1]
        g = legendre_transform(f, (-1, 1), 201, dual_domain=(-4, 4), dual_resolution=201)
        assert g.meta["box_clipped"]

    def test_offset_sign_flips(self):
        f = CostFunction.quadratic(offset=OffsetTerm("constant", const=0.4))
        g = legendre_transform(f, (-5, 5), 11)
        assert float(g.total(np.zeros(1), x=np.zeros(1), mu_mean=0.0)) == pytest.approx(-0.4)


class TestBiconjugate:
    def test_quadratic_fixed_point(self):
        f = CostFunction.quadratic(scale=2.5)
        assert biconjugate(f, (-4, 4), 101) is f

    def test_quartic_round_trip(self):
        z = np.linspace(-2, 2, 801)
        f = CostFunction.from_grid(z, z ** 4)
        fss = biconjugate(f, (-2, 2), 801)
        err = np.max(np.abs(fss.values - z ** 4))
        assert err <= 1e-3

    def test_nonconvex_gives_envelope(self):
        z = np.linspace(-np.pi, np.pi, 801)
        f = CostFunction.from_grid(z, -np.cos(z))
        fss = biconjugate(f, (-np.pi, np.pi), 801)
        envelope = lower_convex_hull(z, -np.cos(z))
        np.testing.assert_allclose(fss.values, envelope, atol=2e-3)

    def test_envelope_flat_between_minima(self):
        # two wells at 0 and 2*pi; the envelope bridges them at the constant -1
        z = np.linspace(-np.pi, 3 * np.pi, 1601)
        f = CostFunction.from_grid(z, -np.cos(z))
        fss = biconjugate(f, (-np.pi, 3 * np.pi), 1601)
        flat = (z > 0.1) & (z < 2 * np.pi - 0.1)
        np.testing.assert_allclose(fss.values[flat], -1.0, atol=2e-3)
        envelope = lower_convex_hull(z, -np.cos(z))
        np.testing.assert_allclose(fss.values, envelope, atol=2e-3)

    def test_idempotent(self):
        z = np.linspace(-2, 2, 401)
        f = CostFunction.from_grid(z, z ** 4)
        once = biconjugate(f, (-2, 2), 401)
        twice = biconjugate(once, (-2, 2), 401)
        np.testing.assert_allclose(twice.values, once.values, atol=1e-12)


# ---------------------------------------------------------------------------
# truncation ladder


class TestTruncatePair:
    def test_quadratic_truncation_is_huber(self):
        g = CostFunction.quadratic()
        pair = truncate_pair(g, 1.0)
        z = np.linspace(-4, 4, 41)
        got = pair.primal(z[:, None])
        expect = np.where(np.abs(z) <= 1, z ** 2 / 2, np.abs(z) - 0.5)
        np.testing.assert_allclose(got, expect, atol=1e-12)
        oracle = np.array([truncated_conjugate_oracle(g, 1.0, zz) for zz in z])
        np.testing.assert_allclose(got, oracle, atol=1e-8)

    def test_large_radius_recovers_conjugate(self):
        qnodes = np.linspace(-5, 5, 801)
        g = CostFunction.from_grid(qnodes, qnodes ** 2 / 2)
        pair = truncate_pair(g, 10.0, domain=(-4, 4), resolution=801)
        z = np.linspace(-3.5, 3.5, 29)
        np.testing.assert_allclose(pair.primal(z[:, None]), z ** 2 / 2, atol=1e-4)

    def test_dual_agrees_inside_ball(self):
        g = CostFunction.quadratic()
        pair = truncate_pair(g, 1.0)
        assert float(pair.dual(0.5)) == pytest.approx(0.125, abs=1e-12)
        assert np.isinf(float(pair.dual(1.5)))

    def test_grid_dual_agrees_inside_ball(self):
        qnodes = np.linspace(-3, 3, 601)
        g = CostFunction.from_grid(qnodes, qnodes ** 2 / 2)
        pair = truncate_pair(g, 1.0, domain=(-5, 5), resolution=1001)
        inside = np.abs(qnodes) <= 0.9
        np.testing.assert_allclose(pair.dual.values[inside], qnodes[inside] ** 2 / 2, atol=2e-3)
        assert float(pair.dual(0.5)) == pytest.approx(0.125, abs=2e-3)

    def test_monotone_ladder(self):
        g = CostFunction.quadratic()
        z = np.linspace(-6, 6, 61)[:, None]
        q = np.linspace(-0.8, 0.8, 17)[:, None]
        prev = None
        prev_dual = None
        for n in (1.0, 2.0, 4.0):
            pair = truncate_pair(g, n)
            fz = pair.primal(z)
            assert np.all(fz <= z[:, 0] ** 2 / 2 + 1e-12)
            if prev is not None:
                assert np.all(prev <= fz + 1e-12)
            gq = pair.dual(q)
            assert np.all(gq >= q[:, 0] ** 2 / 2 - 1e-12)
            if prev_dual is not None:
                # observed direction: the truncated dual shrinks toward g
                assert np.all(gq <= prev_dual + 1e-12)
            prev, prev_dual = fz, gq

    def test_lipschitz_constant_bounded_by_radius(self):
        qnodes = np.linspace(-3, 3, 301)
        g = CostFunction.from_grid(qnodes, qnodes ** 2 / 2)
        for n in (0.5, 1.0, 2.0):
            pair = truncate_pair(g, n, domain=(-4, 4), resolution=801)
            diffs = np.abs(np.diff(pair.primal.values)) / np.diff(pair.primal.axes[0])
            assert diffs.max() <= n + 1e-9

    def test_rejects_nonpositive_radius(self):
        with pytest.raises(ValueError):
            truncate_pair(CostFunction.quadratic(), 0.0)

    def test_young_inequality_on_samples(self):
        rng = np.random.default_rng(7)
        pair = truncate_pair(CostFunction.quadratic(), 2.0)
        z = rng.uniform(-4, 4, size=(300, 1))
        q = rng.uniform(-1.9, 1.9, size=(300, 1))
        assert np.min(pair.young_gap(z, q)) >= -1e-9


# ---------------------------------------------------------------------------
# Lipschitz regularization


class TestPaschHausdorff:
    def test_lipschitz_function_unchanged(self):
        x = np.linspace(-3, 3, 301)
        f = np.abs(x)  # 1-Lipschitz
        np.testing.assert_allclose(pasch_hausdorff(x, f, 2.0), f, atol=1e-12)

    def test_step_function(self):
        x = np.linspace(-2, 2, 801)
        f = (x >= 0).astype(float)
        got = pasch_hausdorff(x, f, 1.0)
        oracle = np.array([pasch_hausdorff_oracle(x, f, 1.0, xx) for xx in x])
        np.testing.assert_allclose(got, oracle, atol=1e-12)
        # continuous-limit closed form, accurate to one grid spacing
        expect = np.where(x < 0, 0.0, np.minimum(1.0, x))
        spacing = x[1] - x[0]
        np.testing.assert_allclose(got, expect, atol=spacing + 1e-12)

    def test_constant_invariance(self):
        x = np.linspace(0, 1, 50)
        np.testing.assert_allclose(pasch_hausdorff(x, np.full(50, 3.25), 0.7), 3.25)

    def test_rejects_empty_table(self):
        with pytest.raises(ValueError):
            pasch_hausdorff(np.array([]), np.array([]), 1.0)

    @settings(max_examples=50, deadline=None)
    @given(st.lists(st.floats(-50, 50), min_size=2, max_size=30),
           st.floats(0.1, 10.0))
    def test_minorant_and_lipschitz(self, vals, m):
        x = np.linspace(0, 1, len(vals))
        f = np.array(vals)
        fm = pasch_hausdorff(x, f, m)
        assert np.all(fm <= f + 1e-9)
        dx = x[1] - x[0]
        assert np.max(np.abs(np.diff(fm))) <= m * dx + 1e-9

    def test_monotone_in_slope(self):
        x = np.linspace(-1, 1, 101)
        f = (x >= 0).astype(float)
        f1 = pasch_hausdorff(x, f, 0.5)
        f2 = pasch_hausdorff(x, f, 2.0)
        assert np.all(f1 <= f2 + 1e-12)


# ---------------------------------------------------------------------------
# small-noise rescaling


class TestViscosityScale:
    def test_quadratic_substitution(self):
        g = CostFunction.quadratic()
        g4 = viscosity_scale(g, 4)
        assert float(g4(2.0)) == pytest.approx(0.5)

    def test_identity_at_one(self):
        g = CostFunction.quadratic()
        assert viscosity_scale(g, 1) is g

    def test_power_four_thirds(self):
        g = CostFunction.power(p=4.0 / 3.0, scale=1.0)  # values (3/4)|q|^{4/3}
        g16 = viscosity_scale(g, 16)
        expect = 0.75 * 16.0 ** (-2.0 / 3.0)
        assert float(g16(1.0)) == pytest.approx(expect, rel=1e-12)

    def test_rejects_bad_index(self):
        with pytest.raises(ValueError):
            viscosity_scale(CostFunction.quadratic(), 0)

    @settings(max_examples=40, deadline=None)
    @given(st.integers(1, 100), st.floats(-8, 8))
    def test_rescaled_at_root_n_recovers_value(self, n, q):
        g = CostFunction.quadratic(scale=1.5)
        gn = viscosity_scale(g, n)
        lhs = float(gn(np.sqrt(n) * q))
        rhs = float(g(q))
        assert lhs == pytest.approx(rhs, abs=1e-12 * max(1.0, abs(rhs)))

    def test_grid_rescaling(self):
        qnodes = np.linspace(-2, 2, 201)
        g = CostFunction.from_grid(qnodes, qnodes ** 2 / 2)
        g9 = viscosity_scale(g, 9)
        np.testing.assert_allclose(float(g9(3.0)), 0.5, atol=1e-12)


# ---------------------------------------------------------------------------
# shared invariants


class TestPairInvariants:
    @settings(max_examples=60, deadline=None)
    @given(st.floats(0.2, 5.0), st.floats(-6, 6), st.floats(-6, 6))
    def test_young_quadratic(self, scale, z, q):
        f = CostFunction.quadratic(scale=scale)
        pair = ConjugatePair(f, legendre_transform(f, (-8, 8), 11), "closed-form")
        assert float(pair.young_gap(np.array([z]), np.array([q])).item()) >= -1e-9

    @settings(max_examples=60, deadline=None)
    @given(st.floats(1.2, 5.0), st.floats(-4, 4), st.floats(-4, 4))
    def test_young_power(self, p, z, q):
        f = CostFunction.power(p=p)
        pair = ConjugatePair(f, legendre_transform(f, (-8, 8), 11), "closed-form")
        assert float(pair.young_gap(np.array([z]), np.array([q])).item()) >= -1e-9

    def test_young_numeric_grid(self):
        znodes = np.linspace(-3, 3, 601)
        f = CostFunction.from_grid(znodes, np.cosh(znodes) - 1.0)
        g = legendre_transform(f, (-3, 3), 601, dual_domain=(-10, 10), dual_resolution=801)
        pair = ConjugatePair(f, g, "numeric-grid")
        rng = np.random.default_rng(3)
        z = rng.uniform(-2.5, 2.5, size=(200, 1))
        q = rng.uniform(-5, 5, size=(200, 1))
        assert float(np.min(pair.young_gap(z, q))) >= -1e-9


class TestValidation:
    def test_power_requires_coercive_exponent(self):
        with pytest.raises(ValueError):
            CostFunction.power(p=1.0)

    def test_grid_normalization_check(self):
        z = np.linspace(-1, 1, 11)
        f = CostFunction.from_grid(z, z ** 2 + 0.5)
        with pytest.raises(ValueError):
            f.check_normalization()

    def test_csv_round_trip(self, tmp_path):
        z = np.linspace(-1, 1, 21)
        f = CostFunction.from_grid(z, z ** 4)
        path = tmp_path / "cost.csv"
        grid_to_csv(f, path)
        back = grid_from_csv(path)
        np.testing.assert_array_equal(back.values, f.values)
        np.testing.assert_array_equal(back.axes[0], f.axes[0])

    def test_csv_rejects_bad_header(self, tmp_path):
        path = tmp_path / "bad.csv"
        path.write_text("a,b\n1,2\n")
        with pytest.raises(ValueError):
            grid_from_csv(path)
