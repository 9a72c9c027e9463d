"""Particle engine checks: dynamics oracles, measures, distances, chaos."""

import math

import numpy as np
import pytest

from mvlimits.particles import (
    ChaosReport,
    ClippedPolynomialDrift,
    CoefficientSet,
    ConstantDiffusion,
    ControlField,
    EmpiricalMeasure,
    InitSpec,
    LinearMeanFieldDrift,
    ParticleEnsemble,
    SimulationError,
    TanhDiffusion,
    TimeGrid,
    ZeroDrift,
    chaos_report,
    empirical_measure,
    ensemble_to_csv,
    simulate_mckv,
    wasserstein2,
)


def make_coeffs(drift=None, sigma=0.0, n=1, **kw):
    return CoefficientSet(drift or ZeroDrift(), ConstantDiffusion.scalar(sigma),
                          noise_scale_n=n, **kw)


class TestSimulate:
    def test_frozen_dynamics(self):
        ens = simulate_mckv(make_coeffs(), TimeGrid(steps=16), InitSpec.point_mass(1.0),
                            n_particles=8, seed=1)
        np.testing.assert_array_equal(ens.states, np.ones((17, 8, 1)))

    def test_exponential_decay(self):
        coeffs = make_coeffs(LinearMeanFieldDrift(beta=-1.0))
        ens = simulate_mckv(coeffs, TimeGrid(steps=1000), InitSpec.point_mass(1.0),
                            n_particles=4, seed=1)
        assert ens.final[0, 0] == pytest.approx(math.exp(-1.0), abs=2e-3)

    def test_mean_field_growth(self):
        # ensemble mean follows dm/dt = m when the drift is the running mean
        coeffs = make_coeffs(LinearMeanFieldDrift(gamma=1.0))
        ens = simulate_mckv(coeffs, TimeGrid(steps=1000), InitSpec.point_mass(1.0),
                            n_particles=16, seed=1)
        assert ens.final.mean() == pytest.approx(math.e, abs=1e-2)

    def test_mean_field_ode_tracking(self):
        # dm/dt = alpha + (beta + gamma) m, closed form vs the particle mean
        alpha, beta, gamma = 0.3, -0.5, 0.7
        coeffs = make_coeffs(LinearMeanFieldDrift(alpha, beta, gamma))
        ens = simulate_mckv(coeffs, TimeGrid(steps=1000), InitSpec.normal(1.0, 1.0),
                            n_particles=10_000, seed=5)
        c = beta + gamma
        expect = (1.0 + alpha / c) * math.exp(c) - alpha / c
        assert ens.final.mean() == pytest.approx(expect, abs=1e-2)

    def test_reproducible_bit_exact(self):
        coeffs = make_coeffs(LinearMeanFieldDrift(beta=-0.3), sigma=1.0)
        a = simulate_mckv(coeffs, TimeGrid(steps=32), InitSpec.normal(), 64, seed=9)
        b = simulate_mckv(coeffs, TimeGrid(steps=32), InitSpec.normal(), 64, seed=9)
        np.testing.assert_array_equal(a.states, b.states)
        c = simulate_mckv(coeffs, TimeGrid(steps=32), InitSpec.normal(), 64, seed=10)
        assert not np.array_equal(a.states, c.states)

    def test_overflow_reports_step(self):
        coeffs = make_coeffs(LinearMeanFieldDrift(beta=60.0))
        with pytest.raises(SimulationError) as err:
            simulate_mckv(coeffs, TimeGrid(steps=400), InitSpec.point_mass(1e300), 2, seed=0)
        assert err.value.step >= 0

    def test_control_grid_mismatch_rejected(self):
        coeffs = make_coeffs(sigma=1.0)
        bad = ControlField.per_sample(np.zeros((7, 4, 1)))
        with pytest.raises(ValueError):
            simulate_mckv(coeffs, TimeGrid(steps=8), InitSpec.point_mass(0.0), 4,
                          control=bad, seed=0)

    def test_open_loop_control_shifts_mean(self):
        coeffs = make_coeffs(sigma=1.0, n=math.inf)  # zero noise, control channel open
        ctrl = ControlField.open_loop(np.full((4, 1), 2.0))
        ens = simulate_mckv(coeffs, TimeGrid(steps=64), InitSpec.point_mass(0.0), 3,
                            control=ctrl, seed=0)
        np.testing.assert_allclose(ens.final, 2.0, atol=1e-12)

    def test_capped_control_projects(self):
        ctrl = ControlField.open_loop(np.full((2, 1), 5.0), cap=1.0)
        q = ctrl.at(0.3, np.zeros((6, 1)), np.zeros(1))
        np.testing.assert_allclose(np.linalg.norm(q, axis=1), 1.0)

    def test_second_moment_gronwall_bound(self):
        # bounded drift and diffusion: moments stay under the exponential envelope
        drift = ClippedPolynomialDrift((0.0, -1.0), bound=2.0)
        coeffs = CoefficientSet(drift, ConstantDiffusion.scalar(1.0), ell_b=2.0)
        ctrl = ControlField.open_loop(np.full((4, 1), 0.5))
        ens = simulate_mckv(coeffs, TimeGrid(steps=256), InitSpec.point_mass(1.0),
                            2000, control=ctrl, seed=3)
        moments = (ens.states ** 2).sum(axis=2).mean(axis=1)
        ell = coeffs.ell_b
        phi_l1 = 0.5
        envelope = math.exp(64 * ell ** 2) * (8 * 1.0 + 32 * ell ** 2 * (1 + 4) + 8 * ell ** 2 * phi_l1 ** 2)
        assert np.all(np.isfinite(moments))
        assert moments.max() <= envelope

    def test_final_retention(self):
        ens = simulate_mckv(make_coeffs(sigma=1.0), TimeGrid(steps=16),
                            InitSpec.point_mass(0.0), 32, seed=2, retention="final")
        assert ens.states.shape == (1, 32, 1)
        with pytest.raises(ValueError):
            ens.at(3)
        assert ens.at(16).shape == (32, 1)

    def test_csv_export(self, tmp_path):
        ens = simulate_mckv(make_coeffs(), TimeGrid(steps=2), InitSpec.point_mass(1.5), 2, seed=0)
        path = tmp_path / "ens.csv"
        ensemble_to_csv(ens, path)
        lines = path.read_text().strip().splitlines()
        assert lines[0] == "particle,time,x1"
        assert len(lines) == 1 + 3 * 2


class TestCoefficients:
    def test_ellipticity_gate(self):
        with pytest.raises(ValueError):
            CoefficientSet(ZeroDrift(), ConstantDiffusion.scalar(0.0), c2=0.5)

    def test_tanh_entry_guards_ellipticity(self):
        with pytest.raises(ValueError):
            TanhDiffusion(base=1.0, amp_x=0.6, amp_mean=0.5)
        sig = TanhDiffusion(base=1.0, amp_x=0.3)
        assert sig.min_ellipticity() == pytest.approx(0.49)

    def test_lipschitz_probe_passes_linear(self):
        coeffs = make_coeffs(LinearMeanFieldDrift(alpha=0.1, beta=-0.4, gamma=0.5))
        report = coeffs.probe_lipschitz(seed=0, pairs=200)
        assert report["passed"]
        assert report["boundedness_checked"] is False

    def test_lipschitz_probe_flags_understated_constant(self):
        coeffs = CoefficientSet(LinearMeanFieldDrift(beta=-2.0),
                                ConstantDiffusion.scalar(1.0), ell_b=0.5)
        report = coeffs.probe_lipschitz(seed=0, pairs=200)
        assert not report["passed"]

    def test_bounded_probe_for_clipped_poly(self):
        drift = ClippedPolynomialDrift((0.0, 1.0), bound=3.0)
        coeffs = CoefficientSet(drift, ConstantDiffusion.scalar(1.0))
        report = coeffs.probe_lipschitz(seed=1, pairs=100)
        assert report["boundedness_checked"] is True
        assert report["observed_sup"] <= 3.0 + 1e-12

    def test_noise_scale_validation(self):
        with pytest.raises(ValueError):
            make_coeffs(n=0)
        make_coeffs(n=math.inf)  # zero-noise limit allowed


class TestEmpiricalMeasure:
    def test_single_particle_dirac(self):
        ens = simulate_mckv(make_coeffs(), TimeGrid(steps=4), InitSpec.point_mass(3.0), 1, seed=0)
        mu = empirical_measure(ens, 4)
        np.testing.assert_array_equal(mu.points, [[3.0]])
        assert mu.weights.sum() == pytest.approx(1.0, abs=1e-12)

    def test_two_point_moments(self):
        mu = EmpiricalMeasure(np.array([[0.0], [2.0]]))
        assert mu.mean[0] == pytest.approx(1.0)
        assert np.var(mu.points) == pytest.approx(1.0)

    def test_clt_scale_sanity(self):
        ens = simulate_mckv(make_coeffs(), TimeGrid(steps=1), InitSpec.normal(), 10_000, seed=11)
        mu = empirical_measure(ens, 0)
        assert abs(mu.mean[0]) <= 3.0 / math.sqrt(10_000)

    def test_out_of_range_index(self):
        ens = simulate_mckv(make_coeffs(), TimeGrid(steps=4), InitSpec.point_mass(0.0), 2, seed=0)
        with pytest.raises(ValueError):
            empirical_measure(ens, 9)


class TestWasserstein:
    def test_identical_clouds(self):
        pts = np.random.default_rng(0).normal(size=(40, 2))
        assert wasserstein2(EmpiricalMeasure(pts), EmpiricalMeasure(pts.copy())) == 0.0

    def test_point_masses(self):
        a = EmpiricalMeasure(np.array([[0.0]]))
        b = EmpiricalMeasure(np.array([[2.0]]))
        assert wasserstein2(a, b) == pytest.approx(2.0)

    def test_two_point_shift(self):
        a = EmpiricalMeasure(np.array([[0.0], [1.0]]))
        b = EmpiricalMeasure(np.array([[1.0], [2.0]]))
        # exhaustive over both couplings of the two-point clouds
        direct = math.sqrt(((0 - 1) ** 2 + (1 - 2) ** 2) / 2)
        crossed = math.sqrt(((0 - 2) ** 2 + (1 - 1) ** 2) / 2)
        assert wasserstein2(a, b) == pytest.approx(min(direct, crossed))

    def test_unequal_sizes_1d_quantile(self):
        # W2( U{0,1}, delta_{1/2} ): quantile gap is 1/2 everywhere
        a = EmpiricalMeasure(np.array([[0.0], [1.0]]))
        b = EmpiricalMeasure(np.array([[0.5]]))
        assert wasserstein2(a, b) == pytest.approx(0.5)

    def test_metric_axioms_random_triples(self):
        rng = np.random.default_rng(42)
        for dim in (1, 2):
            for _ in range(40):
                pts = [EmpiricalMeasure(rng.normal(size=(12, dim))) for _ in range(3)]
                dab = wasserstein2(pts[0], pts[1])
                dba = wasserstein2(pts[1], pts[0])
                assert dab == dba
                dac = wasserstein2(pts[0], pts[2])
                dcb = wasserstein2(pts[2], pts[1])
                assert dab <= dac + dcb + 1e-9

    def test_dimension_mismatch(self):
        with pytest.raises(ValueError):
            wasserstein2(EmpiricalMeasure(np.zeros((3, 1))), EmpiricalMeasure(np.zeros((3, 2))))

    def test_multid_caps(self):
        big = EmpiricalMeasure(np.zeros((600, 2)))
        with pytest.raises(ValueError):
            wasserstein2(big, big)
        with pytest.raises(ValueError):
            wasserstein2(EmpiricalMeasure(np.zeros((4, 2))), EmpiricalMeasure(np.zeros((5, 2))))

    def test_multid_matches_handmade_assignment(self):
        a = EmpiricalMeasure(np.array([[0.0, 0.0], [1.0, 0.0]]))
        b = EmpiricalMeasure(np.array([[1.0, 0.0], [0.0, 0.0]]))
        assert wasserstein2(a, b) == pytest.approx(0.0)


class TestChaos:
    def test_deterministic_all_zero(self):
        coeffs = make_coeffs(LinearMeanFieldDrift(beta=-1.0))
        rep = chaos_report(coeffs, TimeGrid(steps=32), InitSpec.point_mass(1.0),
                           [10, 100], 1000, seed=0)
        np.testing.assert_allclose(rep.distances(), 0.0, atol=1e-12)
        assert rep.slope is None

    def test_brownian_distances_decrease(self):
        coeffs = make_coeffs(sigma=1.0)
        rep = chaos_report(coeffs, TimeGrid(steps=64), InitSpec.point_mass(0.0),
                           [100, 1000], 20_000, seed=7)
        d = rep.distances()
        assert d[1] < d[0]

    def test_mean_field_slope(self):
        coeffs = make_coeffs(LinearMeanFieldDrift(gamma=0.5), sigma=1.0)
        rep = chaos_report(coeffs, TimeGrid(steps=64), InitSpec.point_mass(0.0),
                           [100, 1000, 10_000], 50_000, seed=3)
        assert rep.slope is not None and rep.slope <= -0.3

    def test_reference_must_dominate(self):
        with pytest.raises(ValueError):
            chaos_report(make_coeffs(sigma=1.0), TimeGrid(steps=8),
                         InitSpec.point_mass(0.0), [100, 1000], 500, seed=0)
