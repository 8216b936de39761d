import json
import math

import numpy as np
import pytest

from follmer_kit.operators import (
    GridField,
    MultiplierOperator,
    SpectralGrid,
    bump_g,
    derivative_operator,
    heat_semigroup,
)
from follmer_kit.oracles import heat_kernel_transport
from follmer_kit.pathgen import PartitionSequence, gen_deterministic, gen_fbm, gen_wiener
from follmer_kit.solvers import (
    CommutativeProblem,
    HyperbolicProblem,
    NoncommParabolicProblem,
    NumericalGuardError,
    RateModel,
    ScalarGeometricProblem,
    SolutionTrajectory,
    build_evolution_system,
    hyperbolic_C_symbol,
    solve_commutative,
    solve_hyperbolic,
    solve_parabolic,
    solve_scalar_geometric,
    verify_strong_solution,
)
from follmer_kit.variation import (
    VariationEstimate,
    theoretical_fbm_variation,
    variation_derivative,
    variation_limit,
)

GRID = SpectralGrid(256, 10.0)
SEQ = PartitionSequence("dyadic", [8, 10, 12, 14])


@pytest.fixture(scope="module")
def fbm_setup():
    path = gen_fbm(0.25, 14, 8000)
    return path, variation_limit(path, SEQ, 4)


def linear(c):
    return lambda t: c * np.asarray(t)


class TestRateModel:
    def test_resolutions(self, fbm_setup):
        path, est = fbm_setup
        d = variation_derivative(est)
        med = RateModel.resolve("median", est)
        assert med.rate(0.3) == pytest.approx(d.median())
        assert med.exposure(0.5) == pytest.approx(0.5 * d.median())
        der = RateModel.resolve("derivative", est)
        assert der.rate(0.4) == pytest.approx(d(0.4))
        var = RateModel.resolve("variation", est)
        assert var.exposure(1.0) == pytest.approx(est(1.0))
        fit = RateModel.resolve("polyfit", est)
        assert fit.exposure(0.0) == pytest.approx(0.0, abs=1e-12)
        assert fit.exposure(1.0) == pytest.approx(est(1.0), rel=0.05)
        assert RateModel.resolve(2.5, None).exposure(0.4) == pytest.approx(1.0)

    def test_callable_rate(self):
        model = RateModel.resolve(lambda t: 2 * t, None)
        assert model.exposure(1.0) == pytest.approx(1.0, rel=1e-6)

    def test_errors(self, fbm_setup):
        with pytest.raises(ValueError):
            RateModel.resolve("median", None)
        with pytest.raises(ValueError):
            RateModel.resolve("bogus", fbm_setup[1])
        with pytest.raises(TypeError):
            RateModel.resolve([1, 2], None)


class TestScalarGeometric:
    def test_no_noise(self, wiener14):
        traj = solve_scalar_geometric(0.7, 0.0, 2, wiener14, linear(1.0), times=wiener14.times)
        np.testing.assert_array_equal(traj.as_array(), np.exp(0.7 * wiener14.times))

    def test_geometric_brownian_motion(self, wiener14):
        traj = solve_scalar_geometric(0.0, 1.0, 2, wiener14, linear(1.0), times=wiener14.times)
        ref = np.exp(wiener14.values - wiener14.times / 2)
        np.testing.assert_allclose(traj.as_array(), ref, rtol=1e-14)

    def test_quartic_compensator(self, fbm14):
        traj = solve_scalar_geometric(1.0, 1.0, 4, fbm14, linear(3.0), times=fbm14.times)
        ref = np.exp(fbm14.values + 0.875 * fbm14.times)
        np.testing.assert_allclose(traj.as_array(), ref, rtol=1e-14)

    def test_initial_condition_and_default_times(self, wiener14):
        est = variation_limit(wiener14, SEQ, 2)
        traj = solve_scalar_geometric(1.0, 0.5, 2, wiener14, est, x0=2.5)
        assert traj.states[0] == 2.5
        np.testing.assert_array_equal(traj.times, est.limit_grid)

    def test_p_mismatch(self, wiener14):
        est = variation_limit(wiener14, SEQ, 2)
        with pytest.raises(ValueError):
            ScalarGeometricProblem(1.0, 1.0, 4, wiener14, est)

    def test_csv_export(self, tmp_path, wiener14):
        traj = solve_scalar_geometric(1.0, 0.5, 2, wiener14, linear(1.0), times=[0, 0.5, 1])
        traj.write(tmp_path)
        assert (tmp_path / "trajectory.csv").read_text().startswith("t,value\n")
        doc = json.loads((tmp_path / "trajectory.json").read_text())
        assert doc["times"] == [0, 0.5, 1] and len(doc["norms"]) == 3


class TestCommutative:
    def test_initial_condition(self, fbm_setup):
        path, est = fbm_setup
        x0 = GRID.gaussian(0.0, 1.0)
        prob = CommutativeProblem(derivative_operator(2), "scalar", 0.5, 4, x0, path, est)
        traj = solve_commutative(prob, [0.0, 0.5])
        assert np.array_equal(traj.states[0].samples, x0.samples)

    def test_scalar_noise_factorizes(self, wiener14):
        x0 = GRID.gaussian(0.0, 1.0)
        times = [0.1, 0.25, 0.5, 1.0]
        prob = CommutativeProblem(derivative_operator(2), "scalar", 1.0, 2, x0, wiener14, rate=1.0)
        traj = solve_commutative(prob, times)
        scalar = solve_scalar_geometric(0.0, 1.0, 2, wiener14, linear(1.0), times=times)
        for t, X, y in zip(times, traj.states, scalar.states):
            heat = heat_semigroup(1.0, t).apply(x0)
            assert (X - heat * y).norm() <= 1e-10 * X.norm()

    @pytest.mark.parametrize("seed", [1, 2])
    def test_transport_closed_form(self, seed):
        grid = SpectralGrid(1024, 10.0)
        path = gen_wiener(10, seed)
        x0 = grid.gaussian(0.0, 0.5)
        prob = CommutativeProblem(derivative_operator(2), "shift", 1.0, 2, x0, path, rate=1.0)
        times = [0.1, 0.5, 1.0]
        traj = solve_commutative(prob, times)
        profile = lambda y: np.exp(-(y**2) / 0.5)  # noqa: E731
        for t, X in zip(times, traj.states):
            ref = heat_kernel_transport(profile, grid.x, t, 0.5, path(t))
            assert np.abs(X.samples - ref).max() <= 1e-5

    def test_regime_rejected(self, wiener14):
        x0 = GRID.gaussian()
        with pytest.raises(ValueError, match="b\\^2/2"):
            CommutativeProblem(derivative_operator(2, 0.4), "shift", 1.0, 2, x0, wiener14,
                               rate=1.0)
        with pytest.raises(ValueError):
            CommutativeProblem(derivative_operator(2), "shift", 1.0, 2, x0, wiener14,
                               variation_limit(wiener14, SEQ, 4))


class TestParabolic:
    @staticmethod
    def problem(path, est, dt, g=None, rate="polyfit"):
        g = g or (lambda x: np.ones_like(np.asarray(x, dtype=np.float64)))
        return NoncommParabolicProblem(g, 1.0, GRID.gaussian(0.0, 1.0), path, est, dt, rate=rate)

    @staticmethod
    def errors(path, est, dts):
        x0 = GRID.gaussian(0.0, 1.0)
        ref_prob = CommutativeProblem(derivative_operator(2), "shift", 1.0, 4, x0, path, est,
                                      "polyfit")
        ref = solve_commutative(ref_prob, [1.0]).states[0]
        return np.array([(solve_parabolic(TestParabolic.problem(path, est, dt), [1.0]).states[0]
                          - ref).norm() for dt in dts])

    def test_constant_g_first_order(self, fbm_setup):
        dts = np.array([1e-2, 5e-3, 2.5e-3])
        errs = self.errors(*fbm_setup, dts)
        order = np.polyfit(np.log(dts), np.log(errs), 1)[0]
        assert order >= 0.9
        assert np.all(np.diff(errs) < 0)

    def test_mean_order_over_paths(self):
        dts = np.array([1e-2, 5e-3, 2.5e-3])
        orders = []
        for seed in range(8000, 8005):
            path = gen_fbm(0.25, 14, seed)
            errs = self.errors(path, variation_limit(path, SEQ, 4), dts)
            orders.append(np.polyfit(np.log(dts), np.log(errs), 1)[0])
        assert np.mean(orders) >= 0.9

    def test_refinement_ratio(self, fbm_setup):
        path, est = fbm_setup
        h = 1e-2

        def run(dt):
            return solve_parabolic(self.problem(path, est, dt), [1.0]).states[0]

        ratio = (run(h) - run(h / 4)).norm() / (run(h / 2) - run(h / 8)).norm()
        assert 1.7 <= ratio <= 2.3

    def test_zero_path_is_heat(self):
        path = gen_deterministic("constant", 14, 0.0)
        est = variation_limit(path, SEQ, 4)
        prob = self.problem(path, est, 0.01, g=bump_g(0.3, 2.0), rate="derivative")
        traj = solve_parabolic(prob, [0.0, 0.5, 1.0])
        for t, X in zip(traj.times, traj.states):
            assert (X - heat_semigroup(1.0, t).apply(prob.x0)).sup() <= 1e-8

    def test_evolution_property(self, fbm_setup):
        path, est = fbm_setup
        dt = 0.01
        es = build_evolution_system(self.problem(path, est, dt, g=bump_g(0.3, 2.0)))
        rng = np.random.default_rng(3)
        x0 = GRID.gaussian(0.0, 1.0)
        for _ in range(5):
            r, m, t = np.sort(rng.choice(2**10 + 1, size=3, replace=False)) / 2**10
            assert es.evolution_defect(x0, r, m, t) <= 5 * dt

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    def test_growth_guard(self, fbm_setup):
        path, est = fbm_setup
        es = build_evolution_system(self.problem(path, est, 0.01, rate=-1e4))
        with pytest.raises(NumericalGuardError) as info:
            es.propagate(GRID.gaussian(0.0, 1.0), 0.0, 0.1)
        assert "norm_after" in info.value.diagnostics

    def test_step_grid_and_errors(self, fbm_setup):
        path, est = fbm_setup
        es = build_evolution_system(self.problem(path, est, 0.1))
        np.testing.assert_allclose(es.nodes(0.05, 0.32), [0.05, 0.1, 0.2, 0.3, 0.32])
        with pytest.raises(ValueError):
            es.trajectory([0.0, 0.15])
        with pytest.raises(ValueError):
            es.propagate(GRID.gaussian(), 0.5, 0.2)
        with pytest.raises(ValueError):
            self.problem(path, est, 0.0)

    def test_trajectory_starts_at_x0(self, fbm_setup):
        path, est = fbm_setup
        traj = solve_parabolic(self.problem(path, est, 0.1, g=bump_g(0.3, 2.0)), [0.0, 0.2])
        assert np.array_equal(traj.states[0].samples, GRID.gaussian(0.0, 1.0).samples)
        assert traj.meta["clipped_mass"] < 1e-12

    def test_conjugation_identity_for_constant_speed(self, fbm_setup):
        # a shift commutes with the step factors when g is constant
        path, est = fbm_setup
        es = build_evolution_system(self.problem(path, est, 0.01))
        u = GRID.gaussian(0.3, 1.0)
        s = 0.37
        direct = es.step(u, 0.2, 0.21)
        conj = es.flow.apply(-s, es.step(es.flow.apply(s, u), 0.2, 0.21))
        assert (direct - conj).norm() <= 1e-12 * u.norm()


class TestHyperbolic:
    def problem(self, path, g_amp=0.5, dt=1e-3):
        grid = SpectralGrid(512, 10.0)
        x0 = GridField(grid, grid.gaussian(0.0, 0.7).samples * np.exp(1j * grid.x))
        g = GridField(grid, g_amp * np.exp(-(grid.x**2)))
        return HyperbolicProblem(g, x0, path, dt)

    def test_symbol_is_skew(self, fbm14):
        prob = self.problem(fbm14)
        assert np.abs(hyperbolic_C_symbol(prob).real).max() <= 1e-12
        assert prob.rate == 3.0

    def test_norm_conserved(self, fbm14):
        prob = self.problem(fbm14)
        traj = solve_hyperbolic(prob, [0.25, 0.5, 1.0])
        n0 = prob.x0.norm()
        assert np.all(np.abs(traj.norms() / n0 - 1) <= 1e-10)
        assert traj.meta["steps"] == 1000

    def test_free_evolution(self):
        path = gen_deterministic("constant", 10, 0.0)
        prob = self.problem(path, g_amp=0.0, dt=0.01)
        X = solve_hyperbolic(prob, [0.5]).states[0]
        exact = MultiplierOperator(lambda xi: np.exp(0.5j * (xi**4 - xi**2))).apply(prob.x0)
        assert (X - exact).sup() <= 1e-13 * prob.x0.sup()

    def test_errors(self, fbm14):
        prob = self.problem(fbm14, dt=0.01)
        with pytest.raises(ValueError):
            solve_hyperbolic(prob, [0.015])
        with pytest.raises(ValueError):
            HyperbolicProblem(prob.g, prob.x0, fbm14, 0.01, p=2)


class TestVerification:
    def test_geometric_brownian(self, wiener14):
        est = variation_limit(wiener14, SEQ, 2)
        traj = solve_scalar_geometric(1.0, 0.5, 2, wiener14, est)
        prob = ScalarGeometricProblem(1.0, 0.5, 2, wiener14, est)
        report = verify_strong_solution(traj, prob, SEQ)
        assert report.final <= 5e-2

    def test_commutative_heat_scalar_fbm(self, fbm14):
        seq = PartitionSequence("dyadic", [6, 8, 10, 12])
        est = variation_limit(fbm14, seq, 4)
        prob = CommutativeProblem(derivative_operator(2), "scalar", 0.5, 4, GRID.gaussian(0, 1),
                                  fbm14, est)
        traj = solve_commutative(prob, seq[-1].points)
        report = verify_strong_solution(traj, prob, seq)
        assert report.final <= 1e-1
        assert report.residuals[-1] < report.residuals[0]

    def test_zero_noise(self):
        path = gen_deterministic("constant", 12, 0.0)
        seq = PartitionSequence("dyadic", [8, 10, 12])
        est = variation_limit(path, seq, 4)
        prob = CommutativeProblem(derivative_operator(2), "scalar", 0.5, 4, GRID.gaussian(0, 1),
                                  path, est)
        traj = solve_commutative(prob, seq[-1].points)
        assert verify_strong_solution(traj, prob, seq).final <= 1e-6

    def test_missing_points(self, wiener14):
        prob = ScalarGeometricProblem(1.0, 0.5, 2, wiener14, linear(1.0))
        traj = solve_scalar_geometric(1.0, 0.5, 2, wiener14, linear(1.0), times=[0, 0.5, 1])
        with pytest.raises(ValueError):
            verify_strong_solution(traj, prob, SEQ)

    def test_report_csv(self, tmp_path, wiener14):
        est = variation_limit(wiener14, SEQ, 2)
        traj = solve_scalar_geometric(1.0, 0.5, 2, wiener14, est)
        report = verify_strong_solution(traj, ScalarGeometricProblem(1.0, 0.5, 2, wiener14, est),
                                        SEQ)
        report.to_csv(tmp_path / "r.csv")
        assert (tmp_path / "r.csv").read_text().splitlines()[0] == "level,residual"


class TestTrajectory:
    def test_lookup(self):
        traj = SolutionTrajectory([0.0, 0.5], [1.0, 2.0])
        assert traj.at(0.5) == 2.0
        with pytest.raises(KeyError):
            traj.at(0.25)
        with pytest.raises(ValueError):
            SolutionTrajectory([0.0], [1.0, 2.0])

    def test_field_export(self, tmp_path):
        traj = SolutionTrajectory([0.0, 1.0], [GRID.gaussian(), GRID.gaussian(1.0)])
        traj.write(tmp_path)
        assert sorted(p.name for p in tmp_path.iterdir()) == [
            "state_00000.csv", "state_00001.csv", "trajectory.json"]
