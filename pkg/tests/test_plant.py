import math

import numpy as np
import pytest

from powerdamp.lti import dominant_mode, eval_tf
from powerdamp.plant import (
    NoiseModel,
    NumericalBlowup,
    PiState,
    PlantParams,
    PlantState,
    closed_loop_ss,
    equilibrium,
    gravity_feedforward,
    make_gtilde,
    pi_control,
    plant_step,
)

DT = 5e-4


class TestDisturbance:
    def test_load_row_free_fall(self):
        p = PlantParams()
        d = p.disturbance(np.zeros(4))
        assert d[2] == -9.806
        assert d[0] == -9.806  # sign(0) = 0 leaves only gravity on row 1

    def test_coulomb_sign_term(self):
        p = PlantParams()
        assert p.disturbance(np.array([0.5, 0, 0, 0]))[0] == -9.806 + 0.83
        assert p.disturbance(np.array([-0.5, 0, 0, 0]))[0] == -9.806 - 0.83

    def test_free_fall_rate_from_rest(self):
        state = PlantState(x=np.zeros(4), nu=0.0)
        new, _ = plant_step(state, 0.0, DT)
        # load velocity integrates gravity over one step
        assert new.x[2] == pytest.approx(-9.806 * DT, rel=1e-6)


class TestActuator:
    def test_dc_gain(self):
        p = PlantParams()
        state = PlantState(x=np.zeros(4), nu=0.0)
        u = 2.0
        for _ in range(int(round(0.02 / DT))):  # ~17 actuator time constants
            state, _ = plant_step(state, u, DT, params=p)
        assert state.nu == pytest.approx(p.actuator_gain * u, rel=1e-6)


class TestEquilibrium:
    def test_independent_solve(self):
        # block elimination oracle: row 3 fixes z - y, row 1 then fixes nu
        p = PlantParams()
        r1 = 0.010
        z_minus_y = 9.806 / 266.66
        nu_oracle = (9.806 + 333.33 * z_minus_y) / 1.667
        x_star, nu_star, u_star = equilibrium(p, r1)
        assert x_star[3] == pytest.approx(r1, rel=1e-12)
        assert x_star[1] - x_star[3] == pytest.approx(z_minus_y, rel=1e-9)
        assert nu_star == pytest.approx(nu_oracle, rel=1e-9)
        assert u_star == pytest.approx(nu_oracle / p.actuator_gain, rel=1e-9)

    def test_plant_holds_equilibrium_1000_steps(self):
        p = PlantParams()
        x_star, nu_star, u_star = equilibrium(p, 0.010)
        state = PlantState(x=x_star, nu=nu_star)
        for _ in range(1000):
            state, _ = plant_step(state, u_star, DT, params=p)
        assert np.max(np.abs(state.x - x_star)) < 1e-9
        assert abs(state.nu - nu_star) < 1e-9


class TestPiControl:
    def test_zero_error_outputs_feedforward(self):
        pi = PiState(r1=0.01, r2=3.3)
        pi2, u = pi_control(pi, 0.01, DT)
        assert u == 3.3
        assert pi2.integral == 0.0

    def test_proportional_arithmetic(self):
        pi = PiState(r1=0.011, r2=0.0)
        _, u = pi_control(pi, 0.010, DT)
        assert u == pytest.approx(140.0 * 0.001, rel=1e-12)

    def test_integral_accumulation(self):
        pi = PiState(r1=0.01, r2=0.0)
        err = 0.002
        n = 400
        for _ in range(n):
            pi, u = pi_control(pi, pi.r1 - err, DT)
        assert pi.integral == pytest.approx(err * n * DT, rel=1e-12)
        # output uses the integral accumulated before the final update
        assert u == pytest.approx(140.0 * err + 170.0 * err * (n - 1) * DT, rel=1e-12)


class TestNoise:
    def test_bound_holds_on_a_million_samples(self):
        stream = NoiseModel(kind="uniform", bound=5e-5, seed=11).stream()
        vals = np.array([stream.sample() for _ in range(1_000_000)])
        assert np.max(np.abs(vals)) <= 5e-5

    def test_same_seed_same_sequence(self):
        a = NoiseModel(kind="uniform", bound=1e-4, seed=42).stream()
        b = NoiseModel(kind="uniform", bound=1e-4, seed=42).stream()
        assert [a.sample() for _ in range(1000)] == [b.sample() for _ in range(1000)]

    def test_none_kind_is_zero(self):
        s = NoiseModel(kind="none", bound=1e-4, seed=1).stream()
        assert all(s.sample() == 0.0 for _ in range(10))

    def test_validation(self):
        with pytest.raises(ValueError):
            NoiseModel(kind="gauss", bound=1e-4, seed=1)
        with pytest.raises(ValueError):
            NoiseModel(kind="uniform", bound=-1.0, seed=1)


class TestGtilde:
    def test_exact_coefficients(self):
        gt = make_gtilde()
        assert list(gt.num) == [0.1544, 3432.0]
        assert list(gt.den) == [0.002824, 3.295, 785.5, 784.5]

    def test_dc_gain(self):
        assert eval_tf(make_gtilde(), 0.0).magnitude == pytest.approx(
            3432.0 / 784.5, rel=1e-12
        )

    def test_strictly_proper_rolloff(self):
        assert eval_tf(make_gtilde(), 1e6).magnitude < 1e-4


class TestClosedLoop:
    def test_pi_loop_dominant_mode_unstable(self):
        m = dominant_mode(closed_loop_ss(PlantParams()))
        assert m.sigma > 0.0
        assert m.zeta < 0.0


class TestDeterminismAndBlowup:
    def test_zero_input_trajectory_reproducible(self):
        def run():
            state = PlantState(x=np.zeros(4), nu=0.0)
            out = []
            for _ in range(200):
                state, y = plant_step(state, 0.0, DT)
                out.append(y)
            return out

        assert run() == run()

    def test_blowup_raises(self):
        state = PlantState(x=np.zeros(4), nu=0.0)
        with pytest.raises(NumericalBlowup):
            for _ in range(10000):
                state, _ = plant_step(state, 1e9, DT)

    def test_input_must_be_finite(self):
        with pytest.raises(ValueError):
            plant_step(PlantState(x=np.zeros(4)), math.nan, DT)


class TestEnergySanity:
    def test_undamped_oscillation_amplitude_drift(self):
        # zero the velocity-damping entries so the spring pair is conservative,
        # drop the Coulomb term, and balance gravity with the equilibrium input
        A = np.array(
            [
                [0.0, -333.33, 0.0, 333.33],
                [1.0, 0.0, 0.0, 0.0],
                [0.0, 266.66, 0.0, -266.66],
                [0.0, 0.0, 1.0, 0.0],
            ]
        )
        p = PlantParams(A=A, coulomb=0.0)
        x_star, nu_star, u_star = equilibrium(p, 0.010)
        x0 = x_star.copy()
        x0[3] += 1e-3
        state = PlantState(x=x0, nu=nu_star)
        ys = []
        omega = math.sqrt(333.33 + 266.66)
        period = 2 * math.pi / omega
        for _ in range(int(round(6 * period / DT))):
            state, _ = plant_step(state, u_star, DT, params=p)
            ys.append(state.y - x_star[3])
        ys = np.array(ys)
        per = int(round(period / DT))
        first = np.max(np.abs(ys[:per]))
        last = np.max(np.abs(ys[-per:]))
        drift_per_period = abs(last / first - 1.0) / 5.0
        assert drift_per_period < 1e-3

    def test_params_feedforward_helper(self):
        assert gravity_feedforward(PlantParams(), 0.010) == pytest.approx(
            equilibrium(PlantParams(), 0.010)[2]
        )
