import numpy as np
import pytest

from safeswitch.dynamics import (
    AccModeParams,
    SingleTrackParams,
    acc_dynamics,
    acc_reduced_dynamics,
    double_integrator_dynamics,
    eval_flow,
    single_track_dynamics,
)


def single_track_reference(x, u, p: SingleTrackParams):
    """Independent twin of the seven-state single-track equations.

    Written directly from the printed model with the acceleration command
    inside the load-transfer terms; deliberately a different code path from
    the drift/input-matrix split under test.
    """
    x1, x2, x3, x4, x5, x6, x7 = x
    u1, u2 = u
    g = p.grav
    lwb = p.lf + p.lr
    glr = g * p.lr - u2 * p.h_cg
    glf = g * p.lf + u2 * p.h_cg
    return np.array(
        [
            x4 * np.cos(x5 + x7),
            x4 * np.sin(x5 + x7),
            u1,
            u2,
            x6,
            (p.mu * p.m / (p.I_z * lwb))
            * (
                p.lf * p.C_Sf * glr * x3
                + (p.lr * p.C_Sr * glf - p.lf * p.C_Sf * glr) * x7
                - (p.lf**2 * p.C_Sf * glr + p.lr**2 * p.C_Sr * glf) * x6 / x4
            ),
            (p.mu / (x4 * lwb))
            * (
                p.C_Sf * glr * x3
                - (p.C_Sr * glf + p.C_Sf * glr) * x7
                + (p.C_Sr * glf * p.lr - p.C_Sf * glr * p.lf) * x6 / x4
            )
            - x6,
        ]
    )


class TestAcc:
    def test_control_box_from_friction(self):
        p = AccModeParams(f1=0.3, f2=15.0, f3=0.75, c=0.3)
        dyn = acc_dynamics(p)
        bound = 0.3 * p.m * p.grav
        assert dyn.u_min[0] == pytest.approx(-bound)
        assert dyn.u_max[0] == pytest.approx(bound)

    def test_resistance_at_zero_speed(self):
        p = AccModeParams(f1=0.3, f2=15.0, f3=0.75, c=0.3)
        assert p.rolling_resistance(0.0) == 0.3

    def test_rock_resistance_hand_value(self):
        # 0.5 + 25*14 + 1.25*14^2 = 595.5
        p = AccModeParams(f1=0.5, f2=25.0, f3=1.25, c=0.5)
        assert p.rolling_resistance(14.0) == pytest.approx(595.5)

    def test_drift_structure(self):
        p = AccModeParams(f1=0.3, f2=15.0, f3=0.75, c=0.3, v0=14.0)
        dyn = acc_dynamics(p)
        x = np.array([0.0, 14.0, 30.0])
        xdot = eval_flow(dyn, x, np.zeros(1))
        assert xdot[0] == 14.0
        assert xdot[1] == pytest.approx(-p.rolling_resistance(14.0) / p.m)
        assert xdot[2] == 0.0  # leading car at the same speed

    def test_headway_rate_identity(self):
        p = AccModeParams(f1=0.1, f2=5.0, f3=0.25, c=0.1)
        dyn = acc_dynamics(p)
        rng = np.random.default_rng(0)
        x = rng.uniform([0, 0, 0], [100, 36, 150], size=(50, 3))
        f = dyn.drift(x)
        assert np.array_equal(f[..., 2], p.v0 - x[..., 1])

    def test_reduced_matches_full(self):
        p = AccModeParams(f1=0.3, f2=15.0, f3=0.75, c=0.3)
        full, red = acc_dynamics(p), acc_reduced_dynamics(p)
        x3 = np.array([12.0, 20.0, 45.0])
        u = np.array([500.0])
        f3 = eval_flow(full, x3, u)
        f2 = eval_flow(red, x3[1:], u)
        np.testing.assert_allclose(f3[1:], f2, rtol=0, atol=0)


class TestAffineStructure:
    @pytest.mark.parametrize("make", [
        lambda: acc_dynamics(AccModeParams(f1=0.5, f2=25.0, f3=1.25, c=0.5)),
        lambda: double_integrator_dynamics(2.0),
        lambda: single_track_dynamics(SingleTrackParams()),
    ])
    def test_affinity(self, make):
        dyn = make()
        rng = np.random.default_rng(3)
        for _ in range(20):
            x = rng.uniform(-1, 1, dyn.state_dim)
            if dyn.state_dim == 7:
                x[3] = rng.uniform(1.0, 8.0)   # stay above the low-speed blend
                x[2] = rng.uniform(-0.3, 0.3)
            u1 = rng.uniform(dyn.u_min, dyn.u_max) * 0.5
            u2 = rng.uniform(dyn.u_min, dyn.u_max) * 0.4
            a, b = 0.3, 0.6
            lhs = eval_flow(dyn, x, a * u1 + b * u2)
            f0 = eval_flow(dyn, x, np.zeros(dyn.control_dim))
            rhs = (1 - a - b) * f0 + a * eval_flow(dyn, x, u1) + b * eval_flow(dyn, x, u2)
            np.testing.assert_allclose(lhs, rhs, rtol=1e-12, atol=1e-12)

    def test_zero_control_returns_drift(self):
        dyn = double_integrator_dynamics(1.0)
        x = np.array([1.0, -2.0])
        np.testing.assert_array_equal(eval_flow(dyn, x, np.zeros(1)), dyn.drift(x))

    def test_dimension_mismatch_rejected(self):
        dyn = double_integrator_dynamics(1.0)
        with pytest.raises(ValueError):
            eval_flow(dyn, np.zeros(3), np.zeros(1))
        with pytest.raises(ValueError):
            eval_flow(dyn, np.zeros(2), np.zeros(2))

    def test_out_of_box_control_clipped_with_warning(self):
        dyn = double_integrator_dynamics(1.0)
        with pytest.warns(UserWarning, match="clipping"):
            out = eval_flow(dyn, np.zeros(2), np.array([5.0]))
        assert out[1] == 1.0


class TestSingleTrack:
    def test_straight_motion(self):
        dyn = single_track_dynamics(SingleTrackParams())
        x = np.array([0.0, 0.0, 0.0, 5.0, 0.0, 0.0, 0.0])
        xdot = eval_flow(dyn, x, np.zeros(2))
        assert xdot[0] == 5.0
        assert xdot[1] == 0.0
        assert xdot[5] == 0.0
        assert xdot[6] == 0.0

    def test_matches_independent_reference(self):
        p = SingleTrackParams()
        dyn = single_track_dynamics(p)
        rng = np.random.default_rng(42)
        worst = 0.0
        for _ in range(1000):
            x = np.array([
                rng.uniform(-20, 20),
                rng.uniform(-20, 20),
                rng.uniform(-0.35, 0.35),
                rng.uniform(1.0, 10.0),
                rng.uniform(-np.pi, np.pi),
                rng.uniform(-2.0, 2.0),
                rng.uniform(-0.25, 0.25),
            ])
            u = rng.uniform(dyn.u_min, dyn.u_max) * 0.9
            got = eval_flow(dyn, x, u)
            want = single_track_reference(x, u, p)
            denom = np.maximum(np.abs(want), 1.0)
            worst = max(worst, float(np.max(np.abs(got - want) / denom)))
        assert worst < 1e-10

    def test_low_speed_fallback_is_finite(self):
        dyn = single_track_dynamics(SingleTrackParams())
        x = np.array([0.0, 0.0, 0.2, 0.05, 0.3, 0.5, 0.1])
        xdot = eval_flow(dyn, x, np.array([0.1, 1.0]))
        assert np.all(np.isfinite(xdot))

    def test_steering_stop_gates_rate_command(self):
        p = SingleTrackParams()
        dyn = single_track_dynamics(p)
        x = np.array([0.0, 0.0, p.steer_max, 5.0, 0.0, 0.0, 0.0])
        xdot = eval_flow(dyn, x, np.array([p.steer_rate_max, 0.0]))
        assert xdot[2] == 0.0  # cannot push past the stop
        xdot_back = eval_flow(dyn, x, np.array([-p.steer_rate_max, 0.0]))
        assert xdot_back[2] == -p.steer_rate_max  # but can come back off it
