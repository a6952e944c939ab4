import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from pourplan import fluid as F
from pourplan import geometry as G

GRAV = 9.81


class TestBernoulli:
    def test_zero_head(self):
        assert F.bernoulli_speed(0.0) == 0.0

    def test_reference_value(self):
        assert F.bernoulli_speed(0.05) == pytest.approx(0.9905, abs=1e-4)

    def test_negative_rejected(self):
        with pytest.raises(ValueError):
            F.bernoulli_speed(-0.01)


class TestOutflowSpeed:
    def test_zero_model(self, cylinder_tables):
        v = F.outflow_speed(F.OutflowCoeffs(), 1.6, 1e-4, cylinder_tables)
        assert v == 0.0

    def test_pure_head_term_matches_bernoulli(self, cylinder_tables):
        theta, vol = math.radians(110), 0.3 * cylinder_tables.v_max
        s = G.lookup(cylinder_tables, theta, vol)
        v = F.outflow_speed(F.OutflowCoeffs(a=1.0), theta, vol, cylinder_tables)
        assert v == pytest.approx(F.bernoulli_speed(s.dh), rel=1e-12)

    def test_slide_terms_dead_below_horizontal(self, cylinder_tables):
        theta = math.radians(60)
        vol = 0.9 * cylinder_tables.v_max
        for coeffs in (F.OutflowCoeffs(d=2.0), F.OutflowCoeffs(e=1.0),
                       F.OutflowCoeffs(f=-3.0)):
            assert F.outflow_speed(coeffs, theta, vol, cylinder_tables) == 0.0

    def test_clamped_nonnegative(self, cylinder_tables):
        v = F.outflow_speed(F.OutflowCoeffs(a=-5.0), math.radians(110),
                            0.5 * cylinder_tables.v_max, cylinder_tables)
        assert v == 0.0


class TestStep:
    def test_no_outflow_section_keeps_volume(self, cylinder_tables):
        state = F.FluidState(vol=0.3 * cylinder_tables.v_max)
        out = F.step(state, math.radians(10), 0.05, cylinder_tables,
                     F.OutflowCoeffs(a=1.0, d=1.0))
        assert out.vol == state.vol

    def test_forward_euler_arithmetic(self, synthetic_tables):
        # A = 2e-4 at (theta=0.1, vol=1e-5); force v = 0.5 via pure slide term
        tab = synthetic_tables
        state = F.FluidState(vol=1.0e-5)
        # choose coefficients so the predicted speed is exactly 0.5
        s = G.lookup(tab, 0.1, 1.0e-5)
        b = F.bernoulli_speed(s.dh)
        coeffs = F.OutflowCoeffs(a=0.5 / b)
        out = F.step(state, 0.1, 0.01, tab, coeffs)
        assert out.v_out == pytest.approx(0.5, rel=1e-12)
        assert out.vol == pytest.approx(1.0e-5 - 2.0e-4 * 0.5 * 0.01, rel=1e-12)

    def test_clamp_at_empty(self, synthetic_tables):
        state = F.FluidState(vol=1e-8)
        out = F.step(state, 0.3, 10.0, synthetic_tables,
                     F.OutflowCoeffs(a=5.0))
        assert out.vol == 0.0

    def test_dt_positive(self, synthetic_tables):
        with pytest.raises(ValueError):
            F.step(F.FluidState(vol=1e-5), 0.1, 0.0, synthetic_tables,
                   F.OutflowCoeffs())


class TestRollout:
    def test_constant_upright_keeps_volume(self, cylinder_tables):
        thetas = np.zeros(40)
        traj = F.rollout(F.FluidState(vol=0.5 * cylinder_tables.v_max),
                         thetas, 0.05, cylinder_tables,
                         F.OutflowCoeffs(a=1.0, d=1.0))
        assert np.all(traj.vol == traj.vol[0])

    def test_cylinder_speed_nondecreasing_over_outflow(self, cylinder_tables):
        thetas = np.linspace(0, math.radians(150), 100)
        traj = F.rollout(F.FluidState(vol=0.6 * cylinder_tables.v_max),
                         thetas, 2.0 / 99, cylinder_tables,
                         F.OutflowCoeffs(a=0.3, d=2.0))
        prev_vol = np.concatenate([[traj.vol[0]], traj.vol[:-1]])
        flow = (traj.v_out > 0) & (prev_vol > 1e-9)
        dv = np.diff(traj.v_out[np.where(flow)[0]])
        assert np.all(dv >= -1e-6 * traj.v_out.max())

    def test_oval_speed_rises_then_falls(self, oval_tables):
        thetas = np.linspace(0, math.radians(150), 100)
        traj = F.rollout(F.FluidState(vol=0.6 * oval_tables.v_max),
                         thetas, 2.0 / 99, oval_tables,
                         F.OutflowCoeffs(a=1.0, d=0.3))
        prev_vol = np.concatenate([[traj.vol[0]], traj.vol[:-1]])
        idx = np.where((traj.v_out > 0) & (prev_vol > 1e-9))[0]
        v = traj.v_out[idx]
        peak = int(np.argmax(v))
        assert 0 < peak < len(v) - 1
        tol = 1e-6 * v.max()
        assert np.all(np.diff(v[:peak + 1]) >= -tol)
        assert np.all(np.diff(v[peak:]) <= tol)

    def test_deterministic(self, cylinder_tables):
        thetas = np.linspace(0, 2.0, 50)
        a = F.rollout(F.FluidState(vol=1e-4), thetas, 0.05, cylinder_tables,
                      F.OutflowCoeffs(a=0.8, d=1.0))
        b = F.rollout(F.FluidState(vol=1e-4), thetas, 0.05, cylinder_tables,
                      F.OutflowCoeffs(a=0.8, d=1.0))
        assert a.vol.tobytes() == b.vol.tobytes()
        assert a.v_out.tobytes() == b.v_out.tobytes()

    @given(vol0=st.floats(1e-6, 2.8e-4), end=st.floats(0.1, math.pi),
           seed=st.integers(0, 10 ** 6))
    def test_volume_never_increases(self, cylinder_tables, vol0, end, seed):
        rng = np.random.default_rng(seed)
        thetas = np.sort(rng.uniform(0.0, end, 30))
        traj = F.rollout(F.FluidState(vol=vol0), thetas, 0.05,
                         cylinder_tables, F.OutflowCoeffs(a=1.0, d=1.5))
        assert np.all(np.diff(traj.vol) <= 1e-18)
        assert np.all(traj.vol >= 0.0)
        assert np.all(traj.v_out >= 0.0)


class TestFit:
    def make_samples(self, tables, coeffs, n=50, seed=0):
        rng = np.random.default_rng(seed)
        thetas = rng.uniform(math.radians(40), math.radians(150), n)
        vols = rng.uniform(0.05, 1.0, n) * tables.v_max
        q = tables.interp_many(thetas, vols)
        X = F._features(q["dh"], thetas)
        v = X @ coeffs.as_array()
        return [F.TrainingSample(v_out_next=max(float(vi), 0.0),
                                 theta_next=float(t), vol=float(vo),
                                 dh=float(d))
                for vi, t, vo, d in zip(v, thetas, vols, q["dh"])]

    def test_exact_recovery(self, cylinder_tables):
        true = F.OutflowCoeffs(1.0, 0.5, -0.2, 0.3, 0.0, 0.0)
        samples = self.make_samples(cylinder_tables, true)
        fit = F.fit_coefficients(samples, cylinder_tables)
        err = np.abs(fit.coeffs.as_array() - true.as_array())
        assert err.max() <= 1e-8 * max(1.0, np.abs(true.as_array()).max())

    def test_zero_targets_zero_coeffs(self, cylinder_tables):
        samples = self.make_samples(cylinder_tables, F.OutflowCoeffs())
        fit = F.fit_coefficients(samples, cylinder_tables)
        assert np.abs(fit.coeffs.as_array()).max() <= 1e-10
        assert fit.rmse <= 1e-12

    def test_insufficient_samples(self, cylinder_tables):
        samples = self.make_samples(cylinder_tables, F.OutflowCoeffs(a=1.0))[:5]
        with pytest.raises(ValueError, match="insufficient"):
            F.fit_coefficients(samples, cylinder_tables)

    def test_rank_deficiency_names_columns(self, cylinder_tables):
        # below-horizontal samples kill every slide feature
        rng = np.random.default_rng(1)
        thetas = rng.uniform(math.radians(55), math.radians(85), 30)
        vols = rng.uniform(0.3, 1.0, 30) * cylinder_tables.v_max
        q = cylinder_tables.interp_many(thetas, vols)
        samples = [F.TrainingSample(v_out_next=1.0, theta_next=float(t),
                                    vol=float(v), dh=float(d))
                   for t, v, d in zip(thetas, vols, q["dh"])]
        with pytest.raises(ValueError, match="slide_sin"):
            F.fit_coefficients(samples, cylinder_tables)

    def test_residual_beats_zero_model(self, cylinder_tables):
        rng = np.random.default_rng(2)
        true = F.OutflowCoeffs(0.8, 0.1, 0.0, 1.0, 0.2, 0.0)
        samples = self.make_samples(cylinder_tables, true, n=120, seed=3)
        # corrupt targets with noise
        noisy = [F.TrainingSample(v_out_next=s.v_out_next + abs(rng.normal(0, 0.05)),
                                  theta_next=s.theta_next, vol=s.vol, dh=s.dh)
                 for s in samples]
        fit = F.fit_coefficients(noisy, cylinder_tables)
        y = np.array([s.v_out_next for s in noisy])
        zero_rmse = float(np.sqrt(np.mean(y ** 2)))
        assert fit.rmse <= zero_rmse + 1e-12


class TestFlightCurve:
    def test_zero_azimuth_identity(self):
        assert np.allclose(F.azimuth_rotation(0.0), np.eye(3))

    def test_below_horizontal_is_horizontal(self, cylinder_tables):
        lean = F.LeanAzimuth(theta=math.radians(60), phi=0.0)
        c = F.flight_curve(F.FluidState(vol=1e-4, v_out=1.0), lean,
                           np.zeros(3), cylinder_tables)
        assert c.v_out == pytest.approx([1.0, 0.0, 0.0])

    def test_past_horizontal_direction(self, cylinder_tables):
        lean = F.LeanAzimuth(theta=math.radians(120), phi=0.0)
        c = F.flight_curve(F.FluidState(vol=1e-4, v_out=1.0), lean,
                           np.zeros(3), cylinder_tables)
        assert c.v_out == pytest.approx([0.8660254, 0.0, -0.5], abs=1e-6)

    def test_azimuth_rotates_direction(self, cylinder_tables):
        lean = F.LeanAzimuth(theta=math.radians(120), phi=math.pi / 2)
        c = F.flight_curve(F.FluidState(vol=1e-4, v_out=1.0), lean,
                           np.zeros(3), cylinder_tables)
        assert c.v_out == pytest.approx([0.0, 0.8660254, -0.5], abs=1e-6)

    def test_speed_preserved(self, cylinder_tables):
        lean = F.LeanAzimuth(theta=math.radians(100), phi=0.7)
        c = F.flight_curve(F.FluidState(vol=1e-4, v_out=0.37), lean,
                           np.array([0.1, 0.2, 0.3]), cylinder_tables)
        assert np.linalg.norm(c.v_out) == pytest.approx(0.37, rel=1e-12)

    @given(v=st.floats(0.0, 3.0), t=st.floats(0.0, 2.0))
    def test_horizontal_velocity_constant(self, v, t):
        curve = F.QuadraticCurve(gravity=np.array([0.0, 0.0, -GRAV]),
                                 v_out=np.array([v, 0.3 * v, -0.1]),
                                 origin=np.zeros(3))
        vel = curve.velocity(t)
        assert vel[0] == curve.v_out[0]
        assert vel[1] == curve.v_out[1]
        assert vel[2] == pytest.approx(curve.v_out[2] - GRAV * t, rel=1e-12)


class TestTimeToAltitude:
    def curve(self, origin, v):
        return F.QuadraticCurve(gravity=np.array([0.0, 0.0, -GRAV]),
                                v_out=np.asarray(v, dtype=float),
                                origin=np.asarray(origin, dtype=float))

    def test_free_fall(self):
        t = F.time_to_altitude(self.curve([0, 0, 0.2], [0.5, 0, 0]),
                               [1.0, 0.0, 0.0])
        assert t == pytest.approx(math.sqrt(2 * 0.2 / GRAV), rel=1e-9)
        assert t == pytest.approx(0.2019, abs=2e-4)

    def test_same_altitude_root_zero(self):
        t = F.time_to_altitude(self.curve([0, 0, 0.5], [1, 0, 0]),
                               [2.0, 0.0, 0.5])
        assert t == 0.0

    def test_below_and_descending_none(self):
        t = F.time_to_altitude(self.curve([0, 0, 0.4], [0, 0, -1.0]),
                               [0.0, 0.0, 0.5])
        assert t is None
