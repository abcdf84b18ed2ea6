"""Tests for the flat-plate fixed-wing dynamics model."""

import dataclasses

import numpy as np
import pytest

from fwnav.dynamics import (
    ControlInput,
    VehicleParams,
    VehicleState,
    _derivative_packed,
    derivative,
    integrate_rk4,
    load_bundled_vehicle,
    load_vehicle_params,
    pitch_state,
    rollout,
    trim_level_flight,
)
from fwnav.se3 import quat_from_axis_angle, quat_to_matrix


def conservative_params():
    """All aero coefficients zeroed: rigid body under gravity only."""
    return VehicleParams(
        wing_normal_coeff=0.0, parasitic_drag_coeff=0.0, side_normal_coeff=0.0,
        tail_normal_coeff=0.0, fin_normal_coeff=0.0, propwash_speed=0.0,
        elevator_gain=0.0, rudder_gain=0.0, aileron_moment_coeff=0.0,
        roll_damping=0.0, rate_damping=(0.0, 0.0, 0.0))


# ----------------------------------------------------------------------
# types and parameter files
# ----------------------------------------------------------------------

def test_vehicle_state_validation():
    with pytest.raises(ValueError):
        VehicleState([0, 0, 0], [1, 0, 0, 1e-3], np.zeros(3), np.zeros(3))
    with pytest.raises(ValueError):
        VehicleState([0, 0, np.nan], [1, 0, 0, 0], np.zeros(3), np.zeros(3))
    s = VehicleState([1, 2, 3], [1, 0, 0, 0], [4, 5, 6], [7, 8, 9])
    rt = VehicleState.from_vector(s.as_vector())
    assert np.allclose(rt.as_vector(), s.as_vector())


def test_control_input_bounds():
    with pytest.raises(ValueError):
        ControlInput(aileron=1.5)
    with pytest.raises(ValueError):
        ControlInput(throttle=-0.1)
    c = ControlInput.clipped(aileron=3.0, throttle=2.0)
    assert c.aileron == 1.0 and c.throttle == 1.0
    assert np.allclose(ControlInput.from_array(c.as_array()).as_array(), c.as_array())


def test_vehicle_params_validation():
    with pytest.raises(ValueError):
        VehicleParams(mass=-0.1)
    with pytest.raises(ValueError):
        VehicleParams(wing_area=0.0)
    with pytest.raises(ValueError):
        VehicleParams(roll_damping=-0.01)
    # zero coefficients are allowed: they disable an effect
    conservative_params()


def test_vehicle_param_file_roundtrip(tmp_path):
    p = VehicleParams(mass=0.85, max_thrust=12.0, inertia=(0.02, 0.03, 0.04))
    path = tmp_path / "veh.yaml"
    data = {f.name: getattr(p, f.name) for f in dataclasses.fields(p)}
    data["inertia"] = list(data["inertia"])
    data["rate_damping"] = list(data["rate_damping"])
    import yaml
    path.write_text(yaml.safe_dump(data))
    q = load_vehicle_params(path)
    assert q == p

    bad = tmp_path / "bad.yaml"
    bad.write_text("mass: 0.7\nwingspan_feet: 3.5\n")
    with pytest.raises(ValueError):
        load_vehicle_params(bad)


def test_bundled_vehicle_file_loads():
    p = load_bundled_vehicle()
    assert p == VehicleParams()
    assert p.wing_span == pytest.approx(1.07)


# ----------------------------------------------------------------------
# derivative
# ----------------------------------------------------------------------

def test_free_fall_derivative():
    p = VehicleParams()
    s = VehicleState.at_rest(position=[1.0, -2.0, -10.0])
    xd = derivative(s, ControlInput(), p)
    assert np.allclose(xd[0:3], 0.0)            # position rate
    assert np.allclose(xd[3:7], 0.0)            # quaternion rate
    assert np.allclose(xd[7:10], [0, 0, p.gravity])  # gravity only
    assert np.allclose(xd[10:13], 0.0)          # angular acceleration


def test_wing_force_matches_flat_plate_theory():
    # with only the wing active, lift ~ sin(a)cos(a) and drag ~ sin^2(a)
    p = dataclasses.replace(conservative_params(), wing_normal_coeff=5.0)
    speed = 8.0
    for alpha in np.linspace(-1.2, 1.2, 25):
        s = pitch_state(speed, alpha)
        xd = derivative(s, ControlInput(), p)
        f_body = (xd[7:10] - quat_to_matrix(s.orientation).T
                  @ [0, 0, p.gravity]) * p.mass
        v_hat = s.velocity / speed
        drag = -f_body @ v_hat
        lift = -(f_body - (f_body @ v_hat) * v_hat)[2] / max(np.cos(alpha), 1e-9)
        coef = p.k_wing * speed**2
        assert drag == pytest.approx(coef * np.sin(alpha) ** 2, abs=1e-9)
        assert lift == pytest.approx(
            coef * np.sin(alpha) * np.cos(alpha) * np.cos(alpha) / max(np.cos(alpha), 1e-9),
            abs=1e-9)


def test_trim_bisection_oracle():
    """Find steady level flight with nested bisection, independently of the
    module's trim solver, then check the derivative field at that trim."""
    p = VehicleParams()
    speed = 6.0

    def resid(alpha, de, dt):
        s = pitch_state(speed, alpha)
        u = np.array([0.0, de, 0.0, dt])
        return _derivative_packed(s.as_vector(), u, p)

    def bisect(f, lo, hi, iters=44):
        flo = f(lo)
        assert flo * f(hi) <= 0.0
        for _ in range(iters):
            mid = 0.5 * (lo + hi)
            if flo * f(mid) <= 0.0:
                hi = mid
            else:
                lo, flo = mid, f(mid)
        return 0.5 * (lo + hi)

    def solve_elevator(alpha, dt):
        return bisect(lambda de: resid(alpha, de, dt)[11], -1.0, 1.0)

    def solve_throttle(alpha):
        def x_resid(dt):
            return resid(alpha, solve_elevator(alpha, dt), dt)[7]
        return bisect(x_resid, 0.0, 1.0)

    def z_resid(alpha):
        dt = solve_throttle(alpha)
        return resid(alpha, solve_elevator(alpha, dt), dt)[9]

    # bracket keeps the inner elevator search solvable (tan(alpha) must stay
    # below the full-deflection tail incidence) while straddling the trim
    alpha = bisect(z_resid, 0.05, 0.35, iters=40)
    dt = solve_throttle(alpha)
    de = solve_elevator(alpha, dt)

    xd = resid(alpha, de, dt)
    # position derivative equals the trim speed along world x, level flight
    assert np.allclose(xd[0:3], [speed, 0.0, 0.0], atol=1e-6)
    # all other derivatives vanish
    assert np.max(np.abs(xd[3:])) < 1e-6

    # the module's trim solver agrees with the bisection oracle
    st_m, u_m = trim_level_flight(p, speed)
    alpha_m = np.arctan2(st_m.velocity[2], st_m.velocity[0])
    assert alpha_m == pytest.approx(alpha, abs=1e-7)
    assert u_m.elevator == pytest.approx(de, abs=1e-7)
    assert u_m.throttle == pytest.approx(dt, abs=1e-7)


def test_post_stall_alpha_90_is_finite_and_smooth():
    p = VehicleParams()
    for vz in (8.0, -8.0):  # alpha = +-90 degrees
        s = VehicleState([0, 0, 0], [1, 0, 0, 0], [0.0, 0.0, vz], np.zeros(3))
        u = ControlInput(0.1, -0.2, 0.05, 0.5)
        x0, ua = s.as_vector(), u.as_array()
        f0 = _derivative_packed(x0, ua, p)
        assert np.all(np.isfinite(f0))
        eps = 1e-7
        for i in range(13):
            dx = np.zeros(13)
            dx[i] = eps
            fwd = (_derivative_packed(x0 + dx, ua, p) - f0) / eps
            bwd = (f0 - _derivative_packed(x0 - dx, ua, p)) / eps
            assert np.max(np.abs(fwd - bwd)) < 1e-4


def test_derivative_c1_everywhere_sampled():
    """One-sided finite-difference Jacobians from both sides agree, for
    random states and for states sitting exactly on the |.| kinks."""
    p = VehicleParams()
    rng = np.random.default_rng(7)
    states = []
    for _ in range(12):
        q = rng.normal(size=4)
        q /= np.linalg.norm(q)
        states.append(np.concatenate([
            rng.uniform(-5, 5, 3), q,
            rng.uniform(-8, 8, 3), rng.uniform(-4, 4, 3)]))
    # kink candidates: zero axial speed, zero total speed, propwash-cancelling
    states.append(np.array([0, 0, 0, 1, 0, 0, 0, 0.0, 0.0, 8.0, 0, 0, 0]))
    states.append(np.array([0, 0, 0, 1, 0, 0, 0, 0.0, 0.0, 0.0, 1, 2, 3]))
    states.append(np.array([0, 0, 0, 1, 0, 0, 0, -2.0, 0.0, 0.0, 0, 0, 0]))
    eps = 1e-7
    for x0 in states:
        ua = np.array([0.3, -0.4, 0.2, 0.5])
        if x0[7] == -2.0:
            ua[3] = 0.5  # u_t = vx + propwash*throttle = 0 exactly
        f0 = _derivative_packed(x0, ua, p)
        for i in range(13):
            dx = np.zeros(13)
            dx[i] = eps
            fwd = (_derivative_packed(x0 + dx, ua, p) - f0) / eps
            bwd = (f0 - _derivative_packed(x0 - dx, ua, p)) / eps
            assert np.max(np.abs(fwd - bwd)) < 1e-4
        for j in range(4):
            du = np.zeros(4)
            du[j] = eps
            fwd = (_derivative_packed(x0, ua + du, p) - f0) / eps
            bwd = (f0 - _derivative_packed(x0, ua - du, p)) / eps
            assert np.max(np.abs(fwd - bwd)) < 1e-4


# ----------------------------------------------------------------------
# integration
# ----------------------------------------------------------------------

def test_rk4_fixed_point_leaves_state_unchanged():
    # hanging on the prop: thrust balances weight, all rates zero
    p = VehicleParams()
    q = quat_from_axis_angle(np.array([0.0, 1.0, 0.0]), np.pi / 2)
    s = VehicleState([0, 0, -5], q, np.zeros(3), np.zeros(3))
    u = ControlInput(throttle=p.mass * p.gravity / p.max_thrust)
    assert np.max(np.abs(derivative(s, u, p))) < 1e-12
    s1 = integrate_rk4(s, u, 0.05, p)
    assert np.allclose(s1.as_vector(), s.as_vector(), atol=1e-12)


def test_rk4_rejects_nonpositive_dt():
    p = VehicleParams()
    with pytest.raises(ValueError):
        integrate_rk4(VehicleState.at_rest(), ControlInput(), 0.0, p)


def test_ballistic_drop_closed_form():
    p = conservative_params()
    s = rollout(VehicleState.at_rest(), ControlInput(), 1.0, 1e-3, p)
    dz = s.position[2]
    assert abs(dz - 0.5 * p.gravity) / (0.5 * p.gravity) < 1e-6


def test_rk4_order_richardson():
    """Halving dt cuts the error against a dt/64 reference by about 16x."""
    p = VehicleParams()
    s0 = VehicleState([0, 0, -10], [1, 0, 0, 0], [6, 0.5, 1.0], [1.0, -0.5, 0.3])
    u = ControlInput(0.3, -0.4, 0.1, 0.8)
    horizon = 0.4

    def final(dt):
        return rollout(s0, u, horizon, dt, p).as_vector()

    ref = final(horizon / 512)
    errs = [np.linalg.norm(final(horizon / n) - ref) for n in (8, 16, 32)]
    for a, b in zip(errs, errs[1:]):
        assert 11.0 < a / b < 23.0


def test_energy_conservation_without_aero():
    p = conservative_params()
    rng = np.random.default_rng(0)
    q = rng.normal(size=4)
    q /= np.linalg.norm(q)
    s = VehicleState([0, 0, -10], q, [5, 1, -2], [3, -2, 1.5])

    def energy(st):
        v_world = quat_to_matrix(st.orientation) @ st.velocity
        rot = 0.5 * st.angular_velocity @ (np.asarray(p.inertia) * st.angular_velocity)
        return (0.5 * p.mass * v_world @ v_world + rot
                - p.mass * p.gravity * st.position[2])

    e0 = energy(s)
    sT = rollout(s, ControlInput(), 1.0, 1e-3, p)
    assert abs(energy(sT) - e0) / abs(e0) < 1e-6


def test_quaternion_norm_preserved():
    p = VehicleParams()
    s = VehicleState([0, 0, -10], [1, 0, 0, 0], [6, 0, 0], [4.0, 3.0, -2.0])
    u = ControlInput(0.8, -0.6, 0.4, 1.0)
    for _ in range(200):
        s = integrate_rk4(s, u, 0.005, p)
        assert abs(np.linalg.norm(s.orientation) - 1.0) < 1e-9
    assert np.all(np.isfinite(s.as_vector()))


def test_rollout_accepts_time_varying_control():
    p = VehicleParams()
    s0, u0 = trim_level_flight(p, 6.0)

    def schedule(t):
        return ControlInput(0.0, u0.elevator, 0.0, u0.throttle if t < 0.5 else 0.0)

    s = rollout(s0, schedule, 1.0, 1e-3, p)
    assert np.all(np.isfinite(s.as_vector()))
    assert s.position[0] > 3.0  # still moved forward
