"""Fixed-wing rigid-body dynamics with a smooth flat-plate aero model.

Frames: world is NED-style (z down, gravity +z); body is x forward, y
right, z down. Velocity and angular velocity live in the body frame; the
quaternion rotates body into world.

The aerodynamic model keeps control authority through post-stall angles of
attack: every surface generates a normal force proportional to its local
normal-velocity component times local speed (F = -k * w * sqrt(u^2 + w^2)),
which reduces to lift ~ sin(a)cos(a) and drag ~ sin^2(a) flat-plate theory
and is C^1 in the state everywhere, as the gradient-based optimizer
requires. Tail and fin sit on lever arms so pitch/yaw damping emerges from
local flow; propwash over the tail surfaces scales with throttle, which is
what preserves control at post-stall airspeeds. Parameter values are
documented estimates for a ~0.7 kg, 42-inch-span EPP aerobatic airframe,
not measured data; the parameter file makes the model swappable.
"""

from __future__ import annotations

import dataclasses
import importlib.resources
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import yaml

from .se3 import quat_multiply, quat_to_matrix

GRAVITY = 9.81


@dataclass(frozen=True)
class VehicleState:
    position: np.ndarray      # world, m
    orientation: np.ndarray   # unit quaternion wxyz, body -> world
    velocity: np.ndarray      # body, m/s
    angular_velocity: np.ndarray  # body, rad/s

    def __post_init__(self):
        object.__setattr__(self, "position", np.asarray(self.position, float))
        q = np.asarray(self.orientation, float)
        n = np.linalg.norm(q)
        if abs(n - 1.0) > 1e-9:
            raise ValueError(f"quaternion norm {n} not within 1e-9 of 1")
        object.__setattr__(self, "orientation", q / n)
        object.__setattr__(self, "velocity", np.asarray(self.velocity, float))
        object.__setattr__(self, "angular_velocity",
                           np.asarray(self.angular_velocity, float))
        for name in ("position", "orientation", "velocity", "angular_velocity"):
            if not np.all(np.isfinite(getattr(self, name))):
                raise ValueError(f"{name} must be finite")

    def as_vector(self) -> np.ndarray:
        """Packed 13-vector (position, quaternion, velocity, body rates)."""
        return np.concatenate([self.position, self.orientation,
                               self.velocity, self.angular_velocity])

    @staticmethod
    def from_vector(x: np.ndarray) -> "VehicleState":
        x = np.asarray(x, dtype=float)
        q = x[3:7] / np.linalg.norm(x[3:7])
        return VehicleState(x[0:3], q, x[7:10], x[10:13])

    @staticmethod
    def at_rest(position=(0.0, 0.0, 0.0)) -> "VehicleState":
        return VehicleState(position, [1, 0, 0, 0], np.zeros(3), np.zeros(3))


@dataclass(frozen=True)
class ControlInput:
    aileron: float = 0.0   # [-1, 1]
    elevator: float = 0.0  # [-1, 1]
    rudder: float = 0.0    # [-1, 1]
    throttle: float = 0.0  # [0, 1]

    def __post_init__(self):
        tol = 1e-9
        for name in ("aileron", "elevator", "rudder"):
            if abs(getattr(self, name)) > 1.0 + tol:
                raise ValueError(f"{name} outside [-1, 1]")
        if not -tol <= self.throttle <= 1.0 + tol:
            raise ValueError("throttle outside [0, 1]")

    @staticmethod
    def clipped(aileron=0.0, elevator=0.0, rudder=0.0, throttle=0.0) -> "ControlInput":
        return ControlInput(float(np.clip(aileron, -1, 1)),
                            float(np.clip(elevator, -1, 1)),
                            float(np.clip(rudder, -1, 1)),
                            float(np.clip(throttle, 0, 1)))

    def as_array(self) -> np.ndarray:
        return np.array([self.aileron, self.elevator, self.rudder, self.throttle])

    @staticmethod
    def from_array(u: np.ndarray) -> "ControlInput":
        return ControlInput(float(u[0]), float(u[1]), float(u[2]), float(u[3]))


CONTROL_LOWER = np.array([-1.0, -1.0, -1.0, 0.0])
CONTROL_UPPER = np.array([1.0, 1.0, 1.0, 1.0])


@dataclass(frozen=True)
class VehicleParams:
    mass: float = 0.70                 # kg
    inertia: tuple = (0.015, 0.025, 0.035)  # kg m^2, body-axis diagonal
    wing_area: float = 0.25            # m^2
    wing_span: float = 1.07            # m
    wing_chord: float = 0.23           # m
    wing_normal_coeff: float = 5.0     # flat-plate normal-force slope surrogate
    parasitic_drag_coeff: float = 0.08 # axial u|u| drag coefficient
    side_area: float = 0.06            # m^2 fuselage lateral plate
    side_normal_coeff: float = 2.0
    tail_area: float = 0.045           # m^2
    tail_arm: float = 0.45             # m behind center of mass
    tail_normal_coeff: float = 5.0
    fin_area: float = 0.025            # m^2
    fin_arm: float = 0.45              # m
    fin_normal_coeff: float = 5.0
    max_thrust: float = 10.0           # N along body x at full throttle
    propwash_speed: float = 4.0        # m/s axial flow over tail at full throttle
    elevator_gain: float = 0.40        # rad incidence at full deflection
    rudder_gain: float = 0.40          # rad
    aileron_moment_coeff: float = 0.02 # N m per (m/s)^2 at full deflection
    roll_damping: float = 0.02         # N m s/m per rad/s, scaled by airspeed
    rate_damping: tuple = (0.002, 0.004, 0.004)  # N m s linear floor
    air_density: float = 1.225         # kg/m^3
    gravity: float = GRAVITY           # m/s^2

    # Dimensional quantities must be strictly positive; force coefficients
    # and gains may be zero (a zeroed coefficient disables that effect,
    # which the energy-conservation checks rely on).
    _POSITIVE = ("mass", "inertia", "wing_area", "wing_span", "wing_chord",
                 "side_area", "tail_area", "tail_arm", "fin_area", "fin_arm",
                 "max_thrust", "air_density", "gravity")

    def __post_init__(self):
        for f in dataclasses.fields(self):
            if f.name.startswith("_"):
                continue
            arr = np.atleast_1d(np.asarray(getattr(self, f.name), dtype=float))
            if not np.all(np.isfinite(arr)):
                raise ValueError(f"{f.name} must be finite")
            bad = np.any(arr <= 0) if f.name in self._POSITIVE else np.any(arr < 0)
            if bad:
                kind = "positive" if f.name in self._POSITIVE else "non-negative"
                raise ValueError(f"{f.name} must be {kind}")

    # derived plate gains k = 1/2 rho S C
    @property
    def k_wing(self) -> float:
        return 0.5 * self.air_density * self.wing_area * self.wing_normal_coeff

    @property
    def k_tail(self) -> float:
        return 0.5 * self.air_density * self.tail_area * self.tail_normal_coeff

    @property
    def k_fin(self) -> float:
        return 0.5 * self.air_density * self.fin_area * self.fin_normal_coeff

    @property
    def k_side(self) -> float:
        return 0.5 * self.air_density * self.side_area * self.side_normal_coeff

    @property
    def k_drag(self) -> float:
        return 0.5 * self.air_density * self.wing_area * self.parasitic_drag_coeff

    @property
    def inertia_matrix(self) -> np.ndarray:
        return np.diag(self.inertia)


def load_vehicle_params(path) -> VehicleParams:
    data = yaml.safe_load(Path(path).read_text()) or {}
    known = {f.name for f in dataclasses.fields(VehicleParams)}
    unknown = set(data) - known
    if unknown:
        raise ValueError(f"unknown vehicle parameters: {sorted(unknown)}")
    if "inertia" in data:
        data["inertia"] = tuple(float(x) for x in data["inertia"])
    if "rate_damping" in data:
        data["rate_damping"] = tuple(float(x) for x in data["rate_damping"])
    return VehicleParams(**data)


def load_bundled_vehicle(name: str = "aerobatic_42in") -> VehicleParams:
    res = importlib.resources.files("fwnav") / "vehicles" / f"{name}.yaml"
    with importlib.resources.as_file(res) as p:
        return load_vehicle_params(p)


# ----------------------------------------------------------------------
# forces and moments (body frame, gravity excluded)
# ----------------------------------------------------------------------

def forces_moments(velocity, rates, control, params: VehicleParams):
    """Aerodynamic + thrust wrench in the body frame.

    Gravity is attitude-dependent and added by the caller. Returns
    (force (3,), moment (3,)).
    """
    vx, vy, vz = velocity
    wx, wy, wz = rates
    da, de, dr, dt = control

    u_t = vx + params.propwash_speed * dt          # axial flow aft of prop
    v_w = np.hypot(vx, vz)

    f = np.zeros(3)
    m = np.zeros(3)

    # wing plate normal force
    f[2] -= params.k_wing * vz * v_w
    # parasitic axial drag and fuselage side plate
    f[0] -= params.k_drag * vx * abs(vx)
    f[1] -= params.k_side * vy * np.hypot(vx, vy)
    # thrust
    f[0] += params.max_thrust * dt

    # horizontal tail: local flow includes pitch rate and elevator incidence
    w_t = vz + params.tail_arm * wy - params.elevator_gain * de * u_t
    fz_t = -params.k_tail * w_t * np.hypot(u_t, w_t)
    f[2] += fz_t
    m[1] += params.tail_arm * fz_t

    # vertical fin: yaw rate and rudder incidence
    v_f = vy - params.fin_arm * wz + params.rudder_gain * dr * u_t
    fy_f = -params.k_fin * v_f * np.hypot(u_t, v_f)
    f[1] += fy_f
    m[2] -= params.fin_arm * fy_f

    # ailerons ride the propwash as well, keeping post-stall roll authority
    m[0] += params.aileron_moment_coeff * da * u_t * abs(u_t)
    # softened speed norm keeps the damping C^1 through zero airspeed
    m[0] -= params.roll_damping * wx * np.sqrt(vx * vx + vz * vz + 0.25)
    m -= np.asarray(params.rate_damping) * rates
    return f, m


def forces_moments_jacobian(velocity, rates, control, params: VehicleParams):
    """forces_moments plus exact partial derivatives.

    Returns (f, m, df, dm) where df/dm have shape (3, 10) with columns
    ordered (velocity, rates, control). Kink terms (|x|, hypot) use the
    shared one-sided limit, matching the model's C^1 construction.
    """
    vx, vy, vz = velocity
    wx, wy, wz = rates
    da, de, dr, dt = control

    def unit(i):
        row = np.zeros(10)
        row[i] = 1.0
        return row

    e_vx, e_vy, e_vz = unit(0), unit(1), unit(2)
    e_wx, e_wy, e_wz = unit(3), unit(4), unit(5)
    e_da, e_de, e_dr, e_dt = unit(6), unit(7), unit(8), unit(9)

    u_t = vx + params.propwash_speed * dt
    du_t = e_vx + params.propwash_speed * e_dt

    def hyp(a, b, da_, db_):
        v = np.hypot(a, b)
        dv = (a * da_ + b * db_) / v if v > 0 else np.zeros(10)
        return v, dv

    f = np.zeros(3)
    m = np.zeros(3)
    df = np.zeros((3, 10))
    dm = np.zeros((3, 10))

    v_w, dv_w = hyp(vx, vz, e_vx, e_vz)
    f[2] -= params.k_wing * vz * v_w
    df[2] -= params.k_wing * (v_w * e_vz + vz * dv_w)

    f[0] -= params.k_drag * vx * abs(vx)
    df[0] -= params.k_drag * 2.0 * abs(vx) * e_vx
    v_s, dv_s = hyp(vx, vy, e_vx, e_vy)
    f[1] -= params.k_side * vy * v_s
    df[1] -= params.k_side * (v_s * e_vy + vy * dv_s)
    f[0] += params.max_thrust * dt
    df[0] += params.max_thrust * e_dt

    w_t = vz + params.tail_arm * wy - params.elevator_gain * de * u_t
    dw_t = (e_vz + params.tail_arm * e_wy
            - params.elevator_gain * (de * du_t + u_t * e_de))
    v_t, dv_t = hyp(u_t, w_t, du_t, dw_t)
    fz_t = -params.k_tail * w_t * v_t
    dfz_t = -params.k_tail * (v_t * dw_t + w_t * dv_t)
    f[2] += fz_t
    df[2] += dfz_t
    m[1] += params.tail_arm * fz_t
    dm[1] += params.tail_arm * dfz_t

    v_f = vy - params.fin_arm * wz + params.rudder_gain * dr * u_t
    dv_f = (e_vy - params.fin_arm * e_wz
            + params.rudder_gain * (dr * du_t + u_t * e_dr))
    v_fs, dv_fs = hyp(u_t, v_f, du_t, dv_f)
    fy_f = -params.k_fin * v_f * v_fs
    dfy_f = -params.k_fin * (v_fs * dv_f + v_f * dv_fs)
    f[1] += fy_f
    df[1] += dfy_f
    m[2] -= params.fin_arm * fy_f
    dm[2] -= params.fin_arm * dfy_f

    m[0] += params.aileron_moment_coeff * da * u_t * abs(u_t)
    dm[0] += params.aileron_moment_coeff * (
        da * 2.0 * abs(u_t) * du_t + u_t * abs(u_t) * e_da)
    s_v = np.sqrt(vx * vx + vz * vz + 0.25)
    ds_v = (vx * e_vx + vz * e_vz) / s_v
    m[0] -= params.roll_damping * wx * s_v
    dm[0] -= params.roll_damping * (s_v * e_wx + wx * ds_v)
    rd = np.asarray(params.rate_damping)
    m -= rd * rates
    dm[0] -= rd[0] * e_wx
    dm[1] -= rd[1] * e_wy
    dm[2] -= rd[2] * e_wz
    return f, m, df, dm


def forces_moments_batch(velocities, rates, controls, params: VehicleParams):
    """Vectorized forces_moments_jacobian over M samples.

    Shapes: velocities/rates (M, 3), controls (M, 4); returns
    (f (M, 3), m (M, 3), df (M, 3, 10), dm (M, 3, 10)). Same model and
    one-sided kink conventions as the scalar version.
    """
    v = np.atleast_2d(np.asarray(velocities, dtype=float))
    w = np.atleast_2d(np.asarray(rates, dtype=float))
    u = np.atleast_2d(np.asarray(controls, dtype=float))
    n = len(v)
    vx, vy, vz = v[:, 0], v[:, 1], v[:, 2]
    wx, wy, wz = w[:, 0], w[:, 1], w[:, 2]
    da, de, dr, dt = u[:, 0], u[:, 1], u[:, 2], u[:, 3]

    def unit(i):
        row = np.zeros((1, 10))
        row[0, i] = 1.0
        return row

    e_vx, e_vy, e_vz = unit(0), unit(1), unit(2)
    e_wx, e_wy, e_wz = unit(3), unit(4), unit(5)
    e_da, e_de, e_dr, e_dt = unit(6), unit(7), unit(8), unit(9)

    def hyp(a, b, da_, db_):
        val = np.hypot(a, b)
        safe = np.where(val > 0.0, val, 1.0)
        dv = (a[:, None] * da_ + b[:, None] * db_) / safe[:, None]
        dv[val == 0.0] = 0.0
        return val, dv

    u_t = vx + params.propwash_speed * dt
    du_t = np.broadcast_to(e_vx + params.propwash_speed * e_dt, (n, 10))

    f = np.zeros((n, 3))
    m = np.zeros((n, 3))
    df = np.zeros((n, 3, 10))
    dm = np.zeros((n, 3, 10))

    v_w, dv_w = hyp(vx, vz, e_vx, e_vz)
    f[:, 2] -= params.k_wing * vz * v_w
    df[:, 2] -= params.k_wing * (v_w[:, None] * e_vz + vz[:, None] * dv_w)

    f[:, 0] -= params.k_drag * vx * np.abs(vx)
    df[:, 0] -= params.k_drag * 2.0 * np.abs(vx)[:, None] * e_vx
    v_s, dv_s = hyp(vx, vy, e_vx, e_vy)
    f[:, 1] -= params.k_side * vy * v_s
    df[:, 1] -= params.k_side * (v_s[:, None] * e_vy + vy[:, None] * dv_s)
    f[:, 0] += params.max_thrust * dt
    df[:, 0] += params.max_thrust * e_dt

    w_t = vz + params.tail_arm * wy - params.elevator_gain * de * u_t
    dw_t = (e_vz + params.tail_arm * e_wy
            - params.elevator_gain * (de[:, None] * du_t
                                      + u_t[:, None] * e_de))
    v_t, dv_t = hyp(u_t, w_t, du_t, dw_t)
    fz_t = -params.k_tail * w_t * v_t
    dfz_t = -params.k_tail * (v_t[:, None] * dw_t + w_t[:, None] * dv_t)
    f[:, 2] += fz_t
    df[:, 2] += dfz_t
    m[:, 1] += params.tail_arm * fz_t
    dm[:, 1] += params.tail_arm * dfz_t

    v_f = vy - params.fin_arm * wz + params.rudder_gain * dr * u_t
    dv_f = (e_vy - params.fin_arm * e_wz
            + params.rudder_gain * (dr[:, None] * du_t
                                    + u_t[:, None] * e_dr))
    v_fs, dv_fs = hyp(u_t, v_f, du_t, dv_f)
    fy_f = -params.k_fin * v_f * v_fs
    dfy_f = -params.k_fin * (v_fs[:, None] * dv_f + v_f[:, None] * dv_fs)
    f[:, 1] += fy_f
    df[:, 1] += dfy_f
    m[:, 2] -= params.fin_arm * fy_f
    dm[:, 2] -= params.fin_arm * dfy_f

    m[:, 0] += params.aileron_moment_coeff * da * u_t * np.abs(u_t)
    dm[:, 0] += params.aileron_moment_coeff * (
        (da * 2.0 * np.abs(u_t))[:, None] * du_t
        + (u_t * np.abs(u_t))[:, None] * e_da)
    s_v = np.sqrt(vx * vx + vz * vz + 0.25)
    ds_v = (vx[:, None] * e_vx + vz[:, None] * e_vz) / s_v[:, None]
    m[:, 0] -= params.roll_damping * wx * s_v
    dm[:, 0] -= params.roll_damping * (s_v[:, None] * e_wx
                                       + wx[:, None] * ds_v)
    rd = np.asarray(params.rate_damping)
    m -= rd * w
    dm[:, 0] -= rd[0] * e_wx
    dm[:, 1] -= rd[1] * e_wy
    dm[:, 2] -= rd[2] * e_wz
    return f, m, df, dm


def derivative(state: VehicleState, control: ControlInput,
               params: VehicleParams) -> np.ndarray:
    """Packed 13-vector derivative (p_dot, q_dot, v_dot, w_dot)."""
    u = control.as_array() if isinstance(control, ControlInput) else np.asarray(control)
    return _derivative_packed(state.as_vector(), u, params)


def _derivative_packed(x: np.ndarray, u: np.ndarray, params: VehicleParams) -> np.ndarray:
    q = x[3:7]
    v = x[7:10]
    w = x[10:13]
    rot = quat_to_matrix(q / np.linalg.norm(q))
    f, m = forces_moments(v, w, u, params)
    grav_body = rot.T @ np.array([0.0, 0.0, params.gravity])
    v_dot = f / params.mass + grav_body - np.cross(w, v)
    inertia = np.asarray(params.inertia)
    w_dot = (m - np.cross(w, inertia * w)) / inertia
    q_dot = 0.5 * quat_multiply(q, np.concatenate(([0.0], w)))
    p_dot = rot @ v
    return np.concatenate([p_dot, q_dot, v_dot, w_dot])


def integrate_rk4(state: VehicleState, control: ControlInput, dt: float,
                  params: VehicleParams) -> VehicleState:
    """One classical RK4 step with zero-order-hold control; renormalizes
    the quaternion afterwards."""
    if dt <= 0:
        raise ValueError("dt must be positive")
    u = control.as_array() if isinstance(control, ControlInput) else np.asarray(control)
    x = state.as_vector()
    k1 = _derivative_packed(x, u, params)
    k2 = _derivative_packed(x + 0.5 * dt * k1, u, params)
    k3 = _derivative_packed(x + 0.5 * dt * k2, u, params)
    k4 = _derivative_packed(x + dt * k3, u, params)
    x_new = x + (dt / 6.0) * (k1 + 2 * k2 + 2 * k3 + k4)
    return VehicleState.from_vector(x_new)


def rollout(state: VehicleState, control, duration: float, dt: float,
            params: VehicleParams) -> VehicleState:
    """Integrate with fixed substeps; control may be constant or f(t)."""
    t = 0.0
    while t < duration - 1e-12:
        step = min(dt, duration - t)
        u = control(t) if callable(control) else control
        state = integrate_rk4(state, u, step, params)
        t += step
    return state


# ----------------------------------------------------------------------
# trim
# ----------------------------------------------------------------------

def pitch_state(speed: float, alpha: float, position=(0, 0, 0)) -> VehicleState:
    """Level-flight candidate: pitch attitude equals angle of attack."""
    q = np.array([np.cos(alpha / 2), 0.0, np.sin(alpha / 2), 0.0])
    v = np.array([speed * np.cos(alpha), 0.0, speed * np.sin(alpha)])
    return VehicleState(np.asarray(position, float), q, v, np.zeros(3))


def trim_level_flight(params: VehicleParams, speed: float):
    """Solve (alpha, elevator, throttle) for steady level flight.

    Returns (state, control) with world velocity (speed, 0, 0) and
    vanishing velocity/rate derivatives.
    """
    from scipy.optimize import root

    def residual(z):
        alpha, de, dt = z
        st = pitch_state(speed, alpha)
        u = np.array([0.0, np.clip(de, -1, 1), 0.0, np.clip(dt, 0, 1)])
        xd = _derivative_packed(st.as_vector(), u, params)
        return [xd[7], xd[9], xd[11]]  # u_dot, w_dot, pitch-rate dot

    sol = root(residual, x0=np.array([0.15, -0.1, 0.4]), tol=1e-12)
    if not sol.success or np.max(np.abs(residual(sol.x))) > 1e-8:
        raise RuntimeError(f"trim search failed at {speed} m/s: {sol.message}")
    alpha, de, dt = sol.x
    return pitch_state(speed, alpha), ControlInput(0.0, float(de), 0.0, float(dt))
