"""Direct trajectory optimization with Hermite-Simpson collocation.

The finite-horizon optimal control problem is transcribed into an NLP over
state knots, control knots, and the shared interval length h:

    min  sum (x_k - x_ref)' Q (x_k - x_ref)
         + (x_last - x_ref)' Q_f (x_last - x_ref) + sum u_k' R u_k
    s.t. Hermite-Simpson defects = 0 per interval,
         box bounds on x, u, and h,
         the initial knot pinned to the measured state (delta_i window),
         optional terminal window delta_f around the reference,
         per-knot obstacle constraints from the rolling-history map.

The 12-dim NLP state is (position, attitude error, body velocity, body
angular velocity); attitude error is the rotation vector e such that
q = q_ref * exp(e), which keeps the state Euclidean while the underlying
attitude is a quaternion. Objective and constraint gradients are exact:
the rigid-body/aero Jacobians are hand-derived and the obstacle gradients
come from the collision metrics, so the solver (SLSQP) never differences.

Obstacle neighbor sets are fetched from the map once per outer round and
frozen during a solve, trading constraint freshness for consistent
gradients; replanning re-fetches at the previous solution.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.optimize import minimize

from . import collision
from .collision import ConstraintKind, Distance
from .dynamics import (CONTROL_LOWER, CONTROL_UPPER, ControlInput,
                       VehicleParams, VehicleState, forces_moments,
                       forces_moments_batch, forces_moments_jacobian)
from .planner import (GlobalPath, PlannerConfig, PlanningFailureError,
                      horizon_point)
from .se3 import (GaussianPoint, quat_conjugate, quat_exp, quat_log,
                  quat_multiply, quat_to_matrix, right_jacobian,
                  rotvec_rate_coeff, rotvec_rate_matrix, skew)

Q_DEFAULT = (25.0, 25.0, 25.0, 50.0, 50.0, 50.0,
             2.0, 2.0, 2.0, 2.0, 2.0, 2.0)
R_DEFAULT = (0.1, 0.1, 0.1, 25.0)
QF_DEFAULT = (100.0,) * 6 + (1.0,) * 6
DELTA_F_DEFAULT = (0.5,) * 6 + (3.0, 3.0, 0.5, 0.5, 0.5, 40.0)

_X_MIN_DEFAULT = (-np.inf,) * 3 + (-3.0,) * 3 + (-30.0,) * 3 + (-50.0,) * 3
_X_MAX_DEFAULT = (np.inf,) * 3 + (3.0,) * 3 + (30.0,) * 3 + (50.0,) * 3


@dataclass(frozen=True)
class TranscriptionConfig:
    n_knots: int = 10                      # N; states run x_0 .. x_{N+1}
    h_min: float = 0.001                   # s
    h_max: float = 0.2                     # s
    q_weights: tuple = Q_DEFAULT
    r_weights: tuple = R_DEFAULT
    qf_weights: tuple = QF_DEFAULT
    delta_i: tuple = (0.0,) * 12           # window pinning x_0 to the state
    delta_f: tuple | None = DELTA_F_DEFAULT  # terminal window; None disables
    x_min: tuple = _X_MIN_DEFAULT
    x_max: tuple = _X_MAX_DEFAULT
    u_min: tuple = tuple(CONTROL_LOWER)
    u_max: tuple = tuple(CONTROL_UPPER)
    constraint_kind: ConstraintKind = Distance()
    obstacle_neighbors: int = 3            # k per knot query
    horizon_time: float = 1.0              # s
    reference_velocity: tuple = (5.0, 0.0, 0.0)  # body frame at the horizon
    reference_pitch: float = 0.0           # rad, folded into q_ref
    u_trim: tuple = (0.0, 0.0, 0.0, 0.2)   # cold-start control guess
    sqp_iters: int = 60
    sqp_tol: float = 1e-6
    feas_tol: float = 1e-4
    refetch_rounds: int = 2                # neighbor re-fetch outer loops
    midpoint_obstacles: bool = False

    def __post_init__(self):
        if self.n_knots < 2:
            raise ValueError("n_knots must be >= 2")
        if not 0 < self.h_min <= self.h_max:
            raise ValueError("need 0 < h_min <= h_max")
        for name in ("q_weights", "r_weights", "qf_weights"):
            if np.any(np.asarray(getattr(self, name)) < 0):
                raise ValueError(f"{name} must be nonnegative")
        if len(self.q_weights) != 12 or len(self.qf_weights) != 12:
            raise ValueError("state weights must have 12 entries")
        if len(self.r_weights) != 4:
            raise ValueError("control weights must have 4 entries")


@dataclass
class CandidateTrajectory:
    states: list                     # VehicleState knots, length N+2
    controls: list                   # ControlInput knots, length N+1
    h: float
    feasible: bool
    objective: float
    solver_iterations: int = 0
    reused: bool = False             # true when a stale plan was shifted
    query_depths: dict = field(default_factory=dict)

    def duration(self) -> float:
        return self.h * (len(self.states) - 1)

    def control_at(self, t: float) -> ControlInput:
        """Piecewise-linear control schedule, the same interpolation the
        collocation assumes; clamped at the ends."""
        times = self.h * np.arange(len(self.controls))
        vals = np.array([c.as_array() for c in self.controls])
        u = np.array([np.interp(t, times, vals[:, i]) for i in range(4)])
        return ControlInput.clipped(*u)

    def position_at(self, t: float) -> np.ndarray:
        """Knot-interpolated position (diagnostics; not the integrator)."""
        times = self.h * np.arange(len(self.states))
        pos = np.array([s.position for s in self.states])
        return np.array([np.interp(t, times, pos[:, i]) for i in range(3)])


# ----------------------------------------------------------------------
# error-state vehicle dynamics (12-dim) with exact Jacobians
# ----------------------------------------------------------------------

def state_to_vec12(state: VehicleState, q_ref: np.ndarray) -> np.ndarray:
    e = quat_log(quat_multiply(quat_conjugate(q_ref), state.orientation))
    return np.concatenate([state.position, e, state.velocity,
                           state.angular_velocity])


def vec12_to_state(x: np.ndarray, q_ref: np.ndarray) -> VehicleState:
    q = quat_multiply(q_ref, quat_exp(x[3:6]))
    return VehicleState(x[0:3], q / np.linalg.norm(q), x[6:9], x[9:12])


def vehicle_error_dynamics(q_ref: np.ndarray, params: VehicleParams):
    """(f, jac) closures over the 12-dim error state.

    f(x, u) -> xdot (12,); jac(x, u) -> (A (12,12), B (12,4)).
    """
    r_ref = quat_to_matrix(q_ref)
    a_ref = r_ref.T @ np.array([0.0, 0.0, params.gravity])
    inertia = np.asarray(params.inertia)
    i_mat = np.diag(inertia)
    inv_inertia = 1.0 / inertia

    def split(x):
        return x[0:3], x[3:6], x[6:9], x[9:12]

    def _cross(a, b):
        return np.array([a[1] * b[2] - a[2] * b[1],
                         a[2] * b[0] - a[0] * b[2],
                         a[0] * b[1] - a[1] * b[0]])

    def f(x, u):
        _, e, v, w = split(x)
        r_e = quat_to_matrix(quat_exp(e))
        fo, mo = forces_moments(v, w, u, params)
        out = np.empty(12)
        out[0:3] = r_ref @ (r_e @ v)
        out[3:6] = rotvec_rate_matrix(e) @ w
        out[6:9] = fo / params.mass + r_e.T @ a_ref - _cross(w, v)
        out[9:12] = (mo - _cross(w, inertia * w)) * inv_inertia
        return out

    def jac(x, u):
        _, e, v, w = split(x)
        r_e = quat_to_matrix(quat_exp(e))
        jr = right_jacobian(e)
        g_mat = rotvec_rate_matrix(e)
        fo, mo, dfo, dmo = forces_moments_jacobian(v, w, u, params)

        a = np.zeros((12, 12))
        b = np.zeros((12, 4))
        rot = r_ref @ r_e
        # position rows
        a[0:3, 3:6] = -rot @ skew(v) @ jr
        a[0:3, 6:9] = rot
        # attitude-error rows: d(G(e) w)/de and G(e)
        s_mat = skew(e)
        s2 = s_mat @ s_mat
        g, gp = rotvec_rate_coeff(float(e @ e))
        for k in range(3):
            ek = np.zeros(3)
            ek[k] = 1.0
            e_k = skew(ek)
            dg_k = (0.5 * e_k + 2.0 * e[k] * gp * s2
                    + g * (e_k @ s_mat + s_mat @ e_k))
            a[3:6, 3 + k] = dg_k @ w
        a[3:6, 9:12] = g_mat
        # velocity rows
        a[6:9, 3:6] = skew(r_e.T @ a_ref) @ jr
        a[6:9, 6:9] = dfo[:, 0:3] / params.mass - skew(w)
        a[6:9, 9:12] = dfo[:, 3:6] / params.mass + skew(v)
        b[6:9, :] = dfo[:, 6:10] / params.mass
        # angular velocity rows
        gyro = skew(w) @ i_mat - skew(inertia * w)
        a[9:12, 6:9] = inv_inertia[:, None] * dmo[:, 0:3]
        a[9:12, 9:12] = inv_inertia[:, None] * (dmo[:, 3:6] - gyro)
        b[9:12, :] = inv_inertia[:, None] * dmo[:, 6:10]
        return a, b

    return f, jac


def _skew_batch(v):
    out = np.zeros(v.shape[:-1] + (3, 3))
    x, y, z = v[..., 0], v[..., 1], v[..., 2]
    out[..., 0, 1] = -z
    out[..., 0, 2] = y
    out[..., 1, 0] = z
    out[..., 1, 2] = -x
    out[..., 2, 0] = -y
    out[..., 2, 1] = x
    return out


def _rotvec_coeff_batch(s):
    """Batched rotvec_rate_coeff: (g(s), g'(s)) for s = |theta|^2 >= 0."""
    s = np.asarray(s, dtype=float)
    g_ser = 1.0 / 12.0 + s / 720.0 + s * s / 30240.0
    gp_ser = 1.0 / 720.0 + s / 15120.0
    safe = np.where(s < 1e-6, 1.0, s)
    a = np.sqrt(safe)
    sa, ca = np.sin(a), np.cos(a)
    g_cl = 1.0 / safe - (1.0 + ca) / (2.0 * a * sa)
    dg_da = (-2.0 / a ** 3
             - (-sa * (2.0 * a * sa) - (1.0 + ca) * (2.0 * sa + 2.0 * a * ca))
             / (2.0 * a * sa) ** 2)
    gp_cl = dg_da / (2.0 * a)
    small = s < 1e-6
    return np.where(small, g_ser, g_cl), np.where(small, gp_ser, gp_cl)


def _attitude_mats_batch(e):
    """(R_e, Jr, G) for a batch of rotation vectors e (M, 3).

    R_e = exp(skew(e)); Jr the right Jacobian; G = Jr^{-1} the
    rotation-vector rate matrix. Matches the scalar se3 helpers.
    """
    e = np.atleast_2d(e)
    m = len(e)
    s = np.einsum("mi,mi->m", e, e)
    sk = _skew_batch(e)
    sk2 = sk @ sk
    eye = np.broadcast_to(np.eye(3), (m, 3, 3))

    th = np.sqrt(s)
    safe_s = np.where(s < 1e-10, 1.0, s)
    safe_th = np.sqrt(safe_s)
    sin_t, cos_t = np.sin(safe_th), np.cos(safe_th)
    small = (s < 1e-10)[:, None, None]

    # Rodrigues with series fallback near zero angle
    c1 = np.where(small, (1.0 - s[:, None, None] / 6.0),
                  (sin_t / safe_th)[:, None, None])
    c2 = np.where(small, (0.5 - s[:, None, None] / 24.0),
                  ((1.0 - cos_t) / safe_s)[:, None, None])
    r_e = eye + c1 * sk + c2 * sk2

    j1 = np.where(small, 0.5 - s[:, None, None] / 24.0,
                  ((1.0 - cos_t) / safe_s)[:, None, None])
    j2 = np.where(small, np.broadcast_to(1.0 / 6.0, (m, 1, 1)),
                  ((safe_th - sin_t) / (safe_s * safe_th))[:, None, None])
    jr = eye - j1 * sk + j2 * sk2

    g, gp = _rotvec_coeff_batch(s)
    g_mat = eye + 0.5 * sk + g[:, None, None] * sk2
    return r_e, jr, g_mat, sk, sk2, g, gp, th


_UNIT_SKEWS = np.stack([skew(r) for r in np.eye(3)])  # (3, 3, 3)


def vehicle_error_dynamics_batch(q_ref: np.ndarray, params: VehicleParams):
    """Batched companion to vehicle_error_dynamics.

    f_batch(X (M,12), U (M,4)) -> (M,12); jac_batch -> ((M,12,12), (M,12,4)).
    """
    r_ref = quat_to_matrix(q_ref)
    a_ref = r_ref.T @ np.array([0.0, 0.0, params.gravity])
    inertia = np.asarray(params.inertia)
    i_mat = np.diag(inertia)
    inv_inertia = 1.0 / inertia

    def f_batch(x, u):
        x = np.atleast_2d(x)
        u = np.atleast_2d(u)
        e, v, w = x[:, 3:6], x[:, 6:9], x[:, 9:12]
        r_e, _, g_mat, _, _, _, _, _ = _attitude_mats_batch(e)
        fo, mo, _, _ = forces_moments_batch(v, w, u, params)
        out = np.empty((len(x), 12))
        rot = r_ref[None] @ r_e
        out[:, 0:3] = np.einsum("mab,mb->ma", rot, v)
        out[:, 3:6] = np.einsum("mab,mb->ma", g_mat, w)
        out[:, 6:9] = (fo / params.mass
                       + np.einsum("mba,b->ma", r_e, a_ref)
                       - np.cross(w, v))
        out[:, 9:12] = (mo - np.cross(w, inertia * w)) * inv_inertia
        return out

    def jac_batch(x, u):
        x = np.atleast_2d(x)
        u = np.atleast_2d(u)
        m_n = len(x)
        e, v, w = x[:, 3:6], x[:, 6:9], x[:, 9:12]
        r_e, jr, g_mat, sk, sk2, g, gp = _attitude_mats_batch(e)[:7]
        _, _, dfo, dmo = forces_moments_batch(v, w, u, params)

        a = np.zeros((m_n, 12, 12))
        b = np.zeros((m_n, 12, 4))
        rot = r_ref[None] @ r_e
        a[:, 0:3, 3:6] = -rot @ _skew_batch(v) @ jr
        a[:, 0:3, 6:9] = rot

        # d(G(e) w)/de, one column per component of e
        s2w = np.einsum("mab,mb->ma", sk2, w)
        ekw = np.einsum("kab,mb->mka", _UNIT_SKEWS, w)
        sw = np.einsum("mab,mb->ma", sk, w)
        eksw = np.einsum("kab,mb->mka", _UNIT_SKEWS, sw)
        sekw = np.einsum("mab,mkb->mka", sk, ekw)
        cols = (0.5 * ekw
                + 2.0 * gp[:, None, None] * e[:, :, None] * s2w[:, None, :]
                + g[:, None, None] * (eksw + sekw))
        a[:, 3:6, 3:6] = cols.transpose(0, 2, 1)
        a[:, 3:6, 9:12] = g_mat

        rta = np.einsum("mba,b->ma", r_e, a_ref)
        a[:, 6:9, 3:6] = _skew_batch(rta) @ jr
        a[:, 6:9, 6:9] = dfo[:, :, 0:3] / params.mass - _skew_batch(w)
        a[:, 6:9, 9:12] = dfo[:, :, 3:6] / params.mass + _skew_batch(v)
        b[:, 6:9, :] = dfo[:, :, 6:10] / params.mass

        gyro = _skew_batch(w) @ i_mat - _skew_batch(inertia * w)
        a[:, 9:12, 6:9] = inv_inertia[None, :, None] * dmo[:, :, 0:3]
        a[:, 9:12, 9:12] = inv_inertia[None, :, None] * (dmo[:, :, 3:6] - gyro)
        b[:, 9:12, :] = inv_inertia[None, :, None] * dmo[:, :, 6:10]
        return a, b

    return f_batch, jac_batch


# ----------------------------------------------------------------------
# Hermite-Simpson defect
# ----------------------------------------------------------------------

def hs_defect(x_k, x_k1, u_k, u_k1, h: float, dynamics) -> np.ndarray:
    """Collocation residual for one interval.

    States may be plain vectors (with ``dynamics`` a callable f(x, u)) or
    VehicleStates (with ``dynamics`` a VehicleParams; the error frame is
    taken about x_k's attitude). Zero iff a cubic Hermite interpolant of
    the endpoint states is consistent with the dynamics at the midpoint.
    """
    if h <= 0:
        raise ValueError("h must be positive")
    if isinstance(x_k, VehicleState):
        q_ref = x_k.orientation
        f, _ = vehicle_error_dynamics(q_ref, dynamics)
        x_k = state_to_vec12(x_k, q_ref)
        x_k1 = state_to_vec12(x_k1, q_ref)
        u_k = u_k.as_array() if isinstance(u_k, ControlInput) else np.asarray(u_k)
        u_k1 = u_k1.as_array() if isinstance(u_k1, ControlInput) else np.asarray(u_k1)
    else:
        f = dynamics
        x_k = np.asarray(x_k, dtype=float)
        x_k1 = np.asarray(x_k1, dtype=float)
        u_k = np.asarray(u_k, dtype=float)
        u_k1 = np.asarray(u_k1, dtype=float)
    f_k = f(x_k, u_k)
    f_k1 = f(x_k1, u_k1)
    x_c = 0.5 * (x_k + x_k1) + (h / 8.0) * (f_k - f_k1)
    u_c = 0.5 * (u_k + u_k1)
    f_c = f(x_c, u_c)
    return x_k - x_k1 + (h / 6.0) * (f_k + 4.0 * f_c + f_k1)


# ----------------------------------------------------------------------
# obstacle rows
# ----------------------------------------------------------------------

class _ObstacleRow:
    """One inequality g(p) >= 0 tied to a knot's position block."""

    def __init__(self, knot: int, kind: ConstraintKind, neighbors):
        self.knot = knot
        self.kind = kind
        self.neighbors = neighbors

    def eval(self, p: np.ndarray):
        ev = collision.evaluate(self.kind, GaussianPoint(p, np.zeros((3, 3))),
                                self.neighbors)
        if isinstance(self.kind, collision.CollisionProbability):
            return self.kind.s_max - ev.value, -ev.gradient
        return ev.value, ev.gradient

    def violated(self, p: np.ndarray, tol: float) -> bool:
        return self.eval(p)[0] < -tol


def _fetch_obstacle_rows(map_view, positions: np.ndarray,
                         cfg: TranscriptionConfig):
    """Freeze neighbor sets at the given knot positions (knot 0 skipped).

    Returns (rows, depth_counts).
    """
    if map_view is None:
        return [], {}
    reply = map_view.query_batch(positions[1:], cfg.obstacle_neighbors)
    rows = []
    for j in range(len(positions) - 1):
        n = int(reply.neighbor_count[j])
        if n == 0:
            continue
        neigh = [GaussianPoint(reply.neighbor_means[j, i].copy(),
                               reply.covariance[j]) for i in range(n)]
        rows.append(_ObstacleRow(j + 1, cfg.constraint_kind, neigh))
    idx, cnt = np.unique(reply.depth_index[reply.depth_index >= 0],
                         return_counts=True)
    return rows, {int(i): int(c) for i, c in zip(idx, cnt)}


# ----------------------------------------------------------------------
# NLP assembly (dimension-generic core)
# ----------------------------------------------------------------------

class DirectTranscription:
    """Dense NLP over [states, controls, h] with exact derivatives."""

    def __init__(self, n_x, n_u, dynamics, jacobians, n_states,
                 x_init, x_ref, q_weights, r_weights, qf_weights,
                 x_min, x_max, u_min, u_max, h_bounds,
                 delta_i=None, delta_f=None, obstacle_rows=(),
                 dynamics_batch=None):
        self.n_x, self.n_u = n_x, n_u
        self.f, self.fjac = dynamics, jacobians
        self.f_batch, self.fjac_batch = dynamics_batch or (None, None)
        self.n_states = n_states
        self.n_controls = n_states - 1
        self.x_init = np.asarray(x_init, dtype=float)
        self.x_ref = np.asarray(x_ref, dtype=float)
        self.q = np.asarray(q_weights, dtype=float)
        self.r = np.asarray(r_weights, dtype=float)
        self.qf = np.asarray(qf_weights, dtype=float)
        self.h_bounds = (float(h_bounds[0]), float(h_bounds[1]))
        self.obstacle_rows = list(obstacle_rows)
        self.n_z = n_states * n_x + self.n_controls * n_u + 1
        self._cache_key = None
        self._cache = None

        lb = np.concatenate([np.tile(x_min, n_states),
                             np.tile(u_min, self.n_controls),
                             [self.h_bounds[0]]])
        ub = np.concatenate([np.tile(x_max, n_states),
                             np.tile(u_max, self.n_controls),
                             [self.h_bounds[1]]])
        di = np.zeros(n_x) if delta_i is None else np.asarray(delta_i, float)
        lb[:n_x] = np.maximum(lb[:n_x], self.x_init - di)
        ub[:n_x] = np.minimum(ub[:n_x], self.x_init + di)
        if delta_f is not None:
            df = np.asarray(delta_f, dtype=float)
            tail = slice((n_states - 1) * n_x, n_states * n_x)
            lb[tail] = np.maximum(lb[tail], self.x_ref - df)
            ub[tail] = np.minimum(ub[tail], self.x_ref + df)
        self.lower, self.upper = lb, ub

    # -------------------- packing --------------------

    def pack(self, states, controls, h) -> np.ndarray:
        return np.concatenate([np.asarray(states, float).ravel(),
                               np.asarray(controls, float).ravel(), [h]])

    def unpack(self, z):
        nx, nu = self.n_x, self.n_u
        s_end = self.n_states * nx
        states = z[:s_end].reshape(self.n_states, nx)
        controls = z[s_end:-1].reshape(self.n_controls, nu)
        return states, controls, float(z[-1])

    def _control_pair(self, k):
        return k, min(k + 1, self.n_controls - 1)

    # -------------------- cached dynamics bundle --------------------

    def _eval_knots(self, states, controls):
        ns = self.n_states
        if self.f_batch is not None:
            us = controls[np.minimum(np.arange(ns), self.n_controls - 1)]
            fs = self.f_batch(states, us)
            a_s, b_s = self.fjac_batch(states, us)
            return fs, a_s, b_s
        fs = np.empty((ns, self.n_x))
        a_s = np.empty((ns, self.n_x, self.n_x))
        b_s = np.empty((ns, self.n_x, self.n_u))
        for k in range(ns):
            u = controls[min(k, self.n_controls - 1)]
            fs[k] = self.f(states[k], u)
            a_s[k], b_s[k] = self.fjac(states[k], u)
        return fs, a_s, b_s

    def _eval_mid(self, x_c, u_c):
        if self.f_batch is not None:
            f_c = self.f_batch(x_c, u_c)
            a_c, b_c = self.fjac_batch(x_c, u_c)
            return f_c, a_c, b_c
        n_int = len(x_c)
        f_c = np.empty((n_int, self.n_x))
        a_c = np.empty((n_int, self.n_x, self.n_x))
        b_c = np.empty((n_int, self.n_x, self.n_u))
        for k in range(n_int):
            f_c[k] = self.f(x_c[k], u_c[k])
            a_c[k], b_c[k] = self.fjac(x_c[k], u_c[k])
        return f_c, a_c, b_c

    def _bundle(self, z):
        key = z.tobytes()
        if key == self._cache_key:
            return self._cache
        states, controls, h = self.unpack(z)
        ns = self.n_states
        n_int = ns - 1
        fs, a_s, b_s = self._eval_knots(states, controls)

        j0 = np.arange(n_int)
        j1 = np.minimum(j0 + 1, self.n_controls - 1)
        u_c = 0.5 * (controls[j0] + controls[j1])
        x_c = 0.5 * (states[:-1] + states[1:]) + (h / 8.0) * (fs[:-1] - fs[1:])
        f_c, a_c, b_c = self._eval_mid(x_c, u_c)

        eye = np.eye(self.n_x)
        defects = (states[:-1] - states[1:]
                   + (h / 6.0) * (fs[:-1] + 4.0 * f_c + fs[1:])).ravel()
        dxc_dx0 = 0.5 * eye + (h / 8.0) * a_s[:-1]
        dxc_dx1 = 0.5 * eye - (h / 8.0) * a_s[1:]
        jx0 = eye + (h / 6.0) * (a_s[:-1] + 4.0 * a_c @ dxc_dx0)
        jx1 = -eye + (h / 6.0) * (a_s[1:] + 4.0 * a_c @ dxc_dx1)
        ju0 = (h / 6.0) * (b_s[:-1] + 4.0 * ((h / 8.0) * a_c @ b_s[:-1]
                                             + 0.5 * b_c))
        ju1 = (h / 6.0) * (b_s[1:] + 4.0 * (-(h / 8.0) * a_c @ b_s[1:]
                                            + 0.5 * b_c))
        jh = ((fs[:-1] + 4.0 * f_c + fs[1:]) / 6.0
              + (h / 6.0) * 4.0
              * (a_c @ ((fs[:-1] - fs[1:])[:, :, None] / 8.0))[:, :, 0])

        jac = np.zeros((n_int * self.n_x, self.n_z))
        u_off = ns * self.n_x
        h_col = self.n_z - 1
        for k in range(n_int):
            rows = slice(k * self.n_x, (k + 1) * self.n_x)
            jac[rows, k * self.n_x:(k + 1) * self.n_x] = jx0[k]
            jac[rows, (k + 1) * self.n_x:(k + 2) * self.n_x] = jx1[k]
            cols0 = slice(u_off + j0[k] * self.n_u,
                          u_off + (j0[k] + 1) * self.n_u)
            cols1 = slice(u_off + j1[k] * self.n_u,
                          u_off + (j1[k] + 1) * self.n_u)
            jac[rows, cols0] += ju0[k]
            jac[rows, cols1] += ju1[k]
            jac[rows, h_col] = jh[k]
        bundle = {"states": states, "controls": controls, "h": h,
                  "defects": defects, "defect_jac": jac}
        if self.obstacle_rows:
            vals = np.empty(len(self.obstacle_rows))
            ojac = np.zeros((len(self.obstacle_rows), self.n_z))
            for i, row in enumerate(self.obstacle_rows):
                p = states[row.knot, 0:3]
                vals[i], grad = row.eval(p)
                cols = slice(row.knot * self.n_x, row.knot * self.n_x + 3)
                ojac[i, cols] = grad
            bundle["obstacles"] = vals
            bundle["obstacle_jac"] = ojac
        self._cache_key, self._cache = key, bundle
        return bundle

    # -------------------- NLP callbacks --------------------

    def objective(self, z):
        states, controls, _ = self.unpack(z)
        err = states - self.x_ref
        j = float(np.einsum("ki,i,ki->", err[:-1], self.q, err[:-1]))
        j += float(err[-1] @ (self.qf * err[-1]))
        j += float(np.einsum("ki,i,ki->", controls, self.r, controls))
        return j

    def objective_grad(self, z):
        states, controls, _ = self.unpack(z)
        err = states - self.x_ref
        gs = 2.0 * err * self.q
        gs[-1] = 2.0 * err[-1] * self.qf
        gu = 2.0 * controls * self.r
        return np.concatenate([gs.ravel(), gu.ravel(), [0.0]])

    def defects(self, z):
        return self._bundle(z)["defects"]

    def defect_jac(self, z):
        return self._bundle(z)["defect_jac"]

    def obstacles(self, z):
        return self._bundle(z)["obstacles"]

    def obstacle_jac(self, z):
        return self._bundle(z)["obstacle_jac"]

    def initial_guess(self, states, controls, h) -> np.ndarray:
        return self.pack(states, controls,
                         np.clip(h, self.h_bounds[0], self.h_bounds[1]))

    def check_feasible(self, z, tol) -> bool:
        if np.max(np.abs(self.defects(z))) > tol:
            return False
        if np.any(z < self.lower - tol) or np.any(z > self.upper + tol):
            return False
        if self.obstacle_rows and np.min(self.obstacles(z)) < -tol:
            return False
        return True

    def solve(self, z0, max_iters=60, tol=1e-6):
        cons = [{"type": "eq", "fun": self.defects, "jac": self.defect_jac}]
        if self.obstacle_rows:
            cons.append({"type": "ineq", "fun": self.obstacles,
                         "jac": self.obstacle_jac})
        with warnings.catch_warnings():
            # SLSQP's interior clipping notice; the result is re-clipped and
            # feasibility-checked below either way
            warnings.filterwarnings(
                "ignore", message="Values in x were outside bounds")
            res = minimize(self.objective, z0, jac=self.objective_grad,
                           bounds=list(zip(self.lower, self.upper)),
                           constraints=cons, method="SLSQP",
                           options={"maxiter": max_iters, "ftol": tol})
        z = np.clip(res.x, self.lower, self.upper)
        return z, res


# ----------------------------------------------------------------------
# vehicle-facing layer
# ----------------------------------------------------------------------

class VehicleNlp:
    """A transcribed instance bound to a reference frame and neighbor sets."""

    def __init__(self, core: DirectTranscription, q_ref, cfg, params,
                 z0, depth_counts):
        self.core = core
        self.q_ref = np.asarray(q_ref, dtype=float)
        self.cfg = cfg
        self.params = params
        self.z0 = z0
        self.depth_counts = depth_counts
        self.warm_used = False

    def to_candidate(self, z, res) -> CandidateTrajectory:
        states, controls, h = self.core.unpack(z)
        feas = self.core.check_feasible(z, self.cfg.feas_tol)
        knots = [vec12_to_state(x, self.q_ref) for x in states]
        ctrl = [ControlInput.clipped(*u) for u in controls]
        return CandidateTrajectory(knots, ctrl, h, bool(feas),
                                   float(self.core.objective(z)),
                                   solver_iterations=int(res.nit),
                                   query_depths=dict(self.depth_counts))


def reference_quaternion(yaw: float, pitch: float = 0.0) -> np.ndarray:
    qz = quat_exp(np.array([0.0, 0.0, yaw]))
    qy = quat_exp(np.array([0.0, pitch, 0.0]))
    return quat_multiply(qz, qy)


def transcribe(x_init: VehicleState, x_horizon, map_view,
               cfg: TranscriptionConfig, params: VehicleParams,
               warm: CandidateTrajectory | None = None,
               shift_warm: bool = True) -> VehicleNlp:
    """Assemble the NLP for one replan.

    ``x_horizon`` is (point, yaw). With ``shift_warm`` the warm trajectory
    is advanced one knot (replan-to-replan reuse) and rejected if the map
    now shows obstacles through it — a warm start threaded through newly
    seen geometry mostly traps the optimizer — falling back to a
    straight-line initialization toward the target. ``shift_warm=False``
    keeps the warm knots as-is (neighbor-refetch rounds within one replan).
    """
    point, yaw = x_horizon
    q_ref = reference_quaternion(float(yaw), cfg.reference_pitch)
    x_ref = np.concatenate([np.asarray(point, float), np.zeros(3),
                            np.asarray(cfg.reference_velocity, float),
                            np.zeros(3)])
    x0 = state_to_vec12(x_init, q_ref)
    if (np.any(x0 < np.asarray(cfg.x_min, float))
            or np.any(x0 > np.asarray(cfg.x_max, float))):
        # A state beyond the decision-variable clamps (tumbling, overspeed)
        # would invert the first-knot window bounds; there is no plan to
        # find from there.
        raise PlanningFailureError("state outside the planning clamps")
    n_states = cfg.n_knots + 2

    states_init, controls_init, h_init = _cold_start(x0, x_ref, n_states, cfg)
    warm_used = False
    if warm is not None and len(warm.states) == n_states:
        cand = _warm_init(warm, q_ref, x0, shift=shift_warm)
        if shift_warm:
            rows, _ = _fetch_obstacle_rows(map_view, cand[0][:, 0:3], cfg)
            accept = not any(r.violated(cand[0][r.knot, 0:3], cfg.feas_tol)
                             for r in rows)
        else:
            accept = True
        if accept:
            states_init, controls_init, h_init = cand
            warm_used = True

    rows, depth_counts = _fetch_obstacle_rows(map_view,
                                              states_init[:, 0:3], cfg)
    f, fjac = vehicle_error_dynamics(q_ref, params)
    core = DirectTranscription(
        12, 4, f, fjac, n_states, x0, x_ref, cfg.q_weights, cfg.r_weights,
        cfg.qf_weights, cfg.x_min, cfg.x_max, cfg.u_min, cfg.u_max,
        (cfg.h_min, cfg.h_max), delta_i=cfg.delta_i, delta_f=cfg.delta_f,
        obstacle_rows=rows,
        dynamics_batch=vehicle_error_dynamics_batch(q_ref, params))
    z0 = core.initial_guess(states_init, controls_init, h_init)
    nlp = VehicleNlp(core, q_ref, cfg, params, z0, depth_counts)
    nlp.warm_used = warm_used
    return nlp


def _cold_start(x0, x_ref, n_states, cfg):
    ts = np.linspace(0.0, 1.0, n_states)[:, None]
    states = x0 + ts * (x_ref - x0)
    controls = np.tile(cfg.u_trim, (n_states - 1, 1))
    dist = float(np.linalg.norm(x_ref[0:3] - x0[0:3]))
    speed = max(float(np.linalg.norm(cfg.reference_velocity)), 0.1)
    h = dist / speed / max(n_states - 1, 1)
    return states, controls, float(np.clip(h, cfg.h_min, cfg.h_max))


def _warm_init(warm: CandidateTrajectory, q_ref, x0, shift: bool):
    states = [state_to_vec12(s, q_ref) for s in warm.states]
    controls = [c.as_array() for c in warm.controls]
    if shift:
        states = states[1:] + [states[-1]]
        controls = controls[1:] + [controls[-1]]
    states[0] = x0
    return np.array(states), np.array(controls), warm.h


def solve(nlp: VehicleNlp, max_iters: int | None = None,
          tol: float | None = None) -> CandidateTrajectory:
    max_iters = nlp.cfg.sqp_iters if max_iters is None else max_iters
    tol = nlp.cfg.sqp_tol if tol is None else tol
    z, res = nlp.core.solve(nlp.z0, max_iters=max_iters, tol=tol)
    return nlp.to_candidate(z, res)


def shift_previous(prev: CandidateTrajectory) -> CandidateTrajectory:
    """Drop the executed head knot and repeat the tail (reuse fallback)."""
    states = list(prev.states[1:]) + [prev.states[-1]]
    controls = list(prev.controls[1:]) + [prev.controls[-1]]
    return replace(prev, states=states, controls=controls, reused=True)


def _fresh_recheck(cand: CandidateTrajectory, map_view, cfg):
    """Re-query the map at the solved knots and re-evaluate the obstacle
    constraints there; freezing neighbor sets during the solve means the
    solution must be validated against what the map says now."""
    positions = np.array([s.position for s in cand.states])
    rows, counts = _fetch_obstacle_rows(map_view, positions, cfg)
    ok = all(not row.violated(positions[row.knot], cfg.feas_tol)
             for row in rows)
    return ok, counts


def transcribe_and_solve(x_init: VehicleState, target, map_view,
                         cfg: TranscriptionConfig, params: VehicleParams,
                         warm: CandidateTrajectory | None = None
                         ) -> CandidateTrajectory:
    """Solve with neighbor sets re-fetched between outer rounds.

    A candidate only counts as feasible if, beyond the solver's own
    (frozen-set) constraints, it also clears obstacles re-queried from the
    map at the solved knots. A round that fails that recheck seeds the
    next round's fetch positions.

    The warm start is an accelerator, never a dependency: when a
    warm-started round comes back infeasible (typically after the target
    jumps, e.g. a goal switch mid-turn, where the stale trajectory traps
    the optimizer in a collapsed-duration basin) the round is retried from
    the straight-line cold start before giving up."""
    depth_counts: dict = {}
    cand = None
    for round_index in range(max(1, cfg.refetch_rounds)):
        nlp = transcribe(x_init, target, map_view, cfg, params, warm=warm,
                         shift_warm=(round_index == 0))
        depth_counts = _merge_counts(depth_counts, nlp.depth_counts)
        cand = solve(nlp)
        if not cand.feasible and nlp.warm_used:
            nlp_cold = transcribe(x_init, target, map_view, cfg, params,
                                  warm=None)
            depth_counts = _merge_counts(depth_counts, nlp_cold.depth_counts)
            retry = solve(nlp_cold)
            if retry.feasible or retry.objective < cand.objective:
                cand = retry
        fresh_ok, counts = _fresh_recheck(cand, map_view, cfg)
        depth_counts = _merge_counts(depth_counts, counts)
        cand.query_depths = dict(depth_counts)
        if cand.feasible and fresh_ok:
            return cand
        cand.feasible = False
        warm = cand
    return cand


def replan_step(state: VehicleState, map_view, path: GlobalPath,
                cfg: TranscriptionConfig, params: VehicleParams,
                prev: CandidateTrajectory | None = None,
                planner_cfg: PlannerConfig | None = None,
                horizon_view=None) -> CandidateTrajectory:
    """One receding-horizon update: pick the horizon point, transcribe,
    solve (re-fetching neighbor sets between rounds), fall back to the
    shifted previous plan when the solve fails.

    ``map_view`` feeds the obstacle constraints; ``horizon_view`` (default:
    the same view) feeds the horizon-point selection, which belongs to the
    path-following side and may deliberately see a different map depth."""
    pcfg = planner_cfg if planner_cfg is not None else PlannerConfig()
    t_now = _path_time(path, state.position)
    hv = map_view if horizon_view is None else horizon_view
    target = horizon_point(path, t_now, cfg.horizon_time, hv, pcfg)
    cand = transcribe_and_solve(state, target, map_view, cfg, params,
                                warm=prev)
    if not cand.feasible and prev is not None:
        out = shift_previous(prev)
        out.query_depths = dict(cand.query_depths)
        return out
    return cand


def _merge_counts(a: dict, b: dict) -> dict:
    out = dict(a)
    for k, v in b.items():
        out[k] = out.get(k, 0) + v
    return out


def _path_time(path: GlobalPath, position: np.ndarray) -> float:
    d = np.linalg.norm(path.samples - np.asarray(position), axis=1)
    i = int(np.argmin(d))
    return float(path.sample_s[i] / path.speed)
