"""Rigid-body poses, quaternion math, and translation-covariance bookkeeping.

Conventions used throughout the stack:
  - quaternions are (w, x, y, z), unit norm, and rotate body -> parent via
    ``R(q) @ v_body``
  - a Pose maps points from its child frame into its parent frame:
    ``x_parent = R(q) @ x_child + t``
  - covariance tracking covers translation only (3x3); rotational
    uncertainty is out of scope
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

I3 = np.eye(3)


def _normalize_quat(q: np.ndarray) -> np.ndarray:
    q = np.asarray(q, dtype=float)
    n = np.linalg.norm(q)
    if n == 0.0:
        raise ValueError("zero-norm quaternion")
    q = q / n
    # fix the double-cover sign so equal rotations compare equal
    if q[0] < 0.0:
        q = -q
    return q


def quat_multiply(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    aw, ax, ay, az = a
    bw, bx, by, bz = b
    return np.array([
        aw * bw - ax * bx - ay * by - az * bz,
        aw * bx + ax * bw + ay * bz - az * by,
        aw * by - ax * bz + ay * bw + az * bx,
        aw * bz + ax * by - ay * bx + az * bw,
    ])


def quat_conjugate(q: np.ndarray) -> np.ndarray:
    return np.array([q[0], -q[1], -q[2], -q[3]])


def quat_to_matrix(q: np.ndarray) -> np.ndarray:
    w, x, y, z = q
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
        [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
        [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
    ])


def quat_from_matrix(m: np.ndarray) -> np.ndarray:
    """Rotation matrix -> unit quaternion (Shepperd's branch selection)."""
    m = np.asarray(m, dtype=float)
    tr = np.trace(m)
    if tr > 0:
        s = np.sqrt(tr + 1.0) * 2.0
        q = np.array([0.25 * s,
                      (m[2, 1] - m[1, 2]) / s,
                      (m[0, 2] - m[2, 0]) / s,
                      (m[1, 0] - m[0, 1]) / s])
    else:
        i = int(np.argmax(np.diag(m)))
        j, k = (i + 1) % 3, (i + 2) % 3
        s = np.sqrt(max(m[i, i] - m[j, j] - m[k, k] + 1.0, 0.0)) * 2.0
        q = np.empty(4)
        q[0] = (m[k, j] - m[j, k]) / s
        q[1 + i] = 0.25 * s
        q[1 + j] = (m[j, i] + m[i, j]) / s
        q[1 + k] = (m[k, i] + m[i, k]) / s
    return _normalize_quat(q)


def quat_from_axis_angle(axis: np.ndarray, angle: float) -> np.ndarray:
    axis = np.asarray(axis, dtype=float)
    n = np.linalg.norm(axis)
    if n == 0.0:
        return np.array([1.0, 0.0, 0.0, 0.0])
    half = 0.5 * angle
    return _normalize_quat(np.concatenate(([np.cos(half)], np.sin(half) * axis / n)))


def quat_exp(theta: np.ndarray) -> np.ndarray:
    """Rotation-vector exponential: theta = angle * axis -> quaternion."""
    theta = np.asarray(theta, dtype=float)
    angle = np.linalg.norm(theta)
    if angle < 1e-12:
        return _normalize_quat(np.concatenate(([1.0], 0.5 * theta)))
    half = 0.5 * angle
    return np.concatenate(([np.cos(half)], np.sin(half) / angle * theta))


def quat_log(q: np.ndarray) -> np.ndarray:
    """Inverse of quat_exp; returns a rotation vector with norm <= pi."""
    q = _normalize_quat(q)
    vn = np.linalg.norm(q[1:])
    if vn < 1e-12:
        return 2.0 * q[1:]
    angle = 2.0 * np.arctan2(vn, q[0])
    return (angle / vn) * q[1:]


def skew(v: np.ndarray) -> np.ndarray:
    x, y, z = v
    return np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])


def rotvec_rate_coeff(s: float) -> tuple[float, float]:
    """g(s) and g'(s) with s = |theta|^2, used by the inverse right Jacobian.

    Jr_inv(theta) = I + skew(theta)/2 + g(s) * skew(theta)^2.
    The series branch keeps the function C^1 through s = 0.
    """
    if s < 1e-6:
        g = 1.0 / 12.0 + s / 720.0 + s * s / 30240.0
        gp = 1.0 / 720.0 + s / 15120.0
        return g, gp
    a = np.sqrt(s)
    sa, ca = np.sin(a), np.cos(a)
    g = 1.0 / s - (1.0 + ca) / (2.0 * a * sa)
    # derivative via d/ds = (1/(2a)) d/da
    dg_da = -2.0 / (a ** 3) - (-sa * (2.0 * a * sa) - (1.0 + ca) * (2.0 * sa + 2.0 * a * ca)) / (2.0 * a * sa) ** 2
    return g, dg_da / (2.0 * a)


def rotvec_rate_matrix(theta: np.ndarray) -> np.ndarray:
    """Jr_inv(theta): maps body angular velocity to rotation-vector rate."""
    th = np.asarray(theta, dtype=float)
    g, _ = rotvec_rate_coeff(float(th @ th))
    s = skew(th)
    return I3 + 0.5 * s + g * (s @ s)


def right_jacobian(theta: np.ndarray) -> np.ndarray:
    """Jr(theta) of the SO(3) exponential map (body-frame perturbations)."""
    th = np.asarray(theta, dtype=float)
    s2 = float(th @ th)
    sk = skew(th)
    if s2 < 1e-10:
        return I3 - 0.5 * sk + (sk @ sk) / 6.0
    a = np.sqrt(s2)
    return (I3 - (1.0 - np.cos(a)) / s2 * sk
            + (a - np.sin(a)) / (s2 * a) * (sk @ sk))


@dataclass(frozen=True)
class Pose:
    """Rigid transform child->parent. Immutable; shareable across threads."""

    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))
    rotation: np.ndarray = field(default_factory=lambda: np.array([1.0, 0.0, 0.0, 0.0]))

    def __post_init__(self):
        object.__setattr__(self, "translation", np.asarray(self.translation, dtype=float).copy())
        object.__setattr__(self, "rotation", _normalize_quat(self.rotation))
        self.translation.setflags(write=False)
        self.rotation.setflags(write=False)

    @staticmethod
    def identity() -> "Pose":
        return Pose()

    @staticmethod
    def from_axis_angle(axis, angle: float, translation=(0.0, 0.0, 0.0)) -> "Pose":
        return Pose(np.asarray(translation, dtype=float), quat_from_axis_angle(np.asarray(axis, float), angle))

    def matrix(self) -> np.ndarray:
        """4x4 homogeneous form."""
        m = np.eye(4)
        m[:3, :3] = quat_to_matrix(self.rotation)
        m[:3, 3] = self.translation
        return m

    def rotation_matrix(self) -> np.ndarray:
        return quat_to_matrix(self.rotation)


def compose(a: Pose, b: Pose) -> Pose:
    """Transform mapping through b then a."""
    return Pose(
        quat_to_matrix(a.rotation) @ b.translation + a.translation,
        quat_multiply(a.rotation, b.rotation),
    )


def invert(p: Pose) -> Pose:
    qi = quat_conjugate(p.rotation)
    return Pose(-(quat_to_matrix(qi) @ p.translation), qi)


def transform_point(p: Pose, x: np.ndarray) -> np.ndarray:
    return quat_to_matrix(p.rotation) @ np.asarray(x, dtype=float) + p.translation


def transform_points(p: Pose, xs: np.ndarray) -> np.ndarray:
    """Vectorized transform of an (N, 3) array."""
    xs = np.asarray(xs, dtype=float)
    if xs.size == 0:
        return xs.reshape(0, 3)
    return xs @ quat_to_matrix(p.rotation).T + p.translation


@dataclass(frozen=True)
class GaussianPoint:
    """3-D point with positional covariance (default diagonal)."""

    mean: np.ndarray
    covariance: np.ndarray

    def __post_init__(self):
        mean = np.asarray(self.mean, dtype=float).copy()
        cov = np.asarray(self.covariance, dtype=float)
        if cov.shape == (3,):
            cov = np.diag(cov)
        cov = cov.copy()
        if not np.allclose(cov, cov.T, atol=1e-12):
            raise ValueError("covariance must be symmetric")
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "covariance", cov)
        self.mean.setflags(write=False)
        self.covariance.setflags(write=False)

    @staticmethod
    def exact(mean) -> "GaussianPoint":
        return GaussianPoint(np.asarray(mean, dtype=float), np.zeros((3, 3)))


def propagate_covariance(chain: list[tuple[Pose, np.ndarray]]) -> np.ndarray:
    """Translation covariance of the composed transform of a pose chain.

    ``chain`` is ordered parent-most first: the composed map is
    chain[0] o chain[1] o ... o chain[-1]. Each edge carries the covariance
    of its own translation, expressed in that edge's parent frame, so edge
    k's covariance enters rotated by the accumulated rotation of edges
    0..k-1. Rotational uncertainty is not modeled.
    """
    if not chain:
        raise ValueError("empty pose chain")
    total = np.zeros((3, 3))
    rot = I3
    for pose, cov in chain:
        cov = np.asarray(cov, dtype=float)
        if cov.shape == (3,):
            cov = np.diag(cov)
        total = total + rot @ cov @ rot.T
        rot = rot @ quat_to_matrix(pose.rotation)
    return 0.5 * (total + total.T)
