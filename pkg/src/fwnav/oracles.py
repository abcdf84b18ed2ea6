"""Independent cross-checks for the derived quantities in this package.

Every function here recomputes a quantity through a second route that
shares no code with the implementation it checks: Monte Carlo sampling and
the central chi-square law for collision probabilities, scalar recursive
evaluation of the series coefficients, central finite differences for
gradients, the matrix exponential for integration defects, and plain
argsort scans for map queries. The test suite asserts against these; the
``oracle`` CLI subcommand prints them for inspection.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .collision import (collision_probability, inflated_distance,
                        mean_distance, probability_gradient,
                        ruben_coefficients)
from .se3 import GaussianPoint, Pose, compose, invert, transform_points


# ----------------------------------------------------------------------
# collision probability vs Monte Carlo and the central chi-square law
# ----------------------------------------------------------------------

def _random_spd(rng, scale_lo=0.05, scale_hi=0.45) -> np.ndarray:
    a = rng.normal(size=(3, 3)) * 0.4
    sig = rng.uniform(scale_lo, scale_hi, size=3)
    cov = a @ a.T * 0.05 + np.diag(sig ** 2)
    return cov


@dataclass
class ProbabilityCase:
    p_analytic: float
    p_monte_carlo: float
    se: float

    @property
    def z(self) -> float:
        return abs(self.p_analytic - self.p_monte_carlo) / max(self.se, 1e-9)


def monte_carlo_probability_cases(n_cases: int = 20,
                                  n_samples: int = 1_000_000,
                                  seed: int = 2024) -> list[ProbabilityCase]:
    """Analytic collision probability vs direct sampling of the relative
    Gaussian; cases are drawn at constraint-like scales with offsets that
    keep the probability away from 0 and 1."""
    rng = np.random.default_rng(seed)
    out = []
    for _ in range(n_cases):
        r = rng.uniform(0.6, 1.8)
        cov_q = _random_spd(rng)
        cov_a = _random_spd(rng)
        direction = rng.normal(size=3)
        direction /= np.linalg.norm(direction)
        offset = direction * rng.uniform(0.3 * r, 1.8 * r)
        query = GaussianPoint(np.zeros(3), cov_q)
        neighbor = GaussianPoint(offset, cov_a)
        p = collision_probability(query, neighbor, r)
        chol = np.linalg.cholesky(cov_q + cov_a)
        x = rng.standard_normal((n_samples, 3)) @ chol.T - offset
        inside = np.linalg.norm(x, axis=1) <= r
        p_mc = float(inside.mean())
        se = math.sqrt(max(p_mc * (1.0 - p_mc), 1e-12) / n_samples)
        out.append(ProbabilityCase(float(p), p_mc, se))
    return out


def central_chi_square_cases(n_cases: int = 20,
                             seed: int = 55) -> list[tuple[float, float]]:
    """Zero-offset isotropic cases where the norm-squared over the summed
    variance is exactly chi-square with three degrees of freedom."""
    from scipy.stats import chi2
    rng = np.random.default_rng(seed)
    out = []
    for _ in range(n_cases):
        sigma_q = rng.uniform(0.05, 0.5)
        sigma_a = rng.uniform(0.05, 0.5)
        r = rng.uniform(0.3, 2.0)
        mean = rng.normal(size=3)
        query = GaussianPoint(mean, sigma_q ** 2 * np.eye(3))
        neighbor = GaussianPoint(mean.copy(), sigma_a ** 2 * np.eye(3))
        p = collision_probability(query, neighbor, r)
        s2 = sigma_q ** 2 + sigma_a ** 2
        p_ref = float(chi2.cdf(r * r / s2, df=3))
        out.append((float(p), p_ref))
    return out


# ----------------------------------------------------------------------
# series coefficients: scalar recursive route
# ----------------------------------------------------------------------

def naive_ruben(b, lam, k_max: int) -> np.ndarray:
    """Series coefficients by direct recursion with scalar loops.

    c_0 = exp(-(1/2) sum_j b_j^2) * prod_j (2 lam_j)^(-1/2)
    d_i = (1/2) sum_j (1 - i b_j^2) (2 lam_j)^(-i)
    c_k = (1/k) sum_{i=1..k} d_i c_{k-i}
    """
    b = [float(v) for v in np.asarray(b).ravel()]
    lam = [float(v) for v in np.asarray(lam).ravel()]

    def d(i: int) -> float:
        total = 0.0
        for bj, lj in zip(b, lam):
            total += (1.0 - i * bj * bj) * (2.0 * lj) ** (-i)
        return 0.5 * total

    memo: dict[int, float] = {}

    def c(k: int) -> float:
        if k == 0:
            prod = 1.0
            for lj in lam:
                prod *= 2.0 * lj
            return math.exp(-0.5 * sum(bj * bj for bj in b)) / math.sqrt(prod)
        if k not in memo:
            memo[k] = sum(d(i) * c(k - i) for i in range(1, k + 1)) / k
        return memo[k]

    return np.array([c(k) for k in range(k_max + 1)])


def coefficient_cases(n_cases: int = 50, k_max: int = 20,
                      seed: int = 11) -> list[tuple[np.ndarray, np.ndarray]]:
    """(implementation, recursive oracle) coefficient pairs on random
    constraint-scale inputs."""
    rng = np.random.default_rng(seed)
    out = []
    for _ in range(n_cases):
        lam = rng.uniform(0.01, 0.6, size=3)
        b = rng.normal(size=3) * rng.uniform(0.2, 2.0)
        c_impl, _ = ruben_coefficients(b, lam, k_max)
        c_ref = naive_ruben(b, lam, k_max)
        out.append((c_impl, c_ref))
    return out


def series_tail_ratios(n_cases: int = 50, k_max: int = 75,
                       seed: int = 12) -> np.ndarray:
    """|last term| / sum |terms| of the probability series at
    constraint-scale inputs; small ratios justify the truncation depth."""
    rng = np.random.default_rng(seed)
    ratios = []
    for _ in range(n_cases):
        r = rng.uniform(0.6, 1.8)
        cov_q = _random_spd(rng, 0.05, 0.35)
        cov_a = _random_spd(rng, 0.05, 0.35)
        direction = rng.normal(size=3)
        direction /= np.linalg.norm(direction)
        offset = direction * rng.uniform(0.3 * r, 2.5 * r)
        _, diag = collision_probability(
            GaussianPoint(np.zeros(3), cov_q),
            GaussianPoint(offset, cov_a), r, k_max=k_max,
            return_diagnostics=True)
        ratios.append(diag["truncation_ratio"])
    return np.asarray(ratios)


# ----------------------------------------------------------------------
# gradients vs central finite differences
# ----------------------------------------------------------------------

def _fd_gradient(f, x: np.ndarray, eps: float = 1e-6) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    g = np.zeros_like(x)
    for i in range(x.size):
        dx = np.zeros_like(x)
        dx[i] = eps
        g[i] = (f(x + dx) - f(x - dx)) / (2.0 * eps)
    return g


def _rel_err(analytic: np.ndarray, fd: np.ndarray) -> float:
    analytic = np.asarray(analytic, dtype=float).ravel()
    fd = np.asarray(fd, dtype=float).ravel()
    return float(np.max(np.abs(analytic - fd)
                        / np.maximum(1.0, np.abs(fd))))


def probability_gradient_cases(n_cases: int = 40, seed: int = 3
                               ) -> list[float]:
    """Max relative error of the probability-constraint gradient wrt the
    query position, per case."""
    rng = np.random.default_rng(seed)
    errs = []
    for _ in range(n_cases):
        r = rng.uniform(0.6, 1.6)
        neighbors = []
        for _ in range(rng.integers(1, 4)):
            direction = rng.normal(size=3)
            direction /= np.linalg.norm(direction)
            neighbors.append(GaussianPoint(
                direction * rng.uniform(0.5 * r, 2.0 * r),
                _random_spd(rng, 0.05, 0.3)))
        q_cov = _random_spd(rng, 0.05, 0.3)
        x0 = rng.normal(size=3) * 0.1

        def value(x):
            ev = probability_gradient(GaussianPoint(x, q_cov), neighbors, r)
            return ev.value

        ev0 = probability_gradient(GaussianPoint(x0, q_cov), neighbors, r)
        errs.append(_rel_err(ev0.gradient, _fd_gradient(value, x0)))
    return errs


def distance_gradient_cases(n_cases: int = 30, seed: int = 4) -> list[float]:
    """Max relative error of the mean/inflated distance gradients."""
    rng = np.random.default_rng(seed)
    errs = []
    for i in range(n_cases):
        r = rng.uniform(0.6, 1.6)
        neighbors = [GaussianPoint(rng.normal(size=3) * 2.0,
                                   _random_spd(rng, 0.05, 0.3))
                     for _ in range(rng.integers(1, 5))]
        x0 = rng.normal(size=3) * 0.2
        if i % 2 == 0:
            def value(x):
                return mean_distance(x, neighbors, r).value
            ev = mean_distance(x0, neighbors, r)
        else:
            n_sigma = rng.uniform(0.5, 2.0)

            def value(x):
                return inflated_distance(x, neighbors, n_sigma, r).value
            ev = inflated_distance(x0, neighbors, n_sigma, r)
        errs.append(_rel_err(ev.gradient, _fd_gradient(value, x0)))
    return errs


class _PointFieldView:
    """Minimal map stand-in: fixed world points, constant covariance."""

    def __init__(self, points: np.ndarray, sigma: float = 0.05):
        self.points = np.asarray(points, dtype=float)
        self.sigma = sigma

    def query_batch(self, points, k):
        from .fovmap import BatchReply, FovStatus
        q = np.atleast_2d(points)
        diff = q[:, None, :] - self.points[None, :, :]
        dist = np.linalg.norm(diff, axis=2)
        order = np.argsort(dist, axis=1)[:, :k]
        kk = order.shape[1]
        means = np.full((len(q), k, 3), np.nan)
        means[:, :kk, :] = self.points[order]
        return BatchReply(
            neighbor_means=means,
            neighbor_count=np.full(len(q), kk, dtype=int),
            covariance=np.tile(self.sigma ** 2 * np.eye(3)[None],
                               (len(q), 1, 1)),
            status=np.full(len(q), int(FovStatus.FREE_SPACE)),
            depth_index=np.zeros(len(q), dtype=int),
        )

    def known_free_mask(self, points):
        return np.ones(len(np.atleast_2d(points)), dtype=bool)


def nlp_gradient_cases(n_cases: int = 30, seed: int = 5,
                       coords_per_case: int = 6) -> list[float]:
    """Max relative error of the assembled trajectory-NLP derivatives
    (objective gradient, defect and obstacle Jacobians) against central
    differences at random points, per case."""
    from .dynamics import load_bundled_vehicle, trim_level_flight
    from .nmpc import TranscriptionConfig, transcribe
    from .dynamics import VehicleState
    from .nmpc import reference_quaternion

    rng = np.random.default_rng(seed)
    params = load_bundled_vehicle()
    trim_state, trim_u = trim_level_flight(params, 5.0)
    pitch = 2.0 * math.atan2(trim_state.orientation[2],
                             trim_state.orientation[0])
    cfg = TranscriptionConfig(
        n_knots=3, reference_velocity=tuple(trim_state.velocity),
        reference_pitch=pitch, u_trim=tuple(trim_u.as_array()))
    wall = np.array([[4.0, y, z] for y in np.arange(-2.0, 2.01, 0.5)
                     for z in np.arange(-3.5, -0.49, 0.5)])
    view = _PointFieldView(wall)
    state = VehicleState(np.zeros(3) + [0.0, 0.0, -2.0],
                         reference_quaternion(0.0, pitch),
                         trim_state.velocity.copy(), np.zeros(3))
    nlp = transcribe(state, (np.array([5.0, 0.0, -2.0]), 0.0), view, cfg,
                     params)
    core = nlp.core
    z_base = nlp.z0
    errs = []
    for _ in range(n_cases):
        z = z_base + rng.normal(size=z_base.shape) * 0.05
        z[-1] = abs(z[-1]) + 0.02
        coords = rng.integers(0, z.size, size=coords_per_case)
        worst = 0.0
        g = core.objective_grad(z)
        dj = core.defect_jac(z)
        oj = core.obstacle_jac(z)
        for c in coords:
            eps = 1e-6
            dz = np.zeros_like(z)
            dz[c] = eps
            fd_obj = (core.objective(z + dz) - core.objective(z - dz)) / (2 * eps)
            worst = max(worst, abs(g[c] - fd_obj) / max(1.0, abs(fd_obj)))
            fd_def = (core.defects(z + dz) - core.defects(z - dz)) / (2 * eps)
            worst = max(worst, float(np.max(
                np.abs(dj[:, c] - fd_def) / np.maximum(1.0, np.abs(fd_def)))))
            if oj.size:
                fd_obs = (core.obstacles(z + dz)
                          - core.obstacles(z - dz)) / (2 * eps)
                worst = max(worst, float(np.max(
                    np.abs(oj[:, c] - fd_obs)
                    / np.maximum(1.0, np.abs(fd_obs)))))
        errs.append(worst)
    return errs


# ----------------------------------------------------------------------
# integration defect order vs the matrix exponential
# ----------------------------------------------------------------------

def defect_order_fit(seed: int = 9, hs=(0.2, 0.1, 0.05, 0.025)
                     ) -> tuple[np.ndarray, float]:
    """Defect magnitude on exact linear-flow endpoints; returns the
    per-step errors and the fitted log-log slope (5 for a fifth-order
    method)."""
    from scipy.linalg import expm
    from .nmpc import hs_defect

    rng = np.random.default_rng(seed)
    n = 4
    a = rng.normal(size=(n, n))
    a *= 1.5 / np.linalg.norm(a, 2)

    def dyn(x, u):
        return a @ x

    x0 = rng.normal(size=n)
    errors = []
    for h in hs:
        x1 = expm(a * h) @ x0
        d = hs_defect(x0, x1, np.zeros(1), np.zeros(1), h, dyn)
        errors.append(np.linalg.norm(d))
    slope = float(np.polyfit(np.log(hs), np.log(errors), 1)[0])
    return np.asarray(errors), slope


# ----------------------------------------------------------------------
# map queries vs a plain scan
# ----------------------------------------------------------------------

def brute_force_query(measurements, points: np.ndarray, k: int,
                      frustum_margin_px: float = 0.0):
    """Reference answer for the rolling-history query contract.

    Walks frames newest-first with explicit pinhole tests: the answering
    frame is the newest with stored points where the query is seen free,
    else the newest where it is occluded, else the newest frame that has
    points at all. Neighbors are that frame's k nearest stored points by
    straight argsort, mapped into the current body frame.
    """
    pts = np.atleast_2d(np.asarray(points, dtype=float))
    n = len(measurements)
    chain = [Pose.identity()]
    for j in range(1, n):
        chain.append(compose(measurements[j - 1].pose_edge, chain[j - 1]))
    cov_chain = [np.zeros((3, 3))]
    acc = np.zeros((3, 3))
    for j in range(1, n):
        r_cur_from_j = chain[j].rotation_matrix().T
        acc = acc + (r_cur_from_j @ measurements[j - 1].edge_covariance
                     @ r_cur_from_j.T)
        cov_chain.append(acc.copy())

    def classify(j: int, p_cur: np.ndarray) -> int:
        m = measurements[j]
        body = chain[j].rotation_matrix() @ p_cur + chain[j].translation
        mount = m.camera.mount_pose
        p_cam = mount.rotation_matrix().T @ (body - mount.translation)
        z = p_cam[2]
        if z <= 1e-9 or z > m.camera.max_range:
            return 2  # outside
        u = round(m.camera.fx * p_cam[0] / z + m.camera.cx)
        v = round(m.camera.fy * p_cam[1] / z + m.camera.cy)
        mg = frustum_margin_px
        if not (mg <= u <= m.camera.width - 1 - mg
                and mg <= v <= m.camera.height - 1 - mg):
            return 2
        if m.depths is not None:
            measured = m.depths[int(v), int(u)]
            if np.isfinite(measured) and z > measured:
                return 1  # occluded
        return 0  # free

    q = len(pts)
    means = np.full((q, k, 3), np.nan)
    counts = np.zeros(q, dtype=int)
    status = np.full(q, 2, dtype=int)
    depth = np.full(q, -1, dtype=int)
    covariance = np.zeros((q, 3, 3))
    for qi, p in enumerate(pts):
        codes = [classify(j, p) for j in range(n)]
        answer = -1
        for want in (0, 1):
            for j in range(n):
                if codes[j] == want and measurements[j].n_points > 0:
                    answer = j
                    status[qi] = want
                    break
            if answer >= 0:
                break
        if answer < 0:
            for j in range(n):
                if measurements[j].n_points > 0:
                    answer = j
                    break
        if answer < 0:
            continue
        m = measurements[answer]
        depth[qi] = answer
        body = (chain[answer].rotation_matrix() @ p
                + chain[answer].translation)
        dist = np.linalg.norm(m.body_points - body, axis=1)
        order = np.lexsort((np.arange(len(dist)), dist))[:k]
        back = invert(chain[answer])
        means[qi, :len(order), :] = transform_points(back,
                                                     m.body_points[order])
        counts[qi] = len(order)
        covariance[qi] = m.point_covariance + cov_chain[answer]
    return means, counts, covariance, status, depth


# ----------------------------------------------------------------------
# CLI-facing runners
# ----------------------------------------------------------------------

ORACLE_NAMES = ("probability", "gradients", "coefficients", "defect-order")


def run_named_oracle(name: str, print_fn=print) -> bool:
    """Execute one oracle by name, print a short report, return pass."""
    name = name.lower().replace("_", "-")
    print_fn(f"[{name}]")
    if name == "probability":
        cases = monte_carlo_probability_cases()
        worst = max(c.z for c in cases)
        for c in cases:
            print_fn(f"  analytic={c.p_analytic:.6f} "
                     f"mc={c.p_monte_carlo:.6f} se={c.se:.2e} z={c.z:.2f}")
        chi = central_chi_square_cases()
        worst_chi = max(abs(a - b) for a, b in chi)
        print_fn(f"max |z|={worst:.2f} (gate 3.0), "
                 f"max chi-square gap={worst_chi:.2e} (gate 1e-4)")
        return worst <= 3.0 and worst_chi <= 1e-4
    if name in ("gradients", "gradient"):
        fams = {
            "probability": probability_gradient_cases(),
            "distance": distance_gradient_cases(),
            "nlp": nlp_gradient_cases(),
        }
        ok = True
        for fam, errs in fams.items():
            worst = max(errs)
            print_fn(f"  {fam}: {len(errs)} cases, max rel err {worst:.2e}")
            ok = ok and worst <= 1e-4
        return ok
    if name in ("coefficients", "series"):
        pairs = coefficient_cases()
        worst = max(float(np.max(np.abs(a - b) / np.maximum(1e-30, np.abs(b))))
                    for a, b in pairs)
        tails = series_tail_ratios()
        print_fn(f"  {len(pairs)} inputs, max coefficient rel gap "
                 f"{worst:.2e}; max tail ratio {tails.max():.2e}")
        return worst <= 1e-10 and float(tails.max()) < 1e-8
    if name == "defect-order":
        errors, slope = defect_order_fit()
        print_fn(f"  defect errors {errors}, slope {slope:.3f}")
        return abs(slope - 5.0) <= 0.3
    raise ValueError(f"unknown oracle: {name!r} (expected probability, "
                     "gradients, coefficients, defect-order)")
