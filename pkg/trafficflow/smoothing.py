import logging
import math
from dataclasses import dataclass

import numpy as np
from scipy.linalg import LinAlgError, cho_factor, cho_solve

from trafficflow.errors import ConfigError, SolverFailure, TooShort
from trafficflow.geometry import Polyline, cross2


logger = logging.getLogger(__name__)

TOLERANCE = 1e-6


@dataclass(frozen=True)
class SmoothConfig:
    max_lateral_deviation: float = 0.75
    smoothness_weight: float = 1.0
    fidelity_weight: float = 0.1
    sample_spacing: float = 0.5

    def __post_init__(self):
        if not self.max_lateral_deviation > 0:
            raise ConfigError('max_lateral_deviation must be positive')
        if self.smoothness_weight < 0 or self.fidelity_weight < 0:
            raise ConfigError('smoothing weights must be non-negative')
        if self.smoothness_weight == 0 and self.fidelity_weight == 0:
            raise ConfigError('smoothness_weight and fidelity_weight cannot both be zero')
        if not self.sample_spacing > 0:
            raise ConfigError('sample_spacing must be positive')


def sample_normals(points):
    """Left normals from central differences (one-sided at the ends)."""
    tangents = np.empty_like(points)
    tangents[1:-1] = points[2:] - points[:-2]
    tangents[0] = points[1] - points[0]
    tangents[-1] = points[-1] - points[-2]
    tangents /= np.hypot(tangents[:, 0], tangents[:, 1])[:, None]
    return np.stack([-tangents[:, 1], tangents[:, 0]], axis=1)


def second_difference(n):
    matrix = np.zeros((max(n - 2, 0), n))
    for k in range(n - 2):
        matrix[k, k:k + 3] = (1.0, -2.0, 1.0)
    return matrix


class SmoothingProblem:
    """
    Offsets o along the sample normals n, moving samples q to q + o n, minimize

        smoothness_weight * sum ||second difference of (q + o n)||^2
            + fidelity_weight * sum o^2

    with |o| <= max_lateral_deviation and o pinned to 0 at both ends. Written as
    1/2 o'Ho + g'o + c over the full offset vector.
    """

    def __init__(self, points, normals, cfg=SmoothConfig()):
        self.points = np.asarray(points, dtype=float)
        self.normals = np.asarray(normals, dtype=float)
        self.cfg = cfg
        n = len(self.points)
        diff = second_difference(n)
        ax = diff * self.normals[:, 0][None, :]
        ay = diff * self.normals[:, 1][None, :]
        bx = diff @ self.points[:, 0]
        by = diff @ self.points[:, 1]
        ws, wf = cfg.smoothness_weight, cfg.fidelity_weight
        self.hessian = 2 * (ws * (ax.T @ ax + ay.T @ ay) + wf * np.eye(n))
        self.linear = 2 * ws * (ax.T @ bx + ay.T @ by)
        self.constant = ws * float(bx @ bx + by @ by)
        self.interior = np.arange(1, n - 1)

    @staticmethod
    def from_polyline(polyline, cfg=SmoothConfig()):
        count = max(2, int(math.ceil(polyline.length / cfg.sample_spacing - 1e-9)))
        points = polyline.point_at(np.linspace(0.0, polyline.length, count + 1))
        return SmoothingProblem(points, sample_normals(points), cfg)

    def __len__(self):
        return len(self.points)

    def objective(self, offsets):
        offsets = np.asarray(offsets, dtype=float)
        return float(0.5 * offsets @ self.hessian @ offsets + self.linear @ offsets + self.constant)

    def gradient(self, offsets):
        return self.hessian @ np.asarray(offsets, dtype=float) + self.linear

    def apply(self, offsets):
        return self.points + np.asarray(offsets)[:, None] * self.normals

    def unconstrained(self):
        """Minimizer with pinned ends and no corridor, by a direct dense solve."""
        free = self.interior
        offsets = np.zeros(len(self))
        offsets[free] = np.linalg.solve(self.hessian[np.ix_(free, free)], -self.linear[free])
        return offsets

    def solve(self, tol=TOLERANCE, max_iterations=None):
        """
        Primal active-set method for the box-constrained problem, started from the
        feasible zero offsets. Returns (offsets, iterations).
        """
        bound = self.cfg.max_lateral_deviation
        n = len(self)
        if max_iterations is None:
            max_iterations = 10 * n
        x = np.zeros(n)
        active = {}
        interior = set(self.interior.tolist())
        for iteration in range(1, max_iterations + 1):
            free = np.array(sorted(interior - set(active)), dtype=int)
            fixed = np.array(sorted(active), dtype=int)
            target = x.copy()
            if len(free):
                rhs = -self.linear[free]
                if len(fixed):
                    rhs -= self.hessian[np.ix_(free, fixed)] @ x[fixed]
                try:
                    target[free] = cho_solve(cho_factor(self.hessian[np.ix_(free, free)]), rhs)
                except LinAlgError as err:
                    raise SolverFailure('smoothing subproblem is singular: {}'.format(err))
            step = target - x
            if np.max(np.abs(step), initial=0.0) <= tol:
                x = target
                grad = self.gradient(x)
                multipliers = {i: -grad[i] * sign for i, sign in active.items()}
                if not multipliers or min(multipliers.values()) >= -tol:
                    return x, iteration
                worst = min(multipliers, key=lambda i: (multipliers[i], i))
                del active[worst]
                continue
            alpha = 1.0
            blocking = None
            for i in free:
                if step[i] > 0 and x[i] + step[i] > bound:
                    ratio = (bound - x[i]) / step[i]
                elif step[i] < 0 and x[i] + step[i] < -bound:
                    ratio = (-bound - x[i]) / step[i]
                else:
                    continue
                if ratio < alpha:
                    alpha, blocking = ratio, i
            x = x + alpha * step
            if blocking is not None:
                sign = 1.0 if step[blocking] > 0 else -1.0
                x[blocking] = sign * bound
                active[blocking] = sign
        raise SolverFailure('active set did not converge within {} iterations'.format(max_iterations))


def menger_curvature(points):
    a = points[1:-1] - points[:-2]
    b = points[2:] - points[1:-1]
    c = points[2:] - points[:-2]
    lengths = (np.hypot(a[:, 0], a[:, 1]) * np.hypot(b[:, 0], b[:, 1]) * np.hypot(c[:, 0], c[:, 1]))
    with np.errstate(divide='ignore', invalid='ignore'):
        curvature = np.where(lengths > 0, 2 * np.abs(cross2(a, b)) / lengths, 0.0)
    return curvature


@dataclass
class SmoothedPath:
    """A smoothed path together with the searched path (`source`) its corridor surrounds."""
    channel_id: str
    polyline: Polyline
    offsets: np.ndarray
    max_curvature: float
    max_deviation: float
    objective: float
    baseline_objective: float
    source: Polyline
    iterations: int = 0

    def to_record(self):
        return {'channel': self.channel_id,
                'vertices': self.polyline.to_list(),
                'source': self.source.to_list(),
                'offsets': [float(o) for o in self.offsets],
                'max_curvature': self.max_curvature,
                'max_deviation': self.max_deviation,
                'objective': self.objective,
                'baseline_objective': self.baseline_objective}

    @staticmethod
    def from_record(record):
        return SmoothedPath(record['channel'], Polyline(record['vertices']),
                            np.array(record['offsets']), float(record['max_curvature']),
                            float(record['max_deviation']), float(record['objective']),
                            float(record['baseline_objective']), Polyline(record['source']))


def kkt_residual(problem, offsets, tol=TOLERANCE):
    """
    Largest violation of the optimality conditions of the box-constrained problem:
    zero gradient on free interior samples, outward-pushing gradient on samples held
    at the corridor bound. Pinned endpoints carry no condition.
    """
    bound = problem.cfg.max_lateral_deviation
    grad = problem.gradient(offsets)[problem.interior]
    x = np.asarray(offsets, dtype=float)[problem.interior]
    upper = x >= bound - tol
    lower = x <= -bound + tol
    free = ~(upper | lower)
    violations = np.concatenate([np.abs(grad[free]), np.maximum(grad[upper], 0.0),
                                 np.maximum(-grad[lower], 0.0)])
    return float(violations.max(initial=0.0))


def smooth_polyline(polyline, cfg=SmoothConfig(), channel_id=None):
    if polyline.length < 3 * cfg.sample_spacing:
        raise TooShort('path of {:.2f} m is shorter than 3 samples of {:.2f} m'.format(
            polyline.length, cfg.sample_spacing))
    problem = SmoothingProblem.from_polyline(polyline, cfg)
    offsets, iterations = problem.solve()
    points = problem.apply(offsets)
    result = SmoothedPath(channel_id, Polyline(points), offsets,
                          float(menger_curvature(points).max(initial=0.0)),
                          float(np.abs(offsets).max()),
                          problem.objective(offsets),
                          problem.objective(np.zeros(len(problem))),
                          polyline, iterations)
    logger.debug('smoothed %s: %d samples, %d iterations, objective %.4f -> %.4f',
                 channel_id, len(problem), iterations, result.baseline_objective, result.objective)
    return result


def smooth_path(path, cfg=SmoothConfig()):
    """
    Smooths a candidate path inside its corridor. A SmoothedPath is smoothed again
    around its own source, so repeated smoothing returns the same path.
    """
    source = path.source if isinstance(path, SmoothedPath) else path.polyline
    return smooth_polyline(source, cfg, path.channel_id)
