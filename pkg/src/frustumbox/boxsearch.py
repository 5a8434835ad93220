"""Physically-aware box search.

An anchor box of fixed per-class size is slid and rotated over an object's
frustum points by minimizing

    l_box = l_od + lambda1 * l_fvd + lambda2 * l_bvc

over ``[x, y, z, theta]``. ``l_od`` penalizes points outside the box,
``l_fvd`` (flat-surfaced objects) pulls points toward the box corner that
faces the sensor, ``l_bvc`` (irregular objects) pulls the box BEV center
onto the points.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .geometry import (CS, SS, TWO_PI, AnchorPrior, BoxParams, as_points,
                       filter_background, normalize_angle)

# start losses this close (relative) count as tied; the earlier start wins
TIE_RTOL = 1e-12


class InsufficientEvidence(ValueError):
    """Raised when too few points remain to fit a box."""


@dataclass
class SearchVars:
    x: float
    y: float
    z: float
    theta: float

    def as_array(self) -> np.ndarray:
        return np.array([self.x, self.y, self.z, self.theta], dtype=np.float64)

    @classmethod
    def from_array(cls, v) -> "SearchVars":
        v = np.asarray(v, dtype=np.float64).reshape(4)
        if not np.all(np.isfinite(v)):
            raise ValueError("search variables must be finite")
        return cls(*(float(a) for a in v))


@dataclass(frozen=True)
class LossWeights:
    lambda1: float = 0.2
    lambda2: float = 0.2
    od: float = 1.0  # weight on the outside-distance term

    def __post_init__(self):
        if self.lambda1 < 0 or self.lambda2 < 0 or self.od < 0:
            raise ValueError("loss weights must be nonnegative")


@dataclass(frozen=True)
class LossBreakdown:
    l_od: float
    l_fvd: float
    l_bvc: float
    l_box: float

    def as_dict(self) -> dict:
        return {"od": self.l_od, "fvd": self.l_fvd, "bvc": self.l_bvc, "box": self.l_box}


@dataclass
class SearchConfig:
    start_headings: tuple = tuple(k * np.pi / 4 for k in range(8))
    eps: float = 1e-4
    gtol: float = 1e-6
    max_iters: int = 100
    smoothing: float = 0.0
    normalize: bool = False
    max_step: float = 1.0

    def __post_init__(self):
        self.start_headings = tuple(float(t) for t in self.start_headings)
        if not self.start_headings:
            raise ValueError("need at least one start heading")
        if self.eps <= 0:
            raise ValueError("finite-difference step must be positive")

    @classmethod
    def with_starts(cls, n: int, **kw) -> "SearchConfig":
        return cls(start_headings=tuple(k * TWO_PI / n for k in range(n)), **kw)


@dataclass
class SearchResult:
    box: BoxParams
    breakdown: LossBreakdown
    converged: bool
    iterations: int
    start_index: int
    starts: list = field(default_factory=list)  # (SearchVars, LossBreakdown, converged, iterations)


def _as_vars_array(vars) -> np.ndarray:
    if isinstance(vars, SearchVars):
        return vars.as_array()
    return np.asarray(vars, dtype=np.float64).reshape(4)


def _hinge(x, t):
    if t > 0:
        return t * np.logaddexp(0.0, x / t)
    return np.maximum(x, 0.0)


def _norm2(d, t):
    sq = np.sum(d * d, axis=-1)
    if t > 0:
        return np.sqrt(sq + t * t) - t
    return np.sqrt(sq)


def _planar_norm(a, b, t):
    sq = a * a + b * b
    if t > 0:
        return np.sqrt(sq + t * t) - t
    return np.sqrt(sq)


def outside_distance_loss(local_points, boundary, smoothing: float = 0.0):
    """Sum over points and axes of ``max(|p| - boundary, 0)``."""
    p = np.asarray(local_points, dtype=np.float64)
    if p.size == 0:
        return 0.0
    return np.sum(_hinge(np.abs(p) - np.asarray(boundary), smoothing), axis=(-1, -2))


def front_view_distance_loss(local_points, fb, smoothing: float = 0.0):
    """Sum of BEV distances from each point to the front-viewed corner ``fb``."""
    p = np.asarray(local_points, dtype=np.float64)
    if p.size == 0:
        return 0.0
    fb = np.asarray(fb, dtype=np.float64)
    return np.sum(_norm2(p[..., :2] - fb[..., None, :], smoothing), axis=-1)


def bev_center_loss(local_points, smoothing: float = 0.0):
    """Sum of BEV distances from each point to the box center."""
    p = np.asarray(local_points, dtype=np.float64)
    if p.size == 0:
        return 0.0
    return np.sum(_norm2(p[..., :2], smoothing), axis=-1)


def view_angle(vars) -> float:
    """Sensor azimuth of the box center minus heading, wrapped to (0, 2pi]."""
    x, y, _, theta = _as_vars_array(vars)
    if x == 0.0 and y == 0.0:
        raise ValueError("view angle undefined for a box centered at the sensor")
    return float(_view_angles(np.array([[x, y, 0.0, theta]]))[0])


def _view_angles(V: np.ndarray) -> np.ndarray:
    phi = np.mod(np.arctan2(V[:, 1], V[:, 0]) - V[:, 3], TWO_PI)
    return np.where(phi <= 0.0, TWO_PI, phi)


def _fb_signs(phi: np.ndarray) -> np.ndarray:
    s_l = np.where((phi > np.pi / 2) & (phi <= 1.5 * np.pi), 1.0, -1.0)
    s_w = np.where(phi > np.pi, 1.0, -1.0)
    return np.stack([s_l, s_w], axis=-1)


def fb_from_view_angle(phi, length: float, width: float) -> np.ndarray:
    """Front-viewed BEV corner for view angle(s) ``phi``.

    (0, pi/2] -> (-l/2, -w/2); (pi/2, pi] -> (l/2, -w/2);
    (pi, 3pi/2] -> (l/2, w/2); (3pi/2, 2pi] -> (-l/2, w/2).
    """
    phi = np.asarray(phi, dtype=np.float64)
    return _fb_signs(phi) * np.array([length / 2.0, width / 2.0])


def front_view_boundary(vars, prior: AnchorPrior) -> np.ndarray:
    h, w, l = prior.size
    return fb_from_view_angle(view_angle(vars), l, w)


class BoxLossContext:
    """Everything ``box_loss`` needs besides the search variables."""

    def __init__(self, points, prior: AnchorPrior, weights: LossWeights = LossWeights(),
                 smoothing: float = 0.0, normalize: bool = False):
        self.points = as_points(points)
        if len(self.points) == 0:
            raise InsufficientEvidence("insufficient evidence: no object points")
        self.prior = prior
        self.weights = weights
        self.smoothing = float(smoothing)
        self.normalize = bool(normalize)
        self.n_evals = 0

    def terms(self, V) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """(l_od, l_fvd, l_bvc) for a (K, 4) batch of variables."""
        V = np.atleast_2d(np.asarray(V, dtype=np.float64))
        self.n_evals += len(V)
        t = self.smoothing
        h, w, l = self.prior.size
        px, py, pz = self.points.T
        c, s = np.cos(V[:, 3:4]), np.sin(V[:, 3:4])
        dx = px - V[:, 0:1]
        dy = py - V[:, 1:2]
        lx = c * dx + s * dy
        ly = c * dy - s * dx
        od = (_hinge(np.abs(lx) - l / 2.0, t).sum(axis=1)
              + _hinge(np.abs(ly) - w / 2.0, t).sum(axis=1))
        # the height term only depends on z, which few batch rows change
        zs, inv = np.unique(V[:, 2], return_inverse=True)
        od += _hinge(np.abs(pz - zs[:, None]) - h / 2.0, t).sum(axis=1)[inv.ravel()]
        fvd = bvc = np.zeros(len(V))
        if self.prior.structure == SS:
            fb = fb_from_view_angle(_view_angles(V), l, w)
            fvd = _planar_norm(lx - fb[:, 0:1], ly - fb[:, 1:2], t).sum(axis=1)
        elif self.prior.structure == CS:
            bvc = _planar_norm(lx, ly, t).sum(axis=1)
        if self.normalize:
            n = len(self.points)
            od, fvd, bvc = od / n, fvd / n, bvc / n
        return od, fvd, bvc

    def batch(self, V) -> np.ndarray:
        od, fvd, bvc = self.terms(V)
        w = self.weights
        return w.od * od + w.lambda1 * fvd + w.lambda2 * bvc

    def __call__(self, v) -> float:
        return float(self.batch(_as_vars_array(v)[None, :])[0])

    def breakdown(self, v) -> LossBreakdown:
        od, fvd, bvc = (float(a[0]) for a in self.terms(_as_vars_array(v)[None, :]))
        w = self.weights
        box = w.od * od + w.lambda1 * fvd + w.lambda2 * bvc
        return LossBreakdown(od, fvd, bvc, box)


def box_loss(vars, object_points, prior: AnchorPrior, weights: LossWeights = LossWeights(),
             smoothing: float = 0.0, normalize: bool = False) -> LossBreakdown:
    """Loss terms for one placement of the anchor box.

    The front-view term is active only for SS priors and the BEV-center term
    only for CS priors.
    """
    return BoxLossContext(object_points, prior, weights, smoothing, normalize).breakdown(vars)


def numeric_gradient(vars, ctx: BoxLossContext, eps: float = 1e-4) -> np.ndarray:
    """Central-difference gradient of ``l_box`` in (x, y, z, theta)."""
    if eps <= 0:
        raise ValueError("eps must be positive")
    v = _as_vars_array(vars)
    steps = np.eye(4) * eps
    f = ctx.batch(np.vstack([v + steps, v - steps]))
    return (f[:4] - f[4:]) / (2.0 * eps)


def _steepest(g, max_step):
    # scaled identity: a full step moves max_step along -g, whatever the loss scale
    gn = np.linalg.norm(g)
    return np.eye(4) * (max_step / gn if gn > 0 else 1.0)


def _small_gradient(g, f, gtol) -> bool:
    # relative to the (nonnegative) loss so that rescaling the weights changes nothing
    return bool(np.linalg.norm(g) <= gtol * abs(f))


def bfgs_minimize(init, ctx: BoxLossContext, config: SearchConfig = SearchConfig()):
    """BFGS with Armijo backtracking (halving, c=1e-4) on finite-difference gradients.

    Returns ``(SearchVars, LossBreakdown, converged, iterations)``. ``converged``
    means the gradient norm reached ``config.gtol`` times the loss value. A
    failed line search or a stall (three iterations with negligible decrease,
    common at hinge kinks) returns the best point so far with ``converged=False``.
    """
    x = _as_vars_array(init).copy()
    f = ctx(x)
    g = numeric_gradient(x, ctx, config.eps)
    eye = np.eye(4)
    H = _steepest(g, config.max_step)
    converged = False
    stalled = 0
    reset = True
    it = 0
    while it < config.max_iters:
        if _small_gradient(g, f, config.gtol):
            converged = True
            break
        p = -H @ g
        slope = g @ p
        if slope >= 0:
            H = _steepest(g, config.max_step)
            p = -H @ g
            slope = g @ p
        step_norm = np.linalg.norm(p)
        if step_norm > config.max_step:
            p *= config.max_step / step_norm
            slope *= config.max_step / step_norm
            step_norm = config.max_step
        alpha, accepted = 1.0, False
        while alpha * step_norm > 1e-10:
            x_new = x + alpha * p
            f_new = ctx(x_new)
            if f_new <= f + 1e-4 * alpha * slope:
                accepted = True
                break
            alpha *= 0.5
        if not accepted:
            if not reset:
                H, reset = _steepest(g, config.max_step), True
                continue
            break
        reset = False
        it += 1
        g_new = numeric_gradient(x_new, ctx, config.eps)
        s, y = x_new - x, g_new - g
        sy = s @ y
        if sy > 1e-10 * np.linalg.norm(s) * np.linalg.norm(y):
            if it == 1:
                H = eye * (sy / (y @ y))
            rho = 1.0 / sy
            H = (eye - rho * np.outer(s, y)) @ H @ (eye - rho * np.outer(y, s)) + rho * np.outer(s, s)
        stalled = stalled + 1 if f - f_new <= 1e-12 * abs(f) else 0
        x, f, g = x_new, f_new, g_new
        if stalled >= 3:
            break
    else:
        converged = _small_gradient(g, f, config.gtol)
    x[3] = normalize_angle(x[3])
    return SearchVars.from_array(x), ctx.breakdown(x), converged, it


def initial_vars(points, theta: float = 0.0) -> SearchVars:
    c = as_points(points).mean(axis=0)
    return SearchVars(c[0], c[1], c[2], theta)


def _pi_twin(previous, theta):
    for j, prev in enumerate(previous):
        d = np.mod(theta - prev, TWO_PI)
        if abs(d - np.pi) < 1e-12:
            return j
    return None


def search_box(object_points, prior: AnchorPrior, weights: LossWeights = LossWeights(),
               config: SearchConfig = SearchConfig(), filter_points: bool = True) -> SearchResult:
    """Fit the anchor box to one object's frustum points.

    Background points are trimmed first, then BFGS runs from the filtered
    centroid at every configured start heading; the lowest ``l_box`` wins
    (ties go to the earlier start).
    """
    pts = as_points(object_points)
    if filter_points:
        pts = filter_background(pts)
    if len(pts) < 3:
        raise InsufficientEvidence(f"insufficient evidence: {len(pts)} points after filtering")
    ctx = BoxLossContext(pts, prior, weights, config.smoothing, config.normalize)
    centroid = pts.mean(axis=0)
    starts = []
    best = None
    for idx, theta in enumerate(config.start_headings):
        twin = _pi_twin(config.start_headings[:idx], theta)
        if twin is None:
            res = bfgs_minimize(SearchVars(centroid[0], centroid[1], centroid[2], theta), ctx, config)
        else:
            # l_box is pi-periodic in heading, so this start replays an earlier one
            v, breakdown, converged, iters = starts[twin]
            flipped = SearchVars(v.x, v.y, v.z, normalize_angle(v.theta + np.pi))
            res = (flipped, breakdown, converged, iters)
        starts.append(res)
        if best is None or res[1].l_box < starts[best][1].l_box * (1.0 - TIE_RTOL):
            best = idx
    v, breakdown, converged, iters = starts[best]
    box = BoxParams([v.x, v.y, v.z], prior.size, v.theta)
    return SearchResult(box, breakdown, converged, iters, best, starts)
