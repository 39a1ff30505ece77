"""Spherical fitting: an analytic map between PCF points and gaze angles.

A fitted sphere is described by ten free numbers: the center, three Euler
angles of a rotation, and an affine map ``k * angle + b`` for each of yaw
and pitch. A PCF point ``p`` is mapped to gaze by

    u = R (p - center) / |p - center|
    yaw   = k1 * atan2(-u_x, -u_z) + b1
    pitch = k2 * asin(-u_y)      + b2

The radius is not a free parameter; it is the mean distance of the fitted
points to the center and is only used to place inverse targets on the sphere
and to measure how far points are from it.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import minimize

from . import geom
from .errors import DegeneratePointError, InvalidInputError, OutOfRangeError

logger = logging.getLogger(__name__)

DEFAULT_SUBSET = 2000
_RANGE_EPS = 1e-12
# objective (rad) above which a fit is flagged as poor
POOR_FIT = np.pi / 2


@dataclass(frozen=True)
class SphericalFitParams:
    center: np.ndarray
    euler_zyx: np.ndarray
    k1: float
    b1: float
    k2: float
    b2: float
    radius: float
    objective: float = float("nan")
    trace: tuple = field(default=(), compare=False, repr=False)
    warning: str | None = field(default=None, compare=False)

    def __post_init__(self):
        object.__setattr__(self, "center", np.asarray(self.center, dtype=float).reshape(3))
        object.__setattr__(self, "euler_zyx", np.asarray(self.euler_zyx, dtype=float).reshape(3))
        if self.k1 == 0 or self.k2 == 0:
            raise InvalidInputError("k1 and k2 must be nonzero")
        if not self.radius > 0:
            raise InvalidInputError(f"radius must be positive, got {self.radius}")

    @property
    def rotation(self):
        return geom.rotation_from_euler(*self.euler_zyx)

    @property
    def objective_deg(self):
        return float(np.degrees(self.objective))

    def to_vector(self):
        """The ten free parameters as a flat array."""
        return np.concatenate([self.center, self.euler_zyx, [self.k1, self.b1, self.k2, self.b2]])

    @classmethod
    def from_vector(cls, x, radius, **kw):
        x = np.asarray(x, dtype=float)
        return cls(center=x[:3], euler_zyx=x[3:6], k1=float(x[6]), b1=float(x[7]),
                   k2=float(x[8]), b2=float(x[9]), radius=float(radius), **kw)

    def to_json_dict(self):
        return {
            "center": [float(v) for v in self.center],
            "euler_zyx": [float(v) for v in self.euler_zyx],
            "k1": float(self.k1),
            "b1": float(self.b1),
            "k2": float(self.k2),
            "b2": float(self.b2),
            "radius": float(self.radius),
            "objective_deg": self.objective_deg,
        }

    @classmethod
    def from_json_dict(cls, d):
        keys = {"center", "euler_zyx", "k1", "b1", "k2", "b2", "radius", "objective_deg"}
        missing = keys - set(d)
        if missing:
            raise InvalidInputError(f"spherical fit document missing keys: {sorted(missing)}")
        return cls(center=d["center"], euler_zyx=d["euler_zyx"], k1=float(d["k1"]), b1=float(d["b1"]),
                   k2=float(d["k2"]), b2=float(d["b2"]), radius=float(d["radius"]),
                   objective=float(np.radians(d["objective_deg"])))


def identity_params(radius=1.0):
    return SphericalFitParams(center=np.zeros(3), euler_zyx=np.zeros(3), k1=1.0, b1=0.0,
                              k2=1.0, b2=0.0, radius=radius)


def _coords(pcf):
    return np.asarray(getattr(pcf, "coords", pcf), dtype=float)


def _forward(x, pts):
    """Forward map for a raw parameter vector; returns angles and radii."""
    R = geom.rotation_from_euler(x[3], x[4], x[5])
    u = (pts - x[:3]) @ R.T
    radii = np.linalg.norm(u, axis=-1)
    ang = geom.direction_angles(u)
    pitch = x[8] * ang[..., 0] + x[9]
    yaw = x[6] * ang[..., 1] + x[7]
    return np.stack([pitch, yaw], axis=-1), radii


def sf_forward(params, p):
    """Gaze angles ``(..., 2)`` as (pitch, yaw) for PCF points ``(..., 3)``.

    Raises
    ------
    DegeneratePointError
        If a point lies within 1e-9 of the sphere center.
    """
    pts = _coords(p)
    angles, radii = _forward(params.to_vector(), pts)
    if np.any(radii < 1e-9):
        raise DegeneratePointError("point coincides with the sphere center")
    return angles


def descale(params, g):
    """Undo the affine angle maps; returns ``(pitch, yaw)`` on the unit sphere."""
    g = np.asarray(g, dtype=float)
    theta = (g[..., 1] - params.b1) / params.k1
    phi = (g[..., 0] - params.b2) / params.k2
    return phi, theta


def invertible_mask(params, g):
    """True where ``g`` lies in the range :func:`sf_inverse` accepts."""
    phi, theta = descale(params, g)
    ok_theta = (theta > -np.pi - _RANGE_EPS) & (theta <= np.pi + _RANGE_EPS)
    ok_phi = np.abs(phi) <= np.pi / 2 + _RANGE_EPS
    return ok_theta & ok_phi


def sf_inverse(params, g):
    """Point on the fitted sphere whose forward image is ``g``.

    Raises
    ------
    OutOfRangeError
        If the de-scaled yaw leaves ``(-pi, pi]`` or the de-scaled pitch
        leaves ``[-pi/2, pi/2]``.
    """
    g = np.asarray(g, dtype=float)
    if not np.all(invertible_mask(params, g)):
        raise OutOfRangeError("gaze outside the invertible range of the spherical fit")
    phi, theta = descale(params, g)
    phi = np.clip(phi, -np.pi / 2, np.pi / 2)
    u = geom.angles_to_vector(np.stack([phi, theta], axis=-1))
    return (params.radius * u) @ params.rotation + params.center


def sphere_error(pcf, params):
    """Mean absolute deviation of point radii from the fitted radius."""
    pts = _coords(pcf)
    radii = np.linalg.norm(pts - params.center, axis=-1)
    return float(np.mean(np.abs(radii - params.radius)))


def algebraic_sphere(pts):
    """Linear least-squares sphere through ``pts``; returns ``(center, radius)``.

    Solves ``|p|^2 = 2 c.p + t`` for ``c`` and ``t = r^2 - |c|^2``.
    """
    A = np.hstack([2.0 * pts, np.ones((pts.shape[0], 1))])
    rhs = np.sum(pts**2, axis=1)
    sol, *_ = np.linalg.lstsq(A, rhs, rcond=None)
    c = sol[:3]
    r2 = sol[3] + c @ c
    radius = np.sqrt(r2) if r2 > 0 else float(np.mean(np.linalg.norm(pts - c, axis=1)))
    return c, float(radius)


def kabsch_rotation(src, dst):
    """Orthogonal ``Q`` minimizing ``sum |Q src_i - dst_i|^2`` (may be a reflection)."""
    M = dst.T @ src
    U, _, Vt = np.linalg.svd(M)
    return U @ Vt


def _mean_angle(x, pts, labels):
    ang, radii = _forward(x, pts)
    if np.any(radii < 1e-9):
        return np.inf
    est = geom.angles_to_vector(ang)
    cos = np.clip(np.sum(est * labels, axis=-1), -1.0, 1.0)
    return float(np.mean(np.arccos(cos)))


def _initial_guess(pts, labels):
    center, radius = algebraic_sphere(pts)
    u = pts - center
    u /= np.linalg.norm(u, axis=1, keepdims=True)
    Q = kabsch_rotation(u, labels)
    k1 = 1.0
    if np.linalg.det(Q) < 0:
        # mirror x so the rotation is proper; yaw changes sign, absorbed by k1
        Q = np.diag([-1.0, 1.0, 1.0]) @ Q
        k1 = -1.0
    euler = geom.euler_from_rotation(Q)
    return np.array([*center, *euler, k1, 0.0, 1.0, 0.0]), radius


def fit_spherical(pcf, labels, subset=DEFAULT_SUBSET, seed=0, restarts=3, maxiter=4000):
    """Fit the ten spherical-fit parameters by minimizing mean angular error.

    Starts from an algebraic sphere fit and a Kabsch alignment of the point
    directions to the label directions, then refines all ten parameters with
    Nelder-Mead followed by ``restarts`` randomly perturbed restarts.

    Parameters
    ----------
    pcf : Embedding3 or (n, 3) array
    labels : (n, 3) array of unit gaze vectors
    subset : int
        At most this many samples (drawn with ``seed``) enter the fit.

    Returns
    -------
    SphericalFitParams
        With ``objective`` the mean angular error in radians on the fitted
        samples and ``trace`` the best objective after every iteration.
    """
    pts = _coords(pcf)
    labels = geom._check_unit(labels, "labels")
    n = pts.shape[0]
    if labels.shape[0] != n:
        raise InvalidInputError(f"{n} points but {labels.shape[0]} labels")
    if n < 10:
        raise InvalidInputError(f"spherical fit needs at least 10 samples, got {n}")
    ang = geom.direction_angles(labels)
    spread = np.ptp(ang, axis=0)
    if spread[0] <= 1e-3 or spread[1] <= 1e-3:
        raise InvalidInputError(f"degenerate label spread (pitch {spread[0]:.3g}, yaw {spread[1]:.3g} rad)")

    rng = np.random.default_rng(seed)
    if n > subset:
        idx = np.sort(rng.choice(n, size=subset, replace=False))
        pts, labels = pts[idx], labels[idx]

    x0, radius0 = _initial_guess(pts, labels)
    steps = np.array([0.1 * radius0] * 3 + [0.1] * 3 + [0.1, 0.05, 0.1, 0.05])

    trace = []

    def objective(x):
        return _mean_angle(x, pts, labels)

    best_x, best_f = x0, objective(x0)
    trace.append(best_f)

    def run(start):
        nonlocal best_x, best_f
        simplex = np.vstack([start, start + np.diag(steps)])
        state = {"best": np.inf}

        def callback(intermediate_result):
            f = float(intermediate_result.fun)
            trace.append(min(f, best_f, state["best"]))
            state["best"] = min(state["best"], f)

        res = minimize(objective, start, method="Nelder-Mead", callback=callback,
                       options={"initial_simplex": simplex, "maxiter": maxiter,
                                "xatol": 1e-10, "fatol": 1e-12})
        if res.fun < best_f:
            best_x, best_f = res.x, float(res.fun)
        trace.append(best_f)

    run(x0)
    for _ in range(restarts):
        run(best_x + rng.normal(size=10) * steps)
        run(best_x)

    radius = float(np.mean(np.linalg.norm(pts - best_x[:3], axis=1)))
    warning = None
    if not best_f < POOR_FIT:
        warning = f"poor spherical fit: mean angular error {np.degrees(best_f):.2f} deg"
        logger.warning(warning)
    logger.info("spherical fit: mean angular error %.4f deg after %d iterations",
                np.degrees(best_f), len(trace))
    return SphericalFitParams.from_vector(best_x, radius, objective=best_f,
                                          trace=tuple(trace), warning=warning)
