"""Rotation groups SO(3) and SO(2) with geodesics, sampling, and canonical norms.

Rotations in 3D are stored as unit quaternions (w, x, y, z); matrices appear
only at API boundaries.  Tangent vectors of SO(3) are axis-angle rate vectors
k = (k_x, k_y, k_z), identified with the skew-symmetric matrix ``skew(k)``.
Torsions are SO(2) elements with an explicit period p, stored wrapped to
(-p/2, p/2].
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

TWO_PI = 2.0 * math.pi

# Below this rotation angle, exp/log switch to second-order Taylor expansions.
_SMALL_ANGLE = 1e-7


def skew(k) -> np.ndarray:
    """Map a 3-vector to its skew-symmetric matrix, skew(k) @ v == cross(k, v)."""
    kx, ky, kz = np.asarray(k, dtype=float)
    return np.array([[0.0, -kz, ky], [kz, 0.0, -kx], [-ky, kx, 0.0]])


def unskew(m) -> np.ndarray:
    """Inverse of :func:`skew` (antisymmetric part is used)."""
    m = np.asarray(m, dtype=float)
    return np.array([m[2, 1] - m[1, 2], m[0, 2] - m[2, 0], m[1, 0] - m[0, 1]]) / 2.0


def _quat_mul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    aw, ax, ay, az = a
    bw, bx, by, bz = b
    return np.array(
        [
            aw * bw - ax * bx - ay * by - az * bz,
            aw * bx + ax * bw + ay * bz - az * by,
            aw * by - ax * bz + ay * bw + az * bx,
            aw * bz + ax * by - ay * bx + az * bw,
        ]
    )


class Rotation3:
    """A 3D rotation backed by a unit quaternion.

    Instances are immutable values; q and -q denote the same rotation, so
    equality is tested on matrices (or |dot| of quaternions), never on raw
    components.
    """

    __slots__ = ("q",)

    def __init__(self, q):
        q = np.asarray(q, dtype=float)
        if q.shape != (4,):
            raise ValueError(f"quaternion must have shape (4,), got {q.shape}")
        n = math.sqrt(float(q @ q))
        if n == 0.0 or not math.isfinite(n):
            raise ValueError("quaternion norm must be finite and nonzero")
        object.__setattr__(self, "q", q / n)

    def __setattr__(self, name, value):
        raise AttributeError("Rotation3 is immutable")

    def __repr__(self):
        w, x, y, z = self.q
        return f"Rotation3([{w:.6f}, {x:.6f}, {y:.6f}, {z:.6f}])"

    @classmethod
    def identity(cls) -> "Rotation3":
        return cls(np.array([1.0, 0.0, 0.0, 0.0]))

    @classmethod
    def from_axis_angle(cls, axis, angle: float) -> "Rotation3":
        axis = np.asarray(axis, dtype=float)
        n = np.linalg.norm(axis)
        if n == 0.0:
            raise ValueError("axis must be nonzero")
        half = 0.5 * float(angle)
        return cls(np.concatenate(([math.cos(half)], math.sin(half) * axis / n)))

    @classmethod
    def from_matrix(cls, m) -> "Rotation3":
        """Quaternion extraction choosing the numerically largest component."""
        m = np.asarray(m, dtype=float)
        tr = m[0, 0] + m[1, 1] + m[2, 2]
        if tr > 0.0:
            s = math.sqrt(tr + 1.0) * 2.0
            q = np.array(
                [0.25 * s, (m[2, 1] - m[1, 2]) / s, (m[0, 2] - m[2, 0]) / s, (m[1, 0] - m[0, 1]) / s]
            )
        elif m[0, 0] >= m[1, 1] and m[0, 0] >= m[2, 2]:
            s = math.sqrt(1.0 + m[0, 0] - m[1, 1] - m[2, 2]) * 2.0
            q = np.array(
                [(m[2, 1] - m[1, 2]) / s, 0.25 * s, (m[0, 1] + m[1, 0]) / s, (m[0, 2] + m[2, 0]) / s]
            )
        elif m[1, 1] >= m[2, 2]:
            s = math.sqrt(1.0 + m[1, 1] - m[0, 0] - m[2, 2]) * 2.0
            q = np.array(
                [(m[0, 2] - m[2, 0]) / s, (m[0, 1] + m[1, 0]) / s, 0.25 * s, (m[1, 2] + m[2, 1]) / s]
            )
        else:
            s = math.sqrt(1.0 + m[2, 2] - m[0, 0] - m[1, 1]) * 2.0
            q = np.array(
                [(m[1, 0] - m[0, 1]) / s, (m[0, 2] + m[2, 0]) / s, (m[1, 2] + m[2, 1]) / s, 0.25 * s]
            )
        return cls(q)

    def matrix(self) -> np.ndarray:
        w, x, y, z = self.q
        return np.array(
            [
                [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
                [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
                [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
            ]
        )

    def compose(self, other: "Rotation3") -> "Rotation3":
        """Rotation equal to applying ``other`` first, then ``self``."""
        return Rotation3(_quat_mul(self.q, other.q))

    def __matmul__(self, other: "Rotation3") -> "Rotation3":
        return self.compose(other)

    def inverse(self) -> "Rotation3":
        w, x, y, z = self.q
        return Rotation3(np.array([w, -x, -y, -z]))

    def apply(self, vecs) -> np.ndarray:
        """Rotate one 3-vector or an (N, 3) array of vectors."""
        vecs = np.asarray(vecs, dtype=float)
        return vecs @ self.matrix().T

    def angle_to(self, other: "Rotation3") -> float:
        """Geodesic distance (rotation angle in [0, pi]) to ``other``."""
        d = abs(float(self.q @ other.q))
        return 2.0 * math.acos(min(1.0, d))


@dataclass(frozen=True)
class TangentSO3:
    """Tangent vector of SO(3): axis-angle rate k, with Rdot = R @ skew(k)."""

    k: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "k", np.asarray(self.k, dtype=float).reshape(3))

    def norm(self) -> float:
        return float(np.linalg.norm(self.k))


def so3_exp(k) -> Rotation3:
    """Exponential map so(3) -> SO(3), k an axis-angle rate 3-vector."""
    k = np.asarray(getattr(k, "k", k), dtype=float)
    theta = float(np.linalg.norm(k))
    half = 0.5 * theta
    if theta < _SMALL_ANGLE:
        # cos(h) ~ 1 - h^2/2, sin(h)/theta ~ (1 - h^2/6) / 2
        w = 1.0 - half * half / 2.0
        s = 0.5 * (1.0 - half * half / 3.0)
    else:
        w = math.cos(half)
        s = math.sin(half) / theta
    return Rotation3(np.concatenate(([w], s * k)))


def so3_log(r: Rotation3) -> np.ndarray:
    """Logarithm map SO(3) -> so(3) with ||log|| <= pi.

    For half-turns (rotation by exactly pi) the axis sign is ambiguous; the
    sign is fixed deterministically so that the first nonzero axis component
    is positive.
    """
    w, x, y, z = r.q
    if w < 0.0:
        w, x, y, z = -w, -x, -y, -z
    v = np.array([x, y, z])
    s = float(np.linalg.norm(v))
    if s < _SMALL_ANGLE:
        # theta/sin(theta/2) ~ 2 + s^2/3 for small s = sin(theta/2)
        return v * (2.0 + s * s / 3.0)
    theta = 2.0 * math.atan2(s, w)
    if w <= _SMALL_ANGLE:
        # Half-turn: fix the axis sign deterministically.
        for c in v:
            if c != 0.0:
                if c < 0.0:
                    v = -v
                break
    return v * (theta / s)


def slerp_so3(r0: Rotation3, r1: Rotation3, t: float) -> Rotation3:
    """Geodesic point r0 * exp(t * log(r0^-1 r1)), shortest-path convention."""
    q1 = r1.q if float(r0.q @ r1.q) >= 0.0 else -r1.q
    rel = Rotation3(_quat_mul(r0.inverse().q, q1))
    return r0.compose(so3_exp(float(t) * so3_log(rel)))


def geodesic_velocity_so3(r0: Rotation3, r1: Rotation3) -> TangentSO3:
    """Constant body-frame velocity of the SLERP geodesic from r0 to r1.

    Returns k with Rdot(t) = R(t) @ skew(k) for all t along the geodesic,
    ||k|| <= pi.
    """
    q1 = r1.q if float(r0.q @ r1.q) >= 0.0 else -r1.q
    rel = Rotation3(_quat_mul(r0.inverse().q, q1))
    return TangentSO3(so3_log(rel))


def wrap_angle(theta: float, period: float) -> float:
    """Wrap an angle to the representative interval (-period/2, period/2]."""
    if period <= 0.0:
        raise ValueError("period must be positive")
    w = math.fmod(float(theta), period)
    if w > period / 2.0:
        w -= period
    elif w <= -period / 2.0:
        w += period
    return w


@dataclass(frozen=True)
class Torsion:
    """Torsion angle with period p, stored wrapped to (-p/2, p/2]."""

    theta: float
    period: float = TWO_PI

    def __post_init__(self):
        if self.period <= 0.0:
            raise ValueError("period must be positive")
        object.__setattr__(self, "theta", wrap_angle(self.theta, self.period))


def torsion_delta(t0: Torsion, t1: Torsion) -> float:
    """Shortest signed angular difference theta1 - theta0, in (-p/2, p/2]."""
    if not math.isclose(t0.period, t1.period, rel_tol=0.0, abs_tol=1e-12):
        raise ValueError(f"mismatched torsion periods: {t0.period} vs {t1.period}")
    return wrap_angle(t1.theta - t0.theta, t0.period)


def slerp_torsion(t0: Torsion, t1: Torsion, t: float) -> Torsion:
    """Interpolate along the shortest arc: theta(t) = wrap(theta0 + t * delta)."""
    d = torsion_delta(t0, t1)
    return Torsion(t0.theta + float(t) * d, t0.period)


def canonical_norm(x) -> float:
    """Norm induced by the canonical metric tr(X^T Y) on tangent elements.

    TangentSO3 k -> sqrt(2) * ||k||; an SO(2) delta (plain float) ->
    sqrt(2) * |delta|; an R^3 translation vector -> Euclidean norm.
    """
    if isinstance(x, TangentSO3):
        return math.sqrt(2.0) * x.norm()
    if isinstance(x, (float, int)):
        return math.sqrt(2.0) * abs(float(x))
    x = np.asarray(x, dtype=float)
    if x.shape == (3,):
        return float(np.linalg.norm(x))
    raise TypeError(f"unsupported tangent element of type {type(x).__name__}")


def sample_rotation_uniform(rng: np.random.Generator) -> Rotation3:
    """Haar-uniform rotation (normalized 4D Gaussian quaternion)."""
    q = rng.standard_normal(4)
    while float(q @ q) < 1e-12:
        q = rng.standard_normal(4)
    return Rotation3(q)


def sample_rotation_gaussian(center: Rotation3, sigma: float, rng: np.random.Generator) -> Rotation3:
    """Tangent-space Gaussian: center * exp(k), k ~ N(0, sigma^2 I)."""
    if sigma < 0.0:
        raise ValueError("sigma must be nonnegative")
    k = sigma * rng.standard_normal(3)
    return center.compose(so3_exp(k))


def sample_torsion_uniform(period: float, rng: np.random.Generator) -> Torsion:
    """Uniform draw from (-p/2, p/2]."""
    return Torsion(rng.uniform(-period / 2.0, period / 2.0), period)


def sample_torsion_gaussian(center: Torsion, sigma: float, rng: np.random.Generator) -> Torsion:
    if sigma < 0.0:
        raise ValueError("sigma must be nonnegative")
    return Torsion(center.theta + sigma * rng.standard_normal(), center.period)


def fit_rotation(moved: np.ndarray, target: np.ndarray) -> np.ndarray:
    """Least-squares rotation matrix R minimizing ||R @ moved_i - target_i||.

    Kabsch via SVD with a proper-rotation (det = +1) correction.  Inputs are
    (N, 3) point sets already centered by the caller.
    """
    h = np.asarray(moved, dtype=float).T @ np.asarray(target, dtype=float)
    u, _, vt = np.linalg.svd(h)
    d = np.sign(np.linalg.det(vt.T @ u.T))
    s = np.diag([1.0, 1.0, d])
    return vt.T @ s @ u.T
