"""Rigid transforms and the SE(3) exponential/logarithm.

Tangent vectors are ordered rotation-first: xi = [delta; rho] with delta the
so(3) part (radians) and rho the translation part (meters). exp and log use
the closed Rodrigues forms with series fallbacks near zero angle, and log
refuses angles within 1e-6 of pi where the axis is not recoverable to useful
precision.
"""

from __future__ import annotations

import dataclasses
import math

import numpy as np

from .errors import AngleNearPi

_TINY_ANGLE = 1e-8
_SERIES_ANGLE = 1e-3
_MAX_LOG_ANGLE = math.pi - 1e-6

DEFAULT_ROTATION_STD = 0.02  # rad, per tangent axis
DEFAULT_TRANSLATION_STD = 0.05  # m, per tangent axis


def hat3(v) -> np.ndarray:
    """Skew-symmetric matrix of a 3-vector: hat3(v) @ u == cross(v, u)."""
    a, b, c = np.asarray(v, dtype=float)
    return np.array([[0.0, -c, b], [c, 0.0, -a], [-b, a, 0.0]])


def hat6(xi) -> np.ndarray:
    """4x4 twist matrix of a tangent vector [delta; rho]."""
    xi = np.asarray(xi, dtype=float)
    if xi.shape != (6,):
        raise ValueError(f"expected a 6-vector, got shape {xi.shape}")
    out = np.zeros((4, 4))
    out[:3, :3] = hat3(xi[:3])
    out[:3, 3] = xi[3:]
    return out


def _rotation_coefficients(theta: float) -> tuple[float, float, float]:
    """(a, b, c) with R = I + a*K + b*K^2 and V = I + b*K + c*K^2, K = hat3(delta).

    b uses 1 - cos(theta) = 2 sin^2(theta/2): the direct difference loses
    ~eps/theta^2 relative accuracy, which the b*K term of V turns into an
    absolute translation error growing like 1/theta as the angle shrinks.
    """
    if theta < _TINY_ANGLE:
        return 1.0, 0.5, 1.0 / 6.0
    tt = theta * theta
    half_sin = math.sin(0.5 * theta)
    a = math.sin(theta) / theta
    b = 2.0 * half_sin * half_sin / tt
    c = (theta - math.sin(theta)) / (tt * theta)
    return a, b, c


def exp_so3(delta) -> np.ndarray:
    delta = np.asarray(delta, dtype=float)
    theta = float(np.linalg.norm(delta))
    a, b, _ = _rotation_coefficients(theta)
    k = hat3(delta)
    return np.eye(3) + a * k + b * (k @ k)


def log_so3(rotation) -> np.ndarray:
    """Rotation vector of an orthonormal matrix; raises AngleNearPi past pi - 1e-6.

    The angle comes from atan2 of the off-diagonal sine vector against the
    trace cosine, which stays accurate where acos of the trace alone loses
    digits (angles approaching pi).
    """
    rotation = np.asarray(rotation, dtype=float)
    w = 0.5 * np.array(
        [
            rotation[2, 1] - rotation[1, 2],
            rotation[0, 2] - rotation[2, 0],
            rotation[1, 0] - rotation[0, 1],
        ]
    )
    sin_theta = float(np.linalg.norm(w))  # = sin(theta) for theta in [0, pi]
    cos_theta = float(np.clip((np.trace(rotation) - 1.0) / 2.0, -1.0, 1.0))
    theta = math.atan2(sin_theta, cos_theta)
    if theta > _MAX_LOG_ANGLE:
        raise AngleNearPi(f"rotation angle {theta:.9f} rad is within 1e-6 of pi")
    if theta < _TINY_ANGLE:
        return w  # theta/sin(theta) -> 1
    return (theta / sin_theta) * w


def _left_jacobian_inverse(delta: np.ndarray) -> np.ndarray:
    theta = float(np.linalg.norm(delta))
    k = hat3(delta)
    if theta < _SERIES_ANGLE:
        tt = theta * theta
        e = 1.0 / 12.0 + tt / 720.0 + tt * tt / 30240.0
    else:
        half = 0.5 * theta
        # 1 - cos(theta) written as 2 sin^2(theta/2) to dodge cancellation
        e = (1.0 - half * math.cos(half) / math.sin(half)) / (theta * theta)
    return np.eye(3) - 0.5 * k + e * (k @ k)


@dataclasses.dataclass(frozen=True)
class RigidTransform:
    """SE(3) element with a 3x3 rotation and a 3-vector translation.

    Instances are immutable; the arrays are copied and marked read-only on
    construction, so sharing a transform between threads is safe.
    """

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        rotation = np.array(self.rotation, dtype=float)
        translation = np.array(self.translation, dtype=float).reshape(3)
        if rotation.shape != (3, 3):
            raise ValueError(f"rotation must be 3x3, got {rotation.shape}")
        if not np.all(np.isfinite(rotation)) or not np.all(np.isfinite(translation)):
            raise ValueError("transform entries must be finite")
        err = np.abs(rotation @ rotation.T - np.eye(3)).max()
        if err > 1e-9:
            raise ValueError(f"rotation is not orthonormal (|R R^T - I| = {err:.3e})")
        det = np.linalg.det(rotation)
        if abs(det - 1.0) > 1e-9:
            raise ValueError(f"rotation determinant {det:.12f} != 1")
        rotation.setflags(write=False)
        translation.setflags(write=False)
        object.__setattr__(self, "rotation", rotation)
        object.__setattr__(self, "translation", translation)

    @classmethod
    def identity(cls) -> "RigidTransform":
        return cls(np.eye(3), np.zeros(3))

    @classmethod
    def from_matrix(cls, matrix) -> "RigidTransform":
        matrix = np.asarray(matrix, dtype=float)
        if matrix.shape != (4, 4):
            raise ValueError(f"expected a 4x4 matrix, got {matrix.shape}")
        if np.abs(matrix[3] - np.array([0.0, 0.0, 0.0, 1.0])).max() > 1e-9:
            raise ValueError("last row must be [0, 0, 0, 1]")
        return cls(matrix[:3, :3], matrix[:3, 3])

    def as_matrix(self) -> np.ndarray:
        out = np.eye(4)
        out[:3, :3] = self.rotation
        out[:3, 3] = self.translation
        return out

    def compose(self, other: "RigidTransform") -> "RigidTransform":
        """self then applied after other: (self @ other)(p) = self(other(p))."""
        return RigidTransform(
            self.rotation @ other.rotation,
            self.rotation @ other.translation + self.translation,
        )

    def inverse(self) -> "RigidTransform":
        rt = self.rotation.T
        return RigidTransform(rt, -rt @ self.translation)

    def apply(self, points) -> np.ndarray:
        """Transform an (n, 3) array of points (or a single 3-vector)."""
        points = np.asarray(points, dtype=float)
        return points @ self.rotation.T + self.translation

    def rotation_angle(self) -> float:
        cos_theta = np.clip((np.trace(self.rotation) - 1.0) / 2.0, -1.0, 1.0)
        return float(math.acos(cos_theta))


@dataclasses.dataclass(frozen=True)
class TangentVector:
    """se(3) tangent coordinates, rotation part first."""

    delta: np.ndarray  # (3,) rad
    rho: np.ndarray  # (3,) m

    def __post_init__(self):
        delta = np.array(self.delta, dtype=float).reshape(3)
        rho = np.array(self.rho, dtype=float).reshape(3)
        if not (np.all(np.isfinite(delta)) and np.all(np.isfinite(rho))):
            raise ValueError("tangent entries must be finite")
        delta.setflags(write=False)
        rho.setflags(write=False)
        object.__setattr__(self, "delta", delta)
        object.__setattr__(self, "rho", rho)

    @classmethod
    def from_vector(cls, xi) -> "TangentVector":
        xi = np.asarray(xi, dtype=float).reshape(6)
        return cls(xi[:3], xi[3:])

    @property
    def vector(self) -> np.ndarray:
        return np.concatenate([self.delta, self.rho])

    def norm(self) -> float:
        return float(np.linalg.norm(self.vector))


def exp_se3(xi) -> RigidTransform:
    """Exponential map; accepts a TangentVector or a 6-vector."""
    if isinstance(xi, TangentVector):
        xi = xi.vector
    xi = np.asarray(xi, dtype=float).reshape(6)
    delta, rho = xi[:3], xi[3:]
    theta = float(np.linalg.norm(delta))
    a, b, c = _rotation_coefficients(theta)
    k = hat3(delta)
    k2 = k @ k
    rotation = np.eye(3) + a * k + b * k2
    v = np.eye(3) + b * k + c * k2
    return RigidTransform(rotation, v @ rho)


def log_se3(transform: RigidTransform) -> TangentVector:
    """Logarithm map, inverse of exp_se3 away from angle pi."""
    delta = log_so3(transform.rotation)
    rho = _left_jacobian_inverse(delta) @ transform.translation
    return TangentVector(delta, rho)


@dataclasses.dataclass(frozen=True)
class PoseCovariance:
    """Symmetric positive-semidefinite 6x6 covariance over tangent coordinates."""

    matrix: np.ndarray

    def __post_init__(self):
        matrix = np.array(self.matrix, dtype=float)
        if matrix.shape != (6, 6):
            raise ValueError(f"covariance must be 6x6, got {matrix.shape}")
        if not np.all(np.isfinite(matrix)):
            raise ValueError("covariance entries must be finite")
        if np.abs(matrix - matrix.T).max() > 1e-12:
            raise ValueError("covariance must be symmetric")
        eigenvalues = np.linalg.eigvalsh(matrix)
        if eigenvalues.min() < -1e-10:
            raise ValueError(f"covariance has negative eigenvalue {eigenvalues.min():.3e}")
        matrix.setflags(write=False)
        object.__setattr__(self, "matrix", matrix)

    @classmethod
    def diagonal(cls, rotation_std: float, translation_std: float) -> "PoseCovariance":
        return cls(np.diag([rotation_std**2] * 3 + [translation_std**2] * 3))

    def scaled(self, scale: float) -> "PoseCovariance":
        if scale < 0:
            raise ValueError("scale must be nonnegative")
        return PoseCovariance(scale * self.matrix)


def default_pose_covariance() -> PoseCovariance:
    """Base covariance for initial-pose perturbations: 0.02 rad / 0.05 m per axis."""
    return PoseCovariance.diagonal(DEFAULT_ROTATION_STD, DEFAULT_TRANSLATION_STD)


def _covariance_factor(matrix: np.ndarray) -> np.ndarray:
    """Lower-triangular-ish factor F with F F^T = matrix; tolerates semidefiniteness."""
    try:
        return np.linalg.cholesky(matrix)
    except np.linalg.LinAlgError:
        eigenvalues, eigenvectors = np.linalg.eigh(matrix)
        return eigenvectors * np.sqrt(np.clip(eigenvalues, 0.0, None))


def sample_pose_perturbation(
    base: RigidTransform,
    covariance: PoseCovariance,
    scale: float,
    rng: np.random.Generator,
) -> RigidTransform:
    """Draw base @ exp(xi) with xi ~ N(0, scale * covariance).

    Zero covariance (or zero scale) returns a transform exactly equal to
    base. With a singular covariance the Cholesky factor is replaced by an
    eigendecomposition square root.
    """
    if scale < 0:
        raise ValueError("scale must be nonnegative")
    factor = _covariance_factor(scale * covariance.matrix)
    xi = factor @ rng.standard_normal(6)
    return base.compose(exp_se3(xi))


def pose_error(a: RigidTransform, b: RigidTransform) -> float:
    """Norm of log(a^-1 b): combined rad + m distance between two poses."""
    return log_se3(a.inverse().compose(b)).norm()
