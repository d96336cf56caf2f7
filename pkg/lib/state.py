"""Manifold state, error-state conventions and the small symmetric linear algebra
used by every other module.

Error states are 6-vectors ordered rotation first: components 0..2 are an
axis-angle rotation perturbation (rad) applied on the right, components 3..5 a
world-frame translation perturbation (m).
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.linalg import cho_factor, cho_solve
from scipy.spatial.transform import Rotation

from lib.errors import AngleOverflow, ConfigError, NearSingular, NotSymmetric

ROT = slice(0, 3)
TRANS = slice(3, 6)

ORTHO_TOL = 1e-9
SYM_TOL = 1e-9
SINGULAR_RATIO = 1e-12
ANGLE_MARGIN = 1e-6

ErrorState = np.ndarray


def skew(v) -> np.ndarray:
    """3x3 cross-product matrix, skew(a) @ b == a x b."""
    x, y, z = v
    return np.array([
        [0.0, -z, y],
        [z, 0.0, -x],
        [-y, x, 0.0],
    ])


def so3_exp(phi) -> np.ndarray:
    return Rotation.from_rotvec(np.asarray(phi, dtype=float)).as_matrix()


def so3_log(rotation: np.ndarray) -> np.ndarray:
    return Rotation.from_matrix(rotation).as_rotvec()


def rotation_angle(rotation: np.ndarray) -> float:
    cos_angle = (np.trace(rotation) - 1.0) / 2.0
    return math.acos(min(1.0, max(-1.0, cos_angle)))


@dataclass(frozen=True, eq=False)
class Pose:
    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        rotation = np.array(self.rotation, dtype=float)
        translation = np.array(self.translation, dtype=float).reshape(-1)
        if rotation.shape != (3, 3) or translation.shape != (3,):
            raise ConfigError("Pose needs a 3x3 rotation and a 3-vector translation")
        if not (np.all(np.isfinite(rotation)) and np.all(np.isfinite(translation))):
            raise ConfigError("Pose contains non-finite values")
        if np.max(np.abs(rotation.T @ rotation - np.eye(3))) > ORTHO_TOL:
            raise ConfigError("Pose rotation is not orthonormal")
        if abs(np.linalg.det(rotation) - 1.0) > ORTHO_TOL:
            raise ConfigError("Pose rotation is not proper (det != +1)")
        rotation.flags.writeable = False
        translation.flags.writeable = False
        object.__setattr__(self, "rotation", rotation)
        object.__setattr__(self, "translation", translation)

    @classmethod
    def identity(cls) -> Pose:
        return cls(np.eye(3), np.zeros(3))

    @classmethod
    def from_rotvec(cls, rotvec, translation=(0.0, 0.0, 0.0)) -> Pose:
        return cls(so3_exp(rotvec), translation)

    @classmethod
    def look_at(cls, position, target, up=(0.0, 0.0, 1.0)) -> Pose:
        """Sensor pose at `position` whose optical axis (body +z) points at `target`.

        Body +x points right and body +y down, the usual camera convention.
        """
        position = np.asarray(position, dtype=float)
        z_axis = np.asarray(target, dtype=float) - position
        norm = np.linalg.norm(z_axis)
        if norm < 1e-12:
            raise ConfigError("look_at target coincides with position")
        z_axis /= norm
        x_axis = np.cross(z_axis, np.asarray(up, dtype=float))
        if np.linalg.norm(x_axis) < 1e-9:
            raise ConfigError("look_at direction is parallel to the up vector")
        x_axis /= np.linalg.norm(x_axis)
        y_axis = np.cross(z_axis, x_axis)
        return cls(np.column_stack([x_axis, y_axis, z_axis]), position)

    def transform(self, points: np.ndarray) -> np.ndarray:
        """Body-frame points (N x 3 or 3) to world frame."""
        return np.asarray(points) @ self.rotation.T + self.translation

    def to_body(self, points: np.ndarray) -> np.ndarray:
        """World-frame points (N x 3 or 3) to body frame."""
        return (np.asarray(points) - self.translation) @ self.rotation

    def as_matrix(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self.rotation
        m[:3, 3] = self.translation
        return m

    def __repr__(self):
        rotvec = np.round(so3_log(self.rotation), 6).tolist()
        return f"Pose(rotvec={rotvec}, translation={np.round(self.translation, 6).tolist()})"


def boxplus(x: Pose, d) -> Pose:
    d = np.asarray(d, dtype=float).reshape(6)
    if not np.all(np.isfinite(d)):
        raise ConfigError("Error state contains non-finite values")
    if not np.any(d):
        return x
    # re-orthonormalize
    rotation = Rotation.from_matrix(x.rotation @ so3_exp(d[ROT])).as_matrix()
    return Pose(rotation, x.translation + d[TRANS])


def boxminus(a: Pose, b: Pose) -> ErrorState:
    relative = b.rotation.T @ a.rotation
    angle = rotation_angle(relative)
    if angle >= math.pi - ANGLE_MARGIN:
        raise AngleOverflow(angle)
    return np.concatenate([so3_log(relative), a.translation - b.translation])


def symmetry_error(m: np.ndarray) -> float:
    return float(np.max(np.abs(m - m.T))) if m.size else 0.0


def check_symmetric(m, tol: float = SYM_TOL) -> np.ndarray:
    """Return the symmetrized float copy of `m`, or raise NotSymmetric.

    The tolerance is relative to the largest entry once that exceeds one, so
    information matrices with large entries are judged on their own scale.
    """
    m = np.asarray(m, dtype=float)
    if m.ndim != 2 or m.shape[0] != m.shape[1]:
        raise ConfigError(f"Expected a square matrix, got shape {m.shape}")
    scale = max(1.0, float(np.max(np.abs(m)))) if m.size else 1.0
    asymmetry = symmetry_error(m)
    if asymmetry > tol * scale:
        raise NotSymmetric(asymmetry)
    return 0.5 * (m + m.T)


def _canonical_signs(vectors: np.ndarray) -> np.ndarray:
    """Flip each column so its first non-negligible component is positive."""
    vectors = vectors.copy()
    for k in range(vectors.shape[1]):
        column = vectors[:, k]
        nonzero = np.flatnonzero(np.abs(column) > 1e-12)
        if nonzero.size and column[nonzero[0]] < 0:
            vectors[:, k] = -column
    return vectors


def sym_eigen(m) -> tuple[np.ndarray, np.ndarray]:
    """Eigenvalues (descending) and orthonormal eigenvector columns of a symmetric matrix."""
    m = check_symmetric(m)
    if m.shape not in ((3, 3), (6, 6)):
        raise ConfigError(f"sym_eigen supports 3x3 and 6x6 matrices, got {m.shape}")
    values, vectors = np.linalg.eigh(m)
    order = np.argsort(-values, kind="stable")
    return values[order], _canonical_signs(vectors[:, order])


def invert_spd(m) -> np.ndarray:
    m = check_symmetric(m)
    values = np.linalg.eigvalsh(m)
    lam_min, lam_max = float(values[0]), float(values[-1])
    if lam_max <= 0.0 or lam_min <= SINGULAR_RATIO * lam_max:
        raise NearSingular(lam_min, lam_max)
    inverse = cho_solve(cho_factor(m), np.eye(m.shape[0]))
    return 0.5 * (inverse + inverse.T)


def is_psd(m, rel_tol: float = SYM_TOL) -> bool:
    m = np.asarray(m, dtype=float)
    values = np.linalg.eigvalsh(0.5 * (m + m.T))
    return bool(values[0] >= -rel_tol * abs(values[-1]))
