"""Linearized LiDAR point-to-plane and visual reprojection systems, reduced to
information form.

Both systems follow the same convention: residual = measured - predicted, and
the Jacobian is the derivative of the predicted measurement with respect to the
right-perturbation error state, so that residual ~= J @ delta + noise.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import List, Sequence

import numpy as np

from lib.errors import BehindCamera, ConfigError
from lib.state import ROT, TRANS, Pose, check_symmetric, is_psd, sym_eigen

logger = logging.getLogger(__name__)

UNIT_TOL = 1e-9
MIN_DEPTH = 1e-3


def _vector(value, size: int, name: str) -> np.ndarray:
    arr = np.array(value, dtype=float).reshape(-1)
    if arr.shape != (size,):
        raise ConfigError(f"{name} must have {size} components, got {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ConfigError(f"{name} contains non-finite values")
    return arr


@dataclass(frozen=True, eq=False)
class PointPlaneFactor:
    point_body: np.ndarray
    plane_normal: np.ndarray
    plane_offset: float
    noise_sigma: float

    def __post_init__(self):
        normal = _vector(self.plane_normal, 3, "plane_normal")
        if abs(np.linalg.norm(normal) - 1.0) > UNIT_TOL:
            raise ConfigError("plane_normal must be unit length")
        if not self.noise_sigma > 0:
            raise ConfigError("noise_sigma must be positive")
        object.__setattr__(self, "point_body", _vector(self.point_body, 3, "point_body"))
        object.__setattr__(self, "plane_normal", normal)
        object.__setattr__(self, "plane_offset", float(self.plane_offset))
        object.__setattr__(self, "noise_sigma", float(self.noise_sigma))


@dataclass(frozen=True, eq=False)
class VisualFactor:
    landmark_world: np.ndarray
    pixel_obs: np.ndarray
    noise_sigma: float

    def __post_init__(self):
        if not self.noise_sigma > 0:
            raise ConfigError("noise_sigma must be positive")
        object.__setattr__(self, "landmark_world", _vector(self.landmark_world, 3, "landmark_world"))
        object.__setattr__(self, "pixel_obs", _vector(self.pixel_obs, 2, "pixel_obs"))
        object.__setattr__(self, "noise_sigma", float(self.noise_sigma))


def _check_rows(jacobian, residual, variances, name: str, allow_empty: bool):
    jacobian = np.array(jacobian, dtype=float).reshape(-1, 6)
    residual = np.array(residual, dtype=float).reshape(-1)
    variances = np.array(variances, dtype=float).reshape(-1)
    rows = jacobian.shape[0]
    if residual.shape[0] != rows or variances.shape[0] != rows:
        raise ConfigError(f"{name}: Jacobian, residual and variance row counts differ")
    if rows == 0 and not allow_empty:
        raise ConfigError(f"{name} needs at least one row")
    if np.any(variances <= 0):
        raise ConfigError(f"{name}: noise variances must be positive")
    for arr in (jacobian, residual, variances):
        arr.flags.writeable = False
    return jacobian, residual, variances


@dataclass(frozen=True, eq=False)
class LidarBatch:
    H: np.ndarray
    z: np.ndarray
    R_diag: np.ndarray

    def __post_init__(self):
        H, z, R = _check_rows(self.H, self.z, self.R_diag, "LidarBatch", allow_empty=False)
        object.__setattr__(self, "H", H)
        object.__setattr__(self, "z", z)
        object.__setattr__(self, "R_diag", R)

    def __len__(self):
        return self.H.shape[0]


@dataclass(frozen=True, eq=False)
class VisualBatch:
    J: np.ndarray
    b: np.ndarray
    Q_diag: np.ndarray

    def __post_init__(self):
        J, b, Q = _check_rows(self.J, self.b, self.Q_diag, "VisualBatch", allow_empty=True)
        object.__setattr__(self, "J", J)
        object.__setattr__(self, "b", b)
        object.__setattr__(self, "Q_diag", Q)

    def __len__(self):
        return self.J.shape[0]


@dataclass(frozen=True, eq=False)
class InfoForm:
    """Reduced measurement system info @ delta = vec."""
    info: np.ndarray
    vec: np.ndarray

    def __post_init__(self):
        info = check_symmetric(self.info)
        if info.shape != (6, 6):
            raise ConfigError(f"InfoForm.info must be 6x6, got {info.shape}")
        if not is_psd(info):
            raise ConfigError("InfoForm.info must be positive semidefinite")
        vec = _vector(self.vec, 6, "InfoForm.vec")
        info.flags.writeable = False
        vec.flags.writeable = False
        object.__setattr__(self, "info", info)
        object.__setattr__(self, "vec", vec)

    @classmethod
    def zeros(cls) -> InfoForm:
        return cls(np.zeros((6, 6)), np.zeros(6))

    def __add__(self, other: InfoForm) -> InfoForm:
        return InfoForm(self.info + other.info, self.vec + other.vec)

    @property
    def rr(self) -> np.ndarray:
        return self.info[ROT, ROT]

    @property
    def tt(self) -> np.ndarray:
        return self.info[TRANS, TRANS]


def linearize_point_plane(factors: Sequence[PointPlaneFactor], lin_pose: Pose) -> LidarBatch:
    points = np.array([f.point_body for f in factors], dtype=float).reshape(-1, 3)
    normals = np.array([f.plane_normal for f in factors], dtype=float).reshape(-1, 3)
    offsets = np.array([f.plane_offset for f in factors], dtype=float)
    sigmas = np.array([f.noise_sigma for f in factors], dtype=float)

    normals_body = normals @ lin_pose.rotation  # rows are R^T n
    # n^T (-R [p]x) == p x (R^T n)
    rot_block = np.cross(points, normals_body)
    predicted = np.einsum("ij,ij->i", normals, lin_pose.transform(points))
    H = np.hstack([rot_block, normals])
    return LidarBatch(H, offsets - predicted, sigmas ** 2)


def _camera_points(factors: Sequence[VisualFactor], lin_pose: Pose) -> np.ndarray:
    landmarks = np.array([f.landmark_world for f in factors], dtype=float).reshape(-1, 3)
    return lin_pose.to_body(landmarks)


def linearize_visual(factors: Sequence[VisualFactor], lin_pose: Pose) -> VisualBatch:
    if not factors:
        return VisualBatch(np.zeros((0, 6)), np.zeros(0), np.zeros(0))
    cam = _camera_points(factors, lin_pose)
    behind = np.flatnonzero(cam[:, 2] <= MIN_DEPTH)
    if behind.size:
        raise BehindCamera(behind.tolist())

    x, y, z = cam[:, 0], cam[:, 1], cam[:, 2]
    inv_z = 1.0 / z
    n = len(factors)
    # projection Jacobian d(u, v)/d(p_cam), one 2x3 block per landmark
    proj = np.zeros((n, 2, 3))
    proj[:, 0, 0] = inv_z
    proj[:, 0, 2] = -x * inv_z ** 2
    proj[:, 1, 1] = inv_z
    proj[:, 1, 2] = -y * inv_z ** 2

    # d p_cam / d rot = [p_cam]x, d p_cam / d trans = -R^T
    cam_skew = np.zeros((n, 3, 3))
    cam_skew[:, 0, 1], cam_skew[:, 0, 2] = -z, y
    cam_skew[:, 1, 0], cam_skew[:, 1, 2] = z, -x
    cam_skew[:, 2, 0], cam_skew[:, 2, 1] = -y, x
    jac_rot = proj @ cam_skew
    jac_trans = proj @ (-lin_pose.rotation.T)

    J = np.concatenate([jac_rot, jac_trans], axis=2).reshape(2 * n, 6)
    predicted = np.column_stack([x * inv_z, y * inv_z])
    observed = np.array([f.pixel_obs for f in factors], dtype=float)
    sigmas = np.repeat([f.noise_sigma for f in factors], 2)
    return VisualBatch(J, (observed - predicted).reshape(-1), sigmas ** 2)


def linearize_visual_robust(factors: Sequence[VisualFactor], lin_pose: Pose) -> VisualBatch:
    """linearize_visual that drops landmarks behind the camera instead of failing."""
    try:
        return linearize_visual(factors, lin_pose)
    except BehindCamera as e:
        logger.warning("Dropping %d visual factor(s) behind the camera", len(e.indices))
        dropped = set(e.indices)
        kept: List[VisualFactor] = [f for i, f in enumerate(factors) if i not in dropped]
        return linearize_visual(kept, lin_pose)


def _reduce(jacobian: np.ndarray, residual: np.ndarray, variances: np.ndarray) -> InfoForm:
    weights = 1.0 / variances
    weighted = jacobian * weights[:, None]
    info = jacobian.T @ weighted
    return InfoForm(0.5 * (info + info.T), weighted.T @ residual)


def reduce_lidar(batch: LidarBatch) -> InfoForm:
    return _reduce(batch.H, batch.z, batch.R_diag)


def reduce_visual(batch: VisualBatch) -> InfoForm:
    if len(batch) == 0:
        return InfoForm.zeros()
    return _reduce(batch.J, batch.b, batch.Q_diag)


def pseudo_batch(form: InfoForm) -> LidarBatch:
    """A LidarBatch with the same information matrix as `form` (rows sqrt(lambda) v).

    Only the information matrix is reproduced; the residual is solved so that the
    batch's information vector matches too whenever the form is full rank.
    """
    values, vectors = sym_eigen(form.info)
    keep = values > 0
    if not np.any(keep):
        return LidarBatch(np.zeros((1, 6)), np.zeros(1), np.ones(1))
    rows = (vectors[:, keep] * np.sqrt(values[keep])).T
    residual = (vectors[:, keep].T @ form.vec) / np.sqrt(values[keep])
    return LidarBatch(rows, residual, np.ones(rows.shape[0]))
