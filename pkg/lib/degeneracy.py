"""Degeneracy detection on the reduced LiDAR system.

Five detectors share one report shape: per-block (rotation, translation)
eigenvalues, eigenvector columns and flags. Covariance-flavoured reports hold
variances (rad^2, m^2) sorted descending, so the most degenerate direction comes
first; information-flavoured reports hold information (rad^-2, m^-2) sorted
descending, so the most degenerate direction comes last. Information methods
compare against the reciprocal thresholds 1/theta. The two full-spectrum
detectors (condition number, minimum eigenvalue) put their single mixed
direction in slot 0 of each block instead.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from enum import Enum
from typing import Optional

import numpy as np

from lib.errors import ConfigError, EmptyAfterFilter, NearSingular
from lib.measurements import InfoForm, LidarBatch, pseudo_batch
from lib.state import ROT, TRANS, invert_spd, sym_eigen

logger = logging.getLogger(__name__)

DEFAULT_KAPPA_MAX = 1e4
DEFAULT_CONTRIB_FLOOR = 0.1
DEFAULT_RADIUS_CAP = 10.0
PSEUDO_REG = 1e-12
NORMALIZE_EPS = 1e-6
TINY_EIGENVALUE = 1e-300

AXIS_NAMES = ("roll", "pitch", "yaw", "x", "y", "z")


class DetectorMethod(str, Enum):
    COV_SCHUR = "CovSchur"
    BLOCK_HESSIAN = "BlockHessian"
    CONDITION_NUMBER = "ConditionNumber"
    NORMALIZED_HESSIAN = "NormalizedHessian"
    MIN_EIGENVALUE = "MinEigenvalue"

    @classmethod
    def parse(cls, value) -> DetectorMethod:
        if isinstance(value, cls):
            return value
        for member in cls:
            if str(value).lower() in (member.value.lower(), member.name.lower()):
                return member
        raise ConfigError(f"Unknown detector '{value}'. Use one of: {', '.join(m.value for m in cls)}")


BASELINE_DETECTORS = (
    DetectorMethod.BLOCK_HESSIAN,
    DetectorMethod.CONDITION_NUMBER,
    DetectorMethod.NORMALIZED_HESSIAN,
)


@dataclass(frozen=True)
class Thresholds:
    theta_r: float  # rad^2
    theta_t: float  # m^2

    def __post_init__(self):
        if not (self.theta_r > 0 and self.theta_t > 0):
            raise ConfigError("Thresholds must be strictly positive")
        object.__setattr__(self, "theta_r", float(self.theta_r))
        object.__setattr__(self, "theta_t", float(self.theta_t))

    @property
    def min_eigenvalue(self) -> float:
        """Information floor matching the translational variance threshold."""
        return 1.0 / self.theta_t


DEFAULT_THRESHOLDS = Thresholds(theta_r=math.radians(2.0) ** 2, theta_t=0.1 ** 2)
DEFAULT_MIN_EIGENVALUE = DEFAULT_THRESHOLDS.min_eigenvalue


@dataclass(frozen=True, eq=False)
class DegeneracyReport:
    rot_eigvals: np.ndarray
    rot_eigvecs: np.ndarray
    trans_eigvals: np.ndarray
    trans_eigvecs: np.ndarray
    rot_flags: np.ndarray
    trans_flags: np.ndarray
    method: DetectorMethod
    covariance: bool = True
    total: bool = False
    notes: dict = field(default_factory=dict)

    def __post_init__(self):
        for name in ("rot_eigvals", "trans_eigvals"):
            object.__setattr__(self, name, np.asarray(getattr(self, name), dtype=float).reshape(3))
        for name in ("rot_eigvecs", "trans_eigvecs"):
            object.__setattr__(self, name, np.asarray(getattr(self, name), dtype=float).reshape(3, 3))
        for name in ("rot_flags", "trans_flags"):
            object.__setattr__(self, name, np.asarray(getattr(self, name), dtype=bool).reshape(3))

    @property
    def flags(self) -> np.ndarray:
        return np.concatenate([self.rot_flags, self.trans_flags])

    @property
    def is_degenerate(self) -> bool:
        return bool(np.any(self.flags))

    def degenerate_directions(self) -> dict:
        return {
            "rotation": [self.rot_eigvecs[:, i] for i in np.flatnonzero(self.rot_flags)],
            "translation": [self.trans_eigvecs[:, i] for i in np.flatnonzero(self.trans_flags)],
        }

    def axis_flags(self) -> np.ndarray:
        """Per-axis view (roll, pitch, yaw, x, y, z) of the flagged eigen-directions."""
        axes = np.zeros(6, dtype=bool)
        for offset, vecs, flags in ((0, self.rot_eigvecs, self.rot_flags), (3, self.trans_eigvecs, self.trans_flags)):
            for i in np.flatnonzero(flags):
                axes[offset + int(np.argmax(np.abs(vecs[:, i])))] = True
        return axes


@dataclass(frozen=True)
class Ellipsoid:
    center: np.ndarray
    axes: np.ndarray
    radii: np.ndarray

    def support(self, direction) -> float:
        """Support function h(u) = max over the ellipsoid of u . (x - center)."""
        u = np.asarray(direction, dtype=float)
        return float(np.linalg.norm(self.radii * (self.axes.T @ u)))


def _total_degeneracy(info: np.ndarray, method: DetectorMethod, err: NearSingular) -> DegeneracyReport:
    logger.warning("%s: LiDAR information near singular (%s); declaring total degeneracy", method.value, err)
    trace = float(np.trace(info))
    if trace > 0:
        regularized = info + PSEUDO_REG * trace / 6.0 * np.eye(6)
        sigma = np.linalg.inv(regularized)
        sigma = 0.5 * (sigma + sigma.T)
        rot_vals, rot_vecs = sym_eigen(sigma[ROT, ROT])
        trans_vals, trans_vecs = sym_eigen(sigma[TRANS, TRANS])
    else:
        rot_vals = trans_vals = np.full(3, math.inf)
        rot_vecs = trans_vecs = np.eye(3)
    return DegeneracyReport(
        rot_vals, rot_vecs, trans_vals, trans_vecs,
        np.ones(3, bool), np.ones(3, bool), method, covariance=True, total=True,
    )


def detect_cov_schur(H_I: InfoForm, th: Thresholds) -> DegeneracyReport:
    method = DetectorMethod.COV_SCHUR
    try:
        sigma = invert_spd(H_I.info)
    except NearSingular as e:
        return _total_degeneracy(H_I.info, method, e)
    # the diagonal blocks of the inverse are the Schur-complement inverses
    rot_vals, rot_vecs = sym_eigen(sigma[ROT, ROT])
    trans_vals, trans_vecs = sym_eigen(sigma[TRANS, TRANS])
    return DegeneracyReport(
        rot_vals, rot_vecs, trans_vals, trans_vecs,
        rot_vals > th.theta_r, trans_vals > th.theta_t, method,
    )


def _block_hessian_report(H: InfoForm, th: Thresholds, method: DetectorMethod) -> DegeneracyReport:
    rot_vals, rot_vecs = sym_eigen(H.rr)
    trans_vals, trans_vecs = sym_eigen(H.tt)
    return DegeneracyReport(
        rot_vals, rot_vecs, trans_vals, trans_vecs,
        rot_vals < 1.0 / th.theta_r, trans_vals < 1.0 / th.theta_t, method, covariance=False,
    )


def detect_block_hessian(H_I: InfoForm, th: Thresholds) -> DegeneracyReport:
    return _block_hessian_report(H_I, th, DetectorMethod.BLOCK_HESSIAN)


def _complete_basis(u: np.ndarray, block: np.ndarray) -> np.ndarray:
    """Orthonormal 3x3 basis whose first column is u; the other two columns are
    the principal directions of `block` restricted to the complement of u."""
    projector = np.eye(3) - np.outer(u, u)
    _, vecs = sym_eigen(projector @ block @ projector)
    alignment = np.abs(vecs.T @ u)
    # u itself is a null direction of the projected block; skip the column closest to it
    second = vecs[:, min(np.argsort(alignment, kind="stable")[:2])]
    second = second - (second @ u) * u
    second /= np.linalg.norm(second)
    return np.column_stack([u, second, np.cross(u, second)])


def _mixed_direction_report(H: InfoForm, direction: np.ndarray, degenerate: bool,
                            method: DetectorMethod, notes: dict) -> DegeneracyReport:
    """Split a mixed 6-vector into rotation/translation sub-blocks.

    Each sub-block is renormalized and becomes the first eigen-direction of its
    block; the flag goes to the sub-block with the larger norm. Eigenvalues are
    Rayleigh quotients of the information blocks along the reported directions.
    """
    blocks = []
    norms = []
    for sl, block in ((ROT, H.rr), (TRANS, H.tt)):
        part = direction[sl]
        norm = float(np.linalg.norm(part))
        norms.append(norm)
        if norm < 1e-12:
            _, vecs = sym_eigen(block)
            basis = vecs[:, ::-1].copy()
        else:
            basis = _complete_basis(part / norm, block)
        values = np.einsum("ij,ik,kj->j", basis, block, basis)
        blocks.append((values, basis))
    rot_flags = np.zeros(3, bool)
    trans_flags = np.zeros(3, bool)
    if degenerate:
        if norms[0] > norms[1]:
            rot_flags[0] = True
        else:
            trans_flags[0] = True
    (rot_vals, rot_vecs), (trans_vals, trans_vecs) = blocks
    return DegeneracyReport(
        rot_vals, rot_vecs, trans_vals, trans_vecs, rot_flags, trans_flags,
        method, covariance=False, notes=notes,
    )


def detect_condition_number(H_I: InfoForm, kappa_max: float = DEFAULT_KAPPA_MAX) -> DegeneracyReport:
    values, vectors = sym_eigen(H_I.info)
    lam_max, lam_min = float(values[0]), float(values[-1])
    if lam_max <= 0:
        kappa = math.inf
    else:
        kappa = lam_max / max(lam_min, TINY_EIGENVALUE)
    return _mixed_direction_report(
        H_I, vectors[:, -1], kappa > kappa_max, DetectorMethod.CONDITION_NUMBER, {"kappa": kappa},
    )


def detect_min_eigenvalue(H_I: InfoForm, floor: float = DEFAULT_MIN_EIGENVALUE) -> DegeneracyReport:
    values, vectors = sym_eigen(H_I.info)
    lam_min = float(values[-1])
    return _mixed_direction_report(
        H_I, vectors[:, -1], lam_min < floor, DetectorMethod.MIN_EIGENVALUE, {"lambda_min": lam_min},
    )


def _normalize_half(half: np.ndarray) -> np.ndarray:
    norms = np.linalg.norm(half, axis=1)
    scale = norms.max() if norms.size else 0.0
    keep = norms > NORMALIZE_EPS * scale if scale > 0 else np.zeros_like(norms, dtype=bool)
    out = np.zeros_like(half)
    out[keep] = half[keep] / norms[keep, None]
    return out


def _filtered_block(rows: np.ndarray, weights: np.ndarray, contrib_floor: float) -> np.ndarray:
    raw = rows.T @ (rows * weights[:, None])
    _, vecs = sym_eigen(0.5 * (raw + raw.T))
    contributions = rows @ vecs
    if contrib_floor > 0:
        contributions = np.where(np.abs(contributions) < contrib_floor, 0.0, contributions)
    filtered = contributions.T @ (contributions * weights[:, None])
    return vecs @ filtered @ vecs.T


def detect_normalized_hessian(batch: LidarBatch, th: Thresholds,
                              contrib_floor: float = DEFAULT_CONTRIB_FLOOR) -> DegeneracyReport:
    """Row-normalized, contribution-filtered block Hessian.

    Each Jacobian row keeps its noise weight, but its rotation and translation
    halves are scaled to unit length (halves that are numerically zero stay
    zero). Projections of a half onto the block's eigen-directions that fall
    below contrib_floor are discarded before the block information is rebuilt.
    """
    method = DetectorMethod.NORMALIZED_HESSIAN
    try:
        info = normalized_information(batch, contrib_floor)
    except EmptyAfterFilter as e:
        logger.warning("%s: %s; declaring total degeneracy", method.value, e)
        return DegeneracyReport(
            np.zeros(3), np.eye(3), np.zeros(3), np.eye(3),
            np.ones(3, bool), np.ones(3, bool), method, covariance=False, total=True,
        )
    return _block_hessian_report(InfoForm(info, np.zeros(6)), th, method)


def normalized_information(batch: LidarBatch, contrib_floor: float = DEFAULT_CONTRIB_FLOOR) -> np.ndarray:
    """Block-diagonal information rebuilt from normalized, filtered rows."""
    weights = 1.0 / batch.R_diag
    info = np.zeros((6, 6))
    info[ROT, ROT] = _filtered_block(_normalize_half(batch.H[:, ROT]), weights, contrib_floor)
    info[TRANS, TRANS] = _filtered_block(_normalize_half(batch.H[:, TRANS]), weights, contrib_floor)
    if not np.any(info):
        raise EmptyAfterFilter("no row contribution above the floor")
    return 0.5 * (info + info.T)


def detect(method, H_I: InfoForm, th: Thresholds, *, batch: Optional[LidarBatch] = None,
           kappa_max: float = DEFAULT_KAPPA_MAX, contrib_floor: float = DEFAULT_CONTRIB_FLOOR,
           min_eigenvalue: Optional[float] = None) -> DegeneracyReport:
    method = DetectorMethod.parse(method)
    if method is DetectorMethod.COV_SCHUR:
        return detect_cov_schur(H_I, th)
    if method is DetectorMethod.BLOCK_HESSIAN:
        return detect_block_hessian(H_I, th)
    if method is DetectorMethod.CONDITION_NUMBER:
        return detect_condition_number(H_I, kappa_max)
    if method is DetectorMethod.NORMALIZED_HESSIAN:
        return detect_normalized_hessian(batch if batch is not None else pseudo_batch(H_I), th, contrib_floor)
    return detect_min_eigenvalue(H_I, min_eigenvalue if min_eigenvalue is not None else th.min_eigenvalue)


def report_to_ellipsoid(rep: DegeneracyReport, center, radius_cap: float = DEFAULT_RADIUS_CAP) -> Ellipsoid:
    values = np.asarray(rep.trans_eigvals, dtype=float)
    axes = np.asarray(rep.trans_eigvecs, dtype=float)
    if not rep.covariance:
        with np.errstate(divide="ignore"):
            values = np.where(values > 0, 1.0 / np.where(values > 0, values, 1.0), math.inf)
    order = np.argsort(-values, kind="stable")
    values, axes = values[order], axes[:, order]
    radii = np.clip(np.sqrt(np.clip(values, 0.0, None)), 0.0, radius_cap)
    return Ellipsoid(np.asarray(center, dtype=float).reshape(3), axes, radii)
