"""Error-state Kalman filter with LiDAR-first sequential updates and
degeneracy-gated visual fusion."""
from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field
from enum import Enum
from typing import Callable, Optional, Union

import numpy as np
from scipy.linalg import block_diag

from lib.degeneracy import (
    DEFAULT_CONTRIB_FLOOR,
    DEFAULT_KAPPA_MAX,
    DEFAULT_THRESHOLDS,
    DegeneracyReport,
    DetectorMethod,
    Thresholds,
    detect,
)
from lib.errors import ConfigError, NearSingular, PriorSingular
from lib.measurements import InfoForm, LidarBatch
from lib.selection import SelectedVisual, build_basis, build_selection, select_visual
from lib.state import ROT, Pose, boxplus, check_symmetric, invert_spd, is_psd, so3_exp

logger = logging.getLogger(__name__)

VisualSource = Union[InfoForm, Callable[[Pose], InfoForm], None]


@dataclass(frozen=True, eq=False)
class BeliefState:
    x_hat: Pose
    P: np.ndarray

    def __post_init__(self):
        P = check_symmetric(self.P)
        if P.shape != (6, 6):
            raise ConfigError(f"Covariance must be 6x6, got {P.shape}")
        if not is_psd(P):
            raise ConfigError("Covariance must be positive semidefinite")
        P.flags.writeable = False
        object.__setattr__(self, "P", P)


@dataclass(frozen=True)
class FusionPolicyConfig:
    thresholds: Thresholds = DEFAULT_THRESHOLDS
    detector: DetectorMethod = DetectorMethod.COV_SCHUR
    enable_selective: bool = True
    kappa_max: float = DEFAULT_KAPPA_MAX
    contrib_floor: float = DEFAULT_CONTRIB_FLOOR
    min_eigenvalue: Optional[float] = None

    def __post_init__(self):
        object.__setattr__(self, "detector", DetectorMethod.parse(self.detector))
        if not self.kappa_max > 1:
            raise ConfigError("kappa_max must exceed 1")
        if self.contrib_floor < 0:
            raise ConfigError("contrib_floor must be non-negative")


class Branch(str, Enum):
    NO_VISUAL = "no-visual"
    CLEAN = "clean"
    SELECTIVE = "selective"
    ALL_IN = "all-in"


@dataclass(frozen=True)
class FrameStats:
    frame: int
    branch: Branch
    degenerate: bool
    visual_us: float
    posterior_trace: float
    notes: dict = field(default_factory=dict)


def _symmetrize(m: np.ndarray) -> np.ndarray:
    return 0.5 * (m + m.T)


def predict(belief: BeliefState, motion_delta, Q_process) -> BeliefState:
    motion_delta = np.asarray(motion_delta, dtype=float).reshape(6)
    Q_process = check_symmetric(Q_process)
    if not is_psd(Q_process):
        raise ConfigError("Process noise must be positive semidefinite")
    # right-perturbation transition; translation errors live in the world frame
    F = block_diag(so3_exp(-motion_delta[ROT]), np.eye(3))
    P = _symmetrize(F @ belief.P @ F.T + Q_process)
    return BeliefState(boxplus(belief.x_hat, motion_delta), P)


def _prior_information(P: np.ndarray) -> np.ndarray:
    try:
        return invert_spd(P)
    except NearSingular as e:
        raise PriorSingular(e.min_eigenvalue, e.max_eigenvalue) from e


def _information_update(belief: BeliefState, info: np.ndarray, vec: np.ndarray) -> BeliefState:
    A_inv = invert_spd(info + _prior_information(belief.P))
    delta = A_inv @ vec
    P = _symmetrize((np.eye(6) - A_inv @ info) @ belief.P)
    return BeliefState(boxplus(belief.x_hat, delta), P)


def update_standard(belief: BeliefState, M: InfoForm) -> BeliefState:
    return _information_update(belief, M.info, M.vec)


def update_selective(belief: BeliefState, sel: SelectedVisual) -> BeliefState:
    return _information_update(belief, sel.infoP, sel.vecP)


def run_detector(lidar: InfoForm, cfg: FusionPolicyConfig,
                 lidar_batch: Optional[LidarBatch] = None) -> DegeneracyReport:
    return detect(
        cfg.detector, lidar, cfg.thresholds,
        batch=lidar_batch,
        kappa_max=cfg.kappa_max,
        contrib_floor=cfg.contrib_floor,
        min_eigenvalue=cfg.min_eigenvalue,
    )


def fuse_frame(belief: BeliefState, lidar: InfoForm, visual: VisualSource, cfg: FusionPolicyConfig, *,
               lidar_batch: Optional[LidarBatch] = None, frame: int = 0,
               clock: Callable[[], int] = time.perf_counter_ns):
    """One frame of the fusion policy.

    The LiDAR update always runs and the detector always sees the LiDAR system
    of this frame alone. The visual path (evaluating `visual` when it is a
    callable of the post-LiDAR pose, selecting and updating) is timed with
    `clock` in nanoseconds and reported in microseconds.
    """
    posterior = update_standard(belief, lidar)
    report = run_detector(lidar, cfg, lidar_batch)
    notes = {}

    start = clock()
    if visual is None:
        branch = Branch.NO_VISUAL
    elif not cfg.enable_selective:
        branch = Branch.ALL_IN
        form = visual(posterior.x_hat) if callable(visual) else visual
        posterior = update_standard(posterior, form)
    elif report.is_degenerate:
        branch = Branch.SELECTIVE
        form = visual(posterior.x_hat) if callable(visual) else visual
        sel = select_visual(form, build_basis(report), build_selection(report))
        if sel.regularized:
            notes["regularized"] = True
        posterior = update_selective(posterior, sel)
    else:
        branch = Branch.CLEAN
    visual_us = (clock() - start) / 1000.0

    logger.debug("frame %d: %s, degenerate=%s, flags=%s", frame, branch.value,
                 report.is_degenerate, report.flags.astype(int).tolist())
    stats = FrameStats(
        frame=frame,
        branch=branch,
        degenerate=report.is_degenerate,
        visual_us=visual_us,
        posterior_trace=float(np.trace(posterior.P)),
        notes=notes,
    )
    return posterior, report, stats
