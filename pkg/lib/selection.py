"""Selective fusion of the visual system along LiDAR-degenerate directions."""
from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
from scipy.linalg import block_diag

from lib.degeneracy import DegeneracyReport
from lib.errors import NearSingular, VisualInfoSingular
from lib.measurements import InfoForm
from lib.state import invert_spd

logger = logging.getLogger(__name__)

REGULARIZATION = 1e-9


@dataclass(frozen=True, eq=False)
class SelectedVisual:
    infoP: np.ndarray
    vecP: np.ndarray
    projector: np.ndarray
    regularized: bool = False


def build_basis(rep: DegeneracyReport) -> np.ndarray:
    """V = blockdiag(V_r, V_t)."""
    return block_diag(rep.rot_eigvecs, rep.trans_eigvecs)


def build_selection(rep: DegeneracyReport) -> np.ndarray:
    return np.diag(rep.flags.astype(float))


def _visual_inverse(info: np.ndarray) -> np.ndarray:
    try:
        return invert_spd(info)
    except NearSingular as e:
        raise VisualInfoSingular(str(e)) from e


def _regularized_inverse(info: np.ndarray) -> np.ndarray:
    trace = float(np.trace(info))
    inverse = np.linalg.inv(info + REGULARIZATION * max(trace, 1.0) / 6.0 * np.eye(6))
    return 0.5 * (inverse + inverse.T)


def select_visual(J_I: InfoForm, V: np.ndarray, S: np.ndarray) -> SelectedVisual:
    """Restrict the visual system to the selected eigen-directions.

    W = V S V^T is an orthogonal projector; the selected system is
    (W J W) x = W J W J^-1 b, which keeps the information symmetric and still
    holds at any exact solution of J x = b.
    """
    W = V @ S @ V.T
    W = 0.5 * (W + W.T)
    if not np.any(S):
        return SelectedVisual(np.zeros((6, 6)), np.zeros(6), W)
    regularized = False
    try:
        inverse = _visual_inverse(J_I.info)
    except VisualInfoSingular as e:
        logger.warning("Visual information not invertible (%s); using regularized inverse", e)
        inverse = _regularized_inverse(J_I.info)
        regularized = True
    infoP = W @ J_I.info @ W
    infoP = 0.5 * (infoP + infoP.T)
    vecP = infoP @ inverse @ J_I.vec
    return SelectedVisual(infoP, vecP, W, regularized)
