import math
import time

import numpy as np
import pytest
from scipy.linalg import block_diag

from conftest import block_diag_spd, random_rotation, random_spd
from lib.degeneracy import (
    DEFAULT_MIN_EIGENVALUE,
    DEFAULT_THRESHOLDS,
    DetectorMethod,
    Thresholds,
    detect,
    detect_block_hessian,
    detect_condition_number,
    detect_cov_schur,
    detect_min_eigenvalue,
    detect_normalized_hessian,
    report_to_ellipsoid,
)
from lib.errors import ConfigError
from lib.measurements import InfoForm, LidarBatch
from lib.records import report_from_record, report_to_record
from lib.state import invert_spd, sym_eigen

ONE = Thresholds(theta_r=1.0, theta_t=1.0)


def _form(info) -> InfoForm:
    return InfoForm(np.asarray(info, dtype=float), np.zeros(6))


def _angle_deg(a, b) -> float:
    return math.degrees(math.acos(min(1.0, abs(float(a @ b)) / (np.linalg.norm(a) * np.linalg.norm(b)))))


def test_thresholds_must_be_positive():
    with pytest.raises(ConfigError):
        Thresholds(theta_r=0.0, theta_t=1.0)
    assert DEFAULT_THRESHOLDS.theta_r == pytest.approx((2.0 * math.pi / 180.0) ** 2)
    assert DEFAULT_THRESHOLDS.theta_t == pytest.approx(0.01)


def test_schur_complement_identity(rng):
    start = time.perf_counter()
    for _ in range(1000):
        H = random_spd(rng)
        sigma = invert_spd(H)
        Hrr, Hrt, Htt = H[:3, :3], H[:3, 3:], H[3:, 3:]
        schur = np.linalg.inv(Hrr - Hrt @ np.linalg.inv(Htt) @ Hrt.T)
        assert np.linalg.norm(sigma[:3, :3] - schur) <= 1e-8 * np.linalg.norm(schur)
    assert time.perf_counter() - start < 5.0


def test_covariance_dominates_block_hessian_inverse(rng):
    violations = 0
    for _ in range(10000):
        H = random_spd(rng)
        cov = detect_cov_schur(_form(H), ONE)
        hess = detect_block_hessian(_form(H), ONE)
        # descending variances vs. descending reciprocal information
        violations += int(np.any(cov.trans_eigvals < np.sort(1.0 / hess.trans_eigvals)[::-1] * (1 - 1e-9)))
        violations += int(np.any(cov.rot_eigvals < np.sort(1.0 / hess.rot_eigvals)[::-1] * (1 - 1e-9)))
    assert violations == 0


def test_uncoupled_information_gives_equal_spectra(rng):
    for _ in range(100):
        H = block_diag_spd(rng)
        cov = detect_cov_schur(_form(H), ONE)
        hess = detect_block_hessian(_form(H), ONE)
        np.testing.assert_allclose(cov.trans_eigvals, np.sort(1.0 / hess.trans_eigvals)[::-1], rtol=1e-9)
        np.testing.assert_array_equal(np.sort(cov.flags[3:]), np.sort(hess.flags[3:]))
        np.testing.assert_array_equal(np.sort(cov.flags[:3]), np.sort(hess.flags[:3]))


def test_cov_schur_diagonal_example():
    rep = detect_cov_schur(_form(np.diag([100, 100, 100, 100, 100, 0.01])), ONE)
    np.testing.assert_allclose(rep.trans_eigvals, [100.0, 0.01, 0.01])
    np.testing.assert_array_equal(rep.trans_flags, [True, False, False])
    np.testing.assert_allclose(np.abs(rep.trans_eigvecs[:, 0]), [0.0, 0.0, 1.0], atol=1e-12)
    assert not rep.rot_flags.any()
    directions = rep.degenerate_directions()
    assert len(directions["translation"]) == 1 and not directions["rotation"]
    np.testing.assert_array_equal(rep.axis_flags(), [False] * 5 + [True])


def test_well_conditioned_information_has_no_flags():
    rep = detect_cov_schur(_form(1000 * np.eye(6)), ONE)
    assert not rep.is_degenerate


def test_cov_schur_near_singular_declares_total_degeneracy():
    rep = detect_cov_schur(_form(np.diag([1, 1, 1, 1, 1, 0.0])), ONE)
    assert rep.total
    assert rep.flags.all()
    np.testing.assert_allclose(rep.trans_eigvecs.T @ rep.trans_eigvecs, np.eye(3), atol=1e-9)
    assert detect_cov_schur(InfoForm.zeros(), ONE).flags.all()


def test_block_hessian_diagonal_example():
    H = np.diag([100, 100, 100, 100, 100, 0.01])
    rep = detect_block_hessian(_form(H), ONE)
    np.testing.assert_allclose(rep.trans_eigvals, [100.0, 100.0, 0.01])
    np.testing.assert_array_equal(rep.trans_flags, [False, False, True])
    cov = detect_cov_schur(_form(H), ONE)
    assert rep.is_degenerate == cov.is_degenerate
    np.testing.assert_array_equal(rep.axis_flags(), cov.axis_flags())


def test_coupling_rotates_principal_direction():
    # rotation about y absorbs most of the y-translation information
    Htt = np.diag([1.0, 1.5, 9.0])
    Hrr = np.eye(3) * 2.0
    Hrt = np.zeros((3, 3))
    Hrt[1, 1] = 1.3
    H = np.block([[Hrr, Hrt], [Hrt.T, Htt]])
    cov = detect_cov_schur(_form(H), ONE)
    hess = detect_block_hessian(_form(H), ONE)
    top_cov = cov.trans_eigvecs[:, 0]
    top_hess = hess.trans_eigvecs[:, -1]  # smallest information = largest H_tt^-1
    np.testing.assert_allclose(np.abs(top_hess), [1.0, 0.0, 0.0], atol=1e-12)
    assert _angle_deg(top_cov, top_hess) > 10.0


def test_condition_number_examples():
    H = np.diag([100, 100, 100, 100, 100, 0.01])
    rep = detect_condition_number(_form(H), kappa_max=1e3)
    assert rep.is_degenerate
    np.testing.assert_array_equal(rep.flags, [False, False, False, True, False, False])
    np.testing.assert_allclose(np.abs(rep.trans_eigvecs[:, 0]), [0.0, 0.0, 1.0], atol=1e-12)
    assert rep.notes["kappa"] == pytest.approx(1e4)
    assert not detect_condition_number(_form(np.eye(6)), kappa_max=1e3).is_degenerate


def test_condition_number_is_scale_invariant():
    H = np.diag([50.0, 50.0, 50.0, 50.0, 50.0, 0.5])
    small = detect_condition_number(_form(H), kappa_max=50.0)
    large = detect_condition_number(_form(10 * H), kappa_max=50.0)
    assert small.is_degenerate == large.is_degenerate
    th = Thresholds(theta_r=1.0, theta_t=1.5)
    assert detect_cov_schur(_form(H), th).is_degenerate != detect_cov_schur(_form(10 * H), th).is_degenerate


def test_condition_number_singular_information():
    rep = detect_condition_number(InfoForm.zeros(), kappa_max=1e4)
    assert rep.is_degenerate


def test_mixed_direction_reports_orthonormal_blocks(rng):
    for _ in range(20):
        rep = detect_condition_number(_form(random_spd(rng, min_eig=1e-3)), kappa_max=10.0)
        for vecs in (rep.rot_eigvecs, rep.trans_eigvecs):
            np.testing.assert_allclose(vecs.T @ vecs, np.eye(3), atol=1e-9)
        assert rep.flags.sum() <= 1


def test_min_eigenvalue_detector():
    H = np.diag([100, 100, 100, 100, 100, 0.01])
    rep = detect_min_eigenvalue(_form(H), floor=1.0)
    np.testing.assert_array_equal(rep.flags, [False, False, False, True, False, False])
    assert not detect_min_eigenvalue(_form(np.eye(6) * 10), floor=1.0).is_degenerate
    via_dispatch = detect(DetectorMethod.MIN_EIGENVALUE, _form(H), Thresholds(1.0, 1.0))
    np.testing.assert_array_equal(via_dispatch.flags, rep.flags)

    # the default floor follows theta_t
    assert DEFAULT_MIN_EIGENVALUE == pytest.approx(100.0)
    soft = _form(np.diag([1e3, 1e3, 1e3, 1e3, 1e3, 50.0]))
    assert detect_min_eigenvalue(soft).is_degenerate
    assert detect(DetectorMethod.MIN_EIGENVALUE, soft, DEFAULT_THRESHOLDS).is_degenerate
    assert not detect(DetectorMethod.MIN_EIGENVALUE, soft, ONE).is_degenerate
    assert detect(DetectorMethod.MIN_EIGENVALUE, soft, ONE, min_eigenvalue=60.0).is_degenerate


def test_normalized_hessian_single_plane_rows():
    row = np.array([0.0, 0.0, 0.0, 0.0, 0.0, 1.0])
    batch = LidarBatch(np.tile(row, (50, 1)), np.zeros(50), np.full(50, 1e-4))
    rep = detect_normalized_hessian(batch, ONE, contrib_floor=0.1)
    assert rep.trans_flags.sum() == 2
    flagged = rep.trans_eigvecs[:, rep.trans_flags]
    np.testing.assert_allclose(flagged[2, :], 0.0, atol=1e-12)
    assert rep.rot_flags.all()


def test_normalized_hessian_ignores_negligible_rows(rng):
    strong = np.hstack([rng.normal(size=(10, 3)), rng.normal(size=(10, 3))])
    weak = rng.normal(size=(190, 6)) * 1e-9
    mixed = LidarBatch(np.vstack([strong, weak]), np.zeros(200), np.full(200, 0.01))
    alone = LidarBatch(strong, np.zeros(10), np.full(10, 0.01))
    th = Thresholds(theta_r=1.0 / 300.0, theta_t=1.0 / 300.0)
    np.testing.assert_array_equal(
        detect_normalized_hessian(mixed, th).flags, detect_normalized_hessian(alone, th).flags,
    )


def test_normalized_hessian_without_filter_matches_block_hessian(rng):
    H = rng.normal(size=(30, 6))
    rot = H[:, :3] / np.linalg.norm(H[:, :3], axis=1)[:, None]
    trans = H[:, 3:] / np.linalg.norm(H[:, 3:], axis=1)[:, None]
    R = np.full(30, 0.5)
    normalized = np.hstack([rot, trans])
    info = normalized.T @ (normalized / R[:, None])
    info[:3, 3:] = info[3:, :3] = 0.0
    th = Thresholds(theta_r=0.05, theta_t=0.05)
    rep = detect_normalized_hessian(LidarBatch(H, np.zeros(30), R), th, contrib_floor=0.0)
    ref = detect_block_hessian(_form(info), th)
    np.testing.assert_allclose(rep.trans_eigvals, ref.trans_eigvals, rtol=1e-9)
    np.testing.assert_allclose(rep.rot_eigvals, ref.rot_eigvals, rtol=1e-9)
    np.testing.assert_array_equal(rep.flags, ref.flags)


def test_normalized_hessian_empty_after_filter():
    batch = LidarBatch(np.zeros((3, 6)), np.zeros(3), np.ones(3))
    rep = detect_normalized_hessian(batch, ONE)
    assert rep.total and rep.flags.all()


def test_rotation_equivariance(rng):
    O = random_rotation(rng)
    big = block_diag(O, O)
    H = random_spd(rng, min_eig=0.01, max_eig=100.0)
    rotated = big @ H @ big.T
    for method in DetectorMethod:
        a = detect(method, _form(H), ONE, kappa_max=10.0)
        b = detect(method, _form(rotated), ONE, kappa_max=10.0)
        np.testing.assert_allclose(a.trans_eigvals, b.trans_eigvals, rtol=1e-6, atol=1e-9)
        np.testing.assert_array_equal(a.flags, b.flags)
        if method in (DetectorMethod.COV_SCHUR, DetectorMethod.BLOCK_HESSIAN):
            for i in range(3):
                assert _angle_deg(O @ a.trans_eigvecs[:, i], b.trans_eigvecs[:, i]) < 1e-4


def test_raising_thresholds_only_clears_flags(rng):
    for _ in range(200):
        H = random_spd(rng, min_eig=0.01, max_eig=1000.0)
        low = detect_cov_schur(_form(H), Thresholds(0.01, 0.01))
        high = detect_cov_schur(_form(H), Thresholds(0.1, 0.1))
        assert not np.any(high.flags & ~low.flags)


def test_ellipsoid_radii_are_square_roots():
    rep = detect_cov_schur(_form(np.diag([1, 1, 1, 1 / 4, 1, 4])), ONE)
    ell = report_to_ellipsoid(rep, [1.0, 2.0, 3.0])
    np.testing.assert_allclose(ell.radii, [2.0, 1.0, 0.5])
    np.testing.assert_allclose(ell.center, [1.0, 2.0, 3.0])


def test_isotropic_covariance_gives_sphere():
    ell = report_to_ellipsoid(detect_cov_schur(_form(4 * np.eye(6)), ONE), np.zeros(3))
    np.testing.assert_allclose(ell.radii, [0.5, 0.5, 0.5])


def test_hessian_ellipsoid_is_reciprocated_and_capped():
    rep = detect_block_hessian(_form(np.diag([1, 1, 1, 4, 1e-6, 0.25])), ONE)
    ell = report_to_ellipsoid(rep, np.zeros(3), radius_cap=10.0)
    np.testing.assert_allclose(ell.radii, [10.0, 2.0, 0.5])


def test_covariance_ellipsoid_contains_hessian_ellipsoid(rng):
    for _ in range(20):
        H = random_spd(rng)
        cov = report_to_ellipsoid(detect_cov_schur(_form(H), ONE), np.zeros(3), radius_cap=1e6)
        hess = report_to_ellipsoid(detect_block_hessian(_form(H), ONE), np.zeros(3), radius_cap=1e6)
        directions = rng.normal(size=(100, 3))
        for u in directions / np.linalg.norm(directions, axis=1)[:, None]:
            assert cov.support(u) >= hess.support(u) * (1 - 1e-9)


def test_report_record_round_trip(rng):
    rep = detect_cov_schur(_form(random_spd(rng)), Thresholds(0.05, 0.05))
    again = report_from_record(report_to_record(3, rep))
    np.testing.assert_array_equal(again.flags, rep.flags)
    np.testing.assert_allclose(again.trans_eigvecs, rep.trans_eigvecs)
    np.testing.assert_allclose(again.rot_eigvals, rep.rot_eigvals)
    assert again.method is DetectorMethod.COV_SCHUR


def test_unknown_detector_name():
    with pytest.raises(ConfigError):
        DetectorMethod.parse("Lion")
    assert DetectorMethod.parse("covschur") is DetectorMethod.COV_SCHUR
    assert sym_eigen(np.eye(3))[0].tolist() == [1.0, 1.0, 1.0]
