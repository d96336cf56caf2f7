import numpy as np
import pytest
from scipy.spatial.transform import Rotation

from conftest import random_pose, random_rotation, random_spd
from lib.degeneracy import DegeneracyReport, DetectorMethod
from lib.errors import ConfigError, PriorSingular
from lib.kalman import (
    BeliefState,
    Branch,
    FusionPolicyConfig,
    fuse_frame,
    predict,
    update_selective,
    update_standard,
)
from lib.measurements import InfoForm
from lib.selection import build_basis, select_visual
from lib.state import Pose, boxplus, so3_exp

# LiDAR system that is strong everywhere except translation z
WEAK_Z = InfoForm(np.diag([1e4, 1e4, 1e4, 1e4, 1e4, 1.0]), np.zeros(6))
STRONG = InfoForm(1e4 * np.eye(6), np.zeros(6))


def _belief(P, pose=None):
    return BeliefState(Pose.identity() if pose is None else pose, P)


def _fake_clock(*ticks):
    values = iter(ticks)
    return lambda: next(values)


def test_predict_translation_only_adds_process_noise():
    belief = _belief(np.diag([1e-3, 2e-3, 3e-3, 0.1, 0.2, 0.3]))
    Q = 1e-4 * np.eye(6)
    out = predict(belief, [0.0, 0.0, 0.0, 1.0, 2.0, 3.0], Q)
    np.testing.assert_allclose(out.P, belief.P + Q, atol=1e-15)
    np.testing.assert_allclose(out.x_hat.translation, [1.0, 2.0, 3.0])


def test_predict_zero_motion_keeps_mean(rng):
    pose = random_pose(rng)
    out = predict(_belief(np.eye(6), pose), np.zeros(6), np.zeros((6, 6)))
    assert out.x_hat is pose
    np.testing.assert_allclose(out.P, np.eye(6))


def test_predict_rotation_conjugates_rotation_block():
    P = np.diag([1e-2, 4e-2, 9e-2, 1.0, 1.0, 1.0])
    out = predict(_belief(P), [0.0, 0.0, np.pi / 2, 0.0, 0.0, 0.0], np.zeros((6, 6)))
    np.testing.assert_allclose(np.diag(out.P)[:3], [4e-2, 1e-2, 9e-2], atol=1e-12)
    np.testing.assert_allclose(out.P[3:, 3:], np.eye(3), atol=1e-15)


def test_predict_rejects_indefinite_process_noise():
    with pytest.raises(ConfigError):
        predict(_belief(np.eye(6)), np.zeros(6), -np.eye(6))


def test_predict_matches_sampled_propagation(rng):
    P = random_spd(rng, min_eig=1e-6, max_eig=1e-4)
    u = np.array([0.4, -0.7, 1.1, 0.5, 0.0, -0.2])
    out = predict(_belief(P), u, np.zeros((6, 6)))

    samples = rng.multivariate_normal(np.zeros(6), P, size=100_000)
    step = Rotation.from_rotvec(u[:3])
    # error of the propagated true state relative to the propagated estimate
    rot_err = (step.inv() * Rotation.from_rotvec(samples[:, :3]) * step).as_rotvec()
    errors = np.hstack([rot_err, samples[:, 3:]])
    empirical = np.cov(errors, rowvar=False)

    scale = np.sqrt(np.outer(np.diag(out.P), np.diag(out.P)))
    assert np.all(np.abs(empirical - out.P) <= 0.05 * scale)


def test_update_halves_unit_covariance():
    v = np.array([0.1, -0.2, 0.3, 1.0, 2.0, -3.0])
    out = update_standard(_belief(np.eye(6)), InfoForm(np.eye(6), v))
    np.testing.assert_allclose(out.P, 0.5 * np.eye(6), atol=1e-12)
    np.testing.assert_allclose(out.x_hat.rotation, so3_exp(v[:3] / 2), atol=1e-12)
    np.testing.assert_allclose(out.x_hat.translation, v[3:] / 2, atol=1e-12)


def test_information_update_matches_gain_form(rng):
    for _ in range(100):
        P = random_spd(rng, min_eig=0.01, max_eig=1.0)
        J = rng.normal(size=(12, 6))
        Q = rng.uniform(0.1, 2.0, 12)
        b = rng.normal(size=12)
        form = InfoForm(J.T @ np.diag(1 / Q) @ J, J.T @ (b / Q))

        K = P @ J.T @ np.linalg.inv(J @ P @ J.T + np.diag(Q))
        delta = K @ b
        P_gain = (np.eye(6) - K @ J) @ P

        out = update_standard(_belief(P), form)
        np.testing.assert_allclose(out.P, 0.5 * (P_gain + P_gain.T), atol=1e-8)
        np.testing.assert_allclose(out.x_hat.translation, delta[3:], atol=1e-8)
        np.testing.assert_allclose(out.x_hat.rotation, so3_exp(delta[:3]), atol=1e-8)


def test_full_selection_equals_standard_update(rng):
    for _ in range(20):
        belief = _belief(random_spd(rng, min_eig=0.01, max_eig=1.0), random_pose(rng))
        form = InfoForm(random_spd(rng), rng.normal(size=6))
        V = build_basis(_report_with_basis(rng))
        sel = select_visual(form, V, np.eye(6))
        a, b = update_selective(belief, sel), update_standard(belief, form)
        np.testing.assert_allclose(a.P, b.P, atol=1e-8)
        np.testing.assert_allclose(a.x_hat.rotation, b.x_hat.rotation, atol=1e-8)
        np.testing.assert_allclose(a.x_hat.translation, b.x_hat.translation, atol=1e-8)


def test_empty_selection_leaves_belief_unchanged(rng):
    belief = _belief(random_spd(rng, min_eig=0.01, max_eig=1.0), random_pose(rng))
    form = InfoForm(random_spd(rng), rng.normal(size=6))
    out = update_selective(belief, select_visual(form, np.eye(6), np.zeros((6, 6))))
    assert out.x_hat is belief.x_hat
    np.testing.assert_allclose(out.P, belief.P, atol=1e-12)


def _report_with_basis(rng):
    return DegeneracyReport(
        rot_eigvals=np.ones(3), rot_eigvecs=random_rotation(rng),
        trans_eigvals=np.ones(3), trans_eigvecs=random_rotation(rng),
        rot_flags=(0, 0, 0), trans_flags=(0, 0, 0),
        method=DetectorMethod.COV_SCHUR,
    )


def test_selective_fusion_touches_only_the_degenerate_axis(rng):
    belief = _belief(np.diag([1e-3, 2e-3, 3e-3, 0.5, 0.6, 0.7]))
    visual = InfoForm(random_spd(rng, min_eig=1.0, max_eig=50.0), rng.normal(size=6))
    lidar_only = update_standard(belief, WEAK_Z)

    out, report, stats = fuse_frame(belief, WEAK_Z, visual, FusionPolicyConfig())

    assert stats.branch is Branch.SELECTIVE
    assert report.flags.astype(int).tolist() == [0, 0, 0, 1, 0, 0]
    np.testing.assert_allclose(out.x_hat.rotation, lidar_only.x_hat.rotation, atol=1e-10)
    np.testing.assert_allclose(out.x_hat.translation[:2], lidar_only.x_hat.translation[:2], atol=1e-10)
    changed = np.zeros((6, 6), dtype=bool)
    changed[5, 5] = True
    np.testing.assert_allclose(out.P[~changed], lidar_only.P[~changed], atol=1e-10)
    assert out.P[5, 5] < lidar_only.P[5, 5]
    assert abs(out.x_hat.translation[2] - lidar_only.x_hat.translation[2]) > 1e-6


def test_fuse_frame_branches(rng):
    belief = _belief(0.01 * np.eye(6))
    visual = InfoForm(random_spd(rng), rng.normal(size=6))

    _, _, stats = fuse_frame(belief, WEAK_Z, None, FusionPolicyConfig())
    assert stats.branch is Branch.NO_VISUAL
    assert stats.degenerate

    out, _, stats = fuse_frame(belief, STRONG, visual, FusionPolicyConfig())
    assert stats.branch is Branch.CLEAN
    assert not stats.degenerate
    np.testing.assert_allclose(out.P, update_standard(belief, STRONG).P)

    out, _, stats = fuse_frame(belief, STRONG, visual, FusionPolicyConfig(enable_selective=False))
    assert stats.branch is Branch.ALL_IN
    expected = update_standard(update_standard(belief, STRONG), visual)
    np.testing.assert_allclose(out.P, expected.P, atol=1e-12)
    assert stats.posterior_trace == pytest.approx(np.trace(expected.P))


def test_fuse_frame_evaluates_visual_at_post_lidar_pose(rng):
    belief = _belief(0.01 * np.eye(6))
    lidar = InfoForm(WEAK_Z.info, np.array([0.0, 0.0, 0.0, 10.0, 0.0, 0.0]))
    seen = []

    def visual(pose):
        seen.append(pose)
        return InfoForm(np.eye(6), np.zeros(6))

    fuse_frame(belief, lidar, visual, FusionPolicyConfig(), clock=_fake_clock(0, 5000))
    np.testing.assert_allclose(seen[0].translation, update_standard(belief, lidar).x_hat.translation)

    _, _, stats = fuse_frame(belief, STRONG, visual, FusionPolicyConfig(), clock=_fake_clock(1000, 3500))
    assert len(seen) == 1
    assert stats.visual_us == pytest.approx(2.5)


def test_fuse_frame_accepts_every_detector(rng):
    visual = InfoForm(random_spd(rng), rng.normal(size=6))
    for method in DetectorMethod:
        _, report, stats = fuse_frame(_belief(0.01 * np.eye(6)), WEAK_Z, visual,
                                      FusionPolicyConfig(detector=method))
        assert report.method is method
        assert stats.branch in (Branch.CLEAN, Branch.SELECTIVE)


@pytest.mark.parametrize("lidar", [InfoForm.zeros(), InfoForm(1e-14 * np.eye(6), np.zeros(6))])
def test_blind_lidar_selects_everything_and_matches_all_in(rng, lidar):
    belief = _belief(0.01 * np.eye(6), random_pose(rng))
    visual = InfoForm(random_spd(rng), rng.normal(size=6))

    selective, report, stats = fuse_frame(belief, lidar, visual, FusionPolicyConfig())
    assert stats.branch is Branch.SELECTIVE
    assert report.flags.all()

    all_in, _, _ = fuse_frame(belief, lidar, visual, FusionPolicyConfig(enable_selective=False))
    np.testing.assert_allclose(selective.P, all_in.P, atol=1e-8)
    np.testing.assert_allclose(selective.x_hat.translation, all_in.x_hat.translation, atol=1e-8)
    np.testing.assert_allclose(selective.x_hat.rotation, all_in.x_hat.rotation, atol=1e-8)


def test_updates_never_remove_information(rng):
    for _ in range(50):
        belief = _belief(random_spd(rng, min_eig=0.01, max_eig=1.0))
        lidar = InfoForm(random_spd(rng, min_eig=0.01, max_eig=1e3), rng.normal(size=6))
        visual = InfoForm(random_spd(rng), rng.normal(size=6))
        for cfg in (FusionPolicyConfig(), FusionPolicyConfig(enable_selective=False)):
            out, _, _ = fuse_frame(belief, lidar, visual, cfg)
            assert np.linalg.eigvalsh(belief.P - out.P)[0] >= -1e-9


def test_selection_trace_lies_between_all_in_and_lidar_only(rng):
    for _ in range(50):
        belief = _belief(random_spd(rng, min_eig=0.01, max_eig=1.0))
        lidar = InfoForm(np.diag(rng.uniform(1.0, 1e4, 6)), rng.normal(size=6))
        # visual information without cross-talk between the axes the detector separates
        visual = InfoForm(np.diag(rng.uniform(1.0, 1e3, 6)), rng.normal(size=6))

        lidar_only, _, _ = fuse_frame(belief, lidar, None, FusionPolicyConfig())
        selective, _, _ = fuse_frame(belief, lidar, visual, FusionPolicyConfig())
        all_in, _, _ = fuse_frame(belief, lidar, visual, FusionPolicyConfig(enable_selective=False))
        assert np.trace(all_in.P) <= np.trace(selective.P) + 1e-9
        assert np.trace(selective.P) <= np.trace(lidar_only.P) + 1e-9


def test_singular_prior_is_rejected():
    belief = _belief(np.diag([1.0, 1.0, 1.0, 1.0, 1.0, 0.0]))
    with pytest.raises(PriorSingular):
        update_standard(belief, STRONG)


def test_belief_and_policy_validation():
    with pytest.raises(ConfigError):
        _belief(-np.eye(6))
    with pytest.raises(ConfigError):
        _belief(np.eye(3))
    with pytest.raises(ConfigError):
        FusionPolicyConfig(kappa_max=1.0)
    assert FusionPolicyConfig(detector="BlockHessian").detector is DetectorMethod.BLOCK_HESSIAN


def test_posterior_mean_is_boxplus_of_correction():
    pose = Pose.from_rotvec([0.0, 0.0, 0.3], [1.0, 2.0, 3.0])
    v = np.array([0.0, 0.0, 0.2, 0.0, 0.0, 0.4])
    out = update_standard(_belief(np.eye(6), pose), InfoForm(np.eye(6), v))
    expected = boxplus(pose, v / 2)
    np.testing.assert_allclose(out.x_hat.rotation, expected.rotation, atol=1e-12)
    np.testing.assert_allclose(out.x_hat.translation, expected.translation, atol=1e-12)
