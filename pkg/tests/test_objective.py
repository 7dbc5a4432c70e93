import zlib

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from conftest import random_rotation
from helpers import max_fd_relative_error, random_problem, term_combinations
from metapose.errors import DegeneratePose, NoActiveTerms, ShapeMismatch
from metapose.geometry import WeakCamera, matrix_to_rot6d
from metapose.mixtures import MixtureSet
from metapose.objective import (BonePrior, Objective, Skeleton, SolutionState,
                                TeacherLossConfig, TermWeights, ba_neg_log_likelihood,
                                bone_lengths_normalized, bone_loss, gradient, reprojection_loss,
                                teacher_loss, total_objective)
from metapose.scenegen import SceneConfig, generate


def single(mean, sigma=1.0):
    return MixtureSet(np.ones((1, 1, 1)), np.asarray(mean, float).reshape(1, 1, 1, 2),
                      np.full((1, 1, 1), sigma))


def chain(J):
    return Skeleton([(a, a + 1) for a in range(J - 1)])


def test_ba_single_joint_on_mean():
    s = SolutionState([[0.2, 0.3, 0.0]], [WeakCamera.identity()])
    assert abs(ba_neg_log_likelihood(s, single([0.2, 0.3])) - 1.837877) < 1e-6


def test_ba_translation_cancels(rng):
    s, obj = random_problem(rng)
    v = ba_neg_log_likelihood(s, obj.mixtures)
    shift = np.array([0.13, -0.4])
    moved = MixtureSet(obj.mixtures.weights, obj.mixtures.means + shift, obj.mixtures.sigmas)
    params = s.camera_params()
    params[:, 6:8] += shift
    s2 = SolutionState.from_arrays(s.pose, params, s.gauge)
    assert np.isclose(ba_neg_log_likelihood(s2, moved), v, rtol=1e-12)


def test_ba_decreases_along_shift_toward_mean():
    s = SolutionState([[0.0, 0.0, 0.0]], [WeakCamera([1, 0, 0, 0, 1, 0], [0.9, 0.5], 0.0)])
    g = single([0.5, 0.5], 0.1)
    vals = []
    for x in np.linspace(0.9, 0.5, 5):
        st_ = SolutionState(s.pose, [WeakCamera([1, 0, 0, 0, 1, 0], [x, 0.5], 0.0)])
        vals.append(ba_neg_log_likelihood(st_, g))
    assert np.all(np.diff(vals) < 0)


def test_ba_permutation_invariant(rng):
    s, obj = random_problem(rng, C=4)
    order = [2, 0, 3, 1]
    v = ba_neg_log_likelihood(s, obj.mixtures)
    assert np.isclose(ba_neg_log_likelihood(s.permuted(order), obj.mixtures.take_cameras(order)),
                      v, rtol=1e-12)


def test_reprojection_exact_zero(rng):
    s, _ = random_problem(rng)
    assert reprojection_loss(s, s.keypoints()) == 0.0


def test_reprojection_single_offset(rng):
    s, _ = random_problem(rng)
    k = s.keypoints()
    k[1, 2] += [0.1, 0.0]
    assert np.isclose(reprojection_loss(s, k), 0.01)


def test_reprojection_matches_naive_loop(rng):
    s, obj = random_problem(rng)
    K = obj.keypoints
    total = 0.0
    for c, cam in enumerate(s.cameras):
        for j, p in enumerate(s.pose):
            proj = cam.scale * (cam.rotation @ p)[:2] + cam.shift
            total += (proj[0] - K[c, j, 0]) ** 2 + (proj[1] - K[c, j, 1]) ** 2
    assert np.isclose(reprojection_loss(s, K), total, rtol=1e-12)


def test_reprojection_shape_mismatch(rng):
    s, _ = random_problem(rng)
    with pytest.raises(ShapeMismatch):
        reprojection_loss(s, np.zeros((1, 2, 2)))


def test_bone_lengths_examples():
    pose = np.array([[0, 0, 0], [1, 0, 0], [1, 1, 0]], float)
    assert np.allclose(bone_lengths_normalized(pose, chain(3)), [1, 1])
    pose = np.array([[0, 0, 0], [1, 0, 0], [1, 2, 0], [1, 2, 3]], float)
    assert np.allclose(bone_lengths_normalized(pose, chain(4)), [0.5, 1.0, 1.5])
    assert np.allclose(bone_lengths_normalized(7 * pose, chain(4)), [0.5, 1.0, 1.5])


def test_bone_lengths_degenerate():
    with pytest.raises(DegeneratePose):
        bone_lengths_normalized(np.zeros((3, 3)), chain(3))


def test_bone_loss_examples():
    pose = np.array([[0, 0, 0], [1, 0, 0], [1, 3, 0]], float)
    assert bone_loss(pose, BonePrior([0.5, 1.5]), chain(3)) == 0.0
    assert np.isclose(bone_loss(pose, BonePrior([1, 1]), chain(3)), 0.5)


@given(st.integers(0, 1000), st.floats(0.1, 10))
def test_bone_loss_similarity_invariant(seed, scale):
    rng = np.random.default_rng(seed)
    pose = rng.normal(size=(6, 3))
    prior = BonePrior(bone_lengths_normalized(rng.normal(size=(6, 3)), chain(6)))
    moved = scale * pose @ random_rotation(rng).T + rng.normal(size=3)
    assert np.isclose(bone_loss(moved, prior, chain(6)), bone_loss(pose, prior, chain(6)),
                      rtol=1e-9, atol=1e-12)


def test_skeleton_validation():
    with pytest.raises(ValueError):
        Skeleton([(0, 0)])
    with pytest.raises(ValueError):
        Skeleton([(0, 1)]).validate(3)
    with pytest.raises(ValueError):
        Skeleton([(0, 3)]).validate(3)
    Skeleton([(0, 1), (1, 2)]).validate(3)


def test_bone_prior_requires_unit_mean():
    with pytest.raises(ValueError):
        BonePrior([1.0, 2.0])


def test_teacher_examples(rng):
    s, _ = random_problem(rng)
    assert teacher_loss(s, TeacherLossConfig(s.copy(), 2, 3, 4, 5)) == 0.0
    other, _ = random_problem(rng)
    assert teacher_loss(s, TeacherLossConfig(other, 0, 0, 0, 0)) == 0.0


def test_teacher_half_turn_about_z():
    Rz = np.diag([-1.0, -1.0, 1.0])
    pose = np.zeros((3, 3))
    ref = SolutionState(pose, [WeakCamera.identity(), WeakCamera.identity()])
    s = SolutionState(pose, [WeakCamera.identity(), WeakCamera(matrix_to_rot6d(Rz), [0, 0], 0)])
    assert np.isclose(teacher_loss(s, TeacherLossConfig(ref, 0, 0, 1, 0)), 8.0)


def test_no_active_terms(rng):
    s, _ = random_problem(rng)
    with pytest.raises(NoActiveTerms):
        total_objective(s)


def test_single_term_equals_term(rng):
    s, obj = random_problem(rng)
    assert total_objective(s, keypoints=obj.keypoints) == reprojection_loss(s, obj.keypoints)
    assert total_objective(s, mixtures=obj.mixtures) == ba_neg_log_likelihood(s, obj.mixtures)
    # the bone term carries the prior's 1 / sigma_b^2 factor
    assert np.isclose(total_objective(s, prior=obj.prior, skeleton=obj.skeleton),
                      bone_loss(s.pose, obj.prior, obj.skeleton) / obj.prior.sigma_b**2,
                      rtol=1e-14)


def test_total_is_weighted_sum(rng):
    s, obj = random_problem(rng)
    w = TermWeights(reprojection=0.5, ba=2.0, bone=3.0, teacher=0.25)
    parts = {t: obj.only(t).value(s) for t in ("reprojection", "ba", "bone", "teacher")}
    expected = sum(getattr(w, t) * v for t, v in parts.items())
    weighted = Objective(obj.mixtures, obj.keypoints, obj.prior, obj.skeleton, obj.teacher, w)
    assert np.isclose(weighted.value(s), expected, rtol=1e-12)


def test_gradient_zero_at_reprojection_optimum(rng):
    s, _ = random_problem(rng)
    g = gradient(s, keypoints=s.keypoints())
    assert np.abs(g).max() < 1e-9


def test_gradient_excludes_gauge_camera(rng):
    s, obj = random_problem(rng, C=3, J=5)
    g = gradient(s, keypoints=obj.keypoints)
    assert g.shape == (3 * 5 + 9 * 2,)
    s2 = SolutionState(s.pose, s.cameras, gauge=1)
    assert s2.to_vector().shape == g.shape
    assert np.array_equal(s2.with_vector(s2.to_vector()).cameras[1].params, s.cameras[1].params)


@pytest.mark.parametrize("terms", list(term_combinations()), ids="+".join)
def test_gradient_matches_finite_differences(terms):
    rng = np.random.default_rng(zlib.crc32("+".join(terms).encode()))
    for _ in range(3):
        s, full = random_problem(rng)
        assert max_fd_relative_error(full.only(*terms), s) < 1e-4


def test_gradient_with_nonzero_gauge(rng):
    s, full = random_problem(rng, C=4)
    s = SolutionState(s.pose, s.cameras, gauge=2)
    assert max_fd_relative_error(full, s) < 1e-4


def test_scene_oracle_consistency():
    cfg = SceneConfig(num_joints=17, num_cameras=4)
    for i in range(50):
        sc = generate(cfg, i)
        gt = sc.gt_state()
        assert reprojection_loss(gt, sc.keypoints) < 1e-20
        base = ba_neg_log_likelihood(gt, sc.mixtures)
        rng = np.random.default_rng(i)
        j = rng.integers(sc.num_joints)
        moved = gt.copy()
        d = rng.normal(size=3)
        moved.pose[j] += 5 * cfg.sigma_h * d / np.linalg.norm(d)
        assert base <= ba_neg_log_likelihood(moved, sc.mixtures)
