"""Shared builders and oracles for the test suite."""

import itertools

import numpy as np

from metapose.geometry import WeakCamera, stage1_init
from metapose.mixtures import MixtureSet
from metapose.neuro import TrainingItem
from metapose.objective import (BonePrior, Objective, Skeleton, SolutionState,
                                TeacherLossConfig, bone_lengths_normalized)

TERMS = ("reprojection", "ba", "bone", "teacher")


def term_combinations():
    for r in range(1, len(TERMS) + 1):
        yield from itertools.combinations(TERMS, r)


def random_problem(rng, C=3, J=5, M=2):
    """A random state with random targets for every loss term."""
    def state():
        pose = rng.normal(0.0, 0.3, size=(J, 3))
        cams = [WeakCamera.identity()] + [
            WeakCamera(rng.normal(size=6), rng.uniform(0.3, 0.7, 2), rng.normal(0, 0.2))
            for _ in range(C - 1)]
        return SolutionState(pose, cams, 0)

    s = state()
    ref = state()
    skeleton = Skeleton([(a, a + 1) for a in range(J - 1)])
    prior = BonePrior(bone_lengths_normalized(rng.normal(size=(J, 3)), skeleton), 0.7)
    w = rng.dirichlet(np.ones(M), size=(C, J))
    mixtures = MixtureSet(w, s.keypoints()[:, :, None, :] + rng.normal(0, 0.1, (C, J, M, 2)),
                          rng.uniform(0.05, 0.2, (C, J, M)))
    keypoints = s.keypoints() + rng.normal(0, 0.05, (C, J, 2))
    teacher = TeacherLossConfig(ref, *rng.uniform(0.2, 2.0, 4))
    full = Objective(mixtures=mixtures, keypoints=keypoints, prior=prior, skeleton=skeleton,
                     teacher=teacher)
    return s, full


def max_fd_relative_error(objective, state, h=1e-5):
    """Largest per-coordinate relative gap between analytic and central-difference gradients."""
    x = state.to_vector()
    _, g = objective.value_and_grad(state)
    fd = np.empty_like(x)
    for i in range(x.size):
        e = np.zeros_like(x)
        e[i] = h
        fd[i] = (objective.value(state.with_vector(x + e)) -
                 objective.value(state.with_vector(x - e))) / (2 * h)
    denom = np.maximum(np.maximum(np.abs(g), np.abs(fd)), 1e-6)
    return float(np.max(np.abs(g - fd) / denom))


def s1_state(scene, reference=None):
    ref = scene.reference if reference is None else reference
    pose, cams = stage1_init(list(scene.monocular), reference=ref)
    return SolutionState(pose, cams, ref)


def s1_items(scenes):
    return [TrainingItem(s1_state(sc), sc.mixtures, sc.gt_pose, sc.keypoints, sc.bone_prior,
                         sc.skeleton) for sc in scenes]
