"""Per-step network inputs and the additive state update."""

from __future__ import annotations

import numpy as np

from ..errors import ShapeMismatch
from ..geometry import rot6d_to_matrix
from ..objective import CAMERA_PARAMS, SolutionState

MIXTURE_FEATURES = 4


def row_width(num_joints, num_components):
    """Width of a per-camera row including the copied view-invariant block."""
    view = CAMERA_PARAMS + MIXTURE_FEATURES * num_components * num_joints + 2 * num_joints
    return view + 3 * num_joints + 1


def mixture_features(mixtures, projections):
    """``(C, J*M*4)`` rows of ``(w, mu - k, log sigma)``, heaviest component first.

    Means are taken relative to the joint's current projection ``k``.
    """
    C, J, M = mixtures.shape
    order = np.argsort(-mixtures.weights, axis=-1, kind="stable")
    w = np.take_along_axis(mixtures.weights, order, axis=-1)
    mu = np.take_along_axis(mixtures.means, order[..., None], axis=-2)
    sig = np.take_along_axis(mixtures.sigmas, order, axis=-1)
    mu = mu - projections[:, :, None, :]
    feats = np.concatenate([w[..., None], mu, np.log(sig)[..., None]], axis=-1)
    return feats.reshape(C, J * M * MIXTURE_FEATURES)


def build_step_input(state, mixtures, projections=None, likelihood=None):
    """Feature matrix with one row per camera.

    Each row is ``[camera params (9), mixture features of that view
    (4 per component per joint), projections into that view (2J)]`` followed
    by the view-invariant block ``[pose (3J), mean log-likelihood]`` copied
    onto every row. Pose and projections are centered on their joint mean so
    the features do not depend on where the subject sits in the image.
    """
    C, J = state.num_cameras, state.num_joints
    if mixtures.shape[:2] != (C, J):
        raise ShapeMismatch(f"mixtures {mixtures.shape[:2]} do not match state {(C, J)}")
    if projections is None:
        projections = state.keypoints()
    projections = np.asarray(projections, dtype=float)
    if projections.shape != (C, J, 2):
        raise ShapeMismatch(f"projections have shape {projections.shape}")
    if likelihood is None:
        likelihood = float(np.mean(mixtures.log_prob(projections)))
    centered_k = projections - projections.mean(axis=1, keepdims=True)
    view = np.concatenate(
        [state.camera_params(), mixture_features(mixtures, projections),
         centered_k.reshape(C, 2 * J)], axis=1)
    centered_pose = state.pose - state.pose.mean(axis=0)
    invariant = np.concatenate([centered_pose.ravel(), [likelihood]])
    return np.concatenate([view, np.broadcast_to(invariant, (C, invariant.size))], axis=1)


def apply_update(state, d_pose, d_cams):
    """Add a pose update and per-camera parameter updates; the gauge camera is untouched."""
    d_pose = np.asarray(d_pose, dtype=float).reshape(state.pose.shape)
    d_cams = np.asarray(d_cams, dtype=float)
    if d_cams.shape != (state.num_cameras, CAMERA_PARAMS):
        raise ShapeMismatch(f"camera update has shape {d_cams.shape}")
    params = state.camera_params()
    free = state.free_cameras()
    params[free] = params[free] + d_cams[free]
    rot6d_to_matrix(params[:, :6])  # raises DegenerateRotation on a collapsed update
    return SolutionState.from_arrays(state.pose + d_pose, params, state.gauge)
