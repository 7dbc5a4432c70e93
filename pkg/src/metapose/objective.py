"""Loss terms over a pose-and-cameras solution, with analytic gradients.

Every term is expressed through the projected keypoints where possible, so a
single vector-Jacobian product (:func:`_projection_vjp`) carries gradients
back to the pose and camera parameters.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from .errors import DegeneratePose, NoActiveTerms, ShapeMismatch
from .geometry import WeakCamera, rot6d_to_matrix, rot6d_to_matrix_vjp, tau_degenerate
from .mixtures import MixtureSet, mixture_log_prob_grad

CAMERA_PARAMS = 9


@dataclass
class SolutionState:
    """Current pose estimate and cameras; ``cameras[gauge]`` is frozen."""

    pose: np.ndarray
    cameras: list
    gauge: int = 0

    def __post_init__(self):
        self.pose = np.asarray(self.pose, dtype=float).reshape(-1, 3)
        self.cameras = list(self.cameras)

    @property
    def num_joints(self):
        return self.pose.shape[0]

    @property
    def num_cameras(self):
        return len(self.cameras)

    def camera_arrays(self):
        """Stacked ``(rot6d (C, 6), shift (C, 2), log_scale (C,))``."""
        return (
            np.stack([c.rot6d for c in self.cameras]),
            np.stack([c.shift for c in self.cameras]),
            np.array([c.log_scale for c in self.cameras]),
        )

    def camera_params(self):
        """``(C, 9)`` array of ``[rot6d, shift, log_scale]`` rows."""
        return np.stack([c.params for c in self.cameras])

    @classmethod
    def from_arrays(cls, pose, cam_params, gauge=0):
        return cls(pose, [WeakCamera.from_params(p) for p in cam_params], gauge)

    def free_cameras(self):
        return [c for c in range(self.num_cameras) if c != self.gauge]

    def to_vector(self):
        """Flattened ``[pose (3J), per free camera: rot6d, shift, log_scale]``."""
        params = self.camera_params()[self.free_cameras()]
        return np.concatenate([self.pose.ravel(), params.ravel()])

    def with_vector(self, vec):
        vec = np.asarray(vec, dtype=float)
        n = 3 * self.num_joints
        free = self.free_cameras()
        if vec.shape != (n + CAMERA_PARAMS * len(free),):
            raise ShapeMismatch(f"parameter vector has shape {vec.shape}")
        params = self.camera_params()
        params[free] = vec[n:].reshape(-1, CAMERA_PARAMS)
        return SolutionState.from_arrays(vec[:n].reshape(-1, 3), params, self.gauge)

    def permuted(self, order):
        """Reorder cameras so that new camera ``i`` is old camera ``order[i]``."""
        order = list(order)
        return SolutionState(self.pose.copy(), [self.cameras[i] for i in order],
                             order.index(self.gauge))

    def copy(self):
        return SolutionState.from_arrays(self.pose.copy(), self.camera_params(), self.gauge)

    def keypoints(self):
        return project_all(self.pose, *self.camera_arrays())


def project_all(pose, rot6d, shift, log_scale):
    """Project every joint into every camera, ``-> (C, J, 2)``."""
    R = rot6d_to_matrix(rot6d)
    s = np.exp(log_scale)
    return s[:, None, None] * np.einsum("cab,jb->cja", R[:, :2], pose) + shift[:, None, :]


def _projection_vjp(pose, rot6d, shift, log_scale, grad_k, grad_R_extra=None):
    """Gradients of a scalar w.r.t. (pose, rot6d, shift, log_scale) given d/dk."""
    R = rot6d_to_matrix(rot6d)
    s = np.exp(log_scale)
    P = R[:, :2]
    g_pose = np.einsum("c,cja,cab->jb", s, grad_k, P)
    g_shift = grad_k.sum(axis=1)
    rotated = np.einsum("cab,jb->cja", P, pose)
    g_log = s * np.einsum("cja,cja->c", grad_k, rotated)
    g_R = np.zeros_like(R)
    g_R[:, :2] = s[:, None, None] * np.einsum("cja,jb->cab", grad_k, pose)
    if grad_R_extra is not None:
        g_R = g_R + grad_R_extra
    g_rot = rot6d_to_matrix_vjp(rot6d, g_R)
    return g_pose, g_rot, g_shift, g_log


@dataclass
class Skeleton:
    edges: np.ndarray

    def __post_init__(self):
        self.edges = np.asarray(self.edges, dtype=int).reshape(-1, 2)
        if np.any(self.edges[:, 0] == self.edges[:, 1]):
            raise ValueError("skeleton has a self-edge")
        if np.any(self.edges < 0):
            raise ValueError("negative joint index in skeleton")

    @property
    def num_edges(self):
        return self.edges.shape[0]

    def validate(self, num_joints):
        if np.any(self.edges >= num_joints):
            raise ValueError("skeleton refers to a joint beyond the pose")
        parent = list(range(num_joints))

        def find(a):
            while parent[a] != a:
                parent[a] = parent[parent[a]]
                a = parent[a]
            return a

        for n, m in self.edges:
            parent[find(n)] = find(m)
        if len({find(a) for a in range(num_joints)}) != 1:
            raise ValueError("skeleton is not connected")


@dataclass
class BonePrior:
    target: np.ndarray
    sigma_b: float = 1.0

    def __post_init__(self):
        self.target = np.asarray(self.target, dtype=float).reshape(-1)
        if abs(self.target.mean() - 1.0) > 1e-9:
            raise ValueError("bone prior target must have mean 1")
        if not self.sigma_b > 0:
            raise ValueError("sigma_b must be positive")


@dataclass
class TeacherLossConfig:
    reference: SolutionState
    lam_p: float = 1.0
    lam_t: float = 1.0
    lam_R: float = 1.0
    lam_s: float = 1.0


def bone_lengths(pose, sk):
    d = pose[sk.edges[:, 0]] - pose[sk.edges[:, 1]]
    return np.linalg.norm(d, axis=1), d


def bone_lengths_normalized(pose, sk):
    pose = np.asarray(pose, dtype=float)
    b, _ = bone_lengths(pose, sk)
    if b.sum() < tau_degenerate(pose.shape[0]):
        raise DegeneratePose("skeleton has zero total length")
    return b / b.mean()


def _bone_loss_grad(pose, prior, sk):
    b, d = bone_lengths(pose, sk)
    if b.sum() < tau_degenerate(pose.shape[0]):
        raise DegeneratePose("skeleton has zero total length")
    mu = b.mean()
    r = b / mu - prior.target
    value = float(np.dot(r, r))
    g_bn = 2.0 * r
    g_b = g_bn / mu - np.dot(g_bn, b) / (mu * mu * len(b))
    safe = np.where(b > 0, b, 1.0)
    per_edge = (g_b / safe)[:, None] * d
    g_pose = np.zeros_like(pose)
    np.add.at(g_pose, sk.edges[:, 0], per_edge)
    np.add.at(g_pose, sk.edges[:, 1], -per_edge)
    return value, g_pose


def bone_loss(pose, prior, sk):
    return _bone_loss_grad(np.asarray(pose, dtype=float), prior, sk)[0]


def ba_neg_log_likelihood(state, mixtures):
    if mixtures.shape[:2] != (state.num_cameras, state.num_joints):
        raise ShapeMismatch("mixture grid does not match the state")
    return float(-mixtures.log_prob(state.keypoints()).sum())


def reprojection_loss(state, keypoints):
    keypoints = np.asarray(keypoints, dtype=float)
    k = state.keypoints()
    if keypoints.shape != k.shape:
        raise ShapeMismatch(f"keypoints {keypoints.shape} vs projections {k.shape}")
    r = k - keypoints
    return float(np.sum(r * r))


def teacher_loss(state, cfg):
    return Objective(teacher=cfg, weights=TermWeights(teacher=1.0)).value(state)


@dataclass
class TermWeights:
    reprojection: float = 1.0
    ba: float = 1.0
    bone: float = 1.0
    teacher: float = 1.0


@dataclass
class Objective:
    """Weighted sum of whichever terms have their inputs supplied.

    The bone term is additionally scaled by ``1 / sigma_b**2`` of the prior.
    """

    mixtures: Optional[MixtureSet] = None
    keypoints: Optional[np.ndarray] = None
    prior: Optional[BonePrior] = None
    skeleton: Optional[Skeleton] = None
    teacher: Optional[TeacherLossConfig] = None
    weights: TermWeights = field(default_factory=TermWeights)

    def active_terms(self):
        terms = []
        if self.keypoints is not None:
            terms.append("reprojection")
        if self.mixtures is not None:
            terms.append("ba")
        if self.prior is not None:
            if self.skeleton is None:
                raise ValueError("bone prior needs a skeleton")
            terms.append("bone")
        if self.teacher is not None:
            terms.append("teacher")
        if not terms:
            raise NoActiveTerms("objective has no active terms")
        return terms

    def only(self, *terms):
        """Copy of this objective restricted to ``terms``."""
        return replace(
            self,
            mixtures=self.mixtures if "ba" in terms else None,
            keypoints=self.keypoints if "reprojection" in terms else None,
            prior=self.prior if "bone" in terms else None,
            teacher=self.teacher if "teacher" in terms else None,
        )

    def value(self, state):
        return self.evaluate(state, need_grad=False)[0]

    def value_and_grad(self, state):
        """Objective value and gradient over ``state.to_vector()`` layout."""
        value, grads = self.evaluate(state)
        g_pose, g_cam = grads
        free = state.free_cameras()
        return value, np.concatenate([g_pose.ravel(), g_cam[free].ravel()])

    def evaluate(self, state, need_grad=True):
        """Return ``(value, (d/dpose (J, 3), d/dcamera (C, 9)))``.

        The camera gradient includes the gauge row; callers drop it.
        """
        terms = self.active_terms()
        w = self.weights
        pose = state.pose
        rot6d, shift, log_scale = state.camera_arrays()
        C, J = len(log_scale), pose.shape[0]
        k = project_all(pose, rot6d, shift, log_scale)
        value = 0.0
        grad_k = np.zeros_like(k)
        g_pose_extra = np.zeros_like(pose)
        g_R_extra = None
        g_shift_extra = np.zeros_like(shift)
        g_log_extra = np.zeros_like(log_scale)

        if "reprojection" in terms:
            K = np.asarray(self.keypoints, dtype=float)
            if K.shape != k.shape:
                raise ShapeMismatch(f"keypoints {K.shape} vs projections {k.shape}")
            r = k - K
            value += w.reprojection * float(np.sum(r * r))
            grad_k += 2.0 * w.reprojection * r
        if "ba" in terms:
            G = self.mixtures
            if G.shape[:2] != (C, J):
                raise ShapeMismatch("mixture grid does not match the state")
            lp, dlp = mixture_log_prob_grad(G.weights, G.means, G.sigmas, k)
            value -= w.ba * float(lp.sum())
            grad_k -= w.ba * dlp
        if "bone" in terms:
            lam = w.bone / self.prior.sigma_b**2
            bv, bg = _bone_loss_grad(pose, self.prior, self.skeleton)
            value += lam * bv
            g_pose_extra += lam * bg
        if "teacher" in terms:
            cfg = self.teacher
            ref = cfg.reference
            if ref.pose.shape != pose.shape or ref.num_cameras != C:
                raise ShapeMismatch("teacher reference does not match the state")
            rr, rt, rl = ref.camera_arrays()
            scale = w.teacher
            dp = pose - ref.pose
            value += scale * cfg.lam_p * float(np.sum(dp * dp))
            g_pose_extra += 2.0 * scale * cfg.lam_p * dp
            dt = shift - rt
            value += scale * cfg.lam_t * float(np.sum(dt * dt))
            g_shift_extra += 2.0 * scale * cfg.lam_t * dt
            R = rot6d_to_matrix(rot6d)
            R_ref = rot6d_to_matrix(rr)
            # |R^T R_ref - I| equals |R - R_ref| for orthonormal R; the latter is exact at R = R_ref
            D = R - R_ref
            value += scale * cfg.lam_R * float(np.sum(D * D))
            g_R_extra = 2.0 * scale * cfg.lam_R * D
            dl = log_scale - rl
            value += scale * cfg.lam_s * float(np.sum(dl * dl))
            g_log_extra += 2.0 * scale * cfg.lam_s * dl

        if not need_grad:
            return value, None
        g_pose, g_rot, g_shift, g_log = _projection_vjp(
            pose, rot6d, shift, log_scale, grad_k, g_R_extra)
        g_pose = g_pose + g_pose_extra
        g_cam = np.concatenate(
            [g_rot, g_shift + g_shift_extra, (g_log + g_log_extra)[:, None]], axis=1)
        return value, (g_pose, g_cam)


def total_objective(state, mixtures=None, keypoints=None, prior=None, skeleton=None,
                    teacher=None, weights=None):
    obj = Objective(mixtures, keypoints, prior, skeleton, teacher, weights or TermWeights())
    return obj.value(state)


def gradient(state, mixtures=None, keypoints=None, prior=None, skeleton=None,
             teacher=None, weights=None):
    obj = Objective(mixtures, keypoints, prior, skeleton, teacher, weights or TermWeights())
    return obj.value_and_grad(state)[1]
