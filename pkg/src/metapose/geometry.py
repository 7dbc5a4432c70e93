"""Weak-perspective cameras, the 6D rotation parameterization and rigid alignment.

Rotations follow a rows-are-basis convention: the rows of ``R`` are the camera
axes expressed in the reference frame, so a point ``j`` lands at ``R @ j`` in
camera coordinates and the first two entries of that product are the image
plane.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import AlignmentFailed, DegeneratePose, DegenerateRotation, NotARotation

TAU_PAR = 1e-8


def tau_degenerate(num_joints):
    return 1e-10 * num_joints


def _normalize(v):
    n = np.linalg.norm(v, axis=-1, keepdims=True)
    return v / n, n


def rot6d_to_matrix(r6):
    """Map raw 6D parameters ``[x, y]`` to rotation matrices.

    Rows are ``n(x), n(x cross y), n(x cross (x cross y))``. Works on any
    leading batch shape, ``(..., 6) -> (..., 3, 3)``.
    """
    r6 = np.asarray(r6, dtype=float)
    x, y = r6[..., :3], r6[..., 3:]
    w = np.cross(x, y)
    u = np.cross(x, w)
    nx = np.linalg.norm(x, axis=-1)
    nw = np.linalg.norm(w, axis=-1)
    if np.any(nx < TAU_PAR) or np.any(nw < TAU_PAR):
        raise DegenerateRotation("6D rotation has a vanishing or parallel axis pair")
    r0 = x / nx[..., None]
    r1 = w / nw[..., None]
    r2 = u / np.linalg.norm(u, axis=-1, keepdims=True)
    return np.stack([r0, r1, r2], axis=-2)


def rot6d_to_matrix_vjp(r6, grad_R):
    """Pull a gradient w.r.t. ``rot6d_to_matrix(r6)`` back onto ``r6``."""
    r6 = np.asarray(r6, dtype=float)
    x, y = r6[..., :3], r6[..., 3:]
    w = np.cross(x, y)
    u = np.cross(x, w)
    r0, nx = _normalize(x)
    r1, nw = _normalize(w)
    r2, nu = _normalize(u)
    g0, g1, g2 = grad_R[..., 0, :], grad_R[..., 1, :], grad_R[..., 2, :]

    def through_norm(r, n, g):
        return (g - r * np.sum(r * g, axis=-1, keepdims=True)) / n

    gx = through_norm(r0, nx, g0)
    gu = through_norm(r2, nu, g2)
    gw = through_norm(r1, nw, g1)
    # u = x cross w
    gx = gx + np.cross(w, gu)
    gw = gw + np.cross(gu, x)
    # w = x cross y
    gx = gx + np.cross(y, gw)
    gy = np.cross(gw, x)
    return np.concatenate([gx, gy], axis=-1)


def matrix_to_rot6d(R, atol=1e-6):
    """Inverse of :func:`rot6d_to_matrix`: returns ``[r0, -r2]``."""
    R = np.asarray(R, dtype=float)
    if R.shape[-2:] != (3, 3):
        raise NotARotation(f"expected a 3x3 matrix, got shape {R.shape}")
    eye = np.eye(3)
    ortho = np.abs(np.swapaxes(R, -1, -2) @ R - eye).max()
    if ortho > atol or np.any(np.abs(np.linalg.det(R) - 1.0) > atol):
        raise NotARotation("matrix is not a proper rotation")
    return np.concatenate([R[..., 0, :], -R[..., 2, :]], axis=-1)


@dataclass
class WeakCamera:
    """Weak-perspective camera ``k = s * (R j)[:2] + t`` with ``s = exp(log_scale)``."""

    rot6d: np.ndarray = field(default_factory=lambda: matrix_to_rot6d(np.eye(3)))
    shift: np.ndarray = field(default_factory=lambda: np.zeros(2))
    log_scale: float = 0.0

    def __post_init__(self):
        self.rot6d = np.asarray(self.rot6d, dtype=float).reshape(6)
        self.shift = np.asarray(self.shift, dtype=float).reshape(2)
        self.log_scale = float(self.log_scale)

    @classmethod
    def identity(cls):
        return cls()

    @classmethod
    def from_rst(cls, R, t, s):
        return cls(matrix_to_rot6d(R), t, np.log(s))

    @property
    def rotation(self):
        return rot6d_to_matrix(self.rot6d)

    @property
    def scale(self):
        return float(np.exp(self.log_scale))

    @property
    def params(self):
        return np.concatenate([self.rot6d, self.shift, [self.log_scale]])

    @classmethod
    def from_params(cls, p):
        p = np.asarray(p, dtype=float)
        return cls(p[:6], p[6:8], p[8])


def project(j, cam):
    """Project a single 3-vector (or ``(..., 3)`` array) through ``cam``."""
    j = np.asarray(j, dtype=float)
    R = cam.rotation
    return cam.scale * (j @ R[:2].T) + cam.shift


def project_pose(pose, cam):
    return project(np.asarray(pose, dtype=float).reshape(-1, 3), cam)


def _check_pose(p, name):
    p = np.asarray(p, dtype=float)
    if p.ndim != 2 or p.shape[1] != 3 or p.shape[0] < 3:
        raise DegeneratePose(f"{name} must be a (J>=3, 3) array, got {p.shape}")
    if not np.all(np.isfinite(p)):
        raise DegeneratePose(f"{name} has non-finite entries")
    return p


def kabsch(src_c, dst_c):
    """Proper rotation ``R`` minimizing ``||dst_c - src_c @ R.T||`` for centered inputs."""
    H = src_c.T @ dst_c
    try:
        U, _, Vt = np.linalg.svd(H)
    except np.linalg.LinAlgError as exc:
        raise AlignmentFailed(str(exc)) from exc
    d = np.sign(np.linalg.det(Vt.T @ U.T))
    if d == 0:
        d = 1.0
    return Vt.T @ np.diag([1.0, 1.0, d]) @ U.T


def procrustes_align(src, dst):
    """Fit a weak camera mapping pose ``src`` onto the image plane of ``dst``.

    ``dst`` is a camera-frame pose whose first two coordinates are image
    coordinates. Returns ``(R, t, s)`` such that
    ``dst[:, :2] ~= s * (src @ R.T)[:, :2] + t``. The rotation comes from the
    full 3D point sets, the scale from the ratio of the image-plane spreads.
    """
    src = _check_pose(src, "src")
    dst = _check_pose(dst, "dst")
    if src.shape != dst.shape:
        raise DegeneratePose(f"pose shapes differ: {src.shape} vs {dst.shape}")
    tau = tau_degenerate(src.shape[0])
    mu_src, mu_dst = src.mean(0), dst.mean(0)
    src_c, dst_c = src - mu_src, dst - mu_dst
    if np.linalg.norm(src_c) < tau or np.linalg.norm(dst_c) < tau:
        raise DegeneratePose("pose collapses to a point")
    R = kabsch(src_c, dst_c)
    rotated = (src_c @ R.T)[:, :2]
    denom = np.linalg.norm(rotated)
    if denom < tau:
        raise DegeneratePose("rotated pose has no extent in the image plane")
    s = np.linalg.norm(dst_c[:, :2]) / denom
    t = mu_dst[:2] - s * (R @ mu_src)[:2]
    return R, t, s


def stage1_init(estimates, reference=0):
    """Closed-form initial pose and cameras from per-view monocular 3D estimates.

    The reference camera (index 0 by default) is fixed to ``(I, 0, 1)``; every
    other camera is fitted with :func:`procrustes_align` against the reference
    view and the pose is the mean of all views mapped back into that frame.
    """
    estimates = [_check_pose(q, f"estimate {i}") for i, q in enumerate(estimates)]
    if not estimates:
        raise DegeneratePose("need at least one view")
    if not 0 <= reference < len(estimates):
        raise IndexError(f"reference camera {reference} out of range")
    q_ref = estimates[reference]
    mu_ref = q_ref.mean(0)
    cams = []
    acc = np.zeros_like(q_ref)
    for c, q in enumerate(estimates):
        if c == reference:
            cams.append(WeakCamera.identity())
            acc = acc + (q - mu_ref)
            continue
        R, t, s = procrustes_align(q_ref, q)
        cams.append(WeakCamera.from_rst(R, t, s))
        acc = acc + (q - q.mean(0)) @ R / s
    pose = acc / len(estimates) + mu_ref
    return pose, cams
