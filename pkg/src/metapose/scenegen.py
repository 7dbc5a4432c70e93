"""Synthetic multi-view scenes with known pose, cameras and observations."""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from .errors import DegenerateRotation, InvalidConfig
from .geometry import WeakCamera, matrix_to_rot6d, project_pose, rot6d_to_matrix
from .mixtures import (EmConfig, GaussianMixture2D, HeatmapGrid, MixtureSet, fit_gmm,
                       mixture_log_prob)
from .objective import BonePrior, Skeleton, SolutionState, bone_lengths_normalized

TEMPLATES = ("chain", "tree", "triangle")

# Human3.6M-style 17 joint layout, millimetres, z up.
_H36M_JOINTS = np.array([
    [0, 0, 920], [-130, 0, 910], [-140, 20, 480], [-150, 40, 60],
    [130, 0, 910], [140, 20, 480], [150, 40, 60], [0, -10, 1150],
    [0, 0, 1400], [0, 10, 1500], [0, 0, 1640], [180, 0, 1390],
    [420, 30, 1360], [640, 60, 1340], [-180, 0, 1390], [-420, 30, 1360],
    [-640, 60, 1340],
], dtype=float)
_H36M_EDGES = [(0, 1), (1, 2), (2, 3), (0, 4), (4, 5), (5, 6), (0, 7), (7, 8),
               (8, 9), (9, 10), (8, 11), (11, 12), (12, 13), (8, 14), (14, 15), (15, 16)]


def template_pose(kind, num_joints, scale=1000.0):
    """Centered template with a longest extent of roughly ``scale``, plus its skeleton."""
    if kind == "triangle":
        if num_joints != 3:
            raise InvalidConfig("triangle template has exactly 3 joints")
        ang = 2.0 * np.pi * np.arange(3) / 3.0
        pts = np.stack([np.cos(ang), np.zeros(3), np.sin(ang)], axis=1)
        edges = [(0, 1), (1, 2), (2, 0)]
    elif kind == "tree":
        if num_joints != 17:
            raise InvalidConfig("tree template has exactly 17 joints")
        pts = _H36M_JOINTS.copy()
        edges = _H36M_EDGES
    elif kind == "chain":
        i = np.arange(num_joints)
        # non-planar zigzag so no view is degenerate
        pts = np.stack([0.35 * np.cos(1.7 * i), 0.35 * np.sin(1.3 * i + 0.4), i / 2.0], axis=1)
        edges = [(a, a + 1) for a in range(num_joints - 1)]
    else:
        raise InvalidConfig(f"unknown template {kind!r}")
    pts = pts - pts.mean(0)
    pts = pts * (scale / np.ptp(pts, axis=0).max())
    return pts, Skeleton(edges)


@dataclass
class SceneConfig:
    num_joints: int = 17
    num_cameras: int = 4
    template: str = "tree"
    scale: float = 1000.0
    pose_jitter: float = 0.05
    ring_jitter: float = 0.3
    elevation: float = 0.3
    hard_two_cam: bool = False
    image_fill: float = 0.6
    sigma_h: float = 0.01
    sigma_depth: float = 0.0
    sigma_pixel: float = 0.0
    sigma_k: float = 0.0
    heatmap_size: int = 0
    gmm_components: int = 4
    seed: int = 0

    def validate(self):
        if self.num_joints < 3:
            raise InvalidConfig("need at least 3 joints")
        if self.num_cameras < 2:
            raise InvalidConfig("need at least 2 cameras")
        if self.template not in TEMPLATES:
            raise InvalidConfig(f"template must be one of {TEMPLATES}")
        for name in ("sigma_h", "sigma_depth", "sigma_pixel", "sigma_k", "pose_jitter",
                     "ring_jitter", "elevation"):
            if getattr(self, name) < 0:
                raise InvalidConfig(f"{name} must be non-negative")
        if self.sigma_h <= 0:
            raise InvalidConfig("sigma_h must be positive")
        if not self.scale > 0 or not 0 < self.image_fill <= 1:
            raise InvalidConfig("scale and image_fill must be positive")
        if self.heatmap_size < 0 or self.gmm_components < 1:
            raise InvalidConfig("heatmap_size >= 0 and gmm_components >= 1 required")
        template_pose(self.template, self.num_joints)


@dataclass
class Scene:
    gt_pose: np.ndarray
    gt_cameras: list
    keypoints: np.ndarray
    mixtures: MixtureSet
    monocular: np.ndarray
    skeleton: Skeleton
    bone_prior: Optional[BonePrior] = None
    heatmaps: Optional[np.ndarray] = None
    scene_id: int = 0
    reference: int = 0
    meta: dict = field(default_factory=dict)

    @property
    def num_cameras(self):
        return self.monocular.shape[0]

    @property
    def num_joints(self):
        return self.monocular.shape[1]

    @property
    def num_components(self):
        return self.mixtures.shape[2]

    @property
    def scale(self):
        return float(self.meta.get("scale", 1000.0))

    def gt_state(self):
        """Ground truth expressed in the gauge where the reference camera is ``(I, 0, 1)``."""
        ref = self.gt_cameras[self.reference]
        R0, s0 = ref.rotation, ref.scale
        T = np.array([ref.shift[0], ref.shift[1], 0.0])
        pose = s0 * self.gt_pose @ R0.T + T
        cams = []
        for c, cam in enumerate(self.gt_cameras):
            if c == self.reference:
                cams.append(WeakCamera.identity())
                continue
            R = cam.rotation @ R0.T
            s = cam.scale / s0
            t = cam.shift - s * (R @ T)[:2]
            cams.append(WeakCamera(matrix_to_rot6d(R), t, np.log(s)))
        return SolutionState(pose, cams, self.reference)

    def to_world(self, pose, gauge=None):
        """Map a pose from the gauge of camera ``gauge`` back into the world frame."""
        ref = self.gt_cameras[self.reference if gauge is None else gauge]
        T = np.array([ref.shift[0], ref.shift[1], 0.0])
        return (np.asarray(pose, dtype=float) - T) @ ref.rotation / ref.scale

    def permuted(self, order):
        """Copy with cameras reordered so new camera ``i`` is old camera ``order[i]``."""
        order = list(order)
        idx = np.asarray(order)
        return replace(
            self,
            gt_cameras=_take(self.gt_cameras, idx),
            keypoints=_take(self.keypoints, idx),
            mixtures=self.mixtures.take_cameras(idx),
            monocular=self.monocular[idx],
            heatmaps=_take(self.heatmaps, idx),
            reference=order.index(self.reference),
        )

    def first_cameras(self, k):
        if not 1 <= k <= self.num_cameras:
            raise InvalidConfig(f"cannot use {k} of {self.num_cameras} cameras")
        if self.reference >= k:
            raise InvalidConfig("reference camera would be dropped")
        idx = np.arange(k)
        return replace(
            self,
            gt_cameras=_take(self.gt_cameras, idx),
            keypoints=_take(self.keypoints, idx),
            mixtures=self.mixtures.take_cameras(idx),
            monocular=self.monocular[idx],
            heatmaps=_take(self.heatmaps, idx),
        )


def _take(x, idx):
    if x is None:
        return None
    if isinstance(x, list):
        return [x[i] for i in idx]
    return x[idx]


def _look_at_rotation(direction, up=np.array([0.0, 0.0, 1.0])):
    """Rows ``[right, down, forward]`` for a camera looking along ``direction``."""
    fwd = direction / np.linalg.norm(direction)
    right = np.cross(fwd, up)
    right /= np.linalg.norm(right)
    return np.stack([right, np.cross(fwd, right), fwd])


def _rot_z(a):
    c, s = np.cos(a), np.sin(a)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def to_heatmap_grid(mixture, width, height=None):
    """Rasterize ``mixture`` on a ``height x width`` grid of cell centers."""
    height = height or width
    xs = (np.arange(width) + 0.5) / width
    ys = (np.arange(height) + 0.5) / height
    gx, gy = np.meshgrid(xs, ys)
    pts = np.stack([gx, gy], axis=-1)
    lp = mixture_log_prob(mixture.weights, mixture.means, mixture.sigmas, pts)
    return HeatmapGrid(np.exp(lp - lp.max()))


def generate(cfg, index=0):
    """Generate scene ``index`` of the stream defined by ``cfg`` (deterministic)."""
    cfg.validate()
    rng = np.random.default_rng([cfg.seed, index])
    J, C = cfg.num_joints, cfg.num_cameras
    base, skeleton = template_pose(cfg.template, J, cfg.scale)
    pose = base @ _rot_z(rng.uniform(0, 2 * np.pi)).T
    pose = pose + rng.normal(0.0, cfg.pose_jitter * cfg.scale / np.sqrt(J), size=pose.shape)
    pose = pose - pose.mean(0)
    extent = np.ptp(pose, axis=0).max()

    az0 = rng.uniform(0, 2 * np.pi)
    cams = []
    for c in range(C):
        if cfg.hard_two_cam and c == 1:
            az = az0 + 0.05
        else:
            az = az0 + 2 * np.pi * c / C + rng.uniform(-cfg.ring_jitter, cfg.ring_jitter)
        el = rng.uniform(-cfg.elevation, cfg.elevation)
        position = np.array([np.cos(el) * np.cos(az), np.cos(el) * np.sin(az), np.sin(el)])
        R = _look_at_rotation(-position)
        s = cfg.image_fill / extent * rng.uniform(0.9, 1.1)
        t = 0.5 + rng.uniform(-0.05, 0.05, size=2)
        cams.append(WeakCamera(matrix_to_rot6d(R), t, np.log(s)))

    keypoints = np.stack([project_pose(pose, cam) for cam in cams])
    centers = keypoints + rng.normal(0.0, cfg.sigma_k, size=keypoints.shape)

    heatmaps = None
    if cfg.heatmap_size:
        em = EmConfig(n_components=cfg.gmm_components, seed=cfg.seed)
        grids, fitted = [], []
        for c in range(C):
            row_g, row_f = [], []
            for j in range(J):
                h = to_heatmap_grid(GaussianMixture2D.single(centers[c, j], cfg.sigma_h),
                                    cfg.heatmap_size)
                row_g.append(h.probs)
                row_f.append(fit_gmm(h, em).sorted())
            grids.append(row_g)
            fitted.append(row_f)
        heatmaps = np.array(grids)
        mixtures = MixtureSet.from_nested(fitted)
    else:
        mixtures = MixtureSet(np.ones((C, J, 1)), centers[:, :, None, :],
                              np.full((C, J, 1), cfg.sigma_h))

    mono = np.empty((C, J, 3))
    for c, cam in enumerate(cams):
        depth = pose @ cam.rotation[2] + rng.normal(0.0, cfg.sigma_depth, size=J)
        depth = cam.scale * depth
        mono[c, :, :2] = keypoints[c] + rng.normal(0.0, cfg.sigma_pixel, size=(J, 2))
        mono[c, :, 2] = depth - depth.mean()

    prior = BonePrior(bone_lengths_normalized(pose, skeleton))
    meta = {"scale": cfg.scale, "seed": cfg.seed, "units": "mm", "template": cfg.template}
    return Scene(pose, cams, keypoints, mixtures, mono, skeleton, prior, heatmaps,
                 scene_id=index, meta=meta)


def generate_many(cfg, n):
    return [generate(cfg, i) for i in range(n)]


def random_state(scene, rng):
    """A random starting point in the reference gauge (pose near the image, random cameras)."""
    J, C = scene.num_joints, scene.num_cameras
    pose = rng.normal(0.0, 0.3, size=(J, 3)) + np.array([0.5, 0.5, 0.0])
    cams = []
    for c in range(C):
        if c == scene.reference:
            cams.append(WeakCamera.identity())
            continue
        rot6d = rng.normal(size=6)
        while True:
            try:
                rot6d_to_matrix(rot6d)
                break
            except DegenerateRotation:
                rot6d = rng.normal(size=6)
        cams.append(WeakCamera(rot6d, rng.uniform(0.3, 0.7, size=2), rng.normal(0.0, 0.1)))
    return SolutionState(pose, cams, scene.reference)


def monocular_list(scene):
    return [scene.monocular[c] for c in range(scene.num_cameras)]
