"""Pose error metrics."""

from __future__ import annotations

import time
from contextlib import contextmanager
from dataclasses import dataclass

import numpy as np

from .errors import DegeneratePose, ShapeMismatch
from .geometry import kabsch, tau_degenerate


@dataclass
class EvalReport:
    pmpjpe: float
    nmpjpe: float
    mse2d: float
    wall_time: float = 0.0


def _centered_pair(pred, gt):
    pred = np.asarray(pred, dtype=float)
    gt = np.asarray(gt, dtype=float)
    if pred.shape != gt.shape or pred.ndim != 2 or pred.shape[1] != 3:
        raise ShapeMismatch(f"pose shapes differ: {pred.shape} vs {gt.shape}")
    pc = pred - pred.mean(0)
    gc = gt - gt.mean(0)
    tau = tau_degenerate(pred.shape[0])
    if np.linalg.norm(pc) < tau or np.linalg.norm(gc) < tau:
        raise DegeneratePose("pose collapses to a point")
    return pc, gc


def similarity_align(pred, gt):
    """``pred`` after the least-squares rotation, scale and shift onto ``gt``."""
    pc, gc = _centered_pair(pred, gt)
    R = kabsch(pc, gc)
    rotated = pc @ R.T
    s = np.sum(rotated * gc) / np.sum(rotated * rotated)
    return s * rotated + np.asarray(gt, dtype=float).mean(0)


def pmpjpe(pred, gt):
    """Mean per-joint error after optimal similarity alignment (proper rotations only)."""
    aligned = similarity_align(pred, gt)
    return float(np.linalg.norm(aligned - gt, axis=1).mean())


def nmpjpe(pred, gt):
    """Mean per-joint error after optimal scale and shift only."""
    pc, gc = _centered_pair(pred, gt)
    s = np.sum(pc * gc) / np.sum(pc * pc)
    return float(np.linalg.norm(s * pc - gc, axis=1).mean())


def mse2d(pred, gt):
    pred = np.asarray(pred, dtype=float)
    gt = np.asarray(gt, dtype=float)
    if pred.shape != gt.shape:
        raise ShapeMismatch(f"keypoint shapes differ: {pred.shape} vs {gt.shape}")
    return float(np.mean(np.sum((pred - gt) ** 2, axis=-1)))


@contextmanager
def timed():
    """Context manager yielding a dict whose ``seconds`` is set on exit."""
    box = {"seconds": 0.0}
    t0 = time.perf_counter()
    try:
        yield box
    finally:
        box["seconds"] = time.perf_counter() - t0
