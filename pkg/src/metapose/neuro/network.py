"""Permutation-equivariant step network with hand-written backprop.

Inputs are ``(B, C, D)`` arrays: a batch of scenes, one row per camera. The
trunk runs dense layers row-wise; a ``"CC"`` marker appends the mean and the
mean square over cameras to every row. The camera head reads each trunk row,
the pose head reads the camera-averaged trunk output.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..objective import CAMERA_PARAMS

SELU_LAMBDA = 1.0507009873554804934193349852946
SELU_ALPHA = 1.6732632423543772848170429916717
CC = "CC"

H36M_PLAN = (512, 512, CC, 512, 512, CC, 512)
SKI_PLAN = (512, 512, CC, 512, 512, CC, 512, 512, CC, 512, 512, CC, 512)


def selu(x):
    return SELU_LAMBDA * np.where(x > 0, x, SELU_ALPHA * np.expm1(np.minimum(x, 0.0)))


def selu_grad(x):
    return SELU_LAMBDA * np.where(x > 0, 1.0, SELU_ALPHA * np.exp(np.minimum(x, 0.0)))


@dataclass
class DenseLayer:
    weights: np.ndarray
    bias: np.ndarray
    activation: str = "selu"

    @classmethod
    def init(cls, n_in, n_out, rng, activation="selu", zero=False):
        if zero:
            return cls(np.zeros((n_out, n_in)), np.zeros(n_out), activation)
        bound = np.sqrt(3.0 / n_in)
        return cls(rng.uniform(-bound, bound, size=(n_out, n_in)), np.zeros(n_out), activation)

    def forward(self, x):
        z = (x.reshape(-1, x.shape[-1]) @ self.weights.T).reshape(x.shape[:-1] + (-1,)) + self.bias
        y = selu(z) if self.activation == "selu" else z
        return y, (x, z)

    def backward(self, cache, g):
        x, z = cache
        if self.activation == "selu":
            g = g * selu_grad(z)
        x2 = x.reshape(-1, x.shape[-1])
        g2 = g.reshape(-1, g.shape[-1])
        gx = (g2 @ self.weights).reshape(x.shape)
        return gx, g2.T @ x2, g2.sum(axis=0)


def validate_plan(plan):
    plan = list(plan)
    if not any(p != CC for p in plan):
        raise ValueError("layer plan needs at least one dense layer")
    if plan[0] == CC:
        raise ValueError("layer plan cannot start with a moment concatenation")
    for p in plan:
        if p != CC and (not isinstance(p, (int, np.integer)) or p < 1):
            raise ValueError(f"bad layer plan entry {p!r}")
    return plan


def _moment_concat(h):
    mean = h.mean(axis=1, keepdims=True)
    sq = (h * h).mean(axis=1, keepdims=True)
    return np.concatenate([h, np.broadcast_to(mean, h.shape), np.broadcast_to(sq, h.shape)],
                          axis=-1)


def _moment_concat_backward(h, g):
    n = h.shape[-1]
    C = h.shape[1]
    g_h, g_mean, g_sq = g[..., :n], g[..., n:2 * n], g[..., 2 * n:]
    return (g_h + g_mean.sum(axis=1, keepdims=True) / C
            + 2.0 * h * g_sq.sum(axis=1, keepdims=True) / C)


class StepNetwork:
    """One refinement step: ``(B, C, D) -> (dJ (B, 3J), dC (B, C, 9))``."""

    def __init__(self, input_width, num_joints, plan=SKI_PLAN, head_width=128, seed=0):
        self.input_width = int(input_width)
        self.num_joints = int(num_joints)
        self.plan = validate_plan(plan)
        self.head_width = int(head_width)
        rng = np.random.default_rng(seed)
        self.trunk = []
        width = self.input_width
        for p in self.plan:
            if p == CC:
                width *= 3
            else:
                self.trunk.append(DenseLayer.init(width, int(p), rng))
                width = int(p)
        self.trunk_width = width
        self.cam_head = [DenseLayer.init(width, head_width, rng),
                         DenseLayer.init(head_width, CAMERA_PARAMS, rng, "linear", zero=True)]
        self.pose_head = [DenseLayer.init(width, head_width, rng),
                          DenseLayer.init(head_width, 3 * num_joints, rng, "linear", zero=True)]

    @property
    def layers(self):
        return self.trunk + self.cam_head + self.pose_head

    def parameters(self):
        out = []
        for layer in self.layers:
            out.extend([layer.weights, layer.bias])
        return out

    def set_parameters(self, arrays):
        arrays = list(arrays)
        for i, layer in enumerate(self.layers):
            layer.weights = np.array(arrays[2 * i], dtype=float)
            layer.bias = np.array(arrays[2 * i + 1], dtype=float)

    def copy(self):
        net = StepNetwork.__new__(StepNetwork)
        net.input_width, net.num_joints = self.input_width, self.num_joints
        net.plan, net.head_width, net.trunk_width = list(self.plan), self.head_width, self.trunk_width
        net.trunk = [DenseLayer(l.weights.copy(), l.bias.copy(), l.activation) for l in self.trunk]
        net.cam_head = [DenseLayer(l.weights.copy(), l.bias.copy(), l.activation)
                        for l in self.cam_head]
        net.pose_head = [DenseLayer(l.weights.copy(), l.bias.copy(), l.activation)
                         for l in self.pose_head]
        return net

    def forward(self, x, return_cache=False):
        x = np.asarray(x, dtype=float)
        if x.ndim == 2:
            x = x[None]
        if x.shape[-1] != self.input_width:
            raise ValueError(f"input width {x.shape[-1]} != network width {self.input_width}")
        trunk_cache = []
        h = x
        layers = iter(self.trunk)
        for p in self.plan:
            if p == CC:
                trunk_cache.append(("cc", h))
                h = _moment_concat(h)
            else:
                layer = next(layers)
                h, c = layer.forward(h)
                trunk_cache.append(("dense", c))
        cam_cache = []
        a = h
        for layer in self.cam_head:
            a, c = layer.forward(a)
            cam_cache.append(c)
        e = h.mean(axis=1)
        pose_cache = []
        for layer in self.pose_head:
            e, c = layer.forward(e)
            pose_cache.append(c)
        if return_cache:
            return e, a, (trunk_cache, cam_cache, pose_cache, h.shape[1])
        return e, a

    def backward(self, cache, g_pose, g_cam):
        """Gradients for :meth:`parameters` given upstream ``d/d dJ`` and ``d/d dC``."""
        trunk_cache, cam_cache, pose_cache, C = cache
        grads = {}
        g = g_cam
        for i in range(len(self.cam_head) - 1, -1, -1):
            g, gw, gb = self.cam_head[i].backward(cam_cache[i], g)
            grads[("cam", i)] = (gw, gb)
        g_h = g
        g = g_pose
        for i in range(len(self.pose_head) - 1, -1, -1):
            g, gw, gb = self.pose_head[i].backward(pose_cache[i], g)
            grads[("pose", i)] = (gw, gb)
        g_h = g_h + np.repeat(g[:, None, :] / C, C, axis=1)
        di = len(self.trunk) - 1
        for kind, c in reversed(trunk_cache):
            if kind == "cc":
                g_h = _moment_concat_backward(c, g_h)
            else:
                g_h, gw, gb = self.trunk[di].backward(c, g_h)
                grads[("trunk", di)] = (gw, gb)
                di -= 1
        out = []
        for i in range(len(self.trunk)):
            out.extend(grads[("trunk", i)])
        for i in range(len(self.cam_head)):
            out.extend(grads[("cam", i)])
        for i in range(len(self.pose_head)):
            out.extend(grads[("pose", i)])
        return out
