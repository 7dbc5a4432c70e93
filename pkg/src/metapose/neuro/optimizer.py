"""Learned multi-step refiner: progressive training, inference and model files."""

from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np

from ..errors import IncompatibleModel, SchemaError, ShapeMismatch, TrainingDiverged
from ..geometry import stage1_init
from ..metrics import pmpjpe
from ..objective import (BonePrior, Objective, Skeleton, SolutionState, TeacherLossConfig,
                         TermWeights)
from ..refine import AdamConfig, AdamMoments, adam_step
from .features import apply_update, build_step_input, row_width
from .network import CC, SKI_PLAN, StepNetwork

log = logging.getLogger(__name__)

MODEL_VERSION = 1
MODES = ("weak", "self")


@dataclass
class TrainingItem:
    """One scene as seen by a refinement step: the current state plus its supervision."""

    state: object
    mixtures: object
    gt_pose: np.ndarray
    keypoints: Optional[np.ndarray] = None
    prior: Optional[BonePrior] = None
    skeleton: Optional[Skeleton] = None
    teacher: Optional[object] = None

    def objective(self, cfg):
        if cfg.mode == "self":
            return Objective(mixtures=self.mixtures, weights=cfg.term_weights)
        if self.keypoints is None:
            raise ValueError("weakly supervised training needs ground-truth keypoints")
        prior = self.prior if cfg.use_bone else None
        teacher = None
        if cfg.use_teacher and self.teacher is not None:
            teacher = TeacherLossConfig(self.teacher, *cfg.teacher_lambdas)
        return Objective(keypoints=self.keypoints, prior=prior,
                         skeleton=self.skeleton if prior is not None else None,
                         teacher=teacher, weights=cfg.term_weights)


def scene_items(scenes, all_references=False, teacher_fn=None):
    """Stage-1 initialised training items for scene objects.

    With ``all_references`` every camera of a scene takes a turn as the gauge
    camera, giving ``C`` distinct starting states per scene. ``teacher_fn(scene,
    init)`` may supply a reference solution (same gauge as ``init``) for the
    teacher term.
    """
    items = []
    for sc in scenes:
        refs = range(sc.num_cameras) if all_references else [sc.reference]
        for r in refs:
            pose, cams = stage1_init(list(sc.monocular), reference=r)
            init = SolutionState(pose, cams, r)
            teacher = teacher_fn(sc, init) if teacher_fn is not None else None
            items.append(TrainingItem(init, sc.mixtures, sc.gt_pose,
                                      sc.keypoints, sc.bone_prior, sc.skeleton, teacher))
    return items


@dataclass
class TrainConfig:
    mode: str = "weak"
    lr: float = 1e-4
    epochs: int = 100
    batch_size: int = 20
    attempts: int = 10
    seed: int = 0
    plan: tuple = SKI_PLAN
    head_width: int = 128
    use_bone: bool = False
    use_teacher: bool = False
    gauge_augment: bool = True
    teacher_lambdas: tuple = (1.0, 1.0, 1.0, 1.0)
    term_weights: TermWeights = field(default_factory=TermWeights)

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}")

    def to_dict(self):
        d = asdict(self)
        d["plan"] = list(self.plan)
        d["teacher_lambdas"] = list(self.teacher_lambdas)
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        d["plan"] = tuple(d["plan"])
        d["teacher_lambdas"] = tuple(d["teacher_lambdas"])
        d["term_weights"] = TermWeights(**d["term_weights"])
        return cls(**d)


@dataclass
class Normalizer:
    mean: np.ndarray
    std: np.ndarray

    @classmethod
    def fit(cls, rows):
        flat = rows.reshape(-1, rows.shape[-1])
        std = flat.std(axis=0)
        return cls(flat.mean(axis=0), np.where(std > 1e-8, std, 1.0))

    def __call__(self, x):
        return (x - self.mean) / self.std


@dataclass
class RefinerStep:
    network: StepNetwork
    normalizer: Normalizer

    def predict(self, features):
        return self.network.forward(self.normalizer(features))


@dataclass
class NeuralOptimizer:
    steps: list
    num_joints: int
    num_components: int
    config: dict = field(default_factory=dict)

    def config_hash(self):
        blob = json.dumps(self.config, sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()

    def check_compatible(self, num_joints, num_components):
        if (num_joints, num_components) != (self.num_joints, self.num_components):
            raise IncompatibleModel(
                f"model expects J={self.num_joints}, M={self.num_components}; "
                f"scene has J={num_joints}, M={num_components}")


def _features(items):
    return np.stack([build_step_input(it.state, it.mixtures) for it in items])


def _updated_states(items, d_pose, d_cams):
    return [apply_update(it.state, dp, dc) for it, dp, dc in zip(items, d_pose, d_cams)]


def _batch_loss(items, net, x, cfg):
    """Mean loss over ``items`` and its gradients w.r.t. ``net.parameters()``."""
    d_pose, d_cams, cache = net.forward(x, return_cache=True)
    g_pose = np.zeros_like(d_pose)
    g_cam = np.zeros_like(d_cams)
    total = 0.0
    for b, (it, new) in enumerate(zip(items, _updated_states(items, d_pose, d_cams))):
        value, (gp, gc) = it.objective(cfg).evaluate(new)
        total += value
        g_pose[b] = gp.ravel()
        gc[new.gauge] = 0.0
        g_cam[b] = gc
    n = len(items)
    if not np.isfinite(total):
        raise TrainingDiverged("training loss is not finite")
    return total / n, net.backward(cache, g_pose / n, g_cam / n)


def _mean_loss(items, net, x, cfg):
    d_pose, d_cams = net.forward(x)
    states = _updated_states(items, d_pose, d_cams)
    return float(np.mean([it.objective(cfg).value(s) for it, s in zip(items, states)]))


def _mean_pmpjpe(items, states=None):
    states = states or [it.state for it in items]
    return float(np.mean([pmpjpe(s.pose, it.gt_pose) for it, s in zip(items, states)]))


def _check_items(items):
    shapes = {(it.state.num_cameras, it.state.num_joints, it.mixtures.shape[2]) for it in items}
    if len(shapes) != 1:
        raise ShapeMismatch(f"training scenes disagree in (C, J, M): {sorted(shapes)}")
    return shapes.pop()


@dataclass
class StepResult:
    step: RefinerStep
    curve: list
    baseline_pmpjpe: float
    best_pmpjpe: float
    attempts_used: int

    @property
    def improved(self):
        return self.best_pmpjpe < self.baseline_pmpjpe


def train_step_network(index, train_items, val_items, cfg):
    """Train refinement step ``index`` on states already advanced by earlier steps.

    Earlier steps are not touched: their effect is baked into ``item.state``.
    Returns the best-validation network over up to ``cfg.attempts`` restarts,
    stopping early once an attempt beats the unrefined validation PMPJPE.
    """
    _, J, M = _check_items(train_items)
    x_train = _features(train_items)
    x_val = _features(val_items)
    norm = Normalizer.fit(x_train)
    xt, xv = norm(x_train), norm(x_val)
    baseline = _mean_pmpjpe(val_items)
    adam = AdamConfig(lr=cfg.lr, steps=1)
    best = None
    curve = []
    for attempt in range(max(1, cfg.attempts)):
        seed = int(np.random.SeedSequence([cfg.seed, index, attempt]).generate_state(1)[0])
        rng = np.random.default_rng(seed)
        net = StepNetwork(x_train.shape[-1], J, cfg.plan, cfg.head_width, seed=seed)
        params = net.parameters()
        moments = [AdamMoments.zeros_like(p) for p in params]
        t = 0
        att_best = (np.inf, None)

        def record(epoch):
            d_pose, d_cams = net.forward(xv)
            states = _updated_states(val_items, d_pose, d_cams)
            val = _mean_pmpjpe(val_items, states)
            val_loss = float(np.mean([it.objective(cfg).value(s)
                                      for it, s in zip(val_items, states)]))
            loss = _mean_loss(train_items, net, xt, cfg)
            curve.append({"step": index, "attempt": attempt, "epoch": epoch,
                          "train_loss": loss, "val_loss": val_loss, "val_pmpjpe": val})
            return val

        val = record(0)
        att_best = (val, net.copy())
        for epoch in range(1, cfg.epochs + 1):
            order = rng.permutation(len(train_items))
            for start in range(0, len(order), cfg.batch_size):
                idx = order[start:start + cfg.batch_size]
                _, grads = _batch_loss([train_items[i] for i in idx], net, xt[idx], cfg)
                t += 1
                for k, (p, g) in enumerate(zip(params, grads)):
                    new, moments[k] = adam_step(p, g, moments[k], adam, t)
                    p[...] = new
            val = record(epoch)
            if val < att_best[0]:
                att_best = (val, net.copy())
        log.info("step %d attempt %d: val pmpjpe %.4f (baseline %.4f)",
                 index, attempt, att_best[0], baseline)
        if best is None or att_best[0] < best[0]:
            best = att_best
        if best[0] < baseline:
            break
    return StepResult(RefinerStep(best[1], norm), curve, baseline, best[0], attempt + 1)


def advance(step, items):
    """Apply a trained step to every item and return items holding the new states."""
    x = np.stack([build_step_input(it.state, it.mixtures) for it in items])
    d_pose, d_cams = step.predict(x)
    out = []
    for it, new in zip(items, _updated_states(items, d_pose, d_cams)):
        out.append(TrainingItem(new, it.mixtures, it.gt_pose, it.keypoints, it.prior,
                                it.skeleton, it.teacher))
    return out


def train_optimizer(train_items, val_items, cfg, num_steps=3):
    """Progressively train ``num_steps`` refinement steps."""
    _, J, M = _check_items(train_items)
    steps, curve, results = [], [], []
    for i in range(num_steps):
        res = train_step_network(i, train_items, val_items, cfg)
        steps.append(res.step)
        curve.extend(res.curve)
        results.append(res)
        train_items = advance(res.step, train_items)
        val_items = advance(res.step, val_items)
    opt = NeuralOptimizer(steps, J, M, {"train": cfg.to_dict(), "num_steps": num_steps})
    return opt, curve, results


def infer(opt, init, mixtures):
    """Run every trained step from ``init``; uses no ground truth."""
    opt.check_compatible(init.num_joints, mixtures.shape[2])
    state = init
    for step in opt.steps:
        d_pose, d_cams = step.predict(build_step_input(state, mixtures)[None])
        state = apply_update(state, d_pose[0], d_cams[0])
    return state


def save_model(opt, path):
    """Write a ``.npz`` container: JSON header plus one array per weight tensor."""
    header = {
        "version": MODEL_VERSION,
        "num_joints": opt.num_joints,
        "num_components": opt.num_components,
        "config": opt.config,
        "config_hash": opt.config_hash(),
        "steps": [{"plan": [p if p == CC else int(p) for p in s.network.plan],
                   "input_width": s.network.input_width,
                   "head_width": s.network.head_width} for s in opt.steps],
    }
    arrays = {"header": np.array(json.dumps(header, sort_keys=True))}
    for i, s in enumerate(opt.steps):
        arrays[f"step{i}/norm_mean"] = s.normalizer.mean
        arrays[f"step{i}/norm_std"] = s.normalizer.std
        for k, p in enumerate(s.network.parameters()):
            arrays[f"step{i}/param{k}"] = p
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)


def load_model(path):
    try:
        data = np.load(path, allow_pickle=False)
        header = json.loads(str(data["header"]))
    except (OSError, ValueError, KeyError) as exc:
        raise SchemaError(f"cannot read model file {path}: {exc}") from exc
    if header.get("version") != MODEL_VERSION:
        raise SchemaError(f"unsupported model version {header.get('version')}")
    steps = []
    for i, spec in enumerate(header["steps"]):
        net = StepNetwork(spec["input_width"], header["num_joints"], spec["plan"],
                          spec["head_width"])
        n = len(net.parameters())
        net.set_parameters([data[f"step{i}/param{k}"] for k in range(n)])
        norm = Normalizer(data[f"step{i}/norm_mean"], data[f"step{i}/norm_std"])
        steps.append(RefinerStep(net, norm))
    opt = NeuralOptimizer(steps, header["num_joints"], header["num_components"], header["config"])
    if opt.config_hash() != header["config_hash"]:
        raise SchemaError("model config hash mismatch")
    if steps and steps[0].network.input_width != row_width(opt.num_joints, opt.num_components):
        raise SchemaError("model input width disagrees with its joint/component counts")
    return opt
