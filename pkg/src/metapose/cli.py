"""Command line pipeline: synth, fit-gmm, init, refine, train, infer, eval.

Exit codes: 0 ok, 2 configuration error, 3 schema error, 4 numerical failure,
5 model and scene incompatible.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import replace

import numpy as np

from . import io
from .errors import (AlignmentFailed, DegeneratePose, DegenerateRotation, EmptyHeatmap,
                     IncompatibleModel, InvalidConfig, NoActiveTerms, SchemaError, ShapeMismatch,
                     TrainingDiverged)
from .geometry import stage1_init
from .metrics import mse2d, nmpjpe, pmpjpe
from .mixtures import EmConfig, HeatmapGrid, MixtureSet, fit_gmm
from .neuro import (CC, TrainConfig, infer, load_model, save_model, scene_items,
                    train_optimizer)
from .objective import Objective, SolutionState
from .refine import AdamConfig, refine_iterative
from .scenegen import SceneConfig, generate, random_state

EXIT_OK, EXIT_CONFIG, EXIT_SCHEMA, EXIT_NUMERIC, EXIT_INCOMPATIBLE = 0, 2, 3, 4, 5

log = logging.getLogger("metapose")


def _threads():
    raw = os.environ.get("METAPOSE_THREADS", "1")
    try:
        n = int(raw)
    except ValueError as exc:
        raise InvalidConfig(f"METAPOSE_THREADS must be an integer, got {raw!r}") from exc
    if n < 1:
        raise InvalidConfig("METAPOSE_THREADS must be >= 1")
    return n


def _map(fn, items):
    """Ordered map, parallel up to ``METAPOSE_THREADS`` workers."""
    n = _threads()
    if n == 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=n) as pool:
        return list(pool.map(fn, items))


def _load_scenes(path, cams_used=None):
    scenes = sorted(io.read_scenes(path), key=lambda s: s.scene_id)
    ids = [s.scene_id for s in scenes]
    if len(set(ids)) != len(ids):
        raise SchemaError(f"{path}: duplicate scene_id values")
    if cams_used:
        scenes = [s.first_cameras(cams_used) for s in scenes]
    return scenes


def _load_solutions(path, scenes, with_times=False):
    """Solutions matched to ``scenes`` by scene_id (trimmed to the scene's cameras)."""
    sols = {sid: (state, wt) for sid, state, _, wt in io.read_solutions(path)}
    out, times = [], []
    for sc in scenes:
        if sc.scene_id not in sols:
            raise SchemaError(f"{path}: no solution for scene {sc.scene_id}")
        state, wt = sols[sc.scene_id]
        times.append(wt)
        if state.num_cameras > sc.num_cameras:
            if state.gauge >= sc.num_cameras:
                raise InvalidConfig("the gauge camera of a solution would be dropped")
            state = SolutionState(state.pose, state.cameras[:sc.num_cameras], state.gauge)
        if (state.num_cameras, state.num_joints) != (sc.num_cameras, sc.num_joints):
            raise IncompatibleModel(
                f"solution for scene {sc.scene_id} has C={state.num_cameras}, "
                f"J={state.num_joints}; scene has C={sc.num_cameras}, J={sc.num_joints}")
        out.append(state)
    return (out, times) if with_times else out


def _write_solutions(path, scenes, results, method):
    io.write_jsonl(path, [io.solution_to_dict(sc.scene_id, st, method, wt)
                          for sc, (st, wt) in zip(scenes, results)])


def _s1(sc):
    pose, cams = stage1_init(list(sc.monocular), reference=sc.reference)
    return SolutionState(pose, cams, sc.reference)


def _parse_plan(text):
    plan = []
    for tok in text.split(","):
        tok = tok.strip()
        if tok.upper() == CC:
            plan.append(CC)
        else:
            try:
                plan.append(int(tok))
            except ValueError as exc:
                raise InvalidConfig(f"bad layer plan entry {tok!r}") from exc
    return tuple(plan)


def _test_objective(sc, terms):
    """The unsupervised refinement objective of a scene restricted to ``terms``."""
    obj = Objective(mixtures=sc.mixtures, prior=sc.bone_prior,
                    skeleton=sc.skeleton if sc.bone_prior is not None else None)
    return obj.only(*terms)


# commands ------------------------------------------------------------------


def cmd_synth(args):
    cfg = SceneConfig(num_joints=args.joints, num_cameras=args.cams, template=args.template,
                      scale=args.scale, hard_two_cam=args.hard_two_cam, sigma_h=args.sigma_h,
                      sigma_depth=args.sigma_depth, sigma_pixel=args.sigma_pixel,
                      sigma_k=args.sigma_k, heatmap_size=args.heatmap_size,
                      gmm_components=args.gmm_components, seed=args.seed)
    cfg.validate()
    scenes = _map(lambda i: generate(cfg, i), range(args.first, args.first + args.scenes))
    if args.no_gt:
        scenes = [replace(s, gt_pose=None, gt_cameras=None, keypoints=None) for s in scenes]
    io.write_scenes(args.out, scenes)
    return EXIT_OK


def cmd_fit_gmm(args):
    em = EmConfig(n_components=args.components, max_iters=args.max_iters, tol=args.tol,
                  seed=args.seed)
    scenes = _load_scenes(args.input)

    def refit(sc):
        if sc.heatmaps is None:
            raise SchemaError(f"scene {sc.scene_id} carries no heatmaps")
        C, J = sc.heatmaps.shape[:2]
        fitted = [[fit_gmm(HeatmapGrid(sc.heatmaps[c, j]), em).sorted() for j in range(J)]
                  for c in range(C)]
        return replace(sc, mixtures=MixtureSet.from_nested(fitted))

    io.write_scenes(args.out, _map(refit, scenes))
    return EXIT_OK


def cmd_init(args):
    scenes = _load_scenes(args.input, args.cams_used)

    def run(sc):
        t0 = time.perf_counter()
        state = _s1(sc)
        return state, time.perf_counter() - t0

    _write_solutions(args.out, scenes, _map(run, scenes), "s1")
    return EXIT_OK


def cmd_refine(args):
    scenes = _load_scenes(args.input, args.cams_used)
    if args.init:
        inits = _load_solutions(args.init, scenes)
    elif args.random_init:
        inits = [random_state(sc, np.random.default_rng([args.seed, sc.scene_id]))
                 for sc in scenes]
    else:
        inits = [_s1(sc) for sc in scenes]
    adam = AdamConfig(lr=args.lr, steps=args.steps)
    terms = [t.strip() for t in args.terms.split(",")]
    if not terms or not set(terms) <= {"ba", "bone"}:
        raise InvalidConfig(f"--terms must name ba and/or bone, got {args.terms!r}")

    def run(pair):
        sc, init = pair
        trace = refine_iterative(init, _test_objective(sc, terms), adam)
        return trace.state, trace.wall_time

    method = "rnd+ir" if args.random_init else "s1+ir"
    _write_solutions(args.out, scenes, _map(run, list(zip(scenes, inits))), method)
    return EXIT_OK


def cmd_train(args):
    plan = _parse_plan(args.plan)
    cfg = TrainConfig(mode=args.mode, lr=args.lr, epochs=args.epochs,
                      batch_size=args.batch_size, attempts=args.attempts, seed=args.seed,
                      plan=plan, head_width=args.head_width, use_bone=args.use_bone,
                      use_teacher=args.use_teacher, gauge_augment=not args.no_gauge_augment)
    train = _load_scenes(args.train, args.cams_used)
    val = _load_scenes(args.val, args.cams_used)
    for sc in train + val:
        if sc.gt_pose is None:
            raise SchemaError(f"scene {sc.scene_id} has no ground truth; training needs it")
        if cfg.mode == "weak" and sc.keypoints is None:
            raise SchemaError(f"scene {sc.scene_id} has no keypoints for weak supervision")

    teacher_fn = None
    if cfg.use_teacher:
        adam = AdamConfig()

        def teacher_fn(sc, init):
            return refine_iterative(init, _test_objective(sc, ("ba",)), adam).state

    train_items = scene_items(train, cfg.gauge_augment, teacher_fn)
    val_items = scene_items(val, False, teacher_fn)
    opt, curve, results = train_optimizer(train_items, val_items, cfg, num_steps=args.steps)
    for i, r in enumerate(results):
        log.info("step %d: validation pmpjpe %.4f -> %.4f (%d attempts)", i,
                 r.baseline_pmpjpe, r.best_pmpjpe, r.attempts_used)
    save_model(opt, args.out)
    if args.curve:
        io.write_csv(args.curve, curve,
                     ["step", "attempt", "epoch", "train_loss", "val_loss", "val_pmpjpe"])
    return EXIT_OK


def cmd_infer(args):
    opt = load_model(args.model)
    scenes = _load_scenes(args.input, args.cams_used)
    for sc in scenes:
        opt.check_compatible(sc.num_joints, sc.num_components)
    inits = _load_solutions(args.init, scenes) if args.init else [_s1(sc) for sc in scenes]

    def run(pair):
        sc, init = pair
        t0 = time.perf_counter()
        state = infer(opt, init, sc.mixtures)
        return state, time.perf_counter() - t0

    _write_solutions(args.out, scenes, _map(run, list(zip(scenes, inits))), "s1+s2")
    return EXIT_OK


EVAL_COLUMNS = ["scene_id", "pmpjpe", "nmpjpe", "mse2d", "wall_time"]


def evaluate_rows(scenes, solutions, wall_times):
    """Per-scene metric rows followed by ``mean`` and ``median`` summary rows.

    Poses are mapped from the solution gauge into the world frame with the
    ground-truth reference camera first, so NMPJPE sees the true orientation.
    """
    rows = []
    for sc, st, wt in zip(scenes, solutions, wall_times):
        if sc.gt_pose is None:
            raise SchemaError(f"scene {sc.scene_id} has no ground truth pose")
        pose = sc.to_world(st.pose, st.gauge) if sc.gt_cameras is not None else st.pose
        m2 = mse2d(st.keypoints(), sc.keypoints) if sc.keypoints is not None else float("nan")
        rows.append({"scene_id": sc.scene_id, "pmpjpe": pmpjpe(pose, sc.gt_pose),
                     "nmpjpe": nmpjpe(pose, sc.gt_pose), "mse2d": m2, "wall_time": wt})
    summary = []
    for name, fn in (("mean", np.mean), ("median", np.median)):
        row = {"scene_id": name}
        for col in EVAL_COLUMNS[1:]:
            row[col] = float(fn([r[col] for r in rows])) if rows else float("nan")
        summary.append(row)
    return rows + summary


def cmd_eval(args):
    scenes = _load_scenes(args.input, args.cams_used)
    states, times = _load_solutions(args.solutions, scenes, with_times=True)
    rows = evaluate_rows(scenes, states, times)
    io.write_csv(args.out, rows, EVAL_COLUMNS)
    summary = {r["scene_id"]: r for r in rows[-2:]}
    print(f"pmpjpe mean {summary['mean']['pmpjpe']:.4f} median {summary['median']['pmpjpe']:.4f}")
    return EXIT_OK


# parser --------------------------------------------------------------------


def build_parser():
    p = argparse.ArgumentParser(prog="metapose", description=__doc__,
                                formatter_class=argparse.RawDescriptionHelpFormatter)
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    def cams_used(sp):
        sp.add_argument("--cams-used", type=int, default=None, metavar="K",
                        help="keep only the first K cameras of every scene")

    s = sub.add_parser("synth", help="generate synthetic scenes as JSONL")
    s.add_argument("--out", required=True, help="output scene file (JSONL)")
    s.add_argument("--scenes", type=int, default=10, help="number of scenes")
    s.add_argument("--first", type=int, default=0, help="index of the first scene")
    s.add_argument("--cams", type=int, default=4, help="cameras per scene")
    s.add_argument("--joints", type=int, default=17, help="joints per pose")
    s.add_argument("--template", default="tree", help="chain, tree or triangle")
    s.add_argument("--scale", type=float, default=1000.0, help="pose extent in world units")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--sigma-h", type=float, default=0.01, help="heatmap Gaussian width")
    s.add_argument("--sigma-depth", type=float, default=0.0, help="monocular depth noise")
    s.add_argument("--sigma-pixel", type=float, default=0.0, help="monocular 2D noise")
    s.add_argument("--sigma-k", type=float, default=0.0, help="heatmap center noise")
    s.add_argument("--heatmap-size", type=int, default=0,
                   help="rasterize heatmaps at this size and fit mixtures by EM (0: exact)")
    s.add_argument("--gmm-components", type=int, default=4, help="EM mixture components")
    s.add_argument("--hard-two-cam", action="store_true",
                   help="place camera 1 almost on top of camera 0")
    s.add_argument("--no-gt", action="store_true", help="omit ground truth from the output")
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("fit-gmm", help="refit scene mixtures from their stored heatmaps")
    s.add_argument("--in", dest="input", required=True, help="scene file with heatmaps")
    s.add_argument("--out", required=True)
    s.add_argument("--components", type=int, default=4)
    s.add_argument("--max-iters", type=int, default=50)
    s.add_argument("--tol", type=float, default=1e-7)
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_fit_gmm)

    s = sub.add_parser("init", help="closed-form stage-1 initialization")
    s.add_argument("--in", dest="input", required=True, help="scene file")
    s.add_argument("--out", required=True, help="solution file (JSONL)")
    cams_used(s)
    s.set_defaults(func=cmd_init)

    s = sub.add_parser("refine", help="iterative Adam refinement")
    s.add_argument("--in", dest="input", required=True, help="scene file")
    s.add_argument("--out", required=True, help="solution file (JSONL)")
    s.add_argument("--init", help="starting solutions (default: stage-1)")
    s.add_argument("--random-init", action="store_true", help="start from a random state")
    s.add_argument("--steps", type=int, default=100)
    s.add_argument("--lr", type=float, default=1e-2)
    s.add_argument("--terms", default="ba",
                   help="comma separated objective terms among ba, bone (bone is opt-in)")
    s.add_argument("--seed", type=int, default=0, help="seed for --random-init")
    cams_used(s)
    s.set_defaults(func=cmd_refine)

    s = sub.add_parser("train", help="train the learned refiner")
    s.add_argument("--train", required=True, help="training scene file")
    s.add_argument("--val", required=True, help="validation scene file")
    s.add_argument("--out", required=True, help="model file (.npz)")
    s.add_argument("--curve", help="training curve CSV")
    s.add_argument("--mode", choices=("weak", "self"), default="weak",
                   help="weak: 2D keypoint supervision; self: heatmap likelihood only")
    s.add_argument("--steps", type=int, default=3, help="refinement steps")
    s.add_argument("--epochs", type=int, default=100)
    s.add_argument("--lr", type=float, default=1e-4)
    s.add_argument("--batch-size", type=int, default=20)
    s.add_argument("--attempts", type=int, default=10, help="retraining attempts per step")
    s.add_argument("--plan", default=",".join(str(p) for p in TrainConfig().plan),
                   help="trunk layer plan, e.g. 512,512,CC,512")
    s.add_argument("--head-width", type=int, default=128)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--use-bone", action="store_true", help="add the bone length prior")
    s.add_argument("--use-teacher", action="store_true",
                   help="add a teacher term toward the iterative refiner solution")
    s.add_argument("--no-gauge-augment", action="store_true",
                   help="do not rotate every camera through the gauge slot")
    cams_used(s)
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("infer", help="apply a trained refiner")
    s.add_argument("--model", required=True)
    s.add_argument("--in", dest="input", required=True, help="scene file")
    s.add_argument("--out", required=True, help="solution file (JSONL)")
    s.add_argument("--init", help="starting solutions (default: stage-1)")
    cams_used(s)
    s.set_defaults(func=cmd_infer)

    s = sub.add_parser("eval", help="score solutions against ground truth")
    s.add_argument("--in", dest="input", required=True, help="scene file with ground truth")
    s.add_argument("--solutions", required=True)
    s.add_argument("--out", required=True, help="report CSV")
    cams_used(s)
    s.set_defaults(func=cmd_eval)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (InvalidConfig, ValueError) as exc:
        code, msg = EXIT_CONFIG, f"configuration error: {exc}"
    except (SchemaError, ShapeMismatch, OSError) as exc:
        code, msg = EXIT_SCHEMA, f"schema error: {exc}"
    except IncompatibleModel as exc:
        code, msg = EXIT_INCOMPATIBLE, f"incompatible input: {exc}"
    except (DegenerateRotation, DegeneratePose, AlignmentFailed, EmptyHeatmap, NoActiveTerms,
            TrainingDiverged, FloatingPointError) as exc:
        code, msg = EXIT_NUMERIC, f"numerical failure: {exc}"
    print(f"metapose: {msg}", file=sys.stderr)
    return code


if __name__ == "__main__":
    sys.exit(main())
