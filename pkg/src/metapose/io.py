"""JSON/JSONL scene and solution documents, CSV reports."""

from __future__ import annotations

import csv
import json

import numpy as np

from .errors import SchemaError
from .geometry import WeakCamera
from .mixtures import MixtureSet
from .objective import BonePrior, Skeleton, SolutionState
from .scenegen import Scene

SCENE_VERSION = 1
SOLUTION_VERSION = 1


def dumps(doc):
    """Canonical single-line JSON (sorted keys, no whitespace)."""
    return json.dumps(doc, sort_keys=True, separators=(",", ":"))


def _camera_to_dict(cam):
    return {"rot6d": cam.rot6d.tolist(), "shift": cam.shift.tolist(), "log_scale": cam.log_scale}


def _camera_from_dict(d):
    return WeakCamera(d["rot6d"], d["shift"], d["log_scale"])


def _array(doc, key, shape, where):
    try:
        a = np.asarray(doc[key], dtype=float)
    except KeyError as exc:
        raise SchemaError(f"{where}: missing field {key!r}") from exc
    except (TypeError, ValueError) as exc:
        raise SchemaError(f"{where}: field {key!r} is not a numeric array") from exc
    if a.shape != shape:
        raise SchemaError(f"{where}: field {key!r} has shape {a.shape}, expected {shape}")
    return a


def scene_to_dict(scene):
    C, J, M = scene.mixtures.shape
    doc = {
        "version": SCENE_VERSION,
        "scene_id": int(scene.scene_id),
        "meta": dict(scene.meta, J=J, C=C, M=M, reference=int(scene.reference)),
        "mixtures": {
            "weights": scene.mixtures.weights.tolist(),
            "means": scene.mixtures.means.tolist(),
            "sigmas": scene.mixtures.sigmas.tolist(),
        },
        "monocular": scene.monocular.tolist(),
        "skeleton": scene.skeleton.edges.tolist(),
    }
    if scene.gt_pose is not None:
        doc["gt"] = {"pose": np.asarray(scene.gt_pose).tolist(),
                     "cameras": [_camera_to_dict(c) for c in scene.gt_cameras]}
    if scene.keypoints is not None:
        doc["keypoints"] = np.asarray(scene.keypoints).tolist()
    if scene.bone_prior is not None:
        doc["bone_prior"] = {"target": scene.bone_prior.target.tolist(),
                             "sigma_b": scene.bone_prior.sigma_b}
    if scene.heatmaps is not None:
        doc["heatmaps"] = np.asarray(scene.heatmaps).tolist()
    return doc


def scene_from_dict(doc):
    where = f"scene {doc.get('scene_id', '?')}" if isinstance(doc, dict) else "scene"
    if not isinstance(doc, dict) or doc.get("version") != SCENE_VERSION:
        raise SchemaError(f"{where}: unsupported or missing version")
    try:
        meta = dict(doc["meta"])
        J, C, M = int(meta["J"]), int(meta["C"]), int(meta["M"])
        mix = doc["mixtures"]
    except (KeyError, TypeError, ValueError) as exc:
        raise SchemaError(f"{where}: malformed meta/mixtures block") from exc
    mixtures = MixtureSet(_array(mix, "weights", (C, J, M), where),
                          _array(mix, "means", (C, J, M, 2), where),
                          _array(mix, "sigmas", (C, J, M), where))
    monocular = _array(doc, "monocular", (C, J, 3), where)
    try:
        skeleton = Skeleton(doc["skeleton"])
        skeleton.validate(J)
    except (KeyError, ValueError) as exc:
        raise SchemaError(f"{where}: bad skeleton ({exc})") from exc
    gt_pose, gt_cams = None, None
    if "gt" in doc:
        gt_pose = _array(doc["gt"], "pose", (J, 3), where)
        try:
            gt_cams = [_camera_from_dict(c) for c in doc["gt"]["cameras"]]
        except (KeyError, TypeError, ValueError) as exc:
            raise SchemaError(f"{where}: bad gt cameras") from exc
        if len(gt_cams) != C:
            raise SchemaError(f"{where}: expected {C} gt cameras")
    keypoints = _array(doc, "keypoints", (C, J, 2), where) if "keypoints" in doc else None
    prior = None
    if "bone_prior" in doc:
        try:
            prior = BonePrior(doc["bone_prior"]["target"], doc["bone_prior"]["sigma_b"])
        except (KeyError, ValueError) as exc:
            raise SchemaError(f"{where}: bad bone prior ({exc})") from exc
        if prior.target.shape != (skeleton.num_edges,):
            raise SchemaError(f"{where}: bone prior length differs from skeleton")
    heatmaps = None
    if "heatmaps" in doc:
        heatmaps = np.asarray(doc["heatmaps"], dtype=float)
        if heatmaps.ndim != 4 or heatmaps.shape[:2] != (C, J):
            raise SchemaError(f"{where}: heatmaps must be (C, J, H, W)")
    reference = int(meta.pop("reference", 0))
    for k in ("J", "C", "M"):
        meta.pop(k)
    if not 0 <= reference < C:
        raise SchemaError(f"{where}: reference camera out of range")
    return Scene(gt_pose, gt_cams, keypoints, mixtures, monocular, skeleton, prior, heatmaps,
                 scene_id=int(doc.get("scene_id", 0)), reference=reference, meta=meta)


def solution_to_dict(scene_id, state, method, wall_time=0.0):
    return {
        "version": SOLUTION_VERSION,
        "scene_id": int(scene_id),
        "method": method,
        "gauge": int(state.gauge),
        "pose": state.pose.tolist(),
        "cameras": [_camera_to_dict(c) for c in state.cameras],
        "wall_time": float(wall_time),
    }


def solution_from_dict(doc):
    if not isinstance(doc, dict) or doc.get("version") != SOLUTION_VERSION:
        raise SchemaError("solution: unsupported or missing version")
    try:
        pose = np.asarray(doc["pose"], dtype=float)
        cams = [_camera_from_dict(c) for c in doc["cameras"]]
        state = SolutionState(pose, cams, int(doc.get("gauge", 0)))
        return int(doc["scene_id"]), state, doc.get("method", ""), float(doc.get("wall_time", 0.0))
    except (KeyError, TypeError, ValueError) as exc:
        raise SchemaError(f"solution: malformed document ({exc})") from exc


def read_jsonl(path):
    docs = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line:
                continue
            try:
                docs.append(json.loads(line))
            except json.JSONDecodeError as exc:
                raise SchemaError(f"{path}:{lineno}: invalid JSON ({exc.msg})") from exc
    return docs


def write_jsonl(path, docs):
    with open(path, "w") as fh:
        for doc in docs:
            fh.write(dumps(doc))
            fh.write("\n")


def read_scenes(path):
    return [scene_from_dict(d) for d in read_jsonl(path)]


def write_scenes(path, scenes):
    write_jsonl(path, [scene_to_dict(s) for s in scenes])


def read_solutions(path):
    return [solution_from_dict(d) for d in read_jsonl(path)]


def write_csv(path, rows, columns):
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=columns, extrasaction="ignore")
        writer.writeheader()
        for row in rows:
            writer.writerow(row)
