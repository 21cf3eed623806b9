"""File formats: scene/prediction/assignment/detection JSONL, CSV tables, SVG plots, manifests.

Every float is written at 9 significant digits, which round-trips through
the loaders without drift and keeps outputs byte-stable.
"""

from __future__ import annotations

import csv
import hashlib
import json
import math
import os
from dataclasses import dataclass
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from .assignment import AnchorSet, AssignmentResult, GroundTruthObject
from .geometry import Box3, InvalidBoxError
from .harness.scene import Scene
from .metrics import DetectionArrays

FLOAT_DIGITS = 9
SCENE_FIELDS = ("scene_id", "seed", "objects")
OBJECT_FIELDS = ("id", "class_id", "center", "size")


class FormatError(ValueError):
    """A malformed input record; ``lineno`` is 1-based when known."""

    def __init__(self, message: str, path=None, lineno: int | None = None):
        where = ""
        if path is not None:
            where = f"{path}:{lineno}: " if lineno is not None else f"{path}: "
        super().__init__(where + message)
        self.path = path
        self.lineno = lineno


def fmt(x) -> str:
    """Canonical text for a float: 9 significant digits."""
    x = float(x)
    if math.isnan(x):
        return "nan"
    if math.isinf(x):
        return "inf" if x > 0 else "-inf"
    return f"{x:.{FLOAT_DIGITS}g}"


def round_floats(obj):
    """Recursively round floats (and numpy scalars/arrays) for JSON output."""
    if isinstance(obj, (float, np.floating)):
        x = float(obj)
        return x if not math.isfinite(x) else float(fmt(x))
    if isinstance(obj, (bool, np.bool_)):
        return bool(obj)
    if isinstance(obj, (int, np.integer)):
        return int(obj)
    if isinstance(obj, np.ndarray):
        return round_floats(obj.tolist())
    if isinstance(obj, dict):
        return {k: round_floats(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [round_floats(v) for v in obj]
    return obj


def dumps(obj) -> str:
    return json.dumps(round_floats(obj), separators=(", ", ": "))


def write_jsonl(path, records) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for rec in records:
            fh.write(dumps(rec) + "\n")


def read_jsonl(path):
    """Yield ``(lineno, object)``; blank lines are skipped."""
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise FormatError(f"malformed JSON ({exc.msg})", path, lineno) from None
            if not isinstance(obj, dict):
                raise FormatError("each line must be a JSON object", path, lineno)
            yield lineno, obj


def _require(obj, names, path, lineno, what):
    for name in names:
        if name not in obj:
            raise FormatError(f"{what} is missing required field {name!r}", path, lineno)


def _vec3(value, name, path, lineno):
    try:
        v = [float(x) for x in value]
    except (TypeError, ValueError):
        raise FormatError(f"{name} must be a list of 3 numbers", path, lineno) from None
    if len(v) != 3:
        raise FormatError(f"{name} must be a list of 3 numbers", path, lineno)
    return v


# ---------------------------------------------------------------------------
# scenes
# ---------------------------------------------------------------------------


def scene_to_dict(scene: Scene) -> dict:
    return {
        "scene_id": scene.scene_id,
        "seed": scene.seed,
        "objects": [
            {"id": o.id, "class_id": o.class_id, "center": list(o.box.center), "size": list(o.box.size)}
            for o in scene.objects
        ],
    }


def scene_from_dict(d: dict, path=None, lineno=None) -> Scene:
    _require(d, SCENE_FIELDS, path, lineno, "scene")
    objects = []
    for o in d["objects"]:
        if not isinstance(o, dict):
            raise FormatError("objects must be JSON objects", path, lineno)
        _require(o, OBJECT_FIELDS, path, lineno, "object")
        try:
            box = Box3(tuple(_vec3(o["center"], "center", path, lineno)),
                       tuple(_vec3(o["size"], "size", path, lineno)))
        except InvalidBoxError as exc:
            raise FormatError(str(exc), path, lineno) from None
        objects.append(GroundTruthObject(int(o["id"]), box, int(o["class_id"])))
    extent = tuple(d.get("room_extent", (6.0, 6.0, 3.0)))
    return Scene(int(d["scene_id"]), int(d["seed"]), objects, bool(d.get("relaxed", False)), extent)


def write_scenes(path, scenes) -> None:
    write_jsonl(path, (scene_to_dict(s) for s in scenes))


def read_scenes(path) -> list[Scene]:
    return [scene_from_dict(obj, path, n) for n, obj in read_jsonl(path)]


# ---------------------------------------------------------------------------
# predictions, assignments, detections
# ---------------------------------------------------------------------------


@dataclass
class ScenePredictions:
    """Per-anchor predictions of one scene, indexed like ``anchors``."""

    scene_id: int
    anchors: AnchorSet
    centers: np.ndarray
    sizes: np.ndarray
    scores: np.ndarray | None


PREDICTION_FIELDS = ("anchor_id", "anchor_center", "center", "size")


def predictions_to_dict(p: ScenePredictions) -> dict:
    strides = p.anchors.level_strides() if len(p.anchors.strides) else np.full(len(p.anchors), np.nan)
    rows = []
    for i in range(len(p.anchors)):
        row = {
            "anchor_id": int(p.anchors.ids[i]),
            "anchor_center": p.anchors.centers[i],
            "stride": strides[i],
            "center": p.centers[i],
            "size": p.sizes[i],
        }
        if p.scores is not None:
            row["scores"] = p.scores[i]
        rows.append(row)
    return {"scene_id": p.scene_id, "predictions": rows}


def predictions_from_dict(d: dict, path=None, lineno=None) -> ScenePredictions:
    _require(d, ("scene_id", "predictions"), path, lineno, "prediction record")
    rows = d["predictions"]
    for r in rows:
        _require(r, PREDICTION_FIELDS, path, lineno, "prediction")
    ids = [int(r["anchor_id"]) for r in rows]
    anchor_centers = [_vec3(r["anchor_center"], "anchor_center", path, lineno) for r in rows]
    centers = np.array([_vec3(r["center"], "center", path, lineno) for r in rows]).reshape(-1, 3)
    sizes = np.array([_vec3(r["size"], "size", path, lineno) for r in rows]).reshape(-1, 3)
    if np.any(sizes < 1e-6):
        raise FormatError("predicted sizes must be >= 1e-6", path, lineno)
    # each distinct stride becomes one level, so per-level radii survive the round trip
    stride = np.array([float(r.get("stride", float("nan"))) for r in rows])
    if len(rows) and np.all(np.isfinite(stride)):
        levels_strides, levels = np.unique(stride, return_inverse=True)
        strides = tuple(float(s) for s in levels_strides)
    else:
        levels, strides = np.zeros(len(rows), dtype=int), ()
    scores = None
    if rows and all("scores" in r for r in rows):
        scores = np.array([[float(x) for x in r["scores"]] for r in rows])
    anchors = AnchorSet(ids, anchor_centers, levels, strides)
    return ScenePredictions(int(d["scene_id"]), anchors, centers, sizes, scores)


def read_predictions(path) -> dict[int, ScenePredictions]:
    out = {}
    for n, obj in read_jsonl(path):
        p = predictions_from_dict(obj, path, n)
        out[p.scene_id] = p
    return out


def assignment_to_dict(scene_id: int, result: AssignmentResult) -> dict:
    costs = result.costs if len(result.costs) == len(result.positives) else [float("nan")] * len(result.positives)
    return {
        "scene_id": scene_id,
        "positives": [{"anchor_id": a, "gt_id": g, "cost": c} for (a, g), c in zip(result.positives, costs)],
        "negatives": list(result.negatives),
    }


def detections_to_dict(scene_id: int, dets: DetectionArrays) -> dict:
    return {
        "scene_id": scene_id,
        "detections": [
            {"class_id": int(k), "score": float(p), "center": c, "size": s}
            for c, s, k, p in zip(dets.centers, dets.sizes, dets.classes, dets.scores)
        ],
    }


def detections_from_dict(d: dict, path=None, lineno=None) -> tuple[int, DetectionArrays]:
    _require(d, ("scene_id", "detections"), path, lineno, "detection record")
    rows = d["detections"]
    for r in rows:
        _require(r, ("class_id", "score", "center", "size"), path, lineno, "detection")
    scores = np.array([float(r["score"]) for r in rows])
    if np.any((scores < 0) | (scores > 1)):
        raise FormatError("detection scores must lie in [0, 1]", path, lineno)
    dets = DetectionArrays(
        np.array([_vec3(r["center"], "center", path, lineno) for r in rows]).reshape(-1, 3),
        np.array([_vec3(r["size"], "size", path, lineno) for r in rows]).reshape(-1, 3),
        np.array([int(r["class_id"]) for r in rows], dtype=np.int64),
        scores,
    )
    return int(d["scene_id"]), dets


def read_detections(path) -> dict[int, DetectionArrays]:
    out = {}
    for n, obj in read_jsonl(path):
        sid, dets = detections_from_dict(obj, path, n)
        out[sid] = dets
    return out


# ---------------------------------------------------------------------------
# configs and manifests
# ---------------------------------------------------------------------------


def read_json(path):
    try:
        with open(path, encoding="utf-8") as fh:
            return json.load(fh)
    except json.JSONDecodeError as exc:
        raise FormatError(f"malformed JSON at line {exc.lineno} ({exc.msg})", path, exc.lineno) from None


def write_json(path, obj) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        json.dump(round_floats(obj), fh, indent=2, sort_keys=True)
        fh.write("\n")


def digest(obj) -> str:
    """Short sha256 of the canonical JSON of ``obj``."""
    blob = json.dumps(round_floats(obj), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


def tool_version() -> str:
    from importlib.metadata import PackageNotFoundError, version

    try:
        return version("artifact")
    except PackageNotFoundError:
        return "0+unknown"


def write_manifest(path, resolved_config: dict, suite_seed, outputs) -> dict:
    manifest = {
        "digest": digest(resolved_config),
        "config": resolved_config,
        "suite_seed": suite_seed,
        "tool_version": tool_version(),
        "timestamp": datetime.now(timezone.utc).isoformat(timespec="seconds"),
        "outputs": sorted(str(p) for p in outputs),
    }
    write_json(path, manifest)
    return manifest


# ---------------------------------------------------------------------------
# tables and plots
# ---------------------------------------------------------------------------


def _cell(v):
    if isinstance(v, (bool, np.bool_)):
        return str(bool(v)).lower()
    if isinstance(v, (float, np.floating)):
        return fmt(v)
    return str(v)


def write_csv(path, header, rows) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([_cell(v) for v in row])


def read_csv(path) -> list[dict]:
    with open(path, encoding="utf-8", newline="") as fh:
        return list(csv.DictReader(fh))


def _pyplot():
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    plt.rcParams["svg.hashsalt"] = "sr3d"
    plt.rcParams["svg.fonttype"] = "none"
    return plt


def _save(fig, path):
    fig.savefig(path, format="svg", metadata={"Date": None})
    fig.clf()
    import matplotlib.pyplot as plt

    plt.close(fig)


def plot_curve(path, xs, series: dict, xlabel: str, ylabel: str, title: str = "") -> None:
    """Line chart; ``series`` maps a label to y values (and optional error bars as ``(y, err)``)."""
    plt = _pyplot()
    fig, ax = plt.subplots(figsize=(5, 3.5))
    for label, ys in series.items():
        if isinstance(ys, tuple):
            ax.errorbar(xs, ys[0], yerr=ys[1], marker="o", capsize=3, label=label)
        else:
            ax.plot(xs, ys, marker="o", label=label)
    ax.set_xlabel(xlabel)
    ax.set_ylabel(ylabel)
    if title:
        ax.set_title(title)
    if len(series) > 1:
        ax.legend()
    fig.tight_layout()
    _save(fig, path)


def plot_scatter(path, scores, ious, title: str = "Confidence vs. IoU") -> None:
    """Score-vs-IoU scatter with the ideal diagonal."""
    plt = _pyplot()
    fig, ax = plt.subplots(figsize=(4, 4))
    ax.plot([0, 1], [0, 1], "k--", lw=1, label="ideal")
    ax.scatter(ious, scores, s=8, alpha=0.6)
    ax.set_xlim(0, 1)
    ax.set_ylim(0, 1)
    ax.set_xlabel("IoU with best same-class gt")
    ax.set_ylabel("confidence")
    ax.set_title(title)
    ax.legend(loc="upper left")
    fig.tight_layout()
    _save(fig, path)


def plot_bars(path, labels, values, errors=None, ylabel: str = "AP25") -> None:
    plt = _pyplot()
    fig, ax = plt.subplots(figsize=(max(4, 0.9 * len(labels) + 1), 3.5))
    x = np.arange(len(labels))
    vals = np.nan_to_num(np.asarray(values, dtype=float))
    ax.bar(x, vals, yerr=None if errors is None else np.nan_to_num(errors), capsize=3)
    ax.set_xticks(x)
    ax.set_xticklabels(labels, rotation=30, ha="right")
    ax.set_ylabel(ylabel)
    fig.tight_layout()
    _save(fig, path)


def default_out_root() -> Path:
    return Path(os.environ.get("SR3D_OUT", "."))
