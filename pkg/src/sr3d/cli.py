"""Command-line entry points.

Exit codes: 0 success, 1 evaluation or runtime failure, 2 usage or
validation error. Every command prints the digest of its resolved inputs.
"""

from __future__ import annotations

import argparse
import hashlib
import logging
import sys
from pathlib import Path

import numpy as np

from . import assignment as asg
from . import io, metrics
from .errors import ConfigurationError, EmptyEvaluationError, GenerationError, ShapeError
from .harness import experiment
from .harness.detector import ExperimentConfig
from .harness.scene import AnchorGridSpec, SceneSpec, generate_anchors, generate_suite

log = logging.getLogger("sr3d")

ASSIGN_STRATEGIES = ("spota", "spota-without-rvd", "spota-with-cls-cost", "ota", "fixed-radius")
DEFAULT_SCENE_COUNT = 50


class UsageError(Exception):
    """Bad input or configuration: exit code 2."""


class RuntimeFailure(Exception):
    """Evaluation or training failure: exit code 1."""


def _file_digest(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()[:16]


def _out_path(args, default_name: str) -> Path:
    out = Path(args.out) if args.out else io.default_out_root() / default_name
    return out


def _ensure_dir(path: Path) -> Path:
    try:
        path.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise UsageError(f"cannot create output directory {path}: {exc.strerror}") from None
    return path


def _parent_writable(path: Path):
    _ensure_dir(path.parent if str(path.parent) else Path("."))


def _print_digest(d: str):
    print(f"digest: {d}")


def _load_scene_spec(path) -> SceneSpec:
    if path is None:
        return SceneSpec()
    doc = io.read_json(path)
    if not isinstance(doc, dict):
        raise UsageError(f"{path}: scene spec must be a JSON object")
    try:
        return SceneSpec.from_dict(doc)
    except (TypeError, ValueError) as exc:
        raise UsageError(f"{path}: invalid scene spec: {exc}") from None


def _load_config(path, required=True) -> dict:
    doc = io.read_json(path)
    if not isinstance(doc, dict):
        raise UsageError(f"{path}: config must be a JSON object")
    return doc


def _config_from_doc(doc: dict, source) -> ExperimentConfig:
    try:
        return ExperimentConfig.from_dict(doc)
    except KeyError as exc:
        raise UsageError(f"{source}: missing config field {exc.args[0]!r}") from None
    except (ConfigurationError, TypeError, ValueError) as exc:
        raise UsageError(f"{source}: invalid config: {exc}") from None


def _suite(args):
    """Scenes from ``--scenes`` or generated from ``--seed``/``--count``/``--spec``.

    Returns ``(scenes, suite description for the manifest)``.
    """
    if getattr(args, "scenes", None):
        scenes = io.read_scenes(args.scenes)
        return scenes, {"scenes_file": _file_digest(args.scenes)}
    spec = _load_scene_spec(getattr(args, "spec", None))
    try:
        scenes = generate_suite(spec, args.count, args.seed)
    except GenerationError as exc:
        raise RuntimeFailure(str(exc)) from None
    return scenes, {"scene_spec": spec.to_dict(), "count": args.count, "seed": args.seed}


def _anchors(scenes):
    extent = scenes[0].room_extent if scenes else SceneSpec().room_extent
    return generate_anchors(AnchorGridSpec(), extent)


# ---------------------------------------------------------------------------
# gen-scenes
# ---------------------------------------------------------------------------


def cmd_gen_scenes(args) -> int:
    spec = _load_scene_spec(args.spec)
    if args.count < 0:
        raise UsageError("--count must be non-negative")
    out = _out_path(args, "scenes.jsonl")
    _parent_writable(out)
    try:
        scenes = generate_suite(spec, args.count, args.seed)
    except GenerationError as exc:
        raise RuntimeFailure(str(exc)) from None
    try:
        io.write_scenes(out, scenes)
    except OSError as exc:
        raise UsageError(f"cannot write {out}: {exc.strerror}") from None
    _print_digest(io.digest({"scene_spec": spec.to_dict(), "count": args.count, "seed": args.seed}))
    print(f"wrote {len(scenes)} scenes to {out}")
    return 0


# ---------------------------------------------------------------------------
# assign
# ---------------------------------------------------------------------------


def _assign_one(scene, pred, args):
    gts = scene.objects
    anchors = pred.anchors
    boxes = (pred.centers, pred.sizes)
    needs_scores = args.strategy in ("spota-with-cls-cost", "ota")
    if needs_scores and pred.scores is None:
        raise UsageError(f"scene {scene.scene_id}: strategy {args.strategy} needs per-anchor class scores")
    if args.strategy == "fixed-radius":
        if args.radius is not None:
            radius = args.radius
        elif anchors.strides:
            radius = anchors.level_strides()
        else:
            raise UsageError(f"scene {scene.scene_id}: fixed-radius needs --radius or per-anchor strides")
        return asg.fixed_radius_baseline_assign(gts, anchors, radius)
    if not gts:
        return asg.AssignmentResult([], sorted(int(a) for a in anchors.ids), [])
    if args.strategy == "spota":
        cost = asg.spota_cost_matrix(gts, anchors, boxes, args.mu)
    elif args.strategy == "spota-without-rvd":
        cost = asg.spota_cost_matrix(gts, anchors, boxes, args.mu, use_vertex_distance=False)
    elif args.strategy == "spota-with-cls-cost":
        cost = asg.spota_with_cls_cost_matrix(gts, anchors, boxes, pred.scores, args.mu, args.lam)
    else:
        cost = asg.ota_cost_matrix(gts, anchors, boxes, pred.scores, args.lam)
    return asg.spota_assign(cost, args.k, anchors.ids, [g.id for g in gts])


def cmd_assign(args) -> int:
    scenes = io.read_scenes(args.scenes)
    preds = io.read_predictions(args.predictions)
    scene_ids = {s.scene_id for s in scenes}
    for s in scenes:
        if s.scene_id not in preds:
            raise UsageError(f"scene {s.scene_id} has no predictions in {args.predictions}")
    extra = sorted(set(preds) - scene_ids)
    if extra:
        raise UsageError(f"predictions reference unknown scene {extra[0]}")
    out = _out_path(args, "assignment.jsonl")
    _parent_writable(out)
    records = []
    for s in scenes:
        try:
            result = _assign_one(s, preds[s.scene_id], args)
        except (ShapeError, ConfigurationError, ValueError) as exc:
            raise UsageError(f"scene {s.scene_id}: {exc}") from None
        records.append(io.assignment_to_dict(s.scene_id, result))
    io.write_jsonl(out, records)
    _print_digest(io.digest({"strategy": args.strategy, "k": args.k, "mu": args.mu, "lam": args.lam,
                             "radius": args.radius, "scenes": _file_digest(args.scenes),
                             "predictions": _file_digest(args.predictions)}))
    print(f"wrote assignments for {len(records)} scenes to {out}")
    return 0


# ---------------------------------------------------------------------------
# train
# ---------------------------------------------------------------------------


def cmd_train(args) -> int:
    doc = _load_config(args.config)
    config = _config_from_doc(doc, args.config)
    scenes, suite = _suite(args)
    if not scenes:
        raise UsageError("the scene suite is empty")
    out = _ensure_dir(_out_path(args, "train"))
    plots = _ensure_dir(out / "plots")
    results = experiment.train_suite(scenes, _anchors(scenes), config, jobs=args.jobs)

    metric_rows, scatter_rows, det_records = [], [], []
    for r in results:
        for e in r.epochs:
            metric_rows.append([r.scene_id, e.epoch, e.iteration, e.loss.cls_loss, e.loss.reg_loss,
                                e.loss.total, e.aic, e.ap25, e.ap50, e.pce, e.num_positives])
        if r.scatter is not None:
            scatter_rows.extend([r.scene_id, p, q] for p, q in r.scatter)
        if r.detections is not None:
            det_records.append(io.detections_to_dict(r.scene_id, r.detections))

    io.write_csv(out / "metrics.csv", ["scene_id", "epoch", "iteration", "loss_cls", "loss_reg", "loss_total",
                                       "aic", "ap25", "ap50", "pce", "num_positives"], metric_rows)
    curve = _aic_curve(results)
    io.write_csv(out / "aic_curve.csv", ["epoch", "iteration", "aic_mean", "num_scenes"], curve)
    io.write_csv(out / "scatter.csv", ["scene_id", "score", "iou"], scatter_rows)
    io.write_jsonl(out / "detections.jsonl", det_records)
    if curve:
        io.plot_curve(plots / "aic_curve.svg", [c[1] for c in curve], {config.name: [c[2] for c in curve]},
                      "iteration", "AIC", "Average inconsistency on positives")
    pairs = np.array([[p, q] for _, p, q in scatter_rows]).reshape(-1, 2)
    io.plot_scatter(plots / "scatter.svg", pairs[:, 0], pairs[:, 1])

    resolved = {"config": config.to_dict(), "suite": suite}
    files = ["metrics.csv", "aic_curve.csv", "scatter.csv", "detections.jsonl", "plots/aic_curve.svg",
             "plots/scatter.svg"]
    manifest = io.write_manifest(out / "manifest.json", resolved, suite.get("seed"), files)
    _print_digest(manifest["digest"])
    failed = [r for r in results if r.error]
    for r in failed:
        print(f"scene {r.scene_id}: {r.error}", file=sys.stderr)
    if failed:
        raise RuntimeFailure(f"{len(failed)} of {len(results)} scenes diverged; partial outputs in {out}")
    final = [r.epochs[-1] for r in results]
    print(f"trained {len(results)} scenes: mean AP25 {io.fmt(np.mean([e.ap25 for e in final]))}, "
          f"AP50 {io.fmt(np.mean([e.ap50 for e in final]))}, AIC {io.fmt(np.nanmean([e.aic for e in final]))}")
    return 0


def _aic_curve(results):
    by_epoch = {}
    for r in results:
        for e in r.epochs:
            by_epoch.setdefault((e.epoch, e.iteration), []).append(e.aic)
    rows = []
    for (epoch, it), vals in sorted(by_epoch.items()):
        v = np.array(vals, dtype=float)
        v = v[np.isfinite(v)]
        rows.append([epoch, it, float(v.mean()) if len(v) else float("nan"), len(v)])
    return rows


# ---------------------------------------------------------------------------
# eval
# ---------------------------------------------------------------------------


def _parse_thresholds(text) -> list[float]:
    try:
        vals = [float(t) for t in text.split(",") if t.strip()]
    except ValueError:
        raise UsageError(f"--iou-thresholds must be comma-separated numbers, got {text!r}") from None
    if not vals or any(not 0.0 < v <= 1.0 for v in vals):
        raise UsageError("--iou-thresholds must lie in (0, 1]")
    return vals


def evaluate_suite(dets_by_scene, scenes, thresholds, substitute=False, nms_iou=metrics.NMS_IOU,
                   score_threshold=metrics.SCORE_THRESHOLD, top_k=metrics.PCE_TOP_K):
    """Suite-level metrics with detections pooled across scenes per class.

    Returns ``{"ap": {thr: (per_class, mean)}, "aic": float, "pce": float}``.
    With ``substitute`` every score is first replaced by its best same-class
    gt IoU and NMS is re-run.
    """
    flags = {thr: {} for thr in thresholds}
    n_gt = {}
    errors_pce, errors_aic = [], []
    aic_floor = min(thresholds)
    for scene in scenes:
        gts = metrics.GroundTruthArrays.from_list(scene.objects)
        dets = dets_by_scene.get(scene.scene_id)
        if dets is None:
            dets = metrics.DetectionArrays(np.zeros((0, 3)), np.zeros((0, 3)), np.zeros(0, np.int64), np.zeros(0))
        if substitute:
            dets = metrics.gt_score_substitution_arrays(dets, gts)
            dets = dets.take(metrics.nms_arrays(dets, nms_iou, score_threshold))
        for k in gts.classes:
            n_gt[int(k)] = n_gt.get(int(k), 0)
        for k in np.unique(gts.classes):
            n_gt[int(k)] += int(np.sum(gts.classes == k))
        for thr in thresholds:
            for k, (s, tp, _) in metrics.match_detections(dets, gts, thr).items():
                flags[thr].setdefault(k, []).append((s, tp))
        p = metrics.pce_arrays(dets, gts, top_k)
        errors_pce.extend(p.errors.tolist())
        ious = metrics.best_same_class_iou(dets, gts)
        keep = ious >= aic_floor
        errors_aic.extend(np.abs(dets.scores[keep] - ious[keep]).tolist())
    if not n_gt:
        raise EmptyEvaluationError("no ground truths in the scene file; nothing to evaluate")
    ap = {}
    for thr in thresholds:
        per_class = {}
        for k in sorted(n_gt):
            parts = flags[thr].get(k, [])
            s = np.concatenate([p[0] for p in parts]) if parts else np.zeros(0)
            tp = np.concatenate([p[1] for p in parts]) if parts else np.zeros(0, bool)
            order = np.lexsort((np.arange(len(s)), -s))
            per_class[k] = metrics.ap_from_flags(tp[order], n_gt[k])
        ap[thr] = (per_class, float(np.mean(list(per_class.values()))))
    return {
        "ap": ap,
        "aic": float(np.mean(errors_aic)) if errors_aic else float("nan"),
        "pce": float(np.mean(errors_pce)) if errors_pce else float("nan"),
    }


def cmd_eval(args) -> int:
    thresholds = _parse_thresholds(args.iou_thresholds)
    scenes = io.read_scenes(args.scenes)
    dets = io.read_detections(args.detections)
    unknown = sorted(set(dets) - {s.scene_id for s in scenes})
    if unknown:
        raise UsageError(f"detections reference unknown scene {unknown[0]}")
    variants = [("learned", False)] + ([("gt_iou", True)] if args.gt_iou_substitute else [])
    rows = []
    for label, sub in variants:
        res = evaluate_suite(dets, scenes, thresholds, substitute=sub)
        classes = sorted(next(iter(res["ap"].values()))[0])
        for thr in thresholds:
            per_class, mean = res["ap"][thr]
            rows.append([label, io.fmt(thr), "mean", mean, res["aic"], res["pce"]])
            rows.extend([label, io.fmt(thr), k, per_class[k], "", ""] for k in classes)
    header = ["scores", "iou_threshold", "class", "ap", "aic", "pce"]
    _print_digest(io.digest({"detections": _file_digest(args.detections), "scenes": _file_digest(args.scenes),
                             "thresholds": thresholds, "gt_iou_substitute": bool(args.gt_iou_substitute)}))
    print("  ".join(f"{h:>13}" for h in header))
    for r in rows:
        print("  ".join(f"{io._cell(v):>13}" for v in r))
    if args.out:
        out = Path(args.out)
        _parent_writable(out)
        io.write_csv(out, header, rows)
    return 0


# ---------------------------------------------------------------------------
# ablate / sweep
# ---------------------------------------------------------------------------


def _load_matrix(path) -> list:
    doc = io.read_json(path)
    if isinstance(doc, list):
        shared, cells = {}, doc
    elif isinstance(doc, dict) and "configs" in doc:
        shared, cells = doc.get("defaults", {}), doc["configs"]
    else:
        raise UsageError(f"{path}: matrix must be a list of configs or an object with a 'configs' list")
    if not cells:
        raise UsageError(f"{path}: matrix has no configs")
    return [{**shared, **c} if isinstance(c, dict) else c for c in cells]


ABLATION_HEADER = ["config", "status", "n_scenes"] + [f"{m}_{s}" for m in experiment.METRICS for s in ("mean", "std")] + \
    ["ap50_gt_iou_mean"] + [f"delta_{m}" for m in experiment.METRICS] + ["wins_ap25", "losses_ap25", "sign_p_ap25"]


def _ablation_rows(report):
    rows = []
    for r in report.rows:
        if r.failed:
            rows.append([r.name, "FAILED"] + [""] * (len(ABLATION_HEADER) - 2))
            continue
        row = [r.name, "ok", len(r.scenes)]
        for m in experiment.METRICS:
            row += [r.mean(m), r.std(m)]
        row.append(r.mean("ap50_gt_iou"))
        row += [r.deltas.get(m, float("nan")) for m in experiment.METRICS]
        row += [r.wins, r.losses, r.sign_p]
        rows.append(row)
    return rows


def _scene_rows(report):
    rows = []
    for r in report.rows:
        for s in r.scenes:
            rows.append([r.name, s.scene_id, s.ap25, s.ap50, s.aic, s.pce, s.ap50_gt_iou, s.num_positives])
    return rows


SCENE_HEADER = ["config", "scene_id", "ap25", "ap50", "aic", "pce", "ap50_gt_iou", "num_positives"]


def cmd_ablate(args) -> int:
    matrix = _load_matrix(args.matrix)
    scenes, suite = _suite(args)
    if not scenes:
        raise UsageError("the scene suite is empty")
    out = _ensure_dir(_out_path(args, "ablate"))
    plots = _ensure_dir(out / "plots")
    report = experiment.run_ablation(matrix, scenes, _anchors(scenes), jobs=args.jobs)
    io.write_csv(out / "ablation.csv", ABLATION_HEADER, _ablation_rows(report))
    io.write_csv(out / "ablation_scenes.csv", SCENE_HEADER, _scene_rows(report))
    ok = [r for r in report.rows if not r.failed]
    io.plot_bars(plots / "ablation_ap25.svg", [r.name for r in ok], [r.mean("ap25") for r in ok],
                 [r.std("ap25") for r in ok])
    resolved = {"matrix": [r.config.to_dict() if r.config else {"name": r.name, "error": r.error}
                           for r in report.rows], "suite": suite}
    manifest = io.write_manifest(out / "manifest.json", resolved, suite.get("seed"),
                                 ["ablation.csv", "ablation_scenes.csv", "plots/ablation_ap25.svg"])
    _print_digest(manifest["digest"])
    for r in report.rows:
        status = f"FAILED ({r.error})" if r.failed else f"AP25 {io.fmt(r.mean('ap25'))} AP50 {io.fmt(r.mean('ap50'))}"
        print(f"{r.name}: {status}")
    if not ok:
        raise RuntimeFailure("every config in the matrix failed")
    return 0


def cmd_sweep(args) -> int:
    doc = _load_config(args.config)
    base = _config_from_doc(doc, args.config)
    try:
        values = [float(v) for v in args.values.split(",") if v.strip()]
    except ValueError:
        raise UsageError(f"--values must be comma-separated numbers, got {args.values!r}") from None
    scenes, suite = _suite(args)
    if not scenes:
        raise UsageError("the scene suite is empty")
    out = _ensure_dir(_out_path(args, "sweep"))
    plots = _ensure_dir(out / "plots")
    try:
        sweep = experiment.hyperparameter_sweep(base, args.param, values, scenes, _anchors(scenes), jobs=args.jobs)
    except ConfigurationError as exc:
        raise UsageError(str(exc)) from None
    header = ["param", "value", "status", "ap25_mean", "ap25_std", "ap50_mean", "ap50_std"]
    rows = []
    for p in sweep.points:
        if p.row.failed:
            rows.append([args.param, p.value, "FAILED", "", "", "", ""])
        else:
            rows.append([args.param, p.value, "ok", p.row.mean("ap25"), p.row.std("ap25"),
                         p.row.mean("ap50"), p.row.std("ap50")])
    io.write_csv(out / "sweep.csv", header, rows)
    ok = [p for p in sweep.points if not p.row.failed]
    io.plot_curve(plots / f"sweep_{args.param}.svg", [p.value for p in ok],
                  {"AP25": ([p.row.mean("ap25") for p in ok], [p.row.std("ap25") for p in ok]),
                   "AP50": ([p.row.mean("ap50") for p in ok], [p.row.std("ap50") for p in ok])},
                  args.param, "AP")
    resolved = {"base": base.to_dict(), "param": args.param, "values": values, "suite": suite}
    manifest = io.write_manifest(out / "manifest.json", resolved, suite.get("seed"),
                                 ["sweep.csv", f"plots/sweep_{args.param}.svg"])
    _print_digest(manifest["digest"])
    print(f"{args.param} sweep AP25 trend: {sweep.trend('ap25')}")
    if not ok:
        raise RuntimeFailure("every sweep value failed")
    return 0


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------


def _add_suite_args(p):
    p.add_argument("--scenes", help="scene JSONL file (default: generate a suite)")
    p.add_argument("--spec", help="scene spec JSON used when generating")
    p.add_argument("--count", type=int, default=DEFAULT_SCENE_COUNT, help="scenes to generate")
    p.add_argument("--seed", type=int, default=0, help="suite seed")
    p.add_argument("--jobs", type=int, default=1, help="worker processes (results do not depend on it)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="sr3d", description="Toy-scale 3D detection assignment and loss lab")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-scenes", help="generate a seeded scene suite as JSONL")
    p.add_argument("--spec", help="scene spec JSON (default spec if omitted)")
    p.add_argument("--count", type=int, default=DEFAULT_SCENE_COUNT)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", help="output JSONL path")
    p.set_defaults(func=cmd_gen_scenes)

    p = sub.add_parser("assign", help="label assignment for given predictions")
    p.add_argument("--scenes", required=True)
    p.add_argument("--predictions", required=True)
    p.add_argument("--strategy", choices=ASSIGN_STRATEGIES, default="spota")
    p.add_argument("--k", type=int, default=6)
    p.add_argument("--mu", type=float, default=1.0)
    p.add_argument("--lam", type=float, default=1.0)
    p.add_argument("--radius", type=float, help="fixed-radius rule radius (default: anchor stride)")
    p.add_argument("--out", help="output JSONL path")
    p.set_defaults(func=cmd_assign)

    p = sub.add_parser("train", help="train the toy detector on a suite")
    p.add_argument("--config", required=True)
    _add_suite_args(p)
    p.add_argument("--out", help="report directory")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate detections against scenes")
    p.add_argument("--detections", required=True)
    p.add_argument("--scenes", required=True)
    p.add_argument("--gt-iou-substitute", action="store_true",
                   help="also report scores replaced by the best same-class gt IoU")
    p.add_argument("--iou-thresholds", default="0.25,0.5")
    p.add_argument("--out", help="optional CSV path for the metrics table")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="run an ablation matrix")
    p.add_argument("--matrix", required=True)
    _add_suite_args(p)
    p.add_argument("--out", help="report directory")
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("sweep", help="sweep one hyperparameter")
    p.add_argument("--config", required=True)
    p.add_argument("--param", required=True, choices=experiment.SWEEPABLE)
    p.add_argument("--values", required=True, help="comma-separated values")
    _add_suite_args(p)
    p.add_argument("--out", help="report directory")
    p.set_defaults(func=cmd_sweep)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if getattr(args, "jobs", 1) < 1:
        parser.error("--jobs must be >= 1")
    try:
        return args.func(args)
    except (UsageError, io.FormatError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except FileNotFoundError as exc:
        print(f"error: {exc.strerror}: {exc.filename}", file=sys.stderr)
        return 2
    except EmptyEvaluationError as exc:
        print(f"error: empty evaluation: {exc}", file=sys.stderr)
        return 1
    except RuntimeFailure as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
