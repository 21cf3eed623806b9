"""Ablation matrix and hyperparameter sweeps over a scene suite.

Work is split into (config, scene) cells that may run in worker processes;
results are always reduced in (config, scene) index order, so the worker
count never changes the numbers.
"""

from __future__ import annotations

import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.stats import binomtest

from .. import geometry, metrics
from ..assignment import AnchorSet
from ..errors import ConfigurationError, DivergenceError
from .detector import ExperimentConfig, PredictorState, nms_detections, optimize
from .scene import Scene

log = logging.getLogger(__name__)

METRICS = ("ap25", "ap50", "aic", "pce")
SWEEPABLE = ("k", "mu", "beta", "tau")


@dataclass
class SceneResult:
    scene_id: int
    ap25: float
    ap50: float
    aic: float
    pce: float
    ap50_gt_iou: float
    num_positives: int


def substituted_detections(state: PredictorState, anchors: AnchorSet, gt_arr: metrics.GroundTruthArrays,
                           config: ExperimentConfig) -> metrics.DetectionArrays:
    """Post-NMS detections after every class channel's score is replaced by the
    best same-class gt IoU of its box (0 for classes without gts)."""
    centers, sizes = state.decode(anchors)
    n_cls = state.logits.shape[1]
    scores = np.zeros((len(centers), n_cls))
    for k in range(n_cls):
        gi = np.flatnonzero(gt_arr.classes == k)
        if len(gi):
            ov = geometry.iou(centers[:, None], sizes[:, None], gt_arr.centers[gi][None], gt_arr.sizes[gi][None])
            scores[:, k] = ov.max(axis=1)
    rows, cls = metrics.nms_shared_boxes(centers, sizes, scores, config.nms_iou, config.score_threshold)
    return metrics.DetectionArrays(centers[rows], sizes[rows], cls, scores[rows, cls])


def run_config_on_scene(scene: Scene, anchors: AnchorSet, config: ExperimentConfig,
                        num_classes: int = 5) -> SceneResult:
    """Train on one scene and evaluate the final state, with learned and gt-IoU scores."""
    traj = optimize(scene, anchors, config, num_classes=num_classes, track_ap=False)
    last = traj.epochs[-1]
    gt_arr = metrics.GroundTruthArrays.from_list(scene.objects)
    sub = substituted_detections(traj.final_state, anchors, gt_arr, config)
    _, ap50_sub = metrics.average_precision_arrays(sub, gt_arr, 0.5)
    return SceneResult(scene.scene_id, last.ap25, last.ap50, last.aic, last.pce, ap50_sub, last.num_positives)


def _cell(args):
    scene, anchors, config, num_classes = args
    try:
        return run_config_on_scene(scene, anchors, config, num_classes)
    except Exception as exc:  # recorded per cell; never aborts the matrix
        return f"{type(exc).__name__}: {exc}"


def _map(tasks, jobs):
    if jobs <= 1 or len(tasks) <= 1:
        return [_cell(t) for t in tasks]
    with ProcessPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(_cell, tasks, chunksize=1))


@dataclass
class AblationRow:
    name: str
    config: ExperimentConfig | None
    scenes: list[SceneResult] = field(default_factory=list)
    error: str | None = None
    # filled relative to the reference row
    deltas: dict = field(default_factory=dict)
    wins: int = 0
    losses: int = 0
    sign_p: float = float("nan")

    @property
    def failed(self) -> bool:
        return self.error is not None

    def values(self, metric: str) -> np.ndarray:
        return np.array([getattr(s, metric) for s in self.scenes], dtype=float)

    def mean(self, metric: str) -> float:
        v = self.values(metric)
        v = v[np.isfinite(v)]
        return float(v.mean()) if len(v) else float("nan")

    def std(self, metric: str) -> float:
        v = self.values(metric)
        v = v[np.isfinite(v)]
        return float(v.std(ddof=1)) if len(v) > 1 else 0.0


@dataclass
class ExperimentReport:
    rows: list[AblationRow]
    scene_ids: list[int]

    def row(self, name: str) -> AblationRow:
        for r in self.rows:
            if r.name == name:
                return r
        raise KeyError(name)


def sign_test(deltas) -> tuple[int, int, float]:
    """One-sided sign test that positive deltas dominate; ties are dropped."""
    d = np.asarray(deltas, dtype=float)
    d = d[np.isfinite(d)]
    wins, losses = int(np.sum(d > 0)), int(np.sum(d < 0))
    if wins + losses == 0:
        return wins, losses, 1.0
    return wins, losses, float(binomtest(wins, wins + losses, 0.5, alternative="greater").pvalue)


def _resolve(entry) -> tuple[str, ExperimentConfig | None, str | None]:
    if isinstance(entry, ExperimentConfig):
        return entry.name, entry, None
    name = str(entry.get("name", "?")) if isinstance(entry, dict) else "?"
    try:
        return name, ExperimentConfig.from_dict(entry), None
    except KeyError as exc:
        return name, None, f"missing config field {exc.args[0]!r}"
    except (ConfigurationError, TypeError, ValueError) as exc:
        return name, None, str(exc)


def run_ablation(matrix, scenes: list[Scene], anchors: AnchorSet, jobs: int = 1,
                 num_classes: int = 5) -> ExperimentReport:
    """Evaluate every config of ``matrix`` on every scene.

    ``matrix`` holds ExperimentConfigs or config dicts; a dict that fails to
    validate marks its row FAILED without affecting the others. Deltas and
    the sign test are taken against the first row.
    """
    if not scenes:
        raise ConfigurationError("the scene suite is empty")
    resolved = [_resolve(e) for e in matrix]
    tasks, owners = [], []
    for i, (_, cfg, err) in enumerate(resolved):
        if err is None:
            for s in scenes:
                tasks.append((s, anchors, cfg, num_classes))
                owners.append(i)
    results = _map(tasks, jobs)

    rows = [AblationRow(name, cfg, error=err) for name, cfg, err in resolved]
    for i, res in zip(owners, results):
        row = rows[i]
        if isinstance(res, str):
            if row.error is None:
                row.error = res
            log.warning("config %s failed: %s", row.name, res)
        elif row.error is None:
            row.scenes.append(res)
    for row in rows:
        if row.failed:
            row.scenes = []
    _paired_deltas(rows)
    return ExperimentReport(rows, [s.scene_id for s in scenes])


def _paired_deltas(rows):
    ref = rows[0] if rows and not rows[0].failed else None
    for row in rows:
        if ref is None or row.failed:
            continue
        for m in METRICS + ("ap50_gt_iou",):
            row.deltas[m] = float(np.nanmean(row.values(m) - ref.values(m)))
        row.wins, row.losses, row.sign_p = sign_test(row.values("ap25") - ref.values("ap25"))


@dataclass
class SweepPoint:
    value: float
    row: AblationRow


@dataclass
class SweepReport:
    param: str
    points: list[SweepPoint]

    def trend(self, metric: str = "ap25") -> str:
        """'increasing', 'decreasing', 'flat' or 'non-monotone' across the sweep values."""
        means = [p.row.mean(metric) for p in self.points if not p.row.failed]
        if len(means) < 2:
            return "flat"
        d = np.diff(means)
        if np.all(d == 0):
            return "flat"
        if np.all(d >= 0):
            return "increasing"
        if np.all(d <= 0):
            return "decreasing"
        return "non-monotone"


def hyperparameter_sweep(base: ExperimentConfig, param: str, values, scenes: list[Scene],
                         anchors: AnchorSet, jobs: int = 1, num_classes: int = 5) -> SweepReport:
    if param not in SWEEPABLE:
        raise ConfigurationError(f"cannot sweep {param!r}; choose one of {', '.join(SWEEPABLE)}")
    values = list(values)
    if not values:
        raise ConfigurationError("sweep needs at least one value")
    matrix = []
    for v in values:
        v = int(v) if param == "k" else float(v)
        try:
            matrix.append(replace(base, name=f"{param}={v:g}", **{param: v}))
        except ConfigurationError as exc:
            raise ConfigurationError(f"invalid {param} value {v}: {exc}") from None
    report = run_ablation(matrix, scenes, anchors, jobs, num_classes)
    return SweepReport(param, [SweepPoint(float(v), r) for v, r in zip(values, report.rows)])


def final_state_detections(scene: Scene, anchors: AnchorSet, config: ExperimentConfig, num_classes: int = 5):
    """Train and return ``(trajectory, post-NMS detections)`` for one scene."""
    traj = optimize(scene, anchors, config, num_classes=num_classes, track_ap=True)
    return traj, nms_detections(traj.final_state, anchors, config)



@dataclass
class TrainResult:
    scene_id: int
    epochs: list
    detections: metrics.DetectionArrays | None
    scatter: np.ndarray | None
    error: str | None = None


def _train_cell(args):
    scene, anchors, config, num_classes = args
    try:
        traj = optimize(scene, anchors, config, num_classes=num_classes, track_ap=True)
    except DivergenceError as exc:
        return TrainResult(scene.scene_id, exc.trajectory.epochs, None, None, str(exc))
    dets = nms_detections(traj.final_state, anchors, config)
    return TrainResult(scene.scene_id, traj.epochs, dets, traj.final_scatter)


def train_suite(scenes: list[Scene], anchors: AnchorSet, config: ExperimentConfig, jobs: int = 1,
                num_classes: int = 5) -> list[TrainResult]:
    """Full-trajectory training of every scene, results in scene order.

    A diverging scene is reported through ``TrainResult.error`` with its
    partial trajectory; the other scenes still run.
    """
    tasks = [(s, anchors, config, num_classes) for s in scenes]
    if jobs <= 1 or len(tasks) <= 1:
        return [_train_cell(t) for t in tasks]
    with ProcessPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(_train_cell, tasks, chunksize=1))
