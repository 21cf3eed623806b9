"""A directly optimized toy detector: free per-anchor logits and box deltas.

Each anchor owns ``C`` class logits, a center offset and a log-size. Training
is plain gradient descent on the detection loss, with label assignment
recomputed from the current predictions.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field, fields

import numpy as np
from scipy.special import expit

from .. import assignment as asg
from .. import geometry, metrics
from ..assignment import AnchorSet
from ..errors import ConfigurationError, DivergenceError
from ..losses import ClsLossConfig, LossBreakdown, positives_from_assignment, total_loss, total_loss_grad
from .scene import DEFAULT_SIZE_MEANS, Scene

ASSIGNMENTS = ("fixed-radius-baseline", "spota", "spota-with-cls-cost", "spota-without-rvd")
REQUIRED_FIELDS = ("name", "assignment", "cls_loss")


@dataclass(frozen=True)
class ExperimentConfig:
    name: str
    assignment: str = "spota"
    cls_loss: str = "ras"
    k: int = 6
    mu: float = 1.0
    beta: float = 1.0
    tau: float = 0.1
    alpha: float = 0.25
    gamma: float = 2.0
    lam: float = 1.0
    radius: float | None = None  # None: the anchor's level stride
    step_size: float = 1e-2
    iterations: int = 500
    eval_every: int = 50
    refresh_interval: int = 1
    init_seed: int = 0
    init_logit: float = -2.0
    init_jitter: float = 0.1
    rescale_rcls: bool = True
    rcls_scope: str = "global"
    rank_gradient: str = "frozen"
    nms_iou: float = metrics.NMS_IOU
    score_threshold: float = metrics.SCORE_THRESHOLD
    pce_top_k: int = metrics.PCE_TOP_K

    def __post_init__(self):
        if self.assignment not in ASSIGNMENTS:
            raise ConfigurationError(f"unknown assignment strategy {self.assignment!r}")
        for name in ("k", "iterations", "eval_every", "refresh_interval", "pce_top_k"):
            v = getattr(self, name)
            if v < (0 if name == "iterations" else 1):
                raise ConfigurationError(f"{name} must be positive, got {v}")
        for name in ("mu", "tau", "step_size"):
            if not getattr(self, name) > 0:
                raise ConfigurationError(f"{name} must be positive")
        for name in ("beta", "gamma", "lam", "init_jitter"):
            if getattr(self, name) < 0:
                raise ConfigurationError(f"{name} must be non-negative")
        if self.radius is not None and not self.radius > 0:
            raise ConfigurationError("radius must be positive")
        self.loss_config()  # validates the loss fields

    def loss_config(self) -> ClsLossConfig:
        return ClsLossConfig(kind=self.cls_loss, alpha=self.alpha, gamma=self.gamma, beta=self.beta,
                             tau=self.tau, rescale_rcls=self.rescale_rcls, rcls_scope=self.rcls_scope,
                             rank_gradient=self.rank_gradient)

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        missing = [f for f in REQUIRED_FIELDS if f not in d]
        if missing:
            raise KeyError(missing[0])
        known = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in known})

    def to_dict(self) -> dict:
        return asdict(self)

    def digest(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()[:16]


@dataclass
class PredictorState:
    logits: np.ndarray
    delta_center: np.ndarray
    log_size: np.ndarray

    def copy(self) -> "PredictorState":
        return PredictorState(self.logits.copy(), self.delta_center.copy(), self.log_size.copy())

    def decode(self, anchors: AnchorSet):
        sizes = np.maximum(np.exp(self.log_size), geometry.MIN_SIZE)
        return anchors.centers + self.delta_center, sizes

    def scores(self) -> np.ndarray:
        return expit(self.logits)


def init_state(anchors: AnchorSet, num_classes: int, config: ExperimentConfig, scene_seed: int,
               size_means=DEFAULT_SIZE_MEANS) -> PredictorState:
    """Logits at ``init_logit``; each anchor starts from the mean log-size of a
    randomly drawn class, jittered."""
    rng = np.random.default_rng(np.random.SeedSequence([scene_seed & (2**64 - 1), config.init_seed]))
    n = len(anchors)
    log_means = np.log(np.asarray(size_means, dtype=float)[:num_classes])
    pick = rng.integers(num_classes, size=n)
    log_size = log_means[pick] + config.init_jitter * rng.standard_normal((n, 3))
    return PredictorState(np.full((n, num_classes), float(config.init_logit)), np.zeros((n, 3)), log_size)


def assign(config: ExperimentConfig, gts, anchors: AnchorSet, centers, sizes, scores, prior=None):
    """Label assignment for the configured strategy; ``prior`` caches the center prior."""
    if not gts:
        return asg.AssignmentResult([], [int(i) for i in anchors.ids], [])
    if config.assignment == "fixed-radius-baseline":
        radius = anchors.level_strides() if config.radius is None else config.radius
        return asg.fixed_radius_baseline_assign(gts, anchors, radius)
    if config.assignment == "spota-with-cls-cost":
        probs = np.clip(scores, 1e-9, 1 - 1e-9)
        cost = asg.spota_with_cls_cost_matrix(gts, anchors, (centers, sizes), probs, config.mu, config.lam,
                                              prior=prior)
    else:
        cost = asg.spota_cost_matrix(gts, anchors, (centers, sizes), config.mu,
                                     use_vertex_distance=config.assignment == "spota", prior=prior)
    return asg.spota_assign(cost, config.k, anchors.ids, [g.id for g in gts])


def detections(state: PredictorState, anchors: AnchorSet) -> metrics.DetectionArrays:
    """Every (anchor, class) pair as a raw pre-NMS detection."""
    centers, sizes = state.decode(anchors)
    scores = state.scores()
    n, c = scores.shape
    return metrics.DetectionArrays(np.repeat(centers, c, axis=0), np.repeat(sizes, c, axis=0),
                                   np.tile(np.arange(c), n), scores.ravel())


@dataclass
class EvalMetrics:
    ap25: float
    ap50: float
    pce: float
    scatter: np.ndarray


def nms_detections(state: PredictorState, anchors: AnchorSet, config: ExperimentConfig):
    centers, sizes = state.decode(anchors)
    scores = state.scores()
    rows, cls = metrics.nms_shared_boxes(centers, sizes, scores, config.nms_iou, config.score_threshold)
    return metrics.DetectionArrays(centers[rows], sizes[rows], cls, scores[rows, cls])


def evaluate(kept: metrics.DetectionArrays, gt_arr: metrics.GroundTruthArrays, config: ExperimentConfig):
    """AP25, AP50 and PCE of post-NMS detections."""
    _, ap25 = metrics.average_precision_arrays(kept, gt_arr, 0.25)
    _, ap50 = metrics.average_precision_arrays(kept, gt_arr, 0.5)
    p = metrics.pce_arrays(kept, gt_arr, config.pce_top_k)
    return EvalMetrics(ap25, ap50, p.mean, p.pairs)


@dataclass
class EpochRecord:
    epoch: int
    iteration: int
    loss: LossBreakdown
    aic: float
    ap25: float
    ap50: float
    pce: float
    num_positives: int


@dataclass
class Trajectory:
    epochs: list[EpochRecord] = field(default_factory=list)
    states: list[PredictorState] = field(default_factory=list)
    final_state: PredictorState | None = None
    final_scatter: np.ndarray | None = None
    positives_valid: bool = True


def _positive_aic(pos, scores):
    if len(pos) == 0:
        return float("nan")
    return float(np.mean(np.abs(scores[pos.anchor, pos.cls] - pos.q)))


def optimize(scene: Scene, anchors: AnchorSet, config: ExperimentConfig, num_classes: int = 5,
             keep_states: bool = False, track_ap: bool = True) -> Trajectory:
    """Train the toy detector on one scene.

    Losses and positive-sample AIC are logged every ``eval_every``
    iterations; AP and PCE are logged there too unless ``track_ap`` is off,
    in which case only the final epoch is evaluated.
    """
    gts = scene.objects
    gt_arr = metrics.GroundTruthArrays.from_list(gts)
    loss_cfg = config.loss_config()
    state = init_state(anchors, num_classes, config, scene.seed)
    traj = Trajectory()
    anchor_index = {int(a): i for i, a in enumerate(anchors.ids)}
    initial_total = None
    result = None
    prior = None
    if gts:
        prior = asg.center_prior(anchors.centers[None], gt_arr.centers[:, None], config.mu)

    for it in range(config.iterations + 1):
        centers, sizes = state.decode(anchors)
        scores = state.scores()
        # the fixed-radius rule ignores predictions, so one assignment serves every step
        static = config.assignment == "fixed-radius-baseline" and result is not None
        if not static and (result is None or it % config.refresh_interval == 0):
            result = assign(config, gts, anchors, centers, sizes, scores, prior)
            n_pos = len(result.positives)
            if n_pos + len(result.negatives) != len(anchors):
                traj.positives_valid = False
        pos = positives_from_assignment(result, gts, centers, sizes, anchor_index)

        if it % config.eval_every == 0 or it == config.iterations:
            loss = total_loss(centers, sizes, scores, result, gts, loss_cfg, anchor_index, pos)
            if track_ap or it == config.iterations:
                ev = evaluate(nms_detections(state, anchors, config), gt_arr, config)
            else:
                ev = EvalMetrics(float("nan"), float("nan"), float("nan"), None)
            traj.epochs.append(EpochRecord(len(traj.epochs), it, loss, _positive_aic(pos, scores),
                                           ev.ap25, ev.ap50, ev.pce, len(pos)))
            if ev.scatter is not None:
                traj.final_scatter = ev.scatter
            if keep_states:
                traj.states.append(state.copy())
            if initial_total is None:
                initial_total = max(loss.total, 1e-12)
            elif not np.isfinite(loss.total) or loss.total > 1e3 * initial_total:
                traj.final_state = state
                raise DivergenceError(f"loss {loss.total:.3g} exceeded 1e3 x initial", traj)
        if it == config.iterations:
            break

        g_scores, g_c, g_s = total_loss_grad(centers, sizes, scores, result, gts, loss_cfg,
                                             anchor_index, pos)
        state.logits -= config.step_size * g_scores * scores * (1.0 - scores)
        state.delta_center -= config.step_size * g_c
        state.log_size -= config.step_size * g_s * sizes
        if not (np.all(np.isfinite(state.logits)) and np.all(np.isfinite(state.delta_center))
                and np.all(np.isfinite(state.log_size)) and np.all(state.log_size < np.log(1e6))):
            traj.final_state = state
            raise DivergenceError(f"parameters became non-finite at iteration {it + 1}", traj)

    traj.final_state = state
    return traj
