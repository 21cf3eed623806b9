"""Label assignment: cost matrices and top-k positive selection.

The spatial-prioritized cost uses geometry only,

    C[i, j] = (1 - exp(-mu * |c_j - c_i^gt|^2)) * (-ln IoU_ij + R_VD_ij),

and each ground truth takes its ``k`` cheapest anchors. The OTA-style cost
(classification cross-entropy plus IoU loss) is kept for ablations.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import geometry
from .errors import ConfigurationError, DomainError, ShapeError
from .geometry import Box3

IOU_EPS = 1e-7
STRATEGIES = ("spota", "spota-with-cls-cost", "spota-without-rvd", "ota", "fixed-radius")


@dataclass(frozen=True)
class GroundTruthObject:
    id: int
    box: Box3
    class_id: int


@dataclass
class AnchorSet:
    ids: np.ndarray
    centers: np.ndarray
    levels: np.ndarray
    strides: tuple[float, ...] = ()

    def __post_init__(self):
        self.ids = np.asarray(self.ids, dtype=np.int64)
        self.centers = np.asarray(self.centers, dtype=float).reshape(-1, 3)
        self.levels = np.asarray(self.levels, dtype=np.int64)
        if not (len(self.ids) == len(self.centers) == len(self.levels)):
            raise ShapeError("anchor ids, centers and levels differ in length")
        if len(np.unique(self.ids)) != len(self.ids):
            raise ShapeError("anchor ids must be unique")

    def __len__(self):
        return len(self.ids)

    def level_strides(self) -> np.ndarray:
        """Stride of each anchor's level."""
        return np.asarray(self.strides, dtype=float)[self.levels]


@dataclass
class AssignmentResult:
    positives: list[tuple[int, int]]
    negatives: list[int]
    costs: list[float] = field(default_factory=list)

    def positive_map(self) -> dict[int, int]:
        return dict(self.positives)


def _pred_arrays(pred_boxes, n_anchors):
    if isinstance(pred_boxes, tuple) and len(pred_boxes) == 2:
        centers, sizes = (np.asarray(a, dtype=float) for a in pred_boxes)
    else:
        centers, sizes = geometry.boxes_to_arrays(list(pred_boxes))
    if len(centers) != n_anchors or len(sizes) != n_anchors:
        raise ShapeError(
            f"{len(centers)} predictions for {n_anchors} anchors; they must be indexed identically"
        )
    return centers, sizes


def _gt_arrays(gts):
    centers, sizes = geometry.boxes_to_arrays([g.box for g in gts])
    classes = np.array([g.class_id for g in gts], dtype=np.int64)
    return centers, sizes, classes


def center_prior(anchor_center, gt_center, mu: float = 1.0):
    """``1 - exp(-mu d^2)``; broadcasts over leading dimensions."""
    if not mu > 0:
        raise ConfigurationError(f"mu must be positive, got {mu}")
    d2 = np.sum((np.asarray(anchor_center, float) - np.asarray(gt_center, float)) ** 2, axis=-1)
    return -np.expm1(-mu * d2)


def iou_cost(iou_values):
    return -np.log(np.maximum(iou_values, IOU_EPS))


def regression_cost(pred: Box3, gt: Box3) -> float:
    return float(iou_cost(geometry.iou3d(pred, gt)))


def _pairwise(gts, anchors, pred_boxes):
    pc, ps = _pred_arrays(pred_boxes, len(anchors))
    gc, gs, _ = _gt_arrays(gts)
    args = (pc[None], ps[None], gc[:, None], gs[:, None])
    return args, gc


def spota_cost_matrix(gts, anchors: AnchorSet, pred_boxes, mu: float = 1.0,
                      use_vertex_distance: bool = True, prior=None) -> np.ndarray:
    """``[num_gt, num_anchors]`` geometric cost matrix.

    ``pred_boxes`` is either a list of Box3 or a ``(centers, sizes)`` pair,
    indexed like ``anchors``. ``prior`` may carry a precomputed center-prior
    matrix, which depends only on anchor and gt centers.
    """
    args, gc = _pairwise(gts, anchors, pred_boxes)
    if len(gts) == 0:
        return np.zeros((0, len(anchors)))
    if prior is None:
        prior = center_prior(anchors.centers[None], gc[:, None], mu)
    if use_vertex_distance:
        iou_v, rvd = geometry.pairwise_terms(*args)
        return prior * (iou_cost(iou_v) + rvd)
    return prior * iou_cost(geometry.iou(*args))


def _check_probabilities(scores):
    scores = np.asarray(scores, dtype=float)
    if np.any(scores <= 0) or np.any(scores >= 1):
        raise DomainError("class scores must lie in the open interval (0, 1)")
    return scores


def classification_cost(gts, class_scores) -> np.ndarray:
    """Cross-entropy of each anchor's score for each gt's class against target 1."""
    scores = _check_probabilities(class_scores)
    classes = np.array([g.class_id for g in gts], dtype=np.int64)
    return -np.log(scores[:, classes].T)


def ota_cost_matrix(gts, anchors: AnchorSet, pred_boxes, class_scores,
                    lam: float = 1.0) -> np.ndarray:
    args, _ = _pairwise(gts, anchors, pred_boxes)
    if len(gts) == 0:
        return np.zeros((0, len(anchors)))
    cls = classification_cost(gts, class_scores)
    return lam * cls + iou_cost(geometry.iou(*args))


def spota_with_cls_cost_matrix(gts, anchors, pred_boxes, class_scores, mu=1.0, lam=1.0, prior=None):
    """Geometric cost with the classification term added back in."""
    geo = spota_cost_matrix(gts, anchors, pred_boxes, mu, prior=prior)
    if len(gts) == 0:
        return geo
    return geo + lam * classification_cost(gts, class_scores)


def spota_assign(cost, k: int = 6, anchor_ids=None, gt_ids=None) -> AssignmentResult:
    """Top-k least-cost anchors per gt, duplicates resolved to the cheapest gt.

    Ties within a row go to the lower anchor id; an anchor claimed by several
    gts at equal cost goes to the lower gt id.
    """
    if k < 1:
        raise ConfigurationError(f"k must be >= 1, got {k}")
    cost = np.asarray(cost, dtype=float)
    if cost.ndim != 2:
        raise ShapeError("cost must be a [num_gt, num_anchors] matrix")
    n_gt, n_anchor = cost.shape
    anchor_ids = np.arange(n_anchor) if anchor_ids is None else np.asarray(anchor_ids)
    gt_ids = np.arange(n_gt) if gt_ids is None else np.asarray(gt_ids)
    if len(anchor_ids) != n_anchor or len(gt_ids) != n_gt:
        raise ShapeError("id arrays do not match cost matrix shape")
    if not np.all(np.isfinite(cost)):
        raise DomainError("cost matrix has non-finite entries")

    kk = min(k, n_anchor)
    owner = np.full(n_anchor, -1, dtype=np.int64)
    owner_cost = np.full(n_anchor, np.inf)
    for i in np.argsort(gt_ids, kind="stable"):
        row = cost[i]
        if kk < n_anchor:
            kth = row[np.argpartition(row, kk - 1)[:kk]].max()
            cand = np.flatnonzero(row <= kth)
        else:
            cand = np.arange(n_anchor)
        # cost ties go to the lower anchor id
        chosen = cand[np.lexsort((anchor_ids[cand], row[cand]))[:kk]]
        better = row[chosen] < owner_cost[chosen]
        owner[chosen[better]] = i
        owner_cost[chosen[better]] = row[chosen[better]]

    id_order = np.argsort(anchor_ids, kind="stable")
    pos = id_order[owner[id_order] >= 0]
    neg = id_order[owner[id_order] < 0]
    positives = list(zip(anchor_ids[pos].tolist(), gt_ids[owner[pos]].tolist()))
    return AssignmentResult(positives, anchor_ids[neg].tolist(), owner_cost[pos].tolist())


def fixed_radius_baseline_assign(gts, anchors: AnchorSet, radius) -> AssignmentResult:
    """Anchors within ``radius`` of a gt center become positives of the nearest one.

    ``radius`` may be a scalar or a per-anchor array (e.g. the level stride).
    Equidistant anchors go to the lower gt id.
    """
    radius = np.broadcast_to(np.asarray(radius, dtype=float), (len(anchors),))
    if np.any(radius <= 0):
        raise ConfigurationError("radius must be positive")
    if len(gts) == 0:
        return AssignmentResult([], [int(a) for a in np.sort(anchors.ids)], [])
    gc, _, _ = _gt_arrays(gts)
    gt_ids = np.array([g.id for g in gts])
    order = np.argsort(gt_ids, kind="stable")
    gc, gt_ids = gc[order], gt_ids[order]
    dist = np.linalg.norm(anchors.centers[None] - gc[:, None], axis=-1)
    nearest = np.argmin(dist, axis=0)
    best = dist[nearest, np.arange(len(anchors))]
    inside = best <= radius

    order = np.argsort(anchors.ids, kind="stable")
    pos = order[inside[order]]
    neg = order[~inside[order]]
    positives = list(zip(anchors.ids[pos].tolist(), gt_ids[nearest[pos]].tolist()))
    costs = best[pos].tolist()
    negatives = anchors.ids[neg].tolist()
    return AssignmentResult(positives, negatives, costs)
