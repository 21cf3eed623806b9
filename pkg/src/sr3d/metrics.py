"""Inference-side evaluation: NMS, AP/mAP, AIC, PCE and gt-IoU score substitution.

Each public function accepts lists of :class:`Detection`; the ``*_arrays``
variants do the work on stacked numpy arrays and are what the trainer uses.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import geometry
from .errors import ConfigurationError, EmptyEvaluationError
from .geometry import Box3

NMS_IOU = 0.5
SCORE_THRESHOLD = 0.01
PCE_TOP_K = 30


@dataclass(frozen=True)
class Detection:
    box: Box3
    class_id: int
    score: float

    def __post_init__(self):
        if not 0.0 <= self.score <= 1.0:
            raise ValueError(f"detection score must lie in [0, 1], got {self.score}")


@dataclass(frozen=True)
class ConsistencyRecord:
    p: float
    q: float


@dataclass
class DetectionArrays:
    centers: np.ndarray
    sizes: np.ndarray
    classes: np.ndarray
    scores: np.ndarray

    def __len__(self):
        return len(self.scores)

    @classmethod
    def from_list(cls, dets):
        c, s = geometry.boxes_to_arrays([d.box for d in dets])
        return cls(c, s, np.array([d.class_id for d in dets], dtype=np.int64),
                   np.array([d.score for d in dets], dtype=float))

    def to_list(self):
        return [
            Detection(Box3(tuple(c), tuple(s)), int(k), float(p))
            for c, s, k, p in zip(self.centers, self.sizes, self.classes, self.scores)
        ]

    def take(self, idx):
        return DetectionArrays(self.centers[idx], self.sizes[idx], self.classes[idx], self.scores[idx])


@dataclass
class GroundTruthArrays:
    centers: np.ndarray
    sizes: np.ndarray
    classes: np.ndarray

    @classmethod
    def from_list(cls, gts):
        c, s = geometry.boxes_to_arrays([g.box for g in gts])
        return cls(c, s, np.array([g.class_id for g in gts], dtype=np.int64))

    def __len__(self):
        return len(self.classes)


def _check_unit(name, value):
    if not 0.0 <= value <= 1.0:
        raise ConfigurationError(f"{name} must lie in [0, 1], got {value}")


def _score_order(scores):
    # descending score, ties by original index
    return np.lexsort((np.arange(len(scores)), -scores))


def nms_arrays(dets: DetectionArrays, iou_threshold=NMS_IOU, score_threshold=SCORE_THRESHOLD):
    """Indices of kept detections, sorted by descending score."""
    _check_unit("iou_threshold", iou_threshold)
    _check_unit("score_threshold", score_threshold)
    keep = []
    candidates = np.flatnonzero(dets.scores >= score_threshold)
    for k in np.unique(dets.classes[candidates]):
        idx = candidates[dets.classes[candidates] == k]
        idx = idx[_score_order(dets.scores[idx])]
        while idx.size:
            top = idx[0]
            keep.append(top)
            rest = idx[1:]
            ov = geometry.iou(dets.centers[top], dets.sizes[top], dets.centers[rest], dets.sizes[rest])
            idx = rest[ov < iou_threshold]
    keep = np.asarray(keep, dtype=np.int64)
    return keep[_score_order(dets.scores[keep])]


def nms_shared_boxes(centers, sizes, scores, iou_threshold=NMS_IOU, score_threshold=SCORE_THRESHOLD):
    """NMS over ``[num_boxes, num_classes]`` scores where every class shares the
    same box per row (one box, many class channels).

    Returns ``(rows, classes)`` of the kept detections sorted by descending
    score; equivalent to :func:`nms_arrays` on the flattened detections.
    """
    _check_unit("iou_threshold", iou_threshold)
    _check_unit("score_threshold", score_threshold)
    n, n_cls = scores.shape
    live = np.flatnonzero((scores >= score_threshold).any(axis=1))
    c, s = centers[live], sizes[live]
    suppress = geometry.iou_matrix(c, s) >= iou_threshold
    rows, classes = [], []
    for k in range(n_cls):
        cand = np.flatnonzero(scores[live, k] >= score_threshold)
        order = cand[_score_order(scores[live[cand], k])]
        dead = np.ones(len(live), dtype=bool)
        dead[cand] = False
        for i in order:
            if dead[i]:
                continue
            rows.append(live[i])
            classes.append(k)
            dead |= suppress[i]
    rows = np.asarray(rows, dtype=np.int64)
    classes = np.asarray(classes, dtype=np.int64)
    flat = rows * n_cls + classes
    order = np.lexsort((flat, -scores[rows, classes]))
    return rows[order], classes[order]


def nms(dets, iou_threshold=NMS_IOU, score_threshold=SCORE_THRESHOLD):
    arr = DetectionArrays.from_list(dets)
    return [dets[i] for i in nms_arrays(arr, iou_threshold, score_threshold)]


def match_detections(dets: DetectionArrays, gts: GroundTruthArrays, iou_threshold):
    """TP flags per class, detections taken in descending-score order.

    Returns ``{class: (sorted_scores, tp_flags, num_gt)}``. Each detection takes the
    highest-IoU still-unmatched gt of its class at or above the threshold;
    equal IoUs go to the lower gt index.
    """
    out = {}
    classes = np.union1d(np.unique(dets.classes), np.unique(gts.classes))
    for k in classes:
        di = np.flatnonzero(dets.classes == k)
        di = di[_score_order(dets.scores[di])]
        gi = np.flatnonzero(gts.classes == k)
        tp = np.zeros(len(di), dtype=bool)
        if len(di) and len(gi):
            ov = geometry.iou(dets.centers[di][:, None], dets.sizes[di][:, None],
                              gts.centers[gi][None], gts.sizes[gi][None])
            ov = np.where(ov >= iou_threshold, ov, -1.0)
            matched = np.zeros(len(gi), dtype=bool)
            for row in np.flatnonzero(ov.max(axis=1) >= 0):
                cand = np.where(matched, -1.0, ov[row])
                j = int(np.argmax(cand))
                if cand[j] >= 0:
                    matched[j] = True
                    tp[row] = True
                    if matched.all():
                        break
        out[int(k)] = (dets.scores[di], tp, len(gi))
    return out


def ap_from_flags(tp, n_gt):
    """All-point interpolated area under the precision-recall curve."""
    if n_gt == 0:
        raise EmptyEvaluationError("average precision needs at least one gt")
    if len(tp) == 0:
        return 0.0
    tps = np.cumsum(tp)
    fps = np.cumsum(~tp)
    recall = tps / n_gt
    precision = tps / (tps + fps)
    envelope = np.maximum.accumulate(precision[::-1])[::-1]
    d_recall = np.diff(np.concatenate([[0.0], recall]))
    return float(np.sum(d_recall * envelope))


def average_precision_arrays(dets: DetectionArrays, gts: GroundTruthArrays, iou_threshold=0.25):
    if len(gts) == 0:
        raise EmptyEvaluationError("no ground truths to evaluate against")
    per_class = {}
    for k, (_, tp, n_gt) in match_detections(dets, gts, iou_threshold).items():
        if n_gt:
            per_class[k] = ap_from_flags(tp, n_gt)
    return per_class, float(np.mean(list(per_class.values())))


def average_precision(dets, gts, iou_threshold=0.25):
    """Per-class AP and the unweighted mean over classes that have gts."""
    return average_precision_arrays(DetectionArrays.from_list(dets), GroundTruthArrays.from_list(gts),
                                    iou_threshold)


def aic(records) -> float:
    """Mean ``|p - q|``; accepts ConsistencyRecords or ``(p, q)`` pairs."""
    if len(records) == 0:
        raise EmptyEvaluationError("AIC of an empty record list")
    p = np.array([r.p if isinstance(r, ConsistencyRecord) else r[0] for r in records], float)
    q = np.array([r.q if isinstance(r, ConsistencyRecord) else r[1] for r in records], float)
    return float(np.mean(np.abs(p - q)))


def best_same_class_iou(dets: DetectionArrays, gts: GroundTruthArrays) -> np.ndarray:
    best = np.zeros(len(dets))
    if len(dets) == 0 or len(gts) == 0:
        return best
    for k in np.unique(dets.classes):
        di = np.flatnonzero(dets.classes == k)
        gi = np.flatnonzero(gts.classes == k)
        if len(gi) == 0:
            continue
        ov = geometry.iou(dets.centers[di][:, None], dets.sizes[di][:, None],
                          gts.centers[gi][None], gts.sizes[gi][None])
        best[di] = ov.max(axis=1)
    return best


def top_k_per_class(dets: DetectionArrays, k=PCE_TOP_K) -> np.ndarray:
    keep = []
    for c in np.unique(dets.classes):
        idx = np.flatnonzero(dets.classes == c)
        keep.extend(idx[_score_order(dets.scores[idx])][:k])
    keep = np.asarray(keep, dtype=np.int64)
    return keep[_score_order(dets.scores[keep])]


@dataclass
class PCEResult:
    errors: np.ndarray
    mean: float
    pairs: np.ndarray  # (score, iou) rows


def pce_arrays(dets: DetectionArrays, gts: GroundTruthArrays, top_k: int | None = PCE_TOP_K) -> PCEResult:
    if top_k is not None:
        dets = dets.take(top_k_per_class(dets, top_k))
    ious = best_same_class_iou(dets, gts)
    errors = np.abs(dets.scores - ious)
    mean = float(errors.mean()) if len(errors) else 0.0
    return PCEResult(errors, mean, np.column_stack([dets.scores, ious]))


def pce(dets, gts, top_k: int | None = PCE_TOP_K) -> PCEResult:
    """Per-detection ``|score - IoU|`` on the top-scored detections of each class."""
    return pce_arrays(DetectionArrays.from_list(dets), GroundTruthArrays.from_list(gts), top_k)


def gt_score_substitution_arrays(dets: DetectionArrays, gts: GroundTruthArrays) -> DetectionArrays:
    return DetectionArrays(dets.centers, dets.sizes, dets.classes, best_same_class_iou(dets, gts))


def gt_score_substitution(dets, gts):
    """Replace each score by the IoU with its best same-class gt (0 if none)."""
    arr = gt_score_substitution_arrays(DetectionArrays.from_list(dets), GroundTruthArrays.from_list(gts))
    return arr.to_list()
