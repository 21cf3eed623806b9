"""Classification and regression losses with analytic gradients.

All classification gradients are taken w.r.t. the probability ``sigma``;
callers working in logit space multiply by ``sigma * (1 - sigma)``.

The self-distillation term is implemented as a loss (to be minimized):

    rdl(sigma) = -[(1 - r_reg)^beta * q * ln(sigma) + q * (1 - q) * ln(1 - sigma)]

and each positive blends focal loss and ``rdl`` with a weight derived from
its confidence rank among the positives.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import geometry
from .errors import ConfigurationError, DomainError, ShapeError
from .ranking import rank_weight, soft_normalized_rank, soft_rank_gradient

SCORE_EPS = 1e-7
CLS_LOSSES = ("focal-only", "ras")


def clamp_scores(sigma):
    return np.clip(np.asarray(sigma, dtype=float), SCORE_EPS, 1.0 - SCORE_EPS)


def _clamp_mask(sigma):
    s = np.asarray(sigma, dtype=float)
    return (s >= SCORE_EPS) & (s <= 1.0 - SCORE_EPS)


def focal_loss(sigma, target, alpha: float = 0.25, gamma: float = 2.0):
    s = clamp_scores(sigma)
    t = np.asarray(target)
    pos = -alpha * (1.0 - s) ** gamma * np.log(s)
    neg = -(1.0 - alpha) * s**gamma * np.log1p(-s)
    return np.where(t == 1, pos, neg)


def focal_loss_grad(sigma, target, alpha: float = 0.25, gamma: float = 2.0):
    """d focal_loss / d sigma (zero where sigma was clamped)."""
    s = clamp_scores(sigma)
    t = np.asarray(target)
    pos = alpha * (gamma * (1.0 - s) ** (gamma - 1) * np.log(s) - (1.0 - s) ** gamma / s)
    neg = -(1.0 - alpha) * (gamma * s ** (gamma - 1) * np.log1p(-s) - s**gamma / (1.0 - s))
    return np.where(t == 1, pos, neg) * _clamp_mask(sigma)


def _rdl_coefficients(q, r_reg, beta):
    q = np.asarray(q, dtype=float)
    r = np.asarray(r_reg, dtype=float)
    if np.any((q < 0) | (q > 1)) or not np.all(np.isfinite(q)):
        raise DomainError("localization quality q must lie in [0, 1]")
    if np.any((r < 0) | (r > 1)) or not np.all(np.isfinite(r)):
        raise DomainError("rank weight r_reg must lie in [0, 1]")
    if beta < 0:
        raise ConfigurationError("beta must be non-negative")
    pull = (1.0 - r) ** beta * q
    push = q * (1.0 - q)
    return pull, push


def rdl(sigma, q, r_reg, beta: float = 1.0):
    pull, push = _rdl_coefficients(q, r_reg, beta)
    s = clamp_scores(sigma)
    return -(pull * np.log(s) + push * np.log1p(-s))


def rdl_grad(sigma, q, r_reg, beta: float = 1.0):
    pull, push = _rdl_coefficients(q, r_reg, beta)
    s = clamp_scores(sigma)
    return (-pull / s + push / (1.0 - s)) * _clamp_mask(sigma)


def rdl_stationary_point(q, r_reg, beta: float = 1.0):
    """Minimizer of ``rdl`` in sigma when both coefficients are positive."""
    pull, push = _rdl_coefficients(q, r_reg, beta)
    return pull / (pull + push)


@dataclass(frozen=True)
class ClsLossConfig:
    kind: str = "ras"
    alpha: float = 0.25
    gamma: float = 2.0
    beta: float = 1.0
    tau: float = 0.1
    rescale_rcls: bool = True
    rcls_scope: str = "global"  # or "per-gt"
    rank_gradient: str = "frozen"  # or "full"

    def __post_init__(self):
        if self.kind not in CLS_LOSSES:
            raise ConfigurationError(f"unknown classification loss {self.kind!r}")
        if self.rcls_scope not in ("global", "per-gt"):
            raise ConfigurationError(f"unknown r_cls scope {self.rcls_scope!r}")
        if self.rank_gradient not in ("frozen", "full"):
            raise ConfigurationError(f"unknown rank gradient mode {self.rank_gradient!r}")
        if self.gamma < 0 or self.beta < 0 or not self.tau > 0:
            raise ConfigurationError("gamma, beta must be >= 0 and tau > 0")


@dataclass
class PositiveSet:
    """Positives as parallel arrays: anchor row, assigned class, gt index, IoU."""

    anchor: np.ndarray
    cls: np.ndarray
    gt: np.ndarray
    q: np.ndarray

    def __post_init__(self):
        self.anchor = np.asarray(self.anchor, dtype=np.int64).ravel()
        self.cls = np.asarray(self.cls, dtype=np.int64).ravel()
        self.gt = np.asarray(self.gt, dtype=np.int64).ravel()
        self.q = np.asarray(self.q, dtype=float).ravel()
        if not (len(self.anchor) == len(self.cls) == len(self.gt) == len(self.q)):
            raise ShapeError("positive arrays differ in length")

    def __len__(self):
        return len(self.anchor)

    @classmethod
    def empty(cls):
        return cls([], [], [], [])


@dataclass
class PositiveSample:
    anchor_id: int
    gt_id: int
    sigma: float
    q: float
    r_reg: float
    r_cls: float


@dataclass
class LossBreakdown:
    cls_loss: float
    reg_loss: float
    total: float
    per_sample: list[PositiveSample] = field(default_factory=list)


def _groups(keys):
    for key in np.unique(keys):
        yield np.flatnonzero(keys == key)


def regression_rank_weights(pos: PositiveSet, tau: float) -> np.ndarray:
    """``exp(-R)`` of the IoUs, ranked within each gt's positives."""
    r = np.ones(len(pos))
    for idx in _groups(pos.gt):
        r[idx] = rank_weight(soft_normalized_rank(pos.q[idx], tau))
    return r


def _scopes(pos, cfg):
    if cfg.rcls_scope == "per-gt":
        return list(_groups(pos.gt))
    return [np.arange(len(pos))] if len(pos) else []


def _rescale(r, rescale):
    if not rescale:
        return r.copy()
    lo, hi = r.min(), r.max()
    if len(r) == 1 or hi - lo < 1e-12:
        return np.ones_like(r)
    return (r - lo) / (hi - lo)


def confidence_rank_weights(sig_pos, pos: PositiveSet, cfg: ClsLossConfig):
    """Raw ``r_cls`` and the blend weight applied to the distillation term."""
    r = np.ones(len(pos))
    w = np.ones(len(pos))
    for idx in _scopes(pos, cfg):
        r[idx] = rank_weight(soft_normalized_rank(sig_pos[idx], cfg.tau))
        w[idx] = _rescale(r[idx], cfg.rescale_rcls)
    return r, w


def _validate(scores, pos, negatives, n_gt):
    scores = np.asarray(scores, dtype=float)
    if scores.ndim != 2:
        raise ShapeError("scores must be [num_anchors, num_classes]")
    if len(pos) and n_gt is not None and (pos.gt.max() >= n_gt or pos.gt.min() < 0):
        raise ShapeError("a positive references a missing ground truth")
    negatives = np.asarray(negatives, dtype=np.int64).ravel()
    return scores, negatives


def _positive_terms(scores, pos, cfg, weights):
    sig = clamp_scores(scores[pos.anchor, pos.cls])
    ones = np.ones(len(pos), dtype=int)
    fl = focal_loss(sig, ones, cfg.alpha, cfg.gamma)
    if cfg.kind == "focal-only" or len(pos) == 0:
        zero = np.zeros(len(pos))
        return sig, fl, zero, zero, np.ones(len(pos)), np.ones(len(pos))
    if weights is None:
        r_reg = regression_rank_weights(pos, cfg.tau)
        r_cls, w = confidence_rank_weights(sig, pos, cfg)
    else:
        r_reg, w = (np.asarray(a, dtype=float) for a in weights)
        r_cls = w
    d = rdl(sig, pos.q, r_reg, cfg.beta)
    return sig, fl, d, w, r_reg, r_cls


def classification_loss(scores, pos: PositiveSet, negatives, cfg: ClsLossConfig = ClsLossConfig(),
                        n_gt: int | None = None, weights=None, return_samples: bool = False):
    """Blended positive terms plus focal loss on every other channel.

    ``weights`` optionally fixes ``(r_reg, blend_weight)`` per positive
    instead of deriving them from the scores.
    """
    scores, negatives = _validate(scores, pos, negatives, n_gt)
    n_cls = scores.shape[1]
    sig, fl, d, w, r_reg, r_cls = _positive_terms(scores, pos, cfg, weights)
    if cfg.kind == "focal-only":
        blended = fl
    else:
        blended = (1.0 - w) * fl + w * d

    total = float(blended.sum())
    # background channels of positives
    if len(pos):
        bg = focal_loss(scores[pos.anchor], 0, cfg.alpha, cfg.gamma)
        bg[np.arange(len(pos)), pos.cls] = 0.0
        total += float(bg.sum())
    if len(negatives):
        total += float(focal_loss(scores[negatives], 0, cfg.alpha, cfg.gamma).sum())
    if not return_samples:
        return total
    samples = [
        PositiveSample(int(pos.anchor[i]), int(pos.gt[i]), float(sig[i]), float(pos.q[i]),
                       float(r_reg[i]), float(r_cls[i]))
        for i in range(len(pos))
    ]
    return total, samples


def _rank_path_grad(sig, pos, cfg, u):
    """Gradient of ``sum_p u_p * w_p(sigma)`` w.r.t. the positives' sigmas."""
    g = np.zeros(len(pos))
    for idx in _scopes(pos, cfg):
        s = sig[idx]
        r = rank_weight(soft_normalized_rank(s, cfg.tau))
        jac = soft_rank_gradient(s, cfg.tau)
        uu = u[idx]
        if cfg.rescale_rcls:
            lo_i, hi_i = int(np.argmin(r)), int(np.argmax(r))
            span = r[hi_i] - r[lo_i]
            if len(r) == 1 or span < 1e-12:
                continue
            d_r = uu / span
            d_r[lo_i] -= uu.sum() / span
            c = np.sum(uu * (r - r[lo_i])) / span**2
            d_r[hi_i] -= c
            d_r[lo_i] += c
        else:
            d_r = uu
        # r_m = exp(-R_m)  =>  dr_m/ds_i = -r_m J[m, i]
        g[idx] = -(d_r * r) @ jac
    return g


def classification_loss_grad(scores, pos: PositiveSet, negatives, cfg: ClsLossConfig = ClsLossConfig(),
                             n_gt: int | None = None, weights=None, rank_gradient: str | None = None):
    """d classification_loss / d scores, shape ``[num_anchors, num_classes]``.

    In ``"full"`` mode the derivative of the blend weights through the soft
    rank is included; ``"frozen"`` treats them as constants. Passing
    ``weights`` always freezes them.
    """
    scores, negatives = _validate(scores, pos, negatives, n_gt)
    mode = rank_gradient or cfg.rank_gradient
    grad = np.zeros_like(scores)
    if len(negatives):
        np.add.at(grad, negatives, focal_loss_grad(scores[negatives], 0, cfg.alpha, cfg.gamma))
    if len(pos) == 0:
        return grad

    bg = focal_loss_grad(scores[pos.anchor], 0, cfg.alpha, cfg.gamma)
    bg[np.arange(len(pos)), pos.cls] = 0.0
    np.add.at(grad, pos.anchor, bg)

    raw = scores[pos.anchor, pos.cls]
    sig, fl, d, w, r_reg, _ = _positive_terms(scores, pos, cfg, weights)
    ones = np.ones(len(pos), dtype=int)
    g_fl = focal_loss_grad(raw, ones, cfg.alpha, cfg.gamma)
    if cfg.kind == "focal-only":
        g_pos = g_fl
    else:
        g_pos = (1.0 - w) * g_fl + w * rdl_grad(raw, pos.q, r_reg, cfg.beta)
        if mode == "full" and weights is None:
            g_pos = g_pos + _rank_path_grad(sig, pos, cfg, d - fl) * _clamp_mask(raw)
    np.add.at(grad, (pos.anchor, pos.cls), g_pos)
    return grad


def positives_from_assignment(assignment, gts, pred_centers, pred_sizes, anchor_index=None,
                              gt_index=None) -> PositiveSet:
    """Resolve ids to rows and compute the (detached) IoU of each positive."""
    if anchor_index is None:
        anchor_index = {i: i for i in range(len(pred_centers))}
    if gt_index is None:
        gt_index = {g.id: i for i, g in enumerate(gts)}
    if not assignment.positives:
        return PositiveSet.empty()
    try:
        a = np.array([anchor_index[aid] for aid, _ in assignment.positives])
        g = np.array([gt_index[gid] for _, gid in assignment.positives])
    except KeyError as exc:
        raise ShapeError(f"assignment references unknown id {exc.args[0]}") from None
    gc, gs = geometry.boxes_to_arrays([gts[i].box for i in g])
    gcls = np.array([gts[i].class_id for i in g])
    q = geometry.iou(pred_centers[a], pred_sizes[a], gc, gs)
    return PositiveSet(a, gcls, g, q)


def total_loss(pred_centers, pred_sizes, scores, assignment, gts, cfg: ClsLossConfig = ClsLossConfig(),
               anchor_index=None, pos: PositiveSet | None = None) -> LossBreakdown:
    if pos is None:
        pos = positives_from_assignment(assignment, gts, pred_centers, pred_sizes, anchor_index)
    negatives = _negative_rows(assignment, anchor_index)
    cls, samples = classification_loss(scores, pos, negatives, cfg, n_gt=len(gts), return_samples=True)
    reg = 0.0
    if len(pos):
        gc, gs = geometry.boxes_to_arrays([gts[i].box for i in pos.gt])
        reg = float(geometry.diou(pred_centers[pos.anchor], pred_sizes[pos.anchor], gc, gs).sum())
    return LossBreakdown(cls, reg, cls + reg, samples)


def _negative_rows(assignment, anchor_index):
    if anchor_index is None:
        return np.asarray(assignment.negatives, dtype=np.int64)
    return np.array([anchor_index[a] for a in assignment.negatives], dtype=np.int64)


def total_loss_grad(pred_centers, pred_sizes, scores, assignment, gts, cfg: ClsLossConfig = ClsLossConfig(),
                    anchor_index=None, pos: PositiveSet | None = None, rank_gradient: str | None = None):
    """Gradients of ``total_loss`` w.r.t. scores, predicted centers and sizes.

    Distillation targets (IoU and its rank) are detached, so box gradients
    come from the DIoU term alone.
    """
    if pos is None:
        pos = positives_from_assignment(assignment, gts, pred_centers, pred_sizes, anchor_index)
    negatives = _negative_rows(assignment, anchor_index)
    g_scores = classification_loss_grad(scores, pos, negatives, cfg, n_gt=len(gts),
                                        rank_gradient=rank_gradient)
    g_c = np.zeros_like(pred_centers, dtype=float)
    g_s = np.zeros_like(pred_sizes, dtype=float)
    if len(pos):
        gc, gs = geometry.boxes_to_arrays([gts[i].box for i in pos.gt])
        _, dc, ds = geometry.diou_with_grad(pred_centers[pos.anchor], pred_sizes[pos.anchor], gc, gs)
        np.add.at(g_c, pos.anchor, dc)
        np.add.at(g_s, pos.anchor, ds)
    return g_scores, g_c, g_s
