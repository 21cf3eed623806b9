"""Axis-aligned 3D boxes and the pairwise quantities built on them.

Every array function broadcasts over leading dimensions: centers and sizes
are ``(..., 3)`` arrays, so ``iou(c1[:, None], s1[:, None], c2[None], s2[None])``
yields a full pairwise matrix.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

MIN_SIZE = 1e-6


class InvalidBoxError(ValueError):
    pass


@dataclass(frozen=True)
class Box3:
    center: tuple[float, float, float]
    size: tuple[float, float, float]

    def __post_init__(self):
        center = tuple(float(v) for v in self.center)
        size = tuple(float(v) for v in self.size)
        if len(center) != 3 or len(size) != 3:
            raise InvalidBoxError("center and size must be 3-vectors")
        if not all(np.isfinite(center + size)):
            raise InvalidBoxError(f"non-finite box {center} {size}")
        if min(size) < MIN_SIZE:
            raise InvalidBoxError(f"box size must be >= {MIN_SIZE} m, got {size}")
        object.__setattr__(self, "center", center)
        object.__setattr__(self, "size", size)

    @classmethod
    def from_corners(cls, lo, hi) -> "Box3":
        lo = np.asarray(lo, dtype=float)
        hi = np.asarray(hi, dtype=float)
        return cls(tuple((lo + hi) / 2), tuple(hi - lo))

    @property
    def min_corner(self) -> np.ndarray:
        return np.asarray(self.center) - np.asarray(self.size) / 2

    @property
    def max_corner(self) -> np.ndarray:
        return np.asarray(self.center) + np.asarray(self.size) / 2

    def translated(self, offset) -> "Box3":
        return Box3(tuple(np.asarray(self.center) + offset), self.size)

    def scaled(self, factor: float, about=(0.0, 0.0, 0.0)) -> "Box3":
        about = np.asarray(about, dtype=float)
        c = about + factor * (np.asarray(self.center) - about)
        return Box3(tuple(c), tuple(factor * np.asarray(self.size)))


def _arrays(box: Box3) -> tuple[np.ndarray, np.ndarray]:
    return np.asarray(box.center), np.asarray(box.size)


def boxes_to_arrays(boxes) -> tuple[np.ndarray, np.ndarray]:
    """Stack a sequence of Box3 into ``(N, 3)`` center and size arrays."""
    if len(boxes) == 0:
        return np.zeros((0, 3)), np.zeros((0, 3))
    centers = np.array([b.center for b in boxes], dtype=float)
    sizes = np.array([b.size for b in boxes], dtype=float)
    return centers, sizes


# ---------------------------------------------------------------------------
# Array kernels
# ---------------------------------------------------------------------------


def _axis(c, s, d):
    return c[..., d] - s[..., d] / 2, c[..., d] + s[..., d] / 2


def intersection_volume(c1, s1, c2, s2) -> np.ndarray:
    inter = 1.0
    for d in range(3):
        l1, h1 = _axis(c1, s1, d)
        l2, h2 = _axis(c2, s2, d)
        inter = inter * np.clip(np.minimum(h1, h2) - np.maximum(l1, l2), 0.0, None)
    return np.asarray(inter)


def _volume(s):
    return s[..., 0] * s[..., 1] * s[..., 2]


def iou(c1, s1, c2, s2) -> np.ndarray:
    c1, s1, c2, s2 = (np.asarray(x, dtype=float) for x in (c1, s1, c2, s2))
    inter = intersection_volume(c1, s1, c2, s2)
    union = _volume(s1) + _volume(s2) - inter
    return np.clip(inter / union, 0.0, 1.0)


def iou_matrix(centers, sizes) -> np.ndarray:
    """All-pairs IoU of one box set, built axis by axis to bound memory."""
    lo, hi = centers - sizes / 2, centers + sizes / 2
    inter = np.ones((len(centers), len(centers)))
    for d in range(3):
        edge = np.minimum.outer(hi[:, d], hi[:, d]) - np.maximum.outer(lo[:, d], lo[:, d])
        np.clip(edge, 0.0, None, out=edge)
        inter *= edge
    vol = np.prod(sizes, axis=-1)
    return inter / (vol[:, None] + vol[None, :] - inter)


def enclosing_diagonal_sq(c1, s1, c2, s2) -> np.ndarray:
    rho2 = 0.0
    for d in range(3):
        l1, h1 = _axis(c1, s1, d)
        l2, h2 = _axis(c2, s2, d)
        rho2 = rho2 + (np.maximum(h1, h2) - np.minimum(l1, l2)) ** 2
    return np.asarray(rho2)


def vertex_distance_ratio(pc, ps, gc, gs) -> np.ndarray:
    """Min-corner distance plus max-corner distance over twice the enclosing diagonal."""
    pc, ps, gc, gs = (np.asarray(x, dtype=float) for x in (pc, ps, gc, gs))
    d_lo = np.linalg.norm((pc - ps / 2) - (gc - gs / 2), axis=-1)
    d_hi = np.linalg.norm((pc + ps / 2) - (gc + gs / 2), axis=-1)
    rho = np.sqrt(enclosing_diagonal_sq(pc, ps, gc, gs))
    return np.clip((d_lo + d_hi) / (2 * rho), 0.0, 1.0)


def center_distance_ratio(pc, ps, gc, gs) -> np.ndarray:
    pc, ps, gc, gs = (np.asarray(x, dtype=float) for x in (pc, ps, gc, gs))
    d2 = sum((pc[..., d] - gc[..., d]) ** 2 for d in range(3))
    return np.clip(d2 / enclosing_diagonal_sq(pc, ps, gc, gs), 0.0, 1.0)


def diou(pc, ps, gc, gs) -> np.ndarray:
    return 1.0 - iou(pc, ps, gc, gs) + center_distance_ratio(pc, ps, gc, gs)


def pairwise_terms(pc, ps, gc, gs):
    """IoU and vertex-distance ratio sharing one pass over the corners.

    Unrolled over the three axes; reductions over a length-3 axis are slow
    in numpy and this sits in the training loop.
    """
    inter = 1.0
    rho2 = d_lo2 = d_hi2 = 0.0
    vol_p = vol_g = 1.0
    for d in range(3):
        pl, ph = pc[..., d] - ps[..., d] / 2, pc[..., d] + ps[..., d] / 2
        gl, gh = gc[..., d] - gs[..., d] / 2, gc[..., d] + gs[..., d] / 2
        inter = inter * np.clip(np.minimum(ph, gh) - np.maximum(pl, gl), 0.0, None)
        rho2 = rho2 + (np.maximum(ph, gh) - np.minimum(pl, gl)) ** 2
        d_lo2 = d_lo2 + (pl - gl) ** 2
        d_hi2 = d_hi2 + (ph - gh) ** 2
        vol_p = vol_p * ps[..., d]
        vol_g = vol_g * gs[..., d]
    iou_v = np.clip(inter / (vol_p + vol_g - inter), 0.0, 1.0)
    rvd = (np.sqrt(d_lo2) + np.sqrt(d_hi2)) / (2 * np.sqrt(rho2))
    return iou_v, np.clip(rvd, 0.0, 1.0)


def diou_with_grad(pc, ps, gc, gs):
    """DIoU loss of ``N`` box pairs with gradients w.r.t. the predicted boxes.

    Returns ``(loss, grad_center, grad_size)`` with shapes ``(N,)``,
    ``(N, 3)``, ``(N, 3)``. On piecewise boundaries (coincident faces) the
    one-sided derivative from the ``<`` branch is used, which is a valid
    subgradient.
    """
    pc, ps, gc, gs = (np.atleast_2d(np.asarray(a, dtype=float)) for a in (pc, ps, gc, gs))
    if np.any(ps < MIN_SIZE):
        raise InvalidBoxError("predicted box has degenerate size")
    pl, ph = pc - ps / 2, pc + ps / 2
    gl, gh = gc - gs / 2, gc + gs / 2

    # per-axis overlap and its corner derivatives
    ov_hi = np.minimum(ph, gh)
    ov_lo = np.maximum(pl, gl)
    overlap = ov_hi - ov_lo
    active = overlap > 0
    edge = np.where(active, overlap, 0.0)
    d_edge_ph = np.where(active & (ph < gh), 1.0, 0.0)
    d_edge_pl = np.where(active & (pl > gl), -1.0, 0.0)

    inter = np.prod(edge, axis=-1)
    # product of the other two axes for each axis
    edge_others = np.stack(
        [edge[:, 1] * edge[:, 2], edge[:, 0] * edge[:, 2], edge[:, 0] * edge[:, 1]], axis=-1
    )
    size_others = np.stack(
        [ps[:, 1] * ps[:, 2], ps[:, 0] * ps[:, 2], ps[:, 0] * ps[:, 1]], axis=-1
    )
    vol_p = np.prod(ps, axis=-1)
    vol_g = np.prod(gs, axis=-1)
    union = vol_p + vol_g - inter
    iou_v = inter / union

    # dIoU/dx = dI (U + I)/U^2 - I dVp / U^2
    a = ((union + inter) / union**2)[:, None]
    b = (inter / union**2)[:, None]
    d_inter_ph = edge_others * d_edge_ph
    d_inter_pl = edge_others * d_edge_pl
    d_iou_ph = a * d_inter_ph - b * size_others
    d_iou_pl = a * d_inter_pl + b * size_others

    enc = np.maximum(ph, gh) - np.minimum(pl, gl)
    rho2 = np.sum(enc**2, axis=-1)
    d_enc_ph = np.where(ph > gh, 1.0, 0.0)
    d_enc_pl = np.where(pl < gl, -1.0, 0.0)
    diff = pc - gc
    dist2 = np.sum(diff**2, axis=-1)
    rcd = dist2 / rho2
    # d(dist2)/d(ph) = d(dist2)/d(pl) = diff  (center = (pl + ph) / 2)
    inv = (1.0 / rho2)[:, None]
    d_rcd_ph = inv * diff - (rcd / rho2)[:, None] * 2 * enc * d_enc_ph
    d_rcd_pl = inv * diff - (rcd / rho2)[:, None] * 2 * enc * d_enc_pl

    g_ph = -d_iou_ph + d_rcd_ph
    g_pl = -d_iou_pl + d_rcd_pl
    loss = 1.0 - iou_v + rcd
    grad_center = g_ph + g_pl
    grad_size = (g_ph - g_pl) / 2
    return loss, grad_center, grad_size


# ---------------------------------------------------------------------------
# Box3 API
# ---------------------------------------------------------------------------


def volume(box: Box3) -> float:
    return float(np.prod(box.size))


def iou3d(a: Box3, b: Box3) -> float:
    return float(iou(*_arrays(a), *_arrays(b)))


def enclosing_box(a: Box3, b: Box3) -> Box3:
    lo = np.minimum(a.min_corner, b.min_corner)
    hi = np.maximum(a.max_corner, b.max_corner)
    return Box3.from_corners(lo, hi)


def normalized_vertex_distance(pred: Box3, gt: Box3) -> float:
    return float(vertex_distance_ratio(*_arrays(pred), *_arrays(gt)))


def normalized_center_distance(pred: Box3, gt: Box3) -> float:
    return float(center_distance_ratio(*_arrays(pred), *_arrays(gt)))


def diou_loss(pred: Box3, gt: Box3) -> float:
    return float(diou(*_arrays(pred), *_arrays(gt)))


def diou_gradient(pred_params, gt: Box3) -> np.ndarray:
    """Gradient of the DIoU loss w.r.t. ``(cx, cy, cz, sx, sy, sz)`` of the prediction."""
    p = np.asarray(pred_params, dtype=float)
    if p.shape != (6,):
        raise ValueError("pred_params must be a 6-vector (center, size)")
    if np.any(p[3:] < MIN_SIZE):
        raise InvalidBoxError(f"degenerate predicted size {p[3:]}")
    gc, gs = _arrays(gt)
    _, g_c, g_s = diou_with_grad(p[None, :3], p[None, 3:], gc[None], gs[None])
    return np.concatenate([g_c[0], g_s[0]])
