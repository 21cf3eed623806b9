"""Seeded synthetic indoor scenes and anchor lattices."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .. import geometry
from ..assignment import AnchorSet, GroundTruthObject
from ..errors import ConfigurationError, GenerationError
from ..geometry import Box3

log = logging.getLogger(__name__)

# chair, table, bed, sofa, cabinet (meters)
DEFAULT_SIZE_MEANS = (
    (0.55, 0.55, 0.85),
    (1.40, 0.80, 0.75),
    (2.00, 1.50, 0.55),
    (1.90, 0.90, 0.85),
    (0.90, 0.50, 1.70),
)
SIZE_SPREAD = 0.12


def _round9(x):
    return np.array([float(f"{v:.9g}") for v in np.ravel(x)]).reshape(np.shape(x))


@dataclass(frozen=True)
class SceneSpec:
    room_extent: tuple[float, float, float] = (6.0, 6.0, 3.0)
    num_objects: tuple[int, int] = (4, 12)
    class_count: int = 5
    size_means: tuple = DEFAULT_SIZE_MEANS
    size_stds: tuple | None = None
    clutter_cap: float = 0.3
    placement_retries: int = 200
    min_size: float = 0.05

    def __post_init__(self):
        if min(self.room_extent) <= 0:
            raise ConfigurationError("room extent must be positive")
        lo, hi = self.num_objects
        if lo < 1 or hi < lo:
            raise ConfigurationError(f"bad object count range {self.num_objects}")
        if self.class_count < 1 or len(self.size_means) != self.class_count:
            raise ConfigurationError("need one size mean per class")
        if self.size_stds is not None and len(self.size_stds) != self.class_count:
            raise ConfigurationError("need one size stddev per class")
        if not 0.0 <= self.clutter_cap <= 1.0:
            raise ConfigurationError("clutter cap is an IoU in [0, 1]")

    def means(self) -> np.ndarray:
        return np.asarray(self.size_means, dtype=float)

    def stds(self) -> np.ndarray:
        if self.size_stds is None:
            return SIZE_SPREAD * self.means()
        return np.asarray(self.size_stds, dtype=float)

    @classmethod
    def from_dict(cls, d: dict) -> "SceneSpec":
        known = {f for f in cls.__dataclass_fields__}
        kw = {k: v for k, v in d.items() if k in known}
        for key in ("room_extent", "num_objects"):
            if key in kw:
                kw[key] = tuple(kw[key])
        for key in ("size_means", "size_stds"):
            if kw.get(key) is not None:
                kw[key] = tuple(tuple(float(x) for x in row) for row in kw[key])
        return cls(**kw)

    def to_dict(self) -> dict:
        return {
            "room_extent": list(self.room_extent),
            "num_objects": list(self.num_objects),
            "class_count": self.class_count,
            "size_means": [list(r) for r in self.means()],
            "size_stds": [list(r) for r in self.stds()],
            "clutter_cap": self.clutter_cap,
            "placement_retries": self.placement_retries,
            "min_size": self.min_size,
        }


@dataclass
class Scene:
    scene_id: int
    seed: int
    objects: list[GroundTruthObject]
    relaxed: bool = False
    room_extent: tuple[float, float, float] = (6.0, 6.0, 3.0)


def scene_seed(suite_seed: int, index: int) -> int:
    """Per-scene seed derived from the suite seed; independent of worker layout."""
    ss = np.random.SeedSequence([int(suite_seed) & (2**64 - 1), int(index)])
    return int(ss.generate_state(1, dtype=np.uint64)[0])


def generate_scene(spec: SceneSpec, seed: int, scene_id: int = 0) -> Scene:
    """Objects rest on the floor; each keeps its sampled size while the
    position is re-drawn until the clutter cap holds."""
    rng = np.random.default_rng(seed)
    room = np.asarray(spec.room_extent, dtype=float)
    lo_n, hi_n = spec.num_objects
    target = int(rng.integers(lo_n, hi_n + 1))
    means, stds = spec.means(), spec.stds()

    centers, sizes, classes = [], [], []
    for _ in range(target):
        k = int(rng.integers(spec.class_count))
        size = means[k] + stds[k] * rng.standard_normal(3)
        size = _round9(np.clip(size, spec.min_size, room))
        placed = False
        for _ in range(spec.placement_retries):
            xy = rng.uniform(size[:2] / 2, room[:2] - size[:2] / 2)
            center = _round9(np.array([xy[0], xy[1], size[2] / 2]))
            if centers:
                ov = geometry.iou(center, size, np.array(centers), np.array(sizes))
                if ov.max() > spec.clutter_cap:
                    continue
            centers.append(center)
            sizes.append(size)
            classes.append(k)
            placed = True
            break
        if not placed:
            log.debug("could not place object %d of class %d", len(centers), k)

    if len(centers) < lo_n:
        raise GenerationError(
            f"placed only {len(centers)} of at least {lo_n} objects within "
            f"{spec.placement_retries} retries each (seed {seed})"
        )
    relaxed = len(centers) < target
    if relaxed:
        log.warning("scene %d: placed %d of %d objects", scene_id, len(centers), target)
    objects = [
        GroundTruthObject(i, Box3(tuple(float(v) for v in c), tuple(float(v) for v in s)), k)
        for i, (c, s, k) in enumerate(zip(centers, sizes, classes))
    ]
    return Scene(scene_id, int(seed), objects, relaxed, tuple(float(v) for v in room))


def generate_suite(spec: SceneSpec, count: int, suite_seed: int) -> list[Scene]:
    return [generate_scene(spec, scene_seed(suite_seed, i), i) for i in range(count)]


@dataclass(frozen=True)
class AnchorGridSpec:
    strides: tuple[float, ...] = (0.4, 0.8)
    origin: tuple[float, float, float] = (0.0, 0.0, 0.0)

    def __post_init__(self):
        if not self.strides or min(self.strides) <= 0:
            raise ConfigurationError("anchor strides must be positive")


def generate_anchors(grid: AnchorGridSpec, room_extent) -> AnchorSet:
    """Cell-centered lattice per level, level-major then lexicographic (x, y, z)."""
    room = np.asarray(room_extent, dtype=float)
    origin = np.asarray(grid.origin, dtype=float)
    centers, levels = [], []
    for level, stride in enumerate(grid.strides):
        counts = np.floor((room - origin) / stride + 1e-9).astype(int)
        if np.any(counts < 1):
            raise ConfigurationError(f"stride {stride} does not fit the room {tuple(room)}")
        axes = [origin[d] + (np.arange(counts[d]) + 0.5) * stride for d in range(3)]
        mesh = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, 3)
        centers.append(mesh)
        levels.append(np.full(len(mesh), level))
    centers = np.concatenate(centers)
    return AnchorSet(np.arange(len(centers)), centers, np.concatenate(levels), tuple(grid.strides))
