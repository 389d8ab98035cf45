"""Synthetic multi-domain point-cloud scenes.

Each domain controls the three shift axes that separate real scanners and
datasets: colour palette, sampling density (plus positional noise) and
completeness (view-wedge occlusion). Scenes are small rooms built from
analytic primitives so every point has an exact surface and class label.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import yaml

from doremi3d.errors import AugmentationError, ConfigurationError, FormatError, GenerationError
from doremi3d.nn import make_rng
from doremi3d.sparse import SparseVoxelGrid

CLASS_NAMES = ("floor", "wall", "box", "sphere", "cylinder", "clutter")
FLOOR, WALL, BOX, SPHERE, CYLINDER, CLUTTER = range(len(CLASS_NAMES))
NUM_CLASSES = len(CLASS_NAMES)

ROOM_SIZE = 1.6
WALL_HEIGHT = 1.0
# points per primitive = density * area * SHELL_M: density counts points in a
# thin scanned shell around each surface
SHELL_M = 0.1
MIN_POINTS = 64
DEFAULT_VOXEL_SIZE = 0.05
DEFAULT_PATCH_EXTENT = 0.5
COLOR_JITTER = 0.02


@dataclass(frozen=True)
class DomainSpec:
    domain_id: int
    name: str
    density_points_per_m3: float
    color_palette_bias: tuple[float, float, float] = (0.5, 0.5, 0.5)
    noise_sigma_m: float = 0.0
    occlusion_fraction: float = 0.0
    class_set: tuple[int, ...] = (FLOOR, WALL, BOX, SPHERE, CYLINDER)

    def __post_init__(self):
        object.__setattr__(self, "color_palette_bias", tuple(float(c) for c in self.color_palette_bias))
        object.__setattr__(self, "class_set", tuple(int(c) for c in self.class_set))
        if self.density_points_per_m3 <= 0:
            raise ConfigurationError("density must be positive")
        if len(self.color_palette_bias) != 3 or not all(0 <= c <= 1 for c in self.color_palette_bias):
            raise ConfigurationError("palette bias must be a 3-vector in [0, 1]")
        if self.noise_sigma_m < 0:
            raise ConfigurationError("noise sigma must be non-negative")
        if not 0 <= self.occlusion_fraction < 1:
            raise ConfigurationError("occlusion fraction must lie in [0, 1)")
        if not self.class_set or any(not 0 <= c < NUM_CLASSES for c in self.class_set):
            raise ConfigurationError(f"class ids must lie in [0, {NUM_CLASSES})")

    def label_for(self, canonical: int) -> int:
        """Domain label of a primitive; classes outside the set fold into clutter."""
        if canonical in self.class_set:
            return canonical
        if CLUTTER in self.class_set:
            return CLUTTER
        raise GenerationError(
            f"domain {self.name!r} cannot label {CLASS_NAMES[canonical]} (no clutter class)"
        )


@dataclass
class PointCloud:
    positions: np.ndarray
    colors: np.ndarray
    labels: np.ndarray
    domain_id: int
    point_ids: np.ndarray | None = None

    def __post_init__(self):
        self.positions = np.asarray(self.positions, dtype=np.float64).reshape(-1, 3)
        self.colors = np.asarray(self.colors, dtype=np.float64).reshape(-1, 3)
        self.labels = np.asarray(self.labels, dtype=np.int64).reshape(-1)
        n = self.positions.shape[0]
        if self.point_ids is None:
            self.point_ids = np.arange(n, dtype=np.int64)
        self.point_ids = np.asarray(self.point_ids, dtype=np.int64)
        if n < 1:
            raise ConfigurationError("a point cloud needs at least one point")
        if not (self.colors.shape[0] == self.labels.shape[0] == self.point_ids.shape[0] == n):
            raise ConfigurationError("column lengths differ")
        if self.colors.min() < 0 or self.colors.max() > 1:
            raise ConfigurationError("colors must lie in [0, 1]")

    def __len__(self) -> int:
        return self.positions.shape[0]

    def subset(self, index: np.ndarray) -> "PointCloud":
        return PointCloud(self.positions[index], self.colors[index], self.labels[index],
                          self.domain_id, self.point_ids[index])


# ---------------------------------------------------------------- primitives


@dataclass
class Rect:
    """Axis-aligned rectangle in one coordinate plane (``axis`` is the normal)."""

    axis: int
    level: float
    lo: tuple[float, float]
    hi: tuple[float, float]
    canonical: int

    def area(self) -> float:
        return (self.hi[0] - self.lo[0]) * (self.hi[1] - self.lo[1])

    def sample(self, n: int, rng: np.random.Generator) -> np.ndarray:
        uv = rng.uniform(self.lo, self.hi, size=(n, 2))
        return np.insert(uv, self.axis, self.level, axis=1)

    def distance(self, p: np.ndarray) -> np.ndarray:
        return np.abs(p[:, self.axis] - self.level)


@dataclass
class Box:
    center: np.ndarray
    half: np.ndarray
    canonical: int = BOX

    def _faces(self) -> list[tuple[int, float, tuple, tuple]]:
        c, h = self.center, self.half
        faces = [(2, c[2] + h[2], (c[0] - h[0], c[1] - h[1]), (c[0] + h[0], c[1] + h[1]))]
        for axis in (0, 1):
            other = [a for a in range(3) if a != axis]
            lo = tuple(c[a] - h[a] for a in other)
            hi = tuple(c[a] + h[a] for a in other)
            faces.append((axis, c[axis] - h[axis], lo, hi))
            faces.append((axis, c[axis] + h[axis], lo, hi))
        return faces

    def area(self) -> float:
        return sum(Rect(a, l, lo, hi, 0).area() for a, l, lo, hi in self._faces())

    def sample(self, n: int, rng: np.random.Generator) -> np.ndarray:
        rects = [Rect(a, l, lo, hi, self.canonical) for a, l, lo, hi in self._faces()]
        areas = np.array([r.area() for r in rects])
        which = rng.choice(len(rects), size=n, p=areas / areas.sum())
        out = np.empty((n, 3))
        for i, r in enumerate(rects):
            idx = np.nonzero(which == i)[0]
            out[idx] = r.sample(idx.size, rng)
        return out

    def distance(self, p: np.ndarray) -> np.ndarray:
        q = np.abs(p - self.center) - self.half
        outside = np.linalg.norm(np.maximum(q, 0.0), axis=1)
        inside = np.minimum(q.max(axis=1), 0.0)
        return np.abs(outside + inside)

    def covers(self, xy: np.ndarray) -> np.ndarray:
        return np.all(np.abs(xy - self.center[:2]) <= self.half[:2], axis=1)


@dataclass
class Sphere:
    center: np.ndarray
    radius: float
    canonical: int = SPHERE

    def area(self) -> float:
        return 4.0 * math.pi * self.radius**2

    def sample(self, n: int, rng: np.random.Generator) -> np.ndarray:
        u = rng.normal(size=(n, 3))
        u /= np.linalg.norm(u, axis=1, keepdims=True)
        return self.center + self.radius * u

    def distance(self, p: np.ndarray) -> np.ndarray:
        return np.abs(np.linalg.norm(p - self.center, axis=1) - self.radius)

    def covers(self, xy: np.ndarray) -> np.ndarray:
        return np.zeros(len(xy), dtype=bool)


@dataclass
class Cylinder:
    """Vertical cylinder standing on the floor: side wall plus top cap."""

    center_xy: np.ndarray
    radius: float
    height: float
    canonical: int = CYLINDER

    def area(self) -> float:
        return 2.0 * math.pi * self.radius * self.height + math.pi * self.radius**2

    def sample(self, n: int, rng: np.random.Generator) -> np.ndarray:
        side = 2.0 * math.pi * self.radius * self.height
        on_side = rng.random(n) < side / self.area()
        theta = rng.uniform(0.0, 2.0 * math.pi, size=n)
        rad = np.where(on_side, self.radius, self.radius * np.sqrt(rng.random(n)))
        z = np.where(on_side, rng.uniform(0.0, self.height, size=n), self.height)
        x = self.center_xy[0] + rad * np.cos(theta)
        y = self.center_xy[1] + rad * np.sin(theta)
        return np.stack([x, y, z], axis=1)

    def distance(self, p: np.ndarray) -> np.ndarray:
        dr = np.linalg.norm(p[:, :2] - self.center_xy, axis=1) - self.radius
        dz = np.abs(p[:, 2] - self.height / 2.0) - self.height / 2.0
        d = np.stack([dr, dz], axis=1)
        return np.abs(np.minimum(d.max(axis=1), 0.0) + np.linalg.norm(np.maximum(d, 0.0), axis=1))

    def covers(self, xy: np.ndarray) -> np.ndarray:
        return np.linalg.norm(xy - self.center_xy, axis=1) <= self.radius


def scene_primitives(seed: int, rng: np.random.Generator | None = None) -> list:
    """Room layout for ``seed``: floor, two walls and 3-6 resting objects.

    Layout depends only on the seed, so every domain renders the same room
    differently for a given seed.
    """
    rng = make_rng(seed, "layout") if rng is None else rng
    L = ROOM_SIZE
    prims: list = [
        Rect(2, 0.0, (0.0, 0.0), (L, L), FLOOR),
        Rect(0, 0.0, (0.0, 0.0), (L, WALL_HEIGHT), WALL),
        Rect(1, 0.0, (0.0, 0.0), (L, WALL_HEIGHT), WALL),
    ]
    placed: list[tuple[np.ndarray, float]] = []
    for _ in range(int(rng.integers(3, 7))):
        kind = int(rng.integers(0, 3))
        if kind == 0:
            half = rng.uniform([0.08, 0.08, 0.06], [0.22, 0.22, 0.22])
            footprint = float(np.hypot(half[0], half[1]))
        elif kind == 1:
            radius = float(rng.uniform(0.08, 0.18))
            footprint = radius
        else:
            radius = float(rng.uniform(0.05, 0.13))
            height = float(rng.uniform(0.2, 0.6))
            footprint = radius
        for _attempt in range(50):
            xy = rng.uniform(0.1 + footprint, L - footprint - 0.05, size=2)
            if all(np.linalg.norm(xy - q) > footprint + r + 0.03 for q, r in placed):
                break
        else:
            continue
        placed.append((xy, footprint))
        if kind == 0:
            prims.append(Box(np.array([xy[0], xy[1], half[2]]), half))
        elif kind == 1:
            prims.append(Sphere(np.array([xy[0], xy[1], radius]), radius))
        else:
            prims.append(Cylinder(xy, radius, height))
    return prims


def generate_scene(spec: DomainSpec, seed: int) -> PointCloud:
    """Render one labeled room for ``spec``; same (spec, seed) gives the same cloud."""
    prims = scene_primitives(seed)
    rng = make_rng(seed, "render", spec.domain_id, spec.name)
    bias = np.asarray(spec.color_palette_bias)
    pos, col, lab = [], [], []
    for prim in prims:
        n = int(rng.poisson(spec.density_points_per_m3 * prim.area() * SHELL_M))
        base = rng.uniform(0.0, 1.0, size=3)
        if n == 0:
            continue
        p = prim.sample(n, rng)
        if prim.canonical == FLOOR:
            hidden = np.zeros(n, dtype=bool)
            for other in prims[3:]:
                hidden |= other.covers(p[:, :2])
            p = p[~hidden]
            n = p.shape[0]
        c = 0.6 * base + 0.4 * bias + rng.normal(0.0, COLOR_JITTER, size=(n, 3))
        pos.append(p)
        col.append(np.clip(c, 0.0, 1.0))
        lab.append(np.full(n, spec.label_for(prim.canonical), dtype=np.int64))
    positions = np.concatenate(pos)
    colors = np.concatenate(col)
    labels = np.concatenate(lab)
    if spec.noise_sigma_m > 0:
        positions = positions + rng.normal(0.0, spec.noise_sigma_m, size=positions.shape)
    if spec.occlusion_fraction > 0:
        view = rng.uniform(0.0, 2.0 * math.pi)
        rel = positions[:, :2] - ROOM_SIZE / 2.0
        ang = np.arctan2(rel[:, 1], rel[:, 0])
        gap = np.abs((ang - view + math.pi) % (2.0 * math.pi) - math.pi)
        keep = gap >= math.pi * spec.occlusion_fraction
        positions, colors, labels = positions[keep], colors[keep], labels[keep]
    if positions.shape[0] < MIN_POINTS:
        raise GenerationError(
            f"scene {seed} of {spec.name!r} has {positions.shape[0]} points (< {MIN_POINTS})"
        )
    return PointCloud(positions, colors, labels, spec.domain_id)


# ---------------------------------------------------------------- voxels & patches


def point_attributes(cloud: PointCloud, voxel_size_m: float = DEFAULT_VOXEL_SIZE) -> np.ndarray:
    """Per-point network inputs: colour, offset inside the voxel, height."""
    scaled = cloud.positions / voxel_size_m
    offset = scaled - np.floor(scaled) - 0.5
    height = cloud.positions[:, 2:3] / WALL_HEIGHT
    return np.concatenate([cloud.colors, offset, height], axis=1)


NUM_POINT_ATTRIBUTES = 7


def voxelize(cloud: PointCloud, voxel_size_m: float = DEFAULT_VOXEL_SIZE,
             reducer: str = "mean", features: np.ndarray | None = None):
    """Collapse points into occupied voxels.

    Returns the grid (rows sorted by coordinate) and the point-to-row map.
    ``features`` defaults to the point colours. Member points are reduced in a
    canonical order, so shuffling the input yields a bit-identical grid.
    """
    if voxel_size_m <= 0:
        raise ConfigurationError("voxel size must be positive")
    if reducer != "mean":
        raise ConfigurationError(f"unknown reducer {reducer!r}")
    feats = cloud.colors if features is None else np.asarray(features, dtype=np.float64)
    if feats.shape[0] != len(cloud):
        raise ConfigurationError("one feature row per point required")
    cells = np.floor(cloud.positions / voxel_size_m).astype(np.int64)
    coords, inverse = np.unique(cells, axis=0, return_inverse=True)
    inverse = inverse.reshape(-1)
    keys = tuple(feats[:, j] for j in reversed(range(feats.shape[1]))) + (inverse,)
    order = np.lexsort(keys)
    counts = np.bincount(inverse, minlength=len(coords))
    starts = np.concatenate([[0], np.cumsum(counts)[:-1]])
    if feats.shape[1]:
        sums = np.add.reduceat(feats[order], starts, axis=0)
    else:
        sums = np.zeros((len(coords), 0))
    grid = SparseVoxelGrid(coords, sums / counts[:, None], voxel_size_m)
    return grid, inverse


@dataclass
class Patch:
    indices: np.ndarray
    grid_coord: tuple[int, int, int]


def partition_patches(cloud: PointCloud, patch_extent_m: float = DEFAULT_PATCH_EXTENT) -> list[Patch]:
    """Disjoint covering patches from a regular grid of cell size ``patch_extent_m``."""
    if patch_extent_m <= 0:
        raise ConfigurationError("patch extent must be positive")
    cells = np.floor(cloud.positions / patch_extent_m).astype(np.int64)
    coords, inverse = np.unique(cells, axis=0, return_inverse=True)
    inverse = inverse.reshape(-1)
    order = np.argsort(inverse, kind="stable")
    groups = np.split(order, np.cumsum(np.bincount(inverse, minlength=len(coords)))[:-1])
    return [Patch(g, tuple(int(v) for v in c)) for g, c in zip(groups, coords)]


# ---------------------------------------------------------------- augmentation


@dataclass(frozen=True)
class AugmentPolicy:
    color_drop_ratio: tuple[float, float] = (0.0, 0.6)
    color_drop_prob: float = 0.5
    point_drop_ratio: tuple[float, float] = (0.0, 0.6)
    point_drop_prob: float = 0.5
    mask_lo: float = 0.1
    mask_hi: float = 0.5

    def mask_fraction(self, progress: float) -> float:
        """Cosine ramp from ``mask_lo`` at progress 0 to ``mask_hi`` at 1."""
        if progress <= 0.0:
            return self.mask_lo
        if progress >= 1.0:
            return self.mask_hi
        return self.mask_lo + (self.mask_hi - self.mask_lo) * (1.0 - math.cos(math.pi * progress)) / 2.0


IDENTITY_POLICY = AugmentPolicy((0.0, 0.0), 0.0, (0.0, 0.0), 0.0, 0.0, 0.0)


@dataclass
class AugmentRecord:
    color_ratio: list[float] = field(default_factory=list)
    drop_ratio: list[float] = field(default_factory=list)
    masked_patches: list[int] = field(default_factory=list)


def augment_student(cloud: PointCloud, patches: Sequence[Patch], policy: AugmentPolicy,
                    epoch_progress: float, seed: int, return_record: bool = False):
    """Colour-drop, point-drop and whole-patch masking for the student view.

    Output points are a subset of the input (``point_ids`` track provenance);
    colours only ever move to black.
    """
    rng = make_rng(seed, "augment")
    n_patches = len(patches)
    n_mask = int(math.floor(policy.mask_fraction(epoch_progress) * n_patches))
    masked = set(int(i) for i in rng.permutation(n_patches)[:n_mask])
    keep = np.zeros(len(cloud), dtype=bool)
    colors = cloud.colors.copy()
    record = AugmentRecord(masked_patches=sorted(masked))
    for i, patch in enumerate(patches):
        idx = patch.indices
        c_ratio = rng.uniform(*policy.color_drop_ratio) if rng.random() < policy.color_drop_prob else 0.0
        d_ratio = rng.uniform(*policy.point_drop_ratio) if rng.random() < policy.point_drop_prob else 0.0
        blacken = rng.random(idx.size) < c_ratio
        survive = rng.random(idx.size) >= d_ratio
        record.color_ratio.append(c_ratio)
        record.drop_ratio.append(d_ratio)
        if i in masked:
            continue
        colors[idx[blacken]] = 0.0
        keep[idx[survive]] = True
    kept = np.nonzero(keep)[0]
    if kept.size == 0:
        raise AugmentationError("augmentation removed every point")
    out = PointCloud(cloud.positions[kept], colors[kept], cloud.labels[kept],
                     cloud.domain_id, cloud.point_ids[kept])
    return (out, record) if return_record else out


# ---------------------------------------------------------------- corpus & files


@dataclass
class Corpus:
    """Domains plus per-split scene-seed ranges (half-open)."""

    domains: list[DomainSpec]
    splits: dict[str, tuple[int, int]]
    heldout: tuple[int, ...] = ()
    voxel_size_m: float = DEFAULT_VOXEL_SIZE
    patch_extent_m: float = DEFAULT_PATCH_EXTENT

    def __post_init__(self):
        ids = [d.domain_id for d in self.domains]
        if len(set(ids)) != len(ids):
            raise ConfigurationError("domain ids must be unique")
        for h in self.heldout:
            if h not in ids:
                raise ConfigurationError(f"held-out domain {h} not in corpus")

    def domain(self, domain_id: int) -> DomainSpec:
        for d in self.domains:
            if d.domain_id == domain_id:
                return d
        raise ConfigurationError(f"corpus has no domain {domain_id}")

    @property
    def training_domains(self) -> list[DomainSpec]:
        return [d for d in self.domains if d.domain_id not in self.heldout]

    def seeds(self, split: str) -> range:
        if split not in self.splits:
            raise ConfigurationError(f"corpus has no split {split!r}")
        lo, hi = self.splits[split]
        return range(lo, hi)

    def scenes(self, split: str, domain_ids: Sequence[int] | None = None) -> list[PointCloud]:
        ids = [d.domain_id for d in self.training_domains] if domain_ids is None else list(domain_ids)
        return [generate_scene(self.domain(i), s) for i in ids for s in self.seeds(split)]

    def to_dict(self) -> dict:
        return {
            "domains": [
                {**asdict(d), "color_palette_bias": list(d.color_palette_bias), "class_set": list(d.class_set)}
                for d in self.domains
            ],
            "splits": {k: list(v) for k, v in self.splits.items()},
            "heldout": list(self.heldout),
            "voxel_size_m": self.voxel_size_m,
            "patch_extent_m": self.patch_extent_m,
        }

    @classmethod
    def from_dict(cls, raw: dict) -> "Corpus":
        allowed = {"domains", "splits", "heldout", "voxel_size_m", "patch_extent_m"}
        unknown = set(raw) - allowed
        if unknown:
            raise ConfigurationError(f"unknown manifest keys: {sorted(unknown)}")
        try:
            domains = [DomainSpec(**d) for d in raw["domains"]]
            splits = {k: (int(v[0]), int(v[1])) for k, v in raw["splits"].items()}
        except (KeyError, TypeError) as exc:
            raise ConfigurationError(f"malformed manifest: {exc}") from exc
        return cls(domains, splits, tuple(raw.get("heldout", ())),
                   float(raw.get("voxel_size_m", DEFAULT_VOXEL_SIZE)),
                   float(raw.get("patch_extent_m", DEFAULT_PATCH_EXTENT)))


def save_manifest(corpus: Corpus, path: str | Path) -> None:
    Path(path).write_text(yaml.safe_dump(corpus.to_dict(), sort_keys=False))


def load_manifest(path: str | Path) -> Corpus:
    return Corpus.from_dict(yaml.safe_load(Path(path).read_text()))


def standard_corpus(train_scenes: int = 16, eval_scenes: int = 6) -> Corpus:
    """Three training domains plus one held-out domain.

    The taxonomies disagree on purpose: the sparse scanner folds spheres and
    cylinders into clutter, the occluded set folds boxes into clutter.
    """
    domains = [
        DomainSpec(0, "dense-clean", 2400.0, (0.85, 0.80, 0.70), 0.0, 0.0,
                   (FLOOR, WALL, BOX, SPHERE, CYLINDER)),
        DomainSpec(1, "sparse-noisy", 1100.0, (0.30, 0.45, 0.70), 0.012, 0.0,
                   (FLOOR, WALL, BOX, CLUTTER)),
        DomainSpec(2, "occluded-colored", 1800.0, (0.75, 0.25, 0.20), 0.004, 0.3,
                   (FLOOR, WALL, SPHERE, CYLINDER, CLUTTER)),
        DomainSpec(3, "unseen-mixed", 1500.0, (0.40, 0.70, 0.35), 0.006, 0.15,
                   (FLOOR, WALL, BOX, SPHERE, CYLINDER)),
    ]
    return Corpus(
        domains,
        {"train": (0, train_scenes), "eval": (10_000, 10_000 + eval_scenes)},
        heldout=(3,),
    )


_CLOUD_MAGIC = "doremi3d-cloud"
_CLOUD_VERSION = 1


def save_cloud(cloud: PointCloud, path: str | Path) -> None:
    """Text header line, then little-endian f64 positions, f64 colours, u32 labels."""
    if cloud.labels.min() < 0 or cloud.labels.max() >= 2**32:
        raise FormatError("labels do not fit in u32")
    header = {"magic": _CLOUD_MAGIC, "version": _CLOUD_VERSION, "count": len(cloud),
              "domain_id": int(cloud.domain_id)}
    with open(path, "wb") as fh:
        fh.write(json.dumps(header, sort_keys=True).encode() + b"\n")
        fh.write(cloud.positions.astype("<f8").tobytes())
        fh.write(cloud.colors.astype("<f8").tobytes())
        fh.write(cloud.labels.astype("<u4").tobytes())


def load_cloud(path: str | Path) -> PointCloud:
    raw = Path(path).read_bytes()
    head, sep, body = raw.partition(b"\n")
    try:
        header = json.loads(head)
    except ValueError as exc:
        raise FormatError("cloud header is not valid JSON") from exc
    if not sep or header.get("magic") != _CLOUD_MAGIC or header.get("version") != _CLOUD_VERSION:
        raise FormatError("not a cloud file of a supported version")
    n = int(header["count"])
    if len(body) != n * (24 + 24 + 4):
        raise FormatError(f"cloud body has {len(body)} bytes, expected {n * 52}")
    pos = np.frombuffer(body, "<f8", 3 * n, 0).reshape(n, 3).astype(np.float64)
    col = np.frombuffer(body, "<f8", 3 * n, 24 * n).reshape(n, 3).astype(np.float64)
    lab = np.frombuffer(body, "<u4", n, 48 * n).astype(np.int64)
    return PointCloud(pos, col, lab, int(header["domain_id"]))
