"""Sparse voxel grids, submanifold 3D convolution and grid pooling.

Voxel coordinates are packed into int64 keys and stored in an open-addressing
hash table with linear probing. All probes are vectorised over query batches,
and every reduction runs in sorted-coordinate / sorted-offset order, so table
iteration order never leaks into results.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field

import numpy as np
from scipy import sparse as sp

from doremi3d import tensor as T
from doremi3d.errors import ConfigurationError
from doremi3d.nn import Module, Parameter
from doremi3d.tensor import Tensor

_COORD_BITS = 21
_COORD_BIAS = 1 << (_COORD_BITS - 1)
_COORD_MASK = (1 << _COORD_BITS) - 1
_EMPTY = np.int64(-1)


def pack_coords(coords: np.ndarray) -> np.ndarray:
    """Pack integer (x, y, z) triples into non-negative int64 keys."""
    c = np.asarray(coords, dtype=np.int64) + _COORD_BIAS
    if c.size and (c.min() < 0 or c.max() > _COORD_MASK):
        raise ConfigurationError("voxel coordinate outside the packable range")
    return (c[:, 0] << (2 * _COORD_BITS)) | (c[:, 1] << _COORD_BITS) | c[:, 2]


def _mix(keys: np.ndarray) -> np.ndarray:
    # splitmix64 finaliser
    z = keys.astype(np.uint64)
    z = (z ^ (z >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)
    z = (z ^ (z >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)
    return z ^ (z >> np.uint64(31))


class VoxelHashMap:
    """Map from integer voxel coordinates to row indices."""

    def __init__(self, coords: np.ndarray):
        keys = pack_coords(coords)
        n = keys.size
        capacity = 16
        while capacity < 2 * max(n, 1):
            capacity *= 2
        self._mask = np.uint64(capacity - 1)
        self._keys = np.full(capacity, _EMPTY, dtype=np.int64)
        self._rows = np.full(capacity, -1, dtype=np.int64)
        self._size = n
        if np.unique(keys).size != n:
            raise ConfigurationError("duplicate voxel coordinate")
        pending = np.arange(n)
        slots = (_mix(keys) & self._mask).astype(np.int64)
        while pending.size:
            s = slots[pending]
            occupant = self._keys[s]
            free = occupant == _EMPTY
            cand, cand_slots = pending[free], s[free]
            taken, first = np.unique(cand_slots, return_index=True)
            winners = cand[first]
            self._keys[taken] = keys[winners]
            self._rows[taken] = winners
            placed = np.zeros(n, dtype=bool)
            placed[winners] = True
            pending = pending[~placed[pending]]
            # every remaining key's slot is now occupied: probe the next one
            slots[pending] = (slots[pending] + 1) & int(self._mask)

    def __len__(self) -> int:
        return self._size

    def lookup(self, coords: np.ndarray) -> np.ndarray:
        """Row index per query coordinate, -1 where unoccupied."""
        q = pack_coords(np.atleast_2d(coords))
        out = np.full(q.size, -1, dtype=np.int64)
        active = np.arange(q.size)
        slots = (_mix(q) & self._mask).astype(np.int64)
        while active.size:
            k = self._keys[slots]
            hit = k == q[active]
            out[active[hit]] = self._rows[slots[hit]]
            done = hit | (k == _EMPTY)
            active = active[~done]
            slots = (slots[~done] + 1) & int(self._mask)
        return out

    def __contains__(self, coord) -> bool:
        return bool(self.lookup(np.asarray(coord).reshape(1, 3))[0] >= 0)


@dataclass
class SparseVoxelGrid:
    """Occupied voxels (rows sorted by coordinate) with per-voxel features."""

    coords: np.ndarray
    features: np.ndarray | Tensor
    voxel_size_m: float = 1.0
    coord_index: VoxelHashMap = field(init=False, repr=False)
    _rulebooks: dict = field(default_factory=dict, init=False, repr=False)

    def __post_init__(self):
        self.coords = np.asarray(self.coords, dtype=np.int64).reshape(-1, 3)
        if self.voxel_size_m <= 0:
            raise ConfigurationError("voxel size must be positive")
        n_feat = self.features.shape[0]
        if n_feat != self.coords.shape[0]:
            raise ConfigurationError(
                f"{n_feat} feature rows for {self.coords.shape[0]} voxels"
            )
        self.coord_index = VoxelHashMap(self.coords)

    def __len__(self) -> int:
        return self.coords.shape[0]

    def with_features(self, features) -> "SparseVoxelGrid":
        """Same active sites (sharing the hash map and rulebooks), new features."""
        out = object.__new__(SparseVoxelGrid)
        out.coords = self.coords
        out.features = features
        out.voxel_size_m = self.voxel_size_m
        out.coord_index = self.coord_index
        out._rulebooks = self._rulebooks
        if features.shape[0] != len(self):
            raise ConfigurationError("feature rows must match occupied voxels")
        return out

    def rulebook(self, extent: int = 3) -> "Rulebook":
        rb = self._rulebooks.get(extent)
        if rb is None:
            rb = Rulebook.build(self, extent)
            self._rulebooks[extent] = rb
        return rb


def kernel_offsets(extent: int) -> np.ndarray:
    """Centered window offsets in lexicographic (x slowest) order."""
    if extent < 1 or extent % 2 == 0:
        raise ConfigurationError("kernel extent must be a positive odd integer")
    r = extent // 2
    rng = range(-r, r + 1)
    return np.array(list(itertools.product(rng, rng, rng)), dtype=np.int64)


def neighbor_lookup(grid: SparseVoxelGrid, coord, extent: int = 3) -> list[tuple[tuple[int, int, int], int]]:
    """Occupied ``(offset, row)`` pairs inside the centered window around ``coord``."""
    offsets = kernel_offsets(extent)
    rows = grid.coord_index.lookup(np.asarray(coord, dtype=np.int64).reshape(1, 3) + offsets)
    return [(tuple(int(v) for v in o), int(r)) for o, r in zip(offsets, rows) if r >= 0]


@dataclass
class Rulebook:
    """Active (input row, output row) pairs of a submanifold window.

    Pairs are grouped by kernel offset: offset k owns ``src[bounds[k]:bounds[k+1]]``.
    Within a group, output rows ascend. ``gather_t`` and ``scatter`` are the
    0/1 matrices moving rows between the pair list and the grid.
    """

    extent: int
    offsets: np.ndarray
    src: np.ndarray
    dst: np.ndarray
    bounds: np.ndarray
    n_rows: int
    gather_t: sp.csr_matrix = field(repr=False)
    scatter: sp.csr_matrix = field(repr=False)

    @classmethod
    def build(cls, grid: SparseVoxelGrid, extent: int) -> "Rulebook":
        offsets = kernel_offsets(extent)
        m, kvol = len(grid), len(offsets)
        query = (offsets[:, None, :] + grid.coords[None, :, :]).reshape(-1, 3)
        rows = grid.coord_index.lookup(query).reshape(kvol, m)
        k_idx, dst = np.nonzero(rows >= 0)
        src = rows[k_idx, dst]
        bounds = np.searchsorted(k_idx, np.arange(kvol + 1))
        n = src.size
        ones = np.ones(n)
        gather_t = sp.csr_matrix((ones, (src, np.arange(n))), shape=(m, n))
        scatter = sp.csr_matrix((ones, (dst, np.arange(n))), shape=(m, n))
        return cls(extent, offsets, src, dst, bounds, m, gather_t, scatter)

    @property
    def pairs(self) -> list[tuple[np.ndarray, np.ndarray]]:
        """Per-offset (input rows, output rows)."""
        b = self.bounds
        return [(self.src[b[k]:b[k + 1]], self.dst[b[k]:b[k + 1]]) for k in range(len(self.offsets))]


class SparseConvKernel(Module):
    """Weights (kvol x Din x Dout), bias, and the post-conv layer-norm affine."""

    def __init__(self, din: int, dout: int, rng: np.random.Generator | None = None,
                 extent: int = 3, norm: bool = True):
        kernel_offsets(extent)
        kvol = extent**3
        if rng is None:
            w = np.zeros((kvol, din, dout))
        else:
            w = rng.normal(0.0, 1.0 / np.sqrt(kvol * din), size=(kvol, din, dout))
        self.extent = extent
        self.norm = norm
        self.weight = Parameter(w)
        self.bias = Parameter(np.zeros(dout))
        self.gain = Parameter(np.ones(dout))
        self.offset = Parameter(np.zeros(dout))

    @property
    def din(self) -> int:
        return self.weight.shape[1]

    @property
    def dout(self) -> int:
        return self.weight.shape[2]

    def __call__(self, x: Tensor, rulebook: Rulebook) -> Tensor:
        return conv_features(x, rulebook, self)


def _sparse_conv_raw(x: Tensor, rulebook: Rulebook, weight: Tensor) -> Tensor:
    xd, wd = x.data, weight.data
    kvol, din, dout = wd.shape
    if xd.shape[1] != din:
        raise ConfigurationError(f"kernel expects {din} channels, got {xd.shape[1]}")
    b = rulebook.bounds
    live = [k for k in range(kvol) if b[k + 1] > b[k]]
    gathered = xd[rulebook.src]
    per_pair = np.empty((gathered.shape[0], dout))
    for k in live:
        np.matmul(gathered[b[k]:b[k + 1]], wd[k], out=per_pair[b[k]:b[k + 1]])

    def back(g):
        g_pair = g[rulebook.dst]
        gw = np.zeros_like(wd)
        g_gath = np.empty_like(gathered)
        for k in live:
            sl = slice(b[k], b[k + 1])
            gw[k] = gathered[sl].T @ g_pair[sl]
            np.matmul(g_pair[sl], wd[k].T, out=g_gath[sl])
        return np.asarray(rulebook.gather_t @ g_gath), gw

    return T.custom_op(np.asarray(rulebook.scatter @ per_pair), (x, weight), back)


def conv_features(x: Tensor, rulebook: Rulebook, kernel: SparseConvKernel) -> Tensor:
    """Submanifold convolution on a feature matrix aligned with the grid rows."""
    if kernel.extent != rulebook.extent:
        raise ConfigurationError("kernel and rulebook extents differ")
    h = T.add(_sparse_conv_raw(x, rulebook, kernel.weight), kernel.bias)
    if kernel.norm:
        h = T.layer_norm(h, kernel.gain, kernel.offset)
    return h


def submanifold_conv(grid: SparseVoxelGrid, kernel: SparseConvKernel) -> SparseVoxelGrid:
    """Convolve ``grid`` keeping exactly its active sites."""
    feats = grid.features if isinstance(grid.features, Tensor) else Tensor(grid.features)
    out = conv_features(feats, grid.rulebook(kernel.extent), kernel)
    return grid.with_features(out if isinstance(grid.features, Tensor) else out.data)


@dataclass
class PoolingMap:
    """Parent (fine) to child (coarse) voxel assignment."""

    parent: SparseVoxelGrid
    child: SparseVoxelGrid
    child_of_parent: np.ndarray
    mean_matrix: sp.csr_matrix = field(repr=False)

    @property
    def members(self) -> list[np.ndarray]:
        order = np.argsort(self.child_of_parent, kind="stable")
        counts = np.bincount(self.child_of_parent, minlength=len(self.child))
        return np.split(order, np.cumsum(counts)[:-1])


def pooling_structure(grid: SparseVoxelGrid, factor: int) -> PoolingMap:
    if int(factor) != factor or factor < 2:
        raise ConfigurationError("pooling factor must be an integer >= 2")
    coarse = np.floor_divide(grid.coords, int(factor))
    child_coords, inverse = np.unique(coarse, axis=0, return_inverse=True)
    inverse = inverse.reshape(-1)
    counts = np.bincount(inverse, minlength=len(child_coords)).astype(np.float64)
    m = sp.csr_matrix(
        (1.0 / counts[inverse], (inverse, np.arange(len(grid)))),
        shape=(len(child_coords), len(grid)),
    )
    child = SparseVoxelGrid(child_coords, np.zeros((len(child_coords), 0)), grid.voxel_size_m * factor)
    return PoolingMap(grid, child, inverse, m)


def pool_features(x: Tensor, pmap: PoolingMap) -> Tensor:
    return T.sparse_apply(pmap.mean_matrix, x)


def unpool_features(x: Tensor, pmap: PoolingMap) -> Tensor:
    return T.take_rows(x, pmap.child_of_parent)


def grid_pool(grid: SparseVoxelGrid, factor: int = 2) -> tuple[SparseVoxelGrid, PoolingMap]:
    """Mean-pool member voxels into coarse voxels at ``floor(coord / factor)``."""
    pmap = pooling_structure(grid, factor)
    feats = grid.features
    if isinstance(feats, Tensor):
        pooled = pool_features(feats, pmap)
    else:
        pooled = np.asarray(pmap.mean_matrix @ np.asarray(feats))
    child = pmap.child.with_features(pooled)
    pmap.child = child
    return child, pmap


def grid_unpool(child: SparseVoxelGrid, pmap: PoolingMap):
    """Copy each coarse feature back to all of its fine member voxels."""
    feats = child.features
    if isinstance(feats, Tensor):
        return unpool_features(feats, pmap)
    return np.asarray(feats)[pmap.child_of_parent]
