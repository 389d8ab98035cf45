"""Sparse-voxel encoder/decoder shared by pretraining and segmentation.

A desk-scale stand-in for the point-transformer backbone: each block is a
residual submanifold convolution followed by a residual feed-forward network.
The feed-forward slot of any block can be swapped for a DoReMi layer.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from doremi3d import tensor as T
from doremi3d.data import NUM_POINT_ATTRIBUTES, PointCloud, point_attributes, voxelize
from doremi3d.errors import ConfigurationError
from doremi3d.nn import FFN, LayerNorm, Linear, Module
from doremi3d.sparse import PoolingMap, Rulebook, SparseConvKernel, SparseVoxelGrid, pooling_structure
from doremi3d.tensor import Tensor


@dataclass(frozen=True)
class BackboneConfig:
    widths: tuple[int, ...] = (32, 64, 96)
    blocks: tuple[int, ...] = (2, 2, 2)
    in_dim: int = NUM_POINT_ATTRIBUTES
    ffn_ratio: int = 4
    pool_factor: int = 2

    def __post_init__(self):
        if len(self.widths) != len(self.blocks) or not self.widths:
            raise ConfigurationError("widths and blocks must be equal-length, non-empty")

    @property
    def n_stages(self) -> int:
        return len(self.widths)

    def default_placement(self) -> tuple[tuple[int, int], ...]:
        """Final block of every stage."""
        return tuple((s, b - 1) for s, b in enumerate(self.blocks))


@dataclass
class ForwardContext:
    """Per-forward state handed to every block's feed-forward slot."""

    domain_id: int
    rulebook: Rulebook | None = None
    grid: SparseVoxelGrid | None = None
    layer: str = ""
    balance_losses: list = field(default_factory=list)
    decisions: list = field(default_factory=list)
    route_probs: list = field(default_factory=list)


@dataclass
class PreparedScene:
    """Voxel hierarchy and lookup tables for one cloud, built once and reused."""

    cloud: PointCloud
    grids: list[SparseVoxelGrid]
    pools: list[PoolingMap]
    inputs: np.ndarray
    point_to_voxel: np.ndarray

    @property
    def domain_id(self) -> int:
        return self.cloud.domain_id

    @property
    def labels(self) -> np.ndarray:
        return self.cloud.labels


def prepare_scene(cloud: PointCloud, n_stages: int, voxel_size_m: float, pool_factor: int = 2) -> PreparedScene:
    grid, p2v = voxelize(cloud, voxel_size_m, features=point_attributes(cloud, voxel_size_m))
    grids, pools = [grid], []
    for _ in range(n_stages - 1):
        pmap = pooling_structure(grids[-1], pool_factor)
        pools.append(pmap)
        grids.append(pmap.child)
    for g in grids:
        g.rulebook(3)
    return PreparedScene(cloud, grids, pools, np.asarray(grid.features), p2v)


class Block(Module):
    def __init__(self, dim: int, rng: np.random.Generator, ffn_ratio: int = 4):
        self.conv = SparseConvKernel(dim, dim, rng)
        self.norm = LayerNorm(dim)
        self.ffn = FFN(dim, rng, ffn_ratio)

    def __call__(self, x: Tensor, ctx: ForwardContext) -> Tensor:
        x = T.add(x, self.conv(x, ctx.rulebook))
        return T.add(x, self.ffn(self.norm(x), ctx))


class Stage(Module):
    def __init__(self, din: int, dim: int, n_blocks: int, rng: np.random.Generator,
                 ffn_ratio: int, first: bool):
        if first:
            self.enter = SparseConvKernel(din, dim, rng)
        else:
            self.enter = Linear(din, dim, rng)
            self.enter_norm = LayerNorm(dim)
        self.blocks = [Block(dim, rng, ffn_ratio) for _ in range(n_blocks)]


class Backbone(Module):
    def __init__(self, config: BackboneConfig, rng: np.random.Generator):
        self.config = config
        w = config.widths
        self.stages = [
            Stage(config.in_dim if s == 0 else w[s - 1], w[s], config.blocks[s], rng,
                  config.ffn_ratio, first=(s == 0))
            for s in range(config.n_stages)
        ]
        self.up = [Linear(w[s], w[s - 1], rng) for s in range(1, config.n_stages)]
        self.up_norm = [LayerNorm(w[s - 1]) for s in range(1, config.n_stages)]

    @property
    def output_dim(self) -> int:
        return self.config.widths[0]

    def block(self, stage: int, index: int) -> Block:
        try:
            return self.stages[stage].blocks[index]
        except IndexError:
            raise ConfigurationError(f"no block ({stage}, {index}) in backbone") from None

    def __call__(self, scene: PreparedScene, ctx: ForwardContext) -> Tensor:
        """Per-voxel features at the finest resolution."""
        x = Tensor(scene.inputs)
        skips = []
        for s, stage in enumerate(self.stages):
            grid = scene.grids[s]
            ctx.rulebook, ctx.grid = grid.rulebook(3), grid
            if s == 0:
                x = stage.enter(x, ctx.rulebook)
            else:
                x = T.sparse_apply(scene.pools[s - 1].mean_matrix, x)
                x = stage.enter_norm(stage.enter(x))
            for b, block in enumerate(stage.blocks):
                ctx.layer = f"s{s}b{b}"
                x = block(x, ctx)
            skips.append(x)
        for s in range(len(self.stages) - 1, 0, -1):
            x = T.take_rows(x, scene.pools[s - 1].child_of_parent)
            x = self.up_norm[s - 1](T.add(self.up[s - 1](x), skips[s - 1]))
        return x

    def ffn_state(self) -> dict[tuple[int, int], dict[str, np.ndarray]]:
        """Weights of every plain feed-forward slot keyed by (stage, block)."""
        out = {}
        for s, stage in enumerate(self.stages):
            for b, block in enumerate(stage.blocks):
                if isinstance(block.ffn, FFN):
                    out[(s, b)] = block.ffn.state_dict()
        return out
