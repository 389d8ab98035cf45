"""Teacher-student self-distillation over colour, density and completeness views.

The teacher sees the raw cloud, the student an augmented copy. Per surviving
point both features are scored against a prototype bank; the student matches
the teacher's centred, sharpened assignment. The teacher tracks the student by
an exponential moving average and never receives gradients.
"""

from __future__ import annotations

import copy
import logging
from dataclasses import dataclass, field

import numpy as np

from doremi3d import tensor as T
from doremi3d.backbone import Backbone, BackboneConfig, ForwardContext, PreparedScene, prepare_scene
from doremi3d.checkpoint import load_checkpoint, save_checkpoint
from doremi3d.data import AugmentPolicy, Corpus, PointCloud, augment_student, partition_patches
from doremi3d.errors import AugmentationError, ConfigurationError, FormatError
from doremi3d.nn import AdamW, Linear, Module, Parameter, make_rng
from doremi3d.tensor import Tape, Tensor

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class PretrainConfig:
    epochs: int = 50
    lr: float = 4e-4
    weight_decay: float = 0.01
    momentum: float = 0.996
    center_momentum: float = 0.9
    teacher_temp: float = 0.04
    student_temp: float = 0.1
    n_prototypes: int = 64
    proj_dim: int = 32
    centering: bool = True
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    policy: AugmentPolicy = field(default_factory=AugmentPolicy)


class PretrainNet(Module):
    """Backbone, projection head and prototype bank."""

    def __init__(self, backbone_config: BackboneConfig, rng: np.random.Generator,
                 n_prototypes: int = 64, proj_dim: int = 32):
        self.backbone = Backbone(backbone_config, rng)
        self.proj = Linear(backbone_config.widths[0], proj_dim, rng)
        protos = rng.normal(size=(n_prototypes, proj_dim))
        self.prototypes = Parameter(protos / np.linalg.norm(protos, axis=1, keepdims=True))

    def point_logits(self, scene: PreparedScene, point_index: np.ndarray | None = None) -> Tensor:
        """Cosine score of every (selected) point against every prototype."""
        feats = self.backbone(scene, ForwardContext(scene.domain_id))
        rows = scene.point_to_voxel if point_index is None else scene.point_to_voxel[point_index]
        h = T.l2_normalize_rows(self.proj(T.take_rows(feats, rows)))
        protos = T.l2_normalize_rows(self.prototypes)
        return T.matmul(h, T.transpose(protos))

    def normalize_prototypes(self) -> None:
        p = self.prototypes.data
        self.prototypes.data = p / np.linalg.norm(p, axis=1, keepdims=True)


def cluster_loss(student_logits: Tensor, teacher_logits: np.ndarray, center: np.ndarray | None,
                 teacher_temp: float, student_temp: float) -> Tensor:
    """Mean cross-entropy from the teacher's sharpened assignment to the student's."""
    t = teacher_logits if center is None else teacher_logits - center
    q = T._softmax(t / teacher_temp)
    logp = T.log_softmax_last(T.mul(student_logits, 1.0 / student_temp))
    per_point = T.sum_(T.mul(logp, q), axis=1)
    return T.mul(T.mean(per_point), -1.0)


def ema_update(teacher: Module, student: Module, m: float) -> Module:
    """teacher <- m * teacher + (1 - m) * student, parameter by parameter."""
    if not 0.0 <= m <= 1.0:
        raise ConfigurationError("EMA momentum must lie in [0, 1]")
    s_params = dict(student.named_parameters())
    for name, tp in teacher.named_parameters():
        tp.data = m * tp.data + (1.0 - m) * s_params[name].data
    return teacher


@dataclass
class PretrainState:
    config: PretrainConfig
    optimizer: AdamW
    center: np.ndarray
    prepared: dict = field(default_factory=dict)
    last_tape: Tape | None = None


def init_pretraining(config: PretrainConfig, seed: int) -> tuple[PretrainNet, PretrainNet, PretrainState]:
    student = PretrainNet(config.backbone, make_rng(seed, "pretrain-init"),
                          config.n_prototypes, config.proj_dim)
    teacher = copy.deepcopy(student)
    teacher.freeze()
    opt = AdamW(student.trainable_parameters(), lr=config.lr, weight_decay=config.weight_decay)
    return student, teacher, PretrainState(config, opt, np.zeros(config.n_prototypes))


def pretrain_step(student: PretrainNet, teacher: PretrainNet, cloud: PointCloud,
                  epoch_progress: float, seed: int, state: PretrainState,
                  voxel_size_m: float = 0.05, patch_extent_m: float = 0.5) -> float | None:
    """One distillation step on one cloud; returns the loss or None if skipped."""
    cfg = state.config
    if any(p.requires_grad for p in teacher.parameters()):
        raise ConfigurationError("teacher parameters must not require gradients")
    n_stages = cfg.backbone.n_stages
    key = id(cloud)
    if key not in state.prepared:
        state.prepared[key] = (cloud, prepare_scene(cloud, n_stages, voxel_size_m),
                               partition_patches(cloud, patch_extent_m))
    _, raw_scene, patches = state.prepared[key]
    try:
        view = augment_student(cloud, patches, cfg.policy, epoch_progress, seed)
    except AugmentationError:
        log.warning("augmentation left no points (seed %d); sample skipped", seed)
        return None
    view_scene = prepare_scene(view, n_stages, voxel_size_m)
    positions = np.searchsorted(cloud.point_ids, view.point_ids)
    t_logits = teacher.point_logits(raw_scene, positions).data
    center = state.center if cfg.centering else None
    with Tape() as tape:
        s_logits = student.point_logits(view_scene)
        loss = cluster_loss(s_logits, t_logits, center, cfg.teacher_temp, cfg.student_temp)
    state.optimizer.zero_grad()
    T.backward(tape, loss)
    state.optimizer.step()
    student.normalize_prototypes()
    ema_update(teacher, student, cfg.momentum)
    if cfg.centering:
        state.center = cfg.center_momentum * state.center + (1 - cfg.center_momentum) * t_logits.mean(axis=0)
    state.last_tape = tape
    return loss.item()


def pretrain(clouds: list[PointCloud], config: PretrainConfig, seed: int,
             voxel_size_m: float = 0.05, patch_extent_m: float = 0.5, progress=None):
    """Run distillation over ``clouds`` for ``config.epochs``; returns (student, teacher, epoch losses)."""
    student, teacher, state = init_pretraining(config, seed)
    history = []
    for epoch in range(config.epochs):
        order = make_rng(seed, "pretrain-order", epoch).permutation(len(clouds))
        progress_frac = epoch / max(config.epochs - 1, 1)
        losses = []
        for step, i in enumerate(order):
            loss = pretrain_step(student, teacher, clouds[i], progress_frac,
                                 int(make_rng(seed, "aug", epoch, step).integers(2**31)), state,
                                 voxel_size_m, patch_extent_m)
            if loss is not None:
                losses.append(loss)
        history.append(float(np.mean(losses)) if losses else float("nan"))
        if progress is not None:
            progress(epoch, history[-1])
    return student, teacher, history


def export_pretrained_ffn(student: PretrainNet) -> dict[tuple[int, int], dict[str, np.ndarray]]:
    """Feed-forward weights of every block, keyed by (stage, block)."""
    return student.backbone.ffn_state()


def save_pretrained(path, student: PretrainNet, config: PretrainConfig, extra_meta: dict | None = None) -> str:
    """Write the student backbone (which contains every FFN) as a checkpoint."""
    bb = config.backbone
    meta = {
        "kind": "pretrained-backbone",
        "widths": list(bb.widths),
        "blocks": list(bb.blocks),
        "in_dim": bb.in_dim,
        "ffn_ratio": bb.ffn_ratio,
        "n_prototypes": config.n_prototypes,
        "proj_dim": config.proj_dim,
        "ffn_keys": [list(k) for k in sorted(export_pretrained_ffn(student))],
        **(extra_meta or {}),
    }
    return save_checkpoint(path, student.state_dict(), meta)


def load_pretrained(path) -> tuple[dict[str, np.ndarray], BackboneConfig]:
    """Backbone state (``backbone.`` prefix stripped) and its config."""
    state, meta = load_checkpoint(path)
    if meta.get("kind") != "pretrained-backbone":
        raise FormatError("not a pretrained-backbone checkpoint")
    config = BackboneConfig(tuple(meta["widths"]), tuple(meta["blocks"]), meta["in_dim"], meta["ffn_ratio"])
    backbone = {k[len("backbone."):]: v for k, v in state.items() if k.startswith("backbone.")}
    return backbone, config


def ffn_states_from_backbone(state: dict[str, np.ndarray], config: BackboneConfig) -> dict[tuple[int, int], dict[str, np.ndarray]]:
    """Split a backbone state dict into per-(stage, block) FFN weights."""
    out = {}
    for s, n in enumerate(config.blocks):
        for b in range(n):
            prefix = f"stages.{s}.blocks.{b}.ffn."
            part = {k[len(prefix):]: v for k, v in state.items() if k.startswith(prefix)}
            if not part:
                raise FormatError(f"checkpoint is missing the FFN of stage {s} block {b}")
            out[(s, b)] = part
    return out
