"""Joint multi-domain segmentation training, fine-tuning, evaluation and benchmarking.

Points are classified by cosine similarity against a class-embedding table
shared by every domain, trained with an InfoNCE objective. Each step adds
the summed balance losses of all routed layers, scaled by lambda.
"""

from __future__ import annotations

import copy
import logging
import statistics
import time
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np
import yaml

from doremi3d import tensor as T
from doremi3d.backbone import Backbone, BackboneConfig, ForwardContext, PreparedScene, prepare_scene
from doremi3d.checkpoint import load_checkpoint, save_checkpoint
from doremi3d.data import CLASS_NAMES, NUM_CLASSES, Corpus, load_manifest, standard_corpus
from doremi3d.errors import ConfigurationError, FormatError
from doremi3d.metrics import (
    RoutingTrace,
    SegmentationScores,
    alpha_metric,
    confusion_matrix,
    expert_utilization,
    scores_from_confusion,
)
from doremi3d.moe import DoReMiLayer, LayerConfig
from doremi3d.nn import AdamW, Linear, Module, Parameter, make_rng
from doremi3d.pretrain import load_pretrained
from doremi3d.tensor import Tape, Tensor

log = logging.getLogger(__name__)

VARIANTS = ("baseline", "re", "re-dsr", "full", "custom")
LOG_CLAMP = 1e-12


# ---------------------------------------------------------------- config


@dataclass(frozen=True)
class TrainConfig:
    """Everything a training run depends on.

    ``variant`` picks one row of the ablation grid; ``custom`` uses the
    routing fields as given. ``pretrained`` of None starts from a random
    backbone.
    """

    corpus: str | None = None
    pretrained: str | None = None
    variant: str = "full"
    epochs: int = 30
    batch_scenes: int = 1
    lr: float = 4e-4
    weight_decay: float = 0.01
    balance_weight: float = 0.001
    experts: int = 8
    k_min: int = 1
    k_max: int | None = None
    top_k: int = 2
    routing: str = "dsr"
    allocation: str = "eda"
    placement: tuple[tuple[int, int], ...] | None = None
    domains: tuple[int, ...] | None = None
    temperature: float = 0.07
    seed: int = 0
    train_split: str = "train"
    eval_split: str = "eval"

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ConfigurationError(f"variant must be one of {VARIANTS}")
        if self.balance_weight < 0:
            raise ConfigurationError("balance weight must be >= 0")
        if self.epochs < 0 or self.batch_scenes < 1:
            raise ConfigurationError("epochs must be >= 0 and batch_scenes >= 1")
        if self.temperature <= 0:
            raise ConfigurationError("temperature must be positive")
        if self.placement is not None:
            object.__setattr__(self, "placement", tuple(tuple(int(v) for v in p) for p in self.placement))
        if self.domains is not None:
            object.__setattr__(self, "domains", tuple(int(d) for d in self.domains))
        self.layer_config()

    def layer_config(self) -> LayerConfig:
        v = self.variant
        if v == "baseline":
            return LayerConfig(experts=1, use_re=False)
        if v == "re":
            return LayerConfig(experts=1, use_re=True)
        if v == "re-dsr":
            return LayerConfig(experts=self.experts, routing="dsr", allocation="topk", top_k=self.top_k)
        if v == "full":
            return LayerConfig(experts=self.experts, routing="dsr", allocation="eda",
                               k_min=self.k_min, k_max=self.k_max)
        return LayerConfig(experts=self.experts, routing=self.routing, allocation=self.allocation,
                           top_k=self.top_k, k_min=self.k_min, k_max=self.k_max)

    @property
    def effective_balance_weight(self) -> float:
        """The fixed-top-k row trains without the balance term."""
        return 0.0 if self.variant == "re-dsr" else self.balance_weight

    def to_dict(self) -> dict:
        out = asdict(self)
        if self.placement is not None:
            out["placement"] = [list(p) for p in self.placement]
        if self.domains is not None:
            out["domains"] = list(self.domains)
        return out

    @classmethod
    def from_dict(cls, raw: dict | None) -> "TrainConfig":
        raw = dict(raw or {})
        known = {f.name for f in fields(cls)}
        unknown = set(raw) - known
        if unknown:
            raise ConfigurationError(f"unknown config keys: {sorted(unknown)}")
        return cls(**raw)

    @classmethod
    def from_yaml(cls, path: str | Path) -> "TrainConfig":
        raw = yaml.safe_load(Path(path).read_text())
        if raw is not None and not isinstance(raw, dict):
            raise ConfigurationError("config file must hold a mapping")
        return cls.from_dict(raw)


# ---------------------------------------------------------------- model


class ClassEmbeddingTable(Module):
    """Unit-norm class vectors shared by every domain, scored by cosine / tau."""

    def __init__(self, n_classes: int, dim: int, rng: np.random.Generator, temperature: float = 0.07):
        v = rng.normal(size=(n_classes, dim))
        self.vectors = Parameter(v / np.linalg.norm(v, axis=1, keepdims=True))
        self.temperature = float(temperature)

    @property
    def n_classes(self) -> int:
        return self.vectors.shape[0]

    def normalize(self) -> None:
        v = self.vectors.data
        self.vectors.data = v / np.linalg.norm(v, axis=1, keepdims=True)

    def logits(self, features: Tensor) -> Tensor:
        f = T.l2_normalize_rows(features)
        e = T.l2_normalize_rows(self.vectors)
        return T.mul(T.matmul(f, T.transpose(e)), 1.0 / self.temperature)


class SegmentationModel(Module):
    """Backbone with mixture layers in selected feed-forward slots, plus the class head."""

    def __init__(self, backbone_config: BackboneConfig, layer_config: LayerConfig,
                 placement, domain_ids, seed: int, backbone_state: dict | None = None,
                 n_classes: int = NUM_CLASSES, temperature: float = 0.07):
        rng = make_rng(seed, "segmentation")
        self.backbone = Backbone(backbone_config, rng)
        if backbone_state is not None:
            self.backbone.load_state_dict(backbone_state)
        self.placement = tuple(tuple(p) for p in (placement or backbone_config.default_placement()))
        self.domain_ids = tuple(int(d) for d in domain_ids)
        for s, b in self.placement:
            block = self.backbone.block(s, b)
            block.ffn = DoReMiLayer(block.ffn.state_dict(), layer_config, self.domain_ids,
                                    make_rng(seed, "doremi", s, b))
        dim = self.backbone.output_dim
        self.head = Linear(dim, dim, make_rng(seed, "head"))
        self.classes = ClassEmbeddingTable(n_classes, dim, make_rng(seed, "classes"), temperature)

    def moe_layers(self) -> list[tuple[str, DoReMiLayer]]:
        return [(f"s{s}b{b}", self.backbone.block(s, b).ffn) for s, b in self.placement]

    def set_unseen_mode(self, enabled: bool) -> None:
        for _, layer in self.moe_layers():
            if hasattr(layer, "domains"):
                layer.domains.averaged_unseen = enabled

    def forward(self, scene: PreparedScene) -> tuple[Tensor, ForwardContext]:
        """Per-point embeddings and the context holding routing side outputs."""
        ctx = ForwardContext(scene.domain_id)
        voxels = self.head(self.backbone(scene, ctx))
        return T.take_rows(voxels, scene.point_to_voxel), ctx

    def predict(self, scene: PreparedScene) -> np.ndarray:
        feats, _ = self.forward(scene)
        return np.argmax(self.classes.logits(feats).data, axis=1)


def build_model(config: TrainConfig, backbone_config: BackboneConfig, backbone_state: dict | None,
                domain_ids) -> SegmentationModel:
    return SegmentationModel(backbone_config, config.layer_config(), config.placement, domain_ids,
                             config.seed, backbone_state, NUM_CLASSES, config.temperature)


# ---------------------------------------------------------------- losses


def infonce_class_loss(features: Tensor, labels, table: ClassEmbeddingTable) -> Tensor:
    """Cross-entropy of cosine/tau logits against the true class; other classes are negatives."""
    labels = np.asarray(labels, dtype=np.int64)
    if labels.size and labels.max() >= table.n_classes:
        raise ConfigurationError("label without a class-table row")
    keep = np.nonzero(labels >= 0)[0]
    if keep.size < labels.size:
        log.info("excluded %d unlabeled points", labels.size - keep.size)
    if keep.size == 0:
        raise ConfigurationError("no labeled points")
    if keep.size < labels.size:
        features = T.take_rows(features, keep)
    logp = T.log_softmax_last(table.logits(features))
    return T.mul(T.mean(T.pick(logp, labels[keep])), -1.0)


def _clamped_log(x: Tensor, floor: float = LOG_CLAMP) -> Tensor:
    xd = x.data
    live = xd > floor

    def back(g):
        return (np.where(live, g / np.where(live, xd, 1.0), 0.0),)

    return T.custom_op(np.log(np.maximum(xd, floor)), (x,), back)


def seg_cross_entropy(probs: Tensor, labels) -> Tensor:
    """-(1/M) sum log q[i, y_i] with the log clamped at 1e-12."""
    labels = np.asarray(labels, dtype=np.int64)
    if labels.size and (labels.max() >= probs.shape[1] or labels.min() < 0):
        raise ConfigurationError("label outside [0, C)")
    return T.mul(T.mean(_clamped_log(T.pick(probs, labels))), -1.0)


@dataclass
class StepLoss:
    total: Tensor
    task: Tensor
    balance: Tensor | None
    ctx: ForwardContext


def step_loss(model: SegmentationModel, scene: PreparedScene, balance_weight: float,
              task: str = "infonce") -> StepLoss:
    """Task loss plus lambda times the summed balance losses of all routed layers."""
    feats, ctx = model.forward(scene)
    if task == "infonce":
        task_loss = infonce_class_loss(feats, scene.labels, model.classes)
    elif task == "segmentation":
        task_loss = seg_cross_entropy(T.softmax_last(model.classes.logits(feats)), scene.labels)
    else:
        raise ConfigurationError(f"unknown task {task!r}")
    balance = None
    for b in ctx.balance_losses:
        balance = b if balance is None else T.add(balance, b)
    total = task_loss if balance is None else T.add(task_loss, T.mul(balance, balance_weight))
    return StepLoss(total, task_loss, balance, ctx)


# ---------------------------------------------------------------- data


class SceneCache:
    """Generated and voxelised scenes, reused across runs that share a corpus."""

    def __init__(self):
        self._scenes: dict = {}

    def split(self, corpus: Corpus, split: str, domain_ids, n_stages: int) -> dict[int, list[PreparedScene]]:
        out = {}
        for d in domain_ids:
            spec = corpus.domain(d)
            key = (repr(spec), split, corpus.seeds(split), corpus.voxel_size_m, n_stages)
            if key not in self._scenes:
                clouds = corpus.scenes(split, [d])
                self._scenes[key] = [prepare_scene(c, n_stages, corpus.voxel_size_m) for c in clouds]
            out[d] = self._scenes[key]
        return out


def round_robin(scenes: dict[int, list[PreparedScene]], seed: int, epoch: int) -> list[PreparedScene]:
    """One scene per domain in turn; each domain shuffles with its own stream."""
    orders = {d: make_rng(seed, "order", d, epoch).permutation(len(s)) for d, s in scenes.items()}
    longest = max((len(s) for s in scenes.values()), default=0)
    out = []
    for i in range(longest):
        for d in sorted(scenes):
            if i < len(scenes[d]):
                out.append(scenes[d][orders[d][i]])
    return out


def resolve_corpus(config: TrainConfig, corpus: Corpus | None = None) -> Corpus:
    if corpus is not None:
        return corpus
    return load_manifest(config.corpus) if config.corpus else standard_corpus()


def resolve_pretrained(config: TrainConfig, pretrained=None) -> tuple[dict | None, BackboneConfig]:
    if pretrained is not None:
        return pretrained
    if config.pretrained:
        return load_pretrained(config.pretrained)
    log.warning("no pretrained backbone given; starting from random weights")
    return None, BackboneConfig()


def training_domain_ids(config: TrainConfig, corpus: Corpus) -> tuple[int, ...]:
    ids = config.domains or tuple(d.domain_id for d in corpus.training_domains)
    for d in ids:
        corpus.domain(d)
    return tuple(ids)


# ---------------------------------------------------------------- loops


def train_epochs(model: SegmentationModel, scenes: dict[int, list[PreparedScene]], epochs: int,
                 seed: int, optimizer: AdamW, balance_weight: float, batch_scenes: int = 1,
                 task: str = "infonce", progress=None) -> list[float]:
    """Serial optimisation; gradients of a batch accumulate in fixed scene order."""
    history = []
    for epoch in range(epochs):
        schedule = round_robin(scenes, seed, epoch)
        losses = []
        for start in range(0, len(schedule), batch_scenes):
            batch = schedule[start:start + batch_scenes]
            optimizer.zero_grad()
            for scene in batch:
                with Tape() as tape:
                    out = step_loss(model, scene, balance_weight, task)
                    loss = T.mul(out.total, 1.0 / len(batch))
                T.backward(tape, loss)
                losses.append(out.total.item())
            optimizer.step()
            model.classes.normalize()
        history.append(float(np.mean(losses)))
        if progress is not None:
            progress(epoch, history[-1])
    return history


@dataclass
class EvalResult:
    confusion: np.ndarray
    scores: SegmentationScores
    trace: RoutingTrace
    mean_loss: float
    per_domain: dict[int, SegmentationScores] = field(default_factory=dict)

    def alpha(self) -> dict:
        per_layer = {}
        for layer in self.trace.layers():
            per_layer[layer] = alpha_metric(self.trace.select(layer).expert_counts())
        mean = float(np.mean(list(per_layer.values()))) if per_layer else None
        return {"per_layer": per_layer, "mean": mean}

    def to_dict(self) -> dict:
        return {
            **self.scores.to_dict(CLASS_NAMES),
            "mean_loss": self.mean_loss,
            "per_domain_mIoU": {d: s.miou for d, s in self.per_domain.items()},
            "alpha": self.alpha(),
            "utilization": {d: [float(v) for v in h] for d, h in expert_utilization(self.trace).items()},
        }


def evaluate(model: SegmentationModel, scenes, unseen: bool = False) -> EvalResult:
    """Confusion-matrix metrics, mean InfoNCE loss and routing traces over ``scenes``."""
    if isinstance(scenes, dict):
        scenes = [s for d in sorted(scenes) for s in scenes[d]]
    if not scenes:
        raise ConfigurationError("evaluation split is empty")
    previous = [getattr(layer, "domains", None) and layer.domains.averaged_unseen
                for _, layer in model.moe_layers()]
    model.set_unseen_mode(unseen)
    try:
        conf = np.zeros((NUM_CLASSES, NUM_CLASSES))
        by_domain: dict[int, np.ndarray] = {}
        trace = RoutingTrace()
        losses = []
        for scene in scenes:
            feats, ctx = model.forward(scene)
            logits = model.classes.logits(feats)
            losses.append(infonce_class_loss(feats, scene.labels, model.classes).item())
            c = confusion_matrix(np.argmax(logits.data, axis=1), scene.labels, NUM_CLASSES)
            conf += c
            by_domain[scene.domain_id] = by_domain.get(scene.domain_id, 0) + c
            for layer, decision, _ in ctx.decisions:
                trace.add(layer, scene.domain_id, decision.entropy, decision.k, decision.active)
    finally:
        for (_, layer), prev in zip(model.moe_layers(), previous):
            if hasattr(layer, "domains"):
                layer.domains.averaged_unseen = bool(prev)
    return EvalResult(conf, scores_from_confusion(conf), trace, float(np.mean(losses)),
                      {d: scores_from_confusion(c) for d, c in sorted(by_domain.items())})


@dataclass
class TrainResult:
    model: SegmentationModel
    config: TrainConfig
    history: list[float]
    evaluation: EvalResult | None
    initial_state: dict

    def report(self) -> dict:
        out = {
            "variant": self.config.variant,
            "seed": self.config.seed,
            "config": self.config.to_dict(),
            "history": self.history,
            "trainable_parameters": int(sum(p.data.size for p in self.model.trainable_parameters())),
            "total_parameters": self.model.num_parameters(),
        }
        if self.evaluation is not None:
            out["eval"] = self.evaluation.to_dict()
        return out


def joint_train(config: TrainConfig, corpus: Corpus | None = None, pretrained=None,
                cache: SceneCache | None = None, progress=None, run_eval: bool = True) -> TrainResult:
    """Train one ablation row on every training domain, interleaved round-robin."""
    corpus = resolve_corpus(config, corpus)
    state, bb_config = resolve_pretrained(config, pretrained)
    domain_ids = training_domain_ids(config, corpus)
    cache = cache or SceneCache()
    model = build_model(config, bb_config, state, domain_ids)
    initial = model.state_dict()
    optimizer = AdamW(model.trainable_parameters(), lr=config.lr, weight_decay=config.weight_decay)
    scenes = cache.split(corpus, config.train_split, domain_ids, bb_config.n_stages)
    history = train_epochs(model, scenes, config.epochs, config.seed, optimizer,
                           config.effective_balance_weight, config.batch_scenes, progress=progress)
    evaluation = None
    if run_eval:
        evaluation = evaluate(model, cache.split(corpus, config.eval_split, domain_ids, bb_config.n_stages))
    return TrainResult(model, config, history, evaluation, initial)


def finetune(config: TrainConfig, model: SegmentationModel, corpus: Corpus, domain_id: int,
             epochs: int, cache: SceneCache | None = None, unseen: bool = True) -> tuple[SegmentationModel, list[float]]:
    """Adapt a copy of ``model`` to one domain with the segmentation cross-entropy task."""
    corpus.domain(domain_id)
    cache = cache or SceneCache()
    tuned = copy.deepcopy(model)
    tuned.set_unseen_mode(unseen)
    optimizer = AdamW(tuned.trainable_parameters(), lr=config.lr, weight_decay=config.weight_decay)
    scenes = cache.split(corpus, config.train_split, [domain_id], tuned.backbone.config.n_stages)
    history = train_epochs(tuned, scenes, epochs, config.seed, optimizer,
                           config.effective_balance_weight, config.batch_scenes, task="segmentation")
    tuned.set_unseen_mode(False)
    return tuned, history


# ---------------------------------------------------------------- checkpoints


def save_model(path, model: SegmentationModel, config: TrainConfig) -> str:
    bb = model.backbone.config
    meta = {
        "kind": "segmentation-model",
        "config": config.to_dict(),
        "backbone": {"widths": list(bb.widths), "blocks": list(bb.blocks), "in_dim": bb.in_dim,
                     "ffn_ratio": bb.ffn_ratio, "pool_factor": bb.pool_factor},
        "placement": [list(p) for p in model.placement],
        "domain_ids": list(model.domain_ids),
        "n_classes": model.classes.n_classes,
    }
    return save_checkpoint(path, model.state_dict(), meta)


def load_model(path) -> tuple[SegmentationModel, TrainConfig]:
    state, meta = load_checkpoint(path)
    if meta.get("kind") != "segmentation-model":
        raise FormatError("not a segmentation-model checkpoint")
    config = TrainConfig.from_dict(meta["config"])
    b = meta["backbone"]
    bb = BackboneConfig(tuple(b["widths"]), tuple(b["blocks"]), b["in_dim"], b["ffn_ratio"], b["pool_factor"])
    model = SegmentationModel(bb, config.layer_config(), meta["placement"], meta["domain_ids"],
                              config.seed, None, meta["n_classes"], config.temperature)
    model.load_state_dict(state)
    return model, config


# ---------------------------------------------------------------- analysis


def activated_parameters(model: SegmentationModel, trace: RoutingTrace) -> dict:
    """Total parameters with each bank's K experts replaced by its mean active count."""
    total = model.num_parameters()
    out = {"total": total, "per_layer_mean_k": {}}
    activated = float(total)
    for name, layer in model.moe_layers():
        ffn = layer.bank.do_experts[0].num_parameters()
        if layer.K == 1:
            mean_k = 1.0
        else:
            sel = trace.select(name)
            mean_k = float(np.concatenate(sel.k).mean()) if sel.k else float(layer.K)
        out["per_layer_mean_k"][name] = mean_k
        activated += (mean_k - layer.K) * ffn
    out["activated"] = activated
    return out


def bench(model: SegmentationModel, scenes: list[PreparedScene], passes: int = 5, unseen: bool = False) -> dict:
    """Activated-parameter count and throughput (scenes/s, median over timed passes)."""
    result = evaluate(model, scenes, unseen)
    rates = []
    for _ in range(passes):
        start = time.perf_counter()
        for scene in scenes:
            model.predict(scene)
        rates.append(len(scenes) / (time.perf_counter() - start))
    return {**activated_parameters(model, result.trace), "scenes_per_second": statistics.median(rates)}


def plant_domain_route(model: SegmentationModel, domain_id: int, expert: int,
                       scenes: list[PreparedScene], steps: int = 40, step_size: float = 10.0) -> None:
    """Move one domain's embedding rows so its tokens route to ``expert`` in every routed layer.

    Only the embedding rows change; each step follows the normalised gradient of
    the mean log-probability of ``expert``.
    """
    targets = [(name, layer) for name, layer in model.moe_layers() if hasattr(layer, "domains")]
    if not targets:
        raise ConfigurationError("model has no domain-routed layers")
    rows = {name: layer.domains.domain_ids.index(domain_id) for name, layer in targets}
    for _ in range(steps):
        grads = {name: 0.0 for name, _ in targets}
        for scene in scenes:
            with Tape() as tape:
                _, ctx = model.forward(scene)
                obj = None
                for _, probs in ctx.route_probs:
                    col = np.zeros((probs.shape[1], 1))
                    col[expert, 0] = 1.0
                    term = T.mean(_clamped_log(T.matmul(probs, col)))
                    obj = term if obj is None else T.add(obj, term)
                loss = T.mul(obj, -1.0)
            got = T.backward(tape, loss)
            for name, layer in targets:
                g = got.get(layer.domains.embeddings)
                if g is not None:
                    grads[name] = grads[name] + g[rows[name]]
        for name, layer in targets:
            g = np.asarray(grads[name])
            norm = np.linalg.norm(g)
            if norm > 0:
                emb = layer.domains.embeddings.data.copy()
                emb[rows[name]] -= step_size * g / norm
                layer.domains.embeddings.data = emb
            layer.domains.embeddings.grad = None


def run_ablation(base: TrainConfig, variants=("baseline", "re", "re-dsr", "full"), seeds=(0, 1, 2, 3, 4),
                 corpus: Corpus | None = None, pretrained=None, cache: SceneCache | None = None,
                 progress=None) -> dict[tuple[str, int], TrainResult]:
    """The ablation grid from one base config: every variant under every seed."""
    corpus = resolve_corpus(base, corpus)
    pretrained = resolve_pretrained(base, pretrained)
    cache = cache or SceneCache()
    out = {}
    for seed in seeds:
        for variant in variants:
            cfg = replace(base, variant=variant, seed=int(seed))
            out[(variant, int(seed))] = joint_train(cfg, corpus, pretrained, cache)
            if progress is not None:
                progress(variant, seed, out[(variant, int(seed))])
    return out


def write_report(path, report: dict) -> None:
    Path(path).write_text(yaml.safe_dump(_plain(report), sort_keys=True))


def _plain(obj):
    if isinstance(obj, dict):
        return {(k if isinstance(k, (str, int)) else str(k)): _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    if isinstance(obj, np.generic):
        return obj.item()
    if isinstance(obj, np.ndarray):
        return _plain(obj.tolist())
    return obj
