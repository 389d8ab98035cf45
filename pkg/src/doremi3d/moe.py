"""DoReMi mixture layer: frozen representation expert plus routed domain experts.

Routing input is a submanifold convolution of the tokens plus a projected
domain embedding. Gate probabilities set a per-token expert count through
their Shannon entropy; the active experts are weighted by their raw
(unrenormalised) probabilities, and the frozen expert's output is added on top.

Discrete choices (top-k mask, ceiling, entropy-to-count map) are constants
for the backward pass. Gradients reach the gate only through the surviving
probabilities and through the mean probabilities of the balance loss.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from doremi3d import tensor as T
from doremi3d.errors import ConfigurationError, DomainLookupError
from doremi3d.nn import FFN, MLP, Module, Parameter
from doremi3d.sparse import Rulebook, SparseConvKernel
from doremi3d.tensor import Tensor

ROUTING_MODES = ("dsr", "token")
ALLOCATION_MODES = ("eda", "topk")


@dataclass(frozen=True)
class LayerConfig:
    """How one mixture layer routes.

    ``experts == 1`` means a single trainable copy with no router at all.
    """

    experts: int = 8
    routing: str = "dsr"
    allocation: str = "eda"
    top_k: int = 2
    k_min: int = 1
    k_max: int | None = None
    use_re: bool = True
    domain_dim: int = 32

    def __post_init__(self):
        if self.experts < 1:
            raise ConfigurationError("need at least one expert")
        if self.routing not in ROUTING_MODES:
            raise ConfigurationError(f"routing must be one of {ROUTING_MODES}")
        if self.allocation not in ALLOCATION_MODES:
            raise ConfigurationError(f"allocation must be one of {ALLOCATION_MODES}")
        if self.experts > 1:
            if not 1 <= self.k_min <= self.resolved_k_max <= self.experts:
                raise ConfigurationError("need 1 <= k_min <= k_max <= K")
            if self.allocation == "topk" and not 1 <= self.top_k <= self.experts:
                raise ConfigurationError("top_k must lie in [1, K]")

    @property
    def resolved_k_max(self) -> int:
        return self.experts if self.k_max is None else self.k_max


@dataclass
class RoutingDecision:
    logits: np.ndarray
    probs: np.ndarray
    entropy: np.ndarray
    k: np.ndarray
    active: np.ndarray
    weights: np.ndarray
    order: np.ndarray

    @property
    def n_experts(self) -> int:
        return self.probs.shape[1]

    def active_sets(self) -> list[np.ndarray]:
        """Active expert ids per token, highest probability first."""
        return [self.order[i, : self.k[i]] for i in range(self.k.size)]


@dataclass
class BalanceStats:
    c: np.ndarray
    r: np.ndarray
    loss: float


# ---------------------------------------------------------------- allocation


def shannon_entropy(p: np.ndarray) -> np.ndarray:
    """Row entropy in nats with 0 * ln 0 taken as 0."""
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(p > 0, p * np.log(np.where(p > 0, p, 1.0)), 0.0)
    return -terms.sum(axis=-1)


def entropy_to_k(entropy: np.ndarray, n_experts: int, k_min: int, k_max: int) -> np.ndarray:
    """Linear entropy-to-count map with ceiling, clamped to [k_min, k_max]."""
    raw = np.ceil(k_min + (np.asarray(entropy) / math.log(n_experts)) * (k_max - k_min))
    # clamp guards the rounding overshoot of a uniform row's entropy past ln K
    return np.clip(raw, k_min, k_max).astype(np.int64)


def _allocate(logits: np.ndarray, probs: np.ndarray, k: np.ndarray) -> RoutingDecision:
    n, K = probs.shape
    order = np.argsort(-probs, axis=1, kind="stable")
    ranks = np.empty_like(order)
    ranks[np.arange(n)[:, None], order] = np.arange(K)[None, :]
    active = ranks < k[:, None]
    weights = np.where(active, probs, 0.0)
    return RoutingDecision(logits, probs, shannon_entropy(probs), k, active, weights, order)


def eda_allocate(g, k_min: int = 1, k_max: int | None = None, forced_k=None) -> RoutingDecision:
    """Entropy-controlled allocation from routing logits ``g`` (N x K).

    ``forced_k`` (an int or per-token array) bypasses the entropy map, which
    gives the fixed top-k router used by conventional mixtures.
    """
    logits = np.asarray(g.data if isinstance(g, Tensor) else g, dtype=np.float64)
    if logits.ndim != 2:
        raise ConfigurationError("routing logits must be N x K")
    K = logits.shape[1]
    k_max = K if k_max is None else k_max
    probs = T._softmax(logits)
    if forced_k is not None:
        k = np.broadcast_to(np.asarray(forced_k, dtype=np.int64), (logits.shape[0],)).copy()
        if k.min() < 1 or k.max() > K:
            raise ConfigurationError("forced k must lie in [1, K]")
    else:
        if K < 2 or not 1 <= k_min <= k_max <= K:
            raise ConfigurationError("need K >= 2 and 1 <= k_min <= k_max <= K")
        k = entropy_to_k(shannon_entropy(probs), K, k_min, k_max)
    return _allocate(logits, probs, k)


def routing_weights(probs: Tensor, decision: RoutingDecision) -> Tensor:
    """Differentiable weights: probabilities on the active set, zero elsewhere."""
    return T.mul(probs, decision.active.astype(np.float64))


def balance_loss(decision: RoutingDecision, probs: Tensor | None = None) -> tuple[Tensor, BalanceStats]:
    """``K * sum_j c_j r_j``; routed fractions c are constants, mean probabilities r carry gradient."""
    probs = Tensor(decision.probs) if probs is None else probs
    K = decision.n_experts
    c = decision.active.mean(axis=0)
    r = T.mean(probs, axis=0)
    loss = T.mul(T.sum_(T.mul(r, c)), float(K))
    return loss, BalanceStats(c, r.data.copy(), loss.item())


# ---------------------------------------------------------------- experts


class ExpertBank(Module):
    """K trainable experts plus an optional frozen representation expert."""

    def __init__(self, do_experts: list[FFN], re_expert: FFN | None, k_min: int = 1, k_max: int | None = None):
        self.do_experts = list(do_experts)
        self.re_expert = re_expert
        if re_expert is not None:
            re_expert.freeze()
        self.k_min = k_min
        self.k_max = len(do_experts) if k_max is None else k_max

    @property
    def K(self) -> int:
        return len(self.do_experts)

    @classmethod
    def from_ffn_state(cls, state: dict[str, np.ndarray], K: int, with_re: bool = True,
                       k_min: int = 1, k_max: int | None = None) -> "ExpertBank":
        dim = state["layers.0.weight"].shape[0]
        ratio = state["layers.0.weight"].shape[1] // dim
        rng = np.random.default_rng(0)

        def copy() -> FFN:
            ffn = FFN(dim, rng, ratio)
            ffn.load_state_dict(state)
            return ffn

        return cls([copy() for _ in range(K)], copy() if with_re else None, k_min, k_max)


def expert_mix(f: Tensor, experts: list, decision: RoutingDecision, probs: Tensor | None = None,
               sparse: bool = True) -> Tensor:
    """Weighted sum of expert outputs; experts see the original tokens ``f``.

    The sparse path evaluates each expert only on its active tokens; the dense
    path evaluates every expert everywhere and masks afterwards.
    """
    probs = Tensor(decision.probs) if probs is None else probs
    n, K = decision.probs.shape
    if len(experts) != K:
        raise ConfigurationError(f"{len(experts)} experts for {K} routing columns")
    if not sparse:
        w = routing_weights(probs, decision)
        out = None
        for j, expert in enumerate(experts):
            col = np.zeros((K, 1))
            col[j, 0] = 1.0
            term = T.mul(expert(f), T.matmul(w, col))
            out = term if out is None else T.add(out, term)
        return out
    out = None
    for j, expert in enumerate(experts):
        idx = np.nonzero(decision.active[:, j])[0]
        if idx.size == 0:
            continue
        col = np.zeros((K, 1))
        col[j, 0] = 1.0
        wj = T.matmul(T.take_rows(probs, idx), col)
        term = T.mul(expert(T.take_rows(f, idx)), wj)
        term = T.scatter_rows(n, idx, term)
        out = term if out is None else T.add(out, term)
    if out is None:
        return T.mul(f, 0.0)
    return out


def fuse(f: Tensor, bank: ExpertBank, decision: RoutingDecision, probs: Tensor | None = None,
         sparse: bool = True) -> Tensor:
    """Domain-expert mixture plus the frozen representation expert."""
    out = expert_mix(f, bank.do_experts, decision, probs, sparse)
    if bank.re_expert is not None:
        out = T.add(out, bank.re_expert(f))
    return out


# ---------------------------------------------------------------- routing input


class DomainEmbeddingTable(Module):
    """Learnable per-dataset vectors and the MLP lifting them to feature width."""

    def __init__(self, domain_ids, dim: int, rng: np.random.Generator, embed_dim: int = 32):
        self.domain_ids = [int(d) for d in domain_ids]
        if len(set(self.domain_ids)) != len(self.domain_ids):
            raise ConfigurationError("duplicate domain ids")
        self.embeddings = Parameter(rng.normal(0.0, 0.02, size=(len(self.domain_ids), embed_dim)))
        self.project = MLP([embed_dim, dim, dim], rng)
        self.averaged_unseen = False

    def embedding(self, domain_id: int) -> Tensor:
        """Raw embedding row d (1 x Dd); unknown ids need averaged-unseen mode."""
        if domain_id in self.domain_ids:
            i = self.domain_ids.index(domain_id)
            return T.take_rows(self.embeddings, np.array([i]))
        if not self.averaged_unseen:
            raise DomainLookupError(f"unknown domain {domain_id}")
        return self.unseen_embedding()

    def unseen_embedding(self) -> Tensor:
        if not self.domain_ids:
            raise DomainLookupError("no training domains to average")
        return T.mean(self.embeddings, axis=0, keepdims=True)

    def __call__(self, domain_id: int) -> Tensor:
        """Projected e_d (1 x D)."""
        return self.project(self.embedding(domain_id))


def unseen_domain_embedding(table: DomainEmbeddingTable) -> Tensor:
    """Projection of the mean training-domain embedding."""
    return table.project(table.unseen_embedding())


def routing_input(f: Tensor, rulebook: Rulebook, conv: SparseConvKernel,
                  table: DomainEmbeddingTable, domain_id: int) -> Tensor:
    """Spatially convolved tokens plus the broadcast domain vector."""
    return T.add(conv(f, rulebook), table(domain_id))


def gate(z: Tensor, gating: MLP) -> Tensor:
    return gating(z)


# ---------------------------------------------------------------- the layer


class DoReMiLayer(Module):
    """Drop-in replacement for a block's feed-forward slot."""

    def __init__(self, ffn_state: dict[str, np.ndarray], config: LayerConfig,
                 domain_ids, rng: np.random.Generator):
        self.config = config
        self.bank = ExpertBank.from_ffn_state(ffn_state, config.experts, config.use_re,
                                              config.k_min, config.resolved_k_max)
        dim = self.bank.do_experts[0].widths[0]
        self.dim = dim
        if config.experts > 1:
            if config.routing == "dsr":
                self.dsr_conv = SparseConvKernel(dim, dim, rng)
                self.domains = DomainEmbeddingTable(domain_ids, dim, rng, config.domain_dim)
            self.gate = MLP([dim, dim, config.experts], rng)

    @property
    def K(self) -> int:
        return self.config.experts

    def route(self, f: Tensor, ctx) -> tuple[Tensor, RoutingDecision]:
        if self.config.routing == "dsr":
            z = routing_input(f, ctx.rulebook, self.dsr_conv, self.domains, ctx.domain_id)
        else:
            z = f
        g = gate(z, self.gate)
        probs = T.softmax_last(g)
        cfg = self.config
        if cfg.allocation == "eda":
            decision = eda_allocate(g, cfg.k_min, cfg.resolved_k_max)
        else:
            decision = eda_allocate(g, forced_k=cfg.top_k)
        return probs, decision

    def __call__(self, f: Tensor, ctx) -> Tensor:
        if self.K == 1:
            out = self.bank.do_experts[0](f)
            if self.bank.re_expert is not None:
                out = T.add(out, self.bank.re_expert(f))
            return out
        probs, decision = self.route(f, ctx)
        loss, stats = balance_loss(decision, probs)
        ctx.balance_losses.append(loss)
        ctx.decisions.append((ctx.layer, decision, stats))
        ctx.route_probs.append((ctx.layer, probs))
        return fuse(f, self.bank, decision, probs)


def build_layer_from_pretrained(ckpt: dict, K: int, stage: int, block: int | None = None,
                                domain_ids=(0,), seed: int = 0,
                                config: LayerConfig | None = None) -> DoReMiLayer:
    """Duplicate a pretrained feed-forward network into a full mixture layer.

    ``ckpt`` maps (stage, block) to FFN weights, as produced by
    :func:`doremi3d.pretrain.export_pretrained_ffn`. ``block`` defaults to the
    stage's last block.
    """
    from doremi3d.nn import make_rng

    keys = sorted(k for k in ckpt if k[0] == stage)
    if not keys:
        raise ConfigurationError(f"checkpoint has no FFN for stage {stage}")
    key = keys[-1] if block is None else (stage, block)
    if key not in ckpt:
        raise ConfigurationError(f"checkpoint has no FFN for {key}")
    config = config or LayerConfig(experts=K)
    if config.experts != K:
        raise ConfigurationError("K disagrees with layer config")
    return DoReMiLayer(ckpt[key], config, domain_ids, make_rng(seed, "doremi", *key))
