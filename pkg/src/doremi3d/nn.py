"""Parameter containers, small layers and the AdamW optimizer."""

from __future__ import annotations

import zlib
from typing import Iterator, Sequence

import numpy as np

from doremi3d import tensor as T
from doremi3d.errors import ConfigurationError
from doremi3d.tensor import Tensor


def make_rng(seed: int, *keys) -> np.random.Generator:
    """Independent RNG stream keyed by ``seed`` and a path of names/ints."""
    spawn = tuple(k if isinstance(k, int) else zlib.crc32(str(k).encode()) for k in keys)
    return np.random.default_rng(np.random.SeedSequence(int(seed), spawn_key=spawn))


class Parameter(Tensor):
    """A named model weight; ``trainable=False`` freezes it."""

    __slots__ = ()

    def __init__(self, data, trainable: bool = True, name: str | None = None):
        super().__init__(data, requires_grad=trainable, name=name)


class Module:
    """Minimal parameter-tree container.

    Parameters are discovered from attributes in assignment order, so the
    traversal (and therefore checkpoints and optimizer state) is deterministic.
    """

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Parameter]]:
        for key, value in vars(self).items():
            name = f"{prefix}{key}"
            if isinstance(value, Parameter):
                yield name, value
            elif isinstance(value, Module):
                yield from value.named_parameters(name + ".")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Parameter):
                        yield f"{name}.{i}", item
                    elif isinstance(item, Module):
                        yield from item.named_parameters(f"{name}.{i}.")

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]

    def trainable_parameters(self) -> list[Parameter]:
        return [p for p in self.parameters() if p.requires_grad]

    def freeze(self) -> None:
        for p in self.parameters():
            p.requires_grad = False

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray], strict: bool = True) -> None:
        own = dict(self.named_parameters())
        if strict:
            missing = set(own) - set(state)
            extra = set(state) - set(own)
            if missing or extra:
                raise ConfigurationError(
                    f"state mismatch: missing={sorted(missing)} unexpected={sorted(extra)}"
                )
        for name, p in own.items():
            if name not in state:
                continue
            value = np.asarray(state[name], dtype=np.float64)
            if value.shape != p.data.shape:
                raise ConfigurationError(f"{name}: shape {value.shape} != {p.data.shape}")
            p.data = value.copy()

    def num_parameters(self) -> int:
        return int(sum(p.data.size for p in self.parameters()))


class Linear(Module):
    def __init__(self, din: int, dout: int, rng: np.random.Generator):
        bound = 1.0 / np.sqrt(din)
        self.weight = Parameter(rng.uniform(-bound, bound, size=(din, dout)))
        self.bias = Parameter(np.zeros(dout))

    def __call__(self, x: Tensor) -> Tensor:
        return T.linear(x, self.weight, self.bias)


class LayerNorm(Module):
    def __init__(self, dim: int):
        self.gain = Parameter(np.ones(dim))
        self.offset = Parameter(np.zeros(dim))

    def __call__(self, x: Tensor) -> Tensor:
        return T.layer_norm(x, self.gain, self.offset)


class MLP(Module):
    """Stack of :class:`Linear` layers with GELU between them."""

    def __init__(self, widths: Sequence[int], rng: np.random.Generator):
        if len(widths) < 2:
            raise ConfigurationError("an MLP needs at least input and output widths")
        self.layers = [Linear(a, b, rng) for a, b in zip(widths[:-1], widths[1:])]

    @property
    def widths(self) -> list[int]:
        return [self.layers[0].weight.shape[0]] + [l.weight.shape[1] for l in self.layers]

    def __call__(self, x: Tensor) -> Tensor:
        return T.mlp(x, [(l.weight, l.bias) for l in self.layers])


class FFN(MLP):
    """Transformer feed-forward block, D -> ratio*D -> D."""

    def __init__(self, dim: int, rng: np.random.Generator, ratio: int = 4):
        super().__init__([dim, ratio * dim, dim], rng)

    def __call__(self, x: Tensor, ctx=None) -> Tensor:
        return super().__call__(x)


class AdamW:
    """Adam with decoupled weight decay.

    Updates rebind ``p.data`` to a fresh array rather than writing in place,
    so snapshots taken before a step stay valid.
    """

    def __init__(
        self,
        params: Sequence[Parameter],
        lr: float = 4e-4,
        betas: tuple[float, float] = (0.9, 0.999),
        eps: float = 1e-8,
        weight_decay: float = 0.01,
    ):
        self.params = [p for p in params if p.requires_grad]
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self) -> None:
        self.t += 1
        c1 = 1.0 - self.beta1**self.t
        c2 = 1.0 - self.beta2**self.t
        for i, p in enumerate(self.params):
            g = p.grad
            if g is None:
                g = np.zeros_like(p.data)
            m, v = self.m[i], self.v[i]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            sq = g * g
            sq *= 1.0 - self.beta2
            v += sq
            denom = np.sqrt(v / c2, out=sq)
            denom += self.eps
            update = np.divide(m, denom, out=denom)
            update *= self.lr / c1
            new = p.data * (1.0 - self.lr * self.weight_decay)
            new -= update
            p.data = new
