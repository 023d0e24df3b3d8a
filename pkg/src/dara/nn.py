"""Transformer-encoder blocks with adapter attachment slots."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterator, Optional

import numpy as np

from . import tensor as T
from .errors import ConfigError, DataError, ShapeError
from .tensor import Tensor

SEQUENTIAL = "sequential"
PARALLEL = "parallel"
INSERTION_FORMS = (SEQUENTIAL, PARALLEL)


def kaiming_normal(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    """He-normal weights in fan-in mode with the ReLU gain."""
    return rng.normal(0.0, math.sqrt(2.0 / fan_in), size=(fan_in, fan_out))


def xavier_uniform(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    bound = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=(fan_in, fan_out))


def sinusoidal_table(n: int, d: int) -> np.ndarray:
    """Fixed 1-D sine/cosine position codes, ``[n, d]``."""
    pos = np.arange(n)[:, None]
    freq = np.exp(-math.log(10000.0) * (np.arange(0, d, 2) / d))
    table = np.zeros((n, d))
    table[:, 0::2] = np.sin(pos * freq)
    table[:, 1::2] = np.cos(pos * freq)[:, : d // 2]
    return table


def sinusoidal_grid(rows: int, cols: int, d: int) -> np.ndarray:
    """2-D position codes for a row-major token grid: half the width per axis."""
    half = d // 2
    r = sinusoidal_table(rows, half)
    c = sinusoidal_table(cols, d - half)
    return np.concatenate([np.repeat(r, cols, axis=0), np.tile(c, (rows, 1))], axis=1)


def param(data) -> Tensor:
    return Tensor(np.array(data, dtype=np.float64), requires_grad=True)


class Module:
    """Parameter container.

    Public attributes that are tensors, modules, or lists of modules are
    walked by :meth:`named_parameters` in definition order. Attributes whose
    name starts with an underscore are references owned elsewhere and are
    skipped.
    """

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for name, value in vars(self).items():
            if name.startswith("_"):
                continue
            full = f"{prefix}{name}"
            if isinstance(value, Tensor):
                yield full, value
            elif isinstance(value, Module):
                yield from value.named_parameters(full + ".")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{full}.{i}.")
            elif isinstance(value, dict):
                for key, item in value.items():
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{full}.{key}.")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]


class Linear(Module):
    def __init__(self, fan_in: int, fan_out: int, rng: np.random.Generator,
                 bias: bool = True, init=xavier_uniform) -> None:
        self.W = param(init(rng, fan_in, fan_out))
        if bias:
            self.b = param(np.zeros(fan_out))
        else:
            self.b = None

    @property
    def fan_in(self) -> int:
        return self.W.shape[0]

    @property
    def fan_out(self) -> int:
        return self.W.shape[1]

    def __call__(self, x: Tensor) -> Tensor:
        y = T.matmul(x, self.W)
        return y if self.b is None else y + self.b


class LayerNorm(Module):
    def __init__(self, d: int, eps: float = 1e-5) -> None:
        self.gamma = param(np.ones(d))
        self.beta = param(np.zeros(d))
        self._eps = eps

    def __call__(self, x: Tensor) -> Tensor:
        return T.layernorm(x, self.gamma, self.beta, self._eps)


class MultiHeadAttention(Module):
    """Scaled dot-product self-attention.

    The key projection carries no bias: a key bias adds the same constant to
    every score in a query row and cancels in the softmax.
    """

    def __init__(self, d: int, heads: int, rng: np.random.Generator) -> None:
        if heads < 1 or d % heads:
            raise ConfigError(f"width {d} is not divisible by {heads} heads")
        self._heads = heads
        self.q = Linear(d, d, rng)
        self.k = Linear(d, d, rng, bias=False)
        self.v = Linear(d, d, rng)
        self.o = Linear(d, d, rng)

    @property
    def heads(self) -> int:
        return self._heads

    def _split(self, x: Tensor) -> Tensor:
        *lead, n, d = x.shape
        x = T.reshape(x, (*lead, n, self._heads, d // self._heads))
        return T.swapaxes(x, -3, -2)

    def __call__(self, x: Tensor) -> tuple[Tensor, Tensor]:
        """Return the attended sequence and the ``[..., heads, N, N]`` weights."""
        *lead, n, d = x.shape
        if d != self.q.fan_in:
            raise ShapeError(f"attention width {self.q.fan_in} got input {x.shape}")
        q, k, v = self._split(self.q(x)), self._split(self.k(x)), self._split(self.v(x))
        scores = T.matmul(q, T.swapaxes(k, -1, -2)) * (1.0 / math.sqrt(d // self._heads))
        attn = T.softmax(scores, axis=-1)
        out = T.swapaxes(T.matmul(attn, v), -3, -2)
        out = T.reshape(out, (*lead, n, d))
        return self.o(out), attn


def mha_forward(x: Tensor, mha: MultiHeadAttention) -> tuple[Tensor, Tensor]:
    return mha(x)


class FeedForward(Module):
    def __init__(self, d: int, d_ff: int, rng: np.random.Generator) -> None:
        self.fc1 = Linear(d, d_ff, rng)
        self.fc2 = Linear(d_ff, d, rng)

    def __call__(self, x: Tensor) -> Tensor:
        return self.fc2(T.relu(self.fc1(x)))


@dataclass
class Slot:
    """An adapter bound to a layer position with an insertion form.

    ``adapter.branch(x)`` must return the scaled contribution (no residual).
    """

    adapter: Module
    form: str = SEQUENTIAL

    def __post_init__(self) -> None:
        if self.form not in INSERTION_FORMS:
            raise ConfigError(f"unknown insertion form {self.form!r}")

    def apply(self, sublayer_in: Tensor, sublayer_out: Tensor) -> Tensor:
        source = sublayer_out if self.form == SEQUENTIAL else sublayer_in
        return sublayer_out + self.adapter.branch(source)


class EncoderLayer(Module):
    """Post-LN encoder layer with two optional adapter slots.

    ``slot_after_mha`` wraps the attention sublayer and ``slot_at_ffn`` the
    feed-forward sublayer. A sequential slot adapts the sublayer output, a
    parallel slot adds its branch of the sublayer input next to it::

        h = LN1(x + MHA(x) [+ adapter])
        y = LN2(h + FFN(h) [+ adapter])
    """

    def __init__(self, d: int, heads: int, rng: np.random.Generator,
                 d_ff: Optional[int] = None) -> None:
        self.mha = MultiHeadAttention(d, heads, rng)
        self.ffn = FeedForward(d, d_ff or 4 * d, rng)
        self.ln1 = LayerNorm(d)
        self.ln2 = LayerNorm(d)
        self._d = d
        self._slot_after_mha: Optional[Slot] = None
        self._slot_at_ffn: Optional[Slot] = None

    @property
    def width(self) -> int:
        return self._d

    @property
    def slot_after_mha(self) -> Optional[Slot]:
        return self._slot_after_mha

    @property
    def slot_at_ffn(self) -> Optional[Slot]:
        return self._slot_at_ffn

    def attach(self, position: str, slot: Optional[Slot]) -> None:
        if slot is not None and getattr(slot.adapter, "width", self._d) != self._d:
            raise ConfigError(
                f"adapter width {slot.adapter.width} does not match layer width {self._d}")
        if position == "mha":
            self._slot_after_mha = slot
        elif position == "ffn":
            self._slot_at_ffn = slot
        else:
            raise ConfigError(f"unknown slot position {position!r}")

    def __call__(self, x: Tensor) -> tuple[Tensor, Tensor]:
        a, attn = self.mha(x)
        if self._slot_after_mha is not None:
            a = self._slot_after_mha.apply(x, a)
        h = self.ln1(x + a)
        f = self.ffn(h)
        if self._slot_at_ffn is not None:
            f = self._slot_at_ffn.apply(h, f)
        return self.ln2(h + f), attn


def encoder_layer_forward(x: Tensor, layer: EncoderLayer) -> Tensor:
    return layer(x)[0]


def embed_tokens(ids, table: Tensor, pos: Tensor) -> Tensor:
    """Look up token rows and add the positional rows ``pos[:N]``.

    ``ids`` may carry leading batch axes; the last axis is the sequence.
    """
    ids = np.asarray(ids, dtype=np.int64)
    vocab = table.shape[0]
    if ids.size and (ids.min() < 0 or ids.max() >= vocab):
        raise DataError(f"token id out of range for vocabulary of size {vocab}")
    n = ids.shape[-1]
    if n > pos.shape[0]:
        raise DataError(f"sequence length {n} exceeds position table of {pos.shape[0]}")
    return T.gather_rows(table, ids) + pos[:n]
