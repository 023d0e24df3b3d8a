"""Domain-aware and relation-aware bottleneck adapters.

A DA adapter is a residual bottleneck ``x + s * (relu(x Wd + bd) Wu + bu)``.
An RA adapter has a per-branch down projection and splits its up projection
into a branch-unique block of ``C - Cs`` columns and a block of ``Cs``
columns whose weights live in a :class:`SharedWeightRegistry` and are read by
both the vision and the language branch. It returns ``s * f`` without a
residual; the host layer supplies it.
"""

from __future__ import annotations

from typing import Optional

import numpy as np

from . import tensor as T
from .errors import ConfigError, RegistryError
from .nn import Linear, Module, kaiming_normal, param
from .tensor import Tensor

VISION = "vision"
LANGUAGE = "language"


class DAAdapter(Module):
    def __init__(self, width: int, bottleneck: int, scale: float,
                 rng: np.random.Generator) -> None:
        if bottleneck < 1:
            raise ConfigError("DA bottleneck must be at least 1")
        self.down = Linear(width, bottleneck, rng, init=kaiming_normal)
        self.up = Linear(bottleneck, width, rng, init=kaiming_normal)
        self._scale = float(scale)

    @property
    def width(self) -> int:
        return self.down.fan_in

    @property
    def scale(self) -> float:
        return self._scale

    def branch(self, x: Tensor) -> Tensor:
        if x.shape[-1] != self.width:
            raise ConfigError(f"DA adapter of width {self.width} got input {x.shape}")
        return self.up(T.relu(self.down(x))) * self._scale

    def __call__(self, x: Tensor) -> Tensor:
        return x + self.branch(x)


def da_forward(x: Tensor, adapter: DAAdapter) -> Tensor:
    return adapter(x)


class SharedUp(Module):
    """Single-storage shared up projection ``[Cd_ra x Cs]`` plus its bias."""

    def __init__(self, bottleneck: int, share_dim: int, rng: np.random.Generator) -> None:
        self.W = param(kaiming_normal(rng, bottleneck, share_dim))
        self.b = param(np.zeros(share_dim))

    def __call__(self, z: Tensor) -> Tensor:
        return T.matmul(z, self.W) + self.b


class SharedWeightRegistry(Module):
    """Owns every shared up projection, keyed by ``(slot, pair index)``."""

    def __init__(self) -> None:
        self._entries: dict[tuple[str, int], SharedUp] = {}

    def create(self, slot: str, index: int, bottleneck: int, share_dim: int,
               rng: np.random.Generator) -> SharedUp:
        key = (slot, index)
        if key in self._entries:
            raise RegistryError(f"shared projection {key} already exists")
        entry = self._entries[key] = SharedUp(bottleneck, share_dim, rng)
        return entry

    def get(self, slot: str, index: int) -> SharedUp:
        try:
            return self._entries[(slot, index)]
        except KeyError:
            raise RegistryError(f"no shared projection registered for {(slot, index)}") from None

    def __contains__(self, key) -> bool:
        return key in self._entries

    def __len__(self) -> int:
        return len(self._entries)

    def keys(self) -> list[tuple[str, int]]:
        return list(self._entries)

    def named_parameters(self, prefix: str = ""):
        for (slot, index), entry in self._entries.items():
            yield from entry.named_parameters(f"{prefix}{slot}.{index}.")


class RAAdapter(Module):
    def __init__(self, branch_tag: str, width: int, bottleneck: int, share_dim: int,
                 scale: float, shared_key: Optional[tuple[str, int]],
                 registry: SharedWeightRegistry, rng: np.random.Generator) -> None:
        if branch_tag not in (VISION, LANGUAGE):
            raise ConfigError(f"unknown branch tag {branch_tag!r}")
        if not 0 <= share_dim <= width:
            raise ConfigError(f"share dim {share_dim} outside [0, {width}]")
        if bottleneck < 1:
            raise ConfigError("RA bottleneck must be at least 1")
        self._branch_tag = branch_tag
        self._width = width
        self._share_dim = share_dim
        self._scale = float(scale)
        self.down = Linear(width, bottleneck, rng, init=kaiming_normal)
        if width - share_dim > 0:
            self.up_unique = Linear(bottleneck, width - share_dim, rng, init=kaiming_normal)
        else:
            self.up_unique = None
        self._registry = registry
        self._shared_key = shared_key if share_dim > 0 else None
        if self._shared_key is not None:
            shared = registry.get(*self._shared_key)
            if shared.W.shape != (bottleneck, share_dim):
                raise ConfigError(
                    f"shared projection {self._shared_key} has shape {shared.W.shape}, "
                    f"adapter needs {(bottleneck, share_dim)}")

    @property
    def width(self) -> int:
        return self._width

    @property
    def branch_tag(self) -> str:
        return self._branch_tag

    @property
    def share_dim(self) -> int:
        return self._share_dim

    @property
    def unique_width(self) -> int:
        return self._width - self._share_dim

    @property
    def shared_key(self) -> Optional[tuple[str, int]]:
        return self._shared_key

    @property
    def shared(self) -> Optional[SharedUp]:
        if self._shared_key is None:
            return None
        return self._registry.get(*self._shared_key)

    def branch(self, x: Tensor) -> Tensor:
        if x.shape[-1] != self._width:
            raise ConfigError(f"RA adapter of width {self._width} got input {x.shape}")
        z = T.relu(self.down(x))
        parts = []
        if self.up_unique is not None:
            parts.append(self.up_unique(z))
        if self._shared_key is not None:
            parts.append(self.shared(z))
        f = parts[0] if len(parts) == 1 else T.concat(parts, axis=-1)
        return f * self._scale

    __call__ = branch


def ra_forward(x: Tensor, adapter: RAAdapter) -> Tensor:
    return adapter(x)


def bind_shared_pairs(lv: int, ll: int) -> dict[str, list[int]]:
    """Map each layer to a shared-projection index.

    Vision layer ``i`` uses projection ``i``; language layer ``j`` uses
    ``floor(j * lv / ll)``. Exactly ``lv`` projections are referenced.
    """
    if lv < 1 or ll < 1:
        raise ConfigError("layer counts must be positive")
    return {VISION: list(range(lv)), LANGUAGE: [j * lv // ll for j in range(ll)]}
