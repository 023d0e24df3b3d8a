"""End-to-end grounding model: two adapter-slotted backbones, a fusion
encoder with a learnable [REG] token, and a sigmoid box head."""

from __future__ import annotations

import dataclasses
import json
import struct
from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import tensor as T
from .adapters import (LANGUAGE, VISION, DAAdapter, RAAdapter, SharedWeightRegistry,
                       bind_shared_pairs)
from .data import VOCAB
from .errors import ConfigError, DataError
from .nn import (INSERTION_FORMS, PARALLEL, SEQUENTIAL, EncoderLayer, Linear, Module, Slot,
                 embed_tokens, param, sinusoidal_grid, sinusoidal_table)
from .tensor import Tensor

ADAPTER_KINDS = (None, "da", "ra")

# (adapter after MHA, adapter at FFN) for each combination form
SLOT_PLANS = {
    "da_ra": ("da", "ra"),
    "da_da": ("da", "da"),
    "ra_ra": ("ra", "ra"),
    "ra_da": ("ra", "da"),
}

GROUPS = ("vision-backbone", "language-backbone", "da-adapters", "ra-adapters",
          "projections", "fusion", "head", "embeddings")
BACKBONE_GROUPS = ("vision-backbone", "language-backbone")
ADAPTER_GROUPS = ("da-adapters", "ra-adapters")

CHECKPOINT_MAGIC = b"DARA-CKPT/1\n"
PIXEL_MEAN = 0.5
PIXEL_SCALE = 0.5


@dataclass(frozen=True)
class ModelConfig:
    vision_layers: int = 6
    language_layers: int = 12
    vision_width: int = 256
    language_width: int = 768
    fusion_width: int = 256
    fusion_layers: int = 6
    heads: int = 8
    ffn_mult: int = 4
    head_hidden: int = 256
    image_size: int = 640
    patch_size: int = 32
    vocab_size: int = len(VOCAB)
    max_text_len: int = 20
    da_bottleneck: int = 128
    ra_bottleneck: int = 128
    share_dim: int = 256
    scale: float = 0.1
    mha_adapter: Optional[str] = "da"
    ffn_adapter: Optional[str] = "ra"
    mha_form: str = SEQUENTIAL
    ffn_form: str = PARALLEL
    freeze_backbones: bool = True

    def __post_init__(self) -> None:
        for name in ("vision_layers", "language_layers", "fusion_layers", "heads",
                     "vision_width", "language_width", "fusion_width", "patch_size",
                     "da_bottleneck", "ra_bottleneck", "head_hidden", "ffn_mult"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive")
        for name in ("vision_width", "language_width", "fusion_width"):
            if getattr(self, name) % self.heads:
                raise ConfigError(f"{name}={getattr(self, name)} not divisible by {self.heads} heads")
        if self.image_size % self.patch_size:
            raise ConfigError(f"image size {self.image_size} not divisible by patch {self.patch_size}")
        if not 0 <= self.share_dim <= min(self.vision_width, self.language_width):
            raise ConfigError(f"share_dim {self.share_dim} exceeds min(Cv, Cl)")
        if self.mha_adapter not in ADAPTER_KINDS or self.ffn_adapter not in ADAPTER_KINDS:
            raise ConfigError(f"adapter kinds must be one of {ADAPTER_KINDS}")
        if self.mha_form not in INSERTION_FORMS or self.ffn_form not in INSERTION_FORMS:
            raise ConfigError(f"insertion forms must be one of {INSERTION_FORMS}")
        if self.max_text_len < 2:
            raise ConfigError("max_text_len must leave room for [CLS] and [SEP]")

    @property
    def num_patches(self) -> int:
        return (self.image_size // self.patch_size) ** 2

    @property
    def patch_grid(self) -> tuple[int, int]:
        n = self.image_size // self.patch_size
        return n, n

    @property
    def slot_plan(self) -> Optional[str]:
        for name, kinds in SLOT_PLANS.items():
            if kinds == (self.mha_adapter, self.ffn_adapter):
                return name
        return None

    def with_slot_plan(self, plan: str) -> "ModelConfig":
        if plan not in SLOT_PLANS:
            raise ConfigError(f"unknown slot plan {plan!r}; expected one of {list(SLOT_PLANS)}")
        mha, ffn = SLOT_PLANS[plan]
        return dataclasses.replace(self, mha_adapter=mha, ffn_adapter=ffn)

    def without_adapters(self) -> "ModelConfig":
        return dataclasses.replace(self, mha_adapter=None, ffn_adapter=None)

    def replace(self, **changes) -> "ModelConfig":
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        fields = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - fields
        if unknown:
            raise ConfigError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def full(cls) -> "ModelConfig":
        """Full-size widths and depths (patch embedding stands in for the CNN stem)."""
        return cls()

    @classmethod
    def tiny(cls) -> "ModelConfig":
        """Smallest configuration used for gradient checks."""
        return cls(vision_layers=1, language_layers=2, vision_width=8, language_width=12,
                   fusion_width=8, fusion_layers=1, heads=2, head_hidden=8, image_size=16,
                   patch_size=8, max_text_len=8, da_bottleneck=3, ra_bottleneck=3,
                   share_dim=4)

    @classmethod
    def desk(cls) -> "ModelConfig":
        """Configuration of the desk-scale adapter ablation."""
        return cls(vision_layers=2, language_layers=4, vision_width=32, language_width=48,
                   fusion_width=32, fusion_layers=2, heads=4, head_hidden=64, image_size=32,
                   patch_size=8, max_text_len=8, da_bottleneck=8, ra_bottleneck=8,
                   share_dim=16)


class VisionBackbone(Module):
    def __init__(self, cfg: ModelConfig, rng: np.random.Generator) -> None:
        p = cfg.patch_size
        self.patch = Linear(p * p * 3, cfg.vision_width, rng)
        self.pos = param(sinusoidal_grid(*cfg.patch_grid, cfg.vision_width))
        self.layers = [EncoderLayer(cfg.vision_width, cfg.heads, rng,
                                    cfg.ffn_mult * cfg.vision_width)
                       for _ in range(cfg.vision_layers)]


class LanguageBackbone(Module):
    def __init__(self, cfg: ModelConfig, rng: np.random.Generator) -> None:
        self.tok = param(rng.normal(0.0, 1.0, size=(cfg.vocab_size, cfg.language_width)))
        self.pos = param(sinusoidal_table(cfg.max_text_len, cfg.language_width))
        self.layers = [EncoderLayer(cfg.language_width, cfg.heads, rng,
                                    cfg.ffn_mult * cfg.language_width)
                       for _ in range(cfg.language_layers)]


class BoxHead(Module):
    def __init__(self, d: int, hidden: int, rng: np.random.Generator) -> None:
        self.fc1 = Linear(d, hidden, rng)
        self.fc2 = Linear(hidden, hidden, rng)
        self.out = Linear(hidden, 4, rng)

    def __call__(self, x: Tensor) -> Tensor:
        x = T.relu(self.fc1(x))
        x = T.relu(self.fc2(x))
        return T.sigmoid(self.out(x))


class AdapterSet(Module):
    """All adapters of a model plus the registry of shared up projections."""

    def __init__(self) -> None:
        self.da: dict[str, DAAdapter] = {}
        self.ra: dict[str, RAAdapter] = {}
        self.shared = SharedWeightRegistry()


def init_adapters(cfg: ModelConfig, vision_layers: list, language_layers: list,
                  rng: np.random.Generator) -> AdapterSet:
    """Create and attach adapters to both backbones per the config's slot plan.

    Weights are Kaiming-normal, biases zero. RA adapters at the same slot of
    vision layer ``i`` and the language layers paired with it by
    :func:`bind_shared_pairs` read one shared projection.
    """
    out = AdapterSet()
    pairs = bind_shared_pairs(cfg.vision_layers, cfg.language_layers)
    branches = ((VISION, vision_layers, cfg.vision_width),
                (LANGUAGE, language_layers, cfg.language_width))
    for position, kind, form in (("mha", cfg.mha_adapter, cfg.mha_form),
                                 ("ffn", cfg.ffn_adapter, cfg.ffn_form)):
        if kind is None:
            continue
        if kind == "ra" and cfg.share_dim > 0:
            for i in range(cfg.vision_layers):
                out.shared.create(position, i, cfg.ra_bottleneck, cfg.share_dim, rng)
        for tag, layers, width in branches:
            for i, layer in enumerate(layers):
                key = f"{tag}.{position}.{i}"
                if kind == "da":
                    adapter = out.da[key] = DAAdapter(width, cfg.da_bottleneck, cfg.scale, rng)
                else:
                    adapter = out.ra[key] = RAAdapter(
                        tag, width, cfg.ra_bottleneck, cfg.share_dim, cfg.scale,
                        (position, pairs[tag][i]), out.shared, rng)
                layer.attach(position, Slot(adapter, form))
    return out


def patchify(images: np.ndarray, patch: int) -> np.ndarray:
    """``[B, H, W, 3]`` to row-major ``[B, Nv, patch*patch*3]``."""
    b, h, w, c = images.shape
    if h % patch or w % patch:
        raise ConfigError(f"image {h}x{w} not divisible by patch {patch}")
    x = images.reshape(b, h // patch, patch, w // patch, patch, c)
    return x.transpose(0, 1, 3, 2, 4, 5).reshape(b, (h // patch) * (w // patch), patch * patch * c)


@dataclass
class ForwardOutput:
    box: Tensor
    reg_attn: Optional[np.ndarray] = None
    attn_heads: Optional[np.ndarray] = None


@dataclass
class ParamGroup:
    name: str
    names: list[str]
    tensors: list[Tensor]

    @property
    def trainable(self) -> bool:
        return bool(self.tensors) and all(t.requires_grad for t in self.tensors)

    @property
    def size(self) -> int:
        return sum(t.size for t in self.tensors)


def group_of(name: str) -> str:
    head = name.split(".", 1)[0]
    if head == "vision":
        return "vision-backbone"
    if head == "language":
        return "language-backbone"
    if name.startswith("adapters.da."):
        return "da-adapters"
    if name.startswith(("adapters.ra.", "adapters.shared.")):
        return "ra-adapters"
    if head in ("proj_v", "proj_l"):
        return "projections"
    if head == "fusion":
        return "fusion"
    if head == "head":
        return "head"
    if head == "reg_token":
        return "embeddings"
    raise ConfigError(f"parameter {name!r} belongs to no group")


class GroundingModel(Module):
    """Vision and language backbones, a [REG]-token fusion encoder, and a box head.

    Parameters are initialized from ``seed`` with independent streams for the
    base network and the adapters, so adding adapters never changes the base
    weights drawn for the same seed.
    """

    def __init__(self, cfg: ModelConfig, seed: int = 0) -> None:
        self._cfg = cfg
        base_rng = np.random.default_rng(np.random.SeedSequence([seed, 0]))
        adapter_rng = np.random.default_rng(np.random.SeedSequence([seed, 1]))
        self.vision = VisionBackbone(cfg, base_rng)
        self.language = LanguageBackbone(cfg, base_rng)
        self.proj_v = Linear(cfg.vision_width, cfg.fusion_width, base_rng)
        self.proj_l = Linear(cfg.language_width, cfg.fusion_width, base_rng)
        self.reg_token = param(base_rng.normal(0.0, 0.02, size=(1, cfg.fusion_width)))
        self.fusion = [EncoderLayer(cfg.fusion_width, cfg.heads, base_rng,
                                    cfg.ffn_mult * cfg.fusion_width)
                       for _ in range(cfg.fusion_layers)]
        self.head = BoxHead(cfg.fusion_width, cfg.head_hidden, base_rng)
        self.adapters = init_adapters(cfg, self.vision.layers, self.language.layers, adapter_rng)
        if cfg.freeze_backbones:
            self.freeze_backbones()

    @property
    def cfg(self) -> ModelConfig:
        return self._cfg

    # -- parameters -------------------------------------------------------

    def named_parameters(self, prefix: str = ""):
        seen = set()
        for name, t in super().named_parameters(prefix):
            if id(t) not in seen:
                seen.add(id(t))
                yield name, t

    def param_dict(self) -> dict[str, Tensor]:
        return dict(self.named_parameters())

    def param_groups(self) -> dict[str, ParamGroup]:
        groups = {g: ParamGroup(g, [], []) for g in GROUPS}
        for name, t in self.named_parameters():
            g = groups[group_of(name)]
            g.names.append(name)
            g.tensors.append(t)
        return groups

    def set_trainable(self, group_names, trainable: bool) -> None:
        for name, t in self.named_parameters():
            if group_of(name) in group_names:
                t.requires_grad = trainable
                if not trainable:
                    t.grad = None

    def freeze_backbones(self) -> None:
        self.set_trainable(BACKBONE_GROUPS, False)

    def unfreeze_backbones(self) -> None:
        self.set_trainable(BACKBONE_GROUPS, True)

    def zero_grad(self) -> None:
        for t in self.parameters():
            t.grad = None

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: t.data.copy() for name, t in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray], strict: bool = True) -> list[str]:
        """Copy matching tensors in; returns the names of parameters left untouched."""
        params = self.param_dict()
        extra = set(state) - set(params)
        missing = [n for n in params if n not in state]
        if strict and (extra or missing):
            raise ConfigError(f"state mismatch: missing {missing[:5]}, unexpected {sorted(extra)[:5]}")
        if extra and not strict:
            raise ConfigError(f"state carries parameters the model lacks: {sorted(extra)[:5]}")
        for name, arr in state.items():
            t = params[name]
            if t.shape != tuple(arr.shape):
                raise ConfigError(f"{name}: shape {arr.shape} does not match {t.shape}")
            t.data[...] = arr
        return missing

    # -- forward ----------------------------------------------------------

    def vision_encode(self, images) -> Tensor:
        images = np.asarray(images, dtype=np.float64)
        cfg = self._cfg
        if images.ndim != 4 or images.shape[1:] != (cfg.image_size, cfg.image_size, 3):
            raise ConfigError(f"expected images [B, {cfg.image_size}, {cfg.image_size}, 3], "
                              f"got {images.shape}")
        # pixels in [0, 1] are centred on the neutral background
        pixels = (images - PIXEL_MEAN) / PIXEL_SCALE
        x = self.vision.patch(Tensor(patchify(pixels, cfg.patch_size))) + self.vision.pos
        for layer in self.vision.layers:
            x, _ = layer(x)
        return x

    def wrap_tokens(self, ids) -> np.ndarray:
        ids = np.asarray(ids, dtype=np.int64)
        if ids.ndim == 1:
            ids = ids[None, :]
        if ids.shape[-1] + 2 > self._cfg.max_text_len:
            raise DataError(f"expression of {ids.shape[-1]} tokens exceeds max_text_len")
        b = ids.shape[0]
        cls = np.full((b, 1), VOCAB.cls_id, dtype=np.int64)
        sep = np.full((b, 1), VOCAB.sep_id, dtype=np.int64)
        return np.concatenate([cls, ids, sep], axis=1)

    def language_encode(self, ids) -> Tensor:
        x = embed_tokens(self.wrap_tokens(ids), self.language.tok, self.language.pos)
        for layer in self.language.layers:
            x, _ = layer(x)
        return x

    def fuse_and_predict(self, fv: Tensor, fl: Tensor, inspect: bool = False) -> ForwardOutput:
        b, nv = fv.shape[0], fv.shape[1]
        reg = T.broadcast_to(self.reg_token, (b, 1, self._cfg.fusion_width))
        x = T.concat([reg, self.proj_v(fv), self.proj_l(fl)], axis=1)
        attn = None
        for layer in self.fusion:
            x, attn = layer(x)
        box = self.head(x[:, 0, :])
        if not inspect:
            return ForwardOutput(box)
        heads = attn.data[:, :, 0, 1:1 + nv]
        avg = heads.mean(axis=1)
        avg = avg / avg.sum(axis=-1, keepdims=True)
        return ForwardOutput(box, avg, heads / heads.sum(axis=-1, keepdims=True))

    def forward(self, images, ids, inspect: bool = False) -> ForwardOutput:
        return self.fuse_and_predict(self.vision_encode(images), self.language_encode(ids), inspect)

    __call__ = forward


def model_forward(model: GroundingModel, sample, inspect: bool = True) -> tuple[Tensor, Optional[np.ndarray]]:
    """Single-sample forward: returns the 4-vector box and the [REG] attention over vision tokens."""
    out = model.forward(sample.image[None], np.asarray(sample.tokens)[None], inspect=inspect)
    reg = None if out.reg_attn is None else out.reg_attn[0]
    return out.box[0], reg


def install_adapters(pretrained: GroundingModel, cfg: ModelConfig, seed: int) -> GroundingModel:
    """A new model with ``cfg``'s adapters whose base weights come from ``pretrained``."""
    model = GroundingModel(cfg, seed)
    model.load_state_dict(pretrained.state_dict(), strict=False)
    return model


# -- checkpoints -------------------------------------------------------------


def save_checkpoint(path, state: dict[str, np.ndarray], meta: Optional[dict] = None) -> None:
    """Binary key-to-tensor map: magic line, length-prefixed JSON index, raw float64 LE data."""
    index, offset = [], 0
    for name, arr in state.items():
        index.append({"name": name, "shape": list(arr.shape), "offset": offset})
        offset += int(np.prod(arr.shape)) * 8
    header = json.dumps({"meta": meta or {}, "tensors": index}, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<Q", len(header)))
        fh.write(header)
        for arr in state.values():
            fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], dict]:
    with open(path, "rb") as fh:
        blob = fh.read()
    if not blob.startswith(CHECKPOINT_MAGIC):
        raise DataError(f"{path}: not a checkpoint (bad magic)")
    pos = len(CHECKPOINT_MAGIC)
    (n,) = struct.unpack("<Q", blob[pos:pos + 8])
    pos += 8
    header = json.loads(blob[pos:pos + n])
    pos += n
    state = {}
    for entry in header["tensors"]:
        count = int(np.prod(entry["shape"]))
        start = pos + entry["offset"]
        arr = np.frombuffer(blob, dtype="<f8", count=count, offset=start)
        state[entry["name"]] = arr.reshape(entry["shape"]).astype(np.float64)
    return state, header["meta"]
