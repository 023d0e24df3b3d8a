"""Grounding loss, AdamW, learning-rate schedule and the two-phase protocol.

Phase A trains an adapter-free model end to end on ``single`` scenes; it
plays the role of the pre-trained backbones. Phase B freezes the backbones
(except in the ``full_ft`` regime), installs the regime's adapters and trains
on ``relational`` scenes.
"""

from __future__ import annotations

import csv
import dataclasses
import io
import math
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from . import tensor as T
from .boxes import accuracy_at_05, cxcywh_to_xyxy, iou
from .data import RELATIONAL, SINGLE, SceneSample, make_dataset
from .errors import ConfigError, ContractError
from .model import (ADAPTER_GROUPS, BACKBONE_GROUPS, GroundingModel, ModelConfig, group_of,
                    install_adapters)
from .tensor import Tape, Tensor, backward

REGIMES = ("frozen", "da_only", "ra_only", "dara", "full_ft")
METRICS_SCHEMA = "dara-metrics/1"
METRICS_FIELDS = ("epoch", "split", "loss", "l1_part", "giou_part", "acc_at_05",
                  "lr_model", "lr_backbone")

# data streams derived from the run seed
PRETRAIN_STREAM, ADAPT_TRAIN_STREAM, ADAPT_TEST_STREAM, PRETRAIN_TEST_STREAM = 0, 1, 2, 3


@dataclass(frozen=True)
class LossWeights:
    l1: float = 1.0
    giou: float = 1.0

    def __post_init__(self) -> None:
        if self.l1 < 0 or self.giou < 0:
            raise ConfigError("loss weights must be nonnegative")


@dataclass(frozen=True)
class TrainPlan:
    epochs: int = 90
    lr_model: float = 1e-4
    lr_backbone: float = 1e-5
    weight_decay: float = 1e-4
    decay_epoch: int = 60
    decay_factor: float = 10.0
    batch_size: int = 32
    seed: int = 0
    phase: str = "adapt"
    adapter_lr: str = "model"
    adapter_lr_mult: float = 1.0

    def __post_init__(self) -> None:
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigError("epochs and batch_size must be positive")
        if not 0 <= self.decay_epoch < self.epochs:
            raise ConfigError(f"decay_epoch {self.decay_epoch} must lie in [0, {self.epochs})")
        if self.phase not in ("pretrain", "adapt"):
            raise ConfigError(f"unknown phase {self.phase!r}")
        if self.adapter_lr not in ("model", "backbone"):
            raise ConfigError("adapter_lr must be 'model' or 'backbone'")
        if self.adapter_lr_mult <= 0:
            raise ConfigError("adapter_lr_mult must be positive")

    @classmethod
    def scaled(cls, epochs: int, **kw) -> "TrainPlan":
        """Shortened schedule with the decay kept at two thirds of training."""
        return cls(epochs=epochs, decay_epoch=max(0, (2 * epochs) // 3), **kw)

    def replace(self, **changes) -> "TrainPlan":
        return dataclasses.replace(self, **changes)


@dataclass(frozen=True)
class TaskConfig:
    grid: int = 4
    image_size: int = 32
    n_pretrain: int = 2000
    n_train: int = 2000
    n_test: int = 500
    p_duplicate: float = 0.5

    def dataset(self, seed: int, n: int, difficulty: str, stream: int) -> list[SceneSample]:
        return make_dataset(seed, n, difficulty, stream, self.grid, self.image_size,
                            self.p_duplicate)


# -- losses ------------------------------------------------------------------


def smooth_l1(pred: Tensor, gt, beta: float = 1.0) -> Tensor:
    """Huber loss summed over the last (coordinate) axis."""
    if beta <= 0:
        raise ContractError("smooth_l1 beta must be positive")
    d = pred - T.as_tensor(gt)
    ad = T.tabs(d)
    quad = T.square(d) * (0.5 / beta)
    lin = ad - 0.5 * beta
    return T.where(ad.data < beta, quad, lin).sum(axis=-1)


def _corners(box: Tensor) -> tuple[Tensor, Tensor, Tensor, Tensor]:
    cx, cy, w, h = (box[..., i] for i in range(4))
    return cx - w * 0.5, cy - h * 0.5, cx + w * 0.5, cy + h * 0.5


def giou_tensor(pred: Tensor, gt) -> Tensor:
    """Differentiable GIoU between ``(cx, cy, w, h)`` boxes along the last axis."""
    gt = T.as_tensor(gt)
    px1, py1, px2, py2 = _corners(pred)
    gx1, gy1, gx2, gy2 = _corners(gt)
    iw = T.relu(T.minimum(px2, gx2) - T.maximum(px1, gx1))
    ih = T.relu(T.minimum(py2, gy2) - T.maximum(py1, gy1))
    inter = iw * ih
    union = (px2 - px1) * (py2 - py1) + (gx2 - gx1) * (gy2 - gy1) - inter
    hull = (T.maximum(px2, gx2) - T.minimum(px1, gx1)) * (T.maximum(py2, gy2) - T.minimum(py1, gy1))
    return inter / union - (hull - union) / hull


@dataclass
class LossParts:
    total: Tensor
    l1: Tensor
    giou: Tensor


def grounding_loss(pred: Tensor, gt, w: LossWeights = LossWeights()) -> LossParts:
    """``w.l1 * smooth_l1 + w.giou * (1 - GIoU)``, averaged over leading batch axes."""
    l1 = smooth_l1(pred, gt)
    g = 1.0 - giou_tensor(pred, gt)
    if l1.ndim:
        l1, g = l1.mean(), g.mean()
    return LossParts(l1 * w.l1 + g * w.giou, l1, g)


# -- optimizer ---------------------------------------------------------------


@dataclass
class OptimState:
    lr: float = 1e-4
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    weight_decay: float = 1e-4
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adamw_step(params: dict[str, Tensor], st: OptimState,
               lr_for: Optional[Callable[[str], float]] = None) -> None:
    """One AdamW update of every parameter with ``requires_grad``.

    Weight decay is decoupled: ``p <- p * (1 - lr * wd)`` before the
    bias-corrected Adam step. Frozen parameters are never touched.
    """
    trainable = [(n, p) for n, p in params.items() if p.requires_grad]
    for n, p in trainable:
        if p.grad is None:
            raise ContractError(f"trainable parameter {n!r} has no gradient")
    st.step += 1
    b1, b2 = st.betas
    c1 = 1.0 - b1 ** st.step
    c2 = 1.0 - b2 ** st.step
    for n, p in trainable:
        lr = st.lr if lr_for is None else lr_for(n)
        g = p.grad
        m = st.m.get(n)
        if m is None:
            m = st.m[n] = np.zeros_like(p.data)
            st.v[n] = np.zeros_like(p.data)
        v = st.v[n]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        if st.weight_decay:
            p.data *= 1.0 - lr * st.weight_decay
        p.data -= lr * (m / c1) / (np.sqrt(v / c2) + st.eps)


def lr_at(epoch: int, plan: TrainPlan) -> tuple[float, float]:
    if not 0 <= epoch < plan.epochs:
        raise ContractError(f"epoch {epoch} outside [0, {plan.epochs})")
    if epoch >= plan.decay_epoch:
        return plan.lr_model / plan.decay_factor, plan.lr_backbone / plan.decay_factor
    return plan.lr_model, plan.lr_backbone


def lr_assigner(plan: TrainPlan, lr_model: float, lr_backbone: float) -> Callable[[str], float]:
    adapters = (lr_backbone if plan.adapter_lr == "backbone" else lr_model) * plan.adapter_lr_mult

    def lr_for(name: str) -> float:
        g = group_of(name)
        if g in BACKBONE_GROUPS:
            return lr_backbone
        if g in ADAPTER_GROUPS:
            return adapters
        return lr_model

    return lr_for


# -- batching, training, evaluation -----------------------------------------


def batches(samples: Sequence[SceneSample], order: Sequence[int], size: int):
    """Chunks of ``order``, split further so every batch has one token length.

    Yields ``(images, ids, gt_boxes, indices)``.
    """
    order = [int(i) for i in order]
    for start in range(0, len(order), size):
        by_len: dict[int, list[int]] = {}
        for i in order[start:start + size]:
            by_len.setdefault(len(samples[i].tokens), []).append(i)
        for length in sorted(by_len):
            idx = by_len[length]
            yield (np.stack([samples[i].image for i in idx]),
                   np.array([samples[i].tokens for i in idx], dtype=np.int64),
                   np.stack([samples[i].gt_box for i in idx]),
                   idx)


@dataclass
class EvalResult:
    acc_at_05: float
    mean_iou: float
    loss: float
    l1_part: float
    giou_part: float
    records: list = field(default_factory=list)


def predict(model: GroundingModel, samples: Sequence[SceneSample], batch_size: int = 128) -> np.ndarray:
    out = np.empty((len(samples), 4))
    for images, ids, _, idx in batches(samples, range(len(samples)), batch_size):
        out[idx] = model(images, ids).box.data
    return out


def evaluate(model: GroundingModel, samples: Sequence[SceneSample],
             weights: LossWeights = LossWeights(), batch_size: int = 128) -> EvalResult:
    """Acc@0.5, mean IoU and loss parts over a dataset; parameters are not touched."""
    if not samples:
        raise ContractError("cannot evaluate on an empty dataset")
    preds = predict(model, samples, batch_size)
    gts = np.stack([s.gt_box for s in samples])
    parts = grounding_loss(Tensor(preds), gts, weights)
    pc = [cxcywh_to_xyxy(p) for p in preds]
    gc = [cxcywh_to_xyxy(g) for g in gts]
    ious = [iou(p, g) for p, g in zip(pc, gc)]
    records = [(s.seed, tuple(p), tuple(s.gt_box), v) for s, p, v in zip(samples, preds, ious)]
    return EvalResult(accuracy_at_05(pc, gc), float(np.mean(ious)), float(parts.total.data),
                      float(parts.l1.data), float(parts.giou.data), records)


def train(model: GroundingModel, samples: Sequence[SceneSample], plan: TrainPlan,
          weights: LossWeights = LossWeights(),
          eval_samples: Optional[Sequence[SceneSample]] = None) -> list[dict]:
    """Train in place; returns one metrics row per epoch per split."""
    params = model.param_dict()
    st = OptimState(lr=plan.lr_model, weight_decay=plan.weight_decay)
    rng = np.random.default_rng(np.random.SeedSequence([plan.seed, 7]))
    rows = []
    for epoch in range(plan.epochs):
        lr_m, lr_b = lr_at(epoch, plan)
        lr_for = lr_assigner(plan, lr_m, lr_b)
        sums = np.zeros(3)
        preds, gts = [], []
        for images, ids, gt, _ in batches(samples, rng.permutation(len(samples)), plan.batch_size):
            with Tape() as tape:
                out = model(images, ids)
                parts = grounding_loss(out.box, gt, weights)
            backward(parts.total, tape)
            adamw_step(params, st, lr_for)
            model.zero_grad()
            n = len(gt)
            sums += n * np.array([parts.total.data, parts.l1.data, parts.giou.data], dtype=float)
            preds.extend(cxcywh_to_xyxy(p) for p in out.box.data)
            gts.extend(cxcywh_to_xyxy(g) for g in gt)
        loss, l1, gi = sums / len(samples)
        if not math.isfinite(loss):
            raise FloatingPointError(f"training diverged at epoch {epoch}")
        rows.append(dict(epoch=epoch, split="train", loss=loss, l1_part=l1, giou_part=gi,
                         acc_at_05=accuracy_at_05(preds, gts), lr_model=lr_m, lr_backbone=lr_b))
        if eval_samples:
            ev = evaluate(model, eval_samples, weights)
            rows.append(dict(epoch=epoch, split="test", loss=ev.loss, l1_part=ev.l1_part,
                             giou_part=ev.giou_part, acc_at_05=ev.acc_at_05,
                             lr_model=lr_m, lr_backbone=lr_b))
    return rows


# -- two-phase protocol ------------------------------------------------------


def regime_config(cfg: ModelConfig, regime: str) -> ModelConfig:
    """Adapter placement and freezing for an adaptation regime.

    ``dara`` keeps ``cfg``'s slot plan, ``da_only``/``ra_only`` keep only the
    DA adapter after attention or the RA adapter at the FFN.
    """
    if regime == "frozen":
        return cfg.replace(mha_adapter=None, ffn_adapter=None, freeze_backbones=True)
    if regime == "full_ft":
        return cfg.replace(mha_adapter=None, ffn_adapter=None, freeze_backbones=False)
    if regime == "da_only":
        return cfg.replace(mha_adapter="da", ffn_adapter=None, freeze_backbones=True)
    if regime == "ra_only":
        return cfg.replace(mha_adapter=None, ffn_adapter="ra", freeze_backbones=True)
    if regime == "dara":
        if cfg.mha_adapter is None and cfg.ffn_adapter is None:
            cfg = cfg.with_slot_plan("da_ra")
        return cfg.replace(freeze_backbones=True)
    raise ConfigError(f"unknown regime {regime!r}; expected one of {REGIMES}")


def pretrain(cfg: ModelConfig, plan: TrainPlan, task: TaskConfig, seed: int,
             with_eval: bool = False,
             weights: LossWeights = LossWeights()) -> tuple[GroundingModel, list[dict]]:
    """Phase A: adapter-free model trained end to end on single-object scenes."""
    model = GroundingModel(cfg.replace(mha_adapter=None, ffn_adapter=None,
                                       freeze_backbones=False), seed)
    data = task.dataset(seed, task.n_pretrain, SINGLE, PRETRAIN_STREAM)
    held = task.dataset(seed, max(1, task.n_test // 4), SINGLE, PRETRAIN_TEST_STREAM) if with_eval else None
    rows = train(model, data, plan.replace(phase="pretrain"), weights, eval_samples=held)
    return model, rows


def adapt(pretrained: GroundingModel, cfg: ModelConfig, plan: TrainPlan, regime: str,
          task: TaskConfig, seed: int, with_eval: bool = False,
          weights: LossWeights = LossWeights()):
    """Phase B on relational scenes; returns the model, metrics rows and held-out result."""
    model = install_adapters(pretrained, regime_config(cfg, regime), seed)
    train_set = task.dataset(seed, task.n_train, RELATIONAL, ADAPT_TRAIN_STREAM)
    test_set = task.dataset(seed, task.n_test, RELATIONAL, ADAPT_TEST_STREAM)
    rows = train(model, train_set, plan.replace(phase="adapt"), weights,
                 eval_samples=test_set if with_eval else None)
    return model, rows, evaluate(model, test_set, weights)


def updated_backbone_params(model: GroundingModel) -> int:
    """Trainable elements that live in or are attached to the two backbones."""
    groups = model.param_groups()
    return sum(t.size for g in BACKBONE_GROUPS + ADAPTER_GROUPS
               for t in groups[g].tensors if t.requires_grad)


def run_two_phase(cfg: ModelConfig, plan_pre: TrainPlan, plan_adapt: TrainPlan, regime: str,
                  task: TaskConfig = TaskConfig(), seed: int = 0,
                  pretrained: Optional[GroundingModel] = None,
                  weights: LossWeights = LossWeights()) -> dict:
    """Both phases for one regime and seed.

    ``pretrained`` may carry a Phase-A model already produced by
    :func:`pretrain` with the same arguments; Phase A is deterministic, so
    reusing it gives the same record.
    """
    if pretrained is None:
        pretrained, _ = pretrain(cfg, plan_pre, task, seed, weights=weights)
    frozen_before = {n: t.data.copy() for n, t in pretrained.named_parameters()
                     if group_of(n) in BACKBONE_GROUPS}
    model, rows, result = adapt(pretrained, cfg, plan_adapt, regime, task, seed,
                                weights=weights)
    after = model.param_dict()
    backbone_unchanged = all(np.array_equal(after[n].data, arr) for n, arr in frozen_before.items())
    return {
        "regime": regime,
        "seed": seed,
        "acc_at_05": result.acc_at_05,
        "mean_iou": result.mean_iou,
        "test_loss": result.loss,
        "updated_backbone_params": updated_backbone_params(model),
        "backbone_unchanged": backbone_unchanged,
        "curves": rows,
        "model": model,
    }


def format_metrics_csv(rows: Sequence[dict]) -> str:
    buf = io.StringIO()
    buf.write(f"# {METRICS_SCHEMA}\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(METRICS_FIELDS)
    for r in rows:
        w.writerow([r["epoch"], r["split"]] + [repr(float(r[k])) for k in METRICS_FIELDS[2:]])
    return buf.getvalue()


def write_metrics_csv(path, rows: Sequence[dict]) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write(format_metrics_csv(rows))
