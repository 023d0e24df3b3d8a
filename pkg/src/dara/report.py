"""Parameter accounting, ablation grid, attention export.

:func:`count_params` derives every group size in closed form from a
:class:`ModelConfig`; :func:`enumerate_params` walks the tensors of a built
model. The two are kept independent so each checks the other.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from typing import Iterable, Optional, Sequence

import numpy as np

from .config import RunConfig
from .errors import ContractError
from .model import ADAPTER_GROUPS, BACKBONE_GROUPS, GROUPS, GroundingModel, ModelConfig
from .nn import PARALLEL, SEQUENTIAL

PGM_TAG = "dara-attn/1"
ABLATION_SCHEMA = "dara-ablation/1"
ABLATION_FIELDS = ("entry", "slot_plan", "mha_form", "ffn_form", "share_dim", "seed",
                   "acc_at_05", "mean_iou", "test_loss", "final_train_loss",
                   "updated_backbone_params", "grad_check_err")


# -- closed-form counts ------------------------------------------------------


def linear_count(fan_in: int, fan_out: int, bias: bool = True) -> int:
    return fan_in * fan_out + (fan_out if bias else 0)


def encoder_layer_count(d: int, d_ff: int) -> int:
    """Attention (key projection without bias), feed-forward, two LayerNorms."""
    attn = 3 * linear_count(d, d) + linear_count(d, d, bias=False)
    ffn = linear_count(d, d_ff) + linear_count(d_ff, d)
    return attn + ffn + 2 * 2 * d


def da_adapter_count(width: int, bottleneck: int, bias: bool = True) -> int:
    """``2*C*Cd + Cd + C`` with biases."""
    return linear_count(width, bottleneck, bias) + linear_count(bottleneck, width, bias)


def ra_adapter_count(width: int, bottleneck: int, share_dim: int, bias: bool = True) -> int:
    """Down projection plus the branch-unique part of the up projection."""
    unique = width - share_dim
    return linear_count(width, bottleneck, bias) + (
        linear_count(bottleneck, unique, bias) if unique else 0)


def ra_shared_count(bottleneck: int, share_dim: int, bias: bool = True) -> int:
    """One shared up projection, counted once however many adapters read it."""
    return linear_count(bottleneck, share_dim, bias) if share_dim else 0


@dataclass
class ParamReport:
    groups: dict[str, tuple[int, int]]
    updated_backbone_params: int
    backbone_total: int

    @property
    def trainable(self) -> int:
        return sum(t for t, _ in self.groups.values())

    @property
    def frozen(self) -> int:
        return sum(f for _, f in self.groups.values())

    @property
    def total(self) -> int:
        return self.trainable + self.frozen

    def group_total(self, name: str) -> int:
        return sum(self.groups[name])

    @property
    def ratio(self) -> float:
        """Updated backbone-attached parameters as a percentage of the backbones."""
        return updated_ratio(self.updated_backbone_params, self.backbone_total)

    def table(self) -> str:
        lines = [f"{'group':<20}{'trainable':>12}{'frozen':>12}"]
        for name, (t, f) in self.groups.items():
            lines.append(f"{name:<20}{t:>12}{f:>12}")
        lines.append(f"{'total':<20}{self.trainable:>12}{self.frozen:>12}")
        lines.append(f"updated backbone params: {self.updated_backbone_params}")
        lines.append(f"backbone total: {self.backbone_total}")
        lines.append(f"ratio: {self.ratio:.2f}%")
        return "\n".join(lines)


def _report(sizes: dict[str, int], trainable: dict[str, int]) -> ParamReport:
    groups = {g: (trainable[g], sizes[g] - trainable[g]) for g in GROUPS}
    backbone = sum(sizes[g] for g in BACKBONE_GROUPS)
    updated = sum(trainable[g] for g in BACKBONE_GROUPS + ADAPTER_GROUPS)
    return ParamReport(groups, updated, backbone)


def count_params(cfg: ModelConfig, adapter_bias: bool = True,
                 vision_layers: Optional[Iterable[int]] = None,
                 language_layers: Optional[Iterable[int]] = None) -> ParamReport:
    """Closed-form parameter report for ``cfg``.

    ``adapter_bias`` and the layer subsets only change how adapters are
    counted; they exist to explore other accounting conventions. The model
    itself always has adapter biases in every layer, so only the defaults
    agree with :func:`enumerate_params`.
    """
    cv, cl, cp = cfg.vision_width, cfg.language_width, cfg.fusion_width
    p = cfg.patch_size
    vis = (linear_count(p * p * 3, cv) + cfg.num_patches * cv
           + cfg.vision_layers * encoder_layer_count(cv, cfg.ffn_mult * cv))
    lang = ((cfg.vocab_size + cfg.max_text_len) * cl
            + cfg.language_layers * encoder_layer_count(cl, cfg.ffn_mult * cl))
    vl = list(range(cfg.vision_layers)) if vision_layers is None else sorted(set(vision_layers))
    ll = list(range(cfg.language_layers)) if language_layers is None else sorted(set(language_layers))
    da = ra = 0
    for kind in (cfg.mha_adapter, cfg.ffn_adapter):
        if kind == "da":
            da += (len(vl) * da_adapter_count(cv, cfg.da_bottleneck, adapter_bias)
                   + len(ll) * da_adapter_count(cl, cfg.da_bottleneck, adapter_bias))
        elif kind == "ra":
            ra += (len(vl) * ra_adapter_count(cv, cfg.ra_bottleneck, cfg.share_dim, adapter_bias)
                   + len(ll) * ra_adapter_count(cl, cfg.ra_bottleneck, cfg.share_dim, adapter_bias)
                   + len(vl) * ra_shared_count(cfg.ra_bottleneck, cfg.share_dim, adapter_bias))
    sizes = {
        "vision-backbone": vis,
        "language-backbone": lang,
        "da-adapters": da,
        "ra-adapters": ra,
        "projections": linear_count(cv, cp) + linear_count(cl, cp),
        "fusion": cfg.fusion_layers * encoder_layer_count(cp, cfg.ffn_mult * cp),
        "head": (linear_count(cp, cfg.head_hidden) + linear_count(cfg.head_hidden, cfg.head_hidden)
                 + linear_count(cfg.head_hidden, 4)),
        "embeddings": cp,
    }
    trainable = dict(sizes)
    if cfg.freeze_backbones:
        for g in BACKBONE_GROUPS:
            trainable[g] = 0
    return _report(sizes, trainable)


def enumerate_params(model: GroundingModel) -> ParamReport:
    """Brute-force report: walk every distinct tensor of ``model``."""
    sizes = dict.fromkeys(GROUPS, 0)
    trainable = dict.fromkeys(GROUPS, 0)
    for name, group in model.param_groups().items():
        for t in group.tensors:
            sizes[name] += t.size
            if t.requires_grad:
                trainable[name] += t.size
    return _report(sizes, trainable)


def updated_ratio(updated: float, backbone_total: float) -> float:
    """Percentage of backbone parameters updated, rounded to 2 decimals."""
    if backbone_total <= 0:
        raise ContractError("backbone total must be positive")
    return round(100.0 * updated / backbone_total, 2)


def average_delta(deltas: Sequence[float]) -> float:
    if len(deltas) == 0:
        raise ContractError("average of no deltas is undefined")
    return round(float(np.mean(np.asarray(deltas, dtype=float))), 2)


# -- ablation grid -----------------------------------------------------------


@dataclass
class AblationEntry:
    name: str
    run: RunConfig
    results: list[dict] = field(default_factory=list)

    @property
    def key(self) -> tuple:
        m = self.run.model
        return (m.slot_plan, m.mha_form, m.ffn_form, m.share_dim)


@dataclass
class AblationGrid:
    entries: list[AblationEntry]

    def __len__(self) -> int:
        return len(self.entries)

    def __iter__(self):
        return iter(self.entries)

    def names(self) -> list[str]:
        return [e.name for e in self.entries]


def share_sweep(cfg: ModelConfig) -> list[int]:
    """Shared widths at a quarter, half and all of the narrower backbone,
    the proportions of a 64/128/256 sweep against a 256-wide branch."""
    w = min(cfg.vision_width, cfg.language_width)
    return [max(1, w // 4), max(1, w // 2), w]


def enumerate_ablations(base: RunConfig) -> AblationGrid:
    """Slot-plan combinations, RA insertion forms and shared-width sweep.

    Cells are produced in that order starting from the DA@MHA, RA@FFN
    reference. A cell whose model config equals an earlier one is dropped,
    so the reference appears once.
    """
    ref = base.model.with_slot_plan("da_ra").replace(freeze_backbones=True)
    cells = []
    for plan in ("da_ra", "da_da", "ra_ra", "ra_da"):
        cells.append((f"plan-{plan}", ref.with_slot_plan(plan)))
    for form in (SEQUENTIAL, PARALLEL):
        cells.append((f"ra-{form}", ref.replace(ffn_form=form)))
    for cs in share_sweep(ref):
        cells.append((f"share-{cs}", ref.replace(share_dim=cs)))
    seen, entries = set(), []
    for name, cfg in cells:
        if cfg in seen:
            continue
        seen.add(cfg)
        entries.append(AblationEntry(name, base.replace(name=f"{base.name}/{name}", model=cfg,
                                                         regime="dara")))
    return AblationGrid(entries)


def format_ablation_csv(rows: Sequence[dict]) -> str:
    buf = io.StringIO()
    buf.write(f"# {ABLATION_SCHEMA}\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(ABLATION_FIELDS)
    for r in rows:
        w.writerow([repr(float(r[k])) if isinstance(r[k], float) else r[k]
                    for k in ABLATION_FIELDS])
    return buf.getvalue()


# -- attention maps ----------------------------------------------------------


def attention_to_pixels(reg_attn, grid: tuple[int, int]) -> np.ndarray:
    """Max-normalize attention to integer gray levels on the patch grid."""
    a = np.asarray(reg_attn, dtype=float)
    rows, cols = grid
    if a.ndim != 1 or a.size != rows * cols:
        raise ContractError(f"attention of shape {a.shape} does not fill a {rows}x{cols} grid")
    if np.any(a < 0) or not np.all(np.isfinite(a)):
        raise ContractError("attention weights must be finite and nonnegative")
    top = a.max()
    if top <= 0:
        return np.zeros((rows, cols), dtype=np.int64)
    return np.rint(255.0 * a / top).astype(np.int64).reshape(rows, cols)


def format_pgm(pixels: np.ndarray) -> str:
    rows, cols = pixels.shape
    lines = ["P2", f"# {PGM_TAG}", f"{cols} {rows}", "255"]
    lines += [" ".join(str(int(v)) for v in row) for row in pixels]
    return "\n".join(lines) + "\n"


def export_attention_pgm(reg_attn, grid: tuple[int, int], path) -> np.ndarray:
    """Write a plain PGM of the attention map; returns the gray levels."""
    pixels = attention_to_pixels(reg_attn, grid)
    with open(path, "w", encoding="ascii", newline="\n") as fh:
        fh.write(format_pgm(pixels))
    return pixels


def read_pgm(path) -> np.ndarray:
    with open(path, encoding="ascii") as fh:
        tokens = [tok for line in fh for tok in line.split("#", 1)[0].split()]
    if not tokens or tokens[0] != "P2":
        raise ContractError(f"{path}: not a plain PGM")
    cols, rows, maxval = (int(v) for v in tokens[1:4])
    values = np.array([int(v) for v in tokens[4:]], dtype=np.int64)
    if values.size != rows * cols or values.max(initial=0) > maxval:
        raise ContractError(f"{path}: pixel data does not match the header")
    return values.reshape(rows, cols)


# -- ablation runs -----------------------------------------------------------


def grad_check_twin(cfg: ModelConfig) -> ModelConfig:
    """The smallest config with ``cfg``'s adapter layout, for gradient checks.

    Slot plan and insertion forms carry over; the shared width keeps its
    fraction of the narrower backbone.
    """
    tiny = ModelConfig.tiny()
    narrow = min(cfg.vision_width, cfg.language_width)
    tiny_narrow = min(tiny.vision_width, tiny.language_width)
    share = int(round(cfg.share_dim * tiny_narrow / narrow))
    return tiny.replace(mha_adapter=cfg.mha_adapter, ffn_adapter=cfg.ffn_adapter,
                        mha_form=cfg.mha_form, ffn_form=cfg.ffn_form, share_dim=share,
                        freeze_backbones=cfg.freeze_backbones)


def run_ablation(grid: AblationGrid, seeds: Sequence[int], log=None) -> list[dict]:
    """Train every grid cell for every seed; rows follow grid order within a seed.

    Phase A does not depend on the adapter layout, so one pretrained model
    per seed serves every cell of that seed.
    """
    from .gradcheck import model_grad_check
    from .train import pretrain, run_two_phase

    if not len(grid):
        raise ContractError("ablation grid is empty")
    checks = {e.name: model_grad_check(grad_check_twin(e.run.model)) for e in grid}
    rows = []
    for seed in seeds:
        first = grid.entries[0].run.with_seed(seed)
        base, _ = pretrain(first.model, first.pretrain, first.task, seed, weights=first.loss)
        for entry in grid:
            run = entry.run.with_seed(seed)
            rec = run_two_phase(run.model, run.pretrain, run.adapt, "dara", run.task, seed,
                                pretrained=base, weights=run.loss)
            m = run.model
            row = dict(entry=entry.name, slot_plan=m.slot_plan, mha_form=m.mha_form,
                       ffn_form=m.ffn_form, share_dim=m.share_dim, seed=seed,
                       acc_at_05=rec["acc_at_05"], mean_iou=rec["mean_iou"],
                       test_loss=rec["test_loss"],
                       final_train_loss=rec["curves"][-1]["loss"],
                       updated_backbone_params=rec["updated_backbone_params"],
                       grad_check_err=checks[entry.name])
            entry.results.append(row)
            rows.append(row)
            if log is not None:
                log(f"{entry.name} seed {seed}: acc {row['acc_at_05']:.3f}")
    return rows
