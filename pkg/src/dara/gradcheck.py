"""Central finite-difference oracle for verifying autodiff gradients."""

from __future__ import annotations

from typing import Callable, Optional, Sequence

import numpy as np

from .errors import ContractError
from .tensor import Tape, Tensor, backward


def relative_error(a: np.ndarray, b: np.ndarray, floor: float = 1e-8) -> np.ndarray:
    a, b = np.asarray(a, dtype=float), np.asarray(b, dtype=float)
    return np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)


def analytic_grads(f: Callable[[], Tensor], params: Sequence[Tensor]) -> list[np.ndarray]:
    for p in params:
        p.grad = None
    with Tape() as tape:
        loss = f()
    backward(loss, tape)
    return [np.zeros_like(p.data) if p.grad is None else p.grad.copy() for p in params]


def numeric_grad(f: Callable[[], Tensor], p: Tensor, flat_index: int, h: float) -> float:
    flat = p.data.reshape(-1)
    orig = flat[flat_index]
    flat[flat_index] = orig + h
    fp = float(f().data)
    flat[flat_index] = orig - h
    fm = float(f().data)
    flat[flat_index] = orig
    return (fp - fm) / (2.0 * h)


def finite_diff_check(
    f: Callable[[], Tensor],
    params: Sequence[Tensor],
    h: float = 1e-5,
    n_samples: Optional[int] = None,
    rng: Optional[np.random.Generator] = None,
) -> float:
    """Max relative error between autodiff and central differences.

    ``f`` must rebuild its graph on every call (it is invoked once on a tape
    and twice per checked coordinate outside any tape). With ``n_samples``
    only that many coordinates, drawn uniformly over all parameter elements,
    are checked; otherwise every coordinate is.
    """
    if h <= 0:
        raise ContractError("finite-difference step must be positive")
    params = list(params)
    grads = analytic_grads(f, params)
    coords = [(i, j) for i, p in enumerate(params) for j in range(p.data.size)]
    if n_samples is not None and n_samples < len(coords):
        rng = rng if rng is not None else np.random.default_rng(0)
        picks = rng.choice(len(coords), size=n_samples, replace=False)
        coords = [coords[k] for k in sorted(picks)]
    worst = 0.0
    for i, j in coords:
        num = numeric_grad(f, params[i], j, h)
        err = float(relative_error(grads[i].reshape(-1)[j], num))
        worst = max(worst, err)
    return worst


def model_grad_check(cfg, seed: int = 0, target: str = "box", n_samples: Optional[int] = 50,
                     batch: int = 2, h: float = 1e-5) -> float:
    """Finite-difference check of a freshly built model.

    ``target`` is ``"box"`` for the first predicted coordinate of the first
    sample or ``"loss"`` for the batch grounding loss. Coordinates are drawn
    from every trainable tensor; backbones count as trainable only when
    ``cfg`` does not freeze them. Inputs are relational scenes at the
    model's image size on a 4x4 grid.
    """
    if target not in ("box", "loss"):
        raise ContractError(f"unknown gradient-check target {target!r}")
    from .data import RELATIONAL, make_dataset
    from .model import GroundingModel
    from .train import grounding_loss

    model = GroundingModel(cfg, seed)
    samples = make_dataset(seed, batch, RELATIONAL, stream=9, grid=4, image_size=cfg.image_size)
    by_len = {}
    for s in samples:
        by_len.setdefault(len(s.tokens), []).append(s)
    group = max(by_len.values(), key=len)
    images = np.stack([s.image for s in group])
    ids = np.array([s.tokens for s in group])
    gts = np.stack([s.gt_box for s in group])
    params = [t for _, t in model.named_parameters() if t.requires_grad]

    def f() -> Tensor:
        box = model(images, ids).box
        return box[0, 0] if target == "box" else grounding_loss(box, gts).total

    return finite_diff_check(f, params, h=h, n_samples=n_samples,
                             rng=np.random.default_rng(seed))
