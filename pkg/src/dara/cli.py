"""Command-line entry point.

Every subcommand reads a JSON run config (``--config``; defaults apply when
it is omitted), accepts ``--seed`` to override the config's first seed and
writes its files under ``--out``. Exit status is 0 on success, 1 on a
usage, config or contract error, 2 on a file-system error.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from typing import Optional, Sequence

from .config import RunConfig
from .data import RELATIONAL, SINGLE, dump_dataset
from .errors import DaraError
from .gradcheck import model_grad_check
from .model import GroundingModel, ModelConfig, load_checkpoint, model_forward, save_checkpoint
from .report import (count_params, enumerate_ablations, export_attention_pgm,
                     format_ablation_csv, run_ablation)
from .train import (ADAPT_TEST_STREAM, ADAPT_TRAIN_STREAM, PRETRAIN_STREAM, REGIMES, adapt,
                    evaluate, pretrain, regime_config, write_metrics_csv)

GRAD_CHECK_TOL = 1e-5


class UsageError(DaraError):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON run config (defaults when omitted)")
    p.add_argument("--seed", type=int, help="override the config's first seed")
    p.add_argument("--out", help="output directory (default: the config's 'out')")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="dara", description="Adapter tuning for visual grounding.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("pretrain", help="Phase A: adapter-free training on single-object scenes")
    _common(p)

    p = sub.add_parser("adapt", help="Phase B: freeze, insert adapters, train on relational scenes")
    _common(p)
    p.add_argument("--regime", choices=REGIMES, help="override the config's regime")
    p.add_argument("--pretrained", help="Phase A checkpoint (trained here when omitted)")

    p = sub.add_parser("eval", help="Acc@0.5 of a checkpoint on the held-out relational set")
    _common(p)
    p.add_argument("--checkpoint", required=True)

    p = sub.add_parser("count-params", help="parameter report and updated-backbone ratio")
    _common(p)
    p.add_argument("--regime", choices=REGIMES, help="override the config's regime")

    p = sub.add_parser("grad-check", help="finite-difference check of the configured model")
    _common(p)
    p.add_argument("--target", choices=("box", "loss"), default="box")
    p.add_argument("--samples", type=int, default=50,
                   help="coordinates to check (0 checks every coordinate)")

    p = sub.add_parser("ablate", help="train every cell of the ablation grid")
    _common(p)
    p.add_argument("--seeds", type=int, help="number of consecutive seeds from --seed")

    p = sub.add_parser("attn-export", help="[REG] attention of a checkpoint as PGM images")
    _common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--index", type=int, nargs="+", default=[0], help="test sample indices")

    p = sub.add_parser("gen-data", help="write the run's datasets as seed-reproducible dumps")
    _common(p)
    return parser


def _read_config(args) -> RunConfig:
    return RunConfig.load(args.config) if args.config else RunConfig()


def _load(args, writes: bool = True) -> tuple[RunConfig, int, str]:
    run = _read_config(args)
    seed = run.seeds[0] if args.seed is None else args.seed
    out = args.out or run.out
    if writes:
        os.makedirs(out, exist_ok=True)
    return run.with_seed(seed), seed, out


def _save_model(path: str, model: GroundingModel, run: RunConfig, seed: int, stage: str) -> None:
    meta = {"model": model.cfg.to_dict(), "run": run.to_dict(), "seed": seed, "stage": stage}
    save_checkpoint(path, model.state_dict(), meta)


def _load_model(path: str) -> GroundingModel:
    state, meta = load_checkpoint(path)
    if "model" not in meta:
        raise UsageError(f"{path}: checkpoint carries no model config")
    cfg = ModelConfig.from_dict(meta["model"])
    model = GroundingModel(cfg, int(meta.get("seed", 0)))
    model.load_state_dict(state)
    return model


def cmd_pretrain(args) -> int:
    run, seed, out = _load(args)
    model, rows = pretrain(run.model, run.pretrain, run.task, seed, with_eval=True,
                           weights=run.loss)
    write_metrics_csv(os.path.join(out, "pretrain_metrics.csv"), rows)
    _save_model(os.path.join(out, "pretrain.ckpt"), model, run, seed, "pretrain")
    last = [r for r in rows if r["split"] == "test"][-1]
    print(f"pretrain seed {seed}: held-out single-object Acc@0.5 {last['acc_at_05']:.4f}")
    return 0


def cmd_adapt(args) -> int:
    run, seed, out = _load(args)
    regime = args.regime or run.regime
    if args.pretrained:
        base = _load_model(args.pretrained)
    else:
        base, rows = pretrain(run.model, run.pretrain, run.task, seed, weights=run.loss)
        write_metrics_csv(os.path.join(out, "pretrain_metrics.csv"), rows)
    model, rows, result = adapt(base, run.model, run.adapt, regime, run.task, seed,
                                with_eval=True, weights=run.loss)
    write_metrics_csv(os.path.join(out, f"adapt_{regime}_metrics.csv"), rows)
    _save_model(os.path.join(out, f"adapt_{regime}.ckpt"), model, run, seed, regime)
    print(f"{regime} seed {seed}: Acc@0.5 {result.acc_at_05:.4f} mean IoU {result.mean_iou:.4f}")
    return 0


def cmd_eval(args) -> int:
    run, seed, out = _load(args)
    model = _load_model(args.checkpoint)
    test = run.task.dataset(seed, run.task.n_test, RELATIONAL, ADAPT_TEST_STREAM)
    res = evaluate(model, test, run.loss)
    record = {"checkpoint": os.path.basename(args.checkpoint), "seed": seed,
              "acc_at_05": res.acc_at_05, "mean_iou": res.mean_iou, "loss": res.loss}
    name = os.path.splitext(os.path.basename(args.checkpoint))[0]
    with open(os.path.join(out, f"eval_{name}.json"), "w", encoding="utf-8") as fh:
        fh.write(json.dumps(record, indent=2, sort_keys=True) + "\n")
    print(f"Acc@0.5 {res.acc_at_05:.4f} mean IoU {res.mean_iou:.4f} loss {res.loss:.4f}")
    return 0


def cmd_count_params(args) -> int:
    run, _, _ = _load(args, writes=False)
    report = count_params(regime_config(run.model, args.regime or run.regime))
    print(report.table())
    return 0


def cmd_grad_check(args) -> int:
    run, seed, _ = _load(args, writes=False)
    err = model_grad_check(run.model, seed=seed, target=args.target,
                           n_samples=args.samples or None)
    ok = err < GRAD_CHECK_TOL
    print(f"max relative error {err:.3e} ({'pass' if ok else 'FAIL'} at {GRAD_CHECK_TOL:g})")
    return 0 if ok else 1


def cmd_ablate(args) -> int:
    run, seed, out = _load(args)
    if args.seeds is not None:
        if args.seeds < 1:
            raise UsageError("--seeds must be positive")
        seeds = list(range(seed, seed + args.seeds))
    elif args.seed is not None:
        seeds = [seed]
    else:
        seeds = list(_read_config(args).seeds)
    grid = enumerate_ablations(run)
    rows = run_ablation(grid, seeds, log=lambda msg: print(msg, flush=True))
    with open(os.path.join(out, "ablation.csv"), "w", encoding="utf-8", newline="") as fh:
        fh.write(format_ablation_csv(rows))
    print(f"{len(rows)} rows written to {os.path.join(out, 'ablation.csv')}")
    return 0


def cmd_attn_export(args) -> int:
    run, seed, out = _load(args)
    model = _load_model(args.checkpoint)
    test = run.task.dataset(seed, max(args.index) + 1, RELATIONAL, ADAPT_TEST_STREAM)
    for i in args.index:
        if i < 0:
            raise UsageError("sample indices must be nonnegative")
        _, reg = model_forward(model, test[i])
        path = os.path.join(out, f"attn_{i}.pgm")
        export_attention_pgm(reg, model.cfg.patch_grid, path)
        print(f"{path}: {' '.join(test[i].words)}")
    return 0


def cmd_gen_data(args) -> int:
    run, seed, out = _load(args)
    t = run.task
    for name, n, difficulty, stream in (("pretrain", t.n_pretrain, SINGLE, PRETRAIN_STREAM),
                                        ("train", t.n_train, RELATIONAL, ADAPT_TRAIN_STREAM),
                                        ("test", t.n_test, RELATIONAL, ADAPT_TEST_STREAM)):
        path = os.path.join(out, f"{name}.tsv")
        dump_dataset(t.dataset(seed, n, difficulty, stream), path, t.grid, t.image_size,
                     t.p_duplicate)
        print(f"{path}: {n} {difficulty} samples")
    return 0


COMMANDS = {
    "pretrain": cmd_pretrain,
    "adapt": cmd_adapt,
    "eval": cmd_eval,
    "count-params": cmd_count_params,
    "grad-check": cmd_grad_check,
    "ablate": cmd_ablate,
    "attn-export": cmd_attn_export,
    "gen-data": cmd_gen_data,
}


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return COMMANDS[args.command](args)
    except OSError as exc:
        print(f"dara: {exc}", file=sys.stderr)
        return 2
    except DaraError as exc:
        print(f"dara: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
