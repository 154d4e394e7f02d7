"""Command-line workflow: gen-data, train, eval, ablate, rerank, inspect.

Every subcommand prints its resolved configuration (defaults filled in)
before doing any work, and all randomness flows from the --seed flags.

Exit codes: 0 success, 1 usage error, 2 data/file error, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import json
import sys

import numpy as np

from .data import DatasetError, GeneratorConfig, gen_dataset, load_dataset, save_dataset
from .evaluation import (
    EvalReport,
    UndefinedAucError,
    dump_fusion_weights,
    evaluate,
    mean_aucs,
    run_ablation,
)
from .model import VARIANTS, ModelConfig, init_model, run_forward
from .training import (
    CheckpointError,
    NumericError,
    TrainConfig,
    load_checkpoint,
    save_checkpoint,
    train,
)

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_NUMERIC = 3


class UsageError(Exception):
    pass


class CliParser(argparse.ArgumentParser):
    def error(self, message):  # argparse would sys.exit(2); we want exit 1
        raise UsageError(message)


def _parse_mix(text: str) -> tuple[float, float, float]:
    parts = [float(p) for p in text.split(",")]
    if len(parts) != 3:
        raise UsageError(f"--mix expects three comma-separated weights, got {text!r}")
    return tuple(parts)  # type: ignore[return-value]


def _parse_seeds(text: str) -> list[int]:
    try:
        return [int(p) for p in text.split(",") if p.strip()]
    except ValueError:
        raise UsageError(f"--seeds expects comma-separated integers, got {text!r}")


def build_parser() -> CliParser:
    parser = CliParser(prog="armmt", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="generate a synthetic session dataset")
    g.add_argument("--sessions", type=int, required=True)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--mix", type=str, default="0.6,0.25,0.15",
                   help="image,text,price conversion-driver fractions")
    g.add_argument("--catalog-size", type=int, default=1200)
    g.add_argument("--categories", type=int, default=20)
    g.add_argument("--out", type=str, required=True)

    t = sub.add_parser("train", help="train one model variant")
    t.add_argument("--data", type=str, required=True)
    t.add_argument("--variant", type=str, default="full", choices=VARIANTS)
    t.add_argument("--epochs", type=int, default=20)
    t.add_argument("--batch", type=int, default=128)
    t.add_argument("--lr", type=float, default=0.07)
    t.add_argument("--lambda", dest="lam", type=float, default=1.0)
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--out", type=str, required=True)
    t.add_argument("--loss-log", type=str, default=None)

    e = sub.add_parser("eval", help="evaluate a checkpoint on a dataset")
    e.add_argument("--ckpt", type=str, required=True)
    e.add_argument("--data", type=str, required=True)
    e.add_argument("--out", type=str, default=None)
    e.add_argument("--session-average", action="store_true",
                   help="average per-session AUC instead of pooling")

    a = sub.add_parser("ablate", help="train and compare all four variants")
    a.add_argument("--data", type=str, required=True)
    a.add_argument("--seeds", type=str, default="1,2,3")
    a.add_argument("--epochs", type=int, default=20)
    a.add_argument("--batch", type=int, default=128)
    a.add_argument("--lr", type=float, default=0.07)
    a.add_argument("--lambda", dest="lam", type=float, default=1.0)
    a.add_argument("--workers", type=int, default=None)
    a.add_argument("--out", type=str, required=True)

    r = sub.add_parser("rerank", help="print one session re-ranked by score")
    r.add_argument("--ckpt", type=str, required=True)
    r.add_argument("--session-file", type=str, required=True)
    r.add_argument("--index", type=int, default=0)

    i = sub.add_parser("inspect", help="dump per-item fusion weights")
    i.add_argument("--ckpt", type=str, required=True)
    i.add_argument("--data", type=str, required=True)
    i.add_argument("--out", type=str, required=True)
    i.add_argument("--limit", type=int, default=None)

    return parser


def _echo_config(args: argparse.Namespace) -> None:
    resolved = {k: v for k, v in sorted(vars(args).items()) if k != "command"}
    print(f"config[{args.command}]: {json.dumps(resolved)}")


def _check_same_geometry(ckpt, dataset) -> None:
    if ckpt.model.meta.vocab != dataset.meta.vocab:
        raise DatasetError(
            "dataset vocabulary does not match the checkpoint's training data"
        )


def _cmd_gen_data(args) -> int:
    config = GeneratorConfig(
        sessions=args.sessions,
        catalog_size=args.catalog_size,
        n_categories=args.categories,
        mix=_parse_mix(args.mix),
    )
    ds = gen_dataset(config, seed=args.seed)
    save_dataset(ds, args.out)
    print(f"wrote {len(ds.sessions)} sessions ({len(ds.catalog)} catalog items) to {args.out}")
    return EXIT_OK


def _cmd_train(args) -> int:
    ds = load_dataset(args.data)
    model = init_model(ModelConfig(), ds.meta, ds.catalog, args.variant, args.seed)
    cfg = TrainConfig(
        lr=args.lr, epochs=args.epochs, batch_size=args.batch, lam=args.lam, seed=args.seed
    )
    ckpt, log = train(ds, model, cfg)
    lines = [f"{epoch},{loss}" for epoch, loss in log]
    for line in lines:
        print(line)
    if args.loss_log:
        with open(args.loss_log, "w", encoding="utf-8") as f:
            f.write("\n".join(lines) + ("\n" if lines else ""))
    save_checkpoint(ckpt, args.out)
    print(f"saved checkpoint ({ckpt.step} steps) to {args.out}")
    return EXIT_OK


def _cmd_eval(args) -> int:
    ckpt = load_checkpoint(args.ckpt)
    ds = load_dataset(args.data)
    _check_same_geometry(ckpt, ds)
    report = evaluate(ckpt.model, ds.sessions)
    if args.session_average:
        from .evaluation import conversion_auc

        report = EvalReport(
            variant=report.variant,
            seed=report.seed,
            auc=conversion_auc(ckpt.model, ds.sessions, session_average=True),
            auc_ctr=report.auc_ctr,
            sessions=report.sessions,
        )
    line = report.to_json()
    print(line)
    if args.out:
        with open(args.out, "w", encoding="utf-8") as f:
            f.write(line + "\n")
    return EXIT_OK


def _cmd_ablate(args) -> int:
    ds = load_dataset(args.data)
    seeds = _parse_seeds(args.seeds)
    cfg = TrainConfig(lr=args.lr, epochs=args.epochs, batch_size=args.batch, lam=args.lam)
    reports = run_ablation(ds, cfg, seeds, workers=args.workers)
    with open(args.out, "w", encoding="utf-8") as f:
        for r in reports:
            f.write(r.to_json() + "\n")
    for variant, mean in mean_aucs(reports).items():
        print(f"{variant}: mean AUC {mean:.4f} over {len(seeds)} seeds")
    print(f"wrote {len(reports)} reports to {args.out}")
    return EXIT_OK


def _cmd_rerank(args) -> int:
    ckpt = load_checkpoint(args.ckpt)
    ds = load_dataset(args.session_file)
    _check_same_geometry(ckpt, ds)
    if not 0 <= args.index < len(ds.sessions):
        raise DatasetError(
            f"session index {args.index} out of range ({len(ds.sessions)} sessions)"
        )
    session = ds.sessions[args.index]
    trace = run_forward(session, ckpt.model)
    scores = trace.y_hat.data
    for rank, i in enumerate(np.argsort(-scores, kind="mergesort"), start=1):
        print(f"{rank},{session.candidates[i].item_id},{scores[i]:.9f}")
    return EXIT_OK


def _cmd_inspect(args) -> int:
    ckpt = load_checkpoint(args.ckpt)
    ds = load_dataset(args.data)
    _check_same_geometry(ckpt, ds)
    dump_fusion_weights(ds, ckpt, args.out, limit=args.limit)
    print(f"wrote fusion weights to {args.out}")
    return EXIT_OK


_COMMANDS = {
    "gen-data": _cmd_gen_data,
    "train": _cmd_train,
    "eval": _cmd_eval,
    "ablate": _cmd_ablate,
    "rerank": _cmd_rerank,
    "inspect": _cmd_inspect,
}


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        _echo_config(args)
        return _COMMANDS[args.command](args)
    except UsageError as e:
        print(f"usage error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (DatasetError, CheckpointError, UndefinedAucError, OSError) as e:
        print(f"data error: {e}", file=sys.stderr)
        return EXIT_DATA
    except NumericError as e:
        print(f"numeric failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
