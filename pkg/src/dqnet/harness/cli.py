"""Command-line entry point: ``dqnet {train,eval,ablate,gen-data,gradcheck}``."""
from __future__ import annotations

import argparse
import json
import logging
import sys

from ..data import SynthConfig, gen_synthetic, load_dataset, save_dataset
from ..errors import ConfigError
from .ablate import AXES, ablate, format_table
from .checkpoint import CheckpointError
from .config import load_config
from .train import ConfigMismatch, TrainingDiverged, evaluate, train

log = logging.getLogger("dqnet")


def _data(spec: str, cfg):
    if spec == "synthetic":
        return gen_synthetic(cfg.synth(), cfg.n_train)
    samples = load_dataset(spec, cfg.model.vit.image_size)
    if not samples:
        raise FileNotFoundError(f"no training pairs under {spec}")
    return samples


def cmd_train(args) -> int:
    overrides = {"seed": args.seed} if args.seed is not None else None
    cfg = load_config(args.config, overrides)
    result = train(cfg, _data(args.data, cfg), args.out)
    last = result.log[-1]
    print(f"trained {cfg.max_steps} steps; final loss {last['l_total']:.4f}; checkpoint {result.checkpoint}")
    return 0


def cmd_eval(args) -> int:
    expect = load_config(args.config) if args.config else None
    report = evaluate(args.checkpoint, args.data, args.report, expect)
    print(json.dumps(report.summary(), indent=2))
    return 0


def cmd_ablate(args) -> int:
    cfg = load_config(args.config)
    values = [v.strip() for v in args.values.split(",") if v.strip()]
    rows = ablate(args.axis, values, cfg, out=args.out)
    print(format_table(rows))
    return 0


def cmd_gen_data(args) -> int:
    cfg = SynthConfig(size=args.size, delta=args.delta, seed=args.seed)
    root = save_dataset(gen_synthetic(cfg, args.n), args.out)
    print(f"wrote {args.n} samples to {root}")
    return 0


def cmd_gradcheck(args) -> int:
    from .. import checks

    reports = checks.run(args.module, range(args.seeds))
    for r in reports:
        if args.verbose or not r.passed:
            print(r)
    failed = sum(not r.passed for r in reports)
    print(f"{len(reports) - failed}/{len(reports)} gradient checks passed")
    return 1 if failed else 0


def parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="dqnet", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="train a model")
    t.add_argument("--config", required=True)
    t.add_argument("--data", required=True, help="dataset directory or 'synthetic'")
    t.add_argument("--out", required=True)
    t.add_argument("--seed", type=int)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint on a dataset directory")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--report", required=True, help="report path; .csv and .json are written")
    e.add_argument("--config", help="refuse to run if the checkpoint was trained with different settings")
    e.set_defaults(func=cmd_eval)

    a = sub.add_parser("ablate", help="sweep one axis with shared seeds and data")
    a.add_argument("--axis", required=True, choices=AXES)
    a.add_argument("--values", required=True, help="comma-separated, e.g. 1,2,4,full or rbq,add")
    a.add_argument("--config", required=True)
    a.add_argument("--out", required=True)
    a.set_defaults(func=cmd_ablate)

    g = sub.add_parser("gen-data", help="write synthetic camouflage scenes as PNGs")
    g.add_argument("--n", type=int, required=True)
    g.add_argument("--size", type=int, default=128)
    g.add_argument("--delta", type=float, default=0.5)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_gen_data)

    c = sub.add_parser("gradcheck", help="finite-difference gradient checks")
    c.add_argument("--module", help="one suite; default runs all")
    c.add_argument("--seeds", type=int, default=1)
    c.set_defaults(func=cmd_gradcheck)
    return p


def main(argv=None) -> int:
    args = parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except (ConfigError, ConfigMismatch, CheckpointError, TrainingDiverged, FileNotFoundError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
