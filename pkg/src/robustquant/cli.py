"""Command-line experiment driver.

    robustquant train --config cfg.txt --seed 0 --out model.rqck
    robustquant ptq --ckpt model.rqck --config cfg.txt --out ptq.csv
    robustquant sweep-bits | sweep-step | probe-level | kl | error-curves | gradcheck

Flat `key = value` config files with `#` comments; any `--key value` pair on
the command line overrides the file.  Exit codes: 0 success, 1 assertion or
dominance failure, 2 usage error.
"""

from __future__ import annotations

import argparse
import sys

import numpy as np

from .checkpoint import load_checkpoint, save_checkpoint
from .harness import (Config, dataset_from_config, default_ratio_grid, error_curves,
                      gradcheck_report, kl_propagation, model_spec_from_config,
                      probe_single_level, ptq_pipeline, sweep_bits, sweep_step_ratio,
                      train_config_from_config, write_report)
from .trainer import TrainingDiverged, train

COMMANDS = ("train", "ptq", "sweep-bits", "sweep-step", "probe-level", "kl",
            "error-curves", "gradcheck")


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="robustquant",
        description="Robust-quantization experiment driver (CSV reports).")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", default=None, help="flat key=value config file")
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--out", default=None, help="output path (checkpoint or CSV)")
        p.add_argument("--jobs", type=int, default=1)
        p.add_argument("--ckpt", default=None, help="checkpoint to evaluate")
    return parser


def _parse_overrides(parser, extra) -> list:
    pairs = []
    i = 0
    while i < len(extra):
        key = extra[i]
        if not key.startswith("--") or i + 1 >= len(extra):
            parser.error(f"expected '--key value' override, got {' '.join(extra[i:])}")
        pairs.append((key[2:], extra[i + 1]))
        i += 2
    return pairs


def _bits_arg(raw) -> object:
    return "FP" if str(raw).upper() == "FP" else int(raw)


def _load_ckpt(parser, args):
    if not args.ckpt:
        parser.error(f"{args.command} requires --ckpt")
    return load_checkpoint(args.ckpt)


def main(argv=None) -> int:
    parser = _build_parser()
    args, extra = parser.parse_known_args(argv)
    cfg = Config.from_file(args.config) if args.config else Config()
    cfg.apply_overrides(_parse_overrides(parser, extra))
    jobs = max(1, args.jobs)
    command = args.command

    if command == "train":
        seed = args.seed if args.seed is not None else cfg.get("seed", 0, int)
        data = dataset_from_config(cfg, seed)
        spec = model_spec_from_config(cfg, data)
        tc = train_config_from_config(cfg, seed)
        try:
            ckpt = train(spec, data, tc)
        except TrainingDiverged as exc:
            print(f"error: {exc}", file=sys.stderr)
            return 1
        out = args.out or "model.rqck"
        save_checkpoint(ckpt, out)
        print(f"checkpoint written to {out} "
              f"(val_accuracy={ckpt.meta['val_accuracy']}, epoch={ckpt.meta['epoch']})")
        return 0

    if command == "error-curves":
        d_grid = cfg.get_list("curves.d", [round(0.5 + 0.1 * i, 1) for i in range(36)], float)
        bits = cfg.get_list("curves.bits", range(2, 9), int)
        rows, ok = error_curves(d_grid, bits)
        write_report(args.out or "error_curves.csv", command, rows, cfg.resolved_items())
        if not ok:
            bad = [(r["d"], r["bits"]) for r in rows if not r["ok"]]
            print(f"dominance violated at: {bad}", file=sys.stderr)
            return 1
        return 0

    if command == "gradcheck":
        seed = args.seed if args.seed is not None else cfg.get("seed", 0, int)
        points = cfg.get("gradcheck.points", 10, int)
        rows, ok = gradcheck_report(seed, points)
        write_report(args.out or "gradcheck.csv", command, rows, cfg.resolved_items())
        if not ok:
            bad = sorted({r["op"] for r in rows if not r["pass"]})
            print(f"gradient check failed for: {bad}", file=sys.stderr)
            return 1
        return 0

    # remaining commands evaluate an existing checkpoint
    ckpt = _load_ckpt(parser, args)
    seed = args.seed if args.seed is not None else int(ckpt.meta.get("seed", 0))
    data = dataset_from_config(cfg, seed)

    if command == "ptq":
        row = ptq_pipeline(
            ckpt, data,
            bits_w=_bits_arg(cfg.get("ptq.bits_w", 4)),
            bits_a=_bits_arg(cfg.get("ptq.bits_a", "FP")),
            fit=cfg.get("ptq.fit", "minmax"),
            calib_size=cfg.get("ptq.calib", 256, int),
            percentile=cfg.get("ptq.percentile", 99.9, float),
        )
        write_report(args.out or "ptq.csv", command, [row], cfg.resolved_items())
        return 0

    if command == "sweep-bits":
        rows = sweep_bits(
            ckpt, data,
            bits_list=cfg.get_list("sweep.bits", range(3, 9), int),
            mode=cfg.get("sweep.mode", "ptq"),
            fit=cfg.get("sweep.fit", "minmax"),
            jobs=jobs,
        )
        write_report(args.out or "sweep_bits.csv", command, rows, cfg.resolved_items())
        return 0

    if command == "sweep-step":
        rows, auc = sweep_step_ratio(
            ckpt, data,
            bits=cfg.get("sweep.bits_w", 4, int),
            ratios=cfg.get_list("sweep.ratios", default_ratio_grid(), float),
            fit=cfg.get("sweep.fit", "minmax"),
            jobs=jobs,
        )
        write_report(args.out or "sweep_step.csv", command, rows, cfg.resolved_items(),
                     extra_comments=[f"auc_ratio_0.8_1.2 = {auc:.6g}"])
        return 0

    if command == "probe-level":
        rows = probe_single_level(ckpt, data, bits=cfg.get("probe.bits", 4, int), jobs=jobs)
        write_report(args.out or "probe_level.csv", command, rows, cfg.resolved_items())
        return 0

    if command == "kl":
        rows = kl_propagation(
            ckpt, data,
            bits_w=_bits_arg(cfg.get("kl.bits_w", 4)),
            probe_size=cfg.get("kl.probe", 256, int),
            fit=cfg.get("kl.fit", "minmax"),
        )
        write_report(args.out or "kl.csv", command, rows, cfg.resolved_items())
        return 0

    raise AssertionError(f"unhandled command {command}")


if __name__ == "__main__":
    sys.exit(main())
