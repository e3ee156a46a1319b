"""Command-line entry point.

Exit codes: 0 success, 1 invalid configuration or arguments, 2 numeric failure
(non-finite losses, diverged training, failed gradient checks).
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import harness as H
from .data import generate, generate_sequence, save_dataset, split
from .errors import DimensionError, NumericError, TsskdError, ValidationError
from .models import load_checkpoint

EXIT_OK, EXIT_VALIDATION, EXIT_NUMERIC = 0, 1, 2

log = logging.getLogger("tsskd")


def _load_config(args, mode: str) -> H.RunConfig:
    cfg = H.RunConfig.load(args.config) if args.config else H.RunConfig()
    cfg = replace(cfg, mode=mode)
    if args.seed is not None:
        cfg = replace(cfg, seed=args.seed)
    if args.out is not None:
        cfg = replace(cfg, out=args.out)
    return cfg


def _write_json(path: Path, obj) -> None:
    with open(path, "w") as fp:
        json.dump(obj, fp, indent=2, sort_keys=True)
        fp.write("\n")


def _write_eval_csv(path: Path, rows: list[tuple[str, H.EvalReport]]) -> None:
    with open(path, "w", newline="") as fp:
        w = csv.writer(fp, lineterminator="\n")
        w.writerow(("model", "dp", "op", "auc", "params", "size_bytes"))
        for name, rep in rows:
            w.writerow((name, repr(rep.dp), repr(rep.op), repr(rep.auc), rep.params, rep.size_bytes))


def cmd_gen_data(args) -> int:
    cfg = _load_config(args, "gen-data")
    spec = cfg.data.scene()
    samples = generate(spec, cfg.data.count, cfg.data.seed)
    train, val, srch = split(samples, cfg.data.ratios)
    pos = {id(s): i for i, s in enumerate(samples)}
    splits = {name: [pos[id(s)] for s in part] for name, part in (("train", train), ("val", val), ("search", srch))}
    save_dataset(cfg.out, samples, spec, cfg.data.seed, splits)
    print(f"wrote {len(samples)} samples to {cfg.out}")
    return EXIT_OK


def cmd_search(args) -> int:
    cfg = _load_config(args, "search")
    _, summary = H.run_search(cfg, cfg.out)
    print(json.dumps(summary, sort_keys=True))
    return EXIT_OK


def _teacher(cfg: H.RunConfig, train, out: Path):
    if cfg.teacher_checkpoint:
        model, _ = load_checkpoint(cfg.teacher_checkpoint)
        if model.cfg != cfg.teacher_arch() and cfg.teacher is not None:
            raise ValidationError("teacher checkpoint does not match the configured teacher")
        if model.cfg.head_kind != cfg.head_kind:
            raise ValidationError(f"teacher checkpoint head {model.cfg.head_kind} differs from run head {cfg.head_kind}")
        return model
    return H.train_teacher(cfg, train, out)


def cmd_distill(args) -> int:
    cfg = _load_config(args, "distill")
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    _write_json(out / "config.json", cfg.to_dict())
    train, val, test = H.load_or_generate(cfg)
    teacher = _teacher(cfg, train, out)
    res = H.distill(cfg, teacher, train, out)
    rows = [("teacher", H.evaluate(teacher, val))]
    rows += [(n, H.evaluate(m, val)) for n, m in zip(res.names, res.students)]
    _write_eval_csv(out / "eval.csv", rows)
    for name, rep in rows:
        print(f"{name}: dp={rep.dp:.4f} op={rep.op:.4f} auc={rep.auc:.4f} params={rep.params}")
    return EXIT_OK


def cmd_eval(args) -> int:
    cfg = _load_config(args, "eval")
    if not args.checkpoint:
        raise ValidationError("eval needs --checkpoint")
    _, val, _ = H.load_or_generate(cfg)
    rep = H.evaluate(args.checkpoint, val)
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    _write_json(out / "eval.json", rep.to_dict())
    _write_eval_csv(out / "eval.csv", [(Path(args.checkpoint).stem, rep)])
    print(f"dp={rep.dp:.4f} op={rep.op:.4f} auc={rep.auc:.4f}")
    return EXIT_OK


def cmd_track(args) -> int:
    cfg = _load_config(args, "track")
    if not args.checkpoint:
        raise ValidationError("track needs --checkpoint")
    frames, truth = generate_sequence(cfg.data.scene(), args.frames, cfg.seed, velocity=tuple(args.velocity))
    res = H.track_sequence(args.checkpoint, frames, truth[0])
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "track.csv", "w", newline="") as fp:
        w = csv.writer(fp, lineterminator="\n")
        w.writerow(("frame", "cx", "cy", "w", "h", "gt_cx", "gt_cy", "gt_w", "gt_h", "clamped"))
        for i, (b, g, c) in enumerate(zip(res.boxes, truth, res.clamped)):
            w.writerow([i] + [repr(float(v)) for v in b] + [repr(float(v)) for v in g] + [int(c)])
    dp, op, auc, _, _ = H.tracking_metrics(np.array(res.predictions), np.array(truth[1:]), 271)
    print(f"frames={len(frames)} op={op:.4f} auc={auc:.4f} clamped={sum(res.clamped)}")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    from .gradcheck import gradcheck_suite

    report = gradcheck_suite(instances=args.instances, seed=args.seed or 0)
    print(report.format())
    if args.out:
        Path(args.out).mkdir(parents=True, exist_ok=True)
        with open(Path(args.out) / "gradcheck.csv", "w", newline="") as fp:
            w = csv.writer(fp, lineterminator="\n")
            w.writerow(("case", "max_rel_error", "instances", "passed"))
            for r in report.results:
                w.writerow((r.name, repr(r.max_rel_error), r.instances, int(r.passed)))
    return EXIT_OK if report.ok else EXIT_NUMERIC


COMMANDS = {
    "gen-data": cmd_gen_data,
    "search": cmd_search,
    "distill": cmd_distill,
    "eval": cmd_eval,
    "track": cmd_track,
    "gradcheck": cmd_gradcheck,
}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="tsskd", description="Siamese tracker distillation on synthetic scenes.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        sp = sub.add_parser(name)
        sp.add_argument("--config", help="JSON run configuration")
        sp.add_argument("--seed", type=int, help="override the configured seed")
        sp.add_argument("--out", help="output directory (overrides config 'out')")
        if name in ("eval", "track"):
            sp.add_argument("--checkpoint", help="model checkpoint to load")
        if name == "track":
            sp.add_argument("--frames", type=int, default=30)
            sp.add_argument("--velocity", type=float, nargs=2, default=(0.0, 0.0))
        if name == "gradcheck":
            sp.add_argument("--instances", type=int, default=25)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(asctime)s %(message)s")
    try:
        return COMMANDS[args.command](args)
    except (ValidationError, DimensionError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except TsskdError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION


if __name__ == "__main__":
    sys.exit(main())
