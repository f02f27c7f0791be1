"""Command-line entry point.

Exit statuses: 0 success, 2 configuration, 3 checkpoint/shape, 4 input IO,
5 empty data.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path

from .checkpoint import CheckpointError, load_checkpoint
from .config import ConfigError, RunConfig, load_config
from .tensor import ContractError

EXIT_OK, EXIT_CONFIG, EXIT_CHECKPOINT, EXIT_INPUT, EXIT_EMPTY = 0, 2, 3, 4, 5

log = logging.getLogger("tbvlm")


class CliError(Exception):
    def __init__(self, status: int, message: str):
        super().__init__(message)
        self.status = status


def _config(args) -> RunConfig:
    cfg = load_config(args.config)
    if getattr(args, "seed", None) is not None:
        cfg = dataclasses.replace(
            cfg,
            data=dataclasses.replace(cfg.data, seed=args.seed),
            pretrain=dataclasses.replace(cfg.pretrain, seed=args.seed),
            finetune=dataclasses.replace(cfg.finetune, seed=args.seed),
        )
    return cfg


def cmd_gen_data(args) -> int:
    from .synth import build_dataset

    cfg = _config(args)
    d = cfg.data
    try:
        m = build_dataset(d.n_images, args.out, d.split, d.seed, cfg.model.image_size, cfg.model.patch_size,
                          d.noise, d.prevalence, jobs=max(1, args.jobs))
    except OSError as exc:
        raise CliError(EXIT_INPUT, f"cannot write dataset to {args.out}: {exc}") from exc
    sizes = {s: len(m.split(s)) for s in ("train", "val", "test")}
    print(f"wrote {len(m.entries)} records to {args.out} (train {sizes['train']}, "
          f"val {sizes['val']}, test {sizes['test']}; seed {m.seed})")
    return EXIT_OK


def _training_data(data_dir):
    from .objectives import TrainingData

    try:
        return TrainingData.from_dir(data_dir, "train")
    except (OSError, KeyError, json.JSONDecodeError) as exc:
        raise CliError(EXIT_INPUT, f"cannot read dataset {data_dir}: {exc}") from exc
    except ContractError as exc:
        raise CliError(EXIT_EMPTY, str(exc)) from exc


def _cmd_train(args, stage: str) -> int:
    from .objectives import run_stage

    cfg = _config(args)
    if stage == "finetune" and args.checkpoint is None and not args.from_scratch:
        raise CliError(EXIT_CONFIG, "finetune needs --checkpoint from pretraining, or --from-scratch")
    data = _training_data(args.data)
    out = Path(args.out)
    loss_csv = Path(args.loss_csv) if args.loss_csv else out.with_name(out.name + ".loss.csv")
    try:
        ckpt, rows = run_stage(stage, cfg.model, getattr(cfg, stage), data, args.checkpoint, out, loss_csv)
    except CheckpointError as exc:
        raise CliError(EXIT_CHECKPOINT, str(exc)) from exc
    except ContractError as exc:
        raise CliError(EXIT_CHECKPOINT, str(exc)) from exc
    last = f"{rows[-1]['loss_total']:.5f}" if rows else "n/a"
    print(f"{stage}: {len(rows)} steps, final loss {last}; checkpoint {out}; loss log {loss_csv}")
    return EXIT_OK


def _load_ckpt(path):
    try:
        return load_checkpoint(path)
    except CheckpointError as exc:
        raise CliError(EXIT_CHECKPOINT, str(exc)) from exc


def cmd_report(args) -> int:
    from .fusion import export_attention_csv
    from .pipeline import describe
    from .synth import read_pgm
    from .text import Vocabulary
    from .vision import ImageGrid

    ckpt = _load_ckpt(args.checkpoint)
    try:
        img = ImageGrid(read_pgm(args.image))
        note = Path(args.note).read_text(encoding="utf-8") if args.note else ""
    except (OSError, ValueError, IndexError) as exc:
        raise CliError(EXIT_INPUT, f"cannot read input: {exc}") from exc
    try:
        report, fused = describe(img, note, ckpt.params, ckpt.cfg, Vocabulary(ckpt.vocab),
                                 "beam" if args.beam > 1 else "greedy", args.beam)
    except ContractError as exc:
        raise CliError(EXIT_CHECKPOINT, str(exc)) from exc
    print(report.text)
    out = Path(args.out) if args.out else Path(args.image).with_suffix(".report.json")
    out.write_text(json.dumps(report.to_json(), indent=2) + "\n", encoding="utf-8")
    if args.attn:
        n = export_attention_csv(fused, args.attn)
        log.info("wrote %d attention rows to %s", n, args.attn)
    return EXIT_OK


def cmd_evaluate(args) -> int:
    from .metrics import evaluate, format_table, write_report_files
    from .synth import load_manifest

    cfg = load_config(args.config) if args.config else None
    split = args.split or (cfg.eval.split if cfg else "test")
    threshold = args.threshold if args.threshold is not None else (cfg.eval.threshold if cfg else 0.5)
    ckpt = _load_ckpt(args.checkpoint)
    try:
        manifest = load_manifest(args.data)
    except (OSError, KeyError, json.JSONDecodeError) as exc:
        raise CliError(EXIT_INPUT, f"cannot read dataset {args.data}: {exc}") from exc
    if not manifest.split(split):
        raise CliError(EXIT_EMPTY, f"split {split!r} of {args.data} is empty")
    try:
        report = evaluate(ckpt, args.data, split, threshold, oracle=args.oracle)
    except ValueError as exc:
        raise CliError(EXIT_CHECKPOINT, str(exc)) from exc
    paths = write_report_files(report, args.out)
    print(format_table(report.rows), end="")
    log.info("wrote %s", ", ".join(str(p) for p in paths.values()))
    return EXIT_OK


def cmd_shape_check(args) -> int:
    from .params import count_parameters
    from .pipeline import paper_shape_forward

    cfg = _config(args)
    info = paper_shape_forward(cfg.model, seed=args.seed or 0)
    info["parameters"] = count_parameters(cfg.model)
    print(json.dumps({k: list(v) if isinstance(v, tuple) else v for k, v in info.items()}, indent=2))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="tbvlm", description="Desk-scale chest X-ray vision-language model")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, config_required=True):
        sp.add_argument("--config", required=config_required,
                        help="JSON run config, or a preset name (toy, paper-shape)")
        sp.add_argument("--seed", type=int, default=None)
        sp.add_argument("--jobs", type=int, default=1, help="worker cap for parallel stages")

    g = sub.add_parser("gen-data", help="generate a synthetic dataset")
    common(g)
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_gen_data)

    for stage in ("pretrain", "finetune"):
        t = sub.add_parser(stage, help=f"run the {stage} stage")
        common(t)
        t.add_argument("--data", required=True)
        t.add_argument("--checkpoint", default=None, help="input checkpoint")
        t.add_argument("--out", required=True, help="output checkpoint")
        t.add_argument("--loss-csv", default=None)
        if stage == "finetune":
            t.add_argument("--from-scratch", action="store_true")
        t.set_defaults(func=lambda a, s=stage: _cmd_train(a, s))

    r = sub.add_parser("report", help="generate a report for one image and note")
    r.add_argument("--checkpoint", required=True)
    r.add_argument("--image", required=True)
    r.add_argument("--note", default=None, help="text file with the clinical note")
    r.add_argument("--out", default=None, help="report JSON path")
    r.add_argument("--attn", default=None, help="write fusion attention maps to this CSV")
    r.add_argument("--beam", type=int, default=1)
    r.set_defaults(func=cmd_report)

    e = sub.add_parser("evaluate", help="compute detection metrics on a split")
    e.add_argument("--config", default=None)
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--split", default=None, choices=("train", "val", "test"))
    e.add_argument("--threshold", type=float, default=None)
    e.add_argument("--out", required=True)
    e.add_argument("--oracle", action="store_true", help="debug: score with ground-truth masks")
    e.add_argument("--jobs", type=int, default=1)
    e.set_defaults(func=cmd_evaluate)

    s = sub.add_parser("shape-check", help="untrained forward pass at a config's full shape")
    common(s)
    s.set_defaults(func=cmd_shape_check)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.status


if __name__ == "__main__":
    sys.exit(main())
