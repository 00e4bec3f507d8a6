"""``mvdis`` command line.

Every RunConfig field is exposed as a dotted flag (``--stage2.lambda_dis 0.05``)
that overrides the value read from ``--config``.
"""
from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
import types
import typing

import numpy as np

from . import pipeline
from .datasets import load_blocks, save_blocks
from .disentangle import conditional_sample
from .evaluate import cluster_metrics, kmeans, pca_project, probe_split, summarize, write_projection_csv


def _parse_bool(text: str) -> bool:
    low = text.lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise argparse.ArgumentTypeError(f"not a boolean: {text!r}")


def _parse_seq(conv):
    def parse(text: str):
        return tuple(conv(t) for t in text.split(",") if t.strip())
    return parse


def _optional(conv):
    def parse(text: str):
        return None if text.lower() in ("none", "null") else conv(text)
    return parse


def _converter(tp):
    """argparse ``type`` for a dataclass field annotation."""
    origin = typing.get_origin(tp)
    args = typing.get_args(tp)
    if origin in (typing.Union, types.UnionType):
        inner = [a for a in args if a is not type(None)]
        return _optional(_converter(inner[0]))
    if origin in (tuple, list):
        return _parse_seq(_converter(args[0]) if args else float)
    if tp is bool:
        return _parse_bool
    if tp in (int, float, str):
        return tp
    return json.loads


def _config_fields(cls=pipeline.RunConfig, prefix=""):
    hints = typing.get_type_hints(cls)
    for f in dataclasses.fields(cls):
        sub = pipeline._NESTED.get((cls, f.name))
        if sub is not None:
            yield from _config_fields(sub, f"{prefix}{f.name}.")
        elif f.name != "seeds":
            yield prefix + f.name, hints[f.name]


def _add_config_flags(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("config overrides")
    for name, tp in _config_fields():
        g.add_argument(f"--{name}", dest=f"cfg:{name}", type=_converter(tp), default=None, metavar="V")


def _resolve_config(args) -> pipeline.RunConfig:
    cfg = pipeline.load_config(args.config) if args.config else pipeline.RunConfig()
    for key, value in vars(args).items():
        if key.startswith("cfg:") and value is not None:
            cfg = pipeline.set_field(cfg, key[4:], value)
    cfg.validate()
    return cfg


def _print_record(rec) -> None:
    print(json.dumps({k: v for k, v in dataclasses.asdict(rec).items() if k != "extra"}))


def cmd_defaults(args) -> int:
    cfg = pipeline.RunConfig()
    if args.out:
        pipeline.save_config(args.out, cfg)
    else:
        print(json.dumps(pipeline.config_to_dict(cfg), indent=2, sort_keys=True))
    return 0


def cmd_run(args) -> int:
    cfg = _resolve_config(args)
    records = [pipeline.run_seed(cfg, s, args.out) for s in args.seed]
    for rec in records:
        _print_record(rec)
    if len(records) > 1:
        for k, (m, s) in summarize(records).items():
            print(f"{k}: {m:.4f} ± {s:.4f}")
    return 0


def cmd_ablate(args) -> int:
    cfg = _resolve_config(args)
    for (ins, clu, spc), rec in pipeline.run_ablation(cfg, args.seed, args.out):
        print(f"L_ins={int(ins)} L_clu={int(clu)} L_spc={int(spc)} acc_clu={rec.acc_clu:.4f} nmi={rec.nmi:.4f}")
    return 0


def cmd_sweep(args) -> int:
    cfg = _resolve_config(args)
    conv = int if args.param in ("d_z", "batch", "epochs") else float
    grid = [conv(v) for v in args.grid.split(",") if v.strip()]
    for value, rec in pipeline.run_sweep(cfg, args.param, grid, args.seed, args.out):
        print(f"{args.param}={value} acc_clu={rec.acc_clu:.4f} nmi={rec.nmi:.4f}")
    return 0


def cmd_eval(args) -> int:
    header, blocks, labels, _ = load_blocks(args.repr)
    rep = np.concatenate(blocks, axis=1)
    if labels is None:
        print("error: representation file carries no labels", file=sys.stderr)
        return 2
    C = args.n_clusters or header.get("C") or len(np.unique(labels))
    km = kmeans(rep, int(C), seed=args.seed, restarts=args.restarts)
    out = cluster_metrics(km.labels, labels)
    probe = probe_split(rep, labels, args.test_frac, args.seed)
    out.update(acc_cls=probe.acc_cls, f_score=probe.f_score)
    print(json.dumps(out))
    return 0


def cmd_generate(args) -> int:
    model = pipeline.load_stage2_model(args.checkpoint)
    rng = np.random.default_rng(args.seed)
    classes = np.repeat(np.arange(model.n_clusters) if args.class_id is None else [args.class_id], args.n)
    x = conditional_sample(model, args.view, classes, "random", rng, len(classes))
    save_blocks(args.out, [x, x], classes, meta={"C": model.n_clusters, "seed": args.seed,
                                                  "note": f"generated view {args.view}, duplicated"})
    print(f"wrote {len(classes)} samples to {args.out}")
    return 0


def cmd_project(args) -> int:
    _, blocks, labels, _ = load_blocks(args.repr)
    write_projection_csv(args.out, pca_project(np.concatenate(blocks, axis=1)), labels)
    return 0


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="mvdis", description="two-stage multi-view disentangled clustering",
                                 allow_abbrev=False)
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("defaults", allow_abbrev=False, help="write the default config")
    p.add_argument("--out")
    p.set_defaults(func=cmd_defaults)

    p = sub.add_parser("run", allow_abbrev=False, help="train and evaluate one or more seeds")
    p.add_argument("--config", required=True)
    p.add_argument("--seed", type=int, nargs="+", required=True)
    p.add_argument("--out", required=True)
    _add_config_flags(p)
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("ablate", allow_abbrev=False, help="loss on/off table")
    p.add_argument("--config")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default="runs")
    _add_config_flags(p)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("sweep", allow_abbrev=False, help="one run per grid value")
    p.add_argument("--param", required=True, choices=sorted(pipeline.SWEEP_PARAMS))
    p.add_argument("--grid", required=True, help="comma-separated values")
    p.add_argument("--config")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default="runs")
    _add_config_flags(p)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("eval", allow_abbrev=False, help="metrics on a dumped representation")
    p.add_argument("repr")
    p.add_argument("--n-clusters", type=int)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--restarts", type=int, default=10)
    p.add_argument("--test-frac", type=float, default=0.2)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("generate", allow_abbrev=False, help="class-conditional samples from a stage-2 checkpoint")
    p.add_argument("checkpoint")
    p.add_argument("--out", required=True)
    p.add_argument("--view", type=int, default=0)
    p.add_argument("--class-id", type=int)
    p.add_argument("--n", type=int, default=10, help="samples per class")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("project", allow_abbrev=False, help="2-D PCA of a representation to CSV")
    p.add_argument("repr")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_project)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except (ValueError, pipeline.StageError, pipeline.CheckpointError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
