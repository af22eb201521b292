"""Command-line entry points (``progattr <subcommand> --help``)."""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import bench as bench_mod
from .data import SyntheticConfig, generate_synthetic, load_manifest, preset, split_train_test, write_manifest
from .errors import ProgattrError
from .metrics import display_round, evaluate
from .models import Ensemble
from .persistence import load_model, read_records, save_model
from .training import (TrainConfig, add_attribute, reorder_experiment, train_individual,
                       train_multilabel, train_progressive)

logger = logging.getLogger("progattr")


def _train_config(args) -> TrainConfig:
    cfg = TrainConfig.load(args.config) if getattr(args, "config", None) else TrainConfig()
    if getattr(args, "seed", None) is not None:
        cfg = replace(cfg, seed=args.seed)
    return cfg


def _write_rows(rows: list[dict], out) -> None:
    keys = list(rows[0])
    w = csv.DictWriter(out, fieldnames=keys, lineterminator="\n")
    w.writeheader()
    w.writerows(rows)


def cmd_gen_data(args) -> int:
    if args.config:
        cfg = SyntheticConfig.load(args.config)
    else:
        cfg = SyntheticConfig(preset(args.schema), seed=args.seed, image_size=args.image_size,
                              missing=args.missing, noise_std=args.noise)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    dataset, truth = generate_synthetic(cfg, args.count)
    write_manifest(dataset, out / "manifest.csv", inline=args.inline)
    cfg.save(out / "synthetic.json")
    with open(out / "truth.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["id"] + cfg.schema.names)
        for sid, row in zip(dataset.ids, truth):
            w.writerow([sid] + [cfg.schema.attributes[k].class_names[v] for k, v in enumerate(row)])
    print(f"wrote {len(dataset)} samples to {out}")
    return 0


def cmd_train(args) -> int:
    cfg = _train_config(args)
    data = load_manifest(args.data)
    if args.mode == "progressive":
        model, log = train_progressive(data, cfg)
        save_model(model, args.out)
        logs = {"progressive": log}
    elif args.mode == "multilabel":
        model, log = train_multilabel(data, cfg)
        save_model(model, args.out)
        logs = {"multilabel": log}
    else:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        attrs = [args.attribute] if args.attribute else data.schema.names
        logs = {}
        for attr in attrs:
            model, logs[attr] = train_individual(data, attr, cfg)
            save_model(model, out / f"{attr}.patr")
    for name, log in logs.items():
        print(f"[{name}]\n{log.to_text()}")
    if args.log:
        with open(args.log, "w") as fh:
            json.dump({k: json.loads(v.to_json()) for k, v in logs.items()}, fh, indent=2)
    return 0


def _load_models(paths):
    models = [load_model(p) for p in paths]
    if len(models) == 1:
        return models[0]
    return Ensemble(models)


def cmd_eval(args) -> int:
    model = _load_models(args.model)
    data = load_manifest(args.data)
    report = evaluate(model, data)
    for attr, acc in report.per_attribute.items():
        print(f"{attr}: {display_round(acc):.2f}")
    print(f"Overall: {display_round(report.overall):.2f}")
    if args.out:
        report.save_json(args.out)
    if args.pr:
        report.write_pr_table(args.pr, data.schema)
    return 0


def comparison_table(reports: dict, attributes) -> str:
    header = ["Model"] + list(attributes) + ["Overall"]
    lines = [",".join(header)]
    for mode, rep in reports.items():
        vals = [f"{display_round(rep.per_attribute[a]):.2f}" for a in attributes]
        lines.append(",".join([mode] + vals + [f"{display_round(rep.overall):.2f}"]))
    return "\n".join(lines)


def cmd_compare(args) -> int:
    cfg = _train_config(args)
    data = load_manifest(args.data)
    train, test = split_train_test(data, args.ratio, cfg.seed)
    ensemble = Ensemble([train_individual(train, a, cfg)[0] for a in data.schema.names])
    prog, _ = train_progressive(train, cfg)
    ml, _ = train_multilabel(train, cfg)
    reports = {"Individual": evaluate(ensemble, test), "Multi-Label": evaluate(ml, test),
               "Progressive": evaluate(prog, test)}
    print(comparison_table(reports, data.schema.names))
    return 0


def cmd_reorder(args) -> int:
    cfg = _train_config(args)
    data = load_manifest(args.data)
    orderings = [o.split(",") for o in args.ordering] if args.ordering else None
    result = reorder_experiment(data, cfg, orderings, allow_large=args.allow_large)
    print(result.to_text())
    return 0


def cmd_pr_export(args) -> int:
    model = _load_models(args.model)
    data = load_manifest(args.data)
    report = evaluate(model, data)
    report.write_pr_table(args.out, data.schema)
    print(f"wrote PR table to {args.out}")
    return 0


def cmd_bench(args) -> int:
    model = load_model(args.model)
    if model.kind != "progressive":
        raise ProgattrError("bench needs a progressive model file")
    data = load_manifest(args.data)
    feats = data.features[:args.images]
    cmp = bench_mod.bench_inference(model, feats, args.batch_size, args.repetitions)
    _write_rows(cmp.to_rows(), sys.stdout)
    print(f"ratio,{cmp.ratio:.4f}\noutputs_equal,{cmp.outputs_equal}")
    return 0


def cmd_add_attribute(args) -> int:
    cfg = _train_config(args)
    model = load_model(args.model)
    if model.kind != "progressive":
        raise ProgattrError("add-attribute needs a progressive model file")
    data = load_manifest(args.data)
    model, log = add_attribute(model, data, args.attribute, cfg, args.epochs)
    save_model(model, args.out)
    before, after = read_records(args.model), read_records(args.out)
    unchanged = all(np.array_equal(v, after[k]) and v.tobytes() == after[k].tobytes()
                    for k, v in before.items())
    print(log.to_text())
    print(f"existing records unchanged: {unchanged}")
    return 0 if unchanged else 1


def cmd_serve(args) -> int:
    from .service import serve

    serve(args.model, args.bind)
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="progattr", description="Progressive attribute extraction")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="generate a synthetic dataset")
    g.add_argument("--schema", default="jeans", help="preset: jeans, tops or dresses")
    g.add_argument("--config", help="synthetic config JSON (overrides the other options)")
    g.add_argument("--count", type=int, default=2000)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--image-size", type=int, default=32)
    g.add_argument("--missing", type=float, default=0.3)
    g.add_argument("--noise", type=float, default=0.0)
    g.add_argument("--inline", action="store_true", help="embed features as hex in the manifest")
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_gen_data)

    def common(sp, model=False):
        sp.add_argument("--data", required=True, help="manifest CSV")
        sp.add_argument("--config", help="training config JSON")
        sp.add_argument("--seed", type=int)
        if model:
            sp.add_argument("--model", required=True, nargs="+", help="model file(s)")

    t = sub.add_parser("train", help="train one model family")
    common(t)
    t.add_argument("--mode", choices=["progressive", "individual", "multilabel"], default="progressive")
    t.add_argument("--attribute", help="individual mode: train only this attribute")
    t.add_argument("--out", required=True, help="model file (directory for individual mode)")
    t.add_argument("--log", help="write the phase log as JSON")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate model file(s) on a manifest")
    common(e, model=True)
    e.add_argument("--out", help="report JSON")
    e.add_argument("--pr", help="PR table CSV")
    e.set_defaults(func=cmd_eval)

    c = sub.add_parser("compare", help="train all three families and print an accuracy table")
    common(c)
    c.add_argument("--ratio", type=float, default=0.8)
    c.set_defaults(func=cmd_compare)

    r = sub.add_parser("reorder", help="progressive training under every attribute ordering")
    common(r)
    r.add_argument("--ordering", action="append", help="comma-separated ordering (repeatable)")
    r.add_argument("--allow-large", action="store_true")
    r.set_defaults(func=cmd_reorder)

    pr = sub.add_parser("pr-export", help="write per-class PR points")
    common(pr, model=True)
    pr.add_argument("--out", required=True)
    pr.set_defaults(func=cmd_pr_export)

    b = sub.add_parser("bench", help="shared-base versus ensemble inference timing")
    b.add_argument("--model", required=True)
    b.add_argument("--data", required=True)
    b.add_argument("--images", type=int, default=256)
    b.add_argument("--batch-size", type=int, default=32)
    b.add_argument("--repetitions", type=int, default=5)
    b.set_defaults(func=cmd_bench)

    a = sub.add_parser("add-attribute", help="attach and train a new branch with the base frozen")
    common(a)
    a.add_argument("--model", required=True)
    a.add_argument("--attribute", required=True)
    a.add_argument("--epochs", type=int)
    a.add_argument("--out", required=True)
    a.set_defaults(func=cmd_add_attribute)

    s = sub.add_parser("serve", help="serve predictions over HTTP")
    s.add_argument("--model", required=True)
    s.add_argument("--bind", default="127.0.0.1:8000")
    s.set_defaults(func=cmd_serve)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ProgattrError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
