"""Command-line entry point: partition, gen-synth, build-supervision, train, evaluate, report."""
from __future__ import annotations

import argparse
import json
import os
import sys
from dataclasses import replace
from typing import Optional

from . import harness, selection, synthbench, training
from .config import GlobalConfig, JsonlLogger, load_config
from .imaging import GridSpec, crop_filename, load_png, partition, save_png


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON config file (defaults also come from $SEMCLIP_CONFIG)")
    p.add_argument("--seed", type=int, help="override the config seed")
    p.add_argument("--out", help="output directory", default=None)


def _resolve_config(args: argparse.Namespace) -> GlobalConfig:
    cfg = load_config(args.config)
    if getattr(args, "seed", None) is not None:
        cfg = replace(cfg, seed=args.seed)
    return cfg


def _cmd_partition(args: argparse.Namespace) -> int:
    image = load_png(args.image)
    subs = partition(image, GridSpec(args.grid_n))
    out_dir = args.out or "."
    os.makedirs(out_dir, exist_ok=True)
    instance_id = os.path.splitext(os.path.basename(args.image))[0]
    for sub in subs:
        save_png(sub.image, os.path.join(out_dir, crop_filename(instance_id, sub.region)))
    print(f"wrote {len(subs)} crops to {out_dir}")
    return 0


def _cmd_gen_synth(args: argparse.Namespace) -> int:
    raw = {}
    if args.synth_config:
        with open(args.synth_config, "r", encoding="utf-8") as fh:
            raw = json.load(fh)
    raw.setdefault("count", args.count)
    if args.count is not None:
        raw["count"] = args.count
    if args.seed is not None:
        raw["seed"] = args.seed
    config = synthbench.synth_config_from_dict(raw)
    instances = synthbench.generate(config)
    out_dir = args.out or "synth_data"
    os.makedirs(out_dir, exist_ok=True)
    manifest, scenes = synthbench.write_dataset(instances, out_dir)
    print(f"wrote {len(instances)} instances: {manifest}, {scenes}")
    return 0


def _cmd_build_supervision(args: argparse.Namespace) -> int:
    cfg = _resolve_config(args)
    out_dir = args.out or "."
    os.makedirs(out_dir, exist_ok=True)
    run = harness.RunConfig(
        dataset=args.dataset,
        strategy=selection.NoSelection(),
        grid_n=args.grid_n if args.grid_n is not None else cfg.grid_n,
        answerer=args.answerer or cfg.answerer,
        scenes=args.scenes,
        seed=cfg.seed,
    )
    instances = synthbench.load_manifest(args.dataset)
    answerer = harness.build_answerer(run)
    logger = JsonlLogger.to_path(os.path.join(out_dir, "supervision_log.jsonl"))
    examples = training.build_supervision(instances, answerer, GridSpec(run.grid_n), logger=logger)
    logger.close()
    path = os.path.join(out_dir, "supervision.jsonl")
    training.write_supervision(examples, path)
    usable = sum(1 for e in examples if e.usable)
    print(f"wrote {len(examples)} supervision examples ({usable} usable) to {path}")
    return 0


def _cmd_train(args: argparse.Namespace) -> int:
    cfg = _resolve_config(args)
    out_dir = args.out or "."
    os.makedirs(out_dir, exist_ok=True)
    examples = training.load_supervision(args.supervision)
    instances = {inst.instance_id: inst for inst in synthbench.load_manifest(args.dataset)}
    train_config = training.TrainConfig(
        margin=cfg.margin,
        learning_rate=cfg.learning_rate,
        batch_size=cfg.batch_size,
        epochs=cfg.epochs,
        seed=cfg.seed,
        pair_cap_per_instance=cfg.pair_cap_per_instance,
    )
    pairs = []
    for ex in examples:
        if not ex.usable or ex.instance_id not in instances:
            continue
        crops = partition(instances[ex.instance_id].image, ex.grid)
        pairs.extend(training.make_pairs(ex, crops, train_config.pair_cap_per_instance, seed=train_config.seed))
    logger = JsonlLogger.to_path(os.path.join(out_dir, "train_log.jsonl"))
    encoder, train_log = training.train_scorer(pairs, train_config, embed_dim=cfg.embed_dim, logger=logger)
    logger.close()
    path = os.path.join(out_dir, "encoder.json")
    training.save_encoder(path, encoder, train_log)
    print(
        f"trained on {train_log.n_pairs} pairs; selected epoch {train_log.selected_epoch} "
        f"(loss {train_log.selected_loss:.6f}); saved {path}"
    )
    return 0


def _cmd_evaluate(args: argparse.Namespace) -> int:
    cfg = _resolve_config(args)
    out_dir = args.out or "."
    os.makedirs(out_dir, exist_ok=True)
    k = args.k if args.k is not None else cfg.k
    strategy = selection.parse_strategy(args.strategy or cfg.strategy, k=k)
    run = harness.RunConfig(
        dataset=args.dataset,
        strategy=strategy,
        grid_n=args.grid_n if args.grid_n is not None else cfg.grid_n,
        k=k,
        include_overview=not args.no_overview if args.no_overview is not None else cfg.include_overview,
        answerer=args.answerer or cfg.answerer,
        scorer=args.scorer or cfg.scorer,
        scenes=args.scenes,
        seed=cfg.seed,
        repeats=args.repeats if args.repeats is not None else cfg.repeats,
        parallelism=cfg.parallelism,
        tokens_per_image=cfg.tokens_per_image,
        temperature=cfg.temperature,
        embed_dim=cfg.embed_dim,
    )
    logger = JsonlLogger.to_path(os.path.join(out_dir, "eval_log.jsonl"))
    if isinstance(strategy, selection.RandomPick):
        metrics, repeat_records = harness.run_random_repeats(run, logger=logger)
        records = [rec for records in repeat_records for rec in records]
    else:
        metrics, records = harness.evaluate(run, logger=logger)
    logger.close()
    harness.write_records(os.path.join(out_dir, "records.jsonl"), records)
    harness.write_metrics(os.path.join(out_dir, "metrics.json"), metrics)
    acc = "n/a" if metrics.accuracy is None else f"{metrics.accuracy:.4f}"
    print(f"strategy={metrics.strategy} accuracy={acc} instances={metrics.n_instances} queries={metrics.total_queries}")
    return 0


def _cmd_report(args: argparse.Namespace) -> int:
    metrics_sets = []
    for path in args.metrics:
        with open(path, "r", encoding="utf-8") as fh:
            doc = json.load(fh)
        metrics_sets.append(harness.Metrics(**doc))
    out_dir = args.out or "."
    paths = harness.report(metrics_sets, out_dir, plot=args.plot)
    print("wrote " + ", ".join(paths.values()))
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="semclip", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("partition", help="split an image into grid crops")
    p.add_argument("--image", required=True)
    p.add_argument("--grid-n", type=int, default=3)
    p.add_argument("--out")
    p.set_defaults(func=_cmd_partition)

    p = sub.add_parser("gen-synth", help="generate a synthetic benchmark dataset")
    p.add_argument("--count", type=int, default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--synth-config", help="JSON file of generator settings")
    p.add_argument("--out")
    p.set_defaults(func=_cmd_gen_synth)

    p = sub.add_parser("build-supervision", help="label sub-images by answer correctness")
    _add_common(p)
    p.add_argument("--dataset", required=True, help="manifest.jsonl path")
    p.add_argument("--answerer", help="toy | external:<endpoint>")
    p.add_argument("--scenes", help="scenes.jsonl for the toy answerer")
    p.add_argument("--grid-n", type=int)
    p.set_defaults(func=_cmd_build_supervision)

    p = sub.add_parser("train", help="train the tiny bi-encoder on supervision pairs")
    _add_common(p)
    p.add_argument("--dataset", required=True)
    p.add_argument("--supervision", required=True)
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("evaluate", help="run a selection strategy over a dataset")
    _add_common(p)
    p.add_argument("--dataset", required=True)
    p.add_argument("--strategy", choices=["topk", "random", "optimal", "majority", "none"])
    p.add_argument("--k", type=int)
    p.add_argument("--grid-n", type=int)
    p.add_argument("--scorer", help="tiny | tiny:<encoder.json> | gt | external:<endpoint>")
    p.add_argument("--answerer", help="toy | external:<endpoint>")
    p.add_argument("--scenes")
    p.add_argument("--repeats", type=int)
    p.add_argument("--no-overview", action="store_true", default=None, help="sub-image-only ablation")
    p.set_defaults(func=_cmd_evaluate)

    p = sub.add_parser("report", help="render a comparison table from metrics files")
    p.add_argument("--metrics", nargs="+", required=True)
    p.add_argument("--out")
    p.add_argument("--plot", action="store_true")
    p.set_defaults(func=_cmd_report)
    return parser


def main(argv: Optional[list[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
