#!/usr/bin/env python3
"""Full protocol comparison on a synthetic benchmark.

Generates a training and an evaluation split, trains the tiny bi-encoder from
distant supervision, then evaluates every selection strategy on the same
split and renders the accuracy / token-budget comparison table.

Example:
    python scripts/run_protocol_comparison.py --out runs/comparison --eval-count 300
"""
import argparse
import os
import sys

from semclip import harness, selection, synthbench, training
from semclip.config import JsonlLogger, load_config
from semclip.imaging import GridSpec, partition


def parse_args():
    p = argparse.ArgumentParser(description=__doc__)
    p.add_argument("--out", default="runs/comparison")
    p.add_argument("--train-count", type=int, default=500)
    p.add_argument("--eval-count", type=int, default=300)
    p.add_argument("--train-seed", type=int, default=1006)
    p.add_argument("--eval-seed", type=int, default=1005)
    p.add_argument("--fraction-overview-solvable", type=float, default=0.2)
    p.add_argument("--repeats", type=int, default=32)
    p.add_argument("--train-config", default=os.path.join("configs", "tiny_scorer_synthbench.json"))
    p.add_argument("--parallelism", type=int, default=1)
    return p.parse_args()


def gen_split(out_dir, count, seed, fraction):
    config = synthbench.SynthConfig(count=count, seed=seed, fraction_overview_solvable=fraction)
    instances = synthbench.generate(config)
    manifest, scenes = synthbench.write_dataset(instances, out_dir)
    return manifest


def train_scorer_from(manifest, cfg, out_dir, logger):
    instances = synthbench.load_manifest(manifest)
    answerer = harness.build_answerer(
        harness.RunConfig(dataset=manifest, strategy=selection.NoSelection(), grid_n=cfg.grid_n)
    )
    examples = training.build_supervision(instances, answerer, GridSpec(cfg.grid_n), logger=logger)
    usable = [e for e in examples if e.usable]
    print(f"supervision: {len(usable)}/{len(examples)} usable instances")
    by_id = {i.instance_id: i for i in instances}
    train_config = training.TrainConfig(
        margin=cfg.margin,
        learning_rate=cfg.learning_rate,
        batch_size=cfg.batch_size,
        epochs=cfg.epochs,
        seed=cfg.seed,
        pair_cap_per_instance=cfg.pair_cap_per_instance,
    )
    pairs = []
    for ex in usable:
        crops = partition(by_id[ex.instance_id].image, ex.grid)
        pairs.extend(training.make_pairs(ex, crops, train_config.pair_cap_per_instance, seed=train_config.seed))
    print(f"training on {len(pairs)} contrastive pairs")
    encoder, log = training.train_scorer(pairs, train_config, embed_dim=cfg.embed_dim, logger=logger)
    path = os.path.join(out_dir, "encoder.json")
    training.save_encoder(path, encoder, log)
    print(f"selected epoch {log.selected_epoch} (loss {log.selected_loss:.6f}) -> {path}")
    return path


def main():
    args = parse_args()
    os.makedirs(args.out, exist_ok=True)
    cfg = load_config(args.train_config)
    logger = JsonlLogger.to_path(os.path.join(args.out, "run_log.jsonl"), run_id="protocol-comparison")

    train_manifest = gen_split(
        os.path.join(args.out, "train_data"), args.train_count, args.train_seed, args.fraction_overview_solvable
    )
    eval_manifest = gen_split(
        os.path.join(args.out, "eval_data"), args.eval_count, args.eval_seed, args.fraction_overview_solvable
    )
    encoder_path = train_scorer_from(train_manifest, cfg, args.out, logger)

    def run_config(strategy, **kw):
        base = dict(
            dataset=eval_manifest,
            strategy=strategy,
            grid_n=cfg.grid_n,
            seed=cfg.seed,
            repeats=args.repeats,
            parallelism=args.parallelism,
        )
        base.update(kw)
        return harness.RunConfig(**base)

    prep_cache = {}
    instances = synthbench.load_manifest(eval_manifest)
    answerer = harness.build_answerer(run_config(selection.NoSelection()))

    all_metrics = []
    runs = [
        ("overview-only", run_config(selection.NoSelection())),
        ("topk-trained", run_config(selection.TopK(k=1), scorer=f"tiny:{encoder_path}")),
        ("topk-subimg-only", run_config(selection.TopK(k=1), scorer=f"tiny:{encoder_path}", include_overview=False)),
        ("majority", run_config(selection.MajorityVote())),
        ("optimal", run_config(selection.Optimal())),
    ]
    for label, config in runs:
        metrics, records = harness.evaluate(
            config, logger=logger, instances=instances, answerer=answerer, prep_cache=prep_cache
        )
        metrics.strategy = label
        harness.write_records(os.path.join(args.out, f"records_{label}.jsonl"), records)
        harness.write_metrics(os.path.join(args.out, f"metrics_{label}.json"), metrics)
        all_metrics.append(metrics)
        print(f"{label:18s} accuracy={metrics.accuracy:.4f} tokens={metrics.mean_visual_tokens:.0f}")

    rand_metrics, rand_records = harness.run_random_repeats(
        run_config(selection.RandomPick(k=1), seed=42),
        logger=logger,
        instances=instances,
        answerer=answerer,
        prep_cache=prep_cache,
    )
    rand_metrics.strategy = "random-mean"
    harness.write_metrics(os.path.join(args.out, "metrics_random-mean.json"), rand_metrics)
    all_metrics.append(rand_metrics)
    print(f"{'random-mean':18s} accuracy={rand_metrics.accuracy:.4f} over {args.repeats} repeats")

    paths = harness.report(all_metrics, args.out, plot=True)
    logger.close()
    print("report:", paths["csv"], paths["md"], paths.get("plot", ""))
    return 0


if __name__ == "__main__":
    sys.exit(main())
