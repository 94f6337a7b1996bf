"""End-to-end evaluation: run a selection strategy over a dataset, judge answers,
account for visual tokens, and render comparison reports."""
from __future__ import annotations

import csv
import dataclasses
import json
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace
from typing import Optional, Sequence

import numpy as np

from .backends import Answerer, AnswerRequest, ExternalAnswerer, ToyOracleAnswerer, b64_png
from .config import JsonlLogger, answers_match
from .imaging import GridSpec, partition
from .scoring import (
    CosineScorer,
    ExternalEncoderProvider,
    ScorerKind,
    TinyBiEncoder,
    score_subimages,
    tokenize,
)
from .selection import (
    MajorityVote,
    NoSelection,
    Optimal,
    RandomPick,
    SelectionStrategy,
    TopK,
    majority_vote,
    select_optimal,
    select_random,
    select_topk,
)
from .synthbench import ManifestInstance, default_scenes_path, load_manifest, load_scenes
from .training import load_encoder

GT_SCORER = "gt"


@dataclass(frozen=True)
class TokenBudget:
    tokens_per_image: int
    composition_size: int

    def __post_init__(self):
        if self.tokens_per_image < 1 or self.composition_size < 1:
            raise ValueError("tokens_per_image and composition_size must be >= 1")

    @property
    def total(self) -> int:
        return self.tokens_per_image * self.composition_size


def token_count(composition_size: int, tokens_per_image: int = 576) -> int:
    return TokenBudget(tokens_per_image=tokens_per_image, composition_size=composition_size).total


@dataclass
class EvalRecord:
    instance_id: str
    strategy: str
    chosen: list[int]
    predicted: str
    correct: bool
    visual_token_count: int
    wall_time: float
    n_queries: int = 1
    error: Optional[str] = None

    def to_json_dict(self) -> dict:
        return dataclasses.asdict(self)


@dataclass(frozen=True)
class RunConfig:
    dataset: str
    strategy: SelectionStrategy
    grid_n: int = 3
    k: int = 1
    include_overview: bool = True
    answerer: str = "toy"
    scorer: str = "tiny"
    scenes: Optional[str] = None
    seed: int = 0
    repeats: int = 32
    parallelism: int = 1
    tokens_per_image: int = 576
    temperature: float = 0.0
    embed_dim: int = 32

    def __post_init__(self):
        if self.repeats < 1:
            raise ValueError("repeats must be >= 1")
        if not (1 <= self.k <= self.grid_n * self.grid_n):
            raise ValueError(f"k={self.k} must be in [1, grid_n^2]")

    def to_dict(self) -> dict:
        doc = dataclasses.asdict(self)
        doc["strategy"] = strategy_descriptor(self.strategy)
        return doc


def strategy_descriptor(strategy: SelectionStrategy) -> dict:
    doc = {"name": strategy.name}
    k = getattr(strategy, "k", None)
    if k is not None:
        doc["k"] = k
    return doc


@dataclass
class Metrics:
    strategy: str
    accuracy: Optional[float]
    n_instances: int
    n_correct: int
    n_flagged: int
    mean_visual_tokens: Optional[float]
    total_queries: int
    wall_time_s: float
    note: Optional[str] = None
    config: Optional[dict] = None
    per_repeat_accuracies: Optional[list[float]] = None

    def to_json_dict(self) -> dict:
        return dataclasses.asdict(self)


# --- answerer / scorer wiring ----------------------------------------------------


def build_answerer(config: RunConfig) -> Answerer:
    spec = config.answerer
    if spec == "toy":
        scenes_path = config.scenes or default_scenes_path(config.dataset)
        if not os.path.exists(scenes_path):
            raise FileNotFoundError(
                f"toy answerer needs scene geometry; {scenes_path} not found (is this a synthbench dataset?)"
            )
        return ToyOracleAnswerer.from_scenes(load_scenes(scenes_path), grid_ns=(config.grid_n,))
    if spec.startswith("external:"):
        return ExternalAnswerer(spec[len("external:") :])
    raise ValueError(f"unknown answerer spec {spec!r}")


def build_scorer(config: RunConfig, instances: Sequence[ManifestInstance]):
    """Returns a CosineScorer, or the GT_SCORER sentinel for score injection."""
    spec = config.scorer
    if spec == GT_SCORER:
        return GT_SCORER
    if spec == "tiny":
        vocab = sorted({tok for inst in instances for tok in tokenize(inst.question)})
        return CosineScorer.for_tiny(TinyBiEncoder.init_random(vocab, config.embed_dim, config.seed))
    if spec.startswith("tiny:"):
        encoder, _ = load_encoder(spec[len("tiny:") :])
        return CosineScorer.for_tiny(encoder)
    if spec.startswith("external:"):
        provider = ExternalEncoderProvider(spec[len("external:") :])
        return CosineScorer(provider=provider, kind=ScorerKind.PRETRAINED_COSINE, input_size=(224, 224))
    raise ValueError(f"unknown scorer spec {spec!r}")


@dataclass
class _Prepared:
    """Per-instance payloads cached across repeats so PNG work happens once."""

    instance_id: str
    question: str
    answer: str
    gt_cell: Optional[int]
    options: Optional[tuple[str, ...]]
    overview_payload: str
    crop_payloads: list[str]


def _prepare(inst, grid: GridSpec, cache: dict[str, _Prepared]) -> _Prepared:
    prep = cache.get(inst.instance_id)
    if prep is None:
        image = inst.image
        subs = partition(image, grid)
        options = getattr(inst, "options", None)
        prep = _Prepared(
            instance_id=inst.instance_id,
            question=inst.question,
            answer=inst.answer,
            gt_cell=getattr(inst, "gt_cell", None),
            options=tuple(options) if options else None,
            overview_payload=b64_png(image),
            crop_payloads=[b64_png(s.image) for s in subs],
        )
        cache[inst.instance_id] = prep
    return prep


# --- core evaluation ----------------------------------------------------------------


def _evaluate_instance(
    inst: ManifestInstance,
    config: RunConfig,
    answerer: Answerer,
    scorer,
    random_seed: Optional[int],
    cache: dict[str, _Prepared],
) -> EvalRecord:
    t0 = time.perf_counter()
    grid = GridSpec(config.grid_n)
    strategy = config.strategy
    try:
        prep = _prepare(inst, grid, cache)
        options = list(prep.options) if prep.options else None
        n_cells = len(prep.crop_payloads)
        if isinstance(strategy, (Optimal, MajorityVote)):
            sel = select_optimal(
                prep,
                answerer,
                grid,
                include_overview=config.include_overview,
                payloads=(prep.overview_payload, prep.crop_payloads),
            )
            queries = n_cells
            images_sent = n_cells * (2 if config.include_overview else 1)
            if isinstance(strategy, Optimal):
                chosen = [sel.best_index] if sel.best_index is not None else []
                predicted = sel.responses[sel.best_index] if sel.answerable else sel.responses[0]
            else:
                chosen = []
                predicted = majority_vote(list(sel.responses))
            correct = answers_match(predicted, prep.answer, options)
            return EvalRecord(
                instance_id=prep.instance_id,
                strategy=strategy.name,
                chosen=chosen,
                predicted=predicted,
                correct=correct,
                visual_token_count=config.tokens_per_image * images_sent,
                wall_time=time.perf_counter() - t0,
                n_queries=queries,
            )

        scores: Optional[list[float]] = None
        if isinstance(strategy, TopK):
            if scorer == GT_SCORER:
                if prep.gt_cell is None:
                    raise ValueError(f"gt scorer needs gt_cell on instance {prep.instance_id}")
                scores = [1.0 if i == prep.gt_cell else 0.0 for i in range(n_cells)]
            else:
                subimages = partition(inst.image, grid)
                scores = score_subimages(prep.question, subimages, scorer)
            chosen = select_topk(scores, strategy.k)
        elif isinstance(strategy, RandomPick):
            chosen = select_random(n_cells, strategy.k, seed=random_seed)
        elif isinstance(strategy, NoSelection):
            chosen = []
        else:
            raise ValueError(f"unhandled strategy {strategy!r}")

        if not config.include_overview and not chosen:
            raise ValueError("empty composition: no overview and no selected sub-images")
        payloads = ([prep.overview_payload] if config.include_overview else []) + [
            prep.crop_payloads[i] for i in chosen
        ]
        request = AnswerRequest(
            request_id=f"{prep.instance_id}/{strategy.name}",
            question=prep.question,
            images=tuple(payloads),
            options=tuple(options) if options else None,
            temperature=config.temperature,
        )
        response = answerer.answer(request)
        if response.error is not None:
            raise RuntimeError(f"answerer error: {response.error}")
        predicted = response.answer
        correct = answers_match(predicted, prep.answer, options)
        return EvalRecord(
            instance_id=prep.instance_id,
            strategy=strategy.name,
            chosen=list(chosen),
            predicted=predicted,
            correct=correct,
            visual_token_count=config.tokens_per_image * len(payloads),
            wall_time=time.perf_counter() - t0,
            n_queries=1,
        )
    except Exception as exc:
        # flagged as incorrect rather than excluded; exclusion would silently
        # inflate accuracy
        return EvalRecord(
            instance_id=inst.instance_id,
            strategy=strategy.name,
            chosen=[],
            predicted="",
            correct=False,
            visual_token_count=0,
            wall_time=time.perf_counter() - t0,
            n_queries=0,
            error=str(exc),
        )


def evaluate(
    config: RunConfig,
    logger: Optional[JsonlLogger] = None,
    instances: Optional[Sequence[ManifestInstance]] = None,
    answerer: Optional[Answerer] = None,
    prep_cache: Optional[dict[str, _Prepared]] = None,
) -> tuple[Metrics, list[EvalRecord]]:
    """Run one strategy over the dataset; one EvalRecord per instance.

    Per-instance answerer errors are flagged and scored incorrect; the run
    never aborts on them. An unreadable manifest does abort.
    """
    log = logger or JsonlLogger()
    t0 = time.perf_counter()
    if instances is None:
        instances = load_manifest(config.dataset)
    instances = sorted(instances, key=lambda r: r.instance_id)
    if not instances:
        metrics = Metrics(
            strategy=config.strategy.name,
            accuracy=None,
            n_instances=0,
            n_correct=0,
            n_flagged=0,
            mean_visual_tokens=None,
            total_queries=0,
            wall_time_s=time.perf_counter() - t0,
            note="no instances",
            config=config.to_dict(),
        )
        return metrics, []

    if answerer is None:
        answerer = build_answerer(config)
    scorer = build_scorer(config, instances) if isinstance(config.strategy, TopK) else None
    cache = prep_cache if prep_cache is not None else {}

    # random selection seeds are drawn up front in instance order, so the
    # parallel path sees exactly the same draws as the serial one
    random_seeds: list[Optional[int]] = [None] * len(instances)
    if isinstance(config.strategy, RandomPick):
        seed_rng = np.random.default_rng(config.seed)
        random_seeds = [int(s) for s in seed_rng.integers(0, 2**62, size=len(instances))]

    def work(args) -> EvalRecord:
        inst, rseed = args
        return _evaluate_instance(inst, config, answerer, scorer, rseed, cache)

    jobs = list(zip(instances, random_seeds))
    if config.parallelism > 1:
        with ThreadPoolExecutor(max_workers=config.parallelism) as pool:
            records = list(pool.map(work, jobs))
    else:
        records = [work(j) for j in jobs]

    records.sort(key=lambda r: r.instance_id)
    for rec in records:
        if rec.error:
            log.log("instance_error", instance_id=rec.instance_id, error=rec.error)
    n_correct = sum(r.correct for r in records)
    n_flagged = sum(1 for r in records if r.error)
    counted = [r.visual_token_count for r in records if r.n_queries > 0]
    metrics = Metrics(
        strategy=config.strategy.name,
        accuracy=n_correct / len(records),
        n_instances=len(records),
        n_correct=n_correct,
        n_flagged=n_flagged,
        mean_visual_tokens=float(np.mean(counted)) if counted else None,
        total_queries=sum(r.n_queries for r in records),
        wall_time_s=time.perf_counter() - t0,
        config=config.to_dict(),
    )
    return metrics, records


def run_random_repeats(
    config: RunConfig,
    logger: Optional[JsonlLogger] = None,
    instances: Optional[Sequence[ManifestInstance]] = None,
    answerer: Optional[Answerer] = None,
    prep_cache: Optional[dict[str, _Prepared]] = None,
) -> tuple[Metrics, list[list[EvalRecord]]]:
    """Random-selection protocol: repeat r runs with seed base_seed + r; reports
    the per-repeat accuracies and their mean."""
    if not isinstance(config.strategy, RandomPick):
        raise ValueError("run_random_repeats requires the random strategy")
    t0 = time.perf_counter()
    if instances is None:
        instances = load_manifest(config.dataset)
    if answerer is None and instances:
        answerer = build_answerer(config)
    if prep_cache is None:
        prep_cache = {}
    per_repeat: list[float] = []
    all_records: list[list[EvalRecord]] = []
    totals = {"correct": 0, "flagged": 0, "queries": 0}
    token_counts: list[int] = []
    for r in range(config.repeats):
        rep_config = replace(config, seed=config.seed + r, repeats=1)
        metrics, records = evaluate(
            rep_config, logger=logger, instances=instances, answerer=answerer, prep_cache=prep_cache
        )
        if metrics.accuracy is None:
            return (
                Metrics(
                    strategy=config.strategy.name,
                    accuracy=None,
                    n_instances=0,
                    n_correct=0,
                    n_flagged=0,
                    mean_visual_tokens=None,
                    total_queries=0,
                    wall_time_s=time.perf_counter() - t0,
                    note="no instances",
                    config=config.to_dict(),
                ),
                [],
            )
        per_repeat.append(metrics.accuracy)
        all_records.append(records)
        totals["correct"] += metrics.n_correct
        totals["flagged"] += metrics.n_flagged
        totals["queries"] += metrics.total_queries
        token_counts.extend(rec.visual_token_count for rec in records if rec.n_queries > 0)
    metrics = Metrics(
        strategy=config.strategy.name,
        accuracy=float(np.mean(per_repeat)),
        n_instances=len(instances),
        n_correct=totals["correct"],
        n_flagged=totals["flagged"],
        mean_visual_tokens=float(np.mean(token_counts)) if token_counts else None,
        total_queries=totals["queries"],
        wall_time_s=time.perf_counter() - t0,
        config=config.to_dict(),
        per_repeat_accuracies=per_repeat,
    )
    return metrics, all_records


def run_majority(
    config: RunConfig,
    logger: Optional[JsonlLogger] = None,
    instances: Optional[Sequence[ManifestInstance]] = None,
    answerer: Optional[Answerer] = None,
    prep_cache: Optional[dict[str, _Prepared]] = None,
) -> tuple[Metrics, list[EvalRecord]]:
    cfg = replace(config, strategy=MajorityVote())
    return evaluate(cfg, logger=logger, instances=instances, answerer=answerer, prep_cache=prep_cache)


# --- persistence and reporting ----------------------------------------------------------


def write_records(path: str, records: Sequence[EvalRecord]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for rec in sorted(records, key=lambda r: r.instance_id):
            fh.write(json.dumps(rec.to_json_dict(), ensure_ascii=False) + "\n")


def write_metrics(path: str, metrics: Metrics) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(metrics.to_json_dict(), fh, indent=2)
        fh.write("\n")


_REPORT_COLUMNS = ("strategy", "accuracy", "img_tokens", "answerer_queries", "wall_time_s")


def _report_rows(metrics_sets: Sequence[Metrics]) -> list[dict[str, str]]:
    rows = []
    for m in sorted(metrics_sets, key=lambda m: m.strategy):
        rows.append(
            {
                "strategy": m.strategy,
                "accuracy": "" if m.accuracy is None else f"{m.accuracy:.4f}",
                "img_tokens": "" if m.mean_visual_tokens is None else f"{m.mean_visual_tokens:.1f}",
                "answerer_queries": str(m.total_queries),
                "wall_time_s": f"{m.wall_time_s:.2f}",
            }
        )
    return rows


def report(metrics_sets: Sequence[Metrics], out_dir: str, plot: bool = False) -> dict[str, str]:
    """Comparison table as CSV and Markdown (identical values), plus an optional
    accuracy-vs-token scatter plot."""
    if not metrics_sets:
        raise ValueError("report needs at least one metrics set")
    os.makedirs(out_dir, exist_ok=True)
    rows = _report_rows(metrics_sets)
    csv_path = os.path.join(out_dir, "report.csv")
    with open(csv_path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=_REPORT_COLUMNS)
        writer.writeheader()
        writer.writerows(rows)

    md_path = os.path.join(out_dir, "report.md")
    with open(md_path, "w", encoding="utf-8") as fh:
        fh.write("| " + " | ".join(_REPORT_COLUMNS) + " |\n")
        fh.write("|" + "|".join(["---"] * len(_REPORT_COLUMNS)) + "|\n")
        for row in rows:
            fh.write("| " + " | ".join(row[c] for c in _REPORT_COLUMNS) + " |\n")

    paths = {"csv": csv_path, "md": md_path}
    if plot:
        import matplotlib

        matplotlib.use("Agg")
        import matplotlib.pyplot as plt

        fig, ax = plt.subplots(figsize=(5, 4))
        for m in metrics_sets:
            if m.accuracy is None or m.mean_visual_tokens is None:
                continue
            ax.scatter(m.mean_visual_tokens, m.accuracy, label=m.strategy)
        ax.set_xlabel("mean visual tokens per instance")
        ax.set_ylabel("accuracy")
        ax.legend()
        fig.tight_layout()
        plot_path = os.path.join(out_dir, "accuracy_vs_tokens.png")
        fig.savefig(plot_path)
        plt.close(fig)
        paths["plot"] = plot_path
    return paths
