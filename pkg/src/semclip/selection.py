"""Sub-image selection strategies: top-k by relevance, random, oracle-optimal, majority vote."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence, Union

import numpy as np

from .backends import Answerer, AnswerRequest, b64_png
from .config import answers_match, normalize_answer
from .imaging import GridSpec, RasterImage, SubImage, partition


@dataclass(frozen=True)
class TopK:
    k: int = 1
    scorer_kind: str = "trained_biencoder"
    name: str = field(default="topk", init=False)

    def __post_init__(self):
        if self.k < 1:
            raise ValueError(f"k must be >= 1, got {self.k}")


@dataclass(frozen=True)
class RandomPick:
    k: int = 1
    name: str = field(default="random", init=False)

    def __post_init__(self):
        if self.k < 1:
            raise ValueError(f"k must be >= 1, got {self.k}")


@dataclass(frozen=True)
class Optimal:
    name: str = field(default="optimal", init=False)


@dataclass(frozen=True)
class MajorityVote:
    name: str = field(default="majority", init=False)


@dataclass(frozen=True)
class NoSelection:
    name: str = field(default="none", init=False)


SelectionStrategy = Union[TopK, RandomPick, Optimal, MajorityVote, NoSelection]


def parse_strategy(name: str, k: int = 1) -> SelectionStrategy:
    table = {
        "topk": lambda: TopK(k=k),
        "random": lambda: RandomPick(k=k),
        "optimal": Optimal,
        "majority": MajorityVote,
        "none": NoSelection,
    }
    if name not in table:
        raise ValueError(f"unknown strategy {name!r}; expected one of {sorted(table)}")
    return table[name]()


@dataclass(frozen=True)
class SelectionResult:
    chosen: tuple[int, ...]
    strategy: SelectionStrategy
    scores: Optional[tuple[float, ...]] = None

    def to_json_dict(self) -> dict:
        doc: dict = {"strategy": self.strategy.name, "chosen": list(self.chosen)}
        k = getattr(self.strategy, "k", None)
        if k is not None:
            doc["k"] = k
        if self.scores is not None:
            doc["scores"] = list(self.scores)
        return doc


def select_topk(scores: Sequence[float], k: int) -> list[int]:
    """Indices of the k largest scores, descending; ties go to the lower index."""
    if not (1 <= k <= len(scores)):
        raise ValueError(f"k={k} out of range for {len(scores)} scores")
    if not all(np.isfinite(s) for s in scores):
        raise ValueError("scores must all be finite")
    order = sorted(range(len(scores)), key=lambda i: (-scores[i], i))
    return order[:k]


def select_random(count_sub: int, k: int, seed: int) -> list[int]:
    """k distinct indices drawn uniformly without replacement from a seeded generator."""
    if k > count_sub:
        raise ValueError(f"cannot draw {k} from {count_sub} sub-images")
    rng = np.random.default_rng(seed)
    return [int(i) for i in rng.choice(count_sub, size=k, replace=False)]


@dataclass(frozen=True)
class OptimalSelection:
    best_index: Optional[int]
    answerable: bool
    per_index_correct: tuple[bool, ...]
    responses: tuple[str, ...]  # raw answer text per sub-image index


class OptimalSelectionError(RuntimeError):
    def __init__(self, message: str, partial: list[bool]):
        super().__init__(message)
        self.partial = partial


def select_optimal(
    instance,
    answerer: Answerer,
    grid: GridSpec,
    include_overview: bool = True,
    payloads: Optional[tuple[str, Sequence[str]]] = None,
) -> OptimalSelection:
    """Probe every sub-image paired with the overview; an instance is answerable
    when any of the n^2 probes matches the gold answer.

    best_index is the lowest correct linear index, or None when unanswerable.
    Pre-encoded (overview, crops) payloads may be passed to skip image work.
    """
    if payloads is None:
        image: RasterImage = instance.image
        subimages = partition(image, grid)
        overview_payload = b64_png(image)
        crop_payloads = [b64_png(sub.image) for sub in subimages]
    else:
        overview_payload, crop_payloads = payloads[0], list(payloads[1])
    options = tuple(instance.options) if getattr(instance, "options", None) else None
    per_correct: list[bool] = []
    responses: list[str] = []
    for index, crop_payload in enumerate(crop_payloads):
        images = (overview_payload, crop_payload) if include_overview else (crop_payload,)
        request = AnswerRequest(
            request_id=f"{instance.instance_id}/opt{index}",
            question=instance.question,
            images=images,
            options=options,
        )
        try:
            response = answerer.answer(request)
        except Exception as exc:
            raise OptimalSelectionError(
                f"answerer failed on sub-image {index} of {instance.instance_id}: {exc}",
                partial=per_correct,
            ) from exc
        if response.error is not None:
            per_correct.append(False)
            responses.append("")
            continue
        responses.append(response.answer)
        per_correct.append(answers_match(response.answer, instance.answer, options))
    best = next((i for i, ok in enumerate(per_correct) if ok), None)
    return OptimalSelection(
        best_index=best,
        answerable=best is not None,
        per_index_correct=tuple(per_correct),
        responses=tuple(responses),
    )


def majority_vote(responses: Sequence[str]) -> str:
    """Modal response after normalization; ties break to the earliest first
    occurrence, whose original text is returned."""
    if not responses:
        raise ValueError("majority vote over an empty response list")
    counts: dict[str, int] = {}
    first_seen: dict[str, int] = {}
    for i, resp in enumerate(responses):
        key = normalize_answer(resp).text
        counts[key] = counts.get(key, 0) + 1
        first_seen.setdefault(key, i)
    winner = min(counts, key=lambda key: (-counts[key], first_seen[key]))
    return responses[first_seen[winner]]


@dataclass(frozen=True)
class PromptComposition:
    include_overview: bool
    selected: tuple[SubImage, ...]
    overview: Optional[RasterImage] = None

    def __post_init__(self):
        if self.include_overview and self.overview is None:
            raise ValueError("include_overview=True requires an overview image")
        if not self.include_overview and not self.selected:
            raise ValueError("composition without the overview needs at least one sub-image")

    def image_list(self) -> list[RasterImage]:
        images = [self.overview] if self.include_overview else []
        images.extend(sub.image for sub in self.selected)
        return images

    def __len__(self) -> int:
        return int(self.include_overview) + len(self.selected)


def compose_prompt(
    overview: RasterImage,
    selection: SelectionResult,
    subimages: Sequence[SubImage],
    include_overview: bool = True,
) -> PromptComposition:
    """Overview first (when included), then the chosen sub-images in selection order."""
    for idx in selection.chosen:
        if not (0 <= idx < len(subimages)):
            raise ValueError(f"chosen index {idx} out of range for {len(subimages)} sub-images")
    selected = tuple(subimages[i] for i in selection.chosen)
    if not include_overview and not selected:
        raise ValueError("empty composition: no overview and no selected sub-images")
    return PromptComposition(include_overview=include_overview, selected=selected, overview=overview if include_overview else None)
