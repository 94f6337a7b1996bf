"""Distant-supervision labeling and margin-ranking training of the tiny bi-encoder.

Sub-images are labeled positive when pairing them with the overview makes the
answerer produce the gold answer. Training then pushes the relevance score of
positive crops above negative crops by a margin, with plain gradient descent on
the two parameter matrices, and a finite-difference check guards the gradient.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from typing import Iterable, Optional, Sequence

import numpy as np

from .backends import Answerer, AnswerRequest, b64_png
from .config import JsonlLogger, answers_match, derive_rng, PURPOSE_PAIRS, PURPOSE_TRAIN
from .imaging import GridSpec, SubImage, partition
from .scoring import CosineScorer, TinyBiEncoder, tokenize


class TrainingError(RuntimeError):
    pass


@dataclass(frozen=True)
class SupervisionExample:
    instance_id: str
    question: str
    positives: tuple[int, ...]
    negatives: tuple[int, ...]
    grid: GridSpec

    def __post_init__(self):
        n_cells = self.grid.n * self.grid.n
        if set(self.positives) & set(self.negatives):
            raise ValueError("positives and negatives overlap")
        if set(self.positives) | set(self.negatives) != set(range(n_cells)):
            raise ValueError("positives and negatives must partition all grid cells")

    @property
    def usable(self) -> bool:
        return bool(self.positives) and bool(self.negatives)


@dataclass(frozen=True)
class ContrastivePair:
    instance_id: str
    question: str
    positive: SubImage
    negative: SubImage

    def __post_init__(self):
        if self.positive.region.linear_index == self.negative.region.linear_index:
            raise ValueError("positive and negative must be different crops")


@dataclass(frozen=True)
class TrainConfig:
    margin: float = 0.2
    learning_rate: float = 5e-6
    batch_size: int = 64
    epochs: int = 32
    seed: int = 0
    pair_cap_per_instance: int = 16

    def __post_init__(self):
        if self.margin <= 0:
            raise ValueError("margin must be > 0")
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be >= 1")


@dataclass
class TrainingLog:
    initial_loss: float
    epoch_losses: list[float]
    selected_epoch: int
    selected_loss: float
    n_pairs: int
    vocab_size: int
    dim: int
    config: dict

    def to_json_dict(self) -> dict:
        return asdict(self)


# --- supervision construction -----------------------------------------------------


def build_supervision(
    instances: Sequence,
    answerer: Answerer,
    grid: GridSpec,
    logger: Optional[JsonlLogger] = None,
) -> list[SupervisionExample]:
    """Label every grid cell of every instance by answer correctness.

    Each cell is probed as (overview, crop) against the answerer; cells whose
    probe matches the gold answer become positives. Instances with an empty
    side are still emitted (unusable for pairing); instances where the
    answerer fails are skipped with a logged reason.
    """
    log = logger or JsonlLogger()
    examples = []
    n_positive_total = 0
    for inst in instances:
        options = tuple(inst.options) if getattr(inst, "options", None) else None
        try:
            image = inst.image
            subs = partition(image, grid)
            overview_payload = b64_png(image)
            positives, negatives = [], []
            for sub in subs:
                request = AnswerRequest(
                    request_id=f"{inst.instance_id}/sup{sub.region.linear_index}",
                    question=inst.question,
                    images=(overview_payload, b64_png(sub.image)),
                    options=options,
                )
                response = answerer.answer(request)
                if response.error is not None:
                    raise TrainingError(f"answerer error: {response.error}")
                if answers_match(response.answer, inst.answer, options):
                    positives.append(sub.region.linear_index)
                else:
                    negatives.append(sub.region.linear_index)
        except Exception as exc:
            log.log("supervision_skip", instance_id=inst.instance_id, reason=str(exc))
            continue
        example = SupervisionExample(
            instance_id=inst.instance_id,
            question=inst.question,
            positives=tuple(positives),
            negatives=tuple(negatives),
            grid=grid,
        )
        n_positive_total += len(positives)
        examples.append(example)
    log.log(
        "supervision_built",
        instances=len(examples),
        usable=sum(1 for e in examples if e.usable),
        total_positives=n_positive_total,
    )
    return examples


def write_supervision(examples: Iterable[SupervisionExample], path: str) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for ex in examples:
            row = {
                "instance_id": ex.instance_id,
                "question": ex.question,
                "grid_n": ex.grid.n,
                "positives": list(ex.positives),
                "negatives": list(ex.negatives),
                "usable": ex.usable,
            }
            fh.write(json.dumps(row, ensure_ascii=False) + "\n")


def load_supervision(path: str) -> list[SupervisionExample]:
    out = []
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            row = json.loads(line)
            out.append(
                SupervisionExample(
                    instance_id=row["instance_id"],
                    question=row["question"],
                    positives=tuple(row["positives"]),
                    negatives=tuple(row["negatives"]),
                    grid=GridSpec(row["grid_n"]),
                )
            )
    return out


def make_pairs(example: SupervisionExample, crops: Sequence[SubImage], cap: int, seed: int) -> list[ContrastivePair]:
    """Positive x negative cross product, truncated to `cap` by seeded sampling.

    Unusable examples yield an empty list.
    """
    if not example.usable:
        return []
    combos = [(p, n) for p in example.positives for n in example.negatives]
    if len(combos) > cap:
        rng = derive_rng(seed, PURPOSE_PAIRS)
        picked = rng.choice(len(combos), size=cap, replace=False)
        combos = [combos[i] for i in sorted(int(j) for j in picked)]
    return [
        ContrastivePair(
            instance_id=example.instance_id,
            question=example.question,
            positive=crops[p],
            negative=crops[n],
        )
        for p, n in combos
    ]


# --- loss -----------------------------------------------------------------------


def hinge(margin: float, score_pos: float, score_neg: float) -> float:
    return max(0.0, margin + score_neg - score_pos)


def margin_loss(pairs: Sequence[ContrastivePair], scorer: CosineScorer, margin: float) -> float:
    """Sum over pairs of max(0, margin + score(q, neg) - score(q, pos))."""
    if margin <= 0:
        raise ValueError("margin must be > 0")
    total = 0.0
    for i, pair in enumerate(pairs):
        try:
            pos = scorer.score(pair.question, pair.positive.image)
            neg = scorer.score(pair.question, pair.negative.image)
        except Exception as exc:
            raise TrainingError(f"scoring failed on pair {i} ({pair.instance_id}): {exc}") from exc
        total += hinge(margin, pos, neg)
    return total


# --- vectorized trainer ------------------------------------------------------------


@dataclass
class _CompiledPairs:
    text_weights: np.ndarray  # (n_pairs, vocab+1), rows sum to 1
    pos_feats: np.ndarray  # (n_pairs, FEATURE_DIM)
    neg_feats: np.ndarray


def _compile_pairs(encoder: TinyBiEncoder, pairs: Sequence[ContrastivePair]) -> _CompiledPairs:
    n_rows = encoder.text_embed.shape[0]
    weights = np.zeros((len(pairs), n_rows))
    feature_cache: dict[int, np.ndarray] = {}

    def feats(sub: SubImage) -> np.ndarray:
        key = id(sub.image)
        if key not in feature_cache:
            feature_cache[key] = encoder.image_features(sub.image)
        return feature_cache[key]

    pos = np.empty((len(pairs), encoder.image_proj.shape[0]))
    neg = np.empty_like(pos)
    for i, pair in enumerate(pairs):
        rows = encoder.token_rows(pair.question)
        for r in rows:
            weights[i, r] += 1.0 / len(rows)
        pos[i] = feats(pair.positive)
        neg[i] = feats(pair.negative)
    return _CompiledPairs(text_weights=weights, pos_feats=pos, neg_feats=neg)


def _forward(E: np.ndarray, P: np.ndarray, batch: _CompiledPairs, margin: float, idx=None):
    W = batch.text_weights if idx is None else batch.text_weights[idx]
    Fp = batch.pos_feats if idx is None else batch.pos_feats[idx]
    Fn = batch.neg_feats if idx is None else batch.neg_feats[idx]
    T = W @ E
    Up = Fp @ P
    Un = Fn @ P
    nt = np.linalg.norm(T, axis=1)
    np_ = np.linalg.norm(Up, axis=1)
    nn = np.linalg.norm(Un, axis=1)
    if np.any(nt == 0) or np.any(np_ == 0) or np.any(nn == 0):
        raise TrainingError("zero-norm embedding encountered during training")
    cos_p = np.einsum("ij,ij->i", T, Up) / (nt * np_)
    cos_n = np.einsum("ij,ij->i", T, Un) / (nt * nn)
    g = margin + cos_n - cos_p
    terms = np.maximum(g, 0.0)
    return {"W": W, "Fp": Fp, "Fn": Fn, "T": T, "Up": Up, "Un": Un, "nt": nt, "np": np_, "nn": nn, "cos_p": cos_p, "cos_n": cos_n, "g": g, "terms": terms}


def _backward(state: dict, reduce_mean: bool) -> tuple[np.ndarray, np.ndarray]:
    active = state["g"] > 0
    scale = (1.0 / len(state["g"])) if reduce_mean else 1.0
    w = np.where(active, scale, 0.0)[:, None]

    T, Up, Un = state["T"], state["Up"], state["Un"]
    nt = state["nt"][:, None]
    np_ = state["np"][:, None]
    nn = state["nn"][:, None]
    cos_p = state["cos_p"][:, None]
    cos_n = state["cos_n"][:, None]

    that = T / nt
    dT = w * ((Un / nn - cos_n * that) - (Up / np_ - cos_p * that)) / nt
    dUp = -w * (that - cos_p * Up / np_) / np_
    dUn = w * (that - cos_n * Un / nn) / nn

    grad_E = state["W"].T @ dT
    grad_P = state["Fp"].T @ dUp + state["Fn"].T @ dUn
    return grad_E, grad_P


def train_scorer(
    pairs: Sequence[ContrastivePair],
    config: TrainConfig,
    vocab: Optional[Iterable[str]] = None,
    embed_dim: int = 32,
    logger: Optional[JsonlLogger] = None,
) -> tuple[TinyBiEncoder, TrainingLog]:
    """Seeded gradient descent on the batch-mean margin loss.

    The returned encoder carries the parameter snapshot of the epoch with the
    lowest full-dataset loss; the log records every epoch's loss.
    """
    if not pairs:
        raise TrainingError("no training pairs")
    log = logger or JsonlLogger()
    if vocab is None:
        vocab = sorted({tok for pair in pairs for tok in tokenize(pair.question)})
    encoder = TinyBiEncoder.init_random(vocab, embed_dim, config.seed)
    batch_data = _compile_pairs(encoder, pairs)
    E = encoder.text_embed.copy()
    P = encoder.image_proj.copy()
    rng = derive_rng(config.seed, PURPOSE_TRAIN)
    n = len(pairs)

    def full_loss(E_, P_) -> float:
        return float(_forward(E_, P_, batch_data, config.margin)["terms"].mean())

    initial_loss = full_loss(E, P)
    epoch_losses: list[float] = []
    best_loss, best_epoch, best_params = np.inf, -1, (E.copy(), P.copy())
    for epoch in range(config.epochs):
        order = rng.permutation(n)
        for start in range(0, n, config.batch_size):
            idx = order[start : start + config.batch_size]
            state = _forward(E, P, batch_data, config.margin, idx=idx)
            grad_E, grad_P = _backward(state, reduce_mean=True)
            if not (np.all(np.isfinite(grad_E)) and np.all(np.isfinite(grad_P))):
                raise TrainingError(f"non-finite gradient at epoch {epoch}")
            E -= config.learning_rate * grad_E
            P -= config.learning_rate * grad_P
        loss = full_loss(E, P)
        if not np.isfinite(loss):
            raise TrainingError(f"non-finite loss {loss} at epoch {epoch}")
        epoch_losses.append(loss)
        log.log("train_epoch", epoch=epoch, loss=loss)
        if loss < best_loss:
            best_loss, best_epoch, best_params = loss, epoch, (E.copy(), P.copy())

    trained = TinyBiEncoder(vocab=dict(encoder.vocab), text_embed=best_params[0], image_proj=best_params[1])
    train_log = TrainingLog(
        initial_loss=initial_loss,
        epoch_losses=epoch_losses,
        selected_epoch=best_epoch,
        selected_loss=best_loss,
        n_pairs=n,
        vocab_size=len(encoder.vocab),
        dim=embed_dim,
        config=asdict(config),
    )
    return trained, train_log


# --- gradient verification -----------------------------------------------------------


def grad_check(encoder: TinyBiEncoder, pairs: Sequence[ContrastivePair], epsilon: float) -> float:
    """Max relative disagreement between the analytic margin-loss gradient and
    central finite differences, over every parameter.

    Pairs whose margin term sits within 10*epsilon of the hinge kink are
    excluded; the derivative is not defined there and callers re-sample such
    pairs (see sample_kink_free_pairs).
    """
    if not pairs:
        raise ValueError("grad_check needs at least one pair")
    if not (0 < epsilon <= 1e-2):
        raise ValueError(f"epsilon must be in (0, 1e-2], got {epsilon}")
    compiled = _compile_pairs(encoder, pairs)
    margin = 0.2
    state = _forward(encoder.text_embed, encoder.image_proj, compiled, margin)
    keep = np.abs(state["g"]) > 10 * epsilon
    if not np.any(keep):
        return 0.0
    compiled = _CompiledPairs(
        text_weights=compiled.text_weights[keep],
        pos_feats=compiled.pos_feats[keep],
        neg_feats=compiled.neg_feats[keep],
    )

    # extended precision keeps finite-difference roundoff below the tolerance
    dtype = np.longdouble
    E0 = encoder.text_embed.astype(dtype)
    P0 = encoder.image_proj.astype(dtype)
    W = compiled.text_weights.astype(dtype)
    Fp = compiled.pos_feats.astype(dtype)
    Fn = compiled.neg_feats.astype(dtype)
    m = dtype(margin)

    state = _forward(E0, P0, _CompiledPairs(W, Fp, Fn), m)
    grad_E, grad_P = _backward(state, reduce_mean=False)

    # the loss sees parameters only through these three small matrices, and a
    # single-entry perturbation shifts exactly one of their columns by a known
    # vector, so the 768-feature products are computed once
    T0, Up0, Un0 = W @ E0, Fp @ P0, Fn @ P0

    def loss_of(T, Up, Un) -> float:
        nt = np.sqrt((T * T).sum(axis=1))
        npos = np.sqrt((Up * Up).sum(axis=1))
        nneg = np.sqrt((Un * Un).sum(axis=1))
        cos_p = (T * Up).sum(axis=1) / (nt * npos)
        cos_n = (T * Un).sum(axis=1) / (nt * nneg)
        return float(np.maximum(m + cos_n - cos_p, 0).sum())

    eps = dtype(epsilon)
    worst = 0.0

    def compare(analytic: float, column_shift, col: int, target: str) -> float:
        deltas = []
        for sign in (eps, -eps):
            T, Up, Un = T0, Up0, Un0
            if target == "T":
                T = T0.copy()
                T[:, col] += sign * column_shift
            elif target == "Up":
                Up = Up0.copy()
                Up[:, col] += sign * column_shift
            else:
                Un = Un0.copy()
                Un[:, col] += sign * column_shift
            deltas.append(loss_of(T, Up, Un))
        numeric = (deltas[0] - deltas[1]) / float(2 * eps)
        return abs(analytic - numeric) / max(1e-8, abs(analytic) + abs(numeric))

    n_rows, dim = E0.shape
    for r in range(n_rows):
        for d in range(dim):
            worst = max(worst, compare(float(grad_E[r, d]), W[:, r], d, "T"))
    for f in range(P0.shape[0]):
        for d in range(dim):
            # one image_proj entry feeds both the positive and negative towers;
            # their shifts share the feature column, so apply both at once
            analytic = float(grad_P[f, d])
            deltas = []
            for sign in (eps, -eps):
                Up = Up0.copy()
                Un = Un0.copy()
                Up[:, d] += sign * Fp[:, f]
                Un[:, d] += sign * Fn[:, f]
                deltas.append(loss_of(T0, Up, Un))
            numeric = (deltas[0] - deltas[1]) / float(2 * eps)
            worst = max(worst, abs(analytic - numeric) / max(1e-8, abs(analytic) + abs(numeric)))
    return worst


def sample_kink_free_pairs(
    encoder: TinyBiEncoder,
    make_pair,
    count: int,
    epsilon: float,
    margin: float = 0.2,
    max_draws: int = 10000,
) -> list[ContrastivePair]:
    """Draw pairs via make_pair(draw_index), re-sampling any whose margin term
    lands within 10*epsilon of the hinge kink."""
    scorer = CosineScorer.for_tiny(encoder)
    out: list[ContrastivePair] = []
    draw = 0
    while len(out) < count and draw < max_draws:
        pair = make_pair(draw)
        draw += 1
        pos = scorer.score(pair.question, pair.positive.image)
        neg = scorer.score(pair.question, pair.negative.image)
        if abs(margin + neg - pos) > 10 * epsilon:
            out.append(pair)
    if len(out) < count:
        raise TrainingError(f"could not sample {count} kink-free pairs in {max_draws} draws")
    return out


# --- encoder persistence ---------------------------------------------------------------


def save_encoder(path: str, encoder: TinyBiEncoder, train_log: Optional[TrainingLog] = None) -> None:
    doc = encoder.to_json_dict()
    if train_log is not None:
        doc["training_log"] = train_log.to_json_dict()
        doc["config"] = train_log.config
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh)


def load_encoder(path: str) -> tuple[TinyBiEncoder, dict]:
    with open(path, "r", encoding="utf-8") as fh:
        doc = json.load(fh)
    return TinyBiEncoder.from_json_dict(doc), doc
