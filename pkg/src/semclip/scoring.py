"""Question/sub-image relevance scoring: cosine over embeddings from pluggable encoders.

Three scorer flavors share one cosine core: cosine over features handed out by a
vision-language model, cosine over a pretrained text-image encoder, and a small
trainable bi-encoder that runs entirely in-process.
"""
from __future__ import annotations

import base64
import enum
import itertools
import re
from dataclasses import dataclass
from typing import Iterable, Optional, Protocol, Sequence

import numpy as np

from . import wire
from .config import derive_rng, PURPOSE_INIT
from .imaging import RasterImage, SubImage, encode_png, resize

THUMB_SIZE = 16
FEATURE_DIM = THUMB_SIZE * THUMB_SIZE * 3

_TOKEN_RE = re.compile(r"[a-z0-9]+")


class ScoringError(RuntimeError):
    def __init__(self, message: str, index: Optional[int] = None):
        super().__init__(message)
        self.index = index


class ScorerKind(enum.Enum):
    FEATURE_COSINE = "feature_cosine"
    PRETRAINED_COSINE = "pretrained_cosine"
    TRAINED_BIENCODER = "trained_biencoder"


@dataclass
class Embedding:
    values: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 1 or self.values.size < 1:
            raise ValueError(f"embedding must be a non-empty vector, got shape {self.values.shape}")
        if not np.all(np.isfinite(self.values)):
            raise ValueError("embedding contains non-finite values")

    @property
    def dim(self) -> int:
        return int(self.values.size)


def cosine(a: Embedding, b: Embedding) -> float:
    """dot(a,b) / (|a||b|); errors on dimension mismatch or a zero vector."""
    if a.dim != b.dim:
        raise ValueError(f"dimension mismatch: {a.dim} vs {b.dim}")
    na = float(np.linalg.norm(a.values))
    nb = float(np.linalg.norm(b.values))
    if na == 0.0 or nb == 0.0:
        raise ValueError("cosine undefined for a zero vector (degenerate encoder output)")
    return float(np.dot(a.values, b.values) / (na * nb))


def tokenize(text: str) -> list[str]:
    return _TOKEN_RE.findall(text.lower())


class EncoderProvider(Protocol):
    """Deterministic text/image embedder pair mapping into one shared space."""

    def embed_text(self, text: str) -> Embedding: ...

    def embed_image(self, image: RasterImage) -> Embedding: ...


UNK_INDEX = 0  # row 0 of text_embed is reserved for out-of-vocabulary tokens


@dataclass
class TinyBiEncoder:
    """Bag-of-tokens text tower + linear projection of a 16x16 thumbnail.

    text_embed has len(vocab)+1 rows: row 0 is the unknown-token row, row i+1
    belongs to vocab token i. image_proj maps the flattened thumbnail (768
    features in [0,1]) to the shared embedding space.
    """

    vocab: dict[str, int]
    text_embed: np.ndarray  # (len(vocab)+1, dim)
    image_proj: np.ndarray  # (FEATURE_DIM, dim)

    def __post_init__(self):
        self.text_embed = np.asarray(self.text_embed, dtype=np.float64)
        self.image_proj = np.asarray(self.image_proj, dtype=np.float64)
        if self.text_embed.ndim != 2 or self.text_embed.shape[0] != len(self.vocab) + 1:
            raise ValueError("text_embed must have len(vocab)+1 rows")
        if self.image_proj.shape != (FEATURE_DIM, self.dim):
            raise ValueError(f"image_proj must be ({FEATURE_DIM}, {self.dim})")
        if self.dim < 2:
            raise ValueError("embedding dim must be >= 2")
        if not (np.all(np.isfinite(self.text_embed)) and np.all(np.isfinite(self.image_proj))):
            raise ValueError("encoder parameters contain non-finite values")

    @property
    def dim(self) -> int:
        return int(self.text_embed.shape[1])

    @classmethod
    def init_random(cls, tokens: Iterable[str], dim: int, seed: int) -> "TinyBiEncoder":
        """Fresh encoder with Gaussian(0, 0.02) parameters and a fixed vocabulary."""
        vocab = {tok: i + 1 for i, tok in enumerate(sorted(set(tokens)))}
        rng = derive_rng(seed, PURPOSE_INIT)
        text_embed = rng.normal(0.0, 0.02, size=(len(vocab) + 1, dim))
        image_proj = rng.normal(0.0, 0.02, size=(FEATURE_DIM, dim))
        return cls(vocab=vocab, text_embed=text_embed, image_proj=image_proj)

    def token_rows(self, question: str) -> list[int]:
        tokens = tokenize(question)
        if not tokens:
            raise ScoringError(f"question has no tokens after normalization: {question!r}")
        return [self.vocab.get(tok, UNK_INDEX) for tok in tokens]

    def text_vector(self, question: str) -> np.ndarray:
        rows = self.token_rows(question)
        return self.text_embed[rows].mean(axis=0)

    def image_features(self, image: RasterImage) -> np.ndarray:
        thumb = resize(image, THUMB_SIZE, THUMB_SIZE)
        return thumb.to_array().reshape(-1).astype(np.float64) / 255.0

    def image_vector(self, image: RasterImage) -> np.ndarray:
        return self.image_features(image) @ self.image_proj

    # EncoderProvider surface
    def embed_text(self, text: str) -> Embedding:
        return Embedding(self.text_vector(text))

    def embed_image(self, image: RasterImage) -> Embedding:
        return Embedding(self.image_vector(image))

    def copy(self) -> "TinyBiEncoder":
        return TinyBiEncoder(dict(self.vocab), self.text_embed.copy(), self.image_proj.copy())

    def to_json_dict(self) -> dict:
        vocab_list = [tok for tok, _ in sorted(self.vocab.items(), key=lambda kv: kv[1])]
        return {
            "dim": self.dim,
            "feature_dim": FEATURE_DIM,
            "thumb_size": THUMB_SIZE,
            "vocab": vocab_list,
            "text_embed": self.text_embed.reshape(-1).tolist(),
            "image_proj": self.image_proj.reshape(-1).tolist(),
        }

    @classmethod
    def from_json_dict(cls, doc: dict) -> "TinyBiEncoder":
        dim = doc["dim"]
        vocab = {tok: i + 1 for i, tok in enumerate(doc["vocab"])}
        text_embed = np.asarray(doc["text_embed"], dtype=np.float64).reshape(len(vocab) + 1, dim)
        image_proj = np.asarray(doc["image_proj"], dtype=np.float64).reshape(FEATURE_DIM, dim)
        return cls(vocab=vocab, text_embed=text_embed, image_proj=image_proj)


@dataclass
class CosineScorer:
    """Scores a question against an image as cosine(embed_text, embed_image)."""

    provider: EncoderProvider
    kind: ScorerKind
    input_size: tuple[int, int]  # sub-images are resized to this before encoding

    @classmethod
    def for_tiny(cls, encoder: TinyBiEncoder) -> "CosineScorer":
        return cls(provider=encoder, kind=ScorerKind.TRAINED_BIENCODER, input_size=(THUMB_SIZE, THUMB_SIZE))

    def score(self, question: str, image: RasterImage) -> float:
        q = self.provider.embed_text(question)
        v = self.provider.embed_image(resize(image, *self.input_size))
        return cosine(q, v)

    def score_many(self, question: str, images: Sequence[RasterImage]) -> list[float]:
        q = self.provider.embed_text(question)
        scores = []
        for i, img in enumerate(images):
            try:
                v = self.provider.embed_image(resize(img, *self.input_size))
                scores.append(cosine(q, v))
            except Exception as exc:
                raise ScoringError(f"scoring failed on sub-image {i}: {exc}", index=i) from exc
        return scores


def score_subimages(question: str, subimages: Sequence[SubImage], scorer: CosineScorer) -> list[float]:
    """One finite relevance score per sub-image, preserving input order."""
    if not subimages:
        raise ValueError("subimages must be non-empty")
    scores = scorer.score_many(question, [s.image for s in subimages])
    for i, s in enumerate(scores):
        if not np.isfinite(s):
            raise ScoringError(f"non-finite score {s} for sub-image {i}", index=i)
    return scores


# --- external encoder wire protocol --------------------------------------------


@dataclass(frozen=True)
class EncoderRequest:
    kind: str  # "text" | "image"
    payload: str  # question text, or base64 PNG
    request_id: str

    def __post_init__(self):
        if self.kind not in ("text", "image"):
            raise ValueError(f"encoder request kind must be text|image, got {self.kind!r}")

    def to_json_dict(self) -> dict:
        return {"kind": self.kind, "payload": self.payload, "request_id": self.request_id}

    @classmethod
    def from_json_dict(cls, doc: dict) -> "EncoderRequest":
        try:
            return cls(kind=doc["kind"], payload=doc["payload"], request_id=doc["request_id"])
        except (KeyError, TypeError, ValueError) as exc:
            raise wire.MalformedResponseError(f"bad encoder request: {exc}") from exc


@dataclass(frozen=True)
class EncoderResponse:
    request_id: str
    embedding: Optional[tuple[float, ...]] = None
    error: Optional[str] = None

    def __post_init__(self):
        if (self.embedding is None) == (self.error is None):
            raise ValueError("exactly one of embedding/error must be set")

    def to_json_dict(self) -> dict:
        if self.error is not None:
            return {"request_id": self.request_id, "error": self.error}
        return {"request_id": self.request_id, "embedding": list(self.embedding)}

    @classmethod
    def from_json_dict(cls, doc: dict) -> "EncoderResponse":
        if "request_id" not in doc or ("embedding" in doc) == ("error" in doc):
            raise wire.MalformedResponseError(f"bad encoder response: {doc!r}")
        emb = doc.get("embedding")
        return cls(
            request_id=doc["request_id"],
            embedding=tuple(float(v) for v in emb) if emb is not None else None,
            error=doc.get("error"),
        )


class ExternalEncoderProvider:
    """EncoderProvider backed by a remote process speaking the embedding protocol
    over HTTP POST or a line-delimited-JSON subprocess pipe."""

    def __init__(self, endpoint_spec: str, timeout: float = 30.0, attempts: int = 3, backoff: float = 0.1):
        self._endpoint = wire.open_endpoint(endpoint_spec, timeout=timeout)
        self._attempts = attempts
        self._backoff = backoff
        self._counter = itertools.count()

    def _request(self, kind: str, payload: str) -> Embedding:
        msg = EncoderRequest(kind=kind, payload=payload, request_id=f"enc-{next(self._counter)}")
        raw = wire.send_with_retry(self._endpoint, msg.to_json_dict(), attempts=self._attempts, backoff=self._backoff)
        response = EncoderResponse.from_json_dict(raw)
        if response.request_id != msg.request_id:
            raise wire.RequestIdMismatchError(f"sent {msg.request_id!r}, got {response.request_id!r}")
        if response.error is not None:
            raise ScoringError(f"encoder endpoint error: {response.error}")
        if not response.embedding:
            raise wire.MalformedResponseError("empty embedding")
        return Embedding(np.asarray(response.embedding, dtype=np.float64))

    def embed_text(self, text: str) -> Embedding:
        return self._request("text", text)

    def embed_image(self, image: RasterImage) -> Embedding:
        return self._request("image", base64.b64encode(encode_png(image)).decode("ascii"))

    def close(self) -> None:
        self._endpoint.close()
