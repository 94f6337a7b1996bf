"""Answerer backends: the wire protocol for real VLM endpoints and a deterministic toy oracle.

The toy oracle never looks at pixels directly. Images are matched back to
registered synthetic scenes by content hash, and an attribute is readable only
if the target shape would keep at least `min_visible_pixels` pixels after the
containing view is squeezed to the oracle's fixed input resolution.
"""
from __future__ import annotations

import base64
import hashlib
import re
from dataclasses import dataclass
from typing import Any, Optional, Protocol, Sequence

from . import wire
from .imaging import Bbox, GridSpec, RasterImage, decode_png, encode_png, partition
from .synthbench import (
    COLOR_TABLE,
    SHAPES,
    SynthScene,
    pixels_in_view,
    render,
    visible_after_resize,
)

UNKNOWN_ANSWER = "unknown"


class OracleError(RuntimeError):
    """The toy oracle was given an image it has no provenance for."""


# --- wire messages -------------------------------------------------------------


@dataclass(frozen=True)
class AnswerRequest:
    request_id: str
    question: str
    images: tuple[str, ...]  # base64 PNG payloads, overview first when present
    options: Optional[tuple[str, ...]] = None
    temperature: float = 0.0

    def __post_init__(self):
        if not self.images:
            raise ValueError("request must carry at least one image")
        if self.temperature < 0:
            raise ValueError(f"temperature must be >= 0, got {self.temperature}")

    def to_json_dict(self) -> dict[str, Any]:
        doc: dict[str, Any] = {
            "request_id": self.request_id,
            "question": self.question,
            "images": list(self.images),
            "decode": {"temperature": self.temperature},
        }
        if self.options is not None:
            doc["options"] = list(self.options)
        return doc

    @classmethod
    def from_json_dict(cls, doc: dict[str, Any]) -> "AnswerRequest":
        try:
            options = doc.get("options")
            return cls(
                request_id=doc["request_id"],
                question=doc["question"],
                images=tuple(doc["images"]),
                options=tuple(options) if options is not None else None,
                temperature=float(doc.get("decode", {}).get("temperature", 0.0)),
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise wire.MalformedResponseError(f"bad answer request: {exc}") from exc


@dataclass(frozen=True)
class AnswerResponse:
    request_id: str
    answer: Optional[str] = None
    error: Optional[str] = None

    def __post_init__(self):
        if (self.answer is None) == (self.error is None):
            raise ValueError("exactly one of answer/error must be set")

    def to_json_dict(self) -> dict[str, Any]:
        if self.error is not None:
            return {"request_id": self.request_id, "error": self.error}
        return {"request_id": self.request_id, "answer": self.answer}

    @classmethod
    def from_json_dict(cls, doc: dict[str, Any]) -> "AnswerResponse":
        if "request_id" not in doc or ("answer" in doc) == ("error" in doc):
            raise wire.MalformedResponseError(f"bad answer response: {doc!r}")
        return cls(request_id=doc["request_id"], answer=doc.get("answer"), error=doc.get("error"))


def b64_png(image: RasterImage) -> str:
    return base64.b64encode(encode_png(image)).decode("ascii")


def make_request(
    question: str,
    images: Sequence[RasterImage],
    request_id: str,
    options: Optional[Sequence[str]] = None,
    temperature: float = 0.0,
) -> AnswerRequest:
    return AnswerRequest(
        request_id=request_id,
        question=question,
        images=tuple(b64_png(im) for im in images),
        options=tuple(options) if options is not None else None,
        temperature=temperature,
    )


class Answerer(Protocol):
    def answer(self, request: AnswerRequest) -> AnswerResponse: ...


# --- toy oracle -----------------------------------------------------------------


@dataclass(frozen=True)
class ToyOracleConfig:
    min_visible_pixels: int = 64
    resolution: int = 224

    def __post_init__(self):
        if self.min_visible_pixels < 1:
            raise ValueError("min_visible_pixels must be >= 1")


def _content_key(image: RasterImage) -> tuple[int, int, str]:
    return (image.width, image.height, hashlib.sha256(image.pixels).hexdigest())


class SceneRegistry:
    """Maps image payloads back to (scene, view bbox) by exact pixel content."""

    def __init__(self):
        self._scenes: dict[str, SynthScene] = {}
        self._views: dict[tuple[int, int, str], tuple[str, Bbox]] = {}
        self._payload_memo: dict[bytes, tuple[str, Bbox]] = {}
        self._count_memo: dict[tuple[str, int, Bbox], int] = {}

    def add_scene(self, instance_id: str, scene: SynthScene, grid_ns: Sequence[int] = ()) -> None:
        """Register a scene plus the views a grid-based pipeline can produce from it:
        the full canvas and every cell crop for each grid side in grid_ns."""
        self._scenes[instance_id] = scene
        image = render(scene)
        self.register_view(instance_id, image, (0, 0, image.width, image.height))
        for n in set(grid_ns) or {scene.grid_n}:
            for sub in partition(image, GridSpec(n)):
                self.register_view(instance_id, sub.image, sub.region.bbox)

    def register_view(self, instance_id: str, image: RasterImage, bbox: Bbox) -> None:
        self._views[_content_key(image)] = (instance_id, bbox)

    def scene(self, instance_id: str) -> SynthScene:
        return self._scenes[instance_id]

    def lookup(self, payload_b64: str) -> tuple[str, Bbox]:
        digest = hashlib.sha256(payload_b64.encode("ascii")).digest()
        hit = self._payload_memo.get(digest)
        if hit is not None:
            return hit
        try:
            image = decode_png(base64.b64decode(payload_b64))
        except Exception as exc:
            raise OracleError(f"payload is not a decodable PNG: {exc}") from exc
        key = _content_key(image)
        view = self._views.get(key)
        if view is None:
            raise OracleError(f"unregistered image ({image.width}x{image.height})")
        self._payload_memo[digest] = view
        return view

    def target_pixels_in_view(self, instance_id: str, placement_index: int, bbox: Bbox) -> int:
        memo_key = (instance_id, placement_index, bbox)
        if memo_key not in self._count_memo:
            scene = self._scenes[instance_id]
            self._count_memo[memo_key] = pixels_in_view(scene, scene.placements[placement_index], bbox)
        return self._count_memo[memo_key]


_COUNT_Q_RE = re.compile(r"how many shapes")
_SHAPE_Q_RE = re.compile(r"what shape is the ([a-z0-9]+) object")
_COLOR_Q_RE = re.compile(r"what color is the ([a-z0-9]+)")


def _parse_question(question: str) -> tuple[Optional[str], Optional[str]]:
    q = question.lower()
    if _COUNT_Q_RE.search(q):
        return "count", None
    m = _SHAPE_Q_RE.search(q)
    if m and m.group(1) in COLOR_TABLE:
        return "shape", m.group(1)
    m = _COLOR_Q_RE.search(q)
    if m and m.group(1) in SHAPES:
        return "color", m.group(1)
    return None, None


def toy_answer(request: AnswerRequest, config: ToyOracleConfig, registry: SceneRegistry) -> AnswerResponse:
    """Deterministic synthetic answerer.

    Attribute questions are answered correctly iff the asked-about shape is
    readable (post-resize pixel count above threshold) in at least one provided
    image; counting questions additionally require some image to show the full
    canvas. Everything else gets the fixed wrong answer "unknown".
    """
    try:
        views = [registry.lookup(p) for p in request.images]
    except OracleError as exc:
        return AnswerResponse(request_id=request.request_id, error=str(exc))

    kind, descriptor = _parse_question(request.question)
    answer = UNKNOWN_ANSWER
    if kind == "count":
        for instance_id, bbox in views:
            scene = registry.scene(instance_id)
            if bbox == (0, 0, *scene.canvas):
                answer = str(len(scene.placements))
                break
    elif kind is not None:
        for instance_id, bbox in views:
            scene = registry.scene(instance_id)
            for idx, pl in enumerate(scene.placements):
                wanted = pl.shape == descriptor if kind == "color" else pl.color == descriptor
                if not wanted:
                    continue
                count = registry.target_pixels_in_view(instance_id, idx, bbox)
                vw, vh = bbox[2] - bbox[0], bbox[3] - bbox[1]
                if visible_after_resize(count, vw, vh, config.resolution, config.min_visible_pixels):
                    answer = pl.color if kind == "color" else pl.shape
                    break
            if answer != UNKNOWN_ANSWER:
                break
    return AnswerResponse(request_id=request.request_id, answer=answer)


class ToyOracleAnswerer:
    def __init__(self, registry: Optional[SceneRegistry] = None, config: Optional[ToyOracleConfig] = None):
        self.registry = registry if registry is not None else SceneRegistry()
        self.config = config if config is not None else ToyOracleConfig()

    @classmethod
    def from_scenes(cls, scenes: dict[str, SynthScene], grid_ns: Sequence[int] = (), config: Optional[ToyOracleConfig] = None) -> "ToyOracleAnswerer":
        oracle = cls(config=config)
        for instance_id, scene in scenes.items():
            oracle.registry.add_scene(instance_id, scene, grid_ns=grid_ns)
        return oracle

    def answer(self, request: AnswerRequest) -> AnswerResponse:
        return toy_answer(request, self.config, self.registry)


# --- external answerer client -----------------------------------------------------


class ExternalAnswerer:
    """Client for a real answering endpoint: HTTP POST <base>/answer, or a
    line-delimited-JSON subprocess. Transport failures retry with backoff."""

    def __init__(self, endpoint_spec: str, timeout: float = 60.0, attempts: int = 3, backoff: float = 0.1):
        if endpoint_spec.startswith(("http://", "https://")) and not endpoint_spec.rstrip("/").endswith("/answer"):
            endpoint_spec = endpoint_spec.rstrip("/") + "/answer"
        self._endpoint = wire.open_endpoint(endpoint_spec, timeout=timeout)
        self._attempts = attempts
        self._backoff = backoff

    def answer(self, request: AnswerRequest) -> AnswerResponse:
        raw = wire.send_with_retry(self._endpoint, request.to_json_dict(), attempts=self._attempts, backoff=self._backoff)
        response = AnswerResponse.from_json_dict(raw)
        if response.request_id != request.request_id:
            raise wire.RequestIdMismatchError(
                f"sent request_id {request.request_id!r}, got {response.request_id!r}"
            )
        return response

    def close(self) -> None:
        self._endpoint.close()


def external_answer(request: AnswerRequest, endpoint_spec: str, **kwargs: Any) -> AnswerResponse:
    client = ExternalAnswerer(endpoint_spec, **kwargs)
    try:
        return client.answer(request)
    finally:
        client.close()
