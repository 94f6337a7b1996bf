"""Shared configuration loading, seeding, answer normalization, and JSON-line logging."""
from __future__ import annotations

import dataclasses
import datetime
import json
import os
import re
import sys
from dataclasses import dataclass
from typing import Any, IO, Optional

import numpy as np

ENV_CONFIG_VAR = "SEMCLIP_CONFIG"


class ConfigError(ValueError):
    """Config file failed to parse or validate."""


# RNG purpose tags. Every stochastic operation builds its generator from
# (global seed, purpose, *indices) via derive_rng, never from ambient entropy.
PURPOSE_SYNTH = 1
PURPOSE_SYNTH_SPLIT = 2
PURPOSE_PAIRS = 3
PURPOSE_TRAIN = 4
PURPOSE_RANDOM_SELECT = 5
PURPOSE_INIT = 6


def derive_rng(seed: int, *path: int) -> np.random.Generator:
    """Seeded generator for one purpose; distinct paths give independent streams."""
    key = tuple(int(p) for p in path)
    return np.random.default_rng(np.random.SeedSequence(entropy=int(seed), spawn_key=key))


@dataclass(frozen=True)
class GlobalConfig:
    """Resolved run configuration with all defaults applied.

    Flat keys; the training-related block (margin .. embed_dim) is consumed
    by the trainer, the rest by the evaluation harness and CLI.
    """

    seed: int = 0
    grid_n: int = 3
    k: int = 1
    tokens_per_image: int = 576
    temperature: float = 0.0
    repeats: int = 32
    include_overview: bool = True
    parallelism: int = 1
    strategy: str = "topk"
    answerer: str = "toy"
    scorer: str = "tiny"
    margin: float = 0.2
    learning_rate: float = 5e-6
    batch_size: int = 64
    epochs: int = 32
    pair_cap_per_instance: int = 16
    embed_dim: int = 32
    dataset: Optional[str] = None
    out_dir: Optional[str] = None

    def validate(self) -> None:
        checks = [
            (self.grid_n >= 1, "grid_n", "must be >= 1"),
            (self.k >= 1, "k", "must be >= 1"),
            (self.k <= self.grid_n * self.grid_n, "k", "must be <= grid_n^2"),
            (self.tokens_per_image >= 1, "tokens_per_image", "must be >= 1"),
            (self.temperature >= 0, "temperature", "must be >= 0"),
            (self.repeats >= 1, "repeats", "must be >= 1"),
            (self.parallelism >= 1, "parallelism", "must be >= 1"),
            (self.margin > 0, "margin", "must be > 0"),
            (self.learning_rate > 0, "learning_rate", "must be > 0"),
            (self.batch_size >= 1, "batch_size", "must be >= 1"),
            (self.epochs >= 1, "epochs", "must be >= 1"),
            (self.pair_cap_per_instance >= 1, "pair_cap_per_instance", "must be >= 1"),
            (self.embed_dim >= 2, "embed_dim", "must be >= 2"),
        ]
        for ok, key, msg in checks:
            if not ok:
                raise ConfigError(f"{key}: {msg} (got {getattr(self, key)!r})")
        if self.dataset is not None and not os.path.exists(self.dataset):
            raise ConfigError(f"dataset: path does not exist: {self.dataset!r}")

    def to_dict(self) -> dict[str, Any]:
        return dataclasses.asdict(self)


_FIELD_TYPES = {f.name: f.type for f in dataclasses.fields(GlobalConfig)}


def _coerce(key: str, value: Any) -> Any:
    """Check a raw JSON value against the config field it targets."""
    want = _FIELD_TYPES[key]
    if want == "int":
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{key}: expected integer, got {value!r}")
        return value
    if want == "float":
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{key}: expected number, got {value!r}")
        return float(value)
    if want == "bool":
        if not isinstance(value, bool):
            raise ConfigError(f"{key}: expected boolean, got {value!r}")
        return value
    # remaining fields are str or optional str
    if value is not None and not isinstance(value, str):
        raise ConfigError(f"{key}: expected string, got {value!r}")
    return value


def config_from_dict(raw: dict[str, Any]) -> GlobalConfig:
    if not isinstance(raw, dict):
        raise ConfigError(f"config root must be a JSON object, got {type(raw).__name__}")
    unknown = sorted(set(raw) - set(_FIELD_TYPES))
    if unknown:
        raise ConfigError(f"unknown config key(s): {', '.join(unknown)}")
    cfg = GlobalConfig(**{k: _coerce(k, v) for k, v in raw.items()})
    cfg.validate()
    return cfg


def load_config(path: Optional[str] = None) -> GlobalConfig:
    """Load a JSON config file, falling back to $SEMCLIP_CONFIG, then defaults."""
    if path is None:
        path = os.environ.get(ENV_CONFIG_VAR)
    if path is None:
        return GlobalConfig()
    try:
        with open(path, "r", encoding="utf-8") as fh:
            raw = json.load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config {path!r}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config {path!r} is not valid JSON: {exc}") from exc
    return config_from_dict(raw)


# --- answer normalization ---------------------------------------------------

_WS_RE = re.compile(r"\s+")
_TRAILING_PUNCT_RE = re.compile(r"[\s\.\?\!,;:]+$")
# "b", "(b)", "b.", "b)", "b:" with optional following text
_OPTION_PATTERNS = (
    re.compile(r"^\(([a-z])\)(?:\s+|$)"),
    re.compile(r"^([a-z])[\.\):](?:\s+|$)"),
    re.compile(r"^([a-z])$"),
)


@dataclass(frozen=True)
class NormalizedAnswer:
    text: str
    option_letter: Optional[str] = None


def normalize_answer(raw: str, options: Optional[list[str]] = None) -> NormalizedAnswer:
    """Lowercase, trim, collapse whitespace, strip trailing punctuation.

    When options are supplied, a leading option-letter pattern ("A", "(a)",
    "a.") is detected and reported alongside the normalized text.
    """
    text = _WS_RE.sub(" ", str(raw).strip().lower())
    letter = None
    if options:
        for pat in _OPTION_PATTERNS:
            m = pat.match(text)
            if m and ord(m.group(1)) - ord("a") < len(options):
                letter = m.group(1)
                break
    text = _TRAILING_PUNCT_RE.sub("", text)
    return NormalizedAnswer(text=text, option_letter=letter)


def _resolve_letter(norm: NormalizedAnswer, options: list[str]) -> Optional[str]:
    if norm.option_letter:
        return norm.option_letter
    for i, opt in enumerate(options):
        if normalize_answer(opt).text == norm.text:
            return chr(ord("a") + i)
    return None


def answers_match(predicted: str, gold: str, options: Optional[list[str]] = None) -> bool:
    """Single correctness rule shared by labeling, optimal selection, and evaluation."""
    np_, ng = normalize_answer(predicted, options), normalize_answer(gold, options)
    if options:
        lp, lg = _resolve_letter(np_, options), _resolve_letter(ng, options)
        if lp and lg:
            return lp == lg
    return np_.text == ng.text


# --- structured logging ------------------------------------------------------


class JsonlLogger:
    """Line-delimited JSON event log with timestamps and a run id."""

    def __init__(self, sink: Optional[IO[str]] = None, run_id: str = "run"):
        self._sink = sink
        self.run_id = run_id
        self.events: list[dict[str, Any]] = []

    @classmethod
    def to_path(cls, path: str, run_id: str = "run") -> "JsonlLogger":
        return cls(open(path, "a", encoding="utf-8"), run_id=run_id)

    def log(self, event: str, **fields: Any) -> None:
        rec = {
            "ts": datetime.datetime.now(datetime.timezone.utc).isoformat(),
            "run_id": self.run_id,
            "event": event,
        }
        rec.update(fields)
        self.events.append(rec)
        if self._sink is not None:
            self._sink.write(json.dumps(rec, ensure_ascii=False) + "\n")
            self._sink.flush()

    def close(self) -> None:
        if self._sink is not None and self._sink not in (sys.stdout, sys.stderr):
            self._sink.close()
