import json

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from semclip.config import (
    ConfigError,
    GlobalConfig,
    JsonlLogger,
    answers_match,
    config_from_dict,
    derive_rng,
    load_config,
    normalize_answer,
)


def test_empty_config_gives_defaults(tmp_path):
    path = tmp_path / "c.json"
    path.write_text("{}")
    cfg = load_config(str(path))
    assert cfg == GlobalConfig()
    assert (cfg.grid_n, cfg.k, cfg.tokens_per_image) == (3, 1, 576)
    assert (cfg.temperature, cfg.repeats, cfg.margin) == (0.0, 32, 0.2)
    assert (cfg.learning_rate, cfg.batch_size, cfg.epochs) == (5e-6, 64, 32)


def test_k_zero_rejected():
    with pytest.raises(ConfigError, match="k"):
        config_from_dict({"k": 0})


def test_unknown_key_rejected_with_name():
    with pytest.raises(ConfigError, match="learning_rte"):
        config_from_dict({"learning_rte": 1e-4})


def test_training_block_round_trips():
    raw = {"epochs": 32, "batch_size": 64, "learning_rate": 5e-6}
    cfg = config_from_dict(raw)
    echoed = {k: cfg.to_dict()[k] for k in raw}
    assert echoed == raw


def test_type_errors_name_the_key():
    with pytest.raises(ConfigError, match="epochs"):
        config_from_dict({"epochs": "many"})
    with pytest.raises(ConfigError, match="temperature"):
        config_from_dict({"temperature": "cold"})


def test_missing_dataset_path_rejected(tmp_path):
    with pytest.raises(ConfigError, match="dataset"):
        config_from_dict({"dataset": str(tmp_path / "nope.jsonl")})


def test_env_var_config(tmp_path, monkeypatch):
    path = tmp_path / "c.json"
    path.write_text('{"k": 2}')
    monkeypatch.setenv("SEMCLIP_CONFIG", str(path))
    assert load_config().k == 2
    monkeypatch.delenv("SEMCLIP_CONFIG")
    assert load_config() == GlobalConfig()


def test_invalid_json_reported(tmp_path):
    path = tmp_path / "c.json"
    path.write_text("{nope")
    with pytest.raises(ConfigError, match="valid JSON"):
        load_config(str(path))


def test_normalize_basic():
    assert normalize_answer("  The  Cat.").text == "the cat"


def test_normalize_option_letter_patterns():
    opts = ["red", "green", "blue"]
    assert normalize_answer("(B) red", opts).option_letter == "b"
    assert normalize_answer("A", opts).option_letter == "a"
    assert normalize_answer("c.", opts).option_letter == "c"
    assert normalize_answer("b) green", opts).option_letter == "b"
    # "a cat" starts with the article, not an option marker
    assert normalize_answer("a cat", opts).option_letter is None
    # detected letters must stay within the option range
    assert normalize_answer("z.", opts).option_letter is None
    assert normalize_answer("(B) red").option_letter is None  # no options given


@given(st.text(max_size=40))
@settings(max_examples=200, deadline=None)
def test_normalize_idempotent(raw):
    once = normalize_answer(raw)
    twice = normalize_answer(once.text)
    assert once.text == twice.text


def test_answers_match_plain():
    assert answers_match("  Red ", "red")
    assert not answers_match("red", "blue")
    assert answers_match("The   CAT.", "the cat")


def test_answers_match_option_letters():
    opts = ["red", "green", "blue"]
    assert answers_match("(B) green", "b", opts)
    assert answers_match("green", "B", opts)  # text side resolves to its letter
    assert not answers_match("(a)", "b", opts)


def test_derive_rng_deterministic_and_independent():
    a = derive_rng(7, 1, 2).integers(0, 1000, size=5)
    b = derive_rng(7, 1, 2).integers(0, 1000, size=5)
    c = derive_rng(7, 1, 3).integers(0, 1000, size=5)
    assert a.tolist() == b.tolist()
    assert a.tolist() != c.tolist()


def test_jsonl_logger_writes_lines(tmp_path):
    path = tmp_path / "log.jsonl"
    logger = JsonlLogger.to_path(str(path), run_id="r1")
    logger.log("started", detail=42)
    logger.log("finished")
    logger.close()
    lines = [json.loads(l) for l in path.read_text().splitlines()]
    assert [l["event"] for l in lines] == ["started", "finished"]
    assert lines[0]["run_id"] == "r1" and lines[0]["detail"] == 42
    assert "ts" in lines[0]
