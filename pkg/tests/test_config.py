import json

import pytest

from desklm.config import build_config, emit_config, parse_config
from desklm.errors import ConfigError

MINIMAL = {
    "model": {"preset": "125M"},
    "training": {"seq_len": 32, "micro_batch": 4, "token_budget": 100_000},
}


def write(tmp_path, data):
    p = tmp_path / "run.json"
    p.write_text(json.dumps(data))
    return p


def test_preset_resolves_table_row(tmp_path):
    cfg = parse_config(write(tmp_path, MINIMAL))
    assert (cfg.model.n_layers, cfg.model.n_heads, cfg.model.d_model) == (12, 12, 768)
    assert cfg.schedule.max_lr == 6.0e-4
    assert cfg.preset.batch_tokens == 500_000
    assert cfg.model.max_seq_len == 2048


def test_preset_field_override(tmp_path):
    data = {**MINIMAL, "model": {"preset": "125M", "vocab_size": 1000, "dropout": 0.0}}
    cfg = parse_config(write(tmp_path, data))
    assert cfg.model.vocab_size == 1000
    assert cfg.model.d_model == 768


def test_empty_file_lists_required_sections(tmp_path):
    p = tmp_path / "empty.json"
    p.write_text("")
    with pytest.raises(ConfigError, match="model.*training|required"):
        parse_config(p)


def test_unknown_top_level_key_located(tmp_path):
    with pytest.raises(ConfigError, match=r"^optimizerz: unknown key"):
        parse_config(write(tmp_path, {**MINIMAL, "optimizerz": {}}))


def test_unknown_nested_key_located(tmp_path):
    data = {**MINIMAL, "adamw": {"beta1": 0.9, "bogus": 1}}
    with pytest.raises(ConfigError, match=r"adamw\.bogus: unknown key"):
        parse_config(write(tmp_path, data))


def test_invariant_violation_located(tmp_path):
    data = {**MINIMAL, "clip": {"max_norm": -1}}
    with pytest.raises(ConfigError, match="clip"):
        parse_config(write(tmp_path, data))


def test_missing_corpus_path_rejected(tmp_path):
    data = {**MINIMAL, "corpus": {"tokens_path": "nope.npy"}}
    with pytest.raises(ConfigError, match="does not exist"):
        parse_config(write(tmp_path, data))


def test_round_trip_emit_parse(tmp_path):
    data = {
        **MINIMAL,
        "schedule": {"warmup_tokens": 5000, "overrides": [[10, 0.5]]},
        "health": {"loss_margin": 0.7},
        "seeds": {"master": 3},
    }
    cfg = parse_config(write(tmp_path, data))
    emitted = tmp_path / "emitted.json"
    emitted.write_text(emit_config(cfg))
    cfg2 = parse_config(emitted)
    assert cfg2.echo() == {**cfg.echo(), "preset": None}
    assert cfg2.schedule == cfg.schedule
    assert cfg2.model == cfg.model
    assert cfg2.seeds == cfg.seeds


def test_echo_contains_every_default():
    cfg = build_config(MINIMAL)
    echo = cfg.echo()
    assert echo["adamw"] == {"beta1": 0.9, "beta2": 0.95, "eps": 1e-8, "weight_decay": 0.1}
    assert echo["clip"]["max_norm"] == 1.0
    assert echo["predivide"]["world_size"] == 1
    assert echo["precision"]["weight_mode"] == "full"
    assert echo["scaler"]["scale"] == 2.0**16
    assert echo["health"]["loss_patience"] == 5
    assert echo["recovery"]["lr_factor"] == pytest.approx(2 / 3)
    assert echo["dedup"]["jaccard_threshold"] == 0.95
    assert set(echo["seeds"]) == {"init", "data", "dropout", "validation", "eval"}


def test_one_seed_per_stochastic_subsystem():
    a = build_config({**MINIMAL, "seeds": {"master": 0}})
    b = build_config({**MINIMAL, "seeds": {"master": 1}})
    assert len(set(a.seeds.values())) == len(a.seeds)
    assert set(a.seeds.values()) != set(b.seeds.values())
    c = build_config({**MINIMAL, "seeds": {"master": 0, "dropout": 99}})
    assert c.seeds["dropout"] == 99
    assert c.seeds["init"] == a.seeds["init"]


def test_tokens_per_step_product():
    data = {
        **MINIMAL,
        "training": {"seq_len": 32, "micro_batch": 4, "grad_accum": 2, "token_budget": 100_000},
        "predivide": {"world_size": 2},
    }
    cfg = build_config(data)
    assert cfg.tokens_per_step == 32 * 4 * 2 * 2
    assert cfg.total_steps == 100_000 // (32 * 4 * 2 * 2)


def test_invalid_json_gives_located_error(tmp_path):
    p = tmp_path / "bad.json"
    p.write_text('{"model": }')
    with pytest.raises(ConfigError, match=r"bad\.json:1:"):
        parse_config(p)
