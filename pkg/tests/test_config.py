from pathlib import Path

import pytest

from podsim.config import (ConfigError, base_hash, config_hash, dump, expand_matrix, load_config,
                           load_text, override, seed_rng)

CONFIGS = Path(__file__).resolve().parent.parent / "configs"

MINIMAL = """\
version: 1
ranks: 2
block_dims: 5
field: {kind: outflow, drift: [1, 0, 0]}
seeds:
  - {kind: per_block_random, count: 3}
max_steps: 50
"""


def test_minimal_config_fills_defaults():
    cfg = load_text(MINIMAL)
    assert cfg["ranks"] == [2] and cfg["max_steps"] == [50]
    assert cfg["block_dims"] == [5, 5, 5]
    assert cfg["scheduler"]["mode"] == "deterministic"
    assert cfg["mitigation"]["kind"] == "none"


@pytest.mark.parametrize("path", sorted(CONFIGS.glob("*.yaml")), ids=lambda p: p.stem)
def test_shipped_configs_load(path):
    cfg = load_config(path)
    assert load_text(dump(cfg)) == cfg


@pytest.mark.parametrize("text,line,field", [
    (MINIMAL.replace("ranks: 2", "ranks: 3"), 2, "ranks"),
    (MINIMAL.replace("block_dims: 5", "block_dims: one"), 3, "block_dims"),
    (MINIMAL.replace("count: 3", "count: -1"), 6, "seeds.0.count"),
    (MINIMAL + "colour: red\n", 8, "colour"),
    (MINIMAL.replace("kind: outflow", "kind: tornado"), 4, "field"),
    (MINIMAL + "mitigation: {kind: merge, groups: [[0, 5]]}\n", 8, "mitigation.groups.0"),
])
def test_invalid_config_names_line_and_field(text, line, field):
    with pytest.raises(ConfigError) as info:
        load_text(text, "x.yaml")
    msg = str(info.value)
    assert msg.startswith(f"x.yaml:{line}: {field}")


def test_missing_field_reported():
    with pytest.raises(ConfigError, match="field"):
        load_text(MINIMAL.replace("field: {kind: outflow, drift: [1, 0, 0]}\n", ""))


def test_yaml_syntax_error_has_line():
    with pytest.raises(ConfigError, match=r"^c.yaml:\d+: <yaml>"):
        load_text("ranks: [1, 2\nfield: {", "c.yaml")


def test_matrix_expansion():
    cfg = load_text(MINIMAL.replace("ranks: 2", "ranks: [1, 2, 4]")
                    .replace("max_steps: 50", "max_steps: [10, 20]"))
    cells = expand_matrix(cfg)
    assert [(c.ranks, c.max_steps) for c in cells] == [(1, 10), (1, 20), (2, 10), (2, 20),
                                                       (4, 10), (4, 20)]
    assert len({c.subdir for c in cells}) == 6
    assert expand_matrix(load_text(MINIMAL))[0].subdir == ""


def test_hash_ignores_instrumentation_only():
    cfg = expand_matrix(load_text(MINIMAL))[0].config
    h = config_hash(cfg)
    assert config_hash(override(cfg, track=0)) == h
    cfg2 = dict(cfg, output={"dir": "elsewhere"})
    assert config_hash(cfg2) == h
    assert config_hash(override(cfg, seed=99)) != h
    assert config_hash(override(cfg, mode="concurrent")) != h


def test_base_hash_ignores_mitigation():
    cfg = expand_matrix(load_text(MINIMAL))[0].config
    mit = expand_matrix(load_text(MINIMAL + "mitigation: {kind: early_terminate, window: 2}\n"))
    assert base_hash(mit[0].config) == base_hash(cfg)
    assert config_hash(mit[0].config) != config_hash(cfg)


def test_override_rejects_unknown_mode():
    with pytest.raises(ConfigError):
        override(load_text(MINIMAL), mode="parallel")


def test_seed_rng_is_stable_and_distinct():
    assert seed_rng(1, 0) == seed_rng(1, 0)
    assert len({seed_rng(1, i) for i in range(100)}) == 100
    assert seed_rng(1, 0) != seed_rng(2, 0)
