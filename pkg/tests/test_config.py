import json
from dataclasses import replace

import pytest

from avpsim.config import (
    CampaignConfig,
    ConfigError,
    apply_overrides,
    config_hash,
    episode_config,
    load_campaign,
    resolve_odd,
    resolve_requirements,
    resolve_scenario,
    stack_config,
    store_campaign,
)
from avpsim.scenarios import (
    OddSpec,
    RequirementParams,
    animal_scenario,
    store_functional_scenario,
    store_odd,
)
from avpsim.stl import store_requirements, requirement_library


def test_hash_is_stable_and_sensitive():
    a = CampaignConfig()
    b = CampaignConfig()
    assert config_hash(a) == config_hash(b)
    assert len(config_hash(a)) == 12
    assert config_hash(replace(a, aeb_enabled=False)) != config_hash(a)
    assert config_hash(replace(a, seeds=(0, 1))) != config_hash(a)
    # key order in the sensor spec must not matter
    x = CampaignConfig(sensor={"sigma": 0.1, "max_range": 20.0})
    y = CampaignConfig(sensor={"max_range": 20.0, "sigma": 0.1})
    assert config_hash(x) == config_hash(y)


def test_file_roundtrip(tmp_path):
    cfg = CampaignConfig(
        aeb_enabled=False,
        seeds=(4, 5, 6),
        sensor={"perfect": True, "known_classes": ["pedestrian", "car", "animal"]},
        requirement_params=RequirementParams(),
    )
    path = tmp_path / "campaign.json"
    store_campaign(cfg, path)
    back = load_campaign(path)
    assert back == cfg
    assert config_hash(back) == config_hash(cfg)


def test_relative_paths_resolve_against_config_dir(tmp_path):
    sub = tmp_path / "conf"
    sub.mkdir()
    store_odd(OddSpec(ego_v_max=2.5), sub / "odd.json")
    store_functional_scenario(animal_scenario(), sub / "scenario.json")
    store_campaign(
        CampaignConfig(odd_path="odd.json", scenario_path="scenario.json"),
        sub / "campaign.json",
    )
    cfg = load_campaign(sub / "campaign.json")
    assert resolve_odd(cfg).ego_v_max == 2.5
    assert resolve_scenario(cfg).name == "animal-on-driveway"
    # absolute paths pass through untouched
    absolute = CampaignConfig(odd_path=str(sub / "odd.json"))
    store_campaign(absolute, tmp_path / "abs.json")
    assert load_campaign(tmp_path / "abs.json").odd_path == str(sub / "odd.json")


def test_default_resolvers():
    cfg = CampaignConfig()
    assert resolve_odd(cfg) == OddSpec()
    assert resolve_scenario(cfg).name == "walkout"
    reqs = resolve_requirements(cfg)
    assert set(reqs) == set(requirement_library(RequirementParams()))
    assert reqs["SAFETY-GOAL"].formula is not None


def test_requirements_file_resolver(tmp_path):
    library = requirement_library(RequirementParams())
    path = tmp_path / "reqs.stl"
    store_requirements(list(library.values()), path)
    cfg = CampaignConfig(requirements_path=str(path))
    assert set(resolve_requirements(cfg)) == set(library)


def test_strict_schema():
    with pytest.raises(ConfigError, match="unknown config fields"):
        CampaignConfig.from_dict({"buget": 5})
    with pytest.raises(ConfigError, match="unknown sensor fields"):
        CampaignConfig(sensor={"sigmaa": 0.1})
    with pytest.raises(ConfigError, match="seeds"):
        CampaignConfig(seeds=())
    with pytest.raises(ConfigError, match="seeds"):
        CampaignConfig(seeds=(0.5,))
    with pytest.raises(ConfigError, match="dt"):
        CampaignConfig(dt=0.0)
    with pytest.raises(ConfigError, match="t_max"):
        CampaignConfig(t_max=-1.0)


def test_bad_json_names_the_file(tmp_path):
    path = tmp_path / "broken.json"
    path.write_text("{not json", encoding="utf-8")
    with pytest.raises(ConfigError, match="broken.json"):
        load_campaign(path)


def test_apply_overrides():
    cfg = CampaignConfig()
    out = apply_overrides(cfg, aeb_enabled=False, seeds=[7, 8], dt=None)
    assert out.aeb_enabled is False
    assert out.seeds == (7, 8)
    assert out.dt == cfg.dt
    assert cfg.aeb_enabled is True  # original untouched
    assert apply_overrides(cfg) == cfg
    with pytest.raises(ConfigError, match="unknown config overrides"):
        apply_overrides(cfg, budget=3)


def test_sensor_mapping():
    perfect = stack_config(CampaignConfig(sensor={"perfect": True})).sensor
    assert perfect.sigma == 0.0 and perfect.dropout_base == 0.0

    widened = stack_config(CampaignConfig(
        sensor={"perfect": True, "known_classes": ["pedestrian", "car", "animal"]})).sensor
    assert widened.sigma == 0.0
    assert widened.known_classes == frozenset({"pedestrian", "car", "animal"})

    noisy = stack_config(CampaignConfig(sensor={"sigma": 0.2})).sensor
    assert noisy.sigma == 0.2


def test_stack_and_episode_config_propagation():
    cfg = CampaignConfig(aeb_enabled=False, shield_enabled=False,
                         ground_truth_aeb=True, dt=0.1, t_max=30.0)
    sc = stack_config(cfg)
    assert not sc.aeb_enabled and not sc.shield_enabled
    assert sc.ground_truth_aeb
    assert sc.rulebase is None
    ec = episode_config(cfg)
    assert (ec.dt, ec.t_max) == (0.1, 30.0)
    assert ec.config_hash == config_hash(cfg)


def test_store_is_canonical(tmp_path):
    cfg = CampaignConfig(sensor={"sigma": 0.1, "dropout_base": 0.05})
    p1, p2 = tmp_path / "a.json", tmp_path / "b.json"
    store_campaign(cfg, p1)
    store_campaign(load_campaign(p1), p2)
    assert p1.read_bytes() == p2.read_bytes()
    data = json.loads(p1.read_text())
    assert list(data["sensor"]) == ["dropout_base", "sigma"]
