import json
from pathlib import Path

import pytest

from surfelpose.config import ConfigError, RunConfig, config_from_dict, load_config, stage_seed
from surfelpose.metrics import AUC_CAP


def test_defaults_carry_method_constants():
    cfg = config_from_dict({"output_dir": "out"})
    a = cfg.association
    assert (a.overlap_threshold, a.band, a.n, a.sigma_object) == (0.3, (0.4, 0.5), 10, 10)
    assert cfg.metrics.auc_cap == AUC_CAP == 0.1
    assert cfg.method == "ekf" and cfg.max_skip_fraction == 0.2


def test_nested_sections_are_parsed():
    cfg = config_from_dict({"output_dir": "o", "registration": {"omega": 0.5}, "oracle": {"sigma_t": 0.01},
                            "association": {"band": [0.35, 0.5]}})
    assert cfg.registration.omega == 0.5 and cfg.oracle.sigma_t == 0.01
    assert cfg.association.band == (0.35, 0.5)


@pytest.mark.parametrize("data,where", [
    ({"output_dir": "o", "bogus": 1}, "bogus"),
    ({"output_dir": "o", "registration": {"omga": 0.1}}, "config.registration"),
    ({"output_dir": "o", "association": {"overlap_threshold": 1.0}}, "overlap_threshold"),
    ({"output_dir": "o", "method": "magic"}, "method"),
    ({"output_dir": "o", "oracle": {"p_out": 2}}, "p_out"),
    ({"output_dir": "o", "scene_noise": {"sigma": 1}}, "scene_noise"),
    ({"output_dir": "o", "provider": {"kind": "subprocess"}}, "command"),
    ({"output_dir": "o", "metrics": {"auc_cap": 0}}, "auc_cap"),
    ({"output_dir": "o", "registration": 3}, "expected an object"),
    ({}, "output_dir"),
])
def test_invalid_configs_rejected(data, where):
    with pytest.raises(ConfigError, match=where):
        config_from_dict(data)


def test_load_config_errors(tmp_path):
    with pytest.raises(ConfigError, match="not found"):
        load_config(tmp_path / "missing.json")
    (tmp_path / "bad.json").write_text("{nope")
    with pytest.raises(ConfigError, match="invalid JSON"):
        load_config(tmp_path / "bad.json")
    (tmp_path / "ok.json").write_text(json.dumps({"output_dir": "x", "seed": 4}))
    cfg, base = load_config(tmp_path / "ok.json")
    assert cfg.seed == 4 and base == tmp_path


def test_round_trip_through_json():
    cfg = config_from_dict({"output_dir": "o", "seed": 3, "detector": {"erode_px": 1}})
    back = config_from_dict(json.loads(json.dumps(cfg.to_json())))
    assert back == cfg and isinstance(back, RunConfig)


def test_example_config_parses():
    cfg, base = load_config(Path(__file__).parents[1] / "configs" / "example_run.json")
    assert cfg.oracle.p_out == 0.05 and cfg.detector.erode_px == 2


def test_stage_seeds():
    assert stage_seed(0, "oracle") == stage_seed(0, "oracle")
    assert stage_seed(0, "oracle") != stage_seed(0, "detector")
    assert stage_seed(0, "oracle") != stage_seed(1, "oracle")
    assert len({stage_seed(s, "scene") for s in range(200)}) == 200
