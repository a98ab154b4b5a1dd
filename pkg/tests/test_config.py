import pytest
import yaml

from crossfeat.config import SCHEMA, ConfigError, load_config


def test_defaults_resolve():
    cfg = load_config()
    r = cfg.resolved()
    assert set(SCHEMA) <= set(r)
    assert r["descriptor.descB.dim"] == 256 and r["descriptor.descB.style"] == "superpoint"
    assert r["descriptor.descA.seed"] == 1 and r["descriptor.descB.seed"] == 2
    assert r["detector.detA.private_fraction"] == 0.5
    assert yaml.safe_load(cfg.dump()) == r


def test_file_include_and_override(tmp_path):
    (tmp_path / "base.yaml").write_text("seed: 3\naugment:\n  epochs: 2\nscene.num_landmarks: 40\n")
    (tmp_path / "run.yaml").write_text("include: base.yaml\naugment.epochs: 5\n")
    cfg = load_config(str(tmp_path / "run.yaml"), {"translate.gamma": 0})
    assert cfg["seed"] == 3 and cfg["augment.epochs"] == 5 and cfg["scene.num_landmarks"] == 40
    assert cfg["translate.gamma"] == 0.0 and isinstance(cfg["translate.gamma"], float)
    assert cfg.augment_config().epochs == 5 and cfg.scene_spec().seed == 3


@pytest.mark.parametrize("overrides", [
    {"augment.epoch": 3},
    {"detector.detC.detect_prob": 0.5},
    {"detector.detA.colour": 1.0},
    {"seed": "three"},
    {"seed": True},
    {"match.mutual_check": "yes"},
    {"descriptor.descA.style": "orb"},
    {"detectors": ["a", "a"]},
    {"detector.detA.detect_prob": 1.5},
    {"scene.num_landmarks": 4},
])
def test_invalid_configs_are_rejected(overrides):
    with pytest.raises(ConfigError):
        load_config(overrides=overrides)


def test_include_cycle_and_bad_files(tmp_path):
    (tmp_path / "a.yaml").write_text("include: b.yaml\n")
    (tmp_path / "b.yaml").write_text("include: a.yaml\n")
    with pytest.raises(ConfigError, match="cycle"):
        load_config(str(tmp_path / "a.yaml"))
    (tmp_path / "list.yaml").write_text("- 1\n- 2\n")
    with pytest.raises(ConfigError):
        load_config(str(tmp_path / "list.yaml"))
    with pytest.raises(ConfigError):
        load_config(str(tmp_path / "missing.yaml"))


def test_profiles_follow_config():
    cfg = load_config(overrides={"detectors": "x,y", "detector.y.private_fraction": 0.25,
                                 "descriptors": ["d1"], "descriptor.d1.dim": 32})
    dets = cfg.detector_profiles()
    assert [d.id for d in dets] == ["x", "y"] and dets[1].private_fraction == 0.25
    (d1,) = cfg.descriptor_profiles()
    assert d1.output_dim == 32 and d1.style == "sift" and d1.seed == 1
