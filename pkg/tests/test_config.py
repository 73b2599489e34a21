import pytest

from fslam.config import RunConfig, load_run_config
from fslam.errors import ConfigError


def test_defaults_are_valid():
    cfg = RunConfig()
    assert cfg.runs == 1 and cfg.source == "synthetic"
    assert not cfg.uses_images()
    assert RunConfig.from_dict(cfg.to_dict()) == cfg


@pytest.mark.parametrize("bad", [
    {"runs": 0}, {"runs": 1.5}, {"source": "tum"}, {"descriptors": "lift"}, {"gamma": 0},
    {"gamma": -2}, {"n_levels": 0}, {"scale_factor": 1.0}, {"th_low": 200, "th_high": 100},
    {"source": "kitti"}, {"source": "feature-file", "dataset": "x"}, {"descriptors": "external"},
    {"scene": {"path": "zigzag"}}, {"unknown_key": 1}, {"max_frames": 1},
    {"threshold_units": "bits"},
])
def test_invalid_configs(bad):
    with pytest.raises(ConfigError):
        RunConfig.from_dict(bad)


def test_paths_checked_on_validate(tmp_path):
    cfg = RunConfig(vocab=str(tmp_path / "missing.fslv"))
    with pytest.raises(ConfigError):
        cfg.validate()
    (tmp_path / "v.fslv").write_bytes(b"")
    RunConfig(vocab=str(tmp_path / "v.fslv")).validate()


def test_yaml_loading(tmp_path):
    p = tmp_path / "c.yaml"
    p.write_text("runs: 5\nseed: 3\ngamma: 0.5\nscene:\n  path: loop\n")
    cfg = load_run_config(p)
    assert (cfg.runs, cfg.seed, cfg.gamma) == (5, 3, 0.5)
    assert cfg.synthetic_scene().path == "loop"
    assert cfg.uses_images()
    for text in ("- a\n- b\n", "runs: [\n"):
        p.write_text(text)
        with pytest.raises(ConfigError):
            load_run_config(p)
    with pytest.raises(ConfigError):
        load_run_config(tmp_path / "none.yaml")
    p.write_text("")
    assert load_run_config(p) == RunConfig()


def test_builders():
    cfg = RunConfig(th_low=0.5, th_high=1.0, threshold_units="dimensionless", threshold_multiplier=0.1,
                    scale_factor=1.2, n_levels=8, seed=4)
    th = cfg.thresholds()
    assert th.th_low == pytest.approx(0.05) and th.th_high == pytest.approx(0.1)
    assert cfg.pyramid().n_levels == 8
    sc = cfg.system_config(seed=9)
    assert sc.seed == 9 and sc.tracking.ransac.seed == 9
    assert sc.tracking.init_threshold_px is None
    img = RunConfig(render=True, init_threshold_px=3.0).system_config()
    assert img.tracking.init_threshold_px == 3.0


def test_feature_file_source_forces_external(tmp_path):
    (tmp_path / "f.fslf").write_bytes(b"")
    cfg = RunConfig(source="feature-file", layout="kitti", dataset=str(tmp_path), features=str(tmp_path / "f.fslf"))
    assert cfg.descriptors == "external" and not cfg.uses_images()
