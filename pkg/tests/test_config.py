import pytest

from nodule3d.config import RunConfig, apply_overrides, dump_config, load_config
from nodule3d.exceptions import ConfigError


def test_defaults_round_trip(tmp_path):
    cfg = RunConfig().validate()
    path = tmp_path / "c.yaml"
    path.write_text(dump_config(cfg))
    assert load_config(path).to_dict() == cfg.to_dict()
    assert load_config().to_dict() == cfg.to_dict()


def test_defaults_follow_the_training_schedule():
    cfg = RunConfig()
    assert cfg.train.initial_lr == 0.01 and cfg.train.epochs == 100
    assert cfg.train.lr_drop_epochs == (50, 80) and cfg.train.lr_drop_factor == 0.1
    assert cfg.network.crop_side == 128 and cfg.network.anchors_mm == (10.0, 30.0, 60.0)


def test_file_and_overrides(tmp_path):
    path = tmp_path / "c.yaml"
    path.write_text("seed: 3\nnetwork:\n  crop_side: 32\n  group_channels: [4, 4, 8, 8, 8]\ntrain:\n  epochs: 5\n")
    cfg = load_config(path, ["train.epochs=7", "network.blocks_per_group=[1,1,1,1,1]", "eval.use_nms=false",
                             "data.spacing_mm=2"])
    assert cfg.seed == 3 and cfg.network.crop_side == 32
    assert cfg.network.group_channels == (4, 4, 8, 8, 8)
    assert cfg.network.blocks_per_group == (1, 1, 1, 1, 1)
    assert cfg.train.epochs == 7 and cfg.eval.use_nms is False
    assert cfg.data.spacing_mm == 2.0 and isinstance(cfg.data.spacing_mm, float)


def test_overrides_do_not_mutate_input():
    d = {"train": {"epochs": 1}}
    out = apply_overrides(d, ["train.epochs=2"])
    assert d == {"train": {"epochs": 1}} and out["train"]["epochs"] == 2


@pytest.mark.parametrize("overrides", [["nope.x=1"], ["train.bogus=1"], ["train.epochs=1.5"], ["train.epochs"],
                                       ["network.crop_side=20"], ["eval.use_nms=3"], ["train.epochs=0"],
                                       ["data.spacing_mm=-1"], ["eval.score_threshold=2"], ["=3"],
                                       ["train=3"]])
def test_invalid_configs(overrides):
    with pytest.raises(ConfigError):
        load_config(None, overrides)


def test_bad_files(tmp_path):
    with pytest.raises(ConfigError):
        load_config(tmp_path / "missing.yaml")
    (tmp_path / "list.yaml").write_text("- 1\n- 2\n")
    with pytest.raises(ConfigError):
        load_config(tmp_path / "list.yaml")
    (tmp_path / "broken.yaml").write_text("a: [1, 2\n")
    with pytest.raises(ConfigError):
        load_config(tmp_path / "broken.yaml")
