import pytest

from imdprompter.config import TrainConfig, dump_config, load_config, parse_config
from imdprompter.errors import ConfigError


def test_defaults():
    cfg = TrainConfig()
    assert (cfg.lr, cfg.batch_size, cfg.epochs, cfg.warmup_epochs) == (1e-4, 4, 100, 1)
    assert (cfg.lambda1, cfg.lambda2, cfg.lambda3) == (1.0, 0.1, 1.0)
    assert (cfg.focal_gamma, cfg.focal_alpha, cfg.k_max) == (2.0, 0.25, 4)
    assert (cfg.weight_decay, cfg.grad_clip) == (0.01, 1.0)


def test_parse_overrides_and_comments():
    cfg = parse_config("# tiny run\nlr = 0.001\naugment = false  # no flips\nforced_view = rgb\n")
    assert cfg.lr == 1e-3 and cfg.augment is False and cfg.forced_view == "rgb"


def test_dump_round_trip():
    cfg = TrainConfig(lr=3e-4, image_size=32, crop_size=24, augment=False)
    assert parse_config(dump_config(cfg)) == cfg
    assert TrainConfig.from_dict(cfg.to_dict()) == cfg


@pytest.mark.parametrize("text", [
    "lr = -1", "batch_size = 0", "nope = 1", "lr 1e-3", "augment = maybe", "image_size = 60",
    "focal_alpha = 1.5", "forced_view = depth", "embed_dim = 10",
])
def test_invalid_configs(text):
    with pytest.raises(ConfigError):
        parse_config(text)


def test_missing_file(tmp_path):
    with pytest.raises(ConfigError):
        load_config(tmp_path / "absent.cfg")
    (tmp_path / "ok.cfg").write_text("seed = 9\n")
    assert load_config(tmp_path / "ok.cfg").seed == 9
