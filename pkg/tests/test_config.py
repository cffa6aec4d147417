from pathlib import Path

import pytest

from textspotter.config import (
    Config,
    ConfigError,
    apply_overrides,
    config_from_dict,
    dump_config,
    load_config,
)

PRESET = Path(__file__).resolve().parents[1] / "configs" / "overfit.yaml"


def test_defaults_are_valid():
    cfg = load_config()
    assert cfg.model.num_queries == 100 and cfg.model.max_len == 25
    assert cfg.model.use_taqi and cfg.model.use_vlc


def test_yaml_round_trip(tmp_path):
    cfg = load_config(PRESET, ["train.seed=7"])
    path = tmp_path / "c.yaml"
    path.write_text(dump_config(cfg))
    again = load_config(path)
    assert again == cfg
    assert again.digest() == cfg.digest()


def test_overrides_parse_yaml_scalars():
    data = apply_overrides({}, ["train.lr=3e-4", "model.use_vlc=false", "data.image_size=[96, 64]"])
    cfg = config_from_dict(data)
    assert cfg.train.lr == 3e-4
    assert cfg.model.use_vlc is False
    assert cfg.data.image_size == [96, 64]


def test_digest_changes_with_content():
    assert Config().digest() != load_config(None, ["train.seed=1"]).digest()


@pytest.mark.parametrize(
    "overrides, message",
    [
        (["model.dmi=3"], "unknown config keys: model.dmi"),
        (["model.dim=30"], "divisible"),
        (["train.milestones=[5, 5]"], "strictly increasing"),
        (["model.use_taqi=1"], "boolean"),
        (["model.heads=2.5"], "integer"),
        (["train.lr=fast"], "number"),
        (["denoising.shift_ratio=1.0"], r"\[0, 1\)"),
        (["model.max_len=4"], "EOS"),
        (["seed"], "key=value"),
    ],
)
def test_invalid_configs_are_rejected(overrides, message):
    with pytest.raises(ConfigError, match=message):
        load_config(None, overrides)


def test_unparseable_yaml(tmp_path):
    path = tmp_path / "bad.yaml"
    path.write_text("model: [unclosed\n")
    with pytest.raises(ConfigError, match="cannot parse"):
        load_config(path)
