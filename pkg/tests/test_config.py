import pytest

from shared.config import EncoderConfig, RunConfig, build_run_config, parse_override, read_config_file
from shared.errors import ConfigError


def test_defaults():
    cfg = RunConfig()
    assert cfg.train.lr == 1e-3
    assert cfg.encoder.num_adapters == 2 * cfg.encoder.num_layers
    assert cfg.train.query_k == cfg.train.shots
    assert cfg.conditioning.fisher_mode == "batch"


def test_adapter_param_count():
    cfg = EncoderConfig(vocab_size=20, model_dim=8, adapter_bottleneck_dim=3)
    assert cfg.adapter_param_count == 8 * 3 + 3 + 3 * 8 + 8


def test_config_file_with_comments(tmp_path):
    path = tmp_path / "run.cfg"
    path.write_text("# comment\n\ntrain.lr = 0.0003  # inline\neval.shots = 2, 4\n"
                    "train.query_shots = none\nconditioning.adapt_linear = true\n")
    cfg = build_run_config(read_config_file(str(path)))
    assert cfg.train.lr == pytest.approx(3e-4)
    assert cfg.eval.shots == (2, 4)
    assert cfg.train.query_shots is None
    assert cfg.conditioning.adapt_linear is True


def test_malformed_line(tmp_path):
    path = tmp_path / "bad.cfg"
    path.write_text("train.lr 0.1\n")
    with pytest.raises(ConfigError, match="bad.cfg:1"):
        read_config_file(str(path))


@pytest.mark.parametrize("key", ["train.nope", "nosection.lr", "train"])
def test_unknown_keys(key):
    with pytest.raises(ConfigError, match="unknown config key"):
        build_run_config({key: "1"})


def test_invalid_values_become_config_errors():
    with pytest.raises(ConfigError):
        build_run_config({"conditioning.fisher_mode": "full"})
    with pytest.raises(ConfigError):
        build_run_config({"encoder.model_dim": "10", "encoder.num_heads": "4"})
    with pytest.raises(ConfigError):
        build_run_config({"train.episodes_per_step": "0"})
    with pytest.raises(ConfigError):
        build_run_config({"train.lr": "fast"})


def test_parse_override():
    assert parse_override("train.seed = 4") == ("train.seed", "4")
    with pytest.raises(ConfigError):
        parse_override("train.seed")


def test_flat_lists_every_key():
    flat = RunConfig().flat()
    assert flat["train.adam_betas"] == [0.9, 0.999]
    assert "samediff.proj_dim" in flat and "data.meta_test" in flat
    assert build_run_config({k: v for k, v in flat.items() if v is not None}).flat() == flat
