import pytest
from pydantic import ValidationError

from app.dependencies import (
    RunDirectory,
    configure_logging,
    get_oracle,
    load_run_config,
    parse_flat_config,
    parse_overrides,
    style_of,
)
from app.errors import ConfigError, MissingFileError
from app.schemas import BackboneConfig, BackboneKind, IbtConfig, RewardSign
from app.services.metrics import DeskOracle, ExternalCommandOracle

from conftest import CONFIG_DIR

RUN_CONF = CONFIG_DIR / "run.conf"


class TestRunConfig:
    def test_toy_config(self):
        config = load_run_config(RUN_CONF)
        assert config.style.as_tuple() == ("informal", "formal")
        assert config.classifier.filter_widths == (1, 2, 3)
        assert config.backbone.d_model == 64
        assert config.ibt.valid_every == 50
        assert config.reward.sign == RewardSign.SELF_CRITICAL
        assert config.metric.oracle == "desk"

    def test_defaults_without_file(self, monkeypatch):
        monkeypatch.delenv("STYLEHELPER_CONFIG", raising=False)
        config = load_run_config()
        assert config.sigma == 0.85
        assert (config.selection.sigma_c, config.selection.sigma_s) == (0.15, 0.9)

    def test_seed_reaches_every_section(self):
        config = load_run_config(RUN_CONF, {"seed": 7})
        seeds = {config.classifier.seed, config.backbone.seed, config.pretrain.seed, config.ibt.seed, config.offline.seed}
        assert seeds == {7}

    def test_overrides_beat_the_file(self):
        config = load_run_config(RUN_CONF, {"backbone.d_model": 32, "lambda.sc": 0.5})
        assert config.backbone.d_model == 32
        assert config.reward.lambda_sc == 0.5

    def test_learned_weight_alias(self, tmp_path):
        path = tmp_path / "run.conf"
        path.write_text("lambda.bleurt = 0.25\n", encoding="utf-8")
        assert load_run_config(path).reward.lambda_learned == 0.25

    def test_ibt_shares_reward_settings(self):
        config = load_run_config(RUN_CONF, {"reward.sc1": False})
        assert config.ibt.rewards == config.reward
        assert config.ibt.rewards.sc1 is False

    @pytest.mark.parametrize(
        "value,expected",
        [("paper", RewardSign.PAPER), ("literal", RewardSign.PAPER), ("self_critical", RewardSign.SELF_CRITICAL)],
    )
    def test_reward_sign_values(self, value, expected):
        config = load_run_config(RUN_CONF, {"reward.sign": value})
        assert config.reward.sign == expected
        assert config.ibt.rewards.sign == expected

    def test_reward_sign_in_a_config_file(self, tmp_path):
        path = tmp_path / "run.conf"
        path.write_text("reward.sign = paper\n", encoding="utf-8")
        assert load_run_config(path).reward.sign == RewardSign.PAPER

    def test_env_names_the_file(self, monkeypatch):
        monkeypatch.setenv("STYLEHELPER_CONFIG", str(RUN_CONF))
        assert load_run_config().backbone.d_model == 64

    def test_unknown_key(self):
        with pytest.raises(ConfigError) as info:
            load_run_config(RUN_CONF, {"ibt.stepz": 3})
        assert "ibt.stepz" in info.value.detail

    def test_bad_value(self):
        with pytest.raises(ConfigError):
            load_run_config(None, {"sigma": 1.5})

    def test_missing_file(self, tmp_path):
        with pytest.raises(MissingFileError):
            load_run_config(tmp_path / "absent.conf")

    def test_echo_reloads_to_the_same_config(self, tmp_path):
        config = load_run_config(RUN_CONF, {"backbone.learning_rate": 1e-5})
        echo = RunDirectory(tmp_path).echo(config)
        assert load_run_config(echo) == config


class TestFlatFormat:
    def test_values_are_typed(self):
        values = parse_flat_config("# comment\n\nibt.steps = 10\nreward.bleu = false\nclassifier.filter_widths = [2, 3]\n")
        assert values == {"ibt.steps": 10, "reward.bleu": False, "classifier.filter_widths": [2, 3]}

    def test_line_without_equals(self):
        with pytest.raises(ConfigError) as info:
            parse_flat_config("seed = 1\nnonsense\n", source="run.conf")
        assert "run.conf:2" in info.value.detail

    def test_overrides(self):
        assert parse_overrides(["seed=3", "data.dir=/tmp/x"]) == {"seed": 3, "data.dir": "/tmp/x"}

    def test_override_without_equals(self):
        with pytest.raises(ConfigError):
            parse_overrides(["seed"])


class TestSchemaChecks:
    def test_validation_cadence(self):
        with pytest.raises(ValidationError):
            IbtConfig(steps=10, valid_every=20)

    def test_learning_rate_defaults(self):
        assert BackboneConfig().resolved_learning_rate == pytest.approx(3e-4)
        assert BackboneConfig(kind=BackboneKind.EXTERNAL, external_name="t5-small").resolved_learning_rate == pytest.approx(1e-5)
        assert BackboneConfig(learning_rate=0.0).resolved_learning_rate == 0.0


class TestProviders:
    def test_oracles(self):
        assert isinstance(get_oracle("desk"), DeskOracle)
        external = get_oracle("external:score --fast")
        assert isinstance(external, ExternalCommandOracle)
        assert external.command == "score --fast"

    def test_unknown_oracle(self):
        with pytest.raises(ConfigError):
            get_oracle("bleurt")

    def test_style_of(self):
        assert style_of("data/yelp/train.negative") == "negative"
        with pytest.raises(ConfigError):
            style_of("pairs")

    def test_unknown_log_level(self):
        with pytest.raises(ConfigError):
            configure_logging("LOUD")

    def test_run_directory_layout(self, tmp_path):
        run = RunDirectory(tmp_path / "run").prepare()
        assert run.checkpoints.is_dir() and run.pairs.is_dir()
        assert run.checkpoint("ibt_a") == tmp_path / "run" / "checkpoints" / "ibt_a.pt"
        assert run.stage_log("offline").name == "logs.offline.tsv"
