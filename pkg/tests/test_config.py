import json

import pytest

from tagnmt.config import ConfigError, ExperimentConfig, resolve


class TestPresets:
    def test_toy_defaults(self):
        cfg = ExperimentConfig.from_preset("toy")
        assert cfg.mode == "tagged" and cfg.seed == 0
        assert cfg.selflearn_config().decode.mode == "sample"

    def test_paper_settings(self):
        cfg = ExperimentConfig.from_preset("paper")
        mc = cfg.model_config(100)
        assert (mc.n_layers, mc.dropout, mc.embedding_dropout) == (6, 0.3, 0.2)
        tc = cfg.train_config()
        assert (tc.learning_rate, tc.warmup_steps, tc.batch_size_tokens) == (0.0003, 16000, 4096)
        assert cfg.merge_count == 12000
        sl = cfg.selflearn_config()
        assert (sl.n_rounds, sl.epochs_per_round, sl.decode.sample_size) == (5, 3, 5)
        assert cfg.decode_config().beam_size == 10

    def test_unknown_preset(self):
        with pytest.raises(ConfigError):
            ExperimentConfig.from_preset("huge")


class TestOverrides:
    def test_dotted_paths_and_json_values(self):
        cfg = ExperimentConfig.from_preset("toy", ["train.learning_rate=0.01", 'selflearn.decode.mode="beam"', "seed=4"])
        assert cfg.train_config().learning_rate == 0.01
        assert cfg.selflearn_config().decode.mode == "beam"
        assert cfg.train_config().seed == 4 and cfg.decode_config().seed == 4

    def test_bare_strings(self):
        assert ExperimentConfig.from_preset("toy", ["mode=source_only"]).mode == "source_only"

    @pytest.mark.parametrize("item", ["model.nope=1", "nope=1", "seed", "seed=-1", "mode=both",
                                      "train.patience=0", "selflearn.decode.mode=greedy", "model.n_heads=3"])
    def test_invalid(self, item):
        with pytest.raises(ConfigError):
            ExperimentConfig.from_preset("toy", [item])


class TestFiles:
    def test_round_trip(self, tmp_path):
        cfg = ExperimentConfig.from_preset("toy", ["seed=9", "train.max_steps=5"])
        cfg.save(tmp_path / "c.json")
        again = ExperimentConfig.load(tmp_path / "c.json")
        assert again.dumps() == cfg.dumps()

    def test_partial_file_inherits_preset(self, tmp_path):
        (tmp_path / "c.json").write_text(json.dumps({"preset": "paper", "train": {"patience": 3}}))
        cfg = resolve(str(tmp_path / "c.json"), None, ["seed=2"])
        assert cfg.train_config().patience == 3 and cfg.merge_count == 12000 and cfg.seed == 2

    def test_bad_json(self, tmp_path):
        (tmp_path / "c.json").write_text("{")
        with pytest.raises(ConfigError, match="invalid JSON"):
            ExperimentConfig.load(tmp_path / "c.json")

    def test_unknown_key_in_file(self, tmp_path):
        (tmp_path / "c.json").write_text(json.dumps({"train": {"lr": 1}}))
        with pytest.raises(ConfigError, match="train.lr"):
            ExperimentConfig.load(tmp_path / "c.json")
