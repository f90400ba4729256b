import pytest

from dtir.config import RunConfig, dump_config, parse_config, parse_config_text
from dtir.errors import ConfigError, RangeError, UnknownKey


class TestDefaults:
    def test_empty_file(self, tmp_path):
        path = tmp_path / "empty.cfg"
        path.write_text("")
        cfg = parse_config(path)
        assert cfg == RunConfig()
        # learning rate and decay rate as stated in the implementation details
        assert cfg.lr == 5e-5 and cfg.a == 0.05
        assert cfg.lam == 0.2 and cfg.n_experts == 10 and cfg.T == 50 and cfg.mix_ratio == 0.1

    def test_none_path(self):
        assert parse_config(None) == RunConfig()


class TestParsing:
    def test_values_comments_and_alias(self):
        cfg = parse_config_text("""
            # a comment
            lambda = 0.5   # trailing comment
            steps=10
            use_orthog = false
            tasks = noise:0.1; mask:0.25
        """)
        assert cfg.lam == 0.5 and cfg.steps == 10 and cfg.use_orthog is False
        assert cfg.tasks == ("noise:0.1", "mask:0.25")

    def test_unknown_key(self):
        with pytest.raises(UnknownKey) as info:
            parse_config_text("seed = 1\nfrobnicate = 3\n")
        assert info.value.key == "frobnicate" and "line 2" in str(info.value)

    def test_field_name_behind_alias_is_rejected(self):
        with pytest.raises(UnknownKey):
            parse_config_text("lam = 0.1")

    @pytest.mark.parametrize("text,key", [("lambda = -1", "lambda"), ("mix_ratio = 1.0", "mix_ratio"),
                                          ("steps = x", "steps"), ("mode = dance", "mode"),
                                          ("tasks = fog:1", "tasks"), ("patch = 12", "patch"),
                                          ("orthog_max_ratio = 0", "orthog_max_ratio")])
    def test_range_errors(self, text, key):
        with pytest.raises(RangeError) as info:
            parse_config_text(text)
        assert info.value.key == key

    def test_missing_equals(self):
        with pytest.raises(ConfigError):
            parse_config_text("seed 3")

    def test_unreadable_file(self, tmp_path):
        with pytest.raises(ConfigError):
            parse_config(tmp_path / "nope.cfg")

    def test_dump_round_trip(self):
        cfg = RunConfig(seed=4, lam=0.1, tasks=("blur:3", "noise:0.2"), use_moe=False)
        assert parse_config_text(dump_config(cfg)) == cfg


class TestDerived:
    def test_overrides_ignore_none(self):
        cfg = RunConfig().with_overrides(seed=None, out_dir="x")
        assert cfg.seed == 0 and cfg.out_dir == "x"

    def test_finetune_config_carries_knobs(self):
        ft = RunConfig(lam=0.3, a=0.01, mix_ratio=0.2, rehearsal=0.0).finetune_config()
        assert (ft.lam, ft.a, ft.mix_ratio, ft.rehearsal) == (0.3, 0.01, 0.2, 0.0)

    def test_model_spec(self):
        spec = RunConfig(n_experts=3, channels=3).model_spec()
        assert spec.n_experts == 3 and spec.in_channels == 3


def test_uncapped_orthog_ratio():
    assert parse_config_text("orthog_max_ratio = inf").finetune_config().orthog_max_ratio == float("inf")
