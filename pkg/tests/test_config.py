from pathlib import Path

import pytest

from ntkmtl import config as C
from ntkmtl.bench import SynthSpec, default_net_spec
from ntkmtl.errors import ConfigError
from ntkmtl.trainer import TrainConfig
from ntkmtl.weighting import Strategy

DOCS = Path(__file__).resolve().parents[1] / "docs" / "config_reference.md"


def test_empty_document_gives_defaults():
    cfg = C.loads("")
    assert set(cfg.sections) == set(C.SCHEMA)
    assert cfg.section("train")["lr"] == C.SCHEMA["train"]["lr"][0]


def test_defaults_agree_with_library_defaults():
    # the config file and the Python API should describe the same default run
    cfg = C.loads("")
    data, spec = C.dataset(cfg)
    assert spec == SynthSpec()
    tc = C.train_config(cfg, data)
    want = TrainConfig(default_net_spec(spec), Strategy("LS"), iterations=10_000)
    assert tc == want


def test_unknown_section_named():
    with pytest.raises(ConfigError) as ei:
        C.loads("[model]\nwidth = 3\n")
    assert ei.value.key == "model" and "'model'" in str(ei.value)


def test_unknown_key_named():
    with pytest.raises(ConfigError) as ei:
        C.loads("[train]\nlearning_rate = 0.1\n", path="run.toml")
    assert ei.value.key == "train.learning_rate"
    assert "run.toml" in str(ei.value) and "train.learning_rate" in str(ei.value)


@pytest.mark.parametrize("text,key", [
    ("[train]\niterations = 1.5\n", "train.iterations"),
    ("[train]\nlr = true\n", "train.lr"),
    ("[net]\nactivation = 3\n", "net.activation"),
    ("[strategy]\nn = \"four\"\n", "strategy.n"),
    ("[bench]\nstl = 1\n", "bench.stl"),
    ("train = 3\n", "train"),
])
def test_type_errors_name_the_key(text, key):
    with pytest.raises(ConfigError) as ei:
        C.loads(text)
    assert ei.value.key == key


def test_int_accepted_for_float():
    assert C.loads("[train]\nlr = 1\n").section("train")["lr"] == 1


def test_invalid_values_surface_as_config_errors():
    with pytest.raises(ConfigError) as ei:
        C.strategy(C.loads("[strategy]\nname = \"NOPE\"\n"))
    assert ei.value.key == "strategy"
    with pytest.raises(ConfigError):
        C.train_config(C.loads("[net]\ndepth = 0\n"), C.dataset(C.loads(""))[0])
    with pytest.raises(ConfigError):
        C.synth_spec(C.loads("[data]\nnoise_std = -1.0\n"))


def test_bad_toml_and_missing_file(tmp_path):
    with pytest.raises(ConfigError):
        C.loads("[train\n")
    with pytest.raises(ConfigError) as ei:
        C.load(tmp_path / "absent.toml")
    assert "absent.toml" in str(ei.value)


def test_train_config_dict_round_trip():
    cfg = C.loads("[strategy]\nname = \"NTKMTL_SR\"\nn = 3\n[net]\nhead_hidden = [5]\n")
    tc = C.train_config(cfg, C.dataset(cfg)[0], seed=4)
    assert C.train_config_from_dict(C.train_config_to_dict(tc)) == tc
    spec = C.synth_spec(cfg, seed=9)
    assert C.synth_from_dict(C.synth_to_dict(spec)) == spec


def test_with_seed_pins_everything():
    cfg = C.with_seed(C.loads("[net]\nseed = 3\n"), 7)
    assert cfg.section("net")["seed"] == 7
    assert cfg.section("train")["seed"] == 7 and cfg.section("data")["seed"] == 7
    assert cfg.section("bench")["seeds"] == [7]


def test_reference_doc_is_current():
    text = C.reference_markdown()
    assert DOCS.read_text() == text + "\n", "regenerate docs/config_reference.md"
    for sec, keys in C.SCHEMA.items():
        assert f"## [{sec}]" in text
        for key in keys:
            assert f"| `{key}` |" in text
