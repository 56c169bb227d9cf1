import json

import pytest

from gdig.config import PipelineConfig, load_config, parse_config, stable_hash
from gdig.data import read_examples, read_records, record_to_example, write_records
from gdig.errors import FormatError, InputError
from gdig.toylm import BOS, EOS, Example


def test_text_and_token_records(tmp_path):
    path = tmp_path / "d.jsonl"
    write_records([{"id": "a", "src": "abc", "tgt": "def", "trg_lang": "German"},
                   {"id": "b", "prompt_tokens": [BOS, 1], "response_tokens": [2, EOS]}], path)
    ex = read_examples(path)
    assert ex[0] == Example.from_text("a", "abc", "def", "German")
    assert ex[1] == Example("b", [BOS, 1], [2, EOS])


@pytest.mark.parametrize("line, needle", [
    ("{not json", "invalid JSON"),
    ('{"src": "a", "tgt": "b"}', "missing 'id'"),
    ('{"id": "x"}', "src/tgt"),
    ('{"id": "x", "prompt_tokens": [1], "response_tokens": [999]}', "token ids"),
    ('[1, 2]', "JSON object"),
])
def test_parse_errors_name_line(tmp_path, line, needle):
    path = tmp_path / "d.jsonl"
    path.write_text('{"id": "ok", "src": "a", "tgt": "b"}\n\n' + line + "\n")
    with pytest.raises(FormatError) as err:
        read_records(path)
    assert f"{path}:3:" in str(err.value) and needle in str(err.value)


def test_duplicate_ids(tmp_path):
    path = tmp_path / "d.jsonl"
    path.write_text('{"id": "a", "src": "x", "tgt": "y"}\n{"id": "a", "src": "x", "tgt": "y"}\n')
    with pytest.raises(FormatError, match=":2: duplicate"):
        read_records(path)


def test_record_to_example_defaults():
    assert record_to_example({"id": 3, "src": "a", "tgt": "b"}).id == "3"


BASE = """
[data]
candidates = c.jsonl
seeds = s.jsonl
valid = v.jsonl
"""


def test_config_defaults(tmp_path):
    cfg = parse_config(BASE, tmp_path)
    assert cfg.data.candidates == str(tmp_path / "c.jsonl")
    assert cfg.model.context_window == 8 and cfg.train.learning_rate == 1e-3
    assert cfg.influence.selector == "stride:3" and cfg.influence.n_seeds == 256
    assert cfg.influence.damping == 1e-3 and cfg.influence.quality_mode == "strict"
    assert cfg.diversity.selector == "final_only" and cfg.diversity.n_select == 256


def test_config_overrides(tmp_path):
    text = BASE + "[model]\ncontext_window = 20\ninit_seed = 4\n[train]\noptimizer = adam\nadam_betas = 0.8, 0.9\n" \
                  "[influence]\ndamping = 0.5\n[output]\ndir = res\n"
    cfg = parse_config(text, tmp_path)
    assert cfg.model.context_window == 20 and cfg.init.init_seed == 4
    assert cfg.train.optimizer == "adam" and cfg.train.adam_betas == (0.8, 0.9)
    assert cfg.influence.damping == 0.5 and cfg.out_dir == str(tmp_path / "res")
    seeded = cfg.with_seed(9)
    assert (seeded.train.seed, seeded.diversity.seed, seeded.init.init_seed) == (9, 9, 9)


@pytest.mark.parametrize("extra, msg", [
    ("[bogus]\nx = 1\n", "unknown config section"),
    ("[train]\nlr = 1\n", "unknown key"),
    ("[train]\nepochs = three\n", "not a valid int"),
    ("[influence]\ndamping = 0\n", "damping"),
    ("[train]\noptimizer = lbfgs\n", "optimizer"),
])
def test_config_errors(tmp_path, extra, msg):
    with pytest.raises(InputError, match=msg):
        parse_config(BASE + extra, tmp_path)


def test_config_missing_data_key(tmp_path):
    with pytest.raises(InputError, match="missing required key 'valid'"):
        parse_config("[data]\ncandidates = a\nseeds = b\n", tmp_path)


def test_load_config_and_paths(tmp_path):
    (tmp_path / "cfg.ini").write_text(BASE)
    cfg = load_config(tmp_path / "cfg.ini")
    assert isinstance(cfg, PipelineConfig)
    with pytest.raises(InputError, match="file not found"):
        cfg.check_paths()
    with pytest.raises(InputError):
        load_config(tmp_path / "missing.ini")


def test_stable_hash():
    assert stable_hash({"a": 1, "b": 2}) == stable_hash({"b": 2, "a": 1})
    assert stable_hash(1) != stable_hash(2)
    assert json.loads(json.dumps(stable_hash("x"))) == stable_hash("x")
