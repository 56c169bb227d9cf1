import json
import subprocess
import sys

import pytest

from gdig.cli import cmd_evaluate, main
from gdig.config import load_config
from gdig.data import read_records, write_records
from gdig.errors import CacheError, StageError
from gdig.influence import load_matrix
from gdig.oracle import NoiseSpec, corpus_records
from gdig.pipeline import ARTIFACTS, Pipeline
from gdig.select import SelectionReport

CONFIG = """
[data]
candidates = candidates.jsonl
seeds = seeds.jsonl
valid = valid.jsonl
test = test.jsonl

[model]
embed_dim = 8
hidden_dim = 16

[train]
learning_rate = 0.001
epochs = 2
optimizer = adam

[influence]
n_seeds = 16
quality_mode = fraction
tau = {tau}

[diversity]
n_select = {n_select}
k_clusters = 8
proj_dim = 64

[output]
dir = out
"""


def write_workspace(root, tau=0.5, n_select=20):
    for name, (n, rate, seed) in {"candidates": (120, 0.1, 2), "seeds": (16, 0.0, 3),
                                  "valid": (20, 0.0, 4), "test": (10, 0.0, 5)}.items():
        recs, _ = corpus_records(NoiseSpec(n, rate, seed, id_prefix=name[0]))
        write_records(recs, root / f"{name}.jsonl")
    path = root / "cfg.ini"
    path.write_text(CONFIG.format(tau=tau, n_select=n_select))
    return path


@pytest.fixture
def workspace(tmp_path):
    return write_workspace(tmp_path)


def test_pipeline_end_to_end(workspace):
    cfg = load_config(workspace)
    report = Pipeline(cfg).run()
    out = workspace.parent / "out"
    for files in ARTIFACTS.values():
        for f in files:
            assert (out / f).exists(), f
    assert len(report.selected_ids) == 20
    assert set(report.selected_ids) <= set(report.quality_pass_ids)
    sel = read_records(out / "selected.jsonl")
    assert [r["id"] for r in sel] == report.selected_ids
    m = load_matrix(out / "influence.bin")
    assert m.scores.shape == (120, 16)
    assert SelectionReport.from_json((out / "report.json").read_text()) == report


def test_rerun_uses_cache(workspace, monkeypatch):
    cfg = load_config(workspace)
    Pipeline(cfg).run()
    out = workspace.parent / "out"
    before = {f: (out / f).read_bytes() for f in ("selected.jsonl", "report.json", "influence.bin")}

    def boom(self):
        raise AssertionError("stage recomputed")

    for stage in ("finetune", "grads", "influence", "select"):
        monkeypatch.setattr(Pipeline, "stage_" + stage, boom)
    Pipeline(cfg).run()
    assert {f: (out / f).read_bytes() for f in before} == before


def test_stale_cache(workspace):
    Pipeline(load_config(workspace)).run()
    text = workspace.read_text().replace("n_seeds = 16", "n_seeds = 8")
    workspace.write_text(text)
    cfg = load_config(workspace)
    with pytest.raises(CacheError):
        Pipeline(cfg).run("influence")
    report = Pipeline(cfg).run()
    assert load_matrix(workspace.parent / "out" / "influence.bin").scores.shape == (120, 8)
    assert len(report.selected_ids) == 20


def test_resume_without_cache(workspace):
    with pytest.raises(CacheError):
        Pipeline(load_config(workspace)).run("select")


def test_n_select_guard_names_filter(tmp_path):
    path = write_workspace(tmp_path, tau=1.0, n_select=120)
    with pytest.raises(StageError) as err:
        Pipeline(load_config(path)).run()
    assert err.value.stage == "quality_filter"


def test_identical_runs_byte_identical(tmp_path):
    outs = []
    for k in range(2):
        root = tmp_path / f"run{k}"
        root.mkdir()
        Pipeline(load_config(write_workspace(root))).run()
        outs.append({f: (root / "out" / f).read_bytes() for f in ("selected.jsonl", "report.json")})
    assert outs[0] == outs[1]


def test_cli_pipeline_and_stages(workspace, capsys):
    assert main(["pipeline", "--config", str(workspace)]) == 0
    assert "selected 20" in capsys.readouterr().out
    assert main(["select", "--config", str(workspace)]) == 0
    assert main(["evaluate", "--config", str(workspace)]) == 0
    rep = json.loads((workspace.parent / "out" / "eval.json").read_text())
    assert 0 <= rep["token_accuracy"] <= 1 and "t" in rep["ttest"]
    assert main(["pipeline", "--config", str(workspace), "--seed", "3", "--out", str(workspace.parent / "o3")]) == 0


def test_cli_errors_single_line(tmp_path, workspace, capsys):
    assert main(["pipeline", "--config", str(tmp_path / "nope.ini")]) == 2
    err = capsys.readouterr().err.strip()
    assert err.startswith("E_INPUT: ") and "\n" not in err
    assert main(["influence", "--config", str(workspace)]) == 2
    assert capsys.readouterr().err.startswith("E_CACHE: ")
    (tmp_path / "candidates.jsonl").write_text('{"id": 1, "src": "a"}\n')
    assert main(["pipeline", "--config", str(workspace)]) == 2
    err = capsys.readouterr().err
    assert err.startswith("E_FORMAT: ") and "candidates.jsonl:1" in err


def test_console_script_module(workspace):
    res = subprocess.run([sys.executable, "-m", "gdig.cli", "select", "--config", str(workspace)],
                         capture_output=True, text=True)
    assert res.returncode == 2 and res.stderr.startswith("E_CACHE:")


def test_cmd_evaluate_direct(workspace):
    Pipeline(load_config(workspace)).run("finetune", only=True)
    out = workspace.parent / "out"
    rep = cmd_evaluate(out / "finetuned.gdlm", workspace.parent / "test.jsonl")
    assert len(rep.per_example) == 10 and rep.ttest is None
