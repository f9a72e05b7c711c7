import json
import subprocess
import sys

import numpy as np
import pytest

from mixhmm.cli import main
from mixhmm.core import (
    dataset_from_dict,
    fit_from_dict,
    model_from_dict,
    read_json,
    write_json,
)
from mixhmm.synthdata import GroundTruth

FAST = ["--restarts", "2", "--max-iters", "30", "--threads", "1"]


@pytest.fixture(scope="module")
def sim(tmp_path_factory):
    d = tmp_path_factory.mktemp("sim")
    data = d / "data.json"
    assert main(["simulate", "--paper-experiment", "--seed", "7", "--out", str(data)]) == 0
    return d, data


def test_simulate_writes_dataset_and_truth(sim):
    d, data = sim
    ds = dataset_from_dict(read_json(data))
    truth = GroundTruth.from_dict(read_json(d / "data.truth.json"))
    assert len(ds) == 200 and ds.dim == 1
    assert tuple(truth.ids) == tuple(ds.ids)


def test_fit_report_decode_pipeline(sim, tmp_path):
    _, data = sim
    fit = tmp_path / "fit.json"
    rc = main(["fit", "--data", str(data), "--components", "2", "--states", "2,2", "--personal-r", "--out", str(fit)] + FAST)
    assert rc == 0
    res = fit_from_dict(read_json(fit))
    spec, params, effects = model_from_dict(read_json(tmp_path / "fit.model.json"))
    assert params == res.params and spec.personal_state_offset
    trace = (tmp_path / "fit.trace.csv").read_text().splitlines()
    assert trace[0] == "iteration,elbo" and len(trace) == len(res.objective_trace) + 1

    out = tmp_path / "rep"
    assert main(["report", "--fit", str(fit), "--data", str(data), "--reference", str(sim[0] / "data.truth.json"), "--out", str(out)]) == 0
    rep = json.loads((out / "alignment.json").read_text())
    assert rep["max_abs_error"]["A"] < 0.05
    assert rep["cluster_purity"] >= 0.95
    assert (out / "summary.csv").read_text().startswith("component,state,group")
    lines = (out / "trajectories.jsonl").read_text().splitlines()
    assert len(lines) == 200

    paths = tmp_path / "paths.jsonl"
    assert main(["decode", "--data", str(data), "--model", str(tmp_path / "fit.model.json"), "--out", str(paths)]) == 0
    recs = [json.loads(x) for x in paths.read_text().splitlines()]
    assert [r["label"] for r in recs] == res.labels.tolist()
    assert [r["path"] for r in recs] == [p.tolist() for p in res.paths]


def test_identical_runs_are_byte_identical(sim, tmp_path):
    _, data = sim
    outs = []
    for name, threads in (("a", "1"), ("b", "1"), ("c", "3")):
        out = tmp_path / f"{name}.json"
        args = ["fit", "--data", str(data), "--components", "2", "--personal-r", "--out", str(out), "--restarts", "3", "--max-iters", "20", "--threads", threads]
        assert main(args) == 0
        outs.append([(tmp_path / f"{name}{s}").read_bytes() for s in (".json", ".model.json", ".trace.csv")])
    assert outs[0] == outs[1] == outs[2]
    again = tmp_path / "again.json"
    assert main(["simulate", "--paper-experiment", "--seed", "7", "--out", str(again)]) == 0
    assert again.read_bytes() == sim[1].read_bytes()


def test_simulate_from_model(tmp_path, sim):
    _, data = sim
    fit = tmp_path / "fit.json"
    assert main(["fit", "--data", str(data), "--components", "2", "--out", str(fit)] + FAST) == 0
    out = tmp_path / "resim.json"
    assert main(["simulate", "--model", str(tmp_path / "fit.model.json"), "--n", "5", "--len", "4", "--noise", "se", "--out", str(out)]) == 0
    ds = dataset_from_dict(read_json(out))
    assert len(ds) == 5 and all(s.length == 4 for s in ds)


def test_select_writes_table(tmp_path):
    data = tmp_path / "d.json"
    assert main(["simulate", "--paper-experiment", "--seed", "1", "--out", str(data)]) == 0
    out = tmp_path / "table.csv"
    assert main(["select", "--data", str(data), "--k-range", "1..2", "--states", "2", "--out", str(out)] + FAST) == 0
    lines = out.read_text().splitlines()
    assert lines[0].startswith("K,k,loglik") and len(lines) == 3
    assert (tmp_path / "table.txt").read_text().splitlines()[-1].startswith("selected:")


def test_mismatched_dimension_exits_2(tmp_path, capsys):
    bad = {"dim": 2, "sequences": [
        {"id": "a", "observations": [[1.0, 2.0], [1.0, 2.0]], "inputs": [0.0, 0.0]},
        {"id": "b", "observations": [[1.0, 2.0, 3.0]], "inputs": [0.0]},
    ]}
    path = tmp_path / "bad.json"
    write_json(bad, path)
    assert main(["fit", "--data", str(path), "--out", str(tmp_path / "f.json")]) == 2
    err = capsys.readouterr().err.strip().splitlines()
    assert err == ["sequence 'b': observations: dim mismatch: has D=3, dataset D=2"]
    assert not (tmp_path / "f.json").exists()


def test_negative_dose_exits_2(tmp_path, capsys):
    path = tmp_path / "bad.json"
    write_json({"dim": 1, "sequences": [{"id": "a", "observations": [[1.0], [2.0]], "inputs": [0.0, -3.0]}]}, path)
    assert main(["fit", "--data", str(path), "--out", str(tmp_path / "f.json")]) == 2
    assert "negative dose" in capsys.readouterr().err


@pytest.mark.parametrize(
    "argv",
    [
        ["fit", "--components", "2"],
        ["fit", "--data", "x.json", "--out", "y.json", "--restarts", "zero"],
        ["fit", "--data", "x.json", "--out", "y.json", "--restarts", "0"],
        ["frobnicate"],
        ["simulate", "--out", "x.json"],
        ["select", "--data", "x.json", "--k-range", "3..1", "--out", "t.csv"],
    ],
)
def test_bad_flags_exit_4(argv, tmp_path, sim, capsys):
    argv = [a if a != "x.json" else str(sim[1]) for a in argv]
    argv = [str(tmp_path / a) if a in ("y.json", "t.csv") else a for a in argv]
    assert main(argv) == 4
    assert capsys.readouterr().err


def test_states_count_mismatch_is_flag_error(sim, tmp_path):
    assert main(["fit", "--data", str(sim[1]), "--components", "2", "--states", "2,2,2", "--out", str(tmp_path / "f.json")]) == 4


def test_console_script_help():
    out = subprocess.run([sys.executable, "-m", "mixhmm.cli", "--help"], capture_output=True, text=True)
    assert out.returncode == 0
    for cmd in ("simulate", "fit", "decode", "select", "report"):
        assert cmd in out.stdout


def test_csv_input(tmp_path):
    path = tmp_path / "long.csv"
    rows = ["id,t,feature_index,value,dose"]
    rng = np.random.default_rng(0)
    for i in range(6):
        for t in range(5):
            for j in range(2):
                val = "" if rng.random() < 0.1 else f"{rng.normal():.4f}"
                rows.append(f"p{i},{t},{j},{val},{t * 10}")
    path.write_text("\n".join(rows) + "\n")
    out = tmp_path / "fit.json"
    assert main(["fit", "--data", str(path), "--inputs", "--states", "2", "--out", str(out)] + FAST) == 0
    assert fit_from_dict(read_json(out)).n_sequences == 6
