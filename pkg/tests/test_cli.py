import csv
import json

import pytest

from feederkron.cli import main
from feederkron.generate import GenParams, generate
from feederkron.grid import load_network, save_network
from feederkron.kron import reduced_topology
from feederkron.model import load_model
from feederkron.radial import is_tree
from feederkron.scenario import write_library_csv


@pytest.fixture(scope="module")
def feeder_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("gen")
    assert main(["generate", "-n", "100", "--seed", "7", "-o", str(out)]) == 0
    return out


def reduce_args(feeder_dir, out, *extra):
    return ["reduce", str(feeder_dir / "net.json"), str(feeder_dir / "scenarios.csv"),
            "-o", str(out), *extra]


def read_trace(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def test_generate_is_deterministic(tmp_path, feeder_dir):
    assert main(["generate", "-n", "100", "--seed", "7", "-o", str(tmp_path)]) == 0
    for name in ("net.json", "scenarios.csv"):
        assert (tmp_path / name).read_bytes() == (feeder_dir / name).read_bytes()


def test_generate_minimal(tmp_path):
    assert main(["generate", "-n", "2", "-o", str(tmp_path)]) == 0
    assert load_network(tmp_path / "net.json").n == 2


def test_generate_invalid_fractions(tmp_path, capsys):
    code = main(["generate", "--frac-two-phase", "0.9", "--frac-one-phase", "0.9",
                 "-o", str(tmp_path)])
    assert code == 2
    assert json.loads(capsys.readouterr().err)["error"] == "ValidationError"


def test_reduce_artifacts(tmp_path, feeder_dir):
    assert main(reduce_args(feeder_dir, tmp_path, "--e-bar", "0.001")) == 0
    model = load_model(tmp_path / "reduced.json")
    assert max(model.train_max_err.values()) <= 1e-3
    rows = read_trace(tmp_path / "trace.csv")
    assert list(rows[0]) == ["iteration", "s", "r", "smice", "max_err_low", "max_err_high",
                             "supernode_count", "candidate_count", "feasible_count", "wall_time_ms"]
    manifest = json.loads((tmp_path / "manifest.json").read_text())
    assert manifest["config"]["e_bar"] == 0.001
    assert manifest["result"]["iterations"] == len(rows)
    assert set(manifest["wall_time_s"]) >= {"load", "reduce", "total"}

    # reloaded model reproduces the final trace errors
    report = tmp_path / "report.csv"
    assert main(["validate", str(feeder_dir / "net.json"), str(tmp_path / "reduced.json"),
                 str(feeder_dir / "scenarios.csv"), "-o", str(report)]) == 0
    got = {r["scenario_id"]: float(r["max_err"]) for r in read_trace(report)}
    for sid in ("low", "high"):
        assert abs(got[sid] - float(rows[-1][f"max_err_{sid}"])) <= 1e-12


def test_zero_bound_on_fully_loaded_feeder(tmp_path):
    net, lib = generate(GenParams(n=40, seed=2, load_fraction=1.0))
    save_network(net, tmp_path / "net.json")
    write_library_csv(tmp_path / "s.csv", lib, mode="pq")
    assert main(["reduce", str(tmp_path / "net.json"), str(tmp_path / "s.csv"),
                 "-o", str(tmp_path / "out"), "--e-bar", "0", "--objective", "mag"]) == 0
    assert read_trace(tmp_path / "out" / "trace.csv") == []
    assert load_model(tmp_path / "out" / "reduced.json").reduction == 0.0


def test_radialize_flag(tmp_path, feeder_dir):
    assert main(reduce_args(feeder_dir, tmp_path, "--e-bar", "0.003", "--radialize")) == 0
    data = json.loads((tmp_path / "reduced.json").read_text())
    assert data["radial"] is True and "reinserted" in data
    assert is_tree(reduced_topology(load_model(tmp_path / "reduced.json").kron))


def test_workers_byte_identical(tmp_path, feeder_dir, monkeypatch):
    assert main(reduce_args(feeder_dir, tmp_path / "w1", "--e-bar", "0.002", "--workers", "1")) == 0
    monkeypatch.setenv("FEEDERKRON_WORKERS", "4")
    assert main(reduce_args(feeder_dir, tmp_path / "w4", "--e-bar", "0.002")) == 0
    manifest = json.loads((tmp_path / "w4" / "manifest.json").read_text())
    assert manifest["config"]["workers"] == 4
    assert (tmp_path / "w1" / "reduced.json").read_bytes() == \
        (tmp_path / "w4" / "reduced.json").read_bytes()


def test_bad_worker_env(tmp_path, feeder_dir, monkeypatch):
    monkeypatch.setenv("FEEDERKRON_WORKERS", "many")
    assert main(reduce_args(feeder_dir, tmp_path, "--e-bar", "0.001")) == 2


def test_target_reduction_and_complex(tmp_path, feeder_dir):
    assert main(reduce_args(feeder_dir, tmp_path, "--e-bar", "0.01", "--objective", "complex",
                            "--target-reduction", "0.2")) == 0
    model = load_model(tmp_path / "reduced.json")
    assert model.objective == "complex" and model.reduction == pytest.approx(0.2)


def test_seed_trace_replay(tmp_path, feeder_dir):
    assert main(reduce_args(feeder_dir, tmp_path / "a", "--e-bar", "0.001")) == 0
    lines = (tmp_path / "a" / "trace.csv").read_text().splitlines()
    (tmp_path / "part.csv").write_text("\n".join(lines[:11]) + "\n")
    assert main(reduce_args(feeder_dir, tmp_path / "b", "--e-bar", "0.001",
                            "--seed-trace", str(tmp_path / "part.csv"))) == 0
    assert (tmp_path / "a" / "reduced.json").read_bytes() == (tmp_path / "b" / "reduced.json").read_bytes()


def test_invalid_network_exit_code(tmp_path, feeder_dir, capsys):
    data = json.loads((feeder_dir / "net.json").read_text())
    data["branches"].append(dict(data["branches"][0]))
    (tmp_path / "net.json").write_text(json.dumps(data))
    code = main(["reduce", str(tmp_path / "net.json"), str(feeder_dir / "scenarios.csv"),
                 "--e-bar", "0.001", "-o", str(tmp_path)])
    assert code == 2
    assert "duplicate" in json.loads(capsys.readouterr().err)["message"]


def test_solver_failure_exit_code(tmp_path, feeder_dir):
    net = load_network(feeder_dir / "net.json")
    with open(tmp_path / "s.csv", "w") as fh:
        fh.write("scenario_id,node_id,phase,p_pu,q_pu\n")
        for p in net.nodes[5].phases.indices:
            fh.write(f"x,5,{'abc'[p]},50.0,0.0\n")
    code = main(["reduce", str(feeder_dir / "net.json"), str(tmp_path / "s.csv"),
                 "--e-bar", "0.001", "-o", str(tmp_path)])
    assert code == 3


def test_validate_mismatch(tmp_path, feeder_dir):
    assert main(reduce_args(feeder_dir, tmp_path, "--e-bar", "0.001")) == 0
    assert main(["generate", "-n", "30", "-o", str(tmp_path / "small")]) == 0
    code = main(["validate", str(tmp_path / "small" / "net.json"), str(tmp_path / "reduced.json"),
                 str(tmp_path / "small" / "scenarios.csv"), "-o", str(tmp_path / "r.csv")])
    assert code == 2


def test_info(tmp_path, feeder_dir, capsys):
    assert main(reduce_args(feeder_dir, tmp_path, "--e-bar", "0.001")) == 0
    assert main(["info", str(feeder_dir / "net.json"), str(tmp_path / "reduced.json")]) == 0
    out = capsys.readouterr().out
    assert "100 nodes" in out and "reduction" in out


def test_many_scenario_validation(tmp_path, feeder_dir):
    net, lib = generate(GenParams(n=100, seed=7, n_scenarios=24))
    write_library_csv(tmp_path / "week.csv", lib, mode="pq")
    assert main(reduce_args(feeder_dir, tmp_path, "--e-bar", "0.001")) == 0
    assert main(["validate", str(feeder_dir / "net.json"), str(tmp_path / "reduced.json"),
                 str(tmp_path / "week.csv"), "-o", str(tmp_path / "report.csv")]) == 0
    rows = read_trace(tmp_path / "report.csv")
    assert len(rows) == 24
    assert all(float(r["max_err"]) <= 1e-3 + 1e-12 for r in rows if r["training"] == "1")
