import json
import subprocess
import sys

import numpy as np
import pytest

from cyctop.cli import read_config, run
from cyctop.graph import betti1, load_graph_json, make_graph, save_connectivity, save_graph_json


def call(capsys, *argv):
    code = run([str(a) for a in argv])
    out = capsys.readouterr()
    summary = json.loads(out.out) if code == 0 else None
    return code, summary, out.err


@pytest.fixture
def tri_csv(tmp_path):
    m = np.array([[0, 0.9, 0.5], [0.9, 0, 0.1], [0.5, 0.1, 0]])
    p = tmp_path / "tri.csv"
    save_connectivity(m, p, "csv")
    return p


@pytest.fixture
def two_cycles(tmp_path):
    g = make_graph(4, [(0, 1), (0, 2), (1, 2), (1, 3), (2, 3)], [0.8, 0.3, 0.9, 0.7, 0.2])
    p = tmp_path / "two.json"
    save_graph_json(g, p)
    return p


def test_topology_triangle(capsys, tri_csv, tmp_path):
    code, s, _ = call(capsys, "topology", "--input", tri_csv, "--quantile", 1.0, "--output-dir", tmp_path / "o")
    assert code == 0
    assert (s["q"], s["betti1"], s["e"]) == (1, 1, 3)
    assert (tmp_path / "o" / "incidence.csv").read_text().splitlines()[1:] == ["0,0,1", "0,1,1", "0,2,1"]


def test_topology_is_deterministic(capsys, tri_csv, tmp_path):
    for d in ("a", "b"):
        call(capsys, "topology", "--input", tri_csv, "--quantile", 1.0, "--output-dir", tmp_path / d)
    for f in (tmp_path / "a").iterdir():
        assert f.read_bytes() == (tmp_path / "b" / f.name).read_bytes()


def test_epec(capsys, two_cycles, tmp_path):
    code, s, _ = call(capsys, "epec", "--input", two_cycles, "--k", 3, "--output-dir", tmp_path)
    assert code == 0 and s["q"] == 2 and s["effective_k"] == 1
    assert s["eigenvalues"] == pytest.approx([2.0])
    assert np.loadtxt(tmp_path / "epec.csv", delimiter=",").shape == (5, 3)


def test_simulate_two_cycles(capsys, two_cycles, tmp_path):
    code, s, _ = call(capsys, "simulate", "--input", two_cycles, "--pulse", 0, "--layers", 4,
                      "--output-dir", tmp_path)
    assert code == 0
    sup = [set(x) for x in json.loads((tmp_path / "supports.json").read_text())["supports"]]
    assert all(a < b or a == b for a, b in zip(sup, sup[1:]))
    assert sup[0] < sup[1] < sup[2]
    # edge 2 is the shared edge (1, 2); the pulse reaches the second triangle through it
    assert 2 in sup[1] and {3, 4} <= sup[2] and not {3, 4} & sup[1]
    assert s["support_sizes"] == [len(x) for x in sup]


def test_count_cycles_matches_betti(capsys, two_cycles):
    code, s, _ = call(capsys, "count-cycles", "--input", two_cycles)
    assert code == 0 and s["betti1"] == betti1(load_graph_json(two_cycles)) == 2


def test_pipeline_end_to_end(capsys, tmp_path):
    cfg = tmp_path / "cfg.txt"
    cfg.write_text(
        "# tiny run\nn_nodes = 10\nn_samples = 40\ndensity = 0.35\nquantile = 0.35\n"
        "n_layers = 1\nn_filters = 2\nn_heads = 1\nmlp_hidden = [4]\nmax_epochs = 3\nbatch_size = 8\n"
    )
    data, run_dir = tmp_path / "data", tmp_path / "run"
    code, s, _ = call(capsys, "gen-data", "--config", cfg, "--seed", 3, "--output-dir", data)
    assert code == 0 and s["n_samples"] == 40 and s["seed"] == 3
    manifest = json.loads((data / "manifest.json").read_text())
    assert len(manifest["samples"]) == 40

    code, s, _ = call(capsys, "train", "--input", data, "--config", cfg, "--k", 2, "--seed", 1,
                      "--output-dir", run_dir)
    assert code == 0 and s["use_epec"] is True
    first = (run_dir / "report.json").read_bytes()
    call(capsys, "train", "--input", data, "--config", cfg, "--k", 2, "--seed", 1, "--output-dir", run_dir)
    assert (run_dir / "report.json").read_bytes() == first

    code, e, _ = call(capsys, "eval", "--input", data, "--config", cfg, "--output-dir", run_dir)
    assert code == 0 and e["accuracy"] == pytest.approx(s["test_accuracy"])

    code, sal, _ = call(capsys, "saliency", "--input", data, "--config", cfg, "--threshold", 0.3,
                        "--output-dir", run_dir)
    assert code == 0 and 0 <= sal["mean_backbone_recovery"] <= 1
    mean = np.loadtxt(run_dir / "mean_saliency.csv", delimiter=",")
    assert mean.shape == (10, 10) and np.allclose(mean, mean.T)
    assert (run_dir / "betti.csv").read_text().startswith("sample,edges_kept,betti_backbone")

    code, s2, _ = call(capsys, "train", "--input", data, "--config", cfg, "--k", 2, "--no-epec",
                       "--output-dir", tmp_path / "noepec")
    assert code == 0 and s2["use_epec"] is False


class TestErrors:
    def test_unknown_flag(self, capsys):
        code, _, err = call(capsys, "topology", "--bogus")
        assert code == 1 and "usage" in err

    def test_unknown_command(self, capsys):
        assert call(capsys, "frobnicate")[0] == 1

    def test_missing_input_flag(self, capsys):
        assert call(capsys, "topology")[0] == 1

    def test_missing_file(self, capsys, tmp_path):
        code, _, err = call(capsys, "topology", "--input", tmp_path / "nope.csv")
        assert code == 2 and "not found" in err

    def test_malformed_config(self, capsys, tri_csv, tmp_path):
        cfg = tmp_path / "bad.cfg"
        cfg.write_text("quantile 0.5\n")
        code, _, err = call(capsys, "topology", "--input", tri_csv, "--config", cfg)
        assert code == 2 and "malformed" in err

    def test_unknown_config_key(self, capsys, tri_csv, tmp_path):
        cfg = tmp_path / "bad.json"
        cfg.write_text('{"colour": 1}')
        code, _, err = call(capsys, "topology", "--input", tri_csv, "--config", cfg)
        assert code == 2 and "colour" in err

    def test_asymmetric_matrix(self, capsys, tmp_path):
        p = tmp_path / "asym.csv"
        p.write_text("0,1\n0.5,0\n")
        code, _, err = call(capsys, "count-cycles", "--input", p)
        assert code == 2 and "asymmetric" in err

    def test_bad_pulse(self, capsys, tri_csv):
        assert call(capsys, "simulate", "--input", tri_csv, "--pulse", 99)[0] == 2


def test_config_precedence(tmp_path, capsys, tri_csv):
    cfg = tmp_path / "c.json"
    cfg.write_text('{"quantile": 0.34}')
    assert read_config(cfg) == {"quantile": 0.34}
    _, s, _ = call(capsys, "count-cycles", "--input", tri_csv, "--config", cfg)
    assert s["e"] == 2
    _, s, _ = call(capsys, "count-cycles", "--input", tri_csv, "--config", cfg, "--quantile", 1.0)
    assert s["e"] == 3


def test_console_entry_point(tri_csv):
    res = subprocess.run([sys.executable, "-m", "cyctop", "count-cycles", "--input", str(tri_csv),
                          "--quantile", "1.0"], capture_output=True, text=True)
    assert res.returncode == 0
    assert json.loads(res.stdout)["betti1"] == 1
    bad = subprocess.run([sys.executable, "-m", "cyctop", "count-cycles", "--nope"], capture_output=True)
    assert bad.returncode == 1
