import json

import numpy as np
import pytest

from srtransport import __version__
from srtransport.cli import main
from srtransport.scenarios import data_path


def run(capsys, *argv):
    code = main(list(argv))
    out = capsys.readouterr().out
    return code, (json.loads(out) if out.strip() else None)


def write_measure(tmp_path, name, pts, weights=None):
    path = tmp_path / f"{name}.json"
    body = {"points": pts}
    if weights is not None:
        body["weights"] = weights
    path.write_text(json.dumps(body))
    return str(path)


def test_inspect_engel(capsys):
    code, rep = run(capsys, "inspect", "--scenario", "engel")
    assert code == 0
    assert rep["alpha1"] == "0" and rep["alpha2"] == "1"
    assert rep["growth"]["ok"] and rep["hc_census"]["degenerate_points"] == 0
    assert rep["version"] == __version__ and rep["seed"] == 0 and len(rep["structure_hash"]) == 64


def test_inspect_cubic_census(capsys):
    code, rep = run(capsys, "inspect", "--structure", str(data_path("cubic.json")))
    assert code == 0
    assert rep["hc_census"]["degenerate_points"] > 0
    assert all(p[0] == 0.0 for p in rep["hc_census"]["examples"])


def test_negative_exponent_rejected(capsys, tmp_path):
    bad = tmp_path / "bad.json"
    bad.write_text('{"A": [[1,0,0,0,1]], "B": [[2,0,-1,0,0.5]]}')
    assert main(["inspect", "--structure", str(bad)]) == 4
    assert "'B'" in capsys.readouterr().err


def test_invalid_json_position(capsys, tmp_path):
    bad = tmp_path / "bad.json"
    bad.write_text('{"A": [[1,0,0,0,1]],\n "B": ')
    assert main(["inspect", "--structure", str(bad)]) == 4
    assert "line 2" in capsys.readouterr().err


def test_flow_writes_csv(capsys, tmp_path):
    code, rep = run(capsys, "flow", "--scenario", "engel", "--out", str(tmp_path))
    assert code == 0
    rows = (tmp_path / "flow.csv").read_text().splitlines()
    assert len(rows) == 12 and rows[0].startswith("t,x1")
    assert json.loads((tmp_path / "flow.json").read_text()) == rep


def test_config_precedence(capsys):
    _, rep = run(capsys, "flow", "--scenario", "engel", "--steps", "4")
    cfg = rep["config"]
    assert cfg["scenario"]["steps"] == 10 and cfg["flags"]["steps"] == 4
    assert cfg["effective"]["steps"] == 4
    assert cfg["effective"]["x0"] == [1, 0, 0, 0]  # scenario value beats the default


def test_distance_engel_axis(capsys):
    code, rep = run(capsys, "distance", "--scenario", "engel")
    assert code == 0
    assert rep["lower_bound"] <= rep["upper_bound"] + 1e-12
    assert rep["upper_bound"] == pytest.approx(0.5, abs=1e-6)


def test_distance_not_converged_exit(capsys):
    code = main(["distance", "--scenario", "engel", "--y", "0.2,0.3,0.1,0.05", "--tol", "1e-30", "--starts", "1"])
    capsys.readouterr()
    assert code == 3


def test_transport_identity_plan(capsys, tmp_path):
    mu = str(data_path("mu_sample.json"))
    code, rep = run(capsys, "transport", "--scenario", "engel", "--mu", mu, "--nu", mu, "--out", str(tmp_path))
    assert code == 0
    assert rep["optimal_cost"] == 0.0
    assert [p[:2] for p in rep["plan"]] == [[0, 0], [1, 1], [2, 2]]
    assert rep["classification"]["status"] == ["static"] * 3
    assert (tmp_path / "contact.csv").exists() and (tmp_path / "classification.csv").exists()


def test_transport_brute_force_verbose(capsys):
    code, rep = run(capsys, "transport", "--scenario", "engel", "--mu", str(data_path("mu_sample.json")),
                    "--nu", str(data_path("nu_sample.json")), "--brute-force", "--verbose")
    assert code == 0
    bf = rep["brute_force"]
    assert bf["match"] and len(bf["all"]) == 6
    assert bf["best_cost"] == pytest.approx(rep["optimal_cost"], abs=1e-12)


def test_transport_deterministic(capsys):
    argv = ["transport", "--scenario", "engel", "--mu", str(data_path("mu_sample.json")),
            "--nu", str(data_path("nu_sample.json"))]
    main(argv)
    first = capsys.readouterr().out
    main(argv)
    assert capsys.readouterr().out == first


def test_transport_size_guard(capsys, tmp_path):
    pts = np.random.default_rng(0).random((300, 4)).tolist()
    big = write_measure(tmp_path, "big", pts)
    assert main(["transport", "--scenario", "engel", "--mu", big, "--nu", big]) == 4
    assert "256" in capsys.readouterr().err


def test_transport_bad_weights(capsys, tmp_path):
    mu = write_measure(tmp_path, "mu", [[0, 0, 0, 0], [1, 0, 0, 0]], [0.3, 0.3])
    assert main(["transport", "--scenario", "engel", "--mu", mu, "--nu", mu]) == 4
    capsys.readouterr()


def test_contract_and_negative_control(capsys):
    code, rep = run(capsys, "contract", "--scenario", "contracting", "--samples", "2000", "--points", "4")
    assert code == 0 and rep["contraction_audit"]
    code = main(["contract", "--scenario", "contracting", "--samples", "2000", "--points", "4", "--C", "0"])
    capsys.readouterr()
    assert code == 2


def test_contract_region_flag(capsys):
    code, rep = run(capsys, "contract", "--scenario", "engel", "--region", "0.5,0.5,0,0:0.1,0.1,0.1,0.1",
                    "--samples", "500", "--points", "2")
    assert code == 0
    assert rep["config"]["effective"]["region"] == "0.5,0.5,0,0:0.1,0.1,0.1,0.1"


def test_unknown_scenario(capsys):
    assert main(["flow", "--scenario", "no-such-scenario"]) == 4
    capsys.readouterr()


def test_verify_all_subset(capsys):
    code, rep = run(capsys, "verify-all", "--only", "6,7")
    assert code == 0
    assert rep["total"] == 2 and rep["passed"] == 2
    assert [c["criterion"] for c in rep["criteria"]] == [6, 7]
