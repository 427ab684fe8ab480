import json

import pytest

from phnlab.cli import run

ERLANG = {"p": [1.0, 0.0], "P": [[0.0, 1.0], [0.0, 0.0]], "v": [2.0, 2.0], "alpha": 0.5, "beta": 1.0}
OU = {"p": [1.0], "P": [[0.0]], "v": [1.0], "alpha": 1.0, "beta": 1.0}

SMALL = {
    "sample": ("em", {"eta": 0.01, "n_samples": 200, "gap": 20, "burn_in": 500, "n_chains": 2, "binary": True}),
    "converge": ("converge", {"eta_list": [0.2, 0.1, 0.05], "n_samples": 2000, "gap": 20, "burn_in": 500}),
    "clt": ("clt", {"eta": 0.05, "n": 500, "replications": 50, "calibration_factor": 20}),
    "mdp": ("mdp", {"n_list": [2000], "thresholds": [0.0, 1.0], "replications": 40, "eta": 0.05}),
    "occupation": ("occupation", {"t": 1.0, "eps_list": [0.4, 0.2, 0.1], "n_paths": 20, "eta": 0.005}),
    "lyapunov-audit": ("lyapunov", {"n_points": 2000, "n_paths": 20, "t": 1.0, "x0": [1.0, 0.0]}),
    "queue-compare": ("queue", {"n_list": [9], "n_samples": 300, "em_samples": 300, "eta": 0.05}),
}


def write(tmp_path, name, doc):
    f = tmp_path / name
    f.write_text(json.dumps(doc))
    return str(f)


def test_validate_model_ok(tmp_path, capsys):
    cfg = write(tmp_path, "erlang.json", ERLANG)
    assert run(["validate-model", "--config", cfg, "--out", str(tmp_path / "o")]) == 0
    out = capsys.readouterr().out
    for key in ("R:", "gamma:", "SigmaSq:", "c_ellip:"):
        assert key in out
    report = json.loads((tmp_path / "o" / "model.json").read_text())
    assert report["c_ellip"] == pytest.approx(1.0)
    assert report["header"].startswith("phnlab ")


def test_validate_model_bad_routing(tmp_path, capsys):
    cfg = write(tmp_path, "bad.json", {**ERLANG, "P": [[0.5, 0.5], [0.0, 0.0]]})
    assert run(["validate-model", "--config", cfg, "--out", str(tmp_path / "o")]) == 2
    assert "BadRouting" in capsys.readouterr().err


def test_missing_block_and_file(tmp_path):
    cfg = write(tmp_path, "m.json", {"model": ERLANG})
    assert run(["sample", "--config", cfg, "--out", str(tmp_path / "o")]) == 2
    assert run(["sample", "--config", str(tmp_path / "nope.json")]) == 2


def test_numerical_failure_exit_code(tmp_path, capsys):
    # an empty kappa search leaves no admissible drift constants
    cfg = write(tmp_path, "c.json", {"model": ERLANG, "lyapunov": {"n_points": 500, "kappas": []}})
    assert run(["lyapunov-audit", "--config", cfg, "--out", str(tmp_path / "o")]) == 3
    assert "NoValidConstants" in capsys.readouterr().err


@pytest.mark.parametrize("sub", list(SMALL))
def test_subcommands_run_and_reproduce(sub, tmp_path):
    block, body = SMALL[sub]
    model = OU if sub in ("converge", "clt", "mdp") else ERLANG
    cfg = write(tmp_path, "c.json", {"model": model, block: body, "master_seed": 3})
    outs = []
    for k, workers in enumerate(("1", "2")):
        out = tmp_path / f"o{k}"
        assert run([sub, "--config", cfg, "--out", str(out), "--workers", workers]) == 0
        outs.append(out)
    files = sorted(p.name for p in outs[0].iterdir())
    assert files == sorted(p.name for p in outs[1].iterdir())
    for name in files:
        a = (outs[0] / name).read_bytes()
        b = (outs[1] / name).read_bytes()
        if name.endswith(".json"):
            da, db = json.loads(a), json.loads(b)
            assert da["master_seed"] == 3 and "config" in da and da["header"].startswith("phnlab ")
            assert da["header"] == db["header"]
            da.pop("config"), db.pop("config")
            assert da == db
        else:
            if name.endswith(".csv"):
                assert a.startswith(b"# phnlab ")
            assert a == b


def test_rerun_byte_identical(tmp_path):
    cfg = write(tmp_path, "c.json", {"model": ERLANG, "em": SMALL["sample"][1]})
    names = ("samples.csv", "samples.bin", "sample_summary.json")
    snapshots = []
    for _ in range(2):
        assert run(["sample", "--config", cfg, "--out", str(tmp_path / "o"), "--workers", "1"]) == 0
        snapshots.append([(tmp_path / "o" / name).read_bytes() for name in names])
    assert snapshots[0] == snapshots[1]


def test_converge_outputs(tmp_path):
    cfg = write(tmp_path, "c.json", {"model": OU, "converge": SMALL["converge"][1]})
    assert run(["converge", "--config", cfg, "--out", str(tmp_path / "o"), "--workers", "1"]) == 0
    lines = (tmp_path / "o" / "converge.csv").read_text().splitlines()
    assert lines[1] == "eta,w1,envelope" and len(lines) == 5
    assert "slope" in json.loads((tmp_path / "o" / "converge_summary.json").read_text())
