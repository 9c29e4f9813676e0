import json
import os
import subprocess
import sys

import numpy as np
import pytest

from artik.cli import main
from artik.io import load_trajectory, write_json
from artik.presets import preset


@pytest.fixture(scope="module")
def generated(tmp_path_factory):
    out = tmp_path_factory.mktemp("gen")
    assert main(["generate", "--scene", "cartpole", "--frames", "200", "--dt", "0.05", "--seed", "0",
                 "--out", str(out)]) == 0
    return out


def test_generate_round_trip(generated):
    res, obs = preset("cartpole").simulate(200, 0.05, 0)
    back = load_trajectory(generated / "trajectory.json")
    assert back.n_bodies == 2 and back.n_frames == 200 and back.dt == 0.05
    for k in range(2):
        np.testing.assert_array_equal(back.body(k).data, obs.body(k).data)
    np.testing.assert_array_equal(back.controls.values, obs.controls.values)
    truth = json.loads((generated / "truth.json").read_text())
    np.testing.assert_array_equal(np.array(truth["states"]), res.states)
    assert truth["config"]["seed"] == 0 and truth["scene"] == "cartpole"
    for name in ("states.csv", "states.png"):
        assert (generated / name).stat().st_size > 0


def test_generate_is_byte_identical(generated, tmp_path):
    main(["generate", "--scene", "cartpole", "--seed", "0", "--out", str(tmp_path)])
    for name in ("trajectory.json", "truth.json", "states.csv"):
        assert (tmp_path / name).read_bytes() == (generated / name).read_bytes()


def test_infer_cartpole(generated, tmp_path, capsys):
    assert main(["infer", str(generated / "trajectory.json"), "--out", str(tmp_path)]) == 0
    assert "world -[prismatic]-> body0 -[revolute]-> body1" in capsys.readouterr().out
    doc = json.loads((tmp_path / "world_model.json").read_text())
    assert doc["summary"] == (tmp_path / "summary.txt").read_text().strip()
    header = (tmp_path / "joint_q.csv").read_text().splitlines()[0]
    assert header == "t,world->body0,body0->body1"
    assert (tmp_path / "joint_q.png").exists()
    assert not [p for p in tmp_path.iterdir() if p.name.startswith(".")]  # no temp files left


def test_infer_double_pendulum(tmp_path, capsys):
    main(["generate", "--scene", "double_pendulum", "--out", str(tmp_path)])
    capsys.readouterr()
    assert main(["infer", str(tmp_path / "trajectory.json"), "--out", str(tmp_path)]) == 0
    assert capsys.readouterr().out.strip() == "world -[revolute]-> body0 -[revolute]-> body1"


def test_infer_rejects_single_frame(generated, tmp_path, capsys):
    doc = json.loads((generated / "trajectory.json").read_text())
    for body in doc["bodies"]:
        body["poses"] = body["poses"][:1]
    doc.pop("controls", None)
    write_json(tmp_path / "short.json", doc)
    assert main(["infer", str(tmp_path / "short.json"), "--out", str(tmp_path)]) == 2
    assert "at least 2" in capsys.readouterr().err


def test_infer_reports_json_syntax_position(tmp_path, capsys):
    (tmp_path / "broken.json").write_text('{"dt": 0.05,\n "bodies": [}\n')
    assert main(["infer", str(tmp_path / "broken.json")]) == 2
    assert "line 2" in capsys.readouterr().err


def test_fit_params_without_sidecar(generated, tmp_path):
    assert main(["fit-params", str(generated / "trajectory.json"), "--method", "adam", "--steps", "20",
                 "--out", str(tmp_path)]) == 0
    doc = json.loads((tmp_path / "fit.json").read_text())
    assert doc["nmae"] is None and doc["nmae_identifiable"] is None
    assert doc["names"] == preset("cartpole").params.names
    assert doc["config"]["steps"] == 20
    rows = (tmp_path / "loss_trace.csv").read_text().splitlines()
    assert rows[0] == "step,particle0" and len(rows) == 21
    assert (tmp_path / "loss_trace.png").exists() and (tmp_path / "params.png").exists()


def test_fit_params_with_model_and_truth(generated, tmp_path):
    main(["infer", str(generated / "trajectory.json"), "--out", str(tmp_path)])
    assert main(["fit-params", str(generated / "trajectory.json"), "--model", str(tmp_path / "world_model.json"),
                 "--truth", str(generated / "truth.json"), "--method", "svgd", "--particles", "3",
                 "--steps", "10", "--out", str(tmp_path)]) == 0
    doc = json.loads((tmp_path / "fit.json").read_text())
    assert doc["nmae"] is not None and len(doc["particles"]) == 3
    assert doc["identifiable"] == [True, True, False, True]


def test_control_with_mismatched_params(generated, tmp_path, capsys):
    write_json(tmp_path / "bad.json", {"names": ["cart.mass", "arm.mass"], "theta": [1.0, 0.3]})
    code = main(["control", "--model", str(generated / "truth.json"), "--params", str(tmp_path / "bad.json"),
                 "--seeds", "1", "--out", str(tmp_path)])
    assert code == 2
    assert "'names'" in capsys.readouterr().err
    write_json(tmp_path / "short.json", {"names": ["cart.mass", "pole.mass"], "theta": [1.0]})
    assert main(["control", "--model", str(generated / "truth.json"), "--params",
                 str(tmp_path / "short.json"), "--out", str(tmp_path)]) == 2
    assert "'theta'" in capsys.readouterr().err


def test_control_runs(generated, tmp_path):
    assert main(["control", "--task", "balance", "--model", str(generated / "truth.json"),
                 "--params", str(generated / "truth.json"), "--seeds", "2", "--samples", "40",
                 "--horizon", "20", "--out", str(tmp_path)]) == 0
    doc = json.loads((tmp_path / "summary.json").read_text())
    assert doc["runs"] == 2 and doc["task"] == "balance"
    assert (tmp_path / "rewards.csv").read_text().splitlines()[0] == "step,seed0,seed1"
    assert (tmp_path / "rewards.png").exists()


def test_usage_errors_exit_one(tmp_path):
    assert main(["generate", "--scene", "unicycle", "--out", str(tmp_path)]) == 1
    assert main(["generate", "--frames", "1", "--out", str(tmp_path)]) == 1
    with pytest.raises(SystemExit) as info:
        main(["generate", "--no-such-flag"])
    assert info.value.code == 1
    with pytest.raises(SystemExit) as info:
        main([])
    assert info.value.code == 1


def test_console_script_entry_point(tmp_path):
    env = {**os.environ, "ARTIK_LOG": "debug"}
    proc = subprocess.run([sys.executable, "-m", "artik.cli", "infer", str(tmp_path / "missing.json")],
                          capture_output=True, text=True, env=env)
    assert proc.returncode == 2
    assert "missing.json" in proc.stderr


def test_eval_quick_run(tmp_path, capsys):
    args = ["eval", "--scene", "cartpole", "--seeds", "1", "--method", "adam", "--steps", "30",
            "--samples", "30", "--horizon", "15"]
    assert main(args + ["--out", str(tmp_path / "a")]) == 0
    printed = capsys.readouterr().out.splitlines()
    assert [l.split()[0] for l in printed] == ["topology", "nmae", "nmae", "swing_up", "balance"]
    doc = json.loads((tmp_path / "a" / "summary.json").read_text())
    assert doc["topology"]["pass"] and doc["parameters"]["unidentifiable"] == ["cart.inertia[1]"]
    for name in ("timings.json", "rewards.csv", "nmae.csv", "rewards_swing_up.png", "rewards_balance.png"):
        assert (tmp_path / "a" / name).exists()
