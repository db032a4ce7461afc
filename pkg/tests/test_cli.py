import csv
import io
import json
import math

import numpy as np
import pytest

from deepkin.cli import EXIT_DATA, EXIT_OK, EXIT_USAGE, load_model, main
from deepkin.models import ModelConfig, TrajectoryModel


def run(argv):
    return main([str(a) for a in argv])


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli")
    (d / "cv.json").write_text(json.dumps({"kind": "constant_velocity"}))
    (d / "mix.json").write_text(json.dumps([{"kind": "constant_turn"}, {"kind": "accelerate"}, {"kind": "constant_velocity"}]))
    assert main(["generate", "--spec", str(d / "mix.json"), "--count", "40", "--seed", "1", "--out", str(d / "mix.jsonl")]) == 0
    return d


def _rows(text):
    return list(csv.DictReader(io.StringIO(text)))


def test_generate_is_byte_identical(workdir):
    for name in ("a", "b"):
        assert run(["generate", "--spec", workdir / "mix.json", "--count", 40, "--seed", 1, "--out", workdir / f"{name}.jsonl"]) == 0
    assert (workdir / "a.jsonl").read_bytes() == (workdir / "b.jsonl").read_bytes() == (workdir / "mix.jsonl").read_bytes()
    assert (workdir / "a.jsonl.meta.json").read_bytes() == (workdir / "b.jsonl.meta.json").read_bytes()
    assert (workdir / "a.jsonl.run.json").exists()


def test_generate_zero_count(workdir):
    out = workdir / "empty.jsonl"
    assert run(["generate", "--spec", workdir / "cv.json", "--count", 0, "--out", out]) == 0
    assert out.read_text() == ""
    meta = json.loads((workdir / "empty.jsonl.meta.json").read_text())
    assert meta["count"] == 0


def test_generate_invalid_spec_names_field(workdir, capsys):
    bad = workdir / "bad.json"
    bad.write_text(json.dumps({"kind": "constant_turn", "turn_radius_range": [1.0, 2.0]}))
    assert run(["generate", "--spec", bad, "--count", 3, "--out", workdir / "x.jsonl"]) == EXIT_DATA
    assert "turn_radius_range" in capsys.readouterr().err


def test_usage_errors_exit_one(workdir, capsys):
    with pytest.raises(SystemExit) as exc:
        main(["generate", "--count", "3"])
    assert exc.value.code == EXIT_USAGE
    assert run(["rollout", "--state", "0,0,0,1"]) == EXIT_USAGE
    capsys.readouterr()


def test_train_zero_iters_writes_init(workdir):
    ck = workdir / "init.ckpt.json"
    assert run(["train", "--data", workdir / "mix.jsonl", "--out", ck, "--head", "dkm", "--iters", 0, "--seed", 5, "--quiet"]) == 0
    model, doc = load_model(ck)
    fresh = TrajectoryModel(ModelConfig.from_json(doc["model_config"]), seed=5)
    for (k, p), (k2, q) in zip(model.store.items(), fresh.store.items()):
        assert k == k2
        np.testing.assert_array_equal(p.value, q.value)
    assert (workdir / "init.ckpt.json.run.json").exists()
    assert (workdir / "init.ckpt.json.metrics.csv").read_text().startswith("iteration,lr,")


def test_train_missing_data(workdir, capsys):
    assert run(["train", "--data", workdir / "nope.jsonl", "--out", workdir / "n.json", "--iters", 1]) == EXIT_DATA
    assert "nope.jsonl" in capsys.readouterr().err


@pytest.fixture(scope="module")
def trained(workdir):
    ck = workdir / "um.ckpt.json"
    cfg = workdir / "cfg.json"
    cfg.write_text(json.dumps({"model": {"head": "um", "hidden": [16]}, "train": {"lr0": 1e-3, "batch_size": 8, "val_every": 10}}))
    assert main(["train", "--config", str(cfg), "--data", str(workdir / "mix.jsonl"), "--out", str(ck), "--iters", "20", "--quiet"]) == 0
    return ck


def test_train_outputs(trained):
    rows = _rows(trained.with_name(trained.name + ".metrics.csv").read_text())
    assert len(rows) == 20 and rows[9]["val_l2_6s"] != ""
    assert trained.with_name(trained.name + ".loss.png").exists()
    run_cfg = json.loads(trained.with_name(trained.name + ".run.json").read_text())
    assert run_cfg["model"]["head"] == "um" and run_cfg["train"]["iterations"] == 20


def test_eval_deterministic_and_min_over_n(workdir, trained, capsys):
    a, b, c = (workdir / f"{n}.csv" for n in "abc")
    assert run(["eval", "--ckpt", trained, "--data", workdir / "mix.jsonl", "--report", a]) == 0
    assert run(["eval", "--ckpt", trained, "--data", workdir / "mix.jsonl", "--report", b]) == 0
    assert a.read_bytes() == b.read_bytes()
    assert run(["eval", "--ckpt", trained, "--data", workdir / "mix.jsonl", "--report", c, "--min-over-n", "--no-plots"]) == 0
    ra, rc = _rows(a.read_text()), _rows(c.read_text())
    assert [r["method"] for r in ra] == [r["method"] for r in rc]
    assert rc[0]["l2_6s_m"] != ra[0]["l2_6s_m"]
    assert (workdir / "a.csv.accel.png").exists() and (workdir / "a.csv.hist.csv").exists()
    assert (workdir / "a.csv.run.json").exists()
    capsys.readouterr()


def test_eval_empty_set_errors(workdir, trained, capsys):
    empty = workdir / "void.jsonl"
    empty.write_text("")
    assert run(["eval", "--ckpt", trained, "--data", empty, "--report", workdir / "e.csv"]) == EXIT_DATA
    capsys.readouterr()


def test_eval_baseline_and_compare(workdir, trained, capsys):
    base, um, table = workdir / "base.csv", workdir / "um.csv", workdir / "table.csv"
    assert run(["eval", "--baseline", "constant_controls", "--data", workdir / "mix.jsonl", "--report", base, "--no-plots"]) == 0
    assert run(["eval", "--ckpt", trained, "--data", workdir / "mix.jsonl", "--report", um, "--no-plots"]) == 0
    assert run(["compare", "--reports", um, base, "--out", table]) == 0
    rows = _rows(table.read_text())
    assert [r["method"] for r in rows] == ["um", "constant_controls"]
    assert (workdir / "table.csv.png").exists()
    assert run(["compare", "--reports", base, "--out", workdir / "single.csv", "--no-plots"]) == 0
    assert _rows((workdir / "single.csv").read_text())[0]["method"] == "constant_controls"
    bad = workdir / "bad.csv"
    bad.write_text("method,l2_3s_m\nx,1\n")
    assert run(["compare", "--reports", base, bad, "--out", workdir / "t2.csv"]) == EXIT_DATA
    capsys.readouterr()


def _rollout(capsys, *args):
    assert run(["rollout", *args]) == EXIT_OK
    return np.array([[float(r[k]) for k in ("h", "x", "y", "psi", "v")] for r in _rows(capsys.readouterr().out)])


def test_rollout_straight_line(capsys):
    rows = _rollout(capsys, "--state", "0,0,0,5", "--constant", "0,0", "--H", 10)
    np.testing.assert_array_equal(rows[:, 0], np.arange(1, 11))
    np.testing.assert_allclose(rows[:, 1], 0.5 * np.arange(1, 11))
    assert np.all(rows[:, 2] == 0) and np.all(rows[:, 3] == 0)


def test_rollout_single_step(capsys):
    assert len(_rollout(capsys, "--state", "1,2,0.3,4", "--constant", "1,0.1", "--H", 1)) == 1


def test_rollout_turning_radius(workdir, capsys):
    params = workdir / "kp.json"
    params.write_text(json.dumps({"l_r": 1.4, "l_f": 1.4, "gamma_max_deg": 50}))
    rows = _rollout(capsys, "--state", "0,0,0,10", "--constant", "0,45", "--degrees", "--params", params, "--H", 20, "--dt", 0.01)
    x, y = rows[:, 1], rows[:, 2]
    # least-squares circle fit
    A = np.column_stack([2 * x, 2 * y, np.ones_like(x)])
    cx, cy, c = np.linalg.lstsq(A, x**2 + y**2, rcond=None)[0]
    radius = math.sqrt(c + cx**2 + cy**2)
    beta = math.atan(0.5 * math.tan(math.radians(45)))
    assert radius == pytest.approx(1.4 / math.sin(beta), rel=0.03)


def test_rollout_controls_file_and_out(workdir, capsys):
    ctl = workdir / "ctl.csv"
    ctl.write_text("accel,steer\n" + "0.5,0.02\n" * 5)
    out = workdir / "roll.csv"
    rows = _rollout(capsys, "--state", "0,0,0,3", "--controls", ctl, "--H", 5, "--out", out, "--plot")
    assert out.read_text().count("\n") == 6 and rows[-1, 4] == pytest.approx(3.25)
    assert (workdir / "roll.csv.run.json").exists() and (workdir / "roll.csv.png").exists()
    assert run(["rollout", "--state", "0,0,0,3", "--controls", ctl, "--H", 6]) == EXIT_DATA


def test_poly1_learns_constant_velocity(workdir, capsys):
    data = workdir / "cv.jsonl"
    assert run(["generate", "--spec", workdir / "cv.json", "--count", 300, "--seed", 2, "--out", data]) == 0
    cfg = workdir / "poly1.json"
    cfg.write_text(json.dumps({"model": {"head": "poly1", "hidden": [64, 64]}, "train": {"lr0": 3e-3, "lr_decay": 0.8, "lr_decay_every": 300, "val_every": 500}}))
    ck = workdir / "poly1.ckpt.json"
    assert run(["train", "--config", cfg, "--data", data, "--out", ck, "--iters", 1500, "--quiet", "--no-plots"]) == 0
    rows = _rows(ck.with_name(ck.name + ".metrics.csv").read_text())
    assert float(rows[-1]["val_l2_6s"]) < 0.1
    capsys.readouterr()
