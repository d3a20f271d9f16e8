import csv
import json

import numpy as np
import pytest

from zotoken.cli import SG_DISABLED, main
from zotoken.config import TrainConfig
from zotoken.subspace import compute_basis, normalize_buffer
from zotoken.trainer import build_problem, load_checkpoint, save_checkpoint
from zotoken.toy import analytic_token_optimum

SHORT = "train.iterations = 256\nsg.tau = 16\ntrain.eval_interval = 64\ntrain.eval_draws = 40\n"


@pytest.fixture
def cfg_file(tmp_path):
    p = tmp_path / "cfg.txt"
    p.write_text(SHORT)
    return p


def run(*argv):
    return main([str(a) for a in argv])


def read_csv(path):
    return [r for r in csv.reader(l for l in open(path) if not l.startswith("#"))]


def test_train_outputs(tmp_path, cfg_file, capsys):
    out = tmp_path / "run"
    assert run("train", cfg_file, "--out", out) == 0
    summary = json.loads(capsys.readouterr().out)
    for name in ("metrics.jsonl", "final.zck", "init.zck", "trajectory.csv", "snapshots.csv", "memory.json",
                 "summary.json", "config.txt"):
        assert (out / name).exists(), name
    lines = (out / "metrics.jsonl").read_text().splitlines()
    assert len(lines) == 4
    rec = json.loads(lines[-1])
    assert set(rec) == {"iteration", "loss_at_theta", "recovery_error", "i_star", "removed_fraction",
                        "loss_evaluations", "peak_auxiliary_floats"}
    assert rec["loss_evaluations"] == 256 * 3
    traj = read_csv(out / "trajectory.csv")
    assert traj[0][:3] == ["update_index", "i_star", "removed_fraction"] and len(traj[0]) == 3 + 16
    assert len(traj) == 1 + 256 // 16
    mem = json.loads((out / "memory.json").read_text())
    assert mem["checkpoint_bytes"] == 264
    assert mem["model_parameters"]["quantized_fraction"] > 0.95
    assert summary["loss_evaluations"] == 768
    assert load_checkpoint(out / "final.zck").size == 64


def test_train_missing_config(tmp_path, capsys):
    assert run("train", tmp_path / "nope.txt", "--out", tmp_path / "o") == 2
    assert "nope.txt" in capsys.readouterr().err


def test_train_bad_key(tmp_path, capsys):
    p = tmp_path / "bad.txt"
    p.write_text("sg.tua = 3\n")
    assert run("train", p) == 2
    assert "sg.tua" in capsys.readouterr().err


def test_train_numeric_abort(tmp_path, capsys):
    p = tmp_path / "boom.txt"
    p.write_text(SHORT + "optim.kind = sgd\noptim.eta = 1e200\n")
    with np.errstate(all="ignore"):
        assert run("train", p, "--out", tmp_path / "o") == 3
    assert (tmp_path / "o" / "last_good.zck").exists()


def test_seed_override_byte_identical(tmp_path, cfg_file):
    for name in ("a", "b", "c"):
        seed = "2" if name == "c" else "1"
        assert run("train", cfg_file, "--seed", seed, "--out", tmp_path / name) == 0
    for f in ("metrics.jsonl", "final.zck", "trajectory.csv", "snapshots.csv", "memory.json"):
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes(), f
    assert (tmp_path / "a" / "final.zck").read_bytes() != (tmp_path / "c" / "final.zck").read_bytes()


def test_analyze_sg_disabled(tmp_path, capsys):
    p = tmp_path / "cfg.txt"
    p.write_text(SHORT + "sg.enabled = false\n")
    out = tmp_path / "run"
    assert run("train", p, "--out", out) == 0
    assert (out / "trajectory.csv").read_text().startswith(SG_DISABLED)
    capsys.readouterr()
    assert run("analyze", out / "trajectory.csv", out / "final.zck") == 0
    hist = (out / "histogram.csv").read_text().splitlines()
    assert hist == [SG_DISABLED, "i_star,ratio,count"]
    assert json.loads(capsys.readouterr().out)["sg_disabled"]


def test_analyze_planted_rank_two(tmp_path):
    rng = np.random.default_rng(0)
    tau, d = 16, 64
    with open(tmp_path / "trajectory.csv", "w") as f:
        f.write("update_index,i_star,removed_fraction," + ",".join(f"lambda_{i + 1}" for i in range(tau)) + "\n")
        for b in range(10):
            u, _ = np.linalg.qr(rng.normal(size=(d, 2)))
            rows = rng.normal(size=(tau, 2)) @ u.T + 1e-6 * rng.normal(size=(tau, d))
            basis = compute_basis(normalize_buffer(rows), 1e-3)
            f.write(f"{(b + 1) * tau},{basis.i_star},{basis.removed_fraction}," +
                    ",".join("%.9g" % x for x in basis.spectrum) + "\n")
    save_checkpoint(np.zeros(d), tmp_path / "final.zck")
    assert run("analyze", tmp_path / "trajectory.csv", tmp_path / "final.zck") == 0
    hist = read_csv(tmp_path / "histogram.csv")
    counts = {int(r[0]): int(r[2]) for r in hist[1:]}
    assert len(counts) == tau
    assert counts[2] == 10 and sum(counts.values()) == 10


def test_analyze_retention_and_mismatch(tmp_path, cfg_file, capsys):
    out = tmp_path / "run"
    run("train", cfg_file, "--out", out)
    capsys.readouterr()
    assert run("analyze", out / "trajectory.csv", out / "final.zck", "--config", cfg_file, "--k", "0,5,16") == 0
    rows = read_csv(out / "retention.csv")
    assert rows[0] == ["k", "relative_residual", "loss_k", "loss_final", "loss_ratio"]
    assert [int(r[0]) for r in rows[1:]] == [0, 5, 16]
    assert float(rows[1][1]) == 1.0
    save_checkpoint(np.zeros(10), tmp_path / "wrong.zck")
    capsys.readouterr()
    assert run("analyze", out / "trajectory.csv", tmp_path / "wrong.zck", "--config", cfg_file, "--k", "3") == 4
    assert "mismatch" in capsys.readouterr().err
    assert run("analyze", out / "trajectory.csv", out / "final.zck", "--k", "3") == 2


def test_eval_oracle_random_and_gate(tmp_path, capsys):
    p = tmp_path / "cfg.txt"
    p.write_text(SHORT + "toy.sigma_ref = 0\n")
    cfg = TrainConfig({"toy.sigma_ref": 0.0})
    prob = build_problem(cfg)
    theta, ok = analytic_token_optimum(prob.model, prob.dataset)
    assert ok
    save_checkpoint(theta, tmp_path / "opt.zck")
    assert run("eval", tmp_path / "opt.zck", "--config", p) == 0
    rec = json.loads(capsys.readouterr().out)
    assert rec["recovery_error"] <= 1e-6

    # random tokens: E|A theta - z|/|z| ~ sqrt(|A|_F^2 + |z|^2)/|z| is order one
    errs = []
    for s in range(20):
        save_checkpoint(np.random.default_rng(s).normal(size=64), tmp_path / "r.zck")
        run("eval", tmp_path / "r.zck", "--config", p)
        errs.append(json.loads(capsys.readouterr().out)["recovery_error"])
    a, z = prob.model.composite(), prob.dataset.z_star
    predicted = np.sqrt(np.sum(a ** 2) + z @ z) / np.linalg.norm(z)
    assert 0.5 * predicted < np.mean(errs) < 1.5 * predicted

    gate = tmp_path / "below.txt"
    gate.write_text(SHORT + "puts.t_lower = 0\nputs.t_upper = 400\n")
    losses = []
    for f in ("opt.zck", "r.zck"):
        run("eval", tmp_path / f, "--config", gate)
        losses.append(json.loads(capsys.readouterr().out)["loss_inside"])
    assert abs(losses[0] - losses[1]) <= 1e-9


def test_eval_bad_checkpoint(tmp_path, cfg_file):
    (tmp_path / "bad.zck").write_bytes(b"NOPE1234")
    assert run("eval", tmp_path / "bad.zck", "--config", cfg_file) == 4
    assert run("eval", tmp_path / "missing.zck", "--config", cfg_file) == 4


def test_sweep_singleton_matches_train(tmp_path, cfg_file, capsys):
    assert run("sweep", cfg_file, "--grid", "sg.nu=0.001", "--out", tmp_path / "s.csv") == 0
    rows = read_csv(tmp_path / "s.csv")
    assert rows[0] == ["cell", "sg.nu", "seed", "status", "final_loss", "recovery_error", "initial_recovery_error"]
    run("train", cfg_file, "--out", tmp_path / "run")
    summary = json.loads(capsys.readouterr().out)
    assert rows[1][3] == "ok"
    assert float(rows[1][5]) == float("%.9g" % summary["recovery_error"])
    assert float(rows[1][4]) == float("%.9g" % summary["loss_inside"])


def test_sweep_timestep_grid(tmp_path):
    p = tmp_path / "cfg.txt"
    p.write_text("train.iterations = 20\nsg.tau = 8\ntrain.eval_draws = 5\ntrain.eval_interval = 20\n")
    vals = ",".join(str(v) for v in range(0, 1001, 100))
    assert run("sweep", p, "--grid", f"puts.t_lower={vals}", "--grid", f"puts.t_upper={vals}",
               "--out", tmp_path / "g.csv", "--jobs", "2") == 0
    rows = read_csv(tmp_path / "g.csv")[1:]
    assert len(rows) == 121
    ok = [r for r in rows if r[4] == "ok"]
    assert len(ok) == 55
    assert all(r[4].startswith("skipped") for r in rows if int(r[1]) >= int(r[2]))
    assert [int(r[3]) for r in rows] == list(range(121))
    # cells entirely below the gate keep the initial recovery error
    for r in ok:
        if int(r[2]) <= 400:
            assert abs(float(r[6]) - float(r[7])) <= 1e-7


def test_sweep_order_independent(tmp_path):
    p = tmp_path / "cfg.txt"
    p.write_text("train.iterations = 40\nsg.tau = 8\ntrain.eval_draws = 5\n")
    run("sweep", p, "--grid", "sg.nu=0.1,0.001", "--out", tmp_path / "a.csv", "--jobs", "1")
    run("sweep", p, "--grid", "sg.nu=0.1,0.001", "--out", tmp_path / "b.csv", "--jobs", "2")
    assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()


def test_sweep_unknown_key(tmp_path, cfg_file, capsys):
    assert run("sweep", cfg_file, "--grid", "sg.bogus=1,2", "--out", tmp_path / "x.csv") == 2
    assert not (tmp_path / "x.csv").exists()
    assert "sg.bogus" in capsys.readouterr().err
