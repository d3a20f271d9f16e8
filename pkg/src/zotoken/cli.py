"""Command line entry point: ``train``, ``analyze``, ``eval`` and ``sweep``.

Exit codes: 0 success, 2 configuration or usage error (including a missing
input file), 3 numerical abort during training, 4 I/O or file format error.

Outputs of ``train --out DIR``::

    metrics.jsonl   one record per eval interval and at the last iteration
    final.zck       final token;  init.zck  initial token
    trajectory.csv  update_index,i_star,removed_fraction,lambda_1..lambda_tau
    snapshots.csv   iteration,theta_1..theta_d every tau iterations (and 0)
    memory.json     persistent/transient float counts, model parameter counts
    summary.json    final recovery error and windowed losses
    config.txt      the fully resolved configuration

Numeric CSV fields are written with 9 significant digits.
"""

from __future__ import annotations

import argparse
import csv
import itertools
import json
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from .config import SCHEMA, ConfigError, TrainConfig, _coerce, load_config
from .subspace import subspace_retention_report, trajectory_basis
from .trainer import CheckpointFormatError, TrainingAborted, account_memory, build_problem, evaluate, \
    load_checkpoint, metrics_line, save_checkpoint, train, windowed_loss

EXIT_CONFIG, EXIT_NUMERIC, EXIT_IO = 2, 3, 4
SG_DISABLED = "# sg disabled"
RETENTION_ROWS = 32


class CliError(Exception):
    def __init__(self, code: int, message: str):
        super().__init__(message)
        self.code = code


def fmt(x) -> str:
    if x is None:
        return ""
    if isinstance(x, (bool, np.bool_)):
        return "true" if x else "false"
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    return "%.9g" % x


def _config(path, seed=None) -> TrainConfig:
    try:
        cfg = load_config(path)
        if seed is not None:
            cfg = cfg.replace({"train.seed": seed}).validate()
    except FileNotFoundError as exc:
        raise CliError(EXIT_CONFIG, str(exc)) from None
    except ConfigError as exc:
        raise CliError(EXIT_CONFIG, f"config error: {exc}") from None
    return cfg


def _checkpoint(path):
    try:
        return load_checkpoint(path)
    except FileNotFoundError:
        raise CliError(EXIT_CONFIG, f"checkpoint not found: {path}") from None
    except (OSError, CheckpointFormatError) as exc:
        raise CliError(EXIT_IO, str(exc)) from None


# ---------------------------------------------------------------------------
# train


def run_training(cfg: TrainConfig, out: Path) -> dict:
    out.mkdir(parents=True, exist_ok=True)
    d, tau = cfg["toy.d"], cfg["sg.tau"]
    with open(out / "metrics.jsonl", "w", encoding="utf-8") as mf, \
            open(out / "snapshots.csv", "w", encoding="utf-8", newline="") as sf:
        snap = csv.writer(sf, lineterminator="\n")
        snap.writerow(["iteration"] + [f"theta_{i + 1}" for i in range(d)])
        try:
            result = train(cfg,
                           on_metrics=lambda rec: mf.write(metrics_line(rec) + "\n"),
                           on_snapshot=lambda l, th: snap.writerow([l] + [fmt(x) for x in th]))
        except TrainingAborted as exc:
            save_checkpoint(exc.last_good, out / "last_good.zck")
            raise CliError(EXIT_NUMERIC, f"training aborted at {exc}; last good token in {out / 'last_good.zck'}")

    save_checkpoint(result.theta_init, out / "init.zck")
    nbytes = save_checkpoint(result.theta, out / "final.zck")
    with open(out / "trajectory.csv", "w", encoding="utf-8", newline="") as tf:
        if not cfg["sg.enabled"]:
            tf.write(SG_DISABLED + "\n")
        w = csv.writer(tf, lineterminator="\n")
        w.writerow(["update_index", "i_star", "removed_fraction"] + [f"lambda_{i + 1}" for i in range(tau)])
        for r in result.refreshes:
            w.writerow([r.iteration, r.i_star, fmt(r.removed_fraction)] + [fmt(x) for x in r.spectrum])
    memory = account_memory(result.ledger, cfg)
    memory["model_parameters"] = result.problem.model.parameter_counts()
    memory["checkpoint_bytes"] = nbytes
    (out / "memory.json").write_text(json.dumps(memory, indent=2) + "\n", encoding="utf-8")
    summary = evaluate(cfg, result.theta, result.problem)
    summary["initial_recovery_error"] = evaluate(cfg, result.theta_init, result.problem)["recovery_error"]
    summary["loss_evaluations"] = result.evaluations
    (out / "summary.json").write_text(json.dumps(summary, indent=2) + "\n", encoding="utf-8")
    (out / "config.txt").write_text(cfg.text(), encoding="utf-8")
    return summary


def cmd_train(args) -> int:
    cfg = _config(args.config, args.seed)
    out = Path(args.out)
    try:
        summary = run_training(cfg, out)
    except OSError as exc:
        raise CliError(EXIT_IO, f"cannot write outputs to {out}: {exc}") from None
    print(json.dumps(summary))
    return 0


# ---------------------------------------------------------------------------
# analyze


def read_trajectory(path: Path):
    try:
        lines = path.read_text(encoding="utf-8").splitlines()
    except FileNotFoundError:
        raise CliError(EXIT_CONFIG, f"trajectory file not found: {path}") from None
    disabled = bool(lines) and lines[0].strip() == SG_DISABLED
    rows = list(csv.reader(ln for ln in lines if not ln.startswith("#")))
    if not rows or rows[0][:3] != ["update_index", "i_star", "removed_fraction"]:
        raise CliError(EXIT_IO, f"{path}: not a trajectory file")
    tau = len(rows[0]) - 3
    return disabled, tau, [(int(r[0]), int(r[1]), float(r[2])) for r in rows[1:]]


def read_snapshots(path: Path) -> np.ndarray:
    try:
        data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    except FileNotFoundError:
        raise CliError(EXIT_CONFIG, f"snapshot file not found: {path}") from None
    except ValueError as exc:
        raise CliError(EXIT_IO, f"{path}: {exc}") from None
    return data[:, 1:]


def even_rows(x: np.ndarray, count: int) -> np.ndarray:
    if x.shape[0] <= count:
        return x
    return x[np.unique(np.linspace(0, x.shape[0] - 1, count).round().astype(int))]


def cmd_analyze(args) -> int:
    traj = Path(args.trajectory)
    out = Path(args.out) if args.out else traj.parent
    disabled, tau, refreshes = read_trajectory(traj)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "histogram.csv", "w", encoding="utf-8", newline="") as hf:
        if disabled:
            hf.write(SG_DISABLED + "\n")
        w = csv.writer(hf, lineterminator="\n")
        w.writerow(["i_star", "ratio", "count"])
        if not disabled:
            counts = np.bincount([r[1] for r in refreshes], minlength=tau + 1)
            for i in range(1, tau + 1):
                w.writerow([i, fmt(i / tau), int(counts[i])])
    report = {"refreshes": len(refreshes), "sg_disabled": disabled}
    if refreshes:
        frac = np.array([r[2] for r in refreshes])
        report["median_removed_fraction"] = float(np.median(frac))
        report["share_removed_at_least_half"] = float(np.mean(frac >= 0.5))

    if args.k:
        if not args.config:
            raise CliError(EXIT_CONFIG, "--k needs --config to evaluate the loss")
        cfg = _config(args.config)
        final = _checkpoint(args.final)
        init = _checkpoint(args.init or traj.parent / "init.zck")
        snaps = read_snapshots(Path(args.snapshots) if args.snapshots else traj.parent / "snapshots.csv")
        d = cfg["toy.d"]
        for name, n in (("final checkpoint", final.size), ("initial checkpoint", init.size),
                        ("snapshots", snaps.shape[1])):
            if n != d:
                raise CliError(EXIT_IO, f"dimension mismatch: {name} has d={n}, config has d={d}")
        problem = build_problem(cfg)
        loss = windowed_loss(cfg, problem)
        basis = trajectory_basis(even_rows(snaps, RETENTION_ROWS))
        recs = [subspace_retention_report(init, final, basis, k, loss) for k in args.k]
        with open(out / "retention.csv", "w", encoding="utf-8", newline="") as rf:
            w = csv.writer(rf, lineterminator="\n")
            w.writerow(["k", "relative_residual", "loss_k", "loss_final", "loss_ratio"])
            for r in recs:
                w.writerow([r.k, fmt(r.relative_residual), fmt(r.loss_k), fmt(r.loss_final), fmt(r.loss_ratio)])
        report["retention"] = [{"k": r.k, "loss_ratio": r.loss_ratio, "relative_residual": r.relative_residual}
                               for r in recs]
    print(json.dumps(report))
    return 0


# ---------------------------------------------------------------------------
# eval


def cmd_eval(args) -> int:
    cfg = _config(args.config)
    theta = _checkpoint(args.checkpoint)
    if theta.size != cfg["toy.d"]:
        raise CliError(EXIT_IO, f"dimension mismatch: checkpoint has d={theta.size}, config has d={cfg['toy.d']}")
    print(json.dumps(evaluate(cfg, theta)))
    return 0


# ---------------------------------------------------------------------------
# sweep


def parse_grid(specs: list[str]) -> list[tuple[str, list]]:
    if not 1 <= len(specs) <= 2:
        raise CliError(EXIT_CONFIG, "--grid must be given once or twice")
    grid = []
    for spec in specs:
        key, sep, values = spec.partition("=")
        key = key.strip()
        if not sep or key not in SCHEMA:
            raise CliError(EXIT_CONFIG, f"unknown grid key {key!r}")
        try:
            grid.append((key, [_coerce(key, v) for v in values.split(",") if v.strip()]))
        except ConfigError as exc:
            raise CliError(EXIT_CONFIG, str(exc)) from None
        if not grid[-1][1]:
            raise CliError(EXIT_CONFIG, f"grid key {key!r} has no values")
    if len({k for k, _ in grid}) != len(grid):
        raise CliError(EXIT_CONFIG, "grid keys must differ")
    return grid


def _run_cell(values: dict) -> dict:
    cfg = TrainConfig(values)
    problem = build_problem(cfg)
    try:
        result = train(cfg, problem=problem)
    except TrainingAborted as exc:
        return {"status": f"aborted: {exc}"}
    ev = evaluate(cfg, result.theta, problem)
    return {"status": "ok", "final_loss": ev["loss_inside"], "recovery_error": ev["recovery_error"],
            "initial_recovery_error": evaluate(cfg, result.theta_init, problem)["recovery_error"]}


def cmd_sweep(args) -> int:
    grid = parse_grid(args.grid)
    base = _config(args.config, args.seed)
    keys = [k for k, _ in grid]
    cells, jobs = [], []
    for index, combo in enumerate(itertools.product(*(vals for _, vals in grid))):
        values = {**base.values, **dict(zip(keys, combo)), "train.seed": base["train.seed"] + index}
        try:
            TrainConfig(values).validate()
            cells.append((index, combo, values["train.seed"], None))
            jobs.append(values)
        except ConfigError as exc:
            cells.append((index, combo, values["train.seed"], f"skipped: {exc}"))
    if args.jobs > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=args.jobs) as pool:
            results = iter(list(pool.map(_run_cell, jobs)))
    else:
        results = iter([_run_cell(v) for v in jobs])
    header = ["cell"] + keys + ["seed", "status", "final_loss", "recovery_error", "initial_recovery_error"]
    rows = []
    for index, combo, seed, skipped in cells:
        res = {"status": skipped} if skipped else next(results)
        rows.append([index] + [fmt(c) if not isinstance(c, str) else c for c in combo] +
                    [seed, res["status"], fmt(res.get("final_loss")), fmt(res.get("recovery_error")),
                     fmt(res.get("initial_recovery_error"))])
    try:
        fh = open(args.out, "w", encoding="utf-8", newline="") if args.out else sys.stdout
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)
        if args.out:
            fh.close()
    except OSError as exc:
        raise CliError(EXIT_IO, f"cannot write {args.out}: {exc}") from None
    return 0


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="zotoken", description="Forward-only token optimization on a toy denoiser.")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="run one training")
    t.add_argument("config")
    t.add_argument("--seed", type=int, default=None, help="override train.seed")
    t.add_argument("--out", default="run", help="output directory (default: run)")
    t.set_defaults(func=cmd_train)

    a = sub.add_parser("analyze", help="i*/tau histogram and retention report")
    a.add_argument("trajectory")
    a.add_argument("final")
    a.add_argument("--init", help="initial token checkpoint (default: init.zck beside the trajectory)")
    a.add_argument("--config", help="run configuration, needed with --k")
    a.add_argument("--snapshots", help="snapshot CSV (default: snapshots.csv beside the trajectory)")
    a.add_argument("--k", type=lambda s: [int(x) for x in s.split(",")], default=None,
                   help="comma separated component counts to retain")
    a.add_argument("--out", help="output directory (default: beside the trajectory)")
    a.set_defaults(func=cmd_analyze)

    e = sub.add_parser("eval", help="evaluate a checkpoint")
    e.add_argument("checkpoint")
    e.add_argument("--config", required=True)
    e.set_defaults(func=cmd_eval)

    s = sub.add_parser("sweep", help="one training per grid cell")
    s.add_argument("config")
    s.add_argument("--grid", action="append", required=True, metavar="KEY=V1,V2,...")
    s.add_argument("--seed", type=int, default=None, help="base seed; cell i uses base + i")
    s.add_argument("--jobs", type=int, default=1)
    s.add_argument("--out", help="CSV path (default: stdout)")
    s.set_defaults(func=cmd_sweep)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except CliError as exc:
        print(f"zotoken {args.command}: {exc}", file=sys.stderr)
        return exc.code


if __name__ == "__main__":
    sys.exit(main())
