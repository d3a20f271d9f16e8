"""The training loop, checkpoints and evaluation for the toy token problem.

Per iteration ``l = 1..L``: draw a reference index and a timestep from the
window, freeze them (and, with shared noise, one noise vector) for every
loss call of the estimate, estimate the gradient, project it with the
current basis, take an optimizer step, and write the new token to buffer
row ``(l - 1) mod tau``.  At ``l = tau, 2 tau, ...`` the basis is rebuilt
from the full buffer and the buffer is cleared, so basis ``b`` only sees the
tokens from iterations ``((b-1) tau, b tau]``.  The first ``tau`` iterations
run unprojected.

Random streams are derived from ``train.seed``: one for references and
timesteps, one for noise, one for probe directions.  Model weights and the
concept come from ``toy.weight_seed`` and ``toy.data_seed`` and do not change
with the run seed; neither does the fixed evaluation set.
"""

from __future__ import annotations

import json
import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from .config import TrainConfig
from .estimators import EVALUATIONS, estimate
from .ledger import AllocationLedger
from .numerics import SeededStream, derive_seed, gaussian_vector, uniform_int
from .schedule import sample_outside, sample_timestep
from .subspace import TrajectoryBuffer, compute_basis, empty_basis, normalize_buffer
from .toy import ConceptDataset, FrozenToyModel, build_model, first_order_oracle_gradient, generate_dataset, \
    ldm_loss, recovery_error

log = logging.getLogger(__name__)

CKPT_MAGIC = b"ZCK1"
_STREAM_SAMPLE, _STREAM_NOISE, _STREAM_PROBE = 1, 2, 3
_EVAL_INSIDE, _EVAL_OUTSIDE = 7, 8


class CheckpointFormatError(ValueError):
    pass


class TrainingAborted(RuntimeError):
    def __init__(self, iteration: int, reason: str, last_good: np.ndarray):
        super().__init__(f"iteration {iteration}: {reason}")
        self.iteration = iteration
        self.last_good = last_good


# ---------------------------------------------------------------------------
# checkpoints


def save_checkpoint(theta, path) -> int:
    """Write ``ZCK1 | u32 d | f32[d]`` little-endian; returns ``8 + 4d``."""
    theta = np.asarray(theta)
    data = CKPT_MAGIC + struct.pack("<I", theta.size) + np.ascontiguousarray(theta, dtype="<f4").tobytes()
    try:
        Path(path).write_bytes(data)
    except OSError as exc:
        raise OSError(f"cannot write checkpoint {path}: {exc.strerror or exc}") from exc
    return len(data)


def load_checkpoint(path) -> np.ndarray:
    try:
        data = Path(path).read_bytes()
    except OSError as exc:
        raise OSError(f"cannot read checkpoint {path}: {exc.strerror or exc}") from exc
    if data[:4] != CKPT_MAGIC:
        raise CheckpointFormatError(f"{path}: expected magic {CKPT_MAGIC!r}, found {data[:4]!r}")
    if len(data) < 8:
        raise CheckpointFormatError(f"{path}: truncated header ({len(data)} bytes)")
    (d,) = struct.unpack_from("<I", data, 4)
    if len(data) != 8 + 4 * d:
        raise CheckpointFormatError(f"{path}: header says d={d} ({8 + 4 * d} bytes), file has {len(data)}")
    return np.frombuffer(data, dtype="<f4", count=d, offset=8).astype(np.float64)


# ---------------------------------------------------------------------------
# problem construction and evaluation


@dataclass(frozen=True)
class Problem:
    model: FrozenToyModel
    dataset: ConceptDataset
    sched: object
    theta_init: np.ndarray


def build_problem(cfg: TrainConfig) -> Problem:
    v = cfg.values
    wstream = SeededStream(derive_seed(v["toy.weight_seed"], 0))
    model = build_model(wstream, d=v["toy.d"], m=v["toy.m"], m_c=v["toy.m_c"], decoder=v["toy.decoder"],
                        hidden=v["toy.hidden"], gate_lo=v["toy.gate_lo"], gate_hi=v["toy.gate_hi"],
                        quant_bits=v["toy.quant_bits"], granularity=v["toy.quant_granularity"])
    dstream = SeededStream(derive_seed(v["toy.data_seed"], 0))
    dataset = generate_dataset(dstream, v["toy.m"], v["toy.refs"], v["toy.sigma_ref"])
    theta0 = v["toy.init_scale"] * gaussian_vector(dstream, v["toy.d"])
    return Problem(model, dataset, cfg.schedule(), theta0)


def eval_draws(cfg: TrainConfig, inside: bool = True) -> list[tuple[int, int, np.ndarray]]:
    """The fixed ``(t, ref_index, eps)`` evaluation set for a config."""
    v = cfg.values
    window, T = cfg.window(), v["schedule.T"]
    if not inside and window.size == T:
        return []
    s = SeededStream(derive_seed(v["toy.data_seed"], _EVAL_INSIDE if inside else _EVAL_OUTSIDE))
    out = []
    for _ in range(v["train.eval_draws"]):
        t = sample_timestep(window, s) if inside else sample_outside(window, T, s)
        ref = uniform_int(s, v["toy.refs"])
        out.append((t, ref, gaussian_vector(s, v["toy.m"])))
    return out


def mean_loss(problem: Problem, theta, draws) -> float | None:
    if not draws:
        return None
    return float(np.mean([ldm_loss(problem.model, problem.dataset, theta, t, eps, ref, problem.sched)
                          for t, ref, eps in draws]))


def evaluate(cfg: TrainConfig, theta, problem: Problem | None = None) -> dict:
    problem = problem or build_problem(cfg)
    rec = recovery_error(problem.model, problem.dataset, theta) if problem.model.decoder == "linear" else None
    return {
        "recovery_error": rec,
        "loss_inside": mean_loss(problem, theta, eval_draws(cfg, True)),
        "loss_outside": mean_loss(problem, theta, eval_draws(cfg, False)),
    }


def windowed_loss(cfg: TrainConfig, problem: Problem) -> Callable[[np.ndarray], float]:
    """Mean loss over the fixed in-window evaluation set, as a function of the token."""
    draws = eval_draws(cfg, True)
    return lambda theta: mean_loss(problem, theta, draws)


# ---------------------------------------------------------------------------
# training


@dataclass
class Refresh:
    iteration: int
    i_star: int
    removed_fraction: float
    spectrum: np.ndarray


@dataclass
class TrainResult:
    theta: np.ndarray
    theta_init: np.ndarray
    metrics: list = field(default_factory=list)
    refreshes: list = field(default_factory=list)
    ledger: AllocationLedger = field(default_factory=AllocationLedger)
    evaluations: int = 0
    problem: Problem | None = None


def evaluations_per_iteration(cfg: TrainConfig) -> int:
    method = cfg["estimator.method"]
    return 1 if method == "first-order" else EVALUATIONS[method](cfg["estimator.n"])


def train(cfg: TrainConfig, on_metrics: Callable[[dict], None] | None = None,
          on_snapshot: Callable[[int, np.ndarray], None] | None = None,
          problem: Problem | None = None,
          on_step: Callable[[int, np.ndarray], None] | None = None) -> TrainResult:
    """Run the loop.

    ``on_snapshot(l, theta)`` fires at ``l = 0`` and every ``sg.tau`` iterations;
    ``on_step(l, theta)`` after every update.
    """
    cfg.validate()
    v = cfg.values
    problem = problem or build_problem(cfg)
    model, data, sched = problem.model, problem.dataset, problem.sched
    d, tau, L = v["toy.d"], v["sg.tau"], v["train.iterations"]
    sg_on = v["sg.enabled"]
    window = cfg.window()
    est_cfg = cfg.estimator()
    opt = cfg.optimizer()
    seed = v["train.seed"]
    sample_s = SeededStream(derive_seed(seed, _STREAM_SAMPLE))
    noise_s = SeededStream(derive_seed(seed, _STREAM_NOISE))
    probe_s = SeededStream(derive_seed(seed, _STREAM_PROBE))
    per_iter = evaluations_per_iteration(cfg)
    linear = model.decoder == "linear"

    ledger = AllocationLedger()
    buffer = TrajectoryBuffer(tau, d) if sg_on else None
    basis = empty_basis(tau, d)
    theta = problem.theta_init.copy()
    result = TrainResult(theta=theta, theta_init=problem.theta_init.copy(), ledger=ledger, problem=problem)
    ledger.set("theta", d)
    ledger.set("last_good", d)
    ledger.set("buffer", tau * d if sg_on else 0)
    if on_snapshot:
        on_snapshot(0, theta)

    evals = 0
    last = None  # (i_star, removed_fraction) of the latest refresh
    for l in range(1, L + 1):
        ref = uniform_int(sample_s, len(data))
        t = sample_timestep(window, sample_s)
        if est_cfg is None or est_cfg.share_noise:
            eps = gaussian_vector(noise_s, data.references.shape[1])
            loss = lambda x: ldm_loss(model, data, x, t, eps, ref, sched)  # noqa: E731
        else:
            loss = lambda x: ldm_loss(model, data, x, t, gaussian_vector(noise_s, data.references.shape[1]),  # noqa: E731
                                      ref, sched)

        try:
            if est_cfg is None:
                g = first_order_oracle_gradient(model, data, theta, t, eps, ref, sched)
                loss_theta = loss(theta)
                used = 1
            else:
                est = estimate(loss, theta, est_cfg, probe_s)
                g, loss_theta, used = est.g_hat, est.loss_at_theta, est.evaluations
                ledger.note_transient(est.transient_peak)
        except ArithmeticError as exc:
            raise TrainingAborted(l, str(exc), theta.copy()) from exc
        assert used == per_iter
        evals += used

        if sg_on and not basis.empty:
            g = basis.project(g)
        try:
            new_theta = opt.step(theta, g)
        except FloatingPointError as exc:
            raise TrainingAborted(l, str(exc), theta.copy()) from exc
        if not np.all(np.isfinite(new_theta)):
            raise TrainingAborted(l, "non-finite token after update", theta.copy())
        theta = new_theta
        ledger.set("moments", opt.floats)
        if on_step:
            on_step(l, theta)

        if sg_on:
            buffer.write((l - 1) % tau, theta)
            if l % tau == 0:
                basis = compute_basis(normalize_buffer(buffer), v["sg.nu"], v["sg.remove_null_dims"])
                buffer.clear()
                ledger.set("basis", basis.stored_rows * d)
                last = (basis.i_star, basis.removed_fraction)
                result.refreshes.append(Refresh(l, basis.i_star, basis.removed_fraction, basis.spectrum))
                allowed = basis.i_star if v["sg.remove_null_dims"] else tau - basis.i_star
                ledger.check(d, tau, allowed)
        if on_snapshot and l % tau == 0:
            on_snapshot(l, theta)

        if l % v["train.eval_interval"] == 0 or l == L:
            rec = {
                "iteration": l,
                "loss_at_theta": loss_theta,
                "recovery_error": recovery_error(model, data, theta) if linear else None,
                "i_star": last[0] if last else None,
                "removed_fraction": last[1] if last else None,
                "loss_evaluations": evals,
                "peak_auxiliary_floats": ledger.total_persistent + ledger.transient_peak,
            }
            result.metrics.append(rec)
            if on_metrics:
                on_metrics(rec)

    result.theta = theta
    result.evaluations = evals
    ledger.check(d, tau, (basis.i_star if v["sg.remove_null_dims"] else tau - basis.i_star) if sg_on else 0)
    return result


def account_memory(ledger: AllocationLedger, cfg: TrainConfig) -> dict:
    """Per-category float counts and the bound they were checked against."""
    d, tau = cfg["toy.d"], cfg["sg.tau"]
    rep = ledger.report()
    rep["bound_without_basis"] = d * (tau + 4)
    rep["estimator_transient_bound"] = 3 * d
    return rep


def metrics_line(rec: dict) -> str:
    return json.dumps(rec, sort_keys=False)
