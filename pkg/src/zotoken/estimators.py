"""Forward-only gradient estimators with seed-replayed probe directions.

All three estimators draw standard-normal directions from a ``SeededStream``.
Probe ``i`` (0-based) lives at counter ``start + i * normal_words(d)`` where
``start`` is the stream position on entry, so every direction is fixed before
any loss is evaluated and can be regenerated from its ``(seed, counter)``
handle with ``replay_probe``.  Nothing of size ``n * d`` is ever held: at any
instant an estimator keeps at most one probe, one candidate point and one
accumulator (``3 * d`` floats).

Loss-evaluation counts::

    rge        n + 1   (baseline shared by all probes)
    spsa       2n      (2n + 1 when the baseline is requested)
    one-point  n + 1   (directions e_1..e_{n+1}, baseline never evaluated)
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .ledger import TransientCounter
from .numerics import SeededStream, gaussian_at, normal_words

METHODS = ("rge", "spsa", "one-point")
EVALUATIONS = {
    "rge": lambda n: n + 1,
    "spsa": lambda n: 2 * n,
    "one-point": lambda n: n + 1,
}


class NonFiniteLossError(ArithmeticError):
    """A loss call returned NaN or Inf.

    ``probe_index`` is 0 for the unperturbed point and ``i`` (1-based) for the
    evaluation that used direction ``e_i``; for SPSA the sign is in ``side``.
    """

    def __init__(self, probe_index: int, value: float, side: int = 1):
        self.probe_index = probe_index
        self.value = value
        self.side = side
        where = "theta" if probe_index == 0 else f"probe {probe_index}" + ("" if side > 0 else " (minus side)")
        super().__init__(f"non-finite loss {value!r} at {where}")


@dataclass(frozen=True)
class EstimatorConfig:
    method: str = "rge"
    n: int = 2
    mu: float = 1e-3
    share_noise: bool = True

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"unknown estimator {self.method!r}; choose from {METHODS}")
        if self.n < 1:
            raise ValueError(f"estimator.n must be >= 1, got {self.n}")
        if not self.mu > 0:
            raise ValueError(f"estimator.mu must be > 0, got {self.mu}")

    @property
    def evaluations(self) -> int:
        return EVALUATIONS[self.method](self.n)


@dataclass
class GradientEstimate:
    g_hat: np.ndarray
    loss_at_theta: float | None
    evaluations: int
    probe_seeds: list = field(default_factory=list)
    transient_peak: int = 0   # floats, excluding the loss function's own scratch


class CountingLoss:
    """Wraps a loss callable and counts calls."""

    def __init__(self, fn: Callable[[np.ndarray], float]):
        self.fn = fn
        self.calls = 0

    def __call__(self, theta) -> float:
        self.calls += 1
        return self.fn(theta)


def replay_probe(handle: tuple[int, int], dim: int) -> np.ndarray:
    seed, counter = handle
    return gaussian_at(seed, counter, dim)


def _handles(stream: SeededStream, count: int, dim: int) -> list[tuple[int, int]]:
    w = normal_words(dim)
    handles = [(stream.seed, stream.counter + i * w) for i in range(count)]
    stream.advance(count * w)
    return handles


def _checked(loss, x, index, side=1) -> float:
    v = float(loss(x))
    if not math.isfinite(v):
        raise NonFiniteLossError(index, v, side)
    return v


def _check_config(config: EstimatorConfig, method: str):
    if config.method != method:
        raise ValueError(f"config.method is {config.method!r}, expected {method!r}")


def estimate_rge(loss, theta, config: EstimatorConfig, stream: SeededStream) -> GradientEstimate:
    _check_config(config, "rge")
    theta = np.asarray(theta, dtype=np.float64)
    d, n, mu = theta.size, config.n, config.mu
    tc = TransientCounter()
    handles = _handles(stream, n, d)
    base = _checked(loss, theta, 0)
    acc = np.zeros(d); tc.alloc(d)
    for i, h in enumerate(handles, start=1):
        e = replay_probe(h, d); tc.alloc(d)
        cand = theta + mu * e; tc.alloc(d)
        coeff = (_checked(loss, cand, i) - base) / mu
        del cand; tc.free(d)
        acc += coeff * e
        del e; tc.free(d)
    acc /= n
    return GradientEstimate(acc, base, n + 1, handles, tc.peak)


def estimate_spsa(loss, theta, config: EstimatorConfig, stream: SeededStream,
                  with_loss_at_theta: bool = False) -> GradientEstimate:
    _check_config(config, "spsa")
    theta = np.asarray(theta, dtype=np.float64)
    d, n, mu = theta.size, config.n, config.mu
    tc = TransientCounter()
    handles = _handles(stream, n, d)
    acc = np.zeros(d); tc.alloc(d)
    for i, h in enumerate(handles, start=1):
        e = replay_probe(h, d); tc.alloc(d)
        cand = theta + mu * e; tc.alloc(d)
        plus = _checked(loss, cand, i)
        np.subtract(theta, mu * e, out=cand)
        minus = _checked(loss, cand, i, side=-1)
        del cand; tc.free(d)
        acc += ((plus - minus) / (2.0 * mu)) * e
        del e; tc.free(d)
    acc /= n
    base, evals = None, 2 * n
    if with_loss_at_theta:
        base, evals = _checked(loss, theta, 0), evals + 1
    return GradientEstimate(acc, base, evals, handles, tc.peak)


def estimate_one_point(loss, theta, config: EstimatorConfig, stream: SeededStream) -> GradientEstimate:
    _check_config(config, "one-point")
    theta = np.asarray(theta, dtype=np.float64)
    d, n, mu = theta.size, config.n, config.mu
    tc = TransientCounter()
    handles = _handles(stream, n + 1, d)
    # pass 1: losses at theta + mu e_i, i = 1..n+1 (n+1 scalars kept)
    values = []
    for i, h in enumerate(handles, start=1):
        e = replay_probe(h, d); tc.alloc(d)
        cand = theta + mu * e; tc.alloc(d)
        values.append(_checked(loss, cand, i))
        del cand, e; tc.free(2 * d)
    # pass 2: replay e_1..e_n for the weighted sum
    acc = np.zeros(d); tc.alloc(d)
    for i in range(n):
        e = replay_probe(handles[i], d); tc.alloc(d)
        acc += ((values[i + 1] - values[i]) / mu) * e
        del e; tc.free(d)
    acc /= n
    return GradientEstimate(acc, None, n + 1, handles, tc.peak)


def estimate(loss, theta, config: EstimatorConfig, stream: SeededStream, **kw) -> GradientEstimate:
    if config.method == "rge":
        return estimate_rge(loss, theta, config, stream)
    if config.method == "spsa":
        return estimate_spsa(loss, theta, config, stream, **kw)
    return estimate_one_point(loss, theta, config, stream)
