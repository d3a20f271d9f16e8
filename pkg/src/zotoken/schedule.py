"""DDPM noise schedule, forward noising and partial uniform timestep sampling.

Timesteps are 1-indexed: ``alpha_bar(t)`` is the product of ``1 - beta_s`` for
``s = 1..t``.  A sampling window ``(t_lower, t_upper)`` draws uniformly from the
integers ``t_lower + 1 .. t_upper``, so adjacent windows on a grid never share
a timestep and ``(0, T)`` is plain uniform sampling over all of them.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .numerics import SeededStream, uniform_int


@dataclass(frozen=True)
class NoiseSchedule:
    T: int
    beta: np.ndarray
    alpha_bar: np.ndarray

    def abar(self, t: int) -> float:
        check_timestep(t, self.T)
        return float(self.alpha_bar[t - 1])

    def snr(self, t: int) -> float:
        ab = self.abar(t)
        return ab / (1.0 - ab)


@dataclass(frozen=True)
class PutsWindow:
    t_lower: int
    t_upper: int

    def validate(self, T: int) -> "PutsWindow":
        if not 0 <= self.t_lower < self.t_upper <= T:
            raise ValueError(f"invalid timestep window ({self.t_lower}, {self.t_upper}] for T={T}")
        return self

    @property
    def size(self) -> int:
        return self.t_upper - self.t_lower

    def __contains__(self, t: int) -> bool:
        return self.t_lower < t <= self.t_upper


def check_timestep(t: int, T: int) -> None:
    if not 1 <= t <= T:
        raise ValueError(f"timestep {t} outside [1, {T}]")


def build_schedule(T: int = 1000, kind: str = "scaled-linear",
                   beta_start: float = 8.5e-4, beta_end: float = 1.2e-2) -> NoiseSchedule:
    if T < 2:
        raise ValueError(f"T must be >= 2, got {T}")
    if not 0.0 < beta_start <= beta_end < 1.0:
        raise ValueError(f"need 0 < beta_start <= beta_end < 1, got ({beta_start}, {beta_end})")
    if kind == "linear":
        beta = np.linspace(beta_start, beta_end, T)
    elif kind == "scaled-linear":
        beta = np.linspace(np.sqrt(beta_start), np.sqrt(beta_end), T) ** 2
    else:
        raise ValueError(f"unknown schedule kind {kind!r}")
    alpha_bar = np.cumprod(1.0 - beta)
    return NoiseSchedule(T=T, beta=beta, alpha_bar=alpha_bar)


def sample_timestep(window: PutsWindow, stream: SeededStream) -> int:
    """Uniform timestep in ``(t_lower, t_upper]``; consumes one stream word."""
    return window.t_lower + 1 + uniform_int(stream, window.size)


def sample_outside(window: PutsWindow, T: int, stream: SeededStream) -> int:
    """Uniform timestep in ``[1, T]`` excluding the window; consumes one word."""
    n_out = T - window.size
    if n_out < 1:
        raise ValueError("window covers every timestep")
    k = uniform_int(stream, n_out) + 1
    return k if k <= window.t_lower else k + window.size


def forward_noise(z, t: int, eps, sched: NoiseSchedule) -> np.ndarray:
    z = np.asarray(z, dtype=np.float64)
    eps = np.asarray(eps, dtype=np.float64)
    if z.shape != eps.shape:
        raise ValueError(f"latent shape {z.shape} != noise shape {eps.shape}")
    ab = sched.abar(t)
    return np.sqrt(ab) * z + np.sqrt(1.0 - ab) * eps
