"""A frozen toy denoiser conditioned on a single token embedding.

The model predicts noise from a gated conditional mean::

    m(t, theta) = gate(t) * decode(E @ theta) + (1 - gate(t)) * z_bar
    eps_hat     = (z_t - sqrt(abar_t) * m) / sqrt(1 - abar_t)

so with ``z_t`` built from a reference latent ``z`` the single-sample loss is
exactly ``abar_t / (1 - abar_t) * ||z - m||**2`` whatever the noise draw.  The
gate is a smoothstep that is 0 up to ``gate_lo`` and 1 from ``gate_hi`` on:
below the gate the loss does not depend on the token at all.

``decode`` is linear (``W_g @ c``) or a tanh MLP (``W2 @ tanh(W1 @ c)``).
Weights are drawn from N(0, 1/fan_in) and, when quantized, stored only as
integer codes and dequantized for each forward pass.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .numerics import SeededStream, gaussian_vector, symmetric_eigen
from .quantizer import QuantizedTensor, dequantize, quantize
from .schedule import NoiseSchedule, check_timestep, forward_noise


@dataclass(frozen=True)
class ConceptDataset:
    z_star: np.ndarray
    sigma_ref: float
    references: np.ndarray  # (count, m)

    def __len__(self) -> int:
        return self.references.shape[0]


def generate_dataset(stream: SeededStream, m: int, count: int, sigma_ref: float) -> ConceptDataset:
    if count < 1:
        raise ValueError("need at least one reference")
    if sigma_ref < 0:
        raise ValueError("sigma_ref must be non-negative")
    z_star = gaussian_vector(stream, m)
    refs = np.stack([z_star + sigma_ref * gaussian_vector(stream, m) for _ in range(count)])
    return ConceptDataset(z_star=z_star, sigma_ref=float(sigma_ref), references=refs)


def _dense(w) -> np.ndarray:
    return dequantize(w) if isinstance(w, QuantizedTensor) else w


@dataclass(frozen=True)
class FrozenToyModel:
    encoder: np.ndarray | QuantizedTensor            # (m_c, d)
    layers: tuple                                    # (W_g,) or (W1, W2)
    gate_lo: float = 400.0
    gate_hi: float = 500.0
    z_bar: np.ndarray = field(default=None)

    def __post_init__(self):
        if not self.gate_hi > self.gate_lo:
            raise ValueError("gate_hi must exceed gate_lo")
        if self.z_bar is None:
            object.__setattr__(self, "z_bar", np.zeros(self.m))
        for w in (self.encoder, *self.layers, self.z_bar):
            if isinstance(w, np.ndarray):
                w.setflags(write=False)

    @property
    def decoder(self) -> str:
        return "linear" if len(self.layers) == 1 else "mlp"

    @property
    def quantized(self) -> bool:
        return isinstance(self.encoder, QuantizedTensor)

    @property
    def d(self) -> int:
        return self.encoder.shape[1]

    @property
    def m(self) -> int:
        return self.layers[-1].shape[0]

    def weights(self) -> tuple[np.ndarray, ...]:
        """Dense (dequantized) encoder and decoder matrices."""
        return (_dense(self.encoder),) + tuple(_dense(w) for w in self.layers)

    def gate(self, t) -> float:
        x = min(max((t - self.gate_lo) / (self.gate_hi - self.gate_lo), 0.0), 1.0)
        return x * x * (3.0 - 2.0 * x)

    def decode(self, theta) -> np.ndarray:
        """g(c(theta)): the conditional latent the token maps to."""
        w = self.weights()
        c = w[0] @ theta
        if len(w) == 2:
            return w[1] @ c
        return w[2] @ np.tanh(w[1] @ c)

    def composite(self) -> np.ndarray:
        """W_g @ E for the linear decoder."""
        if self.decoder != "linear":
            raise ValueError("composite map only exists for the linear decoder")
        e, wg = self.weights()
        return wg @ e

    def conditional_mean(self, t: int, theta) -> np.ndarray:
        g = self.gate(t)
        if g == 0.0:
            return self.z_bar.copy()
        return g * self.decode(theta) + (1.0 - g) * self.z_bar

    def parameter_counts(self) -> dict:
        ints = floats = 0
        for w in (self.encoder, *self.layers):
            if isinstance(w, QuantizedTensor):
                ints += w.codes.size
                floats += w.scale.size
            else:
                floats += w.size
        floats += self.z_bar.size
        return {"integer": ints, "float": floats, "quantized_fraction": ints / (ints + floats)}


def build_model(stream: SeededStream, d: int = 64, m: int = 8, m_c: int = 8, decoder: str = "linear",
                hidden: int = 32, gate_lo: float = 400.0, gate_hi: float = 500.0,
                quant_bits: int = 0, granularity: str = "per-tensor") -> FrozenToyModel:
    def draw(rows, cols):
        return gaussian_vector(stream, rows * cols).reshape(rows, cols) / np.sqrt(cols)

    encoder = draw(m_c, d)
    if decoder == "linear":
        layers = (draw(m, m_c),)
    elif decoder == "mlp":
        layers = (draw(hidden, m_c), draw(m, hidden))
    else:
        raise ValueError(f"unknown decoder {decoder!r}")
    if quant_bits:
        encoder = quantize(encoder, quant_bits, granularity)
        layers = tuple(quantize(w, quant_bits, granularity) for w in layers)
    return FrozenToyModel(encoder=encoder, layers=layers, gate_lo=gate_lo, gate_hi=gate_hi)


def predict_noise(model: FrozenToyModel, z_t, t: int, theta, sched: NoiseSchedule) -> np.ndarray:
    ab = sched.abar(t)
    return (z_t - np.sqrt(ab) * model.conditional_mean(t, theta)) / np.sqrt(1.0 - ab)


def ldm_loss(model, dataset, theta, t, eps, ref_index, sched) -> float:
    """Single-sample Monte Carlo estimate of the denoising loss."""
    z_t = forward_noise(dataset.references[ref_index], t, eps, sched)
    r = eps - predict_noise(model, z_t, t, theta, sched)
    return float(r @ r)


def ldm_loss_closed_form(model, dataset, theta, t, ref_index, sched) -> float:
    r = dataset.references[ref_index] - model.conditional_mean(t, theta)
    return sched.snr(t) * float(r @ r)


def recovery_error(model: FrozenToyModel, dataset: ConceptDataset, theta) -> float:
    return float(np.linalg.norm(model.decode(theta) - dataset.z_star) / np.linalg.norm(dataset.z_star))


def analytic_token_optimum(model: FrozenToyModel, dataset: ConceptDataset, target=None):
    """Minimum-norm token with ``W_g E theta = z_star`` via the pseudo-inverse.

    Returns ``(theta_star, achievable)``; ``achievable`` is whether the
    relative residual is below 1e-8.
    """
    a = model.composite()
    z = dataset.z_star if target is None else np.asarray(target, dtype=np.float64)
    eig = symmetric_eigen(a @ a.T)
    lam = eig.eigenvalues
    sigma = np.sqrt(np.clip(lam, 0.0, None))
    keep = sigma > 1e-10 * sigma[0] if sigma[0] > 0 else np.zeros_like(sigma, dtype=bool)
    u = eig.eigenvectors[:, keep]
    theta = a.T @ (u @ ((u.T @ z) / lam[keep]))
    residual = np.linalg.norm(a @ theta - z) / np.linalg.norm(z)
    return theta, bool(residual < 1e-8)


def first_order_oracle_gradient(model, dataset, theta, t, eps, ref_index, sched) -> np.ndarray:
    """Exact gradient of ``ldm_loss`` in theta, through the dequantized weights."""
    check_timestep(t, sched.T)
    g = model.gate(t)
    if g == 0.0:
        return np.zeros(model.d)
    ab = sched.abar(t)
    k = np.sqrt(ab) / np.sqrt(1.0 - ab)
    z_t = forward_noise(dataset.references[ref_index], t, eps, sched)
    r = eps - predict_noise(model, z_t, t, theta, sched)
    upstream = 2.0 * k * g * r  # dL/d decode(c)
    w = model.weights()
    if len(w) == 2:
        return w[0].T @ (w[1].T @ upstream)
    h = np.tanh(w[1] @ (w[0] @ theta))
    return w[0].T @ (w[1].T @ ((1.0 - h * h) * (w[2].T @ upstream)))
