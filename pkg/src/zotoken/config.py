"""Flat ``section.key = value`` configuration with typed defaults.

Lines are ``key = value``; ``#`` starts a comment.  Unknown keys, repeated
keys and unparsable values are errors that name the key and line.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

from .estimators import EstimatorConfig
from .optim import OptimizerState
from .schedule import PutsWindow, build_schedule

# key -> (type, default, help)
SCHEMA = {
    "schedule.kind": (str, "scaled-linear", "linear | scaled-linear"),
    "schedule.T": (int, 1000, "number of diffusion timesteps"),
    "schedule.beta_start": (float, 8.5e-4, "first beta"),
    "schedule.beta_end": (float, 1.2e-2, "last beta"),
    "puts.t_lower": (int, 500, "timesteps are drawn from (t_lower, t_upper]"),
    "puts.t_upper": (int, 900, ""),
    "toy.d": (int, 64, "token dimension"),
    "toy.m": (int, 8, "latent dimension"),
    "toy.m_c": (int, 8, "condition dimension"),
    "toy.decoder": (str, "linear", "linear | mlp"),
    "toy.hidden": (int, 32, "MLP hidden width"),
    "toy.gate_lo": (float, 400.0, "conditioning gate is 0 up to here"),
    "toy.gate_hi": (float, 500.0, "and 1 from here on"),
    "toy.sigma_ref": (float, 0.05, "spread of the references around the concept"),
    "toy.refs": (int, 5, "number of references"),
    "toy.quant_bits": (int, 8, "0 = full precision, else 4 or 8"),
    "toy.quant_granularity": (str, "per-tensor", "per-tensor | per-channel"),
    "toy.weight_seed": (int, 0, "seed of the frozen weights"),
    "toy.data_seed": (int, 1, "seed of the concept, references and initial token"),
    "toy.init_scale": (float, 1.0, "initial token ~ init_scale * N(0, I)"),
    "estimator.method": (str, "rge", "rge | spsa | one-point | first-order"),
    "estimator.n": (int, 2, "probe directions per estimate"),
    "estimator.mu": (float, 1e-3, "perturbation size"),
    "estimator.share_noise": (bool, True, "reuse one noise draw for every loss call of an estimate"),
    "sg.enabled": (bool, True, "project estimates with the trajectory basis"),
    "sg.tau": (int, 32, "trajectory buffer length"),
    "sg.nu": (float, 1e-3, "variance mass left to the removed directions"),
    "sg.remove_null_dims": (bool, False, "also remove directions the trajectory never visited"),
    "optim.kind": (str, "adam", "adam | sgd"),
    "optim.eta": (float, 5e-3, "learning rate"),
    "optim.beta1": (float, 0.9, ""),
    "optim.beta2": (float, 0.999, ""),
    "optim.eps": (float, 1e-8, ""),
    "train.iterations": (int, 30000, "total iterations L"),
    "train.seed": (int, 0, "run seed (timesteps, references, noise, probes)"),
    "train.eval_interval": (int, 100, "iterations between metrics records"),
    "train.eval_draws": (int, 1000, "draws per windowed loss evaluation"),
}

_TRUE = {"true", "1", "yes", "on"}
_FALSE = {"false", "0", "no", "off"}


class ConfigError(ValueError):
    pass


def _coerce(key: str, raw, where: str = ""):
    typ = SCHEMA[key][0]
    if isinstance(raw, typ) and not (typ is int and isinstance(raw, bool)):
        return raw
    text = str(raw).strip()
    try:
        if typ is bool:
            low = text.lower()
            if low in _TRUE:
                return True
            if low in _FALSE:
                return False
            raise ValueError(text)
        if typ is int:
            value = float(text) if any(c in text for c in ".eE") else int(text)
            if isinstance(value, float):
                if not value.is_integer():
                    raise ValueError(text)
                value = int(value)
            return value
        return typ(text)
    except ValueError:
        raise ConfigError(f"{where}{key}: cannot parse {text!r} as {typ.__name__}") from None


def parse_config_text(text: str, source: str = "<config>") -> dict:
    out = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        where = f"{source}:{lineno}: "
        if "=" not in line:
            raise ConfigError(f"{where}expected 'key = value', got {line!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        if key not in SCHEMA:
            raise ConfigError(f"{where}unknown key {key!r}")
        if key in out:
            raise ConfigError(f"{where}duplicate key {key!r}")
        out[key] = _coerce(key, value, where)
    return out


def format_value(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    return str(value)


@dataclass(frozen=True)
class TrainConfig:
    values: dict = field(default_factory=dict)

    def __post_init__(self):
        merged = {k: v[1] for k, v in SCHEMA.items()}
        for k, v in self.values.items():
            if k not in SCHEMA:
                raise ConfigError(f"unknown key {k!r}")
            merged[k] = _coerce(k, v)
        object.__setattr__(self, "values", merged)

    def __getitem__(self, key: str):
        return self.values[key]

    def replace(self, overrides: dict) -> "TrainConfig":
        return TrainConfig({**self.values, **overrides})

    def text(self) -> str:
        return "".join(f"{k} = {format_value(v)}\n" for k, v in self.values.items())

    # sub-configs -----------------------------------------------------------
    def schedule(self):
        v = self.values
        return build_schedule(v["schedule.T"], v["schedule.kind"], v["schedule.beta_start"], v["schedule.beta_end"])

    def window(self) -> PutsWindow:
        return PutsWindow(self["puts.t_lower"], self["puts.t_upper"])

    def estimator(self) -> EstimatorConfig | None:
        """``None`` for the first-order method, which is not an estimator."""
        if self["estimator.method"] == "first-order":
            return None
        return EstimatorConfig(self["estimator.method"], self["estimator.n"], self["estimator.mu"],
                               self["estimator.share_noise"])

    def optimizer(self) -> OptimizerState:
        v = self.values
        return OptimizerState(kind=v["optim.kind"], eta=v["optim.eta"], beta1=v["optim.beta1"],
                              beta2=v["optim.beta2"], eps=v["optim.eps"])

    def validate(self) -> "TrainConfig":
        v = self.values
        problems = []

        def check(ok, msg):
            if not ok:
                problems.append(msg)

        check(v["train.iterations"] >= 1, "train.iterations must be >= 1")
        check(v["train.eval_interval"] >= 1, "train.eval_interval must be >= 1")
        check(v["train.eval_draws"] >= 1, "train.eval_draws must be >= 1")
        check(0 <= v["train.seed"] < 2 ** 64, "train.seed must fit in 64 bits")
        check(v["toy.decoder"] in ("linear", "mlp"), "toy.decoder must be linear or mlp")
        check(v["toy.quant_bits"] in (0, 4, 8), "toy.quant_bits must be 0, 4 or 8")
        check(v["toy.quant_granularity"] in ("per-tensor", "per-channel"),
              "toy.quant_granularity must be per-tensor or per-channel")
        check(v["toy.refs"] >= 1, "toy.refs must be >= 1")
        check(v["toy.sigma_ref"] >= 0, "toy.sigma_ref must be >= 0")
        check(min(v["toy.d"], v["toy.m"], v["toy.m_c"], v["toy.hidden"]) >= 1, "toy dimensions must be >= 1")
        check(v["toy.gate_hi"] > v["toy.gate_lo"], "toy.gate_hi must exceed toy.gate_lo")
        check(v["estimator.method"] in ("rge", "spsa", "one-point", "first-order"),
              "estimator.method must be rge, spsa, one-point or first-order")
        check(v["sg.tau"] >= 2, "sg.tau must be >= 2")
        check(0 < v["sg.nu"] < 1, "sg.nu must be in (0, 1)")
        if v["sg.enabled"]:
            check(v["sg.tau"] < v["toy.d"], "sg.tau must be < toy.d when sg.enabled")
        check(0 <= v["puts.t_lower"] < v["puts.t_upper"] <= v["schedule.T"],
              "need 0 <= puts.t_lower < puts.t_upper <= schedule.T")
        if problems:
            raise ConfigError("; ".join(problems))
        for build in (self.schedule, self.estimator, self.optimizer):
            try:
                build()
            except ValueError as exc:
                raise ConfigError(str(exc)) from None
        return self


def load_config(path) -> TrainConfig:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except FileNotFoundError:
        raise FileNotFoundError(f"config file not found: {path}") from None
    return TrainConfig(parse_config_text(text, str(path))).validate()
