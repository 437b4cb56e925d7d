"""Experiment configuration: INI files (configparser) with one section per concern.

Example::

    [run]
    subcommand = knudsen
    output = out/knudsen
    seed = 0

    [model]
    kappa = -1

    [grid]
    v_max = 6
    n = 12

    [knudsen]
    ds = 10, 20, 40
"""
from __future__ import annotations

import configparser
import hashlib
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

SUBCOMMANDS = ("assemble-op", "coeffs", "knudsen", "euler", "expand", "sweep", "verify")


class ConfigError(ValueError):
    """Invalid configuration; ``field`` names the offending key as section.key."""

    def __init__(self, field: str, message: str):
        super().__init__(f"{field}: {message}")
        self.field = field


@dataclass
class ExperimentConfig:
    subcommand: str = "verify"
    output: str = "out"
    seed: int = 0
    # collision model
    kappa: float = -1.0
    beta0: float = 1.0
    m: float = 0.4
    # velocity grid
    v_max: float = 6.0
    n: int = 12
    # reference state
    rho: float = 1.0
    u: tuple = (0.0, 0.0, 0.0)
    T: float = 1.0
    # weights
    T_M: float = 0.75
    frak_a: float = 0.0
    l: float = 3.0
    frak_k: float = 16.0
    # Knudsen layer
    ds: tuple = (10.0, 20.0, 40.0)
    deltas: tuple = (1e-2, 1e-3, 1e-4)
    n_list: tuple = (4, 16, 64, 256)
    per_unit: int = 6
    source: str = "burnett"
    # Euler
    delta_E: float = 1e-3
    euler_n: int = 200
    t_end: float = 0.2
    cfl: float = 0.4
    far: str = "wall"
    profile: str = "pulse"
    # expansion
    eps: tuple = (0.2, 0.1, 0.05)
    ablation_eps: float = 0.1
    knudsen_d: float = 20.0
    # sweep
    presets: tuple = ()
    extra: dict = field(default_factory=dict)

    def validate(self) -> "ExperimentConfig":
        if self.subcommand not in SUBCOMMANDS:
            raise ConfigError("run.subcommand", f"unknown subcommand {self.subcommand!r}; "
                              f"expected one of {', '.join(SUBCOMMANDS)}")
        if not -3.0 < self.kappa <= 1.0:
            raise ConfigError("model.kappa", f"must lie in (-3, 1], got {self.kappa}")
        if not self.beta0 > 0:
            raise ConfigError("model.beta0", f"must be positive, got {self.beta0}")
        if not 0 < self.m <= 1:
            raise ConfigError("model.m", f"must lie in (0, 1], got {self.m}")
        if not self.v_max > 0:
            raise ConfigError("grid.v_max", f"must be positive, got {self.v_max}")
        if self.n < 4:
            raise ConfigError("grid.n", f"need at least 4 points per axis, got {self.n}")
        if not (self.rho > 0 and self.T > 0):
            raise ConfigError("state.rho" if self.rho <= 0 else "state.T", "must be positive")
        if not 0.0 <= self.frak_a < 0.5:
            raise ConfigError("weights.frak_a", f"must lie in [0, 1/2), got {self.frak_a}")
        if self.subcommand == "knudsen" and not self.l > 2:
            raise ConfigError("weights.l", f"Knudsen runs need l > 2, got {self.l}")
        if self.T_M <= 0:
            raise ConfigError("weights.T_M", "must be positive")
        if any(d <= 0 for d in self.ds) or list(self.ds) != sorted(self.ds):
            raise ConfigError("knudsen.ds", "slab lengths must be positive and increasing")
        if any(not 0 < x <= 1 for x in self.deltas):
            raise ConfigError("knudsen.deltas", "penalisations must lie in (0, 1]")
        if self.source not in ("burnett", "none"):
            raise ConfigError("knudsen.source", f"expected burnett or none, got {self.source!r}")
        if self.far not in ("wall", "outflow"):
            raise ConfigError("euler.far", f"expected wall or outflow, got {self.far!r}")
        if self.profile not in ("pulse", "smooth"):
            raise ConfigError("euler.profile", f"expected pulse or smooth, got {self.profile!r}")
        if not 0 < self.cfl <= 1:
            raise ConfigError("euler.cfl", f"must lie in (0, 1], got {self.cfl}")
        if self.t_end < 0:
            raise ConfigError("euler.t_end", "must be non-negative")
        if any(not 0 < e <= 0.5 for e in self.eps):
            raise ConfigError("expand.eps", "every eps must lie in (0, 0.5]")
        from .presets import CRITERIA
        for p in self.presets:
            if p not in CRITERIA:
                raise ConfigError("sweep.presets", f"unknown preset {p!r}; known: {', '.join(CRITERIA)}")
        return self

    def canonical(self) -> str:
        d = asdict(self)
        d.pop("output")
        return json.dumps(d, sort_keys=True, default=list)

    def digest(self) -> str:
        return hashlib.sha256(self.canonical().encode()).hexdigest()[:16]


# section.key -> (attribute, parser)
def _floats(s):
    return tuple(float(x) for x in s.replace(",", " ").split())


def _ints(s):
    return tuple(int(x) for x in s.replace(",", " ").split())


def _words(s):
    return tuple(x for x in s.replace(",", " ").split())


_KEYS = {
    "run.subcommand": ("subcommand", str), "run.output": ("output", str), "run.seed": ("seed", int),
    "model.kappa": ("kappa", float), "model.beta0": ("beta0", float), "model.m": ("m", float),
    "grid.v_max": ("v_max", float), "grid.n": ("n", int),
    "state.rho": ("rho", float), "state.u": ("u", _floats), "state.T": ("T", float),
    "weights.T_M": ("T_M", float), "weights.frak_a": ("frak_a", float), "weights.l": ("l", float),
    "weights.frak_k": ("frak_k", float),
    "knudsen.ds": ("ds", _floats), "knudsen.deltas": ("deltas", _floats),
    "knudsen.n_list": ("n_list", _ints), "knudsen.per_unit": ("per_unit", int),
    "knudsen.source": ("source", str),
    "euler.delta_E": ("delta_E", float), "euler.n": ("euler_n", int), "euler.t_end": ("t_end", float),
    "euler.cfl": ("cfl", float), "euler.far": ("far", str), "euler.profile": ("profile", str),
    "expand.eps": ("eps", _floats), "expand.ablation_eps": ("ablation_eps", float),
    "expand.knudsen_d": ("knudsen_d", float),
    "sweep.presets": ("presets", _words),
}


def from_mapping(values: dict, base: ExperimentConfig | None = None) -> ExperimentConfig:
    """Apply {"section.key": text} entries onto a config; unknown keys are errors."""
    cfg = ExperimentConfig() if base is None else base
    for key, text in values.items():
        if key not in _KEYS:
            raise ConfigError(key, "unknown configuration key")
        attr, parse = _KEYS[key]
        try:
            val = parse(text) if isinstance(text, str) else text
        except ValueError as exc:
            raise ConfigError(key, f"cannot parse {text!r} ({exc})") from None
        if attr == "u" and len(val) != 3:
            raise ConfigError(key, "needs three components")
        setattr(cfg, attr, val)
    return cfg


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"config file not found: {path}")
    cp = configparser.ConfigParser()
    cp.optionxform = str
    try:
        cp.read(path)
    except configparser.Error as exc:
        raise ConfigError("file", f"{path}: {exc}") from None
    values = {f"{s}.{k}": v for s in cp.sections() for k, v in cp[s].items()}
    return from_mapping(values).validate()
