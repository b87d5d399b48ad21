"""
Experiment configuration: YAML file, CLI overrides and environment.

A config file holds flat keys (N, base, workers) and nested mappings
model, payoff, state, mc, converge and output. Command-line flags override
file values. ASIANEXP_OUTPUT_DIR is the default directory for output files.
"""
import logging
import os
from dataclasses import dataclass, field
from typing import Optional

import yaml

from asianexp_errors import ConfigError
from asianexp_geometry import BlockStructure
from asianexp_mc import DEFAULT_PATHS, DEFAULT_SEED, DEFAULT_STEPS_PER_UNIT, McConfig, default_workers
from asianexp_models import MODELS, PAYOFFS, bachelier_asian_model, bs_asian_model, custom_model, make_payoff
from asianexp_pricer import BASE_CHOICES, StateRule

# Configuration
OUTPUT_DIR_ENV = "ASIANEXP_OUTPUT_DIR"
FORMATS = ("json", "csv")
STATE_RULES = ("fixed", "standardized")
MIN_GRID_POINTS = 4
DEFAULT_MATURITIES = (0.25, 0.125, 0.0625, 0.03125)

logger = logging.getLogger(__name__)


def load_config(path):
    try:
        with open(path, "r", encoding="utf-8") as f:
            data = yaml.safe_load(f) or {}
    except FileNotFoundError as exc:
        raise ConfigError("config", f"file not found: {path}") from exc
    except yaml.YAMLError as exc:
        raise ConfigError("config", f"invalid YAML in {path}: {exc}") from exc
    if not isinstance(data, dict):
        raise ConfigError("config", "top level of the config file must be a mapping")
    return data


def _section(data, name):
    value = data.get(name) or {}
    if isinstance(value, str) and name in ("model", "payoff"):
        return {"id": value}
    if not isinstance(value, dict):
        raise ConfigError(name, "must be a mapping")
    return value


def _number(value, name, cast=float):
    if value is None:
        return None
    try:
        return cast(value)
    except (TypeError, ValueError) as exc:
        raise ConfigError(name, f"expected a number, got {value!r}") from exc


@dataclass
class ExperimentConfig:
    model: str = "bs-asian"
    sigma: Optional[float] = None
    blocks: Optional[list] = None
    diffusion: dict = field(default_factory=dict)
    drift: dict = field(default_factory=dict)
    params: dict = field(default_factory=dict)
    payoff: str = "fixed-call"
    strike: Optional[float] = None
    payoff_value: float = 1.0
    t: float = 0.0
    T: Optional[float] = None
    x: Optional[list] = None
    N: int = 2
    base: str = "start"
    state_rule: str = "fixed"
    target: float = 0.5
    maturities: list = field(default_factory=lambda: list(DEFAULT_MATURITIES))
    orders: list = field(default_factory=lambda: [0, 1, 2])
    self_consistency: bool = False
    mc: McConfig = field(default_factory=McConfig)
    output: Optional[str] = None
    format: str = "json"
    workers: int = field(default_factory=default_workers)
    dump_operators: bool = False

    @classmethod
    def from_mapping(cls, data):
        model = _section(data, "model")
        payoff = _section(data, "payoff")
        state = _section(data, "state")
        mc = _section(data, "mc")
        converge = _section(data, "converge")
        output = _section(data, "output")
        cfg = cls()
        cfg.model = str(model.get("id", cfg.model))
        cfg.sigma = _number(model.get("sigma"), "model.sigma")
        cfg.blocks = model.get("blocks")
        cfg.diffusion = dict(model.get("diffusion") or {})
        cfg.drift = dict(model.get("drift") or {})
        cfg.params = dict(model.get("params") or {})
        cfg.payoff = str(payoff.get("id", cfg.payoff))
        cfg.strike = _number(payoff.get("strike"), "strike")
        cfg.payoff_value = _number(payoff.get("value", 1.0), "payoff.value")
        cfg.t = _number(state.get("t", 0.0), "t")
        cfg.T = _number(state.get("T"), "T")
        cfg.x = state.get("x")
        cfg.state_rule = str(state.get("rule", cfg.state_rule))
        cfg.target = _number(state.get("target", cfg.target), "state.target")
        cfg.N = _number(data.get("N", cfg.N), "N", int)
        cfg.base = str(data.get("base", cfg.base))
        if "maturities" in converge:
            cfg.maturities = [_number(v, "converge.maturities") for v in converge["maturities"]]
        if "orders" in converge:
            cfg.orders = [_number(v, "converge.orders", int) for v in converge["orders"]]
        cfg.self_consistency = bool(converge.get("self_consistency", False))
        cfg.mc = McConfig(
            paths=_number(mc.get("paths", DEFAULT_PATHS), "mc.paths", int),
            steps_per_unit=_number(mc.get("steps_per_unit", DEFAULT_STEPS_PER_UNIT), "mc.steps_per_unit", int),
            min_steps=_number(mc.get("min_steps", 0), "mc.min_steps", int),
            seed=_number(mc.get("seed", DEFAULT_SEED), "mc.seed", int),
            antithetic=bool(mc.get("antithetic", False)),
            scheme=str(mc.get("scheme", "euler")),
        )
        cfg.output = output.get("path")
        cfg.format = str(output.get("format", cfg.format))
        if data.get("workers") is not None:
            cfg.workers = _number(data["workers"], "workers", int)
        return cfg

    def validate(self, command="price"):
        if self.model not in MODELS:
            raise ConfigError("model", f"unknown model {self.model!r}; choose from {', '.join(MODELS)}")
        if self.model in ("bs-asian", "bachelier-asian") and self.sigma is None:
            raise ConfigError("sigma", f"model {self.model} needs sigma")
        if self.sigma is not None and self.sigma < 0:
            raise ConfigError("sigma", "must be non-negative")
        if self.payoff not in PAYOFFS:
            raise ConfigError("payoff", f"unknown payoff {self.payoff!r}; choose from {', '.join(PAYOFFS)}")
        if self.payoff in ("fixed-call", "fixed-put") and self.strike is None:
            raise ConfigError("strike", f"payoff {self.payoff} needs a strike")
        if self.base not in BASE_CHOICES:
            raise ConfigError("base", f"choose from {', '.join(BASE_CHOICES)}")
        if self.format not in FORMATS:
            raise ConfigError("format", f"choose from {', '.join(FORMATS)}")
        if self.workers < 1:
            raise ConfigError("workers", "must be at least 1")
        if command in ("price", "mc"):
            if self.T is None:
                raise ConfigError("T", "maturity is required")
            if not self.T > self.t:
                raise ConfigError("T", f"maturity must exceed t={self.t}")
            if not 0 <= self.N <= 4:
                raise ConfigError("N", "must be between 0 and 4")
        if command == "converge":
            grid = self.maturities
            if len(grid) < MIN_GRID_POINTS:
                raise ConfigError("converge.maturities", f"need at least {MIN_GRID_POINTS} maturities")
            monotone = list(grid) in (sorted(grid), sorted(grid, reverse=True))
            if any(v <= 0 for v in grid) or not monotone:
                raise ConfigError("converge.maturities", "must be strictly positive and sorted")
            if len(set(grid)) != len(grid):
                raise ConfigError("converge.maturities", "must not repeat")
            if not self.orders or any(not 0 <= n <= 3 for n in self.orders):
                raise ConfigError("converge.orders", "orders must be between 0 and 3")
            if self.state_rule not in STATE_RULES:
                raise ConfigError("state.rule", f"choose from {', '.join(STATE_RULES)}")
            if self.state_rule == "standardized" and self.T is None:
                raise ConfigError("T", "standardized convergence runs need the payoff maturity T")
        self.state_vector()
        return self

    def structure(self):
        if not self.blocks:
            return BlockStructure.prototype()
        try:
            return BlockStructure.from_blocks(self.blocks)
        except ValueError as exc:
            raise ConfigError("model.blocks", str(exc)) from exc

    def build_model(self):
        structure = self.structure()
        if self.model == "bs-asian":
            return bs_asian_model(self.sigma, structure)
        if self.model == "bachelier-asian":
            return bachelier_asian_model(self.sigma, structure)
        params = dict(self.params)
        if self.sigma is not None:
            params.setdefault("sigma", self.sigma)
        return custom_model(self.diffusion, self.drift, structure, params)

    def payoff_factory(self):
        structure = self.structure()

        def factory(maturity):
            return make_payoff(self.payoff, structure, self.strike, maturity, self.payoff_value)

        return factory

    def state_vector(self):
        d = self.structure().d
        if self.x is None:
            return [1.0] + [0.0] * (d - 1)
        if len(self.x) != d:
            raise ConfigError("state.x", f"expected {d} coordinates, got {len(self.x)}")
        return [_number(v, "state.x") for v in self.x]

    def state_rule_object(self):
        return StateRule(
            kind=self.state_rule,
            x=tuple(self.state_vector()),
            t0=self.t,
            maturity=self.T,
            target=self.target,
        )

    def output_path(self):
        """Resolve the output file; bare names land in ASIANEXP_OUTPUT_DIR when set."""
        name = self.output
        if name is None:
            return None
        directory = os.environ.get(OUTPUT_DIR_ENV)
        if directory and not os.path.dirname(name):
            os.makedirs(directory, exist_ok=True)
            return os.path.join(directory, name)
        return name


def apply_overrides(data, args):
    """Fold argparse values (None means not given) into the nested config mapping."""
    data = {k: (dict(v) if isinstance(v, dict) else v) for k, v in data.items()}
    for name in ("model", "payoff", "state", "mc", "converge", "output"):
        if isinstance(data.get(name), str):
            data[name] = {"id": data[name]}
        data.setdefault(name, {})

    def put(section, key, value):
        if value is not None:
            data[section][key] = value

    put("model", "id", getattr(args, "model", None))
    put("model", "sigma", getattr(args, "sigma", None))
    put("payoff", "id", getattr(args, "payoff", None))
    put("payoff", "strike", getattr(args, "strike", None))
    put("state", "t", getattr(args, "t", None))
    put("state", "T", getattr(args, "T", None))
    put("output", "format", getattr(args, "format", None))
    put("output", "path", getattr(args, "output", None))
    put("mc", "paths", getattr(args, "paths", None))
    put("mc", "seed", getattr(args, "seed", None))
    if getattr(args, "antithetic", False):
        data["mc"]["antithetic"] = True
    if getattr(args, "self_consistency", False):
        data["converge"]["self_consistency"] = True
    s0, a0 = getattr(args, "s0", None), getattr(args, "a0", None)
    if s0 is not None or a0 is not None:
        x = list(data["state"].get("x") or [])
        if not x:
            x = [1.0, 0.0]
        if s0 is not None:
            x[0] = s0
        if a0 is not None:
            x[-1] = a0
        data["state"]["x"] = x
    for key in ("N", "base", "workers"):
        value = getattr(args, key, None)
        if value is not None:
            data[key] = value
    return data
