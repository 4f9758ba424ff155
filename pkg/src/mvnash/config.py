"""Game configuration files (YAML) with line-anchored validation errors.

Schema::

    market:
      horizon: 1.0                 # T > 0
      r: 0.03                      # coefficient (see below)
      sigma_bound: 10              # optional, declared bound c on sigma
      r_max: 1                     # optional, declared bound on r
    agents:                        # at least two blocks, one stock per agent
      - {theta: 0.5, gamma: 2.0, x0: 1.0, mu: 0.07, sigma: 0.2}
    driver:
      steps: 10
      mode: recombining            # or fullbinary
      max_full_binary_steps: 24    # optional

A coefficient is a plain number or a one-key mapping. ``{piecewise: {breakpoints: [...],
values: [...]}}`` takes interior switch times and one more value than
breakpoints. ``{table: [[v00], [v10, v11], ...]}`` gives step k's values in row k,
indexed by the number of up moves.
"""
from __future__ import annotations

from dataclasses import dataclass

import yaml

from .errors import ConfigError
from .market import AgentSpec, Constant, MarketSpec, NodeTable, PiecewiseDeterministic
from .tree import Mode, build_driver


@dataclass(frozen=True)
class GameConfig:
    market: MarketSpec
    agents: tuple
    steps: int
    mode: Mode
    max_full_binary_steps: int = 24

    def driver(self, steps=None, mode=None):
        return build_driver(
            self.market.horizon,
            steps or self.steps,
            Mode.parse(mode) if mode else self.mode,
            self.max_full_binary_steps,
        )


class _Node:
    """Plain value plus the 1-based source line it came from."""

    __slots__ = ("value", "line")

    def __init__(self, value, line):
        self.value = value
        self.line = line


def _wrap(node):
    line = node.start_mark.line + 1
    if isinstance(node, yaml.MappingNode):
        out = {}
        for k, v in node.value:
            out[k.value] = _wrap(v)
        return _Node(out, line)
    if isinstance(node, yaml.SequenceNode):
        return _Node([_wrap(v) for v in node.value], line)
    return _Node(yaml.safe_load(yaml.serialize(node)), line)


def _unwrap(n):
    if isinstance(n.value, dict):
        return {k: _unwrap(v) for k, v in n.value.items()}
    if isinstance(n.value, list):
        return [_unwrap(v) for v in n.value]
    return n.value


def _mapping(n, where):
    if not isinstance(n.value, dict):
        raise ConfigError(f"{where}: expected a mapping", n.line)
    return n.value


def _require(block, key, where, parent_line):
    if key not in block:
        raise ConfigError(f"{where}: missing key '{key}'", parent_line)
    return block[key]


def _number(n, where, positive=False):
    v = n.value
    if isinstance(v, bool) or not isinstance(v, (int, float)):
        raise ConfigError(f"{where}: expected a number, got {v!r}", n.line)
    if positive and v <= 0:
        raise ConfigError(f"{where}: must be positive, got {v!r}", n.line)
    return float(v)


def _coefficient(n, where):
    if not isinstance(n.value, dict):
        return Constant(_number(n, where))
    block = n.value
    if set(block) == {"piecewise"}:
        pw = _mapping(block["piecewise"], f"{where}.piecewise")
        bps = _unwrap(_require(pw, "breakpoints", f"{where}.piecewise", n.line))
        vals = _unwrap(_require(pw, "values", f"{where}.piecewise", n.line))
        try:
            return PiecewiseDeterministic(tuple(bps), tuple(vals))
        except Exception as exc:
            raise ConfigError(f"{where}.piecewise: {exc}", n.line) from None
    if set(block) == {"table"}:
        try:
            return NodeTable(tuple(tuple(row) for row in _unwrap(block["table"])))
        except Exception as exc:
            raise ConfigError(f"{where}.table: {exc}", block["table"].line) from None
    raise ConfigError(f"{where}: unknown coefficient form {sorted(block)}; use a number, piecewise or table", n.line)


def parse_config(text: str, source="<config>") -> GameConfig:
    try:
        root = yaml.compose(text)
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        raise ConfigError(f"{source}: malformed YAML: {getattr(exc, 'problem', exc)}", mark.line + 1 if mark else None) from None
    if root is None:
        raise ConfigError(f"{source}: empty configuration", 1)
    top = _mapping(_wrap(root), "top level")
    unknown = set(top) - {"market", "agents", "driver"}
    if unknown:
        key = sorted(unknown)[0]
        raise ConfigError(f"unknown top-level key '{key}'", top[key].line)

    market_n = _require(top, "market", "top level", 1)
    market = _mapping(market_n, "market")
    horizon = _number(_require(market, "horizon", "market", market_n.line), "market.horizon", positive=True)
    r = _coefficient(_require(market, "r", "market", market_n.line), "market.r")
    extra = {}
    for key in ("sigma_bound", "r_max"):
        if key in market:
            extra[key] = _number(market[key], f"market.{key}", positive=True)

    agents_n = _require(top, "agents", "top level", 1)
    if not isinstance(agents_n.value, list):
        raise ConfigError("agents: expected a list of agent blocks", agents_n.line)
    agents, mus, sigmas = [], [], []
    for idx, a in enumerate(agents_n.value, start=1):
        where = f"agents[{idx}]"
        blk = _mapping(a, where)
        for key in ("theta", "gamma", "mu", "sigma"):
            _require(blk, key, where, a.line)
        unknown = set(blk) - {"theta", "gamma", "x0", "mu", "sigma"}
        if unknown:
            key = sorted(unknown)[0]
            raise ConfigError(f"{where}: unknown key '{key}'", blk[key].line)
        theta = _number(blk["theta"], f"{where}.theta")
        gamma = _number(blk["gamma"], f"{where}.gamma")
        x0 = _number(blk["x0"], f"{where}.x0") if "x0" in blk else 0.0
        agents.append(AgentSpec(theta, gamma, x0))
        mus.append(_coefficient(blk["mu"], f"{where}.mu"))
        sigmas.append(_coefficient(blk["sigma"], f"{where}.sigma"))

    driver_n = _require(top, "driver", "top level", 1)
    drv = _mapping(driver_n, "driver")
    steps_n = _require(drv, "steps", "driver", driver_n.line)
    steps = _number(steps_n, "driver.steps", positive=True)
    if steps != int(steps):
        raise ConfigError("driver.steps: must be an integer", steps_n.line)
    mode_n = drv.get("mode")
    try:
        mode = Mode.parse(mode_n.value) if mode_n else Mode.RECOMBINING
    except Exception:
        raise ConfigError(f"driver.mode: unknown mode {mode_n.value!r}", mode_n.line) from None
    cap = int(_number(drv["max_full_binary_steps"], "driver.max_full_binary_steps", positive=True)) if "max_full_binary_steps" in drv else 24

    spec = MarketSpec(horizon, r, tuple(mus), tuple(sigmas), **extra)
    return GameConfig(spec, tuple(agents), int(steps), mode, cap)


def load_config(path) -> GameConfig:
    with open(path, encoding="utf-8") as fh:
        text = fh.read()
    return parse_config(text, source=str(path))
