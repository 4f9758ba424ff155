import pytest

from mvnash.config import load_config, parse_config
from mvnash.errors import ConfigError
from mvnash.market import NodeTable, PiecewiseDeterministic
from mvnash.tree import Mode

GOOD = """\
market:
  horizon: 1.0
  r: {piecewise: {breakpoints: [0.5], values: [0.02, 0.04]}}
agents:
  - {theta: 0.5, gamma: 2.0, x0: 1.0, mu: 0.07, sigma: 0.2}
  - theta: 0.5
    gamma: 4.0
    mu: {table: [[0.08], [0.07, 0.09]]}
    sigma: 0.2
driver:
  steps: 2
  mode: fullbinary
"""


def test_parse_valid_config(tmp_path):
    cfg = parse_config(GOOD)
    assert cfg.steps == 2 and cfg.mode is Mode.FULL_BINARY
    assert isinstance(cfg.market.r, PiecewiseDeterministic)
    assert isinstance(cfg.market.mu[1], NodeTable)
    assert cfg.agents[1].x0 == 0.0
    path = tmp_path / "g.yaml"
    path.write_text(GOOD)
    assert load_config(path).driver().N == 2
    assert load_config(path).driver(steps=5, mode="recombining").N == 5


def _err(text):
    with pytest.raises(ConfigError) as info:
        parse_config(text)
    return info.value


def test_missing_gamma_names_the_agent_block():
    e = _err(GOOD.replace("    gamma: 4.0\n", ""))
    assert "agents[2]" in str(e) and "gamma" in str(e)
    assert e.line == 6


@pytest.mark.parametrize(
    "old, new, fragment, line",
    [
        ("horizon: 1.0", "horizon: -1", "market.horizon", 2),
        ("steps: 2", "steps: 2.5", "driver.steps", 11),
        ("mode: fullbinary", "mode: trinomial", "driver.mode", 12),
        ("x0: 1.0,", "x0: one,", "agents[1].x0", 5),
        ("sigma: 0.2}", "sigma: 0.2, beta: 1}", "unknown key 'beta'", 5),
    ],
)
def test_errors_are_line_anchored(old, new, fragment, line):
    e = _err(GOOD.replace(old, new, 1))
    assert fragment in str(e) and e.line == line and str(e).startswith(f"line {line}:")


def test_malformed_yaml():
    e = _err("market: [1, 2\n")
    assert "malformed" in str(e)
