"""Serialization: nested key-value reports (YAML) and comma-separated tables."""
from __future__ import annotations

import csv
import io

import numpy as np
import yaml

from .errors import ValidationError
from .tree import TreeProcess


def plain(obj):
    """Convert numpy scalars/arrays and tuples into YAML-safe builtins."""
    if isinstance(obj, dict):
        return {str(k): plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [plain(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return plain(obj.tolist())
    if isinstance(obj, (np.bool_, np.integer, np.floating)):
        return obj.item()
    return obj


def structured(report: dict) -> str:
    return yaml.safe_dump(plain(report), sort_keys=False, default_flow_style=False, width=1000)


def columnar(header, rows) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    for row in rows:
        writer.writerow([_cell(v) for v in row])
    return buf.getvalue()


def _cell(v):
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    if isinstance(v, np.integer):
        return str(int(v))
    return v


def profile_rows(profile: TreeProcess):
    """One row per (step, node): step, node, then the invested amount of each agent."""
    for k, vals in enumerate(profile.values):
        for j, row in enumerate(np.atleast_2d(vals)):
            yield [k, j, *row]


def profile_csv(profile: TreeProcess) -> str:
    n = profile.shape[-1]
    return columnar(["step", "node"] + [f"pi_{i + 1}" for i in range(n)], profile_rows(profile))


def read_profile(text: str, driver, n_agents: int) -> TreeProcess:
    """Parse a profile table written by ``profile_csv`` against ``driver``."""
    reader = csv.reader(io.StringIO(text))
    try:
        header = next(reader)
    except StopIteration:
        raise ValidationError("profile file is empty") from None
    expected = ["step", "node"] + [f"pi_{i + 1}" for i in range(n_agents)]
    if header != expected:
        raise ValidationError(f"profile header {header} does not match {expected}")
    vals = [np.full((driver.n_nodes(k), n_agents), np.nan) for k in range(driver.N)]
    for lineno, row in enumerate(reader, start=2):
        if not row:
            continue
        try:
            k, j = int(row[0]), int(row[1])
            nums = [float(x) for x in row[2:]]
        except ValueError:
            raise ValidationError(f"profile line {lineno}: non-numeric entry") from None
        if not 0 <= k < driver.N or not 0 <= j < driver.n_nodes(k) or len(nums) != n_agents:
            raise ValidationError(f"profile line {lineno}: node (step {k}, node {j}) does not fit the driver")
        vals[k][j] = nums
    for k, v in enumerate(vals):
        missing = np.argwhere(np.isnan(v[:, 0]))
        if missing.size:
            raise ValidationError(f"profile is missing step {k}, node {int(missing[0, 0])}")
    return TreeProcess(driver, vals)
