"""Binary lattice driver for the Brownian motion and adapted processes on it.

Two layouts are supported. ``FULL_BINARY`` keeps one node per path prefix
(2**k nodes at step k, node ``j`` has children ``2j`` (down) and ``2j+1`` (up),
so the bits of ``j`` read most-significant-first are the path). ``RECOMBINING``
keeps one node per number of up-moves (k+1 nodes, children ``j`` and ``j+1``).
Every increment is +-sqrt(dt) with probability 1/2.
"""
from __future__ import annotations

from dataclasses import dataclass
from enum import Enum
from functools import lru_cache
from numbers import Number

import numpy as np

from .errors import DriverMismatch, ValidationError

DEFAULT_MAX_FULL_BINARY_STEPS = 24
FORWARD_RTOL = 1e-9


class Mode(str, Enum):
    RECOMBINING = "recombining"
    FULL_BINARY = "fullbinary"

    @classmethod
    def parse(cls, value):
        if isinstance(value, cls):
            return value
        key = str(value).strip().lower().replace("_", "").replace("-", "")
        for mode in cls:
            if mode.value == key:
                return mode
        raise ValidationError(f"unknown driver mode {value!r} (expected recombining or fullbinary)")


@dataclass(frozen=True)
class TreeDriver:
    T: float
    N: int
    mode: Mode = Mode.FULL_BINARY
    max_full_binary_steps: int = DEFAULT_MAX_FULL_BINARY_STEPS

    def __post_init__(self):
        object.__setattr__(self, "mode", Mode.parse(self.mode))
        if int(self.N) != self.N or self.N < 1:
            raise ValidationError(f"driver steps must be an integer >= 1, got {self.N!r}")
        if not self.T > 0:
            raise ValidationError(f"horizon must be positive, got {self.T!r}")
        if self.mode is Mode.FULL_BINARY and self.N > self.max_full_binary_steps:
            raise ValidationError(
                f"fullbinary driver with {self.N} steps exceeds the cap of "
                f"{self.max_full_binary_steps} (raise max_full_binary_steps to override)"
            )

    @property
    def dt(self):
        return self.T / self.N

    @property
    def sqrt_dt(self):
        return np.sqrt(self.dt)

    @property
    def full_binary(self):
        return self.mode is Mode.FULL_BINARY

    def times(self):
        return np.arange(self.N + 1) * self.dt

    def n_nodes(self, k):
        return 2**k if self.full_binary else k + 1

    def children(self, k):
        """Index arrays (up, down) into step k+1 for every node at step k."""
        return _children(self.mode, k)

    def probabilities(self, k):
        return _probabilities(self.mode, k)

    def up_counts(self, k):
        """Number of up-moves leading to each node at step k."""
        return _up_counts(self.mode, k)

    def brownian(self, k):
        return (2 * self.up_counts(k) - k) * self.sqrt_dt

    def signs(self, k):
        """Path prefix of every node at step k as an (n_nodes, k) array of +-1."""
        if not self.full_binary:
            raise DriverMismatch("path prefixes are only available on a fullbinary driver")
        return _signs(k)

    def expect(self, k, nxt):
        """Conditional mean at step k of a step-(k+1) node array."""
        up, down = self.children(k)
        return 0.5 * (nxt[up] + nxt[down])

    def martingale_integrand(self, k, nxt):
        up, down = self.children(k)
        return (nxt[up] - nxt[down]) / (2.0 * self.sqrt_dt)

    def forward(self, k, up_values, down_values, name="process"):
        """Assemble the step-(k+1) array from per-node branch values at step k.

        On a recombining driver the two parents of an interior node must agree;
        a mismatch means the process is path dependent and needs a fullbinary driver.
        """
        up_values = np.asarray(up_values, dtype=float)
        down_values = np.asarray(down_values, dtype=float)
        m = self.n_nodes(k + 1)
        out = np.empty((m,) + up_values.shape[1:])
        up, down = self.children(k)
        out[down] = down_values
        if self.full_binary:
            out[up] = up_values
            return out
        out[k + 1] = up_values[k]
        if k > 0:
            a, b = up_values[:-1], down_values[1:]
            scale = max(1.0, float(np.max(np.abs(a), initial=0.0)), float(np.max(np.abs(b), initial=0.0)))
            gap = float(np.max(np.abs(a - b), initial=0.0))
            if gap > FORWARD_RTOL * scale:
                raise DriverMismatch(
                    f"{name} is not node-measurable at step {k + 1} (gap {gap:.3e}); "
                    "use a fullbinary driver"
                )
        return out


def build_driver(T, N, mode=Mode.FULL_BINARY, max_full_binary_steps=DEFAULT_MAX_FULL_BINARY_STEPS):
    return TreeDriver(float(T), int(N), Mode.parse(mode), int(max_full_binary_steps))


@lru_cache(maxsize=256)
def _children(mode, k):
    if mode is Mode.FULL_BINARY:
        j = np.arange(2**k)
        up, down = 2 * j + 1, 2 * j
    else:
        j = np.arange(k + 1)
        up, down = j + 1, j
    up.setflags(write=False)
    down.setflags(write=False)
    return up, down


@lru_cache(maxsize=256)
def _up_counts(mode, k):
    if mode is Mode.FULL_BINARY:
        j = np.arange(2**k, dtype=np.int64)
        out = np.zeros(2**k, dtype=np.int64)
        for bit in range(k):
            out += (j >> bit) & 1
    else:
        out = np.arange(k + 1, dtype=np.int64)
    out.setflags(write=False)
    return out


@lru_cache(maxsize=256)
def _probabilities(mode, k):
    if mode is Mode.FULL_BINARY:
        out = np.full(2**k, 0.5**k)
    else:
        from scipy.special import comb

        out = comb(k, np.arange(k + 1), exact=False) * 0.5**k
    out.setflags(write=False)
    return out


@lru_cache(maxsize=64)
def _signs(k):
    j = np.arange(2**k, dtype=np.int64)
    out = np.empty((2**k, k))
    for step in range(k):
        out[:, step] = 2 * ((j >> (k - 1 - step)) & 1) - 1
    out.setflags(write=False)
    return out


class TreeProcess:
    """Adapted process: one node array per step.

    ``values[k]`` has shape ``(driver.n_nodes(k),) + shape``. State processes
    carry N+1 steps (0..N); rates, integrands and controls carry N (0..N-1,
    each step applying on [t_k, t_{k+1})).
    """

    __slots__ = ("driver", "values")
    __array_ufunc__ = None

    def __init__(self, driver, values):
        values = tuple(np.array(v, dtype=float) for v in values)
        if len(values) not in (driver.N, driver.N + 1):
            raise ValidationError(f"process has {len(values)} steps; driver has N={driver.N}")
        trailing = values[0].shape[1:]
        for k, v in enumerate(values):
            if v.shape != (driver.n_nodes(k),) + trailing:
                raise ValidationError(
                    f"step {k}: expected shape {(driver.n_nodes(k),) + trailing}, got {v.shape}"
                )
            v.setflags(write=False)
        self.driver = driver
        self.values = values

    @classmethod
    def constant(cls, driver, value, steps=None, shape=None):
        steps = driver.N if steps is None else steps
        value = np.asarray(value, dtype=float)
        if shape is not None:
            value = np.broadcast_to(value, shape)
        return cls(driver, [np.broadcast_to(value, (driver.n_nodes(k),) + value.shape) for k in range(steps)])

    @classmethod
    def zeros(cls, driver, shape=(), steps=None):
        return cls.constant(driver, np.zeros(shape), steps)

    @classmethod
    def stack(cls, processes):
        """Stack scalar processes into one process with a trailing agent axis."""
        processes = list(processes)
        driver = processes[0].driver
        steps = len(processes[0])
        return cls(driver, [np.stack([p.values[k] for p in processes], axis=-1) for k in range(steps)])

    def __len__(self):
        return len(self.values)

    def __getitem__(self, k):
        return self.values[k]

    @property
    def shape(self):
        return self.values[0].shape[1:]

    @property
    def initial(self):
        return self.values[0][0]

    @property
    def terminal(self):
        return self.values[-1]

    def component(self, *index):
        return TreeProcess(self.driver, [v[(slice(None),) + index] for v in self.values])

    def truncate(self, steps):
        return TreeProcess(self.driver, self.values[:steps])

    def map(self, fn):
        return TreeProcess(self.driver, [fn(v) for v in self.values])

    def sup_norm(self):
        return max(float(np.max(np.abs(v), initial=0.0)) for v in self.values)

    def is_deterministic(self, atol=0.0):
        """True when every step takes a single value across nodes."""
        return all(np.all(np.abs(v - v[:1]) <= atol) for v in self.values)

    def expectation(self, k):
        """Unconditional mean of the step-k values."""
        p = self.driver.probabilities(k)
        return np.tensordot(p, self.values[k], axes=(0, 0))

    def _binary(self, other, op):
        if isinstance(other, TreeProcess):
            if other.driver != self.driver or len(other) != len(self):
                raise ValidationError("processes live on different drivers or step ranges")
            return TreeProcess(self.driver, [op(a, b) for a, b in zip(self.values, other.values)])
        if isinstance(other, (Number, np.ndarray)):
            return TreeProcess(self.driver, [op(a, other) for a in self.values])
        return NotImplemented

    def __add__(self, other):
        return self._binary(other, np.add)

    __radd__ = __add__

    def __sub__(self, other):
        return self._binary(other, np.subtract)

    def __rsub__(self, other):
        return self._binary(other, lambda a, b: b - a)

    def __mul__(self, other):
        return self._binary(other, np.multiply)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return self._binary(other, np.divide)

    def __neg__(self):
        return self.map(np.negative)

    def __repr__(self):
        return f"TreeProcess(N={self.driver.N}, steps={len(self)}, shape={self.shape})"


def sup_distance(a, b):
    return max(float(np.max(np.abs(x - y), initial=0.0)) for x, y in zip(a.values, b.values))
