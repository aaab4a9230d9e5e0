"""Brute-force tabular value iteration used as a verification oracle.

Two flavors share one Bellman backward step:

- `grid_dp` discretizes a low-dimensional vehicle state space, rolls every
  control sample one step from every node, and interpolates next-state values
  multilinearly (angular dimensions wrap; leaving the box clamps to the
  boundary value, so the box must extend past the region of interest).
- `tabular_dp` runs the same recursion on a hand-built finite process given
  directly as a transition table.

The recursion, per node:

    reach_avoid:  V[t] = min(g, max(l, max_u V[t+1] after u))
    avoid_only:   V[t] = min(g,        max_u V[t+1] after u)

with terminal slice min(g, l) respectively g. This module is a test fixture;
the runtime filters never call it.
"""

from __future__ import annotations

import dataclasses
import hashlib
import itertools
import json
import struct
from dataclasses import dataclass

import numpy as np

from .dynamics import ModelSpec, State, step_rk4
from .errors import ConfigError
from .margins import Environment, failure_values, target_values
from .reach_avoid_ilq import AVOID_ONLY, REACH_AVOID

__all__ = [
    "GridSpec",
    "ValueTable",
    "grid_dp",
    "tabular_dp",
    "query",
    "save_table",
    "load_table",
    "table_digest",
]

_MAGIC = b"VTAB"
_FORMAT_VERSION = 1


@dataclass(frozen=True)
class GridSpec:
    """Discretization of a state box plus the control sample set.

    Attributes:
        lower, upper: State box corners, shape (n,).
        nodes_per_dim: Node counts, each at least 2.
        periodic: Per-dimension wrap flags. A periodic dimension spans
            [lower, upper) with `nodes` evenly spaced samples and wraps both
            dynamics and interpolation; a non-periodic one includes both
            endpoints.
        control_samples: Candidate controls, shape (n_samples, control_dim).
        horizon: Number of control steps.
        mode: "reach_avoid" or "avoid_only".
    """

    lower: np.ndarray
    upper: np.ndarray
    nodes_per_dim: tuple
    control_samples: np.ndarray
    horizon: int
    mode: str
    periodic: tuple | None = None

    def __post_init__(self) -> None:
        lower = np.asarray(self.lower, dtype=float).reshape(-1)
        upper = np.asarray(self.upper, dtype=float).reshape(-1)
        object.__setattr__(self, "lower", lower)
        object.__setattr__(self, "upper", upper)
        if lower.size != upper.size or lower.size == 0:
            raise ConfigError("lower and upper must be matching state vectors")
        if np.any(upper <= lower):
            raise ConfigError("upper must exceed lower in every dimension")
        nodes = tuple(int(k) for k in self.nodes_per_dim)
        object.__setattr__(self, "nodes_per_dim", nodes)
        if len(nodes) != lower.size or any(k < 2 for k in nodes):
            raise ConfigError("need at least 2 nodes per state dimension")
        periodic = self.periodic
        if periodic is None:
            periodic = (False,) * lower.size
        periodic = tuple(bool(p) for p in periodic)
        object.__setattr__(self, "periodic", periodic)
        if len(periodic) != lower.size:
            raise ConfigError("periodic flags must match the state dimension")
        samples = np.asarray(self.control_samples, dtype=float)
        if samples.ndim == 1:
            samples = samples[:, None]
        object.__setattr__(self, "control_samples", samples)
        if samples.ndim != 2 or samples.shape[0] == 0:
            raise ConfigError("control_samples must be a nonempty (k, m) array")
        if self.horizon < 0:
            raise ConfigError("horizon must be nonnegative")
        if self.mode not in (REACH_AVOID, AVOID_ONLY):
            raise ConfigError(f"unknown mode {self.mode!r}")

    def axes(self) -> list[np.ndarray]:
        out = []
        for d in range(self.lower.size):
            endpoint = not self.periodic[d]
            out.append(
                np.linspace(
                    self.lower[d],
                    self.upper[d],
                    self.nodes_per_dim[d],
                    endpoint=endpoint,
                )
            )
        return out

    def nodes(self) -> np.ndarray:
        """All grid nodes as a flat (N, n) array in C order."""
        mesh = np.meshgrid(*self.axes(), indexing="ij")
        return np.stack([m.reshape(-1) for m in mesh], axis=-1)


@dataclass(frozen=True)
class ValueTable:
    """Backward-induction values, one slice per time step."""

    spec: GridSpec
    values: np.ndarray

    def __post_init__(self) -> None:
        expected = (self.spec.horizon + 1, *self.spec.nodes_per_dim)
        values = np.asarray(self.values, dtype=float)
        if values.shape != expected:
            raise ConfigError(
                f"values shape {values.shape} does not match grid {expected}"
            )
        object.__setattr__(self, "values", values)


def _stencil(spec: GridSpec, points: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Multilinear interpolation stencil for a batch of query points.

    Returns flat corner indices (N, 2^n) and matching weights. Non-periodic
    coordinates outside the box clamp to the boundary node.
    """
    n = spec.lower.size
    lo_idx, hi_idx, lo_w = [], [], []
    for d in range(n):
        count = spec.nodes_per_dim[d]
        if spec.periodic[d]:
            span = spec.upper[d] - spec.lower[d]
            spacing = span / count
            t = np.mod(points[:, d] - spec.lower[d], span) / spacing
            base = np.floor(t).astype(np.int64)
            frac = t - base
            base = np.mod(base, count)
            nxt = np.mod(base + 1, count)
        else:
            spacing = (spec.upper[d] - spec.lower[d]) / (count - 1)
            t = np.clip((points[:, d] - spec.lower[d]) / spacing, 0.0, count - 1.0)
            base = np.minimum(np.floor(t).astype(np.int64), count - 2)
            frac = t - base
            nxt = base + 1
        lo_idx.append(base)
        hi_idx.append(nxt)
        lo_w.append(1.0 - frac)
    indices, weights = [], []
    for corner in itertools.product((0, 1), repeat=n):
        multi = [hi_idx[d] if bit else lo_idx[d] for d, bit in enumerate(corner)]
        w = np.ones(points.shape[0])
        for d, bit in enumerate(corner):
            w = w * (1.0 - lo_w[d] if bit else lo_w[d])
        indices.append(np.ravel_multi_index(multi, spec.nodes_per_dim))
        weights.append(w)
    return (
        np.stack(indices, axis=1).astype(np.int32),
        np.stack(weights, axis=1),
    )


def _backward(
    g: np.ndarray,
    l: np.ndarray | None,
    horizon: int,
    mode: str,
    best_next,
) -> np.ndarray:
    """Shared Bellman recursion; best_next maps a value slice to max_u V(f)."""
    if mode == REACH_AVOID:
        terminal = np.minimum(g, l)
    else:
        terminal = g.copy()
    values = np.empty((horizon + 1, g.size))
    values[horizon] = terminal
    for t in range(horizon - 1, -1, -1):
        best = best_next(values[t + 1])
        inner = np.maximum(l, best) if mode == REACH_AVOID else best
        values[t] = np.minimum(g, inner)
    return values


def grid_dp(spec: GridSpec, env: Environment, model: ModelSpec) -> ValueTable:
    """Backward induction over the grid; exact Bellman operator nodewise."""
    n = spec.lower.size
    if n > 3:
        raise ConfigError("grid oracle supports at most 3 state dimensions")
    if n != model.state_dim:
        raise ConfigError("grid dimension does not match the model state")
    states = spec.nodes()
    g, _ = failure_values(model, env, states)
    l = target_values(model, env, states) if spec.mode == REACH_AVOID else None
    stencils = [
        _stencil(spec, step_rk4(model, states, u)) for u in spec.control_samples
    ]

    def best_next(next_values: np.ndarray) -> np.ndarray:
        best = np.full(states.shape[0], -np.inf)
        for idx, w in stencils:
            np.maximum(best, np.einsum("ij,ij->i", next_values[idx], w), out=best)
        return best

    values = _backward(g, l, spec.horizon, spec.mode, best_next)
    return ValueTable(
        spec=spec, values=values.reshape((spec.horizon + 1, *spec.nodes_per_dim))
    )


def tabular_dp(
    transitions: np.ndarray,
    g: np.ndarray,
    l: np.ndarray | None,
    horizon: int,
    mode: str,
) -> np.ndarray:
    """Same recursion on a finite process given as a (states, actions) table.

    Returns values of shape (horizon + 1, n_states).
    """
    table = np.asarray(transitions, dtype=int)
    g = np.asarray(g, dtype=float).reshape(-1)
    if table.ndim != 2 or table.shape[0] != g.size:
        raise ConfigError("transitions must be (n_states, n_actions)")
    if np.any(table < 0) or np.any(table >= g.size):
        raise ConfigError("transition targets out of range")
    if mode == REACH_AVOID:
        if l is None:
            raise ConfigError("reach_avoid mode needs target margins")
        l = np.asarray(l, dtype=float).reshape(g.shape)
    elif mode != AVOID_ONLY:
        raise ConfigError(f"unknown mode {mode!r}")
    return _backward(g, l, horizon, mode, lambda nv: nv[table].max(axis=1))


def query(
    table: ValueTable, state: State, t: int, with_flag: bool = False
) -> float | tuple[float, bool]:
    """Multilinear interpolation at time slice t.

    Out-of-box coordinates (non-periodic dimensions only) clamp to the
    boundary; pass with_flag=True to learn whether clamping happened.
    """
    spec = table.spec
    if not 0 <= t <= spec.horizon:
        raise ConfigError(f"slice {t} outside horizon {spec.horizon}")
    point = np.asarray(state, dtype=float).reshape(1, -1)
    if point.shape[1] != spec.lower.size:
        raise ConfigError("state dimension does not match the grid")
    free = ~np.asarray(spec.periodic)
    clamped = bool(
        np.any(point[0, free] < spec.lower[free])
        or np.any(point[0, free] > spec.upper[free])
    )
    idx, w = _stencil(spec, point)
    value = float(table.values[t].reshape(-1)[idx[0]] @ w[0])
    return (value, clamped) if with_flag else value


def _canonical(obj):
    """Lossless JSON-friendly form; floats via hex so the digest is exact."""
    if isinstance(obj, np.ndarray):
        return {
            "shape": list(obj.shape),
            "data": [float(v).hex() for v in np.asarray(obj, dtype=float).reshape(-1)],
        }
    if isinstance(obj, float):
        return float(obj).hex()
    if isinstance(obj, (bool, int, str)) or obj is None:
        return obj
    if isinstance(obj, (list, tuple)):
        return [_canonical(v) for v in obj]
    if dataclasses.is_dataclass(obj):
        return {
            f.name: _canonical(getattr(obj, f.name))
            for f in dataclasses.fields(obj)
        }
    raise ConfigError(f"cannot canonicalize {type(obj).__name__}")


def table_digest(spec: GridSpec, env: Environment, model: ModelSpec) -> bytes:
    """Digest of everything the table values depend on."""
    payload = json.dumps(
        {"spec": _canonical(spec), "env": _canonical(env), "model": _canonical(model)},
        sort_keys=True,
    )
    return hashlib.sha256(payload.encode()).digest()


def save_table(
    table: ValueTable, path, env: Environment, model: ModelSpec
) -> None:
    """Binary dump: magic, version, input digest, dims, little-endian values."""
    spec = table.spec
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<I", _FORMAT_VERSION))
        fh.write(table_digest(spec, env, model))
        fh.write(struct.pack("<II", spec.lower.size, spec.horizon))
        fh.write(struct.pack(f"<{spec.lower.size}I", *spec.nodes_per_dim))
        fh.write(np.ascontiguousarray(table.values, dtype="<f8").tobytes())


def load_table(
    path, spec: GridSpec, env: Environment, model: ModelSpec
) -> ValueTable:
    """Read a dump back, refusing any mismatch with the expected inputs."""
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:4] != _MAGIC:
        raise ConfigError("not a value-table dump")
    (version,) = struct.unpack_from("<I", raw, 4)
    if version != _FORMAT_VERSION:
        raise ConfigError(f"unsupported dump version {version}")
    digest = raw[8:40]
    if digest != table_digest(spec, env, model):
        raise ConfigError("dump was built from different inputs")
    ndim, horizon = struct.unpack_from("<II", raw, 40)
    nodes = struct.unpack_from(f"<{ndim}I", raw, 48)
    if ndim != spec.lower.size or horizon != spec.horizon or nodes != spec.nodes_per_dim:
        raise ConfigError("dump dimensions do not match the grid spec")
    offset = 48 + 4 * ndim
    count = (horizon + 1) * int(np.prod(nodes))
    values = np.frombuffer(raw, dtype="<f8", count=count, offset=offset)
    return ValueTable(spec=spec, values=values.reshape((horizon + 1, *nodes)).copy())
