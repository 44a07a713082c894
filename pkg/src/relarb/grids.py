"""Tensor grids in log-capitalization coordinates and grid-sampled functions.

Solvers work in y_i = ln z_i on a truncated box, which keeps the operator
coefficients bounded and pushes the orthant boundary to minus infinity.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass, field

import numpy as np


def retained_levels(num_steps: int, max_levels: int = 65) -> np.ndarray:
    """Step indices kept in memory: every ceil(K/(max_levels-1))-th level plus 0 and K."""
    if num_steps <= 0:
        return np.asarray([0], dtype=np.int64)
    stride = max(1, math.ceil(num_steps / (max_levels - 1)))
    ks = list(range(0, num_steps, stride))
    if ks[-1] != num_steps:
        ks.append(num_steps)
    return np.asarray(ks, dtype=np.int64)


@dataclass(frozen=True)
class GridSpec:
    """Uniform tensor grid on a log-coordinate box with a time horizon.

    steps is the requested time-step count; solvers enforce their stability
    bound and may use more.
    """

    lo: tuple
    hi: tuple
    shape: tuple
    horizon: float
    steps: int = 1

    def __post_init__(self):
        n = len(self.shape)
        if n not in (2, 3):
            raise ValueError("grid dimension must be 2 or 3")
        if len(self.lo) != n or len(self.hi) != n:
            raise ValueError("lo/hi must match the grid dimension")
        for l, u in zip(self.lo, self.hi):
            if not (l < u):
                raise ValueError("need lo_i < hi_i on every axis")
        for m in self.shape:
            if m < 8:
                raise ValueError("need at least 8 nodes per axis")
        if not (self.horizon > 0):
            raise ValueError("horizon must be positive")
        if self.steps < 1:
            raise ValueError("steps must be >= 1")

    @classmethod
    def cube(cls, n, half_width=3.0, nodes=129, horizon=1.0, steps=1):
        return cls(lo=(-half_width,) * n, hi=(half_width,) * n,
                   shape=(nodes,) * n, horizon=horizon, steps=steps)

    @property
    def ndim(self) -> int:
        return len(self.shape)

    @property
    def h(self) -> tuple:
        return tuple((u - l) / (m - 1) for l, u, m in zip(self.lo, self.hi, self.shape))

    @property
    def pairs(self) -> tuple:
        n = self.ndim
        return tuple((i, j) for i in range(n) for j in range(i + 1, n))

    def axis(self, i) -> np.ndarray:
        return np.linspace(self.lo[i], self.hi[i], self.shape[i])

    def axes(self):
        return [self.axis(i) for i in range(self.ndim)]

    @property
    def num_nodes(self) -> int:
        return int(np.prod(self.shape))

    def nodes_y(self) -> np.ndarray:
        """All grid nodes in log coordinates, row-major, shape (N, n)."""
        mesh = np.meshgrid(*self.axes(), indexing="ij")
        return np.stack([m.reshape(-1) for m in mesh], axis=1)

    def nodes_z(self) -> np.ndarray:
        return np.exp(self.nodes_y())

    def to_config(self) -> dict:
        return {"lo": list(self.lo), "hi": list(self.hi), "shape": list(self.shape),
                "horizon": self.horizon, "steps": self.steps}

    @classmethod
    def from_config(cls, cfg: dict) -> "GridSpec":
        return cls(lo=tuple(cfg["lo"]), hi=tuple(cfg["hi"]),
                   shape=tuple(cfg["shape"]), horizon=cfg["horizon"],
                   steps=cfg.get("steps", 1))


def _locate(axis, x):
    """Cell indices and linear weights for points x along one uniform axis."""
    h = axis[1] - axis[0]
    idx = ((x - axis[0]) / h).astype(np.int64)
    np.clip(idx, 0, len(axis) - 2, out=idx)
    w = (x - axis[idx]) / h
    np.clip(w, 0.0, 1.0, out=w)
    return idx, w


def interp_slice(grid: GridSpec, values: np.ndarray, Y: np.ndarray) -> np.ndarray:
    """Multilinear interpolation of one slice at log-coordinate points Y (M, n)."""
    n = grid.ndim
    idx, w = zip(*(_locate(grid.axis(i), Y[:, i]) for i in range(n)))
    out = np.zeros(Y.shape[0])
    for corner in range(1 << n):
        weight = np.ones(Y.shape[0])
        loc = []
        for i in range(n):
            if corner >> i & 1:
                weight = weight * w[i]
                loc.append(idx[i] + 1)
            else:
                weight = weight * (1.0 - w[i])
                loc.append(idx[i])
        out += weight * values[tuple(loc)]
    return out


def clip_to_grid(grid: GridSpec, Z: np.ndarray, project: bool = False):
    """Log coordinates clipped into the box; returns (Y, number of clamped points).

    Zero components map to the low face (the absorbing boundary); negative
    components are rejected.  With project=True the points are first shifted
    along the diagonal (a pure rescaling of the state), which is exact for
    scale-invariant surfaces and leaves fewer points to clamp.
    """
    Z = np.asarray(Z, dtype=float)
    if (Z < 0).any():
        raise ValueError("states must be nonnegative to take logs")
    with np.errstate(divide="ignore"):
        Y = np.log(Z)
    lo = np.asarray(grid.lo)
    hi = np.asarray(grid.hi)
    if project:
        with np.errstate(invalid="ignore"):
            cmin = (Y - hi).max(axis=1)
            cmax = (Y - lo).min(axis=1)
            c = np.clip(0.0, cmin, cmax)
        c = np.where(np.isfinite(c), c, 0.0)
        Y = Y - c[:, None]
    clamped = int(((Y < lo) | (Y > hi)).any(axis=1).sum())
    return np.clip(Y, lo, hi), clamped


@dataclass
class GridFunction:
    """Retained time slices of a scalar field on a GridSpec.

    values has shape (num_slices,) + grid.shape; taus holds the retained
    time-to-go levels in increasing order starting at 0.
    """

    grid: GridSpec
    taus: np.ndarray
    values: np.ndarray
    tag: str = "U"
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.taus = np.asarray(self.taus, dtype=float)
        self.values = np.asarray(self.values, dtype=float)
        if self.values.shape != (len(self.taus),) + tuple(self.grid.shape):
            raise ValueError("values shape does not match taus x grid shape")

    @property
    def num_slices(self) -> int:
        return len(self.taus)

    @property
    def scale_invariant(self) -> bool:
        return bool(self.meta.get("scale_invariant", False))

    def slice_at(self, tau: float) -> np.ndarray:
        k = int(np.argmin(np.abs(self.taus - tau)))
        return self.values[k]

    def _tau_bracket(self, tau: float):
        taus = self.taus
        tau = min(max(tau, taus[0]), taus[-1])
        k = int(np.searchsorted(taus, tau, side="right") - 1)
        k = min(k, len(taus) - 2) if len(taus) > 1 else 0
        if len(taus) == 1:
            return 0, 0, 0.0
        span = taus[k + 1] - taus[k]
        w = 0.0 if span == 0 else (tau - taus[k]) / span
        return k, k + 1, w

    def interp(self, tau: float, Z: np.ndarray, count_clamps: bool = False,
               project: bool | None = None):
        """Value at time-to-go tau and states Z (M, n); clamps out-of-box states.

        project=None defers to the surface's scale_invariant flag: invariant
        surfaces evaluate out-of-box states by rescaling along the diagonal.
        """
        Z = np.atleast_2d(np.asarray(Z, dtype=float))
        if project is None:
            project = self.scale_invariant
        Y, clamped = clip_to_grid(self.grid, Z, project=project)
        k0, k1, w = self._tau_bracket(tau)
        v0 = interp_slice(self.grid, self.values[k0], Y)
        if k1 == k0 or w == 0.0:
            out = v0
        else:
            v1 = interp_slice(self.grid, self.values[k1], Y)
            out = (1.0 - w) * v0 + w * v1
        if count_clamps:
            return out, clamped
        return out

    def value_at(self, tau: float, z, project: bool | None = None) -> float:
        return float(self.interp(tau, np.asarray(z, dtype=float)[None, :],
                                 project=project)[0])

    # -- persistence: JSON header plus one CSV table per slice -----------

    def save(self, directory: str):
        os.makedirs(directory, exist_ok=True)
        header = {
            "grid": self.grid.to_config(),
            "taus": [float(t) for t in self.taus],
            "tag": self.tag,
            "meta": _jsonable(self.meta),
        }
        with open(os.path.join(directory, "header.json"), "w") as fh:
            json.dump(header, fh, indent=2, sort_keys=True)
        m0 = self.grid.shape[0]
        for k in range(self.num_slices):
            table = self.values[k].reshape(m0, -1)
            np.savetxt(os.path.join(directory, f"slice_{k:04d}.csv"),
                       table, fmt="%.17g", delimiter=",")

    @classmethod
    def load(cls, directory: str) -> "GridFunction":
        with open(os.path.join(directory, "header.json")) as fh:
            header = json.load(fh)
        grid = GridSpec.from_config(header["grid"])
        taus = np.asarray(header["taus"], dtype=float)
        slices = []
        for k in range(len(taus)):
            table = np.loadtxt(os.path.join(directory, f"slice_{k:04d}.csv"),
                               delimiter=",", ndmin=2)
            slices.append(table.reshape(grid.shape))
        return cls(grid=grid, taus=taus, values=np.asarray(slices),
                   tag=header["tag"], meta=header.get("meta", {}))


@dataclass
class PolicyField:
    """Per-node index of the maximizing scan candidate at retained times."""

    grid: GridSpec
    taus: np.ndarray
    indices: np.ndarray
    labels: tuple
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.indices = np.asarray(self.indices)
        if self.indices.shape != (len(self.taus),) + tuple(self.grid.shape):
            raise ValueError("indices shape does not match taus x grid shape")
        if self.indices.size and (self.indices.min() < 0 or
                                  self.indices.max() >= len(self.labels)):
            raise ValueError("policy indices must address valid candidates")

    def interior(self) -> np.ndarray:
        sl = tuple([slice(None)] + [slice(1, -1)] * self.grid.ndim)
        return self.indices[sl]


def _jsonable(obj):
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (np.floating,)):
        return float(obj)
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    return obj
