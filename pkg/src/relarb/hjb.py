"""Explicit monotone finite-difference solvers on log-coordinate grids.

Three equations share one marching kernel, all with initial data at time-to-go
zero and marching forward in time-to-go tau:

  linear       dU/dtau = sum_ij z_i z_j a_ij(z) (D2_ij U / 2 + D_i U / sum(z))
  hjb          dU/dtau = sup over scanned candidates of the same operator
  pucci        dV/dtau = sup over candidates of (1/2) sum_ij z_i z_j a_ij D2_ij V

In y = ln z the operator becomes sum_i a_ii (u_ii - u_i)/2 + cross terms +
sum_i (a mu)_i u_i, with bounded coefficients on the box.  Second derivatives
use central differences, first derivatives upwinding, and nonzero cross terms
the seven-point monotone stencil.  Low faces carry Dirichlet data (the
containment probability vanishes at the absorbing boundary), high faces a zero
second normal derivative.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from numba import njit, prange

from .errors import CflError, NonFiniteError, SchemeError
from .grids import GridFunction, GridSpec, PolicyField, retained_levels
from .uncertainty import (DIAGONAL_INTERVAL, FINITE_LIST, VOLSTAB_BAND,
                          CandidateScan, UncertaintySetFamily,
                          check_admissibility)

CFL_SAFETY = 0.9


# ---------------------------------------------------------------------------
# kernels
# ---------------------------------------------------------------------------

@njit(cache=True, parallel=True)
def _sweep_2d(u, out, pol, Ad, Ax, B, dtau, h0, h1, has_cross, record_policy,
              as_operator):
    m0, m1 = u.shape
    C = Ad.shape[0]
    ih0 = 1.0 / h0
    ih1 = 1.0 / h1
    ih00 = ih0 * ih0
    ih11 = ih1 * ih1
    ihx = 0.5 * ih0 * ih1
    for i in prange(1, m0 - 1):
        for j in range(1, m1 - 1):
            uc = u[i, j]
            up0 = u[i + 1, j]
            um0 = u[i - 1, j]
            up1 = u[i, j + 1]
            um1 = u[i, j - 1]
            d20 = (up0 - 2.0 * uc + um0) * ih00
            d21 = (up1 - 2.0 * uc + um1) * ih11
            best = -np.inf
            bi = 0
            for c in range(C):
                val = 0.5 * (Ad[c, i, j, 0] * d20 + Ad[c, i, j, 1] * d21)
                b0 = B[c, i, j, 0]
                if b0 >= 0.0:
                    val += b0 * (up0 - uc) * ih0
                else:
                    val += b0 * (uc - um0) * ih0
                b1 = B[c, i, j, 1]
                if b1 >= 0.0:
                    val += b1 * (up1 - uc) * ih1
                else:
                    val += b1 * (uc - um1) * ih1
                if has_cross:
                    ax = Ax[c, i, j, 0]
                    if ax > 0.0:
                        val += ax * (2.0 * uc + u[i + 1, j + 1] + u[i - 1, j - 1]
                                     - up0 - um0 - up1 - um1) * ihx
                    elif ax < 0.0:
                        val += (-ax) * (2.0 * uc + u[i + 1, j - 1] + u[i - 1, j + 1]
                                        - up0 - um0 - up1 - um1) * ihx
                if val > best:
                    best = val
                    bi = c
            if as_operator:
                out[i, j] = best
            else:
                out[i, j] = uc + dtau * best
            if record_policy:
                pol[i, j] = bi


@njit(cache=True, parallel=True)
def _sweep_3d(u, out, pol, Ad, Ax, B, dtau, h0, h1, h2, has_cross,
              record_policy, as_operator):
    m0, m1, m2 = u.shape
    C = Ad.shape[0]
    ih = (1.0 / h0, 1.0 / h1, 1.0 / h2)
    ihx01 = 0.5 * ih[0] * ih[1]
    ihx02 = 0.5 * ih[0] * ih[2]
    ihx12 = 0.5 * ih[1] * ih[2]
    for i in prange(1, m0 - 1):
        for j in range(1, m1 - 1):
            for k in range(1, m2 - 1):
                uc = u[i, j, k]
                up0 = u[i + 1, j, k]
                um0 = u[i - 1, j, k]
                up1 = u[i, j + 1, k]
                um1 = u[i, j - 1, k]
                up2 = u[i, j, k + 1]
                um2 = u[i, j, k - 1]
                d20 = (up0 - 2.0 * uc + um0) * ih[0] * ih[0]
                d21 = (up1 - 2.0 * uc + um1) * ih[1] * ih[1]
                d22 = (up2 - 2.0 * uc + um2) * ih[2] * ih[2]
                best = -np.inf
                bi = 0
                for c in range(C):
                    val = 0.5 * (Ad[c, i, j, k, 0] * d20
                                 + Ad[c, i, j, k, 1] * d21
                                 + Ad[c, i, j, k, 2] * d22)
                    b = B[c, i, j, k, 0]
                    if b >= 0.0:
                        val += b * (up0 - uc) * ih[0]
                    else:
                        val += b * (uc - um0) * ih[0]
                    b = B[c, i, j, k, 1]
                    if b >= 0.0:
                        val += b * (up1 - uc) * ih[1]
                    else:
                        val += b * (uc - um1) * ih[1]
                    b = B[c, i, j, k, 2]
                    if b >= 0.0:
                        val += b * (up2 - uc) * ih[2]
                    else:
                        val += b * (uc - um2) * ih[2]
                    if has_cross:
                        ax = Ax[c, i, j, k, 0]
                        if ax > 0.0:
                            val += ax * (2.0 * uc + u[i + 1, j + 1, k] + u[i - 1, j - 1, k]
                                         - up0 - um0 - up1 - um1) * ihx01
                        elif ax < 0.0:
                            val += (-ax) * (2.0 * uc + u[i + 1, j - 1, k] + u[i - 1, j + 1, k]
                                            - up0 - um0 - up1 - um1) * ihx01
                        ax = Ax[c, i, j, k, 1]
                        if ax > 0.0:
                            val += ax * (2.0 * uc + u[i + 1, j, k + 1] + u[i - 1, j, k - 1]
                                         - up0 - um0 - up2 - um2) * ihx02
                        elif ax < 0.0:
                            val += (-ax) * (2.0 * uc + u[i + 1, j, k - 1] + u[i - 1, j, k + 1]
                                            - up0 - um0 - up2 - um2) * ihx02
                        ax = Ax[c, i, j, k, 2]
                        if ax > 0.0:
                            val += ax * (2.0 * uc + u[i, j + 1, k + 1] + u[i, j - 1, k - 1]
                                         - up1 - um1 - up2 - um2) * ihx12
                        elif ax < 0.0:
                            val += (-ax) * (2.0 * uc + u[i, j + 1, k - 1] + u[i, j - 1, k + 1]
                                            - up1 - um1 - up2 - um2) * ihx12
                    if val > best:
                        best = val
                        bi = c
                if as_operator:
                    out[i, j, k] = best
                else:
                    out[i, j, k] = uc + dtau * best
                if record_policy:
                    pol[i, j, k] = bi


def _sweep(u, out, pol, coeffs, dtau, record_policy=False, as_operator=False):
    h = coeffs.h
    if u.ndim == 2:
        _sweep_2d(u, out, pol, coeffs.Ad, coeffs.Ax, coeffs.B, dtau,
                  h[0], h[1], coeffs.has_cross, record_policy, as_operator)
    else:
        _sweep_3d(u, out, pol, coeffs.Ad, coeffs.Ax, coeffs.B, dtau,
                  h[0], h[1], h[2], coeffs.has_cross, record_policy, as_operator)


def _apply_high_faces(out, norm=None):
    """Zero second normal derivative on high faces via linear extrapolation.

    With norm given, the extrapolation acts on out/norm (used for quantities
    that grow like the total capitalization toward the high faces).
    """
    if out.ndim == 2:
        faces = [
            (np.s_[-1, 1:-1], np.s_[-2, 1:-1], np.s_[-3, 1:-1]),
            (np.s_[:, -1], np.s_[:, -2], np.s_[:, -3]),
        ]
    else:
        faces = [
            (np.s_[-1, 1:-1, 1:-1], np.s_[-2, 1:-1, 1:-1], np.s_[-3, 1:-1, 1:-1]),
            (np.s_[:, -1, 1:-1], np.s_[:, -2, 1:-1], np.s_[:, -3, 1:-1]),
            (np.s_[:, :, -1], np.s_[:, :, -2], np.s_[:, :, -3]),
        ]
    for dst, a, b in faces:
        if norm is None:
            out[dst] = 2.0 * out[a] - out[b]
        else:
            out[dst] = norm[dst] * (2.0 * out[a] / norm[a] - out[b] / norm[b])


@dataclass
class FloorTable:
    """Time-dependent Dirichlet data for the low faces.

    faces[i] holds values on the face y_i = lo_i over the remaining axes, one
    row per calibration time; rows are interpolated linearly in time-to-go.
    Values are forced nonincreasing in time, which the true containment
    probability satisfies and the monotone marching relies on.
    """

    taus: np.ndarray
    faces: list

    def __post_init__(self):
        self.taus = np.asarray(self.taus, dtype=float)
        self.faces = [np.minimum.accumulate(np.asarray(f, dtype=float), axis=0)
                      for f in self.faces]

    def face_at(self, axis: int, tau: float) -> np.ndarray:
        tab = self.faces[axis]
        taus = self.taus
        tau = min(max(tau, taus[0]), taus[-1])
        k = min(int(np.searchsorted(taus, tau, side="right") - 1), len(taus) - 2)
        span = taus[k + 1] - taus[k]
        w = 0.0 if span == 0 else (tau - taus[k]) / span
        return (1.0 - w) * tab[k] + w * tab[k + 1]


def _set_low_faces(buf, floor, tau=None):
    n = buf.ndim
    for ax in range(n):
        sl = [slice(None)] * n
        sl[ax] = 0
        if isinstance(floor, FloorTable):
            buf[tuple(sl)] = floor.face_at(ax, tau)
        else:
            buf[tuple(sl)] = floor


# ---------------------------------------------------------------------------
# coefficient assembly
# ---------------------------------------------------------------------------

@dataclass
class Coefficients:
    """Precomputed per-node, per-candidate scheme coefficients."""

    grid: GridSpec
    Ad: np.ndarray          # (C, *shape, n) second-derivative diagonal
    Ax: np.ndarray          # (C, *shape, P) cross terms, pairs in lex order
    B: np.ndarray           # (C, *shape, n) first-derivative coefficients
    labels: tuple
    has_cross: bool
    denom: float            # CFL denominator max_c,node sum_i (a_ii/h_i^2 + |b_i|/h_i)
    h: tuple

    @property
    def dtau_max(self) -> float:
        return math.inf if self.denom == 0.0 else CFL_SAFETY / self.denom

    def required_steps(self, horizon: float) -> int:
        if self.denom == 0.0:
            return 1
        return max(1, math.ceil(horizon * self.denom / CFL_SAFETY))


def _candidate_arrays(candidates, grid, allow_zero):
    """Normalize candidates to (labels, diag (C,N,n), cross (C,N,P)) arrays."""
    Z = grid.nodes_z()
    N, n = Z.shape
    pairs = grid.pairs
    P = max(1, len(pairs))
    labels = []
    diags = []
    crosses = []
    amus = []
    S = Z.sum(axis=1)
    mu = Z / S[:, None]
    for label, payload in candidates:
        labels.append(label)
        payload = np.asarray(payload, dtype=float)
        if payload.ndim == 2 and payload.shape == (N, n):
            diag = payload
            cross = np.zeros((N, P))
            amu = diag * mu
        else:
            if payload.shape == (n, n):
                full = np.broadcast_to(payload, (N, n, n))
            elif payload.shape == (N, n, n):
                full = payload
            else:
                raise ValueError(f"candidate {label!r} has unsupported shape "
                                 f"{payload.shape}")
            _validate_spd(full, label, allow_zero, grid)
            diag = np.ascontiguousarray(full[:, np.arange(n), np.arange(n)])
            cross = np.stack([full[:, i, j] for i, j in pairs], axis=1) if pairs \
                else np.zeros((N, 1))
            amu = np.einsum("nij,nj->ni", full, mu)
        if (diag < 0).any():
            bad = int(np.argmax((diag < 0).any(axis=1)))
            raise SchemeError(f"candidate {label!r} has a negative variance at "
                              f"node {bad}")
        if not allow_zero and not (diag > 0).all():
            bad = int(np.argmax(~(diag > 0).all(axis=1)))
            raise SchemeError(f"candidate {label!r} is degenerate at node {bad}; "
                              "pass allow_zero=True only for the zero-matrix test hook")
        diags.append(diag)
        crosses.append(cross)
        amus.append(amu)
    return labels, np.asarray(diags), np.asarray(crosses), np.asarray(amus)


def _validate_spd(full, label, allow_zero, grid):
    if allow_zero and not full.any():
        return
    sym_err = np.abs(full - np.swapaxes(full, 1, 2)).max()
    if sym_err > 1e-12 * max(1.0, np.abs(full).max()):
        raise SchemeError(f"candidate {label!r} is not symmetric")
    try:
        np.linalg.cholesky(full)
    except np.linalg.LinAlgError:
        for idx in range(full.shape[0]):
            try:
                np.linalg.cholesky(full[idx])
            except np.linalg.LinAlgError:
                node = np.unravel_index(idx, grid.shape)
                raise SchemeError(
                    f"candidate {label!r} is not positive definite at grid "
                    f"node {node}") from None


def build_coefficients(candidates, grid: GridSpec, mode: str = "hjb",
                       allow_zero: bool = False) -> Coefficients:
    """Assemble scheme coefficients for a list of (label, field) candidates.

    Fields are either diagonal (N, n) arrays of a_ii values or full (n, n) /
    (N, n, n) covariance tensors.  mode selects the first-order coefficient:
    "hjb" includes the capitalization drift term, "pucci" only the
    log-coordinate correction.
    """
    if mode not in ("hjb", "pucci"):
        raise ValueError("mode must be 'hjb' or 'pucci'")
    labels, diag, cross, amu = _candidate_arrays(candidates, grid, allow_zero)
    h = grid.h
    n = grid.ndim
    if mode == "hjb":
        B = amu - 0.5 * diag
    else:
        B = -0.5 * diag
    has_cross = bool(np.abs(cross).max() > 0.0)
    if has_cross:
        pairs = grid.pairs
        margin = np.empty_like(diag)
        for i in range(n):
            margin[..., i] = diag[..., i] / h[i] ** 2
            for p, (a, b) in enumerate(pairs):
                if i in (a, b):
                    margin[..., i] -= np.abs(cross[..., p]) / (h[a] * h[b])
        if margin.min() < -1e-12:
            c, node, i = np.unravel_index(int(np.argmin(margin)), margin.shape)
            raise SchemeError(
                "cross terms break the monotone stencil (diagonal dominance "
                f"fails for candidate {labels[c]!r} at node "
                f"{np.unravel_index(node, grid.shape)}, axis {i}); refine the "
                "grid aspect ratio")
    total = np.zeros(diag.shape[:-1])
    for i in range(n):
        total += diag[..., i] / h[i] ** 2 + np.abs(B[..., i]) / h[i]
    denom = float(total.max()) if total.size else 0.0

    shape = tuple(grid.shape)
    C = len(labels)
    Ad = np.ascontiguousarray(diag.reshape((C,) + shape + (n,)))
    P = cross.shape[-1]
    Ax = np.ascontiguousarray(cross.reshape((C,) + shape + (P,)))
    Bc = np.ascontiguousarray(B.reshape((C,) + shape + (n,)))
    return Coefficients(grid=grid, Ad=Ad, Ax=Ax, B=Bc, labels=tuple(labels),
                        has_cross=has_cross, denom=denom, h=h)


def family_candidates(family: UncertaintySetFamily, scan: CandidateScan,
                      grid: GridSpec):
    """Per-node candidate fields of a family over a grid, scan order preserved."""
    if family.n != grid.ndim:
        raise ValueError(f"family dimension {family.n} does not match grid "
                         f"dimension {grid.ndim}")
    Z = grid.nodes_z()
    S = Z.sum(axis=1)
    if family.kind == FINITE_LIST:
        return [(f"gen[{i}]", a) for i, (_, a) in enumerate(family.generators)]
    return [(label, c[None, :] * S[:, None] / Z)
            for label, c in family._diag_scales(scan)]


def _source_candidates(a_source, grid, label):
    """Normalize a fixed-covariance source to the candidate-field format."""
    n = grid.ndim
    if callable(a_source):
        Z = grid.nodes_z()
        probe = np.asarray(a_source(Z[0]), dtype=float)
        if probe.shape == (n, n):
            field = np.empty((Z.shape[0], n, n))
            for idx in range(Z.shape[0]):
                field[idx] = a_source(Z[idx])
            return [(label, field)]
        raise ValueError("a callable covariance source must map an n-vector "
                         "to an (n, n) matrix; pass arrays for vectorized fields")
    arr = np.asarray(a_source, dtype=float)
    return [(label, arr)]


# ---------------------------------------------------------------------------
# marching
# ---------------------------------------------------------------------------

def _march(coeffs: Coefficients, grid: GridSpec, init: np.ndarray, floor,
           record_policy: bool, strict_cfl: bool, max_levels: int,
           norm: np.ndarray | None, tag: str, labels, extra_meta=None):
    K_req = coeffs.required_steps(grid.horizon)
    if strict_cfl and grid.steps < K_req:
        raise CflError(grid.steps, K_req, coeffs.dtau_max)
    K = max(grid.steps, K_req)
    dtau = grid.horizon / K
    ks = retained_levels(K, max_levels)
    taus = ks.astype(float) * dtau
    taus[-1] = grid.horizon

    cur = np.array(init, dtype=float)
    nxt = np.array(init, dtype=float)

    slices = np.empty((len(ks),) + tuple(grid.shape))
    pol = np.zeros(tuple(grid.shape), dtype=np.int32)
    policies = (np.zeros((len(ks),) + tuple(grid.shape), dtype=np.int32)
                if record_policy else None)
    opbuf = np.zeros(tuple(grid.shape)) if record_policy else None

    def snapshot(level, step):
        slices[level] = cur
        if not np.isfinite(cur).all():
            node = np.unravel_index(int(np.argmax(~np.isfinite(cur))), cur.shape)
            raise NonFiniteError(
                f"non-finite value at step {step} (tau={step * dtau:.6g}), "
                f"node {node}", step=step, node=node)
        if record_policy:
            _sweep(cur, opbuf, pol, coeffs, dtau, record_policy=True,
                   as_operator=True)
            policies[level] = pol

    snapshot(0, 0)
    level = 1
    for k in range(1, K + 1):
        _sweep(cur, nxt, pol, coeffs, dtau)
        _set_low_faces(nxt, floor, tau=k * dtau)
        _apply_high_faces(nxt, norm=norm)
        cur, nxt = nxt, cur
        if level < len(ks) and k == ks[level]:
            snapshot(level, k)
            level += 1

    meta = {
        "k_requested": grid.steps,
        "k_required": K_req,
        "k_effective": K,
        "dtau": dtau,
        "cfl_denominator": coeffs.denom,
        "cfl_safety": CFL_SAFETY,
        "retained_stride": int(ks[1] - ks[0]) if len(ks) > 1 else 0,
        "floor": "calibrated-table" if isinstance(floor, FloorTable) else floor,
        "candidates": list(labels),
        "scheme": "explicit-euler-monotone-upwind",
    }
    if extra_meta:
        meta.update(extra_meta)
    gf = GridFunction(grid=grid, taus=taus, values=slices, tag=tag, meta=meta)
    pf = None
    if record_policy:
        pf = PolicyField(grid=grid, taus=taus, indices=policies,
                         labels=tuple(labels), meta=dict(meta))
    return gf, pf


def _ones_init(grid):
    return np.ones(tuple(grid.shape))


def _total_cap(grid):
    Z = grid.nodes_z()
    return Z.sum(axis=1).reshape(tuple(grid.shape))


# ---------------------------------------------------------------------------
# public solvers
# ---------------------------------------------------------------------------

def required_steps(family, scan, grid, mode="hjb") -> int:
    """Stability-mandated minimum time-step count for a family on a grid."""
    coeffs = build_coefficients(family_candidates(family, scan, grid), grid,
                                mode=mode)
    return coeffs.required_steps(grid.horizon)


def solve_linear(a_source, grid: GridSpec, *, floor=0.0, allow_zero=False,
                 strict_cfl=False, max_levels=65, label="a",
                 meta=None) -> GridFunction:
    """March the linear equation for a fixed covariance field.

    a_source may be a callable z -> (n, n) matrix, a constant (n, n) matrix,
    a per-node (N, n, n) tensor, or a per-node diagonal (N, n) array.
    """
    cands = _source_candidates(a_source, grid, label)
    coeffs = build_coefficients(cands, grid, mode="hjb", allow_zero=allow_zero)
    gf, _ = _march(coeffs, grid, _ones_init(grid), floor, False, strict_cfl,
                   max_levels, None, "U", coeffs.labels, meta)
    return gf


def solve_hjb(family: UncertaintySetFamily, scan: CandidateScan,
              grid: GridSpec, *, floor=0.0, strict_cfl=False, max_levels=65,
              check_family=True, meta=None):
    """March the fully nonlinear equation; returns (solution, policy field).

    The per-node maximizing candidate index is recorded at every retained
    level; ties resolve to the lowest index.
    """
    if check_family:
        _precheck_family(family, scan, grid)
    cands = family_candidates(family, scan, grid)
    coeffs = build_coefficients(cands, grid, mode="hjb")
    extra = {"scale_invariant": bool(family.scale_invariant)}
    if meta:
        extra.update(meta)
    gf, pf = _march(coeffs, grid, _ones_init(grid), floor, True, strict_cfl,
                    max_levels, None, "U", coeffs.labels, extra)
    return gf, pf


def solve_pucci(family: UncertaintySetFamily, scan: CandidateScan,
                grid: GridSpec, *, allow_zero=False, strict_cfl=False,
                max_levels=65, check_family=True, meta=None) -> GridFunction:
    """March the extremal second-order equation for the capitalization-scaled
    value, started from the total capitalization."""
    if check_family and not allow_zero:
        _precheck_family(family, scan, grid)
    cands = family_candidates(family, scan, grid)
    coeffs = build_coefficients(cands, grid, mode="pucci", allow_zero=allow_zero)
    total = _total_cap(grid)
    gf, _ = _march(coeffs, grid, total, 0.0, False, strict_cfl, max_levels,
                   total, "V", coeffs.labels, meta)
    return gf


def _precheck_family(family, scan, grid, max_probes=128):
    Z = grid.nodes_z()
    stride = max(1, Z.shape[0] // max_probes)
    report = check_admissibility(family, Z[::stride], scan)
    if not report.all_passed:
        bad = [e.name for e in report.entries.values() if not e.passed]
        raise ValueError(
            f"family fails admissibility on the grid image: {', '.join(bad)}; "
            "inspect check_admissibility for witnesses")


# ---------------------------------------------------------------------------
# inequality-membership check
# ---------------------------------------------------------------------------

@dataclass
class PdiReport:
    """Residual of the differential inequality on retained slices."""

    residuals: np.ndarray       # (num_slices - 1,) + grid.shape, zero on edges
    taus: np.ndarray
    min_residual: float
    max_abs_residual: float
    witness: tuple              # (interval index, node multi-index)
    tol: float
    passed: bool
    skipped_initial: int
    low_edge_margin: int

    def to_json_dict(self):
        return {
            "min_residual": self.min_residual,
            "max_abs_residual": self.max_abs_residual,
            "witness_interval": int(self.witness[0]),
            "witness_node": [int(v) for v in self.witness[1]],
            "tol": self.tol,
            "passed": bool(self.passed),
            "skipped_initial": self.skipped_initial,
            "low_edge_margin": self.low_edge_margin,
        }


def pdi_residual(candidate: GridFunction, family: UncertaintySetFamily,
                 scan: CandidateScan, tol: float | None = None,
                 skip_initial: int = 1, low_edge_margin: int = 2) -> PdiReport:
    """Finite-difference residual dU/dtau - sup_a(operator U) between retained
    slices, with a membership verdict when the residual is >= -tol on the
    checked region.

    The first skip_initial intervals and a margin of nodes next to the low
    faces are excluded from the verdict: the Dirichlet data there creates a
    boundary layer that retained-slice differencing cannot resolve.  The full
    residual field is returned regardless.
    """
    if candidate.num_slices < 2:
        raise ValueError("need at least two retained slices")
    grid = candidate.grid
    coeffs = build_coefficients(family_candidates(family, scan, grid), grid,
                                mode="hjb")
    S = candidate.num_slices
    res = np.zeros((S - 1,) + tuple(grid.shape))
    opval = np.zeros(tuple(grid.shape))
    pol = np.zeros(tuple(grid.shape), dtype=np.int32)
    inner = tuple(slice(1, -1) for _ in range(grid.ndim))
    for k in range(S - 1):
        dtau = candidate.taus[k + 1] - candidate.taus[k]
        mid = 0.5 * (candidate.values[k] + candidate.values[k + 1])
        _sweep(mid, opval, pol, coeffs, 0.0, as_operator=True)
        rate = (candidate.values[k + 1] - candidate.values[k]) / dtau
        res[(k,) + inner] = (rate - opval)[inner]

    if tol is None:
        tol = 1e-2 * max(1.0, float(np.abs(candidate.values).max()))
    mask = np.zeros_like(res, dtype=bool)
    core = tuple(slice(1 + low_edge_margin, -1) for _ in range(grid.ndim))
    mask[(slice(skip_initial, None),) + core] = True
    if not mask.any():
        raise ValueError("exclusions leave nothing to check; reduce margins")
    checked = np.where(mask, res, np.inf)
    flat = int(np.argmin(checked))
    widx = np.unravel_index(flat, checked.shape)
    min_r = float(checked[widx])
    return PdiReport(
        residuals=res,
        taus=candidate.taus,
        min_residual=min_r,
        max_abs_residual=float(np.abs(res[mask]).max()),
        witness=(widx[0], widx[1:]),
        tol=float(tol),
        passed=bool(min_r >= -tol),
        skipped_initial=skip_initial,
        low_edge_margin=low_edge_margin,
    )
