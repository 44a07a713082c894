"""Set-valued uncertainty in the covariance and relative-risk structure of a market.

A family assigns to every state y in the punctured positive orthant a compact,
convex set of admissible (theta, a) pairs: theta is the relative-risk vector and
a the covariance matrix of the asset capitalizations at that state.  The engine
only ever needs finite candidate scans of these sets, with parameter-interval
endpoints always included so that suprema of maps monotone in the scan
parameter are resolved exactly.
"""

from __future__ import annotations

import itertools
import json
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

VOLSTAB_BAND = "volstab_band"
FINITE_LIST = "finite_list"
DIAGONAL_INTERVAL = "diagonal_interval"


@dataclass(frozen=True)
class CandidateScan:
    """Finite discretization of the scan parameters of an uncertainty family.

    num_eta samples the volatility band (or each per-coordinate variance
    interval), num_zeta the relative-risk band.  Interval endpoints are always
    among the samples.
    """

    num_eta: int = 3
    num_zeta: int = 3

    def __post_init__(self):
        if self.num_eta < 2:
            raise ValueError("num_eta must be >= 2 (endpoints must be sampled)")
        if self.num_zeta < 2:
            raise ValueError("num_zeta must be >= 2 (endpoints must be sampled)")


def _band(lo: float, hi: float, k: int) -> np.ndarray:
    if hi <= lo:
        return np.asarray([lo], dtype=float)
    return np.linspace(lo, hi, k)


@dataclass(frozen=True)
class UncertaintySetFamily:
    """Parameterized family of admissible (theta, a) sets over the orthant.

    Kinds:
      volstab_band      -- diagonal a with y_i a_ii = eta^2 (y_1+...+y_n),
                           eta in [1, 1+delta]; theta_i = zeta sqrt(a_ii) with
                           zeta in [sqrt(c1), sqrt(c2)].
      diagonal_interval -- diagonal a with y_i a_ii/(y_1+...+y_n) in
                           [lo_i, hi_i] per coordinate; same theta band.
      finite_list       -- an explicit list of constant (theta, a) generators,
                           the same at every evaluation point.
    """

    n: int
    kind: str
    delta: float = 0.0
    c1: float = 1.0
    c2: float = 4.0
    bounds_lo: tuple = ()
    bounds_hi: tuple = ()
    generators: tuple = ()
    growth_constant: float = 6.0

    def __post_init__(self):
        if self.n < 2:
            raise ValueError("dimension must be >= 2")
        if self.growth_constant <= 0:
            raise ValueError("growth_constant must be positive")
        if self.kind == VOLSTAB_BAND:
            if self.delta < 0:
                raise ValueError("delta must be >= 0")
            if not (0 < self.c1 <= 1 < self.c2):
                raise ValueError("need 0 < c1 <= 1 < c2")
        elif self.kind == DIAGONAL_INTERVAL:
            lo = np.asarray(self.bounds_lo, dtype=float)
            hi = np.asarray(self.bounds_hi, dtype=float)
            if lo.shape != (self.n,) or hi.shape != (self.n,):
                raise ValueError("per-coordinate bounds must have length n")
            if (lo <= 0).any() or (hi < lo).any():
                raise ValueError("bounds must satisfy 0 < lo_i <= hi_i")
            if not (0 < self.c1 <= 1 < self.c2):
                raise ValueError("need 0 < c1 <= 1 < c2")
        elif self.kind == FINITE_LIST:
            if not self.generators:
                raise ValueError("finite_list needs at least one (theta, a) generator")
            for theta, a in self.generators:
                theta = np.asarray(theta, dtype=float)
                a = np.asarray(a, dtype=float)
                if theta.shape != (self.n,) or a.shape != (self.n, self.n):
                    raise ValueError("generator shapes must be (n,) and (n, n)")
                if not np.allclose(a, a.T):
                    raise ValueError("generator covariance must be symmetric")
        else:
            raise ValueError(f"unknown family kind {self.kind!r}")

    # -- constructors ----------------------------------------------------

    @classmethod
    def volstab_band(cls, n, delta=0.0, c1=1.0, c2=4.0, growth_constant=6.0):
        return cls(n=n, kind=VOLSTAB_BAND, delta=float(delta), c1=float(c1),
                   c2=float(c2), growth_constant=growth_constant)

    @classmethod
    def diagonal_interval(cls, n, lo, hi, c1=1.0, c2=4.0, growth_constant=6.0):
        return cls(n=n, kind=DIAGONAL_INTERVAL, bounds_lo=tuple(float(v) for v in lo),
                   bounds_hi=tuple(float(v) for v in hi), c1=float(c1), c2=float(c2),
                   growth_constant=growth_constant)

    @classmethod
    def finite_list(cls, pairs, growth_constant=6.0):
        pairs = tuple(
            (np.asarray(t, dtype=float).copy(), np.asarray(a, dtype=float).copy())
            for t, a in pairs
        )
        n = pairs[0][0].shape[0]
        fam = cls(n=n, kind=FINITE_LIST, generators=pairs,
                  growth_constant=growth_constant)
        return fam

    # -- scan grids ------------------------------------------------------

    @property
    def scale_invariant(self) -> bool:
        """Whether the covariance sets satisfy A(lam*y) = A(y) for lam > 0."""
        # The banded kinds depend on y only through the weights y_i / sum(y),
        # and constant generator lists do not depend on y at all.
        return True

    def eta_values(self, scan: CandidateScan) -> np.ndarray:
        return _band(1.0, 1.0 + self.delta, scan.num_eta)

    def zeta_values(self, scan: CandidateScan) -> np.ndarray:
        return _band(np.sqrt(self.c1), np.sqrt(self.c2), scan.num_zeta)

    def _diag_scales(self, scan: CandidateScan):
        """Per-candidate scaled-variance vectors c with a_ii = c_i * S / y_i."""
        if self.kind == VOLSTAB_BAND:
            return [(f"eta={eta:g}", np.full(self.n, eta * eta))
                    for eta in self.eta_values(scan)]
        if self.kind == DIAGONAL_INTERVAL:
            axes = [_band(self.bounds_lo[i], self.bounds_hi[i], scan.num_eta)
                    for i in range(self.n)]
            out = []
            for combo in itertools.product(*axes):
                lab = "c=(" + ",".join(f"{v:g}" for v in combo) + ")"
                out.append((lab, np.asarray(combo, dtype=float)))
            return out
        return None

    # -- candidate enumeration -------------------------------------------

    def covariance_candidates(self, y, scan: CandidateScan):
        """All scanned covariance matrices of the set at y, endpoints included."""
        y = _check_point(y, self.n)
        if self.kind == FINITE_LIST:
            return [a.copy() for _, a in self.generators]
        s = float(y.sum())
        return [np.diag(c * s / y) for _, c in self._diag_scales(scan)]

    def pair_candidates(self, y, scan: CandidateScan):
        """Scanned (theta, a) pairs of the set at y."""
        y = _check_point(y, self.n)
        if self.kind == FINITE_LIST:
            return [(t.copy(), a.copy()) for t, a in self.generators]
        s = float(y.sum())
        zetas = self.zeta_values(scan)
        out = []
        for _, c in self._diag_scales(scan):
            diag = c * s / y
            root = np.sqrt(diag)
            for z in zetas:
                out.append((z * root, np.diag(diag)))
        return out

    def contains(self, theta, a, y, rtol=1e-8) -> bool:
        """Membership test for a (theta, a) pair at state y, within tolerance."""
        y = _check_point(y, self.n)
        theta = np.asarray(theta, dtype=float)
        a = np.asarray(a, dtype=float)
        if self.kind == FINITE_LIST:
            for t0, a0 in self.generators:
                if np.allclose(theta, t0, rtol=rtol, atol=1e-12) and \
                   np.allclose(a, a0, rtol=rtol, atol=1e-12):
                    return True
            return False
        off = a - np.diag(np.diag(a))
        if np.abs(off).max() > rtol * max(1.0, np.abs(a).max()):
            return False
        diag = np.diag(a)
        if (diag <= 0).any():
            return False
        scaled = y * diag / y.sum()
        slack = rtol * max(1.0, float(scaled.max()))
        if self.kind == VOLSTAB_BAND:
            if scaled.max() - scaled.min() > slack:
                return False
            eta2 = float(scaled.mean())
            if not (1.0 - slack <= eta2 <= (1.0 + self.delta) ** 2 + slack):
                return False
        else:
            lo = np.asarray(self.bounds_lo)
            hi = np.asarray(self.bounds_hi)
            if (scaled < lo - slack).any() or (scaled > hi + slack).any():
                return False
        zeta = theta / np.sqrt(diag)
        zslack = rtol * max(1.0, float(np.abs(zeta).max()))
        if zeta.max() - zeta.min() > zslack:
            return False
        zbar = float(zeta.mean())
        return np.sqrt(self.c1) - zslack <= zbar <= np.sqrt(self.c2) + zslack

    def to_config(self) -> dict:
        cfg = {"kind": self.kind, "n": self.n,
               "growth_constant": self.growth_constant}
        if self.kind == VOLSTAB_BAND:
            cfg.update(delta=self.delta, c1=self.c1, c2=self.c2)
        elif self.kind == DIAGONAL_INTERVAL:
            cfg.update(lo=list(self.bounds_lo), hi=list(self.bounds_hi),
                       c1=self.c1, c2=self.c2)
        else:
            cfg["generators"] = [
                {"theta": t.tolist(), "a": a.tolist()} for t, a in self.generators
            ]
        return cfg


def _check_point(y, n):
    y = np.asarray(y, dtype=float)
    if y.shape != (n,):
        raise ValueError(f"point must be a length-{n} vector, got shape {y.shape}")
    if not (y > 0).all():
        raise ValueError("point must be strictly positive componentwise")
    return y


def covariance_set(family: UncertaintySetFamily, y, scan: CandidateScan):
    """Finite scan of the covariance set at y; every matrix is symmetric PD.

    Raises on nonpositive components of y and on an empty scan.
    """
    cands = family.covariance_candidates(y, scan)
    if not cands:
        raise ValueError("candidate scan is empty")
    return cands


# ---------------------------------------------------------------------------
# admissibility conditions
# ---------------------------------------------------------------------------

@dataclass
class ConditionEntry:
    name: str
    description: str
    worst: float
    threshold: float
    passed: bool
    witness: list
    candidate: str
    sense: str  # "max<=C" or "min>0"

    def as_dict(self):
        return {
            "name": self.name,
            "description": self.description,
            "worst": self.worst,
            "threshold": self.threshold,
            "passed": bool(self.passed),
            "witness": self.witness,
            "candidate": self.candidate,
            "sense": self.sense,
        }


@dataclass
class ConditionReport:
    entries: dict
    probes: int
    family: dict

    @property
    def all_passed(self) -> bool:
        return all(e.passed for e in self.entries.values())

    def to_json(self, **kw) -> str:
        payload = {
            "probes": self.probes,
            "family": self.family,
            "all_passed": self.all_passed,
            "conditions": {k: v.as_dict() for k, v in self.entries.items()},
        }
        return json.dumps(payload, **kw)


def _probe_array(probe_points, n):
    probes = np.atleast_2d(np.asarray(probe_points, dtype=float))
    if probes.size == 0:
        raise ValueError("probe_points must be nonempty")
    if probes.shape[1] != n:
        raise ValueError(f"probe points must have {n} coordinates")
    if not (probes > 0).all():
        raise ValueError("probe points must be strictly positive")
    return probes


def check_admissibility(family, probe_points, scan: CandidateScan | None = None) -> ConditionReport:
    """Empirically verify growth, shear and ellipticity conditions on a probe compact.

    Any object exposing ``n``, ``growth_constant`` and
    ``pair_candidates(y, scan)`` can be checked, so user-defined families are
    supported.  A failed condition is reported, not raised.
    """
    scan = scan or CandidateScan()
    probes = _probe_array(probe_points, family.n)
    C = family.growth_constant

    worst = {
        "growth_pointwise": (-np.inf, None, ""),   # max_ij y_i y_j |a_ij| / S / (1+|y|)
        "growth_quadratic": (-np.inf, None, ""),   # sum_ij y_i y_j a_ij / S^2
        "shear": (-np.inf, None, ""),              # |th|^2/(1+tr a) + tr a/(1+|th|^2)
    }
    elli = (np.inf, None, "")                      # min eigenvalue over probes

    for y in probes:
        s = float(y.sum())
        nrm = float(np.linalg.norm(y))
        for idx, (theta, a) in enumerate(family.pair_candidates(y, scan)):
            label = f"candidate[{idx}]"
            yy = np.outer(y, y)
            gp = float(np.max(yy * np.abs(a)) / s / (1.0 + nrm))
            gq = float(y @ a @ y / (s * s))
            tra = float(np.trace(a))
            th2 = float(theta @ theta)
            sh = th2 / (1.0 + tra) + tra / (1.0 + th2)
            lam = float(np.linalg.eigvalsh(a)[0])
            if gp > worst["growth_pointwise"][0]:
                worst["growth_pointwise"] = (gp, y, label)
            if gq > worst["growth_quadratic"][0]:
                worst["growth_quadratic"] = (gq, y, label)
            if sh > worst["shear"][0]:
                worst["shear"] = (sh, y, label)
            if lam < elli[0]:
                elli = (lam, y, label)

    entries = {}
    descr = {
        "growth_pointwise": "max_ij y_i y_j |a_ij| / (y_1+...+y_n) <= C (1 + |y|)",
        "growth_quadratic": "sum_ij y_i y_j a_ij <= C (y_1+...+y_n)^2",
        "shear": "|theta|^2/(1+tr a) + tr a/(1+|theta|^2) <= C",
    }
    for name, (val, y, lab) in worst.items():
        entries[name] = ConditionEntry(
            name=name, description=descr[name], worst=val, threshold=C,
            passed=bool(val <= C), witness=list(map(float, y)), candidate=lab,
            sense="max<=C",
        )
    lam, y, lab = elli
    entries["ellipticity"] = ConditionEntry(
        name="ellipticity",
        description="min Rayleigh quotient of a over the probe compact > 0",
        worst=lam, threshold=0.0, passed=bool(lam > 0.0),
        witness=list(map(float, y)), candidate=lab, sense="min>0",
    )
    fam_cfg = family.to_config() if hasattr(family, "to_config") else {"kind": "custom"}
    return ConditionReport(entries=entries, probes=len(probes), family=fam_cfg)


def arbitrage_sufficiency(family, probe_points, scan: CandidateScan | None = None,
                          zero_tol: float = 1e-9) -> dict:
    """Empirical infima of the two sufficiency expressions that certify
    outperformance with a positive margin.

    Expression I:   sum_i z_i a_ii / S  -  sum_ij z_i z_j a_ij / S^2
    Expression II:  (prod z)^(1/n) / S * (sum_i a_ii - (1/n) sum_ij a_ij)

    Returns the infimum as the certified constant when it exceeds
    ``zero_tol``, otherwise None for that expression.
    """
    scan = scan or CandidateScan()
    probes = _probe_array(probe_points, family.n)
    n = family.n
    inf1 = np.inf
    inf2 = np.inf
    for z in probes:
        s = float(z.sum())
        geo = float(np.prod(z) ** (1.0 / n))
        for _, a in _iter_cov(family, z, scan):
            diag = np.diag(a)
            e1 = float((z * diag).sum() / s - z @ a @ z / (s * s))
            e2 = geo / s * float(diag.sum() - a.sum() / n)
            inf1 = min(inf1, e1)
            inf2 = min(inf2, e2)
    return {
        "zeta_313": inf1 if inf1 > zero_tol else None,
        "zeta_314": inf2 if inf2 > zero_tol else None,
    }


def _iter_cov(family, y, scan):
    if hasattr(family, "covariance_candidates"):
        for i, a in enumerate(family.covariance_candidates(y, scan)):
            yield f"candidate[{i}]", a
    else:
        for i, (theta, a) in enumerate(family.pair_candidates(y, scan)):
            yield f"candidate[{i}]", a
