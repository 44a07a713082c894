"""Seeded Monte Carlo simulation of market models and auxiliary diffusions.

Primal dynamics move each capitalization by its volatility rows against a
Brownian motion plus the relative-risk drift; auxiliary dynamics carry the
capitalization-weighted covariance drift instead and are the ones whose
boundary-avoidance probability the PDE solvers compute.  The deflator is
stepped by the exact exponential of its discrete log increment, and the
normalized reciprocal of the deflated total capitalization is kept consistent
with it by construction.

Randomness is counter-addressed: the normal increments of step k are the k-th
counter block of a Philox stream keyed by the run seed, so any (path, step)
increment is reproducible in isolation and results are independent of how
paths are scheduled.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .errors import ConstraintViolationError, NonFiniteError
from .grids import retained_levels

EULER_FULL_TRUNCATION = "euler_full_truncation"
LOG_EULER = "log_euler"


def step_normals(seed: int, step: int, shape) -> np.ndarray:
    """Standard normals for one global step, addressable by (seed, step)."""
    bitgen = np.random.Philox(key=int(seed), counter=(int(step) + 1) << 64)
    return np.random.Generator(bitgen).standard_normal(shape)


def market_weights(Z: np.ndarray) -> np.ndarray:
    """Capitalization weights normalized so they sum to one exactly."""
    Z = np.asarray(Z, dtype=float)
    s = Z.sum(axis=-1, keepdims=True)
    mu = Z / s
    tail = 1.0 - mu[..., :-1].sum(axis=-1)
    mu[..., -1] = np.maximum(tail, 0.0)
    return mu


@dataclass
class SimConfig:
    """Simulation parameters; the seed fixes every random draw of a run."""

    horizon: float
    steps: int
    paths: int
    seed: int
    eps_abs: float = 1e-6
    scheme: str = EULER_FULL_TRUNCATION
    retained_levels: int = 33

    def __post_init__(self):
        if self.horizon < 0:
            raise ValueError("horizon must be nonnegative")
        if self.steps < 1:
            raise ValueError("steps must be >= 1")
        if self.paths < 1:
            raise ValueError("paths must be >= 1")
        if not (0 < self.eps_abs < 0.1):
            raise ValueError("eps_abs must lie in (0, 0.1)")
        if self.scheme not in (EULER_FULL_TRUNCATION, LOG_EULER):
            raise ValueError(f"unknown scheme {self.scheme!r}")
        if self.retained_levels < 2:
            raise ValueError("retained_levels must be >= 2")

    def to_config(self) -> dict:
        return {"horizon": self.horizon, "steps": self.steps, "paths": self.paths,
                "seed": self.seed, "eps_abs": self.eps_abs, "scheme": self.scheme,
                "retained_levels": self.retained_levels}


@dataclass
class MarketModelSpec:
    """A Markovian market model: covariance and relative-risk selectors.

    mode "primal" runs the market dynamics; mode "auxiliary" runs the
    controlled diffusion whose drift is the covariance functional alone (the
    relative-risk selector is then only used for the reciprocal-deflator
    bookkeeping and constraint checks).
    """

    n: int
    mode: str
    diagonal: bool
    a_fn: Optional[Callable] = None       # (t, Z(M,n)) -> (M,n) diag variances
    theta_fn: Optional[Callable] = None   # (t, Z(M,n)) -> (M,n)
    family: object = None
    label: str = "model"
    const_a: Optional[np.ndarray] = None  # dense constant-coefficient variant
    const_s: Optional[np.ndarray] = None
    const_theta: Optional[np.ndarray] = None

    def __post_init__(self):
        if self.mode not in ("primal", "auxiliary"):
            raise ValueError("mode must be 'primal' or 'auxiliary'")
        if self.diagonal and self.a_fn is None:
            raise ValueError("diagonal models need a_fn")
        if not self.diagonal and self.const_a is None:
            raise ValueError("dense models are supported with constant "
                             "coefficients; pass const_a")

    @classmethod
    def diagonal_model(cls, n, a_fn, theta_fn=None, mode="primal", family=None,
                       label="model"):
        return cls(n=n, mode=mode, diagonal=True, a_fn=a_fn, theta_fn=theta_fn,
                   family=family, label=label)

    @classmethod
    def constant_model(cls, theta, a, mode="primal", family=None,
                       label="constant"):
        theta = np.asarray(theta, dtype=float)
        a = np.asarray(a, dtype=float)
        n = len(theta)
        if a.shape != (n, n):
            raise ValueError("covariance must be (n, n)")
        if a.any():
            s = np.linalg.cholesky(a)
        else:
            s = np.zeros_like(a)
        return cls(n=n, mode=mode, diagonal=False, family=family, label=label,
                   const_a=a, const_s=s, const_theta=theta)


@dataclass
class PathBundle:
    """Retained observations of a seeded path ensemble."""

    times: np.ndarray            # (S,)
    X: np.ndarray                # (M, S, n) capitalizations
    L: np.ndarray                # (M, S) deflator (frozen value after absorption)
    Lam: np.ndarray              # (M, S) normalized reciprocal, 0 after absorption
    mu: np.ndarray               # (M, S, n) market weights
    absorbed_step: np.ndarray    # (M,) step index of absorption, -1 if never
    alive_obs: np.ndarray        # (M, S) bool
    x0: np.ndarray
    config: SimConfig
    model_label: str
    mode: str
    counters: dict = field(default_factory=dict)

    @property
    def paths(self) -> int:
        return self.X.shape[0]

    @property
    def total(self) -> np.ndarray:
        return self.X.sum(axis=-1)

    @property
    def deflated_total(self) -> np.ndarray:
        """L * (total capitalization), +inf after absorption."""
        return np.where(self.alive_obs, self.L * self.total, np.inf)

    @property
    def survived(self) -> np.ndarray:
        return self.absorbed_step < 0

    def q_curve(self) -> np.ndarray:
        """Fraction of paths not yet absorbed at each retained time."""
        return self.alive_obs.mean(axis=0)

    def summary_dict(self) -> dict:
        tot = self.total
        return {
            "paths": int(self.paths),
            "times": self.times.tolist(),
            "model": self.model_label,
            "mode": self.mode,
            "survived_fraction": float(self.survived.mean()),
            "mean_total": tot.mean(axis=0).tolist(),
            "mean_weights": self.mu.mean(axis=0).tolist(),
            "config": self.config.to_config(),
            "counters": self.counters,
        }


def _check_constraints(model: MarketModelSpec, t: float, X: np.ndarray,
                       n_spot: int = 8):
    fam = model.family
    if fam is None or model.theta_fn is None and model.const_theta is None:
        return 0
    pts = X[: min(n_spot, X.shape[0])]
    if model.diagonal:
        ad = np.atleast_2d(model.a_fn(t, pts))
        th = np.atleast_2d(model.theta_fn(t, pts))
        for p in range(pts.shape[0]):
            if not fam.contains(th[p], np.diag(ad[p]), pts[p]):
                raise ConstraintViolationError(
                    f"model {model.label!r} left its uncertainty set at t="
                    f"{t:.6g}, state {pts[p]}", time=t, state=pts[p].copy())
    else:
        for p in range(pts.shape[0]):
            if not fam.contains(model.const_theta, model.const_a, pts[p]):
                raise ConstraintViolationError(
                    f"model {model.label!r} left its uncertainty set at t="
                    f"{t:.6g}, state {pts[p]}", time=t, state=pts[p].copy())
    return pts.shape[0]


def _run(model: MarketModelSpec, x0, cfg: SimConfig, rule=None, fields=None,
         rule_horizon=None):
    """Shared path-marching core for simulate and backtest.

    With a rule, the market-relative wealth multiplier and the surplus
    accumulator are carried along the same increments, so wealth paths couple
    bit-identically to the plain ensemble of the same seed.
    """
    x0 = np.asarray(x0, dtype=float)
    n = model.n
    if x0.shape != (n,) or not (x0 > 0).all():
        raise ValueError("x0 must be a strictly positive n-vector")
    M = cfg.paths
    S0 = float(x0.sum())
    thresh = cfg.eps_abs * S0
    K = cfg.steps if cfg.horizon > 0 else 0
    dt = cfg.horizon / K if K else 0.0
    sqdt = math.sqrt(dt)
    ks = retained_levels(K, cfg.retained_levels)
    times = ks.astype(float) * dt
    if K:
        times[-1] = cfg.horizon
    S = len(ks)

    X = np.tile(x0, (M, 1))
    lnL = np.zeros(M)
    lnLam = np.zeros(M)
    alive = np.ones(M, dtype=bool)
    absorbed_step = np.full(M, -1, dtype=np.int64)

    Xo = np.empty((M, S, n))
    Lo = np.empty((M, S))
    LamO = np.empty((M, S))
    MuO = np.empty((M, S, n))
    AliveO = np.empty((M, S), dtype=bool)
    track_wealth = rule is not None
    if track_wealth:
        W = np.ones(M)
        Csur = np.zeros(M)
        Wo = np.empty((M, S))
        Co = np.empty((M, S))
    clamp_mult = 0
    checks = 0
    aux = model.mode == "auxiliary"

    def record(level):
        Xo[:, level] = X
        MuO[:, level] = market_weights(X)
        AliveO[:, level] = alive
        if aux:
            LamO[:, level] = np.where(alive, np.exp(lnLam), 0.0)
            with np.errstate(divide="ignore"):
                Lo[:, level] = np.where(
                    alive, S0 / (np.exp(lnLam) * X.sum(axis=1)), np.inf)
        else:
            L = np.exp(lnL)
            Lo[:, level] = L
            LamO[:, level] = np.where(alive, S0 / (L * X.sum(axis=1)), 0.0)
        if track_wealth:
            Wo[:, level] = W
            Co[:, level] = Csur

    def surplus_increment(level):
        # left-endpoint quadrature of the nonnegative integrand over the
        # retained interval; frozen paths contribute nothing
        t_prev = times[level - 1]
        d_obs = times[level] - times[level - 1]
        Zp = Xo[:, level - 1]
        tau = (rule_horizon if rule_horizon is not None else cfg.horizon) - t_prev
        good = AliveO[:, level - 1]
        Zs = np.where(good[:, None], Zp, 1.0)
        if model.diagonal:
            a_eval = model.a_fn(t_prev, Zs)
        else:
            a_eval = model.const_a
        delta = fields.delta_at(tau, Zs, a_eval)
        uval = fields.u_at(tau, Zs)
        incr = np.where(good, -delta / np.maximum(uval, 1e-300) * d_obs, 0.0)
        return incr

    record(0)
    checks += _check_constraints(model, 0.0, X)
    level = 1
    for k in range(K):
        t = k * dt
        dW = step_normals(cfg.seed, k, (M, n)) * sqdt
        Xe = np.where(alive[:, None], X, 1.0)
        Xs = Xe.sum(axis=1)
        if model.diagonal:
            ad = model.a_fn(t, Xe)
            sd = np.sqrt(ad)
            theta = model.theta_fn(t, Xe) if model.theta_fn is not None else None
            if aux:
                mu = Xe / Xs[:, None]
                rel_drift = ad * mu
            else:
                if theta is None:
                    raise ValueError("primal diagonal models need theta_fn")
                rel_drift = sd * theta
            vol_term = sd * dW
        else:
            s_mat = model.const_s
            theta = (np.broadcast_to(model.const_theta, (M, n))
                     if model.const_theta is not None else None)
            if aux:
                rel_drift = (Xe @ model.const_a) / Xs[:, None]
            else:
                rel_drift = np.broadcast_to(model.const_s @ model.const_theta,
                                            (M, n))
            vol_term = dW @ s_mat.T
            ad = np.broadcast_to(np.diag(model.const_a), (M, n))

        if cfg.scheme == EULER_FULL_TRUNCATION:
            Xn = X + X * (rel_drift * dt + vol_term)
            np.maximum(Xn, 0.0, out=Xn)
        else:
            Xn = X * np.exp((rel_drift - 0.5 * ad) * dt + vol_term)

        if aux:
            tilde = -sd * (Xe / Xs[:, None]) if model.diagonal else \
                -(Xe / Xs[:, None]) @ model.const_s
            if theta is not None:
                tilde = theta + tilde
            dlam = (tilde * dW).sum(axis=1) - 0.5 * (tilde * tilde).sum(axis=1) * dt
            lnLam += np.where(alive, dlam, 0.0)
        elif theta is not None:
            dl = -(theta * dW).sum(axis=1) - 0.5 * (theta * theta).sum(axis=1) * dt
            lnL += np.where(alive, dl, 0.0)

        if track_wealth:
            pi = rule.weights(t, Xe)
            mu_w = market_weights(Xe)
            g = np.where(alive[:, None], Xn / np.maximum(X, 1e-300), 1.0)
            Gm = np.where(alive, Xn.sum(axis=1) / Xs, 1.0)
            mult = 1.0 + ((pi - mu_w) * (g - 1.0)).sum(axis=1) / Gm
            bad = alive & (mult < 1e-12)
            clamp_mult += int(bad.sum())
            mult = np.maximum(mult, 1e-12)
            W = np.where(alive, W * mult, W)

        X = np.where(alive[:, None], Xn, X)
        if not np.isfinite(X).all():
            p = int(np.argmax(~np.isfinite(X).all(axis=1)))
            raise NonFiniteError(f"non-finite state on path {p} at step {k + 1}",
                                 step=k + 1, node=p)
        newly = alive & (X <= thresh).any(axis=1)
        absorbed_step[newly] = k + 1
        alive = alive & ~newly
        if level < S and (k + 1) == ks[level]:
            checks += _check_constraints(model, (k + 1) * dt, X[alive][:8]
                                         if alive.any() else X[:0])
            if track_wealth and fields is not None:
                Csur = Csur + surplus_increment(level)
            record(level)
            level += 1

    counters = {"constraint_spot_checks": int(checks),
                "wealth_multiplier_clamps": int(clamp_mult)}
    bundle = PathBundle(times=times, X=Xo, L=Lo, Lam=LamO, mu=MuO,
                        absorbed_step=absorbed_step, alive_obs=AliveO, x0=x0,
                        config=cfg, model_label=model.label, mode=model.mode,
                        counters=counters)
    extras = {}
    if track_wealth:
        extras["W"] = Wo
        extras["C"] = Co
    return bundle, extras


def simulate(model: MarketModelSpec, x0, cfg: SimConfig) -> PathBundle:
    """Run a seeded ensemble of the model from x0; see PathBundle for contents."""
    bundle, _ = _run(model, x0, cfg)
    return bundle


@dataclass
class ContainmentEstimate:
    q_hat: float
    stderr: float
    paths: int
    absorbed: int
    times: np.ndarray
    q_curve: np.ndarray

    def to_json_dict(self):
        return {"q_hat": self.q_hat, "stderr": self.stderr, "paths": self.paths,
                "absorbed": self.absorbed, "times": self.times.tolist(),
                "q_curve": self.q_curve.tolist()}


def containment_probability(model: MarketModelSpec, x0,
                            cfg: SimConfig) -> ContainmentEstimate:
    """Fraction of auxiliary paths that avoid the absorbing boundary through
    the horizon, with its binomial standard error."""
    if model.mode != "auxiliary":
        raise ValueError("containment_probability needs an auxiliary-mode model")
    bundle = simulate(model, x0, cfg)
    q = float(bundle.survived.mean())
    se = math.sqrt(q * (1.0 - q) / bundle.paths)
    return ContainmentEstimate(q_hat=q, stderr=se, paths=bundle.paths,
                               absorbed=int((~bundle.survived).sum()),
                               times=bundle.times, q_curve=bundle.q_curve())


@dataclass
class TrendReport:
    """Empirical means of the deflated, solution-weighted total capitalization."""

    times: np.ndarray
    means: np.ndarray
    stderrs: np.ndarray
    diff_means: np.ndarray
    diff_stderrs: np.ndarray
    initial_value: float
    martingale_ok: bool
    nonincreasing_ok: bool
    witnesses_constant: list
    witnesses_decreasing: list
    excluded_paths: int
    clamped_states: int

    def to_json_dict(self):
        return {
            "times": self.times.tolist(),
            "means": self.means.tolist(),
            "stderrs": self.stderrs.tolist(),
            "diff_means": self.diff_means.tolist(),
            "diff_stderrs": self.diff_stderrs.tolist(),
            "initial_value": self.initial_value,
            "martingale_ok": bool(self.martingale_ok),
            "nonincreasing_ok": bool(self.nonincreasing_ok),
            "witnesses_constant": self.witnesses_constant,
            "witnesses_decreasing": self.witnesses_decreasing,
            "excluded_paths": self.excluded_paths,
            "clamped_states": self.clamped_states,
        }


def supermartingale_check(model: MarketModelSpec, U, x0, cfg: SimConfig,
                          n_sigma: float = 3.0) -> TrendReport:
    """Trend test of L X U(T - t, X) along a simulated primal ensemble.

    Verdicts: "constant within n_sigma stderr" (each retained mean against the
    deterministic initial value) and "nonincreasing within n_sigma stderr"
    (paired consecutive differences).  Absorbed paths carry an infinite
    deflated value and are excluded from the means; out-of-grid states are
    clamped and counted.
    """
    if model.mode != "primal":
        raise ValueError("supermartingale_check runs on primal-mode models")
    bundle = simulate(model, x0, cfg)
    T = U.grid.horizon
    Sn = len(bundle.times)
    M = bundle.paths
    xi = np.full((M, Sn), np.nan)
    clamped = 0
    for lv, t in enumerate(bundle.times):
        ok = bundle.alive_obs[:, lv]
        Z = np.where(ok[:, None], bundle.X[:, lv], 1.0)
        uval, cl = U.interp(T - t, Z, count_clamps=True)
        clamped += cl
        vals = bundle.L[:, lv] * bundle.X[:, lv].sum(axis=1) * uval
        xi[ok, lv] = vals[ok]

    counts = np.sum(~np.isnan(xi), axis=0)
    means = np.nanmean(xi, axis=0)
    stds = np.nanstd(xi, axis=0, ddof=1)
    stderrs = stds / np.sqrt(np.maximum(counts, 1))
    xi0 = float(x0.sum() if isinstance(x0, np.ndarray) else np.sum(x0)) \
        * U.value_at(T, x0)

    guard = 1e-12 * max(1.0, abs(xi0))
    wit_const = [float(bundle.times[i]) for i in range(Sn)
                 if abs(means[i] - xi0) > n_sigma * stderrs[i] + guard]
    diff_means = np.zeros(Sn - 1)
    diff_stderrs = np.zeros(Sn - 1)
    wit_dec = []
    for i in range(Sn - 1):
        ok = ~np.isnan(xi[:, i]) & ~np.isnan(xi[:, i + 1])
        d = xi[ok, i + 1] - xi[ok, i]
        diff_means[i] = d.mean() if d.size else 0.0
        diff_stderrs[i] = d.std(ddof=1) / math.sqrt(d.size) if d.size > 1 else 0.0
        if diff_means[i] > n_sigma * diff_stderrs[i] + guard:
            wit_dec.append(float(bundle.times[i + 1]))

    return TrendReport(
        times=bundle.times, means=means, stderrs=stderrs,
        diff_means=diff_means, diff_stderrs=diff_stderrs, initial_value=xi0,
        martingale_ok=not wit_const, nonincreasing_ok=not wit_dec,
        witnesses_constant=wit_const, witnesses_decreasing=wit_dec,
        excluded_paths=int((~bundle.survived).sum()), clamped_states=clamped,
    )
