"""Investment rules, wealth dynamics, outperformance checks and game values.

Wealth is tracked through its ratio to the market portfolio: one step
multiplies the ratio by 1 + sum_i (pi_i - mu_i)(g_i - 1)/G, with g_i the asset
gross returns and G the market gross return.  This is algebraically the
arithmetic wealth recursion divided by the market's, and makes two identities
exact in floating point: the market rule replicates the market bitwise, and
wealth is exactly homogeneous in the initial capital.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .grids import GridFunction, clip_to_grid, interp_slice
from .sde import MarketModelSpec, PathBundle, SimConfig, market_weights, _run


class SolutionFields:
    """Finite-difference derivative fields of a solved value surface.

    Gradients use central differences with one-sided stencils at the edges;
    second derivatives are gradients of gradients.  Values are floored at a
    tiny positive number before taking logs, so the log-gradient stays finite
    next to the absorbing faces (where it is genuinely large).
    """

    def __init__(self, U: GridFunction, floor_eps: float = 1e-300,
                 gradient_cap: float | None = None):
        self.U = U
        grid = U.grid
        n = grid.ndim
        h = grid.h
        vals = U.values
        logu = np.log(np.maximum(vals, floor_eps))
        self.glog = np.stack(
            [np.gradient(logu, h[i], axis=1 + i) for i in range(n)], axis=-1)
        if gradient_cap is not None:
            # the log-gradient is genuinely unbounded toward the absorbing
            # faces; an uncapped rule takes positions there that a discrete
            # wealth recursion cannot survive
            np.clip(self.glog, -gradient_cap, gradient_cap, out=self.glog)
        self.gy = np.stack(
            [np.gradient(vals, h[i], axis=1 + i) for i in range(n)], axis=-1)
        self.gyy = np.stack(
            [np.gradient(self.gy[..., i], h[i], axis=1 + i) for i in range(n)],
            axis=-1)
        pairs = grid.pairs
        self.gxy = (np.stack(
            [np.gradient(self.gy[..., i], h[j], axis=1 + j) for i, j in pairs],
            axis=-1) if pairs else None)
        if U.num_slices > 1:
            self.gtau = np.gradient(vals, U.taus, axis=0)
            if U.taus[0] == 0.0 and np.ptp(vals[0]) == 0.0:
                # flat initial data: the operator vanishes on constants, so the
                # true initial time slope is exactly zero; the one-sided
                # difference would pick up the boundary layer instead
                self.gtau[0] = 0.0
        else:
            self.gtau = np.zeros_like(vals)

    def _interp_stack(self, stack, tau, Z):
        grid = self.U.grid
        Y, clamped = clip_to_grid(grid, Z, project=self.U.scale_invariant)
        k0, k1, w = self.U._tau_bracket(tau)

        def one(k):
            if stack.ndim == grid.ndim + 1:
                return interp_slice(grid, stack[k], Y)
            return np.stack([interp_slice(grid, stack[k][..., c], Y)
                             for c in range(stack.shape[-1])], axis=-1)

        v0 = one(k0)
        if k1 == k0 or w == 0.0:
            return v0, clamped
        return (1.0 - w) * v0 + w * one(k1), clamped

    def u_at(self, tau, Z):
        return self.U.interp(tau, Z)

    def grad_log_at(self, tau, Z):
        """Interpolated gradient of log U in log coordinates, with clamp count."""
        return self._interp_stack(self.glog, tau, Z)

    def delta_at(self, tau, Z, a_eval):
        """Drift of the deflated solution-weighted market value along a model.

        a_eval is the model covariance at the states: (M, n) diagonal variances
        or a constant (n, n) matrix.  Nonpositive values indicate the model
        stays inside the family the surface was solved for.
        """
        Z = np.atleast_2d(np.asarray(Z, dtype=float))
        mu = market_weights(Z)
        gy, _ = self._interp_stack(self.gy, tau, Z)
        gyy, _ = self._interp_stack(self.gyy, tau, Z)
        gtau, _ = self._interp_stack(self.gtau, tau, Z)
        a_eval = np.asarray(a_eval, dtype=float)
        if a_eval.ndim == 2 and a_eval.shape == Z.shape:
            quad = 0.5 * (a_eval * (gyy - gy)).sum(axis=-1)
            drift = (a_eval * mu * gy).sum(axis=-1)
            cross = 0.0
        else:
            diag = np.diag(a_eval)
            quad = 0.5 * (diag * (gyy - gy)).sum(axis=-1)
            drift = ((mu @ a_eval) * gy).sum(axis=-1)
            cross = 0.0
            if self.gxy is not None:
                gxy, _ = self._interp_stack(self.gxy, tau, Z)
                for p, (i, j) in enumerate(self.U.grid.pairs):
                    cross = cross + a_eval[i, j] * gxy[..., p]
        return quad + cross + drift - gtau


MARKET = "market"
CONSTANT = "constant"
GENERATED = "generated"
CUSTOM = "custom"


@dataclass
class InvestmentRule:
    """Map (t, z) -> portfolio proportions; the remainder sits in cash."""

    kind: str
    n: int
    label: str
    horizon: Optional[float] = None
    fields: Optional[SolutionFields] = None
    const_weights: Optional[np.ndarray] = None
    fn: Optional[Callable] = None
    clamped_states: int = 0

    def weights(self, t, Z):
        Z = np.atleast_2d(np.asarray(Z, dtype=float))
        if self.kind == MARKET:
            return market_weights(Z)
        if self.kind == CONSTANT:
            return np.broadcast_to(self.const_weights, Z.shape).copy()
        if self.kind == GENERATED:
            tau = self.horizon - t
            glog, clamped = self.fields.grad_log_at(tau, Z)
            self.clamped_states += clamped
            return glog + market_weights(Z)
        return np.atleast_2d(np.asarray(self.fn(t, Z), dtype=float))


def market_rule(n: int) -> InvestmentRule:
    return InvestmentRule(kind=MARKET, n=n, label="market")


def constant_rule(weights) -> InvestmentRule:
    w = np.asarray(weights, dtype=float)
    return InvestmentRule(kind=CONSTANT, n=len(w), label=f"constant{tuple(w)}",
                          const_weights=w)


def generated_rule(U: GridFunction, label: str = "generated",
                   gradient_cap: float | None = 10.0) -> InvestmentRule:
    """The rule generated by a value surface: asset i gets the log-gradient of
    the surface in its log coordinate plus the market weight.

    gradient_cap clips the log-gradient field (None for the raw rule); the cap
    only binds close to the absorbing faces.
    """
    return InvestmentRule(kind=GENERATED, n=U.grid.ndim, label=label,
                          horizon=U.grid.horizon,
                          fields=SolutionFields(U, gradient_cap=gradient_cap))


def custom_rule(fn: Callable, n: int, label: str = "custom") -> InvestmentRule:
    return InvestmentRule(kind=CUSTOM, n=n, label=label, fn=fn)


def evaluate_rule(rule: InvestmentRule, t: float, z):
    """Weights of a rule at one state (1-d input) or a batch (2-d input)."""
    z = np.asarray(z, dtype=float)
    single = z.ndim == 1
    Z = np.atleast_2d(z)
    if not (Z > 0).all():
        raise ValueError("states must be strictly positive")
    w = rule.weights(t, Z)
    return w[0] if single else w


@dataclass
class WealthLedger:
    """Per-path wealth of one rule along a shared seeded ensemble."""

    times: np.ndarray
    wealth: np.ndarray            # (M, S)
    relative: np.ndarray          # (M, S) wealth over market value of v0
    surplus: np.ndarray           # (M, S) accumulated nonnegative drift credit
    terminal_ratio: np.ndarray    # (M,) wealth over market at the horizon
    v0: float
    rule_label: str
    model_label: str
    clamps: dict
    paths: PathBundle

    def outperformance_fraction(self) -> float:
        """Fraction of paths whose terminal wealth matches or beats the market."""
        tot = self.paths.total[:, -1]
        return float((self.wealth[:, -1] >= tot).mean())

    def interim_bound_fraction(self, U: GridFunction) -> float:
        """Fraction of (path, time) pairs with wealth >= market * U(T - t, X)."""
        T = U.grid.horizon
        ok = 0
        count = 0
        for lv, t in enumerate(self.times):
            Z = self.paths.X[:, lv]
            uval = U.interp(T - t, Z)
            tot = Z.sum(axis=1)
            ok += int((self.wealth[:, lv] >= tot * uval).sum())
            count += Z.shape[0]
        return ok / count

    def summary_dict(self) -> dict:
        tr = self.terminal_ratio
        return {
            "rule": self.rule_label,
            "model": self.model_label,
            "v0": self.v0,
            "paths": int(self.wealth.shape[0]),
            "times": self.times.tolist(),
            "mean_wealth": self.wealth.mean(axis=0).tolist(),
            "terminal_ratio_mean": float(tr.mean()),
            "terminal_ratio_min": float(tr.min()),
            "terminal_ratio_p01": float(np.quantile(tr, 0.01)),
            "outperformance_fraction": self.outperformance_fraction(),
            "surplus_final_mean": float(self.surplus[:, -1].mean()),
            "clamps": self.clamps,
        }


def backtest(rule: InvestmentRule, model: MarketModelSpec, x0, v0: float,
             cfg: SimConfig) -> WealthLedger:
    """Run the rule through a seeded ensemble of the model.

    The same seed reproduces the same capitalization paths as simulate(), so
    wealth comparisons across rules and against the market are pathwise.
    """
    x0 = np.asarray(x0, dtype=float)
    if v0 <= 0:
        raise ValueError("initial capital must be positive")
    clamp_before = rule.clamped_states
    fields = rule.fields if rule.kind == GENERATED else None
    bundle, extras = _run(model, x0, cfg, rule=rule, fields=fields,
                          rule_horizon=rule.horizon)
    W = extras["W"]
    C = extras["C"]
    S0 = float(x0.sum())
    tot = bundle.total
    wealth = (v0 * W) * (tot / S0)
    terminal_ratio = (v0 * W[:, -1]) / S0
    clamps = {
        "rule_grid_clamps": rule.clamped_states - clamp_before,
        "wealth_multiplier_clamps": bundle.counters["wealth_multiplier_clamps"],
    }
    return WealthLedger(times=bundle.times, wealth=wealth, relative=W,
                        surplus=C, terminal_ratio=terminal_ratio, v0=float(v0),
                        rule_label=rule.label, model_label=model.label,
                        clamps=clamps, paths=bundle)


@dataclass
class GameEstimate:
    """Empirical smallest initial-capital fraction for one (rule, model) pair."""

    xi_hat: float
    p99: float
    p999: float
    mean: float
    paths: int
    rule_label: str
    model_label: str

    def to_json_dict(self):
        return {"xi_hat": self.xi_hat, "p99": self.p99, "p999": self.p999,
                "mean": self.mean, "paths": self.paths,
                "rule": self.rule_label, "model": self.model_label}


def game_value(rule: InvestmentRule, model: MarketModelSpec, x0,
               cfg: SimConfig) -> GameEstimate:
    """Ensemble maximum of market-over-wealth at the horizon, with upper-tail
    quantiles reported because the maximum alone is sample-fragile."""
    x0 = np.asarray(x0, dtype=float)
    led = backtest(rule, model, x0, v0=float(x0.sum()), cfg=cfg)
    ratios = 1.0 / led.terminal_ratio
    return GameEstimate(
        xi_hat=float(ratios.max()),
        p99=float(np.quantile(ratios, 0.99)),
        p999=float(np.quantile(ratios, 0.999)),
        mean=float(ratios.mean()),
        paths=len(ratios),
        rule_label=rule.label,
        model_label=model.label,
    )


@dataclass
class SaddleReport:
    matrix: np.ndarray
    max_matrix: np.ndarray
    rule_labels: list
    model_labels: list
    opt_rule: int
    opt_model: int
    tol: float
    statistic: str
    row_ok: bool
    col_ok: bool
    witnesses: list
    reference_value: Optional[float]

    @property
    def is_saddle(self) -> bool:
        return self.row_ok and self.col_ok

    def to_json_dict(self):
        return {
            "matrix": self.matrix.tolist(),
            "max_matrix": self.max_matrix.tolist(),
            "rules": self.rule_labels,
            "models": self.model_labels,
            "opt_rule": self.opt_rule,
            "opt_model": self.opt_model,
            "tol": self.tol,
            "statistic": self.statistic,
            "row_ok": bool(self.row_ok),
            "col_ok": bool(self.col_ok),
            "is_saddle": bool(self.is_saddle),
            "witnesses": self.witnesses,
            "reference_value": self.reference_value,
        }


def saddle_check(U_star: Optional[GridFunction], family, x0, cfg: SimConfig,
                 perturbations, rules, opt_rule: int = 0, opt_model: int = 0,
                 tol: float = 0.05, statistic: str = "p99") -> SaddleReport:
    """Game-value matrix over rules x models on shared seeds, with a verdict
    that the designated cell is a row minimum and column maximum within a
    relative tolerance.

    The ensemble maximum is dominated by the rare paths that approach the
    absorbing boundary, where no finite-step wealth recursion can follow the
    unbounded hedge, so the verdict defaults to the stable 99th-percentile
    statistic; the raw maxima are reported alongside.
    """
    if statistic not in ("max", "p99", "p999", "mean"):
        raise ValueError("statistic must be one of max, p99, p999, mean")
    x0 = np.asarray(x0, dtype=float)
    for m in perturbations:
        if m.family is not None and family is not None and m.family.n != family.n:
            raise ValueError("perturbation dimension mismatch")
    mat = np.empty((len(rules), len(perturbations)))
    max_mat = np.empty_like(mat)
    for i, rule in enumerate(rules):
        for j, model in enumerate(perturbations):
            est = game_value(rule, model, x0, cfg)
            max_mat[i, j] = est.xi_hat
            mat[i, j] = {"max": est.xi_hat, "p99": est.p99,
                         "p999": est.p999, "mean": est.mean}[statistic]
    pivot = mat[opt_rule, opt_model]
    slack = tol * max(abs(pivot), 1e-12)
    witnesses = []
    row_ok = True
    for j in range(len(perturbations)):
        if mat[opt_rule, j] > pivot + slack:
            row_ok = False
            witnesses.append({"kind": "row", "model": perturbations[j].label,
                              "value": float(mat[opt_rule, j])})
    col_ok = True
    for i in range(len(rules)):
        if mat[i, opt_model] < pivot - slack:
            col_ok = False
            witnesses.append({"kind": "col", "rule": rules[i].label,
                              "value": float(mat[i, opt_model])})
    ref = None
    if U_star is not None:
        ref = U_star.value_at(U_star.grid.horizon, x0)
    return SaddleReport(matrix=mat, rule_labels=[r.label for r in rules],
                        model_labels=[m.label for m in perturbations],
                        opt_rule=opt_rule, opt_model=opt_model, tol=tol,
                        row_ok=row_ok, col_ok=col_ok, witnesses=witnesses,
                        reference_value=ref)
