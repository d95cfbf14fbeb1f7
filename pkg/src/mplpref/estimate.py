"""Maximum-likelihood fitting, clustered covariance, BIC and Wald tests."""

from __future__ import annotations

import json
import math
import re
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import pandas as pd
from scipy import stats

from .dataset import ChoiceDataset
from .errors import (
    GradientFailure,
    InfeasibleInit,
    InfeasibleParameters,
    NonFiniteUtility,
    RankDeficient,
    SingularHessian,
)
from .likelihood import LikelihoodEvaluator, ModelSpec

# Starting intercepts: pooled main-model estimates, plus neutral values for
# variant parameters.
DEFAULT_START = {
    "alpha": 0.460,
    "lambda_": 1.934,
    "delta": 0.280,
    "gamma": 0.010,
    "kappa": 0.448,
    "mu": 0.682,
    "alpha_plus": 0.460,
    "alpha_minus": 0.460,
    "phi": 0.010,
    "delta2": 0.280,
    "mu2": 0.682,
    "mu3": 0.682,
}

# distance from a domain edge that counts as "at the boundary"
BOUNDARY_TOL = 1e-4
_LOWER = {"lambda_": 0.0, "kappa": 0.0, "mu": 0.0, "mu2": 0.0, "mu3": 0.0,
          "delta": -1.0, "delta2": -1.0, "gamma": -1.0}
_UPPER = {"kappa": 1.0}


@dataclass(frozen=True)
class OptimizerConfig:
    max_iterations: int = 200
    gradient_tolerance: float = 1e-4
    step_tolerance: float = 1e-10
    fd_scheme: str = "central"
    fd_step: float = 1e-5
    # switch to finite-difference Newton steps once max|g| falls below this
    newton_threshold: float = 1.0
    multistart: int = 0
    jitter: float = 0.05
    seed: int = 0

    def __post_init__(self):
        if self.gradient_tolerance <= 0 or self.step_tolerance <= 0 or self.fd_step <= 0:
            raise ValueError("tolerances and fd_step must be positive")
        if self.fd_scheme != "central":
            raise ValueError("only the central finite-difference scheme is supported")
        if self.max_iterations < 1:
            raise ValueError("max_iterations must be >= 1")


def default_init(spec: ModelSpec) -> np.ndarray:
    beta = []
    for p in spec.parameters():
        beta.append(DEFAULT_START[p])
        beta.extend([0.0] * len(spec.design.covariates.get(p, ())))
    return np.array(beta)


# ---------------------------------------------------------------------------
# finite differences
# ---------------------------------------------------------------------------

def _safe_eval(fn, x):
    try:
        v = fn(x)
    except (InfeasibleParameters, NonFiniteUtility, FloatingPointError):
        return None
    v = np.asarray(v, dtype=float)
    return v if np.all(np.isfinite(v)) else None


def numeric_gradient(objective: Callable, beta, fd_step: float = 1e-6) -> np.ndarray:
    """Central-difference gradient with steps max(1, |b_i|) * fd_step.

    A component whose perturbed objective is not finite is retried once with
    a step ten times smaller; a second failure raises ``GradientFailure``.
    """
    beta = np.asarray(beta, dtype=float)
    g = np.empty_like(beta)
    for i in range(beta.size):
        h = max(1.0, abs(beta[i])) * fd_step
        for _ in range(2):
            e = np.zeros_like(beta)
            e[i] = h
            up, dn = _safe_eval(objective, beta + e), _safe_eval(objective, beta - e)
            if up is not None and dn is not None:
                g[i] = (float(up) - float(dn)) / (2.0 * h)
                break
            h /= 10.0
        else:
            raise GradientFailure(f"objective not finite around coefficient {i}")
    return g


def numeric_hessian(gradient: Callable, beta, fd_step: float = 1e-5) -> np.ndarray:
    """Central differences of an analytic gradient; returned unsymmetrized."""
    beta = np.asarray(beta, dtype=float)
    k = beta.size
    H = np.empty((k, k))
    for i in range(k):
        h = max(1.0, abs(beta[i])) * fd_step
        for _ in range(2):
            e = np.zeros(k)
            e[i] = h
            up, dn = _safe_eval(gradient, beta + e), _safe_eval(gradient, beta - e)
            if up is not None and dn is not None:
                H[:, i] = (up - dn) / (2.0 * h)
                break
            h /= 10.0
        else:
            raise GradientFailure(f"gradient not finite around coefficient {i}")
    return H


# ---------------------------------------------------------------------------
# covariance
# ---------------------------------------------------------------------------

def _sandwich(H: np.ndarray, meat: np.ndarray) -> np.ndarray:
    cond = np.linalg.cond(H)
    if not np.isfinite(cond) or cond > 1e14:
        raise SingularHessian(f"Hessian is singular (condition number {cond:.3g})", condition=cond)
    Hinv = np.linalg.inv(H)
    return Hinv @ meat @ Hinv


def _hessian_for(ev: LikelihoodEvaluator, beta, fd_step: float, hessian):
    if hessian is None:
        hessian = numeric_hessian(ev.gradient, beta, fd_step)
    return 0.5 * (hessian + hessian.T)


def clustered_vcov(dataset: ChoiceDataset, spec: ModelSpec, beta_hat, hessian=None,
                   fd_step: float = 1e-5, evaluator: LikelihoodEvaluator | None = None) -> np.ndarray:
    """Respondent-clustered sandwich covariance with a G/(G-1) factor."""
    ev = evaluator or LikelihoodEvaluator(dataset, spec)
    H = _hessian_for(ev, beta_hat, fd_step, hessian)
    S = ev.respondent_scores(beta_hat)
    G = int(np.count_nonzero(np.bincount(ev.data.resp, minlength=ev.n_respondents)))
    if G < 2:
        raise SingularHessian("clustered covariance needs at least two respondents")
    V = _sandwich(H, S.T @ S) * (G / (G - 1.0))
    return V


def robust_vcov(dataset: ChoiceDataset, spec: ModelSpec, beta_hat, hessian=None,
                fd_step: float = 1e-5, evaluator: LikelihoodEvaluator | None = None) -> np.ndarray:
    """Heteroskedasticity-robust sandwich treating every choice as independent."""
    ev = evaluator or LikelihoodEvaluator(dataset, spec)
    H = _hessian_for(ev, beta_hat, fd_step, hessian)
    S = ev.choice_scores(beta_hat)
    return _sandwich(H, S.T @ S)


# ---------------------------------------------------------------------------
# results
# ---------------------------------------------------------------------------

def _stars(p: float) -> str:
    if not np.isfinite(p):
        return ""
    return "***" if p < 0.01 else "**" if p < 0.05 else "*" if p < 0.1 else ""


@dataclass
class EstimateResult:
    spec: ModelSpec
    labels: list[tuple[str, str]]
    beta_hat: np.ndarray
    vcov_clustered: np.ndarray
    log_likelihood: float
    n_choices: int
    n_respondents: int
    converged: bool
    iterations: int
    gradient_norm: float
    at_boundary: bool = False
    status: str = ""
    hessian: np.ndarray | None = field(default=None, repr=False)
    config: OptimizerConfig = field(default_factory=OptimizerConfig)
    seconds: float = 0.0
    # objective at the start and after every accepted step
    trace: list = field(default_factory=list, repr=False)

    @property
    def n_params(self) -> int:
        return int(self.beta_hat.size)

    @property
    def bic(self) -> float:
        return math.log(self.n_choices) * self.n_params - 2.0 * self.log_likelihood

    @property
    def std_errors(self) -> np.ndarray:
        return np.sqrt(np.clip(np.diag(self.vcov_clustered), 0.0, None))

    def index(self, param: str, covariate: str = "_cons") -> int:
        return self.labels.index((param, covariate))

    def coef(self, param: str, covariate: str = "_cons") -> float:
        return float(self.beta_hat[self.index(param, covariate)])

    def se(self, param: str, covariate: str = "_cons") -> float:
        return float(self.std_errors[self.index(param, covariate)])

    def table(self) -> pd.DataFrame:
        se = self.std_errors
        with np.errstate(divide="ignore", invalid="ignore"):
            z = self.beta_hat / se
        p = 2.0 * stats.norm.sf(np.abs(z))
        return pd.DataFrame({
            "parameter": [a for a, _ in self.labels],
            "covariate": [b for _, b in self.labels],
            "coefficient": self.beta_hat,
            "se": se,
            "z": z,
            "p": p,
        })

    def to_csv(self, path) -> Path:
        path = Path(path)
        self.table().to_csv(path, index=False, float_format="%.10g")
        return path

    def manifest(self, extra: dict | None = None) -> dict:
        spec = self.spec
        out = {
            "model": {
                "name": spec.name,
                "family": spec.family.value,
                "discounting": spec.disc.value,
                "link": spec.link.value,
                "tremble": spec.errors.tremble,
                "fechner_per_list": spec.errors.fechner_per_list,
                "covariates": {k: list(v) for k, v in spec.covariates.items()},
                "fixed": dict(spec.fixed),
                "lists": list(spec.lists) if spec.lists else None,
                "eps_norm": spec.eps_norm,
            },
            "optimizer": asdict(self.config),
            "diagnostics": {
                "converged": self.converged,
                "at_boundary": self.at_boundary,
                "status": self.status,
                "iterations": self.iterations,
                "gradient_norm": self.gradient_norm,
                "seconds": round(self.seconds, 3),
            },
            "log_likelihood": self.log_likelihood,
            "bic": self.bic,
            "n_choices": self.n_choices,
            "n_respondents": self.n_respondents,
            "n_params": self.n_params,
        }
        if extra:
            out.update(extra)
        return out

    def to_json(self, path, extra: dict | None = None) -> Path:
        path = Path(path)
        path.write_text(json.dumps(self.manifest(extra), indent=2, default=float) + "\n", encoding="utf-8")
        return path

    def summary(self) -> str:
        tab = self.table()
        lines = [f"model: {self.spec.name}  ({self.spec.family.value}, {self.spec.disc.value}, "
                 f"{self.spec.link.value})"]
        lines.append(f"{'parameter':<14}{'covariate':<16}{'coef':>10}{'se':>10}")
        for r in tab.itertuples():
            name = r.parameter.rstrip("_")
            lines.append(f"{name:<14}{r.covariate:<16}{r.coefficient:>10.3f}{r.se:>10.3f} {_stars(r.p)}")
        lines.append(f"N (choices)   {self.n_choices}")
        lines.append(f"respondents   {self.n_respondents}")
        lines.append(f"log-lik       {self.log_likelihood:.1f}")
        lines.append(f"BIC           {self.bic:.1f}")
        flag = "yes" if self.converged else "NO"
        lines.append(f"converged     {flag} ({self.status}, {self.iterations} iterations)")
        return "\n".join(lines)


# ---------------------------------------------------------------------------
# optimizer
# ---------------------------------------------------------------------------

def _modified_inverse(negH: np.ndarray) -> np.ndarray:
    """Inverse of a symmetrized curvature matrix with eigenvalues made positive."""
    negH = 0.5 * (negH + negH.T)
    w, Q = np.linalg.eigh(negH)
    scale = max(np.max(np.abs(w)), 1e-12)
    w = np.maximum(np.abs(w), 1e-8 * scale)
    return (Q / w) @ Q.T


def _at_boundary(rp: dict) -> bool:
    for p, v in rp.items():
        if p in _LOWER and np.any(v - _LOWER[p] < BOUNDARY_TOL):
            return True
        if p in _UPPER and np.any(_UPPER[p] - v < BOUNDARY_TOL):
            return True
    return False


def _ascend(ev: LikelihoodEvaluator, x: np.ndarray, cfg: OptimizerConfig):
    def evaluate(b):
        try:
            f, g = ev.loglik_and_grad(b)
        except (InfeasibleParameters, NonFiniteUtility):
            return None
        if not (np.isfinite(f) and np.all(np.isfinite(g))):
            return None
        return f, g

    first = evaluate(x)
    if first is None:
        raise InfeasibleInit("starting values are infeasible or give a non-finite likelihood")
    f, g = first
    trace = [f]
    k = x.size
    Binv = None
    H = None
    fresh = False
    status = "max_iterations"
    converged = False
    it = 0
    for it in range(1, cfg.max_iterations + 1):
        gmax = float(np.max(np.abs(g)))
        if gmax < cfg.gradient_tolerance:
            status, converged = "gradient", True
            it -= 1
            break
        if Binv is None or gmax < cfg.newton_threshold:
            try:
                H = numeric_hessian(ev.gradient, x, cfg.fd_step)
                Binv = _modified_inverse(-H)
            except GradientFailure:
                Binv = np.eye(k) / max(gmax, 1.0)
                H = None
            fresh = True
        d = Binv @ g
        slope = float(g @ d)
        if slope <= 0:
            Binv = np.eye(k) / max(gmax, 1.0)
            d = Binv @ g
            slope = float(g @ d)
        t = 1.0
        accepted = None
        blocked = False
        while t > 1e-12:
            trial = x + t * d
            res = None if ev.crosses_pole(x, trial) else evaluate(trial)
            if res is None:
                blocked = True
            elif res[0] >= f + 1e-4 * t * slope:
                accepted = (trial, *res)
                break
            t *= 0.5
        if accepted is None:
            if not fresh:
                Binv = None
                continue
            if _at_boundary(ev.respondent_params(x)):
                status, converged = "boundary", True
            elif blocked:
                status = "blocked"
                converged = gmax < 10 * cfg.gradient_tolerance
            else:
                status = "line_search"
                converged = gmax < 10 * cfg.gradient_tolerance
            break
        x_new, f_new, g_new = accepted
        s = x_new - x
        rel_step = float(np.max(np.abs(s) / np.maximum(1.0, np.abs(x))))
        rel_f = abs(f_new - f) / max(1.0, abs(f))
        y = g - g_new  # gradient change of the negated objective
        sy = float(s @ y)
        x, f, g = x_new, f_new, g_new
        trace.append(f)
        fresh = False
        if sy > 1e-12 * float(np.linalg.norm(s) * np.linalg.norm(y)):
            rho = 1.0 / sy
            V = np.eye(k) - rho * np.outer(s, y)
            Binv = V @ Binv @ V.T + rho * np.outer(s, s)
        if rel_step < cfg.step_tolerance or rel_f < 1e-15:
            if _at_boundary(ev.respondent_params(x)):
                status, converged = "boundary", True
            else:
                status = "step"
                converged = float(np.max(np.abs(g))) < 10 * cfg.gradient_tolerance
            break
    return x, f, g, H, it, converged, status, trace


def maximize(dataset: ChoiceDataset, spec: ModelSpec, init=None, cfg: OptimizerConfig | None = None,
             threads: int = 1, compute_vcov: bool = True) -> EstimateResult:
    """Fit ``spec`` to ``dataset`` by quasi-Newton ascent on the log-likelihood.

    Steps that take any respondent outside the parameter domain, or across the
    utility pole at alpha = 1 (phi = 0 for CARA), are rejected by the
    backtracking line search. The covariance is the respondent-
    clustered sandwich at the final point; if the Hessian is singular there
    (typically at a boundary) the covariance is filled with NaN.
    """
    cfg = cfg or OptimizerConfig()
    t0 = time.perf_counter()
    ev = LikelihoodEvaluator(dataset, spec, threads=threads)
    x0 = default_init(spec) if init is None else np.array(init, dtype=float)
    if x0.shape != (ev.n_coefs,):
        raise InfeasibleInit(f"init has {x0.size} entries, model needs {ev.n_coefs}")
    starts = [x0]
    if cfg.multistart:
        rng = np.random.default_rng(cfg.seed)
        for _ in range(cfg.multistart):
            starts.append(x0 + cfg.jitter * np.maximum(1.0, np.abs(x0)) * rng.standard_normal(x0.size))
    best = None
    for k, start in enumerate(starts):
        try:
            out = _ascend(ev, start, cfg)
        except InfeasibleInit:
            if k == 0:
                raise
            continue
        if best is None or out[1] > best[1]:
            best = out
    x, f, g, H, iters, converged, status, trace = best
    at_boundary = _at_boundary(ev.respondent_params(x))
    vcov = np.full((x.size, x.size), np.nan)
    if compute_vcov:
        try:
            # the last Newton Hessian was taken one step earlier; refresh at x
            H = numeric_hessian(ev.gradient, x, cfg.fd_step)
            vcov = clustered_vcov(dataset, spec, x, hessian=H, evaluator=ev)
        except (SingularHessian, GradientFailure) as exc:
            status = f"{status}; covariance unavailable ({exc})"
    return EstimateResult(
        spec=spec,
        labels=ev.design.labels,
        beta_hat=x,
        vcov_clustered=vcov,
        log_likelihood=float(f),
        n_choices=ev.n_choices,
        n_respondents=int(np.count_nonzero(np.bincount(ev.data.resp, minlength=ev.n_respondents))),
        converged=bool(converged),
        iterations=int(iters),
        gradient_norm=float(np.max(np.abs(g))),
        at_boundary=at_boundary,
        status=status,
        hessian=H,
        config=cfg,
        seconds=time.perf_counter() - t0,
        trace=trace,
    )


# ---------------------------------------------------------------------------
# hypothesis tests
# ---------------------------------------------------------------------------

def wald_test(result: EstimateResult, R, r=None) -> tuple[float, float]:
    """Wald statistic and chi-square p-value for the linear restriction R b = r."""
    R = np.atleast_2d(np.asarray(R, dtype=float))
    r = np.zeros(R.shape[0]) if r is None else np.atleast_1d(np.asarray(r, dtype=float))
    q = np.linalg.matrix_rank(R)
    if q < R.shape[0]:
        raise RankDeficient("restriction matrix does not have full row rank")
    diff = R @ result.beta_hat - r
    M = R @ result.vcov_clustered @ R.T
    if not np.all(np.isfinite(M)) or np.linalg.cond(M) > 1e14:
        raise RankDeficient("R V R' is singular")
    stat = float(diff @ np.linalg.solve(M, diff))
    return stat, float(stats.chi2.sf(stat, q))


_ALIASES = {"lambda": "lambda_", "delta1": "delta", "mu1": "mu"}


def parse_restriction(text: str, labels: Sequence[tuple[str, str]]) -> tuple[np.ndarray, np.ndarray]:
    """Turn 'delta1=delta2' or 'gamma=0' (comma-separated) into (R, r).

    Names refer to intercepts; 'param:covariate' selects a covariate
    coefficient.
    """
    labels = list(labels)

    def locate(token: str) -> int:
        name, _, cov = token.partition(":")
        name = _ALIASES.get(name, name)
        key = (name, cov or "_cons")
        if key not in labels:
            raise ValueError(f"unknown coefficient {token!r} in restriction")
        return labels.index(key)

    rows, rhs = [], []
    for part in filter(None, (p.strip() for p in text.split(","))):
        if part.count("=") != 1:
            raise ValueError(f"restriction {part!r} must contain one '='")
        lhs, right = (s.strip() for s in part.split("="))
        row = np.zeros(len(labels))
        row[locate(lhs)] += 1.0
        if re.fullmatch(r"[-+]?(\d+\.?\d*|\.\d+)([eE][-+]?\d+)?", right):
            rhs.append(float(right))
        else:
            row[locate(right)] -= 1.0
            rhs.append(0.0)
        rows.append(row)
    if not rows:
        raise ValueError("empty restriction")
    return np.array(rows), np.array(rhs)


__all__ = [
    "OptimizerConfig", "EstimateResult", "DEFAULT_START", "default_init", "maximize",
    "numeric_gradient", "numeric_hessian", "clustered_vcov", "robust_vcov", "wald_test",
    "parse_restriction",
]
