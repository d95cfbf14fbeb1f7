"""Monte-Carlo engine: heterogeneous preference draws, simulated choices,
the noise-driven spurious-correlation experiment, and clustered OLS.

Random streams are split deterministically. Subject ``j`` of replication
``r`` under master seed ``s`` draws its parameters from
``default_rng([s, r, j, 0])`` and its choices from ``default_rng([s, r, j, 1])``
(one uniform per row, in list order). Results therefore do not depend on how
subjects or replications are scheduled.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import pandas as pd
from scipy import stats

from .dataset import ChoiceDataset, measures_frame
from .errors import MplPrefError, RankDeficient
from .estimate import OptimizerConfig, maximize
from .likelihood import ErrorStructure, LikelihoodEvaluator, ModelSpec
from .mpl import STANDARD_IDS, PriceList, standard_lists_by_id
from .prefmodel import ParamVector

SIM_PARAMS = ("alpha", "lambda_", "delta", "gamma", "kappa", "mu")
ERROR_COVARIATES = ("kappa_draw", "mu_draw")


@dataclass(frozen=True)
class FourParamBeta:
    """Beta(shape_a, shape_b) rescaled from [0, 1] to [min, max]."""

    min: float
    max: float
    shape_a: float = 7.0
    shape_b: float = 7.0

    def __post_init__(self):
        if not self.min < self.max:
            raise ValueError("FourParamBeta needs min < max")
        if self.shape_a <= 0 or self.shape_b <= 0:
            raise ValueError("beta shapes must be positive")

    @classmethod
    def around(cls, mean: float, shape: float = 7.0) -> "FourParamBeta":
        """Symmetric distribution on [0, 2*mean]."""
        return cls(0.0, 2.0 * mean, shape, shape)

    @property
    def mean(self) -> float:
        return self.min + (self.max - self.min) * self.shape_a / (self.shape_a + self.shape_b)

    def from_unit(self, u):
        return self.min + (self.max - self.min) * u

    def sample(self, rng: np.random.Generator, size=None):
        # ratio of gamma draws
        g1 = rng.standard_gamma(self.shape_a, size)
        g2 = rng.standard_gamma(self.shape_b, size)
        return self.from_unit(g1 / (g1 + g2))

    def cdf(self, x):
        return stats.beta.cdf(x, self.shape_a, self.shape_b, loc=self.min, scale=self.max - self.min)


def _default_dists() -> dict[str, FourParamBeta]:
    # means matched to the pooled main-model estimates
    return {
        "alpha": FourParamBeta(0.0, 0.912),
        "lambda_": FourParamBeta(0.0, 3.866),
        "delta": FourParamBeta(0.0, 0.562),
        "gamma": FourParamBeta(0.0, 0.020),
        "kappa": FourParamBeta(0.0, 0.860),
        "mu": FourParamBeta(0.0, 1.374),
    }


@dataclass(frozen=True)
class SimConfig:
    """Data-generating process and experiment size.

    ``fixed_preferences`` sets alpha, lambda, delta and gamma to their
    distribution means for every subject while the error parameters still
    vary.
    """

    dists: dict = field(default_factory=_default_dists)
    n_subjects: int = 12_000
    n_replications: int = 20
    seed: int = 0
    lists: tuple[str, ...] = STANDARD_IDS
    fixed_preferences: bool = False

    def __post_init__(self):
        missing = set(SIM_PARAMS) - set(self.dists)
        if missing:
            raise ValueError(f"missing distributions for {sorted(missing)}")
        k, mu, lam = self.dists["kappa"], self.dists["mu"], self.dists["lambda_"]
        if k.min < 0 or k.max > 1:
            raise ValueError("kappa distribution must lie within [0, 1]")
        if mu.min < 0 or lam.min < 0:
            raise ValueError("mu and lambda distributions must be non-negative")
        if self.n_subjects < 0 or self.n_replications < 1:
            raise ValueError("n_subjects must be >= 0 and n_replications >= 1")

    @property
    def means(self) -> ParamVector:
        return ParamVector(**{p: self.dists[p].mean for p in SIM_PARAMS})

    def price_lists(self) -> dict[str, PriceList]:
        std = standard_lists_by_id()
        return {lid: std[lid] for lid in self.lists}


def param_rng(seed: int, replication: int, subject: int) -> np.random.Generator:
    return np.random.default_rng([seed, replication, subject, 0])


def choice_rng(seed: int, replication: int, subject: int) -> np.random.Generator:
    return np.random.default_rng([seed, replication, subject, 1])


def draw_subject(cfg: SimConfig, rng: np.random.Generator) -> ParamVector:
    """One subject's parameters; draws alpha, lambda, delta, gamma, kappa, mu in order."""
    values = {p: float(cfg.dists[p].sample(rng)) for p in SIM_PARAMS}
    if cfg.fixed_preferences:
        for p in ("alpha", "lambda_", "delta", "gamma"):
            values[p] = cfg.dists[p].mean
    return ParamVector(**values)


def draw_params(cfg: SimConfig, replication: int = 0) -> pd.DataFrame:
    """Parameter draws for every subject of a replication (one row each)."""
    rows = [draw_subject(cfg, param_rng(cfg.seed, replication, j)) for j in range(cfg.n_subjects)]
    return pd.DataFrame({p: [getattr(r, p) for r in rows] for p in SIM_PARAMS}, dtype=float)


def _layout(lists: dict[str, PriceList], n: int):
    per = [(lid, r.index) for lid, pl in lists.items() for r in pl.rows]
    m = len(per)
    resp = np.repeat(np.arange(n, dtype=np.int64), m)
    list_ids = np.array([lid for lid, _ in per] * n, dtype=object)
    rows = np.array([r for _, r in per] * n, dtype=np.int64)
    return resp, list_ids, rows, m


def _simulation_spec(lists) -> ModelSpec:
    return ModelSpec(lists=tuple(lists), name="simulation")


def simulate_choices(params: ParamVector, lists: dict[str, PriceList] | None = None,
                     rng: np.random.Generator | None = None) -> pd.DataFrame:
    """Choice profile of one subject: list_id, row, p_b, chose_b."""
    lists = lists or standard_lists_by_id()
    rng = rng or np.random.default_rng()
    resp, list_ids, rows, m = _layout(lists, 1)
    ds = ChoiceDataset(("0",), (), np.zeros((1, 0)), 1.0, 1.0, resp, list_ids, rows,
                       np.zeros(m, dtype=bool), lists)
    ev = LikelihoodEvaluator(ds, _simulation_spec(lists))
    rp = {p: np.array([getattr(params, p)]) for p in SIM_PARAMS}
    p_b = ev.prob_b_given(rp)
    chose_b = rng.random(m) < p_b
    return pd.DataFrame({"list_id": list_ids, "row": rows, "p_b": p_b, "chose_b": chose_b})


def simulate_dataset(cfg: SimConfig, replication: int = 0) -> tuple[ChoiceDataset, pd.DataFrame]:
    """Simulated dataset for one replication plus the true parameter draws.

    The dataset carries the error draws as covariates ``kappa_draw`` and
    ``mu_draw``.
    """
    lists = cfg.price_lists()
    n = cfg.n_subjects
    draws = draw_params(cfg, replication)
    resp, list_ids, rows, m = _layout(lists, n)
    ids = tuple(f"r{replication}s{j:06d}" for j in range(n))
    cov = draws[["kappa", "mu"]].to_numpy().reshape(n, 2)
    skeleton = ChoiceDataset(ids, ERROR_COVARIATES, cov, 1.0, 1.0, resp, list_ids, rows,
                             np.zeros(n * m, dtype=bool), lists)
    ev = LikelihoodEvaluator(skeleton, _simulation_spec(lists))
    p_b = ev.prob_b_given({p: draws[p].to_numpy() for p in SIM_PARAMS})
    u = np.empty(n * m)
    for j in range(n):
        u[j * m:(j + 1) * m] = choice_rng(cfg.seed, replication, j).random(m)
    ds = ChoiceDataset(ids, ERROR_COVARIATES, cov, 1.0, 1.0, resp, list_ids, rows, u < p_b, lists)
    draws.insert(0, "respondent_id", list(ids))
    return ds, draws


# ---------------------------------------------------------------------------
# OLS
# ---------------------------------------------------------------------------

@dataclass
class OLSResult:
    coef: np.ndarray
    vcov: np.ndarray
    residuals: np.ndarray
    n_clusters: int

    @property
    def se(self) -> np.ndarray:
        return np.sqrt(np.clip(np.diag(self.vcov), 0.0, None))

    @property
    def pvalues(self) -> np.ndarray:
        with np.errstate(divide="ignore", invalid="ignore"):
            t = self.coef / self.se
        return 2.0 * stats.t.sf(np.abs(t), max(self.n_clusters - 1, 1))


def ols_clustered(y, X, cluster_ids=None, small_sample: bool = True) -> OLSResult:
    """Least squares with cluster-robust sandwich covariance.

    With ``small_sample`` the meat is scaled by G/(G-1) * (N-1)/(N-K); for
    singleton clusters this is the HC1 robust covariance. ``cluster_ids``
    defaults to one cluster per observation.
    """
    y = np.asarray(y, dtype=float)
    X = np.asarray(X, dtype=float)
    if X.ndim == 1:
        X = X[:, None]
    n, k = X.shape
    if np.linalg.matrix_rank(X) < k:
        raise RankDeficient("design matrix is rank deficient")
    coef, *_ = np.linalg.lstsq(X, y, rcond=None)
    resid = y - X @ coef
    bread = np.linalg.inv(X.T @ X)
    scores = X * resid[:, None]
    if cluster_ids is None:
        G = n
        S = scores
    else:
        _, inv = np.unique(np.asarray(cluster_ids), return_inverse=True)
        G = int(inv.max()) + 1 if n else 0
        S = np.zeros((G, k))
        np.add.at(S, inv, scores)
    V = bread @ (S.T @ S) @ bread
    if small_sample and G > 1 and n > k:
        V *= G / (G - 1.0) * (n - 1.0) / (n - k)
    return OLSResult(coef=coef, vcov=V, residuals=resid, n_clusters=G)


# ---------------------------------------------------------------------------
# spurious-correlation experiment
# ---------------------------------------------------------------------------

PIPELINES = ("full_structural", "no_tremble", "ols_counts")

# Outcome columns of the count regressions and the measures they come from.
COUNT_OUTCOMES = {
    "nA_MPL2": "MPL2",
    "nA_MPL3": "MPL3",
    "nA_MPL1": "MPL1.1+MPL1.2",
    "present_bias_diff": "MPL1.2-MPL1.1",
}


def full_model(lists=STANDARD_IDS) -> ModelSpec:
    return ModelSpec(covariates={p: ERROR_COVARIATES for p in SIM_PARAMS}, lists=tuple(lists),
                     name="full_structural")


def no_tremble_model(lists=STANDARD_IDS) -> ModelSpec:
    params = ("alpha", "lambda_", "delta", "gamma", "mu")
    return ModelSpec(errors=ErrorStructure(tremble=False),
                     covariates={p: ERROR_COVARIATES for p in params}, lists=tuple(lists),
                     name="no_tremble")


def _structural_rows(rep, pipeline, res):
    tab = res.table()
    return [
        dict(replication=rep, pipeline=pipeline, parameter=r.parameter, covariate=r.covariate,
             coefficient=r.coefficient, se=r.se, p=r.p, converged=res.converged)
        for r in tab.itertuples()
    ]


def run_replication(cfg: SimConfig, replication: int, opt: OptimizerConfig | None = None,
                    threads: int = 1) -> list[dict]:
    """All three pipelines on one simulated dataset."""
    ds, _ = simulate_dataset(cfg, replication)
    rows: list[dict] = []
    for pipeline, spec in (("full_structural", full_model(cfg.lists)),
                           ("no_tremble", no_tremble_model(cfg.lists))):
        try:
            res = maximize(ds, spec, cfg=opt, threads=threads)
            rows.extend(_structural_rows(replication, pipeline, res))
        except MplPrefError as exc:
            rows.append(dict(replication=replication, pipeline=pipeline, parameter="", covariate="",
                             coefficient=np.nan, se=np.nan, p=np.nan, converged=False,
                             error=str(exc)))
    meas = measures_frame(ds)
    X = np.column_stack([np.ones(ds.n_respondents), ds.covariate("kappa_draw"), ds.covariate("mu_draw")])
    for col in COUNT_OUTCOMES:
        if col not in meas:
            continue
        fit = ols_clustered(meas[col].to_numpy(float), X)
        for k, name in enumerate(("_cons",) + ERROR_COVARIATES):
            rows.append(dict(replication=replication, pipeline="ols_counts", parameter=col,
                             covariate=name, coefficient=fit.coef[k], se=fit.se[k],
                             p=fit.pvalues[k], converged=True))
    return rows


def _stars(p: float) -> str:
    if not np.isfinite(p):
        return ""
    return "***" if p < 0.01 else "**" if p < 0.05 else "*" if p < 0.1 else ""


@dataclass
class SpuriousReport:
    config: SimConfig
    results: pd.DataFrame

    COLUMNS = ("replication", "pipeline", "parameter", "covariate", "coefficient", "se", "p", "converged")

    @property
    def replications(self) -> list[int]:
        return sorted(self.results["replication"].unique().tolist())

    def failed_replications(self) -> list[int]:
        bad = self.results.loc[~self.results["converged"].astype(bool), "replication"]
        return sorted(set(bad.tolist()))

    def coefficients(self, pipeline: str, parameter: str, covariate: str = "kappa_draw") -> pd.DataFrame:
        r = self.results
        sel = (r["pipeline"] == pipeline) & (r["parameter"] == parameter) & (r["covariate"] == covariate)
        return r.loc[sel].sort_values("replication").reset_index(drop=True)

    def summary_table(self) -> pd.DataFrame:
        """Pipelines x (parameter, covariate) rows, one column per replication."""
        r = self.results[self.results["parameter"] != ""].copy()
        r["cell"] = [f"{c:.3f}{_stars(p)}" for c, p in zip(r["coefficient"], r["p"])]
        wide = r.pivot_table(index=["pipeline", "parameter", "covariate"], columns="replication",
                             values="cell", aggfunc="first")
        order = {p: k for k, p in enumerate(PIPELINES)}
        wide = wide.reset_index()
        wide["_o"] = wide["pipeline"].map(order)
        wide = wide.sort_values(["_o"], kind="stable").drop(columns="_o")
        return wide.reset_index(drop=True)

    def to_csv(self, path) -> Path:
        path = Path(path)
        cols = [c for c in self.COLUMNS if c in self.results] + (["error"] if "error" in self.results else [])
        self.results[cols].to_csv(path, index=False, float_format="%.10g")
        return path

    def summary_text(self) -> str:
        out = []
        for pipeline in PIPELINES:
            sub = self.results[self.results["pipeline"] == pipeline]
            if sub.empty:
                continue
            out.append(f"[{pipeline}]")
            for (param, cov), g in sub.groupby(["parameter", "covariate"], sort=False):
                if cov == "_cons" or param == "":
                    continue
                cells = " ".join(f"{c:7.3f}{_stars(p):<3}" for c, p in zip(g["coefficient"], g["p"]))
                out.append(f"  {param.rstrip('_'):<18}{cov:<11}{cells}")
        return "\n".join(out)


def run_spurious_experiment(cfg: SimConfig, opt: OptimizerConfig | None = None,
                            threads: int = 1, replications: Sequence[int] | None = None) -> SpuriousReport:
    """Run every replication (optionally concurrently) and merge in replication order."""
    reps = list(range(cfg.n_replications)) if replications is None else list(replications)
    if threads > 1 and len(reps) > 1:
        with ThreadPoolExecutor(threads) as pool:
            parts = list(pool.map(lambda r: run_replication(cfg, r, opt), reps))
    else:
        parts = [run_replication(cfg, r, opt, threads=threads) for r in reps]
    rows = [row for part in parts for row in part]
    df = pd.DataFrame(rows)
    if "error" in df:
        df["error"] = df["error"].fillna("")
    return SpuriousReport(config=cfg, results=df)


def expected_a_counts(params: ParamVector, list_id: str = "MPL2") -> float:
    """Exact expected number of A choices in one list: sum over rows of 1 - P(B)."""
    lists = {list_id: standard_lists_by_id()[list_id]}
    prof = simulate_choices(params, lists, np.random.default_rng(0))
    return float(np.sum(1.0 - prof["p_b"]))


__all__ = [
    "FourParamBeta", "SimConfig", "SpuriousReport", "OLSResult", "draw_subject", "draw_params",
    "simulate_choices", "simulate_dataset", "ols_clustered", "run_replication",
    "run_spurious_experiment", "full_model", "no_tremble_model", "expected_a_counts",
    "param_rng", "choice_rng", "SIM_PARAMS", "ERROR_COVARIATES", "PIPELINES", "COUNT_OUTCOMES",
]
