"""Random-utility choice probabilities and the pooled log-likelihood.

Each respondent's structural and error parameters are linear indices of their
covariates. ``LikelihoodEvaluator`` compiles a dataset once and then returns
the log-likelihood together with analytic scores, per choice or summed per
respondent, for any coefficient vector.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from enum import Enum
from typing import Mapping, Sequence

import numpy as np
from scipy.special import expit, ndtr

from .dataset import ChoiceDataset
from .errors import DesignMismatch, InfeasibleParameters, NonFiniteUtility
from .mpl import normalize_list_id
from .prefmodel import (
    DISCOUNT_PARAMS,
    UTILITY_PARAMS,
    DiscountForm,
    ParamVector,
    UtilityFamily,
    value_terms,
)

PROB_CLAMP = 1e-12

# list kind -> Fechner scale used when scales differ by list design
MU_BY_KIND = {"time": "mu", "risk": "mu2", "loss": "mu3"}


class LinkFunction(str, Enum):
    LOGIT = "logit"
    PROBIT = "probit"


def link_cdf(z, link: LinkFunction | str = LinkFunction.LOGIT):
    if LinkFunction(link) is LinkFunction.LOGIT:
        return expit(z)
    return ndtr(z)


def link_pdf(z, link: LinkFunction | str = LinkFunction.LOGIT):
    if LinkFunction(link) is LinkFunction.LOGIT:
        return expit(z) * expit(-z)
    return np.exp(-0.5 * np.square(z)) / math.sqrt(2.0 * math.pi)


@dataclass(frozen=True)
class ErrorStructure:
    tremble: bool = True
    fechner_per_list: bool = False

    def parameters(self) -> tuple[str, ...]:
        out = ("kappa",) if self.tremble else ()
        return out + (("mu", "mu2", "mu3") if self.fechner_per_list else ("mu",))


@dataclass(frozen=True)
class CovariateDesign:
    """Which covariates enter the linear index of each parameter.

    Every parameter gets an intercept first; coefficients are laid out
    parameter-major in the order of ``params``.
    """

    params: tuple[str, ...]
    covariates: Mapping[str, tuple[str, ...]] = field(default_factory=dict)

    def __post_init__(self):
        object.__setattr__(self, "params", tuple(self.params))
        cov = {k: tuple(v) for k, v in dict(self.covariates).items()}
        unknown = set(cov) - set(self.params)
        if unknown:
            raise DesignMismatch(f"covariates given for parameters not in the model: {sorted(unknown)}")
        object.__setattr__(self, "covariates", cov)

    def columns(self, param: str) -> tuple[str, ...]:
        return ("_cons",) + self.covariates.get(param, ())

    @property
    def labels(self) -> list[tuple[str, str]]:
        return [(p, c) for p in self.params for c in self.columns(p)]

    @property
    def n_coefs(self) -> int:
        return sum(len(self.columns(p)) for p in self.params)

    def slices(self) -> dict[str, slice]:
        out, start = {}, 0
        for p in self.params:
            k = len(self.columns(p))
            out[p] = slice(start, start + k)
            start += k
        return out

    def matrices(self, dataset: ChoiceDataset) -> dict[str, np.ndarray]:
        """Per-parameter (n_respondents, k) regressor matrices."""
        out = {}
        n = dataset.n_respondents
        for p in self.params:
            cols = [np.ones(n)]
            for c in self.covariates.get(p, ()):
                if c not in dataset.covariate_names:
                    raise DesignMismatch(f"covariate {c!r} (for {p}) not in dataset")
                cols.append(dataset.covariate(c))
            out[p] = np.column_stack(cols)
        return out

    def intercepts(self, beta: Sequence[float]) -> dict[str, float]:
        beta = np.asarray(beta, float)
        return {p: float(beta[s.start]) for p, s in self.slices().items()}


def params_for(respondent: Mapping[str, float], beta: Sequence[float], design: CovariateDesign,
               fixed: Mapping[str, float] | None = None) -> ParamVector:
    """Structural parameters of one respondent (intercept + sum of coef * covariate)."""
    beta = np.asarray(beta, dtype=float)
    if beta.shape != (design.n_coefs,):
        raise DesignMismatch(f"beta has {beta.size} entries, design needs {design.n_coefs}")
    values = dict(fixed or {})
    for p, sl in design.slices().items():
        b = beta[sl]
        v = b[0]
        for coef, name in zip(b[1:], design.covariates.get(p, ())):
            if name not in respondent:
                raise DesignMismatch(f"respondent lacks covariate {name!r}")
            v += coef * float(respondent[name])
        values[p] = float(v)
    return ParamVector(**values)


@dataclass(frozen=True)
class ModelSpec:
    """A complete likelihood: utility, discounting, link, errors, design.

    ``fixed`` pins parameters that the family would otherwise estimate (the
    time-only model fixes alpha = 0); ``lists`` restricts which price lists
    enter the likelihood.
    """

    family: UtilityFamily = UtilityFamily.CRRA
    disc: DiscountForm = DiscountForm.QUASI_HYPERBOLIC
    link: LinkFunction = LinkFunction.LOGIT
    errors: ErrorStructure = ErrorStructure()
    covariates: Mapping[str, tuple[str, ...]] = field(default_factory=dict)
    fixed: Mapping[str, float] = field(default_factory=dict)
    lists: tuple[str, ...] | None = None
    eps_norm: float = 0.001
    name: str = "main"

    def __post_init__(self):
        object.__setattr__(self, "family", UtilityFamily(self.family))
        object.__setattr__(self, "disc", DiscountForm(self.disc))
        object.__setattr__(self, "link", LinkFunction(self.link))
        object.__setattr__(self, "covariates", {k: tuple(v) for k, v in dict(self.covariates).items()})
        object.__setattr__(self, "fixed", dict(self.fixed))
        if self.lists is not None:
            object.__setattr__(self, "lists", tuple(normalize_list_id(x) for x in self.lists))
        structural = UTILITY_PARAMS[self.family] + DISCOUNT_PARAMS[self.disc]
        bad = set(self.fixed) - set(structural) - set(self.errors.parameters())
        if bad:
            raise DesignMismatch(f"cannot fix parameters absent from the model: {sorted(bad)}")
        if self.eps_norm <= 0:
            raise ValueError("eps_norm must be positive")
        self.design  # validates covariate keys

    def all_parameters(self) -> tuple[str, ...]:
        return UTILITY_PARAMS[self.family] + DISCOUNT_PARAMS[self.disc] + self.errors.parameters()

    def parameters(self) -> tuple[str, ...]:
        """Free parameters in canonical order."""
        return tuple(p for p in self.all_parameters() if p not in self.fixed)

    @property
    def design(self) -> CovariateDesign:
        return CovariateDesign(self.parameters(), self.covariates)

    def with_covariates(self, names: Sequence[str], params: Sequence[str] | None = None) -> "ModelSpec":
        from dataclasses import replace

        params = self.parameters() if params is None else tuple(params)
        return replace(self, covariates={p: tuple(names) for p in params})


# ---------------------------------------------------------------------------
# scalar choice probabilities
# ---------------------------------------------------------------------------

def prob_b(delta_u, kappa=0.0, mu=1.0, link: LinkFunction | str = LinkFunction.LOGIT,
           tremble: bool = True):
    """Probability of choosing Option B given the utility gap U_B - U_A."""
    du = np.asarray(delta_u, dtype=float)
    if not np.all(np.isfinite(du)):
        raise NonFiniteUtility("utility difference is not finite")
    if np.any(np.asarray(mu) <= 0):
        raise InfeasibleParameters("mu must be positive", parameter="mu")
    f = link_cdf(du / mu, link)
    if tremble:
        if np.any((np.asarray(kappa) < 0) | (np.asarray(kappa) > 1)):
            raise InfeasibleParameters("kappa must lie in [0, 1]", parameter="kappa")
        p = (1.0 - kappa) * f + 0.5 * kappa
    else:
        p = f
    p = np.clip(p, PROB_CLAMP, 1.0 - PROB_CLAMP)
    return float(p) if p.ndim == 0 else p


def prob_b_luce(u_a, u_b, kappa=0.0, mu=1.0):
    """Exponential-ratio form of the logit choice rule, with tremble."""
    u_a = np.asarray(u_a, dtype=float)
    u_b = np.asarray(u_b, dtype=float)
    if not (np.all(np.isfinite(u_a)) and np.all(np.isfinite(u_b))):
        raise NonFiniteUtility("utility is not finite")
    if np.any(np.asarray(mu) <= 0):
        raise InfeasibleParameters("mu must be positive", parameter="mu")
    a, b = u_a / mu, u_b / mu
    top = np.maximum(a, b)
    ea, eb = np.exp(a - top), np.exp(b - top)
    p = (1.0 - kappa) * eb / (ea + eb) + 0.5 * kappa
    p = np.clip(p, PROB_CLAMP, 1.0 - PROB_CLAMP)
    return float(p) if p.ndim == 0 else p


# ---------------------------------------------------------------------------
# compiled evaluator
# ---------------------------------------------------------------------------

FEASIBILITY = {
    "lambda_": lambda v: v > 0,
    "kappa": lambda v: (v >= 0) & (v <= 1),
    "mu": lambda v: v > 0,
    "mu2": lambda v: v > 0,
    "mu3": lambda v: v > 0,
    "delta": lambda v: v > -1,
    "delta2": lambda v: v > -1,
    "gamma": lambda v: v > -1,
    "alpha": lambda v: np.abs(1.0 - v) > 1e-9,
    "alpha_plus": lambda v: np.abs(1.0 - v) > 1e-9,
    "alpha_minus": lambda v: np.abs(1.0 - v) > 1e-9,
    "phi": lambda v: v != 0,
}

# Curvature values at which the utility family has a pole. A continuous search
# path must not cross them, so each respondent stays on the side it started on.
POLES = {"alpha": 1.0, "alpha_plus": 1.0, "alpha_minus": 1.0, "phi": 0.0}


@dataclass
class _Compiled:
    resp: np.ndarray
    amount_a: np.ndarray
    prob_a: np.ndarray
    time_a: np.ndarray
    amount_b: np.ndarray
    prob_b: np.ndarray
    time_b: np.ndarray
    frontend: np.ndarray
    sign: np.ndarray
    group: np.ndarray  # index into ("mu", "mu2", "mu3")


def _compile(dataset: ChoiceDataset, list_ids: tuple[str, ...] | None) -> tuple[_Compiled, np.ndarray]:
    sel = np.ones(dataset.n_choices, dtype=bool)
    if list_ids is not None:
        sel = np.isin(dataset.choice_list, list(list_ids))
    idx = np.flatnonzero(sel)
    k_max = max(
        (len(opt.outcomes) for pl in dataset.lists.values() for r in pl.rows
         for opt in (r.option_a, r.option_b)),
        default=1,
    )
    # one template per (list, row); choices index into it
    keys, templates = {}, []
    for lid, pl in dataset.lists.items():
        for r in pl.rows:
            keys[(lid, r.index)] = len(templates)
            rec = []
            for opt in (r.option_a, r.option_b):
                amt = np.zeros(k_max)
                pr = np.zeros(k_max)
                tm = np.zeros(k_max)
                for k, o in enumerate(opt.outcomes):
                    amt[k], pr[k], tm[k] = o.amount, o.probability, o.time
                rec.append((amt, pr, tm))
            group = ("mu", "mu2", "mu3").index(MU_BY_KIND[pl.kind])
            templates.append((rec, pl.frontend_delay, group))
    tidx = np.array([keys[(l, r)] for l, r in zip(dataset.choice_list[idx], dataset.choice_row[idx])],
                    dtype=np.int64)
    amt_a = np.array([t[0][0][0] for t in templates]).reshape(-1, k_max)
    pr_a = np.array([t[0][0][1] for t in templates]).reshape(-1, k_max)
    tm_a = np.array([t[0][0][2] for t in templates]).reshape(-1, k_max)
    amt_b = np.array([t[0][1][0] for t in templates]).reshape(-1, k_max)
    pr_b = np.array([t[0][1][1] for t in templates]).reshape(-1, k_max)
    tm_b = np.array([t[0][1][2] for t in templates]).reshape(-1, k_max)
    fd = np.array([t[1] for t in templates])
    grp = np.array([t[2] for t in templates], dtype=np.int64)
    resp = dataset.choice_respondent[idx]
    stake = dataset.stake[resp][:, None]
    comp = _Compiled(
        resp=resp,
        amount_a=amt_a[tidx] * stake,
        prob_a=pr_a[tidx],
        time_a=tm_a[tidx],
        amount_b=amt_b[tidx] * stake,
        prob_b=pr_b[tidx],
        time_b=tm_b[tidx],
        frontend=fd[tidx][:, None],
        sign=np.where(dataset.chose_b[idx], 1.0, -1.0),
        group=grp[tidx],
    )
    return comp, idx


def _take(c: _Compiled, sl: slice) -> _Compiled:
    return _Compiled(*(getattr(c, f)[sl] for f in c.__dataclass_fields__))


class LikelihoodEvaluator:
    """Log-likelihood of ``spec`` on ``dataset`` as a function of coefficients.

    ``threads`` > 1 splits the per-choice work into contiguous blocks that are
    evaluated concurrently; reductions always run over the reassembled arrays
    in a fixed order, so results do not depend on the thread count.
    """

    def __init__(self, dataset: ChoiceDataset, spec: ModelSpec, threads: int = 1):
        self.dataset = dataset
        self.spec = spec
        self.design = spec.design
        self.params = self.design.params
        self.X = self.design.matrices(dataset)
        self.slices = self.design.slices()
        self.threads = max(1, int(threads))
        self.data, self.choice_index = _compile(dataset, spec.lists)
        self.n_choices = len(self.data.sign)
        self.n_respondents = dataset.n_respondents

    @property
    def n_coefs(self) -> int:
        return self.design.n_coefs

    # -- parameter handling ---------------------------------------------

    def respondent_params(self, beta) -> dict[str, np.ndarray]:
        beta = np.asarray(beta, dtype=float)
        if beta.shape != (self.n_coefs,):
            raise DesignMismatch(f"beta has {beta.size} entries, design needs {self.n_coefs}")
        out = {p: self.X[p] @ beta[self.slices[p]] for p in self.params}
        n = self.n_respondents
        for p, v in self.spec.fixed.items():
            out[p] = np.full(n, float(v))
        return out

    def check_feasible(self, rp: Mapping[str, np.ndarray]) -> None:
        for p, v in rp.items():
            test = FEASIBILITY.get(p)
            if test is None:
                continue
            ok = test(v) & np.isfinite(v)
            if not np.all(ok):
                j = int(np.flatnonzero(~ok)[0])
                rid = self.dataset.respondent_ids[j] if j < len(self.dataset.respondent_ids) else j
                raise InfeasibleParameters(
                    f"{p} = {v[j]!r} infeasible for respondent {rid}", respondent=rid, parameter=p)

    def crosses_pole(self, beta_from, beta_to) -> bool:
        """True if moving from ``beta_from`` to ``beta_to`` takes any respondent
        across a curvature pole (parameters are linear in beta, so a sign
        change at the endpoints is equivalent)."""
        a, b = self.respondent_params(beta_from), self.respondent_params(beta_to)
        for p, c in POLES.items():
            if p in self.params and np.any((a[p] - c) * (b[p] - c) <= 0):
                return True
        return False

    def feasible(self, beta) -> bool:
        try:
            self.check_feasible(self.respondent_params(beta))
        except InfeasibleParameters:
            return False
        return True

    # -- per-choice kernel ----------------------------------------------

    def _block(self, c: _Compiled, rp: dict, want_grad: bool):
        spec = self.spec
        cp = {k: v[c.resp] for k, v in rp.items()}
        va, ga = value_terms(c.amount_a, c.prob_a, c.time_a, cp, spec.family, spec.disc,
                             c.frontend, spec.eps_norm)
        vb, gb = value_terms(c.amount_b, c.prob_b, c.time_b, cp, spec.family, spec.disc,
                             c.frontend, spec.eps_norm)
        du = vb - va
        if not np.all(np.isfinite(du)):
            j = int(np.flatnonzero(~np.isfinite(du))[0])
            rid = self.dataset.respondent_ids[int(c.resp[j])]
            raise NonFiniteUtility(f"non-finite utility difference for respondent {rid}")
        if spec.errors.fechner_per_list:
            mu = np.choose(c.group, [cp["mu"], cp["mu2"], cp["mu3"]])
        else:
            mu = cp["mu"]
        z = du / mu
        sz = c.sign * z
        fz = link_cdf(sz, spec.link)
        if spec.errors.tremble:
            kappa = cp["kappa"]
            pc = (1.0 - kappa) * fz + 0.5 * kappa
        else:
            kappa = 0.0
            pc = fz
        clamped = pc < PROB_CLAMP
        pc = np.maximum(pc, PROB_CLAMP)
        ll = np.log(pc)
        if not want_grad:
            return ll, None
        live = ~clamped
        dz = np.where(live, c.sign * (1.0 - kappa) * link_pdf(z, spec.link) / pc, 0.0)
        d_du = dz / mu
        grads = {}
        for p in set(ga) | set(gb):
            if p in rp and p not in spec.fixed:
                grads[p] = d_du * (gb.get(p, 0.0) - ga.get(p, 0.0))
        d_mu = -dz * z / mu
        if spec.errors.fechner_per_list:
            for g, name in enumerate(("mu", "mu2", "mu3")):
                grads[name] = np.where(c.group == g, d_mu, 0.0)
        else:
            grads["mu"] = d_mu
        if spec.errors.tremble:
            grads["kappa"] = np.where(live, (0.5 - fz) / pc, 0.0)
        return ll, grads

    def _run(self, beta, want_grad: bool):
        rp = self.respondent_params(beta)
        self.check_feasible(rp)
        if self.threads == 1 or self.n_choices < 2 * self.threads:
            return self._block(self.data, rp, want_grad)
        bounds = np.linspace(0, self.n_choices, self.threads + 1).astype(int)
        blocks = [_take(self.data, slice(a, b)) for a, b in zip(bounds[:-1], bounds[1:])]
        with ThreadPoolExecutor(self.threads) as pool:
            parts = list(pool.map(lambda blk: self._block(blk, rp, want_grad), blocks))
        ll = np.concatenate([p[0] for p in parts])
        if not want_grad:
            return ll, None
        grads = {k: np.concatenate([p[1][k] for p in parts]) for k in parts[0][1]}
        return ll, grads

    # -- public API -------------------------------------------------------

    def choice_loglik(self, beta) -> np.ndarray:
        return self._run(beta, False)[0]

    def loglik(self, beta) -> float:
        return float(np.sum(self.choice_loglik(beta)))

    def probabilities(self, beta) -> np.ndarray:
        """Model probability of Option B for every included choice."""
        ll = self.choice_loglik(beta)
        p_chosen = np.exp(ll)
        return np.where(self.data.sign > 0, p_chosen, 1.0 - p_chosen)

    def _param_grads(self, beta):
        ll, grads = self._run(beta, True)
        for p in self.params:
            grads.setdefault(p, np.zeros(self.n_choices))
        return ll, grads

    def loglik_and_grad(self, beta) -> tuple[float, np.ndarray]:
        ll, grads = self._param_grads(beta)
        g = np.empty(self.n_coefs)
        for p in self.params:
            per_resp = np.bincount(self.data.resp, weights=grads[p], minlength=self.n_respondents)
            g[self.slices[p]] = per_resp @ self.X[p]
        return float(np.sum(ll)), g

    def gradient(self, beta) -> np.ndarray:
        return self.loglik_and_grad(beta)[1]

    def respondent_scores(self, beta) -> np.ndarray:
        """(n_respondents, n_coefs) sums of score contributions per respondent."""
        _, grads = self._param_grads(beta)
        out = np.empty((self.n_respondents, self.n_coefs))
        for p in self.params:
            per_resp = np.bincount(self.data.resp, weights=grads[p], minlength=self.n_respondents)
            out[:, self.slices[p]] = per_resp[:, None] * self.X[p]
        return out

    def choice_scores(self, beta) -> np.ndarray:
        """(n_choices, n_coefs) score contribution of every choice."""
        _, grads = self._param_grads(beta)
        out = np.empty((self.n_choices, self.n_coefs))
        for p in self.params:
            out[:, self.slices[p]] = grads[p][:, None] * self.X[p][self.data.resp]
        return out

    def prob_b_given(self, rp: Mapping[str, np.ndarray]) -> np.ndarray:
        """P(B) for every included choice from per-respondent parameter arrays.

        ``rp`` maps every parameter the model uses to an (n_respondents,)
        array, bypassing the covariate index. Used by the simulator.
        """
        rp = {k: np.asarray(v, dtype=float) for k, v in rp.items()}
        self.check_feasible(rp)
        c, spec = self.data, self.spec
        cp = {k: v[c.resp] for k, v in rp.items()}
        va, _ = value_terms(c.amount_a, c.prob_a, c.time_a, cp, spec.family, spec.disc,
                            c.frontend, spec.eps_norm)
        vb, _ = value_terms(c.amount_b, c.prob_b, c.time_b, cp, spec.family, spec.disc,
                            c.frontend, spec.eps_norm)
        if spec.errors.fechner_per_list:
            mu = np.choose(c.group, [cp["mu"], cp["mu2"], cp["mu3"]])
        else:
            mu = cp["mu"]
        du = vb - va
        if not np.all(np.isfinite(du)):
            raise NonFiniteUtility("non-finite utility difference")
        f = link_cdf(du / mu, spec.link)
        if spec.errors.tremble:
            f = (1.0 - cp["kappa"]) * f + 0.5 * cp["kappa"]
        return f

    def respondent_loglik(self, beta) -> np.ndarray:
        ll = self.choice_loglik(beta)
        return np.bincount(self.data.resp, weights=ll, minlength=self.n_respondents)


def log_likelihood(dataset: ChoiceDataset, spec: ModelSpec, beta, return_probs: bool = False):
    """Total log-likelihood; with ``return_probs`` also the per-choice P(B)."""
    ev = LikelihoodEvaluator(dataset, spec)
    if return_probs:
        ll = ev.choice_loglik(beta)
        p_chosen = np.exp(ll)
        return float(np.sum(ll)), np.where(ev.data.sign > 0, p_chosen, 1.0 - p_chosen)
    return ev.loglik(beta)
