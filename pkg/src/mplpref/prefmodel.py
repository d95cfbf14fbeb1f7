"""Utility families and intertemporal valuation of options.

Two layers live here. The scalar functions (``utility``, ``option_value``,
``certainty_equivalent``) are direct transcriptions used by the CLI and as
reference values in tests. ``utility_terms`` / ``discount_terms`` /
``value_terms`` are the vectorized kernels the likelihood runs on; they also
return analytic derivatives with respect to every structural parameter.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, replace
from enum import Enum

import numpy as np

from .errors import UnsupportedCurvature
from .mpl import ONE_WEEK, Option


class UtilityFamily(str, Enum):
    CRRA = "crra"
    CRRA_EPS = "crra_eps"
    CARA = "cara"
    DUAL_CURVATURE = "dual_curvature"


class DiscountForm(str, Enum):
    QUASI_HYPERBOLIC = "quasi_hyperbolic"
    EXPONENTIAL = "exponential"
    TWO_RATES = "two_rates"
    NONE = "none"


UTILITY_PARAMS = {
    UtilityFamily.CRRA: ("alpha", "lambda_"),
    UtilityFamily.CRRA_EPS: ("alpha", "lambda_"),
    UtilityFamily.CARA: ("phi", "lambda_"),
    UtilityFamily.DUAL_CURVATURE: ("alpha_plus", "alpha_minus"),
}

DISCOUNT_PARAMS = {
    DiscountForm.QUASI_HYPERBOLIC: ("delta", "gamma"),
    DiscountForm.EXPONENTIAL: ("delta",),
    DiscountForm.TWO_RATES: ("delta", "delta2"),
    DiscountForm.NONE: (),
}

# Boundary between the near and far horizon of the two-rate model, in years.
HORIZON_SPLIT = 0.5


@dataclass(frozen=True)
class ParamVector:
    """Structural and error parameters for one decision maker.

    ``delta`` doubles as the near-horizon rate when ``delta2`` is used, and
    ``mu`` as the time-list scale when ``mu2``/``mu3`` are used.
    """

    alpha: float = 0.0
    lambda_: float = 1.0
    delta: float = 0.0
    gamma: float = 0.0
    kappa: float = 0.0
    mu: float = 1.0
    alpha_plus: float | None = None
    alpha_minus: float | None = None
    phi: float | None = None
    delta2: float | None = None
    mu2: float | None = None
    mu3: float | None = None
    eps_norm: float = 0.001

    @property
    def beta(self) -> float:
        """Present-bias factor in the conventional beta-delta notation."""
        return 1.0 / (1.0 + self.gamma)

    def as_dict(self) -> dict[str, float]:
        return {k: v for k, v in asdict(self).items() if v is not None}

    def with_(self, **changes) -> "ParamVector":
        return replace(self, **changes)


# Point estimates of the pooled main model.
POOLED_ESTIMATES = ParamVector(alpha=0.460, lambda_=1.934, delta=0.280, gamma=0.010, kappa=0.448, mu=0.682)


def _slot(p: ParamVector, name: str) -> float:
    v = getattr(p, name)
    if v is None:
        raise ValueError(f"parameter {name!r} is required by this family but not set")
    return v


def _power_branch(x: float, a: float) -> float:
    if a == 1.0:
        raise UnsupportedCurvature("alpha = 1 (log utility) is not supported")
    if x == 0.0:
        return 0.0
    s = 1.0 - a
    return x ** s / s


def utility(x: float, p: ParamVector, family: UtilityFamily | str = UtilityFamily.CRRA) -> float:
    """Gain/loss utility of ``x`` relative to a zero reference point."""
    family = UtilityFamily(family)
    if family is UtilityFamily.CRRA:
        if x >= 0:
            return _power_branch(x, p.alpha)
        return -p.lambda_ * _power_branch(-x, p.alpha)
    if family is UtilityFamily.CRRA_EPS:
        a, eps = p.alpha, p.eps_norm
        if a == 1.0:
            raise UnsupportedCurvature("alpha = 1 (log utility) is not supported")
        s = 1.0 - a
        base = ((abs(x) + eps) ** s - eps ** s) / s
        return base if x >= 0 else -p.lambda_ * base
    if family is UtilityFamily.CARA:
        phi = _slot(p, "phi")
        if phi == 0.0:
            raise UnsupportedCurvature("phi = 0 is not supported for CARA utility")
        if x >= 0:
            return (1.0 - math.exp(-phi * x)) / phi
        return -p.lambda_ * (1.0 - math.exp(phi * x)) / phi
    # dual curvature: loss aversion fixed at one
    if x >= 0:
        return _power_branch(x, _slot(p, "alpha_plus"))
    return -_power_branch(-x, _slot(p, "alpha_minus"))


def discount_weight(
    t: float,
    p: ParamVector,
    disc: DiscountForm | str = DiscountForm.QUASI_HYPERBOLIC,
    frontend_delay: float = ONE_WEEK,
) -> float:
    disc = DiscountForm(disc)
    if disc is DiscountForm.NONE:
        return 1.0
    if disc is DiscountForm.TWO_RATES:
        d2 = _slot(p, "delta2")
        near = min(t, HORIZON_SPLIT)
        far = max(t - HORIZON_SPLIT, 0.0)
        return (1.0 + p.delta) ** -near * (1.0 + d2) ** -far
    w = (1.0 + p.delta) ** -t
    if disc is DiscountForm.QUASI_HYPERBOLIC and t > frontend_delay:
        w /= 1.0 + p.gamma
    return w


def option_value(
    opt: Option,
    p: ParamVector,
    family: UtilityFamily | str = UtilityFamily.CRRA,
    disc: DiscountForm | str = DiscountForm.QUASI_HYPERBOLIC,
    frontend_delay: float = ONE_WEEK,
) -> float:
    """Discounted expected utility of an option.

    Outcomes dated at or before ``frontend_delay`` count as present and escape
    the present-bias factor.
    """
    if frontend_delay < 0:
        raise ValueError("frontend_delay must be >= 0")
    return sum(
        o.probability * discount_weight(o.time, p, disc, frontend_delay) * utility(o.amount, p, family)
        for o in opt.outcomes
    )


def certainty_equivalent(lottery: Option, alpha: float) -> float:
    """Sure amount with the same CRRA utility as an atemporal gain lottery."""
    if not lottery.is_atemporal or any(o.amount < 0 for o in lottery.outcomes):
        raise ValueError("certainty_equivalent needs an atemporal lottery over gains")
    if alpha == 1.0:
        raise UnsupportedCurvature("alpha = 1 (log utility) is not supported")
    if alpha > 1.0 and any(o.amount == 0 for o in lottery.outcomes):
        raise UnsupportedCurvature("expected utility diverges for alpha > 1 with a zero outcome")
    s = 1.0 - alpha
    eu = sum(o.probability * _power_branch(o.amount, alpha) for o in lottery.outcomes)
    return (eu * s) ** (1.0 / s)


def risk_premium(lottery: Option, alpha: float) -> float:
    ev = sum(o.probability * o.amount for o in lottery.outcomes)
    return ev - certainty_equivalent(lottery, alpha)


BENCHMARK_LOTTERY = Option.coin(0.0, 100.0)


# ---------------------------------------------------------------------------
# vectorized kernels
# ---------------------------------------------------------------------------

def _col(v):
    v = np.asarray(v, dtype=float)
    return v[:, None] if v.ndim == 1 else v


def _power_terms(ax, a):
    """x**(1-a)/(1-a) and its a-derivative for x >= 0 (zero at x == 0)."""
    s = 1.0 - a
    pos = ax > 0
    lx = np.log(np.where(pos, ax, 1.0))
    with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
        g = np.where(pos, np.exp(s * lx) / s, 0.0)
        dg = np.where(pos, g * (1.0 / s - lx), 0.0)
    return g, dg


def utility_terms(x, params: dict, family: UtilityFamily | str, eps: float = 0.001):
    """Vectorized utility of ``x`` (shape (n, K)) with per-row parameters.

    Returns ``(u, grads)`` where ``grads`` maps each utility parameter to
    du/dparam with the same shape as ``x``.
    """
    family = UtilityFamily(family)
    x = np.asarray(x, dtype=float)
    gain = x >= 0
    ax = np.abs(x)
    grads = {}
    if family is UtilityFamily.DUAL_CURVATURE:
        gp, dgp = _power_terms(ax, _col(params["alpha_plus"]))
        gm, dgm = _power_terms(ax, _col(params["alpha_minus"]))
        u = np.where(gain, gp, -gm)
        grads["alpha_plus"] = np.where(gain, dgp, 0.0)
        grads["alpha_minus"] = np.where(gain, 0.0, -dgm)
        return u, grads

    lam = _col(params["lambda_"])
    if family is UtilityFamily.CRRA:
        g, dg = _power_terms(ax, _col(params["alpha"]))
        dname = "alpha"
    elif family is UtilityFamily.CRRA_EPS:
        s = 1.0 - _col(params["alpha"])
        lxe = np.log(ax + eps)
        le = math.log(eps)
        with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
            big = np.exp(s * lxe)
            small = np.exp(s * le)
            g = (big - small) / s
            dg = -(big * lxe - small * le) / s + g / s
        dname = "alpha"
    else:
        phi = _col(params["phi"])
        with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
            e = np.exp(-phi * ax)
            g = -np.expm1(-phi * ax) / phi
            dg = (ax * e - g) / phi
        dname = "phi"
    u = np.where(gain, g, -lam * g)
    grads[dname] = np.where(gain, dg, -lam * dg)
    grads["lambda_"] = np.where(gain, 0.0, -g)
    return u, grads


def discount_terms(t, params: dict, disc: DiscountForm | str, frontend_delay: float = ONE_WEEK):
    """Vectorized discount weights for outcome times ``t`` (shape (n, K))."""
    disc = DiscountForm(disc)
    t = np.asarray(t, dtype=float)
    if disc is DiscountForm.NONE:
        return np.ones_like(t), {}
    d = _col(params["delta"])
    if disc is DiscountForm.TWO_RATES:
        d2 = _col(params["delta2"])
        near = np.minimum(t, HORIZON_SPLIT)
        far = np.maximum(t - HORIZON_SPLIT, 0.0)
        w = np.exp(-near * np.log1p(d) - far * np.log1p(d2))
        return w, {"delta": -near / (1.0 + d) * w, "delta2": -far / (1.0 + d2) * w}
    w = np.exp(-t * np.log1p(d))
    grads = {}
    if disc is DiscountForm.QUASI_HYPERBOLIC:
        g = _col(params["gamma"])
        late = t > frontend_delay
        w = np.where(late, w / (1.0 + g), w)
        grads["gamma"] = np.where(late, -w / (1.0 + g), 0.0)
    grads["delta"] = -t / (1.0 + d) * w
    return w, grads


def value_terms(amount, prob, time, params: dict, family, disc,
                frontend_delay: float = ONE_WEEK, eps: float = 0.001):
    """Option values (shape (n,)) and their parameter derivatives.

    ``amount``, ``prob`` and ``time`` are (n, K) arrays; padding slots carry
    probability zero and amount zero.
    """
    u, du = utility_terms(amount, params, family, eps)
    w, dw = discount_terms(time, params, disc, frontend_delay)
    pw = prob * w
    value = np.sum(pw * u, axis=1)
    grads = {k: np.sum(pw * v, axis=1) for k, v in du.items()}
    pu = prob * u
    for k, v in dw.items():
        grads[k] = grads.get(k, 0.0) + np.sum(pu * v, axis=1)
    return value, grads
