"""Multiple price lists: the decision instrument and its nonparametric readouts.

The four standard lists are built in code; amounts are baseline EUR and get
scaled by the stake treatment and the display currency.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, replace
from decimal import ROUND_HALF_UP, Decimal
from pathlib import Path
from typing import Iterable, Mapping, Sequence

from scipy.optimize import bisect

from .errors import DegenerateRow, IncompleteProfile, NoIndifferencePoint, ParseError

MPL1_1 = "MPL1_1"
MPL1_2 = "MPL1_2"
MPL2 = "MPL2"
MPL3 = "MPL3"
STANDARD_IDS = (MPL1_1, MPL1_2, MPL2, MPL3)

ONE_WEEK = 7 / 365
SIX_MONTHS = 6 / 12
TWELVE_MONTHS = 12 / 12

STAKE_FACTORS = {"low": 0.1, "baseline": 1.0, "high": 10.0}

# Local currency units per EUR shown to respondents.
CURRENCY_MULTIPLIERS = {
    "DE": 1.0, "FR": 1.0, "IT": 1.0, "ES": 1.0, "UK": 1.0,
    "PL": 3.0, "RO": 3.0, "SE": 10.0,
}

LIST_COLUMNS = ("list_id", "row", "option", "outcome_index", "amount", "probability", "time_years")


def normalize_list_id(list_id: str) -> str:
    """Map user spellings such as ``MPL1.1`` or ``mpl3`` to canonical ids."""
    key = str(list_id).strip().upper().replace(".", "_")
    return key


def round_half_up(value: float, ndigits: int = 3) -> float:
    """Round the way printed tables do (0.5625 -> 0.563), not banker's rounding."""
    q = Decimal(1).scaleb(-ndigits)
    return float(Decimal(repr(value)).quantize(q, rounding=ROUND_HALF_UP))


@dataclass(frozen=True)
class Outcome:
    amount: float
    probability: float = 1.0
    time: float = 0.0

    def __post_init__(self):
        if not math.isfinite(self.amount):
            raise ValueError(f"amount must be finite, got {self.amount}")
        if not 0.0 <= self.probability <= 1.0:
            raise ValueError(f"probability must lie in [0, 1], got {self.probability}")
        if not self.time >= 0.0:
            raise ValueError(f"time must be >= 0, got {self.time}")


@dataclass(frozen=True)
class Option:
    outcomes: tuple[Outcome, ...]

    def __post_init__(self):
        object.__setattr__(self, "outcomes", tuple(self.outcomes))
        if not self.outcomes:
            raise ValueError("an option needs at least one outcome")
        totals: dict[float, float] = {}
        for o in self.outcomes:
            totals[o.time] = totals.get(o.time, 0.0) + o.probability
        for t, total in totals.items():
            if abs(total - 1.0) > 1e-9:
                raise ValueError(f"probabilities at time {t} sum to {total}, not 1")

    @classmethod
    def sure(cls, amount: float, time: float = 0.0) -> "Option":
        return cls((Outcome(amount, 1.0, time),))

    @classmethod
    def coin(cls, heads: float, tails: float, time: float = 0.0) -> "Option":
        return cls((Outcome(heads, 0.5, time), Outcome(tails, 0.5, time)))

    def scaled(self, factor: float) -> "Option":
        return Option(tuple(replace(o, amount=o.amount * factor) for o in self.outcomes))

    @property
    def is_atemporal(self) -> bool:
        return all(o.time == 0.0 for o in self.outcomes)


@dataclass(frozen=True)
class MplRow:
    index: int
    option_a: Option
    option_b: Option

    def scaled(self, factor: float) -> "MplRow":
        return MplRow(self.index, self.option_a.scaled(factor), self.option_b.scaled(factor))


@dataclass(frozen=True)
class PriceList:
    """An ordered set of binary A/B choices.

    ``ab_reversed`` is presentation metadata only; options are never permuted.
    """

    id: str
    kind: str
    rows: tuple[MplRow, ...]
    frontend_delay: float = ONE_WEEK
    ab_reversed: bool = False

    def __post_init__(self):
        object.__setattr__(self, "rows", tuple(self.rows))
        if self.kind not in ("time", "risk", "loss"):
            raise ValueError(f"unknown list kind {self.kind!r}")
        if self.frontend_delay < 0:
            raise ValueError("frontend_delay must be >= 0")
        idx = [r.index for r in self.rows]
        if len(set(idx)) != len(idx):
            raise ValueError(f"duplicate row index in {self.id}")

    def __len__(self) -> int:
        return len(self.rows)

    def row(self, index: int) -> MplRow:
        for r in self.rows:
            if r.index == index:
                return r
        raise KeyError(f"{self.id} has no row {index}")

    def scaled(self, factor: float) -> "PriceList":
        return replace(self, rows=tuple(r.scaled(factor) for r in self.rows))


_TIME_EARLIER = (98, 94, 90, 86, 80, 70, 55)
_RISK_HEADS_B = (54, 58, 62, 66, 70, 74, 78, 82, 87, 97, 112, 132, 167, 222)
# (gain A, loss A, gain B, loss B); losses as positive magnitudes.
_LOSS_ROWS = (
    (100, 20, 150, 100),
    (55, 20, 150, 100),
    (15, 20, 150, 100),
    (5, 20, 150, 90),
    (5, 30, 150, 90),
    (5, 40, 150, 90),
    (5, 40, 150, 70),
)


def _baseline_lists(frontend_delay: float) -> list[PriceList]:
    far = tuple(
        MplRow(i, Option.sure(a, SIX_MONTHS + frontend_delay), Option.sure(100, TWELVE_MONTHS))
        for i, a in enumerate(_TIME_EARLIER, start=1)
    )
    near = tuple(
        MplRow(i, Option.sure(a, frontend_delay), Option.sure(100, SIX_MONTHS))
        for i, a in enumerate(_TIME_EARLIER, start=1)
    )
    risk = tuple(
        MplRow(i, Option.coin(50, 40), Option.coin(h, 10))
        for i, h in enumerate(_RISK_HEADS_B, start=1)
    )
    loss = tuple(
        MplRow(i, Option.coin(ga, -la), Option.coin(gb, -lb))
        for i, (ga, la, gb, lb) in enumerate(_LOSS_ROWS, start=1)
    )
    return [
        PriceList(MPL1_1, "time", far, frontend_delay),
        PriceList(MPL1_2, "time", near, frontend_delay),
        PriceList(MPL2, "risk", risk, frontend_delay),
        PriceList(MPL3, "loss", loss, frontend_delay),
    ]


def build_standard_lists(
    stake: str = "baseline",
    currency_multiplier: float = 1.0,
    ab_reversed: bool = False,
    frontend_delay: float = ONE_WEEK,
) -> list[PriceList]:
    """Return MPL1.1, MPL1.2, MPL2 and MPL3 as shown under a treatment.

    Parameters
    ----------
    stake : {"low", "baseline", "high"}
        Stake treatment; amounts are divided or multiplied by 10.
    currency_multiplier : float
        Local currency units per EUR (3 for PLN/RON, 10 for SEK).
    ab_reversed : bool
        Presentation order flag, stored on each list.
    """
    if stake not in STAKE_FACTORS:
        raise ValueError(f"stake must be one of {sorted(STAKE_FACTORS)}, got {stake!r}")
    if not currency_multiplier > 0:
        raise ValueError("currency_multiplier must be positive")
    factor = STAKE_FACTORS[stake] * currency_multiplier
    out = []
    for plist in _baseline_lists(frontend_delay):
        if factor != 1.0:
            plist = plist.scaled(factor)
        out.append(replace(plist, ab_reversed=ab_reversed))
    return out


def standard_lists_by_id(**kwargs) -> dict[str, PriceList]:
    return {p.id: p for p in build_standard_lists(**kwargs)}


# ---------------------------------------------------------------------------
# implied-parameter columns
# ---------------------------------------------------------------------------

def implied_discount_rate(earlier_amount: float, later_amount: float, gap: float) -> float:
    """Annual rate making ``earlier`` now and ``later`` after ``gap`` years equal
    under linear utility."""
    if not (earlier_amount > 0 and later_amount > 0 and gap > 0):
        raise ValueError("amounts and gap must be positive")
    return (later_amount / earlier_amount) ** (1.0 / gap) - 1.0


def _sure_amount(opt: Option) -> tuple[float, float]:
    if len(opt.outcomes) != 1:
        raise ValueError("time-list options must pay a single sure amount")
    o = opt.outcomes[0]
    return o.amount, o.time


def implied_discount_rate_row(row: MplRow, frontend_delay: float = ONE_WEEK) -> float:
    # The early payment's front-end delay is not part of the gap (6 months exactly).
    a, ta = _sure_amount(row.option_a)
    b, tb = _sure_amount(row.option_b)
    gap = tb - ta + frontend_delay
    return implied_discount_rate(a, b, gap)


def _crra_shifted(x: float, s: float) -> float:
    # (x**s - 1) / s, continuous through s = 0 where it equals log(x); the -1/s
    # shift cancels in EU differences because probabilities sum to one.
    lx = math.log(x)
    if s == 0.0:
        return lx
    return math.expm1(s * lx) / s


def _crra_shifted_ds(x: float, s: float) -> float:
    lx = math.log(x)
    if abs(s) < 1e-8:
        return 0.5 * lx * lx
    return (lx * math.exp(s * lx) * s - math.expm1(s * lx)) / (s * s)


def _eu_gap(row: MplRow, alpha: float) -> float:
    s = 1.0 - alpha
    ea = sum(o.probability * _crra_shifted(o.amount, s) for o in row.option_a.outcomes)
    eb = sum(o.probability * _crra_shifted(o.amount, s) for o in row.option_b.outcomes)
    return ea - eb


def _eu_gap_dalpha(row: MplRow, alpha: float) -> float:
    s = 1.0 - alpha
    da = sum(o.probability * _crra_shifted_ds(o.amount, s) for o in row.option_a.outcomes)
    db = sum(o.probability * _crra_shifted_ds(o.amount, s) for o in row.option_b.outcomes)
    return -(da - db)


def implied_crra(row: MplRow, bracket: tuple[float, float] = (-10.0, 5.0)) -> float:
    """Relative risk aversion at which a respondent is indifferent in ``row``.

    Bisection over ``bracket`` followed by one Newton step.
    """
    for opt in (row.option_a, row.option_b):
        if not opt.is_atemporal or any(o.amount <= 0 for o in opt.outcomes):
            raise ValueError("implied_crra needs atemporal lotteries over positive gains")
    lo, hi = bracket
    f_lo, f_hi = _eu_gap(row, lo), _eu_gap(row, hi)
    if f_lo == 0.0:
        return lo
    if f_hi == 0.0:
        return hi
    if f_lo * f_hi > 0:
        raise NoIndifferencePoint(f"row {row.index}: no sign change of EU_A - EU_B on {bracket}")
    root = bisect(lambda a: _eu_gap(row, a), lo, hi, xtol=1e-13, rtol=1e-15, maxiter=200)
    slope = _eu_gap_dalpha(row, root)
    if slope != 0.0:
        polished = root - _eu_gap(row, root) / slope
        if lo <= polished <= hi and abs(_eu_gap(row, polished)) <= abs(_eu_gap(row, root)):
            root = polished
    return root


def _gain_loss_parts(opt: Option) -> tuple[float, float]:
    gains = sum(o.probability * o.amount for o in opt.outcomes if o.amount >= 0)
    losses = sum(o.probability * -o.amount for o in opt.outcomes if o.amount < 0)
    return gains, losses


def implied_loss_aversion(row: MplRow) -> float:
    """Loss aversion at indifference under linear utility (closed form)."""
    for opt in (row.option_a, row.option_b):
        if not opt.is_atemporal:
            raise ValueError("implied_loss_aversion needs atemporal lotteries")
        if not (any(o.amount > 0 for o in opt.outcomes) and any(o.amount < 0 for o in opt.outcomes)):
            raise ValueError("implied_loss_aversion needs mixed gain/loss lotteries")
    ga, la = _gain_loss_parts(row.option_a)
    gb, lb = _gain_loss_parts(row.option_b)
    if lb == la:
        raise DegenerateRow(f"row {row.index}: equal expected losses, lambda* undefined")
    return (gb - ga) / (lb - la)


def implied_column(plist: PriceList) -> list[float]:
    """The implied-parameter value for every row, in row order."""
    if plist.kind == "time":
        return [implied_discount_rate_row(r, plist.frontend_delay) for r in plist.rows]
    if plist.kind == "risk":
        return [implied_crra(r) for r in plist.rows]
    return [implied_loss_aversion(r) for r in plist.rows]


# ---------------------------------------------------------------------------
# nonparametric choice measures
# ---------------------------------------------------------------------------

STANDARD_ROW_COUNTS = {MPL1_1: 7, MPL1_2: 7, MPL2: 14, MPL3: 7}


def _as_chose_b(choice) -> bool:
    if isinstance(choice, str):
        c = choice.strip().upper()
        if c not in ("A", "B"):
            raise ValueError(f"choice must be 'A' or 'B', got {choice!r}")
        return c == "B"
    return bool(choice)


def is_multiple_switcher(chose_b: Sequence[bool]) -> bool:
    """More than one A->B move, or any B->A move, reading rows top-down."""
    a_to_b = b_to_a = 0
    for prev, cur in zip(chose_b, chose_b[1:]):
        if not prev and cur:
            a_to_b += 1
        elif prev and not cur:
            b_to_a += 1
    return a_to_b > 1 or b_to_a > 0


@dataclass(frozen=True)
class ChoiceMeasures:
    n_option_a: dict[str, int]
    switch_point: dict[str, int | None]
    multiple_switch: dict[str, bool]
    present_bias_diff: int | None = None

    @property
    def multiple_switcher(self) -> bool:
        """Respondent-level flag: multiple switching in any list."""
        return any(self.multiple_switch.values())

    @property
    def discounting_count(self) -> int | None:
        if MPL1_1 in self.n_option_a and MPL1_2 in self.n_option_a:
            return self.n_option_a[MPL1_1] + self.n_option_a[MPL1_2]
        return None


def choice_measures(
    choices: Mapping[str, Sequence],
    row_counts: Mapping[str, int] | None = None,
) -> ChoiceMeasures:
    """A-counts, switch points and multiple-switch flags per list.

    ``choices`` maps a list id to its top-down choices, given as ``"A"``/``"B"``
    or as booleans where True means Option B. Constant-A profiles get switch
    point = row count, constant-B profiles 0, multiple switchers None.
    """
    counts = dict(STANDARD_ROW_COUNTS if row_counts is None else row_counts)
    n_a: dict[str, int] = {}
    switch: dict[str, int | None] = {}
    multi: dict[str, bool] = {}
    for raw_id, seq in choices.items():
        list_id = normalize_list_id(raw_id)
        if any(c is None for c in seq):
            raise IncompleteProfile(f"{list_id}: missing choice")
        bs = [_as_chose_b(c) for c in seq]
        expected = counts.get(list_id)
        if expected is not None and len(bs) != expected:
            raise IncompleteProfile(f"{list_id}: {len(bs)} choices for {expected} rows")
        n_a[list_id] = sum(1 for b in bs if not b)
        multi[list_id] = is_multiple_switcher(bs)
        switch[list_id] = None if multi[list_id] else n_a[list_id]
    diff = None
    if MPL1_1 in n_a and MPL1_2 in n_a:
        diff = n_a[MPL1_2] - n_a[MPL1_1]
    return ChoiceMeasures(n_a, switch, multi, diff)


# ---------------------------------------------------------------------------
# CSV exchange
# ---------------------------------------------------------------------------

def export_lists_csv(lists: Iterable[PriceList], path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(LIST_COLUMNS)
        for plist in lists:
            for r in plist.rows:
                for label, opt in (("A", r.option_a), ("B", r.option_b)):
                    for k, o in enumerate(opt.outcomes, start=1):
                        w.writerow([plist.id, r.index, label, k, repr(o.amount),
                                    repr(o.probability), repr(o.time)])


def _infer_kind(rows: Sequence[MplRow]) -> str:
    outcomes = [o for r in rows for opt in (r.option_a, r.option_b) for o in opt.outcomes]
    if any(o.time > 0 for o in outcomes):
        return "time"
    if any(o.amount < 0 for o in outcomes):
        return "loss"
    return "risk"


def import_lists_csv(path, frontend_delay: float = ONE_WEEK) -> list[PriceList]:
    path = Path(path)
    grouped: dict[str, dict[int, dict[str, list[tuple[int, Outcome]]]]] = {}
    order: list[str] = []
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or tuple(reader.fieldnames) != LIST_COLUMNS:
            raise ParseError(f"expected header {','.join(LIST_COLUMNS)}", path, 1)
        for lineno, rec in enumerate(reader, start=2):
            try:
                list_id = normalize_list_id(rec["list_id"])
                row = int(rec["row"])
                label = rec["option"].strip().upper()
                if label not in ("A", "B"):
                    raise ValueError(f"option must be A or B, got {rec['option']!r}")
                k = int(rec["outcome_index"])
                o = Outcome(float(rec["amount"]), float(rec["probability"]), float(rec["time_years"]))
            except (TypeError, ValueError) as exc:
                raise ParseError(str(exc), path, lineno) from exc
            if list_id not in grouped:
                grouped[list_id] = {}
                order.append(list_id)
            grouped[list_id].setdefault(row, {"A": [], "B": []})[label].append((k, o))
    out = []
    for list_id in order:
        rows = []
        for idx in sorted(grouped[list_id]):
            parts = grouped[list_id][idx]
            if not parts["A"] or not parts["B"]:
                raise ParseError(f"{list_id} row {idx} lacks an option", path, None)
            opts = [Option(tuple(o for _, o in sorted(parts[lab], key=lambda t: t[0])))
                    for lab in ("A", "B")]
            rows.append(MplRow(idx, *opts))
        out.append(PriceList(list_id, _infer_kind(rows), tuple(rows), frontend_delay))
    return out
