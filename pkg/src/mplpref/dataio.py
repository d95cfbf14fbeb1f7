"""Reading and writing choice data, run configurations and synthetic fixtures.

File layout
-----------
``choices.csv``
    ``respondent_id, list_id, row, choice`` with choice in {A, B}.
``covariates.csv``
    ``respondent_id`` followed by numeric covariate columns. Three optional
    columns are reserved and never used as covariates: ``stake`` (amount
    multiplier of the respondent's treatment), ``currency`` (local units per
    EUR) and ``country`` (two-letter code). When ``stake`` is absent it is
    derived from ``LowStakes``/``HighStakes`` dummies; when ``currency`` is
    absent it is looked up from ``country``.

Cells reading "do not know", "NA" or empty count as missing; respondents with
any missing covariate are dropped and counted in the ``IngestionReport``.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .dataset import ChoiceDataset, measures_frame
from .errors import DesignMismatch, ParseError, ReferentialError
from .estimate import OptimizerConfig
from .likelihood import ErrorStructure, LinkFunction, ModelSpec
from .mpl import (
    CURRENCY_MULTIPLIERS,
    MPL1_1,
    MPL1_2,
    STAKE_FACTORS,
    normalize_list_id,
    standard_lists_by_id,
)
from .prefmodel import POOLED_ESTIMATES, DiscountForm, ParamVector, UtilityFamily

SCHEMA_VERSION = 1

CHOICE_COLUMNS = ("respondent_id", "list_id", "row", "choice")
RESERVED_COLUMNS = ("respondent_id", "stake", "currency", "country")
MISSING_TOKENS = {"", "na", "n/a", "nan", ".", "dk", "do not know", "don't know", "dont know"}
BASELINE_COUNTRY = "DE"


# ---------------------------------------------------------------------------
# presets
# ---------------------------------------------------------------------------

PRESETS = (
    "main", "no_tremble", "probit", "three_fechner", "cara", "eps_norm", "dual_curvature",
    "no_present_bias", "two_rates", "time_only", "no_multiswitch",
)


def preset_spec(name: str, covariates: Mapping[str, Sequence[str]] | None = None) -> ModelSpec:
    """ModelSpec for a named robustness variant.

    ``no_multiswitch`` is the main model; its difference lies in ingestion
    (multiple switchers are excluded), see ``RunConfig``.
    """
    kw: dict = {}
    if name in ("main", "no_multiswitch"):
        pass
    elif name == "no_tremble":
        kw["errors"] = ErrorStructure(tremble=False)
    elif name == "probit":
        kw["link"] = LinkFunction.PROBIT
    elif name == "three_fechner":
        kw["errors"] = ErrorStructure(fechner_per_list=True)
    elif name == "cara":
        kw["family"] = UtilityFamily.CARA
    elif name == "eps_norm":
        kw["family"] = UtilityFamily.CRRA_EPS
    elif name == "dual_curvature":
        kw["family"] = UtilityFamily.DUAL_CURVATURE
    elif name == "no_present_bias":
        kw["disc"] = DiscountForm.EXPONENTIAL
    elif name == "two_rates":
        kw["disc"] = DiscountForm.TWO_RATES
    elif name == "time_only":
        # linear utility on the two time lists; lambda is not identified there
        kw["fixed"] = {"alpha": 0.0, "lambda_": 1.0}
        kw["lists"] = (MPL1_1, MPL1_2)
    else:
        raise ValueError(f"unknown preset {name!r}; choose from {', '.join(PRESETS)}")
    spec = ModelSpec(name=name, **kw)
    if covariates:
        free = set(spec.parameters())
        cov = {p: tuple(v) for p, v in covariates.items() if p in free}
        spec = replace(spec, covariates=cov)
    return spec


# ---------------------------------------------------------------------------
# run configuration
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class RunConfig:
    """Everything needed to reproduce one estimation run.

    ``covariates`` maps parameter names to covariate lists; the key ``"*"``
    applies a list to every free parameter.
    """

    choices: str
    covariates_file: str
    preset: str = "main"
    covariates: dict = field(default_factory=dict)
    exclude_multiple_switchers: bool | None = None
    optimizer: dict = field(default_factory=dict)
    output_dir: str = "results"
    seed: int = 0
    schema_version: int = SCHEMA_VERSION

    def __post_init__(self):
        if self.schema_version != SCHEMA_VERSION:
            raise ValueError(f"unsupported config schema_version {self.schema_version}")
        if self.preset not in PRESETS:
            raise ValueError(f"unknown preset {self.preset!r}")
        OptimizerConfig(**self.optimizer)  # validates keys and values

    @property
    def drop_multiple_switchers(self) -> bool:
        if self.exclude_multiple_switchers is None:
            return self.preset == "no_multiswitch"
        return bool(self.exclude_multiple_switchers)

    def optimizer_config(self) -> OptimizerConfig:
        return OptimizerConfig(**{"seed": self.seed, **self.optimizer})

    def model_spec(self, covariate_names: Sequence[str] = ()) -> ModelSpec:
        base = preset_spec(self.preset)
        cov = {}
        for key, names in self.covariates.items():
            targets = base.parameters() if key == "*" else (key,)
            for p in targets:
                cov[p] = tuple(names)
        if covariate_names:
            missing = {c for v in cov.values() for c in v} - set(covariate_names)
            if missing:
                raise DesignMismatch(f"covariates not in data: {sorted(missing)}")
        return preset_spec(self.preset, cov)

    def resolve(self, base: Path) -> "RunConfig":
        """Paths made absolute relative to ``base`` (the config file's folder)."""
        def fix(p):
            q = Path(p)
            return str(q if q.is_absolute() else (base / q))
        return replace(self, choices=fix(self.choices), covariates_file=fix(self.covariates_file),
                       output_dir=fix(self.output_dir))

    def to_json(self, path=None) -> str:
        text = json.dumps(asdict(self), indent=2) + "\n"
        if path is not None:
            Path(path).write_text(text, encoding="utf-8")
        return text

    @classmethod
    def from_dict(cls, data: Mapping) -> "RunConfig":
        data = dict(data)
        if "schema_version" not in data:
            raise ValueError("config lacks schema_version")
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**data)

    @classmethod
    def from_json(cls, path) -> "RunConfig":
        path = Path(path)
        try:
            data = json.loads(path.read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise ParseError(exc.msg, path=path, line=exc.lineno) from None
        return cls.from_dict(data).resolve(path.parent)


# ---------------------------------------------------------------------------
# ingestion
# ---------------------------------------------------------------------------

@dataclass
class IngestionReport:
    raw_respondents: int = 0
    raw_choice_rows: int = 0
    dropped_missing_covariates: list = field(default_factory=list)
    dropped_multiple_switchers: list = field(default_factory=list)
    kept_respondents: int = 0
    kept_choice_rows: int = 0
    dropped_choice_rows: dict = field(default_factory=dict)

    @property
    def n_dropped_missing(self) -> int:
        return len(self.dropped_missing_covariates)

    @property
    def n_dropped_multiple_switchers(self) -> int:
        return len(self.dropped_multiple_switchers)

    def balanced(self) -> bool:
        resp_ok = (self.kept_respondents + self.n_dropped_missing + self.n_dropped_multiple_switchers
                   == self.raw_respondents)
        rows_ok = self.kept_choice_rows + sum(self.dropped_choice_rows.values()) == self.raw_choice_rows
        return resp_ok and rows_ok

    def as_dict(self) -> dict:
        d = asdict(self)
        d["balanced"] = self.balanced()
        return d


def _is_missing(cell: str | None) -> bool:
    return cell is None or cell.strip().lower() in MISSING_TOKENS


def _read_csv(path: Path, required: Sequence[str]):
    try:
        fh = open(path, newline="", encoding="utf-8-sig")
    except OSError as exc:
        raise ParseError(f"cannot open: {exc.strerror}", path=path, line=0) from None
    with fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ParseError("missing header row", path=path, line=1) from None
        header = [h.strip() for h in header]
        missing = [c for c in required if c not in header]
        if missing:
            raise ParseError(f"header lacks column(s) {missing}", path=path, line=1)
        if len(set(header)) != len(header):
            raise ParseError("duplicate column names in header", path=path, line=1)
        rows = []
        for cells in reader:
            if not cells or all(not c.strip() for c in cells):
                continue
            if len(cells) != len(header):
                raise ParseError(f"expected {len(header)} fields, found {len(cells)}",
                                 path=path, line=reader.line_num)
            rows.append((reader.line_num, dict(zip(header, cells))))
    return header, rows


def _read_covariates(path: Path, report: IngestionReport):
    header, rows = _read_csv(path, ["respondent_id"])
    names = [h for h in header if h not in RESERVED_COLUMNS]
    ids, values, stake, currency, countries = [], [], [], [], []
    seen = set()
    for line, rec in rows:
        rid = rec["respondent_id"].strip()
        if not rid:
            raise ParseError("empty respondent_id", path=path, line=line)
        if rid in seen:
            raise ParseError(f"duplicate respondent_id {rid!r}", path=path, line=line)
        seen.add(rid)
        report.raw_respondents += 1
        if any(_is_missing(rec[c]) for c in names):
            report.dropped_missing_covariates.append(rid)
            continue
        try:
            vals = [float(rec[c]) for c in names]
        except ValueError:
            bad = next(c for c in names if not _is_float(rec[c]))
            raise ParseError(f"column {bad!r}: {rec[bad]!r} is not numeric", path=path, line=line) from None
        if not all(math.isfinite(v) for v in vals):
            raise ParseError("non-finite covariate value", path=path, line=line)
        country = rec.get("country", "").strip().upper() or None
        row_vals = dict(zip(names, vals))
        _check_country(row_vals, country, path, line)
        stake.append(_stake_for(rec, row_vals, path, line))
        currency.append(_currency_for(rec, country, path, line))
        ids.append(rid)
        values.append(vals)
        countries.append(country)
    return ids, names, values, stake, currency


def _is_float(s: str) -> bool:
    try:
        float(s)
    except ValueError:
        return False
    return True


def country_dummy_columns(names: Sequence[str]) -> list[str]:
    return [n for n in names if n.lower().startswith("country_")]


def _check_country(row: Mapping[str, float], country: str | None, path, line):
    dummies = country_dummy_columns(list(row))
    if not dummies:
        return
    vals = [row[d] for d in dummies]
    if any(v not in (0.0, 1.0) for v in vals) or sum(vals) > 1:
        raise ParseError("country dummies are not one-hot (at most one 1, others 0)", path=path, line=line)
    if country is not None:
        active = [d.split("_", 1)[1].upper() for d, v in zip(dummies, vals) if v == 1.0]
        expected = [] if country == BASELINE_COUNTRY else [country]
        if f"country_{BASELINE_COUNTRY}".lower() in (d.lower() for d in dummies):
            raise ParseError(f"{BASELINE_COUNTRY} is the omitted baseline and must not have a dummy",
                             path=path, line=line)
        if active != expected:
            raise ParseError(f"country {country!r} disagrees with its dummy columns", path=path, line=line)


def _stake_for(rec, row, path, line) -> float:
    if "stake" in rec and not _is_missing(rec["stake"]):
        try:
            v = float(rec["stake"])
        except ValueError:
            raise ParseError(f"stake {rec['stake']!r} is not numeric", path=path, line=line) from None
        if not v > 0:
            raise ParseError("stake must be positive", path=path, line=line)
        return v
    low, high = row.get("LowStakes", 0.0), row.get("HighStakes", 0.0)
    if low and high:
        raise ParseError("LowStakes and HighStakes both set", path=path, line=line)
    return STAKE_FACTORS["low"] if low else STAKE_FACTORS["high"] if high else STAKE_FACTORS["baseline"]


def _currency_for(rec, country, path, line) -> float:
    if "currency" in rec and not _is_missing(rec["currency"]):
        try:
            v = float(rec["currency"])
        except ValueError:
            raise ParseError(f"currency {rec['currency']!r} is not numeric", path=path, line=line) from None
        if not v > 0:
            raise ParseError("currency multiplier must be positive", path=path, line=line)
        return v
    if country is None:
        return 1.0
    if country not in CURRENCY_MULTIPLIERS:
        raise ParseError(f"unknown country code {country!r}", path=path, line=line)
    return CURRENCY_MULTIPLIERS[country]


def load_dataset(run: RunConfig | None = None, *, choices=None, covariates=None,
                 exclude_multiple_switchers: bool | None = None,
                 lists=None) -> tuple[ChoiceDataset, IngestionReport]:
    """Read and validate a choice dataset.

    Pass either a ``RunConfig`` or the two paths. Amounts are always taken
    from the built-in EUR lists scaled by each respondent's stake, so the
    currency multiplier is recorded but never enters utilities.
    """
    if run is not None:
        choices, covariates = run.choices, run.covariates_file
        if exclude_multiple_switchers is None:
            exclude_multiple_switchers = run.drop_multiple_switchers
    if choices is None or covariates is None:
        raise ValueError("need a RunConfig or both file paths")
    lists = standard_lists_by_id() if lists is None else lists
    report = IngestionReport()
    cpath, vpath = Path(covariates), Path(choices)
    ids, names, values, stake, currency = _read_covariates(cpath, report)
    kept = set(ids)
    dropped = set(report.dropped_missing_covariates)

    _, rows = _read_csv(vpath, CHOICE_COLUMNS)
    resp, list_ids, row_idx, chose_b = [], [], [], []
    pos = {rid: k for k, rid in enumerate(ids)}
    seen = set()
    n_dropped_rows = 0
    for line, rec in rows:
        report.raw_choice_rows += 1
        rid = rec["respondent_id"].strip()
        lid = normalize_list_id(rec["list_id"].strip())
        try:
            r = int(rec["row"])
        except ValueError:
            raise ParseError(f"row {rec['row']!r} is not an integer", path=vpath, line=line) from None
        ch = rec["choice"].strip().upper()
        if ch not in ("A", "B"):
            raise ParseError(f"choice must be A or B, found {rec['choice']!r}", path=vpath, line=line)
        if lid not in lists:
            raise ReferentialError(f"{vpath}:{line}: unknown list_id {rec['list_id']!r}")
        if r not in {x.index for x in lists[lid].rows}:
            raise ReferentialError(f"{vpath}:{line}: {lid} has no row {r}")
        if rid in dropped:
            n_dropped_rows += 1
            continue
        if rid not in kept:
            raise ReferentialError(f"{vpath}:{line}: respondent {rid!r} not in covariates file")
        key = (rid, lid, r)
        if key in seen:
            raise ParseError(f"duplicate choice for {key}", path=vpath, line=line)
        seen.add(key)
        resp.append(pos[rid])
        list_ids.append(lid)
        row_idx.append(r)
        chose_b.append(ch == "B")
    report.dropped_choice_rows["missing_covariates"] = n_dropped_rows

    n = len(ids)
    ds = ChoiceDataset(
        respondent_ids=tuple(ids),
        covariate_names=tuple(names),
        covariates=np.asarray(values, dtype=float).reshape(n, len(names)),
        stake=np.asarray(stake, dtype=float),
        currency=np.asarray(currency, dtype=float),
        choice_respondent=np.asarray(resp, dtype=np.int64),
        choice_list=np.asarray(list_ids, dtype=object),
        choice_row=np.asarray(row_idx, dtype=np.int64),
        chose_b=np.asarray(chose_b, dtype=bool),
        lists=lists,
    )
    report.dropped_choice_rows["multiple_switchers"] = 0
    if exclude_multiple_switchers and n:
        multi = measures_frame(ds)["multiple_switcher"].to_numpy()
        report.dropped_multiple_switchers = [rid for rid, m in zip(ids, multi) if m]
        report.dropped_choice_rows["multiple_switchers"] = int(np.sum(multi[ds.choice_respondent]))
        ds = ds.subset(~multi)
    report.kept_respondents = ds.n_respondents
    report.kept_choice_rows = ds.n_choices
    return ds, report


def _fmt(v: float) -> str:
    return repr(float(v))


def export_dataset(dataset: ChoiceDataset, directory) -> tuple[Path, Path]:
    """Write ``choices.csv`` and ``covariates.csv``; ``load_dataset`` reads them back unchanged."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    cpath, vpath = directory / "choices.csv", directory / "covariates.csv"
    with open(vpath, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["respondent_id", *dataset.covariate_names, "stake", "currency"])
        for k, rid in enumerate(dataset.respondent_ids):
            w.writerow([rid, *map(_fmt, dataset.covariates[k]), _fmt(dataset.stake[k]),
                        _fmt(dataset.currency[k])])
    with open(cpath, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(CHOICE_COLUMNS)
        ids = dataset.respondent_ids
        for j, lid, r, b in zip(dataset.choice_respondent, dataset.choice_list, dataset.choice_row,
                                dataset.chose_b):
            w.writerow([ids[j], lid, int(r), "B" if b else "A"])
    return cpath, vpath


# ---------------------------------------------------------------------------
# fixtures
# ---------------------------------------------------------------------------

def make_fixture(directory, seed: int, n_subjects: int, truth: ParamVector = POOLED_ESTIMATES,
                 covariate_names: Sequence[str] = ("female", "age_std")) -> dict[str, Path]:
    """Synthetic choices for ``n_subjects`` who all share ``truth``.

    Writes ``choices.csv``, ``covariates.csv`` and ``truth.json``. The
    covariates are independent noise (a 0/1 dummy and a standard normal), so
    their true coefficients are zero.
    """
    from .simulate import choice_rng, simulate_choices

    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    lists = standard_lists_by_id()
    cpath, vpath, tpath = directory / "choices.csv", directory / "covariates.csv", directory / "truth.json"
    with open(vpath, "w", newline="", encoding="utf-8") as fv, \
            open(cpath, "w", newline="", encoding="utf-8") as fc:
        wv, wc = csv.writer(fv), csv.writer(fc)
        wv.writerow(["respondent_id", *covariate_names])
        wc.writerow(CHOICE_COLUMNS)
        for j in range(n_subjects):
            rid = f"f{j:05d}"
            crng = np.random.default_rng([seed, 0, j, 2])
            cov = []
            for k, _ in enumerate(covariate_names):
                cov.append(float(crng.integers(0, 2)) if k % 2 == 0 else round(float(crng.standard_normal()), 6))
            wv.writerow([rid, *map(_fmt, cov)])
            prof = simulate_choices(truth, lists, choice_rng(seed, 0, j))
            for lid, r, b in zip(prof["list_id"], prof["row"], prof["chose_b"]):
                wc.writerow([rid, lid, int(r), "B" if b else "A"])
    manifest = {
        "schema_version": SCHEMA_VERSION,
        "seed": seed,
        "n_subjects": n_subjects,
        "truth": truth.as_dict(),
        "covariates": list(covariate_names),
    }
    tpath.write_text(json.dumps(manifest, indent=2) + "\n", encoding="utf-8")
    return {"choices": cpath, "covariates": vpath, "truth": tpath}


def read_truth(path) -> ParamVector:
    data = json.loads(Path(path).read_text(encoding="utf-8"))
    return ParamVector(**data["truth"])


__all__ = [
    "SCHEMA_VERSION", "PRESETS", "preset_spec", "RunConfig", "IngestionReport", "load_dataset",
    "export_dataset", "make_fixture", "read_truth", "country_dummy_columns",
]
