"""In-memory choice data: respondents, covariates and per-row A/B choices."""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np
import pandas as pd

from .errors import ReferentialError
from .mpl import PriceList, normalize_list_id, standard_lists_by_id


def _frozen(a, dtype=None):
    a = np.array(a, dtype=dtype)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class ChoiceDataset:
    """Respondents and their choices.

    Amounts are never stored per choice: they are looked up from ``lists``
    (baseline EUR) and multiplied by the respondent's ``stake`` factor.
    ``currency`` records the display multiplier and is divided out on
    ingestion, so it never enters the likelihood.
    """

    respondent_ids: tuple[str, ...]
    covariate_names: tuple[str, ...]
    covariates: np.ndarray
    stake: np.ndarray
    currency: np.ndarray
    choice_respondent: np.ndarray
    choice_list: np.ndarray
    choice_row: np.ndarray
    chose_b: np.ndarray
    lists: Mapping[str, PriceList] = field(default_factory=standard_lists_by_id)
    _cache: dict = field(default_factory=dict, repr=False, compare=False)

    def __post_init__(self):
        n = len(self.respondent_ids)
        object.__setattr__(self, "respondent_ids", tuple(str(r) for r in self.respondent_ids))
        object.__setattr__(self, "covariate_names", tuple(self.covariate_names))
        cov = np.asarray(self.covariates, dtype=float).reshape(n, len(self.covariate_names))
        object.__setattr__(self, "covariates", _frozen(cov))
        object.__setattr__(self, "stake", _frozen(np.broadcast_to(np.asarray(self.stake, float), (n,))))
        object.__setattr__(self, "currency", _frozen(np.broadcast_to(np.asarray(self.currency, float), (n,))))
        object.__setattr__(self, "choice_respondent", _frozen(self.choice_respondent, np.int64))
        object.__setattr__(self, "choice_list", _frozen([normalize_list_id(x) for x in self.choice_list], object))
        object.__setattr__(self, "choice_row", _frozen(self.choice_row, np.int64))
        object.__setattr__(self, "chose_b", _frozen(self.chose_b, bool))
        object.__setattr__(self, "lists", dict(self.lists))
        m = len(self.choice_respondent)
        if not (len(self.choice_list) == len(self.choice_row) == len(self.chose_b) == m):
            raise ValueError("choice arrays differ in length")
        if len(set(self.respondent_ids)) != n:
            raise ValueError("duplicate respondent ids")
        if not np.all(np.isfinite(self.covariates)):
            raise ValueError("covariates contain missing or non-finite values")
        if m and (self.choice_respondent.min() < 0 or self.choice_respondent.max() >= n):
            raise ReferentialError("choice refers to an unknown respondent")
        for list_id in np.unique(self.choice_list) if m else ():
            if list_id not in self.lists:
                raise ReferentialError(f"unknown list_id {list_id!r}")
            rows = {r.index for r in self.lists[list_id].rows}
            bad = set(self.choice_row[self.choice_list == list_id].tolist()) - rows
            if bad:
                raise ReferentialError(f"{list_id} has no row(s) {sorted(bad)}")

    # -- construction -----------------------------------------------------

    @classmethod
    def from_frames(cls, choices: pd.DataFrame, covariates: pd.DataFrame,
                    stake=None, currency=None, lists=None) -> "ChoiceDataset":
        """Build from a long choice frame and a respondent covariate frame.

        ``choices`` needs columns respondent_id, list_id, row and either
        chose_b (bool) or choice ('A'/'B'). ``covariates`` is indexed by
        respondent_id, or has it as a column.
        """
        cov = covariates.set_index("respondent_id") if "respondent_id" in covariates.columns else covariates
        ids = [str(i) for i in cov.index]
        pos = {rid: k for k, rid in enumerate(ids)}
        try:
            resp = np.array([pos[str(r)] for r in choices["respondent_id"]], dtype=np.int64)
        except KeyError as exc:
            raise ReferentialError(f"choice for unknown respondent {exc.args[0]!r}") from None
        if "chose_b" in choices.columns:
            chose_b = choices["chose_b"].astype(bool).to_numpy()
        else:
            chose_b = (choices["choice"].astype(str).str.strip().str.upper() == "B").to_numpy()
        n = len(ids)
        return cls(
            respondent_ids=tuple(ids),
            covariate_names=tuple(str(c) for c in cov.columns),
            covariates=cov.to_numpy(dtype=float).reshape(n, cov.shape[1]),
            stake=np.ones(n) if stake is None else stake,
            currency=np.ones(n) if currency is None else currency,
            choice_respondent=resp,
            choice_list=choices["list_id"].to_numpy(),
            choice_row=choices["row"].to_numpy(),
            chose_b=chose_b,
            lists=standard_lists_by_id() if lists is None else lists,
        )

    # -- basic accessors --------------------------------------------------

    @property
    def n_respondents(self) -> int:
        return len(self.respondent_ids)

    @property
    def n_choices(self) -> int:
        return len(self.chose_b)

    def covariate(self, name: str) -> np.ndarray:
        return self.covariates[:, self.covariate_names.index(name)]

    def covariate_frame(self) -> pd.DataFrame:
        df = pd.DataFrame(self.covariates, columns=list(self.covariate_names))
        df.insert(0, "respondent_id", list(self.respondent_ids))
        return df

    def choice_frame(self) -> pd.DataFrame:
        ids = np.array(self.respondent_ids, dtype=object)
        return pd.DataFrame({
            "respondent_id": ids[self.choice_respondent] if self.n_choices else [],
            "list_id": self.choice_list,
            "row": self.choice_row,
            "choice": np.where(self.chose_b, "B", "A"),
        })

    def choice_matrix(self, list_id: str) -> np.ndarray:
        """(n_respondents, n_rows) int8 matrix: 1 = B, 0 = A, -1 = missing."""
        list_id = normalize_list_id(list_id)
        plist = self.lists[list_id]
        col = {r.index: k for k, r in enumerate(plist.rows)}
        out = np.full((self.n_respondents, len(plist.rows)), -1, dtype=np.int8)
        sel = self.choice_list == list_id
        rows = np.array([col[r] for r in self.choice_row[sel]], dtype=np.int64)
        out[self.choice_respondent[sel], rows] = self.chose_b[sel]
        return out

    # -- derived datasets -------------------------------------------------

    def subset(self, keep: Sequence[bool] | np.ndarray) -> "ChoiceDataset":
        """Keep respondents where ``keep`` is true (with all their choices)."""
        keep = np.asarray(keep, dtype=bool)
        new_index = np.cumsum(keep) - 1
        sel = keep[self.choice_respondent]
        return ChoiceDataset(
            respondent_ids=tuple(r for r, k in zip(self.respondent_ids, keep) if k),
            covariate_names=self.covariate_names,
            covariates=self.covariates[keep],
            stake=self.stake[keep],
            currency=self.currency[keep],
            choice_respondent=new_index[self.choice_respondent[sel]],
            choice_list=self.choice_list[sel],
            choice_row=self.choice_row[sel],
            chose_b=self.chose_b[sel],
            lists=self.lists,
        )

    def restrict_lists(self, list_ids: Iterable[str]) -> "ChoiceDataset":
        ids = {normalize_list_id(x) for x in list_ids}
        sel = np.array([x in ids for x in self.choice_list], dtype=bool)
        return ChoiceDataset(
            self.respondent_ids, self.covariate_names, self.covariates, self.stake, self.currency,
            self.choice_respondent[sel], self.choice_list[sel], self.choice_row[sel],
            self.chose_b[sel], self.lists,
        )

    def with_covariates(self, extra: Mapping[str, np.ndarray]) -> "ChoiceDataset":
        names = self.covariate_names + tuple(extra)
        cols = [self.covariates] + [np.asarray(v, float).reshape(-1, 1) for v in extra.values()]
        return ChoiceDataset(
            self.respondent_ids, names, np.hstack(cols), self.stake, self.currency,
            self.choice_respondent, self.choice_list, self.choice_row, self.chose_b, self.lists,
        )

    def permuted(self, order: Sequence[int]) -> "ChoiceDataset":
        """Same data with respondents listed in ``order``."""
        order = np.asarray(order, dtype=np.int64)
        inverse = np.empty_like(order)
        inverse[order] = np.arange(len(order))
        # choices regrouped so respondents stay contiguous in the new order
        new_resp = inverse[self.choice_respondent]
        idx = np.lexsort((np.arange(self.n_choices), new_resp))
        return ChoiceDataset(
            tuple(self.respondent_ids[i] for i in order), self.covariate_names,
            self.covariates[order], self.stake[order], self.currency[order],
            new_resp[idx], self.choice_list[idx], self.choice_row[idx], self.chose_b[idx],
            self.lists,
        )

    # -- identity ---------------------------------------------------------

    def digest(self) -> str:
        """SHA-256 over a canonical byte layout of the data content."""
        h = hashlib.sha256()

        def put(label: str, payload: bytes):
            h.update(label.encode() + b"\0" + len(payload).to_bytes(8, "little") + payload)

        put("ids", "\x1f".join(self.respondent_ids).encode())
        put("covnames", "\x1f".join(self.covariate_names).encode())
        put("cov", np.ascontiguousarray(self.covariates, dtype="<f8").tobytes())
        put("stake", np.ascontiguousarray(self.stake, dtype="<f8").tobytes())
        put("currency", np.ascontiguousarray(self.currency, dtype="<f8").tobytes())
        put("resp", np.ascontiguousarray(self.choice_respondent, dtype="<i8").tobytes())
        put("list", "\x1f".join(self.choice_list.tolist()).encode())
        put("row", np.ascontiguousarray(self.choice_row, dtype="<i8").tobytes())
        put("b", np.ascontiguousarray(self.chose_b, dtype="u1").tobytes())
        return h.hexdigest()

    def __eq__(self, other) -> bool:
        if not isinstance(other, ChoiceDataset):
            return NotImplemented
        return (
            self.respondent_ids == other.respondent_ids
            and self.covariate_names == other.covariate_names
            and np.array_equal(self.covariates, other.covariates)
            and np.array_equal(self.stake, other.stake)
            and np.array_equal(self.currency, other.currency)
            and np.array_equal(self.choice_respondent, other.choice_respondent)
            and np.array_equal(self.choice_list, other.choice_list)
            and np.array_equal(self.choice_row, other.choice_row)
            and np.array_equal(self.chose_b, other.chose_b)
        )

    __hash__ = None


def measures_frame(dataset: ChoiceDataset, list_ids: Sequence[str] | None = None) -> pd.DataFrame:
    """Per-respondent A-counts, switch points and multiple-switch flags.

    Columns: ``nA_<list>``, ``switch_<list>`` (NaN for multiple switchers),
    ``multi_<list>``, ``complete_<list>``, plus ``multiple_switcher`` (any
    list), ``nA_MPL1`` (sum of both time lists) and ``present_bias_diff``.
    """
    list_ids = [normalize_list_id(x) for x in (list_ids or dataset.lists)]
    out = {"respondent_id": list(dataset.respondent_ids)}
    any_multi = np.zeros(dataset.n_respondents, dtype=bool)
    for lid in list_ids:
        m = dataset.choice_matrix(lid)
        complete = (m >= 0).all(axis=1)
        n_a = (m == 0).sum(axis=1)
        a_to_b = ((m[:, :-1] == 0) & (m[:, 1:] == 1)).sum(axis=1)
        b_to_a = ((m[:, :-1] == 1) & (m[:, 1:] == 0)).sum(axis=1)
        multi = complete & ((a_to_b > 1) | (b_to_a > 0))
        out[f"nA_{lid}"] = n_a
        out[f"switch_{lid}"] = np.where(multi | ~complete, np.nan, n_a)
        out[f"multi_{lid}"] = multi
        out[f"complete_{lid}"] = complete
        any_multi |= multi
    out["multiple_switcher"] = any_multi
    df = pd.DataFrame(out)
    if "MPL1_1" in list_ids and "MPL1_2" in list_ids:
        df["nA_MPL1"] = df["nA_MPL1_1"] + df["nA_MPL1_2"]
        df["present_bias_diff"] = df["nA_MPL1_2"] - df["nA_MPL1_1"]
    return df


__all__ = ["ChoiceDataset", "measures_frame"]
