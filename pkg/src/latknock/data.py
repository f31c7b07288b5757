"""Data ingestion and missingness summaries for mixed-type predictors.

Predictors live in a ``MixedDataset``: an N x p value matrix (floats for
continuous variables, integer codes 0..K for binary/ordinal), an observed-cell
mask, and per-variable metadata.  Item responses use ``ResponseData`` with an
administered-item mask, and fixed item parameters live in an ``ItemBank``.

The module also provides the mixed correlation matrix (Pearson / polyserial /
polychoric, two-step pairwise maximum likelihood) used to initialise the
copula fit.
"""

from __future__ import annotations

import csv
import json
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.optimize import minimize_scalar
from scipy.stats import spearmanr

from ._normal import bvn_rect_prob, interval_prob, nearest_psd_correlation, norm_ppf
from .errors import DataError

KINDS = ("continuous", "binary", "ordinal")
_MISSING_TOKENS = {"", "na"}
_THRESHOLD_CLAMP = 8.0


@dataclass(frozen=True)
class VariableMeta:
    """Name, kind and (for discrete variables) number of categories."""

    name: str
    kind: str
    n_categories: int | None = None

    def __post_init__(self):
        if self.kind not in KINDS:
            raise DataError(f"variable {self.name!r}: unknown kind {self.kind!r}")
        if self.kind == "continuous":
            if self.n_categories is not None:
                raise DataError(f"variable {self.name!r}: continuous variables take no n_categories")
        elif self.kind == "binary":
            if self.n_categories not in (None, 2):
                raise DataError(f"variable {self.name!r}: binary implies n_categories = 2")
            object.__setattr__(self, "n_categories", 2)
        else:
            if self.n_categories is None or self.n_categories < 3:
                raise DataError(f"variable {self.name!r}: ordinal requires n_categories >= 3")

    @property
    def is_discrete(self) -> bool:
        return self.kind != "continuous"

    @property
    def n_thresholds(self) -> int:
        """K_j: number of interior thresholds (categories minus one)."""
        return 0 if self.n_categories is None else self.n_categories - 1


@dataclass
class MixedDataset:
    """N x p mixed-type predictor matrix with an observed-cell mask.

    ``values[i, j]`` is meaningful only where ``observed_mask[i, j]``; masked
    cells hold NaN.  Discrete codes are stored as floats but are always whole
    numbers in 0..K_j.
    """

    values: np.ndarray
    observed_mask: np.ndarray
    meta: list[VariableMeta]

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        self.observed_mask = np.asarray(self.observed_mask, dtype=bool)
        if self.values.shape != self.observed_mask.shape:
            raise DataError("values and observed_mask shapes differ")
        if self.values.ndim != 2 or self.values.shape[1] != len(self.meta):
            raise DataError("values must be N x p with p matching metadata")
        names = [m.name for m in self.meta]
        if len(set(names)) != len(names):
            raise DataError("variable names must be unique")
        self.values = self.values.copy()
        self.values[~self.observed_mask] = np.nan
        for j, m in enumerate(self.meta):
            col = self.values[self.observed_mask[:, j], j]
            if not np.all(np.isfinite(col)):
                raise DataError(f"variable {m.name!r}: non-finite observed value")
            if m.is_discrete:
                if not np.all(col == np.round(col)):
                    raise DataError(f"variable {m.name!r}: non-integer category code")
                bad = (col < 0) | (col > m.n_categories - 1)
                if np.any(bad):
                    raise DataError(
                        f"variable {m.name!r}: category code out of range 0..{m.n_categories - 1}"
                    )
        empty = ~self.observed_mask.any(axis=1)
        if np.any(empty):
            raise DataError(f"row {int(np.flatnonzero(empty)[0])} has no observed entries")

    @property
    def n_rows(self) -> int:
        return self.values.shape[0]

    @property
    def n_vars(self) -> int:
        return self.values.shape[1]

    @property
    def names(self) -> list[str]:
        return [m.name for m in self.meta]


@dataclass(frozen=True)
class Item:
    """One cognitive item with fixed parameters."""

    id: str
    model: str  # "2PL" or "GPCM"
    a: float
    b: tuple[float, ...]

    def __post_init__(self):
        if self.model not in ("2PL", "GPCM"):
            raise DataError(f"item {self.id!r}: unknown model {self.model!r}")
        if not math.isfinite(self.a) or not all(math.isfinite(v) for v in self.b):
            raise DataError(f"item {self.id!r}: non-finite parameter")
        if self.model == "2PL" and len(self.b) != 1:
            raise DataError(f"item {self.id!r}: 2PL takes exactly one b value")
        if self.model == "GPCM" and len(self.b) < 2:
            raise DataError(f"item {self.id!r}: GPCM needs >= 2 b values (use 2PL otherwise)")

    @property
    def n_categories(self) -> int:
        return len(self.b) + 1


@dataclass
class ItemBank:
    items: list[Item]

    def __post_init__(self):
        ids = [it.id for it in self.items]
        if len(set(ids)) != len(ids):
            raise DataError("item ids must be unique")

    def __len__(self) -> int:
        return len(self.items)

    @property
    def ids(self) -> list[str]:
        return [it.id for it in self.items]


@dataclass
class ResponseData:
    """N x J response codes with an administered-item mask."""

    codes: np.ndarray
    administered_mask: np.ndarray

    def __post_init__(self):
        self.codes = np.asarray(self.codes, dtype=np.int64)
        self.administered_mask = np.asarray(self.administered_mask, dtype=bool)
        if self.codes.shape != self.administered_mask.shape:
            raise DataError("codes and administered_mask shapes differ")

    def validate_against(self, bank: ItemBank) -> None:
        if self.codes.shape[1] != len(bank):
            raise DataError("response columns do not match item bank size")
        for j, item in enumerate(bank.items):
            col = self.codes[self.administered_mask[:, j], j]
            if col.size and (col.min() < 0 or col.max() > item.n_categories - 1):
                raise DataError(
                    f"item {item.id!r}: response code out of range 0..{item.n_categories - 1}"
                )

    @property
    def n_rows(self) -> int:
        return self.codes.shape[0]


def _parse_cell(token: str, meta: VariableMeta, row: int) -> tuple[float, bool]:
    stripped = token.strip()
    if stripped.lower() in _MISSING_TOKENS:
        return np.nan, False
    try:
        val = float(stripped)
    except ValueError as exc:
        raise DataError(f"column {meta.name!r}, row {row}: cannot parse {token!r}") from exc
    if meta.is_discrete:
        if val != round(val) or not (0 <= val <= meta.n_categories - 1):
            raise DataError(
                f"column {meta.name!r}, row {row}: code {token!r} outside 0..{meta.n_categories - 1}"
            )
    return val, True


def load_meta(meta_path: str | Path) -> list[VariableMeta]:
    """Read variable metadata JSON: [{"name","kind","n_categories"?}, ...]."""
    with open(meta_path, encoding="utf-8") as fh:
        raw = json.load(fh)
    metas = []
    for entry in raw:
        metas.append(
            VariableMeta(
                name=entry["name"],
                kind=entry["kind"],
                n_categories=entry.get("n_categories"),
            )
        )
    if not metas:
        raise DataError(f"{meta_path}: empty metadata")
    return metas


def save_meta(meta: list[VariableMeta], meta_path: str | Path) -> None:
    payload = []
    for m in meta:
        entry: dict = {"name": m.name, "kind": m.kind}
        if m.n_categories is not None:
            entry["n_categories"] = m.n_categories
        payload.append(entry)
    Path(meta_path).write_text(json.dumps(payload, indent=2) + "\n", encoding="utf-8")


def load_predictors(
    csv_path: str | Path,
    meta_path: str | Path,
    merge_below: float | None = None,
) -> MixedDataset:
    """Load a predictor CSV (header row, "" or "NA" for missing) plus metadata.

    ``merge_below`` applies adjacent-category merging to ordinal variables
    whose sparsest category falls below that observed fraction.
    """
    meta = load_meta(meta_path)
    by_name = {m.name: m for m in meta}
    with open(csv_path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise DataError(f"{csv_path}: no rows") from None
        header = [h.strip() for h in header]
        unknown = [h for h in header if h not in by_name]
        if unknown:
            raise DataError(f"{csv_path}: unknown column {unknown[0]!r}")
        missing_cols = [m.name for m in meta if m.name not in header]
        if missing_cols:
            raise DataError(f"{csv_path}: column {missing_cols[0]!r} absent from header")
        col_of = {name: header.index(name) for name in by_name}
        rows = []
        masks = []
        for r, record in enumerate(reader):
            if len(record) != len(header):
                raise DataError(f"{csv_path}: row {r} has {len(record)} fields, expected {len(header)}")
            vals = np.empty(len(meta))
            obs = np.empty(len(meta), dtype=bool)
            for j, m in enumerate(meta):
                vals[j], obs[j] = _parse_cell(record[col_of[m.name]], m, r)
            if not obs.any():
                raise DataError(f"{csv_path}: row {r} is entirely missing")
            rows.append(vals)
            masks.append(obs)
    if not rows:
        raise DataError(f"{csv_path}: no rows")
    ds = MixedDataset(np.array(rows), np.array(masks), meta)
    if merge_below is not None:
        ds = merge_sparse_categories(ds, merge_below)
    return ds


def save_predictors(ds: MixedDataset, csv_path: str | Path, meta_path: str | Path) -> None:
    """Write a dataset back to CSV + metadata JSON (missing cells as "NA")."""
    with open(csv_path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(ds.names)
        for i in range(ds.n_rows):
            row = []
            for j, m in enumerate(ds.meta):
                if not ds.observed_mask[i, j]:
                    row.append("NA")
                elif m.is_discrete:
                    row.append(str(int(ds.values[i, j])))
                else:
                    row.append(repr(float(ds.values[i, j])))
            writer.writerow(row)
    save_meta(ds.meta, meta_path)


def merge_sparse_categories(ds: MixedDataset, min_frac: float) -> MixedDataset:
    """Merge ordinal categories observed less often than ``min_frac`` into a neighbour."""
    if not 0 < min_frac < 1:
        raise DataError("merge_below fraction must lie in (0, 1)")
    values = ds.values.copy()
    new_meta = []
    for j, m in enumerate(ds.meta):
        if m.kind != "ordinal":
            new_meta.append(m)
            continue
        col = values[ds.observed_mask[:, j], j].astype(int)
        counts = np.bincount(col, minlength=m.n_categories).astype(float)
        labels = list(range(m.n_categories))
        while len(labels) > 2:
            frac = counts / max(counts.sum(), 1.0)
            k = int(np.argmin(frac))
            if frac[k] >= min_frac:
                break
            if k == 0:
                neighbour = 1
            elif k == len(labels) - 1:
                neighbour = k - 1
            else:
                neighbour = k - 1 if counts[k - 1] <= counts[k + 1] else k + 1
            counts[neighbour] += counts[k]
            counts = np.delete(counts, k)
            labels.pop(k)
        recode = np.zeros(m.n_categories, dtype=int)
        for new_code, old in enumerate(labels):
            recode[old] = new_code
        # categories dropped between kept labels collapse onto the kept label below
        kept = np.array(labels)
        for old in range(m.n_categories):
            if old not in labels:
                below = kept[kept < old]
                recode[old] = recode[below.max()] if below.size else 0
        obs = ds.observed_mask[:, j]
        values[obs, j] = recode[values[obs, j].astype(int)]
        k_new = len(labels)
        kind = "ordinal" if k_new >= 3 else "binary"
        new_meta.append(VariableMeta(m.name, kind, k_new))
    return MixedDataset(values, ds.observed_mask.copy(), new_meta)


def load_item_bank(path: str | Path) -> ItemBank:
    with open(path, encoding="utf-8") as fh:
        raw = json.load(fh)
    items = [
        Item(id=str(e["id"]), model=e["model"], a=float(e["a"]), b=tuple(float(v) for v in e["b"]))
        for e in raw
    ]
    if not items:
        raise DataError(f"{path}: empty item bank")
    return ItemBank(items)


def save_item_bank(bank: ItemBank, path: str | Path) -> None:
    payload = [{"id": it.id, "model": it.model, "a": it.a, "b": list(it.b)} for it in bank.items]
    Path(path).write_text(json.dumps(payload, indent=2) + "\n", encoding="utf-8")


def load_responses(path: str | Path, bank: ItemBank) -> ResponseData:
    """Response CSV keyed by item id header; "NA" marks non-administered items."""
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise DataError(f"{path}: no rows") from None
        if header != bank.ids:
            raise DataError(f"{path}: header does not match item bank ids")
        codes = []
        masks = []
        for r, record in enumerate(reader):
            if len(record) != len(header):
                raise DataError(f"{path}: row {r} has {len(record)} fields")
            c = np.zeros(len(header), dtype=np.int64)
            m = np.zeros(len(header), dtype=bool)
            for j, token in enumerate(record):
                tok = token.strip()
                if tok.lower() in _MISSING_TOKENS:
                    continue
                c[j] = int(tok)
                m[j] = True
            codes.append(c)
            masks.append(m)
    if not codes:
        raise DataError(f"{path}: no rows")
    resp = ResponseData(np.array(codes), np.array(masks))
    resp.validate_against(bank)
    return resp


def save_responses(resp: ResponseData, bank: ItemBank, path: str | Path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(bank.ids)
        for i in range(resp.n_rows):
            writer.writerow(
                [
                    str(int(resp.codes[i, j])) if resp.administered_mask[i, j] else "NA"
                    for j in range(len(bank))
                ]
            )


def summarize_missingness(ds: MixedDataset) -> dict:
    """Per-variable missing rates plus the fraction of fully observed rows."""
    miss = ~ds.observed_mask
    return {
        "per_variable_rates": miss.mean(axis=0),
        "complete_row_fraction": float((~miss.any(axis=1)).mean()),
        "overall_rate": float(miss.mean()),
    }


def _marginal_thresholds(codes: np.ndarray, n_categories: int) -> np.ndarray:
    """Phi^-1 of observed cumulative frequencies, clamped and strictly increasing."""
    counts = np.bincount(codes.astype(int), minlength=n_categories).astype(float)
    cum = np.cumsum(counts)[:-1] / counts.sum()
    cum = np.clip(cum, 1e-7, 1.0 - 1e-7)
    thr = np.clip(norm_ppf(cum), -_THRESHOLD_CLAMP, _THRESHOLD_CLAMP)
    for k in range(1, thr.size):
        if thr[k] <= thr[k - 1]:
            thr[k] = thr[k - 1] + 1e-6
    return thr


def _polyserial_rho(x_std: np.ndarray, codes: np.ndarray, thr: np.ndarray) -> tuple[float, bool]:
    """Two-step polyserial: thresholds fixed, 1-D likelihood maximisation over rho."""
    edges = np.concatenate(([-np.inf], thr, [np.inf]))
    lo = edges[codes]
    hi = edges[codes + 1]

    def negloglik(rho):
        s = math.sqrt(1.0 - rho * rho)
        a = (lo - rho * x_std) / s
        b = (hi - rho * x_std) / s
        return -np.sum(np.log(interval_prob(a, b)))

    res = minimize_scalar(negloglik, bounds=(-0.999, 0.999), method="bounded",
                          options={"xatol": 1e-6})
    ok = bool(res.success) and math.isfinite(res.fun)
    return float(res.x), ok


def _polychoric_rho(
    codes_a: np.ndarray, codes_b: np.ndarray, thr_a: np.ndarray, thr_b: np.ndarray
) -> tuple[float, bool]:
    """Two-step polychoric: contingency-table likelihood maximised over rho."""
    ka = thr_a.size + 1
    kb = thr_b.size + 1
    table = np.zeros((ka, kb))
    np.add.at(table, (codes_a.astype(int), codes_b.astype(int)), 1.0)
    ea = np.concatenate(([-np.inf], thr_a, [np.inf]))
    eb = np.concatenate(([-np.inf], thr_b, [np.inf]))
    cells = [(a, b) for a in range(ka) for b in range(kb) if table[a, b] > 0]

    def negloglik(rho):
        total = 0.0
        for a, b in cells:
            pr = bvn_rect_prob(ea[a], ea[a + 1], eb[b], eb[b + 1], rho)
            total += table[a, b] * math.log(max(float(pr), 1e-300))
        return -total

    res = minimize_scalar(negloglik, bounds=(-0.999, 0.999), method="bounded",
                          options={"xatol": 1e-6})
    ok = bool(res.success) and math.isfinite(res.fun)
    return float(res.x), ok


def _spearman_fallback(x: np.ndarray, y: np.ndarray) -> float:
    rho_s = spearmanr(x, y).statistic
    if not math.isfinite(rho_s):
        return 0.0
    return float(np.clip(2.0 * math.sin(math.pi * rho_s / 6.0), -0.999, 0.999))


def empirical_mixed_correlation(ds: MixedDataset, min_overlap: int = 30) -> np.ndarray:
    """Pairwise mixed correlations projected to the nearest PSD correlation matrix.

    Pearson for continuous pairs, polyserial for continuous-discrete and
    polychoric/tetrachoric for discrete pairs, each estimated in two steps:
    marginal thresholds from observed frequencies, then a 1-D pairwise
    likelihood maximisation.  Pairs whose optimisation fails fall back to the
    Spearman-based estimate 2 sin(pi * rho_S / 6), with a warning.
    """
    p = ds.n_vars
    thr = {}
    std = {}
    for j, m in enumerate(ds.meta):
        col = ds.values[ds.observed_mask[:, j], j]
        if m.is_discrete:
            thr[j] = _marginal_thresholds(col, m.n_categories)
        else:
            mu = col.mean()
            sd = col.std(ddof=1) if col.size > 1 else 1.0
            std[j] = (mu, sd if sd > 0 else 1.0)
    corr = np.eye(p)
    for j in range(p):
        for k in range(j + 1, p):
            both = ds.observed_mask[:, j] & ds.observed_mask[:, k]
            n_both = int(both.sum())
            if n_both < min_overlap:
                raise DataError(
                    f"pair ({ds.meta[j].name!r}, {ds.meta[k].name!r}): only {n_both} jointly "
                    f"observed rows (< {min_overlap})"
                )
            xj = ds.values[both, j]
            xk = ds.values[both, k]
            dj = ds.meta[j].is_discrete
            dk = ds.meta[k].is_discrete
            if not dj and not dk:
                r = float(np.corrcoef(xj, xk)[0, 1])
                ok = math.isfinite(r)
            elif dj and dk:
                r, ok = _polychoric_rho(xj, xk, thr[j], thr[k])
            else:
                if dj:
                    cont, disc, t = xk, xj, thr[j]
                    mu, sd = std[k]
                else:
                    cont, disc, t = xj, xk, thr[k]
                    mu, sd = std[j]
                r, ok = _polyserial_rho((cont - mu) / sd, disc.astype(int), t)
            if not ok:
                r = _spearman_fallback(xj, xk)
                warnings.warn(
                    f"pair ({ds.meta[j].name!r}, {ds.meta[k].name!r}): pairwise likelihood "
                    "did not converge; using Spearman-based estimate",
                    stacklevel=2,
                )
            corr[j, k] = corr[k, j] = r
    return nearest_psd_correlation(corr)
