"""Balanced return panels, factor panels, CSV ingestion and summary statistics.

Returns are decimal fractions everywhere in the package (0.0032 is 0.32% per
month). Percent appears only in reports.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

ASSET_CLASSES = ("equity", "us_bond", "intl_bond", "commodity", "fx", "other")


class PanelError(ValueError):
    """Input panel could not be parsed or failed validation."""


class PanelParseError(PanelError):
    pass


class PanelDimensionError(PanelError):
    pass


class PanelValidationError(PanelError):
    pass


def _check_dates(dates: Sequence[str]) -> None:
    for k in range(1, len(dates)):
        if not dates[k] > dates[k - 1]:
            raise PanelValidationError(
                f"dates not increasing at position {k}: {dates[k - 1]!r} -> {dates[k]!r}"
            )


def _check_unique(names: Sequence[str], what: str) -> None:
    seen = set()
    for name in names:
        if name in seen:
            raise PanelValidationError(f"duplicate {what}: {name!r}")
        seen.add(name)


@dataclass(frozen=True)
class ReturnPanel:
    """N x T matrix of monthly excess returns.

    ``returns[i, t]`` is the return of asset ``asset_ids[i]`` in month
    ``dates[t]``. The array is made read-only on construction.
    """

    dates: tuple
    asset_ids: tuple
    returns: np.ndarray
    asset_class: Optional[tuple] = None

    def __post_init__(self):
        dates = tuple(str(d) for d in self.dates)
        ids = tuple(str(a) for a in self.asset_ids)
        r = np.array(self.returns, dtype=float, copy=True)
        if r.ndim != 2:
            raise PanelDimensionError("returns must be a 2-D array")
        if r.shape != (len(ids), len(dates)):
            raise PanelDimensionError(
                f"returns shape {r.shape} does not match {len(ids)} assets x {len(dates)} dates"
            )
        if len(ids) < 2 or len(dates) < 2:
            raise PanelValidationError("panel needs at least 2 assets and 2 months")
        if not np.all(np.isfinite(r)):
            i, t = np.argwhere(~np.isfinite(r))[0]
            raise PanelValidationError(
                f"missing or non-finite cell at date {dates[t]!r} (row {t + 1}), asset {ids[i]!r}"
            )
        _check_dates(dates)
        _check_unique(ids, "asset id")
        classes = self.asset_class
        if classes is not None:
            classes = tuple(classes)
            if len(classes) != len(ids):
                raise PanelDimensionError("asset_class length differs from asset count")
            bad = [c for c in classes if c not in ASSET_CLASSES]
            if bad:
                raise PanelValidationError(f"unknown asset class {bad[0]!r}")
        r.setflags(write=False)
        object.__setattr__(self, "dates", dates)
        object.__setattr__(self, "asset_ids", ids)
        object.__setattr__(self, "returns", r)
        object.__setattr__(self, "asset_class", classes)

    @property
    def n_assets(self) -> int:
        return self.returns.shape[0]

    @property
    def n_months(self) -> int:
        return self.returns.shape[1]

    def window(self, end: int, start: int = 0) -> "ReturnPanel":
        """Months ``start`` (inclusive) to ``end`` (exclusive)."""
        return ReturnPanel(self.dates[start:end], self.asset_ids,
                           self.returns[:, start:end], self.asset_class)

    def subset(self, idx) -> "ReturnPanel":
        idx = np.asarray(idx)
        classes = None if self.asset_class is None else [self.asset_class[i] for i in idx]
        return ReturnPanel(self.dates, [self.asset_ids[i] for i in idx],
                           self.returns[idx], classes)

    def scaled(self, c: float) -> "ReturnPanel":
        return ReturnPanel(self.dates, self.asset_ids, c * self.returns, self.asset_class)


@dataclass(frozen=True)
class FactorPanel:
    """M x T matrix of factor realizations."""

    dates: tuple
    factor_names: tuple
    values: np.ndarray

    def __post_init__(self):
        dates = tuple(str(d) for d in self.dates)
        names = tuple(str(n) for n in self.factor_names)
        v = np.array(self.values, dtype=float, copy=True)
        if v.ndim == 1:
            v = v[None, :]
        if v.shape != (len(names), len(dates)):
            raise PanelDimensionError(
                f"values shape {v.shape} does not match {len(names)} factors x {len(dates)} dates"
            )
        if not np.all(np.isfinite(v)):
            m, t = np.argwhere(~np.isfinite(v))[0]
            raise PanelValidationError(
                f"missing or non-finite cell at date {dates[t]!r} (row {t + 1}), factor {names[m]!r}"
            )
        _check_dates(dates)
        _check_unique(names, "factor name")
        v.setflags(write=False)
        object.__setattr__(self, "dates", dates)
        object.__setattr__(self, "factor_names", names)
        object.__setattr__(self, "values", v)

    def aligned_to(self, panel: ReturnPanel) -> "FactorPanel":
        """Check the dates match ``panel`` exactly and return self."""
        if self.dates != panel.dates:
            raise PanelValidationError("factor dates do not match the return panel dates")
        return self

    def window(self, end: int, start: int = 0) -> "FactorPanel":
        return FactorPanel(self.dates[start:end], self.factor_names, self.values[:, start:end])

    def select(self, names: Sequence[str]) -> "FactorPanel":
        pos = {n: k for k, n in enumerate(self.factor_names)}
        missing = [n for n in names if n not in pos]
        if missing:
            raise PanelValidationError(f"unknown factor {missing[0]!r}")
        return FactorPanel(self.dates, names, self.values[[pos[n] for n in names]])


@dataclass
class PanelSummary:
    """Per-group means and average asset standard deviations, in percent."""

    groups: list
    mean_pct: dict
    std_pct: dict
    n_assets: dict
    n_months: int
    std_ddof: int = 1
    meta: dict = field(default_factory=dict)

    def rows(self):
        for g in self.groups:
            yield g, self.mean_pct[g], self.std_pct[g], self.n_assets[g]


# -- CSV I/O -----------------------------------------------------------------

def _read_matrix_csv(path) -> tuple[list, list, np.ndarray]:
    path = Path(path)
    with path.open(newline="") as fh:
        rows = list(csv.reader(fh))
    rows = [r for r in rows if r and any(c.strip() for c in r)]
    if not rows:
        raise PanelParseError(f"{path}: empty file")
    header = [c.strip() for c in rows[0]]
    if header[0].lower() != "date":
        raise PanelParseError(f"{path}: first header cell must be 'date', got {header[0]!r}")
    names = header[1:]
    if not names:
        raise PanelParseError(f"{path}: no data columns")
    dates, data = [], []
    for lineno, row in enumerate(rows[1:], start=2):
        if len(row) != len(header):
            raise PanelDimensionError(
                f"{path}: line {lineno} has {len(row)} cells, header has {len(header)}"
            )
        dates.append(row[0].strip())
        vals = []
        for col, cell in zip(names, row[1:]):
            cell = cell.strip()
            if cell == "":
                raise PanelValidationError(
                    f"{path}: missing cell at line {lineno} (date {row[0].strip()!r}), column {col!r}"
                )
            try:
                vals.append(float(cell))
            except ValueError:
                raise PanelParseError(
                    f"{path}: cannot parse {cell!r} at line {lineno}, column {col!r}"
                ) from None
        data.append(vals)
    return dates, names, np.array(data, dtype=float).reshape(len(dates), len(names))


def load_panel(path, classes_path=None) -> ReturnPanel:
    """Read a panel CSV (``date`` column, one column per asset).

    An optional sidecar JSON maps asset id to asset class; assets it does not
    mention are labelled ``other``.
    """
    dates, ids, mat = _read_matrix_csv(path)
    classes = None
    if classes_path is not None:
        mapping = json.loads(Path(classes_path).read_text())
        classes = [mapping.get(a, "other") for a in ids]
    return ReturnPanel(dates, ids, mat.T, classes)


def load_factors(path) -> FactorPanel:
    dates, names, mat = _read_matrix_csv(path)
    return FactorPanel(dates, names, mat.T)


def _fmt(x: float) -> str:
    return repr(float(x))


def _write_matrix_csv(path, dates, names, mat_t) -> None:
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["date", *names])
        for d, row in zip(dates, mat_t):
            w.writerow([d, *(_fmt(v) for v in row)])


def write_panel(panel: ReturnPanel, path, classes_path=None) -> None:
    """Write ``panel`` as CSV using shortest round-trip float repr."""
    _write_matrix_csv(path, panel.dates, panel.asset_ids, panel.returns.T)
    if classes_path is not None and panel.asset_class is not None:
        Path(classes_path).write_text(
            json.dumps(dict(zip(panel.asset_ids, panel.asset_class)), indent=2) + "\n"
        )


def write_factors(factors: FactorPanel, path) -> None:
    _write_matrix_csv(path, factors.dates, factors.factor_names, factors.values.T)


# -- statistics ----------------------------------------------------------------

_GROUP_LABELS = {
    "equity": "Equities", "us_bond": "US Bonds", "intl_bond": "Intl Bonds",
    "commodity": "Commodities", "fx": "FX", "other": "Other",
}


def cross_section_means(panel: ReturnPanel) -> np.ndarray:
    """Time-series mean return of each asset."""
    return panel.returns.mean(axis=1)


def summarize(panel: ReturnPanel, ddof: int = 1) -> PanelSummary:
    """Summary table: per group, the cross-asset average of each
    asset's mean return and of each asset's return standard deviation.

    ``ddof=1`` (sample standard deviation) is the default; pass ``ddof=0`` for
    the population convention. The choice is echoed in ``std_ddof``.
    """
    r = panel.returns
    means = r.mean(axis=1) * 100.0
    stds = r.std(axis=1, ddof=ddof) * 100.0
    groups = ["All"]
    members = {"All": np.arange(panel.n_assets)}
    if panel.asset_class is not None:
        labels = np.array(panel.asset_class)
        for cls in ASSET_CLASSES:
            idx = np.flatnonzero(labels == cls)
            if idx.size:
                groups.append(_GROUP_LABELS[cls])
                members[_GROUP_LABELS[cls]] = idx
    return PanelSummary(
        groups=groups,
        mean_pct={g: float(np.mean(means[members[g]])) for g in groups},
        std_pct={g: float(np.mean(stds[members[g]])) for g in groups},
        n_assets={g: int(members[g].size) for g in groups},
        n_months=panel.n_months,
        std_ddof=ddof,
        meta={"units": "percent per month", "std_denominator": "T-1" if ddof == 1 else "T"},
    )


def returns_rms(panel: ReturnPanel) -> float:
    return float(math.sqrt(np.mean(panel.returns ** 2)))
