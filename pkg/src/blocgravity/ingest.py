"""Harmonise collected bilateral trade data into a panel.

The pipeline mirrors the usual direction-of-trade conventions: values are
converted to US dollars and then pounds sterling, f.o.b. imports are uplifted
to c.i.f., importer reports take precedence over exporter reports, totals-only
reports fill a missing direction by subtraction (or are split in half into a
separate imputed channel), and domestic trade is GDP less total exports.
"""

from __future__ import annotations

import csv
import logging
import math
from collections import Counter
from dataclasses import asdict, dataclass, field
from enum import Enum
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np
import pandas as pd

from ._validation import ConfigurationError, ConversionError, ExtrapolationError, MergeError
from .datamodel import PANEL_COLUMNS

logger = logging.getLogger(__name__)

__all__ = [
    "Valuation",
    "Direction",
    "RawFlow",
    "ExchangeRateTable",
    "Diagnostic",
    "IngestResult",
    "convert_currency",
    "cif_adjust",
    "latest_editions",
    "merge_sources",
    "impute_from_totals",
    "build_domestic",
    "extrapolate_gdp_trend",
    "harmonize",
    "read_raw_flows",
]

DEFAULT_CIF_FACTOR = 0.10
DOMESTIC_SOURCE = "DOMESTIC"
IMPUTED_SOURCE = "IMPUTED"


class Valuation(str, Enum):
    FOB = "FOB"
    CIF = "CIF"


class Direction(str, Enum):
    BY_IMPORTER = "ByImporter"
    BY_EXPORTER = "ByExporter"
    TOTAL_ONLY = "TotalOnly"


@dataclass(frozen=True)
class RawFlow:
    """One collected observation in its source currency.

    For ``TotalOnly`` rows ``value`` is the undirected sum of both directions.
    """

    exporter: str
    importer: str
    year: int
    value: float
    currency: str
    valuation: Valuation = Valuation.FOB
    direction: Direction = Direction.BY_IMPORTER
    source: str = ""
    edition: int = 0

    def __post_init__(self):
        if not (math.isfinite(self.value) and self.value >= 0):
            raise ValueError(f"raw value must be finite and non-negative, got {self.value!r}")
        object.__setattr__(self, "valuation", Valuation(self.valuation))
        object.__setattr__(self, "direction", Direction(self.direction))
        object.__setattr__(self, "year", int(self.year))


@dataclass(frozen=True)
class ExchangeRateTable:
    """``to_usd[(currency, year)]`` is local units per US dollar;
    ``usd_to_gbp[year]`` is pounds per US dollar."""

    to_usd: Mapping[tuple[str, int], float]
    usd_to_gbp: Mapping[int, float]

    def __post_init__(self):
        for key, r in list(self.to_usd.items()) + list(self.usd_to_gbp.items()):
            if not (math.isfinite(r) and r > 0):
                raise ConfigurationError(f"exchange rate for {key} must be positive, got {r!r}")

    def local_per_usd(self, currency: str, year: int) -> float:
        if currency == "USD":
            return 1.0
        if (currency, year) in self.to_usd:
            return self.to_usd[(currency, year)]
        if currency == "GBP" and year in self.usd_to_gbp:
            return self.usd_to_gbp[year]
        raise ConversionError(f"no exchange rate for ({currency}, {year})")

    def gbp_per_usd(self, year: int) -> float:
        if year not in self.usd_to_gbp:
            raise ConversionError(f"no exchange rate for (USD->GBP, {year})")
        return self.usd_to_gbp[year]

    @classmethod
    def from_csv(cls, rates_path, gbp_path) -> "ExchangeRateTable":
        """Read ``currency,year,rate_to_usd`` and ``year,usd_to_gbp`` files."""
        rates = pd.read_csv(rates_path, dtype={"currency": str})
        gbp = pd.read_csv(gbp_path)
        to_usd = {(c, int(y)): float(r) for c, y, r in zip(rates["currency"], rates["year"], rates["rate_to_usd"])}
        return cls(to_usd, {int(y): float(r) for y, r in zip(gbp["year"], gbp["usd_to_gbp"])})


@dataclass(frozen=True)
class Diagnostic:
    kind: str
    message: str
    exporter: str = ""
    importer: str = ""
    year: int | None = None

    def as_dict(self) -> dict:
        return asdict(self)


def convert_currency(flow: RawFlow, rates: ExchangeRateTable) -> float:
    """Value of ``flow`` in pounds sterling via US dollars."""
    return flow.value / rates.local_per_usd(flow.currency, flow.year) * rates.gbp_per_usd(flow.year)


def cif_adjust(value_fob: float, factor: float = DEFAULT_CIF_FACTOR) -> float:
    if factor < 0 or not math.isfinite(factor):
        raise ConfigurationError(f"c.i.f. factor must be non-negative, got {factor!r}")
    if value_fob < 0:
        raise ValueError("value must be non-negative")
    return value_fob * (1.0 + factor)


def latest_editions(flows: Iterable[RawFlow]) -> list[RawFlow]:
    """Keep the latest edition of every ``(exporter, importer, year, direction)`` cell.

    Two rows of the same edition that disagree raise :class:`MergeError`.
    """
    best: dict[tuple, RawFlow] = {}
    for f in flows:
        key = (f.exporter, f.importer, f.year, f.direction)
        cur = best.get(key)
        if cur is None or f.edition > cur.edition:
            best[key] = f
        elif f.edition == cur.edition and (f.value, f.currency, f.valuation) != (cur.value, cur.currency,
                                                                                 cur.valuation):
            raise MergeError(f"conflicting rows for {key} in edition {f.edition}")
    return [best[k] for k in sorted(best, key=lambda k: (k[2], k[0], k[1], k[3].value))]


def _as_records(base) -> pd.DataFrame:
    if base is None:
        return pd.DataFrame({c: pd.Series(dtype=t) for c, t in
                             zip(PANEL_COLUMNS, (object, object, np.int64, float, object))})
    if hasattr(base, "records"):
        base = base.records
    return base[PANEL_COLUMNS].copy()


def merge_sources(base, collected: Sequence[dict], diagnostics: list | None = None) -> pd.DataFrame:
    """Overlay converted collected flows on the base records.

    ``collected`` items carry ``exporter, importer, year, value, direction,
    source`` with values already converted and c.i.f.-adjusted. Importer
    reports overwrite the base cell, exporter reports only fill cells that are
    missing or zero, and an importer report wins over an exporter report for
    the same cell. A zero importer report never wipes out a positive base value.
    """
    rec = _as_records(base)
    cells: dict[tuple, dict] = {}
    for k, row in enumerate(rec.itertuples(index=False)):
        cells[(row.exporter, row.importer, int(row.year))] = {"value": float(row.value), "source": row.source}

    seen: dict[tuple, dict] = {}
    for c in collected:
        key = (c["exporter"], c["importer"], int(c["year"]), Direction(c["direction"]))
        if key in seen and seen[key]["value"] != c["value"]:
            raise MergeError(f"conflicting collected rows for {key[:3]} ({key[3].value})")
        seen[key] = c

    importer_cells = set()
    for direction in (Direction.BY_IMPORTER, Direction.BY_EXPORTER):
        for key, c in seen.items():
            if key[3] is not direction:
                continue
            cell = key[:3]
            cur = cells.get(cell)
            v = float(c["value"])
            if direction is Direction.BY_IMPORTER:
                importer_cells.add(cell)
                replace = v > 0 or cur is None
            else:
                replace = cell not in importer_cells and v > 0 and (cur is None or cur["value"] == 0)
            if replace:
                cells[cell] = {"value": v, "source": c["source"]}
            elif diagnostics is not None and direction is Direction.BY_EXPORTER and v > 0:
                diagnostics.append(Diagnostic("exporter_report_ignored", "cell already has a positive value",
                                              *cell))
    out = pd.DataFrame(
        [(e, i, t, d["value"], d["source"]) for (e, i, t), d in cells.items()], columns=PANEL_COLUMNS
    )
    return _sorted(out)


def _sorted(frame: pd.DataFrame) -> pd.DataFrame:
    frame = frame.astype({"year": np.int64, "value": float})
    return frame.sort_values(["year", "exporter", "importer"], kind="mergesort").reset_index(drop=True)


def impute_from_totals(total: dict, base, diagnostics: list | None = None):
    """Directed records implied by a totals-only report.

    Returns ``(records, imputed)``: lists of ``(exporter, importer, year,
    value, source)``. If exactly one direction is available (present and
    positive) the other is the total less that value, floored at zero; if
    neither is, both directions get half the total in the imputed channel.
    """
    rec = _as_records(base)
    a, b, t, v = total["exporter"], total["importer"], int(total["year"]), float(total["value"])
    if v < 0:
        raise ValueError("total must be non-negative")
    lookup = {(e, i, int(y)): float(x) for e, i, y, x in zip(rec["exporter"], rec["importer"], rec["year"],
                                                            rec["value"])}
    ab, ba = lookup.get((a, b, t), 0.0), lookup.get((b, a, t), 0.0)
    if ab > 0 and ba > 0:
        return [], []
    if ab > 0 or ba > 0:
        have, (src, dst) = (ab, (b, a)) if ab > 0 else (ba, (a, b))
        missing = v - have
        if missing < 0:
            if diagnostics is not None:
                diagnostics.append(Diagnostic(
                    "total_below_direction",
                    f"reported total {v!r} is below the opposite-direction value {have!r}; floored at 0",
                    src, dst, t))
            missing = 0.0
        return [(src, dst, t, missing, total["source"])], []
    half = v / 2.0
    return [], [(a, b, t, half, IMPUTED_SOURCE), (b, a, t, half, IMPUTED_SOURCE)]


def extrapolate_gdp_trend(series: Iterable[tuple[int, float]], target_years: Sequence[int]) -> np.ndarray:
    """Fitted values of a least-squares regression of log GDP on a linear trend."""
    pts = [(float(t), float(g)) for t, g in series]
    if len(pts) < 2:
        raise ExtrapolationError("need at least two observations to fit a trend")
    t = np.array([p[0] for p in pts])
    g = np.array([p[1] for p in pts])
    if np.any(g <= 0):
        raise ExtrapolationError("GDP must be positive to take logs")
    if np.ptp(t) == 0:
        raise ExtrapolationError("observations must span more than one year")
    A = np.column_stack([np.ones_like(t), t])
    coef = np.linalg.lstsq(A, np.log(g), rcond=None)[0]
    target = np.asarray(target_years, dtype=float)
    return np.exp(coef[0] + coef[1] * target)


def build_domestic(records: pd.DataFrame, aux: pd.DataFrame | None, diagnostics: list | None = None,
                   years: Sequence[int] | None = None) -> pd.DataFrame:
    """Add domestic flows equal to GDP minus total exports.

    Negative differences are dropped, not clamped, and reported; country-years
    without both series are skipped with a diagnostic.
    """
    diagnostics = diagnostics if diagnostics is not None else []
    rec = _as_records(records)
    have = set(zip(rec["exporter"], rec["importer"], rec["year"]))
    need = sorted(set(zip(rec["exporter"], rec["year"])) | set(zip(rec["importer"], rec["year"])))
    if years is not None:
        need = [k for k in need if years[0] <= k[1] <= years[1]]
    table = {}
    if aux is not None and len(aux):
        for row in aux.itertuples(index=False):
            table[(row.country, int(row.year))] = (getattr(row, "gdp", np.nan), getattr(row, "total_exports", np.nan))
    new = []
    for c, t in need:
        if (c, c, t) in have:
            continue
        gdp, exp = table.get((c, t), (np.nan, np.nan))
        if not (np.isfinite(gdp) and np.isfinite(exp)):
            diagnostics.append(Diagnostic("missing_aux", "GDP or total exports missing; no domestic flow", c, c, t))
            continue
        dom = float(gdp) - float(exp)
        if dom < 0:
            msg = f"GDP {float(gdp)!r} below total exports {float(exp)!r}; domestic flow omitted"
            diagnostics.append(Diagnostic("negative_domestic", msg, c, c, t))
            continue
        new.append((c, c, t, dom, DOMESTIC_SOURCE))
    if new:
        rec = pd.concat([rec, pd.DataFrame(new, columns=PANEL_COLUMNS)], ignore_index=True)
    return _sorted(rec)


@dataclass
class IngestResult:
    records: pd.DataFrame
    imputed: pd.DataFrame
    diagnostics: list[Diagnostic] = field(default_factory=list)

    @property
    def provenance_counts(self) -> dict[str, int]:
        return dict(sorted(Counter(self.records["source"]).items()))

    def report(self) -> dict:
        kinds = Counter(d.kind for d in self.diagnostics)
        return {
            "n_records": int(len(self.records)),
            "n_imputed": int(len(self.imputed)),
            "provenance_counts": self.provenance_counts,
            "diagnostic_counts": dict(sorted(kinds.items())),
            "diagnostics": [d.as_dict() for d in self.diagnostics],
        }

    def report_text(self) -> str:
        lines = [f"records: {len(self.records)}", f"imputed (sidecar): {len(self.imputed)}", "provenance:"]
        lines += [f"  {k}: {v}" for k, v in self.provenance_counts.items()]
        lines.append("diagnostics:")
        for d in self.diagnostics:
            where = f"{d.exporter}->{d.importer} {d.year}" if d.year is not None else ""
            lines.append(f"  [{d.kind}] {where} {d.message}".rstrip())
        return "\n".join(lines) + "\n"


def harmonize(
    base,
    raw: Iterable[RawFlow],
    rates: ExchangeRateTable,
    aux: pd.DataFrame | None = None,
    *,
    cif_factor: float = DEFAULT_CIF_FACTOR,
    extrapolate: Sequence[str] = (),
    years: Sequence[int] | None = None,
    domestic: bool = True,
) -> IngestResult:
    """Full pipeline: revisions, conversion, c.i.f., merge, totals, domestic trade."""
    if cif_factor < 0:
        raise ConfigurationError("c.i.f. factor must be non-negative")
    diagnostics: list[Diagnostic] = []
    raw = latest_editions(raw)
    directed, totals = [], []
    for f in raw:
        v = convert_currency(f, rates)
        if f.direction is Direction.BY_IMPORTER and f.valuation is Valuation.FOB:
            v = cif_adjust(v, cif_factor)
        row = {"exporter": f.exporter, "importer": f.importer, "year": f.year, "value": v,
               "direction": f.direction, "source": f.source}
        (totals if f.direction is Direction.TOTAL_ONLY else directed).append(row)

    rec = merge_sources(base, directed, diagnostics)
    imputed = []
    for tot in totals:
        new, imp = impute_from_totals(tot, rec, diagnostics)
        if new:
            rec = merge_sources(rec, [{**r, "direction": Direction.BY_IMPORTER} for r in
                                      (dict(zip(PANEL_COLUMNS, x)) for x in new)])
        imputed += imp

    if aux is not None and extrapolate:
        aux = _extrapolate_aux(aux, rec, extrapolate, diagnostics, years)
    if domestic:
        rec = build_domestic(rec, aux, diagnostics, years)
    imp = _sorted(pd.DataFrame(imputed, columns=PANEL_COLUMNS)) if imputed else _as_records(None)
    if len(imp):
        imp = imp.drop_duplicates(["exporter", "importer", "year"], keep="last").reset_index(drop=True)
    return IngestResult(rec, imp, diagnostics)


def _extrapolate_aux(aux, rec, countries, diagnostics, years):
    aux = aux.copy()
    for c in countries:
        mine = aux[(aux["country"] == c) & aux["gdp"].notna() & (aux["gdp"] > 0)]
        span = set(rec.loc[rec["exporter"] == c, "year"]) | set(rec.loc[rec["importer"] == c, "year"])
        if years is not None:
            span = {t for t in span if years[0] <= t <= years[1]}
        target = sorted(span - set(mine["year"]))
        if not target:
            continue
        fitted = extrapolate_gdp_trend(zip(mine["year"], mine["gdp"]), target)
        intl = rec[(rec["exporter"] == c) & (rec["importer"] != c)].groupby("year")["value"].sum()
        rows = []
        for t, g in zip(target, fitted):
            known = aux[(aux["country"] == c) & (aux["year"] == t)]
            exports = known["total_exports"].iloc[0] if len(known) and pd.notna(known["total_exports"].iloc[0]) \
                else float(intl.get(t, 0.0))
            rows.append({"country": c, "year": t, "gdp": float(g), "total_exports": float(exports)})
            msg = f"GDP set to log-linear trend value {float(g)!r}"
            diagnostics.append(Diagnostic("gdp_extrapolated", msg, c, c, t))
        aux = aux[~((aux["country"] == c) & aux["year"].isin(target))]
        aux = pd.concat([aux, pd.DataFrame(rows)], ignore_index=True)
    return aux


def read_raw_flows(path: "str | Path") -> list[RawFlow]:
    """Read ``exporter,importer,year,value,currency,valuation,direction,source,edition``."""
    out = []
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            out.append(RawFlow(
                row["exporter"], row["importer"], int(row["year"]), float(row["value"]), row["currency"],
                Valuation(row["valuation"].strip().upper()), Direction(row["direction"].strip()),
                row.get("source", "") or "", int(row.get("edition") or 0),
            ))
    return out
