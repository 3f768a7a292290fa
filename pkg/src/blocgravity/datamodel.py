"""Core domain types: bloc taxonomy, gravity design, and the trade panel."""

from __future__ import annotations

import csv
import math
import warnings
from dataclasses import dataclass, field
from enum import Enum
from importlib import resources
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np
import pandas as pd

from ._validation import ConfigurationError, check_country_code

__all__ = [
    "Group",
    "BlocTaxonomy",
    "TradeFlowRecord",
    "PairDummy",
    "DUMMY_PRESETS",
    "GravityDesign",
    "Panel",
    "resolve_group",
    "generate_pair_dummies",
    "PAIR_COVARIATES",
    "DEFAULT_YEARS",
]

PAIR_COVARIATES = ("log_distance", "common_language", "contiguous", "colonial")
DEFAULT_YEARS = (1948, 2000)
PANEL_COLUMNS = ["exporter", "importer", "year", "value", "source"]


class Group(str, Enum):
    EAST = "East"
    WEST = "West"
    WEST_LEANING = "WestLeaning"
    NEUTRAL = "Neutral"
    YUGOSLAVIA = "Yugoslavia"
    REST_OF_WORLD = "RestOfWorld"

    @classmethod
    def parse(cls, value: "str | Group") -> "Group":
        if isinstance(value, Group):
            return value
        for g in cls:
            if value == g.value or value.upper() == g.name:
                return g
        raise ConfigurationError(f"unknown group {value!r}")


@dataclass(frozen=True)
class BlocTaxonomy:
    """Assignment of countries to groups.

    Countries listed in ``successor_map`` inherit the group of their
    predecessor (one hop only). Anything unlisted resolves to
    ``Group.REST_OF_WORLD``.
    """

    assignments: Mapping[str, Group]
    successor_map: Mapping[str, str] = field(default_factory=dict)

    def __post_init__(self):
        assignments = {check_country_code(c): Group.parse(g) for c, g in self.assignments.items()}
        successors = {check_country_code(s): check_country_code(p) for s, p in self.successor_map.items()}
        for succ, pred in successors.items():
            if succ == pred:
                raise ConfigurationError(f"{succ} is listed as its own successor")
            if pred in successors:
                raise ConfigurationError(
                    f"successor chain {succ} -> {pred} -> {successors[pred]} exceeds one hop"
                )
        object.__setattr__(self, "assignments", assignments)
        object.__setattr__(self, "successor_map", successors)

    def resolve(self, country: str) -> Group:
        if country in self.assignments:
            return self.assignments[country]
        pred = self.successor_map.get(country)
        if pred is not None and pred in self.assignments:
            return self.assignments[pred]
        return Group.REST_OF_WORLD

    def members(self, group: Group, countries: Iterable[str]) -> list[str]:
        group = Group.parse(group)
        return [c for c in countries if self.resolve(c) is group]

    @classmethod
    def from_csv(cls, path: "str | Path") -> "BlocTaxonomy":
        """Read a ``country,group[,successor_of]`` file; ``#`` lines are comments."""
        with open(path, newline="") as fh:
            lines = [ln for ln in fh if not ln.startswith("#")]
        return cls._from_rows(csv.DictReader(lines), str(path))

    @classmethod
    def default(cls, variant: str = "fignotes") -> "BlocTaxonomy":
        """Bundled taxonomy.

        ``fignotes`` puts Switzerland with the West-leaning group and Austria
        with the neutrals; ``section5`` swaps the two.
        """
        if variant not in ("fignotes", "section5"):
            raise ConfigurationError(f"unknown taxonomy variant {variant!r}")
        text = resources.files("blocgravity.data").joinpath(f"taxonomy_{variant}.csv").read_text()
        return cls._from_rows(csv.DictReader(text.splitlines()), variant)

    @classmethod
    def _from_rows(cls, rows, origin: str) -> "BlocTaxonomy":
        assignments: dict[str, Group] = {}
        successors: dict[str, str] = {}
        for row in rows:
            country = (row.get("country") or "").strip()
            group = (row.get("group") or "").strip()
            pred = (row.get("successor_of") or "").strip()
            if country in assignments or country in successors:
                raise ConfigurationError(f"{origin}: duplicate country {country!r}")
            if group:
                assignments[country] = Group.parse(group)
            elif pred:
                successors[country] = pred
            else:
                raise ConfigurationError(f"{origin}: {country!r} has neither group nor successor_of")
        return cls(assignments, successors)

    def to_csv(self, path: "str | Path") -> None:
        with open(path, "w", newline="") as fh:
            fh.write("country,group,successor_of\n")
            for c, g in self.assignments.items():
                fh.write(f"{c},{g.value},\n")
            for s, p in self.successor_map.items():
                fh.write(f"{s},,{p}\n")


def resolve_group(taxonomy: BlocTaxonomy, country: str) -> Group:
    return taxonomy.resolve(country)


@dataclass(frozen=True)
class TradeFlowRecord:
    exporter: str
    importer: str
    year: int
    value: float
    source: str = ""

    def __post_init__(self):
        check_country_code(self.exporter)
        check_country_code(self.importer)
        if not (math.isfinite(self.value) and self.value >= 0):
            raise ValueError(f"trade value must be finite and non-negative, got {self.value!r}")

    @property
    def domestic(self) -> bool:
        return self.exporter == self.importer


@dataclass(frozen=True)
class PairDummy:
    """Indicator for international flows from an ``origin`` group to a
    ``destination`` group; ``symmetric`` also switches on the reverse direction."""

    label: str
    origin: "Group | tuple[Group, ...]"
    destination: "Group | tuple[Group, ...]"
    symmetric: bool = False

    def __post_init__(self):
        object.__setattr__(self, "origin", _as_groups(self.origin))
        object.__setattr__(self, "destination", _as_groups(self.destination))

    def matches(self, gi: Group, gj: Group) -> bool:
        if gi in self.origin and gj in self.destination:
            return True
        return self.symmetric and gj in self.origin and gi in self.destination


def _as_groups(value) -> tuple[Group, ...]:
    if isinstance(value, (str, Group)):
        return (Group.parse(value),)
    return tuple(Group.parse(v) for v in value)


def _coerce_dummy(spec) -> PairDummy:
    if isinstance(spec, PairDummy):
        return spec
    a, b, label, *rest = spec
    return PairDummy(label, a, b, bool(rest[0]) if rest else False)


E, W = Group.EAST, Group.WEST
WL, N, Y = Group.WEST_LEANING, Group.NEUTRAL, Group.YUGOSLAVIA

DUMMY_PRESETS: dict[str, list[PairDummy]] = {
    "baseline": [PairDummy("IC", E, W, symmetric=True)],
    "four_bloc": [
        PairDummy("EW", E, W),
        PairDummy("WE", W, E),
        PairDummy("EE", E, E),
        PairDummy("WW", W, W),
    ],
    "nonaligned": [
        PairDummy("IC", E, W, symmetric=True),
        PairDummy("EE", E, E),
        PairDummy("WW", W, W),
        PairDummy("LE", WL, E, symmetric=True),
        PairDummy("LW", WL, W, symmetric=True),
        PairDummy("LL", WL, WL),
        PairDummy("NE", N, E, symmetric=True),
        PairDummy("NW", N, W, symmetric=True),
        PairDummy("NN", N, N),
        PairDummy("YE", Y, E, symmetric=True),
        PairDummy("YW", Y, W, symmetric=True),
    ],
}


def generate_pair_dummies(
    taxonomy: BlocTaxonomy,
    pairs: Iterable[tuple[str, str]],
    specs: Iterable,
) -> pd.DataFrame:
    """Group-pair indicators for each ordered pair.

    ``specs`` holds :class:`PairDummy` objects or ``(A, B, label[, symmetric])``
    tuples. Domestic pairs get zero on every dummy.

    Returns a frame indexed by ``(exporter, importer)`` with one int8 column
    per label.
    """
    specs = [_coerce_dummy(s) for s in specs]
    labels = [s.label for s in specs]
    dupes = sorted({x for x in labels if labels.count(x) > 1})
    if dupes:
        raise ConfigurationError(f"duplicate dummy labels: {dupes}")
    reserved = set(labels) & (set(PAIR_COVARIATES) | {"border"})
    if reserved:
        raise ConfigurationError(f"dummy labels clash with covariate names: {sorted(reserved)}")

    pairs = list(pairs)
    index = pd.MultiIndex.from_tuples(pairs, names=["exporter", "importer"]) if pairs else \
        pd.MultiIndex.from_arrays([[], []], names=["exporter", "importer"])
    cache: dict[str, Group] = {}

    def group(c):
        if c not in cache:
            cache[c] = taxonomy.resolve(c)
        return cache[c]

    out = {}
    for spec in specs:
        out[spec.label] = np.fromiter(
            (i != j and spec.matches(group(i), group(j)) for i, j in pairs), dtype=np.int8, count=len(pairs)
        )
    return pd.DataFrame(out, index=index, columns=labels)


@dataclass(frozen=True)
class GravityDesign:
    """Per-pair covariates plus the border dummy and any generated group-pair dummies.

    ``table`` is indexed by ``(exporter, importer)``.
    """

    table: pd.DataFrame
    dummy_labels: tuple[str, ...] = ()

    def __post_init__(self):
        tab = self.table
        missing = [c for c in PAIR_COVARIATES if c not in tab.columns]
        if missing:
            raise ValueError(f"design is missing covariates {missing}")
        if list(tab.index.names) != ["exporter", "importer"]:
            raise ValueError("design must be indexed by (exporter, importer)")
        if tab.index.has_duplicates:
            raise ValueError("design has duplicate pairs")
        i = tab.index.get_level_values(0)
        j = tab.index.get_level_values(1)
        tab = tab.copy()
        tab["border"] = (i != j).astype(np.int8)
        for lab in self.dummy_labels:
            if np.any(tab.loc[i == j, lab] != 0):
                raise ValueError(f"dummy {lab} is non-zero on a domestic pair")
        object.__setattr__(self, "table", tab)

    @classmethod
    def from_frame(cls, frame: pd.DataFrame) -> "GravityDesign":
        """Build from a frame with columns ``i,j`` (or ``exporter,importer``) and the pair covariates."""
        frame = frame.rename(columns={"i": "exporter", "j": "importer"})
        tab = frame.set_index(["exporter", "importer"])[list(PAIR_COVARIATES)].astype(float)
        return cls(tab)

    @property
    def labels(self) -> list[str]:
        return list(self.table.columns)

    def with_dummies(self, taxonomy: BlocTaxonomy, specs) -> "GravityDesign":
        specs = [_coerce_dummy(s) for s in specs]
        dummies = generate_pair_dummies(taxonomy, self.table.index, specs)
        base = self.table.drop(columns=list(self.dummy_labels) + ["border"])
        return GravityDesign(base.join(dummies), tuple(s.label for s in specs))

    def complete(self, pairs: Iterable[tuple[str, str]]) -> "GravityDesign":
        """Add rows for domestic pairs absent from the table (internal distance of 1 km)."""
        have = set(self.table.index)
        need = sorted({p for p in pairs if p not in have})
        if not need:
            return self
        foreign = [p for p in need if p[0] != p[1]]
        if foreign:
            raise ValueError(f"design has no covariates for pairs {foreign[:5]}")
        warnings.warn(
            f"no internal distance for {len(need)} domestic pairs; using log(1 km) = 0",
            stacklevel=2,
        )
        extra = pd.DataFrame(
            0.0,
            index=pd.MultiIndex.from_tuples(need, names=["exporter", "importer"]),
            columns=[c for c in self.table.columns if c != "border"],
        )
        tab = pd.concat([self.table.drop(columns="border"), extra])
        return GravityDesign(tab, self.dummy_labels)


@dataclass(frozen=True)
class Panel:
    """Bilateral (and domestic) trade flows with their pair design.

    ``records`` has columns ``exporter, importer, year, value, source``.
    ``imputed`` is the sidecar of half-split flows, kept out of estimation
    unless asked for. ``aux`` holds optional ``country, year, gdp,
    total_exports, population``.
    """

    records: pd.DataFrame
    design: GravityDesign
    years: tuple[int, int] = DEFAULT_YEARS
    aux: pd.DataFrame | None = None
    imputed: pd.DataFrame | None = None
    registry: frozenset = frozenset()

    def __post_init__(self):
        rec = _normalize_records(self.records)
        imp = _normalize_records(self.imputed) if self.imputed is not None else _normalize_records(None)
        lo, hi = int(self.years[0]), int(self.years[1])
        if lo > hi:
            raise ValueError(f"invalid year range {self.years}")
        for frame, name in ((rec, "records"), (imp, "imputed")):
            if len(frame) and (frame["year"].min() < lo or frame["year"].max() > hi):
                raise ValueError(f"{name} contain years outside the declared range {lo}-{hi}")
            if frame.duplicated(["exporter", "importer", "year"]).any():
                raise ValueError(f"{name} contain duplicate (exporter, importer, year) cells")
        values = rec["value"].to_numpy(float)
        if not np.all(np.isfinite(values)) or np.any(values < 0):
            raise ValueError("trade values must be finite and non-negative")
        countries = set(rec["exporter"]) | set(rec["importer"]) | set(imp["exporter"]) | set(imp["importer"])
        registry = frozenset(self.registry) if self.registry else frozenset(countries)
        unknown = countries - registry
        if unknown:
            raise ValueError(f"records reference countries outside the registry: {sorted(unknown)[:5]}")
        for c in registry:
            check_country_code(c)
        pairs = set(zip(rec["exporter"], rec["importer"])) | set(zip(imp["exporter"], imp["importer"]))
        design = self.design.complete(pairs)
        object.__setattr__(self, "records", rec)
        object.__setattr__(self, "imputed", imp)
        object.__setattr__(self, "years", (lo, hi))
        object.__setattr__(self, "registry", registry)
        object.__setattr__(self, "design", design)

    @property
    def countries(self) -> list[str]:
        return sorted(self.registry)

    def with_dummies(self, taxonomy: BlocTaxonomy, specs) -> "Panel":
        return Panel(self.records, self.design.with_dummies(taxonomy, specs), self.years,
                     self.aux, self.imputed, self.registry)

    def to_frame(
        self,
        include_domestic: bool = True,
        include_imputed: bool = False,
        years: Sequence[int] | None = None,
    ) -> pd.DataFrame:
        """Long estimation frame: one row per flow with all design columns attached."""
        rec = self.records
        if include_imputed and len(self.imputed):
            have = set(zip(rec["exporter"], rec["importer"], rec["year"]))
            extra = self.imputed[[k not in have for k in zip(self.imputed["exporter"],
                                                             self.imputed["importer"],
                                                             self.imputed["year"])]]
            rec = pd.concat([rec, extra], ignore_index=True)
        if years is not None:
            lo, hi = years
            rec = rec[(rec["year"] >= lo) & (rec["year"] <= hi)]
        if not include_domestic:
            rec = rec[rec["exporter"] != rec["importer"]]
        frame = rec.join(self.design.table, on=["exporter", "importer"])
        return frame.sort_values(["year", "exporter", "importer"], kind="mergesort").reset_index(drop=True)


def _normalize_records(records) -> pd.DataFrame:
    if records is None:
        return pd.DataFrame({"exporter": pd.Series(dtype=object), "importer": pd.Series(dtype=object),
                             "year": pd.Series(dtype=np.int64), "value": pd.Series(dtype=float),
                             "source": pd.Series(dtype=object)})
    if isinstance(records, pd.DataFrame):
        frame = records.copy()
    else:
        frame = pd.DataFrame([r.__dict__ if isinstance(r, TradeFlowRecord) else dict(r) for r in records])
    if "source" not in frame.columns:
        frame["source"] = ""
    missing = [c for c in PANEL_COLUMNS if c not in frame.columns]
    if missing:
        raise ValueError(f"records are missing columns {missing}")
    frame = frame[PANEL_COLUMNS].copy()
    frame["year"] = frame["year"].astype(np.int64)
    frame["value"] = frame["value"].astype(float)
    frame["source"] = frame["source"].fillna("").astype(str)
    return frame.reset_index(drop=True)
