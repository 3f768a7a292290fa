"""Command-line entry point: ``blocgravity {ingest,estimate,simulate,synth}``.

A run is described by one JSON config file; command-line flags override its
fields. Relative paths in the config are resolved against the config file's
directory. Set ``BLOCGRAVITY_LOG_LEVEL`` (e.g. ``DEBUG``) to change verbosity.
"""

from __future__ import annotations

import argparse
import copy
import json
import logging
import os
import sys
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import pandas as pd

from ._validation import ConfigurationError
from .datamodel import DUMMY_PRESETS, PAIR_COVARIATES, BlocTaxonomy, GravityDesign, Group, Panel
from .effects import DEFAULT_EPSILON, build_series, series_from_estimates
from .geq import DEFAULT_PSI, BaselineEconomy, Shock, report_volumes, report_welfare, shock_from_estimates, solve
from .ingest import ExchangeRateTable, harmonize, read_raw_flows
from .output import config_hash, read_table, write_json, write_svg_lines, write_table
from .ppml import PPMLGravity, wald_equality
from .synth import WorldConfig, generate

logger = logging.getLogger("blocgravity")

LOG_ENV = "BLOCGRAVITY_LOG_LEVEL"

DEFAULTS = {
    "paths": {},
    "model": {
        "dummies": "baseline",
        "time_varying": None,
        "pooled": list(PAIR_COVARIATES),
        "cluster": "multiway",
        "leverage": None,
        "absorb": "auto",
        "include_domestic": True,
        "include_imputed": False,
    },
    "epsilon": DEFAULT_EPSILON,
    "psi": DEFAULT_PSI,
    "years": None,
    "taxonomy_variant": "fignotes",
    "wald": "decades",
    "simulate": {"mode": "IC", "no_shock": False},
    "ingest": {"cif_factor": 0.10, "extrapolate": [], "domestic": True},
    "synth": {},
    "seed": 0,
    "out": "out",
}


class CommandError(RuntimeError):
    """Failure that maps to a nonzero exit with a one-line message."""


def _merge(base: dict, over: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = v
    return out


@dataclass
class RunConfig:
    data: dict
    root: Path = field(default_factory=Path.cwd)

    @classmethod
    def load(cls, path: str | None, args: argparse.Namespace) -> "RunConfig":
        raw, root = {}, Path.cwd()
        if path:
            p = Path(path)
            if not p.is_file():
                raise CommandError(f"config file not found: {p}")
            try:
                raw = json.loads(p.read_text())
            except json.JSONDecodeError as exc:
                raise CommandError(f"config file {p} is not valid JSON: {exc}") from exc
            root = p.resolve().parent
        data = _merge(DEFAULTS, raw)
        if args.no_domestic:
            data["model"]["include_domestic"] = False
        if getattr(args, "include_imputed", False):
            data["model"]["include_imputed"] = True
        if args.taxonomy_variant:
            data["taxonomy_variant"] = args.taxonomy_variant
        if args.epsilon is not None:
            data["epsilon"] = args.epsilon
        if args.psi is not None:
            data["psi"] = args.psi
        if args.years:
            data["years"] = list(_parse_years(args.years))
        if args.seed is not None:
            data["seed"] = args.seed
        if getattr(args, "no_shock", False):
            data["simulate"]["no_shock"] = True
        if args.out:
            data["out"] = args.out
            root_out = Path(args.out)
        else:
            root_out = root / data["out"]
        cfg = cls(data, root)
        cfg.out = root_out
        cfg.validate()
        return cfg

    def validate(self):
        d = self.data
        if not (isinstance(d["epsilon"], (int, float)) and d["epsilon"] > 0):
            raise ConfigurationError(f"epsilon must be positive, got {d['epsilon']!r}")
        if not (isinstance(d["psi"], (int, float)) and d["psi"] >= 0):
            raise ConfigurationError(f"psi must be non-negative, got {d['psi']!r}")
        if d["years"] is not None:
            lo, hi = d["years"]
            if lo > hi:
                raise ConfigurationError(f"empty year range {lo}:{hi}")
        if d["taxonomy_variant"] not in ("fignotes", "section5"):
            raise ConfigurationError(f"unknown taxonomy variant {d['taxonomy_variant']!r}")
        if d["model"]["dummies"] not in DUMMY_PRESETS:
            raise ConfigurationError(f"unknown dummy preset {d['model']['dummies']!r}")

    @property
    def hash(self) -> str:
        # the output location does not change results, so it is not hashed
        return config_hash({k: v for k, v in self.data.items() if k != "out"})

    def path(self, key: str, required: bool = True) -> Path | None:
        value = self.data["paths"].get(key)
        if value is None:
            if required:
                raise CommandError(f"config has no paths.{key}")
            return None
        p = Path(value)
        p = p if p.is_absolute() else self.root / p
        if not p.exists():
            raise CommandError(f"{key} file not found: {p}")
        return p

    def taxonomy(self) -> BlocTaxonomy:
        p = self.path("taxonomy", required=False)
        return BlocTaxonomy.from_csv(p) if p else BlocTaxonomy.default(self.data["taxonomy_variant"])


def _parse_years(text: str) -> tuple[int, int]:
    try:
        a, b = text.split(":")
        return int(a), int(b)
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"years must look like A:B, got {text!r}") from exc


# ---------------------------------------------------------------------------
# loading
# ---------------------------------------------------------------------------

def _load_panel(cfg: RunConfig) -> Panel:
    rec = read_table(cfg.path("panel"), dtype={"exporter": str, "importer": str, "source": str},
                     keep_default_na=False)
    design = GravityDesign.from_frame(read_table(cfg.path("design"), dtype={"i": str, "j": str},
                                                 keep_default_na=False))
    aux_path = cfg.path("aux", required=False)
    aux = read_table(aux_path, dtype={"country": str}) if aux_path else None
    imp_path = cfg.path("imputed", required=False)
    imputed = read_table(imp_path, dtype={"exporter": str, "importer": str, "source": str},
                         keep_default_na=False) if imp_path else None
    years = [int(rec["year"].min()), int(rec["year"].max())] if len(rec) else [0, 0]
    if imputed is not None and len(imputed):
        years = [min(years[0], int(imputed["year"].min())), max(years[1], int(imputed["year"].max()))]
    if cfg.data["years"] is not None:
        lo, hi = cfg.data["years"]
        if lo < years[0] or hi > years[1]:
            raise ConfigurationError(f"year range {lo}:{hi} lies outside the panel range {years[0]}:{years[1]}")
    panel = Panel(rec, design, tuple(years), aux=aux, imputed=imputed)
    return panel.with_dummies(cfg.taxonomy(), DUMMY_PRESETS[cfg.data["model"]["dummies"]])


def _labels(cfg: RunConfig) -> list[str]:
    tv = cfg.data["model"]["time_varying"]
    if tv is None:
        tv = ["border"] + [d.label for d in DUMMY_PRESETS[cfg.data["model"]["dummies"]]]
    return list(tv)


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_synth(cfg: RunConfig) -> int:
    """Write a synthetic panel, its design, aux series, taxonomy and true coefficients."""
    spec = dict(cfg.data["synth"])
    spec["seed"] = int(cfg.data["seed"])
    if "years" in spec and isinstance(spec["years"], list) and len(spec["years"]) == 2:
        spec["years"] = list(range(int(spec["years"][0]), int(spec["years"][1]) + 1))
    world = WorldConfig(**spec)
    panel = generate(world)
    h, out = cfg.hash, cfg.out
    write_table(panel.records, out / "panel.csv", h)
    design = panel.design.table[list(PAIR_COVARIATES)].reset_index().rename(
        columns={"exporter": "i", "importer": "j"})
    write_table(design, out / "design.csv", h)
    write_table(panel.aux, out / "aux.csv", h)
    tax = world.taxonomy()
    rows = [(c, g.value, "") for c, g in sorted(tax.assignments.items())]
    rows += [(c, "RestOfWorld", "") for c in world.countries if c not in tax.assignments]
    write_table(pd.DataFrame(rows, columns=["country", "group", "successor_of"]), out / "taxonomy.csv", h)
    truth = []
    for lab, v in world.theta.items():
        path = world.path(v, lab)
        for t, th in zip(world.years, path):
            truth.append((lab, t, th, 100.0 * np.expm1(-th / world.epsilon)))
    write_table(pd.DataFrame(truth, columns=["label", "year", "theta", "te"]), out / "truth.csv", h)
    logger.info("synthetic panel with %d records written to %s", len(panel.records), out)
    return 0


def cmd_ingest(cfg: RunConfig) -> int:
    h, out = cfg.hash, cfg.out
    rates = ExchangeRateTable.from_csv(cfg.path("rates"), cfg.path("usd_to_gbp"))
    raw_path = cfg.path("raw")
    raw = read_raw_flows(raw_path)
    if not raw:
        logger.warning("raw input %s is empty", raw_path)
    base_path = cfg.path("base", required=False)
    base = read_table(base_path, dtype={"exporter": str, "importer": str, "source": str},
                      keep_default_na=False) if base_path else None
    aux_path = cfg.path("aux", required=False)
    aux = read_table(aux_path, dtype={"country": str}) if aux_path else None
    opts = cfg.data["ingest"]
    res = harmonize(base, raw, rates, aux, cif_factor=float(opts["cif_factor"]),
                    extrapolate=tuple(opts["extrapolate"]), years=cfg.data["years"],
                    domestic=bool(opts["domestic"]))
    write_table(res.records, out / "panel.csv", h)
    write_table(res.imputed, out / "flow_imputed.csv", h)
    write_json(res.report(), out / "diagnostics.json", h)
    (out / "diagnostics.txt").write_text(f"# config-hash: {h}\n" + res.report_text())
    for k, v in res.provenance_counts.items():
        logger.info("provenance %s: %d", k, v)
    return 0


def _decade_groups(years: list[int]) -> list[tuple[int, int]]:
    """Complete decades covered by ``years``."""
    have = set(years)
    out = []
    for d in range((min(years) // 10) * 10, max(years) + 1, 10):
        if all(t in have for t in range(d, d + 10)):
            out.append((d, d + 9))
    return out


def _wald_specs(cfg: RunConfig, labels, years):
    spec = cfg.data["wald"]
    if spec in (None, "none"):
        return []
    if spec == "decades":
        dec = _decade_groups(years) if years else []
        return [(lab, a, b) for lab in labels if lab != "border" for a, b in zip(dec, dec[1:])]
    return [(w["label"], tuple(w["a"]), tuple(w["b"])) for w in spec]


def cmd_estimate(cfg: RunConfig) -> int:
    h, out = cfg.hash, cfg.out
    panel = _load_panel(cfg)
    m = cfg.data["model"]
    labels = _labels(cfg)
    cluster = m["cluster"] if isinstance(m["cluster"], str) else tuple(m["cluster"])
    years = tuple(cfg.data["years"]) if cfg.data["years"] else None
    est = PPMLGravity(time_varying=labels, pooled=tuple(m["pooled"]), include_domestic=m["include_domestic"],
                      include_imputed=m["include_imputed"], years=years, absorb=m["absorb"], cluster=cluster,
                      leverage=m["leverage"])
    est.fit(panel)
    res = est.result_
    write_table(res.coef_table().astype({"year": "Int64"}), out / "coefficients.csv", h)
    cov = res.covariance.copy()
    cov.insert(0, "term", cov.index)
    write_table(cov, out / "covariance.csv", h)

    eps = float(cfg.data["epsilon"])
    frames = []
    for lab in labels:
        try:
            s = build_series(res, lab, eps)
        except KeyError:
            logger.warning("no estimates for %s", lab)
            continue
        frames.append(s.to_frame())
        t = s.table
        write_svg_lines(out / f"te_{lab}.svg", h, {lab: (t.index, t["te"])},
                        bands={lab: (t.index, t["te_lo"], t["te_hi"])},
                        title=f"Tariff equivalent of {lab}", ylabel="percent")
    te = pd.concat(frames, ignore_index=True) if frames else pd.DataFrame(
        columns=["label", "year", "theta", "theta_se", "te", "te_se", "te_lo", "te_hi"])
    write_table(te, out / "tariff_equivalents.csv", h)

    est_years = sorted({int(t) for t in res.terms["year"].dropna()})
    wald_rows = []
    for lab, a, b in _wald_specs(cfg, labels, est_years):
        ga, gb = range(a[0], a[1] + 1), range(b[0], b[1] + 1)
        try:
            stat, p = wald_equality(res, ga, gb, lab)
        except KeyError as exc:
            logger.warning("wald test %s %s vs %s skipped: %s", lab, a, b, exc)
            continue
        wald_rows.append((lab, f"{a[0]}-{a[1]}", f"{b[0]}-{b[1]}", stat, p))
    write_table(pd.DataFrame(wald_rows, columns=["label", "group_a", "group_b", "statistic", "p_value"]),
                out / "wald.csv", h)
    diag = {k: v for k, v in res.diagnostics.items() if k != "trace"}
    diag.update({"include_domestic": bool(m["include_domestic"]), "include_imputed": bool(m["include_imputed"]),
                 "cluster": cluster, "leverage": m["leverage"], "time_varying": labels, "dropped": res.dropped,
                 "deviance_trace": res.diagnostics.get("trace", [])})
    write_json(diag, out / "estimate_diagnostics.json", h)
    logger.info("estimated %d coefficients on %d observations", len(res.coefficients), diag.get("n_used", 0))
    return 0


def _te_source(cfg: RunConfig):
    p = cfg.path("estimates", required=False)
    if p is None:
        p = cfg.out / "tariff_equivalents.csv"
        if not p.exists():
            raise CommandError(f"estimates file not found: {p} (run estimate first or set paths.estimates)")
    if p.is_dir():
        p = p / "tariff_equivalents.csv"
    te = read_table(p, dtype={"label": str})
    out = {}
    for lab, g in te.groupby("label", sort=True):
        out[lab] = series_from_estimates(lab, g["year"], g["theta"], g["theta_se"] ** 2, float(cfg.data["epsilon"]))
    return out


def cmd_simulate(cfg: RunConfig) -> int:
    h, out = cfg.hash, cfg.out
    panel_path = cfg.path("panel")
    rec = read_table(panel_path, dtype={"exporter": str, "importer": str, "source": str}, keep_default_na=False)
    tax = cfg.taxonomy()
    sim = cfg.data["simulate"]
    no_shock = bool(sim.get("no_shock", False))
    series = {} if no_shock else _te_source(cfg)
    eps, psi = float(cfg.data["epsilon"]), float(cfg.data["psi"])
    aux_path = cfg.path("aux", required=False)
    aux = read_table(aux_path, dtype={"country": str}) if aux_path else None

    years = sorted(rec["year"].unique().tolist())
    if cfg.data["years"] is not None:
        lo, hi = cfg.data["years"]
        years = [t for t in years if lo <= t <= hi]

    country_rows, flow_rows, summary_rows, log_rows = [], [], [], []
    failed = 0
    for year in years:
        flows = rec[rec["year"] == year]
        try:
            base, excluded = _baseline(flows, aux, year)
            if excluded:
                logger.warning("year %d: excluded without domestic trade: %s", year, " ".join(excluded))
            if no_shock:
                shock = Shock.identity(len(base.countries))
            else:
                shock = shock_from_estimates(series, base.countries, tax, year, sim.get("mode", "IC"), eps)
        except KeyError as exc:
            logger.warning("year %d skipped: %s", year, exc)
            log_rows.append((year, 0, np.nan, "skipped", str(exc).strip("'\"")))
            continue
        except ValueError as exc:
            logger.error("year %d failed: %s", year, exc)
            log_rows.append((year, 0, np.nan, "failed", str(exc)))
            failed += 1
            continue
        try:
            solution = solve(base, shock, eps, psi)
        except Exception as exc:  # one bad year must not stop the run
            logger.error("year %d failed: %s", year, exc)
            log_rows.append((year, 0, np.nan, "failed", str(exc)))
            failed += 1
            continue
        note = f"excluded {' '.join(excluded)}" if excluded else ""
        log_rows.append((year, solution.iterations, solution.residual, "ok", note))
        logger.debug("year %d solved in %d iterations, residual %.3g", year, solution.iterations,
                     solution.residual)
        ct = solution.country_table()
        ct.insert(0, "year", year)
        ct["group"] = [tax.resolve(c).value for c in base.countries]
        country_rows.append(ct)
        scale = base.Y.sum() / solution.Y_prime.sum()
        n = len(base.countries)
        for a in range(n):
            for b in range(n):
                flow_rows.append((year, base.countries[a], base.countries[b], base.X[a, b],
                                  solution.X_prime[a, b] * scale))
        ib = report_volumes(base, solution, tax, "inter_bloc")
        wd = report_volumes(base, solution, tax, "world")
        east = tax.members(Group.EAST, base.countries)
        wel = report_welfare(solution, members=east) if east else None
        wmean = np.nan
        if east and base.population is not None:
            wmean = report_welfare(solution, base.population, members=east, weighted=True).weighted_mean
        summary_rows.append((year, *ib, *wd, wel.median if wel else np.nan, wmean))

    write_table(pd.concat(country_rows, ignore_index=True) if country_rows else
                pd.DataFrame(columns=["year", "country", "p_hat", "P_hat", "w_hat", "W_hat_pct", "group"]),
                out / "countries.csv", h)
    write_table(pd.DataFrame(flow_rows, columns=["year", "exporter", "importer", "X_actual", "X_cf"]),
                out / "flows.csv", h)
    summary = pd.DataFrame(summary_rows, columns=[
        "year", "interbloc_actual", "interbloc_cf", "interbloc_pct", "world_actual", "world_cf", "world_pct",
        "east_median_welfare_pct", "east_weighted_welfare_pct"])
    write_table(summary, out / "summary.csv", h)
    write_table(pd.DataFrame(log_rows, columns=["year", "iterations", "residual", "status", "message"]),
                out / "convergence.csv", h)
    if len(summary):
        write_svg_lines(out / "volumes.svg", h,
                        {"inter-bloc": (summary["year"], summary["interbloc_pct"]),
                         "world": (summary["year"], summary["world_pct"])},
                        title="Counterfactual change in trade", ylabel="percent")
        write_svg_lines(out / "welfare.svg", h,
                        {"East median": (summary["year"], summary["east_median_welfare_pct"]),
                         "East weighted": (summary["year"], summary["east_weighted_welfare_pct"])},
                        title="Counterfactual welfare change", ylabel="percent")
    ok = sum(1 for r in log_rows if r[3] == "ok")
    logger.info("solved %d of %d years", ok, len(years))
    return 1 if failed else 0


def _baseline(flows: pd.DataFrame, aux, year) -> tuple[BaselineEconomy, list[str]]:
    """Flow matrix for one year, restricted to countries with domestic trade and positive spending.

    Returns the economy and the excluded countries.
    """
    everyone = sorted(set(flows["exporter"]) | set(flows["importer"]))
    countries = list(everyone)
    while True:
        idx = {c: k for k, c in enumerate(countries)}
        X = np.zeros((len(countries), len(countries)))
        for e, m, v in zip(flows["exporter"], flows["importer"], flows["value"]):
            if e in idx and m in idx:
                X[idx[e], idx[m]] += v
        keep = (np.diag(X) > 0) & (X.sum(axis=0) > 0) & (X.sum(axis=1) > 0)
        if keep.all():
            break
        countries = [c for c, k in zip(countries, keep) if k]
        if not countries:
            raise ValueError(f"no country has domestic trade in {year}")
    pop = None
    if aux is not None and "population" in aux.columns:
        a = aux[aux["year"] == year].set_index("country")["population"]
        if all(c in a.index and np.isfinite(a[c]) for c in countries):
            pop = np.array([a[c] for c in countries], dtype=float)
    excluded = [c for c in everyone if c not in set(countries)]
    return BaselineEconomy(tuple(countries), X, pop), excluded


COMMANDS = {"ingest": cmd_ingest, "estimate": cmd_estimate, "simulate": cmd_simulate, "synth": cmd_synth}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="blocgravity", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name, fn in COMMANDS.items():
        p = sub.add_parser(name, help=(fn.__doc__ or name).splitlines()[0])
        p.add_argument("--config", metavar="PATH", help="JSON run configuration")
        p.add_argument("--no-domestic", action="store_true", help="drop domestic flows from estimation")
        p.add_argument("--include-imputed", action="store_true", help="use half-split imputed flows")
        p.add_argument("--taxonomy-variant", choices=("fignotes", "section5"))
        p.add_argument("--epsilon", type=float, help="trade elasticity")
        p.add_argument("--psi", type=float, help="supply elasticity")
        p.add_argument("--years", metavar="A:B", help="inclusive year range")
        p.add_argument("--out", metavar="DIR", help="output directory")
        p.add_argument("--seed", type=int, metavar="N")
        if name == "simulate":
            p.add_argument("--no-shock", action="store_true", help="leave trade costs unchanged (tau_hat = 1)")
    return parser


def main(argv=None) -> int:
    level = os.environ.get(LOG_ENV, "WARNING").upper()
    logging.basicConfig(format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    logger.setLevel(getattr(logging, level, logging.WARNING))
    logging.captureWarnings(True)
    args = build_parser().parse_args(argv)
    try:
        if args.years:
            _parse_years(args.years)
        cfg = RunConfig.load(args.config, args)
        cfg.out.mkdir(parents=True, exist_ok=True)
        with warnings.catch_warnings():
            warnings.simplefilter("default")
            return COMMANDS[args.command](cfg)
    except (CommandError, ConfigurationError, argparse.ArgumentTypeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (FileNotFoundError, KeyError, ValueError, RuntimeError, np.linalg.LinAlgError) as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
