import numpy as np
import pandas as pd
import pytest

from blocgravity.ppml import EstimationResult
from blocgravity.synth import WorldConfig, generate


def small_world(seed=0, noise="multiplicative", years=(1950, 1951), **kw):
    spec = dict(n_east=2, n_west=1, n_rest=1, years=years, noise=noise, noise_sd=0.3, seed=seed)
    spec.update(kw)
    return generate(WorldConfig(**spec))


def manual_result(coef, cov, labels_years, scores=None, bread=None, clusters=None):
    """EstimationResult assembled by hand for inference-only tests."""
    names = [f"{lab}[{t}]" if t is not None else lab for lab, t in labels_years]
    k = len(names)
    terms = pd.DataFrame({"label": [lab for lab, _ in labels_years],
                          "year": pd.array([t for _, t in labels_years], dtype="Int64")}, index=names)
    return EstimationResult(
        coefficients=pd.Series(np.asarray(coef, float), index=names),
        covariance=pd.DataFrame(np.asarray(cov, float), index=names, columns=names),
        terms=terms,
        fe_values=pd.DataFrame(columns=["country", "year", "side", "value"]),
        diagnostics={},
        dropped=[],
        score_matrix=np.zeros((0, k)) if scores is None else scores,
        bread=np.eye(k) if bread is None else bread,
        clusters=pd.DataFrame(columns=["exporter", "importer", "year"]) if clusters is None else clusters,
    )


@pytest.fixture(scope="session")
def world_panel():
    return small_world(seed=11, years=(1950, 1951, 1952), n_east=3, n_west=2, n_rest=2)


ACCEPTANCE_LINES: dict[int, str] = {}


@pytest.fixture
def record():
    """Store one pass/fail line for an acceptance criterion; printed in the terminal summary."""

    def _record(number: int, name: str, ok: bool, detail: str) -> bool:
        ACCEPTANCE_LINES[number] = f"criterion {number:2d} {'PASS' if ok else 'FAIL'}  {name}: {detail}"
        print(ACCEPTANCE_LINES[number])
        return ok

    return _record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for k in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[k])
