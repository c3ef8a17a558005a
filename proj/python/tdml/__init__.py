"""Python access to the tdml simulator: run scenarios, audit run directories, compare metrics."""

import json
from pathlib import Path

from ._tdml import (  # noqa: F401
    TdmlError,
    flag_suspicious,
    rank_features,
    sha256_hex,
    suspicion_scores,
)
from . import _tdml


def run(scenario, seed=None, out=None):
    """Run a scenario given as a path, a JSON string or a dict. Returns the run summary."""
    if isinstance(scenario, dict):
        text = json.dumps(scenario)
    elif isinstance(scenario, Path) or (isinstance(scenario, str) and not scenario.lstrip().startswith("{")):
        text = Path(scenario).read_text()
    else:
        text = scenario
    return json.loads(_tdml.run_json(text, seed, None if out is None else str(out)))


def verify(run_dir):
    """Audit a run directory. Returns (ok, report)."""
    ok, report = _tdml.verify_json(str(run_dir))
    return ok, json.loads(report)


def compare(a, b):
    """Per-epoch global accuracy of two metrics.csv files or run directories."""

    def text(p):
        p = Path(p)
        return (p / "metrics.csv" if p.is_dir() else p).read_text()

    return json.loads(_tdml.compare_json(text(a), text(b)))
