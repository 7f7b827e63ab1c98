"""Stacked random forests across units that keep their raw data private.

The heavy lifting happens in the native ``_core`` extension; this module
turns keyword arguments into run configurations and JSON reports into
dictionaries.
"""

from __future__ import annotations

import json
from typing import Any, Iterable, Sequence

from . import _core
from ._core import (
    DataError,
    ExperimentError,
    account_volume,
    decode_message,
    encode_subprediction,
    metric_suite,
    metric_suite_from_labels,
    spearman,
    synthesize_csv,
)

__all__ = [
    "DataError",
    "ExperimentError",
    "account_volume",
    "audit",
    "compare",
    "decode_message",
    "default_config",
    "encode_subprediction",
    "metric_suite",
    "metric_suite_from_labels",
    "noise_sweep",
    "spearman",
    "synthesize_csv",
]

__version__ = "0.1.0"


def default_config() -> dict[str, Any]:
    return json.loads(_core.default_config_json())


def _config(overrides: dict[str, Any]) -> str:
    config = default_config()
    unknown = set(overrides) - set(config)
    if unknown:
        raise TypeError(f"unknown run option(s): {', '.join(sorted(unknown))}")
    config.update(overrides)
    return json.dumps(config)


def compare(**options: Any) -> dict[str, Any]:
    """Runs the scenario comparison and returns the machine-readable report.

    Options are the run configuration keys, e.g. ``synth="items=2000"``,
    ``grid="25x10"``, ``scenarios=[2, 3]`` or ``csv="train_numeric.csv"``.
    """
    return json.loads(_core.compare_json(_config(options)))


def noise_sweep(**options: Any) -> dict[str, Any]:
    """Shared-pool MCC per noise level; same options as :func:`compare`."""
    return json.loads(_core.noise_sweep_json(_config(options)))


def audit(lines: Iterable[str], feature_ids: Sequence[str] = ()) -> dict[str, Any]:
    """Audits canonical transcript lines (one encoded message per line)."""
    return _core.audit_messages([l for l in lines if l.strip()], list(feature_ids))
