"""
Report Service Module

Artifact writers (CSV with 17 significant digits, JSON with sorted keys) and the
performance-communication trade-off table built from run summaries.
"""

import glob
import json
import logging
import os
from datetime import datetime, timezone
from typing import Any, Dict, List, Sequence

import pandas as pd

from errors import FormatError

logger = logging.getLogger(__name__)

__version__ = "1.0.0"

FLOAT_FORMAT = "%.17g"
MIB = 2 ** 20
TRADEOFF_COLUMNS = ['method', 'upload_mib', 'mean_acc', 'n_runs']


def write_csv(frame: pd.DataFrame, path: str) -> str:
    try:
        frame.to_csv(path, index=False, float_format=FLOAT_FORMAT)
    except OSError as e:
        logger.error(f"Failed to write {path}: {e}")
        raise
    logger.info(f"Wrote {path} ({len(frame)} rows)")
    return path


def write_json(data: Dict[str, Any], path: str) -> str:
    try:
        with open(path, "w", encoding="utf-8") as f:
            json.dump(data, f, sort_keys=True, indent=2)
            f.write("\n")
    except OSError as e:
        logger.error(f"Failed to write {path}: {e}")
        raise
    logger.info(f"Wrote {path}")
    return path


def run_metadata() -> Dict[str, Any]:
    """Non-deterministic run facts; kept under summary['meta'] only."""
    return {
        'version': __version__,
        'timestamp': datetime.now(timezone.utc).isoformat(),
    }


def method_entry(per_client_acc: Sequence[float], upload_bytes_per_client: int) -> Dict[str, Any]:
    accs = [float(a) for a in per_client_acc]
    return {
        'mean_acc': sum(accs) / len(accs) if accs else None,
        'per_client_acc': accs,
        'upload_bytes_per_client': int(upload_bytes_per_client),
    }


def load_summary(path: str) -> Dict[str, Any]:
    try:
        with open(path, "r", encoding="utf-8") as f:
            summary = json.load(f)
    except OSError as e:
        logger.error(f"Failed to read summary {path}: {e}")
        raise
    except json.JSONDecodeError as e:
        raise FormatError(f"{path} is not valid JSON: {e}") from e
    _check_summary(summary, path)
    return summary


def load_summaries(pattern: str) -> List[Dict[str, Any]]:
    """Summaries matching a glob pattern (a directory means <dir>/**/summary.json)."""
    if os.path.isdir(pattern):
        pattern = os.path.join(pattern, "**", "summary.json")
    paths = sorted(glob.glob(pattern, recursive=True))
    if not paths:
        raise FileNotFoundError(f"No summaries match {pattern}")
    return [load_summary(p) for p in paths]


def _check_summary(summary: Dict[str, Any], source: str = "summary") -> None:
    if not isinstance(summary, dict) or not isinstance(summary.get('methods'), dict):
        raise FormatError(f"{source} has no 'methods' table")
    for name, entry in summary['methods'].items():
        if not isinstance(entry, dict) or 'upload_bytes_per_client' not in entry or 'mean_acc' not in entry:
            raise FormatError(f"{source}: method '{name}' lacks upload_bytes_per_client or mean_acc")
    for entry in summary.get('potara', []):
        if not {'fedit_round', 'mean_acc', 'upload_bytes_per_client'} <= set(entry):
            raise FormatError(f"{source}: malformed potara entry {entry}")


def report_tradeoff(summaries: Sequence[Dict[str, Any]]) -> pd.DataFrame:
    """
    Rows of (method, upload MiB per client, mean accuracy), one per method and
    upload volume, averaged over the given runs. Merged models trained against
    the FedIT checkpoint of round t appear as 'POTARA (t)'.
    """
    if not summaries:
        raise ValueError("report_tradeoff needs at least one summary")
    groups: Dict[tuple, List[float]] = {}
    for i, summary in enumerate(summaries):
        _check_summary(summary, f"summary #{i}")
        for name, entry in summary['methods'].items():
            if entry['mean_acc'] is None:
                continue
            groups.setdefault((name, int(entry['upload_bytes_per_client'])), []).append(entry['mean_acc'])
        for entry in summary.get('potara', []):
            key = (f"POTARA ({int(entry['fedit_round'])})", int(entry['upload_bytes_per_client']))
            groups.setdefault(key, []).append(entry['mean_acc'])

    rows = [
        {'method': name, 'upload_mib': upload / MIB, 'mean_acc': sum(accs) / len(accs), 'n_runs': len(accs)}
        for (name, upload), accs in groups.items()
    ]
    frame = pd.DataFrame(rows, columns=TRADEOFF_COLUMNS)
    return frame.sort_values(['upload_mib', 'method'], kind="mergesort").reset_index(drop=True)
