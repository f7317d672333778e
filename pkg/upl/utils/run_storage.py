import csv
import hashlib
import json
import logging
from pathlib import Path

import numpy as np

from .metrics import EMPTY, CaseResult, MetricError

logger = logging.getLogger(__name__)

MANIFEST_NAME = 'manifest-{command}.json'
RESULT_FIELDS = ['method', 'case_id', 'class', 'dice', 'assd', 'flags']
SUMMARY_FIELDS = ['method', 'class', 'n', 'dice_mean', 'dice_sd', 'assd_mean', 'assd_sd', 'assd_empty']


def json_safe(value):
    """Non-finite floats become None so the result stays strict JSON."""
    if isinstance(value, dict):
        return {k: json_safe(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [json_safe(v) for v in value]
    if isinstance(value, (float, np.floating)) and not np.isfinite(value):
        return None
    return value


def content_hash(path):
    """Git-style blob hash of a file's bytes."""
    data = Path(path).read_bytes()
    return hashlib.sha1(b'blob %d\0' % len(data) + data).hexdigest()


def write_manifest(out_dir, command, config, seeds, inputs, outputs, timing=None):
    """
    Record one command run: config snapshot, seeds, input hashes and outputs.
    Returns the manifest path.
    """
    out_dir = Path(out_dir)
    manifest = {
        'command': command,
        'config': config,
        'seeds': seeds,
        'inputs': {str(p): content_hash(p) for p in sorted(map(str, inputs))},
        'outputs': {str(p): content_hash(p) for p in sorted(map(str, outputs))},
        'timing': timing or {},
    }
    path = out_dir / MANIFEST_NAME.format(command=command)
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True, default=str) + '\n')
    logger.info('%s: %d input(s), %d output(s) recorded in %s', command, len(inputs), len(outputs), path)
    return path


def read_manifest(path):
    """
    Load a manifest written by write_manifest.
    Returns an empty dict when the file is missing or unreadable.
    """
    try:
        return json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError):
        return {}


def _fmt(value):
    return '' if value is EMPTY else f'{value:.10g}'


def write_results_csv(path, results):
    with open(path, 'w', newline='') as fh:
        writer = csv.writer(fh, lineterminator='\n')
        writer.writerow(RESULT_FIELDS)
        for r in results:
            for c in sorted(r.dice):
                flags = 'assd_empty' if r.assd.get(c) is EMPTY else ''
                writer.writerow([r.method, r.case_id, c, _fmt(r.dice[c]), _fmt(r.assd.get(c)), flags])
    return path


def read_results_csv(path):
    rows = {}
    with open(path, newline='') as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames != RESULT_FIELDS:
            raise MetricError(f'{path}: unexpected CSV header {reader.fieldnames}')
        for row in reader:
            key = (row['method'], int(row['case_id']))
            result = rows.setdefault(key, CaseResult(case_id=key[1], dice={}, assd={}, method=key[0]))
            c = int(row['class'])
            result.dice[c] = float(row['dice'])
            result.assd[c] = float(row['assd']) if row['assd'] else EMPTY
    return list(rows.values())


def write_summary_csv(path, summary, extra_rows=()):
    return write_rows_csv(path, SUMMARY_FIELDS + ['t_stat', 'p_value'], list(summary) + list(extra_rows))


def write_text(path, text):
    Path(path).write_text(text)
    return path


def write_rows_csv(path, fieldnames, rows):
    with open(path, 'w', newline='') as fh:
        writer = csv.DictWriter(fh, fieldnames=fieldnames, lineterminator='\n')
        writer.writeheader()
        for row in rows:
            writer.writerow({k: (f'{v:.10g}' if isinstance(v, float) else v) for k, v in row.items()})
    return path
