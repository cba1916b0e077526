"""Import of plain CSV recordings into the ECGB corpus layout.

Input layout: a directory with ``manifest.json`` and one CSV per record.
Each CSV has a header row of lead names and one numeric column per lead.
The manifest looks like::

    {"sample_rate_hz": 500,
     "records": [{"file": "a.csv", "labels": {"class_label": 1}},
                 {"file": "b.csv", "sample_rate_hz": 250}]}

A per-record ``sample_rate_hz`` overrides the top-level default.
"""

from __future__ import annotations

import csv
import json
from pathlib import Path

import numpy as np

from .ecg import (
    BASE_LEADS,
    CANONICAL_LEADS,
    EcgRecord,
    derive_full_leads,
    resample,
)

TARGET_HZ = 250.0
MANIFEST_NAME = "manifest.json"


class ConvertError(ValueError):
    pass


def read_manifest(path) -> list[dict]:
    path = Path(path)
    text = path.read_text(encoding="utf-8")
    try:
        manifest = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConvertError(f"{path}:{exc.lineno}: {exc.msg}") from None
    if not isinstance(manifest, dict) or not isinstance(manifest.get("records"), list):
        raise ConvertError(f"{path}: expected an object with a 'records' list")
    default_rate = manifest.get("sample_rate_hz")
    entries = []
    for k, entry in enumerate(manifest["records"]):
        if not isinstance(entry, dict) or not isinstance(entry.get("file"), str):
            raise ConvertError(f"{path}: records[{k}] needs a 'file' string")
        rate = entry.get("sample_rate_hz", default_rate)
        if not isinstance(rate, (int, float)) or isinstance(rate, bool) or rate <= 0:
            raise ConvertError(f"{path}: records[{k}] ({entry['file']}) has no valid sample_rate_hz")
        labels = entry.get("labels", {})
        if not isinstance(labels, dict) or "record" in labels:
            raise ConvertError(f"{path}: records[{k}] labels must be an object without a 'record' key")
        entries.append({"file": entry["file"], "sample_rate_hz": float(rate), "labels": labels})
    return entries


def read_csv_record(path, sample_rate_hz: float) -> EcgRecord:
    path = Path(path)
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise ConvertError(f"{path}:1: empty file, expected a header row of lead names")
    header = [h.strip() for h in rows[0]]
    unknown = [h for h in header if h not in CANONICAL_LEADS]
    if unknown:
        raise ConvertError(f"{path}:1: unknown lead names {unknown}")
    if len(set(header)) != len(header):
        raise ConvertError(f"{path}:1: duplicate lead names")
    values = []
    for lineno, row in enumerate(rows[1:], 2):
        if not row or all(not c.strip() for c in row):
            continue
        if len(row) != len(header):
            raise ConvertError(f"{path}:{lineno}: expected {len(header)} columns, found {len(row)}")
        try:
            values.append([float(c) for c in row])
        except ValueError:
            raise ConvertError(f"{path}:{lineno}: non-numeric value") from None
    if len(values) < 2:
        raise ConvertError(f"{path}: needs at least two samples")
    samples = np.asarray(values, dtype=np.float64).T
    if not np.all(np.isfinite(samples)):
        raise ConvertError(f"{path}: non-finite sample values")
    return EcgRecord(tuple(header), sample_rate_hz, samples)


def standardise_leads(record: EcgRecord, keep12: bool, source: str = "") -> EcgRecord:
    """Reorder to the 8 base leads, or to all 12 with the limb leads derived when absent."""
    missing = [lead for lead in BASE_LEADS if lead not in record.lead_ids]
    if missing:
        raise ConvertError(f"{source}: cannot derive a standard lead set, missing {', '.join(missing)}")
    base = record.select(list(BASE_LEADS))
    if not keep12:
        return base
    if all(lead in record.lead_ids for lead in CANONICAL_LEADS):
        return record.select(list(CANONICAL_LEADS))
    return derive_full_leads(base)


def convert_record(path, sample_rate_hz: float, keep12: bool = False) -> EcgRecord:
    record = read_csv_record(path, sample_rate_hz)
    record = standardise_leads(record, keep12, str(path))
    if record.sample_rate_hz != TARGET_HZ:
        record = resample(record, TARGET_HZ)
    return record

