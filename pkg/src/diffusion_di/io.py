"""Feature cache files and JSON records."""
from __future__ import annotations

import csv
import hashlib
import json
from pathlib import Path

import numpy as np

from .diffusion import file_sha256 as sha256_file
from .features import FeatureMatrix

FIXED_COLUMNS = ["sample_id", "split", "is_member"]


def write_feature_cache(path, fm: FeatureMatrix, sidecar: dict | None = None) -> str:
    """Write the feature CSV (rows sorted by sample_id) and its JSON sidecar.

    Returns the CSV's sha256.
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    order = sorted(range(len(fm)), key=lambda i: fm.sample_ids[i])
    split = fm.split or [""] * len(fm)
    member = fm.is_member if fm.is_member is not None else np.zeros(len(fm), bool)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(FIXED_COLUMNS + list(fm.names))
        for i in order:
            w.writerow([fm.sample_ids[i], split[i], int(bool(member[i]))] + [repr(float(v)) for v in fm.values[i]])
    digest = sha256_file(path)
    if sidecar is not None:
        with open(path.with_suffix(".json"), "w") as fh:
            json.dump({**sidecar, "feature_names": list(fm.names), "csv_sha256": digest,
                       "failures": fm.failures}, fh, indent=2, default=str)
    return digest


def read_feature_cache(path) -> FeatureMatrix:
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    header, body = rows[0], rows[1:]
    if header[:3] != FIXED_COLUMNS:
        raise ValueError(f"not a feature cache: header starts {header[:3]}")
    values = np.array([[float(v) for v in r[3:]] for r in body], dtype=np.float64).reshape(len(body), len(header) - 3)
    return FeatureMatrix(
        values=values,
        names=header[3:],
        sample_ids=[r[0] for r in body],
        is_member=np.array([r[2] == "1" for r in body], dtype=bool),
        split=[r[1] for r in body],
    )


def read_sidecar(path) -> dict:
    with open(Path(path).with_suffix(".json")) as fh:
        return json.load(fh)


def stable_hash(obj) -> str:
    """sha256 of the canonical JSON form of ``obj``."""
    return hashlib.sha256(json.dumps(obj, sort_keys=True, default=str).encode()).hexdigest()


def write_json(path, obj) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True, default=_default)


def _default(o):
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, (np.floating, np.integer, np.bool_)):
        return o.item()
    return str(o)
