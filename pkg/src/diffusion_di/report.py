"""Report emission: a JSON summary, CSV tables and p-value plots."""
from __future__ import annotations

import csv
import os
from pathlib import Path
from typing import Optional

import numpy as np

from .features import FeatureMatrix
from .io import write_feature_cache, write_json
from .mia import write_roc_csv
from .stats import VerificationVerdict


def _record(v: VerificationVerdict, manifest_hash) -> dict:
    r = v.to_record(manifest_hash)
    r["reject_rate"] = v.reject_rate()
    return r


def _summarize(key: str, value, manifest_hash):
    """JSON-ready form of one result; tables are returned separately as ``(name, header, rows)``."""
    tables = []
    if isinstance(value, VerificationVerdict):
        return _record(value, manifest_hash), tables
    if isinstance(value, dict) and "verdicts" in value and "ratios" in value:
        rows = [[r, n, *_verdict_row(v)] for r, per in value["verdicts"].items() for n, v in per.items()]
        tables.append((f"{key}.csv", ["ratio", "size", *VERDICT_COLUMNS], rows))
        return {"ratios": value["ratios"], "sizes": value["sizes"],
                "verdicts": {str(r): {str(n): _record(v, manifest_hash) for n, v in per.items()}
                             for r, per in value["verdicts"].items()}}, tables
    if isinstance(value, dict) and "verdicts" in value and "sizes" in value:
        rows = [[n, *_verdict_row(v)] for n, v in value["verdicts"].items()]
        tables.append((f"{key}.csv", ["size", *VERDICT_COLUMNS], rows))
        return {"sizes": value["sizes"], "monotone": value.get("monotone"),
                "verdicts": {str(n): _record(v, manifest_hash) for n, v in value["verdicts"].items()}}, tables
    if isinstance(value, dict) and value and all(isinstance(v, dict) and "min_size" in v for v in value.values()):
        rows = [[label, v["min_size"], ";".join(v["features"])] for label, v in value.items()]
        tables.append((f"{key}.csv", ["subset", "min_size", "features"], rows))
        return {label: {"features": v["features"], "min_size": v["min_size"],
                        "verdicts": {str(n): _record(x, manifest_hash) for n, x in sorted(v["verdicts"].items())}}
                for label, v in value.items()}, tables
    if isinstance(value, dict) and "verdict" in value:
        out = {k: v for k, v in value.items() if k != "verdict"}
        out["verdict"] = _record(value["verdict"], manifest_hash)
        return out, tables
    if isinstance(value, dict) and value and all(isinstance(v, dict) and "auc" in v for v in value.values()):
        rows = [[name, m["auc"], m["tpr_at_1pct_fpr"], m["accuracy"]] for name, m in value.items()]
        tables.append((f"{key}.csv", ["feature", "auc", "tpr_at_1pct_fpr", "accuracy"], rows))
        return {name: {k: v for k, v in m.items() if k != "roc"} for name, m in value.items()}, tables
    return value, tables


VERDICT_COLUMNS = ["mean_p", "ci_low", "ci_high", "reject", "reject_rate", "trials"]


def _verdict_row(v: VerificationVerdict) -> list:
    return [v.mean_p, v.ci95[0], v.ci95[1], int(v.reject), v.reject_rate(), v.trials]


def _write_csv(path: Path, header, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for r in rows:
            w.writerow([repr(float(x)) if isinstance(x, (float, np.floating)) else x for x in r])


def _check_writable(outdir: Path) -> None:
    try:
        outdir.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise PermissionError(f"cannot create report directory {outdir}: {exc}") from exc
    if not os.access(outdir, os.W_OK):
        raise PermissionError(f"report directory {outdir} is not writable")


def emit_report(results: dict, outdir, manifest_hash: Optional[str] = None,
                features: Optional[FeatureMatrix] = None, plots: bool = True) -> list:
    """Write ``summary.json``, one CSV per tabular result and PNG plots.

    ``results`` maps a result name to the output of one experiment operation.
    Output is a pure function of its inputs, so re-emission is idempotent.
    Returns the written paths.
    """
    outdir = Path(outdir)
    _check_writable(outdir)
    summary = {"manifest_hash": manifest_hash, "results": {}}
    written = []
    for key in sorted(results):
        value, tables = _summarize(key, results[key], manifest_hash)
        summary["results"][key] = value
        for name, header, rows in tables:
            _write_csv(outdir / name, header, rows)
            written.append(outdir / name)
        if isinstance(results[key], dict):
            for feat, m in results[key].items():
                if isinstance(m, dict) and "roc" in m:
                    path = outdir / f"{key}_roc_{feat}.csv"
                    write_roc_csv(path, m["roc"])
                    written.append(path)
    if features is not None:
        path = outdir / "features.csv"
        write_feature_cache(path, features, {"manifest_hash": manifest_hash})
        written.append(path)
    path = outdir / "summary.json"
    write_json(path, summary)
    written.append(path)
    if plots:
        written.extend(_plots(results, outdir))
    return written


def _plots(results: dict, outdir: Path) -> list:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    out = []
    for key in sorted(results):
        value = results[key]
        if not isinstance(value, dict) or "verdicts" not in value:
            continue
        curves = {}
        if "ratios" in value:
            for r, per in value["verdicts"].items():
                curves[f"non-member ratio {r:g}"] = per
        elif "sizes" in value:
            curves["all features"] = value["verdicts"]
        if not curves:
            continue
        fig, ax = plt.subplots(figsize=(5, 3.5))
        alpha = None
        for label, per in curves.items():
            sizes = sorted(per)
            # floor keeps exact zeros visible on the log axis
            mean = np.maximum([per[n].mean_p for n in sizes], 1e-12)
            lo = np.maximum([per[n].ci95[0] for n in sizes], 1e-12)
            hi = np.array([per[n].ci95[1] for n in sizes])
            ax.plot(sizes, mean, marker="o", label=label)
            ax.fill_between(sizes, lo, hi, alpha=0.25)
            alpha = per[sizes[0]].alpha
        if alpha is not None:
            ax.axhline(alpha, color="k", ls="--", lw=1, label=f"alpha={alpha:g}")
        ax.set_xlabel("|P|")
        ax.set_ylabel("mean p-value")
        ax.set_yscale("log")
        ax.legend(fontsize=7)
        fig.tight_layout()
        path = outdir / f"{key}.png"
        fig.savefig(path, dpi=100, metadata={"Software": None})
        plt.close(fig)
        out.append(path)
    return out
