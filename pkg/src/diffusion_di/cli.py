"""Command-line surface: ``python -m diffusion_di <verb> [options]``.

Every config field is also a flag (``--training.steps 2000``); flags override
``--set`` pairs, which override the YAML file given by ``--config``.
"""
from __future__ import annotations

import argparse
import logging
import pickle
import sys
from dataclasses import fields, is_dataclass
from pathlib import Path

from . import experiments as ex
from .features import FEATURES, resolve_feature_set
from .io import read_feature_cache
from .report import emit_report

log = logging.getLogger("diffusion_di")

VERBS = ("train", "extract", "verify", "sweep", "contaminate", "null-check", "ablate", "mia-eval", "report")


def _config_flags(parser: argparse.ArgumentParser) -> list:
    dests = []
    group = parser.add_argument_group("config fields")
    for f in fields(ex.ExperimentConfig):
        if f.default_factory is not ex.MISSING and is_dataclass(f.default_factory):
            for sub in fields(f.default_factory):
                key = f"{f.name}.{sub.name}"
                group.add_argument(f"--{key}", dest=key, metavar="V", default=None)
                dests.append(key)
        else:
            group.add_argument(f"--{f.name}", dest=f.name, metavar="V", default=None)
            dests.append(f.name)
    return dests


def build_parser():
    parser = argparse.ArgumentParser(prog="diffusion_di", description=__doc__.splitlines()[0])
    parser.add_argument("verb", choices=VERBS)
    parser.add_argument("--config", help="YAML experiment config")
    parser.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="config override")
    parser.add_argument("--out", help="report directory (default: <workdir>/report)")
    parser.add_argument("--size", type=int, help="suspect-set size for verify / null-check")
    parser.add_argument("--trials", type=int, help="override inference.trials for this verb")
    parser.add_argument("--features", help="comma-separated feature names or a preset name")
    parser.add_argument("--force", action="store_true", help="retrain / re-extract even if cached")
    parser.add_argument("-v", "--verbose", action="store_true")
    dests = _config_flags(parser)
    return parser, dests


def _features_arg(text):
    if not text:
        return None
    parts = [p.strip() for p in text.split(",") if p.strip()]
    if len(parts) == 1 and parts[0] not in FEATURES:
        return [s.name for s in resolve_feature_set(parts[0])]
    return parts


def _save_result(ws: ex.Workspace, name: str, value) -> None:
    d = ws.root / "results"
    d.mkdir(exist_ok=True)
    with open(d / f"{name}.pkl", "wb") as fh:
        pickle.dump(value, fh)


def _load_results(ws: ex.Workspace) -> dict:
    out = {}
    for p in sorted((ws.root / "results").glob("*.pkl")):
        with open(p, "rb") as fh:
            out[p.stem] = pickle.load(fh)
    return out


def run(argv=None) -> int:
    parser, dests = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")
    overrides = list(args.set) + [f"{k}={getattr(args, k)}" for k in dests if getattr(args, k) is not None]
    cfg = ex.load_config(args.config, overrides)
    ws = ex.Workspace(cfg)
    ex.save_config(cfg, ws.root / "config.yaml")
    feats = _features_arg(args.features)
    verb = args.verb
    try:
        if verb == "train":
            _, _, payload = ws.train(force=args.force)
            ov = payload["extra"]["overfitting"]
            print(f"checkpoint {ws.checkpoint}  member loss {ov['member_loss']:.4f}  "
                  f"held-out loss {ov['heldout_loss']:.4f}  d={ov['cohens_d']:.3f}")
            return 0
        if verb == "extract":
            fm = ws.features(force=args.force)
            print(f"{ws.feature_cache}: {len(fm)} samples x {len(fm.names)} features, "
                  f"{int((~fm.valid).sum())} failed")
            return 0
        if verb == "report":
            results = _load_results(ws)
            fm = read_feature_cache(ws.feature_cache) if ws.feature_cache.exists() else None
            paths = emit_report(results, args.out or ws.root / "report", ws.manifest()["manifest_hash"], fm)
            print("\n".join(str(p) for p in paths))
            return 0
        if verb == "verify":
            result = ex.run_cdi(cfg, args.size, feats, args.trials, workspace=ws)
            print(_verdict_line(result))
        elif verb == "sweep":
            result = ex.sweep_sample_size(cfg, None, feats, args.trials, workspace=ws)
            for n in result["sizes"]:
                print(f"|P|={n:5d}  " + _verdict_line(result["verdicts"][n]))
        elif verb == "contaminate":
            result = ex.contamination_run(cfg, trials=args.trials, workspace=ws)
            for r, per in result["verdicts"].items():
                for n, v in per.items():
                    print(f"ratio={r:.2f} |P|={n:5d}  " + _verdict_line(v))
        elif verb == "null-check":
            result = ex.false_positive_run(cfg, args.size, args.trials, workspace=ws)
            print(_verdict_line(result["verdict"]) + f"  reject_rate={result['reject_rate']:.4f}")
        elif verb == "ablate":
            subsets = {"custom": feats} if feats else ex.DEFAULT_ABLATIONS
            result = ex.ablate_features(cfg, subsets, args.trials, workspace=ws)
            for label, r in result.items():
                print(f"{label:20s} min |P| = {r['min_size']}")
        else:  # mia-eval
            result = ex.mia_evaluation(cfg, workspace=ws)
            for name, m in result.items():
                print(f"{name:16s} auc={m['auc']:.3f} tpr@1%={m['tpr_at_1pct_fpr']:.3f} acc={m['accuracy']:.3f}")
    except ex.PipelineError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    _save_result(ws, verb.replace("-", "_"), result)
    manifest = ws.manifest()
    emit_report({verb.replace("-", "_"): result}, Path(args.out or ws.root / "report"), manifest["manifest_hash"])
    return 0


def _verdict_line(v) -> str:
    decision = "REJECT H0 (set was trained on)" if v.reject else "inconclusive"
    return f"mean_p={v.mean_p:.3g} ci95=[{v.ci95[0]:.3g}, {v.ci95[1]:.3g}] trials={v.trials}  {decision}"


def main():
    sys.exit(run())


if __name__ == "__main__":
    main()
