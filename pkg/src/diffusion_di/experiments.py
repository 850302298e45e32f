"""Experiment orchestration: splits, training, feature caching and the CDI runs.

A run lives in a working directory holding the checkpoint, the feature cache,
a manifest and the emitted reports. Every stage is reused when its inputs
(tracked by hash) are unchanged.

Pools
-----
``P``  suspect samples, drawn from the training set (members)
``U``  unpublished validation samples, drawn from held-out data
``N``  a second held-out pool, disjoint from ``U``; it supplies the
       non-members for the false-positive and contamination runs
"""
from __future__ import annotations

import copy
import logging
import time
from dataclasses import MISSING, asdict, dataclass, field, fields, is_dataclass
from pathlib import Path
from typing import Optional

import numpy as np
import torch
import yaml
from scipy import stats

from . import __version__
from .data import ImageDataset, load_dataset
from .diffusion import (
    DenoiserConfig,
    NoiseSchedule,
    build_denoiser,
    denoising_loss,
    load_checkpoint,
    save_checkpoint,
    train,
)
from .features import (
    EXISTING_MIAS,
    FEATURES,
    GRAY_BOX,
    GRAY_BOX_FEATURES,
    ExtractionContext,
    FeatureMatrix,
    extract_all,
    feature_columns,
    resolve_feature_set,
)
from .io import read_feature_cache, sha256_file, stable_hash, write_feature_cache, write_json
from .mia import ScoredPopulation, set_level_mia
from .scoring import kfold_scores
from .stats import VerificationVerdict, aggregate_pvalues, cdi_verdict, cohens_d, power_at_alpha, welch_pvalues

log = logging.getLogger(__name__)


class PipelineError(RuntimeError):
    """A pipeline stage failed; ``stage`` names it."""

    def __init__(self, stage: str, message: str):
        super().__init__(f"[{stage}] {message}")
        self.stage = stage


# --------------------------------------------------------------------------
# Configuration


@dataclass
class DatasetConfig:
    name: str = "digits"


@dataclass
class SplitConfig:
    n_train: int = 256
    pool_size: int = 256  # size of each of the P, U and N pools


@dataclass
class ModelConfig:
    width: int = 48
    depth: int = 2
    class_conditional: bool = False


@dataclass
class TrainConfig:
    steps: int = 8000
    batch_size: int = 64
    lr: float = 2e-3
    T: int = 1000
    beta_start: float = 1e-4
    beta_end: float = 2e-2


@dataclass
class FeatureConfig:
    access: str = "white_box"
    batch_size: int = 64
    secmi_stride: int = 10
    secmi_step: int = 1
    pia_p: float = 5.0
    pian_norm: str = "paper"
    gm_fraction: float = 0.2
    gm_shared_noise: bool = True
    no_steps: int = 5


@dataclass
class InferenceConfig:
    k_folds: int = 5
    reg_strength: float = 1.0
    trials: int = 1000
    alpha: float = 0.01
    trial_mode: str = "refit"  # "refit": k-fold within each trial's subsets; "scores": subsample pool scores
    size: int = 256
    sizes: list = field(default_factory=lambda: [10, 20, 40, 80, 160, 256])
    ratios: list = field(default_factory=lambda: [0.0, 0.25, 0.5, 0.75, 1.0])
    contamination_sizes: list = field(default_factory=lambda: [64, 128, 256])


@dataclass
class ExperimentConfig:
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    splits: SplitConfig = field(default_factory=SplitConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    training: TrainConfig = field(default_factory=TrainConfig)
    features: FeatureConfig = field(default_factory=FeatureConfig)
    inference: InferenceConfig = field(default_factory=InferenceConfig)
    seed: int = 0
    workdir: str = "runs/default"

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        return _from_dict(cls, d or {})

    def with_overrides(self, overrides) -> "ExperimentConfig":
        """Apply ``section.key=value`` strings (values parsed as YAML scalars)."""
        d = self.to_dict()
        for item in overrides or []:
            key, _, raw = item.partition("=")
            if not _:
                raise ValueError(f"override {item!r} is not key=value")
            node = d
            parts = key.strip().split(".")
            for p in parts[:-1]:
                if p not in node or not isinstance(node[p], dict):
                    raise KeyError(f"unknown config section {p!r} in {key!r}")
                node = node[p]
            if parts[-1] not in node:
                raise KeyError(f"unknown config key {key!r}")
            node[parts[-1]] = yaml.safe_load(raw)
        return ExperimentConfig.from_dict(d)

    def stage_hash(self, *sections) -> str:
        d = self.to_dict()
        return stable_hash({s: d[s] for s in sections})


def _from_dict(cls, d):
    kwargs = {}
    known = {f.name: f for f in fields(cls)}
    for k, v in d.items():
        if k not in known:
            raise KeyError(f"unknown config key {k!r} for {cls.__name__}")
        factory = known[k].default_factory
        if factory is not MISSING and is_dataclass(factory) and isinstance(v, dict):
            v = _from_dict(factory, v)
        kwargs[k] = v
    return cls(**kwargs)


def load_config(path=None, overrides=None) -> ExperimentConfig:
    cfg = ExperimentConfig()
    if path is not None:
        with open(path) as fh:
            cfg = ExperimentConfig.from_dict(yaml.safe_load(fh) or {})
    return cfg.with_overrides(overrides or [])


def save_config(cfg: ExperimentConfig, path) -> None:
    with open(path, "w") as fh:
        yaml.safe_dump(cfg.to_dict(), fh, sort_keys=False)


# --------------------------------------------------------------------------
# Splits


@dataclass
class Splits:
    train: ImageDataset
    P: ImageDataset
    U: ImageDataset
    N: ImageDataset
    distribution_check: dict

    def pools(self):
        return {"P": self.P, "U": self.U, "N": self.N}


def prepare_splits(cfg: ExperimentConfig, dataset: Optional[ImageDataset] = None) -> Splits:
    """Seeded disjoint train / held-out split and the P, U, N pools.

    P is drawn from the training set; U and N from held-out data of the same
    source. A two-sample KS test on per-image pixel means between P and U is
    recorded as a distribution-mismatch guard.
    """
    ds = dataset if dataset is not None else load_dataset(cfg.dataset.name)
    n_train, pool = cfg.splits.n_train, cfg.splits.pool_size
    need_heldout = 2 * pool
    if pool > n_train or n_train + need_heldout > len(ds):
        raise PipelineError("splits", f"dataset has {len(ds)} samples; need n_train={n_train} >= pool={pool} "
                                      f"and {n_train} + {need_heldout} held-out samples")
    perm = np.random.default_rng(cfg.seed).permutation(len(ds))
    train_idx, held = perm[:n_train], perm[n_train:]
    P = ds.subset(train_idx[:pool])
    U = ds.subset(held[:pool])
    N = ds.subset(held[pool:2 * pool])
    ks = stats.ks_2samp(P.images.flatten(1).mean(1).numpy(), U.images.flatten(1).mean(1).numpy())
    check = {"ks_statistic": float(ks.statistic), "ks_pvalue": float(ks.pvalue), "mismatch_at_5pct": bool(ks.pvalue < 0.05)}
    if check["mismatch_at_5pct"]:
        log.warning("P and U pixel-mean distributions differ (KS p=%.3g)", ks.pvalue)
    return Splits(ds.subset(train_idx), P, U, N, check)


# --------------------------------------------------------------------------
# Workspace stages


class Workspace:
    """Paths and cached stages of one experiment directory."""

    def __init__(self, cfg: ExperimentConfig):
        self.cfg = cfg
        self.root = Path(cfg.workdir)
        self.root.mkdir(parents=True, exist_ok=True)
        self._splits = None

    checkpoint = property(lambda self: self.root / "model.pt")
    feature_cache = property(lambda self: self.root / "features.csv")
    manifest_path = property(lambda self: self.root / "manifest.json")

    @property
    def splits(self) -> Splits:
        if self._splits is None:
            self._splits = prepare_splits(self.cfg)
        return self._splits

    def schedule(self) -> NoiseSchedule:
        t = self.cfg.training
        return NoiseSchedule.linear(t.T, t.beta_start, t.beta_end)

    # -- training
    def train(self, force: bool = False):
        key = self.cfg.stage_hash("dataset", "splits", "model", "training", "seed")
        if self.checkpoint.exists() and not force:
            model, sched, payload = load_checkpoint(self.checkpoint)
            if payload["extra"].get("stage_hash") == key:
                return model, sched, payload
        s = self.splits
        mc = self.cfg.model
        num_classes = s.train.num_classes if mc.class_conditional else None
        model = build_denoiser(DenoiserConfig(channels=s.train.images.shape[1], width=mc.width, depth=mc.depth,
                                              num_classes=num_classes), self.cfg.seed)
        sched = self.schedule()
        tc = self.cfg.training
        t0 = time.time()
        try:
            res = train(model, s.train.images, sched, tc.steps, seed=self.cfg.seed, batch_size=tc.batch_size,
                        lr=tc.lr, labels=s.train.labels if num_classes else None, log_every=500, logger=log)
        except Exception as exc:  # tagged with the stage for the CLI
            raise PipelineError("train", str(exc)) from exc
        overfit = measure_overfitting(model, sched, s.P, s.U, seed=self.cfg.seed, conditional=bool(num_classes))
        extra = {"stage_hash": key, "train_seconds": time.time() - t0, "overfitting": overfit}
        save_checkpoint(self.checkpoint, model, sched, self.cfg.seed, res.losses, extra)
        sched.to_csv(self.root / "schedule.csv")
        return load_checkpoint(self.checkpoint)

    # -- features
    def features(self, force: bool = False) -> FeatureMatrix:
        model, sched, payload = self.train()
        ckpt_hash = sha256_file(self.checkpoint)
        fc = self.cfg.features
        key = stable_hash({"features": asdict(fc), "checkpoint": ckpt_hash, "seed": self.cfg.seed})
        if self.feature_cache.exists() and not force:
            side = _read_json(self.feature_cache.with_suffix(".json"))
            if side.get("stage_hash") == key:
                return read_feature_cache(self.feature_cache)
        ctx = self.context(model, sched)
        feature_set = "gray_box" if fc.access == GRAY_BOX else "all"
        conditional = model.config.num_classes is not None
        parts = []
        t0 = time.time()
        for name, pool in self.splits.pools().items():
            try:
                fm = extract_all(pool.images, ctx, pool.sample_ids, feature_set,
                                 y=pool.labels if conditional else None, batch_size=fc.batch_size)
            except Exception as exc:
                raise PipelineError("extract", str(exc)) from exc
            fm.split = [name] * len(fm)
            fm.is_member = np.full(len(fm), name == "P")
            parts.append(fm)
        fm = FeatureMatrix(np.vstack([p.values for p in parts]), parts[0].names,
                           sum((p.sample_ids for p in parts), []), np.concatenate([p.is_member for p in parts]),
                           sum((p.split for p in parts), []))
        fm.failures = {k: v for p in parts for k, v in p.failures.items()}
        sidecar = {
            "stage_hash": key,
            "feature_specs": [asdict(s) for s in resolve_feature_set(feature_set)],
            "options": ctx.options(),
            "seed": self.cfg.seed,
            "checkpoint_sha256": ckpt_hash,
            "extract_seconds": time.time() - t0,
        }
        write_feature_cache(self.feature_cache, fm, sidecar)
        return read_feature_cache(self.feature_cache)

    def context(self, model, sched) -> ExtractionContext:
        fc = self.cfg.features
        return ExtractionContext(model, sched, seed=self.cfg.seed, access=fc.access,
                                 secmi_stride=fc.secmi_stride, secmi_step=fc.secmi_step, pia_p=fc.pia_p,
                                 pian_norm=fc.pian_norm, gm_fraction=fc.gm_fraction,
                                 gm_shared_noise=fc.gm_shared_noise, no_steps=fc.no_steps)

    def pools(self, columns=None) -> dict:
        """Valid feature rows per pool as arrays, restricted to ``columns``."""
        fm = self.features()
        cols = columns or fm.names
        missing = [c for c in cols if c not in fm.names]
        if missing:
            raise PipelineError("features", f"columns not extracted: {missing}")
        clean = fm.drop_invalid()
        if clean.failures:
            log.warning("excluding %d samples with failed features", len(clean.failures))
        sel = clean.select(cols)
        return {name: sel.values[np.array([s == name for s in sel.split])] for name in ("P", "U", "N")}

    def manifest(self) -> dict:
        """Deterministic run description; its hash is stamped on every artifact."""
        body = {
            "config": self.cfg.to_dict(),
            "config_hash": stable_hash(self.cfg.to_dict()),
            "checkpoint_sha256": sha256_file(self.checkpoint) if self.checkpoint.exists() else None,
            "feature_cache_sha256": sha256_file(self.feature_cache) if self.feature_cache.exists() else None,
            "distribution_check": self.splits.distribution_check,
            "package_version": __version__,
        }
        if self.checkpoint.exists():
            body["overfitting"] = load_checkpoint(self.checkpoint)[2]["extra"].get("overfitting")
        body["manifest_hash"] = stable_hash(body)
        write_json(self.manifest_path, {**body, "written_at": time.strftime("%Y-%m-%dT%H:%M:%S")})
        return body


def _read_json(path) -> dict:
    import json

    try:
        with open(path) as fh:
            return json.load(fh)
    except (OSError, ValueError):
        return {}


@torch.no_grad()
def measure_overfitting(model, sched, members: ImageDataset, nonmembers: ImageDataset, t: int = 100,
                        seed: int = 0, repeats: int = 5, conditional: bool = False) -> dict:
    """Mean denoising loss at ``t`` for members vs non-members (the overfitting dial)."""
    g = torch.Generator().manual_seed(seed + 12345)

    def mean_loss(ds):
        y = ds.labels if conditional else None
        vals = [denoising_loss(ds.images, t, torch.randn(ds.images.shape, generator=g), model, sched, y)
                for _ in range(repeats)]
        return torch.stack(vals).mean(0).numpy()

    a, b = mean_loss(members), mean_loss(nonmembers)
    return {"t": t, "member_loss": float(a.mean()), "heldout_loss": float(b.mean()),
            "gap": float(b.mean() - a.mean()), "cohens_d": cohens_d(b, a)}


# --------------------------------------------------------------------------
# CDI trials


def _suspect_indices(rng, n_P: int, n_N: int, n: int, ratio: float):
    k_non = int(round(ratio * n))
    if n - k_non > n_P or k_non > n_N:
        raise PipelineError("verify", f"cannot draw {n - k_non} members and {k_non} non-members "
                                      f"from pools of {n_P} and {n_N}")
    return rng.choice(n_P, n - k_non, replace=False), rng.choice(n_N, k_non, replace=False)


def cdi_trials(P: np.ndarray, U: np.ndarray, n: int, *, N: Optional[np.ndarray] = None, ratio: float = 0.0,
               trials: int = 1000, alpha: float = 0.01, seed: int = 0, k_folds: int = 5,
               reg_strength: float = 1.0, mode: str = "refit") -> VerificationVerdict:
    """Aggregate CDI p-values over randomized trials at suspect-set size ``n``.

    ``mode="refit"`` draws ``n`` suspect and ``n`` validation rows per trial and
    runs the full k-fold scoring inside the trial, so the scorer never sees
    more than the ``2n`` samples under test. ``mode="scores"`` scores the
    whole pools once and subsamples the scores (:func:`cdi_verdict`).
    A fraction ``ratio`` of the suspect rows is taken from the non-member pool ``N``.
    """
    if N is None:
        N = P[:0]
    if mode == "scores":
        k_non = int(round(ratio * len(P)))
        rng = np.random.default_rng(seed)
        iP, iN = _suspect_indices(rng, len(P), len(N), min(len(P), len(U)), ratio) if k_non else (np.arange(len(P)), [])
        suspect = np.vstack([P[iP], N[iN]]) if len(iN) else P[iP]
        sP, sU = kfold_scores(suspect, U, k_folds, seed, reg_strength)
        return cdi_verdict(sP, sU, n, trials, alpha, seed)
    if mode != "refit":
        raise ValueError(f"unknown trial mode {mode!r}")
    if n > len(U):
        raise PipelineError("verify", f"n={n} exceeds validation pool {len(U)}")
    sa = np.empty((trials, n))
    sb = np.empty((trials, n))
    for i, child in enumerate(np.random.SeedSequence(seed).spawn(trials)):
        rng = np.random.default_rng(child)
        iP, iN = _suspect_indices(rng, len(P), len(N), n, ratio)
        suspect = np.vstack([P[iP], N[iN]])
        val = U[rng.choice(len(U), n, replace=False)]
        sa[i], sb[i] = kfold_scores(suspect, val, k_folds, int(rng.integers(2**31)), reg_strength)
    return aggregate_pvalues(welch_pvalues(sa, sb), alpha, n, seed)


def _trial_kwargs(cfg: ExperimentConfig, **over) -> dict:
    ic = cfg.inference
    kw = dict(trials=ic.trials, alpha=ic.alpha, seed=cfg.seed, k_folds=ic.k_folds,
              reg_strength=ic.reg_strength, mode=ic.trial_mode)
    kw.update({k: v for k, v in over.items() if v is not None})
    return kw


def _columns(feature_names) -> Optional[list]:
    return None if feature_names is None else feature_columns(list(feature_names))


def run_cdi(cfg: ExperimentConfig, size: Optional[int] = None, feature_names=None, trials: Optional[int] = None,
            workspace: Optional[Workspace] = None) -> VerificationVerdict:
    """Full pipeline at one suspect-set size: features -> k-fold scores -> aggregated Welch test."""
    ws = workspace or Workspace(cfg)
    pools = ws.pools(_columns(feature_names))
    n = size or cfg.inference.size
    return cdi_trials(pools["P"], pools["U"], n, N=pools["N"], **_trial_kwargs(cfg, trials=trials))


def sweep_sample_size(cfg: ExperimentConfig, sizes=None, feature_names=None, trials=None,
                      workspace: Optional[Workspace] = None) -> dict:
    """Verdicts per suspect-set size, plus a record of whether mean p decreases."""
    ws = workspace or Workspace(cfg)
    pools = ws.pools(_columns(feature_names))
    sizes = list(sizes or cfg.inference.sizes)
    verdicts = {n: cdi_trials(pools["P"], pools["U"], n, N=pools["N"], **_trial_kwargs(cfg, trials=trials))
                for n in sizes}
    return {"sizes": sizes, "verdicts": verdicts, "monotone": _monotone_with_ci([verdicts[n] for n in sizes])}


def _monotone_with_ci(verdicts) -> bool:
    """Mean p never rises beyond overlapping confidence intervals."""
    for a, b in zip(verdicts, verdicts[1:]):
        if b.mean_p > a.mean_p and b.ci95[0] > a.ci95[1]:
            return False
    return True


def contamination_run(cfg: ExperimentConfig, ratios=None, sizes=None, trials=None,
                      workspace: Optional[Workspace] = None) -> dict:
    """Verdicts when a ``ratio`` fraction of the suspect set are non-members."""
    ws = workspace or Workspace(cfg)
    pools = ws.pools()
    ratios = list(cfg.inference.ratios if ratios is None else ratios)
    sizes = list(sizes or cfg.inference.contamination_sizes)
    out = {}
    for r in ratios:
        out[r] = {n: cdi_trials(pools["P"], pools["U"], n, N=pools["N"], ratio=r,
                                **_trial_kwargs(cfg, trials=trials)) for n in sizes}
    return {"ratios": ratios, "sizes": sizes, "verdicts": out}


def false_positive_run(cfg: ExperimentConfig, size: Optional[int] = None, trials=None,
                       workspace: Optional[Workspace] = None) -> dict:
    """Suspect set drawn entirely from held-out data: CDI should stay inconclusive."""
    ws = workspace or Workspace(cfg)
    pools = ws.pools()
    n = size or min(cfg.inference.size, len(pools["N"]))
    # same sampling path as a contamination run at ratio 1
    v = cdi_trials(pools["P"], pools["U"], n, N=pools["N"], ratio=1.0, **_trial_kwargs(cfg, trials=trials))
    return {"size": n, "verdict": v, "mean_p": v.mean_p, "reject_rate": v.reject_rate(),
            "labels_all_nonmember": True}


def minimum_size(evaluate, lo: int, hi: int, resolution: int = 10):
    """Smallest ``n`` in ``[lo, hi]`` with ``evaluate(n)`` true, by doubling then bisection.

    Returns ``(n or None, {n: result})``; ``None`` when even ``hi`` fails.
    """
    seen = {}

    def ok(n):
        if n not in seen:
            seen[n] = evaluate(n)
        return seen[n]

    prev, n = None, lo
    while True:
        if ok(n):
            break
        if n >= hi:
            return None, seen
        prev, n = n, min(2 * n, hi)
    if prev is None:
        return n, seen
    bad, good = prev, n
    while good - bad > resolution:
        mid = (bad + good) // 2
        if ok(mid):
            good = mid
        else:
            bad = mid
    return good, seen


def ablate_features(cfg: ExperimentConfig, subsets: dict, trials=None, lo: int = 10, resolution: int = 10,
                    workspace: Optional[Workspace] = None) -> dict:
    """Minimum suspect-set size that rejects H0, per named feature subset."""
    ws = workspace or Workspace(cfg)
    out = {}
    for label, names in subsets.items():
        if not names:
            raise ValueError(f"feature subset {label!r} is empty")
        pools = ws.pools(feature_columns(list(names)))
        hi = min(len(pools["P"]), len(pools["U"]))
        verdicts = {}

        def evaluate(n, pools=pools, verdicts=verdicts):
            v = cdi_trials(pools["P"], pools["U"], n, **_trial_kwargs(cfg, trials=trials))
            verdicts[n] = v
            return v.reject

        n_min, _ = minimum_size(evaluate, lo, hi, resolution)
        out[label] = {"features": list(names), "min_size": n_min, "verdicts": verdicts}
    return out


DEFAULT_ABLATIONS = {
    "all_features": tuple(FEATURES),
    "existing_mias": EXISTING_MIAS,
    "gray_box": GRAY_BOX_FEATURES,
    "existing_mias+gm": EXISTING_MIAS + ("gradient_masking",),
    "existing_mias+ml": EXISTING_MIAS + ("multiple_loss",),
    "existing_mias+no": EXISTING_MIAS + ("noise_optimization",),
}


def pool_kfold_scores(cfg: ExperimentConfig, workspace: Optional[Workspace] = None, feature_names=None):
    """k-fold scores over the full P and U pools (each sample scored once)."""
    ws = workspace or Workspace(cfg)
    pools = ws.pools(_columns(feature_names))
    return kfold_scores(pools["P"], pools["U"], cfg.inference.k_folds, cfg.seed, cfg.inference.reg_strength,
                        return_folds=True)


def set_level_comparison(scores_P, scores_U, set_size: int, alpha: float = 0.01, n_sets: int = 1000,
                         seed: int = 0) -> dict:
    """Set-level max-score MIA vs the t-test's power, on the same scores."""
    d = cohens_d(scores_P, scores_U)
    power = power_at_alpha(d, set_size, set_size, alpha).power
    tpr = set_level_mia(None, scores_P, scores_U, set_size, n_sets, seed, fpr=alpha)
    return {"set_size": set_size, "cohens_d": d, "cdi_power": power, "set_level_tpr": tpr}


def mia_evaluation(cfg: ExperimentConfig, workspace: Optional[Workspace] = None) -> dict:
    """Per-feature single-sample MIA metrics on P vs U, plus the CDI scorer's k-fold scores."""
    from .mia import LOWER_IS_MEMBER, mia_metrics, roc_curve

    ws = workspace or Workspace(cfg)
    fm = ws.features().drop_invalid()
    P = fm.values[np.array([s == "P" for s in fm.split])]
    U = fm.values[np.array([s == "U" for s in fm.split])]
    out = {}
    for j, name in enumerate(fm.names):
        pop = ScoredPopulation.from_scores(P[:, j], U[:, j], LOWER_IS_MEMBER)
        out[name] = {**mia_metrics(pop), "roc": roc_curve(pop)}
    sP, sU, _, _ = pool_kfold_scores(cfg, ws)
    pop = ScoredPopulation.from_scores(sP, sU)
    out["cdi_scorer"] = {**mia_metrics(pop), "roc": roc_curve(pop)}
    return out


def config_copy(cfg: ExperimentConfig, **section_updates) -> ExperimentConfig:
    """Deep copy with ``section={key: value}`` updates."""
    new = copy.deepcopy(cfg)
    for section, values in section_updates.items():
        target = getattr(new, section)
        if isinstance(values, dict):
            for k, v in values.items():
                setattr(target, k, v)
        else:
            setattr(new, section, values)
    return new
